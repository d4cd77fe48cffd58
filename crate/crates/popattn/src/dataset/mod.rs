//! Post ingestion, per-user popularity labeling, and split generation.
//!
//! Within each user, posts are ranked by likes; the top quarter become
//! positive examples, the bottom quarter negative, and the middle half is
//! discarded, so classes balance 1:1 exactly. Splits are sampled per class
//! (20% test, then 10% of the remainder validation) to keep that balance in
//! every split.

mod features;
mod tokenize;
mod vocab;

pub use features::{read_features, write_features, FeatureMatrix, FEATURES_MAGIC};
pub use tokenize::{is_emoji_token, tokenize};
pub use vocab::{Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Post {
    pub user_id: String,
    pub post_id: String,
    pub likes: u64,
    pub caption: String,
    /// Row index into the corpus feature file. Serialized as `features_ref`,
    /// the field name of the posts file format.
    #[serde(rename = "features_ref")]
    pub features_row: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user_id: String,
    pub post_id: String,
    pub caption: String,
    pub features_row: usize,
    /// true ⇔ the post sat in its user's top quarter by likes.
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEntry {
    pub user_id: String,
    pub post_id: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SplitManifest {
    pub seed: u64,
    /// One entry per labeled example, in example order.
    pub entries: Vec<SplitEntry>,
}

/// Reject duplicate (user, post) keys and feature rows past the end of the
/// matrix before anything downstream trips over them.
pub fn validate_corpus(posts: &[Post], features: &FeatureMatrix) -> Result<()> {
    let mut seen = HashSet::with_capacity(posts.len());
    for post in posts {
        if !seen.insert((post.user_id.as_str(), post.post_id.as_str())) {
            return Err(Error::invalid(format!(
                "duplicate post ({}, {})",
                post.user_id, post.post_id
            )));
        }
        if post.features_row >= features.rows() {
            return Err(Error::invalid(format!(
                "post ({}, {}) points at feature row {} but the file has {} rows",
                post.user_id,
                post.post_id,
                post.features_row,
                features.rows()
            )));
        }
    }
    Ok(())
}

/// Label one user's posts. Users with fewer than four posts produce nothing
/// (their quartiles are undefined); ties at a quartile boundary break by
/// post id so the cut is exact and reproducible.
pub fn label_posts(user_posts: &[&Post]) -> Vec<LabeledExample> {
    let n = user_posts.len() / 4;
    if n == 0 {
        return Vec::new();
    }
    let mut ranked: Vec<&Post> = user_posts.to_vec();
    ranked.sort_by(|a, b| a.likes.cmp(&b.likes).then_with(|| a.post_id.cmp(&b.post_id)));

    let example = |post: &Post, label: bool| LabeledExample {
        user_id: post.user_id.clone(),
        post_id: post.post_id.clone(),
        caption: post.caption.clone(),
        features_row: post.features_row,
        label,
    };
    let mut out = Vec::with_capacity(2 * n);
    out.extend(ranked[..n].iter().map(|p| example(p, false)));
    out.extend(ranked[ranked.len() - n..].iter().map(|p| example(p, true)));
    out
}

/// Label a whole corpus, visiting users in sorted order so output order is
/// independent of input order.
pub fn label_all(posts: &[Post]) -> Vec<LabeledExample> {
    let mut by_user: BTreeMap<&str, Vec<&Post>> = BTreeMap::new();
    for post in posts {
        by_user.entry(&post.user_id).or_default().push(post);
    }
    by_user
        .values()
        .flat_map(|user_posts| label_posts(user_posts))
        .collect()
}

/// Assign each example to train/val/test: 20% of each class to test, then
/// 10% of what remains to validation. Same seed, same manifest.
pub fn split(examples: &[LabeledExample], seed: u64) -> SplitManifest {
    let mut assignment = vec![Split::Train; examples.len()];
    for (tag, label) in [("split.neg", false), ("split.pos", true)] {
        let mut idxs: Vec<usize> = (0..examples.len())
            .filter(|i| examples[*i].label == label)
            .collect();
        let mut rng = rng::seeded(seed, tag);
        idxs.shuffle(&mut rng);
        let n_test = idxs.len() / 5;
        let n_val = (idxs.len() - n_test) / 10;
        for (rank, i) in idxs.into_iter().enumerate() {
            assignment[i] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    let entries = examples
        .iter()
        .zip(&assignment)
        .map(|(ex, split)| SplitEntry {
            user_id: ex.user_id.clone(),
            post_id: ex.post_id.clone(),
            split: *split,
        })
        .collect();
    SplitManifest { seed, entries }
}

impl SplitManifest {
    /// Split of each example, in example order. Every example must appear in
    /// the manifest exactly once.
    pub fn assignments(&self, examples: &[LabeledExample]) -> Result<Vec<Split>> {
        let mut by_key: BTreeMap<(&str, &str), Split> = BTreeMap::new();
        for entry in &self.entries {
            by_key.insert((&entry.user_id, &entry.post_id), entry.split);
        }
        if by_key.len() != self.entries.len() {
            return Err(Error::invalid("split manifest repeats a post"));
        }
        examples
            .iter()
            .map(|ex| {
                by_key
                    .get(&(ex.user_id.as_str(), ex.post_id.as_str()))
                    .copied()
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "example ({}, {}) missing from split manifest",
                            ex.user_id, ex.post_id
                        ))
                    })
            })
            .collect()
    }

    /// Partition examples into (train, val, test) in manifest order.
    pub fn apply<'a>(
        &self,
        examples: &'a [LabeledExample],
    ) -> Result<(Vec<&'a LabeledExample>, Vec<&'a LabeledExample>, Vec<&'a LabeledExample>)> {
        let assignments = self.assignments(examples)?;
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (ex, split) in examples.iter().zip(assignments) {
            match split {
                Split::Train => train.push(ex),
                Split::Val => val.push(ex),
                Split::Test => test.push(ex),
            }
        }
        Ok((train, val, test))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    seed: u64,
}

pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, &ManifestHeader { seed: manifest.seed })?;
    out.write_all(b"\n")?;
    for entry in &manifest.entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_split_manifest(path: &Path) -> Result<SplitManifest> {
    let mut lines = jsonl_lines(path)?;
    let header_line = lines
        .next()
        .ok_or_else(|| line_error(path, 1, "missing seed header line".to_string()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| line_error(path, 1, format!("bad seed header: {e}")))?;
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        entries.push(
            serde_json::from_str(&line)
                .map_err(|e| line_error(path, lineno as u64 + 2, format!("bad entry: {e}")))?,
        );
    }
    Ok(SplitManifest { seed: header.seed, entries })
}

pub fn write_posts(path: &Path, posts: &[Post]) -> Result<()> {
    write_jsonl(path, posts)
}

pub fn read_posts(path: &Path) -> Result<Vec<Post>> {
    read_jsonl(path)
}

pub fn write_examples(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    write_jsonl(path, examples)
}

pub fn read_examples(path: &Path) -> Result<Vec<LabeledExample>> {
    read_jsonl(path)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for (lineno, line) in jsonl_lines(path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| line_error(path, lineno as u64 + 1, e.to_string()))?,
        );
    }
    Ok(rows)
}

fn jsonl_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    Ok(BufReader::new(fs::File::open(path)?).lines())
}

fn line_error(path: &Path, lineno: u64, msg: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset: lineno,
        msg: format!("line {lineno}: {msg}"),
    }
}
