//! Per-user environment vectors.
//!
//! A user's image environment is the arithmetic mean of their training-split
//! image feature rows; their topic environment is the mean of the same posts'
//! topic distributions. Both stay fixed when scoring that user's validation
//! and test posts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{write_features, FeatureMatrix, LabeledExample};
use crate::error::{Error, Result};
use crate::lda::TopicDistribution;

#[derive(Debug, Clone)]
pub struct UserEnvironment {
    pub user_id: String,
    /// Mean image feature vector, length d1.
    pub image: Vec<f32>,
    /// Mean topic distribution, length K; still sums to 1.
    pub topic: Vec<f32>,
    pub n_posts_used: usize,
}

#[derive(Debug, Default)]
pub struct EnvironmentMap {
    by_user: BTreeMap<String, UserEnvironment>,
}

impl EnvironmentMap {
    pub fn get(&self, user_id: &str) -> Option<&UserEnvironment> {
        self.by_user.get(user_id)
    }

    pub fn len(&self) -> usize {
        self.by_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserEnvironment> {
        self.by_user.values()
    }

    /// Add one user's environment, replacing any previous entry.
    pub fn insert(&mut self, env: UserEnvironment) {
        self.by_user.insert(env.user_id.clone(), env);
    }
}

/// Average each user's training posts. `topics` is parallel to `train`;
/// feature rows come from the corpus feature matrix. Sums run in f64 so the
/// result is independent of post order.
pub fn compute_environments(
    train: &[&LabeledExample],
    topics: &[TopicDistribution],
    features: &FeatureMatrix,
) -> Result<EnvironmentMap> {
    if train.is_empty() {
        return Err(Error::invalid("no training posts to build environments from"));
    }
    if topics.len() != train.len() {
        return Err(Error::invalid(format!(
            "{} topic vectors for {} training posts",
            topics.len(),
            train.len()
        )));
    }
    let d1 = features.row_len();
    let k = topics[0].len();

    struct Acc {
        image: Vec<f64>,
        topic: Vec<f64>,
        n: usize,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for (ex, topic) in train.iter().zip(topics) {
        if topic.len() != k {
            return Err(Error::invalid(format!(
                "topic vector for ({}, {}) has length {}, want {k}",
                ex.user_id,
                ex.post_id,
                topic.len()
            )));
        }
        let row = features.row(ex.features_row)?;
        let entry = acc.entry(&ex.user_id).or_insert_with(|| Acc {
            image: vec![0.0; d1],
            topic: vec![0.0; k],
            n: 0,
        });
        for (sum, v) in entry.image.iter_mut().zip(row) {
            *sum += *v as f64;
        }
        for (sum, v) in entry.topic.iter_mut().zip(topic) {
            *sum += *v as f64;
        }
        entry.n += 1;
    }

    let mut by_user = BTreeMap::new();
    for (user_id, a) in acc {
        let n = a.n as f64;
        by_user.insert(
            user_id.to_string(),
            UserEnvironment {
                user_id: user_id.to_string(),
                image: a.image.iter().map(|s| (s / n) as f32).collect(),
                topic: a.topic.iter().map(|s| (s / n) as f32).collect(),
                n_posts_used: a.n,
            },
        );
    }
    Ok(EnvironmentMap { by_user })
}

#[derive(Debug, Serialize, Deserialize)]
struct EnvHeader {
    format: String,
    image_dim: usize,
    topic_dim: usize,
    lda_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnvEntry {
    user_id: String,
    n_posts_used: usize,
    /// Row index into the payload feature file.
    row: usize,
}

const ENV_FORMAT: &str = "popattn.env.v1";

/// Write the map as a JSON Lines index plus a binary payload holding one
/// `[d1 + K]` row per user (image mean then topic mean, concatenated).
pub fn write_environments(
    index_path: &Path,
    payload_path: &Path,
    map: &EnvironmentMap,
    lda_hash: &str,
) -> Result<()> {
    let (mut d1, mut k) = (0, 0);
    if let Some(first) = map.iter().next() {
        d1 = first.image.len();
        k = first.topic.len();
    }
    let mut lines = Vec::new();
    let header = EnvHeader {
        format: ENV_FORMAT.to_string(),
        image_dim: d1,
        topic_dim: k,
        lda_hash: lda_hash.to_string(),
    };
    lines.push(serde_json::to_string(&header)?);
    let mut payload = Vec::with_capacity(map.len() * (d1 + k));
    for (row, env) in map.iter().enumerate() {
        lines.push(serde_json::to_string(&EnvEntry {
            user_id: env.user_id.clone(),
            n_posts_used: env.n_posts_used,
            row,
        })?);
        payload.extend_from_slice(&env.image);
        payload.extend_from_slice(&env.topic);
    }
    fs::write(index_path, lines.join("\n") + "\n")?;
    let matrix = FeatureMatrix::new(map.len(), vec![d1 + k], payload)?;
    write_features(payload_path, &matrix)
}

/// Read the pair written by [`write_environments`]. Callers pass the hash of
/// the topic model they are about to use; a different hash is rejected.
pub fn read_environments(
    index_path: &Path,
    payload_path: &Path,
    expect_lda_hash: Option<&str>,
) -> Result<EnvironmentMap> {
    let reader = BufReader::new(fs::File::open(index_path)?);
    let mut lines = reader.lines();
    let fmt = |lineno: u64, msg: String| Error::Format {
        path: index_path.display().to_string(),
        offset: lineno,
        msg,
    };
    let header_line = lines
        .next()
        .ok_or_else(|| fmt(1, "missing header line".into()))??;
    let header: EnvHeader = serde_json::from_str(&header_line)
        .map_err(|e| fmt(1, format!("bad header: {e}")))?;
    if header.format != ENV_FORMAT {
        return Err(fmt(1, format!("unknown format tag {:?}", header.format)));
    }
    if let Some(want) = expect_lda_hash {
        if header.lda_hash != want {
            return Err(Error::Incompatible(format!(
                "environments were built from topic model {} but {} is loaded",
                &header.lda_hash[..12.min(header.lda_hash.len())],
                &want[..12.min(want.len())]
            )));
        }
    }
    let matrix = crate::dataset::read_features(payload_path)?;
    let width = header.image_dim + header.topic_dim;
    if matrix.row_len() != width {
        return Err(Error::Incompatible(format!(
            "environment payload rows have {} values, index expects {width}",
            matrix.row_len()
        )));
    }
    let mut by_user = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: EnvEntry = serde_json::from_str(&line)
            .map_err(|e| fmt(lineno as u64 + 2, format!("bad entry: {e}")))?;
        let row = matrix.row(entry.row)?;
        by_user.insert(
            entry.user_id.clone(),
            UserEnvironment {
                user_id: entry.user_id,
                image: row[..header.image_dim].to_vec(),
                topic: row[header.image_dim..].to_vec(),
                n_posts_used: entry.n_posts_used,
            },
        );
    }
    Ok(EnvironmentMap { by_user })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(user: &str, post: &str, row: usize) -> LabeledExample {
        LabeledExample {
            user_id: user.to_string(),
            post_id: post.to_string(),
            caption: String::new(),
            features_row: row,
            label: true,
        }
    }

    fn tiny_corpus() -> (Vec<LabeledExample>, Vec<TopicDistribution>, FeatureMatrix) {
        let examples = vec![
            example("ada", "p0", 0),
            example("ada", "p1", 1),
            example("bob", "p2", 2),
        ];
        let topics = vec![vec![0.7, 0.3], vec![0.1, 0.9], vec![0.5, 0.5]];
        let features =
            FeatureMatrix::new(3, vec![2], vec![1.0, 0.0, 0.0, 1.0, 4.0, -2.0]).unwrap();
        (examples, topics, features)
    }

    #[test]
    fn means_match_hand_arithmetic() {
        let (examples, topics, features) = tiny_corpus();
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        let map = compute_environments(&refs, &topics, &features).unwrap();

        let ada = map.get("ada").unwrap();
        assert_eq!(ada.image, vec![0.5, 0.5]);
        assert!((ada.topic[0] - 0.4).abs() < 1e-7 && (ada.topic[1] - 0.6).abs() < 1e-7);
        assert_eq!(ada.n_posts_used, 2);

        // A single-post user's environment is that post verbatim.
        let bob = map.get("bob").unwrap();
        assert_eq!(bob.image, vec![4.0, -2.0]);
        assert_eq!(bob.topic, vec![0.5, 0.5]);
        assert_eq!(bob.n_posts_used, 1);
    }

    #[test]
    fn topic_means_remain_probability_vectors() {
        let (examples, topics, features) = tiny_corpus();
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        let map = compute_environments(&refs, &topics, &features).unwrap();
        for env in map.iter() {
            let sum: f32 = env.topic.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "{} sums to {sum}", env.user_id);
            assert!(env.topic.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn post_order_does_not_matter() {
        let (examples, topics, features) = tiny_corpus();
        let fwd: Vec<&LabeledExample> = examples.iter().collect();
        let a = compute_environments(&fwd, &topics, &features).unwrap();
        let rev: Vec<&LabeledExample> = examples.iter().rev().collect();
        let topics_rev: Vec<TopicDistribution> = topics.iter().rev().cloned().collect();
        let b = compute_environments(&rev, &topics_rev, &features).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.user_id, y.user_id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.topic, y.topic);
        }
    }

    #[test]
    fn scaling_features_scales_the_image_environment() {
        let (examples, topics, features) = tiny_corpus();
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        let a = compute_environments(&refs, &topics, &features).unwrap();
        let scaled = FeatureMatrix::new(
            3,
            vec![2],
            features.data().iter().map(|v| v * 3.0).collect(),
        )
        .unwrap();
        let b = compute_environments(&refs, &topics, &scaled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            for (u, v) in x.image.iter().zip(&y.image) {
                assert!((u * 3.0 - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn empty_group_and_mismatched_lengths_are_rejected() {
        let (examples, topics, features) = tiny_corpus();
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        assert!(compute_environments(&[], &topics, &features).is_err());
        assert!(compute_environments(&refs, &topics[..2], &features).is_err());
    }

    #[test]
    fn files_round_trip_and_check_the_topic_model_hash() {
        let dir = tempfile::tempdir().unwrap();
        let index = dir.path().join("env.jsonl");
        let payload = dir.path().join("env.f32");
        let (examples, topics, features) = tiny_corpus();
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        let map = compute_environments(&refs, &topics, &features).unwrap();
        write_environments(&index, &payload, &map, "hash-one").unwrap();

        let loaded = read_environments(&index, &payload, Some("hash-one")).unwrap();
        assert_eq!(loaded.len(), 2);
        let ada = loaded.get("ada").unwrap();
        assert_eq!(ada.image, map.get("ada").unwrap().image);
        assert_eq!(ada.topic, map.get("ada").unwrap().topic);
        assert_eq!(ada.n_posts_used, 2);

        let err = read_environments(&index, &payload, Some("hash-two")).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }
}
