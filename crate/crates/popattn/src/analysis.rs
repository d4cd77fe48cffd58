//! Post-hoc analyses over a trained model and a labeled corpus: K-means
//! clustering of image features with the iterative pick-out strategy, token
//! occurrence statistics, word-attention exports, and per-region popularity
//! heatmaps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{is_emoji_token, tokenize, FeatureMatrix, LabeledExample, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::model::DualAttentionModel;
use crate::rng;
use crate::tensor::{Scalar, Tape};
use crate::train::TrainData;

/// Clustering categories to form per round when none is given explicitly.
pub const DEFAULT_K: usize = 12;
/// Pick-out threshold on |R − 0.5| when none is given explicitly.
pub const DEFAULT_THRESHOLD: f64 = 0.1;
/// Independent k-means++ starts per clustering call; the lowest-inertia run
/// wins, which is what lets tiny instances reach the global optimum.
pub const KMEANS_RESTARTS: usize = 10;
/// Lloyd iteration cap per start.
pub const KMEANS_MAX_ITERS: usize = 300;

// ---------------------------------------------------------------------------
// K-means

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning start.
    pub inertia_trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted draw proportional to `weights` (all nonnegative, not all zero).
fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        // All remaining points coincide with a chosen center; any index works.
        return rng.random_range(0..weights.len());
    }
    let mut target = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn kmeans_plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut best_d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let next = weighted_pick(&best_d2, rng);
        centroids.push(points[next].clone());
        for (p, d) in points.iter().zip(best_d2.iter_mut()) {
            *d = d.min(squared_distance(p, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let k = centroids.len();
    let dims = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();

    for _ in 0..KMEANS_MAX_ITERS {
        // Assignment step, tracking per-point cost.
        let mut inertia = 0.0;
        let mut changed = false;
        let mut counts = vec![0usize; k];
        let mut point_cost = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            counts[best] += 1;
            point_cost[i] = best_d;
            inertia += best_d;
        }

        // Lloyd never increases the cost; allow only float-rounding slack.
        if let Some(prev) = trace.last() {
            assert!(
                inertia <= prev * (1.0 + 1e-12) + 1e-12,
                "inertia rose from {prev} to {inertia}"
            );
        }
        trace.push(inertia);

        // An empty cluster grabs the point that costs the most where it is.
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                let farthest = point_cost
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("points nonempty");
                centroids[c] = points[farthest].clone();
                point_cost[farthest] = 0.0;
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }

        // Update step: centroid = mean of members (reseeded ones keep the
        // point they were just moved to until the next assignment).
        let mut sums = vec![vec![0.0; dims]; k];
        let mut members = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            members[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if members[c] > 0 && !(reseeded && counts[c] == 0) {
                for s in sums[c].iter_mut() {
                    *s /= members[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }
    }

    // Polish: single-point moves with exact centroid-shift accounting escape
    // assignment fixpoints that a whole-cluster update step cannot leave. Any
    // state stable under these moves is still an assignment fixpoint, so the
    // invariants above are preserved; the cost strictly decreases with every
    // accepted move, so the loop terminates.
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dims]; k];
    for (p, &a) in points.iter().zip(&assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    let centroid = |sums: &[Vec<f64>], counts: &[usize], c: usize| -> Vec<f64> {
        sums[c].iter().map(|s| s / counts[c] as f64).collect()
    };
    let mut moved = true;
    while moved {
        moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i];
            if counts[from] <= 1 {
                continue; // moving the last member would drop a cluster
            }
            let n_from = counts[from] as f64;
            let leave_gain =
                n_from / (n_from - 1.0) * squared_distance(p, &centroid(&sums, &counts, from));
            let mut best: Option<(usize, f64)> = None;
            for to in 0..k {
                if to == from {
                    continue;
                }
                let n_to = counts[to] as f64;
                let join_cost =
                    n_to / (n_to + 1.0) * squared_distance(p, &centroid(&sums, &counts, to));
                let delta = join_cost - leave_gain;
                if delta < -1e-12 && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((to, delta));
                }
            }
            if let Some((to, _)) = best {
                counts[from] -= 1;
                counts[to] += 1;
                for d in 0..dims {
                    sums[from][d] -= p[d];
                    sums[to][d] += p[d];
                }
                assignments[i] = to;
                moved = true;
            }
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = centroid(&sums, &counts, c);
        }
    }
    let polished: f64 = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    if polished < *trace.last().expect("at least one iteration") {
        trace.push(polished);
    }

    let inertia = *trace.last().expect("at least one iteration");
    KMeansResult {
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

/// K-means++ initialization, Lloyd iterations to an assignment fixpoint, and
/// a single-point improvement pass that escapes fixpoints the batch update
/// cannot leave — repeated over [`KMEANS_RESTARTS`] independent starts, with
/// the lowest final inertia winning.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let dims = points[0].len();
    if dims == 0 || points.iter().any(|p| p.len() != dims) {
        return Err(Error::invalid("points must share one positive dimension"));
    }

    let mut best: Option<KMeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng::seeded(seed, &format!("kmeans.restart{restart}"));
        let init = kmeans_plus_plus_init(points, k, &mut rng);
        let run = lloyd(points, init);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

// ---------------------------------------------------------------------------
// Pick-out clustering

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterCategory {
    pub index: usize,
    pub member_post_ids: Vec<String>,
    /// Fraction of unpopular (negative-label) posts in the category.
    pub r_ratio: f64,
    /// Round in which |R − 0.5| > t removed the category, or `None` for the
    /// categories still standing when the loop ended.
    pub picked_out_at_round: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub threshold: f64,
    pub rounds: usize,
    pub categories: Vec<ClusterCategory>,
}

/// Iterative clustering: cluster the remaining posts into `k` classes, compute
/// each class's unpopular ratio R, and pick out every class with |R − 0.5| > t;
/// repeat until no class qualifies or fewer than `k` posts remain. The report
/// holds the picked-out classes plus the classes left standing at the end.
pub fn pickout_clustering(
    examples: &[LabeledExample],
    features: &FeatureMatrix,
    k: usize,
    t: f64,
    seed: u64,
) -> Result<ClusterReport> {
    if !(t > 0.0 && t < 0.5) {
        return Err(Error::invalid(format!(
            "threshold t = {t} is outside (0, 0.5)"
        )));
    }
    if examples.is_empty() {
        return Err(Error::invalid("nothing to cluster"));
    }

    let mut remaining: Vec<usize> = (0..examples.len()).collect();
    let mut categories: Vec<ClusterCategory> = Vec::new();
    let mut survivors: Vec<ClusterCategory> = Vec::new();
    let mut round = 0;

    while remaining.len() >= k {
        round += 1;
        let points: Vec<Vec<f64>> = remaining
            .iter()
            .map(|&i| {
                Ok(features
                    .row(examples[i].features_row)?
                    .iter()
                    .map(|v| f64::from(*v))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let run = kmeans(&points, k, rng::derive_seed(seed, &format!("pickout.round{round}")))?;

        // Gather members per class; empty classes cannot be reported (R would
        // be 0/0) and cannot qualify, so they are simply skipped.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (slot, &example_index) in remaining.iter().enumerate() {
            members[run.assignments[slot]].push(example_index);
        }
        let mut picked_any = false;
        survivors.clear();
        let mut next_remaining = Vec::new();
        for class_members in members.into_iter().filter(|m| !m.is_empty()) {
            let negatives = class_members
                .iter()
                .filter(|&&i| !examples[i].label)
                .count();
            let r_ratio = negatives as f64 / class_members.len() as f64;
            let category = ClusterCategory {
                index: 0, // assigned once the report is final
                member_post_ids: class_members
                    .iter()
                    .map(|&i| examples[i].post_id.clone())
                    .collect(),
                r_ratio,
                picked_out_at_round: None,
            };
            if (r_ratio - 0.5).abs() > t {
                picked_any = true;
                categories.push(ClusterCategory {
                    picked_out_at_round: Some(round),
                    ..category
                });
            } else {
                next_remaining.extend_from_slice(&class_members);
                survivors.push(category);
            }
        }
        if !picked_any {
            break;
        }
        next_remaining.sort_unstable();
        remaining = next_remaining;
    }

    // Whatever survived the last clustering stands; if the loop never ran
    // (fewer than k posts overall), everything remains in one pool.
    if round == 0 {
       categories.push(ClusterCategory {
            index: 0,
            member_post_ids: remaining
                .iter()
                .map(|&i| examples[i].post_id.clone())
                .collect(),
            r_ratio: remaining.iter().filter(|&&i| !examples[i].label).count() as f64
                / remaining.len() as f64,
            picked_out_at_round: None,
        });
    } else {
        categories.append(&mut survivors);
    }
    for (i, c) in categories.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(ClusterReport {
        k,
        threshold: t,
        rounds: round,
        categories,
    })
}

/// One row per member post: `category_index,r_ratio,picked_out_at_round,post_id`.
pub fn write_cluster_csv(path: &Path, report: &ClusterReport) -> Result<()> {
    let mut out = String::from("category_index,r_ratio,picked_out_at_round,post_id\n");
    for c in &report.categories {
        let round = c
            .picked_out_at_round
            .map_or(String::new(), |r| r.to_string());
        for id in &c.member_post_ids {
            writeln!(out, "{},{:.6},{},{}", c.index, c.r_ratio, round, id)
                .expect("String writes cannot fail");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Token statistics

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStat {
    pub token: String,
    /// Total occurrences in positive captions.
    pub m_p: u64,
    /// Total occurrences in negative captions.
    pub m_n: u64,
    pub score: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextStatReport {
    /// Word tokens, sorted by score descending, ties lexicographic.
    pub words: Vec<TokenStat>,
    /// Emoji tokens, same order.
    pub emoji: Vec<TokenStat>,
    /// Number of stoplist entries in force (built-in plus site-specific).
    pub stoplist_size: usize,
}

/// Pronouns, prepositions, and leftover symbol tokens that say nothing about
/// content. Site-specific words (place names and the like) are corpus
/// dependent and arrive separately.
pub fn builtin_stoplist() -> BTreeSet<String> {
    const PRONOUNS: &[&str] = &[
        "i", "me", "my", "mine", "myself", "we", "us", "our", "ours", "ourselves", "you", "your",
        "yours", "yourself", "yourselves", "he", "him", "his", "himself", "she", "her", "hers",
        "herself", "it", "its", "itself", "they", "them", "their", "theirs", "themselves", "this",
        "that", "these", "those", "who", "whom", "whose", "which", "what",
    ];
    const PREPOSITIONS: &[&str] = &[
        "about", "above", "across", "after", "against", "along", "among", "around", "at",
        "before", "behind", "below", "beneath", "beside", "between", "beyond", "by", "down",
        "during", "except", "for", "from", "in", "inside", "into", "like", "near", "of", "off",
        "on", "onto", "out", "outside", "over", "past", "since", "through", "throughout", "to",
        "toward", "towards", "under", "until", "up", "upon", "with", "within", "without",
    ];
    const SYMBOLS: &[&str] = &["&", "+", "=", "~", "...", "'", "\"", "•", "|"];
    PRONOUNS
        .iter()
        .chain(PREPOSITIONS)
        .chain(SYMBOLS)
        .map(|s| s.to_string())
        .collect()
}

/// Stoplist file: one token per line, blank lines and `#` comments ignored.
pub fn read_stoplist(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect())
}

/// Count every token's occurrences in positive vs negative captions and rank
/// by m_p − m_n, unnormalized. Stoplisted tokens are dropped; emoji and word
/// tokens are reported in separate sections.
pub fn text_stats(examples: &[LabeledExample], site_stoplist: &[String]) -> TextStatReport {
    let mut stoplist = builtin_stoplist();
    stoplist.extend(site_stoplist.iter().map(|s| s.to_lowercase()));

    let mut counts: std::collections::BTreeMap<String, (u64, u64)> = Default::default();
    for example in examples {
        for token in tokenize(&example.caption) {
            if stoplist.contains(&token) {
                continue;
            }
            let entry = counts.entry(token).or_default();
            if example.label {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
    }

    let (mut words, mut emoji) = (Vec::new(), Vec::new());
    for (token, (m_p, m_n)) in counts {
        let stat = TokenStat {
            score: m_p as i64 - m_n as i64,
            token,
            m_p,
            m_n,
        };
        if is_emoji_token(&stat.token) {
            emoji.push(stat);
        } else {
            words.push(stat);
        }
    }
    let rank = |stats: &mut Vec<TokenStat>| {
        stats.sort_by(|a, b| b.score.cmp(&a.score).then(a.token.cmp(&b.token)));
    };
    rank(&mut words);
    rank(&mut emoji);
    TextStatReport {
        words,
        emoji,
        stoplist_size: stoplist.len(),
    }
}

/// One row per token: `section,token,m_p,m_n,score`.
pub fn write_text_stats_csv(path: &Path, report: &TextStatReport) -> Result<()> {
    let mut out = String::from("section,token,m_p,m_n,score\n");
    for (section, stats) in [("word", &report.words), ("emoji", &report.emoji)] {
        for s in stats {
            writeln!(out, "{},{},{},{},{}", section, s.token, s.m_p, s.m_n, s.score)
                .expect("String writes cannot fail");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Attention export

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub post_id: String,
    /// Caption tokens the weights cover, capped at the model's t_max. An
    /// empty caption shows the single unknown-word placeholder it was fed as.
    pub tokens: Vec<String>,
    /// Explicit-attention weights, one per token; a probability vector.
    pub weights: Vec<f64>,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionDump {
    pub records: Vec<AttentionRecord>,
}

/// Forward every example and capture its word-attention weights and predicted
/// probability. Only variants with the explicit-attention block have weights
/// to export.
pub fn export_attention<E: Scalar>(
    model: &DualAttentionModel<E>,
    data: &TrainData<'_>,
    examples: &[LabeledExample],
) -> Result<AttentionDump> {
    if !model.config().use_explicit_attention {
        return Err(Error::invalid(
            "this variant computes no explicit attention weights",
        ));
    }
    let mut records = Vec::with_capacity(examples.len());
    for example in examples {
        let (output, tape) = forward_on_fresh_tape(model, data, example)?;
        let attention = output
            .attention
            .expect("explicit-attention variants always fill this");
        let weights: Vec<f64> = tape.value(attention).iter().map(|w| w.to_f64()).collect();
        let mut tokens = tokenize(&example.caption);
        tokens.truncate(model.config().t_max);
        if tokens.is_empty() {
            tokens.push(UNK_TOKEN.to_string());
        }
        records.push(AttentionRecord {
            post_id: example.post_id.clone(),
            tokens,
            weights,
            probability: tape.scalar(output.prob).to_f64(),
        });
    }
    Ok(AttentionDump { records })
}

fn forward_on_fresh_tape<E: Scalar>(
    model: &DualAttentionModel<E>,
    data: &TrainData<'_>,
    example: &LabeledExample,
) -> Result<(crate::model::ForwardOutput, Tape<E>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let token_ids = data.vocab.encode(&example.caption, model.config().t_max);
    let image = data.features.row(example.features_row)?;
    let env_holder;
    let env = if model.config().use_environment {
        let map = data.environments.ok_or_else(|| {
            Error::invalid("this variant needs user environments but none were supplied")
        })?;
        env_holder = map.get(&example.user_id).ok_or_else(|| {
            Error::invalid(format!("no environment for user {}", example.user_id))
        })?;
        Some((env_holder.image.as_slice(), env_holder.topic.as_slice()))
    } else {
        None
    };
    let input = crate::model::ModelInput {
        token_ids: &token_ids,
        image,
        env,
    };
    let output = model.forward(&mut tape, &bound, &input)?;
    Ok((output, tape))
}

/// One JSON object per record, one per line.
pub fn write_attention_jsonl(path: &Path, dump: &AttentionDump) -> Result<()> {
    let mut out = String::new();
    for r in &dump.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Popularity heatmap

/// Number of cells along one side of a spatial feature grid.
pub const HEATMAP_SIDE: usize = 7;
/// Cells per spatial feature grid.
pub const HEATMAP_CELLS: usize = HEATMAP_SIDE * HEATMAP_SIDE;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopularityHeatmap {
    pub post_id: String,
    /// Row-major 7×7 grid: the model's probability with each cell's feature
    /// vector substituted for the post's image feature.
    pub cells: Vec<f64>,
}

/// Score one post part by part: hold the caption and environment fixed and
/// swap each of the 49 spatial cells in as the image feature.
pub fn popularity_heatmap<E: Scalar>(
    model: &DualAttentionModel<E>,
    data: &TrainData<'_>,
    example: &LabeledExample,
    spatial: Option<&FeatureMatrix>,
) -> Result<PopularityHeatmap> {
    let spatial = spatial.ok_or_else(|| {
        Error::invalid(format!(
            "post {} has no spatial features to build a heatmap from",
            example.post_id
        ))
    })?;
    let d1 = model.config().d1;
    if spatial.row_len() != HEATMAP_CELLS * d1 {
        return Err(Error::invalid(format!(
            "spatial rows hold {} values, expected {} cells × d1 = {}",
            spatial.row_len(),
            HEATMAP_CELLS,
            HEATMAP_CELLS * d1
        )));
    }
    let grid = spatial.row(example.features_row)?;
    let token_ids = data.vocab.encode(&example.caption, model.config().t_max);
    let env_holder;
    let env = if model.config().use_environment {
        let map = data.environments.ok_or_else(|| {
            Error::invalid("this variant needs user environments but none were supplied")
        })?;
        env_holder = map.get(&example.user_id).ok_or_else(|| {
            Error::invalid(format!("no environment for user {}", example.user_id))
        })?;
        Some((env_holder.image.as_slice(), env_holder.topic.as_slice()))
    } else {
        None
    };

    let mut cells = Vec::with_capacity(HEATMAP_CELLS);
    for cell in grid.chunks(d1) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let input = crate::model::ModelInput {
            token_ids: &token_ids,
            image: cell,
            env,
        };
        let output = model.forward(&mut tape, &bound, &input)?;
        cells.push(tape.scalar(output.prob).to_f64());
    }
    Ok(PopularityHeatmap {
        post_id: example.post_id.clone(),
        cells,
    })
}

/// One JSON object per heatmap, one per line.
pub fn write_heatmaps_jsonl(path: &Path, maps: &[PopularityHeatmap]) -> Result<()> {
    let mut out = String::new();
    for m in maps {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
