//! Latent Dirichlet Allocation by collapsed Gibbs sampling.
//!
//! Fitting resamples every token's topic with probability proportional to
//! `(n_dk + α) · (n_kw + β) / (n_k + β·V)`, where the counts exclude the token
//! being resampled. Inference freezes the fitted topic-word counts and runs
//! the same sweep over a new document only, returning the smoothed
//! document-topic proportions. PAD and UNK ids never enter the counts.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Vocabulary, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaConfig {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// Standard priors for a given topic count: α = 50/K, β = 0.01.
    pub fn with_topics(topics: usize, seed: u64) -> Self {
        LdaConfig {
            topics,
            alpha: 50.0 / topics as f64,
            beta: 0.01,
            sweeps: 200,
            burn_in: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::invalid("topic count must be at least 2"));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::invalid("alpha and beta must be positive"));
        }
        if self.sweeps <= self.burn_in {
            return Err(Error::invalid("sweeps must exceed burn_in"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaModel {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub vocab_size: usize,
    pub vocab_hash: String,
    /// Topic-word counts, row-major `[K × vocab_size]`.
    topic_word: Vec<f32>,
    /// Per-topic totals; always the row sums of `topic_word`.
    topic_totals: Vec<f32>,
}

pub type TopicDistribution = Vec<f32>;

impl LdaModel {
    pub fn topic_word(&self, topic: usize, word: u32) -> f32 {
        self.topic_word[topic * self.vocab_size + word as usize]
    }

    pub fn topic_total(&self, topic: usize) -> f32 {
        self.topic_totals[topic]
    }

    /// The `n` highest-count words of one topic; ties break lexicographically.
    pub fn top_words(&self, vocab: &Vocabulary, topic: usize, n: usize) -> Result<Vec<String>> {
        if topic >= self.topics {
            return Err(Error::IndexOutOfRange {
                what: "topic",
                index: topic,
                len: self.topics,
            });
        }
        let row = &self.topic_word[topic * self.vocab_size..(topic + 1) * self.vocab_size];
        let mut words: Vec<(f32, &str)> = row
            .iter()
            .enumerate()
            .filter(|(id, _)| *id as u32 != PAD_ID && *id as u32 != UNK_ID)
            .map(|(id, count)| (*count, vocab.token_of(id as u32).unwrap_or("?")))
            .collect();
        words.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
        Ok(words.into_iter().take(n).map(|(_, w)| w.to_string()).collect())
    }

    pub fn uniform(&self) -> TopicDistribution {
        vec![1.0 / self.topics as f32; self.topics]
    }

    /// Hash over config and counts; environments and checkpoints record it.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.topics.to_le_bytes());
        hasher.update(self.alpha.to_le_bytes());
        hasher.update(self.beta.to_le_bytes());
        hasher.update(self.vocab_hash.as_bytes());
        for v in &self.topic_word {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format: &'a str,
            topics: usize,
            alpha: f64,
            beta: f64,
            vocab_size: usize,
            vocab_hash: &'a str,
        }
        let header = Header {
            format: MODEL_FORMAT,
            topics: self.topics,
            alpha: self.alpha,
            beta: self.beta,
            vocab_size: self.vocab_size,
            vocab_hash: &self.vocab_hash,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for v in self.topic_word.iter().chain(&self.topic_totals) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            topics: usize,
            alpha: f64,
            beta: f64,
            vocab_size: usize,
            vocab_hash: String,
        }
        let bytes = fs::read(path)?;
        let fmt = |offset: u64, msg: String| Error::Format {
            path: path.display().to_string(),
            offset,
            msg,
        };
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| fmt(bytes.len() as u64, "missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| fmt(0, format!("header is not valid JSON: {e}")))?;
        if header.format != MODEL_FORMAT {
            return Err(fmt(0, format!("unknown format tag {:?}", header.format)));
        }
        let payload = &bytes[nl + 1..];
        let want = (header.topics * header.vocab_size + header.topics) * 4;
        if payload.len() != want {
            return Err(fmt(
                (nl + 1) as u64,
                format!("payload is {} bytes, want {want}", payload.len()),
            ));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let split = header.topics * header.vocab_size;
        Ok(LdaModel {
            topics: header.topics,
            alpha: header.alpha,
            beta: header.beta,
            vocab_size: header.vocab_size,
            vocab_hash: header.vocab_hash,
            topic_word: floats[..split].to_vec(),
            topic_totals: floats[split..].to_vec(),
        })
    }
}

const MODEL_FORMAT: &str = "popattn.lda.v1";

/// One Gibbs chain over a fixed corpus. Exposes single sweeps so callers can
/// watch invariants between them.
pub struct GibbsSampler {
    cfg: LdaConfig,
    vocab_size: usize,
    vocab_hash: String,
    /// Token ids per document, PAD/UNK already removed.
    docs: Vec<Vec<u32>>,
    /// Topic assignment per kept token, parallel to `docs`.
    assignments: Vec<Vec<usize>>,
    doc_topic: Vec<Vec<f32>>,
    topic_word: Vec<f32>,
    topic_totals: Vec<f32>,
    rng: rand_chacha::ChaCha8Rng,
}

fn kept_tokens(doc: &[u32]) -> Vec<u32> {
    doc.iter().copied().filter(|id| *id != PAD_ID && *id != UNK_ID).collect()
}

impl GibbsSampler {
    pub fn new(docs: &[Vec<u32>], vocab: &Vocabulary, cfg: LdaConfig) -> Result<Self> {
        cfg.validate()?;
        if docs.is_empty() {
            return Err(Error::invalid("cannot fit topics on zero documents"));
        }
        let vocab_size = vocab.len();
        for doc in docs {
            if let Some(bad) = doc.iter().find(|id| **id as usize >= vocab_size) {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: *bad as usize,
                    len: vocab_size,
                });
            }
        }
        let k = cfg.topics;
        let mut rng = rng::seeded(cfg.seed, "lda.fit");
        let mut sampler = GibbsSampler {
            vocab_size,
            vocab_hash: vocab.content_hash(),
            docs: docs.iter().map(|d| kept_tokens(d)).collect(),
            assignments: Vec::new(),
            doc_topic: vec![vec![0.0; k]; docs.len()],
            topic_word: vec![0.0; k * vocab_size],
            topic_totals: vec![0.0; k],
            rng: rng.clone(),
            cfg,
        };
        for (d, doc) in sampler.docs.iter().enumerate() {
            let mut z = Vec::with_capacity(doc.len());
            for &w in doc {
                let topic = rng.random_range(0..k);
                z.push(topic);
                sampler.doc_topic[d][topic] += 1.0;
                sampler.topic_word[topic * vocab_size + w as usize] += 1.0;
                sampler.topic_totals[topic] += 1.0;
            }
            sampler.assignments.push(z);
        }
        sampler.rng = rng;
        Ok(sampler)
    }

    /// Resample every token's topic once.
    pub fn sweep(&mut self) {
        let k = self.cfg.topics;
        let beta_v = self.cfg.beta * self.vocab_size as f64;
        let mut weights = vec![0.0f64; k];
        for d in 0..self.docs.len() {
            for t in 0..self.docs[d].len() {
                let w = self.docs[d][t] as usize;
                let old = self.assignments[d][t];
                self.doc_topic[d][old] -= 1.0;
                self.topic_word[old * self.vocab_size + w] -= 1.0;
                self.topic_totals[old] -= 1.0;

                let mut total = 0.0;
                for (topic, weight) in weights.iter_mut().enumerate() {
                    *weight = (self.doc_topic[d][topic] as f64 + self.cfg.alpha)
                        * (self.topic_word[topic * self.vocab_size + w] as f64 + self.cfg.beta)
                        / (self.topic_totals[topic] as f64 + beta_v);
                    total += *weight;
                }
                let new = sample_index(&weights, total, &mut self.rng);

                self.assignments[d][t] = new;
                self.doc_topic[d][new] += 1.0;
                self.topic_word[new * self.vocab_size + w] += 1.0;
                self.topic_totals[new] += 1.0;
            }
        }
    }

    /// Topic-word counts plus totals, for invariant checks between sweeps.
    pub fn counts(&self) -> (&[f32], &[f32]) {
        (&self.topic_word, &self.topic_totals)
    }

    /// Per-document topic counts, one row per document. Row sums equal the
    /// document's kept-token count.
    pub fn doc_topics(&self) -> &[Vec<f32>] {
        &self.doc_topic
    }

    pub fn into_model(self) -> LdaModel {
        LdaModel {
            topics: self.cfg.topics,
            alpha: self.cfg.alpha,
            beta: self.cfg.beta,
            vocab_size: self.vocab_size,
            vocab_hash: self.vocab_hash,
            topic_word: self.topic_word,
            topic_totals: self.topic_totals,
        }
    }
}

fn sample_index(weights: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Fit a model on encoded documents (typically the training split captions).
pub fn fit(docs: &[Vec<u32>], vocab: &Vocabulary, cfg: LdaConfig) -> Result<LdaModel> {
    let sweeps = cfg.sweeps;
    let mut sampler = GibbsSampler::new(docs, vocab, cfg)?;
    for _ in 0..sweeps {
        sampler.sweep();
    }
    Ok(sampler.into_model())
}

/// Topic distribution for one new document, model counts frozen. Documents
/// with fewer than two usable tokens return the uniform vector.
pub fn infer(doc: &[u32], model: &LdaModel, sweeps: usize, burn_in: usize, seed: u64) -> TopicDistribution {
    let tokens = kept_tokens(doc);
    if tokens.len() < 2 {
        return model.uniform();
    }
    let k = model.topics;
    let beta_v = model.beta * model.vocab_size as f64;
    let mut rng = rng::seeded(seed, "lda.infer");
    let mut doc_topic = vec![0.0f64; k];
    let mut assignments = Vec::with_capacity(tokens.len());
    for _ in &tokens {
        let topic = rng.random_range(0..k);
        assignments.push(topic);
        doc_topic[topic] += 1.0;
    }
    let mut weights = vec![0.0f64; k];
    for _ in 0..burn_in + sweeps {
        for (t, &w) in tokens.iter().enumerate() {
            let old = assignments[t];
            doc_topic[old] -= 1.0;
            let mut total = 0.0;
            for (topic, weight) in weights.iter_mut().enumerate() {
                *weight = (doc_topic[topic] + model.alpha)
                    * (model.topic_word(topic, w) as f64 + model.beta)
                    / (model.topic_total(topic) as f64 + beta_v);
                total += *weight;
            }
            let new = sample_index(&weights, total, &mut rng);
            assignments[t] = new;
            doc_topic[new] += 1.0;
        }
    }
    let denom = tokens.len() as f64 + k as f64 * model.alpha;
    (0..k)
        .map(|topic| ((doc_topic[topic] + model.alpha) / denom) as f32)
        .collect()
}

/// Infer many documents in parallel; output order and per-document seeds are
/// independent of thread scheduling.
pub fn infer_many(
    docs: &[Vec<u32>],
    model: &LdaModel,
    sweeps: usize,
    burn_in: usize,
    seed: u64,
) -> Vec<TopicDistribution> {
    docs.par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let doc_seed = rng::derive_seed(seed, &format!("lda.infer.doc{i}"));
            infer(doc, model, sweeps, burn_in, doc_seed)
        })
        .collect()
}
