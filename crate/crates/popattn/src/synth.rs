//! Synthetic corpora with verifiable planted structure.
//!
//! Two generators share one configuration:
//!
//! * [`planted_corpus`] — post-level signal. A designated token in the caption
//!   and a positive mean in a designated feature coordinate mark the posts that
//!   get high like counts. Any content-only model can learn it.
//! * [`env_flip_corpus`] — user-level signal. The label is the XOR of the
//!   caption token bit and a per-user type. The type is visible only weakly in
//!   any single post's features but cleanly in the user's *mean* features, so
//!   models that consume user environments hold a real advantage.
//!
//! Both emit like counts consistent with the planted label (high likes for
//! positives), so the quartile labeling pipeline recovers exactly the planted
//! bits on every post it keeps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{FeatureMatrix, LabeledExample, Post};
use crate::error::{Error, Result};
use crate::rng;

/// Token inserted into positive-signal captions.
pub const PLANTED_TOKEN: &str = "sunsetpier";
/// Feature coordinate carrying the image-side signal.
pub const PLANTED_COORD: usize = 0;
/// Spatial grids are 7×7.
pub const SPATIAL_CELLS: usize = 49;

/// Size and shape of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub users: usize,
    /// Posts per user; must be even so each user is exactly half positive.
    pub posts_per_user: usize,
    /// Image feature width (d1).
    pub feature_dims: usize,
    /// Number of distinct filler words shared by all captions.
    pub filler_vocab: usize,
    /// Tokens per caption.
    pub caption_len: usize,
    /// Also emit a 7×7 grid of feature vectors per post.
    pub with_spatial: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 25,
            posts_per_user: 8,
            feature_dims: 16,
            filler_vocab: 40,
            caption_len: 8,
            with_spatial: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::invalid("synthetic corpus needs at least one user"));
        }
        if self.posts_per_user < 2 || !self.posts_per_user.is_multiple_of(2) {
            return Err(Error::invalid(
                "posts_per_user must be even and at least 2 for exact class balance",
            ));
        }
        if self.feature_dims == 0 || self.caption_len == 0 || self.filler_vocab == 0 {
            return Err(Error::invalid(
                "feature_dims, caption_len and filler_vocab must be positive",
            ));
        }
        Ok(())
    }

    fn total_posts(&self) -> usize {
        self.users * self.posts_per_user
    }
}

/// A generated corpus plus the ground truth it was built around.
#[derive(Debug)]
pub struct SynthCorpus {
    pub posts: Vec<Post>,
    pub features: FeatureMatrix,
    /// One row per post of 49 concatenated cell vectors, when requested.
    pub spatial: Option<FeatureMatrix>,
    /// The label each post's like count encodes, parallel to `posts`.
    pub planted_labels: Vec<bool>,
}

/// Turn every post into a labeled example using the planted ground truth
/// directly, bypassing like counts and quartiles. Handy for training tests
/// that want all posts rather than the top/bottom quarters.
pub fn corpus_examples(corpus: &SynthCorpus) -> Vec<LabeledExample> {
    corpus
        .posts
        .iter()
        .zip(&corpus.planted_labels)
        .map(|(post, &label)| LabeledExample {
            user_id: post.user_id.clone(),
            post_id: post.post_id.clone(),
            caption: post.caption.clone(),
            features_row: post.features_row,
            label,
        })
        .collect()
}

/// Per-post signal: positives carry [`PLANTED_TOKEN`] and a +1 mean in
/// [`PLANTED_COORD`]; negatives carry neither (feature mean −1).
pub fn planted_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    generate(cfg, "synth.planted", |_user, _type_mean| PostPlan {
        token_follows_label: true,
        coord_mean_positive: 1.0,
        coord_mean_negative: -1.0,
        coord_sd: 0.5,
    })
}

/// User-level signal: label = caption-token bit XOR user type. The planted
/// coordinate's mean is ±0.5 by user *type* with sd 1.5, so a single post
/// barely hints at the type while the user's mean features state it plainly.
pub fn env_flip_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    generate(cfg, "synth.envflip", |_user, type_mean| PostPlan {
        token_follows_label: false,
        coord_mean_positive: type_mean,
        coord_mean_negative: type_mean,
        coord_sd: 1.5,
    })
}

/// Whether user `index` is the flipped type in [`env_flip_corpus`].
pub fn env_flip_user_type(user_index: usize) -> bool {
    user_index % 2 == 1
}

struct PostPlan {
    /// true: the token marks the label; false: the token is an independent
    /// fair coin and the label is token XOR user type.
    token_follows_label: bool,
    coord_mean_positive: f64,
    coord_mean_negative: f64,
    coord_sd: f64,
}

fn generate(
    cfg: &SynthConfig,
    tag: &str,
    plan: impl Fn(usize, f64) -> PostPlan,
) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, tag);
    let noise = Normal::new(0.0, 0.5).expect("positive sd");

    let n = cfg.total_posts();
    let mut posts = Vec::with_capacity(n);
    let mut planted_labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * cfg.feature_dims);
    let mut spatial = cfg
        .with_spatial
        .then(|| Vec::with_capacity(n * SPATIAL_CELLS * cfg.feature_dims));

    for user in 0..cfg.users {
        let user_id = format!("u{user:04}");
        let type_mean = if env_flip_user_type(user) { 0.5 } else { -0.5 };
        let plan = plan(user, type_mean);
        let signal = Normal::new(0.0, plan.coord_sd).expect("positive sd");

        // Exactly half of each user's posts get the token bit set.
        let mut token_bits = vec![false; cfg.posts_per_user];
        for bit in token_bits.iter_mut().take(cfg.posts_per_user / 2) {
            *bit = true;
        }
        token_bits.shuffle(&mut rng);

        for token_bit in token_bits {
            let label = if plan.token_follows_label {
                token_bit
            } else {
                token_bit ^ env_flip_user_type(user)
            };
            let index = posts.len();
            let likes = if label {
                rng.random_range(60..=100u64)
            } else {
                rng.random_range(0..=40u64)
            };

            let mut words: Vec<String> = (0..cfg.caption_len)
                .map(|_| format!("w{:03}", rng.random_range(0..cfg.filler_vocab)))
                .collect();
            if token_bit {
                let slot = rng.random_range(0..cfg.caption_len);
                words[slot] = PLANTED_TOKEN.to_string();
            }

            let coord_mean = if label {
                plan.coord_mean_positive
            } else {
                plan.coord_mean_negative
            };
            let mut draw_vector = |out: &mut Vec<f32>| {
                for d in 0..cfg.feature_dims {
                    let v = if d == PLANTED_COORD {
                        coord_mean + signal.sample(&mut rng)
                    } else {
                        noise.sample(&mut rng)
                    };
                    out.push(v as f32);
                }
            };
            draw_vector(&mut data);
            if let Some(cells) = spatial.as_mut() {
                for _ in 0..SPATIAL_CELLS {
                    draw_vector(cells);
                }
            }

            posts.push(Post {
                user_id: user_id.clone(),
                post_id: format!("p{index:06}"),
                likes,
                caption: words.join(" "),
                features_row: index,
            });
            planted_labels.push(label);
        }
    }

    let features = FeatureMatrix::new(n, vec![cfg.feature_dims], data)?;
    let spatial = spatial
        .map(|cells| FeatureMatrix::new(n, vec![SPATIAL_CELLS * cfg.feature_dims], cells))
        .transpose()?;
    Ok(SynthCorpus {
        posts,
        features,
        spatial,
        planted_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::label_all;
    use std::collections::HashMap;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn planted_token_appears_iff_positive() {
        let corpus = planted_corpus(&cfg()).unwrap();
        for (post, &label) in corpus.posts.iter().zip(&corpus.planted_labels) {
            assert_eq!(
                post.caption.contains(PLANTED_TOKEN),
                label,
                "post {}",
                post.post_id
            );
        }
    }

    #[test]
    fn planted_feature_coordinate_separates_classes() {
        let corpus = planted_corpus(&SynthConfig {
            users: 10,
            posts_per_user: 40,
            ..cfg()
        })
        .unwrap();
        let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
        for (i, &label) in corpus.planted_labels.iter().enumerate() {
            let v = corpus.features.row(i).unwrap()[PLANTED_COORD] as f64;
            if label {
                pos = (pos.0 + v, pos.1 + 1);
            } else {
                neg = (neg.0 + v, neg.1 + 1);
            }
        }
        assert!(pos.0 / (pos.1 as f64) > 0.7);
        assert!(neg.0 / (neg.1 as f64) < -0.7);
    }

    #[test]
    fn likes_are_disjoint_and_quartile_labels_recover_planted_bits() {
        let corpus = planted_corpus(&cfg()).unwrap();
        for (post, &label) in corpus.posts.iter().zip(&corpus.planted_labels) {
            if label {
                assert!(post.likes >= 60);
            } else {
                assert!(post.likes <= 40);
            }
        }
        let truth: HashMap<&str, bool> = corpus
            .posts
            .iter()
            .zip(&corpus.planted_labels)
            .map(|(p, &l)| (p.post_id.as_str(), l))
            .collect();
        let labeled = label_all(&corpus.posts);
        assert!(!labeled.is_empty());
        for ex in &labeled {
            assert_eq!(ex.label, truth[ex.post_id.as_str()], "post {}", ex.post_id);
        }
    }

    #[test]
    fn corpus_is_exactly_balanced() {
        for corpus in [
            planted_corpus(&cfg()).unwrap(),
            env_flip_corpus(&cfg()).unwrap(),
        ] {
            let positives = corpus.planted_labels.iter().filter(|&&l| l).count();
            assert_eq!(positives * 2, corpus.planted_labels.len());
        }
    }

    #[test]
    fn same_seed_reproduces_every_byte_and_other_seed_differs() {
        let a = planted_corpus(&cfg()).unwrap();
        let b = planted_corpus(&cfg()).unwrap();
        assert_eq!(
            serde_json::to_string(&a.posts).unwrap(),
            serde_json::to_string(&b.posts).unwrap()
        );
        assert_eq!(a.features.data(), b.features.data());
        let c = planted_corpus(&SynthConfig { seed: 8, ..cfg() }).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn spatial_grid_shape_matches_request() {
        let without = planted_corpus(&cfg()).unwrap();
        assert!(without.spatial.is_none());
        let with = planted_corpus(&SynthConfig {
            with_spatial: true,
            ..cfg()
        })
        .unwrap();
        let grid = with.spatial.unwrap();
        assert_eq!(grid.rows(), with.posts.len());
        assert_eq!(grid.row_len(), SPATIAL_CELLS * cfg().feature_dims);
    }

    #[test]
    fn env_flip_user_mean_feature_encodes_type() {
        let config = SynthConfig {
            users: 6,
            posts_per_user: 80,
            ..cfg()
        };
        let corpus = env_flip_corpus(&config).unwrap();
        for user in 0..config.users {
            let mut sum = 0.0;
            for i in 0..corpus.posts.len() {
                if corpus.posts[i].user_id == format!("u{user:04}") {
                    sum += corpus.features.row(i).unwrap()[PLANTED_COORD] as f64;
                }
            }
            let mean = sum / config.posts_per_user as f64;
            assert_eq!(
                mean > 0.0,
                env_flip_user_type(user),
                "user {user} mean {mean}"
            );
        }
    }

    #[test]
    fn env_flip_label_is_token_xor_type() {
        let corpus = env_flip_corpus(&cfg()).unwrap();
        for (i, post) in corpus.posts.iter().enumerate() {
            let user: usize = post.user_id[1..].parse().unwrap();
            let has_token = post.caption.contains(PLANTED_TOKEN);
            assert_eq!(
                corpus.planted_labels[i],
                has_token ^ env_flip_user_type(user),
                "post {}",
                post.post_id
            );
        }
    }

    #[test]
    fn corpus_examples_copy_planted_labels() {
        let corpus = planted_corpus(&cfg()).unwrap();
        let examples = corpus_examples(&corpus);
        assert_eq!(examples.len(), corpus.posts.len());
        for (ex, (post, &label)) in examples
            .iter()
            .zip(corpus.posts.iter().zip(&corpus.planted_labels))
        {
            assert_eq!(ex.post_id, post.post_id);
            assert_eq!(ex.label, label);
            assert_eq!(ex.features_row, post.features_row);
        }
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        for bad in [
            SynthConfig { users: 0, ..cfg() },
            SynthConfig {
                posts_per_user: 7,
                ..cfg()
            },
            SynthConfig {
                feature_dims: 0,
                ..cfg()
            },
        ] {
            assert!(planted_corpus(&bad).is_err());
        }
    }
}
