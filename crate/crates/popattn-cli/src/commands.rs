//! The pipeline stages behind the subcommands.
//!
//! Every stage validates the files it needs before doing any work, writes
//! its artifacts under the configured output directory, and never mutates
//! its inputs. Artifacts are chained by content hashes: the topic model
//! records the vocabulary it was fitted on, the environment file records the
//! topic model, and the checkpoint records both, so stale combinations are
//! rejected with a message instead of producing silently wrong numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use popattn::analysis::{
    export_attention, pickout_clustering, popularity_heatmap, read_stoplist, text_stats,
    write_attention_jsonl, write_cluster_csv, write_heatmaps_jsonl, write_text_stats_csv,
};
use popattn::dataset::{
    self, read_features, write_features, FeatureMatrix, LabeledExample, SplitManifest, Vocabulary,
};
use popattn::environment::{
    compute_environments, read_environments, write_environments, EnvironmentMap,
};
use popattn::lda::{self, LdaModel};
use popattn::model::{DualAttentionModel, Variant};
use popattn::synth::{planted_corpus, SynthConfig};
use popattn::train::{self, TrainData};

use crate::config::RunConfig;
use crate::CliError;

// Synthetic corpus inputs written by `prepare --synthetic`.
pub const POSTS: &str = "posts.jsonl";
pub const FEATURES: &str = "features.bin";
pub const SPATIAL: &str = "spatial.bin";

// Pipeline artifacts.
pub const EXAMPLES: &str = "examples.jsonl";
pub const SPLITS: &str = "splits.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const LDA_MODEL: &str = "lda.bin";
pub const TOPICS: &str = "topics.bin";
pub const ENV_INDEX: &str = "env_index.jsonl";
pub const ENV_PAYLOAD: &str = "env_payload.bin";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const EVAL: &str = "eval.json";
pub const ABLATION: &str = "ablation.csv";
pub const CLUSTERS: &str = "clusters.csv";
pub const TEXT_STATS: &str = "text_stats.csv";
pub const ATTENTION: &str = "attention.jsonl";
pub const HEATMAPS: &str = "heatmaps.jsonl";

/// The comparison table the `ablate` subcommand reproduces: the early-fusion
/// baseline plus every attention/environment combination, strongest last.
pub const TABLE_VARIANTS: [Variant; 6] = [
    Variant::Early,
    Variant::EAttn,
    Variant::Env,
    Variant::EnvIAttn,
    Variant::EAttnEnv,
    Variant::Dual,
];

/// A required input file named in the config.
fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "missing {what} file: {}",
            path.display()
        )))
    }
}

/// A required artifact an earlier stage should have produced.
fn require_artifact(path: &Path, what: &str, stage: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "missing {what} file: {} (run `popattn {stage}` first)",
            path.display()
        )))
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out();
    fs::create_dir_all(&out).map_err(|e| {
        CliError::Runtime(format!("cannot create output directory {}: {e}", out.display()))
    })?;
    Ok(out)
}

/// The artifacts every model-facing stage starts from.
struct Pipeline {
    examples: Vec<LabeledExample>,
    manifest: SplitManifest,
    vocab: Vocabulary,
    features: FeatureMatrix,
}

fn load_pipeline(cfg: &RunConfig) -> Result<Pipeline, CliError> {
    let out = cfg.out();
    let examples_path = out.join(EXAMPLES);
    let splits_path = out.join(SPLITS);
    let vocab_path = out.join(VOCAB);
    require_artifact(&examples_path, "labeled examples", "prepare")?;
    require_artifact(&splits_path, "split manifest", "prepare")?;
    require_artifact(&vocab_path, "vocabulary", "prepare")?;
    let features_path = cfg.features_path();
    require_file(&features_path, "features")?;
    Ok(Pipeline {
        examples: dataset::read_examples(&examples_path)?,
        manifest: dataset::read_split_manifest(&splits_path)?,
        vocab: Vocabulary::load(&vocab_path)?,
        features: read_features(&features_path)?,
    })
}

/// Load the topic model and environment file, verifying the hash chain all
/// the way back to the given vocabulary.
fn load_environment_chain(
    out: &Path,
    vocab_hash: &str,
) -> Result<(String, usize, EnvironmentMap), CliError> {
    let lda_path = out.join(LDA_MODEL);
    require_artifact(&lda_path, "topic model", "lda")?;
    let lda_model = LdaModel::load(&lda_path)?;
    if lda_model.vocab_hash != vocab_hash {
        return Err(CliError::Validation(format!(
            "topic model was fitted on a different vocabulary ({} vs {}); rerun `popattn lda`",
            &lda_model.vocab_hash[..10.min(lda_model.vocab_hash.len())],
            &vocab_hash[..10.min(vocab_hash.len())]
        )));
    }
    let lda_hash = lda_model.content_hash();
    let index_path = out.join(ENV_INDEX);
    let payload_path = out.join(ENV_PAYLOAD);
    require_artifact(&index_path, "environment index", "env")?;
    require_artifact(&payload_path, "environment payload", "env")?;
    let map = read_environments(&index_path, &payload_path, Some(&lda_hash))?;
    if let Some(env) = map.iter().next() {
        if env.topic.len() != lda_model.topics {
            return Err(CliError::Validation(format!(
                "environment topic vectors are {}-wide but the topic model has {} topics; rerun `popattn env`",
                env.topic.len(),
                lda_model.topics
            )));
        }
    }
    Ok((lda_hash, lda_model.topics, map))
}

fn owned(refs: Vec<&LabeledExample>) -> Vec<LabeledExample> {
    refs.into_iter().cloned().collect()
}

/// Caption as unpadded vocabulary ids, for the topic sampler (which skips
/// PAD/UNK itself).
fn doc_ids(vocab: &Vocabulary, caption: &str) -> Vec<u32> {
    popattn::dataset::tokenize(caption)
        .iter()
        .map(|token| vocab.id_of(token))
        .collect()
}

fn check_feature_width(features: &FeatureMatrix, d1: usize) -> Result<(), CliError> {
    if features.row_len() != d1 {
        return Err(CliError::Validation(format!(
            "model.d1 = {d1} but feature rows are {} wide",
            features.row_len()
        )));
    }
    Ok(())
}

/// Label the corpus, split it, and build the vocabulary. With `synthetic`,
/// first generate the planted-signal toy corpus (with spatial features)
/// under the output directory and run on that.
pub fn prepare(cfg: &RunConfig, synthetic: bool) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let (posts, features) = if synthetic {
        let synth_cfg = SynthConfig {
            with_spatial: true,
            seed: cfg.stage_seed("prepare.synthetic"),
            ..SynthConfig::default()
        };
        let corpus = planted_corpus(&synth_cfg)?;
        dataset::write_posts(&out.join(POSTS), &corpus.posts)?;
        write_features(&out.join(FEATURES), &corpus.features)?;
        if let Some(spatial) = &corpus.spatial {
            write_features(&out.join(SPATIAL), spatial)?;
        }
        println!(
            "prepare: generated {} synthetic posts under {}",
            corpus.posts.len(),
            out.display()
        );
        (corpus.posts, corpus.features)
    } else {
        let posts_path = cfg.posts_path();
        let features_path = cfg.features_path();
        require_file(&posts_path, "posts")?;
        require_file(&features_path, "features")?;
        (dataset::read_posts(&posts_path)?, read_features(&features_path)?)
    };

    dataset::validate_corpus(&posts, &features)?;
    let examples = dataset::label_all(&posts);
    if examples.is_empty() {
        return Err(CliError::Validation(
            "no user has the four or more posts labeling needs".into(),
        ));
    }
    let manifest = dataset::split(&examples, cfg.seed);
    let captions: Vec<&str> = posts.iter().map(|p| p.caption.as_str()).collect();
    let vocab = Vocabulary::build(&captions, cfg.min_freq)?;

    dataset::write_examples(&out.join(EXAMPLES), &examples)?;
    dataset::write_split_manifest(&out.join(SPLITS), &manifest)?;
    vocab.save(&out.join(VOCAB))?;

    let (train, val, test) = manifest.apply(&examples)?;
    println!(
        "prepare: {} posts -> {} labeled examples ({} train / {} val / {} test), vocabulary of {} tokens",
        posts.len(),
        examples.len(),
        train.len(),
        val.len(),
        test.len(),
        vocab.len()
    );
    Ok(())
}

/// Fit the topic model on training captions and infer a topic distribution
/// for every labeled example.
pub fn lda(cfg: &RunConfig, topics_override: Option<usize>) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let lda_cfg = cfg.lda.lda_config(topics_override, cfg.stage_seed("lda.fit"));

    let (train, _, _) = p.manifest.apply(&p.examples)?;
    let train_docs: Vec<Vec<u32>> =
        train.iter().map(|ex| doc_ids(&p.vocab, &ex.caption)).collect();
    let model = lda::fit(&train_docs, &p.vocab, lda_cfg.clone())?;
    model.save(&out.join(LDA_MODEL))?;

    let all_docs: Vec<Vec<u32>> =
        p.examples.iter().map(|ex| doc_ids(&p.vocab, &ex.caption)).collect();
    let topics = lda::infer_many(
        &all_docs,
        &model,
        lda_cfg.sweeps,
        lda_cfg.burn_in,
        cfg.stage_seed("lda.infer"),
    );
    let flat: Vec<f32> = topics.concat();
    let matrix = FeatureMatrix::new(topics.len(), vec![lda_cfg.topics], flat)?;
    write_features(&out.join(TOPICS), &matrix)?;

    println!(
        "lda: {} topics fitted on {} training captions; topic vectors for {} posts",
        lda_cfg.topics,
        train.len(),
        topics.len()
    );
    Ok(())
}

/// Average each user's training posts into their environment vectors.
pub fn env(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let lda_path = out.join(LDA_MODEL);
    let topics_path = out.join(TOPICS);
    require_artifact(&lda_path, "topic model", "lda")?;
    require_artifact(&topics_path, "per-caption topics", "lda")?;

    let lda_model = LdaModel::load(&lda_path)?;
    if lda_model.vocab_hash != p.vocab.content_hash() {
        return Err(CliError::Validation(
            "topic model was fitted on a different vocabulary; rerun `popattn lda`".into(),
        ));
    }
    let topics = read_features(&topics_path)?;
    if topics.rows() != p.examples.len() {
        return Err(CliError::Validation(format!(
            "topics file has {} rows for {} examples; rerun `popattn lda`",
            topics.rows(),
            p.examples.len()
        )));
    }

    let assignments = p.manifest.assignments(&p.examples)?;
    let mut train_refs = Vec::new();
    let mut train_topics = Vec::new();
    for (i, (ex, split)) in p.examples.iter().zip(&assignments).enumerate() {
        if *split == dataset::Split::Train {
            train_refs.push(ex);
            train_topics.push(topics.row(i)?.to_vec());
        }
    }
    let map = compute_environments(&train_refs, &train_topics, &p.features)?;
    write_environments(
        &out.join(ENV_INDEX),
        &out.join(ENV_PAYLOAD),
        &map,
        &lda_model.content_hash(),
    )?;
    println!(
        "env: environments for {} users from {} training posts",
        map.len(),
        train_refs.len()
    );
    Ok(())
}

/// Train one variant; write the checkpoint, per-epoch metric CSV, and a
/// summary JSON.
pub fn train(cfg: &RunConfig, variant: Variant) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let vocab_hash = p.vocab.content_hash();

    // Resolve the environment chain only for variants that consume it; the
    // topic width placeholder below is never used otherwise.
    let uses_env = cfg.model.model_config(p.vocab.len(), 1, variant).use_environment;
    let (lda_hash, topics, env_map) = if uses_env {
        let (hash, topics, map) = load_environment_chain(&out, &vocab_hash)?;
        (Some(hash), topics, Some(map))
    } else {
        (None, cfg.lda.topics, None)
    };

    let model_cfg = cfg.model.model_config(p.vocab.len(), topics, variant);
    model_cfg.validate()?;
    check_feature_width(&p.features, model_cfg.d1)?;

    let (train_refs, val_refs, _) = p.manifest.apply(&p.examples)?;
    let train_set = owned(train_refs);
    let val_set = owned(val_refs);
    let data = TrainData {
        vocab: &p.vocab,
        features: &p.features,
        environments: env_map.as_ref(),
    };
    let mut model = DualAttentionModel::<f32>::new(model_cfg, cfg.stage_seed("model.init"))?;
    let train_cfg = cfg.train.train_config(cfg.stage_seed("train"));
    let outcome = train::train(&mut model, &data, &train_set, &val_set, &train_cfg)?;

    model.save(&out.join(CHECKPOINT), &vocab_hash, lda_hash.as_deref())?;
    train::write_metrics_csv(&out.join(METRICS), &outcome.log)?;
    let summary = serde_json::json!({
        "variant": variant.name(),
        "epochs_run": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
        "stopped_early": outcome.stopped_early,
    });
    fs::write(
        out.join(TRAIN_SUMMARY),
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .map_err(popattn::Error::from)?;

    println!(
        "train[{variant}]: {} epochs, best epoch {} at {:.2} validation accuracy{}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_val_accuracy,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

/// Load whatever artifacts the trained checkpoint needs and hand back the
/// model plus its environment map (for variants that use one).
fn load_trained(
    out: &Path,
    p: &Pipeline,
) -> Result<(DualAttentionModel<f32>, Option<EnvironmentMap>), CliError> {
    let ckpt_path = out.join(CHECKPOINT);
    require_artifact(&ckpt_path, "checkpoint", "train")?;
    let vocab_hash = p.vocab.content_hash();
    let lda_path = out.join(LDA_MODEL);
    let lda_hash = if lda_path.is_file() {
        Some(LdaModel::load(&lda_path)?.content_hash())
    } else {
        None
    };
    let model = DualAttentionModel::<f32>::load(&ckpt_path, &vocab_hash, lda_hash.as_deref())?;
    check_feature_width(&p.features, model.config().d1)?;
    let env_map = if model.config().use_environment {
        let (_, _, map) = load_environment_chain(out, &vocab_hash)?;
        Some(map)
    } else {
        None
    };
    Ok((model, env_map))
}

/// Score the test split with the trained checkpoint and write the metrics
/// as JSON.
pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let (model, env_map) = load_trained(&out, &p)?;
    let (_, _, test_refs) = p.manifest.apply(&p.examples)?;
    let test_set = owned(test_refs);
    let data = TrainData {
        vocab: &p.vocab,
        features: &p.features,
        environments: env_map.as_ref(),
    };
    let metrics = train::evaluate(&model, &data, &test_set)?;
    fs::write(
        out.join(EVAL),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )
    .map_err(popattn::Error::from)?;
    println!(
        "eval: accuracy {:.2} precision {:.2} recall {:.2} f {:.2} over {} test posts",
        metrics.accuracy,
        metrics.precision,
        metrics.recall,
        metrics.f_measure,
        test_set.len()
    );
    Ok(())
}

/// Train the whole comparison table and write one CSV row per variant.
pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let vocab_hash = p.vocab.content_hash();
    let (_, topics, env_map) = load_environment_chain(&out, &vocab_hash)?;
    check_feature_width(&p.features, cfg.model.d1)?;

    let (train_refs, val_refs, test_refs) = p.manifest.apply(&p.examples)?;
    let train_set = owned(train_refs);
    let val_set = owned(val_refs);
    let test_set = owned(test_refs);
    let data = TrainData {
        vocab: &p.vocab,
        features: &p.features,
        environments: Some(&env_map),
    };

    let mut csv = String::from(
        "variant,best_epoch,val_accuracy,test_precision,test_recall,test_f,test_accuracy\n",
    );
    for variant in TABLE_VARIANTS {
        let model_cfg = cfg.model.model_config(p.vocab.len(), topics, variant);
        model_cfg.validate()?;
        let mut model = DualAttentionModel::<f32>::new(
            model_cfg,
            cfg.stage_seed(&format!("ablate.{}.init", variant.name())),
        )?;
        let train_cfg =
            cfg.train.train_config(cfg.stage_seed(&format!("ablate.{}.train", variant.name())));
        let outcome = train::train(&mut model, &data, &train_set, &val_set, &train_cfg)?;
        let test = train::evaluate(&model, &data, &test_set)?;
        println!(
            "ablate[{variant}]: val {:.2} test {:.2}",
            outcome.best_val_accuracy, test.accuracy
        );
        writeln!(
            csv,
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.2}",
            variant.name(),
            outcome.best_epoch,
            outcome.best_val_accuracy,
            test.precision,
            test.recall,
            test.f_measure,
            test.accuracy
        )
        .expect("writing to a string cannot fail");
    }
    fs::write(out.join(ABLATION), csv).map_err(popattn::Error::from)?;
    println!("ablate: comparison written to {}", out.join(ABLATION).display());
    Ok(())
}

/// Iterative pick-out clustering of image features by popularity ratio.
pub fn cluster(cfg: &RunConfig, threshold_override: Option<f64>) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let examples_path = out.join(EXAMPLES);
    require_artifact(&examples_path, "labeled examples", "prepare")?;
    let features_path = cfg.features_path();
    require_file(&features_path, "features")?;
    let examples = dataset::read_examples(&examples_path)?;
    let features = read_features(&features_path)?;

    let threshold = threshold_override.unwrap_or(cfg.analysis.threshold);
    let report = pickout_clustering(
        &examples,
        &features,
        cfg.analysis.k,
        threshold,
        cfg.stage_seed("cluster"),
    )?;
    write_cluster_csv(&out.join(CLUSTERS), &report)?;
    let picked = report
        .categories
        .iter()
        .filter(|c| c.picked_out_at_round.is_some())
        .count();
    println!(
        "cluster: {} categories over {} rounds ({} picked out at |R - 0.5| > {threshold})",
        report.categories.len(),
        report.rounds,
        picked
    );
    Ok(())
}

/// Per-token positive/negative usage counts for words and emoji.
pub fn textstats(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let examples_path = out.join(EXAMPLES);
    require_artifact(&examples_path, "labeled examples", "prepare")?;
    let examples = dataset::read_examples(&examples_path)?;

    let site_stoplist = match &cfg.analysis.stoplist {
        Some(path) => {
            require_file(path, "stoplist")?;
            read_stoplist(path)?
        }
        None => Vec::new(),
    };
    let report = text_stats(&examples, &site_stoplist);
    write_text_stats_csv(&out.join(TEXT_STATS), &report)?;
    println!(
        "textstats: {} words and {} emoji scored ({} stoplist tokens suppressed)",
        report.words.len(),
        report.emoji.len(),
        report.stoplist_size
    );
    Ok(())
}

/// Export per-word attention weights for every test post.
pub fn attn(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let (model, env_map) = load_trained(&out, &p)?;
    let (_, _, test_refs) = p.manifest.apply(&p.examples)?;
    let test_set = owned(test_refs);
    let data = TrainData {
        vocab: &p.vocab,
        features: &p.features,
        environments: env_map.as_ref(),
    };
    let dump = export_attention(&model, &data, &test_set)?;
    write_attention_jsonl(&out.join(ATTENTION), &dump)?;
    println!(
        "attn: attention weights for {} test posts written to {}",
        dump.records.len(),
        out.join(ATTENTION).display()
    );
    Ok(())
}

/// Export a 7×7 popularity heatmap for every test post.
pub fn heatmap(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out(cfg)?;
    let p = load_pipeline(cfg)?;
    let spatial_path = cfg.spatial_path().ok_or_else(|| {
        CliError::Validation(format!(
            "no spatial features file configured and none found at {}",
            cfg.out().join(SPATIAL).display()
        ))
    })?;
    require_file(&spatial_path, "spatial features")?;
    let spatial = read_features(&spatial_path)?;
    if spatial.rows() != p.features.rows() {
        return Err(CliError::Validation(format!(
            "spatial file has {} rows but the features file has {}",
            spatial.rows(),
            p.features.rows()
        )));
    }

    let (model, env_map) = load_trained(&out, &p)?;
    let (_, _, test_refs) = p.manifest.apply(&p.examples)?;
    let test_set = owned(test_refs);
    let data = TrainData {
        vocab: &p.vocab,
        features: &p.features,
        environments: env_map.as_ref(),
    };
    let maps = test_set
        .par_iter()
        .map(|ex| popularity_heatmap(&model, &data, ex, Some(&spatial)))
        .collect::<popattn::Result<Vec<_>>>()?;
    write_heatmaps_jsonl(&out.join(HEATMAPS), &maps)?;
    println!(
        "heatmap: {} per-cell score grids written to {}",
        maps.len(),
        out.join(HEATMAPS).display()
    );
    Ok(())
}
