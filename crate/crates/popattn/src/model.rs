//! The dual-attention popularity classifier and its ablation/baseline
//! variants.
//!
//! Full model, per post:
//!
//! ```text
//! 1. Caption encoder: word embedding → one-layer LSTM → states Qᵉ [T×d2].
//! 2. Explicit co-attention between the image feature V and Qᵉ:
//!      A  = tanh(Qᵉ · (W_a V))                    — word-image affinity [T]
//!      Hq = tanh(Qᵉ W_qᵀ + A ⊗ (W_v V))           — attention features [T×k]
//!      aq = masked_softmax(Hq w_h)                — word weights [T]
//!      Q̂ᵉ = Σ_t aq_t qᵉ_t,   V̂ = FC₂(tanh(FC₁(V)))
//! 3. Implicit attention over the user environment (I_e, T_e):
//!      F = relu(W_i I_e) ⊙ relu(W_t T_e)
//!      e_w = relu(proj(W_i2 I_e + W_t2 T_e + F))
//! 4. Fusion head: h_w = V̂ + Q̂ᵉ; O₁ = relu(W₁[h_w, e_w] + b₁);
//!    probability = sigmoid(w₂·O₁ + b₂).
//! ```
//!
//! Ablations drop blocks 2 and/or 3; simple visual/textual/early/late
//! baselines skip attention entirely.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    glorot_uniform, load_checkpoint, lstm_forward, lstm_params, save_checkpoint, zeros_tensor,
    BoundLstm, LstmParams, ParamSet, Scalar, Tape, TensorId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    None,
    Visual,
    Textual,
    Early,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image feature width.
    pub d1: usize,
    /// Word embedding and LSTM hidden width; also the width of V̂, Q̂ᵉ, h_w.
    pub d2: usize,
    /// Attention hidden width (rows of W_q/W_v).
    pub k: usize,
    /// Topic vector width.
    pub topics: usize,
    /// Environment embedding width (e_w).
    pub d_env: usize,
    /// Fusion hidden width (O₁).
    pub d_fuse: usize,
    /// Caption length cap.
    pub t_max: usize,
    pub vocab_size: usize,
    pub use_explicit_attention: bool,
    pub use_environment: bool,
    pub use_implicit_attention: bool,
    pub baseline: Baseline,
}

impl ModelConfig {
    /// Production-scale dimensions.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d1: 2048,
            d2: 512,
            k: 128,
            topics: 400,
            d_env: 512,
            d_fuse: 512,
            t_max: 50,
            vocab_size,
            use_explicit_attention: true,
            use_environment: true,
            use_implicit_attention: true,
            baseline: Baseline::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("k", self.k),
            ("topics", self.topics),
            ("d_env", self.d_env),
            ("d_fuse", self.d_fuse),
            ("t_max", self.t_max),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must cover PAD and UNK"));
        }
        if self.use_implicit_attention && !self.use_environment {
            return Err(Error::invalid(
                "implicit attention needs the environment branch enabled",
            ));
        }
        if self.baseline != Baseline::None
            && (self.use_explicit_attention || self.use_environment || self.use_implicit_attention)
        {
            return Err(Error::invalid(
                "baselines do not combine with attention flags",
            ));
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (e_attn, env, i_attn, baseline) = match variant {
            Variant::Dual => (true, true, true, Baseline::None),
            Variant::EAttn => (true, false, false, Baseline::None),
            Variant::Env => (false, true, false, Baseline::None),
            Variant::EnvIAttn => (false, true, true, Baseline::None),
            Variant::EAttnEnv => (true, true, false, Baseline::None),
            Variant::Visual => (false, false, false, Baseline::Visual),
            Variant::Textual => (false, false, false, Baseline::Textual),
            Variant::Early => (false, false, false, Baseline::Early),
            Variant::Late => (false, false, false, Baseline::Late),
        };
        self.use_explicit_attention = e_attn;
        self.use_environment = env;
        self.use_implicit_attention = i_attn;
        self.baseline = baseline;
        self
    }

    fn is_baseline(&self) -> bool {
        self.baseline != Baseline::None
    }

    fn needs_caption_encoder(&self) -> bool {
        self.baseline != Baseline::Visual
    }

    fn needs_image_encoder(&self) -> bool {
        matches!(
            self.baseline,
            Baseline::None | Baseline::Visual | Baseline::Early | Baseline::Late
        )
    }
}

/// Named model variants: the full model, its ablations, and the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dual,
    EAttn,
    Env,
    EnvIAttn,
    EAttnEnv,
    Visual,
    Textual,
    Early,
    Late,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Dual,
        Variant::EAttn,
        Variant::Env,
        Variant::EnvIAttn,
        Variant::EAttnEnv,
        Variant::Visual,
        Variant::Textual,
        Variant::Early,
        Variant::Late,
    ];

    /// The five attention/environment combinations reported by the ablation
    /// command, strongest last.
    pub const ABLATIONS: [Variant; 5] = [
        Variant::EAttn,
        Variant::Env,
        Variant::EnvIAttn,
        Variant::EAttnEnv,
        Variant::Dual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dual => "dual",
            Variant::EAttn => "e-attn",
            Variant::Env => "env",
            Variant::EnvIAttn => "env-i-attn",
            Variant::EAttnEnv => "e-attn-env",
            Variant::Visual => "visual",
            Variant::Textual => "textual",
            Variant::Early => "early",
            Variant::Late => "late",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant {s:?}; one of {}", names.join(", ")))
            })
    }
}

/// One post as the model consumes it.
pub struct ModelInput<'a> {
    pub token_ids: &'a [u32],
    /// Image feature vector, length d1.
    pub image: &'a [f32],
    /// User environment (mean image, mean topic), when the variant uses it.
    pub env: Option<(&'a [f32], &'a [f32])>,
}

pub struct ForwardOutput {
    /// Probability of the positive class, shape [1], strictly inside (0,1).
    pub prob: TensorId,
    /// Explicit-attention word weights [T], when the variant computes them.
    pub attention: Option<TensorId>,
    /// Late-fusion branch probabilities (visual, textual).
    pub late_parts: Option<(TensorId, TensorId)>,
}

#[derive(Debug)]
pub struct DualAttentionModel<E: Scalar> {
    cfg: ModelConfig,
    pub params: ParamSet<E>,
    lstm: Option<LstmParams>,
}

/// Tape positions of every model parameter, ready for forward passes.
/// Bind once per tape and reuse across a whole batch.
pub struct BoundModel {
    ids: Vec<(String, TensorId)>,
    lstm: Option<BoundLstm>,
}

impl BoundModel {
    fn get(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("variant owns no parameter {name}"))
            .1
    }
}

impl<E: Scalar> DualAttentionModel<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed, "model.init");
        let mut params = ParamSet::new();
        let mut lstm = None;

        if cfg.needs_caption_encoder() {
            params.add("embed", glorot_uniform(cfg.vocab_size, cfg.d2, &mut rng))?;
            lstm = Some(lstm_params(&mut params, "lstm", cfg.d2, cfg.d2, &mut rng)?);
        }
        if cfg.needs_image_encoder() {
            params.add("venc.fc1.w", glorot_uniform(cfg.d2, cfg.d1, &mut rng))?;
            params.add("venc.fc1.b", zeros_tensor(vec![cfg.d2]))?;
        }
        if !cfg.is_baseline() {
            params.add("venc.fc2.w", glorot_uniform(cfg.d2, cfg.d2, &mut rng))?;
            params.add("venc.fc2.b", zeros_tensor(vec![cfg.d2]))?;
            if cfg.use_explicit_attention {
                params.add("eattn.w_a", glorot_uniform(cfg.d2, cfg.d1, &mut rng))?;
                params.add("eattn.w_q", glorot_uniform(cfg.k, cfg.d2, &mut rng))?;
                params.add("eattn.w_v", glorot_uniform(cfg.k, cfg.d1, &mut rng))?;
                let w_h = glorot_uniform::<E>(1, cfg.k, &mut rng).into_shape(vec![cfg.k])?;
                params.add("eattn.w_h", w_h)?;
            } else {
                params.add(
                    "content.w",
                    glorot_uniform(cfg.d2, 2 * cfg.d2, &mut rng),
                )?;
                params.add("content.b", zeros_tensor(vec![cfg.d2]))?;
            }
            if cfg.use_environment {
                if cfg.use_implicit_attention {
                    params.add("iattn.w_i", glorot_uniform(cfg.d_env, cfg.d1, &mut rng))?;
                    params.add("iattn.w_t", glorot_uniform(cfg.d_env, cfg.topics, &mut rng))?;
                    params.add("iattn.w_i2", glorot_uniform(cfg.d_env, cfg.d1, &mut rng))?;
                    params.add("iattn.w_t2", glorot_uniform(cfg.d_env, cfg.topics, &mut rng))?;
                    params.add("iattn.proj.w", glorot_uniform(cfg.d_env, cfg.d_env, &mut rng))?;
                    params.add("iattn.proj.b", zeros_tensor(vec![cfg.d_env]))?;
                } else {
                    params.add(
                        "env.fc.w",
                        glorot_uniform(cfg.d_env, cfg.d1 + cfg.topics, &mut rng),
                    )?;
                    params.add("env.fc.b", zeros_tensor(vec![cfg.d_env]))?;
                }
            }
        }
        match cfg.baseline {
            Baseline::Late => {
                for head in ["late.vis", "late.tex"] {
                    add_head(&mut params, head, cfg.d2, cfg.d_fuse, &mut rng)?;
                }
            }
            _ => {
                let fuse_in = match cfg.baseline {
                    Baseline::None => cfg.d2 + if cfg.use_environment { cfg.d_env } else { 0 },
                    Baseline::Visual | Baseline::Textual => cfg.d2,
                    Baseline::Early => 2 * cfg.d2,
                    Baseline::Late => unreachable!(),
                };
                add_head(&mut params, "fuse", fuse_in, cfg.d_fuse, &mut rng)?;
            }
        }
        Ok(DualAttentionModel { cfg, params, lstm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundModel {
        let ids = self
            .params
            .iter()
            .map(|(id, p)| (p.name().to_string(), tape.param(&self.params, id)))
            .collect();
        BoundModel {
            ids,
            lstm: self.lstm.map(|l| l.bind(tape, &self.params)),
        }
    }

    /// Encode a caption: embedding lookup then LSTM states, [T×d2].
    pub fn encode_caption(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundModel,
        token_ids: &[u32],
    ) -> Result<TensorId> {
        if token_ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty caption"));
        }
        if token_ids.len() > self.cfg.t_max {
            return Err(Error::invalid(format!(
                "caption has {} tokens, cap is {}",
                token_ids.len(),
                self.cfg.t_max
            )));
        }
        let ids: Vec<usize> = token_ids.iter().map(|t| *t as usize).collect();
        let embedded = tape.embedding_lookup(bound.get("embed"), &ids)?;
        let lstm = bound.lstm.as_ref().expect("caption encoder bound");
        lstm_forward(tape, lstm, embedded)
    }

    /// Explicit co-attention. Returns (V̂, Q̂ᵉ, aq).
    pub fn explicit_attention(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundModel,
        q_e: TensorId,
        v: TensorId,
        mask: &[bool],
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let t = tape.shape(q_e)[0];
        // A = tanh(Qᵉ · (W_a V)): one affinity score per word.
        let wa_v = tape.matvec(bound.get("eattn.w_a"), v)?;
        let affinity = tape.matvec(q_e, wa_v)?;
        let affinity = tape.tanh(affinity);
        // Hq rows: tanh(W_q qᵉ_t + A_t · (W_v V)).
        let wq_t = tape.transpose(bound.get("eattn.w_q"))?;
        let caption_part = tape.matmul(q_e, wq_t)?;
        let wv_v = tape.matvec(bound.get("eattn.w_v"), v)?;
        let a_col = tape.reshape(affinity, vec![t, 1])?;
        let wv_row = tape.reshape(wv_v, vec![1, self.cfg.k])?;
        let image_part = tape.matmul(a_col, wv_row)?;
        let pre = tape.add(caption_part, image_part)?;
        let h_q = tape.tanh(pre);
        // One score per word, softmaxed over unmasked positions.
        let scores = tape.matvec(h_q, bound.get("eattn.w_h"))?;
        let a_q = tape.masked_softmax(scores, mask)?;
        // Q̂ᵉ = Σ_t aq_t qᵉ_t.
        let q_e_t = tape.transpose(q_e)?;
        let q_hat = tape.matvec(q_e_t, a_q)?;
        let v_hat = self.encode_image(tape, bound, v)?;
        Ok((v_hat, q_hat, a_q))
    }

    /// V̂ = FC₂(tanh(FC₁(V))).
    fn encode_image(&self, tape: &mut Tape<E>, bound: &BoundModel, v: TensorId) -> Result<TensorId> {
        let h = affine(tape, bound, "venc.fc1", v)?;
        let h = tape.tanh(h);
        affine(tape, bound, "venc.fc2", h)
    }

    /// Implicit attention over the environment pair. Returns e_w.
    pub fn implicit_attention(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundModel,
        i_e: TensorId,
        t_e: TensorId,
    ) -> Result<TensorId> {
        let gate_i = tape.matvec(bound.get("iattn.w_i"), i_e)?;
        let gate_i = tape.relu(gate_i);
        let gate_t = tape.matvec(bound.get("iattn.w_t"), t_e)?;
        let gate_t = tape.relu(gate_t);
        let gate = tape.mul(gate_i, gate_t)?;
        let short_i = tape.matvec(bound.get("iattn.w_i2"), i_e)?;
        let short_t = tape.matvec(bound.get("iattn.w_t2"), t_e)?;
        let shortcut = tape.add(short_i, short_t)?;
        let h = tape.add(shortcut, gate)?;
        let e_w = affine(tape, bound, "iattn.proj", h)?;
        Ok(tape.relu(e_w))
    }

    /// Full forward pass to a probability.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundModel,
        input: &ModelInput<'_>,
    ) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        if cfg.is_baseline() {
            return self.forward_baseline(tape, bound, input);
        }

        let v = tape.constant_f32(vec![cfg.d1], input.image)?;
        let q_e = self.encode_caption(tape, bound, input.token_ids)?;
        let mask = vec![true; input.token_ids.len()];

        let (h_w, attention) = if cfg.use_explicit_attention {
            let (v_hat, q_hat, a_q) = self.explicit_attention(tape, bound, q_e, v, &mask)?;
            (tape.add(v_hat, q_hat)?, Some(a_q))
        } else {
            // No attention: mean-pooled caption next to the encoded image.
            let v_hat = self.encode_image(tape, bound, v)?;
            let q_bar = mean_rows(tape, q_e)?;
            let both = tape.concat_last_axis(v_hat, q_bar)?;
            let h = affine_from(tape, bound.get("content.w"), bound.get("content.b"), both)?;
            (tape.relu(h), None)
        };

        let fused_in = if cfg.use_environment {
            let (env_image, env_topic) = input.env.expect("validated above");
            let i_e = tape.constant_f32(vec![cfg.d1], env_image)?;
            let t_e = tape.constant_f32(vec![cfg.topics], env_topic)?;
            let e_w = if cfg.use_implicit_attention {
                self.implicit_attention(tape, bound, i_e, t_e)?
            } else {
                let pair = tape.concat_last_axis(i_e, t_e)?;
                let h = affine(tape, bound, "env.fc", pair)?;
                tape.relu(h)
            };
            tape.concat_last_axis(h_w, e_w)?
        } else {
            h_w
        };
        let prob = head_prob(tape, bound, "fuse", fused_in)?;
        Ok(ForwardOutput { prob, attention, late_parts: None })
    }

    fn forward_baseline(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundModel,
        input: &ModelInput<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let image_vec = |tape: &mut Tape<E>| tape.constant_f32(vec![cfg.d1], input.image);
        let visual_feat = |tape: &mut Tape<E>, bound: &BoundModel| -> Result<TensorId> {
            let v = image_vec(tape)?;
            let h = affine(tape, bound, "venc.fc1", v)?;
            Ok(tape.tanh(h))
        };
        let textual_feat = |tape: &mut Tape<E>, model: &Self, bound: &BoundModel| -> Result<TensorId> {
            let q_e = model.encode_caption(tape, bound, input.token_ids)?;
            mean_rows(tape, q_e)
        };
        let (prob, late_parts) = match cfg.baseline {
            Baseline::Visual => {
                let x = visual_feat(tape, bound)?;
                (head_prob(tape, bound, "fuse", x)?, None)
            }
            Baseline::Textual => {
                let x = textual_feat(tape, self, bound)?;
                (head_prob(tape, bound, "fuse", x)?, None)
            }
            Baseline::Early => {
                let vx = visual_feat(tape, bound)?;
                let tx = textual_feat(tape, self, bound)?;
                let x = tape.concat_last_axis(vx, tx)?;
                (head_prob(tape, bound, "fuse", x)?, None)
            }
            Baseline::Late => {
                let vx = visual_feat(tape, bound)?;
                let p_vis = head_prob(tape, bound, "late.vis", vx)?;
                let tx = textual_feat(tape, self, bound)?;
                let p_tex = head_prob(tape, bound, "late.tex", tx)?;
                let sum = tape.add(p_vis, p_tex)?;
                let prob = tape.scale(sum, E::from_f64(0.5));
                (prob, Some((p_vis, p_tex)))
            }
            Baseline::None => unreachable!(),
        };
        Ok(ForwardOutput { prob, attention: None, late_parts })
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<()> {
        let cfg = &self.cfg;
        if input.image.len() != cfg.d1 {
            return Err(Error::invalid(format!(
                "image feature has {} values, model wants d1 = {}",
                input.image.len(),
                cfg.d1
            )));
        }
        if let Some(bad) = input.token_ids.iter().find(|t| **t as usize >= cfg.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: *bad as usize,
                len: cfg.vocab_size,
            });
        }
        match (cfg.use_environment, input.env) {
            (true, None) => {
                return Err(Error::invalid("variant needs a user environment, none given"))
            }
            (true, Some((image, topic))) => {
                if image.len() != cfg.d1 || topic.len() != cfg.topics {
                    return Err(Error::invalid(format!(
                        "environment dims ({}, {}) do not match model ({}, {})",
                        image.len(),
                        topic.len(),
                        cfg.d1,
                        cfg.topics
                    )));
                }
            }
            (false, _) => {}
        }
        Ok(())
    }

    /// Write parameters plus a manifest binding them to the config and to the
    /// vocabulary/topic-model content hashes.
    pub fn save(&self, path: &Path, vocab_hash: &str, lda_hash: Option<&str>) -> Result<()>
    where
        E: Scalar,
    {
        let manifest = serde_json::json!({
            "config": self.cfg,
            "vocab_hash": vocab_hash,
            "lda_hash": lda_hash,
        });
        let params32 = self.params.cast::<f32>();
        save_checkpoint(path, &params32, manifest)
    }
}

impl DualAttentionModel<f32> {
    /// Load a checkpoint, refusing artifacts built for a different config,
    /// vocabulary, or topic model.
    pub fn load(
        path: &Path,
        expect_vocab_hash: &str,
        expect_lda_hash: Option<&str>,
    ) -> Result<Self> {
        let (header, loaded) = load_checkpoint(path)?;
        let manifest = header.manifest;
        let cfg: ModelConfig = serde_json::from_value(
            manifest
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Incompatible("checkpoint manifest lacks a config".into()))?,
        )?;
        let vocab_hash = manifest.get("vocab_hash").and_then(|v| v.as_str()).unwrap_or("");
        if vocab_hash != expect_vocab_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with vocabulary {}, current is {}",
                short(vocab_hash),
                short(expect_vocab_hash)
            )));
        }
        let lda_hash = manifest.get("lda_hash").and_then(|v| v.as_str());
        if cfg.use_environment && lda_hash != expect_lda_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with topic model {}, current is {}",
                short(lda_hash.unwrap_or("none")),
                short(expect_lda_hash.unwrap_or("none"))
            )));
        }

        // The skeleton defines the parameter schema; the checkpoint must
        // match it name for name, shape for shape.
        let skeleton = DualAttentionModel::<f32>::new(cfg, 0)?;
        if skeleton.params.len() != loaded.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, config needs {}",
                loaded.len(),
                skeleton.params.len()
            )));
        }
        for (_, want) in skeleton.params.iter() {
            let id = loaded.id_of(want.name()).ok_or_else(|| {
                Error::Incompatible(format!("checkpoint lacks parameter {}", want.name()))
            })?;
            let got = loaded.get(id);
            if got.value.shape() != want.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} has shape {:?}, config needs {:?}",
                    want.name(),
                    got.value.shape(),
                    want.value.shape()
                )));
            }
        }
        let lstm = skeleton.lstm.map(|_| LstmParams {
            w_ih: loaded.id_of("lstm.w_ih").expect("schema checked"),
            w_hh: loaded.id_of("lstm.w_hh").expect("schema checked"),
            bias: loaded.id_of("lstm.bias").expect("schema checked"),
        });
        Ok(DualAttentionModel { cfg: skeleton.cfg, params: loaded, lstm })
    }
}

fn short(hash: &str) -> &str {
    &hash[..12.min(hash.len())]
}

/// y = W x + b for parameters `{prefix}.w`, `{prefix}.b`.
fn affine<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundModel,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    affine_from(
        tape,
        bound.get(&format!("{prefix}.w")),
        bound.get(&format!("{prefix}.b")),
        x,
    )
}

fn affine_from<E: Scalar>(
    tape: &mut Tape<E>,
    w: TensorId,
    b: TensorId,
    x: TensorId,
) -> Result<TensorId> {
    let wx = tape.matvec(w, x)?;
    tape.add(wx, b)
}

/// Mean over the leading axis of a [T, d] matrix, as a [d] vector.
fn mean_rows<E: Scalar>(tape: &mut Tape<E>, m: TensorId) -> Result<TensorId> {
    let t = tape.shape(m)[0];
    let weights = tape.constant_vec(vec![t], vec![E::from_f64(1.0 / t as f64); t])?;
    let m_t = tape.transpose(m)?;
    tape.matvec(m_t, weights)
}

/// relu hidden layer then sigmoid output: sigmoid(w₂·relu(W₁x + b₁) + b₂).
fn head_prob<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &BoundModel,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let h = affine_from(
        tape,
        bound.get(&format!("{prefix}.w1")),
        bound.get(&format!("{prefix}.b1")),
        x,
    )?;
    let h = tape.relu(h);
    let w2 = bound.get(&format!("{prefix}.w2"));
    let d = tape.shape(w2)[0];
    let w2_row = tape.reshape(w2, vec![1, d])?;
    let logit = tape.matvec(w2_row, h)?;
    let logit = tape.add(logit, bound.get(&format!("{prefix}.b2")))?;
    Ok(tape.sigmoid(logit))
}

fn add_head<E: Scalar>(
    params: &mut ParamSet<E>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    params.add(format!("{prefix}.w1"), glorot_uniform(hidden, input, rng))?;
    params.add(format!("{prefix}.b1"), zeros_tensor(vec![hidden]))?;
    let w2 = glorot_uniform::<E>(1, hidden, rng).into_shape(vec![hidden])?;
    params.add(format!("{prefix}.w2"), w2)?;
    params.add(format!("{prefix}.b2"), zeros_tensor(vec![1]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d1: 8,
            d2: 6,
            k: 4,
            topics: 5,
            d_env: 6,
            d_fuse: 7,
            t_max: 10,
            vocab_size: 9,
            use_explicit_attention: true,
            use_environment: true,
            use_implicit_attention: true,
            baseline: Baseline::None,
        }
    }

    fn tiny_input() -> (Vec<u32>, Vec<f32>, Vec<f32>, Vec<f32>) {
        let tokens = vec![2u32, 5, 3];
        let image: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37 - 1.2).sin()).collect();
        let env_image: Vec<f32> = (0..8).map(|i| (i as f32 * 0.21 + 0.4).cos()).collect();
        let env_topic = vec![0.1, 0.3, 0.2, 0.25, 0.15];
        (tokens, image, env_image, env_topic)
    }

    fn forward_prob<E: Scalar>(model: &DualAttentionModel<E>) -> (E, Option<Vec<E>>) {
        let (tokens, image, env_image, env_topic) = tiny_input();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let input = ModelInput {
            token_ids: &tokens,
            image: &image,
            env: model.config().use_environment.then_some((&env_image[..], &env_topic[..])),
        };
        let out = model.forward(&mut tape, &bound, &input).unwrap();
        let attn = out.attention.map(|a| tape.value(a).to_vec());
        (tape.scalar(out.prob), attn)
    }

    #[test]
    fn config_validation_rejects_bad_flag_combinations() {
        let mut cfg = tiny_config();
        cfg.use_environment = false; // implicit attention still on
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.baseline = Baseline::Visual; // flags still on
        assert!(cfg.validate().is_err());
        let cfg = cfg.with_variant(Variant::Visual);
        cfg.validate().unwrap();

        let mut cfg = tiny_config();
        cfg.d2 = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            tiny_config().with_variant(v).validate().unwrap();
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_weights_score_exactly_half_for_every_variant() {
        for v in Variant::ALL {
            let cfg = tiny_config().with_variant(v);
            let mut model = DualAttentionModel::<f32>::new(cfg, 3).unwrap();
            for (_, p) in model.params.iter_mut() {
                p.value.data_mut().fill(0.0);
            }
            let (prob, _) = forward_prob(&model);
            assert_eq!(prob, 0.5, "variant {v}");
        }
    }

    #[test]
    fn probabilities_stay_strictly_inside_unit_interval() {
        for v in Variant::ALL {
            let cfg = tiny_config().with_variant(v);
            let model = DualAttentionModel::<f32>::new(cfg, 11).unwrap();
            let (prob, _) = forward_prob(&model);
            assert!(prob > 0.0 && prob < 1.0, "variant {v}: {prob}");
        }
    }

    #[test]
    fn attention_weights_form_a_probability_vector() {
        let model = DualAttentionModel::<f64>::new(tiny_config(), 7).unwrap();
        let (_, attn) = forward_prob(&model);
        let attn = attn.unwrap();
        assert_eq!(attn.len(), 3);
        let sum: f64 = attn.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(attn.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn single_token_caption_gets_full_attention() {
        let model = DualAttentionModel::<f32>::new(tiny_config(), 5).unwrap();
        let (_, image, env_image, env_topic) = tiny_input();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let input = ModelInput {
            token_ids: &[4],
            image: &image,
            env: Some((&env_image, &env_topic)),
        };
        let out = model.forward(&mut tape, &bound, &input).unwrap();
        assert_eq!(tape.value(out.attention.unwrap()), &[1.0]);
    }

    #[test]
    fn zeroed_image_branch_makes_attention_ignore_the_image() {
        let mut model = DualAttentionModel::<f32>::new(tiny_config(), 9).unwrap();
        for name in ["eattn.w_a", "eattn.w_v"] {
            let id = model.params.id_of(name).unwrap();
            model.params.get_mut(id).value.data_mut().fill(0.0);
        }
        let (tokens, image, env_image, env_topic) = tiny_input();
        let run = |image: &[f32], model: &DualAttentionModel<f32>| -> Vec<u32> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let input = ModelInput {
                token_ids: &tokens,
                image,
                env: Some((&env_image, &env_topic)),
            };
            let out = model.forward(&mut tape, &bound, &input).unwrap();
            tape.value(out.attention.unwrap()).iter().map(|v| v.to_bits()).collect()
        };
        let perturbed: Vec<f32> = image.iter().map(|v| v * -3.0 + 0.7).collect();
        assert_eq!(run(&image, &model), run(&perturbed, &model));
    }

    #[test]
    fn permuting_encoder_rows_permutes_attention_and_preserves_the_summary() {
        let model = DualAttentionModel::<f64>::new(tiny_config(), 13).unwrap();
        let (_, image, _, _) = tiny_input();
        let q_rows: Vec<Vec<f64>> = (0..4)
            .map(|t| (0..6).map(|j| ((t * 6 + j) as f64 * 0.13 - 0.4).sin()).collect())
            .collect();
        let perm = [2usize, 0, 3, 1];

        let run = |rows: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let q_e = tape.constant_vec(vec![rows.len(), 6], flat).unwrap();
            let v = tape.constant_f32(vec![8], &image).unwrap();
            let mask = vec![true; rows.len()];
            let (_, q_hat, a_q) = model.explicit_attention(&mut tape, &bound, q_e, v, &mask).unwrap();
            (tape.value(a_q).to_vec(), tape.value(q_hat).to_vec())
        };

        let (a_base, q_base) = run(&q_rows);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|i| q_rows[*i].clone()).collect();
        let (a_perm, q_perm) = run(&permuted);
        for (t, &src) in perm.iter().enumerate() {
            assert!((a_perm[t] - a_base[src]).abs() < 1e-12);
        }
        for (a, b) in q_perm.iter().zip(&q_base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn late_fusion_averages_two_independent_branches() {
        let cfg = tiny_config().with_variant(Variant::Late);
        let model = DualAttentionModel::<f64>::new(cfg, 17).unwrap();
        let (tokens, image, _, _) = tiny_input();
        let run = |tokens: &[u32], image: &[f32]| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let input = ModelInput { token_ids: tokens, image, env: None };
            let out = model.forward(&mut tape, &bound, &input).unwrap();
            let (vis, tex) = out.late_parts.unwrap();
            (tape.scalar(out.prob), tape.scalar(vis), tape.scalar(tex))
        };
        let (p, vis, tex) = run(&tokens, &image);
        assert!((p - (vis + tex) / 2.0).abs() < 1e-15);

        // The branches are separate trunks: caption edits move only the
        // textual probability, image edits only the visual one.
        let (_, vis2, tex2) = run(&[7, 7], &image);
        assert_eq!(vis2, vis);
        assert_ne!(tex2, tex);
        let other_image: Vec<f32> = image.iter().map(|v| v + 0.5).collect();
        let (_, vis3, tex3) = run(&tokens, &other_image);
        assert_ne!(vis3, vis);
        assert_eq!(tex3, tex);
    }

    #[test]
    fn negating_the_output_layer_flips_the_decision() {
        let mut model = DualAttentionModel::<f64>::new(tiny_config(), 19).unwrap();
        let (p, _) = forward_prob(&model);
        for name in ["fuse.w2", "fuse.b2"] {
            let id = model.params.id_of(name).unwrap();
            for v in model.params.get_mut(id).value.data_mut() {
                *v = -*v;
            }
        }
        let (p_neg, _) = forward_prob(&model);
        assert!((p_neg - (1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn missing_or_misshapen_inputs_are_rejected() {
        let model = DualAttentionModel::<f32>::new(tiny_config(), 23).unwrap();
        let (tokens, image, env_image, env_topic) = tiny_input();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);

        let no_env = ModelInput { token_ids: &tokens, image: &image, env: None };
        assert!(model.forward(&mut tape, &bound, &no_env).is_err());

        let short_image = ModelInput {
            token_ids: &tokens,
            image: &image[..4],
            env: Some((&env_image, &env_topic)),
        };
        assert!(model.forward(&mut tape, &bound, &short_image).is_err());

        let bad_token = ModelInput {
            token_ids: &[100],
            image: &image,
            env: Some((&env_image, &env_topic)),
        };
        assert!(model.forward(&mut tape, &bound, &bad_token).is_err());

        let empty = ModelInput {
            token_ids: &[],
            image: &image,
            env: Some((&env_image, &env_topic)),
        };
        assert!(model.forward(&mut tape, &bound, &empty).is_err());

        let long = vec![2u32; 11];
        let too_long = ModelInput {
            token_ids: &long,
            image: &image,
            env: Some((&env_image, &env_topic)),
        };
        assert!(model.forward(&mut tape, &bound, &too_long).is_err());
    }

    #[test]
    fn every_variant_matches_the_finite_difference_oracle() {
        let (tokens, image, env_image, env_topic) = tiny_input();
        for v in Variant::ALL {
            let cfg = tiny_config().with_variant(v);
            let model = DualAttentionModel::<f64>::new(cfg.clone(), 29).unwrap();
            let mut params = model.params.cast::<f64>();

            let run = |ps: &ParamSet<f64>| -> f64 {
                let probe = DualAttentionModel {
                    cfg: cfg.clone(),
                    params: ps.cast::<f64>(),
                    lstm: model.lstm,
                };
                let mut tape = Tape::new();
                let bound = probe.bind(&mut tape);
                let input = ModelInput {
                    token_ids: &tokens,
                    image: &image,
                    env: cfg.use_environment.then_some((&env_image[..], &env_topic[..])),
                };
                let out = probe.forward(&mut tape, &bound, &input).unwrap();
                let loss = tape.bce_loss(out.prob, &[true]).unwrap();
                tape.scalar(loss)
            };
            let fd = gradcheck::fd_param_grads(&mut params, run, gradcheck::FD_STEP);

            let probe = DualAttentionModel {
                cfg: cfg.clone(),
                params: params.cast::<f64>(),
                lstm: model.lstm,
            };
            let mut analytic_params = params.cast::<f64>();
            let mut tape = Tape::new();
            let bound = probe.bind(&mut tape);
            let input = ModelInput {
                token_ids: &tokens,
                image: &image,
                env: cfg.use_environment.then_some((&env_image[..], &env_topic[..])),
            };
            let out = probe.forward(&mut tape, &bound, &input).unwrap();
            let loss = tape.bce_loss(out.prob, &[true]).unwrap();
            tape.backward(loss, &mut analytic_params).unwrap();
            let analytic = gradcheck::collected_grads(&analytic_params);

            for (g, n) in analytic.iter().zip(&fd) {
                let err = gradcheck::max_rel_err(g, n);
                assert!(err < 1e-4, "variant {v}: max rel err {err:.3e}");
            }
        }
    }

    #[test]
    fn f32_gradients_track_the_f64_oracle() {
        let (tokens, image, env_image, env_topic) = tiny_input();
        let cfg = tiny_config();
        let model64 = DualAttentionModel::<f64>::new(cfg.clone(), 31).unwrap();
        let mut params64 = model64.params.cast::<f64>();
        let run = |ps: &ParamSet<f64>| -> f64 {
            let probe = DualAttentionModel {
                cfg: cfg.clone(),
                params: ps.cast::<f64>(),
                lstm: model64.lstm,
            };
            let mut tape = Tape::new();
            let bound = probe.bind(&mut tape);
            let input = ModelInput {
                token_ids: &tokens,
                image: &image,
                env: Some((&env_image[..], &env_topic[..])),
            };
            let out = probe.forward(&mut tape, &bound, &input).unwrap();
            let loss = tape.bce_loss(out.prob, &[true]).unwrap();
            tape.scalar(loss)
        };
        let fd = gradcheck::fd_param_grads(&mut params64, run, gradcheck::FD_STEP);

        // Same seed in f32: weights are drawn through f32 so they agree bit
        // for bit, and the analytic f32 gradients must track the f64 oracle.
        let model32 = DualAttentionModel::<f32>::new(cfg.clone(), 31).unwrap();
        let mut params32 = model32.params.cast::<f32>();
        let mut tape: Tape<f32> = Tape::new();
        let bound = model32.bind(&mut tape);
        let input = ModelInput {
            token_ids: &tokens,
            image: &image,
            env: Some((&env_image[..], &env_topic[..])),
        };
        let out = model32.forward(&mut tape, &bound, &input).unwrap();
        let loss = tape.bce_loss(out.prob, &[true]).unwrap();
        tape.backward(loss, &mut params32).unwrap();
        let analytic = gradcheck::collected_grads(&params32);
        for (g, n) in analytic.iter().zip(&fd) {
            let err = gradcheck::max_rel_err(g, n);
            assert!(err < 1e-2, "max rel err {err:.3e}");
        }
    }

    #[test]
    fn checkpoints_round_trip_and_reject_mismatched_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = DualAttentionModel::<f32>::new(tiny_config(), 37).unwrap();
        model.save(&path, "vocab-a", Some("lda-a")).unwrap();

        let loaded = DualAttentionModel::<f32>::load(&path, "vocab-a", Some("lda-a")).unwrap();
        assert_eq!(loaded.config(), model.config());
        let (p0, _) = forward_prob(&model);
        let (p1, _) = forward_prob(&loaded);
        assert_eq!(p0.to_bits(), p1.to_bits());

        let err = DualAttentionModel::<f32>::load(&path, "vocab-b", Some("lda-a")).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
        let err = DualAttentionModel::<f32>::load(&path, "vocab-a", Some("lda-b")).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }

    #[test]
    fn variant_checkpoints_carry_their_parameter_schema() {
        let dir = tempfile::tempdir().unwrap();
        for v in [Variant::EAttn, Variant::Late, Variant::Env] {
            let path = dir.path().join(format!("{v}.ckpt"));
            let cfg = tiny_config().with_variant(v);
            let model = DualAttentionModel::<f32>::new(cfg, 41).unwrap();
            model.save(&path, "vocab", None).unwrap();
            let loaded = DualAttentionModel::<f32>::load(&path, "vocab", None).unwrap();
            assert_eq!(loaded.params.len(), model.params.len());
            let (p0, _) = forward_prob(&model);
            let (p1, _) = forward_prob(&loaded);
            assert_eq!(p0.to_bits(), p1.to_bits(), "variant {v}");
        }
    }
}
