//! Speaker inference: a transformer encoder over the magnitude spectrogram
//! and a decoder driven by positional queries that emits one (class
//! distribution, embedding) pair per step until the end-of-sequence class.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::nn::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::signal::MagnitudeSpectrogram;

/// The N training speakers plus the reserved end-of-sequence class.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeakerVocabulary {
    pub n_speakers: usize,
}

impl SpeakerVocabulary {
    pub fn new(n_speakers: usize) -> Self {
        SpeakerVocabulary { n_speakers }
    }

    pub fn eos_index(&self) -> usize {
        self.n_speakers
    }

    /// Output distribution dimensionality: N + 1.
    pub fn n_classes(&self) -> usize {
        self.n_speakers + 1
    }

    pub fn contains(&self, speaker_id: usize) -> bool {
        speaker_id < self.n_speakers
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InferenceNetConfig {
    /// Model width D.
    pub d_model: usize,
    /// Encoder (and decoder) block count M.
    pub m_blocks: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    /// Spectrogram bins F consumed by the input projection.
    pub n_bins: usize,
    pub max_steps: usize,
    pub dropout: f64,
    /// Layer norm after the residual (post-norm, the default) or before the
    /// sublayer (pre-norm).
    pub pre_norm: bool,
}

impl InferenceNetConfig {
    /// Desk-scale profile used by the toy experiments.
    pub fn desk() -> Self {
        InferenceNetConfig {
            d_model: 64,
            m_blocks: 1,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            d_ff: 256,
            n_bins: 129,
            max_steps: 6,
            dropout: 0.1,
            pre_norm: false,
        }
    }

    /// Full-scale profile (M=1, d_model=512, H=8, d_k=d_v=64, d_ff=2048).
    pub fn paper() -> Self {
        InferenceNetConfig {
            d_model: 512,
            m_blocks: 1,
            n_heads: 8,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            n_bins: 129,
            max_steps: 6,
            dropout: 0.1,
            pre_norm: false,
        }
    }

    /// Tiny profile for gradient checks.
    pub fn tiny(n_bins: usize) -> Self {
        InferenceNetConfig {
            d_model: 8,
            m_blocks: 1,
            n_heads: 2,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            n_bins,
            max_steps: 5,
            dropout: 0.0,
            pre_norm: false,
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.n_heads * self.d_k != self.d_model {
            errors.push(format!(
                "inference_net: n_heads * d_k ({} * {}) must equal d_model ({})",
                self.n_heads, self.d_k, self.d_model
            ));
        }
        if self.max_steps < 2 {
            errors.push("inference_net: max_steps must be >= 2".into());
        }
        if self.m_blocks < 1 {
            errors.push("inference_net: m_blocks must be >= 1".into());
        }
    }
}

/// One decoder step: class distribution over N+1 classes plus the embedding
/// used to condition the extractor, and the summed cross-attention status.
#[derive(Clone, Debug)]
pub struct InferenceStep {
    pub distribution: Vec<f64>,
    pub embedding: Array2<f64>,
    /// Per-frame cross-attention weights summed over heads.
    pub attention_status: Vec<f64>,
    /// Greedy class pick (with repetition masking) for this step.
    pub class_index: usize,
}

/// Result of greedy decoding: the steps strictly before EOS.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub steps: Vec<InferenceStep>,
    /// Set when the decode cap was reached without emitting EOS.
    pub truncated: bool,
}

struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

struct FeedForwardParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct EncoderBlockParams {
    attn: AttnParams,
    ln1: LayerNormParams,
    ff: FeedForwardParams,
    ln2: LayerNormParams,
}

struct DecoderBlockParams {
    self_attn: AttnParams,
    ln1: LayerNormParams,
    cross_attn: AttnParams,
    ln2: LayerNormParams,
    ff: FeedForwardParams,
    ln3: LayerNormParams,
}

pub struct InferenceNet {
    pub cfg: InferenceNetConfig,
    pub vocab: SpeakerVocabulary,
    in_proj_w: ParamId,
    in_proj_b: ParamId,
    encoder: Vec<EncoderBlockParams>,
    decoder: Vec<DecoderBlockParams>,
    pos_w: ParamId,
    pos_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Dropout configuration for a training-mode forward pass.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

impl DropoutCtx<'_> {
    /// Short-lived copy for passing to one of several sequential calls.
    pub fn reborrow(&mut self) -> DropoutCtx<'_> {
        DropoutCtx {
            rng: &mut *self.rng,
            p: self.p,
        }
    }
}

fn dropout(g: &mut Graph, x: NodeId, ctx: &mut Option<DropoutCtx<'_>>) -> NodeId {
    match ctx {
        Some(ctx) if ctx.p > 0.0 => {
            let dim = g.value(x).dim();
            let keep = 1.0 - ctx.p;
            let mask = Array2::from_shape_fn(dim, |_| {
                if ctx.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

impl InferenceNet {
    pub fn new(
        cfg: InferenceNetConfig,
        vocab: SpeakerVocabulary,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        use crate::nn::param::{ones, xavier, zeros};
        let d = cfg.d_model;
        let group = ParamGroup::Inference;
        let attn = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| AttnParams {
            wq: store.register(format!("{prefix}.wq"), group, xavier(cfg.n_heads * cfg.d_k, d, rng)),
            wk: store.register(format!("{prefix}.wk"), group, xavier(cfg.n_heads * cfg.d_k, d, rng)),
            wv: store.register(format!("{prefix}.wv"), group, xavier(cfg.n_heads * cfg.d_v, d, rng)),
            wo: store.register(format!("{prefix}.wo"), group, xavier(d, cfg.n_heads * cfg.d_v, rng)),
            bo: store.register(format!("{prefix}.bo"), group, zeros(d, 1)),
        };
        let ln = |store: &mut ParamStore, prefix: &str| LayerNormParams {
            gamma: store.register(format!("{prefix}.gamma"), group, ones(d, 1)),
            beta: store.register(format!("{prefix}.beta"), group, zeros(d, 1)),
        };
        let ff = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| FeedForwardParams {
            w1: store.register(format!("{prefix}.w1"), group, xavier(cfg.d_ff, d, rng)),
            b1: store.register(format!("{prefix}.b1"), group, zeros(cfg.d_ff, 1)),
            w2: store.register(format!("{prefix}.w2"), group, xavier(d, cfg.d_ff, rng)),
            b2: store.register(format!("{prefix}.b2"), group, zeros(d, 1)),
        };

        let in_proj_w = store.register("inference.in_proj.w", group, xavier(d, cfg.n_bins, rng));
        let in_proj_b = store.register("inference.in_proj.b", group, zeros(d, 1));
        let encoder = (0..cfg.m_blocks)
            .map(|m| EncoderBlockParams {
                attn: attn(store, rng, &format!("inference.enc{m}.attn")),
                ln1: ln(store, &format!("inference.enc{m}.ln1")),
                ff: ff(store, rng, &format!("inference.enc{m}.ff")),
                ln2: ln(store, &format!("inference.enc{m}.ln2")),
            })
            .collect();
        let decoder = (0..cfg.m_blocks)
            .map(|m| DecoderBlockParams {
                self_attn: attn(store, rng, &format!("inference.dec{m}.self_attn")),
                ln1: ln(store, &format!("inference.dec{m}.ln1")),
                cross_attn: attn(store, rng, &format!("inference.dec{m}.cross_attn")),
                ln2: ln(store, &format!("inference.dec{m}.ln2")),
                ff: ff(store, rng, &format!("inference.dec{m}.ff")),
                ln3: ln(store, &format!("inference.dec{m}.ln3")),
            })
            .collect();
        let pos_w = store.register("inference.pos.w", group, xavier(d, 1, rng));
        let pos_b = store.register("inference.pos.b", group, zeros(d, 1));
        let cls_w = store.register(
            "inference.cls.w",
            group,
            xavier(vocab.n_classes(), d, rng),
        );
        let cls_b = store.register("inference.cls.b", group, zeros(vocab.n_classes(), 1));

        InferenceNet {
            cfg,
            vocab,
            in_proj_w,
            in_proj_b,
            encoder,
            decoder,
            pos_w,
            pos_b,
            cls_w,
            cls_b,
        }
    }

    fn layer_norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &LayerNormParams,
        x: NodeId,
    ) -> NodeId {
        let n = g.normalize_cols(x, 1e-5);
        let gamma = g.param(store, p.gamma);
        let beta = g.param(store, p.beta);
        let scaled = g.mul_col(n, gamma);
        g.add_col(scaled, beta)
    }

    /// Multi-head attention; returns the output (D x Tq) and per-head
    /// attention matrices (Tk x Tq, columns sum to 1).
    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &AttnParams,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let (h, dk, dv) = (self.cfg.n_heads, self.cfg.d_k, self.cfg.d_v);
        let wq = g.param(store, p.wq);
        let wk = g.param(store, p.wk);
        let wv = g.param(store, p.wv);
        let q = g.matmul(wq, q_in);
        let k = g.matmul(wk, kv_in);
        let v = g.matmul(wv, kv_in);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut head_outs = Vec::with_capacity(h);
        let mut attn_mats = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice_rows(q, i * dk, (i + 1) * dk);
            let kh = g.slice_rows(k, i * dk, (i + 1) * dk);
            let vh = g.slice_rows(v, i * dv, (i + 1) * dv);
            let qt = g.transpose(qh);
            let scores = g.matmul(qt, kh); // (Tq, Tk)
            let scores = g.scale(scores, scale);
            let scores_t = g.transpose(scores); // (Tk, Tq)
            let a = g.softmax_cols(scores_t);
            attn_mats.push(a);
            head_outs.push(g.matmul(vh, a)); // (dv, Tq)
        }
        let mut ctx = head_outs[0];
        for &ho in &head_outs[1..] {
            ctx = g.concat_rows(ctx, ho);
        }
        let wo = g.param(store, p.wo);
        let bo = g.param(store, p.bo);
        let out = g.matmul(wo, ctx);
        (g.add_col(out, bo), attn_mats)
    }

    fn feed_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &FeedForwardParams,
        x: NodeId,
    ) -> NodeId {
        let w1 = g.param(store, p.w1);
        let b1 = g.param(store, p.b1);
        let w2 = g.param(store, p.w2);
        let b2 = g.param(store, p.b2);
        let hmm = g.matmul(w1, x);
        let hmm = g.add_col(hmm, b1);
        let hmm = g.relu(hmm);
        let out = g.matmul(w2, hmm);
        g.add_col(out, b2)
    }

    /// Sublayer wrapper: residual plus layer norm, pre- or post-norm per config.
    fn sublayer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ln: &LayerNormParams,
        x: NodeId,
        f: impl FnOnce(&mut Graph, NodeId) -> NodeId,
    ) -> NodeId {
        if self.cfg.pre_norm {
            let normed = self.layer_norm(g, store, ln, x);
            let y = f(g, normed);
            g.add(x, y)
        } else {
            let y = f(g, x);
            let sum = g.add(x, y);
            self.layer_norm(g, store, ln, sum)
        }
    }

    /// Frame-wise projection plus M encoder blocks; input is F x T̃.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Array2<f64>,
        mut drop: Option<DropoutCtx<'_>>,
    ) -> Result<NodeId> {
        if features.nrows() != self.cfg.n_bins {
            return Err(SccmError::Shape(format!(
                "spectrogram has {} bins but the input projection expects {}",
                features.nrows(),
                self.cfg.n_bins
            )));
        }
        let x = g.constant(features.clone());
        let w = g.param(store, self.in_proj_w);
        let b = g.param(store, self.in_proj_b);
        let proj = g.matmul(w, x);
        let mut e = g.add_col(proj, b);
        for block in &self.encoder {
            e = self.sublayer(g, store, &block.ln1, e, |g2, x2| {
                // Self-attention over frames.
                let (out, _) = self.attention(g2, store, &block.attn, x2, x2);
                dropout(g2, out, &mut drop)
            });
            e = self.sublayer(g, store, &block.ln2, e, |g2, x2| {
                let out = self.feed_forward(g2, store, &block.ff, x2);
                dropout(g2, out, &mut drop)
            });
        }
        Ok(e)
    }

    /// One decoder step with positional query `step_index` (1-based). The
    /// previous steps' hidden states are the self-attention memory; no
    /// output embedding is fed back offset by one position.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: NodeId,
        history: &[NodeId],
        step_index: usize,
        mut drop: Option<DropoutCtx<'_>>,
    ) -> Result<DecodeStepOut> {
        if step_index < 1 {
            return Err(SccmError::Validation("step index starts at 1".into()));
        }
        if step_index > self.cfg.max_steps {
            return Err(SccmError::Validation(format!(
                "decode step {} exceeds max_steps {}",
                step_index, self.cfg.max_steps
            )));
        }
        let pos_w = g.param(store, self.pos_w);
        let pos_b = g.param(store, self.pos_b);
        let scaled = g.scale(pos_w, step_index as f64);
        let mut x = g.add(scaled, pos_b); // j_i, (D,1)

        let mut cross_attention = Vec::new();
        for block in &self.decoder {
            // Self-attention over the accumulated history plus this step.
            let kv = history
                .iter()
                .fold(None::<NodeId>, |acc, &hid| {
                    Some(match acc {
                        Some(a) => g.concat_cols(a, hid),
                        None => hid,
                    })
                });
            let kv = match kv {
                Some(hist) => g.concat_cols(hist, x),
                None => x,
            };
            x = self.sublayer(g, store, &block.ln1, x, |g2, x2| {
                let (out, _) = self.attention(g2, store, &block.self_attn, x2, kv);
                dropout(g2, out, &mut drop)
            });
            let mut attn_here = Vec::new();
            x = self.sublayer(g, store, &block.ln2, x, |g2, x2| {
                let (out, attn) = self.attention(g2, store, &block.cross_attn, x2, encoded);
                attn_here = attn;
                dropout(g2, out, &mut drop)
            });
            cross_attention = attn_here;
            x = self.sublayer(g, store, &block.ln3, x, |g2, x2| {
                let out = self.feed_forward(g2, store, &block.ff, x2);
                dropout(g2, out, &mut drop)
            });
        }
        let cls_w = g.param(store, self.cls_w);
        let cls_b = g.param(store, self.cls_b);
        let logits = g.matmul(cls_w, x);
        let logits = g.add_col(logits, cls_b);
        Ok(DecodeStepOut {
            hidden: x,
            logits,
            cross_attention,
        })
    }

    /// Cross-attention weights for one step summed over heads (length T̃).
    pub fn attention_status(&self, g: &Graph, step: &DecodeStepOut) -> Vec<f64> {
        let t = g.value(step.cross_attention[0]).nrows();
        let mut status = vec![0.0; t];
        for &a in &step.cross_attention {
            let m = g.value(a);
            for i in 0..t {
                status[i] += m[[i, 0]];
            }
        }
        status
    }

    /// Greedy decoding: argmax with previously-emitted speakers masked out
    /// (EOS is never masked); stops at EOS or the decode cap.
    pub fn infer_speakers(
        &self,
        store: &ParamStore,
        spectrogram: &MagnitudeSpectrogram,
    ) -> Result<InferenceOutput> {
        let feats = spectrogram.as_feature_matrix();
        let mut g = Graph::new();
        let encoded = self.encode(&mut g, store, &feats, None)?;
        let mut history: Vec<NodeId> = Vec::new();
        let mut steps = Vec::new();
        let mut emitted: Vec<usize> = Vec::new();
        let eos = self.vocab.eos_index();
        for i in 1..=self.cfg.max_steps {
            let out = self.decode_step(&mut g, store, encoded, &history, i, None)?;
            let logits = g.value(out.logits);
            let dist = softmax_vec(logits);
            let pick = argmax_masked(logits, &emitted);
            if pick == eos {
                return Ok(InferenceOutput {
                    steps,
                    truncated: false,
                });
            }
            let status = self.attention_status(&g, &out);
            steps.push(InferenceStep {
                distribution: dist,
                embedding: g.value(out.hidden).clone(),
                attention_status: status,
                class_index: pick,
            });
            emitted.push(pick);
            history.push(out.hidden);
        }
        Ok(InferenceOutput {
            steps,
            truncated: true,
        })
    }
}

pub struct DecodeStepOut {
    pub hidden: NodeId,
    pub logits: NodeId,
    /// Per-head cross-attention matrices (T̃ x 1).
    pub cross_attention: Vec<NodeId>,
}

fn softmax_vec(logits: &Array2<f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax_masked(logits: &Array2<f64>, masked: &[usize]) -> usize {
    let mut best = None;
    for (i, &v) in logits.iter().enumerate() {
        if masked.contains(&i) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.expect("non-empty logits").0
}
