//! Conditional speech extraction: a time-domain encoder/separator/decoder in
//! the Conv-TasNet style. The speaker embedding from the inference module is
//! broadcast over time and concatenated onto the separator output right
//! before the mask head, so one forward pass extracts one speaker.
//!
//! The same backbone doubles as an unconditioned fixed-output baseline
//! (`cond_dim = 0`, `n_outputs = 2`) and, with a second encoder branch, as a
//! cascade refinement stage.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::nn::param::{ones, xavier, zeros};
use crate::nn::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::signal::Waveform;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExtractorConfig {
    /// Encoder basis count N.
    pub n_filters: usize,
    /// Encoder kernel length L in samples; stride is L/2.
    pub kernel_len: usize,
    /// Bottleneck channels B.
    pub bottleneck: usize,
    /// Convolution block channels H.
    pub conv_channels: usize,
    /// Depthwise kernel length P.
    pub kernel_p: usize,
    /// Blocks per repeat X (dilations 1, 2, ..., 2^(X-1)).
    pub x_blocks: usize,
    /// Repeats R.
    pub r_repeats: usize,
    /// Conditioning embedding dimensionality; 0 disables conditioning.
    pub cond_dim: usize,
    /// Masks produced per forward pass (1 for the conditional extractor,
    /// 2 for the fixed-output baseline).
    pub n_outputs: usize,
}

impl ExtractorConfig {
    /// Desk-scale profile used by the toy experiments.
    pub fn desk() -> Self {
        ExtractorConfig {
            n_filters: 64,
            kernel_len: 16,
            bottleneck: 64,
            conv_channels: 128,
            kernel_p: 3,
            x_blocks: 4,
            r_repeats: 2,
            cond_dim: 64,
            n_outputs: 1,
        }
    }

    /// Full-scale profile (N=256, L=16, B=256, H=512, P=3, X=8, R=4).
    pub fn paper() -> Self {
        ExtractorConfig {
            n_filters: 256,
            kernel_len: 16,
            bottleneck: 256,
            conv_channels: 512,
            kernel_p: 3,
            x_blocks: 8,
            r_repeats: 4,
            cond_dim: 512,
            n_outputs: 1,
        }
    }

    /// Tiny profile for gradient checks.
    pub fn tiny(cond_dim: usize) -> Self {
        ExtractorConfig {
            n_filters: 8,
            kernel_len: 8,
            bottleneck: 8,
            conv_channels: 12,
            kernel_p: 3,
            x_blocks: 2,
            r_repeats: 1,
            cond_dim,
            n_outputs: 1,
        }
    }

    /// Unconditioned two-output variant sharing the receiver's scale.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.cond_dim = 0;
        c.n_outputs = 2;
        c
    }

    pub fn stride(&self) -> usize {
        self.kernel_len / 2
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.kernel_len % 2 != 0 {
            errors.push("extraction_net: kernel_len must be even".into());
        }
        if self.kernel_p % 2 != 1 {
            errors.push("extraction_net: kernel_p must be odd".into());
        }
        if self.n_outputs == 0 {
            errors.push("extraction_net: n_outputs must be >= 1".into());
        }
        if self.n_outputs > 1 && self.cond_dim != 0 {
            errors.push("extraction_net: multi-output head cannot be conditioned".into());
        }
    }
}

struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

struct ConvBlockParams {
    w_in: ParamId,
    b_in: ParamId,
    prelu_in: ParamId,
    norm_in: NormParams,
    w_dw: ParamId,
    b_dw: ParamId,
    prelu_dw: ParamId,
    norm_dw: NormParams,
    w_out: ParamId,
    b_out: ParamId,
}

pub struct ExtractionNet {
    pub cfg: ExtractorConfig,
    /// Encoder basis (N, L).
    enc_w: ParamId,
    /// Second encoder branch for cascade refinement, fed the stage-one
    /// estimate; absent in the plain extractor.
    enc2_w: Option<ParamId>,
    enc_norm: NormParams,
    bottleneck_w: ParamId,
    bottleneck_b: ParamId,
    blocks: Vec<ConvBlockParams>,
    head_prelu: ParamId,
    mask_w: ParamId,
    mask_b: ParamId,
    /// Decoder basis (L, N).
    dec_w: ParamId,
}

impl ExtractionNet {
    pub fn new(
        cfg: ExtractorConfig,
        group: ParamGroup,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::build(cfg, group, prefix, false, store, rng)
    }

    /// Cascade refinement stage: a second encoder branch consumes the
    /// stage-one estimate and its representation is summed with the
    /// mixture's before separation. No embedding conditioning.
    pub fn new_cascade(
        mut cfg: ExtractorConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        cfg.cond_dim = 0;
        cfg.n_outputs = 1;
        Self::build(cfg, ParamGroup::Cascade, prefix, true, store, rng)
    }

    fn build(
        cfg: ExtractorConfig,
        group: ParamGroup,
        prefix: &str,
        two_encoders: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (n, l, b, h, p) = (
            cfg.n_filters,
            cfg.kernel_len,
            cfg.bottleneck,
            cfg.conv_channels,
            cfg.kernel_p,
        );
        let norm = |store: &mut ParamStore, name: String, c: usize| NormParams {
            gamma: store.register(format!("{name}.gamma"), group, ones(c, 1)),
            beta: store.register(format!("{name}.beta"), group, zeros(c, 1)),
        };
        let enc_w = store.register(format!("{prefix}.enc.w"), group, xavier(n, l, rng));
        let enc2_w = two_encoders
            .then(|| store.register(format!("{prefix}.enc2.w"), group, xavier(n, l, rng)));
        let enc_norm = norm(store, format!("{prefix}.enc_norm"), n);
        let bottleneck_w = store.register(format!("{prefix}.bottleneck.w"), group, xavier(b, n, rng));
        let bottleneck_b = store.register(format!("{prefix}.bottleneck.b"), group, zeros(b, 1));
        let mut blocks = Vec::new();
        for r in 0..cfg.r_repeats {
            for x in 0..cfg.x_blocks {
                let base = format!("{prefix}.conv{r}_{x}");
                blocks.push(ConvBlockParams {
                    w_in: store.register(format!("{base}.in.w"), group, xavier(h, b, rng)),
                    b_in: store.register(format!("{base}.in.b"), group, zeros(h, 1)),
                    prelu_in: store.register(
                        format!("{base}.in.prelu"),
                        group,
                        Array2::from_elem((h, 1), 0.25),
                    ),
                    norm_in: norm(store, format!("{base}.in.norm"), h),
                    w_dw: store.register(format!("{base}.dw.w"), group, xavier(h, p, rng)),
                    b_dw: store.register(format!("{base}.dw.b"), group, zeros(h, 1)),
                    prelu_dw: store.register(
                        format!("{base}.dw.prelu"),
                        group,
                        Array2::from_elem((h, 1), 0.25),
                    ),
                    norm_dw: norm(store, format!("{base}.dw.norm"), h),
                    w_out: store.register(format!("{base}.out.w"), group, xavier(b, h, rng)),
                    b_out: store.register(format!("{base}.out.b"), group, zeros(b, 1)),
                });
            }
        }
        let head_prelu = store.register(
            format!("{prefix}.head.prelu"),
            group,
            Array2::from_elem((b, 1), 0.25),
        );
        let mask_w = store.register(
            format!("{prefix}.head.mask.w"),
            group,
            xavier(cfg.n_outputs * n, b + cfg.cond_dim, rng),
        );
        let mask_b = store.register(
            format!("{prefix}.head.mask.b"),
            group,
            zeros(cfg.n_outputs * n, 1),
        );
        let dec_w = store.register(format!("{prefix}.dec.w"), group, xavier(l, n, rng));
        ExtractionNet {
            cfg,
            enc_w,
            enc2_w,
            enc_norm,
            bottleneck_w,
            bottleneck_b,
            blocks,
            head_prelu,
            mask_w,
            mask_b,
            dec_w,
        }
    }

    /// Frame the signal into (L, K) columns at stride L/2, zero-padding the
    /// tail so every sample is covered.
    fn frame(&self, samples: &[f64]) -> Result<Array2<f64>> {
        let l = self.cfg.kernel_len;
        let stride = self.cfg.stride();
        if samples.len() < l {
            return Err(SccmError::Validation(format!(
                "segment of {} samples is shorter than the encoder kernel ({l})",
                samples.len()
            )));
        }
        let k = (samples.len() - l).div_ceil(stride) + 1;
        let mut frames = Array2::zeros((l, k));
        for j in 0..k {
            for i in 0..l {
                let t = j * stride + i;
                if t < samples.len() {
                    frames[[i, j]] = samples[t];
                }
            }
        }
        Ok(frames)
    }

    fn gln(&self, g: &mut Graph, store: &ParamStore, p: &NormParams, x: NodeId) -> NodeId {
        let n = g.normalize_global(x, 1e-8);
        let gamma = g.param(store, p.gamma);
        let beta = g.param(store, p.beta);
        let scaled = g.mul_col(n, gamma);
        g.add_col(scaled, beta)
    }

    fn prelu(&self, g: &mut Graph, store: &ParamStore, a: ParamId, x: NodeId) -> NodeId {
        let pos = g.relu(x);
        let neg = g.neg_part(x);
        let ap = g.param(store, a);
        let scaled = g.mul_col(neg, ap);
        g.add(pos, scaled)
    }

    fn encode_frames(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc_w: ParamId,
        frames: Array2<f64>,
    ) -> NodeId {
        let f = g.constant(frames);
        let w = g.param(store, enc_w);
        let mixed = g.matmul(w, f);
        g.relu(mixed)
    }

    /// Separator body: gLN, bottleneck, then R*X dilated residual blocks.
    fn separate(&self, g: &mut Graph, store: &ParamStore, repr: NodeId) -> NodeId {
        let normed = self.gln(g, store, &self.enc_norm, repr);
        let bw = g.param(store, self.bottleneck_w);
        let bb = g.param(store, self.bottleneck_b);
        let proj = g.matmul(bw, normed);
        let mut x = g.add_col(proj, bb);
        for (idx, block) in self.blocks.iter().enumerate() {
            let dilation = 1usize << (idx % self.cfg.x_blocks);
            let w_in = g.param(store, block.w_in);
            let b_in = g.param(store, block.b_in);
            let y = g.matmul(w_in, x);
            let y = g.add_col(y, b_in);
            let y = self.prelu(g, store, block.prelu_in, y);
            let y = self.gln(g, store, &block.norm_in, y);
            let pad = (self.cfg.kernel_p - 1) * dilation;
            let y = g.pad_cols(y, pad / 2, pad - pad / 2);
            let w_dw = g.param(store, block.w_dw);
            let y = g.depthwise_conv(y, w_dw, dilation);
            let b_dw = g.param(store, block.b_dw);
            let y = g.add_col(y, b_dw);
            let y = self.prelu(g, store, block.prelu_dw, y);
            let y = self.gln(g, store, &block.norm_dw, y);
            let w_out = g.param(store, block.w_out);
            let res = g.matmul(w_out, y);
            let b_out = g.param(store, block.b_out);
            let res = g.add_col(res, b_out);
            x = g.add(x, res);
        }
        x
    }

    /// Mask head: optional broadcast-concat of the conditioning embedding,
    /// then a 1x1 conv and sigmoid. Returns (n_outputs * N, K) masks.
    fn masks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sep: NodeId,
        embedding: Option<NodeId>,
    ) -> Result<NodeId> {
        let x = self.prelu(g, store, self.head_prelu, sep);
        let x = match (self.cfg.cond_dim, embedding) {
            (0, None) => x,
            (0, Some(_)) => {
                return Err(SccmError::Validation(
                    "this extractor is unconditioned but an embedding was supplied".into(),
                ))
            }
            (_, None) => {
                return Err(SccmError::Validation(
                    "this extractor requires a conditioning embedding".into(),
                ))
            }
            (d, Some(h)) => {
                let hd = g.value(h).dim();
                if hd != (d, 1) {
                    return Err(SccmError::Shape(format!(
                        "conditioning embedding is {hd:?} but ({d}, 1) is required"
                    )));
                }
                let k = g.value(x).ncols();
                let tiled = g.broadcast_col(h, k);
                g.concat_rows(x, tiled)
            }
        };
        let mw = g.param(store, self.mask_w);
        let mb = g.param(store, self.mask_b);
        let logits = g.matmul(mw, x);
        let logits = g.add_col(logits, mb);
        Ok(g.sigmoid(logits))
    }

    fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        repr: NodeId,
        mask: NodeId,
        input_len: usize,
    ) -> NodeId {
        let masked = g.mul(repr, mask);
        let dw = g.param(store, self.dec_w);
        let frames = g.matmul(dw, masked);
        let signal = g.overlap_add(frames, self.cfg.stride());
        g.slice_cols(signal, 0, input_len)
    }

    /// Full conditional pass: one (1, T) estimate with T equal to the input
    /// length. `embedding` is required iff the config has `cond_dim > 0`;
    /// the baseline instead returns `n_outputs` stacked estimates.
    pub fn extract(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mixture: &[f64],
        embedding: Option<NodeId>,
    ) -> Result<NodeId> {
        if self.enc2_w.is_some() {
            return Err(SccmError::Validation(
                "cascade stage needs a stage-one estimate; use refine".into(),
            ));
        }
        let frames = self.frame(mixture)?;
        let repr = self.encode_frames(g, store, self.enc_w, frames);
        let sep = self.separate(g, store, repr);
        let masks = self.masks(g, store, sep, embedding)?;
        let n = self.cfg.n_filters;
        let mut outs = Vec::with_capacity(self.cfg.n_outputs);
        for o in 0..self.cfg.n_outputs {
            let mask = g.slice_rows(masks, o * n, (o + 1) * n);
            outs.push(self.decode(g, store, repr, mask, mixture.len()));
        }
        let mut stacked = outs[0];
        for &o in &outs[1..] {
            stacked = g.concat_rows(stacked, o);
        }
        Ok(stacked)
    }

    /// Cascade pass: mixture and stage-one estimate go through parallel
    /// encoders whose representations are summed before separation.
    pub fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mixture: &[f64],
        estimate: &[f64],
    ) -> Result<NodeId> {
        let enc2 = self.enc2_w.ok_or_else(|| {
            SccmError::Validation("refine requires a cascade-built extractor".into())
        })?;
        if mixture.len() != estimate.len() {
            return Err(SccmError::Shape(format!(
                "mixture ({}) and estimate ({}) lengths differ",
                mixture.len(),
                estimate.len()
            )));
        }
        let ra = self.encode_frames(g, store, self.enc_w, self.frame(mixture)?);
        let rb = self.encode_frames(g, store, enc2, self.frame(estimate)?);
        let repr = g.add(ra, rb);
        let sep = self.separate(g, store, repr);
        let mask = self.masks(g, store, sep, None)?;
        Ok(self.decode(g, store, repr, mask, mixture.len()))
    }

    /// Evaluation convenience: one independent extraction per embedding.
    pub fn extract_all(
        &self,
        store: &ParamStore,
        mixture: &Waveform,
        embeddings: &[Array2<f64>],
    ) -> Result<Vec<Waveform>> {
        embeddings
            .iter()
            .map(|h| {
                let mut g = Graph::new();
                let hn = g.constant(h.clone());
                let out = self.extract(&mut g, store, &mixture.samples, Some(hn))?;
                let samples = g.value(out).row(0).to_vec();
                Waveform::new(samples, mixture.sample_rate)
            })
            .collect()
    }
}
