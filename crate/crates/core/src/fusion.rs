//! Audio-visual feature fusion.
//!
//! The pipeline: segment the audio feature sequence into overlapping
//! fixed-length windows, aggregate each window with a shared set of learnable
//! query vectors (a window-level Q-Former), mean-pool the per-window outputs
//! and add them back onto the queries, then cross-attend those
//! audio-enhanced queries to linearly projected visual features. Two ablation
//! paths are also provided: per-token linear mixing of the concatenated
//! encoder outputs, and a single Q-Former over the concatenation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttnMask, Linear, MultiHeadAttention, ParamId, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Overlapping-window segmentation plan for a `T`-frame sequence.
///
/// Window `u` (0-based) covers frames `u*stride .. u*stride + window`;
/// frames past the end of the source are zero-padded and masked invalid.
/// Every real frame falls in at least one window for any legal
/// `1 <= stride <= window`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    pub source_len: usize,
    segments: usize,
}

impl WindowConfig {
    pub fn new(window: usize, stride: usize, source_len: usize) -> Result<WindowConfig> {
        if window < 1 || stride < 1 {
            return Err(Error::Config(format!(
                "window {window} and stride {stride} must be >= 1"
            )));
        }
        if stride > window {
            return Err(Error::Config(format!(
                "stride {stride} exceeds window {window}; frames would be skipped"
            )));
        }
        if source_len < 1 {
            return Err(Error::Contract("cannot segment an empty sequence".into()));
        }
        let segments = source_len.saturating_sub(window).div_ceil(stride) + 1;
        Ok(WindowConfig { window, stride, source_len, segments })
    }

    pub fn segment_count(&self) -> usize {
        self.segments
    }

    /// First frame index of window `u` (0-based).
    pub fn start(&self, u: usize) -> usize {
        u * self.stride
    }

    /// Number of real (non-padded) frames in window `u`; always >= 1.
    pub fn valid_len(&self, u: usize) -> usize {
        self.window.min(self.source_len - self.start(u))
    }

    /// Source length rounded up to the padded extent of the last window.
    pub fn padded_len(&self) -> usize {
        self.start(self.segments - 1) + self.window
    }

    /// Validity flags for window `u`.
    pub fn mask(&self, u: usize) -> Vec<bool> {
        let valid = self.valid_len(u);
        (0..self.window).map(|i| i < valid).collect()
    }
}

/// Slice a `[T, d]` sequence into padded windows with validity masks.
pub fn segment_windows(
    sess: &mut Session,
    features: Var,
    cfg: &WindowConfig,
) -> Result<Vec<(Var, Vec<bool>)>> {
    let shape = sess.tape.shape(features);
    if shape.len() != 2 || shape[0] != cfg.source_len {
        return Err(Error::Shape(format!(
            "segment_windows: features {:?} vs configured length {}",
            shape, cfg.source_len
        )));
    }
    let dim = shape[1];
    let mut out = Vec::with_capacity(cfg.segment_count());
    for u in 0..cfg.segment_count() {
        let valid = cfg.valid_len(u);
        let real = sess.tape.slice_rows(features, cfg.start(u), valid)?;
        let win = if valid < cfg.window {
            let pad = sess.constant(Tensor::zeros(vec![cfg.window - valid, dim]));
            sess.tape.concat_rows(&[real, pad])?
        } else {
            real
        };
        out.push((win, cfg.mask(u)));
    }
    Ok(out)
}

/// How per-window Q-Former outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Mean over windows, added to the learnable queries (output `[M, d]`).
    #[default]
    Mean,
    /// Concatenate per-window residual outputs (output `[N*M, d]`).
    Concat,
}

/// Which fusion path feeds the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariantKind {
    /// Concatenate both token sequences, mix with a per-token linear layer.
    LinearConcat,
    /// One Q-Former over the concatenated sequence.
    PlainQformer,
    /// Sliding-window Q-Former plus cross-attention (the full path).
    #[default]
    SwqfCrossAttn,
}

impl FusionVariantKind {
    pub fn label(&self) -> &'static str {
        match self {
            FusionVariantKind::LinearConcat => "linear-concat",
            FusionVariantKind::PlainQformer => "plain-qformer",
            FusionVariantKind::SwqfCrossAttn => "swqf-crossattn",
        }
    }
}

/// Fusion hyperparameters, as written in experiment config files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FusionConfig {
    /// Window length `w` in frames.
    pub window: usize,
    /// Stride between window starts.
    pub stride: usize,
    /// Number of learnable query vectors `M`.
    pub queries: usize,
    /// Attention heads in the window Q-Former and the cross-attention.
    pub heads: usize,
    pub pool_mode: PoolMode,
    pub variant: FusionVariantKind,
}

impl Default for FusionConfig {
    fn default() -> FusionConfig {
        FusionConfig {
            window: 64,
            stride: 32,
            queries: 16,
            heads: 4,
            pool_mode: PoolMode::Mean,
            variant: FusionVariantKind::SwqfCrossAttn,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::Config("query count must be >= 1".into()));
        }
        // Window/stride legality is checked against each sequence; the
        // static part is stride <= window.
        if self.window < 1 || self.stride < 1 || self.stride > self.window {
            return Err(Error::Config(format!(
                "illegal window/stride {}/{}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Attention summary for one window: mean weight each key slot received,
/// averaged over heads and queries.
#[derive(Clone, Debug)]
pub struct WindowAttnSummary {
    pub start: usize,
    pub valid_len: usize,
    pub mean_key_weight: Vec<f64>,
}

/// Diagnostics emitted alongside fused tokens.
#[derive(Clone, Debug, Default)]
pub struct FusionDiagnostics {
    pub window_attn: Vec<WindowAttnSummary>,
    /// Mean cross-attention weight per visual key, when the path ran.
    pub cross_key_weight: Option<Vec<f64>>,
}

/// Fused token sequence plus attention diagnostics.
pub struct FusionOutput {
    pub tokens: Var,
    pub diagnostics: FusionDiagnostics,
}

fn mean_key_weights(sess: &Session, weights: &[Var]) -> Vec<f64> {
    let shape = sess.tape.shape(weights[0]);
    let (lq, lk) = (shape[0], shape[1]);
    let mut acc = vec![0.0; lk];
    for &w in weights {
        let data = sess.tape.value(w).data();
        for q in 0..lq {
            for k in 0..lk {
                acc[k] += data[q * lk + k];
            }
        }
    }
    let denom = (weights.len() * lq) as f64;
    acc.iter_mut().for_each(|v| *v /= denom);
    acc
}

/// Sliding-window Q-Former: learnable queries attend within each window;
/// outputs are pooled and added back onto the queries.
#[derive(Clone, Debug)]
pub struct WindowQFormer {
    pub queries: ParamId,
    pub attn: MultiHeadAttention,
    pub query_count: usize,
    pub dim: usize,
}

impl WindowQFormer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        query_count: usize,
        heads: usize,
    ) -> Result<WindowQFormer> {
        if query_count == 0 {
            return Err(Error::Config("query count must be >= 1".into()));
        }
        let queries = store.add(
            format!("{name}.queries"),
            crate::nn::init_gaussian(rng, vec![query_count, dim], 0.02),
        );
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?;
        Ok(WindowQFormer { queries, attn, query_count, dim })
    }

    /// Run over pre-segmented windows. Exposed separately so tests can
    /// permute the window list.
    pub fn forward_windows(
        &self,
        sess: &mut Session,
        windows: &[(Var, Vec<bool>)],
        pool: PoolMode,
    ) -> Result<(Var, Vec<WindowAttnSummary>)> {
        if windows.is_empty() {
            return Err(Error::Contract("window Q-Former over zero windows".into()));
        }
        let q = sess.param(self.queries);
        let mut summaries = Vec::with_capacity(windows.len());
        let mut outputs = Vec::with_capacity(windows.len());
        for (win, valid) in windows {
            if valid.iter().all(|v| !v) {
                return Err(Error::Contract("window with all frames masked".into()));
            }
            let mask = AttnMask::from_key_validity(self.query_count, valid);
            let (z, weights) = self.attn.forward_with_weights(sess, q, *win, Some(&mask))?;
            summaries.push(WindowAttnSummary {
                start: 0,
                valid_len: valid.iter().filter(|v| **v).count(),
                mean_key_weight: mean_key_weights(sess, &weights),
            });
            outputs.push(z);
        }
        let tokens = match pool {
            PoolMode::Mean => {
                let mut acc = outputs[0];
                for &z in &outputs[1..] {
                    acc = sess.tape.add(acc, z)?;
                }
                let mean = sess.tape.scale(acc, 1.0 / outputs.len() as f64)?;
                sess.tape.add(q, mean)?
            }
            PoolMode::Concat => {
                let mut parts = Vec::with_capacity(outputs.len());
                for &z in &outputs {
                    parts.push(sess.tape.add(q, z)?);
                }
                sess.tape.concat_rows(&parts)?
            }
        };
        Ok((tokens, summaries))
    }

    /// Segment, attend per window, pool: `[T, d] -> [M, d]` (mean pooling)
    /// or `[N*M, d]` (concat pooling).
    pub fn forward(
        &self,
        sess: &mut Session,
        features: Var,
        wcfg: &WindowConfig,
        pool: PoolMode,
    ) -> Result<(Var, Vec<WindowAttnSummary>)> {
        let windows = segment_windows(sess, features, wcfg)?;
        let (tokens, mut summaries) = self.forward_windows(sess, &windows, pool)?;
        for (u, s) in summaries.iter_mut().enumerate() {
            s.start = wcfg.start(u);
        }
        Ok((tokens, summaries))
    }
}

/// Cross-modal attention: queries from the audio path, keys/values from the
/// projected visual sequence, with a residual connection around the block.
#[derive(Clone, Debug)]
pub struct CrossAttnFuse {
    pub attn: MultiHeadAttention,
}

impl CrossAttnFuse {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<CrossAttnFuse> {
        Ok(CrossAttnFuse { attn: MultiHeadAttention::new(store, rng, name, dim, heads)? })
    }

    pub fn forward(
        &self,
        sess: &mut Session,
        queries: Var,
        visual: Var,
        visual_valid: Option<&[bool]>,
    ) -> Result<FusionOutput> {
        let lv = sess.tape.shape(visual)[0];
        if lv == 0 {
            return Err(Error::Contract("cross-attention over an empty visual sequence".into()));
        }
        let lq = sess.tape.shape(queries)[0];
        let mask = visual_valid.map(|valid| AttnMask::from_key_validity(lq, valid));
        let (attended, weights) =
            self.attn.forward_with_weights(sess, queries, visual, mask.as_ref())?;
        let tokens = sess.tape.add(queries, attended)?;
        Ok(FusionOutput {
            tokens,
            diagnostics: FusionDiagnostics {
                window_attn: Vec::new(),
                cross_key_weight: Some(mean_key_weights(sess, &weights)),
            },
        })
    }
}

/// A fully wired fusion path (one of the three comparative designs).
#[derive(Clone, Debug)]
pub enum FusionPath {
    LinearConcat {
        visual_proj: Linear,
        mix: Linear,
    },
    PlainQformer {
        visual_proj: Linear,
        queries: ParamId,
        query_count: usize,
        attn: MultiHeadAttention,
    },
    SwqfCrossAttn {
        visual_proj: Linear,
        swqf: WindowQFormer,
        cross: CrossAttnFuse,
        pool: PoolMode,
        window: usize,
        stride: usize,
    },
}

impl FusionPath {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &FusionConfig,
        dim: usize,
        visual_dim: usize,
    ) -> Result<FusionPath> {
        cfg.validate()?;
        let visual_proj = Linear::new(store, rng, "fusion.visual_proj", visual_dim, dim);
        Ok(match cfg.variant {
            FusionVariantKind::LinearConcat => FusionPath::LinearConcat {
                visual_proj,
                mix: Linear::new(store, rng, "fusion.mix", dim, dim),
            },
            FusionVariantKind::PlainQformer => FusionPath::PlainQformer {
                visual_proj,
                queries: store.add(
                    "fusion.queries",
                    crate::nn::init_gaussian(rng, vec![cfg.queries, dim], 0.02),
                ),
                query_count: cfg.queries,
                attn: MultiHeadAttention::new(store, rng, "fusion.attn", dim, cfg.heads)?,
            },
            FusionVariantKind::SwqfCrossAttn => FusionPath::SwqfCrossAttn {
                visual_proj,
                swqf: WindowQFormer::new(store, rng, "fusion.swqf", dim, cfg.queries, cfg.heads)?,
                cross: CrossAttnFuse::new(store, rng, "fusion.cross", dim, cfg.heads)?,
                pool: cfg.pool_mode,
                window: cfg.window,
                stride: cfg.stride,
            },
        })
    }

    /// Fuse audio features `[T, d]` with visual features `[Lv, d_v]` into the
    /// decoder-input sequence.
    pub fn fuse(
        &self,
        sess: &mut Session,
        audio: Var,
        visual: Var,
        visual_valid: Option<&[bool]>,
    ) -> Result<FusionOutput> {
        match self {
            FusionPath::LinearConcat { visual_proj, mix } => {
                let hv = visual_proj.forward(sess, visual)?;
                let cat = sess.tape.concat_rows(&[audio, hv])?;
                let tokens = mix.forward(sess, cat)?;
                Ok(FusionOutput { tokens, diagnostics: FusionDiagnostics::default() })
            }
            FusionPath::PlainQformer { visual_proj, queries, query_count, attn } => {
                let hv = visual_proj.forward(sess, visual)?;
                let cat = sess.tape.concat_rows(&[audio, hv])?;
                let q = sess.param(*queries);
                let cross = CrossAttnFuse { attn: attn.clone() };
                let _ = query_count;
                cross.forward(sess, q, cat, None)
            }
            FusionPath::SwqfCrossAttn { visual_proj, swqf, cross, pool, window, stride } => {
                let t = sess.tape.shape(audio)[0];
                let wcfg = WindowConfig::new(*window, *stride, t)?;
                let (q_out, window_attn) = swqf.forward(sess, audio, &wcfg, *pool)?;
                let hv = visual_proj.forward(sess, visual)?;
                let mut out = cross.forward(sess, q_out, hv, visual_valid)?;
                out.diagnostics.window_attn = window_attn;
                Ok(out)
            }
        }
    }

    /// Decoder-input length for the given audio/visual lengths.
    pub fn output_len(&self, audio_len: usize, visual_len: usize) -> Result<usize> {
        Ok(match self {
            FusionPath::LinearConcat { .. } => audio_len + visual_len,
            FusionPath::PlainQformer { query_count, .. } => *query_count,
            FusionPath::SwqfCrossAttn { swqf, pool, window, stride, .. } => match pool {
                PoolMode::Mean => swqf.query_count,
                PoolMode::Concat => {
                    let wcfg = WindowConfig::new(*window, *stride, audio_len)?;
                    wcfg.segment_count() * swqf.query_count
                }
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn rand_t(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Index-enumeration oracle: expected (start, valid_len) pairs.
    fn enumerate_windows(t: usize, w: usize, stride: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            out.push((start, w.min(t - start)));
            if start + w >= t {
                break;
            }
            start += stride;
        }
        out
    }

    #[test]
    fn window_plan_matches_enumeration_oracle() {
        // T=10, w=4, stride=2: starts {0,2,4,6} (1-based {1,3,5,7}), no padding.
        let cfg = WindowConfig::new(4, 2, 10).unwrap();
        assert_eq!(cfg.segment_count(), 4);
        let expect = enumerate_windows(10, 4, 2);
        assert_eq!(expect.len(), 4);
        for (u, &(s, v)) in expect.iter().enumerate() {
            assert_eq!(cfg.start(u), s);
            assert_eq!(cfg.valid_len(u), v);
            assert_eq!(v, 4);
        }

        // T=9, w=4, stride=3: starts {0,3,6} and the last window pads 1 frame.
        let cfg = WindowConfig::new(4, 3, 9).unwrap();
        assert_eq!(cfg.segment_count(), 3);
        assert_eq!(cfg.start(2), 6);
        assert_eq!(cfg.valid_len(2), 3);
        assert_eq!(cfg.mask(2), vec![true, true, true, false]);
    }

    #[test]
    fn single_window_when_t_equals_w() {
        let cfg = WindowConfig::new(5, 2, 5).unwrap();
        assert_eq!(cfg.segment_count(), 1);
        assert_eq!(cfg.valid_len(0), 5);
    }

    #[test]
    fn illegal_window_configs_error() {
        assert!(WindowConfig::new(0, 1, 4).is_err());
        assert!(WindowConfig::new(4, 0, 4).is_err());
        assert!(WindowConfig::new(2, 3, 4).is_err());
    }

    #[test]
    fn coverage_holds_for_all_legal_configs_up_to_32() {
        for t in 1..=32usize {
            for w in 1..=32usize {
                for s in 1..=w {
                    let cfg = WindowConfig::new(w, s, t).unwrap();
                    let mut covered = vec![false; t];
                    for u in 0..cfg.segment_count() {
                        for i in 0..cfg.valid_len(u) {
                            covered[cfg.start(u) + i] = true;
                        }
                    }
                    assert!(covered.iter().all(|&c| c), "gap for t={t} w={w} s={s}");
                }
            }
        }
    }

    #[test]
    fn segment_windows_slices_and_pads() {
        let mut rng = rng_for(51, "segment");
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let feat = rand_t(vec![9, 3], &mut rng);
        let v = sess.constant(feat.clone());
        let cfg = WindowConfig::new(4, 3, 9).unwrap();
        let windows = segment_windows(&mut sess, v, &cfg).unwrap();
        assert_eq!(windows.len(), 3);
        // Window 2 holds frames 6..9 then one zero row.
        let w2 = sess.tape.value(windows[2].0).data();
        assert_eq!(&w2[..9], &feat.data()[18..27]);
        assert_eq!(&w2[9..12], &[0.0, 0.0, 0.0]);
    }

    fn build_swqf(
        rng: &mut impl Rng,
        dim: usize,
        m: usize,
        heads: usize,
    ) -> (ParamStore, WindowQFormer) {
        let mut store = ParamStore::new();
        let swqf = WindowQFormer::new(&mut store, rng, "swqf", dim, m, heads).unwrap();
        (store, swqf)
    }

    /// Brute-force oracle: per-window attention + explicit mean, sharing only
    /// the raw parameter values with the implementation.
    fn swqf_oracle(
        store: &ParamStore,
        swqf: &WindowQFormer,
        feat: &Tensor,
        cfg: &WindowConfig,
    ) -> Vec<f64> {
        let q = store.get(swqf.queries).value.clone();
        let (m, d) = (swqf.query_count, swqf.dim);
        let mut mean = vec![0.0; m * d];
        for u in 0..cfg.segment_count() {
            // Build the padded window.
            let mut win = vec![0.0; cfg.window * d];
            for i in 0..cfg.valid_len(u) {
                win[i * d..(i + 1) * d]
                    .copy_from_slice(&feat.data()[(cfg.start(u) + i) * d..(cfg.start(u) + i + 1) * d]);
            }
            let win_t = Tensor::new(vec![cfg.window, d], win).unwrap();
            let mut sess = Session::new(store);
            let qv = sess.constant(q.clone());
            let wv = sess.constant(win_t);
            let mask = AttnMask::from_key_validity(m, &cfg.mask(u));
            let z = swqf.attn.forward(&mut sess, qv, wv, Some(&mask)).unwrap();
            for (acc, v) in mean.iter_mut().zip(sess.tape.value(z).data()) {
                *acc += v / cfg.segment_count() as f64;
            }
        }
        q.data().iter().zip(&mean).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn swqf_matches_per_window_oracle() {
        let mut rng = rng_for(52, "swqf-oracle");
        let (store, swqf) = build_swqf(&mut rng, 8, 2, 2);
        let feat = rand_t(vec![10, 8], &mut rng);
        let cfg = WindowConfig::new(4, 2, 10).unwrap();
        let mut sess = Session::new(&store);
        let v = sess.constant(feat.clone());
        let (out, summaries) = swqf.forward(&mut sess, v, &cfg, PoolMode::Mean).unwrap();
        let expect = swqf_oracle(&store, &swqf, &feat, &cfg);
        for (a, b) in sess.tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(summaries.len(), 4);
    }

    #[test]
    fn swqf_identical_windows_equal_single_window_result() {
        let mut rng = rng_for(53, "swqf-sym");
        let (store, swqf) = build_swqf(&mut rng, 8, 2, 2);
        // stride == window and a repeated block make all windows identical.
        let block = rand_t(vec![4, 8], &mut rng);
        let mut rep = block.data().to_vec();
        rep.extend_from_slice(block.data());
        rep.extend_from_slice(block.data());
        let feat3 = Tensor::new(vec![12, 8], rep).unwrap();

        let mut sess = Session::new(&store);
        let v3 = sess.constant(feat3);
        let cfg3 = WindowConfig::new(4, 4, 12).unwrap();
        assert_eq!(cfg3.segment_count(), 3);
        let (out3, _) = swqf.forward(&mut sess, v3, &cfg3, PoolMode::Mean).unwrap();

        let v1 = sess.constant(block);
        let cfg1 = WindowConfig::new(4, 4, 4).unwrap();
        let (out1, _) = swqf.forward(&mut sess, v1, &cfg1, PoolMode::Mean).unwrap();

        let diff = sess.tape.value(out3).max_abs_diff(sess.tape.value(out1)).unwrap();
        assert!(diff < 1e-12, "mean of identical windows changed the result: {diff}");
    }

    #[test]
    fn swqf_window_order_invariance() {
        let mut rng = rng_for(54, "swqf-perm");
        let (store, swqf) = build_swqf(&mut rng, 8, 3, 2);
        let feat = rand_t(vec![11, 8], &mut rng);
        let cfg = WindowConfig::new(4, 2, 11).unwrap();
        let mut sess = Session::new(&store);
        let v = sess.constant(feat);
        let mut windows = segment_windows(&mut sess, v, &cfg).unwrap();
        let (base, _) = swqf.forward_windows(&mut sess, &windows, PoolMode::Mean).unwrap();
        let mut shuffle_rng = rng_for(54, "shuffle");
        windows.shuffle(&mut shuffle_rng);
        let (permuted, _) = swqf.forward_windows(&mut sess, &windows, PoolMode::Mean).unwrap();
        let diff = sess.tape.value(base).max_abs_diff(sess.tape.value(permuted)).unwrap();
        assert!(diff < 1e-12, "pooled queries depend on window order: {diff}");
    }

    #[test]
    fn swqf_padded_frames_have_zero_attention_mass() {
        let mut rng = rng_for(55, "swqf-pad");
        let (store, swqf) = build_swqf(&mut rng, 8, 2, 2);
        let feat = rand_t(vec![9, 8], &mut rng);
        let cfg = WindowConfig::new(4, 3, 9).unwrap();
        let mut sess = Session::new(&store);
        let v = sess.constant(feat);
        let (_, summaries) = swqf.forward(&mut sess, v, &cfg, PoolMode::Mean).unwrap();
        let last = summaries.last().unwrap();
        assert_eq!(last.valid_len, 3);
        assert_eq!(last.mean_key_weight[3], 0.0, "padding must get exactly zero weight");
        assert!(last.mean_key_weight[..3].iter().all(|&w| w > 0.0));
    }

    #[test]
    fn swqf_residual_passes_queries_through_zeroed_attention() {
        let mut rng = rng_for(56, "swqf-res");
        let (mut store, swqf) = build_swqf(&mut rng, 8, 2, 2);
        // Zero the output projection: attention contributes exactly nothing,
        // so the module output must equal the learnable queries.
        store.set_value(swqf.attn.wo.base.weight, Tensor::zeros(vec![8, 8])).unwrap();
        store.set_value(swqf.attn.wo.base.bias, Tensor::zeros(vec![8])).unwrap();
        let feat = rand_t(vec![10, 8], &mut rng);
        let cfg = WindowConfig::new(4, 2, 10).unwrap();
        let mut sess = Session::new(&store);
        let v = sess.constant(feat);
        let (out, _) = swqf.forward(&mut sess, v, &cfg, PoolMode::Mean).unwrap();
        let q = store.get(swqf.queries).value.clone();
        assert_eq!(sess.tape.value(out).data(), q.data());
    }

    #[test]
    fn cross_attention_single_visual_token_and_shapes() {
        let mut rng = rng_for(57, "cross");
        let mut store = ParamStore::new();
        let cross = CrossAttnFuse::new(&mut store, &mut rng, "cross", 8, 2).unwrap();
        let q = rand_t(vec![3, 8], &mut rng);

        // Lv = 1: fused = queries + W_O(single value projection), same add for
        // every query row.
        let mut sess = Session::new(&store);
        let qv = sess.constant(q.clone());
        let vis = sess.constant(rand_t(vec![1, 8], &mut rng));
        let out = cross.forward(&mut sess, qv, vis, None).unwrap();
        let tokens = sess.tape.value(out.tokens).data().to_vec();
        let delta: Vec<f64> =
            (0..8).map(|c| tokens[c] - q.data()[c]).collect();
        for r in 1..3 {
            for c in 0..8 {
                let d = tokens[r * 8 + c] - q.data()[r * 8 + c];
                assert!((d - delta[c]).abs() < 1e-12);
            }
        }

        // Output shape is [M, d] for any visual length.
        for lv in [1usize, 5, 100] {
            let mut sess = Session::new(&store);
            let qv = sess.constant(q.clone());
            let vis = sess.constant(rand_t(vec![lv, 8], &mut rng));
            let out = cross.forward(&mut sess, qv, vis, None).unwrap();
            assert_eq!(sess.tape.shape(out.tokens), &[3, 8]);
        }
    }

    #[test]
    fn fusion_variants_have_contracted_output_lengths() {
        let mut rng = rng_for(58, "variants");
        let dim = 8;
        let dv = 6;
        for (variant, expect_len) in [
            (FusionVariantKind::LinearConcat, 10 + 4),
            (FusionVariantKind::PlainQformer, 3),
            (FusionVariantKind::SwqfCrossAttn, 3),
        ] {
            let cfg = FusionConfig {
                window: 4,
                stride: 2,
                queries: 3,
                heads: 2,
                pool_mode: PoolMode::Mean,
                variant,
            };
            let mut store = ParamStore::new();
            let path = FusionPath::build(&mut store, &mut rng, &cfg, dim, dv).unwrap();
            let mut sess = Session::new(&store);
            let audio = sess.constant(rand_t(vec![10, dim], &mut rng));
            let visual = sess.constant(rand_t(vec![4, dv], &mut rng));
            let out = path.fuse(&mut sess, audio, visual, None).unwrap();
            assert_eq!(sess.tape.shape(out.tokens)[0], expect_len, "{variant:?}");
            assert_eq!(sess.tape.shape(out.tokens)[1], dim);
            assert_eq!(path.output_len(10, 4).unwrap(), expect_len);
        }
    }

    #[test]
    fn linear_concat_with_identity_mix_is_raw_concatenation() {
        let mut rng = rng_for(59, "lincat");
        let dim = 4;
        let cfg = FusionConfig {
            window: 2,
            stride: 1,
            queries: 2,
            heads: 1,
            pool_mode: PoolMode::Mean,
            variant: FusionVariantKind::LinearConcat,
        };
        let mut store = ParamStore::new();
        let path = FusionPath::build(&mut store, &mut rng, &cfg, dim, dim).unwrap();
        let FusionPath::LinearConcat { visual_proj, mix } = &path else { unreachable!() };
        let eye = Tensor::new(
            vec![dim, dim],
            (0..dim * dim).map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        store.set_value(visual_proj.weight, eye.clone()).unwrap();
        store.set_value(mix.weight, eye).unwrap();

        let audio_t = rand_t(vec![3, dim], &mut rng);
        let visual_t = rand_t(vec![2, dim], &mut rng);
        let mut sess = Session::new(&store);
        let audio = sess.constant(audio_t.clone());
        let visual = sess.constant(visual_t.clone());
        let out = path.fuse(&mut sess, audio, visual, None).unwrap();
        let got = sess.tape.value(out.tokens).data();
        let mut expect = audio_t.data().to_vec();
        expect.extend_from_slice(visual_t.data());
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swqf_concat_pool_emits_n_times_m_tokens() {
        let mut rng = rng_for(60, "concat-pool");
        let (store, swqf) = build_swqf(&mut rng, 8, 2, 2);
        let feat = rand_t(vec![10, 8], &mut rng);
        let cfg = WindowConfig::new(4, 2, 10).unwrap();
        let mut sess = Session::new(&store);
        let v = sess.constant(feat);
        let (out, _) = swqf.forward(&mut sess, v, &cfg, PoolMode::Concat).unwrap();
        assert_eq!(sess.tape.shape(out), &[4 * 2, 8]);
    }

    #[test]
    fn whole_fusion_module_passes_grad_check() {
        use crate::gradcheck::{grad_check, CheckOutput, DEFAULT_EPS};
        let mut rng = rng_for(61, "fusion-gc");
        let cfg = FusionConfig {
            window: 3,
            stride: 2,
            queries: 2,
            heads: 2,
            pool_mode: PoolMode::Mean,
            variant: FusionVariantKind::SwqfCrossAttn,
        };
        let mut proto = ParamStore::new();
        let _ = FusionPath::build(&mut proto, &mut rng, &cfg, 4, 3).unwrap();
        let mut inputs: Vec<Tensor> = proto.iter().map(|(_, p)| p.value.clone()).collect();
        let n_params = inputs.len();
        let mut data_rng = rng_for(61, "fusion-gc-data");
        inputs.push(rand_t(vec![5, 4], &mut data_rng)); // audio, padded last window
        inputs.push(rand_t(vec![3, 3], &mut data_rng)); // visual

        let mut f = |xs: &[Tensor]| {
            let mut store = ParamStore::new();
            let mut rng2 = rng_for(61, "fusion-gc");
            let path = FusionPath::build(&mut store, &mut rng2, &cfg, 4, 3)?;
            let ids: Vec<ParamId> = store.ids().collect();
            for (id, val) in ids.iter().zip(&xs[..n_params]) {
                store.set_value(*id, val.clone())?;
            }
            let mut sess = Session::new(&store);
            let audio = sess.tape.variable(xs[n_params].clone());
            let visual = sess.tape.variable(xs[n_params + 1].clone());
            let out = path.fuse(&mut sess, audio, visual, None)?;
            let t = sess.tape.tanh(out.tokens)?;
            let loss = sess.tape.mean_all(t)?;
            sess.backward(loss)?;
            let lossv = sess.tape.value(loss).data()[0];
            let mut grads: Vec<Vec<f64>> = ids
                .iter()
                .zip(xs)
                .map(|(&id, x)| {
                    sess.param_grad(id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()])
                })
                .collect();
            grads.push(sess.tape.grad(audio).unwrap().to_vec());
            grads.push(sess.tape.grad(visual).unwrap().to_vec());
            Ok(CheckOutput { loss: lossv, grads })
        };
        let err = grad_check(&mut f, &inputs, DEFAULT_EPS).unwrap();
        assert!(err < 1e-4, "fusion module grad check: {err}");
    }
}
