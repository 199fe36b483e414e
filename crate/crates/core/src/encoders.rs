//! Modality encoders and shared-space transforms.
//!
//! Sequences are stored batch-major as `(B*T) x D` matrices: row `b*T + t`
//! is timestep `t` of sample `b`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::synth::TripletSample;
use crate::tensor::Tensor;

/// Parameter prefix of the fMRI -> video context network.
pub const CTX_F2V: &str = "ctx_f2v";
/// Parameter prefix of the video -> fMRI context network.
pub const CTX_V2F: &str = "ctx_v2f";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_video: usize,
    pub d_fmri: usize,
    pub d_caption: usize,
    pub d_hidden: usize,
    pub t_video: usize,
    /// Temporal adaptation window T'; must equal the fMRI sequence length.
    pub t_fmri: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_video: 24,
            d_fmri: 24,
            d_caption: 16,
            d_hidden: 32,
            t_video: 12,
            t_fmri: 12,
            dilations: vec![1, 2, 4],
            kernel_size: 3,
            heads: 2,
            d_ff: 64,
        }
    }
}

impl EncoderConfig {
    pub fn scales(&self) -> usize {
        self.dilations.len()
    }

    pub fn max_len(&self) -> usize {
        self.t_video.max(self.t_fmri)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::config("need at least one scale with dilation >= 1"));
        }
        if self.kernel_size == 0 || self.t_fmri == 0 || self.t_video == 0 {
            return Err(Error::config("kernel size and sequence lengths must be >= 1"));
        }
        if self.heads == 0 || self.d_hidden % self.heads != 0 {
            return Err(Error::config("d_hidden must be divisible by the head count"));
        }
        Ok(())
    }

    /// Randomly initialized parameters for every encoder and both context networks.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = self.d_hidden;
        let dense = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect();
            store.insert(name, Tensor::matrix(fan_in, fan_out, data));
        };
        let zeros = |store: &mut ParamStore, name: &str, n: usize| store.insert(name, Tensor::zeros(&[n]));

        dense(&mut store, &mut rng, "video.w1", self.d_video, h);
        zeros(&mut store, "video.b1", h);
        dense(&mut store, &mut rng, "video.w2", h, h);
        zeros(&mut store, "video.b2", h);

        dense(&mut store, &mut rng, "text.w1", self.d_caption, h);
        zeros(&mut store, "text.b1", h);
        dense(&mut store, &mut rng, "text.w2", h, h);
        zeros(&mut store, "text.b2", h);

        for t in 0..self.t_fmri {
            let std_scale = (self.t_fmri as f64).sqrt();
            dense(&mut store, &mut rng, &adapt_weight(t), self.d_fmri, h);
            let w = store.get_mut(&adapt_weight(t)).unwrap();
            *w = w.map(|x| x * std_scale);
        }
        zeros(&mut store, "fmri.adapt.logits", self.t_fmri);
        for l in 0..self.scales() {
            for j in 0..self.kernel_size {
                dense(&mut store, &mut rng, &scale_weight(l, j), self.d_fmri, h);
            }
            zeros(&mut store, &scale_bias(l), h);
        }
        zeros(&mut store, "fmri.scale.logits", self.scales());

        for prefix in [CTX_F2V, CTX_V2F] {
            for m in ["wq", "wk", "wv", "wo"] {
                dense(&mut store, &mut rng, &format!("{prefix}.{m}"), h, h);
            }
            dense(&mut store, &mut rng, &format!("{prefix}.ff.w1"), h, self.d_ff);
            zeros(&mut store, &format!("{prefix}.ff.b1"), self.d_ff);
            dense(&mut store, &mut rng, &format!("{prefix}.ff.w2"), self.d_ff, h);
            zeros(&mut store, &format!("{prefix}.ff.b2"), h);
            let pos = (0..self.max_len() * h)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            store.insert(format!("{prefix}.pos"), Tensor::matrix(self.max_len(), h, pos));
            dense(&mut store, &mut rng, &format!("{prefix}.head.w1"), h, h);
            zeros(&mut store, &format!("{prefix}.head.b1"), h);
            dense(&mut store, &mut rng, &format!("{prefix}.head.w2"), h, h);
            zeros(&mut store, &format!("{prefix}.head.b2"), h);
        }
        Ok(store)
    }
}

pub fn adapt_weight(t: usize) -> String {
    format!("fmri.adapt.w{t:02}")
}

pub fn scale_weight(l: usize, j: usize) -> String {
    format!("fmri.scale{l}.w{j}")
}

pub fn scale_bias(l: usize) -> String {
    format!("fmri.scale{l}.b")
}

/// Row indices that pick timestep `t` of every sample.
fn timestep_rows(batch: usize, seq_len: usize, t: usize) -> Rc<[Option<usize>]> {
    (0..batch).map(|b| Some(b * seq_len + t)).collect()
}

/// Row indices shifting every sequence `shift` steps into the past, zero-padded.
fn shifted_rows(batch: usize, seq_len: usize, shift: usize) -> Rc<[Option<usize>]> {
    (0..batch * seq_len)
        .map(|r| {
            let t = r % seq_len;
            (t >= shift).then(|| r - shift)
        })
        .collect()
}

/// Two-layer tanh perceptron applied row-wise.
fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.tanh(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    Ok(g.tanh(h))
}

/// Per-timestep encoder: `(B*T_v) x D_v -> (B*T_v) x D_h`. No temporal mixing.
pub fn encode_video(g: &mut Graph, store: &ParamStore, video: Var) -> Result<Var> {
    mlp(g, store, "video", video)
}

/// Caption encoder: `B x D_c -> B x D_h` (a single `[D_c]` vector gives `1 x D_h`).
pub fn encode_text(g: &mut Graph, store: &ParamStore, caption: Var) -> Result<Var> {
    mlp(g, store, "text", caption)
}

/// Softmax-weighted sum of per-timestep projections, `sum_t alpha_t W_t h[t]`.
///
/// `fmri` is `(B*T') x D_f`; returns `B x D_h`.
pub fn fmri_temporal_adapt(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, fmri: Var) -> Result<Var> {
    let (rows, _) = g.value(fmri).dims2();
    if rows % cfg.t_fmri != 0 {
        return Err(Error::shape(
            "fmri_temporal_adapt",
            "fmri",
            g.shape(fmri),
            "window",
            &[cfg.t_fmri],
        ));
    }
    let batch = rows / cfg.t_fmri;
    let logits = g.param(store, "fmri.adapt.logits")?;
    let alpha = g.softmax_rows(logits);
    let mut acc: Option<Var> = None;
    for t in 0..cfg.t_fmri {
        let rows_t = g.gather_rows(fmri, timestep_rows(batch, cfg.t_fmri, t))?;
        let w = g.param(store, &adapt_weight(t))?;
        let proj = g.matmul(rows_t, w)?;
        let term = g.scale_by_elem(proj, alpha, t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("t_fmri >= 1"))
}

/// Dilated causal convolution over batch-major sequences.
///
/// `y[t] = bias + sum_j x[t - j*dilation] W_j`, zero left padding. `weights[j]`
/// is `D x D_out`; `x` is `(B*seq_len) x D`.
pub fn dilated_causal_conv(
    g: &mut Graph,
    x: Var,
    seq_len: usize,
    weights: &[Var],
    bias: Option<Var>,
    dilation: usize,
) -> Result<Var> {
    if weights.is_empty() || dilation == 0 {
        return Err(Error::config("dilated_causal_conv needs kernel_size >= 1 and dilation >= 1"));
    }
    let (rows, _) = g.value(x).dims2();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::shape("dilated_causal_conv", "x", g.shape(x), "seq_len", &[seq_len]));
    }
    let batch = rows / seq_len;
    let mut acc: Option<Var> = None;
    for (j, &w) in weights.iter().enumerate() {
        let shift = j * dilation;
        if shift >= seq_len {
            break;
        }
        let src = if shift == 0 { x } else { g.gather_rows(x, shifted_rows(batch, seq_len, shift))? };
        let term = g.matmul(src, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let y = acc.expect("first tap always in range");
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Outputs of the multi-scale fMRI adapters.
pub struct MultiScale {
    /// Per-scale conv outputs, `(B*T') x D_h`.
    pub sequences: Vec<Var>,
    /// Per-scale temporal means `h_l`, `B x D_h`.
    pub per_scale: Vec<Var>,
    /// `sum_l alpha_l h_l`, `B x D_h`.
    pub aggregate: Var,
    /// `sum_l alpha_l conv_l[t]`, `(B*T') x D_h`.
    pub sequence: Var,
    pub alpha: Var,
}

pub fn multiscale_aggregate(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, fmri: Var) -> Result<MultiScale> {
    let logits = g.param(store, "fmri.scale.logits")?;
    let alpha = g.softmax_rows(logits);
    let mut sequences = Vec::with_capacity(cfg.scales());
    let mut per_scale = Vec::with_capacity(cfg.scales());
    let mut aggregate: Option<Var> = None;
    let mut sequence: Option<Var> = None;
    for (l, &dilation) in cfg.dilations.iter().enumerate() {
        let weights = (0..cfg.kernel_size)
            .map(|j| g.param(store, &scale_weight(l, j)))
            .collect::<Result<Vec<_>>>()?;
        let bias = g.param(store, &scale_bias(l))?;
        let y = dilated_causal_conv(g, fmri, cfg.t_fmri, &weights, Some(bias), dilation)?;
        let h_l = g.segment_mean(y, cfg.t_fmri)?;
        let weighted = g.scale_by_elem(h_l, alpha, l)?;
        let weighted_seq = g.scale_by_elem(y, alpha, l)?;
        aggregate = Some(match aggregate {
            Some(a) => g.add(a, weighted)?,
            None => weighted,
        });
        sequence = Some(match sequence {
            Some(a) => g.add(a, weighted_seq)?,
            None => weighted_seq,
        });
        sequences.push(y);
        per_scale.push(h_l);
    }
    Ok(MultiScale {
        sequences,
        per_scale,
        aggregate: aggregate.expect("at least one scale"),
        sequence: sequence.expect("at least one scale"),
        alpha,
    })
}

/// Fixed (parameter-free) multi-scale summaries of an encoded sequence: for
/// each dilation, the temporal mean of a causal moving average with
/// `kernel_size` taps spaced `dilation` apart. Used for the video side of the
/// structural objective.
pub fn fixed_multiscale(g: &mut Graph, seq: Var, seq_len: usize, cfg: &EncoderConfig) -> Result<Vec<Var>> {
    let (rows, _) = g.value(seq).dims2();
    let batch = rows / seq_len;
    let mut out = Vec::with_capacity(cfg.scales());
    for &dilation in &cfg.dilations {
        let mut acc = seq;
        for j in 1..cfg.kernel_size {
            let shift = j * dilation;
            if shift >= seq_len {
                break;
            }
            let shifted = g.gather_rows(seq, shifted_rows(batch, seq_len, shift))?;
            acc = g.add(acc, shifted)?;
        }
        let avg = g.scale(acc, 1.0 / cfg.kernel_size as f64);
        out.push(g.segment_mean(avg, seq_len)?);
    }
    Ok(out)
}

/// Output of one causal attention block.
pub struct ContextOutput {
    /// `(B*T) x D_h` contextual states; row `b*T + t` depends on rows `b*T ..= b*T + t` only.
    pub states: Var,
    /// Per-head attention weights, `(B*T) x T`.
    pub attention: Vec<Var>,
}

/// Causal single-block transformer over batch-major sequences of length `seq_len`.
pub fn context_states(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    seq: Var,
    seq_len: usize,
) -> Result<ContextOutput> {
    let (rows, d) = g.value(seq).dims2();
    if seq_len == 0 || rows % seq_len != 0 || seq_len > cfg.max_len() || d != cfg.d_hidden {
        return Err(Error::shape("context_states", "sequence", g.shape(seq), "seq_len", &[seq_len]));
    }
    let pos = g.param(store, &format!("{prefix}.pos"))?;
    let pos_rows: Rc<[Option<usize>]> = (0..rows).map(|r| Some(r % seq_len)).collect();
    let pos_b = g.gather_rows(pos, pos_rows)?;
    let x = g.add(seq, pos_b)?;

    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;

    let mut mask = vec![0.0; rows * seq_len];
    for r in 0..rows {
        let t = r % seq_len;
        for j in t + 1..seq_len {
            mask[r * seq_len + j] = -1e30;
        }
    }
    let mask = g.input(Tensor::matrix(rows, seq_len, mask));

    let dh = d / cfg.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.block_matmul_t(qh, kh, seq_len)?;
        let scores = g.scale(scores, inv_sqrt);
        let scores = g.add(scores, mask)?;
        let attn = g.softmax_rows(scores);
        heads.push(g.block_matmul(attn, vh, seq_len)?);
        attention.push(attn);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let o = g.matmul(merged, wo)?;
    let x1 = g.add(x, o)?;

    let w1 = g.param(store, &format!("{prefix}.ff.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.ff.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.ff.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.ff.b2"))?;
    let f = g.matmul(x1, w1)?;
    let f = g.add_row(f, b1)?;
    let f = g.tanh(f);
    let f = g.matmul(f, w2)?;
    let f = g.add_row(f, b2)?;
    let states = g.add(x1, f)?;
    Ok(ContextOutput { states, attention })
}

/// Prediction head `g_v`: two-layer perceptron with a linear output.
pub fn prediction_head(g: &mut Graph, store: &ParamStore, prefix: &str, states: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.head.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.head.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.head.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.head.b2"))?;
    let h = g.matmul(states, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.tanh(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    Ok(h)
}

/// Predicted features at `t + k` from the context at `t` (0-based), `B x D_h`.
pub fn predict_from_states(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    states: Var,
    seq_len: usize,
    t: usize,
    k: usize,
) -> Result<Var> {
    if k == 0 || t + k >= seq_len {
        return Err(Error::Index(format!(
            "prediction target t+k = {} out of range for length {seq_len}",
            t + k
        )));
    }
    let batch = g.value(states).rows() / seq_len;
    let at_t = g.gather_rows(states, timestep_rows(batch, seq_len, t))?;
    prediction_head(g, store, prefix, at_t)
}

/// Runs the context network over `seq` and predicts features at `t + k`.
#[allow(clippy::too_many_arguments)]
pub fn context_predict(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    prefix: &str,
    seq: Var,
    seq_len: usize,
    t: usize,
    k: usize,
) -> Result<Var> {
    if k == 0 || t + k >= seq_len {
        return Err(Error::Index(format!(
            "prediction target t+k = {} out of range for length {seq_len}",
            t + k
        )));
    }
    let ctx = context_states(g, store, cfg, prefix, seq, seq_len)?;
    predict_from_states(g, store, prefix, ctx.states, seq_len, t, k)
}

/// Row-stacked model inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pair_ids: Vec<u64>,
    /// `(B*T_f) x D_f`
    pub fmri: Tensor,
    /// `(B*T_v) x D_v`
    pub video: Tensor,
    /// `B x D_c`
    pub caption: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&TripletSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let stack = |get: &dyn Fn(&TripletSample) -> &Tensor| -> Result<Tensor> {
            let first = get(samples[0]);
            let cols = first.cols();
            let mut data = Vec::new();
            for s in samples {
                let t = get(s);
                if t.cols() != cols || t.len() != first.len() {
                    return Err(Error::shape("batch", "sample 0", first.shape(), "sample", t.shape()));
                }
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::matrix(data.len() / cols, cols, data))
        };
        Ok(Self {
            pair_ids: samples.iter().map(|s| s.pair_id).collect(),
            fmri: stack(&|s| &s.fmri)?,
            video: stack(&|s| &s.video)?,
            caption: stack(&|s| &s.caption)?,
        })
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// Every encoder output the objectives need for one batch.
pub struct Encoded {
    pub batch: usize,
    /// `(B*T_f) x D_h` multi-scale fMRI sequence.
    pub fmri_seq: Var,
    /// `B x D_h` fMRI shared-space embedding: temporal adaptation plus multi-scale aggregate.
    pub fmri: Var,
    pub fmri_scales: Vec<Var>,
    pub video_seq: Var,
    pub video: Var,
    pub video_scales: Vec<Var>,
    pub text: Var,
}

pub fn encode_batch(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, batch: &Batch) -> Result<Encoded> {
    let fmri_in = g.input(batch.fmri.clone());
    let video_in = g.input(batch.video.clone());
    let text_in = g.input(batch.caption.clone());

    let adapted = fmri_temporal_adapt(g, store, cfg, fmri_in)?;
    let ms = multiscale_aggregate(g, store, cfg, fmri_in)?;
    let fmri = g.add(adapted, ms.aggregate)?;
    let fmri = g.normalize_rows(fmri);

    let video_seq = encode_video(g, store, video_in)?;
    let video = g.segment_mean(video_seq, cfg.t_video)?;
    let video_scales = fixed_multiscale(g, video_seq, cfg.t_video, cfg)?;
    let text = encode_text(g, store, text_in)?;
    let video = g.normalize_rows(video);
    let text = g.normalize_rows(text);

    Ok(Encoded {
        batch: batch.len(),
        fmri_seq: ms.sequence,
        fmri,
        fmri_scales: ms.per_scale,
        video_seq,
        video,
        video_scales,
        text,
    })
}
