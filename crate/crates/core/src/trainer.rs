//! Training loop: weighted objective, Adam under a cosine schedule, one
//! codebook EMA update per step, and resumable checkpoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::codebook::{
    beta_dyn, codebook_stats, commitment_loss, mean_feature_variance, sufficient_stats, Assignment, Codebook,
    CodebookConfig, StatsInputs, UpdateMode,
};
use crate::config::RunConfig;
use crate::container::{decode_named, encode_named};
use crate::encoders::{encode_batch, Batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::hrf::HrfKernel;
use crate::matching::{match_loss, structural_loss, temporal_loss};
use crate::predictive::predictive_bidirectional;
use crate::synth::{splitmix64, TripletSample};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NALCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub codebook: Codebook,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub rng: ChaCha8Rng,
    /// Current epoch's permutation of training indices.
    pub order: Vec<usize>,
    pub cursor: usize,
}

/// Unweighted objective components plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub predictive: f64,
    pub matching: f64,
    pub commit: f64,
}

/// Graph handles and side outputs of one objective evaluation.
pub struct LossGraph {
    pub total: Var,
    pub predictive: Option<Var>,
    pub matching: Option<Var>,
    pub commit: Var,
    /// Global-embedding assignments for F, V, T.
    pub assignments: [Assignment; 3],
    /// Pre-quantization global embeddings for F, V, T.
    pub features: [Tensor; 3],
}

impl LossGraph {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown {
            total: g.value(self.total).item(),
            predictive: read(self.predictive),
            matching: read(self.matching),
            commit: g.value(self.commit).item(),
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub perplexity: f64,
    pub usage: f64,
}

pub const METRICS_HEADER: &str = "step,lr,total,predictive,match,commit,perplexity,usage";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss.total,
            self.loss.predictive,
            self.loss.matching,
            self.loss.commit,
            self.perplexity,
            self.usage
        )
    }
}

/// Cosine-annealed learning rate; `step` is clamped to `total`.
pub fn learning_rate(step: u64, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = (step as f64 / total as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub encoder: EncoderConfig,
    pub codebook_cfg: CodebookConfig,
    pub kernel: HrfKernel,
    pub train: Vec<TripletSample>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, train: Vec<TripletSample>) -> Result<Self> {
        cfg.validate()?;
        if train.len() < cfg.train.batch_size {
            return Err(Error::config(format!(
                "training split has {} samples, fewer than batch_size {}",
                train.len(),
                cfg.train.batch_size
            )));
        }
        let kernel = HrfKernel::with_shape(cfg.synth.tr_seconds, cfg.synth.hrf_length, &cfg.synth.hrf)?;
        Ok(Self {
            encoder: cfg.encoder(),
            codebook_cfg: cfg.codebook_config(),
            kernel,
            train,
            cfg,
        })
    }

    /// Fresh state derived from `train.seed`.
    pub fn init_state(&self) -> Result<TrainState> {
        let seed = self.cfg.train.seed;
        let params = self.encoder.init_params(splitmix64(seed ^ 0x01))?;
        let mut book_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x02));
        let codebook = Codebook::new(self.codebook_cfg.clone(), &mut book_rng)?;
        let zeros = |p: &ParamStore| -> BTreeMap<String, Tensor> {
            p.iter().map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape()))).collect()
        };
        Ok(TrainState {
            step: 0,
            adam_m: zeros(&params),
            adam_v: zeros(&params),
            params,
            codebook,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x03)),
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Indices of the next batch; reshuffles at epoch boundaries and drops
    /// an incomplete tail.
    pub fn next_indices(&self, state: &mut TrainState) -> Vec<usize> {
        let b = self.cfg.train.batch_size;
        if state.order.len() != self.train.len() || state.cursor + b > state.order.len() {
            state.order = (0..self.train.len()).collect();
            state.order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        let idx = state.order[state.cursor..state.cursor + b].to_vec();
        state.cursor += b;
        idx
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let refs: Vec<&TripletSample> = indices.iter().map(|&i| &self.train[i]).collect();
        Batch::from_samples(&refs)
    }

    /// Builds `a1 * predictive + a2 * match + a3 * commit` on `g`.
    ///
    /// Disabled components are not built and contribute nothing.
    pub fn total_loss(&self, g: &mut Graph, store: &ParamStore, codebook: &Codebook, batch: &Batch) -> Result<LossGraph> {
        let tc = &self.cfg.train;
        let enc = encode_batch(g, store, &self.encoder, batch)?;

        let globals = [enc.fmri, enc.video, enc.text];
        let features = globals.map(|v| g.value(v).clone());
        let assignments = [
            codebook.quantize(&features[0])?,
            codebook.quantize(&features[1])?,
            codebook.quantize(&features[2])?,
        ];

        let predictive = if tc.ablation.disable_predictive {
            None
        } else {
            Some(predictive_bidirectional(g, store, &self.encoder, &self.cfg.predictive, &enc)?)
        };

        let matching = if tc.ablation.disable_match {
            None
        } else {
            let mc = &self.cfg.matching;
            let mut temporal_parts = Vec::new();
            for (seq, len) in [(enc.fmri_seq, self.encoder.t_fmri), (enc.video_seq, self.encoder.t_video)] {
                let codes = codebook.quantize(g.value(seq))?;
                let z = g.straight_through(seq, codes.quantized)?;
                temporal_parts.push(temporal_loss(g, &[z], len, &self.kernel, mc.operand)?);
            }
            let temporal = {
                let s = g.add(temporal_parts[0], temporal_parts[1])?;
                g.scale(s, 0.5)
            };
            let mut structural = if mc.structure_on_codes {
                let zf = g.straight_through(enc.fmri, assignments[0].quantized.clone())?;
                let zv = g.straight_through(enc.video, assignments[1].quantized.clone())?;
                structural_loss(g, &[zf], &[zv])?
            } else {
                structural_loss(g, &enc.fmri_scales, &enc.video_scales)?
            };
            if mc.structure_text {
                let extra = structural_loss(g, &[enc.fmri], &[enc.text])?;
                let s = g.add(structural, extra)?;
                structural = g.scale(s, 0.5);
            }
            Some(match_loss(g, temporal, structural, mc.beta_struct)?)
        };

        let codes: Vec<Var> = assignments.iter().map(|a| g.input(a.quantized.clone())).collect();
        let commit = commitment_loss(g, &globals, &codes, self.codebook_cfg.commitment)?;

        let mut total = g.scale(commit, tc.alpha_commit);
        if let Some(n) = predictive {
            let t = g.scale(n, tc.alpha_predictive);
            total = g.add(t, total)?;
        }
        if let Some(m) = matching {
            let t = g.scale(m, tc.alpha_match);
            total = g.add(total, t)?;
        }
        Ok(LossGraph {
            total,
            predictive,
            matching,
            commit,
            assignments,
            features,
        })
    }

    /// Forward/backward, Adam update, exactly one codebook EMA update.
    pub fn train_step(&self, state: &mut TrainState) -> Result<StepMetrics> {
        let indices = self.next_indices(state);
        let batch = self.batch(&indices)?;
        self.train_step_on(state, &batch)
    }

    pub fn train_step_on(&self, state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
        let tc = &self.cfg.train;
        state.params.zero_grads();
        let mut g = Graph::new();
        let parts = self.total_loss(&mut g, &state.params, &state.codebook, batch)?;
        let loss = parts.breakdown(&g);
        for (name, v) in [
            ("predictive", loss.predictive),
            ("match", loss.matching),
            ("commit", loss.commit),
            ("total", loss.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name.into() });
            }
        }
        g.backward(parts.total, &mut state.params)?;
        drop(g);

        let lr = learning_rate(state.step, tc.total_steps, tc.lr_max, tc.lr_min);
        let t = (state.step + 1) as i32;
        let (b1, b2, eps) = (tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, value, grad) in state.params.iter_with_grads() {
            let m = state.adam_m.get_mut(name).expect("moment per parameter");
            let v = state.adam_v.get_mut(name).expect("moment per parameter");
            let (p, m, v, g) = (value.data_mut(), m.data_mut(), v.data_mut(), grad.data());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }

        let [af, av, at] = &parts.assignments;
        let [ff, fv, ft] = &parts.features;
        let (beta, mode) = if tc.ablation.disable_sync {
            (1.0, UpdateMode::Sequential)
        } else {
            let var_f = mean_feature_variance(&[ff]);
            let var_vt = mean_feature_variance(&[fv, ft]);
            (beta_dyn(var_f, var_vt, self.codebook_cfg.var_eps), UpdateMode::Synchronized)
        };
        let stats = sufficient_stats(
            &StatsInputs {
                assignments: [af, av, at],
                features: [ff, fv, ft],
                beta_dyn: beta,
                mix: self.codebook_cfg.mix,
                fmri_row_weights: None,
            },
            self.codebook_cfg.size,
        )?;
        state.codebook.ema_update(&stats, mode)?;
        let mut pool = ff.data().to_vec();
        pool.extend_from_slice(fv.data());
        pool.extend_from_slice(ft.data());
        let candidates = Tensor::matrix(3 * ff.rows(), ff.cols(), pool);
        state.codebook.reseed_dead(&candidates, &mut state.rng);

        let all: Vec<usize> = parts.assignments.iter().flat_map(|a| a.indices.iter().copied()).collect();
        let (usage, perplexity) = codebook_stats(&all, self.codebook_cfg.size)?;
        state.step += 1;
        Ok(StepMetrics {
            step: state.step,
            lr,
            loss,
            perplexity,
            usage,
        })
    }

    /// Runs until `state.step == total_steps`, writing one CSV row per step if `log` is given.
    pub fn run(&self, state: &mut TrainState, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        if let Some(w) = log.as_deref_mut() {
            if state.step == 0 {
                writeln!(w, "{METRICS_HEADER}")?;
            }
        }
        let mut out = Vec::new();
        while (state.step as usize) < self.cfg.train.total_steps {
            let m = self.train_step(state)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", m.csv_row())?;
            }
            out.push(m);
        }
        Ok(out)
    }
}

fn words_to_tensor(words: &[u32]) -> Tensor {
    Tensor::vector(words.iter().map(|&w| w as f64).collect())
}

fn rng_to_tensor(rng: &ChaCha8Rng) -> Tensor {
    let mut words = Vec::with_capacity(14);
    for chunk in rng.get_seed().chunks(4) {
        words.push(u32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let stream = rng.get_stream();
    words.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    words.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    words_to_tensor(&words)
}

fn rng_from_tensor(t: &Tensor) -> Result<ChaCha8Rng> {
    let words = tensor_words(t, 14, "rng.state")?;
    let mut seed = [0u8; 32];
    for (i, w) in words[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[8] as u64 | (words[9] as u64) << 32);
    let pos = (0..4).fold(0u128, |acc, i| acc | (words[10 + i] as u128) << (32 * i));
    rng.set_word_pos(pos);
    Ok(rng)
}

fn tensor_words(t: &Tensor, n: usize, what: &str) -> Result<Vec<u32>> {
    if t.len() != n {
        return Err(Error::format(0, format!("`{what}` has {} values, expected {n}", t.len())));
    }
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0 {
                Ok(x as u32)
            } else {
                Err(Error::format(0, format!("`{what}` holds a non-integer word")))
            }
        })
        .collect()
}

fn as_count(x: f64, what: &str) -> Result<u64> {
    if x >= 0.0 && x.fract() == 0.0 && x < 9.0e15 {
        Ok(x as u64)
    } else {
        Err(Error::format(0, format!("`{what}` is not a count")))
    }
}

pub fn checkpoint_entries(state: &TrainState) -> Vec<(String, Tensor)> {
    let cb = &state.codebook;
    let c = &cb.cfg;
    let mut out = vec![
        ("meta.step".to_string(), Tensor::scalar(state.step as f64)),
        ("meta.cursor".to_string(), Tensor::scalar(state.cursor as f64)),
        ("rng.state".to_string(), rng_to_tensor(&state.rng)),
        (
            "data.order".to_string(),
            Tensor::vector(state.order.iter().map(|&i| i as f64).collect()),
        ),
        (
            "codebook.hyper".to_string(),
            Tensor::vector(vec![
                c.size as f64,
                c.dim as f64,
                c.decay,
                c.mix,
                c.var_eps,
                c.commitment,
                if c.reseed_dead { 1.0 } else { 0.0 },
                c.dead_threshold,
                c.dead_patience as f64,
            ]),
        ),
        ("codebook.entries".to_string(), cb.entries.clone()),
        ("codebook.counts".to_string(), cb.counts.clone()),
        ("codebook.sums".to_string(), cb.sums.clone()),
        (
            "codebook.dead_steps".to_string(),
            Tensor::vector(cb.dead_steps.iter().map(|&d| d as f64).collect()),
        ),
        ("codebook.updates".to_string(), Tensor::scalar(cb.updates as f64)),
    ];
    for (name, v) in state.params.iter() {
        out.push((format!("param.{name}"), v.clone()));
    }
    for (name, v) in &state.adam_m {
        out.push((format!("adam.m.{name}"), v.clone()));
    }
    for (name, v) in &state.adam_v {
        out.push((format!("adam.v.{name}"), v.clone()));
    }
    out
}

pub fn state_from_entries(entries: Vec<(String, Tensor)>) -> Result<TrainState> {
    let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::format(0, format!("checkpoint lacks `{k}`")));
    let step = as_count(take("meta.step")?.item(), "meta.step")?;
    let cursor = as_count(take("meta.cursor")?.item(), "meta.cursor")? as usize;
    let rng = rng_from_tensor(&take("rng.state")?)?;
    let order = take("data.order")?
        .data()
        .iter()
        .map(|&x| as_count(x, "data.order").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let h = take("codebook.hyper")?;
    if h.len() != 9 {
        return Err(Error::format(0, "`codebook.hyper` has the wrong length"));
    }
    let h = h.data();
    let cfg = CodebookConfig {
        size: as_count(h[0], "codebook size")? as usize,
        dim: as_count(h[1], "codebook dim")? as usize,
        decay: h[2],
        mix: h[3],
        var_eps: h[4],
        commitment: h[5],
        reseed_dead: h[6] != 0.0,
        dead_threshold: h[7],
        dead_patience: as_count(h[8], "dead patience")? as u32,
    };
    let mut codebook = Codebook::from_entries(cfg, take("codebook.entries")?)?;
    codebook.counts = take("codebook.counts")?;
    codebook.sums = take("codebook.sums")?;
    codebook.dead_steps = take("codebook.dead_steps")?
        .data()
        .iter()
        .map(|&x| as_count(x, "dead steps").map(|v| v as u32))
        .collect::<Result<Vec<_>>>()?;
    codebook.updates = as_count(take("codebook.updates")?.item(), "codebook.updates")?;
    if codebook.counts.len() != codebook.size()
        || codebook.sums.shape() != codebook.entries.shape()
        || codebook.dead_steps.len() != codebook.size()
    {
        return Err(Error::format(0, "codebook accumulators do not match the entries"));
    }

    let mut params = ParamStore::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for (k, v) in map {
        if let Some(n) = k.strip_prefix("param.") {
            params.insert(n, v);
        } else if let Some(n) = k.strip_prefix("adam.m.") {
            adam_m.insert(n.to_string(), v);
        } else if let Some(n) = k.strip_prefix("adam.v.") {
            adam_v.insert(n.to_string(), v);
        } else {
            return Err(Error::format(0, format!("unexpected checkpoint entry `{k}`")));
        }
    }
    for (name, p) in params.iter() {
        for (which, moments) in [("m", &adam_m), ("v", &adam_v)] {
            match moments.get(name) {
                Some(t) if t.shape() == p.shape() => {}
                _ => return Err(Error::format(0, format!("missing or misshapen adam.{which}.{name}"))),
            }
        }
    }
    if adam_m.len() != params.len() || adam_v.len() != params.len() {
        return Err(Error::format(0, "optimizer moments without a parameter"));
    }
    Ok(TrainState {
        step,
        params,
        codebook,
        adam_m,
        adam_v,
        rng,
        order,
        cursor,
    })
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    encode_named(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &checkpoint_entries(state))
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    state_from_entries(decode_named(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
