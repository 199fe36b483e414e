//! Shared vector-quantization codebook.
//!
//! All three modalities quantize against one `K x D` table. Entries are not
//! learned by gradient descent; they are refreshed from exponential moving
//! averages of assignment counts `N` and assigned-feature sums `W`.
//!
//! The synchronized update gathers statistics from every modality for a step
//! and applies a single EMA step, so no modality is "last". The fMRI
//! statistics are scaled by a variance-aware weight and every modality's
//! targets are mixed with the other two modalities' features.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator guard when refreshing entries from `W / N`.
pub const COUNT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Fmri,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Fmri, Modality::Video, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Fmri => "F",
            Modality::Video => "V",
            Modality::Text => "T",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fmri => "fmri",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookConfig {
    pub size: usize,
    pub dim: usize,
    /// EMA decay gamma.
    pub decay: f64,
    /// Self-modality mixing weight lambda.
    pub mix: f64,
    /// Variance guard in the dynamic weight.
    pub var_eps: f64,
    /// Commitment coefficient.
    pub commitment: f64,
    /// Reseed codes whose count stays below `dead_threshold` for `dead_patience` updates.
    pub reseed_dead: bool,
    pub dead_threshold: f64,
    pub dead_patience: u32,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 64,
            dim: 32,
            decay: 0.99,
            mix: 0.8,
            var_eps: 1e-5,
            commitment: 0.25,
            reseed_dead: true,
            dead_threshold: 1e-3,
            dead_patience: 50,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.dim == 0 {
            return Err(Error::config("codebook needs K >= 2 and D >= 1"));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config("codebook decay must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mix) || !(self.var_eps > 0.0) || !(self.commitment >= 0.0) {
            return Err(Error::config("mix in [0,1], var_eps > 0, commitment >= 0 required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub cfg: CodebookConfig,
    /// `K x D`
    pub entries: Tensor,
    /// `[K]`
    pub counts: Tensor,
    /// `K x D`
    pub sums: Tensor,
    /// Consecutive updates each code has spent below the dead threshold.
    pub dead_steps: Vec<u32>,
    pub updates: u64,
}

/// Nearest-entry assignment for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    /// `B x K`
    pub one_hot: Tensor,
    /// `B x D`, row `i` equals `entries[indices[i]]`.
    pub quantized: Tensor,
}

/// Per-modality batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub modality: Modality,
    /// `[K]`
    pub counts: Tensor,
    /// `K x D`
    pub sums: Tensor,
}

/// How the EMA consumes a step's statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    /// Sum every modality's statistics, then one EMA step.
    Synchronized,
    /// One EMA step per modality, in the order given.
    Sequential,
}

impl Codebook {
    /// Entries uniform in `[-1/K, 1/K]`, zero accumulators.
    pub fn new(cfg: CodebookConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.size;
        let bound = 1.0 / k as f64;
        let data = (0..k * cfg.dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(Self {
            entries: Tensor::matrix(k, cfg.dim, data),
            counts: Tensor::zeros(&[k]),
            sums: Tensor::zeros(&[k, cfg.dim]),
            dead_steps: vec![0; k],
            updates: 0,
            cfg,
        })
    }

    pub fn from_entries(cfg: CodebookConfig, entries: Tensor) -> Result<Self> {
        cfg.validate()?;
        if entries.shape() != [cfg.size, cfg.dim] {
            return Err(Error::shape("codebook", "entries", entries.shape(), "config", &[cfg.size, cfg.dim]));
        }
        let k = cfg.size;
        Ok(Self {
            counts: Tensor::zeros(&[k]),
            sums: Tensor::zeros(&[k, cfg.dim]),
            dead_steps: vec![0; k],
            updates: 0,
            entries,
            cfg,
        })
    }

    pub fn size(&self) -> usize {
        self.cfg.size
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Nearest entry per row by squared Euclidean distance; ties go to the smaller index.
    pub fn quantize(&self, h: &Tensor) -> Result<Assignment> {
        let (b, d) = h.dims2();
        if d != self.dim() {
            return Err(Error::shape("quantize", "features", h.shape(), "codebook", self.entries.shape()));
        }
        let indices = crate::par::map_indexed(b, |i| nearest(&self.entries, h.row(i)));
        Ok(self.assignment_from_indices(indices))
    }

    pub fn assignment_from_indices(&self, indices: Vec<usize>) -> Assignment {
        let (k, d) = (self.size(), self.dim());
        let b = indices.len();
        let mut one_hot = vec![0.0; b * k];
        let mut quantized = Vec::with_capacity(b * d);
        for (i, &ix) in indices.iter().enumerate() {
            one_hot[i * k + ix] = 1.0;
            quantized.extend_from_slice(self.entries.row(ix));
        }
        Assignment {
            indices,
            one_hot: Tensor::matrix(b.max(1), k, if b == 0 { vec![0.0; k] } else { one_hot }),
            quantized: Tensor::matrix(b.max(1), d, if b == 0 { vec![0.0; d] } else { quantized }),
        }
    }

    /// Applies one step's statistics.
    pub fn ema_update(&mut self, stats: &[BatchStats], mode: UpdateMode) -> Result<()> {
        for s in stats {
            if s.counts.len() != self.size() || s.sums.shape() != self.entries.shape() {
                return Err(Error::shape("ema_update", "stats", s.sums.shape(), "codebook", self.entries.shape()));
            }
        }
        match mode {
            UpdateMode::Synchronized => {
                // canonical modality order so the sum is independent of arrival order
                let mut ordered: Vec<&BatchStats> = stats.iter().collect();
                ordered.sort_by_key(|s| s.modality);
                let mut counts = Tensor::zeros(&[self.size()]);
                let mut sums = Tensor::zeros(self.entries.shape());
                for s in ordered {
                    counts.add_assign(&s.counts);
                    sums.add_assign(&s.sums);
                }
                self.ema_step(&counts, &sums);
            }
            UpdateMode::Sequential => {
                for s in stats {
                    self.ema_step(&s.counts, &s.sums);
                }
            }
        }
        Ok(())
    }

    fn ema_step(&mut self, batch_counts: &Tensor, batch_sums: &Tensor) {
        let gamma = self.cfg.decay;
        let d = self.dim();
        for k in 0..self.size() {
            let n = gamma * self.counts.data()[k] + (1.0 - gamma) * batch_counts.data()[k];
            self.counts.data_mut()[k] = n;
            let touched = n > 0.0 || batch_counts.data()[k] != 0.0;
            for j in 0..d {
                let w = gamma * self.sums.get2(k, j) + (1.0 - gamma) * batch_sums.get2(k, j);
                self.sums.data_mut()[k * d + j] = w;
            }
            if touched {
                let denom = n.max(COUNT_EPS);
                for j in 0..d {
                    self.entries.data_mut()[k * d + j] = self.sums.get2(k, j) / denom;
                }
            }
            if n < self.cfg.dead_threshold {
                self.dead_steps[k] = self.dead_steps[k].saturating_add(1);
            } else {
                self.dead_steps[k] = 0;
            }
        }
        self.updates += 1;
    }

    /// Replaces codes that have been dead for `dead_patience` updates with
    /// random rows of `candidates`. Returns the reseeded indices.
    pub fn reseed_dead(&mut self, candidates: &Tensor, rng: &mut impl Rng) -> Vec<usize> {
        if !self.cfg.reseed_dead || candidates.cols() != self.dim() {
            return Vec::new();
        }
        let mut reseeded = Vec::new();
        for k in 0..self.size() {
            if self.dead_steps[k] >= self.cfg.dead_patience {
                let row = rng.gen_range(0..candidates.rows());
                self.entries.row_mut(k).copy_from_slice(candidates.row(row));
                self.counts.data_mut()[k] = 0.0;
                self.sums.row_mut(k).fill(0.0);
                self.dead_steps[k] = 0;
                reseeded.push(k);
            }
        }
        reseeded
    }

    /// Checks `e[k] = W[k] / max(N[k], eps)` for every code with positive count.
    pub fn consistent(&self, tol: f64) -> bool {
        (0..self.size()).all(|k| {
            let n = self.counts.data()[k];
            n <= 0.0
                || (0..self.dim()).all(|j| {
                    let expect = self.sums.get2(k, j) / n.max(COUNT_EPS);
                    (self.entries.get2(k, j) - expect).abs() <= tol * expect.abs().max(1.0)
                })
        }) && self.entries.is_finite()
            && self.counts.data().iter().all(|&n| n >= 0.0)
    }
}

fn nearest(entries: &Tensor, row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..entries.rows() {
        let d: f64 = entries.row(k).iter().zip(row).map(|(e, x)| (e - x) * (e - x)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Variance-aware fMRI weight `1 + tanh(ln((var_vt + eps) / (var_f + eps)))`, in `(0, 2)`.
///
/// Evaluated as `2 r^2 / (1 + r^2)` with `r = (var_vt + eps) / (var_f + eps)`,
/// which stays positive where `1 + tanh(..)` would round to zero.
pub fn beta_dyn(var_f: f64, var_vt: f64, eps: f64) -> f64 {
    let r = (var_vt + eps) / (var_f + eps);
    let r2 = r * r;
    if r2.is_infinite() {
        return 2.0;
    }
    2.0 * r2 / (1.0 + r2)
}

/// Mean per-dimension (population) variance over the rows of one or more matrices.
pub fn mean_feature_variance(parts: &[&Tensor]) -> f64 {
    let d = parts[0].cols();
    let n: usize = parts.iter().map(|p| p.rows()).sum();
    let mut total = 0.0;
    for j in 0..d {
        let mean = parts.iter().flat_map(|p| (0..p.rows()).map(move |i| p.get2(i, j))).sum::<f64>() / n as f64;
        let var = parts
            .iter()
            .flat_map(|p| (0..p.rows()).map(move |i| p.get2(i, j)))
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n as f64;
        total += var;
    }
    total / d as f64
}

/// Inputs to the sufficient statistics for one step, rows aligned across modalities.
pub struct StatsInputs<'a> {
    /// Assignments for F, V, T.
    pub assignments: [&'a Assignment; 3],
    /// Pre-quantization features for F, V, T, each `B x D`.
    pub features: [&'a Tensor; 3],
    pub beta_dyn: f64,
    pub mix: f64,
    /// Optional per-row fMRI weights replacing the scalar `beta_dyn`.
    pub fmri_row_weights: Option<&'a [f64]>,
}

/// Per-modality `(N_batch, W_batch)`.
///
/// Modality `m` uses targets `mix * Z^m + (1 - mix)/2 * (sum of the other two)`.
/// fMRI rows are scaled by `beta_dyn`; video and text rows by 1.
pub fn sufficient_stats(inputs: &StatsInputs<'_>, size: usize) -> Result<[BatchStats; 3]> {
    let b = inputs.features[0].rows();
    let d = inputs.features[0].cols();
    for m in 0..3 {
        let f = inputs.features[m];
        if f.rows() != b || f.cols() != d || inputs.assignments[m].indices.len() != b {
            return Err(Error::shape(
                "sufficient_stats",
                Modality::Fmri.name(),
                inputs.features[0].shape(),
                Modality::ALL[m].name(),
                f.shape(),
            ));
        }
    }
    if let Some(w) = inputs.fmri_row_weights {
        if w.len() != b {
            return Err(Error::shape("sufficient_stats", "row weights", &[w.len()], "batch", &[b]));
        }
    }
    let lambda = inputs.mix;
    let cross = (1.0 - lambda) / 2.0;
    let stats = Modality::ALL.map(|m| {
        let mi = m.index();
        let (o1, o2) = match m {
            Modality::Fmri => (1, 2),
            Modality::Video => (0, 2),
            Modality::Text => (0, 1),
        };
        let mut counts = vec![0.0; size];
        let mut sums = vec![0.0; size * d];
        for i in 0..b {
            let scale = match m {
                Modality::Fmri => inputs.fmri_row_weights.map_or(inputs.beta_dyn, |w| w[i]),
                _ => 1.0,
            };
            let k = inputs.assignments[mi].indices[i];
            counts[k] += scale;
            let own = inputs.features[mi].row(i);
            let a = inputs.features[o1].row(i);
            let c = inputs.features[o2].row(i);
            for j in 0..d {
                sums[k * d + j] += scale * (lambda * own[j] + cross * (a[j] + c[j]));
            }
        }
        BatchStats {
            modality: m,
            counts: Tensor::vector(counts),
            sums: Tensor::matrix(size, d, sums),
        }
    });
    Ok(stats)
}

/// `beta * |phi - sg[e_own]|^2 + beta/2 * |phi - sg[e_cross]|^2`, squared norms averaged over rows.
pub fn commitment_pair(g: &mut Graph, phi: Var, e_own: Var, e_cross: Var, beta: f64) -> Result<Var> {
    let own = g.stop_gradient(e_own);
    let cross = g.stop_gradient(e_cross);
    let rows = g.value(phi).rows() as f64;
    let d_own = g.sub(phi, own)?;
    let d_own = g.square(d_own);
    let d_own = g.sum(d_own);
    let d_cross = g.sub(phi, cross)?;
    let d_cross = g.square(d_cross);
    let d_cross = g.sum(d_cross);
    let a = g.scale(d_own, beta / rows);
    let b = g.scale(d_cross, beta / (2.0 * rows));
    g.add(a, b)
}

/// Commitment averaged over every ordered modality pair `(a, b)`, `a != b`.
///
/// `features[m]` is the encoder output of modality `m`; `quantized[m]` its
/// assigned codes (wrapped in stop-gradient here).
pub fn commitment_loss(g: &mut Graph, features: &[Var], quantized: &[Var], beta: f64) -> Result<Var> {
    if features.len() != quantized.len() || features.len() < 2 {
        return Err(Error::config("commitment needs matching feature/code lists for >= 2 modalities"));
    }
    let n = features.len();
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let term = commitment_pair(g, features[a], quantized[a], quantized[b], beta)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
            pairs += 1;
        }
    }
    Ok(g.scale(total.unwrap(), 1.0 / pairs as f64))
}

/// Fraction of codes used at least once, and `exp(entropy)` of the assignment histogram.
pub fn codebook_stats(indices: &[usize], size: usize) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hist = vec![0usize; size];
    for &i in indices {
        if i >= size {
            return Err(Error::Index(format!("code {i} out of range for K={size}")));
        }
        hist[i] += 1;
    }
    let n = indices.len() as f64;
    let used = hist.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((used as f64 / size as f64, entropy.exp()))
}
