//! Synthetic paired fMRI / video / caption data.
//!
//! A latent stimulus process drives all three views. The video sees it
//! directly, the caption sees its clip mean, and the fMRI sees it through the
//! HRF after a hemodynamic delay, plus white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hrf::{HrfKernel, HrfShape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One paired example. `fmri` is `T_f x D_f`, `video` is `T_v x D_v`, `caption` is `[D_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub pair_id: u64,
    pub fmri: Tensor,
    pub video: Tensor,
    pub caption: Tensor,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    pub d_video: usize,
    pub d_fmri: usize,
    pub d_caption: usize,
    pub t_video: usize,
    pub t_fmri: usize,
    pub tr_seconds: f64,
    pub delay_seconds: f64,
    pub noise_sigma: f64,
    /// Noise on the video and caption views.
    pub aux_noise_sigma: f64,
    /// Standard deviation of the latent random-walk increments.
    pub walk_sigma: f64,
    pub hrf_length: usize,
    pub hrf: HrfShape,
    /// Shift the fMRI window forward by the delay so volume `t` lines up with frame `t`.
    pub pre_shift: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_test: 128,
            latent_dim: 16,
            d_video: 24,
            d_fmri: 24,
            d_caption: 16,
            t_video: 12,
            t_fmri: 12,
            tr_seconds: 1.0,
            delay_seconds: 6.0,
            noise_sigma: 0.3,
            aux_noise_sigma: 0.05,
            walk_sigma: 0.15,
            hrf_length: 32,
            hrf: HrfShape::default(),
            pre_shift: false,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("latent_dim", self.latent_dim),
            ("d_video", self.d_video),
            ("d_fmri", self.d_fmri),
            ("d_caption", self.d_caption),
            ("t_video", self.t_video),
            ("t_fmri", self.t_fmri),
            ("hrf_length", self.hrf_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("synth.{name} must be >= 1")));
        }
        if !(self.delay_seconds >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.aux_noise_sigma >= 0.0) {
            return Err(Error::config("delay and noise levels must be >= 0"));
        }
        if !(self.tr_seconds > 0.0) || !(self.walk_sigma >= 0.0) {
            return Err(Error::config("tr must be > 0 and walk_sigma >= 0"));
        }
        Ok(())
    }

    /// Delay in whole volumes.
    pub fn delay_steps(&self) -> usize {
        (self.delay_seconds / self.tr_seconds).round() as usize
    }

    pub fn kernel(&self) -> Result<HrfKernel> {
        HrfKernel::with_shape(self.tr_seconds, self.hrf_length, &self.hrf)
    }

    /// Latent steps simulated before the first video frame.
    pub fn history_len(&self) -> usize {
        self.hrf_length + self.delay_steps()
    }
}

/// Fixed random read-out matrices shared by every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    /// `D_v x latent`
    pub video: Tensor,
    /// `D_f x latent`
    pub fmri: Tensor,
    /// `D_c x latent`
    pub caption: Tensor,
}

impl Projections {
    pub fn random(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5eed_0f_9a0_1ec7));
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let mut draw = |rows: usize| {
            let data = (0..rows * cfg.latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            Tensor::matrix(rows, cfg.latent_dim, data)
        };
        let video = draw(cfg.d_video);
        let fmri = draw(cfg.d_fmri);
        let caption = draw(cfg.d_caption);
        Self { video, fmri, caption }
    }
}

/// Stateless 64-bit mixer used to derive independent sub-seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d9_49d5_31e5_b0eb);
    x ^ (x >> 31)
}

/// Latent process for one sample: `history_len + t_video` steps of a Gaussian
/// random walk smoothed by a 3-tap moving average. Index `history_len` is the
/// first video frame.
pub fn latent_process(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let total = cfg.history_len() + cfg.t_video.max(cfg.t_fmri);
    let mut walk = Vec::with_capacity(total + 2);
    let mut state: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..total + 2 {
        walk.push(state.clone());
        for s in state.iter_mut() {
            *s += cfg.walk_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (0..total)
        .map(|t| {
            (0..cfg.latent_dim)
                .map(|d| (walk[t][d] + walk[t + 1][d] + walk[t + 2][d]) / 3.0)
                .collect()
        })
        .collect()
}

fn project(p: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..p.rows()).map(|r| crate::tensor::dot(p.row(r), v)).collect()
}

/// HRF-filtered latent at absolute step `t` (history before step 0 is zero).
pub fn convolved_latent(kernel: &HrfKernel, latent: &[Vec<f64>], t: isize) -> Vec<f64> {
    let dim = latent[0].len();
    let mut out = vec![0.0; dim];
    for (j, w) in kernel.taps.iter().enumerate() {
        let src = t - j as isize;
        if src < 0 {
            break;
        }
        for (o, x) in out.iter_mut().zip(&latent[src as usize]) {
            *o += w * x;
        }
    }
    out
}

/// Absolute latent index feeding fMRI volume `t` (before HRF filtering).
pub fn fmri_source_index(cfg: &SynthConfig, t: usize) -> isize {
    let shift = if cfg.pre_shift { 0 } else { cfg.delay_steps() as isize };
    (cfg.history_len() + t) as isize - shift
}

fn round_f32(t: Tensor) -> Tensor {
    t.map(|x| x as f32 as f64)
}

/// Generates one sample in full `f64` precision.
pub fn generate_sample_raw(
    cfg: &SynthConfig,
    proj: &Projections,
    kernel: &HrfKernel,
    pair_id: u64,
    split: Split,
) -> TripletSample {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed.wrapping_add(splitmix64(pair_id))));
    let latent = latent_process(cfg, &mut rng);
    let h = cfg.history_len();

    let mut video = Vec::with_capacity(cfg.t_video * cfg.d_video);
    for t in 0..cfg.t_video {
        for x in project(&proj.video, &latent[h + t]) {
            video.push(x + cfg.aux_noise_sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }

    let mut fmri = Vec::with_capacity(cfg.t_fmri * cfg.d_fmri);
    for t in 0..cfg.t_fmri {
        let src = fmri_source_index(cfg, t);
        let signal = convolved_latent(kernel, &latent, src);
        for x in project(&proj.fmri, &signal) {
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            fmri.push(x + noise);
        }
    }

    let mut mean = vec![0.0; cfg.latent_dim];
    for t in 0..cfg.t_video {
        for (m, x) in mean.iter_mut().zip(&latent[h + t]) {
            *m += x / cfg.t_video as f64;
        }
    }
    let caption: Vec<f64> = project(&proj.caption, &mean)
        .into_iter()
        .map(|x| x + cfg.aux_noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();

    TripletSample {
        pair_id,
        fmri: Tensor::matrix(cfg.t_fmri, cfg.d_fmri, fmri),
        video: Tensor::matrix(cfg.t_video, cfg.d_video, video),
        caption: Tensor::vector(caption),
        split,
    }
}

/// Full-precision dataset with explicit projections. Pair ids `0..n_train`
/// are training samples, the following `n_test` are test samples.
pub fn generate_dataset_with(cfg: &SynthConfig, proj: &Projections) -> Result<Vec<TripletSample>> {
    cfg.validate()?;
    let kernel = cfg.kernel()?;
    let n = cfg.n_train + cfg.n_test;
    Ok(crate::par::map_indexed(n, |i| {
        let split = if i < cfg.n_train { Split::Train } else { Split::Test };
        generate_sample_raw(cfg, proj, &kernel, i as u64, split)
    }))
}

/// Deterministic dataset for `cfg`. Values are rounded to `f32` so they
/// survive the on-disk format bit-exactly.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<TripletSample>> {
    let proj = Projections::random(cfg);
    let raw = generate_dataset_with(cfg, &proj)?;
    Ok(raw
        .into_iter()
        .map(|s| TripletSample {
            fmri: round_f32(s.fmri),
            video: round_f32(s.video),
            caption: round_f32(s.caption),
            ..s
        })
        .collect())
}

pub fn split_samples(samples: &[TripletSample], split: Split) -> Vec<TripletSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}
