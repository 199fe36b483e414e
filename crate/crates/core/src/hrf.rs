//! Canonical double-gamma hemodynamic response.

use crate::error::{Error, Result};

/// Shape of the double-gamma response: a peak gamma density minus a scaled
/// undershoot gamma density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrfShape {
    pub peak_shape: f64,
    pub peak_scale: f64,
    pub undershoot_shape: f64,
    pub undershoot_scale: f64,
    pub undershoot_ratio: f64,
}

impl Default for HrfShape {
    fn default() -> Self {
        Self {
            peak_shape: 6.0,
            peak_scale: 1.0,
            undershoot_shape: 16.0,
            undershoot_scale: 1.0,
            undershoot_ratio: 1.0 / 6.0,
        }
    }
}

fn gamma_pdf(t: f64, shape: f64, scale: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let log_pdf = (shape - 1.0) * t.ln() - t / scale - shape * scale.ln() - libm::lgamma(shape);
    log_pdf.exp()
}

impl HrfShape {
    /// Unnormalized response at `t` seconds.
    pub fn response(&self, t: f64) -> f64 {
        gamma_pdf(t, self.peak_shape, self.peak_scale)
            - self.undershoot_ratio * gamma_pdf(t, self.undershoot_shape, self.undershoot_scale)
    }
}

/// Minimum kernel span before the undershoot counts as truncated.
pub const MIN_SPAN_SECONDS: f64 = 10.0;

/// Sampled, unit-sum HRF.
#[derive(Clone, Debug, PartialEq)]
pub struct HrfKernel {
    pub tr_seconds: f64,
    pub taps: Vec<f64>,
    /// Set when `length * tr` is shorter than [`MIN_SPAN_SECONDS`].
    pub truncated: bool,
}

impl HrfKernel {
    pub fn canonical(tr_seconds: f64, length: usize) -> Result<Self> {
        Self::with_shape(tr_seconds, length, &HrfShape::default())
    }

    pub fn with_shape(tr_seconds: f64, length: usize, shape: &HrfShape) -> Result<Self> {
        if !(tr_seconds > 0.0) || length < 2 {
            return Err(Error::config(format!(
                "hrf kernel needs tr > 0 and length >= 2 (got tr={tr_seconds}, length={length})"
            )));
        }
        let mut taps: Vec<f64> = (0..length).map(|i| shape.response(i as f64 * tr_seconds)).collect();
        let total: f64 = taps.iter().sum();
        if !(total > 0.0) {
            return Err(Error::config("hrf taps sum to a non-positive value"));
        }
        taps.iter_mut().for_each(|x| *x /= total);
        Ok(Self {
            tr_seconds,
            taps,
            truncated: (length as f64) * tr_seconds < MIN_SPAN_SECONDS,
        })
    }

    /// Unit impulse: the identity filter.
    pub fn delta(length: usize) -> Self {
        let mut taps = vec![0.0; length.max(1)];
        taps[0] = 1.0;
        Self {
            tr_seconds: 1.0,
            taps,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.taps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    pub fn peak_seconds(&self) -> f64 {
        self.argmax() as f64 * self.tr_seconds
    }

    /// Causal convolution of a scalar series: `y[t] = sum_j taps[j] x[t - j]`.
    pub fn convolve(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|t| {
                self.taps
                    .iter()
                    .enumerate()
                    .take(t + 1)
                    .map(|(j, w)| w * x[t - j])
                    .sum()
            })
            .collect()
    }
}
