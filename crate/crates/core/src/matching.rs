//! Fine-grained matching: HRF-aware temporal consistency of code sequences
//! plus multi-scale structural alignment between fMRI and video.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::hrf::HrfKernel;
use crate::tensor::Tensor;

/// What `HRF(z_{t-1})` means in the temporal term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalOperand {
    /// The causally HRF-filtered sequence evaluated at `t - 1`.
    FilteredHistory,
    /// `z_{t-1}` scaled by the kernel mass (a one-tap kernel).
    SingleStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub beta_struct: f64,
    pub operand: TemporalOperand,
    /// Compute structure on quantized global embeddings (single scale) instead of per-scale features.
    pub structure_on_codes: bool,
    /// Add an fMRI-vs-text structural term on the global embeddings.
    pub structure_text: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            beta_struct: 0.5,
            operand: TemporalOperand::FilteredHistory,
            structure_on_codes: false,
            structure_text: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_struct >= 0.0) {
            return Err(Error::config("beta_struct must be >= 0"));
        }
        Ok(())
    }
}

/// `HRF(z)_t = sum_j taps[j] z_{t-j}` per sequence, left zero-padded.
///
/// `z` is batch-major `(B*T) x D`.
pub fn hrf_operator(g: &mut Graph, z: Var, seq_len: usize, kernel: &HrfKernel) -> Result<Var> {
    let (rows, _) = g.value(z).dims2();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::shape("hrf_operator", "sequence", g.shape(z), "seq_len", &[seq_len]));
    }
    let mut acc: Option<Var> = None;
    for (j, &w) in kernel.taps.iter().enumerate().take(seq_len) {
        if w == 0.0 {
            continue;
        }
        let src = if j == 0 {
            z
        } else {
            let idx: Rc<[Option<usize>]> = (0..rows).map(|r| (r % seq_len >= j).then(|| r - j)).collect();
            g.gather_rows(z, idx)?
        };
        let term = g.scale(src, w);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.scale(z, 0.0),
    })
}

/// Mean over samples, `t = 1..T-1` (0-based) and modalities of `|z_t - HRF(z)_{t-1}|^2`.
pub fn temporal_loss(
    g: &mut Graph,
    sequences: &[Var],
    seq_len: usize,
    kernel: &HrfKernel,
    operand: TemporalOperand,
) -> Result<Var> {
    if seq_len < 2 {
        return Err(Error::config("temporal loss needs sequences of length >= 2"));
    }
    if sequences.is_empty() {
        return Err(Error::config("temporal loss needs at least one sequence"));
    }
    let mut total: Option<Var> = None;
    for &z in sequences {
        let (rows, _) = g.value(z).dims2();
        if rows % seq_len != 0 {
            return Err(Error::shape("temporal_loss", "sequence", g.shape(z), "seq_len", &[seq_len]));
        }
        let batch = rows / seq_len;
        let filtered = match operand {
            TemporalOperand::FilteredHistory => hrf_operator(g, z, seq_len, kernel)?,
            TemporalOperand::SingleStep => g.scale(z, kernel.taps.iter().sum()),
        };
        let cur_idx: Rc<[Option<usize>]> = (0..batch)
            .flat_map(|b| (1..seq_len).map(move |t| Some(b * seq_len + t)))
            .collect();
        let prev_idx: Rc<[Option<usize>]> = (0..batch)
            .flat_map(|b| (1..seq_len).map(move |t| Some(b * seq_len + t - 1)))
            .collect();
        let cur = g.gather_rows(z, cur_idx)?;
        let prev = g.gather_rows(filtered, prev_idx)?;
        let diff = g.sub(cur, prev)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        let term = g.scale(s, 1.0 / (batch * (seq_len - 1)) as f64);
        total = Some(match total {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / sequences.len() as f64))
}

/// Mean squared difference of within-modality cosine-similarity matrices over
/// off-diagonal pairs, averaged over scales.
pub fn structural_loss(g: &mut Graph, fmri_scales: &[Var], video_scales: &[Var]) -> Result<Var> {
    if fmri_scales.is_empty() || fmri_scales.len() != video_scales.len() {
        return Err(Error::config("structural loss needs the same non-zero number of scales on both sides"));
    }
    let b = g.value(fmri_scales[0]).rows();
    if b < 2 {
        return Err(Error::config("structural loss needs a batch of at least 2"));
    }
    let mut off = vec![1.0; b * b];
    for i in 0..b {
        off[i * b + i] = 0.0;
    }
    let mask = g.input(Tensor::matrix(b, b, off));
    let mut total: Option<Var> = None;
    for (&f, &v) in fmri_scales.iter().zip(video_scales) {
        if g.value(f).rows() != b || g.value(v).rows() != b {
            return Err(Error::shape("structural_loss", "fmri", g.shape(f), "video", g.shape(v)));
        }
        let sf = g.cosine_matrix(f, f)?;
        let sv = g.cosine_matrix(v, v)?;
        let d = g.sub(sf, sv)?;
        let d = g.mul(d, mask)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        let term = g.scale(s, 1.0 / (b * (b - 1)) as f64);
        total = Some(match total {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / fmri_scales.len() as f64))
}

/// `temporal + beta * structural`.
pub fn match_loss(g: &mut Graph, temporal: Var, structural: Var, beta: f64) -> Result<Var> {
    let s = g.scale(structural, beta);
    g.add(temporal, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = hrf_operator(&mut g, z, 2, &HrfKernel::delta(5)).unwrap();
        assert_eq!(g.value(y), g.value(z));
    }

    #[test]
    fn constant_sequence_settles_to_constant() {
        let k = HrfKernel::canonical(1.0, 16).unwrap();
        let t = 24;
        let mut g = Graph::new();
        let z = g.input(Tensor::filled(&[t, 3], 2.5));
        let y = hrf_operator(&mut g, z, t, &k).unwrap();
        for r in 16..t {
            for &v in g.value(y).row(r) {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_loss_cases() {
        let mut g = Graph::new();
        let z = g.input(Tensor::filled(&[6, 2], 0.7));
        let l = temporal_loss(&mut g, &[z], 6, &HrfKernel::delta(3), TemporalOperand::FilteredHistory).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);

        let k = HrfKernel::canonical(1.0, 32).unwrap();
        let z = g.input(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]));
        let l = temporal_loss(&mut g, &[z], 2, &k, TemporalOperand::FilteredHistory).unwrap();
        assert!((g.value(l).item() - 5.25).abs() < 1e-15);

        assert!(matches!(
            temporal_loss(&mut g, &[z], 1, &k, TemporalOperand::FilteredHistory),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn structural_two_sample_case() {
        let mut g = Graph::new();
        let f = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 0.0]));
        let v = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]));
        let l = structural_loss(&mut g, &[f], &[v]).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        let same = structural_loss(&mut g, &[f], &[f]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let one = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        assert!(matches!(structural_loss(&mut g, &[one], &[one]), Err(Error::Config(_))));
    }

    #[test]
    fn match_loss_arithmetic() {
        let mut g = Graph::new();
        let t = g.input(Tensor::scalar(0.2));
        let s = g.input(Tensor::scalar(0.4));
        let m = match_loss(&mut g, t, s, 0.5).unwrap();
        assert!((g.value(m).item() - 0.4).abs() < 1e-15);
        let m0 = match_loss(&mut g, t, s, 0.0).unwrap();
        assert_eq!(g.value(m0).item(), 0.2);
    }
}
