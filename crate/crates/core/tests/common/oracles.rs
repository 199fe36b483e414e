//! Closed-form and brute-force references checked against the library on
//! random instances.

use fvalign::codebook::{
    beta_dyn, codebook_stats, sufficient_stats, BatchStats, Codebook, CodebookConfig, Modality, StatsInputs, UpdateMode,
};
use fvalign::eval::recall_at_k;
use fvalign::hrf::{HrfKernel, HrfShape};
use fvalign::matching::{hrf_operator, match_loss, structural_loss, temporal_loss, TemporalOperand};
use fvalign::predictive::{info_nce_from_similarities, predictive_loss};
use fvalign::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 25;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0A11_CE00 + seed)
}

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn book(r: &mut ChaCha8Rng, k: usize, d: usize, decay: f64, mix: f64) -> Codebook {
    let cfg = CodebookConfig {
        size: k,
        dim: d,
        decay,
        mix,
        reseed_dead: false,
        ..CodebookConfig::default()
    };
    Codebook::from_entries(cfg, random(r, k, d)).unwrap()
}

fn exhaustive_nearest(entries: &Tensor, x: &[f64]) -> usize {
    let dists: Vec<f64> = (0..entries.rows())
        .map(|k| entries.row(k).iter().zip(x).map(|(e, v)| (e - v).powi(2)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

pub fn quantize_matches_exhaustive_scan() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let k = r.gen_range(2..40);
        let d = r.gen_range(1..12);
        let b = r.gen_range(1..50);
        let cb = book(&mut r, k, d, 0.99, 0.8);
        let mut h = random(&mut r, b, d);
        // plant exact duplicates of codebook rows and exact ties
        if b > 2 {
            let dup = r.gen_range(0..k);
            h.row_mut(0).copy_from_slice(cb.entries.row(dup));
        }
        let a = cb.quantize(&h).unwrap();
        for i in 0..b {
            let want = exhaustive_nearest(&cb.entries, h.row(i));
            assert_eq!(a.indices[i], want, "instance {s} row {i}");
            assert_eq!(a.quantized.row(i), cb.entries.row(want));
            assert_eq!(a.one_hot.row(i).iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(a.one_hot.get2(i, want), 1.0);
        }
    }
    let tie = Codebook::from_entries(
        CodebookConfig {
            size: 3,
            dim: 1,
            ..CodebookConfig::default()
        },
        Tensor::matrix(3, 1, vec![1.0, -1.0, 1.0]),
    )
    .unwrap();
    assert_eq!(tie.quantize(&Tensor::matrix(2, 1, vec![0.0, 1.0])).unwrap().indices, vec![0, 0]);
}

struct Instance {
    feats: [Tensor; 3],
    indices: [Vec<usize>; 3],
    beta: f64,
    mix: f64,
    k: usize,
}

fn stats_instance(r: &mut ChaCha8Rng) -> Instance {
    let k = r.gen_range(2..12);
    let d = r.gen_range(1..8);
    let b = r.gen_range(1..20);
    let feats = [random(r, b, d), random(r, b, d), random(r, b, d)];
    let indices = [0, 1, 2].map(|_| (0..b).map(|_| r.gen_range(0..k)).collect::<Vec<_>>());
    Instance {
        feats,
        indices,
        beta: r.gen_range(0.05..1.95),
        mix: r.gen_range(0.0..=1.0),
        k,
    }
}

fn library_stats(cb: &Codebook, inst: &Instance) -> [BatchStats; 3] {
    let a = [0, 1, 2].map(|m| cb.assignment_from_indices(inst.indices[m].clone()));
    sufficient_stats(
        &StatsInputs {
            assignments: [&a[0], &a[1], &a[2]],
            features: [&inst.feats[0], &inst.feats[1], &inst.feats[2]],
            beta_dyn: inst.beta,
            mix: inst.mix,
            fmri_row_weights: None,
        },
        inst.k,
    )
    .unwrap()
}

/// Per-row accumulation written directly from the definition.
fn reference_stats(inst: &Instance) -> [(Vec<f64>, Vec<Vec<f64>>); 3] {
    let d = inst.feats[0].cols();
    let b = inst.feats[0].rows();
    [0usize, 1, 2].map(|m| {
        let mut n = vec![0.0; inst.k];
        let mut w = vec![vec![0.0; d]; inst.k];
        let scale = if m == 0 { inst.beta } else { 1.0 };
        for i in 0..b {
            let code = inst.indices[m][i];
            n[code] += scale;
            for j in 0..d {
                let others: f64 = (0..3).filter(|&o| o != m).map(|o| inst.feats[o].get2(i, j)).sum();
                let target = inst.mix * inst.feats[m].get2(i, j) + 0.5 * (1.0 - inst.mix) * others;
                w[code][j] += scale * target;
            }
        }
        (n, w)
    })
}

pub fn sufficient_stats_match_per_row_accumulation() {
    for s in 0..INSTANCES {
        let mut r = rng(100 + s);
        let inst = stats_instance(&mut r);
        let d = inst.feats[0].cols();
        let cb = book(&mut r, inst.k, d, 0.9, inst.mix);
        let got = library_stats(&cb, &inst);
        let want = reference_stats(&inst);
        for m in 0..3 {
            assert_eq!(got[m].modality, Modality::ALL[m]);
            for k in 0..inst.k {
                assert!((got[m].counts.data()[k] - want[m].0[k]).abs() < 1e-10);
                for j in 0..d {
                    assert!((got[m].sums.get2(k, j) - want[m].1[k][j]).abs() < 1e-10, "instance {s}");
                }
            }
        }
    }
}

pub fn ema_matches_unrolled_recurrence() {
    for s in 0..INSTANCES {
        let mut r = rng(200 + s);
        let k = r.gen_range(2..10);
        let d = r.gen_range(1..6);
        let gamma = r.gen_range(0.5..0.999);
        let steps = r.gen_range(1..8);
        let mut cb = book(&mut r, k, d, gamma, 0.8);
        let initial = cb.entries.clone();
        let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for _ in 0..steps {
            let stats: Vec<BatchStats> = Modality::ALL
                .iter()
                .map(|&m| {
                    let counts: Vec<f64> = (0..k).map(|_| if r.gen_bool(0.7) { r.gen_range(0.0..4.0) } else { 0.0 }).collect();
                    BatchStats {
                        modality: m,
                        counts: Tensor::vector(counts),
                        sums: random(&mut r, k, d),
                    }
                })
                .collect();
            let mut c = vec![0.0; k];
            let mut w = vec![0.0; k * d];
            for st in &stats {
                for i in 0..k {
                    c[i] += st.counts.data()[i];
                }
                for i in 0..k * d {
                    w[i] += st.sums.data()[i];
                }
            }
            history.push((c, w));
            cb.ema_update(&stats, UpdateMode::Synchronized).unwrap();
        }
        let n = steps as i32;
        for code in 0..k {
            // N_n = sum_s (1 - g) g^(n - s) c_s  (zero initial accumulators)
            let big_n: f64 = history
                .iter()
                .enumerate()
                .map(|(i, (c, _))| (1.0 - gamma) * gamma.powi(n - 1 - i as i32) * c[code])
                .sum();
            assert!((cb.counts.data()[code] - big_n).abs() < 1e-10, "instance {s}");
            let ever = history.iter().any(|(c, _)| c[code] != 0.0);
            for j in 0..d {
                let big_w: f64 = history
                    .iter()
                    .enumerate()
                    .map(|(i, (_, w))| (1.0 - gamma) * gamma.powi(n - 1 - i as i32) * w[code * d + j])
                    .sum();
                assert!((cb.sums.get2(code, j) - big_w).abs() < 1e-10);
                let want = if ever { big_w / big_n.max(1e-8) } else { initial.get2(code, j) };
                let tol = 1e-10 * want.abs().max(1.0);
                assert!((cb.entries.get2(code, j) - want).abs() < tol, "instance {s} code {code}");
            }
        }
        assert!(cb.consistent(1e-12));
        assert_eq!(cb.updates, steps as u64);
    }
}

pub fn unimodal_reduction_at_full_self_mix_and_unit_weight() {
    for s in 0..INSTANCES {
        let mut r = rng(300 + s);
        let mut inst = stats_instance(&mut r);
        inst.mix = 1.0;
        inst.beta = beta_dyn(0.4, 0.4, 1e-5);
        assert_eq!(inst.beta, 1.0);
        let d = inst.feats[0].cols();
        let gamma = r.gen_range(0.5..0.99);
        let mut cb = book(&mut r, inst.k, d, gamma, 1.0);
        let mut plain_entries = cb.entries.clone();
        let mut plain_n = vec![0.0; inst.k];
        let mut plain_w = vec![vec![0.0; d]; inst.k];
        for _ in 0..3 {
            let st = library_stats(&cb, &inst);
            cb.ema_update(&st, UpdateMode::Synchronized).unwrap();

            // textbook EMA-VQ on the pooled rows of all three modalities
            let mut n = vec![0.0; inst.k];
            let mut w = vec![vec![0.0; d]; inst.k];
            for m in 0..3 {
                for i in 0..inst.feats[m].rows() {
                    let c = inst.indices[m][i];
                    n[c] += 1.0;
                    for j in 0..d {
                        w[c][j] += inst.feats[m].get2(i, j);
                    }
                }
            }
            for c in 0..inst.k {
                plain_n[c] = gamma * plain_n[c] + (1.0 - gamma) * n[c];
                for j in 0..d {
                    plain_w[c][j] = gamma * plain_w[c][j] + (1.0 - gamma) * w[c][j];
                }
                if plain_n[c] > 0.0 {
                    for j in 0..d {
                        plain_entries.data_mut()[c * d + j] = plain_w[c][j] / plain_n[c].max(1e-8);
                    }
                }
            }
        }
        assert!(cb.entries.max_abs_diff(&plain_entries) < 1e-10, "instance {s}");
        for c in 0..inst.k {
            assert!((cb.counts.data()[c] - plain_n[c]).abs() < 1e-10);
        }
    }
}

fn permuted(stats: &[BatchStats; 3], order: [usize; 3]) -> Vec<BatchStats> {
    order.iter().map(|&i| stats[i].clone()).collect()
}

const ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

pub fn synchronized_update_is_order_free_and_sequential_is_not() {
    let mut sequential_differs = 0;
    for s in 0..INSTANCES {
        let mut r = rng(400 + s);
        let mut inst = stats_instance(&mut r);
        inst.indices = [0, 1, 2].map(|_| (0..inst.feats[0].rows()).map(|_| r.gen_range(0..2)).collect());
        let d = inst.feats[0].cols();
        let base = book(&mut r, inst.k, d, 0.9, inst.mix);
        let stats = library_stats(&base, &inst);

        let mut reference = base.clone();
        reference.ema_update(&permuted(&stats, ORDERS[0]), UpdateMode::Synchronized).unwrap();
        for order in ORDERS {
            let mut cb = base.clone();
            cb.ema_update(&permuted(&stats, order), UpdateMode::Synchronized).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&cb.entries), bits(&reference.entries), "instance {s} order {order:?}");
            assert_eq!(bits(&cb.counts), bits(&reference.counts));
            assert_eq!(bits(&cb.sums), bits(&reference.sums));
        }

        let outcomes: Vec<Codebook> = ORDERS
            .iter()
            .map(|&o| {
                let mut cb = base.clone();
                cb.ema_update(&permuted(&stats, o), UpdateMode::Sequential).unwrap();
                cb
            })
            .collect();
        if outcomes.iter().any(|c| c.entries.max_abs_diff(&outcomes[0].entries) > 1e-9) {
            sequential_differs += 1;
        }
    }
    assert!(sequential_differs as u64 >= INSTANCES * 9 / 10, "sequential order-dependent on {sequential_differs}");
}

fn direct_causal_conv(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (t, out) in y.iter_mut().enumerate() {
        for (j, w) in taps.iter().enumerate() {
            if j <= t {
                *out += w * x[t - j];
            }
        }
    }
    y
}

pub fn hrf_operator_matches_direct_convolution() {
    for s in 0..INSTANCES {
        let mut r = rng(500 + s);
        let tr = r.gen_range(0.4..2.5);
        let len = r.gen_range(2..40);
        let kernel = HrfKernel::canonical(tr, len).unwrap();
        let b = r.gen_range(1..5);
        let t = r.gen_range(1..30);
        let d = r.gen_range(1..5);
        let z = random(&mut r, b * t, d);
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let y = hrf_operator(&mut g, zv, t, &kernel).unwrap();
        for bi in 0..b {
            for j in 0..d {
                let series: Vec<f64> = (0..t).map(|ti| z.get2(bi * t + ti, j)).collect();
                let want = direct_causal_conv(&kernel.taps, &series);
                assert_eq!(kernel.convolve(&series).len(), t);
                for ti in 0..t {
                    assert!((g.value(y).get2(bi * t + ti, j) - want[ti]).abs() < 1e-10, "instance {s}");
                }
            }
        }
    }
}

pub fn temporal_loss_matches_hand_sum() {
    for s in 0..INSTANCES {
        let mut r = rng(600 + s);
        let kernel = HrfKernel::canonical(1.0, r.gen_range(2..20)).unwrap();
        let (b, t, d) = (r.gen_range(1..4), r.gen_range(2..10), r.gen_range(1..4));
        let seqs = [random(&mut r, b * t, d), random(&mut r, b * t, d)];
        for operand in [TemporalOperand::FilteredHistory, TemporalOperand::SingleStep] {
            let mut g = Graph::new();
            let vars: Vec<_> = seqs.iter().map(|z| g.input(z.clone())).collect();
            let l = temporal_loss(&mut g, &vars, t, &kernel, operand).unwrap();
            let mut want = 0.0;
            for z in &seqs {
                let mut acc = 0.0;
                for bi in 0..b {
                    for j in 0..d {
                        let series: Vec<f64> = (0..t).map(|ti| z.get2(bi * t + ti, j)).collect();
                        let filtered = match operand {
                            TemporalOperand::FilteredHistory => direct_causal_conv(&kernel.taps, &series),
                            TemporalOperand::SingleStep => {
                                series.iter().map(|x| x * kernel.taps.iter().sum::<f64>()).collect()
                            }
                        };
                        for ti in 1..t {
                            acc += (series[ti] - filtered[ti - 1]).powi(2);
                        }
                    }
                }
                want += acc / (b * (t - 1)) as f64;
            }
            want /= seqs.len() as f64;
            assert!((g.value(l).item() - want).abs() < 1e-10, "instance {s}");
        }
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn structural_loss_matches_pairwise_loop() {
    for s in 0..INSTANCES {
        let mut r = rng(700 + s);
        let scales = r.gen_range(1..4);
        let b = r.gen_range(2..10);
        let (df, dv) = (r.gen_range(1..6), r.gen_range(1..6));
        let fs: Vec<Tensor> = (0..scales).map(|_| random(&mut r, b, df)).collect();
        let vs: Vec<Tensor> = (0..scales).map(|_| random(&mut r, b, dv)).collect();
        let mut g = Graph::new();
        let fv: Vec<_> = fs.iter().map(|t| g.input(t.clone())).collect();
        let vv: Vec<_> = vs.iter().map(|t| g.input(t.clone())).collect();
        let l = structural_loss(&mut g, &fv, &vv).unwrap();
        let mut want = 0.0;
        for (f, v) in fs.iter().zip(&vs) {
            let mut acc = 0.0;
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        acc += (cos(f.row(i), f.row(j)) - cos(v.row(i), v.row(j))).powi(2);
                    }
                }
            }
            want += acc / (b * (b - 1)) as f64;
        }
        want /= scales as f64;
        assert!((g.value(l).item() - want).abs() < 1e-10, "instance {s}");

        let mut g2 = Graph::new();
        let t = g2.input(Tensor::scalar(r.gen_range(0.0..3.0)));
        let st = g2.input(Tensor::scalar(r.gen_range(0.0..3.0)));
        let m = match_loss(&mut g2, t, st, 0.0).unwrap();
        assert_eq!(g2.value(m).item(), g2.value(t).item());
    }
}

pub fn infonce_reductions() {
    for s in 0..INSTANCES {
        let mut r = rng(800 + s);
        let d = r.gen_range(1..6);
        let mut g = Graph::new();
        let p = g.input(random(&mut r, 1, d));
        let t = g.input(random(&mut r, 1, d));
        let l = predictive_loss(&mut g, p, t, 0.07).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let b = r.gen_range(2..40);
        let c: f64 = r.gen_range(-1.0..1.0);
        let tau = r.gen_range(0.01..2.0);
        let v = info_nce_from_similarities(&Tensor::filled(&[b, b], c), tau).unwrap();
        assert!((v - (b as f64).ln()).abs() < 1e-9);

        // identical rows give uniform cosine similarities through the graph too
        let row: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..1.0)).collect();
        let same = Tensor::from_rows(&vec![row; b]).unwrap();
        let mut g = Graph::new();
        let p = g.input(same.clone());
        let t = g.input(same);
        let l = predictive_loss(&mut g, p, t, tau).unwrap();
        assert!((g.value(l).item() - (b as f64).ln()).abs() < 1e-9);
    }
}

/// Gamma density with an integer shape, via the factorial.
fn gamma_pdf_int(t: f64, shape: u32) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let fact: f64 = (1..shape).map(f64::from).product();
    t.powi(shape as i32 - 1) * (-t).exp() / fact
}

pub fn hrf_kernel_against_fine_grid() {
    let shape = HrfShape::default();
    let analytic = |t: f64| gamma_pdf_int(t, 6) - gamma_pdf_int(t, 16) / 6.0;
    let grid: Vec<f64> = (0..=32_000).map(|i| i as f64 * 1e-3).collect();
    let fine_peak = grid.iter().cloned().fold((0.0, f64::NEG_INFINITY), |(bt, bv), t| {
        let v = analytic(t);
        if v > bv {
            (t, v)
        } else {
            (bt, bv)
        }
    });
    assert!(fine_peak.0 > 4.5 && fine_peak.0 < 5.0);
    for tr in [0.5, 0.72, 1.0, 1.5, 2.0] {
        let len = (32.0 / tr) as usize;
        let k = HrfKernel::canonical(tr, len).unwrap();
        assert_eq!(k.taps[0], 0.0);
        assert!((k.taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let raw: Vec<f64> = (0..len).map(|i| analytic(i as f64 * tr)).collect();
        let total: f64 = raw.iter().sum();
        for (i, tap) in k.taps.iter().enumerate() {
            assert!((tap - raw[i] / total).abs() < 1e-12);
            assert!((shape.response(i as f64 * tr) - raw[i]).abs() < 1e-12);
        }
        let peak = k.peak_seconds();
        assert!(peak > 3.0 && peak < 8.0);
        assert!((peak - fine_peak.0).abs() < tr, "tr {tr}: {peak}");
    }
}

pub fn recall_against_monte_carlo_chance() {
    let mut r = rng(900);
    let (n, d, k) = (128, 16, 5);
    let trials = 40;
    let mut total = 0.0;
    for _ in 0..trials {
        let q = random(&mut r, n, d);
        let g = random(&mut r, n, d);
        total += recall_at_k(&q, &g, k).unwrap();
    }
    let mean = total / trials as f64;
    let chance = 100.0 * k as f64 / n as f64;
    // binomial standard error of the pooled mean, four sigma
    let p = chance / 100.0;
    let se = 100.0 * (p * (1.0 - p) / (n * trials) as f64).sqrt();
    assert!((mean - chance).abs() < 4.0 * se, "mean {mean} vs chance {chance}");

    let q = random(&mut r, n, d);
    assert_eq!(recall_at_k(&q, &q, 1).unwrap(), 100.0);
    assert_eq!(recall_at_k(&q, &q, n).unwrap(), 100.0);
}

pub fn codebook_entropy_reference() {
    for s in 0..INSTANCES {
        let mut r = rng(1000 + s);
        let k = r.gen_range(2..30);
        let idx: Vec<usize> = (0..r.gen_range(1..200)).map(|_| r.gen_range(0..k)).collect();
        let (usage, ppl) = codebook_stats(&idx, k).unwrap();
        let mut h = vec![0.0; k];
        for &i in &idx {
            h[i] += 1.0;
        }
        let n = idx.len() as f64;
        let ent: f64 = h.iter().filter(|&&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum();
        assert!((ppl - ent.exp()).abs() < 1e-10);
        assert_eq!(usage, h.iter().filter(|&&c| c > 0.0).count() as f64 / k as f64);
        assert!(ppl >= 1.0 - 1e-12 && ppl <= k as f64 + 1e-9);
    }
}
