//! Central-difference checks of every differentiable operation and of the
//! full training objective.

use std::rc::Rc;
use std::time::Instant;

use fvalign::autograd::check_gradients;
use fvalign::codebook::commitment_loss;
use fvalign::config::RunConfig;
use fvalign::encoders::{context_states, dilated_causal_conv, encode_batch, prediction_head, CTX_F2V};
use fvalign::hrf::HrfKernel;
use fvalign::matching::{hrf_operator, match_loss, structural_loss, temporal_loss, TemporalOperand};
use fvalign::predictive::{predictive_bidirectional, predictive_loss};
use fvalign::synth::{generate_dataset, split_samples, Split};
use fvalign::trainer::Trainer;
use fvalign::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Weighted sum with fixed random weights so every output element matters.
fn reduce(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone().reshape(g.shape(v).to_vec())?);
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

fn weights_for(r: &mut ChaCha8Rng, len: usize) -> Tensor {
    Tensor::vector((0..len).map(|_| r.gen_range(-1.0..1.0)).collect())
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore, &Tensor) -> Result<Var> + Sync>;

struct Case {
    name: &'static str,
    params: Vec<(&'static str, usize, usize)>,
    out_len: usize,
    build: Builder,
}

fn case(
    name: &'static str,
    params: &[(&'static str, usize, usize)],
    out_len: usize,
    build: impl Fn(&mut Graph, &ParamStore, &Tensor) -> Result<Var> + Sync + 'static,
) -> Case {
    Case {
        name,
        params: params.to_vec(),
        out_len,
        build: Box::new(build),
    }
}

fn elementary_cases() -> Vec<Case> {
    let p = |g: &mut Graph, s: &ParamStore, n: &str| g.param(s, n);
    vec![
        case("add", &[("a", 3, 4), ("b", 3, 4)], 12, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.add(a, b)?;
            reduce(g, y, w)
        }),
        case("sub", &[("a", 3, 4), ("b", 3, 4)], 12, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.sub(a, b)?;
            reduce(g, y, w)
        }),
        case("mul", &[("a", 3, 4), ("b", 3, 4)], 12, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.mul(a, b)?;
            reduce(g, y, w)
        }),
        case("add_row", &[("a", 3, 4), ("b", 1, 4)], 12, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.add_row(a, b)?;
            reduce(g, y, w)
        }),
        case("scale", &[("a", 2, 5)], 10, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.scale(a, -1.7);
            reduce(g, y, w)
        }),
        case("matmul", &[("a", 3, 4), ("b", 4, 2)], 6, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.matmul(a, b)?;
            reduce(g, y, w)
        }),
        case("matmul_t", &[("a", 3, 4), ("b", 5, 4)], 15, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.matmul_t(a, b)?;
            reduce(g, y, w)
        }),
        case("tanh", &[("a", 3, 3)], 9, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.tanh(a);
            reduce(g, y, w)
        }),
        case("normalize_rows", &[("a", 4, 3)], 12, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.normalize_rows(a);
            reduce(g, y, w)
        }),
        case("square_sum_mean", &[("a", 3, 3)], 1, move |g, s, w| {
            let a = p(g, s, "a")?;
            let sq = g.square(a);
            let m = g.mean(sq);
            let t = g.sum(a);
            let y = g.mul(m, t)?;
            reduce(g, y, w)
        }),
        case("sum_cols", &[("a", 4, 3)], 4, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.sum_cols(a);
            reduce(g, y, w)
        }),
        case("segment_mean", &[("a", 6, 2)], 4, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.segment_mean(a, 3)?;
            reduce(g, y, w)
        }),
        case("gather_rows", &[("a", 4, 3)], 15, move |g, s, w| {
            let a = p(g, s, "a")?;
            let idx: Rc<[Option<usize>]> = vec![Some(2), None, Some(0), Some(2), Some(3)].into();
            let y = g.gather_rows(a, idx)?;
            reduce(g, y, w)
        }),
        case("slice_concat", &[("a", 3, 5), ("b", 3, 2)], 15, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let left = g.slice_cols(a, 1, 3)?;
            let cols = g.concat_cols(&[left, b])?;
            let rows = g.concat_rows(&[cols, cols])?;
            let y = g.reshape(rows, vec![15, 2])?;
            let y = g.slice_cols(y, 0, 1)?;
            reduce(g, y, w)
        }),
        case("softmax_rows", &[("a", 3, 4)], 12, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.softmax_rows(a);
            reduce(g, y, w)
        }),
        case("log_softmax_pick", &[("a", 3, 4)], 3, move |g, s, w| {
            let a = p(g, s, "a")?;
            let y = g.log_softmax_rows(a);
            let y = g.pick(y, vec![1, 3, 0])?;
            reduce(g, y, w)
        }),
        case("cosine_matrix", &[("a", 3, 4), ("b", 2, 4)], 6, move |g, s, w| {
            let (a, b) = (p(g, s, "a")?, p(g, s, "b")?);
            let y = g.cosine_matrix(a, b)?;
            reduce(g, y, w)
        }),
        case("scale_by_elem", &[("a", 3, 2), ("s", 1, 3)], 6, move |g, s, w| {
            let (a, sc) = (p(g, s, "a")?, p(g, s, "s")?);
            let y = g.scale_by_elem(a, sc, 2)?;
            reduce(g, y, w)
        }),
        case("block_attention", &[("q", 6, 2), ("k", 6, 2), ("v", 6, 3)], 18, move |g, s, w| {
            let (q, k, v) = (p(g, s, "q")?, p(g, s, "k")?, p(g, s, "v")?);
            let sc = g.block_matmul_t(q, k, 3)?;
            let at = g.softmax_rows(sc);
            let y = g.block_matmul(at, v, 3)?;
            reduce(g, y, w)
        }),
        case("stop_gradient", &[("a", 2, 3)], 6, move |g, s, w| {
            let a = p(g, s, "a")?;
            let sa = g.stop_gradient(a);
            let y = g.mul(sa, a)?;
            let y = g.tanh(y);
            reduce(g, y, w)
        }),
        case("straight_through", &[("a", 2, 3)], 6, move |g, s, w| {
            let a = p(g, s, "a")?;
            let snapped = g.value(a).map(|x| (x * 2.0).round() / 2.0);
            let z = g.straight_through(a, snapped)?;
            let sq = g.square(z);
            let y = g.mul(sq, a)?;
            reduce(g, y, w)
        }),
    ]
}

fn library_cases() -> Vec<Case> {
    let p = |g: &mut Graph, s: &ParamStore, n: &str| g.param(s, n);
    vec![
        case("hrf_operator", &[("z", 8, 3)], 24, move |g, s, w| {
            let z = p(g, s, "z")?;
            let k = HrfKernel::canonical(1.0, 6)?;
            let y = hrf_operator(g, z, 4, &k)?;
            reduce(g, y, w)
        }),
        case("temporal_loss", &[("z", 10, 3), ("u", 10, 3)], 1, move |g, s, _| {
            let (z, u) = (p(g, s, "z")?, p(g, s, "u")?);
            let k = HrfKernel::canonical(0.8, 8)?;
            temporal_loss(g, &[z, u], 5, &k, TemporalOperand::FilteredHistory)
        }),
        case("structural_match", &[("f0", 4, 3), ("f1", 4, 3), ("v0", 4, 2), ("v1", 4, 2), ("z", 8, 2)], 1, move |g, s, _| {
            let f = [p(g, s, "f0")?, p(g, s, "f1")?];
            let v = [p(g, s, "v0")?, p(g, s, "v1")?];
            let z = p(g, s, "z")?;
            let st = structural_loss(g, &f, &v)?;
            let t = temporal_loss(g, &[z], 4, &HrfKernel::canonical(1.0, 4)?, TemporalOperand::SingleStep)?;
            match_loss(g, t, st, 0.5)
        }),
        case("predictive_loss", &[("p", 5, 4), ("t", 5, 4)], 1, move |g, s, _| {
            let (pr, t) = (p(g, s, "p")?, p(g, s, "t")?);
            predictive_loss(g, pr, t, 0.5)
        }),
        case("commitment", &[("f", 3, 4), ("v", 3, 4), ("t", 3, 4)], 1, move |g, s, _| {
            let feats = [p(g, s, "f")?, p(g, s, "v")?, p(g, s, "t")?];
            let snapped: Vec<Tensor> = feats.iter().map(|&x| g.value(x).map(|v| (v * 3.0).round() / 3.0)).collect();
            let codes: Vec<Var> = snapped.into_iter().map(|t| g.input(t)).collect();
            commitment_loss(g, &feats, &codes, 0.25)
        }),
        case("dilated_conv", &[("x", 10, 3), ("w0", 3, 2), ("w1", 3, 2), ("b", 1, 2)], 20, move |g, s, w| {
            let x = p(g, s, "x")?;
            let ws = [p(g, s, "w0")?, p(g, s, "w1")?];
            let b = p(g, s, "b")?;
            let y = dilated_causal_conv(g, x, 5, &ws, Some(b), 2)?;
            reduce(g, y, w)
        }),
    ]
}

fn run_case(c: &Case, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for &(name, rows, cols) in &c.params {
        store.insert(name, random(&mut r, rows, cols));
    }
    let w = weights_for(&mut r, c.out_len);
    let report = check_gradients(&store, |g, s| (c.build)(g, s, &w)).unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

pub fn every_operation_passes_finite_differences() {
    let start = Instant::now();
    let mut instances = 0;
    for c in elementary_cases().iter().chain(library_cases().iter()) {
        for rep in 0..4 {
            let err = run_case(c, 1000 * instances as u64 + rep);
            assert!(err < TOL, "{}: relative error {err:e}", c.name);
            instances += 1;
        }
    }
    assert!(instances >= 100, "{instances} instances");
    assert!(start.elapsed().as_secs() < 60);
}

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synth.n_train", "6"),
        ("synth.n_test", "2"),
        ("synth.latent_dim", "3"),
        ("synth.d_video", "3"),
        ("synth.d_fmri", "3"),
        ("synth.d_caption", "2"),
        ("synth.t_video", "5"),
        ("synth.t_fmri", "5"),
        ("synth.hrf_length", "6"),
        ("synth.delay_seconds", "2"),
        ("model.d_hidden", "4"),
        ("model.dilations", "1,2"),
        ("model.kernel_size", "2"),
        ("model.heads", "2"),
        ("model.d_ff", "3"),
        ("predictive.offset", "1"),
        ("predictive.temperature", "0.5"),
        ("codebook.size", "5"),
        ("train.batch_size", "3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub fn composed_modules_pass_finite_differences() {
    let cfg = tiny_run_config();
    let enc = cfg.encoder();
    let data = generate_dataset(&cfg.synth).unwrap();
    let train = split_samples(&data, Split::Train);
    for seed in 0..3u64 {
        let trainer = Trainer::new(cfg.clone(), train.clone()).unwrap();
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let trainer_s = Trainer::new(run_cfg, train.clone()).unwrap();
        let state = trainer_s.init_state().unwrap();
        let batch = trainer.batch(&[0, 2, 4]).unwrap();

        let err = check_gradients(&state.params, |g, s| {
            let e = encode_batch(g, s, &enc, &batch)?;
            let ctx = context_states(g, s, &enc, CTX_F2V, e.fmri_seq, enc.t_fmri)?;
            let h = prediction_head(g, s, CTX_F2V, ctx.states)?;
            let n = predictive_bidirectional(g, s, &enc, &cfg.predictive, &e)?;
            let hs = g.square(h);
            let hm = g.mean(hs);
            let a = g.add(n, hm)?;
            let fv = g.cosine_matrix(e.fmri, e.video)?;
            let fv = g.sum(fv);
            let t = g.sum(e.text);
            let b = g.add(fv, t)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(err.max_rel_error < TOL, "modules seed {seed}: {err:?}");

        let total = check_gradients(&state.params, |g, s| Ok(trainer.total_loss(g, s, &state.codebook, &batch)?.total)).unwrap();
        assert!(total.max_rel_error < TOL, "objective seed {seed}: {total:?}");
        assert!(total.checked > 100);
    }
}
