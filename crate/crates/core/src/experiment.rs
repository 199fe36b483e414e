//! Train-then-evaluate runs and the component ablation grid.

use std::fmt::Write as _;

use crate::config::{Ablation, RunConfig};
use crate::error::Result;
use crate::eval::{full_report, RetrievalReport};
use crate::synth::{split_samples, Split, TripletSample};
use crate::trainer::{TrainState, Trainer};

/// The full model followed by the three single-component ablations.
pub const VARIANTS: [Ablation; 4] = [
    Ablation {
        disable_predictive: false,
        disable_match: false,
        disable_sync: false,
    },
    Ablation {
        disable_predictive: true,
        disable_match: false,
        disable_sync: false,
    },
    Ablation {
        disable_predictive: false,
        disable_match: true,
        disable_sync: false,
    },
    Ablation {
        disable_predictive: false,
        disable_match: false,
        disable_sync: true,
    },
];

/// Trains on the train split of `data` for `cfg.train.total_steps` and reports on the test split.
pub fn train_and_evaluate(cfg: &RunConfig, data: &[TripletSample]) -> Result<(TrainState, RetrievalReport)> {
    let trainer = Trainer::new(cfg.clone(), split_samples(data, Split::Train))?;
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, None)?;
    let report = full_report(&state, cfg, &split_samples(data, Split::Test))?;
    Ok((state, report))
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Ablation,
    pub seed: u64,
    pub report: RetrievalReport,
}

/// Every variant under every seed; `base.train.ablation` is overridden.
pub fn run_ablation(base: &RunConfig, data: &[TripletSample], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in VARIANTS {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.ablation = variant;
            cfg.train.seed = seed;
            let (_, report) = train_and_evaluate(&cfg, data)?;
            rows.push(AblationRow { variant, seed, report });
        }
    }
    Ok(rows)
}

/// Mean F->V R@5 per variant, in [`VARIANTS`] order.
pub fn variant_means(rows: &[AblationRow]) -> Vec<(Ablation, f64)> {
    VARIANTS
        .iter()
        .filter_map(|v| {
            let r: Vec<f64> = rows.iter().filter(|r| r.variant == *v).map(|r| r.report.f_to_v_r5()).collect();
            (!r.is_empty()).then(|| (*v, r.iter().sum::<f64>() / r.len() as f64))
        })
        .collect()
}

/// Comma-separated comparison table: one line per run plus one mean line per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,f_to_v_r5,f_to_v_r10,mean_r5_all_directions,perplexity,usage\n");
    for r in rows {
        let all = r.report.directions.iter().map(|d| d.r5).sum::<f64>() / r.report.directions.len() as f64;
        let fv = r.report.direction(crate::codebook::Modality::Fmri, crate::codebook::Modality::Video);
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.variant.label(),
            r.seed,
            r.report.f_to_v_r5(),
            fv.map_or(f64::NAN, |d| d.r10),
            all,
            r.report.perplexity,
            r.report.usage
        );
    }
    for (v, mean) in variant_means(rows) {
        let _ = writeln!(s, "{},mean,{mean:.4},,,,", v.label());
    }
    s
}
