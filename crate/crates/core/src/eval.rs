//! Cross-modal retrieval evaluation and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{Graph, ParamStore};
use crate::codebook::{codebook_stats, Codebook, Modality};
use crate::config::{EmbeddingSpace, RunConfig};
use crate::encoders::{encode_batch, Batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::synth::TripletSample;
use crate::tensor::{dot, norm, Tensor};
use crate::trainer::TrainState;

/// Published F->V R@5 on the real benchmark, kept in reports for reference only.
pub const PUBLISHED_F_TO_V_R5: f64 = 50.31;

const EVAL_CHUNK: usize = 64;

/// Shared-space embeddings of a sample set, one row per sample in `pair_ids` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub pair_ids: Vec<u64>,
    pub fmri: Tensor,
    pub video: Tensor,
    pub text: Tensor,
    /// Code indices of each modality's rows (always computed).
    pub codes: [Vec<usize>; 3],
}

impl Embeddings {
    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Fmri => &self.fmri,
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }
}

/// Embeds `samples` sorted by pair id.
pub fn embed_samples(
    params: &ParamStore,
    codebook: &Codebook,
    enc: &EncoderConfig,
    samples: &[TripletSample],
    space: EmbeddingSpace,
) -> Result<Embeddings> {
    if samples.is_empty() {
        return Err(Error::config("cannot embed an empty sample set"));
    }
    let mut sorted: Vec<&TripletSample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.pair_id);
    let chunks: Vec<&[&TripletSample]> = sorted.chunks(EVAL_CHUNK).collect();
    let parts = crate::par::map_slice(&chunks, |chunk| -> Result<[Tensor; 3]> {
        let batch = Batch::from_samples(chunk)?;
        let mut g = Graph::new();
        let e = encode_batch(&mut g, params, enc, &batch)?;
        Ok([g.value(e.fmri).clone(), g.value(e.video).clone(), g.value(e.text).clone()])
    });
    let mut rows: [Vec<f64>; 3] = Default::default();
    for p in parts {
        let p = p?;
        for m in 0..3 {
            rows[m].extend_from_slice(p[m].data());
        }
    }
    let n = sorted.len();
    let d = enc.d_hidden;
    let mut out = rows.map(|r| Tensor::matrix(n, d, r));
    let mut codes: [Vec<usize>; 3] = Default::default();
    for m in 0..3 {
        let a = codebook.quantize(&out[m])?;
        if space == EmbeddingSpace::Quantized {
            out[m] = a.quantized;
        }
        codes[m] = a.indices;
    }
    let [fmri, video, text] = out;
    Ok(Embeddings {
        pair_ids: sorted.iter().map(|s| s.pair_id).collect(),
        fmri,
        video,
        text,
        codes,
    })
}

pub fn embed_test_set(
    state: &TrainState,
    cfg: &RunConfig,
    samples: &[TripletSample],
    space: EmbeddingSpace,
) -> Result<Embeddings> {
    embed_samples(&state.params, &state.codebook, &cfg.encoder(), samples, space)
}

/// Percentage of queries whose aligned gallery row ranks within the top `k`
/// by cosine similarity; ties rank the smaller gallery index first.
pub fn recall_at_k(queries: &Tensor, gallery: &Tensor, k: usize) -> Result<f64> {
    let (n, d) = queries.dims2();
    if gallery.dims2() != (n, d) {
        return Err(Error::shape("recall_at_k", "queries", queries.shape(), "gallery", gallery.shape()));
    }
    if n == 0 {
        return Err(Error::config("recall needs at least one query"));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("k = {k} must lie in 1..={n}")));
    }
    let gnorm: Vec<f64> = (0..n).map(|j| norm(gallery.row(j))).collect();
    let hits = crate::par::map_indexed(n, |i| {
        let q = queries.row(i);
        let qn = norm(q);
        let sim = |j: usize| dot(q, gallery.row(j)) / (qn * gnorm[j]).max(crate::autograd::COS_EPS);
        let own = sim(i);
        let ahead = (0..n).filter(|&j| j != i).filter(|&j| {
            let s = sim(j);
            s > own || (s == own && j < i)
        });
        ahead.take(k).count() < k
    });
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionRecall {
    pub query: Modality,
    pub gallery: Modality,
    pub r5: f64,
    pub r10: f64,
}

impl DirectionRecall {
    pub fn label(&self) -> String {
        format!("{}->{}", self.query.short(), self.gallery.short())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub directions: Vec<DirectionRecall>,
    pub n_queries: usize,
    pub usage: f64,
    pub perplexity: f64,
    pub fingerprint: String,
    pub embedding_space: EmbeddingSpace,
    pub step: u64,
}

pub const DIRECTIONS: [(Modality, Modality); 6] = [
    (Modality::Fmri, Modality::Video),
    (Modality::Fmri, Modality::Text),
    (Modality::Video, Modality::Fmri),
    (Modality::Video, Modality::Text),
    (Modality::Text, Modality::Fmri),
    (Modality::Text, Modality::Video),
];

impl RetrievalReport {
    pub fn direction(&self, q: Modality, g: Modality) -> Option<&DirectionRecall> {
        self.directions.iter().find(|d| d.query == q && d.gallery == g)
    }

    pub fn f_to_v_r5(&self) -> f64 {
        self.direction(Modality::Fmri, Modality::Video).map_or(f64::NAN, |d| d.r5)
    }

    /// Max minus min R@5 over the six directions.
    pub fn r5_spread(&self) -> f64 {
        let r: Vec<f64> = self.directions.iter().map(|d| d.r5).collect();
        r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_fingerprint = {}", self.fingerprint);
        let _ = writeln!(s, "embedding_space = {}", self.embedding_space.as_str());
        let _ = writeln!(s, "step = {}", self.step);
        let _ = writeln!(s, "n_queries = {}", self.n_queries);
        for d in &self.directions {
            let _ = writeln!(s, "recall.{}.r5 = {:.4}", d.label(), d.r5);
            let _ = writeln!(s, "recall.{}.r10 = {:.4}", d.label(), d.r10);
        }
        let _ = writeln!(s, "recall.r5_spread = {:.4}", self.r5_spread());
        let _ = writeln!(s, "codebook.usage = {:.6}", self.usage);
        let _ = writeln!(s, "codebook.perplexity = {:.6}", self.perplexity);
        let _ = writeln!(s, "reference.published_f_to_v_r5 = {PUBLISHED_F_TO_V_R5}");
        s
    }
}

/// All six directional recalls from one embedding of the set.
pub fn report_from_embeddings(e: &Embeddings, codebook_size: usize, fingerprint: String, space: EmbeddingSpace, step: u64) -> Result<RetrievalReport> {
    let n = e.pair_ids.len();
    let mut directions = Vec::with_capacity(6);
    for (q, g) in DIRECTIONS {
        let (qm, gm) = (e.get(q), e.get(g));
        directions.push(DirectionRecall {
            query: q,
            gallery: g,
            r5: recall_at_k(qm, gm, 5.min(n))?,
            r10: recall_at_k(qm, gm, 10.min(n))?,
        });
    }
    let all: Vec<usize> = e.codes.iter().flatten().copied().collect();
    let (usage, perplexity) = codebook_stats(&all, codebook_size)?;
    Ok(RetrievalReport {
        directions,
        n_queries: n,
        usage,
        perplexity,
        fingerprint,
        embedding_space: space,
        step,
    })
}

pub fn full_report(state: &TrainState, cfg: &RunConfig, test: &[TripletSample]) -> Result<RetrievalReport> {
    let e = embed_test_set(state, cfg, test, cfg.embedding_space)?;
    report_from_embeddings(&e, state.codebook.size(), cfg.fingerprint(), cfg.embedding_space, state.step)
}

pub fn write_report(report: &RetrievalReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, report.to_text())?;
    Ok(())
}

pub fn embeddings_csv(e: &Embeddings) -> String {
    let d = e.fmri.cols();
    let mut s = String::from("pair_id,modality");
    for j in 0..d {
        let _ = write!(s, ",e{j}");
    }
    s.push('\n');
    for m in Modality::ALL {
        let t = e.get(m);
        for (i, id) in e.pair_ids.iter().enumerate() {
            let _ = write!(s, "{id},{}", m.name());
            for &v in t.row(i) {
                let _ = write!(s, ",{}", v as f32);
            }
            s.push('\n');
        }
    }
    s
}

pub fn export_embeddings(e: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, embeddings_csv(e))?;
    Ok(())
}

/// Reads an export back as `(pair_id, modality name, values)` rows.
pub fn parse_embeddings_csv(text: &str) -> Result<Vec<(u64, String, Vec<f32>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(0, "empty embedding file"))?;
    let width = header.split(',').count();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::format(n as u64 + 1, "malformed embedding row");
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(bad());
        }
        let id = cells[0].parse().map_err(|_| bad())?;
        let vals = cells[2..].iter().map(|c| c.parse::<f32>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        out.push((id, cells[1].to_string(), vals));
    }
    Ok(out)
}
