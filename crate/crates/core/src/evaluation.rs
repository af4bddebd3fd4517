//! Zero-shot retrieval and classification metrics.
//!
//! Every query has exactly one relevant gallery item, so average precision
//! reduces to `1 / rank`. Ranks use descending cosine similarity with ties
//! broken toward the lower gallery index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::projector::{normalize_rows, Mode, ProjectorParams};
use crate::rng::rng;
use crate::store::{cosine_similarity, l2_normalize, EmbeddingMatrix};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const CLASSIFICATION_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    pub r_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
    /// Free-form tag such as `query->gallery`.
    pub direction: String,
}

impl RetrievalReport {
    /// True when every metric is bit-for-bit equal.
    pub fn bit_identical(&self, other: &RetrievalReport) -> bool {
        self.map.to_bits() == other.map.to_bits()
            && self.num_queries == other.num_queries
            && self.r_at.len() == other.r_at.len()
            && self
                .r_at
                .iter()
                .zip(&other.r_at)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }

    /// `(metric name, value)` pairs: `map`, then `r@k` in ascending k.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![("map".to_string(), self.map)];
        out.extend(self.r_at.iter().map(|(k, v)| (format!("r@{k}"), *v)));
        out
    }

    /// Metric-wise mean of two reports over the same `k` values.
    pub fn mean_with(&self, other: &RetrievalReport, direction: impl Into<String>) -> RetrievalReport {
        RetrievalReport {
            map: 0.5 * (self.map + other.map),
            r_at: self
                .r_at
                .iter()
                .filter_map(|(k, v)| other.r_at.get(k).map(|w| (*k, 0.5 * (v + w))))
                .collect(),
            num_queries: self.num_queries + other.num_queries,
            direction: direction.into(),
        }
    }
}

/// 1-based rank of each query's relevant item.
pub fn ranks(sims: &Array2<f64>, ground_truth: &[usize]) -> Result<Vec<usize>> {
    if ground_truth.len() != sims.nrows() {
        return Err(Error::Shape(format!(
            "{} ground-truth entries for {} queries",
            ground_truth.len(),
            sims.nrows()
        )));
    }
    let g = sims.ncols();
    ground_truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= g {
                return Err(Error::Invalid(format!(
                    "ground truth {t} for query {q} is out of range for {g} gallery items"
                )));
            }
            let row = sims.row(q);
            let target = row[t];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < t))
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

/// mAP and recall@k from ranks.
pub fn report_from_ranks(ranks: &[usize], ks: &[usize], direction: impl Into<String>) -> RetrievalReport {
    let n = ranks.len() as f64;
    let map = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let r_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    RetrievalReport {
        map,
        r_at,
        num_queries: ranks.len(),
        direction: direction.into(),
    }
}

pub fn retrieval_eval(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    ground_truth: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let sims = cosine_similarity(queries, gallery)?;
    let r = ranks(&sims, ground_truth)?;
    Ok(report_from_ranks(&r, ks, "query->gallery"))
}

pub fn identity_ground_truth(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub acc_at: BTreeMap<usize, f64>,
    pub num_classes: usize,
    pub num_samples: usize,
}

/// Unit-normalized mean of each class's template embeddings.
pub fn class_prototypes(class_templates: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = class_templates
        .first()
        .ok_or_else(|| Error::Invalid("no classes given".into()))?;
    let dim = first.dim();
    let mut rows = Vec::with_capacity(class_templates.len());
    for (c, t) in class_templates.iter().enumerate() {
        if t.dim() != dim {
            return Err(Error::Shape(format!("class {c} templates have dim {}, expected {dim}", t.dim())));
        }
        let mean = t.to_array().mean_axis(ndarray::Axis(0)).expect("matrix has >= 1 row");
        rows.push(mean.iter().map(|&v| v as f32).collect::<Vec<f32>>());
    }
    l2_normalize(&EmbeddingMatrix::from_rows(&rows)?)
}

/// Ranks classes by cosine similarity of each sample to the class
/// prototypes and reports top-k accuracy.
pub fn zero_shot_classify(
    samples: &EmbeddingMatrix,
    class_templates: &[EmbeddingMatrix],
    labels: &[usize],
    ks: &[usize],
) -> Result<ClassificationReport> {
    let protos = class_prototypes(class_templates)?;
    let sims = cosine_similarity(samples, &protos)?;
    let r = ranks(&sims, labels)?;
    let n = r.len() as f64;
    Ok(ClassificationReport {
        acc_at: ks
            .iter()
            .map(|&k| (k, r.iter().filter(|&&x| x <= k).count() as f64 / n))
            .collect(),
        num_classes: class_templates.len(),
        num_samples: samples.rows(),
    })
}

/// Outcome of comparing base-space retrieval before and after training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationReport {
    pub before: RetrievalReport,
    pub after: RetrievalReport,
    pub passed: bool,
    pub differences: Vec<String>,
}

pub fn base_preservation_check(before: &RetrievalReport, after: &RetrievalReport) -> PreservationReport {
    let mut differences = Vec::new();
    let a: BTreeMap<String, f64> = before.metrics().into_iter().collect();
    let b: BTreeMap<String, f64> = after.metrics().into_iter().collect();
    for (name, va) in &a {
        match b.get(name) {
            Some(vb) if vb.to_bits() == va.to_bits() => {}
            Some(vb) => differences.push(format!("{name}: {va} before, {vb} after")),
            None => differences.push(format!("{name}: missing after training")),
        }
    }
    for name in b.keys().filter(|k| !a.contains_key(*k)) {
        differences.push(format!("{name}: missing before training"));
    }
    if before.num_queries != after.num_queries {
        differences.push(format!(
            "num_queries: {} before, {} after",
            before.num_queries, after.num_queries
        ));
    }
    PreservationReport {
        before: before.clone(),
        after: after.clone(),
        passed: differences.is_empty(),
        differences,
    }
}

/// Maps leaf non-overlap embeddings into the base space with `f_m(f_l(x))`
/// in eval mode and unit-normalizes the result.
pub fn project_leaf(pp: &ProjectorParams, leaf: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut eval = pp.clone();
    eval.set_mode(Mode::Eval);
    let raw = eval.raw_nonoverlap(&leaf.to_array())?;
    EmbeddingMatrix::from_array(&normalize_rows(&raw))?.into_normalized()
}

/// Projects leaf embeddings and retrieves against an unprojected base gallery.
pub fn cross_space_eval(
    leaf_inputs: &EmbeddingMatrix,
    pp: &ProjectorParams,
    base_gallery: &EmbeddingMatrix,
    ground_truth: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let projected = project_leaf(pp, leaf_inputs)?;
    retrieval_eval(&projected, base_gallery, ground_truth, ks)
}

/// Mean and standard deviation of mAP under uniformly random rankings,
/// estimated by simulation.
pub fn random_map_baseline(gallery: usize, queries: usize, trials: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed, 0x5eed);
    let maps: Vec<f64> = (0..trials)
        .map(|_| {
            (0..queries)
                .map(|_| 1.0 / r.random_range(1..=gallery) as f64)
                .sum::<f64>()
                / queries as f64
        })
        .collect();
    let n = maps.len() as f64;
    let mean = maps.iter().sum::<f64>() / n;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Expected mAP of a uniformly random ranking: `H_n / n`.
pub fn analytic_random_map(gallery: usize) -> f64 {
    (1..=gallery).map(|k| 1.0 / k as f64).sum::<f64>() / gallery as f64
}

/// One results-file line per metric: `metric<TAB>value<TAB>dataset<TAB>direction`,
/// values printed to four decimals.
pub fn format_report(report: &RetrievalReport, dataset: &str) -> String {
    let mut out = String::new();
    for (name, v) in report.metrics() {
        let _ = writeln!(out, "{name}\t{v:.4}\t{dataset}\t{}", report.direction);
    }
    out
}

pub fn format_classification(report: &ClassificationReport, dataset: &str) -> String {
    let mut out = String::new();
    for (k, v) in &report.acc_at {
        let _ = writeln!(out, "acc@{k}\t{v:.4}\t{dataset}\tclassification");
    }
    out
}
