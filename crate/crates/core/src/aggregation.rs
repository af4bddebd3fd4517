//! Pseudo-pair construction across a leaf space and a base space.
//!
//! Each [`PseudoQuadruple`] holds four semantically consistent vectors: the
//! leaf's non-overlapping modality, the leaf's overlapping modality, the
//! base's overlapping modality and the base's non-overlapping modality. They
//! are built by softmax-weighted retrieval over unpaired galleries, with one
//! of three modalities acting as the query.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::codec::{put_u32, Reader};
use crate::error::{Error, Result};
use crate::rng::{rng, streams};
use crate::store::{read_emb1_block, write_emb1, EmbeddingMatrix};

pub const PQD1_MAGIC: &[u8; 4] = b"PQD1";
pub const PQD1_VERSION: u32 = 1;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationConfig {
    pub tau1: f64,
    pub noise_variance: f64,
    pub renormalize_after_aggregation: bool,
    pub renormalize_after_noise: bool,
    pub seed: u64,
    /// Keep only the `k` largest softmax weights. `None` uses the whole gallery.
    pub top_k: Option<usize>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            tau1: 0.01,
            noise_variance: 0.004,
            renormalize_after_aggregation: true,
            renormalize_after_noise: true,
            seed: 0,
            top_k: None,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return Err(Error::Invalid(format!("tau1 must be > 0, got {}", self.tau1)));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise_variance must be >= 0, got {}",
                self.noise_variance
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Invalid("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which modality served as the query when a quadruple was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Centricity {
    Overlap,
    LeafNonoverlap,
    BaseNonoverlap,
}

impl Centricity {
    pub const ALL: [Centricity; 3] = [
        Centricity::Overlap,
        Centricity::LeafNonoverlap,
        Centricity::BaseNonoverlap,
    ];

    pub fn code(self) -> u8 {
        match self {
            Centricity::Overlap => 0,
            Centricity::LeafNonoverlap => 1,
            Centricity::BaseNonoverlap => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Centricity::Overlap),
            1 => Ok(Centricity::LeafNonoverlap),
            2 => Ok(Centricity::BaseNonoverlap),
            c => Err(Error::Invalid(format!("unknown centricity code {c}"))),
        }
    }

    /// Short name used on the command line: `overlap`, `leaf` or `base`.
    pub fn name(self) -> &'static str {
        match self {
            Centricity::Overlap => "overlap",
            Centricity::LeafNonoverlap => "leaf",
            Centricity::BaseNonoverlap => "base",
        }
    }
}

impl std::str::FromStr for Centricity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "overlap" => Ok(Centricity::Overlap),
            "leaf" | "leaf_nonoverlap" => Ok(Centricity::LeafNonoverlap),
            "base" | "base_nonoverlap" => Ok(Centricity::BaseNonoverlap),
            other => Err(Error::Invalid(format!(
                "unknown centricity {other:?} (expected overlap, leaf or base)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoQuadruple {
    pub leaf_nonoverlap: Vec<f32>,
    pub leaf_overlap: Vec<f32>,
    pub base_overlap: Vec<f32>,
    pub base_nonoverlap: Vec<f32>,
    pub centricity: Centricity,
}

impl PseudoQuadruple {
    fn members_mut(&mut self) -> [&mut Vec<f32>; 4] {
        [
            &mut self.leaf_nonoverlap,
            &mut self.leaf_overlap,
            &mut self.base_overlap,
            &mut self.base_nonoverlap,
        ]
    }
}

/// Softmax over `query . gallery_j / tau1`, then the weighted sum of rows.
/// Returns `(aggregated vector, weights)`.
pub fn softmax_weighted_aggregate(
    query: &[f64],
    gallery: &EmbeddingMatrix,
    tau1: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    gallery.require_normalized("gallery")?;
    if query.len() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dim {} != gallery dim {}",
            query.len(),
            gallery.dim()
        )));
    }
    if !(tau1 > 0.0) {
        return Err(Error::Invalid(format!("tau1 must be > 0, got {tau1}")));
    }
    let g = gallery.to_array();
    Ok(aggregate_view(ArrayView1::from(query), g.view(), tau1, None))
}

fn aggregate_view(
    query: ArrayView1<'_, f64>,
    gallery: ArrayView2<'_, f64>,
    tau1: f64,
    top_k: Option<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let logits = gallery.dot(&query).mapv(|s| s / tau1);
    let weights = softmax_top_k(logits.as_slice().expect("contiguous"), top_k);
    let out = gallery.t().dot(&ArrayView1::from(&weights[..]));
    (out.to_vec(), weights)
}

fn softmax_top_k(logits: &[f64], top_k: Option<usize>) -> Vec<f64> {
    let keep: Option<Vec<bool>> = top_k.filter(|&k| k < logits.len()).map(|k| {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        // descending logit, ties by lower index
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let mut mask = vec![false; logits.len()];
        for &i in &order[..k] {
            mask[i] = true;
        }
        mask
    });
    let kept = |i: usize| keep.as_ref().is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| kept(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if kept(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Reuses retrieval weights computed in one space to average the
/// one-to-one matched rows of another space.
pub fn transfer_weights_aggregate(
    weights: &[f64],
    paired_gallery: &EmbeddingMatrix,
) -> Result<Vec<f64>> {
    if weights.len() != paired_gallery.rows() {
        return Err(Error::Shape(format!(
            "{} weights for a gallery of {} rows",
            weights.len(),
            paired_gallery.rows()
        )));
    }
    check_simplex(weights)?;
    Ok(paired_gallery
        .to_array()
        .t()
        .dot(&ArrayView1::from(weights))
        .to_vec())
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if let Some(i) = weights.iter().position(|&w| !(w >= 0.0)) {
        return Err(Error::Invalid(format!(
            "weight {i} is negative or NaN: {}",
            weights[i]
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Invalid(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < crate::store::MIN_ROW_NORM {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn dense(m: &EmbeddingMatrix, what: &str) -> Result<Array2<f64>> {
    m.require_normalized(what)?;
    Ok(m.to_array())
}

fn check_dims(mats: &[(&EmbeddingMatrix, &str)]) -> Result<()> {
    let d = mats[0].0.dim();
    for (m, name) in mats {
        if m.dim() != d {
            return Err(Error::Shape(format!("{name} has dim {}, expected {d}", m.dim())));
        }
    }
    Ok(())
}

fn check_matched(overlap_leaf: &EmbeddingMatrix, overlap_base: &EmbeddingMatrix) -> Result<()> {
    if overlap_leaf.rows() != overlap_base.rows() {
        return Err(Error::Shape(format!(
            "overlap matrices must be row-matched: leaf has {} rows, base has {}",
            overlap_leaf.rows(),
            overlap_base.rows()
        )));
    }
    Ok(())
}

/// Overlap-centric quadruples: each matched overlap pair is the query in its
/// own space and retrieves a pseudo non-overlap partner there.
pub fn generate_overlap_centric(
    overlap_leaf: &EmbeddingMatrix,
    overlap_base: &EmbeddingMatrix,
    nonoverlap_leaf_gallery: &EmbeddingMatrix,
    nonoverlap_base_gallery: &EmbeddingMatrix,
    cfg: &AggregationConfig,
) -> Result<Vec<PseudoQuadruple>> {
    cfg.validate()?;
    check_matched(overlap_leaf, overlap_base)?;
    check_dims(&[
        (overlap_leaf, "leaf overlap"),
        (nonoverlap_leaf_gallery, "leaf non-overlap gallery"),
    ])?;
    check_dims(&[
        (overlap_base, "base overlap"),
        (nonoverlap_base_gallery, "base non-overlap gallery"),
    ])?;
    let tl = dense(overlap_leaf, "leaf overlap")?;
    let tb = dense(overlap_base, "base overlap")?;
    let al = dense(nonoverlap_leaf_gallery, "leaf non-overlap gallery")?;
    let vb = dense(nonoverlap_base_gallery, "base non-overlap gallery")?;

    let finish = |v: Vec<f64>| {
        if cfg.renormalize_after_aggregation {
            unit(v)
        } else {
            v
        }
    };
    let mut out = Vec::with_capacity(tl.nrows());
    for i in 0..tl.nrows() {
        let (a, _) = aggregate_view(tl.row(i), al.view(), cfg.tau1, cfg.top_k);
        let (v, _) = aggregate_view(tb.row(i), vb.view(), cfg.tau1, cfg.top_k);
        out.push(PseudoQuadruple {
            leaf_nonoverlap: to_f32(&finish(a)),
            leaf_overlap: overlap_leaf.row(i).to_vec(),
            base_overlap: overlap_base.row(i).to_vec(),
            base_nonoverlap: to_f32(&finish(v)),
            centricity: Centricity::Overlap,
        });
    }
    Ok(out)
}

/// The space a non-overlap query comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySide {
    Leaf,
    Base,
}

/// Non-overlap-centric quadruples. For [`QuerySide::Leaf`] each query is a
/// leaf non-overlap embedding: its retrieval weights over the leaf overlap
/// gallery are transferred to the matched base overlap gallery, and the
/// resulting base overlap vector retrieves a base non-overlap partner.
/// [`QuerySide::Base`] is the mirror image with the spaces exchanged.
///
/// `nonoverlap_other_gallery` is the non-overlap gallery of the space the
/// query does not come from.
pub fn generate_nonoverlap_centric(
    queries: &EmbeddingMatrix,
    side: QuerySide,
    overlap_leaf: &EmbeddingMatrix,
    overlap_base: &EmbeddingMatrix,
    nonoverlap_other_gallery: &EmbeddingMatrix,
    cfg: &AggregationConfig,
) -> Result<Vec<PseudoQuadruple>> {
    cfg.validate()?;
    check_matched(overlap_leaf, overlap_base)?;
    let (same, other) = match side {
        QuerySide::Leaf => (overlap_leaf, overlap_base),
        QuerySide::Base => (overlap_base, overlap_leaf),
    };
    check_dims(&[(queries, "queries"), (same, "same-space overlap gallery")])?;
    check_dims(&[
        (other, "other-space overlap gallery"),
        (nonoverlap_other_gallery, "other-space non-overlap gallery"),
    ])?;
    queries.require_normalized("queries")?;
    let same_g = dense(same, "same-space overlap gallery")?;
    let other_g = dense(other, "other-space overlap gallery")?;
    let far_g = dense(nonoverlap_other_gallery, "other-space non-overlap gallery")?;

    let finish = |v: Vec<f64>| {
        if cfg.renormalize_after_aggregation {
            unit(v)
        } else {
            v
        }
    };
    let mut out = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        let q = queries.row_f64(i);
        let (near_overlap, w) = aggregate_view(ArrayView1::from(&q[..]), same_g.view(), cfg.tau1, cfg.top_k);
        let near_overlap = finish(near_overlap);
        let far_overlap = finish(other_g.t().dot(&ArrayView1::from(&w[..])).to_vec());
        let (far_nonoverlap, _) =
            aggregate_view(ArrayView1::from(&far_overlap[..]), far_g.view(), cfg.tau1, cfg.top_k);
        let far_nonoverlap = finish(far_nonoverlap);
        let query = queries.row(i).to_vec();
        out.push(match side {
            QuerySide::Leaf => PseudoQuadruple {
                leaf_nonoverlap: query,
                leaf_overlap: to_f32(&near_overlap),
                base_overlap: to_f32(&far_overlap),
                base_nonoverlap: to_f32(&far_nonoverlap),
                centricity: Centricity::LeafNonoverlap,
            },
            QuerySide::Base => PseudoQuadruple {
                leaf_nonoverlap: to_f32(&far_nonoverlap),
                leaf_overlap: to_f32(&far_overlap),
                base_overlap: to_f32(&near_overlap),
                base_nonoverlap: query,
                centricity: Centricity::BaseNonoverlap,
            },
        });
    }
    Ok(out)
}

/// Concatenates the per-centricity lists and applies a seeded shuffle.
pub fn build_training_set(
    lists: Vec<Vec<PseudoQuadruple>>,
    cfg: &AggregationConfig,
) -> Result<Vec<PseudoQuadruple>> {
    let mut all: Vec<PseudoQuadruple> = lists.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Invalid("no pseudo quadruples to train on".into()));
    }
    all.shuffle(&mut rng(cfg.seed, streams::SHUFFLE));
    Ok(all)
}

/// Adds i.i.d. zero-mean Gaussian noise with the given variance to every
/// component of all four members, optionally re-normalizing afterwards.
pub fn add_gaussian_noise(
    quadruples: Vec<PseudoQuadruple>,
    variance: f64,
    seed: u64,
    renormalize: bool,
) -> Result<Vec<PseudoQuadruple>> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Invalid(format!("noise variance must be >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(quadruples);
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut r = rng(seed, streams::NOISE);
    let mut out = quadruples;
    for q in &mut out {
        for member in q.members_mut() {
            let noisy: Vec<f64> = member
                .iter()
                .map(|&v| v as f64 + normal.sample(&mut r))
                .collect();
            let noisy = if renormalize { unit(noisy) } else { noisy };
            *member = to_f32(&noisy);
        }
    }
    Ok(out)
}

/// Embedding sets needed to build pseudo-pairs for one leaf extension.
#[derive(Debug, Clone, Copy)]
pub struct AggregationInputs<'a> {
    pub overlap_leaf: &'a EmbeddingMatrix,
    pub overlap_base: &'a EmbeddingMatrix,
    pub nonoverlap_leaf: &'a EmbeddingMatrix,
    pub nonoverlap_base: &'a EmbeddingMatrix,
}

/// Runs the selected centricities, shuffles the union and applies noise.
pub fn aggregate(
    inputs: AggregationInputs<'_>,
    centricities: &[Centricity],
    cfg: &AggregationConfig,
) -> Result<Vec<PseudoQuadruple>> {
    let mut lists = Vec::new();
    for c in Centricity::ALL {
        if !centricities.contains(&c) {
            continue;
        }
        lists.push(match c {
            Centricity::Overlap => generate_overlap_centric(
                inputs.overlap_leaf,
                inputs.overlap_base,
                inputs.nonoverlap_leaf,
                inputs.nonoverlap_base,
                cfg,
            )?,
            Centricity::LeafNonoverlap => generate_nonoverlap_centric(
                inputs.nonoverlap_leaf,
                QuerySide::Leaf,
                inputs.overlap_leaf,
                inputs.overlap_base,
                inputs.nonoverlap_base,
                cfg,
            )?,
            Centricity::BaseNonoverlap => generate_nonoverlap_centric(
                inputs.nonoverlap_base,
                QuerySide::Base,
                inputs.overlap_leaf,
                inputs.overlap_base,
                inputs.nonoverlap_leaf,
                cfg,
            )?,
        });
    }
    let set = build_training_set(lists, cfg)?;
    add_gaussian_noise(set, cfg.noise_variance, cfg.seed, cfg.renormalize_after_noise)
}

pub fn count_by_centricity(quads: &[PseudoQuadruple]) -> [usize; 3] {
    let mut counts = [0; 3];
    for q in quads {
        counts[q.centricity.code() as usize] += 1;
    }
    counts
}

/// Encodes a quadruple set as a PQD1 container:
/// `"PQD1" | version u32 | count u32 | 4 EMB1 blocks | count centricity bytes`.
/// Blocks are in member order: leaf non-overlap, leaf overlap, base overlap,
/// base non-overlap.
pub fn encode_pqd1(quads: &[PseudoQuadruple]) -> Result<Vec<u8>> {
    let first = quads
        .first()
        .ok_or_else(|| Error::Invalid("cannot encode an empty quadruple set".into()))?;
    let leaf_dim = first.leaf_nonoverlap.len();
    let base_dim = first.base_overlap.len();
    let mut out = Vec::new();
    out.extend_from_slice(PQD1_MAGIC);
    put_u32(&mut out, PQD1_VERSION);
    put_u32(&mut out, crate::codec::to_u32(quads.len(), "count")?);
    type Member = fn(&PseudoQuadruple) -> &Vec<f32>;
    let getters: [(Member, usize); 4] = [
        (|q| &q.leaf_nonoverlap, leaf_dim),
        (|q| &q.leaf_overlap, leaf_dim),
        (|q| &q.base_overlap, base_dim),
        (|q| &q.base_nonoverlap, base_dim),
    ];
    for (get, dim) in getters {
        let mut data = Vec::with_capacity(quads.len() * dim);
        for q in quads {
            let v = get(q);
            if v.len() != dim {
                return Err(Error::Shape("quadruple members have inconsistent dims".into()));
            }
            data.extend_from_slice(v);
        }
        write_emb1(&mut out, &EmbeddingMatrix::new(quads.len(), dim, data)?)?;
    }
    out.extend(quads.iter().map(|q| q.centricity.code()));
    Ok(out)
}

pub fn decode_pqd1(bytes: &[u8]) -> Result<Vec<PseudoQuadruple>> {
    let mut r = Reader::new(bytes);
    r.magic(PQD1_MAGIC)?;
    let version = r.u32()?;
    if version != PQD1_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(4);
    for i in 0..4 {
        let m = read_emb1_block(&mut r)?;
        if m.rows() != count {
            return Err(Error::Shape(format!(
                "PQD1 block {i} has {} rows, header says {count}",
                m.rows()
            )));
        }
        blocks.push(m);
    }
    if blocks[0].dim() != blocks[1].dim() || blocks[2].dim() != blocks[3].dim() {
        return Err(Error::Shape("PQD1 blocks of one space disagree on dim".into()));
    }
    let codes = r.take(count)?;
    if r.remaining() != 0 {
        return Err(Error::PayloadLength {
            expected: r.position(),
            found: bytes.len(),
        });
    }
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Ok(PseudoQuadruple {
                leaf_nonoverlap: blocks[0].row(i).to_vec(),
                leaf_overlap: blocks[1].row(i).to_vec(),
                base_overlap: blocks[2].row(i).to_vec(),
                base_nonoverlap: blocks[3].row(i).to_vec(),
                centricity: Centricity::from_code(c)?,
            })
        })
        .collect()
}
