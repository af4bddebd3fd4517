//! Synthetic multi-space worlds with known cross-modal correspondence.
//!
//! Every item has one latent vector on the unit sphere. Each space views the
//! latents through its own random orthogonal frame, and each modality adds a
//! fixed offset (the modality gap) plus isotropic noise before normalizing.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{put_f32, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::evaluation::{identity_ground_truth, retrieval_eval, RetrievalReport, DEFAULT_KS};
use crate::rng::{derive_seed, rng, streams};
use crate::store::{save_embeddings, EmbeddingMatrix, SpaceManifest};

pub const GT1_MAGIC: &[u8; 4] = b"GT1\0";

pub const BASE_SPACE: &str = "synth-base";
pub const LEAF1_SPACE: &str = "synth-leaf1";
pub const LEAF2_SPACE: &str = "synth-leaf2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub id: String,
    pub modalities: Vec<String>,
}

impl SpaceSpec {
    pub fn new(id: &str, modalities: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            modalities: modalities.iter().map(|m| m.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthWorldConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub n_items: usize,
    pub modality_gap_magnitude: f64,
    pub observation_noise_sigma: f64,
    pub spaces: Vec<SpaceSpec>,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            embed_dim: 32,
            n_items: 2000,
            modality_gap_magnitude: 0.5,
            observation_noise_sigma: 0.02,
            spaces: four_modality_spaces(),
            seed: 0,
        }
    }
}

/// Base (text, image), leaf1 (text, audio), leaf2 (image, pointcloud).
pub fn four_modality_spaces() -> Vec<SpaceSpec> {
    vec![
        SpaceSpec::new(BASE_SPACE, &["text", "image"]),
        SpaceSpec::new(LEAF1_SPACE, &["text", "audio"]),
        SpaceSpec::new(LEAF2_SPACE, &["image", "pointcloud"]),
    ]
}

/// Base (text, image) and a single leaf (text, audio).
pub fn two_space_spaces() -> Vec<SpaceSpec> {
    four_modality_spaces().into_iter().take(2).collect()
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_items == 0 {
            return Err(Error::Invalid("latent_dim and n_items must be at least 1".into()));
        }
        if self.embed_dim < self.latent_dim {
            return Err(Error::Invalid(format!(
                "embed_dim {} is smaller than latent_dim {}",
                self.embed_dim, self.latent_dim
            )));
        }
        for (name, v) in [
            ("modality_gap_magnitude", self.modality_gap_magnitude),
            ("observation_noise_sigma", self.observation_noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.spaces.is_empty() {
            return Err(Error::Invalid("world needs at least one space".into()));
        }
        for (i, s) in self.spaces.iter().enumerate() {
            if s.id.is_empty() || s.modalities.is_empty() {
                return Err(Error::Invalid(format!("space {i} needs an id and at least one modality")));
            }
            if self.spaces[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Invalid(format!("duplicate space id {:?}", s.id)));
            }
            for (j, m) in s.modalities.iter().enumerate() {
                if s.modalities[..j].contains(m) {
                    return Err(Error::Invalid(format!("duplicate modality {m:?} in space {:?}", s.id)));
                }
            }
        }
        Ok(())
    }
}

/// Item latents, row `i` belonging to item `i` in every embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub n_items: usize,
    pub latent_dim: usize,
    pub latents: Vec<f32>,
}

impl GroundTruth {
    pub fn latent(&self, i: usize) -> &[f32] {
        &self.latents[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn slice_items(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.n_items {
            return Err(Error::Invalid(format!("item range {range:?} outside 0..{}", self.n_items)));
        }
        Ok(Self {
            n_items: range.len(),
            latent_dim: self.latent_dim,
            latents: self.latents[range.start * self.latent_dim..range.end * self.latent_dim].to_vec(),
        })
    }
}

/// GT1: magic | n_items u32 | latent_dim u32 | f32 latents, little-endian.
pub fn encode_gt1(gt: &GroundTruth) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * gt.latents.len());
    out.extend_from_slice(GT1_MAGIC);
    put_u32(&mut out, to_u32(gt.n_items, "n_items")?);
    put_u32(&mut out, to_u32(gt.latent_dim, "latent_dim")?);
    for &v in &gt.latents {
        put_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_gt1(bytes: &[u8]) -> Result<GroundTruth> {
    let mut r = Reader::new(bytes);
    r.magic(GT1_MAGIC)?;
    let n_items = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let count = n_items
        .checked_mul(latent_dim)
        .ok_or_else(|| Error::Invalid("GT1 shape overflows".into()))?;
    let expected = count.saturating_mul(4);
    if r.remaining() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: r.remaining(),
        });
    }
    let latents = r.f32_vec(count)?;
    if let Some(i) = latents.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / latent_dim.max(1),
            col: i % latent_dim.max(1),
        });
    }
    Ok(GroundTruth {
        n_items,
        latent_dim,
        latents,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthModality {
    pub name: String,
    pub gap_offset: Array1<f64>,
    pub embeddings: EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpace {
    pub id: String,
    /// `embed_dim x latent_dim`, orthonormal columns.
    pub frame: Array2<f64>,
    pub modalities: Vec<SynthModality>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: SynthWorldConfig,
    pub spaces: Vec<SynthSpace>,
    pub ground_truth: GroundTruth,
}

impl SynthWorld {
    pub fn space(&self, id: &str) -> Result<&SynthSpace> {
        self.spaces
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Invalid(format!("unknown space {id:?}")))
    }

    pub fn embeddings(&self, space: &str, modality: &str) -> Result<&EmbeddingMatrix> {
        self.space(space)?
            .modalities
            .iter()
            .find(|m| m.name == modality)
            .map(|m| &m.embeddings)
            .ok_or_else(|| Error::Invalid(format!("unknown modality {modality:?} in space {space:?}")))
    }

    /// The same world restricted to items in `range`, renumbered from 0.
    pub fn slice_items(&self, range: std::ops::Range<usize>) -> Result<SynthWorld> {
        let ground_truth = self.ground_truth.slice_items(range.clone())?;
        let spaces = self
            .spaces
            .iter()
            .map(|s| {
                Ok(SynthSpace {
                    id: s.id.clone(),
                    frame: s.frame.clone(),
                    modalities: s
                        .modalities
                        .iter()
                        .map(|m| {
                            Ok(SynthModality {
                                name: m.name.clone(),
                                gap_offset: m.gap_offset.clone(),
                                embeddings: m.embeddings.slice_rows(range.clone())?,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let mut config = self.config.clone();
        config.n_items = ground_truth.n_items;
        Ok(SynthWorld {
            config,
            spaces,
            ground_truth,
        })
    }

    /// Writes `<space>_<modality><suffix>.emb` with manifests for every set
    /// and `ground_truth<suffix>.gt1`. Returns the written paths.
    pub fn write(&self, dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for s in &self.spaces {
            for m in &s.modalities {
                let path = dir.join(format!("{}_{}{suffix}.emb", s.id, m.name));
                let manifest = SpaceManifest::for_matrix(
                    &s.id,
                    &m.name,
                    &m.embeddings,
                    format!("synthetic world, seed {}", self.config.seed),
                );
                save_embeddings(&m.embeddings, &manifest, &path)?;
                written.push(path);
            }
        }
        let gt_path = dir.join(format!("ground_truth{suffix}.gt1"));
        std::fs::write(&gt_path, encode_gt1(&self.ground_truth)?).map_err(|e| Error::io(&gt_path, e))?;
        written.push(gt_path);
        Ok(written)
    }
}

fn gaussian_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_or_axis(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    }
    v
}

/// Unit direction for a modality offset. When the frame leaves room, the
/// draw is projected off the frame's columns so the offset never mixes with
/// item content and every item sees the same gap.
fn gap_direction(frame: &Array2<f64>, draw: Vec<f64>) -> Array1<f64> {
    let mut v = Array1::from(draw);
    if frame.ncols() < frame.nrows() {
        let coeffs = frame.t().dot(&v);
        v -= &frame.dot(&coeffs);
    }
    Array1::from(unit_or_axis(v.to_vec()))
}

/// Gaussian matrix orthonormalized column by column (modified Gram-Schmidt).
fn random_frame(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((rows, cols));
    let mut j = 0;
    while j < cols {
        let mut v = Array1::from(gaussian_vec(r, rows));
        for k in 0..j {
            let p = q.column(k).dot(&v);
            v.scaled_add(-p, &q.column(k));
        }
        let n = v.dot(&v).sqrt();
        // a near-dependent draw is simply redrawn
        if n < 1e-8 {
            continue;
        }
        q.column_mut(j).assign(&(v / n));
        j += 1;
    }
    q
}

const LATENT_STREAM: u64 = 0;
const FRAME_STREAM: u64 = 1 << 16;
const MODALITY_STREAM: u64 = 2 << 16;

pub fn generate_world(cfg: &SynthWorldConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let root = derive_seed(cfg.seed, streams::SYNTH);
    let (n, l, d) = (cfg.n_items, cfg.latent_dim, cfg.embed_dim);

    let mut lr = rng(root, LATENT_STREAM);
    let mut latents = Array2::<f64>::zeros((n, l));
    for mut row in latents.rows_mut() {
        row.assign(&Array1::from(unit_or_axis(gaussian_vec(&mut lr, l))));
    }

    let mut spaces = Vec::with_capacity(cfg.spaces.len());
    for (si, spec) in cfg.spaces.iter().enumerate() {
        let frame = random_frame(&mut rng(root, FRAME_STREAM + si as u64), d, l);
        let clean = latents.dot(&frame.t());
        let mut modalities = Vec::with_capacity(spec.modalities.len());
        for (mi, name) in spec.modalities.iter().enumerate() {
            let mut mr = rng(root, MODALITY_STREAM + ((si as u64) << 8) + mi as u64);
            let gap_offset = gap_direction(&frame, gaussian_vec(&mut mr, d)) * cfg.modality_gap_magnitude;
            let mut x = &clean + &gap_offset;
            if cfg.observation_noise_sigma > 0.0 {
                x.iter_mut()
                    .for_each(|v| *v += cfg.observation_noise_sigma * mr.sample::<f64, _>(StandardNormal));
            }
            for mut row in x.rows_mut() {
                let norm = row.dot(&row).sqrt().max(1e-12);
                row /= norm;
            }
            let embeddings = EmbeddingMatrix::from_array(&x)?.into_normalized()?;
            modalities.push(SynthModality {
                name: name.clone(),
                gap_offset,
                embeddings,
            });
        }
        spaces.push(SynthSpace {
            id: spec.id.clone(),
            frame,
            modalities,
        });
    }

    Ok(SynthWorld {
        config: cfg.clone(),
        spaces,
        ground_truth: GroundTruth {
            n_items: n,
            latent_dim: l,
            latents: latents.iter().map(|&v| v as f32).collect(),
        },
    })
}

/// The fixed base / leaf1 / leaf2 layout; `cfg.spaces` is ignored.
pub fn make_fourmodality_scenario(cfg: &SynthWorldConfig) -> Result<SynthWorld> {
    let mut cfg = cfg.clone();
    cfg.spaces = four_modality_spaces();
    generate_world(&cfg)
}

/// Retrieval between two embedding sets of the world under identity pairing.
/// The sets may live in different spaces.
pub fn oracle_retrieval(
    world: &SynthWorld,
    query: (&str, &str),
    gallery: (&str, &str),
) -> Result<RetrievalReport> {
    let q = world.embeddings(query.0, query.1)?;
    let g = world.embeddings(gallery.0, gallery.1)?;
    let mut report = retrieval_eval(q, g, &identity_ground_truth(q.rows()), &DEFAULT_KS)?;
    report.direction = format!("{}.{}->{}.{}", query.0, query.1, gallery.0, gallery.1);
    Ok(report)
}
