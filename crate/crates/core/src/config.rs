//! TOML experiment configuration.
//!
//! ```toml
//! base_space = "synth-base"
//! out_dir = "out"
//! seed = 1
//! centricities = ["overlap", "leaf", "base"]
//! loss_mask = "avc,atc,tvc,ttc"
//!
//! [embeddings.synth-base]
//! text = "synth-base_text.emb"
//! image = "synth-base_image.emb"
//!
//! [embeddings.synth-leaf1]
//! text = "synth-leaf1_text.emb"
//! audio = "synth-leaf1_audio.emb"
//!
//! [[eval_pairs]]
//! query = "synth-leaf1.audio"
//! gallery = "synth-base.image"
//! ground_truth = "identity"
//! ```
//!
//! Every hyperparameter is optional and falls back to the library default.
//! Relative paths resolve against the directory holding the config file.
//! Leaves are every space other than `base_space`; each must share exactly
//! one modality with the base.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::aggregation::{AggregationConfig, Centricity};
use crate::error::{Error, Result};
use crate::projector::ProjectorDescriptor;
use crate::training::{LossMask, TrainConfig};

/// One embedding set, written `space.modality`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SetRef {
    pub space: String,
    pub modality: String,
}

impl FromStr for SetRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.rsplit_once('.') {
            Some((space, modality)) if !space.is_empty() && !modality.is_empty() => Ok(Self {
                space: space.to_string(),
                modality: modality.to_string(),
            }),
            _ => Err(Error::Config(format!("expected `space.modality`, got {s:?}"))),
        }
    }
}

impl fmt::Display for SetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.space, self.modality)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruthSpec {
    /// Query `i` matches gallery row `i`.
    Identity,
    /// Text file with one gallery index per line.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub query: SetRef,
    pub gallery: SetRef,
    pub ground_truth: GroundTruthSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTask {
    pub name: String,
    pub samples: SetRef,
    /// One EMB1 file of template embeddings per class, in class order.
    pub class_templates: Vec<PathBuf>,
    /// Text file with one class index per sample.
    pub labels: PathBuf,
}

/// How one leaf space attaches to the base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafSpec {
    pub space: String,
    pub overlap_modality: String,
    pub nonoverlap_modality: String,
    /// The base modality the leaf does not share.
    pub base_nonoverlap_modality: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub aggregation: AggregationConfig,
    pub train: TrainConfig,
    pub centricities: Vec<Centricity>,
    pub fl_depth: usize,
    pub fm_stages: usize,
    pub fm_final_relu: bool,
    pub base_space: String,
    pub embeddings: BTreeMap<String, BTreeMap<String, PathBuf>>,
    /// Held-out sets used by evaluation; falls back to `embeddings`.
    pub eval_embeddings: BTreeMap<String, BTreeMap<String, PathBuf>>,
    pub eval_pairs: Vec<EvalPair>,
    pub classification: Vec<ClassificationTask>,
    pub out_dir: PathBuf,
    pub leaves: Vec<LeafSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    tau1: Option<f64>,
    tau2: Option<f64>,
    lambda: Option<f64>,
    noise_variance: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr0: Option<f64>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    centricities: Option<Vec<String>>,
    loss_mask: Option<String>,
    fl_depth: Option<usize>,
    fm_stages: Option<usize>,
    fm_final_relu: Option<bool>,
    base_space: Option<String>,
    embeddings: BTreeMap<String, BTreeMap<String, PathBuf>>,
    #[serde(default)]
    eval_embeddings: BTreeMap<String, BTreeMap<String, PathBuf>>,
    #[serde(default)]
    eval_pairs: Vec<RawEvalPair>,
    #[serde(default)]
    classification: Vec<RawClassification>,
    out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvalPair {
    query: String,
    gallery: String,
    ground_truth: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassification {
    name: String,
    samples: String,
    class_templates: Vec<PathBuf>,
    labels: PathBuf,
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn resolve_sets(
    dir: &Path,
    sets: BTreeMap<String, BTreeMap<String, PathBuf>>,
) -> BTreeMap<String, BTreeMap<String, PathBuf>> {
    sets.into_iter()
        .map(|(s, mods)| (s, mods.into_iter().map(|(m, p)| (m, resolve(dir, &p))).collect()))
        .collect()
}

fn infer_base(embeddings: &BTreeMap<String, BTreeMap<String, PathBuf>>) -> Result<String> {
    let shares = |a: &BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>| a.keys().any(|k| b.contains_key(k));
    let candidates: Vec<&String> = embeddings
        .iter()
        .filter(|(s, mods)| embeddings.iter().all(|(o, om)| o == *s || shares(mods, om)))
        .map(|(s, _)| s)
        .collect();
    match candidates.as_slice() {
        [one] if embeddings.len() > 2 => Ok((*one).clone()),
        _ => Err(Error::Config("cannot infer the base space; set `base_space`".into())),
    }
}

fn leaf_specs(base_space: &str, embeddings: &BTreeMap<String, BTreeMap<String, PathBuf>>) -> Result<Vec<LeafSpec>> {
    let base = embeddings
        .get(base_space)
        .ok_or_else(|| Error::Config(format!("base space {base_space:?} has no embeddings")))?;
    if base.len() != 2 {
        return Err(Error::Config(format!(
            "base space {base_space:?} must list exactly two modalities, found {}",
            base.len()
        )));
    }
    let mut leaves = Vec::new();
    for (space, mods) in embeddings.iter().filter(|(s, _)| s.as_str() != base_space) {
        if mods.len() != 2 {
            return Err(Error::Config(format!(
                "leaf space {space:?} must list exactly two modalities, found {}",
                mods.len()
            )));
        }
        let shared: Vec<&String> = mods.keys().filter(|m| base.contains_key(*m)).collect();
        let [overlap] = shared.as_slice() else {
            return Err(Error::Config(format!(
                "leaf space {space:?} must share exactly one modality with the base, shares {}",
                shared.len()
            )));
        };
        let other = |m: &BTreeMap<String, PathBuf>| m.keys().find(|k| k != overlap).cloned().expect("two modalities");
        leaves.push(LeafSpec {
            space: space.clone(),
            overlap_modality: (*overlap).clone(),
            nonoverlap_modality: other(mods),
            base_nonoverlap_modality: other(base),
        });
    }
    if leaves.is_empty() {
        return Err(Error::Config("no leaf spaces configured".into()));
    }
    Ok(leaves)
}

/// Parses config text. Paths resolve against `dir`; files are not touched.
pub fn parse_config(text: &str, dir: &Path) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;

    let seed = raw.seed.unwrap_or(0);
    let da = AggregationConfig::default();
    let aggregation = AggregationConfig {
        tau1: raw.tau1.unwrap_or(da.tau1),
        noise_variance: raw.noise_variance.unwrap_or(da.noise_variance),
        seed,
        ..da
    };
    aggregation.validate()?;

    let dt = TrainConfig::default();
    let train = TrainConfig {
        batch_size: raw.batch_size.unwrap_or(dt.batch_size),
        epochs: raw.epochs.unwrap_or(dt.epochs),
        lr0: raw.lr0.unwrap_or(dt.lr0),
        lambda: raw.lambda.unwrap_or(dt.lambda),
        tau2: raw.tau2.unwrap_or(dt.tau2),
        weight_decay: raw.weight_decay.unwrap_or(dt.weight_decay),
        seed,
        loss_mask: match &raw.loss_mask {
            Some(s) => LossMask::from_str(s)?,
            None => dt.loss_mask,
        },
        ..dt
    };
    train.validate()?;

    let centricities = match &raw.centricities {
        Some(list) => {
            let parsed = list
                .iter()
                .map(|s| Centricity::from_str(s))
                .collect::<Result<Vec<_>>>()?;
            if parsed.is_empty() {
                return Err(Error::Config("centricities must not be empty".into()));
            }
            parsed
        }
        None => Centricity::ALL.to_vec(),
    };

    if raw.embeddings.is_empty() {
        return Err(Error::Config("no embeddings configured".into()));
    }
    let base_space = match raw.base_space {
        Some(b) => b,
        None => infer_base(&raw.embeddings)?,
    };
    let leaves = leaf_specs(&base_space, &raw.embeddings)?;

    let embeddings = resolve_sets(dir, raw.embeddings);
    let eval_embeddings = resolve_sets(dir, raw.eval_embeddings);
    let known = |r: &SetRef| {
        eval_embeddings
            .get(&r.space)
            .or_else(|| embeddings.get(&r.space))
            .is_some_and(|m| m.contains_key(&r.modality))
    };

    let mut eval_pairs = Vec::new();
    for p in raw.eval_pairs {
        let pair = EvalPair {
            query: p.query.parse()?,
            gallery: p.gallery.parse()?,
            ground_truth: if p.ground_truth == "identity" {
                GroundTruthSpec::Identity
            } else {
                GroundTruthSpec::File(resolve(dir, Path::new(&p.ground_truth)))
            },
        };
        for r in [&pair.query, &pair.gallery] {
            if !known(r) {
                return Err(Error::Config(format!("eval pair refers to unknown set {r}")));
            }
        }
        eval_pairs.push(pair);
    }

    let mut classification = Vec::new();
    for c in raw.classification {
        let samples: SetRef = c.samples.parse()?;
        if !known(&samples) {
            return Err(Error::Config(format!("classification {:?} refers to unknown set {samples}", c.name)));
        }
        if c.class_templates.is_empty() {
            return Err(Error::Config(format!("classification {:?} has no classes", c.name)));
        }
        classification.push(ClassificationTask {
            name: c.name,
            samples,
            class_templates: c.class_templates.iter().map(|p| resolve(dir, p)).collect(),
            labels: resolve(dir, &c.labels),
        });
    }

    let cfg = ExperimentConfig {
        aggregation,
        train,
        centricities,
        fl_depth: raw.fl_depth.unwrap_or(0),
        fm_stages: raw.fm_stages.unwrap_or(2),
        fm_final_relu: raw.fm_final_relu.unwrap_or(true),
        base_space,
        embeddings,
        eval_embeddings,
        eval_pairs,
        classification,
        out_dir: resolve(dir, &raw.out_dir),
        leaves,
    };
    cfg.descriptor(1, 1).validate()?;
    Ok(cfg)
}

/// Reads and parses a config file and checks that every referenced input
/// file exists.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let cfg = parse_config(&text, dir)?;
    for p in cfg.input_files() {
        if !p.is_file() {
            return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
        }
    }
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn leaf(&self, space: &str) -> Result<&LeafSpec> {
        self.leaves
            .iter()
            .find(|l| l.space == space)
            .ok_or_else(|| Error::Config(format!("{space:?} is not a configured leaf space")))
    }

    /// Training-set path for `space.modality`.
    pub fn embedding_path(&self, space: &str, modality: &str) -> Result<&Path> {
        self.embeddings
            .get(space)
            .and_then(|m| m.get(modality))
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no embeddings for {space}.{modality}")))
    }

    /// Evaluation path for a set: the held-out file when configured.
    pub fn eval_path(&self, set: &SetRef) -> Result<&Path> {
        self.eval_embeddings
            .get(&set.space)
            .and_then(|m| m.get(&set.modality))
            .map(PathBuf::as_path)
            .map_or_else(|| self.embedding_path(&set.space, &set.modality), Ok)
    }

    pub fn descriptor(&self, leaf_dim: usize, base_dim: usize) -> ProjectorDescriptor {
        ProjectorDescriptor {
            fl_depth: self.fl_depth,
            fm_stages: self.fm_stages,
            fm_final_relu: self.fm_final_relu,
            ..ProjectorDescriptor::new(leaf_dim, base_dim)
        }
    }

    pub fn input_files(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = self
            .embeddings
            .values()
            .chain(self.eval_embeddings.values())
            .flat_map(|m| m.values().map(PathBuf::as_path))
            .collect();
        for p in &self.eval_pairs {
            if let GroundTruthSpec::File(f) = &p.ground_truth {
                out.push(f);
            }
        }
        for c in &self.classification {
            out.extend(c.class_templates.iter().map(PathBuf::as_path));
            out.push(&c.labels);
        }
        out
    }

    pub fn pseudo_path(&self, leaf: &str) -> PathBuf {
        self.out_dir.join(format!("pseudo_{leaf}.pqd"))
    }

    pub fn checkpoint_path(&self, leaf: &str) -> PathBuf {
        self.out_dir.join(format!("projector_{leaf}.exp1"))
    }

    pub fn loss_log_path(&self, leaf: &str) -> PathBuf {
        self.out_dir.join(format!("loss_{leaf}.csv"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.txt")
    }
}

/// Parses a ground-truth or label file: one non-negative integer per line,
/// blank lines ignored.
pub fn parse_index_list(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Config(format!("line {}: expected an index, got {:?}", i + 1, l.trim())))
        })
        .collect()
}
