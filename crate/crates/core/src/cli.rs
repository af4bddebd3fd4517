//! The `mcr-stitch` command line: world synthesis, aggregation, training and
//! evaluation. Usage errors exit with code 2 (via clap), runtime failures
//! with code 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aggregation::{aggregate, count_by_centricity, decode_pqd1, encode_pqd1, AggregationInputs, Centricity};
use crate::config::{load_config, parse_index_list, ExperimentConfig, GroundTruthSpec, SetRef};
use crate::error::{Error, Result};
use crate::evaluation::{
    base_preservation_check, format_classification, format_report, identity_ground_truth, ranks,
    report_from_ranks, zero_shot_classify, RetrievalReport, CLASSIFICATION_KS, DEFAULT_KS,
};
use crate::projector::{decode_exp1, encode_exp1, init_projector, normalize_rows, Mode, ProjectorParams};
use crate::store::{cosine_similarity, load_embeddings, EmbeddingMatrix};
use crate::synth::{four_modality_spaces, generate_world, two_space_spaces, SynthWorldConfig, BASE_SPACE};
use crate::training::{train_extension_with, LossMask, LossReport};

#[derive(Debug, Parser)]
#[command(name = "mcr-stitch", version, about = "Align a leaf embedding space onto a frozen base space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and a matching experiment config.
    Synth(SynthArgs),
    /// Build the pseudo-quadruple cache for every leaf.
    Aggregate(AggregateArgs),
    /// Train leaf projectors from the cached quadruples.
    Train(TrainArgs),
    /// Run the configured retrieval and classification evaluations.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    FourModality,
    TwoSpace,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "four-modality")]
    pub preset: Preset,
    /// TOML file with `SynthWorldConfig` fields; flags below override it.
    #[arg(long)]
    pub world_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra items per set written to `*.heldout.emb` for evaluation.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Training items per set.
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated subset of overlap,leaf,base.
    #[arg(long, value_delimiter = ',')]
    pub centric: Option<Vec<Centricity>>,
    /// Only this leaf space.
    #[arg(long)]
    pub leaf: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub leaf: Option<String>,
    /// Comma-separated subset of avc,atc,tvc,ttc.
    #[arg(long)]
    pub loss_mask: Option<LossMask>,
    #[arg(long)]
    pub fl_depth: Option<usize>,
    #[arg(long)]
    pub fm_stages: Option<usize>,
    #[arg(long)]
    pub fm_final_relu: Option<bool>,
    /// Also write a checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `space=path`; defaults to the trained checkpoint in `out_dir`.
    #[arg(long = "checkpoint", value_parser = parse_checkpoint_arg)]
    pub checkpoints: Vec<(String, PathBuf)>,
}

fn parse_checkpoint_arg(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((space, path)) if !space.is_empty() && !path.is_empty() => Ok((space.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected space=path, got {s:?}")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Aggregate(a) => cmd_aggregate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_key(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        s.to_string()
    } else {
        toml_str(s)
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.world_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthWorldConfig {
            spaces: match a.preset {
                Preset::FourModality => four_modality_spaces(),
                Preset::TwoSpace => two_space_spaces(),
            },
            ..SynthWorldConfig::default()
        },
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.latent_dim = a.latent_dim.unwrap_or(cfg.latent_dim);
    cfg.embed_dim = a.embed_dim.unwrap_or(cfg.embed_dim);
    cfg.n_items = a.n_items.unwrap_or(cfg.n_items);
    cfg.modality_gap_magnitude = a.gap.unwrap_or(cfg.modality_gap_magnitude);
    cfg.observation_noise_sigma = a.sigma.unwrap_or(cfg.observation_noise_sigma);
    let n_train = cfg.n_items;
    cfg.n_items += a.holdout;

    let world = generate_world(&cfg)?;
    let mut files = world.slice_items(0..n_train)?.write(&a.out, "")?;
    if a.holdout > 0 {
        files.extend(world.slice_items(n_train..cfg.n_items)?.write(&a.out, ".heldout")?);
    }

    let mut exp = String::new();
    let base = if cfg.spaces.iter().any(|s| s.id == BASE_SPACE) {
        BASE_SPACE.to_string()
    } else {
        cfg.spaces[0].id.clone()
    };
    let _ = writeln!(exp, "base_space = {}", toml_str(&base));
    let _ = writeln!(exp, "out_dir = \"run\"\nseed = {}", cfg.seed);
    for (table, suffix) in [("embeddings", ""), ("eval_embeddings", ".heldout")] {
        if suffix == ".heldout" && a.holdout == 0 {
            continue;
        }
        for s in &cfg.spaces {
            let _ = writeln!(exp, "\n[{table}.{}]", toml_key(&s.id));
            for m in &s.modalities {
                let _ = writeln!(exp, "{} = {}", toml_key(m), toml_str(&format!("{}_{m}{suffix}.emb", s.id)));
            }
        }
    }
    for (q, g) in synth_eval_pairs(&cfg, &base) {
        let _ = writeln!(
            exp,
            "\n[[eval_pairs]]\nquery = {}\ngallery = {}\nground_truth = \"identity\"",
            toml_str(&q.to_string()),
            toml_str(&g.to_string())
        );
    }
    let exp_path = a.out.join("experiment.toml");
    std::fs::write(&exp_path, exp).map_err(|e| Error::io(&exp_path, e))?;
    files.push(exp_path);

    println!("wrote {} files:", files.len());
    for f in files {
        println!("  {}", f.display());
    }
    Ok(())
}

/// Base pair, each leaf's unique set against the base set it lacks, and
/// every pair of leaf-unique sets.
fn synth_eval_pairs(cfg: &SynthWorldConfig, base: &str) -> Vec<(SetRef, SetRef)> {
    let set = |s: &str, m: &str| SetRef {
        space: s.to_string(),
        modality: m.to_string(),
    };
    let Some(b) = cfg.spaces.iter().find(|s| s.id == base) else {
        return Vec::new();
    };
    let mut pairs = Vec::new();
    if let [x, y] = b.modalities.as_slice() {
        pairs.push((set(base, x), set(base, y)));
    }
    let mut uniques = Vec::new();
    for leaf in cfg.spaces.iter().filter(|s| s.id != base) {
        let shared: Vec<&String> = leaf.modalities.iter().filter(|m| b.modalities.contains(m)).collect();
        let (Some(u), Some(bu)) = (
            leaf.modalities.iter().find(|m| !b.modalities.contains(m)),
            b.modalities.iter().find(|m| !shared.contains(m)),
        ) else {
            continue;
        };
        pairs.push((set(&leaf.id, u), set(base, bu)));
        uniques.push(set(&leaf.id, u));
    }
    for i in 0..uniques.len() {
        for j in i + 1..uniques.len() {
            pairs.push((uniques[i].clone(), uniques[j].clone()));
        }
    }
    pairs
}

fn load_set(path: &Path) -> Result<EmbeddingMatrix> {
    let (m, manifest) = load_embeddings(path)?;
    if !manifest.normalized {
        return Err(Error::Invalid(format!("{} is not unit-normalized", path.display())));
    }
    Ok(m)
}

fn selected_leaves<'a>(cfg: &'a ExperimentConfig, only: &Option<String>) -> Result<Vec<&'a crate::config::LeafSpec>> {
    match only {
        Some(l) => Ok(vec![cfg.leaf(l)?]),
        None => Ok(cfg.leaves.iter().collect()),
    }
}

fn create_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

pub fn cmd_aggregate(a: &AggregateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let centricities = a.centric.clone().unwrap_or_else(|| cfg.centricities.clone());
    create_out_dir(&cfg)?;
    for leaf in selected_leaves(&cfg, &a.leaf)? {
        let overlap_leaf = load_set(cfg.embedding_path(&leaf.space, &leaf.overlap_modality)?)?;
        let overlap_base = load_set(cfg.embedding_path(&cfg.base_space, &leaf.overlap_modality)?)?;
        let nonoverlap_leaf = load_set(cfg.embedding_path(&leaf.space, &leaf.nonoverlap_modality)?)?;
        let nonoverlap_base = load_set(cfg.embedding_path(&cfg.base_space, &leaf.base_nonoverlap_modality)?)?;
        let quads = aggregate(
            AggregationInputs {
                overlap_leaf: &overlap_leaf,
                overlap_base: &overlap_base,
                nonoverlap_leaf: &nonoverlap_leaf,
                nonoverlap_base: &nonoverlap_base,
            },
            &centricities,
            &cfg.aggregation,
        )?;
        let path = cfg.pseudo_path(&leaf.space);
        std::fs::write(&path, encode_pqd1(&quads)?).map_err(|e| Error::io(&path, e))?;
        let counts = count_by_centricity(&quads);
        println!(
            "{}: {} quadruples (overlap {}, leaf {}, base {}) -> {}",
            leaf.space,
            quads.len(),
            counts[0],
            counts[1],
            counts[2],
            path.display()
        );
    }
    Ok(())
}

fn write_checkpoint(path: &Path, pp: &ProjectorParams) -> Result<()> {
    std::fs::write(path, encode_exp1(pp)?).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = a.loss_mask {
        cfg.train.loss_mask = m;
    }
    cfg.fl_depth = a.fl_depth.unwrap_or(cfg.fl_depth);
    cfg.fm_stages = a.fm_stages.unwrap_or(cfg.fm_stages);
    cfg.fm_final_relu = a.fm_final_relu.unwrap_or(cfg.fm_final_relu);
    create_out_dir(&cfg)?;
    for leaf in selected_leaves(&cfg, &a.leaf)? {
        let cache = cfg.pseudo_path(&leaf.space);
        let bytes = std::fs::read(&cache).map_err(|e| Error::io(&cache, e))?;
        let quads = decode_pqd1(&bytes)?;
        let first = quads
            .first()
            .ok_or_else(|| Error::Invalid(format!("{} holds no quadruples", cache.display())))?;
        let desc = cfg.descriptor(first.leaf_nonoverlap.len(), first.base_nonoverlap.len());
        let pp = init_projector(desc, cfg.train.seed)?;
        let every = a.checkpoint_every.filter(|&n| n > 0);
        let (pp, history) = train_extension_with(&quads, pp, &cfg.train, |epoch, pp| match every {
            Some(n) if epoch % n == 0 => {
                let p = cfg.out_dir.join(format!("projector_{}.epoch{epoch}.exp1", leaf.space));
                let mut snapshot = pp.clone();
                snapshot.set_mode(Mode::Eval);
                write_checkpoint(&p, &snapshot)
            }
            _ => Ok(()),
        })?;
        let ckpt = cfg.checkpoint_path(&leaf.space);
        write_checkpoint(&ckpt, &pp)?;
        let log = cfg.loss_log_path(&leaf.space);
        std::fs::write(&log, loss_csv(&history)).map_err(|e| Error::io(&log, e))?;
        let last = history.last().map_or(f64::NAN, |r| r.total);
        println!(
            "{}: {} steps, final loss {last:.4} -> {}, {}",
            leaf.space,
            history.len(),
            ckpt.display(),
            log.display()
        );
        for line in desc.describe() {
            println!("  {line}");
        }
        println!("  f_l linear layers = {}", desc.fl_layout().len());
        println!("  f_m linear layers = {}", desc.fm_layout().len());
    }
    Ok(())
}

pub fn loss_csv(history: &[LossReport]) -> String {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Loaded projectors keyed by leaf space.
pub type Projectors = BTreeMap<String, ProjectorParams>;

/// Embeds one evaluation set into the base space. Base sets pass through
/// untouched; leaf sets go through `f_m(f_l(x))`, or `f_m(x)` for the
/// modality the leaf shares with the base.
pub fn embed_set(cfg: &ExperimentConfig, set: &SetRef, projectors: &Projectors) -> Result<EmbeddingMatrix> {
    let m = load_set(cfg.eval_path(set)?)?;
    if set.space == cfg.base_space {
        return Ok(m);
    }
    let leaf = cfg.leaf(&set.space)?;
    let pp = projectors
        .get(&set.space)
        .ok_or_else(|| Error::Invalid(format!("no checkpoint for leaf {}", set.space)))?;
    let x = m.to_array();
    let y = if set.modality == leaf.overlap_modality {
        pp.raw_overlap(&x)?
    } else {
        pp.raw_nonoverlap(&x)?
    };
    EmbeddingMatrix::from_array(&normalize_rows(&y))?.into_normalized()
}

fn ground_truth(spec: &GroundTruthSpec, n: usize) -> Result<Vec<usize>> {
    match spec {
        GroundTruthSpec::Identity => Ok(identity_ground_truth(n)),
        GroundTruthSpec::File(p) => parse_index_list(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

/// Inverts a one-to-one ground truth for the reverse direction.
fn invert(gt: &[usize], gallery: usize) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; gallery];
    for (q, &g) in gt.iter().enumerate() {
        if g >= gallery || inv[g] != usize::MAX {
            return Err(Error::Invalid(
                "ground truth is not a one-to-one mapping; reverse direction undefined".into(),
            ));
        }
        inv[g] = q;
    }
    if inv.contains(&usize::MAX) {
        return Err(Error::Invalid("ground truth does not cover the gallery".into()));
    }
    Ok(inv)
}

/// Forward, backward and mean reports for one pair.
pub fn evaluate_pair(
    q: &EmbeddingMatrix,
    g: &EmbeddingMatrix,
    gt: &[usize],
) -> Result<[RetrievalReport; 3]> {
    let sims = cosine_similarity(q, g)?;
    let fwd = report_from_ranks(&ranks(&sims, gt)?, &DEFAULT_KS, "forward");
    let inv = invert(gt, g.rows())?;
    let bwd = report_from_ranks(&ranks(&sims.t().to_owned(), &inv)?, &DEFAULT_KS, "backward");
    let mean = fwd.mean_with(&bwd, "mean");
    Ok([fwd, bwd, mean])
}

pub fn load_projectors(cfg: &ExperimentConfig, overrides: &[(String, PathBuf)]) -> Result<Projectors> {
    let mut out = Projectors::new();
    for leaf in &cfg.leaves {
        let path = overrides
            .iter()
            .find(|(s, _)| s == &leaf.space)
            .map(|(_, p)| p.clone())
            .unwrap_or_else(|| cfg.checkpoint_path(&leaf.space));
        if !path.is_file() {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let pp = decode_exp1(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let leaf_dim = load_set(cfg.eval_path(&SetRef {
            space: leaf.space.clone(),
            modality: leaf.nonoverlap_modality.clone(),
        })?)?
        .dim();
        let base_dim = load_set(cfg.eval_path(&SetRef {
            space: cfg.base_space.clone(),
            modality: leaf.base_nonoverlap_modality.clone(),
        })?)?
        .dim();
        let diff = cfg.descriptor(leaf_dim, base_dim).diff(&pp.descriptor);
        if !diff.is_empty() {
            return Err(Error::Invalid(format!(
                "checkpoint {} does not match the configured projector:\n  {}",
                path.display(),
                diff.join("\n  ")
            )));
        }
        out.insert(leaf.space.clone(), pp);
    }
    for (s, _) in overrides {
        cfg.leaf(s)?;
    }
    Ok(out)
}

/// Runs every configured evaluation and writes `results.txt`. Fails when
/// a base-only pair differs between the projected and projector-free runs.
pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let cfg = load_config(&a.config)?;
    let projectors = load_projectors(&cfg, &a.checkpoints)?;
    let none = Projectors::new();
    let mut out = String::new();
    let mut preservation_failures = Vec::new();
    for pair in &cfg.eval_pairs {
        let q = embed_set(&cfg, &pair.query, &projectors)?;
        let g = embed_set(&cfg, &pair.gallery, &projectors)?;
        let gt = ground_truth(&pair.ground_truth, q.rows())?;
        let tag = format!("{}~{}", pair.query, pair.gallery);
        let reports = evaluate_pair(&q, &g, &gt)?;
        for r in &reports {
            out.push_str(&format_report(r, &tag));
        }
        if pair.query.space == cfg.base_space && pair.gallery.space == cfg.base_space {
            let q0 = embed_set(&cfg, &pair.query, &none)?;
            let g0 = embed_set(&cfg, &pair.gallery, &none)?;
            let before = evaluate_pair(&q0, &g0, &gt)?;
            let check = base_preservation_check(&before[0], &reports[0]);
            let status = if check.passed { "pass" } else { "FAIL" };
            let _ = writeln!(out, "base_preservation\t{status}\t{tag}\tforward");
            if !check.passed {
                preservation_failures.extend(check.differences.into_iter().map(|d| format!("{tag}: {d}")));
            }
        }
    }
    for task in &cfg.classification {
        let samples = embed_set(&cfg, &task.samples, &projectors)?;
        let templates = task
            .class_templates
            .iter()
            .map(|p| load_set(p))
            .collect::<Result<Vec<_>>>()?;
        let labels = parse_index_list(&std::fs::read_to_string(&task.labels).map_err(|e| Error::io(&task.labels, e))?)?;
        let r = zero_shot_classify(&samples, &templates, &labels, &CLASSIFICATION_KS)?;
        out.push_str(&format_classification(&r, &task.name));
    }
    print!("{out}");
    create_out_dir(&cfg)?;
    let path = cfg.results_path();
    std::fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    if !preservation_failures.is_empty() {
        return Err(Error::Invalid(format!(
            "base preservation check failed:\n  {}",
            preservation_failures.join("\n  ")
        )));
    }
    Ok(out)
}
