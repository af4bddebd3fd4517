//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run everything with `cargo test --release --test acceptance`, or pick
//! criteria by number: `cargo test --release --test acceptance -- 1 4 9`.

mod common;

use common::*;
use mcr_stitch::aggregation::{
    aggregate, softmax_weighted_aggregate, AggregationConfig, AggregationInputs, Centricity,
};
use mcr_stitch::config::load_config;
use mcr_stitch::evaluation::{
    cross_space_eval, identity_ground_truth, project_leaf, random_map_baseline, ranks,
    report_from_ranks, retrieval_eval, RetrievalReport, DEFAULT_KS,
};
use mcr_stitch::projector::{init_projector, ProjectorDescriptor, ProjectorParams};
use mcr_stitch::store::cosine_similarity;
use mcr_stitch::synth::{make_fourmodality_scenario, SynthWorld, SynthWorldConfig, BASE_SPACE, LEAF1_SPACE, LEAF2_SPACE};
use mcr_stitch::training::{
    evaluate_objective, info_nce, train_extension, IntraForm, InterTerm, LossMask, ObjectiveWeights,
    QuadBatch, TrainConfig,
};
use mcr_stitch::EmbeddingMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;
use std::time::{Duration, Instant};

struct Outcome {
    passed: bool,
    detail: String,
    notes: Vec<String>,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self {
            passed,
            detail,
            notes: Vec::new(),
        }
    }
}

type Criterion = fn() -> Outcome;

const CRITERIA: [(u32, &str, u64, Criterion); 9] = [
    (1, "gradient oracle", 30, c1_gradients),
    (2, "InfoNCE analytics", 5, c2_info_nce),
    (3, "aggregation oracles", 10, c3_aggregation),
    (4, "retrieval-metric oracle", 10, c4_metrics),
    (5, "frozen-base preservation", 60, c5_preservation),
    (6, "alignment transfer", 300, c6_transfer),
    (7, "emergent alignment", 600, c7_emergent),
    (8, "ablation directions", 3600, c8_ablations),
    (9, "determinism", 600, c9_determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, limit, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let mut out = run();
        let took = t0.elapsed();
        if took > Duration::from_secs(limit) {
            out.passed = false;
            out.detail.push_str(&format!("; over the {limit} s budget"));
        }
        let status = if out.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} ({name}): {status} [{:.1} s of {limit} s] {}",
            took.as_secs_f64(),
            out.detail
        );
        for note in &out.notes {
            println!("    note: {note}");
        }
        failed += usize::from(!out.passed);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;

fn perturbed(pp: &ProjectorParams, tensor: usize, index: usize, delta: f64) -> ProjectorParams {
    let mut out = pp.clone();
    let mut t = 0;
    out.visit_params_mut(|_, theta| {
        if t == tensor {
            theta[index] += delta;
        }
        t += 1;
    });
    out
}

/// Richardson-extrapolated central difference. `None` when any probe moves
/// a rectifier across its kink.
fn central_difference(
    pp: &ProjectorParams,
    batch: &QuadBatch,
    w: &ObjectiveWeights,
    form: IntraForm,
    tensor: usize,
    index: usize,
    pattern: &[bool],
) -> Option<f64> {
    let f = |delta: f64| {
        let obj = evaluate_objective(&perturbed(pp, tensor, index, delta), batch, w, 0.05, form).unwrap();
        (obj.relu_pattern() == pattern).then_some(obj.value)
    };
    let d = |h: f64| Some((f(h)? - f(-h)?) / (2.0 * h));
    let (coarse, fine) = (d(FD_STEP)?, d(FD_STEP / 2.0)?);
    Some((4.0 * fine - coarse) / 3.0)
}

fn c1_gradients() -> Outcome {
    let quads = toy_quads(16, 8, 101);
    let batch = QuadBatch::all(&quads).unwrap();
    let pp = init_projector(ProjectorDescriptor::new(8, 8), 7).unwrap();
    let mut cases: Vec<(String, ObjectiveWeights, IntraForm)> = vec![
        ("intra/squared".into(), ObjectiveWeights::intra_only(), IntraForm::Squared),
        ("intra/norm".into(), ObjectiveWeights::intra_only(), IntraForm::Norm),
    ];
    for t in InterTerm::ALL {
        cases.push((t.name().into(), ObjectiveWeights::inter_only(t), IntraForm::Squared));
    }
    cases.push(("total".into(), ObjectiveWeights::training(0.1, LossMask::all()), IntraForm::Squared));

    let mut worst = (0.0f64, String::new());
    let (mut checked, mut skipped) = (0usize, 0usize);
    let mut uncovered = Vec::new();
    for (name, w, form) in &cases {
        let obj = evaluate_objective(&pp, &batch, w, 0.05, *form).unwrap();
        let pattern = obj.relu_pattern();
        for (t, g) in obj.grads.flat().iter().enumerate() {
            let mut covered = false;
            for (i, &analytic) in g.iter().enumerate() {
                match central_difference(&pp, &batch, w, *form, t, i, &pattern) {
                    None => skipped += 1,
                    Some(numeric) => {
                        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
                        if rel > worst.0 {
                            worst = (rel, format!("{name} tensor {t} entry {i}: {analytic:.6e} vs {numeric:.6e}"));
                        }
                        checked += 1;
                        covered = true;
                    }
                }
            }
            if !covered {
                uncovered.push(format!("{name} tensor {t}"));
            }
        }
    }
    let passed = worst.0 <= GRAD_REL_TOL && uncovered.is_empty();
    let mut detail = format!(
        "{} objectives, {checked} entries, {skipped} kink entries skipped, max rel err {:.2e} ({})",
        cases.len(),
        worst.0,
        worst.1
    );
    if !uncovered.is_empty() {
        detail.push_str(&format!("; unchecked tensors: {}", uncovered.join(", ")));
    }
    Outcome::new(passed, detail)
}

// ---------------------------------------------------------------- 2

fn c2_info_nce() -> Outcome {
    let mut r = rng(202);
    let mut problems = Vec::new();

    let x = Array2::from_shape_vec((1, 4), unit_vec(&mut r, 4)).unwrap();
    let z = Array2::from_shape_vec((1, 4), unit_vec(&mut r, 4)).unwrap();
    let (l1, _, _) = info_nce(&x, &z, 0.05).unwrap();
    if l1.abs() > 1e-12 {
        problems.push(format!("B=1 loss {l1}"));
    }

    for b in [2usize, 8, 64] {
        let v = unit_vec(&mut r, 6);
        let x = Array2::from_shape_fn((b, 6), |(_, k)| v[k]);
        let (l, _, _) = info_nce(&x, &x, 0.05).unwrap();
        let want = (b as f64).ln();
        if (l - want).abs() > 1e-6 {
            problems.push(format!("B={b} uniform loss {l} vs ln B {want}"));
        }
    }

    let mut worst_perm = 0.0f64;
    for trial in 0..20 {
        let b = 2 + trial % 15;
        let x = unit_matrix(&mut r, b, 5).to_array();
        let z = unit_matrix(&mut r, b, 5).to_array();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let xp = x.select(ndarray::Axis(0), &perm);
        let zp = z.select(ndarray::Axis(0), &perm);
        let (l, _, _) = info_nce(&x, &z, 0.05).unwrap();
        let (lp, _, _) = info_nce(&xp, &zp, 0.05).unwrap();
        worst_perm = worst_perm.max((l - lp).abs());
    }
    if worst_perm > 1e-6 {
        problems.push(format!("permutation changes loss by {worst_perm:e}"));
    }

    let detail = if problems.is_empty() {
        format!(
            "B=1 loss {:.1e}; uniform batches hit ln B for B in 2, 8, 64; max permutation drift {worst_perm:.1e}",
            l1.abs()
        )
    } else {
        problems.join("; ")
    };
    Outcome::new(problems.is_empty(), detail)
}

// ---------------------------------------------------------------- 3

fn c3_aggregation() -> Outcome {
    let mut worst_nn = 0.0f64;
    let mut worst_mean = 0.0f64;
    let mut worst_hull = 0.0f64;
    let mut worst_simplex = 0.0f64;
    for inst in 0..200u64 {
        let mut r = rng(3000 + inst);
        let n = r.random_range(2..=30);
        let d = r.random_range(2..=16);
        let g = unit_matrix(&mut r, n, d);
        let q = unit_vec(&mut r, d);
        let rows: Vec<Vec<f64>> = (0..n).map(|j| row64(&g, j)).collect();

        let best = (0..n)
            .max_by(|&a, &b| dot(&q, &rows[a]).partial_cmp(&dot(&q, &rows[b])).unwrap())
            .unwrap();
        let (nn, _) = softmax_weighted_aggregate(&q, &g, 1e-6).unwrap();
        for k in 0..d {
            worst_nn = worst_nn.max((nn[k] - rows[best][k]).abs());
        }

        let (mean, _) = softmax_weighted_aggregate(&q, &g, 1e6).unwrap();
        for k in 0..d {
            let m = rows.iter().map(|row| row[k]).sum::<f64>() / n as f64;
            worst_mean = worst_mean.max((mean[k] - m).abs());
        }

        let tau = [0.01, 0.1, 1.0][inst as usize % 3];
        let (out, w) = softmax_weighted_aggregate(&q, &g, tau).unwrap();
        for k in 0..d {
            let lo = rows.iter().map(|row| row[k]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|row| row[k]).fold(f64::NEG_INFINITY, f64::max);
            worst_hull = worst_hull.max(lo - out[k]).max(out[k] - hi);
        }
        let sum: f64 = w.iter().sum();
        let negative = w.iter().cloned().fold(0.0f64, f64::min);
        worst_simplex = worst_simplex.max((sum - 1.0).abs()).max(-negative);
    }
    let passed = worst_nn <= 1e-5 && worst_mean <= 1e-4 && worst_hull <= 1e-12 && worst_simplex <= 1e-6;
    Outcome::new(
        passed,
        format!(
            "200 instances: nearest-neighbor err {worst_nn:.1e} (tol 1e-5), mean err {worst_mean:.1e} (tol 1e-4), \
             hull overshoot {worst_hull:.1e}, simplex err {worst_simplex:.1e} (tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Unit rows whose entries come from {-1, 0, 1}, so duplicate rows and
/// tied scores are common.
fn tied_matrix(r: &mut impl Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data: Vec<Vec<f32>> = (0..rows)
        .map(|_| loop {
            let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1i32..=1) as f32).collect();
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        })
        .collect();
    mcr_stitch::store::l2_normalize(&EmbeddingMatrix::from_rows(&data).unwrap()).unwrap()
}

fn c4_metrics() -> Outcome {
    let ks = [1usize, 5, 10];
    let mut worst = 0.0f64;
    let mut with_ties = 0;
    for inst in 0..100u64 {
        let mut r = rng(4000 + inst);
        let nq = r.random_range(1..=50);
        let ng = r.random_range(1..=100);
        let d = r.random_range(2..=16);
        let (q, g) = if inst % 2 == 0 {
            (unit_matrix(&mut r, nq, d), unit_matrix(&mut r, ng, d))
        } else {
            with_ties += 1;
            (tied_matrix(&mut r, nq, d.min(4)), tied_matrix(&mut r, ng, d.min(4)))
        };
        let gt: Vec<usize> = (0..nq).map(|_| r.random_range(0..ng)).collect();
        let sims = cosine_similarity(&q, &g).unwrap();
        let rows: Vec<Vec<f64>> = sims.rows().into_iter().map(|row| row.to_vec()).collect();
        let (map, recalls) = sort_oracle(&rows, &gt, &ks);
        let from_ranks = report_from_ranks(&ranks(&sims, &gt).unwrap(), &ks, "q->g");
        let full = retrieval_eval(&q, &g, &gt, &ks).unwrap();
        for rep in [&from_ranks, &full] {
            worst = worst.max((rep.map - map).abs());
            for (k, want) in ks.iter().zip(&recalls) {
                worst = worst.max((rep.r_at[k] - want).abs());
            }
        }
    }
    Outcome::new(
        worst <= 1e-9,
        format!("100 instances ({with_ties} with heavy ties): max deviation from sort reference {worst:.1e} (tol 1e-9)"),
    )
}

// ---------------------------------------------------------------- 5 and 9

/// Runs the CLI binary with captured output; `Err` carries stderr.
fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mcr-stitch"))
        .args(args)
        .output()
        .expect("spawn mcr-stitch");
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

/// `synth`, then prepends training overrides to the generated config.
fn synth_experiment(dir: &Path, synth_args: &[&str], overrides: &str) -> std::path::PathBuf {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(synth_args);
    run_cli(&args).unwrap();
    let cfg = dir.join("experiment.toml");
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, format!("{overrides}\n{text}")).unwrap();
    cfg
}

fn base_pair_report(cfg_path: &Path) -> (RetrievalReport, Vec<Vec<u8>>) {
    let cfg = load_config(cfg_path).unwrap();
    let pair = cfg
        .eval_pairs
        .iter()
        .find(|p| p.query.space == cfg.base_space && p.gallery.space == cfg.base_space)
        .expect("a base-only pair");
    let qp = cfg.eval_path(&pair.query).unwrap();
    let gp = cfg.eval_path(&pair.gallery).unwrap();
    let bytes = vec![std::fs::read(qp).unwrap(), std::fs::read(gp).unwrap()];
    let q = mcr_stitch::store::load_embeddings(qp).unwrap().0;
    let g = mcr_stitch::store::load_embeddings(gp).unwrap().0;
    let rep = retrieval_eval(&q, &g, &identity_ground_truth(q.rows()), &DEFAULT_KS).unwrap();
    (rep, bytes)
}

fn c5_preservation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_experiment(
        dir.path(),
        &["--seed", "5", "--holdout", "500"],
        "batch_size = 256\nepochs = 5",
    );
    let c = cfg.to_str().unwrap();
    let (before, bytes_before) = base_pair_report(&cfg);
    run_cli(&["aggregate", "--config", c]).unwrap();
    run_cli(&["train", "--config", c]).unwrap();
    let eval = run_cli(&["eval", "--config", c]);
    let (after, bytes_after) = base_pair_report(&cfg);

    let mut problems = Vec::new();
    match &eval {
        Ok(text) if text.contains("base_preservation\tpass") => {}
        Ok(_) => problems.push("eval report lacks a base_preservation pass line".to_string()),
        Err(e) => problems.push(format!("eval failed: {e}")),
    }
    if !before.bit_identical(&after) {
        problems.push(format!("base report changed: {before:?} vs {after:?}"));
    }
    if bytes_before != bytes_after {
        problems.push("base embedding files changed on disk".into());
    }
    let detail = if problems.is_empty() {
        format!(
            "base text->image mAP {:.4} R@1 {:.4} before and after training both leaves, bit-identical",
            after.map, after.r_at[&1]
        )
    } else {
        problems.join("; ")
    };
    Outcome::new(problems.is_empty(), detail)
}

fn c9_determinism() -> Outcome {
    let run = |dir: &Path| {
        let cfg = synth_experiment(dir, &["--seed", "9", "--n-items", "300", "--holdout", "100"], "batch_size = 64\nepochs = 3");
        let c = cfg.to_str().unwrap();
        run_cli(&["aggregate", "--config", c]).unwrap();
        run_cli(&["train", "--config", c]).unwrap();
        run_cli(&["eval", "--config", c]).unwrap();
        let mut files: Vec<_> = walk(dir);
        files.sort();
        files
            .into_iter()
            .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
            .collect::<Vec<_>>()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (run(a.path()), run(b.path()));
    let differing: Vec<String> = ra
        .iter()
        .zip(&rb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let produced: Vec<String> = ra
        .iter()
        .map(|(p, _)| p.display().to_string())
        .filter(|p| p.starts_with("run"))
        .collect();
    let passed = ra.len() == rb.len() && differing.is_empty() && produced.len() >= 7;
    let detail = if passed {
        format!("{} files byte-identical across two runs, including {}", ra.len(), produced.join(", "))
    } else {
        format!("differing files: {differing:?}; outputs {produced:?}")
    };
    Outcome::new(passed, detail)
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

// ---------------------------------------------------------------- 6, 7, 8

const TRAIN_ITEMS: usize = 2000;
const HELD_OUT: usize = 500;

struct World {
    train: SynthWorld,
    held_out: SynthWorld,
}

fn world(seed: u64) -> World {
    let w = make_fourmodality_scenario(&SynthWorldConfig {
        n_items: TRAIN_ITEMS + HELD_OUT,
        seed,
        ..SynthWorldConfig::default()
    })
    .unwrap();
    World {
        train: w.slice_items(0..TRAIN_ITEMS).unwrap(),
        held_out: w.slice_items(TRAIN_ITEMS..TRAIN_ITEMS + HELD_OUT).unwrap(),
    }
}

/// `(leaf space, overlap, leaf unique, base unique)`
const LEAF1: (&str, &str, &str, &str) = (LEAF1_SPACE, "text", "audio", "image");
const LEAF2: (&str, &str, &str, &str) = (LEAF2_SPACE, "image", "pointcloud", "text");

#[derive(Clone, Copy)]
struct Run {
    centricities: &'static [Centricity],
    mask: LossMask,
    fl_depth: usize,
    fm_final_relu: bool,
}

const DEFAULT_RUN: Run = Run {
    centricities: &Centricity::ALL,
    mask: LossMask::all(),
    fl_depth: 0,
    fm_final_relu: true,
};

fn train_leaf(w: &World, leaf: (&str, &str, &str, &str), seed: u64, run: Run) -> ProjectorParams {
    let e = |s: &str, m: &str| w.train.embeddings(s, m).unwrap();
    let quads = aggregate(
        AggregationInputs {
            overlap_leaf: e(leaf.0, leaf.1),
            overlap_base: e(BASE_SPACE, leaf.1),
            nonoverlap_leaf: e(leaf.0, leaf.2),
            nonoverlap_base: e(BASE_SPACE, leaf.3),
        },
        run.centricities,
        &AggregationConfig {
            seed,
            ..AggregationConfig::default()
        },
    )
    .unwrap();
    let desc = ProjectorDescriptor {
        fl_depth: run.fl_depth,
        fm_final_relu: run.fm_final_relu,
        ..ProjectorDescriptor::new(32, 32)
    };
    let cfg = TrainConfig {
        batch_size: 256,
        epochs: 30,
        seed,
        loss_mask: run.mask,
        ..TrainConfig::default()
    };
    train_extension(&quads, init_projector(desc, seed).unwrap(), &cfg).unwrap().0
}

fn leaf_to_base(w: &World, leaf: (&str, &str, &str, &str), pp: &ProjectorParams) -> RetrievalReport {
    cross_space_eval(
        w.held_out.embeddings(leaf.0, leaf.2).unwrap(),
        pp,
        w.held_out.embeddings(BASE_SPACE, leaf.3).unwrap(),
        &identity_ground_truth(HELD_OUT),
        &DEFAULT_KS,
    )
    .unwrap()
}

const C6_SEED: u64 = 0;

thread_local! {
    static C6_DEFAULT: std::cell::RefCell<Option<ProjectorParams>> = const { std::cell::RefCell::new(None) };
}

fn c6_default_projector(w: &World) -> ProjectorParams {
    C6_DEFAULT.with(|c| {
        c.borrow_mut()
            .get_or_insert_with(|| train_leaf(w, LEAF1, C6_SEED, DEFAULT_RUN))
            .clone()
    })
}

fn c6_transfer() -> Outcome {
    let w = world(C6_SEED);
    let untrained = init_projector(ProjectorDescriptor::new(32, 32), C6_SEED).unwrap();
    let baseline = leaf_to_base(&w, LEAF1, &untrained);
    let (rand_mean, rand_sd) = random_map_baseline(HELD_OUT, HELD_OUT, 2000, C6_SEED);
    let baseline_ok = (baseline.map - rand_mean).abs() <= 3.0 * rand_sd;

    let pp = c6_default_projector(&w);
    let trained = leaf_to_base(&w, LEAF1, &pp);
    let passed = trained.r_at[&1] >= 0.90 && trained.map >= 0.93 && baseline_ok;
    let mut out = Outcome::new(
        passed,
        format!(
            "held-out audio->image R@1 {:.4} (need 0.90), mAP {:.4} (need 0.93); untrained mAP {:.4} vs random {:.4} +- {:.4} (3 SE {})",
            trained.r_at[&1],
            trained.map,
            baseline.map,
            rand_mean,
            rand_sd,
            if baseline_ok { "ok" } else { "exceeded" }
        ),
    );
    let linear = leaf_to_base(&w, LEAF1, &train_leaf(&w, LEAF1, C6_SEED, Run { fm_final_relu: false, ..DEFAULT_RUN }));
    out.notes.push(format!(
        "same run with fm_final_relu = false (no rectifier on the last f_m block): R@1 {:.4}, mAP {:.4}",
        linear.r_at[&1], linear.map
    ));
    out
}

fn emergent(w: &World, p1: &ProjectorParams, p2: &ProjectorParams) -> (RetrievalReport, RetrievalReport) {
    let a = project_leaf(p1, w.held_out.embeddings(LEAF1.0, LEAF1.2).unwrap()).unwrap();
    let b = project_leaf(p2, w.held_out.embeddings(LEAF2.0, LEAF2.2).unwrap()).unwrap();
    let gt = identity_ground_truth(HELD_OUT);
    (
        retrieval_eval(&a, &b, &gt, &DEFAULT_KS).unwrap(),
        retrieval_eval(&b, &a, &gt, &DEFAULT_KS).unwrap(),
    )
}

fn c7_emergent() -> Outcome {
    let w = world(C6_SEED);
    let p1 = c6_default_projector(&w);
    let p2 = train_leaf(&w, LEAF2, C6_SEED, DEFAULT_RUN);
    let (fwd, bwd) = emergent(&w, &p1, &p2);
    let passed = fwd.r_at[&1] >= 0.80 && bwd.r_at[&1] >= 0.80;
    let mut out = Outcome::new(
        passed,
        format!(
            "held-out audio->pointcloud R@1 {:.4}, pointcloud->audio R@1 {:.4} (need 0.80 each); mAP {:.4} / {:.4}",
            fwd.r_at[&1], bwd.r_at[&1], fwd.map, bwd.map
        ),
    );
    let linear = Run { fm_final_relu: false, ..DEFAULT_RUN };
    let (lf, lb) = emergent(&w, &train_leaf(&w, LEAF1, C6_SEED, linear), &train_leaf(&w, LEAF2, C6_SEED, linear));
    out.notes.push(format!(
        "with fm_final_relu = false on both leaves: R@1 {:.4} / {:.4}",
        lf.r_at[&1], lb.r_at[&1]
    ));
    out
}

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SLACK: f64 = 0.02;

/// Mean held-out mAP per ablation arm, plus the ordering violations.
fn ablation_table(head: Run) -> (String, Vec<String>) {
    let single_c: Vec<(&str, Run)> = vec![
        ("overlap-centric", Run { centricities: &[Centricity::Overlap], ..head }),
        ("leaf-centric", Run { centricities: &[Centricity::LeafNonoverlap], ..head }),
        ("base-centric", Run { centricities: &[Centricity::BaseNonoverlap], ..head }),
    ];
    let single_t: Vec<(&str, Run)> = InterTerm::ALL
        .iter()
        .map(|&t| (t.name(), Run { mask: LossMask::only(&[t]), ..head }))
        .collect();
    let mlp_fl = ("2-layer f_l", Run { fl_depth: 1, ..head });
    let runs: Vec<(&str, Run)> = std::iter::once(("default", head))
        .chain(single_c.iter().copied())
        .chain(single_t.iter().copied())
        .chain(std::iter::once(mlp_fl))
        .collect();

    let mut means = std::collections::BTreeMap::<&str, f64>::new();
    for &seed in &ABLATION_SEEDS {
        let w = world(seed);
        for &(name, run) in &runs {
            let pp = if seed == C6_SEED && name == "default" && head.fm_final_relu {
                c6_default_projector(&w)
            } else {
                train_leaf(&w, LEAF1, seed, run)
            };
            *means.entry(name).or_default() += leaf_to_base(&w, LEAF1, &pp).map / ABLATION_SEEDS.len() as f64;
        }
    }
    let all = means["default"];
    let mut failures = Vec::new();
    let mut check = |group: &str, others: &[&str]| {
        for o in others {
            if all < means[o] - SLACK {
                failures.push(format!("{group}: default {all:.4} < {o} {:.4} - {SLACK}", means[o]));
            }
        }
    };
    check("(a)", &single_c.iter().map(|r| r.0).collect::<Vec<_>>());
    check("(b)", &single_t.iter().map(|r| r.0).collect::<Vec<_>>());
    check("(c)", &[mlp_fl.0]);
    let table = means
        .iter()
        .map(|(k, v)| format!("{k} {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    (table, failures)
}

fn c8_ablations() -> Outcome {
    let (table, failures) = ablation_table(DEFAULT_RUN);
    if failures.is_empty() {
        return Outcome::new(true, format!("mean held-out mAP over 5 seeds: {table}"));
    }
    let mut out = Outcome::new(false, format!("{}; mean mAP: {table}", failures.join("; ")));
    let (linear, linear_failures) = ablation_table(Run { fm_final_relu: false, ..DEFAULT_RUN });
    out.notes.push(format!(
        "with fm_final_relu = false: {}; mean mAP: {linear}",
        if linear_failures.is_empty() { "all orderings hold".to_string() } else { linear_failures.join("; ") }
    ));
    out
}
