//! Losses, exact gradients, AdamW and the extension training loop.
//!
//! Only the leaf projector is trained. Base-space vectors enter every loss as
//! constants: no gradient is ever formed for them and they are never written.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use crate::aggregation::PseudoQuadruple;
use crate::error::{Error, Result};
use crate::projector::{normalize_rows, row_norms, MlpCache, Mode, ProjectorGrads, ProjectorParams};
use crate::rng::{rng, streams};
use crate::store::NORM_TOLERANCE;

pub mod gradcheck;

/// The four inter-space InfoNCE terms. The name lists the leaf-side input
/// first: `Avc` aligns projected leaf non-overlap with base non-overlap,
/// `Atc` projected leaf non-overlap with base overlap, `Tvc` projected leaf
/// overlap with base non-overlap, `Ttc` projected leaf overlap with base
/// overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterTerm {
    Avc,
    Atc,
    Tvc,
    Ttc,
}

impl InterTerm {
    pub const ALL: [InterTerm; 4] = [InterTerm::Avc, InterTerm::Atc, InterTerm::Tvc, InterTerm::Ttc];

    pub fn name(self) -> &'static str {
        match self {
            InterTerm::Avc => "avc",
            InterTerm::Atc => "atc",
            InterTerm::Tvc => "tvc",
            InterTerm::Ttc => "ttc",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for InterTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterTerm::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Invalid(format!("unknown loss term {s:?} (expected avc, atc, tvc or ttc)")))
    }
}

/// Which inter-space terms take part in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask([bool; 4]);

impl LossMask {
    pub const fn all() -> Self {
        Self([true; 4])
    }

    pub fn only(terms: &[InterTerm]) -> Self {
        let mut m = [false; 4];
        for t in terms {
            m[t.index()] = true;
        }
        Self(m)
    }

    pub fn contains(&self, t: InterTerm) -> bool {
        self.0[t.index()]
    }

    pub fn enabled(&self) -> impl Iterator<Item = InterTerm> + '_ {
        InterTerm::ALL.into_iter().filter(|t| self.contains(*t))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl Default for LossMask {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for LossMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.enabled().map(InterTerm::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let terms = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(InterTerm::from_str)
            .collect::<Result<Vec<_>>>()?;
        if terms.is_empty() {
            return Err(Error::Invalid("loss mask enables no terms".into()));
        }
        Ok(Self::only(&terms))
    }
}

/// How the gap-closing L2 loss treats the residual norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntraForm {
    /// `1/2 * mean ||r||^2`
    #[default]
    Squared,
    /// `1/2 * mean ||r||`, with the gradient guarded at `r = 0`.
    Norm,
}

const NORM_FORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lambda: f64,
    pub tau2: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub loss_mask: LossMask,
    pub intra_form: IntraForm,
    /// Run a finite-difference gradient check on the first batch.
    pub grad_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            epochs: 36,
            lr0: 1e-3,
            lambda: 0.1,
            tau2: 0.05,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            loss_mask: LossMask::all(),
            intra_form: IntraForm::Squared,
            grad_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.tau2 > 0.0) {
            return Err(Error::Invalid(format!("tau2 must be > 0, got {}", self.tau2)));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Invalid(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("lambda and weight_decay must be >= 0".into()));
        }
        if self.loss_mask.count() == 0 {
            return Err(Error::Invalid("loss mask enables no terms".into()));
        }
        Ok(())
    }
}

/// Individual loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub intra: f64,
    pub avc: f64,
    pub atc: f64,
    pub tvc: f64,
    pub ttc: f64,
}

impl LossTerms {
    pub fn inter(&self, t: InterTerm) -> f64 {
        match t {
            InterTerm::Avc => self.avc,
            InterTerm::Atc => self.atc,
            InterTerm::Tvc => self.tvc,
            InterTerm::Ttc => self.ttc,
        }
    }

    fn set_inter(&mut self, t: InterTerm, v: f64) {
        match t {
            InterTerm::Avc => self.avc = v,
            InterTerm::Atc => self.atc = v,
            InterTerm::Tvc => self.tvc = v,
            InterTerm::Ttc => self.ttc = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub l_intra: f64,
    pub l_avc: f64,
    pub l_atc: f64,
    pub l_tvc: f64,
    pub l_ttc: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,lr,l_intra,l_avc,l_atc,l_tvc,l_ttc,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.l_intra, self.l_avc, self.l_atc, self.l_tvc, self.l_ttc, self.total
        )
    }
}

/// `lambda * intra + mean of enabled inter terms`.
pub fn total_loss(terms: &LossTerms, lambda: f64, mask: LossMask) -> f64 {
    let n = mask.count();
    if n == 0 {
        return lambda * terms.intra;
    }
    let inter: f64 = mask.enabled().map(|t| terms.inter(t)).sum();
    lambda * terms.intra + inter / n as f64
}

/// Coefficients of each term in a scalar objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveWeights {
    pub intra: f64,
    pub inter: [f64; 4],
}

impl ObjectiveWeights {
    /// The training objective: `lambda` on the intra term and `1/|enabled|`
    /// on each enabled inter term.
    pub fn training(lambda: f64, mask: LossMask) -> Self {
        let n = mask.count().max(1) as f64;
        let mut inter = [0.0; 4];
        for t in mask.enabled() {
            inter[t.index()] = 1.0 / n;
        }
        Self { intra: lambda, inter }
    }

    pub fn intra_only() -> Self {
        Self {
            intra: 1.0,
            inter: [0.0; 4],
        }
    }

    pub fn inter_only(t: InterTerm) -> Self {
        let mut inter = [0.0; 4];
        inter[t.index()] = 1.0;
        Self { intra: 0.0, inter }
    }

    pub fn value(&self, terms: &LossTerms) -> f64 {
        self.intra * terms.intra
            + InterTerm::ALL
                .iter()
                .map(|&t| self.inter[t.index()] * terms.inter(t))
                .sum::<f64>()
    }
}

/// `1/2 * 1/B * sum_i ||out_i - target_i||` (squared or plain norm) and its
/// gradient with respect to `out`.
pub fn intra_mcr_loss(
    fl_out: &Array2<f64>,
    target: &Array2<f64>,
    form: IntraForm,
) -> Result<(f64, Array2<f64>)> {
    if fl_out.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "intra loss inputs differ: {:?} vs {:?}",
            fl_out.dim(),
            target.dim()
        )));
    }
    let b = fl_out.nrows();
    if b == 0 {
        return Err(Error::Shape("intra loss needs at least one row".into()));
    }
    let bf = b as f64;
    let diff = fl_out - target;
    match form {
        IntraForm::Squared => {
            let loss = 0.5 * diff.iter().map(|v| v * v).sum::<f64>() / bf;
            Ok((loss, diff / bf))
        }
        IntraForm::Norm => {
            let norms = diff.map_axis(Axis(1), |r| r.dot(&r).sqrt());
            let loss = 0.5 * norms.sum() / bf;
            let scale = norms.mapv(|n| 1.0 / (2.0 * bf * n.max(NORM_FORM_EPS)));
            Ok((loss, diff * &scale.insert_axis(Axis(1))))
        }
    }
}

fn check_unit_rows(x: &Array2<f64>, what: &str) -> Result<()> {
    for (i, r) in x.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Invalid(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE with diagonal positives. Returns the loss and the
/// gradients with respect to `x` and `z`.
pub fn info_nce(x: &Array2<f64>, z: &Array2<f64>, tau2: f64) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if x.dim() != z.dim() {
        return Err(Error::Shape(format!("InfoNCE inputs differ: {:?} vs {:?}", x.dim(), z.dim())));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("InfoNCE needs at least one row".into()));
    }
    if !(tau2 > 0.0) {
        return Err(Error::Invalid(format!("tau2 must be > 0, got {tau2}")));
    }
    check_unit_rows(x, "x")?;
    check_unit_rows(z, "z")?;
    Ok(info_nce_unchecked(x, z, tau2, true))
}

pub(crate) fn info_nce_unchecked(
    x: &Array2<f64>,
    z: &Array2<f64>,
    tau2: f64,
    with_grad: bool,
) -> (f64, Array2<f64>, Array2<f64>) {
    let b = x.nrows();
    let s = x.dot(&z.t()) / tau2;
    let row_lse: Array1<f64> = s.map_axis(Axis(1), |r| log_sum_exp(r.iter().copied()));
    let col_lse: Array1<f64> = s.map_axis(Axis(0), |c| log_sum_exp(c.iter().copied()));
    let mut acc = 0.0;
    for i in 0..b {
        acc += 2.0 * s[[i, i]] - row_lse[i] - col_lse[i];
    }
    let loss = -acc / (2.0 * b as f64);
    if !with_grad {
        return (loss, Array2::zeros((0, 0)), Array2::zeros((0, 0)));
    }
    // dL/dS = (P_row + P_col - 2I) / 2B
    let scale = 1.0 / (2.0 * b as f64);
    let mut ds = Array2::from_shape_fn((b, b), |(i, j)| {
        ((s[[i, j]] - row_lse[i]).exp() + (s[[i, j]] - col_lse[j]).exp()) * scale
    });
    for i in 0..b {
        ds[[i, i]] -= 2.0 * scale;
    }
    let gx = ds.dot(z) / tau2;
    let gz = ds.t().dot(x) / tau2;
    (loss, gx, gz)
}

/// Backward through `n = o / max(||o||, eps)`.
fn normalize_backward(raw: &Array2<f64>, grad_n: &Array2<f64>) -> Array2<f64> {
    let norms = row_norms(raw);
    let mut out = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let r = norms[i];
        let o = raw.row(i);
        let g = grad_n.row(i);
        if r <= crate::projector::NORMALIZE_EPS {
            out.row_mut(i).assign(&(&g / r));
            continue;
        }
        let n = &o / r;
        let dot = n.dot(&g);
        out.row_mut(i).assign(&((&g - &(&n * dot)) / r));
    }
    out
}

/// A batch of quadruples as dense f64 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadBatch {
    pub leaf_nonoverlap: Array2<f64>,
    pub leaf_overlap: Array2<f64>,
    pub base_overlap: Array2<f64>,
    pub base_nonoverlap: Array2<f64>,
}

impl QuadBatch {
    pub fn gather(quads: &[PseudoQuadruple], indices: &[usize]) -> Result<Self> {
        let first = quads
            .first()
            .ok_or_else(|| Error::Invalid("empty quadruple set".into()))?;
        let dl = first.leaf_nonoverlap.len();
        let db = first.base_overlap.len();
        let pick = |get: fn(&PseudoQuadruple) -> &Vec<f32>, d: usize| -> Result<Array2<f64>> {
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                let v = get(&quads[i]);
                if v.len() != d {
                    return Err(Error::Shape(format!("quadruple {i} has a member of dim {}, expected {d}", v.len())));
                }
                data.extend(v.iter().map(|&x| x as f64));
            }
            Array2::from_shape_vec((indices.len(), d), data).map_err(|e| Error::Shape(e.to_string()))
        };
        Ok(Self {
            leaf_nonoverlap: pick(|q| &q.leaf_nonoverlap, dl)?,
            leaf_overlap: pick(|q| &q.leaf_overlap, dl)?,
            base_overlap: pick(|q| &q.base_overlap, db)?,
            base_nonoverlap: pick(|q| &q.base_nonoverlap, db)?,
        })
    }

    pub fn all(quads: &[PseudoQuadruple]) -> Result<Self> {
        let idx: Vec<usize> = (0..quads.len()).collect();
        Self::gather(quads, &idx)
    }

    pub fn len(&self) -> usize {
        self.leaf_nonoverlap.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss values and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub terms: LossTerms,
    /// Weighted objective value.
    pub value: f64,
    pub grads: ProjectorGrads,
    caches: [MlpCache; 3],
}

impl Objective {
    /// Sign pattern of every rectifier input in the forward pass. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.caches.iter().flat_map(|c| c.relu_pattern()).collect()
    }
}

/// Forward and backward pass of a weighted objective on one batch. The
/// projector is read in its current mode; running statistics are not
/// updated (see [`apply_running_stats`]).
pub fn evaluate_objective(
    pp: &ProjectorParams,
    batch: &QuadBatch,
    weights: &ObjectiveWeights,
    tau2: f64,
    form: IntraForm,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let d = &pp.descriptor;
    if batch.leaf_nonoverlap.ncols() != d.leaf_dim || batch.base_overlap.ncols() != d.base_dim {
        return Err(Error::Shape(format!(
            "batch dims (leaf {}, base {}) do not match projector (leaf {}, base {})",
            batch.leaf_nonoverlap.ncols(),
            batch.base_overlap.ncols(),
            d.leaf_dim,
            d.base_dim
        )));
    }
    let mode = pp.mode;
    let (u, cache_l) = pp.f_l.forward_cached(&batch.leaf_nonoverlap, mode)?;
    let (intra, d_u_intra) = intra_mcr_loss(&u, &batch.leaf_overlap, form)?;
    let (a_raw, cache_a) = pp.f_m.forward_cached(&u, mode)?;
    let (t_raw, cache_t) = pp.f_m.forward_cached(&batch.leaf_overlap, mode)?;
    let a_hat = normalize_rows(&a_raw);
    let t_hat = normalize_rows(&t_raw);
    let v_base = normalize_rows(&batch.base_nonoverlap);
    let t_base = normalize_rows(&batch.base_overlap);

    let mut terms = LossTerms {
        intra,
        ..Default::default()
    };
    let mut g_a = Array2::zeros(a_hat.dim());
    let mut g_t = Array2::zeros(t_hat.dim());
    for term in InterTerm::ALL {
        let (leaf, base, g_leaf) = match term {
            InterTerm::Avc => (&a_hat, &v_base, &mut g_a),
            InterTerm::Atc => (&a_hat, &t_base, &mut g_a),
            InterTerm::Tvc => (&t_hat, &v_base, &mut g_t),
            InterTerm::Ttc => (&t_hat, &t_base, &mut g_t),
        };
        let w = weights.inter[term.index()];
        let (loss, gx, _) = info_nce_unchecked(leaf, base, tau2, w != 0.0);
        terms.set_inter(term, loss);
        if w != 0.0 {
            g_leaf.scaled_add(w, &gx);
        }
    }

    let mut grads = ProjectorGrads::zeros_like(pp);
    let (g_u_from_a, fm_a) = pp.f_m.backward(&cache_a, &normalize_backward(&a_raw, &g_a));
    let (_, fm_t) = pp.f_m.backward(&cache_t, &normalize_backward(&t_raw, &g_t));
    grads.f_m.add_assign(&fm_a);
    grads.f_m.add_assign(&fm_t);
    let g_u = g_u_from_a + &(d_u_intra * weights.intra);
    let (_, fl) = pp.f_l.backward(&cache_l, &g_u);
    grads.f_l.add_assign(&fl);

    Ok(Objective {
        value: weights.value(&terms),
        terms,
        grads,
        caches: [cache_l, cache_a, cache_t],
    })
}

/// Folds the batch statistics of a train-mode objective evaluation into the
/// projector's running statistics (`f_l`, then `f_m` for the non-overlap and
/// overlap passes in that order).
pub fn apply_running_stats(pp: &mut ProjectorParams, obj: &Objective) {
    if pp.mode != Mode::Train {
        return;
    }
    let [l, a, t] = &obj.caches;
    pp.f_l.update_running_stats(l);
    pp.f_m.update_running_stats(a);
    pp.f_m.update_running_stats(t);
}

/// The four inter-space InfoNCE terms and the gradient of their masked mean.
pub fn dense_alignment_loss(
    batch: &QuadBatch,
    pp: &ProjectorParams,
    tau2: f64,
    mask: LossMask,
) -> Result<(LossTerms, ProjectorGrads)> {
    let w = ObjectiveWeights::training(0.0, mask);
    let obj = evaluate_objective(pp, batch, &w, tau2, IntraForm::Squared)?;
    let mut terms = obj.terms;
    terms.intra = 0.0;
    Ok((terms, obj.grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(pp: &ProjectorParams) -> Self {
        let shapes: Vec<usize> = pp.flat_params().iter().map(Vec::len).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Updates one tensor in place. `step` is the 1-based step count used for
    /// bias correction.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        theta: &mut [f64],
        grad: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        step: u64,
        lr: f64,
        decay: bool,
    ) {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..theta.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + wd * theta[i]);
        }
    }
}

/// One AdamW step over every trainable tensor. Only linear weights are
/// decayed.
pub fn adamw_step(
    pp: &mut ProjectorParams,
    grads: &ProjectorGrads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let flat = grads.flat();
    if flat.len() != state.m.len() {
        return Err(Error::Shape("gradient layout does not match optimizer state".into()));
    }
    state.step += 1;
    let opt = AdamW::from_config(cfg);
    let step = state.step;
    let mut idx = 0;
    let mut shape_err = None;
    pp.visit_params_mut(|kind, theta| {
        let g = &flat[idx];
        if g.len() != theta.len() || state.m[idx].len() != theta.len() {
            shape_err.get_or_insert(idx);
        } else {
            opt.update(theta, g, &mut state.m[idx], &mut state.v[idx], step, lr, kind.decays());
        }
        idx += 1;
    });
    match shape_err {
        Some(i) => Err(Error::Shape(format!("parameter tensor {i} shape mismatch"))),
        None => Ok(()),
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {total_steps} steps")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Number of optimizer steps in one epoch: full batches plus a final partial
/// batch if it holds at least two samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

/// Trains the leaf projector on a fixed set of pseudo quadruples. Returns
/// the trained projector (in eval mode) and one report per optimizer step.
pub fn train_extension(
    quads: &[PseudoQuadruple],
    pp: ProjectorParams,
    cfg: &TrainConfig,
) -> Result<(ProjectorParams, Vec<LossReport>)> {
    train_extension_with(quads, pp, cfg, |_, _| Ok(()))
}

/// As [`train_extension`], calling `on_epoch(epoch, params)` after every
/// epoch (1-based) so callers can write intermediate checkpoints.
pub fn train_extension_with(
    quads: &[PseudoQuadruple],
    mut pp: ProjectorParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ProjectorParams) -> Result<()>,
) -> Result<(ProjectorParams, Vec<LossReport>)> {
    cfg.validate()?;
    let n = quads.len();
    if n == 0 {
        return Err(Error::Invalid("empty training set".into()));
    }
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::Invalid(format!("training set of {n} cannot form a batch of >= 2")));
    }
    let total_steps = per_epoch * cfg.epochs;
    let weights = ObjectiveWeights::training(cfg.lambda, cfg.loss_mask);
    let mut state = OptimizerState::new(&pp);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = rng(cfg.seed, streams::EPOCH);
    let mut history = Vec::with_capacity(total_steps);
    pp.set_mode(Mode::Train);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        for chunk in order.chunks(cfg.batch_size).take(per_epoch) {
            let step = history.len();
            let batch = QuadBatch::gather(quads, chunk)?;
            if step == 0 && cfg.grad_check {
                gradcheck::assert_batch(&pp, &batch, &weights, cfg)?;
            }
            let lr = cosine_lr(step, total_steps, cfg.lr0)?;
            let obj = evaluate_objective(&pp, &batch, &weights, cfg.tau2, cfg.intra_form)?;
            let total = total_loss(&obj.terms, cfg.lambda, cfg.loss_mask);
            if !total.is_finite() {
                return Err(Error::Diverged { step, loss: total });
            }
            apply_running_stats(&mut pp, &obj);
            adamw_step(&mut pp, &obj.grads, &mut state, lr, cfg)?;
            history.push(LossReport {
                step,
                lr,
                l_intra: obj.terms.intra,
                l_avc: obj.terms.avc,
                l_atc: obj.terms.atc,
                l_tvc: obj.terms.tvc,
                l_ttc: obj.terms.ttc,
                total,
            });
        }
        on_epoch(epoch + 1, &pp)?;
    }
    pp.set_mode(Mode::Eval);
    Ok((pp, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Centricity;
    use crate::projector::{init_projector, ProjectorDescriptor};
    use ndarray::array;

    #[test]
    fn intra_forms_on_three_four_five() {
        let out = array![[3.0, 4.0]];
        let tgt = array![[0.0, 0.0]];
        assert_eq!(intra_mcr_loss(&out, &tgt, IntraForm::Squared).unwrap().0, 12.5);
        assert_eq!(intra_mcr_loss(&out, &tgt, IntraForm::Norm).unwrap().0, 2.5);
        let (l, g) = intra_mcr_loss(&tgt, &tgt, IntraForm::Norm).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(intra_mcr_loss(&out, &array![[1.0]], IntraForm::Squared).is_err());
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let x = array![[0.6, 0.8]];
        let z = array![[1.0, 0.0]];
        let (l, gx, _) = info_nce(&x, &z, 0.05).unwrap();
        assert_eq!(l, 0.0);
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn info_nce_rejects_unnormalized() {
        let x = array![[2.0, 0.0]];
        assert!(info_nce(&x, &x, 0.05).is_err());
        assert!(info_nce(&array![[1.0, 0.0]], &array![[1.0, 0.0], [0.0, 1.0]], 0.05).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = LossTerms {
            intra: 10.0,
            avc: 1.0,
            atc: 2.0,
            tvc: 3.0,
            ttc: 4.0,
        };
        assert!((total_loss(&t, 0.1, LossMask::all()) - 3.5).abs() < 1e-12);
        assert_eq!(total_loss(&t, 0.0, LossMask::only(&[InterTerm::Ttc])), 4.0);
        let d = TrainConfig::default();
        assert_eq!(d.lambda, 0.1);
        assert_eq!(ObjectiveWeights::training(d.lambda, d.loss_mask).inter, [0.25; 4]);
    }

    #[test]
    fn loss_mask_parse_and_display() {
        let m: LossMask = "ttc, avc".parse().unwrap();
        assert_eq!(m.to_string(), "avc,ttc");
        assert!("".parse::<LossMask>().is_err());
        assert!("xyz".parse::<LossMask>().is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3).unwrap(), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 1e-3).is_err());
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        let mut theta = [0.3, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        opt.update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, true);
        assert_eq!(theta, [0.3, -2.0]);
    }

    #[test]
    fn adamw_pure_decay() {
        let opt = AdamW::from_config(&TrainConfig::default());
        let mut theta = [0.3, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        opt.update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, true);
        assert!((theta[0] - 0.3 * (1.0 - 1e-5)).abs() < 1e-15);
        assert!((theta[1] + 2.0 * (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_step_hand_oracle() {
        // m = 0.1, v = 0.001, both bias corrections give m_hat = v_hat = 1
        let opt = AdamW::from_config(&TrainConfig::default());
        let mut theta = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        opt.update(&mut theta, &[1.0], &mut m, &mut v, 1, 1e-3, true);
        let expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01 * 1.0);
        assert!((theta[0] - expect).abs() < 1e-15, "{}", theta[0]);
        assert!((theta[0] - 0.99899).abs() < 1e-8);
    }

    #[test]
    fn steps_drop_singleton_tail() {
        assert_eq!(steps_per_epoch(10, 4), 3);
        assert_eq!(steps_per_epoch(9, 4), 2);
        assert_eq!(steps_per_epoch(8, 4), 2);
        assert_eq!(steps_per_epoch(1, 4), 0);
    }

    fn toy_quads(n: usize, d: usize) -> Vec<PseudoQuadruple> {
        let unit = |seed: usize| {
            let v: Vec<f64> = (0..d).map(|j| ((seed * 31 + j * 17) as f64 * 0.7).sin()).collect();
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| (x / nrm) as f32).collect::<Vec<f32>>()
        };
        (0..n)
            .map(|i| PseudoQuadruple {
                leaf_nonoverlap: unit(4 * i),
                leaf_overlap: unit(4 * i + 1),
                base_overlap: unit(4 * i + 2),
                base_nonoverlap: unit(4 * i + 3),
                centricity: Centricity::Overlap,
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let quads = toy_quads(12, 4);
        let pp = init_projector(ProjectorDescriptor::new(4, 4), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            lr0: 0.0,
            ..Default::default()
        };
        let (trained, hist) = train_extension(&quads, pp.clone(), &cfg).unwrap();
        assert_eq!(hist.len(), 6);
        assert_eq!(trained.flat_params(), pp.flat_params());
    }

    #[test]
    fn empty_training_set_errors() {
        let pp = init_projector(ProjectorDescriptor::new(4, 4), 1).unwrap();
        assert!(train_extension(&[], pp, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let quads = toy_quads(8, 4);
        let mut pp = init_projector(ProjectorDescriptor::new(4, 4), 1).unwrap();
        pp.f_l.blocks[0].linear.weight[[0, 0]] = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        };
        match train_extension(&quads, pp, &cfg) {
            Err(Error::Diverged { step: 0, .. }) => {}
            other => panic!("expected divergence at step 0, got {other:?}"),
        }
    }

    #[test]
    fn history_rows_satisfy_total_identity() {
        let quads = toy_quads(10, 4);
        let pp = init_projector(ProjectorDescriptor::new(4, 4), 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 5,
            epochs: 1,
            loss_mask: LossMask::only(&[InterTerm::Atc, InterTerm::Tvc]),
            ..Default::default()
        };
        let (_, hist) = train_extension(&quads, pp, &cfg).unwrap();
        for r in hist {
            let expect = 0.1 * r.l_intra + (r.l_atc + r.l_tvc) / 2.0;
            assert!((r.total - expect).abs() < 1e-6);
        }
    }
}
