//! The decoupled projector: `f_l`, an affine map that closes the modality gap
//! inside the leaf space, followed by `f_m`, a batch-normalized MLP that maps
//! the leaf space into the base space.
//!
//! Every forward pass can record a cache so the training module can run an
//! exact backward pass without a general autodiff tape.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::codec::{put_f32, put_f64, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::rng::{rng, streams};

pub const EXP1_MAGIC: &[u8; 4] = b"EXP1";
pub const EXP1_VERSION: u32 = 1;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const MAX_STAGES: usize = 5;
const MAX_CHECKPOINT_DIM: usize = 1 << 16;
/// Rows shorter than this are not rescaled by [`normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum,
            eps,
        }
    }
}

/// Affine map, optional batch normalization, optional rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub blocks: Vec<Block>,
}

/// Per-block intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input: Array2<f64>,
    /// Normalized pre-activation `(z - mean) / std`.
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    /// Input to the rectifier.
    pre_relu: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    blocks: Vec<BlockCache>,
}

impl MlpCache {
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.pre_relu.iter().map(|&v| v > 0.0)).collect()
    }
}

/// Gradients for one block, aligned with [`Block`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub blocks: Vec<BlockGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            blocks: mlp
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    weight: Array2::zeros(b.linear.weight.dim()),
                    bias: Array1::zeros(b.linear.bias.len()),
                    gamma: b.norm.as_ref().map(|n| Array1::zeros(n.gamma.len())),
                    beta: b.norm.as_ref().map(|n| Array1::zeros(n.beta.len())),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.weight += &b.weight;
            a.bias += &b.bias;
            if let (Some(x), Some(y)) = (a.gamma.as_mut(), b.gamma.as_ref()) {
                *x += y;
            }
            if let (Some(x), Some(y)) = (a.beta.as_mut(), b.beta.as_ref()) {
                *x += y;
            }
        }
    }
}

pub fn forward_linear(params: &Linear, batch: &Array2<f64>) -> Result<Array2<f64>> {
    if batch.ncols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "linear layer expects {} inputs, batch has {}",
            params.in_dim(),
            batch.ncols()
        )));
    }
    if params.bias.len() != params.out_dim() {
        return Err(Error::Shape("bias length does not match weight rows".into()));
    }
    Ok(batch.dot(&params.weight.t()) + &params.bias)
}

impl Mlp {
    pub fn in_dim(&self) -> usize {
        self.blocks[0].linear.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").linear.out_dim()
    }

    /// A copy with every rectifier switched off.
    pub fn without_activations(&self) -> Mlp {
        let mut m = self.clone();
        for b in &mut m.blocks {
            b.relu = false;
        }
        m
    }

    fn check_input(&self, batch: &Array2<f64>, mode: Mode) -> Result<()> {
        if batch.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, batch has {}",
                self.in_dim(),
                batch.ncols()
            )));
        }
        let has_norm = self.blocks.iter().any(|b| b.norm.is_some());
        if mode == Mode::Train && has_norm && batch.nrows() < 2 {
            return Err(Error::Invalid(format!(
                "train-mode batch normalization needs at least 2 samples, got {}",
                batch.nrows()
            )));
        }
        Ok(())
    }

    /// Pure forward pass. In train mode batch statistics are used and returned
    /// in the cache; running statistics are left untouched.
    pub(crate) fn forward_cached(
        &self,
        batch: &Array2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(batch, mode)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let z = forward_linear(&block.linear, &x)?;
            let mut cache = BlockCache {
                input: x,
                xhat: None,
                inv_std: None,
                batch_mean: None,
                batch_var: None,
                pre_relu: Array2::zeros((0, 0)),
            };
            let y = match (&block.norm, mode) {
                (None, _) => z,
                (Some(bn), Mode::Eval) => {
                    let inv = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let xhat = (z - &bn.running_mean) * &inv;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    cache.xhat = Some(xhat);
                    cache.inv_std = Some(inv);
                    y
                }
                (Some(bn), Mode::Train) => {
                    let n = z.nrows() as f64;
                    let mean = z.sum_axis(Axis(0)) / n;
                    let centered = &z - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let xhat = centered * &inv;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    cache.xhat = Some(xhat);
                    cache.inv_std = Some(inv);
                    cache.batch_mean = Some(mean);
                    cache.batch_var = Some(var);
                    y
                }
            };
            x = if block.relu { y.mapv(|v| v.max(0.0)) } else { y.clone() };
            cache.pre_relu = y;
            caches.push(cache);
        }
        Ok((x, MlpCache { blocks: caches }))
    }

    pub fn forward(&self, batch: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward_cached(batch, mode)?.0)
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// statistics: `running = (1 - momentum) * running + momentum * batch`.
    /// The batch variance is the unbiased estimate.
    pub(crate) fn update_running_stats(&mut self, cache: &MlpCache) {
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            let (Some(bn), Some(mean), Some(var)) =
                (block.norm.as_mut(), c.batch_mean.as_ref(), c.batch_var.as_ref())
            else {
                continue;
            };
            let n = c.input.nrows() as f64;
            let unbiased = var * (n / (n - 1.0));
            let m = bn.momentum;
            bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
            bn.running_var = &bn.running_var * (1.0 - m) + unbiased * m;
        }
    }

    /// Backpropagates `grad_out` through a recorded forward pass. Returns the
    /// gradient with respect to the input and the parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, MlpGrads) {
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut g = grad_out.clone();
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            if block.relu {
                g.zip_mut_with(&c.pre_relu, |gv, &y| {
                    if y <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let (dz, dgamma, dbeta) = match &block.norm {
                None => (g, None, None),
                Some(bn) => match (&c.xhat, &c.inv_std, &c.batch_mean) {
                    (Some(xhat), Some(inv), Some(_)) => {
                        let n = g.nrows() as f64;
                        let dgamma = (&g * xhat).sum_axis(Axis(0));
                        let dbeta = g.sum_axis(Axis(0));
                        let dxhat = &g * &bn.gamma;
                        let sum_dxhat = dxhat.sum_axis(Axis(0));
                        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                        let dz = ((dxhat * n - &sum_dxhat) - xhat * &sum_dxhat_xhat) * &(inv / n);
                        (dz, Some(dgamma), Some(dbeta))
                    }
                    (Some(xhat), Some(inv), None) => {
                        // eval mode: statistics are constants
                        let dgamma = (&g * xhat).sum_axis(Axis(0));
                        let dbeta = g.sum_axis(Axis(0));
                        let dz = &g * &(&bn.gamma * inv);
                        (dz, Some(dgamma), Some(dbeta))
                    }
                    _ => unreachable!("batch-norm cache always records xhat and inv_std"),
                },
            };
            let dw = dz.t().dot(&c.input);
            let db = dz.sum_axis(Axis(0));
            g = dz.dot(&block.linear.weight);
            grads.push(BlockGrads {
                weight: dw,
                bias: db,
                gamma: dgamma,
                beta: dbeta,
            });
        }
        grads.reverse();
        (g, MlpGrads { blocks: grads })
    }
}

/// Forward pass through `f_m` blocks; in train mode the running statistics
/// are updated from this batch.
pub fn forward_mlp(params: &mut Mlp, batch: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
    let (out, cache) = params.forward_cached(batch, mode)?;
    if mode == Mode::Train {
        params.update_running_stats(&cache);
    }
    Ok(out)
}

/// Architecture of a projector. Block layout is derived from these fields so
/// a checkpoint only needs to store the descriptor and a flat parameter list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorDescriptor {
    pub leaf_dim: usize,
    pub base_dim: usize,
    pub hidden_dim: usize,
    /// 0 = a single linear layer; `k` = `k` MLP stages ending in a bare linear.
    pub fl_depth: usize,
    /// 0 = a single linear layer; `k` = `k` stages of
    /// (Linear, BatchNorm, ReLU, Linear, BatchNorm, ReLU).
    pub fm_stages: usize,
    /// Whether the last `f_m` block ends in a rectifier. Table-style
    /// layouts do; without it the output can take negative coordinates.
    pub fm_final_relu: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ProjectorDescriptor {
    /// Two `f_m` stages with a hidden width of twice the leaf width, i.e.
    /// 512 -> 1024 -> 512 -> 1024 -> 512 for 512-wide spaces.
    pub fn new(leaf_dim: usize, base_dim: usize) -> Self {
        Self {
            leaf_dim,
            base_dim,
            hidden_dim: 2 * leaf_dim.max(base_dim),
            fl_depth: 0,
            fm_stages: 2,
            fm_final_relu: true,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.leaf_dim == 0 || self.base_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Invalid(format!(
                "projector dims must be >= 1: leaf {}, base {}, hidden {}",
                self.leaf_dim, self.base_dim, self.hidden_dim
            )));
        }
        if self.fl_depth > MAX_STAGES || self.fm_stages > MAX_STAGES {
            return Err(Error::Invalid(format!(
                "fl_depth {} / fm_stages {} exceed the maximum of {MAX_STAGES}",
                self.fl_depth, self.fm_stages
            )));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::Invalid(format!("bn_eps must be > 0, got {}", self.bn_eps)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Invalid(format!(
                "bn_momentum must lie in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }

    /// `(in, out, batchnorm, relu)` for every block of `f_l`.
    pub fn fl_layout(&self) -> Vec<(usize, usize, bool, bool)> {
        let (d, h) = (self.leaf_dim, self.hidden_dim);
        if self.fl_depth == 0 {
            return vec![(d, d, false, false)];
        }
        (0..self.fl_depth)
            .flat_map(|_| [(d, h, true, true), (h, d, false, false)])
            .collect()
    }

    /// `(in, out, batchnorm, relu)` for every block of `f_m`.
    pub fn fm_layout(&self) -> Vec<(usize, usize, bool, bool)> {
        let (h, o) = (self.hidden_dim, self.base_dim);
        if self.fm_stages == 0 {
            return vec![(self.leaf_dim, o, false, false)];
        }
        let mut layout: Vec<_> = (0..self.fm_stages)
            .flat_map(|s| {
                let i = if s == 0 { self.leaf_dim } else { o };
                [(i, h, true, true), (h, o, true, true)]
            })
            .collect();
        if let Some(last) = layout.last_mut() {
            last.3 = self.fm_final_relu;
        }
        layout
    }

    pub fn param_count(&self) -> usize {
        self.fl_layout()
            .into_iter()
            .chain(self.fm_layout())
            .map(|(i, o, bn, _)| i * o + o + if bn { 4 * o } else { 0 })
            .sum()
    }

    /// Lines of `key = value` used when reporting a descriptor mismatch.
    pub fn describe(&self) -> Vec<String> {
        vec![
            format!("leaf_dim = {}", self.leaf_dim),
            format!("base_dim = {}", self.base_dim),
            format!("hidden_dim = {}", self.hidden_dim),
            format!("fl_depth = {}", self.fl_depth),
            format!("fm_stages = {}", self.fm_stages),
            format!("fm_final_relu = {}", self.fm_final_relu),
            format!("bn_eps = {}", self.bn_eps),
            format!("bn_momentum = {}", self.bn_momentum),
        ]
    }

    pub fn diff(&self, other: &ProjectorDescriptor) -> Vec<String> {
        self.describe()
            .into_iter()
            .zip(other.describe())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {a}, checkpoint has {b}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub descriptor: ProjectorDescriptor,
    pub f_l: Mlp,
    pub f_m: Mlp,
    pub mode: Mode,
}

/// Which trainable tensor a parameter slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    /// Only linear weights receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

fn build_mlp(
    layout: &[(usize, usize, bool, bool)],
    desc: &ProjectorDescriptor,
    rng: &mut impl Rng,
) -> Mlp {
    Mlp {
        blocks: layout
            .iter()
            .map(|&(i, o, bn, relu)| {
                let bound = 1.0 / (i as f64).sqrt();
                Block {
                    linear: Linear {
                        weight: Array2::from_shape_simple_fn((o, i), || rng.random_range(-bound..=bound)),
                        bias: Array1::zeros(o),
                    },
                    norm: bn.then(|| BatchNorm::new(o, desc.bn_momentum, desc.bn_eps)),
                    relu,
                }
            })
            .collect(),
    }
}

/// Fresh parameters: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// zero biases, identity batch normalization.
pub fn init_projector(desc: ProjectorDescriptor, seed: u64) -> Result<ProjectorParams> {
    desc.validate()?;
    let mut r = rng(seed, streams::INIT);
    let f_l = build_mlp(&desc.fl_layout(), &desc, &mut r);
    let f_m = build_mlp(&desc.fm_layout(), &desc, &mut r);
    Ok(ProjectorParams {
        descriptor: desc,
        f_l,
        f_m,
        mode: Mode::Train,
    })
}

/// Scales each row to unit norm; rows with norm below [`NORMALIZE_EPS`] are
/// divided by the epsilon instead.
pub fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let norms = row_norms(x);
    x / &norms.insert_axis(Axis(1))
}

pub(crate) fn row_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORMALIZE_EPS))
}

impl ProjectorParams {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_leaf_batch(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.descriptor.leaf_dim {
            return Err(Error::Shape(format!(
                "projector expects leaf dim {}, batch has {}",
                self.descriptor.leaf_dim,
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// `f_m(f_l(x))` without the final normalization.
    pub fn raw_nonoverlap(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_leaf_batch(batch)?;
        let u = self.f_l.forward(batch, self.mode)?;
        self.f_m.forward(&u, self.mode)
    }

    /// `f_m(x)` without the final normalization.
    pub fn raw_overlap(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_leaf_batch(batch)?;
        self.f_m.forward(batch, self.mode)
    }

    /// Maps non-overlapping leaf embeddings into the base space:
    /// unit-normalized `f_m(f_l(x))`. Pure; train mode uses batch statistics
    /// without updating running statistics.
    pub fn project_nonoverlap(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(normalize_rows(&self.raw_nonoverlap(batch)?))
    }

    /// Maps overlapping leaf embeddings into the base space:
    /// unit-normalized `f_m(x)`.
    pub fn project_overlap(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(normalize_rows(&self.raw_overlap(batch)?))
    }

    fn mlps(&self) -> [&Mlp; 2] {
        [&self.f_l, &self.f_m]
    }

    /// Visits every trainable tensor in declaration order:
    /// `f_l` blocks then `f_m` blocks; weight, bias, gamma, beta per block.
    pub fn visit_params(&self, mut f: impl FnMut(ParamKind, &[f64])) {
        for mlp in self.mlps() {
            for b in &mlp.blocks {
                f(ParamKind::Weight, b.linear.weight.as_slice().expect("standard layout"));
                f(ParamKind::Bias, b.linear.bias.as_slice().expect("standard layout"));
                if let Some(bn) = &b.norm {
                    f(ParamKind::Gamma, bn.gamma.as_slice().expect("standard layout"));
                    f(ParamKind::Beta, bn.beta.as_slice().expect("standard layout"));
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKind, &mut [f64])) {
        for mlp in [&mut self.f_l, &mut self.f_m] {
            for b in &mut mlp.blocks {
                f(ParamKind::Weight, b.linear.weight.as_slice_mut().expect("standard layout"));
                f(ParamKind::Bias, b.linear.bias.as_slice_mut().expect("standard layout"));
                if let Some(bn) = &mut b.norm {
                    f(ParamKind::Gamma, bn.gamma.as_slice_mut().expect("standard layout"));
                    f(ParamKind::Beta, bn.beta.as_slice_mut().expect("standard layout"));
                }
            }
        }
    }

    /// Trainable tensors flattened in visiting order.
    pub fn flat_params(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit_params(|_, p| out.push(p.to_vec()));
        out
    }
}

/// Gradients for a full projector, laid out like [`ProjectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub f_l: MlpGrads,
    pub f_m: MlpGrads,
}

impl ProjectorGrads {
    pub fn zeros_like(pp: &ProjectorParams) -> Self {
        Self {
            f_l: MlpGrads::zeros_like(&pp.f_l),
            f_m: MlpGrads::zeros_like(&pp.f_m),
        }
    }

    /// Gradient tensors flattened in the same order as
    /// [`ProjectorParams::visit_params`].
    pub fn flat(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for g in [&self.f_l, &self.f_m] {
            for b in &g.blocks {
                out.push(b.weight.iter().copied().collect());
                out.push(b.bias.to_vec());
                if let (Some(gm), Some(bt)) = (&b.gamma, &b.beta) {
                    out.push(gm.to_vec());
                    out.push(bt.to_vec());
                }
            }
        }
        out
    }
}

/// Serializes a projector as an EXP1 checkpoint:
///
/// ```text
/// "EXP1" | version u32 | leaf_dim u32 | base_dim u32 | hidden_dim u32
///        | fl_depth u32 | fm_stages u32 | fm_final_relu u32 (0 or 1)
///        | bn_eps f64 | bn_momentum f64
///        | param_count u32 | param_count f32
/// ```
///
/// Parameters follow block order (`f_l` then `f_m`): weight (row-major),
/// bias, then gamma, beta, running mean and running variance for blocks with
/// batch normalization.
pub fn encode_exp1(pp: &ProjectorParams) -> Result<Vec<u8>> {
    let d = &pp.descriptor;
    let mut out = Vec::with_capacity(64 + 4 * d.param_count());
    out.extend_from_slice(EXP1_MAGIC);
    put_u32(&mut out, EXP1_VERSION);
    let relu = usize::from(d.fm_final_relu);
    for v in [d.leaf_dim, d.base_dim, d.hidden_dim, d.fl_depth, d.fm_stages, relu] {
        put_u32(&mut out, to_u32(v, "descriptor field")?);
    }
    put_f64(&mut out, d.bn_eps);
    put_f64(&mut out, d.bn_momentum);
    put_u32(&mut out, to_u32(d.param_count(), "param count")?);
    for mlp in pp.mlps() {
        for b in &mlp.blocks {
            let mut put_all = |a: &mut dyn Iterator<Item = &f64>| {
                for &v in a {
                    put_f32(&mut out, v as f32);
                }
            };
            put_all(&mut b.linear.weight.iter());
            put_all(&mut b.linear.bias.iter());
            if let Some(bn) = &b.norm {
                put_all(&mut bn.gamma.iter());
                put_all(&mut bn.beta.iter());
                put_all(&mut bn.running_mean.iter());
                put_all(&mut bn.running_var.iter());
            }
        }
    }
    Ok(out)
}

/// Reads only the descriptor of an EXP1 checkpoint.
pub fn decode_exp1_descriptor(bytes: &[u8]) -> Result<ProjectorDescriptor> {
    read_descriptor(&mut Reader::new(bytes))
}

fn read_descriptor(r: &mut Reader<'_>) -> Result<ProjectorDescriptor> {
    r.magic(EXP1_MAGIC)?;
    let version = r.u32()?;
    if version != EXP1_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let desc = ProjectorDescriptor {
        leaf_dim: dims[0],
        base_dim: dims[1],
        hidden_dim: dims[2],
        fl_depth: dims[3],
        fm_stages: dims[4],
        fm_final_relu: match dims[5] {
            0 => false,
            1 => true,
            v => return Err(Error::Invalid(format!("fm_final_relu flag must be 0 or 1, got {v}"))),
        },
        bn_eps: r.f64()?,
        bn_momentum: r.f64()?,
    };
    desc.validate()?;
    if desc.leaf_dim > MAX_CHECKPOINT_DIM
        || desc.base_dim > MAX_CHECKPOINT_DIM
        || desc.hidden_dim > MAX_CHECKPOINT_DIM
    {
        return Err(Error::Invalid(format!(
            "checkpoint dims exceed {MAX_CHECKPOINT_DIM}"
        )));
    }
    Ok(desc)
}

/// Decodes an EXP1 checkpoint. The projector comes back in eval mode.
pub fn decode_exp1(bytes: &[u8]) -> Result<ProjectorParams> {
    let mut r = Reader::new(bytes);
    let desc = read_descriptor(&mut r)?;
    let count = r.u32()? as usize;
    if count != desc.param_count() {
        return Err(Error::Shape(format!(
            "checkpoint holds {count} parameters, descriptor implies {}",
            desc.param_count()
        )));
    }
    if r.remaining() != count * 4 {
        return Err(Error::PayloadLength {
            expected: count * 4,
            found: r.remaining(),
        });
    }
    let mut read_mlp = |layout: Vec<(usize, usize, bool, bool)>| -> Result<Mlp> {
        let mut blocks = Vec::with_capacity(layout.len());
        for (i, o, bn, relu) in layout {
            let mut vec = |n: usize| -> Result<Vec<f64>> {
                let v = r.f32_vec(n)?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Invalid("non-finite checkpoint parameter".into()));
                }
                Ok(v.into_iter().map(f64::from).collect())
            };
            let weight = Array2::from_shape_vec((o, i), vec(i * o)?)
                .map_err(|e| Error::Shape(e.to_string()))?;
            let bias = Array1::from(vec(o)?);
            let norm = if bn {
                let gamma = Array1::from(vec(o)?);
                let beta = Array1::from(vec(o)?);
                let running_mean = Array1::from(vec(o)?);
                let running_var = Array1::from(vec(o)?);
                if running_var.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Invalid("running variance must be > 0".into()));
                }
                Some(BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum: desc.bn_momentum,
                    eps: desc.bn_eps,
                })
            } else {
                None
            };
            blocks.push(Block {
                linear: Linear { weight, bias },
                norm,
                relu,
            });
        }
        Ok(Mlp { blocks })
    };
    let f_l = read_mlp(desc.fl_layout())?;
    let f_m = read_mlp(desc.fm_layout())?;
    Ok(ProjectorParams {
        descriptor: desc,
        f_l,
        f_m,
        mode: Mode::Eval,
    })
}
