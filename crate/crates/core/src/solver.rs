//! Measurement operators and latent-space solvers for linear inverse
//! problems.
//!
//! Three objectives over a frozen flow:
//! - likelihood-regularized: ‖A·F⁻¹(z) − y‖₁ + α·L(z)
//! - squared-residual baseline: ‖A·F⁻¹(z) − y‖² + γ‖z‖² (CSGM and GlowIP,
//!   differing only in initialization)
//! - MAP for denoising: ‖F⁻¹(z) − y‖²/(2σ²) + β·L(z)

use crate::error::{FlowError, Result};
use crate::model::{FlowModel, LatentState};
use crate::params::{Pass, PassKind};
use crate::tape::NodeId;
use crate::tensor::{Scalar, Tensor};
use crate::train::adam_update;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::time::{Duration, Instant};

#[derive(Clone)]
pub enum OperatorKind<T: Scalar> {
    /// A = I with additive Gaussian measurement noise.
    Denoise { noise_std: f64 },
    /// 3×3 mean filter per channel, valid mode: (C,H,W) → (C,H−2,W−2).
    Blur3x3,
    /// Zeroes a centered square per channel.
    InpaintCenter { mask_side: usize },
    /// Channel average: (C,H,W) → (1,H,W).
    Colorize,
    /// Arbitrary dense A applied to the flattened image.
    GenericMatrix { matrix: Tensor<T> },
}

#[derive(Clone)]
pub struct MeasurementOperator<T: Scalar> {
    pub kind: OperatorKind<T>,
    pub input_shape: (usize, usize, usize),
    pub output_shape: Vec<usize>,
}

impl<T: Scalar> MeasurementOperator<T> {
    pub fn denoise(input_shape: (usize, usize, usize), noise_std: f64) -> Self {
        let (c, h, w) = input_shape;
        MeasurementOperator {
            kind: OperatorKind::Denoise { noise_std },
            input_shape,
            output_shape: vec![c, h, w],
        }
    }

    /// Reads the noise level as √E[‖η‖²], i.e. per-entry std = level/√m.
    pub fn denoise_norm_based(input_shape: (usize, usize, usize), noise_level: f64) -> Self {
        let (c, h, w) = input_shape;
        let m = (c * h * w) as f64;
        Self::denoise(input_shape, noise_level / m.sqrt())
    }

    pub fn blur3(input_shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = input_shape;
        if h < 3 || w < 3 {
            return Err(FlowError::shape(format!(
                "blur3: spatial axes {h}x{w} too small for a 3x3 window"
            )));
        }
        Ok(MeasurementOperator {
            kind: OperatorKind::Blur3x3,
            input_shape,
            output_shape: vec![c, h - 2, w - 2],
        })
    }

    pub fn inpaint_center(input_shape: (usize, usize, usize), mask_side: usize) -> Result<Self> {
        let (c, h, w) = input_shape;
        if mask_side > h || mask_side > w {
            return Err(FlowError::shape(format!(
                "inpaint: mask side {mask_side} exceeds image {h}x{w}"
            )));
        }
        Ok(MeasurementOperator {
            kind: OperatorKind::InpaintCenter { mask_side },
            input_shape,
            output_shape: vec![c, h, w],
        })
    }

    pub fn colorize(input_shape: (usize, usize, usize)) -> Self {
        let (_, h, w) = input_shape;
        MeasurementOperator {
            kind: OperatorKind::Colorize,
            input_shape,
            output_shape: vec![1, h, w],
        }
    }

    pub fn generic(matrix: Tensor<T>, input_shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = input_shape;
        let n = c * h * w;
        if matrix.rank() != 2 || matrix.shape()[1] != n {
            return Err(FlowError::shape(format!(
                "generic operator: matrix {:?} vs flattened input length {n}",
                matrix.shape()
            )));
        }
        let m = matrix.shape()[0];
        Ok(MeasurementOperator {
            kind: OperatorKind::GenericMatrix { matrix },
            input_shape,
            output_shape: vec![m],
        })
    }

    /// Identity measurement map (denoising).
    pub fn is_identity(&self) -> bool {
        matches!(self.kind, OperatorKind::Denoise { .. })
    }

    pub fn noise_std(&self) -> f64 {
        match self.kind {
            OperatorKind::Denoise { noise_std } => noise_std,
            _ => 0.0,
        }
    }

    pub fn measurement_dim(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Records y = A·x on the tape; differentiable w.r.t. x.
    pub fn apply_nodes(&self, pass: &mut Pass<T>, x: NodeId) -> Result<NodeId> {
        let got = pass.tape.shape(x).to_vec();
        let (c, h, w) = self.input_shape;
        if got != [c, h, w] {
            return Err(FlowError::shape(format!(
                "measurement operator: input {got:?} vs expected [{c}, {h}, {w}]"
            )));
        }
        match &self.kind {
            OperatorKind::Denoise { .. } => Ok(x),
            OperatorKind::Blur3x3 => {
                let ninth = T::from_f64(1.0 / 9.0);
                let mut weight = Tensor::zeros(vec![c, c, 3, 3]);
                for ch in 0..c {
                    for p in 0..9 {
                        weight.data_mut()[(ch * c + ch) * 9 + p] = ninth;
                    }
                }
                let wid = pass.tape.constant(weight);
                let bid = pass.tape.constant(Tensor::zeros(vec![c]));
                pass.tape.conv2d(x, wid, bid, 0)
            }
            OperatorKind::InpaintCenter { mask_side } => {
                let mask = pass.tape.constant(inpaint_mask(self.input_shape, *mask_side));
                pass.tape.mul(x, mask)
            }
            OperatorKind::Colorize => {
                let weight = Tensor::full(vec![1, c, 1, 1], T::from_f64(1.0 / c as f64));
                let wid = pass.tape.constant(weight);
                let bid = pass.tape.constant(Tensor::zeros(vec![1]));
                pass.tape.conv2d(x, wid, bid, 0)
            }
            OperatorKind::GenericMatrix { matrix } => {
                let mid = pass.tape.constant(matrix.clone());
                let flat = pass.tape.reshape(x, vec![c * h * w])?;
                pass.tape.mat_vec(mid, flat)
            }
        }
    }

    /// Noise-free measurement A·x.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let store = crate::params::ParamStore::new();
        let mut pass = Pass::new(&store, PassKind::Eval);
        let xid = pass.tape.constant(x.clone());
        let y = self.apply_nodes(&mut pass, xid)?;
        Ok(pass.tape.value(y).clone())
    }

    /// y = A·x* + η; η is Gaussian for denoising and zero otherwise.
    pub fn measure<R: Rng>(&self, x_star: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let mut y = self.apply(x_star)?;
        let std = self.noise_std();
        if std > 0.0 {
            for v in y.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += T::from_f64(e * std);
            }
        }
        Ok(y)
    }

    /// Deterministic measurement with the noise stream derived from
    /// (seed, image index).
    pub fn measure_seeded(&self, x_star: &Tensor<T>, seed: u64, index: u64) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        self.measure(x_star, &mut rng)
    }
}

fn inpaint_mask<T: Scalar>(shape: (usize, usize, usize), side: usize) -> Tensor<T> {
    let (c, h, w) = shape;
    let mut mask = Tensor::full(vec![c, h, w], T::one());
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    for ch in 0..c {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                mask.data_mut()[ch * h * w + y * w + x] = T::zero();
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ours,
    Csgm,
    Glowip,
    Map,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Gaussian { sigma: f64 },
    Zero,
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub method: Method,
    /// Weight of L(z) in the likelihood-regularized objective.
    pub alpha: f64,
    /// Weight of ‖z‖² in the CSGM/GlowIP objective.
    pub gamma: f64,
    /// Weight of the density term in the MAP objective.
    pub beta: f64,
    /// Measurement-noise scale of the MAP data term.
    pub noise_sigma: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iters: usize,
    pub init: Init,
    /// Scheduling granularity for harnesses that group images.
    pub batch: usize,
    pub seed: u64,
}

impl SolveConfig {
    /// Method defaults: ours/map start at z₀ ~ N(0, 0.1²I), CSGM at
    /// N(0, I), GlowIP at zero; MAP uses its tuned learning rate.
    pub fn for_method(method: Method) -> Self {
        let init = match method {
            Method::Ours | Method::Map => Init::Gaussian { sigma: 0.1 },
            Method::Csgm => Init::Gaussian { sigma: 1.0 },
            Method::Glowip => Init::Zero,
        };
        let lr = match method {
            Method::Map => 0.0015,
            _ => 0.005,
        };
        SolveConfig {
            method,
            alpha: 0.05,
            gamma: 0.1,
            beta: 0.5,
            noise_sigma: 0.1,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            iters: 1500,
            init,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone)]
pub struct SolveResult<T: Scalar> {
    /// Restored image, clipped to [0, 1].
    pub x_hat: Tensor<T>,
    pub z_hat: LatentState<T>,
    /// (data term, unweighted regularizer) at each iteration, evaluated
    /// before that iteration's update.
    pub trace: Vec<(f64, f64)>,
    pub wall_time: Duration,
}

struct ObjectiveNodes {
    total: NodeId,
    data: NodeId,
    reg: NodeId,
}

fn record_objective<T: Scalar>(
    model: &FlowModel<T>,
    pass: &mut Pass<T>,
    chunks: &[NodeId],
    op: &MeasurementOperator<T>,
    y: &Tensor<T>,
    config: &SolveConfig,
) -> Result<ObjectiveNodes> {
    if config.method == Method::Map && !op.is_identity() {
        return Err(FlowError::Invalid(
            "MAP objective is denoising-specific (A must be the identity)".to_string(),
        ));
    }
    let inv = model.inverse_nodes(pass, chunks)?;
    let ax = op.apply_nodes(pass, inv.x)?;
    if pass.tape.shape(ax) != y.shape() {
        return Err(FlowError::shape(format!(
            "objective: measurement {:?} vs y {:?}",
            pass.tape.shape(ax),
            y.shape()
        )));
    }
    let yid = pass.tape.constant(y.clone());
    let r = pass.tape.sub(ax, yid)?;
    let (data, reg, weight) = match config.method {
        Method::Ours => {
            let a = pass.tape.abs(r);
            let data = pass.tape.sum(a);
            let prior = model.prior_nodes(pass, chunks)?;
            let neg_prior = pass.tape.negate(prior);
            let reg = pass.tape.add(neg_prior, inv.logdet_inv)?;
            (data, reg, config.alpha)
        }
        Method::Csgm | Method::Glowip => {
            let sq = pass.tape.mul(r, r)?;
            let data = pass.tape.sum(sq);
            let mut reg = pass.tape.scalar_const(T::zero());
            for &c in chunks {
                let csq = pass.tape.mul(c, c)?;
                let s = pass.tape.sum(csq);
                reg = pass.tape.add(reg, s)?;
            }
            (data, reg, config.gamma)
        }
        Method::Map => {
            let sq = pass.tape.mul(r, r)?;
            let ssq = pass.tape.sum(sq);
            let data = pass
                .tape
                .scale(ssq, T::from_f64(1.0 / (2.0 * config.noise_sigma * config.noise_sigma)));
            let prior = model.prior_nodes(pass, chunks)?;
            let neg_prior = pass.tape.negate(prior);
            let reg = pass.tape.add(neg_prior, inv.logdet_inv)?;
            (data, reg, config.beta)
        }
    };
    let weighted = pass.tape.scale(reg, T::from_f64(weight));
    let total = pass.tape.add(data, weighted)?;
    Ok(ObjectiveNodes { total, data, reg })
}

fn eval_objective<T: Scalar>(
    model: &FlowModel<T>,
    op: &MeasurementOperator<T>,
    y: &Tensor<T>,
    z_flat: &Tensor<T>,
    config: &SolveConfig,
) -> Result<T> {
    let z = LatentState::unflatten(z_flat, &model.latent_layout())?;
    let mut pass = Pass::new(&model.params, PassKind::Eval);
    let chunks = model.bind_latent(&mut pass, &z, false)?;
    let obj = record_objective(model, &mut pass, &chunks, op, y, config)?;
    Ok(pass.tape.value(obj.total).item())
}

/// ‖A·F⁻¹(z) − y‖₁ + α·L(z).
pub fn objective_ours<T: Scalar>(
    model: &FlowModel<T>,
    op: &MeasurementOperator<T>,
    y: &Tensor<T>,
    z_flat: &Tensor<T>,
    alpha: f64,
) -> Result<T> {
    let mut config = SolveConfig::for_method(Method::Ours);
    config.alpha = alpha;
    eval_objective(model, op, y, z_flat, &config)
}

/// ‖A·F⁻¹(z) − y‖² + γ‖z‖².
pub fn objective_csgm<T: Scalar>(
    model: &FlowModel<T>,
    op: &MeasurementOperator<T>,
    y: &Tensor<T>,
    z_flat: &Tensor<T>,
    gamma: f64,
) -> Result<T> {
    let mut config = SolveConfig::for_method(Method::Csgm);
    config.gamma = gamma;
    eval_objective(model, op, y, z_flat, &config)
}

/// ‖F⁻¹(z) − y‖²/(2σ²) + β·L(z); denoising only. The density term is
/// computed analytically inside the inverse pass.
pub fn objective_map<T: Scalar>(
    model: &FlowModel<T>,
    y: &Tensor<T>,
    z_flat: &Tensor<T>,
    noise_sigma: f64,
    beta: f64,
) -> Result<T> {
    let op = MeasurementOperator::denoise(model.config.image_shape, 0.0);
    let mut config = SolveConfig::for_method(Method::Map);
    config.noise_sigma = noise_sigma;
    config.beta = beta;
    eval_objective(model, &op, y, z_flat, &config)
}

/// Objective value and its gradient w.r.t. the flattened latent.
pub fn objective_grad<T: Scalar>(
    model: &FlowModel<T>,
    op: &MeasurementOperator<T>,
    y: &Tensor<T>,
    z_flat: &Tensor<T>,
    config: &SolveConfig,
) -> Result<(T, Tensor<T>)> {
    let z = LatentState::unflatten(z_flat, &model.latent_layout())?;
    let mut pass = Pass::new(&model.params, PassKind::Solve);
    let chunks = model.bind_latent(&mut pass, &z, true)?;
    let obj = record_objective(model, &mut pass, &chunks, op, y, config)?;
    let grads = pass.tape.backward(obj.total)?;
    let mut flat = Vec::with_capacity(z_flat.numel());
    for &id in &chunks {
        flat.extend_from_slice(grads.get(&pass.tape, id).data());
    }
    Ok((pass.tape.value(obj.total).item(), Tensor::from_vec(flat)))
}

/// Adam over the latent of one image; the RNG stream is derived from
/// (config.seed, image_index) so per-image solves parallelize without
/// changing results.
pub fn solve<T: Scalar>(
    model: &FlowModel<T>,
    op: &MeasurementOperator<T>,
    y: &Tensor<T>,
    config: &SolveConfig,
    image_index: u64,
) -> Result<SolveResult<T>> {
    if config.iters == 0 {
        return Err(FlowError::Invalid("solve: iters must be ≥ 1".to_string()));
    }
    if y.shape() != op.output_shape.as_slice() {
        return Err(FlowError::shape(format!(
            "solve: y {:?} vs operator output {:?}",
            y.shape(),
            op.output_shape
        )));
    }
    let start = Instant::now();
    let layout = model.latent_layout();
    let dim = model.total_latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(image_index);
    let mut z_flat: Vec<T> = match config.init {
        Init::Zero => vec![T::zero(); dim],
        Init::Gaussian { sigma } => (0..dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(e * sigma)
            })
            .collect(),
    };
    let mut m = vec![T::zero(); dim];
    let mut v = vec![T::zero(); dim];
    let mut trace = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let z = LatentState::unflatten(&Tensor::from_vec(z_flat.clone()), &layout)?;
        let mut pass = Pass::new(&model.params, PassKind::Solve);
        let chunks = model.bind_latent(&mut pass, &z, true)?;
        let obj = record_objective(model, &mut pass, &chunks, op, y, config)?;
        let data_val = pass.tape.value(obj.data).item().to_f64();
        let reg_val = pass.tape.value(obj.reg).item().to_f64();
        let total_val = pass.tape.value(obj.total).item().to_f64();
        if !total_val.is_finite() {
            return Err(FlowError::NonFinite {
                context: "solve objective".to_string(),
                step: iter,
            });
        }
        let grads = pass.tape.backward(obj.total)?;
        let mut flat_grad = Vec::with_capacity(dim);
        for &id in &chunks {
            flat_grad.extend_from_slice(grads.get(&pass.tape, id).data());
        }
        drop(pass);
        adam_update(
            &mut z_flat,
            &flat_grad,
            &mut m,
            &mut v,
            (iter + 1) as u64,
            config.lr,
            config.beta1,
            config.beta2,
            1e-8,
        );
        trace.push((data_val, reg_val));
    }
    let z_hat = LatentState::unflatten(&Tensor::from_vec(z_flat), &layout)?;
    let (x, _) = model.inverse(&z_hat)?;
    Ok(SolveResult {
        x_hat: x.clip(T::zero(), T::one()),
        z_hat,
        trace,
        wall_time: start.elapsed(),
    })
}
