//! Maximum-likelihood training: uniform dequantization, Adam, and the
//! epoch/batch loop with data-dependent actnorm initialization.

use crate::error::{FlowError, Result};
use crate::model::{bits_per_dim_from, FlowModel};
use crate::params::{ParamStore, Pass, PassKind};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// An 8-bit image in channel-major layout.
#[derive(Clone)]
pub struct ImageU8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(FlowError::shape(format!(
                "image: {channels}x{height}x{width} vs {} bytes",
                data.len()
            )));
        }
        Ok(ImageU8 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// (v + u)/256 with u ~ U[0,1) per element; output lies in [0,1).
pub fn dequantize<T: Scalar, R: Rng>(image: &ImageU8, rng: &mut R) -> Tensor<T> {
    let inv = 1.0 / 256.0;
    let data = image
        .data
        .iter()
        .map(|&v| {
            let u: f64 = rng.random_range(0.0..1.0);
            T::from_f64((v as f64 + u) * inv)
        })
        .collect();
    Tensor::new(
        vec![image.channels, image.height, image.width],
        data,
    )
    .unwrap()
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            grad_clip: Some(50.0),
        }
    }
}

/// Bias-corrected Adam update on flat buffers. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state for a named parameter set.
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            epsilon: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One optimizer step over every gradient entry; rejects non-finite
    /// gradients naming the parameter.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        step_index: usize,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(FlowError::NonFiniteGradient {
                    name: name.clone(),
                    step: step_index,
                });
            }
        }
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
            adam_update(
                p.data_mut(),
                g.data(),
                m,
                v,
                self.t,
                self.lr,
                self.beta1,
                self.beta2,
                self.epsilon,
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossPoint {
    pub step: u64,
    pub epoch: usize,
    /// Mean negative log-likelihood per image.
    pub nll: f64,
    pub bits_per_dim: f64,
}

pub struct TrainReport {
    pub losses: Vec<LossPoint>,
}

/// Minimizes −mean log p(x) per batch; actnorms initialize on the first
/// batch seen.
pub fn train<T: Scalar>(
    model: &mut FlowModel<T>,
    dataset: &[ImageU8],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(FlowError::Invalid("train: empty dataset".to_string()));
    }
    let shape = model.config.image_shape;
    for (i, img) in dataset.iter().enumerate() {
        if img.shape() != shape {
            return Err(FlowError::shape(format!(
                "train: image {i} has shape {:?}, model expects {:?}",
                img.shape(),
                shape
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.learning_rate, config.beta1, config.beta2);
    let mut losses = Vec::new();
    let mut step: u64 = 0;
    let pixels = shape.0 * shape.1 * shape.2;
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for batch_ids in indices.chunks(config.batch_size) {
            let batch: Vec<Tensor<T>> = batch_ids
                .iter()
                .map(|&i| dequantize(&dataset[i], &mut rng))
                .collect();
            if !model.all_actnorms_initialized() {
                model.initialize_actnorms(&batch)?;
            }
            let n = batch.len();
            let mut pass = Pass::new(&model.params, PassKind::Train);
            let mut total = pass.tape.scalar_const(T::zero());
            for x in &batch {
                let xid = pass.tape.constant(x.clone());
                let lp = model.log_prob_nodes(&mut pass, xid)?;
                total = pass.tape.add(total, lp)?;
            }
            let loss = pass.tape.scale(total, T::from_f64(-1.0 / n as f64));
            let loss_val = pass.tape.value(loss).item().to_f64();
            if !loss_val.is_finite() {
                return Err(FlowError::NonFinite {
                    context: "training loss".to_string(),
                    step: step as usize,
                });
            }
            let node_grads = pass.tape.backward(loss)?;
            let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for (name, &id) in pass.bindings() {
                grads.insert(name.clone(), node_grads.get(&pass.tape, id));
            }
            drop(pass);
            if let Some(clip) = config.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            adam.step(&mut model.params, &grads, step as usize)?;
            guard_invconv_determinants(model, step as usize)?;
            losses.push(LossPoint {
                step,
                epoch,
                nll: loss_val,
                bits_per_dim: bits_per_dim_from(-loss_val, pixels),
            });
            step += 1;
        }
    }
    model.train_steps += step;
    Ok(TrainReport { losses })
}

fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, clip: f64) {
    let mut sq = 0.0;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = T::from_f64(clip / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Rejects updates that drove any invertible 1×1 convolution toward
/// singularity.
fn guard_invconv_determinants<T: Scalar>(model: &FlowModel<T>, step: usize) -> Result<()> {
    for block in &model.scales {
        for s in &block.steps {
            if let Some(ic) = &s.invconv {
                if ic.abs_det(&model.params)? < 1e-12 {
                    return Err(FlowError::NonFinite {
                        context: format!("invconv '{}' determinant guard", ic.name),
                        step,
                    });
                }
            }
        }
    }
    Ok(())
}
