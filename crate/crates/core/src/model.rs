//! Multi-scale flow model: squeeze → flow steps → split per scale, with
//! exact log-likelihood accounting on both the forward and inverse passes.

use crate::error::{FlowError, Result};
use crate::layers::{split_forward, split_merge, ActNorm, Coupling, InvConv};
use crate::params::{ParamStore, Pass, PassKind};
use crate::tape::NodeId;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Which mechanism permutes channels between couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationVariant {
    /// Swap inside the coupling (the double-swap scheme); no extra layer.
    CouplingSwap,
    /// A learned invertible 1×1 convolution before each coupling.
    InvConv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    /// (C, H, W) of the modeled images.
    pub image_shape: (usize, usize, usize),
    pub num_scales: usize,
    pub steps_per_scale: usize,
    /// 1-based scale indices whose step count is doubled.
    pub double_k_at: BTreeSet<usize>,
    pub hidden_channels: usize,
    pub permutation_variant: PermutationVariant,
}

impl FlowConfig {
    /// 3×32×32 images, L = 5 scales, K = 2 steps doubled at the 2×2 and 1×1
    /// scales (14 steps total), 512 hidden channels.
    pub fn paper(variant: PermutationVariant) -> Self {
        FlowConfig {
            image_shape: (3, 32, 32),
            num_scales: 5,
            steps_per_scale: 2,
            double_k_at: [4, 5].into_iter().collect(),
            hidden_channels: 512,
            permutation_variant: variant,
        }
    }

    fn steps_at(&self, scale_1based: usize) -> usize {
        if self.double_k_at.contains(&scale_1based) {
            self.steps_per_scale * 2
        } else {
            self.steps_per_scale
        }
    }
}

/// One scale: optional squeeze, a run of flow steps, optional factor-out.
pub struct ScaleBlock {
    pub squeeze: bool,
    pub steps: Vec<FlowStep>,
    pub split: bool,
    /// (C, H, W) the steps of this scale operate on (post-squeeze).
    pub shape: (usize, usize, usize),
}

/// Activation normalization, optional 1×1 convolution, coupling.
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: Option<InvConv>,
    pub coupling: Coupling,
}

/// Structured latent variable: per-scale factored chunks plus the final
/// chunk, in fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T: Scalar> {
    pub chunks: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentState<T> {
    pub fn total_dim(&self) -> usize {
        self.chunks.iter().map(Tensor::numel).sum()
    }

    /// Chunk order, row-major within each chunk.
    pub fn flatten(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.total_dim());
        for c in &self.chunks {
            data.extend_from_slice(c.data());
        }
        Tensor::from_vec(data)
    }

    pub fn unflatten(flat: &Tensor<T>, layout: &[Vec<usize>]) -> Result<Self> {
        let expected: usize = layout.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.numel() != expected {
            return Err(FlowError::shape(format!(
                "unflatten: flat length {} vs layout total {expected}",
                flat.numel()
            )));
        }
        let mut chunks = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for shape in layout {
            let n: usize = shape.iter().product();
            let data = flat.data()[offset..offset + n].to_vec();
            chunks.push(Tensor::new(shape.clone(), data)?);
            offset += n;
        }
        Ok(LatentState { chunks })
    }
}

/// Node handles produced by one recorded inverse pass.
pub struct InverseNodes {
    pub x: NodeId,
    pub logdet_inv: NodeId,
}

pub struct FlowModel<T: Scalar> {
    pub config: FlowConfig,
    pub scales: Vec<ScaleBlock>,
    pub params: ParamStore<T>,
    pub train_steps: u64,
}

impl<T: Scalar> FlowModel<T> {
    /// Builds a model with deterministic seed-derived initialization:
    /// couplings near-identity, actnorms uninitialized.
    pub fn build(config: FlowConfig, seed: u64) -> Result<Self> {
        let layout_plan = plan_scales(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut scales = Vec::with_capacity(config.num_scales);
        for (i, plan) in layout_plan.iter().enumerate() {
            let (c, h, w) = plan.shape;
            let k1 = if h >= 2 && w >= 2 { 3 } else { 1 };
            let n_steps = config.steps_at(i + 1);
            let mut steps = Vec::with_capacity(n_steps);
            for j in 0..n_steps {
                let prefix = format!("scale{:02}.step{:02}", i + 1, j);
                let actnorm = ActNorm::new(format!("{prefix}.actnorm"), c);
                actnorm.register(&mut params);
                let invconv = match config.permutation_variant {
                    PermutationVariant::InvConv => {
                        let ic = InvConv::new(format!("{prefix}.invconv"), c);
                        ic.register(&mut params, &mut rng);
                        Some(ic)
                    }
                    PermutationVariant::CouplingSwap => None,
                };
                let apply_swap = match config.permutation_variant {
                    // Alternate which half is transformed across steps.
                    PermutationVariant::CouplingSwap => j % 2 == 0,
                    PermutationVariant::InvConv => false,
                };
                let coupling = Coupling::new(
                    format!("{prefix}.coupling"),
                    c,
                    config.hidden_channels,
                    k1,
                    apply_swap,
                );
                coupling.register(&mut params, &mut rng);
                steps.push(FlowStep {
                    actnorm,
                    invconv,
                    coupling,
                });
            }
            scales.push(ScaleBlock {
                squeeze: plan.squeeze,
                steps,
                split: plan.split,
                shape: plan.shape,
            });
        }
        Ok(FlowModel {
            config,
            scales,
            params,
            train_steps: 0,
        })
    }

    pub fn num_flow_steps(&self) -> usize {
        self.scales.iter().map(|s| s.steps.len()).sum()
    }

    /// Shapes of the latent chunks, in emission order.
    pub fn latent_layout(&self) -> Vec<Vec<usize>> {
        let mut layout = Vec::new();
        for block in &self.scales {
            let (c, h, w) = block.shape;
            if block.split {
                layout.push(vec![c / 2, h, w]);
            }
        }
        let (c, h, w) = self.scales.last().expect("at least one scale").shape;
        layout.push(vec![c, h, w]);
        layout
    }

    pub fn total_latent_dim(&self) -> usize {
        self.latent_layout()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    pub fn all_actnorms_initialized(&self) -> bool {
        self.scales
            .iter()
            .flat_map(|b| b.steps.iter())
            .all(|s| s.actnorm.initialized)
    }

    /// Forces the initialized flag, e.g. for checkpoint loads and tests on
    /// fresh models (scale 1, bias 0).
    pub fn mark_actnorms_initialized(&mut self) {
        for block in &mut self.scales {
            for step in &mut block.steps {
                step.actnorm.initialized = true;
            }
        }
    }

    pub fn actnorm_flags(&self) -> Vec<(String, bool)> {
        self.scales
            .iter()
            .flat_map(|b| b.steps.iter())
            .map(|s| (s.actnorm.name.clone(), s.actnorm.initialized))
            .collect()
    }

    pub fn set_actnorm_flag(&mut self, name: &str, value: bool) -> Result<()> {
        for block in &mut self.scales {
            for step in &mut block.steps {
                if step.actnorm.name == name {
                    step.actnorm.initialized = value;
                    return Ok(());
                }
            }
        }
        Err(FlowError::Invalid(format!("unknown actnorm '{name}'")))
    }

    /// Data-dependent actnorm initialization, walking the first batch
    /// through the network in layer order.
    pub fn initialize_actnorms(&mut self, batch: &[Tensor<T>]) -> Result<()> {
        if batch.is_empty() {
            return Err(FlowError::Invalid(
                "actnorm initialization needs a non-empty batch".to_string(),
            ));
        }
        let mut h: Vec<Tensor<T>> = batch.to_vec();
        for block in &mut self.scales {
            if block.squeeze {
                h = map_batch(&self.params, &h, |pass, id| Ok((pass.tape.squeeze(id)?, ())))?;
            }
            for step in &mut block.steps {
                if !step.actnorm.initialized {
                    step.actnorm.initialize_from_batch(&mut self.params, &h)?;
                }
                let an = &step.actnorm;
                h = map_batch(&self.params, &h, |pass, id| {
                    an.forward(pass, id).map(|(o, _)| (o, ()))
                })?;
                if let Some(ic) = &step.invconv {
                    h = map_batch(&self.params, &h, |pass, id| {
                        ic.forward(pass, id).map(|(o, _)| (o, ()))
                    })?;
                }
                let cp = &step.coupling;
                h = map_batch(&self.params, &h, |pass, id| {
                    cp.forward(pass, id).map(|(o, _)| (o, ()))
                })?;
            }
            if block.split {
                h = map_batch(&self.params, &h, |pass, id| {
                    split_forward(pass, id).map(|(keep, _)| (keep, ()))
                })?;
            }
        }
        Ok(())
    }

    /// Adds seeded noise to every parameter, keeping layers invertible;
    /// marks actnorms initialized. Exercises non-identity configurations.
    pub fn perturb_parameters(&mut self, seed: u64, amplitude: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.params.iter_mut() {
            if name.ends_with("actnorm.scale") {
                for v in t.data_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v *= T::from_f64((e * amplitude).exp());
                }
            } else if name.contains("invconv") {
                // Stretch the rotation without risking singularity.
                let e: f64 = StandardNormal.sample(&mut rng);
                let s = T::from_f64((e * amplitude * 0.5).exp());
                for v in t.data_mut() {
                    *v *= s;
                }
            } else {
                for v in t.data_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += T::from_f64(e * amplitude);
                }
            }
        }
        self.mark_actnorms_initialized();
    }

    // ── Tape-level passes ────────────────────────────────────────────

    /// Records x → z; returns latent chunk nodes and the total forward
    /// log-determinant node.
    pub fn forward_nodes(&self, pass: &mut Pass<T>, x: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let got = pass.tape.shape(x).to_vec();
        let (c, h, w) = self.config.image_shape;
        if got != [c, h, w] {
            return Err(FlowError::shape(format!(
                "flow forward: input {got:?} vs image shape [{c}, {h}, {w}]"
            )));
        }
        let mut hid = x;
        let mut logdet = pass.tape.scalar_const(T::zero());
        let mut chunks = Vec::new();
        for block in &self.scales {
            if block.squeeze {
                hid = pass.tape.squeeze(hid)?;
            }
            for step in &block.steps {
                let (o, ld) = step.actnorm.forward(pass, hid)?;
                hid = o;
                logdet = pass.tape.add(logdet, ld)?;
                if let Some(ic) = &step.invconv {
                    let (o, ld) = ic.forward(pass, hid)?;
                    hid = o;
                    logdet = pass.tape.add(logdet, ld)?;
                }
                let (o, ld) = step.coupling.forward(pass, hid)?;
                hid = o;
                logdet = pass.tape.add(logdet, ld)?;
            }
            if block.split {
                let (keep, z) = split_forward(pass, hid)?;
                chunks.push(z);
                hid = keep;
            }
        }
        chunks.push(hid);
        Ok((chunks, logdet))
    }

    /// Records z → x; returns the reconstruction and the inverse-pass
    /// log-determinant node (log|det J_{F⁻¹}(z)|).
    pub fn inverse_nodes(&self, pass: &mut Pass<T>, chunks: &[NodeId]) -> Result<InverseNodes> {
        let layout = self.latent_layout();
        if chunks.len() != layout.len() {
            return Err(FlowError::LayoutMismatch {
                chunk: chunks.len().min(layout.len()),
                expected: format!("{} chunks", layout.len()),
                got: format!("{} chunks", chunks.len()),
            });
        }
        for (i, (&id, shape)) in chunks.iter().zip(layout.iter()).enumerate() {
            if pass.tape.shape(id) != shape.as_slice() {
                return Err(FlowError::LayoutMismatch {
                    chunk: i,
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", pass.tape.shape(id)),
                });
            }
        }
        let mut hid = *chunks.last().expect("layout has at least one chunk");
        let mut logdet_inv = pass.tape.scalar_const(T::zero());
        let mut chunk_idx = chunks.len() - 1;
        for block in self.scales.iter().rev() {
            if block.split {
                chunk_idx -= 1;
                hid = split_merge(pass, hid, chunks[chunk_idx])?;
            }
            for step in block.steps.iter().rev() {
                let (o, ld) = step.coupling.inverse(pass, hid)?;
                hid = o;
                logdet_inv = pass.tape.add(logdet_inv, ld)?;
                if let Some(ic) = &step.invconv {
                    let (o, ld) = ic.inverse(pass, hid)?;
                    hid = o;
                    logdet_inv = pass.tape.add(logdet_inv, ld)?;
                }
                let (o, ld) = step.actnorm.inverse(pass, hid)?;
                hid = o;
                logdet_inv = pass.tape.add(logdet_inv, ld)?;
            }
            if block.squeeze {
                hid = pass.tape.unsqueeze(hid)?;
            }
        }
        Ok(InverseNodes {
            x: hid,
            logdet_inv,
        })
    }

    /// Σ chunk priors under N(0, I).
    pub fn prior_nodes(&self, pass: &mut Pass<T>, chunks: &[NodeId]) -> Result<NodeId> {
        let mut total = pass.tape.scalar_const(T::zero());
        for &c in chunks {
            let p = pass.tape.gaussian_logpdf(c, T::zero(), T::one())?;
            total = pass.tape.add(total, p)?;
        }
        Ok(total)
    }

    /// log p(x) = prior(F(x)) + log|det J_F(x)| on the tape.
    pub fn log_prob_nodes(&self, pass: &mut Pass<T>, x: NodeId) -> Result<NodeId> {
        let (chunks, logdet) = self.forward_nodes(pass, x)?;
        let prior = self.prior_nodes(pass, &chunks)?;
        pass.tape.add(prior, logdet)
    }

    /// L(z) = −log p_Z(z) + log|det J_{F⁻¹}(z)|, from a single inverse pass.
    pub fn regularizer_nodes(
        &self,
        pass: &mut Pass<T>,
        chunks: &[NodeId],
    ) -> Result<(NodeId, InverseNodes)> {
        let inv = self.inverse_nodes(pass, chunks)?;
        let prior = self.prior_nodes(pass, chunks)?;
        let neg_prior = pass.tape.negate(prior);
        let reg = pass.tape.add(neg_prior, inv.logdet_inv)?;
        Ok((reg, inv))
    }

    /// Inserts latent chunks as tape leaves, validating the layout.
    pub fn bind_latent(
        &self,
        pass: &mut Pass<T>,
        z: &LatentState<T>,
        needs_grad: bool,
    ) -> Result<Vec<NodeId>> {
        let layout = self.latent_layout();
        if z.chunks.len() != layout.len() {
            return Err(FlowError::LayoutMismatch {
                chunk: z.chunks.len().min(layout.len()),
                expected: format!("{} chunks", layout.len()),
                got: format!("{} chunks", z.chunks.len()),
            });
        }
        for (i, (chunk, shape)) in z.chunks.iter().zip(layout.iter()).enumerate() {
            if chunk.shape() != shape.as_slice() {
                return Err(FlowError::LayoutMismatch {
                    chunk: i,
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", chunk.shape()),
                });
            }
        }
        Ok(z.chunks
            .iter()
            .map(|c| pass.tape.leaf(c.clone(), needs_grad))
            .collect())
    }

    // ── Evaluation API ───────────────────────────────────────────────

    /// z = F(x) with log|det J_F(x)|.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(LatentState<T>, T)> {
        let mut pass = Pass::new(&self.params, PassKind::Eval);
        let xid = pass.tape.constant(x.clone());
        let (chunk_ids, logdet) = self.forward_nodes(&mut pass, xid)?;
        let chunks = chunk_ids
            .iter()
            .map(|&id| pass.tape.value(id).clone())
            .collect();
        Ok((LatentState { chunks }, pass.tape.value(logdet).item()))
    }

    /// x = F⁻¹(z) with log|det J_{F⁻¹}(z)|.
    pub fn inverse(&self, z: &LatentState<T>) -> Result<(Tensor<T>, T)> {
        let mut pass = Pass::new(&self.params, PassKind::Eval);
        let chunk_ids = self.bind_latent(&mut pass, z, false)?;
        let inv = self.inverse_nodes(&mut pass, &chunk_ids)?;
        Ok((
            pass.tape.value(inv.x).clone(),
            pass.tape.value(inv.logdet_inv).item(),
        ))
    }

    pub fn log_prob(&self, x: &Tensor<T>) -> Result<T> {
        let mut pass = Pass::new(&self.params, PassKind::Eval);
        let xid = pass.tape.constant(x.clone());
        let lp = self.log_prob_nodes(&mut pass, xid)?;
        Ok(pass.tape.value(lp).item())
    }

    pub fn latent_regularizer(&self, z: &LatentState<T>) -> Result<T> {
        let mut pass = Pass::new(&self.params, PassKind::Eval);
        let chunk_ids = self.bind_latent(&mut pass, z, false)?;
        let (reg, _) = self.regularizer_nodes(&mut pass, &chunk_ids)?;
        Ok(pass.tape.value(reg).item())
    }

    /// Draws z ~ N(0, σ²I) over the latent layout.
    pub fn sample_latent<R: Rng>(&self, sigma: f64, rng: &mut R) -> LatentState<T> {
        let layout = self.latent_layout();
        let chunks = layout
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        if sigma == 0.0 {
                            T::zero()
                        } else {
                            let v: f64 = StandardNormal.sample(rng);
                            T::from_f64(v * sigma)
                        }
                    })
                    .collect();
                Tensor::new(shape, data).unwrap()
            })
            .collect();
        LatentState { chunks }
    }

    /// Decodes `count` samples at the given σ; sample i uses RNG stream
    /// (seed, i) so results do not depend on evaluation order.
    pub fn sample(&self, sigma: f64, count: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
        if sigma < 0.0 {
            return Err(FlowError::Invalid(format!(
                "sample: sigma must be non-negative, got {sigma}"
            )));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z = self.sample_latent(sigma, &mut rng);
            out.push(self.inverse(&z)?.0);
        }
        Ok(out)
    }

    /// (−log p(x)/n + log 256) / log 2 for x in [0,1)ⁿ.
    pub fn bits_per_dim(&self, x: &Tensor<T>) -> Result<f64> {
        let lp = self.log_prob(x)?.to_f64();
        Ok(bits_per_dim_from(lp, x.numel()))
    }
}

/// Bits per dimension from a natural-log likelihood over n dequantized
/// pixels.
pub fn bits_per_dim_from(log_prob: f64, n: usize) -> f64 {
    (-log_prob / n as f64 + 256.0f64.ln()) / 2.0f64.ln()
}

struct ScalePlan {
    squeeze: bool,
    split: bool,
    shape: (usize, usize, usize),
}

fn plan_scales(config: &FlowConfig) -> Result<Vec<ScalePlan>> {
    if config.num_scales == 0 {
        return Err(FlowError::Config {
            scale: 0,
            reason: "need at least one scale".to_string(),
        });
    }
    let (mut c, mut h, mut w) = config.image_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(FlowError::Config {
            scale: 0,
            reason: format!("degenerate image shape {:?}", config.image_shape),
        });
    }
    if let Some(&bad) = config
        .double_k_at
        .iter()
        .find(|&&s| s == 0 || s > config.num_scales)
    {
        return Err(FlowError::Config {
            scale: bad,
            reason: format!("double_k_at entry outside 1..={}", config.num_scales),
        });
    }
    let mut plans = Vec::with_capacity(config.num_scales);
    for i in 1..=config.num_scales {
        // Trade space for channels while there is space to trade.
        let squeeze = h > 1 || w > 1;
        if squeeze {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(FlowError::Config {
                    scale: i,
                    reason: format!("cannot squeeze odd spatial dims {h}x{w}"),
                });
            }
            c *= 4;
            h /= 2;
            w /= 2;
        }
        if config.steps_at(i) > 0 && c % 2 != 0 {
            return Err(FlowError::Config {
                scale: i,
                reason: format!("coupling needs an even channel count, got {c}"),
            });
        }
        let split = i < config.num_scales;
        if split {
            if c % 2 != 0 {
                return Err(FlowError::Config {
                    scale: i,
                    reason: format!("split needs an even channel count, got {c}"),
                });
            }
            plans.push(ScalePlan {
                squeeze,
                split,
                shape: (c, h, w),
            });
            c /= 2;
        } else {
            plans.push(ScalePlan {
                squeeze,
                split,
                shape: (c, h, w),
            });
        }
    }
    Ok(plans)
}

fn map_batch<T: Scalar>(
    params: &ParamStore<T>,
    batch: &[Tensor<T>],
    f: impl Fn(&mut Pass<T>, NodeId) -> Result<(NodeId, ())>,
) -> Result<Vec<Tensor<T>>> {
    batch
        .iter()
        .map(|t| {
            let mut pass = Pass::new(params, PassKind::Eval);
            let id = pass.tape.constant(t.clone());
            let (out, ()) = f(&mut pass, id)?;
            Ok(pass.tape.value(out).clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force_logdet, finite_diff_grad, max_rel_err, rel_err};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    const SIG2: f64 = 0.8807970779778823;

    fn tiny_config(variant: PermutationVariant) -> FlowConfig {
        FlowConfig {
            image_shape: (2, 4, 4),
            num_scales: 2,
            steps_per_scale: 1,
            double_k_at: BTreeSet::new(),
            hidden_channels: 8,
            permutation_variant: variant,
        }
    }

    fn random_image(shape: (usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        Tensor::new(
            vec![shape.0, shape.1, shape.2],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn paper_config_has_fourteen_flow_steps() {
        let model =
            FlowModel::<f32>::build(FlowConfig::paper(PermutationVariant::CouplingSwap), 0)
                .unwrap();
        assert_eq!(model.num_flow_steps(), 14);
    }

    #[test]
    fn paper_config_latent_layout_and_total_dim() {
        let model =
            FlowModel::<f32>::build(FlowConfig::paper(PermutationVariant::CouplingSwap), 0)
                .unwrap();
        let layout = model.latent_layout();
        assert_eq!(
            layout,
            vec![
                vec![6, 16, 16],
                vec![12, 8, 8],
                vec![24, 4, 4],
                vec![48, 2, 2],
                vec![192, 1, 1],
            ]
        );
        assert_eq!(model.total_latent_dim(), 3072);
    }

    #[test]
    fn single_scale_model_latent_is_squeezed_image() {
        let config = FlowConfig {
            image_shape: (2, 4, 4),
            num_scales: 1,
            steps_per_scale: 1,
            double_k_at: BTreeSet::new(),
            hidden_channels: 8,
            permutation_variant: PermutationVariant::CouplingSwap,
        };
        let model = FlowModel::<f64>::build(config, 0).unwrap();
        assert_eq!(model.num_flow_steps(), 1);
        assert_eq!(model.latent_layout(), vec![vec![8, 2, 2]]);
    }

    #[test]
    fn equal_seeds_build_bit_identical_parameters() {
        let a = FlowModel::<f64>::build(tiny_config(PermutationVariant::InvConv), 9).unwrap();
        let b = FlowModel::<f64>::build(tiny_config(PermutationVariant::InvConv), 9).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = FlowModel::<f64>::build(tiny_config(PermutationVariant::InvConv), 10).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn config_rejects_odd_spatial_dims_naming_scale() {
        let config = FlowConfig {
            image_shape: (1, 12, 12),
            num_scales: 3,
            steps_per_scale: 1,
            double_k_at: BTreeSet::new(),
            hidden_channels: 4,
            permutation_variant: PermutationVariant::CouplingSwap,
        };
        // 12 → 6 → 3, so squeezing fails entering scale 3
        match FlowModel::<f64>::build(config, 0) {
            Err(FlowError::Config { scale, .. }) => assert_eq!(scale, 3),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn fresh_model_forward_logdet_is_sum_of_zero_network_couplings() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 4).unwrap();
        model.mark_actnorms_initialized();
        let x = random_image((2, 4, 4), 1);
        let (_, logdet) = model.forward(&x).unwrap();
        // scale 1 operates on 8×2×2 (32 values), scale 2 on 16×1×1 (16)
        let expect = (32.0 / 2.0) * SIG2.ln() + (16.0 / 2.0) * SIG2.ln();
        assert_relative_eq!(logdet, expect, epsilon = 1e-12);
    }

    #[test]
    fn forward_requires_initialized_actnorms() {
        let model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 4).unwrap();
        let x = random_image((2, 4, 4), 1);
        assert!(matches!(
            model.forward(&x),
            Err(FlowError::ActnormUninitialized { .. })
        ));
    }

    #[test]
    fn inverse_of_forward_recovers_input() {
        for variant in [PermutationVariant::CouplingSwap, PermutationVariant::InvConv] {
            let mut model = FlowModel::<f64>::build(tiny_config(variant), 4).unwrap();
            model.perturb_parameters(7, 0.3);
            let x = random_image((2, 4, 4), 2);
            let (z, logdet) = model.forward(&x).unwrap();
            let (back, logdet_inv) = model.inverse(&z).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-9);
            assert!((logdet + logdet_inv).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_model_logdet_matches_brute_force_jacobian_both_variants() {
        for variant in [PermutationVariant::CouplingSwap, PermutationVariant::InvConv] {
            let mut model = FlowModel::<f64>::build(tiny_config(variant), 5).unwrap();
            model.perturb_parameters(11, 0.3);
            let x = random_image((2, 4, 4), 3);
            let (_, analytic) = model.forward(&x).unwrap();
            let oracle = brute_force_logdet(
                &mut |t: &Tensor<f64>| model.forward(t).unwrap().0.flatten(),
                &x,
                1e-5,
            );
            assert!(
                rel_err(analytic, oracle) <= 1e-4,
                "variant {variant:?}: analytic {analytic} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn log_prob_agrees_between_forward_and_inverse_routes() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 6).unwrap();
        model.perturb_parameters(13, 0.3);
        for seed in 0..20 {
            let x = random_image((2, 4, 4), 100 + seed);
            let lp = model.log_prob(&x).unwrap();
            let (z, _) = model.forward(&x).unwrap();
            let (_, logdet_inv) = model.inverse(&z).unwrap();
            let mut prior = 0.0;
            for chunk in &z.chunks {
                let mut pass = Pass::new(&model.params, PassKind::Eval);
                let id = pass.tape.constant(chunk.clone());
                let p = pass.tape.gaussian_logpdf(id, 0.0, 1.0).unwrap();
                prior += pass.tape.value(p).item();
            }
            assert!(
                (lp - (prior - logdet_inv)).abs() <= 1e-6,
                "seed {seed}: {lp} vs {}",
                prior - logdet_inv
            );
        }
    }

    #[test]
    fn pure_squeeze_model_log_prob_is_standard_normal_density() {
        let config = FlowConfig {
            image_shape: (2, 4, 4),
            num_scales: 2,
            steps_per_scale: 0,
            double_k_at: BTreeSet::new(),
            hidden_channels: 8,
            permutation_variant: PermutationVariant::CouplingSwap,
        };
        let model = FlowModel::<f64>::build(config, 0).unwrap();
        let x = random_image((2, 4, 4), 8);
        let lp = model.log_prob(&x).unwrap();
        let mut pass = Pass::new(&model.params, PassKind::Eval);
        let id = pass.tape.constant(x.clone());
        let direct = pass.tape.gaussian_logpdf(id, 0.0, 1.0).unwrap();
        assert_relative_eq!(lp, pass.tape.value(direct).item(), epsilon = 1e-12);
    }

    #[test]
    fn density_ordering_matches_brute_force_oracle() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 14).unwrap();
        model.perturb_parameters(15, 0.3);
        // oracle density: prior at F(x) plus numerically differentiated logdet
        let oracle_lp = |x: &Tensor<f64>| {
            let (z, _) = model.forward(x).unwrap();
            let flat = z.flatten();
            let n = flat.numel() as f64;
            let prior: f64 = flat
                .data()
                .iter()
                .map(|v| -0.5 * v * v)
                .sum::<f64>()
                - 0.5 * n * core::f64::consts::TAU.ln();
            let ld = brute_force_logdet(
                &mut |t: &Tensor<f64>| model.forward(t).unwrap().0.flatten(),
                x,
                1e-5,
            );
            prior + ld
        };
        let a = random_image((2, 4, 4), 21);
        let b = random_image((2, 4, 4), 22).map(|v| v * 3.0);
        let (la, lb) = (model.log_prob(&a).unwrap(), model.log_prob(&b).unwrap());
        let (oa, ob) = (oracle_lp(&a), oracle_lp(&b));
        assert!((la - oa).abs() / la.abs().max(1.0) < 1e-4);
        assert!((lb - ob).abs() / lb.abs().max(1.0) < 1e-4);
        assert_eq!(la > lb, oa > ob);
    }

    #[test]
    fn latent_regularizer_is_negative_log_prob_at_matched_points() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 16).unwrap();
        model.perturb_parameters(17, 0.3);
        let x = random_image((2, 4, 4), 30);
        let (z, _) = model.forward(&x).unwrap();
        let reg = model.latent_regularizer(&z).unwrap();
        let lp = model.log_prob(&x).unwrap();
        assert!((reg + lp).abs() <= 1e-6, "L(z)={reg}, log_prob={lp}");
    }

    #[test]
    fn pure_squeeze_regularizer_at_zero_latent() {
        let config = FlowConfig {
            image_shape: (2, 4, 4),
            num_scales: 2,
            steps_per_scale: 0,
            double_k_at: BTreeSet::new(),
            hidden_channels: 8,
            permutation_variant: PermutationVariant::CouplingSwap,
        };
        let model = FlowModel::<f64>::build(config, 0).unwrap();
        let layout = model.latent_layout();
        let z = LatentState::unflatten(&Tensor::zeros(vec![32]), &layout).unwrap();
        let reg = model.latent_regularizer(&z).unwrap();
        assert_relative_eq!(
            reg,
            16.0 * core::f64::consts::TAU.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 18).unwrap();
        model.perturb_parameters(19, 0.2);
        let x = random_image((2, 4, 4), 40);
        let (z, _) = model.forward(&x).unwrap();
        let layout = model.latent_layout();

        let mut pass = Pass::new(&model.params, PassKind::Solve);
        let chunk_ids = model.bind_latent(&mut pass, &z, true).unwrap();
        let (reg, _) = model.regularizer_nodes(&mut pass, &chunk_ids).unwrap();
        let grads = pass.tape.backward(reg).unwrap();
        let mut analytic = Vec::new();
        for &id in &chunk_ids {
            analytic.extend_from_slice(grads.get(&pass.tape, id).data());
        }
        let analytic = Tensor::from_vec(analytic);

        let flat = z.flatten();
        let fd = finite_diff_grad(
            &mut |v: &Tensor<f64>| {
                let zs = LatentState::unflatten(v, &layout).unwrap();
                model.latent_regularizer(&zs).unwrap()
            },
            &flat,
            1e-5,
        );
        let err = max_rel_err(&analytic, &fd, 1.0);
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn log_prob_gradient_agrees_with_finite_differences() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 20).unwrap();
        model.perturb_parameters(21, 0.2);
        let x = random_image((2, 4, 4), 50);
        let mut pass = Pass::new(&model.params, PassKind::Solve);
        let xid = pass.tape.leaf(x.clone(), true);
        let lp = model.log_prob_nodes(&mut pass, xid).unwrap();
        let grads = pass.tape.backward(lp).unwrap();
        let analytic = grads.get(&pass.tape, xid);
        let fd = finite_diff_grad(
            &mut |t: &Tensor<f64>| model.log_prob(t).unwrap(),
            &x,
            1e-5,
        );
        let err = max_rel_err(&analytic, &fd, 1.0);
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn sample_at_sigma_zero_is_deterministic_across_seeds() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 22).unwrap();
        model.perturb_parameters(23, 0.3);
        let a = model.sample(0.0, 2, 1).unwrap();
        let b = model.sample(0.0, 2, 999).unwrap();
        assert_eq!(a[0].data(), b[0].data());
        assert_eq!(a[1].data(), b[1].data());
        assert_eq!(a[0].data(), a[1].data());
    }

    #[test]
    fn sample_rejects_negative_sigma() {
        let model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 22).unwrap();
        assert!(model.sample(-0.1, 1, 0).is_err());
    }

    #[test]
    fn sampled_latents_have_unit_variance_at_sigma_one() {
        let model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 22).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let count = 20000;
        let dim = model.total_latent_dim();
        let mut sums = vec![0.0; dim];
        let mut sqs = vec![0.0; dim];
        for _ in 0..count {
            let z = model.sample_latent(1.0, &mut rng).flatten();
            for (i, &v) in z.data().iter().enumerate() {
                sums[i] += v;
                sqs[i] += v * v;
            }
        }
        for i in 0..dim {
            let mean = sums[i] / count as f64;
            let var = sqs[i] / count as f64 - mean * mean;
            assert!(
                (var - 1.0).abs() < 0.05,
                "dim {i}: empirical variance {var}"
            );
        }
    }

    #[test]
    fn flatten_unflatten_round_trip_and_norm_partition() {
        let mut model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 24).unwrap();
        model.perturb_parameters(25, 0.3);
        let x = random_image((2, 4, 4), 60);
        let (z, _) = model.forward(&x).unwrap();
        let flat = z.flatten();
        let back = LatentState::unflatten(&flat, &model.latent_layout()).unwrap();
        assert_eq!(back, z);
        let norm_flat: f64 = flat.data().iter().map(|v| v * v).sum();
        let norm_chunks: f64 = z
            .chunks
            .iter()
            .map(|c| c.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert_relative_eq!(norm_flat, norm_chunks, epsilon = 1e-12);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 24).unwrap();
        let err = LatentState::<f64>::unflatten(&Tensor::zeros(vec![7]), &model.latent_layout());
        assert!(err.is_err());
    }

    #[test]
    fn bind_latent_names_mismatching_chunk() {
        let model =
            FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 24).unwrap();
        let mut z = LatentState {
            chunks: model
                .latent_layout()
                .into_iter()
                .map(Tensor::<f64>::zeros)
                .collect(),
        };
        z.chunks[1] = Tensor::zeros(vec![1, 1, 1]);
        let mut pass = Pass::new(&model.params, PassKind::Eval);
        match model.bind_latent(&mut pass, &z, false) {
            Err(FlowError::LayoutMismatch { chunk, .. }) => assert_eq!(chunk, 1),
            other => panic!("expected layout mismatch, got {other:?}"),
        }
    }

    #[test]
    fn bits_per_dim_identities() {
        // uniform density on [0,1)ⁿ has log_prob 0 → 8 bits per byte-valued dim
        assert_relative_eq!(bits_per_dim_from(0.0, 48), 8.0);
        let n = 48;
        let lp = -3.7;
        let raised = lp + n as f64 * 2.0f64.ln();
        assert_relative_eq!(
            bits_per_dim_from(lp, n) - bits_per_dim_from(raised, n),
            1.0,
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(values in proptest::collection::vec(-3.0f64..3.0, 32)) {
            let model =
                FlowModel::<f64>::build(tiny_config(PermutationVariant::CouplingSwap), 1).unwrap();
            let layout = model.latent_layout();
            let flat = Tensor::from_vec(values);
            let z = LatentState::unflatten(&flat, &layout).unwrap();
            let reflat = z.flatten();
            prop_assert_eq!(reflat.data(), flat.data());
        }
    }
}
