//! Invertible building blocks: activation normalization, the swap/split
//! affine coupling, squeeze, factor-out split, and the invertible 1×1
//! convolution used by the ablation variant.
//!
//! Every layer exposes `forward(h) → (h', logdet)` and
//! `inverse(h') → (h, logdet_inv)` on a pass.

use crate::error::{FlowError, Result};
use crate::linalg::random_rotation;
use crate::params::{ParamStore, Pass};
use crate::tape::NodeId;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_tensor<T: Scalar, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v * std)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Per-channel affine layer with data-dependent initialization.
#[derive(Clone)]
pub struct ActNorm {
    pub name: String,
    pub channels: usize,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(name: String, channels: usize) -> Self {
        ActNorm {
            name,
            channels,
            initialized: false,
        }
    }

    fn scale_name(&self) -> String {
        format!("{}.scale", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(self.scale_name(), Tensor::full(vec![self.channels], T::one()));
        store.insert(self.bias_name(), Tensor::zeros(vec![self.channels]));
    }

    /// Data-dependent initialization: after this, the first batch has
    /// per-channel zero mean and unit variance at the layer output.
    pub fn initialize_from_batch<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        batch: &[Tensor<T>],
    ) -> Result<()> {
        if self.initialized {
            return Err(FlowError::Invalid(format!(
                "actnorm '{}' already initialized",
                self.name
            )));
        }
        let (c, h, w) = batch
            .first()
            .ok_or_else(|| FlowError::Invalid("actnorm init: empty batch".to_string()))?
            .dims3()?;
        if c != self.channels {
            return Err(FlowError::shape(format!(
                "actnorm '{}': channel axis {} vs layer channels {}",
                self.name, c, self.channels
            )));
        }
        let count = batch.len() * h * w;
        if count < 2 {
            return Err(FlowError::Invalid(format!(
                "actnorm '{}': need at least 2 values per channel, got {count}",
                self.name
            )));
        }
        let countf = T::from_f64(count as f64);
        let plane = h * w;
        let mut scale = vec![T::zero(); c];
        let mut bias = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for img in batch {
                for p in 0..plane {
                    sum += img.data()[ch * plane + p];
                }
            }
            let mean = sum / countf;
            let mut ss = T::zero();
            for img in batch {
                for p in 0..plane {
                    let d = img.data()[ch * plane + p] - mean;
                    ss += d * d;
                }
            }
            let std = (ss / countf).sqrt();
            if !(std > T::zero()) || !std.is_normal() {
                return Err(FlowError::DegenerateChannel {
                    name: self.name.clone(),
                    channel: ch,
                });
            }
            scale[ch] = T::one() / std;
            bias[ch] = -mean / std;
        }
        store.set(&self.scale_name(), Tensor::from_vec(scale))?;
        store.set(&self.bias_name(), Tensor::from_vec(bias))?;
        self.initialized = true;
        Ok(())
    }

    fn logdet<T: Scalar>(&self, pass: &mut Pass<T>, s: NodeId, hw: usize) -> Result<NodeId> {
        let a = pass.tape.abs(s);
        let l = pass.tape.log(a)?;
        let total = pass.tape.sum(l);
        Ok(pass.tape.scale(total, T::from_f64(hw as f64)))
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        if !self.initialized {
            return Err(FlowError::ActnormUninitialized {
                name: self.name.clone(),
            });
        }
        let (_, hh, ww) = pass.tape.value(h).dims3()?;
        let s = pass.param(&self.scale_name())?;
        let b = pass.param(&self.bias_name())?;
        let scaled = pass.tape.channel_mul(h, s)?;
        let out = pass.tape.channel_add(scaled, b)?;
        let ld = self.logdet(pass, s, hh * ww)?;
        Ok((out, ld))
    }

    pub fn inverse<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        if !self.initialized {
            return Err(FlowError::ActnormUninitialized {
                name: self.name.clone(),
            });
        }
        let (_, hh, ww) = pass.tape.value(h).dims3()?;
        let s = pass.param(&self.scale_name())?;
        let b = pass.param(&self.bias_name())?;
        let nb = pass.tape.negate(b);
        let shifted = pass.tape.channel_add(h, nb)?;
        let rs = pass.tape.recip(s);
        let out = pass.tape.channel_mul(shifted, rs)?;
        let ld = self.logdet(pass, s, hh * ww)?;
        let ld_inv = pass.tape.negate(ld);
        Ok((out, ld_inv))
    }
}

/// Affine coupling with the double-swap channel permutation.
///
/// The coupling function is a 3-layer CNN (k₁ → 1×1 → k₁) with the final
/// convolution zero-initialized so the layer starts near the identity.
#[derive(Clone)]
pub struct Coupling {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    /// Kernel width of the outer convolutions: 3 at spatial scales ≥ 2×2,
    /// 1 at the 1×1 scale.
    pub k1: usize,
    pub apply_swap: bool,
}

impl Coupling {
    pub fn new(name: String, channels: usize, hidden: usize, k1: usize, apply_swap: bool) -> Self {
        assert!(channels % 2 == 0, "coupling requires an even channel count");
        Coupling {
            name,
            channels,
            hidden,
            k1,
            apply_swap,
        }
    }

    fn pname(&self, layer: usize, kind: &str) -> String {
        format!("{}.conv{layer}.{kind}", self.name)
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let half = self.channels / 2;
        let k = self.k1;
        let std0 = (2.0 / (half * k * k) as f64).sqrt();
        store.insert(
            self.pname(0, "weight"),
            normal_tensor(vec![self.hidden, half, k, k], std0, rng),
        );
        store.insert(self.pname(0, "bias"), Tensor::zeros(vec![self.hidden]));
        let std1 = (2.0 / self.hidden as f64).sqrt();
        store.insert(
            self.pname(1, "weight"),
            normal_tensor(vec![self.hidden, self.hidden, 1, 1], std1, rng),
        );
        store.insert(self.pname(1, "bias"), Tensor::zeros(vec![self.hidden]));
        // Zero-initialized output layer: the coupling starts near-identity.
        store.insert(
            self.pname(2, "weight"),
            Tensor::zeros(vec![self.channels, self.hidden, k, k]),
        );
        store.insert(self.pname(2, "bias"), Tensor::zeros(vec![self.channels]));
    }

    /// Splits into (conditioning half, transformed half) honoring the swap.
    fn split<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        let (c, _, _) = pass.tape.value(h).dims3()?;
        if c % 2 != 0 {
            return Err(FlowError::shape(format!(
                "coupling '{}': channel axis {c} must be even",
                self.name
            )));
        }
        let half = c / 2;
        let lo = pass.tape.channel_slice(h, 0, half)?;
        let hi = pass.tape.channel_slice(h, half, half)?;
        if self.apply_swap {
            Ok((hi, lo))
        } else {
            Ok((lo, hi))
        }
    }

    /// Restores channel order: the second swap of the double-swap scheme.
    fn join<T: Scalar>(
        &self,
        pass: &mut Pass<T>,
        h1: NodeId,
        h2: NodeId,
    ) -> Result<NodeId> {
        if self.apply_swap {
            pass.tape.channel_concat(h2, h1)
        } else {
            pass.tape.channel_concat(h1, h2)
        }
    }

    /// The coupling function: (s, t) = CNN(h₁).
    fn cnn<T: Scalar>(&self, pass: &mut Pass<T>, h1: NodeId) -> Result<(NodeId, NodeId)> {
        let pad = (self.k1 - 1) / 2;
        let w0 = pass.param(&self.pname(0, "weight"))?;
        let b0 = pass.param(&self.pname(0, "bias"))?;
        let w1 = pass.param(&self.pname(1, "weight"))?;
        let b1 = pass.param(&self.pname(1, "bias"))?;
        let w2 = pass.param(&self.pname(2, "weight"))?;
        let b2 = pass.param(&self.pname(2, "bias"))?;
        let c0 = pass.tape.conv2d(h1, w0, b0, pad)?;
        let a0 = pass.tape.relu(c0);
        let c1 = pass.tape.conv2d(a0, w1, b1, 0)?;
        let a1 = pass.tape.relu(c1);
        let out = pass.tape.conv2d(a1, w2, b2, pad)?;
        let half = self.channels / 2;
        let s = pass.tape.channel_slice(out, 0, half)?;
        let t = pass.tape.channel_slice(out, half, half)?;
        Ok((s, t))
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        let (h1, h2) = self.split(pass, h)?;
        let (s, t) = self.cnn(pass, h1)?;
        let sp2 = pass.tape.add_scalar(s, T::from_f64(2.0));
        let sig = pass.tape.sigmoid(sp2);
        let scaled = pass.tape.mul(h2, sig)?;
        let h2p = pass.tape.add(scaled, t)?;
        let out = self.join(pass, h1, h2p)?;
        let ls = pass.tape.log_sigmoid(sp2);
        let logdet = pass.tape.sum(ls);
        Ok((out, logdet))
    }

    /// Inverts using s, t recomputed from the untouched half; the CNN itself
    /// is never inverted.
    pub fn inverse<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        let (h1, h2p) = self.split(pass, h)?;
        let (s, t) = self.cnn(pass, h1)?;
        let sp2 = pass.tape.add_scalar(s, T::from_f64(2.0));
        let sig = pass.tape.sigmoid(sp2);
        let rsig = pass.tape.recip(sig);
        let shifted = pass.tape.sub(h2p, t)?;
        let h2 = pass.tape.mul(shifted, rsig)?;
        let out = self.join(pass, h1, h2)?;
        let ls = pass.tape.log_sigmoid(sp2);
        let total = pass.tape.sum(ls);
        let logdet_inv = pass.tape.negate(total);
        Ok((out, logdet_inv))
    }
}

/// Learned invertible 1×1 convolution (ablation variant), initialized to a
/// random rotation. The inverse is solved fresh at every call.
#[derive(Clone)]
pub struct InvConv {
    pub name: String,
    pub channels: usize,
}

impl InvConv {
    pub fn new(name: String, channels: usize) -> Self {
        InvConv { name, channels }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w = random_rotation::<T, R>(self.channels, rng);
        store.insert(
            self.weight_name(),
            Tensor::new(vec![self.channels, self.channels], w).unwrap(),
        );
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        let (c, hh, ww) = pass.tape.value(h).dims3()?;
        let w = pass.param(&self.weight_name())?;
        let w4 = pass.tape.reshape(w, vec![c, c, 1, 1])?;
        let zb = pass.tape.constant(Tensor::zeros(vec![c]));
        let out = pass.tape.conv2d(h, w4, zb, 0)?;
        let lad = pass.tape.log_abs_det(w)?;
        let logdet = pass.tape.scale(lad, T::from_f64((hh * ww) as f64));
        Ok((out, logdet))
    }

    pub fn inverse<T: Scalar>(&self, pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        let (_, hh, ww) = pass.tape.value(h).dims3()?;
        let w = pass.param(&self.weight_name())?;
        let out = pass.tape.pixel_solve(h, w)?;
        let lad = pass.tape.log_abs_det(w)?;
        let scaled = pass.tape.scale(lad, T::from_f64((hh * ww) as f64));
        let logdet_inv = pass.tape.negate(scaled);
        Ok((out, logdet_inv))
    }

    /// |det W|, used by the training guard.
    pub fn abs_det<T: Scalar>(&self, store: &ParamStore<T>) -> Result<f64> {
        let w = store.get(&self.weight_name())?;
        Ok(crate::linalg::det(w.data(), self.channels).abs().to_f64())
    }
}

/// Factor-out split: first half of the channels continues, the second half
/// is emitted as a latent chunk scored under the standard-normal prior.
pub fn split_forward<T: Scalar>(pass: &mut Pass<T>, h: NodeId) -> Result<(NodeId, NodeId)> {
    let (c, _, _) = pass.tape.value(h).dims3()?;
    if c % 2 != 0 {
        return Err(FlowError::shape(format!(
            "split: channel axis {c} must be even"
        )));
    }
    let keep = pass.tape.channel_slice(h, 0, c / 2)?;
    let z = pass.tape.channel_slice(h, c / 2, c / 2)?;
    Ok((keep, z))
}

/// Restores the original channel order of a factored-out pair.
pub fn split_merge<T: Scalar>(pass: &mut Pass<T>, keep: NodeId, z: NodeId) -> Result<NodeId> {
    pass.tape.channel_concat(keep, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force_logdet, rel_err};
    use crate::params::PassKind;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Coupling with every CNN layer (including the normally-zero output
    /// conv) filled with random values.
    fn random_coupling(
        channels: usize,
        hidden: usize,
        k1: usize,
        swap: bool,
        rng: &mut ChaCha8Rng,
    ) -> (ParamStore<f64>, Coupling) {
        let mut store = ParamStore::new();
        let c = Coupling::new("c".to_string(), channels, hidden, k1, swap);
        c.register(&mut store, rng);
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        (store, c)
    }

    fn random_actnorm(channels: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, ActNorm) {
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), channels);
        a.register(&mut store);
        let scale: Vec<f64> = (0..channels)
            .map(|_| (rng.random_range(-0.4..0.4f64)).exp())
            .collect();
        let bias: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.set("a.scale", Tensor::from_vec(scale)).unwrap();
        store.set("a.bias", Tensor::from_vec(bias)).unwrap();
        a.initialized = true;
        (store, a)
    }

    #[test]
    fn actnorm_init_on_standardized_batch_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // build a batch, then standardize it per channel so init sees
        // zero-mean unit-variance data
        let mut batch: Vec<Tensor<f64>> = (0..8).map(|_| random_image(vec![2, 4, 4], &mut rng)).collect();
        for ch in 0..2 {
            let vals: Vec<f64> = batch
                .iter()
                .flat_map(|t| t.data()[ch * 16..(ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let std = var.sqrt();
            for t in batch.iter_mut() {
                for p in 0..16 {
                    let v = &mut t.data_mut()[ch * 16 + p];
                    *v = (*v - mean) / std;
                }
            }
        }
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), 2);
        a.register(&mut store);
        a.initialize_from_batch(&mut store, &batch).unwrap();
        for &s in store.get("a.scale").unwrap().data() {
            assert_relative_eq!(s, 1.0, epsilon = 1e-9);
        }
        for &b in store.get("a.bias").unwrap().data() {
            assert!(b.abs() < 1e-9);
        }
    }

    #[test]
    fn actnorm_init_standardizes_mean5_std2_channel() {
        // constant structure: values 5±2 with equal counts → mean 5, std 2
        let img1 = Tensor::<f64>::full(vec![1, 2, 2], 3.0);
        let img2 = Tensor::<f64>::full(vec![1, 2, 2], 7.0);
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), 1);
        a.register(&mut store);
        a.initialize_from_batch(&mut store, &[img1, img2]).unwrap();
        assert_relative_eq!(store.get("a.scale").unwrap().data()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(store.get("a.bias").unwrap().data()[0], -2.5, epsilon = 1e-12);
    }

    #[test]
    fn actnorm_init_yields_zero_mean_unit_variance_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Tensor<f64>> = (0..6)
            .map(|_| {
                let mut t = random_image(vec![3, 4, 4], &mut rng);
                for v in t.data_mut() {
                    *v = *v * 2.5 - 1.0;
                }
                t
            })
            .collect();
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), 3);
        a.register(&mut store);
        a.initialize_from_batch(&mut store, &batch).unwrap();

        for ch in 0..3 {
            let mut out = Vec::new();
            for img in &batch {
                let mut pass = Pass::new(&store, PassKind::Eval);
                let h = pass.tape.constant(img.clone());
                let (o, _) = a.forward(&mut pass, h).unwrap();
                out.extend(pass.tape.value(o).data()[ch * 16..(ch + 1) * 16].to_vec());
            }
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
            assert!(mean.abs() <= 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn actnorm_init_rejects_constant_channel() {
        let batch = vec![Tensor::<f64>::full(vec![2, 2, 2], 1.0); 4];
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), 2);
        a.register(&mut store);
        match a.initialize_from_batch(&mut store, &batch) {
            Err(FlowError::DegenerateChannel { channel, .. }) => assert_eq!(channel, 0),
            other => panic!("expected degenerate channel, got {other:?}"),
        }
    }

    #[test]
    fn actnorm_forward_requires_initialization() {
        let mut store = ParamStore::<f64>::new();
        let a = ActNorm::new("a".to_string(), 1);
        a.register(&mut store);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(Tensor::zeros(vec![1, 2, 2]));
        assert!(matches!(
            a.forward(&mut pass, h),
            Err(FlowError::ActnormUninitialized { .. })
        ));
    }

    #[test]
    fn actnorm_identity_has_zero_logdet() {
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), 2);
        a.register(&mut store);
        a.initialized = true;
        let mut pass = Pass::new(&store, PassKind::Eval);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .reshaped(vec![2, 2, 2])
            .unwrap();
        let h = pass.tape.constant(x.clone());
        let (o, ld) = a.forward(&mut pass, h).unwrap();
        assert_eq!(pass.tape.value(o).data(), x.data());
        assert_relative_eq!(pass.tape.value(ld).item(), 0.0);
    }

    #[test]
    fn actnorm_logdet_closed_form_scale_two() {
        let mut store = ParamStore::new();
        let mut a = ActNorm::new("a".to_string(), 1);
        a.register(&mut store);
        store.set("a.scale", Tensor::from_vec(vec![2.0])).unwrap();
        a.initialized = true;
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let (_, ld) = a.forward(&mut pass, h).unwrap();
        assert_relative_eq!(pass.tape.value(ld).item(), 4.0 * (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn actnorm_round_trip_and_logdet_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, a) = random_actnorm(3, &mut rng);
        let x = random_image(vec![3, 4, 4], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (y, ld) = a.forward(&mut pass, h).unwrap();
        let (back, ld_inv) = a.inverse(&mut pass, y).unwrap();
        assert!(pass.tape.value(back).max_abs_diff(&x) < 1e-6);
        assert!(
            (pass.tape.value(ld).item() + pass.tape.value(ld_inv).item()).abs() < 1e-9
        );
    }

    #[test]
    fn coupling_zero_init_scales_by_sigmoid_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let c = Coupling::new("c".to_string(), 4, 8, 3, false);
        c.register(&mut store, &mut rng);
        let x = random_image(vec![4, 4, 4], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (y, ld) = c.forward(&mut pass, h).unwrap();
        let out = pass.tape.value(y);
        let sig2 = 0.8807970779778823;
        let plane = 16;
        // untouched half passes through exactly
        assert_eq!(&out.data()[..2 * plane], &x.data()[..2 * plane]);
        for p in 0..2 * plane {
            assert_relative_eq!(out.data()[2 * plane + p], x.data()[2 * plane + p] * sig2, epsilon = 1e-12);
        }
        // logdet = (n/2)·log σ(2) with n the element count of h
        let n = x.numel() as f64;
        assert_relative_eq!(
            pass.tape.value(ld).item(),
            (n / 2.0) * sig2.ln(),
            epsilon = 1e-9
        );
        assert_relative_eq!(sig2.ln(), -0.1269280110429726, epsilon = 1e-12);
    }

    #[test]
    fn coupling_conditioning_half_unchanged_with_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, c) = random_coupling(4, 8, 3, true, &mut rng);
        let x = random_image(vec![4, 4, 4], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (y, _) = c.forward(&mut pass, h).unwrap();
        // with swap, the conditioning half is the second half of channels
        let plane = 16;
        assert_eq!(
            &pass.tape.value(y).data()[2 * plane..],
            &x.data()[2 * plane..]
        );
    }

    #[test]
    fn coupling_rejects_odd_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, c) = random_coupling(4, 8, 1, false, &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(Tensor::zeros(vec![3, 2, 2]));
        assert!(c.forward(&mut pass, h).is_err());
    }

    #[test]
    fn coupling_logdet_matches_brute_force_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, c) = random_coupling(4, 6, 3, true, &mut rng);
        let x = random_image(vec![4, 4, 4], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (_, ld) = c.forward(&mut pass, h).unwrap();
        let analytic = pass.tape.value(ld).item();

        let oracle = brute_force_logdet(
            &mut |t: &Tensor<f64>| {
                let mut p = Pass::new(&store, PassKind::Eval);
                let h = p.tape.constant(t.clone());
                let (y, _) = c.forward(&mut p, h).unwrap();
                p.tape.value(y).clone()
            },
            &x,
            1e-5,
        );
        assert!(
            rel_err(analytic, oracle) <= 1e-5,
            "analytic {analytic} vs oracle {oracle}"
        );
    }

    #[test]
    fn coupling_inverse_round_trips_and_negates_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for swap in [false, true] {
            let (store, c) = random_coupling(6, 8, 3, swap, &mut rng);
            let x = random_image(vec![6, 4, 4], &mut rng);
            let mut pass = Pass::new(&store, PassKind::Eval);
            let h = pass.tape.constant(x.clone());
            let (y, ld) = c.forward(&mut pass, h).unwrap();
            let (back, ld_inv) = c.inverse(&mut pass, y).unwrap();
            assert!(pass.tape.value(back).max_abs_diff(&x) < 1e-9);
            assert!(
                (pass.tape.value(ld).item() + pass.tape.value(ld_inv).item()).abs() < 1e-9
            );
        }
    }

    #[test]
    fn coupling_zero_init_inverse_divides_by_sigmoid_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let c = Coupling::new("c".to_string(), 2, 4, 1, false);
        c.register(&mut store, &mut rng);
        let x = random_image(vec![2, 2, 2], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (y, _) = c.inverse(&mut pass, h).unwrap();
        let sig2 = 0.8807970779778823;
        for p in 0..4 {
            assert_relative_eq!(pass.tape.value(y).data()[4 + p], x.data()[4 + p] / sig2, epsilon = 1e-12);
        }
    }

    #[test]
    fn swap_alternation_transforms_every_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut store, c_swap) = random_coupling(4, 6, 3, true, &mut rng);
        let c_plain = Coupling::new("c2".to_string(), 4, 6, 3, false);
        c_plain.register(&mut store, &mut rng);
        for (name, t) in store.iter_mut() {
            if name.starts_with("c2.") {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
        let x = random_image(vec![4, 4, 4], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (y1, _) = c_swap.forward(&mut pass, h).unwrap();
        let (y2, _) = c_plain.forward(&mut pass, y1).unwrap();
        let out = pass.tape.value(y2);
        // no coordinate passes through both layers unchanged
        for (i, (&a, &b)) in x.data().iter().zip(out.data().iter()).enumerate() {
            assert!((a - b).abs() > 1e-12, "coordinate {i} unchanged");
        }
    }

    #[test]
    fn invconv_identity_weight_is_identity_map() {
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "ic.weight",
            Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let ic = InvConv::new("ic".to_string(), 2);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0])
            .reshaped(vec![2, 1, 2])
            .unwrap();
        let h = pass.tape.constant(x.clone());
        let (y, ld) = ic.forward(&mut pass, h).unwrap();
        assert_eq!(pass.tape.value(y).data(), x.data());
        assert_relative_eq!(pass.tape.value(ld).item(), 0.0);
    }

    #[test]
    fn invconv_doubling_weight_logdet_log4() {
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "ic.weight",
            Tensor::<f64>::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap(),
        );
        let ic = InvConv::new("ic".to_string(), 2);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(Tensor::from_vec(vec![1.0, -1.0]).reshaped(vec![2, 1, 1]).unwrap());
        let (y, ld) = ic.forward(&mut pass, h).unwrap();
        assert_eq!(pass.tape.value(y).data(), &[2.0, -2.0]);
        assert_relative_eq!(pass.tape.value(ld).item(), (4.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn invconv_round_trip_and_jacobian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ic = InvConv::new("ic".to_string(), 2);
        ic.register(&mut store, &mut rng);
        // stretch the rotation so the logdet is away from zero
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v *= 1.3;
            }
        }
        let x = random_image(vec![2, 2, 2], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (y, ld) = ic.forward(&mut pass, h).unwrap();
        let (back, ld_inv) = ic.inverse(&mut pass, y).unwrap();
        assert!(pass.tape.value(back).max_abs_diff(&x) < 1e-6);
        assert!((pass.tape.value(ld).item() + pass.tape.value(ld_inv).item()).abs() < 1e-12);

        let analytic = pass.tape.value(ld).item();
        let oracle = brute_force_logdet(
            &mut |t: &Tensor<f64>| {
                let mut p = Pass::new(&store, PassKind::Eval);
                let h = p.tape.constant(t.clone());
                let (y, _) = ic.forward(&mut p, h).unwrap();
                p.tape.value(y).clone()
            },
            &x,
            1e-5,
        );
        assert!(rel_err(analytic, oracle) <= 1e-6);
    }

    #[test]
    fn split_keeps_first_half_and_merge_restores_order() {
        let store = ParamStore::<f64>::new();
        let mut pass = Pass::new(&store, PassKind::Eval);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0])
            .reshaped(vec![4, 1, 1])
            .unwrap();
        let h = pass.tape.constant(x.clone());
        let (keep, z) = split_forward(&mut pass, h).unwrap();
        assert_eq!(pass.tape.value(keep).data(), &[1.0, 2.0]);
        assert_eq!(pass.tape.value(z).data(), &[3.0, 4.0]);
        let back = split_merge(&mut pass, keep, z).unwrap();
        assert_eq!(pass.tape.value(back).data(), x.data());
    }

    #[test]
    fn split_rejects_odd_channels() {
        let store = ParamStore::<f64>::new();
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(Tensor::zeros(vec![3, 1, 1]));
        assert!(split_forward(&mut pass, h).is_err());
    }

    #[test]
    fn actnorm_logdet_matches_brute_force_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (store, a) = random_actnorm(2, &mut rng);
        let x = random_image(vec![2, 4, 4], &mut rng);
        let mut pass = Pass::new(&store, PassKind::Eval);
        let h = pass.tape.constant(x.clone());
        let (_, ld) = a.forward(&mut pass, h).unwrap();
        let analytic = pass.tape.value(ld).item();
        let oracle = brute_force_logdet(
            &mut |t: &Tensor<f64>| {
                let mut p = Pass::new(&store, PassKind::Eval);
                let h = p.tape.constant(t.clone());
                let (y, _) = a.forward(&mut p, h).unwrap();
                p.tape.value(y).clone()
            },
            &x,
            1e-5,
        );
        assert!(rel_err(analytic, oracle) <= 1e-4);
    }
}
