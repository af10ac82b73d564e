//! Network building blocks on top of the autodiff engine: convolution,
//! normalization with running statistics, parameter visitation, SGD.
//!
//! Normalization always normalizes with the running (evaluation) statistics,
//! so every graph sees constant normalizers and the bi-level graphs stay
//! deterministic. Designated training forwards report the observed batch
//! moments and the caller folds them into the running buffers afterwards.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;

/// Per-channel mean and variance observed by one normalization layer.
#[derive(Debug, Clone)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const NORM_EPS: f64 = 1e-5;

/// Convolution parameters, stride 1, odd kernel, same padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ArrayD<f64>, // [out, in, k, k]
    pub bias: ArrayD<f64>,   // [out]
}

impl Conv2d {
    pub fn kaiming(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, k, k]), |_| {
            gaussian(rng) * std
        });
        Conv2d { weight, bias: ArrayD::zeros(IxDyn(&[out_ch])) }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv2d {
            weight: ArrayD::zeros(IxDyn(&[out_ch, in_ch, k, k])),
            bias: ArrayD::zeros(IxDyn(&[out_ch])),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn vars(&self, trainable: bool) -> Conv2dVars {
        Conv2dVars {
            weight: wrap(&self.weight, trainable),
            bias: wrap(&self.bias, trainable),
        }
    }
}

/// Box-Muller standard normal; keeps rand_distr out of the hot init path.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn wrap(value: &ArrayD<f64>, trainable: bool) -> Var {
    if trainable {
        Var::leaf(value.clone())
    } else {
        Var::constant(value.clone())
    }
}

#[derive(Clone)]
pub struct Conv2dVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conv2dVars {
    /// Same-padding convolution via im2col + gemm (1x1 kernels skip the
    /// patch extraction entirely).
    pub fn forward(&self, x: &Var) -> Var {
        let ws = self.weight.shape();
        let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
        let xs = x.shape();
        assert_eq!(xs[1], in_ch, "conv input channels");
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let cols = if k == 1 { x.nchw_to_rows() } else { x.im2col(k, (k - 1) / 2) };
        let wmat = self.weight.reshape(&[out_ch, in_ch * k * k]);
        let out = cols.matmul_nt(&wmat); // [N*H*W, out]
        let out = out.rows_to_nchw(n, h, w);
        out.add(&self.bias.reshape(&[1, out_ch, 1, 1]))
    }
}

/// Channel-affine normalization with running statistics.
#[derive(Debug, Clone)]
pub struct Norm2d {
    pub gamma: ArrayD<f64>,        // [C]
    pub beta: ArrayD<f64>,         // [C]
    pub running_mean: ArrayD<f64>, // [C]
    pub running_var: ArrayD<f64>,  // [C]
}

impl Norm2d {
    pub fn new(channels: usize) -> Self {
        Norm2d {
            gamma: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Fold observed batch moments into the running buffers.
    pub fn update_stats(&mut self, m: &ChannelMoments, momentum: f64) {
        for (r, &b) in self.running_mean.iter_mut().zip(m.mean.iter()) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(m.var.iter()) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    pub fn vars(&self, trainable: bool) -> Norm2dVars {
        Norm2dVars {
            gamma: wrap(&self.gamma, trainable),
            beta: wrap(&self.beta, trainable),
            mean: Var::constant(self.running_mean.clone()),
            var: Var::constant(self.running_var.clone()),
        }
    }
}

#[derive(Clone)]
pub struct Norm2dVars {
    pub gamma: Var,
    pub beta: Var,
    mean: Var,
    var: Var,
}

impl Norm2dVars {
    /// `(x - mean) / sqrt(var + eps) * gamma + beta` with running stats.
    pub fn forward(&self, x: &Var) -> Var {
        let c = x.shape()[1];
        let inv = Var::constant(
            self.var.value().mapv(|v| 1.0 / (v + NORM_EPS).sqrt()),
        );
        let scale = self.gamma.mul(&inv);
        let shift = self.beta.sub(&scale.mul(&self.mean));
        x.mul(&scale.reshape(&[1, c, 1, 1])).add(&shift.reshape(&[1, c, 1, 1]))
    }
}

/// Conv → norm → relu.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm2d,
}

impl ConvBlock {
    pub fn kaiming(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock { conv: Conv2d::kaiming(in_ch, out_ch, k, rng), norm: Norm2d::new(out_ch) }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }

    pub fn vars(&self, trainable: bool) -> ConvBlockVars {
        ConvBlockVars { conv: self.conv.vars(trainable), norm: self.norm.vars(trainable) }
    }
}

#[derive(Clone)]
pub struct ConvBlockVars {
    pub conv: Conv2dVars,
    pub norm: Norm2dVars,
}

impl ConvBlockVars {
    /// When `moments` is given, the pre-norm batch moments are appended so the
    /// caller can update running statistics after the step.
    pub fn forward(&self, x: &Var, moments: Option<&mut Vec<ChannelMoments>>) -> Var {
        let pre = self.conv.forward(x);
        if let Some(out) = moments {
            out.push(batch_moments(pre.value()));
        }
        self.norm.forward(&pre).relu()
    }
}

/// Per-channel mean/variance of an `[N,C,H,W]` activation.
pub fn batch_moments(x: &ArrayD<f64>) -> ChannelMoments {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let count = (n * h * w) as f64;
    let data = x.as_slice().unwrap();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            mean[ci] += plane.iter().sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for ni in 0..n {
        for ci in 0..c {
            let plane = &data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            var[ci] += plane.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    ChannelMoments { mean, var }
}

/// Uniform access to a model's tensors for EMA, optimization and
/// checkpointing. The boolean marks trainable parameters (running statistics
/// are carried but never gradient-updated).
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &ArrayD<f64>, bool)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>, bool)>;

    fn trainable_count(&self) -> usize {
        self.tensors().iter().filter(|(_, _, t)| *t).map(|(_, a, _)| a.len()).sum()
    }
}

pub fn conv_tensors<'a>(prefix: &str, c: &'a Conv2d) -> Vec<(String, &'a ArrayD<f64>, bool)> {
    vec![
        (format!("{prefix}.weight"), &c.weight, true),
        (format!("{prefix}.bias"), &c.bias, true),
    ]
}

pub fn conv_tensors_mut<'a>(
    prefix: &str,
    c: &'a mut Conv2d,
) -> Vec<(String, &'a mut ArrayD<f64>, bool)> {
    vec![
        (format!("{prefix}.weight"), &mut c.weight, true),
        (format!("{prefix}.bias"), &mut c.bias, true),
    ]
}

pub fn block_tensors<'a>(prefix: &str, b: &'a ConvBlock) -> Vec<(String, &'a ArrayD<f64>, bool)> {
    let mut v = conv_tensors(&format!("{prefix}.conv"), &b.conv);
    v.push((format!("{prefix}.gamma"), &b.norm.gamma, true));
    v.push((format!("{prefix}.beta"), &b.norm.beta, true));
    v.push((format!("{prefix}.running_mean"), &b.norm.running_mean, false));
    v.push((format!("{prefix}.running_var"), &b.norm.running_var, false));
    v
}

pub fn block_tensors_mut<'a>(
    prefix: &str,
    b: &'a mut ConvBlock,
) -> Vec<(String, &'a mut ArrayD<f64>, bool)> {
    let mut v = conv_tensors_mut(&format!("{prefix}.conv"), &mut b.conv);
    v.push((format!("{prefix}.gamma"), &mut b.norm.gamma, true));
    v.push((format!("{prefix}.beta"), &mut b.norm.beta, true));
    v.push((format!("{prefix}.running_mean"), &mut b.norm.running_mean, false));
    v.push((format!("{prefix}.running_var"), &mut b.norm.running_var, false));
    v
}

/// SGD with classical momentum: `v = mu*v + g; p -= lr*v`.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[ArrayD<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<ArrayD<f64>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + g);
            p.zip_mut_with(v, |p, &v| *p -= self.lr * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use rand::SeedableRng;

    #[test]
    fn conv_block_keeps_shape_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = ConvBlock::kaiming(3, 8, 3, &mut rng);
        let x = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 6, 6]), |_| 0.3));
        let vars = block.vars(true);
        let y = vars.forward(&x, None);
        assert_eq!(y.shape(), &[2, 8, 6, 6]);
        let loss = y.mul(&y).mean_all();
        let gs = grad(&loss, &[&vars.conv.weight, &vars.norm.gamma]);
        assert_eq!(gs[0].shape(), &[8, 3, 3, 3]);
        assert!(gs[1].value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_moments_match_direct_computation() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 1, 2]),
            vec![1.0, 3.0, -1.0, 5.0],
        )
        .unwrap();
        let m = batch_moments(&x);
        assert_eq!(m.mean, vec![2.0, 2.0]);
        assert_eq!(m.var, vec![1.0, 9.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let mut p = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let g = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        opt.step(&mut [&mut p], std::slice::from_ref(&g));
        assert!((p[[0]] - 0.9).abs() < 1e-12);
        opt.step(&mut [&mut p], &[g]);
        // v = 0.9*1 + 1 = 1.9; p = 0.9 - 0.19
        assert!((p[[0]] - 0.71).abs() < 1e-12);
    }
}
