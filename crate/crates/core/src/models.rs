//! The segmentation student/teacher network and the meta temperature
//! network (MTN), with the parameter-space utilities the training loops
//! need: EMA updates, head cloning, running-statistics refresh.

use ndarray::{Array2, ArrayD};
#[cfg(test)]
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    block_tensors, block_tensors_mut, conv_tensors, conv_tensors_mut, ChannelMoments, Conv2d,
    Conv2dVars, ConvBlock, ConvBlockVars, ParamSet,
};

/// Lower bound and ceiling for every temperature this crate produces.
pub const TEMP_FLOOR: f64 = 0.05;
pub const TEMP_CEIL: f64 = 20.0;

/// Per-pixel positive temperatures, clamped to `[TEMP_FLOOR, TEMP_CEIL]`.
#[derive(Debug, Clone)]
pub struct TemperatureMap(Array2<f64>);

impl TemperatureMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&t| !(TEMP_FLOOR..=TEMP_CEIL).contains(&t)) {
            return Err(Error::Domain(format!(
                "temperature outside [{TEMP_FLOOR}, {TEMP_CEIL}]"
            )));
        }
        Ok(TemperatureMap(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub widths: [usize; 3],
    pub kernel: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { in_channels: 3, classes: 4, widths: [16, 32, 32], kernel: 3 }
    }
}

/// Encoder–decoder segmentation network: three conv-norm-relu stages with
/// two 2x downsamplings, nearest upsampling back to input resolution, and a
/// 1x1 classification head. Output spatial shape equals input shape for any
/// size divisible by 4.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub cfg: SegNetConfig,
    pub blocks: Vec<ConvBlock>,
    pub head: Conv2d,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = cfg.widths;
        let blocks = vec![
            ConvBlock::kaiming(cfg.in_channels, w0, cfg.kernel, &mut rng),
            ConvBlock::kaiming(w0, w1, cfg.kernel, &mut rng),
            ConvBlock::kaiming(w1, w2, cfg.kernel, &mut rng),
        ];
        let head = Conv2d::kaiming(w2, cfg.classes, 1, &mut rng);
        SegNet { cfg, blocks, head }
    }

    pub fn vars(&self, trainable: bool) -> SegNetVars {
        SegNetVars {
            blocks: self.blocks.iter().map(|b| b.vars(trainable)).collect(),
            head: self.head.vars(trainable),
        }
    }

    /// Backbone constants plus an explicitly supplied head, as the inner
    /// optimization uses: updates flow into the head only.
    pub fn vars_with_head(&self, head: &Conv2d, head_trainable: bool) -> SegNetVars {
        SegNetVars {
            blocks: self.blocks.iter().map(|b| b.vars(false)).collect(),
            head: head.vars(head_trainable),
        }
    }

    /// Plain logits for an `[N,C,H,W]` image batch, no gradient tracking.
    pub fn logits(&self, images: &ArrayD<f64>) -> ArrayD<f64> {
        let vars = self.vars(false);
        vars.forward(&Var::constant(images.clone()), None).value().clone()
    }

    /// Fold observed batch moments (one entry per block, in block order)
    /// into the running statistics.
    pub fn update_stats(&mut self, moments: &[ChannelMoments], momentum: f64) {
        assert_eq!(moments.len(), self.blocks.len());
        for (b, m) in self.blocks.iter_mut().zip(moments) {
            b.norm.update_stats(m, momentum);
        }
    }
}

impl ParamSet for SegNet {
    fn tensors(&self) -> Vec<(String, &ArrayD<f64>, bool)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(block_tensors(&format!("block{i}"), b));
        }
        v.extend(conv_tensors("head", &self.head));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>, bool)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(block_tensors_mut(&format!("block{i}"), b));
        }
        v.extend(conv_tensors_mut("head", &mut self.head));
        v
    }
}

pub struct SegNetVars {
    pub blocks: Vec<ConvBlockVars>,
    pub head: Conv2dVars,
}

impl SegNetVars {
    /// Backbone features at input resolution.
    pub fn features(&self, x: &Var, mut moments: Option<&mut Vec<ChannelMoments>>) -> Var {
        let h = self.blocks[0].forward(x, moments.as_deref_mut());
        let h = h.avg_pool2();
        let h = self.blocks[1].forward(&h, moments.as_deref_mut());
        let h = h.avg_pool2();
        let h = self.blocks[2].forward(&h, moments.as_deref_mut());
        h.upsample_nearest(4)
    }

    pub fn forward(&self, x: &Var, moments: Option<&mut Vec<ChannelMoments>>) -> Var {
        let f = self.features(x, moments);
        self.head.forward(&f)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MtnConfig {
    pub image_channels: usize,
    pub classes: usize,
    pub width: usize,
    /// Total number of conv layers, including the 1-channel output layer.
    pub depth: usize,
    pub kernel: usize,
}

impl Default for MtnConfig {
    fn default() -> Self {
        MtnConfig { image_channels: 3, classes: 4, width: 32, depth: 3, kernel: 3 }
    }
}

/// Meta temperature network: conv-norm-relu blocks over the channel-wise
/// concatenation of image and logits, ending in a 1-channel raw map that is
/// mapped to `softplus(raw) + TEMP_FLOOR`, clamped at `TEMP_CEIL`.
///
/// The output layer starts at zero weights with its bias chosen so the
/// initial temperature is exactly 1 everywhere.
#[derive(Debug, Clone)]
pub struct Mtn {
    pub cfg: MtnConfig,
    pub blocks: Vec<ConvBlock>,
    pub out: Conv2d,
}

impl Mtn {
    pub fn new(cfg: MtnConfig, seed: u64) -> Self {
        assert!(cfg.depth >= 2, "MTN needs at least one block plus the output layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_ch = cfg.image_channels + cfg.classes;
        let mut blocks = Vec::new();
        let mut prev = in_ch;
        for _ in 0..cfg.depth - 1 {
            blocks.push(ConvBlock::kaiming(prev, cfg.width, cfg.kernel, &mut rng));
            prev = cfg.width;
        }
        let mut out = Conv2d::zeros(prev, 1, cfg.kernel);
        out.bias.fill(softplus_inverse(1.0 - TEMP_FLOOR));
        Mtn { cfg, blocks, out }
    }

    pub fn vars(&self, trainable: bool) -> MtnVars {
        MtnVars {
            blocks: self.blocks.iter().map(|b| b.vars(trainable)).collect(),
            out: self.out.vars(trainable),
        }
    }

    pub fn update_stats(&mut self, moments: &[ChannelMoments], momentum: f64) {
        assert_eq!(moments.len(), self.blocks.len());
        for (b, m) in self.blocks.iter_mut().zip(moments) {
            b.norm.update_stats(m, momentum);
        }
    }
}

impl ParamSet for Mtn {
    fn tensors(&self) -> Vec<(String, &ArrayD<f64>, bool)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(block_tensors(&format!("block{i}"), b));
        }
        v.extend(conv_tensors("out", &self.out));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>, bool)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(block_tensors_mut(&format!("block{i}"), b));
        }
        v.extend(conv_tensors_mut("out", &mut self.out));
        v
    }
}

pub struct MtnVars {
    pub blocks: Vec<ConvBlockVars>,
    pub out: Conv2dVars,
}

fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Per-pixel temperatures `[N,1,H,W]` from an image batch and logits.
///
/// Both inputs are detached: gradient flows only into the MTN parameters.
/// Pass `moments` to collect batch moments for a running-statistics update.
pub fn mtn_forward(
    mtn: &MtnVars,
    images: &Var,
    logits: &Var,
    mut moments: Option<&mut Vec<ChannelMoments>>,
) -> Var {
    assert_eq!(
        images.shape()[2..],
        logits.shape()[2..],
        "image and logits spatial shapes differ"
    );
    let mut h = Var::concat(&[images.detach(), logits.detach()], 1);
    for b in &mtn.blocks {
        h = b.forward(&h, moments.as_deref_mut());
    }
    let raw = mtn.out.forward(&h);
    raw.softplus().add_scalar(TEMP_FLOOR).clamp(TEMP_FLOOR, TEMP_CEIL)
}

/// `target <- gamma*target + (1-gamma)*source`, element-wise over every
/// tensor (trainable parameters and running statistics alike).
pub fn ema_update<M: ParamSet>(target: &mut M, source: &M, gamma: f64) -> Result<()> {
    let src: Vec<(String, &ArrayD<f64>, bool)> = source.tensors();
    let mut dst = target.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch("parameter structures differ".into()));
    }
    for ((dn, d, _), (sn, s, _)) in dst.iter_mut().zip(src.iter()) {
        if dn != sn || d.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {dn} does not match {sn}"
            )));
        }
        d.zip_mut_with(s, |t, &v| *t = gamma * *t + (1.0 - gamma) * v);
    }
    Ok(())
}

/// Independently mutable copy of the segmentation head; the backbone stays
/// with the original network and is shared read-only.
pub fn clone_head(net: &SegNet) -> Conv2d {
    net.head.clone()
}

/// Extract one batch element of `[N,C,H,W]` logits as an `[H,W,C]` array.
pub fn logits_to_hwc(batch: &ArrayD<f64>, index: usize) -> ndarray::Array3<f64> {
    let s = batch.shape();
    assert_eq!(s.len(), 4);
    let (c, h, w) = (s[1], s[2], s[3]);
    ndarray::Array3::from_shape_fn((h, w, c), |(i, j, k)| batch[[index, k, i, j]])
}

/// Extract the temperature map of one batch element as a 2-d array.
pub fn temperature_map(batch: &ArrayD<f64>, index: usize) -> Result<TemperatureMap> {
    let s = batch.shape();
    assert_eq!(s.len(), 4);
    assert_eq!(s[1], 1);
    let (h, w) = (s[2], s[3]);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = batch[[index, 0, i, j]];
        }
    }
    TemperatureMap::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad, log_softmax};

    fn batch(n: usize, c: usize, h: usize, w: usize, scale: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |ix| {
            let f = (ix[0] * 31 + ix[1] * 17 + ix[2] * 7 + ix[3]) as f64;
            ((f * 0.7311).sin()) * scale
        })
    }

    #[test]
    fn segnet_output_matches_input_shape() {
        let net = SegNet::new(SegNetConfig::default(), 3);
        let x = batch(2, 3, 8, 8, 0.5);
        let y = net.logits(&x);
        assert_eq!(y.shape(), &[2, 4, 8, 8]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mtn_zero_final_layer_gives_softplus_zero_temperature() {
        let cfg = MtnConfig { width: 8, ..MtnConfig::default() };
        let mut mtn = Mtn::new(cfg, 11);
        mtn.out.bias.fill(0.0); // zero-initialized final layer
        let x = batch(1, 3, 8, 8, 0.5);
        let z = batch(1, 4, 8, 8, 1.0);
        let t = mtn_forward(&mtn.vars(false), &Var::constant(x), &Var::constant(z), None);
        let expected = std::f64::consts::LN_2 + TEMP_FLOOR; // softplus(0) + floor
        for &v in t.value().iter() {
            assert!((v - expected).abs() < 1e-12, "got {v}, want {expected}");
        }
        assert!((expected - 0.7431).abs() < 1e-4);
    }

    #[test]
    fn mtn_default_initialization_outputs_unit_temperature() {
        let mtn = Mtn::new(MtnConfig { width: 8, ..MtnConfig::default() }, 11);
        let x = batch(1, 3, 8, 8, 0.5);
        let z = batch(1, 4, 8, 8, 1.0);
        let t = mtn_forward(&mtn.vars(false), &Var::constant(x), &Var::constant(z), None);
        for &v in t.value().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mtn_temperatures_stay_in_bounds() {
        let mut mtn = Mtn::new(MtnConfig { width: 4, ..MtnConfig::default() }, 5);
        mtn.out.bias.fill(-100.0);
        let x = batch(1, 3, 8, 8, 1.0);
        let z = batch(1, 4, 8, 8, 1.0);
        let t = mtn_forward(&mtn.vars(false), &Var::constant(x.clone()), &Var::constant(z.clone()), None);
        assert!(t.value().iter().all(|&v| v >= TEMP_FLOOR));
        mtn.out.bias.fill(100.0);
        let t = mtn_forward(&mtn.vars(false), &Var::constant(x), &Var::constant(z), None);
        assert!(t.value().iter().all(|&v| v <= TEMP_CEIL));
    }

    #[test]
    fn ema_gamma_limits_hold() {
        let mut a = SegNet::new(SegNetConfig::default(), 1);
        let b = SegNet::new(SegNetConfig::default(), 2);
        let before = a.head.weight.clone();
        ema_update(&mut a, &b, 1.0).unwrap();
        assert_eq!(a.head.weight, before);
        ema_update(&mut a, &b, 0.0).unwrap();
        assert_eq!(a.head.weight, b.head.weight);
    }

    #[test]
    fn ema_converges_geometrically_to_fixed_source() {
        let mut target = SegNet::new(SegNetConfig::default(), 1);
        let source = SegNet::new(SegNetConfig::default(), 2);
        let gamma = 0.9;
        let dist = |a: &SegNet, b: &SegNet| -> f64 {
            a.tensors()
                .iter()
                .zip(b.tensors())
                .map(|((_, x, _), (_, y, _))| {
                    x.iter().zip(y.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&target, &source);
        for _ in 0..5 {
            ema_update(&mut target, &source, gamma).unwrap();
            let d = dist(&target, &source);
            assert!((d - gamma * prev).abs() < 1e-9 * (1.0 + prev));
            prev = d;
        }
    }

    #[test]
    fn cloned_head_is_independent_and_head_sized() {
        let mut net = SegNet::new(SegNetConfig::default(), 9);
        let mut head = clone_head(&net);
        assert_eq!(head.param_count(), net.head.param_count());
        let x = batch(1, 3, 8, 8, 0.4);
        let base = net.logits(&x);
        // unmutated clone reproduces the original bit for bit
        let same = net
            .vars_with_head(&head, false)
            .forward(&Var::constant(x.clone()), None)
            .value()
            .clone();
        assert_eq!(base, same);
        // mutating the clone leaves the original untouched
        head.weight.fill(0.0);
        let orig = net.head.weight.clone();
        assert!(orig.iter().any(|&v| v != 0.0));
        net.head = head;
        assert!(net.head.weight.iter().all(|&v| v == 0.0));
    }

    /// Full-network gradient against central finite differences on a small
    /// input: every trainable tensor of SegNet and MTN.
    #[test]
    fn model_gradients_match_finite_differences() {
        let cfg = SegNetConfig { widths: [4, 4, 4], ..SegNetConfig::default() };
        let net = SegNet::new(cfg, 21);
        let mtn = Mtn::new(MtnConfig { width: 3, ..MtnConfig::default() }, 22);
        let x = batch(1, 3, 8, 8, 0.6);
        let z = batch(1, 4, 8, 8, 1.2);
        let target = {
            let mut t = ArrayD::zeros(IxDyn(&[1, 4, 8, 8]));
            for i in 0..8 {
                for j in 0..8 {
                    t[[0, (i + j) % 4, i, j]] = 1.0;
                }
            }
            t
        };

        // segnet loss: CE against a fixed one-hot target
        let seg_loss = |net: &SegNet| -> f64 {
            let lp = log_softmax(
                &net.vars(false).forward(&Var::constant(x.clone()), None),
                1,
            );
            lp.mul(&Var::constant(target.clone())).sum_all().mul_scalar(-1.0 / 64.0).item()
        };
        let vars = net.vars(true);
        let lp = log_softmax(&vars.forward(&Var::constant(x.clone()), None), 1);
        let loss = lp.mul(&Var::constant(target.clone())).sum_all().mul_scalar(-1.0 / 64.0);
        let leaves: Vec<&Var> =
            vec![&vars.blocks[0].conv.weight, &vars.blocks[1].norm.gamma, &vars.head.weight];
        let gs = grad(&loss, &leaves);

        let mut probe = net.clone();
        let eps = 1e-4;
        for (leaf_idx, name) in
            [(0usize, "block0.conv.weight"), (1, "block1.gamma"), (2, "head.weight")]
        {
            let analytic = gs[leaf_idx].value().clone();
            let flat_len = analytic.len();
            for k in (0..flat_len).step_by((flat_len / 6).max(1)) {
                let tensors = probe.tensors_mut();
                let (_, t, _) = tensors.into_iter().find(|(n, _, _)| n == name).unwrap();
                let orig = t.as_slice_mut().unwrap()[k];
                t.as_slice_mut().unwrap()[k] = orig + eps;
                let fp = seg_loss(&probe);
                let tensors = probe.tensors_mut();
                let (_, t, _) = tensors.into_iter().find(|(n, _, _)| n == name).unwrap();
                t.as_slice_mut().unwrap()[k] = orig - eps;
                let fm = seg_loss(&probe);
                let tensors = probe.tensors_mut();
                let (_, t, _) = tensors.into_iter().find(|(n, _, _)| n == name).unwrap();
                t.as_slice_mut().unwrap()[k] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[k];
                let denom = 1.0f64.max(numeric.abs());
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "{name}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }

        // mtn loss: mean temperature, against the out-layer bias and a block weight
        let mtn_loss = |m: &Mtn| -> f64 {
            mtn_forward(&m.vars(false), &Var::constant(x.clone()), &Var::constant(z.clone()), None)
                .mean_all()
                .item()
        };
        let mvars = mtn.vars(true);
        let t = mtn_forward(&mvars, &Var::constant(x.clone()), &Var::constant(z.clone()), None);
        let tm = t.mean_all();
        let gs = grad(&tm, &[&mvars.out.bias, &mvars.blocks[0].conv.weight]);
        let mut probe = mtn.clone();
        for (leaf_idx, name) in [(0usize, "out.bias"), (1, "block0.conv.weight")] {
            let analytic = gs[leaf_idx].value().clone();
            for k in (0..analytic.len()).step_by((analytic.len() / 5).max(1)) {
                let tensors = probe.tensors_mut();
                let (_, t, _) = tensors.into_iter().find(|(n, _, _)| n == name).unwrap();
                let orig = t.as_slice_mut().unwrap()[k];
                t.as_slice_mut().unwrap()[k] = orig + eps;
                let fp = mtn_loss(&probe);
                let tensors = probe.tensors_mut();
                let (_, t, _) = tensors.into_iter().find(|(n, _, _)| n == name).unwrap();
                t.as_slice_mut().unwrap()[k] = orig - eps;
                let fm = mtn_loss(&probe);
                let tensors = probe.tensors_mut();
                let (_, t, _) = tensors.into_iter().find(|(n, _, _)| n == name).unwrap();
                t.as_slice_mut().unwrap()[k] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[k];
                let denom = 1.0f64.max(numeric.abs());
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "mtn {name}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
