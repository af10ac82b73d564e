//! The baseline self-training UDA engine: supervised source loss, teacher
//! pseudo-labeling with confidence-based quality weights, the mixed-sample
//! unsupervised loss, and the student/teacher update step.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, log_softmax, Var};
use crate::error::{Error, Result};
use crate::metrics::{LabelMap, IGNORE};
use crate::mixing::{
    classmix_mask, cutmix_mask, cutmix_pair, mix, mixed_weights, split_classes, MixMask,
};
use crate::models::{clone_head, ema_update, Mtn, MtnConfig, SegNet, SegNetConfig};
use crate::nn::{ParamSet, SgdMomentum};

/// Teacher predictions for one target image.
#[derive(Debug, Clone)]
pub struct PseudoLabelBundle {
    /// Argmax of the teacher probabilities, lowest class index on ties.
    pub hard: LabelMap,
    /// Maximum teacher probability per pixel.
    pub confidence: Array2<f64>,
    /// Fraction of pixels with confidence at least tau.
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    Classmix,
    Cutmix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Complementary,
    Same,
    Random,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SelfTrainConfig {
    /// Outer-loop learning rate for the student.
    pub lr: f64,
    pub momentum: f64,
    /// Pseudo-label confidence threshold for the quality weight.
    pub tau: f64,
    /// Teacher EMA coefficient.
    pub teacher_gamma: f64,
    /// Momentum for normalization running statistics.
    pub stats_momentum: f64,
    pub mix_strategy: MixStrategy,
    pub mix_mode: MixMode,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            lr: 0.01,
            momentum: 0.9,
            tau: 0.968,
            teacher_gamma: 0.99,
            stats_momentum: 0.1,
            mix_strategy: MixStrategy::Classmix,
            mix_mode: MixMode::Complementary,
        }
    }
}

/// Everything the training loop mutates: student, teacher, calibrator
/// networks, iteration counter and the RNG stream.
pub struct TrainState {
    pub student: SegNet,
    pub teacher: SegNet,
    pub mtn: Mtn,
    pub mtn_ema: Mtn,
    pub iteration: u64,
    pub total_iterations: u64,
    pub rng: ChaCha8Rng,
    pub optimizer: SgdMomentum,
}

impl TrainState {
    pub fn new(
        seg_cfg: SegNetConfig,
        mtn_cfg: MtnConfig,
        total_iterations: u64,
        lr: f64,
        momentum: f64,
        seed: u64,
    ) -> Self {
        let student = SegNet::new(seg_cfg, seed.wrapping_add(1));
        let teacher = student.clone();
        let mtn = Mtn::new(mtn_cfg, seed.wrapping_add(2));
        let mtn_ema = mtn.clone();
        TrainState {
            student,
            teacher,
            mtn,
            mtn_ema,
            iteration: 0,
            total_iterations,
            rng: ChaCha8Rng::seed_from_u64(seed),
            optimizer: SgdMomentum::new(lr, momentum),
        }
    }

    /// Draw a batch of indices from the state's RNG stream.
    pub fn sample_indices(&mut self, len: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.rng.random_range(0..len)).collect()
    }
}

/// Scalar loss components emitted by one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub iteration: u64,
    pub loss_supervised: f64,
    pub loss_hard: f64,
    pub loss_soft: f64,
    pub loss_mix: f64,
    pub q_mean: f64,
    pub lambda_soft: f64,
    pub mean_temperature: Option<f64>,
}

// ---------------------------------------------------------------------------
// graph loss helpers (shared with the bi-level engine)
// ---------------------------------------------------------------------------

/// Stack `[3,H,W]` images into an `[N,3,H,W]` batch.
pub fn stack_images(images: &[&Array3<f64>]) -> ArrayD<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (n, img) in images.iter().enumerate() {
        for ((k, i, j), &v) in img.indexed_iter() {
            out[[n, k, i, j]] = v;
        }
    }
    out
}

/// One-hot targets `[N,C,H,W]` (zero rows on ignored pixels) and the count
/// of non-ignored pixels.
pub fn one_hot_targets(labels: &[&LabelMap], classes: usize) -> (ArrayD<f64>, usize) {
    let (h, w) = labels[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[labels.len(), classes, h, w]));
    let mut count = 0usize;
    for (n, l) in labels.iter().enumerate() {
        for (i, j, y) in l.non_ignored() {
            out[[n, y as usize, i, j]] = 1.0;
            count += 1;
        }
    }
    (out, count)
}

/// Per-pixel weights `[N,1,H,W]`; ignored pixels weigh zero.
pub fn weight_batch(weights: &[Array2<f64>], labels: &[&LabelMap]) -> ArrayD<f64> {
    let (h, w) = labels[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[weights.len(), 1, h, w]));
    for (n, (wm, l)) in weights.iter().zip(labels).enumerate() {
        for i in 0..h {
            for j in 0..w {
                if l.0[[i, j]] != IGNORE {
                    out[[n, 0, i, j]] = wm[[i, j]];
                }
            }
        }
    }
    out
}

/// Cross-entropy against one-hot targets with optional per-pixel weights,
/// averaged over `denom` pixels.
pub fn weighted_hard_ce(logits: &Var, one_hot: &ArrayD<f64>, weights: Option<&ArrayD<f64>>, denom: usize) -> Var {
    let lp = log_softmax(logits, 1);
    let per_pixel = lp.mul(&Var::constant(one_hot.clone())).sum_axis_keep(1).neg();
    let weighted = match weights {
        Some(w) => per_pixel.mul(&Var::constant(w.clone())),
        None => per_pixel,
    };
    weighted.sum_all().mul_scalar(1.0 / denom as f64)
}

/// Cross-entropy against per-pixel soft target distributions (a graph node,
/// so targets may carry gradient), with optional weights.
pub fn weighted_soft_ce(logits: &Var, targets: &Var, weights: Option<&ArrayD<f64>>, denom: usize) -> Var {
    let lp = log_softmax(logits, 1);
    let per_pixel = lp.mul(targets).sum_axis_keep(1).neg();
    let weighted = match weights {
        Some(w) => per_pixel.mul(&Var::constant(w.clone())),
        None => per_pixel,
    };
    weighted.sum_all().mul_scalar(1.0 / denom as f64)
}

pub(crate) fn ensure_finite(value: f64, component: &str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::TrainingFault { component: component.to_string(), iteration })
    }
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Mean cross-entropy of the student on labeled source images (evaluation
/// convenience; training steps build the same loss inside their graphs).
pub fn supervised_loss(student: &SegNet, images: &[&Array3<f64>], labels: &[&LabelMap]) -> Result<f64> {
    let (one_hot, count) = one_hot_targets(labels, student.cfg.classes);
    if count == 0 {
        return Err(Error::EmptySample("no labeled pixels in batch".into()));
    }
    let logits = Var::constant(student.logits(&stack_images(images)));
    Ok(weighted_hard_ce(&logits, &one_hot, None, count).item())
}

/// Teacher forward without gradient tracking; hard labels, confidences and
/// the quality weight `q = |{conf >= tau}| / |pixels|` per image.
pub fn make_pseudo_labels(
    teacher: &SegNet,
    target_images: &[&Array3<f64>],
    tau: f64,
) -> Vec<PseudoLabelBundle> {
    assert!(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
    let logits = teacher.logits(&stack_images(target_images));
    let s = logits.shape();
    let (classes, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(target_images.len());
    for n in 0..target_images.len() {
        let mut hard = Array2::from_elem((h, w), 0u8);
        let mut conf = Array2::zeros((h, w));
        let mut above = 0usize;
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                let mut best_z = logits[[n, 0, i, j]];
                for c in 1..classes {
                    if logits[[n, c, i, j]] > best_z {
                        best_z = logits[[n, c, i, j]];
                        best = c;
                    }
                }
                // softmax of the winning class only
                let mut denom = 0.0;
                for c in 0..classes {
                    denom += (logits[[n, c, i, j]] - best_z).exp();
                }
                let p = 1.0 / denom;
                hard[[i, j]] = best as u8;
                conf[[i, j]] = p;
                if p >= tau {
                    above += 1;
                }
            }
        }
        out.push(PseudoLabelBundle {
            hard: LabelMap(hard),
            confidence: conf,
            quality: above as f64 / (h * w) as f64,
        });
    }
    out
}

/// `q * mean_ce(student(x), hard)` (evaluation convenience).
pub fn unsupervised_hard_loss(
    student: &SegNet,
    images: &[&Array3<f64>],
    bundles: &[PseudoLabelBundle],
) -> Result<f64> {
    let labels: Vec<&LabelMap> = bundles.iter().map(|b| &b.hard).collect();
    let (one_hot, count) = one_hot_targets(&labels, student.cfg.classes);
    if count == 0 {
        return Ok(0.0);
    }
    let (h, w) = labels[0].shape();
    let weights: Vec<Array2<f64>> =
        bundles.iter().map(|b| Array2::from_elem((h, w), b.quality)).collect();
    let wb = weight_batch(&weights, &labels);
    let logits = Var::constant(student.logits(&stack_images(images)));
    Ok(weighted_hard_ce(&logits, &one_hot, Some(&wb), count).item())
}

/// Outer mixing mask for one source label map (plus the inner mask used by
/// the bi-level engine).
pub fn make_mask_pair(
    labels: &LabelMap,
    strategy: MixStrategy,
    mode: MixMode,
    rng: &mut ChaCha8Rng,
) -> Result<(MixMask, MixMask)> {
    let (h, w) = labels.shape();
    match strategy {
        MixStrategy::Classmix => {
            let split = split_classes(labels, rng)?;
            let outer = classmix_mask(labels, &split.outer_classes);
            let inner = match mode {
                MixMode::Complementary => {
                    if split.needs_rect_fallback() {
                        cutmix_mask(h, w, rng)
                    } else {
                        classmix_mask(labels, &split.inner_classes)
                    }
                }
                MixMode::Same => outer.clone(),
                MixMode::Random => {
                    let other = split_classes(labels, rng)?;
                    classmix_mask(labels, &other.outer_classes)
                }
            };
            Ok((outer, inner))
        }
        MixStrategy::Cutmix => match mode {
            MixMode::Complementary => Ok(cutmix_pair(h, w, rng)),
            MixMode::Same => {
                let m = cutmix_mask(h, w, rng);
                Ok((m.clone(), m))
            }
            MixMode::Random => Ok((cutmix_mask(h, w, rng), cutmix_mask(h, w, rng))),
        },
    }
}

/// A mixed composite over one source/target batch pair.
pub struct MixedBatch {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<LabelMap>,
    pub weights: Vec<Array2<f64>>,
}

pub fn build_mixed_batch(
    source_images: &[&Array3<f64>],
    source_labels: &[&LabelMap],
    target_images: &[&Array3<f64>],
    bundles: &[PseudoLabelBundle],
    masks: &[MixMask],
) -> Result<MixedBatch> {
    let mut out = MixedBatch { images: Vec::new(), labels: Vec::new(), weights: Vec::new() };
    for i in 0..source_images.len() {
        let (img, lab) = mix(
            source_images[i],
            target_images[i],
            source_labels[i],
            &bundles[i].hard,
            &masks[i],
        )?;
        out.weights.push(mixed_weights(&masks[i], bundles[i].quality));
        out.images.push(img);
        out.labels.push(lab);
    }
    Ok(out)
}

/// One self-training update: supervised source loss plus the quality-weighted
/// hard loss on the outer-mixed composite, SGD step on the student, then the
/// teacher EMA update.
pub fn baseline_step(
    state: &mut TrainState,
    source_images: &[&Array3<f64>],
    source_labels: &[&LabelMap],
    target_images: &[&Array3<f64>],
    cfg: &SelfTrainConfig,
) -> Result<StepDiagnostics> {
    let it = state.iteration;
    let classes = state.student.cfg.classes;

    let bundles = make_pseudo_labels(&state.teacher, target_images, cfg.tau);
    let mut masks = Vec::with_capacity(source_labels.len());
    for l in source_labels {
        let (outer, _) = make_mask_pair(l, cfg.mix_strategy, cfg.mix_mode, &mut state.rng)?;
        masks.push(outer);
    }
    let mixed = build_mixed_batch(source_images, source_labels, target_images, &bundles, &masks)?;

    let vars = state.student.vars(true);
    let mut moments = Vec::new();

    let (src_onehot, src_count) = one_hot_targets(source_labels, classes);
    if src_count == 0 {
        return Err(Error::EmptySample("no labeled source pixels".into()));
    }
    let src_logits = vars.forward(&Var::constant(stack_images(source_images)), Some(&mut moments));
    let loss_s = weighted_hard_ce(&src_logits, &src_onehot, None, src_count);

    let mixed_refs: Vec<&LabelMap> = mixed.labels.iter().collect();
    let (mix_onehot, mix_count) = one_hot_targets(&mixed_refs, classes);
    let mix_weights = weight_batch(&mixed.weights, &mixed_refs);
    let mix_imgs: Vec<&Array3<f64>> = mixed.images.iter().collect();
    let mix_logits = vars.forward(&Var::constant(stack_images(&mix_imgs)), None);
    let loss_u = weighted_hard_ce(&mix_logits, &mix_onehot, Some(&mix_weights), mix_count.max(1));

    let total = loss_s.add(&loss_u);
    let l_s = ensure_finite(loss_s.item(), "supervised_loss", it)?;
    let l_u = ensure_finite(loss_u.item(), "unsupervised_hard_loss", it)?;

    apply_student_update(state, &vars, &total, cfg.lr, it)?;
    state.student.update_stats(&moments, cfg.stats_momentum);
    ema_update(&mut state.teacher, &state.student, cfg.teacher_gamma)?;
    state.iteration += 1;

    Ok(StepDiagnostics {
        iteration: it,
        loss_supervised: l_s,
        loss_hard: l_u,
        loss_soft: 0.0,
        loss_mix: 0.0,
        q_mean: bundles.iter().map(|b| b.quality).sum::<f64>() / bundles.len() as f64,
        lambda_soft: 0.0,
        mean_temperature: None,
    })
}

/// Source-only update (the no-adaptation reference): supervised loss alone,
/// teacher still tracks the student by EMA.
pub fn source_only_step(
    state: &mut TrainState,
    source_images: &[&Array3<f64>],
    source_labels: &[&LabelMap],
    cfg: &SelfTrainConfig,
) -> Result<StepDiagnostics> {
    let it = state.iteration;
    let classes = state.student.cfg.classes;
    let (src_onehot, src_count) = one_hot_targets(source_labels, classes);
    if src_count == 0 {
        return Err(Error::EmptySample("no labeled source pixels".into()));
    }
    let vars = state.student.vars(true);
    let mut moments = Vec::new();
    let logits = vars.forward(&Var::constant(stack_images(source_images)), Some(&mut moments));
    let loss = weighted_hard_ce(&logits, &src_onehot, None, src_count);
    let l_s = ensure_finite(loss.item(), "supervised_loss", it)?;

    apply_student_update(state, &vars, &loss, cfg.lr, it)?;
    state.student.update_stats(&moments, cfg.stats_momentum);
    ema_update(&mut state.teacher, &state.student, cfg.teacher_gamma)?;
    state.iteration += 1;

    Ok(StepDiagnostics {
        iteration: it,
        loss_supervised: l_s,
        loss_hard: 0.0,
        loss_soft: 0.0,
        loss_mix: 0.0,
        q_mean: 0.0,
        lambda_soft: 0.0,
        mean_temperature: None,
    })
}

/// Backward through `loss`, SGD step over the student's trainable tensors.
pub(crate) fn apply_student_update(
    state: &mut TrainState,
    vars: &crate::models::SegNetVars,
    loss: &Var,
    lr: f64,
    iteration: u64,
) -> Result<()> {
    let leaves: Vec<&Var> = seg_leaves(vars);
    let grads = grad(loss, &leaves);
    let mut grad_arrays = Vec::with_capacity(grads.len());
    for g in &grads {
        if g.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingFault { component: "student_gradient".into(), iteration });
        }
        grad_arrays.push(g.value().clone());
    }
    state.optimizer.lr = lr;
    let mut tensors = state.student.tensors_mut();
    let mut params: Vec<&mut ArrayD<f64>> = tensors
        .iter_mut()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(_, t, _)| &mut **t)
        .collect();
    debug_assert_eq!(params.len(), grad_arrays.len());
    state.optimizer.step(&mut params, &grad_arrays);
    Ok(())
}

/// Trainable leaves of a student graph, in the same order as the trainable
/// tensors reported by `SegNet::tensors`.
pub(crate) fn seg_leaves(vars: &crate::models::SegNetVars) -> Vec<&Var> {
    let mut leaves = Vec::new();
    for b in &vars.blocks {
        leaves.push(&b.conv.weight);
        leaves.push(&b.conv.bias);
        leaves.push(&b.norm.gamma);
        leaves.push(&b.norm.beta);
    }
    leaves.push(&vars.head.weight);
    leaves.push(&vars.head.bias);
    leaves
}

/// Head clone kept alongside its originating network (used by the inner
/// optimization).
pub fn temporary_head(state: &TrainState) -> crate::nn::Conv2d {
    clone_head(&state.student)
}
