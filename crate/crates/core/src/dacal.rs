//! The bi-level calibration engine: calibrated soft losses, the one-step
//! inner head update, the second-order meta update of the temperature
//! network, the combined outer loss with warm-up weighting, and the
//! post-hoc / built-in deployment variants.
//!
//! One step runs three stages in order. Step 1 clones the student head and
//! takes one gradient step on soft targets calibrated by the live MTN.
//! Step 2 evaluates the updated head on an inner-mixed composite and pushes
//! the resulting gradient through the inner step into the MTN (the
//! second-order path), then refreshes the MTN's EMA copy. Step 3 updates
//! the student on the source batch plus the outer-mixed composite, with
//! temperatures coming from the EMA copy.

use ndarray::{Array3, ArrayD};

use crate::autodiff::{grad, log_softmax, softmax, Var};
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::models::{clone_head, ema_update, mtn_forward, Mtn, SegNet};
use crate::nn::{Conv2dVars, ParamSet};
use crate::self_training::{
    apply_student_update, build_mixed_batch, ensure_finite, make_mask_pair, make_pseudo_labels,
    one_hot_targets, stack_images, weight_batch, weighted_hard_ce, weighted_soft_ce,
    SelfTrainConfig, StepDiagnostics, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ph,
    Bi,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DacalConfig {
    /// Inner-loop learning rate for the temporary head.
    pub alpha: f64,
    /// Learning rate of the temperature network's meta update.
    pub beta: f64,
    /// Warm-up horizon for the soft-label weight.
    pub warmup_total: u64,
    /// EMA coefficient for the deployed MTN copy.
    pub mtn_ema_gamma: f64,
    pub variant: Variant,
    pub use_mtn_ema: bool,
    pub use_warmup: bool,
    pub base: SelfTrainConfig,
}

impl Default for DacalConfig {
    fn default() -> Self {
        DacalConfig {
            alpha: 0.01,
            beta: 0.01,
            warmup_total: 250,
            mtn_ema_gamma: 0.99,
            variant: Variant::Ph,
            use_mtn_ema: true,
            use_warmup: true,
            base: SelfTrainConfig::default(),
        }
    }
}

impl DacalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.warmup_total < 1 {
            return Err(Error::Config("warm-up horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mtn_ema_gamma) {
            return Err(Error::Config("mtn_ema_gamma must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// `min(1, t / T_warm)`: the soft-label weight ramp.
pub fn warmup_lambda(t: u64, t_warm: u64) -> f64 {
    assert!(t_warm >= 1);
    (t as f64 / t_warm as f64).min(1.0)
}

/// Soft targets `softmax(z / T)` from teacher logits and MTN temperatures.
///
/// The teacher logits are constants; the result is differentiable with
/// respect to the MTN parameters behind `mtn` only. Returns the target
/// distributions and the temperature map.
pub fn calibrated_soft_targets(
    teacher: &SegNet,
    mtn: &crate::models::MtnVars,
    images: &ArrayD<f64>,
    moments: Option<&mut Vec<crate::nn::ChannelMoments>>,
) -> (Var, Var) {
    let logits = Var::constant(teacher.logits(images));
    let temps = mtn_forward(mtn, &Var::constant(images.clone()), &logits, moments);
    let targets = softmax(&logits.div(&temps), 1);
    (targets, temps)
}

/// Mean soft cross-entropy per domain, domains averaged with equal weight.
pub fn calibrated_soft_loss(
    logits_source: &Var,
    logits_target: &Var,
    targets_source: &Var,
    targets_target: &Var,
) -> Var {
    let n_s = logits_source.shape()[0] * logits_source.shape()[2] * logits_source.shape()[3];
    let n_t = logits_target.shape()[0] * logits_target.shape()[2] * logits_target.shape()[3];
    let l_s = weighted_soft_ce(logits_source, targets_source, None, n_s);
    let l_t = weighted_soft_ce(logits_target, targets_target, None, n_t);
    l_s.add(&l_t).mul_scalar(0.5)
}

/// One gradient step on the temporary head, keeping the graph alive so
/// downstream losses can differentiate through it.
pub fn inner_step(head: &Conv2dVars, l_cal: &Var, alpha: f64, iteration: u64) -> Result<Conv2dVars> {
    let gs = grad(l_cal, &[&head.weight, &head.bias]);
    for g in &gs {
        if g.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingFault { component: "inner_step".into(), iteration });
        }
    }
    Ok(Conv2dVars {
        weight: head.weight.sub(&gs[0].mul_scalar(alpha)),
        bias: head.bias.sub(&gs[1].mul_scalar(alpha)),
    })
}

/// Hard cross-entropy of the inner-updated head on the inner-mixed
/// composite, differentiated into the MTN parameters and applied as one
/// plain gradient step. Returns the loss value.
pub fn meta_update_mtn(
    mtn: &mut Mtn,
    mtn_leaves: &[&Var],
    l_mix: &Var,
    beta: f64,
    iteration: u64,
) -> Result<f64> {
    let value = ensure_finite(l_mix.item(), "meta_loss", iteration)?;
    let gs = grad(l_mix, mtn_leaves);
    let mut arrays = Vec::with_capacity(gs.len());
    for g in &gs {
        if g.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingFault { component: "meta_gradient".into(), iteration });
        }
        arrays.push(g.value().clone());
    }
    let mut tensors = mtn.tensors_mut();
    let mut params: Vec<&mut ArrayD<f64>> = tensors
        .iter_mut()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(_, t, _)| &mut **t)
        .collect();
    debug_assert_eq!(params.len(), arrays.len());
    for (p, g) in params.iter_mut().zip(&arrays) {
        p.zip_mut_with(g, |p, &g| *p -= beta * g);
    }
    Ok(value)
}

/// Trainable leaves of an MTN graph, ordered like `Mtn::tensors`.
pub fn mtn_leaves(vars: &crate::models::MtnVars) -> Vec<&Var> {
    let mut leaves = Vec::new();
    for b in &vars.blocks {
        leaves.push(&b.conv.weight);
        leaves.push(&b.conv.bias);
        leaves.push(&b.norm.gamma);
        leaves.push(&b.norm.beta);
    }
    leaves.push(&vars.out.weight);
    leaves.push(&vars.out.bias);
    leaves
}

/// Built-in-variant cross-entropy: logits are multiplied by the temperature
/// and each pixel's loss is divided by it again.
pub fn bi_ce(
    logits: &Var,
    temps: &Var,
    one_hot: &ArrayD<f64>,
    weights: Option<&ArrayD<f64>>,
    denom: usize,
) -> Var {
    let lp = log_softmax(&logits.mul(temps), 1);
    let per_pixel = lp.mul(&Var::constant(one_hot.clone())).sum_axis_keep(1).neg().div(temps);
    let weighted = match weights {
        Some(w) => per_pixel.mul(&Var::constant(w.clone())),
        None => per_pixel,
    };
    weighted.sum_all().mul_scalar(1.0 / denom as f64)
}

/// Post-hoc inference: softmax of student logits divided by MTN
/// temperatures. The argmax is unchanged with respect to the raw student.
pub fn infer_ph(student: &SegNet, mtn: &Mtn, images: &ArrayD<f64>) -> ArrayD<f64> {
    let logits = Var::constant(student.logits(images));
    let temps = mtn_forward(&mtn.vars(false), &Var::constant(images.clone()), &logits, None);
    softmax(&logits.div(&temps), 1).value().clone()
}

/// Raw student probabilities (the built-in variant's inference path, and
/// post-hoc inference with the calibrator omitted).
pub fn infer_raw(student: &SegNet, images: &ArrayD<f64>) -> ArrayD<f64> {
    let logits = Var::constant(student.logits(images));
    softmax(&logits, 1).value().clone()
}

fn bundles_quality_mean(bundles: &[crate::self_training::PseudoLabelBundle]) -> f64 {
    bundles.iter().map(|b| b.quality).sum::<f64>() / bundles.len() as f64
}

/// One full bi-level training step (Steps 1-3 plus teacher EMA).
pub fn dacal_step(
    state: &mut TrainState,
    source_images: &[&Array3<f64>],
    source_labels: &[&LabelMap],
    target_images: &[&Array3<f64>],
    cfg: &DacalConfig,
) -> Result<StepDiagnostics> {
    cfg.validate()?;
    let it = state.iteration;
    let classes = state.student.cfg.classes;
    let batch = source_images.len();

    // ---- Step 1: inner optimization on calibrated soft pseudo-labels
    let bundles = make_pseudo_labels(&state.teacher, target_images, cfg.base.tau);

    let all_images: Vec<&Array3<f64>> =
        source_images.iter().chain(target_images.iter()).copied().collect();
    let images_all = stack_images(&all_images);
    let mtn_vars = state.mtn.vars(true);
    let mut mtn_moments = Vec::new();
    let (targets_all, _temps_live) =
        calibrated_soft_targets(&state.teacher, &mtn_vars, &images_all, Some(&mut mtn_moments));

    let features_all = {
        let f = state.student.vars(false).features(&Var::constant(images_all.clone()), None);
        Var::constant(f.value().clone())
    };
    let head = clone_head(&state.student);
    let head_vars = head.vars(true);
    let logits_all = head_vars.forward(&features_all);

    let l_cal = calibrated_soft_loss(
        &logits_all.narrow(0, 0, batch),
        &logits_all.narrow(0, batch, batch),
        &targets_all.narrow(0, 0, batch),
        &targets_all.narrow(0, batch, batch),
    );
    let l_cal_value = ensure_finite(l_cal.item(), "calibrated_soft_loss", it)?;
    let head_updated = inner_step(&head_vars, &l_cal, cfg.alpha, it)?;

    // ---- Step 2: meta update on the inner-mixed composite
    let mut outer_masks = Vec::with_capacity(batch);
    let mut inner_masks = Vec::with_capacity(batch);
    for l in source_labels {
        let (outer, inner) =
            make_mask_pair(l, cfg.base.mix_strategy, cfg.base.mix_mode, &mut state.rng)?;
        outer_masks.push(outer);
        inner_masks.push(inner);
    }
    let inner_mixed =
        build_mixed_batch(source_images, source_labels, target_images, &bundles, &inner_masks)?;
    let l_mix = {
        let refs: Vec<&Array3<f64>> = inner_mixed.images.iter().collect();
        let lrefs: Vec<&LabelMap> = inner_mixed.labels.iter().collect();
        let (one_hot, count) = one_hot_targets(&lrefs, classes);
        let weights = weight_batch(&inner_mixed.weights, &lrefs);
        let feats = {
            let f = state.student.vars(false).features(&Var::constant(stack_images(&refs)), None);
            Var::constant(f.value().clone())
        };
        let logits = head_updated.forward(&feats);
        weighted_hard_ce(&logits, &one_hot, Some(&weights), count.max(1))
    };
    let leaves = mtn_leaves(&mtn_vars);
    let l_mix_value = meta_update_mtn(&mut state.mtn, &leaves, &l_mix, cfg.beta, it)?;
    state.mtn.update_stats(&mtn_moments, cfg.base.stats_momentum);
    let ema_gamma = if cfg.use_mtn_ema { cfg.mtn_ema_gamma } else { 0.0 };
    ema_update(&mut state.mtn_ema, &state.mtn, ema_gamma)?;

    // ---- Step 3: outer optimization of the student
    let lambda = if cfg.use_warmup { warmup_lambda(it, cfg.warmup_total) } else { 1.0 };
    let outer_mixed =
        build_mixed_batch(source_images, source_labels, target_images, &bundles, &outer_masks)?;

    let vars = state.student.vars(true);
    let mut moments = Vec::new();
    let src_batch = stack_images(source_images);
    let src_logits = vars.forward(&Var::constant(src_batch.clone()), Some(&mut moments));
    let (src_onehot, src_count) = one_hot_targets(source_labels, classes);
    if src_count == 0 {
        return Err(Error::EmptySample("no labeled source pixels".into()));
    }

    let om_refs: Vec<&Array3<f64>> = outer_mixed.images.iter().collect();
    let om_lrefs: Vec<&LabelMap> = outer_mixed.labels.iter().collect();
    let om_batch = stack_images(&om_refs);
    let om_logits = vars.forward(&Var::constant(om_batch.clone()), None);
    let (om_onehot, om_count) = one_hot_targets(&om_lrefs, classes);
    let om_weights = weight_batch(&outer_mixed.weights, &om_lrefs);

    let deploy = state.mtn_ema.vars(false);
    let temps_om = mtn_forward(&deploy, &Var::constant(om_batch), &om_logits.detach(), None);
    let mean_temperature = temps_om.value().mean().unwrap_or(f64::NAN);

    let (total, l_s_value, l_hard_value, l_soft_value) = match cfg.variant {
        Variant::Ph => {
            let l_s = weighted_hard_ce(&src_logits, &src_onehot, None, src_count);
            let l_hard =
                weighted_hard_ce(&om_logits, &om_onehot, Some(&om_weights), om_count.max(1));
            // soft targets from the student's own (detached) logits under the
            // deployed calibrator
            let soft_targets = softmax(&om_logits.detach().div(&temps_om), 1);
            let l_soft =
                weighted_soft_ce(&om_logits, &soft_targets, Some(&om_weights), om_count.max(1));
            let total = l_s.add(&l_hard).add(&l_soft.mul_scalar(lambda));
            (total, l_s.item(), l_hard.item(), l_soft.item())
        }
        Variant::Bi => {
            let temps_src =
                mtn_forward(&deploy, &Var::constant(src_batch), &src_logits.detach(), None);
            let l_s = bi_ce(&src_logits, &temps_src, &src_onehot, None, src_count);
            let l_hard =
                bi_ce(&om_logits, &temps_om, &om_onehot, Some(&om_weights), om_count.max(1));
            let total = l_s.add(&l_hard);
            (total, l_s.item(), l_hard.item(), 0.0)
        }
    };
    let l_s_value = ensure_finite(l_s_value, "supervised_loss", it)?;
    let l_hard_value = ensure_finite(l_hard_value, "outer_hard_loss", it)?;
    let l_soft_value = ensure_finite(l_soft_value, "outer_soft_loss", it)?;

    apply_student_update(state, &vars, &total, cfg.base.lr, it)?;
    state.student.update_stats(&moments, cfg.base.stats_momentum);
    ema_update(&mut state.teacher, &state.student, cfg.base.teacher_gamma)?;
    state.iteration += 1;

    let _ = l_cal_value;
    Ok(StepDiagnostics {
        iteration: it,
        loss_supervised: l_s_value,
        loss_hard: l_hard_value,
        loss_soft: l_soft_value,
        loss_mix: l_mix_value,
        q_mean: bundles_quality_mean(&bundles),
        lambda_soft: lambda,
        mean_temperature: Some(mean_temperature),
    })
}
