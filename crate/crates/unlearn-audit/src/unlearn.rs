//! Unlearning methods behind one interface: the exact retraining oracle and
//! four representative approximate methods (fine-tuning, gradient ascent,
//! Fisher dampening, saliency-masked relabeling).
//!
//! Approximate steps are full-batch gradient steps; `steps` counts exactly
//! the number of parameter updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitMask};
use crate::error::{Error, Result};
use crate::model::{
    init_model, train, train_dp, DpConfig, Gradients, ModelState, PrivacySpend, TrainConfig,
};

/// Which unlearning method to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    Retrain,
    Finetune,
    GradAscent,
    FisherDampen,
    Saliency,
}

impl std::fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            UnlearnMethod::Retrain => "retrain",
            UnlearnMethod::Finetune => "finetune",
            UnlearnMethod::GradAscent => "grad_ascent",
            UnlearnMethod::FisherDampen => "fisher_dampen",
            UnlearnMethod::Saliency => "saliency",
        };
        f.write_str(name)
    }
}

/// Hyperparameters shared across methods. `alpha` is the Fisher selection
/// threshold, `beta` the dampening factor, `gamma` the saliency fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
}

/// A forget request: the ids to remove.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub forget_ids: Vec<usize>,
}

fn mean_gradient(model: &ModelState, dataset: &Dataset, ids: &[usize]) -> Gradients {
    let mut sum = Gradients::zeros_like(model);
    let mut one = Gradients::zeros_like(model);
    for &id in ids {
        let s = dataset.sample(id).expect("id in range");
        crate::model::per_sample_gradient(model, &s.features, s.label, &mut one);
        sum.add_scaled(&one, 1.0 / ids.len() as f64);
    }
    sum
}

fn step_params(model: &mut ModelState, grads: &Gradients, lr: f64) {
    let mut flat = model.params_flat();
    for (p, g) in flat.iter_mut().zip(grads.flat()) {
        *p -= lr * g;
    }
    model.set_params_flat(&flat).expect("same shape");
}

/// The gold standard: fresh initialization and full training on the retain
/// set only. With the same seed and retain set this equals `train` exactly.
pub fn retrain_exact(
    dataset: &Dataset,
    retain_mask: &SplitMask,
    arch: &[usize],
    config: &TrainConfig,
    dp: Option<&DpConfig>,
) -> Result<(ModelState, Option<PrivacySpend>)> {
    if retain_mask.member_count() == 0 {
        return Err(Error::invalid("retain set is empty"));
    }
    let fresh = init_model(arch, config.seed)?;
    match dp {
        Some(dp_cfg) => {
            let (state, spend) = train_dp(&fresh, dataset, retain_mask, config, dp_cfg)?;
            Ok((state, Some(spend)))
        }
        None => Ok((train(&fresh, dataset, retain_mask, config)?, None)),
    }
}

/// `steps` full-batch SGD steps on the retain set, starting from `model`.
pub fn unlearn_finetune(
    model: &ModelState,
    dataset: &Dataset,
    retain_mask: &SplitMask,
    config: &UnlearnConfig,
) -> Result<ModelState> {
    let retain = retain_mask.members();
    if retain.is_empty() {
        return Err(Error::invalid("retain set is empty"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be > 0"));
    }
    let mut state = model.clone();
    for _ in 0..config.steps {
        let g = mean_gradient(&state, dataset, &retain);
        step_params(&mut state, &g, config.learning_rate);
    }
    Ok(state)
}

/// `steps` gradient-ascent steps on the forget-set loss, then (when a
/// retain mask is supplied) the same number of descent steps on the retain
/// set at the same learning rate.
pub fn unlearn_gradascent(
    model: &ModelState,
    dataset: &Dataset,
    forget_mask: &SplitMask,
    retain_mask: Option<&SplitMask>,
    config: &UnlearnConfig,
) -> Result<ModelState> {
    let forget = forget_mask.members();
    if forget.is_empty() {
        return Err(Error::invalid("forget set is empty"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be > 0"));
    }
    let mut state = model.clone();
    for _ in 0..config.steps {
        let g = mean_gradient(&state, dataset, &forget);
        step_params(&mut state, &g, -config.learning_rate);
    }
    if let Some(retain) = retain_mask {
        if config.steps > 0 {
            state = unlearn_finetune(&state, dataset, retain, config)?;
        }
    }
    Ok(state)
}

/// Diagonal empirical Fisher: squared per-sample gradients averaged over
/// the given ids, flattened to the parameter vector.
fn diagonal_fisher(model: &ModelState, dataset: &Dataset, ids: &[usize]) -> Vec<f64> {
    let mut fisher = vec![0.0; model.param_count()];
    let mut one = Gradients::zeros_like(model);
    for &id in ids {
        let s = dataset.sample(id).expect("id in range");
        crate::model::per_sample_gradient(model, &s.features, s.label, &mut one);
        for (f, g) in fisher.iter_mut().zip(one.flat()) {
            *f += g * g;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    fisher.iter_mut().for_each(|f| *f *= inv);
    fisher
}

/// Dampen parameters that matter more to the forget set than to the full
/// training set: where `F_forget > alpha * F_full`, multiply the parameter
/// by `min(1, beta * F_full / F_forget)`. Parameters never flip sign.
pub fn unlearn_fisher_dampen(
    model: &ModelState,
    dataset: &Dataset,
    forget_mask: &SplitMask,
    retain_mask: &SplitMask,
    config: &UnlearnConfig,
) -> Result<ModelState> {
    let forget = forget_mask.members();
    let mut full = retain_mask.members();
    full.extend(&forget);
    full.sort_unstable();
    full.dedup();
    if forget.is_empty() || full.is_empty() {
        return Err(Error::invalid("forget and full sets must be nonempty"));
    }
    if !(config.alpha > 0.0) {
        return Err(Error::invalid("alpha must be > 0"));
    }
    if !(config.beta > 0.0 && config.beta <= 1.0) {
        return Err(Error::invalid("beta must be in (0, 1]"));
    }
    let f_forget = diagonal_fisher(model, dataset, &forget);
    let f_full = diagonal_fisher(model, dataset, &full);
    let mut flat = model.params_flat();
    for ((p, ff), fd) in flat.iter_mut().zip(&f_forget).zip(&f_full) {
        if *ff > config.alpha * fd {
            let factor = (config.beta * fd / ff).min(1.0);
            *p *= factor;
        }
    }
    let mut out = model.clone();
    out.set_params_flat(&flat)?;
    Ok(out)
}

/// Indices of the `ceil(gamma * P)` parameters with the largest absolute
/// forget-set gradient. Ties break toward the lower parameter index.
pub fn saliency_mask(
    model: &ModelState,
    dataset: &Dataset,
    forget_mask: &SplitMask,
    gamma: f64,
) -> Result<Vec<bool>> {
    let forget = forget_mask.members();
    if forget.is_empty() {
        return Err(Error::invalid("forget set is empty"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid("gamma must be in (0, 1]"));
    }
    let g = mean_gradient(model, dataset, &forget).flat();
    let p = g.len();
    let k = ((gamma * p as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(p);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| {
        f64::total_cmp(&g[b].abs(), &g[a].abs()).then_with(|| a.cmp(&b))
    });
    let mut mask = vec![false; p];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Relabel the forget samples with uniform-random wrong labels (seeded
/// rejection sampling), then fine-tune only the saliency-masked parameters
/// on them. Unmasked parameters are bit-identical before and after.
pub fn unlearn_saliency(
    model: &ModelState,
    dataset: &Dataset,
    forget_mask: &SplitMask,
    config: &UnlearnConfig,
) -> Result<ModelState> {
    let forget = forget_mask.members();
    if forget.is_empty() {
        return Err(Error::invalid("forget set is empty"));
    }
    if dataset.num_classes < 2 {
        return Err(Error::invalid("relabeling needs at least 2 classes"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be > 0"));
    }
    let p_mask = saliency_mask(model, dataset, forget_mask, config.gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let relabeled: Vec<(usize, usize)> = forget
        .iter()
        .map(|&id| {
            let true_label = dataset.sample(id).expect("id in range").label;
            let wrong = loop {
                let cand = rng.gen_range(0..dataset.num_classes);
                if cand != true_label {
                    break cand;
                }
            };
            (id, wrong)
        })
        .collect();
    let mut state = model.clone();
    let mut one = Gradients::zeros_like(&state);
    for _ in 0..config.steps {
        let mut sum = Gradients::zeros_like(&state);
        for &(id, wrong) in &relabeled {
            let s = dataset.sample(id).expect("id in range");
            crate::model::per_sample_gradient(&state, &s.features, wrong, &mut one);
            sum.add_scaled(&one, 1.0 / relabeled.len() as f64);
        }
        let mut flat = state.params_flat();
        for ((p, g), &masked) in flat.iter_mut().zip(sum.flat()).zip(&p_mask) {
            if masked {
                *p -= config.learning_rate * g;
            }
        }
        state.set_params_flat(&flat)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, random_half_split};

    fn setup() -> (Dataset, SplitMask, ModelState, TrainConfig) {
        let data = generate_synthetic(16, 2, 4, 0.8, 21).unwrap();
        let mask = random_half_split(data.len(), 5).unwrap();
        let cfg = TrainConfig { learning_rate: 0.3, epochs: 20, batch_size: 4, weight_decay: 0.0, seed: 3 };
        let model = init_model(&[4, 6, 2], 1).unwrap();
        let trained = train(&model, &data, &mask, &cfg).unwrap();
        (data, mask, trained, cfg)
    }

    fn ucfg(method: UnlearnMethod) -> UnlearnConfig {
        UnlearnConfig {
            method,
            steps: 10,
            learning_rate: 0.05,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.25,
            seed: 77,
        }
    }

    #[test]
    fn retrain_matches_train_with_same_inputs() {
        let (data, mask, _, cfg) = setup();
        let (a, spend) = retrain_exact(&data, &mask, &[4, 6, 2], &cfg, None).unwrap();
        let fresh = init_model(&[4, 6, 2], cfg.seed).unwrap();
        let b = train(&fresh, &data, &mask, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(spend.is_none());
        let empty = SplitMask::from_bits(vec![false; data.len()]);
        assert!(retrain_exact(&data, &empty, &[4, 6, 2], &cfg, None).is_err());
    }

    #[test]
    fn retrain_on_three_of_four_members() {
        let data = generate_synthetic(8, 2, 4, 0.8, 2).unwrap();
        let mask = SplitMask::from_members(8, [0, 1, 2, 3]);
        let cfg = TrainConfig { learning_rate: 0.2, epochs: 3, batch_size: 1, weight_decay: 0.0, seed: 4 };
        let retain = mask.without(&[2]);
        assert_eq!(retain.member_count(), 3);
        let (m, _) = retrain_exact(&data, &retain, &[4, 2], &cfg, None).unwrap();
        assert!(m.all_finite());
    }

    #[test]
    fn finetune_identity_and_determinism() {
        let (data, mask, model, _) = setup();
        let mut cfg = ucfg(UnlearnMethod::Finetune);
        cfg.steps = 0;
        assert_eq!(unlearn_finetune(&model, &data, &mask, &cfg).unwrap(), model);
        cfg.steps = 5;
        let a = unlearn_finetune(&model, &data, &mask, &cfg).unwrap();
        let b = unlearn_finetune(&model, &data, &mask, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_does_not_increase_retain_loss() {
        let (data, mask, model, _) = setup();
        let mut cfg = ucfg(UnlearnMethod::Finetune);
        cfg.steps = 50;
        cfg.learning_rate = 0.02;
        let tuned = unlearn_finetune(&model, &data, &mask, &cfg).unwrap();
        let before = crate::model::mean_loss(&model, &data, &mask.members()).unwrap();
        let after = crate::model::mean_loss(&tuned, &data, &mask.members()).unwrap();
        assert!(after <= before + 1e-12, "loss rose from {before} to {after}");
    }

    #[test]
    fn gradascent_increases_forget_loss() {
        let (data, mask, model, _) = setup();
        let forget = SplitMask::from_members(data.len(), mask.members().into_iter().take(2));
        let mut cfg = ucfg(UnlearnMethod::GradAscent);
        cfg.steps = 1;
        cfg.learning_rate = 1e-3;
        let out = unlearn_gradascent(&model, &data, &forget, None, &cfg).unwrap();
        let before = crate::model::mean_loss(&model, &data, &forget.members()).unwrap();
        let after = crate::model::mean_loss(&out, &data, &forget.members()).unwrap();
        assert!(after > before, "ascent did not increase loss: {before} -> {after}");
        cfg.steps = 0;
        assert_eq!(unlearn_gradascent(&model, &data, &forget, None, &cfg).unwrap(), model);
        let empty = SplitMask::from_bits(vec![false; data.len()]);
        assert!(unlearn_gradascent(&model, &data, &empty, None, &cfg).is_err());
    }

    #[test]
    fn fisher_dampen_identity_when_nothing_selected() {
        let (data, mask, model, _) = setup();
        let forget = SplitMask::from_members(data.len(), mask.members().into_iter().take(2));
        let retain = mask.without(&forget.members());
        // alpha so large that no parameter passes the selection test.
        let mut cfg = ucfg(UnlearnMethod::FisherDampen);
        cfg.alpha = 1e12;
        let out = unlearn_fisher_dampen(&model, &data, &forget, &retain, &cfg).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn fisher_dampen_never_flips_sign_and_shrinks() {
        let (data, mask, model, _) = setup();
        let forget = SplitMask::from_members(data.len(), mask.members().into_iter().take(2));
        let retain = mask.without(&forget.members());
        let mut cfg = ucfg(UnlearnMethod::FisherDampen);
        cfg.alpha = 0.5;
        cfg.beta = 0.3;
        let out = unlearn_fisher_dampen(&model, &data, &forget, &retain, &cfg).unwrap();
        for (a, b) in model.params_flat().iter().zip(out.params_flat()) {
            assert!(b.abs() <= a.abs() + 1e-15);
            assert!(a.signum() == b.signum() || b == 0.0);
        }
    }

    #[test]
    fn fisher_dampen_halves_coordinate_by_hand() {
        // factor = min(1, beta * F_full / F_forget); with beta = 1 and
        // F_forget = 2 * alpha * F_full at alpha = 1 the factor is 1/2.
        let f_forget: f64 = 2.0;
        let f_full: f64 = 1.0;
        let alpha: f64 = 1.0;
        let beta: f64 = 1.0;
        assert!(f_forget > alpha * f_full);
        let factor: f64 = (beta * f_full / f_forget).min(1.0);
        assert_eq!(factor, 0.5);
    }

    #[test]
    fn saliency_mask_counts_and_tie_order() {
        let (data, mask, model, _) = setup();
        let forget = SplitMask::from_members(data.len(), mask.members().into_iter().take(2));
        let p = model.param_count();
        for gamma in [0.1, 0.25, 0.5, 1.0] {
            let m = saliency_mask(&model, &data, &forget, gamma).unwrap();
            let expect = ((gamma * p as f64) - 1e-9).ceil() as usize;
            assert_eq!(m.iter().filter(|&&b| b).count(), expect.min(p));
        }
    }

    #[test]
    fn saliency_identity_and_masking_contract() {
        let (data, mask, model, _) = setup();
        let forget = SplitMask::from_members(data.len(), mask.members().into_iter().take(2));
        let mut cfg = ucfg(UnlearnMethod::Saliency);
        cfg.steps = 0;
        assert_eq!(unlearn_saliency(&model, &data, &forget, &cfg).unwrap(), model);
        cfg.steps = 8;
        let out = unlearn_saliency(&model, &data, &forget, &cfg).unwrap();
        let p_mask = saliency_mask(&model, &data, &forget, cfg.gamma).unwrap();
        let before = model.params_flat();
        let after = out.params_flat();
        let mut changed = 0;
        for ((b, a), &masked) in before.iter().zip(&after).zip(&p_mask) {
            if !masked {
                assert_eq!(b.to_bits(), a.to_bits(), "unmasked parameter changed");
            } else if a != b {
                changed += 1;
            }
        }
        assert!(changed > 0, "no masked parameter moved");
        assert!(out.all_finite());
    }

    #[test]
    fn methods_preserve_architecture() {
        let (data, mask, model, _) = setup();
        let forget = SplitMask::from_members(data.len(), mask.members().into_iter().take(2));
        let retain = mask.without(&forget.members());
        let cfg = ucfg(UnlearnMethod::Finetune);
        for out in [
            unlearn_finetune(&model, &data, &retain, &cfg).unwrap(),
            unlearn_gradascent(&model, &data, &forget, Some(&retain), &cfg).unwrap(),
            unlearn_fisher_dampen(&model, &data, &forget, &retain, &cfg).unwrap(),
            unlearn_saliency(&model, &data, &forget, &cfg).unwrap(),
        ] {
            assert_eq!(out.arch(), model.arch());
            assert!(out.all_finite());
        }
    }
}
