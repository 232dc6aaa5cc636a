//! Small feed-forward classifier with plain SGD and DP-SGD training, softmax
//! prediction, and the privacy accountant whose epsilon the audit criteria
//! compare against.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SplitMask};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream};

/// Confidence clamp applied before logit transforms. Saturated softmax
/// outputs would otherwise map to infinite logits.
pub const CONFIDENCE_CLAMP_MIN: f64 = 1e-7;
pub const CONFIDENCE_CLAMP_MAX: f64 = 1.0 - 1e-7;

/// One dense layer. Weights are stored input-major: entry `(i, j)` sits at
/// `i * fan_out + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Classifier parameters: rectifier hidden layers, linear output feeding a
/// softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    arch: Vec<usize>,
    layers: Vec<Layer>,
}

/// Plain SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

/// DP-SGD mechanism parameters. Steps are derived from epochs and batch
/// counts at training time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
}

/// The (epsilon, delta) label produced by the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
}

impl ModelState {
    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.arch.last().expect("arch nonempty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters as one flat vector, layer-major, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Inverse of [`params_flat`](Self::params_flat).
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid("parameter vector length mismatch"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    /// Logits for one input (no softmax).
    fn logits(&self, features: &[f64]) -> Vec<f64> {
        let mut a = features.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = layer.biases.clone();
            for i in 0..layer.fan_in {
                let ai = a[i];
                if ai == 0.0 {
                    continue;
                }
                let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (j, w) in row.iter().enumerate() {
                    z[j] += ai * w;
                }
            }
            if idx + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }
}

/// Numerically stable softmax (max subtraction).
fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Deterministic initialization: weights uniform in `(-1, 1)` scaled by
/// `1/sqrt(fan_in)`, biases zero.
pub fn init_model(arch: &[usize], seed: u64) -> Result<ModelState> {
    if arch.len() < 2 {
        return Err(Error::invalid("arch needs at least input and output widths"));
    }
    if arch.iter().any(|&w| w == 0) {
        return Err(Error::invalid("arch widths must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for win in arch.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        layers.push(Layer { fan_in, fan_out, weights, biases: vec![0.0; fan_out] });
    }
    Ok(ModelState { arch: arch.to_vec(), layers })
}

/// Per-layer gradient buffers mirroring [`ModelState`] shapes.
#[derive(Debug, Clone)]
pub(crate) struct Gradients {
    pub(crate) weights: Vec<Vec<f64>>,
    pub(crate) biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub(crate) fn zeros_like(model: &ModelState) -> Self {
        Gradients {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub(crate) fn reset(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.weights.iter_mut().zip(&other.weights) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        for (dst, src) in self.biases.iter_mut().zip(&other.biases) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub(crate) fn l2_norm(&self) -> f64 {
        let mut sq = 0.0;
        for w in &self.weights {
            sq += w.iter().map(|v| v * v).sum::<f64>();
        }
        for b in &self.biases {
            sq += b.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub(crate) fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Analytic cross-entropy gradient for a single sample, written into `out`.
pub(crate) fn per_sample_gradient(
    model: &ModelState,
    features: &[f64],
    label: usize,
    out: &mut Gradients,
) {
    out.reset();
    // Forward pass caching post-activation values. acts[0] is the input.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(features.to_vec());
    for (idx, layer) in model.layers.iter().enumerate() {
        let prev = &acts[idx];
        let mut z = layer.biases.clone();
        for i in 0..layer.fan_in {
            let ai = prev[i];
            if ai == 0.0 {
                continue;
            }
            let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
            for (j, w) in row.iter().enumerate() {
                z[j] += ai * w;
            }
        }
        if idx + 1 < model.layers.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    // delta at the output: softmax(z) - onehot(label)
    let mut delta = softmax(acts.last().expect("output activations"));
    delta[label] -= 1.0;
    for idx in (0..model.layers.len()).rev() {
        let layer = &model.layers[idx];
        let prev = &acts[idx];
        let gw = &mut out.weights[idx];
        for i in 0..layer.fan_in {
            let ai = prev[i];
            if ai != 0.0 {
                let row = &mut gw[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (j, d) in delta.iter().enumerate() {
                    row[j] += ai * d;
                }
            }
        }
        out.biases[idx].copy_from_slice(&delta);
        if idx > 0 {
            let mut next = vec![0.0; layer.fan_in];
            for (i, slot) in next.iter_mut().enumerate() {
                // Rectifier gate: gradient flows only where the activation
                // was positive.
                if prev[i] > 0.0 {
                    let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                    *slot = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                }
            }
            delta = next;
        }
    }
}

fn apply_update(model: &mut ModelState, grads: &Gradients, lr: f64, weight_decay: f64) {
    for (layer, (gw, gb)) in model.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
        for (w, g) in layer.weights.iter_mut().zip(gw) {
            *w -= lr * (g + weight_decay * *w);
        }
        for (b, g) in layer.biases.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
}

fn validate_train_inputs(
    model: &ModelState,
    dataset: &Dataset,
    mask: &SplitMask,
    config: &TrainConfig,
) -> Result<Vec<usize>> {
    if model.input_dim() != dataset.feature_dim {
        return Err(Error::invalid("model input width does not match dataset feature_dim"));
    }
    if model.num_classes() != dataset.num_classes {
        return Err(Error::invalid("model output width does not match num_classes"));
    }
    if mask.len() != dataset.len() {
        return Err(Error::invalid("mask length does not match dataset size"));
    }
    let members = mask.members();
    if members.is_empty() {
        return Err(Error::invalid("training mask has no members"));
    }
    if config.batch_size == 0 || config.batch_size > members.len() {
        return Err(Error::invalid(format!(
            "batch_size must be in [1, {}], got {}",
            members.len(),
            config.batch_size
        )));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be > 0"));
    }
    if config.weight_decay < 0.0 {
        return Err(Error::invalid("weight_decay must be >= 0"));
    }
    Ok(members)
}

/// Mini-batch SGD on the cross-entropy loss over mask members. Returns a new
/// state; the input model is untouched. Deterministic in `config.seed`.
pub fn train(
    model: &ModelState,
    dataset: &Dataset,
    mask: &SplitMask,
    config: &TrainConfig,
) -> Result<ModelState> {
    let members = validate_train_inputs(model, dataset, mask, config)?;
    let mut state = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batch_grads = Gradients::zeros_like(&state);
    let mut sample_grad = Gradients::zeros_like(&state);
    let mut order = members;
    for _ in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for batch in order.chunks(config.batch_size) {
            batch_grads.reset();
            for &id in batch {
                let s = dataset.sample(id).expect("member id in range");
                per_sample_gradient(&state, &s.features, s.label, &mut sample_grad);
                batch_grads.add_scaled(&sample_grad, 1.0 / batch.len() as f64);
            }
            apply_update(&mut state, &batch_grads, config.learning_rate, config.weight_decay);
        }
    }
    Ok(state)
}

/// Rescale `v` so its L2 norm is at most `max_norm`. Norms already within
/// the bound pass through unchanged.
pub fn clip_to_l2_norm(v: &mut [f64], max_norm: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// DP-SGD: per-sample gradients clipped to `clip_norm`, summed, Gaussian
/// noise of std `sigma * clip_norm` added per coordinate (layer-major,
/// coordinate-major draw order from a dedicated stream), then divided by the
/// batch size. The returned spend is `account_epsilon` over the executed
/// step count.
pub fn train_dp(
    model: &ModelState,
    dataset: &Dataset,
    mask: &SplitMask,
    config: &TrainConfig,
    dp: &DpConfig,
) -> Result<(ModelState, PrivacySpend)> {
    if !(dp.clip_norm > 0.0) {
        return Err(Error::invalid("clip_norm must be > 0"));
    }
    if !(dp.noise_multiplier > 0.0) {
        return Err(Error::invalid("noise_multiplier must be > 0"));
    }
    if !(dp.delta > 0.0 && dp.delta < 1.0) {
        return Err(Error::invalid("delta must be in (0, 1)"));
    }
    if dp.delta >= 1.0 / dataset.len() as f64 {
        return Err(Error::invalid("delta must be < 1/|dataset|"));
    }
    let members = validate_train_inputs(model, dataset, mask, config)?;
    let mut state = model.clone();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::DP_NOISE, 0));
    let noise_std = dp.noise_multiplier * dp.clip_norm;
    let mut sum_grads = Gradients::zeros_like(&state);
    let mut sample_grad = Gradients::zeros_like(&state);
    let mut order = members;
    let mut steps: usize = 0;
    for _ in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            sum_grads.reset();
            for &id in batch {
                let s = dataset.sample(id).expect("member id in range");
                per_sample_gradient(&state, &s.features, s.label, &mut sample_grad);
                let norm = sample_grad.l2_norm();
                if norm > dp.clip_norm {
                    sample_grad.scale(dp.clip_norm / norm);
                }
                sum_grads.add_scaled(&sample_grad, 1.0);
            }
            let inv = 1.0 / batch.len() as f64;
            for (gw, gb) in sum_grads.weights.iter_mut().zip(&mut sum_grads.biases) {
                for g in gw.iter_mut() {
                    *g = (*g + noise_std * noise_rng.sample::<f64, _>(StandardNormal)) * inv;
                }
                for g in gb.iter_mut() {
                    *g = (*g + noise_std * noise_rng.sample::<f64, _>(StandardNormal)) * inv;
                }
            }
            apply_update(&mut state, &sum_grads, config.learning_rate, config.weight_decay);
            steps += 1;
        }
    }
    let epsilon = account_epsilon(dp.noise_multiplier, steps, dp.delta)?;
    Ok((state, PrivacySpend { epsilon, delta: dp.delta }))
}

/// Conservative Renyi-composition bound for `steps` Gaussian-mechanism
/// invocations (no subsampling amplification):
///
/// `epsilon = min over alpha > 1 of steps*alpha/(2 sigma^2) + ln(1/delta)/(alpha-1)`
///
/// which has the closed form `steps/(2 sigma^2) + sqrt(2 steps ln(1/delta))/sigma`.
pub fn account_epsilon(sigma: f64, steps: usize, delta: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be > 0"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta must be in (0, 1)"));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    let t = steps as f64;
    let ln_inv_delta = (1.0 / delta).ln();
    Ok(t / (2.0 * sigma * sigma) + (2.0 * t * ln_inv_delta).sqrt() / sigma)
}

/// Softmax confidence vector for one sample.
pub fn predict_proba(model: &ModelState, sample: &Sample) -> Result<Vec<f64>> {
    if sample.features.len() != model.input_dim() {
        return Err(Error::invalid(format!(
            "sample has {} features, model expects {}",
            sample.features.len(),
            model.input_dim()
        )));
    }
    Ok(softmax(&model.logits(&sample.features)))
}

/// Confidence of the true label, clamped away from 0 and 1 so the logit
/// transform stays finite.
pub fn confidence_of_true_label(model: &ModelState, sample: &Sample) -> Result<f64> {
    let probs = predict_proba(model, sample)?;
    let p = probs.get(sample.label).copied().ok_or_else(|| {
        Error::invalid(format!("label {} out of range for {}-class model", sample.label, probs.len()))
    })?;
    Ok(p.clamp(CONFIDENCE_CLAMP_MIN, CONFIDENCE_CLAMP_MAX))
}

/// Mean cross-entropy loss over the given sample ids.
pub fn mean_loss(model: &ModelState, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("mean_loss requires at least one sample"));
    }
    let mut total = 0.0;
    for &id in ids {
        let s = dataset
            .sample(id)
            .ok_or_else(|| Error::invalid(format!("sample id {id} out of range")))?;
        let logits = model.logits(&s.features);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - logits[s.label];
    }
    Ok(total / ids.len() as f64)
}

/// Fraction of the given ids the model classifies correctly.
pub fn accuracy(model: &ModelState, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("accuracy requires at least one sample"));
    }
    let mut correct = 0usize;
    for &id in ids {
        let s = dataset
            .sample(id)
            .ok_or_else(|| Error::invalid(format!("sample id {id} out of range")))?;
        let probs = predict_proba(model, s)?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("nonempty probabilities");
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// Self-describing on-disk form: architecture, 64-bit parameters, training
/// seed, and the privacy spend when trained with DP-SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub state: ModelState,
    pub train_seed: u64,
    pub spend: Option<PrivacySpend>,
}

pub fn save_model(saved: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string(saved)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use approx::assert_relative_eq;

    fn tiny_dataset() -> Dataset {
        generate_synthetic(8, 2, 3, 0.5, 42).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_forced_shapes() {
        let a = init_model(&[2, 3], 5).unwrap();
        let b = init_model(&[2, 3], 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weights.len(), 6);
        assert_eq!(a.layers()[0].biases, vec![0.0; 3]);
        let c = init_model(&[2, 3], 6).unwrap();
        assert_ne!(a, c);
        assert!(init_model(&[4], 0).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = tiny_dataset();
        let mask = crate::data::random_half_split(data.len(), 1).unwrap();
        let model = init_model(&[3, 4, 2], 0).unwrap();
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 0, batch_size: 2, weight_decay: 0.0, seed: 9 };
        let out = train(&model, &data, &mask, &cfg).unwrap();
        assert_eq!(model, out);
    }

    #[test]
    fn empty_member_set_is_an_error() {
        let data = tiny_dataset();
        let mask = SplitMask::from_bits(vec![false; data.len()]);
        let model = init_model(&[3, 2], 0).unwrap();
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 1, batch_size: 1, weight_decay: 0.0, seed: 9 };
        assert!(train(&model, &data, &mask, &cfg).is_err());
    }

    #[test]
    fn single_sample_single_step_matches_hand_gradient() {
        // One linear layer, one sample, one full-batch step: the update is
        // lr * (softmax(Wx+b) - onehot) outer x, computable by hand.
        let sample = Sample { id: 0, features: vec![1.0, -2.0], label: 1 };
        let data = Dataset::new(
            vec![sample.clone(), Sample { id: 1, features: vec![0.0, 1.0], label: 0 }],
            2,
            crate::data::Layout::Flat,
        )
        .unwrap();
        let mask = SplitMask::from_members(2, [0]);
        let model = init_model(&[2, 2], 3).unwrap();
        let lr = 0.25;
        let cfg = TrainConfig { learning_rate: lr, epochs: 1, batch_size: 1, weight_decay: 0.0, seed: 0 };
        let out = train(&model, &data, &mask, &cfg).unwrap();

        let probs = predict_proba(&model, &sample).unwrap();
        let delta = [probs[0], probs[1] - 1.0];
        let w = &model.layers()[0].weights;
        let expect = [
            w[0] - lr * sample.features[0] * delta[0],
            w[1] - lr * sample.features[0] * delta[1],
            w[2] - lr * sample.features[1] * delta[0],
            w[3] - lr * sample.features[1] * delta[1],
        ];
        for (got, want) in out.layers()[0].weights.iter().zip(expect) {
            assert_relative_eq!(got, &want, max_relative = 1e-12);
        }
        for (got, want) in out.layers()[0].biases.iter().zip(delta) {
            assert_relative_eq!(*got, -lr * want, max_relative = 1e-12);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        // Central differences on random tiny nets, 1e-5 relative tolerance.
        let data = tiny_dataset();
        for trial in 0..20u64 {
            let model = init_model(&[3, 5, 2], trial).unwrap();
            let s = data.sample((trial % 8) as usize).unwrap();
            let mut grads = Gradients::zeros_like(&model);
            per_sample_gradient(&model, &s.features, s.label, &mut grads);
            let analytic = grads.flat();
            let params = model.params_flat();
            let eps = 1e-6;
            for k in (0..params.len()).step_by(3) {
                let mut plus = model.clone();
                let mut p = params.clone();
                p[k] += eps;
                plus.set_params_flat(&p).unwrap();
                let mut minus = model.clone();
                p[k] -= 2.0 * eps;
                minus.set_params_flat(&p).unwrap();
                let numeric = (mean_loss(&plus, &data, &[s.id]).unwrap()
                    - mean_loss(&minus, &data, &[s.id]).unwrap())
                    / (2.0 * eps);
                let denom = numeric.abs().max(analytic[k].abs()).max(1e-8);
                assert!(
                    (numeric - analytic[k]).abs() / denom < 1e-5,
                    "param {k}: numeric {numeric} vs analytic {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset();
        let mask = crate::data::random_half_split(data.len(), 2).unwrap();
        let model = init_model(&[3, 4, 2], 1).unwrap();
        let cfg = TrainConfig { learning_rate: 0.2, epochs: 5, batch_size: 2, weight_decay: 1e-4, seed: 7 };
        let a = train(&model, &data, &mask, &cfg).unwrap();
        let b = train(&model, &data, &mask, &cfg).unwrap();
        assert_eq!(a, b);
        let dp = DpConfig { clip_norm: 1.0, noise_multiplier: 2.0, delta: 1e-5 };
        let (da, sa) = train_dp(&model, &data, &mask, &cfg, &dp).unwrap();
        let (db, sb) = train_dp(&model, &data, &mask, &cfg, &dp).unwrap();
        assert_eq!(da, db);
        assert_eq!(sa, sb);
    }

    #[test]
    fn clipping_rescales_to_exactly_the_bound() {
        let mut v = vec![6.0, 8.0];
        clip_to_l2_norm(&mut v, 1.0);
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert_relative_eq!(norm, 1.0, max_relative = 1e-12);
        let mut small = vec![0.3, 0.4];
        clip_to_l2_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn dp_spend_matches_accountant_exactly() {
        let data = tiny_dataset();
        let mask = crate::data::random_half_split(data.len(), 3).unwrap();
        let model = init_model(&[3, 2], 1).unwrap();
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 3, batch_size: 2, weight_decay: 0.0, seed: 5 };
        let dp = DpConfig { clip_norm: 1.0, noise_multiplier: 1.5, delta: 1e-3 };
        let (_, spend) = train_dp(&model, &data, &mask, &cfg, &dp).unwrap();
        let steps = 3 * 2; // 4 members, batch 2 -> 2 batches per epoch
        assert_eq!(spend.epsilon, account_epsilon(1.5, steps, 1e-3).unwrap());
        assert_eq!(spend.delta, 1e-3);
    }

    #[test]
    fn accountant_zero_steps_and_monotonicity() {
        assert_eq!(account_epsilon(1.0, 0, 1e-5).unwrap(), 0.0);
        let mut prev = 0.0;
        for t in [1usize, 2, 5, 10, 100] {
            let e = account_epsilon(1.0, t, 1e-5).unwrap();
            assert!(e > prev);
            prev = e;
        }
        let mut prev = f64::INFINITY;
        for sigma in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let e = account_epsilon(sigma, 10, 1e-5).unwrap();
            assert!(e < prev);
            prev = e;
        }
        assert!(account_epsilon(0.0, 1, 1e-5).is_err());
        assert!(account_epsilon(1.0, 1, 0.0).is_err());
    }

    #[test]
    fn accountant_closed_form_matches_alpha_grid() {
        // Independent oracle: minimize steps*a/(2 sigma^2) + ln(1/delta)/(a-1)
        // over a dense alpha grid.
        for (sigma, steps, delta) in [(1.0, 1, 1e-5), (2.0, 50, 1e-6), (0.7, 10, 1e-4), (5.0, 200, 1e-5)]
        {
            let closed = account_epsilon(sigma, steps, delta).unwrap();
            let t = steps as f64;
            let b = (1.0f64 / delta).ln();
            let mut best = f64::INFINITY;
            let mut alpha = 1.0 + 1e-4;
            while alpha <= 1e4 {
                let eps = t * alpha / (2.0 * sigma * sigma) + b / (alpha - 1.0);
                best = best.min(eps);
                alpha *= 1.0005;
            }
            assert!((closed - best).abs() < 1e-6, "closed {closed} vs grid {best}");
        }
    }

    #[test]
    fn accountant_reference_value() {
        // sigma=1, steps=1, delta=1e-5: 0.5 + sqrt(2 ln 1e5)
        let e = account_epsilon(1.0, 1, 1e-5).unwrap();
        assert!((e - 5.29853).abs() < 1e-5, "epsilon {e}");
    }

    #[test]
    fn uniform_prediction_for_zero_model() {
        let mut model = init_model(&[3, 4], 0).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_params_flat(&zeros).unwrap();
        let s = Sample { id: 0, features: vec![0.3, -0.7, 2.0], label: 2 };
        let probs = predict_proba(&model, &s).unwrap();
        for p in &probs {
            assert_relative_eq!(*p, 0.25, max_relative = 1e-12);
        }
        assert_relative_eq!(confidence_of_true_label(&model, &s).unwrap(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn hand_set_single_layer_softmax() {
        let mut model = init_model(&[2, 2], 0).unwrap();
        // W = [[1, -1], [0, 2]], b = [0.5, 0]
        model.set_params_flat(&[1.0, -1.0, 0.0, 2.0, 0.5, 0.0]).unwrap();
        let s = Sample { id: 0, features: vec![1.0, 1.0], label: 0 };
        // logits = [1*1 + 0*1 + 0.5, -1*1 + 2*1 + 0] = [1.5, 1.0]
        let probs = predict_proba(&model, &s).unwrap();
        let e0 = (1.5f64).exp();
        let e1 = (1.0f64).exp();
        assert_relative_eq!(probs[0], e0 / (e0 + e1), max_relative = 1e-12);
        assert_relative_eq!(probs[1], e1 / (e0 + e1), max_relative = 1e-12);
        assert_relative_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = init_model(&[3, 2], 0).unwrap();
        let s = Sample { id: 0, features: vec![1.0, 2.0], label: 0 };
        assert!(predict_proba(&model, &s).is_err());
    }

    #[test]
    fn huge_noise_drowns_training_to_chance() {
        // sigma = 1e6 makes the update pure noise; accuracy lands near 1/c.
        let data = generate_synthetic(128, 2, 8, 1.0, 5).unwrap();
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3] {
            let mask = crate::data::random_half_split(data.len(), seed).unwrap();
            let model = init_model(&[8, 8, 2], seed).unwrap();
            let cfg = TrainConfig {
                learning_rate: 1e-9,
                epochs: 2,
                batch_size: 16,
                weight_decay: 0.0,
                seed,
            };
            let dp = DpConfig { clip_norm: 1.0, noise_multiplier: 1e6, delta: 1e-5 };
            let (trained, _) = train_dp(&model, &data, &mask, &cfg, &dp).unwrap();
            accs.push(accuracy(&trained, &data, &mask.members()).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn model_file_round_trip_is_lossless() {
        let data = tiny_dataset();
        let mask = crate::data::random_half_split(data.len(), 4).unwrap();
        let model = init_model(&[3, 4, 2], 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.3, epochs: 7, batch_size: 2, weight_decay: 1e-3, seed: 13 };
        let trained = train(&model, &data, &mask, &cfg).unwrap();
        let saved = SavedModel { state: trained, train_seed: 13, spend: None };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&saved, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(saved, back);
    }
}
