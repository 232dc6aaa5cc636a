//! The likelihood-ratio attack family: logit transform, Gaussian fitting,
//! the augmentation-based scorer, online/offline baselines, FPR
//! thresholding, and dataset-level metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{augment, AugmentationScheme, Layout, Sample, SplitMask};
use crate::error::{Error, Result};
use crate::model::{confidence_of_true_label, ModelState};

/// Variance floor applied after fitting. Saturated models can produce
/// identical observations whose raw variance is zero.
pub const VAR_FLOOR: f64 = 1e-6;

/// A fitted normal over logit-transformed confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub var: f64,
}

impl GaussianFit {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let d = x - self.mu;
        -0.5 * (2.0 * std::f64::consts::PI * self.var).ln() - d * d / (2.0 * self.var)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }
}

/// Attack score. Likelihood-ratio kinds carry the ratio in log space so
/// extreme fits stay finite; `lambda()` recovers the linear value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiraScore {
    /// Two-sided likelihood ratio (augmentation-based or online).
    Lambda { log_lambda: f64 },
    /// One-sided membership mass in [0, 1] (offline).
    OneSided { mass: f64 },
}

impl LiraScore {
    /// Linear likelihood ratio; may saturate to `inf` for extreme fits.
    pub fn lambda(&self) -> f64 {
        match self {
            LiraScore::Lambda { log_lambda } => log_lambda.exp(),
            LiraScore::OneSided { mass } => *mass,
        }
    }

    /// Monotone score used for thresholding and ranking. Higher means more
    /// member-like for every kind.
    pub fn ranking_value(&self) -> f64 {
        match self {
            LiraScore::Lambda { log_lambda } => *log_lambda,
            LiraScore::OneSided { mass } => *mass,
        }
    }
}

/// Shadow models with their membership masks, borrowed from wherever the
/// caller keeps them.
#[derive(Debug, Clone, Default)]
pub struct ShadowPool<'a> {
    entries: Vec<(&'a ModelState, &'a SplitMask)>,
}

impl<'a> ShadowPool<'a> {
    pub fn new(entries: Vec<(&'a ModelState, &'a SplitMask)>) -> Self {
        ShadowPool { entries }
    }

    pub fn push(&mut self, model: &'a ModelState, mask: &'a SplitMask) {
        self.entries.push((model, mask));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(&'a ModelState, &'a SplitMask)] {
        &self.entries
    }
}

/// `phi(p) = ln(p / (1 - p))` for `p` strictly inside (0, 1).
pub fn logit_transform(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("logit transform requires p in (0,1), got {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Logit of the clamped true-label confidence.
fn phi(model: &ModelState, sample: &Sample) -> Result<f64> {
    logit_transform(confidence_of_true_label(model, sample)?)
}

/// Mean and unbiased sample variance, variance floored at [`VAR_FLOOR`].
pub fn fit_gaussian(obs: &[f64]) -> Result<GaussianFit> {
    if obs.len() < 2 {
        return Err(Error::invalid("fit_gaussian requires at least 2 observations"));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("fit_gaussian requires finite observations"));
    }
    let n = obs.len() as f64;
    let mu = obs.iter().sum::<f64>() / n;
    let var = obs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0);
    Ok(GaussianFit { mu, var: var.max(VAR_FLOOR) })
}

/// Log of `pdf(x | fit_in) / pdf(x | fit_out)`.
pub fn log_likelihood_ratio(x: f64, fit_in: &GaussianFit, fit_out: &GaussianFit) -> f64 {
    fit_in.log_pdf(x) - fit_out.log_pdf(x)
}

/// Augmentation-based likelihood ratio for one (target, sample) pair.
///
/// One augmentation set is drawn and fed through all three models; the in
/// and out fits are evaluated at the maximum of the target's observations.
/// Requires `f_in` trained with the sample as a member and `f_out` trained
/// with the sample excluded.
#[allow(clippy::too_many_arguments)]
pub fn alira_score(
    target: &ModelState,
    f_in: &ModelState,
    f_out: &ModelState,
    sample: &Sample,
    layout: &Layout,
    n_aug: usize,
    scheme: &AugmentationScheme,
    seed: u64,
) -> Result<LiraScore> {
    if n_aug < 2 {
        return Err(Error::invalid("alira_score requires n_aug >= 2"));
    }
    let augs = augment(sample, layout, n_aug, scheme, seed)?;
    let mut obs_in = Vec::with_capacity(n_aug);
    let mut obs_out = Vec::with_capacity(n_aug);
    let mut obs_target = Vec::with_capacity(n_aug);
    for a in &augs {
        obs_in.push(phi(f_in, a)?);
        obs_out.push(phi(f_out, a)?);
        obs_target.push(phi(target, a)?);
    }
    let fit_in = fit_gaussian(&obs_in)?;
    let fit_out = fit_gaussian(&obs_out)?;
    let m = obs_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(LiraScore::Lambda { log_lambda: log_likelihood_ratio(m, &fit_in, &fit_out) })
}

/// Split the pool's phi observations for a sample into member and
/// non-member lists. Observations are sorted so fits do not depend on pool
/// order.
fn split_observations(
    pool: &ShadowPool<'_>,
    sample: &Sample,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut obs_in = Vec::new();
    let mut obs_out = Vec::new();
    for (model, mask) in pool.entries() {
        let v = phi(model, sample)?;
        if mask.is_member(sample.id) {
            obs_in.push(v);
        } else {
            obs_out.push(v);
        }
    }
    obs_in.sort_by(f64::total_cmp);
    obs_out.sort_by(f64::total_cmp);
    Ok((obs_in, obs_out))
}

/// Classic two-sided shadow-pool attack: fit in/out normals from the
/// sample's confidence under member and non-member shadows, evaluate the
/// ratio at the target's own logit (no augmentation).
pub fn online_lira_score(
    target: &ModelState,
    pool: &ShadowPool<'_>,
    sample: &Sample,
) -> Result<LiraScore> {
    let (obs_in, obs_out) = split_observations(pool, sample)?;
    if obs_in.len() < 2 || obs_out.len() < 2 {
        return Err(Error::Coverage {
            message: format!(
                "online attack needs >= 2 member and >= 2 non-member shadows, got {} / {}",
                obs_in.len(),
                obs_out.len()
            ),
            samples: vec![sample.id],
        });
    }
    let fit_in = fit_gaussian(&obs_in)?;
    let fit_out = fit_gaussian(&obs_out)?;
    let x = phi(target, sample)?;
    Ok(LiraScore::Lambda { log_lambda: log_likelihood_ratio(x, &fit_in, &fit_out) })
}

/// One-sided attack: fit only the non-member distribution and score by the
/// lower-tail mass of the target's logit under it. Monotone increasing in
/// the target logit, so higher remains more member-like.
pub fn offline_lira_score(
    target: &ModelState,
    out_pool: &ShadowPool<'_>,
    sample: &Sample,
) -> Result<LiraScore> {
    let (_, obs_out) = split_observations(out_pool, sample)?;
    if obs_out.len() < 2 {
        return Err(Error::Coverage {
            message: format!("offline attack needs >= 2 non-member shadows, got {}", obs_out.len()),
            samples: vec![sample.id],
        });
    }
    let fit_out = fit_gaussian(&obs_out)?;
    let x = phi(target, sample)?;
    let z = (x - fit_out.mu) / fit_out.var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("valid standard normal");
    Ok(LiraScore::OneSided { mass: std_normal.cdf(z) })
}

/// Threshold achieving empirical FPR at most `target_fpr` under the strict
/// `score > tau` rule: the `ceil(target_fpr * N)`-th largest non-member
/// score.
pub fn threshold_at_fpr(nonmember_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if nonmember_scores.is_empty() {
        return Err(Error::invalid("threshold_at_fpr requires non-member scores"));
    }
    if !(target_fpr > 0.0 && target_fpr <= 1.0) {
        return Err(Error::invalid("target_fpr must be in (0, 1]"));
    }
    let n = nonmember_scores.len();
    // Small slack guards against ceil(k) jumping a rank on inexact products
    // like 0.07 * 100.
    let rank = ((target_fpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let rank = rank.min(n);
    let mut sorted = nonmember_scores.to_vec();
    sorted.sort_by(|a, b| f64::total_cmp(b, a));
    Ok(sorted[rank - 1])
}

/// Strict decision rule from the thresholding phase.
pub fn classify(score: f64, tau: f64) -> bool {
    score > tau
}

/// Area under the ROC curve: the probability a member outranks a
/// non-member, ties counted half. Rank-based; exact for ties.
pub fn auc(scores: &[f64], member_labels: &[bool]) -> Result<f64> {
    if scores.len() != member_labels.len() {
        return Err(Error::invalid("scores and labels must have equal length"));
    }
    let n_pos = member_labels.iter().filter(|&&m| m).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc requires both member and non-member scores"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("auc requires finite scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| f64::total_cmp(&scores[a], &scores[b]));
    // Average ranks within tie groups keep the pairwise tie credit exact:
    // ranks are integers or half-integers, which sum exactly in f64.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // 1-based
        for &idx in &order[i..=j] {
            if member_labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// TPR at the threshold calibrated to `fpr` on the non-member scores.
pub fn tpr_at_fpr(scores: &[f64], member_labels: &[bool], fpr: f64) -> Result<f64> {
    if scores.len() != member_labels.len() {
        return Err(Error::invalid("scores and labels must have equal length"));
    }
    let nonmember: Vec<f64> = scores
        .iter()
        .zip(member_labels)
        .filter(|(_, &m)| !m)
        .map(|(&s, _)| s)
        .collect();
    let member: Vec<f64> = scores
        .iter()
        .zip(member_labels)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .collect();
    if member.is_empty() || nonmember.is_empty() {
        return Err(Error::invalid("tpr_at_fpr requires both member and non-member scores"));
    }
    let tau = threshold_at_fpr(&nonmember, fpr)?;
    Ok(member.iter().filter(|&&s| classify(s, tau)).count() as f64 / member.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logit_reference_values() {
        assert_eq!(logit_transform(0.5).unwrap(), 0.0);
        assert_relative_eq!(logit_transform(0.9).unwrap(), 9.0f64.ln(), epsilon = 1e-12);
        assert!(logit_transform(0.0).is_err());
        assert!(logit_transform(1.0).is_err());
        for p in [0.1, 0.33, 0.77, 0.99] {
            let sum = logit_transform(p).unwrap() + logit_transform(1.0 - p).unwrap();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_fit_examples() {
        let f = fit_gaussian(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(f.mu, 1.0);
        assert_eq!(f.var, VAR_FLOOR);
        let f = fit_gaussian(&[0.0, 2.0]).unwrap();
        assert_eq!(f.mu, 1.0);
        assert_eq!(f.var, 2.0);
        assert!(fit_gaussian(&[1.0]).is_err());
        // Shift invariance.
        let base = fit_gaussian(&[0.3, 1.7, -0.5, 2.2]).unwrap();
        let shifted = fit_gaussian(&[10.3, 11.7, 9.5, 12.2]).unwrap();
        assert_relative_eq!(shifted.mu, base.mu + 10.0, epsilon = 1e-12);
        assert_relative_eq!(shifted.var, base.var, epsilon = 1e-12);
    }

    #[test]
    fn likelihood_ratio_two_gaussian_construction() {
        // Equal variances, mu_out = mu_in - 2s, evaluated at mu_in: e^2.
        let s = 0.7;
        let fit_in = GaussianFit { mu: 1.3, var: s * s };
        let fit_out = GaussianFit { mu: 1.3 - 2.0 * s, var: s * s };
        let log_l = log_likelihood_ratio(1.3, &fit_in, &fit_out);
        assert_relative_eq!(log_l.exp(), std::f64::consts::E.powi(2), epsilon = 1e-9);
        // Identical fits: ratio 1 anywhere.
        for m in [-3.0, 0.0, 5.5] {
            assert_eq!(log_likelihood_ratio(m, &fit_in, &fit_in), 0.0);
        }
        // Strictly increasing in m when mu_in > mu_out with equal variances.
        let mut prev = f64::NEG_INFINITY;
        for i in 0..20 {
            let m = -2.0 + i as f64 * 0.4;
            let v = log_likelihood_ratio(m, &fit_in, &fit_out);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn offline_tail_values() {
        let fit = GaussianFit { mu: 2.0, var: 4.0 };
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        // At the out mean: 0.5. One sigma above: standard normal CDF(1).
        assert_relative_eq!(std_normal.cdf((2.0 - fit.mu) / fit.var.sqrt()), 0.5, epsilon = 1e-12);
        let one_sigma = std_normal.cdf((4.0 - fit.mu) / fit.var.sqrt());
        assert_relative_eq!(one_sigma, 1.0 - 0.158655, epsilon = 1e-6);
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let tau = threshold_at_fpr(&scores, 0.05).unwrap();
        assert_eq!(tau, 96.0);
        assert_eq!(scores.iter().filter(|&&s| classify(s, tau)).count(), 4);
        assert_eq!(threshold_at_fpr(&scores, 1.0).unwrap(), 1.0);
        // ceil guard: 0.07 * 100 must select rank 7, not 8.
        assert_eq!(threshold_at_fpr(&scores, 0.07).unwrap(), 94.0);
        let equal = vec![3.0; 10];
        let tau = threshold_at_fpr(&equal, 0.2).unwrap();
        assert_eq!(equal.iter().filter(|&&s| classify(s, tau)).count(), 0);
        assert!(threshold_at_fpr(&[], 0.5).is_err());
    }

    #[test]
    fn classify_is_strict() {
        assert!(classify(2.0, 1.0));
        assert!(!classify(1.0, 1.0));
        assert!(!classify(0.5, 1.0));
    }

    #[test]
    fn auc_examples() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let same = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(auc(&same, &labels).unwrap(), 0.5);
        let scores = [0.9, 0.4, 0.5, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn tpr_examples() {
        let scores = [10.0, 9.0, 1.0, 0.5, 0.4, 0.3];
        let labels = [true, true, false, false, false, false];
        assert_eq!(tpr_at_fpr(&scores, &labels, 0.01).unwrap(), 1.0);
        let flat = [1.0, 1.0, 1.0, 1.0];
        let labels = [true, false, true, false];
        assert_eq!(tpr_at_fpr(&flat, &labels, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn scorer_end_to_end_on_constructed_models() {
        // Two-class single-layer models emit phi = z0 - z1 exactly (up to
        // softmax round-off), so bias-only models pin the observations.
        use crate::data::{Dataset, Layout};
        use crate::model::init_model;

        let phi_model = |t: f64| {
            let mut m = init_model(&[1, 2], 0).unwrap();
            m.set_params_flat(&[0.0, 0.0, t, 0.0]).unwrap();
            m
        };
        let d = 0.5;
        let s = (2.0f64).sqrt() * d; // two obs at +-d have sample std sqrt(2) d
        let sample = Sample { id: 0, features: vec![0.0], label: 0 };
        let other = Sample { id: 1, features: vec![0.0], label: 1 };
        let dataset = Dataset::new(vec![sample.clone(), other], 2, Layout::Flat).unwrap();
        let _ = &dataset;

        let in_a = phi_model(-d);
        let in_b = phi_model(d);
        let out_a = phi_model(-2.0 * s - d);
        let out_b = phi_model(-2.0 * s + d);
        let target = phi_model(0.0);

        let m_in = SplitMask::from_members(2, [0]);
        let m_out = SplitMask::from_members(2, [1]);
        let pool = ShadowPool::new(vec![
            (&in_a, &m_in),
            (&in_b, &m_in),
            (&out_a, &m_out),
            (&out_b, &m_out),
        ]);
        let score = online_lira_score(&target, &pool, &sample).unwrap();
        assert_relative_eq!(score.lambda(), std::f64::consts::E.powi(2), epsilon = 1e-9);
        // Shuffled pool gives the identical score.
        let shuffled = ShadowPool::new(vec![
            (&out_b, &m_out),
            (&in_b, &m_in),
            (&out_a, &m_out),
            (&in_a, &m_in),
        ]);
        let score2 = online_lira_score(&target, &shuffled, &sample).unwrap();
        assert_eq!(score.ranking_value(), score2.ranking_value());

        // Offline on the same out-shadows: phi_target = mu_out + 2s, a
        // two-sigma upper tail.
        let off = offline_lira_score(&target, &pool, &sample).unwrap();
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        match off {
            LiraScore::OneSided { mass } => assert_relative_eq!(mass, std_normal.cdf(2.0), epsilon = 1e-9),
            _ => panic!("expected one-sided score"),
        }

        // Coverage errors.
        let thin = ShadowPool::new(vec![(&in_a, &m_in), (&out_a, &m_out)]);
        assert!(matches!(
            online_lira_score(&target, &thin, &sample),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn alira_score_monotone_construction() {
        // jitter(eta=0) collapses augmentations onto the sample, so both
        // fits hit the variance floor and the score reduces to the ratio at
        // phi(x). Build models whose phi gap is known.
        use crate::model::init_model;
        let phi_model = |t: f64| {
            let mut m = init_model(&[1, 2], 0).unwrap();
            m.set_params_flat(&[0.0, 0.0, t, 0.0]).unwrap();
            m
        };
        let sample = Sample { id: 0, features: vec![0.0], label: 0 };
        let layout = Layout::Flat;
        let scheme = AugmentationScheme::Jitter { eta: 0.0 };
        let f_in = phi_model(1.0);
        let f_out = phi_model(-1.0);
        let member_like = phi_model(1.0);
        let nonmember_like = phi_model(-1.0);
        let s_mem =
            alira_score(&member_like, &f_in, &f_out, &sample, &layout, 10, &scheme, 7).unwrap();
        let s_non =
            alira_score(&nonmember_like, &f_in, &f_out, &sample, &layout, 10, &scheme, 7).unwrap();
        assert!(s_mem.ranking_value() > s_non.ranking_value());
        assert!(alira_score(&member_like, &f_in, &f_out, &sample, &layout, 1, &scheme, 7).is_err());
    }
}
