//! Per-sample privacy-risk estimation: train a pool of models on random
//! halves, score every sample against every pool model with an attack, and
//! reduce each sample's scores to its greatest TPR/FPR over thresholds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{alira_score, offline_lira_score, online_lira_score, ShadowPool};
use crate::data::{random_half_split, AugmentationScheme, Dataset, SplitMask};
use crate::error::{Error, Result};
use crate::model::{init_model, train, train_dp, DpConfig, ModelState, PrivacySpend, TrainConfig};
use crate::seeds::{derive_seed, stream};
use crate::unlearn::{
    retrain_exact, unlearn_fisher_dampen, unlearn_finetune, unlearn_gradascent, unlearn_saliency,
    UnlearnConfig, UnlearnMethod,
};

/// One half-trained model with its membership mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolModel {
    pub state: ModelState,
    pub mask: SplitMask,
    pub seed: u64,
    pub spend: Option<PrivacySpend>,
}

/// The pool of models used for per-sample TPR/FPR estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    pub models: Vec<PoolModel>,
}

/// Leave-one-out shadow pair for the augmentation-based attack: `f_in` was
/// trained on a half containing the sample, `f_out` on the same half with
/// the sample removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliraPair {
    pub f_in: ModelState,
    pub f_out: ModelState,
}

/// Per-sample shadow pairs, indexed by sample id. Trained once per
/// experiment; unlearning the target pool never touches them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliraPairs {
    pub base_seed: u64,
    pub pairs: Vec<AliraPair>,
}

/// Augmentation parameters for the A-LiRA scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AliraParams {
    pub n_aug: usize,
    pub scheme: AugmentationScheme,
    pub seed: u64,
}

/// Which attack scores the pool.
#[derive(Debug, Clone, Copy)]
pub enum AttackSpec<'a> {
    Alira { pairs: &'a AliraPairs, params: AliraParams },
    Online,
    Offline,
}

impl AttackSpec<'_> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackSpec::Alira { .. } => "alira",
            AttackSpec::Online => "online",
            AttackSpec::Offline => "offline",
        }
    }
}

/// One attack score against one pool model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub model_index: usize,
    pub is_member: bool,
    pub score: f64,
}

/// All scores for one sample across the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: usize,
    pub entries: Vec<ScoreEntry>,
}

impl SampleScores {
    pub fn member_scores(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.is_member).map(|e| e.score).collect()
    }

    pub fn nonmember_scores(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| !e.is_member).map(|e| e.score).collect()
    }
}

/// Scores for every (sample, model) pair, sample-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedScores {
    pub per_sample: Vec<SampleScores>,
}

/// Greatest TPR/FPR record for one sample. A sample no threshold can catch
/// gets the sentinel: tpr 0, ratio 0, ln_ratio -inf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub sample_id: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub ratio: f64,
    pub ln_ratio: f64,
}

/// Per-sample records in id order plus provenance of how they were made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub records: Vec<RiskRecord>,
    pub provenance: String,
}

impl RiskTable {
    pub fn record(&self, sample_id: usize) -> Option<&RiskRecord> {
        self.records.get(sample_id).filter(|r| r.sample_id == sample_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Train `m` models on independent random halves. Mask and training seeds
/// derive from `config.seed` by fixed offsets, so the pool is a pure
/// function of its arguments.
pub fn train_model_pool(
    dataset: &Dataset,
    m: usize,
    arch: &[usize],
    config: &TrainConfig,
    dp: Option<&DpConfig>,
) -> Result<ModelPool> {
    if m < 4 {
        return Err(Error::invalid("pool size must be at least 4"));
    }
    if m % 2 != 0 {
        return Err(Error::invalid("pool size must be even"));
    }
    let models: Result<Vec<PoolModel>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mask_seed = derive_seed(config.seed, stream::POOL_MASK, j as u64);
            let train_seed = derive_seed(config.seed, stream::POOL_TRAIN, j as u64);
            let mask = random_half_split(dataset.len(), mask_seed)?;
            let model_cfg = TrainConfig { seed: train_seed, ..*config };
            let fresh = init_model(arch, train_seed)?;
            let (state, spend) = match dp {
                Some(dp_cfg) => {
                    let (s, spend) = train_dp(&fresh, dataset, &mask, &model_cfg, dp_cfg)?;
                    (s, Some(spend))
                }
                None => (train(&fresh, dataset, &mask, &model_cfg)?, None),
            };
            Ok(PoolModel { state, mask, seed: train_seed, spend })
        })
        .collect();
    Ok(ModelPool { models: models? })
}

/// Train the per-sample leave-one-out shadow pairs for the
/// augmentation-based attack. For sample `x`: draw a random half `B_x`,
/// then `f_in = M(B_x + x)` and `f_out = M(B_x - x)`, so the pair differs
/// in exactly that sample.
pub fn train_alira_pairs(
    dataset: &Dataset,
    arch: &[usize],
    config: &TrainConfig,
    dp: Option<&DpConfig>,
    base_seed: u64,
) -> Result<AliraPairs> {
    let pairs: Result<Vec<AliraPair>> = (0..dataset.len())
        .into_par_iter()
        .map(|id| {
            let base_mask_seed = derive_seed(base_seed, stream::PAIR_BASE, id as u64);
            let base = random_half_split(dataset.len(), base_mask_seed)?;
            let in_mask = base.with_bit(id, true);
            let out_mask = base.with_bit(id, false);
            let in_seed = derive_seed(base_seed, stream::PAIR_TRAIN, 2 * id as u64);
            let out_seed = derive_seed(base_seed, stream::PAIR_TRAIN, 2 * id as u64 + 1);
            let f_in = train_one(dataset, &in_mask, arch, config, dp, in_seed)?;
            let f_out = train_one(dataset, &out_mask, arch, config, dp, out_seed)?;
            Ok(AliraPair { f_in, f_out })
        })
        .collect();
    Ok(AliraPairs { base_seed, pairs: pairs? })
}

fn train_one(
    dataset: &Dataset,
    mask: &SplitMask,
    arch: &[usize],
    config: &TrainConfig,
    dp: Option<&DpConfig>,
    seed: u64,
) -> Result<ModelState> {
    let cfg = TrainConfig { seed, ..*config };
    let fresh = init_model(arch, seed)?;
    match dp {
        Some(dp_cfg) => Ok(train_dp(&fresh, dataset, mask, &cfg, dp_cfg)?.0),
        None => train(&fresh, dataset, mask, &cfg),
    }
}

fn check_pool_coverage(pool: &ModelPool, dataset: &Dataset, spec: &AttackSpec<'_>) -> Result<()> {
    // Scoring model j removes it from the shadow set, so the online fits
    // need three models on each side; offline only needs the out side.
    let (need_in, need_out) = match spec {
        AttackSpec::Alira { .. } => (0usize, 0usize),
        AttackSpec::Online => (3, 3),
        AttackSpec::Offline => (0, 3),
    };
    if need_in == 0 && need_out == 0 {
        return Ok(());
    }
    let mut offending = Vec::new();
    for id in 0..dataset.len() {
        let in_count = pool.models.iter().filter(|p| p.mask.is_member(id)).count();
        let out_count = pool.models.len() - in_count;
        if in_count < need_in || out_count < need_out {
            offending.push(id);
        }
    }
    if offending.is_empty() {
        Ok(())
    } else {
        Err(Error::Coverage {
            message: format!(
                "{} samples lack {}-attack shadow coverage over the pool",
                offending.len(),
                spec.kind_name()
            ),
            samples: offending,
        })
    }
}

/// Score every sample against every pool model. One score per (sample,
/// model) pair; membership bits come straight from the pool masks.
pub fn collect_scores(
    pool: &ModelPool,
    spec: &AttackSpec<'_>,
    dataset: &Dataset,
) -> Result<CollectedScores> {
    if pool.models.is_empty() {
        return Err(Error::invalid("pool is empty"));
    }
    if let AttackSpec::Alira { pairs, params } = spec {
        if pairs.pairs.len() != dataset.len() {
            return Err(Error::invalid("alira pairs do not cover the dataset"));
        }
        if params.n_aug < 2 {
            return Err(Error::invalid("n_aug must be >= 2"));
        }
    }
    check_pool_coverage(pool, dataset, spec)?;
    let per_sample: Result<Vec<SampleScores>> = (0..dataset.len())
        .into_par_iter()
        .map(|id| {
            let sample = dataset.sample(id).expect("id in range");
            let mut entries = Vec::with_capacity(pool.models.len());
            for (j, target) in pool.models.iter().enumerate() {
                let score = match spec {
                    AttackSpec::Alira { pairs, params } => {
                        let pair = &pairs.pairs[id];
                        let aug_seed = derive_seed(params.seed, stream::AUGMENT, id as u64);
                        alira_score(
                            &target.state,
                            &pair.f_in,
                            &pair.f_out,
                            sample,
                            &dataset.layout,
                            params.n_aug,
                            &params.scheme,
                            aug_seed,
                        )?
                        .ranking_value()
                    }
                    AttackSpec::Online => {
                        let shadows = shadow_view(pool, j);
                        online_lira_score(&target.state, &shadows, sample)?.ranking_value()
                    }
                    AttackSpec::Offline => {
                        let shadows = shadow_view(pool, j);
                        offline_lira_score(&target.state, &shadows, sample)?.ranking_value()
                    }
                };
                entries.push(ScoreEntry {
                    model_index: j,
                    is_member: target.mask.is_member(id),
                    score,
                });
            }
            Ok(SampleScores { sample_id: id, entries })
        })
        .collect();
    Ok(CollectedScores { per_sample: per_sample? })
}

/// All pool models except the target being scored.
fn shadow_view(pool: &ModelPool, exclude: usize) -> ShadowPool<'_> {
    let mut shadows = ShadowPool::default();
    for (j, p) in pool.models.iter().enumerate() {
        if j != exclude {
            shadows.push(&p.state, &p.mask);
        }
    }
    shadows
}

/// Greatest TPR/FPR over candidate thresholds (the distinct observed
/// scores, strict `score > tau` rule). FPR is floored at `fpr_floor` before
/// the ratio. Ties prefer larger TPR, then larger tau. When no threshold
/// gives TPR > 0 the sentinel record (ratio 0, ln_ratio -inf) is returned.
pub fn per_sample_risk(
    sample_id: usize,
    member_scores: &[f64],
    nonmember_scores: &[f64],
    fpr_floor: f64,
) -> Result<RiskRecord> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(Error::invalid("per_sample_risk requires scores on both sides"));
    }
    if !(fpr_floor > 0.0 && fpr_floor < 1.0) {
        return Err(Error::invalid("fpr_floor must be in (0, 1)"));
    }
    let mut members = member_scores.to_vec();
    members.sort_by(f64::total_cmp);
    let mut nonmembers = nonmember_scores.to_vec();
    nonmembers.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = members.iter().chain(nonmembers.iter()).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let count_above = |sorted: &[f64], tau: f64| -> usize {
        // first index with value > tau
        let mut lo = 0;
        let mut hi = sorted.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if sorted[mid] > tau {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        sorted.len() - lo
    };

    let mut best: Option<(f64, f64, f64, f64)> = None; // (ratio, tpr, tau, fpr)
    for &tau in &candidates {
        let tpr = count_above(&members, tau) as f64 / members.len() as f64;
        let raw_fpr = count_above(&nonmembers, tau) as f64 / nonmembers.len() as f64;
        let fpr = raw_fpr.max(fpr_floor);
        let ratio = tpr / fpr;
        let better = match best {
            None => true,
            Some((b_ratio, b_tpr, b_tau, _)) => {
                ratio > b_ratio
                    || (ratio == b_ratio && tpr > b_tpr)
                    || (ratio == b_ratio && tpr == b_tpr && tau > b_tau)
            }
        };
        if better {
            best = Some((ratio, tpr, tau, fpr));
        }
    }
    let (ratio, tpr, _, fpr) = best.expect("candidates nonempty");
    if tpr == 0.0 {
        return Ok(RiskRecord {
            sample_id,
            tpr: 0.0,
            fpr: fpr_floor,
            ratio: 0.0,
            ln_ratio: f64::NEG_INFINITY,
        });
    }
    Ok(RiskRecord { sample_id, tpr, fpr, ratio, ln_ratio: ratio.ln() })
}

/// Default smoothing floor: one over the sample's non-member count.
pub fn default_fpr_floor(nonmember_count: usize) -> f64 {
    1.0 / nonmember_count as f64
}

/// Full risk table: collect scores over the pool, then reduce each sample
/// with `per_sample_risk` at the default floor.
pub fn estimate_risk_table(
    dataset: &Dataset,
    pool: &ModelPool,
    spec: &AttackSpec<'_>,
    provenance: &str,
) -> Result<RiskTable> {
    let scores = collect_scores(pool, spec, dataset)?;
    risk_table_from_scores(&scores, provenance)
}

/// Reduce collected scores to a risk table.
pub fn risk_table_from_scores(scores: &CollectedScores, provenance: &str) -> Result<RiskTable> {
    let records: Result<Vec<RiskRecord>> = scores
        .per_sample
        .iter()
        .map(|s| {
            let members = s.member_scores();
            let nonmembers = s.nonmember_scores();
            if members.is_empty() || nonmembers.is_empty() {
                return Err(Error::Coverage {
                    message: "sample has no member or no non-member scores".into(),
                    samples: vec![s.sample_id],
                });
            }
            per_sample_risk(
                s.sample_id,
                &members,
                &nonmembers,
                default_fpr_floor(nonmembers.len()),
            )
        })
        .collect();
    Ok(RiskTable { records: records?, provenance: provenance.to_string() })
}

/// Apply an unlearning method to every pool model that trained on any
/// forget id, then rescore the whole dataset. Membership labels stay at
/// the original masks; each model unlearns exactly its own forget members.
#[allow(clippy::too_many_arguments)]
pub fn reestimate_after_unlearn(
    pool: &ModelPool,
    dataset: &Dataset,
    forget_ids: &[usize],
    unlearn_cfg: &UnlearnConfig,
    train_cfg: &TrainConfig,
    dp: Option<&DpConfig>,
    spec: &AttackSpec<'_>,
    provenance: &str,
) -> Result<(ModelPool, RiskTable)> {
    if forget_ids.is_empty() {
        return Err(Error::invalid("forget set is empty"));
    }
    let unlearned: Result<Vec<PoolModel>> = pool
        .models
        .par_iter()
        .enumerate()
        .map(|(j, pm)| {
            let own_forget: Vec<usize> =
                forget_ids.iter().copied().filter(|&id| pm.mask.is_member(id)).collect();
            if own_forget.is_empty() {
                return Ok(pm.clone());
            }
            let forget_mask = SplitMask::from_members(dataset.len(), own_forget.iter().copied());
            let retain_mask = pm.mask.without(&own_forget);
            let per_model_cfg = UnlearnConfig {
                seed: derive_seed(unlearn_cfg.seed, stream::RELABEL, j as u64),
                ..*unlearn_cfg
            };
            let state = match unlearn_cfg.method {
                UnlearnMethod::Retrain => {
                    let cfg = TrainConfig { seed: pm.seed, ..*train_cfg };
                    retrain_exact(dataset, &retain_mask, pm.state.arch(), &cfg, dp)?.0
                }
                UnlearnMethod::Finetune => {
                    unlearn_finetune(&pm.state, dataset, &retain_mask, &per_model_cfg)?
                }
                UnlearnMethod::GradAscent => {
                    let retain =
                        if retain_mask.member_count() > 0 { Some(&retain_mask) } else { None };
                    unlearn_gradascent(&pm.state, dataset, &forget_mask, retain, &per_model_cfg)?
                }
                UnlearnMethod::FisherDampen => unlearn_fisher_dampen(
                    &pm.state,
                    dataset,
                    &forget_mask,
                    &retain_mask,
                    &per_model_cfg,
                )?,
                UnlearnMethod::Saliency => {
                    unlearn_saliency(&pm.state, dataset, &forget_mask, &per_model_cfg)?
                }
            };
            Ok(PoolModel { state, mask: pm.mask.clone(), seed: pm.seed, spend: pm.spend })
        })
        .collect();
    let unlearned_pool = ModelPool { models: unlearned? };
    let table = estimate_risk_table(dataset, &unlearned_pool, spec, provenance)?;
    Ok((unlearned_pool, table))
}

/// Ceiling on `ln_ratio` imposed by the smoothing floor.
pub fn ln_ratio_ceiling(fpr_floor: f64) -> f64 {
    (1.0 / fpr_floor).ln()
}

/// Write a risk table as delimited text:
/// `sample_id,tpr,fpr,ratio,ln_ratio,provenance`. The sentinel ln_ratio
/// serializes as the string `-inf`.
pub fn save_risk_table(table: &RiskTable, path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for r in &table.records {
        let ln = if r.ln_ratio == f64::NEG_INFINITY {
            "-inf".to_string()
        } else {
            format!("{}", r.ln_ratio)
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.sample_id, r.tpr, r.fpr, r.ratio, ln, table.provenance
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Inverse of [`save_risk_table`].
pub fn load_risk_table(path: impl AsRef<std::path::Path>) -> Result<RiskTable> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut provenance = String::new();
    for (row0, line) in text.lines().enumerate() {
        let row = row0 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format { row, message: format!("expected 6 fields, got {}", fields.len()) });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            if s == "-inf" {
                return Ok(f64::NEG_INFINITY);
            }
            s.parse::<f64>()
                .map_err(|e| Error::Format { row, message: format!("bad {what} {s:?}: {e}") })
        };
        records.push(RiskRecord {
            sample_id: fields[0]
                .parse()
                .map_err(|e| Error::Format { row, message: format!("bad sample id: {e}") })?,
            tpr: parse(fields[1], "tpr")?,
            fpr: parse(fields[2], "fpr")?,
            ratio: parse(fields[3], "ratio")?,
            ln_ratio: parse(fields[4], "ln_ratio")?,
        });
        provenance = fields[5].to_string();
    }
    if records.is_empty() {
        return Err(Error::Format { row: 0, message: "risk table file contains no rows".into() });
    }
    Ok(RiskTable { records, provenance })
}

/// Export collected scores as delimited text:
/// `sample_id,model_index,is_member,score`.
pub fn save_scores(scores: &CollectedScores, path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for s in &scores.per_sample {
        for e in &s.entries {
            writeln!(out, "{},{},{},{}", s.sample_id, e.model_index, u8::from(e.is_member), e.score)
                .expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
