//! Criterion checks over before/after risk tables, failure rates, and the
//! audit report.
//!
//! Criterion 1 compares raw TPR/FPR ratios (strict inequality); Criterion 2
//! compares `ln_ratio` against the privacy budget in its DP form, or the
//! after-ratio against the before-maximum in its non-DP form (both
//! non-strict). The report echoes every convention so a reader cannot
//! misattribute scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::RiskTable;

/// Audit thresholds. `t1` is the relative margin for forget samples,
/// `t_abs` the absolute forget budget on `ln_ratio`, `epsilon` the DP
/// budget, `t2` the relaxation of the non-DP bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t_abs: f64,
    pub epsilon: Option<f64>,
    pub t2: f64,
    pub dp_mode: bool,
}

/// Which check a verdict belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    C1,
    C1Abs,
    C2Dp,
    C2NonDp,
}

/// Margins can be infinite when a sentinel record is involved; JSON has no
/// infinity literal, so those serialize as the strings "inf" / "-inf".
mod f64_total {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("expected inf/-inf, got {other:?}"))),
            },
        }
    }
}

/// Pass/fail for one sample under one criterion. The margin is the signed
/// distance to the bound; positive margins pass strict criteria, and
/// non-negative margins pass the non-strict Criterion-2 forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub sample_id: usize,
    pub criterion: CriterionKind,
    pub pass: bool,
    #[serde(with = "f64_total")]
    pub margin: f64,
}

/// Where the audited tables came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub pool: String,
    pub attack: String,
    pub unlearn: String,
    /// Nominal FPR smoothing floor used by the risk estimator.
    pub fpr_floor: f64,
}

/// Aggregate audit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub thresholds: Thresholds,
    pub provenance: ReportProvenance,
    /// Ceiling `ln(1/fpr_floor)` the estimator imposes on every ln_ratio.
    pub ln_ratio_ceiling: f64,
    /// Fraction of forget samples failing Criterion 1; absent when the
    /// forget set is empty.
    pub failure_rate_c1: Option<f64>,
    /// Fraction of forget samples failing the absolute forget budget.
    pub failure_rate_c1_abs: Option<f64>,
    /// Fraction of retained samples failing the selected Criterion-2 form.
    pub failure_rate_c2: f64,
    pub c2_variant: CriterionKind,
    pub verdicts: Vec<CriterionVerdict>,
}

/// Direction of risk-ranked selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectDirection {
    Top,
    Bottom,
}

/// Pick the `ceil(k * n)` samples with the largest (top) or smallest
/// (bottom) ln_ratio. Ties break toward the smaller sample id. Returns ids
/// in ascending order.
pub fn select_by_risk(table: &RiskTable, k: f64, direction: SelectDirection) -> Result<Vec<usize>> {
    if !(k > 0.0 && k <= 0.5) {
        return Err(Error::invalid("k must be in (0, 0.5]"));
    }
    let n = table.len();
    if n == 0 {
        return Err(Error::invalid("risk table is empty"));
    }
    let count = (((k * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| {
        let (ra, rb) = (table.records[a].ln_ratio, table.records[b].ln_ratio);
        let ord = match direction {
            SelectDirection::Top => f64::total_cmp(&rb, &ra),
            SelectDirection::Bottom => f64::total_cmp(&ra, &rb),
        };
        ord.then_with(|| a.cmp(&b))
    });
    let mut chosen: Vec<usize> = ids.into_iter().take(count).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

fn lookup<'t>(table: &'t RiskTable, id: usize, what: &str) -> Result<&'t crate::risk::RiskRecord> {
    table.record(id).ok_or_else(|| Error::Coverage {
        message: format!("{what} table does not cover sample {id}"),
        samples: vec![id],
    })
}

/// Criterion 1 on the forget samples: the relative drop
/// `after.ratio < before.ratio - t1` (strict) and the absolute budget
/// `after.ln_ratio < t_abs` (strict). Two verdicts per sample.
pub fn check_criterion1(
    before: &RiskTable,
    after: &RiskTable,
    forget_ids: &[usize],
    t1: f64,
    t_abs: f64,
) -> Result<Vec<CriterionVerdict>> {
    if t1 < 0.0 || t_abs < 0.0 {
        return Err(Error::invalid("t1 and t_abs must be non-negative"));
    }
    let mut verdicts = Vec::with_capacity(forget_ids.len() * 2);
    for &id in forget_ids {
        let b = lookup(before, id, "before")?;
        let a = lookup(after, id, "after")?;
        let margin = (b.ratio - t1) - a.ratio;
        verdicts.push(CriterionVerdict {
            sample_id: id,
            criterion: CriterionKind::C1,
            pass: a.ratio < b.ratio - t1,
            margin,
        });
        let abs_margin = t_abs - a.ln_ratio;
        verdicts.push(CriterionVerdict {
            sample_id: id,
            criterion: CriterionKind::C1Abs,
            pass: a.ln_ratio < t_abs,
            margin: abs_margin,
        });
    }
    Ok(verdicts)
}

/// DP Criterion 2 on the retained samples: `ln_ratio <= epsilon`
/// (non-strict). Sentinel records pass vacuously.
pub fn check_criterion2_dp(
    after: &RiskTable,
    retained_ids: &[usize],
    epsilon: f64,
) -> Result<Vec<CriterionVerdict>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    retained_ids
        .iter()
        .map(|&id| {
            let a = lookup(after, id, "after")?;
            Ok(CriterionVerdict {
                sample_id: id,
                criterion: CriterionKind::C2Dp,
                pass: a.ln_ratio <= epsilon,
                margin: epsilon - a.ln_ratio,
            })
        })
        .collect()
}

/// Non-DP Criterion 2: the after-ratio may not exceed the most sensitive
/// sample of the original model, `max over D of before.ratio`, plus `t2`.
pub fn check_criterion2_nondp(
    before: &RiskTable,
    after: &RiskTable,
    retained_ids: &[usize],
    t2: f64,
) -> Result<Vec<CriterionVerdict>> {
    if before.is_empty() {
        return Err(Error::invalid("before table is empty"));
    }
    let bound = before.records.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    retained_ids
        .iter()
        .map(|&id| {
            let a = lookup(after, id, "after")?;
            Ok(CriterionVerdict {
                sample_id: id,
                criterion: CriterionKind::C2NonDp,
                pass: a.ratio <= bound + t2,
                margin: bound + t2 - a.ratio,
            })
        })
        .collect()
}

/// Fraction of verdicts that fail.
pub fn failure_rate(verdicts: &[CriterionVerdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::invalid("failure_rate over an empty verdict list"));
    }
    let fails = verdicts.iter().filter(|v| !v.pass).count();
    Ok(fails as f64 / verdicts.len() as f64)
}

/// Run every check and assemble the report. Retained ids are the dataset
/// ids minus the forget set; `thresholds.dp_mode` selects which
/// Criterion-2 variant fills `failure_rate_c2`.
pub fn build_report(
    before: &RiskTable,
    after: &RiskTable,
    forget_ids: &[usize],
    thresholds: &Thresholds,
    provenance: ReportProvenance,
) -> Result<AuditReport> {
    if before.len() != after.len() {
        return Err(Error::invalid("before and after tables cover different sample counts"));
    }
    let forget_set: std::collections::BTreeSet<usize> = forget_ids.iter().copied().collect();
    let retained: Vec<usize> = (0..before.len()).filter(|id| !forget_set.contains(id)).collect();
    if retained.is_empty() {
        return Err(Error::invalid("no retained samples to audit"));
    }
    let c1_verdicts = check_criterion1(before, after, forget_ids, thresholds.t1, thresholds.t_abs)?;
    let (c2_variant, c2_verdicts) = if thresholds.dp_mode {
        let epsilon = thresholds
            .epsilon
            .ok_or_else(|| Error::invalid("dp_mode audit requires an epsilon threshold"))?;
        (CriterionKind::C2Dp, check_criterion2_dp(after, &retained, epsilon)?)
    } else {
        (CriterionKind::C2NonDp, check_criterion2_nondp(before, after, &retained, thresholds.t2)?)
    };
    let only = |kind: CriterionKind| -> Vec<CriterionVerdict> {
        c1_verdicts.iter().filter(|v| v.criterion == kind).copied().collect()
    };
    let c1_only = only(CriterionKind::C1);
    let c1_abs_only = only(CriterionKind::C1Abs);
    let failure_rate_c1 =
        if c1_only.is_empty() { None } else { Some(failure_rate(&c1_only)?) };
    let failure_rate_c1_abs =
        if c1_abs_only.is_empty() { None } else { Some(failure_rate(&c1_abs_only)?) };
    let failure_rate_c2 = failure_rate(&c2_verdicts)?;
    let ln_ratio_ceiling = (1.0 / provenance.fpr_floor).ln();
    let mut verdicts = c1_verdicts;
    verdicts.extend(c2_verdicts);
    Ok(AuditReport {
        thresholds: *thresholds,
        provenance,
        ln_ratio_ceiling,
        failure_rate_c1,
        failure_rate_c1_abs,
        failure_rate_c2,
        c2_variant,
        verdicts,
    })
}

/// Report files are JSON.
pub fn save_report(report: &AuditReport, path: impl AsRef<std::path::Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<std::path::Path>) -> Result<AuditReport> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Flat per-sample verdict rows for plotting:
/// `sample_id,criterion,pass,margin`.
pub fn save_verdicts(report: &AuditReport, path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for v in &report.verdicts {
        let kind = match v.criterion {
            CriterionKind::C1 => "c1",
            CriterionKind::C1Abs => "c1_abs",
            CriterionKind::C2Dp => "c2_dp",
            CriterionKind::C2NonDp => "c2_nondp",
        };
        let margin = if v.margin.is_finite() {
            format!("{}", v.margin)
        } else if v.margin > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
        writeln!(out, "{},{},{},{}", v.sample_id, kind, u8::from(v.pass), margin)
            .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}
