//! AUROC, F1-max, answer agreement, and averaging over repeated runs.
//!
//! Anomaly is the positive class throughout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::filtering::csv_field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub image_id: String,
    pub score: f64,
    pub label: Label,
    #[serde(default)]
    pub indeterminate: bool,
}

impl ScoredSample {
    pub fn new(image_id: impl Into<String>, score: f64, label: Label) -> Self {
        ScoredSample {
            image_id: image_id.into(),
            score,
            label,
            indeterminate: false,
        }
    }
}

fn determinate(samples: &[ScoredSample]) -> impl Iterator<Item = &ScoredSample> {
    samples.iter().filter(|s| !s.indeterminate)
}

/// Mann-Whitney AUROC with half credit for ties, computed from ranks in
/// O(n log n).
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let mut pts: Vec<(f64, bool)> = determinate(samples)
        .map(|s| (s.score, s.label == Label::Anomaly))
        .collect();
    if pts.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::UndefinedMetric("auroc over NaN scores"));
    }
    let n_pos = pts.iter().filter(|(_, p)| *p).count();
    let n_neg = pts.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both normal and anomaly samples"));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum of positives, so that mid-ranks stay integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the mid-rank (i+1+j)/2
        let pos_in_group = pts[i..j].iter().filter(|(_, p)| *p).count() as u128;
        rank2_sum += pos_in_group * (i + 1 + j) as u128;
        i = j;
    }
    let n_pos = n_pos as u128;
    // U = R - n_pos(n_pos+1)/2, kept doubled
    let u2 = rank2_sum - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Max {
    pub value: f64,
    /// Smallest threshold reaching `value`; `inf` when predicting nothing
    /// positive is optimal.
    pub threshold: f64,
}

pub fn f1_at(samples: &[ScoredSample], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for s in determinate(samples) {
        let predicted = s.score >= threshold;
        match (predicted, s.label) {
            (true, Label::Anomaly) => tp += 1,
            (true, Label::Normal) => fp += 1,
            (false, Label::Anomaly) => fn_ += 1,
            (false, Label::Normal) => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Best F1 over thresholds at every distinct score plus `+inf`.
pub fn f1_max(samples: &[ScoredSample]) -> Result<F1Max> {
    let mut pts: Vec<(f64, bool)> = determinate(samples)
        .map(|s| (s.score, s.label == Label::Anomaly))
        .collect();
    if pts.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::UndefinedMetric("f1_max over NaN scores"));
    }
    let n_pos = pts.iter().filter(|(_, p)| *p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("f1_max needs at least one anomaly sample"));
    }
    // walk thresholds from high to low; ties keep the lowest threshold
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = F1Max {
        value: 0.0,
        threshold: f64::INFINITY,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pts.len() {
        let tau = pts[i].0;
        while i < pts.len() && pts[i].0 == tau {
            if pts[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = (2 * tp) as f64 / (tp + fp + n_pos) as f64;
        if f1 >= best.value {
            best = F1Max { value: f1, threshold: tau };
        }
    }
    Ok(best)
}

/// Fraction of positions where the two answer lists agree.
pub fn agreement<T: PartialEq>(model: &[T], annotator: &[T]) -> Result<f64> {
    if model.len() != annotator.len() {
        return Err(Error::Alignment {
            left: model.len(),
            right: annotator.len(),
        });
    }
    if model.is_empty() {
        return Err(Error::UndefinedMetric("agreement over zero answers"));
    }
    let same = model.iter().zip(annotator).filter(|(a, b)| a == b).count();
    Ok(same as f64 / model.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub normal: Option<f64>,
    pub anomaly: Option<f64>,
    pub n_normal: usize,
    pub n_anomaly: usize,
}

/// Agreement split by the label of the image each answer belongs to.
pub fn agreement_by_label<T: PartialEq>(rows: &[(Label, T, T)]) -> AgreementStats {
    let part = |label: Label| {
        let (m, a): (Vec<&T>, Vec<&T>) = rows
            .iter()
            .filter(|r| r.0 == label)
            .map(|r| (&r.1, &r.2))
            .unzip();
        (agreement(&m, &a).ok(), m.len())
    };
    let (normal, n_normal) = part(Label::Normal);
    let (anomaly, n_anomaly) = part(Label::Anomaly);
    AgreementStats {
        normal,
        anomaly,
        n_normal,
        n_anomaly,
    }
}

/// Metrics for one run of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub category: String,
    pub run: usize,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub n_indeterminate: usize,
    pub auroc: f64,
    pub f1_max: f64,
    pub f1_max_threshold: f64,
    /// Scores came from verdicts because the backend gave no log-probs.
    #[serde(default)]
    pub degraded: bool,
}

impl RunMetrics {
    pub fn compute(category: &str, run: usize, samples: &[ScoredSample], degraded: bool) -> Result<Self> {
        let n_indeterminate = samples.iter().filter(|s| s.indeterminate).count();
        if n_indeterminate > 0 {
            log::warn!("{category} run {run}: {n_indeterminate} indeterminate images excluded from metrics");
        }
        let count = |l| determinate(samples).filter(|s| s.label == l).count();
        let f1 = f1_max(samples)?;
        Ok(RunMetrics {
            category: category.to_string(),
            run,
            n_normal: count(Label::Normal),
            n_anomaly: count(Label::Anomaly),
            n_indeterminate,
            auroc: auroc(samples)?,
            f1_max: f1.value,
            f1_max_threshold: f1.threshold,
            degraded,
        })
    }
}

/// Per-run values plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: String,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub n_indeterminate: usize,
    pub auroc: f64,
    pub f1_max: f64,
    pub runs: Vec<RunMetrics>,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementStats>,
}

/// Order-independent mean: values are summed in sorted order so that any
/// permutation of the runs gives the same bits.
pub fn stable_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<EvalReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Aggregation("no runs to aggregate".into()))?;
    if let Some(other) = runs.iter().find(|r| r.category != first.category) {
        return Err(Error::Aggregation(format!(
            "runs mix categories `{}` and `{}`",
            first.category, other.category
        )));
    }
    let mut sorted = runs.to_vec();
    sorted.sort_by_key(|r| r.run);
    let auroc = stable_mean(&runs.iter().map(|r| r.auroc).collect::<Vec<_>>());
    let f1 = stable_mean(&runs.iter().map(|r| r.f1_max).collect::<Vec<_>>());
    Ok(EvalReport {
        category: first.category.clone(),
        n_normal: first.n_normal,
        n_anomaly: first.n_anomaly,
        n_indeterminate: runs.iter().map(|r| r.n_indeterminate).sum(),
        auroc,
        f1_max: f1,
        runs: sorted,
        degraded: runs.iter().any(|r| r.degraded),
        agreement: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub const CSV_HEADER: &'static str = "category,auroc,f1_max,runs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{}",
            csv_field(&self.category),
            self.auroc,
            self.f1_max,
            self.runs.len()
        )
    }

    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in reports {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        if reports.len() > 1 {
            let a = stable_mean(&reports.iter().map(|r| r.auroc).collect::<Vec<_>>());
            let f = stable_mean(&reports.iter().map(|r| r.f1_max).collect::<Vec<_>>());
            let runs = reports.iter().map(|r| r.runs.len()).max().unwrap_or(0);
            let _ = writeln!(out, "average,{a:.6},{f:.6},{runs}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(anomalies: &[f64], normals: &[f64]) -> Vec<ScoredSample> {
        anomalies
            .iter()
            .map(|&s| (s, Label::Anomaly))
            .chain(normals.iter().map(|&s| (s, Label::Normal)))
            .enumerate()
            .map(|(k, (s, l))| ScoredSample::new(format!("img{k}"), s, l))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&samples(&[0.9, 0.8], &[0.3, 0.2])).unwrap(), 1.0);
        assert_eq!(auroc(&samples(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(auroc(&samples(&[0.9, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
        assert!(auroc(&samples(&[0.9], &[])).is_err());
    }

    #[test]
    fn auroc_skips_indeterminate() {
        let mut s = samples(&[0.9, 0.1], &[0.5]);
        s[1].indeterminate = true;
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn f1_examples() {
        let r = f1_max(&samples(&[0.9], &[0.8, 0.1])).unwrap();
        assert_eq!((r.value, r.threshold), (1.0, 0.9));
        // lone anomaly below both normals: everything positive, p = 1/3, r = 1
        let r = f1_max(&samples(&[0.05], &[0.8, 0.1])).unwrap();
        let p = 1.0 / 3.0;
        assert!((r.value - 2.0 * p / (p + 1.0)).abs() < 1e-15);
        assert_eq!(r.threshold, 0.05);
        assert!(f1_max(&samples(&[], &[0.4])).is_err());
    }

    #[test]
    fn agreement_examples() {
        let a = vec![true; 50];
        let mut b = a.clone();
        b[7] = false;
        assert_eq!(agreement(&a, &b).unwrap(), 0.98);
        assert_eq!(agreement(&a, &a).unwrap(), 1.0);
        assert_eq!(agreement(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(matches!(agreement(&[1], &[1, 2]), Err(Error::Alignment { .. })));
        let stats = agreement_by_label(&[(Label::Normal, 1, 1), (Label::Anomaly, 1, 0)]);
        assert_eq!((stats.normal, stats.anomaly), (Some(1.0), Some(0.0)));
    }

    fn run(category: &str, run: usize, auroc: f64) -> RunMetrics {
        RunMetrics {
            category: category.into(),
            run,
            n_normal: 1,
            n_anomaly: 1,
            n_indeterminate: 0,
            auroc,
            f1_max: auroc,
            f1_max_threshold: 0.5,
            degraded: false,
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate_runs(&[run("c", 1, 0.9), run("c", 2, 0.8), run("c", 3, 0.7)]).unwrap();
        assert!((r.auroc - 0.8).abs() < 1e-15);
        let single = aggregate_runs(&[run("c", 1, 0.37)]).unwrap();
        assert_eq!(single.auroc, 0.37);
        assert!(matches!(
            aggregate_runs(&[run("a", 1, 0.5), run("b", 2, 0.5)]),
            Err(Error::Aggregation(_))
        ));
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn csv_shape() {
        let r = aggregate_runs(&[run("pushpins", 1, 1.0)]).unwrap();
        assert_eq!(
            EvalReport::to_csv(&[r]),
            "category,auroc,f1_max,runs\npushpins,1.000000,1.000000,1\n"
        );
    }
}
