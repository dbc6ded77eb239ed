//! Compute-aligned comparison of training runs: series on a common 6ND
//! axis, score trends over log10 compute, dataset rankings at a fixed
//! scale, rank consistency across scales, and compute dominance.

mod report;

pub use report::{
    dominance_markdown, ranking_csv, ranking_markdown, ranking_svg, scatter_svg, table_csv, table_markdown, trend_csv,
    TrendMode,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::total_compute;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompareError {
    #[error("record {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate point {label} at compute {compute:e}")]
    Duplicate { label: String, compute: f64 },
    #[error("points span more than one scale: {0}")]
    MixedScales(String),
    #[error("rankings cover different datasets: {0}")]
    DatasetMismatch(String),
    #[error("{0}")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Internal,
    External,
}

/// One evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPoint {
    pub model: String,
    /// Training procedure; series group by `(procedure, dataset)`.
    #[serde(default)]
    pub procedure: String,
    pub dataset: String,
    #[serde(default)]
    pub params: Option<f64>,
    #[serde(default)]
    pub tokens: Option<f64>,
    /// Always `6 * params * tokens` after [`align`]; input values are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute: Option<f64>,
    /// Compute as printed by the source, kept for display checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_compute: Option<f64>,
    pub average: f64,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    /// Set when `scores` lists only some of the tasks behind `average`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub scores_subset: bool,
    pub provenance: Provenance,
}

/// Largest allowed gap between `average` and the mean of `scores`.
pub const AVERAGE_TOLERANCE: f64 = 0.005;

pub fn format_tokens(tokens: f64) -> String {
    let (v, unit) = if tokens >= 1e12 { (tokens / 1e12, "T") } else { (tokens / 1e9, "B") };
    let s = format!("{v:.1}");
    format!("{}{unit}", s.trim_end_matches(".0"))
}

impl RunPoint {
    pub fn procedure(&self) -> &str {
        if self.procedure.is_empty() {
            &self.model
        } else {
            &self.procedure
        }
    }

    /// `model dataset tokens`, e.g. `open-sci-ref-1.7B FineWeb-Edu 300B`.
    pub fn label(&self) -> String {
        let mut s = self.model.clone();
        if !self.dataset.is_empty() && self.dataset != "--" {
            s.push(' ');
            s.push_str(&self.dataset);
        }
        if let Some(d) = self.tokens {
            s.push(' ');
            s.push_str(&format_tokens(d));
        }
        s
    }

    /// 6ND from the point's own N and D.
    pub fn derived_compute(&self) -> Option<f64> {
        Some(total_compute(self.params?, self.tokens?))
    }

    pub fn mean_score(&self) -> Option<f64> {
        if self.scores.is_empty() {
            return None;
        }
        Some(self.scores.values().sum::<f64>() / self.scores.len() as f64)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (what, v) in [("params", self.params), ("tokens", self.tokens)] {
            match v {
                None => return Err(format!("{}: missing {what}", self.label())),
                Some(v) if !(v > 0.0 && v.is_finite()) => return Err(format!("{}: {what} {v} not positive", self.label())),
                _ => {}
            }
        }
        if !self.average.is_finite() {
            return Err(format!("{}: average is not finite", self.label()));
        }
        if let (Some(mean), false) = (self.mean_score(), self.scores_subset) {
            if (mean - self.average).abs() > AVERAGE_TOLERANCE {
                return Err(format!(
                    "{}: average {} differs from mean of scores {mean:.4}",
                    self.label(),
                    self.average
                ));
            }
        }
        Ok(())
    }
}

/// Parses RunPoint JSON Lines (blank lines ignored; 1-based line numbers).
pub fn parse_points(text: &str) -> Result<Vec<RunPoint>, CompareError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CompareError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn points_jsonl(points: &[RunPoint]) -> String {
    points
        .iter()
        .map(|p| serde_json::to_string(p).expect("point serializes") + "\n")
        .collect()
}

/// Fitted score trend `score = slope * log10(compute) + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

impl TrendFit {
    pub fn predict(&self, compute: f64) -> f64 {
        self.slope * compute.log10() + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSeries {
    pub procedure: String,
    pub dataset: String,
    /// Strictly increasing compute.
    pub points: Vec<RunPoint>,
    pub trend: Option<TrendFit>,
}

impl ScalingSeries {
    pub fn label(&self) -> String {
        if self.dataset.is_empty() || self.dataset == "--" {
            self.procedure.clone()
        } else {
            format!("{} {}", self.procedure, self.dataset)
        }
    }

    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.compute.expect("aligned"), p.average)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alignment {
    pub series: Vec<ScalingSeries>,
    /// Input index and reason for every point left out.
    pub rejected: Vec<(usize, String)>,
}

/// Groups points by `(procedure, dataset)`, recomputes compute as 6ND and
/// sorts each series by compute. Invalid points are reported, not fatal.
pub fn align(points: &[RunPoint]) -> Result<Alignment, CompareError> {
    let mut groups: BTreeMap<(String, String), Vec<RunPoint>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if let Err(reason) = p.validate() {
            rejected.push((i, reason));
            continue;
        }
        let mut p = p.clone();
        p.compute = p.derived_compute();
        groups
            .entry((p.procedure().to_string(), p.dataset.clone()))
            .or_default()
            .push(p);
    }
    let mut series = Vec::with_capacity(groups.len());
    for ((procedure, dataset), mut pts) in groups {
        pts.sort_by(|a, b| {
            a.compute
                .partial_cmp(&b.compute)
                .expect("finite")
                .then_with(|| a.model.cmp(&b.model))
        });
        if let Some(w) = pts.windows(2).find(|w| w[0].compute == w[1].compute) {
            return Err(CompareError::Duplicate {
                label: format!("{procedure} {dataset}"),
                compute: w[1].compute.expect("aligned"),
            });
        }
        let mut s = ScalingSeries {
            procedure,
            dataset,
            points: pts,
            trend: None,
        };
        s.trend = fit_trend(&s.xy());
        series.push(s);
    }
    Ok(Alignment { series, rejected })
}

/// Least-squares line through `(log10 compute, score)`; `None` for fewer
/// than two distinct compute values.
pub fn fit_trend(points: &[(f64, f64)]) -> Option<TrendFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(c, _)| c.log10()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|(_, s)| s).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(points).map(|(x, (_, y))| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = xs.iter().zip(points).map(|(x, (_, y))| y - (slope * x + intercept)).collect();
    Some(TrendFit {
        slope,
        intercept,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEntry {
    pub rank: usize,
    pub dataset: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub entries: Vec<RankEntry>,
    /// Adjacent pairs whose scores differ by at most the resolution.
    pub ties: Vec<(String, String)>,
    pub resolution: f64,
}

impl Ranking {
    pub fn order(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.dataset.clone()).collect()
    }
}

/// Relative spread allowed in N when ranking at one scale.
pub const SCALE_TOLERANCE: f64 = 0.05;
// absorbs decimal representation error in score differences
const TIE_SLACK: f64 = 1e-9;

/// Orders datasets by average score (descending, then by name). All points
/// must share D exactly and N within 5%. Adjacent entries within
/// `resolution` are reported as ties.
pub fn rank_datasets(points: &[RunPoint], resolution: f64) -> Result<Ranking, CompareError> {
    if points.is_empty() {
        return Err(CompareError::Empty("no points to rank".into()));
    }
    let mut n_min = f64::INFINITY;
    let mut n_max: f64 = 0.0;
    let mut tokens = BTreeSet::new();
    let mut datasets = BTreeSet::new();
    for p in points {
        p.validate().map_err(|m| CompareError::Malformed { line: 0, message: m })?;
        let n = p.params.expect("validated");
        n_min = n_min.min(n);
        n_max = n_max.max(n);
        tokens.insert(p.tokens.expect("validated").to_bits());
        if !datasets.insert(p.dataset.clone()) {
            return Err(CompareError::MixedScales(format!("dataset {} appears twice", p.dataset)));
        }
    }
    if tokens.len() > 1 {
        return Err(CompareError::MixedScales(format!("{} distinct token budgets", tokens.len())));
    }
    if n_max > n_min * (1.0 + SCALE_TOLERANCE) {
        return Err(CompareError::MixedScales(format!("params range {n_min:e}..{n_max:e} exceeds 5%")));
    }
    let mut sorted: Vec<&RunPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        b.average
            .partial_cmp(&a.average)
            .expect("finite")
            .then_with(|| a.dataset.cmp(&b.dataset))
    });
    let entries: Vec<RankEntry> = sorted
        .iter()
        .enumerate()
        .map(|(i, p)| RankEntry {
            rank: i + 1,
            dataset: p.dataset.clone(),
            score: p.average,
        })
        .collect();
    let ties = entries
        .windows(2)
        .filter(|w| (w[0].score - w[1].score).abs() <= resolution + TIE_SLACK)
        .map(|w| (w[0].dataset.clone(), w[1].dataset.clone()))
        .collect();
    Ok(Ranking {
        entries,
        ties,
        resolution,
    })
}

/// Kendall tau-a between two orderings of the same items, by pair counting.
pub fn kendall_tau(a: &[String], b: &[String]) -> Result<f64, CompareError> {
    let set_a: BTreeSet<&String> = a.iter().collect();
    let set_b: BTreeSet<&String> = b.iter().collect();
    if set_a != set_b || set_a.len() != a.len() || set_b.len() != b.len() {
        return Err(CompareError::DatasetMismatch(format!("{a:?} vs {b:?}")));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let pos_b: BTreeMap<&String, usize> = b.iter().enumerate().map(|(i, d)| (d, i)).collect();
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            // a ranks a[i] above a[j]
            score += if pos_b[&a[i]] < pos_b[&a[j]] { 1 } else { -1 };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Consistency {
    pub labels: Vec<String>,
    pub tau: Vec<Vec<f64>>,
    pub min_tau: f64,
}

/// Pairwise Kendall tau between rankings taken at different scales.
pub fn rank_consistency(rankings: &[(String, Vec<String>)]) -> Result<Consistency, CompareError> {
    if rankings.len() < 2 {
        return Err(CompareError::Empty("need at least two rankings".into()));
    }
    let k = rankings.len();
    let mut tau = vec![vec![1.0; k]; k];
    let mut min_tau: f64 = 1.0;
    for i in 0..k {
        for j in i + 1..k {
            let t = kendall_tau(&rankings[i].1, &rankings[j].1)?;
            tau[i][j] = t;
            tau[j][i] = t;
            min_tau = min_tau.min(t);
        }
    }
    Ok(Consistency {
        labels: rankings.iter().map(|(l, _)| l.clone()).collect(),
        tau,
        min_tau,
    })
}

/// `a` dominates `b`: no more compute, no lower average, better in one.
pub fn dominates(a: &RunPoint, b: &RunPoint) -> bool {
    let (Some(ca), Some(cb)) = (a.derived_compute(), b.derived_compute()) else {
        return false;
    };
    ca <= cb && a.average >= b.average && (ca < cb || a.average > b.average)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    pub point: String,
    pub compute: f64,
    pub average: f64,
    pub flagged: bool,
    pub dominated_by: Vec<String>,
}

/// Lists every point in `all` that dominates `all[index]`.
pub fn flag_suboptimal(index: usize, all: &[RunPoint]) -> DominanceReport {
    let p = &all[index];
    let dominated_by: Vec<String> = all
        .iter()
        .enumerate()
        .filter(|&(j, q)| j != index && dominates(q, p))
        .map(|(_, q)| q.label())
        .collect();
    DominanceReport {
        point: p.label(),
        compute: p.derived_compute().unwrap_or(f64::NAN),
        average: p.average,
        flagged: !dominated_by.is_empty(),
        dominated_by,
    }
}

pub fn flag_all(points: &[RunPoint]) -> Vec<DominanceReport> {
    (0..points.len()).map(|i| flag_suboptimal(i, points)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(model: &str, dataset: &str, n: f64, d: f64, avg: f64) -> RunPoint {
        RunPoint {
            model: model.into(),
            procedure: String::new(),
            dataset: dataset.into(),
            params: Some(n),
            tokens: Some(d),
            compute: None,
            reported_compute: None,
            average: avg,
            scores: BTreeMap::new(),
            scores_subset: false,
            provenance: Provenance::Internal,
        }
    }

    #[test]
    fn token_labels() {
        assert_eq!(format_tokens(300e9), "300B");
        assert_eq!(format_tokens(1e12), "1T");
        assert_eq!(format_tokens(2.0e12), "2T");
        assert_eq!(format_tokens(350e9), "350B");
    }

    #[test]
    fn fit_edge_cases() {
        assert!(fit_trend(&[(1e20, 0.5)]).is_none());
        let two = fit_trend(&[(1e20, 0.4), (1e22, 0.6)]).unwrap();
        assert!((two.slope - 0.1).abs() < 1e-12);
        assert!(two.residuals.iter().all(|r| r.abs() < 1e-12));
        let flat = fit_trend(&[(1e20, 0.5), (1e21, 0.5), (1e23, 0.5)]).unwrap();
        assert!(flat.slope.abs() < 1e-15);
        assert!(fit_trend(&[(1e20, 0.4), (1e20, 0.6)]).is_none());
    }

    #[test]
    fn adjacent_swap_tau() {
        let a: Vec<String> = (0..8).map(|i| format!("d{i}")).collect();
        let mut b = a.clone();
        b.swap(3, 4);
        assert!((kendall_tau(&a, &b).unwrap() - (1.0 - 2.0 / 28.0)).abs() < 1e-12);
        let rev: Vec<String> = a.iter().rev().cloned().collect();
        assert_eq!(kendall_tau(&a, &rev).unwrap(), -1.0);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert!(kendall_tau(&a, &a[..7]).is_err());
    }

    #[test]
    fn ranking_rejects_mixed_scales() {
        let a = pt("m", "A", 1.7e9, 1e12, 0.6);
        let b = pt("m", "B", 1.7e9, 3e11, 0.5);
        assert!(matches!(rank_datasets(&[a.clone(), b], 0.0), Err(CompareError::MixedScales(_))));
        let c = pt("m", "C", 1.3e9, 1e12, 0.5);
        assert!(matches!(rank_datasets(&[a.clone(), c], 0.0), Err(CompareError::MixedScales(_))));
        let single = rank_datasets(&[a], 0.0).unwrap();
        assert_eq!(single.order(), vec!["A"]);
    }

    #[test]
    fn exact_ties_break_by_name() {
        let r = rank_datasets(&[pt("m", "Z", 1e9, 1e10, 0.5), pt("m", "A", 1e9, 1e10, 0.5)], 0.0).unwrap();
        assert_eq!(r.order(), vec!["A", "Z"]);
        assert_eq!(r.ties, vec![("A".to_string(), "Z".to_string())]);
    }

    #[test]
    fn missing_params_are_rejected_with_report() {
        let mut p = pt("m", "A", 1e9, 1e10, 0.5);
        p.params = None;
        let a = align(&[p, pt("m", "A", 1e9, 2e10, 0.6)]).unwrap();
        assert_eq!(a.rejected.len(), 1);
        assert_eq!(a.series[0].points.len(), 1);
        let dup = align(&[pt("m", "A", 1e9, 1e10, 0.5), pt("m", "A", 1e9, 1e10, 0.6)]);
        assert!(matches!(dup, Err(CompareError::Duplicate { .. })));
    }

    #[test]
    fn minimum_compute_point_is_not_dominated_by_costlier_points() {
        let pts = vec![
            pt("a", "x", 1e9, 1e10, 0.3),
            pt("b", "x", 1e9, 1e11, 0.9),
            pt("c", "x", 1e9, 1e12, 0.95),
        ];
        assert!(!flag_suboptimal(0, &pts).flagged);
        assert!(!flag_suboptimal(0, &pts).dominated_by.contains(&"b x 100B".to_string()));
    }
}
