//! Human-centered evaluation arithmetic: Likert normalization, per-metric
//! aggregation, Pearson correlation, and accuracy comparisons.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    OverallQuality,
    Understandability,
    Trustworthiness,
    Satisfaction,
    Sufficiency,
    Completeness,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::OverallQuality,
        Metric::Understandability,
        Metric::Trustworthiness,
        Metric::Satisfaction,
        Metric::Sufficiency,
        Metric::Completeness,
        Metric::Accuracy,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::OverallQuality => "overall_quality",
            Metric::Understandability => "understandability",
            Metric::Trustworthiness => "trustworthiness",
            Metric::Satisfaction => "satisfaction",
            Metric::Sufficiency => "sufficiency",
            Metric::Completeness => "completeness",
            Metric::Accuracy => "accuracy",
        }
    }

    /// The statement a reviewer rates for this metric.
    pub fn statement(self) -> &'static str {
        match self {
            Metric::OverallQuality => "This is a good explanation",
            Metric::Understandability => "I understand this explanation of how the AI model works.",
            Metric::Trustworthiness => "I trust this explanation of how the AI model works.",
            Metric::Satisfaction => "This explanation of how the AI model works is satisfying.",
            Metric::Sufficiency => {
                "This explanation of how the AI model works has sufficient detail."
            }
            Metric::Completeness => "This explanation of how the AI model works seems complete.",
            Metric::Accuracy => "This explanation of how the AI model works is accurate.",
        }
    }

    pub fn from_key(key: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.key() == key)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Three-point ratings (1 disagree, 2 neutral, 3 agree) for all seven
/// metrics. Every field is required when deserializing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertScores {
    pub overall_quality: u8,
    pub understandability: u8,
    pub trustworthiness: u8,
    pub satisfaction: u8,
    pub sufficiency: u8,
    pub completeness: u8,
    pub accuracy: u8,
}

impl LikertScores {
    pub fn uniform(v: u8) -> Self {
        Self {
            overall_quality: v,
            understandability: v,
            trustworthiness: v,
            satisfaction: v,
            sufficiency: v,
            completeness: v,
            accuracy: v,
        }
    }

    pub fn get(&self, m: Metric) -> u8 {
        match m {
            Metric::OverallQuality => self.overall_quality,
            Metric::Understandability => self.understandability,
            Metric::Trustworthiness => self.trustworthiness,
            Metric::Satisfaction => self.satisfaction,
            Metric::Sufficiency => self.sufficiency,
            Metric::Completeness => self.completeness,
            Metric::Accuracy => self.accuracy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Metric::ALL {
            let v = self.get(m);
            if !(1..=3).contains(&v) {
                return Err(Error::invalid(format!(
                    "{m} rating {v} is not in {{1, 2, 3}}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertResponse {
    pub evaluator: String,
    pub instance: String,
    #[serde(flatten)]
    pub scores: LikertScores,
}

/// Maps {1, 2, 3} onto {0, 0.5, 1}.
pub fn normalize_likert(v: u8) -> Result<f64> {
    match v {
        1..=3 => Ok(f64::from(v - 1) / 2.0),
        _ => Err(Error::invalid(format!(
            "Likert value {v} is not in {{1, 2, 3}}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub median: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    Ok(Summary {
        count: values.len(),
        mean,
        variance,
        median,
    })
}

pub fn normalized_values(responses: &[LikertResponse], metric: Metric) -> Result<Vec<f64>> {
    responses
        .iter()
        .map(|r| normalize_likert(r.scores.get(metric)))
        .collect()
}

/// Statistics of one metric over normalized ratings.
pub fn aggregate(responses: &[LikertResponse], metric: Metric) -> Result<Summary> {
    if responses.is_empty() {
        return Err(Error::invalid(format!("no responses for {metric}")));
    }
    summarize(&normalized_values(responses, metric)?)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("pearson needs equal-length samples"));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(
            "pearson is undefined for a zero-variance sample",
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of two metrics across responses.
pub fn metric_correlation(responses: &[LikertResponse], a: Metric, b: Metric) -> Result<f64> {
    pearson(
        &normalized_values(responses, a)?,
        &normalized_values(responses, b)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub model: String,
    pub vanilla_correct: u32,
    pub enhanced_correct: u32,
    pub total: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDelta {
    pub model: String,
    pub vanilla: f64,
    pub enhanced: f64,
    pub delta: f64,
    pub max_delta: bool,
}

/// Per-model accuracies and `enhanced − vanilla`; every model sharing the
/// largest delta is flagged.
pub fn accuracy_compare(results: &[AccuracyResult]) -> Result<Vec<AccuracyDelta>> {
    let mut out = results
        .iter()
        .map(|r| {
            if r.total == 0 {
                return Err(Error::invalid(format!(
                    "model {} has no questions",
                    r.model
                )));
            }
            if r.vanilla_correct > r.total || r.enhanced_correct > r.total {
                return Err(Error::invalid(format!(
                    "model {} has more correct than total",
                    r.model
                )));
            }
            let t = f64::from(r.total);
            let vanilla = f64::from(r.vanilla_correct) / t;
            let enhanced = f64::from(r.enhanced_correct) / t;
            Ok(AccuracyDelta {
                model: r.model.clone(),
                vanilla,
                enhanced,
                delta: enhanced - vanilla,
                max_delta: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(best) = out.iter().map(|d| d.delta).max_by(f64::total_cmp) {
        for d in &mut out {
            d.max_delta = d.delta == best;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub a: Metric,
    pub b: Metric,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub responses: usize,
    pub metrics: BTreeMap<Metric, Summary>,
    pub correlations: Vec<Correlation>,
    pub accuracy: Vec<AccuracyDelta>,
}

pub fn build_report(
    responses: &[LikertResponse],
    correlate: &[(Metric, Metric)],
    accuracy: &[AccuracyResult],
) -> Result<EvalReport> {
    for r in responses {
        r.scores.validate()?;
    }
    let metrics = Metric::ALL
        .into_iter()
        .map(|m| Ok((m, aggregate(responses, m)?)))
        .collect::<Result<_>>()?;
    let correlations = correlate
        .iter()
        .map(|&(a, b)| {
            Ok(Correlation {
                a,
                b,
                rho: metric_correlation(responses, a, b)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        responses: responses.len(),
        metrics,
        correlations,
        accuracy: accuracy_compare(accuracy)?,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "responses: {}", self.responses)?;
        writeln!(
            f,
            "{:<18} {:>6} {:>9} {:>7}",
            "metric", "mean", "variance", "median"
        )?;
        for (m, s) in &self.metrics {
            writeln!(
                f,
                "{:<18} {:>6.2} {:>9.4} {:>7.2}",
                m.key(),
                s.mean,
                s.variance,
                s.median
            )?;
        }
        for c in &self.correlations {
            writeln!(f, "pearson({}, {}) = {:.4}", c.a, c.b, c.rho)?;
        }
        if !self.accuracy.is_empty() {
            writeln!(
                f,
                "{:<16} {:>8} {:>9} {:>7}",
                "model", "vanilla", "enhanced", "delta"
            )?;
            for d in &self.accuracy {
                writeln!(
                    f,
                    "{:<16} {:>8.2} {:>9.2} {:>+7.2}{}",
                    d.model,
                    d.vanilla,
                    d.enhanced,
                    d.delta,
                    if d.max_delta { "  *" } else { "" }
                )?;
            }
        }
        Ok(())
    }
}

pub fn read_responses(reader: impl BufRead) -> Result<Vec<LikertResponse>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LikertResponse = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        r.scores.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(v: u8) -> LikertResponse {
        LikertResponse {
            evaluator: "e".into(),
            instance: "i".into(),
            scores: LikertScores::uniform(v),
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_likert(1).unwrap(), 0.0);
        assert_eq!(normalize_likert(2).unwrap(), 0.5);
        assert_eq!(normalize_likert(3).unwrap(), 1.0);
        assert!(normalize_likert(0).is_err());
        assert!(normalize_likert(4).is_err());
    }

    #[test]
    fn aggregate_hand_values() {
        let s = aggregate(&[resp(3), resp(3)], Metric::Accuracy).unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 0.0));
        let s = aggregate(&[resp(1), resp(2), resp(3)], Metric::Accuracy).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.variance - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(s.median, 0.5);
        assert!(aggregate(&[], Metric::Accuracy).is_err());
    }

    #[test]
    fn pearson_extremes_and_errors() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 4]).is_err());
        assert!(pearson(&x, &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn accuracy_headline_gap() {
        let d = accuracy_compare(&[AccuracyResult {
            model: "m".into(),
            vanilla_correct: 10,
            enhanced_correct: 14,
            total: 20,
        }])
        .unwrap();
        assert!((d[0].delta - 0.20).abs() < 1e-12);
        assert!(d[0].max_delta);
        let same = accuracy_compare(&[AccuracyResult {
            model: "m".into(),
            vanilla_correct: 7,
            enhanced_correct: 7,
            total: 20,
        }])
        .unwrap();
        assert_eq!(same[0].delta, 0.0);
    }

    #[test]
    fn partial_likert_body_is_rejected() {
        let partial = r#"{"evaluator":"e","instance":"i","overall_quality":3}"#;
        assert!(serde_json::from_str::<LikertResponse>(partial).is_err());
        let full = r#"{"evaluator":"e","instance":"i","overall_quality":3,"understandability":2,"trustworthiness":1,"satisfaction":3,"sufficiency":3,"completeness":2,"accuracy":3}"#;
        let r: LikertResponse = serde_json::from_str(full).unwrap();
        assert_eq!(r.scores.trustworthiness, 1);
        assert!(read_responses(full.replace(":1,", ":4,").as_bytes()).is_err());
    }

    #[test]
    fn report_renders() {
        let rs = vec![resp(1), resp(2), resp(3)];
        let rep = build_report(
            &rs,
            &[(Metric::Trustworthiness, Metric::Understandability)],
            &[],
        )
        .unwrap();
        assert!((rep.correlations[0].rho - 1.0).abs() < 1e-12);
        let text = rep.to_string();
        assert!(text.contains("overall_quality"));
    }
}
