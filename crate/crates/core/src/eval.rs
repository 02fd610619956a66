//! Precision@k for next-diagnosis and intervention ranking, F-score for risk,
//! and drivers that run a model or the Markov baseline over a test set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{rank_codes, MarkovModel};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::network::{intervention_distributions, next_diagnosis_distributions, predict_risk, Model};

pub const DEFAULT_K_LIST: [usize; 3] = [1, 2, 3];
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `|top-k ∩ relevant| / k`.
pub fn precision_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if ranked.len() < k {
        return Err(Error::InvalidArgument(format!("need {k} predictions, got {}", ranked.len())));
    }
    let hits = ranked[..k].iter().filter(|c| relevant.contains(c)).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, zero when both are zero.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// F1 of binary predictions; needs at least one positive label.
pub fn f_score(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    let c = Confusion::from_pairs(predictions, labels)?;
    if c.tp + c.fn_ == 0 {
        return Err(Error::InvalidArgument("F-score is undefined without a positive label".into()));
    }
    Ok(c.f1())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub k: Option<usize>,
    /// `None` when undefined on this test set.
    pub value: Option<f64>,
    /// Items the metric averages over.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub predictor: String,
    pub metrics: Vec<Metric>,
    pub config: serde_json::Value,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn metric(&self, name: &str, k: Option<usize>) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name && m.k == k).and_then(|m| m.value)
    }

    /// Aligned text table; values as percentages with one decimal.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task {}  predictor {}", self.task, self.predictor);
        let _ = writeln!(out, "{:<16} {:>4} {:>8} {:>8}", "metric", "k", "value%", "n");
        for m in &self.metrics {
            let k = m.k.map_or("-".to_owned(), |k| k.to_string());
            let v = m.value.map_or("undef".to_owned(), |v| format!("{:.1}", 100.0 * v));
            let _ = writeln!(out, "{:<16} {:>4} {:>8} {:>8}", m.name, k, v, m.count);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// The whole report as one JSON line.
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// What ranks codes step by step.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a Model),
    Markov(&'a MarkovModel),
}

impl Predictor<'_> {
    fn name(&self) -> String {
        match self {
            Predictor::Model(m) => {
                let c = &m.config;
                format!("{} time={} pool={}", c.cell.name(), c.effective_time().name(), c.pooling.name())
            }
            Predictor::Markov(m) => format!("markov alpha={}", m.alpha),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RankTask {
    NextDiagnosis,
    Intervention,
}

/// Per-patient sums of Precision@k over scored steps, one entry per k.
fn patient_sums(
    predictor: Predictor,
    record: &PatientRecord,
    task: RankTask,
    k_list: &[usize],
) -> Result<(Vec<f64>, usize)> {
    let n = record.admissions.len();
    let mut sums = vec![0.0; k_list.len()];
    let mut count = 0;
    let rankings: Vec<(Vec<usize>, &[usize])> = match (predictor, task) {
        (Predictor::Model(m), RankTask::NextDiagnosis) => next_diagnosis_distributions(m, record)?
            .into_iter()
            .take(n - 1)
            .enumerate()
            .map(|(t, p)| (rank_codes(p.as_slice()), &record.admissions[t + 1].diagnoses[..]))
            .collect(),
        (Predictor::Model(m), RankTask::Intervention) => intervention_distributions(m, record)?
            .into_iter()
            .enumerate()
            .filter(|(t, _)| !record.admissions[*t].interventions.is_empty())
            .map(|(t, p)| (rank_codes(p.as_slice()), &record.admissions[t].interventions[..]))
            .collect(),
        (Predictor::Markov(mk), RankTask::NextDiagnosis) => (0..n - 1)
            .map(|t| {
                Ok((rank_codes(&mk.scores(&record.admissions[t].diagnoses)?), &record.admissions[t + 1].diagnoses[..]))
            })
            .collect::<Result<_>>()?,
        (Predictor::Markov(mk), RankTask::Intervention) => (0..n)
            .filter(|&t| !record.admissions[t].interventions.is_empty())
            .map(|t| {
                let source = if t == 0 { &[][..] } else { &record.admissions[t - 1].interventions[..] };
                let scores =
                    if source.is_empty() { vec![1.0 / mk.n_codes() as f64; mk.n_codes()] } else { mk.scores(source)? };
                Ok((rank_codes(&scores), &record.admissions[t].interventions[..]))
            })
            .collect::<Result<_>>()?,
    };
    for (ranked, relevant) in rankings {
        for (s, &k) in sums.iter_mut().zip(k_list) {
            *s += precision_at_k(&ranked, relevant, k)?;
        }
        count += 1;
    }
    Ok((sums, count))
}

fn evaluate_ranking(
    predictor: Predictor,
    test_set: &[PatientRecord],
    k_list: &[usize],
    task: RankTask,
) -> Result<EvalReport> {
    if k_list.is_empty() {
        return Err(Error::InvalidArgument("k list is empty".into()));
    }
    let per_patient: Vec<(Vec<f64>, usize)> =
        test_set.par_iter().map(|r| patient_sums(predictor, r, task, k_list)).collect::<Result<_>>()?;
    let mut sums = vec![0.0; k_list.len()];
    let mut count = 0;
    for (s, c) in per_patient {
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        count += c;
    }
    let mut warnings = Vec::new();
    if count == 0 {
        warnings.push("no scorable steps in the test set".to_owned());
    }
    let metrics = k_list
        .iter()
        .zip(sums)
        .map(|(&k, s)| Metric {
            name: "precision@k".into(),
            k: Some(k),
            value: (count > 0).then(|| s / count as f64),
            count,
        })
        .collect();
    let task_name = match task {
        RankTask::NextDiagnosis => "next-diagnosis",
        RankTask::Intervention => "intervention",
    };
    Ok(EvalReport {
        task: task_name.into(),
        predictor: predictor.name(),
        metrics,
        config: serde_json::json!({ "k_list": k_list, "averaging": "per-step" }),
        warnings,
    })
}

/// Mean Precision@k of next-admission diagnoses over every non-final
/// admission of every test patient.
pub fn evaluate_progression(predictor: Predictor, test_set: &[PatientRecord], k_list: &[usize]) -> Result<EvalReport> {
    evaluate_ranking(predictor, test_set, k_list, RankTask::NextDiagnosis)
}

/// Mean Precision@k of current-admission interventions over admissions that
/// have any.
pub fn evaluate_interventions(
    predictor: Predictor,
    test_set: &[PatientRecord],
    k_list: &[usize],
) -> Result<EvalReport> {
    evaluate_ranking(predictor, test_set, k_list, RankTask::Intervention)
}

/// Risk probabilities for each record's history, in input order.
pub fn risk_probabilities(model: &Model, test_set: &[PatientRecord]) -> Result<Vec<f64>> {
    test_set.par_iter().map(|r| predict_risk(model, r)).collect()
}

/// F-score of `p >= threshold` calls against the risk labels.
pub fn risk_report(probs: &[f64], labels: &[bool], threshold: f64, predictor: String) -> Result<EvalReport> {
    let calls: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let c = Confusion::from_pairs(&calls, labels)?;
    let n = labels.len();
    let positives = c.tp + c.fn_;
    let mut warnings = Vec::new();
    if positives == 0 {
        warnings.push("no positive labels in the test set; F-score is undefined".to_owned());
    }
    let defined = |v: f64| (positives > 0).then_some(v);
    let metrics = vec![
        Metric { name: "f-score".into(), k: None, value: defined(c.f1()), count: n },
        Metric {
            name: "precision".into(),
            k: None,
            value: (c.tp + c.fp > 0).then(|| c.precision()),
            count: c.tp + c.fp,
        },
        Metric { name: "recall".into(), k: None, value: defined(c.recall()), count: positives },
    ];
    Ok(EvalReport {
        task: "risk".into(),
        predictor,
        metrics,
        config: serde_json::json!({ "threshold": threshold, "boundary": ">=", "confusion": c }),
        warnings,
    })
}

/// Scores every test patient's history up to its prediction point.
pub fn evaluate_risk(model: &Model, test_set: &[PatientRecord], threshold: f64) -> Result<EvalReport> {
    let labels = test_set
        .iter()
        .map(|r| r.risk_label.ok_or_else(|| Error::record(&r.patient_id, "risk label missing")))
        .collect::<Result<Vec<bool>>>()?;
    if let Some(r) = test_set.iter().find(|r| r.prediction_point.is_none()) {
        return Err(Error::record(&r.patient_id, "prediction point not set"));
    }
    let probs = risk_probabilities(model, test_set)?;
    risk_report(&probs, &labels, threshold, Predictor::Model(model).name())
}
