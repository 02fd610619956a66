//! Memoryless first-order Markov predictor over code sets.
//!
//! Every (code at `t-1`, code at `t`) pair of consecutive admissions adds one
//! count; the next-admission score of code `i` given the current set `D` is
//! the average of the smoothed transition rows of the codes in `D`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CodedAdmission, PatientRecord};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovModel {
    n_codes: usize,
    /// Row-major `n × n`; row `j` counts transitions out of code `j`.
    counts: Vec<u64>,
    row_totals: Vec<u64>,
    pub alpha: f64,
}

impl MarkovModel {
    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.n_codes + to]
    }

    pub fn row_total(&self, from: usize) -> u64 {
        self.row_totals[from]
    }

    /// `(count + α) / (total + α n)`; a row with no mass at all is uniform.
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        let denom = self.row_totals[from] as f64 + self.alpha * self.n_codes as f64;
        if denom == 0.0 {
            return 1.0 / self.n_codes as f64;
        }
        (self.count(from, to) as f64 + self.alpha) / denom
    }

    pub fn row(&self, from: usize) -> Vec<f64> {
        (0..self.n_codes).map(|to| self.probability(from, to)).collect()
    }

    /// `Q(i) = (1/|D|) Σ_{j∈D} P(i | j)`.
    pub fn scores(&self, current: &[usize]) -> Result<Vec<f64>> {
        if current.is_empty() {
            return Err(Error::InvalidArgument("current code set is empty".into()));
        }
        if let Some(&bad) = current.iter().find(|&&c| c >= self.n_codes) {
            return Err(Error::InvalidArgument(format!("code {bad} out of range for {} codes", self.n_codes)));
        }
        let mut q = vec![0.0; self.n_codes];
        for &j in current {
            q.iter_mut().zip(self.row(j)).for_each(|(q, p)| *q += p);
        }
        let n = current.len() as f64;
        q.iter_mut().for_each(|v| *v /= n);
        Ok(q)
    }
}

/// Codes sorted by descending score, ties by ascending index.
pub fn rank_codes(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn fit_by(
    records: &[PatientRecord],
    n_codes: usize,
    alpha: f64,
    codes: impl Fn(&CodedAdmission) -> &[usize] + Sync,
) -> Result<MarkovModel> {
    if records.is_empty() {
        return Err(Error::TooFewRecords { needed: 1, got: 0 });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    // Integer counts merge associatively, so the parallel fold is exact.
    let counts = records
        .par_iter()
        .try_fold(
            || vec![0u64; n_codes * n_codes],
            |mut acc, r| {
                for pair in r.admissions.windows(2) {
                    for &j in codes(&pair[0]) {
                        for &i in codes(&pair[1]) {
                            if i >= n_codes || j >= n_codes {
                                return Err(Error::record(&r.patient_id, format!("code out of range for {n_codes}")));
                            }
                            acc[j * n_codes + i] += 1;
                        }
                    }
                }
                Ok(acc)
            },
        )
        .try_reduce(
            || vec![0u64; n_codes * n_codes],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let row_totals = counts.chunks(n_codes.max(1)).map(|r| r.iter().sum()).collect();
    Ok(MarkovModel { n_codes, counts, row_totals, alpha })
}

/// Diagnosis-to-diagnosis transitions between consecutive admissions.
pub fn fit_markov(records: &[PatientRecord], n_diagnoses: usize, alpha: f64) -> Result<MarkovModel> {
    fit_by(records, n_diagnoses, alpha, |a| &a.diagnoses)
}

/// Intervention-to-intervention transitions between consecutive admissions.
pub fn fit_intervention_markov(records: &[PatientRecord], n_interventions: usize, alpha: f64) -> Result<MarkovModel> {
    fit_by(records, n_interventions, alpha, |a| &a.interventions)
}

/// Top `k` codes for the admission after one with codes `current`.
pub fn predict_next(model: &MarkovModel, current: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut ranked = rank_codes(&model.scores(current)?);
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AdmissionMethod;
    use proptest::prelude::*;

    fn rec(id: &str, sets: &[&[usize]]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            admissions: sets
                .iter()
                .enumerate()
                .map(|(t, d)| CodedAdmission {
                    time_days: t as f64,
                    method: AdmissionMethod::Planned,
                    diagnoses: d.to_vec(),
                    interventions: vec![],
                })
                .collect(),
            risk_label: None,
            prediction_point: None,
        }
    }

    #[test]
    fn hand_counted_transitions() {
        let records = [rec("a", &[&[1], &[2], &[1], &[2]]), rec("b", &[&[1], &[3]])];
        let m = fit_markov(&records, 4, 0.0).unwrap();
        assert_eq!(m.row_total(1), 3);
        assert!((m.probability(1, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.probability(1, 3) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.probability(1, 0), 0.0);
    }

    #[test]
    fn heavy_smoothing_tends_to_uniform() {
        let m = fit_markov(&[rec("a", &[&[0], &[1], &[1]])], 3, 1e12).unwrap();
        for p in m.row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unseen_source_is_uniform() {
        let m = fit_markov(&[rec("a", &[&[0], &[1]])], 3, 0.5).unwrap();
        assert_eq!(m.row(2), vec![1.0 / 3.0; 3]);
        let raw = fit_markov(&[rec("a", &[&[0], &[1]])], 3, 0.0).unwrap();
        assert_eq!(raw.row(2), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn singleton_scores_equal_the_row() {
        let m = fit_markov(&[rec("a", &[&[0, 1], &[1, 2], &[0]])], 3, 0.1).unwrap();
        assert_eq!(m.scores(&[1]).unwrap(), m.row(1));
        assert!(m.scores(&[]).is_err());
        assert!(m.scores(&[3]).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank_codes(&[0.2, 0.4, 0.2, 0.4]), vec![1, 3, 0, 2]);
        let m = fit_markov(&[rec("a", &[&[0], &[1]])], 4, 0.0).unwrap();
        assert_eq!(predict_next(&m, &[2], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn empty_training_set_or_bad_alpha_is_rejected() {
        assert!(matches!(fit_markov(&[], 3, 0.1), Err(Error::TooFewRecords { .. })));
        assert!(fit_markov(&[rec("a", &[&[0], &[1]])], 3, -1.0).is_err());
        assert!(fit_markov(&[rec("a", &[&[0], &[5]])], 3, 0.1).is_err());
    }

    #[test]
    fn intervention_transitions() {
        let mut r = rec("a", &[&[0], &[0], &[0]]);
        r.admissions[0].interventions = vec![1];
        r.admissions[1].interventions = vec![0];
        let m = fit_intervention_markov(&[r], 2, 0.0).unwrap();
        assert_eq!(m.count(1, 0), 1);
        assert_eq!(m.row_total(0), 0);
    }

    proptest! {
        #[test]
        fn scores_are_a_distribution(
            seqs in prop::collection::vec(prop::collection::vec(prop::collection::btree_set(0usize..6, 1..4), 2..5), 1..6),
            current in prop::collection::btree_set(0usize..6, 1..4),
            alpha in 0.0f64..2.0,
        ) {
            let records: Vec<PatientRecord> = seqs.iter().enumerate().map(|(i, s)| {
                let sets: Vec<Vec<usize>> = s.iter().map(|b| b.iter().copied().collect()).collect();
                let refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
                rec(&format!("p{i}"), &refs)
            }).collect();
            let m = fit_markov(&records, 6, alpha).unwrap();
            let current: Vec<usize> = current.into_iter().collect();
            let q = m.scores(&current).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(q.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let mut reversed = records.clone();
            reversed.reverse();
            prop_assert_eq!(fit_markov(&reversed, 6, alpha).unwrap(), m);
        }
    }
}
