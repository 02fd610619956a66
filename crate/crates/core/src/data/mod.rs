//! Patient records, code vocabularies, JSONL ingestion and dataset splits.

mod generator;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Rng;

pub use generator::{
    choose_prediction_points, generate_cohort, ConditionEffect, ConditionKind, GeneratedCohort, GeneratorConfig,
    HazardTrace,
};

/// Days per month used for every month-denominated quantity (365.25 / 12).
pub const DAYS_PER_MONTH: f64 = 30.4375;

pub fn months_to_days(months: f64) -> f64 {
    months * DAYS_PER_MONTH
}

pub fn days_to_months(days: f64) -> f64 {
    days / DAYS_PER_MONTH
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdmissionMethod {
    Unplanned = 1,
    Planned = 2,
}

impl AdmissionMethod {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::Unplanned),
            2 => Some(Self::Planned),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// The flag as the real number that scales gates and recency weights.
    pub fn weight(self) -> f64 {
        f64::from(self.code())
    }
}

/// One admission, with codes already mapped through a [`Vocabulary`].
#[derive(Clone, Debug, PartialEq)]
pub struct CodedAdmission {
    pub time_days: f64,
    pub method: AdmissionMethod,
    pub diagnoses: Vec<usize>,
    pub interventions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub admissions: Vec<CodedAdmission>,
    pub risk_label: Option<bool>,
    pub prediction_point: Option<usize>,
}

impl PatientRecord {
    /// Days between admission `t` and its predecessor; zero for the first.
    pub fn gap_days(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.admissions[t].time_days - self.admissions[t - 1].time_days
        }
    }

    /// The record cut after the prediction point, with the label kept.
    pub fn history(&self) -> Option<PatientRecord> {
        let p = self.prediction_point?;
        Some(PatientRecord {
            patient_id: self.patient_id.clone(),
            admissions: self.admissions[..=p].to_vec(),
            risk_label: self.risk_label,
            prediction_point: Some(p),
        })
    }

    /// Number of unplanned admissions in `(t_pred, t_pred + months]`.
    pub fn unplanned_within(&self, months: f64) -> Option<usize> {
        let p = self.prediction_point?;
        let start = self.admissions[p].time_days;
        let end = start + months_to_days(months);
        Some(
            self.admissions[p + 1..]
                .iter()
                .filter(|a| a.method == AdmissionMethod::Unplanned && a.time_days > start && a.time_days <= end)
                .count(),
        )
    }

    /// Checks the record invariants against vocabulary sizes.
    pub fn validate(&self, n_diagnoses: usize, n_interventions: usize) -> Result<()> {
        let id = &self.patient_id;
        if self.admissions.len() < 2 {
            return Err(Error::record(id, format!("{} admission(s); at least 2 required", self.admissions.len())));
        }
        let mut prev = 0.0;
        for (t, adm) in self.admissions.iter().enumerate() {
            if !adm.time_days.is_finite() || adm.time_days < 0.0 {
                return Err(Error::record(id, format!("admission {t}: invalid time_days {}", adm.time_days)));
            }
            if t > 0 && adm.time_days < prev {
                return Err(Error::record(id, format!("admission {t}: timestamps not sorted")));
            }
            prev = adm.time_days;
            if adm.diagnoses.is_empty() {
                return Err(Error::record(id, format!("admission {t}: empty diagnosis set")));
            }
            check_code_set(id, t, "diagnosis", &adm.diagnoses, n_diagnoses)?;
            check_code_set(id, t, "intervention", &adm.interventions, n_interventions)?;
        }
        if let Some(p) = self.prediction_point {
            if p >= self.admissions.len() {
                return Err(Error::record(id, format!("prediction_point {p} out of range")));
            }
        }
        Ok(())
    }
}

fn check_code_set(id: &str, t: usize, kind: &str, codes: &[usize], limit: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &c in codes {
        if c >= limit {
            return Err(Error::record(id, format!("admission {t}: {kind} index {c} out of range")));
        }
        if !seen.insert(c) {
            return Err(Error::record(id, format!("admission {t}: duplicate {kind} code")));
        }
    }
    Ok(())
}

/// Token lists for both code families; a token's index is its position.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub diagnosis_codes: Vec<String>,
    pub intervention_codes: Vec<String>,
    #[serde(skip)]
    index: Option<VocabIndex>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct VocabIndex {
    diagnoses: HashMap<String, usize>,
    interventions: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(diagnosis_codes: Vec<String>, intervention_codes: Vec<String>) -> Result<Self> {
        let mut vocab = Self { diagnosis_codes, intervention_codes, index: None };
        vocab.build_index()?;
        Ok(vocab)
    }

    fn build_index(&mut self) -> Result<()> {
        let mut diagnoses = HashMap::new();
        for (i, c) in self.diagnosis_codes.iter().enumerate() {
            if diagnoses.insert(c.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate diagnosis token {c:?}")));
            }
        }
        let mut interventions = HashMap::new();
        for (i, c) in self.intervention_codes.iter().enumerate() {
            if interventions.insert(c.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate intervention token {c:?}")));
            }
        }
        self.index = Some(VocabIndex { diagnoses, interventions });
        Ok(())
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        self.build_index()?;
        Ok(self)
    }

    pub fn n_diagnoses(&self) -> usize {
        self.diagnosis_codes.len()
    }

    pub fn n_interventions(&self) -> usize {
        self.intervention_codes.len()
    }

    pub fn diagnosis_index(&self, token: &str) -> Option<usize> {
        self.index.as_ref()?.diagnoses.get(token).copied()
    }

    pub fn intervention_index(&self, token: &str) -> Option<usize> {
        self.index.as_ref()?.interventions.get(token).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdmission {
    time_days: f64,
    method: u8,
    diagnoses: Vec<String>,
    #[serde(default)]
    interventions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    patient_id: String,
    admissions: Vec<RawAdmission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    risk_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prediction_point: Option<usize>,
}

fn read_raw(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push((i + 1, raw));
    }
    Ok(out)
}

fn code_raw(raw: RawRecord, vocab: &Vocabulary) -> Result<PatientRecord> {
    let id = raw.patient_id.clone();
    let mut admissions = Vec::with_capacity(raw.admissions.len());
    for (t, a) in raw.admissions.into_iter().enumerate() {
        let method = AdmissionMethod::from_code(a.method)
            .ok_or_else(|| Error::record(&id, format!("admission {t}: method must be 1 or 2, got {}", a.method)))?;
        let diagnoses = a
            .diagnoses
            .iter()
            .map(|c| {
                vocab.diagnosis_index(c).ok_or_else(|| Error::record(&id, format!("unknown diagnosis code {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let interventions = a
            .interventions
            .iter()
            .map(|c| {
                vocab
                    .intervention_index(c)
                    .ok_or_else(|| Error::record(&id, format!("unknown intervention code {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        admissions.push(CodedAdmission { time_days: a.time_days, method, diagnoses, interventions });
    }
    let risk_label = match raw.risk_label {
        None => None,
        Some(0) => Some(false),
        Some(1) => Some(true),
        Some(v) => return Err(Error::record(&id, format!("risk_label must be 0 or 1, got {v}"))),
    };
    let record = PatientRecord { patient_id: id, admissions, risk_label, prediction_point: raw.prediction_point };
    record.validate(vocab.n_diagnoses(), vocab.n_interventions())?;
    Ok(record)
}

/// Reads one patient per line, building the vocabulary from every token in
/// the file (sorted, so indices do not depend on line order).
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<(Vec<PatientRecord>, Vocabulary)> {
    let (mut sets, vocab) = load_jsonl_many(&[path.as_ref()])?;
    Ok((sets.pop().expect("one file"), vocab))
}

/// Reads several files against one vocabulary built from the tokens of all
/// of them.
pub fn load_jsonl_many<P: AsRef<Path>>(paths: &[P]) -> Result<(Vec<Vec<PatientRecord>>, Vocabulary)> {
    let raws = paths.iter().map(|p| read_raw(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let mut diag = BTreeSet::new();
    let mut interv = BTreeSet::new();
    for (_, r) in raws.iter().flatten() {
        for a in &r.admissions {
            diag.extend(a.diagnoses.iter().cloned());
            interv.extend(a.interventions.iter().cloned());
        }
    }
    let vocab = Vocabulary::new(diag.into_iter().collect(), interv.into_iter().collect())?;
    let sets = raws
        .into_iter()
        .map(|file| file.into_iter().map(|(_, r)| code_raw(r, &vocab)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok((sets, vocab))
}

/// Reads records against a fixed vocabulary; unknown tokens are errors.
pub fn load_jsonl_with_vocab(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<PatientRecord>> {
    read_raw(path.as_ref())?.into_iter().map(|(_, r)| code_raw(r, vocab)).collect()
}

/// Parses a single JSONL line against a fixed vocabulary.
pub fn parse_record(line: &str, vocab: &Vocabulary) -> Result<PatientRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    code_raw(raw, vocab)
}

pub fn record_to_json(record: &PatientRecord, vocab: &Vocabulary) -> String {
    let raw = RawRecord {
        patient_id: record.patient_id.clone(),
        admissions: record
            .admissions
            .iter()
            .map(|a| RawAdmission {
                time_days: a.time_days,
                method: a.method.code(),
                diagnoses: a.diagnoses.iter().map(|&c| vocab.diagnosis_codes[c].clone()).collect(),
                interventions: a.interventions.iter().map(|&c| vocab.intervention_codes[c].clone()).collect(),
            })
            .collect(),
        risk_label: record.risk_label.map(u8::from),
        prediction_point: record.prediction_point,
    };
    serde_json::to_string(&raw).expect("records serialize")
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[PatientRecord], vocab: &Vocabulary) -> std::io::Result<()> {
    for r in records {
        out.write_all(record_to_json(r, vocab).as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<PatientRecord>,
    pub valid: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Random 2/3, 1/6, 1/6 partition. Each part keeps input order.
pub fn split(records: &[PatientRecord], seed: u64) -> Result<Split> {
    let n = records.len();
    if n < 6 {
        return Err(Error::TooFewRecords { needed: 6, got: n });
    }
    let n_train = (2 * n).div_ceil(3);
    let rest = n - n_train;
    let n_valid = rest.div_ceil(2);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split { train: take(0..n_train), valid: take(n_train..n_train + n_valid), test: take(n_train + n_valid..n) })
}

/// At least three unplanned readmissions within `(t_pred, t_pred + months]`.
pub fn label_high_risk(record: &PatientRecord, months: f64) -> Result<bool> {
    record
        .unplanned_within(months)
        .map(|n| n >= 3)
        .ok_or_else(|| Error::record(&record.patient_id, "prediction point not set"))
}
