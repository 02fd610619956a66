//! Synthetic cohorts with planted long-range, time-decaying and
//! intervention-moderated structure.
//!
//! Each patient has a latent timeline drawn before any admission is emitted:
//!
//! * a routine (planned) visit backbone: truncated-geometric visit count,
//!   log-normal gaps;
//! * optionally one chronic condition which, from the first planned visit
//!   that records its code, permanently raises the unplanned-admission hazard;
//! * acute episodes (Poisson onsets) whose hazard contribution halves every
//!   `acute_half_life_days`;
//! * treatments, given at planned visits where the condition is diagnosed,
//!   each multiplying that condition's hazard contribution by
//!   `intervention_reduction`.
//!
//! Unplanned admissions are an inhomogeneous Poisson process driven by the
//! resulting hazard, so the probability of at least one unplanned admission in
//! any window has the closed form `1 - exp(-Λ)`; [`HazardTrace::cumulative`]
//! evaluates `Λ` exactly and the generator reports it alongside each label.
//!
//! Diagnosis codes come in three groups: chronic codes, acute codes, and
//! background codes split across latent patient clusters. Intervention codes
//! are treatment codes (one per condition), stabilisation codes (one per acute
//! condition, given at unplanned admissions with no hazard effect), and one
//! generic code per cluster.

use serde::{Deserialize, Serialize};

use super::{months_to_days, AdmissionMethod, CodedAdmission, PatientRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::Rng;

const MAX_CODES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_diagnoses: usize,
    pub n_clusters: usize,
    pub n_chronic: usize,
    pub n_acute: usize,
    /// Mean number of planned visits (truncated geometric, minimum 2).
    pub mean_admissions: f64,
    /// Log-normal gap parameters for planned visits, in log-days.
    pub gap_log_mu: f64,
    pub gap_log_sigma: f64,
    /// Probability of at least one unplanned admission over the label
    /// horizon for a patient with no conditions.
    pub baseline_risk: f64,
    pub chronic_prevalence: f64,
    pub chronic_boost: f64,
    pub acute_rate_per_year: f64,
    pub acute_boost: f64,
    pub acute_half_life_days: f64,
    pub intervention_reduction: f64,
    pub treatment_prob: f64,
    /// Window after onset during which a chronic code keeps being recorded.
    pub chronic_horizon_days: f64,
    /// Probability that an active condition is recorded at an admission.
    pub recurrence_prob: f64,
    /// Probability that the patient's primary background code is recorded.
    pub primary_prob: f64,
    pub label_horizon_months: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            n_diagnoses: 40,
            n_clusters: 4,
            n_chronic: 4,
            n_acute: 8,
            mean_admissions: 8.0,
            gap_log_mu: 90f64.ln(),
            gap_log_sigma: 0.9,
            baseline_risk: 0.1,
            chronic_prevalence: 0.3,
            chronic_boost: 10.0,
            acute_rate_per_year: 0.6,
            acute_boost: 30.0,
            acute_half_life_days: 240.0,
            intervention_reduction: 0.35,
            treatment_prob: 0.5,
            chronic_horizon_days: 540.0,
            recurrence_prob: 0.85,
            primary_prob: 0.55,
            label_horizon_months: 12.0,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn n_conditions(&self) -> usize {
        self.n_chronic + self.n_acute
    }

    fn n_background(&self) -> usize {
        self.n_diagnoses - self.n_conditions()
    }

    pub fn n_interventions(&self) -> usize {
        self.n_conditions() + self.n_acute + self.n_clusters
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if self.n_clusters == 0 || self.n_background() < self.n_clusters || self.n_diagnoses <= self.n_conditions() {
            return bad("need at least one background code per cluster");
        }
        if self.n_acute == 0 || self.n_chronic == 0 {
            return bad("need at least one chronic and one acute code");
        }
        if !(self.mean_admissions >= 2.0) {
            return bad("mean_admissions must be at least 2");
        }
        if !(self.gap_log_sigma > 0.0) || !self.gap_log_mu.is_finite() {
            return bad("gap distribution parameters must be finite with positive sigma");
        }
        if !(self.baseline_risk > 0.0 && self.baseline_risk < 1.0) {
            return bad("baseline_risk must lie in (0, 1)");
        }
        for (name, p) in [
            ("chronic_prevalence", self.chronic_prevalence),
            ("treatment_prob", self.treatment_prob),
            ("recurrence_prob", self.recurrence_prob),
            ("primary_prob", self.primary_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.chronic_boost >= 0.0 && self.acute_boost >= 0.0 && self.acute_rate_per_year >= 0.0) {
            return bad("boosts and rates must be non-negative");
        }
        if !(self.acute_half_life_days > 0.0) {
            return bad("acute_half_life_days must be positive");
        }
        if !(self.intervention_reduction > 0.0 && self.intervention_reduction <= 1.0) {
            return bad("intervention_reduction must lie in (0, 1]");
        }
        if !(self.chronic_horizon_days > 0.0 && self.label_horizon_months > 0.0) {
            return bad("horizons must be positive");
        }
        Ok(())
    }

    /// Baseline hazard per day implied by `baseline_risk` over the horizon.
    pub fn base_rate(&self) -> f64 {
        -(1.0 - self.baseline_risk).ln() / months_to_days(self.label_horizon_months)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let diag = (0..self.n_diagnoses).map(|i| format!("D{i:03}")).collect();
        let interv = (0..self.n_interventions()).map(|i| format!("P{i:03}")).collect();
        Vocabulary::new(diag, interv).expect("generated tokens are unique")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConditionKind {
    Chronic,
    Acute { half_life_days: f64 },
}

/// One condition's additive contribution to the relative hazard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEffect {
    pub code: usize,
    pub kind: ConditionKind,
    pub onset_days: f64,
    pub boost: f64,
    pub treated_at: Option<f64>,
    pub reduction: f64,
}

impl ConditionEffect {
    fn shape_at(&self, t: f64) -> f64 {
        if t < self.onset_days {
            return 0.0;
        }
        let base = match self.kind {
            ConditionKind::Chronic => 1.0,
            ConditionKind::Acute { half_life_days } => decay(t - self.onset_days, half_life_days),
        };
        match self.treated_at {
            Some(tr) if t >= tr => base * self.reduction,
            _ => base,
        }
    }

    /// `∫_a^b shape(τ) dτ` in closed form.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let start = a.max(self.onset_days);
        if b <= start {
            return 0.0;
        }
        let mut pieces = vec![(start, b, 1.0)];
        if let Some(tr) = self.treated_at {
            pieces = Vec::new();
            if tr > start {
                pieces.push((start, tr.min(b), 1.0));
            }
            if tr < b {
                pieces.push((tr.max(start), b, self.reduction));
            }
        }
        pieces
            .into_iter()
            .map(|(u, v, factor)| {
                let raw = match self.kind {
                    ConditionKind::Chronic => v - u,
                    ConditionKind::Acute { half_life_days } if half_life_days.is_infinite() => v - u,
                    ConditionKind::Acute { half_life_days } => {
                        let k = std::f64::consts::LN_2 / half_life_days;
                        // e^{-k(u-onset)} (1 - e^{-k(v-u)}) / k, stable for small k
                        decay(u - self.onset_days, half_life_days) * -(-k * (v - u)).exp_m1() / k
                    }
                };
                raw * factor
            })
            .sum()
    }
}

fn decay(elapsed: f64, half_life: f64) -> f64 {
    if half_life.is_infinite() {
        1.0
    } else {
        (-std::f64::consts::LN_2 * elapsed / half_life).exp()
    }
}

/// Unplanned-admission hazard `base_rate · (1 + Σ boost_c · shape_c(τ))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardTrace {
    pub base_rate: f64,
    pub conditions: Vec<ConditionEffect>,
}

impl HazardTrace {
    pub fn rate(&self, t: f64) -> f64 {
        self.base_rate * (1.0 + self.conditions.iter().map(|c| c.boost * c.shape_at(t)).sum::<f64>())
    }

    /// Integrated hazard over `[a, b]`.
    pub fn cumulative(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        self.base_rate * ((b - a) + self.conditions.iter().map(|c| c.boost * c.integral(a, b)).sum::<f64>())
    }

    /// Probability of at least one unplanned admission in `(a, b]`.
    pub fn event_probability(&self, a: f64, b: f64) -> f64 {
        1.0 - (-self.cumulative(a, b)).exp()
    }

    /// Next event time after `from` for a unit-exponential draw, or `None`
    /// if it falls beyond `until`.
    fn next_event(&self, from: f64, until: f64, target: f64) -> Option<f64> {
        if self.cumulative(from, until) < target {
            return None;
        }
        let (mut lo, mut hi) = (from, until);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.cumulative(from, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(hi)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedCohort {
    pub records: Vec<PatientRecord>,
    pub vocabulary: Vocabulary,
    /// Closed-form probability behind each record's `risk_label`.
    pub label_probabilities: Vec<f64>,
    pub hazards: Vec<HazardTrace>,
    /// Simulated patients dropped for lack of an eligible prediction point.
    pub excluded: usize,
}

struct Latent {
    cluster: usize,
    primary: usize,
    conditions: Vec<ConditionEffect>,
}

struct PatientSim<'a> {
    cfg: &'a GeneratorConfig,
    rng: Rng,
}

impl PatientSim<'_> {
    fn background_pool(&self, cluster: usize) -> std::ops::Range<usize> {
        let per = self.cfg.n_background() / self.cfg.n_clusters;
        let start = self.cfg.n_conditions() + cluster * per;
        let end = if cluster + 1 == self.cfg.n_clusters { self.cfg.n_diagnoses } else { start + per };
        start..end
    }

    fn planned_times(&mut self) -> Vec<f64> {
        // Geometric on {2, 3, ...} with the configured mean.
        let p = 1.0 / (self.cfg.mean_admissions - 1.0);
        let mut n = 2;
        while !self.rng.bernoulli(p) && n < 200 {
            n += 1;
        }
        let mut t = 0.0;
        let mut times = vec![0.0];
        for _ in 1..n {
            t += self.rng.log_normal(self.cfg.gap_log_mu, self.cfg.gap_log_sigma);
            times.push(t);
        }
        times
    }

    fn latent(&mut self, end: f64) -> Latent {
        let cfg = self.cfg;
        let cluster = self.rng.below(cfg.n_clusters);
        let pool = self.background_pool(cluster);
        let primary = pool.start + self.rng.below(pool.len());
        let mut conditions = Vec::new();
        if self.rng.bernoulli(cfg.chronic_prevalence) {
            // Onsets fall in the year either side of the first visit, so the
            // condition is usually on record long before the prediction point.
            let latest = (end - months_to_days(cfg.label_horizon_months)).clamp(0.0, 365.0);
            let onset = -365.0 + self.rng.uniform() * (latest + 365.0);
            conditions.push(ConditionEffect {
                code: self.rng.below(cfg.n_chronic),
                kind: ConditionKind::Chronic,
                onset_days: onset.max(0.0),
                boost: cfg.chronic_boost,
                treated_at: None,
                reduction: cfg.intervention_reduction,
            });
        }
        let rate = cfg.acute_rate_per_year / 365.25;
        if rate > 0.0 {
            let mut t = 0.0;
            loop {
                t += self.rng.exponential() / rate;
                if t >= end {
                    break;
                }
                conditions.push(ConditionEffect {
                    code: cfg.n_chronic + self.rng.below(cfg.n_acute),
                    kind: ConditionKind::Acute { half_life_days: cfg.acute_half_life_days },
                    onset_days: t,
                    boost: cfg.acute_boost,
                    treated_at: None,
                    reduction: cfg.intervention_reduction,
                });
            }
        }
        Latent { cluster, primary, conditions }
    }

    fn recorded(&mut self, cond: &ConditionEffect, t: f64) -> bool {
        if t < cond.onset_days {
            return false;
        }
        let p = match cond.kind {
            ConditionKind::Chronic => {
                if t - cond.onset_days <= self.cfg.chronic_horizon_days {
                    self.cfg.recurrence_prob
                } else {
                    0.25 * self.cfg.recurrence_prob
                }
            }
            ConditionKind::Acute { half_life_days } => {
                if cond.treated_at.is_some_and(|tr| tr < t) {
                    return false;
                }
                self.cfg.recurrence_prob * decay(t - cond.onset_days, half_life_days)
            }
        };
        self.rng.bernoulli(p)
    }

    /// Draws one admission's codes; at planned visits, recorded untreated
    /// conditions may be treated, which mutates `latent`.
    fn admission(&mut self, latent: &mut Latent, t: f64, method: AdmissionMethod) -> CodedAdmission {
        let cfg = self.cfg;
        let mut condition_codes = Vec::new();
        let mut interventions = Vec::new();
        for i in 0..latent.conditions.len() {
            let cond = latent.conditions[i].clone();
            if !self.recorded(&cond, t) {
                continue;
            }
            if !condition_codes.contains(&cond.code) {
                condition_codes.push(cond.code);
            }
            let acute_slot = cond.code.checked_sub(cfg.n_chronic);
            match method {
                AdmissionMethod::Planned => {
                    if cond.treated_at.is_none() && self.rng.bernoulli(cfg.treatment_prob) {
                        latent.conditions[i].treated_at = Some(t);
                        interventions.push(cond.code);
                    }
                }
                AdmissionMethod::Unplanned => {
                    if let Some(a) = acute_slot.filter(|&a| a < cfg.n_acute) {
                        if self.rng.bernoulli(0.5) {
                            interventions.push(cfg.n_conditions() + a);
                        }
                    }
                }
            }
        }
        let mut background = Vec::new();
        if self.rng.bernoulli(cfg.primary_prob) {
            background.push(latent.primary);
        }
        let pool = self.background_pool(latent.cluster);
        for _ in 0..self.rng.below(3) {
            background.push(pool.start + self.rng.below(pool.len()));
        }
        if self.rng.bernoulli(0.15) {
            background.push(cfg.n_conditions() + self.rng.below(cfg.n_background()));
        }
        let mut diagnoses = condition_codes;
        for c in background {
            if !diagnoses.contains(&c) {
                diagnoses.push(c);
            }
        }
        if diagnoses.is_empty() {
            diagnoses.push(latent.primary);
        }
        while diagnoses.len() > MAX_CODES {
            // Background codes sit at the end; drop from the tail.
            diagnoses.pop();
        }
        if self.rng.bernoulli(0.3) {
            interventions.push(cfg.n_conditions() + cfg.n_acute + latent.cluster);
        }
        diagnoses.sort_unstable();
        interventions.sort_unstable();
        interventions.dedup();
        CodedAdmission { time_days: t, method, diagnoses, interventions }
    }

    fn simulate(&mut self, patient_id: String) -> (PatientRecord, HazardTrace) {
        let cfg = self.cfg;
        let planned = self.planned_times();
        let end = *planned.last().expect("at least two planned visits");
        let mut latent = self.latent(end);
        let first_method = if self.rng.bernoulli(0.5) { AdmissionMethod::Unplanned } else { AdmissionMethod::Planned };

        // Planned visits fix the treatment times, hence the whole hazard,
        // before any unplanned admission is drawn.
        let mut planned_adms = Vec::with_capacity(planned.len());
        for (i, &t) in planned.iter().enumerate() {
            let method = if i == 0 { first_method } else { AdmissionMethod::Planned };
            planned_adms.push(self.admission(&mut latent, t, method));
        }
        // A chronic code raises hazard from the first visit that draws it;
        // one that no planned visit draws has no effect at all.
        latent.conditions.retain_mut(|c| {
            if c.kind != ConditionKind::Chronic {
                return true;
            }
            match planned_adms.iter().find(|a| a.diagnoses.contains(&c.code)) {
                Some(a) => {
                    c.onset_days = a.time_days;
                    true
                }
                None => false,
            }
        });
        let hazard = HazardTrace { base_rate: cfg.base_rate(), conditions: latent.conditions.clone() };

        let mut unplanned_times = Vec::new();
        let mut cur = 0.0;
        while let Some(t) = hazard.next_event(cur, end, self.rng.exponential()) {
            if t >= end {
                break;
            }
            unplanned_times.push(t);
            cur = t;
        }
        let mut admissions = planned_adms;
        for t in unplanned_times {
            admissions.push(self.admission(&mut latent, t, AdmissionMethod::Unplanned));
        }
        admissions.sort_by(|a, b| a.time_days.total_cmp(&b.time_days));
        let record = PatientRecord { patient_id, admissions, risk_label: None, prediction_point: None };
        (record, hazard)
    }

    /// Prediction point drawn among planned visits with a full horizon after
    /// them, so the choice is independent of the unplanned event process.
    fn prediction_point(&mut self, record: &PatientRecord) -> Option<usize> {
        let horizon = months_to_days(self.cfg.label_horizon_months);
        let end = record.admissions.last()?.time_days;
        let eligible: Vec<usize> = record
            .admissions
            .iter()
            .enumerate()
            .filter(|(i, a)| {
                *i + 1 < record.admissions.len()
                    && (a.method == AdmissionMethod::Planned || *i == 0)
                    && a.time_days + horizon <= end
            })
            .map(|(i, _)| i)
            .collect();
        (!eligible.is_empty()).then(|| eligible[self.rng.below(eligible.len())])
    }
}

/// Generates `cfg.n_patients` labelled records. Patient `i` draws from its own
/// stream derived from `(seed, i)`; patients without an eligible prediction
/// point are skipped and counted.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<GeneratedCohort> {
    cfg.validate()?;
    let horizon = months_to_days(cfg.label_horizon_months);
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut label_probabilities = Vec::with_capacity(cfg.n_patients);
    let mut hazards = Vec::with_capacity(cfg.n_patients);
    let mut excluded = 0;
    let mut i = 0u64;
    while records.len() < cfg.n_patients {
        let mut sim = PatientSim { cfg, rng: Rng::derive(cfg.seed, i) };
        let (mut record, hazard) = sim.simulate(format!("p{i:06}"));
        i += 1;
        let Some(p) = sim.prediction_point(&record) else {
            excluded += 1;
            if excluded > 100 * cfg.n_patients {
                return Err(Error::Config("generator: almost no patient spans the label horizon".into()));
            }
            continue;
        };
        record.prediction_point = Some(p);
        record.risk_label = Some(record.unplanned_within(cfg.label_horizon_months).unwrap_or(0) >= 1);
        let t = record.admissions[p].time_days;
        label_probabilities.push(hazard.event_probability(t, t + horizon));
        hazards.push(hazard);
        records.push(record);
    }
    Ok(GeneratedCohort { records, vocabulary: cfg.vocabulary(), label_probabilities, hazards, excluded })
}

/// Picks a discharge uniformly among admissions that have at least one later
/// admission and a full `horizon_months` of follow-up inside the record.
/// Returns the kept records and the number excluded.
pub fn choose_prediction_points(
    records: &[PatientRecord],
    horizon_months: f64,
    rng: &mut Rng,
) -> (Vec<PatientRecord>, usize) {
    let horizon = months_to_days(horizon_months);
    let mut kept = Vec::with_capacity(records.len());
    let mut excluded = 0;
    for r in records {
        let Some(end) = r.admissions.last().map(|a| a.time_days) else {
            excluded += 1;
            continue;
        };
        let eligible: Vec<usize> =
            (0..r.admissions.len().saturating_sub(1)).filter(|&i| r.admissions[i].time_days + horizon <= end).collect();
        if eligible.is_empty() {
            excluded += 1;
            continue;
        }
        let mut r = r.clone();
        r.prediction_point = Some(eligible[rng.below(eligible.len())]);
        kept.push(r);
    }
    (kept, excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_jsonl;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig { n_patients: 200, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_cohort(&small(7)).unwrap();
        let b = generate_cohort(&small(7)).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_jsonl(&mut ba, &a.records, &a.vocabulary).unwrap();
        write_jsonl(&mut bb, &b.records, &b.vocabulary).unwrap();
        assert_eq!(ba, bb);
        let c = generate_cohort(&small(8)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn records_valid() {
        let cfg = small(3);
        let cohort = generate_cohort(&cfg).unwrap();
        assert_eq!(cohort.records.len(), 200);
        for r in &cohort.records {
            r.validate(cfg.n_diagnoses, cfg.n_interventions()).unwrap();
            assert!(r.admissions.iter().all(|a| a.diagnoses.len() <= MAX_CODES));
            assert!(r.prediction_point.is_some() && r.risk_label.is_some());
        }
    }

    #[test]
    fn infinite_half_life_acute_matches_chronic() {
        let chronic = ConditionEffect {
            code: 0,
            kind: ConditionKind::Chronic,
            onset_days: 30.0,
            boost: 1.5,
            treated_at: Some(200.0),
            reduction: 0.4,
        };
        let acute = ConditionEffect { kind: ConditionKind::Acute { half_life_days: f64::INFINITY }, ..chronic.clone() };
        let h1 = HazardTrace { base_rate: 0.01, conditions: vec![chronic] };
        let h2 = HazardTrace { base_rate: 0.01, conditions: vec![acute] };
        for t in [0.0, 29.0, 30.0, 100.0, 199.9, 200.0, 900.0] {
            assert_eq!(h1.rate(t), h2.rate(t));
        }
        for (a, b) in [(0.0, 10.0), (0.0, 250.0), (150.0, 400.0), (300.0, 1000.0)] {
            assert_eq!(h1.cumulative(a, b), h2.cumulative(a, b));
        }
        // A very long half-life converges to the same trace.
        let near = ConditionEffect { kind: ConditionKind::Acute { half_life_days: 1e16 }, ..h1.conditions[0].clone() };
        let h3 = HazardTrace { base_rate: 0.01, conditions: vec![near] };
        assert!((h3.cumulative(0.0, 1000.0) - h1.cumulative(0.0, 1000.0)).abs() < 1e-9);
    }

    #[test]
    fn cumulative_matches_quadrature() {
        let trace = HazardTrace {
            base_rate: 0.002,
            conditions: vec![
                ConditionEffect {
                    code: 5,
                    kind: ConditionKind::Acute { half_life_days: 45.0 },
                    onset_days: 12.0,
                    boost: 6.0,
                    treated_at: Some(80.0),
                    reduction: 0.35,
                },
                ConditionEffect {
                    code: 1,
                    kind: ConditionKind::Chronic,
                    onset_days: 150.0,
                    boost: 2.0,
                    treated_at: None,
                    reduction: 0.35,
                },
            ],
        };
        let (a, b) = (0.0, 400.0);
        let n = 400_000;
        let h = (b - a) / n as f64;
        let midpoint: f64 = (0..n).map(|i| trace.rate(a + (i as f64 + 0.5) * h)).sum::<f64>() * h;
        assert!((midpoint - trace.cumulative(a, b)).abs() < 1e-6, "{midpoint} vs {}", trace.cumulative(a, b));
    }

    #[test]
    fn prediction_point_selection() {
        let adm = |t: f64| CodedAdmission {
            time_days: t,
            method: AdmissionMethod::Planned,
            diagnoses: vec![0],
            interventions: vec![],
        };
        let two = PatientRecord {
            patient_id: "a".into(),
            admissions: vec![adm(0.0), adm(400.0)],
            risk_label: None,
            prediction_point: None,
        };
        let short = PatientRecord { admissions: vec![adm(0.0), adm(100.0)], patient_id: "b".into(), ..two.clone() };
        let (kept, excluded) = choose_prediction_points(&[two.clone(), short], 12.0, &mut Rng::new(1));
        assert_eq!(excluded, 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].prediction_point, Some(0));
        let long = PatientRecord { admissions: (0..20).map(|i| adm(i as f64 * 100.0)).collect(), ..two };
        let (a, _) = choose_prediction_points(std::slice::from_ref(&long), 12.0, &mut Rng::new(5));
        let (b, _) = choose_prediction_points(&[long], 12.0, &mut Rng::new(5));
        assert_eq!(a, b);
        assert!(a[0].prediction_point.unwrap() <= 15);
    }

    #[test]
    fn zero_boosts_label_at_baseline_rate() {
        let cfg = GeneratorConfig { n_patients: 10_000, chronic_boost: 0.0, acute_boost: 0.0, ..small(9) };
        let cohort = generate_cohort(&cfg).unwrap();
        let pos = cohort.records.iter().filter(|r| r.risk_label == Some(true)).count();
        let rate = pos as f64 / cohort.records.len() as f64;
        assert!((rate - cfg.baseline_risk).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate_cohort(&GeneratorConfig { baseline_risk: 0.0, ..small(1) }).is_err());
        assert!(generate_cohort(&GeneratorConfig { n_diagnoses: 12, ..small(1) }).is_err());
    }
}
