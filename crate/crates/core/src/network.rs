//! Sequence models assembled from the cells: forward pass over a patient,
//! multiscale recency pooling, the risk head, the label heads and losses.

use serde::{Deserialize, Serialize};

use crate::cells::{
    gated_forward, rnn_forward, time_terms, CellState, DeepCareParams, GateExtras, GateInputs, GateTrace, LstmParams,
    RnnParams, TimeMode,
};
use crate::data::{AdmissionMethod, PatientRecord, DAYS_PER_MONTH};
use crate::embedding::{init_embeddings, pool_codes, CodeMask, EmbeddingParams, PoolTrace, PoolingMode};
use crate::error::{Error, Result};
use crate::linalg::{sigmoid_scalar, softmax_slice, Matrix, Rng, Vector};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_LOOKBACKS: [f64; 3] = [12.0, 24.0, f64::INFINITY];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Rnn,
    Lstm,
    DeepCare,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::DeepCare => "deepcare",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            "deepcare" => Ok(CellKind::DeepCare),
            _ => Err(Error::InvalidArgument(format!("cell must be rnn, lstm or deepcare, got {s:?}"))),
        }
    }
}

/// Pooling attention over steps. `Uniform` sets every `r_t = 1` and exists
/// for equivalence tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recency {
    Recency,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    /// Ignored unless `cell` is `DeepCare`.
    pub time: TimeMode,
    pub pooling: PoolingMode,
    /// DeepCare only; with `false` every `p_t` is zero.
    pub interventions: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Risk-head hidden width; 0 gives logistic regression on the pooled vector.
    pub head_dim: usize,
    pub n_diagnoses: usize,
    pub n_interventions: usize,
    /// Look-back windows in months, ascending; `f64::INFINITY` allowed last.
    #[serde(with = "lookback_serde")]
    pub lookbacks_months: Vec<f64>,
    pub recency: Recency,
    pub init_scale: f64,
}

mod lookback_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    // JSON has no infinity; store it as null.
    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl ModelConfig {
    pub fn new(cell: CellKind, n_diagnoses: usize, n_interventions: usize) -> Self {
        Self {
            cell,
            time: TimeMode::Parametric,
            pooling: PoolingMode::Max,
            interventions: true,
            embed_dim: 10,
            hidden_dim: 20,
            head_dim: 10,
            n_diagnoses,
            n_interventions,
            lookbacks_months: DEFAULT_LOOKBACKS.to_vec(),
            recency: Recency::Recency,
            init_scale: crate::embedding::DEFAULT_INIT_SCALE,
        }
    }

    pub fn deepcare(time: TimeMode, n_diagnoses: usize, n_interventions: usize) -> Self {
        Self { time, ..Self::new(CellKind::DeepCare, n_diagnoses, n_interventions) }
    }

    /// The time mode actually in effect.
    pub fn effective_time(&self) -> TimeMode {
        if self.cell == CellKind::DeepCare {
            self.time
        } else {
            TimeMode::NoTime
        }
    }

    pub fn uses_interventions(&self) -> bool {
        self.cell == CellKind::DeepCare && self.interventions
    }

    pub fn pooled_dim(&self) -> usize {
        self.lookbacks_months.len() * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embedding and hidden dimensions must be at least 1");
        }
        if self.n_diagnoses == 0 {
            return bad("vocabulary has no diagnosis codes");
        }
        if self.lookbacks_months.is_empty() {
            return bad("at least one look-back window is required");
        }
        if self.lookbacks_months.iter().any(|l| l.is_nan() || *l < 0.0) {
            return bad("look-back windows must be non-negative");
        }
        if self.lookbacks_months.windows(2).any(|w| w[0] > w[1]) {
            return bad("look-back windows must be sorted ascending");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init scale must be finite and non-negative");
        }
        Ok(())
    }
}

/// `a_h = σ(U_h h̄ + b_h)`, `z = U_y a_h + b_y`. With zero hidden width
/// `U_h`/`b_h` are empty and `z = U_y h̄ + b_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub u_h: Matrix,
    pub b_h: Vector,
    pub u_y: Matrix,
    pub b_y: Vector,
}

impl HeadParams {
    pub fn hidden_dim(&self) -> usize {
        self.b_h.len()
    }
}

/// `softmax(V h)` over a label vocabulary; `V` is L × K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelHeadParams {
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Rnn(RnnParams),
    Lstm(LstmParams),
    DeepCare(DeepCareParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedding: EmbeddingParams,
    pub cell: CellParams,
    pub head: HeadParams,
    pub diagnosis_head: LabelHeadParams,
    pub intervention_head: LabelHeadParams,
}

/// A named view of one parameter tensor.
pub struct Tensor<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    /// Weight matrices take L2; biases do not.
    pub is_weight: bool,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub is_weight: bool,
    pub data: &'a mut [f64],
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut mats: Vec<(&'static str, &Matrix)> =
            vec![("A", &self.embedding.diagnosis), ("B", &self.embedding.intervention)];
        let mut biases: Vec<(&'static str, &Vector)> = Vec::new();
        match &self.cell {
            CellParams::Rnn(r) => {
                mats.extend([("rnn.W", &r.recurrent), ("rnn.U", &r.input)]);
                biases.push(("rnn.b", &r.bias));
            }
            CellParams::Lstm(l) => lstm_tensors(l, &mut mats, &mut biases),
            CellParams::DeepCare(d) => {
                lstm_tensors(&d.lstm, &mut mats, &mut biases);
                mats.extend([("P_o", &d.p_o), ("P_f", &d.p_f)]);
                if let Some(q) = &d.q_f {
                    mats.push(("Q_f", q));
                }
            }
        }
        mats.extend([
            ("U_h", &self.head.u_h),
            ("U_y", &self.head.u_y),
            ("V_diag", &self.diagnosis_head.v),
            ("V_interv", &self.intervention_head.v),
        ]);
        biases.extend([("b_h", &self.head.b_h), ("b_y", &self.head.b_y)]);
        let mats = mats.into_iter().map(|(name, m)| Tensor {
            name,
            rows: m.rows(),
            cols: m.cols(),
            is_weight: true,
            data: m.as_slice(),
        });
        let biases = biases.into_iter().map(|(name, v)| Tensor {
            name,
            rows: v.len(),
            cols: 1,
            is_weight: false,
            data: v.as_slice(),
        });
        mats.chain(biases).collect()
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut mats: Vec<(&'static str, &mut Matrix)> =
            vec![("A", &mut self.embedding.diagnosis), ("B", &mut self.embedding.intervention)];
        let mut biases: Vec<(&'static str, &mut Vector)> = Vec::new();
        match &mut self.cell {
            CellParams::Rnn(r) => {
                mats.extend([("rnn.W", &mut r.recurrent), ("rnn.U", &mut r.input)]);
                biases.push(("rnn.b", &mut r.bias));
            }
            CellParams::Lstm(l) => lstm_tensors_mut(l, &mut mats, &mut biases),
            CellParams::DeepCare(d) => {
                lstm_tensors_mut(&mut d.lstm, &mut mats, &mut biases);
                mats.extend([("P_o", &mut d.p_o), ("P_f", &mut d.p_f)]);
                if let Some(q) = &mut d.q_f {
                    mats.push(("Q_f", q));
                }
            }
        }
        mats.extend([
            ("U_h", &mut self.head.u_h),
            ("U_y", &mut self.head.u_y),
            ("V_diag", &mut self.diagnosis_head.v),
            ("V_interv", &mut self.intervention_head.v),
        ]);
        biases.extend([("b_h", &mut self.head.b_h), ("b_y", &mut self.head.b_y)]);
        let mats = mats.into_iter().map(|(name, m)| {
            let (rows, cols) = (m.rows(), m.cols());
            TensorMut { name, rows, cols, is_weight: true, data: m.as_mut_slice() }
        });
        let biases = biases.into_iter().map(|(name, v)| TensorMut {
            name,
            rows: v.len(),
            cols: 1,
            is_weight: false,
            data: v.as_mut_slice(),
        });
        mats.chain(biases).collect()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Word-wise FNV-style hash of every parameter's bit pattern.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
            }
        }
        h
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn lstm_tensors<'a>(
    l: &'a LstmParams,
    mats: &mut Vec<(&'static str, &'a Matrix)>,
    biases: &mut Vec<(&'static str, &'a Vector)>,
) {
    mats.extend([("W_i", &l.w_i), ("W_f", &l.w_f), ("W_o", &l.w_o), ("W_c", &l.w_c)]);
    mats.extend([("U_i", &l.u_i), ("U_f", &l.u_f), ("U_o", &l.u_o), ("U_c", &l.u_c)]);
    biases.extend([("b_i", &l.b_i), ("b_f", &l.b_f), ("b_o", &l.b_o), ("b_c", &l.b_c)]);
}

fn lstm_tensors_mut<'a>(
    l: &'a mut LstmParams,
    mats: &mut Vec<(&'static str, &'a mut Matrix)>,
    biases: &mut Vec<(&'static str, &'a mut Vector)>,
) {
    mats.extend([("W_i", &mut l.w_i), ("W_f", &mut l.w_f), ("W_o", &mut l.w_o), ("W_c", &mut l.w_c)]);
    mats.extend([("U_i", &mut l.u_i), ("U_f", &mut l.u_f), ("U_o", &mut l.u_o), ("U_c", &mut l.u_c)]);
    biases.extend([("b_i", &mut l.b_i), ("b_f", &mut l.b_f), ("b_o", &mut l.b_o), ("b_c", &mut l.b_c)]);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Random initialisation: uniform `±init_scale` weights, zero biases,
    /// forget bias `+1`.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let s = config.init_scale;
        let (m, k) = (config.embed_dim, config.hidden_dim);
        let embedding = init_embeddings(m, config.n_diagnoses, config.n_interventions, rng, s);
        let cell = match config.cell {
            CellKind::Rnn => CellParams::Rnn(RnnParams::init(m, k, s, rng)),
            CellKind::Lstm => CellParams::Lstm(LstmParams::init(m, k, s, rng)),
            CellKind::DeepCare => CellParams::DeepCare(DeepCareParams::init(m, k, config.time, s, rng)),
        };
        let pooled = config.pooled_dim();
        let d = config.head_dim;
        let head = HeadParams {
            u_h: Matrix::uniform(d, pooled, s, rng),
            b_h: Vector::zeros(d),
            u_y: Matrix::uniform(1, if d == 0 { pooled } else { d }, s, rng),
            b_y: Vector::zeros(1),
        };
        let diagnosis_head = LabelHeadParams { v: Matrix::uniform(config.n_diagnoses, k, s, rng) };
        let intervention_head = LabelHeadParams { v: Matrix::uniform(config.n_interventions, k, s, rng) };
        Ok(Self { params: ModelParams { embedding, cell, head, diagnosis_head, intervention_head }, config })
    }

    /// All parameters zero, including the forget bias.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config, &mut Rng::new(0))?;
        model.params = model.params.zeros_like();
        Ok(model)
    }

    /// Checks that every tensor matches the configured dimensions.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::zeros(self.config.clone())?;
        let want = expected.params.tensors();
        let got = self.params.tensors();
        if want.len() != got.len() {
            return Err(Error::Shape(format!("model has {} tensors, config implies {}", got.len(), want.len())));
        }
        for (w, g) in want.iter().zip(&got) {
            if w.name != g.name || w.rows != g.rows || w.cols != g.cols || w.data.len() != g.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} is {}x{}, config implies {} {}x{}",
                    g.name, g.rows, g.cols, w.name, w.rows, w.cols
                )));
            }
        }
        Ok(())
    }
}

/// What a forward pass is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Binary risk label from the history up to the prediction point.
    Risk,
    /// Diagnoses of admission `t+1` from `h_t`.
    NextDiagnosis,
    /// Interventions of admission `t` from `h_t` computed without `p_t` in
    /// the output gate.
    Intervention,
    /// `NextDiagnosis + Intervention`, used for pretraining.
    Auxiliary,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Risk => "risk",
            Task::NextDiagnosis => "next-diagnosis",
            Task::Intervention => "intervention",
            Task::Auxiliary => "auxiliary",
        }
    }

    pub const ALL: [Task; 4] = [Task::Risk, Task::NextDiagnosis, Task::Intervention, Task::Auxiliary];

    fn diagnosis_loss(self) -> bool {
        matches!(self, Task::NextDiagnosis | Task::Auxiliary)
    }

    fn intervention_loss(self) -> bool {
        matches!(self, Task::Intervention | Task::Auxiliary)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("task must be risk, next-diagnosis, intervention or auxiliary, got {s:?}"))
        })
    }
}

/// The admissions a task reads: the history for `Risk`, everything otherwise.
pub fn task_admissions(record: &PatientRecord, task: Task) -> &[crate::data::CodedAdmission] {
    match (task, record.prediction_point) {
        (Task::Risk, Some(p)) => &record.admissions[..=p],
        _ => &record.admissions,
    }
}

/// Frozen dropout masks for one sequence. Entries are `0` or `1/keep`;
/// `None` anywhere means no dropout at that site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMasks {
    pub codes: Vec<Option<CodeMask>>,
    pub features_x: Vec<Option<Vec<f64>>>,
    pub features_p: Vec<Option<Vec<f64>>>,
    /// On `h̄` for the risk head.
    pub head_input: Option<Vec<f64>>,
    /// On `a_h`.
    pub head_hidden: Option<Vec<f64>>,
    /// On `h_t` before the label heads, per step.
    pub label_input: Vec<Option<Vec<f64>>>,
}

fn nth<T>(v: &[Option<T>], i: usize) -> Option<&T> {
    v.get(i).and_then(Option::as_ref)
}

fn apply_mask(v: &mut [f64], mask: Option<&Vec<f64>>) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
}

#[derive(Clone, Debug)]
pub(crate) enum StepCell {
    Rnn { h: Vec<f64> },
    Gated(GateTrace),
}

impl StepCell {
    pub fn h(&self) -> &[f64] {
        match self {
            StepCell::Rnn { h } => h,
            StepCell::Gated(g) => &g.h,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct StepTape {
    pub diagnoses: Vec<usize>,
    pub interventions: Vec<usize>,
    pub x_pool: PoolTrace,
    pub p_pool: PoolTrace,
    pub x_mask: Option<Vec<f64>>,
    pub p_mask: Option<Vec<f64>>,
    /// Cell inputs after feature dropout; `p` is empty when unused.
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub cell: StepCell,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadTape {
    /// `(step, normalised weight)` per look-back window.
    pub windows: Vec<Vec<(usize, f64)>>,
    pub in_mask: Option<Vec<f64>>,
    /// `h̄` after input dropout.
    pub pooled: Vec<f64>,
    /// `a_h` before hidden dropout.
    pub a_h: Vec<f64>,
    pub hid_mask: Option<Vec<f64>>,
    pub prob: f64,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LabelKind {
    Diagnosis,
    Intervention,
}

#[derive(Clone, Debug)]
pub(crate) struct LabelTape {
    pub step: usize,
    pub kind: LabelKind,
    pub mask: Option<Vec<f64>>,
    /// Output gate recomputed without the current intervention term; only
    /// for intervention targets on gated cells.
    pub o_prime: Option<Vec<f64>>,
    /// Head input after dropout.
    pub input: Vec<f64>,
    pub probs: Vec<f64>,
    pub targets: Vec<usize>,
    /// Loss weight: one over the number of scored steps of this kind.
    pub weight: f64,
}

/// Forward intermediates of one scored sequence.
#[derive(Clone, Debug)]
pub struct Tape {
    pub(crate) task: Task,
    pub(crate) steps: Vec<StepTape>,
    pub(crate) head: Option<HeadTape>,
    pub(crate) labels: Vec<LabelTape>,
    /// Fingerprint of the parameters the tape was recorded against.
    pub(crate) params_digest: u64,
    pub loss: f64,
}

impl Tape {
    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Risk probability, for `Task::Risk` tapes.
    pub fn probability(&self) -> Option<f64> {
        self.head.as_ref().map(|h| h.prob)
    }

    /// Max-pool coordinates whose winner is within `tol` of a runner-up.
    pub fn max_pool_ties(&self, params: &ModelParams, tol: f64) -> Vec<(&'static str, usize, usize)> {
        let mut ties = Vec::new();
        let mut scan = |name: &'static str, table: &Matrix, codes: &[usize], trace: &PoolTrace| {
            if let PoolTrace::Max { argmax } = trace {
                for (i, &win) in argmax.iter().enumerate() {
                    let best = table.get(i, win);
                    for &c in codes {
                        if c != win && (table.get(i, c) - best).abs() <= tol {
                            ties.push((name, i, win));
                            ties.push((name, i, c));
                        }
                    }
                }
            }
        };
        for s in &self.steps {
            scan("A", &params.embedding.diagnosis, &s.diagnoses, &s.x_pool);
            scan("B", &params.embedding.intervention, &s.interventions, &s.p_pool);
        }
        ties.sort_unstable();
        ties.dedup();
        ties
    }
}

/// `r_t = 1 / (m_t + ln(1 + Δ_months))`, Δ measured to the sequence end.
pub fn recency_weight(method: AdmissionMethod, dt_to_end_months: f64) -> f64 {
    1.0 / (method.weight() + dt_to_end_months.ln_1p())
}

/// Normalised pooling weights per look-back window over a sequence with
/// the given admission times (days) and methods.
pub(crate) fn pool_windows(
    times: &[f64],
    methods: &[AdmissionMethod],
    lookbacks_months: &[f64],
    recency: Recency,
) -> Vec<Vec<(usize, f64)>> {
    let end = *times.last().expect("non-empty sequence");
    lookbacks_months
        .iter()
        .map(|&l| {
            let members: Vec<(usize, f64)> = times
                .iter()
                .zip(methods)
                .enumerate()
                .filter_map(|(t, (&time, &m))| {
                    let dt = (end - time) / DAYS_PER_MONTH;
                    (dt <= l).then(|| {
                        (
                            t,
                            match recency {
                                Recency::Recency => recency_weight(m, dt),
                                Recency::Uniform => 1.0,
                            },
                        )
                    })
                })
                .collect();
            let total: f64 = members.iter().map(|(_, r)| r).sum();
            members.into_iter().map(|(t, r)| (t, r / total)).collect()
        })
        .collect()
}

/// `h̄`: per window the weighted mean `Σ r_t h_t / Σ r_t`, windows stacked
/// in look-back order.
pub fn multiscale_pool(
    states: &[CellState],
    record: &PatientRecord,
    lookbacks_months: &[f64],
    recency: Recency,
) -> Result<Vector> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("pooling needs at least one state".into()));
    }
    if states.len() > record.admissions.len() {
        return Err(Error::Shape(format!("{} states for {} admissions", states.len(), record.admissions.len())));
    }
    let adm = &record.admissions[..states.len()];
    let times: Vec<f64> = adm.iter().map(|a| a.time_days).collect();
    let methods: Vec<AdmissionMethod> = adm.iter().map(|a| a.method).collect();
    let hs: Vec<&[f64]> = states.iter().map(|s| s.h.as_slice()).collect();
    Ok(Vector::from_vec(pool_hidden(&hs, &pool_windows(&times, &methods, lookbacks_months, recency))))
}

fn pool_hidden(hs: &[&[f64]], windows: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let k = hs[0].len();
    let mut out = Vec::with_capacity(windows.len() * k);
    for w in windows {
        let mut block = vec![0.0; k];
        for &(t, r) in w {
            block.iter_mut().zip(hs[t]).for_each(|(b, h)| *b += r * h);
        }
        // A lone admission gets weight exactly 1, so the block equals h_t.
        out.extend(block);
    }
    out
}

fn head_forward(params: &HeadParams, pooled: &[f64], hid_mask: Option<&Vec<f64>>) -> (Vec<f64>, Vec<f64>, f64) {
    let d = params.hidden_dim();
    let (a_h, hidden) = if d == 0 {
        (Vec::new(), pooled.to_vec())
    } else {
        let mut a = vec![0.0; d];
        params.u_h.matvec_acc(pooled, &mut a);
        a.iter_mut().zip(params.b_h.iter()).for_each(|(v, b)| *v = sigmoid_scalar(*v + b));
        let mut hidden = a.clone();
        apply_mask(&mut hidden, hid_mask);
        (a, hidden)
    };
    let mut z = [0.0];
    params.u_y.matvec_acc(&hidden, &mut z);
    (a_h, hidden, sigmoid_scalar(z[0] + params.b_y[0]))
}

/// Risk probability `σ(z_y)` from a pooled vector.
pub fn risk_head(h_bar: &Vector, params: &HeadParams) -> Result<f64> {
    let want = if params.hidden_dim() == 0 { params.u_y.cols() } else { params.u_h.cols() };
    if h_bar.len() != want {
        return Err(Error::Shape(format!("risk head expects input {want}, got {}", h_bar.len())));
    }
    Ok(head_forward(params, h_bar.as_slice(), None).2)
}

/// `softmax(V h)`.
pub fn label_head(h: &Vector, params: &LabelHeadParams) -> Result<Vector> {
    if h.len() != params.v.cols() {
        return Err(Error::Shape(format!("label head expects input {}, got {}", params.v.cols(), h.len())));
    }
    Ok(Vector::from_vec(label_probs(&params.v, h.as_slice())))
}

fn label_probs(v: &Matrix, h: &[f64]) -> Vec<f64> {
    let mut logits = vec![0.0; v.rows()];
    v.matvec_acc(h, &mut logits);
    softmax_slice(&logits)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Binary cross-entropy with the probability clamped away from 0 and 1.
pub fn cross_entropy(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean over the target set of `-ln dist[code]`.
pub fn multilabel_set_loss(dist: &Vector, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("target set is empty".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= dist.len()) {
        return Err(Error::InvalidArgument(format!("target {bad} out of range for {} labels", dist.len())));
    }
    Ok(set_loss(dist.as_slice(), targets))
}

fn set_loss(probs: &[f64], targets: &[usize]) -> f64 {
    targets.iter().map(|&c| -probs[c].max(PROB_FLOOR).ln()).sum::<f64>() / targets.len() as f64
}

/// Runs the cell over `admissions`, recording every intermediate.
fn run_steps(
    model: &Model,
    admissions: &[crate::data::CodedAdmission],
    masks: Option<&DropoutMasks>,
) -> Result<Vec<StepTape>> {
    let cfg = &model.config;
    let params = &model.params;
    let k = cfg.hidden_dim;
    let use_p = cfg.uses_interventions();
    let time = cfg.effective_time();
    let mut steps: Vec<StepTape> = Vec::with_capacity(admissions.len());
    for (t, adm) in admissions.iter().enumerate() {
        let mask = masks.and_then(|m| nth(&m.codes, t));
        let diagnoses = mask.map_or_else(|| adm.diagnoses.clone(), |m| m.diagnoses.clone());
        let interventions = mask.map_or_else(|| adm.interventions.clone(), |m| m.interventions.clone());
        let (x, x_pool) = pool_codes(&params.embedding.diagnosis, &diagnoses, cfg.pooling)?;
        let mut x = x.into_vec();
        let x_mask = masks.and_then(|m| nth(&m.features_x, t)).cloned();
        apply_mask(&mut x, x_mask.as_ref());
        let (p, p_pool, p_mask) = if use_p {
            let (p, trace) = pool_codes(&params.embedding.intervention, &interventions, cfg.pooling)?;
            let mut p = p.into_vec();
            let p_mask = masks.and_then(|m| nth(&m.features_p, t)).cloned();
            apply_mask(&mut p, p_mask.as_ref());
            (p, trace, p_mask)
        } else {
            (Vec::new(), PoolTrace::Empty, None)
        };
        let dt = if t == 0 { 0.0 } else { adm.time_days - admissions[t - 1].time_days };
        let zeros = vec![0.0; k];
        let (h_prev, c_prev): (&[f64], &[f64]) = match steps.last() {
            None => (&zeros, &zeros),
            Some(s) => match &s.cell {
                StepCell::Rnn { h } => (h, &zeros),
                StepCell::Gated(g) => (&g.h, &g.c),
            },
        };
        let cell = match &params.cell {
            CellParams::Rnn(r) => StepCell::Rnn { h: rnn_forward(&x, (t > 0).then_some(h_prev), r) },
            CellParams::Lstm(l) => StepCell::Gated(gated_forward(
                l,
                &GateExtras::NONE,
                &GateInputs { x: &x, h_prev, c_prev, p_cur: None, p_prev: None, inv_m: 1.0, decay: 1.0, q: None },
            )),
            CellParams::DeepCare(d) => {
                let (decay, q) = time_terms(time, dt);
                let zero_m = vec![0.0; cfg.embed_dim];
                let (p_cur, p_prev): (&[f64], &[f64]) =
                    if use_p { (&p, steps.last().map_or(&zero_m[..], |s| &s.p[..])) } else { (&zero_m, &zero_m) };
                let extras = GateExtras {
                    p_o: use_p.then_some(&d.p_o),
                    p_f: use_p.then_some(&d.p_f),
                    q_f: if time == TimeMode::Parametric { d.q_f.as_ref() } else { None },
                };
                if time == TimeMode::Parametric && d.q_f.is_none() {
                    return Err(Error::WrongMode { required: "time weights Q_f", actual: "no Q_f".into() });
                }
                StepCell::Gated(gated_forward(
                    &d.lstm,
                    &extras,
                    &GateInputs {
                        x: &x,
                        h_prev,
                        c_prev,
                        p_cur: use_p.then_some(p_cur),
                        p_prev: use_p.then_some(p_prev),
                        inv_m: 1.0 / adm.method.weight(),
                        decay,
                        q,
                    },
                ))
            }
        };
        steps.push(StepTape { diagnoses, interventions, x_pool, p_pool, x_mask, p_mask, x, p, cell });
    }
    Ok(steps)
}

/// Output gate of step `t` without the current intervention term.
fn output_gate_without_p(lstm: &LstmParams, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; lstm.hidden_dim()];
    lstm.w_o.matvec_acc(x, &mut a);
    lstm.u_o.matvec_acc(h_prev, &mut a);
    a.iter_mut().zip(lstm.b_o.iter()).map(|(v, b)| sigmoid_scalar(*v + b)).collect()
}

fn gated_lstm(params: &CellParams) -> Option<&LstmParams> {
    match params {
        CellParams::Rnn(_) => None,
        CellParams::Lstm(l) => Some(l),
        CellParams::DeepCare(d) => Some(&d.lstm),
    }
}

/// Forward pass scored against `task`, optionally with frozen dropout.
pub fn forward(model: &Model, record: &PatientRecord, task: Task, masks: Option<&DropoutMasks>) -> Result<Tape> {
    let admissions = task_admissions(record, task);
    if admissions.is_empty() {
        return Err(Error::record(&record.patient_id, "no admissions"));
    }
    let steps = run_steps(model, admissions, masks)?;
    let cfg = &model.config;
    let params = &model.params;
    let mut loss = 0.0;
    let mut head = None;
    let mut labels = Vec::new();

    if task == Task::Risk {
        let label = record.risk_label.ok_or_else(|| Error::record(&record.patient_id, "risk label missing"))?;
        let times: Vec<f64> = admissions.iter().map(|a| a.time_days).collect();
        let methods: Vec<AdmissionMethod> = admissions.iter().map(|a| a.method).collect();
        let windows = pool_windows(&times, &methods, &cfg.lookbacks_months, cfg.recency);
        let hs: Vec<&[f64]> = steps.iter().map(|s| s.cell.h()).collect();
        let mut pooled = pool_hidden(&hs, &windows);
        let in_mask = masks.and_then(|m| m.head_input.clone());
        apply_mask(&mut pooled, in_mask.as_ref());
        let hid_mask = masks.and_then(|m| m.head_hidden.clone());
        let (a_h, _, prob) = head_forward(&params.head, &pooled, hid_mask.as_ref());
        loss = cross_entropy(prob, label);
        head = Some(HeadTape { windows, in_mask, pooled, a_h, hid_mask, prob, label });
    }

    let n = steps.len();
    if task.diagnosis_loss() && n > 1 {
        let weight = 1.0 / (n - 1) as f64;
        for t in 0..n - 1 {
            let mask = masks.and_then(|m| nth(&m.label_input, t)).cloned();
            let mut input = steps[t].cell.h().to_vec();
            apply_mask(&mut input, mask.as_ref());
            let probs = label_probs(&params.diagnosis_head.v, &input);
            let targets = admissions[t + 1].diagnoses.clone();
            loss += weight * set_loss(&probs, &targets);
            labels.push(LabelTape {
                step: t,
                kind: LabelKind::Diagnosis,
                mask,
                o_prime: None,
                input,
                probs,
                targets,
                weight,
            });
        }
    }
    if task.intervention_loss() && cfg.n_interventions > 0 {
        let scored: Vec<usize> = (0..n).filter(|&t| !admissions[t].interventions.is_empty()).collect();
        let weight = 1.0 / scored.len().max(1) as f64;
        for t in scored {
            let mask = masks.and_then(|m| nth(&m.label_input, t)).cloned();
            let (mut input, o_prime) = match (&steps[t].cell, gated_lstm(&params.cell)) {
                (StepCell::Gated(g), Some(lstm)) => {
                    let zeros = vec![0.0; cfg.hidden_dim];
                    let h_prev = if t == 0 { &zeros[..] } else { steps[t - 1].cell.h() };
                    let o = output_gate_without_p(lstm, &steps[t].x, h_prev);
                    (o.iter().zip(&g.tanh_c).map(|(o, c)| o * c).collect::<Vec<_>>(), Some(o))
                }
                (cell, _) => (cell.h().to_vec(), None),
            };
            apply_mask(&mut input, mask.as_ref());
            let probs = label_probs(&params.intervention_head.v, &input);
            let targets = admissions[t].interventions.clone();
            loss += weight * set_loss(&probs, &targets);
            labels.push(LabelTape {
                step: t,
                kind: LabelKind::Intervention,
                mask,
                o_prime,
                input,
                probs,
                targets,
                weight,
            });
        }
    }
    Ok(Tape { task, steps, head, labels, params_digest: model.params.digest(), loss })
}

/// Loss of one sequence without keeping the tape.
pub fn sequence_loss(model: &Model, record: &PatientRecord, task: Task, masks: Option<&DropoutMasks>) -> Result<f64> {
    Ok(forward(model, record, task, masks)?.loss)
}

/// One state per admission of the full record, no dropout.
pub fn forward_sequence(record: &PatientRecord, model: &Model) -> Result<Vec<CellState>> {
    let steps = run_steps(model, &record.admissions, None)?;
    let k = model.config.hidden_dim;
    Ok(steps
        .into_iter()
        .map(|s| match s.cell {
            StepCell::Rnn { h } => CellState { c: Vector::zeros(k), h: Vector::from_vec(h) },
            StepCell::Gated(g) => CellState { c: Vector::from_vec(g.c), h: Vector::from_vec(g.h) },
        })
        .collect())
}

/// Risk probability from the history up to the prediction point (or the
/// whole record if none is set).
pub fn predict_risk(model: &Model, record: &PatientRecord) -> Result<f64> {
    let admissions = task_admissions(record, Task::Risk);
    if admissions.is_empty() {
        return Err(Error::record(&record.patient_id, "no admissions"));
    }
    let steps = run_steps(model, admissions, None)?;
    let times: Vec<f64> = admissions.iter().map(|a| a.time_days).collect();
    let methods: Vec<AdmissionMethod> = admissions.iter().map(|a| a.method).collect();
    let windows = pool_windows(&times, &methods, &model.config.lookbacks_months, model.config.recency);
    let hs: Vec<&[f64]> = steps.iter().map(|s| s.cell.h()).collect();
    Ok(head_forward(&model.params.head, &pool_hidden(&hs, &windows), None).2)
}

/// Next-admission diagnosis distribution after each admission.
pub fn next_diagnosis_distributions(model: &Model, record: &PatientRecord) -> Result<Vec<Vector>> {
    let steps = run_steps(model, &record.admissions, None)?;
    Ok(steps.iter().map(|s| Vector::from_vec(label_probs(&model.params.diagnosis_head.v, s.cell.h()))).collect())
}

/// Current-admission intervention distribution at each admission.
pub fn intervention_distributions(model: &Model, record: &PatientRecord) -> Result<Vec<Vector>> {
    let steps = run_steps(model, &record.admissions, None)?;
    let k = model.config.hidden_dim;
    let zeros = vec![0.0; k];
    Ok(steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let input = match (&s.cell, gated_lstm(&model.params.cell)) {
                (StepCell::Gated(g), Some(lstm)) => {
                    let h_prev = if t == 0 { &zeros[..] } else { steps[t - 1].cell.h() };
                    let o = output_gate_without_p(lstm, &s.x, h_prev);
                    o.iter().zip(&g.tanh_c).map(|(o, c)| o * c).collect()
                }
                (cell, _) => cell.h().to_vec(),
            };
            Vector::from_vec(label_probs(&model.params.intervention_head.v, &input))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::lstm_step;
    use crate::data::CodedAdmission;
    use crate::linalg::sigmoid;
    use AdmissionMethod::*;

    fn adm(time: f64, method: AdmissionMethod, d: &[usize], p: &[usize]) -> CodedAdmission {
        CodedAdmission { time_days: time, method, diagnoses: d.to_vec(), interventions: p.to_vec() }
    }

    fn record(adms: Vec<CodedAdmission>) -> PatientRecord {
        PatientRecord { patient_id: "t".into(), admissions: adms, risk_label: Some(true), prediction_point: None }
    }

    fn sample_record() -> PatientRecord {
        record(vec![
            adm(0.0, Planned, &[0, 2], &[1]),
            adm(40.0, Unplanned, &[1], &[]),
            adm(400.0, Planned, &[3, 0, 4], &[0, 2]),
            adm(800.0, Unplanned, &[2], &[2]),
        ])
    }

    fn small(cell: CellKind) -> ModelConfig {
        ModelConfig { embed_dim: 3, hidden_dim: 4, head_dim: 2, init_scale: 0.5, ..ModelConfig::new(cell, 5, 3) }
    }

    #[test]
    fn recency_examples() {
        assert_eq!(recency_weight(Unplanned, 0.0), 1.0);
        assert_eq!(recency_weight(Planned, 0.0), 0.5);
        assert!((recency_weight(Unplanned, std::f64::consts::E - 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_admission_pools_to_last_state() {
        let r = record(vec![adm(0.0, Planned, &[1], &[])]);
        let model = Model::new(small(CellKind::DeepCare), &mut Rng::new(1)).unwrap();
        let states = forward_sequence(&r, &model).unwrap();
        assert_eq!(states.len(), 1);
        let pooled = multiscale_pool(&states, &r, &DEFAULT_LOOKBACKS, Recency::Recency).unwrap();
        for b in 0..3 {
            assert_eq!(&pooled.as_slice()[4 * b..4 * b + 4], states[0].h.as_slice());
        }
    }

    #[test]
    fn window_membership_and_convexity() {
        let r = sample_record();
        let times: Vec<f64> = r.admissions.iter().map(|a| a.time_days).collect();
        let methods: Vec<_> = r.admissions.iter().map(|a| a.method).collect();
        let w = pool_windows(&times, &methods, &DEFAULT_LOOKBACKS, Recency::Recency);
        let members: Vec<Vec<usize>> = w.iter().map(|w| w.iter().map(|x| x.0).collect()).collect();
        // 400 days ≈ 13.1 months and 760 days ≈ 24.97 months before the end.
        assert_eq!(members, vec![vec![3], vec![2, 3], vec![0, 1, 2, 3]]);
        for win in &w {
            assert!((win.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let u = pool_windows(&times, &methods, &[f64::INFINITY], Recency::Uniform);
        assert!(u[0].iter().all(|x| x.1 == 0.25));
    }

    #[test]
    fn stretching_gaps_never_raises_recency() {
        let r = sample_record();
        let end = r.admissions.last().unwrap().time_days;
        for (t, a) in r.admissions.iter().enumerate().take(3) {
            let dt = (end - a.time_days) / DAYS_PER_MONTH;
            let stretched = recency_weight(a.method, 1.5 * dt + 1.0);
            assert!(stretched <= recency_weight(a.method, dt), "step {t}");
        }
    }

    #[test]
    fn zero_weights() {
        let model = Model::zeros(small(CellKind::DeepCare)).unwrap();
        let r = sample_record();
        for s in forward_sequence(&r, &model).unwrap() {
            assert_eq!(s.h.as_slice(), &[0.0; 4]);
        }
        assert_eq!(predict_risk(&model, &r).unwrap(), 0.5);
        let dist = next_diagnosis_distributions(&model, &r).unwrap();
        assert!(dist[0].iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let h = Vector::from_vec(vec![0.0; 12]);
        assert_eq!(risk_head(&h, &model.params.head).unwrap(), 0.5);
    }

    #[test]
    fn loss_examples() {
        assert!((cross_entropy(0.5, true) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(1.0 - 1e-15, true) < 1e-11);
        assert!((cross_entropy(1e-300, true) - 27.631_021_115_928_547).abs() < 1e-9);
        let uniform = Vector::from_vec(vec![0.25; 4]);
        assert!((multilabel_set_loss(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let peaked = Vector::from_vec(vec![1.0 - 3e-15, 1e-15, 1e-15, 1e-15]);
        assert!(multilabel_set_loss(&peaked, &[0]).unwrap() < 1e-14);
        assert_eq!(multilabel_set_loss(&uniform, &[2, 0]).unwrap(), multilabel_set_loss(&uniform, &[0, 2]).unwrap());
        assert!(multilabel_set_loss(&uniform, &[]).is_err());
        assert!(multilabel_set_loss(&uniform, &[4]).is_err());
    }

    #[test]
    fn label_head_properties() {
        let mut rng = Rng::new(4);
        let params = LabelHeadParams { v: Matrix::uniform(6, 4, 2.0, &mut rng) };
        let h = Vector::from_vec(vec![0.3, -0.2, 0.9, 0.1]);
        let d = label_head(&h, &params).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let argmax = |v: &Vector| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let mut scaled = params.clone();
        scaled.v.scale_in_place(3.0);
        assert_eq!(argmax(&d), argmax(&label_head(&h, &scaled).unwrap()));
        assert!(label_head(&Vector::zeros(3), &params).is_err());
    }

    #[test]
    fn vocabulary_permutation_invariance() {
        let model = Model::new(small(CellKind::DeepCare), &mut Rng::new(8)).unwrap();
        let r = sample_record();
        let perm = [3, 0, 4, 1, 2];
        let mut permuted_model = model.clone();
        for (old, &new) in perm.iter().enumerate() {
            for i in 0..3 {
                permuted_model.params.embedding.diagnosis.set(i, new, model.params.embedding.diagnosis.get(i, old));
            }
        }
        let mut permuted = r.clone();
        for a in &mut permuted.admissions {
            a.diagnoses = a.diagnoses.iter().map(|&c| perm[c]).collect();
        }
        let a = forward_sequence(&r, &model).unwrap();
        let b = forward_sequence(&permuted, &permuted_model).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn risk_task_reads_history_only() {
        let model = Model::new(small(CellKind::DeepCare), &mut Rng::new(2)).unwrap();
        let mut r = sample_record();
        r.prediction_point = Some(1);
        let tape = forward(&model, &r, Task::Risk, None).unwrap();
        assert_eq!(tape.n_steps(), 2);
        let mut changed = r.clone();
        changed.admissions[3].diagnoses = vec![4];
        assert_eq!(predict_risk(&model, &r).unwrap(), predict_risk(&model, &changed).unwrap());
        r.risk_label = None;
        assert!(forward(&model, &r, Task::Risk, None).is_err());
    }

    #[test]
    fn intervention_head_ignores_current_interventions() {
        let model = Model::new(small(CellKind::DeepCare), &mut Rng::new(6)).unwrap();
        let r = sample_record();
        let mut changed = r.clone();
        changed.admissions[2].interventions = vec![1];
        let a = intervention_distributions(&model, &r).unwrap();
        let b = intervention_distributions(&model, &changed).unwrap();
        assert_eq!(a[2], b[2]);
        assert_ne!(a[3], b[3], "later steps see the changed interventions");
    }

    #[test]
    fn classification_path_reduces_to_lstm_mean_logistic() {
        let cfg = ModelConfig {
            time: TimeMode::NoTime,
            lookbacks_months: vec![f64::INFINITY],
            recency: Recency::Uniform,
            head_dim: 0,
            ..small(CellKind::DeepCare)
        };
        let model = Model::new(cfg, &mut Rng::new(12)).unwrap();
        let r = record(vec![
            adm(0.0, Unplanned, &[0, 1], &[]),
            adm(10.0, Unplanned, &[2], &[]),
            adm(500.0, Unplanned, &[3, 4], &[]),
        ]);
        let CellParams::DeepCare(d) = &model.params.cell else { unreachable!() };
        let mut state = CellState::zeros(4);
        let mut sum = Vector::zeros(4);
        for a in &r.admissions {
            let (x, _) = pool_codes(&model.params.embedding.diagnosis, &a.diagnoses, PoolingMode::Max).unwrap();
            state = lstm_step(&x, &state, &d.lstm).unwrap();
            sum.add_assign(&state.h);
        }
        let mean = sum.scale(1.0 / 3.0);
        let w = Vector::from_vec(model.params.head.u_y.row(0).to_vec());
        let z = Vector::from_vec(vec![w.dot(&mean) + model.params.head.b_y[0]]);
        let expected = sigmoid(&z)[0];
        assert!((predict_risk(&model, &r).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn tensors_cover_parameters() {
        let model = Model::new(small(CellKind::DeepCare), &mut Rng::new(1)).unwrap();
        let names: Vec<_> = model.params.tensors().iter().map(|t| t.name).collect();
        assert!(names.contains(&"Q_f") && names.contains(&"P_o") && names.contains(&"A"));
        let mut z = model.params.zeros_like();
        assert!(z.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        z.tensors_mut()[0].data[0] = 1.0;
        assert_eq!(z.embedding.diagnosis.get(0, 0), 1.0);
        model.validate().unwrap();
        let mut broken = model.clone();
        broken.params.head.u_h = Matrix::zeros(1, 1);
        assert!(broken.validate().is_err());
        let no_q =
            Model::new(ModelConfig { time: TimeMode::Decay, ..small(CellKind::DeepCare) }, &mut Rng::new(1)).unwrap();
        assert!(!no_q.params.tensors().iter().any(|t| t.name == "Q_f"));
    }
}
