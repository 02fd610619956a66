//! Recurrent step functions: plain RNN, standard LSTM, and the DeepCare cell
//! with admission-method input scaling, intervention-moderated output and
//! forget gates, and time-dependent forgetting.

use serde::{Deserialize, Serialize};

use crate::data::AdmissionMethod;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid_scalar, Matrix, Rng, Vector};

/// Gaps longer than this are clamped before building time features.
pub const MAX_TIME_FEATURE_DAYS: f64 = 3650.0;

/// Initial forget-gate bias.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeMode {
    NoTime,
    /// Forget gate scaled by `1 / ln(e + Δ)`.
    Decay,
    /// Forget gate pre-activation gains `Q_f · q_Δ`.
    Parametric,
}

impl TimeMode {
    pub const ALL: [TimeMode; 3] = [TimeMode::NoTime, TimeMode::Decay, TimeMode::Parametric];

    pub fn name(self) -> &'static str {
        match self {
            TimeMode::NoTime => "none",
            TimeMode::Decay => "decay",
            TimeMode::Parametric => "param",
        }
    }
}

impl std::str::FromStr for TimeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TimeMode::NoTime),
            "decay" => Ok(TimeMode::Decay),
            "param" => Ok(TimeMode::Parametric),
            _ => Err(Error::InvalidArgument(format!("time mode must be none, decay or param, got {s:?}"))),
        }
    }
}

/// `d(Δ) = 1 / ln(e + Δ)`, Δ in days.
pub fn time_decay(dt_days: f64) -> f64 {
    1.0 / (std::f64::consts::E + dt_days).ln()
}

/// `q_Δ = (Δ/60, (Δ/180)², (Δ/365)³)` with Δ clamped to
/// [`MAX_TIME_FEATURE_DAYS`].
pub fn time_features(dt_days: f64) -> [f64; 3] {
    let d = dt_days.min(MAX_TIME_FEATURE_DAYS);
    [d / 60.0, (d / 180.0).powi(2), (d / 365.0).powi(3)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    /// Hidden-to-hidden, K × K.
    pub recurrent: Matrix,
    /// Input-to-hidden, K × M.
    pub input: Matrix,
    pub bias: Vector,
}

impl RnnParams {
    pub fn zeros(m: usize, k: usize) -> Self {
        Self { recurrent: Matrix::zeros(k, k), input: Matrix::zeros(k, m), bias: Vector::zeros(k) }
    }

    pub fn init(m: usize, k: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            recurrent: Matrix::uniform(k, k, scale, rng),
            input: Matrix::uniform(k, m, scale, rng),
            bias: Vector::zeros(k),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.len()
    }
}

/// Gate weights; `w_*` are K × M, `u_*` are K × K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_c: Matrix,
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_o: Matrix,
    pub u_c: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub b_c: Vector,
}

impl LstmParams {
    pub fn zeros(m: usize, k: usize) -> Self {
        Self {
            w_i: Matrix::zeros(k, m),
            w_f: Matrix::zeros(k, m),
            w_o: Matrix::zeros(k, m),
            w_c: Matrix::zeros(k, m),
            u_i: Matrix::zeros(k, k),
            u_f: Matrix::zeros(k, k),
            u_o: Matrix::zeros(k, k),
            u_c: Matrix::zeros(k, k),
            b_i: Vector::zeros(k),
            b_f: Vector::zeros(k),
            b_o: Vector::zeros(k),
            b_c: Vector::zeros(k),
        }
    }

    pub fn init(m: usize, k: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(m, k);
        for w in [&mut p.w_i, &mut p.w_f, &mut p.w_o, &mut p.w_c] {
            *w = Matrix::uniform(k, m, scale, rng);
        }
        for u in [&mut p.u_i, &mut p.u_f, &mut p.u_o, &mut p.u_c] {
            *u = Matrix::uniform(k, k, scale, rng);
        }
        p.b_f = Vector::from_vec(vec![FORGET_BIAS_INIT; k]);
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_i.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepCareParams {
    pub lstm: LstmParams,
    /// Current-intervention weights on the output gate, K × M.
    pub p_o: Matrix,
    /// Previous-intervention weights on the forget gate, K × M.
    pub p_f: Matrix,
    /// Time weights on the forget gate, K × 3; parametric mode only.
    pub q_f: Option<Matrix>,
}

impl DeepCareParams {
    pub fn zeros(m: usize, k: usize, time: TimeMode) -> Self {
        Self {
            lstm: LstmParams::zeros(m, k),
            p_o: Matrix::zeros(k, m),
            p_f: Matrix::zeros(k, m),
            q_f: (time == TimeMode::Parametric).then(|| Matrix::zeros(k, 3)),
        }
    }

    pub fn init(m: usize, k: usize, time: TimeMode, scale: f64, rng: &mut Rng) -> Self {
        let lstm = LstmParams::init(m, k, scale, rng);
        let p_o = Matrix::uniform(k, m, scale, rng);
        let p_f = Matrix::uniform(k, m, scale, rng);
        let q_f = (time == TimeMode::Parametric).then(|| Matrix::uniform(k, 3, scale, rng));
        Self { lstm, p_o, p_f, q_f }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub c: Vector,
    pub h: Vector,
}

impl CellState {
    pub fn zeros(k: usize) -> Self {
        Self { c: Vector::zeros(k), h: Vector::zeros(k) }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

/// `h_t = tanh(b + W h_{t-1} + U x_t)`; `h_prev = None` is the first step,
/// `tanh(b + U x_0)`.
pub fn rnn_step(x: &Vector, h_prev: Option<&Vector>, params: &RnnParams) -> Result<Vector> {
    check_len("rnn input", x.len(), params.input.cols())?;
    if let Some(h) = h_prev {
        check_len("rnn hidden", h.len(), params.hidden_dim())?;
    }
    Ok(Vector::from_vec(rnn_forward(x.as_slice(), h_prev.map(Vector::as_slice), params)))
}

pub(crate) fn rnn_forward(x: &[f64], h_prev: Option<&[f64]>, params: &RnnParams) -> Vec<f64> {
    let mut a = vec![0.0; params.hidden_dim()];
    params.input.matvec_acc(x, &mut a);
    if let Some(h) = h_prev {
        params.recurrent.matvec_acc(h, &mut a);
    }
    a.iter_mut().zip(params.bias.iter()).for_each(|(v, b)| *v = (*v + b).tanh());
    a
}

/// Standard LSTM step, written directly from the gate equations.
pub fn lstm_step(x: &Vector, prev: &CellState, params: &LstmParams) -> Result<CellState> {
    let k = params.hidden_dim();
    check_len("lstm input", x.len(), params.input_dim())?;
    check_len("lstm hidden", prev.h.len(), k)?;
    check_len("lstm memory", prev.c.len(), k)?;
    let affine = |w: &Matrix, u: &Matrix, b: &Vector| -> Vector {
        let mut a = crate::linalg::matvec(w, x).expect("checked");
        a.add_assign(&crate::linalg::matvec(u, &prev.h).expect("checked"));
        a.add_assign(b);
        a
    };
    let i = crate::linalg::sigmoid(&affine(&params.w_i, &params.u_i, &params.b_i));
    let f = crate::linalg::sigmoid(&affine(&params.w_f, &params.u_f, &params.b_f));
    let o = crate::linalg::sigmoid(&affine(&params.w_o, &params.u_o, &params.b_o));
    let g = crate::linalg::tanh(&affine(&params.w_c, &params.u_c, &params.b_c));
    let mut c = f.hadamard(&prev.c);
    c.add_assign(&i.hadamard(&g));
    let h = o.hadamard(&crate::linalg::tanh(&c));
    Ok(CellState { c, h })
}

/// Everything computed in one gated step, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct GateTrace {
    /// `σ(·)` before the `1/m` scaling.
    pub i_sig: Vec<f64>,
    pub inv_m: f64,
    /// `σ(·)` before the decay factor.
    pub f_sig: Vec<f64>,
    pub decay: f64,
    pub q: Option<[f64; 3]>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl GateTrace {
    pub fn i(&self, j: usize) -> f64 {
        self.i_sig[j] * self.inv_m
    }

    pub fn f(&self, j: usize) -> f64 {
        self.f_sig[j] * self.decay
    }
}

/// Inputs to one gated step. For a plain LSTM the intervention and time
/// terms are absent and `inv_m = decay = 1`.
pub(crate) struct GateInputs<'a> {
    pub x: &'a [f64],
    pub h_prev: &'a [f64],
    pub c_prev: &'a [f64],
    pub p_cur: Option<&'a [f64]>,
    pub p_prev: Option<&'a [f64]>,
    pub inv_m: f64,
    pub decay: f64,
    pub q: Option<[f64; 3]>,
}

pub(crate) struct GateExtras<'a> {
    pub p_o: Option<&'a Matrix>,
    pub p_f: Option<&'a Matrix>,
    pub q_f: Option<&'a Matrix>,
}

impl GateExtras<'_> {
    pub const NONE: GateExtras<'static> = GateExtras { p_o: None, p_f: None, q_f: None };
}

pub(crate) fn gated_forward(lstm: &LstmParams, extras: &GateExtras<'_>, inp: &GateInputs<'_>) -> GateTrace {
    let k = lstm.hidden_dim();
    let pre = |w: &Matrix, u: &Matrix, b: &Vector, extra: &[(Option<&Matrix>, Option<&[f64]>)]| {
        let mut a = vec![0.0; k];
        w.matvec_acc(inp.x, &mut a);
        u.matvec_acc(inp.h_prev, &mut a);
        for (m, v) in extra {
            if let (Some(m), Some(v)) = (m, v) {
                m.matvec_acc(v, &mut a);
            }
        }
        a.iter_mut().zip(b.iter()).for_each(|(v, b)| *v += b);
        a
    };
    let q_slice = inp.q.as_ref().map(|q| q.as_slice());
    let a_i = pre(&lstm.w_i, &lstm.u_i, &lstm.b_i, &[]);
    let a_f = pre(&lstm.w_f, &lstm.u_f, &lstm.b_f, &[(extras.p_f, inp.p_prev), (extras.q_f, q_slice)]);
    let a_o = pre(&lstm.w_o, &lstm.u_o, &lstm.b_o, &[(extras.p_o, inp.p_cur)]);
    let a_g = pre(&lstm.w_c, &lstm.u_c, &lstm.b_c, &[]);
    let i_sig: Vec<f64> = a_i.into_iter().map(sigmoid_scalar).collect();
    let f_sig: Vec<f64> = a_f.into_iter().map(sigmoid_scalar).collect();
    let o: Vec<f64> = a_o.into_iter().map(sigmoid_scalar).collect();
    let g: Vec<f64> = a_g.into_iter().map(f64::tanh).collect();
    let mut c = vec![0.0; k];
    for j in 0..k {
        let i = i_sig[j] * inp.inv_m;
        let f = f_sig[j] * inp.decay;
        c[j] = f * inp.c_prev[j] + i * g[j];
    }
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
    GateTrace { i_sig, inv_m: inp.inv_m, f_sig, decay: inp.decay, q: inp.q, o, g, c, tanh_c, h }
}

/// The time inputs a step sees under `mode`.
pub(crate) fn time_terms(mode: TimeMode, dt_days: f64) -> (f64, Option<[f64; 3]>) {
    match mode {
        TimeMode::NoTime => (1.0, None),
        TimeMode::Decay => (time_decay(dt_days), None),
        TimeMode::Parametric => (1.0, Some(time_features(dt_days))),
    }
}

/// One DeepCare step. `p_prev` is the previous admission's intervention
/// vector (zeros at the first step); `dt_days` the gap since it.
#[allow(clippy::too_many_arguments)]
pub fn deepcare_step(
    x: &Vector,
    p_cur: &Vector,
    p_prev: &Vector,
    method: AdmissionMethod,
    dt_days: f64,
    prev: &CellState,
    params: &DeepCareParams,
    mode: TimeMode,
) -> Result<CellState> {
    if !(dt_days >= 0.0) {
        return Err(Error::InvalidArgument(format!("time gap must be non-negative, got {dt_days}")));
    }
    let k = params.lstm.hidden_dim();
    let m = params.lstm.input_dim();
    check_len("input", x.len(), m)?;
    check_len("current intervention", p_cur.len(), params.p_o.cols())?;
    check_len("previous intervention", p_prev.len(), params.p_f.cols())?;
    check_len("hidden", prev.h.len(), k)?;
    check_len("memory", prev.c.len(), k)?;
    if mode == TimeMode::Parametric && params.q_f.is_none() {
        return Err(Error::WrongMode { required: "time weights Q_f", actual: "no Q_f".into() });
    }
    let (decay, q) = time_terms(mode, dt_days);
    let extras = GateExtras {
        p_o: Some(&params.p_o),
        p_f: Some(&params.p_f),
        q_f: if mode == TimeMode::Parametric { params.q_f.as_ref() } else { None },
    };
    let trace = gated_forward(
        &params.lstm,
        &extras,
        &GateInputs {
            x: x.as_slice(),
            h_prev: prev.h.as_slice(),
            c_prev: prev.c.as_slice(),
            p_cur: Some(p_cur.as_slice()),
            p_prev: Some(p_prev.as_slice()),
            inv_m: 1.0 / method.weight(),
            decay,
            q,
        },
    );
    Ok(CellState { c: Vector::from_vec(trace.c), h: Vector::from_vec(trace.h) })
}

/// Gate values of one DeepCare step, for inspection and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates {
    pub input: Vector,
    pub forget: Vector,
    pub output: Vector,
    pub candidate: Vector,
}

#[allow(clippy::too_many_arguments)]
pub fn deepcare_gates(
    x: &Vector,
    p_cur: &Vector,
    p_prev: &Vector,
    method: AdmissionMethod,
    dt_days: f64,
    prev: &CellState,
    params: &DeepCareParams,
    mode: TimeMode,
) -> Gates {
    let (decay, q) = time_terms(mode, dt_days);
    let extras = GateExtras {
        p_o: Some(&params.p_o),
        p_f: Some(&params.p_f),
        q_f: if mode == TimeMode::Parametric { params.q_f.as_ref() } else { None },
    };
    let t = gated_forward(
        &params.lstm,
        &extras,
        &GateInputs {
            x: x.as_slice(),
            h_prev: prev.h.as_slice(),
            c_prev: prev.c.as_slice(),
            p_cur: Some(p_cur.as_slice()),
            p_prev: Some(p_prev.as_slice()),
            inv_m: 1.0 / method.weight(),
            decay,
            q,
        },
    );
    let k = t.o.len();
    Gates {
        input: (0..k).map(|j| t.i(j)).collect::<Vec<_>>().into(),
        forget: (0..k).map(|j| t.f(j)).collect::<Vec<_>>().into(),
        output: t.o.into(),
        candidate: t.g.into(),
    }
}

/// `Q_f · q_Δ`: the time term added to each forget-gate channel.
pub fn forget_time_contribution(dt_days: f64, q_f: Option<&Matrix>) -> Result<Vector> {
    let q_f = q_f.ok_or(Error::WrongMode { required: "parametric time", actual: "no time weights".into() })?;
    if q_f.cols() != 3 {
        return Err(Error::Shape(format!("Q_f must have 3 columns, has {}", q_f.cols())));
    }
    let mut out = vec![0.0; q_f.rows()];
    q_f.matvec_acc(&time_features(dt_days), &mut out);
    Ok(Vector::from_vec(out))
}
