//! Reverse-mode gradients through the unrolled sequence and a central
//! finite-difference oracle to check them.

use std::collections::HashSet;

mod dd;
mod reference;

use crate::cells::LstmParams;
use crate::data::PatientRecord;
use crate::embedding::pool_backward;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{
    forward, CellParams, DropoutMasks, LabelKind, Model, ModelParams, StepCell, Tape, Task, PROB_FLOOR,
};

/// Ties closer than this are treated as max-pool kinks by the checker.
pub const TIE_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-4;

/// One gradient buffer per parameter tensor, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub params: ModelParams,
}

impl GradStore {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self { params: params.zeros_like() }
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.params.tensors_mut().into_iter().zip(other.params.tensors()) {
            a.data.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.params.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn zero(&mut self) {
        for t in self.params.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.params.tensors().iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn gated_grads(p: &mut CellParams) -> Option<&mut LstmParams> {
    match p {
        CellParams::Rnn(_) => None,
        CellParams::Lstm(l) => Some(l),
        CellParams::DeepCare(d) => Some(&mut d.lstm),
    }
}

fn gated_params(p: &CellParams) -> Option<&LstmParams> {
    match p {
        CellParams::Rnn(_) => None,
        CellParams::Lstm(l) => Some(l),
        CellParams::DeepCare(d) => Some(&d.lstm),
    }
}

fn add_bias(b: &mut crate::linalg::Vector, d: &[f64]) {
    b.as_mut_slice().iter_mut().zip(d).for_each(|(x, y)| *x += y);
}

fn mask_in_place(v: &mut [f64], mask: Option<&Vec<f64>>) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
}

/// Exact gradient of `tape.loss` with respect to every parameter.
pub fn backward(tape: &Tape, model: &Model) -> Result<GradStore> {
    if tape.params_digest != model.params.digest() {
        return Err(Error::InvalidArgument("tape was recorded against different parameters".into()));
    }
    let params = &model.params;
    let cfg = &model.config;
    let k = cfg.hidden_dim;
    let m = cfg.embed_dim;
    let n = tape.steps.len();
    let mut grads = GradStore::zeros_like(params);
    let g = &mut grads.params;

    // Gradients arriving at each h_t and c_t from the heads, and at the
    // output-gate pre-activation of the intervention view.
    let mut dh_ext = vec![vec![0.0; k]; n];
    let mut dc_ext = vec![vec![0.0; k]; n];
    let mut da_o_ext = vec![vec![0.0; k]; n];

    if let Some(head) = &tape.head {
        let clamped = head.prob < PROB_FLOOR || head.prob > 1.0 - PROB_FLOOR;
        let dz = if clamped { 0.0 } else { head.prob - f64::from(u8::from(head.label)) };
        g.head.b_y.as_mut_slice()[0] += dz;
        let d = params.head.hidden_dim();
        let mut dpooled = vec![0.0; head.pooled.len()];
        if d == 0 {
            g.head.u_y.outer_acc(&[dz], &head.pooled);
            params.head.u_y.matvec_t_acc(&[dz], &mut dpooled);
        } else {
            let mut hidden = head.a_h.clone();
            mask_in_place(&mut hidden, head.hid_mask.as_ref());
            g.head.u_y.outer_acc(&[dz], &hidden);
            let mut dhidden = vec![0.0; d];
            params.head.u_y.matvec_t_acc(&[dz], &mut dhidden);
            mask_in_place(&mut dhidden, head.hid_mask.as_ref());
            let da: Vec<f64> = dhidden.iter().zip(&head.a_h).map(|(g, a)| g * a * (1.0 - a)).collect();
            g.head.u_h.outer_acc(&da, &head.pooled);
            add_bias(&mut g.head.b_h, &da);
            params.head.u_h.matvec_t_acc(&da, &mut dpooled);
        }
        mask_in_place(&mut dpooled, head.in_mask.as_ref());
        for (l, window) in head.windows.iter().enumerate() {
            let block = &dpooled[l * k..(l + 1) * k];
            for &(t, w) in window {
                dh_ext[t].iter_mut().zip(block).for_each(|(d, b)| *d += w * b);
            }
        }
    }

    for lt in &tape.labels {
        let (v, gv): (&Matrix, &mut Matrix) = match lt.kind {
            LabelKind::Diagnosis => (&params.diagnosis_head.v, &mut g.diagnosis_head.v),
            LabelKind::Intervention => (&params.intervention_head.v, &mut g.intervention_head.v),
        };
        let share = lt.weight / lt.targets.len() as f64;
        let mut dlogits = vec![0.0; lt.probs.len()];
        for &c in &lt.targets {
            if lt.probs[c] < PROB_FLOOR {
                continue;
            }
            dlogits.iter_mut().zip(&lt.probs).for_each(|(d, p)| *d += share * p);
            dlogits[c] -= share;
        }
        gv.outer_acc(&dlogits, &lt.input);
        let mut dinput = vec![0.0; k];
        v.matvec_t_acc(&dlogits, &mut dinput);
        mask_in_place(&mut dinput, lt.mask.as_ref());
        match (&lt.o_prime, &tape.steps[lt.step].cell) {
            (Some(o), StepCell::Gated(gt)) => {
                for j in 0..k {
                    let tc = gt.tanh_c[j];
                    dc_ext[lt.step][j] += dinput[j] * o[j] * (1.0 - tc * tc);
                    da_o_ext[lt.step][j] += dinput[j] * tc * o[j] * (1.0 - o[j]);
                }
            }
            _ => dh_ext[lt.step].iter_mut().zip(&dinput).for_each(|(d, x)| *d += x),
        }
    }

    let use_p = cfg.uses_interventions();
    let zeros_k = vec![0.0; k];
    let zeros_m = vec![0.0; m];
    let mut dh_next = vec![0.0; k];
    let mut dc_next = vec![0.0; k];
    let mut dp = vec![vec![0.0; m]; n];
    for t in (0..n).rev() {
        let step = &tape.steps[t];
        let dh: Vec<f64> = dh_ext[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let mut dx = vec![0.0; m];
        let h_prev: &[f64] = if t == 0 { &zeros_k } else { tape.steps[t - 1].cell.h() };
        match &step.cell {
            StepCell::Rnn { h } => {
                let (CellParams::Rnn(r), CellParams::Rnn(gr)) = (&params.cell, &mut g.cell) else {
                    return Err(Error::InvalidArgument("tape does not match the cell kind".into()));
                };
                let da: Vec<f64> = dh.iter().zip(h).map(|(d, h)| d * (1.0 - h * h)).collect();
                gr.input.outer_acc(&da, &step.x);
                add_bias(&mut gr.bias, &da);
                r.input.matvec_t_acc(&da, &mut dx);
                dh_next = vec![0.0; k];
                if t > 0 {
                    gr.recurrent.outer_acc(&da, h_prev);
                    r.recurrent.matvec_t_acc(&da, &mut dh_next);
                }
            }
            StepCell::Gated(gt) => {
                let lstm = gated_params(&params.cell)
                    .ok_or_else(|| Error::InvalidArgument("tape does not match the cell kind".into()))?;
                let c_prev: &[f64] = match t.checked_sub(1).map(|p| &tape.steps[p].cell) {
                    Some(StepCell::Gated(prev)) => &prev.c,
                    _ => &zeros_k,
                };
                let mut da_i = vec![0.0; k];
                let mut da_f = vec![0.0; k];
                let mut da_o = vec![0.0; k];
                let mut da_g = vec![0.0; k];
                let mut dc_prev = vec![0.0; k];
                for j in 0..k {
                    let tc = gt.tanh_c[j];
                    let o = gt.o[j];
                    let dc = dc_next[j] + dc_ext[t][j] + dh[j] * o * (1.0 - tc * tc);
                    da_o[j] = dh[j] * tc * o * (1.0 - o);
                    let is = gt.i_sig[j];
                    da_i[j] = dc * gt.g[j] * gt.inv_m * is * (1.0 - is);
                    let fs = gt.f_sig[j];
                    da_f[j] = dc * c_prev[j] * gt.decay * fs * (1.0 - fs);
                    da_g[j] = dc * gt.i(j) * (1.0 - gt.g[j] * gt.g[j]);
                    dc_prev[j] = dc * gt.f(j);
                }
                // The intervention view shares W_o, U_o, b_o but not P_o.
                let da_o_all: Vec<f64> = da_o.iter().zip(&da_o_ext[t]).map(|(a, b)| a + b).collect();
                let gl = gated_grads(&mut g.cell).expect("same cell kind");
                let mut dh_prev = vec![0.0; k];
                for (da, w, u, gw, gu, gb) in [
                    (&da_i, &lstm.w_i, &lstm.u_i, &mut gl.w_i, &mut gl.u_i, &mut gl.b_i),
                    (&da_f, &lstm.w_f, &lstm.u_f, &mut gl.w_f, &mut gl.u_f, &mut gl.b_f),
                    (&da_o_all, &lstm.w_o, &lstm.u_o, &mut gl.w_o, &mut gl.u_o, &mut gl.b_o),
                    (&da_g, &lstm.w_c, &lstm.u_c, &mut gl.w_c, &mut gl.u_c, &mut gl.b_c),
                ] {
                    gw.outer_acc(da, &step.x);
                    gu.outer_acc(da, h_prev);
                    add_bias(gb, da);
                    w.matvec_t_acc(da, &mut dx);
                    u.matvec_t_acc(da, &mut dh_prev);
                }
                if let (CellParams::DeepCare(d), CellParams::DeepCare(gd)) = (&params.cell, &mut g.cell) {
                    if use_p {
                        let p_prev: &[f64] = if t == 0 { &zeros_m } else { &tape.steps[t - 1].p };
                        gd.p_o.outer_acc(&da_o, &step.p);
                        gd.p_f.outer_acc(&da_f, p_prev);
                        d.p_o.matvec_t_acc(&da_o, &mut dp[t]);
                        if t > 0 {
                            d.p_f.matvec_t_acc(&da_f, &mut dp[t - 1]);
                        }
                    }
                    if let (Some(q), Some(gq)) = (&gt.q, &mut gd.q_f) {
                        gq.outer_acc(&da_f, q);
                    }
                }
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
        }
        mask_in_place(&mut dx, step.x_mask.as_ref());
        pool_backward(&mut g.embedding.diagnosis, &step.diagnoses, &step.x_pool, &dx);
        if use_p {
            // dp[t] is complete: step t+1 was processed first.
            let mut dpt = std::mem::take(&mut dp[t]);
            mask_in_place(&mut dpt, step.p_mask.as_ref());
            pool_backward(&mut g.embedding.intervention, &step.interventions, &step.p_pool, &dpt);
        }
    }
    Ok(grads)
}

/// Loss and gradient of one sequence.
pub fn loss_and_grad(
    model: &Model,
    record: &PatientRecord,
    task: Task,
    masks: Option<&DropoutMasks>,
) -> Result<(f64, GradStore)> {
    let tape = forward(model, record, task, masks)?;
    let grads = backward(&tape, model)?;
    Ok((tape.loss, grads))
}

/// Central differences `(f(x + h e_j) - f(x - h e_j)) / 2h` for a plain
/// function of a vector.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Summed loss over `records`, each with its own frozen masks.
fn total_loss(model: &Model, records: &[PatientRecord], task: Task, masks: Option<&[DropoutMasks]>) -> Result<f64> {
    let mut sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        sum += forward(model, r, task, masks.map(|m| &m[i]))?.loss;
    }
    Ok(sum)
}

/// Central-difference gradient of the summed loss over `records`.
pub fn finite_diff_grad(
    model: &Model,
    records: &[PatientRecord],
    task: Task,
    masks: Option<&[DropoutMasks]>,
    h: f64,
) -> Result<GradStore> {
    let mut probe = model.clone();
    let mut out = GradStore::zeros_like(&model.params);
    let n_tensors = model.params.tensors().len();
    for ti in 0..n_tensors {
        let len = model.params.tensors()[ti].data.len();
        for j in 0..len {
            let x = model.params.tensors()[ti].data[j];
            probe.params.tensors_mut()[ti].data[j] = x + h;
            let up = total_loss(&probe, records, task, masks)?;
            probe.params.tensors_mut()[ti].data[j] = x - h;
            let down = total_loss(&probe, records, task, masks)?;
            probe.params.tensors_mut()[ti].data[j] = x;
            out.params.tensors_mut()[ti].data[j] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Central differences of the summed loss computed by the extended
/// precision reference forward pass. The perturbation `x ± h` and the
/// quotient are exact to about 1e-30, so the result carries only the
/// `O(h²)` truncation error of the stencil.
pub fn reference_finite_diff_grad(
    model: &Model,
    records: &[PatientRecord],
    task: Task,
    masks: Option<&[DropoutMasks]>,
    h: f64,
) -> Result<GradStore> {
    use dd::Dd;
    use reference::{reference_loss, DdParams};
    model.validate()?;
    let mut probe = DdParams::from_params(&model.params);
    let total = |p: &DdParams| -> Result<Dd> {
        let mut sum = Dd::ZERO;
        for (i, r) in records.iter().enumerate() {
            sum = sum + reference_loss(&model.config, p, r, task, masks.map(|m| &m[i]))?;
        }
        Ok(sum)
    };
    let mut out = GradStore::zeros_like(&model.params);
    let mut grads = out.params.tensors_mut();
    let step = Dd::new(h);
    #[allow(clippy::needless_range_loop)]
    for ti in 0..probe.tensors.len() {
        for j in 0..probe.tensors[ti].data.len() {
            let x = probe.tensors[ti].data[j];
            probe.tensors[ti].data[j] = x + step;
            let up = total(&probe)?;
            probe.tensors[ti].data[j] = x - step;
            let down = total(&probe)?;
            probe.tensors[ti].data[j] = x;
            grads[ti].data[j] = ((up - down) / (step + step)).to_f64();
        }
    }
    drop(grads);
    Ok(out)
}

/// Summed loss over `records` from the extended precision reference.
pub fn reference_loss_total(
    model: &Model,
    records: &[PatientRecord],
    task: Task,
    masks: Option<&[DropoutMasks]>,
) -> Result<f64> {
    let p = reference::DdParams::from_params(&model.params);
    let mut sum = dd::Dd::ZERO;
    for (i, r) in records.iter().enumerate() {
        sum = sum + reference::reference_loss(&model.config, &p, r, task, masks.map(|m| &m[i]))?;
    }
    Ok(sum.to_f64())
}

/// Analytic gradient of the summed loss over `records`.
pub fn analytic_grad(
    model: &Model,
    records: &[PatientRecord],
    task: Task,
    masks: Option<&[DropoutMasks]>,
) -> Result<GradStore> {
    let mut out = GradStore::zeros_like(&model.params);
    for (i, r) in records.iter().enumerate() {
        let (_, g) = loss_and_grad(model, r, task, masks.map(|m| &m[i]))?;
        out.add_assign(&g);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub checked: usize,
    pub skipped_ties: usize,
    pub worst_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped_ties(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped_ties).sum()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Compares analytic gradients coordinate by coordinate with central
/// differences of the extended precision reference loss, skipping max-pool
/// coordinates that sit on a tie. Differencing the f64 forward instead
/// leaves roundoff near `ulp(L) / h`, which swamps gradients below ~1e-7.
pub fn gradcheck(
    model: &Model,
    records: &[PatientRecord],
    task: Task,
    masks: Option<&[DropoutMasks]>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut ties: HashSet<(&'static str, usize)> = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let tape = forward(model, r, task, masks.map(|m| &m[i]))?;
        for (name, row, col) in tape.max_pool_ties(&model.params, TIE_TOLERANCE) {
            let cols = match name {
                "A" => model.params.embedding.diagnosis.cols(),
                _ => model.params.embedding.intervention.cols(),
            };
            ties.insert((name, row * cols + col));
        }
    }
    let analytic = analytic_grad(model, records, task, masks)?;
    let numeric = reference_finite_diff_grad(model, records, task, masks, h)?;
    let tensors = analytic
        .params
        .tensors()
        .iter()
        .zip(numeric.params.tensors())
        .map(|(a, b)| {
            let mut check = TensorCheck {
                name: a.name,
                checked: 0,
                skipped_ties: 0,
                worst_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (j, (&ga, &gn)) in a.data.iter().zip(b.data).enumerate() {
                if ties.contains(&(a.name, j)) {
                    check.skipped_ties += 1;
                    continue;
                }
                check.checked += 1;
                let e = relative_error(ga, gn);
                if e > check.worst_rel_error {
                    check.worst_rel_error = e;
                    check.worst_index = j;
                    check.analytic = ga;
                    check.numeric = gn;
                }
            }
            check
        })
        .collect();
    Ok(GradCheckReport { tensors })
}

/// Seed of the fixed gradient-check instance. Its smallest pre-normalised
/// sum-pooled entry is 3.5e-3, far enough from the `sqrt` singularity of
/// sum pooling at zero for the `h = 1e-5` stencil to resolve.
pub const GRADCHECK_SEED: u64 = 1;

/// Sizes of the built-in gradient-check instance.
pub const CHECK_EMBED_DIM: usize = 4;
pub const CHECK_HIDDEN_DIM: usize = 5;
pub const CHECK_HEAD_DIM: usize = 3;
pub const CHECK_DIAGNOSES: usize = 6;
pub const CHECK_INTERVENTIONS: usize = 4;

/// Three random patients with 3 to 6 admissions each, every admission
/// carrying 1 to 3 diagnoses and 0 to 2 interventions.
pub fn gradcheck_records(seed: u64) -> Vec<PatientRecord> {
    use crate::data::{AdmissionMethod, CodedAdmission};
    let mut rng = crate::linalg::Rng::new(seed);
    let draw = |rng: &mut crate::linalg::Rng, n: usize, lo: usize, hi: usize| {
        let mut codes: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut codes);
        let take = lo + rng.below(hi - lo + 1);
        let mut out = codes[..take].to_vec();
        out.sort_unstable();
        out
    };
    (0..3)
        .map(|i| {
            let n = 3 + rng.below(4);
            let mut time = 0.0;
            let admissions = (0..n)
                .map(|t| {
                    if t > 0 {
                        time += 5.0 + 400.0 * rng.uniform();
                    }
                    let method = if rng.bernoulli(0.5) { AdmissionMethod::Planned } else { AdmissionMethod::Unplanned };
                    CodedAdmission {
                        time_days: time,
                        method,
                        diagnoses: draw(&mut rng, CHECK_DIAGNOSES, 1, 3),
                        interventions: draw(&mut rng, CHECK_INTERVENTIONS, 0, 2),
                    }
                })
                .collect();
            PatientRecord {
                patient_id: format!("g{i}"),
                admissions,
                risk_label: Some(i % 2 == 0),
                prediction_point: Some(n - 2),
            }
        })
        .collect()
}

/// One entry of the gradient-check matrix.
#[derive(Clone, Debug)]
pub struct CheckCase {
    pub label: String,
    pub config: crate::network::ModelConfig,
    pub task: Task,
}

impl CheckCase {
    /// Gradient check of this case on the built-in instance for `seed`:
    /// parameters and patients both drawn from `seed`.
    pub fn run(&self, seed: u64, h: f64) -> Result<GradCheckReport> {
        let model = Model::new(self.config.clone(), &mut crate::linalg::Rng::new(seed))?;
        gradcheck(&model, &gradcheck_records(seed), self.task, None, h)
    }
}

/// Every time mode × pooling × interventions on/off × {risk, label} for
/// the DeepCare cell, plus both plain cells under every pooling and task.
pub fn gradcheck_cases() -> Vec<CheckCase> {
    use crate::cells::TimeMode;
    use crate::embedding::PoolingMode;
    use crate::network::{CellKind, ModelConfig};
    let base = |cell| ModelConfig {
        embed_dim: CHECK_EMBED_DIM,
        hidden_dim: CHECK_HIDDEN_DIM,
        head_dim: CHECK_HEAD_DIM,
        init_scale: 0.5,
        ..ModelConfig::new(cell, CHECK_DIAGNOSES, CHECK_INTERVENTIONS)
    };
    let mut cases = Vec::new();
    for task in [Task::Risk, Task::Auxiliary] {
        for time in TimeMode::ALL {
            for pooling in PoolingMode::ALL {
                for interventions in [true, false] {
                    cases.push(CheckCase {
                        label: format!(
                            "deepcare time={} pool={} interv={} task={}",
                            time.name(),
                            pooling.name(),
                            if interventions { "on" } else { "off" },
                            task.name()
                        ),
                        config: ModelConfig { time, pooling, interventions, ..base(CellKind::DeepCare) },
                        task,
                    });
                }
            }
        }
        for cell in [CellKind::Rnn, CellKind::Lstm] {
            for pooling in PoolingMode::ALL {
                cases.push(CheckCase {
                    label: format!("{} pool={} task={}", cell.name(), pooling.name(), task.name()),
                    config: ModelConfig { pooling, ..base(cell) },
                    task,
                });
            }
        }
    }
    cases
}
