//! A second, independent implementation of every sequence loss, evaluated
//! in double-double precision. Central differences of this function are
//! accurate to the truncation error of the stencil, so they can referee
//! gradients far below the f64 rounding floor of the production forward.

use super::dd::{Dd, E};
use crate::cells::{TimeMode, MAX_TIME_FEATURE_DAYS};
use crate::data::{PatientRecord, DAYS_PER_MONTH};
use crate::embedding::PoolingMode;
use crate::error::{Error, Result};
use crate::network::{task_admissions, CellKind, DropoutMasks, ModelConfig, ModelParams, Recency, Task, PROB_FLOOR};

#[derive(Clone, Debug)]
pub(crate) struct DdTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Dd>,
}

impl DdTensor {
    fn at(&self, r: usize, c: usize) -> Dd {
        self.data[r * self.cols + c]
    }

    fn matvec(&self, v: &[Dd]) -> Vec<Dd> {
        (0..self.rows).map(|r| (0..self.cols).map(|c| self.at(r, c) * v[c]).sum()).collect()
    }
}

/// Parameters lifted to double-double, addressable by tensor name.
#[derive(Clone, Debug)]
pub(crate) struct DdParams {
    pub names: Vec<&'static str>,
    pub tensors: Vec<DdTensor>,
}

impl DdParams {
    pub fn from_params(params: &ModelParams) -> Self {
        let views = params.tensors();
        Self {
            names: views.iter().map(|t| t.name).collect(),
            tensors: views
                .iter()
                .map(|t| DdTensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|&v| Dd::new(v)).collect() })
                .collect(),
        }
    }

    fn get(&self, name: &str) -> &DdTensor {
        let i = self.names.iter().position(|n| *n == name).unwrap_or_else(|| panic!("no tensor {name}"));
        &self.tensors[i]
    }

    fn vector(&self, name: &str) -> &[Dd] {
        &self.get(name).data
    }
}

fn add(a: &[Dd], b: &[Dd]) -> Vec<Dd> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

fn masked(mut v: Vec<Dd>, mask: Option<&Vec<f64>>) -> Vec<Dd> {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, m)| *x = *x * Dd::new(*m));
    }
    v
}

fn pool(table: &DdTensor, codes: &[usize], mode: PoolingMode) -> Vec<Dd> {
    let dim = table.rows;
    if codes.is_empty() {
        return vec![Dd::ZERO; dim];
    }
    (0..dim)
        .map(|i| {
            let col = codes.iter().map(|&c| table.at(i, c));
            match mode {
                PoolingMode::Max => col.fold(Dd::new(f64::NEG_INFINITY), Dd::max),
                PoolingMode::Mean => col.sum::<Dd>() / Dd::new(codes.len() as f64),
                PoolingMode::Sum => {
                    let s: Dd = col.sum();
                    if s.hi == 0.0 {
                        Dd::ZERO
                    } else {
                        s / s.abs().sqrt()
                    }
                }
            }
        })
        .collect()
}

fn softmax(logits: &[Dd]) -> Vec<Dd> {
    let m = logits.iter().copied().fold(Dd::new(f64::NEG_INFINITY), Dd::max);
    let e: Vec<Dd> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: Dd = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn set_loss(probs: &[Dd], targets: &[usize]) -> Dd {
    let floor = Dd::new(PROB_FLOOR);
    let total: Dd = targets.iter().map(|&c| -probs[c].max(floor).ln()).sum();
    total / Dd::new(targets.len() as f64)
}

fn vec_mask(v: Option<&Vec<Option<Vec<f64>>>>, t: usize) -> Option<&Vec<f64>> {
    v.and_then(|v| v.get(t)).and_then(Option::as_ref)
}

struct Step {
    h: Vec<Dd>,
    c: Vec<Dd>,
    x: Vec<Dd>,
    p: Vec<Dd>,
}

/// Sequence loss for `task`, mirroring the production forward pass.
pub(crate) fn reference_loss(
    cfg: &ModelConfig,
    p: &DdParams,
    record: &PatientRecord,
    task: Task,
    masks: Option<&DropoutMasks>,
) -> Result<Dd> {
    let admissions = task_admissions(record, task);
    let k = cfg.hidden_dim;
    let m = cfg.embed_dim;
    let use_p = cfg.uses_interventions();
    let time = cfg.effective_time();
    let zero_k = vec![Dd::ZERO; k];
    let zero_m = vec![Dd::ZERO; m];
    let code_mask = |t: usize| masks.and_then(|ms| ms.codes.get(t)).and_then(Option::as_ref);

    let mut steps: Vec<Step> = Vec::with_capacity(admissions.len());
    for (t, adm) in admissions.iter().enumerate() {
        let (diag, interv) = match code_mask(t) {
            Some(cm) => (&cm.diagnoses, &cm.interventions),
            None => (&adm.diagnoses, &adm.interventions),
        };
        let x = masked(pool(p.get("A"), diag, cfg.pooling), vec_mask(masks.map(|m| &m.features_x), t));
        let pv = if use_p {
            masked(pool(p.get("B"), interv, cfg.pooling), vec_mask(masks.map(|m| &m.features_p), t))
        } else {
            Vec::new()
        };
        let (h_prev, c_prev) = steps.last().map_or((&zero_k, &zero_k), |s| (&s.h, &s.c));
        let (h, c) = if cfg.cell == CellKind::Rnn {
            let mut a = add(&p.get("rnn.U").matvec(&x), p.vector("rnn.b"));
            if t > 0 {
                a = add(&a, &p.get("rnn.W").matvec(h_prev));
            }
            (a.into_iter().map(Dd::tanh).collect(), zero_k.clone())
        } else {
            let pre =
                |w: &str, u: &str, b: &str| add(&add(&p.get(w).matvec(&x), &p.get(u).matvec(h_prev)), p.vector(b));
            let mut a_i = pre("W_i", "U_i", "b_i");
            let mut a_f = pre("W_f", "U_f", "b_f");
            let mut a_o = pre("W_o", "U_o", "b_o");
            let a_g = pre("W_c", "U_c", "b_c");
            let dt = if t == 0 { 0.0 } else { adm.time_days - admissions[t - 1].time_days };
            let mut inv_m = Dd::ONE;
            let mut decay = Dd::ONE;
            if cfg.cell == CellKind::DeepCare {
                inv_m = Dd::ONE / Dd::new(adm.method.weight());
                if use_p {
                    let p_prev = steps.last().map_or(&zero_m, |s| &s.p);
                    a_f = add(&a_f, &p.get("P_f").matvec(p_prev));
                    a_o = add(&a_o, &p.get("P_o").matvec(&pv));
                }
                let d = Dd::new(dt);
                match time {
                    TimeMode::NoTime => {}
                    TimeMode::Decay => decay = Dd::ONE / (E + d).ln(),
                    TimeMode::Parametric => {
                        let dc = Dd::new(dt.min(MAX_TIME_FEATURE_DAYS));
                        let a = dc / Dd::new(60.0);
                        let b = dc / Dd::new(180.0);
                        let y = dc / Dd::new(365.0);
                        a_f = add(&a_f, &p.get("Q_f").matvec(&[a, b * b, y * y * y]));
                    }
                }
            }
            a_i = a_i.into_iter().map(|v| v.sigmoid() * inv_m).collect();
            let f: Vec<Dd> = a_f.into_iter().map(|v| v.sigmoid() * decay).collect();
            let o: Vec<Dd> = a_o.into_iter().map(Dd::sigmoid).collect();
            let g: Vec<Dd> = a_g.into_iter().map(Dd::tanh).collect();
            let c: Vec<Dd> = (0..k).map(|j| f[j] * c_prev[j] + a_i[j] * g[j]).collect();
            let h = (0..k).map(|j| o[j] * c[j].tanh()).collect();
            (h, c)
        };
        steps.push(Step { h, c, x, p: pv });
    }

    let n = steps.len();
    let mut loss = Dd::ZERO;
    if task == Task::Risk {
        let label = record.risk_label.ok_or_else(|| Error::record(&record.patient_id, "risk label missing"))?;
        let end = admissions[n - 1].time_days;
        let mut pooled = Vec::with_capacity(cfg.pooled_dim());
        for &look in &cfg.lookbacks_months {
            let mut total = Dd::ZERO;
            let mut block = vec![Dd::ZERO; k];
            for (t, adm) in admissions.iter().enumerate() {
                let dt = (end - adm.time_days) / DAYS_PER_MONTH;
                if dt > look {
                    continue;
                }
                let r = match cfg.recency {
                    Recency::Recency => {
                        let dt = (Dd::new(end) - Dd::new(adm.time_days)) / Dd::new(DAYS_PER_MONTH);
                        Dd::ONE / (Dd::new(adm.method.weight()) + dt.ln_1p())
                    }
                    Recency::Uniform => Dd::ONE,
                };
                total = total + r;
                block.iter_mut().zip(&steps[t].h).for_each(|(b, h)| *b = *b + r * *h);
            }
            pooled.extend(block.into_iter().map(|b| b / total));
        }
        let pooled = masked(pooled, masks.and_then(|m| m.head_input.as_ref()));
        let hidden = if cfg.head_dim == 0 {
            pooled
        } else {
            let a: Vec<Dd> = add(&p.get("U_h").matvec(&pooled), p.vector("b_h")).into_iter().map(Dd::sigmoid).collect();
            masked(a, masks.and_then(|m| m.head_hidden.as_ref()))
        };
        let z = p.get("U_y").matvec(&hidden)[0] + p.vector("b_y")[0];
        let prob = z.sigmoid().max(Dd::new(PROB_FLOOR));
        let prob = if prob > Dd::ONE - Dd::new(PROB_FLOOR) { Dd::ONE - Dd::new(PROB_FLOOR) } else { prob };
        loss = if label { -prob.ln() } else { -(Dd::ONE - prob).ln() };
    }

    let label_mask = |t: usize| vec_mask(masks.map(|m| &m.label_input), t);
    if matches!(task, Task::NextDiagnosis | Task::Auxiliary) && n > 1 {
        let weight = Dd::ONE / Dd::new((n - 1) as f64);
        for t in 0..n - 1 {
            let input = masked(steps[t].h.clone(), label_mask(t));
            let probs = softmax(&p.get("V_diag").matvec(&input));
            loss = loss + weight * set_loss(&probs, &admissions[t + 1].diagnoses);
        }
    }
    if matches!(task, Task::Intervention | Task::Auxiliary) && cfg.n_interventions > 0 {
        let scored: Vec<usize> = (0..n).filter(|&t| !admissions[t].interventions.is_empty()).collect();
        let weight = Dd::ONE / Dd::new(scored.len().max(1) as f64);
        for t in scored {
            let input = if cfg.cell == CellKind::Rnn {
                steps[t].h.clone()
            } else {
                let h_prev = if t == 0 { &zero_k } else { &steps[t - 1].h };
                let a_o = add(&add(&p.get("W_o").matvec(&steps[t].x), &p.get("U_o").matvec(h_prev)), p.vector("b_o"));
                a_o.into_iter().zip(&steps[t].c).map(|(a, c)| a.sigmoid() * c.tanh()).collect()
            };
            let probs = softmax(&p.get("V_interv").matvec(&masked(input, label_mask(t))));
            loss = loss + weight * set_loss(&probs, &admissions[t].interventions);
        }
    }
    Ok(loss)
}
