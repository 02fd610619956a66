//! Admission embedding: code sets pooled into fixed-width vectors.

use serde::{Deserialize, Serialize};

use crate::data::CodedAdmission;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng, Vector};

pub const DEFAULT_INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolingMode {
    /// Elementwise max over code columns.
    Max,
    /// Column sum normalised elementwise by `sqrt(|s|)`.
    Sum,
    Mean,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 3] = [PoolingMode::Max, PoolingMode::Sum, PoolingMode::Mean];

    pub fn name(self) -> &'static str {
        match self {
            PoolingMode::Max => "max",
            PoolingMode::Sum => "sum",
            PoolingMode::Mean => "mean",
        }
    }
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolingMode::Max),
            "sum" => Ok(PoolingMode::Sum),
            "mean" => Ok(PoolingMode::Mean),
            _ => Err(Error::InvalidArgument(format!("pooling must be max, sum or mean, got {s:?}"))),
        }
    }
}

/// Diagnosis matrix `A` (M × |D|) and intervention matrix `B` (M × |I|);
/// column `j` embeds code `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub diagnosis: Matrix,
    pub intervention: Matrix,
}

impl EmbeddingParams {
    pub fn dim(&self) -> usize {
        self.diagnosis.rows()
    }
}

pub fn init_embeddings(
    dim: usize,
    n_diagnoses: usize,
    n_interventions: usize,
    rng: &mut Rng,
    init_scale: f64,
) -> EmbeddingParams {
    EmbeddingParams {
        diagnosis: Matrix::uniform(dim, n_diagnoses, init_scale, rng),
        intervention: Matrix::uniform(dim, n_interventions, init_scale, rng),
    }
}

/// What the backward pass needs from a pooled code set.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolTrace {
    Empty,
    /// Winning code per output coordinate.
    Max {
        argmax: Vec<usize>,
    },
    Sum {
        sum: Vec<f64>,
    },
    Mean,
}

/// Pools the columns of `table` selected by `codes`. An empty set pools to
/// the zero vector.
pub fn pool_codes(table: &Matrix, codes: &[usize], mode: PoolingMode) -> Result<(Vector, PoolTrace)> {
    let dim = table.rows();
    if let Some(&bad) = codes.iter().find(|&&c| c >= table.cols()) {
        return Err(Error::InvalidArgument(format!("code index {bad} out of range for {} codes", table.cols())));
    }
    if codes.is_empty() {
        return Ok((Vector::zeros(dim), PoolTrace::Empty));
    }
    match mode {
        PoolingMode::Max => {
            let mut out = vec![f64::NEG_INFINITY; dim];
            let mut argmax = vec![codes[0]; dim];
            for &c in codes {
                for i in 0..dim {
                    let v = table.get(i, c);
                    if v > out[i] {
                        out[i] = v;
                        argmax[i] = c;
                    }
                }
            }
            Ok((Vector::from_vec(out), PoolTrace::Max { argmax }))
        }
        PoolingMode::Sum => {
            let sum = column_sum(table, codes);
            let out = sum.iter().map(|&s| if s == 0.0 { 0.0 } else { s / s.abs().sqrt() }).collect();
            Ok((Vector::from_vec(out), PoolTrace::Sum { sum }))
        }
        PoolingMode::Mean => {
            let n = codes.len() as f64;
            let out = column_sum(table, codes).into_iter().map(|s| s / n).collect();
            Ok((Vector::from_vec(out), PoolTrace::Mean))
        }
    }
}

fn column_sum(table: &Matrix, codes: &[usize]) -> Vec<f64> {
    (0..table.rows()).map(|i| codes.iter().map(|&c| table.get(i, c)).sum()).collect()
}

/// Scatters `upstream` (gradient w.r.t. the pooled vector) into `grad`.
pub fn pool_backward(grad: &mut Matrix, codes: &[usize], trace: &PoolTrace, upstream: &[f64]) {
    match trace {
        PoolTrace::Empty => {}
        PoolTrace::Max { argmax } => {
            for (i, (&c, &g)) in argmax.iter().zip(upstream).enumerate() {
                grad.set(i, c, grad.get(i, c) + g);
            }
        }
        PoolTrace::Sum { sum } => {
            for (i, (&s, &g)) in sum.iter().zip(upstream).enumerate() {
                // d/ds [s / sqrt|s|] = 1 / (2 sqrt|s|); zero at the guarded point.
                if s == 0.0 {
                    continue;
                }
                let d = g * 0.5 / s.abs().sqrt();
                for &c in codes {
                    grad.set(i, c, grad.get(i, c) + d);
                }
            }
        }
        PoolTrace::Mean => {
            let inv = 1.0 / codes.len() as f64;
            for (i, &g) in upstream.iter().enumerate() {
                for &c in codes {
                    grad.set(i, c, grad.get(i, c) + g * inv);
                }
            }
        }
    }
}

/// Codes surviving code-level dropout for one admission.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMask {
    pub diagnoses: Vec<usize>,
    pub interventions: Vec<usize>,
}

impl CodeMask {
    /// Keeps each code with probability `keep`; diagnoses are redrawn until
    /// at least one survives, interventions may all drop.
    pub fn sample(adm: &CodedAdmission, keep: f64, rng: &mut Rng) -> Self {
        if keep >= 1.0 {
            return Self { diagnoses: adm.diagnoses.clone(), interventions: adm.interventions.clone() };
        }
        let diagnoses = loop {
            let kept: Vec<usize> = adm.diagnoses.iter().copied().filter(|_| rng.bernoulli(keep)).collect();
            if !kept.is_empty() {
                break kept;
            }
        };
        let interventions = adm.interventions.iter().copied().filter(|_| rng.bernoulli(keep)).collect();
        Self { diagnoses, interventions }
    }
}

/// `(x_t, p_t)` for one admission.
pub fn embed_admission(
    adm: &CodedAdmission,
    params: &EmbeddingParams,
    mode: PoolingMode,
    mask: Option<&CodeMask>,
) -> Result<(Vector, Vector)> {
    let (diag, interv) = match mask {
        Some(m) => (&m.diagnoses, &m.interventions),
        None => (&adm.diagnoses, &adm.interventions),
    };
    let (x, _) = pool_codes(&params.diagnosis, diag, mode)?;
    let (p, _) = pool_codes(&params.intervention, interv, mode)?;
    Ok((x, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AdmissionMethod;
    use crate::linalg::Rng;
    use proptest::prelude::*;

    fn table() -> Matrix {
        // columns: [1,3], [3,1], [0,0], [-2,5]
        Matrix::from_rows(&[&[1.0, 3.0, 0.0, -2.0], &[3.0, 1.0, 0.0, 5.0]]).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let t = table();
        assert_eq!(pool_codes(&t, &[0, 1], PoolingMode::Mean).unwrap().0.as_slice(), &[2.0, 2.0]);
        assert_eq!(pool_codes(&t, &[0, 1], PoolingMode::Max).unwrap().0.as_slice(), &[3.0, 3.0]);
        assert_eq!(pool_codes(&t, &[0, 1], PoolingMode::Sum).unwrap().0.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn singleton_sets() {
        let t = table();
        let col = [-2.0, 5.0];
        assert_eq!(pool_codes(&t, &[3], PoolingMode::Mean).unwrap().0.as_slice(), &col);
        assert_eq!(pool_codes(&t, &[3], PoolingMode::Max).unwrap().0.as_slice(), &col);
        let s = pool_codes(&t, &[3], PoolingMode::Sum).unwrap().0;
        assert_eq!(s.as_slice(), &[-2.0 / 2f64.sqrt(), 5.0 / 5f64.sqrt()]);
    }

    #[test]
    fn sum_pool_zero_is_zero() {
        let t = table();
        let (v, _) = pool_codes(&t, &[2], PoolingMode::Sum).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0]);
        let cancel = Matrix::from_rows(&[&[1.0, -1.0]]).unwrap();
        let (v, trace) = pool_codes(&cancel, &[0, 1], PoolingMode::Sum).unwrap();
        assert_eq!(v.as_slice(), &[0.0]);
        let mut g = Matrix::zeros(1, 2);
        pool_backward(&mut g, &[0, 1], &trace, &[1.0]);
        assert!(g.is_finite() && g.as_slice() == [0.0, 0.0]);
    }

    #[test]
    fn empty_interventions_pool_to_zero() {
        let params = EmbeddingParams { diagnosis: table(), intervention: Matrix::uniform(2, 3, 1.0, &mut Rng::new(1)) };
        let adm = CodedAdmission {
            time_days: 0.0,
            method: AdmissionMethod::Planned,
            diagnoses: vec![0],
            interventions: vec![],
        };
        for mode in PoolingMode::ALL {
            let (_, p) = embed_admission(&adm, &params, mode, None).unwrap();
            assert_eq!(p.as_slice(), &[0.0, 0.0]);
        }
        let bad = CodedAdmission { diagnoses: vec![9], ..adm };
        assert!(embed_admission(&bad, &params, PoolingMode::Mean, None).is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        let e = init_embeddings(10, 243, 7, &mut Rng::new(3), DEFAULT_INIT_SCALE);
        assert_eq!((e.diagnosis.rows(), e.diagnosis.cols()), (10, 243));
        assert_eq!(e, init_embeddings(10, 243, 7, &mut Rng::new(3), DEFAULT_INIT_SCALE));
        let z = init_embeddings(4, 5, 6, &mut Rng::new(3), 0.0);
        assert!(z.diagnosis.as_slice().iter().chain(z.intervention.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn code_dropout_never_empties_diagnoses() {
        let adm = CodedAdmission {
            time_days: 0.0,
            method: AdmissionMethod::Planned,
            diagnoses: vec![0, 1],
            interventions: vec![0],
        };
        let mut rng = Rng::new(11);
        for _ in 0..2000 {
            let m = CodeMask::sample(&adm, 0.1, &mut rng);
            assert!(!m.diagnoses.is_empty());
        }
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let t = Matrix::uniform(3, 8, 1.0, &mut rng);
            let mut codes: Vec<usize> = (0..8).collect();
            rng.shuffle(&mut codes);
            codes.truncate(n);
            let mut perm = codes.clone();
            rng.shuffle(&mut perm);
            for mode in PoolingMode::ALL {
                let a = pool_codes(&t, &codes, mode).unwrap().0;
                let b = pool_codes(&t, &perm, mode).unwrap().0;
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn max_pool_monotone_and_bounds(seed in 0u64..1000, n in 1usize..7) {
            let mut rng = Rng::new(seed);
            let t = Matrix::uniform(4, 8, 0.5, &mut rng);
            let codes: Vec<usize> = (0..n).collect();
            let smaller = pool_codes(&t, &codes[..n.saturating_sub(1).max(1)], PoolingMode::Max).unwrap().0;
            let larger = pool_codes(&t, &codes, PoolingMode::Max).unwrap().0;
            if n > 1 {
                for (a, b) in smaller.iter().zip(larger.iter()) {
                    prop_assert!(b >= a);
                }
            }
            let bound = 4.0 * 0.5;
            for mode in [PoolingMode::Mean, PoolingMode::Sum] {
                let v = pool_codes(&t, &codes, mode).unwrap().0;
                prop_assert!(v.iter().all(|x| x.abs() <= bound));
            }
        }
    }
}
