//! Double-double arithmetic: a value is the unevaluated sum `hi + lo` with
//! `|lo| <= ulp(hi) / 2`, giving about 106 bits of significand. Only what
//! the reference forward pass needs is provided.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };
pub const E: Dd = Dd { hi: std::f64::consts::E, lo: 1.445_646_891_729_250_2e-16 };

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn from_parts(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Exact scaling by `2^k`.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let y = Dd::new(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // |r| <= ln2/2, then scaled down by 2^9 so the series converges fast.
        let r = (self - LN2 * Dd::new(k)).ldexp(-9);
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / Dd::new(f64::from(n));
            sum = sum + term;
            if term.hi.abs() < 1e-34 {
                break;
            }
        }
        // e^{2a} - 1 = 2(e^a - 1) + (e^a - 1)^2, applied 9 times.
        for _ in 0..9 {
            sum = sum + sum + sum * sum;
        }
        let one_plus = sum + Dd::ONE;
        let k = k as i32;
        if k > 1000 {
            one_plus.ldexp(1000).ldexp(k - 1000)
        } else if k < -1000 {
            one_plus.ldexp(-1000).ldexp(k + 1000)
        } else {
            one_plus.ldexp(k)
        }
    }

    pub fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(f64::NEG_INFINITY);
        }
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn ln_1p(self) -> Self {
        (Dd::ONE + self).ln()
    }

    pub fn tanh(self) -> Self {
        let t = (-(self.abs() + self.abs())).exp();
        let v = (Dd::ONE - t) / (Dd::ONE + t);
        if self.hi < 0.0 {
            -v
        } else {
            v
        }
    }

    pub fn sigmoid(self) -> Self {
        if self.hi >= 0.0 {
            Dd::ONE / (Dd::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Dd::ONE + e)
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::from_parts(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        Dd::from_parts(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self - y * Dd::new(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::new(q2);
        let q3 = r.hi / y.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl std::iter::Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: f64, tol: f64) -> bool {
        (a.to_f64() - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn arithmetic_beyond_f64() {
        let tiny = Dd::new(1e-20);
        let x = Dd::ONE + tiny - Dd::ONE;
        assert_eq!(x.hi, 1e-20);
        let third = Dd::ONE / Dd::new(3.0);
        let back = third * Dd::new(3.0) - Dd::ONE;
        assert!(back.to_f64().abs() < 1e-31);
    }

    #[test]
    fn elementary_functions_match_f64() {
        for x in [-30.0, -2.5, -0.3, -1e-6, 0.0, 1e-7, 0.4, 1.0, 3.7, 25.0] {
            let d = Dd::new(x);
            assert!(close(d.exp(), x.exp(), 4e-16), "exp {x}");
            assert!(close(d.tanh(), x.tanh(), 4e-16), "tanh {x}");
            assert!(close(d.sigmoid(), 1.0 / (1.0 + (-x).exp()), 4e-16), "sigmoid {x}");
            if x > 0.0 {
                assert!(close(d.ln(), x.ln(), 4e-16), "ln {x}");
                assert!(close(d.sqrt(), x.sqrt(), 4e-16), "sqrt {x}");
            }
        }
        assert!(close(Dd::new(0.7).ln_1p(), 0.7f64.ln_1p(), 4e-16));
    }

    #[test]
    fn extended_precision_identities() {
        for x in [0.1, 0.9, 2.0, 17.0] {
            let d = Dd::new(x);
            assert!((d.ln().exp() - d).to_f64().abs() < 1e-29 * x);
            assert!((d.sqrt() * d.sqrt() - d).to_f64().abs() < 1e-29 * x);
        }
        assert!((E.ln() - Dd::ONE).to_f64().abs() < 1e-30);
        assert!((Dd::new(2.0).ln() - LN2).to_f64().abs() < 1e-31);
    }
}
