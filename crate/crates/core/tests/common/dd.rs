//! Double-double arithmetic (~32 significant digits) and a definitional
//! network forward pass built on it. Finite differences of a loss evaluated
//! this way are free of the cancellation that limits plain f64 differences.

use std::ops::{Add, Div, Mul, Neg, Sub};

use kronsparse::network::Targets;
use kronsparse::{Activation, LayerKind, LayerSpec, LossKind, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self - Dd::LN2 * Dd::from_f64(k);
        // exp(r) = (exp(r / 2¹⁰))^(2¹⁰)
        let r = r.scale_pow2(-10);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..=22 {
            term = term * r / Dd::from_f64(i as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale_pow2(k as i32)
    }

    pub fn ln(self) -> Dd {
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn max(self, other: Dd) -> Dd {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let s = two_sum(self.hi, b.hi);
        let t = two_sum(self.lo, b.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = two_prod(self.hi, b.hi);
        let lo = p.lo + (self.hi * b.lo + self.lo * b.hi);
        quick_two_sum(p.hi, lo)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from_f64(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::from_f64(q3)
    }
}

/// Row-major matrix of double-doubles.
#[derive(Debug, Clone)]
pub struct DdMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Dd>,
}

impl DdMat {
    pub fn from_matrix(m: &Matrix) -> DdMat {
        DdMat {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| Dd::from_f64(v)).collect(),
        }
    }

    fn zeros(rows: usize, cols: usize) -> DdMat {
        DdMat {
            rows,
            cols,
            data: vec![Dd::ZERO; rows * cols],
        }
    }

    fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }
}

/// Adds `delta` to entry `k` exactly.
pub fn perturb(m: &mut DdMat, k: usize, delta: f64) {
    m.data[k] = m.data[k] + Dd::from_f64(delta);
}

/// Loss of a stack whose parameters are given in canonical order
/// (per factored layer: S, A₁..A_r, B₁..B_r; per dense layer: W).
pub fn dd_loss(specs: &[LayerSpec], params: &[DdMat], x: &DdMat, targets: Targets<'_>, kind: LossKind) -> Dd {
    let mut h = x.clone();
    let mut p = 0;
    for spec in specs {
        let w = match spec.kind {
            LayerKind::Kron { shape } => {
                let s = &params[p];
                let a = &params[p + 1..p + 1 + shape.r];
                let b = &params[p + 1 + shape.r..p + 1 + 2 * shape.r];
                p += 1 + 2 * shape.r;
                let mut w = DdMat::zeros(shape.m(), shape.n());
                for i in 0..shape.r {
                    for i1 in 0..shape.m1 {
                        for j1 in 0..shape.n1 {
                            let g = s.at(i1, j1) * a[i].at(i1, j1);
                            for i2 in 0..shape.m2 {
                                for j2 in 0..shape.n2 {
                                    let idx = (i1 * shape.m2 + i2) * w.cols + j1 * shape.n2 + j2;
                                    w.data[idx] = w.data[idx] + g * b[i].at(i2, j2);
                                }
                            }
                        }
                    }
                }
                w
            }
            LayerKind::Dense { .. } => {
                p += 1;
                params[p - 1].clone()
            }
        };
        let mut out = DdMat::zeros(h.rows, w.rows);
        for s in 0..h.rows {
            for i in 0..w.rows {
                let mut acc = Dd::ZERO;
                for j in 0..w.cols {
                    acc = acc + h.at(s, j) * w.at(i, j);
                }
                out.data[s * out.cols + i] = acc;
            }
        }
        if spec.activation == Activation::Relu {
            for v in &mut out.data {
                if v.hi <= 0.0 {
                    *v = Dd::ZERO;
                }
            }
        }
        h = out;
    }
    match kind {
        LossKind::SquaredFrobenius => {
            let y = match targets {
                Targets::Values(y) => y.clone(),
                Targets::Labels(_) => unreachable!("oracle uses value targets for the squared loss"),
            };
            let mut total = Dd::ZERO;
            for (o, &t) in h.data.iter().zip(y.data()) {
                let r = *o - Dd::from_f64(t);
                total = total + r * r;
            }
            total
        }
        LossKind::SoftmaxCrossEntropy => {
            let labels = match targets {
                Targets::Labels(l) => l.to_vec(),
                Targets::Values(y) => y.argmax_rows(),
            };
            let mut total = Dd::ZERO;
            for (s, &label) in labels.iter().enumerate() {
                let row = &h.data[s * h.cols..(s + 1) * h.cols];
                let mx = row.iter().copied().fold(row[0], Dd::max);
                let mut z = Dd::ZERO;
                for &v in row {
                    z = z + (v - mx).exp();
                }
                total = total + z.ln() - (row[label] - mx);
            }
            total / Dd::from_f64(h.rows as f64)
        }
    }
}
