//! Double-double arithmetic (about 32 significant digits) and a Jacobi
//! eigensolver on top of it, used as an independent high-precision oracle.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Newton step on the f64 estimate.
    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = Dd::from(self.hi.sqrt());
        x + (self - x * x) / (x * Dd::from(2.0))
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
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
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from(q3)
    }
}

pub type Mat = Vec<Vec<Dd>>;

pub fn from_f64(m: &[Vec<f64>]) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| Dd::from(v)).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (0..k).fold(Dd::ZERO, |acc, l| acc + a[i][l] * b[l][j]))
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Mat) -> Mat {
    let n = a.len();
    let mut l = vec![vec![Dd::ZERO; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s = s - l[i][k] * l[j][k];
            }
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    l
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Mat) -> Vec<Dd> {
    let n = a.len();
    let mut a = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j].hi * a[i][j].hi)
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i].hi * a[i][i].hi).sum();
        if off <= 1e-64 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                // Below double-double resolution of the diagonal; rotating
                // would overflow θ².
                if a[p][q].hi.abs() <= 1e-40 * (a[p][p].hi.abs() + a[q][q].hi.abs()) {
                    a[p][q] = Dd::ZERO;
                    a[q][p] = Dd::ZERO;
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (Dd::from(2.0) * a[p][q]);
                let sign = if theta.hi >= 0.0 { Dd::ONE } else { -Dd::ONE };
                let t = sign / (theta.abs() + (theta * theta + Dd::ONE).sqrt());
                let c = Dd::ONE / (t * t + Dd::ONE).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// `‖μa − μb‖² + Tr Σa + Tr Σb − 2 Σ √λ(Lᵀ Σa L)` with `Σb = L Lᵀ`; the
/// eigenvalues of `Lᵀ Σa L` equal those of `Σa Σb`.
pub fn frechet_oracle(mu_a: &[f64], sa: &[Vec<f64>], mu_b: &[f64], sb: &[Vec<f64>]) -> f64 {
    let (sa, sb) = (from_f64(sa), from_f64(sb));
    let l = cholesky(&sb);
    let inner = matmul(&matmul(&transpose(&l), &sa), &l);
    let tr_sqrt = jacobi_eigenvalues(&inner)
        .into_iter()
        .fold(Dd::ZERO, |acc, v| {
            assert!(v.hi.is_finite() && v.lo.is_finite(), "eigenvalue {v:?}");
            acc + if v.hi > 0.0 { v.sqrt() } else { Dd::ZERO }
        });
    let mut total = Dd::ZERO;
    for (a, b) in mu_a.iter().zip(mu_b) {
        let d = Dd::from(*a) - Dd::from(*b);
        total = total + d * d;
    }
    for i in 0..sa.len() {
        total = total + sa[i][i] + sb[i][i];
    }
    (total - Dd::from(2.0) * tr_sqrt).to_f64()
}
