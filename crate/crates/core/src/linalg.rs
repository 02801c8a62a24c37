//! Small dense complex matrices for per-bin spatial statistics.
//!
//! Every spatial covariance in the model is `N_m × N_m` with a handful of
//! microphones, so matrices live inline on the stack with a fixed capacity
//! of [`MAX_DIM`]. Storage is row-major with a stride of `MAX_DIM`; entries
//! outside the active `n × n` block are kept at zero.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;

pub type C64 = Complex64;

/// Largest supported microphone count.
pub const MAX_DIM: usize = 4;

const ZERO: C64 = C64::new(0.0, 0.0);

#[inline]
fn idx(i: usize, j: usize) -> usize {
    i * MAX_DIM + j
}

/// Complex vector with inline storage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CVec {
    n: usize,
    a: [C64; MAX_DIM],
}

impl CVec {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_DIM, "dimension {n} exceeds MAX_DIM");
        Self { n, a: [ZERO; MAX_DIM] }
    }

    pub fn from_slice(x: &[C64]) -> Self {
        let mut v = Self::zeros(x.len());
        v.a[..x.len()].copy_from_slice(x);
        v
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.a[..self.n]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.as_slice().iter().map(|z| z.norm_sqr()).sum()
    }

    /// `selfᴴ other`
    pub fn dot(&self, other: &CVec) -> C64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scale(&self, s: C64) -> CVec {
        let mut out = *self;
        for z in &mut out.a[..self.n] {
            *z *= s;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<usize> for CVec {
    type Output = C64;
    #[inline]
    fn index(&self, i: usize) -> &C64 {
        &self.a[i]
    }
}

impl IndexMut<usize> for CVec {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.a[i]
    }
}

impl Add for CVec {
    type Output = CVec;
    fn add(mut self, rhs: CVec) -> CVec {
        for i in 0..self.n {
            self.a[i] += rhs.a[i];
        }
        self
    }
}

impl Sub for CVec {
    type Output = CVec;
    fn sub(mut self, rhs: CVec) -> CVec {
        for i in 0..self.n {
            self.a[i] -= rhs.a[i];
        }
        self
    }
}

impl AddAssign for CVec {
    fn add_assign(&mut self, rhs: CVec) {
        for i in 0..self.n {
            self.a[i] += rhs.a[i];
        }
    }
}

/// Complex square matrix with inline storage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CMat {
    n: usize,
    a: [C64; MAX_DIM * MAX_DIM],
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_DIM, "dimension {n} exceeds MAX_DIM");
        Self { n, a: [ZERO; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[idx(i, i)] = C64::new(s, 0.0);
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[idx(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Row-major packed `n × n` slice.
    pub fn from_packed(n: usize, data: &[C64]) -> Self {
        debug_assert_eq!(data.len(), n * n);
        Self::from_fn(n, |i, j| data[i * n + j])
    }

    pub fn write_packed(&self, out: &mut [C64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.a[idx(i, j)];
            }
        }
    }

    pub fn to_packed(&self) -> Vec<C64> {
        let mut v = vec![ZERO; self.n * self.n];
        self.write_packed(&mut v);
        v
    }

    /// `x xᴴ`
    pub fn outer(x: &CVec) -> Self {
        Self::outer2(x, x)
    }

    /// `x yᴴ`
    pub fn outer2(x: &CVec, y: &CVec) -> Self {
        let n = x.n;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[idx(i, j)] = x.a[i] * y.a[j].conj();
            }
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &x) in d.iter().enumerate() {
            m.a[idx(i, i)] = C64::new(x, 0.0);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn adjoint(&self) -> Self {
        let n = self.n;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[idx(i, j)] = self.a[idx(j, i)].conj();
            }
        }
        m
    }

    /// `(A + Aᴴ)/2`
    pub fn hermitize(&self) -> Self {
        let n = self.n;
        let mut m = *self;
        for i in 0..n {
            m.a[idx(i, i)] = C64::new(self.a[idx(i, i)].re, 0.0);
            for j in (i + 1)..n {
                let z = (self.a[idx(i, j)] + self.a[idx(j, i)].conj()) * 0.5;
                m.a[idx(i, j)] = z;
                m.a[idx(j, i)] = z.conj();
            }
        }
        m
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self.a[idx(i, i)]).sum()
    }

    /// Real part of the trace; the trace of a Hermitian matrix.
    pub fn re_trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[idx(i, i)].re).sum()
    }

    /// Frobenius real inner product `Re tr(selfᴴ other)`.
    pub fn inner(&self, other: &CMat) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = self.a[idx(i, j)];
                let b = other.a[idx(i, j)];
                s += a.re * b.re + a.im * b.im;
            }
        }
        s
    }

    pub fn norm_fro(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let n = self.n;
        (0..n).all(|i| (0..n).all(|j| {
            let z = self.a[idx(i, j)];
            z.re.is_finite() && z.im.is_finite()
        }))
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[idx(i, j)] *= s;
            }
        }
        m
    }

    /// `self += s * other`
    #[inline]
    pub fn axpy(&mut self, s: f64, other: &CMat) {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[idx(i, j)] += other.a[idx(i, j)] * s;
            }
        }
    }

    pub fn add_diag(&self, d: f64) -> Self {
        let mut m = *self;
        for i in 0..self.n {
            m.a[idx(i, i)].re += d;
        }
        m
    }

    pub fn mul_vec(&self, x: &CVec) -> CVec {
        let n = self.n;
        let mut y = CVec::zeros(n);
        for i in 0..n {
            let mut s = ZERO;
            for j in 0..n {
                s += self.a[idx(i, j)] * x.a[j];
            }
            y.a[i] = s;
        }
        y
    }

    /// `xᴴ A x` real part.
    pub fn quad_form(&self, x: &CVec) -> f64 {
        x.dot(&self.mul_vec(x)).re
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Option<Self> {
        let n = self.n;
        match n {
            0 => Some(*self),
            1 => {
                let d = self.a[0];
                if d.norm_sqr() == 0.0 {
                    return None;
                }
                let mut m = *self;
                m.a[0] = d.inv();
                Some(m)
            }
            2 => {
                let (a, b, c, d) = (self.a[idx(0, 0)], self.a[idx(0, 1)], self.a[idx(1, 0)], self.a[idx(1, 1)]);
                let det = a * d - b * c;
                if det.norm_sqr() == 0.0 || !det.re.is_finite() || !det.im.is_finite() {
                    return None;
                }
                let r = det.inv();
                let mut m = Self::zeros(2);
                m.a[idx(0, 0)] = d * r;
                m.a[idx(0, 1)] = -b * r;
                m.a[idx(1, 0)] = -c * r;
                m.a[idx(1, 1)] = a * r;
                Some(m)
            }
            _ => {
                let mut w = *self;
                let mut inv = Self::identity(n);
                for col in 0..n {
                    let piv = (col..n)
                        .max_by(|&x, &y| {
                            w.a[idx(x, col)].norm_sqr().total_cmp(&w.a[idx(y, col)].norm_sqr())
                        })
                        .unwrap();
                    if w.a[idx(piv, col)].norm_sqr() == 0.0 {
                        return None;
                    }
                    if piv != col {
                        for j in 0..n {
                            w.a.swap(idx(piv, j), idx(col, j));
                            inv.a.swap(idx(piv, j), idx(col, j));
                        }
                    }
                    let p = w.a[idx(col, col)].inv();
                    for j in 0..n {
                        w.a[idx(col, j)] *= p;
                        inv.a[idx(col, j)] *= p;
                    }
                    for r in 0..n {
                        if r == col {
                            continue;
                        }
                        let f = w.a[idx(r, col)];
                        if f == ZERO {
                            continue;
                        }
                        for j in 0..n {
                            let wv = w.a[idx(col, j)];
                            let iv = inv.a[idx(col, j)];
                            w.a[idx(r, j)] -= f * wv;
                            inv.a[idx(r, j)] -= f * iv;
                        }
                    }
                }
                if inv.is_finite() { Some(inv) } else { None }
            }
        }
    }

    /// Determinant by elimination with partial pivoting.
    pub fn det(&self) -> C64 {
        let n = self.n;
        match n {
            0 => C64::new(1.0, 0.0),
            1 => self.a[0],
            2 => self.a[idx(0, 0)] * self.a[idx(1, 1)] - self.a[idx(0, 1)] * self.a[idx(1, 0)],
            _ => {
                let mut w = *self;
                let mut det = C64::new(1.0, 0.0);
                for col in 0..n {
                    let piv = (col..n)
                        .max_by(|&x, &y| w.a[idx(x, col)].norm_sqr().total_cmp(&w.a[idx(y, col)].norm_sqr()))
                        .unwrap();
                    if w.a[idx(piv, col)].norm_sqr() == 0.0 {
                        return ZERO;
                    }
                    if piv != col {
                        for j in 0..n {
                            w.a.swap(idx(piv, j), idx(col, j));
                        }
                        det = -det;
                    }
                    let p = w.a[idx(col, col)];
                    det *= p;
                    for r in (col + 1)..n {
                        let f = w.a[idx(r, col)] / p;
                        for j in col..n {
                            let v = w.a[idx(col, j)];
                            w.a[idx(r, j)] -= f * v;
                        }
                    }
                }
                det
            }
        }
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eig_herm(&self) -> f64 {
        match self.n {
            0 => 0.0,
            1 => self.a[0].re,
            2 => {
                let a = self.a[idx(0, 0)].re;
                let d = self.a[idx(1, 1)].re;
                let b = (self.a[idx(0, 1)] + self.a[idx(1, 0)].conj()) * 0.5;
                let h = 0.5 * (a - d);
                0.5 * (a + d) - (h * h + b.norm_sqr()).sqrt()
            }
            _ => self.eigh().values[0],
        }
    }

    /// Eigendecomposition of the Hermitian part by cyclic Jacobi rotations.
    /// Eigenvalues are returned in ascending order; eigenvector `j` is column
    /// `j` of `vectors`.
    pub fn eigh(&self) -> HermEig {
        let n = self.n;
        let mut a = self.hermitize();
        let mut v = Self::identity(n);
        let scale = a.norm_fro();
        if n > 1 && scale > 0.0 {
            for _sweep in 0..64 {
                let mut off = 0.0;
                for p in 0..n {
                    for q in (p + 1)..n {
                        off += a.a[idx(p, q)].norm_sqr();
                    }
                }
                if off.sqrt() <= 1e-17 * scale {
                    break;
                }
                for p in 0..n {
                    for q in (p + 1)..n {
                        let apq = a.a[idx(p, q)];
                        let mag = apq.norm();
                        if mag <= 1e-300 {
                            continue;
                        }
                        let phase = apq / mag;
                        let app = a.a[idx(p, p)].re;
                        let aqq = a.a[idx(q, q)].re;
                        let theta = (aqq - app) / (2.0 * mag);
                        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                        let t = if theta == 0.0 { 1.0 } else { t };
                        let c = 1.0 / (t * t + 1.0).sqrt();
                        let s = t * c;
                        // J = D·P with D = diag(1, conj(phase)) on (p, q)
                        let jpp = C64::new(c, 0.0);
                        let jpq = C64::new(s, 0.0);
                        let jqp = phase.conj() * (-s);
                        let jqq = phase.conj() * c;
                        // a <- a J
                        for r in 0..n {
                            let arp = a.a[idx(r, p)];
                            let arq = a.a[idx(r, q)];
                            a.a[idx(r, p)] = arp * jpp + arq * jqp;
                            a.a[idx(r, q)] = arp * jpq + arq * jqq;
                            let vrp = v.a[idx(r, p)];
                            let vrq = v.a[idx(r, q)];
                            v.a[idx(r, p)] = vrp * jpp + vrq * jqp;
                            v.a[idx(r, q)] = vrp * jpq + vrq * jqq;
                        }
                        // a <- Jᴴ a
                        for col in 0..n {
                            let apc = a.a[idx(p, col)];
                            let aqc = a.a[idx(q, col)];
                            a.a[idx(p, col)] = jpp.conj() * apc + jqp.conj() * aqc;
                            a.a[idx(q, col)] = jpq.conj() * apc + jqq.conj() * aqc;
                        }
                        a.a[idx(p, q)] = ZERO;
                        a.a[idx(q, p)] = ZERO;
                        a.a[idx(p, p)].im = 0.0;
                        a.a[idx(q, q)].im = 0.0;
                    }
                }
            }
        }
        let mut order: [usize; MAX_DIM] = [0, 1, 2, 3];
        order[..n].sort_by(|&x, &y| a.a[idx(x, x)].re.total_cmp(&a.a[idx(y, y)].re));
        let mut values = [0.0; MAX_DIM];
        let mut vectors = Self::zeros(n);
        for (dst, &src) in order[..n].iter().enumerate() {
            values[dst] = a.a[idx(src, src)].re;
            for r in 0..n {
                vectors.a[idx(r, dst)] = v.a[idx(r, src)];
            }
        }
        HermEig { values, vectors }
    }

    /// Hermitize and raise every eigenvalue to at least `floor`.
    pub fn floor_eigenvalues(&self, floor: f64) -> Self {
        let h = self.hermitize();
        if h.min_eig_herm() >= floor {
            return h;
        }
        let e = h.eigh();
        let n = self.n;
        let mut d = [0.0; MAX_DIM];
        for i in 0..n {
            d[i] = e.values[i].max(floor);
        }
        e.reconstruct(&d[..n])
    }
}

/// Result of [`CMat::eigh`].
#[derive(Clone, Copy, Debug)]
pub struct HermEig {
    pub values: [f64; MAX_DIM],
    pub vectors: CMat,
}

impl HermEig {
    /// `U diag(d) Uᴴ`
    pub fn reconstruct(&self, d: &[f64]) -> CMat {
        let n = self.vectors.n;
        let u = &self.vectors;
        CMat::from_fn(n, |i, j| {
            let mut s = ZERO;
            for k in 0..n {
                s += u.a[idx(i, k)] * d[k] * u.a[idx(j, k)].conj();
            }
            s
        })
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.a[idx(i, j)]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.a[idx(i, j)]
    }
}

impl Add for CMat {
    type Output = CMat;
    #[inline]
    fn add(mut self, rhs: CMat) -> CMat {
        self += rhs;
        self
    }
}

impl AddAssign for CMat {
    #[inline]
    fn add_assign(&mut self, rhs: CMat) {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[idx(i, j)] += rhs.a[idx(i, j)];
            }
        }
    }
}

impl Sub for CMat {
    type Output = CMat;
    #[inline]
    fn sub(mut self, rhs: CMat) -> CMat {
        self -= rhs;
        self
    }
}

impl SubAssign for CMat {
    #[inline]
    fn sub_assign(&mut self, rhs: CMat) {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[idx(i, j)] -= rhs.a[idx(i, j)];
            }
        }
    }
}

impl Neg for CMat {
    type Output = CMat;
    fn neg(self) -> CMat {
        self.scale(-1.0)
    }
}

impl Mul for CMat {
    type Output = CMat;
    #[inline]
    fn mul(self, rhs: CMat) -> CMat {
        &self * &rhs
    }
}

impl Mul<&CMat> for &CMat {
    type Output = CMat;
    #[inline]
    fn mul(self, rhs: &CMat) -> CMat {
        let n = self.n;
        let mut m = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[idx(i, k)];
                if aik == ZERO {
                    continue;
                }
                for j in 0..n {
                    m.a[idx(i, j)] += aik * rhs.a[idx(k, j)];
                }
            }
        }
        m
    }
}

impl Mul<f64> for CMat {
    type Output = CMat;
    fn mul(self, s: f64) -> CMat {
        self.scale(s)
    }
}

/// Inversion with conditional diagonal loading.
///
/// The matrix is hermitized; if its smallest eigenvalue falls below
/// `rel * tr/n + abs`, that amount is added to the diagonal before inverting.
/// Returns the inverse and the loading that was applied.
pub fn loaded_inverse(m: &CMat, rel: f64, abs: f64) -> (CMat, Option<f64>) {
    let h = m.hermitize();
    let n = h.dim().max(1);
    let delta = rel * h.re_trace().max(0.0) / n as f64 + abs;
    if h.min_eig_herm() >= delta {
        if let Some(inv) = h.inverse() {
            return (inv.hermitize(), None);
        }
    }
    let loaded = h.add_diag(delta);
    let inv = loaded
        .inverse()
        .unwrap_or_else(|| CMat::scaled_identity(h.dim(), 1.0 / delta));
    (inv.hermitize(), Some(delta))
}
