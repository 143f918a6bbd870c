//! Small dense helpers used on hot paths, plus a pooled least-squares
//! accumulator for the regression-based conditional expectations.

use nalgebra::{DMatrix, SymmetricEigen};

/// `out += scale * m x`.
#[inline]
pub fn mat_vec_add(m: &DMatrix<f64>, x: &[f64], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(m.ncols(), x.len());
    debug_assert_eq!(m.nrows(), out.len());
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let s = scale * xj;
        for (o, &v) in out.iter_mut().zip(m.column(j).iter()) {
            *o += v * s;
        }
    }
}

/// `out += scale * mᵀ x`.
#[inline]
pub fn mat_t_vec_add(m: &DMatrix<f64>, x: &[f64], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(m.nrows(), x.len());
    debug_assert_eq!(m.ncols(), out.len());
    for (j, o) in out.iter_mut().enumerate() {
        let dot: f64 = m.column(j).iter().zip(x).map(|(a, b)| a * b).sum();
        *o += scale * dot;
    }
}

/// `out += scale · Mᵀ v` for a row-major `rows x cols` slice.
#[inline]
pub fn flat_t_vec_add(m: &[f64], rows: usize, cols: usize, v: &[f64], scale: f64, out: &mut [f64]) {
    for r in 0..rows {
        let s = scale * v[r];
        if s == 0.0 {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += s * mv;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

/// Zeroed scratch vector kept on the stack for small lengths.
pub enum Buf {
    Stack([f64; 8], usize),
    Heap(Vec<f64>),
}

impl Buf {
    #[inline]
    pub fn zeros(len: usize) -> Self {
        if len <= 8 {
            Buf::Stack([0.0; 8], len)
        } else {
            Buf::Heap(vec![0.0; len])
        }
    }
}

impl std::ops::Deref for Buf {
    type Target = [f64];
    #[inline]
    fn deref(&self) -> &[f64] {
        match self {
            Buf::Stack(a, n) => &a[..*n],
            Buf::Heap(v) => v,
        }
    }
}

impl std::ops::DerefMut for Buf {
    #[inline]
    fn deref_mut(&mut self) -> &mut [f64] {
        match self {
            Buf::Stack(a, n) => &mut a[..*n],
            Buf::Heap(v) => v,
        }
    }
}

/// Spectral norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Normal-equation accumulator for `targets ≈ features · β`.
///
/// Partial accumulators are merged with [`LeastSquares::merge`]; merging in a
/// fixed order keeps the result independent of how work was split.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    features: usize,
    targets: usize,
    count: usize,
    gram: Vec<f64>,
    cross: Vec<f64>,
}

/// Solved regression coefficients, `features x targets` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub features: usize,
    pub targets: usize,
    pub beta: Vec<f64>,
    /// True when the Gram matrix was singular and a ridge penalty was used.
    pub ridge: bool,
}

/// Relative penalty applied when the Gram matrix is rank deficient.
pub const RIDGE_PENALTY: f64 = 1e-8;

impl LeastSquares {
    pub fn new(features: usize, targets: usize) -> Self {
        Self {
            features,
            targets,
            count: 0,
            gram: vec![0.0; features * features],
            cross: vec![0.0; features * targets],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn add(&mut self, phi: &[f64], y: &[f64]) {
        let p = self.features;
        let t = self.targets;
        debug_assert_eq!(phi.len(), p);
        debug_assert_eq!(y.len(), t);
        self.count += 1;
        for i in 0..p {
            let fi = phi[i];
            if fi == 0.0 {
                continue;
            }
            let row = &mut self.gram[i * p..i * p + i + 1];
            for (g, &fj) in row.iter_mut().zip(&phi[..=i]) {
                *g += fi * fj;
            }
            let cr = &mut self.cross[i * t..(i + 1) * t];
            for (c, &yj) in cr.iter_mut().zip(y) {
                *c += fi * yj;
            }
        }
    }

    pub fn merge(&mut self, other: &LeastSquares) {
        debug_assert_eq!(self.features, other.features);
        debug_assert_eq!(self.targets, other.targets);
        self.count += other.count;
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
    }

    /// Solves the normal equations by Cholesky, falling back to a ridge
    /// penalty of [`RIDGE_PENALTY`] times the mean diagonal when a pivot
    /// collapses.
    pub fn solve(&self) -> Coefficients {
        let p = self.features;
        let mut gram = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                gram[i * p + j] = self.gram[i * p + j];
                gram[j * p + i] = self.gram[i * p + j];
            }
        }
        let (factor, ridge) = match cholesky(&gram, p) {
            Some(l) => (l, false),
            None => {
                let scale = (0..p).map(|i| gram[i * p + i]).sum::<f64>() / p as f64;
                let lambda = RIDGE_PENALTY * if scale > 0.0 { scale } else { 1.0 };
                for i in 0..p {
                    gram[i * p + i] += lambda;
                }
                (cholesky(&gram, p).expect("ridge-regularised Gram matrix is positive definite"), true)
            }
        };
        let t = self.targets;
        let mut beta = vec![0.0; p * t];
        let mut col = vec![0.0; p];
        for j in 0..t {
            for i in 0..p {
                col[i] = self.cross[i * t + j];
            }
            cholesky_solve(&factor, p, &mut col);
            for i in 0..p {
                beta[i * t + j] = col[i];
            }
        }
        Coefficients {
            features: p,
            targets: t,
            beta,
            ridge,
        }
    }
}

impl Coefficients {
    pub fn zeros(features: usize, targets: usize) -> Self {
        Self {
            features,
            targets,
            beta: vec![0.0; features * targets],
            ridge: false,
        }
    }

    /// Fitted targets at feature vector `phi`.
    #[inline]
    pub fn predict(&self, phi: &[f64], out: &mut [f64]) {
        let t = self.targets;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &f) in phi.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(&self.beta[i * t..(i + 1) * t]) {
                *o += f * b;
            }
        }
    }
}

/// Lower Cholesky factor (row-major). Returns `None` if a pivot falls below
/// `1e-12` times the corresponding original diagonal entry.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                let diag = a[i * n + i];
                if !(s > 1e-12 * diag.abs().max(f64::MIN_POSITIVE)) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `m x = b` for a small square matrix by LU with partial pivoting.
pub fn solve_square(m: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let lu = m.clone().lu();
    let rhs = nalgebra::DVector::from_column_slice(b);
    lu.solve(&rhs).map(|v| v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_affine_fit() {
        let mut ls = LeastSquares::new(2, 2);
        for i in 0..10 {
            let x = i as f64 * 0.3 - 1.0;
            ls.add(&[1.0, x], &[2.0 + 3.0 * x, -x]);
        }
        let c = ls.solve();
        assert!(!c.ridge);
        let expect = [2.0, 0.0, 3.0, -1.0];
        for (a, b) in c.beta.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn collinear_features_use_ridge() {
        let mut ls = LeastSquares::new(2, 1);
        for _ in 0..5 {
            ls.add(&[1.0, 2.0], &[4.0]);
        }
        let c = ls.solve();
        assert!(c.ridge);
        let mut out = [0.0];
        c.predict(&[1.0, 2.0], &mut out);
        assert!((out[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn merge_matches_single_pass() {
        let mut a = LeastSquares::new(2, 1);
        let mut b = LeastSquares::new(2, 1);
        let mut all = LeastSquares::new(2, 1);
        for i in 0..20 {
            let x = (i as f64).sin();
            let y = [x * x];
            all.add(&[1.0, x], &y);
            if i < 7 { a.add(&[1.0, x], &y) } else { b.add(&[1.0, x], &y) }
        }
        a.merge(&b);
        assert_eq!(a.count(), 20);
        let (ca, cb) = (a.solve(), all.solve());
        for (u, v) in ca.beta.iter().zip(&cb.beta) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_vector_products() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = [0.0; 2];
        mat_vec_add(&m, &[1.0, 0.0, -1.0], 1.0, &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut out = [0.0; 3];
        mat_t_vec_add(&m, &[1.0, 1.0], 2.0, &mut out);
        assert_eq!(out, [10.0, 14.0, 18.0]);
    }
}
