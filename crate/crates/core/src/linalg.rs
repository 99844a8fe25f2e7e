//! Dense complex linear algebra helpers shared by the solver and the analysis modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Normalized trace `N^{-1} Tr X`.
pub fn avg(x: &CMat) -> C64 {
    x.trace() / x.nrows() as f64
}

/// Normalized trace inner product `N^{-1} Tr X* Y`.
pub fn inner(x: &CMat, y: &CMat) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        s += a.conj() * b;
    }
    s / x.nrows() as f64
}

/// Norm induced by [`inner`].
pub fn hs_norm(x: &CMat) -> f64 {
    (x.norm_squared() / x.nrows() as f64).sqrt()
}

pub fn re_part(x: &CMat) -> CMat {
    (x + x.adjoint()) * C64::new(0.5, 0.0)
}

/// `(X - X*) / 2i`, Hermitian.
pub fn im_part(x: &CMat) -> CMat {
    (x - x.adjoint()) * C64::new(0.0, -0.5)
}

/// `X Y` through four real products, which use the blocked real kernel.
pub fn matmul(x: &CMat, y: &CMat) -> CMat {
    let (xr, xi) = (x.map(|v| v.re), x.map(|v| v.im));
    let (yr, yi) = (y.map(|v| v.re), y.map(|v| v.im));
    let re = &xr * &yr - &xi * &yi;
    let im = &xr * &yi + &xi * &yr;
    re.zip_map(&im, C64::new)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Largest singular value.
pub fn op_norm(x: &CMat) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    x.singular_values().max()
}

pub fn to_complex(x: &RMat) -> CMat {
    x.map(|v| C64::new(v, 0.0))
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted ascending.
pub fn herm_eigen(x: &CMat) -> (Vec<f64>, CMat) {
    let h = re_part(x);
    let eig = h.symmetric_eigen();
    let n = x.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = idx.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (j, &k) in idx.iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(k));
    }
    (vals, vecs)
}

/// Sorted eigenvalues of a Hermitian matrix.
pub fn herm_eigenvalues(x: &CMat) -> Vec<f64> {
    let mut v: Vec<f64> = re_part(x).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Sorted eigenvalues of a real symmetric matrix.
pub fn sym_eigenvalues(x: &RMat) -> Vec<f64> {
    let mut v: Vec<f64> = x.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Apply a real function to the spectrum of a Hermitian matrix.
pub fn herm_apply(vals: &[f64], vecs: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let mut scaled = vecs.clone();
    for (j, &v) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(f(v));
    }
    &scaled * vecs.adjoint()
}

/// Square root of a real symmetric positive semidefinite matrix, negative eigenvalues clipped.
pub fn psd_sqrt(x: &RMat) -> RMat {
    let sym = (x + x.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut v = eig.eigenvectors.clone();
    for j in 0..v.ncols() {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    &v * eig.eigenvectors.transpose()
}

/// Orthonormal basis of the Hermitian matrices.
///
/// Ordering: the `N` diagonal units `e_aa` first, then for each pair `a < b` in row-major
/// order the symmetric element `(e_ab + e_ba)/√2` followed by the antisymmetric one
/// `i(e_ab - e_ba)/√2`. Coordinates of an arbitrary complex `X` are `Tr(E_j X)`, so
/// Hermitian matrices have real coordinates and real symmetric matrices are supported on
/// the diagonal and symmetric slots.
#[derive(Debug, Clone)]
pub struct HermBasis {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl HermBasis {
    pub fn new(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                pairs.push((a, b));
            }
        }
        HermBasis { n, pairs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    /// Whether slot `j` belongs to the real symmetric subspace.
    pub fn is_symmetric_slot(&self, j: usize) -> bool {
        j < self.n || (j - self.n).is_multiple_of(2)
    }

    pub fn element(&self, j: usize) -> CMat {
        let mut c = CVec::zeros(self.dim());
        c[j] = C64::new(1.0, 0.0);
        self.from_coords(&c)
    }

    pub fn coords(&self, x: &CMat) -> CVec {
        let n = self.n;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = CVec::zeros(self.dim());
        for a in 0..n {
            out[a] = x[(a, a)];
        }
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            let xab = x[(a, b)];
            let xba = x[(b, a)];
            out[n + 2 * p] = (xab + xba) * r;
            out[n + 2 * p + 1] = I * (xba - xab) * r;
        }
        out
    }

    pub fn from_coords(&self, c: &CVec) -> CMat {
        let n = self.n;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut x = CMat::zeros(n, n);
        for a in 0..n {
            x[(a, a)] = c[a];
        }
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            let s = c[n + 2 * p];
            let t = c[n + 2 * p + 1];
            x[(a, b)] = (s + I * t) * r;
            x[(b, a)] = (s - I * t) * r;
        }
        x
    }

    pub fn from_real_coords(&self, c: &DVector<f64>) -> CMat {
        self.from_coords(&c.map(|v| C64::new(v, 0.0)))
    }

    /// Matrix of a superoperator `L` in this basis: `L_jk = Tr(E_j L[E_k])`.
    pub fn superop_matrix(&self, f: impl Fn(&CMat) -> CMat) -> CMat {
        let d = self.dim();
        let mut out = CMat::zeros(d, d);
        for k in 0..d {
            let col = self.coords(&f(&self.element(k)));
            out.set_column(k, &col);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Restarted GMRES for `A x = b` with a matrix-free `apply`.
pub fn gmres(
    mut apply: impl FnMut(&CVec) -> CVec,
    b: &CVec,
    rel_tol: f64,
    restart: usize,
    max_iter: usize,
) -> (CVec, GmresOutcome) {
    let n = b.len();
    let bnorm = b.norm();
    let mut x = CVec::zeros(n);
    if bnorm == 0.0 {
        return (
            x,
            GmresOutcome {
                converged: true,
                iterations: 0,
                relative_residual: 0.0,
            },
        );
    }
    let m = restart.max(1).min(n.max(1));
    let mut total = 0;
    let mut r = b.clone();
    let mut beta = bnorm;
    loop {
        let mut basis: Vec<CVec> = Vec::with_capacity(m + 1);
        basis.push(&r / C64::new(beta, 0.0));
        let mut h = CMat::zeros(m + 1, m);
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![C64::new(0.0, 0.0); m];
        let mut g = CVec::zeros(m + 1);
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for j in 0..m {
            let mut w = apply(&basis[j]);
            total += 1;
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let hij = v.dotc(&w);
                    h[(i, j)] += hij;
                    w.axpy(-hij, v, C64::new(1.0, 0.0));
                }
            }
            let wn = w.norm();
            h[(j + 1, j)] = C64::new(wn, 0.0);
            for i in 0..j {
                let a = h[(i, j)];
                let bb = h[(i + 1, j)];
                h[(i, j)] = a * cs[i] + sn[i] * bb;
                h[(i + 1, j)] = -sn[i].conj() * a + bb * cs[i];
            }
            let a = h[(j, j)];
            let bb = h[(j + 1, j)];
            let rr = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            if rr == 0.0 {
                cs[j] = 1.0;
                sn[j] = C64::new(0.0, 0.0);
            } else if a.norm() == 0.0 {
                cs[j] = 0.0;
                sn[j] = bb.conj() / bb.norm();
            } else {
                cs[j] = a.norm() / rr;
                sn[j] = (a / a.norm()) * bb.conj() / rr;
            }
            h[(j, j)] = a * cs[j] + sn[j] * bb;
            h[(j + 1, j)] = C64::new(0.0, 0.0);
            let gj = g[j];
            g[j] = gj * cs[j];
            g[j + 1] = -sn[j].conj() * gj;
            k_used = j + 1;
            let res = g[j + 1].norm() / bnorm;
            if res <= rel_tol || wn <= 1e-300 || total >= max_iter {
                break;
            }
            basis.push(w / C64::new(wn, 0.0));
        }
        let mut y = CVec::zeros(k_used);
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for l in i + 1..k_used {
                s -= h[(i, l)] * y[l];
            }
            y[i] = if h[(i, i)].norm() > 0.0 {
                s / h[(i, i)]
            } else {
                C64::new(0.0, 0.0)
            };
        }
        for i in 0..k_used {
            x.axpy(y[i], &basis[i], C64::new(1.0, 0.0));
        }
        r = b - apply(&x);
        beta = r.norm();
        let rel = beta / bnorm;
        if rel <= rel_tol || total >= max_iter {
            return (
                x,
                GmresOutcome {
                    converged: rel <= rel_tol,
                    iterations: total,
                    relative_residual: rel,
                },
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(n: usize, seed: u64) -> CMat {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CMat::from_fn(n, n, |_, _| {
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    #[test]
    fn split_product_matches_complex_product() {
        let x = random_matrix(7, 3);
        let y = random_matrix(7, 4);
        assert!((matmul(&x, &y) - &x * &y).norm() < 1e-14);
    }

    #[test]
    fn basis_round_trip() {
        let b = HermBasis::new(4);
        let x = random_matrix(4, 1);
        let back = b.from_coords(&b.coords(&x));
        assert!((back - x).norm() < 1e-14);
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = HermBasis::new(3);
        for j in 0..b.dim() {
            for k in 0..b.dim() {
                let ej = b.element(j);
                let ek = b.element(k);
                let g = (ej.adjoint() * ek).trace();
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((g - C64::new(want, 0.0)).norm() < 1e-14);
            }
            assert!((b.element(j).adjoint() - b.element(j)).norm() < 1e-15);
        }
    }

    #[test]
    fn hermitian_coords_are_real() {
        let b = HermBasis::new(5);
        let x = random_matrix(5, 2);
        let h = &x + x.adjoint();
        assert!(b.coords(&h).iter().all(|v| v.im.abs() < 1e-14));
    }

    #[test]
    fn gmres_solves_small_system() {
        let a = random_matrix(12, 3) + CMat::identity(12, 12) * C64::new(3.0, 0.0);
        let xs = CVec::from_fn(12, |i, _| C64::new(i as f64, 1.0));
        let bvec = &a * &xs;
        let (x, out) = gmres(|v| &a * v, &bvec, 1e-13, 5, 500);
        assert!(out.converged);
        assert!((x - xs).norm() < 1e-10);
    }

    #[test]
    fn herm_apply_square_root() {
        let x = random_matrix(6, 4);
        let p = &x * x.adjoint() + CMat::identity(6, 6);
        let (v, u) = herm_eigen(&p);
        let s = herm_apply(&v, &u, f64::sqrt);
        assert!((&s * &s - &p).norm() < 1e-12);
    }
}
