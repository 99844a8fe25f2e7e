//! Balanced polar decomposition, saturated self-energy operator and the stability operator
//! `B = Id − C_M S` with its isolated eigentriple near spectral edges.

use crate::error::{MdeError, Result};
use crate::linalg::{self, gmres, CMat, CVec, HermBasis, RMat, C64};
use crate::mde::{self, SolverOptions, SpectralPoint};
use crate::model::ModelSpec;
use crate::superop::SelfEnergy;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityOptions {
    /// Small-density regime: `ρ + η/ρ ≤ rho_star`.
    pub rho_star: f64,
    /// Largest coordinate dimension `N²` handled by dense assembly.
    pub dense_dim: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Imaginary part used to approach real edge points.
    pub edge_eta: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            rho_star: 0.1,
            dense_dim: 400,
            power_tol: 1e-13,
            power_max_iter: 20_000,
            edge_eta: 1e-12,
        }
    }
}

/// `M = Q* U Q` with `W = (Im M)^{-1/2} Re M (Im M)^{-1/2} + iI`, `U = W/|W|`, `Q = |W|^{1/2}(Im M)^{1/2}`.
#[derive(Debug, Clone)]
pub struct PolarData {
    pub q: CMat,
    pub u: CMat,
    pub w_aux: CMat,
    k_vals: Vec<f64>,
    k_vecs: CMat,
}

impl PolarData {
    fn spectral(&self, f: impl Fn(f64) -> f64) -> CMat {
        linalg::herm_apply(&self.k_vals, &self.k_vecs, f)
    }

    pub fn re_u(&self) -> CMat {
        self.spectral(|k| k / (1.0 + k * k).sqrt())
    }

    pub fn im_u(&self) -> CMat {
        self.spectral(|k| 1.0 / (1.0 + k * k).sqrt())
    }

    /// `sign Re U`.
    pub fn s_sign(&self) -> CMat {
        self.spectral(|k| if k > 0.0 { 1.0 } else if k < 0.0 { -1.0 } else { 0.0 })
    }

    /// Smallest `|Re U|` eigenvalue; the sign is ill-defined when it is below 1e-12.
    pub fn min_abs_re_u(&self) -> f64 {
        self.k_vals
            .iter()
            .map(|k| (k / (1.0 + k * k).sqrt()).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn reconstruct(&self) -> CMat {
        self.q.adjoint() * &self.u * &self.q
    }

    fn q_inv(&self) -> Result<CMat> {
        self.q
            .clone()
            .try_inverse()
            .ok_or_else(|| MdeError::Numerical("Q is singular".into()))
    }
}

pub fn polar_decompose(m: &CMat) -> Result<PolarData> {
    let (iv, ie) = linalg::herm_eigen(&linalg::im_part(m));
    let top = iv.last().copied().unwrap_or(0.0).abs().max(1.0);
    if iv[0] <= 1e-14 * top {
        return Err(MdeError::SingularImaginaryPart(iv[0]));
    }
    let im_sqrt = linalg::herm_apply(&iv, &ie, f64::sqrt);
    let im_isqrt = linalg::herm_apply(&iv, &ie, |v| 1.0 / v.sqrt());
    let k = &im_isqrt * linalg::re_part(m) * &im_isqrt;
    let k = linalg::re_part(&k);
    let (k_vals, k_vecs) = linalg::herm_eigen(&k);
    let n = m.nrows();
    let w_aux = &k + CMat::identity(n, n) * linalg::I;
    let u = {
        let d = CVec::from_iterator(n, k_vals.iter().map(|&v| C64::new(v, 1.0) / (1.0 + v * v).sqrt()));
        &k_vecs * CMat::from_diagonal(&d) * k_vecs.adjoint()
    };
    let abs_w_sqrt = linalg::herm_apply(&k_vals, &k_vecs, |v| (1.0 + v * v).powf(0.25));
    let q = abs_w_sqrt * im_sqrt;
    Ok(PolarData {
        q,
        u,
        w_aux,
        k_vals,
        k_vecs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SaturatedData {
    pub f_norm: f64,
    /// Perron–Frobenius eigenvector, positive definite with `‖F_top‖_hs = 1`.
    pub f_top: CMat,
    pub spectral_gap: f64,
    pub s_sign: CMat,
    pub f_u: CMat,
    pub sigma: f64,
    pub rho: f64,
    /// Set when the spectral gap is below 1e-10.
    pub degenerate: bool,
    /// Largest deviation from symmetry of the assembled coordinate matrix (dense path only).
    pub asymmetry: Option<f64>,
}

fn saturated_apply(model: &ModelSpec, q: &CMat, r: &CMat) -> CMat {
    let qa = q.adjoint();
    q * model.s.act(&(&qa * r * q)) * qa
}

fn hermitian(x: &CMat) -> CMat {
    linalg::re_part(x)
}

fn random_hermitian(n: usize, seed: u64) -> CMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = CMat::from_fn(n, n, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
    hermitian(&x)
}

/// `F[R] = Q S[Q* R Q] Q*` with leading eigenpair and spectral gap.
pub fn saturated_operator(model: &ModelSpec, polar: &PolarData, rho: f64, sopts: &StabilityOptions) -> Result<SaturatedData> {
    let n = model.n();
    let q = &polar.q;
    let apply = |r: &CMat| saturated_apply(model, q, r);
    let (f_norm, mut f_top, second, asymmetry) = if let Some(d) = diagonal_sector(model, q) {
        d
    } else if n * n <= sopts.dense_dim {
        let basis = HermBasis::new(n);
        let lc = basis.superop_matrix(apply);
        let l = lc.map(|v| v.re);
        let imag = lc.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        let asym = (&l - l.transpose()).amax().max(imag);
        let eig = nalgebra::SymmetricEigen::new((&l + l.transpose()) * 0.5);
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let top = eig.eigenvalues[idx[0]];
        let second = idx[1..]
            .iter()
            .map(|&j| eig.eigenvalues[j].abs())
            .fold(0.0, f64::max);
        let v: DVector<f64> = eig.eigenvectors.column(idx[0]).into_owned();
        (top, basis.from_real_coords(&v), second, Some(asym))
    } else {
        let (top, v) = power_top(&apply, n, sopts)?;
        let second = power_second(&apply, &v, top, n, sopts);
        (top, v, second, None)
    };
    if linalg::avg(&f_top).re < 0.0 {
        f_top = -f_top;
    }
    f_top = hermitian(&f_top);
    f_top /= C64::new(linalg::hs_norm(&f_top), 0.0);
    let s_sign = polar.s_sign();
    let f_u = polar.im_u() / C64::new(rho, 0.0);
    let sigma = linalg::avg(&(&s_sign * &f_u * &f_u * &f_u)).re;
    let gap = f_norm - second;
    Ok(SaturatedData {
        f_norm,
        f_top,
        spectral_gap: gap,
        s_sign,
        f_u,
        sigma,
        rho,
        degenerate: gap < 1e-10,
        asymmetry,
    })
}

/// Exact spectrum of `F` when `Q` is diagonal and `S` is a variance profile: `F` acts on
/// diagonals as `|Q|² K |Q|²`, and swaps each off-diagonal pair `(ab, ba)` with weight
/// `|q_a|²|q_b|² t_ab/N`.
fn diagonal_sector(model: &ModelSpec, q: &CMat) -> Option<(f64, CMat, f64, Option<f64>)> {
    let k = model.s.diagonal_action()?;
    let n = q.nrows();
    let scale = q.camax();
    let off = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| q[(i, j)].norm())
        .fold(0.0, f64::max);
    if off > 1e-14 * scale {
        return None;
    }
    let w: Vec<f64> = (0..n).map(|i| q[(i, i)].norm_sqr()).collect();
    let f = RMat::from_fn(n, n, |i, j| w[i] * k[(i, j)] * w[j]);
    let asym = (&f - f.transpose()).amax();
    let eig = nalgebra::SymmetricEigen::new((&f + f.transpose()) * 0.5);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let top = eig.eigenvalues[idx[0]];
    let mut second = idx[1..].iter().map(|&j| eig.eigenvalues[j].abs()).fold(0.0, f64::max);
    if let SelfEnergy::VarianceProfile { second_moments: Some(t), .. } = &model.s {
        let nf = n as f64;
        for a in 0..n {
            for b in a + 1..n {
                second = second.max(w[a] * w[b] * t[(a, b)].abs() / nf);
            }
        }
    }
    let v = eig.eigenvectors.column(idx[0]);
    let top_vec = CMat::from_fn(n, n, |i, j| if i == j { C64::new(v[i], 0.0) } else { C64::new(0.0, 0.0) });
    Some((top, top_vec, second, Some(asym)))
}

fn power_top(apply: &impl Fn(&CMat) -> CMat, n: usize, sopts: &StabilityOptions) -> Result<(f64, CMat)> {
    let mut v = linalg::identity(n);
    v /= C64::new(linalg::hs_norm(&v), 0.0);
    let mut lambda = 0.0;
    for _ in 0..sopts.power_max_iter {
        let w = hermitian(&apply(&v));
        let nw = linalg::hs_norm(&w);
        if nw == 0.0 {
            return Err(MdeError::Numerical("saturated operator annihilates the identity".into()));
        }
        lambda = linalg::inner(&v, &w).re;
        let w = w / C64::new(nw, 0.0);
        let change = linalg::hs_norm(&(&w - &v));
        v = w;
        if change < sopts.power_tol {
            break;
        }
    }
    let rayleigh = linalg::inner(&v, &hermitian(&apply(&v))).re;
    Ok((if rayleigh.is_finite() { rayleigh } else { lambda }, v))
}

/// Largest `|λ|` on the orthogonal complement of the top eigenvector, by power iteration on `G²`.
fn power_second(apply: &impl Fn(&CMat) -> CMat, top: &CMat, top_val: f64, n: usize, sopts: &StabilityOptions) -> f64 {
    let deflate = |x: &CMat| -> CMat {
        let y = hermitian(&apply(x));
        &y - top * C64::new(top_val * linalg::inner(top, x).re, 0.0)
    };
    let mut v = random_hermitian(n, 0x5eed);
    v -= top * linalg::inner(top, &v);
    let nv = linalg::hs_norm(&v);
    if nv == 0.0 {
        return 0.0;
    }
    v /= C64::new(nv, 0.0);
    let mut est = 0.0;
    let iters = sopts.power_max_iter.min(2000);
    for _ in 0..iters {
        let w = deflate(&deflate(&v));
        let nw = linalg::hs_norm(&w);
        if nw < 1e-300 {
            return 0.0;
        }
        let prev = est;
        est = nw.sqrt();
        v = w / C64::new(nw, 0.0);
        if (est - prev).abs() <= 1e-10 * est.max(1e-300) {
            break;
        }
    }
    est
}

/// `η⟨F,QQ*⟩/⟨F,Im U⟩` against `1 − ‖F‖`; returns the relative deviation.
pub fn norm_identity_deviation(sat: &SaturatedData, polar: &PolarData, eta: f64) -> f64 {
    let qq = &polar.q * polar.q.adjoint();
    let rhs = eta * linalg::inner(&sat.f_top, &qq).re / linalg::inner(&sat.f_top, &polar.im_u()).re;
    ((1.0 - sat.f_norm) - rhs).abs() / rhs.abs()
}

/// `|⟨F_U QQ*⟩ − π|` at `z`.
pub fn verify_identity_424(model: &ModelSpec, z: SpectralPoint, opts: &SolverOptions) -> Result<f64> {
    let sol = mde::solve_at(model, z, opts)?;
    let polar = polar_decompose(&sol.m)?;
    let f_u = polar.im_u() / C64::new(sol.rho(), 0.0);
    let v = linalg::avg(&(f_u * &polar.q * polar.q.adjoint()));
    Ok((v - C64::new(PI, 0.0)).norm())
}

/// A linear operator on `N×N` matrices together with its adjoint for the trace inner product.
struct LinOp<'a> {
    n: usize,
    fwd: Box<dyn Fn(&CMat) -> CMat + 'a>,
    adj: Box<dyn Fn(&CMat) -> CMat + 'a>,
    sector: Option<Sector>,
}

/// Block structure of `X ↦ X − M S[X] M` for diagonal `M` and a variance profile: the
/// diagonal block `I − diag(m²) K` and one 2×2 block per off-diagonal pair `(ab, ba)`.
struct Sector {
    m: Vec<C64>,
    k: RMat,
    t: Option<RMat>,
}

impl Sector {
    fn new(model: &ModelSpec, m: &CMat) -> Option<Self> {
        let k = model.s.diagonal_action()?;
        let n = m.nrows();
        let scale = m.camax();
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].norm())
            .fold(0.0, f64::max);
        if off > 1e-14 * scale {
            return None;
        }
        let t = match &model.s {
            SelfEnergy::VarianceProfile { second_moments, .. } => second_moments.clone(),
            _ => None,
        };
        Some(Sector {
            m: (0..n).map(|i| m[(i, i)]).collect(),
            k,
            t,
        })
    }

    fn block(&self) -> CMat {
        let n = self.m.len();
        CMat::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            C64::new(id, 0.0) - self.m[i] * self.m[i] * self.k[(i, j)]
        })
    }

    /// `(c_ab, c_ba)` with `(X_ab, X_ba) ↦ (X_ab − c_ab X_ba, X_ba − c_ba X_ab)`.
    fn pairs(&self) -> Vec<(C64, C64)> {
        let n = self.m.len();
        let nf = n as f64;
        let Some(t) = &self.t else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                let mm = self.m[a] * self.m[b];
                out.push((mm * (t[(a, b)] / nf), mm * (t[(b, a)] / nf)));
            }
        }
        out
    }

    /// Eigenvalues and largest inverse norm of the off-diagonal blocks; the blocks are the
    /// identity when no second-moment profile is present.
    fn pair_spectrum(&self) -> (Vec<C64>, f64) {
        let one = C64::new(1.0, 0.0);
        let mut ev = Vec::new();
        let mut inv = if self.m.len() > 1 { 1.0f64 } else { 0.0 };
        for (cab, cba) in self.pairs() {
            let r = (cab * cba).sqrt();
            ev.push(one + r);
            ev.push(one - r);
            let blk = nalgebra::Matrix2::new(one, -cab, -cba, one);
            let sv = blk.svd(false, false).singular_values;
            inv = inv.max(1.0 / sv.min());
        }
        if self.t.is_none() && self.m.len() > 1 {
            ev.push(one);
        }
        (ev, inv)
    }
}

fn diag_matrix(v: &CVec) -> CMat {
    CMat::from_diagonal(v)
}

fn inverse_iteration(m: CMat) -> Result<CVec> {
    let d = m.nrows();
    let lu = m.lu();
    let mut v = CVec::from_element(d, C64::new(1.0, 0.0));
    for _ in 0..4 {
        let w = lu
            .solve(&v)
            .ok_or_else(|| MdeError::Numerical("inverse iteration hit an exactly singular shift".into()))?;
        v = &w / C64::new(w.norm(), 0.0);
    }
    Ok(v)
}

fn sorted_eigenvalues(mat: &CMat) -> Result<Vec<C64>> {
    let schur = mat
        .clone()
        .try_schur(1e-15, 100_000)
        .ok_or_else(|| MdeError::Numerical("Schur decomposition did not converge".into()))?;
    let (_, t) = schur.unpack();
    let mut ev: Vec<C64> = (0..mat.nrows()).map(|i| t[(i, i)]).collect();
    ev.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    Ok(ev)
}

fn op_solve(n: usize, f: &dyn Fn(&CMat) -> CMat, rhs: &CMat) -> Result<CMat> {
    let b = CVec::from_column_slice(rhs.as_slice());
    let apply = |x: &CVec| {
        let xm = CMat::from_column_slice(n, n, x.as_slice());
        CVec::from_column_slice(f(&xm).as_slice())
    };
    let (x, out) = gmres(apply, &b, 1e-14, 120, 80 * n * n.max(4));
    if !(out.converged || out.relative_residual < 1e-10) {
        return Err(MdeError::Numerical(format!(
            "superoperator solve stalled at relative residual {:e}",
            out.relative_residual
        )));
    }
    Ok(CMat::from_column_slice(n, n, x.as_slice()))
}

/// Eigentriple `(β, r, l)` with `T r = β r`, `T* l = β̄ l` for the eigenvalue of smallest modulus.
struct Triple {
    beta: C64,
    right: CMat,
    left: CMat,
    /// Distance from β to the next eigenvalue (dense and block paths).
    separation: Option<f64>,
    dense: Option<CMat>,
    /// Diagonal block and the largest off-diagonal block inverse norm.
    block: Option<(CMat, f64)>,
}

fn normalize(x: CMat) -> CMat {
    let s = linalg::hs_norm(&x);
    x / C64::new(s, 0.0)
}

fn block_triple(op: &LinOp, sec: &Sector) -> Result<Option<Triple>> {
    let d = sec.block();
    let n = d.nrows();
    let ev = sorted_eigenvalues(&d)?;
    let (pair_ev, pair_inv) = sec.pair_spectrum();
    let beta = ev[0];
    if pair_ev.iter().any(|p| p.norm() < beta.norm()) {
        return Ok(None);
    }
    let separation = ev[1..]
        .iter()
        .chain(&pair_ev)
        .map(|e| (e - beta).norm())
        .fold(f64::INFINITY, f64::min);
    let eye = CMat::identity(n, n);
    let shift = beta + C64::new(1e-13 * (1.0 + beta.norm()), 0.0);
    let r = inverse_iteration(&d - &eye * shift)?;
    let l = inverse_iteration(d.adjoint() - &eye * shift.conj())?;
    let right = normalize(diag_matrix(&r));
    let left = normalize(diag_matrix(&l));
    let beta = linalg::inner(&right, &(op.fwd)(&right));
    Ok(Some(Triple {
        beta,
        right,
        left,
        separation: separation.is_finite().then_some(separation),
        dense: None,
        block: Some((d, pair_inv)),
    }))
}

fn smallest_triple(op: &LinOp, sopts: &StabilityOptions) -> Result<Triple> {
    let n = op.n;
    if let Some(sec) = &op.sector {
        if let Some(t) = block_triple(op, sec)? {
            return Ok(t);
        }
    }
    if n * n <= sopts.dense_dim {
        let basis = HermBasis::new(n);
        let mat = basis.superop_matrix(|x| (op.fwd)(x));
        let d = mat.nrows();
        let ev = sorted_eigenvalues(&mat)?;
        let beta = ev[0];
        let separation = ev.get(1).map(|e| (e - beta).norm());
        let eye = CMat::identity(d, d);
        let shift = beta + C64::new(1e-13 * (1.0 + beta.norm()), 0.0);
        let r = inverse_iteration(&mat - &eye * shift)?;
        let l = inverse_iteration(mat.adjoint() - &eye * shift.conj())?;
        let right = normalize(basis.from_coords(&r));
        let left = normalize(basis.from_coords(&l));
        let beta = linalg::inner(&right, &(op.fwd)(&right));
        return Ok(Triple {
            beta,
            right,
            left,
            separation,
            dense: Some(mat),
            block: None,
        });
    }
    let iterate = |f: &dyn Fn(&CMat) -> CMat| -> Result<CMat> {
        let mut v = normalize(linalg::identity(n));
        for _ in 0..60 {
            let w = normalize(op_solve(n, f, &v)?);
            let phase = linalg::inner(&v, &w);
            let phase = if phase.norm() > 0.0 { phase / phase.norm() } else { C64::new(1.0, 0.0) };
            let w = w * phase.conj();
            let change = linalg::hs_norm(&(&w - &v));
            v = w;
            if change < 1e-12 {
                break;
            }
        }
        Ok(v)
    };
    let right = iterate(&*op.fwd)?;
    let left = iterate(&*op.adj)?;
    let beta = linalg::inner(&right, &(op.fwd)(&right));
    Ok(Triple {
        beta,
        right,
        left,
        separation: None,
        dense: None,
        block: None,
    })
}

/// `r⟨l,X⟩/⟨l,r⟩`.
fn project(t: &Triple, x: &CMat) -> CMat {
    &t.right * (linalg::inner(&t.left, x) / linalg::inner(&t.left, &t.right))
}

/// `l⟨r,Y⟩/⟨r,l⟩`.
fn project_adj(t: &Triple, y: &CMat) -> CMat {
    &t.left * (linalg::inner(&t.right, y) / linalg::inner(&t.right, &t.left))
}

fn stability_op<'a>(model: &'a ModelSpec, m: &'a CMat) -> LinOp<'a> {
    let ma = m.adjoint();
    LinOp {
        n: model.n(),
        fwd: Box::new(move |x| x - m * model.s.act(x) * m),
        adj: Box::new(move |y| y - model.s.act(&(&ma * y * &ma))),
        sector: Sector::new(model, m),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub z: SpectralPoint,
    pub rho: f64,
    pub beta: C64,
    pub b_vec: CMat,
    pub p_vec: CMat,
    pub pairing: C64,
    pub sigma: f64,
    pub b_inv_norm: f64,
    pub b_inv_q_norm: f64,
    /// Whether the eigenvectors carry the small-density normalization.
    pub normalized: bool,
    pub eigen_separation: Option<f64>,
    pub f_norm: f64,
    pub spectral_gap: f64,
    pub identity_424: f64,
    pub identity_412: f64,
    pub reconstruction_error: f64,
    pub eig_residual_right: f64,
    pub eig_residual_left: f64,
}

fn inverse_norms(op: &LinOp, t: &Triple) -> Result<(f64, f64)> {
    let n = op.n;
    if let Some((d, pair_inv)) = &t.block {
        let inv = d
            .clone()
            .try_inverse()
            .ok_or_else(|| MdeError::Numerical("stability operator is singular".into()))?;
        let smin = d.clone().svd(false, false).singular_values.min();
        let r = t.right.diagonal();
        let l = t.left.diagonal();
        let proj = CMat::identity(n, n) - (&r * l.adjoint()) / l.dotc(&r);
        let top = (inv * proj).svd(false, false).singular_values.max();
        return Ok(((1.0 / smin).max(*pair_inv), top.max(*pair_inv)));
    }
    if let Some(mat) = &t.dense {
        let basis = HermBasis::new(n);
        let svd = mat.clone().svd(false, false);
        let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        let inv = mat
            .clone()
            .try_inverse()
            .ok_or_else(|| MdeError::Numerical("stability operator is singular".into()))?;
        let r = basis.coords(&t.right);
        let l = basis.coords(&t.left);
        let lr = l.dotc(&r);
        let proj = CMat::identity(mat.nrows(), mat.nrows()) - (&r * l.adjoint()) / lr;
        let bq = inv * proj;
        let top = bq.svd(false, false).singular_values.iter().copied().fold(0.0, f64::max);
        return Ok((1.0 / smin, top));
    }
    let power = |fwd: &dyn Fn(&CMat) -> Result<CMat>, adj: &dyn Fn(&CMat) -> Result<CMat>| -> Result<f64> {
        let mut v = normalize(random_hermitian(n, 0xb1));
        let mut est = 0.0;
        for _ in 0..200 {
            let w = adj(&fwd(&v)?)?;
            let nw = linalg::hs_norm(&w);
            let prev = est;
            est = nw.sqrt();
            v = w / C64::new(nw, 0.0);
            if (est - prev).abs() <= 1e-8 * est {
                break;
            }
        }
        Ok(est)
    };
    let inv = power(&|x| op_solve(n, &*op.fwd, x), &|y| op_solve(n, &*op.adj, y))?;
    let inv_q = power(
        &|x| op_solve(n, &*op.fwd, &(x - project(t, x))),
        &|y| {
            let w = op_solve(n, &*op.adj, y)?;
            Ok(&w - project_adj(t, &w))
        },
    )?;
    Ok((inv, inv_q))
}

/// Eigentriple of `B` at `z` with norms of `B⁻¹` and of its restriction to the complement.
pub fn unstable_triple(
    model: &ModelSpec,
    z: SpectralPoint,
    opts: &SolverOptions,
    sopts: &StabilityOptions,
) -> Result<StabilityReport> {
    let sol = mde::solve_at(model, z, opts)?;
    let m = sol.m.clone();
    let rho = sol.rho();
    let polar = polar_decompose(&m)?;
    let sat = saturated_operator(model, &polar, rho, sopts)?;
    let op = stability_op(model, &m);
    let t = smallest_triple(&op, sopts)?;
    let small = rho + z.eta / rho <= sopts.rho_star;
    let (b_vec, p_vec) = if small {
        let qa = polar.q.adjoint();
        let qi = polar.q_inv()?;
        let m0 = &qa * &sat.s_sign * &polar.q;
        let op0 = stability_op(model, &m0);
        let t0 = smallest_triple(&op0, sopts)?;
        let b0 = project(&t0, &(&qa * &sat.f_u * &polar.q));
        let p0 = project_adj(&t0, &(&qi * &sat.f_u * qi.adjoint()));
        (project(&t, &b0), project_adj(&t, &p0))
    } else {
        (t.right.clone(), t.left.clone())
    };
    let beta = t.beta;
    let eig_residual_right = linalg::hs_norm(&((op.fwd)(&b_vec) - &b_vec * beta)) / linalg::hs_norm(&b_vec);
    let eig_residual_left = linalg::hs_norm(&((op.adj)(&p_vec) - &p_vec * beta.conj())) / linalg::hs_norm(&p_vec);
    let (b_inv_norm, b_inv_q_norm) = inverse_norms(&op, &t)?;
    let f_u = polar.im_u() / C64::new(rho, 0.0);
    let identity_424 = (linalg::avg(&(f_u * &polar.q * polar.q.adjoint())) - C64::new(PI, 0.0)).norm();
    Ok(StabilityReport {
        z,
        rho,
        beta,
        pairing: linalg::inner(&p_vec, &b_vec),
        b_vec,
        p_vec,
        sigma: sat.sigma,
        b_inv_norm,
        b_inv_q_norm,
        normalized: small,
        eigen_separation: t.separation,
        f_norm: sat.f_norm,
        spectral_gap: sat.spectral_gap,
        identity_424,
        identity_412: norm_identity_deviation(&sat, &polar, z.eta),
        reconstruction_error: linalg::hs_norm(&(polar.reconstruct() - &m)),
        eig_residual_right,
        eig_residual_left,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SigmaPair {
    /// `⟨sign(Re U) F_U³⟩`.
    pub sigma_def: f64,
    /// `⟨P, M S[B] B⟩` with the small-density normalization.
    pub sigma_pairing: C64,
    pub in_regime: bool,
}

pub fn sigma_two_ways(model: &ModelSpec, z: SpectralPoint, opts: &SolverOptions, sopts: &StabilityOptions) -> Result<SigmaPair> {
    let rep = unstable_triple(model, z, opts, sopts)?;
    let m = mde::solve_at(model, z, opts)?.m;
    let b = &rep.b_vec;
    let pairing = linalg::inner(&rep.p_vec, &(&m * model.s.act(b) * b));
    Ok(SigmaPair {
        sigma_def: rep.sigma,
        sigma_pairing: pairing,
        in_regime: rep.normalized,
    })
}

/// `σ = ⟨sign(Re U) F_U³⟩` approached from `τ0 + i·edge_eta`.
pub fn edge_sigma(model: &ModelSpec, tau0: f64, opts: &SolverOptions, sopts: &StabilityOptions) -> Result<f64> {
    let eopts = SolverOptions {
        eta_floor: opts.eta_floor.min(sopts.edge_eta),
        tol: opts.tol.min(1e-13),
        ..opts.clone()
    };
    let sol = mde::solve_at(model, SpectralPoint::new(tau0, sopts.edge_eta), &eopts)?;
    let polar = polar_decompose(&sol.m)?;
    let f_u = polar.im_u() / C64::new(sol.rho(), 0.0);
    Ok(linalg::avg(&(polar.s_sign() * &f_u * &f_u * &f_u)).re)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShapePoint {
    pub omega: f64,
    pub theta: C64,
    /// `|σΘ² + πω|`.
    pub quadratic_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeReport {
    pub tau0: f64,
    pub sigma: f64,
    pub sigma_imag: f64,
    pub pairing: C64,
    /// Relative anti-Hermitian parts of `B` and `P` left by the finite-η limit.
    pub anti_hermitian_b: f64,
    pub anti_hermitian_p: f64,
    /// `‖Im M(τ0 + i·edge_eta)‖`, the part dropped when taking `M(τ0)`.
    pub im_m_residual: f64,
    pub points: Vec<ShapePoint>,
}

fn anti_hermitian(x: &CMat) -> f64 {
    linalg::hs_norm(&linalg::im_part(x)) / linalg::hs_norm(x)
}

/// `Θ(ω) = ⟨P, M(τ0+ω) − M(τ0)⟩/⟨P,B⟩` with `B`, `P` normalized by `⟨B⟩ = π` and `⟨P, M²⟩ = π`.
pub fn shape_theta(
    model: &ModelSpec,
    tau0: f64,
    omegas: &[f64],
    opts: &SolverOptions,
    sopts: &StabilityOptions,
) -> Result<ShapeReport> {
    let eta = sopts.edge_eta;
    let eopts = SolverOptions {
        eta_floor: opts.eta_floor.min(eta),
        tol: opts.tol.min(1e-13),
        max_iter: opts.max_iter.max(5000),
        ..opts.clone()
    };
    let edge = mde::solve_at(model, SpectralPoint::new(tau0, eta), &eopts)?;
    let m0 = linalg::re_part(&edge.m);
    let im_m_residual = linalg::op_norm(&linalg::im_part(&edge.m));
    let op = stability_op(model, &m0);
    let t = smallest_triple(&op, sopts)?;
    let b = &t.right * (C64::new(PI, 0.0) / linalg::avg(&t.right));
    let m2 = &m0 * &m0;
    let p = &t.left * (C64::new(PI, 0.0) / linalg::inner(&t.left, &m2)).conj();
    let pairing = linalg::inner(&p, &b);
    let sigma = linalg::inner(&p, &(&m0 * model.s.act(&b) * &b));
    let mut points = Vec::with_capacity(omegas.len());
    let mut hint = edge.m.clone();
    let mut order: Vec<usize> = (0..omegas.len()).collect();
    order.sort_by(|&a, &c| omegas[a].abs().partial_cmp(&omegas[c].abs()).unwrap());
    let mut out = vec![None; omegas.len()];
    for &i in &order {
        let w = omegas[i];
        let z = SpectralPoint::new(tau0 + w, eta);
        let sol = match mde::solve_near(model, z, &hint, &eopts) {
            Ok(s) => s,
            Err(_) => mde::solve_at(model, z, &eopts)?,
        };
        let theta = linalg::inner(&p, &(&sol.m - &m0)) / pairing;
        out[i] = Some(ShapePoint {
            omega: w,
            theta,
            quadratic_residual: (sigma.re * theta * theta + C64::new(PI * w, 0.0)).norm(),
        });
        if w.abs() < 1e-3 {
            hint = sol.m;
        }
    }
    points.extend(out.into_iter().flatten());
    Ok(ShapeReport {
        tau0,
        sigma: sigma.re,
        sigma_imag: sigma.im,
        pairing,
        anti_hermitian_b: anti_hermitian(&b),
        anti_hermitian_p: anti_hermitian(&p),
        im_m_residual,
        points,
    })
}
