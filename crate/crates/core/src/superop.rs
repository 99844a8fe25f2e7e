//! Self-energy operator `S[R] = E W R W` and covariance form `Σ[R] = E W Tr(W R)`.
//!
//! Stored profiles use the `√N·w = O(1)` scaling: a profile entry `s_ab` means
//! `E|w_ab|² = s_ab / N`, so the flat profile of ones gives `S[I] = I`.

use crate::error::{MdeError, Result};
use crate::linalg::{self, CMat, HermBasis, RMat, C64};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Superoperator dimension cap for full assembly, in terms of `N`.
pub const DEFAULT_CAP: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryClass {
    #[serde(alias = "real")]
    RealSymmetric,
    #[serde(alias = "complex")]
    ComplexHermitian,
}

impl SymmetryClass {
    pub fn is_real(self) -> bool {
        matches!(self, SymmetryClass::RealSymmetric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelfEnergy {
    /// Independent entries. `second_moments` is present exactly for the real class; off the
    /// diagonal it equals the profile, on the diagonal `E w_aa² = (s_aa + t_aa)/N`.
    VarianceProfile {
        profile: RMat,
        second_moments: Option<RMat>,
    },
    /// `W = Σ_k g_k A_k` with `g ~ N(0, C)`.
    Kronecker {
        structure: Vec<CMat>,
        coefficients: RMat,
    },
    /// Full cumulant `κ(ab,cd) = E w_ab w_cd`, stored at row `a·N+b`, column `c·N+d`.
    Dense { cumulant: CMat },
}

fn check_square(m: &RMat, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(MdeError::InvalidModel(format!(
            "{what} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn symmetric_defect(m: &RMat) -> f64 {
    (m - m.transpose()).amax()
}

impl SelfEnergy {
    /// `S[R] = s²⟨R⟩I` for the complex class, and its real-class analogue `s²(⟨R⟩I + Rᵀ/N)`.
    pub fn flat(n: usize, class: SymmetryClass, scale: f64) -> Self {
        let p = RMat::from_element(n, n, scale * scale);
        SelfEnergy::VarianceProfile {
            second_moments: class.is_real().then(|| p.clone()),
            profile: p,
        }
    }

    pub fn variance_profile(
        class: SymmetryClass,
        profile: RMat,
        second_moments: Option<RMat>,
    ) -> Result<Self> {
        let n = profile.nrows();
        check_square(&profile, n, "variance profile")?;
        if profile.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MdeError::InvalidModel(
                "variance profile entries must be finite and nonnegative".into(),
            ));
        }
        if symmetric_defect(&profile) > 1e-12 {
            return Err(MdeError::InvalidModel("variance profile must be symmetric".into()));
        }
        let second_moments = match (class, second_moments) {
            (SymmetryClass::ComplexHermitian, Some(_)) => {
                return Err(MdeError::InvalidModel(
                    "second moments are only used by the real symmetric class".into(),
                ))
            }
            (SymmetryClass::ComplexHermitian, None) => None,
            (SymmetryClass::RealSymmetric, None) => Some(profile.clone()),
            (SymmetryClass::RealSymmetric, Some(t)) => {
                check_square(&t, n, "second-moment profile")?;
                for a in 0..n {
                    for b in 0..n {
                        if a != b && (t[(a, b)] - profile[(a, b)]).abs() > 1e-12 {
                            return Err(MdeError::InvalidModel(format!(
                                "real entries need E w² = E|w|² off the diagonal; mismatch at ({a},{b})"
                            )));
                        }
                    }
                    if profile[(a, a)] + t[(a, a)] < 0.0 {
                        return Err(MdeError::InvalidModel(format!(
                            "negative diagonal variance at {a}"
                        )));
                    }
                }
                Some(t)
            }
        };
        Ok(SelfEnergy::VarianceProfile {
            profile,
            second_moments,
        })
    }

    pub fn kronecker(class: SymmetryClass, structure: Vec<CMat>, coefficients: RMat) -> Result<Self> {
        let m = structure.len();
        if m == 0 {
            return Err(MdeError::InvalidModel("kronecker family needs at least one matrix".into()));
        }
        let n = structure[0].nrows();
        for (k, a) in structure.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(MdeError::InvalidModel(format!(
                    "structure matrix {k} is {}x{}, expected {n}x{n}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            if (a - a.adjoint()).camax() > 1e-12 {
                return Err(MdeError::InvalidModel(format!("structure matrix {k} is not Hermitian")));
            }
            if class.is_real() && a.iter().any(|v| v.im.abs() > 1e-12) {
                return Err(MdeError::InvalidModel(format!(
                    "structure matrix {k} must be real for the real symmetric class"
                )));
            }
        }
        check_square(&coefficients, m, "coefficient matrix")?;
        if symmetric_defect(&coefficients) > 1e-12 {
            return Err(MdeError::InvalidModel("coefficient matrix must be symmetric".into()));
        }
        let min_eig = linalg::sym_eigenvalues(&coefficients)[0];
        if min_eig < -1e-12 {
            return Err(MdeError::InvalidModel(format!(
                "coefficient matrix is not positive semidefinite: min eigenvalue {min_eig:e}"
            )));
        }
        Ok(SelfEnergy::Kronecker {
            structure,
            coefficients,
        })
    }

    pub fn dense(class: SymmetryClass, cumulant: CMat, cap: usize) -> Result<Self> {
        let d = cumulant.nrows();
        let n = (d as f64).sqrt().round() as usize;
        if n * n != d || cumulant.ncols() != d {
            return Err(MdeError::InvalidModel(format!(
                "cumulant must be N²xN², got {}x{}",
                cumulant.nrows(),
                cumulant.ncols()
            )));
        }
        if n > cap {
            return Err(MdeError::CapExceeded { n, cap });
        }
        let idx = |a: usize, b: usize| a * n + b;
        for a in 0..n {
            for b in 0..n {
                for cc in 0..n {
                    for dd in 0..n {
                        let k = cumulant[(idx(a, b), idx(cc, dd))];
                        if (k - cumulant[(idx(cc, dd), idx(a, b))]).norm() > 1e-12
                            || (k.conj() - cumulant[(idx(b, a), idx(dd, cc))]).norm() > 1e-12
                        {
                            return Err(MdeError::InvalidModel(
                                "cumulant violates the Hermitian symmetry constraints".into(),
                            ));
                        }
                        if class.is_real()
                            && (k.im.abs() > 1e-12
                                || (k - cumulant[(idx(b, a), idx(cc, dd))]).norm() > 1e-12)
                        {
                            return Err(MdeError::InvalidModel(
                                "cumulant is not that of a real symmetric matrix".into(),
                            ));
                        }
                    }
                }
            }
        }
        let s = SelfEnergy::Dense { cumulant };
        let form = s.covariance_form(cap)?;
        let min_eig = linalg::sym_eigenvalues(&form)[0];
        if min_eig < -1e-10 {
            return Err(MdeError::InvalidModel(format!(
                "cumulant is not positive semidefinite: min eigenvalue {min_eig:e}"
            )));
        }
        Ok(s)
    }

    pub fn n(&self) -> usize {
        match self {
            SelfEnergy::VarianceProfile { profile, .. } => profile.nrows(),
            SelfEnergy::Kronecker { structure, .. } => structure[0].nrows(),
            SelfEnergy::Dense { cumulant } => (cumulant.nrows() as f64).sqrt().round() as usize,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SelfEnergy::VarianceProfile { .. } => "variance_profile",
            SelfEnergy::Kronecker { .. } => "kronecker",
            SelfEnergy::Dense { .. } => "dense",
        }
    }

    fn check_dim(&self, r: &CMat) -> Result<()> {
        let n = self.n();
        if r.nrows() != n || r.ncols() != n {
            return Err(MdeError::Dimension {
                expected: n,
                got: r.nrows().max(r.ncols()),
            });
        }
        Ok(())
    }

    /// `S[R]`.
    pub fn apply(&self, r: &CMat) -> Result<CMat> {
        self.check_dim(r)?;
        Ok(self.act(r))
    }

    /// `Σ[R]`.
    pub fn apply_covariance(&self, r: &CMat) -> Result<CMat> {
        self.check_dim(r)?;
        Ok(self.cov_act(r))
    }

    /// `S[R]` without the dimension check.
    pub fn act(&self, r: &CMat) -> CMat {
        let n = self.n();
        let nf = n as f64;
        match self {
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => {
                let d = DVector::from_fn(n, |c, _| r[(c, c)]);
                let mut out = match second_moments {
                    Some(t) => CMat::from_fn(n, n, |a, b| r[(b, a)] * (t[(a, b)] / nf)),
                    None => CMat::zeros(n, n),
                };
                for a in 0..n {
                    let mut s = C64::new(0.0, 0.0);
                    for cc in 0..n {
                        s += d[cc] * profile[(a, cc)];
                    }
                    out[(a, a)] += s / nf;
                }
                out
            }
            SelfEnergy::Kronecker {
                structure,
                coefficients,
            } => {
                let m = structure.len();
                let ra: Vec<CMat> = structure.iter().map(|al| r * al).collect();
                let mut out = CMat::zeros(n, n);
                for k in 0..m {
                    let mut inner = CMat::zeros(n, n);
                    for l in 0..m {
                        let ckl = coefficients[(k, l)];
                        if ckl != 0.0 {
                            inner += &ra[l] * C64::new(ckl, 0.0);
                        }
                    }
                    out += &structure[k] * inner;
                }
                out
            }
            SelfEnergy::Dense { cumulant } => {
                let mut out = CMat::zeros(n, n);
                for a in 0..n {
                    for dd in 0..n {
                        let mut s = C64::new(0.0, 0.0);
                        for b in 0..n {
                            for cc in 0..n {
                                s += cumulant[(a * n + b, cc * n + dd)] * r[(b, cc)];
                            }
                        }
                        out[(a, dd)] = s;
                    }
                }
                out
            }
        }
    }

    /// `Σ[R]` without the dimension check.
    pub fn cov_act(&self, r: &CMat) -> CMat {
        let n = self.n();
        let nf = n as f64;
        match self {
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => CMat::from_fn(n, n, |a, b| {
                let mut v = r[(a, b)] * (profile[(a, b)] / nf);
                if let Some(t) = second_moments {
                    v += r[(b, a)] * (t[(a, b)] / nf);
                }
                v
            }),
            SelfEnergy::Kronecker {
                structure,
                coefficients,
            } => {
                let traces: Vec<C64> = structure.iter().map(|al| (al * r).trace()).collect();
                let mut out = CMat::zeros(n, n);
                for (k, ak) in structure.iter().enumerate() {
                    let mut w = C64::new(0.0, 0.0);
                    for (l, tl) in traces.iter().enumerate() {
                        w += tl * coefficients[(k, l)];
                    }
                    out += ak * w;
                }
                out
            }
            SelfEnergy::Dense { cumulant } => CMat::from_fn(n, n, |a, b| {
                let mut s = C64::new(0.0, 0.0);
                for cc in 0..n {
                    for dd in 0..n {
                        s += cumulant[(a * n + b, cc * n + dd)] * r[(dd, cc)];
                    }
                }
                s
            }),
        }
    }

    /// Action on diagonal matrices, `S[diag d] = diag(K d)`, when diagonals are preserved.
    pub fn diagonal_action(&self) -> Option<RMat> {
        match self {
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => {
                let nf = profile.nrows() as f64;
                let mut k = profile / nf;
                if let Some(t) = second_moments {
                    for a in 0..k.nrows() {
                        k[(a, a)] += t[(a, a)] / nf;
                    }
                }
                Some(k)
            }
            _ => None,
        }
    }

    pub fn scaled(&self, f: f64) -> SelfEnergy {
        match self {
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => SelfEnergy::VarianceProfile {
                profile: profile * f,
                second_moments: second_moments.as_ref().map(|t| t * f),
            },
            SelfEnergy::Kronecker {
                structure,
                coefficients,
            } => SelfEnergy::Kronecker {
                structure: structure.clone(),
                coefficients: coefficients * f,
            },
            SelfEnergy::Dense { cumulant } => SelfEnergy::Dense {
                cumulant: cumulant * C64::new(f, 0.0),
            },
        }
    }

    /// Full cumulant tensor `κ(ab,cd)`.
    pub fn cumulant(&self, cap: usize) -> Result<CMat> {
        let n = self.n();
        if n > cap {
            return Err(MdeError::CapExceeded { n, cap });
        }
        let nf = n as f64;
        let idx = |a: usize, b: usize| a * n + b;
        match self {
            SelfEnergy::Dense { cumulant } => Ok(cumulant.clone()),
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => {
                let mut k = CMat::zeros(n * n, n * n);
                for a in 0..n {
                    for b in 0..n {
                        k[(idx(a, b), idx(b, a))] += C64::new(profile[(a, b)] / nf, 0.0);
                        if let Some(t) = second_moments {
                            k[(idx(a, b), idx(a, b))] += C64::new(t[(a, b)] / nf, 0.0);
                        }
                    }
                }
                Ok(k)
            }
            SelfEnergy::Kronecker {
                structure,
                coefficients,
            } => {
                let m = structure.len();
                let mut k = CMat::zeros(n * n, n * n);
                for p in 0..m {
                    for q in 0..m {
                        let cpq = coefficients[(p, q)];
                        if cpq == 0.0 {
                            continue;
                        }
                        for a in 0..n {
                            for b in 0..n {
                                let x = structure[p][(a, b)] * cpq;
                                if x == C64::new(0.0, 0.0) {
                                    continue;
                                }
                                for cc in 0..n {
                                    for dd in 0..n {
                                        k[(idx(a, b), idx(cc, dd))] += x * structure[q][(cc, dd)];
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(k)
            }
        }
    }

    /// Export to the dense representation.
    pub fn to_dense(&self, cap: usize) -> Result<SelfEnergy> {
        Ok(SelfEnergy::Dense {
            cumulant: self.cumulant(cap)?,
        })
    }

    /// Matrix of `S` in the Hermitian basis of [`HermBasis`].
    pub fn assemble_matrix(&self, cap: usize) -> Result<RMat> {
        let n = self.n();
        if n > cap {
            return Err(MdeError::CapExceeded { n, cap });
        }
        let basis = HermBasis::new(n);
        Ok(basis.superop_matrix(|x| self.act(x)).map(|v| v.re))
    }

    /// Quadratic form `C_jk = E x_j x_k`, `x_j = Tr(E_j W)`, in the Hermitian basis.
    pub fn covariance_form(&self, cap: usize) -> Result<RMat> {
        let n = self.n();
        if n > cap {
            return Err(MdeError::CapExceeded { n, cap });
        }
        let basis = HermBasis::new(n);
        let m = basis.superop_matrix(|x| self.cov_act(x)).map(|v| v.re);
        Ok((&m + m.transpose()) * 0.5)
    }

    /// Estimates `c ⟨T⟩ ≤ S[T] ≤ C ⟨T⟩` over random rank-one `T = xx*`.
    pub fn check_flatness(
        &self,
        class: SymmetryClass,
        num_directions: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        if num_directions == 0 {
            return Err(MdeError::InvalidArgument("num_directions must be at least 1".into()));
        }
        let n = self.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..num_directions {
            let x = nalgebra::DVector::<C64>::from_fn(n, |_, _| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = if class.is_real() {
                    0.0
                } else {
                    StandardNormal.sample(&mut rng)
                };
                C64::new(re, im)
            });
            let t = &x * x.adjoint();
            let tr = linalg::avg(&t).re;
            let ev = linalg::herm_eigenvalues(&self.act(&t));
            lo = lo.min(ev[0] / tr);
            hi = hi.max(ev[n - 1] / tr);
        }
        if lo <= 1e-12 {
            return Err(MdeError::Flatness {
                c_est: lo,
                c_upper: hi,
            });
        }
        Ok((lo, hi))
    }

    /// Smallest eigenvalue of `B ↦ N E|Tr BW|² / Tr B²` on the Hermitian (or real symmetric)
    /// matrices.
    pub fn check_fullness(&self, class: SymmetryClass, cap: usize) -> Result<f64> {
        let n = self.n();
        let nf = n as f64;
        match self {
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => {
                let mut lam = f64::INFINITY;
                for a in 0..n {
                    for b in 0..n {
                        let v = if !class.is_real() {
                            profile[(a, b)]
                        } else if a == b {
                            profile[(a, a)] + second_moments.as_ref().map_or(0.0, |t| t[(a, a)])
                        } else {
                            2.0 * profile[(a, b)]
                        };
                        lam = lam.min(v);
                    }
                }
                if !class.is_real() && second_moments.is_some() {
                    return self.fullness_from_form(class, cap);
                }
                Ok(lam)
            }
            SelfEnergy::Kronecker { structure, .. } => {
                let dim_class = if class.is_real() { n * (n + 1) / 2 } else { n * n };
                if structure.len() < dim_class {
                    return Ok(0.0);
                }
                self.fullness_from_form(class, cap)
            }
            SelfEnergy::Dense { .. } => self.fullness_from_form(class, cap),
        }
        .map(|v| if v.abs() < 1e-13 * nf { 0.0 } else { v })
    }

    fn fullness_from_form(&self, class: SymmetryClass, cap: usize) -> Result<f64> {
        let n = self.n();
        let form = self.covariance_form(cap)?;
        let basis = HermBasis::new(n);
        let slots: Vec<usize> = (0..basis.dim())
            .filter(|&j| !class.is_real() || basis.is_symmetric_slot(j))
            .collect();
        let sub = RMat::from_fn(slots.len(), slots.len(), |i, j| form[(slots[i], slots[j])]);
        Ok(n as f64 * linalg::sym_eigenvalues(&sub)[0])
    }

    /// `S - c·S^G` with `S^G` the flat operator of the class.
    pub fn minus_flat(&self, class: SymmetryClass, c: f64, cap: usize) -> Result<SelfEnergy> {
        let n = self.n();
        match self {
            SelfEnergy::VarianceProfile {
                profile,
                second_moments,
            } => Ok(SelfEnergy::VarianceProfile {
                profile: profile.map(|v| v - c),
                second_moments: second_moments.as_ref().map(|t| t.map(|v| v - c)),
            }),
            _ => {
                let flat = SelfEnergy::flat(n, class, 1.0).cumulant(cap)?;
                Ok(SelfEnergy::Dense {
                    cumulant: self.cumulant(cap)? - flat * C64::new(c, 0.0),
                })
            }
        }
    }
}
