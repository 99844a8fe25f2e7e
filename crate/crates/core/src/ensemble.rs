//! Gaussian ensembles with prescribed first two moments, OU and interpolating flows.

use crate::density;
use crate::error::{MdeError, Result};
use crate::linalg::{self, CMat, HermBasis, RMat, C64};
use crate::mde::{self, SolverOptions, SpectralPoint};
use crate::model::ModelSpec;
use crate::superop::{SelfEnergy, SymmetryClass, DEFAULT_CAP};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

/// Independent stream for one trial; trials can be generated in any order.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Centered Gaussian `W` with `E W R W = S[R]`.
pub fn sample_noise(s: &SelfEnergy, class: SymmetryClass, rng: &mut ChaCha8Rng) -> Result<CMat> {
    let n = s.n();
    let nf = n as f64;
    match s {
        SelfEnergy::VarianceProfile {
            profile,
            second_moments,
        } => {
            let mut w = CMat::zeros(n, n);
            for a in 0..n {
                let var = match second_moments {
                    Some(t) => profile[(a, a)] + t[(a, a)],
                    None => profile[(a, a)],
                };
                w[(a, a)] = C64::new((var.max(0.0) / nf).sqrt() * gauss(rng), 0.0);
                for b in a + 1..n {
                    let v = if class.is_real() {
                        C64::new((profile[(a, b)] / nf).sqrt() * gauss(rng), 0.0)
                    } else {
                        let sd = (profile[(a, b)] / (2.0 * nf)).sqrt();
                        let re = gauss(rng);
                        let im = gauss(rng);
                        C64::new(sd * re, sd * im)
                    };
                    w[(a, b)] = v;
                    w[(b, a)] = v.conj();
                }
            }
            Ok(w)
        }
        SelfEnergy::Kronecker {
            structure,
            coefficients,
        } => {
            let l = linalg::psd_sqrt(coefficients);
            let xi = DVector::from_fn(structure.len(), |_, _| gauss(rng));
            let g = l * xi;
            let mut w = CMat::zeros(n, n);
            for (k, ak) in structure.iter().enumerate() {
                w += ak * C64::new(g[k], 0.0);
            }
            Ok(linalg::re_part(&w))
        }
        SelfEnergy::Dense { .. } => {
            if n > DEFAULT_CAP {
                return Err(MdeError::CapExceeded { n, cap: DEFAULT_CAP });
            }
            let root = linalg::psd_sqrt(&s.covariance_form(DEFAULT_CAP)?);
            let xi = DVector::from_fn(n * n, |_, _| gauss(rng));
            Ok(HermBasis::new(n).from_real_coords(&(root * xi)))
        }
    }
}

/// `H = A + W` for trial 0 of `seed`.
pub fn sample(model: &ModelSpec, seed: u64) -> Result<CMat> {
    sample_with(model, &mut trial_rng(seed, 0))
}

pub fn sample_with(model: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<CMat> {
    Ok(&model.a + sample_noise(&model.s, model.class, rng)?)
}

/// Standard GUE or GOE with spectrum converging to `[−2, 2]`.
pub fn sample_gaussian_reference(n: usize, class: SymmetryClass, seed: u64) -> Result<CMat> {
    if n < 2 {
        return Err(MdeError::InvalidArgument("reference ensembles need N ≥ 2".into()));
    }
    sample_noise(&SelfEnergy::flat(n, class, 1.0), class, &mut trial_rng(seed, 0))
}

/// Ascending eigenvalues; real symmetric input is decomposed in real arithmetic.
pub fn eigenvalues(h: &CMat, class: SymmetryClass) -> Vec<f64> {
    let mut v: Vec<f64> = if class.is_real() {
        let r = RMat::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)].re);
        r.symmetric_eigenvalues().iter().copied().collect()
    } else {
        h.clone().symmetric_eigenvalues().iter().copied().collect()
    };
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Exact OU step `H_t = A + e^{−t/2}(H0 − A) + √(1−e^{−t}) W` with `W` a fresh noise sample.
pub fn ou_evolve(h0: &CMat, model: &ModelSpec, t: f64, rng: &mut ChaCha8Rng) -> Result<CMat> {
    if t < 0.0 || !t.is_finite() {
        return Err(MdeError::InvalidArgument(format!("OU time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(h0.clone());
    }
    let decay = (-0.5 * t).exp();
    let fresh = sample_noise(&model.s, model.class, rng)?;
    Ok(&model.a + (h0 - &model.a) * C64::new(decay, 0.0) + fresh * C64::new((1.0 - (-t).exp()).sqrt(), 0.0))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GaussianSplit {
    /// Largest `c·t` with `(1−e^{−t})Σ − c·t·Σ^G ⪰ 0`.
    pub ct: f64,
    pub c: f64,
}

fn is_psd(m: &RMat, tol: f64) -> bool {
    linalg::sym_eigenvalues(m)[0] >= -tol
}

/// Reduced model with `S − ct·S^G` and the split constant.
pub fn gaussian_split(model: &ModelSpec, t: f64, cap: usize) -> Result<(ModelSpec, GaussianSplit)> {
    if t < 0.0 || !t.is_finite() {
        return Err(MdeError::InvalidArgument(format!("split time must be nonnegative, got {t}")));
    }
    let lambda = model.s.check_fullness(model.class, cap)?;
    if lambda <= 0.0 {
        return Err(MdeError::Fullness(lambda));
    }
    if t == 0.0 {
        return Ok((model.clone(), GaussianSplit { ct: 0.0, c: 0.0 }));
    }
    let decay = 1.0 - (-t).exp();
    // The flat reference has fullness 1 (complex) or 2 (real) in the same normalization.
    let ref_full = if model.class.is_real() { 2.0 } else { 1.0 };
    let c = match &model.s {
        SelfEnergy::VarianceProfile { .. } => decay * lambda / (ref_full * t),
        _ => {
            let form = model.s.covariance_form(cap)?;
            let gform = SelfEnergy::flat(model.n(), model.class, 1.0).covariance_form(cap)?;
            let basis = HermBasis::new(model.n());
            let slots: Vec<usize> = (0..basis.dim())
                .filter(|&j| !model.class.is_real() || basis.is_symmetric_slot(j))
                .collect();
            let restrict = |m: &RMat| RMat::from_fn(slots.len(), slots.len(), |i, j| m[(slots[i], slots[j])]);
            let form = restrict(&form) * decay;
            let gform = restrict(&gform);
            let ok = |c: f64| is_psd(&(&form - &gform * (c * t)), 1e-10);
            let mut lo = 0.0;
            let mut hi = decay * lambda / (ref_full * t) * 2.0 + 1.0;
            if !ok(lo) {
                return Err(MdeError::Fullness(lambda));
            }
            while hi - lo > 1e-10 * hi.max(1.0) {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
    };
    let ct = c * t;
    let s = model.s.minus_flat(model.class, ct, cap)?;
    let reduced = model.with_parts(format!("{}_split", model.label), model.a.clone(), s)?;
    Ok((reduced, GaussianSplit { ct, c }))
}

/// Model at time `t` of `H_t = √(1−t) W + A − t S[M(τ)]`, which keeps `M_t(τ) = M(τ)`.
pub fn interpolating_flow(model: &ModelSpec, tau: f64, t: f64, opts: &SolverOptions) -> Result<ModelSpec> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MdeError::InvalidArgument(format!("flow time must lie in [0, 1], got {t}")));
    }
    let dopts = density::DensityOptions::default();
    if density::density_at(model, tau, dopts.eta, opts)? >= dopts.threshold {
        return Err(MdeError::InsideSupport(tau));
    }
    if t == 0.0 {
        return Ok(model.clone());
    }
    let m = gap_solution(model, tau, opts)?;
    let a_t = &model.a - linalg::re_part(&model.s.act(&m)) * C64::new(t, 0.0);
    model.with_parts(format!("{}_flow_t{t}", model.label), a_t, model.s.scaled(1.0 - t))
}

/// Hermitian part of `M(τ + i·η_floor)` at a gap point.
pub fn gap_solution(model: &ModelSpec, tau: f64, opts: &SolverOptions) -> Result<CMat> {
    let sol = mde::solve_at(model, SpectralPoint::new(tau, opts.eta_floor), opts)?;
    Ok(linalg::re_part(&sol.m))
}

/// `‖M_t(τ) − M(τ)‖` for the flow model at time `t`.
pub fn flow_deviation(model: &ModelSpec, tau: f64, t: f64, opts: &SolverOptions) -> Result<f64> {
    let flowed = interpolating_flow(model, tau, t, opts)?;
    let a = gap_solution(model, tau, opts)?;
    let b = gap_solution(&flowed, tau, opts)?;
    Ok(linalg::op_norm(&(a - b)))
}

/// Sorted eigenvalues of independent trials.
#[derive(Debug, Clone, Serialize)]
pub struct TrialBatch {
    pub model_label: String,
    pub num_trials: usize,
    pub master_seed: u64,
    pub n: usize,
    pub eigenvalues: Vec<Vec<f64>>,
}

impl TrialBatch {
    pub fn generate(model: &ModelSpec, num_trials: usize, master_seed: u64) -> Result<Self> {
        let eigenvalues = (0..num_trials)
            .into_par_iter()
            .map(|k| {
                let h = TrialBatch::matrix(model, master_seed, k)?;
                Ok(eigenvalues(&h, model.class))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrialBatch {
            model_label: model.label.clone(),
            num_trials,
            master_seed,
            n: model.n(),
            eigenvalues,
        })
    }

    /// The matrix of trial `k`, regenerated from the seed.
    pub fn matrix(model: &ModelSpec, master_seed: u64, k: usize) -> Result<CMat> {
        sample_with(model, &mut trial_rng(master_seed, k as u64))
    }
}
