//! Monte Carlo checks on sampled ensembles.

use crate::density::{self, Band, DensityCurve, DensityOptions, EdgeReport, Side};
use crate::ensemble::{self, trial_rng, TrialBatch};
use crate::error::{MdeError, Result};
use crate::linalg::{self, CMat, CVec, C64};
use crate::mde::{self, SolverOptions, SpectralPoint};
use crate::model::ModelSpec;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalLawReport {
    pub z: SpectralPoint,
    pub n: usize,
    pub avg_errors: Vec<f64>,
    /// Largest isotropic error per trial.
    pub iso_errors: Vec<f64>,
    /// `|⟨RD⟩|` for `D = I + (z − A + S[G])G` and a random diagonal sign matrix `R`.
    pub defect_norms: Vec<f64>,
    pub bound_avg: f64,
    pub bound_iso: f64,
    pub median_avg: f64,
    pub p95_avg: f64,
    pub median_iso: f64,
    pub p95_iso: f64,
    pub median_defect: f64,
    pub max_resolvent_residual: f64,
}

struct LawTrial {
    avg: f64,
    iso: f64,
    defect: f64,
    residual: f64,
}

fn unit_vector(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> CVec {
    let v = CVec::from_fn(n, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im)
    });
    let nrm = v.norm();
    v / C64::new(nrm, 0.0)
}

fn basis_vector(n: usize, i: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[i] = C64::new(1.0, 0.0);
    v
}

/// Averaged and isotropic deviations of the resolvent from `M`.
pub fn local_law_errors(
    model: &ModelSpec,
    z: SpectralPoint,
    num_trials: usize,
    num_vectors: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<LocalLawReport> {
    let n = model.n();
    let nf = n as f64;
    if !(z.eta > 0.0) {
        return Err(MdeError::InvalidArgument(format!(
            "resolvent is ill-conditioned on the real axis (eta = {})",
            z.eta
        )));
    }
    if z.eta * nf < 1.0 {
        return Err(MdeError::InvalidArgument(format!(
            "eta = {} is below the local-law scale 1/N = {}",
            z.eta,
            1.0 / nf
        )));
    }
    let m = mde::solve_at(model, z, opts)?.m;
    let zc = z.z();
    let id = linalg::identity(n);
    let trials = (0..num_trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = trial_rng(seed, k as u64);
            let h = ensemble::sample_with(model, &mut rng)?;
            let shifted = &h - &id * zc;
            let g = shifted
                .clone()
                .lu()
                .try_inverse()
                .ok_or_else(|| MdeError::Numerical("resolvent is singular".into()))?;
            // The Frobenius norm bounds the operator norm.
            let residual = (linalg::matmul(&shifted, &g) - &id).norm();
            let diff = &g - &m;
            let avg = linalg::avg(&diff).norm();
            let mut pairs: Vec<(CVec, CVec)> =
                (0..num_vectors).map(|_| (unit_vector(n, &mut rng), unit_vector(n, &mut rng))).collect();
            pairs.push((basis_vector(n, 0), basis_vector(n, 0)));
            pairs.push((basis_vector(n, n - 1), basis_vector(n, n - 1)));
            let iso = pairs
                .iter()
                .map(|(x, y)| (x.adjoint() * &diff * y)[(0, 0)].norm())
                .fold(0.0, f64::max);
            // ⟨RD⟩ for a random diagonal sign matrix R, without forming D.
            let signs: Vec<f64> = (0..n)
                .map(|_| if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 })
                .collect();
            let x = &id * zc - &model.a + model.s.act(&g);
            let mut acc = C64::new(signs.iter().sum::<f64>(), 0.0);
            for i in 0..n {
                let mut row = C64::new(0.0, 0.0);
                for j in 0..n {
                    row += x[(i, j)] * g[(j, i)];
                }
                acc += row * signs[i];
            }
            Ok(LawTrial {
                avg,
                iso,
                defect: acc.norm() / nf,
                residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let avg_errors: Vec<f64> = trials.iter().map(|t| t.avg).collect();
    let iso_errors: Vec<f64> = trials.iter().map(|t| t.iso).collect();
    let defect_norms: Vec<f64> = trials.iter().map(|t| t.defect).collect();
    let rho = linalg::avg(&m).im / std::f64::consts::PI;
    let bound_avg = 1.0 / (nf * z.eta);
    Ok(LocalLawReport {
        z,
        n,
        median_avg: median(&avg_errors),
        p95_avg: quantile(&avg_errors, 0.95),
        median_iso: median(&iso_errors),
        p95_iso: quantile(&iso_errors, 0.95),
        median_defect: median(&defect_norms),
        max_resolvent_residual: trials.iter().map(|t| t.residual).fold(0.0, f64::max),
        bound_avg,
        bound_iso: (rho * bound_avg).sqrt() + bound_avg,
        avg_errors,
        iso_errors,
        defect_norms,
    })
}

/// Distance to the support, negative inside it (minus the distance to the nearest edge).
fn signed_distance(x: f64, bands: &[Band]) -> f64 {
    bands
        .iter()
        .map(|b| {
            if x < b.left {
                b.left - x
            } else if x > b.right {
                x - b.right
            } else {
                -(x - b.left).min(b.right - x)
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Number of eigenvalues, over all trials, at signed distance above `margin` from the support.
pub fn outlier_scan(batch: &TrialBatch, bands: &[Band], margin: f64) -> usize {
    batch
        .eigenvalues
        .iter()
        .flatten()
        .filter(|&&x| signed_distance(x, bands) > margin)
        .count()
}

/// Largest `N·max_i |u(i)|²` over trials and over eigenvectors with eigenvalue in `window`.
pub fn delocalisation_check(
    model: &ModelSpec,
    num_trials: usize,
    seed: u64,
    window: Option<(f64, f64)>,
) -> Result<f64> {
    let n = model.n();
    let ratios = (0..num_trials)
        .into_par_iter()
        .map(|k| {
            let h = TrialBatch::matrix(model, seed, k)?;
            let (vals, vecs) = linalg::herm_eigen(&h);
            let mut best: f64 = 0.0;
            for (j, &l) in vals.iter().enumerate() {
                if let Some((lo, hi)) = window {
                    if l < lo || l > hi {
                        continue;
                    }
                }
                let top = vecs.column(j).iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
                best = best.max(n as f64 * top);
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

fn count_below(eigs: &[f64], tau: f64) -> usize {
    eigs.partition_point(|&x| x < tau)
}

/// Rounds `expected` to the nearest integer, rejecting values more than 0.05 away.
pub fn integral_count(expected: f64) -> Result<usize> {
    let r = expected.round();
    if (expected - r).abs() > 0.05 || r < 0.0 {
        return Err(MdeError::InvalidArgument(format!(
            "expected count {expected} is not within 0.05 of an integer"
        )));
    }
    Ok(r as usize)
}

/// Fraction of trials with exactly `expected` eigenvalues below `tau_gap`.
pub fn band_counts(batch: &TrialBatch, tau_gap: f64, expected: f64) -> Result<f64> {
    let want = integral_count(expected)?;
    if batch.eigenvalues.is_empty() {
        return Ok(0.0);
    }
    let hits = batch
        .eigenvalues
        .iter()
        .filter(|e| count_below(e, tau_gap) == want)
        .count();
    Ok(hits as f64 / batch.eigenvalues.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct RigidityPoint {
    pub tau: f64,
    pub index: usize,
    /// `|λ_k − τ|` per trial.
    pub deviations: Vec<f64>,
    pub median: f64,
    pub max: f64,
    pub bound: f64,
    pub fraction_within: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RigidityReport {
    pub points: Vec<RigidityPoint>,
    pub constant: f64,
    pub surrogate: f64,
    pub fraction_within: f64,
}

/// Deviation of the `k(τ)`-th eigenvalue from `τ`, with `k(τ)` the N-quantile index.
///
/// The bound is `C·L·min{1/(N|τ−τ0|^{1/2}), N^{−2/3}}` with `L = log²N` and `τ0` the closest edge.
pub fn rigidity_profile(
    batch: &TrialBatch,
    curve: &DensityCurve,
    bands: &[Band],
    taus: &[f64],
    constant: f64,
) -> Result<RigidityReport> {
    let n = batch.n;
    let nf = n as f64;
    let surrogate = nf.ln().powi(2);
    let mut points = Vec::new();
    for &tau in taus {
        let k = density::quantile_index(curve, tau);
        if k == 0 || k > n {
            return Err(MdeError::InvalidArgument(format!("no eigenvalue index for tau = {tau}")));
        }
        let dist = bands
            .iter()
            .flat_map(|b| [b.left, b.right])
            .map(|e| (tau - e).abs())
            .fold(f64::INFINITY, f64::min);
        let bound = constant * surrogate * (1.0 / (nf * dist.sqrt())).min(nf.powf(-2.0 / 3.0));
        let deviations: Vec<f64> = batch.eigenvalues.iter().map(|e| (e[k - 1] - tau).abs()).collect();
        let within = deviations.iter().filter(|&&d| d <= bound).count();
        points.push(RigidityPoint {
            tau,
            index: k,
            median: median(&deviations),
            max: deviations.iter().copied().fold(0.0, f64::max),
            bound,
            fraction_within: within as f64 / deviations.len().max(1) as f64,
            deviations,
        });
    }
    let total: usize = points.iter().map(|p| p.deviations.len()).sum();
    let within: f64 = points.iter().map(|p| p.fraction_within * p.deviations.len() as f64).sum();
    Ok(RigidityReport {
        points,
        constant,
        surrogate,
        fraction_within: if total == 0 { 1.0 } else { within / total as f64 },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeStatSample {
    pub edge: EdgeReport,
    /// 1-based index of the eigenvalue at the edge.
    pub i0: usize,
    pub k: usize,
    /// Per kept trial, `γ N^{2/3}(λ_{i0−j} − τ0)` for `j = 0..=k`; left edges are mirrored.
    pub values: Vec<Vec<f64>>,
    pub num_trials: usize,
    pub excluded: usize,
    pub exclusion_rate: f64,
}

impl EdgeStatSample {
    /// The `j`-th statistic across kept trials.
    pub fn statistic(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j]).collect()
    }
}

/// Rescaled extreme eigenvalues at a regular edge.
///
/// Trials whose count below the adjacent gap differs from the deterministic count are
/// excluded; an exclusion rate of 1% or more is an error.
pub fn edge_statistics(
    model: &ModelSpec,
    edge: &EdgeReport,
    k: usize,
    num_trials: usize,
    seed: u64,
    dopts: &DensityOptions,
    opts: &SolverOptions,
) -> Result<EdgeStatSample> {
    if !edge.regular {
        return Err(MdeError::NotRegular {
            tau0: edge.tau0,
            reason: "edge statistics need a regular edge".into(),
        });
    }
    let n = model.n();
    let nf = n as f64;
    let bands = density::find_bands(model, dopts, opts)?;
    let below: f64 = bands
        .iter()
        .filter(|b| 0.5 * (b.left + b.right) < edge.tau0)
        .map(|b| b.mass)
        .sum();
    let count = integral_count(nf * below)?;
    let i0 = match edge.side {
        Side::Right => count,
        Side::Left => count + 1,
    };
    let last = match edge.side {
        Side::Right => i0.checked_sub(k).filter(|&v| v >= 1),
        Side::Left => Some(i0 + k).filter(|&v| v <= n),
    };
    if i0 == 0 || i0 > n || last.is_none() {
        return Err(MdeError::InvalidArgument(format!("k = {k} runs past the spectrum from index {i0}")));
    }
    let probe = if edge.gap_adjacent.is_finite() {
        Some(edge.tau0 + edge.side.gap_direction() * 0.5 * edge.gap_adjacent)
    } else {
        None
    };
    let scale = edge.gamma_edge * nf.powf(2.0 / 3.0);
    let rows = (0..num_trials)
        .into_par_iter()
        .map(|t| {
            let h = TrialBatch::matrix(model, seed, t)?;
            let e = ensemble::eigenvalues(&h, model.class);
            if let Some(p) = probe {
                if count_below(&e, p) != count {
                    return Ok(None);
                }
            }
            let row: Vec<f64> = (0..=k)
                .map(|j| match edge.side {
                    Side::Right => scale * (e[i0 - 1 - j] - edge.tau0),
                    Side::Left => scale * (edge.tau0 - e[i0 - 1 + j]),
                })
                .collect();
            Ok(Some(row))
        })
        .collect::<Result<Vec<_>>>()?;
    let excluded = rows.iter().filter(|r| r.is_none()).count();
    let exclusion_rate = if num_trials == 0 { 0.0 } else { excluded as f64 / num_trials as f64 };
    if exclusion_rate >= 0.01 {
        return Err(MdeError::Numerical(format!(
            "band-count exclusions {excluded}/{num_trials} reach 1%"
        )));
    }
    Ok(EdgeStatSample {
        edge: edge.clone(),
        i0,
        k,
        values: rows.into_iter().flatten().collect(),
        num_trials,
        excluded,
        exclusion_rate,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MdeError::InvalidArgument("KS distance needs two nonempty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.partial_cmp(q).unwrap());
    y.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, Serialize)]
pub struct GapCrossingReport {
    pub tau: f64,
    pub delta: f64,
    pub t_grid: Vec<f64>,
    /// Trials in which some eigenvalue entered `(τ−δ, τ+δ)` at some grid time.
    pub crossings: usize,
    pub num_trials: usize,
    /// Eigenvalues of `A_1` below `τ`.
    pub endpoint_count: usize,
    /// Negative eigenvalues of `M(τ)`.
    pub negative_count: usize,
}

/// Samples `H_t = √(1−t) W + A_t` with one `W` per trial shared across the time grid.
pub fn gap_crossing_experiment(
    model: &ModelSpec,
    tau: f64,
    num_t_steps: usize,
    num_trials: usize,
    seed: u64,
    delta: f64,
    opts: &SolverOptions,
) -> Result<GapCrossingReport> {
    if num_t_steps < 2 {
        return Err(MdeError::InvalidArgument("the time grid needs at least two points".into()));
    }
    let t_grid = density::linspace(0.0, 1.0, num_t_steps);
    let flows: Vec<ModelSpec> = t_grid
        .iter()
        .map(|&t| ensemble::interpolating_flow(model, tau, t, opts))
        .collect::<Result<_>>()?;
    let crossed = (0..num_trials)
        .into_par_iter()
        .map(|k| {
            let w = ensemble::sample_noise(&model.s, model.class, &mut trial_rng(seed, k as u64))?;
            for (t, f) in t_grid.iter().zip(&flows) {
                let h: CMat = &w * C64::new((1.0 - t).max(0.0).sqrt(), 0.0) + &f.a;
                let e = ensemble::eigenvalues(&h, model.class);
                if e.iter().any(|&x| (x - tau).abs() < delta) {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect::<Result<Vec<bool>>>()?;
    let end = flows.last().expect("grid is nonempty");
    let endpoint_count = count_below(&ensemble::eigenvalues(&end.a, model.class), tau);
    let mg = ensemble::gap_solution(model, tau, opts)?;
    let negative_count = linalg::herm_eigenvalues(&mg).iter().filter(|&&v| v < 0.0).count();
    Ok(GapCrossingReport {
        tau,
        delta,
        t_grid,
        crossings: crossed.into_iter().filter(|&c| c).count(),
        num_trials,
        endpoint_count,
        negative_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superop::{SelfEnergy, SymmetryClass};
    use crate::RMat;

    fn deterministic(diag: &[f64]) -> ModelSpec {
        let n = diag.len();
        let a = CMat::from_fn(n, n, |i, j| C64::new(if i == j { diag[i] } else { 0.0 }, 0.0));
        let s = SelfEnergy::variance_profile(SymmetryClass::ComplexHermitian, RMat::zeros(n, n), None).unwrap();
        ModelSpec::new("diag", SymmetryClass::ComplexHermitian, a, s).unwrap()
    }

    #[test]
    fn ks_trivial_cases() {
        let a = [0.3, 0.1, 0.2];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&a, &[5.0, 6.0]).unwrap(), 1.0);
        assert!(ks_distance(&[], &a).is_err());
        // Samples {0, 1} and {0.5}: the ECDFs differ by 1/2 on [0, 1).
        assert!((ks_distance(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
    }

    #[test]
    fn deterministic_matrix_sanity() {
        let m = deterministic(&[-0.5, 0.1, 0.2, 0.7]);
        let batch = TrialBatch::generate(&m, 3, 1).unwrap();
        let bands = vec![Band { left: -1.0, right: 1.0, mass: 1.0 }];
        assert_eq!(outlier_scan(&batch, &bands, 0.2), 0);
        assert_eq!(outlier_scan(&batch, &bands, -0.6), 6);
        assert_eq!(delocalisation_check(&m, 2, 1, None).unwrap(), 4.0);
        assert_eq!(band_counts(&batch, 0.0, 1.0).unwrap(), 1.0);
        assert!(band_counts(&batch, 0.0, 1.2).is_err());
    }

    #[test]
    fn flat_counts_outside_spectrum() {
        let m = ModelSpec::flat(40, SymmetryClass::ComplexHermitian, 1.0);
        let batch = TrialBatch::generate(&m, 20, 2).unwrap();
        assert_eq!(band_counts(&batch, 3.0, 40.0).unwrap(), 1.0);
        assert_eq!(band_counts(&batch, -3.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn resolvent_is_exact_and_small_local_law() {
        let m = ModelSpec::flat(64, SymmetryClass::ComplexHermitian, 1.0);
        let z = SpectralPoint::new(0.5, 0.5);
        let r = local_law_errors(&m, z, 10, 8, 3, &SolverOptions::default()).unwrap();
        assert!(r.max_resolvent_residual <= 1e-10);
        assert!(r.median_avg <= 10.0 * r.bound_avg);
        assert_eq!(r.iso_errors.len(), 10);
        assert!(local_law_errors(&m, SpectralPoint::new(0.5, 0.0), 1, 1, 0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn flat_edge_matches_reference_construction() {
        let n = 30;
        let m = ModelSpec::flat(n, SymmetryClass::RealSymmetric, 1.0);
        let o = SolverOptions::default();
        let d = DensityOptions::default();
        let bands = density::find_bands(&m, &d, &o).unwrap();
        let edges = density::regular_edges(&m, &bands, &d, &o).unwrap();
        let right = edges.iter().find(|e| e.side == Side::Right).unwrap();
        let s = edge_statistics(&m, right, 2, 50, 7, &d, &o).unwrap();
        assert_eq!(s.i0, n);
        assert_eq!(s.excluded, 0);
        for (t, row) in s.values.iter().enumerate() {
            let h = ensemble::sample_noise(&m.s, m.class, &mut trial_rng(7, t as u64)).unwrap();
            let e = ensemble::eigenvalues(&h, m.class);
            let want = right.gamma_edge * (n as f64).powf(2.0 / 3.0) * (e[n - 1] - right.tau0);
            assert!((row[0] - want).abs() < 1e-12);
            assert!(row[0] >= row[1] && row[1] >= row[2]);
        }
    }

    #[test]
    fn flat_gap_crossing_is_trivial() {
        let m = ModelSpec::flat(20, SymmetryClass::ComplexHermitian, 1.0);
        let r = gap_crossing_experiment(&m, 3.0, 5, 10, 1, 0.01, &SolverOptions::default()).unwrap();
        assert_eq!(r.crossings, 0);
        assert_eq!(r.endpoint_count, r.negative_count);
    }

    #[test]
    fn two_band_flow_endpoint() {
        let m = ModelSpec::two_band(20, SymmetryClass::ComplexHermitian, 2.0);
        let r = gap_crossing_experiment(&m, 0.0, 3, 5, 4, 0.01, &SolverOptions::default()).unwrap();
        assert_eq!(r.endpoint_count, 10);
        assert_eq!(r.negative_count, 10);
        assert_eq!(r.crossings, 0);
    }
}
