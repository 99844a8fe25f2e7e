//! Density of states, support, edges, slope parameters and band masses.

use crate::error::{MdeError, Result};
use crate::linalg::{self, CMat};
use crate::mde::{self, SolverOptions, SpectralPoint};
use crate::model::ModelSpec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityOptions {
    /// Base η of the two-point Richardson extrapolation on grids.
    pub eta: f64,
    pub threshold: f64,
    /// Bands separated by less than this are merged.
    pub merge_gap: f64,
    pub bisect_tol: f64,
    pub grid_points: usize,
    /// Nodes per band for the edge-clustered quadrature.
    pub quad_points: usize,
    pub quad_eta: f64,
    pub fit_min: f64,
    pub fit_max: f64,
    pub fit_points: usize,
    pub fit_eta: f64,
    pub macroscopic_gap: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Relative fit residual above which an edge is flagged non-regular.
    pub regular_residual: f64,
    /// η used for real-axis evaluations next to an edge.
    pub edge_eta: f64,
    pub edge_tol: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            eta: 1e-5,
            threshold: 1e-4,
            merge_gap: 1e-3,
            bisect_tol: 1e-8,
            grid_points: 2001,
            quad_points: 400,
            quad_eta: 1e-8,
            fit_min: 1e-4,
            fit_max: 1e-2,
            fit_points: 24,
            fit_eta: 1e-7,
            macroscopic_gap: 0.05,
            gamma_min: 0.05,
            gamma_max: 20.0,
            regular_residual: 0.05,
            edge_eta: 1e-12,
            edge_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityCurve {
    pub taus: Vec<f64>,
    pub rho: Vec<f64>,
    pub eta_used: f64,
    pub model_label: String,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Band {
    pub left: f64,
    pub right: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Direction pointing into the adjacent gap.
    pub fn gap_direction(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }
}

/// Edge location from the support scan. `gap_adjacent` is infinite at the extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeLocation {
    pub tau0: f64,
    pub side: Side,
    pub gap_adjacent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeReport {
    pub tau0: f64,
    pub side: Side,
    pub gamma_edge: f64,
    pub gap_adjacent: f64,
    pub fit_window: (f64, f64),
    pub fit_residual: f64,
    pub regular: bool,
    /// Coefficient of the linear correction in `ρ = (γ^{3/2}/π)√ω + dω`.
    pub linear_correction: f64,
}

/// Density evaluator that warm-starts from its previous point.
struct Probe<'a> {
    model: &'a ModelSpec,
    eta: f64,
    opts: &'a SolverOptions,
    last: Option<(CMat, CMat)>,
}

impl<'a> Probe<'a> {
    fn new(model: &'a ModelSpec, eta: f64, opts: &'a SolverOptions) -> Self {
        Probe {
            model,
            eta,
            opts,
            last: None,
        }
    }

    fn rho(&mut self, tau: f64) -> Result<f64> {
        let z1 = SpectralPoint::new(tau, self.eta);
        let z2 = SpectralPoint::new(tau, 2.0 * self.eta);
        let (s1, s2) = match &self.last {
            Some((m1, m2)) => (
                mde::solve_near(self.model, z1, m1, self.opts)?,
                mde::solve_near(self.model, z2, m2, self.opts)?,
            ),
            None => (
                mde::solve_at(self.model, z1, self.opts)?,
                mde::solve_at(self.model, z2, self.opts)?,
            ),
        };
        let r = richardson(s1.rho(), s2.rho());
        self.last = Some((s1.m, s2.m));
        Ok(r)
    }
}

fn richardson(r1: f64, r2: f64) -> f64 {
    let r = 2.0 * r1 - r2;
    if r >= 0.0 {
        r
    } else if r >= -1e-8 {
        0.0
    } else {
        r1.max(0.0)
    }
}

/// `π⁻¹ Im⟨M(τ+iη)⟩` extrapolated to η → 0 from `η` and `2η`.
pub fn density_at(model: &ModelSpec, tau: f64, eta: f64, opts: &SolverOptions) -> Result<f64> {
    if eta < opts.eta_floor {
        return Err(MdeError::EtaBelowFloor {
            eta,
            floor: opts.eta_floor,
        });
    }
    Probe::new(model, eta, opts).rho(tau)
}

pub fn linspace(lo: f64, hi: f64, npts: usize) -> Vec<f64> {
    if npts == 1 {
        return vec![lo];
    }
    (0..npts)
        .map(|i| lo + (hi - lo) * i as f64 / (npts - 1) as f64)
        .collect()
}

/// Density on a uniform grid.
pub fn density_curve(
    model: &ModelSpec,
    lo: f64,
    hi: f64,
    npts: usize,
    eta: f64,
    opts: &SolverOptions,
) -> Result<DensityCurve> {
    if !(hi > lo) || npts < 2 {
        return Err(MdeError::InvalidArgument(format!(
            "grid needs lo < hi and at least 2 points, got {lo}:{hi}:{npts}"
        )));
    }
    let taus = linspace(lo, hi, npts);
    let rho_of = |s: &mde::MdeSolution| {
        if s.converged {
            Ok(s.rho())
        } else {
            Err(MdeError::NotConverged {
                tau: s.z.tau,
                eta: s.z.eta,
                iterations: s.iterations,
                residual: s.residual,
            })
        }
    };
    let s1 = mde::solve_grid_map(model, &taus, eta, opts, rho_of)?;
    let s2 = mde::solve_grid_map(model, &taus, 2.0 * eta, opts, rho_of)?;
    let mut rho = Vec::with_capacity(npts);
    for (a, b) in s1.into_iter().zip(s2) {
        rho.push(richardson(a?, b?));
    }
    Ok(DensityCurve {
        taus,
        rho,
        eta_used: eta,
        model_label: model.label.clone(),
        n: model.n(),
    })
}

/// Default scan grid covering the whole self-consistent spectrum.
pub fn full_curve(model: &ModelSpec, dopts: &DensityOptions, opts: &SolverOptions) -> Result<DensityCurve> {
    let (lo, hi) = model.spectral_bounds();
    density_curve(model, lo - 0.05, hi + 0.05, dopts.grid_points, dopts.eta, opts)
}

/// Trapezoid integral of the curve.
pub fn curve_integral(curve: &DensityCurve) -> f64 {
    curve
        .taus
        .windows(2)
        .zip(curve.rho.windows(2))
        .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] + r[1]))
        .sum()
}

/// `∫ρ` over `[left, right]` with nodes clustered at both ends (spacing ∝ distance^{1/2}).
pub fn band_integral(
    model: &ModelSpec,
    left: f64,
    right: f64,
    dopts: &DensityOptions,
    opts: &SolverOptions,
) -> Result<f64> {
    let q = dopts.quad_points.max(8);
    let w = right - left;
    let h = PI / q as f64;
    let mut probe = Probe::new(model, dopts.quad_eta, opts);
    let mut sum = 0.0;
    for k in 1..q {
        let th = h * k as f64;
        let tau = left + 0.5 * w * (1.0 - th.cos());
        sum += probe.rho(tau)? * 0.5 * w * th.sin() * h;
    }
    Ok(sum)
}

fn bisect(probe: &mut Probe, mut outside: f64, mut inside: f64, threshold: f64, tol: f64) -> Result<f64> {
    while (inside - outside).abs() > tol {
        let mid = 0.5 * (inside + outside);
        if probe.rho(mid)? > threshold {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(0.5 * (inside + outside))
}

/// Maximal runs of `ρ > threshold`, endpoints refined by bisection, masses by quadrature.
pub fn support(
    model: &ModelSpec,
    curve: &DensityCurve,
    dopts: &DensityOptions,
    opts: &SolverOptions,
) -> Result<Vec<Band>> {
    let thr = dopts.threshold;
    let t = &curve.taus;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, &r) in curve.rho.iter().enumerate() {
        match (r > thr, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, t.len() - 1));
    }
    let mut probe = Probe::new(model, curve.eta_used, opts);
    let mut raw: Vec<(f64, f64)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        let left = if s == 0 { t[0] } else { bisect(&mut probe, t[s - 1], t[s], thr, dopts.bisect_tol)? };
        let right = if e + 1 == t.len() {
            t[e]
        } else {
            bisect(&mut probe, t[e + 1], t[e], thr, dopts.bisect_tol)?
        };
        raw.push((left, right));
    }
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (l, r) in raw {
        match merged.last_mut() {
            Some(last) if l - last.1 < dopts.merge_gap => last.1 = r,
            _ => merged.push((l, r)),
        }
    }
    merged
        .into_iter()
        .map(|(left, right)| {
            Ok(Band {
                left,
                right,
                mass: band_integral(model, left, right, dopts, opts)?,
            })
        })
        .collect()
}

/// Bands of the model over its full spectral range.
pub fn find_bands(model: &ModelSpec, dopts: &DensityOptions, opts: &SolverOptions) -> Result<Vec<Band>> {
    let curve = full_curve(model, dopts, opts)?;
    let bands = support(model, &curve, dopts, opts)?;
    if bands.is_empty() {
        return Err(MdeError::EmptySupport);
    }
    Ok(bands)
}

/// One left and one right edge per band with the adjacent gap lengths.
pub fn detect_edges(bands: &[Band]) -> Vec<EdgeLocation> {
    let mut out = Vec::with_capacity(2 * bands.len());
    for (i, b) in bands.iter().enumerate() {
        let gap_left = if i == 0 { f64::INFINITY } else { b.left - bands[i - 1].right };
        let gap_right = if i + 1 == bands.len() {
            f64::INFINITY
        } else {
            bands[i + 1].left - b.right
        };
        out.push(EdgeLocation {
            tau0: b.left,
            side: Side::Left,
            gap_adjacent: gap_left,
        });
        out.push(EdgeLocation {
            tau0: b.right,
            side: Side::Right,
            gap_adjacent: gap_right,
        });
    }
    out
}

/// Options for evaluations next to the real axis.
pub fn edge_solver_options(dopts: &DensityOptions, opts: &SolverOptions) -> SolverOptions {
    SolverOptions {
        tol: dopts.edge_tol,
        eta_floor: opts.eta_floor.min(dopts.edge_eta),
        max_iter: opts.max_iter.max(5000),
        ..opts.clone()
    }
}

/// `(d⟨M⟩/dτ)^{-2}` at a gap point, which vanishes linearly at a square-root edge.
/// Returns `None` when `τ` turns out to lie in the support.
fn inverse_slope_sq(model: &ModelSpec, tau: f64, dopts: &DensityOptions, eopts: &SolverOptions) -> Result<Option<f64>> {
    let sol = mde::solve_at(model, SpectralPoint::new(tau, dopts.edge_eta), eopts)?;
    if sol.avg().im > 1e-7 {
        return Ok(None);
    }
    let d = linalg::avg(&mde::dm_dz(model, &sol.m)?).re;
    Ok(Some(1.0 / (d * d)))
}

/// Edge location to high precision from the gap side.
pub fn refine_edge(model: &ModelSpec, loc: &EdgeLocation, dopts: &DensityOptions, opts: &SolverOptions) -> Result<f64> {
    let eopts = edge_solver_options(dopts, opts);
    let g = loc.side.gap_direction();
    let reach = if loc.gap_adjacent.is_finite() { 0.25 * loc.gap_adjacent } else { 0.5 };
    let mut est = loc.tau0;
    for &h0 in &[1e-5, 1e-6, 1e-7] {
        let mut h = h0;
        let mut pair = None;
        while h < reach {
            let t1 = est + g * h;
            let t2 = est + 2.0 * g * h;
            match (
                inverse_slope_sq(model, t1, dopts, &eopts)?,
                inverse_slope_sq(model, t2, dopts, &eopts)?,
            ) {
                (Some(f1), Some(f2)) => {
                    pair = Some((t1, f1, t2, f2));
                    break;
                }
                _ => h *= 2.0,
            }
        }
        let Some((t1, f1, t2, f2)) = pair else {
            return Err(MdeError::NotRegular {
                tau0: loc.tau0,
                reason: "no gap found next to the edge".into(),
            });
        };
        let root = t1 - f1 * (t2 - t1) / (f2 - f1);
        if !root.is_finite() || (root - loc.tau0).abs() > 1e-3 {
            return Err(MdeError::NotRegular {
                tau0: loc.tau0,
                reason: format!("gap-side extrapolation moved the edge to {root}"),
            });
        }
        est = root;
    }
    Ok(est)
}

/// Slope parameter from a least-squares fit of `ρ(τ0 ∓ ω) = (γ^{3/2}/π)√ω + dω`.
pub fn edge_slope(model: &ModelSpec, loc: &EdgeLocation, dopts: &DensityOptions, opts: &SolverOptions) -> Result<EdgeReport> {
    if loc.gap_adjacent < dopts.macroscopic_gap {
        return Err(MdeError::NotRegular {
            tau0: loc.tau0,
            reason: format!(
                "adjacent gap {} is below the macroscopic threshold {}",
                loc.gap_adjacent, dopts.macroscopic_gap
            ),
        });
    }
    let tau0 = refine_edge(model, loc, dopts, opts)?;
    let g = loc.side.gap_direction();
    let k = dopts.fit_points.max(3);
    let (a, b) = (dopts.fit_min.ln(), dopts.fit_max.ln());
    let omegas: Vec<f64> = (0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()).collect();
    let mut probe = Probe::new(model, dopts.fit_eta, opts);
    let mut rho = Vec::with_capacity(k);
    for &w in &omegas {
        rho.push(probe.rho(tau0 - g * w)?);
    }
    let x = DMatrix::from_fn(k, 2, |i, j| if j == 0 { omegas[i].sqrt() } else { omegas[i] });
    let y = DVector::from_vec(rho.clone());
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| MdeError::Numerical(e.to_string()))?;
    let resid = (&y - &x * &coef).norm() / y.norm().max(1e-300);
    let c = coef[0];
    let gamma = if c > 0.0 { (PI * c).powf(2.0 / 3.0) } else { f64::NAN };
    let regular = c > 0.0
        && resid <= dopts.regular_residual
        && gamma >= dopts.gamma_min
        && gamma <= dopts.gamma_max;
    Ok(EdgeReport {
        tau0,
        side: loc.side,
        gamma_edge: gamma,
        gap_adjacent: loc.gap_adjacent,
        fit_window: (dopts.fit_min, dopts.fit_max),
        fit_residual: resid,
        regular,
        linear_correction: coef[1],
    })
}

/// Slope reports for every edge adjacent to a macroscopic gap.
pub fn regular_edges(model: &ModelSpec, bands: &[Band], dopts: &DensityOptions, opts: &SolverOptions) -> Result<Vec<EdgeReport>> {
    detect_edges(bands)
        .iter()
        .filter(|e| e.gap_adjacent >= dopts.macroscopic_gap)
        .map(|e| edge_slope(model, e, dopts, opts))
        .collect()
}

/// Negative eigenvalue count of `Re M(τ)` and `N ∫_{−∞}^{τ} ρ` at a gap point.
pub fn band_mass(model: &ModelSpec, tau_gap: f64, dopts: &DensityOptions, opts: &SolverOptions) -> Result<(usize, f64)> {
    if density_at(model, tau_gap, dopts.eta, opts)? >= dopts.threshold {
        return Err(MdeError::InsideSupport(tau_gap));
    }
    let sol = mde::solve_at(model, SpectralPoint::new(tau_gap, opts.eta_floor), opts)?;
    let neg = linalg::herm_eigenvalues(&linalg::re_part(&sol.m))
        .iter()
        .filter(|v| **v < 0.0)
        .count();
    let bands = match find_bands(model, dopts, opts) {
        Ok(b) => b,
        Err(MdeError::EmptySupport) => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut integral = 0.0;
    for b in bands {
        if b.right <= tau_gap {
            integral += b.mass;
        } else if b.left < tau_gap {
            integral += band_integral(model, b.left, tau_gap, dopts, opts)?;
        }
    }
    Ok((neg, integral * model.n() as f64))
}

/// `⌈N ∫_{−∞}^{τ} ρ⌉` by trapezoid quadrature on the curve. Values within 0.05 of an
/// integer are rounded to it so that quadrature error does not push the ceiling up.
pub fn quantile_index(curve: &DensityCurve, tau: f64) -> usize {
    let t = &curve.taus;
    let r = &curve.rho;
    let mut acc = 0.0;
    for i in 1..t.len() {
        if t[i] <= tau {
            acc += 0.5 * (t[i] - t[i - 1]) * (r[i] + r[i - 1]);
        } else {
            if t[i - 1] < tau {
                let s = (tau - t[i - 1]) / (t[i] - t[i - 1]);
                let rt = r[i - 1] + s * (r[i] - r[i - 1]);
                acc += 0.5 * (tau - t[i - 1]) * (r[i - 1] + rt);
            }
            break;
        }
    }
    let x = acc * curve.n as f64;
    let k = if (x - x.round()).abs() <= 0.05 { x.round() } else { x.ceil() };
    (k.max(0.0) as usize).min(curve.n)
}

/// Inverse of the integrated density: the smallest τ on the curve with `N∫ρ ≥ k`.
pub fn quantile_location(curve: &DensityCurve, k: usize) -> f64 {
    let target = k as f64 / curve.n as f64;
    let t = &curve.taus;
    let r = &curve.rho;
    let mut acc = 0.0;
    for i in 1..t.len() {
        let step = 0.5 * (t[i] - t[i - 1]) * (r[i] + r[i - 1]);
        if acc + step >= target && step > 0.0 {
            return t[i - 1] + (t[i] - t[i - 1]) * (target - acc) / step;
        }
        acc += step;
    }
    t[t.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superop::SymmetryClass;

    fn flat() -> ModelSpec {
        ModelSpec::flat(2, SymmetryClass::ComplexHermitian, 1.0)
    }

    fn semicircle(t: f64) -> f64 {
        if t.abs() >= 2.0 {
            0.0
        } else {
            (4.0 - t * t).sqrt() / (2.0 * PI)
        }
    }

    #[test]
    fn density_points() {
        let o = SolverOptions::default();
        assert!((density_at(&flat(), 0.0, 1e-5, &o).unwrap() - 1.0 / PI).abs() < 1e-6);
        assert!(density_at(&flat(), 3.0, 1e-5, &o).unwrap().abs() < 1e-6);
        let t = 2.0 - 1e-2;
        assert!((density_at(&flat(), t, 1e-5, &o).unwrap() - semicircle(t)).abs() < 2e-4);
    }

    #[test]
    fn flat_support_and_edges() {
        let o = SolverOptions::default();
        let d = DensityOptions::default();
        let bands = find_bands(&flat(), &d, &o).unwrap();
        assert_eq!(bands.len(), 1);
        assert!((bands[0].left + 2.0).abs() < 1e-4 && (bands[0].right - 2.0).abs() < 1e-4);
        assert!((bands[0].mass - 1.0).abs() < 5e-3);
        let edges = detect_edges(&bands);
        assert_eq!(edges.len(), 2);
        assert!(edges.iter().all(|e| e.gap_adjacent.is_infinite()));
        let r = edge_slope(&flat(), &edges[1], &d, &o).unwrap();
        assert!((r.tau0 - 2.0).abs() < 1e-9, "{}", r.tau0);
        assert!((r.gamma_edge - 1.0).abs() < 2e-2 && r.regular);
    }

    #[test]
    fn zero_density_curve_has_no_bands() {
        let curve = DensityCurve {
            taus: linspace(5.0, 6.0, 11),
            rho: vec![0.0; 11],
            eta_used: 1e-5,
            model_label: "x".into(),
            n: 2,
        };
        let b = support(&flat(), &curve, &DensityOptions::default(), &SolverOptions::default()).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn single_band_edges_are_unbounded() {
        let e = detect_edges(&[Band { left: 0.0, right: 1.5, mass: 1.0 }]);
        assert_eq!(e.len(), 2);
        assert!(e[0].gap_adjacent.is_infinite() && e[1].gap_adjacent.is_infinite());
    }

    #[test]
    fn quantiles_of_semicircle() {
        let taus = linspace(-2.5, 2.5, 5001);
        let rho: Vec<f64> = taus.iter().map(|&t| semicircle(t)).collect();
        let curve = DensityCurve {
            taus,
            rho,
            eta_used: 0.0,
            model_label: "flat".into(),
            n: 100,
        };
        assert_eq!(quantile_index(&curve, 0.0), 50);
        assert_eq!(quantile_index(&curve, -2.4), 0);
        assert_eq!(quantile_index(&curve, 2.4), 100);
        assert!(quantile_location(&curve, 50).abs() < 1e-4);
    }
}
