//! Solver for `I + (z − A + S[M])M = 0` with `Im M ≻ 0`.

use crate::error::{MdeError, Result};
use crate::linalg::{self, gmres, CMat, CVec, C64};
use crate::model::ModelSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPoint {
    pub tau: f64,
    pub eta: f64,
}

impl SpectralPoint {
    pub fn new(tau: f64, eta: f64) -> Self {
        SpectralPoint { tau, eta }
    }

    pub fn z(&self) -> C64 {
        C64::new(self.tau, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Residual tolerance for the target point.
    pub tol: f64,
    /// Residual tolerance used at intermediate continuation levels.
    pub level_tol: f64,
    pub eta_floor: f64,
    pub max_iter: usize,
    pub newton_basin: f64,
    pub continuation_start: f64,
    pub continuation_ratio: f64,
    /// Grid points per warm-start chain in [`solve_grid`].
    pub chunk: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-11,
            level_tol: 1e-8,
            eta_floor: 1e-8,
            max_iter: 3000,
            newton_basin: 1e-2,
            continuation_start: 2.0,
            continuation_ratio: 1.5,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MdeSolution {
    pub m: CMat,
    pub z: SpectralPoint,
    pub residual: f64,
    pub iterations: usize,
    pub newton_steps: usize,
    /// Newton steps rejected for losing `Im M ≻ 0` or increasing the residual.
    pub fallbacks: usize,
    pub converged: bool,
}

impl MdeSolution {
    pub fn avg(&self) -> C64 {
        linalg::avg(&self.m)
    }

    /// `π⁻¹ Im⟨M⟩`.
    pub fn rho(&self) -> f64 {
        self.avg().im / std::f64::consts::PI
    }

    pub fn im_m(&self) -> CMat {
        linalg::im_part(&self.m)
    }
}

/// Iterate representation: diagonal models keep only `diag M`.
#[derive(Clone)]
enum State {
    Diag(CVec),
    Full(CMat),
}

impl State {
    fn to_matrix(&self) -> CMat {
        match self {
            State::Diag(v) => CMat::from_diagonal(v),
            State::Full(m) => m.clone(),
        }
    }
}

struct Engine<'a> {
    model: &'a ModelSpec,
    /// Reduced `(a, K)` on lumped index classes for diagonal models.
    diag: Option<(nalgebra::DVector<f64>, CMat)>,
    /// Class of each index and one representative per class.
    classes: Vec<usize>,
    reps: Vec<usize>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a ModelSpec) -> Self {
        let n = model.n();
        match model.diag_reduction() {
            Some(r) => Engine {
                model,
                diag: Some((r.a.clone(), linalg::to_complex(&r.k))),
                classes: r.classes.clone(),
                reps: r.reps.clone(),
            },
            None => Engine {
                model,
                diag: None,
                classes: (0..n).collect(),
                reps: (0..n).collect(),
            },
        }
    }

    fn matrix(&self, st: &State) -> CMat {
        match st {
            State::Diag(v) => CMat::from_diagonal(&CVec::from_fn(self.classes.len(), |i, _| v[self.classes[i]])),
            State::Full(m) => m.clone(),
        }
    }

    fn state_from(&self, m: &CMat) -> State {
        match &self.diag {
            Some(_) if is_diagonal(m) => State::Diag(CVec::from_fn(self.reps.len(), |c, _| m[(self.reps[c], self.reps[c])])),
            _ => State::Full(m.clone()),
        }
    }

    fn initial(&self, z: C64) -> State {
        let n = self.model.n();
        let v = C64::new(-1.0, 0.0) / z;
        match &self.diag {
            Some(_) => State::Diag(CVec::from_element(self.reps.len(), v)),
            None => State::Full(linalg::identity(n) * v),
        }
    }

    /// `D = I + (z − A + S[M])M` and its operator norm.
    fn defect(&self, st: &State, z: C64) -> (State, f64) {
        match (st, &self.diag) {
            (State::Diag(m), Some((a, k))) => {
                let km = k * m;
                let d = CVec::from_fn(m.len(), |i, _| {
                    C64::new(1.0, 0.0) + (z - a[i] + km[i]) * m[i]
                });
                let r = d.iter().map(|v| v.norm()).fold(0.0, f64::max);
                (State::Diag(d), r)
            }
            _ => {
                let m = st.to_matrix();
                let n = m.nrows();
                let mut g = self.model.s.act(&m) - &self.model.a;
                for i in 0..n {
                    g[(i, i)] += z;
                }
                let d = linalg::identity(n) + g * &m;
                let r = linalg::op_norm(&d);
                (State::Full(d), r)
            }
        }
    }

    fn fixed_point_map(&self, st: &State, z: C64) -> Option<State> {
        match (st, &self.diag) {
            (State::Diag(m), Some((a, k))) => {
                let km = k * m;
                Some(State::Diag(CVec::from_fn(m.len(), |i, _| {
                    C64::new(1.0, 0.0) / (C64::new(a[i], 0.0) - z - km[i])
                })))
            }
            _ => {
                let m = st.to_matrix();
                let n = m.nrows();
                let mut g = &self.model.a - self.model.s.act(&m);
                for i in 0..n {
                    g[(i, i)] -= z;
                }
                g.try_inverse().map(State::Full)
            }
        }
    }

    /// Solves `B[Δ] = M·D` with `B[X] = X − M S[X] M`.
    fn newton_step(&self, st: &State, d: &State) -> Option<State> {
        match (st, d, &self.diag) {
            (State::Diag(m), State::Diag(dv), Some((_, k))) => {
                let kc = k;
                let m2 = m.component_mul(m);
                let rhs = m.component_mul(dv);
                let apply = |x: &CVec| x - m2.component_mul(&(kc * x));
                let (x, out) = gmres(apply, &rhs, 1e-14, 60, 20 * m.len().max(10));
                if out.converged || out.relative_residual < 1e-10 {
                    return Some(State::Diag(x));
                }
                let n = m.len();
                let b = CMat::identity(n, n) - CMat::from_diagonal(&m2) * kc;
                b.lu().solve(&rhs).map(State::Diag)
            }
            _ => {
                let m = st.to_matrix();
                let dm = d.to_matrix();
                let n = m.nrows();
                let rhs_m = &m * dm;
                let rhs = CVec::from_column_slice(rhs_m.as_slice());
                let s = &self.model.s;
                let apply = |x: &CVec| {
                    let xm = CMat::from_column_slice(n, n, x.as_slice());
                    let y = &xm - &m * s.act(&xm) * &m;
                    CVec::from_column_slice(y.as_slice())
                };
                let (x, out) = gmres(apply, &rhs, 1e-14, 80, 40 * n * n.max(4));
                (out.converged || out.relative_residual < 1e-10)
                    .then(|| State::Full(CMat::from_column_slice(n, n, x.as_slice())))
            }
        }
    }

    fn im_positive(&self, st: &State) -> bool {
        match st {
            State::Diag(m) => m.iter().all(|v| v.im > 0.0),
            State::Full(m) => linalg::herm_eigenvalues(&linalg::im_part(m))[0] > 0.0,
        }
    }

    fn project(&self, st: State) -> State {
        match st {
            State::Diag(m) => State::Diag(m.map(|v| C64::new(v.re, v.im.max(1e-14)))),
            State::Full(m) => {
                let im = linalg::im_part(&m);
                let (vals, vecs) = linalg::herm_eigen(&im);
                if vals[0] >= 0.0 {
                    return State::Full(m);
                }
                let clipped = linalg::herm_apply(&vals, &vecs, |v| v.max(1e-14));
                State::Full(linalg::re_part(&m) + clipped * linalg::I)
            }
        }
    }

    fn combine(&self, a: &State, b: &State, wa: f64, wb: f64) -> State {
        match (a, b) {
            (State::Diag(x), State::Diag(y)) => State::Diag(x * C64::new(wa, 0.0) + y * C64::new(wb, 0.0)),
            _ => State::Full(a.to_matrix() * C64::new(wa, 0.0) + b.to_matrix() * C64::new(wb, 0.0)),
        }
    }

    /// Damped fixed point until inside the Newton basin, then Newton.
    fn iterate(&self, init: State, z: C64, tol: f64, opts: &SolverOptions, stats: &mut Stats) -> (State, f64) {
        let mut st = init;
        let (mut d, mut r) = self.defect(&st, z);
        let mut alpha = 1.0f64;
        let mut newton_ok = true;
        while r > tol && stats.iterations < opts.max_iter {
            stats.iterations += 1;
            if r <= opts.newton_basin && newton_ok && self.im_positive(&st) {
                if let Some(delta) = self.newton_step(&st, &d) {
                    let mut step = 1.0;
                    let mut accepted = false;
                    for _ in 0..4 {
                        let cand = self.combine(&st, &delta, 1.0, step);
                        if self.im_positive(&cand) {
                            let (dc, rc) = self.defect(&cand, z);
                            if rc < r {
                                st = cand;
                                d = dc;
                                r = rc;
                                accepted = true;
                                break;
                            }
                        }
                        step *= 0.5;
                    }
                    if accepted {
                        stats.newton_steps += 1;
                        continue;
                    }
                }
                stats.fallbacks += 1;
                newton_ok = false;
            }
            let Some(update) = self.fixed_point_map(&st, z) else {
                break;
            };
            let mut moved = false;
            for _ in 0..12 {
                let cand = self.project(self.combine(&st, &update, 1.0 - alpha, alpha));
                let (dc, rc) = self.defect(&cand, z);
                if rc <= r || alpha < 1e-3 {
                    if rc < 0.5 * opts.newton_basin {
                        newton_ok = true;
                    }
                    st = cand;
                    d = dc;
                    r = rc;
                    alpha = (alpha * 1.5).min(1.0);
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        (st, r)
    }
}

#[derive(Default)]
struct Stats {
    iterations: usize,
    newton_steps: usize,
    fallbacks: usize,
}

fn is_diagonal(m: &CMat) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == C64::new(0.0, 0.0)))
}

fn check_point(z: SpectralPoint, opts: &SolverOptions) -> Result<()> {
    if !(z.eta > 0.0) || !z.tau.is_finite() {
        return Err(MdeError::InvalidArgument(format!("eta must be positive, got {}", z.eta)));
    }
    if z.eta < opts.eta_floor {
        return Err(MdeError::EtaBelowFloor {
            eta: z.eta,
            floor: opts.eta_floor,
        });
    }
    Ok(())
}

fn finish(engine: &Engine, st: State, z: SpectralPoint, r: f64, tol: f64, stats: Stats) -> MdeSolution {
    let converged = r <= tol && engine.im_positive(&st);
    MdeSolution {
        m: engine.matrix(&st),
        z,
        residual: r,
        iterations: stats.iterations,
        newton_steps: stats.newton_steps,
        fallbacks: stats.fallbacks,
        converged,
    }
}

/// Cold solve with η-continuation; the returned solution may be unconverged.
fn solve_point(model: &ModelSpec, z: SpectralPoint, opts: &SolverOptions) -> MdeSolution {
    let engine = Engine::new(model);
    let mut stats = Stats::default();
    let start = opts.continuation_start.max(z.eta);
    let levels = if z.eta >= start {
        0
    } else {
        ((start / z.eta).ln() / opts.continuation_ratio.ln()).ceil() as usize
    };
    let z0 = C64::new(z.tau, start);
    let mut st = engine.initial(z0);
    let mut r = f64::INFINITY;
    for k in 0..=levels {
        let eta_k = if levels == 0 {
            z.eta
        } else {
            start * (z.eta / start).powf(k as f64 / levels as f64)
        };
        let tol_k = if k == levels { opts.tol } else { opts.level_tol.max(opts.tol) };
        let (s, rk) = engine.iterate(st, C64::new(z.tau, eta_k), tol_k, opts, &mut stats);
        st = s;
        r = rk;
    }
    finish(&engine, st, z, r, opts.tol, stats)
}

fn into_result(sol: MdeSolution) -> Result<MdeSolution> {
    if sol.converged {
        Ok(sol)
    } else {
        Err(MdeError::NotConverged {
            tau: sol.z.tau,
            eta: sol.z.eta,
            iterations: sol.iterations,
            residual: sol.residual,
        })
    }
}

/// Solves the MDE at `z` from the large-η regime by geometric continuation in η.
pub fn solve_at(model: &ModelSpec, z: SpectralPoint, opts: &SolverOptions) -> Result<MdeSolution> {
    check_point(z, opts)?;
    into_result(solve_point(model, z, opts))
}

/// Iterates from a given initial matrix without continuation.
pub fn solve_from(model: &ModelSpec, z: SpectralPoint, init: &CMat, opts: &SolverOptions) -> Result<MdeSolution> {
    check_point(z, opts)?;
    if init.nrows() != model.n() || init.ncols() != model.n() {
        return Err(MdeError::Dimension {
            expected: model.n(),
            got: init.nrows(),
        });
    }
    let engine = Engine::new(model);
    let mut stats = Stats::default();
    let (st, r) = engine.iterate(engine.state_from(init), z.z(), opts.tol, opts, &mut stats);
    into_result(finish(&engine, st, z, r, opts.tol, stats))
}

/// Warm start from a nearby solution, falling back to a cold solve.
pub fn solve_near(model: &ModelSpec, z: SpectralPoint, hint: &CMat, opts: &SolverOptions) -> Result<MdeSolution> {
    check_point(z, opts)?;
    into_result(warm_or_cold(model, z, hint, opts))
}

fn warm_or_cold(model: &ModelSpec, z: SpectralPoint, hint: &CMat, opts: &SolverOptions) -> MdeSolution {
    let engine = Engine::new(model);
    let st = engine.state_from(hint);
    if engine.im_positive(&st) {
        let (_, r0) = engine.defect(&st, z.z());
        if r0 <= opts.newton_basin {
            let mut stats = Stats::default();
            let capped = SolverOptions {
                max_iter: 40,
                ..opts.clone()
            };
            let (s, r) = engine.iterate(st, z.z(), opts.tol, &capped, &mut stats);
            let sol = finish(&engine, s, z, r, opts.tol, stats);
            if sol.converged {
                return sol;
            }
        }
    }
    solve_point(model, z, opts)
}

/// Stability operator `B[X] = X − M S[X] M`.
pub fn stability_apply(model: &ModelSpec, m: &CMat, x: &CMat) -> CMat {
    x - m * model.s.act(x) * m
}

/// Solves `B[X] = R` for the stability operator at `M`.
pub fn stability_solve(model: &ModelSpec, m: &CMat, rhs: &CMat) -> Result<CMat> {
    let n = model.n();
    if model.diagonal_expectation().is_some() && is_diagonal(m) && is_diagonal(rhs) {
        let engine = Engine::new(model);
        let (_, kc) = engine.diag.as_ref().expect("diagonal model");
        let md = m.diagonal();
        let r = rhs.diagonal();
        let lumped = (0..n).all(|i| {
            let c = engine.reps[engine.classes[i]];
            md[i] == md[c] && r[i] == r[c]
        });
        if lumped {
            let nc = engine.reps.len();
            let m2 = CVec::from_fn(nc, |c, _| md[engine.reps[c]] * md[engine.reps[c]]);
            let rr = CVec::from_fn(nc, |c, _| r[engine.reps[c]]);
            let b = CMat::identity(nc, nc) - CMat::from_diagonal(&m2) * kc;
            let x = b
                .lu()
                .solve(&rr)
                .ok_or_else(|| MdeError::Numerical("stability operator is singular".into()))?;
            return Ok(CMat::from_diagonal(&CVec::from_fn(n, |i, _| x[engine.classes[i]])));
        }
        let kc = linalg::to_complex(&model.s.diagonal_action().expect("diagonal model"));
        let m2 = md.component_mul(&md);
        let (x, out) = gmres(|x: &CVec| x - m2.component_mul(&(&kc * x)), &r, 1e-14, 60, 40 * n.max(10));
        if out.converged || out.relative_residual < 1e-11 {
            return Ok(CMat::from_diagonal(&x));
        }
        let b = CMat::identity(n, n) - CMat::from_diagonal(&m2) * kc;
        return b
            .lu()
            .solve(&r)
            .map(|x| CMat::from_diagonal(&x))
            .ok_or_else(|| MdeError::Numerical("stability operator is singular".into()));
    }
    let b = CVec::from_column_slice(rhs.as_slice());
    let apply = |x: &CVec| {
        let xm = CMat::from_column_slice(n, n, x.as_slice());
        CVec::from_column_slice(stability_apply(model, m, &xm).as_slice())
    };
    let (x, out) = gmres(apply, &b, 1e-14, 100, 60 * n * n.max(4));
    if !(out.converged || out.relative_residual < 1e-11) {
        return Err(MdeError::Numerical(format!(
            "stability solve stalled at relative residual {:e}",
            out.relative_residual
        )));
    }
    Ok(CMat::from_column_slice(n, n, x.as_slice()))
}

/// `∂_z M = B⁻¹[M²]`.
pub fn dm_dz(model: &ModelSpec, m: &CMat) -> Result<CMat> {
    stability_solve(model, m, &(m * m))
}

/// `‖I + (z − A + S[M])M‖`.
pub fn residual(model: &ModelSpec, z: C64, m: &CMat) -> f64 {
    let n = model.n();
    let mut g = model.s.act(m) - &model.a;
    for i in 0..n {
        g[(i, i)] += z;
    }
    linalg::op_norm(&(linalg::identity(n) + g * m))
}

/// Newton iteration from `m0`, which must lie in the basin and have `Im M0 ≻ 0`.
pub fn newton_refine(model: &ModelSpec, z: SpectralPoint, m0: &CMat, opts: &SolverOptions) -> Result<MdeSolution> {
    check_point(z, opts)?;
    let r0 = residual(model, z.z(), m0);
    if r0 > opts.newton_basin {
        return Err(MdeError::OutsideBasin {
            residual: r0,
            basin: opts.newton_basin,
        });
    }
    let min_im = linalg::herm_eigenvalues(&linalg::im_part(m0))[0];
    if min_im <= 0.0 {
        return Err(MdeError::SingularImaginaryPart(min_im));
    }
    solve_from(model, z, m0, opts)
}

/// Solves along a sorted τ-grid at fixed η, warm-starting within chunks.
pub fn solve_grid(model: &ModelSpec, taus: &[f64], eta: f64, opts: &SolverOptions) -> Result<Vec<MdeSolution>> {
    solve_grid_map(model, taus, eta, opts, |s| s.clone())
}

/// As [`solve_grid`], keeping only `f` of each solution.
pub fn solve_grid_map<T: Send>(
    model: &ModelSpec,
    taus: &[f64],
    eta: f64,
    opts: &SolverOptions,
    f: impl Fn(&MdeSolution) -> T + Sync,
) -> Result<Vec<T>> {
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(MdeError::InvalidArgument("grid must be sorted".into()));
    }
    if let Some(&t) = taus.first() {
        check_point(SpectralPoint::new(t, eta), opts)?;
    }
    let chunk = opts.chunk.max(1);
    let out: Vec<Vec<T>> = taus
        .par_chunks(chunk)
        .map(|ts| {
            let mut vals = Vec::with_capacity(ts.len());
            let mut prev: Option<MdeSolution> = None;
            for &t in ts {
                let z = SpectralPoint::new(t, eta);
                let sol = match &prev {
                    Some(p) if p.converged => warm_or_cold(model, z, &p.m, opts),
                    _ => solve_point(model, z, opts),
                };
                vals.push(f(&sol));
                prev = Some(sol);
            }
            vals
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}
