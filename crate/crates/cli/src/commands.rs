//! Command implementations. Each returns the JSON summary printed on stdout.

use crate::config::{emit_config, ManifestInfo, RunConfig};
use crate::error::CliError;
use mde_core::density::{self, Band, DensityCurve};
use mde_core::stability;
use mde_core::{ensemble, lab, mde, ModelSpec, SpectralPoint, SymmetryClass, TrialBatch};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const COMMANDS: [&str; 11] = [
    "solve",
    "density",
    "edges",
    "stability",
    "bandmass",
    "sample",
    "flow",
    "locallaw",
    "rigidity",
    "universality",
    "validate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Density,
    Edges,
    Stability,
    BandMass,
    Sample,
    Flow,
    LocalLaw,
    Rigidity,
    Universality,
    Validate,
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "solve" => Command::Solve,
            "density" => Command::Density,
            "edges" => Command::Edges,
            "stability" => Command::Stability,
            "bandmass" => Command::BandMass,
            "sample" => Command::Sample,
            "flow" => Command::Flow,
            "locallaw" => Command::LocalLaw,
            "rigidity" => Command::Rigidity,
            "universality" => Command::Universality,
            "validate" => Command::Validate,
            other => return Err(CliError::Validation(format!("unknown command {other:?}"))),
        })
    }
}

impl Command {
    pub fn name(self) -> &'static str {
        COMMANDS[self as usize]
    }
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(path: Option<&Path>, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let sink: Box<dyn std::io::Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json_file(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads a `tau,rho` CSV produced by the density command.
pub fn read_density_csv(path: &Path, model: &ModelSpec, eta: f64) -> Result<DensityCurve, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut taus = Vec::new();
    let mut rho = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Validation(format!("{}: malformed row {rec:?}", path.display())))
        };
        taus.push(num(0)?);
        rho.push(num(1)?);
    }
    if taus.len() < 2 {
        return Err(CliError::Validation(format!("{}: density curve needs at least 2 rows", path.display())));
    }
    Ok(DensityCurve {
        taus,
        rho,
        eta_used: eta,
        model_label: model.label.clone(),
        n: model.n(),
    })
}

pub struct Context {
    pub cfg: RunConfig,
    pub model: ModelSpec,
    /// Density curve supplied on the command line for `edges`.
    pub curve: Option<PathBuf>,
}

impl Context {
    pub fn new(cfg: RunConfig, curve: Option<PathBuf>) -> Result<Self, CliError> {
        let model = cfg.build_model()?;
        Ok(Context { cfg, model, curve })
    }

    fn out(&self) -> Option<&Path> {
        self.cfg.output.out.as_deref()
    }

    fn grid_curve(&self) -> Result<DensityCurve, CliError> {
        let d = &self.cfg.density;
        let (lo0, hi0) = self.model.spectral_bounds();
        let lo = self.cfg.grid.lo.unwrap_or(lo0 - 0.05);
        let hi = self.cfg.grid.hi.unwrap_or(hi0 + 0.05);
        Ok(density::density_curve(&self.model, lo, hi, d.grid_points, d.eta, &self.cfg.solver)?)
    }

    fn bands(&self) -> Result<Vec<Band>, CliError> {
        Ok(density::find_bands(&self.model, &self.cfg.density, &self.cfg.solver)?)
    }
}

/// Manifest path: explicit, next to the output, or in the working directory.
pub fn manifest_path(cfg: &RunConfig, command: Command) -> PathBuf {
    if let Some(p) = &cfg.output.manifest {
        return p.clone();
    }
    match &cfg.output.out {
        Some(o) => {
            let mut s = o.clone().into_os_string();
            s.push(".manifest.toml");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("mde-{}.manifest.toml", command.name())),
    }
}

pub fn write_manifest(cfg: &RunConfig, command: Command, threads: usize, input: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut m = cfg.clone();
    m.manifest = Some(ManifestInfo {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.name().to_string(),
        master_seed: cfg.ensemble.seed,
        threads,
    });
    let path = manifest_path(cfg, command);
    if let Some(inp) = input {
        if std::path::absolute(inp).ok() == std::path::absolute(&path).ok() {
            return Err(CliError::Validation(format!(
                "manifest path {} would overwrite the input config",
                path.display()
            )));
        }
    }
    std::fs::write(&path, emit_config(&m)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

pub fn dispatch(command: Command, ctx: &Context) -> Result<Value, CliError> {
    match command {
        Command::Solve => solve(ctx),
        Command::Density => density_cmd(ctx),
        Command::Edges => edges(ctx),
        Command::Stability => stability_cmd(ctx),
        Command::BandMass => bandmass(ctx),
        Command::Sample => sample(ctx),
        Command::Flow => flow(ctx),
        Command::LocalLaw => locallaw(ctx),
        Command::Rigidity => rigidity(ctx),
        Command::Universality => universality(ctx),
        Command::Validate => validate(ctx),
    }
}

fn finish_json(ctx: &Context, v: Value) -> Result<Value, CliError> {
    if let Some(p) = ctx.out() {
        write_json_file(p, &v)?;
    }
    Ok(v)
}

fn solve(ctx: &Context) -> Result<Value, CliError> {
    let r = &ctx.cfg.run;
    let sol = mde::solve_at(&ctx.model, SpectralPoint::new(r.tau, r.eta), &ctx.cfg.solver)?;
    let avg = sol.avg();
    let diag: Vec<[f64; 2]> = sol.m.diagonal().iter().map(|v| [v.re, v.im]).collect();
    finish_json(
        ctx,
        json!({
            "z": sol.z,
            "avg_m": [avg.re, avg.im],
            "rho": sol.rho(),
            "residual": sol.residual,
            "iterations": sol.iterations,
            "newton_steps": sol.newton_steps,
            "converged": sol.converged,
            "m_diagonal": diag,
        }),
    )
}

fn density_cmd(ctx: &Context) -> Result<Value, CliError> {
    let curve = ctx.grid_curve()?;
    write_csv(
        ctx.out(),
        &["tau", "rho"],
        curve.taus.iter().zip(&curve.rho).map(|(t, r)| vec![fmt_f64(*t), fmt_f64(*r)]),
    )?;
    let bands = density::support(&ctx.model, &curve, &ctx.cfg.density, &ctx.cfg.solver)?;
    Ok(json!({
        "points": curve.taus.len(),
        "eta": curve.eta_used,
        "grid_integral": density::curve_integral(&curve),
        "bands": bands,
    }))
}

fn edges(ctx: &Context) -> Result<Value, CliError> {
    let d = &ctx.cfg.density;
    let o = &ctx.cfg.solver;
    let bands = match &ctx.curve {
        Some(p) => {
            let curve = read_density_csv(p, &ctx.model, d.eta)?;
            density::support(&ctx.model, &curve, d, o)?
        }
        None => ctx.bands()?,
    };
    if bands.is_empty() {
        return Err(mde_core::MdeError::EmptySupport.into());
    }
    let mut rows = Vec::new();
    for loc in density::detect_edges(&bands) {
        let entry = if loc.gap_adjacent >= d.macroscopic_gap {
            let rep = density::edge_slope(&ctx.model, &loc, d, o)?;
            let sigma = stability::edge_sigma(&ctx.model, rep.tau0, o, &ctx.cfg.stability)?;
            let gamma_sigma = std::f64::consts::PI / sigma.abs().cbrt();
            json!({
                "report": rep,
                "sigma": sigma,
                "gamma_from_sigma": gamma_sigma,
                "relative_gamma_mismatch": (rep.gamma_edge - gamma_sigma).abs() / rep.gamma_edge,
            })
        } else {
            json!({ "location": loc, "regular": false, "reason": "adjacent gap below the macroscopic threshold" })
        };
        rows.push(entry);
    }
    finish_json(ctx, json!({ "bands": bands, "edges": rows }))
}

fn stability_cmd(ctx: &Context) -> Result<Value, CliError> {
    let r = &ctx.cfg.run;
    let z = SpectralPoint::new(r.tau, r.eta);
    let rep = stability::unstable_triple(&ctx.model, z, &ctx.cfg.solver, &ctx.cfg.stability)?;
    let pair = stability::sigma_two_ways(&ctx.model, z, &ctx.cfg.solver, &ctx.cfg.stability)?;
    finish_json(
        ctx,
        json!({
            "z": z,
            "rho": rep.rho,
            "beta": [rep.beta.re, rep.beta.im],
            "sigma": rep.sigma,
            "sigma_def": pair.sigma_def,
            "sigma_pairing": [pair.sigma_pairing.re, pair.sigma_pairing.im],
            "small_regime": pair.in_regime,
            "pairing": [rep.pairing.re, rep.pairing.im],
            "b_inv_norm": rep.b_inv_norm,
            "b_inv_q_norm": rep.b_inv_q_norm,
            "f_norm": rep.f_norm,
            "spectral_gap": rep.spectral_gap,
            "identity_424": rep.identity_424,
            "identity_412": rep.identity_412,
            "eigen_separation": rep.eigen_separation,
            "eig_residual_right": rep.eig_residual_right,
            "eig_residual_left": rep.eig_residual_left,
        }),
    )
}

fn bandmass(ctx: &Context) -> Result<Value, CliError> {
    let tau = ctx.cfg.run.tau;
    let (neg, n_integral) = density::band_mass(&ctx.model, tau, &ctx.cfg.density, &ctx.cfg.solver)?;
    finish_json(
        ctx,
        json!({
            "tau": tau,
            "negative_eigenvalues": neg,
            "n_times_integral": n_integral,
            "integral_matches": (n_integral - neg as f64).abs() <= 0.05,
        }),
    )
}

fn sample(ctx: &Context) -> Result<Value, CliError> {
    let e = &ctx.cfg.ensemble;
    let batch = TrialBatch::generate(&ctx.model, e.trials, e.seed)?;
    write_csv(
        ctx.out(),
        &["trial", "index", "eigenvalue"],
        batch
            .eigenvalues
            .iter()
            .enumerate()
            .flat_map(|(t, ev)| ev.iter().enumerate().map(move |(i, v)| vec![t.to_string(), i.to_string(), fmt_f64(*v)])),
    )?;
    Ok(json!({ "trials": batch.num_trials, "n": batch.n, "master_seed": batch.master_seed }))
}

fn flow(ctx: &Context) -> Result<Value, CliError> {
    let r = &ctx.cfg.run;
    let e = &ctx.cfg.ensemble;
    let o = &ctx.cfg.solver;
    let deviation = ensemble::flow_deviation(&ctx.model, r.tau, r.t, o)?;
    let rep = lab::gap_crossing_experiment(&ctx.model, r.tau, r.steps, e.trials, e.seed, r.delta, o)?;
    finish_json(
        ctx,
        json!({
            "tau": r.tau,
            "t": r.t,
            "m_deviation": deviation,
            "m_preserved": deviation <= 1e-8,
            "crossings": rep.crossings,
            "trials": rep.num_trials,
            "t_grid": rep.t_grid,
            "delta": rep.delta,
            "endpoint_count": rep.endpoint_count,
            "negative_count": rep.negative_count,
            "pass": rep.crossings == 0 && rep.endpoint_count == rep.negative_count,
        }),
    )
}

fn locallaw(ctx: &Context) -> Result<Value, CliError> {
    let r = &ctx.cfg.run;
    let e = &ctx.cfg.ensemble;
    let rep = lab::local_law_errors(
        &ctx.model,
        SpectralPoint::new(r.tau, r.eta),
        e.trials,
        r.vectors,
        e.seed,
        &ctx.cfg.solver,
    )?;
    finish_json(
        ctx,
        json!({
            "report": rep,
            "avg_constant": 10.0,
            "pass_avg": rep.median_avg <= 10.0 * rep.bound_avg,
            "pass_resolvent": rep.max_resolvent_residual <= 1e-10,
        }),
    )
}

fn rigidity(ctx: &Context) -> Result<Value, CliError> {
    let r = &ctx.cfg.run;
    let e = &ctx.cfg.ensemble;
    let n = ctx.model.n() as f64;
    let bands = ctx.bands()?;
    let batch = TrialBatch::generate(&ctx.model, e.trials, e.seed)?;
    let mut counts = Vec::new();
    let mut below = 0.0;
    for w in bands.windows(2) {
        below += w[0].mass;
        let tau = 0.5 * (w[0].right + w[1].left);
        let fraction = lab::band_counts(&batch, tau, n * below)?;
        counts.push(json!({ "tau": tau, "expected": (n * below).round(), "fraction": fraction }));
    }
    let outliers = lab::outlier_scan(&batch, &bands, r.margin);
    let curve = ctx.grid_curve()?;
    let taus: Vec<f64> = if r.taus.is_empty() {
        bands.iter().map(|b| 0.5 * (b.left + b.right)).collect()
    } else {
        r.taus.clone()
    };
    let prof = lab::rigidity_profile(&batch, &curve, &bands, &taus, r.rigidity_constant)?;
    finish_json(
        ctx,
        json!({
            "bands": bands,
            "band_counts": counts,
            "outliers": outliers,
            "margin": r.margin,
            "rigidity": prof.points.iter().map(|p| json!({
                "tau": p.tau, "index": p.index, "median": p.median, "max": p.max,
                "bound": p.bound, "fraction_within": p.fraction_within,
            })).collect::<Vec<_>>(),
            "rigidity_constant": prof.constant,
            "surrogate_log2n": prof.surrogate,
            "fraction_within": prof.fraction_within,
        }),
    )
}

/// Edge statistics of the model and of a GOE/GUE reference at equal N through the same pipeline.
pub fn universality_samples(
    model: &ModelSpec,
    cfg: &RunConfig,
) -> Result<(lab::EdgeStatSample, lab::EdgeStatSample), CliError> {
    let d = &cfg.density;
    let o = &cfg.solver;
    let r = &cfg.run;
    let e = &cfg.ensemble;
    let bands = density::find_bands(model, d, o)?;
    let edges = density::regular_edges(model, &bands, d, o)?;
    let edge = edges.get(r.edge_index).ok_or_else(|| {
        CliError::Validation(format!(
            "edge index {} out of range: the model has {} regular edges",
            r.edge_index,
            edges.len()
        ))
    })?;
    let sample = lab::edge_statistics(model, edge, r.k, e.trials, e.seed, d, o)?;
    let reference = ModelSpec::flat(model.n(), model.class, 1.0);
    let rb = density::find_bands(&reference, d, o)?;
    let redges = density::regular_edges(&reference, &rb, d, o)?;
    let redge = redges
        .iter()
        .find(|x| x.side == density::Side::Right)
        .ok_or_else(|| CliError::Numerical("reference ensemble has no regular right edge".into()))?;
    // Distinct stream family for the reference trials.
    let rseed = e.seed ^ 0x9e37_79b9_7f4a_7c15;
    let rsample = lab::edge_statistics(&reference, redge, r.k, e.trials, rseed, d, o)?;
    Ok((sample, rsample))
}

fn universality(ctx: &Context) -> Result<Value, CliError> {
    let (s, g) = universality_samples(&ctx.model, &ctx.cfg)?;
    let k = ctx.cfg.run.k;
    let rows = [("model", &s), ("reference", &g)].into_iter().flat_map(|(src, smp)| {
        smp.values.iter().enumerate().flat_map(move |(t, row)| {
            row.iter().enumerate().map(move |(j, v)| vec![src.to_string(), t.to_string(), j.to_string(), fmt_f64(*v)])
        })
    });
    write_csv(ctx.out(), &["source", "trial", "j", "value"], rows)?;
    let thr = ctx.cfg.run.ks_threshold;
    let mut stats = Vec::new();
    for j in 0..=k {
        let ks = lab::ks_distance(&s.statistic(j), &g.statistic(j))?;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        stats.push(json!({
            "j": j,
            "ks": ks,
            "pass": ks <= thr,
            "mean_model": mean(s.statistic(j)),
            "mean_reference": mean(g.statistic(j)),
        }));
    }
    Ok(json!({
        "edge": s.edge,
        "i0": s.i0,
        "reference_edge": g.edge,
        "trials": s.num_trials,
        "excluded": s.excluded,
        "exclusion_rate": s.exclusion_rate,
        "reference_exclusion_rate": g.exclusion_rate,
        "ks_threshold": thr,
        "statistics": stats,
    }))
}

fn validate(ctx: &Context) -> Result<Value, CliError> {
    let m = &ctx.model;
    let (c_lo, c_hi) = m.s.check_flatness(m.class, 64, ctx.cfg.ensemble.seed)?;
    let fullness = if m.n() <= mde_core::superop::DEFAULT_CAP
        || matches!(m.s, mde_core::SelfEnergy::VarianceProfile { .. })
    {
        Some(m.s.check_fullness(m.class, mde_core::superop::DEFAULT_CAP)?)
    } else {
        None
    };
    let class = match m.class {
        SymmetryClass::RealSymmetric => "real_symmetric",
        SymmetryClass::ComplexHermitian => "complex_hermitian",
    };
    finish_json(
        ctx,
        json!({
            "valid": true,
            "label": m.label,
            "n": m.n(),
            "class": class,
            "self_energy": m.s.kind(),
            "flatness": [c_lo, c_hi],
            "fullness": fullness,
            "spectral_bounds": m.spectral_bounds(),
        }),
    )
}
