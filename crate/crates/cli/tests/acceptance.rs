//! Acceptance checks on the shipped models. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use mde_cli::commands::universality_samples;
use mde_cli::{parse_config, RunConfig};
use mde_core::density::{self, Side};
use mde_core::stability::{self, StabilityOptions};
use mde_core::{ensemble, lab, mde, CMat, DensityOptions, ModelSpec, SolverOptions, SpectralPoint, TrialBatch, C64};
use std::path::PathBuf;
use std::time::Instant;

type Outcome = Result<(bool, String), String>;

fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn config(name: &str, n: Option<usize>) -> RunConfig {
    let mut cfg = parse_config(&models_dir().join(format!("{name}.toml"))).expect("shipped config parses");
    if let Some(n) = n {
        cfg.set_dimension(n).expect("resizable model");
    }
    cfg
}

fn model(name: &str, n: Option<usize>) -> ModelSpec {
    config(name, n).build_model().expect("shipped model builds")
}

fn shipped() -> Vec<(String, ModelSpec)> {
    let mut names: Vec<String> = std::fs::read_dir(models_dir())
        .expect("models directory")
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "toml").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names.into_iter().map(|s| (s.clone(), model(&s, None))).collect()
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn m_sc(z: C64) -> C64 {
    let two = C64::new(2.0, 0.0);
    (-z + (z - two).sqrt() * (z + two).sqrt()) * 0.5
}

fn semicircle() -> Outcome {
    let flat = model("flat", None);
    let taus = density::linspace(-3.0, 3.0, 600);
    let eta = 1e-4;
    let sols = mde::solve_grid(&flat, &taus, eta, &SolverOptions::default()).map_err(err)?;
    let worst = taus
        .iter()
        .zip(&sols)
        .map(|(t, s)| (s.avg() - m_sc(C64::new(*t, eta))).norm())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-8, format!("max deviation {worst:.2e}")))
}

fn identity_points(m: &ModelSpec) -> Vec<SpectralPoint> {
    let (lo, hi) = m.spectral_bounds();
    let etas = [1.0, 1e-1, 1e-2, 1e-3, 1e-4];
    density::linspace(lo - 0.5, hi + 0.5, 50)
        .into_iter()
        .enumerate()
        .map(|(i, t)| SpectralPoint::new(t, etas[i % etas.len()]))
        .collect()
}

fn identity_models() -> Vec<ModelSpec> {
    vec![model("flat", None), model("two_band", None)]
}

fn identity_424() -> Outcome {
    let o = SolverOptions::default();
    let mut worst = 0.0f64;
    let mut count = 0;
    for m in identity_models() {
        for z in identity_points(&m) {
            worst = worst.max(stability::verify_identity_424(&m, z, &o).map_err(err)?);
            count += 1;
        }
    }
    Ok((worst <= 1e-8, format!("max |<F_U QQ*> - pi| {worst:.2e} over {count} points")))
}

fn identity_412() -> Outcome {
    let o = SolverOptions::default();
    let so = StabilityOptions::default();
    let mut worst = 0.0f64;
    let mut count = 0;
    for m in identity_models() {
        for z in identity_points(&m) {
            let sol = mde::solve_at(&m, z, &o).map_err(err)?;
            let polar = stability::polar_decompose(&sol.m).map_err(err)?;
            let sat = stability::saturated_operator(&m, &polar, sol.rho(), &so).map_err(err)?;
            worst = worst.max(stability::norm_identity_deviation(&sat, &polar, z.eta));
            count += 1;
        }
    }
    Ok((worst <= 1e-6, format!("max relative deviation {worst:.2e} over {count} points")))
}

fn edge_slope() -> Outcome {
    let d = DensityOptions::default();
    let o = SolverOptions::default();
    let so = StabilityOptions::default();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut worst_cross = 0.0f64;
    let mut edges_checked = 0;
    for (name, m) in shipped() {
        let bands = density::find_bands(&m, &d, &o).map_err(err)?;
        let edges = density::regular_edges(&m, &bands, &d, &o).map_err(err)?;
        let target = match name.as_str() {
            "flat" => Some(1.0),
            "flat_scaled" => Some(2.0 / 3.0),
            _ => None,
        };
        for e in edges.iter().filter(|e| e.regular) {
            if let Some(g) = target {
                let dev = (e.gamma_edge - g).abs();
                ok &= dev <= 0.02;
                notes.push(format!("{name} {:+.4} gamma {:.5}", e.tau0, e.gamma_edge));
            }
            let sigma = stability::edge_sigma(&m, e.tau0, &o, &so).map_err(err)?;
            let cross = (e.gamma_edge - std::f64::consts::PI / sigma.abs().cbrt()).abs() / e.gamma_edge;
            worst_cross = worst_cross.max(cross);
            edges_checked += 1;
        }
        if target.is_some() && edges.iter().filter(|e| e.regular).count() != 2 {
            ok = false;
            notes.push(format!("{name}: expected two regular edges"));
        }
    }
    ok &= worst_cross <= 0.05;
    notes.push(format!("max cross mismatch {worst_cross:.2e} over {edges_checked} edges"));
    Ok((ok, notes.join("; ")))
}

fn band_mass() -> Outcome {
    let m = model("two_band", Some(100));
    let (neg, integral) = density::band_mass(&m, 0.0, &DensityOptions::default(), &SolverOptions::default()).map_err(err)?;
    let ok = (integral - 50.0).abs() <= 0.05 && neg == 50;
    Ok((ok, format!("N*integral {integral:.6}, negative eigenvalues {neg}")))
}

fn rigidity_batch() -> Result<(ModelSpec, TrialBatch), String> {
    let m = model("two_band", Some(200));
    let batch = TrialBatch::generate(&m, 500, 20_260_601).map_err(err)?;
    Ok((m, batch))
}

fn band_rigidity(batch: &TrialBatch) -> Outcome {
    let fraction = lab::band_counts(batch, 0.0, 100.0).map_err(err)?;
    Ok((fraction >= 0.99, format!("fraction with 100 eigenvalues below 0: {fraction:.4}")))
}

fn no_outliers(m: &ModelSpec, batch: &TrialBatch) -> Outcome {
    let bands = density::find_bands(m, &DensityOptions::default(), &SolverOptions::default()).map_err(err)?;
    let count = lab::outlier_scan(batch, &bands, 0.2);
    Ok((count == 0, format!("{count} eigenvalues farther than 0.2 from the support")))
}

fn local_law() -> Outcome {
    let o = SolverOptions::default();
    let z = SpectralPoint::new(0.5, 0.5);
    let mut medians = Vec::new();
    for n in [128, 256, 512] {
        let m = model("flat", Some(n));
        let rep = lab::local_law_errors(&m, z, 200, 0, 7 + n as u64, &o).map_err(err)?;
        medians.push(rep.median_avg);
    }
    let ratios: Vec<f64> = medians.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (1.6..=2.6).contains(r));
    Ok((ok, format!("medians {:?}, ratios {ratios:.3?}", medians.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>())))
}

fn shape() -> Outcome {
    let m = model("two_band", None);
    let d = DensityOptions::default();
    let o = SolverOptions::default();
    let so = StabilityOptions::default();
    let bands = density::find_bands(&m, &d, &o).map_err(err)?;
    let edges = density::regular_edges(&m, &bands, &d, &o).map_err(err)?;
    let internal: Vec<_> = edges.iter().filter(|e| e.gap_adjacent.is_finite()).collect();
    if internal.is_empty() {
        return Ok((false, "no internal edge".into()));
    }
    let omegas = [1e-4, -1e-4, 1e-3, -1e-3, 1e-2, -1e-2];
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    let mut worst_im = 0.0f64;
    for e in internal {
        let rep = stability::shape_theta(&m, e.tau0, &omegas, &o, &so).map_err(err)?;
        for p in &rep.points {
            let gap_side = p.omega * e.side.gap_direction() > 0.0;
            if gap_side {
                worst_im = worst_im.max(p.theta.im.abs());
            } else {
                worst_ratio = worst_ratio.max(p.quadratic_residual / p.omega.abs().powf(1.5));
            }
        }
    }
    ok &= worst_ratio <= 5.0 && worst_im <= 1e-6;
    Ok((ok, format!("max residual/|w|^1.5 {worst_ratio:.3}, max gap-side |Im Theta| {worst_im:.2e}")))
}

fn universality() -> Outcome {
    let mut cfg = config("two_band_goe", Some(300));
    let m = cfg.build_model().map_err(err)?;
    let edges = density::regular_edges(
        &m,
        &density::find_bands(&m, &cfg.density, &cfg.solver).map_err(err)?,
        &cfg.density,
        &cfg.solver,
    )
    .map_err(err)?;
    let idx = edges
        .iter()
        .position(|e| e.side == Side::Right && e.gap_adjacent.is_finite())
        .ok_or("no internal right edge")?;
    cfg.run.edge_index = idx;
    cfg.run.k = 2;
    cfg.ensemble.trials = 2000;
    cfg.ensemble.seed = 424_242;
    let (s, g) = universality_samples(&m, &cfg).map_err(err)?;
    let ks0 = lab::ks_distance(&s.statistic(0), &g.statistic(0)).map_err(err)?;
    let ks1 = lab::ks_distance(&s.statistic(1), &g.statistic(1)).map_err(err)?;
    Ok((
        ks0 <= 0.08 && ks1 <= 0.08,
        format!(
            "edge {:+.5}, KS top {ks0:.4}, KS second {ks1:.4}, excluded {}",
            s.edge.tau0, s.excluded
        ),
    ))
}

fn random_tests(n: usize, count: usize, seed: u64, m: &ModelSpec) -> Vec<CMat> {
    (0..count)
        .map(|k| ensemble::sample_gaussian_reference(n, m.class, seed + k as u64).expect("reference sample"))
        .collect()
}

/// `Re Tr(B X)`.
fn pair(b: &CMat, x: &CMat) -> f64 {
    (b * x).trace().re
}

fn ou_moments() -> Outcome {
    let trials = 2000usize;
    let t = 0.3;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, n) in [("two_band", Some(16)), ("kronecker", None)] {
        let m = model(name, n);
        let dim = m.n();
        let bs = random_tests(dim, 20, 11, &m);
        let cs = random_tests(dim, 20, 97, &m);
        // Per-trial paired differences f(H_t) - f(H_0) for 20 linear and 20 quadratic functionals.
        let mut diffs: Vec<Vec<f64>> = (0..40).map(|_| Vec::with_capacity(trials)).collect();
        for trial in 0..trials {
            let mut rng = ensemble::trial_rng(5150, trial as u64);
            let h0 = ensemble::sample_with(&m, &mut rng).map_err(err)?;
            let ht = ensemble::ou_evolve(&h0, &m, t, &mut rng).map_err(err)?;
            let x0 = &h0 - &m.a;
            let xt = &ht - &m.a;
            for k in 0..20 {
                diffs[k].push(pair(&bs[k], &ht) - pair(&bs[k], &h0));
                let q = |x: &CMat| pair(&bs[k], x) * pair(&cs[k], x);
                diffs[20 + k].push(q(&xt) - q(&x0));
            }
        }
        for d in &diffs {
            let nf = d.len() as f64;
            let mean = d.iter().sum::<f64>() / nf;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            worst = worst.max(mean.abs() / se);
            checked += 1;
        }
    }
    Ok((worst <= 5.0, format!("max |mean difference|/MC sigma {worst:.3} over {checked} functionals")))
}

fn gap_crossing() -> Outcome {
    let m = model("two_band", None);
    let rep = lab::gap_crossing_experiment(&m, 0.0, 11, 200, 31_337, 0.01, &SolverOptions::default()).map_err(err)?;
    Ok((
        rep.crossings == 0,
        format!("{} crossings in {} trials x {} steps", rep.crossings, rep.num_trials, rep.t_grid.len()),
    ))
}

fn normalization() -> Outcome {
    let d = DensityOptions::default();
    let o = SolverOptions::default();
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for (name, m) in shipped() {
        let total: f64 = density::find_bands(&m, &d, &o).map_err(err)?.iter().map(|b| b.mass).sum();
        worst = worst.max((total - 1.0).abs());
        notes.push(format!("{name} {total:.6}"));
    }
    Ok((worst <= 5e-3, notes.join(", ")))
}

fn report(failures: &mut usize, id: usize, name: &str, limit: Option<f64>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let out = f();
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match out {
        Ok((p, d)) => (p, d),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = limit.is_none_or(|l| secs <= l);
    let pass = pass && in_time;
    if !pass {
        *failures += 1;
    }
    let budget = limit.map(|l| format!(", budget {l:.0} s")).unwrap_or_default();
    println!(
        "{} [{id:2}] {name}: {detail} ({secs:.1} s{budget})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn main() {
    let mut failures = 0;
    let f = &mut failures;
    report(f, 1, "semicircle oracle", Some(5.0), semicircle);
    report(f, 2, "identity <F_U QQ*> = pi", None, identity_424);
    report(f, 3, "norm deficit identity", None, identity_412);
    report(f, 4, "edge slope", None, edge_slope);
    report(f, 5, "band mass integrality", None, band_mass);
    // Criteria 6 and 7 share one batch; generation counts toward the rigidity budget.
    let mut batch = None;
    report(f, 6, "band rigidity", Some(180.0), || {
        let (m, b) = rigidity_batch()?;
        let out = band_rigidity(&b);
        batch = Some((m, b));
        out
    });
    report(f, 7, "no outliers", None, || match &batch {
        Some((m, b)) => no_outliers(m, b),
        None => Err("batch generation failed".into()),
    });
    report(f, 8, "local law scaling", Some(300.0), local_law);
    report(f, 9, "shape quadratic", None, shape);
    report(f, 10, "edge universality", Some(1800.0), universality);
    report(f, 11, "OU moment preservation", None, ou_moments);
    report(f, 12, "gap crossing", None, gap_crossing);
    report(f, 13, "normalization", None, normalization);
    println!("acceptance: {} of 13 criteria passed", 13 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
