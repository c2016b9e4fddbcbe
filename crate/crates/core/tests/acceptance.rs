//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs at desk scale; expect the better part of an hour on one core.

use std::process::ExitCode;
use std::time::Instant;

use bspcopula::basis::BasisSystem;
use bspcopula::copula::{diagonal_model, independence_model, CopulaModel};
use bspcopula::em::{fit, FitConfig, FitReport, ScadParams};
use bspcopula::error::Result;
use bspcopula::fixtures::Fixture;
use bspcopula::margins::PseudoSample;
use bspcopula::quadrature::GaussLegendre;
use bspcopula::sample::{
    empirical_copula_distance, generate_study_data, grid_max_density, ks_uniform, rejection_sample, SamplerConfig,
};
use bspcopula::select::pseudo_aic;
use bspcopula::study::{
    cv_study, joint_density_study, linspace, mse_grid, penalization_pattern, size_pattern, size_study,
    small_sample_study, tuning_pattern,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn basis_exactness() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for d in 1..=4 {
        for m in d + 1..=d + 8 {
            let b = BasisSystem::uniform(d, m)?;
            for (a, q) in b.weights().iter().zip(b.quadrature_integrals()) {
                worst = worst.max((a - q).abs());
            }
        }
    }
    let cubic = BasisSystem::uniform(3, 5)?;
    let expected = [0.125, 0.25, 0.25, 0.25, 0.125];
    let exact = cubic.weights() == expected;
    let r1_columns = Fixture::R1.model()?.params().marginal_sums(1) == expected;
    outcome(
        worst <= 1e-12 && exact && r1_columns,
        format!("max |closed form - quadrature| = {worst:.2e}; (3,5) exact: {exact}; equals R1 column sums: {r1_columns}"),
    )
}

fn copula_mass(model: &CopulaModel) -> f64 {
    let rule = GaussLegendre::new(8);
    let intervals = |b: &BasisSystem| {
        let mut k: Vec<f64> = b.knots().to_vec();
        k.dedup();
        k.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
    };
    let (xs, ys) = (intervals(&model.bases()[0]), intervals(&model.bases()[1]));
    let mut total = 0.0;
    for &(a, b) in &xs {
        for &(c, d) in &ys {
            for (x, wx) in rule.mapped(a, b) {
                for (y, wy) in rule.mapped(c, d) {
                    total += wx * wy * model.density(&[x, y]).expect("point in the unit square");
                }
            }
        }
    }
    total
}

fn copula_correctness() -> Result<Outcome> {
    let grid = linspace(0.0, 1.0, 201);
    let line = linspace(0.0, 1.0, 101);
    let mut pass = true;
    let mut parts = Vec::new();
    for f in Fixture::ALL {
        let model = f.model()?;
        let min = model
            .density_grid(&[grid.clone(), grid.clone()])?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let mass = copula_mass(&model);
        let mut margin: f64 = 0.0;
        for &x in &line {
            margin = margin.max((model.cdf(&[x, 1.0])? - x).abs());
            margin = margin.max((model.cdf(&[1.0, x])? - x).abs());
        }
        pass &= min >= 0.0 && (mass - 1.0).abs() <= 1e-8 && margin <= 1e-10;
        parts.push(format!(
            "{}: min density {min:.3e}, |mass - 1| {:.1e}, margin error {margin:.1e}",
            f.name(),
            (mass - 1.0).abs()
        ));
    }
    outcome(pass, parts.join("; "))
}

const ALPHAS: [f64; 3] = [0.0, 0.1, 0.25];

fn seeded_fits(f: Fixture, alpha: f64) -> Result<Vec<Result<FitReport>>> {
    let model = f.model()?;
    let bases = f.bases()?;
    let data = generate_study_data(&model, 1000, 20, &SamplerConfig::with_seed(1))?;
    let p = ScadParams::new(alpha, 3.0)?;
    Ok(data
        .iter()
        .map(|run| fit(&run.points, &bases, p, &FitConfig::default()))
        .collect())
}

fn em_invariants() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for f in Fixture::ALL {
        for alpha in ALPHAS {
            let fits = seeded_fits(f, alpha)?;
            let errors = fits.iter().filter(|r| r.is_err()).count();
            let ok: Vec<&FitReport> = fits.iter().filter_map(|r| r.as_ref().ok()).collect();
            let drop = ok
                .iter()
                .flat_map(|r| r.lp_trajectory.windows(2).map(|w| w[0] - w[1]))
                .fold(0.0, f64::max);
            let residual = ok.iter().map(|r| r.max_step_residual).fold(0.0, f64::max);
            let converged: Vec<&&FitReport> = ok.iter().filter(|r| r.converged).collect();
            let kkt_over = converged.iter().filter(|r| r.kkt_residual > 1e-6).count();
            let kkt_max = converged.iter().map(|r| r.kkt_residual).fold(0.0, f64::max);
            pass &= errors == 0 && drop <= 1e-10 && residual <= 1e-8 && kkt_over == 0;
            parts.push(format!(
                "{} a={alpha}: errors {errors}, max Lp drop {drop:.1e}, max residual {residual:.1e}, converged {}/20, KKT > 1e-6 in {kkt_over} (max {kkt_max:.1e})",
                f.name(),
                converged.len()
            ));
        }
    }
    outcome(pass, parts.join("; "))
}

fn penalization_benefit() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for f in Fixture::ALL {
        let grid = mse_grid(f, 1000, 20, &ALPHAS, &[3.0], 2, &FitConfig::default())?;
        let holds = penalization_pattern(&grid, 0.0, 0.1, 0.25, 3.0) == Some(true);
        pass &= holds;
        let values: Vec<String> = grid
            .cells
            .iter()
            .map(|c| format!("a={} {:.3e} ({} failed)", c.alpha, c.mse, c.failed))
            .collect();
        parts.push(format!("{}: {} -> {}", f.name(), values.join(", "), if holds { "ordered" } else { "not ordered" }));
    }
    outcome(pass, parts.join("; "))
}

fn tuning_cv() -> Result<Outcome> {
    let alphas = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25];
    let betas = [2.0, 3.0, 3.7, 4.0];
    let mut pass = true;
    let mut parts = Vec::new();
    for f in Fixture::ALL {
        let s = cv_study(f, 1000, 20, &alphas, &betas, 5, 3, &FitConfig::default())?;
        let holds = tuning_pattern(&s) == Some(true);
        pass &= holds;
        let best = s.best.map(|i| &s.cells[i]);
        parts.push(format!(
            "{}: best mean CV {:.6} at a={}, b={}",
            f.name(),
            best.map_or(f64::NAN, |c| c.mean),
            best.map_or(f64::NAN, |c| c.alpha),
            best.map_or(f64::NAN, |c| c.beta)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn label(size: &[usize]) -> String {
    format!("{}x{}", size[0], size[1])
}

fn size_selection() -> Result<Outcome> {
    let sizes: Vec<Vec<usize>> = (4..=6).flat_map(|m| (4..=6).map(move |n| vec![m, n])).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for f in Fixture::ALL {
        let s = size_study(f, 1000, 20, &sizes, 5, 4, &FitConfig::default())?;
        let holds = size_pattern(&s);
        pass &= holds;
        let top = |r: Vec<Vec<usize>>| r.iter().take(2).map(|s| label(s)).collect::<Vec<_>>().join(" > ");
        parts.push(format!("{}: CV {}, AIC {}", f.name(), top(s.cv_ranking()), top(s.aic_ranking())));
    }
    outcome(pass, parts.join("; "))
}

fn sampler_validity() -> Result<Outcome> {
    let cubic5 = BasisSystem::uniform(3, 5)?;
    let mut models: Vec<(String, CopulaModel)> = Fixture::ALL
        .iter()
        .map(|f| Ok((f.name().to_string(), f.model()?)))
        .collect::<Result<_>>()?;
    models.push(("diagonal".into(), diagonal_model(&cubic5)));
    models.push(("independence".into(), independence_model(&cubic5, &cubic5)));
    let n = 10_000;
    let ks_bound = 1.63 / (n as f64).sqrt();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, model)) in models.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: 100 + i as u64,
            safety_factor: 1.0,
            ..SamplerConfig::default()
        };
        let c_max = grid_max_density(model, cfg.grid_resolution)?;
        let run = rejection_sample(model, n, &cfg)?;
        let ks = (0..2).map(|j| ks_uniform(&run.points.axis(j))).fold(0.0, f64::max);
        let distance = empirical_copula_distance(model, &run.points, 101)?;
        let p = 1.0 / c_max;
        let se = (p * (1.0 - p) / run.proposals as f64).sqrt();
        let gap = (run.acceptance_rate() - p).abs();
        // With c_max = 1 every proposal is accepted and the spread is zero.
        let z = if se > 0.0 { gap / se } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
        let ok = ks < ks_bound && distance < 0.02 && z <= 3.0 && run.restarts == 0;
        pass &= ok;
        parts.push(format!(
            "{name}: KS {ks:.4} (< {ks_bound:.4}), copula distance {distance:.4}, acceptance {:.4} vs {p:.4} ({z:.2} SE), restarts {}",
            run.acceptance_rate(),
            run.restarts
        ));
    }
    outcome(pass, parts.join("; "))
}

fn aic_exactness() -> Result<Outcome> {
    let pairs = [(2, 2), (3, 4), (4, 5), (5, 5), (6, 4)];
    let data = generate_study_data(&Fixture::R1.model()?, 1000, 1, &SamplerConfig::with_seed(6))?;
    let sample: &PseudoSample = &data[0].points;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (m, n) in pairs {
        let bx = BasisSystem::uniform(3.min(m - 1), m)?;
        let by = BasisSystem::uniform(3.min(n - 1), n)?;
        let aic = pseudo_aic(&independence_model(&bx, &by), sample)?;
        let expected = 2.0 * ((m - 1) * (n - 1)) as f64;
        worst = worst.max((aic - expected).abs());
        parts.push(format!("{m}x{n}: {aic} vs {expected}"));
    }
    // The density is a partition of unity summed in floating point, so
    // log c is zero only to rounding.
    outcome(worst <= 1e-9, format!("{}; max deviation {worst:.1e}", parts.join(", ")))
}

fn joint_density() -> Result<Outcome> {
    let s = joint_density_study(2000, ScadParams::new(0.01, 2.25)?, 5, &FitConfig::default())?;
    let pass = s
        .fits
        .iter()
        .all(|f| (1e-5..=5e-4).contains(&f.mse) && f.constraint_residual <= 1e-6);
    let parts: Vec<String> = s
        .fits
        .iter()
        .map(|f| {
            format!(
                "{} {}: MSE {:.4e}, constraint residual {:.1e}, {} after {} iterations",
                f.name,
                label(&f.size) + &format!("x{}", f.size[2]),
                f.mse,
                f.constraint_residual,
                if f.converged { "converged" } else { "stopped" },
                f.iterations
            )
        })
        .collect();
    outcome(pass, parts.join("; "))
}

fn small_samples() -> Result<Outcome> {
    let alphas = linspace(0.0, 0.25, 6);
    let betas = linspace(2.0, 4.5, 6);
    let mut pass = true;
    let mut parts = Vec::new();
    for f in Fixture::ALL {
        let s = small_sample_study(f, &[100, 300], 10, &alphas, &betas, 9, &FitConfig::default())?;
        pass &= s.decreasing();
        parts.push(format!(
            "{}: mean MSE {:.4e} (N=100) -> {:.4e} (N=300)",
            f.name(),
            s.grids[0].mean(),
            s.grids[1].mean()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn main() -> ExitCode {
    type Check = fn() -> Result<Outcome>;
    let criteria: [(&str, Check); 10] = [
        ("basis exactness", basis_exactness),
        ("copula correctness", copula_correctness),
        ("EM structural invariants", em_invariants),
        ("penalization benefit", penalization_benefit),
        ("tuning CV pattern", tuning_cv),
        ("size selection", size_selection),
        ("sampler validity", sampler_validity),
        ("pseudo-AIC of independence", aic_exactness),
        ("trivariate joint density", joint_density),
        ("small-sample trend", small_samples),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name} [{:.0}s]: {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
