use std::fs;
use std::path::{Path, PathBuf};

use bspcopula::copula::{CopulaModel, ModelDocument};
use bspcopula::em::{fit_nd, FitReportDocument, ScadParams};
use bspcopula::fixtures::Fixture;
use bspcopula::margins::{joint_density, MarginalModel};
use bspcopula::sample::{rejection_sample, SamplerConfig};
use bspcopula::select::{bases_for, cross_validate, select_size, Dataset, SelectionGrid, SizeMethod};
use bspcopula::study;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{fmt_f64, read_csv, read_json, write_csv, write_json, Table};

/// Smallest data set accepted by `fit` and `select`.
pub const MIN_ROWS: usize = 10;

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    Ok(cfg.out.clone())
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn load_table(cfg: &RunConfig) -> Result<Table, CliError> {
    let path = require(&cfg.input, "input")?;
    let table = read_csv(path, cfg.cols.as_deref())?;
    if table.columns.len() < 2 {
        return Err(CliError::Usage(format!(
            "{}: need at least 2 numeric columns, got {}",
            path.display(),
            table.columns.len()
        )));
    }
    if table.rows.len() < MIN_ROWS {
        return Err(CliError::Usage(format!(
            "{}: need at least {MIN_ROWS} data rows, got {}",
            path.display(),
            table.rows.len()
        )));
    }
    Ok(table)
}

fn single(values: Option<&Vec<f64>>, default: f64, flag: &str) -> Result<f64, CliError> {
    match values.map(Vec::as_slice) {
        None => Ok(default),
        Some([v]) => Ok(*v),
        Some(_) => Err(CliError::Usage(format!("--{flag} takes a single value here"))),
    }
}

fn load_model(cfg: &RunConfig) -> Result<CopulaModel, CliError> {
    let doc: ModelDocument = read_json(require(&cfg.model, "model")?)?;
    Ok(CopulaModel::from_document(&doc)?)
}

#[derive(Serialize)]
struct FitOutput<'a> {
    config: &'a RunConfig,
    columns: &'a [String],
    report: FitReportDocument,
}

pub fn fit(cfg: &RunConfig) -> Result<(), CliError> {
    let table = load_table(cfg)?;
    let dim = table.columns.len();
    let size = cfg.single_size()?;
    if size.len() != dim {
        return Err(CliError::Usage(format!("--size has {} entries for {dim} columns", size.len())));
    }
    let p = ScadParams::new(
        single(cfg.alpha.as_ref(), 0.0, "alpha")?,
        single(cfg.beta.as_ref(), 3.0, "beta")?,
    )?;
    let bases = bases_for(&cfg.degrees(dim)?, size)?;
    let sample = Dataset::new(&table.rows, cfg.pseudo)?.pseudo();
    let out = prepare_out(cfg)?;
    let report = fit_nd(&sample, &bases, p, &cfg.fit)?;
    write_json(
        &out.join("fit_report.json"),
        &FitOutput {
            config: cfg,
            columns: &table.columns,
            report: report.to_document(None),
        },
    )?;
    write_json(&out.join("model.json"), &report.model(&bases)?.to_document())?;
    if report.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged {
            iterations: report.iterations,
        })
    }
}

fn size_label(size: &[usize]) -> String {
    size.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

#[derive(Serialize)]
struct SelectOutput<'a> {
    config: &'a RunConfig,
    columns: &'a [String],
    cv: Vec<bspcopula::select::CvCell>,
    aic: Vec<AicRow>,
    best_cv: Option<usize>,
    best_aic: Option<usize>,
}

#[derive(Serialize)]
struct AicRow {
    alpha: f64,
    beta: f64,
    #[serde(flatten)]
    cell: bspcopula::select::AicCell,
}

pub fn select(cfg: &RunConfig) -> Result<(), CliError> {
    let table = load_table(cfg)?;
    let dim = table.columns.len();
    if cfg.size.is_empty() {
        return Err(CliError::Usage("--size is required".into()));
    }
    if let Some(bad) = cfg.size.iter().find(|s| s.len() != dim) {
        return Err(CliError::Usage(format!("size {} does not match {dim} columns", size_label(bad))));
    }
    let degrees = cfg.degrees(dim)?;
    let alphas = cfg.alphas_or(&[0.0]);
    let betas = cfg.betas_or(&[3.0]);
    let data = Dataset::new(&table.rows, cfg.pseudo)?;
    let out = prepare_out(cfg)?;

    let mut cv = Vec::new();
    if cfg.method != SizeMethod::Aic {
        let grid = SelectionGrid {
            alphas: alphas.clone(),
            betas: betas.clone(),
            sizes: cfg.size.clone(),
            folds: cfg.folds,
            seed: cfg.seed,
        };
        cv = cross_validate(&data, &grid, &degrees, &cfg.fit)?.cv;
    }
    let mut aic = Vec::new();
    if cfg.method != SizeMethod::Cv {
        for &alpha in &alphas {
            for &beta in &betas {
                let p = ScadParams::new(alpha, beta)?;
                let report = select_size(&data, &cfg.size, &degrees, p, cfg.folds, cfg.seed, &cfg.fit, SizeMethod::Aic)?;
                aic.extend(report.aic.into_iter().map(|cell| AicRow { alpha, beta, cell }));
            }
        }
    }

    if !cv.is_empty() {
        let max_folds = cfg.folds;
        let mut header: Vec<String> = ["size", "alpha", "beta", "cv", "converged"].map(String::from).to_vec();
        header.extend((1..=max_folds).map(|i| format!("fold{i}")));
        write_csv(
            &out.join("cv.csv"),
            &header,
            cv.iter().map(|c| {
                let mut row = vec![
                    size_label(&c.size),
                    fmt_f64(c.alpha),
                    fmt_f64(c.beta),
                    fmt_f64(c.score),
                    c.converged.to_string(),
                ];
                row.extend(c.folds.iter().map(|f| fmt_f64(f.score)));
                row
            }),
        )?;
    }
    if !aic.is_empty() {
        write_csv(
            &out.join("aic.csv"),
            &["size", "alpha", "beta", "aic", "converged", "error"],
            aic.iter().map(|r| {
                vec![
                    size_label(&r.cell.size),
                    fmt_f64(r.alpha),
                    fmt_f64(r.beta),
                    fmt_f64(r.cell.aic),
                    r.cell.converged.to_string(),
                    r.cell.error.clone().unwrap_or_default(),
                ]
            }),
        )?;
    }
    let best = |values: Vec<f64>, larger: bool| {
        values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .max_by(|a, b| if larger { a.1.total_cmp(b.1) } else { b.1.total_cmp(a.1) })
            .map(|(i, _)| i)
    };
    let best_cv = best(cv.iter().map(|c| c.score).collect(), true);
    let best_aic = best(aic.iter().map(|r| r.cell.aic).collect(), false);
    write_json(
        &out.join("selection.json"),
        &SelectOutput {
            config: cfg,
            columns: &table.columns,
            cv,
            aic,
            best_cv,
            best_aic,
        },
    )
}

#[derive(Serialize)]
struct SampleStats {
    count: usize,
    seed: u64,
    proposals: u64,
    envelope: f64,
    restarts: usize,
    acceptance_rate: f64,
}

pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let count = cfg.count.ok_or_else(|| CliError::Usage("--count is required".into()))?;
    let sampler = SamplerConfig {
        seed: cfg.seed,
        grid_resolution: cfg.grid.unwrap_or(SamplerConfig::default().grid_resolution),
        ..SamplerConfig::default()
    };
    let out = prepare_out(cfg)?;
    let run = rejection_sample(&model, count, &sampler)?;
    let header: Vec<String> = (1..=model.ndim()).map(|j| format!("u{j}")).collect();
    write_csv(
        &out.join("sample.csv"),
        &header,
        run.points.points().map(|p| p.iter().map(|&u| fmt_f64(u)).collect()),
    )?;
    write_json(
        &out.join("sample_run.json"),
        &SampleStats {
            count,
            seed: cfg.seed,
            proposals: run.proposals,
            envelope: run.envelope,
            restarts: run.restarts,
            acceptance_rate: run.acceptance_rate(),
        },
    )
}

/// `count` equally spaced points from `lo` to `hi` inclusive.
fn axis(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    study::linspace(lo, hi, count)
}

pub fn density_grid(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    if model.ndim() != 2 {
        return Err(CliError::Usage(format!("density-grid needs a bivariate model, got {} axes", model.ndim())));
    }
    let resolution = cfg.grid.unwrap_or(101);
    if resolution < 2 {
        return Err(CliError::Usage("--grid must be at least 2".into()));
    }
    let out = prepare_out(cfg)?;
    let u = axis(0.0, 1.0, resolution);
    let values = model.density_grid(&[u.clone(), u.clone()])?;
    write_csv(
        &out.join("density_grid.csv"),
        &["u", "v", "density"],
        u.iter()
            .flat_map(|&a| u.iter().map(move |&b| (a, b)))
            .zip(&values)
            .map(|((a, b), &c)| vec![fmt_f64(a), fmt_f64(b), fmt_f64(c)]),
    )?;
    if cfg.input.is_some() {
        let table = load_table(cfg)?;
        if table.columns.len() != 2 {
            return Err(CliError::Usage("joint density grid needs exactly two columns".into()));
        }
        let margins = (0..2)
            .map(|j| MarginalModel::new(&table.rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        let axes: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                let col = table.rows.iter().map(|r| r[j]);
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                axis(lo, hi, resolution)
            })
            .collect();
        let mut rows = Vec::with_capacity(resolution * resolution);
        for &x in &axes[0] {
            for &y in &axes[1] {
                let h = joint_density(&model, &margins, &[x, y])?;
                rows.push(vec![fmt_f64(x), fmt_f64(y), fmt_f64(h)]);
            }
        }
        write_csv(&out.join("joint_grid.csv"), &["x", "y", "h"], rows)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum Study {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    #[value(name = "III")]
    III,
    #[value(name = "IV")]
    IV,
    #[value(name = "C")]
    C,
}

#[derive(Serialize)]
struct Pattern {
    name: String,
    holds: Option<bool>,
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    study: Study,
    config: &'a RunConfig,
    patterns: Vec<Pattern>,
    all_hold: bool,
    results: T,
}

fn summarize<T: Serialize>(out: &Path, study: Study, cfg: &RunConfig, patterns: Vec<Pattern>, results: T) -> Result<(), CliError> {
    let all_hold = patterns.iter().all(|p| p.holds == Some(true));
    write_json(
        &out.join("summary.json"),
        &Summary {
            study,
            config: cfg,
            patterns,
            all_hold,
            results,
        },
    )
}

fn mse_rows(grid: &study::MseGrid) -> impl Iterator<Item = Vec<String>> + '_ {
    grid.cells.iter().map(|c| {
        vec![
            fmt_f64(c.alpha),
            fmt_f64(c.beta),
            fmt_f64(c.mse),
            c.converged.to_string(),
            c.failed.to_string(),
        ]
    })
}

const MSE_HEADER: [&str; 5] = ["alpha", "beta", "mse", "converged", "failed"];

/// Tuning grid used by the cross-validation study.
pub const CV_ALPHAS: [f64; 7] = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25];
pub const CV_BETAS: [f64; 4] = [2.0, 3.0, 3.7, 4.0];

fn one_size(cfg: &RunConfig, default: usize) -> Result<usize, CliError> {
    match cfg.sample_size.as_deref() {
        None => Ok(default),
        Some([n]) => Ok(*n),
        Some(_) => Err(CliError::Usage("--sample-size takes a single value for this study".into())),
    }
}

pub fn reproduce(cfg: &RunConfig, which: Study) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let datasets = cfg.datasets.unwrap_or(if which == Study::C { 10 } else { 20 });
    let fit = &cfg.fit;
    let name = |f: Fixture| f.name().to_string();
    match which {
        Study::I => {
            let alphas = cfg.alphas_or(&study::linspace(0.0, 0.25, 6));
            let betas = cfg.betas_or(&[2.0, 3.0, 4.0]);
            let n = one_size(cfg, 1000)?;
            let mut grids = Vec::new();
            let mut patterns = Vec::new();
            for &f in &cfg.fixtures {
                let grid = study::mse_grid(f, n, datasets, &alphas, &betas, cfg.seed, fit)?;
                write_csv(&out.join(format!("mse_{}.csv", f.name())), &MSE_HEADER, mse_rows(&grid))?;
                patterns.push(Pattern {
                    name: format!("{}: penalization ordering at beta 3", name(f)),
                    holds: study::penalization_pattern(&grid, 0.0, 0.1, 0.25, 3.0),
                });
                grids.push(grid);
            }
            summarize(&out, which, cfg, patterns, grids)
        }
        Study::II => {
            let alphas = cfg.alphas_or(&CV_ALPHAS);
            let betas = cfg.betas_or(&CV_BETAS);
            let n = one_size(cfg, 1000)?;
            let mut studies = Vec::new();
            let mut patterns = Vec::new();
            for &f in &cfg.fixtures {
                let s = study::cv_study(f, n, datasets, &alphas, &betas, cfg.folds, cfg.seed, fit)?;
                write_csv(
                    &out.join(format!("cv_{}.csv", f.name())),
                    &["alpha", "beta", "mean_cv", "sd_cv", "valid", "converged"],
                    s.cells.iter().map(|c| {
                        vec![
                            fmt_f64(c.alpha),
                            fmt_f64(c.beta),
                            fmt_f64(c.mean),
                            fmt_f64(c.sd),
                            c.valid.to_string(),
                            c.converged.to_string(),
                        ]
                    }),
                )?;
                patterns.push(Pattern {
                    name: format!("{}: location of the best mean CV", name(f)),
                    holds: study::tuning_pattern(&s),
                });
                studies.push(s);
            }
            summarize(&out, which, cfg, patterns, studies)
        }
        Study::III => {
            let sizes = if cfg.size.is_empty() {
                (4..=6).flat_map(|m| (4..=6).map(move |n| vec![m, n])).collect()
            } else {
                cfg.size.clone()
            };
            let n = one_size(cfg, 1000)?;
            let mut studies = Vec::new();
            let mut patterns = Vec::new();
            for &f in &cfg.fixtures {
                let s = study::size_study(f, n, datasets, &sizes, cfg.folds, cfg.seed, fit)?;
                write_csv(
                    &out.join(format!("sizes_{}.csv", f.name())),
                    &["size", "cv_mean", "cv_sd", "aic_mean", "aic_sd", "cv_valid", "aic_valid", "aic_converged"],
                    s.cells.iter().map(|c| {
                        vec![
                            size_label(&c.size),
                            fmt_f64(c.cv_mean),
                            fmt_f64(c.cv_sd),
                            fmt_f64(c.aic_mean),
                            fmt_f64(c.aic_sd),
                            c.cv_valid.to_string(),
                            c.aic_valid.to_string(),
                            c.aic_converged.to_string(),
                        ]
                    }),
                )?;
                patterns.push(Pattern {
                    name: format!("{}: best sizes by CV and AIC", name(f)),
                    holds: Some(study::size_pattern(&s)),
                });
                studies.push(s);
            }
            summarize(&out, which, cfg, patterns, studies)
        }
        Study::IV => {
            let p = ScadParams::new(
                single(cfg.alpha.as_ref(), 0.01, "alpha")?,
                single(cfg.beta.as_ref(), 2.25, "beta")?,
            )?;
            let s = study::joint_density_study(one_size(cfg, 2000)?, p, cfg.seed, fit)?;
            write_csv(
                &out.join("joint_density.csv"),
                &["model", "size", "degrees", "mse", "constraint_residual", "converged", "iterations"],
                s.fits.iter().map(|f| {
                    vec![
                        f.name.clone(),
                        size_label(&f.size),
                        size_label(&f.degrees),
                        fmt_f64(f.mse),
                        fmt_f64(f.constraint_residual),
                        f.converged.to_string(),
                        f.iterations.to_string(),
                    ]
                }),
            )?;
            let patterns = vec![
                Pattern {
                    name: "every MSE in [1e-5, 5e-4]".into(),
                    holds: Some(s.fits.iter().all(|f| (1e-5..=5e-4).contains(&f.mse))),
                },
                Pattern {
                    name: "every marginal constraint within 1e-6".into(),
                    holds: Some(s.fits.iter().all(|f| f.constraint_residual <= 1e-6)),
                },
            ];
            summarize(&out, which, cfg, patterns, s)
        }
        Study::C => {
            let alphas = cfg.alphas_or(&study::linspace(0.0, 0.25, 6));
            let betas = cfg.betas_or(&[3.0]);
            let sizes = cfg.sample_size.clone().unwrap_or_else(|| vec![100, 300]);
            let mut studies = Vec::new();
            let mut patterns = Vec::new();
            for &f in &cfg.fixtures {
                let s = study::small_sample_study(f, &sizes, datasets, &alphas, &betas, cfg.seed, fit)?;
                for g in &s.grids {
                    write_csv(
                        &out.join(format!("mse_{}_n{}.csv", f.name(), g.sample_size)),
                        &MSE_HEADER,
                        mse_rows(g),
                    )?;
                }
                patterns.push(Pattern {
                    name: format!("{}: mean MSE falls with sample size", name(f)),
                    holds: Some(s.decreasing()),
                });
                studies.push(s);
            }
            summarize(&out, which, cfg, patterns, studies)
        }
    }
}
