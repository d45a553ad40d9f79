//! Scenario-driven runs of the homogenisation solvers: corrector tensors, Poincaré sweeps,
//! fibre convergence sweeps, whole-space comparisons and the electromagnetic variants.

pub mod cache;
pub mod output;
pub mod scenario;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use curlhom::cell::{assemble_ahom, CellCorrector, HomogenisedTensor};
use curlhom::electromag::{corrector_mean_check, em_estimates, em_fields, em_wholespace};
use curlhom::floquet::{whole_space_compare, EnvelopeSource, LatticeSample, WholeSpaceSource};
use curlhom::galerkin::Discretisation;
use curlhom::poincare::poincare_sweep;
use curlhom::resolvent::{summarise, sweep_with, FibreContext};
use curlhom::spectral::CoefficientField;
use curlhom::{FrequencyCube, PeriodicMeasure};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::output::{write_atomic, Table};
use crate::scenario::{Scenario, SourceSpec, SCHEMA_VERSION};

/// Relative size of `max |2π l_j μ̂(−l)|` below which gradients count as mean-free.
pub const GRADIENT_MEAN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Ahom,
    Poincare,
    Sweep,
    Wholespace,
    EmSweep,
    CheckMeasure,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ahom => "ahom",
            Command::Poincare => "poincare",
            Command::Sweep => "sweep",
            Command::Wholespace => "wholespace",
            Command::EmSweep => "em-sweep",
            Command::CheckMeasure => "check-measure",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub cache: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub diagnostics: Value,
}

/// Everything the solvers share for one scenario.
struct Prepared {
    scenario: Scenario,
    mu: PeriodicMeasure,
    a: CoefficientField,
    disc: Discretisation,
    workers: usize,
}

impl Prepared {
    fn new(mut scenario: Scenario, opts: &RunOptions) -> Result<Self> {
        if let Some(seed) = opts.seed {
            scenario.generator.seed = seed;
        }
        let (mu, a) = scenario.validate()?;
        let disc = Discretisation::new(&FrequencyCube::new(scenario.cutoff), &mu, Some(&a));
        let workers = opts.workers.unwrap_or(scenario.workers);
        Ok(Prepared { scenario, mu, a, disc, workers })
    }

    fn corrector(&self, cache: Option<&Path>) -> Result<(CellCorrector, HomogenisedTensor, bool)> {
        let (corr, hit) = cache::corrector(&self.disc, &self.a, cache)?;
        let ahom = assemble_ahom(&corr);
        Ok((corr, ahom, hit))
    }

    fn epsilons(&self, what: &str) -> Result<&[f64]> {
        if self.scenario.epsilons.is_empty() {
            bail!("epsilons: `{what}` needs at least one value");
        }
        Ok(&self.scenario.epsilons)
    }

    fn source(&self) -> WholeSpaceSource {
        let generator = self.scenario.generator();
        match self.scenario.wholespace.source {
            SourceSpec::Envelope { theta_max, resolution } => {
                WholeSpaceSource::Envelope(EnvelopeSource { theta_max, resolution, generator })
            }
            SourceSpec::Lattice { n_range, profile_cutoff, dual_resolution } => WholeSpaceSource::Lattice {
                profiles: LatticeSample::random(1.0, n_range, &FrequencyCube::new(profile_cutoff), generator.seed),
                resolution: dual_resolution,
            },
        }
    }
}

/// Loads, validates, runs, and only then writes every output file plus `run_record.json`.
pub fn run(cmd: Command, opts: &RunOptions) -> Result<Outcome> {
    let start = Instant::now();
    let scenario = Scenario::load(&opts.scenario)?;
    let p = Prepared::new(scenario, opts)?;
    let cache = opts.cache.as_deref();
    let mut cache_hit = None;
    let (products, diagnostics) = match cmd {
        Command::CheckMeasure => check_measure(&p)?,
        Command::Poincare => poincare(&p)?,
        _ => {
            let (corr, ahom, hit) = p.corrector(cache)?;
            cache_hit = cache.map(|_| hit);
            let ctx = FibreContext { disc: &p.disc, a: &p.a, corrector: &corr, ahom: &ahom };
            match cmd {
                Command::Ahom => ahom_report(&p, &corr, &ahom)?,
                Command::Sweep => sweep(&p, ctx)?,
                Command::Wholespace => wholespace(&p, ctx)?,
                Command::EmSweep => em_sweep(&p, ctx)?,
                _ => unreachable!(),
            }
        }
    };
    std::fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let mut files = Vec::new();
    let mut manifest = Vec::new();
    for (name, bytes) in &products {
        let path = opts.out.join(name);
        write_atomic(&path, bytes)?;
        manifest.push(json!({ "name": name, "bytes": bytes.len(), "sha256": hex::encode(Sha256::digest(bytes)) }));
        files.push(path);
    }
    let record = json!({
        "schema_version": SCHEMA_VERSION,
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "subcommand": cmd.name(),
        "scenario": opts.scenario.display().to_string(),
        "input_hash": p.scenario.content_hash(),
        "seed": p.scenario.generator.seed,
        "workers": p.workers,
        "cache_hit": cache_hit,
        "wall_seconds": start.elapsed().as_secs_f64(),
        "diagnostics": diagnostics,
        "files": manifest,
    });
    let path = opts.out.join("run_record.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&record)?)?;
    files.push(path);
    Ok(Outcome { files, diagnostics })
}

type Products = (Vec<(&'static str, Vec<u8>)>, Value);

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn check_measure(p: &Prepared) -> Result<Products> {
    let defect = p.mu.check_gradient_mean_zero(p.disc.cube());
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "lebesgue_weight": p.mu.lebesgue_weight,
        "flats": p.mu.flats.len(),
        "normalization": p.mu.normalization,
        "cutoff": p.scenario.cutoff,
        "coupling_groups": p.disc.components().len(),
        "gradient_mean_defect": defect,
        "gradient_mean_zero": defect <= GRADIENT_MEAN_TOL,
    });
    Ok((vec![("measure_check.json", pretty(&report)?)], report))
}

fn poincare(p: &Prepared) -> Result<Products> {
    let rep = poincare_sweep(&p.mu, p.disc.cube(), p.scenario.poincare.resolution, p.workers)?;
    let mut t = Table::new(&["kappa1", "kappa2", "kappa3", "c_tilde"])?;
    for (k, c) in rep.kappa_grid.iter().zip(&rep.c_tilde) {
        t.row(&[k[0], k[1], k[2], *c])?;
    }
    let diag = json!({ "c_sup": rep.c_sup, "cutoff": rep.cutoff, "points": rep.c_tilde.len() });
    Ok((vec![("poincare.csv", t.finish()?)], diag))
}

fn ahom_report(p: &Prepared, corr: &CellCorrector, ahom: &HomogenisedTensor) -> Result<Products> {
    let means = corrector_mean_check(corr, &p.a, ahom, &p.mu).ok();
    let grad = p.mu.check_gradient_mean_zero(p.disc.cube());
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "cutoff": p.scenario.cutoff,
        "a_hom": ahom.a_hom,
        "eigenvalues": ahom.eigenvalues,
        "symmetry_defect": ahom.symmetry_defect,
        "imaginary_defect": ahom.imaginary_defect,
        "energy_defect": ahom.energy_defect,
        "corrector_residuals": corr.residual_norms,
        "curl_mean_defect": means.map(|m| m.0),
        "flux_mean_defect": means.map(|m| m.1),
        "gradient_mean_defect": grad,
        "gradient_mean_zero": grad <= GRADIENT_MEAN_TOL,
    });
    let diag = json!({ "symmetric": ahom.symmetric(), "eigenvalues": ahom.eigenvalues });
    Ok((vec![("ahom.json", pretty(&report)?)], diag))
}

pub const SWEEP_COLUMNS: [&str; 15] = [
    "epsilon",
    "theta1",
    "theta2",
    "theta3",
    "err_main",
    "err_z",
    "ratio_R1",
    "ratio_R2",
    "ratio_curlR",
    "ratio_xi",
    "cond_estimate",
    "h_const_defect",
    "h_grad_defect",
    "kernel_defect",
    "transversality",
];

fn sweep(p: &Prepared, ctx: FibreContext) -> Result<Products> {
    let eps = p.epsilons("sweep")?;
    let results = sweep_with(ctx, eps, &p.scenario.theta_grid, &p.scenario.generator(), p.workers, |_, _, _| ())?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((row, ())) => rows.push(row),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        bail!("{} lattice point(s) failed:\n  {}", failures.len(), failures.join("\n  "));
    }
    let mut t = Table::new(&SWEEP_COLUMNS)?;
    for r in &rows {
        let q = &r.ratios;
        t.row(&[
            r.epsilon,
            r.theta[0],
            r.theta[1],
            r.theta[2],
            q.err_main,
            q.err_z,
            q.ratio_r1,
            q.ratio_r2,
            q.ratio_curl_r,
            q.ratio_xi,
            q.cond_estimate,
            q.h_const_defect,
            q.h_grad_defect,
            q.kernel_defect,
            q.transversality,
        ])?;
    }
    let rep = summarise(eps, rows, failures);
    let max = |f: fn(&curlhom::resolvent::EpsilonSummary) -> f64| rep.per_epsilon.iter().map(f).fold(0.0, f64::max);
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "points": rep.rows.len(),
        "slope": rep.slope,
        "exact": rep.exact,
        "max_h_defect": rep.max_h_defect,
        "max_err_main": max(|s| s.sup_err_main),
        "max_err_z": max(|s| s.max_err_z),
        "max_ratio_R1": max(|s| s.max_ratio_r1),
        "max_ratio_R2": max(|s| s.max_ratio_r2),
        "max_ratio_curlR": max(|s| s.max_ratio_curl_r),
        "max_ratio_xi": max(|s| s.max_ratio_xi),
        "per_epsilon": rep.per_epsilon,
    });
    let diag = json!({ "slope": rep.slope, "max_h_defect": rep.max_h_defect });
    Ok((vec![("sweep.csv", t.finish()?), ("sweep_summary.json", pretty(&summary)?)], diag))
}

fn wholespace(p: &Prepared, ctx: FibreContext) -> Result<Products> {
    let eps = p.epsilons("wholespace")?;
    let rows = whole_space_compare(ctx, &p.source(), eps, p.workers, p.scenario.wholespace.richardson)?;
    let mut t = Table::new(&[
        "epsilon",
        "nodes",
        "error",
        "ratio",
        "main_error",
        "f_norm",
        "tail_bound",
        "truncated_weight",
        "quadrature_estimate",
        "max_cond",
    ])?;
    for r in &rows {
        t.row(&[
            r.epsilon,
            r.nodes as f64,
            r.error,
            r.ratio,
            r.main_error,
            r.f_norm,
            r.tail_bound,
            r.truncated_weight,
            r.quadrature_estimate.unwrap_or(f64::NAN),
            r.max_cond,
        ])?;
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.error > 0.0).map(|r| (r.epsilon.ln(), r.error.ln())).collect();
    let diag = json!({ "slope": curlhom::resolvent::fit_slope(&pts) });
    Ok((vec![("wholespace.csv", t.finish()?)], diag))
}

fn em_sweep(p: &Prepared, ctx: FibreContext) -> Result<Products> {
    let eps = p.epsilons("em-sweep")?;
    let rows = em_wholespace(ctx, &p.source(), eps, p.workers)?;
    let mu = ctx.disc.measure();
    let fibre = sweep_with(ctx, eps, &p.scenario.theta_grid, &p.scenario.generator(), p.workers, |_, rhs, rep| {
        em_estimates(&em_fields(ctx, rep), rep.q.epsilon, rhs.norm(), mu).ok()
    })?;
    let mut sup = vec![(0.0f64, 0.0f64); eps.len()];
    for r in fibre {
        let (row, est) = r.map_err(anyhow::Error::msg)?;
        let i = eps.iter().position(|&e| e == row.epsilon).expect("lattice ε comes from the list");
        if let Some((d, e)) = est {
            sup[i] = (sup[i].0.max(d), sup[i].1.max(e));
        }
    }
    let mut t = Table::new(&[
        "epsilon",
        "ratio_D",
        "ratio_E",
        "ratio_D_nocorr",
        "ratio_E_nocorr",
        "fibre_ratio_D",
        "fibre_ratio_E",
    ])?;
    for (r, s) in rows.iter().zip(&sup) {
        t.row(&[r.epsilon, r.ratio_d, r.ratio_e, r.ratio_d_nocorr, r.ratio_e_nocorr, s.0, s.1])?;
    }
    Ok((vec![("em_sweep.csv", t.finish()?)], json!({ "rows": rows.len() })))
}
