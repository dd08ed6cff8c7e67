//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use galamm::assembly::{LoweredModel, ParamKind, Params};
use galamm::data::{Dataset, Table};
use galamm::estimation::{data_digest, fit, FitOptions, FitResult};
use galamm::families::Family;
use galamm::inference::{aic, aic_value, latent_trajectory_bands, lrt, smooth_bands, smooth_index, SmoothEstimate};
use galamm::model_spec::ModelSpec;
use galamm::simulate::{
    bootstrap, coverage_study, power_study, simulate_from_fit, variance_boundary_study, CognitiveDesign, SesDesign,
    SmoothTruth,
};

use crate::run::{csv_bytes, Run};
use crate::{BandsArgs, BootstrapArgs, Command, CompareArgs, Design, FitArgs, OptimizerArgs, SimulateArgs, Study};

const FIT_JSON: &str = "fit.json";
const MODEL_TOML: &str = "model.toml";
const DATA_CSV: &str = "data.csv";

pub fn dispatch(command: &Command) -> i32 {
    match command {
        Command::Fit(a) => with_run("fit", &a.out, |run| cmd_fit(a, run)),
        Command::Bands(a) => with_run("bands", &a.out, |run| cmd_bands(a, run)),
        Command::Simulate(a) => with_run("simulate", &a.out, |run| cmd_simulate(a, run)),
        Command::Bootstrap(a) => with_run("bootstrap", &a.out, |run| cmd_bootstrap(a, run)),
        Command::Compare(a) => with_run("compare", &a.out, |run| cmd_compare(a, run)),
    }
}

/// Run a command body and write its manifest. The body returns the
/// convergence status when a fit is involved.
fn with_run(name: &str, out: &Path, body: impl FnOnce(&mut Run) -> Result<Option<bool>>) -> i32 {
    let mut run = match Run::new(name, out) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    let outcome = body(&mut run);
    match &outcome {
        Err(e) => eprintln!("error: {e:#}"),
        Ok(Some(false)) => eprintln!("warning: the fit did not converge; results were written"),
        Ok(_) => {}
    }
    run.finish(&outcome)
}

fn fit_options(o: &OptimizerArgs, hessian: bool) -> FitOptions {
    FitOptions {
        max_iter: o.max_iter,
        pg_tol: o.tol,
        hessian,
        ..Default::default()
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    Ok(ModelSpec::load(path)?)
}

fn load_data(path: &Path, spec: &ModelSpec) -> Result<Dataset> {
    Dataset::load(path, spec).with_context(|| format!("data {}", path.display()))
}

fn table_bytes(t: &Table) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow!("{e}"))?)
}

/// Print a table that was also written to disk.
fn echo(bytes: &[u8]) {
    print!("{}", String::from_utf8_lossy(bytes));
}

// ---------------------------------------------------------------------------
// fit

#[derive(Serialize)]
struct ParameterRow<'a> {
    name: &'a str,
    kind: ParamKind,
    estimate: f64,
    se: Option<f64>,
    boundary: bool,
}

#[derive(Serialize)]
struct VarianceRow {
    level: String,
    component: String,
    with: String,
    quantity: &'static str,
    estimate: f64,
}

#[derive(Serialize)]
struct SmoothRow<'a> {
    smooth: &'a str,
    covariate: &'a str,
    edf: f64,
    theta: f64,
    variance: f64,
    lambda: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    loglik: f64,
    aic: f64,
    n_obs: usize,
    n_params: usize,
    converged: bool,
    iterations: usize,
    evaluations: usize,
    projected_gradient: f64,
    message: &'a str,
}

#[derive(Serialize)]
struct StandardizationRow<'a> {
    dispersion_group: &'a str,
    mean: f64,
    sd: f64,
}

/// Mark every dispersion group whose rows are all Gaussian for standardization.
fn standardize_gaussian_groups(spec: &ModelSpec, data_path: &Path) -> Result<ModelSpec> {
    let raw = load_data(data_path, spec)?;
    let mut config = spec.config.clone();
    for g in config.dispersion_groups.iter_mut() {
        let mut rows = raw
            .rows
            .iter()
            .filter(|r| raw.dispersion_groups[r.dispersion_group] == g.id)
            .peekable();
        if rows.peek().is_some() && rows.all(|r| r.family == Family::Gaussian) {
            g.standardize = true;
        }
    }
    Ok(ModelSpec::new(config)?)
}

fn variance_components(spec: &ModelSpec, model: &LoweredModel, p: &Params<f64>) -> Vec<VarianceRow> {
    let mut rows = Vec::new();
    for (g, name) in model.group_names.iter().enumerate() {
        rows.push(VarianceRow {
            level: "1".into(),
            component: name.clone(),
            with: String::new(),
            quantity: "dispersion",
            estimate: p.phi[g],
        });
    }
    for (b, block) in model.levels.iter().enumerate() {
        let cov = model.level_covariance(b, p);
        let level = spec.config.levels.get(block.level).cloned().unwrap_or_else(|| block.level.to_string());
        let names: Vec<&String> = block.latents.iter().map(|&l| &model.latent_names[l]).collect();
        for a in 0..block.dim() {
            rows.push(VarianceRow {
                level: level.clone(),
                component: names[a].clone(),
                with: String::new(),
                quantity: "variance",
                estimate: cov[(a, a)],
            });
        }
        for a in 0..block.dim() {
            for c in (a + 1)..block.dim() {
                let denom = (cov[(a, a)] * cov[(c, c)]).sqrt();
                rows.push(VarianceRow {
                    level: level.clone(),
                    component: names[a].clone(),
                    with: names[c].clone(),
                    quantity: "covariance",
                    estimate: cov[(a, c)],
                });
                rows.push(VarianceRow {
                    level: level.clone(),
                    component: names[a].clone(),
                    with: names[c].clone(),
                    quantity: "correlation",
                    estimate: cov[(a, c)] / denom,
                });
            }
        }
    }
    for s in smooth_rows(model, p, &[]) {
        rows.push(VarianceRow {
            level: "smoothing".into(),
            component: s.smooth.to_string(),
            with: String::new(),
            quantity: "variance",
            estimate: s.variance,
        });
        rows.push(VarianceRow {
            level: "smoothing".into(),
            component: s.smooth.to_string(),
            with: String::new(),
            quantity: "lambda",
            estimate: s.lambda,
        });
    }
    rows
}

/// Smoothing variance `ψ = φ₁θ²` and smoothing parameter `λ = φ₁/ψ` per smooth.
fn smooth_rows<'a>(model: &'a LoweredModel, p: &Params<f64>, edf: &[f64]) -> Vec<SmoothRow<'a>> {
    let phi1 = model.phi1(p);
    model
        .smooths
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let theta = p.theta[s.theta];
            SmoothRow {
                smooth: &s.name,
                covariate: &s.covariate,
                edf: edf.get(k).copied().unwrap_or(f64::NAN),
                theta,
                variance: phi1 * theta * theta,
                lambda: 1.0 / (theta * theta),
            }
        })
        .collect()
}

fn write_fit(run: &mut Run, spec: &ModelSpec, data: &Dataset, model: &LoweredModel, f: &FitResult) -> Result<()> {
    let params: Vec<ParameterRow> = f
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| ParameterRow {
            name,
            kind: f.kinds[i],
            estimate: f.x[i],
            se: f.se[i],
            boundary: f.boundary[i],
        })
        .collect();
    run.write_csv("parameters.csv", &params)?;
    run.write_csv("variance_components.csv", &variance_components(spec, model, &f.params))?;
    run.write_csv("smooths.csv", &smooth_rows(model, &f.params, &f.edf))?;
    let standardization: Vec<StandardizationRow> = data
        .dispersion_groups
        .iter()
        .zip(&data.standardization)
        .filter_map(|(g, s)| s.map(|s| StandardizationRow { dispersion_group: g, mean: s.mean, sd: s.sd }))
        .collect();
    if !standardization.is_empty() {
        run.write_csv("standardization.csv", &standardization)?;
    }
    let summary = csv_bytes(&[SummaryRow {
        loglik: f.loglik,
        aic: aic_value(f),
        n_obs: f.n_obs,
        n_params: f.n_params(),
        converged: f.converged,
        iterations: f.iterations,
        evaluations: f.evaluations,
        projected_gradient: f.projected_gradient,
        message: &f.message,
    }])?;
    run.write_bytes("fit_summary.csv", &summary)?;
    run.write_json(FIT_JSON, f)?;
    echo(&summary);
    Ok(())
}

fn cmd_fit(a: &FitArgs, run: &mut Run) -> Result<Option<bool>> {
    run.manifest.config = Some(display(&a.model));
    run.manifest.data = Some(display(&a.data));
    let mut spec = load_spec(&a.model)?;
    if a.standardize {
        spec = standardize_gaussian_groups(&spec, &a.data)?;
    }
    let data = load_data(&a.data, &spec)?;
    let model = LoweredModel::new(&spec, &data).with_context(|| format!("model {}", a.model.display()))?;
    let raw = fs::read(&a.data).with_context(|| format!("data {}", a.data.display()))?;
    run.write_bytes(DATA_CSV, &raw)?;
    run.write_bytes(MODEL_TOML, spec.to_toml_string().as_bytes())?;
    let f = fit(&model, None, &fit_options(&a.optimizer, !a.no_hessian))?;
    run.manifest.message = Some(f.message.clone());
    write_fit(run, &spec, &data, &model, &f)?;
    Ok(Some(f.converged))
}

/// Model, data and estimates read back from a `fit` output directory.
struct FitDir {
    spec: ModelSpec,
    data: Dataset,
    model: LoweredModel,
    fit: FitResult,
}

fn read_fit_json(dir: &Path) -> Result<FitResult> {
    let path = dir.join(FIT_JSON);
    let text = fs::read_to_string(&path).with_context(|| format!("{}: cannot read", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: malformed fit", path.display()))
}

fn load_fit_dir(dir: &Path, run: &mut Run) -> Result<FitDir> {
    run.manifest.inputs.push(display(dir));
    let spec = load_spec(&dir.join(MODEL_TOML))?;
    let data = load_data(&dir.join(DATA_CSV), &spec)?;
    let model = LoweredModel::new(&spec, &data)?;
    let fit = read_fit_json(dir)?;
    if fit.data_digest != data_digest(&model) {
        bail!("{}: estimates do not belong to {}", dir.join(FIT_JSON).display(), DATA_CSV);
    }
    Ok(FitDir { spec, data, model, fit })
}

// ---------------------------------------------------------------------------
// bands

#[derive(Serialize)]
struct BandRow {
    grid: f64,
    fhat: f64,
    se: f64,
    lo_pt: f64,
    hi_pt: f64,
    lo_sim: f64,
    hi_sim: f64,
}

#[derive(Serialize)]
struct BandMeta {
    offset: Option<f64>,
    eta: Option<f64>,
    edf: f64,
    z: f64,
    critical: f64,
    alpha: f64,
    n_sim: usize,
    seed: u64,
}

fn parse_grid(spec: Option<&str>, x: &[f64]) -> Result<Vec<f64>> {
    let even = |from: f64, to: f64, n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![from];
        }
        (0..n).map(|i| from + (to - from) * i as f64 / (n - 1) as f64).collect()
    };
    let Some(spec) = spec else {
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Ok(even(lo, hi, 100));
    };
    let bad = || anyhow!("--grid `{spec}`: expected `from:to:n` or a comma-separated list of numbers");
    let grid = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let from: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let to: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        even(from, to, n)
    } else {
        spec.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

fn latent_sd(model: &LoweredModel, p: &Params<f64>, latent: usize) -> Result<f64> {
    for (b, block) in model.levels.iter().enumerate() {
        if let Some(pos) = block.latents.iter().position(|&l| l == latent) {
            return Ok(model.level_covariance(b, p)[(pos, pos)].sqrt());
        }
    }
    bail!("latent `{}` has no variance component", model.latent_names[latent])
}

fn meta(e: &SmoothEstimate, offset: Option<f64>, eta: Option<f64>) -> BandMeta {
    BandMeta {
        offset,
        eta,
        edf: e.edf,
        z: e.z,
        critical: e.critical,
        alpha: e.alpha,
        n_sim: e.n_sim,
        seed: e.seed,
    }
}

fn cmd_bands(a: &BandsArgs, run: &mut Run) -> Result<Option<bool>> {
    run.manifest.seed = Some(a.seed);
    let fd = load_fit_dir(&a.fit, run)?;
    let k = smooth_index(&fd.model, &a.smooth)?;
    let grid = parse_grid(a.grid.as_deref(), &fd.model.smooths[k].x)?;
    if let (Some(latent), Some(multiples)) = (&a.latent, &a.offsets) {
        let l = fd
            .model
            .latent_names
            .iter()
            .position(|n| n == latent)
            .ok_or_else(|| anyhow!("unknown latent variable `{latent}`"))?;
        let sd = latent_sd(&fd.model, &fd.fit.params, l)?;
        let etas: Vec<f64> = multiples.iter().map(|m| m * sd).collect();
        let curves = latent_trajectory_bands(&fd.model, &fd.fit, k, l, &etas, &grid, a.alpha, a.nsim, a.seed)?;
        // One row per grid point, band columns per curve.
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["grid".to_string()];
        for m in multiples {
            for col in ["fhat", "se", "lo_pt", "hi_pt", "lo_sim", "hi_sim"] {
                header.push(format!("{col}_{m}"));
            }
        }
        w.write_record(&header)?;
        for (i, &g) in grid.iter().enumerate() {
            let mut row = vec![g];
            for c in &curves {
                row.extend([c.fhat[i], c.se[i], c.lo_pt[i], c.hi_pt[i], c.lo_sim[i], c.hi_sim[i]]);
            }
            w.serialize(row)?;
        }
        run.write_bytes("bands.csv", &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
        let metas: Vec<BandMeta> = curves
            .iter()
            .zip(multiples.iter().zip(&etas))
            .map(|(c, (&m, &eta))| meta(c, Some(m), Some(eta)))
            .collect();
        let bytes = csv_bytes(&metas)?;
        run.write_bytes("bands_meta.csv", &bytes)?;
        echo(&bytes);
    } else {
        let e = smooth_bands(&fd.model, &fd.fit, k, &grid, a.alpha, a.nsim, a.seed)?;
        let rows: Vec<BandRow> = (0..grid.len())
            .map(|i| BandRow {
                grid: e.grid[i],
                fhat: e.fhat[i],
                se: e.se[i],
                lo_pt: e.lo_pt[i],
                hi_pt: e.hi_pt[i],
                lo_sim: e.lo_sim[i],
                hi_sim: e.hi_sim[i],
            })
            .collect();
        run.write_csv("bands.csv", &rows)?;
        let bytes = csv_bytes(&[meta(&e, None, None)])?;
        run.write_bytes("bands_meta.csv", &bytes)?;
        echo(&bytes);
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct TruthRow<'a> {
    name: &'a str,
    kind: ParamKind,
    value: f64,
}

fn read_design<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("{}: cannot read", p.display()))?;
            toml::from_str(&text).with_context(|| format!("design {}", p.display()))
        }
    }
}

fn cognitive_design(a: &SimulateArgs) -> Result<CognitiveDesign> {
    if a.lambda8.is_some() {
        bail!("--lambda8 applies to the ses-like design only");
    }
    let mut d: CognitiveDesign = read_design(a.design_config.as_ref())?;
    if let Some(n) = a.subjects {
        d.subjects = n;
    }
    Ok(d)
}

fn ses_design(a: &SimulateArgs) -> Result<SesDesign> {
    let mut d: SesDesign = read_design(a.design_config.as_ref())?;
    if let Some(n) = a.subjects {
        d.subjects = n;
    }
    if let Some(l) = a.lambda8 {
        d.lambda8 = l;
    }
    Ok(d)
}

fn write_scenario(
    run: &mut Run,
    spec: &ModelSpec,
    data: &Dataset,
    model: &LoweredModel,
    truth: &Params<f64>,
) -> Result<()> {
    run.write_bytes(DATA_CSV, &table_bytes(&data.to_table(spec))?)?;
    run.write_bytes(MODEL_TOML, spec.to_toml_string().as_bytes())?;
    let x = model.pack(truth);
    let rows: Vec<TruthRow> = model
        .free
        .iter()
        .zip(&x)
        .map(|(info, &value)| TruthRow { name: &info.name, kind: info.kind, value })
        .collect();
    run.write_csv("truth.csv", &rows)?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, run: &mut Run) -> Result<Option<bool>> {
    run.manifest.seed = Some(a.seed);
    if let Some(dir) = &a.from_fit {
        let fd = load_fit_dir(dir, run)?;
        let truth = if a.redraw_smooths { SmoothTruth::Redraw } else { SmoothTruth::PointEstimate };
        let data = simulate_from_fit(&fd.model, &fd.data, &fd.fit, a.seed, truth)?;
        write_scenario(run, &fd.spec, &data, &fd.model, &fd.fit.params)?;
        return Ok(None);
    }
    let Some(design) = a.design else {
        bail!("one of --design or --from-fit is required");
    };
    let opts = fit_options(&a.optimizer, false);
    match (design, a.study) {
        (Design::CognitiveLike, None) => {
            let d = cognitive_design(a)?;
            let sc = d.scenario(a.seed)?;
            write_scenario(run, &sc.spec, &sc.data, &sc.model, &sc.truth)?;
            run.write_bytes("design.toml", toml::to_string(&d)?.as_bytes())?;
        }
        (Design::SesLike, None) => {
            let d = ses_design(a)?;
            let sc = d.scenario(a.seed)?;
            write_scenario(run, &sc.spec, &sc.data, &sc.model, &sc.truth)?;
            run.write_bytes("model_reduced.toml", d.config_toml(false).as_bytes())?;
            run.write_bytes("design.toml", toml::to_string(&d)?.as_bytes())?;
        }
        (Design::SesLike, Some(Study::Power)) => {
            let d = ses_design(a)?;
            let grid = a.lambda8_grid.clone().unwrap_or_else(|| vec![0.0, 0.06, 0.12]);
            let (rows, records) = power_study(&d, &grid, a.replicates, a.seed, a.alpha, &opts)?;
            let bytes = csv_bytes(&rows)?;
            run.write_bytes("power.csv", &bytes)?;
            run.write_csv("power_replicates.csv", &records)?;
            run.write_bytes("design.toml", toml::to_string(&d)?.as_bytes())?;
            echo(&bytes);
        }
        (Design::SesLike, Some(Study::Coverage)) => {
            let d = ses_design(a)?;
            let multiples = a.offsets.clone().unwrap_or_else(|| vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
            let opts = fit_options(&a.optimizer, true);
            let rows = coverage_study(&d, &multiples, a.grid_points, a.replicates, a.seed, a.alpha, a.nsim, &opts)?;
            let bytes = csv_bytes(&rows)?;
            run.write_bytes("coverage.csv", &bytes)?;
            run.write_bytes("design.toml", toml::to_string(&d)?.as_bytes())?;
            echo(&bytes);
        }
        (Design::CognitiveLike, Some(Study::Boundary)) => {
            let d = cognitive_design(a)?;
            let ratios = a.ratios.clone().unwrap_or_else(|| vec![0.0, 0.1, 0.25, 0.5]);
            let (rows, records) = variance_boundary_study(&d, &ratios, a.replicates, a.seed, &opts)?;
            let bytes = csv_bytes(&rows)?;
            run.write_bytes("boundary.csv", &bytes)?;
            run.write_csv("boundary_replicates.csv", &records)?;
            run.write_bytes("design.toml", toml::to_string(&d)?.as_bytes())?;
            echo(&bytes);
        }
        (Design::CognitiveLike, Some(s)) => bail!("the {s:?} study uses the ses-like design"),
        (Design::SesLike, Some(s)) => bail!("the {s:?} study uses the cognitive-like design"),
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// bootstrap

#[derive(Serialize)]
struct ReplicateEstimateRow<'a> {
    replicate: usize,
    stream: u64,
    parameter: &'a str,
    estimate: f64,
    se: Option<f64>,
    boundary: bool,
}

#[derive(Serialize)]
struct ReplicateStatusRow<'a> {
    replicate: usize,
    stream: u64,
    converged: bool,
    loglik: f64,
    message: &'a str,
}

fn cmd_bootstrap(a: &BootstrapArgs, run: &mut Run) -> Result<Option<bool>> {
    run.manifest.seed = Some(a.seed);
    let fd = load_fit_dir(&a.fit, run)?;
    let boot = bootstrap(&fd.model, &fd.fit, a.replicates, a.seed, &fit_options(&a.optimizer, !a.no_hessian))?;
    let bytes = csv_bytes(&boot.parameters)?;
    run.write_bytes("bootstrap_parameters.csv", &bytes)?;
    run.write_csv("bootstrap_smooths.csv", &boot.smooths)?;
    let status: Vec<ReplicateStatusRow> = boot
        .replicates
        .iter()
        .map(|r| ReplicateStatusRow {
            replicate: r.replicate,
            stream: r.stream,
            converged: r.converged,
            loglik: r.loglik,
            message: &r.message,
        })
        .collect();
    run.write_csv("bootstrap_replicates.csv", &status)?;
    let mut estimates = Vec::new();
    for r in boot.converged() {
        for (j, name) in boot.names.iter().enumerate() {
            estimates.push(ReplicateEstimateRow {
                replicate: r.replicate,
                stream: r.stream,
                parameter: name,
                estimate: r.estimates[j],
                se: r.se.get(j).copied().flatten(),
                boundary: r.boundary.get(j).copied().unwrap_or(false),
            });
        }
    }
    run.write_csv("bootstrap_estimates.csv", &estimates)?;
    run.manifest.message = Some(format!("{} of {} replicates failed", boot.failures, boot.requested));
    echo(&bytes);
    Ok(None)
}

// ---------------------------------------------------------------------------
// compare

#[derive(Serialize)]
struct CompareRow<'a> {
    model: &'a str,
    parameters: usize,
    loglik: f64,
    aic: f64,
    /// AIC minus the AIC of the largest model.
    delta_aic: f64,
    lrt_df: Option<usize>,
    lrt_statistic: Option<f64>,
    lrt_p: Option<f64>,
    boundary_warning: Option<bool>,
}

fn cmd_compare(a: &CompareArgs, run: &mut Run) -> Result<Option<bool>> {
    let labels: Vec<String> = match &a.labels {
        Some(l) if l.len() == a.fits.len() => l.clone(),
        Some(l) => bail!("--labels has {} entries for {} fits", l.len(), a.fits.len()),
        None => a
            .fits
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| display(p)))
            .collect(),
    };
    let mut fits = Vec::new();
    for dir in &a.fits {
        run.manifest.inputs.push(display(dir));
        fits.push(read_fit_json(dir)?);
    }
    // The reference is the model with the most parameters, first on ties.
    let reference = (0..fits.len()).fold(0, |best, i| if fits[i].n_params() > fits[best].n_params() { i } else { best });
    let named: Vec<(&str, &FitResult)> = labels.iter().map(|l| l.as_str()).zip(&fits).collect();
    let table = aic(&named, &labels[reference])?;
    let reference_fit = &fits[reference];
    let mut rows = Vec::new();
    for (label, f) in &named {
        let row = table.iter().find(|r| r.name == *label).expect("every fit has an AIC row");
        let nested = f.n_params() < reference_fit.n_params()
            && f.names.iter().all(|n| reference_fit.index(n).is_some());
        let test = if nested { Some(lrt(f, reference_fit, reference_fit.n_params() - f.n_params())?) } else { None };
        rows.push(CompareRow {
            model: label,
            parameters: row.n_params,
            loglik: row.loglik,
            aic: row.aic,
            delta_aic: row.delta,
            lrt_df: test.as_ref().map(|t| t.df),
            lrt_statistic: test.as_ref().map(|t| t.statistic),
            lrt_p: test.as_ref().map(|t| t.p_value),
            boundary_warning: test.as_ref().map(|t| t.boundary_warning),
        });
    }
    let bytes = csv_bytes(&rows)?;
    run.write_bytes("comparison.csv", &bytes)?;
    echo(&bytes);
    let converged = fits.iter().all(|f| f.converged);
    Ok(Some(converged))
}
