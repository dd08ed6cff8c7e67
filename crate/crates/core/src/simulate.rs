//! Parametric bootstrap and synthetic study designs.
//!
//! Every replicate draws from its own ChaCha8 stream derived from the study
//! seed and the replicate index, and replicate results are collected in index
//! order, so all outputs are independent of the number of worker threads.
//!
//! Two generators are provided. The cognitive-like design has binomial memory
//! items and Gaussian executive-function items measured at repeated timepoints
//! within subjects, with smooth age effects on the timepoint-level latent
//! variables. The ses-like design has a subject-level socioeconomic latent
//! variable measured by partially missing education and income items, which
//! also predicts repeated hippocampal volume measurements through an
//! age-dependent loading.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{LoweredModel, ParamKind, Params, ThetaTarget};
use crate::data::{format_number, level_column, Dataset, Table, DISPERSION_GROUP, FAMILY_GROUP, ITEM, RESPONSE, TRIALS};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, FitResult};
use crate::families::Family;
use crate::inference::{latent_trajectory_bands, lrt_statistic, smooth_index};
use crate::model_spec::{ModelSpec, TermTarget};

/// Random number generator of one replicate.
pub fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream of replicate `rep` within study cell `cell`; stream 0 is reserved
/// for the fixed design structure.
fn stream(cell: usize, rep: usize) -> u64 {
    ((cell as u64) << 32) | (rep as u64 + 1)
}

/// How smooth terms are treated when simulating from a fitted model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothTruth {
    /// Hold the penalized coefficients at their predicted values.
    #[default]
    PointEstimate,
    /// Redraw the penalized coefficients from their normal prior.
    Redraw,
}

/// Responses drawn from the model at `p`.
///
/// Random effects of every level are redrawn as `u ~ N(0, φ₁ I)`, so that
/// `Λ u ~ N(0, Ψ)`. Penalized smooth coefficients are taken from `smooth_u`
/// (entries at level positions are ignored) unless `redraw_smooths` is set.
/// `offset` is added to the linear predictor.
pub fn draw_responses<R: Rng>(
    model: &LoweredModel,
    p: &Params<f64>,
    smooth_u: Option<&[f64]>,
    redraw_smooths: bool,
    offset: Option<&[f64]>,
    rng: &mut R,
) -> Vec<f64> {
    let sd = model.phi1(p).sqrt();
    let mut u = vec![0.0; model.r];
    for block in &model.levels {
        for unit in 0..block.n_units {
            for pos in 0..block.dim() {
                let z: f64 = StandardNormal.sample(rng);
                u[block.column(unit, pos)] = sd * z;
            }
        }
    }
    for s in &model.smooths {
        for j in s.u_offset..s.u_offset + s.n_random() {
            u[j] = if redraw_smooths {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            } else {
                smooth_u.map_or(0.0, |v| v[j])
            };
        }
    }
    let design = model.design(p);
    let mut nu = model.predictor(&design, &u);
    if let Some(off) = offset {
        for (a, b) in nu.iter_mut().zip(off) {
            *a += b;
        }
    }
    (0..model.n)
        .map(|i| match model.family[i] {
            Family::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                nu[i] + p.phi[model.group[i]].sqrt() * z
            }
            Family::Binomial => {
                let prob = crate::families::expit(nu[i]);
                Binomial::new(model.trials[i] as u64, prob)
                    .expect("probability within [0, 1]")
                    .sample(rng) as f64
            }
        })
        .collect()
}

/// New dataset drawn from a fitted model: random effects redrawn from
/// `N(0, Ψ̂)`, responses redrawn from their families, and smooth terms held
/// at their point estimates unless `smooths` asks for redraws.
pub fn simulate_from_fit(
    model: &LoweredModel,
    data: &Dataset,
    fit: &FitResult,
    seed: u64,
    smooths: SmoothTruth,
) -> Result<Dataset> {
    if !fit.converged {
        return Err(Error::InvalidArgument("simulation requires a converged fit".into()));
    }
    if data.n() != model.n {
        return Err(Error::Incompatible(format!(
            "dataset has {} rows but the model was built from {}",
            data.n(),
            model.n
        )));
    }
    let mut rng = replicate_rng(seed, 0);
    let y = draw_responses(model, &fit.params, Some(&fit.u), smooths == SmoothTruth::Redraw, None, &mut rng);
    Ok(data.with_responses(&y))
}

/// Values of a fitted smooth at `x`, including its unpenalized part.
pub fn smooth_values(model: &LoweredModel, p: &Params<f64>, u: &[f64], smooth: usize, x: &[f64]) -> Vec<f64> {
    let s = &model.smooths[smooth];
    let nf = s.n_fixed();
    let theta = p.theta[s.theta];
    let coef: Vec<f64> = (0..nf)
        .map(|j| p.beta[s.beta_offset + j])
        .chain((0..s.n_random()).map(|j| theta * u[s.u_offset + j]))
        .collect();
    x.iter()
        .map(|&v| s.mixed.mixed_row(v).iter().zip(&coef).map(|(a, b)| a * b).sum())
        .collect()
}

/// Linear-predictor contribution of true smooth functions, each centered over
/// the covariate values of its smooth as the fitted smooths are.
pub fn smooth_offset(model: &LoweredModel, p: &Params<f64>, curves: &[(usize, &dyn Fn(f64) -> f64)]) -> Vec<f64> {
    let eff = model.effects(p);
    let mut off = vec![0.0; model.n];
    for &(k, f) in curves {
        let s = &model.smooths[k];
        let values: Vec<f64> = s.x.iter().map(|&v| f(v)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for &(i, point) in &s.row_points {
            let mult = match s.target {
                TermTarget::Latent(m) => eff[i * model.n_latent + m],
                TermTarget::Predictor { .. } => 1.0,
            };
            off[i] += mult * (values[point] - mean);
        }
    }
    off
}

/// Parameters of a lowered model from named true values.
///
/// `covariance(a, b)` returns the true covariance of latent variables `a` and
/// `b` on the response scale; the factor entries follow from its Cholesky
/// factor divided by `√φ₁`. Smooth scales start at one and smooth fixed
/// parts at zero. Names not present in the model are ignored.
pub fn params_from_truth(
    model: &LoweredModel,
    beta: &[(&str, f64)],
    loadings: &[(&str, f64)],
    phi: &[(&str, f64)],
    covariance: &dyn Fn(&str, &str) -> f64,
) -> Result<Params<f64>> {
    let mut p = model.template.clone();
    for &(name, v) in beta {
        if let Some(j) = model.beta_names.iter().position(|b| b == name) {
            p.beta[j] = v;
        }
    }
    for &(name, v) in loadings {
        if let Some(j) = model.loading_names.iter().position(|b| b == name) {
            p.loadings[j] = v;
        }
    }
    for &(name, v) in phi {
        if let Some(j) = model.group_names.iter().position(|b| b == name) {
            p.phi[j] = v;
        }
    }
    let phi1 = model.phi1(&p);
    for block in &model.levels {
        let m = block.dim();
        let names: Vec<&str> = block.latents.iter().map(|&l| model.latent_names[l].as_str()).collect();
        let cov = DMatrix::from_fn(m, m, |a, b| covariance(names[a], names[b]) / phi1);
        let factor = match cov.clone().cholesky() {
            Some(c) => c.l(),
            // Singular blocks (zero variances) with a diagonal structure.
            None => DMatrix::from_fn(m, m, |a, b| if a == b { cov[(a, a)].max(0.0).sqrt() } else { 0.0 }),
        };
        for a in 0..m {
            for b in 0..=a {
                if let Some(t) = block.theta_index[a][b] {
                    p.theta[t] = factor[(a, b)];
                }
            }
        }
    }
    for (t, target) in model.theta_targets.iter().enumerate() {
        if matches!(target, ThetaTarget::Smooth(_)) {
            p.theta[t] = 1.0;
        }
    }
    model.check_admissible(&p)?;
    Ok(p)
}

/// A simulated study: fixed design structure and the generating truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ModelSpec,
    /// Dataset holding one draw of the responses.
    pub data: Dataset,
    pub model: LoweredModel,
    pub truth: Params<f64>,
    /// Contribution of the true smooth functions to the linear predictor.
    pub offset: Vec<f64>,
}

impl Scenario {
    /// Responses of one replicate.
    pub fn draw(&self, seed: u64, stream: u64) -> Vec<f64> {
        let mut rng = replicate_rng(seed, stream);
        draw_responses(&self.model, &self.truth, None, false, Some(&self.offset), &mut rng)
    }

    /// Model with the responses of one replicate.
    pub fn replicate(&self, seed: u64, stream: u64) -> LoweredModel {
        self.model.with_responses(self.draw(seed, stream))
    }

    /// The same structure and truth under another model specification.
    pub fn with_spec(&self, spec: ModelSpec) -> Result<Scenario> {
        let model = LoweredModel::new(&spec, &self.data)?;
        let mut truth = model.template.clone();
        truth.beta.copy_from_slice(&self.truth.beta);
        truth.theta.copy_from_slice(&self.truth.theta);
        truth.structural.copy_from_slice(&self.truth.structural);
        truth.phi.copy_from_slice(&self.truth.phi);
        for (j, v) in truth.loadings.iter_mut().enumerate() {
            if model.free.iter().any(|f| f.kind == ParamKind::Loading && f.index == j) {
                *v = self.truth.loadings[j];
            }
        }
        Ok(Scenario {
            spec,
            data: self.data.clone(),
            model,
            truth,
            offset: self.offset.clone(),
        })
    }
}

/// Long-format table under construction.
struct TableBuilder {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TableBuilder {
    fn new(levels: usize, binomial: bool, covariates: &[&str]) -> Self {
        let mut header: Vec<String> = [RESPONSE, FAMILY_GROUP, DISPERSION_GROUP, ITEM]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if binomial {
            header.push(TRIALS.to_string());
        }
        for l in 0..levels {
            header.push(level_column(l + 2));
        }
        header.extend(covariates.iter().map(|s| s.to_string()));
        TableBuilder { header, rows: Vec::new() }
    }

    fn push(&mut self, family: &str, dispersion: &str, item: &str, trials: Option<u32>, ids: &[usize], covariates: &[f64]) {
        let mut row = vec!["0".to_string(), family.to_string(), dispersion.to_string(), item.to_string()];
        if self.header.iter().any(|h| h == TRIALS) {
            row.push(trials.map(|t| t.to_string()).unwrap_or_default());
        }
        row.extend(ids.iter().map(|i| i.to_string()));
        row.extend(covariates.iter().map(|&v| format_number(v)));
        self.rows.push(row);
    }

    fn finish(self) -> Table {
        Table { header: self.header, rows: self.rows }
    }
}

fn build_scenario(spec: ModelSpec, table: Table, truth: impl Fn(&LoweredModel) -> Result<(Params<f64>, Vec<f64>)>, seed: u64) -> Result<Scenario> {
    let data = Dataset::from_table(&table, &spec)?;
    let model = LoweredModel::new(&spec, &data)?;
    let (truth, offset) = truth(&model)?;
    let mut scenario = Scenario { spec, data, model, truth, offset };
    let y = scenario.draw(seed, 0);
    scenario.data = scenario.data.with_responses(&y);
    scenario.model = scenario.model.with_responses(y);
    Ok(scenario)
}

/// Cognitive-like design: timepoints nested in subjects, three binomial
/// memory items and two Gaussian executive-function items per timepoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CognitiveDesign {
    pub subjects: usize,
    pub timepoints: usize,
    pub trials: u32,
    /// Standardized age increment between consecutive timepoints.
    pub age_step: f64,
    pub memory_loadings: [f64; 3],
    pub executive_loadings: [f64; 2],
    pub memory_intercepts: [f64; 3],
    pub executive_intercepts: [f64; 2],
    /// Timepoint-level variances of the memory and executive latent variables.
    pub psi_timepoint: [f64; 2],
    /// Subject-level variances of the memory and executive latent variables.
    pub psi_subject: [f64; 2],
    pub subject_correlation: f64,
    /// Residual variance of the executive items.
    pub phi_executive: f64,
    pub k: usize,
}

impl Default for CognitiveDesign {
    fn default() -> Self {
        CognitiveDesign {
            subjects: 150,
            timepoints: 2,
            trials: 16,
            age_step: 0.3,
            memory_loadings: [1.0, 0.8, 1.2],
            executive_loadings: [1.0, 0.7],
            memory_intercepts: [0.3, -0.2, 0.6],
            executive_intercepts: [0.0, 0.4],
            psi_timepoint: [0.3, 0.3],
            psi_subject: [0.6, 0.6],
            subject_correlation: 0.4,
            phi_executive: 0.3,
            k: 8,
        }
    }
}

/// True smooth age effect on the memory latent variable.
pub fn memory_curve(a: f64) -> f64 {
    0.6 * (1.2 * a).sin() - 0.25 * a * a
}

/// True smooth age effect on the executive latent variable.
pub fn executive_curve(a: f64) -> f64 {
    -0.4 * a + 0.3 * (2.0 * a).cos()
}

const MEMORY_ITEMS: [&str; 3] = ["mem1", "mem2", "mem3"];
const EXECUTIVE_ITEMS: [&str; 2] = ["exec1", "exec2"];

impl CognitiveDesign {
    pub fn config_toml(&self) -> String {
        let mut s = String::from(
            r#"levels = ["timepoint", "subject"]

[[family_groups]]
id = "memory"
family = "binomial"

[[family_groups]]
id = "executive"
family = "gaussian"

[[dispersion_groups]]
id = "memory"

[[dispersion_groups]]
id = "executive"

[[latent]]
name = "mem_tp"
level = "timepoint"

[[latent]]
name = "exec_tp"
level = "timepoint"

[[latent]]
name = "mem_subj"
level = "subject"

[[latent]]
name = "exec_subj"
level = "subject"

[[covariance]]
level = "timepoint"
structure = "diagonal"

[[covariance]]
level = "subject"
structure = "unstructured"

[[loading_parameters]]
name = "one"
fixed = 1.0
"#,
        );
        for name in ["lm2", "lm3", "le2"] {
            s.push_str(&format!("\n[[loading_parameters]]\nname = \"{name}\"\ninit = 1.0\n"));
        }
        for (item, param) in MEMORY_ITEMS.iter().zip(["one", "lm2", "lm3"]) {
            s.push_str(&format!("\n[[loadings]]\nlatent = \"mem_tp\"\nitem = \"{item}\"\nparameter = \"{param}\"\n"));
        }
        for (item, param) in EXECUTIVE_ITEMS.iter().zip(["one", "le2"]) {
            s.push_str(&format!("\n[[loadings]]\nlatent = \"exec_tp\"\nitem = \"{item}\"\nparameter = \"{param}\"\n"));
        }
        for (t, src) in [("mem_tp", "mem_subj"), ("exec_tp", "exec_subj")] {
            s.push_str(&format!("\n[[structural]]\ntarget = \"{t}\"\nsource = \"{src}\"\nfixed = 1.0\n"));
        }
        for (name, target) in [("f_mem", "mem_tp"), ("f_exec", "exec_tp")] {
            s.push_str(&format!(
                "\n[[smooths]]\nname = \"{name}\"\ncovariate = \"age\"\nk = {}\ntarget = \"{target}\"\n",
                self.k
            ));
        }
        for item in MEMORY_ITEMS.iter().chain(&EXECUTIVE_ITEMS) {
            s.push_str(&format!("\n[[fixed_effects]]\nname = \"{item}\"\nitems = [\"{item}\"]\n"));
        }
        s
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_toml_str(&self.config_toml())
    }

    /// Design structure with placeholder responses.
    pub fn structure(&self, seed: u64) -> Table {
        let mut rng = replicate_rng(seed, 0);
        let mut t = TableBuilder::new(2, true, &["age"]);
        for subj in 1..=self.subjects {
            let base: f64 = rng.random_range(-1.6..1.6);
            for tp in 1..=self.timepoints {
                let age = base + self.age_step * (tp - 1) as f64;
                for item in MEMORY_ITEMS {
                    t.push("memory", "memory", item, Some(self.trials), &[tp, subj], &[age]);
                }
                for item in EXECUTIVE_ITEMS {
                    t.push("executive", "executive", item, None, &[tp, subj], &[age]);
                }
            }
        }
        t.finish()
    }

    fn covariance(&self, a: &str, b: &str) -> f64 {
        let [pm, pe] = self.psi_subject;
        match (a, b) {
            ("mem_tp", "mem_tp") => self.psi_timepoint[0],
            ("exec_tp", "exec_tp") => self.psi_timepoint[1],
            ("mem_subj", "mem_subj") => pm,
            ("exec_subj", "exec_subj") => pe,
            ("mem_subj", "exec_subj") | ("exec_subj", "mem_subj") => self.subject_correlation * (pm * pe).sqrt(),
            _ => 0.0,
        }
    }

    pub fn truth(&self, model: &LoweredModel) -> Result<(Params<f64>, Vec<f64>)> {
        let beta: Vec<(&str, f64)> = MEMORY_ITEMS
            .iter()
            .zip(self.memory_intercepts)
            .chain(EXECUTIVE_ITEMS.iter().zip(self.executive_intercepts))
            .map(|(n, v)| (*n, v))
            .collect();
        let loadings = [
            ("lm2", self.memory_loadings[1] / self.memory_loadings[0]),
            ("lm3", self.memory_loadings[2] / self.memory_loadings[0]),
            ("le2", self.executive_loadings[1] / self.executive_loadings[0]),
        ];
        let p = params_from_truth(model, &beta, &loadings, &[("executive", self.phi_executive)], &|a, b| {
            self.covariance(a, b)
        })?;
        let f_mem = smooth_index(model, "f_mem")?;
        let f_exec = smooth_index(model, "f_exec")?;
        let offset = smooth_offset(model, &p, &[(f_mem, &memory_curve), (f_exec, &executive_curve)]);
        Ok((p, offset))
    }

    /// Structure drawn from stream 0 of `seed`, with one draw of the responses.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        build_scenario(self.spec()?, self.structure(seed), |m| self.truth(m), seed)
    }
}

/// Ses-like design: subject-level socioeconomic latent variable with
/// partially missing education and income items, predicting repeated
/// hippocampal volume measurements with an age-dependent loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SesDesign {
    pub subjects: usize,
    pub max_scans: usize,
    /// Standardized age increment between consecutive scans.
    pub scan_step: f64,
    /// Subjects with baseline age below this value report parental items.
    pub child_age: f64,
    pub p_education: f64,
    /// Probability of income items given education items.
    pub p_income_given_education: f64,
    pub income_loading: f64,
    pub lambda7: f64,
    pub lambda8: f64,
    pub psi_ses: f64,
    pub psi_hippocampus: f64,
    pub phi_hippocampus: f64,
    pub phi_education: f64,
    pub phi_income: f64,
    pub education_intercepts: [f64; 3],
    pub income_intercepts: [f64; 3],
    pub hippocampus_intercept: f64,
    pub k: usize,
}

impl Default for SesDesign {
    fn default() -> Self {
        SesDesign {
            subjects: 200,
            max_scans: 8,
            scan_step: 0.1,
            child_age: -1.0,
            p_education: 0.87,
            p_income_given_education: 0.345,
            income_loading: 0.8,
            lambda7: 0.15,
            lambda8: 0.0,
            psi_ses: 1.0,
            psi_hippocampus: 0.5,
            phi_hippocampus: 0.05,
            phi_education: 0.4,
            phi_income: 0.6,
            education_intercepts: [0.0, -0.2, 0.1],
            income_intercepts: [0.0, 0.3, -0.1],
            hippocampus_intercept: 0.0,
            k: 10,
        }
    }
}

const EDUCATION_ITEMS: [&str; 3] = ["edu_self", "edu_mother", "edu_father"];
const INCOME_ITEMS: [&str; 3] = ["inc_self", "inc_mother", "inc_father"];
/// Item carrying the hippocampal volume measurements.
pub const HIPPOCAMPUS: &str = "hippocampus";

/// True smooth age trajectory of hippocampal volume.
pub fn hippocampus_curve(a: f64) -> f64 {
    0.5 * (1.3 * a).sin() - 0.35 * a * a
}

impl SesDesign {
    /// Model with (`interaction = true`) or without the age-dependent loading `l8`.
    pub fn config_toml(&self, interaction: bool) -> String {
        let mut s = String::from(
            r#"levels = ["subject"]

[[family_groups]]
id = "gaussian"
family = "gaussian"

[[dispersion_groups]]
id = "hippocampus"

[[dispersion_groups]]
id = "education"

[[dispersion_groups]]
id = "income"

[[latent]]
name = "ses"
level = "subject"

[[latent]]
name = "hippo"
level = "subject"

[[covariance]]
level = "subject"
structure = "diagonal"

[[loading_parameters]]
name = "one"
fixed = 1.0

[[loading_parameters]]
name = "l_inc"
init = 1.0

[[loading_parameters]]
name = "l7"
init = 0.0
"#,
        );
        s.push_str(if interaction {
            "\n[[loading_parameters]]\nname = \"l8\"\ninit = 0.0\n"
        } else {
            "\n[[loading_parameters]]\nname = \"l8\"\nfixed = 0.0\n"
        });
        for item in EDUCATION_ITEMS {
            s.push_str(&format!("\n[[loadings]]\nlatent = \"ses\"\nitem = \"{item}\"\nparameter = \"one\"\n"));
        }
        for item in INCOME_ITEMS {
            s.push_str(&format!("\n[[loadings]]\nlatent = \"ses\"\nitem = \"{item}\"\nparameter = \"l_inc\"\n"));
        }
        s.push_str(&format!(
            "\n[[loadings]]\nlatent = \"ses\"\nitem = \"{HIPPOCAMPUS}\"\nparameter = \"l7\"\n\
             \n[[loadings]]\nlatent = \"ses\"\nitem = \"{HIPPOCAMPUS}\"\nparameter = \"l8\"\ncovariate = \"age\"\n\
             \n[[loadings]]\nlatent = \"hippo\"\nitem = \"{HIPPOCAMPUS}\"\nparameter = \"one\"\n"
        ));
        s.push_str(&format!(
            "\n[[smooths]]\nname = \"f_age\"\ncovariate = \"age\"\nk = {}\nitems = [\"{HIPPOCAMPUS}\"]\n",
            self.k
        ));
        for item in EDUCATION_ITEMS.iter().chain(&INCOME_ITEMS).chain(&[HIPPOCAMPUS]) {
            s.push_str(&format!("\n[[fixed_effects]]\nname = \"{item}\"\nitems = [\"{item}\"]\n"));
        }
        s
    }

    pub fn spec(&self, interaction: bool) -> Result<ModelSpec> {
        ModelSpec::from_toml_str(&self.config_toml(interaction))
    }

    /// Design structure with placeholder responses. Socioeconomic items are
    /// recorded once per subject; hippocampal volume at one to `max_scans`
    /// scans.
    pub fn structure(&self, seed: u64) -> Table {
        let mut rng = replicate_rng(seed, 0);
        let mut t = TableBuilder::new(1, false, &["age"]);
        for subj in 1..=self.subjects {
            let base: f64 = rng.random_range(-1.7..1.7);
            let child = base < self.child_age;
            let has_edu = rng.random_bool(self.p_education);
            let has_inc = has_edu && rng.random_bool(self.p_income_given_education);
            let scans = rng.random_range(1..=self.max_scans.max(1));
            let pick = |items: [&'static str; 3]| -> Vec<&'static str> {
                if child {
                    vec![items[1], items[2]]
                } else {
                    vec![items[0]]
                }
            };
            if has_edu {
                for item in pick(EDUCATION_ITEMS) {
                    t.push("gaussian", "education", item, None, &[subj], &[base]);
                }
            }
            if has_inc {
                for item in pick(INCOME_ITEMS) {
                    t.push("gaussian", "income", item, None, &[subj], &[base]);
                }
            }
            for j in 0..scans {
                let age = base + self.scan_step * j as f64;
                t.push("gaussian", HIPPOCAMPUS, HIPPOCAMPUS, None, &[subj], &[age]);
            }
        }
        t.finish()
    }

    pub fn truth(&self, model: &LoweredModel) -> Result<(Params<f64>, Vec<f64>)> {
        let mut beta: Vec<(&str, f64)> = EDUCATION_ITEMS
            .iter()
            .zip(self.education_intercepts)
            .chain(INCOME_ITEMS.iter().zip(self.income_intercepts))
            .map(|(n, v)| (*n, v))
            .collect();
        beta.push((HIPPOCAMPUS, self.hippocampus_intercept));
        let loadings = [("l_inc", self.income_loading), ("l7", self.lambda7), ("l8", self.lambda8)];
        let phi = [
            ("hippocampus", self.phi_hippocampus),
            ("education", self.phi_education),
            ("income", self.phi_income),
        ];
        let p = params_from_truth(model, &beta, &loadings, &phi, &|a, b| match (a, b) {
            ("ses", "ses") => self.psi_ses,
            ("hippo", "hippo") => self.psi_hippocampus,
            _ => 0.0,
        })?;
        let f = smooth_index(model, "f_age")?;
        let offset = smooth_offset(model, &p, &[(f, &hippocampus_curve)]);
        Ok((p, offset))
    }

    /// Structure drawn from stream 0 of `seed`, with one draw of the
    /// responses from the model with the interaction loading.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        build_scenario(self.spec(true)?, self.structure(seed), |m| self.truth(m), seed)
    }

    /// True expected hippocampal trajectory at latent value `eta`, excluding
    /// the intercept and centered as the fitted smooth is.
    pub fn trajectory(&self, model: &LoweredModel, eta: f64, grid: &[f64]) -> Result<Vec<f64>> {
        let s = &model.smooths[smooth_index(model, "f_age")?];
        let mean = s.x.iter().map(|&v| hippocampus_curve(v)).sum::<f64>() / s.x.len() as f64;
        Ok(grid
            .iter()
            .map(|&a| hippocampus_curve(a) - mean + eta * (self.lambda7 + self.lambda8 * a))
            .collect())
    }
}

/// Wilson score interval for a binomial proportion at 95% confidence.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lower = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let upper = if successes >= trials { 1.0 } else { (center + half).min(1.0) };
    (lower, upper)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Outcome of one bootstrap refit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub replicate: usize,
    pub stream: u64,
    pub converged: bool,
    pub message: String,
    /// Packed estimates; empty when the fit failed.
    pub estimates: Vec<f64>,
    pub se: Vec<Option<f64>>,
    pub boundary: Vec<bool>,
    pub edf: Vec<f64>,
    /// Root mean squared error of each smooth at its covariate values.
    pub smooth_rmse: Vec<f64>,
    pub loglik: f64,
}

/// Summary of one parameter over converged replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation of the estimates over replicates.
    pub bootstrap_se: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mcse: f64,
    pub mean_asymptotic_se: f64,
    pub boundary_hits: usize,
}

/// Summary of one smooth over converged replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothSummary {
    pub name: String,
    pub truth_edf: f64,
    pub mean_edf: f64,
    pub sd_edf: f64,
    pub min_edf: f64,
    pub max_edf: f64,
    pub mean_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub seed: u64,
    pub requested: usize,
    pub failures: usize,
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub replicates: Vec<ReplicateFit>,
    pub parameters: Vec<ParameterSummary>,
    pub smooths: Vec<SmoothSummary>,
}

impl BootstrapResult {
    pub fn converged(&self) -> impl Iterator<Item = &ReplicateFit> {
        self.replicates.iter().filter(|r| r.converged)
    }
}

/// Parametric bootstrap: `n_rep` datasets simulated from `fit` and refitted
/// from the generating parameters. Failed refits are recorded and excluded
/// from the summaries.
pub fn bootstrap(model: &LoweredModel, fit0: &FitResult, n_rep: usize, seed: u64, opts: &FitOptions) -> Result<BootstrapResult> {
    if !fit0.converged {
        return Err(Error::InvalidArgument("bootstrap requires a converged fit".into()));
    }
    let truth_curves: Vec<Vec<f64>> = (0..model.smooths.len())
        .map(|k| smooth_values(model, &fit0.params, &fit0.u, k, &model.smooths[k].x))
        .collect();
    let replicates: Vec<ReplicateFit> = (0..n_rep)
        .into_par_iter()
        .map(|rep| {
            let st = stream(0, rep);
            let mut rng = replicate_rng(seed, st);
            let y = draw_responses(model, &fit0.params, Some(&fit0.u), false, None, &mut rng);
            let m = model.with_responses(y);
            match fit(&m, Some(&fit0.x), opts) {
                Ok(f) => {
                    let smooth_rmse = (0..m.smooths.len())
                        .map(|k| {
                            let v = smooth_values(&m, &f.params, &f.u, k, &m.smooths[k].x);
                            let t = &truth_curves[k];
                            (v.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
                        })
                        .collect();
                    ReplicateFit {
                        replicate: rep,
                        stream: st,
                        converged: f.converged,
                        message: f.message,
                        estimates: f.x,
                        se: f.se,
                        boundary: f.boundary,
                        edf: f.edf,
                        smooth_rmse,
                        loglik: f.loglik,
                    }
                }
                Err(e) => ReplicateFit {
                    replicate: rep,
                    stream: st,
                    converged: false,
                    message: e.to_string(),
                    estimates: Vec::new(),
                    se: Vec::new(),
                    boundary: Vec::new(),
                    edf: Vec::new(),
                    smooth_rmse: Vec::new(),
                    loglik: f64::NAN,
                },
            }
        })
        .collect();
    let ok: Vec<&ReplicateFit> = replicates.iter().filter(|r| r.converged).collect();
    let failures = n_rep - ok.len();
    let parameters = fit0
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let est: Vec<f64> = ok.iter().map(|r| r.estimates[j]).collect();
            let ses: Vec<f64> = ok.iter().filter_map(|r| r.se[j]).collect();
            let m = mean(&est);
            let s = sd(&est);
            ParameterSummary {
                name: name.clone(),
                truth: fit0.x[j],
                mean: m,
                bias: m - fit0.x[j],
                bootstrap_se: s,
                mcse: s / (est.len() as f64).sqrt(),
                mean_asymptotic_se: if ses.is_empty() { f64::NAN } else { mean(&ses) },
                boundary_hits: ok.iter().filter(|r| r.boundary[j]).count(),
            }
        })
        .collect();
    let smooths = model
        .smooths
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let edf: Vec<f64> = ok.iter().map(|r| r.edf[k]).collect();
            let rmse: Vec<f64> = ok.iter().map(|r| r.smooth_rmse[k]).collect();
            SmoothSummary {
                name: s.name.clone(),
                truth_edf: fit0.edf[k],
                mean_edf: mean(&edf),
                sd_edf: sd(&edf),
                min_edf: edf.iter().copied().fold(f64::INFINITY, f64::min),
                max_edf: edf.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_rmse: mean(&rmse),
            }
        })
        .collect();
    Ok(BootstrapResult {
        seed,
        requested: n_rep,
        failures,
        names: fit0.names.clone(),
        truth: fit0.x.clone(),
        replicates,
        parameters,
        smooths,
    })
}

/// Zero-estimate proportion of a timepoint-level variance at one ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    /// Timepoint-level share of the total latent variance.
    pub ratio: f64,
    pub psi_timepoint: f64,
    pub psi_subject: f64,
    pub replicates: usize,
    pub failures: usize,
    pub zero_estimates: usize,
    pub proportion: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-replicate record of the boundary study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReplicate {
    pub ratio: f64,
    pub replicate: usize,
    pub converged: bool,
    pub psi_hat: f64,
    pub zero: bool,
}

/// Variance estimates at or below this share of the total variance count as zero.
pub const ZERO_VARIANCE_SHARE: f64 = 1e-4;

/// Proportion of replicates in which the timepoint-level variance of the
/// executive latent variable is estimated at zero, for each ratio of that
/// variance to the total executive latent variance.
pub fn variance_boundary_study(
    design: &CognitiveDesign,
    ratios: &[f64],
    n_rep: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<(Vec<BoundaryRow>, Vec<BoundaryReplicate>)> {
    let total = design.psi_timepoint[1] + design.psi_subject[1];
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (cell, &ratio) in ratios.iter().enumerate() {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("variance ratio {ratio} outside [0, 1]")));
        }
        let mut d = design.clone();
        d.psi_timepoint[1] = ratio * total;
        d.psi_subject[1] = (1.0 - ratio) * total;
        let sc = d.scenario(seed)?;
        let theta = sc
            .model
            .theta_names
            .iter()
            .position(|n| n == "theta[exec_tp]")
            .ok_or_else(|| Error::InvalidArgument("design lacks theta[exec_tp]".into()))?;
        // Start away from the boundary so that zero estimates are not an artifact.
        let mut start = sc.truth.clone();
        start.theta[theta] = start.theta[theta].max((0.5 * total / sc.truth.phi[0]).sqrt() * 0.5);
        let x0 = sc.model.pack(&start);
        let reps: Vec<BoundaryReplicate> = (0..n_rep)
            .into_par_iter()
            .map(|rep| {
                let m = sc.replicate(seed, stream(cell, rep));
                match fit(&m, Some(&x0), opts) {
                    Ok(f) if f.converged => {
                        let phi1 = m.phi1(&f.params);
                        let psi_hat = phi1 * f.params.theta[theta].powi(2);
                        BoundaryReplicate {
                            ratio,
                            replicate: rep,
                            converged: true,
                            psi_hat,
                            zero: psi_hat <= ZERO_VARIANCE_SHARE * total,
                        }
                    }
                    _ => BoundaryReplicate { ratio, replicate: rep, converged: false, psi_hat: f64::NAN, zero: false },
                }
            })
            .collect();
        let ok = reps.iter().filter(|r| r.converged).count();
        let zeros = reps.iter().filter(|r| r.zero).count();
        let (lower, upper) = wilson_interval(zeros, ok);
        rows.push(BoundaryRow {
            ratio,
            psi_timepoint: d.psi_timepoint[1],
            psi_subject: d.psi_subject[1],
            replicates: ok,
            failures: n_rep - ok,
            zero_estimates: zeros,
            proportion: if ok > 0 { zeros as f64 / ok as f64 } else { f64::NAN },
            lower,
            upper,
        });
        records.extend(reps);
    }
    Ok((rows, records))
}

/// Selection metrics of the interaction loading at one true value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub lambda8: f64,
    pub replicates: usize,
    pub failures: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub rejection_lower: f64,
    pub rejection_upper: f64,
    pub aic_selections: usize,
    pub aic_rate: f64,
    pub aic_lower: f64,
    pub aic_upper: f64,
    pub lambda8_median: f64,
    /// Monte Carlo standard error of the median estimate.
    pub lambda8_median_mcse: f64,
}

/// Per-replicate record of the power study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerReplicate {
    pub lambda8: f64,
    pub replicate: usize,
    pub converged: bool,
    pub loglik_without: f64,
    pub loglik_with: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub lambda8_hat: f64,
}

/// Likelihood-ratio test and AIC selection of the interaction loading `l8`,
/// for each true value in `grid`. The model without the interaction is
/// fitted first from the generating parameters; the model with it starts
/// from that fit with `l8 = 0`.
pub fn power_study(
    design: &SesDesign,
    grid: &[f64],
    n_rep: usize,
    seed: u64,
    alpha: f64,
    opts: &FitOptions,
) -> Result<(Vec<PowerRow>, Vec<PowerReplicate>)> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (cell, &lambda8) in grid.iter().enumerate() {
        let d = SesDesign { lambda8, ..design.clone() };
        let sc_e = d.scenario(seed)?;
        let sc_f = sc_e.with_spec(d.spec(false)?)?;
        let l8 = sc_e
            .model
            .free_index("l8")
            .ok_or_else(|| Error::InvalidArgument("design lacks a free l8 loading".into()))?;
        let x0 = sc_f.model.pack(&sc_e.truth);
        let reps: Vec<PowerReplicate> = (0..n_rep)
            .into_par_iter()
            .map(|rep| {
                let y = sc_e.draw(seed, stream(cell, rep));
                let mf = sc_f.model.with_responses(y.clone());
                let me = sc_e.model.with_responses(y);
                let failed = PowerReplicate {
                    lambda8,
                    replicate: rep,
                    converged: false,
                    loglik_without: f64::NAN,
                    loglik_with: f64::NAN,
                    statistic: f64::NAN,
                    p_value: f64::NAN,
                    lambda8_hat: f64::NAN,
                };
                let Ok(ff) = fit(&mf, Some(&x0), opts) else { return failed };
                let Ok(fe) = fit(&me, Some(&me.pack(&ff.params)), opts) else { return failed };
                if !(ff.converged && fe.converged) {
                    return failed;
                }
                let Ok((statistic, p_value)) = lrt_statistic(ff.loglik, fe.loglik, 1) else { return failed };
                PowerReplicate {
                    lambda8,
                    replicate: rep,
                    converged: true,
                    loglik_without: ff.loglik,
                    loglik_with: fe.loglik,
                    statistic,
                    p_value,
                    lambda8_hat: fe.x[l8],
                }
            })
            .collect();
        let ok: Vec<&PowerReplicate> = reps.iter().filter(|r| r.converged).collect();
        let n = ok.len();
        let rejections = ok.iter().filter(|r| r.p_value < alpha).count();
        // AIC prefers the larger model when 2 Δℓ exceeds twice the extra parameter.
        let aic = ok.iter().filter(|r| r.statistic > 2.0).count();
        let (rl, ru) = wilson_interval(rejections, n);
        let (al, au) = wilson_interval(aic, n);
        let hats: Vec<f64> = ok.iter().map(|r| r.lambda8_hat).collect();
        rows.push(PowerRow {
            lambda8,
            replicates: n,
            failures: n_rep - n,
            rejections,
            rejection_rate: rejections as f64 / n as f64,
            rejection_lower: rl,
            rejection_upper: ru,
            aic_selections: aic,
            aic_rate: aic as f64 / n as f64,
            aic_lower: al,
            aic_upper: au,
            lambda8_median: median(&hats),
            lambda8_median_mcse: (std::f64::consts::PI / 2.0).sqrt() * sd(&hats) / (n as f64).sqrt(),
        });
        records.extend(reps);
    }
    Ok((rows, records))
}

/// Coverage of trajectory bands at one latent offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    /// Offset in units of the true latent standard deviation.
    pub multiple: f64,
    pub eta: f64,
    pub replicates: usize,
    pub failures: usize,
    /// Mean over replicates of the share of grid points inside the pointwise band.
    pub pointwise: f64,
    /// Share of replicates whose simultaneous band contains the whole curve.
    pub simultaneous: f64,
    pub mean_critical: f64,
}

/// Coverage of pointwise and simultaneous bands for the hippocampal
/// trajectory at latent offsets `multiples × √ψ_ses`, with the interaction
/// model fitted to each replicate.
#[allow(clippy::too_many_arguments)]
pub fn coverage_study(
    design: &SesDesign,
    multiples: &[f64],
    grid_points: usize,
    n_rep: usize,
    seed: u64,
    alpha: f64,
    n_sim: usize,
    opts: &FitOptions,
) -> Result<Vec<CoverageRow>> {
    let sc = design.scenario(seed)?;
    let smooth = smooth_index(&sc.model, "f_age")?;
    let latent = sc
        .model
        .latent_names
        .iter()
        .position(|n| n == "ses")
        .ok_or_else(|| Error::InvalidArgument("design lacks the ses latent".into()))?;
    let s = &sc.model.smooths[smooth];
    let lo = s.x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid: Vec<f64> = (0..grid_points)
        .map(|g| lo + (hi - lo) * g as f64 / (grid_points.max(2) - 1) as f64)
        .collect();
    let offsets: Vec<f64> = multiples.iter().map(|k| k * design.psi_ses.sqrt()).collect();
    let truths: Vec<Vec<f64>> = offsets
        .iter()
        .map(|&eta| design.trajectory(&sc.model, eta, &grid))
        .collect::<Result<_>>()?;
    let x0 = sc.model.pack(&sc.truth);
    // Per replicate and offset: (pointwise share, simultaneous hit, critical value).
    let reps: Vec<Option<Vec<(f64, bool, f64)>>> = (0..n_rep)
        .into_par_iter()
        .map(|rep| {
            let m = sc.replicate(seed, stream(0, rep));
            let f = fit(&m, Some(&x0), opts).ok().filter(|f| f.converged && f.vcov.is_some())?;
            let bands = latent_trajectory_bands(&m, &f, smooth, latent, &offsets, &grid, alpha, n_sim, seed ^ rep as u64).ok()?;
            Some(
                bands
                    .iter()
                    .zip(&truths)
                    .map(|(b, t)| {
                        let inside_pt = t
                            .iter()
                            .enumerate()
                            .filter(|&(g, v)| *v >= b.lo_pt[g] && *v <= b.hi_pt[g])
                            .count();
                        let inside_sim = t.iter().enumerate().all(|(g, v)| *v >= b.lo_sim[g] && *v <= b.hi_sim[g]);
                        (inside_pt as f64 / t.len() as f64, inside_sim, b.critical)
                    })
                    .collect(),
            )
        })
        .collect();
    let ok: Vec<&Vec<(f64, bool, f64)>> = reps.iter().flatten().collect();
    let n = ok.len();
    Ok(multiples
        .iter()
        .zip(&offsets)
        .enumerate()
        .map(|(o, (&k, &eta))| CoverageRow {
            multiple: k,
            eta,
            replicates: n,
            failures: n_rep - n,
            pointwise: ok.iter().map(|r| r[o].0).sum::<f64>() / n as f64,
            simultaneous: ok.iter().filter(|r| r[o].1).count() as f64 / n as f64,
            mean_critical: ok.iter().map(|r| r[o].2).sum::<f64>() / n as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_model(family: &str, rows: usize) -> LoweredModel {
        let text = format!(
            "[[family_groups]]\nid = \"g\"\nfamily = \"{family}\"\n\n[[dispersion_groups]]\nid = \"g\"\n\n\
             [[fixed_effects]]\nname = \"mu\"\n"
        );
        let spec = ModelSpec::from_toml_str(&text).unwrap();
        let mut t = TableBuilder::new(0, family == "binomial", &[]);
        for _ in 0..rows {
            t.push("g", "g", "y", (family == "binomial").then_some(16), &[], &[]);
        }
        let data = Dataset::from_table(&t.finish(), &spec).unwrap();
        LoweredModel::new(&spec, &data).unwrap()
    }

    #[test]
    fn draws_are_deterministic_per_stream() {
        let d = CognitiveDesign { subjects: 20, ..Default::default() };
        let sc = d.scenario(5).unwrap();
        assert_eq!(sc.draw(5, 3), sc.draw(5, 3));
        assert_ne!(sc.draw(5, 3), sc.draw(5, 4));
        let again = d.scenario(5).unwrap();
        assert_eq!(sc.data, again.data);
    }

    #[test]
    fn gaussian_noise_is_unbiased() {
        let m = intercept_model("gaussian", 1000);
        let mut p = m.template.clone();
        p.beta[0] = 1.5;
        p.phi[0] = 2.0;
        let mut rng = replicate_rng(1, 1);
        let mut sum = 0.0;
        let mut count: f64 = 0.0;
        for _ in 0..100 {
            for y in draw_responses(&m, &p, None, false, None, &mut rng) {
                sum += y - 1.5;
                count += 1.0;
            }
        }
        let se = (2.0 / count).sqrt();
        assert!((sum / count).abs() <= 3.0 * se, "mean residual {}", sum / count);
    }

    #[test]
    fn binomial_mean_at_zero_predictor() {
        let m = intercept_model("binomial", 1000);
        let p = m.template.clone();
        let mut rng = replicate_rng(2, 1);
        let draws: Vec<f64> = (0..100).flat_map(|_| draw_responses(&m, &p, None, false, None, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = (4.0 / draws.len() as f64).sqrt();
        assert!((mean - 8.0).abs() <= 3.0 * se, "mean {mean}");
        assert!(draws.iter().all(|&y| (0.0..=16.0).contains(&y) && y.fract() == 0.0));
    }

    #[test]
    fn simulate_from_fit_keeps_structure() {
        let d = CognitiveDesign { subjects: 30, ..Default::default() };
        let sc = d.scenario(9).unwrap();
        let f = fit(&sc.model, Some(&sc.model.pack(&sc.truth)), &FitOptions { hessian: false, ..Default::default() }).unwrap();
        let a = simulate_from_fit(&sc.model, &sc.data, &f, 4, SmoothTruth::PointEstimate).unwrap();
        let b = simulate_from_fit(&sc.model, &sc.data, &f, 4, SmoothTruth::PointEstimate).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n(), sc.data.n());
        for (ra, rs) in a.rows.iter().zip(&sc.data.rows) {
            assert_eq!(ra.covariates, rs.covariates);
            assert_eq!(ra.level_ids, rs.level_ids);
            assert_eq!(ra.item, rs.item);
        }
        assert_ne!(a.rows.iter().map(|r| r.response).collect::<Vec<_>>(), sc.model.y);
    }

    #[test]
    fn ses_structure_follows_the_design() {
        let d = SesDesign { subjects: 400, ..Default::default() };
        let sc = d.scenario(3).unwrap();
        let data = &sc.data;
        let hippo = data.item_index(HIPPOCAMPUS).unwrap();
        let mut scans = vec![0usize; data.level_units[0].len()];
        let mut ses_rows = vec![Vec::new(); scans.len()];
        for r in &data.rows {
            if r.item == hippo {
                scans[r.level_ids[0]] += 1;
            } else {
                ses_rows[r.level_ids[0]].push(r.item);
            }
        }
        assert!(scans.iter().all(|&s| (1..=d.max_scans).contains(&s)));
        // Socioeconomic items appear at most once per subject.
        for items in &ses_rows {
            let mut sorted = items.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), items.len());
        }
        let none = ses_rows.iter().filter(|v| v.is_empty()).count() as f64 / scans.len() as f64;
        assert!((none - 0.13).abs() < 0.06, "share without socioeconomic items {none}");
        // Dispersion groups: hippocampus first, so the smoothing variance is relative to it.
        assert_eq!(data.dispersion_groups[0], "hippocampus");
        assert!(sc.model.free_index("l8").is_some());
        let f_model = sc.with_spec(d.spec(false).unwrap()).unwrap();
        assert!(f_model.model.free_index("l8").is_none());
        assert_eq!(f_model.model.n_free() + 1, sc.model.n_free());
    }

    #[test]
    fn truth_factor_reproduces_covariance() {
        let d = CognitiveDesign::default();
        let sc = d.scenario(1).unwrap();
        let block = sc.model.levels.iter().position(|b| b.dim() == 2 && b.level == 1).unwrap();
        let psi = sc.model.level_covariance(block, &sc.truth);
        let corr = d.subject_correlation * (d.psi_subject[0] * d.psi_subject[1]).sqrt();
        assert!((psi[(0, 0)] - d.psi_subject[0]).abs() < 1e-12);
        assert!((psi[(1, 0)] - corr).abs() < 1e-12);
        assert!((psi[(1, 1)] - d.psi_subject[1]).abs() < 1e-12);
    }

    #[test]
    fn smooth_offset_is_centered() {
        let d = SesDesign { subjects: 50, ..Default::default() };
        let sc = d.scenario(2).unwrap();
        let s = &sc.model.smooths[0];
        let total: f64 = s.row_points.iter().map(|&(i, _)| sc.offset[i]).sum();
        assert!(total.abs() < 1e-9);
    }

    #[test]
    fn wilson_interval_brackets_the_proportion() {
        let (lo, hi) = wilson_interval(25, 500);
        assert!(lo < 0.05 && hi > 0.05);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
        let (lo, hi) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
        assert!(hi < 0.05);
    }
}
