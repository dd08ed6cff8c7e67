//! Lowering of a model and dataset to mixed-model form.
//!
//! Every smooth is split into unpenalized fixed effects and a block of
//! penalized coefficients that join the latent disturbances as one more
//! level of random effects. The linear predictor then reads
//! `ν = X(λ, B) β + Z(λ, B) Λ(θ) u` with `u ~ N(0, φ₁ I)`.
//!
//! Loadings and structural coefficients enter through the reduced form
//! `η = (I − B)⁻¹ (Γ w + ζ)`: each row `i` carries, for every latent variable
//! `k`, an effective multiplier `eff_k(i) = Σ_m λ_m(i) [(I − B)⁻¹]_{mk}`. The
//! structural nonzeros of `X` and `Z` are stored at reference values together
//! with the index of the multiplier they are scaled by, so their pattern never
//! depends on parameter values.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::families::{ln_binomial_coefficient, Family};
use crate::model_spec::{CovarianceStructure, ModelSpec, ParamValue, TermTarget};
use crate::sparse::{CscMatrix, SymbolicFactorization};
use crate::splines::{ConstrainedSmooth, CubicRegressionSpline, MixedSmooth};

/// Lower bound for dispersion parameters.
pub const MIN_DISPERSION: f64 = 1e-10;

const NONE: u32 = u32::MAX;

/// Kind of a model parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Fixed-effect coefficient.
    Beta,
    /// Entry of the relative covariance factor.
    Theta,
    /// Factor loading.
    Loading,
    /// Structural regression coefficient between latent variables.
    Structural,
    /// Dispersion parameter of a dispersion group.
    Dispersion,
}

/// A free (estimated) parameter in the packed vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    /// Index within its block of [`Params`].
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

/// All model parameters, fixed and free, grouped by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<S> {
    pub beta: Vec<S>,
    pub theta: Vec<S>,
    pub loadings: Vec<S>,
    pub structural: Vec<S>,
    pub phi: Vec<S>,
}

impl<S: Copy> Params<S> {
    fn block(&self, kind: ParamKind) -> &[S] {
        match kind {
            ParamKind::Beta => &self.beta,
            ParamKind::Theta => &self.theta,
            ParamKind::Loading => &self.loadings,
            ParamKind::Structural => &self.structural,
            ParamKind::Dispersion => &self.phi,
        }
    }

    fn block_mut(&mut self, kind: ParamKind) -> &mut Vec<S> {
        match kind {
            ParamKind::Beta => &mut self.beta,
            ParamKind::Theta => &mut self.theta,
            ParamKind::Loading => &mut self.loadings,
            ParamKind::Structural => &mut self.structural,
            ParamKind::Dispersion => &mut self.phi,
        }
    }

    pub fn get(&self, kind: ParamKind, index: usize) -> S {
        self.block(kind)[index]
    }

    pub fn set(&mut self, kind: ParamKind, index: usize, v: S) {
        self.block_mut(kind)[index] = v;
    }
}

impl Params<f64> {
    pub fn lift<S: Scalar>(&self) -> Params<S> {
        let f = |v: &Vec<f64>| v.iter().map(|&x| S::from_f64(x)).collect();
        Params {
            beta: f(&self.beta),
            theta: f(&self.theta),
            loadings: f(&self.loadings),
            structural: f(&self.structural),
            phi: f(&self.phi),
        }
    }
}

impl<S: Scalar> Params<S> {
    pub fn values(&self) -> Params<f64> {
        let f = |v: &Vec<S>| v.iter().map(|x| x.value()).collect();
        Params {
            beta: f(&self.beta),
            theta: f(&self.theta),
            loadings: f(&self.loadings),
            structural: f(&self.structural),
            phi: f(&self.phi),
        }
    }
}

/// What an entry of `θ` parameterizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThetaTarget {
    /// Entry `(row, col)` of the factor block of a level, indexed by latent variable.
    Level { level: usize, row: usize, col: usize },
    /// Scale of the identity factor of a smooth's penalized block.
    Smooth(usize),
}

/// Random-effect block of one level of latent variables.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelBlock {
    pub level: usize,
    /// Latent variables of the level in declaration order.
    pub latents: Vec<usize>,
    pub n_units: usize,
    pub u_offset: usize,
    pub structure: CovarianceStructure,
    /// `θ` index of factor entry `(a, b)`, `b ≤ a`, by position within the level.
    pub theta_index: Vec<Vec<Option<usize>>>,
}

impl LevelBlock {
    pub fn dim(&self) -> usize {
        self.latents.len()
    }

    /// Column of `u` for a unit and a latent position within the level.
    pub fn column(&self, unit: usize, pos: usize) -> usize {
        self.u_offset + unit * self.latents.len() + pos
    }

    /// Dense factor block `Λ_l` for the given `θ`.
    pub fn factor(&self, theta: &[f64]) -> DMatrix<f64> {
        let m = self.dim();
        let mut f = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                if let Some(t) = self.theta_index[a][b] {
                    f[(a, b)] = theta[t];
                }
            }
        }
        f
    }
}

/// A lowered smooth term.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothTerm {
    pub name: String,
    pub covariate: String,
    pub target: TermTarget,
    pub mixed: MixedSmooth,
    /// Offset of the unpenalized coefficients in `β`.
    pub beta_offset: usize,
    /// Offset of the penalized coefficients in `u`.
    pub u_offset: usize,
    /// Index of the smooth's scale in `θ`.
    pub theta: usize,
    /// Covariate values the basis and constraint were built from (one per
    /// included row, or one per unit for latent-targeting smooths).
    pub x: Vec<f64>,
    /// Rows the smooth enters, each with its index into `x`.
    pub row_points: Vec<(usize, usize)>,
}

impl SmoothTerm {
    pub fn n_fixed(&self) -> usize {
        self.mixed.n_fixed
    }

    pub fn n_random(&self) -> usize {
        self.mixed.n_random()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Load {
    latent: u32,
    param: u32,
    mult: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct XEntry {
    col: u32,
    latent: u32,
    base: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Contribution {
    entry: u32,
    latent: u32,
    theta: u32,
    base: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ZEntry {
    col: u32,
    latent: u32,
    base: f64,
}

/// Values of `X β` and of the nonzeros of `A = Z Λ` at one parameter value.
#[derive(Clone, Debug)]
pub struct Design<S> {
    /// Fixed part of the linear predictor, `X(λ, B) β`.
    pub fixed: Vec<S>,
    /// Nonzeros of `A = Z(λ, B) Λ(θ)`, row by row.
    pub a: Vec<S>,
}

/// Model in mixed form with its sparsity structure analysed.
#[derive(Clone, Debug)]
pub struct LoweredModel {
    pub n: usize,
    /// Number of random effects (length of `u`).
    pub r: usize,
    /// Number of fixed effects (length of `β`).
    pub p: usize,
    pub y: Vec<f64>,
    pub trials: Vec<f64>,
    pub family: Vec<Family>,
    /// Dispersion group of each row.
    pub group: Vec<usize>,
    pub group_names: Vec<String>,
    pub group_family: Vec<Family>,
    /// Per dispersion group: row count, `Σ y²` and `Σ ln C(m, y)`.
    pub normalizer_sums: Vec<(f64, f64, f64)>,
    pub n_latent: usize,
    pub latent_names: Vec<String>,
    pub levels: Vec<LevelBlock>,
    pub smooths: Vec<SmoothTerm>,
    pub beta_names: Vec<String>,
    pub theta_targets: Vec<ThetaTarget>,
    pub theta_names: Vec<String>,
    pub loading_names: Vec<String>,
    /// Loadings as (latent, item, loading parameter, covariate multiplier).
    pub loading_terms: Vec<(usize, String, usize, Option<String>)>,
    /// Structural coefficients as (target, source).
    pub structural: Vec<(usize, usize)>,
    pub structural_names: Vec<String>,
    /// Parameter values used for fixed parameters and as default starts.
    pub template: Params<f64>,
    /// Layout of the packed vector of free parameters.
    pub free: Vec<ParamInfo>,
    /// For each latent `m`, the latents `k` with `[(I − B)⁻¹]_{mk}` structurally nonzero.
    reach: Vec<Vec<usize>>,
    loads: Vec<Load>,
    load_ptr: Vec<usize>,
    x_entries: Vec<XEntry>,
    x_ptr: Vec<usize>,
    z_entries: Vec<ZEntry>,
    z_ptr: Vec<usize>,
    /// Column of each nonzero of `A`.
    a_cols: Vec<u32>,
    a_ptr: Vec<usize>,
    contribs: Vec<Contribution>,
    c_ptr: Vec<usize>,
    /// Slot of each pair of nonzeros `(e1 ≤ e2)` of every row of `A`.
    pair_slots: Vec<u32>,
    pair_ptr: Vec<usize>,
    /// Positions (upper, lower) in the values of `K` of each slot.
    slot_pos: Vec<(u32, u32)>,
    /// Pattern of `K = Aᵀ V A + I / φ₁` with both triangles stored.
    k_pattern: CscMatrix<f64>,
    pub symbolic: SymbolicFactorization,
}

fn ensure_constant_within_units(
    data: &Dataset,
    level: usize,
    cov: usize,
    what: &str,
) -> Result<Vec<f64>> {
    let n_units = data.level_units[level].len();
    let mut values = vec![f64::NAN; n_units];
    for row in &data.rows {
        let u = row.level_ids[level];
        let v = row.covariates[cov];
        if values[u].is_nan() {
            values[u] = v;
        } else if (values[u] - v).abs() > 1e-9 * (1.0 + v.abs()) {
            return Err(Error::Incompatible(format!(
                "{what} uses covariate `{}` which varies within unit `{}` (line {})",
                data.covariate_names[cov], data.level_units[level][u], row.source_line
            )));
        }
    }
    if let Some(u) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::Incompatible(format!(
            "{what}: covariate `{}` is missing for unit `{}`",
            data.covariate_names[cov], data.level_units[level][u]
        )));
    }
    Ok(values)
}

impl LoweredModel {
    /// Lower a validated model specification on a dataset.
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        let n = data.n();
        let n_latent = spec.n_latent();
        if n_latent > 64 {
            return Err(Error::InvalidArgument("at most 64 latent variables are supported".into()));
        }
        let n_levels = spec.n_levels();
        if data.level_units.len() != n_levels {
            return Err(Error::Incompatible(format!(
                "dataset has {} levels, model declares {n_levels}",
                data.level_units.len()
            )));
        }
        let item_name = |i: usize| data.items[data.rows[i].item].as_str();
        let check_items = |section: &str, items: &Option<Vec<String>>| -> Result<()> {
            if let Some(list) = items {
                for it in list {
                    if data.item_index(it).is_none() {
                        return Err(Error::Incompatible(format!("{section} refers to item `{it}` absent from the data")));
                    }
                }
            }
            Ok(())
        };
        let cov_index = |name: &str| {
            data.covariate_index(name)
                .ok_or_else(|| Error::Incompatible(format!("covariate `{name}` is absent from the data")))
        };

        // Dispersion groups.
        let n_groups = spec.config.dispersion_groups.len();
        let mut group_family: Vec<Option<Family>> = vec![None; n_groups];
        for row in &data.rows {
            match group_family[row.dispersion_group] {
                None => group_family[row.dispersion_group] = Some(row.family),
                Some(f) if f != row.family => {
                    return Err(Error::Incompatible(format!(
                        "dispersion group `{}` mixes {} and {} rows",
                        data.dispersion_groups[row.dispersion_group],
                        f.name(),
                        row.family.name()
                    )))
                }
                _ => {}
            }
        }
        let group_family: Vec<Family> = group_family
            .iter()
            .enumerate()
            .map(|(g, f)| {
                f.ok_or_else(|| {
                    Error::Incompatible(format!("dispersion group `{}` has no rows", data.dispersion_groups[g]))
                })
            })
            .collect::<Result<_>>()?;

        // Reduced-form reachability: k reaches m when η_m depends on ζ_k.
        let mut reach_mat = vec![vec![false; n_latent]; n_latent];
        for (m, row) in reach_mat.iter_mut().enumerate() {
            row[m] = true;
        }
        loop {
            let mut changed = false;
            for &(t, s, _) in &spec.structural {
                for k in 0..n_latent {
                    if reach_mat[s][k] && !reach_mat[t][k] {
                        reach_mat[t][k] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let reach: Vec<Vec<usize>> = reach_mat
            .iter()
            .map(|row| (0..n_latent).filter(|&k| row[k]).collect())
            .collect();

        // Loadings per row and active latent masks.
        for (_, item, _, _) in &spec.loadings {
            if data.item_index(item).is_none() {
                return Err(Error::Incompatible(format!("loading refers to item `{item}` absent from the data")));
            }
        }
        let mut loads = Vec::new();
        let mut load_ptr = vec![0usize];
        let mut active = vec![0u64; n];
        for (i, row) in data.rows.iter().enumerate() {
            for (m, item, param, cov) in &spec.loadings {
                if item != item_name(i) {
                    continue;
                }
                let mult = match cov {
                    Some(c) => row.covariates[cov_index(c)?],
                    None => 1.0,
                };
                loads.push(Load {
                    latent: *m as u32,
                    param: *param as u32,
                    mult,
                });
                for &k in &reach[*m] {
                    active[i] |= 1u64 << k;
                }
            }
            load_ptr.push(loads.len());
        }
        let is_active = |i: usize, k: usize| active[i] & (1u64 << k) != 0;

        // Random-effect layout: level blocks, then smooth blocks.
        let mut theta_targets = Vec::new();
        let mut theta_names = Vec::new();
        let mut theta_init = Vec::new();
        let mut levels = Vec::new();
        let mut r = 0usize;
        for l in 0..n_levels {
            let latents = spec.latents_by_level[l].clone();
            if latents.is_empty() {
                continue;
            }
            let m = latents.len();
            let mut theta_index = vec![vec![None; m]; m];
            for a in 0..m {
                let cols: Vec<usize> = match spec.covariance[l] {
                    CovarianceStructure::Diagonal => vec![a],
                    CovarianceStructure::Unstructured => (0..=a).collect(),
                };
                for b in cols {
                    theta_index[a][b] = Some(theta_targets.len());
                    theta_targets.push(ThetaTarget::Level { level: l, row: latents[a], col: latents[b] });
                    let na = &spec.config.latent[latents[a]].name;
                    let nb = &spec.config.latent[latents[b]].name;
                    theta_names.push(if a == b { format!("theta[{na}]") } else { format!("theta[{na},{nb}]") });
                    theta_init.push(if a == b { 1.0 } else { 0.0 });
                }
            }
            let n_units = data.level_units[l].len();
            levels.push(LevelBlock {
                level: l,
                latents,
                n_units,
                u_offset: r,
                structure: spec.covariance[l],
                theta_index,
            });
            r += n_units * m;
        }

        // Fixed effects named in the configuration.
        let mut beta_names: Vec<String> = Vec::new();
        let mut x_rows: Vec<Vec<XEntry>> = vec![Vec::new(); n];
        for (f, target) in spec.config.fixed_effects.iter().zip(&spec.fixed_targets) {
            let col = beta_names.len() as u32;
            beta_names.push(f.name.clone());
            let cov = f.covariate.as_deref().map(cov_index).transpose()?;
            match target {
                TermTarget::Predictor { items } => {
                    check_items("fixed effect", items)?;
                    for (i, row) in data.rows.iter().enumerate() {
                        if items.as_ref().is_some_and(|list| !list.iter().any(|it| it == item_name(i))) {
                            continue;
                        }
                        let base = cov.map_or(1.0, |c| row.covariates[c]);
                        if base != 0.0 {
                            x_rows[i].push(XEntry { col, latent: NONE, base });
                        }
                    }
                }
                TermTarget::Latent(k) => {
                    if let Some(c) = cov {
                        ensure_constant_within_units(data, spec.latent_level[*k], c, &format!("fixed effect `{}`", f.name))?;
                    }
                    for (i, row) in data.rows.iter().enumerate() {
                        if !is_active(i, *k) {
                            continue;
                        }
                        let base = cov.map_or(1.0, |c| row.covariates[c]);
                        if base != 0.0 {
                            x_rows[i].push(XEntry { col, latent: *k as u32, base });
                        }
                    }
                }
            }
        }

        // Per-row contributions to A = Z Λ and entries of Z.
        let mut row_contribs: Vec<Vec<(u32, Contribution)>> = vec![Vec::new(); n];
        let mut z_rows: Vec<Vec<ZEntry>> = vec![Vec::new(); n];
        for block in &levels {
            let m = block.dim();
            for (i, row) in data.rows.iter().enumerate() {
                let unit = row.level_ids[block.level];
                for a in 0..m {
                    let k = block.latents[a];
                    if !is_active(i, k) {
                        continue;
                    }
                    z_rows[i].push(ZEntry {
                        col: block.column(unit, a) as u32,
                        latent: k as u32,
                        base: 1.0,
                    });
                    for b in 0..=a {
                        if let Some(t) = block.theta_index[a][b] {
                            row_contribs[i].push((
                                block.column(unit, b) as u32,
                                Contribution { entry: 0, latent: k as u32, theta: t as u32, base: 1.0 },
                            ));
                        }
                    }
                }
            }
        }

        // Smooth terms.
        let mut smooths = Vec::new();
        for (s, target) in spec.config.smooths.iter().zip(&spec.smooth_targets) {
            let cov = cov_index(&s.covariate)?;
            let (x, row_x): (Vec<f64>, Vec<Option<(f64, u32, usize)>>) = match target {
                TermTarget::Predictor { items } => {
                    check_items("smooth", items)?;
                    let mut x = Vec::new();
                    let mut row_x = vec![None; n];
                    for (i, row) in data.rows.iter().enumerate() {
                        if items.as_ref().is_some_and(|list| !list.iter().any(|it| it == item_name(i))) {
                            continue;
                        }
                        let v = row.covariates[cov];
                        row_x[i] = Some((v, NONE, x.len()));
                        x.push(v);
                    }
                    (x, row_x)
                }
                TermTarget::Latent(k) => {
                    let level = spec.latent_level[*k];
                    let unit_x = ensure_constant_within_units(data, level, cov, &format!("smooth `{}`", s.name))?;
                    let row_x = data
                        .rows
                        .iter()
                        .enumerate()
                        .map(|(i, row)| {
                            let unit = row.level_ids[level];
                            is_active(i, *k).then(|| (unit_x[unit], *k as u32, unit))
                        })
                        .collect();
                    (unit_x, row_x)
                }
            };
            if x.is_empty() {
                return Err(Error::Incompatible(format!("smooth `{}` applies to no rows", s.name)));
            }
            let basis = CubicRegressionSpline::new(&x, s.k)
                .map_err(|e| Error::Incompatible(format!("smooth `{}`: {e}", s.name)))?;
            let constrained = if s.constrained {
                ConstrainedSmooth::new(basis, &x)?
            } else {
                ConstrainedSmooth::unconstrained(basis)
            };
            let mixed = constrained.to_mixed()?;
            let beta_offset = beta_names.len();
            for j in 0..mixed.n_fixed {
                beta_names.push(format!("{}[F{}]", s.name, j + 1));
            }
            let theta = theta_targets.len();
            theta_targets.push(ThetaTarget::Smooth(smooths.len()));
            theta_names.push(format!("theta[{}]", s.name));
            theta_init.push(1.0);
            let u_offset = r;
            r += mixed.n_random();
            let mut row_points = Vec::new();
            for (i, rx) in row_x.iter().enumerate() {
                let Some((v, latent, point)) = *rx else { continue };
                row_points.push((i, point));
                let row = mixed.mixed_row(v);
                for (j, &b) in row.iter().enumerate() {
                    if b == 0.0 {
                        continue;
                    }
                    if j < mixed.n_fixed {
                        x_rows[i].push(XEntry { col: (beta_offset + j) as u32, latent, base: b });
                    } else {
                        let col = (u_offset + j - mixed.n_fixed) as u32;
                        z_rows[i].push(ZEntry { col, latent, base: b });
                        row_contribs[i].push((col, Contribution { entry: 0, latent, theta: theta as u32, base: b }));
                    }
                }
            }
            smooths.push(SmoothTerm {
                name: s.name.clone(),
                covariate: s.covariate.clone(),
                target: target.clone(),
                mixed,
                beta_offset,
                u_offset,
                theta,
                x,
                row_points,
            });
        }
        let p = beta_names.len();

        // Flatten rows: nonzero columns of A and their contributions.
        let mut x_entries = Vec::new();
        let mut x_ptr = vec![0usize];
        let mut z_entries = Vec::new();
        let mut z_ptr = vec![0usize];
        let mut a_cols: Vec<u32> = Vec::new();
        let mut a_ptr = vec![0usize];
        let mut contribs = Vec::new();
        let mut c_ptr = vec![0usize];
        for i in 0..n {
            x_entries.extend_from_slice(&x_rows[i]);
            x_ptr.push(x_entries.len());
            z_entries.extend_from_slice(&z_rows[i]);
            z_ptr.push(z_entries.len());
            let mut cols: Vec<u32> = row_contribs[i].iter().map(|c| c.0).collect();
            cols.sort_unstable();
            cols.dedup();
            let start = a_cols.len();
            a_cols.extend_from_slice(&cols);
            a_ptr.push(a_cols.len());
            let mut cs: Vec<Contribution> = row_contribs[i]
                .iter()
                .map(|(col, c)| Contribution {
                    entry: (start + cols.binary_search(col).expect("column collected above")) as u32,
                    ..*c
                })
                .collect();
            cs.sort_by_key(|c| c.entry);
            contribs.extend(cs);
            c_ptr.push(contribs.len());
        }

        // Pattern of K: diagonal slots first, then pairs appearing in rows of A.
        let mut slot_of: HashMap<(u32, u32), u32> = HashMap::new();
        let mut slots: Vec<(u32, u32)> = (0..r as u32).map(|c| (c, c)).collect();
        for c in 0..r as u32 {
            slot_of.insert((c, c), c);
        }
        let mut pair_slots = Vec::new();
        let mut pair_ptr = vec![0usize];
        for i in 0..n {
            let cols = &a_cols[a_ptr[i]..a_ptr[i + 1]];
            for e1 in 0..cols.len() {
                for e2 in e1..cols.len() {
                    let key = (cols[e1], cols[e2]);
                    let next = slots.len() as u32;
                    let s = *slot_of.entry(key).or_insert(next);
                    if s == next {
                        slots.push(key);
                    }
                    pair_slots.push(s);
                }
            }
            pair_ptr.push(pair_slots.len());
        }
        let mut triplets = Vec::with_capacity(2 * slots.len());
        for &(a, b) in &slots {
            triplets.push((a as usize, b as usize, 0.0));
            if a != b {
                triplets.push((b as usize, a as usize, 0.0));
            }
        }
        let k_pattern = CscMatrix::from_triplets(r, r, &triplets)?;
        let slot_pos = slots
            .iter()
            .map(|&(a, b)| {
                let up = k_pattern.find(a as usize, b as usize).expect("pattern entry") as u32;
                let lo = k_pattern.find(b as usize, a as usize).expect("pattern entry") as u32;
                (up, lo)
            })
            .collect();
        let symbolic = SymbolicFactorization::new(&k_pattern)?;

        // Parameter template and packing layout.
        let loading_names: Vec<String> = spec.config.loading_parameters.iter().map(|p| p.name.clone()).collect();
        let structural: Vec<(usize, usize)> = spec.structural.iter().map(|&(t, s, _)| (t, s)).collect();
        let structural_names: Vec<String> = spec
            .structural
            .iter()
            .map(|&(t, s, _)| format!("B[{}<-{}]", spec.config.latent[t].name, spec.config.latent[s].name))
            .collect();
        let template = Params {
            beta: vec![0.0; p],
            theta: theta_init,
            loadings: spec.loading_values.iter().map(ParamValue::start).collect(),
            structural: spec.structural.iter().map(|(_, _, v)| v.start()).collect(),
            phi: vec![1.0; n_groups],
        };
        let mut free = Vec::new();
        for (j, name) in beta_names.iter().enumerate() {
            free.push(ParamInfo {
                name: name.clone(),
                kind: ParamKind::Beta,
                index: j,
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
            });
        }
        for (j, (name, target)) in theta_names.iter().zip(&theta_targets).enumerate() {
            let diagonal = match target {
                ThetaTarget::Level { row, col, .. } => row == col,
                ThetaTarget::Smooth(_) => true,
            };
            free.push(ParamInfo {
                name: name.clone(),
                kind: ParamKind::Theta,
                index: j,
                lower: if diagonal { 0.0 } else { f64::NEG_INFINITY },
                upper: f64::INFINITY,
            });
        }
        let bounded = |kind, index, name: &str, v: &ParamValue| match *v {
            ParamValue::Fixed(_) => None,
            ParamValue::Free { lower, upper, .. } => Some(ParamInfo {
                name: name.to_string(),
                kind,
                index,
                lower,
                upper,
            }),
        };
        for (j, v) in spec.loading_values.iter().enumerate() {
            free.extend(bounded(ParamKind::Loading, j, &loading_names[j], v));
        }
        for (j, (_, _, v)) in spec.structural.iter().enumerate() {
            free.extend(bounded(ParamKind::Structural, j, &structural_names[j], v));
        }
        for (g, fam) in group_family.iter().enumerate() {
            if !fam.fixed_dispersion() {
                free.push(ParamInfo {
                    name: format!("phi[{}]", data.dispersion_groups[g]),
                    kind: ParamKind::Dispersion,
                    index: g,
                    lower: MIN_DISPERSION,
                    upper: f64::INFINITY,
                });
            }
        }

        let mut model = LoweredModel {
            n,
            r,
            p,
            y: data.rows.iter().map(|r| r.response).collect(),
            trials: data.rows.iter().map(|r| r.trials).collect(),
            family: data.rows.iter().map(|r| r.family).collect(),
            group: data.rows.iter().map(|r| r.dispersion_group).collect(),
            group_names: data.dispersion_groups.clone(),
            normalizer_sums: vec![(0.0, 0.0, 0.0); group_family.len()],
            group_family,
            n_latent,
            latent_names: spec.config.latent.iter().map(|l| l.name.clone()).collect(),
            levels,
            smooths,
            beta_names,
            theta_targets,
            theta_names,
            loading_names,
            loading_terms: spec.loadings.clone(),
            structural,
            structural_names,
            template,
            free,
            reach,
            loads,
            load_ptr,
            x_entries,
            x_ptr,
            z_entries,
            z_ptr,
            a_cols,
            a_ptr,
            contribs,
            c_ptr,
            pair_slots,
            pair_ptr,
            slot_pos,
            k_pattern,
            symbolic,
        };
        model.update_normalizer_sums();
        Ok(model)
    }

    fn update_normalizer_sums(&mut self) {
        let mut sums = vec![(0.0, 0.0, 0.0); self.group_family.len()];
        for i in 0..self.n {
            let s = &mut sums[self.group[i]];
            s.0 += 1.0;
            match self.family[i] {
                Family::Gaussian => s.1 += self.y[i] * self.y[i],
                Family::Binomial => s.2 += ln_binomial_coefficient(self.trials[i], self.y[i]),
            }
        }
        self.normalizer_sums = sums;
    }

    /// Copy of the model with different responses (same structure).
    pub fn with_responses(&self, y: Vec<f64>) -> Self {
        assert_eq!(y.len(), self.n, "response length");
        let mut m = self.clone();
        m.y = y;
        m.update_normalizer_sums();
        m
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// True when every row is Gaussian, so `K` does not depend on `u`.
    pub fn all_gaussian(&self) -> bool {
        self.group_family.iter().all(|f| *f == Family::Gaussian)
    }

    /// Reference dispersion `φ₁` scaling the random effects.
    pub fn phi1<S: Copy>(&self, p: &Params<S>) -> S {
        p.phi[0]
    }

    /// Packed vector of free parameters.
    pub fn pack(&self, p: &Params<f64>) -> Vec<f64> {
        self.free.iter().map(|f| p.get(f.kind, f.index)).collect()
    }

    /// Full parameter set from a packed vector, fixed entries from the template.
    pub fn unpack<S: Scalar>(&self, x: &[S]) -> Result<Params<S>> {
        if x.len() != self.free.len() {
            return Err(Error::InvalidArgument(format!(
                "packed parameter vector has length {}, expected {}",
                x.len(),
                self.free.len()
            )));
        }
        let mut p = self.template.lift::<S>();
        for (f, &v) in self.free.iter().zip(x) {
            p.set(f.kind, f.index, v);
        }
        Ok(p)
    }

    /// Bounds of the packed vector.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.free.iter().map(|f| f.lower).collect(), self.free.iter().map(|f| f.upper).collect())
    }

    /// Position of a named free parameter in the packed vector.
    pub fn free_index(&self, name: &str) -> Option<usize> {
        self.free.iter().position(|f| f.name == name)
    }

    /// Check that `θ` and `φ` respect their bounds.
    pub fn check_admissible(&self, p: &Params<f64>) -> Result<()> {
        for (j, t) in self.theta_targets.iter().enumerate() {
            let diagonal = match t {
                ThetaTarget::Level { row, col, .. } => row == col,
                ThetaTarget::Smooth(_) => true,
            };
            if !p.theta[j].is_finite() || (diagonal && p.theta[j] < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{} = {} is outside its bounds",
                    self.theta_names[j], p.theta[j]
                )));
            }
        }
        for (g, &phi) in p.phi.iter().enumerate() {
            if !(phi >= MIN_DISPERSION) || !phi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "dispersion of group `{}` is {phi}",
                    self.group_names[g]
                )));
            }
        }
        Ok(())
    }

    /// Reduced-form matrix `(I − B)⁻¹`, row-major `M × M`.
    pub fn reduced_form<S: Scalar>(&self, p: &Params<S>) -> Vec<S> {
        let m = self.n_latent;
        let mut b = vec![S::zero(); m * m];
        for (j, &(t, s)) in self.structural.iter().enumerate() {
            b[t * m + s] += p.structural[j];
        }
        let mut a = vec![S::zero(); m * m];
        for i in 0..m {
            a[i * m + i] = S::one();
        }
        // B is nilpotent, so the Neumann series terminates after M terms.
        let mut power = a.clone();
        for _ in 1..m {
            let mut next = vec![S::zero(); m * m];
            for i in 0..m {
                for k in 0..m {
                    let pik = power[i * m + k];
                    if pik.value() == 0.0 && S::IS_PLAIN {
                        continue;
                    }
                    for j in 0..m {
                        next[i * m + j] += pik * b[k * m + j];
                    }
                }
            }
            for (aij, nij) in a.iter_mut().zip(&next) {
                *aij += *nij;
            }
            power = next;
        }
        a
    }

    /// Effective multipliers `eff_k(i)`, row-major `n × M`.
    pub fn effects<S: Scalar>(&self, p: &Params<S>) -> Vec<S> {
        let m = self.n_latent;
        let a = self.reduced_form(p);
        let mut eff = vec![S::zero(); self.n * m];
        for i in 0..self.n {
            for load in &self.loads[self.load_ptr[i]..self.load_ptr[i + 1]] {
                let lm = load.latent as usize;
                let lv = p.loadings[load.param as usize] * load.mult;
                for &k in &self.reach[lm] {
                    eff[i * m + k] += lv * a[lm * m + k];
                }
            }
        }
        eff
    }

    /// `X(λ, B) β` and the nonzeros of `Z(λ, B) Λ(θ)`.
    pub fn design<S: Scalar>(&self, p: &Params<S>) -> Design<S> {
        let m = self.n_latent;
        let eff = self.effects(p);
        let mut fixed = vec![S::zero(); self.n];
        let mut a = vec![S::zero(); self.a_cols.len()];
        for i in 0..self.n {
            let mut acc = S::zero();
            for e in &self.x_entries[self.x_ptr[i]..self.x_ptr[i + 1]] {
                let mut v = p.beta[e.col as usize] * e.base;
                if e.latent != NONE {
                    v *= eff[i * m + e.latent as usize];
                }
                acc += v;
            }
            fixed[i] = acc;
            for c in &self.contribs[self.c_ptr[i]..self.c_ptr[i + 1]] {
                let mut v = p.theta[c.theta as usize] * c.base;
                if c.latent != NONE {
                    v *= eff[i * m + c.latent as usize];
                }
                a[c.entry as usize] += v;
            }
        }
        Design { fixed, a }
    }

    /// Linear predictor `ν = X β + A u`.
    pub fn predictor<S: Scalar, U: Scalar>(&self, design: &Design<S>, u: &[U]) -> Vec<S>
    where
        S: std::ops::Mul<U, Output = S>,
    {
        let mut nu = design.fixed.clone();
        for (i, nu_i) in nu.iter_mut().enumerate() {
            for e in self.a_ptr[i]..self.a_ptr[i + 1] {
                *nu_i += design.a[e] * u[self.a_cols[e] as usize];
            }
        }
        nu
    }

    /// `Aᵀ w` for a vector `w` over rows.
    pub fn a_transpose<S: Scalar>(&self, design: &Design<S>, w: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.r];
        for (i, &wi) in w.iter().enumerate() {
            for e in self.a_ptr[i]..self.a_ptr[i + 1] {
                out[self.a_cols[e] as usize] += design.a[e] * wi;
            }
        }
        out
    }

    /// `K = Aᵀ V A + I / φ₁` on the analysed pattern (the negative Hessian of
    /// the integrand with respect to `u`).
    pub fn k_matrix<S: Scalar>(&self, design: &Design<S>, v: &[S], inv_phi1: S) -> CscMatrix<S> {
        let mut slots = vec![S::zero(); self.slot_pos.len()];
        for i in 0..self.n {
            let a = &design.a[self.a_ptr[i]..self.a_ptr[i + 1]];
            let mut s = self.pair_ptr[i];
            for e1 in 0..a.len() {
                let t = v[i] * a[e1];
                for &a2 in &a[e1..] {
                    slots[self.pair_slots[s] as usize] += t * a2;
                    s += 1;
                }
            }
        }
        for slot in slots.iter_mut().take(self.r) {
            *slot += inv_phi1;
        }
        let mut values = vec![S::zero(); self.k_pattern.nnz()];
        for (slot, &(up, lo)) in slots.iter().zip(&self.slot_pos) {
            values[up as usize] = *slot;
            values[lo as usize] = *slot;
        }
        self.k_pattern.with_values(values)
    }

    /// Dense `X(λ, B)` and sparse `Z(λ, B)` at the given parameters.
    pub fn design_matrices(&self, p: &Params<f64>) -> (DMatrix<f64>, CscMatrix<f64>) {
        let m = self.n_latent;
        let eff = self.effects(p);
        let mut x = DMatrix::zeros(self.n, self.p);
        let mut trip = Vec::with_capacity(self.z_entries.len());
        for i in 0..self.n {
            for e in &self.x_entries[self.x_ptr[i]..self.x_ptr[i + 1]] {
                let mult = if e.latent == NONE { 1.0 } else { eff[i * m + e.latent as usize] };
                x[(i, e.col as usize)] += e.base * mult;
            }
            for e in &self.z_entries[self.z_ptr[i]..self.z_ptr[i + 1]] {
                let mult = if e.latent == NONE { 1.0 } else { eff[i * m + e.latent as usize] };
                trip.push((i, e.col as usize, e.base * mult));
            }
        }
        let z = CscMatrix::from_triplets(self.n, self.r, &trip).expect("entries within bounds");
        (x, z)
    }

    /// Block-diagonal relative covariance factor `Λ(θ)`.
    pub fn lambda_matrix(&self, theta: &[f64]) -> CscMatrix<f64> {
        let mut trip = Vec::new();
        for block in &self.levels {
            let f = block.factor(theta);
            let m = block.dim();
            for unit in 0..block.n_units {
                for a in 0..m {
                    for b in 0..=a {
                        if block.theta_index[a][b].is_some() {
                            trip.push((block.column(unit, a), block.column(unit, b), f[(a, b)]));
                        }
                    }
                }
            }
        }
        for s in &self.smooths {
            for c in 0..s.n_random() {
                trip.push((s.u_offset + c, s.u_offset + c, theta[s.theta]));
            }
        }
        CscMatrix::from_triplets(self.r, self.r, &trip).expect("entries within bounds")
    }

    /// Random-effect covariance `Ψ = φ₁ Λ Λᵀ` of one level, by latent position.
    pub fn level_covariance(&self, block: usize, p: &Params<f64>) -> DMatrix<f64> {
        let f = self.levels[block].factor(&p.theta);
        &f * f.transpose() * p.phi[0]
    }

    /// Proportion of structural zeros in `Z`.
    pub fn z_sparsity(&self) -> f64 {
        if self.n == 0 || self.r == 0 {
            return 1.0;
        }
        let mut trip: Vec<(usize, usize)> = Vec::with_capacity(self.z_entries.len());
        for i in 0..self.n {
            for e in &self.z_entries[self.z_ptr[i]..self.z_ptr[i + 1]] {
                trip.push((i, e.col as usize));
            }
        }
        trip.sort_unstable();
        trip.dedup();
        1.0 - trip.len() as f64 / (self.n as f64 * self.r as f64)
    }

    /// Starting values: fixed effects and dispersions from an iteratively
    /// reweighted least-squares fit without random effects; covariance factor
    /// identity; loadings and structural coefficients from the model specification.
    pub fn initial_params(&self) -> Params<f64> {
        let mut params = self.template.clone();
        let design = self.design(&params);
        let m = self.n_latent;
        let eff = self.effects(&params);
        let mut x = DMatrix::zeros(self.n, self.p);
        for i in 0..self.n {
            for e in &self.x_entries[self.x_ptr[i]..self.x_ptr[i + 1]] {
                let mult = if e.latent == NONE { 1.0 } else { eff[i * m + e.latent as usize] };
                x[(i, e.col as usize)] += e.base * mult;
            }
        }
        drop(design);
        let mut eta: Vec<f64> = (0..self.n)
            .map(|i| match self.family[i] {
                Family::Gaussian => 0.0,
                Family::Binomial => {
                    let pr = (self.y[i] + 0.5) / (self.trials[i] + 1.0);
                    (pr / (1.0 - pr)).ln()
                }
            })
            .collect();
        let mut phi = vec![1.0; self.group_family.len()];
        let mut beta = DVector::zeros(self.p);
        for _ in 0..25 {
            let mut w = vec![0.0; self.n];
            let mut z = vec![0.0; self.n];
            for i in 0..self.n {
                let (mu, var) = self.family[i].mean_variance(eta[i], self.trials[i]);
                let var = var.max(1e-10);
                w[i] = var / phi[self.group[i]];
                z[i] = eta[i] + (self.y[i] - mu) / var;
            }
            if self.p > 0 {
                let mut xtwx = DMatrix::zeros(self.p, self.p);
                let mut xtwz = DVector::zeros(self.p);
                for i in 0..self.n {
                    let row = x.row(i);
                    xtwx += row.transpose() * row * w[i];
                    xtwz += row.transpose() * (w[i] * z[i]);
                }
                for j in 0..self.p {
                    xtwx[(j, j)] += 1e-8 * (1.0 + xtwx[(j, j)]);
                }
                match xtwx.cholesky() {
                    Some(ch) => beta = ch.solve(&xtwz),
                    None => break,
                }
            }
            let new_eta: Vec<f64> = (0..self.n).map(|i| (x.row(i) * &beta)[0]).collect();
            let mut ss = vec![0.0; phi.len()];
            let mut cnt = vec![0usize; phi.len()];
            for i in 0..self.n {
                let g = self.group[i];
                if self.family[i] == Family::Gaussian {
                    ss[g] += (self.y[i] - new_eta[i]).powi(2);
                    cnt[g] += 1;
                }
            }
            for g in 0..phi.len() {
                if !self.group_family[g].fixed_dispersion() && cnt[g] > 0 {
                    phi[g] = (ss[g] / cnt[g] as f64).max(1e-4);
                }
            }
            let change = new_eta
                .iter()
                .zip(&eta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            eta = new_eta;
            if change < 1e-10 {
                break;
            }
        }
        if beta.iter().all(|b| b.is_finite()) {
            params.beta = beta.as_slice().to_vec();
        }
        for (g, fam) in self.group_family.iter().enumerate() {
            if !fam.fixed_dispersion() {
                params.phi[g] = phi[g];
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Table;

    const TWO_ITEM: &str = r#"
levels = ["unit"]
[[family_groups]]
id = "g"
family = "gaussian"
[[dispersion_groups]]
id = "g"
[[latent]]
name = "eta"
level = "unit"
[[loading_parameters]]
name = "one"
fixed = 1.0
[[loading_parameters]]
name = "l2"
[[loadings]]
latent = "eta"
item = "a"
parameter = "one"
[[loadings]]
latent = "eta"
item = "b"
parameter = "l2"
[[fixed_effects]]
name = "mu_a"
items = ["a"]
[[fixed_effects]]
name = "mu_b"
items = ["b"]
"#;

    fn two_item_data(spec: &ModelSpec) -> Dataset {
        let mut rows = Vec::new();
        for u in 0..4 {
            for (it, y) in [("a", 1.0 + u as f64), ("b", 0.5 * u as f64 - 1.0)] {
                rows.push(vec![y.to_string(), "g".into(), "g".into(), it.into(), format!("u{u}")]);
            }
        }
        let table = Table {
            header: ["response", "family_group", "dispersion_group", "item", "level2_id"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows,
        };
        Dataset::from_table(&table, spec).unwrap()
    }

    #[test]
    fn loading_scales_item_columns() {
        let spec = ModelSpec::from_toml_str(TWO_ITEM).unwrap();
        let data = two_item_data(&spec);
        let model = LoweredModel::new(&spec, &data).unwrap();
        assert_eq!(model.r, 4);
        let mut p = model.template.clone();
        let (_, z_ref) = model.design_matrices(&p);
        p.loadings[1] = 2.0;
        let (_, z) = model.design_matrices(&p);
        for i in 0..model.n {
            for c in 0..model.r {
                let a = z_ref.find(i, c).map_or(0.0, |k| z_ref.values[k]);
                let b = z.find(i, c).map_or(0.0, |k| z.values[k]);
                let factor = if data.items[data.rows[i].item] == "b" { 2.0 } else { 1.0 };
                assert_eq!(b, a * factor);
            }
        }
        assert_eq!(z.colptr, z_ref.colptr);
        assert_eq!(z.rowidx, z_ref.rowidx);
    }

    #[test]
    fn pack_round_trip_skips_fixed_loadings() {
        let spec = ModelSpec::from_toml_str(TWO_ITEM).unwrap();
        let data = two_item_data(&spec);
        let model = LoweredModel::new(&spec, &data).unwrap();
        let names: Vec<&str> = model.free.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, vec!["mu_a", "mu_b", "theta[eta]", "l2", "phi[g]"]);
        let x = vec![0.3, -1.2, 0.7, 1.9, 2.5];
        let p = model.unpack(&x).unwrap();
        assert_eq!(p.loadings, vec![1.0, 1.9]);
        assert_eq!(model.pack(&p), x);
        assert!(model.unpack(&x[..4]).is_err());
    }

    #[test]
    fn a_matches_z_times_lambda() {
        let spec = ModelSpec::from_toml_str(TWO_ITEM).unwrap();
        let data = two_item_data(&spec);
        let model = LoweredModel::new(&spec, &data).unwrap();
        let p = model.unpack(&[0.3, -1.2, 0.7, 1.9, 2.5]).unwrap();
        let (x, z) = model.design_matrices(&p);
        let lam = model.lambda_matrix(&p.theta);
        let a_dense = z.to_dense() * lam.to_dense();
        let d = model.design(&p);
        let u: Vec<f64> = (0..model.r).map(|j| j as f64 * 0.37 - 0.5).collect();
        let nu = model.predictor(&d, &u);
        let beta = DVector::from_vec(p.beta.clone());
        let direct = &x * beta + &a_dense * DVector::from_vec(u);
        for i in 0..model.n {
            assert!((nu[i] - direct[i]).abs() < 1e-12);
        }
    }
}
