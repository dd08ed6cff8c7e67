//! Declarative model description.
//!
//! A model is written as a TOML document whose tables mirror [`ModelConfig`]
//! one-to-one. [`ModelSpec`] is the validated form with resolved indices and a
//! topological order of the latent variables.
//!
//! ```toml
//! levels = ["timepoint", "subject"]        # data columns level2_id, level3_id
//!
//! [[family_groups]]
//! id = "memory"
//! family = "binomial"
//!
//! [[dispersion_groups]]                    # the first group is the reference group
//! id = "memory"
//!
//! [[latent]]
//! name = "eta"
//! level = "timepoint"
//!
//! [[covariance]]
//! level = "timepoint"
//! structure = "diagonal"                   # or "unstructured"
//!
//! [[loading_parameters]]
//! name = "l1"
//! fixed = 1.0                              # or init/lower/upper for a free loading
//!
//! [[loadings]]
//! latent = "eta"
//! item = "word_recall"
//! parameter = "l1"
//! covariate = "age"                        # optional multiplier
//!
//! [[structural]]
//! target = "eta"
//! source = "eta_subject"
//! fixed = 1.0
//!
//! [[smooths]]
//! name = "f_age"
//! covariate = "age"
//! k = 10
//! target = "eta"                           # omit to act on the linear predictor
//!
//! [[fixed_effects]]
//! name = "intercept"
//! items = ["word_recall"]                  # optional row filter
//! covariate = "age"                        # optional; omitted means a constant 1
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::Family;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Level names from level 2 upwards; level `l` is read from column `level{l}_id`.
    #[serde(default)]
    pub levels: Vec<String>,
    /// Free-text justification that disables the one-anchor-per-latent rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification_override: Option<String>,
    pub family_groups: Vec<FamilyGroupConfig>,
    pub dispersion_groups: Vec<DispersionGroupConfig>,
    #[serde(default)]
    pub latent: Vec<LatentConfig>,
    #[serde(default)]
    pub covariance: Vec<CovarianceConfig>,
    #[serde(default)]
    pub loading_parameters: Vec<ParameterConfig>,
    #[serde(default)]
    pub loadings: Vec<LoadingConfig>,
    #[serde(default)]
    pub structural: Vec<StructuralConfig>,
    #[serde(default)]
    pub smooths: Vec<SmoothConfig>,
    #[serde(default)]
    pub fixed_effects: Vec<FixedEffectConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyGroupConfig {
    pub id: String,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionGroupConfig {
    pub id: String,
    /// Standardize responses of this group to zero mean and unit variance.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub name: String,
    pub level: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceStructure {
    Diagonal,
    Unstructured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    pub level: String,
    pub structure: CovarianceStructure,
}

/// A scalar parameter that is either fixed or free within bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingConfig {
    pub latent: String,
    pub item: String,
    pub parameter: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralConfig {
    pub target: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

fn default_k() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothConfig {
    pub name: String,
    pub covariate: String,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Latent variable predicted by the smooth; `None` for the linear predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Restrict a linear-predictor smooth to rows of these items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub constrained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedEffectConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

/// Resolved bounds and value of a scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamValue {
    Fixed(f64),
    Free { init: f64, lower: f64, upper: f64 },
}

impl ParamValue {
    fn resolve(section: &str, name: &str, fixed: Option<f64>, init: Option<f64>, lower: Option<f64>, upper: Option<f64>, default_init: f64) -> Result<Self> {
        if let Some(v) = fixed {
            if init.is_some() || lower.is_some() || upper.is_some() {
                return Err(Error::spec(section, format!("`{name}` is fixed and cannot also have init or bounds")));
            }
            if !v.is_finite() {
                return Err(Error::spec(section, format!("`{name}` has a non-finite fixed value")));
            }
            return Ok(ParamValue::Fixed(v));
        }
        let lower = lower.unwrap_or(f64::NEG_INFINITY);
        let upper = upper.unwrap_or(f64::INFINITY);
        if !(lower <= upper) {
            return Err(Error::spec(section, format!("`{name}` has lower bound above upper bound")));
        }
        let init = init.unwrap_or_else(|| default_init.clamp(lower, upper));
        if !(init >= lower && init <= upper) || !init.is_finite() {
            return Err(Error::spec(section, format!("`{name}` has an initial value outside its bounds")));
        }
        Ok(ParamValue::Free { init, lower, upper })
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, ParamValue::Fixed(_))
    }

    /// Fixed value or initial value.
    pub fn start(&self) -> f64 {
        match *self {
            ParamValue::Fixed(v) => v,
            ParamValue::Free { init, .. } => init,
        }
    }
}

/// What a smooth or fixed effect acts on.
#[derive(Clone, Debug, PartialEq)]
pub enum TermTarget {
    /// The linear predictor, optionally only for rows of the listed items.
    Predictor { items: Option<Vec<String>> },
    /// A latent variable (index into [`ModelSpec::latent`]).
    Latent(usize),
}

/// Validated model specification.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub config: ModelConfig,
    /// Level index (0 = level 2) of each latent variable.
    pub latent_level: Vec<usize>,
    /// Latent variables ordered so that structural sources come after targets.
    pub topological_order: Vec<usize>,
    /// Latent variables per level, in declaration order.
    pub latents_by_level: Vec<Vec<usize>>,
    pub covariance: Vec<CovarianceStructure>,
    pub loading_values: Vec<ParamValue>,
    /// Loading entries as (latent, item, parameter index, covariate).
    pub loadings: Vec<(usize, String, usize, Option<String>)>,
    /// Structural entries as (target, source, value).
    pub structural: Vec<(usize, usize, ParamValue)>,
    pub smooth_targets: Vec<TermTarget>,
    pub fixed_targets: Vec<TermTarget>,
    pub family_of_group: HashMap<String, Family>,
    pub dispersion_index: HashMap<String, usize>,
}

fn check_unique<'a>(section: &str, names: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut seen = BTreeMap::new();
    for n in names {
        if n.is_empty() {
            return Err(Error::spec(section, "empty identifier"));
        }
        if seen.insert(n.clone(), ()).is_some() {
            return Err(Error::spec(section, format!("duplicate identifier `{n}`")));
        }
    }
    Ok(())
}

impl ModelSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ModelConfig = toml::from_str(text).map_err(|e| {
            let section = e
                .span()
                .map(|s| section_at(text, s.start))
                .unwrap_or_else(|| "document".to_string());
            Error::spec(&section, e.message().to_string())
        })?;
        Self::new(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Spec { section, message } => Error::Spec {
                section,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.config).expect("model configuration serializes")
    }

    pub fn new(config: ModelConfig) -> Result<Self> {
        check_unique("levels", config.levels.iter())?;
        if config.family_groups.is_empty() {
            return Err(Error::spec("family_groups", "at least one family group is required"));
        }
        if config.dispersion_groups.is_empty() {
            return Err(Error::spec("dispersion_groups", "at least one dispersion group is required"));
        }
        check_unique("family_groups", config.family_groups.iter().map(|g| &g.id))?;
        check_unique("dispersion_groups", config.dispersion_groups.iter().map(|g| &g.id))?;
        check_unique("latent", config.latent.iter().map(|l| &l.name))?;
        check_unique("loading_parameters", config.loading_parameters.iter().map(|p| &p.name))?;
        check_unique("smooths", config.smooths.iter().map(|s| &s.name))?;
        check_unique("fixed_effects", config.fixed_effects.iter().map(|s| &s.name))?;

        let level_index: HashMap<&str, usize> = config
            .levels
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let latent_index: HashMap<&str, usize> = config
            .latent
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();

        let mut latent_level = Vec::with_capacity(config.latent.len());
        let mut latents_by_level = vec![Vec::new(); config.levels.len()];
        for (i, l) in config.latent.iter().enumerate() {
            let lv = *level_index
                .get(l.level.as_str())
                .ok_or_else(|| Error::spec("latent", format!("`{}` refers to unknown level `{}`", l.name, l.level)))?;
            latent_level.push(lv);
            latents_by_level[lv].push(i);
        }

        let mut covariance = vec![CovarianceStructure::Diagonal; config.levels.len()];
        let mut seen_cov = vec![false; config.levels.len()];
        for c in &config.covariance {
            let lv = *level_index
                .get(c.level.as_str())
                .ok_or_else(|| Error::spec("covariance", format!("unknown level `{}`", c.level)))?;
            if seen_cov[lv] {
                return Err(Error::spec("covariance", format!("level `{}` listed twice", c.level)));
            }
            seen_cov[lv] = true;
            covariance[lv] = c.structure;
        }

        let mut param_index = HashMap::new();
        let mut loading_values = Vec::new();
        for (i, p) in config.loading_parameters.iter().enumerate() {
            param_index.insert(p.name.as_str(), i);
            loading_values.push(ParamValue::resolve("loading_parameters", &p.name, p.fixed, p.init, p.lower, p.upper, 1.0)?);
        }

        let mut loadings = Vec::new();
        for l in &config.loadings {
            let latent = *latent_index
                .get(l.latent.as_str())
                .ok_or_else(|| Error::spec("loadings", format!("unknown latent variable `{}`", l.latent)))?;
            let p = *param_index
                .get(l.parameter.as_str())
                .ok_or_else(|| Error::spec("loadings", format!("unknown loading parameter `{}`", l.parameter)))?;
            if loadings
                .iter()
                .any(|(m, it, q, _): &(usize, String, usize, Option<String>)| *m == latent && *it == l.item && *q == p)
            {
                return Err(Error::spec("loadings", format!("duplicate loading of `{}` on item `{}`", l.latent, l.item)));
            }
            loadings.push((latent, l.item.clone(), p, l.covariate.clone()));
        }

        let mut structural = Vec::new();
        for s in &config.structural {
            let t = *latent_index
                .get(s.target.as_str())
                .ok_or_else(|| Error::spec("structural", format!("unknown target `{}`", s.target)))?;
            let src = *latent_index
                .get(s.source.as_str())
                .ok_or_else(|| Error::spec("structural", format!("unknown source `{}`", s.source)))?;
            if t == src {
                return Err(Error::spec("structural", format!("`{}` cannot predict itself", s.target)));
            }
            if latent_level[src] < latent_level[t] {
                return Err(Error::spec(
                    "structural",
                    format!("`{}` at a lower level cannot predict `{}`", s.source, s.target),
                ));
            }
            if structural.iter().any(|&(a, b, _)| a == t && b == src) {
                return Err(Error::spec("structural", format!("duplicate entry `{}` <- `{}`", s.target, s.source)));
            }
            let name = format!("B[{}<-{}]", s.target, s.source);
            let v = ParamValue::resolve("structural", &name, s.fixed, s.init, s.lower, s.upper, 0.0)?;
            structural.push((t, src, v));
        }
        let topological_order = topological_order(config.latent.len(), &structural)
            .ok_or_else(|| Error::spec("structural", "structural relations contain a cycle"))?;

        let resolve_target = |section: &str, name: &str, target: &Option<String>, items: &Option<Vec<String>>| -> Result<TermTarget> {
            match (target, items) {
                (Some(_), Some(_)) => Err(Error::spec(section, format!("`{name}` cannot have both a latent target and an item filter"))),
                (Some(t), None) => latent_index
                    .get(t.as_str())
                    .map(|&i| TermTarget::Latent(i))
                    .ok_or_else(|| Error::spec(section, format!("`{name}` targets unknown latent variable `{t}`"))),
                (None, Some(list)) if list.is_empty() => Err(Error::spec(section, format!("`{name}` has an empty item filter"))),
                (None, items) => Ok(TermTarget::Predictor { items: items.clone() }),
            }
        };
        let mut smooth_targets = Vec::new();
        for s in &config.smooths {
            if s.k < 3 {
                return Err(Error::spec("smooths", format!("`{}` needs k >= 3", s.name)));
            }
            smooth_targets.push(resolve_target("smooths", &s.name, &s.target, &s.items)?);
        }
        let mut fixed_targets = Vec::new();
        for f in &config.fixed_effects {
            fixed_targets.push(resolve_target("fixed_effects", &f.name, &f.target, &f.items)?);
        }

        if config.identification_override.is_none() {
            for (m, l) in config.latent.iter().enumerate() {
                let direct: Vec<&(usize, String, usize, Option<String>)> =
                    loadings.iter().filter(|e| e.0 == m).collect();
                if direct.is_empty() {
                    if structural.iter().any(|&(_, src, _)| src == m) {
                        continue;
                    }
                    return Err(Error::spec(
                        "loadings",
                        format!("latent variable `{}` has no loadings and predicts no other latent variable", l.name),
                    ));
                }
                let mut anchors: Vec<usize> = direct
                    .iter()
                    .filter(|e| e.3.is_none() && matches!(loading_values[e.2], ParamValue::Fixed(v) if v != 0.0))
                    .map(|e| e.2)
                    .collect();
                anchors.sort_unstable();
                anchors.dedup();
                match anchors.len() {
                    1 => {}
                    0 => {
                        return Err(Error::spec(
                            "loadings",
                            format!("latent variable `{}` has no fixed loading to anchor its scale", l.name),
                        ))
                    }
                    k => {
                        return Err(Error::spec(
                            "loadings",
                            format!(
                                "latent variable `{}` has {k} distinct fixed loadings; set identification_override to allow this",
                                l.name
                            ),
                        ))
                    }
                }
            }
        }

        let family_of_group = config.family_groups.iter().map(|g| (g.id.clone(), g.family)).collect();
        let dispersion_index = config
            .dispersion_groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.id.clone(), i))
            .collect();

        Ok(ModelSpec {
            config,
            latent_level,
            topological_order,
            latents_by_level,
            covariance,
            loading_values,
            loadings,
            structural,
            smooth_targets,
            fixed_targets,
            family_of_group,
            dispersion_index,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.config.levels.len()
    }

    pub fn n_latent(&self) -> usize {
        self.config.latent.len()
    }

    pub fn latent_index(&self, name: &str) -> Option<usize> {
        self.config.latent.iter().position(|l| l.name == name)
    }

    /// Covariates referenced by the model, with the items they are required
    /// for (`None` meaning every row).
    pub fn required_covariates(&self) -> Vec<(String, Option<Vec<String>>)> {
        let mut out: Vec<(String, Option<Vec<String>>)> = Vec::new();
        let mut add = |name: &str, items: Option<Vec<String>>| {
            if let Some(entry) = out.iter_mut().find(|(n, _)| n == name) {
                match (&mut entry.1, items) {
                    (Some(a), Some(b)) => {
                        for it in b {
                            if !a.contains(&it) {
                                a.push(it);
                            }
                        }
                    }
                    (slot, _) => *slot = None,
                }
            } else {
                out.push((name.to_string(), items));
            }
        };
        for (s, t) in self.config.smooths.iter().zip(&self.smooth_targets) {
            match t {
                TermTarget::Predictor { items } => add(&s.covariate, items.clone()),
                TermTarget::Latent(_) => add(&s.covariate, None),
            }
        }
        for (f, t) in self.config.fixed_effects.iter().zip(&self.fixed_targets) {
            if let Some(c) = &f.covariate {
                match t {
                    TermTarget::Predictor { items } => add(c, items.clone()),
                    TermTarget::Latent(_) => add(c, None),
                }
            }
        }
        for (_, item, _, cov) in &self.loadings {
            if let Some(c) = cov {
                add(c, Some(vec![item.clone()]));
            }
        }
        out
    }
}

/// Kahn's algorithm with lowest-index tie-breaking. Targets precede their sources.
fn topological_order(n: usize, structural: &[(usize, usize, ParamValue)]) -> Option<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    for &(_, src, _) in structural {
        indegree[src] += 1;
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &(t, src, _) in structural {
            if t == i {
                indegree[src] -= 1;
                if indegree[src] == 0 {
                    ready.insert(src);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Name of the TOML table enclosing a byte offset, for error messages.
fn section_at(text: &str, offset: usize) -> String {
    let mut section = "document".to_string();
    let mut pos = 0;
    for line in text.lines() {
        if pos > offset {
            break;
        }
        let t = line.trim();
        if t.starts_with('[') {
            section = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        pos += line.len() + 1;
    }
    section
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
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
name = "l1"
fixed = 1.0

[[loading_parameters]]
name = "l2"
init = 0.5

[[loadings]]
latent = "eta"
item = "a"
parameter = "l1"

[[loadings]]
latent = "eta"
item = "b"
parameter = "l2"
"#;

    #[test]
    fn parses_and_round_trips() {
        let spec = ModelSpec::from_toml_str(BASE).unwrap();
        assert_eq!(spec.n_latent(), 1);
        assert_eq!(spec.loading_values[1], ParamValue::Free { init: 0.5, lower: f64::NEG_INFINITY, upper: f64::INFINITY });
        let again = ModelSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn cycle_is_rejected() {
        let text = r#"
levels = ["unit"]
identification_override = "test"
[[family_groups]]
id = "g"
family = "gaussian"
[[dispersion_groups]]
id = "g"
[[latent]]
name = "e1"
level = "unit"
[[latent]]
name = "e2"
level = "unit"
[[structural]]
target = "e1"
source = "e2"
[[structural]]
target = "e2"
source = "e1"
"#;
        let err = ModelSpec::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn missing_anchor_is_rejected() {
        let text = BASE.replace("fixed = 1.0", "init = 1.0");
        let err = ModelSpec::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("no fixed loading"), "{err}");
        let text = format!("identification_override = \"scale fixed by variance\"\n{text}");
        assert!(ModelSpec::from_toml_str(&text).is_ok());
    }

    #[test]
    fn malformed_config_names_section() {
        let text = BASE.replace("init = 0.5", "init = \"high\"");
        let err = ModelSpec::from_toml_str(&text).unwrap_err();
        match err {
            Error::Spec { section, .. } => assert_eq!(section, "loading_parameters"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_references_are_rejected() {
        let text = BASE.replace("latent = \"eta\"\nitem = \"b\"", "latent = \"zeta\"\nitem = \"b\"");
        assert!(ModelSpec::from_toml_str(&text).is_err());
        let text = format!("{BASE}\n[[smooths]]\nname = \"s\"\ncovariate = \"x\"\ntarget = \"nope\"\n");
        assert!(ModelSpec::from_toml_str(&text).is_err());
    }

    #[test]
    fn topological_order_puts_targets_first() {
        let text = r#"
levels = ["tp", "subject"]
[[family_groups]]
id = "g"
family = "gaussian"
[[dispersion_groups]]
id = "g"
[[latent]]
name = "top"
level = "subject"
[[latent]]
name = "low"
level = "tp"
[[loading_parameters]]
name = "one"
fixed = 1.0
[[loadings]]
latent = "low"
item = "a"
parameter = "one"
[[structural]]
target = "low"
source = "top"
fixed = 1.0
"#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.topological_order, vec![1, 0]);
        let bad = text.replace("target = \"low\"\nsource = \"top\"", "target = \"top\"\nsource = \"low\"");
        assert!(ModelSpec::from_toml_str(&bad).is_err());
    }
}
