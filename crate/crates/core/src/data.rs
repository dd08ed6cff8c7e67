//! Long-format observation data.
//!
//! Input is a CSV file with a header row. Required columns are `response`,
//! `family_group`, `dispersion_group` and `item`; `trials` is required when a
//! binomial family group is present; `level2_id` … `levelL_id` identify the
//! units at each level. All other columns are covariates.
//!
//! Units are nested: a level-`l` unit is identified by its own id together
//! with the ids of all higher levels. Empty cells and `NA` denote missing
//! values. Rows with a missing response or a missing covariate that the model
//! needs for that row are dropped and counted.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{validate_binomial, Family};
use crate::model_spec::ModelSpec;

pub const RESPONSE: &str = "response";
pub const TRIALS: &str = "trials";
pub const FAMILY_GROUP: &str = "family_group";
pub const DISPERSION_GROUP: &str = "dispersion_group";
pub const ITEM: &str = "item";

/// Column name holding unit ids of level `l` (`l >= 2`).
pub fn level_column(l: usize) -> String {
    format!("level{l}_id")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    /// Response on the fitting scale (standardized when requested).
    pub response: f64,
    /// Binomial trial count; 1 for Gaussian rows.
    pub trials: f64,
    pub family: Family,
    pub family_group: usize,
    pub dispersion_group: usize,
    pub item: usize,
    /// Unit index at each level (index into [`Dataset::level_units`]).
    pub level_ids: Vec<usize>,
    /// Covariate values aligned with [`Dataset::covariate_names`]; NaN when missing.
    pub covariates: Vec<f64>,
    /// One-based line number of the row in its source (header is line 1).
    pub source_line: usize,
}

/// Affine map from the fitting scale back to the original response scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<ObservationRow>,
    pub covariate_names: Vec<String>,
    pub items: Vec<String>,
    pub family_groups: Vec<String>,
    pub dispersion_groups: Vec<String>,
    /// Unit labels per level; a label joins the ids of that level and all higher levels.
    pub level_units: Vec<Vec<String>>,
    /// Standardization applied to each dispersion group, if any.
    pub standardization: Vec<Option<Standardization>>,
    pub dropped_rows: usize,
}

/// Rectangular table of raw cell strings with a header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let header = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .iter()
            .map(|s| s.trim().to_string())
            .collect::<Vec<_>>();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "missing header row".into(),
            });
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            rows.push(rec.iter().map(|s| s.to_string()).collect());
        }
        Ok(Table { header, rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let io = |e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_number(s: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Data {
        row: line,
        message: format!("column `{column}` has non-numeric value `{s}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data {
            row: line,
            message: format!("column `{column}` has non-finite value `{s}`"),
        });
    }
    Ok(v)
}

impl Dataset {
    /// Read and validate a CSV file against a model specification.
    pub fn load(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Self> {
        let table = Table::read_csv(path)?;
        Self::from_table(&table, spec)
    }

    /// Validate a raw table against a model specification.
    pub fn from_table(table: &Table, spec: &ModelSpec) -> Result<Self> {
        let col = |name: &str| table.header.iter().position(|h| h == name);
        let require = |name: &str| {
            col(name).ok_or_else(|| Error::Dataset(format!("missing required column `{name}`")))
        };
        let c_response = require(RESPONSE)?;
        let c_family = require(FAMILY_GROUP)?;
        let c_dispersion = require(DISPERSION_GROUP)?;
        let c_item = require(ITEM)?;
        let any_binomial = spec
            .config
            .family_groups
            .iter()
            .any(|g| g.family == Family::Binomial);
        let c_trials = col(TRIALS);
        if any_binomial && c_trials.is_none() {
            return Err(Error::Dataset(format!(
                "missing required column `{TRIALS}` for binomial family groups"
            )));
        }
        let n_levels = spec.n_levels();
        let mut c_levels = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            c_levels.push(require(&level_column(l + 2))?);
        }
        let reserved: Vec<usize> = [Some(c_response), Some(c_family), Some(c_dispersion), Some(c_item), c_trials]
            .into_iter()
            .flatten()
            .chain(c_levels.iter().copied())
            .collect();
        let covariate_cols: Vec<usize> = (0..table.header.len()).filter(|c| !reserved.contains(c)).collect();
        let covariate_names: Vec<String> = covariate_cols.iter().map(|&c| table.header[c].clone()).collect();

        let required = spec.required_covariates();
        for (name, _) in &required {
            if !covariate_names.contains(name) {
                return Err(Error::Dataset(format!("missing covariate column `{name}` used by the model")));
            }
        }
        let required_idx: Vec<(usize, Option<Vec<String>>)> = required
            .iter()
            .map(|(name, items)| (covariate_names.iter().position(|c| c == name).unwrap(), items.clone()))
            .collect();

        let family_groups: Vec<String> = spec.config.family_groups.iter().map(|g| g.id.clone()).collect();
        let dispersion_groups: Vec<String> = spec.config.dispersion_groups.iter().map(|g| g.id.clone()).collect();
        let mut items: Vec<String> = Vec::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut level_units: Vec<Vec<String>> = vec![Vec::new(); n_levels];
        let mut unit_index: Vec<HashMap<String, usize>> = vec![HashMap::new(); n_levels];
        let mut rows = Vec::with_capacity(table.rows.len());
        let mut dropped = 0;

        for (r, cells) in table.rows.iter().enumerate() {
            let line = r + 2;
            if cells.len() != table.header.len() {
                return Err(Error::Data {
                    row: line,
                    message: format!("expected {} fields, found {}", table.header.len(), cells.len()),
                });
            }
            let fg = cells[c_family].trim();
            let family_group = family_groups.iter().position(|g| g == fg).ok_or_else(|| Error::Data {
                row: line,
                message: format!("unknown family group `{fg}`"),
            })?;
            let family = spec.config.family_groups[family_group].family;
            let dg = cells[c_dispersion].trim();
            let dispersion_group = dispersion_groups.iter().position(|g| g == dg).ok_or_else(|| Error::Data {
                row: line,
                message: format!("unknown dispersion group `{dg}`"),
            })?;
            let item_name = cells[c_item].trim().to_string();
            if item_name.is_empty() {
                return Err(Error::Data {
                    row: line,
                    message: "empty item".into(),
                });
            }

            if is_missing(&cells[c_response]) {
                dropped += 1;
                continue;
            }
            let mut covariates = Vec::with_capacity(covariate_cols.len());
            for (k, &c) in covariate_cols.iter().enumerate() {
                let v = if is_missing(&cells[c]) {
                    f64::NAN
                } else {
                    parse_number(&cells[c], line, &covariate_names[k])?
                };
                covariates.push(v);
            }
            let needs_missing = required_idx.iter().any(|(k, items)| {
                covariates[*k].is_nan() && items.as_ref().is_none_or(|list| list.contains(&item_name))
            });
            if needs_missing {
                dropped += 1;
                continue;
            }
            let response = parse_number(&cells[c_response], line, RESPONSE)?;
            let trials = match family {
                Family::Gaussian => 1.0,
                Family::Binomial => {
                    let c = c_trials.expect("checked above");
                    if is_missing(&cells[c]) {
                        return Err(Error::Data {
                            row: line,
                            message: "binomial row has no trial count".into(),
                        });
                    }
                    let m = parse_number(&cells[c], line, TRIALS)?;
                    validate_binomial(response, m).map_err(|e| Error::Data {
                        row: line,
                        message: e.to_string(),
                    })?;
                    m
                }
            };
            let mut level_ids = Vec::with_capacity(n_levels);
            for l in 0..n_levels {
                let mut key = String::new();
                for (k, &c) in c_levels.iter().enumerate().skip(l) {
                    let id = cells[c].trim();
                    if id.is_empty() {
                        return Err(Error::Data {
                            row: line,
                            message: format!("missing value in `{}`", level_column(k + 2)),
                        });
                    }
                    if k > l {
                        key.push('/');
                    }
                    key.push_str(id);
                }
                let next = level_units[l].len();
                let idx = *unit_index[l].entry(key.clone()).or_insert_with(|| {
                    next
                });
                if idx == next {
                    level_units[l].push(key);
                }
                level_ids.push(idx);
            }
            let item = match item_index.get(&item_name) {
                Some(&i) => i,
                None => {
                    items.push(item_name.clone());
                    item_index.insert(item_name, items.len() - 1);
                    items.len() - 1
                }
            };
            rows.push(ObservationRow {
                response,
                trials,
                family,
                family_group,
                dispersion_group,
                item,
                level_ids,
                covariates,
                source_line: line,
            });
        }
        if rows.is_empty() {
            return Err(Error::Dataset("no usable rows after dropping missing values".into()));
        }

        let mut data = Dataset {
            rows,
            covariate_names,
            items,
            family_groups,
            dispersion_groups,
            level_units,
            standardization: vec![None; spec.config.dispersion_groups.len()],
            dropped_rows: dropped,
        };
        for (g, cfg) in spec.config.dispersion_groups.iter().enumerate() {
            if cfg.standardize {
                data.standardize_group(g)?;
            }
        }
        Ok(data)
    }

    fn standardize_group(&mut self, g: usize) -> Result<()> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.dispersion_group == g)
            .map(|r| r.response)
            .collect();
        if self.rows.iter().any(|r| r.dispersion_group == g && r.family != Family::Gaussian) {
            return Err(Error::Dataset(format!(
                "dispersion group `{}` contains non-Gaussian rows and cannot be standardized",
                self.dispersion_groups[g]
            )));
        }
        if values.len() < 2 {
            return Err(Error::Dataset(format!(
                "dispersion group `{}` has too few rows to standardize",
                self.dispersion_groups[g]
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(Error::Dataset(format!(
                "dispersion group `{}` has constant responses",
                self.dispersion_groups[g]
            )));
        }
        for r in self.rows.iter_mut().filter(|r| r.dispersion_group == g) {
            r.response = (r.response - mean) / sd;
        }
        self.standardization[g] = Some(Standardization { mean, sd });
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_units.iter().map(|u| u.len()).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|c| c == name)
    }

    /// Response of row `i` on the original (unstandardized) scale.
    pub fn original_response(&self, i: usize) -> f64 {
        let r = &self.rows[i];
        match self.standardization[r.dispersion_group] {
            Some(s) => r.response * s.sd + s.mean,
            None => r.response,
        }
    }

    /// Copy with responses replaced by values on the fitting scale.
    pub fn with_responses(&self, responses: &[f64]) -> Dataset {
        assert_eq!(responses.len(), self.n());
        let mut d = self.clone();
        for (r, &y) in d.rows.iter_mut().zip(responses) {
            r.response = y;
        }
        d
    }

    /// Render as a raw table on the original response scale. Unit ids are the
    /// last component of each nested label.
    pub fn to_table(&self, spec: &ModelSpec) -> Table {
        let n_levels = self.level_units.len();
        let any_binomial = self.rows.iter().any(|r| r.family == Family::Binomial);
        let mut header = vec![
            RESPONSE.to_string(),
            FAMILY_GROUP.to_string(),
            DISPERSION_GROUP.to_string(),
            ITEM.to_string(),
        ];
        if any_binomial {
            header.push(TRIALS.to_string());
        }
        for l in 0..n_levels {
            header.push(level_column(l + 2));
        }
        header.extend(self.covariate_names.iter().cloned());
        let _ = spec;
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut cells = vec![
                    format_number(self.original_response(i)),
                    self.family_groups[r.family_group].clone(),
                    self.dispersion_groups[r.dispersion_group].clone(),
                    self.items[r.item].clone(),
                ];
                if any_binomial {
                    cells.push(if r.family == Family::Binomial {
                        format_number(r.trials)
                    } else {
                        String::new()
                    });
                }
                for l in 0..n_levels {
                    let label = &self.level_units[l][r.level_ids[l]];
                    cells.push(label.split('/').next().unwrap_or("").to_string());
                }
                for &v in &r.covariates {
                    cells.push(if v.is_nan() { String::new() } else { format_number(v) });
                }
                cells
            })
            .collect();
        Table { header, rows }
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}
