//! Design assembly against direct constructions.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use galamm::assembly::LoweredModel;
use galamm::data::{Dataset, Table};
use galamm::estimation::{laplace_loglik, InnerOptions};
use galamm::model_spec::ModelSpec;
use galamm::simulate::CognitiveDesign;

fn table(header: &[&str], rows: Vec<Vec<String>>) -> Table {
    Table {
        header: header.iter().map(|s| s.to_string()).collect(),
        rows,
    }
}

const TWO_LEVEL: &str = r#"levels = ["tp", "subj"]

[[family_groups]]
id = "g"
family = "gaussian"

[[dispersion_groups]]
id = "g"

[[latent]]
name = "e2"
level = "tp"

[[latent]]
name = "e3"
level = "subj"

[[structural]]
target = "e2"
source = "e3"
init = 0.5

[[loading_parameters]]
name = "one"
fixed = 1.0

[[loading_parameters]]
name = "lb"
init = 1.0

[[loading_parameters]]
name = "lc"
init = 1.0

[[loadings]]
latent = "e2"
item = "a"
parameter = "one"

[[loadings]]
latent = "e2"
item = "b"
parameter = "lb"

[[loadings]]
latent = "e2"
item = "c"
parameter = "lc"
covariate = "x"

[[fixed_effects]]
name = "mu_a"
items = ["a"]

[[fixed_effects]]
name = "mu_b"
items = ["b"]

[[fixed_effects]]
name = "mu_c"
items = ["c"]

[[fixed_effects]]
name = "gamma"
covariate = "w"
target = "e2"
"#;

/// Two-level data: `w` is constant within timepoints, `x` varies by row.
fn two_level(seed: u64) -> (ModelSpec, Dataset) {
    let spec = ModelSpec::from_toml_str(TWO_LEVEL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for s in 0..6 {
        for t in 0..rng.random_range(1..=3) {
            let w: f64 = rng.random_range(-1.0..1.0);
            for item in ["a", "b", "c"] {
                let x: f64 = rng.random_range(0.0..2.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                rows.push(vec![
                    y.to_string(),
                    "g".into(),
                    "g".into(),
                    item.into(),
                    format!("t{t}"),
                    format!("s{s}"),
                    x.to_string(),
                    w.to_string(),
                ]);
            }
        }
    }
    let t = table(
        &["response", "family_group", "dispersion_group", "item", "level2_id", "level3_id", "x", "w"],
        rows,
    );
    let data = Dataset::from_table(&t, &spec).unwrap();
    (spec, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The assembled predictor equals the measurement model with the
    /// structural model substituted, evaluated row by row.
    #[test]
    fn predictor_matches_direct_evaluation(
        seed in 0u64..500,
        b in -2.0f64..2.0,
        lb in -2.0f64..2.0,
        lc in -2.0f64..2.0,
        gamma in -2.0f64..2.0,
        t2 in 0.0f64..2.0,
        t3 in 0.0f64..2.0,
    ) {
        let (_, data) = two_level(seed);
        let spec = ModelSpec::from_toml_str(TWO_LEVEL).unwrap();
        let model = LoweredModel::new(&spec, &data).unwrap();
        let mut p = model.template.clone();
        p.structural[0] = b;
        p.loadings[model.loading_names.iter().position(|n| n == "lb").unwrap()] = lb;
        p.loadings[model.loading_names.iter().position(|n| n == "lc").unwrap()] = lc;
        let gi = model.beta_names.iter().position(|n| n == "gamma").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for v in p.beta.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        p.beta[gi] = gamma;
        p.theta = vec![t2, t3];
        let u: Vec<f64> = (0..model.r).map(|_| rng.random_range(-1.5..1.5)).collect();
        let nu = model.predictor(&model.design(&p), &u);

        let xi = data.covariate_index("x").unwrap();
        let wi = data.covariate_index("w").unwrap();
        let (tp, subj) = (&model.levels[0], &model.levels[1]);
        for (i, row) in data.rows.iter().enumerate() {
            let item = data.items[row.item].as_str();
            let mu = p.beta[model.beta_names.iter().position(|n| *n == format!("mu_{item}")).unwrap()];
            let zeta2 = t2 * u[tp.column(row.level_ids[0], 0)];
            let zeta3 = t3 * u[subj.column(row.level_ids[1], 0)];
            let eta2 = zeta2 + b * zeta3 + gamma * row.covariates[wi];
            let loading = match item {
                "a" => 1.0,
                "b" => lb,
                _ => lc * row.covariates[xi],
            };
            let direct = mu + loading * eta2;
            prop_assert!((nu[i] - direct).abs() <= 1e-10 * (1.0 + direct.abs()), "row {i}: {} vs {direct}", nu[i]);
        }
    }

    /// Packing and unpacking are inverse on admissible vectors.
    #[test]
    fn pack_unpack_round_trip(seed in 0u64..1000) {
        let (spec, data) = two_level(3);
        let model = LoweredModel::new(&spec, &data).unwrap();
        let (lo, hi) = model.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| l.max(-3.0) + rng.random::<f64>() * (h.min(3.0) - l.max(-3.0)))
            .collect();
        let p = model.unpack(&x).unwrap();
        prop_assert_eq!(model.pack(&p), x);
    }
}

#[test]
fn z_pattern_does_not_depend_on_parameters() {
    let (spec, data) = two_level(7);
    let model = LoweredModel::new(&spec, &data).unwrap();
    let (_, z0) = model.design_matrices(&model.template);
    let mut p = model.template.clone();
    p.structural[0] = 0.0;
    for l in p.loadings.iter_mut() {
        *l = 0.0;
    }
    let (_, z1) = model.design_matrices(&p);
    assert_eq!(z0.colptr, z1.colptr);
    assert_eq!(z0.rowidx, z1.rowidx);
}

#[test]
fn unit_multipliers_reproduce_the_classical_design() {
    // All loadings 1 and B = 0: Z is the random-intercept indicator design.
    let (spec, data) = two_level(8);
    let model = LoweredModel::new(&spec, &data).unwrap();
    let mut p = model.template.clone();
    p.structural[0] = 0.0;
    let xi = data.covariate_index("x").unwrap();
    let (_, z) = model.design_matrices(&p);
    let z = z.to_dense();
    for (i, row) in data.rows.iter().enumerate() {
        let mult = if data.items[row.item] == "c" { row.covariates[xi] } else { 1.0 };
        for c in 0..model.r {
            let expected = if c == model.levels[0].column(row.level_ids[0], 0) { mult } else { 0.0 };
            assert_eq!(z[(i, c)], expected, "row {i} column {c}");
        }
    }
}

#[test]
fn row_order_does_not_change_the_likelihood() {
    let spec = ModelSpec::from_toml_str(TWO_LEVEL).unwrap();
    let (_, data) = two_level(9);
    let t = data.to_table(&spec);
    let mut reversed = t.clone();
    reversed.rows.reverse();
    let ll = |t: &Table| {
        let d = Dataset::from_table(t, &spec).unwrap();
        let m = LoweredModel::new(&spec, &d).unwrap();
        let mut p = m.template.clone();
        p.structural[0] = 0.4;
        p.theta = vec![0.8, 1.1];
        laplace_loglik(&m, &p, &InnerOptions::default()).unwrap()
    };
    let (a, b) = (ll(&t), ll(&reversed));
    assert!((a - b).abs() < 1e-10 * a.abs(), "{a} vs {b}");
}

#[test]
fn zero_variance_is_evaluable() {
    let (spec, data) = two_level(10);
    let model = LoweredModel::new(&spec, &data).unwrap();
    let mut p = model.template.clone();
    p.theta = vec![0.0, 0.9];
    assert!(laplace_loglik(&model, &p, &InnerOptions::default()).unwrap().is_finite());
}

#[test]
fn unstructured_three_by_three_block_has_six_entries() {
    let text = r#"levels = ["subj"]

[[family_groups]]
id = "g"
family = "gaussian"

[[dispersion_groups]]
id = "g"

[[latent]]
name = "a"
level = "subj"

[[latent]]
name = "b"
level = "subj"

[[latent]]
name = "c"
level = "subj"

[[covariance]]
level = "subj"
structure = "unstructured"

[[loading_parameters]]
name = "one"
fixed = 1.0

[[loadings]]
latent = "a"
item = "ia"
parameter = "one"

[[loadings]]
latent = "b"
item = "ib"
parameter = "one"

[[loadings]]
latent = "c"
item = "ic"
parameter = "one"
"#;
    let spec = ModelSpec::from_toml_str(text).unwrap();
    let mut rows = Vec::new();
    for s in 0..5 {
        for item in ["ia", "ib", "ic"] {
            rows.push(vec![(s as f64 * 0.3).to_string(), "g".into(), "g".into(), item.into(), s.to_string()]);
        }
    }
    let t = table(&["response", "family_group", "dispersion_group", "item", "level2_id"], rows);
    let model = LoweredModel::new(&spec, &Dataset::from_table(&t, &spec).unwrap()).unwrap();
    assert_eq!(model.theta_targets.len(), 6);
    assert_eq!(model.levels[0].dim(), 3);
    // A single variance over q units gives the identity times θ.
    let f = model.levels[0].factor(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    assert_eq!(f, nalgebra::DMatrix::identity(3, 3));
}

#[test]
fn gam_without_latents_has_z_equal_to_the_penalized_design() {
    let text = r#"[[family_groups]]
id = "g"
family = "gaussian"

[[dispersion_groups]]
id = "g"

[[smooths]]
name = "f"
covariate = "x"
k = 8

[[fixed_effects]]
name = "intercept"
"#;
    let spec = ModelSpec::from_toml_str(text).unwrap();
    let xs: Vec<f64> = (0..60).map(|i| (i as f64 * 0.377).sin()).collect();
    let rows = xs
        .iter()
        .map(|x| vec![(x * x).to_string(), "g".into(), "g".into(), "y".into(), x.to_string()])
        .collect();
    let t = table(&["response", "family_group", "dispersion_group", "item", "x"], rows);
    let model = LoweredModel::new(&spec, &Dataset::from_table(&t, &spec).unwrap()).unwrap();
    assert_eq!(model.theta_targets.len(), 1);
    let s = &model.smooths[0];
    let xr = s.mixed.random_design(&xs);
    let xf = s.mixed.fixed_design(&xs);
    let (x, z) = model.design_matrices(&model.template);
    let z = z.to_dense();
    assert_eq!(z.ncols(), xr.ncols());
    assert!((z - &xr).amax() < 1e-12);
    // Fixed design: intercept then the unpenalized smooth columns.
    assert_eq!(x.ncols(), 1 + xf.ncols());
    assert!((x.columns(1, xf.ncols()) - &xf).amax() < 1e-12);
    assert!(x.column(0).iter().all(|&v| v == 1.0));
}

#[test]
fn cognitive_like_z_is_sparse() {
    let sc = CognitiveDesign { subjects: 200, ..Default::default() }.scenario(1).unwrap();
    let sparsity = sc.model.z_sparsity();
    assert!(sparsity >= 0.99, "sparsity {sparsity}");
}
