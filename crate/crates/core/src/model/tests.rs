use super::*;
use crate::basis::KnotVector;
use crate::data::LabeledRecord;
use crate::knots::{plan_common, plan_per_study, KnotPlan, QuantileType};
use crate::testutil::toy_network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn common_plan(data: &SurvivalDataset, n: usize) -> KnotPlan {
    plan_common(data, n, QuantileType::Type7).unwrap()
}

fn random_theta(model: &NmaModel, seed: u64, radius: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.init_point(&mut rng, radius)
}

/// Copies coordinates with matching names; others are zero.
fn transfer(from: &NmaModel, theta: &[f64], to: &NmaModel) -> Vec<f64> {
    let names = from.layout().names();
    to.layout()
        .names()
        .iter()
        .map(|n| names.iter().position(|m| m == n).map_or(0.0, |i| theta[i]))
        .collect()
}

fn configs(data: &SurvivalDataset) -> Vec<(&'static str, ModelSpec)> {
    let per = plan_per_study(data, 3, QuantileType::Type7).unwrap();
    let common = common_plan(data, 3);
    let full_cov = CovariateDesign {
        prognostic: vec![0, 1],
        effect_modifiers: vec![1],
        spline_main: vec![0],
        spline_interaction: vec![0],
        ..Default::default()
    };
    vec![
        ("ph-fe", ModelSpec::new(Family::Ph, 3, per.clone())),
        (
            "ph-re",
            ModelSpec::new(Family::Ph, 3, per.clone()).with_effects(Effects::Random),
        ),
        (
            "ph-ume",
            ModelSpec::new(Family::Ph, 3, per.clone()).with_inconsistency(Inconsistency::Ume),
        ),
        (
            "ph-nodesplit-re",
            ModelSpec::new(Family::Ph, 4, per.clone())
                .with_effects(Effects::Random)
                .with_inconsistency(Inconsistency::NodeSplit { a: 1, b: 2 }),
        ),
        ("strat-fe", ModelSpec::new(Family::NphStratified, 3, per.clone())),
        (
            "strat-sex",
            ModelSpec::new(Family::NphStratified, 2, per.clone()).with_covariates(CovariateDesign {
                strata: vec![1],
                prognostic: vec![0],
                ..Default::default()
            }),
        ),
        ("coef-fe", ModelSpec::new(Family::NphCoefEffects, 3, common.clone())),
        (
            "coef-re-cov",
            ModelSpec::new(Family::NphCoefEffects, 3, common.clone())
                .with_effects(Effects::Random)
                .with_covariates(full_cov),
        ),
        (
            "coef-no-trt",
            ModelSpec::new(Family::NphCoefEffects, 4, common).with_covariates(CovariateDesign {
                spline_main: vec![1],
                treatment_spline_effects: false,
                ..Default::default()
            }),
        ),
    ]
}

#[test]
fn gradient_matches_finite_differences() {
    let data = toy_network(1, 25);
    for (name, spec) in configs(&data) {
        let model = NmaModel::new(spec, &data).unwrap();
        let coords: Vec<usize> = (0..model.dim()).collect();
        for seed in 0..3 {
            let theta = random_theta(&model, seed, 1.0);
            let err = gradient_discrepancy(&model, &theta, &coords, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: gradient discrepancy {err}");
        }
    }
}

#[test]
fn pointwise_contributions_sum_to_likelihood() {
    let data = toy_network(2, 15);
    for (name, spec) in configs(&data) {
        let model = NmaModel::new(spec, &data).unwrap();
        let theta = random_theta(&model, 9, 0.5);
        let mut pw = vec![0.0; model.n_records()];
        model.pointwise_log_likelihood(&theta, &mut pw).unwrap();
        let total = model.log_likelihood(&theta).unwrap();
        let sum: f64 = pw.iter().sum();
        assert!((sum - total).abs() < 1e-9 * total.abs(), "{name}");
    }
}

#[test]
fn exponential_special_case_matches_closed_form() {
    let data = toy_network(3, 20);
    let upper = data.max_time();
    let plan = KnotPlan::common(KnotVector::new(0.0, upper, vec![]).unwrap(), "test");
    let model = NmaModel::new(ModelSpec::new(Family::Ph, 1, plan), &data).unwrap();
    assert_eq!(model.dim(), 3 + 2);
    let theta = vec![-0.3, 0.2, 0.1, 0.4, -0.6];
    let mu = &theta[..3];
    let d: [f64; 3] = [0.0, 0.4, -0.6];
    let mut expected = 0.0;
    for r in data.records() {
        let b = data.baseline(r.study);
        let rate = (mu[r.study] + d[r.treatment] - d[b]).exp();
        if r.event {
            expected += rate.ln();
        }
        expected -= rate * r.time;
    }
    // The unit-rate spline hazard is 1 / upper, so log rates shift by ln(upper).
    let shifted: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(i, v)| if i < 3 { v + upper.ln() } else { *v })
        .collect();
    let ll = model.log_likelihood(&shifted).unwrap();
    assert!((ll - expected).abs() < 1e-9 * expected.abs(), "{ll} vs {expected}");
}

#[test]
fn piecewise_exponential_order_uses_gap_weights() {
    let data = toy_network(4, 20);
    let plan = plan_per_study(&data, 2, QuantileType::Type7).unwrap();
    let model = NmaModel::new(ModelSpec::new(Family::Ph, 1, plan), &data).unwrap();
    let theta = random_theta(&model, 1, 0.5);
    let coords: Vec<usize> = (0..model.dim()).collect();
    assert!(gradient_discrepancy(&model, &theta, &coords, 1e-5).unwrap() < 1e-6);
}

#[test]
fn censored_record_contributes_minus_cumulative_hazard() {
    let data = toy_network(5, 10);
    let spec = ModelSpec::new(Family::NphCoefEffects, 3, common_plan(&data, 2));
    let model = NmaModel::new(spec, &data).unwrap();
    let theta = random_theta(&model, 2, 0.7);
    let mut pw = vec![0.0; model.n_records()];
    model.pointwise_log_likelihood(&theta, &mut pw).unwrap();
    for (i, r) in data.records().iter().enumerate() {
        let alpha = model.arm_coefficients(&theta, r.study, r.treatment, None).unwrap();
        let aug = model.population_knots(r.study, r.treatment, None).unwrap();
        let eta = model.linear_predictor(&theta, r.study, r.treatment, None).unwrap();
        let ib = aug.ispline(r.time).unwrap();
        let mb = aug.mspline(r.time).unwrap();
        let cum: f64 = alpha.iter().zip(&ib).map(|(a, b)| a * b).sum();
        let h: f64 = alpha.iter().zip(&mb).map(|(a, b)| a * b).sum();
        let expected = record_log_likelihood(h, cum, eta, r.event);
        if !r.event {
            assert!((expected + cum * eta.exp()).abs() < 1e-14);
        }
        assert!((pw[i] - expected).abs() < 1e-10, "record {i}");
    }
}

#[test]
fn node_split_at_zero_matches_consistency() {
    let data = toy_network(6, 15);
    let plan = plan_per_study(&data, 3, QuantileType::Type7).unwrap();
    let cons = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan.clone()), &data).unwrap();
    let split = NmaModel::new(
        ModelSpec::new(Family::Ph, 3, plan).with_inconsistency(Inconsistency::NodeSplit { a: 0, b: 2 }),
        &data,
    )
    .unwrap();
    let theta = random_theta(&cons, 4, 0.5);
    let theta_s = transfer(&cons, &theta, &split);
    let a = cons.log_likelihood(&theta).unwrap();
    let b = split.log_likelihood(&theta_s).unwrap();
    assert!((a - b).abs() < 1e-10);
    // Only the prior on the inconsistency factor differs.
    let lp_a = cons.evaluate(&theta, None, None).unwrap();
    let lp_b = split.evaluate(&theta_s, None, None).unwrap();
    assert!((lp_b - lp_a - normal_lpdf(0.0, 0.0, 10.0)).abs() < 1e-10);
}

#[test]
fn random_effects_at_zero_deviates_match_fixed_effects() {
    let data = toy_network(7, 15);
    let plan = plan_per_study(&data, 3, QuantileType::Type7).unwrap();
    let fe = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan.clone()), &data).unwrap();
    let re = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan).with_effects(Effects::Random), &data).unwrap();
    let theta = random_theta(&fe, 5, 0.5);
    let mut theta_r = transfer(&fe, &theta, &re);
    theta_r[re.layout().position("log_tau").unwrap()] = 0.8;
    assert!((fe.log_likelihood(&theta).unwrap() - re.log_likelihood(&theta_r).unwrap()).abs() < 1e-10);
    // Three-arm study deviates share a component: equal-variance, correlation one half.
    let shared = re.layout().position("z_re_shared[S3]").unwrap();
    theta_r[shared] = 1.0;
    let tau = 0.8f64.exp();
    let eta_b = re.linear_predictor(&theta_r, 2, 1, None).unwrap();
    let eta_b0 = fe.linear_predictor(&theta, 2, 1, None).unwrap();
    assert!((eta_b - eta_b0 - tau * FRAC_1_SQRT_2).abs() < 1e-12);
}

#[test]
fn vanishing_nonprop_scale_recovers_proportional_hazards() {
    let data = toy_network(8, 15);
    let plan = common_plan(&data, 3);
    let ph = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan.clone()), &data).unwrap();
    let coef = NmaModel::new(ModelSpec::new(Family::NphCoefEffects, 3, plan), &data).unwrap();
    let theta = random_theta(&coef, 6, 1.0);
    let mut theta_c = theta.clone();
    theta_c[coef.layout().position("log_sigma_alpha").unwrap()] = -40.0;
    let theta_p = transfer(&coef, &theta_c, &ph);
    let a = ph.log_likelihood(&theta_p).unwrap();
    let b = coef.log_likelihood(&theta_c).unwrap();
    assert!((a - b).abs() < 1e-9 * a.abs());
    // With a real scale the two differ.
    let b2 = coef.log_likelihood(&theta).unwrap();
    assert!((a - b2).abs() > 1e-6);
}

#[test]
fn nonprop_contrasts_are_relative_to_reference() {
    let data = toy_network(9, 10);
    let coef = NmaModel::new(ModelSpec::new(Family::NphCoefEffects, 3, common_plan(&data, 3)), &data).unwrap();
    let theta = random_theta(&coef, 7, 1.0);
    let c = coef.nonprop_contrasts(&theta);
    assert!(c[0].iter().all(|v| *v == 0.0));
    let g = coef.gammas(&theta);
    for l in 0..g[0].len() {
        assert!((c[2][l] - (g[2][l] - g[0][l])).abs() < 1e-15);
    }
}

#[test]
fn likelihood_invariant_to_reference_treatment() {
    let data = toy_network(10, 12);
    let labeled: Vec<LabeledRecord> = data
        .records()
        .iter()
        .map(|r| LabeledRecord {
            study: data.study_labels()[r.study].clone(),
            treatment: data.treatment_labels()[r.treatment].clone(),
            time: r.time,
            event: r.event,
            covariates: r.covariates.clone(),
        })
        .collect();
    let relabeled = SurvivalDataset::from_labeled(labeled, data.covariate_names().to_vec(), Some("B")).unwrap();
    assert_eq!(relabeled.treatment_labels()[0], "B");
    let plan = common_plan(&data, 3);
    let m1 = NmaModel::new(ModelSpec::new(Family::NphCoefEffects, 3, plan.clone()), &data).unwrap();
    let m2 = NmaModel::new(ModelSpec::new(Family::NphCoefEffects, 3, plan), &relabeled).unwrap();
    let theta1 = random_theta(&m1, 8, 1.0);
    let mut theta2 = transfer(&m1, &theta1, &m2);
    // Re-express the log rates relative to the new baselines and reference.
    for j in 0..3 {
        let b_label = &relabeled.treatment_labels()[relabeled.baseline(j)];
        let t_old = data.treatment_id(b_label).unwrap();
        theta2[j] = m1.linear_predictor(&theta1, j, t_old, None).unwrap();
    }
    let d_old = |t: &str| {
        let id = data.treatment_id(t).unwrap();
        if id == 0 {
            0.0
        } else {
            theta1[m1.layout().position(&format!("d[{t}]")).unwrap()]
        }
    };
    for t in ["A", "C"] {
        theta2[m2.layout().position(&format!("d[{t}]")).unwrap()] = d_old(t) - d_old("B");
    }
    let a = m1.log_likelihood(&theta1).unwrap();
    let b = m2.log_likelihood(&theta2).unwrap();
    assert!((a - b).abs() < 1e-9 * a.abs(), "{a} vs {b}");
}

#[test]
fn ume_has_one_effect_per_observed_comparison() {
    let data = toy_network(11, 10);
    let plan = plan_per_study(&data, 2, QuantileType::Type7).unwrap();
    let m = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan).with_inconsistency(Inconsistency::Ume), &data).unwrap();
    assert_eq!(m.ume_pairs(), &[(0, 1), (0, 2), (1, 2)]);
    let names = m.layout().names();
    assert!(names.contains(&"d[B:C]".to_string()));
}

#[test]
fn stratified_arms_have_separate_coefficients() {
    let data = toy_network(12, 12);
    let plan = plan_per_study(&data, 3, QuantileType::Type7).unwrap();
    let m = NmaModel::new(ModelSpec::new(Family::NphStratified, 3, plan), &data).unwrap();
    assert_eq!(m.group_labels().len(), 7);
    let theta = random_theta(&m, 3, 1.0);
    let a = m.arm_coefficients(&theta, 0, 0, None).unwrap();
    let b = m.arm_coefficients(&theta, 0, 1, None).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(m.population_alpha_star(&theta, 0, 2, None).is_err());
}

#[test]
fn invalid_queries_are_rejected() {
    let data = toy_network(13, 10);
    let plan = plan_per_study(&data, 2, QuantileType::Type7).unwrap();
    let m = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan.clone()), &data).unwrap();
    let theta = vec![0.0; m.dim()];
    assert!(matches!(m.linear_predictor(&theta, 0, 2, None), Err(Error::InvalidArgument(_))));
    assert!(matches!(m.arm_coefficients(&theta, 0, 0, Some(&[0.0, 1.0])), Err(Error::InvalidArgument(_))));
    assert!(m.population_linear_predictor(&theta, 0, 2, None).is_ok());
    assert!(matches!(m.evaluate(&theta[1..], None, None), Err(Error::Dimension(_))));

    let bad = ModelSpec::new(Family::Ph, 3, plan.clone()).with_inconsistency(Inconsistency::NodeSplit { a: 1, b: 1 });
    assert!(matches!(NmaModel::new(bad, &data), Err(Error::Spec(_))));
    let bad = ModelSpec::new(Family::NphCoefEffects, 3, plan);
    assert!(matches!(NmaModel::new(bad, &data), Err(Error::Spec(_))));
}

#[test]
fn events_at_time_zero_are_rejected() {
    let mut records = toy_network(14, 10).records().to_vec();
    records[0].time = 0.0;
    records[0].event = true;
    let data = SurvivalDataset::new(
        vec!["S1".into(), "S2".into(), "S3".into()],
        vec!["A".into(), "B".into(), "C".into()],
        vec!["age".into(), "sex".into()],
        records,
    )
    .unwrap();
    let plan = plan_per_study(&data, 2, QuantileType::Type7).unwrap();
    assert!(matches!(
        NmaModel::new(ModelSpec::new(Family::Ph, 3, plan), &data),
        Err(Error::Dataset(_))
    ));
}

#[test]
fn derived_quantities_are_positive_scales() {
    let data = toy_network(15, 10);
    let spec = ModelSpec::new(Family::NphCoefEffects, 3, common_plan(&data, 2)).with_effects(Effects::Random);
    let m = NmaModel::new(spec, &data).unwrap();
    let theta = random_theta(&m, 1, 2.0);
    let dq = m.derived_quantities(&theta);
    for (name, v) in &dq {
        if name.starts_with("sigma") || name == "tau" {
            assert!(*v > 0.0);
        }
    }
    assert!(dq.iter().any(|(n, _)| n == "d_alpha[C:1]"));
}
