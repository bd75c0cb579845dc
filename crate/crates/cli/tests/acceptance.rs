//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails. Set `MSNMA_ACCEPTANCE_ONLY=3,9` to
//! run a subset, and `MSNMA_NSCLC_DATA=<csv>` to enable the case-study check.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use msnma::basis::{augment_knots, KnotVector};
use msnma::data::{Record, SurvivalDataset};
use msnma::diagnostics::ess_bulk;
use msnma::knots::{plan_common, plan_per_study, KnotPlan, QuantileType};
use msnma::model::{gradient_discrepancy, CovariateDesign, Effects, Family, ModelSpec, NmaModel};
use msnma::prior_predictive::{hazard_ratio_range_quantile, sample_prior_hazards, PriorVariant};
use msnma::priors::{constant_hazard_phi, constant_hazard_simplex, softmax};
use msnma::products::{predict_curves, psis_loo, simulate_arm, Quantity, Ribbon, SplineHazard};
use msnma::sampler::{sample, PosteriorDraws, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Waived(String),
}

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- helpers

/// Gauss-Legendre nodes and weights on [-1, 1], exact for degree 9.
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Integral of a piecewise polynomial over [a, b], split at `breaks`.
fn piecewise_integral(f: &dyn Fn(f64) -> Vec<f64>, a: f64, b: f64, breaks: &[f64], dim: usize) -> Vec<f64> {
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    pts.push(b);
    let mut out = vec![0.0; dim];
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (x, wt) in GL5 {
            for (o, v) in out.iter_mut().zip(f(mid + half * x)) {
                *o += half * wt * v;
            }
        }
    }
    out
}

fn random_knots(rng: &mut ChaCha8Rng, n_internal: usize) -> KnotVector {
    let lower = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..2.0) };
    let span = rng.random_range(0.5..20.0);
    loop {
        let mut internal: Vec<f64> = (0..n_internal).map(|_| lower + span * rng.random_range(0.01..0.99)).collect();
        internal.sort_by(f64::total_cmp);
        let min_gap = internal.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if min_gap > 1e-3 * span {
            return KnotVector::new(lower, lower + span, internal).unwrap();
        }
    }
}

fn grid(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lower + (upper - lower) * i as f64 / (n - 1) as f64).collect()
}

type ArmDesign = (usize, usize, SplineHazard, usize, f64);

fn simulate_network(studies: &[&str], treatments: &[&str], arms: Vec<ArmDesign>, seed: u64) -> SurvivalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<Record> = Vec::new();
    for (study, trt, hazard, n, censor) in arms {
        records.extend(simulate_arm(&hazard, study, trt, n, &mut rng, Some(censor)).unwrap());
    }
    SurvivalDataset::new(
        studies.iter().map(|s| s.to_string()).collect(),
        treatments.iter().map(|s| s.to_string()).collect(),
        vec![],
        records,
    )
    .unwrap()
}

fn constant(rate: f64) -> SplineHazard {
    SplineHazard::constant(KnotVector::new(0.0, 1.0, vec![]).unwrap(), 1, rate).unwrap()
}

/// A smooth, non-constant hazard with log rate `log_rate`.
fn bathtub(log_rate: f64) -> SplineHazard {
    let k = KnotVector::new(0.0, 8.0, vec![1.0, 2.5, 5.0]).unwrap();
    SplineHazard::new(k, 3, vec![0.30, 0.08, 0.07, 0.15, 0.25, 0.15], log_rate).unwrap()
}

fn param(draws: &PosteriorDraws, name: &str) -> Vec<f64> {
    let p = draws.param_names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
    (0..draws.n_draws()).map(|d| draws.draw(d)[p]).collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    (m, var.sqrt())
}

fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    msnma::stats::quantile_sorted(&s, p)
}

fn fit(data: &SurvivalDataset, spec: ModelSpec, seed: u64) -> (NmaModel, PosteriorDraws) {
    let model = NmaModel::new(spec, data).unwrap();
    let config = SamplerConfig { seed, ..SamplerConfig::default() };
    let draws = sample(&model, &config).unwrap();
    (model, draws)
}

// ---------------------------------------------------------------- criteria

fn basis_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_unit, mut worst_int, mut worst_top) = (0.0f64, 0.0f64, 0.0f64);
    let mut negative = 0usize;
    let mut support = 0usize;
    for _ in 0..200 {
        let kappa = rng.random_range(1..=4);
        let l = rng.random_range(0..=10);
        let knots = random_knots(&mut rng, l);
        let aug = augment_knots(&knots, kappa).unwrap();
        let z = aug.values().to_vec();
        let dim = aug.dim();
        let (lo, hi) = (knots.lower(), knots.upper());
        let mut ts: Vec<f64> = (0..200).map(|_| rng.random_range(lo..=hi)).collect();
        ts.extend(knots.all());
        for &t in &ts {
            let m = aug.mspline(t).unwrap();
            for (s, &v) in m.iter().enumerate() {
                if v < 0.0 {
                    negative += 1;
                }
                let inside = t >= z[s] && t <= z[s + kappa];
                if v != 0.0 && !inside {
                    support += 1;
                }
            }
        }
        let breaks = knots.all();
        let m_of = |t: f64| aug.mspline(t).unwrap();
        let unit = piecewise_integral(&m_of, lo, hi, &breaks, dim);
        worst_unit = unit.iter().fold(worst_unit, |w, v| w.max((v - 1.0).abs()));
        for &t in ts.iter().take(20) {
            let quad = piecewise_integral(&m_of, lo, t, &breaks, dim);
            let i = aug.ispline(t).unwrap();
            worst_int = quad.iter().zip(&i).fold(worst_int, |w, (a, b)| w.max((a - b).abs()));
        }
        let top = aug.ispline(hi).unwrap();
        worst_top = top.iter().fold(worst_top, |w, v| w.max((v - 1.0).abs()));
    }
    let pass = negative == 0 && support == 0 && worst_unit <= 1e-8 && worst_int <= 1e-5 && worst_top <= 1e-8;
    verdict(
        pass,
        format!(
            "200 configs: negatives {negative}, support violations {support}, max |int M - 1| {worst_unit:.1e}, \
             max |I - int M| {worst_int:.1e}, max |I(U) - 1| {worst_top:.1e}"
        ),
    )
}

fn constant_hazard_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for kappa in 1..=4usize {
        for _ in 0..50 {
            let l = rng.random_range(0..=10);
            let knots = random_knots(&mut rng, l);
            let aug = augment_knots(&knots, kappa).unwrap();
            let alpha = if kappa == 1 {
                constant_hazard_simplex(&knots, 1).unwrap()
            } else {
                softmax(&constant_hazard_phi(&knots, kappa).unwrap()).unwrap()
            };
            for t in grid(knots.lower(), knots.upper(), 1000) {
                let h: f64 = aug.mspline(t).unwrap().iter().zip(&alpha).map(|(m, a)| m * a).sum();
                worst = worst.max((h * knots.span() - 1.0).abs());
            }
        }
    }
    verdict(worst <= 1e-8, format!("max |h(t) * span - 1| over 200 knot vectors x 1000 points: {worst:.1e}"))
}

/// Pointwise 95% bounds of prior hazard draws at unit cumulative hazard.
fn prior_band(knots: &KnotVector, variant: PriorVariant, ts: &[f64], scale: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = sample_prior_hazards(knots, 4, variant, n, 1.0, ts, 303).unwrap();
    let h: Vec<f64> = h.iter().map(|v| v * scale).collect();
    let r = Ribbon::from_draws(ts, &h);
    let iv = r.interval(0.95).unwrap();
    (iv.lower.clone(), iv.upper.clone())
}

fn band_gap(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> f64 {
    let rel = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p / q).max(q / p)).fold(1.0, f64::max);
    rel(&a.0, &b.0).max(rel(&a.1, &b.1))
}

fn prior_invariance() -> Outcome {
    let n = 100_000;
    let even = KnotVector::new(0.0, 10.0, (1..=7).map(|i| 1.25 * i as f64).collect()).unwrap();
    // Knots at evenly spaced quantiles of exponential(0.3) event times
    // truncated at the end of follow-up.
    let f_end = 1.0 - (-3.0f64).exp();
    let clustered_internal: Vec<f64> = (1..=7).map(|i| -(1.0 - f_end * i as f64 / 8.0).ln() / 0.3).collect();
    let clustered = KnotVector::new(0.0, 10.0, clustered_internal).unwrap();
    let stretch = 7.0;
    let rescaled = even.rescaled(stretch).unwrap();
    let ts = grid(0.0, 10.0, 201);
    let ts_long: Vec<f64> = ts.iter().map(|t| t * stretch).collect();

    let w_even = prior_band(&even, PriorVariant::WeightedRw, &ts, 1.0, n);
    let w_clus = prior_band(&clustered, PriorVariant::WeightedRw, &ts, 1.0, n);
    let w_resc = prior_band(&rescaled, PriorVariant::WeightedRw, &ts_long, stretch, n);
    let gap_knots = band_gap(&w_even, &w_clus);
    let gap_scale = band_gap(&w_even, &w_resc);
    let d_gap = band_gap(
        &prior_band(&even, PriorVariant::Dirichlet, &ts, 1.0, n),
        &prior_band(&clustered, PriorVariant::Dirichlet, &ts, 1.0, n),
    );
    let u_gap = band_gap(
        &prior_band(&even, PriorVariant::UnweightedRw, &ts, 1.0, n),
        &prior_band(&clustered, PriorVariant::UnweightedRw, &ts, 1.0, n),
    );
    let pass = gap_knots <= 1.10 && gap_scale <= 1.10 && d_gap > 1.5 && u_gap > 1.5;
    verdict(
        pass,
        format!(
            "weighted RW worst 95% band ratio: even vs clustered {gap_knots:.3}, even vs x{stretch} timescale {gap_scale:.3} \
             (limit 1.10); even vs clustered Dirichlet {d_gap:.2}, unweighted RW {u_gap:.2} (need > 1.5)"
        ),
    )
}

fn factor_of_twelve() -> Outcome {
    let knots = KnotVector::new(0.0, 10.0, (1..=7).map(|i| 1.25 * i as f64).collect()).unwrap();
    let ts = grid(0.0, 10.0, 201);
    let h = sample_prior_hazards(&knots, 4, PriorVariant::WeightedRw, 10_000, 1.0, &ts, 404).unwrap();
    let q = hazard_ratio_range_quantile(&h, ts.len(), 0.95);
    verdict((9.0..=15.0).contains(&q), format!("95th percentile of max/min prior hazard: {q:.2} (range [9, 15])"))
}

fn toy_network(seed: u64) -> SurvivalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = [(0usize, vec![0usize, 1]), (1, vec![1, 2]), (2, vec![0, 1, 2])];
    let shape = [1.3, 0.9, 1.1];
    let scale = [2.0, 3.0, 2.5];
    let mut records = Vec::new();
    for (study, arms) in design {
        for t in arms {
            for _ in 0..40 {
                let age: f64 = rng.random_range(-1.0..1.0);
                let u: f64 = rng.random_range(1e-9..1.0);
                let time = scale[t] * (-u.ln() * (-0.3 * age).exp()).powf(1.0 / shape[t]);
                let cens = rng.random_range(0.5..6.0);
                records.push(Record { study, treatment: t, time: time.min(cens), event: time <= cens, covariates: vec![age] });
            }
        }
    }
    SurvivalDataset::new(
        vec!["S1".into(), "S2".into(), "S3".into()],
        vec!["A".into(), "B".into(), "C".into()],
        vec!["age".into()],
        records,
    )
    .unwrap()
}

fn gradient_suite() -> Outcome {
    let data = toy_network(505);
    let per = plan_per_study(&data, 3, QuantileType::Type7).unwrap();
    let common = plan_common(&data, 3, QuantileType::Type7).unwrap();
    let covs = CovariateDesign { prognostic: vec![0], ..Default::default() };
    let specs = vec![
        ("ph", ModelSpec::new(Family::Ph, 4, per.clone()).with_covariates(covs.clone())),
        ("ph-random", ModelSpec::new(Family::Ph, 4, per.clone()).with_effects(Effects::Random)),
        ("stratified", ModelSpec::new(Family::NphStratified, 4, per)),
        (
            "coef-effects",
            ModelSpec::new(Family::NphCoefEffects, 4, common).with_covariates(CovariateDesign {
                prognostic: vec![0],
                spline_main: vec![0],
                ..Default::default()
            }),
        ),
    ];
    let mut details = Vec::new();
    let mut worst_all = 0.0f64;
    for (name, spec) in specs {
        let model = NmaModel::new(spec, &data).unwrap();
        let coords: Vec<usize> = (0..model.layout().dim()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let theta = model.init_point(&mut rng, 1.0);
            worst = worst.max(gradient_discrepancy(&model, &theta, &coords, 1e-5).unwrap());
        }
        worst_all = worst_all.max(worst);
        details.push(format!("{name} {worst:.1e}"));
    }
    verdict(worst_all <= 1e-5, format!("max relative gradient error at 20 points: {}", details.join(", ")))
}

fn exponential_recovery() -> Outcome {
    let (rate_a, log_hr) = (0.2, -0.5);
    let data = simulate_network(
        &["S1"],
        &["A", "B"],
        vec![
            (0, 0, constant(rate_a), 500, 10.0),
            (0, 1, constant(rate_a * f64::exp(log_hr)), 500, 10.0),
        ],
        606,
    );
    let upper = data.max_time();
    let exp_plan = KnotPlan::common(KnotVector::new(0.0, upper, vec![]).unwrap(), "exponential");
    let (_, d1) = fit(&data, ModelSpec::new(Family::Ph, 1, exp_plan), 61);
    let (_, d4) = fit(&data, ModelSpec::new(Family::Ph, 4, plan_per_study(&data, 7, QuantileType::Type7).unwrap()), 62);
    let (m1, s1) = mean_sd(&param(&d1, "d[B]"));
    let (m4, s4) = mean_sd(&param(&d4, "d[B]"));
    let z1 = (m1 - log_hr).abs() / s1;
    let z4 = (m4 - log_hr).abs() / s4;

    // Gamma(D, T) posterior for the control rate under a flat prior on the log rate.
    let arm: Vec<&Record> = data.records().iter().filter(|r| r.treatment == 0).collect();
    let events = arm.iter().filter(|r| r.event).count() as f64;
    let exposure: f64 = arm.iter().map(|r| r.time).sum();
    let mu = param(&d1, "mu[S1]");
    let rates: Vec<f64> = mu.iter().map(|m| m.exp() / upper).collect();
    let (rate_mean, rate_sd) = mean_sd(&rates);
    let chains: Vec<Vec<f64>> = rates.chunks(d1.n_iter).map(|c| c.to_vec()).collect();
    let mcse = rate_sd / ess_bulk(&chains).unwrap().sqrt();
    let oracle = events / exposure;
    let oracle_sd = events.sqrt() / exposure;
    let rate_z = (rate_mean - oracle).abs() / mcse;
    let pass = z1 <= 3.0 && z4 <= 3.0 && rate_z <= 3.0 && (rate_sd / oracle_sd - 1.0).abs() <= 0.1;
    verdict(
        pass,
        format!(
            "d (true -0.5): kappa=1 {m1:.3} +/- {s1:.3} ({z1:.2} sd), kappa=4 {m4:.3} +/- {s4:.3} ({z4:.2} sd); \
             control rate {rate_mean:.5} vs Gamma oracle {oracle:.5} ({rate_z:.2} MCSE), sd {rate_sd:.5} vs {oracle_sd:.5}"
        ),
    )
}

fn proportional_data(seed: u64) -> SurvivalDataset {
    simulate_network(
        &["S1", "S2"],
        &["A", "B", "C"],
        vec![
            (0, 0, bathtub(-1.0), 250, 8.0),
            (0, 1, bathtub(-1.4), 250, 8.0),
            (1, 0, bathtub(-0.8), 250, 7.0),
            (1, 2, bathtub(-1.0), 250, 7.0),
        ],
        seed,
    )
}

/// Coverage and LOOIC agreement on one proportional-hazards dataset.
fn proportional_replicate(seed: u64) -> (usize, usize, f64, f64) {
    let data = proportional_data(seed);
    let plan = plan_common(&data, 7, QuantileType::Type7).unwrap();
    let (pm, pd) = fit(&data, ModelSpec::new(Family::Ph, 4, plan.clone()), 71);
    let (cm, cd) = fit(&data, ModelSpec::new(Family::NphCoefEffects, 4, plan), 72);
    let mut covered = 0;
    let mut total = 0;
    let names: Vec<String> = cm.derived_quantities(cd.draw(0)).into_iter().map(|(n, _)| n).collect();
    let per_draw: Vec<Vec<(String, f64)>> = cd.iter_draws().map(|t| cm.derived_quantities(t)).collect();
    for (j, name) in names.iter().enumerate() {
        if !name.starts_with("d_alpha[") {
            continue;
        }
        let v: Vec<f64> = per_draw.iter().map(|q| q[j].1).collect();
        total += 1;
        if quantile(&v, 0.025) <= 0.0 && quantile(&v, 0.975) >= 0.0 {
            covered += 1;
        }
    }
    let loo_ph = psis_loo(&pd, &pm.record_studies(), data.study_labels()).looic;
    let loo_coef = psis_loo(&cd, &cm.record_studies(), data.study_labels()).looic;
    (covered, total, loo_coef, loo_ph)
}

/// Every one of five independent replicates must meet both conditions.
fn proportionality_reduction() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for seed in 1..=5 {
        let (covered, total, loo_coef, loo_ph) = proportional_replicate(seed);
        let frac = covered as f64 / total as f64;
        pass &= total > 0 && frac >= 0.9 && (loo_coef - loo_ph).abs() <= 4.0;
        details.push(format!("{covered}/{total} cover 0, LOOIC diff {:+.1}", loo_coef - loo_ph));
    }
    verdict(
        pass,
        format!("coef-effects vs PH on 5 replicates (need >= 90% coverage, |LOOIC diff| <= 4): {}", details.join("; ")),
    )
}

fn knot_count_robustness() -> Outcome {
    let data = proportional_data(808);
    let ts = grid(0.0, data.max_time(), 81);
    let medians = |n_internal: usize, seed: u64| -> Vec<Vec<f64>> {
        let plan = plan_per_study(&data, n_internal, QuantileType::Type7).unwrap();
        let (model, draws) = fit(&data, ModelSpec::new(Family::Ph, 4, plan), seed);
        let mut out = Vec::new();
        for pop in 0..data.n_studies() {
            let curves = predict_curves(&model, &draws, pop, &[0, 1, 2], &ts, None).unwrap();
            out.extend(
                curves.into_iter().filter(|c| c.quantity == Quantity::Survival).map(|c| c.ribbon.median),
            );
        }
        out
    };
    let base = medians(7, 81);
    let doubled = medians(14, 82);
    let worst = base
        .iter()
        .zip(&doubled)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    verdict(worst <= 0.02, format!("max change in posterior median survival, 7 -> 14 internal knots: {worst:.4} (limit 0.02)"))
}

fn psis_vs_exact_loo() -> Outcome {
    let data = simulate_network(
        &["S1"],
        &["A", "B"],
        vec![(0, 0, constant(0.3), 10, 4.0), (0, 1, constant(0.5), 10, 4.0)],
        909,
    );
    let upper = data.max_time();
    let plan = KnotPlan::common(KnotVector::new(0.0, upper, vec![]).unwrap(), "exponential");
    let (model, draws) = fit(&data, ModelSpec::new(Family::Ph, 1, plan), 91);
    assert_eq!(model.layout().dim(), 2, "two-parameter exponential model");
    let psis = psis_loo(&draws, &model.record_studies(), data.study_labels());

    // Exact leave-one-out by quadrature over (mu, d) on a wide uniform grid.
    let (m0, s0) = mean_sd(&param(&draws, "mu[S1]"));
    let (m1, s1) = mean_sd(&param(&draws, "d[B]"));
    let n_grid = 801;
    let n = model.n_records();
    let mut log_post = Vec::with_capacity(n_grid * n_grid);
    let mut pointwise = Vec::with_capacity(n_grid * n_grid * n);
    let mut ll = vec![0.0; n];
    for i in 0..n_grid {
        for j in 0..n_grid {
            let theta = [
                m0 + s0 * (-12.0 + 24.0 * i as f64 / (n_grid - 1) as f64),
                m1 + s1 * (-12.0 + 24.0 * j as f64 / (n_grid - 1) as f64),
            ];
            log_post.push(model.evaluate(&theta, None, Some(&mut ll)).unwrap());
            pointwise.extend_from_slice(&ll);
        }
    }
    let lse = |v: &mut dyn Iterator<Item = f64>| -> f64 {
        let xs: Vec<f64> = v.collect();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let full = lse(&mut log_post.iter().copied());
    let mut elpd_exact = 0.0;
    for r in 0..n {
        let without = lse(&mut log_post.iter().enumerate().map(|(g, lp)| lp - pointwise[g * n + r]));
        elpd_exact += full - without;
    }
    let looic_exact = -2.0 * elpd_exact;
    let gap = (psis.looic - looic_exact).abs();
    verdict(
        gap <= 0.5,
        format!("LOOIC PSIS {:.3} vs exact {looic_exact:.3} (|diff| {gap:.3}, limit 0.5), max Pareto k {:.2}", psis.looic,
            psis.points.iter().filter_map(|p| p.pareto_k).fold(f64::NEG_INFINITY, f64::max)),
    )
}

fn case_study() -> Outcome {
    let Ok(path) = std::env::var("MSNMA_NSCLC_DATA") else {
        return Outcome::Waived("NSCLC dataset not available (set MSNMA_NSCLC_DATA to a study,treatment,time,status CSV)".into());
    };
    let bytes = std::fs::read(&path).expect("NSCLC data readable");
    let data = msnma_cli::ingest::read_dataset(bytes.as_slice(), Some(&[]), None).unwrap();
    let eracle = data.study_id("ERACLE").expect("study ERACLE present");
    let eracle_end = data.last_time(eracle);
    let coef_plan = |n: usize| plan_common(&data, n, QuantileType::Type7).unwrap().add_knot(eracle_end, None).unwrap();
    let per = plan_per_study(&data, 7, QuantileType::Type7).unwrap();
    let models = [
        ("PH", ModelSpec::new(Family::Ph, 4, per.clone()), 7493.1),
        ("coef 8", ModelSpec::new(Family::NphCoefEffects, 4, coef_plan(7)), 7470.8),
        ("coef 11", ModelSpec::new(Family::NphCoefEffects, 4, coef_plan(10)), 7472.5),
        ("stratified", ModelSpec::new(Family::NphStratified, 4, per), 7489.8),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    let mut per_study: Vec<Vec<(String, f64)>> = Vec::new();
    for (i, (name, spec, target)) in models.into_iter().enumerate() {
        let (m, d) = fit(&data, spec, 1000 + i as u64);
        let r = psis_loo(&d, &m.record_studies(), data.study_labels());
        pass &= (r.looic - target).abs() <= 5.0;
        details.push(format!("{name} {:.1} (published {target})", r.looic));
        per_study.push(r.per_study);
    }
    for (j, label) in data.study_labels().iter().enumerate() {
        let best = (0..4).min_by(|&a, &b| per_study[a][j].1.total_cmp(&per_study[b][j].1)).unwrap();
        let expected = if label == "ERACLE" { 3 } else { 1 };
        // Either coefficient-effects fit counts as the coefficient-effects family.
        let ok = best == expected || (expected == 1 && best == 2);
        pass &= ok;
    }
    verdict(pass, format!("total LOOIC: {}", details.join(", ")))
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_msnma")).args(args).output().unwrap();
    assert!(out.status.success(), "msnma {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(root: &Path) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    std::fs::create_dir_all(root).unwrap();
    let sim = root.join("sim.toml");
    std::fs::write(
        &sim,
        "[[simulate.arms]]\nstudy = \"S1\"\ntreatment = \"A\"\nn = 80\nrate = 0.3\ncensor_at = 6.0\n\
         [[simulate.arms]]\nstudy = \"S1\"\ntreatment = \"B\"\nn = 80\nrate = 0.2\ncensor_at = 6.0\n\
         [[simulate.arms]]\nstudy = \"S2\"\ntreatment = \"A\"\nn = 80\nrate = 0.25\ncensor_at = 5.0\n\
         [[simulate.arms]]\nstudy = \"S2\"\ntreatment = \"C\"\nn = 80\nrate = 0.35\ncensor_at = 5.0\n",
    )
    .unwrap();
    let cfg = root.join("fit.toml");
    std::fs::write(
        &cfg,
        "name = \"ph\"\n[model]\nkappa = 3\n[knots]\nn_internal = 3\n[sampler]\nn_chains = 2\nwarmup = 200\nsampling = 200\n\
         [prior_predictive]\nn_draws = 2000\ngrid_points = 40\n",
    )
    .unwrap();
    let out = root.join("out");
    let data = out.join("simulated.csv");
    run_cli(&["simulate", "--config", &s(&sim), "--out-dir", &s(&out), "--seed", "11"]);
    run_cli(&["knots", "--data", &s(&data), "--config", &s(&cfg), "--out-dir", &s(&out)]);
    run_cli(&["fit", "--data", &s(&data), "--config", &s(&cfg), "--out-dir", &s(&out), "--seed", "12"]);
    run_cli(&["predict", "--out-dir", &s(&out), "--population", "S2"]);
    run_cli(&["loo", "--out-dir", &s(&out)]);
    run_cli(&["export-mvn", "--out-dir", &s(&out), "--population", "S1", "--treatments", "A,B"]);
    run_cli(&["prior-predictive", "--data", &s(&data), "--config", &s(&cfg), "--out-dir", &s(&out), "--seed", "13"]);
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    let mut names: Vec<String> = std::fs::read_dir(a.join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".timing.json"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join("out").join(n)).ok() != std::fs::read(b.join("out").join(n)).ok())
        .collect();

    let data = proportional_data(1111);
    let plan = plan_per_study(&data, 3, QuantileType::Type7).unwrap();
    let model = NmaModel::new(ModelSpec::new(Family::Ph, 3, plan), &data).unwrap();
    let config = SamplerConfig { warmup: 200, sampling: 100, seed: 5, ..SamplerConfig::default() };
    let same = sample(&model, &config).unwrap() == sample(&model, &config).unwrap();
    verdict(
        differing.is_empty() && same && names.len() >= 15,
        format!(
            "{} pipeline files compared, {} differ; in-process resampling identical: {same}",
            names.len(),
            differing.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MSNMA_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 11] = [
        (1, "basis correctness", basis_correctness),
        (2, "constant-hazard identity", constant_hazard_identity),
        (3, "prior invariance", prior_invariance),
        (4, "factor-of-12 calibration", factor_of_twelve),
        (5, "gradient suite", gradient_suite),
        (6, "exponential recovery", exponential_recovery),
        (7, "proportionality reduction", proportionality_reduction),
        (8, "knot-count robustness", knot_count_robustness),
        (9, "PSIS-LOO vs exact LOO", psis_vs_exact_loo),
        (10, "case-study reproduction", case_study),
        (11, "determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Waived(d) => ("WAIVED", d),
        };
        println!("criterion {id:>2} [{name}]: {tag}; {detail} ({secs:.1}s)");
        if matches!(outcome, Outcome::Fail(_)) {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
