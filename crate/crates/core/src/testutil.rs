//! Independent numerical oracles for unit tests.

/// Central finite-difference gradient of `f` at `x`.
pub(crate) fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let dn = f(&y);
            y[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Relative error with the denominator floored at one, so that components
/// near zero are compared absolutely.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Adaptive Simpson quadrature.
pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Simulated three-study network: S1 compares A/B, S2 compares B/C and S3
/// compares A/B/C. Weibull event times with arm-specific shapes, uniform
/// censoring, and two covariates (continuous `age`, binary `sex`).
pub(crate) fn toy_network(seed: u64, per_arm: usize) -> crate::data::SurvivalDataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let design = [(0usize, vec![0usize, 1]), (1, vec![1, 2]), (2, vec![0, 1, 2])];
    let shape = [1.3, 0.9, 1.1];
    let scale = [2.0, 3.0, 2.5];
    let mut records = Vec::new();
    for (study, arms) in design {
        for t in arms {
            for _ in 0..per_arm {
                let age: f64 = rng.random_range(-1.0..1.0);
                let sex = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                let u: f64 = rng.random_range(1e-9..1.0);
                let time = scale[t] * (-u.ln() * (-0.3 * age).exp()).powf(1.0 / shape[t]);
                let cens = rng.random_range(0.5..6.0);
                records.push(crate::data::Record {
                    study,
                    treatment: t,
                    time: time.min(cens),
                    event: time <= cens,
                    covariates: vec![age, sex],
                });
            }
        }
    }
    crate::data::SurvivalDataset::new(
        vec!["S1".into(), "S2".into(), "S3".into()],
        vec!["A".into(), "B".into(), "C".into()],
        vec!["age".into(), "sex".into()],
        records,
    )
    .unwrap()
}
