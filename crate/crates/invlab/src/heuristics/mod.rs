//! Classical benchmark policies and the Gamma-distribution math they need.
//!
//! Levels for lead-time policies use the closure of Gamma sums: per-period
//! demands are i.i.d. Gamma(shape, scale), so the sum over n periods is
//! exactly Gamma(n * shape, scale) — no numeric convolution required.

pub mod gamma;
pub mod golden;

pub use golden::golden_section_max;

use crate::envs::EconStatics;

/// Gamma distribution parametrized by shape and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaDist {
    pub shape: f64,
    pub scale: f64,
}

impl GammaDist {
    pub fn new(shape: f64, scale: f64) -> Self {
        assert!(shape > 0.0 && scale > 0.0, "gamma parameters must be > 0");
        GammaDist { shape, scale }
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn variance(&self) -> f64 {
        self.shape * self.scale * self.scale
    }

    /// Distribution of the sum of `n` i.i.d. copies.
    pub fn sum_of(&self, n: usize) -> GammaDist {
        assert!(n >= 1);
        GammaDist {
            shape: self.shape * n as f64,
            scale: self.scale,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        gamma::reg_lower_gamma(self.shape, x / self.scale)
    }

    /// Inverse cdf; `u` must lie strictly inside (0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        gamma::inv_reg_lower_gamma(self.shape, u) * self.scale
    }
}

/// Method-of-moments Gamma fit of a demand window.
#[derive(Debug, Clone, Copy)]
pub struct MomentFit {
    pub dist: GammaDist,
    /// Set when the window was (near-)constant and the std had to be floored.
    pub degenerate: bool,
}

/// Fit a Gamma by matching the sample mean and population (divisor n)
/// standard deviation. The std is floored at 1e-6 * max(mean, 1) so constant
/// windows produce a sharp but proper distribution instead of NaNs.
pub fn fit_gamma_moments(window: &[f64]) -> MomentFit {
    assert!(!window.is_empty(), "usage error: empty demand window");
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return MomentFit {
            dist: GammaDist::new(1.0, 1e-6),
            degenerate: true,
        };
    }
    let var = window.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let floor = 1e-6 * mean.max(1.0);
    let std = var.sqrt();
    let (std, degenerate) = if std < floor { (floor, true) } else { (std, false) };
    let shape = (mean / std) * (mean / std);
    let scale = std * std / mean;
    MomentFit {
        dist: GammaDist::new(shape, scale),
        degenerate,
    }
}

/// Which underage/overage pair the critical ratio uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    /// c_u = p - c + b, c_o = h.
    Standard,
    /// Dual sourcing under lost sales: c_u = p - c_e + b - (c_e - c_r), c_o = h.
    DualLostSales,
    /// Dual sourcing under backlogging: c_u = b - (c_e - c_r), c_o = h.
    DualBacklog,
}

/// Newsvendor critical ratio c_u / (c_u + c_o).
pub fn critical_ratio(econ: &EconStatics, mode: RatioMode) -> crate::Result<f64> {
    let (c_u, c_o) = match mode {
        RatioMode::Standard => (econ.price - econ.cost + econ.penalty, econ.holding),
        RatioMode::DualLostSales => (
            econ.price - econ.expedited_cost + econ.penalty
                - (econ.expedited_cost - econ.regular_cost),
            econ.holding,
        ),
        RatioMode::DualBacklog => (
            econ.penalty - (econ.expedited_cost - econ.regular_cost),
            econ.holding,
        ),
    };
    if c_u <= 0.0 || c_o <= 0.0 {
        return Err(crate::Error::Usage(format!(
            "critical ratio needs positive costs, got c_u={c_u}, c_o={c_o}"
        )));
    }
    Ok(c_u / (c_u + c_o))
}

/// Order-up-to level for the single-period newsvendor: the critical quantile
/// of the demand distribution.
pub fn newsvendor_level(econ: &EconStatics, dist: &GammaDist) -> crate::Result<f64> {
    Ok(dist.quantile(critical_ratio(econ, RatioMode::Standard)?))
}

/// Base-stock action: order up to `level` from `position`, never negative.
pub fn base_stock_action(level: f64, position: f64) -> f64 {
    (level - position).max(0.0)
}

/// Order-up-to level on the inventory position for a lead time of L periods:
/// the critical quantile of the (L+1)-period demand sum.
pub fn leadtime_base_stock(econ: &EconStatics, dist: &GammaDist, lead_time: usize) -> crate::Result<f64> {
    let ratio = critical_ratio(econ, RatioMode::Standard)?;
    Ok(dist.sum_of(lead_time + 1).quantile(ratio))
}

/// Levels for the vector base-stock policy. `levels[i]` is the critical
/// quantile of the (i+1)-period demand sum, i = 0..=L, so levels are
/// nondecreasing in i and `levels[L]` equals the simple base-stock level.
pub fn leadtime_vector_base_stock(
    econ: &EconStatics,
    dist: &GammaDist,
    lead_time: usize,
) -> crate::Result<Vec<f64>> {
    let ratio = critical_ratio(econ, RatioMode::Standard)?;
    (1..=lead_time + 1)
        .map(|n| Ok(dist.sum_of(n).quantile(ratio)))
        .collect()
}

/// Vector base-stock action. The constraint for `levels[i]` counts the `i`
/// newest pipeline slots (the units arriving in the last i periods of the
/// (i+1)-period window the level covers); the i = L constraint is the plain
/// position-based base stock, so the vector policy never orders more than
/// the simple one.
pub fn vector_base_stock_action(levels: &[f64], endo: &[f64]) -> f64 {
    let lead = endo.len();
    debug_assert_eq!(levels.len(), lead + 1);
    let mut slack = f64::INFINITY;
    let mut newest_sum = 0.0;
    for i in 0..=lead {
        if i > 0 {
            newest_sum += endo[lead - i];
        }
        slack = slack.min(levels[i] - newest_sum);
    }
    slack.max(0.0)
}

/// Optimal expedited order-up-to level for consecutive-lead-time dual
/// sourcing: the critical quantile of the (L_e + 1)-period demand sum at the
/// dual critical ratio.
pub fn fukuda_expedited_level(
    econ: &EconStatics,
    dist: &GammaDist,
    expedited_lead_time: usize,
    mode: RatioMode,
) -> crate::Result<f64> {
    let ratio = critical_ratio(econ, mode)?;
    Ok(dist.sum_of(expedited_lead_time + 1).quantile(ratio))
}

/// Single-index dual base-stock: raise the inventory position to s_e with
/// expedited units, then to s_r with regular units.
pub fn single_index_dual(s_e: f64, s_r: f64, position: f64) -> (f64, f64) {
    debug_assert!(s_e <= s_r, "usage error: s_e must be <= s_r");
    let q_e = (s_e - position).max(0.0);
    let q_r = (s_r - (position + q_e)).max(0.0);
    (q_e, q_r)
}

/// Predict-then-optimize decision rule: sort the predicted quantiles (the
/// crossing fix), piecewise-linearly interpolate the critical ratio on the
/// quantile grid (clamping outside its ends), and order up to the result.
pub fn pto_decide(quantile_preds: &[f64], levels: &[f64], ratio: f64, on_hand: f64) -> f64 {
    assert_eq!(
        quantile_preds.len(),
        levels.len(),
        "usage error: prediction / quantile-level count mismatch"
    );
    let mut preds = quantile_preds.to_vec();
    preds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let target = interpolate_quantile(&preds, levels, ratio);
    (target - on_hand).max(0.0)
}

fn interpolate_quantile(sorted_preds: &[f64], levels: &[f64], ratio: f64) -> f64 {
    let n = levels.len();
    if ratio <= levels[0] {
        return sorted_preds[0];
    }
    if ratio >= levels[n - 1] {
        return sorted_preds[n - 1];
    }
    for i in 0..n - 1 {
        if ratio <= levels[i + 1] {
            let w = (ratio - levels[i]) / (levels[i + 1] - levels[i]);
            return sorted_preds[i] + w * (sorted_preds[i + 1] - sorted_preds[i]);
        }
    }
    sorted_preds[n - 1]
}

/// Best base-stock level by golden-section search of `eval` (level ->
/// average reward) on [lower, upper].
pub fn best_base_stock(eval: impl Fn(f64) -> f64, lower: f64, upper: f64) -> f64 {
    golden_section_max(eval, lower, upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn econ(p: f64, c: f64, h: f64, b: f64) -> EconStatics {
        EconStatics {
            price: p,
            cost: c,
            holding: h,
            penalty: b,
            expedited_cost: c,
            regular_cost: c,
            return_value: 0.0,
        }
    }

    #[test]
    fn exponential_median_closed_form() {
        let d = GammaDist::new(1.0, 100.0);
        let q = d.quantile(0.5);
        assert!((q - 100.0 * 2.0f64.ln()).abs() < 1e-8, "q={q}");
    }

    #[test]
    fn quantile_cdf_inverse_identity_across_shapes() {
        for &shape in &[0.1, 0.5, 1.0, 4.0, 12.0, 50.0] {
            let d = GammaDist::new(shape, 17.0);
            for &x in &[0.3 * d.mean(), d.mean(), 2.5 * d.mean()] {
                let u = d.cdf(x);
                if u > 1e-12 && u < 1.0 - 1e-12 {
                    let back = d.quantile(u);
                    assert!(
                        (back - x).abs() < 1e-8 * x.max(1.0),
                        "shape={shape} x={x} back={back}"
                    );
                }
            }
        }
    }

    /// Independent oracle: adaptive Simpson quadrature of the Gamma pdf with
    /// closed-form Gamma(4) = 3!, plus bisection for the quantile.
    fn oracle_cdf_shape4_scale25(x: f64) -> f64 {
        let pdf = |t: f64| {
            if t <= 0.0 {
                0.0
            } else {
                let shape = 4.0;
                let scale = 25.0;
                t.powf(shape - 1.0) * (-t / scale).exp() / (6.0 * scale.powf(shape))
            }
        };
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, fm: f64, eps: f64, depth: usize) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() < 15.0 * eps {
                left + right + (left + right - whole) / 15.0
            } else {
                simpson(f, a, m, fa, fm, flm, eps / 2.0, depth - 1)
                    + simpson(f, m, b, fm, fb, frm, eps / 2.0, depth - 1)
            }
        }
        let m = 0.5 * x;
        simpson(&pdf, 0.0, x, pdf(0.0), pdf(x), pdf(m), 1e-12, 40)
    }

    #[test]
    fn quantile_matches_quadrature_bisection_oracle() {
        let d = GammaDist::new(4.0, 25.0);
        let target = 0.9167f64;
        // oracle: bisection on the quadrature cdf
        let (mut lo, mut hi) = (0.0, 2000.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if oracle_cdf_shape4_scale25(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let ours = d.quantile(target);
        assert!(
            (ours - oracle).abs() / oracle < 1e-6,
            "ours={ours} oracle={oracle}"
        );
    }

    #[test]
    fn moment_fit_cases() {
        // mean 100, population std 50 -> shape 4, scale 25
        let window = [50.0, 150.0, 50.0, 150.0];
        let fit = fit_gamma_moments(&window);
        assert!(!fit.degenerate);
        assert!((fit.dist.shape - 4.0).abs() < 1e-12);
        assert!((fit.dist.scale - 25.0).abs() < 1e-12);

        // constant window: floored std, sharp distribution around the value
        let fit = fit_gamma_moments(&[42.0; 16]);
        assert!(fit.degenerate);
        assert!(fit.dist.shape.is_finite() && fit.dist.scale > 0.0);
        let q = fit.dist.quantile(0.9);
        assert!((q - 42.0).abs() < 0.01, "q={q}");

        let fit = fit_gamma_moments(&[0.0; 8]);
        assert!(fit.degenerate);
    }

    #[test]
    fn moment_fit_recovers_true_parameters_on_many_draws() {
        let mut rng = crate::rng::CounterRng::new(2, &[crate::rng::tag("fit")]);
        let draws: Vec<f64> = (0..1_000_000).map(|_| rng.gamma(2.0, 30.0)).collect();
        let fit = fit_gamma_moments(&draws);
        assert!((fit.dist.shape - 2.0).abs() / 2.0 < 0.02, "shape={}", fit.dist.shape);
        assert!((fit.dist.scale - 30.0).abs() / 30.0 < 0.02, "scale={}", fit.dist.scale);
    }

    #[test]
    fn critical_ratio_cases() {
        let e = econ(100.0, 50.0, 5.0, 5.0);
        let r = critical_ratio(&e, RatioMode::Standard).unwrap();
        assert!((r - 55.0 / 60.0).abs() < 1e-12);

        let dual = EconStatics {
            price: 100.0,
            cost: 50.0,
            holding: 5.0,
            penalty: 5.0,
            expedited_cost: 50.0,
            regular_cost: 48.0,
            return_value: 0.0,
        };
        let r = critical_ratio(&dual, RatioMode::DualLostSales).unwrap();
        assert!((r - 53.0 / 58.0).abs() < 1e-12);
        let r = critical_ratio(&dual, RatioMode::DualBacklog).unwrap();
        assert!((r - 3.0 / 8.0).abs() < 1e-12);

        // homogeneity: scaling all costs leaves the ratio unchanged
        let scaled = econ(300.0, 150.0, 15.0, 15.0);
        assert!(
            (critical_ratio(&scaled, RatioMode::Standard).unwrap()
                - critical_ratio(&e, RatioMode::Standard).unwrap())
            .abs()
                < 1e-12
        );

        // c_u <= 0 is rejected
        let bad = econ(10.0, 10.0, 5.0, 0.0);
        assert!(critical_ratio(&bad, RatioMode::Standard).is_err());
    }

    #[test]
    fn newsvendor_level_and_action() {
        // ratio 0.5 with an exponential: level = scale * ln 2
        let e = econ(10.0, 6.0, 4.0, 0.0);
        let d = GammaDist::new(1.0, 100.0);
        let level = newsvendor_level(&e, &d).unwrap();
        assert!((level - 100.0 * 2.0f64.ln()).abs() < 1e-8);
        assert_eq!(base_stock_action(level, level + 5.0), 0.0);
        assert!((base_stock_action(level, 10.0) - (level - 10.0)).abs() < 1e-12);

        // non-omniscient on a constant window orders (about) the constant
        let fit = fit_gamma_moments(&[25.0; 32]);
        let e = econ(100.0, 50.0, 5.0, 5.0);
        let level = newsvendor_level(&e, &fit.dist).unwrap();
        assert!((level - 25.0).abs() < 0.1, "level={level}");
    }

    #[test]
    fn leadtime_levels_ordering_and_quadrature_case() {
        let e = econ(100.0, 50.0, 5.0, 5.0); // ratio 55/60
        let d = GammaDist::new(1.0, 100.0); // mu=100, nu=1
        let levels = leadtime_vector_base_stock(&e, &d, 2).unwrap();
        assert_eq!(levels.len(), 3);
        // levels for longer demand sums are larger
        assert!(levels[0] < levels[1] && levels[1] < levels[2]);
        let simple = leadtime_base_stock(&e, &d, 2).unwrap();
        assert_eq!(levels[2], simple);
        // 3-period sum of exponentials = Gamma(3, 100); check against the
        // inverse-identity of our cdf at the returned level
        let sum3 = d.sum_of(3);
        assert!((sum3.cdf(simple) - 55.0 / 60.0).abs() < 1e-9);
    }

    #[test]
    fn vector_policy_never_orders_more_than_simple() {
        let e = econ(100.0, 50.0, 5.0, 5.0);
        let d = GammaDist::new(4.0, 25.0);
        let lead = 3;
        let levels = leadtime_vector_base_stock(&e, &d, lead).unwrap();
        let simple = leadtime_base_stock(&e, &d, lead).unwrap();
        let mut rng = crate::rng::CounterRng::new(6, &[crate::rng::tag("vec")]);
        for _ in 0..2000 {
            let endo: Vec<f64> = (0..lead).map(|_| rng.uniform_in(0.0, 300.0)).collect();
            let position: f64 = endo.iter().sum();
            let vq = vector_base_stock_action(&levels, &endo);
            let sq = base_stock_action(simple, position);
            assert!(vq <= sq + 1e-12, "vq={vq} sq={sq}");
            assert!(vq >= 0.0);
        }
    }

    #[test]
    fn single_index_cases() {
        assert_eq!(single_index_dual(15.0, 25.0, 10.0), (5.0, 10.0));
        assert_eq!(single_index_dual(15.0, 25.0, 20.0), (0.0, 5.0));
        assert_eq!(single_index_dual(15.0, 25.0, 30.0), (0.0, 0.0));
    }

    #[test]
    fn pto_interpolation() {
        let levels = [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99];
        let preds = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        // exact grid hit
        assert_eq!(pto_decide(&preds, &levels, 0.5, 0.0), 4.0);
        // 0.95 interpolates between the 0.9 and 0.99 predictions
        let want = 6.0 + (0.95 - 0.9) / (0.99 - 0.9);
        assert!((pto_decide(&preds, &levels, 0.95, 0.0) - want).abs() < 1e-12);
        // clamped outside the grid
        assert_eq!(pto_decide(&preds, &levels, 0.001, 0.0), 1.0);
        assert_eq!(pto_decide(&preds, &levels, 0.9999, 0.0), 7.0);
        // unsorted predictions are sorted before use
        let shuffled = [5.0, 4.0, 6.0, 1.0, 3.0, 7.0, 2.0];
        assert_eq!(
            pto_decide(&shuffled, &levels, 0.5, 0.0),
            pto_decide(&preds, &levels, 0.5, 0.0)
        );
        // on-hand above the target orders nothing
        assert_eq!(pto_decide(&preds, &levels, 0.5, 10.0), 0.0);
    }
}
