//! Golden-section search for a scalar maximizer on a bracket.

const INV_PHI: f64 = 0.618_033_988_749_894_9; // 1/phi

/// Maximize a unimodal `f` on `[lower, upper]`. Shrinks the bracket until it
/// is narrower than `1e-3 * upper` (or 60 iterations) and returns the
/// midpoint of the final bracket.
pub fn golden_section_max(f: impl Fn(f64) -> f64, lower: f64, upper: f64) -> f64 {
    assert!(upper >= lower, "usage error: upper < lower");
    if upper == lower {
        return lower;
    }
    let tol = 1e-3 * upper.abs().max(1e-12);
    let mut lo = lower;
    let mut hi = upper;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..60 {
        if hi - lo < tol {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}
