//! Bisection on a monotone scalar response.

/// Outcome of a bisection run.
#[derive(Debug, Clone, PartialEq)]
pub struct Bisection {
    /// Parameter value returned (always on the side of the bracket meeting the target).
    pub x: f64,
    /// Response at `x`.
    pub value: f64,
    pub iterations: usize,
    /// True if `|value - target| <= tol` was reached before the bracket collapsed.
    pub converged: bool,
    /// Count of evaluations that fell outside the response range of the current bracket.
    pub monotonicity_violations: usize,
}

/// Find `x` in `[lo, hi]` with `g(x)` within `tol` of `target`, where `g(lo) >= target >= g(hi)`
/// (a decreasing response; pass endpoints swapped for an increasing one).
///
/// `g_lo` and `g_hi` are the already-evaluated end responses. If the tolerance is never met
/// the returned point is the `lo`-side end of the final bracket, whose response is still
/// at or above the target.
#[allow(clippy::too_many_arguments)]
pub fn bisect_decreasing<F>(
    mut g: F,
    mut lo: f64,
    mut hi: f64,
    mut g_lo: f64,
    mut g_hi: f64,
    target: f64,
    tol: f64,
    max_iter: usize,
) -> Bisection
where
    F: FnMut(f64) -> f64,
{
    let mut violations = 0;
    for it in 1..=max_iter {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            return Bisection {
                x: lo,
                value: g_lo,
                iterations: it,
                converged: false,
                monotonicity_violations: violations,
            };
        }
        let v = g(mid);
        if v > g_lo || v < g_hi {
            violations += 1;
        }
        if (v - target).abs() <= tol {
            return Bisection {
                x: mid,
                value: v,
                iterations: it,
                converged: true,
                monotonicity_violations: violations,
            };
        }
        if v > target {
            lo = mid;
            g_lo = v;
        } else {
            hi = mid;
            g_hi = v;
        }
    }
    Bisection { x: lo, value: g_lo, iterations: max_iter, converged: false, monotonicity_violations: violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_root_of_decreasing_function() {
        let g = |x: f64| 1.0 - x * x;
        let r = bisect_decreasing(g, 0.0, 1.0, 1.0, 0.0, 0.75, 1e-10, 200);
        assert!(r.converged);
        assert!((r.x - 0.5).abs() < 1e-9);
        assert_eq!(r.monotonicity_violations, 0);
    }

    #[test]
    fn works_for_increasing_response_with_swapped_bracket() {
        let g = |x: f64| x.powi(3);
        let r = bisect_decreasing(g, 2.0, 0.0, 8.0, 0.0, 1.0, 1e-12, 200);
        assert!((r.x - 1.0).abs() < 1e-9);
    }

    #[test]
    fn step_response_returns_feasible_side() {
        let g = |x: f64| if x < 0.3 { 1.0 } else { 0.0 };
        let r = bisect_decreasing(g, 0.0, 1.0, 1.0, 0.0, 0.5, 1e-3, 60);
        assert!(!r.converged);
        assert_eq!(r.value, 1.0);
        assert!(r.x < 0.3 && r.x > 0.29);
    }
}
