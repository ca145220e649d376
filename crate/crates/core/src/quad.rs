//! Adaptive Simpson quadrature.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 40;

struct Panel {
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
}

/// Integrate `f` over `[a, b]` to absolute tolerance `tol`.
///
/// Uses the classic Richardson-corrected recursive Simpson rule; the tolerance
/// is halved on each bisection so the total error budget is respected.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::NonFinite(format!("integration limits [{a}, {b}]")));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let m = 0.5 * (lo + hi);
    let (fa, fm, fb) = (f(lo), f(m), f(hi));
    let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
    let panel = Panel { a: lo, m, b: hi, fa, fm, fb, whole };
    let v = recurse(&f, panel, tol.max(f64::EPSILON), MAX_DEPTH)?;
    Ok(sign * v)
}

fn recurse<F>(f: &F, p: Panel, tol: f64, depth: u32) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let lm = 0.5 * (p.a + p.m);
    let rm = 0.5 * (p.m + p.b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (p.m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
    let right = (p.b - p.m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
    let delta = left + right - p.whole;
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("integrand on [{}, {}]", p.a, p.b)));
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::QuadratureNonConvergence { lo: p.a, hi: p.b });
    }
    let l = Panel { a: p.a, m: lm, b: p.m, fa: p.fa, fm: flm, fb: p.fm, whole: left };
    let r = Panel { a: p.m, m: rm, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right };
    Ok(recurse(f, l, 0.5 * tol, depth - 1)? + recurse(f, r, 0.5 * tol, depth - 1)?)
}
