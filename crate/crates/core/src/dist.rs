//! Normal and Student t distribution functions.
//!
//! Thin wrappers over `statrs` and `libm` that work on tails directly so that extreme
//! probabilities keep their relative precision, plus the quantile polishing
//! needed for round trips between the t and z scales.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use statrs::function::beta::beta_reg;
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::rc::Rc;

/// Degrees of freedom above which the t distribution is replaced by the normal.
pub const NORMAL_DF_LIMIT: f64 = 1e7;

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal quantile. Lower-tail probabilities are inverted directly and
/// upper-tail ones by symmetry.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        -normal_lower_quantile(1.0 - p)
    } else {
        normal_lower_quantile(p)
    }
}

fn normal_lower_quantile(p: f64) -> f64 {
    let mut x = std_normal().inverse_cdf(p);
    for _ in 0..2 {
        let d = norm_pdf(x);
        if d <= 0.0 {
            break;
        }
        x -= (norm_cdf(x) - p) / d;
    }
    x
}

/// Upper `p` critical value, `z_p` with `P(Z > z_p) = p`.
pub fn norm_upper(p: f64) -> f64 {
    -norm_quantile(p)
}

/// Lower tail mass of a central t at `-|x|`.
fn t_tail(x: f64, df: f64) -> f64 {
    let h = df / (df + x * x);
    0.5 * beta_reg(0.5 * df, 0.5, h)
}

pub fn t_cdf(x: f64, df: f64) -> f64 {
    if df > NORMAL_DF_LIMIT {
        return norm_cdf(x);
    }
    if x.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = t_tail(x, df);
    if x <= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

pub fn t_sf(x: f64, df: f64) -> f64 {
    t_cdf(-x, df)
}

pub fn t_pdf(x: f64, df: f64) -> f64 {
    if df > NORMAL_DF_LIMIT {
        return norm_pdf(x);
    }
    StudentsT::new(0.0, 1.0, df).map(|d| d.pdf(x)).unwrap_or(f64::NAN)
}

/// Quantile of the central t with `df` degrees of freedom at lower-tail
/// probability `p`, for `p <= 0.5`. Polished with Newton steps on the tail.
fn t_lower_quantile(p: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df validated by caller");
    let mut x = dist.inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    for _ in 0..3 {
        let f = t_cdf(x, df) - p;
        let d = t_pdf(x, df);
        if d <= 0.0 || !d.is_finite() {
            break;
        }
        let step = f / d;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x.min(0.0)
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if df > NORMAL_DF_LIMIT {
        return norm_quantile(p);
    }
    if p > 0.5 {
        -t_lower_quantile(1.0 - p, df)
    } else {
        t_lower_quantile(p, df)
    }
}

/// Map a t statistic onto the z scale, `Phi^{-1}(F_df(t))`.
pub fn t_to_z_raw(t: f64, df: f64) -> f64 {
    if df > NORMAL_DF_LIMIT {
        return t;
    }
    if t == 0.0 {
        return 0.0;
    }
    // work in the lower tail of -|t| for precision
    let tail = t_tail(t.abs(), df);
    let z = norm_quantile(tail);
    if t > 0.0 {
        -z
    } else {
        z
    }
}

/// Inverse of [`t_to_z_raw`]: the t value whose z-scale image is `z`.
pub fn z_to_t(z: f64, df: f64) -> f64 {
    if df > NORMAL_DF_LIMIT {
        return z;
    }
    if z == 0.0 {
        return 0.0;
    }
    let tail = norm_cdf(-z.abs());
    let q = t_lower_quantile(tail, df);
    if z > 0.0 {
        -q
    } else {
        q
    }
}

/// Number of quadrature nodes over the chi scale of a noncentral t.
const CHI_NODES: usize = 48;
/// Below this many degrees of freedom the Laguerre rule loses accuracy.
const SMALL_DF: f64 = 12.0;
const SIMPSON_PANELS: usize = 800;

/// Quadrature rule for `E g(S)`, `S = sqrt(χ²_df / df)`: generalized
/// Gauss-Laguerre on `χ²/2` from the Golub-Welsch eigenproblem.
#[derive(Debug, Clone)]
pub struct ChiScaleRule {
    df: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ChiScaleRule {
    pub fn new(df: f64) -> Self {
        if df < SMALL_DF {
            return Self::simpson(df);
        }
        let n = CHI_NODES;
        let alpha = 0.5 * df - 1.0;
        let mut j = DMatrix::zeros(n, n);
        for i in 0..n {
            j[(i, i)] = 2.0 * i as f64 + alpha + 1.0;
            if i > 0 {
                let b = (i as f64 * (i as f64 + alpha)).sqrt();
                j[(i, i - 1)] = b;
                j[(i - 1, i)] = b;
            }
        }
        let eig = SymmetricEigen::new(j);
        let pairs = (0..n)
            .map(|i| ((2.0 * eig.eigenvalues[i].max(0.0) / df).sqrt(), eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        Self::from_pairs(df, pairs)
    }

    /// Composite Simpson over `v = sqrt(χ²/2)`, where the integrand stays smooth
    /// at the origin. Used for small `df`.
    fn simpson(df: f64) -> Self {
        let n = SIMPSON_PANELS;
        let vmax = (0.5 * df + 12.0 * (0.5 * df).sqrt() + 40.0).sqrt();
        let h = vmax / n as f64;
        let pairs = (0..=n)
            .map(|i| {
                let v = i as f64 * h;
                let coef = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let logd = if v > 0.0 {
                    (df - 1.0) * v.ln() - v * v
                } else if df == 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                ((2.0 / df).sqrt() * v, coef * logd.exp())
            })
            .collect();
        Self::from_pairs(df, pairs)
    }

    fn from_pairs(df: f64, mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.retain(|p| p.1 > 0.0);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self { df, nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1 / total).collect() }
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    fn expect<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&s, &w)| w * g(s)).sum()
    }

    /// `P(T <= x)` for `T` noncentral t with noncentrality `mu`.
    pub fn nct_cdf(&self, x: f64, mu: f64) -> f64 {
        if x.is_infinite() {
            return if x > 0.0 { 1.0 } else { 0.0 };
        }
        self.expect(|s| norm_cdf(x * s - mu))
    }

    pub fn nct_sf(&self, x: f64, mu: f64) -> f64 {
        if x.is_infinite() {
            return if x > 0.0 { 0.0 } else { 1.0 };
        }
        self.expect(|s| norm_cdf(mu - x * s))
    }

    pub fn nct_pdf(&self, x: f64, mu: f64) -> f64 {
        self.expect(|s| s * norm_pdf(x * s - mu))
    }
}

thread_local! {
    static CHI_RULES: RefCell<HashMap<u64, Rc<ChiScaleRule>>> = RefCell::new(HashMap::new());
}

/// Cached rule for `df` degrees of freedom.
pub fn chi_scale_rule(df: f64) -> Rc<ChiScaleRule> {
    CHI_RULES.with(|c| c.borrow_mut().entry(df.to_bits()).or_insert_with(|| Rc::new(ChiScaleRule::new(df))).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_round_trip() {
        for &p in &[1e-12, 1e-6, 0.025, 0.3, 0.5, 0.7, 0.975, 1.0 - 1e-9] {
            let x = norm_quantile(p);
            assert!((norm_cdf(x) - p).abs() < 1e-12 * p.max(1e-3) + 1e-15, "p = {p}");
        }
        assert!((norm_upper(0.025) - 1.959963984540054).abs() < 1e-12);
    }

    #[test]
    fn t_quantile_round_trip() {
        for &df in &[1.0, 3.0, 10.0, 46.0, 300.0] {
            for &p in &[1e-8, 0.01, 0.2, 0.5, 0.8, 0.975] {
                let x = t_quantile(p, df);
                assert!((t_cdf(x, df) - p).abs() < 1e-12, "df {df} p {p}");
            }
        }
    }

    #[test]
    fn central_case_of_noncentral_t_matches_t() {
        for &df in &[3.0, 10.0, 28.0, 46.0, 119.0, 2000.0] {
            let r = ChiScaleRule::new(df);
            for &x in &[-4.0, -2.0, -0.3, 0.0, 1.0, 2.5, 5.0] {
                assert!((r.nct_cdf(x, 0.0) - t_cdf(x, df)).abs() < 1e-9, "df {df} x {x}");
                assert!((r.nct_pdf(x, 0.0) - t_pdf(x, df)).abs() < 1e-9, "df {df} x {x}");
            }
        }
    }

    #[test]
    fn noncentral_t_reference_values() {
        // (x, df, mu, cdf, pdf)
        let cases = [
            (2.0, 10.0, 1.5, 0.6591540724421909, 0.31460591845019625),
            (2.048407141795244, 28.0, 2.19, 0.43857627780331865, 0.37874243815059205),
            (-1.0, 5.0, 0.5, 0.08244409105672337, 0.12118153902173243),
            (3.0, 46.0, 2.9, 0.5316747190358814, 0.37650799705166693),
            (0.5, 119.0, -0.7, 0.8846043473997722, 0.19357899340723783),
        ];
        for (x, df, mu, cdf, pdf) in cases {
            let r = ChiScaleRule::new(df);
            assert!((r.nct_cdf(x, mu) - cdf).abs() < 1e-9, "cdf df {df}");
            assert!((r.nct_sf(x, mu) - (1.0 - cdf)).abs() < 1e-9, "sf df {df}");
            assert!((r.nct_pdf(x, mu) - pdf).abs() < 1e-9, "pdf df {df}");
        }
    }

    #[test]
    fn known_t_critical_value() {
        // t_{0.975, 10} = 2.228138851986...
        assert!((t_quantile(0.975, 10.0) - 2.228_138_851_986_274).abs() < 1e-10);
    }

    #[test]
    fn z_to_t_inverts_t_to_z() {
        for &df in &[2.0, 7.0, 40.0] {
            for &t in &[-6.0, -1.3, 0.4, 2.5, 9.0] {
                let z = t_to_z_raw(t, df);
                assert!((z_to_t(z, df) - t).abs() < 1e-9 * t.abs().max(1.0));
            }
        }
    }

    #[test]
    fn t_cdf_reference_value() {
        // F_10(2) to 25 digits: 0.9633059826146298171910687
        assert!((t_cdf(2.0, 10.0) - 0.963_305_982_614_629_8).abs() < 1e-14);
        assert!((t_sf(2.0, 10.0) - 0.036_694_017_385_370_18).abs() < 1e-15);
    }
}
