//! Small statistical utilities backing the sampling verification suite.

/// Survival function of the chi-square distribution with `dof` degrees of
/// freedom: `P(X > x) = Q(dof/2, x/2)`, the regularized upper incomplete
/// gamma function.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof / 2.0, x / 2.0)
}

/// Regularized upper incomplete gamma Q(a, x) via the series expansion for
/// x < a + 1 and the Lentz continued fraction otherwise.
fn gamma_q(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-15 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Lanczos approximation of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_chi_square_tail_values() {
        // Q(x; k) reference points (R: pchisq(x, k, lower.tail=FALSE)).
        assert!((chi_square_sf(3.841, 1.0) - 0.05).abs() < 1e-3);
        assert!((chi_square_sf(5.991, 2.0) - 0.05).abs() < 1e-3);
        assert!((chi_square_sf(18.307, 10.0) - 0.05).abs() < 1e-3);
        assert!((chi_square_sf(118.498, 100.0) - 0.1).abs() < 1e-3);
    }

    #[test]
    fn tail_monotone_in_x() {
        let mut prev = 1.0;
        for i in 1..40 {
            let p = chi_square_sf(i as f64, 5.0);
            assert!(p <= prev && (0.0..=1.0).contains(&p));
            prev = p;
        }
    }

    #[test]
    fn median_near_dof() {
        // Chi-square median ≈ dof(1 - 2/(9 dof))³.
        for dof in [2.0f64, 8.0, 50.0] {
            let med = dof * (1.0 - 2.0 / (9.0 * dof)).powi(3);
            let p = chi_square_sf(med, dof);
            assert!((p - 0.5).abs() < 0.02, "dof {dof}: p {p}");
        }
    }
}
