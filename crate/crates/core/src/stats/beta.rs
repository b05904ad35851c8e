//! Beta distribution: regularized incomplete beta function and its inverse.

use statrs::function::gamma::ln_gamma;

/// Absolute tolerance of [`BetaDist::quantile`].
pub const QUANTILE_TOL: f64 = 1e-10;

const CF_EPS: f64 = 1e-15;
const FPMIN: f64 = 1e-300;
const CF_MAX_ITER: usize = 20_000;

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Beta(a, b) with `ln B(a, b)` cached, so repeated CDF and quantile
/// evaluations for one marginal skip the gamma functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaDist {
    a: f64,
    b: f64,
    ln_beta: f64,
}

impl BetaDist {
    pub fn new(a: f64, b: f64) -> Self {
        assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
        BetaDist { a, b, ln_beta: ln_beta(a, b) }
    }

    pub fn alpha(&self) -> f64 {
        self.a
    }

    pub fn beta(&self) -> f64 {
        self.b
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn variance(&self) -> f64 {
        let s = self.a + self.b;
        self.a * self.b / (s * s * (s + 1.0))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        ((self.a - 1.0) * x.ln() + (self.b - 1.0) * (1.0 - x).ln() - self.ln_beta).exp()
    }

    /// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let (a, b) = (self.a, self.b);
        let front = (a * x.ln() + b * (1.0 - x).ln() - self.ln_beta).exp();
        if x < (a + 1.0) / (a + b + 2.0) {
            front * continued_fraction(a, b, x) / a
        } else {
            1.0 - front * continued_fraction(b, a, 1.0 - x) / b
        }
    }

    /// Inverse CDF. Halley iteration from the usual closed-form starting
    /// guesses, kept inside a bisection bracket; converged to
    /// [`QUANTILE_TOL`] absolute.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return 1.0;
        }
        let (a, b) = (self.a, self.b);
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut x = self.initial_guess(p);
        // Roots within the tolerance of an endpoint (common for tiny shape
        // parameters) are resolved by the tail approximation itself.
        if x < QUANTILE_TOL {
            if self.cdf(QUANTILE_TOL) >= p {
                return x.max(0.0);
            }
            lo = QUANTILE_TOL;
            x = 0.5 * (lo + hi);
        } else if x > 1.0 - QUANTILE_TOL {
            if self.cdf(1.0 - QUANTILE_TOL) <= p {
                return x.min(1.0);
            }
            hi = 1.0 - QUANTILE_TOL;
            x = 0.5 * (lo + hi);
        }
        for _ in 0..300 {
            let err = self.cdf(x) - p;
            if err == 0.0 {
                return x;
            }
            if err < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let density = self.pdf(x);
            let mut next = f64::NAN;
            if density > 0.0 && density.is_finite() {
                let u = err / density;
                let curvature = u * ((a - 1.0) / x - (b - 1.0) / (1.0 - x));
                next = x - u / (1.0 - 0.5 * curvature.min(1.0));
            }
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() < 1e-3 * QUANTILE_TOL || hi - lo < QUANTILE_TOL {
                return next;
            }
            x = next;
        }
        x
    }

    fn initial_guess(&self, p: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        if a >= 1.0 && b >= 1.0 {
            let pp = if p < 0.5 { p } else { 1.0 - p };
            let t = (-2.0 * pp.ln()).sqrt();
            let mut z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t;
            if p < 0.5 {
                z = -z;
            }
            let al = (z * z - 3.0) / 6.0;
            let h = 2.0 / (1.0 / (2.0 * a - 1.0) + 1.0 / (2.0 * b - 1.0));
            let w = z * (al + h).sqrt() / h
                - (1.0 / (2.0 * b - 1.0) - 1.0 / (2.0 * a - 1.0)) * (al + 5.0 / 6.0 - 2.0 / (3.0 * h));
            a / (a + b * (2.0 * w).exp())
        } else {
            // Tail approximations I_x ≈ x^a / (a B) and 1 - I_x ≈ (1-x)^b / (b B).
            let lna = (a / (a + b)).ln();
            let lnb = (b / (a + b)).ln();
            let t = (a * lna).exp() / a;
            let u = (b * lnb).exp() / b;
            let w = t + u;
            if p < t / w {
                (a * w * p).powf(1.0 / a)
            } else {
                1.0 - (b * w * (1.0 - p)).powf(1.0 / b)
            }
        }
    }
}

fn continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}
