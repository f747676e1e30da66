//! Central finite differences for verifying hand-written gradients.

/// One loss evaluation plus the on/off pattern of any piecewise-linear
/// activations it passed through (empty when the function is smooth).
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub pattern: Vec<bool>,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Probe {
            loss,
            pattern: Vec::new(),
        }
    }
}

/// `(f(+h) − f(−h)) / 2h`, where `f(t)` evaluates the loss with one
/// coordinate displaced by `t`.
///
/// If either probe flips an activation relative to the unperturbed point the
/// difference quotient spans a kink, so the step is divided by ten (at most
/// four times) until it does not.
pub fn central_difference(mut f: impl FnMut(f64) -> Probe, h: f64) -> f64 {
    let base = f(0.0).pattern;
    let mut step = h;
    for _ in 0..4 {
        let p = f(step);
        let m = f(-step);
        if p.pattern == base && m.pattern == base {
            return (p.loss - m.loss) / (2.0 * step);
        }
        step /= 10.0;
    }
    (f(step).loss - f(-step).loss) / (2.0 * step)
}

/// Smallest denominator of [`rel_err`]: central-difference rounding noise
/// sits near `ε·|L|/h ≈ 1e-10`, so gradients below this are compared on an
/// absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function() {
        let d = central_difference(|t| Probe::smooth((1.0 + t).powi(3)), 1e-4);
        assert!(rel_err(3.0, d) < 1e-7);
    }

    #[test]
    fn shrinks_across_a_kink() {
        // relu(x) at x = 5e-5: a 1e-4 step straddles zero
        let x = 5e-5;
        let f = |t: f64| {
            let v: f64 = x + t;
            Probe {
                loss: v.max(0.0),
                pattern: vec![v > 0.0],
            }
        };
        assert!(rel_err(1.0, central_difference(f, 1e-4)) < 1e-9);
    }
}
