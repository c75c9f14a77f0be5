//! Fixed-grid and refining trapezoid quadrature on finite intervals.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadratureScheme {
    /// Composite trapezoid on exactly `nodes` equally spaced points.
    Trapezoid,
    /// Composite trapezoid that halves the spacing until successive estimates
    /// agree to `rel_tol`.
    Adaptive { rel_tol: f64, max_nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    /// Padding beyond the sample extremes, in bandwidths.
    pub range_pad: f64,
    pub nodes: usize,
    pub scheme: QuadratureScheme,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            range_pad: 8.0,
            nodes: 4096,
            scheme: QuadratureScheme::Trapezoid,
        }
    }
}

impl QuadratureSpec {
    pub fn trapezoid(nodes: usize) -> Self {
        QuadratureSpec {
            nodes,
            ..Default::default()
        }
    }

    pub fn adaptive(rel_tol: f64) -> Self {
        QuadratureSpec {
            scheme: QuadratureScheme::Adaptive {
                rel_tol,
                max_nodes: 1 << 20,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range_pad >= 5.0) {
            return Err(Error::invalid(format!(
                "quadrature range_pad must be >= 5 bandwidths, got {}",
                self.range_pad
            )));
        }
        let min_nodes = match self.scheme {
            QuadratureScheme::Trapezoid => 1024,
            QuadratureScheme::Adaptive { .. } => 3,
        };
        if self.nodes < min_nodes {
            return Err(Error::invalid(format!(
                "quadrature needs at least {min_nodes} nodes, got {}",
                self.nodes
            )));
        }
        if let QuadratureScheme::Adaptive { rel_tol, max_nodes } = self.scheme {
            if !(rel_tol > 0.0) || max_nodes < self.nodes {
                return Err(Error::invalid("adaptive quadrature needs rel_tol > 0 and max_nodes >= nodes"));
            }
        }
        Ok(())
    }
}

/// An integral value with an estimate of its discretisation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error_estimate: f64,
    pub nodes: usize,
}

/// Trapezoid sum of equally spaced samples `ys` with spacing `h`.
fn trapezoid_sum(ys: &[f64], h: f64) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = ys[1..n - 1].iter().sum();
    h * (inner + 0.5 * (ys[0] + ys[n - 1]))
}

/// Trapezoid integral of equally spaced samples, with the error estimated from
/// the same rule at twice the spacing.
pub fn trapezoid(ys: &[f64], h: f64) -> Integral {
    let n = ys.len();
    let value = trapezoid_sum(ys, h);
    let error_estimate = if n >= 5 {
        // every other node; an odd interval count leaves one fine interval at the end
        let last_even = if (n - 1) % 2 == 0 { n - 1 } else { n - 2 };
        let coarse: Vec<f64> = ys[..=last_even].iter().step_by(2).copied().collect();
        let mut t2 = trapezoid_sum(&coarse, 2.0 * h);
        if last_even != n - 1 {
            t2 += 0.5 * h * (ys[n - 2] + ys[n - 1]);
        }
        (value - t2).abs() / 3.0
    } else {
        f64::NAN
    };
    Integral {
        value,
        error_estimate,
        nodes: n,
    }
}

/// Equally spaced nodes covering `[a, b]` inclusive.
pub fn nodes(a: f64, b: f64, n: usize) -> (Vec<f64>, f64) {
    let h = (b - a) / (n - 1) as f64;
    let xs = (0..n)
        .map(|i| if i == n - 1 { b } else { a + h * i as f64 })
        .collect();
    (xs, h)
}

/// Integrates `K` functions that share the same evaluation points, which lets
/// callers compute a costly common quantity once per node.
pub fn integrate_many<const K: usize>(
    f: impl Fn(f64) -> [f64; K],
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> [Integral; K] {
    let (xs, mut h) = nodes(a, b, spec.nodes);
    let mut cols: [Vec<f64>; K] = std::array::from_fn(|_| Vec::with_capacity(xs.len()));
    for &x in &xs {
        let v = f(x);
        for k in 0..K {
            cols[k].push(v[k]);
        }
    }
    let mut result: [Integral; K] = std::array::from_fn(|k| trapezoid(&cols[k], h));

    if let QuadratureScheme::Adaptive { rel_tol, max_nodes } = spec.scheme {
        let mut n = spec.nodes;
        while 2 * n - 1 <= max_nodes {
            let mut refined: [Vec<f64>; K] = std::array::from_fn(|_| Vec::with_capacity(2 * n - 1));
            for i in 0..n {
                for k in 0..K {
                    refined[k].push(cols[k][i]);
                }
                if i + 1 < n {
                    let v = f(a + h * (i as f64 + 0.5));
                    for k in 0..K {
                        refined[k].push(v[k]);
                    }
                }
            }
            n = 2 * n - 1;
            h *= 0.5;
            cols = refined;
            let next: [Integral; K] = std::array::from_fn(|k| trapezoid(&cols[k], h));
            let done = (0..K).all(|k| {
                (next[k].value - result[k].value).abs() <= rel_tol * next[k].value.abs().max(f64::MIN_POSITIVE)
            });
            result = next;
            if done {
                break;
            }
        }
    }
    result
}

pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, spec: &QuadratureSpec) -> Integral {
    let [r] = integrate_many(|x| [f(x)], a, b, spec);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_integrates_to_one() {
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let r = integrate(phi, -10.0, 10.0, &QuadratureSpec::default());
        assert!((r.value - 1.0).abs() < 1e-13);
        assert!(r.error_estimate < 1e-10);
    }

    #[test]
    fn polynomial_error_estimate_tracks_true_error() {
        let r = integrate(|x| x * x, 0.0, 1.0, &QuadratureSpec::trapezoid(1025));
        let err = (r.value - 1.0 / 3.0).abs();
        assert!(err > 0.0 && (r.error_estimate / err - 1.0).abs() < 0.01);
    }

    #[test]
    fn adaptive_refines_until_tolerance() {
        let spec = QuadratureSpec {
            nodes: 17,
            ..QuadratureSpec::adaptive(1e-10)
        };
        let r = integrate(f64::sin, 0.0, std::f64::consts::PI, &spec);
        assert!((r.value - 2.0).abs() < 1e-9);
        assert!(r.nodes > 17);
    }

    #[test]
    fn spec_validation() {
        assert!(QuadratureSpec::default().validate().is_ok());
        assert!(QuadratureSpec::trapezoid(512).validate().is_err());
        let spec = QuadratureSpec {
            range_pad: 4.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
