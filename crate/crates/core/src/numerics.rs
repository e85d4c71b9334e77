//! Small numerical helpers shared across modules.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

/// Gauss–Legendre nodes and weights mapped onto `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    rule.nodes()
        .zip(rule.weights())
        .map(|(t, w)| (mid + half * t, half * w))
        .collect()
}

/// Composite rule: `panels` equal sub-intervals with `n` nodes each.
pub fn composite_gauss_legendre(panels: usize, n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let base = gauss_legendre(n, -1.0, 1.0);
    let h = (b - a) / panels as f64;
    (0..panels)
        .flat_map(|k| {
            let mid = a + (k as f64 + 0.5) * h;
            base.iter().map(move |(t, w)| (mid + 0.5 * h * t, 0.5 * h * w))
        })
        .collect()
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + xs.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// `n` log-uniformly spaced points from `lo` to `hi` inclusive.
pub fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Splits the mass at `v` between the two bracketing nodes so that both the
/// total mass and the first moment are preserved. `nodes` must be sorted;
/// values outside the node range go to the nearest end node.
pub fn linear_split(nodes: &[f64], v: f64, mass: f64, out: &mut [f64]) {
    let last = nodes.len() - 1;
    if v <= nodes[0] {
        out[0] += mass;
        return;
    }
    if v >= nodes[last] {
        out[last] += mass;
        return;
    }
    let hi = nodes.partition_point(|n| *n < v);
    if nodes[hi] == v {
        out[hi] += mass;
        return;
    }
    let lo = hi - 1;
    let t = (v - nodes[lo]) / (nodes[hi] - nodes[lo]);
    out[lo] += mass * (1.0 - t);
    out[hi] += mass * t;
}

/// Root of an increasing function on `[lo, hi]` by bisection, widening the
/// bracket geometrically when it does not straddle zero.
pub fn bisect_increasing<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let mut widen = 0;
    while f(lo) > 0.0 {
        lo -= (hi - lo).max(1.0);
        widen += 1;
        if widen > 60 {
            return None;
        }
    }
    while f(hi) < 0.0 {
        hi += (hi - lo).max(1.0);
        widen += 1;
        if widen > 120 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < tol {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_polynomial_exact() {
        let rule = gauss_legendre(8, -2.0, 3.0);
        let s: f64 = rule.iter().map(|(x, w)| w * x.powi(5)).sum();
        assert!((s - (3f64.powi(6) - 64.0) / 6.0).abs() < 1e-10);
    }

    #[test]
    fn split_preserves_moments() {
        let nodes = [0.0, 0.5, 2.0, 4.0];
        let mut out = [0.0; 4];
        linear_split(&nodes, 1.25, 0.3, &mut out);
        linear_split(&nodes, 3.0, 0.7, &mut out);
        let m0: f64 = out.iter().sum();
        let m1: f64 = out.iter().zip(nodes).map(|(m, n)| m * n).sum();
        assert!((m0 - 1.0).abs() < 1e-15);
        assert!((m1 - (0.3 * 1.25 + 0.7 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn bisection_finds_root() {
        let r = bisect_increasing(|t| t.powi(3) - 10.0, 0.0, 1.0, 1e-12).unwrap();
        assert!((r - 10f64.cbrt()).abs() < 1e-10);
        assert!((log_sum_exp([-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
