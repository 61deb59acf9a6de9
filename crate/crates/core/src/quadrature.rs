//! Composite Gauss–Legendre quadrature with panel-halving refinement.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::Real;

const ORDER: usize = 8;

fn legendre_rule() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static RULE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    RULE.get_or_init(gauss_legendre::<ORDER>)
}

/// Nodes and weights of the `N`-point Gauss–Legendre rule on [-1, 1],
/// found by Newton iteration on P_N.
pub fn gauss_legendre<const N: usize>() -> ([f64; N], [f64; N]) {
    let mut x = [0.0; N];
    let mut w = [0.0; N];
    let n = N as f64;
    for i in 0..N {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=N {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Adaptive composite quadrature.
///
/// The interval is cut at the supplied breakpoints, each segment is tiled
/// with panels no wider than `panel_width`, and the panel width is halved
/// until two successive estimates differ by less than `rtol` relative to
/// the L1 norm of the integrand.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub rtol: f64,
    pub max_halvings: u32,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self { rtol: 1e-9, max_halvings: 10 }
    }
}

impl Quadrature {
    /// Default settings with the tolerance loosened to what `T` can resolve.
    pub fn for_scalar<T: Real>() -> Self {
        let d = Self::default();
        Self { rtol: d.rtol.max(1e3 * T::eps().as_f64()), ..d }
    }

    /// Integrates a vector-valued function `f` over `[a, b]`.
    pub fn integrate<T, const K: usize, F>(
        &self,
        f: F,
        a: T,
        b: T,
        breakpoints: &[T],
        panel_width: T,
    ) -> Result<[T; K]>
    where
        T: Real,
        F: Fn(T) -> [T; K],
    {
        if !(b > a) {
            return Ok([T::zero(); K]);
        }
        let mut cuts = vec![a];
        let mut inner: Vec<T> = breakpoints.iter().copied().filter(|&p| p > a && p < b).collect();
        inner.sort_by(|x, y| x.partial_cmp(y).expect("breakpoints must be finite"));
        cuts.extend(inner);
        cuts.push(b);

        let mut width = panel_width;
        let (mut prev, _) = self.fixed(&f, &cuts, width);
        for _ in 0..self.max_halvings {
            width *= T::lit(0.5);
            let (next, l1) = self.fixed(&f, &cuts, width);
            let mut worst = 0.0f64;
            for k in 0..K {
                let scale = l1[k].as_f64().max(f64::MIN_POSITIVE);
                worst = worst.max((next[k] - prev[k]).abs().as_f64() / scale);
            }
            if worst <= self.rtol {
                return Ok(next);
            }
            prev = next;
        }
        let (last, l1) = self.fixed(&f, &cuts, width * T::lit(0.5));
        let mut worst = 0.0f64;
        for k in 0..K {
            let scale = l1[k].as_f64().max(f64::MIN_POSITIVE);
            worst = worst.max((last[k] - prev[k]).abs().as_f64() / scale);
        }
        if worst <= self.rtol {
            Ok(last)
        } else {
            Err(Error::Quadrature { estimate: worst, requested: self.rtol })
        }
    }

    /// Single pass at a fixed panel width; returns the estimate and the
    /// matching estimate of ∫|f|.
    fn fixed<T, const K: usize, F>(&self, f: &F, cuts: &[T], width: T) -> ([T; K], [T; K])
    where
        T: Real,
        F: Fn(T) -> [T; K],
    {
        let (nodes, weights) = legendre_rule();
        let nodes: [T; ORDER] = nodes.map(T::lit);
        let weights: [T; ORDER] = weights.map(T::lit);
        let mut sum = [T::zero(); K];
        let mut l1 = [T::zero(); K];
        let half = T::lit(0.5);
        for seg in cuts.windows(2) {
            let (lo, hi) = (seg[0], seg[1]);
            let len = hi - lo;
            let panels = (len / width).ceil().as_f64().max(1.0) as usize;
            let h = len / T::from_count(panels as u64);
            for p in 0..panels {
                let left = lo + h * T::from_count(p as u64);
                let mid = left + h * half;
                let jac = h * half;
                for (x, w) in nodes.iter().zip(weights.iter()) {
                    let v = f(mid + jac * *x);
                    for k in 0..K {
                        sum[k] += *w * jac * v[k];
                        l1[k] += *w * jac * v[k].abs();
                    }
                }
            }
        }
        (sum, l1)
    }
}
