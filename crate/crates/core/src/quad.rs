//! Gauss–Legendre rules and composite meshes.

use std::f64::consts::PI;

/// Gauss–Legendre rule on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Rule of order `n` (exact for polynomials of degree `2n - 1`).
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Flattened composite rule: integral ≈ Σ weights[i]·f(nodes[i]).
#[derive(Clone, Debug, Default)]
pub struct Mesh {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Mesh {
    /// Builds a composite rule over consecutive panels `[edges[i], edges[i+1]]`.
    pub fn from_edges(edges: &[f64], rule: &GaussLegendre) -> Self {
        let mut nodes = Vec::with_capacity(edges.len() * rule.nodes.len());
        let mut weights = Vec::with_capacity(nodes.capacity());
        for e in edges.windows(2) {
            let (a, b) = (e[0], e[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                nodes.push(mid + half * x);
                weights.push(w * half);
            }
        }
        Mesh { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Panel edges on `[a, b]` including every breakpoint inside, with each panel
/// no wider than `max_width(left_edge)`.
pub fn graded_edges<F: Fn(f64) -> f64>(a: f64, b: f64, breaks: &[f64], max_width: F) -> Vec<f64> {
    let mut stops: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    stops.push(b);
    stops.sort_by(|x, y| x.partial_cmp(y).unwrap());
    stops.dedup();
    let mut edges = vec![a];
    let mut x = a;
    for &stop in &stops {
        while x < stop {
            let h = max_width(x).max((stop - a).abs() * 1e-12);
            let rest = stop - x;
            // Split the tail evenly rather than leave a sliver panel.
            let next = if rest <= h {
                stop
            } else if rest < 2.0 * h {
                x + 0.5 * rest
            } else {
                x + h
            };
            edges.push(next);
            x = next;
        }
    }
    edges
}

/// Uniform panel edges on `[a, b]` with at most `h` width.
pub fn uniform_edges(a: f64, b: f64, h: f64) -> Vec<f64> {
    if b <= a {
        return vec![a];
    }
    let n = ((b - a) / h).ceil().max(1.0) as usize;
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_exact_for_polynomials() {
        let gl = GaussLegendre::new(8);
        for deg in 0..16 {
            let v = gl.integrate(0.0, 2.0, |x| x.powi(deg));
            let exact = 2f64.powi(deg + 1) / (deg as f64 + 1.0);
            assert!((v - exact).abs() < 1e-12 * exact.max(1.0), "deg {deg}");
        }
    }

    #[test]
    fn composite_oscillatory() {
        let gl = GaussLegendre::new(8);
        let edges = uniform_edges(0.0, 50.0, 1.0);
        let m = Mesh::from_edges(&edges, &gl);
        let v = m.integrate(|x| (3.0 * x).cos());
        assert!((v - (150.0f64).sin() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn graded_hits_breakpoints() {
        let e = graded_edges(0.0, 10.0, &[3.3, 7.0], |_| 1.0);
        assert!(e.contains(&3.3) && e.contains(&7.0) && *e.last().unwrap() == 10.0);
        assert!(e
            .windows(2)
            .all(|w| w[1] > w[0] && w[1] - w[0] <= 1.0 + 1e-12));
    }
}
