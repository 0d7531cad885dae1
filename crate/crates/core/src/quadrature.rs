//! Gauss-Legendre rules, nodal Gauss-Lobatto shape functions on the
//! reference square `[-1, 1]^2`, and the affine map onto axis-aligned cells.

use thiserror::Error;

/// Largest number of points per direction accepted by [`gauss_rule`].
pub const MAX_GAUSS_POINTS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("gauss rule with {0} points per direction is not in 1..={MAX_GAUSS_POINTS}")]
    PointCount(usize),
    #[error("degenerate cell with side lengths ({hx}, {hy})")]
    DegenerateCell { hx: f64, hy: f64 },
}

/// Legendre polynomial `P_n(x)` and its derivative, by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    // derivative from P_n and P_{n-1}; the endpoint limit is n(n+1)/2 * (+-1)^(n-1)
    let dp = if (1.0 - x * x).abs() < 1e-14 {
        let s = if x > 0.0 || n % 2 == 1 { 1.0 } else { -1.0 };
        s * (n * (n + 1)) as f64 / 2.0
    } else {
        n as f64 * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, dp)
}

/// One-dimensional `n`-point Gauss-Legendre rule on `[-1, 1]`, points ascending.
pub fn gauss_legendre_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if n == 0 || n > MAX_GAUSS_POINTS {
        return Err(QuadratureError::PointCount(n));
    }
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        points[i] = x;
        weights[i] = w;
        points[n - 1 - i] = -x;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.0;
    }
    Ok((points, weights))
}

/// Gauss-Lobatto nodes of degree `p` (that is, `p + 1` nodes) on `[-1, 1]`, ascending.
pub fn gauss_lobatto_nodes(p: usize) -> Vec<f64> {
    assert!(p >= 1, "Gauss-Lobatto nodes need p >= 1");
    let mut nodes = vec![0.0; p + 1];
    nodes[0] = -1.0;
    nodes[p] = 1.0;
    // interior nodes are the roots of P'_p; Newton on P'_p with P''_p from the ODE
    for i in 1..p {
        let mut x = -(std::f64::consts::PI * i as f64 / p as f64).cos();
        for _ in 0..100 {
            let (pp, dp) = legendre(p, x);
            let d2p = (2.0 * x * dp - (p * (p + 1)) as f64 * pp) / (1.0 - x * x);
            let dx = dp / d2p;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
    }
    for i in 0..(p + 1) / 2 {
        let s = 0.5 * (nodes[p - i] - nodes[i]);
        nodes[i] = -s;
        nodes[p - i] = s;
    }
    if p % 2 == 0 {
        nodes[p / 2] = 0.0;
    }
    nodes
}

/// Lagrange interpolation basis on a fixed node set.
#[derive(Debug, Clone)]
pub struct LagrangeBasis1d {
    nodes: Vec<f64>,
}

impl LagrangeBasis1d {
    pub fn new(nodes: Vec<f64>) -> Self {
        Self { nodes }
    }

    /// Gauss-Lobatto nodal basis of degree `p` on `[-1, 1]`.
    pub fn lobatto(p: usize) -> Self {
        Self::new(gauss_lobatto_nodes(p))
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn degree(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn values(&self, x: f64) -> Vec<f64> {
        let n = self.nodes.len();
        (0..n)
            .map(|k| {
                let mut v = 1.0;
                for m in 0..n {
                    if m != k {
                        v *= (x - self.nodes[m]) / (self.nodes[k] - self.nodes[m]);
                    }
                }
                v
            })
            .collect()
    }

    pub fn derivatives(&self, x: f64) -> Vec<f64> {
        let n = self.nodes.len();
        (0..n)
            .map(|k| {
                let mut sum = 0.0;
                for l in 0..n {
                    if l == k {
                        continue;
                    }
                    let mut term = 1.0 / (self.nodes[k] - self.nodes[l]);
                    for m in 0..n {
                        if m != k && m != l {
                            term *= (x - self.nodes[m]) / (self.nodes[k] - self.nodes[m]);
                        }
                    }
                    sum += term;
                }
                sum
            })
            .collect()
    }
}

/// Tensor-product quadrature rule on the reference square.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Tensor product of the `n`-point Gauss-Legendre rule; exact for `Q_{2n-1}`.
/// Points are ordered with the x index running fastest.
pub fn gauss_rule(n: usize) -> Result<QuadRule, QuadratureError> {
    let (x, w) = gauss_legendre_1d(n)?;
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            points.push([x[i], x[j]]);
            weights.push(w[i] * w[j]);
        }
    }
    Ok(QuadRule { points, weights })
}

/// Values and reference gradients of the `(p+1)^2` nodal `Q_p` functions.
///
/// Local function `i + (p+1) j` is the product of the `i`-th x and `j`-th y
/// Lobatto Lagrange polynomials.
#[derive(Debug, Clone)]
pub struct Tabulation {
    pub degree: usize,
    pub n_funcs: usize,
    pub n_points: usize,
    /// `values[q * n_funcs + a]`
    pub values: Vec<f64>,
    /// `grads[q * n_funcs + a]`, derivatives with respect to reference coordinates
    pub grads: Vec<[f64; 2]>,
}

impl Tabulation {
    pub fn value(&self, q: usize, a: usize) -> f64 {
        self.values[q * self.n_funcs + a]
    }

    pub fn grad(&self, q: usize, a: usize) -> [f64; 2] {
        self.grads[q * self.n_funcs + a]
    }
}

pub fn tabulate_points(p: usize, points: &[[f64; 2]]) -> Tabulation {
    let basis = LagrangeBasis1d::lobatto(p);
    let nf = (p + 1) * (p + 1);
    let mut values = Vec::with_capacity(points.len() * nf);
    let mut grads = Vec::with_capacity(points.len() * nf);
    for pt in points {
        let vx = basis.values(pt[0]);
        let dx = basis.derivatives(pt[0]);
        let vy = basis.values(pt[1]);
        let dy = basis.derivatives(pt[1]);
        for j in 0..=p {
            for i in 0..=p {
                values.push(vx[i] * vy[j]);
                grads.push([dx[i] * vy[j], vx[i] * dy[j]]);
            }
        }
    }
    Tabulation {
        degree: p,
        n_funcs: nf,
        n_points: points.len(),
        values,
        grads,
    }
}

pub fn tabulate(p: usize, rule: &QuadRule) -> Tabulation {
    tabulate_points(p, &rule.points)
}

/// Axis-aligned rectangle `[x0, x0 + hx] x [y0, y0 + hy]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.hx * self.hy
    }

    pub fn diameter(&self) -> f64 {
        self.hx.hypot(self.hy)
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x0 + 0.5 * self.hx, self.y0 + 0.5 * self.hy]
    }

    pub fn to_physical(&self, r: [f64; 2]) -> [f64; 2] {
        [
            self.x0 + 0.5 * (r[0] + 1.0) * self.hx,
            self.y0 + 0.5 * (r[1] + 1.0) * self.hy,
        ]
    }

    pub fn to_reference(&self, x: [f64; 2]) -> [f64; 2] {
        [
            2.0 * (x[0] - self.x0) / self.hx - 1.0,
            2.0 * (x[1] - self.y0) / self.hy - 1.0,
        ]
    }
}

/// Result of mapping a reference rule onto a physical cell.
#[derive(Debug, Clone)]
pub struct PhysicalMap {
    pub points: Vec<[f64; 2]>,
    /// Diagonal of the inverse Jacobian: physical gradient = scale * reference gradient.
    pub grad_scale: [f64; 2],
    /// Jacobian determinant, multiplies each reference weight.
    pub measure: f64,
}

pub fn map_to_physical(cell: &Rect, rule: &QuadRule) -> Result<PhysicalMap, QuadratureError> {
    if !(cell.hx > 0.0 && cell.hy > 0.0) {
        return Err(QuadratureError::DegenerateCell {
            hx: cell.hx,
            hy: cell.hy,
        });
    }
    Ok(PhysicalMap {
        points: rule.points.iter().map(|&r| cell.to_physical(r)).collect(),
        grad_scale: [2.0 / cell.hx, 2.0 / cell.hy],
        measure: 0.25 * cell.hx * cell.hy,
    })
}
