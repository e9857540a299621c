//! Discrete energy functional on sampled curves and its minimization by
//! Sobolev-preconditioned gradient descent.
//!
//! A curve is a polyline `x_0..x_N` on the uniform grid `s_k = k/N`. The
//! energy uses the midpoint rule
//!
//! ```text
//! J(x) = 1/(2N) sum_k G(m_k, N (x_{k+1} - x_k)),   m_k = (x_k + x_{k+1}) / 2
//! ```
//!
//! so only segment velocities enter and the gradient stays defined when a
//! node velocity vanishes. Descent directions are Riesz representatives of
//! `dJ` for the discrete `H^1` product (lumped mass + stiffness with the
//! Euclidean chart metric), restricted to variations compatible with the
//! boundary conditions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::ChartDomain;
use crate::finsler::{FinslerMetric, EPS_Y};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCurve {
    nodes: Vec<DVector<f64>>,
    /// Lift offset per periodic axis (in periods).
    winding: Vec<i64>,
}

impl DiscreteCurve {
    pub fn new(nodes: Vec<DVector<f64>>, winding: Vec<i64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::Invalid(format!(
                "a discrete curve needs at least 2 segments, got {}",
                nodes.len().saturating_sub(1)
            )));
        }
        let dim = nodes[0].len();
        if let Some(bad) = nodes.iter().find(|n| n.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { nodes, winding })
    }

    /// Uniformly sampled chord from `p` to `q` with `n` segments.
    pub fn straight(p: &DVector<f64>, q: &DVector<f64>, n: usize) -> Result<Self> {
        let nodes = (0..=n)
            .map(|k| p + (q - p) * (k as f64 / n as f64))
            .collect();
        Self::new(nodes, Vec::new())
    }

    pub fn with_winding(mut self, winding: Vec<i64>) -> Self {
        self.winding = winding;
        self
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn winding(&self) -> &[i64] {
        &self.winding
    }

    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.nodes[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        &self.nodes[self.nodes.len() - 1]
    }

    pub fn midpoint(&self, k: usize) -> DVector<f64> {
        (&self.nodes[k] + &self.nodes[k + 1]) * 0.5
    }

    /// Segment velocity `N (x_{k+1} - x_k)`.
    pub fn velocity(&self, k: usize) -> DVector<f64> {
        (&self.nodes[k + 1] - &self.nodes[k]) * self.segments() as f64
    }

    pub fn parameters(&self) -> Vec<f64> {
        let n = self.segments() as f64;
        (0..self.nodes.len()).map(|k| k as f64 / n).collect()
    }

    pub fn is_constant(&self) -> bool {
        self.nodes
            .iter()
            .all(|x| (x - &self.nodes[0]).amax() <= EPS_Y)
    }

    /// `F(m_k, N Delta_k)` for every segment.
    pub fn speeds(&self, metric: &FinslerMetric) -> Vec<f64> {
        (0..self.segments())
            .map(|k| metric.eval(&self.midpoint(k), &self.velocity(k)))
            .collect()
    }

    /// Midpoint-rule length `sum_k F(m_k, N Delta_k) / N`.
    pub fn length(&self, metric: &FinslerMetric) -> f64 {
        let n = self.segments() as f64;
        self.speeds(metric).iter().sum::<f64>() / n
    }

    /// Relative spread (stdev / mean) of the segment speeds.
    pub fn speed_variation(&self, metric: &FinslerMetric) -> f64 {
        relative_spread(&self.speeds(metric))
    }

    /// Largest node distance after wrapping periodic coordinates.
    pub fn sup_distance(&self, other: &Self, domain: &ChartDomain) -> f64 {
        if self.nodes.len() != other.nodes.len() {
            return f64::INFINITY;
        }
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| domain.periodic_difference(a, b).amax())
            .fold(0.0, f64::max)
    }

    /// Resamples the polyline at `n` segments, uniformly in the arc length
    /// measured by `weight(midpoint, delta)` per segment.
    pub fn reparameterize(
        &self,
        n: usize,
        weight: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    ) -> Result<Self> {
        let seg: Vec<f64> = (0..self.segments())
            .map(|k| weight(&self.midpoint(k), &(&self.nodes[k + 1] - &self.nodes[k])))
            .collect();
        let mut cum = Vec::with_capacity(seg.len() + 1);
        cum.push(0.0);
        for l in &seg {
            cum.push(cum.last().unwrap() + l);
        }
        let total = *cum.last().unwrap();
        if !(total > 0.0) {
            return Err(Error::DegenerateDirection { norm: total });
        }
        let mut nodes = Vec::with_capacity(n + 1);
        let mut k = 0;
        for j in 0..=n {
            if j == 0 {
                nodes.push(self.nodes[0].clone());
                continue;
            }
            if j == n {
                nodes.push(self.end().clone());
                continue;
            }
            let target = total * j as f64 / n as f64;
            while k + 1 < seg.len() && cum[k + 1] < target {
                k += 1;
            }
            let frac = if seg[k] > 0.0 {
                ((target - cum[k]) / seg[k]).clamp(0.0, 1.0)
            } else {
                0.0
            };
            nodes.push(&self.nodes[k] + (&self.nodes[k + 1] - &self.nodes[k]) * frac);
        }
        Self::new(nodes, self.winding.clone())
    }
}

pub(crate) fn relative_spread(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    if mean == 0.0 {
        return if var == 0.0 { 0.0 } else { f64::INFINITY };
    }
    var.sqrt() / mean.abs()
}

type ConstraintMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type ConstraintJacobian = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A submanifold given as the zero set of a constraint map `c: R^n -> R^m`
/// with surjective differential.
#[derive(Clone)]
pub struct Submanifold {
    dim: usize,
    codim: usize,
    map: ConstraintMap,
    jacobian: Option<ConstraintJacobian>,
}

impl fmt::Debug for Submanifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Submanifold")
            .field("dim", &self.dim)
            .field("codim", &self.codim)
            .finish()
    }
}

impl Submanifold {
    pub fn new(
        dim: usize,
        codim: usize,
        map: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            codim,
            map: Arc::new(map),
            jacobian: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn point(p: DVector<f64>) -> Self {
        let n = p.len();
        Self::new(n, n, move |x| x - &p).with_jacobian(move |_| DMatrix::identity(n, n))
    }

    pub fn whole(dim: usize) -> Self {
        Self::new(dim, 0, |_| DVector::zeros(0)).with_jacobian(move |_| DMatrix::zeros(0, dim))
    }

    /// `{ x : <normal, x> = offset }`
    pub fn hyperplane(normal: DVector<f64>, offset: f64) -> Self {
        let n = normal.len();
        let nn = normal.clone();
        Self::new(n, 1, move |x| DVector::from_element(1, nn.dot(x) - offset))
            .with_jacobian(move |_| DMatrix::from_row_slice(1, n, normal.as_slice()))
    }

    pub fn constraint(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.map)(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = &self.jacobian {
            return j(x);
        }
        let h = 1e-6 * (1.0 + x.amax());
        let mut jac = DMatrix::zeros(self.codim, self.dim);
        let mut xp = x.clone();
        for k in 0..self.dim {
            xp[k] = x[k] + h;
            let p = (self.map)(&xp);
            xp[k] = x[k] - h;
            let m = (self.map)(&xp);
            xp[k] = x[k];
            jac.set_column(k, &((p - m) / (2.0 * h)));
        }
        jac
    }

    /// Orthonormal basis (columns) of the tangent space at `x`.
    pub fn tangent_basis(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        if self.codim == 0 {
            return DMatrix::identity(n, n);
        }
        let p = self.tangent_projector(x);
        let eig = p.symmetric_eigen();
        let cols: Vec<DVector<f64>> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 0.5)
            .map(|i| eig.eigenvectors.column(i).into_owned())
            .collect();
        if cols.is_empty() {
            return DMatrix::zeros(n, 0);
        }
        DMatrix::from_columns(&cols)
    }

    /// Euclidean orthogonal projector onto the tangent space.
    pub fn tangent_projector(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        if self.codim == 0 {
            return DMatrix::identity(n, n);
        }
        let j = self.jacobian(x);
        let jjt = &j * j.transpose();
        match jjt.try_inverse() {
            Some(inv) => DMatrix::identity(n, n) - j.transpose() * inv * j,
            None => DMatrix::zeros(n, n),
        }
    }

    /// Minimum-norm Newton projection onto the zero set, to `|c| < 1e-10`.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if self.codim == 0 {
            return Ok(x.clone());
        }
        let mut y = x.clone();
        for _ in 0..50 {
            let c = self.constraint(&y);
            if c.amax() < 1e-10 {
                return Ok(y);
            }
            let j = self.jacobian(&y);
            let jjt = &j * j.transpose();
            let lu = jjt.lu();
            let z = lu
                .solve(&c)
                .ok_or_else(|| Error::Invalid("singular constraint jacobian".into()))?;
            y -= j.transpose() * z;
        }
        if self.constraint(&y).amax() < 1e-8 {
            Ok(y)
        } else {
            Err(Error::Invalid("constraint projection did not converge".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub enum BoundarySpec {
    /// Both endpoints held fixed.
    FixedFixed,
    /// Endpoints constrained to `start` and `end`.
    ProductSubmanifolds { start: Submanifold, end: Submanifold },
    /// `x_N` identified with `x_0` (plus the winding offset).
    Periodic,
}

/// Gradient of the discrete energy with respect to the node positions,
/// without boundary handling.
pub fn energy(metric: &FinslerMetric, curve: &DiscreteCurve) -> f64 {
    let n = curve.segments() as f64;
    (0..curve.segments())
        .map(|k| {
            let f = metric.eval(&curve.midpoint(k), &curve.velocity(k));
            f * f
        })
        .sum::<f64>()
        / (2.0 * n)
}

fn raw_gradient(metric: &FinslerMetric, curve: &DiscreteCurve) -> Result<Vec<DVector<f64>>> {
    let segs = curve.segments();
    let n = segs as f64;
    let dim = curve.dim();
    let mut grad = vec![DVector::zeros(dim); segs + 1];
    for k in 0..segs {
        let v = curve.velocity(k);
        if v.amax() == 0.0 {
            continue;
        }
        let ed = metric.energy_density(&curve.midpoint(k), &v)?;
        let a = &ed.dx * (0.25 / n);
        let b = &ed.dy * 0.5;
        grad[k] += &a - &b;
        grad[k + 1] += &a + &b;
    }
    Ok(grad)
}

/// Exact gradient of the discrete energy, with boundary rows handled per
/// `boundary`: fixed endpoints are zeroed, submanifold endpoints projected
/// onto the tangent space, periodic endpoints identified.
pub fn energy_gradient(
    metric: &FinslerMetric,
    curve: &DiscreteCurve,
    boundary: &BoundarySpec,
) -> Result<Vec<DVector<f64>>> {
    let mut g = raw_gradient(metric, curve)?;
    let last = g.len() - 1;
    match boundary {
        BoundarySpec::FixedFixed => {
            g[0].fill(0.0);
            g[last].fill(0.0);
        }
        BoundarySpec::ProductSubmanifolds { start, end } => {
            g[0] = start.tangent_projector(curve.start()) * &g[0];
            g[last] = end.tangent_projector(curve.end()) * &g[last];
        }
        BoundarySpec::Periodic => {
            let s = &g[0] + &g[last];
            g[0] = s.clone();
            g[last] = s;
        }
    }
    Ok(g)
}

/// Symmetric tridiagonal system `diag`, `off` (off-diagonal) solved for
/// several right-hand sides (rows of `rhs`).
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let m = diag.len();
    if m == 0 {
        return Vec::new();
    }
    let mut c = vec![0.0; m];
    let mut d: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut denom = diag[0];
    c[0] = if m > 1 { off[0] / denom } else { 0.0 };
    d.push(&rhs[0] / denom);
    for i in 1..m {
        denom = diag[i] - off[i - 1] * c[i - 1];
        if i < m - 1 {
            c[i] = off[i] / denom;
        }
        let di = (&rhs[i] - &d[i - 1] * off[i - 1]) / denom;
        d.push(di);
    }
    for i in (0..m - 1).rev() {
        let next = d[i + 1].clone();
        d[i] -= next * c[i];
    }
    d
}

/// Riesz representative of the covector `grad` for the discrete `H^1`
/// product, within the variations allowed by `boundary`.
fn sobolev_direction(
    curve: &DiscreteCurve,
    grad: &[DVector<f64>],
    boundary: &BoundarySpec,
) -> Vec<DVector<f64>> {
    let segs = curve.segments();
    let n = segs as f64;
    let dim = curve.dim();
    match boundary {
        BoundarySpec::Periodic => {
            // cyclic system on nodes 0..N-1: (1/N + 2N) on the diagonal, -N off
            let m = segs;
            let a = 1.0 / n + 2.0 * n;
            let o = -n;
            let rhs: Vec<DVector<f64>> = grad[..m].to_vec();
            let mut out = solve_cyclic(a, o, &rhs);
            out.push(out[0].clone());
            out
        }
        _ => {
            let (b0, bn) = match boundary {
                BoundarySpec::ProductSubmanifolds { start, end } => (
                    start.tangent_basis(curve.start()),
                    end.tangent_basis(curve.end()),
                ),
                _ => (DMatrix::zeros(dim, 0), DMatrix::zeros(dim, 0)),
            };
            // full matrix: diag mass w_k/N + stiffness N L, L path Laplacian
            let full_diag: Vec<f64> = (0..=segs)
                .map(|k| {
                    if k == 0 || k == segs {
                        0.5 / n + n
                    } else {
                        1.0 / n + 2.0 * n
                    }
                })
                .collect();
            let o = -n;
            let inner = segs - 1;
            let idiag = &full_diag[1..segs];
            let ioff = vec![o; inner.saturating_sub(1)];
            let xd_inner = solve_tridiagonal(idiag, &ioff, &grad[1..segs]);
            let mut xd = vec![DVector::zeros(dim); segs + 1];
            for (i, v) in xd_inner.into_iter().enumerate() {
                xd[i + 1] = v;
            }
            if b0.ncols() == 0 && bn.ncols() == 0 {
                return xd;
            }
            // discrete harmonic extensions of unit endpoint values
            let mut r0 = vec![0.0; inner];
            r0[0] -= o;
            let mut rn = vec![0.0; inner];
            rn[inner - 1] -= o;
            let scalar = |r: &[f64]| -> Vec<f64> {
                let rhs: Vec<DVector<f64>> =
                    r.iter().map(|v| DVector::from_element(1, *v)).collect();
                solve_tridiagonal(idiag, &ioff, &rhs)
                    .into_iter()
                    .map(|v| v[0])
                    .collect()
            };
            let mut phi0 = vec![0.0; segs + 1];
            phi0[0] = 1.0;
            for (i, v) in scalar(&r0).into_iter().enumerate() {
                phi0[i + 1] = v;
            }
            let mut phin = vec![0.0; segs + 1];
            phin[segs] = 1.0;
            for (i, v) in scalar(&rn).into_iter().enumerate() {
                phin[i + 1] = v;
            }
            let apply = |u: &[f64]| -> Vec<f64> {
                (0..=segs)
                    .map(|k| {
                        let mut s = full_diag[k] * u[k];
                        if k > 0 {
                            s += o * u[k - 1];
                        }
                        if k < segs {
                            s += o * u[k + 1];
                        }
                        s
                    })
                    .collect()
            };
            let dotv = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let a_phi0 = apply(&phi0);
            let a_phin = apply(&phin);
            let a00 = dotv(&phi0, &a_phi0);
            let a0n = dotv(&phi0, &a_phin);
            let ann = dotv(&phin, &a_phin);
            let res0 = &xd[1] * o - &grad[0];
            let resn = &xd[segs - 1] * o - &grad[segs];
            let m0 = b0.ncols();
            let mn = bn.ncols();
            let mut sys = DMatrix::zeros(m0 + mn, m0 + mn);
            let mut rhs = DVector::zeros(m0 + mn);
            let b0tb0 = b0.transpose() * &b0;
            let bntbn = bn.transpose() * &bn;
            let b0tbn = b0.transpose() * &bn;
            sys.view_mut((0, 0), (m0, m0)).copy_from(&(b0tb0 * a00));
            sys.view_mut((m0, m0), (mn, mn)).copy_from(&(bntbn * ann));
            sys.view_mut((0, m0), (m0, mn)).copy_from(&(&b0tbn * a0n));
            sys.view_mut((m0, 0), (mn, m0))
                .copy_from(&(b0tbn.transpose() * a0n));
            rhs.rows_mut(0, m0).copy_from(&(-(b0.transpose() * res0)));
            rhs.rows_mut(m0, mn).copy_from(&(-(bn.transpose() * resn)));
            let coef = sys.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m0 + mn));
            let e0 = &b0 * coef.rows(0, m0);
            let en = &bn * coef.rows(m0, mn);
            (0..=segs)
                .map(|k| &xd[k] + &e0 * phi0[k] + &en * phin[k])
                .collect()
        }
    }
}

/// Cyclic tridiagonal solve with constant diagonal `a` and off-diagonal `o`
/// (Sherman-Morrison on the periodic corner entries).
fn solve_cyclic(a: f64, o: f64, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let m = rhs.len();
    let dim = rhs[0].len();
    if m == 1 {
        return vec![&rhs[0] / (a + 2.0 * o)];
    }
    if m == 2 {
        // [[a, 2o], [2o, a]]
        let det = a * a - 4.0 * o * o;
        return vec![
            (&rhs[0] * a - &rhs[1] * (2.0 * o)) / det,
            (&rhs[1] * a - &rhs[0] * (2.0 * o)) / det,
        ];
    }
    let gamma = -a;
    let mut diag = vec![a; m];
    diag[0] = a - gamma;
    diag[m - 1] = a - o * o / gamma;
    let off = vec![o; m - 1];
    let y = solve_tridiagonal(&diag, &off, rhs);
    let mut u = vec![DVector::zeros(1); m];
    u[0] = DVector::from_element(1, gamma);
    u[m - 1] = DVector::from_element(1, o);
    let z: Vec<f64> = solve_tridiagonal(&diag, &off, &u)
        .into_iter()
        .map(|v| v[0])
        .collect();
    let vy = &y[0] + &y[m - 1] * (o / gamma);
    let vz = z[0] + z[m - 1] * o / gamma;
    let factor = vy / (1.0 + vz);
    let _ = dim;
    (0..m).map(|i| &y[i] - &factor * z[i]).collect()
}

fn pair_dot(a: &[DVector<f64>], b: &[DVector<f64>], periodic: bool) -> f64 {
    let take = if periodic { a.len() - 1 } else { a.len() };
    a[..take].iter().zip(&b[..take]).map(|(x, y)| x.dot(y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimizeOptions {
    /// Stop once the `H^1` norm of `dJ` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Backtracking factor.
    pub shrink: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
            armijo_c: 1e-4,
            shrink: 0.5,
        }
    }
}

impl MinimizeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    NoDescent,
    ZeroCurve,
}

#[derive(Debug, Clone)]
pub struct DescentReport {
    pub iterations: usize,
    pub energy_history: Vec<f64>,
    /// `H^1` norm of the differential at every iterate.
    pub grad_norm_history: Vec<f64>,
    pub converged: bool,
    pub stop: StopReason,
    pub curve: DiscreteCurve,
}

impl DescentReport {
    pub fn energy(&self) -> f64 {
        *self.energy_history.last().unwrap_or(&0.0)
    }

    pub fn grad_norm(&self) -> f64 {
        *self.grad_norm_history.last().unwrap_or(&0.0)
    }
}

fn apply_step(
    curve: &DiscreteCurve,
    dir: &[DVector<f64>],
    t: f64,
    boundary: &BoundarySpec,
) -> Result<DiscreteCurve> {
    let mut nodes: Vec<DVector<f64>> = curve
        .nodes
        .iter()
        .zip(dir)
        .map(|(x, d)| x - d * t)
        .collect();
    if let BoundarySpec::ProductSubmanifolds { start, end } = boundary {
        let last = nodes.len() - 1;
        nodes[0] = start.project(&nodes[0])?;
        nodes[last] = end.project(&nodes[last])?;
    }
    Ok(DiscreteCurve {
        nodes,
        winding: curve.winding.clone(),
    })
}

/// `H^1` norm of `dJ` at `curve` and the matching descent direction.
fn sobolev_gradient(
    metric: &FinslerMetric,
    curve: &DiscreteCurve,
    boundary: &BoundarySpec,
) -> Result<(f64, Vec<DVector<f64>>)> {
    let g = energy_gradient(metric, curve, boundary)?;
    let d = sobolev_direction(curve, &g, boundary);
    let periodic = matches!(boundary, BoundarySpec::Periodic);
    let norm2 = pair_dot(&g, &d, periodic).max(0.0);
    Ok((norm2.sqrt(), d))
}

struct Step {
    t: f64,
    curve: DiscreteCurve,
    energy: f64,
    cached: Option<(f64, Vec<DVector<f64>>)>,
}

fn trial_step(
    metric: &FinslerMetric,
    curve: &DiscreteCurve,
    dir: &[DVector<f64>],
    boundary: &BoundarySpec,
    t: f64,
) -> Option<(DiscreteCurve, f64)> {
    let trial = apply_step(curve, dir, t, boundary).ok()?;
    let jt = energy(metric, &trial);
    jt.is_finite().then_some((trial, jt))
}

/// Backtracking with a sufficient-decrease test, refined by the minimizer of
/// the parabola through `J(0)`, `J'(0)` and `J(t)`.
#[allow(clippy::too_many_arguments)]
fn armijo_search(
    metric: &FinslerMetric,
    curve: &DiscreteCurve,
    dir: &[DVector<f64>],
    boundary: &BoundarySpec,
    opts: &MinimizeOptions,
    j: f64,
    slope: f64,
    t0: f64,
) -> Option<Step> {
    let mut t = t0;
    while t > 1e-20 {
        if let Some((trial, jt)) = trial_step(metric, curve, dir, boundary, t) {
            if jt <= j + opts.armijo_c * t * slope {
                let curv = jt - j - slope * t;
                let t_fit = -slope * t * t / (2.0 * curv);
                if curv > 0.0 && t_fit < 0.9 * t && t_fit > 0.05 * t {
                    if let Some((fit, jf)) = trial_step(metric, curve, dir, boundary, t_fit) {
                        if jf < jt {
                            return Some(Step { t: t_fit, curve: fit, energy: jf, cached: None });
                        }
                    }
                }
                return Some(Step { t, curve: trial, energy: jt, cached: None });
            }
        }
        t *= opts.shrink;
    }
    None
}

/// Used once `J` cannot resolve the predicted decrease: among the steps
/// `2, 1, 1/2, ...` that keep `J` within rounding of its current value,
/// takes the one giving the smallest `H^1` gradient norm below `gnorm`.
fn residual_search(
    metric: &FinslerMetric,
    curve: &DiscreteCurve,
    dir: &[DVector<f64>],
    boundary: &BoundarySpec,
    j: f64,
    gnorm: f64,
    noise: f64,
) -> Option<Step> {
    let mut best: Option<Step> = None;
    let mut t = 2.0;
    while t > 1e-6 {
        if let Some((trial, jt)) = trial_step(metric, curve, dir, boundary, t) {
            if jt <= j + noise {
                if let Ok((gn, d)) = sobolev_gradient(metric, &trial, boundary) {
                    let bound = best.as_ref().and_then(|b| b.cached.as_ref()).map_or(gnorm, |c| c.0);
                    if gn < bound {
                        best = Some(Step { t, curve: trial, energy: jt, cached: Some((gn, d)) });
                    } else if best.is_some() {
                        break;
                    }
                }
            }
        }
        t *= 0.5;
    }
    best
}

/// Sobolev-preconditioned gradient descent with Armijo backtracking.
///
/// Once the predicted decrease drops below the rounding floor of `J`, a
/// trial step is accepted when it lowers the `H^1` gradient norm instead.
pub fn minimize(
    metric: &FinslerMetric,
    curve0: &DiscreteCurve,
    boundary: &BoundarySpec,
    opts: &MinimizeOptions,
) -> Result<DescentReport> {
    let periodic = matches!(boundary, BoundarySpec::Periodic);
    let mut curve = curve0.clone();
    if let BoundarySpec::ProductSubmanifolds { start, end } = boundary {
        let last = curve.nodes.len() - 1;
        curve.nodes[0] = start.project(&curve.nodes[0])?;
        curve.nodes[last] = end.project(&curve.nodes[last])?;
    }
    let mut j = energy(metric, &curve);
    let (mut gnorm, mut dir) = sobolev_gradient(metric, &curve, boundary)?;
    let mut report = DescentReport {
        iterations: 0,
        energy_history: vec![j],
        grad_norm_history: vec![gnorm],
        converged: false,
        stop: StopReason::MaxIterations,
        curve: curve.clone(),
    };
    let mut t_prev: f64 = 1.0;
    let noise = |j: f64| 64.0 * f64::EPSILON * (1.0 + j.abs());

    while report.iterations < opts.max_iter {
        if gnorm < opts.tol {
            report.converged = true;
            report.stop = StopReason::Converged;
            break;
        }
        let slope = -pair_dot(&energy_gradient(metric, &curve, boundary)?, &dir, periodic);
        let t0 = (2.0 * t_prev).min(4.0);
        let accepted = if slope.abs() > 16.0 * noise(j) {
            armijo_search(metric, &curve, &dir, boundary, opts, j, slope, t0)
        } else {
            residual_search(metric, &curve, &dir, boundary, j, gnorm, noise(j))
        };
        let Some(Step { t, curve: trial, energy: jt, cached }) = accepted else {
            report.stop = StopReason::NoDescent;
            break;
        };
        t_prev = t;
        curve = trial;
        j = jt;
        (gnorm, dir) = match cached {
            Some(c) => c,
            None => sobolev_gradient(metric, &curve, boundary)?,
        };
        report.iterations += 1;
        report.energy_history.push(j);
        report.grad_norm_history.push(gnorm);
    }
    if !report.converged && gnorm < opts.tol {
        report.converged = true;
        report.stop = StopReason::Converged;
    }
    report.curve = curve;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ConnectResult {
    pub winding: Vec<i64>,
    pub curve: DiscreteCurve,
    pub length: f64,
    pub energy: f64,
    pub report: DescentReport,
    /// `p == q` in the trivial class: the constant curve is returned.
    pub zero_curve: bool,
}

impl ConnectResult {
    pub fn record(&self) -> CurveRecord {
        CurveRecord {
            winding: self.winding.clone(),
            length: self.length,
            energy: self.energy,
            grad_norm: self.report.grad_norm(),
            iterations: self.report.iterations,
            converged: self.report.converged,
            zero_curve: self.zero_curve,
        }
    }
}

/// JSON summary of a connecting geodesic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRecord {
    pub winding: Vec<i64>,
    pub length: f64,
    pub energy: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub zero_curve: bool,
}

/// Lift of `q` into the universal cover according to `winding` (one entry
/// per periodic axis).
pub fn lift_endpoint(domain: &ChartDomain, q: &DVector<f64>, winding: &[i64]) -> DVector<f64> {
    let mut out = q.clone();
    for (axis, k) in domain.periodic_axes().into_iter().zip(winding) {
        out[axis] += *k as f64 * domain.period(axis).unwrap();
    }
    out
}

/// Minimizes from the straight chord between `p` and the lift of `q` in
/// the class `winding`.
pub fn connect_in_class(
    metric: &FinslerMetric,
    p: &DVector<f64>,
    q: &DVector<f64>,
    winding: &[i64],
    n: usize,
    opts: &MinimizeOptions,
) -> Result<ConnectResult> {
    let domain = metric.domain();
    let target = lift_endpoint(domain, q, winding);
    let trivial = winding.iter().all(|k| *k == 0);
    let curve0 = DiscreteCurve::straight(p, &target, n)?.with_winding(winding.to_vec());
    if trivial && (domain.periodic_difference(p, q)).amax() <= EPS_Y {
        let curve = DiscreteCurve::new(vec![p.clone(); n + 1], winding.to_vec())?;
        return Ok(ConnectResult {
            winding: winding.to_vec(),
            length: 0.0,
            energy: 0.0,
            report: DescentReport {
                iterations: 0,
                energy_history: vec![0.0],
                grad_norm_history: vec![0.0],
                converged: true,
                stop: StopReason::ZeroCurve,
                curve: curve.clone(),
            },
            curve,
            zero_curve: true,
        });
    }
    let report = minimize(metric, &curve0, &BoundarySpec::FixedFixed, opts)?;
    let curve = report.curve.clone();
    Ok(ConnectResult {
        winding: winding.to_vec(),
        length: curve.length(metric),
        energy: report.energy(),
        report,
        curve,
        zero_curve: false,
    })
}

/// Geodesic from `p` to `q` in the trivial class.
pub fn connect(
    metric: &FinslerMetric,
    p: &DVector<f64>,
    q: &DVector<f64>,
    n: usize,
    opts: &MinimizeOptions,
) -> Result<ConnectResult> {
    let classes = metric.domain().periodic_axes().len();
    connect_in_class(metric, p, q, &vec![0; classes], n, opts)
}

/// Every winding vector with entries in `[-k, k]`, lexicographic order.
pub fn winding_vectors(axes: usize, k: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..axes {
        out = out
            .into_iter()
            .flat_map(|w| {
                (-k..=k).map(move |v| {
                    let mut w = w.clone();
                    w.push(v);
                    w
                })
            })
            .collect();
    }
    out
}

/// Connects `p` to `q` once per homotopy class with winding entries in
/// `[-k, k]`, drops duplicates (sup distance below `1e-4` after wrapping)
/// and sorts by energy.
pub fn multistart_homotopy(
    metric: &FinslerMetric,
    p: &DVector<f64>,
    q: &DVector<f64>,
    k: i64,
    n: usize,
    opts: &MinimizeOptions,
) -> Result<Vec<ConnectResult>> {
    let axes = metric.domain().periodic_axes().len();
    if axes == 0 {
        return Ok(vec![connect(metric, p, q, n, opts)?]);
    }
    let classes = winding_vectors(axes, k);
    let results: Vec<Result<ConnectResult>> = classes
        .par_iter()
        .map(|w| connect_in_class(metric, p, q, w, n, opts))
        .collect();
    let mut found = Vec::new();
    for r in results {
        found.push(r?);
    }
    found.sort_by(|a, b| {
        a.energy
            .total_cmp(&b.energy)
            .then_with(|| a.winding.cmp(&b.winding))
    });
    let domain = metric.domain();
    let mut distinct: Vec<ConnectResult> = Vec::new();
    for r in found {
        if distinct
            .iter()
            .all(|d| d.curve.sup_distance(&r.curve, domain) >= 1e-4)
        {
            distinct.push(r);
        }
    }
    Ok(distinct)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeodesicResidual {
    /// Largest node deviation from the re-shot geodesic.
    pub max_deviation: f64,
    /// Largest `|D_T T|` from second differences plus connection terms.
    pub max_acceleration: f64,
}

/// Re-shoots from `x_0` with the velocity fitted from the first nodes and
/// measures how far the curve is from that geodesic.
pub fn geodesic_residual(metric: &FinslerMetric, curve: &DiscreteCurve) -> Result<GeodesicResidual> {
    let segs = curve.segments();
    let n = segs as f64;
    let x = curve.nodes();
    // second-order one-sided fit of x'(0)
    let v0 = (&x[1] * 4.0 - &x[0] * 3.0 - &x[2]) * (0.5 * n);
    let norm = v0.norm();
    if norm <= EPS_Y || curve.is_constant() {
        return Err(Error::DegenerateDirection { norm });
    }
    let sub = ((1.0 / n) / 1e-3).ceil().max(1.0) as usize;
    let step = 1.0 / (n * sub as f64);
    let shot = metric.geodesic_shoot(&x[0], &v0, 1.0, step)?;
    let mut max_dev: f64 = 0.0;
    for (k, node) in x.iter().enumerate() {
        let idx = k * sub;
        if idx >= shot.x.len() {
            max_dev = f64::INFINITY;
            break;
        }
        max_dev = max_dev.max((node - &shot.x[idx]).norm());
    }
    let mut max_acc: f64 = 0.0;
    for k in 1..segs {
        let t = (&x[k + 1] - &x[k - 1]) * (0.5 * n);
        let tdot = (&x[k + 1] - &x[k] * 2.0 + &x[k - 1]) * (n * n);
        if t.norm() <= EPS_Y {
            continue;
        }
        let d = metric.covariant_derivative(&x[k], &t, &t, &tdot)?;
        max_acc = max_acc.max(d.norm());
    }
    Ok(GeodesicResidual {
        max_deviation: max_dev,
        max_acceleration: max_acc,
    })
}
