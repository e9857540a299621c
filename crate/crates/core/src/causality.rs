//! Completeness and causality diagnostics on sampled grids: sup bounds on
//! `|omega|`, growth conditions, forward/backward distance maps, causal
//! cones and the cone-membership cross-check.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fermat::{Direction, StationarySpacetime};
use crate::fields::ChartDomain;
use crate::finsler::{FinslerMetric, MetricKind, RandersMetric};
use crate::variational::{connect, MinimizeOptions};

/// Relative tolerance for comparisons against grid-based distances.
pub const GRID_TOLERANCE: f64 = 0.02;

/// Grid maximum of a sampled quantity, a lower bound for the true sup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupEstimate {
    pub value: f64,
    pub at: Vec<f64>,
    pub samples: usize,
    pub per_axis: usize,
}

fn grid_sup(
    domain: &ChartDomain,
    per_axis: usize,
    mask: impl Fn(&DVector<f64>) -> bool,
    f: impl Fn(&DVector<f64>) -> f64,
) -> SupEstimate {
    let mut best = SupEstimate {
        value: f64::NEG_INFINITY,
        at: Vec::new(),
        samples: 0,
        per_axis,
    };
    for x in domain.sample_grid(per_axis) {
        if !mask(&x) {
            continue;
        }
        best.samples += 1;
        let v = f(&x);
        if v > best.value || best.at.is_empty() {
            best.value = v;
            best.at = x.iter().copied().collect();
        }
    }
    best
}

/// `max_x |omega|_x` over the sampling grid.
pub fn omega_norm_sup(randers: &RandersMetric, per_axis: usize) -> SupEstimate {
    omega_norm_sup_where(randers, per_axis, |_| true)
}

/// As [`omega_norm_sup`], restricted to grid points accepted by `mask`.
pub fn omega_norm_sup_where(
    randers: &RandersMetric,
    per_axis: usize,
    mask: impl Fn(&DVector<f64>) -> bool,
) -> SupEstimate {
    grid_sup(randers.domain(), per_axis, mask, |x| randers.omega_norm(x))
}

/// `max_x |delta|_0 / sqrt(|delta|_0^2 + beta)` over the sampling grid.
pub fn delta_beta_condition(st: &StationarySpacetime, per_axis: usize) -> SupEstimate {
    delta_beta_condition_where(st, per_axis, |_| true)
}

pub fn delta_beta_condition_where(
    st: &StationarySpacetime,
    per_axis: usize,
    mask: impl Fn(&DVector<f64>) -> bool,
) -> SupEstimate {
    grid_sup(st.domain(), per_axis, mask, |x| {
        let d = st.delta().value(x);
        let n2 = d.dot(&(st.g0().value(x) * &d));
        (n2 / (n2 + st.beta().value(x))).sqrt()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthViolation {
    pub point: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub pass: bool,
    pub delta_pass: bool,
    pub beta_pass: bool,
    /// Grid point with the largest `lhs - rhs` for `|delta|_0^2`.
    pub worst_delta: GrowthViolation,
    /// Grid point with the largest `lhs - rhs` for `beta`.
    pub worst_beta: GrowthViolation,
    pub resolution: usize,
    pub tolerance: f64,
}

/// Checks `|delta|_0^2 <= c1 d0^2 + c2` and `beta <= c3 d0^2 + c4` on the
/// grid, with `d0(x, x0)` the `g0` distance from a grid distance map.
pub fn growth_condition_check(
    st: &StationarySpacetime,
    x0: &DVector<f64>,
    c: [f64; 4],
    resolution: usize,
) -> Result<GrowthReport> {
    if c.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Invalid(format!("growth coefficients must be >= 0, got {c:?}")));
    }
    let g0 = FinslerMetric::riemannian(st.g0().clone());
    let grid = distance_map(&g0, x0, resolution, Stencil::Sixteen)?;
    let mut worst_d = GrowthViolation {
        point: Vec::new(),
        lhs: 0.0,
        rhs: 0.0,
    };
    let mut worst_b = worst_d.clone();
    let (mut gap_d, mut gap_b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut ok_d, mut ok_b) = (true, true);
    for i in 0..grid.len() {
        let x = grid.point(i);
        let d0 = grid.backward[i];
        let delta = st.delta().value(&x);
        let lhs_d = delta.dot(&(st.g0().value(&x) * &delta));
        let rhs_d = c[0] * d0 * d0 + c[1];
        let lhs_b = st.beta().value(&x);
        let rhs_b = c[2] * d0 * d0 + c[3];
        if lhs_d > rhs_d * (1.0 + GRID_TOLERANCE) + 1e-12 {
            ok_d = false;
        }
        if lhs_b > rhs_b * (1.0 + GRID_TOLERANCE) + 1e-12 {
            ok_b = false;
        }
        if lhs_d - rhs_d > gap_d {
            gap_d = lhs_d - rhs_d;
            worst_d = GrowthViolation {
                point: x.iter().copied().collect(),
                lhs: lhs_d,
                rhs: rhs_d,
            };
        }
        if lhs_b - rhs_b > gap_b {
            gap_b = lhs_b - rhs_b;
            worst_b = GrowthViolation {
                point: x.iter().copied().collect(),
                lhs: lhs_b,
                rhs: rhs_b,
            };
        }
    }
    Ok(GrowthReport {
        pass: ok_d && ok_b,
        delta_pass: ok_d,
        beta_pass: ok_b,
        worst_delta: worst_d,
        worst_beta: worst_b,
        resolution,
        tolerance: GRID_TOLERANCE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    Four,
    Eight,
    Sixteen,
    /// Every primitive offset with `max |o_i| <= r`.
    Radius(u32),
}

impl Stencil {
    fn radius(self) -> i64 {
        match self {
            Stencil::Four | Stencil::Eight => 1,
            Stencil::Sixteen => 2,
            Stencil::Radius(r) => r.max(1) as i64,
        }
    }

    /// Integer neighbor offsets in `dim` dimensions.
    pub fn offsets(self, dim: usize) -> Vec<Vec<i64>> {
        if self == Stencil::Four {
            let mut out = Vec::new();
            for i in 0..dim {
                for s in [1, -1] {
                    let mut o = vec![0; dim];
                    o[i] = s;
                    out.push(o);
                }
            }
            return out;
        }
        let r = self.radius();
        let mut out = Vec::new();
        let mut o = vec![-r; dim];
        loop {
            let g = o.iter().fold(0, |g, v| gcd(g, v.unsigned_abs()));
            if g == 1 {
                out.push(o.clone());
            }
            let mut i = 0;
            while i < dim {
                o[i] += 1;
                if o[i] <= r {
                    break;
                }
                o[i] = -r;
                i += 1;
            }
            if i == dim {
                break;
            }
        }
        out
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Regular grid over the chart: declared bounds, or one period on periodic
/// axes (end point identified with the start).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub axes: Vec<Vec<f64>>,
    pub periodic: Vec<bool>,
}

impl Grid {
    pub fn new(domain: &ChartDomain, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Invalid("grid resolution must be at least 2".into()));
        }
        let mut axes = Vec::new();
        let mut periodic = Vec::new();
        for i in 0..domain.dim() {
            match (domain.bounds()[i], domain.period(i)) {
                (_, Some(p)) => {
                    axes.push((0..resolution).map(|k| p * k as f64 / resolution as f64).collect());
                    periodic.push(true);
                }
                (Some((lo, hi)), None) => {
                    axes.push(
                        (0..resolution)
                            .map(|k| lo + (hi - lo) * k as f64 / (resolution - 1) as f64)
                            .collect(),
                    );
                    periodic.push(false);
                }
                (None, None) => {
                    return Err(Error::Invalid(format!(
                        "axis {} needs bounds or a period for a distance map",
                        i + 1
                    )))
                }
            }
        }
        Ok(Self { axes, periodic })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        a[1] - a[0]
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        self.axes
            .iter()
            .map(|a| {
                let k = i % a.len();
                i /= a.len();
                k
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut i = 0;
        for (axis, k) in idx.iter().enumerate().rev() {
            i = i * self.axes[axis].len() + k;
        }
        i
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        let idx = self.multi_index(i);
        DVector::from_iterator(self.dim(), idx.iter().enumerate().map(|(a, k)| self.axes[a][*k]))
    }

    /// Neighbor of `idx` shifted by `offset`, wrapping periodic axes.
    pub fn shift(&self, idx: &[usize], offset: &[i64]) -> Option<usize> {
        let mut out = 0;
        for axis in (0..self.dim()).rev() {
            let n = self.axes[axis].len() as i64;
            let mut k = idx[axis] as i64 + offset[axis];
            if self.periodic[axis] {
                k = k.rem_euclid(n);
            } else if k < 0 || k >= n {
                return None;
            }
            out = out * n as usize + k as usize;
        }
        Some(out)
    }

    /// Lower corner of the cell containing `x` and the local coordinates in
    /// `[0, 1]` along each axis.
    fn cell(&self, x: &DVector<f64>) -> Option<(Vec<usize>, Vec<f64>)> {
        let mut idx = Vec::with_capacity(self.dim());
        let mut frac = Vec::with_capacity(self.dim());
        for (axis, a) in self.axes.iter().enumerate() {
            let h = self.spacing(axis);
            let n = a.len();
            let mut r = (x[axis] - a[0]) / h;
            if self.periodic[axis] {
                r = r.rem_euclid(n as f64);
                let k = (r.floor() as usize).min(n - 1);
                idx.push(k);
                frac.push(r - k as f64);
            } else {
                if r < -1e-9 || r > (n - 1) as f64 + 1e-9 {
                    return None;
                }
                let r = r.clamp(0.0, (n - 1) as f64);
                let k = (r.floor() as usize).min(n - 2);
                idx.push(k);
                frac.push(r - k as f64);
            }
        }
        Some((idx, frac))
    }

    /// Multilinear interpolation of node values.
    pub fn interpolate(&self, values: &[f64], x: &DVector<f64>) -> Option<f64> {
        let (idx, frac) = self.cell(x)?;
        let d = self.dim();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = vec![0i64; d];
            for axis in 0..d {
                if corner >> axis & 1 == 1 {
                    w *= frac[axis];
                    off[axis] = 1;
                } else {
                    w *= 1.0 - frac[axis];
                }
            }
            if w == 0.0 {
                continue;
            }
            acc += w * values[self.shift(&idx, &off)?];
        }
        Some(acc)
    }
}

/// Forward distances `d+(x0, .)` and backward distances `d-(., x0)` on a
/// regular grid.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceGrid {
    pub grid: Grid,
    pub source: Vec<f64>,
    pub stencil: Stencil,
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

impl DistanceGrid {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.grid.point(i)
    }

    pub fn forward_at(&self, x: &DVector<f64>) -> Option<f64> {
        self.grid.interpolate(&self.forward, x)
    }

    pub fn backward_at(&self, x: &DVector<f64>) -> Option<f64> {
        self.grid.interpolate(&self.backward, x)
    }

    pub fn values(&self, direction: Direction) -> &[f64] {
        match direction {
            Direction::Future => &self.forward,
            Direction::Past => &self.backward,
        }
    }

    /// Node mask of the closed forward (or backward) ball of radius `r`.
    pub fn ball(&self, r: f64, direction: Direction) -> Vec<bool> {
        self.values(direction).iter().map(|d| *d <= r).collect()
    }
}

#[derive(Clone, Copy)]
struct Entry(f64, usize);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Local norm frozen at a node; `sign = -1` evaluates the reversed metric.
enum Frozen<'a> {
    Randers { h: [f64; 4], w: [f64; 2] },
    Generic { metric: &'a FinslerMetric, x: DVector<f64>, sign: f64 },
}

impl Frozen<'_> {
    fn eval(&self, q: [f64; 2]) -> f64 {
        match self {
            Frozen::Randers { h, w } => {
                let hq = h[0] * q[0] * q[0] + (h[1] + h[2]) * q[0] * q[1] + h[3] * q[1] * q[1];
                hq.max(0.0).sqrt() + w[0] * q[0] + w[1] * q[1]
            }
            Frozen::Generic { metric, x, sign } => {
                metric.eval(x, &DVector::from_column_slice(&[sign * q[0], sign * q[1]]))
            }
        }
    }

    /// `min_{l in [0,1]} (1-l) d0 + l d1 + F(q0 + l (q1 - q0))`.
    fn segment_min(&self, q0: [f64; 2], q1: [f64; 2], d0: f64, d1: f64) -> f64 {
        let f = |l: f64| {
            let q = [q0[0] + l * (q1[0] - q0[0]), q0[1] + l * (q1[1] - q0[1])];
            (1.0 - l) * d0 + l * d1 + self.eval(q)
        };
        let ends = f(0.0).min(f(1.0));
        match self {
            Frozen::Randers { h, w } => {
                let dq = [q1[0] - q0[0], q1[1] - q0[1]];
                let quad = |u: [f64; 2], v: [f64; 2]| {
                    h[0] * u[0] * v[0] + h[1] * u[0] * v[1] + h[2] * u[1] * v[0] + h[3] * u[1] * v[1]
                };
                let a = quad(dq, dq);
                let b = quad(q0, dq) + quad(dq, q0);
                let c = quad(q0, q0);
                let slope = d1 - d0 + w[0] * dq[0] + w[1] * dq[1];
                if !(a > 0.0) || slope * slope >= a {
                    return ends;
                }
                let k = (c - b * b / (4.0 * a)).max(0.0);
                let mu = -slope * (k / (a * (a - slope * slope))).sqrt();
                let l = (mu - b / (2.0 * a)).clamp(0.0, 1.0);
                ends.min(f(l))
            }
            Frozen::Generic { .. } => {
                let (l, v) = golden_min(&f, 0.0, 1.0, 1e-9);
                let _ = l;
                ends.min(v)
            }
        }
    }
}

fn golden_min(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

struct Edges {
    offsets: Vec<Vec<i64>>,
    deltas: Vec<DVector<f64>>,
}

fn edges(grid: &Grid, stencil: Stencil) -> Edges {
    let offsets = stencil.offsets(grid.dim());
    let deltas = offsets
        .iter()
        .map(|o| {
            DVector::from_iterator(
                grid.dim(),
                o.iter().enumerate().map(|(a, v)| *v as f64 * grid.spacing(a)),
            )
        })
        .collect();
    Edges { offsets, deltas }
}

/// Single-source Dijkstra with edge weight `weight(midpoint, b - a)`.
fn dijkstra(
    grid: &Grid,
    e: &Edges,
    source: &DVector<f64>,
    weight: &impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    toward_source: bool,
) -> Result<Vec<f64>> {
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut heap = BinaryHeap::new();
    let (corner, _) = grid.cell(source).ok_or_else(|| Error::Domain {
        point: source.iter().copied().collect(),
    })?;
    let d = grid.dim();
    let r = e.offsets.iter().flatten().map(|v| v.abs()).max().unwrap_or(1);
    let span = (2 * r + 2) as usize;
    for c in 0..span.pow(d as u32) {
        let off: Vec<i64> = (0..d)
            .map(|a| (c / span.pow(a as u32) % span) as i64 - r)
            .collect();
        if let Some(i) = grid.shift(&corner, &off) {
            let step = lifted(grid, &grid.point(i), source);
            let mid = source + &step * 0.5;
            let delta = if toward_source { -step } else { step };
            let w = if delta.amax() == 0.0 { 0.0 } else { weight(&mid, &delta) };
            if w < dist[i] {
                dist[i] = w;
                heap.push(Entry(w, i));
            }
        }
    }
    while let Some(Entry(du, u)) = heap.pop() {
        if du > dist[u] {
            continue;
        }
        let idx = grid.multi_index(u);
        let x = grid.point(u);
        for (off, delta) in e.offsets.iter().zip(&e.deltas) {
            let Some(v) = grid.shift(&idx, off) else {
                continue;
            };
            let mid = &x + delta * 0.5;
            let w = if toward_source {
                weight(&mid, &(-delta))
            } else {
                weight(&mid, delta)
            };
            let cand = du + w;
            if cand < dist[v] {
                dist[v] = cand;
                heap.push(Entry(cand, v));
            }
        }
    }
    Ok(dist)
}

/// `p - q` with periodic components taken as the representative in
/// `[-period/2, period/2)`.
fn lifted(grid: &Grid, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    let mut d = p - q;
    for axis in 0..grid.dim() {
        if grid.periodic[axis] {
            let period = grid.spacing(axis) * grid.axes[axis].len() as f64;
            d[axis] -= period * (d[axis] / period).round();
        }
    }
    d
}

fn frozen<'a>(metric: &'a FinslerMetric, x: &DVector<f64>, sign: f64) -> Frozen<'a> {
    match metric.kind() {
        MetricKind::Randers(r) => {
            let h = r.h().value(x);
            let w = r.omega().value(x);
            Frozen::Randers {
                h: [h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]],
                w: [sign * w[0], sign * w[1]],
            }
        }
        MetricKind::Generic(_) => Frozen::Generic {
            metric,
            x: x.clone(),
            sign,
        },
    }
}

/// Gauss-Seidel sweeps of the semi-Lagrangian update over the cones
/// spanned by angularly consecutive stencil offsets (2D only).
fn refine_2d(grid: &Grid, e: &Edges, metric: &FinslerMetric, dist: &mut [f64], sign: f64) {
    let mut order: Vec<usize> = (0..e.offsets.len()).collect();
    order.sort_by(|&a, &b| {
        let ta = (e.offsets[a][1] as f64).atan2(e.offsets[a][0] as f64);
        let tb = (e.offsets[b][1] as f64).atan2(e.offsets[b][0] as f64);
        ta.total_cmp(&tb)
    });
    let cones: Vec<(usize, usize)> = (0..order.len())
        .map(|k| (order[k], order[(k + 1) % order.len()]))
        .collect();
    let norms: Vec<Frozen> = (0..grid.len())
        .map(|i| frozen(metric, &grid.point(i), sign))
        .collect();
    let (nx, ny) = (grid.axes[0].len(), grid.axes[1].len());
    let scale = dist.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
    for _round in 0..50 {
        let mut change: f64 = 0.0;
        for (rx, ry) in [(false, false), (true, false), (false, true), (true, true)] {
            for jj in 0..ny {
                let j = if ry { ny - 1 - jj } else { jj };
                for ii in 0..nx {
                    let i = if rx { nx - 1 - ii } else { ii };
                    let u = i + nx * j;
                    let idx = [i, j];
                    let mut best = dist[u];
                    for &(a, b) in &cones {
                        let (Some(va), Some(vb)) =
                            (grid.shift(&idx, &e.offsets[a]), grid.shift(&idx, &e.offsets[b]))
                        else {
                            continue;
                        };
                        let (da, db) = (dist[va], dist[vb]);
                        if !(da.min(db) < best) || !da.is_finite() || !db.is_finite() {
                            continue;
                        }
                        // the last leg runs from the cone edge into the node
                        let qa = [-e.deltas[a][0], -e.deltas[a][1]];
                        let qb = [-e.deltas[b][0], -e.deltas[b][1]];
                        let cand = norms[u].segment_min(qa, qb, da, db);
                        if cand < best {
                            best = cand;
                        }
                    }
                    if best < dist[u] {
                        change = change.max(dist[u] - best);
                        dist[u] = best;
                    }
                }
            }
        }
        if change <= 1e-13 * (1.0 + scale) {
            break;
        }
    }
}

/// Forward and backward distance maps from `x0`: Dijkstra on the stencil
/// graph with `w(a -> b) = F((a + b) / 2, b - a)`, followed in 2D by a
/// semi-Lagrangian refinement over the same stencil.
pub fn distance_map(
    metric: &FinslerMetric,
    x0: &DVector<f64>,
    resolution: usize,
    stencil: Stencil,
) -> Result<DistanceGrid> {
    metric.domain().check_inside(x0)?;
    let grid = Grid::new(metric.domain(), resolution)?;
    let e = edges(&grid, stencil);
    let weight = |m: &DVector<f64>, d: &DVector<f64>| metric.eval(m, d);
    let mut forward = dijkstra(&grid, &e, x0, &weight, false)?;
    let mut backward = dijkstra(&grid, &e, x0, &weight, true)?;
    if grid.dim() == 2 {
        refine_2d(&grid, &e, metric, &mut forward, 1.0);
        refine_2d(&grid, &e, metric, &mut backward, -1.0);
    }
    Ok(DistanceGrid {
        grid,
        source: x0.iter().copied().collect(),
        stencil,
        forward,
        backward,
    })
}

/// Level set `{d = level}` of a 2D node field as polylines (marching
/// squares; cells across a periodic seam are skipped).
pub fn level_polylines(grid: &Grid, values: &[f64], level: f64) -> Vec<Vec<[f64; 2]>> {
    let (nx, ny) = (grid.axes[0].len(), grid.axes[1].len());
    type Key = (usize, usize, u8);
    let mut segs: Vec<(Key, Key)> = Vec::new();
    let mut pos: HashMap<Key, [f64; 2]> = HashMap::new();
    let v = |i: usize, j: usize| values[i + nx * j];
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            if c.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let inside: Vec<bool> = c.iter().map(|x| *x <= level).collect();
            // edges: 0 bottom, 1 right, 2 top, 3 left; keyed by lower node
            let edge_key = |k: u8| -> Key {
                match k {
                    0 => (i, j, 0),
                    1 => (i + 1, j, 1),
                    2 => (i, j + 1, 0),
                    _ => (i, j, 1),
                }
            };
            let corner = |k: usize| -> [f64; 2] {
                let (a, b) = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)][k];
                [grid.axes[0][a], grid.axes[1][b]]
            };
            let mut crossings = Vec::new();
            for k in 0..4u8 {
                let (a, b) = (k as usize, (k as usize + 1) % 4);
                if inside[a] != inside[b] {
                    let t = (level - c[a]) / (c[b] - c[a]);
                    let (pa, pb) = (corner(a), corner(b));
                    let p = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                    let key = edge_key(k);
                    pos.insert(key, p);
                    crossings.push(key);
                }
            }
            match crossings.len() {
                2 => segs.push((crossings[0], crossings[1])),
                4 => {
                    let centre = c.iter().sum::<f64>() / 4.0;
                    if (centre <= level) == inside[0] {
                        segs.push((crossings[0], crossings[1]));
                        segs.push((crossings[2], crossings[3]));
                    } else {
                        segs.push((crossings[0], crossings[3]));
                        segs.push((crossings[1], crossings[2]));
                    }
                }
                _ => {}
            }
        }
    }
    let mut adj: HashMap<Key, Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segs.iter().enumerate() {
        adj.entry(*a).or_default().push(s);
        adj.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segs.len()];
    let mut lines = Vec::new();
    for start in 0..segs.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut chain = vec![segs[start].0, segs[start].1];
        for forward in [true, false] {
            loop {
                let end = if forward { *chain.last().unwrap() } else { chain[0] };
                let next = adj[&end].iter().copied().find(|s| !used[*s]);
                let Some(s) = next else { break };
                used[s] = true;
                let other = if segs[s].0 == end { segs[s].1 } else { segs[s].0 };
                if forward {
                    chain.push(other);
                } else {
                    chain.insert(0, other);
                }
            }
        }
        lines.push(chain.iter().map(|k| pos[k]).collect());
    }
    lines
}

#[derive(Debug, Clone, Serialize)]
pub struct ConeSlice {
    /// Distance offset `s`.
    pub s: f64,
    /// `t0 + s` (future) or `t0 - s` (past).
    pub time: f64,
    pub polylines: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalCone {
    pub apex: Vec<f64>,
    pub t0: f64,
    pub horizon: f64,
    pub direction: Direction,
    pub slices: Vec<ConeSlice>,
    #[serde(skip)]
    pub map: DistanceGrid,
}

impl CausalCone {
    /// `(x1, t1)` lies in the cone iff the map distance is at most the time
    /// separation and the separation is below the horizon.
    pub fn contains(&self, x1: &DVector<f64>, t1: f64) -> Option<bool> {
        let dt = self.direction.sign() * (t1 - self.t0);
        if dt < 0.0 || dt >= self.horizon {
            return Some(false);
        }
        let d = match self.direction {
            Direction::Future => self.map.forward_at(x1)?,
            Direction::Past => self.map.backward_at(x1)?,
        };
        Some(d <= dt)
    }

    /// Grid mask of the slice at offset `s`.
    pub fn slice_mask(&self, s: f64) -> Vec<bool> {
        self.map.ball(s, self.direction)
    }
}

/// The cone `C+(p0, mu)` (or `C-`) from the Fermat distance map, with
/// `slices` equally spaced level sets below the horizon.
pub fn causal_cone(
    st: &StationarySpacetime,
    x0: &DVector<f64>,
    t0: f64,
    horizon: f64,
    direction: Direction,
    resolution: usize,
    slices: usize,
) -> Result<CausalCone> {
    let fermat = st.fermat_metric()?;
    let map = distance_map(&fermat, x0, resolution, Stencil::Sixteen)?;
    let finite_max = map
        .values(direction)
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let top = horizon.min(finite_max);
    let mut out = Vec::with_capacity(slices);
    if map.grid.dim() == 2 {
        for k in 0..slices {
            let s = top * k as f64 / slices as f64;
            out.push(ConeSlice {
                s,
                time: t0 + direction.sign() * s,
                polylines: level_polylines(&map.grid, map.values(direction), s),
            });
        }
    }
    Ok(CausalCone {
        apex: x0.iter().copied().collect(),
        t0,
        horizon,
        direction,
        slices: out,
        map,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CrosscheckReport {
    /// Cone verdict from the distance map.
    pub member: bool,
    pub map_distance: f64,
    /// Fermat length of the variational connecting geodesic, when built.
    pub geodesic_length: Option<f64>,
    /// Whether an explicit causal curve was built and verified.
    pub constructed: bool,
    /// Time at which the light ray reaches `x1`.
    pub light_arrival: Option<f64>,
    /// Largest `g(z', z') / scale` along the constructed curve (`<= 0` is
    /// causal).
    pub max_causal_residual: Option<f64>,
    /// Map and construction disagree only within grid tolerance.
    pub marginal: bool,
}

/// Compares the cone verdict for `(x1, t1)` with the explicit construction
/// (light ray to `x1`, then a segment along the worldline of `x1`).
#[allow(clippy::too_many_arguments)]
pub fn connectivity_crosscheck(
    st: &StationarySpacetime,
    map: &DistanceGrid,
    x0: &DVector<f64>,
    t0: f64,
    x1: &DVector<f64>,
    t1: f64,
    n: usize,
    opts: &MinimizeOptions,
) -> Result<CrosscheckReport> {
    if !(t1 > t0) {
        return Err(Error::Invalid(format!("need t1 > t0, got t0 = {t0}, t1 = {t1}")));
    }
    let dt = t1 - t0;
    let d = map.forward_at(x1).ok_or_else(|| Error::Domain {
        point: x1.iter().copied().collect(),
    })?;
    let member = d <= dt;
    let mut report = CrosscheckReport {
        member,
        map_distance: d,
        geodesic_length: None,
        constructed: false,
        light_arrival: None,
        max_causal_residual: None,
        marginal: false,
    };
    if !member {
        return Ok(report);
    }
    let fermat = st.fermat_metric()?;
    let geo = connect(&fermat, x0, x1, n, opts)?;
    report.geodesic_length = Some(geo.length);
    if geo.zero_curve {
        report.constructed = true;
        report.light_arrival = Some(t0);
        report.max_causal_residual = Some(-st.beta().value(x1));
        return Ok(report);
    }
    let ray = st.lift_to_lightlike(&geo.curve, t0, Direction::Future)?;
    report.light_arrival = Some(ray.arrival_time);
    let slack = 1e-9 * (1.0 + dt);
    if ray.arrival_time > t1 + slack {
        if geo.length <= dt * (1.0 + GRID_TOLERANCE) {
            report.marginal = true;
            return Ok(report);
        }
        return Err(Error::Inconsistent(format!(
            "map distance {d} <= {dt} but the connecting light ray needs {}",
            geo.length
        )));
    }
    let mut worst = ray.null_residual / ray.null_scale;
    let wait = t1 - ray.arrival_time;
    if wait > 0.0 {
        let zero = DVector::zeros(st.dim());
        let g = st.lorentz(x1, &zero, wait);
        worst = worst.max(g / (1.0 + wait * wait));
    }
    if worst > 1e-8 {
        return Err(Error::Inconsistent(format!(
            "constructed curve is spacelike somewhere (g/scale = {worst})"
        )));
    }
    report.constructed = true;
    report.max_causal_residual = Some(worst);
    Ok(report)
}
