//! Finsler structures: evaluation of `F`, the fundamental and Cartan tensors,
//! the reversibility coefficient, Chern connection coefficients and the
//! geodesic initial-value integrator.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fields::{fd_step, ChartDomain, OneFormField, RiemannianField, FD_STEP, FD_STEP2};

/// Directions with Euclidean norm at or below this are treated as the zero
/// section.
pub const EPS_Y: f64 = 1e-12;

/// Points per axis used for construction-time checks.
const CHECK_GRID: usize = 9;

/// Dense rank-3 array indexed `[i][j][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }

    /// `y^i T_ijk`
    pub fn contract_first(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |j, k| (0..n).map(|i| y[i] * self.get(i, j, k)).sum())
    }

    /// `T^i_jk v^j w^k`
    pub fn contract_last_two(&self, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    s += self.get(i, j, k) * v[j] * w[k];
                }
            }
            s
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|T_ijk - T_ikj|`.
    pub fn lower_asymmetry(&self) -> f64 {
        let n = self.n;
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    m = m.max((self.get(i, j, k) - self.get(i, k, j)).abs());
                }
            }
        }
        m
    }
}

/// `F = sqrt(h[y,y]) + omega[y]` with `|omega|_x < 1`.
#[derive(Debug, Clone)]
pub struct RandersMetric {
    h: RiemannianField,
    omega: OneFormField,
}

impl RandersMetric {
    /// Builds the metric, checking positive definiteness of `h` and the
    /// Randers condition on the domain's sampling grid.
    pub fn new(h: RiemannianField, omega: OneFormField) -> Result<Self> {
        let m = Self::new_unchecked(h, omega);
        m.h.check_positive_definite(CHECK_GRID)?;
        for x in m.domain().sample_grid(CHECK_GRID) {
            let norm = m.omega_norm(&x);
            if !(norm < 1.0) {
                return Err(Error::RandersCondition {
                    norm,
                    point: x.iter().copied().collect(),
                });
            }
        }
        Ok(m)
    }

    pub fn new_unchecked(h: RiemannianField, omega: OneFormField) -> Self {
        Self { h, omega }
    }

    pub fn domain(&self) -> &ChartDomain {
        self.h.domain()
    }

    pub fn h(&self) -> &RiemannianField {
        &self.h
    }

    pub fn omega(&self) -> &OneFormField {
        &self.omega
    }

    /// `|omega|_x = sqrt(omega h^{-1} omega^T)`.
    pub fn omega_norm(&self, x: &DVector<f64>) -> f64 {
        let h = self.h.value(x);
        let w = self.omega.value(x);
        match h.cholesky() {
            Some(c) => w.dot(&c.solve(&w)).max(0.0).sqrt(),
            None => f64::INFINITY,
        }
    }
}

pub type GenericEvaluator = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum MetricKind {
    Randers(RandersMetric),
    Generic(GenericEvaluator),
}

impl fmt::Debug for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Randers(r) => f.debug_tuple("Randers").field(r).finish(),
            MetricKind::Generic(_) => f.write_str("Generic(..)"),
        }
    }
}

/// The Minkowski norm `F(x, .)` frozen at one base point.
pub enum LocalNorm<'a> {
    Randers { h: DMatrix<f64>, w: DVector<f64> },
    Generic { f: &'a GenericEvaluator, x: DVector<f64> },
}

impl LocalNorm<'_> {
    #[inline]
    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        match self {
            LocalNorm::Randers { h, w } => quad(h, y).max(0.0).sqrt() + w.dot(y),
            LocalNorm::Generic { f, x } => f(x, y),
        }
    }
}

#[inline]
fn quad(m: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut r = 0.0;
        for j in 0..n {
            r += m[(i, j)] * y[j];
        }
        s += y[i] * r;
    }
    s
}

#[derive(Debug, Clone)]
pub struct FundamentalTensor {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub g: DMatrix<f64>,
    pub cartan: Option<Tensor3>,
}

impl FundamentalTensor {
    pub fn min_eigenvalue(&self) -> f64 {
        self.g.clone().symmetric_eigenvalues().min()
    }
}

#[derive(Debug, Clone)]
pub struct ConnectionCoefficients {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    /// Formal Christoffel symbols `gamma^i_jk`.
    pub formal: Tensor3,
    /// Nonlinear connection `N^i_j`.
    pub nonlinear: DMatrix<f64>,
    /// Chern connection `Gamma^i_jk`.
    pub chern: Tensor3,
}

/// Value and first derivatives of `G = F^2` at `(x, y)`.
#[derive(Debug, Clone)]
pub struct EnergyDensity {
    pub value: f64,
    pub dx: DVector<f64>,
    pub dy: DVector<f64>,
}

/// Nodes `(s, x(s), x'(s))` of an integrated geodesic.
#[derive(Debug, Clone)]
pub struct ShotCurve {
    pub s: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    /// The integration stopped because the trajectory left the chart bounds.
    pub exited: bool,
}

impl ShotCurve {
    pub fn last(&self) -> &DVector<f64> {
        self.x.last().expect("shot curve has at least the initial node")
    }
}

#[derive(Debug, Clone)]
pub struct FinslerMetric {
    kind: MetricKind,
    domain: ChartDomain,
}

impl From<RandersMetric> for FinslerMetric {
    fn from(r: RandersMetric) -> Self {
        let domain = r.domain().clone();
        Self {
            kind: MetricKind::Randers(r),
            domain,
        }
    }
}

impl FinslerMetric {
    pub fn generic(
        domain: ChartDomain,
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: MetricKind::Generic(Arc::new(f)),
            domain,
        }
    }

    /// The Riemannian metric `sqrt(h[y,y])` as a Randers metric with zero
    /// one-form.
    pub fn riemannian(h: RiemannianField) -> Self {
        let n = h.domain().dim();
        let omega = OneFormField::constant(h.domain().clone(), DVector::zeros(n));
        RandersMetric::new_unchecked(h, omega).into()
    }

    pub fn euclidean(domain: ChartDomain) -> Self {
        Self::riemannian(RiemannianField::identity(domain))
    }

    /// Randers metric with constant Euclidean `h` and `omega = b dx^1`.
    pub fn constant_randers(domain: ChartDomain, b: f64) -> Result<Self> {
        let n = domain.dim();
        let mut w = DVector::zeros(n);
        w[0] = b;
        let omega = OneFormField::constant(domain.clone(), w);
        Ok(RandersMetric::new(RiemannianField::identity(domain), omega)?.into())
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    pub fn as_randers(&self) -> Option<&RandersMetric> {
        match &self.kind {
            MetricKind::Randers(r) => Some(r),
            MetricKind::Generic(_) => None,
        }
    }

    pub fn domain(&self) -> &ChartDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn at(&self, x: &DVector<f64>) -> LocalNorm<'_> {
        match &self.kind {
            MetricKind::Randers(r) => LocalNorm::Randers {
                h: r.h.value(x),
                w: r.omega.value(x),
            },
            MetricKind::Generic(f) => LocalNorm::Generic {
                f,
                x: self.domain.wrap(x),
            },
        }
    }

    /// `F(x, y)`; zero on the zero section.
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        if y.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        self.at(x).eval(y)
    }

    fn check_direction(y: &DVector<f64>) -> Result<f64> {
        let norm = y.norm();
        if norm > EPS_Y && norm.is_finite() {
            Ok(norm)
        } else {
            Err(Error::DegenerateDirection { norm })
        }
    }

    /// `g_ij(x, y) = 1/2 d^2(F^2)/dy^i dy^j`; closed form for Randers,
    /// second differences of `F^2` otherwise.
    pub fn g_matrix(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        Self::check_direction(y)?;
        match &self.kind {
            MetricKind::Randers(r) => {
                let h = r.h.value(x);
                let w = r.omega.value(x);
                Ok(randers_g(&h, &w, y))
            }
            MetricKind::Generic(_) => self.g_matrix_fd(x, y),
        }
    }

    /// Fundamental tensor from central second differences of `F^2`, step
    /// `1e-4 (1 + |y|_inf)` at the normalized direction.
    pub fn g_matrix_fd(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let norm = Self::check_direction(y)?;
        let yh = y / norm;
        let local = self.at(x);
        let big_g = |v: &DVector<f64>| {
            let f = local.eval(v);
            f * f
        };
        let n = y.len();
        let h = FD_STEP2 * (1.0 + yh.amax());
        let g0 = big_g(&yh);
        let mut g = DMatrix::zeros(n, n);
        let mut v = yh.clone();
        for i in 0..n {
            v[i] = yh[i] + h;
            let p = big_g(&v);
            v[i] = yh[i] - h;
            let m = big_g(&v);
            v[i] = yh[i];
            g[(i, i)] = 0.5 * (p - 2.0 * g0 + m) / (h * h);
            for j in (i + 1)..n {
                let mut eval = |si: f64, sj: f64| {
                    v[i] = yh[i] + si * h;
                    v[j] = yh[j] + sj * h;
                    let r = big_g(&v);
                    v[i] = yh[i];
                    v[j] = yh[j];
                    r
                };
                let val = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * h * h);
                g[(i, j)] = 0.5 * val;
                g[(j, i)] = 0.5 * val;
            }
        }
        Ok(g)
    }

    pub fn fundamental_tensor(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<FundamentalTensor> {
        Ok(FundamentalTensor {
            x: x.clone(),
            y: y.clone(),
            g: self.g_matrix(x, y)?,
            cartan: None,
        })
    }

    /// Fundamental tensor together with the Cartan tensor.
    pub fn fundamental_tensor_full(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<FundamentalTensor> {
        let mut t = self.fundamental_tensor(x, y)?;
        t.cartan = Some(self.cartan_tensor(x, y)?);
        Ok(t)
    }

    /// `A_ijk = (F/4) d^3(F^2)/dy^i dy^j dy^k`.
    pub fn cartan_tensor(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<Tensor3> {
        Self::check_direction(y)?;
        match &self.kind {
            MetricKind::Randers(r) => {
                let h = r.h.value(x);
                let w = r.omega.value(x);
                Ok(randers_cartan(&h, &w, y))
            }
            MetricKind::Generic(_) => self.cartan_tensor_fd(x, y),
        }
    }

    /// Cartan tensor by polarization of sixth-order third directional
    /// differences of `F^2` at the normalized direction.
    pub fn cartan_tensor_fd(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<Tensor3> {
        let norm = Self::check_direction(y)?;
        let yh = y / norm;
        let n = y.len();
        let local = self.at(x);
        let big_g = |v: &DVector<f64>| {
            let f = local.eval(v);
            f * f
        };
        const H: f64 = 1e-2;
        const W: [f64; 4] = [-61.0 / 30.0, 169.0 / 120.0, -3.0 / 10.0, 7.0 / 240.0];
        // third derivative of t -> G(yh + t u) at 0, O(H^6)
        let cube = |v: &DVector<f64>| -> f64 {
            let len = v.norm();
            if len == 0.0 {
                return 0.0;
            }
            let u = v / len;
            let at = |t: f64| big_g(&(&yh + &u * t));
            let d3: f64 = W
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let t = (k + 1) as f64 * H;
                    w * (at(t) - at(-t))
                })
                .sum::<f64>()
                / (H * H * H);
            d3 * len * len * len
        };
        let e = |i: usize| {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            v
        };
        let f = local.eval(&yh);
        let mut a = Tensor3::zeros(n);
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let (ei, ej, ek) = (e(i), e(j), e(k));
                    let t = (cube(&(&ei + &ej + &ek)) - cube(&(&ei + &ej - &ek))
                        - cube(&(&ei - &ej + &ek))
                        + cube(&(&ei - &ej - &ek)))
                        / 24.0;
                    let v = 0.25 * f * t;
                    for (p, q, r) in permutations(i, j, k) {
                        a.set(p, q, r, v);
                    }
                }
            }
        }
        Ok(a)
    }

    /// `G = F^2` with its x- and y-gradients. Zero direction gives zeros,
    /// since `G` is C^1 with vanishing derivative on the zero section.
    pub fn energy_density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<EnergyDensity> {
        let n = self.dim();
        match &self.kind {
            MetricKind::Randers(r) => {
                let h = r.h.value(x);
                let w = r.omega.value(x);
                let hy = &h * y;
                let alpha2 = y.dot(&hy);
                if !(alpha2 > 0.0) {
                    return Ok(EnergyDensity {
                        value: 0.0,
                        dx: DVector::zeros(n),
                        dy: DVector::zeros(n),
                    });
                }
                let alpha = alpha2.sqrt();
                let f = alpha + w.dot(y);
                let dy = (&hy / alpha + &w) * (2.0 * f);
                let dh = r.h.partials(x)?;
                let dw = r.omega.partials(x)?;
                let dx = DVector::from_fn(n, |k, _| {
                    2.0 * f * (quad(&dh[k], y) / (2.0 * alpha) + dw[k].dot(y))
                });
                Ok(EnergyDensity {
                    value: f * f,
                    dx,
                    dy,
                })
            }
            MetricKind::Generic(_) => {
                let big_g = |x: &DVector<f64>, y: &DVector<f64>| {
                    let f = self.eval(x, y);
                    f * f
                };
                let value = big_g(x, y);
                let hx = fd_step(x);
                self.domain.check_stencil(x, hx)?;
                let hy = FD_STEP * (1.0 + y.amax());
                let mut xp = x.clone();
                let mut yp = y.clone();
                let mut dx = DVector::zeros(n);
                let mut dy = DVector::zeros(n);
                for k in 0..n {
                    xp[k] = x[k] + hx;
                    let p = big_g(&xp, y);
                    xp[k] = x[k] - hx;
                    let m = big_g(&xp, y);
                    xp[k] = x[k];
                    dx[k] = (p - m) / (2.0 * hx);
                    yp[k] = y[k] + hy;
                    let p = big_g(x, &yp);
                    yp[k] = y[k] - hy;
                    let m = big_g(x, &yp);
                    yp[k] = y[k];
                    dy[k] = (p - m) / (2.0 * hy);
                }
                Ok(EnergyDensity { value, dx, dy })
            }
        }
    }

    /// Reversibility coefficient `max { F(x,-y) : F(x,y) = 1 }`.
    pub fn reversibility(&self, x: &DVector<f64>) -> f64 {
        let local = self.at(x);
        let ratio = |y: &DVector<f64>| {
            let fp = local.eval(y);
            let fm = local.eval(&-y);
            fm / fp
        };
        let n = self.dim();
        if n == 1 {
            let y = DVector::from_element(1, 1.0);
            return ratio(&y).max(1.0 / ratio(&y));
        }
        if n == 2 {
            let samples = 360 * n;
            let dir = |t: f64| DVector::from_vec(vec![t.cos(), t.sin()]);
            let step = std::f64::consts::TAU / samples as f64;
            let (best_i, _) = (0..samples)
                .map(|i| (i, ratio(&dir(i as f64 * step))))
                .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
            let centre = best_i as f64 * step;
            let (theta, val) =
                golden_max(|t| ratio(&dir(t)), centre - step, centre + step, 1e-10);
            let _ = theta;
            return val.max(ratio(&dir(centre)));
        }
        let count = (360 * n).max(2000);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_f1);
        let mut best = (f64::NEG_INFINITY, DVector::zeros(n));
        for _ in 0..count {
            let v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let v = v.normalize();
            let r = ratio(&v);
            if r > best.0 {
                best = (r, v);
            }
        }
        // coordinate ascent on the sphere
        let (mut val, mut y) = best;
        let mut sigma = 0.1;
        while sigma > 1e-10 {
            let mut improved = false;
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    let mut c = y.clone();
                    c[i] += sign * sigma;
                    let c = c.normalize();
                    let r = ratio(&c);
                    if r > val {
                        val = r;
                        y = c;
                        improved = true;
                    }
                }
            }
            if !improved {
                sigma *= 0.5;
            }
        }
        val
    }

    /// Formal Christoffel symbols, nonlinear connection and Chern connection
    /// at `(x, y)`.
    pub fn chern_coefficients(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<ConnectionCoefficients> {
        let norm = Self::check_direction(y)?;
        let n = self.dim();
        // every quantity is 0-homogeneous in y; the generic path works at
        // the unit direction for better-conditioned differences
        let yv = match self.kind {
            MetricKind::Randers(_) => y.clone(),
            MetricKind::Generic(_) => y / norm,
        };
        let hx = match self.kind {
            MetricKind::Randers(_) => fd_step(x),
            MetricKind::Generic(_) => 100.0 * fd_step(x),
        };
        self.domain.check_stencil(x, hx)?;
        let g = self.g_matrix(x, &yv)?;
        let ginv = g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite {
                point: x.iter().copied().collect(),
                min_eigenvalue: 0.0,
            })?;
        let a = self.cartan_tensor(x, &yv)?;
        let f = self.eval(x, &yv);

        // dg[k] = d g_ij / d x^k at fixed y
        let mut xp = x.clone();
        let dg: Vec<DMatrix<f64>> = (0..n)
            .map(|k| -> Result<DMatrix<f64>> {
                xp[k] = x[k] + hx;
                let p = self.g_matrix(&xp, &yv)?;
                xp[k] = x[k] - hx;
                let m = self.g_matrix(&xp, &yv)?;
                xp[k] = x[k];
                Ok((p - m) / (2.0 * hx))
            })
            .collect::<Result<_>>()?;

        // lowered: gamma_sjk = 1/2 (d_k g_sj - d_s g_jk + d_j g_ks)
        let mut lower = Tensor3::zeros(n);
        for s in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let v = 0.5 * (dg[k][(s, j)] - dg[s][(j, k)] + dg[j][(k, s)]);
                    lower.set(s, j, k, v);
                }
            }
        }
        let formal = raise(&ginv, &lower);

        // N^i_j = gamma^i_jk y^k - (1/F) A^i_jk gamma^k_rs y^r y^s
        let spray = formal.contract_last_two(&yv, &yv);
        let a_up = raise(&ginv, &a);
        let nonlinear = DMatrix::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for k in 0..n {
                s += formal.get(i, j, k) * yv[k];
                s -= a_up.get(i, j, k) * spray[k] / f;
            }
            s
        });

        // Gamma^i_jk = gamma^i_jk - g^il/F (A_ljs N^s_k - A_jks N^s_l + A_kls N^s_j)
        let an = |p: usize, q: usize, r: usize| -> f64 {
            (0..n).map(|s| a.get(p, q, s) * nonlinear[(s, r)]).sum()
        };
        let mut corr = Tensor3::zeros(n);
        for l in 0..n {
            for j in 0..n {
                for k in 0..n {
                    corr.set(l, j, k, an(l, j, k) - an(j, k, l) + an(k, l, j));
                }
            }
        }
        let corr_up = raise(&ginv, &corr);
        let mut chern = Tensor3::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    chern.set(i, j, k, formal.get(i, j, k) - corr_up.get(i, j, k) / f);
                }
            }
        }
        Ok(ConnectionCoefficients {
            x: x.clone(),
            y: y.clone(),
            formal,
            nonlinear,
            chern,
        })
    }

    /// `(D_T W)^i = W'^i + W^j T^k Gamma^i_jk(gamma, T)` with reference
    /// vector `T`.
    pub fn covariant_derivative(
        &self,
        point: &DVector<f64>,
        t: &DVector<f64>,
        w: &DVector<f64>,
        w_dot: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let c = self.chern_coefficients(point, t)?;
        Ok(w_dot + c.chern.contract_last_two(w, t))
    }

    /// Geodesic acceleration `-Gamma^i_jk(x, v) v^j v^k`.
    pub fn geodesic_acceleration(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let c = self.chern_coefficients(x, v)?;
        Ok(-c.chern.contract_last_two(v, v))
    }

    /// Integrates the geodesic equation with fixed-step RK4 from `(x0, y0)`
    /// over `[0, s_max]`. Leaving the chart stops integration and sets
    /// `exited`.
    pub fn geodesic_shoot(
        &self,
        x0: &DVector<f64>,
        y0: &DVector<f64>,
        s_max: f64,
        step: f64,
    ) -> Result<ShotCurve> {
        Self::check_direction(y0)?;
        if !(step > 0.0 && s_max >= 0.0) {
            return Err(Error::Invalid(format!(
                "need step > 0 and s_max >= 0 (step {step}, s_max {s_max})"
            )));
        }
        let steps = ((s_max / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = s_max / steps as f64;
        let mut out = ShotCurve {
            s: vec![0.0],
            x: vec![x0.clone()],
            v: vec![y0.clone()],
            exited: false,
        };
        let mut x = x0.clone();
        let mut v = y0.clone();
        for k in 0..steps {
            match self.rk4_step(&x, &v, h) {
                Ok((xn, vn)) if self.domain.contains(&xn) => {
                    x = xn;
                    v = vn;
                }
                Ok(_) | Err(Error::Domain { .. }) => {
                    out.exited = true;
                    return Ok(out);
                }
                Err(e) => return Err(e),
            }
            out.s.push((k + 1) as f64 * h);
            out.x.push(x.clone());
            out.v.push(v.clone());
        }
        Ok(out)
    }

    fn rk4_step(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        h: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let k1x = v.clone();
        let k1v = self.geodesic_acceleration(x, v)?;
        let x2 = x + &k1x * (0.5 * h);
        let v2 = v + &k1v * (0.5 * h);
        let k2v = self.geodesic_acceleration(&x2, &v2)?;
        let x3 = x + &v2 * (0.5 * h);
        let v3 = v + &k2v * (0.5 * h);
        let k3v = self.geodesic_acceleration(&x3, &v3)?;
        let x4 = x + &v3 * h;
        let v4 = v + &k3v * h;
        let k4v = self.geodesic_acceleration(&x4, &v4)?;
        let xn = x + (k1x + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
        let vn = v + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
        Ok((xn, vn))
    }
}

/// `T^i_jk = g^{il} T_ljk`
fn raise(ginv: &DMatrix<f64>, lower: &Tensor3) -> Tensor3 {
    let n = lower.dim();
    let mut out = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = (0..n).map(|l| ginv[(i, l)] * lower.get(l, j, k)).sum();
                out.set(i, j, k, v);
            }
        }
    }
    out
}

fn permutations(i: usize, j: usize, k: usize) -> [(usize, usize, usize); 6] {
    [
        (i, j, k),
        (i, k, j),
        (j, i, k),
        (j, k, i),
        (k, i, j),
        (k, j, i),
    ]
}

/// Closed-form Hessian of `F^2 / 2` for `F = sqrt(h[y,y]) + w[y]`:
/// `g = (F/alpha)(h - l l^T) + (l + w)(l + w)^T` with `l = h y / alpha`.
pub(crate) fn randers_g(h: &DMatrix<f64>, w: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let hy = h * y;
    let alpha = y.dot(&hy).sqrt();
    let f = alpha + w.dot(y);
    let l = &hy / alpha;
    let lw = &l + w;
    let g = (h - &l * l.transpose()) * (f / alpha) + &lw * lw.transpose();
    (&g + g.transpose()) * 0.5
}

/// Closed-form Cartan tensor of a Randers metric:
/// `A_ijk = F/(2 alpha^2) (m_ij c_k + m_jk c_i + m_ki c_j)` with
/// `m = h - l l^T` and `c = alpha w - w[y] l`.
pub(crate) fn randers_cartan(h: &DMatrix<f64>, w: &DVector<f64>, y: &DVector<f64>) -> Tensor3 {
    let n = y.len();
    let hy = h * y;
    let alpha = y.dot(&hy).sqrt();
    let b = w.dot(y);
    let f = alpha + b;
    let l = &hy / alpha;
    let m = h - &l * l.transpose();
    let c = w * alpha - &l * b;
    let scale = f / (2.0 * alpha * alpha);
    let mut a = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = m[(i, j)] * c[k] + m[(j, k)] * c[i] + m[(k, i)] * c[j];
                a.set(i, j, k, scale * v);
            }
        }
    }
    a
}

/// Golden-section maximization of a unimodal function on `[a, b]`.
pub(crate) fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::Rng;

    fn plane() -> ChartDomain {
        ChartDomain::new(2)
            .unwrap()
            .with_bounds(0, -5.0, 5.0)
            .unwrap()
            .with_bounds(1, -5.0, 5.0)
            .unwrap()
    }

    /// Non-constant Randers metric used for the oracle comparisons.
    fn wavy_randers() -> FinslerMetric {
        let d = plane();
        let h = RiemannianField::new(d.clone(), |x| {
            let a = 1.0 + 0.3 * x[0].sin().powi(2);
            let c = 0.2 * (x[0] * x[1]).cos();
            DMatrix::from_row_slice(2, 2, &[a, c * 0.5, c * 0.5, 1.5 + 0.2 * x[1].cos()])
        });
        let w = OneFormField::new(d, |x| dvector![0.3 * x[1].sin(), 0.25 * (0.5 * x[0]).cos()]);
        RandersMetric::new(h, w).unwrap().into()
    }

    /// Independent oracle: central-difference Hessian of F^2/2.
    fn hessian_oracle(metric: &FinslerMetric, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let h = 1e-4 * (1.0 + y.amax());
        let g = |v: &DVector<f64>| 0.5 * metric.eval(x, v).powi(2);
        DMatrix::from_fn(2, 2, |i, j| {
            let e = |si: f64, sj: f64| {
                let mut v = y.clone();
                v[i] += si * h;
                v[j] += sj * h;
                g(&v)
            };
            (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h)
        })
    }

    #[test]
    fn eval_examples() {
        let rb = FinslerMetric::constant_randers(plane(), 0.5).unwrap();
        let x = dvector![0.3, -1.0];
        assert_eq!(rb.eval(&x, &dvector![1.0, 0.0]), 1.5);
        assert_eq!(rb.eval(&x, &dvector![-1.0, 0.0]), 0.5);
        assert_eq!(rb.eval(&x, &dvector![0.0, 0.0]), 0.0);
    }

    #[test]
    fn randers_condition_rejected() {
        assert!(matches!(
            FinslerMetric::constant_randers(plane(), 1.2),
            Err(Error::RandersCondition { .. })
        ));
    }

    #[test]
    fn riemannian_fundamental_tensor_is_h() {
        let rb = FinslerMetric::constant_randers(plane(), 0.0).unwrap();
        let g = rb.g_matrix(&dvector![1.0, 2.0], &dvector![0.3, -2.0]).unwrap();
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn closed_form_g_matches_fd_oracle() {
        let rb = FinslerMetric::constant_randers(plane(), 0.5).unwrap();
        let x = dvector![0.7, 0.1];
        let y = dvector![1.0, 0.0];
        let diff = rb.g_matrix(&x, &y).unwrap() - hessian_oracle(&rb, &x, &y);
        assert!(diff.amax() < 1e-6, "{diff}");

        let m = wavy_randers();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = dvector![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let y = dvector![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let diff = m.g_matrix(&x, &y).unwrap() - hessian_oracle(&m, &x, &y);
            assert!(diff.amax() < 1e-6);
        }
    }

    #[test]
    fn g_is_zero_homogeneous() {
        let m = wavy_randers();
        let x = dvector![0.2, 0.9];
        let y = dvector![-0.4, 1.3];
        let d = m.g_matrix(&x, &y).unwrap() - m.g_matrix(&x, &(&y * 2.0)).unwrap();
        assert!(d.amax() < 1e-9);
        let gen = FinslerMetric::generic(plane(), |_, y| (y[0].powi(4) + y[1].powi(4)).powf(0.25));
        let d = gen.g_matrix(&x, &y).unwrap() - gen.g_matrix(&x, &(&y * 2.0)).unwrap();
        assert!(d.amax() < 1e-9);
    }

    #[test]
    fn zero_direction_is_degenerate() {
        let m = wavy_randers();
        assert!(matches!(
            m.g_matrix(&dvector![0.0, 0.0], &dvector![1e-13, 0.0]),
            Err(Error::DegenerateDirection { .. })
        ));
        assert!(m.cartan_tensor(&dvector![0.0, 0.0], &dvector![0.0, 0.0]).is_err());
        assert!(m.chern_coefficients(&dvector![0.0, 0.0], &dvector![0.0, 0.0]).is_err());
    }

    #[test]
    fn cartan_vanishes_for_riemannian() {
        let rb = FinslerMetric::constant_randers(plane(), 0.0).unwrap();
        let a = rb.cartan_tensor(&dvector![0.0, 0.0], &dvector![0.3, 0.8]).unwrap();
        assert!(a.max_abs() < 1e-7);
        let gen = FinslerMetric::generic(plane(), |_, y| (y[0] * y[0] + 2.0 * y[1] * y[1]).sqrt());
        let a = gen.cartan_tensor(&dvector![0.0, 0.0], &dvector![0.3, 0.8]).unwrap();
        assert!(a.max_abs() < 1e-7, "{}", a.max_abs());
    }

    #[test]
    fn cartan_euler_identity() {
        for metric in [
            wavy_randers(),
            FinslerMetric::generic(plane(), |x, y| {
                (y[0].powi(4) + y[1].powi(4) + x[0].cos().powi(2) * y[0].powi(2) * y[1].powi(2))
                    .powf(0.25)
                    + 0.2 * y[0]
            }),
        ] {
            let y = dvector![1.0, 1.0];
            let a = metric.cartan_tensor(&dvector![0.5, -0.2], &y).unwrap();
            let r = a.contract_first(&y).amax();
            assert!(r < 1e-7, "{r:e}");
        }
    }

    #[test]
    fn cartan_closed_form_matches_fd_oracle() {
        let rb = FinslerMetric::constant_randers(plane(), 0.5).unwrap();
        let x = dvector![0.0, 0.0];
        let y = dvector![1.0, 1.0];
        let closed = rb.cartan_tensor(&x, &y).unwrap();
        // oracle: A_ijk = F/2 dg_ij/dy^k with g from the independent FD Hessian
        let f = rb.eval(&x, &y);
        let h = 1e-3;
        for k in 0..2 {
            let mut yp = y.clone();
            yp[k] += h;
            let mut ym = y.clone();
            ym[k] -= h;
            let dg = (hessian_oracle(&rb, &x, &yp) - hessian_oracle(&rb, &x, &ym)) / (2.0 * h);
            for i in 0..2 {
                for j in 0..2 {
                    let oracle = 0.5 * f * dg[(i, j)];
                    assert!(
                        (closed.get(i, j, k) - oracle).abs() < 1e-5,
                        "A_{i}{j}{k}: {} vs {}",
                        closed.get(i, j, k),
                        oracle
                    );
                }
            }
        }
        let fd = rb.cartan_tensor_fd(&x, &y).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((closed.get(i, j, k) - fd.get(i, j, k)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn reversibility_examples() {
        let riem = FinslerMetric::constant_randers(plane(), 0.0).unwrap();
        assert!((riem.reversibility(&dvector![0.0, 0.0]) - 1.0).abs() < 1e-9);
        for b in [0.25, 0.5, 0.9] {
            let rb = FinslerMetric::constant_randers(plane(), b).unwrap();
            let lam = rb.reversibility(&dvector![1.0, 1.0]);
            assert!((lam - (1.0 + b) / (1.0 - b)).abs() < 1e-5, "b={b}: {lam}");
        }
    }

    #[test]
    fn reversibility_in_three_dimensions() {
        let d = ChartDomain::new(3).unwrap();
        let omega = OneFormField::constant(d.clone(), dvector![0.0, 0.3, 0.4]);
        let m: FinslerMetric = RandersMetric::new(RiemannianField::identity(d), omega)
            .unwrap()
            .into();
        let lam = m.reversibility(&dvector![0.0, 0.0, 0.0]);
        assert!((lam - 1.5 / 0.5).abs() < 1e-5, "{lam}");
    }

    #[test]
    fn chern_flat_is_zero() {
        let e = FinslerMetric::euclidean(plane());
        let c = e.chern_coefficients(&dvector![0.1, 0.2], &dvector![1.0, 0.3]).unwrap();
        assert!(c.chern.max_abs() < 1e-12);
        assert!(c.nonlinear.amax() < 1e-12);
    }

    #[test]
    fn chern_reduces_to_levi_civita() {
        // h = e^{x1} id: Gamma^i_jk = 1/2 (delta^i_j d_k + delta^i_k d_j - delta_jk d^i) x1
        let d = plane();
        let h = RiemannianField::new(d, |x| DMatrix::identity(2, 2) * x[0].exp());
        let m = FinslerMetric::riemannian(h);
        let x = dvector![0.4, -0.3];
        let oracle = |i: usize, j: usize, k: usize| {
            let dphi = [1.0, 0.0];
            let kd = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
            0.5 * (kd(i, j) * dphi[k] + kd(i, k) * dphi[j] - kd(j, k) * dphi[i])
        };
        for y in [dvector![1.0, 0.0], dvector![0.3, -2.0], dvector![-1.0, 1.0]] {
            let c = m.chern_coefficients(&x, &y).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        assert!((c.chern.get(i, j, k) - oracle(i, j, k)).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn chern_symmetric_and_homogeneous() {
        let m = wavy_randers();
        let x = dvector![0.5, 1.5];
        let y = dvector![0.7, -0.2];
        let c1 = m.chern_coefficients(&x, &y).unwrap();
        let c2 = m.chern_coefficients(&x, &(&y * 2.0)).unwrap();
        assert!(c1.chern.lower_asymmetry() < 1e-9);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((c1.chern.get(i, j, k) - c2.chern.get(i, j, k)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn chern_needs_room_for_differences() {
        let m = wavy_randers();
        assert!(matches!(
            m.chern_coefficients(&dvector![5.0, 0.0], &dvector![1.0, 0.0]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn covariant_derivative_flat_and_linear() {
        let e = FinslerMetric::euclidean(plane());
        let p = dvector![0.0, 0.0];
        let t = dvector![1.0, 0.5];
        let wd = dvector![0.3, 0.1];
        let d = e.covariant_derivative(&p, &t, &dvector![2.0, 1.0], &wd).unwrap();
        assert!((d - &wd).amax() < 1e-12);

        let m = wavy_randers();
        let p = dvector![0.3, 0.2];
        let (w1, w1d) = (dvector![1.0, 0.2], dvector![0.1, -0.3]);
        let (w2, w2d) = (dvector![-0.5, 0.7], dvector![0.4, 0.0]);
        let (a, b) = (1.7, -0.6);
        let lhs = m
            .covariant_derivative(&p, &t, &(&w1 * a + &w2 * b), &(&w1d * a + &w2d * b))
            .unwrap();
        let rhs = m.covariant_derivative(&p, &t, &w1, &w1d).unwrap() * a
            + m.covariant_derivative(&p, &t, &w2, &w2d).unwrap() * b;
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn covariant_derivative_of_velocity_vanishes_along_geodesic() {
        let m = wavy_randers();
        let shot = m
            .geodesic_shoot(&dvector![0.0, 0.0], &dvector![1.0, 0.4], 1.0, 1e-3)
            .unwrap();
        for k in [100, 500, 900] {
            // W = T, W' estimated from the integrator's velocity samples
            let wdot = (&shot.v[k + 1] - &shot.v[k - 1]) / (shot.s[k + 1] - shot.s[k - 1]);
            let d = m.covariant_derivative(&shot.x[k], &shot.v[k], &shot.v[k], &wdot).unwrap();
            assert!(d.amax() < 1e-5, "{}", d.amax());
        }
    }

    #[test]
    fn flat_shots_are_straight() {
        let e = FinslerMetric::euclidean(plane());
        let shot = e
            .geodesic_shoot(&dvector![0.0, 0.0], &dvector![1.0, 0.0], 1.0, 1e-3)
            .unwrap();
        assert!(!shot.exited);
        assert!((shot.last() - dvector![1.0, 0.0]).amax() < 1e-12);

        let rb = FinslerMetric::constant_randers(plane(), 0.5).unwrap();
        let shot = rb
            .geodesic_shoot(&dvector![0.0, 0.0], &dvector![1.0, 0.0], 1.0, 1e-3)
            .unwrap();
        for (s, x) in shot.s.iter().zip(&shot.x) {
            assert!((x - dvector![*s, 0.0]).amax() < 1e-6);
        }
    }

    #[test]
    fn shooting_conserves_speed() {
        let m = wavy_randers();
        let x0 = dvector![0.0, 0.0];
        let y0 = dvector![0.8, -0.6];
        let shot = m.geodesic_shoot(&x0, &y0, 1.0, 1e-3).unwrap();
        let f0 = m.eval(&x0, &y0);
        for (x, v) in shot.x.iter().zip(&shot.v) {
            assert!((m.eval(x, v) - f0).abs() / f0 < 1e-6);
        }
    }

    #[test]
    fn shooting_out_of_bounds_sets_flag() {
        let e = FinslerMetric::euclidean(plane());
        let shot = e
            .geodesic_shoot(&dvector![4.0, 0.0], &dvector![1.0, 0.0], 3.0, 1e-2)
            .unwrap();
        assert!(shot.exited);
        assert!(shot.last()[0] <= 5.0);
    }

    #[test]
    fn positive_definite_on_random_samples() {
        let m = wavy_randers();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let x = dvector![rng.random_range(-4.9..4.9), rng.random_range(-4.9..4.9)];
            let y = dvector![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let t = m.fundamental_tensor(&x, &y).unwrap();
            assert!(t.min_eigenvalue() > 0.0);
        }
    }

    #[test]
    fn energy_density_matches_fd() {
        let m = wavy_randers();
        let x = dvector![0.4, -0.7];
        let y = dvector![1.2, 0.3];
        let ed = m.energy_density(&x, &y).unwrap();
        let gen = FinslerMetric::generic(plane(), {
            let m = m.clone();
            move |x, y| m.eval(x, y)
        });
        let fd = gen.energy_density(&x, &y).unwrap();
        assert!((ed.value - fd.value).abs() < 1e-14);
        assert!((&ed.dx - &fd.dx).amax() < 1e-7);
        assert!((&ed.dy - &fd.dy).amax() < 1e-7);
        let zero = m.energy_density(&x, &dvector![0.0, 0.0]).unwrap();
        assert_eq!(zero.value, 0.0);
        assert_eq!(zero.dy.amax(), 0.0);
    }
}
