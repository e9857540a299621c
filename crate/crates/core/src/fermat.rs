//! Standard stationary spacetimes `g = g0 + 2 g0(delta, .) dt - beta dt^2`
//! on `M0 x R`, their Fermat metrics, light rays with arrival times, and
//! fixed-energy timelike geodesics through a Kaluza-Klein extension.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{ChartDomain, OneFormField, RiemannianField, ScalarField, VectorField};
use crate::finsler::{FinslerMetric, RandersMetric};
use crate::variational::{
    geodesic_residual, multistart_homotopy, relative_spread, ConnectResult, DiscreteCurve,
    MinimizeOptions,
};

/// Samples per axis for construction-time checks.
const CHECK_GRID: usize = 9;

/// Bound on the total bending `max |D_T T| L / max |T|^2` accepted by the
/// lift.
pub const GEODESIC_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Future,
    Past,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Future => 1.0,
            Direction::Past => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Future => "future",
            Direction::Past => "past",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "future" => Ok(Direction::Future),
            "past" => Ok(Direction::Past),
            other => Err(Error::Invalid(format!(
                "direction must be `future` or `past`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StationarySpacetime {
    domain: ChartDomain,
    g0: RiemannianField,
    delta: VectorField,
    beta: ScalarField,
    phi: Option<ScalarField>,
}

impl StationarySpacetime {
    pub fn new(g0: RiemannianField, delta: VectorField, beta: ScalarField) -> Result<Self> {
        let domain = g0.domain().clone();
        for d in [delta.domain(), beta.domain()] {
            if d.dim() != domain.dim() {
                return Err(Error::Dimension {
                    expected: domain.dim(),
                    got: d.dim(),
                });
            }
        }
        g0.check_positive_definite(CHECK_GRID)?;
        for x in domain.sample_grid(CHECK_GRID) {
            let b = beta.value(&x);
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::NonPositiveBeta {
                    point: x.iter().copied().collect(),
                    value: b,
                });
            }
        }
        Ok(Self {
            domain,
            g0,
            delta,
            beta,
            phi: None,
        })
    }

    /// The spacetime `phi * g` for a positive, time-independent factor.
    pub fn with_conformal_factor(mut self, phi: ScalarField) -> Result<Self> {
        for x in self.domain.sample_grid(CHECK_GRID) {
            let v = phi.value(&x);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveConformal {
                    point: x.iter().copied().collect(),
                    value: v,
                });
            }
        }
        self.phi = Some(phi);
        Ok(self)
    }

    pub fn domain(&self) -> &ChartDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn g0(&self) -> &RiemannianField {
        &self.g0
    }

    pub fn delta(&self) -> &VectorField {
        &self.delta
    }

    pub fn beta(&self) -> &ScalarField {
        &self.beta
    }

    pub fn phi(&self) -> Option<&ScalarField> {
        self.phi.as_ref()
    }

    fn phi_at(&self, x: &DVector<f64>) -> f64 {
        self.phi.as_ref().map_or(1.0, |p| p.value(x))
    }

    /// `g((y, tau), (y, tau))` at a spatial point.
    pub fn lorentz(&self, x: &DVector<f64>, y: &DVector<f64>, tau: f64) -> f64 {
        let g0 = self.g0.value(x);
        let d = self.delta.value(x);
        let gy = &g0 * y;
        self.phi_at(x) * (y.dot(&gy) + 2.0 * d.dot(&gy) * tau - self.beta.value(x) * tau * tau)
    }

    /// `g~ = g0 / beta` and the one-form `g~(delta, .)`.
    pub fn fermat_data(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let gt = self.g0.value(x) / self.beta.value(x);
        let w = &gt * self.delta.value(x);
        (gt, w)
    }

    /// Same spacetime with `delta -> -delta` (time reflection `t -> -t`).
    pub fn time_reflected(&self) -> Self {
        let d = self.delta.clone();
        let mut delta = VectorField::new(self.domain.clone(), move |x| -d.value(x));
        if self.delta.has_analytic_partials() {
            let d = self.delta.clone();
            delta = delta.with_partials(move |x| {
                d.partials(x)
                    .expect("analytic partials")
                    .into_iter()
                    .map(|p| -p)
                    .collect()
            });
        }
        Self {
            delta,
            ..self.clone()
        }
    }

    /// Divides the metric by the conformal factor: `g0 / phi`, `delta`,
    /// `beta / phi`. Identity when no factor is set.
    pub fn conformal_normalize(&self) -> Result<Self> {
        let Some(phi) = &self.phi else {
            return Ok(self.clone());
        };
        for x in self.domain.sample_grid(CHECK_GRID) {
            let v = phi.value(&x);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveConformal {
                    point: x.iter().copied().collect(),
                    value: v,
                });
            }
        }
        let (g0, p1) = (self.g0.clone(), phi.clone());
        let (beta, p2) = (self.beta.clone(), phi.clone());
        Ok(Self {
            domain: self.domain.clone(),
            g0: RiemannianField::new(self.domain.clone(), move |x| g0.value(x) / p1.value(x)),
            delta: self.delta.clone(),
            beta: ScalarField::new(self.domain.clone(), move |x| beta.value(x) / p2.value(x)),
            phi: None,
        })
    }

    fn analytic(&self) -> bool {
        self.g0.has_analytic_partials()
            && self.delta.has_analytic_partials()
            && self.beta.has_analytic_partials()
    }

    /// Randers data `h = g~ + w w^T`, `omega = sign * w`.
    fn randers_fields(&self, sign: f64) -> (RiemannianField, OneFormField) {
        let st = self.clone();
        let mut h = RiemannianField::new(self.domain.clone(), move |x| {
            let (gt, w) = st.fermat_data(x);
            gt + &w * w.transpose()
        });
        let st = self.clone();
        let mut omega = OneFormField::new(self.domain.clone(), move |x| st.fermat_data(x).1 * sign);
        if self.analytic() {
            let st = self.clone();
            h = h.with_partials(move |x| {
                st.fermat_partials(x)
                    .into_iter()
                    .map(|(dh, _)| dh)
                    .collect()
            });
            let st = self.clone();
            omega = omega.with_partials(move |x| {
                st.fermat_partials(x)
                    .into_iter()
                    .map(|(_, dw)| dw * sign)
                    .collect()
            });
        }
        (h, omega)
    }

    /// Chain-rule partials of `(h, w)` from analytic component partials.
    fn fermat_partials(&self, x: &DVector<f64>) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let g0 = self.g0.value(x);
        let d = self.delta.value(x);
        let b = self.beta.value(x);
        let dg = self.g0.partials(x).expect("analytic partials");
        let dd = self.delta.partials(x).expect("analytic partials");
        let db = self.beta.partials(x).expect("analytic partials");
        let gt = &g0 / b;
        let w = &gt * &d;
        (0..self.dim())
            .map(|k| {
                let dgt = &dg[k] / b - &g0 * (db[k] / (b * b));
                let dw = &dgt * &d + &gt * &dd[k];
                let dh = dgt + &dw * w.transpose() + &w * dw.transpose();
                (dh, dw)
            })
            .collect()
    }

    /// `F(x, y) = g~(delta, y) + sqrt(g~(delta, y)^2 + g~(y, y))`.
    pub fn fermat_metric(&self) -> Result<FinslerMetric> {
        let (h, omega) = self.randers_fields(1.0);
        Ok(RandersMetric::new(h, omega)?.into())
    }

    /// `F*(x, y) = F(x, -y)`, the metric governing past-pointing rays.
    pub fn reversed_fermat_metric(&self) -> Result<FinslerMetric> {
        let (h, omega) = self.randers_fields(-1.0);
        Ok(RandersMetric::new(h, omega)?.into())
    }

    pub fn metric_for(&self, direction: Direction) -> Result<FinslerMetric> {
        match direction {
            Direction::Future => self.fermat_metric(),
            Direction::Past => self.reversed_fermat_metric(),
        }
    }

    /// Time samples `t_k` over the nodes of `x` (midpoint rule) and the
    /// arrival time `t_N`.
    pub fn reconstruct_time(
        &self,
        x: &DiscreteCurve,
        t0: f64,
        direction: Direction,
    ) -> Result<(Vec<f64>, f64)> {
        let metric = self.metric_for(direction)?;
        Ok(time_along(&metric, x, t0, direction))
    }

    /// Lifts a converged Fermat geodesic to a lightlike curve.
    pub fn lift_to_lightlike(
        &self,
        x: &DiscreteCurve,
        t0: f64,
        direction: Direction,
    ) -> Result<LightRay> {
        let metric = self.metric_for(direction)?;
        self.lift_with(&metric, x, t0, direction)
    }

    fn lift_with(
        &self,
        metric: &FinslerMetric,
        x: &DiscreteCurve,
        t0: f64,
        direction: Direction,
    ) -> Result<LightRay> {
        let residual = geodesic_residual(metric, x)?;
        let bending = residual.max_acceleration * chart_length(x) / max_speed2(x);
        if !(bending <= GEODESIC_THRESHOLD) {
            return Err(Error::NotAGeodesic {
                residual: bending,
                threshold: GEODESIC_THRESHOLD,
            });
        }
        let spatial = constant_h_speed(self, x)?;
        let (t, arrival) = time_along(metric, &spatial, t0, direction);
        let n = spatial.segments() as f64;
        let mut null: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut c = Vec::with_capacity(spatial.segments());
        for k in 0..spatial.segments() {
            let m = spatial.midpoint(k);
            let v = spatial.velocity(k);
            let tdot = (t[k + 1] - t[k]) * n;
            null = null.max(self.lorentz(&m, &v, tdot).abs());
            scale = scale.max(tdot * tdot);
            let (_, w) = self.fermat_data(&m);
            c.push(tdot - w.dot(&v));
        }
        let length = spatial.length(metric);
        Ok(LightRay {
            winding: x.winding().to_vec(),
            spatial,
            t,
            arrival_time: arrival,
            direction,
            length,
            null_residual: null,
            null_scale: 1.0 + scale,
            c_spread: relative_spread(&c),
            geodesic_deviation: residual.max_deviation,
            bending,
        })
    }

    /// One light ray per homotopy class with winding in `[-k, k]`, from the
    /// event `(source, t0)` to the worldline of `observer`, ordered by
    /// Fermat length (arrival time for future rays).
    #[allow(clippy::too_many_arguments)]
    pub fn lens_images(
        &self,
        source: &DVector<f64>,
        t0: f64,
        observer: &DVector<f64>,
        k: i64,
        n: usize,
        opts: &MinimizeOptions,
        direction: Direction,
    ) -> Result<Vec<LightRay>> {
        self.domain.check_inside(source)?;
        self.domain.check_inside(observer)?;
        let metric = self.metric_for(direction)?;
        let found = multistart_homotopy(&metric, source, observer, k, n, opts)?;
        let mut rays: Vec<LightRay> = found
            .iter()
            .filter(|r| r.report.converged && !r.zero_curve)
            .filter_map(|r| self.lift_with(&metric, &r.curve, t0, direction).ok())
            .collect();
        rays.sort_by(|a, b| a.length.total_cmp(&b.length));
        let mut out: Vec<LightRay> = Vec::with_capacity(rays.len());
        for r in rays {
            let dup = out
                .iter()
                .any(|o| (o.arrival_time - r.arrival_time).abs() <= 1e-12 * (1.0 + r.arrival_time.abs()));
            if !dup {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// The spacetime on `M0 x R_u` with `g0 + du^2`, together with `E`.
    pub fn kaluza_klein_extend(&self, energy: f64) -> Result<ExtendedSpacetime> {
        if !(energy > 0.0 && energy.is_finite()) {
            return Err(Error::Invalid(format!("energy must be positive, got {energy}")));
        }
        let base = self.conformal_normalize()?;
        let n = base.dim();
        let ext = base.domain.extended();
        let restrict = move |x: &DVector<f64>| x.rows(0, n).into_owned();
        let g0 = base.g0.clone();
        let mut g0e = RiemannianField::new(ext.clone(), move |x| {
            let mut m = DMatrix::zeros(n + 1, n + 1);
            m.view_mut((0, 0), (n, n)).copy_from(&g0.value(&restrict(x)));
            m[(n, n)] = 1.0;
            m
        });
        if base.g0.has_analytic_partials() {
            let g0 = base.g0.clone();
            g0e = g0e.with_partials(move |x| {
                let mut p: Vec<DMatrix<f64>> = g0
                    .partials(&restrict(x))
                    .expect("analytic partials")
                    .into_iter()
                    .map(|d| {
                        let mut m = DMatrix::zeros(n + 1, n + 1);
                        m.view_mut((0, 0), (n, n)).copy_from(&d);
                        m
                    })
                    .collect();
                p.push(DMatrix::zeros(n + 1, n + 1));
                p
            });
        }
        let delta = base.delta.clone();
        let mut de = VectorField::new(ext.clone(), move |x| {
            let d = delta.value(&restrict(x));
            DVector::from_iterator(n + 1, d.iter().copied().chain([0.0]))
        });
        if base.delta.has_analytic_partials() {
            let delta = base.delta.clone();
            de = de.with_partials(move |x| {
                let mut p: Vec<DVector<f64>> = delta
                    .partials(&restrict(x))
                    .expect("analytic partials")
                    .into_iter()
                    .map(|d| DVector::from_iterator(n + 1, d.iter().copied().chain([0.0])))
                    .collect();
                p.push(DVector::zeros(n + 1));
                p
            });
        }
        let be = base.beta.lift_to(ext.clone());
        let extended = StationarySpacetime {
            domain: ext,
            g0: g0e,
            delta: de,
            beta: be,
            phi: None,
        };
        Ok(ExtendedSpacetime {
            base,
            extended,
            energy,
        })
    }

    /// Timelike geodesics with `g(z', z') = -E` from `(source, t0)` to the
    /// worldline of `observer`, one per homotopy class, parameterized on
    /// `[a, b]`; sorted by arrival time.
    #[allow(clippy::too_many_arguments)]
    pub fn timelike_fixed_energy(
        &self,
        source: &DVector<f64>,
        t0: f64,
        observer: &DVector<f64>,
        energy: f64,
        interval: (f64, f64),
        k: i64,
        n: usize,
        opts: &MinimizeOptions,
    ) -> Result<Vec<TimelikeResult>> {
        let (a, b) = interval;
        if !(a < b) {
            return Err(Error::Invalid(format!("need a < b, got [{a}, {b}]")));
        }
        self.domain.check_inside(source)?;
        self.domain.check_inside(observer)?;
        let ext = self.kaluza_klein_extend(energy)?;
        ext.solve(source, t0, observer, interval, k, n, opts)
    }
}

fn chart_length(x: &DiscreteCurve) -> f64 {
    x.nodes().windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
}

fn max_speed2(x: &DiscreteCurve) -> f64 {
    (0..x.segments())
        .map(|k| x.velocity(k).norm_squared())
        .fold(0.0, f64::max)
}

/// Cumulative midpoint-rule time along `x`.
fn time_along(
    metric: &FinslerMetric,
    x: &DiscreteCurve,
    t0: f64,
    direction: Direction,
) -> (Vec<f64>, f64) {
    let n = x.segments() as f64;
    let mut t = Vec::with_capacity(x.nodes().len());
    let mut acc = 0.0;
    t.push(t0);
    for k in 0..x.segments() {
        acc += metric.eval(&x.midpoint(k), &x.velocity(k)) / n;
        t.push(t0 + direction.sign() * acc);
    }
    let arrival = *t.last().unwrap();
    (t, arrival)
}

/// Resamples `x` at the same resolution with constant speed for the Randers
/// base metric `h = g~ + w w^T`.
fn constant_h_speed(st: &StationarySpacetime, x: &DiscreteCurve) -> Result<DiscreteCurve> {
    x.reparameterize(x.segments(), |m, d| {
        let (gt, w) = st.fermat_data(m);
        (d.dot(&(&gt * d)) + w.dot(d).powi(2)).max(0.0).sqrt()
    })
}

#[derive(Debug, Clone)]
pub struct LightRay {
    pub winding: Vec<i64>,
    /// Spatial projection, at constant `h`-speed.
    pub spatial: DiscreteCurve,
    /// Time coordinate at every node.
    pub t: Vec<f64>,
    pub arrival_time: f64,
    pub direction: Direction,
    /// Fermat (or reversed-Fermat) length of the spatial projection.
    pub length: f64,
    /// Largest `|g(z', z')|` over segment midpoints.
    pub null_residual: f64,
    /// `1 + max t'^2`, the natural size of the terms in `g(z', z')`.
    pub null_scale: f64,
    /// Relative spread of `t' - g~(delta, x')` across segments.
    pub c_spread: f64,
    /// Node deviation from the re-shot geodesic.
    pub geodesic_deviation: f64,
    /// `max |D_T T| L / max |T|^2` of the spatial curve.
    pub bending: f64,
}

impl LightRay {
    pub fn record(&self) -> RayRecord {
        RayRecord {
            winding: self.winding.clone(),
            arrival_time: self.arrival_time,
            length: self.length,
            null_residual: self.null_residual,
            energy_residual: None,
            direction: self.direction,
        }
    }

    /// `t'(s) > 0` (future) or `< 0` (past) on every segment.
    pub fn is_time_oriented(&self) -> bool {
        let s = self.direction.sign();
        self.t.windows(2).all(|w| s * (w[1] - w[0]) > 0.0)
    }
}

/// JSON summary of one ray.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayRecord {
    pub winding: Vec<i64>,
    pub arrival_time: f64,
    pub length: f64,
    pub null_residual: f64,
    pub energy_residual: Option<f64>,
    pub direction: Direction,
}

/// Smallest sup-norm distance from each ray's spatial curve to any other.
pub fn image_separation(rays: &[LightRay], domain: &ChartDomain) -> Vec<f64> {
    rays.iter()
        .enumerate()
        .map(|(i, r)| {
            rays.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| r.spatial.sup_distance(&o.spatial, domain))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExtendedSpacetime {
    /// Conformally normalized base spacetime.
    pub base: StationarySpacetime,
    /// `M0 x R_u` with metric `g0 + du^2 + 2 g0(delta, .) dt - beta dt^2`.
    pub extended: StationarySpacetime,
    pub energy: f64,
}

impl ExtendedSpacetime {
    /// `F~((x, u), (y, v)) = sqrt(g~(y, y) + v^2 / beta + g~(delta, y)^2) + g~(delta, y)`.
    pub fn fermat_metric(&self) -> Result<FinslerMetric> {
        self.extended.fermat_metric()
    }

    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        source: &DVector<f64>,
        t0: f64,
        observer: &DVector<f64>,
        (a, b): (f64, f64),
        k: i64,
        n: usize,
        opts: &MinimizeOptions,
    ) -> Result<Vec<TimelikeResult>> {
        let metric = self.fermat_metric()?;
        let root = self.energy.sqrt();
        let p = append(source, a * root);
        let q = append(observer, b * root);
        let found = multistart_homotopy(&metric, &p, &q, k, n, opts)?;
        let mut out: Vec<TimelikeResult> = found
            .iter()
            .filter(|r| r.report.converged && !r.zero_curve)
            .filter_map(|r| self.lift(&metric, r, t0).ok())
            .collect();
        out.sort_by(|x, y| x.arrival_time.total_cmp(&y.arrival_time));
        Ok(out)
    }

    fn lift(&self, metric: &FinslerMetric, found: &ConnectResult, t0: f64) -> Result<TimelikeResult> {
        let ray = self.extended.lift_with(metric, &found.curve, t0, Direction::Future)?;
        let n = self.base.dim();
        let nodes = ray.spatial.nodes();
        let segs = ray.spatial.segments();
        let root = self.energy.sqrt();
        // u / sqrt(E) is an affine parameter on [a, b]
        let s: Vec<f64> = nodes.iter().map(|z| z[n] / root).collect();
        let mut energy_residual: f64 = 0.0;
        let mut flux = Vec::with_capacity(segs);
        for k in 0..segs {
            let ds = s[k + 1] - s[k];
            let dz = &nodes[k + 1] - &nodes[k];
            let m = ray.spatial.midpoint(k).rows(0, n).into_owned();
            let xdot = dz.rows(0, n).into_owned() / ds;
            let tdot = (ray.t[k + 1] - ray.t[k]) / ds;
            let g = self.base.lorentz(&m, &xdot, tdot);
            energy_residual = energy_residual.max((g + self.energy).abs());
            flux.push(dz[n] * segs as f64 / self.base.beta.value(&m));
        }
        Ok(TimelikeResult {
            winding: ray.winding.clone(),
            s,
            x: nodes.iter().map(|z| z.rows(0, n).into_owned()).collect(),
            u: nodes.iter().map(|z| z[n]).collect(),
            t: ray.t.clone(),
            arrival_time: ray.arrival_time,
            length: ray.length,
            energy_residual,
            conservation_spread: relative_spread(&flux),
            null_residual: ray.null_residual,
        })
    }
}

fn append(x: &DVector<f64>, v: f64) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, x.iter().copied().chain([v]))
}

#[derive(Debug, Clone)]
pub struct TimelikeResult {
    pub winding: Vec<i64>,
    /// Affine parameter at every node, running from `a` to `b`.
    pub s: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    /// Extra coordinate of the extended ray.
    pub u: Vec<f64>,
    pub t: Vec<f64>,
    pub arrival_time: f64,
    /// Extended Fermat length.
    pub length: f64,
    /// Largest `|g(z', z') + E|` over segment midpoints.
    pub energy_residual: f64,
    /// Relative spread of `u' / beta` in the constant-speed parameter.
    pub conservation_spread: f64,
    pub null_residual: f64,
}

impl TimelikeResult {
    pub fn record(&self) -> RayRecord {
        RayRecord {
            winding: self.winding.clone(),
            arrival_time: self.arrival_time,
            length: self.length,
            null_residual: self.null_residual,
            energy_residual: Some(self.energy_residual),
            direction: Direction::Future,
        }
    }
}

/// Spacetimes used across tests, examples and the CLI defaults.
pub mod examples {
    use super::*;
    use nalgebra::dvector;
    use std::f64::consts::PI;

    fn square(dim: usize, half: f64) -> ChartDomain {
        (0..dim).fold(ChartDomain::new(dim).unwrap(), |d, i| {
            d.with_bounds(i, -half, half).unwrap()
        })
    }

    fn flat(domain: ChartDomain) -> (RiemannianField, ScalarField) {
        (
            RiemannianField::identity(domain.clone()),
            ScalarField::constant(domain, 1.0),
        )
    }

    /// Minkowski space on `[-half, half]^dim`.
    pub fn minkowski(dim: usize, half: f64) -> StationarySpacetime {
        let d = square(dim, half);
        let (g0, beta) = flat(d.clone());
        let delta = VectorField::constant(d, DVector::zeros(dim));
        StationarySpacetime::new(g0, delta, beta).unwrap()
    }

    /// Static flat cylinder: `theta` (period `2 pi`) times `z in [-5, 5]`.
    pub fn static_cylinder() -> StationarySpacetime {
        let d = ChartDomain::new(2)
            .unwrap()
            .with_period(0, 2.0 * PI)
            .unwrap()
            .with_bounds(1, -5.0, 5.0)
            .unwrap();
        let (g0, beta) = flat(d.clone());
        let delta = VectorField::constant(d, DVector::zeros(2));
        StationarySpacetime::new(g0, delta, beta).unwrap()
    }

    /// Flat spacetime in a frame rotating with angular speed `w`:
    /// `delta = w (-x2, x1)` on `[-half, half]^2`.
    pub fn rotating(w: f64, half: f64) -> StationarySpacetime {
        let d = square(2, half);
        let (g0, beta) = flat(d.clone());
        let delta = VectorField::new(d, move |x| dvector![-w * x[1], w * x[0]])
            .with_partials(move |_| vec![dvector![0.0, w], dvector![-w, 0.0]]);
        StationarySpacetime::new(g0, delta, beta).unwrap()
    }

    /// Constant drift `delta = (b, 0)` on `[-half, half]^2`.
    pub fn drift(b: f64, half: f64) -> StationarySpacetime {
        let d = square(2, half);
        let (g0, beta) = flat(d.clone());
        let delta = VectorField::constant(d, dvector![b, 0.0]);
        StationarySpacetime::new(g0, delta, beta).unwrap()
    }

    /// Rotation `delta = w d/dtheta` on the annulus `r in [1, 3]`,
    /// `theta` periodic, with `g0 = dr^2 + rho(r)^2 dtheta^2` and
    /// `rho = 1 + (r - 2)^2 / 4`, so the circle `r = 2` is a closed geodesic
    /// and every winding class has a minimizer inside the annulus.
    pub fn rotating_annulus(w: f64) -> StationarySpacetime {
        let d = ChartDomain::new(2)
            .unwrap()
            .with_bounds(0, 1.0, 3.0)
            .unwrap()
            .with_period(1, 2.0 * PI)
            .unwrap();
        let rho = |r: f64| 1.0 + 0.25 * (r - 2.0).powi(2);
        let g0 = RiemannianField::new(d.clone(), move |x| {
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, rho(x[0]).powi(2)])
        })
        .with_partials(move |x| {
            let dr = 2.0 * rho(x[0]) * 2.0 * 0.25 * (x[0] - 2.0);
            vec![
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, dr]),
                DMatrix::zeros(2, 2),
            ]
        });
        let delta = VectorField::constant(d.clone(), dvector![0.0, w]);
        let beta = ScalarField::constant(d, 1.0);
        StationarySpacetime::new(g0, delta, beta).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::examples::*;
    use super::*;
    use crate::variational::connect;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Independent evaluation of the Fermat metric from its definition.
    fn fermat_oracle(st: &StationarySpacetime, x: &DVector<f64>, y: &DVector<f64>, sign: f64) -> f64 {
        let g0 = st.g0().value(x);
        let b = st.beta().value(x);
        let d = st.delta().value(x);
        let gd = sign * d.dot(&(&g0 * y)) / b;
        gd + (gd * gd + y.dot(&(&g0 * y)) / b).sqrt()
    }

    fn wavy() -> StationarySpacetime {
        let d = ChartDomain::new(2)
            .unwrap()
            .with_bounds(0, -3.0, 3.0)
            .unwrap()
            .with_bounds(1, -3.0, 3.0)
            .unwrap();
        let g0 = RiemannianField::new(d.clone(), |x| {
            DMatrix::from_row_slice(2, 2, &[1.0 + 0.2 * x[1].sin().powi(2), 0.1, 0.1, 1.3])
        });
        let delta = VectorField::new(d.clone(), |x| dvector![0.4 * x[1].cos(), -0.3 + 0.1 * x[0]]);
        let beta = ScalarField::new(d, |x| 1.0 + 0.3 * (x[0] * 0.7).cos().powi(2));
        StationarySpacetime::new(g0, delta, beta).unwrap()
    }

    #[test]
    fn validation_rejects_bad_beta_and_phi() {
        let d = ChartDomain::new(1).unwrap().with_bounds(0, -1.0, 1.0).unwrap();
        let g0 = RiemannianField::identity(d.clone());
        let delta = VectorField::constant(d.clone(), DVector::zeros(1));
        let beta = ScalarField::new(d.clone(), |x| x[0]);
        assert!(matches!(
            StationarySpacetime::new(g0.clone(), delta.clone(), beta),
            Err(Error::NonPositiveBeta { .. })
        ));
        let st = StationarySpacetime::new(g0, delta, ScalarField::constant(d.clone(), 1.0)).unwrap();
        assert!(matches!(
            st.with_conformal_factor(ScalarField::new(d, |x| x[0] - 0.5)),
            Err(Error::NonPositiveConformal { .. })
        ));
    }

    #[test]
    fn fermat_metric_examples() {
        let mink = minkowski(2, 5.0);
        let f = mink.fermat_metric().unwrap();
        let y = dvector![3.0, -4.0];
        assert!((f.eval(&dvector![0.1, 0.2], &y) - 5.0).abs() < 1e-14);

        let rot = rotating(0.5, 3.0);
        let f = rot.fermat_metric().unwrap();
        let (x, y) = (dvector![1.0, 0.0], dvector![0.0, 1.0]);
        let golden = 0.5 + 1.25f64.sqrt();
        assert!((f.eval(&x, &y) - golden).abs() < 1e-14);
        assert!((f.eval(&x, &y) - fermat_oracle(&rot, &x, &y, 1.0)).abs() < 1e-14);
        let fr = rot.reversed_fermat_metric().unwrap();
        assert!((fr.eval(&x, &y) - (-0.5 + 1.25f64.sqrt())).abs() < 1e-14);

        // static, non-constant beta
        let d = ChartDomain::new(2).unwrap().with_bounds(0, -1.0, 1.0).unwrap();
        let st = StationarySpacetime::new(
            RiemannianField::identity(d.clone()),
            VectorField::constant(d.clone(), DVector::zeros(2)),
            ScalarField::new(d, |x| 2.0 + x[0]),
        )
        .unwrap();
        let f = st.fermat_metric().unwrap();
        let x = dvector![0.5, 0.0];
        assert!((f.eval(&x, &dvector![3.0, -4.0]) - (25.0f64 / 2.5).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn fermat_and_reversed_match_definition() {
        let st = wavy();
        let f = st.fermat_metric().unwrap();
        let fr = st.reversed_fermat_metric().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = dvector![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let y = dvector![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let v = f.eval(&x, &y);
            assert!((v - fermat_oracle(&st, &x, &y, 1.0)).abs() < 1e-12 * (1.0 + v));
            assert!((fr.eval(&x, &y) - f.eval(&x, &(-&y))).abs() < 1e-12 * (1.0 + v));
            assert!((fr.eval(&x, &y) - fermat_oracle(&st, &x, &y, -1.0)).abs() < 1e-12 * (1.0 + v));
        }
    }

    #[test]
    fn analytic_fermat_partials_match_finite_differences() {
        let st = rotating_annulus(0.3);
        let f = st.fermat_metric().unwrap();
        let r = f.as_randers().unwrap();
        assert!(r.h().has_analytic_partials());
        for x in [dvector![1.5, 0.3], dvector![2.7, 5.0]] {
            let a = r.h().partials(&x).unwrap();
            let n = r.h().fd_partials(&x).unwrap();
            for (p, q) in a.iter().zip(&n) {
                assert!((p - q).amax() < 1e-7 * (1.0 + q.amax()));
            }
        }
    }

    #[test]
    fn static_spacetime_is_reversible() {
        let d = ChartDomain::new(2).unwrap().with_bounds(0, -1.0, 1.0).unwrap();
        let st = StationarySpacetime::new(
            RiemannianField::new(d.clone(), |x| {
                DMatrix::from_row_slice(2, 2, &[2.0 + x[0], 0.3, 0.3, 1.0])
            }),
            VectorField::constant(d.clone(), DVector::zeros(2)),
            ScalarField::new(d, |x| 1.0 + x[0] * x[0]),
        )
        .unwrap();
        let f = st.fermat_metric().unwrap();
        assert!((f.reversibility(&dvector![0.3, 0.0]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conformal_normalization() {
        let st = wavy();
        assert_eq!(
            st.conformal_normalize().unwrap().g0().value(&dvector![0.1, 0.2]),
            st.g0().value(&dvector![0.1, 0.2])
        );
        let d = st.domain().clone();
        let scaled = st
            .clone()
            .with_conformal_factor(ScalarField::constant(d.clone(), 4.0))
            .unwrap();
        let norm = scaled.conformal_normalize().unwrap();
        let x = dvector![0.4, -0.2];
        assert!((norm.g0().value(&x) * 4.0 - st.g0().value(&x)).amax() < 1e-15);
        let (f1, f2) = (st.fermat_metric().unwrap(), norm.fermat_metric().unwrap());
        let y = dvector![0.3, 1.0];
        assert!((f1.eval(&x, &y) - f2.eval(&x, &y)).abs() < 1e-14);

        // a lifted geodesic is null for both metrics
        let varying = st
            .clone()
            .with_conformal_factor(ScalarField::new(d, |x| 2.0 + x[0].sin()))
            .unwrap();
        let r = connect(&f1, &dvector![-1.0, -1.0], &dvector![1.0, 0.5], 64, &MinimizeOptions::default())
            .unwrap();
        for s in [&varying, &varying.conformal_normalize().unwrap()] {
            let ray = s.lift_to_lightlike(&r.curve, 0.0, Direction::Future).unwrap();
            assert!(ray.null_residual < 1e-12 * ray.null_scale);
        }
    }

    #[test]
    fn reconstruct_time_examples() {
        let mink = minkowski(2, 5.0);
        let x = DiscreteCurve::straight(&dvector![0.0, 0.0], &dvector![3.0, 4.0], 16).unwrap();
        let (t, arrival) = mink.reconstruct_time(&x, 2.0, Direction::Future).unwrap();
        assert!((arrival - 7.0).abs() < 1e-14);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        let (_, past) = mink.reconstruct_time(&x, 2.0, Direction::Past).unwrap();
        assert!((past + 3.0).abs() < 1e-14);

        let st = wavy();
        let f = st.fermat_metric().unwrap();
        let nodes = (0..=40)
            .map(|k| {
                let s = k as f64 / 40.0;
                dvector![s, (3.0 * s).sin()]
            })
            .collect();
        let c = DiscreteCurve::new(nodes, vec![]).unwrap();
        let (_, arrival) = st.reconstruct_time(&c, 1.0, Direction::Future).unwrap();
        assert!((arrival - 1.0 - c.length(&f)).abs() < 1e-12);
    }

    #[test]
    fn minkowski_light_ray() {
        let mink = minkowski(2, 5.0);
        let x = DiscreteCurve::straight(&dvector![0.0, 0.0], &dvector![2.0, 0.0], 32).unwrap();
        let ray = mink.lift_to_lightlike(&x, 1.0, Direction::Future).unwrap();
        assert_eq!(ray.null_residual, 0.0);
        for (k, (p, t)) in ray.spatial.nodes().iter().zip(&ray.t).enumerate() {
            let s = k as f64 / 32.0;
            assert!((p[0] - 2.0 * s).abs() < 1e-14);
            assert!((t - (1.0 + 2.0 * s)).abs() < 1e-14);
        }
        assert!(ray.is_time_oriented());
    }

    #[test]
    fn lift_rejects_non_geodesics() {
        let mink = minkowski(2, 5.0);
        let nodes = (0..=32)
            .map(|k| {
                let s = k as f64 / 32.0;
                dvector![s, 0.3 * (PI * s).sin()]
            })
            .collect();
        let c = DiscreteCurve::new(nodes, vec![]).unwrap();
        assert!(matches!(
            mink.lift_to_lightlike(&c, 0.0, Direction::Future),
            Err(Error::NotAGeodesic { .. })
        ));
    }

    #[test]
    fn rotating_ray_has_constant_c() {
        let rot = rotating(0.5, 3.0);
        let f = rot.fermat_metric().unwrap();
        let r = connect(&f, &dvector![-1.0, 0.2], &dvector![1.0, 0.8], 128, &MinimizeOptions::default())
            .unwrap();
        let ray = rot.lift_to_lightlike(&r.curve, 0.0, Direction::Future).unwrap();
        assert!(ray.c_spread < 0.01, "{}", ray.c_spread);
        assert!(ray.null_residual < 1e-6 * ray.null_scale);
        assert!((ray.arrival_time - ray.length).abs() < 1e-12);
    }

    #[test]
    fn cylinder_lens_images() {
        let cyl = static_cylinder();
        let rays = cyl
            .lens_images(
                &dvector![0.0, 0.0],
                0.0,
                &dvector![PI / 2.0, 1.0],
                2,
                64,
                &MinimizeOptions::default(),
                Direction::Future,
            )
            .unwrap();
        assert_eq!(rays.len(), 5);
        let mut expected: Vec<f64> = (-2..=2)
            .map(|k| (1.0 + (PI / 2.0 + 2.0 * PI * k as f64).powi(2)).sqrt())
            .collect();
        expected.sort_by(f64::total_cmp);
        for (r, e) in rays.iter().zip(&expected) {
            assert!((r.arrival_time - e).abs() < 1e-9);
        }
        assert!(image_separation(&rays, cyl.domain()).iter().all(|s| *s > 0.1));
    }

    #[test]
    fn plane_has_one_image() {
        let mink = minkowski(2, 5.0);
        let rays = mink
            .lens_images(
                &dvector![0.0, 0.0],
                0.5,
                &dvector![1.0, 1.0],
                3,
                32,
                &MinimizeOptions::default(),
                Direction::Future,
            )
            .unwrap();
        assert_eq!(rays.len(), 1);
        assert!((rays[0].arrival_time - 0.5 - 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn past_rays_dual_to_reflected_future_rays() {
        let st = wavy();
        let (p, q) = (dvector![-1.0, -0.5], dvector![1.2, 0.7]);
        let opts = MinimizeOptions::default();
        let past = st.lens_images(&p, 0.0, &q, 0, 64, &opts, Direction::Past).unwrap();
        let fut = st
            .time_reflected()
            .lens_images(&p, 0.0, &q, 0, 64, &opts, Direction::Future)
            .unwrap();
        assert_eq!(past.len(), 1);
        assert_eq!(fut.len(), 1);
        for (a, b) in past[0].spatial.nodes().iter().zip(fut[0].spatial.nodes()) {
            assert!((a - b).amax() < 1e-8);
        }
        assert!((past[0].arrival_time + fut[0].arrival_time).abs() < 1e-8);
        assert!(past[0].is_time_oriented());
    }

    #[test]
    fn kaluza_klein_metric() {
        let mink = minkowski(2, 5.0);
        let ext = mink.kaluza_klein_extend(1.0).unwrap();
        let f = ext.fermat_metric().unwrap();
        assert!((f.eval(&dvector![0.0, 0.0, 0.3], &dvector![1.0, 2.0, 2.0]) - 3.0).abs() < 1e-14);
        assert!(mink.kaluza_klein_extend(0.0).is_err());

        let st = wavy();
        let ext = st.kaluza_klein_extend(2.0).unwrap();
        let fe = ext.fermat_metric().unwrap();
        let f = st.fermat_metric().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = dvector![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let y = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let xe = append(&x, rng.random_range(-2.0..2.0));
            let v = rng.random_range(-1.0..1.0);
            assert!((fe.eval(&xe, &append(&y, 0.0)) - f.eval(&x, &y)).abs() < 1e-13);
            // direct formula
            let (gt, w) = st.fermat_data(&x);
            let b = st.beta().value(&x);
            let wy = w.dot(&y);
            let want = (y.dot(&(&gt * &y)) + v * v / b + wy * wy).sqrt() + wy;
            assert!((fe.eval(&xe, &append(&y, v)) - want).abs() < 1e-13);
            let g = fe.g_matrix(&xe, &append(&y, v)).unwrap();
            assert!(g.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn minkowski_timelike() {
        let mink = minkowski(2, 5.0);
        let res = mink
            .timelike_fixed_energy(
                &dvector![0.0, 0.0],
                0.25,
                &dvector![3.0, 0.0],
                1.0,
                (0.0, 1.0),
                2,
                64,
                &MinimizeOptions::default(),
            )
            .unwrap();
        assert_eq!(res.len(), 1);
        assert!((res[0].arrival_time - 0.25 - 10f64.sqrt()).abs() < 1e-10);
        assert!(res[0].energy_residual < 1e-10);
        assert!(res[0].conservation_spread < 1e-10);
        assert!((res[0].s[0]).abs() < 1e-14 && (res[0].s[64] - 1.0).abs() < 1e-12);
        assert!(mink
            .timelike_fixed_energy(
                &dvector![0.0, 0.0],
                0.0,
                &dvector![3.0, 0.0],
                1.0,
                (1.0, 1.0),
                0,
                16,
                &MinimizeOptions::default(),
            )
            .is_err());
    }

    #[test]
    fn small_energy_approaches_light_ray() {
        let mink = minkowski(2, 5.0);
        let res = mink
            .timelike_fixed_energy(
                &dvector![0.0, 0.0],
                0.0,
                &dvector![0.0, 2.0],
                1e-8,
                (0.0, 1.0),
                0,
                32,
                &MinimizeOptions::default(),
            )
            .unwrap();
        assert!((res[0].arrival_time - 2.0).abs() < 1e-7);
    }

    #[test]
    fn cylinder_timelike_classes() {
        let cyl = static_cylinder();
        let res = cyl
            .timelike_fixed_energy(
                &dvector![0.0, 0.0],
                0.0,
                &dvector![PI / 2.0, 1.0],
                1.0,
                (0.0, 1.0),
                1,
                64,
                &MinimizeOptions::default(),
            )
            .unwrap();
        assert_eq!(res.len(), 3);
        let mut expected: Vec<f64> = (-1..=1)
            .map(|k| (2.0 + (PI / 2.0 + 2.0 * PI * k as f64).powi(2)).sqrt())
            .collect();
        expected.sort_by(f64::total_cmp);
        for (r, e) in res.iter().zip(&expected) {
            assert!((r.arrival_time - e).abs() < 1e-9);
            assert!(r.energy_residual < 1e-3);
        }
    }

    #[test]
    fn rotating_timelike_conserves_u() {
        let rot = rotating(0.3, 3.0);
        let res = rot
            .timelike_fixed_energy(
                &dvector![-1.0, 0.0],
                0.0,
                &dvector![1.0, 0.5],
                1.0,
                (0.0, 2.0),
                0,
                128,
                &MinimizeOptions::default(),
            )
            .unwrap();
        assert_eq!(res.len(), 1);
        assert!(res[0].energy_residual < 1e-3);
        assert!(res[0].conservation_spread < 0.01);
    }

    #[test]
    fn annulus_classes_are_asymmetric() {
        let st = rotating_annulus(0.3);
        let rays = st
            .lens_images(
                &dvector![1.6, 0.0],
                0.0,
                &dvector![2.4, PI / 2.0],
                1,
                128,
                &MinimizeOptions::default(),
                Direction::Future,
            )
            .unwrap();
        assert_eq!(rays.len(), 3);
        let plus = rays.iter().find(|r| r.winding == vec![1]).unwrap();
        let minus = rays.iter().find(|r| r.winding == vec![-1]).unwrap();
        assert!((plus.arrival_time - minus.arrival_time).abs() > 0.1);
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("past".parse::<Direction>().unwrap(), Direction::Past);
        assert!("sideways".parse::<Direction>().is_err());
        assert_eq!(Direction::Future.to_string(), "future");
    }
}
