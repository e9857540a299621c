//! Coordinate chart and the scalar, vector, one-form and metric fields that
//! live on it.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Point = DVector<f64>;

/// Relative step for first derivatives in x: `h = 1e-5 (1 + |x|_inf)`.
pub const FD_STEP: f64 = 1e-5;
/// Relative step for second derivatives: `h = 1e-4 (1 + |x|_inf)`.
pub const FD_STEP2: f64 = 1e-4;

pub fn fd_step(x: &DVector<f64>) -> f64 {
    FD_STEP * (1.0 + x.amax())
}

/// A single global chart: `R^n` with some axes optionally periodic.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartDomain {
    dim: usize,
    periods: Vec<Option<f64>>,
    bounds: Vec<Option<(f64, f64)>>,
}

impl ChartDomain {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("chart dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            periods: vec![None; dim],
            bounds: vec![None; dim],
        })
    }

    pub fn with_period(mut self, axis: usize, period: f64) -> Result<Self> {
        if axis >= self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: axis + 1,
            });
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Invalid(format!("period must be > 0, got {period}")));
        }
        self.periods[axis] = Some(period);
        Ok(self)
    }

    pub fn with_bounds(mut self, axis: usize, lo: f64, hi: f64) -> Result<Self> {
        if axis >= self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: axis + 1,
            });
        }
        if !(lo < hi) {
            return Err(Error::Invalid(format!("empty bounds [{lo}, {hi}]")));
        }
        self.bounds[axis] = Some((lo, hi));
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self, axis: usize) -> Option<f64> {
        self.periods[axis]
    }

    pub fn periods(&self) -> &[Option<f64>] {
        &self.periods
    }

    pub fn bounds(&self) -> &[Option<(f64, f64)>] {
        &self.bounds
    }

    pub fn periodic_axes(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| self.periods[i].is_some()).collect()
    }

    /// Reduces every periodic coordinate into `[0, period)`.
    pub fn wrap(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        self.wrap_in_place(&mut out);
        out
    }

    pub fn wrap_in_place(&self, x: &mut DVector<f64>) {
        for (i, p) in self.periods.iter().enumerate() {
            if let Some(p) = *p {
                let mut r = x[i].rem_euclid(p);
                if r >= p {
                    r -= p;
                }
                x[i] = r;
            }
        }
    }

    /// Component-wise difference `b - a` with periodic axes reduced to the
    /// representative of smallest magnitude.
    pub fn periodic_difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = b - a;
        for (i, p) in self.periods.iter().enumerate() {
            if let Some(p) = *p {
                d[i] -= p * (d[i] / p).round();
            }
        }
        d
    }

    /// True when every bounded, non-periodic coordinate lies in its interval.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..self.dim).all(|i| {
            if self.periods[i].is_some() {
                return x[i].is_finite();
            }
            match self.bounds[i] {
                Some((lo, hi)) => x[i] >= lo && x[i] <= hi,
                None => x[i].is_finite(),
            }
        })
    }

    pub fn check_inside(&self, x: &DVector<f64>) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain {
                point: x.iter().copied().collect(),
            })
        }
    }

    /// Checks that the central-difference stencil `x +- h e_k` stays inside.
    pub fn check_stencil(&self, x: &DVector<f64>, h: f64) -> Result<()> {
        for i in 0..self.dim {
            if self.periods[i].is_some() {
                continue;
            }
            if let Some((lo, hi)) = self.bounds[i] {
                if x[i] - h < lo || x[i] + h > hi {
                    return Err(Error::Domain {
                        point: x.iter().copied().collect(),
                    });
                }
            }
        }
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain {
                point: x.iter().copied().collect(),
            })
        }
    }

    /// Sampling interval per axis: the declared bounds, else one period,
    /// else `[-1, 1]`.
    pub fn sample_range(&self, axis: usize) -> (f64, f64) {
        if let Some(b) = self.bounds[axis] {
            return b;
        }
        if let Some(p) = self.periods[axis] {
            return (0.0, p);
        }
        (-1.0, 1.0)
    }

    /// Regular sampling grid with `per_axis` points on every axis (periodic
    /// axes skip the duplicate end point).
    pub fn sample_grid(&self, per_axis: usize) -> Vec<DVector<f64>> {
        let per_axis = per_axis.max(2);
        let axes: Vec<Vec<f64>> = (0..self.dim)
            .map(|i| {
                let (lo, hi) = self.sample_range(i);
                if self.periods[i].is_some() && self.bounds[i].is_none() {
                    (0..per_axis)
                        .map(|k| lo + (hi - lo) * k as f64 / per_axis as f64)
                        .collect()
                } else {
                    (0..per_axis)
                        .map(|k| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total: usize = axes.iter().map(|a| a.len()).product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; self.dim];
        for _ in 0..total {
            out.push(DVector::from_iterator(
                self.dim,
                idx.iter().enumerate().map(|(i, &k)| axes[i][k]),
            ));
            for i in 0..self.dim {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    break;
                }
                idx[i] = 0;
            }
        }
        out
    }

    /// Appends a non-periodic, unbounded axis (used for the extra dimension
    /// of the Kaluza-Klein extension).
    pub fn extended(&self) -> Self {
        let mut periods = self.periods.clone();
        periods.push(None);
        let mut bounds = self.bounds.clone();
        bounds.push(None);
        Self {
            dim: self.dim + 1,
            periods,
            bounds,
        }
    }
}

/// Values that can be differenced by central finite differences.
pub trait FieldValue: Clone + Send + Sync + 'static {
    /// `(plus - minus) * scale`
    fn central(plus: &Self, minus: &Self, scale: f64) -> Self;
}

impl FieldValue for f64 {
    fn central(plus: &Self, minus: &Self, scale: f64) -> Self {
        (plus - minus) * scale
    }
}

impl FieldValue for DVector<f64> {
    fn central(plus: &Self, minus: &Self, scale: f64) -> Self {
        (plus - minus) * scale
    }
}

impl FieldValue for DMatrix<f64> {
    fn central(plus: &Self, minus: &Self, scale: f64) -> Self {
        (plus - minus) * scale
    }
}

type Evaluator<T> = Arc<dyn Fn(&DVector<f64>) -> T + Send + Sync>;
type PartialsEvaluator<T> = Arc<dyn Fn(&DVector<f64>) -> Vec<T> + Send + Sync>;

/// A field on the chart. Evaluation is pure; periodic coordinates are
/// wrapped before the evaluator sees them.
#[derive(Clone)]
pub struct Field<T: FieldValue> {
    domain: ChartDomain,
    eval: Evaluator<T>,
    partials: Option<PartialsEvaluator<T>>,
}

pub type ScalarField = Field<f64>;
pub type VectorField = Field<DVector<f64>>;
pub type OneFormField = Field<DVector<f64>>;
pub type RiemannianField = Field<DMatrix<f64>>;

impl<T: FieldValue> fmt::Debug for Field<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("domain", &self.domain)
            .field("analytic_partials", &self.partials.is_some())
            .finish()
    }
}

impl<T: FieldValue> Field<T> {
    pub fn new(
        domain: ChartDomain,
        eval: impl Fn(&DVector<f64>) -> T + Send + Sync + 'static,
    ) -> Self {
        Self {
            domain,
            eval: Arc::new(eval),
            partials: None,
        }
    }

    /// Attaches analytic first partials `x -> [d_1 f, ..., d_n f]`.
    pub fn with_partials(
        mut self,
        partials: impl Fn(&DVector<f64>) -> Vec<T> + Send + Sync + 'static,
    ) -> Self {
        self.partials = Some(Arc::new(partials));
        self
    }

    pub fn constant(domain: ChartDomain, value: T) -> Self {
        let zero_value = T::central(&value, &value, 0.0);
        let n = domain.dim();
        let v = value.clone();
        Self::new(domain, move |_| v.clone()).with_partials(move |_| vec![zero_value.clone(); n])
    }

    pub fn domain(&self) -> &ChartDomain {
        &self.domain
    }

    pub fn has_analytic_partials(&self) -> bool {
        self.partials.is_some()
    }

    pub fn value(&self, x: &DVector<f64>) -> T {
        if self.domain.periods.iter().any(Option::is_some) {
            (self.eval)(&self.domain.wrap(x))
        } else {
            (self.eval)(x)
        }
    }

    /// Analytic partials when available, otherwise central differences with
    /// step `1e-5 (1 + |x|_inf)`.
    pub fn partials(&self, x: &DVector<f64>) -> Result<Vec<T>> {
        if let Some(p) = &self.partials {
            self.domain.check_inside(x)?;
            let xw = self.domain.wrap(x);
            return Ok(p(&xw));
        }
        self.fd_partials(x)
    }

    /// Central-difference partials, ignoring any analytic provider.
    pub fn fd_partials(&self, x: &DVector<f64>) -> Result<Vec<T>> {
        let h = fd_step(x);
        self.domain.check_stencil(x, h)?;
        let scale = 0.5 / h;
        let mut xp = x.clone();
        Ok((0..self.domain.dim())
            .map(|k| {
                xp[k] = x[k] + h;
                let plus = self.value(&xp);
                xp[k] = x[k] - h;
                let minus = self.value(&xp);
                xp[k] = x[k];
                T::central(&plus, &minus, scale)
            })
            .collect())
    }

    /// Re-targets the field onto a chart with one extra trailing coordinate
    /// that the field ignores.
    pub fn lift_to(&self, extended: ChartDomain) -> Self {
        let n = self.domain.dim();
        let inner = self.clone();
        let inner_p = self.clone();
        let zero = {
            let x0 = DVector::zeros(n);
            let v = self.value(&x0);
            T::central(&v, &v, 0.0)
        };
        let mut field = Self::new(extended, move |x: &DVector<f64>| {
            inner.value(&x.rows(0, n).into_owned())
        });
        if self.partials.is_some() {
            field = field.with_partials(move |x: &DVector<f64>| {
                let base = x.rows(0, n).into_owned();
                let mut p = inner_p
                    .partials(&base)
                    .unwrap_or_else(|_| vec![zero.clone(); n]);
                p.push(zero.clone());
                p
            });
        }
        field
    }
}

impl RiemannianField {
    /// Smallest eigenvalue over the sampling grid and where it occurs.
    pub fn min_eigenvalue_on_grid(&self, per_axis: usize) -> (f64, DVector<f64>) {
        let mut best = (f64::INFINITY, DVector::zeros(self.domain.dim()));
        for x in self.domain.sample_grid(per_axis) {
            let m = self.value(&x);
            let sym = (&m + m.transpose()) * 0.5;
            let lam = sym.symmetric_eigenvalues().min();
            if lam < best.0 {
                best = (lam, x);
            }
        }
        best
    }

    pub fn check_positive_definite(&self, per_axis: usize) -> Result<()> {
        let (lam, x) = self.min_eigenvalue_on_grid(per_axis);
        if lam > 0.0 && lam.is_finite() {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite {
                point: x.iter().copied().collect(),
                min_eigenvalue: lam,
            })
        }
    }

    pub fn identity(domain: ChartDomain) -> Self {
        let n = domain.dim();
        Self::constant(domain, DMatrix::identity(n, n))
    }
}
