//! Plain-text run configuration.
//!
//! ```text
//! # static cylinder
//! dim = 2
//! periods = [2pi, none]
//! bounds = [none, [-5, 5]]
//! g0 = [[1, 0], [0, 1]]
//! delta = [0, 0]
//! beta = 1
//! source = [0, 0]
//! observer = [pi/2, 1]
//! ```
//!
//! Values are expressions in `x1..xn` or bracketed lists of them. A list
//! may continue over several lines until its brackets balance. Field
//! derivatives are taken by finite differences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{eval_constant, Expr};
use crate::fermat::{Direction, StationarySpacetime};
use crate::fields::{ChartDomain, OneFormField, RiemannianField, ScalarField, VectorField};
use crate::finsler::{FinslerMetric, RandersMetric};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Atom(String),
    List(Vec<Value>),
}

impl Value {
    fn parse(src: &str) -> Result<Self> {
        let src = src.trim();
        if let Some(inner) = src.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("unbalanced brackets in `{src}`")))?;
            if inner.trim().is_empty() {
                return Ok(Value::List(Vec::new()));
            }
            let mut items = Vec::new();
            let mut depth = 0i32;
            let mut start = 0;
            for (i, c) in inner.char_indices() {
                match c {
                    '[' | '(' => depth += 1,
                    ']' | ')' => depth -= 1,
                    ',' if depth == 0 => {
                        items.push(Value::parse(&inner[start..i])?);
                        start = i + 1;
                    }
                    _ => {}
                }
                if depth < 0 {
                    return Err(Error::Config(format!("unbalanced brackets in `{src}`")));
                }
            }
            items.push(Value::parse(&inner[start..])?);
            Ok(Value::List(items))
        } else if src.is_empty() {
            Err(Error::Config("empty value".into()))
        } else if src.contains('[') || src.contains(']') {
            Err(Error::Config(format!("unexpected bracket in `{src}`")))
        } else {
            Ok(Value::Atom(src.to_string()))
        }
    }

    fn atom(&self, key: &str) -> Result<&str> {
        match self {
            Value::Atom(s) => Ok(s),
            Value::List(_) => Err(Error::Config(format!("`{key}` expects a single value"))),
        }
    }

    fn list(&self, key: &str) -> Result<&[Value]> {
        match self {
            Value::List(v) => Ok(v),
            Value::Atom(_) => Err(Error::Config(format!("`{key}` expects a list"))),
        }
    }
}

fn bracket_depth(s: &str) -> i32 {
    s.chars()
        .map(|c| match c {
            '[' => 1,
            ']' => -1,
            _ => 0,
        })
        .sum()
}

/// Splits the text into `key = value` entries, dropping `#` comments.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    let mut pending: Option<(String, String, usize)> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some((key, mut acc, at)) = pending.take() {
            acc.push(' ');
            acc.push_str(line);
            if bracket_depth(&acc) > 0 {
                pending = Some((key, acc, at));
            } else {
                insert(&mut out, key, &acc, at)?;
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("line {}: bad key `{key}`", lineno + 1)));
        }
        let value = value.trim().to_string();
        if bracket_depth(&value) > 0 {
            pending = Some((key, value, lineno + 1));
        } else {
            insert(&mut out, key, &value, lineno + 1)?;
        }
    }
    if let Some((key, _, at)) = pending {
        return Err(Error::Config(format!("line {at}: unterminated list for `{key}`")));
    }
    Ok(out)
}

fn insert(map: &mut BTreeMap<String, Value>, key: String, value: &str, line: usize) -> Result<()> {
    let v = Value::parse(value).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    if map.insert(key.clone(), v).is_some() {
        return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
    }
    Ok(())
}

/// Manifold data: a standard stationary spacetime or a bare Randers metric.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Spacetime {
        g0: Vec<Vec<Expr>>,
        delta: Vec<Expr>,
        beta: Expr,
        phi: Option<Expr>,
    },
    Randers {
        h: Vec<Vec<Expr>>,
        omega: Vec<Expr>,
    },
}

/// Numeric knobs; command-line flags override them.
#[derive(Debug, Clone, PartialEq)]
pub struct Knobs {
    pub n: usize,
    pub k: i64,
    pub tol: f64,
    pub step: f64,
    pub resolution: usize,
    pub seed: u64,
    pub direction: Direction,
    pub energy: f64,
}

impl Default for Knobs {
    fn default() -> Self {
        Self {
            n: 64,
            k: 1,
            tol: 1e-8,
            step: 1e-2,
            resolution: 101,
            seed: 0,
            direction: Direction::Future,
            energy: 1.0,
        }
    }
}

/// Points and times used by the subcommands.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Events {
    pub source: Option<Vec<f64>>,
    pub observer: Option<Vec<f64>>,
    pub t0: f64,
    pub t1: Option<f64>,
    pub velocity: Option<Vec<f64>>,
    pub length: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub horizon: Option<f64>,
    pub slices: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dim: usize,
    pub periods: Vec<Option<f64>>,
    pub bounds: Vec<Option<(f64, f64)>>,
    pub model: Model,
    pub knobs: Knobs,
    pub events: Events,
}

const KEYS: &[&str] = &[
    "dim", "periods", "bounds", "g0", "delta", "beta", "phi", "h", "omega", "N", "K", "tol",
    "step", "resolution", "seed", "direction", "energy", "source", "observer", "t0", "t1",
    "velocity", "length", "interval", "horizon", "slices",
];

fn number(v: &Value, key: &str) -> Result<f64> {
    eval_constant(v.atom(key)?).map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn count<T: TryFrom<i64>>(v: &Value, key: &str, min: i64) -> Result<T> {
    let x = number(v, key)?;
    if x.fract() != 0.0 || x < min as f64 || x > 1e15 {
        return Err(Error::Config(format!("`{key}` must be an integer >= {min}, got {x}")));
    }
    T::try_from(x as i64).map_err(|_| Error::Config(format!("`{key}` out of range")))
}

fn positive(v: &Value, key: &str) -> Result<f64> {
    let x = number(v, key)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Config(format!("`{key}` must be positive, got {x}")));
    }
    Ok(x)
}

fn point(v: &Value, key: &str, dim: usize) -> Result<Vec<f64>> {
    let items = v.list(key)?;
    if items.len() != dim {
        return Err(Error::Config(format!("`{key}` needs {dim} entries, got {}", items.len())));
    }
    items.iter().map(|x| number(x, key)).collect()
}

fn expr(v: &Value, key: &str, dim: usize) -> Result<Expr> {
    Expr::parse(v.atom(key)?, dim).map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn exprs(v: &Value, key: &str, dim: usize) -> Result<Vec<Expr>> {
    let items = v.list(key)?;
    if items.len() != dim {
        return Err(Error::Config(format!("`{key}` needs {dim} entries, got {}", items.len())));
    }
    items.iter().map(|x| expr(x, key, dim)).collect()
}

fn matrix(v: &Value, key: &str, dim: usize) -> Result<Vec<Vec<Expr>>> {
    let rows = v.list(key)?;
    if rows.len() != dim {
        return Err(Error::Config(format!("`{key}` needs {dim} rows, got {}", rows.len())));
    }
    rows.iter().map(|r| exprs(r, key, dim)).collect()
}

fn is_none(v: &Value) -> bool {
    matches!(v, Value::Atom(s) if s == "none")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_entries(text)?;
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let get = |k: &str| map.get(k);
        let dim: usize = match get("dim") {
            Some(v) => count(v, "dim", 1)?,
            None => return Err(Error::Config("missing `dim`".into())),
        };
        let periods = match get("periods") {
            None => vec![None; dim],
            Some(v) => {
                let items = v.list("periods")?;
                if items.len() != dim {
                    return Err(Error::Config(format!("`periods` needs {dim} entries")));
                }
                items
                    .iter()
                    .map(|p| if is_none(p) { Ok(None) } else { positive(p, "periods").map(Some) })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let bounds = match get("bounds") {
            None => vec![None; dim],
            Some(v) => {
                let items = v.list("bounds")?;
                if items.len() != dim {
                    return Err(Error::Config(format!("`bounds` needs {dim} entries")));
                }
                items
                    .iter()
                    .map(|b| {
                        if is_none(b) {
                            return Ok(None);
                        }
                        let p = point(b, "bounds", 2)?;
                        if !(p[0] < p[1]) {
                            return Err(Error::Config(format!("empty bounds {p:?}")));
                        }
                        Ok(Some((p[0], p[1])))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let spacetime_keys = ["g0", "delta", "beta", "phi"].iter().any(|k| map.contains_key(*k));
        let randers_keys = ["h", "omega"].iter().any(|k| map.contains_key(*k));
        let model = match (spacetime_keys, randers_keys) {
            (true, true) => {
                return Err(Error::Config(
                    "give either g0/delta/beta/phi or h/omega, not both".into(),
                ))
            }
            (_, true) => Model::Randers {
                h: match get("h") {
                    Some(v) => matrix(v, "h", dim)?,
                    None => identity_exprs(dim),
                },
                omega: match get("omega") {
                    Some(v) => exprs(v, "omega", dim)?,
                    None => vec![Expr::constant(0.0, dim); dim],
                },
            },
            _ => Model::Spacetime {
                g0: match get("g0") {
                    Some(v) => matrix(v, "g0", dim)?,
                    None => identity_exprs(dim),
                },
                delta: match get("delta") {
                    Some(v) => exprs(v, "delta", dim)?,
                    None => vec![Expr::constant(0.0, dim); dim],
                },
                beta: match get("beta") {
                    Some(v) => expr(v, "beta", dim)?,
                    None => Expr::constant(1.0, dim),
                },
                phi: get("phi").map(|v| expr(v, "phi", dim)).transpose()?,
            },
        };
        let mut knobs = Knobs::default();
        if let Some(v) = get("N") {
            knobs.n = count(v, "N", 2)?;
        }
        if let Some(v) = get("K") {
            knobs.k = count(v, "K", 0)?;
        }
        if let Some(v) = get("tol") {
            knobs.tol = positive(v, "tol")?;
        }
        if let Some(v) = get("step") {
            knobs.step = positive(v, "step")?;
        }
        if let Some(v) = get("resolution") {
            knobs.resolution = count(v, "resolution", 2)?;
        }
        if let Some(v) = get("seed") {
            knobs.seed = count(v, "seed", 0)?;
        }
        if let Some(v) = get("direction") {
            knobs.direction = Direction::from_str(v.atom("direction")?)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(v) = get("energy") {
            knobs.energy = positive(v, "energy")?;
        }
        let mut events = Events::default();
        events.source = get("source").map(|v| point(v, "source", dim)).transpose()?;
        events.observer = get("observer").map(|v| point(v, "observer", dim)).transpose()?;
        events.velocity = get("velocity").map(|v| point(v, "velocity", dim)).transpose()?;
        if let Some(v) = get("t0") {
            events.t0 = number(v, "t0")?;
        }
        events.t1 = get("t1").map(|v| number(v, "t1")).transpose()?;
        events.length = get("length").map(|v| positive(v, "length")).transpose()?;
        events.horizon = get("horizon").map(|v| positive(v, "horizon")).transpose()?;
        events.slices = get("slices").map(|v| count(v, "slices", 1)).transpose()?;
        if let Some(v) = get("interval") {
            let p = point(v, "interval", 2)?;
            if !(p[0] < p[1]) {
                return Err(Error::Config(format!("`interval` needs a < b, got {p:?}")));
            }
            events.interval = Some((p[0], p[1]));
        }
        let config = Self {
            dim,
            periods,
            bounds,
            model,
            knobs,
            events,
        };
        let domain = config.domain().map_err(|e| Error::Config(e.to_string()))?;
        match &config.model {
            Model::Spacetime { g0, .. } => check_symmetric(&domain, g0, "g0")?,
            Model::Randers { h, .. } => check_symmetric(&domain, h, "h")?,
        }
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn domain(&self) -> Result<ChartDomain> {
        let mut d = ChartDomain::new(self.dim)?;
        for i in 0..self.dim {
            if let Some(p) = self.periods[i] {
                d = d.with_period(i, p)?;
            }
            if let Some((lo, hi)) = self.bounds[i] {
                d = d.with_bounds(i, lo, hi)?;
            }
        }
        Ok(d)
    }

    pub fn is_spacetime(&self) -> bool {
        matches!(self.model, Model::Spacetime { .. })
    }

    pub fn spacetime(&self) -> Result<StationarySpacetime> {
        let Model::Spacetime { g0, delta, beta, phi } = &self.model else {
            return Err(Error::Config("this command needs g0/delta/beta".into()));
        };
        let d = self.domain()?;
        let st = StationarySpacetime::new(
            matrix_field(&d, g0, "g0")?,
            vector_field(&d, delta),
            scalar_field(&d, beta),
        )?;
        match phi {
            Some(p) => st.with_conformal_factor(scalar_field(&d, p)),
            None => Ok(st),
        }
    }

    /// The Randers ingredients without the `|omega| < 1` check.
    pub fn randers_unchecked(&self) -> Result<RandersMetric> {
        let Model::Randers { h, omega } = &self.model else {
            return Err(Error::Config("not a Randers metric config".into()));
        };
        let d = self.domain()?;
        let h = matrix_field(&d, h, "h")?;
        h.check_positive_definite(9)?;
        Ok(RandersMetric::new_unchecked(h, vector_field(&d, omega)))
    }

    /// The Fermat metric (future or past) of a spacetime config, or the
    /// configured Randers metric.
    pub fn metric(&self) -> Result<FinslerMetric> {
        match &self.model {
            Model::Spacetime { .. } => self.spacetime()?.metric_for(self.knobs.direction),
            Model::Randers { .. } => {
                let r = self.randers_unchecked()?;
                let r = RandersMetric::new(r.h().clone(), r.omega().clone())?;
                Ok(FinslerMetric::from(r))
            }
        }
    }

    /// Text that parses back to an equal config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let num = |x: f64| format!("{x:?}");
        let list = |v: &[String]| format!("[{}]", v.join(", "));
        let exprs = |v: &[Expr]| list(&v.iter().map(|e| e.source().to_string()).collect::<Vec<_>>());
        let matrix = |m: &[Vec<Expr>]| list(&m.iter().map(|r| exprs(r)).collect::<Vec<_>>());
        let point = |p: &[f64]| list(&p.iter().map(|x| num(*x)).collect::<Vec<_>>());
        let _ = writeln!(s, "dim = {}", self.dim);
        let periods: Vec<String> = self
            .periods
            .iter()
            .map(|p| p.map_or("none".into(), num))
            .collect();
        let _ = writeln!(s, "periods = {}", list(&periods));
        let bounds: Vec<String> = self
            .bounds
            .iter()
            .map(|b| b.map_or("none".into(), |(lo, hi)| point(&[lo, hi])))
            .collect();
        let _ = writeln!(s, "bounds = {}", list(&bounds));
        match &self.model {
            Model::Spacetime { g0, delta, beta, phi } => {
                let _ = writeln!(s, "g0 = {}", matrix(g0));
                let _ = writeln!(s, "delta = {}", exprs(delta));
                let _ = writeln!(s, "beta = {}", beta.source());
                if let Some(p) = phi {
                    let _ = writeln!(s, "phi = {}", p.source());
                }
            }
            Model::Randers { h, omega } => {
                let _ = writeln!(s, "h = {}", matrix(h));
                let _ = writeln!(s, "omega = {}", exprs(omega));
            }
        }
        let k = &self.knobs;
        let _ = writeln!(s, "N = {}", k.n);
        let _ = writeln!(s, "K = {}", k.k);
        let _ = writeln!(s, "tol = {}", num(k.tol));
        let _ = writeln!(s, "step = {}", num(k.step));
        let _ = writeln!(s, "resolution = {}", k.resolution);
        let _ = writeln!(s, "seed = {}", k.seed);
        let _ = writeln!(s, "direction = {}", k.direction);
        let _ = writeln!(s, "energy = {}", num(k.energy));
        let e = &self.events;
        if let Some(p) = &e.source {
            let _ = writeln!(s, "source = {}", point(p));
        }
        if let Some(p) = &e.observer {
            let _ = writeln!(s, "observer = {}", point(p));
        }
        let _ = writeln!(s, "t0 = {}", num(e.t0));
        if let Some(t) = e.t1 {
            let _ = writeln!(s, "t1 = {}", num(t));
        }
        if let Some(p) = &e.velocity {
            let _ = writeln!(s, "velocity = {}", point(p));
        }
        if let Some(l) = e.length {
            let _ = writeln!(s, "length = {}", num(l));
        }
        if let Some((a, b)) = e.interval {
            let _ = writeln!(s, "interval = {}", point(&[a, b]));
        }
        if let Some(h) = e.horizon {
            let _ = writeln!(s, "horizon = {}", num(h));
        }
        if let Some(n) = e.slices {
            let _ = writeln!(s, "slices = {n}");
        }
        s
    }
}

fn identity_exprs(dim: usize) -> Vec<Vec<Expr>> {
    (0..dim)
        .map(|i| (0..dim).map(|j| Expr::constant(if i == j { 1.0 } else { 0.0 }, dim)).collect())
        .collect()
}

fn scalar_field(d: &ChartDomain, e: &Expr) -> ScalarField {
    if let Some(c) = e.as_constant() {
        return ScalarField::constant(d.clone(), c);
    }
    let e = e.clone();
    ScalarField::new(d.clone(), move |x| e.eval(x.as_slice()))
}

fn vector_field(d: &ChartDomain, v: &[Expr]) -> VectorField {
    let n = v.len();
    if let Some(c) = v.iter().map(Expr::as_constant).collect::<Option<Vec<f64>>>() {
        return OneFormField::constant(d.clone(), DVector::from_vec(c));
    }
    let v = v.to_vec();
    VectorField::new(d.clone(), move |x| {
        DVector::from_iterator(n, v.iter().map(|e| e.eval(x.as_slice())))
    })
}

fn check_symmetric(d: &ChartDomain, m: &[Vec<Expr>], key: &str) -> Result<()> {
    let n = m.len();
    for i in 0..n {
        for j in 0..i {
            if m[i][j].source() == m[j][i].source() {
                continue;
            }
            let asym = d
                .sample_grid(5)
                .iter()
                .map(|x| (m[i][j].eval(x.as_slice()) - m[j][i].eval(x.as_slice())).abs())
                .fold(0.0, f64::max);
            if asym > 1e-12 {
                return Err(Error::Config(format!(
                    "`{key}` is not symmetric: entries ({}, {}) and ({}, {}) differ",
                    i + 1,
                    j + 1,
                    j + 1,
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

fn matrix_field(d: &ChartDomain, m: &[Vec<Expr>], key: &str) -> Result<RiemannianField> {
    check_symmetric(d, m, key)?;
    let n = m.len();
    let constant: Option<Vec<f64>> = m.iter().flatten().map(Expr::as_constant).collect();
    if let Some(c) = constant {
        return Ok(RiemannianField::constant(d.clone(), DMatrix::from_row_slice(n, n, &c)));
    }
    let m = m.to_vec();
    Ok(RiemannianField::new(d.clone(), move |x| {
        DMatrix::from_fn(n, n, |i, j| m[i][j].eval(x.as_slice()))
    }))
}
