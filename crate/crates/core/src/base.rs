//! Hyperbolic base systems and their suspension flows.
//!
//! Two base maps are provided: the Arnold cat map `x ↦ [[2,1],[1,1]]x mod 1`
//! on the 2-torus and the two-sided full shift on `k` symbols.
//!
//! Cat-map points come in three exact representations:
//!
//! * lattice points `(U, V)/2⁶⁴` with wrapping `u64` arithmetic, on which the
//!   map and its inverse are exact permutations (used for generic orbits);
//! * rational points with a common denominator (periodic orbits);
//! * charted points `anchor + c_u·v_u + c_s·v_s` with a rational anchor and
//!   real coordinates along the eigendirections. The map acts on a chart by
//!   `c_u ↦ λc_u`, `c_s ↦ c_s/λ`, so points on the stable or unstable leaf of a
//!   periodic point keep full relative accuracy along their whole orbit.

use std::collections::{HashSet, VecDeque};
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expanding eigenvalue `(3+√5)/2` of the cat-map matrix.
pub fn cat_lambda() -> f64 {
    (3.0 + 5f64.sqrt()) / 2.0
}

/// Unstable eigenvector `(1, (√5−1)/2)` (not normalized).
pub fn cat_unstable_dir() -> (f64, f64) {
    (1.0, (5f64.sqrt() - 1.0) / 2.0)
}

/// Stable eigenvector `(1, −(1+√5)/2)` (not normalized).
pub fn cat_stable_dir() -> (f64, f64) {
    (1.0, -(1.0 + 5f64.sqrt()) / 2.0)
}

pub const MAX_CAT_PERIOD: u32 = 12;
pub const DEFAULT_SHIFT_DEPTH: usize = 64;

const TWO_POW_NEG_53: f64 = 1.0 / 9_007_199_254_740_992.0;

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// A rational torus point `(a/den, b/den)` in lowest terms with `0 ≤ a, b < den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RatPoint {
    pub a: i64,
    pub b: i64,
    pub den: i64,
}

impl RatPoint {
    pub fn new(a: i64, b: i64, den: i64) -> Result<Self> {
        if den <= 0 {
            return Err(Error::Precondition("denominator must be positive".into()));
        }
        let a = a.rem_euclid(den);
        let b = b.rem_euclid(den);
        let g = gcd(gcd(a, b), den).max(1);
        Ok(Self { a: a / g, b: b / g, den: den / g })
    }

    pub fn origin() -> Self {
        Self { a: 0, b: 0, den: 1 }
    }

    pub fn forward(self) -> Self {
        // Reduced form is preserved: A is unimodular.
        Self { a: (2 * self.a + self.b) % self.den, b: (self.a + self.b) % self.den, den: self.den }
    }

    pub fn backward(self) -> Self {
        Self {
            a: (self.a - self.b).rem_euclid(self.den),
            b: (2 * self.b - self.a).rem_euclid(self.den),
            den: self.den,
        }
    }

    pub fn coords(self) -> (f64, f64) {
        (self.a as f64 / self.den as f64, self.b as f64 / self.den as f64)
    }
}

/// A point written as `anchor + cu·v_u + cs·v_s (mod 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub anchor: RatPoint,
    pub cu: f64,
    pub cs: f64,
}

impl Chart {
    fn forward(self) -> Self {
        let l = cat_lambda();
        Self { anchor: self.anchor.forward(), cu: self.cu * l, cs: self.cs / l }
    }

    fn backward(self) -> Self {
        let l = cat_lambda();
        Self { anchor: self.anchor.backward(), cu: self.cu / l, cs: self.cs * l }
    }

    fn spread(&self) -> f64 {
        self.cu.abs() + self.cs.abs()
    }

    fn coords(&self) -> (f64, f64) {
        let (a0, b0) = self.anchor.coords();
        let (u1, u2) = cat_unstable_dir();
        let (s1, s2) = cat_stable_dir();
        let u = a0 + self.cu * u1 + self.cs * s1;
        let v = b0 + self.cu * u2 + self.cs * s2;
        (wrap01(u), wrap01(v))
    }
}

fn wrap01(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TorusPoint {
    Lattice { u: u64, v: u64 },
    /// Every chart describes the same point; the one with the smallest
    /// coordinates is used for evaluation.
    Charted(Vec<Chart>),
}

impl TorusPoint {
    pub fn rational(p: RatPoint) -> Self {
        TorusPoint::Charted(vec![Chart { anchor: p, cu: 0.0, cs: 0.0 }])
    }

    /// Nearest lattice point to `(u, v)` reduced mod 1.
    pub fn from_coords(u: f64, v: f64) -> Self {
        let to = |x: f64| -> u64 {
            let w = wrap01(x);
            (w * 18_446_744_073_709_551_616.0) as u64
        };
        TorusPoint::Lattice { u: to(u), v: to(v) }
    }

    pub fn coords(&self) -> (f64, f64) {
        match self {
            TorusPoint::Lattice { u, v } => {
                ((u >> 11) as f64 * TWO_POW_NEG_53, (v >> 11) as f64 * TWO_POW_NEG_53)
            }
            TorusPoint::Charted(charts) => charts
                .iter()
                .min_by(|a, b| a.spread().total_cmp(&b.spread()))
                .expect("at least one chart")
                .coords(),
        }
    }

    /// The rational point this is, if it is exactly rational.
    pub fn as_rational(&self) -> Option<RatPoint> {
        match self {
            TorusPoint::Charted(charts) => {
                charts.iter().find(|c| c.cu == 0.0 && c.cs == 0.0).map(|c| c.anchor)
            }
            TorusPoint::Lattice { .. } => None,
        }
    }

    fn forward(&self) -> Self {
        match self {
            TorusPoint::Lattice { u, v } => TorusPoint::Lattice {
                u: u.wrapping_mul(2).wrapping_add(*v),
                v: u.wrapping_add(*v),
            },
            TorusPoint::Charted(c) => TorusPoint::Charted(c.iter().map(|c| c.forward()).collect()),
        }
    }

    fn backward(&self) -> Self {
        match self {
            TorusPoint::Lattice { u, v } => TorusPoint::Lattice {
                u: u.wrapping_sub(*v),
                v: v.wrapping_mul(2).wrapping_sub(*u),
            },
            TorusPoint::Charted(c) => TorusPoint::Charted(c.iter().map(|c| c.backward()).collect()),
        }
    }
}

/// Euclidean distance on the flat torus ℝ²/ℤ².
pub fn torus_distance(p: (f64, f64), q: (f64, f64)) -> f64 {
    let w = |d: f64| {
        let r = d.rem_euclid(1.0);
        r.min(1.0 - r)
    };
    w(p.0 - q.0).hypot(w(p.1 - q.1))
}

/// A finite window of a bi-infinite symbol sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPoint {
    symbols: Arc<Vec<u8>>,
    /// Position in `symbols` of the current coordinate 0.
    origin: usize,
}

impl ShiftPoint {
    /// `symbols[origin]` is coordinate 0.
    pub fn new(symbols: Vec<u8>, origin: usize) -> Result<Self> {
        if origin >= symbols.len() {
            return Err(Error::Precondition("origin outside the symbol window".into()));
        }
        Ok(Self { symbols: Arc::new(symbols), origin })
    }

    /// Constant sequence with `depth` known symbols on each side.
    pub fn constant(symbol: u8, depth: usize) -> Self {
        Self { symbols: Arc::new(vec![symbol; 2 * depth + 1]), origin: depth }
    }

    /// Symbol at coordinate `n`, if inside the window.
    pub fn symbol(&self, n: i64) -> Option<u8> {
        let idx = self.origin as i64 + n;
        if idx < 0 || idx >= self.symbols.len() as i64 {
            None
        } else {
            Some(self.symbols[idx as usize])
        }
    }

    pub fn known_past(&self) -> usize {
        self.origin
    }

    pub fn known_future(&self) -> usize {
        self.symbols.len() - 1 - self.origin
    }

    fn shifted(&self, n: i64) -> Result<Self> {
        let new_origin = self.origin as i64 + n;
        if new_origin < 0 || new_origin >= self.symbols.len() as i64 {
            return Err(Error::Truncation(format!(
                "shift by {n} leaves the window (past {}, future {})",
                self.known_past(),
                self.known_future()
            )));
        }
        Ok(Self { symbols: Arc::clone(&self.symbols), origin: new_origin as usize })
    }

    /// Embedding into the unit square: `u = Σ_{i≥0} x_i k^{-(i+1)}`,
    /// `v = Σ_{i≥1} x_{-i} k^{-i}`.
    pub fn coords(&self, k: u8) -> (f64, f64) {
        let kf = k as f64;
        let mut u = 0.0;
        let mut w = 1.0 / kf;
        let mut i = 0i64;
        while w > 1e-18 {
            match self.symbol(i) {
                Some(s) => u += s as f64 * w,
                None => break,
            }
            w /= kf;
            i += 1;
        }
        let mut v = 0.0;
        let mut w = 1.0 / kf;
        let mut i = 1i64;
        while w > 1e-18 {
            match self.symbol(-i) {
                Some(s) => v += s as f64 * w,
                None => break,
            }
            w /= kf;
            i += 1;
        }
        (u, v)
    }
}

/// `2^{−min{|n| : x_n ≠ y_n}}` over the jointly known window; sequences that
/// agree on the whole window get the bound `2^{−(r+1)}`.
pub fn shift_distance(x: &ShiftPoint, y: &ShiftPoint) -> f64 {
    let r = x.known_past().min(x.known_future()).min(y.known_past()).min(y.known_future()) as i64;
    for n in 0..=r {
        if x.symbol(n) != y.symbol(n) || x.symbol(-n) != y.symbol(-n) {
            return 2f64.powi(-(n as i32));
        }
    }
    2f64.powi(-(r as i32 + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasePoint {
    Torus(TorusPoint),
    Shift(ShiftPoint),
}

impl BasePoint {
    pub fn torus(u: f64, v: f64) -> Self {
        BasePoint::Torus(TorusPoint::from_coords(u, v))
    }

    pub fn rational(p: RatPoint) -> Self {
        BasePoint::Torus(TorusPoint::rational(p))
    }

    pub fn as_rational(&self) -> Option<RatPoint> {
        match self {
            BasePoint::Torus(t) => t.as_rational(),
            BasePoint::Shift(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseSystem {
    CatMap,
    FullShift { symbols: u8, depth: usize },
}

impl BaseSystem {
    pub fn full_shift(symbols: u8) -> Self {
        BaseSystem::FullShift { symbols, depth: DEFAULT_SHIFT_DEPTH }
    }

    fn mismatch(&self) -> Error {
        Error::Precondition(format!("point does not belong to {self:?}"))
    }

    /// `f^n(x)`.
    pub fn apply(&self, x: &BasePoint, n: i64) -> Result<BasePoint> {
        match (self, x) {
            (BaseSystem::CatMap, BasePoint::Torus(t)) => {
                let mut p = t.clone();
                if n >= 0 {
                    for _ in 0..n {
                        p = p.forward();
                    }
                } else {
                    for _ in 0..(-n) {
                        p = p.backward();
                    }
                }
                Ok(BasePoint::Torus(p))
            }
            (BaseSystem::FullShift { .. }, BasePoint::Shift(s)) => Ok(BasePoint::Shift(s.shifted(n)?)),
            _ => Err(self.mismatch()),
        }
    }

    pub fn coords(&self, x: &BasePoint) -> (f64, f64) {
        match (self, x) {
            (BaseSystem::FullShift { symbols, .. }, BasePoint::Shift(s)) => s.coords(*symbols),
            (_, BasePoint::Torus(t)) => t.coords(),
            (_, BasePoint::Shift(s)) => s.coords(2),
        }
    }

    pub fn distance(&self, x: &BasePoint, y: &BasePoint) -> f64 {
        match (x, y) {
            (BasePoint::Torus(a), BasePoint::Torus(b)) => torus_distance(a.coords(), b.coords()),
            (BasePoint::Shift(a), BasePoint::Shift(b)) => shift_distance(a, b),
            _ => f64::INFINITY,
        }
    }

    /// Sample from the invariant measure (Lebesgue for the cat map, uniform
    /// Bernoulli for the shift). Shift points get `forward_margin` extra
    /// future symbols so that orbits of that length stay inside the window.
    pub fn sample_point<R: RngCore>(&self, rng: &mut R, forward_margin: usize) -> BasePoint {
        match self {
            BaseSystem::CatMap => BasePoint::Torus(TorusPoint::Lattice { u: rng.next_u64(), v: rng.next_u64() }),
            BaseSystem::FullShift { symbols, depth } => {
                let len = 2 * depth + 1 + forward_margin;
                let s: Vec<u8> = (0..len).map(|_| rng.random_range(0..*symbols)).collect();
                BasePoint::Shift(ShiftPoint::new(s, *depth).expect("origin inside window"))
            }
        }
    }

    /// A point at distance about `eps` from `x` (same leaf structure not implied).
    pub fn nearby_point<R: RngCore>(&self, x: &BasePoint, eps: f64, rng: &mut R) -> BasePoint {
        match x {
            BasePoint::Torus(t) => {
                let (u, v) = t.coords();
                let ang: f64 = rng.random_range(0.0..2.0 * PI);
                BasePoint::torus(u + eps * ang.cos(), v + eps * ang.sin())
            }
            BasePoint::Shift(s) => {
                let k = match self {
                    BaseSystem::FullShift { symbols, .. } => *symbols,
                    _ => 2,
                };
                let n = (-eps.log2()).ceil().max(1.0) as i64;
                let mut sym = (*s.symbols).clone();
                let idx = (s.origin as i64 + n) as usize;
                if idx < sym.len() {
                    sym[idx] = (sym[idx] + 1) % k;
                }
                BasePoint::Shift(ShiftPoint::new(sym, s.origin).expect("same origin"))
            }
        }
    }
}

/// Roof function of the suspension flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RoofFunction {
    Constant(f64),
    /// `ϱ(u, v) = c0 + a·cos(2πu)`.
    CosineBump { c0: f64, a: f64 },
}

impl RoofFunction {
    pub fn constant(c: f64) -> Result<Self> {
        let r = RoofFunction::Constant(c);
        r.validate()?;
        Ok(r)
    }

    pub fn cosine_bump(c0: f64, a: f64) -> Result<Self> {
        let r = RoofFunction::CosineBump { c0, a };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RoofFunction::Constant(c) => c.is_finite() && c >= 1.0,
            RoofFunction::CosineBump { c0, a } => c0.is_finite() && a.is_finite() && c0 - a.abs() >= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("roof {self:?} must be bounded below by 1")))
        }
    }

    pub fn eval_coords(&self, (u, _v): (f64, f64)) -> f64 {
        match *self {
            RoofFunction::Constant(c) => c,
            RoofFunction::CosineBump { c0, a } => c0 + a * (2.0 * PI * u).cos(),
        }
    }

    pub fn eval(&self, sys: &BaseSystem, x: &BasePoint) -> f64 {
        match self {
            RoofFunction::Constant(c) => *c,
            _ => self.eval_coords(sys.coords(x)),
        }
    }

    pub fn min(&self) -> f64 {
        match *self {
            RoofFunction::Constant(c) => c,
            RoofFunction::CosineBump { c0, a } => c0 - a.abs(),
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            RoofFunction::Constant(c) => c,
            RoofFunction::CosineBump { c0, a } => c0 + a.abs(),
        }
    }

    /// Lipschitz constant in the `u` coordinate.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            RoofFunction::Constant(_) => 0.0,
            RoofFunction::CosineBump { a, .. } => 2.0 * PI * a.abs(),
        }
    }

    /// Exact integral against Lebesgue measure (uniform `u`).
    pub fn lebesgue_mean(&self) -> f64 {
        match *self {
            RoofFunction::Constant(c) => c,
            RoofFunction::CosineBump { c0, .. } => c0,
        }
    }
}

/// Birkhoff sum `ϱ⁽ⁿ⁾(x) = Σ_{0≤j<n} ϱ(f^j x)`.
pub fn roof_sum(roof: &RoofFunction, sys: &BaseSystem, x: &BasePoint, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition("roof_sum needs n >= 1".into()));
    }
    let mut p = x.clone();
    let mut total = 0.0;
    for j in 0..n {
        if j > 0 {
            p = sys.apply(&p, 1)?;
        }
        total += roof.eval(sys, &p);
    }
    Ok(total)
}

/// Monte-Carlo estimate of `∫ϱ dμ` and its standard error.
pub fn roof_integral<R: RngCore>(
    roof: &RoofFunction,
    sys: &BaseSystem,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    if let RoofFunction::Constant(c) = roof {
        return Ok((*c, 0.0));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let x = sys.sample_point(rng, 0);
        let r = roof.eval(sys, &x);
        sum += r;
        sum_sq += r * r;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 { (sum_sq - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}

/// A point `(x, s)` of the suspension space with `0 ≤ s < ϱ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspensionPoint {
    pub base: BasePoint,
    pub height: f64,
}

impl SuspensionPoint {
    pub fn on_section(base: BasePoint) -> Self {
        Self { base, height: 0.0 }
    }

    /// Applies the identification `(x, ϱ(x)) ∼ (f(x), 0)`.
    pub fn new(sys: &BaseSystem, roof: &RoofFunction, base: BasePoint, height: f64) -> Result<Self> {
        suspend_flow(sys, roof, &Self { base, height: 0.0 }, height)
    }
}

/// The suspension flow `X^t(x, s) = (x, s + t)` modulo the roof identification.
pub fn suspend_flow(
    sys: &BaseSystem,
    roof: &RoofFunction,
    pt: &SuspensionPoint,
    t: f64,
) -> Result<SuspensionPoint> {
    if !t.is_finite() {
        return Err(Error::Precondition("flow time must be finite".into()));
    }
    let mut x = pt.base.clone();
    let mut s = pt.height + t;
    let mut r = roof.eval(sys, &x);
    while s >= r {
        s -= r;
        x = sys.apply(&x, 1)?;
        r = roof.eval(sys, &x);
    }
    while s < 0.0 {
        x = sys.apply(&x, -1)?;
        s += roof.eval(sys, &x);
    }
    Ok(SuspensionPoint { base: x, height: s })
}

/// A periodic base orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub point: RatPoint,
    /// Minimal period under the base map.
    pub period: u32,
}

impl PeriodicOrbit {
    pub fn base_point(&self) -> BasePoint {
        BasePoint::rational(self.point)
    }

    /// Return time `ϱ⁽π⁾(p)` of the flow.
    pub fn flow_period(&self, roof: &RoofFunction) -> f64 {
        roof_sum(roof, &BaseSystem::CatMap, &self.base_point(), self.period as u64)
            .expect("cat-map orbits never truncate")
    }

    pub fn orbit(&self) -> Vec<RatPoint> {
        let mut out = Vec::with_capacity(self.period as usize);
        let mut p = self.point;
        for _ in 0..self.period {
            out.push(p);
            p = p.forward();
        }
        out
    }

    pub fn same_orbit(&self, other: &PeriodicOrbit) -> bool {
        self.orbit().contains(&other.point)
    }
}

fn mat2_pow(n: u32) -> [[i64; 2]; 2] {
    let mut m = [[1i64, 0], [0, 1]];
    for _ in 0..n {
        m = [[2 * m[0][0] + m[1][0], 2 * m[0][1] + m[1][1]], [m[0][0] + m[1][0], m[0][1] + m[1][1]]];
    }
    m
}

/// `trace(A^π) − 2` for `A = [[2,1],[1,1]]`.
pub fn catmap_fixed_point_count(period: u32) -> i64 {
    let m = mat2_pow(period);
    m[0][0] + m[1][1] - 2
}

/// All rational fixed points of `f^π`, each tagged with its minimal period,
/// sorted lexicographically.
pub fn periodic_points_catmap(period: u32) -> Result<Vec<PeriodicOrbit>> {
    if period == 0 {
        return Err(Error::Precondition("period must be positive".into()));
    }
    if period > MAX_CAT_PERIOD {
        return Err(Error::PeriodTooLarge { requested: period, max: MAX_CAT_PERIOD });
    }
    let a = mat2_pow(period);
    // M = A^π − I; fixed points are M⁻¹ℤ² mod ℤ², a group of order |det M|.
    let m = [[a[0][0] - 1, a[0][1]], [a[1][0], a[1][1] - 1]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let d = det.abs();
    let sign = det.signum();
    // adj(M) columns scaled by sign give generators with denominator d.
    let g1 = ((sign * m[1][1]).rem_euclid(d), (sign * -m[1][0]).rem_euclid(d));
    let g2 = ((sign * -m[0][1]).rem_euclid(d), (sign * m[0][0]).rem_euclid(d));
    let mut seen: HashSet<(i64, i64)> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert((0, 0));
    queue.push_back((0i64, 0i64));
    while let Some((x, y)) = queue.pop_front() {
        for g in [g1, g2] {
            let nxt = ((x + g.0) % d, (y + g.1) % d);
            if seen.insert(nxt) {
                queue.push_back(nxt);
            }
        }
    }
    let mut pts: Vec<RatPoint> =
        seen.into_iter().map(|(x, y)| RatPoint::new(x, y, d)).collect::<Result<_>>()?;
    pts.sort();
    let mut out = Vec::with_capacity(pts.len());
    for p in pts {
        let mut q = p.forward();
        let mut minimal = 1;
        while q != p {
            q = q.forward();
            minimal += 1;
        }
        debug_assert!(period % minimal == 0);
        out.push(PeriodicOrbit { point: p, period: minimal });
    }
    Ok(out)
}

/// A transverse intersection of `W^u(p)` and `W^s(q)` with both charts kept.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroclinicPoint {
    pub point: BasePoint,
    /// Backward-asymptotic orbit.
    pub from: PeriodicOrbit,
    /// Forward-asymptotic orbit.
    pub to: PeriodicOrbit,
    /// `z = from + s_unstable·v_u (mod 1)`.
    pub s_unstable: f64,
    /// `z = to + t_stable·v_s (mod 1)`.
    pub t_stable: f64,
}

/// Finds `z ∈ W^u(p) ∩ W^s(q)` closest to both points in eigen-coordinates,
/// by solving `p + s·v_u = q + t·v_s + k` over a window of integer shifts `k`.
pub fn heteroclinic_point_catmap(p: &PeriodicOrbit, q: &PeriodicOrbit) -> Result<HeteroclinicPoint> {
    let (u1, u2) = cat_unstable_dir();
    let (s1, s2) = cat_stable_dir();
    let (pa, pb) = p.point.coords();
    let (qa, qb) = q.point.coords();
    // [u1 −s1; u2 −s2][s; t] = d
    let det = -u1 * s2 + s1 * u2;
    let mut best: Option<(f64, f64, f64)> = None;
    for k1 in -3i64..=3 {
        for k2 in -3i64..=3 {
            let d1 = qa - pa + k1 as f64;
            let d2 = qb - pb + k2 as f64;
            let s = (-s2 * d1 + s1 * d2) / det;
            let t = (u1 * d2 - u2 * d1) / det;
            let cost = s.abs() + t.abs();
            if cost < 1e-9 {
                continue;
            }
            if best.is_none_or(|b| cost < b.0) {
                best = Some((cost, s, t));
            }
        }
    }
    let (_, s, t) = best.ok_or_else(|| Error::SearchFailure("no lattice shift produced an intersection".into()))?;
    let z = BasePoint::Torus(TorusPoint::Charted(vec![
        Chart { anchor: p.point, cu: s, cs: 0.0 },
        Chart { anchor: q.point, cu: 0.0, cs: t },
    ]));
    let hz = HeteroclinicPoint { point: z, from: p.clone(), to: q.clone(), s_unstable: s, t_stable: t };
    // Both charts must describe the same point.
    let c1 = Chart { anchor: p.point, cu: s, cs: 0.0 }.coords();
    let c2 = Chart { anchor: q.point, cu: 0.0, cs: t }.coords();
    if torus_distance(c1, c2) > 1e-12 {
        return Err(Error::SearchFailure(format!("chart mismatch {:.3e}", torus_distance(c1, c2))));
    }
    let sys = BaseSystem::CatMap;
    let (fwd, bwd) = hz.convergence_profile(&sys, 30)?;
    let l = cat_lambda();
    let scale = (s.abs() + t.abs()) * 2.0 + 1e-15;
    for n in 0..=30 {
        let bound = scale * l.powi(-(n as i32)) + 1e-12;
        if fwd[n] > bound || bwd[n] > bound {
            return Err(Error::SearchFailure(format!(
                "orbit of z does not converge at n={n}: fwd {:.3e}, bwd {:.3e}",
                fwd[n], bwd[n]
            )));
        }
    }
    Ok(hz)
}

impl HeteroclinicPoint {
    /// `d(f^n z, f^n q)` and `d(f^{-n} z, f^{-n} p)` for `n = 0..=n_max`.
    pub fn convergence_profile(&self, sys: &BaseSystem, n_max: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut fwd = Vec::with_capacity(n_max + 1);
        let mut bwd = Vec::with_capacity(n_max + 1);
        let mut zf = self.point.clone();
        let mut zb = self.point.clone();
        let mut q = self.to.base_point();
        let mut p = self.from.base_point();
        for n in 0..=n_max {
            if n > 0 {
                zf = sys.apply(&zf, 1)?;
                zb = sys.apply(&zb, -1)?;
                q = sys.apply(&q, 1)?;
                p = sys.apply(&p, -1)?;
            }
            fwd.push(sys.distance(&zf, &q));
            bwd.push(sys.distance(&zb, &p));
        }
        Ok((fwd, bwd))
    }
}

/// Point `p + t·v_s` on the stable leaf of a rational point.
pub fn stable_leaf_point(p: RatPoint, t: f64) -> BasePoint {
    BasePoint::Torus(TorusPoint::Charted(vec![Chart { anchor: p, cu: 0.0, cs: t }]))
}

/// Point `p + s·v_u` on the unstable leaf of a rational point.
pub fn unstable_leaf_point(p: RatPoint, s: f64) -> BasePoint {
    BasePoint::Torus(TorusPoint::Charted(vec![Chart { anchor: p, cu: s, cs: 0.0 }]))
}
