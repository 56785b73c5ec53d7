//! Generator fields over the suspension space and integration of the linear
//! variational equation `u' = H(X^t x)·u`.
//!
//! Integration uses the Cayley transform of the midpoint generator,
//! `Φ ← (I − (h/2)H_mid)⁻¹(I + (h/2)H_mid)·Φ`, which maps 𝔰𝔭(2ℓ) into
//! Sp(2ℓ). Each lap `[0, ϱ(x))` of the suspension is split into equal steps,
//! so the induced cocycle `Ψ(x) = Φ^{ϱ(x)}(x)` and a flow integration across
//! the same laps execute identical arithmetic.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::base::{suspend_flow, BasePoint, BaseSystem, RoofFunction, SuspensionPoint};
use crate::error::{Error, Result};
use crate::symplectic::{
    make_standard_form, op_norm, symplectic_defect, symplectic_inverse, HamGenerator, Mat, SympMatrix,
};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Base system together with its roof function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suspension {
    pub sys: BaseSystem,
    pub roof: RoofFunction,
}

impl Suspension {
    pub fn new(sys: BaseSystem, roof: RoofFunction) -> Result<Self> {
        roof.validate()?;
        Ok(Self { sys, roof })
    }

    pub fn flow(&self, pt: &SuspensionPoint, t: f64) -> Result<SuspensionPoint> {
        suspend_flow(&self.sys, &self.roof, pt, t)
    }

    pub fn roof_at(&self, x: &BasePoint) -> f64 {
        self.roof.eval(&self.sys, x)
    }

    /// Growth factor of base distances per iterate of the base map.
    pub fn base_expansion(&self) -> f64 {
        match self.sys {
            BaseSystem::CatMap => crate::base::cat_lambda(),
            BaseSystem::FullShift { .. } => 2.0,
        }
    }

    /// Factor converting the base metric into Euclidean distance of the
    /// `(u, v)` coordinates in which fields are written.
    fn coord_metric_factor(&self) -> f64 {
        match self.sys {
            BaseSystem::CatMap => 1.0,
            BaseSystem::FullShift { .. } => 2f64.sqrt(),
        }
    }
}

/// One Fourier mode of a coefficient function:
/// `amp · cos(2π(k₁u + k₂v) + phase) · w_m(s/ϱ(x))` with
/// `w_0 ≡ 1` and `w_m(σ) = (1 − cos 2πmσ)/2` for `m ≥ 1`.
///
/// Height profiles with `m ≥ 1` vanish on the section, so the field is
/// continuous across the identification `(x, ϱ(x)) ∼ (f(x), 0)`. Base
/// dependence therefore requires `m ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amp: f64,
    pub k: (i32, i32),
    pub phase: f64,
    pub m: u32,
}

impl TrigTerm {
    pub fn constant(c: f64) -> Self {
        Self { amp: c, k: (0, 0), phase: 0.0, m: 0 }
    }

    fn base_factor(&self, (u, v): (f64, f64)) -> f64 {
        self.amp * (2.0 * PI * (self.k.0 as f64 * u + self.k.1 as f64 * v) + self.phase).cos()
    }

    fn sup(&self) -> f64 {
        self.amp.abs()
    }

    fn lipschitz(&self, roof: &RoofFunction, coord_factor: f64) -> f64 {
        let kn = (self.k.0 as f64).hypot(self.k.1 as f64);
        let height = PI * self.m as f64 * (1.0 + roof.lipschitz()) / roof.min();
        self.amp.abs() * (2.0 * PI * kn * coord_factor + height)
    }
}

/// Flowbox support of a perturbation `P = Φ^τ(z)·α(d(z,c))·G·Φ^τ(z)⁻¹`,
/// where `τ = s − s0` and `Φ` is the fundamental solution of the smooth
/// part of the field. The support is the cylinder `B(c, ρ) × [s0, s0 + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowboxPatch {
    pub center: BasePoint,
    pub s0: f64,
    pub rho: f64,
    pub generator: Mat,
    /// Upper bound for `‖P‖_F` measured at build time.
    pub sup_bound: f64,
    /// Lipschitz estimate of `P` measured at build time.
    pub lipschitz_bound: f64,
}

pub const PATCH_DURATION: f64 = 1.0;

/// `α(s) = 1` on `[0, ρ/2]`, `exp(1 − 1/(1 − ((2s−ρ)/ρ)²))` on `(ρ/2, ρ)`, `0` beyond.
pub fn bump(s: f64, rho: f64) -> f64 {
    if s <= rho / 2.0 {
        1.0
    } else if s >= rho {
        0.0
    } else {
        let y = (2.0 * s - rho) / rho;
        (1.0 - 1.0 / (1.0 - y * y)).exp()
    }
}

impl FlowboxPatch {
    fn alpha(&self, susp: &Suspension, x: &BasePoint) -> f64 {
        let d = susp.sys.distance(x, &self.center);
        if d >= self.rho {
            0.0
        } else {
            bump(d, self.rho)
        }
    }

    fn band(&self) -> (f64, f64) {
        (self.s0, self.s0 + PATCH_DURATION)
    }
}

/// A Hamiltonian generator field `H : M → 𝔰𝔭(2ℓ, ℝ)`.
///
/// Values are `J·Sym(x, s)` where `Sym` is symmetric with entries given by
/// trigonometric coefficient functions, so every value lies in the algebra
/// exactly. The basis is `{J·E_ij}` with `E_ii = e_ieᵢᵀ` and
/// `E_ij = e_ieⱼᵀ + e_jeᵢᵀ` for `i < j`, dimension `ℓ(2ℓ+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorField {
    ell: usize,
    /// Coefficient of basis element `(i, j)`, `i ≤ j`, row-major over the upper triangle.
    coeffs: Vec<Vec<TrigTerm>>,
    patches: Vec<FlowboxPatch>,
    max_m: u32,
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    i * n - i * (i + 1) / 2 + j
}

impl GeneratorField {
    pub fn zero(ell: usize) -> Self {
        let n = 2 * ell;
        Self { ell, coeffs: vec![Vec::new(); n * (n + 1) / 2], patches: Vec::new(), max_m: 0 }
    }

    /// Builds a field from coefficient lists in basis order.
    pub fn from_terms(ell: usize, coeffs: Vec<Vec<TrigTerm>>) -> Result<Self> {
        let n = 2 * ell;
        if ell == 0 || coeffs.len() != n * (n + 1) / 2 {
            return Err(Error::InvalidDimension(format!(
                "expected {} coefficient lists for ell={ell}",
                n * (n + 1) / 2
            )));
        }
        for t in coeffs.iter().flatten() {
            if t.m == 0 && t.k != (0, 0) {
                return Err(Error::Precondition(
                    "base-dependent terms need a height profile with m >= 1".into(),
                ));
            }
            if !t.amp.is_finite() || !t.phase.is_finite() {
                return Err(Error::Precondition("non-finite term".into()));
            }
        }
        let max_m = coeffs.iter().flatten().map(|t| t.m).max().unwrap_or(0);
        Ok(Self { ell, coeffs, patches: Vec::new(), max_m })
    }

    /// Constant field `H ≡ h`.
    pub fn constant(h: &HamGenerator) -> Self {
        let ell = h.ell();
        let n = 2 * ell;
        let form = make_standard_form(ell).expect("ell >= 1");
        // Sym = J⁻¹H = −JH.
        let sym = -(form.matrix() * h.matrix());
        let mut f = Self::zero(ell);
        for i in 0..n {
            for j in i..n {
                let c = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                if c != 0.0 {
                    f.coeffs[upper_index(n, i, j)].push(TrigTerm::constant(c));
                }
            }
        }
        f
    }

    /// Rotation family `Σ_i a_i(x, s)·J_i`, with `J_i` the generator of
    /// rotations in the canonical plane `(e_i, e_{i+ℓ})`. Values in distinct
    /// planes commute, so every fundamental solution is orthogonal.
    pub fn rotation(ell: usize, plane_coeffs: Vec<Vec<TrigTerm>>) -> Result<Self> {
        if plane_coeffs.len() != ell {
            return Err(Error::InvalidDimension(format!("need {ell} plane coefficients")));
        }
        let n = 2 * ell;
        let mut coeffs = vec![Vec::new(); n * (n + 1) / 2];
        for (i, terms) in plane_coeffs.into_iter().enumerate() {
            coeffs[upper_index(n, i, i)] = terms.clone();
            coeffs[upper_index(n, i + ell, i + ell)] = terms;
        }
        Self::from_terms(ell, coeffs)
    }

    /// Seeded random field: a random constant part plus `modes` trigonometric
    /// modes per coefficient, normalized so that `sup_bound() == scale`.
    pub fn random(ell: usize, seed: u64, scale: f64, modes: usize) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Precondition("scale must be positive".into()));
        }
        let n = 2 * ell;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = Vec::with_capacity(n * (n + 1) / 2);
        for _ in 0..n * (n + 1) / 2 {
            let mut terms = vec![TrigTerm::constant(StandardNormal.sample(&mut rng))];
            for _ in 0..modes {
                let amp: f64 = StandardNormal.sample(&mut rng);
                terms.push(TrigTerm {
                    amp: 0.5 * amp,
                    k: (rng.random_range(-2..=2), rng.random_range(-2..=2)),
                    phase: rng.random_range(0.0..2.0 * PI),
                    m: rng.random_range(1..=2),
                });
            }
            coeffs.push(terms);
        }
        let mut f = Self::from_terms(ell, coeffs)?;
        let s = f.sup_bound();
        f = f.scaled(scale / s);
        Ok(f)
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn dim(&self) -> usize {
        2 * self.ell
    }

    pub fn coefficients(&self) -> &[Vec<TrigTerm>] {
        &self.coeffs
    }

    pub fn patches(&self) -> &[FlowboxPatch] {
        &self.patches
    }

    pub fn is_zero(&self) -> bool {
        self.patches.is_empty() && self.coeffs.iter().flatten().all(|t| t.amp == 0.0)
    }

    /// The smooth part of the field (all flowbox patches removed).
    pub fn smooth_part(&self) -> Self {
        Self { patches: Vec::new(), ..self.clone() }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .map(|ts| ts.iter().map(|t| TrigTerm { amp: t.amp * c, ..*t }).collect())
            .collect();
        Self { ell: self.ell, coeffs, patches: Vec::new(), max_m: self.max_m }
    }

    pub(crate) fn with_patch(&self, patch: FlowboxPatch) -> Self {
        let mut f = self.clone();
        f.patches.push(patch);
        f
    }

    fn basis_norm(i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            2f64.sqrt()
        }
    }

    fn smooth_sup(&self) -> f64 {
        let n = self.dim();
        let mut total = 0.0;
        for i in 0..n {
            for j in i..n {
                let c: f64 = self.coeffs[upper_index(n, i, j)].iter().map(TrigTerm::sup).sum();
                total += c * Self::basis_norm(i, j);
            }
        }
        total
    }

    /// Upper bound for `sup ‖H‖_F`.
    pub fn sup_bound(&self) -> f64 {
        self.smooth_sup() + self.patches.iter().map(|p| p.sup_bound).sum::<f64>()
    }

    /// Upper bound for the Lipschitz constant of `H` in the metric
    /// `d((x,s),(y,r)) = d(x,y) + |s − r|` on points of one lap.
    pub fn lipschitz_bound(&self, susp: &Suspension) -> f64 {
        let n = self.dim();
        let cf = susp.coord_metric_factor();
        let mut total = 0.0;
        for i in 0..n {
            for j in i..n {
                let c: f64 =
                    self.coeffs[upper_index(n, i, j)].iter().map(|t| t.lipschitz(&susp.roof, cf)).sum();
                total += c * Self::basis_norm(i, j);
            }
        }
        total + self.patches.iter().map(|p| p.lipschitz_bound).sum::<f64>()
    }

    /// Smooth part evaluated at base coordinates and normalized height.
    fn smooth_matrix(&self, coords: (f64, f64), sigma: f64) -> Mat {
        let lap = LapCoeffs::new(self, coords);
        let mut out = Mat::zeros(self.dim(), self.dim());
        let mut w = vec![0.0; self.max_m as usize + 1];
        lap.eval_into(sigma, &mut w, &mut out);
        out
    }
}

/// Per-lap coefficients `A[entry][m]` with the base dependence folded in.
struct LapCoeffs {
    n: usize,
    ell: usize,
    max_m: usize,
    /// Indexed `entry * (max_m + 1) + m`.
    a: Vec<f64>,
}

impl LapCoeffs {
    fn new(field: &GeneratorField, coords: (f64, f64)) -> Self {
        let n = field.dim();
        let max_m = field.max_m as usize;
        let entries = n * (n + 1) / 2;
        let mut a = vec![0.0; entries * (max_m + 1)];
        for (e, terms) in field.coeffs.iter().enumerate() {
            for t in terms {
                a[e * (max_m + 1) + t.m as usize] += t.base_factor(coords);
            }
        }
        Self { n, ell: field.ell, max_m, a }
    }

    /// Writes `H = J·Sym(σ)` into `out`.
    fn eval_into(&self, sigma: f64, w: &mut [f64], out: &mut Mat) {
        w[0] = 1.0;
        if self.max_m >= 1 {
            let c1 = (2.0 * PI * sigma).cos();
            // cos(2πmσ) by the Chebyshev recurrence.
            let (mut prev, mut cur) = (1.0, c1);
            w[1] = 0.5 * (1.0 - c1);
            for m in 2..=self.max_m {
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
                w[m] = 0.5 * (1.0 - cur);
            }
        }
        let n = self.n;
        let ell = self.ell;
        let stride = self.max_m + 1;
        let mut e = 0;
        for i in 0..n {
            for j in i..n {
                let coef = &self.a[e * stride..(e + 1) * stride];
                let mut c = 0.0;
                for (cm, wm) in coef.iter().zip(w.iter()) {
                    c += cm * wm;
                }
                // (J·Sym)_{r,c} = −Sym_{r+ℓ,c} for r < ℓ, Sym_{r−ℓ,c} for r ≥ ℓ.
                let ri = if i < ell { (i + ell, 1.0) } else { (i - ell, -1.0) };
                out[(ri.0, j)] = ri.1 * c;
                if i != j {
                    let rj = if j < ell { (j + ell, 1.0) } else { (j - ell, -1.0) };
                    out[(rj.0, i)] = rj.1 * c;
                }
                e += 1;
            }
        }
    }
}

/// Reusable scratch buffers for Cayley steps.
struct Workspace {
    n: usize,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    h: Mat,
    h2: Mat,
    w: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, max_m: usize) -> Self {
        Self {
            n,
            lhs: vec![0.0; n * n],
            rhs: vec![0.0; n * n],
            h: Mat::zeros(n, n),
            h2: Mat::zeros(n, n),
            w: vec![0.0; max_m + 1],
        }
    }
}

/// `y ← (I − aH)⁻¹(I + aH)·y` with `a = step/2`, by Gaussian elimination with
/// partial pivoting. `y` is `n × k`.
fn cayley_apply(h: &Mat, a: f64, y: &mut Mat, lhs: &mut [f64], rhs: &mut [f64]) -> Result<()> {
    let n = h.nrows();
    let k = y.ncols();
    // Row-major scratch.
    for i in 0..n {
        for j in 0..n {
            lhs[i * n + j] = if i == j { 1.0 } else { 0.0 } - a * h[(i, j)];
        }
    }
    for i in 0..n {
        for c in 0..k {
            let mut s = y[(i, c)];
            for j in 0..n {
                s += a * h[(i, j)] * y[(j, c)];
            }
            rhs[i * k + c] = s;
        }
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = lhs[col * n + col].abs();
        for r in col + 1..n {
            let v = lhs[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-14 {
            return Err(Error::StepTooLarge { product: 2.0 * a * op_norm(h), limit: 2.0 });
        }
        if piv != col {
            for j in 0..n {
                lhs.swap(col * n + j, piv * n + j);
            }
            for c in 0..k {
                rhs.swap(col * k + c, piv * k + c);
            }
        }
        let d = lhs[col * n + col];
        for r in col + 1..n {
            let f = lhs[r * n + col] / d;
            if f != 0.0 {
                for j in col..n {
                    lhs[r * n + j] -= f * lhs[col * n + j];
                }
                for c in 0..k {
                    rhs[r * k + c] -= f * rhs[col * k + c];
                }
            }
        }
    }
    for c in 0..k {
        for i in (0..n).rev() {
            let mut s = rhs[i * k + c];
            for j in i + 1..n {
                s -= lhs[i * n + j] * y[(j, c)];
            }
            y[(i, c)] = s / lhs[i * n + i];
        }
    }
    Ok(())
}

/// Cayley integrator for one field on one suspension with fixed maximal step.
pub struct Integrator<'a> {
    field: &'a GeneratorField,
    susp: &'a Suspension,
    h: f64,
    ws: Workspace,
    steps: usize,
}

impl<'a> Integrator<'a> {
    pub fn new(field: &'a GeneratorField, susp: &'a Suspension, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Precondition("step size must be positive".into()));
        }
        let product = h * field.sup_bound();
        if product >= 1.0 {
            return Err(Error::StepTooLarge { product, limit: 1.0 });
        }
        Ok(Self { field, susp, h, ws: Workspace::new(field.dim(), field.max_m as usize), steps: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.ws.n
    }

    /// `y ← Ψ(x)·y`.
    pub fn lap(&mut self, x: &BasePoint, y: &mut Mat) -> Result<()> {
        let r = self.susp.roof_at(x);
        self.segment(x, r, 0.0, r, y)
    }

    /// `y ← Φ^t(pt)·y` for `t ≥ 0`; returns `X^t(pt)`.
    pub fn propagate(&mut self, pt: &SuspensionPoint, t: f64, y: &mut Mat) -> Result<SuspensionPoint> {
        if t < 0.0 {
            return Err(Error::Precondition("propagate needs t >= 0".into()));
        }
        if t / self.h > 1e8 {
            return Err(Error::Precondition("|t|/h exceeds 1e8".into()));
        }
        let mut x = pt.base.clone();
        let mut s = pt.height;
        let mut remaining = t;
        loop {
            let r = self.susp.roof_at(&x);
            if s + remaining >= r {
                self.segment(&x, r, s, r, y)?;
                remaining -= r - s;
                x = self.susp.sys.apply(&x, 1)?;
                s = 0.0;
            } else {
                if remaining > 0.0 {
                    self.segment(&x, r, s, s + remaining, y)?;
                }
                return Ok(SuspensionPoint { base: x, height: s + remaining });
            }
        }
    }

    /// Integrates heights `[a, b]` of the lap over base point `x` with roof `r`.
    fn segment(&mut self, x: &BasePoint, r: f64, a: f64, b: f64, y: &mut Mat) -> Result<()> {
        if b <= a {
            return Ok(());
        }
        let coords = self.susp.sys.coords(x);
        let lap = LapCoeffs::new(self.field, coords);
        let mut active: Vec<(f64, &FlowboxPatch)> = Vec::new();
        for p in &self.field.patches {
            let al = p.alpha(self.susp, x);
            let (lo, hi) = p.band();
            if al > 0.0 && lo < b && hi > a {
                active.push((al, p));
            }
        }
        if active.is_empty() {
            return self.plain(&lap, r, a, b, y);
        }
        // Patches have disjoint supports, so at most one is active at any height.
        active.sort_by(|p, q| p.1.s0.total_cmp(&q.1.s0));
        let mut cur = a;
        for (al, p) in active {
            let (lo, hi) = p.band();
            let lo = lo.max(a);
            let hi = hi.min(b);
            if lo > cur {
                self.plain(&lap, r, cur, lo, y)?;
            }
            self.patched(&lap, r, p, al, lo, hi, y)?;
            cur = hi;
        }
        if cur < b {
            self.plain(&lap, r, cur, b, y)?;
        }
        Ok(())
    }

    fn plain(&mut self, lap: &LapCoeffs, r: f64, a: f64, b: f64, y: &mut Mat) -> Result<()> {
        let m = ((b - a) / self.h).ceil().max(1.0) as usize;
        let hh = (b - a) / m as f64;
        for k in 0..m {
            let mid = a + (k as f64 + 0.5) * hh;
            lap.eval_into(mid / r, &mut self.ws.w, &mut self.ws.h);
            cayley_apply(&self.ws.h, 0.5 * hh, y, &mut self.ws.lhs, &mut self.ws.rhs)?;
        }
        self.steps += m;
        Ok(())
    }

    /// Lockstep integration inside a patch: the smooth fundamental solution
    /// `Φ_aux` from the bottom of the box is carried along to evaluate `P`.
    #[allow(clippy::too_many_arguments)]
    fn patched(
        &mut self,
        lap: &LapCoeffs,
        r: f64,
        patch: &FlowboxPatch,
        alpha: f64,
        a: f64,
        b: f64,
        y: &mut Mat,
    ) -> Result<()> {
        let n = self.ws.n;
        let mut aux = Mat::identity(n, n);
        if a > patch.s0 {
            self.plain(lap, r, patch.s0, a, &mut aux)?;
        }
        let g = &patch.generator * alpha;
        let m = ((b - a) / self.h).ceil().max(1.0) as usize;
        let hh = (b - a) / m as f64;
        for k in 0..m {
            let s = a + k as f64 * hh;
            lap.eval_into((s + 0.25 * hh) / r, &mut self.ws.w, &mut self.ws.h);
            cayley_apply(&self.ws.h, 0.25 * hh, &mut aux, &mut self.ws.lhs, &mut self.ws.rhs)?;
            let p = &aux * &g * symplectic_inverse(&aux);
            lap.eval_into((s + 0.5 * hh) / r, &mut self.ws.w, &mut self.ws.h2);
            self.ws.h2 += p;
            cayley_apply(&self.ws.h2, 0.5 * hh, y, &mut self.ws.lhs, &mut self.ws.rhs)?;
            lap.eval_into((s + 0.75 * hh) / r, &mut self.ws.w, &mut self.ws.h);
            cayley_apply(&self.ws.h, 0.25 * hh, &mut aux, &mut self.ws.lhs, &mut self.ws.rhs)?;
        }
        self.steps += m;
        Ok(())
    }
}

/// Pointwise value `H(pt)`; inside a flowbox the smooth fundamental
/// solution is integrated from the bottom of the box with step `h_eval`.
pub fn field_eval(field: &GeneratorField, susp: &Suspension, pt: &SuspensionPoint) -> Result<HamGenerator> {
    field_eval_with_step(field, susp, pt, DEFAULT_STEP)
}

pub fn field_eval_with_step(
    field: &GeneratorField,
    susp: &Suspension,
    pt: &SuspensionPoint,
    h_eval: f64,
) -> Result<HamGenerator> {
    let r = susp.roof_at(&pt.base);
    let coords = susp.sys.coords(&pt.base);
    let mut h = field.smooth_matrix(coords, pt.height / r);
    for p in &field.patches {
        let (lo, hi) = p.band();
        let al = p.alpha(susp, &pt.base);
        if al > 0.0 && pt.height >= lo && pt.height < hi {
            let smooth = field.smooth_part();
            let mut aux = Mat::identity(field.dim(), field.dim());
            let mut integ = Integrator::new(&smooth, susp, h_eval)?;
            integ.segment(&pt.base, r, p.s0, pt.height, &mut aux)?;
            h += &aux * (&p.generator * al) * symplectic_inverse(&aux);
        }
    }
    HamGenerator::with_tolerance(h, 1e-10)
}

/// Result of integrating the variational equation.
#[derive(Debug, Clone)]
pub struct FundamentalSolution {
    pub value: SympMatrix,
    pub at: SuspensionPoint,
    pub t: f64,
    pub step_count: usize,
    pub defect: f64,
}

/// `Φ_H^t(x)`; negative `t` uses `Φ^{−t}(x) = (Φ^{t}(X^{−t}x))⁻¹`.
pub fn fundamental_solution(
    field: &GeneratorField,
    susp: &Suspension,
    x: &SuspensionPoint,
    t: f64,
    h: f64,
) -> Result<FundamentalSolution> {
    if !t.is_finite() {
        return Err(Error::Precondition("t must be finite".into()));
    }
    let n = field.dim();
    let mut integ = Integrator::new(field, susp, h)?;
    let mut y = Mat::identity(n, n);
    let value = if t >= 0.0 {
        integ.propagate(x, t, &mut y)?;
        y
    } else {
        let start = susp.flow(x, t)?;
        integ.propagate(&start, -t, &mut y)?;
        symplectic_inverse(&y)
    };
    let form = make_standard_form(field.ell())?;
    let defect = symplectic_defect(&value, &form)?;
    Ok(FundamentalSolution {
        value: SympMatrix::trusted(value),
        at: x.clone(),
        t,
        step_count: integ.step_count(),
        defect,
    })
}

/// `‖Φ^{t+s}(x) − Φ^s(X^t x)·Φ^t(x)‖_F`.
pub fn verify_cocycle_identity(
    field: &GeneratorField,
    susp: &Suspension,
    x: &SuspensionPoint,
    t: f64,
    s: f64,
    h: f64,
) -> Result<f64> {
    let whole = fundamental_solution(field, susp, x, t + s, h)?;
    let first = fundamental_solution(field, susp, x, t, h)?;
    let mid = susp.flow(x, t)?;
    let second = fundamental_solution(field, susp, &mid, s, h)?;
    Ok((whole.value.matrix() - second.value.matrix() * first.value.matrix()).norm())
}

/// Mean cocycle-identity residual over `points` at `h, h/2, …` and the
/// successive ratios. A single start point gives erratic ratios because
/// each lap segment is split into `⌈L/h⌉` steps; averaging over start
/// heights removes that grid-alignment effect.
pub fn convergence_order(
    field: &GeneratorField,
    susp: &Suspension,
    points: &[SuspensionPoint],
    t: f64,
    s: f64,
    h: f64,
    halvings: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.is_empty() {
        return Err(Error::Precondition("need at least one start point".into()));
    }
    let mut res = Vec::with_capacity(halvings + 1);
    let mut hh = h;
    for _ in 0..=halvings {
        let mut total = 0.0;
        for x in points {
            total += verify_cocycle_identity(field, susp, x, t, s, hh)?;
        }
        res.push(total / points.len() as f64);
        hh /= 2.0;
    }
    let ratios = res.windows(2).map(|w| w[0] / w[1]).collect();
    Ok((res, ratios))
}

/// `(‖Φ^t(x)‖_op, e^{‖H‖_∞|t|})`.
pub fn gronwall_check(
    field: &GeneratorField,
    susp: &Suspension,
    x: &SuspensionPoint,
    t: f64,
    h: f64,
) -> Result<(f64, f64)> {
    let phi = fundamental_solution(field, susp, x, t, h)?;
    Ok((op_norm(phi.value.matrix()), (field.sup_bound() * t.abs()).exp()))
}

/// Value of the induced cocycle at a base point.
#[derive(Debug, Clone)]
pub struct InducedCocycleValue {
    pub value: SympMatrix,
    pub at: BasePoint,
}

/// `Ψ_H(x) = Φ_H^{ϱ(x)}(x, 0)`.
pub fn induced_cocycle(
    field: &GeneratorField,
    susp: &Suspension,
    x: &BasePoint,
    h: f64,
) -> Result<InducedCocycleValue> {
    let n = field.dim();
    let mut integ = Integrator::new(field, susp, h)?;
    let mut y = Mat::identity(n, n);
    integ.lap(x, &mut y)?;
    Ok(InducedCocycleValue { value: SympMatrix::trusted(y), at: x.clone() })
}

/// `Ψ^n(x) = Ψ(f^{n−1}x)···Ψ(x)` for `n ≥ 0`, and
/// `Ψ^{−n}(x) = Ψ(f^{−n}x)⁻¹···Ψ(f^{−1}x)⁻¹`.
pub fn induced_power(
    field: &GeneratorField,
    susp: &Suspension,
    x: &BasePoint,
    n: i64,
    h: f64,
) -> Result<SympMatrix> {
    let dim = field.dim();
    let mut integ = Integrator::new(field, susp, h)?;
    let mut y = Mat::identity(dim, dim);
    if n >= 0 {
        let mut p = x.clone();
        for _ in 0..n {
            integ.lap(&p, &mut y)?;
            p = susp.sys.apply(&p, 1)?;
        }
        Ok(SympMatrix::trusted(y))
    } else {
        let start = susp.sys.apply(x, n)?;
        let mut p = start;
        for _ in 0..(-n) {
            integ.lap(&p, &mut y)?;
            p = susp.sys.apply(&p, 1)?;
        }
        Ok(SympMatrix::trusted(symplectic_inverse(&y)))
    }
}

/// Empirical Lipschitz constant of `z ↦ Φ^t(z)` and the analytic bound
/// `10·e^{2|t|‖H‖}·K_field` it must respect.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzProbe {
    pub empirical: f64,
    pub bound: f64,
}

pub fn lipschitz_probe(
    field: &GeneratorField,
    susp: &Suspension,
    t: f64,
    n_pairs: usize,
    seed: u64,
    h: f64,
) -> Result<LipschitzProbe> {
    if n_pairs == 0 {
        return Err(Error::Precondition("n_pairs must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (t.abs() / susp.roof.min()).ceil() as usize + 2;
    let mut empirical: f64 = 0.0;
    let mut done = 0;
    while done < n_pairs {
        let y = susp.sys.sample_point(&mut rng, margin);
        let z = susp.sys.nearby_point(&y, 1e-4, &mut rng);
        let d = susp.sys.distance(&y, &z);
        let rmin = susp.roof_at(&y).min(susp.roof_at(&z));
        let height = rng.random_range(0.0..rmin);
        if d == 0.0 {
            continue;
        }
        let py = SuspensionPoint { base: y, height };
        let pz = SuspensionPoint { base: z, height };
        let a = fundamental_solution(field, susp, &py, t, h)?;
        let b = fundamental_solution(field, susp, &pz, t, h)?;
        empirical = empirical.max((a.value.matrix() - b.value.matrix()).norm() / d);
        done += 1;
    }
    let crossings = (t.abs() / susp.roof.min()).ceil() as i32 + 1;
    let growth = (susp.base_expansion() + susp.roof.lipschitz()).powi(crossings);
    let k_field = field.lipschitz_bound(susp) * t.abs().max(1.0) * growth;
    let bound = 10.0 * (2.0 * t.abs() * field.sup_bound()).exp() * k_field;
    Ok(LipschitzProbe { empirical, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{RoofFunction, TorusPoint};
    use crate::symplectic::{algebra_defect, expm, random_generator};

    fn cat(roof: RoofFunction) -> Suspension {
        Suspension::new(BaseSystem::CatMap, roof).unwrap()
    }

    fn diag_gen(a: f64) -> HamGenerator {
        HamGenerator::new(Mat::from_row_slice(2, 2, &[a, 0.0, 0.0, -a])).unwrap()
    }

    fn start() -> SuspensionPoint {
        SuspensionPoint { base: BasePoint::torus(0.23, 0.61), height: 0.3 }
    }

    #[test]
    fn zero_field_gives_identity() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::zero(2);
        let h = field_eval(&f, &susp, &start()).unwrap();
        assert_eq!(h.matrix(), &Mat::zeros(4, 4));
        let phi = fundamental_solution(&f, &susp, &start(), 7.3, 1e-2).unwrap();
        assert_eq!(phi.value.matrix(), &Mat::identity(4, 4));
        let phi = fundamental_solution(&f, &susp, &start(), -4.0, 1e-2).unwrap();
        assert_eq!(phi.value.matrix(), &Mat::identity(4, 4));
        let psi = induced_cocycle(&f, &susp, &start().base, 1e-2).unwrap();
        assert_eq!(psi.value.matrix(), &Mat::identity(4, 4));
        assert_eq!(verify_cocycle_identity(&f, &susp, &start(), 1.0, 2.0, 1e-2).unwrap(), 0.0);
        assert_eq!(gronwall_check(&f, &susp, &start(), 3.0, 1e-2).unwrap(), (1.0, 1.0));
        let probe = lipschitz_probe(&f, &susp, 1.0, 5, 1, 1e-2).unwrap();
        assert_eq!(probe.empirical, 0.0);
    }

    #[test]
    fn constant_coefficient_on_one_basis_element() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let mut coeffs = vec![Vec::new(); 3];
        coeffs[1].push(TrigTerm::constant(0.7));
        let f = GeneratorField::from_terms(1, coeffs).unwrap();
        let h = field_eval(&f, &susp, &start()).unwrap();
        // Basis element (0,1) is J·(e0e1ᵀ + e1e0ᵀ) = diag(−1, 1).
        assert_eq!(h.matrix(), &Mat::from_row_slice(2, 2, &[-0.7, 0.0, 0.0, 0.7]));
    }

    #[test]
    fn constant_field_roundtrip() {
        let g = random_generator(2, 5, 1.0).unwrap();
        let f = GeneratorField::constant(&g);
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let h = field_eval(&f, &susp, &start()).unwrap();
        assert!((h.matrix() - g.matrix()).norm() < 1e-15);
    }

    #[test]
    fn values_are_hamiltonian_exactly() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let form = make_standard_form(2).unwrap();
        let f = GeneratorField::random(2, 3, 1.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let base = susp.sys.sample_point(&mut rng, 0);
            let height = rng.random_range(0.0..susp.roof_at(&base));
            let h = field_eval(&f, &susp, &SuspensionPoint { base, height }).unwrap();
            assert!(algebra_defect(h.matrix(), &form).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn field_respects_quotient() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(1, 8, 1.0, 3).unwrap();
        let x = BasePoint::torus(0.4, 0.1);
        let r = susp.roof_at(&x);
        let below = SuspensionPoint { base: x.clone(), height: r * (1.0 - 1e-9) };
        let next = susp.flow(&SuspensionPoint::on_section(x), r).unwrap();
        assert_eq!(next.height, 0.0);
        let a = field_eval(&f, &susp, &below).unwrap();
        let b = field_eval(&f, &susp, &next).unwrap();
        assert!((a.matrix() - b.matrix()).norm() < 1e-6);
    }

    #[test]
    fn diagonal_field_closed_form() {
        let susp = cat(RoofFunction::constant(1.3).unwrap());
        let a = 0.4;
        let f = GeneratorField::constant(&diag_gen(a));
        let h = 1e-3;
        for t in [0.5, 3.0, 10.0] {
            let phi = fundamental_solution(&f, &susp, &start(), t, h).unwrap();
            let exact = Mat::from_row_slice(2, 2, &[(a * t).exp(), 0.0, 0.0, (-a * t).exp()]);
            let err = (phi.value.matrix() - exact).norm();
            assert!(err <= 0.2 * h * h * t * (a * t).exp(), "t={t} err={err}");
        }
    }

    #[test]
    fn rotation_field_closed_form() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let a = 0.9;
        let f = GeneratorField::rotation(1, vec![vec![TrigTerm::constant(a)]]).unwrap();
        let h = 1e-3;
        let t = 6.0;
        let phi = fundamental_solution(&f, &susp, &start(), t, h).unwrap();
        let (s, c) = (a * t).sin_cos();
        let exact = Mat::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((phi.value.matrix() - exact).norm() <= h * h * t);
    }

    #[test]
    fn negative_time_inverts() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(2, 11, 1.0, 2).unwrap();
        let x = start();
        for t in [0.7, 4.0, 10.0] {
            let fwd = fundamental_solution(&f, &susp, &x, t, 1e-2).unwrap();
            let xt = susp.flow(&x, t).unwrap();
            let back = fundamental_solution(&f, &susp, &xt, -t, 1e-2).unwrap();
            let prod = back.value.matrix() * fwd.value.matrix();
            assert!((prod - Mat::identity(4, 4)).norm() <= 1e-9);
        }
    }

    #[test]
    fn cocycle_identity_edges_and_order() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(1, 2, 1.0, 2).unwrap();
        let x = start();
        assert!(verify_cocycle_identity(&f, &susp, &x, 0.0, 1.5, 1e-3).unwrap() <= 1e-12);
        assert!(verify_cocycle_identity(&f, &susp, &x, 1.5, 0.0, 1e-3).unwrap() <= 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<_> = (0..24)
            .map(|_| {
                let base = susp.sys.sample_point(&mut rng, 0);
                let height = rng.random_range(0.0..susp.roof_at(&base));
                SuspensionPoint { base, height }
            })
            .collect();
        let (res, ratios) = convergence_order(&f, &susp, &pts, 1.0, 1.0, 0.02, 4).unwrap();
        // Both sides share the step size, so the leading h² terms cancel up to
        // the per-segment rounding of the step count; the residual is at
        // least second order.
        for r in &ratios {
            assert!(*r >= 3.5, "ratio {r}, residuals {res:?}");
        }
    }

    #[test]
    fn global_error_is_second_order() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let a = 0.5;
        let f = GeneratorField::constant(&diag_gen(a));
        let t = 3.0;
        let exact = Mat::from_row_slice(2, 2, &[(a * t).exp(), 0.0, 0.0, (-a * t).exp()]);
        let errs: Vec<f64> = (0..5)
            .map(|k| {
                let h = 0.1 / 2f64.powi(k);
                let phi = fundamental_solution(&f, &susp, &SuspensionPoint::on_section(BasePoint::torus(0.1, 0.2)), t, h)
                    .unwrap();
                (phi.value.matrix() - &exact).norm()
            })
            .collect();
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((3.9..=4.1).contains(&r), "ratio {r}");
        }
    }

    #[test]
    fn step_too_large_is_rejected() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let f = GeneratorField::constant(&diag_gen(10.0));
        assert!(matches!(
            fundamental_solution(&f, &susp, &start(), 1.0, 0.1),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn gronwall_examples() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let a = 0.3;
        let f = GeneratorField::constant(&diag_gen(a));
        let t = 4.0;
        let (lhs, rhs) = gronwall_check(&f, &susp, &start(), t, 1e-3).unwrap();
        assert!((lhs - (a * t).exp()).abs() < 1e-5);
        assert!((rhs - (2f64.sqrt() * a * t).exp()).abs() < 1e-12);
        assert!(lhs <= rhs);
    }

    #[test]
    fn induced_cocycle_constant_case() {
        let c = 2.0;
        let susp = cat(RoofFunction::constant(c).unwrap());
        let h0 = diag_gen(0.25);
        let f = GeneratorField::constant(&h0);
        let psi = induced_cocycle(&f, &susp, &BasePoint::torus(0.1, 0.2), 1e-3).unwrap();
        let exact = expm(&(h0.matrix() * c));
        assert!((psi.value.matrix() - exact).norm() < 1e-6);
        assert!(psi.value.defect() <= 1e-10);
    }

    #[test]
    fn induced_power_matches_flow() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(2, 21, 1.0, 2).unwrap();
        let x = BasePoint::torus(0.71, 0.05);
        let n = 6;
        let h = 1e-2;
        let psi_n = induced_power(&f, &susp, &x, n, h).unwrap();
        let t = crate::base::roof_sum(&susp.roof, &susp.sys, &x, n as u64).unwrap();
        let phi = fundamental_solution(&f, &susp, &SuspensionPoint::on_section(x.clone()), t, h).unwrap();
        assert!((psi_n.matrix() - phi.value.matrix()).norm() <= 10.0 * h * h * n as f64);
        let back = induced_power(&f, &susp, &susp.sys.apply(&x, n).unwrap(), -n, h).unwrap();
        assert!((back.matrix() * psi_n.matrix() - Mat::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn reported_bounds_dominate_samples() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(1, 13, 2.0, 3).unwrap();
        let sup = f.sup_bound();
        let lip = f.lipschitz_bound(&susp);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10_000 {
            let y = susp.sys.sample_point(&mut rng, 0);
            let z = susp.sys.nearby_point(&y, 1e-3, &mut rng);
            let r = susp.roof_at(&y).min(susp.roof_at(&z));
            let s1 = rng.random_range(0.0..r);
            let s2 = (s1 + rng.random_range(-1e-3..1e-3)).clamp(0.0, r * 0.999_999);
            let hy = f.smooth_matrix(susp.sys.coords(&y), s1 / susp.roof_at(&y));
            let hz = f.smooth_matrix(susp.sys.coords(&z), s2 / susp.roof_at(&z));
            assert!(hy.norm() <= sup * (1.0 + 1e-12));
            let d = susp.sys.distance(&y, &z) + (s1 - s2).abs();
            assert!((hy - hz).norm() <= lip * d * (1.0 + 1e-9));
        }
    }

    #[test]
    fn lipschitz_probe_cases() {
        let susp = cat(RoofFunction::constant(1.5).unwrap());
        let f = GeneratorField::constant(&random_generator(1, 4, 0.8).unwrap());
        let probe = lipschitz_probe(&f, &susp, 1.0, 20, 2, 1e-2).unwrap();
        assert!(probe.empirical <= 1e-8);
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let g = GeneratorField::random(1, 4, 0.8, 2).unwrap();
        let probe = lipschitz_probe(&g, &susp, 1.0, 50, 2, 1e-2).unwrap();
        assert!(probe.empirical.is_finite() && probe.empirical > 0.0);
        assert!(probe.empirical <= probe.bound, "{probe:?}");
    }

    #[test]
    fn lattice_and_rational_points_evaluate_alike() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let f = GeneratorField::random(1, 1, 1.0, 2).unwrap();
        let r = BasePoint::rational(crate::base::RatPoint::new(1, 2, 5).unwrap());
        let l = BasePoint::Torus(TorusPoint::from_coords(0.2, 0.4));
        let a = induced_cocycle(&f, &susp, &r, 1e-2).unwrap();
        let b = induced_cocycle(&f, &susp, &l, 1e-2).unwrap();
        assert!((a.value.matrix() - b.value.matrix()).norm() < 1e-12);
    }
}
