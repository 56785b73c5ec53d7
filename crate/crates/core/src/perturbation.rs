//! Flowbox perturbations realizing a prescribed symplectic map at time one,
//! the holonomy-breaking experiment and the genericity probe.
//!
//! A perturbation lives in the cylinder `B(c, ρ) × [s0, s0 + 1]` inside one
//! lap of the suspension and has the form `P = Φ_H^τ·α(d(z,c))·G·(Φ_H^τ)⁻¹`
//! with `τ = s − s0` and constant generator `G = log S`. Then
//! `Φ_{H+P}^τ(z, s0) = Φ_H^τ(z, s0)·exp(τα G)`, so the center of the box
//! realizes `Φ¹_{H₀} = Φ¹_H·S`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{BasePoint, HeteroclinicPoint, PeriodicOrbit, RatPoint, SuspensionPoint};
use crate::cocycle::{bump, field_eval, fundamental_solution, FlowboxPatch, GeneratorField, Integrator, Suspension, TrigTerm, PATCH_DURATION};
use crate::error::{Error, Result};
use crate::holonomy::{
    atomic_measure_at_periodic, pushforward_compare_matrix, stable_holonomy, unstable_holonomy, ProjectiveAtomMeasure,
    DEFAULT_N_MAX, DEFAULT_TOL,
};
use crate::spectrum::spectrum_induced;
use crate::symplectic::{
    algebra_defect, expm, logm_near_identity, make_standard_form, op_norm, symplectic_inverse, HamGenerator, Mat,
    SympMatrix,
};

/// Number of sample points used by [`compute_k`] unless stated otherwise.
pub const K_SAMPLES: usize = 1000;
const K_SEED: u64 = 0x4b5f_5341_4d50;
const K_SAFETY: f64 = 1.5;

/// `C⁰` budget `ε`, constant `K` and `δ = ε/(6K³)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub k: f64,
    pub delta: f64,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64, k: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Precondition("epsilon must be positive".into()));
        }
        if !(k >= 1.0) || !k.is_finite() {
            return Err(Error::Precondition("K must be >= 1".into()));
        }
        Ok(Self { epsilon, k, delta: epsilon / (6.0 * k * k * k) })
    }

    /// `3K³δ`, the bound the measured `sup ‖P‖` must respect.
    pub fn allowed_sup(&self) -> f64 {
        3.0 * self.k.powi(3) * self.delta
    }
}

/// `1.5·max(sup‖Φ^t‖ + Lip Φ, sup‖(Φ^t)⁻¹‖ + Lip Φ, ‖H‖_∞ + L_H)` over
/// sampled points and `t ∈ [0, 1]`, with operator norms. `Lip Φ` is the
/// largest difference quotient over pairs at distance `1e−4` sharing the
/// sampled height; `‖H‖_∞` and `L_H` are the field's analytic bounds.
pub fn compute_k(field: &GeneratorField, susp: &Suspension, n_samples: usize, h: f64) -> Result<f64> {
    if n_samples < 1000 {
        return Err(Error::Precondition("n_samples must be >= 1000".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(K_SEED);
    let mut integ = Integrator::new(field, susp, h)?;
    let n = field.dim();
    let (mut fwd, mut inv, mut lip_phi): (f64, f64, f64) = (1.0, 1.0, 0.0);
    for _ in 0..n_samples {
        let base = susp.sys.sample_point(&mut rng, 4);
        let near = susp.sys.nearby_point(&base, 1e-4, &mut rng);
        let top = susp.roof_at(&base).min(susp.roof_at(&near));
        let height = rng.random_range(0.0..top);
        let t: f64 = rng.random_range(0.0..=1.0);
        let mut y = Mat::identity(n, n);
        integ.propagate(&SuspensionPoint { base: base.clone(), height }, t, &mut y)?;
        fwd = fwd.max(op_norm(&y));
        inv = inv.max(op_norm(&symplectic_inverse(&y)));
        let d = susp.sys.distance(&base, &near);
        if d > 0.0 && !field.is_zero() {
            let mut w = Mat::identity(n, n);
            integ.propagate(&SuspensionPoint { base: near, height }, t, &mut w)?;
            lip_phi = lip_phi.max((&y - &w).norm() / d);
        }
    }
    let lip_h = field.lipschitz_bound(susp);
    let k = (fwd + lip_phi).max(inv + lip_phi).max(field.sup_bound() + lip_h).max(1.0);
    Ok(K_SAFETY * k)
}

/// Generator of the linear isotopy `S_t = (1−t)I + tS` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotopyValue {
    pub t: f64,
    /// `(S − I)·S_t⁻¹`.
    pub generator: Mat,
    /// `‖J·gen + genᵀ·J‖_F`.
    pub algebra_defect: f64,
}

/// `(S − I)·S_t⁻¹` after checking that `S_t` is invertible on a grid of
/// 1001 values of `t`. The linear path is not symplectic, so the returned
/// generator is generally outside 𝔰𝔭 by `O(‖S − I‖²)`; the defect is reported.
pub fn isotopy_generator(s: &SympMatrix, t: f64) -> Result<IsotopyValue> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition("t must lie in [0, 1]".into()));
    }
    let n = s.matrix().nrows();
    let id = Mat::identity(n, n);
    let path = |t: f64| &id * (1.0 - t) + s.matrix() * t;
    for i in 0..=1000 {
        let ti = i as f64 / 1000.0;
        if path(ti).determinant().abs() < 1e-12 {
            return Err(Error::IsotopyFailure(format!("S_t is singular near t = {ti}")));
        }
    }
    let st_inv = path(t).try_inverse().ok_or_else(|| Error::IsotopyFailure(format!("S_t singular at t = {t}")))?;
    let generator = (s.matrix() - &id) * st_inv;
    let form = make_standard_form(s.ell())?;
    let algebra_defect = algebra_defect(&generator, &form)?;
    Ok(IsotopyValue { t, generator, algebra_defect })
}

#[derive(Debug, Clone)]
pub struct FlowboxPerturbation {
    pub center: SuspensionPoint,
    pub radius: f64,
    pub target: SympMatrix,
    /// `log S`.
    pub generator: Mat,
    pub budget: PerturbationBudget,
    /// Largest `‖P‖_F` over the sampled box points.
    pub measured_sup: f64,
    pub base_field: GeneratorField,
    pub resulting_field: GeneratorField,
}

/// `sup |α'|` for `ρ = 1`.
fn bump_slope() -> f64 {
    let mut m: f64 = 0.0;
    let k = 4000;
    for i in 0..k {
        let s = 0.5 + 0.5 * (i as f64 + 0.5) / k as f64;
        let ds = 1e-6;
        m = m.max((bump(s + ds, 1.0) - bump(s - ds, 1.0)).abs() / (2.0 * ds));
    }
    m
}

fn minimal_period(p: RatPoint) -> u32 {
    let mut q = p.forward();
    let mut k = 1;
    while q != p {
        q = q.forward();
        k += 1;
    }
    k
}

fn check_geometry(base: &GeneratorField, susp: &Suspension, x: &SuspensionPoint, rho: f64) -> Result<()> {
    if !(rho > 0.0) {
        return Err(Error::Geometry("box radius must be positive".into()));
    }
    if x.height < 0.0 {
        return Err(Error::Geometry("box must start at a nonnegative height".into()));
    }
    let lip = susp.roof.lipschitz() * std::f64::consts::SQRT_2;
    let floor = (susp.roof_at(&x.base) - lip * rho).max(susp.roof.min());
    if x.height + PATCH_DURATION > floor {
        return Err(Error::Geometry(format!(
            "box [{}, {}] does not fit below the roof (min {floor:.6} over the ball)",
            x.height,
            x.height + PATCH_DURATION
        )));
    }
    if let Some(rp) = x.base.as_rational() {
        let orbit = PeriodicOrbit { point: rp, period: minimal_period(rp) };
        let period = orbit.flow_period(&susp.roof);
        if period <= PATCH_DURATION + rho {
            return Err(Error::Geometry(format!("periodic orbit of flow period {period} is too short for the box")));
        }
    }
    for p in base.patches() {
        let overlap_h = p.s0 < x.height + PATCH_DURATION && x.height < p.s0 + PATCH_DURATION;
        if overlap_h && susp.sys.distance(&p.center, &x.base) < p.rho + rho {
            return Err(Error::Geometry("flowbox overlaps an existing perturbation".into()));
        }
    }
    Ok(())
}

/// Builds `H₀ = H + P` realizing `Φ¹_{H₀}(x) = Φ¹_H(x)·S`, with `K` sampled
/// from `field`.
#[allow(clippy::too_many_arguments)]
pub fn build_perturbation(
    field: &GeneratorField,
    susp: &Suspension,
    x: &SuspensionPoint,
    s: &SympMatrix,
    rho_box: f64,
    epsilon: f64,
    h: f64,
) -> Result<FlowboxPerturbation> {
    let k = compute_k(field, susp, K_SAMPLES, h)?;
    build_perturbation_with_budget(field, susp, x, s, rho_box, &PerturbationBudget::new(epsilon, k)?, h)
}

pub fn build_perturbation_with_budget(
    field: &GeneratorField,
    susp: &Suspension,
    x: &SuspensionPoint,
    s: &SympMatrix,
    rho_box: f64,
    budget: &PerturbationBudget,
    h: f64,
) -> Result<FlowboxPerturbation> {
    check_geometry(field, susp, x, rho_box)?;
    let n = field.dim();
    let generator = if s.matrix() == &Mat::identity(n, n) { Mat::zeros(n, n) } else { logm_near_identity(s.matrix())? };
    let g_norm = generator.norm();
    if g_norm >= budget.delta {
        return Err(Error::Budget { measured: g_norm, allowed: budget.delta });
    }
    let form = make_standard_form(field.ell())?;
    let gen_defect = algebra_defect(&generator, &form)?;
    if gen_defect > 1e-10 {
        return Err(Error::IsotopyFailure(format!("log S is off the algebra by {gen_defect:.3e}")));
    }
    let resulting_field = if g_norm == 0.0 {
        field.clone()
    } else {
        let k2 = budget.k * budget.k;
        field.with_patch(FlowboxPatch {
            center: x.base.clone(),
            s0: x.height,
            rho: rho_box,
            generator: generator.clone(),
            sup_bound: k2 * g_norm,
            lipschitz_bound: k2 * g_norm * (bump_slope() / rho_box + 2.0),
        })
    };
    let measured_sup = measure_patch_sup(field, &resulting_field, susp, x, rho_box, h)?;
    if measured_sup > budget.allowed_sup() || budget.allowed_sup() >= budget.epsilon {
        return Err(Error::Budget { measured: measured_sup, allowed: budget.allowed_sup() });
    }
    Ok(FlowboxPerturbation {
        center: x.clone(),
        radius: rho_box,
        target: s.clone(),
        generator,
        budget: *budget,
        measured_sup,
        base_field: field.clone(),
        resulting_field,
    })
}

/// `max ‖H₀ − H‖_F` over the box axis and 200 seeded points of the box.
fn measure_patch_sup(
    base: &GeneratorField,
    pert: &GeneratorField,
    susp: &Suspension,
    x: &SuspensionPoint,
    rho: f64,
    h: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5355_50);
    let mut pts = Vec::with_capacity(211);
    for i in 0..=10 {
        pts.push(SuspensionPoint { base: x.base.clone(), height: x.height + PATCH_DURATION * i as f64 / 10.5 });
    }
    for _ in 0..200 {
        let r = rho * rng.random_range(0.0..1.0f64);
        pts.push(SuspensionPoint {
            base: susp.sys.nearby_point(&x.base, r, &mut rng),
            height: x.height + PATCH_DURATION * rng.random_range(0.0..1.0),
        });
    }
    let mut sup: f64 = 0.0;
    for pt in &pts {
        let a = crate::cocycle::field_eval_with_step(pert, susp, pt, h)?;
        let b = field_eval(base, susp, pt)?;
        sup = sup.max((a.matrix() - b.matrix()).norm());
    }
    Ok(sup)
}

/// `‖Φ¹_{H₀}(x) − Φ¹_H(x)·S‖_F`.
pub fn verify_realization(pert: &FlowboxPerturbation, susp: &Suspension, h: f64) -> Result<f64> {
    let new = fundamental_solution(&pert.resulting_field, susp, &pert.center, PATCH_DURATION, h)?;
    let old = fundamental_solution(&pert.base_field, susp, &pert.center, PATCH_DURATION, h)?;
    Ok((new.value.matrix() - old.value.matrix() * pert.target.matrix()).norm())
}

/// `max ‖H₀ − H‖_F` over `n_samples` seeded points outside the box.
/// Exact locality means the result is `0.0`.
pub fn outside_box_difference(pert: &FlowboxPerturbation, susp: &Suspension, n_samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &pert.center;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n_samples {
        let base = susp.sys.sample_point(&mut rng, 0);
        let height = rng.random_range(0.0..susp.roof_at(&base));
        let inside = susp.sys.distance(&base, &c.base) < pert.radius
            && height >= c.height
            && height < c.height + PATCH_DURATION;
        if inside {
            continue;
        }
        let pt = SuspensionPoint { base, height };
        let a = field_eval(&pert.resulting_field, susp, &pt)?;
        let b = field_eval(&pert.base_field, susp, &pt)?;
        worst = worst.max((a.matrix() - b.matrix()).norm());
        done += 1;
    }
    Ok(worst)
}

/// Hyperbolic generator `diag(η₁..η_ℓ, −η₁..−η_ℓ)` with distinct `η_i` and
/// Frobenius norm `norm`.
pub fn hyperbolic_generator(ell: usize, norm: f64) -> HamGenerator {
    let n = 2 * ell;
    let mut m = Mat::zeros(n, n);
    for i in 0..ell {
        let e = (ell - i) as f64;
        m[(i, i)] = e;
        m[(i + ell, i + ell)] = -e;
    }
    let scale = norm / m.norm();
    HamGenerator::new(m * scale).expect("diagonal generator is Hamiltonian")
}

/// Adds hyperbolic kicks in boxes at height 0 over every point of `orbit`
/// until the return map there has real simple spectrum.
pub fn simplify_spectrum(
    field: &GeneratorField,
    susp: &Suspension,
    orbit: &PeriodicOrbit,
    rho: f64,
    budget: &PerturbationBudget,
    h: f64,
) -> Result<GeneratorField> {
    let g = hyperbolic_generator(field.ell(), 0.5 * budget.delta);
    let s = SympMatrix::trusted(expm(g.matrix()));
    let mut f = field.clone();
    for pt in orbit.orbit() {
        let x = SuspensionPoint::on_section(BasePoint::rational(pt));
        f = build_perturbation_with_budget(&f, susp, &x, &s, rho, budget, h)?.resulting_field;
    }
    atomic_measure_at_periodic(&f, susp, orbit, h)?;
    Ok(f)
}

#[derive(Debug, Clone, Copy)]
pub struct BreakOptions {
    pub tol: f64,
    pub n_max: usize,
    /// Candidate iterates `f^k(z)`, `k ∈ [0, k_max]`, for the box center.
    pub k_max: i64,
    /// Orbit window of `z` kept outside the box.
    pub window: i64,
    pub rho_cap: f64,
    pub grid_len: usize,
}

impl Default for BreakOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, n_max: DEFAULT_N_MAX, k_max: 4, window: 40, rho_cap: 0.1, grid_len: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct BreakReport {
    pub field: GeneratorField,
    pub mismatch_before: f64,
    pub predicted_mismatch: f64,
    pub mismatch_after: f64,
    /// `‖G‖_F` of the chosen rotation generator, 0 when nothing was applied.
    pub generator_norm: f64,
    pub box_iterate: i64,
    pub box_radius: f64,
    /// `‖L^u_{H₀,p,z} − L^u_{H,p,z}‖_F`.
    pub unstable_residual: f64,
    pub broken: bool,
    pub message: String,
}

/// `(L^u_{p,z})_* m_p` compared against `(L^s_{q,z})_* m_q`.
pub fn holonomy_mismatch(
    m_p: &ProjectiveAtomMeasure,
    m_q: &ProjectiveAtomMeasure,
    lu: &Mat,
    ls: &Mat,
) -> Result<f64> {
    pushforward_compare_matrix(m_p, lu, &m_q.pushforward(ls))
}

fn unit_rotation_generator(ell: usize) -> Mat {
    let form = make_standard_form(ell).expect("ell >= 1");
    let j = form.matrix().clone();
    let norm = j.norm();
    j / norm
}

/// Perturbs `field` in a box over `f^k(z)`, `k ≥ 0`, which changes the stable
/// holonomy at the heteroclinic point `z` and leaves the unstable one alone.
/// The rotation `S = exp(g·Ĵ)` uses the smallest `g` in `{δ/2, δ/4, …}` whose
/// predicted mismatch exceeds the unperturbed one by `10·tol`.
pub fn break_holonomy(
    field: &GeneratorField,
    susp: &Suspension,
    z: &HeteroclinicPoint,
    epsilon: f64,
    h: f64,
    opts: &BreakOptions,
) -> Result<BreakReport> {
    let (p, q) = (&z.from, &z.to);
    let m_p = atomic_measure_at_periodic(field, susp, p, h)?;
    let m_q = atomic_measure_at_periodic(field, susp, q, h)?;
    let lu = unstable_holonomy(field, susp, p, &z.point, opts.n_max, opts.tol, h)?;
    let ls = stable_holonomy(field, susp, q, &z.point, opts.n_max, opts.tol, h)?;
    if !lu.converged || !ls.converged {
        return Err(Error::Precondition("holonomies at z did not converge".into()));
    }
    let before = holonomy_mismatch(&m_p, &m_q, lu.map.matrix(), ls.map.matrix())?;
    let fail = |message: String| BreakReport {
        field: field.clone(),
        mismatch_before: before,
        predicted_mismatch: before,
        mismatch_after: before,
        generator_norm: 0.0,
        box_iterate: -1,
        box_radius: 0.0,
        unstable_residual: 0.0,
        broken: false,
        message,
    };

    // Box center: the iterate of z with the most room.
    let mut avoid: Vec<BasePoint> = p.orbit().into_iter().chain(q.orbit()).map(BasePoint::rational).collect();
    for pt in field.patches() {
        avoid.push(pt.center.clone());
    }
    let mut best: Option<(i64, f64, BasePoint)> = None;
    for k in 0..=opts.k_max {
        let c = susp.sys.apply(&z.point, k)?;
        let mut room = opts.rho_cap;
        for o in p.orbit().into_iter().chain(q.orbit()) {
            room = room.min(0.45 * susp.sys.distance(&c, &BasePoint::rational(o)));
        }
        for pt in field.patches() {
            room = room.min(0.95 * (susp.sys.distance(&c, &pt.center) - pt.rho));
        }
        for j in -opts.window..=opts.window {
            if j != k {
                room = room.min(0.45 * susp.sys.distance(&c, &susp.sys.apply(&z.point, j)?));
            }
        }
        let lip = susp.roof.lipschitz() * std::f64::consts::SQRT_2;
        if susp.roof_at(&c) - lip * room < PATCH_DURATION {
            continue;
        }
        if best.as_ref().is_none_or(|b| room > b.1) {
            best = Some((k, room, c));
        }
    }
    let Some((k, rho, center)) = best.filter(|b| b.1 > 0.0) else {
        return Ok(fail("no admissible flowbox around the forward orbit of z".into()));
    };

    let kk = compute_k(field, susp, K_SAMPLES, h)?;
    let budget = PerturbationBudget::new(epsilon, kk)?;
    let mut integ = Integrator::new(field, susp, h)?;
    let n = field.dim();
    let mut psi_k = Mat::identity(n, n);
    let mut w = z.point.clone();
    for _ in 0..k {
        integ.lap(&w, &mut psi_k)?;
        w = susp.sys.apply(&w, 1)?;
    }
    let psi_k_inv = symplectic_inverse(&psi_k);
    let unit = unit_rotation_generator(field.ell());
    let threshold = before + 10.0 * opts.tol;
    let mut chosen: Option<(f64, f64)> = None;
    for i in 1..=opts.grid_len {
        let g = budget.delta / 2f64.powi(i as i32);
        let s = expm(&(&unit * g));
        // L^s_{H₀,q,z} = M⁻¹ L^s_{H,q,z} with M = Ψ^k(z)⁻¹ S Ψ^k(z).
        let m_inv = &psi_k_inv * symplectic_inverse(&s) * &psi_k;
        let pred = holonomy_mismatch(&m_p, &m_q, lu.map.matrix(), &(m_inv * ls.map.matrix()))?;
        if pred >= threshold {
            chosen = Some((g, pred));
        } else {
            break;
        }
    }
    let Some((g, predicted)) = chosen else {
        return Ok(fail(format!("no rotation angle within δ/2 = {:.3e} reaches mismatch {threshold:.3e}", budget.delta / 2.0)));
    };
    let s = SympMatrix::trusted(expm(&(&unit * g)));
    let pert = build_perturbation_with_budget(field, susp, &SuspensionPoint::on_section(center), &s, rho, &budget, h)?;
    let new_field = pert.resulting_field;
    let lu2 = unstable_holonomy(&new_field, susp, p, &z.point, opts.n_max, opts.tol, h)?;
    let ls2 = stable_holonomy(&new_field, susp, q, &z.point, opts.n_max, opts.tol, h)?;
    let m_p2 = atomic_measure_at_periodic(&new_field, susp, p, h)?;
    let m_q2 = atomic_measure_at_periodic(&new_field, susp, q, h)?;
    let after = holonomy_mismatch(&m_p2, &m_q2, lu2.map.matrix(), ls2.map.matrix())?;
    let unstable_residual = (lu2.map.matrix() - lu.map.matrix()).norm();
    let broken = lu2.converged && ls2.converged && after >= 10.0 * opts.tol && after > before;
    Ok(BreakReport {
        field: new_field,
        mismatch_before: before,
        predicted_mismatch: predicted,
        mismatch_after: after,
        generator_norm: g,
        box_iterate: k,
        box_radius: rho,
        unstable_residual,
        broken,
        message: if broken { "holonomy broken".into() } else { "mismatch below threshold after rebuild".into() },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_trials: usize,
    pub epsilon_grid: Vec<f64>,
    pub seed: u64,
    pub h: f64,
    /// Iterates per spectrum estimate.
    pub n_iter: usize,
    pub rho: f64,
    /// Range of the constant rotation rate of the base family.
    pub rotation_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub epsilon: f64,
    pub trials: usize,
    pub positive: usize,
    pub fraction: f64,
}

/// Random admissible flowbox perturbations of the rotation family and the
/// fraction of trials with statistically positive top exponent.
pub fn genericity_probe(ell: usize, susp: &Suspension, cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    genericity_probe_from(ell, susp, cfg, |rng, ell| {
        let terms = (0..ell)
            .map(|_| vec![TrigTerm::constant(rng.random_range(cfg.rotation_range.0..=cfg.rotation_range.1))])
            .collect();
        GeneratorField::rotation(ell, terms)
    })
}

/// As [`genericity_probe`] with a caller-supplied base family.
pub fn genericity_probe_from<F>(ell: usize, susp: &Suspension, cfg: &ProbeConfig, family: F) -> Result<Vec<ProbeRow>>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Result<GeneratorField> + Sync,
{
    if cfg.n_trials < 20 {
        return Err(Error::Precondition("n_trials must be >= 20".into()));
    }
    let mut rows = Vec::with_capacity(cfg.epsilon_grid.len());
    for (ei, &eps) in cfg.epsilon_grid.iter().enumerate() {
        let outcomes: Vec<Result<bool>> = (0..cfg.n_trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((ei * cfg.n_trials + trial) as u64);
                let base = family(&mut rng, ell)?;
                let field = if eps > 0.0 {
                    let k = compute_k(&base, susp, K_SAMPLES, cfg.h)?;
                    let budget = PerturbationBudget::new(eps, k)?;
                    let n = 2 * ell;
                    let raw = Mat::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
                    let g = HamGenerator::from_symmetric(&((&raw + raw.transpose()) * 0.5))?;
                    let g = g.matrix() * (0.5 * budget.delta / g.matrix().norm());
                    let s = SympMatrix::trusted(expm(&g));
                    let center = susp.sys.sample_point(&mut rng, 4);
                    let x = SuspensionPoint::on_section(center);
                    build_perturbation_with_budget(&base, susp, &x, &s, cfg.rho, &budget, cfg.h)?.resulting_field
                } else {
                    base
                };
                let x0 = susp.sys.sample_point(&mut rng, cfg.n_iter);
                let r = spectrum_induced(&field, susp, &x0, cfg.n_iter, 1, cfg.h)?;
                Ok(r.top() > 3.0 * r.top_stderr())
            })
            .collect();
        let mut positive = 0;
        for o in outcomes {
            if o? {
                positive += 1;
            }
        }
        rows.push(ProbeRow { epsilon: eps, trials: cfg.n_trials, positive, fraction: positive as f64 / cfg.n_trials as f64 });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{BaseSystem, RoofFunction};
    use crate::symplectic::canonical_rotation;

    fn susp() -> Suspension {
        Suspension::new(BaseSystem::CatMap, RoofFunction::cosine_bump(2.0, 0.5).unwrap()).unwrap()
    }

    fn center() -> SuspensionPoint {
        SuspensionPoint { base: BasePoint::torus(0.37, 0.61), height: 0.2 }
    }

    #[test]
    fn budget_arithmetic() {
        let b = PerturbationBudget::new(0.1, 2.0).unwrap();
        assert_eq!(b.delta, 0.1 / 48.0);
        assert!(b.allowed_sup() < b.epsilon);
        assert!(PerturbationBudget::new(0.1, 0.5).is_err());
    }

    #[test]
    fn k_examples() {
        let s = Suspension::new(BaseSystem::CatMap, RoofFunction::constant(1.0).unwrap()).unwrap();
        assert_eq!(compute_k(&GeneratorField::zero(1), &s, 1000, 1e-2).unwrap(), 1.5);
        let a = 0.4;
        let f = GeneratorField::constant(&HamGenerator::new(Mat::from_row_slice(2, 2, &[a, 0.0, 0.0, -a])).unwrap());
        let k = compute_k(&f, &s, 1000, 1e-3).unwrap();
        let expected = 1.5 * (a.exp()).max(2f64.sqrt() * a);
        assert!(k <= expected * (1.0 + 1e-6) && k >= 1.5 * (0.99 * a).exp(), "{k} vs {expected}");
        let mut last = 0.0;
        for scale in [0.01, 0.1, 0.5, 1.0] {
            let kk = compute_k(&GeneratorField::random(1, 3, scale, 2).unwrap(), &susp(), 1000, 1e-2).unwrap();
            assert!(kk >= last);
            last = kk;
        }
    }

    #[test]
    fn isotopy_examples() {
        let id = SympMatrix::identity(1);
        assert_eq!(isotopy_generator(&id, 0.3).unwrap().generator, Mat::zeros(2, 2));
        let eta = 1e-7;
        let s = SympMatrix::new(Mat::from_row_slice(2, 2, &[1.0 + eta, 0.0, 0.0, 1.0 / (1.0 + eta)])).unwrap();
        let v = isotopy_generator(&s, 0.0).unwrap();
        let want = Mat::from_row_slice(2, 2, &[eta, 0.0, 0.0, -eta / (1.0 + eta)]);
        assert!((&v.generator - want).norm() < 1e-15);
        assert!(v.algebra_defect <= 1e-12);
        // The linear path leaves the algebra at second order.
        let eta = 0.1;
        let s = SympMatrix::new(Mat::from_row_slice(2, 2, &[1.0 + eta, 0.0, 0.0, 1.0 / (1.0 + eta)])).unwrap();
        let d = isotopy_generator(&s, 0.0).unwrap().algebra_defect;
        assert!((d - 2f64.sqrt() * eta * eta / (1.0 + eta)).abs() < 1e-12, "{d}");
        let s = crate::symplectic::random_symplectic(2, 4, 0.05).unwrap();
        let dist = (s.matrix() - Mat::identity(4, 4)).norm();
        assert!(dist <= 0.25);
        for i in 0..=20 {
            let v = isotopy_generator(&s, i as f64 / 20.0).unwrap();
            assert!(v.generator.norm() <= 2.0 * dist);
        }
        let flip = SympMatrix::new(Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0])).unwrap();
        assert!(matches!(isotopy_generator(&flip, 0.2), Err(Error::IsotopyFailure(_))));
    }

    #[test]
    fn identity_target_leaves_field_unchanged() {
        let s = susp();
        let f = GeneratorField::random(1, 2, 0.5, 2).unwrap();
        let pert = build_perturbation(&f, &s, &center(), &SympMatrix::identity(1), 0.05, 0.1, 1e-2).unwrap();
        assert_eq!(pert.resulting_field, f);
        assert_eq!(pert.measured_sup, 0.0);
        assert!(verify_realization(&pert, &s, 1e-2).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_field_realizes_target_exactly() {
        let s = susp();
        let f = GeneratorField::zero(1);
        let k = compute_k(&f, &s, 1000, 1e-2).unwrap();
        let budget = PerturbationBudget::new(0.1, k).unwrap();
        let target = canonical_rotation(1, 0.3 * budget.delta / 2f64.sqrt());
        let pert = build_perturbation_with_budget(&f, &s, &center(), &target, 0.05, &budget, 1e-3).unwrap();
        assert!(verify_realization(&pert, &s, 1e-3).unwrap() <= 1e-10);
        let inside = SuspensionPoint { base: center().base, height: 0.7 };
        let p = field_eval(&pert.resulting_field, &s, &inside).unwrap();
        assert!((p.matrix() - &pert.generator).norm() < 1e-15);
        assert!(pert.measured_sup <= budget.allowed_sup());
    }

    #[test]
    fn generic_field_realization_and_support() {
        let s = susp();
        let f = GeneratorField::random(2, 5, 0.5, 2).unwrap();
        // An explicit budget keeps ‖G‖ large enough for the O(h²) error to
        // stand above rounding.
        let budget = PerturbationBudget::new(0.5, 1.0).unwrap();
        let g = hyperbolic_generator(2, 0.5 * budget.delta);
        let target = SympMatrix::trusted(expm(g.matrix()));
        let pert = build_perturbation_with_budget(&f, &s, &center(), &target, 0.05, &budget, 1e-2).unwrap();
        let res: Vec<f64> = [0.02, 0.01, 0.005]
            .iter()
            .map(|h| verify_realization(&pert, &s, *h).unwrap())
            .collect();
        assert!(res[2] <= 10.0 * 0.005f64.powi(2));
        for w in res.windows(2) {
            assert!((3.5..=4.5).contains(&(w[0] / w[1])), "{res:?}");
        }
        let form = make_standard_form(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let base = s.sys.sample_point(&mut rng, 0);
            let height = rng.random_range(0.0..s.roof_at(&base));
            let pt = SuspensionPoint { base, height };
            let a = field_eval(&pert.resulting_field, &s, &pt).unwrap();
            let b = field_eval(&f, &s, &pt).unwrap();
            assert!(algebra_defect(a.matrix(), &form).unwrap() <= 1e-10);
            let outside = s.sys.distance(&pt.base, &center().base) >= 0.05
                || pt.height < center().height
                || pt.height >= center().height + 1.0;
            if outside {
                assert_eq!(a.matrix(), b.matrix());
            }
        }
    }

    #[test]
    fn geometry_and_budget_errors() {
        let s = susp();
        let f = GeneratorField::zero(1);
        let budget = PerturbationBudget::new(0.1, 1.5).unwrap();
        let big = canonical_rotation(1, budget.delta);
        assert!(matches!(
            build_perturbation_with_budget(&f, &s, &center(), &big, 0.05, &budget, 1e-2),
            Err(Error::Budget { .. })
        ));
        let small = canonical_rotation(1, 0.1 * budget.delta);
        let high = SuspensionPoint { base: center().base, height: 1.0 };
        assert!(matches!(
            build_perturbation_with_budget(&f, &s, &high, &small, 0.05, &budget, 1e-2),
            Err(Error::Geometry(_))
        ));
        let one = Suspension::new(BaseSystem::CatMap, RoofFunction::constant(1.0).unwrap()).unwrap();
        let fixed = SuspensionPoint::on_section(BasePoint::rational(RatPoint::origin()));
        assert!(matches!(
            build_perturbation_with_budget(&f, &one, &fixed, &small, 0.05, &budget, 1e-2),
            Err(Error::Geometry(_))
        ));
        let first = build_perturbation_with_budget(&f, &s, &center(), &small, 0.05, &budget, 1e-2).unwrap();
        let near = SuspensionPoint { base: BasePoint::torus(0.38, 0.61), height: 0.5 };
        assert!(matches!(
            build_perturbation_with_budget(&first.resulting_field, &s, &near, &small, 0.05, &budget, 1e-2),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn zero_field_rotation_gives_sine_mismatch() {
        let m = ProjectiveAtomMeasure::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let id = Mat::identity(2, 2);
        assert_eq!(holonomy_mismatch(&m, &m, &id, &id).unwrap(), 0.0);
        let phi = 0.01;
        let rot = canonical_rotation(1, phi);
        let d = holonomy_mismatch(&m, &m, &id, &symplectic_inverse(rot.matrix())).unwrap();
        assert!((d - phi.sin()).abs() < 1e-12);
    }
}
