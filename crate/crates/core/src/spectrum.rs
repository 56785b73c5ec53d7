//! Lyapunov spectra of `Φ_H^t` and `Ψ_H` by QR reorthogonalization.
//!
//! The frame `Q` is advanced by the cocycle and refactored as `QR` with a
//! positive `R` diagonal; exponents are time averages of `log R_ii`. Standard
//! errors come from 50 non-overlapping block means.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::base::{cat_lambda, roof_sum, BasePoint, BaseSystem, SuspensionPoint};
use crate::cocycle::{GeneratorField, Integrator, Suspension};
use crate::error::{Error, Result};
use crate::symplectic::Mat;

pub const BLOCKS: usize = 50;

/// Standard errors below this are reported as this value. Exactly isometric
/// cocycles otherwise give a zero standard error against exponents of
/// rounding size.
pub const STDERR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Nonincreasing.
    pub exponents: Vec<f64>,
    pub n_steps: usize,
    pub reorth_interval: usize,
    pub pairing_residual: f64,
    pub sum_residual: f64,
    pub stderr: Vec<f64>,
}

impl SpectrumResult {
    pub fn top(&self) -> f64 {
        self.exponents[0]
    }

    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().cloned().fold(0.0, f64::max)
    }

    /// Standard error of the top exponent.
    pub fn top_stderr(&self) -> f64 {
        self.stderr[0]
    }
}

/// Running QR frame with per-event `log R_ii` records.
struct QrFrame {
    q: Mat,
    logs: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl QrFrame {
    fn new(dim: usize) -> Self {
        Self { q: Mat::identity(dim, dim), logs: Vec::new(), weights: Vec::new() }
    }

    /// Refactors the advanced frame `y = M·Q` and records `log R_ii` with the
    /// elapsed `weight` (iterates or flow time).
    fn reorthogonalize(&mut self, y: Mat, weight: f64) -> Result<()> {
        let dim = y.nrows();
        let qr = y.qr();
        let mut q = qr.q();
        let r = qr.r();
        let mut logs = Vec::with_capacity(dim);
        for i in 0..dim {
            let d = r[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::SpectrumDegeneracy(format!("R diagonal {i} is {d}")));
            }
            if d < 0.0 {
                q.column_mut(i).neg_mut();
            }
            logs.push(d.abs().ln());
        }
        self.q = q;
        self.logs.push(logs);
        self.weights.push(weight);
        Ok(())
    }

    fn finish(self, n_steps: usize, reorth_interval: usize) -> Result<SpectrumResult> {
        let dim = self.q.nrows();
        let total: f64 = self.weights.iter().sum();
        if self.logs.len() < BLOCKS || total <= 0.0 {
            return Err(Error::Precondition(format!("need at least {BLOCKS} reorthogonalizations")));
        }
        let mut exps = vec![0.0; dim];
        for l in &self.logs {
            for i in 0..dim {
                exps[i] += l[i];
            }
        }
        for e in exps.iter_mut() {
            *e /= total;
        }
        let events = self.logs.len();
        let mut block_means = vec![Vec::with_capacity(BLOCKS); dim];
        for b in 0..BLOCKS {
            let lo = b * events / BLOCKS;
            let hi = (b + 1) * events / BLOCKS;
            let w: f64 = self.weights[lo..hi].iter().sum();
            for (i, bm) in block_means.iter_mut().enumerate() {
                let s: f64 = self.logs[lo..hi].iter().map(|l| l[i]).sum();
                bm.push(s / w);
            }
        }
        let stderr: Vec<f64> = block_means
            .iter()
            .map(|bm| {
                let mean = bm.iter().sum::<f64>() / BLOCKS as f64;
                let var = bm.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (BLOCKS - 1) as f64;
                (var / BLOCKS as f64).sqrt().max(STDERR_FLOOR)
            })
            .collect();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| exps[b].total_cmp(&exps[a]));
        let exponents: Vec<f64> = order.iter().map(|&i| exps[i]).collect();
        let stderr: Vec<f64> = order.iter().map(|&i| stderr[i]).collect();
        let pairing_residual =
            (0..dim / 2).map(|i| (exponents[i] + exponents[dim - 1 - i]).abs()).fold(0.0, f64::max);
        let sum_residual = exponents.iter().sum::<f64>().abs();
        Ok(SpectrumResult { exponents, n_steps, reorth_interval, pairing_residual, sum_residual, stderr })
    }
}

/// Exponents of `Ψ_H` along the orbit of `x0`, per iterate.
pub fn spectrum_induced(
    field: &GeneratorField,
    susp: &Suspension,
    x0: &BasePoint,
    n: usize,
    reorth: usize,
    h: f64,
) -> Result<SpectrumResult> {
    if n < 100 {
        return Err(Error::Precondition("n must be >= 100".into()));
    }
    if reorth == 0 {
        return Err(Error::Precondition("reorth must be >= 1".into()));
    }
    let mut integ = Integrator::new(field, susp, h)?;
    let mut frame = QrFrame::new(field.dim());
    let mut x = x0.clone();
    let mut done = 0;
    while done < n {
        let chunk = reorth.min(n - done);
        let mut y = frame.q.clone();
        for _ in 0..chunk {
            integ.lap(&x, &mut y)?;
            x = susp.sys.apply(&x, 1)?;
        }
        frame.reorthogonalize(y, chunk as f64)?;
        done += chunk;
    }
    frame.finish(n, reorth)
}

/// Exponents of `Φ_H^t` along the orbit of `x0`, per unit flow time.
pub fn spectrum_flow(
    field: &GeneratorField,
    susp: &Suspension,
    x0: &SuspensionPoint,
    t_total: f64,
    reorth_time: f64,
    h: f64,
) -> Result<SpectrumResult> {
    if !(t_total >= 100.0) {
        return Err(Error::Precondition("T_total must be >= 100".into()));
    }
    if !(reorth_time > 0.0) {
        return Err(Error::Precondition("reorth_time must be positive".into()));
    }
    let mut integ = Integrator::new(field, susp, h)?;
    let mut frame = QrFrame::new(field.dim());
    let mut pt = x0.clone();
    let mut elapsed = 0.0;
    let mut k = 0usize;
    while elapsed < t_total {
        // Interval ends are multiples of reorth_time so no drift accumulates.
        let next = ((k + 1) as f64 * reorth_time).min(t_total);
        let dt = next - elapsed;
        let mut y = frame.q.clone();
        pt = integ.propagate(&pt, dt, &mut y)?;
        frame.reorthogonalize(y, dt)?;
        elapsed = next;
        k += 1;
    }
    let steps = integ.step_count();
    frame.finish(steps, (reorth_time / h).round() as usize)
}

/// Both sides of `λ⁺(Φ) = λ⁺(Ψ)/∫ϱ dμ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub relative_error: f64,
    pub stderr: f64,
}

/// Estimates `λ⁺(Φ)` over the flow time `ϱ^(n)(x0)` and `λ⁺(Ψ)` over `n`
/// iterates of the same orbit; `∫ϱ dμ` is the exact Lebesgue mean.
pub fn scaling_law_check(
    field: &GeneratorField,
    susp: &Suspension,
    x0: &BasePoint,
    n: usize,
    h: f64,
) -> Result<ScalingCheck> {
    let induced = spectrum_induced(field, susp, x0, n, 1, h)?;
    let t_total = roof_sum(&susp.roof, &susp.sys, x0, n as u64)?;
    let flow = spectrum_flow(field, susp, &SuspensionPoint::on_section(x0.clone()), t_total, 1.0, h)?;
    let integral = susp.roof.lebesgue_mean();
    let lhs = flow.top();
    let rhs = induced.top() / integral;
    let stderr = flow.top_stderr().max(induced.top_stderr() / integral);
    let relative_error = if lhs == rhs { 0.0 } else { (lhs - rhs).abs() / rhs.abs().max(stderr) };
    Ok(ScalingCheck { lhs, rhs, relative_error, stderr })
}

/// Tangent map of the suspension flow across one section crossing at base
/// point `x`: `(ξ, η) ↦ (Aξ, η − ∇ϱ(x)·ξ)` in coordinates (base, height).
fn crossing_tangent(susp: &Suspension, x: &BasePoint) -> nalgebra::Matrix3<f64> {
    let (u, _) = susp.sys.coords(x);
    let grad_u = match susp.roof {
        crate::base::RoofFunction::Constant(_) => 0.0,
        crate::base::RoofFunction::CosineBump { a, .. } => {
            -2.0 * std::f64::consts::PI * a * (2.0 * std::f64::consts::PI * u).sin()
        }
    };
    nalgebra::Matrix3::new(2.0, 1.0, 0.0, 1.0, 1.0, 0.0, -grad_u, 0.0, 1.0)
}

/// Exponents of the linear Poincaré flow `P^t = Π∘DX^t` on the normal
/// bundle of the flow direction, per unit time. The tangent flow moves
/// vectors only at section crossings; the projection `Π` onto the
/// normal bundle drops the height component.
pub fn poincare_flow_exponents(susp: &Suspension, x0: &SuspensionPoint, t_total: f64) -> Result<SpectrumResult> {
    if susp.sys != BaseSystem::CatMap {
        return Err(Error::Precondition("tangent flow is only available for the cat map".into()));
    }
    if !(t_total >= 100.0) {
        return Err(Error::Precondition("T_total must be >= 100".into()));
    }
    let mut frame = QrFrame::new(2);
    let mut x = x0.base.clone();
    let mut s = x0.height;
    let mut elapsed = 0.0;
    loop {
        let r = susp.roof_at(&x);
        let dt = r - s;
        if elapsed + dt > t_total {
            // Remainder of the run without a crossing: P acts as the identity.
            let rest = t_total - elapsed;
            if rest > 0.0 {
                frame.reorthogonalize(frame.q.clone(), rest)?;
            }
            break;
        }
        let d = crossing_tangent(susp, &x);
        let normal = Matrix2::new(d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(1, 1)]);
        let q = Matrix2::new(frame.q[(0, 0)], frame.q[(0, 1)], frame.q[(1, 0)], frame.q[(1, 1)]);
        let y = normal * q;
        frame.reorthogonalize(Mat::from_column_slice(2, 2, y.as_slice()), dt)?;
        elapsed += dt;
        x = susp.sys.apply(&x, 1)?;
        s = 0.0;
    }
    let n = frame.logs.len();
    frame.finish(n, 1)
}

/// Exponent of the flow direction `∂_s` under the full tangent flow,
/// `(1/T) log ‖DX^T ∂_s‖`.
pub fn flow_direction_exponent(susp: &Suspension, x0: &SuspensionPoint, t_total: f64) -> Result<f64> {
    let mut v = nalgebra::Vector3::new(0.0, 0.0, 1.0);
    let mut x = x0.base.clone();
    let mut elapsed = susp.roof_at(&x) - x0.height;
    while elapsed <= t_total {
        v = crossing_tangent(susp, &x) * v;
        x = susp.sys.apply(&x, 1)?;
        elapsed += susp.roof_at(&x);
    }
    Ok(v.norm().ln() / t_total)
}

/// `log λ_cat / ∫ϱ dμ`, the positive Poincaré-flow exponent over the cat map.
pub fn cat_poincare_exponent(susp: &Suspension) -> f64 {
    cat_lambda().ln() / susp.roof.lebesgue_mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::RoofFunction;
    use crate::symplectic::{random_generator, HamGenerator};
    use crate::cocycle::TrigTerm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat(roof: RoofFunction) -> Suspension {
        Suspension::new(BaseSystem::CatMap, roof).unwrap()
    }

    fn diag_field(a: f64) -> GeneratorField {
        GeneratorField::constant(&HamGenerator::new(Mat::from_row_slice(2, 2, &[a, 0.0, 0.0, -a])).unwrap())
    }

    fn x0() -> BasePoint {
        BasePoint::torus(0.3141, 0.2718)
    }

    #[test]
    fn zero_field_has_zero_spectrum() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::zero(2);
        let r = spectrum_induced(&f, &susp, &x0(), 200, 3, 0.05).unwrap();
        assert_eq!(r.exponents, vec![0.0; 4]);
        let r = spectrum_flow(&f, &susp, &SuspensionPoint::on_section(x0()), 100.0, 1.0, 0.05).unwrap();
        assert_eq!(r.exponents, vec![0.0; 4]);
        let c = scaling_law_check(&f, &susp, &x0(), 100, 0.05).unwrap();
        assert_eq!((c.lhs, c.rhs, c.relative_error), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_diagonal_field() {
        let a = 0.3;
        let c = 2.0;
        let susp = cat(RoofFunction::constant(c).unwrap());
        let f = diag_field(a);
        let ind = spectrum_induced(&f, &susp, &x0(), 500, 1, 1e-2).unwrap();
        assert!((ind.exponents[0] - a * c).abs() <= 1e-6);
        assert!((ind.exponents[1] + a * c).abs() <= 1e-6);
        assert!(ind.pairing_residual <= 1e-6);
        let five = spectrum_induced(&f, &susp, &x0(), 500, 5, 1e-2).unwrap();
        assert!((five.exponents[0] - ind.exponents[0]).abs() <= 1e-8);
        let flow = spectrum_flow(&f, &susp, &SuspensionPoint::on_section(x0()), 200.0, 1.0, 1e-2).unwrap();
        assert!((flow.exponents[0] - a).abs() <= 1e-6);
        let s = scaling_law_check(&f, &susp, &x0(), 100, 1e-2).unwrap();
        assert!(s.relative_error <= 1e-6, "{s:?}");
    }

    #[test]
    fn rotation_field_is_isometric() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::rotation(
            1,
            vec![vec![TrigTerm::constant(0.8), TrigTerm { amp: 0.3, k: (1, 0), phase: 0.2, m: 1 }]],
        )
        .unwrap();
        let r = spectrum_induced(&f, &susp, &x0(), 1000, 1, 0.05).unwrap();
        assert!(r.exponents[0].abs() <= 3.0 * r.stderr[0], "{r:?}");
    }

    #[test]
    fn exponents_at_constant_field_are_real_parts() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let g = random_generator(2, 17, 1.0).unwrap();
        let f = GeneratorField::constant(&g);
        let mut re: Vec<f64> = g.matrix().complex_eigenvalues().iter().map(|z| z.re).collect();
        re.sort_by(|a, b| b.total_cmp(a));
        let r = spectrum_flow(&f, &susp, &SuspensionPoint::on_section(x0()), 400.0, 1.0, 5e-3).unwrap();
        for (e, want) in r.exponents.iter().zip(&re) {
            assert!((e - want).abs() < 0.02, "{:?} vs {re:?}", r.exponents);
        }
    }

    #[test]
    fn random_field_pairing() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(2, 9, 1.0, 2).unwrap();
        let r = spectrum_induced(&f, &susp, &x0(), 5000, 1, 0.05).unwrap();
        assert!(r.pairing_residual <= 3.0 * r.max_stderr(), "{r:?}");
        assert!(r.sum_residual <= 4.0 * r.max_stderr());
        assert!(r.exponents.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn poincare_flow_matches_cat_eigenvalues() {
        let log_l = cat_lambda().ln();
        let pt = SuspensionPoint::on_section(x0());
        let one = cat(RoofFunction::constant(1.0).unwrap());
        let r = poincare_flow_exponents(&one, &pt, 5000.0).unwrap();
        assert!((r.exponents[0] - log_l).abs() <= 1e-3);
        assert!((r.exponents[1] + log_l).abs() <= 1e-3);
        let two = cat(RoofFunction::constant(2.0).unwrap());
        let r = poincare_flow_exponents(&two, &pt, 5000.0).unwrap();
        assert!((r.exponents[0] - log_l / 2.0).abs() <= 1e-3);
        let bump = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let r = poincare_flow_exponents(&bump, &pt, 20000.0).unwrap();
        assert!((r.exponents[0] - cat_poincare_exponent(&bump)).abs() <= 3.0 * r.stderr[0] + 1e-3);
        assert_eq!(flow_direction_exponent(&one, &pt, 1000.0).unwrap(), 0.0);
        assert_eq!(flow_direction_exponent(&bump, &pt, 1000.0).unwrap(), 0.0);
    }

    #[test]
    fn orbit_invariance_of_top_exponent() {
        let susp = cat(RoofFunction::cosine_bump(2.0, 0.5).unwrap());
        let f = GeneratorField::random(1, 4, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let runs: Vec<SpectrumResult> = (0..4)
            .map(|_| spectrum_induced(&f, &susp, &susp.sys.sample_point(&mut rng, 0), 3000, 1, 0.05).unwrap())
            .collect();
        let mean = runs.iter().map(|r| r.top()).sum::<f64>() / runs.len() as f64;
        for r in &runs {
            assert!((r.top() - mean).abs() <= 5.0 * r.top_stderr().max(mean.abs() * 0.02), "{r:?}");
        }
    }

    #[test]
    fn preconditions() {
        let susp = cat(RoofFunction::constant(1.0).unwrap());
        let f = GeneratorField::zero(1);
        assert!(spectrum_induced(&f, &susp, &x0(), 99, 1, 0.1).is_err());
        assert!(spectrum_induced(&f, &susp, &x0(), 100, 0, 0.1).is_err());
        assert!(spectrum_flow(&f, &susp, &SuspensionPoint::on_section(x0()), 50.0, 1.0, 0.1).is_err());
    }
}
