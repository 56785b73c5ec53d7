//! Fiber bunching, stable/unstable holonomies and atomic projective measures.
//!
//! Stable holonomy between points of one stable leaf is the limit
//! `L^s_{x,y} = lim Ψ^{πn}(y)⁻¹ Ψ^{πn}(x)`; the unstable one uses backward
//! iterates, `L^u_{x,y} = lim Ψ^{πn}(f^{−πn}y) Ψ^{πn}(f^{−πn}x)⁻¹`.
//! Both map the fiber over `x` to the fiber over `y`.

use serde::{Deserialize, Serialize};

use crate::base::{cat_lambda, BasePoint, PeriodicOrbit};
use crate::cocycle::{GeneratorField, Integrator, Suspension};
use crate::error::{Error, Result};
use crate::symplectic::{op_norm, symplectic_defect, make_standard_form, symplectic_inverse, Mat, SympMatrix};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_N_MAX: usize = 60;

/// Fiber-bunching parameters: `N`-step blocks, rate `θ`, base rate `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominationParams {
    pub n_block: usize,
    pub theta: f64,
    pub tau: f64,
    pub k_max: usize,
}

impl DominationParams {
    pub fn new(n_block: usize, theta: f64, tau: f64, k_max: usize) -> Result<Self> {
        if n_block == 0 || k_max == 0 {
            return Err(Error::Precondition("N and k_max must be positive".into()));
        }
        if !(theta > 0.0 && tau > 0.0) {
            return Err(Error::Precondition("θ and τ must be positive".into()));
        }
        if 3.0 * theta >= tau {
            return Err(Error::Precondition(format!("need 3θ<τ, got θ={theta}, τ={tau}")));
        }
        Ok(Self { n_block, theta, tau, k_max })
    }

    /// `τ = log λ_cat` with `θ` just below `τ/3`.
    pub fn for_cat_map(n_block: usize, k_max: usize) -> Self {
        let tau = cat_lambda().ln();
        Self { n_block, theta: 0.3 * tau, tau, k_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub holds: bool,
    /// `kNθ − Σ_{j<k} log(‖Ψ^N(f^{jN}x)‖‖Ψ^N(f^{jN}x)⁻¹‖)` for `k = 1..k_max`.
    pub margins: Vec<f64>,
}

/// Product bound over `N`-step blocks of the induced cocycle, with operator norms.
pub fn domination_check(
    field: &GeneratorField,
    susp: &Suspension,
    x: &BasePoint,
    params: &DominationParams,
    h: f64,
) -> Result<DominationReport> {
    let n = field.dim();
    let mut integ = Integrator::new(field, susp, h)?;
    let mut p = x.clone();
    let mut acc = 0.0;
    let mut margins = Vec::with_capacity(params.k_max);
    for k in 1..=params.k_max {
        let mut y = Mat::identity(n, n);
        for _ in 0..params.n_block {
            integ.lap(&p, &mut y)?;
            p = susp.sys.apply(&p, 1)?;
        }
        acc += (op_norm(&y) * op_norm(&symplectic_inverse(&y))).ln();
        margins.push((k * params.n_block) as f64 * params.theta - acc);
    }
    let holds = margins.iter().all(|m| *m >= 0.0);
    Ok(DominationReport { holds, margins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Holonomy {
    pub map: SympMatrix,
    pub from: BasePoint,
    pub to: BasePoint,
    pub side: Side,
    /// `‖L_n − L_{n−1}‖_F`, with `L_0 = I`.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl Holonomy {
    /// Geometric mean of successive history ratios over the decaying tail.
    pub fn history_ratio(&self) -> Option<f64> {
        let tail: Vec<f64> = self.history.iter().cloned().skip(1).filter(|d| *d > 0.0).collect();
        if tail.len() < 2 {
            return None;
        }
        let k = (tail.len() - 1) as f64;
        Some((tail[tail.len() - 1] / tail[0]).powf(1.0 / k))
    }
}

/// Upper bound for the per-block contraction of the holonomy differences,
/// `(λ_cat⁻¹ e^{2‖H‖ϱ_max})^block`.
pub fn history_ratio_bound(field: &GeneratorField, susp: &Suspension, block: usize) -> f64 {
    let per_lap = (2.0 * field.sup_bound() * susp.roof.max()).exp() / susp.base_expansion();
    per_lap.powi(block as i32)
}

fn check_leaf(susp: &Suspension, x: &BasePoint, y: &BasePoint, side: Side) -> Result<()> {
    let n = match side {
        Side::Stable => 30,
        Side::Unstable => -30,
    };
    let d = susp.sys.distance(&susp.sys.apply(x, n)?, &susp.sys.apply(y, n)?);
    if d < 1e-6 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "points are not on a common {side:?} leaf: distance {d:.3e} after {} iterates",
            n.abs()
        )))
    }
}

/// `Ψ^block(w)` and `f^block(w)`.
fn block_product(integ: &mut Integrator, susp: &Suspension, w: &BasePoint, block: usize) -> Result<(Mat, BasePoint)> {
    let n = integ.dim();
    let mut y = Mat::identity(n, n);
    let mut p = w.clone();
    for _ in 0..block {
        integ.lap(&p, &mut y)?;
        p = susp.sys.apply(&p, 1)?;
    }
    Ok((y, p))
}

/// Holonomy limit between `x` and `y` on a common leaf, in blocks of `block` iterates.
#[allow(clippy::too_many_arguments)]
pub fn holonomy_between(
    field: &GeneratorField,
    susp: &Suspension,
    x: &BasePoint,
    y: &BasePoint,
    side: Side,
    block: usize,
    n_max: usize,
    tol: f64,
    h: f64,
) -> Result<Holonomy> {
    if block == 0 || n_max == 0 {
        return Err(Error::Precondition("block and n_max must be positive".into()));
    }
    check_leaf(susp, x, y, side)?;
    let n = field.dim();
    let mut integ = Integrator::new(field, susp, h)?;
    let mut a = Mat::identity(n, n);
    let mut b = Mat::identity(n, n);
    let mut prev = Mat::identity(n, n);
    let mut history = Vec::new();
    let mut converged = false;
    match side {
        Side::Stable => {
            let (mut px, mut py) = (x.clone(), y.clone());
            for _ in 0..n_max {
                let (bx, nx) = block_product(&mut integ, susp, &px, block)?;
                let (by, ny) = block_product(&mut integ, susp, &py, block)?;
                a = bx * a;
                b = by * b;
                px = nx;
                py = ny;
                let l = symplectic_inverse(&b) * &a;
                let diff = (&l - &prev).norm();
                history.push(diff);
                prev = l;
                if diff < tol {
                    converged = true;
                    break;
                }
            }
        }
        Side::Unstable => {
            let k = block as i64;
            let (mut px, mut py) = (x.clone(), y.clone());
            for _ in 0..n_max {
                px = susp.sys.apply(&px, -k)?;
                py = susp.sys.apply(&py, -k)?;
                let (bx, _) = block_product(&mut integ, susp, &px, block)?;
                let (by, _) = block_product(&mut integ, susp, &py, block)?;
                a *= bx;
                b *= by;
                let l = &b * symplectic_inverse(&a);
                let diff = (&l - &prev).norm();
                history.push(diff);
                prev = l;
                if diff < tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(Holonomy { map: SympMatrix::trusted(prev), from: x.clone(), to: y.clone(), side, history, converged })
}

/// `L^s_{p,z}` for `z` on the stable leaf of the periodic point `p`.
pub fn stable_holonomy(
    field: &GeneratorField,
    susp: &Suspension,
    p: &PeriodicOrbit,
    z: &BasePoint,
    n_max: usize,
    tol: f64,
    h: f64,
) -> Result<Holonomy> {
    holonomy_between(field, susp, &p.base_point(), z, Side::Stable, p.period as usize, n_max, tol, h)
}

/// `L^u_{p,z}` for `z` on the unstable leaf of the periodic point `p`.
pub fn unstable_holonomy(
    field: &GeneratorField,
    susp: &Suspension,
    p: &PeriodicOrbit,
    z: &BasePoint,
    n_max: usize,
    tol: f64,
    h: f64,
) -> Result<Holonomy> {
    holonomy_between(field, susp, &p.base_point(), z, Side::Unstable, p.period as usize, n_max, tol, h)
}

/// Residuals of the four holonomy axioms on a triple of points of one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    /// `‖L_{x,z} − L_{y,z}L_{x,y}‖_F`.
    pub composition: f64,
    /// `‖Ψ(f⁻¹y)L_{f⁻¹x,f⁻¹y}Ψ(f⁻¹x)⁻¹ − L_{x,y}‖_F`.
    pub intertwining: f64,
    /// `‖L_{x,y} − I‖_F / d(x,y)`, zero when `x = y`.
    pub lipschitz_ratio: f64,
    /// `max_j ‖L_{f^j y, f^j z} − Ψ^j(z)L_{y,z}Ψ^j(y)⁻¹‖_F` over the sampled `j`.
    pub conjugation: f64,
    pub conjugation_range: (i64, i64),
    /// Largest symplectic defect among the computed holonomies.
    pub max_defect: f64,
    pub all_converged: bool,
}

impl AxiomReport {
    pub fn max_residual(&self) -> f64 {
        self.composition.max(self.intertwining).max(self.conjugation)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AxiomOptions {
    pub side: Side,
    pub block: usize,
    pub n_max: usize,
    pub tol: f64,
    pub h: f64,
    pub j_range: (i64, i64),
}

impl Default for AxiomOptions {
    fn default() -> Self {
        Self { side: Side::Stable, block: 1, n_max: DEFAULT_N_MAX, tol: DEFAULT_TOL, h: 1e-3, j_range: (-3, 10) }
    }
}

/// `Ψ^j(x)` for any integer `j`.
fn cocycle_power(integ: &mut Integrator, susp: &Suspension, x: &BasePoint, j: i64) -> Result<Mat> {
    if j >= 0 {
        Ok(block_product(integ, susp, x, j as usize)?.0)
    } else {
        let start = susp.sys.apply(x, j)?;
        Ok(symplectic_inverse(&block_product(integ, susp, &start, (-j) as usize)?.0))
    }
}

pub fn holonomy_axiom_check(
    field: &GeneratorField,
    susp: &Suspension,
    x: &BasePoint,
    y: &BasePoint,
    z: &BasePoint,
    opts: &AxiomOptions,
) -> Result<AxiomReport> {
    let hol = |a: &BasePoint, b: &BasePoint| {
        holonomy_between(field, susp, a, b, opts.side, opts.block, opts.n_max, opts.tol, opts.h)
    };
    let form = make_standard_form(field.ell())?;
    let mut defects = Vec::new();
    let mut all_converged = true;
    let mut track = |l: &Holonomy| -> Result<Mat> {
        defects.push(symplectic_defect(l.map.matrix(), &form)?);
        all_converged &= l.converged;
        Ok(l.map.matrix().clone())
    };

    let lxy = track(&hol(x, y)?)?;
    let lyz = track(&hol(y, z)?)?;
    let lxz = track(&hol(x, z)?)?;
    let composition = (&lxz - &lyz * &lxy).norm();

    let mut integ = Integrator::new(field, susp, opts.h)?;
    let fx = susp.sys.apply(x, -1)?;
    let fy = susp.sys.apply(y, -1)?;
    let l_prev = track(&hol(&fx, &fy)?)?;
    let psi_y = cocycle_power(&mut integ, susp, &fy, 1)?;
    let psi_x = cocycle_power(&mut integ, susp, &fx, 1)?;
    let intertwining = (&psi_y * l_prev * symplectic_inverse(&psi_x) - &lxy).norm();

    let d = susp.sys.distance(x, y);
    let lipschitz_ratio = if d > 0.0 { (&lxy - Mat::identity(lxy.nrows(), lxy.ncols())).norm() / d } else { 0.0 };

    let mut conjugation: f64 = 0.0;
    for j in opts.j_range.0..=opts.j_range.1 {
        let yj = susp.sys.apply(y, j)?;
        let zj = susp.sys.apply(z, j)?;
        let l_j = track(&hol(&yj, &zj)?)?;
        let pz = cocycle_power(&mut integ, susp, z, j)?;
        let py = cocycle_power(&mut integ, susp, y, j)?;
        conjugation = conjugation.max((l_j - pz * &lyz * symplectic_inverse(&py)).norm());
    }
    let max_defect = defects.iter().cloned().fold(0.0, f64::max);
    Ok(AxiomReport {
        composition,
        intertwining,
        lipschitz_ratio,
        conjugation,
        conjugation_range: opts.j_range,
        max_defect,
        all_converged,
    })
}

/// Finitely many weighted projective atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveAtomMeasure {
    /// Unit vectors, sign-normalized so the largest-magnitude entry is positive.
    pub atoms: Vec<(Vec<f64>, f64)>,
}

fn normalize_direction(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lead = v.iter().cloned().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
    let s = if lead < 0.0 { -1.0 / norm } else { 1.0 / norm };
    v.iter().map(|x| x * s).collect()
}

/// `sin∠(u, v) = ‖u∧v‖/(‖u‖‖v‖)`; the wedge form avoids the cancellation in `1 − cos²`.
pub fn projective_distance(u: &[f64], v: &[f64]) -> f64 {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let mut w2 = 0.0;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            let w = u[i] * v[j] - u[j] * v[i];
            w2 += w * w;
        }
    }
    (w2 / (uu * vv)).sqrt().min(1.0)
}

impl ProjectiveAtomMeasure {
    pub fn new(directions: Vec<Vec<f64>>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Precondition("need at least one atom".into()));
        }
        for (i, u) in directions.iter().enumerate() {
            for v in &directions[i + 1..] {
                if projective_distance(u, v) < 1e-12 {
                    return Err(Error::Precondition("atoms must be projectively distinct".into()));
                }
            }
        }
        let w = 1.0 / directions.len() as f64;
        Ok(Self { atoms: directions.iter().map(|d| (normalize_direction(d), w)).collect() })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn directions(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.atoms.iter().map(|(d, _)| d)
    }

    /// Image under the projectivization of `m`.
    pub fn pushforward(&self, m: &Mat) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|(d, w)| {
                let v = m * nalgebra::DVector::from_column_slice(d);
                (normalize_direction(v.as_slice()), *w)
            })
            .collect();
        Self { atoms }
    }
}

/// Atoms at the eigendirections of `m`, which must have real simple spectrum.
pub fn atomic_measure_of(m: &Mat) -> Result<ProjectiveAtomMeasure> {
    let n = m.nrows();
    let eig = m.complex_eigenvalues();
    let scale = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut reals = Vec::with_capacity(n);
    for z in eig.iter() {
        if z.im.abs() > 1e-9 * scale.max(1.0) {
            return Err(Error::SpectrumDegeneracy(format!("complex eigenvalue {z}")));
        }
        reals.push(z.re);
    }
    reals.sort_by(|a, b| b.total_cmp(a));
    for w in reals.windows(2) {
        if (w[0] - w[1]).abs() <= 1e-8 * w[0].abs().max(w[1].abs()).max(1e-300) {
            return Err(Error::SpectrumDegeneracy(format!("repeated eigenvalue {}", w[0])));
        }
    }
    let mut dirs = Vec::with_capacity(n);
    for mu in reals {
        let shifted = m - Mat::identity(n, n) * mu;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Degeneracy("SVD failed".into()))?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
        dirs.push(v_t.row(imin).iter().cloned().collect::<Vec<f64>>());
    }
    ProjectiveAtomMeasure::new(dirs)
}

/// `Ψ^π(p)` along the periodic orbit.
pub fn return_map(field: &GeneratorField, susp: &Suspension, p: &PeriodicOrbit, h: f64) -> Result<SympMatrix> {
    let mut integ = Integrator::new(field, susp, h)?;
    Ok(SympMatrix::trusted(block_product(&mut integ, susp, &p.base_point(), p.period as usize)?.0))
}

/// Atomic invariant measure `m_p` at the eigendirections of `Ψ^π(p)`, uniform weights.
pub fn atomic_measure_at_periodic(
    field: &GeneratorField,
    susp: &Suspension,
    p: &PeriodicOrbit,
    h: f64,
) -> Result<ProjectiveAtomMeasure> {
    atomic_measure_of(return_map(field, susp, p, h)?.matrix())
}

/// Bottleneck matching distance between `via_* m` and `target` in the
/// projective metric `sin∠`.
pub fn pushforward_compare_matrix(m: &ProjectiveAtomMeasure, via: &Mat, target: &ProjectiveAtomMeasure) -> Result<f64> {
    if m.len() != target.len() {
        return Err(Error::AtomCount(m.len(), target.len()));
    }
    let pushed = m.pushforward(via);
    let k = m.len();
    let cost: Vec<Vec<f64>> = pushed
        .directions()
        .map(|u| target.directions().map(|v| projective_distance(u, v)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &cost, &mut best);
    Ok(best)
}

fn permute(perm: &mut Vec<usize>, i: usize, cost: &[Vec<f64>], best: &mut f64) {
    let k = perm.len();
    if i == k {
        let c = (0..k).map(|a| cost[a][perm[a]]).fold(0.0, f64::max);
        if c < *best {
            *best = c;
        }
        return;
    }
    for j in i..k {
        perm.swap(i, j);
        if cost[i][perm[i]] < *best {
            permute(perm, i + 1, cost, best);
        }
        perm.swap(i, j);
    }
}

pub fn pushforward_compare(m: &ProjectiveAtomMeasure, via: &Holonomy, target: &ProjectiveAtomMeasure) -> Result<f64> {
    pushforward_compare_matrix(m, via.map.matrix(), target)
}
