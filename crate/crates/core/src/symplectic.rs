//! Linear-algebra substrate: the standard symplectic form `J`, membership
//! defects for the symplectic group and its Lie algebra, eigenvalue
//! symmetry checks and seeded sampling of Hamiltonian generators.
//!
//! Norms are Frobenius unless a function says otherwise.

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// The standard symplectic form on ℝ^{2ℓ}.
#[derive(Debug, Clone, PartialEq)]
pub struct SympForm {
    ell: usize,
    j: Mat,
}

impl SympForm {
    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn dim(&self) -> usize {
        2 * self.ell
    }

    pub fn matrix(&self) -> &Mat {
        &self.j
    }
}

/// Builds `J = [[0, -I], [I, 0]]`.
pub fn make_standard_form(ell: usize) -> Result<SympForm> {
    if ell == 0 {
        return Err(Error::InvalidDimension("ell must be at least 1".into()));
    }
    let n = 2 * ell;
    let mut j = Mat::zeros(n, n);
    for i in 0..ell {
        j[(i, i + ell)] = -1.0;
        j[(i + ell, i)] = 1.0;
    }
    Ok(SympForm { ell, j })
}

fn check_dims(a: &Mat, form: &SympForm) -> Result<()> {
    let n = form.dim();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::InvalidDimension(format!(
            "expected {n}x{n}, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// `‖AᵀJA − J‖_F`.
pub fn symplectic_defect(a: &Mat, form: &SympForm) -> Result<f64> {
    check_dims(a, form)?;
    let j = form.matrix();
    Ok((a.transpose() * j * a - j).norm())
}

/// `‖JH + HᵀJ‖_F`.
pub fn algebra_defect(h: &Mat, form: &SympForm) -> Result<f64> {
    check_dims(h, form)?;
    let j = form.matrix();
    Ok((j * h + h.transpose() * j).norm())
}

/// A value of the Hamiltonian generator field: an element of 𝔰𝔭(2ℓ, ℝ).
#[derive(Debug, Clone, PartialEq)]
pub struct HamGenerator {
    ell: usize,
    mat: Mat,
}

pub const ALGEBRA_TOL: f64 = 1e-12;

impl HamGenerator {
    /// Checked constructor (`algebra_defect ≤ 1e-12`).
    pub fn new(mat: Mat) -> Result<Self> {
        Self::with_tolerance(mat, ALGEBRA_TOL)
    }

    pub fn with_tolerance(mat: Mat, tol: f64) -> Result<Self> {
        if mat.nrows() != mat.ncols() || mat.nrows() % 2 != 0 || mat.nrows() == 0 {
            return Err(Error::InvalidDimension(format!(
                "generator must be 2l x 2l, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let ell = mat.nrows() / 2;
        let form = make_standard_form(ell)?;
        let d = algebra_defect(&mat, &form)?;
        if d > tol {
            return Err(Error::Precondition(format!(
                "matrix is not Hamiltonian: algebra defect {d:.3e} > {tol:.1e}"
            )));
        }
        Ok(Self { ell, mat })
    }

    /// `J·S` for symmetric `S` is Hamiltonian exactly in floating point.
    pub fn from_symmetric(sym: &Mat) -> Result<Self> {
        let ell = sym.nrows() / 2;
        let form = make_standard_form(ell)?;
        check_dims(sym, &form)?;
        let mat = form.matrix() * sym;
        Self::new(mat)
    }

    pub fn zero(ell: usize) -> Self {
        Self { ell, mat: Mat::zeros(2 * ell, 2 * ell) }
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn into_matrix(self) -> Mat {
        self.mat
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { ell: self.ell, mat: &self.mat * c }
    }
}

/// An element of the symplectic group Sp(2ℓ, ℝ).
#[derive(Debug, Clone, PartialEq)]
pub struct SympMatrix {
    ell: usize,
    mat: Mat,
}

pub const GROUP_TOL: f64 = 1e-10;

impl SympMatrix {
    /// Checked constructor with the default defect tolerance `1e-10`.
    pub fn new(mat: Mat) -> Result<Self> {
        Self::with_tolerance(mat, GROUP_TOL)
    }

    pub fn with_tolerance(mat: Mat, tol: f64) -> Result<Self> {
        if mat.nrows() != mat.ncols() || mat.nrows() % 2 != 0 || mat.nrows() == 0 {
            return Err(Error::InvalidDimension(format!(
                "symplectic matrix must be 2l x 2l, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let ell = mat.nrows() / 2;
        let form = make_standard_form(ell)?;
        let d = symplectic_defect(&mat, &form)?;
        if !(d <= tol) {
            return Err(Error::Precondition(format!(
                "matrix is not symplectic: defect {d:.3e} > {tol:.1e}"
            )));
        }
        let det = mat.determinant();
        if (det - 1.0).abs() > 1e-8 * mat.norm().powi(mat.nrows() as i32).max(1.0) {
            return Err(Error::Precondition(format!("determinant {det} is not 1")));
        }
        Ok(Self { ell, mat })
    }

    /// Wraps a matrix produced by a structure-preserving computation.
    /// The defect is not re-checked.
    pub(crate) fn trusted(mat: Mat) -> Self {
        Self { ell: mat.nrows() / 2, mat }
    }

    pub fn identity(ell: usize) -> Self {
        Self { ell, mat: Mat::identity(2 * ell, 2 * ell) }
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn into_matrix(self) -> Mat {
        self.mat
    }

    pub fn defect(&self) -> f64 {
        let form = make_standard_form(self.ell).expect("ell >= 1");
        symplectic_defect(&self.mat, &form).expect("dimensions match")
    }

    /// `A⁻¹ = J⁻¹AᵀJ = −J·Aᵀ·J`.
    pub fn inverse(&self) -> Self {
        Self { ell: self.ell, mat: symplectic_inverse(&self.mat) }
    }

    pub fn mul(&self, other: &SympMatrix) -> Self {
        Self { ell: self.ell, mat: &self.mat * &other.mat }
    }
}

/// `−J·Aᵀ·J`; equals `A⁻¹` whenever `A` is symplectic.
pub fn symplectic_inverse(a: &Mat) -> Mat {
    let n = a.nrows();
    let ell = n / 2;
    // (−J Aᵀ J)_{ik} with J = [[0,−I],[I,0]] is a signed block permutation of Aᵀ.
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let (ri, si) = if i < ell { (i + ell, 1.0) } else { (i - ell, -1.0) };
            let (ck, sk) = if k < ell { (k + ell, 1.0) } else { (k - ell, -1.0) };
            // (−J)_{i,ri} = si, J_{ck,k} = sk
            out[(i, k)] = si * sk * a[(ck, ri)];
        }
    }
    out
}

/// Largest singular value.
pub fn op_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &Mat) -> Mat {
    let n = a.nrows();
    let norm = a.norm();
    let mut squarings = 0u32;
    if norm > 0.25 {
        squarings = (norm / 0.25).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = Mat::identity(n, n);
    let mut sum = Mat::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Principal logarithm of a matrix close to the identity, via repeated
/// Denman–Beavers square roots followed by the `log(I + X)` series.
pub fn logm_near_identity(a: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let id = Mat::identity(n, n);
    let mut y = a.clone();
    let mut roots = 0;
    while (&y - &id).norm() > 0.05 {
        if roots > 40 {
            return Err(Error::Degeneracy("matrix logarithm did not converge".into()));
        }
        let mut z = id.clone();
        for _ in 0..60 {
            let yi = y
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Degeneracy("singular iterate in square root".into()))?;
            let zi = z
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Degeneracy("singular iterate in square root".into()))?;
            let yn = (&y + &zi) * 0.5;
            let zn = (&z + &yi) * 0.5;
            let done = (&yn - &y).norm() < 1e-15 * yn.norm();
            y = yn;
            z = zn;
            if done {
                break;
            }
        }
        roots += 1;
    }
    let x = &y - &id;
    let mut power = x.clone();
    let mut sum = Mat::zeros(n, n);
    for k in 1..=60 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sum += &power * (sign / k as f64);
        power = &power * &x;
        if power.norm() < 1e-18 {
            break;
        }
    }
    Ok(sum * 2f64.powi(roots))
}

/// Outcome of [`spectrum_symmetry_check`].
#[derive(Debug, Clone)]
pub struct SymmetryReport {
    pub holds: bool,
    pub eigenvalues: Vec<Complex<f64>>,
    /// Largest relative mismatch found by the reciprocal or conjugate pairing.
    pub max_mismatch: f64,
}

fn greedy_mismatch(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for x in a {
        let mut best = f64::INFINITY;
        let mut best_idx = None;
        for (k, y) in b.iter().enumerate() {
            if used[k] {
                continue;
            }
            let d = (x - y).norm() / x.norm().max(y.norm()).max(1.0);
            if d < best {
                best = d;
                best_idx = Some(k);
            }
        }
        if let Some(k) = best_idx {
            used[k] = true;
        }
        worst = worst.max(best);
    }
    worst
}

/// Checks that the eigenvalue multiset of `a` is closed under `σ ↦ 1/σ`
/// and `σ ↦ σ̄`, pairing by greedy nearest match with relative tolerance.
pub fn spectrum_symmetry_check(a: &SympMatrix, tol: f64) -> SymmetryReport {
    let eigenvalues: Vec<Complex<f64>> =
        a.matrix().clone().complex_eigenvalues().iter().copied().collect();
    let recips: Vec<Complex<f64>> = eigenvalues.iter().map(|z| z.inv()).collect();
    let conjs: Vec<Complex<f64>> = eigenvalues.iter().map(|z| z.conj()).collect();
    let m1 = greedy_mismatch(&eigenvalues, &recips);
    let m2 = greedy_mismatch(&eigenvalues, &conjs);
    let max_mismatch = m1.max(m2);
    SymmetryReport { holds: max_mismatch <= tol, eigenvalues, max_mismatch }
}

/// Seeded random generator `H = c·J·Sym(G)` with `G` standard normal and
/// `c` chosen so that `‖H‖_F = scale`.
pub fn random_generator(ell: usize, seed: u64, scale: f64) -> Result<HamGenerator> {
    if !(scale > 0.0) {
        return Err(Error::Precondition("scale must be positive".into()));
    }
    let form = make_standard_form(ell)?;
    let n = form.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Mat::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let mut sym = Mat::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            sym[(i, k)] = (g[(i, k)] + g[(k, i)]) / 2.0;
        }
    }
    let h = form.matrix() * &sym;
    let c = scale / h.norm();
    HamGenerator::new(h * c)
}

/// Seeded random symplectic matrix `exp(H)` for a random generator of the
/// given Frobenius norm.
pub fn random_symplectic(ell: usize, seed: u64, scale: f64) -> Result<SympMatrix> {
    let h = random_generator(ell, seed, scale)?;
    Ok(SympMatrix::trusted(expm(h.matrix())))
}

/// Rotation by `angle` in each of the ℓ canonical planes `(e_i, e_{i+ℓ})`.
pub fn canonical_rotation(ell: usize, angle: f64) -> SympMatrix {
    let n = 2 * ell;
    let mut m = Mat::zeros(n, n);
    let (s, c) = angle.sin_cos();
    for i in 0..ell {
        m[(i, i)] = c;
        m[(i, i + ell)] = -s;
        m[(i + ell, i)] = s;
        m[(i + ell, i + ell)] = c;
    }
    SympMatrix::trusted(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_form_small_cases() {
        let j1 = make_standard_form(1).unwrap();
        assert_eq!(j1.matrix(), &Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        let j2 = make_standard_form(2).unwrap();
        #[rustfmt::skip]
        let expected = Mat::from_row_slice(4, 4, &[
            0.0, 0.0, -1.0, 0.0,
            0.0, 0.0, 0.0, -1.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        ]);
        assert_eq!(j2.matrix(), &expected);
        assert!(matches!(make_standard_form(0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn j_identities_hold_exactly() {
        for ell in 1..=5 {
            let f = make_standard_form(ell).unwrap();
            let j = f.matrix();
            let n = f.dim();
            assert_eq!(j * j, -Mat::identity(n, n));
            assert_eq!(j.transpose(), -j.clone());
            assert_eq!(j.clone().try_inverse().unwrap(), j.transpose());
        }
    }

    #[test]
    fn defect_examples() {
        let f = make_standard_form(1).unwrap();
        assert_eq!(symplectic_defect(&Mat::identity(2, 2), &f).unwrap(), 0.0);
        let a = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        assert_eq!(symplectic_defect(&a, &f).unwrap(), 0.0);
        // AᵀJA = 4J so the defect is ‖3J‖_F = 3√2.
        let b = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 2.0]));
        assert_abs_diff_eq!(symplectic_defect(&b, &f).unwrap(), 3.0 * 2f64.sqrt(), epsilon = 1e-14);
        assert!(symplectic_defect(&Mat::identity(4, 4), &f).is_err());
    }

    #[test]
    fn algebra_defect_examples() {
        let f = make_standard_form(1).unwrap();
        assert_eq!(algebra_defect(&Mat::zeros(2, 2), &f).unwrap(), 0.0);
        for a in [-3.0, 0.1, 7.5] {
            let h = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![a, -a]));
            assert_eq!(algebra_defect(&h, &f).unwrap(), 0.0);
        }
        assert_abs_diff_eq!(
            algebra_defect(&Mat::identity(2, 2), &f).unwrap(),
            2.0 * 2f64.sqrt(),
            epsilon = 1e-14
        );
        assert!(algebra_defect(&Mat::zeros(3, 3), &f).is_err());
    }

    #[test]
    fn symmetry_check_examples() {
        let d = SympMatrix::new(Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0 / 3.0])))
            .unwrap();
        let r = spectrum_symmetry_check(&d, 1e-10);
        assert!(r.holds);
        let mut re: Vec<f64> = r.eigenvalues.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(re[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(re[1], 3.0, epsilon = 1e-14);

        let rot = canonical_rotation(1, 0.7);
        let r = spectrum_symmetry_check(&rot, 1e-10);
        assert!(r.holds);
        for z in &r.eigenvalues {
            assert_abs_diff_eq!(z.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(z.im.abs(), 0.7f64.sin(), epsilon = 1e-12);
        }

        let mut prod = SympMatrix::identity(2);
        for k in 0..10 {
            prod = prod.mul(&random_symplectic(2, 100 + k, 0.8).unwrap());
        }
        let r = spectrum_symmetry_check(&prod, 1e-6);
        assert!(r.holds, "mismatch {}", r.max_mismatch);

        let bad = SympMatrix::trusted(Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 0.5])));
        assert!(!spectrum_symmetry_check(&bad, 1e-6).holds);
    }

    #[test]
    fn random_generator_contract() {
        let a = random_generator(2, 7, 1.3).unwrap();
        let b = random_generator(2, 7, 1.3).unwrap();
        assert_eq!(a, b);
        let c = random_generator(2, 8, 1.3).unwrap();
        assert!((a.matrix() - c.matrix()).norm() > 0.0);
        assert_abs_diff_eq!(a.matrix().norm(), 1.3, epsilon = 1e-12);
        let f = make_standard_form(2).unwrap();
        assert!(algebra_defect(a.matrix(), &f).unwrap() <= 1e-13);
        assert!(random_generator(1, 0, 0.0).is_err());
    }

    #[test]
    fn random_generators_are_traceless_hamiltonian() {
        for ell in 1..=4 {
            let f = make_standard_form(ell).unwrap();
            for seed in 0..250u64 {
                let h = random_generator(ell, seed, 2.0).unwrap();
                assert!(algebra_defect(h.matrix(), &f).unwrap() <= 1e-13);
                assert!(h.matrix().trace().abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn symplectic_inverse_matches_inverse() {
        let a = random_symplectic(3, 11, 1.0).unwrap();
        let inv = a.matrix().clone().try_inverse().unwrap();
        assert!((symplectic_inverse(a.matrix()) - inv).norm() < 1e-10);
    }

    #[test]
    fn exp_log_roundtrip() {
        let h = random_generator(2, 3, 0.4).unwrap();
        let s = expm(h.matrix());
        let back = logm_near_identity(&s).unwrap();
        assert!((back - h.matrix()).norm() < 1e-12);
        let f = make_standard_form(2).unwrap();
        assert!(symplectic_defect(&s, &f).unwrap() < 1e-13);
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let d = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, -5.0, 0.5]));
        assert_abs_diff_eq!(op_norm(&d), 5.0, epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn products_nearly_closed(s1 in 0u64..10_000, s2 in 0u64..10_000, ell in 1usize..4) {
            let f = make_standard_form(ell).unwrap();
            let a = random_symplectic(ell, s1, 1.0).unwrap();
            let b = random_symplectic(ell, s2, 1.0).unwrap();
            let da = symplectic_defect(a.matrix(), &f).unwrap();
            let db = symplectic_defect(b.matrix(), &f).unwrap();
            let dab = symplectic_defect(&(a.matrix() * b.matrix()), &f).unwrap();
            proptest::prop_assert!(dab <= 10.0 * (da + db) + 1e-12);
        }
    }
}
