//! Spin-3/2 operator algebra and the strained zero-field Hamiltonians of the
//! ground and excited quartets.
//!
//! Basis ordering is `(+3/2, +1/2, -1/2, -3/2)` throughout. Hamiltonians are
//! stored as ordinary frequencies in MHz; the evolution layer supplies the 2π.

use nalgebra::{Matrix4, SMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Mat4 = Matrix4<C64>;
pub type Mat8 = SMatrix<C64, 8, 8>;

/// Projections `m_s` of the four basis states, in basis order.
pub const SPIN_PROJECTIONS: [f64; 4] = [1.5, 0.5, -0.5, -1.5];

/// Observable ground-state zero-field splitting (MHz).
pub const GROUND_SPLITTING_MHZ: f64 = 70.0;
/// Approximate excited-state zero-field splitting (MHz).
pub const EXCITED_SPLITTING_MHZ: f64 = 1000.0;

const SPIN: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpinOperators {
    pub sx: Mat4,
    pub sy: Mat4,
    pub sz: Mat4,
    pub s_plus: Mat4,
    pub s_minus: Mat4,
}

impl SpinOperators {
    pub fn new() -> Self {
        let mut sz = Mat4::zeros();
        let mut s_plus = Mat4::zeros();
        for (i, &m) in SPIN_PROJECTIONS.iter().enumerate() {
            sz[(i, i)] = C64::new(m, 0.0);
            // S+ |m> = sqrt(s(s+1) - m(m+1)) |m+1>, and |m+1> sits one row up.
            if i > 0 {
                let c = (SPIN * (SPIN + 1.0) - m * (m + 1.0)).sqrt();
                s_plus[(i - 1, i)] = C64::new(c, 0.0);
            }
        }
        let s_minus = s_plus.adjoint();
        let half = C64::new(0.5, 0.0);
        let sx = (s_plus + s_minus) * half;
        let sy = (s_plus - s_minus) * C64::new(0.0, -0.5);
        Self { sx, sy, sz, s_plus, s_minus }
    }

    /// `S₊S_z + S_zS₊`, the Δm = +1 strain operator.
    pub fn plus_z_anticommutator(&self) -> Mat4 {
        self.s_plus * self.sz + self.sz * self.s_plus
    }
}

impl Default for SpinOperators {
    fn default() -> Self {
        Self::new()
    }
}

pub fn build_spin_operators() -> SpinOperators {
    SpinOperators::new()
}

/// Phenomenological spin-strain couplings in their canonical ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StrainParams {
    /// Axial coupling Π_z (MHz).
    pub pi_z: f64,
    /// Δm = ±1 transverse coupling Π⁽¹⁾ (MHz).
    pub pi_1: f64,
    /// Δm = ±2 transverse coupling Π⁽²⁾ (MHz).
    pub pi_2: f64,
    /// In-plane orientation θ (rad).
    pub theta: f64,
}

impl StrainParams {
    pub fn new(pi_z: f64, pi_1: f64, pi_2: f64, theta: f64) -> Result<Self> {
        let s = Self { pi_z, pi_1, pi_2, theta };
        s.validate()?;
        Ok(s)
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn axial(pi_z: f64) -> Self {
        Self { pi_z, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pi_z.is_finite() {
            return Err(Error::invalid("pi_z", "must be finite"));
        }
        if !(self.pi_1.is_finite() && self.pi_1 >= 0.0) {
            return Err(Error::invalid("pi_1", "must be finite and >= 0"));
        }
        if !(self.pi_2.is_finite() && self.pi_2 >= 0.0) {
            return Err(Error::invalid("pi_2", "must be finite and >= 0"));
        }
        if !(self.theta >= 0.0 && self.theta < PI) {
            return Err(Error::invalid("theta", "must lie in [0, pi)"));
        }
        Ok(())
    }
}

/// Zero-field Hamiltonian of one spin quartet (ground or excited).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldHamiltonian {
    pub matrix: Mat4,
    /// Observable ±3/2 ↔ ±1/2 splitting of the unstrained manifold (MHz).
    pub d_zfs: f64,
}

impl ManifoldHamiltonian {
    pub fn unstrained(splitting: f64) -> Self {
        strain_hamiltonian(splitting, &StrainParams::zero()).expect("zero strain is always in range")
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (self.matrix - self.matrix.adjoint()).camax() <= tol
    }
}

/// Builds `(D' + Π_z) S_z² + [Π⁽¹⁾/2 (S₊S_z + S_zS₊) + h.c.] + [Π⁽²⁾/2 e^{-iθ} S₊² + h.c.]`.
///
/// `splitting` is the observable gap between the ±3/2 and ±1/2 doublets;
/// the S_z² prefactor is `D' = splitting / 2`, so pure axial strain shifts
/// the observable gap by `2 Π_z`.
pub fn strain_hamiltonian(splitting: f64, strain: &StrainParams) -> Result<ManifoldHamiltonian> {
    if !splitting.is_finite() {
        return Err(Error::invalid("splitting", "must be finite"));
    }
    strain.validate()?;
    let matrix = strain_matrix_two_phase(splitting, strain.pi_z, strain.pi_1, 0.0, strain.pi_2, strain.theta);
    Ok(ManifoldHamiltonian { matrix, d_zfs: splitting })
}

/// The strain Hamiltonian before the rotational gauge fixing: both transverse
/// terms carry their own phase. No range checks; signs and phases are free.
pub fn strain_matrix_two_phase(splitting: f64, pi_z: f64, pi_1: f64, theta_1: f64, pi_2: f64, theta_2: f64) -> Mat4 {
    let ops = SpinOperators::new();
    let d = splitting / 2.0;
    let sz2 = ops.sz * ops.sz;
    let mut h = sz2 * C64::new(d + pi_z, 0.0);
    let t1 = ops.plus_z_anticommutator() * (C64::from_polar(pi_1 / 2.0, -theta_1));
    h += t1 + t1.adjoint();
    let t2 = (ops.s_plus * ops.s_plus) * C64::from_polar(pi_2 / 2.0, -theta_2);
    h += t2 + t2.adjoint();
    h
}

fn sorted_eigen(matrix: &Mat4) -> ([f64; 4], Mat4) {
    let eig = SymmetricEigen::new(*matrix);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = [0.0; 4];
    let mut vectors = Mat4::zeros();
    for (k, &i) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[i];
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// ODMR resonance: gap between the means of the upper and lower Kramers pairs.
pub fn odmr_frequency(h: &ManifoldHamiltonian) -> f64 {
    let (e, _) = sorted_eigen(&h.matrix);
    ((e[2] + e[3]) - (e[0] + e[1])).abs() / 2.0
}

/// Which |m_s| doublet an eigenvector resembles most.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinCharacter {
    Half,
    ThreeHalf,
}

#[derive(Debug, Clone)]
pub struct Eigenstructure {
    /// Ascending eigenvalues (MHz).
    pub values: [f64; 4],
    /// Orthonormal eigenvectors as columns, matching `values`.
    pub vectors: Mat4,
    pub character: [SpinCharacter; 4],
    /// Population of each eigenvector on the ±3/2 basis states.
    pub three_half_weight: [f64; 4],
}

impl Eigenstructure {
    /// Mean energy of the eigenstates with the given character, if any.
    pub fn mean_energy(&self, which: SpinCharacter) -> Option<f64> {
        let picked: Vec<f64> = (0..4).filter(|&k| self.character[k] == which).map(|k| self.values[k]).collect();
        if picked.is_empty() {
            None
        } else {
            Some(picked.iter().sum::<f64>() / picked.len() as f64)
        }
    }
}

pub fn ground_eigenstates(h: &ManifoldHamiltonian) -> Eigenstructure {
    let (values, vectors) = sorted_eigen(&h.matrix);
    let mut character = [SpinCharacter::Half; 4];
    let mut three_half_weight = [0.0; 4];
    for k in 0..4 {
        let col = vectors.column(k);
        let w32 = col[0].norm_sqr() + col[3].norm_sqr();
        let w12 = col[1].norm_sqr() + col[2].norm_sqr();
        three_half_weight[k] = w32;
        // ties go to ±1/2
        character[k] = if w32 > w12 { SpinCharacter::ThreeHalf } else { SpinCharacter::Half };
    }
    Eigenstructure { values, vectors, character, three_half_weight }
}

/// Spin-conserving optical transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    /// g,±1/2 ↔ e,±1/2
    A1,
    /// g,±3/2 ↔ e,±3/2
    A2,
}

impl Transition {
    /// Basis indices (within a quartet) addressed by this transition.
    pub fn sublevels(self) -> [usize; 2] {
        match self {
            Transition::A1 => [1, 2],
            Transition::A2 => [0, 3],
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Transition::A1 => Transition::A2,
            Transition::A2 => Transition::A1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transition::A1 => "a1",
            Transition::A2 => "a2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RotatingFrameHamiltonian {
    /// Ground block in rows/cols 0..4, excited block in 4..8 (MHz).
    pub matrix: Mat8,
    pub detuning: f64,
    pub rabi: f64,
    pub target_transition: Transition,
}

/// Single-laser rotating-frame Hamiltonian
/// `|e><e| ⊗ (H_e + δ 1) + |g><g| ⊗ H_g + Ω/2 (|g><e| ⊗ P + h.c.)`, where `P`
/// projects onto the sublevels of the target transition.
pub fn rotating_frame(
    h_g: &ManifoldHamiltonian,
    h_e: &ManifoldHamiltonian,
    detuning: f64,
    rabi: f64,
    target: Transition,
) -> Result<RotatingFrameHamiltonian> {
    if !(rabi.is_finite() && rabi >= 0.0) {
        return Err(Error::invalid("rabi", "must be finite and >= 0"));
    }
    if !detuning.is_finite() {
        return Err(Error::invalid("detuning", "must be finite"));
    }
    let mut m = Mat8::zeros();
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(&h_g.matrix);
    let excited = h_e.matrix + Mat4::identity() * C64::new(detuning, 0.0);
    m.fixed_view_mut::<4, 4>(4, 4).copy_from(&excited);
    let c = C64::new(rabi / 2.0, 0.0);
    for i in target.sublevels() {
        m[(i, 4 + i)] = c;
        m[(4 + i, i)] = c;
    }
    Ok(RotatingFrameHamiltonian { matrix: m, detuning, rabi, target_transition: target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tab1() -> StrainParams {
        StrainParams::new(1.51, 3.78, 3.68, 0.92 * PI).unwrap()
    }

    #[test]
    fn sz_diagonal_and_ladder_coefficient() {
        let ops = build_spin_operators();
        let diag: Vec<f64> = (0..4).map(|i| ops.sz[(i, i)].re).collect();
        assert_eq!(diag, vec![1.5, 0.5, -0.5, -1.5]);
        assert_abs_diff_eq!(ops.s_plus[(0, 1)].re, 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(ops.s_plus[(1, 2)].re, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn angular_momentum_algebra() {
        let o = SpinOperators::new();
        let i = C64::new(0.0, 1.0);
        let comm = |a: &Mat4, b: &Mat4| a * b - b * a;
        assert!((comm(&o.sx, &o.sy) - o.sz * i).camax() < 1e-12);
        assert!((comm(&o.sy, &o.sz) - o.sx * i).camax() < 1e-12);
        assert!((comm(&o.sz, &o.sx) - o.sy * i).camax() < 1e-12);
        let casimir = o.sx * o.sx + o.sy * o.sy + o.sz * o.sz;
        assert!((casimir - Mat4::identity() * C64::new(3.75, 0.0)).camax() < 1e-12);
        assert!((o.s_plus - (o.sx + o.sy * i)).camax() == 0.0);
        assert!((o.s_minus - (o.sx - o.sy * i)).camax() < 1e-15);
    }

    #[test]
    fn unstrained_odmr_is_the_observable_splitting() {
        let h = strain_hamiltonian(70.0, &StrainParams::zero()).unwrap();
        assert_eq!(odmr_frequency(&h), 70.0);
        let flat = strain_hamiltonian(0.0, &StrainParams::zero()).unwrap();
        assert_eq!(odmr_frequency(&flat), 0.0);
    }

    #[test]
    fn axial_strain_shifts_by_twice_pi_z() {
        let h = strain_hamiltonian(70.0, &StrainParams::axial(1.51)).unwrap();
        assert_abs_diff_eq!(odmr_frequency(&h), 73.02, epsilon = 1e-12);
    }

    #[test]
    fn table_strain_odmr_matches_direct_diagonalization() {
        let h = strain_hamiltonian(70.0, &tab1()).unwrap();
        // independent route: characteristic values from nalgebra's eigenvalues
        let mut ev: Vec<f64> = h.matrix.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let gap = (ev[2] + ev[3] - ev[0] - ev[1]) / 2.0;
        assert_abs_diff_eq!(odmr_frequency(&h), gap, epsilon = 1e-10);
        assert!(odmr_frequency(&h) > 70.0);
        // frozen from a 4x4 diagonalization of the same matrix
        assert_abs_diff_eq!(odmr_frequency(&h), 75.272_106_38, epsilon = 1e-6);
    }

    #[test]
    fn rejects_out_of_range_strain() {
        assert!(StrainParams::new(0.0, -1.0, 0.0, 0.0).is_err());
        assert!(StrainParams::new(0.0, 0.0, -0.1, 0.0).is_err());
        assert!(StrainParams::new(0.0, 0.0, 0.0, PI).is_err());
        assert!(StrainParams::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
        let bad = StrainParams { pi_1: -2.0, ..StrainParams::zero() };
        assert!(strain_hamiltonian(70.0, &bad).is_err());
    }

    #[test]
    fn zero_strain_eigenvectors_are_basis_states() {
        let h = ManifoldHamiltonian::unstrained(70.0);
        let es = ground_eigenstates(&h);
        for k in 0..4 {
            let col = es.vectors.column(k);
            let max = col.iter().map(|c| c.norm()).fold(0.0, f64::max);
            assert_abs_diff_eq!(max, 1.0, epsilon = 1e-12);
        }
        assert_eq!(
            es.character,
            [SpinCharacter::Half, SpinCharacter::Half, SpinCharacter::ThreeHalf, SpinCharacter::ThreeHalf]
        );
    }

    #[test]
    fn delta_m_two_strain_mixes_opposite_signs() {
        let s = StrainParams::new(0.0, 0.0, 5.0, 0.0).unwrap();
        let es = ground_eigenstates(&strain_hamiltonian(70.0, &s).unwrap());
        // lowest eigenvector is ±1/2-like with a small ∓3/2 admixture
        let v = es.vectors.column(0);
        let on_plus_half = v[1].norm_sqr();
        let on_minus_half = v[2].norm_sqr();
        if on_plus_half > on_minus_half {
            assert!(v[3].norm_sqr() > 0.0 && v[0].norm_sqr() < 1e-20);
        } else {
            assert!(v[0].norm_sqr() > 0.0 && v[3].norm_sqr() < 1e-20);
        }
        assert!(es.three_half_weight[0] > 0.0 && es.three_half_weight[0] < 0.05);
    }

    #[test]
    fn table_strain_mixing_weights() {
        let es = ground_eigenstates(&strain_hamiltonian(70.0, &tab1()).unwrap());
        let ortho = es.vectors.adjoint() * es.vectors;
        assert!((ortho - Mat4::identity()).camax() < 1e-12);
        // Kramers pairs share their mixing weight
        assert_abs_diff_eq!(es.three_half_weight[0], es.three_half_weight[1], epsilon = 1e-10);
        assert!(es.three_half_weight[0] > 0.005 && es.three_half_weight[0] < 0.03);
        assert_abs_diff_eq!(es.three_half_weight[0] + es.three_half_weight[2], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn rotating_frame_blocks() {
        let hg = strain_hamiltonian(70.0, &tab1()).unwrap();
        let he = ManifoldHamiltonian::unstrained(EXCITED_SPLITTING_MHZ);
        let rf = rotating_frame(&hg, &he, 3.0, 0.0, Transition::A1).unwrap();
        assert_eq!(rf.matrix.fixed_view::<4, 4>(0, 4).camax(), 0.0);
        let rf = rotating_frame(&hg, &he, 3.0, 4.0, Transition::A1).unwrap();
        assert!((rf.matrix - rf.matrix.adjoint()).camax() < 1e-12);
        assert_eq!(rf.matrix.fixed_view::<4, 4>(0, 0).into_owned(), hg.matrix);
        let exc = rf.matrix.fixed_view::<4, 4>(4, 4).into_owned();
        assert!((exc - he.matrix - Mat4::identity() * C64::new(3.0, 0.0)).camax() < 1e-12);
        assert_eq!(rf.matrix[(1, 5)], C64::new(2.0, 0.0));
        assert_eq!(rf.matrix[(2, 6)], C64::new(2.0, 0.0));
        assert_eq!(rf.matrix[(0, 4)], C64::new(0.0, 0.0));
        let a2 = rotating_frame(&hg, &he, 0.0, 4.0, Transition::A2).unwrap();
        assert_eq!(a2.matrix[(0, 4)], C64::new(2.0, 0.0));
        assert_eq!(a2.matrix[(3, 7)], C64::new(2.0, 0.0));
        assert!(rotating_frame(&hg, &he, 0.0, -1.0, Transition::A1).is_err());
    }

    fn z_rotation(phi: f64) -> Mat4 {
        Mat4::from_diagonal(&nalgebra::Vector4::from_fn(|i, _| C64::from_polar(1.0, -phi * SPIN_PROJECTIONS[i])))
    }

    proptest! {
        #[test]
        fn strain_hamiltonian_is_hermitian(
            pz in -20.0..20.0f64, p1 in 0.0..20.0f64, p2 in 0.0..20.0f64, th in 0.0..3.1f64
        ) {
            let h = strain_hamiltonian(70.0, &StrainParams::new(pz, p1, p2, th).unwrap()).unwrap();
            prop_assert!(h.is_hermitian(1e-12));
        }

        #[test]
        fn odmr_is_basis_independent(
            p1 in 0.0..10.0f64, p2 in 0.0..10.0f64, th in 0.0..3.1f64, phi in -3.0..3.0f64
        ) {
            let h = strain_hamiltonian(70.0, &StrainParams::new(0.7, p1, p2, th).unwrap()).unwrap();
            let u = z_rotation(phi) * strain_matrix_two_phase(0.0, 0.0, 1.0, 0.3, 1.0, 0.0)
                .map(|c| c * C64::new(0.0, 0.2)).exp();
            let rotated = ManifoldHamiltonian { matrix: u * h.matrix * u.adjoint(), d_zfs: 70.0 };
            prop_assert!((odmr_frequency(&h) - odmr_frequency(&rotated)).abs() < 1e-9);
        }
    }
}
