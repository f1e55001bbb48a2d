//! Dense statevector simulation of the server circuit.
//!
//! Qubit 0 is the least-significant bit of the amplitude index. Global phase
//! is unconstrained. Measurement bases are reached with fixed rotations:
//! X uses H, Y uses S† followed by H, Z uses nothing.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pauli::{Basis, Observable, PauliString};

pub const MAX_QUBITS: usize = 24;

/// Parameter shift used for every rotation; exact for Pauli/2 generators.
pub const PARAMETER_SHIFT: f64 = FRAC_PI_2;

type Mat2 = [[Complex64; 2]; 2];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

fn ry_matrix(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [
        [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
        [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
    ]
}

fn hadamard() -> Mat2 {
    let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
    [[h, h], [h, -h]]
}

/// H·S†: maps the +1/−1 eigenstates of Y onto |0⟩/|1⟩.
fn y_to_z() -> Mat2 {
    let h = FRAC_1_SQRT_2;
    [
        [Complex64::new(h, 0.0), Complex64::new(0.0, -h)],
        [Complex64::new(h, 0.0), Complex64::new(0.0, h)],
    ]
}

/// Normalized pure state of `n_qubits` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

/// |0…0⟩ on `n_qubits` qubits.
pub fn zero_state(n_qubits: usize) -> Result<Statevector> {
    Statevector::zero(n_qubits)
}

/// Tr[ρ O] for the pure state `state`.
pub fn exact_expectation(state: &Statevector, observable: &Observable) -> Result<f64> {
    state.expectation(observable)
}

impl Statevector {
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&n_qubits) {
            return Err(Error::config(format!(
                "n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}"
            )));
        }
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[0] = ONE;
        Ok(Statevector { n_qubits, amps })
    }

    /// Wraps explicit amplitudes; the length must be a power of two and the
    /// norm within 1e-8 of one.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let len = amps.len();
        if len < 2 || !len.is_power_of_two() || len > 1 << MAX_QUBITS {
            return Err(Error::usage(format!(
                "amplitude count {len} is not 2^n for n in [1, {MAX_QUBITS}]"
            )));
        }
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(Error::usage(format!(
                "state is not normalized (norm² = {norm})"
            )));
        }
        Ok(Statevector {
            n_qubits: len.trailing_zeros() as usize,
            amps,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    fn apply_matrix(&mut self, q: usize, m: &Mat2) {
        let stride = 1usize << q;
        for base in (0..self.amps.len()).step_by(stride << 1) {
            for i in base..base + stride {
                let a0 = self.amps[i];
                let a1 = self.amps[i + stride];
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[i + stride] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    fn apply_rz(&mut self, q: usize, theta: f64) {
        let (s, c) = (theta / 2.0).sin_cos();
        let phase0 = Complex64::new(c, -s);
        let phase1 = Complex64::new(c, s);
        for (i, a) in self.amps.iter_mut().enumerate() {
            *a *= if (i >> q) & 1 == 0 { phase0 } else { phase1 };
        }
    }

    fn apply_cz(&mut self, a: usize, b: usize) {
        let mask = (1usize << a) | (1usize << b);
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }

    /// Applies `gate` in place. Parameterized gates need `angle`; the others
    /// must not get one.
    pub fn apply_gate(&mut self, gate: &Gate, angle: Option<f64>) -> Result<()> {
        gate.validate(self.n_qubits)?;
        match (gate.kind.is_parameterized(), angle) {
            (true, None) => return Err(Error::usage(format!("{:?} needs an angle", gate.kind))),
            (false, Some(_)) => {
                return Err(Error::usage(format!("{:?} takes no angle", gate.kind)))
            }
            (true, Some(a)) if !a.is_finite() => {
                return Err(Error::usage(format!("non-finite angle {a}")))
            }
            _ => {}
        }
        let t = &gate.targets;
        match gate.kind {
            GateKind::Ry => self.apply_matrix(t[0], &ry_matrix(angle.unwrap_or_default())),
            GateKind::Rz => self.apply_rz(t[0], angle.unwrap_or_default()),
            GateKind::Cz => self.apply_cz(t[0], t[1]),
            GateKind::H | GateKind::BasisRotX => self.apply_matrix(t[0], &hadamard()),
            GateKind::BasisRotY => self.apply_matrix(t[0], &y_to_z()),
        }
        Ok(())
    }

    /// Rotates qubit `q` so that a computational-basis measurement reads out `basis`.
    pub(crate) fn rotate_qubit_to(&mut self, q: usize, basis: Basis) {
        match basis {
            Basis::X => self.apply_matrix(q, &hadamard()),
            Basis::Y => self.apply_matrix(q, &y_to_z()),
            Basis::Z => {}
        }
    }

    /// ⟨ψ|P|ψ⟩ for a Pauli string.
    pub fn pauli_expectation(&self, pauli: &PauliString) -> Result<f64> {
        if pauli.n_qubits() != self.n_qubits {
            return Err(Error::usage(format!(
                "Pauli string on {} qubits, state has {}",
                pauli.n_qubits(),
                self.n_qubits
            )));
        }
        let (xmask, zmask) = pauli.masks();
        // P|i⟩ = i^{#Y} (−1)^{popcount(i & zmask)} |i ⊕ xmask⟩
        let mut acc = ZERO;
        for (i, a) in self.amps.iter().enumerate() {
            let term = self.amps[i ^ xmask].conj() * a;
            if (i & zmask).count_ones() % 2 == 0 {
                acc += term;
            } else {
                acc -= term;
            }
        }
        let phase = match pauli.y_count() % 4 {
            0 => ONE,
            1 => Complex64::new(0.0, 1.0),
            2 => -ONE,
            _ => Complex64::new(0.0, -1.0),
        };
        Ok((phase * acc).re)
    }

    pub fn expectation(&self, observable: &Observable) -> Result<f64> {
        if observable.n_qubits() != self.n_qubits {
            return Err(Error::usage(format!(
                "observable on {} qubits, state has {}",
                observable.n_qubits(),
                self.n_qubits
            )));
        }
        let mut total = 0.0;
        for (c, p) in observable.terms() {
            total += c * self.pauli_expectation(p)?;
        }
        Ok(total)
    }

    /// Running sum of Born probabilities in amplitude index order.
    pub(crate) fn cumulative_probabilities(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.amps
            .iter()
            .map(|a| {
                acc += a.norm_sqr();
                acc
            })
            .collect()
    }

    pub(crate) fn index_to_bits(&self, index: usize) -> Vec<u8> {
        (0..self.n_qubits)
            .map(|q| ((index >> q) & 1) as u8)
            .collect()
    }

    /// Rotates each qubit into its basis and samples one outcome bit per qubit.
    /// Draws exactly one uniform from `rng`; `self` is left untouched.
    pub fn measure_in_bases<R: Rng + ?Sized>(
        &self,
        bases: &[Basis],
        rng: &mut R,
    ) -> Result<Vec<u8>> {
        if bases.len() != self.n_qubits {
            return Err(Error::usage(format!(
                "{} bases for {} qubits",
                bases.len(),
                self.n_qubits
            )));
        }
        let mut rotated = self.clone();
        for (q, b) in bases.iter().enumerate() {
            rotated.rotate_qubit_to(q, *b);
        }
        let u: f64 = rng.random();
        let cdf = rotated.cumulative_probabilities();
        Ok(rotated.index_to_bits(sample_cdf(&cdf, u)))
    }
}

/// Inverse-CDF draw: the first index whose running sum exceeds `u`. Falls back
/// to the last index with non-zero mass when rounding leaves `u` above the total.
pub(crate) fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    let i = cdf.partition_point(|&c| c <= u);
    if i < cdf.len() {
        return i;
    }
    let total = cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c < total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Ry,
    Rz,
    Cz,
    H,
    BasisRotX,
    BasisRotY,
}

impl GateKind {
    pub fn is_parameterized(self) -> bool {
        matches!(self, GateKind::Ry | GateKind::Rz)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub kind: GateKind,
    pub targets: Vec<usize>,
    pub param_slot: Option<usize>,
}

impl Gate {
    pub fn ry(qubit: usize, slot: usize) -> Self {
        Gate {
            kind: GateKind::Ry,
            targets: vec![qubit],
            param_slot: Some(slot),
        }
    }

    pub fn rz(qubit: usize, slot: usize) -> Self {
        Gate {
            kind: GateKind::Rz,
            targets: vec![qubit],
            param_slot: Some(slot),
        }
    }

    pub fn cz(a: usize, b: usize) -> Self {
        Gate {
            kind: GateKind::Cz,
            targets: vec![a, b],
            param_slot: None,
        }
    }

    pub fn h(qubit: usize) -> Self {
        Gate {
            kind: GateKind::H,
            targets: vec![qubit],
            param_slot: None,
        }
    }

    /// Rotation that maps `basis` onto the computational basis (none for Z).
    pub fn basis_rotation(qubit: usize, basis: Basis) -> Option<Self> {
        let kind = match basis {
            Basis::X => GateKind::BasisRotX,
            Basis::Y => GateKind::BasisRotY,
            Basis::Z => return None,
        };
        Some(Gate {
            kind,
            targets: vec![qubit],
            param_slot: None,
        })
    }

    fn validate(&self, n_qubits: usize) -> Result<()> {
        let arity = if self.kind == GateKind::Cz { 2 } else { 1 };
        if self.targets.len() != arity {
            return Err(Error::usage(format!(
                "{:?} takes {arity} target(s), got {}",
                self.kind,
                self.targets.len()
            )));
        }
        if let Some(&q) = self.targets.iter().find(|&&q| q >= n_qubits) {
            return Err(Error::usage(format!(
                "target {q} out of range for {n_qubits} qubits"
            )));
        }
        if arity == 2 && self.targets[0] == self.targets[1] {
            return Err(Error::usage("CZ targets must be distinct"));
        }
        if self.kind.is_parameterized() != self.param_slot.is_some() {
            return Err(Error::usage(format!(
                "{:?} has inconsistent parameter slot {:?}",
                self.kind, self.param_slot
            )));
        }
        Ok(())
    }
}

/// A parameterized circuit V(θ) acting on |0…0⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct Ansatz {
    n_qubits: usize,
    layers: usize,
    gates: Vec<Gate>,
    n_params: usize,
}

impl Ansatz {
    /// Validates that every gate is well formed and every slot in
    /// `[0, n_params)` is used exactly once.
    pub fn new(n_qubits: usize, layers: usize, gates: Vec<Gate>) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&n_qubits) {
            return Err(Error::config(format!(
                "n_qubits must be in [1, {MAX_QUBITS}]"
            )));
        }
        let mut slots = Vec::new();
        for g in &gates {
            g.validate(n_qubits)?;
            if let Some(s) = g.param_slot {
                slots.push(s);
            }
        }
        slots.sort_unstable();
        if slots.iter().enumerate().any(|(i, &s)| i != s) {
            return Err(Error::usage("parameter slots must cover 0..p exactly once"));
        }
        Ok(Ansatz {
            n_qubits,
            layers,
            n_params: slots.len(),
            gates,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// V(θ)|0…0⟩.
    pub fn run(&self, theta: &[f64]) -> Result<Statevector> {
        if theta.len() != self.n_params {
            return Err(Error::usage(format!(
                "theta has length {}, ansatz has {} parameters",
                theta.len(),
                self.n_params
            )));
        }
        let mut state = Statevector::zero(self.n_qubits)?;
        for g in &self.gates {
            state.apply_gate(g, g.param_slot.map(|s| theta[s]))?;
        }
        Ok(state)
    }
}

/// Hardware-efficient ansatz: each layer applies RY then RZ on every qubit,
/// then CZ on ring neighbours (q, q+1 mod n). A two-qubit ring has one pair.
///
/// Slot layout: layer `l`, qubit `q` uses `2nl + q` for RY and `2nl + n + q` for RZ.
pub fn build_hea(n_qubits: usize, layers: usize) -> Result<Ansatz> {
    if n_qubits < 2 || layers < 1 {
        return Err(Error::config(format!(
            "hardware-efficient ansatz needs n_qubits >= 2 and layers >= 1, got {n_qubits}, {layers}"
        )));
    }
    let n = n_qubits;
    let mut gates = Vec::with_capacity(layers * 3 * n);
    for l in 0..layers {
        let base = 2 * n * l;
        gates.extend((0..n).map(|q| Gate::ry(q, base + q)));
        gates.extend((0..n).map(|q| Gate::rz(q, base + n + q)));
        let pairs = if n == 2 { 1 } else { n };
        gates.extend((0..pairs).map(|q| Gate::cz(q, (q + 1) % n)));
    }
    Ansatz::new(n, layers, gates)
}

/// Parameter vectors in canonical shadow-set order:
/// `[θ, θ+e₁π/2, θ−e₁π/2, …, θ+e_pπ/2, θ−e_pπ/2]`.
pub fn shift_schedule(theta: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * theta.len() + 1);
    out.push(theta.to_vec());
    for k in 0..theta.len() {
        for sign in [1.0, -1.0] {
            let mut t = theta.to_vec();
            t[k] += sign * PARAMETER_SHIFT;
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pauli::Pauli;

    fn z_obs(n: usize, q: usize) -> Observable {
        Observable::new(n, vec![(1.0, PauliString::single(n, q, Pauli::Z))]).unwrap()
    }

    fn one_qubit_ry() -> Ansatz {
        Ansatz::new(1, 1, vec![Gate::ry(0, 0)]).unwrap()
    }

    #[test]
    fn zero_state_layout() {
        let s = zero_state(1).unwrap();
        assert_eq!(s.amplitudes(), &[ONE, ZERO]);
        let s = zero_state(2).unwrap();
        assert_eq!(s.amplitudes(), &[ONE, ZERO, ZERO, ZERO]);
        let s = zero_state(8).unwrap();
        assert_eq!(s.amplitudes().len(), 256);
        assert_eq!(s.amplitudes()[0], ONE);
        assert!(matches!(zero_state(0), Err(Error::Config(_))));
        assert!(matches!(zero_state(25), Err(Error::Config(_))));
    }

    #[test]
    fn single_gate_actions() {
        let mut s = zero_state(1).unwrap();
        s.apply_gate(&Gate::ry(0, 0), Some(PI)).unwrap();
        assert_abs_diff_eq!(s.amplitudes()[0].norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.amplitudes()[1].norm(), 1.0, epsilon = 1e-12);

        let mut s = zero_state(2).unwrap();
        s.apply_gate(&Gate::ry(0, 0), Some(PI)).unwrap();
        s.apply_gate(&Gate::ry(1, 1), Some(PI)).unwrap();
        let before = s.amplitudes()[3];
        s.apply_gate(&Gate::cz(0, 1), None).unwrap();
        assert_abs_diff_eq!((s.amplitudes()[3] + before).norm(), 0.0, epsilon = 1e-12);

        let mut s = zero_state(1).unwrap();
        s.apply_gate(&Gate::rz(0, 0), Some(0.7)).unwrap();
        assert_abs_diff_eq!(s.amplitudes()[0].norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.expectation(&z_obs(1, 0)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gate_argument_errors() {
        let mut s = zero_state(2).unwrap();
        assert!(matches!(
            s.apply_gate(&Gate::ry(2, 0), Some(0.1)),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            s.apply_gate(&Gate::ry(0, 0), None),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            s.apply_gate(&Gate::h(0), Some(0.3)),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            s.apply_gate(&Gate::cz(1, 1), None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn hea_parameter_counts() {
        assert_eq!(build_hea(8, 5).unwrap().n_params(), 80);
        assert_eq!(build_hea(3, 2).unwrap().n_params(), 12);
        let a = build_hea(2, 1).unwrap();
        assert_eq!(a.n_params(), 4);
        let kinds: Vec<_> = a
            .gates()
            .iter()
            .map(|g| (g.kind, g.targets.clone()))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (GateKind::Ry, vec![0]),
                (GateKind::Ry, vec![1]),
                (GateKind::Rz, vec![0]),
                (GateKind::Rz, vec![1]),
                (GateKind::Cz, vec![0, 1]),
            ]
        );
        assert!(build_hea(1, 5).is_err());
        assert!(build_hea(4, 0).is_err());
    }

    #[test]
    fn ansatz_rejects_duplicate_slots() {
        let r = Ansatz::new(2, 1, vec![Gate::ry(0, 0), Gate::ry(1, 0)]);
        assert!(r.is_err());
        let r = Ansatz::new(2, 1, vec![Gate::ry(0, 1)]);
        assert!(r.is_err());
    }

    #[test]
    fn run_ansatz_examples() {
        let a = build_hea(8, 5).unwrap();
        let s = a.run(&vec![0.0; 80]).unwrap();
        for q in 0..8 {
            assert_abs_diff_eq!(s.expectation(&z_obs(8, q)).unwrap(), 1.0, epsilon = 1e-12);
        }
        let s = one_qubit_ry().run(&[PI / 2.0]).unwrap();
        assert_abs_diff_eq!(s.expectation(&z_obs(1, 0)).unwrap(), 0.0, epsilon = 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta: Vec<f64> = (0..80).map(|_| rng.random_range(-PI..PI)).collect();
        let s = a.run(&theta).unwrap();
        assert_abs_diff_eq!(s.norm_sqr(), 1.0, epsilon = 1e-10);
        assert_eq!(s, a.run(&theta).unwrap());
        assert!(matches!(a.run(&theta[..79]), Err(Error::Usage(_))));
    }

    #[test]
    fn expectation_examples() {
        let s = zero_state(8).unwrap();
        let all_z = Observable::new(
            8,
            (0..8)
                .map(|q| (1.0, PauliString::single(8, q, Pauli::Z)))
                .collect(),
        )
        .unwrap();
        assert_abs_diff_eq!(exact_expectation(&s, &all_z).unwrap(), 8.0, epsilon = 1e-12);
        let x1 = Observable::new(8, vec![(1.0, PauliString::single(8, 0, Pauli::X))]).unwrap();
        assert_abs_diff_eq!(exact_expectation(&s, &x1).unwrap(), 0.0, epsilon = 1e-12);
        let s = one_qubit_ry().run(&[PI / 3.0]).unwrap();
        assert_abs_diff_eq!(
            exact_expectation(&s, &z_obs(1, 0)).unwrap(),
            0.5,
            epsilon = 1e-10
        );
        assert!(exact_expectation(&zero_state(2).unwrap(), &z_obs(1, 0)).is_err());
    }

    #[test]
    fn pauli_expectation_matches_dense_matrix() {
        // dense oracle: build P as a matrix via Kronecker products
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = build_hea(3, 2).unwrap();
        let theta: Vec<f64> = (0..a.n_params())
            .map(|_| rng.random_range(-PI..PI))
            .collect();
        let s = a.run(&theta).unwrap();
        let ops = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
        for code in 0..64 {
            let p = PauliString::new((0..3).map(|q| ops[(code >> (2 * q)) & 3]).collect());
            let dense = dense_pauli(&p);
            let psi = s.amplitudes();
            let mut v = ZERO;
            for r in 0..8 {
                for c in 0..8 {
                    v += psi[r].conj() * dense[r][c] * psi[c];
                }
            }
            assert_abs_diff_eq!(s.pauli_expectation(&p).unwrap(), v.re, epsilon = 1e-12);
            assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-12);
        }
    }

    fn dense_pauli(p: &PauliString) -> Vec<Vec<Complex64>> {
        let i = Complex64::new(0.0, 1.0);
        let single = |op: Pauli| -> Mat2 {
            match op {
                Pauli::I => [[ONE, ZERO], [ZERO, ONE]],
                Pauli::X => [[ZERO, ONE], [ONE, ZERO]],
                Pauli::Y => [[ZERO, -i], [i, ZERO]],
                Pauli::Z => [[ONE, ZERO], [ZERO, -ONE]],
            }
        };
        let n = p.n_qubits();
        let dim = 1 << n;
        let mut m = vec![vec![ZERO; dim]; dim];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                let mut v = ONE;
                for (q, op) in p.ops().iter().enumerate() {
                    v *= single(*op)[(r >> q) & 1][(c >> q) & 1];
                }
                *cell = v;
            }
        }
        m
    }

    #[test]
    fn basis_rotation_reads_eigenstates() {
        // eigenstates of X, Y, Z with eigenvalue ±1 → outcome (1 ∓ 1)/2
        let h = FRAC_1_SQRT_2;
        let i = Complex64::new(0.0, h);
        let r = Complex64::new(h, 0.0);
        let cases = [
            (Basis::X, [r, r], 0u8),
            (Basis::X, [r, -r], 1),
            (Basis::Y, [r, i], 0),
            (Basis::Y, [r, -i], 1),
            (Basis::Z, [ONE, ZERO], 0),
            (Basis::Z, [ZERO, ONE], 1),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (basis, amps, expected) in cases {
            let s = Statevector::from_amplitudes(amps.to_vec()).unwrap();
            for _ in 0..200 {
                assert_eq!(
                    s.measure_in_bases(&[basis], &mut rng).unwrap(),
                    vec![expected],
                    "{basis:?}"
                );
            }
        }
    }

    #[test]
    fn measurement_frequencies() {
        let s = zero_state(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| s.measure_in_bases(&[Basis::X], &mut rng).unwrap()[0] == 0)
            .count();
        let f = zeros as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.01, "frequency {f}");
    }

    #[test]
    fn shift_schedule_order() {
        let s = shift_schedule(&[0.0, 1.0]);
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], vec![0.0, 1.0]);
        assert_eq!(s[1], vec![FRAC_PI_2, 1.0]);
        assert_eq!(s[2], vec![-FRAC_PI_2, 1.0]);
        assert_eq!(s[3], vec![0.0, 1.0 + FRAC_PI_2]);
        assert_eq!(s[4], vec![0.0, 1.0 - FRAC_PI_2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gate_sequences_preserve_norm(ops in proptest::collection::vec((0u8..6, 0usize..4, 0usize..4, -7.0f64..7.0), 1..60)) {
            let mut s = zero_state(4).unwrap();
            for (kind, a, b, angle) in ops {
                let gate = match kind {
                    0 => Gate::ry(a, 0),
                    1 => Gate::rz(a, 0),
                    2 if a != b => Gate::cz(a, b),
                    3 => Gate::h(a),
                    4 => Gate::basis_rotation(a, Basis::X).unwrap(),
                    _ => Gate::basis_rotation(a, Basis::Y).unwrap(),
                };
                let angle = gate.kind.is_parameterized().then_some(angle);
                s.apply_gate(&gate, angle).unwrap();
                prop_assert!((s.norm_sqr() - 1.0).abs() <= 1e-10);
            }
        }

        #[test]
        fn expectation_is_linear(seed in 0u64..1000, c1 in -3.0f64..3.0, c2 in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = build_hea(3, 1).unwrap();
            let theta: Vec<f64> = (0..a.n_params()).map(|_| rng.random_range(-PI..PI)).collect();
            let s = a.run(&theta).unwrap();
            let p1 = PauliString::new(vec![Pauli::X, Pauli::Z, Pauli::I]);
            let p2 = PauliString::new(vec![Pauli::Y, Pauli::Y, Pauli::Z]);
            let combined = Observable::new(3, vec![(c1, p1.clone()), (c2, p2.clone())]).unwrap();
            let separate = c1 * s.pauli_expectation(&p1).unwrap() + c2 * s.pauli_expectation(&p2).unwrap();
            prop_assert!((s.expectation(&combined).unwrap() - separate).abs() <= 1e-10);
        }
    }
}
