//! Pauli operators, measurement bases, and weighted Pauli-sum observables.

use std::fmt;

use crate::error::{Error, Result};

/// Single-qubit Pauli operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

/// Single-qubit measurement basis. The discriminants are the wire codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Basis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Basis> {
        match code {
            0 => Some(Basis::X),
            1 => Some(Basis::Y),
            2 => Some(Basis::Z),
            _ => None,
        }
    }

    pub fn as_pauli(self) -> Pauli {
        match self {
            Basis::X => Pauli::X,
            Basis::Y => Pauli::Y,
            Basis::Z => Pauli::Z,
        }
    }
}

/// Tensor product of single-qubit Paulis; entry `q` acts on qubit `q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PauliString(Vec<Pauli>);

impl PauliString {
    pub fn new(ops: Vec<Pauli>) -> Self {
        PauliString(ops)
    }

    pub fn identity(n_qubits: usize) -> Self {
        PauliString(vec![Pauli::I; n_qubits])
    }

    /// `op` on `qubit`, identity elsewhere.
    pub fn single(n_qubits: usize, qubit: usize, op: Pauli) -> Self {
        let mut ops = vec![Pauli::I; n_qubits];
        ops[qubit] = op;
        PauliString(ops)
    }

    pub fn n_qubits(&self) -> usize {
        self.0.len()
    }

    pub fn ops(&self) -> &[Pauli] {
        &self.0
    }

    /// Number of non-identity factors.
    pub fn locality(&self) -> usize {
        self.0.iter().filter(|p| **p != Pauli::I).count()
    }

    /// Bit masks `(x, z)` over amplitude indices: X and Y flip a bit, Z and Y
    /// contribute a sign.
    pub(crate) fn masks(&self) -> (usize, usize) {
        let mut x = 0;
        let mut z = 0;
        for (q, op) in self.0.iter().enumerate() {
            match op {
                Pauli::I => {}
                Pauli::X => x |= 1 << q,
                Pauli::Y => {
                    x |= 1 << q;
                    z |= 1 << q;
                }
                Pauli::Z => z |= 1 << q,
            }
        }
        (x, z)
    }

    pub(crate) fn y_count(&self) -> usize {
        self.0.iter().filter(|p| **p == Pauli::Y).count()
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.0 {
            let c = match op {
                Pauli::I => 'I',
                Pauli::X => 'X',
                Pauli::Y => 'Y',
                Pauli::Z => 'Z',
            };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// A real-weighted sum of Pauli strings, `O = Σ c_h P_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    n_qubits: usize,
    terms: Vec<(f64, PauliString)>,
}

impl Observable {
    pub fn new(n_qubits: usize, terms: Vec<(f64, PauliString)>) -> Result<Self> {
        for (c, p) in &terms {
            if !c.is_finite() {
                return Err(Error::usage(format!(
                    "non-finite coefficient {c} on term {p}"
                )));
            }
            if p.n_qubits() != n_qubits {
                return Err(Error::usage(format!(
                    "term {p} has {} qubits, observable has {n_qubits}",
                    p.n_qubits()
                )));
            }
        }
        Ok(Observable { n_qubits, terms })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn terms(&self) -> &[(f64, PauliString)] {
        &self.terms
    }
}
