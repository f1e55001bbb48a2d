//! Classical shadows from random Pauli measurements.
//!
//! A snapshot is stored as one `(basis, outcome)` pair per qubit. For random
//! Pauli measurements the inverted channel factorizes per qubit as
//! `3 W†|b⟩⟨b|W − I`, so the estimate of a Pauli string is a product of
//! per-qubit factors and no dense matrix is ever formed.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pauli::{Basis, Observable, Pauli, PauliString};
use crate::rng::{self, Stream};
use crate::sim::{sample_cdf, shift_schedule, Ansatz, Statevector};

/// One randomized measurement: a basis and an outcome bit per qubit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub bases: Vec<Basis>,
    pub outcomes: Vec<u8>,
}

impl Snapshot {
    pub fn new(bases: Vec<Basis>, outcomes: Vec<u8>) -> Result<Self> {
        if bases.len() != outcomes.len() {
            return Err(Error::usage(format!(
                "{} bases but {} outcomes",
                bases.len(),
                outcomes.len()
            )));
        }
        if outcomes.iter().any(|&b| b > 1) {
            return Err(Error::usage("outcomes must be bits"));
        }
        Ok(Snapshot { bases, outcomes })
    }

    pub fn n_qubits(&self) -> usize {
        self.bases.len()
    }
}

/// Packs a basis/outcome pair into the wire byte `2·basis + outcome`.
pub fn pack_code(basis: Basis, outcome: u8) -> u8 {
    2 * basis.code() + outcome
}

pub fn unpack_code(code: u8) -> Option<(Basis, u8)> {
    Basis::from_code(code / 2).map(|b| (b, code % 2))
}

/// Ordered snapshots of one state, stored row-major as packed codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicalShadow {
    n_qubits: usize,
    codes: Vec<u8>,
}

impl ClassicalShadow {
    pub fn from_snapshots(n_qubits: usize, snapshots: &[Snapshot]) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::usage("a shadow needs at least one snapshot"));
        }
        let mut codes = Vec::with_capacity(n_qubits * snapshots.len());
        for s in snapshots {
            if s.n_qubits() != n_qubits {
                return Err(Error::usage(format!(
                    "snapshot on {} qubits in a {n_qubits}-qubit shadow",
                    s.n_qubits()
                )));
            }
            codes.extend(
                s.bases
                    .iter()
                    .zip(&s.outcomes)
                    .map(|(b, o)| pack_code(*b, *o)),
            );
        }
        Ok(ClassicalShadow { n_qubits, codes })
    }

    /// Builds a shadow from packed codes, rejecting illegal bytes.
    pub fn from_codes(n_qubits: usize, codes: Vec<u8>) -> Result<Self> {
        if n_qubits == 0 || codes.is_empty() || !codes.len().is_multiple_of(n_qubits) {
            return Err(Error::usage(format!(
                "{} codes do not form whole {n_qubits}-qubit snapshots",
                codes.len()
            )));
        }
        if let Some(pos) = codes.iter().position(|&c| c > 5) {
            return Err(Error::usage(format!(
                "illegal snapshot byte {} at {pos}",
                codes[pos]
            )));
        }
        Ok(ClassicalShadow { n_qubits, codes })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Number of snapshots M.
    pub fn len(&self) -> usize {
        self.codes.len() / self.n_qubits
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.codes[i * self.n_qubits..(i + 1) * self.n_qubits]
    }

    pub fn snapshot(&self, i: usize) -> Snapshot {
        let (bases, outcomes) = self
            .row(i)
            .iter()
            .map(|&c| unpack_code(c).expect("codes validated on construction"))
            .unzip();
        Snapshot { bases, outcomes }
    }

    pub fn snapshots(&self) -> impl Iterator<Item = Snapshot> + '_ {
        (0..self.len()).map(|i| self.snapshot(i))
    }
}

/// Tr[P · (3W†|b⟩⟨b|W − I)] for one qubit.
pub fn snapshot_pauli_factor(basis: Basis, outcome: u8, pauli: Pauli) -> f64 {
    if pauli == Pauli::I {
        1.0
    } else if pauli == basis.as_pauli() {
        if outcome == 0 {
            3.0
        } else {
            -3.0
        }
    } else {
        0.0
    }
}

fn row_estimate(row: &[u8], ops: &[Pauli]) -> f64 {
    let mut v = 1.0;
    for (&code, &op) in row.iter().zip(ops) {
        if op == Pauli::I {
            continue;
        }
        let basis = code / 2;
        let expected = match op {
            Pauli::X => 0,
            Pauli::Y => 1,
            _ => 2,
        };
        if basis != expected {
            return 0.0;
        }
        v *= if code & 1 == 0 { 3.0 } else { -3.0 };
    }
    v
}

/// Single-snapshot estimate of ⟨P⟩; takes values in {0, ±3^b}.
pub fn snapshot_estimate(snapshot: &Snapshot, pauli: &PauliString) -> Result<f64> {
    if snapshot.n_qubits() != pauli.n_qubits() {
        return Err(Error::usage(format!(
            "snapshot on {} qubits, Pauli string on {}",
            snapshot.n_qubits(),
            pauli.n_qubits()
        )));
    }
    Ok(snapshot
        .bases
        .iter()
        .zip(&snapshot.outcomes)
        .zip(pauli.ops())
        .map(|((b, o), p)| snapshot_pauli_factor(*b, *o, *p))
        .product())
}

/// Median-of-means layout: `total = chunk_len × chunks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomConfig {
    total: usize,
    chunks: usize,
}

impl MomConfig {
    pub fn new(total: usize, chunks: usize) -> Result<Self> {
        if total == 0 || chunks == 0 || !total.is_multiple_of(chunks) {
            return Err(Error::config(format!(
                "median-of-means needs chunks (M2 = {chunks}) dividing snapshots (M = {total})"
            )));
        }
        Ok(MomConfig { total, chunks })
    }

    /// M.
    pub fn total(&self) -> usize {
        self.total
    }

    /// M2.
    pub fn chunks(&self) -> usize {
        self.chunks
    }

    /// M1.
    pub fn chunk_len(&self) -> usize {
        self.total / self.chunks
    }
}

/// Median; for an even count, the mean of the two central values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn check_mom(shadow: &ClassicalShadow, mom: &MomConfig) -> Result<()> {
    if mom.total() != shadow.len() {
        return Err(Error::config(format!(
            "median-of-means configured for M = {}, shadow has {} snapshots",
            mom.total(),
            shadow.len()
        )));
    }
    Ok(())
}

/// Median of chunk means of `Σ c·snapshot_estimate`, chunks taken in snapshot order.
pub fn estimate_observable(
    shadow: &ClassicalShadow,
    observable: &Observable,
    mom: &MomConfig,
) -> Result<f64> {
    check_mom(shadow, mom)?;
    if observable.n_qubits() != shadow.n_qubits() {
        return Err(Error::usage(format!(
            "observable on {} qubits, shadow on {}",
            observable.n_qubits(),
            shadow.n_qubits()
        )));
    }
    let m1 = mom.chunk_len();
    let means: Vec<f64> = (0..mom.chunks())
        .map(|k| {
            let sum: f64 = (k * m1..(k + 1) * m1)
                .map(|i| {
                    let row = shadow.row(i);
                    observable
                        .terms()
                        .iter()
                        .map(|(c, p)| c * row_estimate(row, p.ops()))
                        .sum::<f64>()
                })
                .sum();
            sum / m1 as f64
        })
        .collect();
    Ok(median(&means))
}

/// Per-chunk means of each Pauli string's snapshot estimate, indexed
/// `[string][chunk]`. Combining rows linearly per chunk and taking the median
/// reproduces [`estimate_observable`] for any observable over these strings.
pub fn pauli_chunk_means(
    shadow: &ClassicalShadow,
    strings: &[PauliString],
    mom: &MomConfig,
) -> Result<Vec<Vec<f64>>> {
    check_mom(shadow, mom)?;
    let m1 = mom.chunk_len();
    strings
        .iter()
        .map(|p| {
            if p.n_qubits() != shadow.n_qubits() {
                return Err(Error::usage(format!(
                    "Pauli string {p} does not match the shadow width"
                )));
            }
            Ok((0..mom.chunks())
                .map(|k| {
                    let sum: f64 = (k * m1..(k + 1) * m1)
                        .map(|i| row_estimate(shadow.row(i), p.ops()))
                        .sum();
                    sum / m1 as f64
                })
                .collect())
        })
        .collect()
}

fn draw_basis<R: Rng + ?Sized>(rng: &mut R) -> Basis {
    Basis::ALL[rng.random_range(0..3usize)]
}

/// Collects `m` snapshots of `state`.
///
/// Randomness is consumed exactly as a loop of "draw n bases, then call
/// `measure_in_bases`" would consume it, and the outcome is bit-identical to
/// that loop. Snapshots sharing a basis prefix share the partially rotated
/// state, which is what makes large M affordable.
pub fn collect_shadow<R: Rng + ?Sized>(
    state: &Statevector,
    m: usize,
    rng: &mut R,
) -> Result<ClassicalShadow> {
    if m == 0 {
        return Err(Error::usage("M must be at least 1"));
    }
    let n = state.n_qubits();
    let mut bases = Vec::with_capacity(m * n);
    let mut uniforms = Vec::with_capacity(m);
    for _ in 0..m {
        bases.extend((0..n).map(|_| draw_basis(rng)));
        uniforms.push(rng.random::<f64>());
    }

    let row = |i: usize| &bases[i * n..(i + 1) * n];
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        row(a)
            .iter()
            .map(|x| x.code())
            .cmp(row(b).iter().map(|x| x.code()))
    });

    // stack[k] has qubits 0..k rotated according to the current prefix
    let mut stack = vec![state.clone(); n + 1];
    let mut prev: Option<usize> = None;
    let mut cdf = Vec::new();
    let mut codes = vec![0u8; m * n];
    for &i in &order {
        let current = row(i);
        let first_diff = match prev {
            None => Some(0),
            Some(p) => row(p).iter().zip(current).position(|(a, b)| a != b),
        };
        if let Some(d) = first_diff {
            for k in d..n {
                let (lo, hi) = stack.split_at_mut(k + 1);
                hi[0].clone_from(&lo[k]);
                hi[0].rotate_qubit_to(k, current[k]);
            }
            cdf = stack[n].cumulative_probabilities();
        }
        prev = Some(i);
        let index = sample_cdf(&cdf, uniforms[i]);
        for (q, b) in current.iter().enumerate() {
            codes[i * n + q] = pack_code(*b, ((index >> q) & 1) as u8);
        }
    }
    Ok(ClassicalShadow { n_qubits: n, codes })
}

/// Reference collector: one `measure_in_bases` call per snapshot.
pub fn collect_shadow_naive<R: Rng + ?Sized>(
    state: &Statevector,
    m: usize,
    rng: &mut R,
) -> Result<ClassicalShadow> {
    if m == 0 {
        return Err(Error::usage("M must be at least 1"));
    }
    let n = state.n_qubits();
    let mut snapshots = Vec::with_capacity(m);
    for _ in 0..m {
        let bases: Vec<Basis> = (0..n).map(|_| draw_basis(rng)).collect();
        let outcomes = state.measure_in_bases(&bases, rng)?;
        snapshots.push(Snapshot { bases, outcomes });
    }
    ClassicalShadow::from_snapshots(n, &snapshots)
}

/// The 2p+1 shadows published in one round, ordered
/// `[unshifted, (1,+), (1,−), …, (p,+), (p,−)]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowSet {
    iteration: u32,
    n_params: usize,
    chunks: u16,
    entries: Vec<ClassicalShadow>,
}

impl ShadowSet {
    pub fn new(
        iteration: u32,
        n_params: usize,
        chunks: u16,
        entries: Vec<ClassicalShadow>,
    ) -> Result<Self> {
        if entries.len() != 2 * n_params + 1 {
            return Err(Error::usage(format!(
                "{} entries for p = {n_params}, expected {}",
                entries.len(),
                2 * n_params + 1
            )));
        }
        let (n, m) = (entries[0].n_qubits(), entries[0].len());
        if entries.iter().any(|e| e.n_qubits() != n || e.len() != m) {
            return Err(Error::usage(
                "shadow set entries must share qubit count and M",
            ));
        }
        MomConfig::new(m, chunks as usize)?;
        Ok(ShadowSet {
            iteration,
            n_params,
            chunks,
            entries,
        })
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_qubits(&self) -> usize {
        self.entries[0].n_qubits()
    }

    /// Snapshots per entry.
    pub fn shots(&self) -> usize {
        self.entries[0].len()
    }

    /// Advertised median-of-means chunk count M2.
    pub fn chunks(&self) -> u16 {
        self.chunks
    }

    pub fn mom(&self) -> MomConfig {
        MomConfig::new(self.shots(), self.chunks as usize).expect("validated on construction")
    }

    pub fn entries(&self) -> &[ClassicalShadow] {
        &self.entries
    }

    pub fn unshifted(&self) -> &ClassicalShadow {
        &self.entries[0]
    }

    /// Shadows of θ with θ_k shifted by +π/2 and −π/2 (k is zero-based).
    pub fn shifted(&self, k: usize) -> (&ClassicalShadow, &ClassicalShadow) {
        (&self.entries[1 + 2 * k], &self.entries[2 + 2 * k])
    }
}

/// Runs the ansatz at θ and at every ±π/2 shift and collects `m` snapshots
/// from each. Entry `e` draws from its own ChaCha8 stream derived from
/// `(seed, iteration, e)`, so the result does not depend on thread scheduling.
pub fn collect_shadow_set(
    ansatz: &Ansatz,
    theta: &[f64],
    mom: &MomConfig,
    seed: u64,
    iteration: u32,
) -> Result<ShadowSet> {
    if theta.len() != ansatz.n_params() {
        return Err(Error::usage(format!(
            "theta has length {}, ansatz has {} parameters",
            theta.len(),
            ansatz.n_params()
        )));
    }
    if mom.chunks() > u16::MAX as usize {
        return Err(Error::config("M2 does not fit the wire format"));
    }
    let round_seed = rng::derive_seed(seed, Stream::Shadows, iteration as u64);
    let entries = shift_schedule(theta)
        .into_par_iter()
        .enumerate()
        .map(|(e, t)| {
            let state = ansatz.run(&t)?;
            let mut rng = rng::stream_rng(round_seed, Stream::Shadows, e as u64);
            collect_shadow(&state, mom.total(), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    ShadowSet::new(iteration, ansatz.n_params(), mom.chunks() as u16, entries)
}
