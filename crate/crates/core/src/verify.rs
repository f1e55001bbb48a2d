//! Self-check suites run by `ccqfl verify`. Each suite compares the
//! production code path against a brute-force reference.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::federation::{aggregate, ClientState};
use crate::pauli::{Basis, Pauli, PauliString};
use crate::qnn::{expectation_bundles, EncodedSample, ExactSource, LogisticHead, Observable};
use crate::shadows::{collect_shadow, estimate_observable, snapshot_pauli_factor, MomConfig};
use crate::sim::{build_hea, Gate, Statevector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Channel,
    Gradient,
    Aggregation,
    Concentration,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Channel,
        Suite::Gradient,
        Suite::Aggregation,
        Suite::Concentration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Channel => "channel",
            Suite::Gradient => "gradient",
            Suite::Aggregation => "aggregation",
            Suite::Concentration => "concentration",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown suite {s:?}; expected channel, gradient, aggregation or concentration"
                ))
            })
    }
}

/// Outcome of one comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{tag} {}/{}: {:.3e} (want {})",
                self.suite.name(),
                c.name,
                c.value,
                c.bound
            )?;
        }
        Ok(())
    }
}

fn check_max(name: impl Into<String>, value: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        value,
        bound: format!("<= {tol:.0e}"),
        passed: value <= tol,
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Report> {
    let checks = match suite {
        Suite::Channel => channel(seed)?,
        Suite::Gradient => gradient(seed)?,
        Suite::Aggregation => aggregation(seed)?,
        Suite::Concentration => concentration(seed)?,
    };
    Ok(Report { suite, checks })
}

/// Haar-like random pure state from normalized complex Gaussians.
pub fn random_state<R: Rng + ?Sized>(n_qubits: usize, rng: &mut R) -> Result<Statevector> {
    let amps: Vec<Complex64> = (0..1usize << n_qubits)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    Statevector::from_amplitudes(amps.into_iter().map(|a| a / norm).collect())
}

type CMat = DMatrix<Complex64>;

fn density(state: &Statevector) -> CMat {
    let psi = CMat::from_iterator(
        state.amplitudes().len(),
        1,
        state.amplitudes().iter().copied(),
    );
    &psi * psi.adjoint()
}

/// Projector onto the eigenvector of `basis` with eigenvalue `(-1)^outcome`.
fn eigenprojector(basis: Basis, outcome: u8) -> CMat {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let sign = if outcome == 0 { 1.0 } else { -1.0 };
    let v = match basis {
        Basis::X => [Complex64::new(h, 0.0), Complex64::new(sign * h, 0.0)],
        Basis::Y => [Complex64::new(h, 0.0), Complex64::new(0.0, sign * h)],
        Basis::Z => {
            if outcome == 0 {
                [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
            } else {
                [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]
            }
        }
    };
    let col = CMat::from_row_slice(2, 1, &v);
    &col * col.adjoint()
}

/// Full-register operator with `ops[q]` on qubit q (qubit 0 least significant).
fn kron_register(ops: &[CMat]) -> CMat {
    let mut acc = CMat::identity(1, 1);
    for op in ops.iter().rev() {
        acc = acc.kronecker(op);
    }
    acc
}

fn outcome_probabilities(state: &Statevector, bases: &[Basis]) -> Result<Vec<f64>> {
    let mut s = state.clone();
    for (q, &b) in bases.iter().enumerate() {
        if let Some(g) = Gate::basis_rotation(q, b) {
            s.apply_gate(&g, None)?;
        }
    }
    Ok(s.probabilities())
}

fn all_bases(n: usize) -> Vec<Vec<Basis>> {
    (0..3usize.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let b = Basis::ALL[code % 3];
                    code /= 3;
                    b
                })
                .collect()
        })
        .collect()
}

/// Exact mean of the inverted snapshot `⊗_q (3 U_q†|b_q⟩⟨b_q|U_q − I)`
/// over all basis choices and outcome probabilities.
pub fn expected_snapshot(state: &Statevector) -> Result<CMat> {
    let n = state.n_qubits();
    let dim = 1usize << n;
    let id = CMat::identity(2, 2);
    let mut acc = CMat::zeros(dim, dim);
    let weight = 1.0 / 3f64.powi(n as i32);
    for bases in all_bases(n) {
        let probs = outcome_probabilities(state, &bases)?;
        for (idx, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let factors: Vec<CMat> = (0..n)
                .map(|q| {
                    eigenprojector(bases[q], ((idx >> q) & 1) as u8) * Complex64::new(3.0, 0.0)
                        - &id
                })
                .collect();
            acc += kron_register(&factors) * Complex64::new(weight * p, 0.0);
        }
    }
    Ok(acc)
}

/// Exact second moment of the single-snapshot estimator of `pauli`.
pub fn snapshot_second_moment(state: &Statevector, pauli: &PauliString) -> Result<f64> {
    let n = state.n_qubits();
    let mut m2 = 0.0;
    for bases in all_bases(n) {
        let probs = outcome_probabilities(state, &bases)?;
        for (idx, &p) in probs.iter().enumerate() {
            let v: f64 = (0..n)
                .map(|q| snapshot_pauli_factor(bases[q], ((idx >> q) & 1) as u8, pauli.ops()[q]))
                .product();
            m2 += p * v * v / 3f64.powi(n as i32);
        }
    }
    Ok(m2)
}

fn all_paulis(n: usize) -> Vec<PauliString> {
    const OPS: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
    (0..4usize.pow(n as u32))
        .map(|mut code| {
            PauliString::new(
                (0..n)
                    .map(|_| {
                        let p = OPS[code % 4];
                        code /= 4;
                        p
                    })
                    .collect(),
            )
        })
        .collect()
}

fn channel(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_var_excess = f64::NEG_INFINITY;
    for i in 0..20 {
        let n = 1 + i % 3;
        let state = random_state(n, &mut rng)?;
        let rho = density(&state);
        let diff = expected_snapshot(&state)? - &rho;
        worst = worst.max(diff.iter().map(|z| z.norm()).fold(0.0, f64::max));
        for p in all_paulis(n) {
            let mean = state.pauli_expectation(&p)?;
            let var = snapshot_second_moment(&state, &p)? - mean * mean;
            worst_var_excess = worst_var_excess.max(var - 3f64.powi(p.locality() as i32));
        }
    }
    Ok(vec![
        check_max(
            "unbiased (max entrywise deviation, 20 states, n<=3)",
            worst,
            1e-10,
        ),
        Check {
            name: "variance minus 3^locality (max over all Pauli strings)".into(),
            value: worst_var_excess,
            bound: "<= 1e-10".into(),
            passed: worst_var_excess <= 1e-10,
        },
    ])
}

fn random_samples<R: Rng + ?Sized>(
    n: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<EncodedSample>> {
    (0..count)
        .map(|_| {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            EncodedSample::from_features(&x, rng.random_range(0..2u8), n)
        })
        .collect()
}

fn loss_at(
    ansatz: &crate::sim::Ansatz,
    theta: &[f64],
    samples: &[EncodedSample],
    head: &LogisticHead,
) -> Result<f64> {
    let state = ansatz.run(theta)?;
    let e0: Vec<f64> = samples
        .iter()
        .map(|s| state.expectation(&s.observable))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok(head.predict_and_loss(&e0, &labels)?.0)
}

fn gradient(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ansatz = build_hea(8, 5)?;
    let head = LogisticHead::new(4.0)?;
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let theta: Vec<f64> = (0..ansatz.n_params())
            .map(|_| rng.random_range(-3.1..3.1))
            .collect();
        let samples = random_samples(8, 4, &mut rng)?;
        let source = ExactSource::with_shifts(&ansatz, &theta)?;
        let bundles = expectation_bundles(&source, samples.iter().map(|s| &s.observable))?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let g = head.loss_gradient(&bundles, &labels)?;
        for k in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (loss_at(&ansatz, &plus, &samples, &head)?
                - loss_at(&ansatz, &minus, &samples, &head)?)
                / (2.0 * h);
            worst = worst.max((fd - g.values()[k]).abs());
        }
    }
    Ok(vec![check_max(
        "parameter shift vs central difference (5 θ, p=80)",
        worst,
        1e-5,
    )])
}

fn aggregation(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ansatz = build_hea(8, 5)?;
    let head = LogisticHead::new(4.0)?;
    let mom = MomConfig::new(1, 1)?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let theta: Vec<f64> = (0..ansatz.n_params())
            .map(|_| rng.random_range(-3.1..3.1))
            .collect();
        let samples = random_samples(8, 60, &mut rng)?;
        let source = ExactSource::with_shifts(&ansatz, &theta)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let bundles = expectation_bundles(&source, samples.iter().map(|s| &s.observable))?;
        let pooled = head.loss_gradient(&bundles, &labels)?;
        // random split into three non-empty contiguous blocks of a shuffled order
        let mut order: Vec<usize> = (0..60).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let a = rng.random_range(1..59);
        let b = rng.random_range(a + 1..60);
        let msgs = [&order[..a], &order[a..b], &order[b..]]
            .iter()
            .enumerate()
            .map(|(id, idx)| {
                let client = ClientState::new(
                    id as u16,
                    idx.iter().map(|&i| samples[i].clone()).collect(),
                    mom,
                )?;
                client.gradient_from_source(&source, 0, None, &head)
            })
            .collect::<Result<Vec<_>>>()?;
        let global = aggregate(&msgs)?;
        for (x, y) in global.values().iter().zip(pooled.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(vec![check_max(
        "weighted client gradients vs pooled (10 partitions of 60)",
        worst,
        1e-10,
    )])
}

/// Absolute errors of the shadow estimates of every ⟨Z_j⟩, for one seed
/// and shot count.
pub fn z_errors(state: &Statevector, shots: usize, chunks: usize, seed: u64) -> Result<Vec<f64>> {
    let n = state.n_qubits();
    let mom = MomConfig::new(shots, chunks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shadow = collect_shadow(state, shots, &mut rng)?;
    (0..n)
        .map(|q| {
            let obs = Observable::new(n, vec![(1.0, PauliString::single(n, q, Pauli::Z))])?;
            Ok((estimate_observable(&shadow, &obs, &mom)? - state.expectation(&obs)?).abs())
        })
        .collect()
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Ratio of the median (over seeds) |⟨Z_0⟩ error| at `m_small` shots to
/// that at `m_large`. Both shot counts reuse the same seeds, so the smaller
/// shadow is a prefix of the larger one.
pub fn concentration_ratio(
    state: &Statevector,
    m_small: usize,
    m_large: usize,
    seeds: u64,
    base: u64,
) -> Result<f64> {
    let err = |m: usize| -> Result<f64> {
        let per_seed = (0..seeds)
            .map(|s| Ok(z_errors(state, m, 10, base + s)?[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok(median_of(per_seed))
    };
    Ok(err(m_small)? / err(m_large)?)
}

fn concentration(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ansatz = build_hea(8, 5)?;
    let theta: Vec<f64> = (0..ansatz.n_params())
        .map(|_| rng.random_range(-3.1..3.1))
        .collect();
    let state = ansatz.run(&theta)?;
    let mut within = 0;
    let mut worst = 0.0f64;
    for s in 0..20 {
        let max_err = z_errors(&state, 30_000, 10, seed.wrapping_add(100 + s))?
            .into_iter()
            .fold(0.0, f64::max);
        worst = worst.max(max_err);
        if max_err <= 0.1 {
            within += 1;
        }
    }
    let ratio = concentration_ratio(&state, 2000, 4000, 50, seed)?;
    Ok(vec![
        Check {
            name: format!("8 single-Z estimates at M=30000 within 0.1 (worst {worst:.4})"),
            value: within as f64 / 20.0,
            bound: ">= 0.95 of 20 seeds".into(),
            passed: within >= 19,
        },
        Check {
            name: "median |Z_0 error| ratio M=2000 vs M=4000 (50 seeds)".into(),
            value: ratio,
            bound: "in [1.2, 1.7]".into(),
            passed: (1.2..=1.7).contains(&ratio),
        },
    ])
}
