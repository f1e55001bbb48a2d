//! Observable-encoded quantum classifier.
//!
//! A sample `x` becomes the observable `O(x) = Σ_j x_j Z_j`; the model output
//! is `Ẽ(θ) = Tr[ρ(θ) O(x)]`. Gradients use the parameter-shift rule and the
//! closed-form chain rule of a logistic link with cross-entropy loss.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
pub use crate::pauli::{Observable, Pauli, PauliString};
use crate::shadows::{median, pauli_chunk_means, ClassicalShadow, MomConfig, ShadowSet};
use crate::sim::{shift_schedule, Ansatz, Statevector};

/// Encodes `x` as `Σ_j x_j Z_j`, dropping zero coefficients.
pub fn encode_observable(x: &[f64], n_qubits: usize) -> Result<Observable> {
    if x.len() != n_qubits {
        return Err(Error::config(format!(
            "feature dimension {} does not match {n_qubits} qubits",
            x.len()
        )));
    }
    let terms = x
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(q, &c)| (c, PauliString::single(n_qubits, q, Pauli::Z)))
        .collect();
    Observable::new(n_qubits, terms)
}

/// A data-encoding observable with its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub observable: Observable,
    pub label: u8,
}

impl EncodedSample {
    pub fn new(observable: Observable, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::usage(format!("label must be 0 or 1, got {label}")));
        }
        Ok(EncodedSample { observable, label })
    }

    pub fn from_features(x: &[f64], label: u8, n_qubits: usize) -> Result<Self> {
        Self::new(encode_observable(x, n_qubits)?, label)
    }
}

/// Ẽ(θ) together with Ẽ at θ_k ± π/2 for every k.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationBundle {
    pub e0: f64,
    pub shifted: Vec<(f64, f64)>,
}

/// Real partial derivatives of the loss, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(p: usize) -> Self {
        GradientVector(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Per-entry, per-Pauli-string values from which any observable over those
/// strings can be evaluated. Exact sources have one chunk per entry; shadow
/// sources store the median-of-means chunk means.
#[derive(Debug, Clone)]
pub struct ExpectationTable {
    n_entries: usize,
    chunks: usize,
    index: HashMap<PauliString, usize>,
    // [entry][string][chunk]
    values: Vec<f64>,
}

impl ExpectationTable {
    fn value(&self, entry: usize, string: usize, chunk: usize) -> f64 {
        let n_strings = self.index.len();
        self.values[(entry * n_strings + string) * self.chunks + chunk]
    }

    pub fn n_entries(&self) -> usize {
        self.n_entries
    }

    /// Estimate of ⟨O⟩ on entry `entry`.
    pub fn evaluate(&self, entry: usize, observable: &Observable) -> Result<f64> {
        let rows = observable
            .terms()
            .iter()
            .map(|(c, p)| {
                self.index
                    .get(p)
                    .map(|&i| (*c, i))
                    .ok_or_else(|| Error::usage(format!("Pauli string {p} was not tabulated")))
            })
            .collect::<Result<Vec<_>>>()?;
        let per_chunk = |k: usize| {
            rows.iter()
                .map(|&(c, i)| c * self.value(entry, i, k))
                .sum::<f64>()
        };
        if self.chunks == 1 {
            return Ok(per_chunk(0));
        }
        let means: Vec<f64> = (0..self.chunks).map(per_chunk).collect();
        Ok(median(&means))
    }

    /// Bundle for an observable; requires the canonical 2p+1 entry layout.
    pub fn bundle(&self, observable: &Observable) -> Result<ExpectationBundle> {
        if self.n_entries.is_multiple_of(2) {
            return Err(Error::usage("a bundle needs 2p+1 entries"));
        }
        let p = (self.n_entries - 1) / 2;
        let e0 = self.evaluate(0, observable)?;
        let shifted = (0..p)
            .map(|k| {
                Ok((
                    self.evaluate(1 + 2 * k, observable)?,
                    self.evaluate(2 + 2 * k, observable)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpectationBundle { e0, shifted })
    }
}

fn unique_strings<'a>(observables: impl IntoIterator<Item = &'a Observable>) -> Vec<PauliString> {
    let mut seen: Vec<PauliString> = observables
        .into_iter()
        .flat_map(|o| o.terms().iter().map(|(_, p)| p.clone()))
        .collect();
    seen.sort();
    seen.dedup();
    seen
}

fn build_index(strings: &[PauliString]) -> HashMap<PauliString, usize> {
    strings
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, p)| (p, i))
        .collect()
}

/// Something that can evaluate Pauli-string expectations on a fixed list of
/// states: either exact statevectors or published classical shadows.
pub trait ExpectationSource: Sync {
    fn n_qubits(&self) -> usize;

    fn n_entries(&self) -> usize;

    fn tabulate(&self, strings: &[PauliString]) -> Result<ExpectationTable>;

    /// Number of circuit parameters when the entries follow the 2p+1 layout.
    fn n_params(&self) -> usize {
        (self.n_entries() - 1) / 2
    }
}

/// Exact expectations from simulated statevectors.
#[derive(Debug, Clone)]
pub struct ExactSource {
    states: Vec<Statevector>,
}

impl ExactSource {
    /// States for θ and every ±π/2 shift, in shadow-set order.
    pub fn with_shifts(ansatz: &Ansatz, theta: &[f64]) -> Result<Self> {
        if theta.len() != ansatz.n_params() {
            return Err(Error::usage(format!(
                "theta has length {}, ansatz has {} parameters",
                theta.len(),
                ansatz.n_params()
            )));
        }
        let states = shift_schedule(theta)
            .par_iter()
            .map(|t| ansatz.run(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExactSource { states })
    }

    /// Only the unshifted state; enough for predictions.
    pub fn at(ansatz: &Ansatz, theta: &[f64]) -> Result<Self> {
        Ok(ExactSource {
            states: vec![ansatz.run(theta)?],
        })
    }

    pub fn states(&self) -> &[Statevector] {
        &self.states
    }
}

impl ExpectationSource for ExactSource {
    fn n_qubits(&self) -> usize {
        self.states[0].n_qubits()
    }

    fn n_entries(&self) -> usize {
        self.states.len()
    }

    fn tabulate(&self, strings: &[PauliString]) -> Result<ExpectationTable> {
        let per_entry = self
            .states
            .par_iter()
            .map(|s| {
                strings
                    .iter()
                    .map(|p| s.pauli_expectation(p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpectationTable {
            n_entries: self.states.len(),
            chunks: 1,
            index: build_index(strings),
            values: per_entry.into_iter().flatten().collect(),
        })
    }
}

/// Median-of-means estimates from classical shadows.
#[derive(Debug, Clone, Copy)]
pub struct ShadowSource<'a> {
    entries: &'a [ClassicalShadow],
    mom: MomConfig,
}

impl<'a> ShadowSource<'a> {
    pub fn new(entries: &'a [ClassicalShadow], mom: MomConfig) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::usage("no shadows"))?;
        if entries
            .iter()
            .any(|e| e.len() != mom.total() || e.n_qubits() != first.n_qubits())
        {
            return Err(Error::config(format!(
                "median-of-means configured for M = {}, shadows disagree",
                mom.total()
            )));
        }
        Ok(ShadowSource { entries, mom })
    }

    pub fn from_set(set: &'a ShadowSet, mom: MomConfig) -> Result<Self> {
        Self::new(set.entries(), mom)
    }
}

impl ExpectationSource for ShadowSource<'_> {
    fn n_qubits(&self) -> usize {
        self.entries[0].n_qubits()
    }

    fn n_entries(&self) -> usize {
        self.entries.len()
    }

    fn tabulate(&self, strings: &[PauliString]) -> Result<ExpectationTable> {
        let per_entry = self
            .entries
            .par_iter()
            .map(|e| pauli_chunk_means(e, strings, &self.mom))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpectationTable {
            n_entries: self.entries.len(),
            chunks: self.mom.chunks(),
            index: build_index(strings),
            values: per_entry.into_iter().flatten().flatten().collect(),
        })
    }
}

fn check_width(source: &dyn ExpectationSource, observable: &Observable) -> Result<()> {
    if observable.n_qubits() != source.n_qubits() {
        return Err(Error::usage(format!(
            "observable on {} qubits, source on {}",
            observable.n_qubits(),
            source.n_qubits()
        )));
    }
    Ok(())
}

/// {Ẽ(θ), Ẽ_{θk±}(θ)} for one observable.
pub fn expectation_bundle(
    source: &dyn ExpectationSource,
    observable: &Observable,
) -> Result<ExpectationBundle> {
    check_width(source, observable)?;
    source
        .tabulate(&unique_strings([observable]))?
        .bundle(observable)
}

/// Bundles for many observables from a single tabulation.
pub fn expectation_bundles<'a>(
    source: &dyn ExpectationSource,
    observables: impl IntoIterator<Item = &'a Observable> + Clone,
) -> Result<Vec<ExpectationBundle>> {
    for o in observables.clone() {
        check_width(source, o)?;
    }
    let table = source.tabulate(&unique_strings(observables.clone()))?;
    observables.into_iter().map(|o| table.bundle(o)).collect()
}

/// Ẽ on the first entry of `source` for each observable.
pub fn predictions<'a>(
    source: &dyn ExpectationSource,
    observables: impl IntoIterator<Item = &'a Observable> + Clone,
) -> Result<Vec<f64>> {
    for o in observables.clone() {
        check_width(source, o)?;
    }
    let table = source.tabulate(&unique_strings(observables.clone()))?;
    observables
        .into_iter()
        .map(|o| table.evaluate(0, o))
        .collect()
}

/// Parameter-shift derivative: `(Ẽ_{θk+} − Ẽ_{θk−}) / 2`.
pub fn expectation_gradient(bundle: &ExpectationBundle) -> Vec<f64> {
    bundle
        .shifted
        .iter()
        .map(|(plus, minus)| (plus - minus) / 2.0)
        .collect()
}

const LOG_CLAMP: f64 = 1e-12;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic link `p = σ(scale · Ẽ)` with mean binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticHead {
    scale: f64,
}

impl Default for LogisticHead {
    fn default() -> Self {
        LogisticHead { scale: 1.0 }
    }
}

impl LogisticHead {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config(format!(
                "logit_scale must be positive and finite, got {scale}"
            )));
        }
        Ok(LogisticHead { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn probability(&self, e0: f64) -> f64 {
        logistic(self.scale * e0)
    }

    /// Mean cross-entropy over the samples and the per-sample probabilities.
    pub fn predict_and_loss(&self, e0: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
        check_counts(e0.len(), labels.len())?;
        let probs: Vec<f64> = e0.iter().map(|&e| self.probability(e)).collect();
        let total: f64 = probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                if y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        Ok((total / e0.len() as f64, probs))
    }

    /// `(scale/S) Σ_s (p_s − y_s) ∂Ẽ_s/∂θ`.
    pub fn loss_gradient(
        &self,
        bundles: &[ExpectationBundle],
        labels: &[u8],
    ) -> Result<GradientVector> {
        check_counts(bundles.len(), labels.len())?;
        let p = bundles[0].shifted.len();
        let mut g = vec![0.0; p];
        for (b, &y) in bundles.iter().zip(labels) {
            if b.shifted.len() != p {
                return Err(Error::usage("bundles disagree on parameter count"));
            }
            let residual = self.probability(b.e0) - y as f64;
            for (gk, dk) in g.iter_mut().zip(expectation_gradient(b)) {
                *gk += residual * dk;
            }
        }
        let factor = self.scale / bundles.len() as f64;
        g.iter_mut().for_each(|v| *v *= factor);
        Ok(GradientVector(g))
    }
}

fn check_counts(samples: usize, labels: usize) -> Result<()> {
    if samples != labels {
        return Err(Error::usage(format!(
            "{samples} samples but {labels} labels"
        )));
    }
    if samples == 0 {
        return Err(Error::usage("no samples"));
    }
    Ok(())
}

/// Loss and probabilities under the unit-scale logistic link.
pub fn predict_and_loss(bundles: &[ExpectationBundle], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let e0: Vec<f64> = bundles.iter().map(|b| b.e0).collect();
    LogisticHead::default().predict_and_loss(&e0, labels)
}

/// Loss gradient under the unit-scale logistic link.
pub fn loss_gradient(bundles: &[ExpectationBundle], labels: &[u8]) -> Result<GradientVector> {
    LogisticHead::default().loss_gradient(bundles, labels)
}

/// Fraction of samples with `(Ẽ > 0) == label`.
pub fn accuracy(e0: &[f64], labels: &[u8]) -> f64 {
    if e0.is_empty() {
        return 0.0;
    }
    let hits = e0
        .iter()
        .zip(labels)
        .filter(|(&e, &y)| (e > 0.0) == (y == 1))
        .count();
    hits as f64 / e0.len() as f64
}
