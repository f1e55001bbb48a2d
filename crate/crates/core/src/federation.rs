//! Server and client roles of the federated protocol.
//!
//! Each round the server publishes expectations for θ and its ±π/2 shifts
//! (classical shadows in shadow mode, statevectors in the exact test rig),
//! clients return local gradients over their own samples, and the server
//! aggregates them with weights `m_i / m` and takes one optimizer step.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::qnn::{
    accuracy, expectation_bundles, predictions, EncodedSample, ExactSource, ExpectationSource,
    GradientVector, LogisticHead, ShadowSource,
};
use crate::rng::{self, Stream};
use crate::shadows::{collect_shadow, collect_shadow_set, MomConfig, ShadowSet};
use crate::sim::Ansatz;
use crate::wire::{self, Message};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        steps: u64,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, p: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; p],
                v: vec![0.0; p],
                steps: 0,
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }
}

/// Model parameters and optimizer state held by the server.
#[derive(Debug, Clone)]
pub struct ServerState {
    ansatz: Ansatz,
    theta: Vec<f64>,
    optimizer: Optimizer,
    eta: f64,
    iteration: u32,
}

impl ServerState {
    pub fn new(ansatz: Ansatz, theta: Vec<f64>, kind: OptimizerKind, eta: f64) -> Result<Self> {
        if theta.len() != ansatz.n_params() {
            return Err(Error::config(format!(
                "theta has length {}, ansatz has {} parameters",
                theta.len(),
                ansatz.n_params()
            )));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::config(format!(
                "eta must be positive and finite, got {eta}"
            )));
        }
        let optimizer = Optimizer::new(kind, theta.len());
        Ok(ServerState {
            ansatz,
            theta,
            optimizer,
            eta,
            iteration: 0,
        })
    }

    /// θ drawn uniformly from [−π, π).
    pub fn random_init(ansatz: Ansatz, kind: OptimizerKind, eta: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream_rng(seed, Stream::ThetaInit, 0);
        let pi = std::f64::consts::PI;
        let theta = (0..ansatz.n_params())
            .map(|_| rng.random_range(-pi..pi))
            .collect();
        Self::new(ansatz, theta, kind, eta)
    }

    pub fn ansatz(&self) -> &Ansatz {
        &self.ansatz
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Number of completed updates.
    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    /// Applies one SGD or Adam update. A non-finite or wrongly sized gradient
    /// leaves the state untouched.
    pub fn optimizer_step(&mut self, g: &GradientVector) -> Result<()> {
        if g.len() != self.theta.len() {
            return Err(Error::protocol(
                0,
                format!(
                    "gradient has length {}, model has {} parameters",
                    g.len(),
                    self.theta.len()
                ),
            ));
        }
        if let Some(k) = g.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::protocol(
                0,
                format!("non-finite gradient component {k}"),
            ));
        }
        match &mut self.optimizer {
            Optimizer::Sgd => {
                for (t, gk) in self.theta.iter_mut().zip(g.values()) {
                    *t -= self.eta * gk;
                }
            }
            Optimizer::Adam { m, v, steps } => {
                *steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*steps as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*steps as i32);
                for k in 0..self.theta.len() {
                    let gk = g.values()[k];
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    self.theta[k] -= self.eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// One participant's private samples and estimator settings.
#[derive(Debug, Clone)]
pub struct ClientState {
    client_id: u16,
    samples: Vec<EncodedSample>,
    mom: MomConfig,
}

impl ClientState {
    pub fn new(client_id: u16, samples: Vec<EncodedSample>, mom: MomConfig) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::config(format!("client {client_id} has no samples")))?;
        let n = first.observable.n_qubits();
        if samples.iter().any(|s| s.observable.n_qubits() != n) {
            return Err(Error::config(format!(
                "client {client_id} samples disagree on qubit count"
            )));
        }
        Ok(ClientState {
            client_id,
            samples,
            mom,
        })
    }

    pub fn client_id(&self) -> u16 {
        self.client_id
    }

    pub fn samples(&self) -> &[EncodedSample] {
        &self.samples
    }

    pub fn n_qubits(&self) -> usize {
        self.samples[0].observable.n_qubits()
    }

    pub fn mom(&self) -> MomConfig {
        self.mom
    }

    /// Local gradient from any expectation source over a subset of samples
    /// (all of them when `batch` is `None`).
    pub fn gradient_from_source(
        &self,
        source: &dyn ExpectationSource,
        iteration: u32,
        batch: Option<&[usize]>,
        head: &LogisticHead,
    ) -> Result<LocalGradientMsg> {
        if source.n_qubits() != self.n_qubits() {
            return Err(Error::protocol(
                10,
                format!(
                    "published states have {} qubits, client data has {}",
                    source.n_qubits(),
                    self.n_qubits()
                ),
            ));
        }
        let picked: Vec<&EncodedSample> = match batch {
            None => self.samples.iter().collect(),
            Some(idx) => idx
                .iter()
                .map(|&i| {
                    self.samples.get(i).ok_or_else(|| {
                        Error::usage(format!(
                            "batch index {i} out of range for client {}",
                            self.client_id
                        ))
                    })
                })
                .collect::<Result<_>>()?,
        };
        if picked.is_empty() {
            return Err(Error::usage(format!(
                "empty batch for client {}",
                self.client_id
            )));
        }
        let labels: Vec<u8> = picked.iter().map(|s| s.label).collect();
        let bundles = expectation_bundles(source, picked.iter().map(|s| &s.observable))?;
        let e0: Vec<f64> = bundles.iter().map(|b| b.e0).collect();
        let (local_loss, _) = head.predict_and_loss(&e0, &labels)?;
        let gradient = head.loss_gradient(&bundles, &labels)?;
        if !gradient.is_finite() {
            return Err(Error::protocol(
                0,
                format!("client {} produced a non-finite gradient", self.client_id),
            ));
        }
        Ok(LocalGradientMsg {
            client_id: self.client_id,
            iteration,
            samples: picked.len() as u32,
            gradient,
            local_loss,
        })
    }
}

/// A client's upload for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradientMsg {
    pub client_id: u16,
    pub iteration: u32,
    /// Number of samples the gradient averages over (the aggregation weight).
    pub samples: u32,
    pub gradient: GradientVector,
    pub local_loss: f64,
}

/// Computes a client's gradient on all of its samples from a published
/// shadow set, using the client's own median-of-means settings.
pub fn client_local_gradient(
    client: &ClientState,
    set: &ShadowSet,
    head: &LogisticHead,
) -> Result<LocalGradientMsg> {
    client_batch_gradient(client, set, None, head)
}

pub fn client_batch_gradient(
    client: &ClientState,
    set: &ShadowSet,
    batch: Option<&[usize]>,
    head: &LogisticHead,
) -> Result<LocalGradientMsg> {
    wire::check_mom_for(set, &client.mom)?;
    if set.n_qubits() != client.n_qubits() {
        return Err(Error::protocol(
            10,
            format!(
                "shadow set has {} qubits, client data has {}",
                set.n_qubits(),
                client.n_qubits()
            ),
        ));
    }
    let source = ShadowSource::from_set(set, client.mom)?;
    client.gradient_from_source(&source, set.iteration(), batch, head)
}

/// `Σ_i (m_i/m) g_i`, summed in client_id order.
pub fn aggregate(msgs: &[LocalGradientMsg]) -> Result<GradientVector> {
    let first = msgs
        .first()
        .ok_or_else(|| Error::usage("no local gradients to aggregate"))?;
    let p = first.gradient.len();
    for m in msgs {
        if m.iteration != first.iteration {
            return Err(Error::protocol(
                6,
                format!(
                    "client {} sent iteration {}, expected {}",
                    m.client_id, m.iteration, first.iteration
                ),
            ));
        }
        if m.gradient.len() != p {
            return Err(Error::protocol(
                16,
                format!(
                    "client {} sent {} components, expected {p}",
                    m.client_id,
                    m.gradient.len()
                ),
            ));
        }
        if !m.gradient.is_finite() {
            return Err(Error::protocol(
                20,
                format!("client {} sent a non-finite gradient", m.client_id),
            ));
        }
    }
    let total: u64 = msgs.iter().map(|m| m.samples as u64).sum();
    if total == 0 {
        return Err(Error::usage("aggregate sample count is zero"));
    }
    let mut order: Vec<&LocalGradientMsg> = msgs.iter().collect();
    order.sort_by_key(|m| m.client_id);
    let mut g = vec![0.0; p];
    for m in order {
        let w = m.samples as f64 / total as f64;
        for (acc, v) in g.iter_mut().zip(m.gradient.values()) {
            *acc += w * v;
        }
    }
    Ok(GradientVector(g))
}

/// Moves protocol messages between the server and a client.
pub trait Transport {
    fn deliver_shadows<'s>(
        &mut self,
        client_id: u16,
        set: &'s ShadowSet,
    ) -> Result<Cow<'s, ShadowSet>>;

    fn upload_gradient(&mut self, msg: LocalGradientMsg) -> Result<LocalGradientMsg>;

    /// Bytes sent so far in the server-to-client direction.
    fn bytes_to_clients(&self) -> u64 {
        0
    }
}

/// Shares the published set by reference.
#[derive(Debug, Default, Clone, Copy)]
pub struct InProcess;

impl Transport for InProcess {
    fn deliver_shadows<'s>(
        &mut self,
        _client_id: u16,
        set: &'s ShadowSet,
    ) -> Result<Cow<'s, ShadowSet>> {
        Ok(Cow::Borrowed(set))
    }

    fn upload_gradient(&mut self, msg: LocalGradientMsg) -> Result<LocalGradientMsg> {
        Ok(msg)
    }
}

/// Sends every message through its binary encoding over a byte stream and
/// decodes it on the far end. `tx` and `rx` are the two ends of one ordered
/// connection (a socket pair, a pipe, ...).
pub struct Framed<W, R> {
    tx: W,
    rx: R,
    sent: u64,
}

impl<W: Write + Send, R: Read> Framed<W, R> {
    pub fn new(tx: W, rx: R) -> Self {
        Framed { tx, rx, sent: 0 }
    }

    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        let bytes = wire::encode_message(msg);
        let len = bytes.len() as u64;
        let tx = &mut self.tx;
        let rx = &mut self.rx;
        // the writer runs on its own thread so a bounded connection cannot deadlock
        let (written, received) = std::thread::scope(|s| {
            let writer = s.spawn(move || -> Result<()> {
                tx.write_all(&bytes)?;
                tx.flush()?;
                Ok(())
            });
            let received = wire::read_message(rx);
            (writer.join().expect("writer thread panicked"), received)
        });
        written?;
        self.sent += len;
        received
    }
}

impl<W: Write + Send, R: Read> Transport for Framed<W, R> {
    fn deliver_shadows<'s>(
        &mut self,
        _client_id: u16,
        set: &'s ShadowSet,
    ) -> Result<Cow<'s, ShadowSet>> {
        match self.exchange(&Message::ShadowSet(set.clone()))? {
            Message::ShadowSet(s) => Ok(Cow::Owned(s)),
            Message::LocalGradient(_) => Err(Error::protocol(5, "expected a shadow set")),
        }
    }

    fn upload_gradient(&mut self, msg: LocalGradientMsg) -> Result<LocalGradientMsg> {
        match self.exchange(&Message::LocalGradient(msg))? {
            Message::LocalGradient(g) => Ok(g),
            Message::ShadowSet(_) => Err(Error::protocol(5, "expected a local gradient")),
        }
    }

    fn bytes_to_clients(&self) -> u64 {
        self.sent
    }
}

#[derive(Default)]
struct PipeInner {
    buf: VecDeque<u8>,
    closed: bool,
}

/// Blocking in-memory byte pipe.
#[derive(Clone, Default)]
pub struct Pipe(Arc<(Mutex<PipeInner>, Condvar)>);

pub struct PipeWriter(Pipe);

pub struct PipeReader(Pipe);

/// A connected writer/reader pair.
pub fn pipe() -> (PipeWriter, PipeReader) {
    let p = Pipe::default();
    (PipeWriter(p.clone()), PipeReader(p))
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        let (lock, cv) = &*(self.0).0;
        lock.lock().unwrap().buf.extend(data);
        cv.notify_all();
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        let (lock, cv) = &*(self.0).0;
        lock.lock().unwrap().closed = true;
        cv.notify_all();
    }
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        let (lock, cv) = &*(self.0).0;
        let mut inner = lock.lock().unwrap();
        while inner.buf.is_empty() && !inner.closed {
            inner = cv.wait(inner).unwrap();
        }
        let n = out.len().min(inner.buf.len());
        for (o, b) in out.iter_mut().zip(inner.buf.drain(..n)) {
            *o = b;
        }
        Ok(n)
    }
}

impl Framed<PipeWriter, PipeReader> {
    pub fn in_memory() -> Self {
        let (tx, rx) = pipe();
        Framed::new(tx, rx)
    }
}

/// Where per-round expectations come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainingMode {
    /// Statevector expectations; a test rig, not a deployable protocol.
    Exact,
    /// Classical shadows with `M` snapshots per entry.
    Shadow { mom: MomConfig },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// Iteration index the round ran at (before the update).
    pub iteration: u32,
    pub client_losses: Vec<(u16, f64)>,
    pub global_gradient: GradientVector,
    pub grad_norm: f64,
    /// Encoded ShadowSet size per client; zero in exact mode.
    pub shadow_bytes_per_client: usize,
}

/// Executes one round. Any failure before the update leaves `server`
/// unchanged. `batches[i]` selects the samples of `clients[i]`; clients with
/// an empty batch sit the round out.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientState],
    batches: Option<&[Vec<usize>]>,
    mode: TrainingMode,
    seed: u64,
    head: &LogisticHead,
    transport: &mut dyn Transport,
) -> Result<RoundMetrics> {
    if let Some(b) = batches {
        if b.len() != clients.len() {
            return Err(Error::usage(format!(
                "{} batches for {} clients",
                b.len(),
                clients.len()
            )));
        }
    }
    let batch_of = |i: usize| batches.map(|b| b[i].as_slice());
    let active: Vec<usize> = (0..clients.len())
        .filter(|&i| batch_of(i).is_none_or(|b| !b.is_empty()))
        .collect();
    if active.is_empty() {
        return Err(Error::usage("no client has samples this round"));
    }
    let iteration = server.iteration;
    let mut uploads = Vec::with_capacity(active.len());
    let mut shadow_bytes = 0;
    match mode {
        TrainingMode::Exact => {
            let source = ExactSource::with_shifts(&server.ansatz, &server.theta)?;
            let msgs = active
                .par_iter()
                .map(|&i| clients[i].gradient_from_source(&source, iteration, batch_of(i), head))
                .collect::<Result<Vec<_>>>()?;
            for m in msgs {
                uploads.push(transport.upload_gradient(m)?);
            }
        }
        TrainingMode::Shadow { mom } => {
            let set = collect_shadow_set(&server.ansatz, &server.theta, &mom, seed, iteration)?;
            shadow_bytes = wire::shadow_set_len(&set);
            let mut delivered = Vec::with_capacity(active.len());
            for &i in &active {
                delivered.push(transport.deliver_shadows(clients[i].client_id, &set)?);
            }
            let msgs = active
                .par_iter()
                .zip(delivered.par_iter())
                .map(|(&i, s)| client_batch_gradient(&clients[i], s, batch_of(i), head))
                .collect::<Result<Vec<_>>>()?;
            for m in msgs {
                uploads.push(transport.upload_gradient(m)?);
            }
        }
    }
    let global = aggregate(&uploads)?;
    server.optimizer_step(&global)?;
    let mut client_losses: Vec<(u16, f64)> = uploads
        .iter()
        .map(|m| (m.client_id, m.local_loss))
        .collect();
    client_losses.sort_by_key(|c| c.0);
    Ok(RoundMetrics {
        iteration,
        client_losses,
        grad_norm: global.norm(),
        global_gradient: global,
        shadow_bytes_per_client: shadow_bytes,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,test_acc,grad_norm,wall_ms";

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.10},{:.6},{:.6},{:.10},{}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.test_accuracy, r.grad_norm, r.wall_ms
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything `train` needs once data and config are resolved.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub ansatz: Ansatz,
    pub clients: Vec<ClientState>,
    pub test: Vec<EncodedSample>,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub epochs: usize,
    pub mode: TrainingMode,
    /// Minibatch size per client; `None` means one full-batch round per epoch.
    pub batch_size: Option<usize>,
    pub head: LogisticHead,
    pub seed: u64,
    /// Evaluate epoch metrics from a fresh shadow instead of exactly.
    pub shadow_metrics: bool,
    pub record_wall_time: bool,
}

/// Per-client minibatch index lists for one epoch. Round `r` uses entry `r`
/// of every client; clients that have run out sit the round out.
pub fn epoch_batches(
    clients: &[ClientState],
    batch_size: Option<usize>,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<Vec<usize>>> {
    let per_client: Vec<Vec<Vec<usize>>> = clients
        .iter()
        .map(|c| {
            let m = c.samples().len();
            match batch_size {
                None => vec![(0..m).collect()],
                Some(bs) => {
                    let mut idx: Vec<usize> = (0..m).collect();
                    let stream = ((epoch as u64) << 16) | c.client_id() as u64;
                    idx.shuffle(&mut rng::stream_rng(seed, Stream::Shuffle, stream));
                    idx.chunks(bs.max(1)).map(|c| c.to_vec()).collect()
                }
            }
        })
        .collect();
    let rounds = per_client.iter().map(Vec::len).max().unwrap_or(0);
    (0..rounds)
        .map(|r| {
            per_client
                .iter()
                .map(|b| b.get(r).cloned().unwrap_or_default())
                .collect()
        })
        .collect()
}

/// (loss, accuracy) of `samples` under θ.
pub fn evaluate(
    source: &dyn ExpectationSource,
    samples: &[EncodedSample],
    head: &LogisticHead,
) -> Result<(f64, f64)> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let e0 = predictions(source, samples.iter().map(|s| &s.observable))?;
    let (loss, _) = head.predict_and_loss(&e0, &labels)?;
    Ok((loss, accuracy(&e0, &labels)))
}

fn epoch_metrics(
    setup: &TrainingSetup,
    server: &ServerState,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let train: Vec<EncodedSample> = setup
        .clients
        .iter()
        .flat_map(|c| c.samples().iter().cloned())
        .collect();
    let (loss, train_acc, test_acc) = match (setup.shadow_metrics, setup.mode) {
        (true, TrainingMode::Shadow { mom }) => {
            let state = server.ansatz.run(&server.theta)?;
            let mut r =
                rng::stream_rng(seed_for_metrics(setup.seed), Stream::Shadows, epoch as u64);
            let shadow = collect_shadow(&state, mom.total(), &mut r)?;
            let entries = [shadow];
            let source = ShadowSource::new(&entries, mom)?;
            let (l, a) = evaluate(&source, &train, &setup.head)?;
            let (_, t) = evaluate(&source, &setup.test, &setup.head)?;
            (l, a, t)
        }
        _ => {
            let source = ExactSource::at(&server.ansatz, &server.theta)?;
            let (l, a) = evaluate(&source, &train, &setup.head)?;
            let (_, t) = evaluate(&source, &setup.test, &setup.head)?;
            (l, a, t)
        }
    };
    Ok((loss, train_acc, test_acc))
}

fn seed_for_metrics(seed: u64) -> u64 {
    rng::derive_seed(seed, Stream::Shadows, u64::MAX)
}

/// Runs `setup.epochs` epochs from θ drawn with the setup seed.
pub fn train(
    setup: &TrainingSetup,
    transport: &mut dyn Transport,
) -> Result<(TrainingHistory, ServerState)> {
    if setup.clients.is_empty() {
        return Err(Error::config("n_clients must be at least 1"));
    }
    if setup.test.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    if setup.batch_size == Some(0) {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut server =
        ServerState::random_init(setup.ansatz.clone(), setup.optimizer, setup.eta, setup.seed)?;
    let mut history = TrainingHistory::default();
    for epoch in 1..=setup.epochs {
        let start = Instant::now();
        let mut norms = Vec::new();
        for batches in epoch_batches(&setup.clients, setup.batch_size, setup.seed, epoch) {
            let metrics = run_round(
                &mut server,
                &setup.clients,
                Some(&batches),
                setup.mode,
                setup.seed,
                &setup.head,
                transport,
            )?;
            norms.push(metrics.grad_norm);
        }
        let (train_loss, train_accuracy, test_accuracy) = epoch_metrics(setup, &server, epoch)?;
        let wall_ms = if setup.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            test_accuracy,
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            wall_ms,
        });
    }
    Ok((history, server))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::sim::{build_hea, Gate};

    fn two_param_ansatz() -> Ansatz {
        Ansatz::new(1, 1, vec![Gate::ry(0, 0), Gate::rz(0, 1)]).unwrap()
    }

    fn msg(id: u16, samples: u32, g: Vec<f64>) -> LocalGradientMsg {
        LocalGradientMsg {
            client_id: id,
            iteration: 0,
            samples,
            gradient: GradientVector(g),
            local_loss: 0.0,
        }
    }

    fn toy_samples(n: usize, count: usize, seed: u64) -> Vec<EncodedSample> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
                EncodedSample::from_features(&x, r.random_range(0..2u8), n).unwrap()
            })
            .collect()
    }

    #[test]
    fn sgd_example() {
        let ansatz = two_param_ansatz();
        let mut s = ServerState::new(ansatz, vec![1.0, 0.5], OptimizerKind::Sgd, 0.003).unwrap();
        s.optimizer_step(&GradientVector(vec![2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(s.theta()[0], 0.994, epsilon = 1e-15);
        assert_eq!(s.theta()[1], 0.5);
        assert_eq!(s.iteration(), 1);
    }

    #[test]
    fn adam_first_step_hand_evaluated() {
        let ansatz = two_param_ansatz();
        let mut s = ServerState::new(ansatz, vec![0.0, 0.0], OptimizerKind::Adam, 0.003).unwrap();
        s.optimizer_step(&GradientVector(vec![1.0, -0.25])).unwrap();
        // m̂ = g and v̂ = g² after bias correction, so the step is η·g/(|g|+ε)
        assert_abs_diff_eq!(s.theta()[0], -0.003 * 1.0 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(s.theta()[1], 0.003 * 0.25 / (0.25 + 1e-8), epsilon = 1e-15);
        match s.optimizer() {
            Optimizer::Adam { m, v, steps } => {
                assert_eq!(*steps, 1);
                assert_abs_diff_eq!(m[0], 0.1, epsilon = 1e-15);
                assert_abs_diff_eq!(v[0], 0.001, epsilon = 1e-15);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn non_finite_step_is_rejected_atomically() {
        let ansatz = two_param_ansatz();
        let mut s = ServerState::new(ansatz, vec![0.3, 0.1], OptimizerKind::Adam, 0.003).unwrap();
        let err = s
            .optimizer_step(&GradientVector(vec![0.1, f64::NAN]))
            .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }));
        assert_eq!(s.theta(), &[0.3, 0.1]);
        assert_eq!(s.optimizer(), &Optimizer::new(OptimizerKind::Adam, 2));
        assert_eq!(s.iteration(), 0);
    }

    #[test]
    fn aggregation_examples() {
        let g = aggregate(&[msg(0, 100, vec![4.0; 3]), msg(1, 300, vec![0.0; 3])]).unwrap();
        assert_eq!(g.values(), &[1.0, 1.0, 1.0]);
        let single = aggregate(&[msg(5, 17, vec![0.25, -2.0])]).unwrap();
        assert_eq!(single.values(), &[0.25, -2.0]);
        let thirds = aggregate(&[
            msg(0, 700, vec![3.0]),
            msg(1, 700, vec![0.0]),
            msg(2, 700, vec![0.0]),
        ])
        .unwrap();
        assert_abs_diff_eq!(thirds.values()[0], 1.0, epsilon = 1e-15);
        assert!(matches!(aggregate(&[]), Err(Error::Usage(_))));
        let mut late = msg(1, 1, vec![0.0]);
        late.iteration = 3;
        assert!(matches!(
            aggregate(&[msg(0, 1, vec![0.0]), late]),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn aggregation_order_is_irrelevant() {
        let a = msg(0, 13, vec![0.1, 0.7]);
        let b = msg(1, 29, vec![-0.3, 1e-3]);
        let c = msg(2, 7, vec![5.0, -2.2]);
        let g1 = aggregate(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let g2 = aggregate(&[c, a, b]).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn single_client_exact_equals_pooled_gradient() {
        let ansatz = build_hea(3, 2).unwrap();
        let theta: Vec<f64> = (0..ansatz.n_params())
            .map(|k| 0.3 * k as f64 - 1.0)
            .collect();
        let samples = toy_samples(3, 12, 4);
        let head = LogisticHead::new(2.0).unwrap();
        let source = ExactSource::with_shifts(&ansatz, &theta).unwrap();
        let client = ClientState::new(0, samples.clone(), MomConfig::new(10, 1).unwrap()).unwrap();
        let local = client
            .gradient_from_source(&source, 0, None, &head)
            .unwrap();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let bundles = expectation_bundles(&source, samples.iter().map(|s| &s.observable)).unwrap();
        let pooled = head.loss_gradient(&bundles, &labels).unwrap();
        for (a, b) in local.gradient.values().iter().zip(pooled.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_clients_get_identical_shadow_gradients() {
        let ansatz = build_hea(2, 1).unwrap();
        let theta = vec![0.1, -0.4, 0.9, 0.2];
        let mom = MomConfig::new(200, 4).unwrap();
        let set = collect_shadow_set(&ansatz, &theta, &mom, 11, 0).unwrap();
        let samples = toy_samples(2, 5, 8);
        let head = LogisticHead::default();
        let a = client_local_gradient(
            &ClientState::new(0, samples.clone(), mom).unwrap(),
            &set,
            &head,
        )
        .unwrap();
        let b = client_local_gradient(&ClientState::new(1, samples, mom).unwrap(), &set, &head)
            .unwrap();
        assert_eq!(a.gradient, b.gradient);
        let wrong = ClientState::new(2, toy_samples(3, 2, 1), mom).unwrap();
        assert!(matches!(
            client_local_gradient(&wrong, &set, &head),
            Err(Error::Protocol { .. })
        ));
    }

    struct Broken;

    impl Transport for Broken {
        fn deliver_shadows<'s>(
            &mut self,
            _: u16,
            set: &'s ShadowSet,
        ) -> Result<Cow<'s, ShadowSet>> {
            Ok(Cow::Borrowed(set))
        }

        fn upload_gradient(&mut self, _: LocalGradientMsg) -> Result<LocalGradientMsg> {
            Err(Error::Io(io::Error::new(
                io::ErrorKind::BrokenPipe,
                "link down",
            )))
        }
    }

    #[test]
    fn failed_round_leaves_server_unchanged() {
        let ansatz = build_hea(2, 1).unwrap();
        let mut server = ServerState::random_init(ansatz, OptimizerKind::Adam, 0.01, 3).unwrap();
        let before = server.clone();
        let mom = MomConfig::new(50, 5).unwrap();
        let clients = vec![ClientState::new(0, toy_samples(2, 4, 1), mom).unwrap()];
        let head = LogisticHead::default();
        for mode in [TrainingMode::Exact, TrainingMode::Shadow { mom }] {
            assert!(run_round(&mut server, &clients, None, mode, 1, &head, &mut Broken).is_err());
            assert_eq!(server.theta(), before.theta());
            assert_eq!(server.optimizer(), before.optimizer());
            assert_eq!(server.iteration(), 0);
        }
    }

    #[test]
    fn framed_transport_matches_in_process() {
        let ansatz = build_hea(2, 1).unwrap();
        let mom = MomConfig::new(40, 4).unwrap();
        let clients = vec![
            ClientState::new(0, toy_samples(2, 6, 1), mom).unwrap(),
            ClientState::new(1, toy_samples(2, 3, 2), mom).unwrap(),
        ];
        let head = LogisticHead::default();
        let mode = TrainingMode::Shadow { mom };
        let mut a = ServerState::random_init(ansatz.clone(), OptimizerKind::Adam, 0.01, 9).unwrap();
        let mut b = a.clone();
        let mut framed = Framed::in_memory();
        for _ in 0..2 {
            let ma = run_round(&mut a, &clients, None, mode, 9, &head, &mut InProcess).unwrap();
            let mb = run_round(&mut b, &clients, None, mode, 9, &head, &mut framed).unwrap();
            assert_eq!(ma, mb);
        }
        assert_eq!(a.theta(), b.theta());
        assert_eq!(
            framed.bytes_to_clients(),
            2 * 2 * (22 + 9 * 40 * 2) + 2 * 2 * (20 + 8 * 5)
        );
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let mom = MomConfig::new(10, 1).unwrap();
        let clients = vec![
            ClientState::new(0, toy_samples(2, 7, 1), mom).unwrap(),
            ClientState::new(1, toy_samples(2, 3, 2), mom).unwrap(),
        ];
        let rounds = epoch_batches(&clients, Some(2), 5, 1);
        assert_eq!(rounds.len(), 4);
        for (ci, c) in clients.iter().enumerate() {
            let mut seen: Vec<usize> = rounds.iter().flat_map(|r| r[ci].clone()).collect();
            seen.sort();
            assert_eq!(seen, (0..c.samples().len()).collect::<Vec<_>>());
        }
        assert!(rounds[3][1].is_empty());
        assert_ne!(epoch_batches(&clients, Some(2), 5, 2), rounds);
        assert_eq!(
            epoch_batches(&clients, None, 5, 1),
            vec![vec![(0..7).collect::<Vec<_>>(), (0..3).collect()]]
        );
    }

    #[test]
    fn zero_epochs_keeps_initial_theta() {
        let ansatz = build_hea(2, 1).unwrap();
        let mom = MomConfig::new(10, 1).unwrap();
        let setup = TrainingSetup {
            ansatz: ansatz.clone(),
            clients: vec![ClientState::new(0, toy_samples(2, 4, 1), mom).unwrap()],
            test: toy_samples(2, 4, 2),
            optimizer: OptimizerKind::Adam,
            eta: 0.01,
            epochs: 0,
            mode: TrainingMode::Exact,
            batch_size: None,
            head: LogisticHead::default(),
            seed: 42,
            shadow_metrics: false,
            record_wall_time: false,
        };
        let (h, s) = train(&setup, &mut InProcess).unwrap();
        assert!(h.records.is_empty());
        let init = ServerState::random_init(ansatz, OptimizerKind::Adam, 0.01, 42).unwrap();
        assert_eq!(s.theta(), init.theta());
        assert!(init
            .theta()
            .iter()
            .all(|t| (-std::f64::consts::PI..std::f64::consts::PI).contains(t)));
        assert_eq!(h.to_csv(), format!("{HISTORY_HEADER}\n"));
    }
}
