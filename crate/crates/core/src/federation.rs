//! Synchronous FedAvg, independent of the transport.
//!
//! Per round the server broadcasts the global weights, every client runs E
//! local epochs of shuffled mini-batch SGD and answers with its updated
//! weights plus sample count; the server aggregates the sample-weighted
//! mean in f64 and repeats. Client validation metrics are computed on the
//! received global weights before local training, so the per-round history
//! measures the global model. Aggregation never fires with fewer than the
//! expected number of updates; a missing update aborts the run.

use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    classification_metrics, regression_metrics, weighted_mean_reports, MetricsReport,
};
use crate::model::{softmax_rows, BatchTargets, Mode, Model, ModelConfig, Task};
use crate::params::sgd_step;
use crate::profiling::RoundProfile;
use crate::protocol::{hash_weights, Channel, Message};
use crate::rng::{shuffle, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Communication rounds T.
    pub rounds: u32,
    /// Local epochs E per round.
    pub local_epochs: u32,
    pub lr: f32,
    pub batch_size: usize,
    /// Clients K; the barrier waits for exactly this many.
    pub expected_clients: usize,
    /// Per-phase timeout for join and for each round's collection barrier.
    pub timeout_s: u64,
    pub seed: u64,
    /// Fraction of each client's shard carved into a local validation split.
    pub val_fraction: f32,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 50,
            local_epochs: 5,
            lr: 5e-4,
            batch_size: 32,
            expected_clients: 6,
            timeout_s: 600,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs < 1 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.expected_clients < 1 {
            return Err(Error::Config("expected_clients must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// What one client returns after a round of local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub weights: Vec<f32>,
    pub layout_hash: u64,
    pub n_samples: u64,
    pub train_loss: f32,
    pub validation: MetricsReport,
}

/// Sample-weighted mean of the client weight vectors, accumulated in f64 in
/// ascending client-id order and emitted as f32.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Vec<f32>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    let dim = first.weights.len();
    for u in updates {
        if u.weights.len() != dim {
            return Err(Error::Aggregation(format!(
                "client {} sent {} weights, expected {dim}",
                u.client_id,
                u.weights.len()
            )));
        }
        if u.layout_hash != first.layout_hash {
            return Err(Error::Aggregation(format!(
                "client {} layout hash mismatch",
                u.client_id
            )));
        }
        if u.n_samples == 0 {
            return Err(Error::Aggregation(format!(
                "client {} reported zero samples",
                u.client_id
            )));
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut acc = vec![0.0f64; dim];
    for &i in &order {
        let u = &updates[i];
        let coeff = u.n_samples as f64 / total;
        for (a, &w) in acc.iter_mut().zip(&u.weights) {
            *a += coeff * w as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// Local training.

/// Seeded train/validation carve of `0..n`. The same derivation runs on the
/// client and in the centralized baseline (client id 0), which is what makes
/// the single-client federation exactly equal to centralized training.
pub fn train_val_split(n: usize, val_fraction: f32, seed: u64, client_id: u32) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(
        &mut order,
        &mut stream(seed).tag("valsplit").idx(client_id as u64).rng(),
    );
    let mut n_val = (n as f64 * val_fraction as f64).round() as usize;
    if n_val >= n {
        n_val = n.saturating_sub(1);
    }
    let (val, train) = order.split_at(n_val);
    (train.to_vec(), val.to_vec())
}

fn batch_tensors(data: &Dataset, indices: &[usize], task: &Task) -> (Tensor, Tensor, BatchTargets) {
    let b = indices.len();
    let mut img = Vec::with_capacity(b * data.d_img);
    let mut tab = Vec::with_capacity(b * data.d_tab);
    for &i in indices {
        img.extend_from_slice(&data.samples[i].img_feat);
        tab.extend_from_slice(&data.samples[i].tab_feat);
    }
    let targets = match task {
        Task::Classification { .. } => {
            BatchTargets::Classes(indices.iter().map(|&i| data.samples[i].class_label as usize).collect())
        }
        Task::Regression => {
            BatchTargets::Values(indices.iter().map(|&i| data.samples[i].pm25).collect())
        }
    };
    (
        Tensor::new(vec![b, data.d_img], img).unwrap(),
        Tensor::new(vec![b, data.d_tab], tab).unwrap(),
        targets,
    )
}

/// One epoch of shuffled mini-batch SGD; returns the sample-weighted mean
/// batch loss. Shuffle and dropout streams derive from
/// (seed, client, round, epoch) so reruns are bit-identical.
fn run_epoch(
    model: &mut Model,
    data: &Dataset,
    train_idx: &mut [usize],
    fed: &FederationConfig,
    client_id: u32,
    round: u32,
    epoch: u32,
) -> Result<f32> {
    shuffle(
        train_idx,
        &mut stream(fed.seed)
            .tag("shuffle")
            .idx(client_id as u64)
            .idx(round as u64)
            .idx(epoch as u64)
            .rng(),
    );
    let task = model.config().task;
    let mut loss_sum = 0.0f64;
    for (batch_no, chunk) in train_idx.chunks(fed.batch_size).enumerate() {
        let (img, tab, targets) = batch_tensors(data, chunk, &task);
        let dropout_seed = stream(fed.seed)
            .tag("dropout")
            .idx(client_id as u64)
            .idx(round as u64)
            .idx(epoch as u64)
            .idx(batch_no as u64)
            .seed64();
        let (loss, grads) = model.loss_and_grad(&img, &tab, &targets, Mode::Train { dropout_seed })?;
        sgd_step(model.params_mut(), &grads, fed.lr)?;
        loss_sum += loss as f64 * chunk.len() as f64;
    }
    Ok((loss_sum / train_idx.len().max(1) as f64) as f32)
}

/// Eval-mode metrics over the given index set (or the whole dataset).
pub fn evaluate_split(model: &Model, data: &Dataset, indices: Option<&[usize]>) -> Result<MetricsReport> {
    let owned: Vec<usize>;
    let indices = match indices {
        Some(idx) => idx,
        None => {
            owned = (0..data.len()).collect();
            &owned
        }
    };
    if indices.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let task = model.config().task;
    match task {
        Task::Classification { .. } => {
            let mut labels = Vec::with_capacity(indices.len());
            let mut probs: Vec<Vec<f32>> = Vec::with_capacity(indices.len());
            for chunk in indices.chunks(256) {
                let (img, tab, _) = batch_tensors(data, chunk, &task);
                let (logits, _) = model.forward(&img, &tab, Mode::Eval)?;
                let p = softmax_rows(&logits);
                for (r, &i) in chunk.iter().enumerate() {
                    labels.push(data.samples[i].class_label as usize);
                    probs.push(p.row(r).to_vec());
                }
            }
            classification_metrics(&labels, &probs)
        }
        Task::Regression => {
            let mut y = Vec::with_capacity(indices.len());
            let mut y_hat = Vec::with_capacity(indices.len());
            for chunk in indices.chunks(256) {
                let (img, tab, _) = batch_tensors(data, chunk, &task);
                let (out, _) = model.forward(&img, &tab, Mode::Eval)?;
                for (r, &i) in chunk.iter().enumerate() {
                    y.push(data.samples[i].pm25);
                    y_hat.push(out.at(r, 0));
                }
            }
            regression_metrics(&y, &y_hat)
        }
    }
}

/// One client round: validate the received global weights on the local
/// validation split, then train E epochs and return the update.
pub fn client_local_train(
    model: &mut Model,
    data: &Dataset,
    train_idx: &mut Vec<usize>,
    val_idx: &[usize],
    fed: &FederationConfig,
    client_id: u32,
    round: u32,
) -> Result<ClientUpdate> {
    if train_idx.is_empty() {
        return Err(Error::Data("client has no training samples".into()));
    }
    let validation = if val_idx.is_empty() {
        // Degenerate shard: fall back to the training split so the server
        // still sees a report.
        evaluate_split(model, data, Some(train_idx))?
    } else {
        evaluate_split(model, data, Some(val_idx))?
    };
    let mut loss_sum = 0.0f64;
    for epoch in 0..fed.local_epochs {
        loss_sum += run_epoch(model, data, train_idx, fed, client_id, round, epoch)? as f64;
    }
    Ok(ClientUpdate {
        client_id,
        weights: model.params().flatten(),
        layout_hash: model.params().layout().hash(),
        n_samples: train_idx.len() as u64,
        train_loss: (loss_sum / fed.local_epochs as f64) as f32,
        validation,
    })
}

// ---------------------------------------------------------------------------
// Client session loop.

/// Per-round record kept by the client for its own profile export.
pub struct ClientRunReport {
    pub client_id: u32,
    pub rounds_completed: u32,
    pub profiles: Vec<RoundProfile>,
    pub last_result: Option<MetricsReport>,
}

/// Join the federation over an established channel and serve rounds until
/// the shutdown message. The dataset must be loaded (and normalized) from
/// the client's manifest; an empty dataset refuses to join.
pub fn client_run(
    channel: &mut dyn Channel,
    name: &str,
    data: &Dataset,
    profile_interval: Option<Duration>,
) -> Result<ClientRunReport> {
    if data.is_empty() {
        return Err(Error::Data("local dataset is empty; refusing to join".into()));
    }
    channel.send(&Message::JoinRequest {
        name: name.to_string(),
        d_tab: data.d_tab as u32,
        n_samples: data.len() as u64,
    })?;
    let (client_id, model_cfg, fed) = match channel.recv()? {
        Message::JoinAccept {
            client_id,
            model,
            federation,
        } => (client_id, model, federation),
        Message::JoinReject { reason } => {
            return Err(Error::Protocol(format!("join rejected: {reason}")));
        }
        other => {
            return Err(Error::Protocol(format!(
                "expected join response, got kind {}",
                other.kind()
            )));
        }
    };
    fed.validate()?;
    if model_cfg.d_tab_in != data.d_tab || model_cfg.d_img_in != data.d_img {
        return Err(Error::Data(format!(
            "model expects tab {} / img {}, local data is tab {} / img {}",
            model_cfg.d_tab_in, model_cfg.d_img_in, data.d_tab, data.d_img
        )));
    }
    let mut model = Model::init(model_cfg, fed.seed)?;
    let expected_len = model.params().total_len();
    let (mut train_idx, val_idx) = train_val_split(data.len(), fed.val_fraction, fed.seed, client_id);

    let mut report = ClientRunReport {
        client_id,
        rounds_completed: 0,
        profiles: Vec::new(),
        last_result: None,
    };
    loop {
        match channel.recv()? {
            Message::RoundStart { round, weights } => {
                if weights.len() != expected_len {
                    return Err(Error::Codec(format!(
                        "round {round} weights have {} elements, model expects {expected_len}",
                        weights.len()
                    )));
                }
                let bytes_before = (channel.bytes_sent(), channel.bytes_received());
                let sampler = profile_interval.map(crate::profiling::sample_resources);
                let started = Instant::now();
                model.params_mut().load_flat(&weights)?;
                let update =
                    client_local_train(&mut model, data, &mut train_idx, &val_idx, &fed, client_id, round)?;
                let train_seconds = started.elapsed().as_secs_f64();
                let (mean_cpu_percent, peak_rss_bytes) =
                    sampler.map_or((None, None), |s| s.finalize());
                channel.send(&Message::RoundUpdate {
                    round,
                    weights: update.weights,
                    layout_hash: update.layout_hash,
                    n_samples: update.n_samples,
                    train_loss: update.train_loss,
                    validation: update.validation,
                })?;
                report.profiles.push(RoundProfile {
                    round,
                    train_seconds,
                    peak_rss_bytes,
                    mean_cpu_percent,
                    bytes_up: channel.bytes_sent() - bytes_before.0,
                    bytes_down: channel.bytes_received() - bytes_before.1,
                });
                report.rounds_completed = round + 1;
            }
            Message::RoundResult { metrics, .. } => {
                report.last_result = Some(metrics);
            }
            Message::Shutdown { .. } => return Ok(report),
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected message kind {} mid-round",
                    other.kind()
                )));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Server orchestration.

/// One aggregated round in the server history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub weights_hash: u64,
    pub train_loss: f32,
    pub validation: MetricsReport,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub round_seconds: f64,
}

enum HandlerEvent {
    Joined {
        slot: usize,
        name: String,
        d_tab: u32,
        n_samples: u64,
    },
    Update {
        slot: usize,
        update: ClientUpdate,
        bytes_sent: u64,
        bytes_received: u64,
    },
    Failed {
        slot: usize,
        error: Error,
    },
}

enum HandlerCmd {
    Accept(Message),
    Reject(String),
    Broadcast(Message),
    Shutdown(Message),
}

fn handler_loop(
    slot: usize,
    mut channel: Box<dyn Channel>,
    events: mpsc::Sender<HandlerEvent>,
    cmds: mpsc::Receiver<HandlerCmd>,
) {
    let fail = |e: Error, events: &mpsc::Sender<HandlerEvent>| {
        let _ = events.send(HandlerEvent::Failed { slot, error: e });
    };
    // Join phase.
    match channel.recv() {
        Ok(Message::JoinRequest {
            name,
            d_tab,
            n_samples,
        }) => {
            // The authenticated identity wins; a claimed name that differs
            // from the certificate common name is rejected outright.
            if name != channel.peer_name() {
                let reason = format!(
                    "join name '{name}' does not match authenticated identity '{}'",
                    channel.peer_name()
                );
                let _ = channel.send(&Message::JoinReject {
                    reason: reason.clone(),
                });
                fail(Error::Auth(reason), &events);
                return;
            }
            if events
                .send(HandlerEvent::Joined {
                    slot,
                    name,
                    d_tab,
                    n_samples,
                })
                .is_err()
            {
                return;
            }
        }
        Ok(other) => {
            fail(
                Error::Protocol(format!("expected JoinRequest, got kind {}", other.kind())),
                &events,
            );
            return;
        }
        Err(e) => {
            fail(e, &events);
            return;
        }
    }
    match cmds.recv() {
        Ok(HandlerCmd::Accept(msg)) => {
            if let Err(e) = channel.send(&msg) {
                fail(e, &events);
                return;
            }
        }
        Ok(HandlerCmd::Reject(reason)) => {
            let _ = channel.send(&Message::JoinReject { reason });
            return;
        }
        _ => return,
    }
    // Round phase.
    while let Ok(cmd) = cmds.recv() {
        match cmd {
            HandlerCmd::Broadcast(msg) => {
                let expects_reply = matches!(msg, Message::RoundStart { .. });
                if let Err(e) = channel.send(&msg) {
                    fail(e, &events);
                    return;
                }
                if !expects_reply {
                    continue;
                }
                match channel.recv() {
                    Ok(Message::RoundUpdate {
                        round: _,
                        weights,
                        layout_hash,
                        n_samples,
                        train_loss,
                        validation,
                    }) => {
                        let event = HandlerEvent::Update {
                            slot,
                            update: ClientUpdate {
                                client_id: 0, // coordinator fills the id in
                                weights,
                                layout_hash,
                                n_samples,
                                train_loss,
                                validation,
                            },
                            bytes_sent: channel.bytes_sent(),
                            bytes_received: channel.bytes_received(),
                        };
                        if events.send(event).is_err() {
                            return;
                        }
                    }
                    Ok(other) => {
                        fail(
                            Error::Protocol(format!(
                                "expected RoundUpdate, got kind {}",
                                other.kind()
                            )),
                            &events,
                        );
                        return;
                    }
                    Err(e) => {
                        fail(e, &events);
                        return;
                    }
                }
            }
            HandlerCmd::Shutdown(msg) => {
                let _ = channel.send(&msg);
                return;
            }
            HandlerCmd::Accept(_) | HandlerCmd::Reject(_) => return,
        }
    }
}

/// Run the synchronous federation over already-authenticated channels.
/// Completed rounds are appended to `history` even when the run aborts, so
/// callers can persist the partial history alongside the error.
pub fn server_run(
    fed: &FederationConfig,
    model_cfg: &ModelConfig,
    channels: Vec<Box<dyn Channel>>,
    history: &mut Vec<RoundRecord>,
) -> Result<Vec<f32>> {
    fed.validate()?;
    model_cfg.validate()?;
    if channels.len() != fed.expected_clients {
        return Err(Error::Protocol(format!(
            "{} channels connected, federation expects {}",
            channels.len(),
            fed.expected_clients
        )));
    }
    let k = fed.expected_clients;
    let timeout = Duration::from_secs(fed.timeout_s);
    let model = Model::init(model_cfg.clone(), fed.seed)?;
    let layout_hash = model.params().layout().hash();
    let mut weights = model.into_params().flatten();

    let (event_tx, events) = mpsc::channel();
    let mut handler_cmds = Vec::with_capacity(k);
    let mut threads = Vec::with_capacity(k);
    for (slot, channel) in channels.into_iter().enumerate() {
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let tx = event_tx.clone();
        threads.push(thread::spawn(move || handler_loop(slot, channel, tx, cmd_rx)));
        handler_cmds.push(cmd_tx);
    }
    drop(event_tx);

    let run = server_coordinate(
        fed,
        model_cfg,
        &mut weights,
        layout_hash,
        &events,
        &handler_cmds,
        timeout,
        history,
    );
    // Release handlers that may still be waiting for a command.
    drop(handler_cmds);
    if run.is_ok() {
        for t in threads {
            let _ = t.join();
        }
    }
    // On abort, handlers may be parked in a blocking recv on a silent peer;
    // they are detached and die with their sockets.
    run.map(|()| weights)
}

#[allow(clippy::too_many_arguments)]
fn server_coordinate(
    fed: &FederationConfig,
    model_cfg: &ModelConfig,
    weights: &mut Vec<f32>,
    layout_hash: u64,
    events: &mpsc::Receiver<HandlerEvent>,
    handler_cmds: &[mpsc::Sender<HandlerCmd>],
    timeout: Duration,
    history: &mut Vec<RoundRecord>,
) -> Result<()> {
    let k = fed.expected_clients;
    // Join barrier: collect K join requests, then assign client ids by
    // sorted name so the assignment is independent of connection order.
    let mut joins: Vec<(usize, String, u32, u64)> = Vec::with_capacity(k);
    let deadline = Instant::now() + timeout;
    while joins.len() < k {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match events.recv_timeout(remaining) {
            Ok(HandlerEvent::Joined {
                slot,
                name,
                d_tab,
                n_samples,
            }) => joins.push((slot, name, d_tab, n_samples)),
            Ok(HandlerEvent::Failed { slot, error }) => {
                return Err(Error::Protocol(format!(
                    "client in slot {slot} failed during join: {error}"
                )));
            }
            Ok(HandlerEvent::Update { slot, .. }) => {
                return Err(Error::Protocol(format!(
                    "client in slot {slot} sent an update before joining"
                )));
            }
            Err(_) => {
                return Err(Error::Timeout(format!(
                    "only {} of {k} clients joined within {}s",
                    joins.len(),
                    fed.timeout_s
                )));
            }
        }
    }
    joins.sort_by(|a, b| a.1.cmp(&b.1));
    let mut slot_to_id = vec![0u32; k];
    for (id, (slot, name, d_tab, n_samples)) in joins.iter().enumerate() {
        if id > 0 && joins[id - 1].1 == *name {
            let reason = format!("duplicate client name '{name}'");
            let _ = handler_cmds[*slot].send(HandlerCmd::Reject(reason.clone()));
            return Err(Error::Protocol(reason));
        }
        if *d_tab as usize != model_cfg.d_tab_in {
            let reason = format!(
                "client '{name}' has d_tab {d_tab}, federation trains on {}",
                model_cfg.d_tab_in
            );
            let _ = handler_cmds[*slot].send(HandlerCmd::Reject(reason.clone()));
            return Err(Error::Protocol(reason));
        }
        if *n_samples == 0 {
            let reason = format!("client '{name}' has no samples");
            let _ = handler_cmds[*slot].send(HandlerCmd::Reject(reason.clone()));
            return Err(Error::Protocol(reason));
        }
        slot_to_id[*slot] = id as u32;
        handler_cmds[*slot]
            .send(HandlerCmd::Accept(Message::JoinAccept {
                client_id: id as u32,
                model: model_cfg.clone(),
                federation: fed.clone(),
            }))
            .map_err(|_| Error::Protocol(format!("handler for '{name}' is gone")))?;
    }

    let mut prev_bytes = vec![(0u64, 0u64); k];
    for round in 0..fed.rounds {
        let started = Instant::now();
        for cmds in handler_cmds {
            cmds.send(HandlerCmd::Broadcast(Message::RoundStart {
                round,
                weights: weights.clone(),
            }))
            .map_err(|_| Error::Protocol("a session handler is gone".into()))?;
        }
        let mut updates: Vec<ClientUpdate> = Vec::with_capacity(k);
        let mut round_bytes = (0u64, 0u64);
        let deadline = Instant::now() + timeout;
        while updates.len() < k {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match events.recv_timeout(remaining) {
                Ok(HandlerEvent::Update {
                    slot,
                    mut update,
                    bytes_sent,
                    bytes_received,
                }) => {
                    update.client_id = slot_to_id[slot];
                    if update.weights.len() != weights.len() {
                        return Err(Error::Aggregation(format!(
                            "client {} sent {} weights, global model has {}",
                            update.client_id,
                            update.weights.len(),
                            weights.len()
                        )));
                    }
                    if update.layout_hash != layout_hash {
                        return Err(Error::Aggregation(format!(
                            "client {} layout hash mismatch",
                            update.client_id
                        )));
                    }
                    round_bytes.0 += bytes_received - prev_bytes[slot].1;
                    round_bytes.1 += bytes_sent - prev_bytes[slot].0;
                    prev_bytes[slot] = (bytes_sent, bytes_received);
                    updates.push(update);
                }
                Ok(HandlerEvent::Failed { slot, error }) => {
                    return Err(Error::Protocol(format!(
                        "client {} failed in round {round}: {error}",
                        slot_to_id[slot]
                    )));
                }
                Ok(HandlerEvent::Joined { slot, .. }) => {
                    return Err(Error::Protocol(format!(
                        "unexpected join from slot {slot} mid-run"
                    )));
                }
                Err(_) => {
                    return Err(Error::Timeout(format!(
                        "round {round}: {} of {k} updates within {}s",
                        updates.len(),
                        fed.timeout_s
                    )));
                }
            }
        }
        *weights = aggregate(&updates)?;
        let total_n: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
        let train_loss = (updates
            .iter()
            .map(|u| u.n_samples as f64 * u.train_loss as f64)
            .sum::<f64>()
            / total_n) as f32;
        let validation = weighted_mean_reports(
            &updates
                .iter()
                .map(|u| (u.n_samples, u.validation))
                .collect::<Vec<_>>(),
        )?;
        for cmds in handler_cmds {
            cmds.send(HandlerCmd::Broadcast(Message::RoundResult {
                round,
                metrics: validation,
            }))
            .map_err(|_| Error::Protocol("a session handler is gone".into()))?;
        }
        history.push(RoundRecord {
            round,
            weights_hash: hash_weights(weights),
            train_loss,
            validation,
            bytes_up: round_bytes.0,
            bytes_down: round_bytes.1,
            round_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let shutdown = Message::Shutdown {
        weights_hash: hash_weights(weights),
    };
    for cmds in handler_cmds {
        let _ = cmds.send(HandlerCmd::Shutdown(shutdown.clone()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Centralized baseline.

/// Plain mini-batch training over the pooled dataset with the same split,
/// shuffle and dropout derivations as a federated client with id 0 (one
/// epoch here corresponds to round e, epoch 0). Serves both as the baseline
/// and as the equivalence oracle for single-client FedAvg.
pub fn centralized_train(
    model_cfg: &ModelConfig,
    fed: &FederationConfig,
    epochs: u32,
    data: &Dataset,
) -> Result<(Vec<f32>, Vec<RoundRecord>)> {
    fed.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut model = Model::init(model_cfg.clone(), fed.seed)?;
    let (mut train_idx, val_idx) = train_val_split(data.len(), fed.val_fraction, fed.seed, 0);
    let mut history = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        let started = Instant::now();
        let validation = if val_idx.is_empty() {
            evaluate_split(&model, data, Some(&train_idx))?
        } else {
            evaluate_split(&model, data, Some(&val_idx))?
        };
        let loss = run_epoch(&mut model, data, &mut train_idx, fed, 0, epoch, 0)?;
        history.push(RoundRecord {
            round: epoch,
            weights_hash: hash_weights(&model.params().flatten()),
            train_loss: loss,
            validation,
            bytes_up: 0,
            bytes_down: 0,
            round_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model.into_params().flatten(), history))
}

// ---------------------------------------------------------------------------
// History files.

const HISTORY_HEADER: &str =
    "round,loss,mae,rmse,r2,accuracy,macro_f1,macro_auc,bytes_up,bytes_down,round_seconds";

fn opt_cell(v: Option<f32>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_history_csv(path: &Path, history: &[RoundRecord]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.train_loss,
            opt_cell(r.validation.mae),
            opt_cell(r.validation.rmse),
            opt_cell(r.validation.r2),
            opt_cell(r.validation.accuracy),
            opt_cell(r.validation.macro_f1),
            opt_cell(r.validation.macro_auc),
            r.bytes_up,
            r.bytes_down,
            r.round_seconds
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_history_json(path: &Path, history: &[RoundRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(history).map_err(|e| Error::Codec(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::metrics::TaskKind;
    use crate::protocol::InProcessChannel;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n,
            d_tab: 6,
            d_img: 12,
            noise: 0.3,
            seed,
        })
        .unwrap()
    }

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            d_img_in: 12,
            d_tab_in: 6,
            d_emb: 8,
            d_fused: 16,
            ..ModelConfig::classification(6)
        }
    }

    fn update(id: u32, n: u64, weights: Vec<f32>) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            weights,
            layout_hash: 7,
            n_samples: n,
            train_loss: 0.0,
            validation: regression_report(),
        }
    }

    fn regression_report() -> MetricsReport {
        crate::metrics::regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap()
    }

    #[test]
    fn aggregate_single_client_is_identity() {
        let w = vec![0.1f32, -0.5, 3.25];
        let out = aggregate(&[update(0, 17, w.clone())]).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn aggregate_equal_weights_is_plain_mean() {
        let out = aggregate(&[update(0, 5, vec![0.0]), update(1, 5, vec![2.0])]).unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn aggregate_weighted_mean_matches_hand_case() {
        let out = aggregate(&[update(0, 1, vec![0.0]), update(1, 3, vec![4.0])]).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn aggregate_is_arrival_order_invariant() {
        let a = update(0, 3, vec![1.0, 2.0]);
        let b = update(1, 7, vec![-4.0, 0.5]);
        let c = update(2, 11, vec![2.5, 2.5]);
        let x = aggregate(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = aggregate(&[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate(&[]).is_err());
        let err = aggregate(&[update(0, 1, vec![1.0]), update(3, 1, vec![1.0, 2.0])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("client 3"), "{err}");
        let mut bad_hash = update(1, 1, vec![1.0]);
        bad_hash.layout_hash = 99;
        let err = aggregate(&[update(0, 1, vec![1.0]), bad_hash])
            .unwrap_err()
            .to_string();
        assert!(err.contains("client 1"), "{err}");
    }

    #[test]
    fn train_val_split_is_deterministic_and_disjoint() {
        let (train, val) = train_val_split(100, 0.1, 42, 3);
        let (train2, val2) = train_val_split(100, 0.1, 42, 3);
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 90);
        let mut all: Vec<usize> = train.iter().chain(&val).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn zero_lr_returns_received_weights_bit_exact() {
        let data = tiny_dataset(64, 5);
        let cfg = small_model_cfg();
        let fed = FederationConfig {
            lr: 0.0,
            local_epochs: 2,
            batch_size: 16,
            expected_clients: 1,
            seed: 9,
            ..FederationConfig::default()
        };
        let mut model = Model::init(cfg, fed.seed).unwrap();
        let before = model.params().flatten();
        let (mut train_idx, val_idx) = train_val_split(data.len(), fed.val_fraction, fed.seed, 0);
        let update =
            client_local_train(&mut model, &data, &mut train_idx, &val_idx, &fed, 0, 0).unwrap();
        assert_eq!(update.weights, before);
        assert!(update.train_loss.is_finite());
    }

    #[test]
    fn local_train_is_deterministic() {
        let data = tiny_dataset(96, 6);
        let cfg = small_model_cfg();
        let fed = FederationConfig {
            local_epochs: 2,
            batch_size: 32,
            expected_clients: 1,
            seed: 11,
            ..FederationConfig::default()
        };
        let run = || {
            let mut model = Model::init(cfg.clone(), fed.seed).unwrap();
            let (mut train_idx, val_idx) =
                train_val_split(data.len(), fed.val_fraction, fed.seed, 2);
            client_local_train(&mut model, &data, &mut train_idx, &val_idx, &fed, 2, 4).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.validation, b.validation);
    }

    #[test]
    fn single_step_full_batch_matches_closed_form() {
        // E=1, batch >= N: the returned weights must equal W - lr * grad(W)
        // where the gradient is computed independently on the same batch.
        let data = tiny_dataset(40, 8);
        let cfg = small_model_cfg();
        let fed = FederationConfig {
            local_epochs: 1,
            batch_size: 1024,
            lr: 0.05,
            expected_clients: 1,
            seed: 13,
            val_fraction: 0.0,
            ..FederationConfig::default()
        };
        let mut model = Model::init(cfg.clone(), fed.seed).unwrap();
        let w0 = model.params().flatten();
        let (mut train_idx, val_idx) = train_val_split(data.len(), 0.0, fed.seed, 0);
        let update =
            client_local_train(&mut model, &data, &mut train_idx, &val_idx, &fed, 0, 0).unwrap();

        // Independent gradient computation with the same shuffle/dropout
        // derivations.
        let reference = Model::init(cfg, fed.seed).unwrap();
        let mut order: Vec<usize> = train_idx.clone();
        // train_idx was shuffled in place by the epoch; reproduce it.
        let (fresh, _) = train_val_split(data.len(), 0.0, fed.seed, 0);
        order.copy_from_slice(&fresh);
        shuffle(
            &mut order,
            &mut stream(fed.seed).tag("shuffle").idx(0).idx(0).idx(0).rng(),
        );
        let (img, tab, targets) = batch_tensors(&data, &order, &reference.config().task);
        let dropout_seed = stream(fed.seed)
            .tag("dropout")
            .idx(0)
            .idx(0)
            .idx(0)
            .idx(0)
            .seed64();
        let (_, grads) = reference
            .loss_and_grad(&img, &tab, &targets, Mode::Train { dropout_seed })
            .unwrap();
        let flat_grads = grads.flatten();
        for ((updated, initial), g) in update.weights.iter().zip(&w0).zip(&flat_grads) {
            let expect = initial - fed.lr * g;
            assert!((updated - expect).abs() <= 1e-7, "{updated} vs {expect}");
        }
    }

    #[test]
    fn in_process_federation_runs_and_k1_round_count() {
        let data = tiny_dataset(60, 3);
        let model_cfg = small_model_cfg();
        let fed = FederationConfig {
            rounds: 3,
            local_epochs: 1,
            batch_size: 16,
            expected_clients: 1,
            timeout_s: 60,
            seed: 21,
            ..FederationConfig::default()
        };
        let (server_side, mut client_side) = InProcessChannel::pair("client-0");
        let data_clone = data.clone();
        let client = thread::spawn(move || {
            client_run(&mut client_side, "client-0", &data_clone, None).unwrap()
        });
        let mut history = Vec::new();
        let weights =
            server_run(&fed, &model_cfg, vec![Box::new(server_side)], &mut history).unwrap();
        let report = client.join().unwrap();
        assert_eq!(history.len(), 3);
        assert_eq!(report.rounds_completed, 3);
        assert_eq!(report.profiles.len(), 3);
        assert!(!weights.is_empty());
        assert_eq!(history[0].validation.task, TaskKind::Classification);
        // Byte accounting: every round moved the weights down and up once.
        assert!(history[0].bytes_down > (weights.len() * 4) as u64);
        assert!(history[0].bytes_up > (weights.len() * 4) as u64);
    }

    #[test]
    fn zero_rounds_returns_initialization() {
        let model_cfg = small_model_cfg();
        let fed = FederationConfig {
            rounds: 0,
            expected_clients: 1,
            timeout_s: 10,
            seed: 5,
            ..FederationConfig::default()
        };
        let data = tiny_dataset(30, 1);
        let (server_side, mut client_side) = InProcessChannel::pair("client-0");
        let client = thread::spawn(move || client_run(&mut client_side, "client-0", &data, None));
        let mut history = Vec::new();
        let weights =
            server_run(&fed, &model_cfg, vec![Box::new(server_side)], &mut history).unwrap();
        let init = Model::init(model_cfg, fed.seed).unwrap().params().flatten();
        assert_eq!(weights, init);
        assert!(history.is_empty());
        client.join().unwrap().unwrap();
    }

    #[test]
    fn missing_update_aborts_with_timeout() {
        let model_cfg = small_model_cfg();
        let fed = FederationConfig {
            rounds: 1,
            expected_clients: 2,
            timeout_s: 1,
            seed: 5,
            ..FederationConfig::default()
        };
        let data = tiny_dataset(30, 1);
        let (server_a, mut client_a) = InProcessChannel::pair("client-0");
        let (server_b, _client_b_kept_silent) = InProcessChannel::pair("client-1");
        let t = thread::spawn(move || {
            // This client joins but the other never does.
            let _ = client_run(&mut client_a, "client-0", &data, None);
        });
        let mut history = Vec::new();
        let err = server_run(
            &fed,
            &model_cfg,
            vec![Box::new(server_a), Box::new(server_b)],
            &mut history,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Timeout(_)), "{err}");
        assert!(history.is_empty());
        drop(_client_b_kept_silent);
        let _ = t.join();
    }

    #[test]
    fn centralized_zero_epochs_returns_init() {
        let data = tiny_dataset(50, 2);
        let cfg = small_model_cfg();
        let fed = FederationConfig {
            seed: 17,
            ..FederationConfig::default()
        };
        let (w, history) = centralized_train(&cfg, &fed, 0, &data).unwrap();
        assert!(history.is_empty());
        assert_eq!(w, Model::init(cfg, 17).unwrap().params().flatten());
    }

    #[test]
    fn centralized_same_seed_identical_history() {
        let data = tiny_dataset(80, 4);
        let cfg = small_model_cfg();
        let fed = FederationConfig {
            batch_size: 16,
            seed: 23,
            ..FederationConfig::default()
        };
        let (w1, h1) = centralized_train(&cfg, &fed, 3, &data).unwrap();
        let (w2, h2) = centralized_train(&cfg, &fed, 3, &data).unwrap();
        assert_eq!(w1, w2);
        let losses1: Vec<f32> = h1.iter().map(|r| r.train_loss).collect();
        let losses2: Vec<f32> = h2.iter().map(|r| r.train_loss).collect();
        assert_eq!(losses1, losses2);
    }

    #[test]
    fn aggregated_validation_weighted_mean() {
        let mut a = regression_report();
        a.mae = Some(1.0);
        let mut b = regression_report();
        b.mae = Some(3.0);
        let merged = weighted_mean_reports(&[(10, a), (30, b)]).unwrap();
        assert!((merged.mae.unwrap() - 2.5).abs() < 1e-6);
    }

    #[test]
    fn history_csv_has_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let record = RoundRecord {
            round: 0,
            weights_hash: 1,
            train_loss: 0.5,
            validation: regression_report(),
            bytes_up: 100,
            bytes_down: 200,
            round_seconds: 0.25,
        };
        let path = dir.path().join("h.csv");
        write_history_csv(&path, &[record.clone(), record]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("round,loss,mae"));
        // Classification columns are empty for a regression record.
        assert!(lines[1].contains(",,"));
    }
}
