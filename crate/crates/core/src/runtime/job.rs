//! Controller and executor loops.
//!
//! The controller accepts one connection per executor, then runs
//! synchronous rounds: every executor gets the global model, trains, and
//! returns an update; aggregation waits for all of them. A round in which
//! any executor fails or times out fails as a whole.

use std::thread;
use crate::clock::Instant;

use log::{debug, info, warn};

use super::toy::{
    fedavg, global_loss, initial_model, make_shard, model_checksum, target_weights,
    toy_local_train, Shard, TaskError,
};
use super::{ClientRecord, JobConfig, JobError, JobReport, JobTotals, RoundRecord};
use crate::filter::{
    apply_chain, FilterChain, FilterPoint, Message, MessageKind, Payload, HDR_JOB_ID, HDR_ROUND,
    HDR_SOURCE,
};
use crate::quant::size_report;
use crate::sfm::{Acceptor, Connection, Driver, MemoryDriver};
use crate::streaming::Peer;
use crate::tensor::ParameterMap;

const HDR_PHASE: &str = "phase";
const HDR_CLIENT: &str = "client";
const HDR_SAMPLES: &str = "samples";
const HDR_LOSS: &str = "loss";
const PHASE_JOIN: &str = "join";
const PHASE_TRAIN: &str = "train";
const PHASE_END: &str = "end";

fn job_id(config: &JobConfig) -> String {
    format!("toy-{}", config.task.seed)
}

fn header<'a>(msg: &'a Message, key: &str) -> Result<&'a str, JobError> {
    msg.header(key)
        .ok_or_else(|| JobError::Handshake(format!("message lacks the {key:?} header")))
}

fn parse_header<T: std::str::FromStr>(msg: &Message, key: &str) -> Result<T, JobError> {
    let raw = header(msg, key)?;
    raw.parse()
        .map_err(|_| JobError::Handshake(format!("bad {key:?} header {raw:?}")))
}

fn plain_model(msg: Message) -> Result<ParameterMap, TaskError> {
    match msg.payload {
        Payload::Plain(m) => Ok(m),
        Payload::Quantized(_) => Err(TaskError::NotPlain("quantized")),
        Payload::Stream(_) => Err(TaskError::NotPlain("stream reference")),
    }
}

struct Traffic(u64, u64);

impl Traffic {
    fn of(peer: &Peer) -> Self {
        let s = peer.stats();
        Traffic(s.bytes_sent, s.bytes_received)
    }

    fn since(&self, earlier: &Traffic) -> u64 {
        (self.0 - earlier.0) + (self.1 - earlier.1)
    }
}

/// One executor's part of a round, seen from the controller.
fn exchange(
    peer: &mut Peer,
    global: &ParameterMap,
    client: usize,
    round: usize,
    chain: &FilterChain,
    job: &str,
) -> Result<(ParameterMap, ClientRecord), JobError> {
    let start = Traffic::of(peer);
    let task = Message::new(MessageKind::TaskData, Payload::Plain(global.clone()))
        .with_header(HDR_JOB_ID, job)
        .with_header(HDR_ROUND, round.to_string())
        .with_header(HDR_SOURCE, "server")
        .with_header(HDR_PHASE, PHASE_TRAIN);
    let task = apply_chain(task, FilterPoint::TaskDataOutServer, chain)?;
    peer.send_message(&task)?;
    drop(task);
    let sent = Traffic::of(peer);

    let reply = peer.recv_message()?;
    let done = Traffic::of(peer);
    let reply = apply_chain(reply, FilterPoint::TaskResultInServer, chain)?;
    let echoed: usize = parse_header(&reply, HDR_ROUND)?;
    let from: usize = parse_header(&reply, HDR_CLIENT)?;
    if echoed != round || from != client {
        return Err(JobError::Handshake(format!(
            "expected round {round} from client {client}, got round {echoed} from client {from}"
        )));
    }
    let samples: u64 = parse_header(&reply, HDR_SAMPLES)?;
    let train_loss: f64 = parse_header(&reply, HDR_LOSS)?;
    let update = plain_model(reply)?;
    Ok((
        update,
        ClientRecord {
            client,
            samples,
            train_loss,
            down_bytes: sent.since(&start),
            up_bytes: done.since(&sent),
        },
    ))
}

/// Accepts `config.clients` executors and runs the job to completion.
pub fn run_server(acceptor: &dyn Acceptor, config: &JobConfig) -> Result<JobReport, JobError> {
    config.validate()?;
    let started = Instant::now();
    let chain = config.filter_chain();
    let job = job_id(config);
    let target = target_weights(&config.task);
    let shards: Vec<Shard> = (0..config.clients)
        .map(|k| make_shard(&config.task, &target, k))
        .collect();
    drop(target);

    let mut slots: Vec<Option<Peer>> = (0..config.clients).map(|_| None).collect();
    for _ in 0..config.clients {
        let conn = acceptor.accept(&config.transport)?;
        let mut peer = Peer::new(conn, config.stream_mode);
        let hello = peer.recv_message()?;
        if hello.header(HDR_PHASE) != Some(PHASE_JOIN) {
            return Err(JobError::Handshake("first message is not a join request".into()));
        }
        let k: usize = parse_header(&hello, HDR_CLIENT)?;
        match slots.get_mut(k) {
            Some(slot @ None) => *slot = Some(peer),
            Some(Some(_)) => return Err(JobError::Handshake(format!("client {k} joined twice"))),
            None => {
                return Err(JobError::Handshake(format!(
                    "client index {k} out of range for {} clients",
                    config.clients
                )))
            }
        }
        info!("client {k} joined");
    }
    let mut peers: Vec<Peer> = slots.into_iter().map(|p| p.expect("all slots filled")).collect();

    let mut global = initial_model(&config.task);
    let predicted = size_report(&global, config.precision).total_bytes();
    let mut records = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        peers.iter().for_each(Peer::reset_peaks);
        let results: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = peers
                .iter_mut()
                .enumerate()
                .map(|(k, peer)| {
                    let (global, chain, job) = (&global, &chain, job.as_str());
                    s.spawn(move || exchange(peer, global, k, round, chain, job))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("exchange thread panicked"))
                .collect()
        });

        let mut updates = Vec::with_capacity(config.clients);
        let mut clients = Vec::with_capacity(config.clients);
        let mut missing = Vec::new();
        let mut reason = None;
        for (k, result) in results.into_iter().enumerate() {
            match result {
                Ok((update, record)) => {
                    updates.push(update);
                    clients.push(record);
                }
                Err(e) => {
                    warn!("round {round}: client {k} failed: {e}");
                    missing.push(k);
                    reason.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if !missing.is_empty() {
            return Err(JobError::Round {
                round,
                missing,
                reason: reason.unwrap_or_default(),
            });
        }
        let weights: Vec<f64> = clients.iter().map(|c| c.samples as f64).collect();
        global = fedavg(&updates, &weights)?;
        drop(updates);
        let record = RoundRecord {
            round,
            clients,
            global_loss: global_loss(&global, &shards)?,
            checksum: model_checksum(&global),
            predicted_leg_bytes: predicted,
            server_send_peak: peers.iter().map(|p| p.stats().send_peak).max().unwrap_or(0),
            server_recv_peak: peers.iter().map(|p| p.stats().recv_peak).max().unwrap_or(0),
        };
        info!("round {round}: global loss {:.6}", record.global_loss);
        records.push(record);
    }

    for (k, peer) in peers.iter_mut().enumerate() {
        let end = Message::new(MessageKind::TaskData, Payload::Plain(ParameterMap::new()))
            .with_header(HDR_JOB_ID, &job)
            .with_header(HDR_PHASE, PHASE_END);
        if let Err(e) = peer.send_message(&end) {
            warn!("could not tell client {k} to stop: {e}");
        }
        peer.close();
    }

    let last = records.last().expect("rounds >= 1");
    let sum = |f: fn(&ClientRecord) -> u64| -> u64 {
        records.iter().flat_map(|r| &r.clients).map(f).sum()
    };
    let totals = JobTotals {
        bytes_down: sum(|c| c.down_bytes),
        bytes_up: sum(|c| c.up_bytes),
        final_loss: last.global_loss,
        final_checksum: last.checksum.clone(),
        max_send_peak: records.iter().map(|r| r.server_send_peak).max().unwrap_or(0),
        max_recv_peak: records.iter().map(|r| r.server_recv_peak).max().unwrap_or(0),
    };
    Ok(JobReport {
        config: config.clone(),
        rounds: records,
        totals,
        elapsed_s: config
            .record_timing
            .then(|| started.elapsed().as_secs_f64()),
    })
}

/// Runs executor `index` until the controller ends the job; returns the
/// number of rounds served.
pub fn run_client(conn: Connection, config: &JobConfig, index: usize) -> Result<usize, JobError> {
    config.validate()?;
    let chain = config.filter_chain();
    let shard = make_shard(&config.task, &target_weights(&config.task), index);
    let mut peer = Peer::new(conn, config.stream_mode);
    let hello = Message::new(MessageKind::TaskResult, Payload::Plain(ParameterMap::new()))
        .with_header(HDR_PHASE, PHASE_JOIN)
        .with_header(HDR_CLIENT, index.to_string());
    peer.send_message(&hello)?;

    let mut served = 0;
    loop {
        let msg = peer.recv_message()?;
        if msg.header(HDR_PHASE) == Some(PHASE_END) {
            debug!("client {index}: job finished after {served} rounds");
            peer.close();
            return Ok(served);
        }
        let msg = apply_chain(msg, FilterPoint::TaskDataInClient, &chain)?;
        let round = header(&msg, HDR_ROUND)?.to_owned();
        let job = msg.header(HDR_JOB_ID).unwrap_or_default().to_owned();
        let model = plain_model(msg)?;
        let (update, loss) = toy_local_train(
            &model,
            &shard,
            config.task.local_steps,
            config.task.learning_rate,
        )?;
        drop(model);
        debug!("client {index}: round {round} loss {loss}");
        let reply = Message::new(MessageKind::TaskResult, Payload::Plain(update))
            .with_header(HDR_JOB_ID, job)
            .with_header(HDR_ROUND, round)
            .with_header(HDR_SOURCE, format!("client-{index}"))
            .with_header(HDR_CLIENT, index.to_string())
            .with_header(HDR_SAMPLES, shard.samples.to_string())
            .with_header(HDR_LOSS, loss.to_string());
        let reply = apply_chain(reply, FilterPoint::TaskResultOutClient, &chain)?;
        peer.send_message(&reply)?;
        served += 1;
    }
}

/// Runs the whole job in one process over the in-memory driver, one
/// thread per executor.
pub fn simulate(config: &JobConfig) -> Result<JobReport, JobError> {
    config.validate()?;
    let (driver, acceptor) = MemoryDriver::new();
    thread::scope(|s| {
        let clients: Vec<_> = (0..config.clients)
            .map(|k| {
                let driver = &driver;
                s.spawn(move || {
                    let conn = driver.open(&config.transport)?;
                    run_client(conn, config, k)
                })
            })
            .collect();
        let report = run_server(&acceptor, config);
        // unblocks executors whose connection was never accepted
        drop(acceptor);
        let outcomes: Vec<_> = clients
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect();
        let report = report?;
        for (client, outcome) in outcomes.into_iter().enumerate() {
            outcome.map_err(|e| JobError::Client {
                client,
                source: Box::new(e),
            })?;
        }
        Ok(report)
    })
}
