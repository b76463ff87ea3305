//! The discrete-event loop joining edge clients, links and the server.

use thiserror::Error;

use crate::codec::{decode_uplink, encode_downlink, CodecError};
use crate::controllers::AtrMode;
use crate::edge::{EdgeError, EdgeState};
use crate::server::{GpuCostModel, Policy, RoundRobin, ServerError, ServerSession, SessionConfig, SessionStatus};
use crate::simnet::{EventQueue, Link, LinkConfig};
use crate::workload::{miou, teacher_label, ParamVector, StreamGenerator, WorkloadError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("client {client}: {source}")]
    Codec { client: usize, source: CodecError },
    #[error("client {client}: {source}")]
    Edge { client: usize, source: EdgeError },
    #[error("client {client}: {source}")]
    Server { client: usize, source: ServerError },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// One edge client with its server session and its two links.
#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub session: SessionConfig,
    pub initial: ParamVector,
    pub uplink: LinkConfig,
    pub downlink: LinkConfig,
    /// Both links are down during `[start, end)`.
    pub outage: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub duration: f64,
    pub cost: GpuCostModel,
    pub clients: Vec<ClientSpec>,
    /// Keep server/edge parameter snapshots for every applied delta.
    pub trace_params: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub time: f64,
    pub frame_id: u64,
    pub session: u32,
    pub policy: Policy,
    pub miou: f64,
    pub sampled: bool,
    pub rate: f64,
    pub t_update: f64,
    pub mode: AtrMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientTotals {
    pub session: u32,
    pub policy: Policy,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub deltas_sent: u32,
    pub deltas_applied: u32,
    pub gpu_seconds: f64,
    pub served: u32,
}

/// Parameters right after a delta: the server's full-precision copy at
/// emission and the edge's active copy once applied.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub client: usize,
    pub phase: u32,
    pub server: ParamVector,
    pub edge: ParamVector,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub rows: Vec<FrameRow>,
    pub totals: Vec<ClientTotals>,
    pub snapshots: Vec<ParamSnapshot>,
    /// (start, end, client) of every GPU work item.
    pub gpu_trace: Vec<(f64, f64, usize)>,
}

enum Event {
    Tick(u64),
    Uplink { client: usize, bytes: Vec<u8> },
    GpuDone { client: usize, message: Option<(u32, Vec<u8>)> },
    Downlink { client: usize, phase: u32, bytes: Vec<u8> },
    LinkDown(usize),
    LinkUp(usize),
}

struct Client {
    stream: StreamGenerator,
    edge: EdgeState,
    session: ServerSession,
    uplink: Link<Vec<u8>>,
    downlink: Link<(u32, Vec<u8>)>,
    deltas_sent: u32,
    deltas_applied: u32,
    served: u32,
}

pub fn run(config: &SimConfig) -> Result<SimOutput, SimError> {
    let fps = config.clients.first().map_or(30.0, |c| c.session.drift.fps);
    assert!(
        config.clients.iter().all(|c| c.session.drift.fps == fps),
        "all clients share one frame clock"
    );
    let classes: Vec<usize> = (0..config.clients.first().map_or(0, |c| c.session.drift.classes)).collect();
    assert!(
        config.clients.iter().all(|c| c.session.drift.classes == classes.len()),
        "all clients share one label set"
    );
    let mut clients = config
        .clients
        .iter()
        .enumerate()
        .map(|(i, spec)| -> Result<Client, SimError> {
            let session = ServerSession::new(spec.session.clone(), spec.initial.clone());
            let edge = EdgeState::new(
                i as u32,
                spec.session.layout,
                fps,
                spec.initial.clone(),
                session.initial_rate(),
                session.initial_t_update(),
            );
            Ok(Client {
                stream: StreamGenerator::new(&spec.session.drift, spec.session.stream_seed)?,
                edge,
                session,
                uplink: Link::new(spec.uplink),
                downlink: Link::new(spec.downlink),
                deltas_sent: 0,
                deltas_applied: 0,
                served: 0,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut queue = EventQueue::new();
    for (i, spec) in config.clients.iter().enumerate() {
        if let Some((start, end)) = spec.outage {
            queue.schedule(start, Event::LinkDown(i));
            queue.schedule(end, Event::LinkUp(i));
        }
    }
    let frames = (config.duration * fps).round() as u64;
    for k in 0..frames {
        queue.schedule(k as f64 / fps, Event::Tick(k));
    }

    let mut out = SimOutput {
        rows: Vec::with_capacity(frames as usize * clients.len()),
        totals: Vec::new(),
        snapshots: Vec::new(),
        gpu_trace: Vec::new(),
    };
    let mut pending_server: Vec<Option<ParamVector>> = vec![None; clients.len()];
    let mut rr = RoundRobin::new();
    let mut gpu_busy = false;
    let end = frames as f64 / fps;

    while let Some((now, event)) = queue.pop_until(end) {
        match event {
            Event::Tick(k) => {
                for (i, c) in clients.iter_mut().enumerate() {
                    let (frame, oracle) = c.stream.frame(k);
                    let truth = teacher_label(&frame, &oracle)?;
                    let (pred, sampled) = c.edge.on_frame(&frame);
                    out.rows.push(FrameRow {
                        time: frame.timestamp,
                        frame_id: k,
                        session: c.session.config.id,
                        policy: c.session.config.policy,
                        miou: miou(&pred, &truth, &classes),
                        sampled,
                        rate: c.edge.rate,
                        t_update: c.edge.t_update,
                        mode: if c.edge.slowdown { AtrMode::Slowdown } else { AtrMode::Normal },
                    });
                    if c.edge.flush_due(now) {
                        if let Some(bytes) = c.edge.flush_uplink(now) {
                            let size = bytes.len();
                            if let Some((t, bytes)) = c.uplink.send(bytes, size, now) {
                                queue.schedule(t, Event::Uplink { client: i, bytes });
                            }
                        }
                    }
                }
            }
            Event::Uplink { client, bytes } => {
                let c = &mut clients[client];
                c.uplink.mark_delivered(bytes.len());
                let batch = decode_uplink(&bytes).map_err(|source| SimError::Codec { client, source })?;
                c.session.enqueue(batch);
            }
            Event::GpuDone { client, message } => {
                gpu_busy = false;
                if let Some((phase, bytes)) = message {
                    let c = &mut clients[client];
                    let size = bytes.len();
                    if let Some((t, (phase, bytes))) = c.downlink.send((phase, bytes), size, now) {
                        queue.schedule(t, Event::Downlink { client, phase, bytes });
                    }
                }
            }
            Event::Downlink { client, phase, bytes } => {
                let c = &mut clients[client];
                c.downlink.mark_delivered(bytes.len());
                match c.edge.on_delta(&bytes) {
                    Ok(true) => {
                        c.deltas_applied += 1;
                        if config.trace_params {
                            if let Some(server) = pending_server[client].take() {
                                out.snapshots.push(ParamSnapshot {
                                    client,
                                    phase,
                                    server,
                                    edge: c.edge.active().clone(),
                                });
                            }
                        }
                    }
                    Ok(false) => {}
                    Err(source) => return Err(SimError::Edge { client, source }),
                }
            }
            Event::LinkDown(client) => {
                clients[client].uplink.set_down();
                clients[client].downlink.set_down();
            }
            Event::LinkUp(client) => {
                let c = &mut clients[client];
                for (t, bytes) in c.uplink.set_up(now) {
                    queue.schedule(t, Event::Uplink { client, bytes });
                }
                for (t, (phase, bytes)) in c.downlink.set_up(now) {
                    queue.schedule(t, Event::Downlink { client, phase, bytes });
                }
            }
        }

        if !gpu_busy {
            let statuses: Vec<SessionStatus> =
                clients.iter().map(|c| SessionStatus::of(&c.session, &config.cost)).collect();
            if let Some(i) = rr.next(&statuses, now) {
                let c = &mut clients[i];
                let report = c
                    .session
                    .serve(now, &config.cost)
                    .map_err(|source| SimError::Server { client: i, source })?;
                c.served += 1;
                let message = if report.delta.is_some() || report.rate != c.edge.rate {
                    let phase = report.delta.as_ref().map_or(0, |d| d.phase);
                    if report.delta.is_some() {
                        c.deltas_sent += 1;
                        if config.trace_params {
                            pending_server[i] = Some(c.session.params.clone());
                        }
                    }
                    Some((phase, encode_downlink(report.control(), report.delta.as_ref())))
                } else {
                    None
                };
                let done = now + report.gpu_seconds;
                out.gpu_trace.push((now, done, i));
                gpu_busy = true;
                queue.schedule(done, Event::GpuDone { client: i, message });
            }
        }
    }

    out.totals = clients
        .iter()
        .map(|c| ClientTotals {
            session: c.session.config.id,
            policy: c.session.config.policy,
            uplink_bytes: c.uplink.bytes_sent(),
            downlink_bytes: c.downlink.bytes_sent(),
            deltas_sent: c.deltas_sent,
            deltas_applied: c.deltas_applied,
            gpu_seconds: c.session.gpu_seconds,
            served: c.served,
        })
        .collect();
    Ok(out)
}
