//! Event loop: senders, the dual-queue bottleneck, receivers and ACK returns.
//!
//! Access links have zero delay; the bottleneck link carries the whole
//! one-way propagation delay, so a packet's latency is queue wait +
//! transmission + propagation. ACKs come back after one propagation delay
//! and never queue.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cc::{cc_on_ack, AckInfo, CcAlgorithm, CongestionControl, MSS_BYTES};
use super::config::{bdp_packets, SimConfig, Topology};
use super::queue::{dual_queue_enqueue, DualQueue, EnqueueOutcome, QueueCounters};
use super::workload::Dist;
use super::SimError;
use crate::trace_model::{PacketRecord, QueueMark, Trace};

const SAMPLE_INTERVAL_MS: f64 = 10.0;
const CHECKPOINT_EVERY_SAMPLES: u64 = 100;

/// Event kinds in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    PacketArriveRouter,
    PacketDepartRouter,
    PacketArriveReceiver,
    AckArriveSender,
    FlowStart,
    MessageGen,
    SenderWake,
    Sample,
}

#[derive(Debug, Clone, Copy)]
struct Packet {
    flow: u32,
    seq: u64,
    size: u32,
    mark: QueueMark,
    ce: bool,
    send_time: f64,
    enqueue_time: f64,
    queue_wait: f64,
    tx_time: f64,
    prop: f64,
}

#[derive(Debug, Clone, Copy)]
enum Payload {
    None,
    Packet(Packet),
    Ack { lost: bool, ce: bool, latency: f64 },
}

/// A scheduled event. Ordered by (time, kind, flow, seq, insertion order).
#[derive(Debug, Clone, Copy)]
pub struct SimEvent {
    pub time_ms: f64,
    pub kind: EventKind,
    pub flow_id: u32,
    pub seq: u64,
    order: u64,
    payload: Payload,
}

impl SimEvent {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.time_ms
            .total_cmp(&other.time_ms)
            .then(self.kind.cmp(&other.kind))
            .then(self.flow_id.cmp(&other.flow_id))
            .then(self.seq.cmp(&other.seq))
            .then(self.order.cmp(&other.order))
    }
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other).is_eq()
    }
}
impl Eq for SimEvent {}
impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for SimEvent {
    // Reversed so that `BinaryHeap` pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

/// Per-packet queue choice for ECT packets of the monitored flows.
///
/// `stream` is the monitored packet stream in send order; a record's latency
/// becomes `Some` when its ACK reaches the sender.
pub trait QueueSelector {
    /// Mark for the packet about to be sent at index `history.len()`.
    fn select(&mut self, history: &[PacketRecord], now_ms: f64) -> QueueMark;

    /// Called after every monitored packet (ECT or not) is appended.
    fn on_sent(&mut self, _stream: &[PacketRecord], _now_ms: f64) {}

    /// ACK (or loss notification when `lost`) for the packet at `index`.
    fn on_feedback(&mut self, _stream: &[PacketRecord], _index: usize, _lost: bool, _now_ms: f64) {
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlowClass {
    L4S,
    Classic,
    Cross,
    Cbr,
}

#[derive(Debug, Clone, Copy)]
struct Sent {
    send_time: f64,
    size: u32,
    trace_idx: usize,
    stream_idx: Option<usize>,
    delivered_at_send: u64,
    delivered_time_at_send: f64,
}

struct Flow {
    id: u32,
    receiver: u32,
    class: FlowClass,
    ect: bool,
    monitored: bool,
    cc: Option<CongestionControl>,
    rng: ChaCha8Rng,
    gap: Dist,
    cbr_interval_ms: f64,
    backlog: u64,
    next_seq: u64,
    inflight: HashMap<u64, Sent>,
    srtt: f64,
    delivered: u64,
    delivered_time: f64,
    next_send_ms: f64,
    wake_pending: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SimReport {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight_at_end: u64,
    pub acked: u64,
    pub ce_marked: u64,
    pub classic_marked_by_selector: u64,
    pub l4s_arrivals: u64,
    pub l4s_dequeued: u64,
    pub l4s_dropped: u64,
    pub classic_arrivals: u64,
    pub classic_dequeued: u64,
    pub classic_dropped: u64,
    pub l4s_resident_at_end: u64,
    pub classic_resident_at_end: u64,
    pub max_decomposition_residual_ms: f64,
    pub checkpoints: u64,
    /// Classic-queue occupancy / capacity, sampled every 10 ms.
    pub classic_fill_samples: Vec<f64>,
    pub l4s_fill_samples: Vec<f64>,
}

impl SimReport {
    /// `generated == delivered + dropped + in_flight_at_end`, and every
    /// packet that reached the router is accounted for there.
    pub fn conserved(&self) -> bool {
        self.generated == self.delivered + self.dropped + self.in_flight_at_end
            && self.l4s_arrivals + self.classic_arrivals == self.generated
            && self.l4s_arrivals
                == self.l4s_dequeued + self.l4s_dropped + self.l4s_resident_at_end
            && self.classic_arrivals
                == self.classic_dequeued + self.classic_dropped + self.classic_resident_at_end
    }

    /// Fraction of occupancy samples at or above `level` (0..1) of capacity.
    pub fn classic_fill_fraction_at_least(&self, level: f64) -> f64 {
        if self.classic_fill_samples.is_empty() {
            return 0.0;
        }
        let n = self.classic_fill_samples.iter().filter(|&&x| x >= level).count();
        n as f64 / self.classic_fill_samples.len() as f64
    }
}

struct Sim<'a, 's> {
    cfg: &'a SimConfig,
    events: BinaryHeap<SimEvent>,
    order: u64,
    now: f64,
    flows: Vec<Flow>,
    queue: DualQueue<Packet>,
    link_busy: bool,
    tx_ms_per_byte: f64,
    records: Vec<PacketRecord>,
    stream: Vec<PacketRecord>,
    selector: Option<&'s mut dyn QueueSelector>,
    pending_router: u64,
    propagating: u64,
    samples: u64,
    report: SimReport,
}

fn counters_into(report: &mut SimReport, l4s: &QueueCounters, classic: &QueueCounters) {
    report.l4s_arrivals = l4s.arrivals;
    report.l4s_dequeued = l4s.dequeued;
    report.l4s_dropped = l4s.dropped;
    report.classic_arrivals = classic.arrivals;
    report.classic_dequeued = classic.dequeued;
    report.classic_dropped = classic.dropped;
}

impl<'a, 's> Sim<'a, 's> {
    fn new(cfg: &'a SimConfig, selector: Option<&'s mut dyn QueueSelector>) -> Self {
        let base_rtt = 2.0 * cfg.propagation_delay_ms;
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (s1_receiver, cross_receiver, cbr_receiver) = match cfg.topology {
            Topology::SingleBottleneck => (0, 2, 3),
            Topology::L4SSelection => (1, 2, 3),
        };
        let mut classes = Vec::new();
        classes.extend(std::iter::repeat_n(FlowClass::L4S, cfg.n_l4s_flows as usize));
        classes.extend(std::iter::repeat_n(FlowClass::Classic, cfg.n_classic_flows as usize));
        classes.extend(std::iter::repeat_n(FlowClass::Cross, cfg.cross_flows() as usize));
        if cfg.classic_cbr_mbps > 0.0 {
            classes.push(FlowClass::Cbr);
        }
        let mut flows = Vec::with_capacity(classes.len());
        let mut events = Vec::new();
        for (i, class) in classes.into_iter().enumerate() {
            let id = i as u32;
            let (alg, rate, receiver) = match class {
                FlowClass::L4S => (Some(cfg.l4s_cc), cfg.base_rate_mbps, s1_receiver),
                FlowClass::Classic => (
                    Some(cfg.classic_cc),
                    cfg.classic_rate_mbps.unwrap_or(cfg.base_rate_mbps),
                    s1_receiver,
                ),
                FlowClass::Cross => (
                    Some(cfg.cross_cc),
                    cfg.cross_rate_mbps.unwrap_or(cfg.base_rate_mbps),
                    cross_receiver,
                ),
                FlowClass::Cbr => (None, cfg.classic_cbr_mbps, cbr_receiver),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64 + 1);
            let start = match class {
                FlowClass::Cbr => 0.0,
                _ => master.random::<f64>() * cfg.flow_start_window_s * 1000.0,
            };
            // L4S-class and cross flows always carry ECT; only their CC decides
            // whether they react to CE.
            let ect = matches!(class, FlowClass::L4S | FlowClass::Cross);
            flows.push(Flow {
                id,
                receiver,
                class,
                ect,
                monitored: matches!(class, FlowClass::L4S | FlowClass::Classic),
                cc: alg.map(|a: CcAlgorithm| CongestionControl::new(a, cfg.initial_cwnd_pkts, base_rtt)),
                rng,
                gap: cfg.workload.gap_dist(rate),
                cbr_interval_ms: (MSS_BYTES as f64 * 8.0) / (rate * 1000.0),
                backlog: 0,
                next_seq: 0,
                inflight: HashMap::new(),
                srtt: base_rtt,
                delivered: 0,
                delivered_time: 0.0,
                next_send_ms: 0.0,
                wake_pending: false,
            });
            events.push((start, id));
        }
        let mut sim = Sim {
            cfg,
            events: BinaryHeap::new(),
            order: 0,
            now: 0.0,
            flows,
            queue: DualQueue::new(cfg.queue_capacity_pkts(), cfg.mark_threshold_pkts(), cfg.l4s_weight),
            link_busy: false,
            tx_ms_per_byte: 8.0 / (cfg.bandwidth_mbps * 1000.0),
            records: Vec::new(),
            stream: Vec::new(),
            selector,
            pending_router: 0,
            propagating: 0,
            samples: 0,
            report: SimReport::default(),
        };
        for (start, id) in events {
            sim.schedule(start, EventKind::FlowStart, id, 0, Payload::None);
        }
        sim.schedule(0.0, EventKind::Sample, 0, 0, Payload::None);
        sim
    }

    fn schedule(&mut self, time_ms: f64, kind: EventKind, flow_id: u32, seq: u64, payload: Payload) {
        self.order += 1;
        self.events.push(SimEvent {
            time_ms,
            kind,
            flow_id,
            seq,
            order: self.order,
            payload,
        });
    }

    fn run(&mut self) -> Result<(), SimError> {
        let end = self.cfg.duration_ms();
        while let Some(ev) = self.events.pop() {
            if ev.time_ms > end {
                break;
            }
            self.now = ev.time_ms;
            self.handle(ev)?;
        }
        self.checkpoint()
    }

    fn handle(&mut self, ev: SimEvent) -> Result<(), SimError> {
        let f = ev.flow_id as usize;
        match (ev.kind, ev.payload) {
            (EventKind::FlowStart, _) | (EventKind::MessageGen, _) => self.message(f),
            (EventKind::SenderWake, _) => {
                self.flows[f].wake_pending = false;
                self.try_send(f);
            }
            (EventKind::PacketArriveRouter, Payload::Packet(p)) => self.arrive_router(p),
            (EventKind::PacketDepartRouter, Payload::Packet(p)) => self.depart_router(p),
            (EventKind::PacketArriveReceiver, Payload::Packet(p)) => self.arrive_receiver(p),
            (EventKind::AckArriveSender, Payload::Ack { lost, ce, latency }) => {
                self.ack(f, ev.seq, lost, ce, latency)?
            }
            (EventKind::Sample, _) => self.sample()?,
            (kind, _) => {
                return Err(SimError::Invariant(format!("event {kind:?} without its payload")));
            }
        }
        Ok(())
    }

    fn message(&mut self, f: usize) {
        let flow = &mut self.flows[f];
        if flow.class == FlowClass::Cbr {
            let interval = flow.cbr_interval_ms;
            let seq = flow.next_seq;
            flow.next_seq += 1;
            let pkt = self.new_packet(f, seq, MSS_BYTES, QueueMark::Classic);
            self.report.generated += 1;
            self.to_router(pkt);
            self.schedule(self.now + interval, EventKind::MessageGen, f as u32, 0, Payload::None);
            return;
        }
        let size = self.cfg.workload.sample_size(&mut flow.rng);
        flow.backlog += size;
        let gap = flow.gap.sample(&mut flow.rng);
        self.schedule(self.now + gap, EventKind::MessageGen, f as u32, 0, Payload::None);
        self.try_send(f);
    }

    fn new_packet(&self, f: usize, seq: u64, size: u32, mark: QueueMark) -> Packet {
        Packet {
            flow: f as u32,
            seq,
            size,
            mark,
            ce: false,
            send_time: self.now,
            enqueue_time: self.now,
            queue_wait: 0.0,
            tx_time: 0.0,
            prop: 0.0,
        }
    }

    fn to_router(&mut self, pkt: Packet) {
        self.pending_router += 1;
        self.schedule(self.now, EventKind::PacketArriveRouter, pkt.flow, pkt.seq, Payload::Packet(pkt));
    }

    fn try_send(&mut self, f: usize) {
        loop {
            let now = self.now;
            let flow = &mut self.flows[f];
            if flow.backlog == 0 {
                return;
            }
            let out = flow.cc.as_ref().expect("window-based flow").output();
            if flow.inflight.len() as f64 >= out.cwnd_pkts.floor().max(1.0) {
                return;
            }
            if self.cfg.pacing && now < flow.next_send_ms {
                if !flow.wake_pending {
                    flow.wake_pending = true;
                    let at = flow.next_send_ms;
                    self.schedule(at, EventKind::SenderWake, f as u32, 0, Payload::None);
                }
                return;
            }
            let size = flow.backlog.min(MSS_BYTES as u64) as u32;
            flow.backlog -= size as u64;
            let seq = flow.next_seq;
            flow.next_seq += 1;
            if self.cfg.pacing {
                let rate = out
                    .pacing_rate
                    .unwrap_or(1.25 * out.cwnd_pkts * MSS_BYTES as f64 / flow.srtt);
                flow.next_send_ms = now + size as f64 / rate.max(1e-9);
            }
            self.send(f, seq, size);
        }
    }

    fn send(&mut self, f: usize, seq: u64, size: u32) {
        let (ect, monitored) = (self.flows[f].ect, self.flows[f].monitored);
        let use_selector = monitored && self.selector.is_some();
        let mark = if !ect {
            QueueMark::Classic
        } else if use_selector {
            let m = self.selector.as_mut().expect("checked").select(&self.stream, self.now);
            if m == QueueMark::Classic {
                self.report.classic_marked_by_selector += 1;
            }
            m
        } else {
            QueueMark::L4S
        };
        let flow = &self.flows[f];
        let record = PacketRecord {
            flow_id: flow.id,
            receiver_id: flow.receiver,
            seq,
            send_time_ms: self.now,
            packet_size_bytes: size,
            queue_mark: mark,
            latency_ms: None,
        };
        let stream_idx = if use_selector {
            self.stream.push(record.clone());
            let now = self.now;
            self.selector.as_mut().expect("checked").on_sent(&self.stream, now);
            Some(self.stream.len() - 1)
        } else {
            None
        };
        self.records.push(record);
        let flow = &mut self.flows[f];
        flow.inflight.insert(
            seq,
            Sent {
                send_time: self.now,
                size,
                trace_idx: self.records.len() - 1,
                stream_idx,
                delivered_at_send: flow.delivered,
                delivered_time_at_send: if flow.delivered == 0 { self.now } else { flow.delivered_time },
            },
        );
        self.report.generated += 1;
        let pkt = self.new_packet(f, seq, size, mark);
        self.to_router(pkt);
    }

    fn arrive_router(&mut self, mut pkt: Packet) {
        self.pending_router -= 1;
        let outcome = dual_queue_enqueue(self.queue.state(), pkt.mark);
        if outcome == EnqueueOutcome::EnqueuedL4SWithCEMark {
            pkt.ce = true;
            self.report.ce_marked += 1;
        }
        pkt.enqueue_time = self.now;
        let (_, dropped) = self.queue.enqueue(pkt.mark, pkt.size, pkt);
        if let Some(p) = dropped {
            self.report.dropped += 1;
            if self.flows[p.flow as usize].class != FlowClass::Cbr {
                let notify = self.now + 2.0 * self.cfg.propagation_at(self.now);
                self.schedule(notify, EventKind::AckArriveSender, p.flow, p.seq, Payload::Ack { lost: true, ce: false, latency: 0.0 });
            }
        }
        if !self.link_busy {
            self.start_tx();
        }
    }

    fn start_tx(&mut self) {
        match self.queue.dequeue() {
            Some((_, mut pkt)) => {
                pkt.queue_wait = self.now - pkt.enqueue_time;
                pkt.tx_time = pkt.size as f64 * self.tx_ms_per_byte;
                self.link_busy = true;
                let done = self.now + pkt.tx_time;
                self.schedule(done, EventKind::PacketDepartRouter, pkt.flow, pkt.seq, Payload::Packet(pkt));
            }
            None => self.link_busy = false,
        }
    }

    fn depart_router(&mut self, mut pkt: Packet) {
        pkt.prop = self.cfg.propagation_at(self.now);
        self.propagating += 1;
        let at = self.now + pkt.prop;
        self.schedule(at, EventKind::PacketArriveReceiver, pkt.flow, pkt.seq, Payload::Packet(pkt));
        self.start_tx();
    }

    fn arrive_receiver(&mut self, pkt: Packet) {
        self.propagating -= 1;
        self.report.delivered += 1;
        let latency = self.now - pkt.send_time;
        let residual = (latency - (pkt.queue_wait + pkt.tx_time + pkt.prop)).abs();
        if residual > self.report.max_decomposition_residual_ms {
            self.report.max_decomposition_residual_ms = residual;
        }
        if self.flows[pkt.flow as usize].class != FlowClass::Cbr {
            let at = self.now + self.cfg.propagation_at(self.now);
            // The one-way latency travels back with the ACK.
            let ack = Payload::Ack {
                lost: false,
                ce: pkt.ce,
                latency,
            };
            self.schedule(at, EventKind::AckArriveSender, pkt.flow, pkt.seq, ack);
        }
    }

    fn ack(&mut self, f: usize, seq: u64, lost: bool, ce: bool, latency: f64) -> Result<(), SimError> {
        let now = self.now;
        let flow = &mut self.flows[f];
        let Some(sent) = flow.inflight.remove(&seq) else {
            return Err(SimError::Invariant(format!("ACK for unknown packet flow {f} seq {seq}")));
        };
        let next_seq = flow.next_seq;
        let cc = flow.cc.as_mut().expect("window-based flow");
        if lost {
            flow.backlog += sent.size as u64;
            cc.on_loss(now, seq, next_seq);
        } else {
            self.report.acked += 1;
            self.records[sent.trace_idx].latency_ms = Some(latency);
            let rtt = now - sent.send_time;
            flow.srtt = 0.875 * flow.srtt + 0.125 * rtt;
            flow.delivered += sent.size as u64;
            let interval = now - sent.delivered_time_at_send;
            let delivery_rate = (interval > 0.0)
                .then(|| (flow.delivered - sent.delivered_at_send) as f64 / interval);
            flow.delivered_time = now;
            let cwnd = cc.output().cwnd_pkts;
            let info = AckInfo {
                now_ms: now,
                rtt_ms: rtt,
                seq,
                next_seq,
                ce,
                inflight_pkts: flow.inflight.len(),
                cwnd_limited: (flow.inflight.len() + 1) as f64 >= 0.5 * cwnd,
                delivery_rate,
            };
            cc_on_ack(cc, &info);
        }
        if let Some(idx) = sent.stream_idx {
            self.stream[idx].latency_ms = self.records[sent.trace_idx].latency_ms;
            if let Some(sel) = self.selector.as_mut() {
                sel.on_feedback(&self.stream, idx, lost, now);
            }
        }
        self.try_send(f);
        Ok(())
    }

    fn sample(&mut self) -> Result<(), SimError> {
        let st = *self.queue.state();
        self.report
            .classic_fill_samples
            .push(st.classic_occupancy_pkts as f64 / st.classic_capacity_pkts as f64);
        self.report
            .l4s_fill_samples
            .push(st.l4s_occupancy_pkts as f64 / st.l4s_capacity_pkts as f64);
        self.samples += 1;
        if self.samples % CHECKPOINT_EVERY_SAMPLES == 0 {
            self.checkpoint()?;
        }
        self.schedule(self.now + SAMPLE_INTERVAL_MS, EventKind::Sample, 0, 0, Payload::None);
        Ok(())
    }

    fn in_flight(&self) -> u64 {
        let resident = self.queue.state().l4s_occupancy_pkts + self.queue.state().classic_occupancy_pkts;
        resident as u64 + self.link_busy as u64 + self.propagating + self.pending_router
    }

    fn checkpoint(&mut self) -> Result<(), SimError> {
        self.report.checkpoints += 1;
        let in_flight = self.in_flight();
        let r = &self.report;
        if !self.queue.conserved() || r.generated != r.delivered + r.dropped + in_flight {
            return Err(SimError::Invariant(format!(
                "packet conservation violated at t={:.3} ms: generated {} delivered {} dropped {} in flight {}",
                self.now, r.generated, r.delivered, r.dropped, in_flight
            )));
        }
        Ok(())
    }

    fn finish(mut self) -> (Trace, SimReport) {
        self.report.in_flight_at_end = self.in_flight();
        counters_into(&mut self.report, &self.queue.l4s_counters, &self.queue.classic_counters);
        self.report.l4s_resident_at_end = self.queue.state().l4s_occupancy_pkts as u64;
        self.report.classic_resident_at_end = self.queue.state().classic_occupancy_pkts as u64;
        let mut trace = Trace::new(self.records);
        trace.sort();
        trace.meta = trace_meta(self.cfg, &self.flows);
        (trace, self.report)
    }
}

fn trace_meta(cfg: &SimConfig, flows: &[Flow]) -> std::collections::BTreeMap<String, String> {
    let mut meta = std::collections::BTreeMap::new();
    let monitored: Vec<String> = flows
        .iter()
        .filter(|f| f.monitored)
        .map(|f| f.id.to_string())
        .collect();
    meta.insert("bandwidth_mbps".into(), cfg.bandwidth_mbps.to_string());
    meta.insert("propagation_delay_ms".into(), cfg.propagation_delay_ms.to_string());
    meta.insert("return_delay_ms".into(), cfg.propagation_delay_ms.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("duration_s".into(), cfg.duration_s.to_string());
    meta.insert("topology".into(), format!("{:?}", cfg.topology));
    meta.insert("bdp_packets".into(), bdp_packets(cfg).to_string());
    meta.insert("monitored_flows".into(), monitored.join(","));
    if let Some(step) = cfg.delay_step {
        meta.insert("delay_step_at_s".into(), step.at_s.to_string());
        meta.insert("delay_step_propagation_delay_ms".into(), step.propagation_delay_ms.to_string());
    }
    meta
}

/// Run a simulation and return the trace plus run statistics.
pub fn run_simulation_with_report(
    config: &SimConfig,
    selector: Option<&mut dyn QueueSelector>,
) -> Result<(Trace, SimReport), SimError> {
    config.validate()?;
    let mut sim = Sim::new(config, selector);
    sim.run()?;
    Ok(sim.finish())
}

pub fn run_simulation(
    config: &SimConfig,
    selector: Option<&mut dyn QueueSelector>,
) -> Result<Trace, SimError> {
    run_simulation_with_report(config, selector).map(|(t, _)| t)
}
