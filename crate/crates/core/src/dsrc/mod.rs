//! Broadcast vehicular stack: CSMA/CA access to one shared channel, periodic
//! safety beacons, a single-shot warning broadcast, and unicast data carried
//! over on-demand routes with per-hop retransmission.

pub mod aodv;
pub mod mac;
pub mod medium;

use std::collections::BTreeMap;

use rand::Rng;

use crate::channel::{dbm_to_mw, decode, friis_path_loss, sinr, LinkBudget, NakagamiProfile};
use crate::engine::SimTime;
use crate::flowmon::{Dest, FlowHandle};
use crate::mobility::{distance, NodeId};
use crate::sim::{Ctx, Ev};

pub use aodv::{AodvMsg, AodvParams, AodvState};
pub use mac::{MacPhase, MacState};
pub use medium::{Medium, TxRecord};

/// Radio, MAC, and application-cadence parameters for the broadcast stack.
#[derive(Debug, Clone)]
pub struct DsrcParams {
    pub budget: LinkBudget,
    /// PHY bit rate used for payload airtime.
    pub phy_rate_bps: f64,
    /// Fixed preamble + PLCP header time prepended to every frame.
    pub preamble_us: u64,
    pub slot_us: u64,
    pub sifs_us: u64,
    /// Arbitration gap observed before transmitting or resuming backoff.
    pub aifs_us: u64,
    pub cw_min: u32,
    pub cw_max: u32,
    /// MAC queue depth; overflow drops the oldest waiting frame.
    pub queue_cap: usize,
    /// Retransmissions allowed per unicast frame after the initial attempt.
    pub retry_limit: u32,
    /// Minimum SINR for a frame to decode.
    pub decode_threshold_db: f64,
    /// Received power (mean channel) above which the medium reads busy.
    pub cs_threshold_dbm: f64,
    /// Receptions whose mean received power falls below this are not
    /// evaluated at all; keeps far-field bookkeeping out of the hot path.
    pub min_rx_dbm: f64,
    /// Small-scale fading profile; None models a pure free-space channel.
    pub fading: Option<NakagamiProfile>,
    pub bsm_bytes: u64,
    pub bsm_period_us: u64,
    /// Uniform per-beacon start jitter, breaking persistent phase alignment
    /// between vehicles that entered at the same instant.
    pub bsm_jitter_us: u64,
    pub aodv: AodvParams,
}

impl Default for DsrcParams {
    fn default() -> Self {
        Self {
            budget: LinkBudget {
                tx_power_dbm: 20.0,
                tx_gain_dbi: 1.0,
                rx_gain_dbi: 1.0,
                frequency_hz: 5.9e9,
                bandwidth_hz: 10.0e6,
                noise_figure_db: 6.0,
            },
            phy_rate_bps: 6.0e6,
            preamble_us: 40,
            slot_us: 13,
            sifs_us: 32,
            aifs_us: 58,
            cw_min: 15,
            cw_max: 1023,
            queue_cap: 64,
            retry_limit: 3,
            decode_threshold_db: 10.0,
            cs_threshold_dbm: -65.0,
            min_rx_dbm: -110.0,
            fading: None,
            bsm_bytes: 200,
            bsm_period_us: 100_000,
            bsm_jitter_us: 1_000,
            aodv: AodvParams::default(),
        }
    }
}

impl DsrcParams {
    /// Time on air for a frame of `bytes`, fractional microseconds.
    pub fn airtime_us_f64(&self, bytes: u64) -> f64 {
        self.preamble_us as f64 + (bytes * 8) as f64 / self.phy_rate_bps * 1.0e6
    }

    /// Time on air rounded to the scheduler's microsecond grid.
    pub fn airtime_us(&self, bytes: u64) -> u64 {
        self.airtime_us_f64(bytes).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    /// Periodic broadcast safety beacon.
    Bsm,
    /// One-shot hazard warning broadcast.
    Warning,
    /// Routed unicast payload.
    Data,
    Rreq,
    Rrep,
    Rerr,
}

/// One frame as handed to the MAC. `origin`/`dst` are end-to-end; the per-hop
/// receiver lives in [`QueuedFrame::next_hop`].
#[derive(Debug, Clone)]
pub struct Frame {
    pub kind: FrameKind,
    pub origin: NodeId,
    pub dst: Dest,
    pub bytes: u64,
    pub seq: u64,
    pub created_at: SimTime,
    /// Monitor handle when this frame's fate is accounted.
    pub flow: Option<FlowHandle>,
    /// For beacons: the roadside unit this emission is scored against
    /// (nearest at creation time).
    pub capture_rsu: Option<NodeId>,
    pub aodv: Option<AodvMsg>,
}

#[derive(Debug, Clone)]
pub struct QueuedFrame {
    pub frame: Frame,
    pub next_hop: Dest,
}

/// Everything one node contributes to the broadcast stack.
#[derive(Debug)]
pub struct DsrcNode {
    pub mac: MacState,
    pub aodv: AodvState,
}

#[derive(Debug)]
struct BeaconState {
    flow: FlowHandle,
    /// Index of the next emission on the fixed grid anchored at `start`.
    k: u64,
    start: SimTime,
    seq: u64,
}

#[derive(Debug)]
struct DataAppState {
    bytes: u64,
    period_us: u64,
    /// Currently addressed collection point and its monitored flow.
    flow: Option<(NodeId, FlowHandle)>,
    next_flow_id: u32,
    seq: u64,
}

/// The whole broadcast-stack domain: every participating node, the shared
/// medium, and periodic application state.
#[derive(Debug)]
pub struct DsrcStack {
    pub params: DsrcParams,
    pub nodes: BTreeMap<NodeId, DsrcNode>,
    pub medium: Medium,
    beacons: BTreeMap<NodeId, BeaconState>,
    data_apps: BTreeMap<NodeId, DataAppState>,
    /// Routing-table loop detections; stays zero on a healthy run.
    pub loop_violations: u64,
}

/// Outcome of evaluating one prospective receiver of a finished frame.
struct RxOutcome {
    node: NodeId,
    sinr_db: f64,
    decoded: bool,
}

impl DsrcStack {
    pub fn new(params: DsrcParams) -> Self {
        Self {
            params,
            nodes: BTreeMap::new(),
            medium: Medium::new(),
            beacons: BTreeMap::new(),
            data_apps: BTreeMap::new(),
            loop_violations: 0,
        }
    }

    /// Bring a node onto the channel with an idle MAC and empty tables.
    pub fn attach(&mut self, node: NodeId) {
        let mac = MacState::new(&self.params);
        self.nodes.insert(
            node,
            DsrcNode {
                mac,
                aodv: AodvState::default(),
            },
        );
    }

    /// Remove a departed node. Queued frames are accounted as losses; a frame
    /// already on the air keeps flying and settles at its own end event.
    pub fn detach(&mut self, node: NodeId, ctx: &mut Ctx<'_>) {
        if let Some(ns) = self.nodes.remove(&node) {
            let in_flight = matches!(ns.mac.phase, MacPhase::Tx { .. });
            for (idx, qf) in ns.mac.queue.into_iter().enumerate() {
                if idx == 0 && in_flight {
                    continue; // owned by the medium record now
                }
                if let Some(flow) = qf.frame.flow {
                    ctx.fm.on_lost(flow, qf.frame.seq);
                }
            }
            for (_, pending) in ns.aodv.pending {
                for frame in pending.frames {
                    if let Some(flow) = frame.flow {
                        ctx.fm.on_lost(flow, frame.seq);
                    }
                }
            }
        }
        self.beacons.remove(&node);
        self.data_apps.remove(&node);
    }

    /// Begin the periodic beacon application on `node`, reporting against
    /// `flow`. The first emission lands within one jitter window of now.
    pub fn start_beaconing(&mut self, node: NodeId, flow: FlowHandle, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        self.beacons.insert(
            node,
            BeaconState {
                flow,
                k: 0,
                start: now,
                seq: 0,
            },
        );
        let fire = now.add_micros(self.draw_jitter(ctx));
        ctx.q.schedule(fire, Ev::Bsm { node }).expect("first beacon in future");
    }

    /// Begin the periodic unicast reporting application on `node`; packets
    /// are addressed to the nearest collection point at each emission.
    pub fn start_data_app(&mut self, node: NodeId, bytes: u64, rate_kbps: f64, ctx: &mut Ctx<'_>) {
        let period_us = ((bytes * 8) as f64 / rate_kbps * 1000.0).round() as u64;
        self.data_apps.insert(
            node,
            DataAppState {
                bytes,
                period_us,
                flow: None,
                next_flow_id: 0,
                seq: 0,
            },
        );
        let now = ctx.q.now();
        ctx.q.schedule(now, Ev::DsrcData { node }).expect("first emission now");
    }

    fn draw_jitter(&self, ctx: &mut Ctx<'_>) -> u64 {
        if self.params.bsm_jitter_us == 0 {
            0
        } else {
            ctx.rng.stream("dsrc.jitter").gen_range(0..self.params.bsm_jitter_us)
        }
    }

    /// Beacon timer fired for `node`.
    pub fn on_bsm_timer(&mut self, node: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        if !self.beacons.contains_key(&node) {
            return;
        }
        let Some(pos) = ctx.mob.position_at(node, now) else {
            self.beacons.remove(&node);
            return;
        };
        let capture_rsu = ctx.world.nearest_rsu(ctx.mob, pos, now);
        let (flow, seq) = {
            let st = self.beacons.get_mut(&node).expect("present above");
            let pair = (st.flow, st.seq);
            st.seq += 1;
            st.k += 1;
            pair
        };
        ctx.fm.on_tx(flow, seq, self.params.bsm_bytes, now);
        let frame = Frame {
            kind: FrameKind::Bsm,
            origin: node,
            dst: Dest::Broadcast,
            bytes: self.params.bsm_bytes,
            seq,
            created_at: now,
            flow: Some(flow),
            capture_rsu,
            aodv: None,
        };
        self.enqueue(node, QueuedFrame { frame, next_hop: Dest::Broadcast }, ctx);
        // Next emission sits on the fixed grid plus fresh jitter, so cadence
        // never drifts but neighbours cannot stay phase-locked.
        let (k, start) = {
            let st = self.beacons.get(&node).expect("present above");
            (st.k, st.start)
        };
        let jitter = self.draw_jitter(ctx);
        let next = start
            .add_micros(k * self.params.bsm_period_us)
            .add_micros(jitter);
        ctx.q.schedule(next, Ev::Bsm { node }).expect("next beacon in future");
    }

    /// Unicast reporting timer fired for `node`.
    pub fn on_data_timer(&mut self, node: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        if !self.data_apps.contains_key(&node) {
            return;
        }
        let Some(pos) = ctx.mob.position_at(node, now) else {
            self.data_apps.remove(&node);
            return;
        };
        let Some(rsu) = ctx.world.nearest_rsu(ctx.mob, pos, now) else {
            return; // no collection point in this world
        };
        let (flow, seq, bytes, period_us) = {
            let st = self.data_apps.get_mut(&node).expect("present above");
            // Re-home the flow when the nearest collection point changes.
            let flow = match st.flow {
                Some((cur, f)) if cur == rsu => f,
                _ => {
                    let f = ctx.fm.register(
                        crate::flowmon::FlowKey {
                            src: node,
                            dst: Dest::Node(rsu),
                            flow_id: st.next_flow_id,
                        },
                        crate::flowmon::FlowClass::Data,
                        crate::flowmon::StackTag::Dsrc,
                    );
                    st.next_flow_id += 1;
                    st.flow = Some((rsu, f));
                    st.seq = 0;
                    f
                }
            };
            let seq = st.seq;
            st.seq += 1;
            (flow, seq, st.bytes, st.period_us)
        };
        ctx.fm.on_tx(flow, seq, bytes, now);
        let frame = Frame {
            kind: FrameKind::Data,
            origin: node,
            dst: Dest::Node(rsu),
            bytes,
            seq,
            created_at: now,
            flow: Some(flow),
            capture_rsu: None,
            aodv: None,
        };
        self.send_unicast(node, frame, ctx);
        ctx.q
            .schedule(now.add_micros(period_us), Ev::DsrcData { node })
            .expect("next emission in future");
    }

    /// Broadcast a one-shot warning from `leader`; per-receiver accounting is
    /// driven by the warning flows registered in the collision-warning state.
    pub fn send_warning(&mut self, leader: NodeId, bytes: u64, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let frame = Frame {
            kind: FrameKind::Warning,
            origin: leader,
            dst: Dest::Broadcast,
            bytes,
            seq: 0,
            created_at: now,
            flow: None,
            capture_rsu: None,
            aodv: None,
        };
        self.enqueue(leader, QueuedFrame { frame, next_hop: Dest::Broadcast }, ctx);
    }

    /// Route a unicast frame: straight to the MAC when a fresh route exists,
    /// otherwise buffered behind route discovery.
    pub fn send_unicast(&mut self, origin: NodeId, frame: Frame, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let dest = match frame.dst {
            Dest::Node(d) => d,
            Dest::Broadcast => {
                self.enqueue(origin, QueuedFrame { frame, next_hop: Dest::Broadcast }, ctx);
                return;
            }
        };
        match aodv::fresh_route(self, origin, dest, now) {
            Some(route) => {
                aodv::touch_route(self, origin, dest, now);
                self.enqueue(
                    origin,
                    QueuedFrame { frame, next_hop: Dest::Node(route.next_hop) },
                    ctx,
                );
            }
            None => aodv::buffer_and_discover(self, origin, dest, frame, ctx),
        }
    }

    /// Push a frame into a node's MAC queue (dropping the oldest waiting
    /// frame on overflow) and re-evaluate that node's access.
    pub fn enqueue(&mut self, node: NodeId, qf: QueuedFrame, ctx: &mut Ctx<'_>) {
        let cap = self.params.queue_cap;
        let dropped = {
            let Some(ns) = self.nodes.get_mut(&node) else {
                // Node left between creation and queueing: the frame is lost.
                if let Some(flow) = qf.frame.flow {
                    ctx.fm.on_lost(flow, qf.frame.seq);
                }
                return;
            };
            ns.mac.queue.push_back(qf);
            if ns.mac.queue.len() > cap {
                // Never evict the head while it is on the air.
                let idx = usize::from(matches!(ns.mac.phase, MacPhase::Tx { .. }));
                ns.mac.queue.remove(idx)
            } else {
                None
            }
        };
        if let Some(old) = dropped {
            if let Some(flow) = old.frame.flow {
                ctx.fm.on_lost(flow, old.frame.seq);
            }
        }
        self.poke(node, ctx);
    }

    /// Stale-wake filter in front of the MAC state machine.
    pub fn on_mac_wake(&mut self, node: NodeId, gen: u64, ctx: &mut Ctx<'_>) {
        match self.nodes.get(&node) {
            Some(ns) if ns.mac.wake_gen == gen => self.poke(node, ctx),
            _ => {}
        }
    }

    /// Discovery timer relay.
    pub fn on_aodv_timeout(&mut self, node: NodeId, dest: NodeId, attempt: u32, ctx: &mut Ctx<'_>) {
        aodv::on_timeout(self, node, dest, attempt, ctx);
    }

    /// Re-run one node's MAC against the current channel view.
    fn poke(&mut self, node: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let Some(pos) = ctx.mob.position_at(node, now) else {
            return;
        };
        let start_tx = {
            let Self { nodes, medium, params, .. } = self;
            let Some(ns) = nodes.get_mut(&node) else {
                return;
            };
            let busy = medium.busy_until(pos, node, now, &params.budget, params.cs_threshold_dbm);
            mac::update(&mut ns.mac, node, params, busy, ctx)
        };
        if start_tx {
            self.start_transmission(node, ctx);
        }
    }

    fn poke_all_except(&mut self, skip: Option<NodeId>, ctx: &mut Ctx<'_>) {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            if Some(id) != skip {
                self.poke(id, ctx);
            }
        }
    }

    /// Put the head-of-line frame on the air and freeze the neighbourhood.
    fn start_transmission(&mut self, node: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let Some(pos) = ctx.mob.position_at(node, now) else {
            return;
        };
        let Some(qf) = self.nodes.get(&node).and_then(|ns| ns.mac.queue.front().cloned()) else {
            return;
        };
        let airtime = self.params.airtime_us(qf.frame.bytes);
        let tx_id = self.medium.begin_tx(node, pos, now, airtime, qf);
        let end = now.add_micros(airtime);
        {
            let ns = self.nodes.get_mut(&node).expect("present above");
            ns.mac.phase = MacPhase::Tx { end, tx_id };
            ns.mac.wake_gen += 1; // outstanding wakes no longer apply
        }
        ctx.q.schedule(end, Ev::DsrcTxEnd { id: tx_id }).expect("tx end in future");
        // Everyone in carrier-sense range must freeze now, not at their next
        // wake, or they would count busy time as elapsed backoff.
        self.poke_all_except(Some(node), ctx);
    }

    /// A transmission finished: evaluate every prospective receiver, settle
    /// application accounting, advance the sender's MAC, and let the channel
    /// state ripple to everyone else.
    pub fn on_tx_end(&mut self, tx_id: u64, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let Some(rec) = self.medium.record(tx_id).cloned() else {
            return;
        };
        let outcomes = self.evaluate_receivers(&rec, ctx);
        let frame = rec.queued.frame.clone();
        let mut delivered_next_hop = false;

        for o in &outcomes {
            if !o.decoded {
                continue;
            }
            match frame.kind {
                FrameKind::Bsm => {
                    if Some(o.node) == frame.capture_rsu {
                        let flow = frame.flow.expect("beacons are monitored");
                        ctx.fm
                            .on_rx(flow, frame.seq, frame.bytes, frame.created_at, now, o.sinr_db)
                            .expect("rx not before tx");
                    }
                }
                FrameKind::Warning => {
                    self.deliver_warning(&rec, &frame, o, ctx);
                }
                FrameKind::Data => {
                    if Dest::Node(o.node) == rec.queued.next_hop {
                        delivered_next_hop = true;
                        self.deliver_or_forward(&frame, o, ctx);
                    }
                }
                FrameKind::Rreq => {
                    let msg = frame.aodv.as_ref().expect("routing frame carries message");
                    aodv::on_rreq(self, o.node, rec.tx_node, msg, ctx);
                }
                FrameKind::Rrep => {
                    if Dest::Node(o.node) == rec.queued.next_hop {
                        delivered_next_hop = true;
                        let msg = frame.aodv.as_ref().expect("routing frame carries message");
                        aodv::on_rrep(self, o.node, rec.tx_node, msg, ctx);
                    }
                }
                FrameKind::Rerr => {
                    let msg = frame.aodv.as_ref().expect("routing frame carries message");
                    aodv::on_rerr(self, o.node, rec.tx_node, msg, ctx);
                }
            }
        }

        // A beacon is scored against exactly one collection point: if that
        // one missed it, the emission is lost.
        if frame.kind == FrameKind::Bsm {
            if let (Some(rsu), Some(flow)) = (frame.capture_rsu, frame.flow) {
                let captured = outcomes.iter().any(|o| o.decoded && o.node == rsu);
                if !captured {
                    ctx.fm.on_lost(flow, frame.seq);
                }
            }
        }
        // A warning is one-shot: whoever missed it will never get it.
        if frame.kind == FrameKind::Warning {
            self.settle_missed_warnings(&outcomes, &frame, ctx);
        }

        self.finish_tx(rec.tx_node, rec.queued.next_hop, delivered_next_hop, ctx);
        self.medium.prune(now);
        self.poke_all_except(None, ctx);
    }

    /// Phase one of reception: physics only, no state changes besides RNG
    /// draws. Receivers are visited in node-id order so fading draws are
    /// reproducible.
    fn evaluate_receivers(&self, rec: &TxRecord, ctx: &mut Ctx<'_>) -> Vec<RxOutcome> {
        let now = ctx.q.now();
        let params = &self.params;
        let noise_mw = params.budget.noise_mw();
        let mut outcomes = Vec::new();
        for &n in self.nodes.keys() {
            if n == rec.tx_node {
                continue;
            }
            // Half-duplex: any own transmission overlapping the frame kills it.
            if self.medium.transmitted_during(n, rec.start, rec.end) {
                outcomes.push(RxOutcome { node: n, sinr_db: f64::NEG_INFINITY, decoded: false });
                continue;
            }
            let Some(pos) = ctx.mob.position_at(n, now) else {
                continue;
            };
            let d = distance(rec.pos, pos);
            let pl = friis_path_loss(d.max(0.1), params.budget.frequency_hz)
                .expect("distance clamped positive");
            if params.budget.received_dbm(pl, 1.0) < params.min_rx_dbm {
                continue; // far below any decodable or interfering level
            }
            let fade = match &params.fading {
                Some(profile) => profile.sample_gain(d, ctx.rng.stream("dsrc.fading")),
                None => 1.0,
            };
            let signal_mw = dbm_to_mw(params.budget.received_dbm(pl, fade));
            let interference_mw = {
                let fading = params.fading;
                let rng = ctx.rng.stream("dsrc.fading");
                self.medium.interference_mw(
                    rec.id,
                    rec.start,
                    rec.end,
                    pos,
                    n,
                    &params.budget,
                    |di| match &fading {
                        Some(profile) => profile.sample_gain(di, &mut *rng),
                        None => 1.0,
                    },
                )
            };
            let sample = sinr(signal_mw, interference_mw, noise_mw)
                .expect("positive noise, non-negative powers");
            let decoded = decode(&sample, params.decode_threshold_db);
            outcomes.push(RxOutcome { node: n, sinr_db: sample.sinr_db, decoded });
        }
        outcomes
    }

    /// One decoded copy of the warning at a prospective receiver.
    fn deliver_warning(&mut self, rec: &TxRecord, frame: &Frame, o: &RxOutcome, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let Some(fcw) = ctx.fcw.as_mut() else {
            return;
        };
        let Some(&flow) = fcw.flows.get(&o.node) else {
            return; // bystander, not a monitored recipient
        };
        if fcw.deliveries.contains_key(&o.node) {
            return;
        }
        ctx.fm
            .on_rx(flow, frame.seq, frame.bytes, frame.created_at, now, o.sinr_db)
            .expect("rx not before tx");
        let contention_us = rec.start.saturating_sub(frame.created_at);
        let airtime_us = rec.end.saturating_sub(rec.start);
        fcw.record_delivery(
            o.node,
            now.saturating_sub(frame.created_at),
            crate::apps::DelayBreakdown::Dsrc { contention_us, airtime_us },
        );
    }

    fn settle_missed_warnings(&mut self, outcomes: &[RxOutcome], frame: &Frame, ctx: &mut Ctx<'_>) {
        let Some(fcw) = ctx.fcw.as_mut() else {
            return;
        };
        let missed: Vec<(NodeId, FlowHandle)> = fcw
            .flows
            .iter()
            .filter(|(n, _)| !fcw.deliveries.contains_key(n))
            .filter(|(n, _)| !outcomes.iter().any(|o| o.decoded && o.node == **n))
            .map(|(n, f)| (*n, *f))
            .collect();
        for (_, flow) in missed {
            ctx.fm.on_lost(flow, frame.seq);
        }
    }

    /// Unicast data reached its per-hop receiver: sink it or forward it.
    fn deliver_or_forward(&mut self, frame: &Frame, o: &RxOutcome, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let Dest::Node(dst) = frame.dst else {
            return;
        };
        if o.node == dst {
            if let Some(flow) = frame.flow {
                ctx.fm
                    .on_rx(flow, frame.seq, frame.bytes, frame.created_at, now, o.sinr_db)
                    .expect("rx not before tx");
            }
            return;
        }
        match aodv::fresh_route(self, o.node, dst, now) {
            Some(route) => {
                aodv::touch_route(self, o.node, dst, now);
                self.enqueue(
                    o.node,
                    QueuedFrame {
                        frame: frame.clone(),
                        next_hop: Dest::Node(route.next_hop),
                    },
                    ctx,
                );
            }
            None => {
                if let Some(flow) = frame.flow {
                    ctx.fm.on_lost(flow, frame.seq);
                }
                aodv::handle_no_route(self, o.node, dst, ctx);
            }
        }
    }

    /// Advance the sender past a completed transmission: pop broadcasts,
    /// confirm or retry unicasts, and escalate exhausted retries to routing.
    fn finish_tx(&mut self, sender: NodeId, next_hop: Dest, delivered: bool, ctx: &mut Ctx<'_>) {
        enum After {
            Nothing,
            LinkBreak {
                neighbour: NodeId,
                dest: NodeId,
                lost: Option<(FlowHandle, u64)>,
            },
        }
        let cw_min = self.params.cw_min;
        let cw_max = self.params.cw_max;
        let retry_limit = self.params.retry_limit;
        let after = {
            let Some(ns) = self.nodes.get_mut(&sender) else {
                return; // sender left mid-air; the frame already settled
            };
            if !matches!(ns.mac.phase, MacPhase::Tx { .. }) {
                return;
            }
            ns.mac.phase = MacPhase::Idle;
            ns.mac.force_backoff = true;
            match next_hop {
                Dest::Broadcast => {
                    ns.mac.queue.pop_front();
                    ns.mac.attempts = 0;
                    After::Nothing
                }
                Dest::Node(neighbour) => {
                    if delivered {
                        ns.mac.queue.pop_front();
                        ns.mac.attempts = 0;
                        ns.mac.cw = cw_min;
                        After::Nothing
                    } else {
                        ns.mac.attempts += 1;
                        if ns.mac.attempts > retry_limit {
                            let dropped = ns.mac.queue.pop_front().expect("head was on the air");
                            ns.mac.attempts = 0;
                            ns.mac.cw = cw_min;
                            let lost = dropped.frame.flow.map(|f| (f, dropped.frame.seq));
                            let dest = match dropped.frame.dst {
                                Dest::Node(d) => d,
                                Dest::Broadcast => neighbour,
                            };
                            After::LinkBreak { neighbour, dest, lost }
                        } else {
                            // Same frame, wider window, fresh contention.
                            ns.mac.cw = (2 * ns.mac.cw + 1).min(cw_max);
                            After::Nothing
                        }
                    }
                }
            }
        };
        if let After::LinkBreak { neighbour, dest, lost } = after {
            if let Some((flow, seq)) = lost {
                ctx.fm.on_lost(flow, seq);
            }
            aodv::handle_link_break(self, sender, neighbour, dest, ctx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn airtime_matches_rate_and_preamble() {
        let p = DsrcParams::default();
        // 200 bytes at 6 Mb/s behind a 40 us preamble.
        assert!((p.airtime_us_f64(200) - 306.666_666_666_666_7).abs() < 1e-9);
        assert_eq!(p.airtime_us(200), 307);
        // Routing frames are much shorter.
        assert_eq!(p.airtime_us(32), 83); // 40 + 42.67
    }

    #[test]
    fn arbitration_gap_is_sifs_plus_two_slots() {
        let p = DsrcParams::default();
        assert_eq!(p.aifs_us, p.sifs_us + 2 * p.slot_us);
    }

    #[test]
    fn default_budget_noise_floor() {
        let p = DsrcParams::default();
        assert!((p.budget.noise_dbm() - (-98.0)).abs() < 1e-9);
    }
}
