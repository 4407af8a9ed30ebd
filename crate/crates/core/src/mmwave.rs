//! Beamformed cellular stack: periodic strongest-cell association with
//! two-state blockage, per-cell round-robin TDMA grants, transport-block
//! bundling, and chase-combining retransmissions with a fixed feedback
//! round-trip.
//!
//! Cells schedule independently; highly directional links make cross-cell
//! interference negligible, and in-cell TDMA never overlaps grants, so the
//! interference term of every link evaluation is zero.

use std::collections::{BTreeMap, VecDeque};

use crate::channel::{
    dbm_to_mw, sinr, LinkBudget, Los, LosState, MmwavePathLoss, NakagamiProfile,
};
use crate::engine::SimTime;
use crate::flowmon::FlowHandle;
use crate::mobility::{distance, NodeId};
use crate::sim::{Ctx, Ev};

/// Radio and scheduler parameters for the cellular stack.
#[derive(Debug, Clone)]
pub struct MmwaveParams {
    pub budget: LinkBudget,
    pub path_loss: MmwavePathLoss,
    /// Per-link blockage dynamics (rates per second); None keeps every link
    /// line-of-sight.
    pub blockage: Option<BlockageParams>,
    /// Small-scale fading profile; None models the beamformed mean channel.
    pub fading: Option<NakagamiProfile>,
    /// Combined SINR needed for a transport block to decode.
    pub decode_threshold_db: f64,
    pub slot_us: u64,
    /// Largest transport block one slot can carry.
    pub slot_payload_bits: u64,
    /// Retransmissions allowed per transport block after the first attempt.
    pub max_retx: u32,
    /// Slots between an attempt and the earliest retransmission.
    pub harq_rtt_slots: u64,
    /// Base-station turnaround applied between uplink receipt and downlink
    /// relay, and before uplink traffic reaches its wired sink.
    pub processing_delay_us: u64,
    /// Cadence of the association sweep (also the blockage step).
    pub assoc_period_us: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockageParams {
    pub lambda_block_per_s: f64,
    pub lambda_clear_per_s: f64,
}

impl Default for MmwaveParams {
    fn default() -> Self {
        Self {
            budget: LinkBudget {
                tx_power_dbm: 30.0,
                tx_gain_dbi: 25.0,
                rx_gain_dbi: 25.0,
                frequency_hz: 28.0e9,
                bandwidth_hz: 1.0e9,
                noise_figure_db: 5.0,
            },
            path_loss: MmwavePathLoss::default(),
            blockage: None,
            fading: None,
            decode_threshold_db: 5.0,
            slot_us: 125,
            slot_payload_bits: 64_000,
            max_retx: 3,
            harq_rtt_slots: 4,
            processing_delay_us: 1_000,
            assoc_period_us: 100_000,
        }
    }
}

/// One uplink packet waiting at a vehicle.
#[derive(Debug, Clone)]
pub struct UlPacket {
    /// Monitored flow; None for the one-shot warning, whose accounting is
    /// carried per recipient by its downlink copies.
    pub flow: Option<FlowHandle>,
    pub seq: u64,
    pub bytes: u64,
    pub created_at: SimTime,
    pub warning: bool,
}

/// One relayed warning copy waiting at a base station for a recipient.
#[derive(Debug, Clone)]
pub struct DlCopy {
    pub target: NodeId,
    pub flow: FlowHandle,
    pub seq: u64,
    pub bytes: u64,
    pub created_at: SimTime,
    /// When the relay finished processing and the copy became schedulable.
    pub ready_at: SimTime,
    /// Uplink-leg components carried along for the delay ledger.
    pub uplink_wait_us: u64,
    pub uplink_air_us: u64,
}

/// An in-flight transport block: its contents, combined signal energy, and
/// retransmission budget.
#[derive(Debug)]
pub struct Harq<T> {
    pub items: Vec<T>,
    pub attempts: u32,
    pub acc_linear: f64,
    /// Earliest time the next attempt may be granted.
    pub ready_at: SimTime,
    /// Grant time of the first attempt (delay ledger).
    pub first_tx_start: SimTime,
}

#[derive(Debug, Default)]
pub struct UeState {
    pub attached: Option<NodeId>,
    pub ul_queue: VecDeque<UlPacket>,
    pub ul_harq: Option<Harq<UlPacket>>,
    cbr: Option<CbrState>,
}

#[derive(Debug)]
struct CbrState {
    flow: FlowHandle,
    seq: u64,
    bytes: u64,
    period_us: u64,
}

#[derive(Debug, Default)]
pub struct DlState {
    pub queue: VecDeque<DlCopy>,
    pub harq: Option<Harq<DlCopy>>,
}

#[derive(Debug)]
pub struct BsState {
    pub pos: (f64, f64),
    /// Attached vehicles in attach order; the grant cursor walks this ring.
    pub ring: Vec<NodeId>,
    pub cursor: usize,
    pub dl: BTreeMap<NodeId, DlState>,
    /// Earliest armed tick, so redundant arms collapse.
    armed_at: Option<SimTime>,
    /// Grant guard: at most one grant per slot index.
    last_served_slot: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GrantKind {
    DlRetx,
    DlNew,
    UlRetx,
    UlNew,
}

/// The whole cellular domain: vehicles, cells, and per-link sight state.
#[derive(Debug)]
pub struct MmwaveStack {
    pub params: MmwaveParams,
    pub ues: BTreeMap<NodeId, UeState>,
    pub bss: BTreeMap<NodeId, BsState>,
    /// Line-of-sight state per (vehicle, cell) link, created on first use
    /// and stepped on the association cadence.
    pub los: BTreeMap<(NodeId, NodeId), LosState>,
}

impl MmwaveStack {
    pub fn new(params: MmwaveParams) -> Self {
        Self {
            params,
            ues: BTreeMap::new(),
            bss: BTreeMap::new(),
            los: BTreeMap::new(),
        }
    }

    pub fn add_bs(&mut self, bs: NodeId, pos: (f64, f64)) {
        self.bss.insert(
            bs,
            BsState {
                pos,
                ring: Vec::new(),
                cursor: 0,
                dl: BTreeMap::new(),
                armed_at: None,
                last_served_slot: None,
            },
        );
    }

    /// Bring a vehicle into the cellular domain and attach it to the
    /// strongest cell.
    pub fn add_ue(&mut self, ue: NodeId, ctx: &mut Ctx<'_>) {
        self.ues.insert(ue, UeState::default());
        if let Some(best) = self.best_cell(ue, ctx) {
            self.attach(ue, best);
        }
    }

    /// Remove a departed vehicle. Everything still queued for it, uplink or
    /// downlink, is accounted as lost.
    pub fn remove_ue(&mut self, ue: NodeId, ctx: &mut Ctx<'_>) {
        let Some(st) = self.ues.remove(&ue) else {
            return;
        };
        for pkt in st.ul_queue.iter().chain(st.ul_harq.iter().flat_map(|h| h.items.iter())) {
            if let Some(flow) = pkt.flow {
                ctx.fm.on_lost(flow, pkt.seq);
            }
        }
        if let Some(bs) = st.attached {
            self.drop_from_cell(ue, bs, ctx);
        }
        self.los.retain(|(u, _), _| *u != ue);
    }

    fn drop_from_cell(&mut self, ue: NodeId, bs: NodeId, ctx: &mut Ctx<'_>) {
        let Some(cell) = self.bss.get_mut(&bs) else {
            return;
        };
        if let Some(idx) = cell.ring.iter().position(|&n| n == ue) {
            cell.ring.remove(idx);
            if idx < cell.cursor {
                cell.cursor -= 1;
            }
            if cell.ring.is_empty() {
                cell.cursor = 0;
            } else {
                cell.cursor %= cell.ring.len();
            }
        }
        if let Some(dl) = cell.dl.remove(&ue) {
            for copy in dl.queue.iter().chain(dl.harq.iter().flat_map(|h| h.items.iter())) {
                ctx.fm.on_lost(copy.flow, copy.seq);
            }
        }
    }

    fn attach(&mut self, ue: NodeId, bs: NodeId) {
        if let Some(st) = self.ues.get_mut(&ue) {
            st.attached = Some(bs);
        }
        if let Some(cell) = self.bss.get_mut(&bs) {
            cell.ring.push(ue);
            cell.dl.entry(ue).or_default();
        }
    }

    /// Strongest expected cell for `ue` right now: mean channel through the
    /// current sight state, ties to the lowest cell id.
    fn best_cell(&mut self, ue: NodeId, ctx: &mut Ctx<'_>) -> Option<NodeId> {
        let now = ctx.q.now();
        let pos = ctx.mob.position_at(ue, now)?;
        let mut best: Option<(f64, NodeId)> = None;
        let bs_ids: Vec<(NodeId, (f64, f64))> =
            self.bss.iter().map(|(&id, st)| (id, st.pos)).collect();
        for (bs, bs_pos) in bs_ids {
            let d = distance(pos, bs_pos);
            let los = self.link_los(ue, bs);
            let pl = self
                .params
                .path_loss
                .path_loss(d.max(1.0), los)
                .expect("distance clamped positive");
            let dbm = self.params.budget.received_dbm(pl, 1.0);
            // Strict inequality keeps the lowest id on exact ties.
            if best.map_or(true, |(b, _)| dbm > b) {
                best = Some((dbm, bs));
            }
        }
        best.map(|(_, bs)| bs)
    }

    fn link_los(&mut self, ue: NodeId, bs: NodeId) -> Los {
        match self.params.blockage {
            None => Los::Clear,
            Some(bp) => {
                self.los
                    .entry((ue, bs))
                    .or_insert_with(|| LosState::new(Los::Clear, bp.lambda_block_per_s, bp.lambda_clear_per_s))
                    .state
            }
        }
    }

    /// Association sweep: step every link's sight state by one period, then
    /// re-attach every vehicle to its strongest cell.
    pub fn on_assoc_tick(&mut self, ctx: &mut Ctx<'_>) {
        let dt_s = self.params.assoc_period_us as f64 / 1e6;
        if self.params.blockage.is_some() {
            let rng = ctx.rng.stream("mmwave.blockage");
            for state in self.los.values_mut() {
                state.step(dt_s, &mut *rng);
            }
        }
        let ues: Vec<NodeId> = self.ues.keys().copied().collect();
        for ue in ues {
            let Some(best) = self.best_cell(ue, ctx) else {
                continue;
            };
            let current = self.ues.get(&ue).and_then(|s| s.attached);
            if current != Some(best) {
                self.handover(ue, current, best, ctx);
            }
        }
        let next = ctx.q.now().add_micros(self.params.assoc_period_us);
        ctx.q.schedule(next, Ev::AssocTick).expect("assoc tick in future");
    }

    /// Move `ue` to `new_bs`. Downlink copies waiting at the old cell are
    /// lost; an interrupted uplink block returns to the head of the queue
    /// and starts fresh at the new cell.
    fn handover(&mut self, ue: NodeId, old_bs: Option<NodeId>, new_bs: NodeId, ctx: &mut Ctx<'_>) {
        if let Some(old) = old_bs {
            self.drop_from_cell(ue, old, ctx);
        }
        if let Some(st) = self.ues.get_mut(&ue) {
            if let Some(harq) = st.ul_harq.take() {
                for pkt in harq.items.into_iter().rev() {
                    st.ul_queue.push_front(pkt);
                }
            }
        }
        self.attach(ue, new_bs);
        self.arm_tick(new_bs, ctx.q.now(), ctx);
    }

    /// Begin fixed-rate uplink reporting from `ue` against `flow`.
    pub fn start_cbr(&mut self, ue: NodeId, flow: FlowHandle, bytes: u64, rate_kbps: f64, ctx: &mut Ctx<'_>) {
        let period_us = ((bytes * 8) as f64 / rate_kbps * 1000.0).round() as u64;
        if let Some(st) = self.ues.get_mut(&ue) {
            st.cbr = Some(CbrState { flow, seq: 0, bytes, period_us });
        }
        let now = ctx.q.now();
        ctx.q.schedule(now, Ev::MmwCbr { node: ue }).expect("first emission now");
    }

    /// Fixed-rate emission timer fired.
    pub fn on_cbr_timer(&mut self, ue: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        if ctx.mob.position_at(ue, now).is_none() {
            return; // vehicle left; exit handling already drained state
        }
        let Some(st) = self.ues.get_mut(&ue) else {
            return;
        };
        let Some(cbr) = st.cbr.as_mut() else {
            return;
        };
        let (flow, seq, bytes, period_us) = (cbr.flow, cbr.seq, cbr.bytes, cbr.period_us);
        cbr.seq += 1;
        ctx.fm.on_tx(flow, seq, bytes, now);
        st.ul_queue.push_back(UlPacket {
            flow: Some(flow),
            seq,
            bytes,
            created_at: now,
            warning: false,
        });
        let attached = st.attached;
        if let Some(bs) = attached {
            self.arm_tick(bs, now, ctx);
        }
        ctx.q
            .schedule(now.add_micros(period_us), Ev::MmwCbr { node: ue })
            .expect("next emission in future");
    }

    /// Queue the one-shot warning for uplink; its recipients are the
    /// monitored flows in the collision-warning state.
    pub fn send_warning(&mut self, leader: NodeId, bytes: u64, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let Some(st) = self.ues.get_mut(&leader) else {
            return;
        };
        st.ul_queue.push_back(UlPacket {
            flow: None,
            seq: 0,
            bytes,
            created_at: now,
            warning: true,
        });
        let attached = st.attached;
        if let Some(bs) = attached {
            self.arm_tick(bs, now, ctx);
        }
    }

    /// Relay copies finished base-station processing: queue them downlink
    /// for recipients still in this cell; anyone gone is a loss.
    pub fn on_dl_ready(&mut self, bs: NodeId, copies: Vec<DlCopy>, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        for copy in copies {
            let here = self
                .ues
                .get(&copy.target)
                .map_or(false, |st| st.attached == Some(bs));
            if here {
                let cell = self.bss.get_mut(&bs).expect("cell exists");
                cell.dl.entry(copy.target).or_default().queue.push_back(copy);
            } else {
                ctx.fm.on_lost(copy.flow, copy.seq);
            }
        }
        self.arm_tick(bs, now, ctx);
    }

    fn align_up(&self, t: SimTime) -> SimTime {
        let slot = self.params.slot_us;
        let micros = t.as_micros();
        let rem = micros % slot;
        if rem == 0 {
            t
        } else {
            SimTime::from_micros(micros + slot - rem)
        }
    }

    /// Arm the cell's next grant tick at the first slot boundary at or after
    /// `earliest`, collapsing into an already earlier armed tick.
    fn arm_tick(&mut self, bs: NodeId, earliest: SimTime, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let at = self.align_up(earliest.max(now));
        let Some(cell) = self.bss.get_mut(&bs) else {
            return;
        };
        if cell.armed_at.map_or(true, |armed| at < armed) {
            cell.armed_at = Some(at);
            ctx.q.schedule(at, Ev::MmwSlot { bs }).expect("tick in future");
        }
    }

    /// Grant tick: serve at most one transport block in this slot, then keep
    /// the tick armed for as long as there is (or will be) work.
    pub fn on_slot(&mut self, bs: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let slot_idx = now.as_micros() / self.params.slot_us;
        {
            let Some(cell) = self.bss.get_mut(&bs) else {
                return;
            };
            if cell.armed_at == Some(now) {
                cell.armed_at = None;
            }
            if cell.last_served_slot == Some(slot_idx) {
                self.rearm(bs, ctx);
                return; // an extra tick landed in an already-granted slot
            }
        }
        let grant = self.next_grant(bs, now);
        if let Some((ue, kind)) = grant {
            self.bss.get_mut(&bs).expect("cell exists").last_served_slot = Some(slot_idx);
            self.serve(bs, ue, kind, ctx);
        }
        self.rearm(bs, ctx);
    }

    /// Round-robin scan from the cursor for the first vehicle with
    /// serviceable work. Per vehicle, a ready retransmission outranks new
    /// data, and downlink outranks uplink.
    fn next_grant(&mut self, bs: NodeId, now: SimTime) -> Option<(NodeId, GrantKind)> {
        let Self { ues, bss, .. } = self;
        let cell = bss.get_mut(&bs)?;
        let len = cell.ring.len();
        for i in 0..len {
            let idx = (cell.cursor + i) % len;
            let ue = cell.ring[idx];
            let kind = {
                let dl = cell.dl.get(&ue);
                let ul = ues.get(&ue);
                let dl_kind = match dl {
                    Some(DlState { harq: Some(h), .. }) if h.ready_at <= now => Some(GrantKind::DlRetx),
                    Some(DlState { harq: Some(_), .. }) => None, // stop-and-wait
                    Some(DlState { queue, .. }) if !queue.is_empty() => Some(GrantKind::DlNew),
                    _ => None,
                };
                let ul_kind = match ul {
                    Some(UeState { ul_harq: Some(h), .. }) if h.ready_at <= now => Some(GrantKind::UlRetx),
                    Some(UeState { ul_harq: Some(_), .. }) => None,
                    Some(UeState { ul_queue, .. }) if !ul_queue.is_empty() => Some(GrantKind::UlNew),
                    _ => None,
                };
                dl_kind.or(ul_kind)
            };
            if let Some(kind) = kind {
                cell.cursor = (idx + 1) % len;
                return Some((ue, kind));
            }
        }
        None
    }

    /// Per-attempt link quality between a vehicle and a cell, through the
    /// current sight state. In-cell TDMA and beam isolation leave zero
    /// interference.
    fn link_sinr_db(&mut self, ue: NodeId, bs: NodeId, ctx: &mut Ctx<'_>) -> f64 {
        let now = ctx.q.now();
        let bs_pos = self.bss.get(&bs).expect("cell exists").pos;
        let Some(pos) = ctx.mob.position_at(ue, now) else {
            return crate::channel::SINR_FLOOR_DB;
        };
        let d = distance(pos, bs_pos);
        let los = self.link_los(ue, bs);
        let pl = self
            .params
            .path_loss
            .path_loss(d.max(1.0), los)
            .expect("distance clamped positive");
        let fade = match &self.params.fading {
            Some(profile) => profile.sample_gain(d, ctx.rng.stream("mmwave.fading")),
            None => 1.0,
        };
        let signal_mw = dbm_to_mw(self.params.budget.received_dbm(pl, fade));
        let noise_mw = self.params.budget.noise_mw();
        sinr(signal_mw, 0.0, noise_mw)
            .expect("positive noise")
            .sinr_db
    }

    fn serve(&mut self, bs: NodeId, ue: NodeId, kind: GrantKind, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        match kind {
            GrantKind::UlNew => {
                let harq = {
                    let st = self.ues.get_mut(&ue).expect("granted ue exists");
                    let mut items = Vec::new();
                    let mut bits = 0u64;
                    while let Some(head) = st.ul_queue.front() {
                        let need = head.bytes * 8;
                        if !items.is_empty() && bits + need > self.params.slot_payload_bits {
                            break;
                        }
                        bits += need;
                        items.push(st.ul_queue.pop_front().expect("front exists"));
                        if bits >= self.params.slot_payload_bits {
                            break;
                        }
                    }
                    Harq { items, attempts: 0, acc_linear: 0.0, ready_at: now, first_tx_start: now }
                };
                self.attempt_ul(bs, ue, harq, ctx);
            }
            GrantKind::UlRetx => {
                let harq = self
                    .ues
                    .get_mut(&ue)
                    .and_then(|st| st.ul_harq.take())
                    .expect("ready uplink retransmission exists");
                self.attempt_ul(bs, ue, harq, ctx);
            }
            GrantKind::DlNew => {
                let harq = {
                    let cell = self.bss.get_mut(&bs).expect("cell exists");
                    let dl = cell.dl.get_mut(&ue).expect("granted queue exists");
                    let mut items = Vec::new();
                    let mut bits = 0u64;
                    while let Some(head) = dl.queue.front() {
                        let need = head.bytes * 8;
                        if !items.is_empty() && bits + need > self.params.slot_payload_bits {
                            break;
                        }
                        bits += need;
                        items.push(dl.queue.pop_front().expect("front exists"));
                        if bits >= self.params.slot_payload_bits {
                            break;
                        }
                    }
                    Harq { items, attempts: 0, acc_linear: 0.0, ready_at: now, first_tx_start: now }
                };
                self.attempt_dl(bs, ue, harq, ctx);
            }
            GrantKind::DlRetx => {
                let harq = self
                    .bss
                    .get_mut(&bs)
                    .and_then(|cell| cell.dl.get_mut(&ue))
                    .and_then(|dl| dl.harq.take())
                    .expect("ready downlink retransmission exists");
                self.attempt_dl(bs, ue, harq, ctx);
            }
        }
    }

    /// One uplink attempt of a transport block: accumulate energy, then
    /// deliver, park for retransmission, or give up.
    fn attempt_ul(&mut self, bs: NodeId, ue: NodeId, mut harq: Harq<UlPacket>, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let slot_end = now.add_micros(self.params.slot_us);
        harq.attempts += 1;
        let sinr_db = self.link_sinr_db(ue, bs, ctx);
        harq.acc_linear += 10f64.powf(sinr_db / 10.0);
        let combined_db = 10.0 * harq.acc_linear.log10();
        if combined_db >= self.params.decode_threshold_db {
            let deliver_at = slot_end.add_micros(self.params.processing_delay_us);
            let mut relay: Vec<DlCopy> = Vec::new();
            for pkt in &harq.items {
                if let Some(flow) = pkt.flow {
                    if deliver_at <= ctx.q.horizon() {
                        ctx.fm
                            .on_rx(flow, pkt.seq, pkt.bytes, pkt.created_at, deliver_at, sinr_db)
                            .expect("rx not before tx");
                    }
                    // Past the horizon the sink never sees it; the pending
                    // entry settles as a loss at finalization.
                }
                if pkt.warning {
                    if let Some(fcw) = ctx.fcw.as_ref() {
                        let uplink_wait_us = harq.first_tx_start.saturating_sub(pkt.created_at);
                        let uplink_air_us = slot_end.saturating_sub(harq.first_tx_start);
                        for (&target, &flow) in &fcw.flows {
                            relay.push(DlCopy {
                                target,
                                flow,
                                seq: pkt.seq,
                                bytes: pkt.bytes,
                                created_at: pkt.created_at,
                                ready_at: deliver_at,
                                uplink_wait_us,
                                uplink_air_us,
                            });
                        }
                    }
                }
            }
            if !relay.is_empty() && deliver_at <= ctx.q.horizon() {
                ctx.q
                    .schedule(deliver_at, Ev::MmwDlReady { bs, copies: relay })
                    .expect("relay in future");
            }
        } else if harq.attempts > self.params.max_retx {
            for pkt in &harq.items {
                if let Some(flow) = pkt.flow {
                    ctx.fm.on_lost(flow, pkt.seq);
                }
                if pkt.warning {
                    if let Some(fcw) = ctx.fcw.as_ref() {
                        let undelivered: Vec<FlowHandle> = fcw
                            .flows
                            .iter()
                            .filter(|(n, _)| !fcw.deliveries.contains_key(n))
                            .map(|(_, f)| *f)
                            .collect();
                        for flow in undelivered {
                            ctx.fm.on_lost(flow, pkt.seq);
                        }
                    }
                }
            }
        } else {
            harq.ready_at = now.add_micros(self.params.harq_rtt_slots * self.params.slot_us);
            if let Some(st) = self.ues.get_mut(&ue) {
                st.ul_harq = Some(harq);
            }
        }
    }

    /// One downlink attempt; deliveries land at slot end and feed the
    /// collision-warning delay ledger.
    fn attempt_dl(&mut self, bs: NodeId, ue: NodeId, mut harq: Harq<DlCopy>, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let slot_end = now.add_micros(self.params.slot_us);
        harq.attempts += 1;
        let sinr_db = self.link_sinr_db(ue, bs, ctx);
        harq.acc_linear += 10f64.powf(sinr_db / 10.0);
        let combined_db = 10.0 * harq.acc_linear.log10();
        if combined_db >= self.params.decode_threshold_db {
            if slot_end <= ctx.q.horizon() {
                for copy in &harq.items {
                    ctx.fm
                        .on_rx(copy.flow, copy.seq, copy.bytes, copy.created_at, slot_end, sinr_db)
                        .expect("rx not before tx");
                    if let Some(fcw) = ctx.fcw.as_mut() {
                        let processing_us = copy.ready_at.saturating_sub(
                            copy.created_at
                                .add_micros(copy.uplink_wait_us)
                                .add_micros(copy.uplink_air_us),
                        );
                        fcw.record_delivery(
                            copy.target,
                            slot_end.saturating_sub(copy.created_at),
                            crate::apps::DelayBreakdown::Mmwave {
                                uplink_wait_us: copy.uplink_wait_us,
                                uplink_air_us: copy.uplink_air_us,
                                processing_us,
                                downlink_wait_us: harq.first_tx_start.saturating_sub(copy.ready_at),
                                downlink_air_us: slot_end.saturating_sub(harq.first_tx_start),
                            },
                        );
                    }
                }
            }
            // Past the horizon: never delivered; pending settles as lost.
        } else if harq.attempts > self.params.max_retx {
            for copy in &harq.items {
                ctx.fm.on_lost(copy.flow, copy.seq);
            }
        } else {
            harq.ready_at = now.add_micros(self.params.harq_rtt_slots * self.params.slot_us);
            if let Some(dl) = self.bss.get_mut(&bs).and_then(|c| c.dl.get_mut(&ue)) {
                dl.harq = Some(harq);
            }
        }
    }

    /// Keep the tick armed while any work exists: immediately for ready
    /// work, at the earliest retransmission window otherwise.
    fn rearm(&mut self, bs: NodeId, ctx: &mut Ctx<'_>) {
        let now = ctx.q.now();
        let next_slot = SimTime::from_micros(
            (now.as_micros() / self.params.slot_us + 1) * self.params.slot_us,
        );
        let earliest = {
            let Some(cell) = self.bss.get(&bs) else {
                return;
            };
            let mut earliest: Option<SimTime> = None;
            let mut consider = |t: SimTime| {
                earliest = Some(earliest.map_or(t, |e: SimTime| e.min(t)));
            };
            for &ue in &cell.ring {
                if let Some(dl) = cell.dl.get(&ue) {
                    match &dl.harq {
                        Some(h) => consider(h.ready_at.max(next_slot)),
                        None if !dl.queue.is_empty() => consider(next_slot),
                        None => {}
                    }
                }
                if let Some(st) = self.ues.get(&ue) {
                    match &st.ul_harq {
                        Some(h) => consider(h.ready_at.max(next_slot)),
                        None if !st.ul_queue.is_empty() => consider(next_slot),
                        None => {}
                    }
                }
            }
            earliest
        };
        if let Some(at) = earliest {
            self.arm_tick(bs, at, ctx);
        }
    }
}
