//! Simulation shell: the node roster, the event dispatcher, and the glue
//! between the applications and the two radio stacks.
//!
//! The shell owns everything with global lifetime — queue, RNG, roster,
//! mobility, flow monitor, the stacks — and routes each popped event to the
//! module that handles it. Stacks never call each other; they only share the
//! dispatch context.

use std::collections::BTreeMap;

use crate::apps::FcwState;
use crate::dsrc::DsrcStack;
use crate::engine::{EventQueue, RngHub, SimTime};
use crate::flowmon::{Dest, FlowClass, FlowKey, FlowMonitor, StackTag};
use crate::mmwave::{DlCopy, MmwaveStack};
use crate::mobility::{distance, MobilityModel, NodeId, NodeKind};

/// One entry in the roster. Position and motion live in the mobility model;
/// this is identity only.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
}

/// The node roster: who exists, of what kind, under what display name.
#[derive(Debug, Default)]
pub struct World {
    nodes: Vec<Node>,
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: NodeId, kind: NodeKind, label: impl Into<String>) {
        self.nodes.push(Node { id, kind, label: label.into() });
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.kind)
    }

    pub fn label(&self, id: NodeId) -> &str {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .map(|n| n.label.as_str())
            .unwrap_or("?")
    }

    pub fn ids_of(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.id).collect()
    }

    /// Closest node of `kind` with a known position at `t`. Strict `<` keeps
    /// the lowest id on exact distance ties, so the answer is stable.
    pub fn nearest_of(
        &self,
        kind: NodeKind,
        mob: &MobilityModel,
        pos: (f64, f64),
        t: SimTime,
    ) -> Option<NodeId> {
        let mut best: Option<(f64, NodeId)> = None;
        for n in self.nodes.iter().filter(|n| n.kind == kind) {
            let Some(p) = mob.position_at(n.id, t) else {
                continue;
            };
            let d = distance(p, pos);
            if best.map_or(true, |(bd, bid)| (d, n.id.0) < (bd, bid.0)) {
                best = Some((d, n.id));
            }
        }
        best.map(|(_, id)| id)
    }

    pub fn nearest_rsu(&self, mob: &MobilityModel, pos: (f64, f64), t: SimTime) -> Option<NodeId> {
        self.nearest_of(NodeKind::Rsu, mob, pos, t)
    }
}

/// Every event the simulation can dispatch. Payloads carry ids, not
/// references, so events stay `'static` inside the queue.
#[derive(Debug, Clone)]
pub enum Ev {
    /// A vehicle's trace begins: attach it and start its applications.
    NodeEnter(NodeId),
    /// A vehicle's trace ends: tear down its stack state.
    NodeExit(NodeId),
    /// The braking event fires; the armed warning goes out once.
    FcwTrigger,
    /// Periodic cell reselection and blockage-state step.
    AssocTick,
    /// Periodic safety beacon for one vehicle.
    Bsm { node: NodeId },
    /// Periodic collection-payload emission over the broadcast stack.
    DsrcData { node: NodeId },
    /// A deferred MAC wake (AIFS end, backoff end, or busy end). `gen` is
    /// compared against the MAC's current wake generation; stale wakes are
    /// ignored, which is how pending wakes are "cancelled".
    MacWake { node: NodeId, gen: u64 },
    /// A transmission's airtime finished; evaluate its receivers.
    DsrcTxEnd { id: u64 },
    /// Route discovery attempt timed out.
    AodvTimeout { node: NodeId, dest: NodeId, attempt: u32 },
    /// A base station's scheduler tick.
    MmwSlot { bs: NodeId },
    /// Periodic collection-payload emission over the cellular stack.
    MmwCbr { node: NodeId },
    /// Relayed warning copies finished base-station processing.
    MmwDlReady { bs: NodeId, copies: Vec<DlCopy> },
}

/// Borrowed view of the shared simulation state handed to every handler.
/// Fields are separate borrows so a stack can hold `&mut self` while still
/// scheduling events and recording flow samples.
pub struct Ctx<'a> {
    pub q: &'a mut EventQueue<Ev>,
    pub rng: &'a mut RngHub,
    pub world: &'a World,
    pub mob: &'a MobilityModel,
    pub fm: &'a mut FlowMonitor,
    pub fcw: &'a mut Option<FcwState>,
}

/// What to switch on for a vehicle when its trace begins.
#[derive(Debug, Clone, Default)]
pub struct EnterActions {
    pub dsrc_attach: bool,
    pub dsrc_beacon: bool,
    /// Routed collection app: (payload bytes, stream rate in kbit/s).
    pub dsrc_data: Option<(u64, f64)>,
    pub mmw_attach: bool,
    /// Cellular collection app: (payload bytes, stream rate in kbit/s).
    pub mmw_cbr: Option<(u64, f64)>,
}

/// The assembled simulation. Build one (directly or via a scenario), seed the
/// queue with entries/exits/triggers, then `run()` to completion.
pub struct Sim {
    pub q: EventQueue<Ev>,
    pub rng: RngHub,
    pub world: World,
    pub mob: MobilityModel,
    pub fm: FlowMonitor,
    pub dsrc: Option<DsrcStack>,
    pub mmw: Option<MmwaveStack>,
    pub fcw: Option<FcwState>,
    pub enter: EnterActions,
}

impl Sim {
    pub fn new(horizon: SimTime, seed: u64) -> Self {
        Self {
            q: EventQueue::new(horizon),
            rng: RngHub::new(seed),
            world: World::new(),
            mob: MobilityModel::new(),
            fm: FlowMonitor::new(),
            dsrc: None,
            mmw: None,
            fcw: None,
            enter: EnterActions::default(),
        }
    }

    /// Split into the shared context plus the stacks, so handlers can borrow
    /// a stack mutably while the context stays usable.
    pub fn split(&mut self) -> (Ctx<'_>, Option<&mut DsrcStack>, Option<&mut MmwaveStack>) {
        let Self { q, rng, world, mob, fm, dsrc, mmw, fcw, .. } = self;
        (Ctx { q, rng, world, mob, fm, fcw }, dsrc.as_mut(), mmw.as_mut())
    }

    /// Drain the queue up to the horizon, then settle the clock and convert
    /// any still-pending packets into losses.
    pub fn run(&mut self) {
        let horizon = self.q.horizon();
        while let Some(ev) = self.q.pop_due(horizon) {
            self.dispatch(ev.payload);
        }
        self.q.advance_to(horizon);
        self.fm.finalize();
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::NodeEnter(node) => self.on_enter(node),
            Ev::NodeExit(node) => self.on_exit(node),
            Ev::FcwTrigger => self.on_fcw_trigger(),
            Ev::AssocTick => {
                let (mut ctx, _, mmw) = self.split();
                if let Some(m) = mmw {
                    m.on_assoc_tick(&mut ctx);
                }
            }
            Ev::Bsm { node } => {
                let (mut ctx, dsrc, _) = self.split();
                if let Some(d) = dsrc {
                    d.on_bsm_timer(node, &mut ctx);
                }
            }
            Ev::DsrcData { node } => {
                let (mut ctx, dsrc, _) = self.split();
                if let Some(d) = dsrc {
                    d.on_data_timer(node, &mut ctx);
                }
            }
            Ev::MacWake { node, gen } => {
                let (mut ctx, dsrc, _) = self.split();
                if let Some(d) = dsrc {
                    d.on_mac_wake(node, gen, &mut ctx);
                }
            }
            Ev::DsrcTxEnd { id } => {
                let (mut ctx, dsrc, _) = self.split();
                if let Some(d) = dsrc {
                    d.on_tx_end(id, &mut ctx);
                }
            }
            Ev::AodvTimeout { node, dest, attempt } => {
                let (mut ctx, dsrc, _) = self.split();
                if let Some(d) = dsrc {
                    d.on_aodv_timeout(node, dest, attempt, &mut ctx);
                }
            }
            Ev::MmwSlot { bs } => {
                let (mut ctx, _, mmw) = self.split();
                if let Some(m) = mmw {
                    m.on_slot(bs, &mut ctx);
                }
            }
            Ev::MmwCbr { node } => {
                let (mut ctx, _, mmw) = self.split();
                if let Some(m) = mmw {
                    m.on_cbr_timer(node, &mut ctx);
                }
            }
            Ev::MmwDlReady { bs, copies } => {
                let (mut ctx, _, mmw) = self.split();
                if let Some(m) = mmw {
                    m.on_dl_ready(bs, copies, &mut ctx);
                }
            }
        }
    }

    /// A vehicle's trace begins: attach per the configured actions and
    /// register its monitored flows.
    fn on_enter(&mut self, node: NodeId) {
        let actions = self.enter.clone();
        if actions.dsrc_attach {
            if let Some(d) = self.dsrc.as_mut() {
                d.attach(node);
            }
        }
        if actions.dsrc_beacon && self.dsrc.is_some() {
            let flow = self.fm.register(
                FlowKey { src: node, dst: Dest::Broadcast, flow_id: 0 },
                FlowClass::Beacon,
                StackTag::Dsrc,
            );
            let (mut ctx, dsrc, _) = self.split();
            if let Some(d) = dsrc {
                d.start_beaconing(node, flow, &mut ctx);
            }
        }
        if let Some((bytes, rate_kbps)) = actions.dsrc_data {
            let (mut ctx, dsrc, _) = self.split();
            if let Some(d) = dsrc {
                d.start_data_app(node, bytes, rate_kbps, &mut ctx);
            }
        }
        if actions.mmw_attach {
            let (mut ctx, _, mmw) = self.split();
            if let Some(m) = mmw {
                m.add_ue(node, &mut ctx);
            }
        }
        if let Some((bytes, rate_kbps)) = actions.mmw_cbr {
            if self.mmw.is_some() {
                // Name the flow after the cell serving the entry point; the
                // stream keeps this identity across later handovers.
                let now = self.q.now();
                let dst = self
                    .mob
                    .position_at(node, now)
                    .and_then(|p| self.world.nearest_of(NodeKind::BaseStation, &self.mob, p, now))
                    .map_or(Dest::Broadcast, Dest::Node);
                let flow = self.fm.register(
                    FlowKey { src: node, dst, flow_id: 0 },
                    FlowClass::CbrUplink,
                    StackTag::Mmwave,
                );
                let (mut ctx, _, mmw) = self.split();
                if let Some(m) = mmw {
                    m.start_cbr(node, flow, bytes, rate_kbps, &mut ctx);
                }
            }
        }
    }

    /// A vehicle's trace ends: release stack state; queued traffic becomes
    /// losses.
    fn on_exit(&mut self, node: NodeId) {
        {
            let (mut ctx, dsrc, _) = self.split();
            if let Some(d) = dsrc {
                d.detach(node, &mut ctx);
            }
        }
        let (mut ctx, _, mmw) = self.split();
        if let Some(m) = mmw {
            m.remove_ue(node, &mut ctx);
        }
    }

    /// The braking event: register one monitored warning flow per follower,
    /// mark them all sent now, and hand the payload to the carrying stack.
    fn on_fcw_trigger(&mut self) {
        let Some(fcw) = self.fcw.as_mut() else {
            return;
        };
        if fcw.triggered {
            return;
        }
        fcw.triggered = true;
        let leader = fcw.leader;
        let bytes = fcw.warning_bytes;
        let stack = fcw.stack;
        let followers = fcw.followers.clone();

        let now = self.q.now();
        let mut flows = BTreeMap::new();
        for f in &followers {
            let h = self.fm.register(
                FlowKey { src: leader, dst: Dest::Node(*f), flow_id: 0 },
                FlowClass::Warning,
                stack,
            );
            self.fm.on_tx(h, 0, bytes, now);
            flows.insert(*f, h);
        }
        if let Some(fcw) = self.fcw.as_mut() {
            fcw.flows = flows;
        }

        match stack {
            StackTag::Dsrc => {
                let (mut ctx, dsrc, _) = self.split();
                if let Some(d) = dsrc {
                    d.send_warning(leader, bytes, &mut ctx);
                }
            }
            StackTag::Mmwave => {
                let (mut ctx, _, mmw) = self.split();
                if let Some(m) = mmw {
                    m.send_warning(leader, bytes, &mut ctx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::DelayBreakdown;
    use crate::dsrc::{DsrcParams, Frame, FrameKind};
    use crate::flowmon::FlowClass;

    fn sim_with_dsrc(horizon_us: u64, params: DsrcParams) -> Sim {
        let mut sim = Sim::new(SimTime::from_micros(horizon_us), 7);
        sim.dsrc = Some(DsrcStack::new(params));
        sim
    }

    #[test]
    fn beacon_count_tracks_active_span() {
        // Vehicle 1 is present the whole run; vehicle 2 enters at 2 s and
        // leaves at 7 s. At 10 Hz that is 100 and 50 beacons. The horizon sits
        // between beacon windows so jitter cannot move a beacon across it.
        let mut sim = sim_with_dsrc(9_950_000, DsrcParams::default());
        let (v1, v2, rsu) = (NodeId(1), NodeId(2), NodeId(100));
        sim.world.add(v1, NodeKind::Vehicle, "v1");
        sim.world.add(v2, NodeKind::Vehicle, "v2");
        sim.world.add(rsu, NodeKind::Rsu, "rsu");
        sim.mob.insert_static(v1, 0.0, 0.0);
        sim.mob.insert_static(rsu, 30.0, 6.0);
        let samples = [
            crate::mobility::TraceSample {
                t: SimTime::from_micros(2_000_000),
                vehicle: 2,
                x_m: 10.0,
                y_m: 0.0,
                speed_mps: 0.0,
            },
            crate::mobility::TraceSample {
                t: SimTime::from_micros(7_000_000),
                vehicle: 2,
                x_m: 10.0,
                y_m: 0.0,
                speed_mps: 0.0,
            },
        ];
        sim.mob.insert_moving(v2, &samples);
        sim.dsrc.as_mut().unwrap().attach(rsu);
        sim.enter = EnterActions { dsrc_attach: true, dsrc_beacon: true, ..Default::default() };
        sim.q.schedule(SimTime::from_micros(0), Ev::NodeEnter(v1)).unwrap();
        sim.q.schedule(SimTime::from_micros(2_000_000), Ev::NodeEnter(v2)).unwrap();
        sim.q.schedule(SimTime::from_micros(7_000_000), Ev::NodeExit(v2)).unwrap();
        sim.run();

        let f1 = sim
            .fm
            .flows()
            .iter()
            .find(|f| f.key.src == v1 && f.class == FlowClass::Beacon)
            .unwrap();
        let f2 = sim
            .fm
            .flows()
            .iter()
            .find(|f| f.key.src == v2 && f.class == FlowClass::Beacon)
            .unwrap();
        assert_eq!(f1.tx_packets, 100);
        assert_eq!(f2.tx_packets, 50);
        // Conservation: every beacon was either received or declared lost.
        assert_eq!(f1.rx_packets + f1.lost_packets, f1.tx_packets);
        assert_eq!(f2.rx_packets + f2.lost_packets, f2.tx_packets);
    }

    #[test]
    fn warning_on_idle_channel_takes_arbitration_plus_airtime() {
        // On an otherwise idle channel the warning waits exactly one
        // arbitration gap and then its own airtime: 58 + 307 us for a 200-byte
        // frame at 6 Mbit/s.
        let params = DsrcParams::default();
        let mut sim = sim_with_dsrc(2_000_000, params);
        let (leader, follower) = (NodeId(1), NodeId(2));
        sim.world.add(leader, NodeKind::Vehicle, "leader");
        sim.world.add(follower, NodeKind::Vehicle, "follower");
        sim.mob.insert_static(leader, 0.0, 0.0);
        sim.mob.insert_static(follower, 10.0, 0.0);
        sim.dsrc.as_mut().unwrap().attach(leader);
        sim.dsrc.as_mut().unwrap().attach(follower);
        sim.fcw = Some(FcwState::new(
            leader,
            vec![follower],
            StackTag::Dsrc,
            200,
            SimTime::from_micros(1_000_000),
        ));
        sim.q.schedule(SimTime::from_micros(1_000_000), Ev::FcwTrigger).unwrap();
        sim.run();

        let fcw = sim.fcw.as_ref().unwrap();
        assert!(fcw.all_delivered());
        let d = fcw.deliveries.get(&follower).unwrap();
        assert_eq!(d.delay_us, 365);
        match d.breakdown {
            DelayBreakdown::Dsrc { contention_us, airtime_us } => {
                assert_eq!(contention_us, 58);
                assert_eq!(airtime_us, 307);
            }
            _ => panic!("warning carried by the wrong stack"),
        }
    }

    #[test]
    fn route_discovery_finds_two_hop_path() {
        // A -- relay -- B with a radio range that covers 35 m but not 70 m:
        // the only viable route is through the relay, and the data frame must
        // arrive without any routing loop.
        let mut params = DsrcParams::default();
        params.budget.tx_power_dbm = -10.0;
        params.cs_threshold_dbm = -95.0;
        params.fading = None;
        let mut sim = sim_with_dsrc(3_000_000, params);
        let (a, relay, b) = (NodeId(1), NodeId(2), NodeId(3));
        sim.world.add(a, NodeKind::Vehicle, "a");
        sim.world.add(relay, NodeKind::Vehicle, "relay");
        sim.world.add(b, NodeKind::Vehicle, "b");
        sim.mob.insert_static(a, 0.0, 0.0);
        sim.mob.insert_static(relay, 35.0, 0.0);
        sim.mob.insert_static(b, 70.0, 0.0);
        for n in [a, relay, b] {
            sim.dsrc.as_mut().unwrap().attach(n);
        }

        let flow = sim.fm.register(
            FlowKey { src: a, dst: Dest::Node(b), flow_id: 0 },
            FlowClass::Data,
            StackTag::Dsrc,
        );
        sim.fm.on_tx(flow, 0, 512, SimTime::from_micros(0));
        let frame = Frame {
            kind: FrameKind::Data,
            origin: a,
            dst: Dest::Node(b),
            bytes: 512,
            seq: 0,
            created_at: SimTime::from_micros(0),
            flow: Some(flow),
            capture_rsu: None,
            aodv: None,
        };
        {
            let (mut ctx, dsrc, _) = sim.split();
            dsrc.unwrap().send_unicast(a, frame, &mut ctx);
        }
        sim.run();

        let stats = sim.fm.flow(flow);
        assert_eq!(stats.rx_packets, 1, "data frame should arrive via the relay");
        let d = sim.dsrc.as_ref().unwrap();
        assert_eq!(d.loop_violations, 0);
        let route = d.nodes.get(&a).unwrap().aodv.routes.get(&b).unwrap();
        assert_eq!(route.next_hop, relay);
        assert_eq!(route.hop_count, 2);
    }

    #[test]
    fn cellular_warning_rides_two_slots_and_processing() {
        // Trigger lands on a slot boundary, so the warning takes exactly one
        // uplink slot, the processing turnaround (eight slots, still
        // boundary-aligned), and one downlink slot: 125 + 1000 + 125 us.
        let mut sim = Sim::new(SimTime::from_micros(2_000_000), 11);
        sim.mmw = Some(MmwaveStack::new(crate::mmwave::MmwaveParams::default()));
        let (leader, follower, bs) = (NodeId(1), NodeId(2), NodeId(50));
        sim.world.add(leader, NodeKind::Vehicle, "leader");
        sim.world.add(follower, NodeKind::Vehicle, "follower");
        sim.world.add(bs, NodeKind::BaseStation, "bs");
        sim.mob.insert_static(leader, 0.0, 0.0);
        sim.mob.insert_static(follower, 20.0, 0.0);
        sim.mob.insert_static(bs, 10.0, 20.0);
        sim.mmw.as_mut().unwrap().add_bs(bs, (10.0, 20.0));
        sim.enter = EnterActions { mmw_attach: true, ..Default::default() };
        sim.q.schedule(SimTime::from_micros(0), Ev::NodeEnter(leader)).unwrap();
        sim.q.schedule(SimTime::from_micros(0), Ev::NodeEnter(follower)).unwrap();
        sim.q.schedule(SimTime::from_micros(100_000), Ev::AssocTick).unwrap();
        sim.fcw = Some(FcwState::new(
            leader,
            vec![follower],
            StackTag::Mmwave,
            200,
            SimTime::from_micros(1_000_000),
        ));
        sim.q.schedule(SimTime::from_micros(1_000_000), Ev::FcwTrigger).unwrap();
        sim.run();

        let fcw = sim.fcw.as_ref().unwrap();
        assert!(fcw.all_delivered());
        let d = fcw.deliveries.get(&follower).unwrap();
        assert_eq!(d.delay_us, 1250);
        match d.breakdown {
            DelayBreakdown::Mmwave {
                uplink_wait_us,
                uplink_air_us,
                processing_us,
                downlink_wait_us,
                downlink_air_us,
            } => {
                assert_eq!(uplink_wait_us, 0);
                assert_eq!(uplink_air_us, 125);
                assert_eq!(processing_us, 1000);
                assert_eq!(downlink_wait_us, 0);
                assert_eq!(downlink_air_us, 125);
            }
            _ => panic!("warning carried by the wrong stack"),
        }
    }

    #[test]
    fn cellular_collection_stream_is_conserved() {
        // One vehicle streaming 1200-byte payloads at 960 kbit/s emits every
        // 10 ms; each payload rides one slot plus processing, so every delay
        // is exactly 1125 us and nothing is lost.
        let mut sim = Sim::new(SimTime::from_micros(995_000), 13);
        sim.mmw = Some(MmwaveStack::new(crate::mmwave::MmwaveParams::default()));
        let (ue, bs) = (NodeId(1), NodeId(50));
        sim.world.add(ue, NodeKind::Vehicle, "ue");
        sim.world.add(bs, NodeKind::BaseStation, "bs");
        sim.mob.insert_static(ue, 5.0, 0.0);
        sim.mob.insert_static(bs, 0.0, 10.0);
        sim.mmw.as_mut().unwrap().add_bs(bs, (0.0, 10.0));
        sim.enter =
            EnterActions { mmw_attach: true, mmw_cbr: Some((1200, 960.0)), ..Default::default() };
        sim.q.schedule(SimTime::from_micros(0), Ev::NodeEnter(ue)).unwrap();
        sim.q.schedule(SimTime::from_micros(100_000), Ev::AssocTick).unwrap();
        sim.run();

        let stats = sim
            .fm
            .flows()
            .iter()
            .find(|f| f.class == FlowClass::CbrUplink)
            .expect("stream registered");
        assert_eq!(stats.tx_packets, 100);
        assert_eq!(stats.rx_packets, 100);
        assert_eq!(stats.lost_packets, 0);
        assert_eq!(stats.delay_sum_us, 100 * 1125);
        assert_eq!(stats.sinr_samples.len(), 100);
    }

    #[test]
    fn nearest_lookup_breaks_ties_toward_lower_id() {
        let mut world = World::new();
        let mut mob = MobilityModel::new();
        for (id, x) in [(NodeId(5), 10.0), (NodeId(3), -10.0)] {
            world.add(id, NodeKind::Rsu, format!("rsu{}", id.0));
            mob.insert_static(id, x, 0.0);
        }
        let t = SimTime::from_micros(0);
        assert_eq!(world.nearest_rsu(&mob, (0.0, 0.0), t), Some(NodeId(3)));
        assert_eq!(world.nearest_rsu(&mob, (9.0, 0.0), t), Some(NodeId(5)));
        assert_eq!(world.nearest_of(NodeKind::BaseStation, &mob, (0.0, 0.0), t), None);
    }
}
