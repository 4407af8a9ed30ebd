//! Minimal on-demand distance-vector routing for the unicast data path:
//! route-request flooding with duplicate suppression, route replies along
//! reverse paths, expiry-based freshness, and route-error notification when
//! a link break is detected by the MAC retry limit.
//!
//! Duplicate RREQs are re-forwarded when they arrive with a strictly smaller
//! hop count, and the destination re-replies on such improvements, so settled
//! routes are minimum-hop on a static topology.

use std::collections::{BTreeMap, VecDeque};

use crate::engine::SimTime;
use crate::flowmon::Dest;
use crate::mobility::NodeId;
use crate::sim::{Ctx, Ev};

use super::{DsrcStack, Frame, FrameKind, QueuedFrame};

#[derive(Debug, Clone)]
pub struct AodvParams {
    /// Initial time-to-live on route-request floods.
    pub rreq_ttl: u8,
    /// How long the originator waits for a reply before re-flooding.
    pub discovery_timeout_us: u64,
    /// Re-flood attempts after the first before giving up.
    pub max_discovery_retries: u32,
    /// Installed routes expire this long after their last use.
    pub route_lifetime_us: u64,
    pub rreq_bytes: u64,
    pub rrep_bytes: u64,
    pub rerr_bytes: u64,
}

impl Default for AodvParams {
    fn default() -> Self {
        Self {
            rreq_ttl: 8,
            discovery_timeout_us: 1_000_000,
            max_discovery_retries: 2,
            route_lifetime_us: 5_000_000,
            rreq_bytes: 32,
            rrep_bytes: 28,
            rerr_bytes: 20,
        }
    }
}

/// Routing control message carried inside a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AodvMsg {
    Rreq {
        origin: NodeId,
        origin_seq: u32,
        rreq_id: u32,
        dest: NodeId,
        hop_count: u32,
        ttl: u8,
    },
    Rrep {
        origin: NodeId,
        dest: NodeId,
        dest_seq: u32,
        hop_count: u32,
    },
    Rerr {
        unreachable: NodeId,
    },
}

#[derive(Debug, Clone)]
pub struct RouteEntry {
    pub next_hop: NodeId,
    pub hop_count: u32,
    pub dest_seq: u32,
    pub expires_at: SimTime,
}

#[derive(Debug)]
pub struct PendingDiscovery {
    pub frames: VecDeque<Frame>,
    pub attempt: u32,
}

/// Per-node routing state.
#[derive(Debug, Default)]
pub struct AodvState {
    pub routes: BTreeMap<NodeId, RouteEntry>,
    /// Own destination sequence number; bumped per discovery and per reply.
    pub seq: u32,
    pub next_rreq_id: u32,
    /// Best (lowest) hop count seen per flood, keyed by (origin, rreq_id).
    /// Re-processing happens only on a strict improvement.
    pub seen: BTreeMap<(NodeId, u32), u32>,
    /// At a destination: best hop count already replied to, per flood.
    pub replied: BTreeMap<(NodeId, u32), u32>,
    /// Frames buffered while discovery for their destination runs.
    pub pending: BTreeMap<NodeId, PendingDiscovery>,
}

/// A fresh (unexpired) route at `node` for `dest`, if any.
pub fn fresh_route(stack: &DsrcStack, node: NodeId, dest: NodeId, now: SimTime) -> Option<RouteEntry> {
    let entry = stack.nodes.get(&node)?.aodv.routes.get(&dest)?;
    (entry.expires_at > now).then(|| entry.clone())
}

/// Extend a route's lifetime because a data frame just used it.
pub fn touch_route(stack: &mut DsrcStack, node: NodeId, dest: NodeId, now: SimTime) {
    let lifetime = stack.params.aodv.route_lifetime_us;
    if let Some(ns) = stack.nodes.get_mut(&node) {
        if let Some(entry) = ns.aodv.routes.get_mut(&dest) {
            entry.expires_at = now.add_micros(lifetime);
        }
    }
}

/// Install or refresh a route, following the freshness rule: higher sequence
/// number wins; equal sequence keeps the fewer-hop path; expired entries are
/// always replaced. Afterwards the next-hop chain is walked to detect loops.
fn install_route(stack: &mut DsrcStack, at: NodeId, dest: NodeId, candidate: RouteEntry, now: SimTime) {
    let Some(ns) = stack.nodes.get_mut(&at) else {
        return;
    };
    let replace = match ns.aodv.routes.get(&dest) {
        None => true,
        Some(old) if old.expires_at <= now => true,
        Some(old) => {
            candidate.dest_seq > old.dest_seq
                || (candidate.dest_seq == old.dest_seq && candidate.hop_count < old.hop_count)
        }
    };
    if replace {
        ns.aodv.routes.insert(dest, candidate);
        check_for_loop(stack, at, dest, now);
    }
}

/// Walk the next-hop chain from `start` toward `dest`; a revisited node means
/// a routing loop, which is counted for later inspection. Walk length is
/// bounded so a pathological table cannot wedge the run.
fn check_for_loop(stack: &mut DsrcStack, start: NodeId, dest: NodeId, now: SimTime) {
    let mut visited = vec![start];
    let mut cur = start;
    for _ in 0..64 {
        if cur == dest {
            return;
        }
        let Some(ns) = stack.nodes.get(&cur) else {
            return;
        };
        let Some(entry) = ns.aodv.routes.get(&dest) else {
            return;
        };
        if entry.expires_at <= now {
            return;
        }
        cur = entry.next_hop;
        if visited.contains(&cur) {
            stack.loop_violations += 1;
            return;
        }
        visited.push(cur);
    }
    stack.loop_violations += 1; // chain longer than any sane diameter
}

/// Buffer a data frame and start (or join) route discovery for its
/// destination.
pub fn buffer_and_discover(stack: &mut DsrcStack, origin: NodeId, dest: NodeId, frame: Frame, ctx: &mut Ctx<'_>) {
    let already_running = {
        let Some(ns) = stack.nodes.get_mut(&origin) else {
            return;
        };
        match ns.aodv.pending.get_mut(&dest) {
            Some(pending) => {
                pending.frames.push_back(frame);
                true
            }
            None => {
                let mut frames = VecDeque::new();
                frames.push_back(frame);
                ns.aodv.pending.insert(dest, PendingDiscovery { frames, attempt: 0 });
                false
            }
        }
    };
    if !already_running {
        flood_rreq(stack, origin, dest, 0, ctx);
    }
}

/// Broadcast a fresh route request and arm the discovery timeout.
fn flood_rreq(stack: &mut DsrcStack, origin: NodeId, dest: NodeId, attempt: u32, ctx: &mut Ctx<'_>) {
    let now = ctx.q.now();
    let (msg, bytes) = {
        let ttl = stack.params.aodv.rreq_ttl;
        let bytes = stack.params.aodv.rreq_bytes;
        let Some(ns) = stack.nodes.get_mut(&origin) else {
            return;
        };
        ns.aodv.seq += 1;
        let rreq_id = ns.aodv.next_rreq_id;
        ns.aodv.next_rreq_id += 1;
        // Never reprocess echoes of our own flood.
        ns.aodv.seen.insert((origin, rreq_id), 0);
        (
            AodvMsg::Rreq {
                origin,
                origin_seq: ns.aodv.seq,
                rreq_id,
                dest,
                hop_count: 0,
                ttl,
            },
            bytes,
        )
    };
    let frame = Frame {
        kind: FrameKind::Rreq,
        origin,
        dst: Dest::Broadcast,
        bytes,
        seq: 0,
        created_at: now,
        flow: None,
        capture_rsu: None,
        aodv: Some(msg),
    };
    stack.enqueue(origin, QueuedFrame { frame, next_hop: Dest::Broadcast }, ctx);
    let timeout = stack.params.aodv.discovery_timeout_us;
    ctx.q.schedule_in(timeout, Ev::AodvTimeout { node: origin, dest, attempt });
}

/// Discovery timer fired: either the route arrived (drained on reply, so the
/// pending entry is gone), or we re-flood, or we give up and drop the
/// buffered frames as losses.
pub fn on_timeout(stack: &mut DsrcStack, origin: NodeId, dest: NodeId, attempt: u32, ctx: &mut Ctx<'_>) {
    let retries = stack.params.aodv.max_discovery_retries;
    let give_up = {
        let Some(ns) = stack.nodes.get_mut(&origin) else {
            return;
        };
        match ns.aodv.pending.get(&dest) {
            // Stale timer from an earlier attempt.
            Some(pending) if pending.attempt != attempt => return,
            Some(_) => attempt >= retries,
            None => return, // discovery already completed
        }
    };
    if give_up {
        let dropped = {
            let ns = stack.nodes.get_mut(&origin).expect("checked above");
            ns.aodv.pending.remove(&dest).expect("checked above")
        };
        for frame in dropped.frames {
            if let Some(flow) = frame.flow {
                ctx.fm.on_lost(flow, frame.seq);
            }
        }
    } else {
        {
            let ns = stack.nodes.get_mut(&origin).expect("checked above");
            ns.aodv.pending.get_mut(&dest).expect("checked above").attempt = attempt + 1;
        }
        flood_rreq(stack, origin, dest, attempt + 1, ctx);
    }
}

/// A route request decoded at `at`, last transmitted by `from`.
pub fn on_rreq(stack: &mut DsrcStack, at: NodeId, from: NodeId, msg: &AodvMsg, ctx: &mut Ctx<'_>) {
    let AodvMsg::Rreq { origin, origin_seq, rreq_id, dest, hop_count, ttl } = *msg else {
        return;
    };
    if at == origin {
        return; // echo of our own flood
    }
    let now = ctx.q.now();
    let lifetime = stack.params.aodv.route_lifetime_us;
    // Learn the reverse path toward the originator.
    install_route(
        stack,
        at,
        origin,
        RouteEntry {
            next_hop: from,
            hop_count: hop_count + 1,
            dest_seq: origin_seq,
            expires_at: now.add_micros(lifetime),
        },
        now,
    );
    {
        let Some(ns) = stack.nodes.get_mut(&at) else {
            return;
        };
        // Suppress duplicates unless this copy took a strictly shorter path.
        match ns.aodv.seen.get(&(origin, rreq_id)) {
            Some(&best) if best <= hop_count => return,
            _ => {
                ns.aodv.seen.insert((origin, rreq_id), hop_count);
            }
        }
    }
    if at == dest {
        // Reply once per flood, and again only for strictly better paths.
        let reply = {
            let ns = stack.nodes.get_mut(&at).expect("present above");
            match ns.aodv.replied.get(&(origin, rreq_id)) {
                Some(&best) if best <= hop_count => None,
                _ => {
                    ns.aodv.replied.insert((origin, rreq_id), hop_count);
                    ns.aodv.seq += 1;
                    Some(ns.aodv.seq)
                }
            }
        };
        if let Some(dest_seq) = reply {
            send_rrep(stack, at, origin, dest_seq, ctx);
        }
    } else if ttl > 1 {
        let bytes = stack.params.aodv.rreq_bytes;
        let frame = Frame {
            kind: FrameKind::Rreq,
            origin: at,
            dst: Dest::Broadcast,
            bytes,
            seq: 0,
            created_at: now,
            flow: None,
            capture_rsu: None,
            aodv: Some(AodvMsg::Rreq {
                origin,
                origin_seq,
                rreq_id,
                dest,
                hop_count: hop_count + 1,
                ttl: ttl - 1,
            }),
        };
        stack.enqueue(at, QueuedFrame { frame, next_hop: Dest::Broadcast }, ctx);
    }
}

/// Unicast a route reply from the destination back along the reverse path.
fn send_rrep(stack: &mut DsrcStack, dest: NodeId, origin: NodeId, dest_seq: u32, ctx: &mut Ctx<'_>) {
    let now = ctx.q.now();
    let Some(route) = fresh_route(stack, dest, origin, now) else {
        return; // reverse path already gone
    };
    let bytes = stack.params.aodv.rrep_bytes;
    let frame = Frame {
        kind: FrameKind::Rrep,
        origin: dest,
        dst: Dest::Node(origin),
        bytes,
        seq: 0,
        created_at: now,
        flow: None,
        capture_rsu: None,
        aodv: Some(AodvMsg::Rrep { origin, dest, dest_seq, hop_count: 0 }),
    };
    stack.enqueue(dest, QueuedFrame { frame, next_hop: Dest::Node(route.next_hop) }, ctx);
}

/// A route reply decoded at `at` (as its per-hop receiver), transmitted by
/// `from`. Installs the forward route; at the originator the buffered frames
/// drain, otherwise the reply is forwarded along the reverse path.
pub fn on_rrep(stack: &mut DsrcStack, at: NodeId, from: NodeId, msg: &AodvMsg, ctx: &mut Ctx<'_>) {
    let AodvMsg::Rrep { origin, dest, dest_seq, hop_count } = *msg else {
        return;
    };
    let now = ctx.q.now();
    let lifetime = stack.params.aodv.route_lifetime_us;
    install_route(
        stack,
        at,
        dest,
        RouteEntry {
            next_hop: from,
            hop_count: hop_count + 1,
            dest_seq,
            expires_at: now.add_micros(lifetime),
        },
        now,
    );
    if at == origin {
        // Discovery complete: release anything waiting on this route.
        let drained = {
            let Some(ns) = stack.nodes.get_mut(&at) else {
                return;
            };
            ns.aodv.pending.remove(&dest)
        };
        if let Some(pending) = drained {
            for frame in pending.frames {
                stack.send_unicast(at, frame, ctx);
            }
        }
    } else {
        // Relay toward the originator along the reverse path.
        let Some(reverse) = fresh_route(stack, at, origin, now) else {
            return;
        };
        let bytes = stack.params.aodv.rrep_bytes;
        let frame = Frame {
            kind: FrameKind::Rrep,
            origin: at,
            dst: Dest::Node(origin),
            bytes,
            seq: 0,
            created_at: now,
            flow: None,
            capture_rsu: None,
            aodv: Some(AodvMsg::Rrep { origin, dest, dest_seq, hop_count: hop_count + 1 }),
        };
        stack.enqueue(at, QueuedFrame { frame, next_hop: Dest::Node(reverse.next_hop) }, ctx);
    }
}

/// MAC gave up on `next_hop` while carrying a frame for `dest`: invalidate
/// everything routed through that neighbour and warn the vicinity.
pub fn handle_link_break(stack: &mut DsrcStack, at: NodeId, next_hop: NodeId, dest: NodeId, ctx: &mut Ctx<'_>) {
    let now = ctx.q.now();
    if let Some(ns) = stack.nodes.get_mut(&at) {
        ns.aodv
            .routes
            .retain(|_, entry| entry.next_hop != next_hop || entry.expires_at <= now);
    }
    broadcast_rerr(stack, at, dest, ctx);
}

/// A relay holds a frame it has no fresh route for: report and let the
/// originator rediscover on its next send.
pub fn handle_no_route(stack: &mut DsrcStack, at: NodeId, dest: NodeId, ctx: &mut Ctx<'_>) {
    broadcast_rerr(stack, at, dest, ctx);
}

fn broadcast_rerr(stack: &mut DsrcStack, at: NodeId, unreachable: NodeId, ctx: &mut Ctx<'_>) {
    let now = ctx.q.now();
    let bytes = stack.params.aodv.rerr_bytes;
    let frame = Frame {
        kind: FrameKind::Rerr,
        origin: at,
        dst: Dest::Broadcast,
        bytes,
        seq: 0,
        created_at: now,
        flow: None,
        capture_rsu: None,
        aodv: Some(AodvMsg::Rerr { unreachable }),
    };
    stack.enqueue(at, QueuedFrame { frame, next_hop: Dest::Broadcast }, ctx);
}

/// A route error decoded at `at`, sent by `from`: drop any route to the
/// unreachable destination that goes through the sender.
pub fn on_rerr(stack: &mut DsrcStack, at: NodeId, from: NodeId, msg: &AodvMsg, _ctx: &mut Ctx<'_>) {
    let AodvMsg::Rerr { unreachable } = *msg else {
        return;
    };
    if let Some(ns) = stack.nodes.get_mut(&at) {
        if let Some(entry) = ns.aodv.routes.get(&unreachable) {
            if entry.next_hop == from {
                ns.aodv.routes.remove(&unreachable);
            }
        }
    }
}
