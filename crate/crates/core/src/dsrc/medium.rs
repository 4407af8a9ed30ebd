//! The single shared broadcast channel: who is on the air, carrier-sense
//! queries against it, and the interference a frame saw while in flight.

use crate::channel::{dbm_to_mw, friis_path_loss, LinkBudget};
use crate::engine::SimTime;
use crate::mobility::{distance, NodeId};

use super::QueuedFrame;

/// One transmission on the channel. Records linger briefly after their end
/// time so later-ending overlapping frames can still count them as
/// interference.
#[derive(Debug, Clone)]
pub struct TxRecord {
    pub id: u64,
    pub tx_node: NodeId,
    pub start: SimTime,
    pub end: SimTime,
    /// Transmitter position at transmission start.
    pub pos: (f64, f64),
    pub queued: QueuedFrame,
}

/// Shared-channel state. All DSRC nodes transmit into one medium; receptions
/// are evaluated when a frame's airtime completes.
#[derive(Debug, Default)]
pub struct Medium {
    records: Vec<TxRecord>,
    next_id: u64,
}

/// How long a finished record stays around for interference accounting; must
/// exceed the longest airtime ever scheduled.
const RETENTION_US: u64 = 20_000;

impl Medium {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_tx(
        &mut self,
        tx_node: NodeId,
        pos: (f64, f64),
        start: SimTime,
        airtime_us: u64,
        queued: QueuedFrame,
    ) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.records.push(TxRecord {
            id,
            tx_node,
            start,
            end: start.add_micros(airtime_us),
            pos,
            queued,
        });
        id
    }

    pub fn record(&self, id: u64) -> Option<&TxRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Drop records too old to overlap anything still in flight.
    pub fn prune(&mut self, now: SimTime) {
        self.records.retain(|r| r.end.add_micros(RETENTION_US) > now);
    }

    /// Latest end time among transmissions currently audible at `pos` above
    /// the carrier-sense threshold, or None when the channel is idle.
    /// Carrier sense uses the mean channel (no fading draw) so that busy
    /// detection is stable within one transmission.
    pub fn busy_until(
        &self,
        pos: (f64, f64),
        exclude: NodeId,
        now: SimTime,
        budget: &LinkBudget,
        cs_threshold_dbm: f64,
    ) -> Option<SimTime> {
        let mut latest: Option<SimTime> = None;
        for r in &self.records {
            if r.end <= now || r.tx_node == exclude {
                continue;
            }
            let d = distance(r.pos, pos);
            let pl = friis_path_loss(d.max(0.1), budget.frequency_hz)
                .expect("distance clamped positive");
            if budget.received_dbm(pl, 1.0) >= cs_threshold_dbm {
                latest = Some(latest.map_or(r.end, |l: SimTime| l.max(r.end)));
            }
        }
        latest
    }

    /// Sum of interference power (mW) at `rx_pos` from every transmission
    /// overlapping `[start, end)` other than `subject_id`. The per-interferer
    /// fade is drawn by the caller via `fade`.
    pub fn interference_mw(
        &self,
        subject_id: u64,
        start: SimTime,
        end: SimTime,
        rx_pos: (f64, f64),
        rx_node: NodeId,
        budget: &LinkBudget,
        mut fade: impl FnMut(f64) -> f64,
    ) -> f64 {
        let mut sum = 0.0;
        for r in &self.records {
            if r.id == subject_id || r.tx_node == rx_node {
                continue;
            }
            if r.start >= end || r.end <= start {
                continue; // no temporal overlap
            }
            let d = distance(r.pos, rx_pos);
            let pl = friis_path_loss(d.max(0.1), budget.frequency_hz)
                .expect("distance clamped positive");
            sum += dbm_to_mw(budget.received_dbm(pl, fade(d)));
        }
        sum
    }

    /// Is `node` on the air at `t`? (Half-duplex receivers cannot decode.)
    pub fn is_transmitting(&self, node: NodeId, t: SimTime) -> bool {
        self.records.iter().any(|r| r.tx_node == node && r.start <= t && r.end > t)
    }

    /// Did `node` spend any of `[start, end)` transmitting? Half-duplex
    /// receivers miss frames that overlap their own airtime.
    pub fn transmitted_during(&self, node: NodeId, start: SimTime, end: SimTime) -> bool {
        self.records
            .iter()
            .any(|r| r.tx_node == node && r.start < end && r.end > start)
    }
}
