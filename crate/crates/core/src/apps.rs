//! Application-level state shared across stacks: the forward-collision
//! warning exchange and its per-recipient delay ledger.

use std::collections::BTreeMap;

use crate::engine::SimTime;
use crate::flowmon::{FlowHandle, StackTag};
use crate::mobility::NodeId;

/// Where each microsecond of one warning delivery went. Component sums equal
/// the end-to-end delay exactly; there is no unaccounted residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayBreakdown {
    /// Direct broadcast: channel-access wait plus time on air.
    Dsrc { contention_us: u64, airtime_us: u64 },
    /// Infrastructure relay: uplink queueing, uplink transport (including
    /// any retransmission gaps), base-station turnaround, downlink queueing,
    /// downlink transport.
    Mmwave {
        uplink_wait_us: u64,
        uplink_air_us: u64,
        processing_us: u64,
        downlink_wait_us: u64,
        downlink_air_us: u64,
    },
}

impl DelayBreakdown {
    pub fn total_us(&self) -> u64 {
        match *self {
            DelayBreakdown::Dsrc { contention_us, airtime_us } => contention_us + airtime_us,
            DelayBreakdown::Mmwave {
                uplink_wait_us,
                uplink_air_us,
                processing_us,
                downlink_wait_us,
                downlink_air_us,
            } => {
                uplink_wait_us + uplink_air_us + processing_us + downlink_wait_us + downlink_air_us
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FcwDelivery {
    pub delay_us: u64,
    pub breakdown: DelayBreakdown,
}

/// One forward-collision-warning exchange: a braking leader, the vehicles
/// that must hear about it, and what actually reached them.
#[derive(Debug)]
pub struct FcwState {
    pub leader: NodeId,
    pub followers: Vec<NodeId>,
    /// Monitored warning flow per recipient.
    pub flows: BTreeMap<NodeId, FlowHandle>,
    /// Which stack carries the warning in this run.
    pub stack: StackTag,
    pub warning_bytes: u64,
    pub trigger_at: SimTime,
    pub triggered: bool,
    pub deliveries: BTreeMap<NodeId, FcwDelivery>,
}

impl FcwState {
    pub fn new(
        leader: NodeId,
        followers: Vec<NodeId>,
        stack: StackTag,
        warning_bytes: u64,
        trigger_at: SimTime,
    ) -> Self {
        Self {
            leader,
            followers,
            flows: BTreeMap::new(),
            stack,
            warning_bytes,
            trigger_at,
            triggered: false,
            deliveries: BTreeMap::new(),
        }
    }

    /// First delivery wins; the ledger must tile the delay exactly.
    pub fn record_delivery(&mut self, node: NodeId, delay_us: u64, breakdown: DelayBreakdown) {
        debug_assert_eq!(
            breakdown.total_us(),
            delay_us,
            "delay components must sum to the end-to-end delay"
        );
        self.deliveries.entry(node).or_insert(FcwDelivery { delay_us, breakdown });
    }

    pub fn all_delivered(&self) -> bool {
        self.followers.iter().all(|n| self.deliveries.contains_key(n))
    }

    /// Worst delivered delay; None when nothing arrived.
    pub fn max_delay_us(&self) -> Option<u64> {
        self.deliveries.values().map(|d| d.delay_us).max()
    }
}
