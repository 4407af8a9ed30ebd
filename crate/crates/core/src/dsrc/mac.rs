//! CSMA/CA medium access: AIFS sensing, slotted random backoff with
//! freeze/resume, and retransmission bookkeeping for unicast frames.
//!
//! The state machine never cancels scheduled wake events. Each node carries a
//! wake generation counter; every state transition that arms a new wake bumps
//! it, and wakes whose generation no longer matches are ignored on arrival.

use std::collections::VecDeque;

use rand::Rng;

use crate::engine::SimTime;
use crate::mobility::NodeId;
use crate::sim::{Ctx, Ev};

use super::{DsrcParams, QueuedFrame};

#[derive(Debug, Clone, PartialEq)]
pub enum MacPhase {
    /// Nothing to do (or waiting for a queue push to re-enter contention).
    Idle,
    /// Channel was idle on access; waiting out the arbitration gap.
    WaitAifs { until: SimTime },
    /// Counting down backoff slots. `countdown_start` is the time the
    /// current count began (after AIFS) while the channel is idle, and None
    /// while the count is frozen by a busy channel.
    Backoff {
        remaining: u32,
        countdown_start: Option<SimTime>,
    },
    /// On the air until `end`.
    Tx { end: SimTime, tx_id: u64 },
}

#[derive(Debug)]
pub struct MacState {
    pub queue: VecDeque<QueuedFrame>,
    pub phase: MacPhase,
    /// Current contention window; doubles (2·cw+1) per failed unicast attempt.
    pub cw: u32,
    /// Transmission attempts already made for the head-of-line frame.
    pub attempts: u32,
    /// Generation counter matching the most recently armed wake event.
    pub wake_gen: u64,
    /// Forces a fresh backoff draw before the next transmission (set after a
    /// failed unicast attempt so retries always re-contend, and after every
    /// completed transmission so back-to-back frames do too).
    pub force_backoff: bool,
}

impl MacState {
    pub fn new(params: &DsrcParams) -> Self {
        Self {
            queue: VecDeque::new(),
            phase: MacPhase::Idle,
            cw: params.cw_min,
            attempts: 0,
            wake_gen: 0,
            force_backoff: false,
        }
    }

    fn arm_wake(&mut self) -> u64 {
        self.wake_gen += 1;
        self.wake_gen
    }
}

/// Re-evaluate one node's MAC after any stimulus: a new frame, a wake event,
/// or a channel busy/idle transition. Safe to call redundantly; transitions
/// are driven purely by current state and channel occupancy.
///
/// `busy_until` is the channel view at this node right now (None = idle).
/// Returns true when the node should begin transmitting the head-of-line
/// frame immediately; the caller performs the actual transition so the
/// medium record exists before anyone else is notified.
pub fn update(
    mac: &mut MacState,
    node: NodeId,
    params: &DsrcParams,
    busy_until: Option<SimTime>,
    ctx: &mut Ctx<'_>,
) -> bool {
    let now = ctx.q.now();
    loop {
        match mac.phase.clone() {
            MacPhase::Tx { .. } => return false, // completion handles next step
            MacPhase::Idle => {
                if mac.queue.is_empty() {
                    return false;
                }
                if mac.force_backoff {
                    mac.force_backoff = false;
                    let draw = ctx.rng.stream("dsrc.backoff").gen_range(0..=mac.cw);
                    mac.phase = MacPhase::Backoff {
                        remaining: draw,
                        countdown_start: None,
                    };
                    continue;
                }
                match busy_until {
                    None => {
                        // Idle channel: arbitration wait, then transmit.
                        let until = now.add_micros(params.aifs_us);
                        mac.phase = MacPhase::WaitAifs { until };
                        let gen = mac.arm_wake();
                        ctx.q
                            .schedule(until, Ev::MacWake { node, gen })
                            .expect("wake in future");
                        return false;
                    }
                    Some(_) => {
                        // Busy on arrival: draw backoff now, count later.
                        let draw = ctx.rng.stream("dsrc.backoff").gen_range(0..=mac.cw);
                        mac.phase = MacPhase::Backoff {
                            remaining: draw,
                            countdown_start: None,
                        };
                        continue;
                    }
                }
            }
            MacPhase::WaitAifs { until } => {
                if busy_until.is_some() {
                    // Interrupted: convert to a backoff that resumes later.
                    let draw = ctx.rng.stream("dsrc.backoff").gen_range(0..=mac.cw);
                    mac.phase = MacPhase::Backoff {
                        remaining: draw,
                        countdown_start: None,
                    };
                    continue;
                }
                if now >= until {
                    return true;
                }
                // Mid-wait re-check (e.g. a neighbour's frame ended); the
                // armed wake at `until` still stands.
                return false;
            }
            MacPhase::Backoff {
                remaining,
                countdown_start,
            } => {
                match (busy_until, countdown_start) {
                    (Some(busy_end), Some(started)) => {
                        // Freeze: bank the whole slots consumed while counting.
                        let counted = if now > started {
                            (now.saturating_sub(started) / params.slot_us) as u32
                        } else {
                            0
                        };
                        mac.phase = MacPhase::Backoff {
                            remaining: remaining.saturating_sub(counted),
                            countdown_start: None,
                        };
                        let gen = mac.arm_wake();
                        ctx.q
                            .schedule(busy_end, Ev::MacWake { node, gen })
                            .expect("busy end in future");
                        return false;
                    }
                    (Some(busy_end), None) => {
                        // Still frozen; re-arm for the (possibly extended)
                        // busy period.
                        let gen = mac.arm_wake();
                        ctx.q
                            .schedule(busy_end, Ev::MacWake { node, gen })
                            .expect("busy end in future");
                        return false;
                    }
                    (None, None) => {
                        // Channel just went idle: resume counting after AIFS.
                        let start = now.add_micros(params.aifs_us);
                        let done = start.add_micros(remaining as u64 * params.slot_us);
                        mac.phase = MacPhase::Backoff {
                            remaining,
                            countdown_start: Some(start),
                        };
                        let gen = mac.arm_wake();
                        ctx.q
                            .schedule(done, Ev::MacWake { node, gen })
                            .expect("backoff end in future");
                        return false;
                    }
                    (None, Some(started)) => {
                        if started <= now {
                            let done = started.add_micros(remaining as u64 * params.slot_us);
                            if now >= done {
                                return true;
                            }
                        }
                        // Countdown (or its leading AIFS) still running; the
                        // armed wake covers completion.
                        return false;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contention_window_doubles_and_caps() {
        let params = DsrcParams::default();
        let mut cw = params.cw_min;
        let expected = [31, 63, 127, 255, 511, 1023, 1023];
        for want in expected {
            cw = (2 * cw + 1).min(params.cw_max);
            assert_eq!(cw, want);
        }
    }

    #[test]
    fn new_state_is_idle_with_minimum_window() {
        let params = DsrcParams::default();
        let mac = MacState::new(&params);
        assert_eq!(mac.phase, MacPhase::Idle);
        assert!(mac.queue.is_empty());
        assert_eq!(mac.cw, params.cw_min);
        assert_eq!(mac.attempts, 0);
    }
}
