//! Per-flow measurement ledger.
//!
//! Every application packet is reported here at transmission and again at
//! reception (or explicit loss). The monitor keeps integer totals plus
//! per-second bins so all derived metrics are single divisions of exact
//! sums — which is what makes them reproducible and easy to cross-check by
//! brute-force replay:
//!
//! * loss ratio        `sum(lost) / sum(sent)`
//! * mean delay        `delay_sum / rx_packets` (reported in ms)
//! * receiver bitrate  `rx_bytes * 8 / N` (Kbps, N = configured run seconds)
//! * transmit bitrate  `tx_bytes * 8 / N` (Kbps)
//! * mean packet size  `rx_bytes / rx_packets`
//! * SINR              histogram of per-reception SINR samples
//!
//! The bitrate `N` is deliberately the configured run duration, not the
//! flow's own active span; span-normalized variants are exposed separately
//! for judging flows that exist for only part of a run.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::SimTime;
use crate::mobility::NodeId;

/// Destination of a flow: a concrete node or the broadcast address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dest {
    Node(NodeId),
    Broadcast,
}

impl std::fmt::Display for Dest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dest::Node(n) => write!(f, "{n}"),
            Dest::Broadcast => write!(f, "BROADCAST"),
        }
    }
}

/// Identity of a measured flow. `flow_id` separates multiple flows between
/// the same endpoints (e.g. re-targeted collection streams).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src: NodeId,
    pub dst: Dest,
    pub flow_id: u32,
}

/// What kind of traffic a flow carries (reporting only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowClass {
    /// Periodic broadcast safety beacons, scored at the collecting roadside unit.
    Beacon,
    /// Unicast data delivered over the routed broadcast stack.
    Data,
    /// Constant-bitrate uplink stream to a base station.
    CbrUplink,
    /// Forward-collision-warning delivery to one follower.
    Warning,
}

impl FlowClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowClass::Beacon => "BEACON",
            FlowClass::Data => "DATA",
            FlowClass::CbrUplink => "CBR_UPLINK",
            FlowClass::Warning => "WARNING",
        }
    }
}

/// Which radio stack carried the flow (reporting only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackTag {
    Dsrc,
    Mmwave,
}

impl StackTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StackTag::Dsrc => "DSRC",
            StackTag::Mmwave => "MMWAVE",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FlowMonError {
    #[error("reception at {t} precedes transmission at {sent_at}")]
    ReceiveBeforeSend { sent_at: SimTime, t: SimTime },
}

/// Activity counted in one whole simulation second.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SecondBin {
    pub sent: u64,
    pub lost: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
}

/// Totals and bins for one flow.
#[derive(Debug, Clone)]
pub struct FlowStats {
    pub key: FlowKey,
    pub class: FlowClass,
    pub stack: StackTag,
    pub tx_packets: u64,
    pub rx_packets: u64,
    pub lost_packets: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    /// Sum of application-to-application delays, integer microseconds.
    pub delay_sum_us: u64,
    pub per_second: Vec<SecondBin>,
    /// SINR (dB) of each counted reception.
    pub sinr_samples: Vec<f32>,
    pub first_tx: Option<SimTime>,
    pub last_rx: Option<SimTime>,
}

impl FlowStats {
    fn new(key: FlowKey, class: FlowClass, stack: StackTag) -> Self {
        FlowStats {
            key,
            class,
            stack,
            tx_packets: 0,
            rx_packets: 0,
            lost_packets: 0,
            tx_bytes: 0,
            rx_bytes: 0,
            delay_sum_us: 0,
            per_second: Vec::new(),
            sinr_samples: Vec::new(),
            first_tx: None,
            last_rx: None,
        }
    }

    fn bin_mut(&mut self, t: SimTime) -> &mut SecondBin {
        let idx = t.second() as usize;
        if idx >= self.per_second.len() {
            self.per_second.resize(idx + 1, SecondBin::default());
        }
        &mut self.per_second[idx]
    }

    /// `lost / sent`; undefined (None) when nothing was sent.
    pub fn loss_ratio(&self) -> Option<f64> {
        if self.tx_packets == 0 {
            None
        } else {
            Some(self.lost_packets as f64 / self.tx_packets as f64)
        }
    }

    /// Mean application-to-application delay in ms over received packets.
    pub fn mean_delay_ms(&self) -> Option<f64> {
        if self.rx_packets == 0 {
            None
        } else {
            Some(self.delay_sum_us as f64 / 1000.0 / self.rx_packets as f64)
        }
    }

    /// Received bits over the configured run duration, in Kbps.
    pub fn rx_kbps(&self, run_duration_s: f64) -> f64 {
        self.rx_bytes as f64 * 8.0 / run_duration_s / 1000.0
    }

    /// Transmitted bits over the configured run duration, in Kbps.
    pub fn tx_kbps(&self, run_duration_s: f64) -> f64 {
        self.tx_bytes as f64 * 8.0 / run_duration_s / 1000.0
    }

    /// First transmission to last reception, in seconds.
    pub fn active_span_s(&self) -> Option<f64> {
        match (self.first_tx, self.last_rx) {
            (Some(a), Some(b)) if b > a => Some(b.saturating_sub(a) as f64 / 1e6),
            _ => None,
        }
    }

    /// Received bitrate normalized to the flow's own active span; what a
    /// per-flow throughput judgment should use when flows do not span the
    /// whole run. None when the span is degenerate.
    pub fn rx_kbps_active(&self) -> Option<f64> {
        let span = self.active_span_s()?;
        Some(self.rx_bytes as f64 * 8.0 / span / 1000.0)
    }

    /// `rx_bytes / rx_packets`.
    pub fn mean_packet_size(&self) -> Option<f64> {
        if self.rx_packets == 0 {
            None
        } else {
            Some(self.rx_bytes as f64 / self.rx_packets as f64)
        }
    }
}

/// Histogram of SINR samples in fixed-width dB bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SinrHistogram {
    pub bin_db: f64,
    /// bin index -> count; a sample `s` lands in `floor(s / bin_db)`.
    pub counts: BTreeMap<i64, u64>,
    pub total: u64,
}

impl SinrHistogram {
    pub fn from_samples<'a>(samples: impl Iterator<Item = &'a f32>, bin_db: f64) -> Self {
        let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
        let mut total = 0;
        for &s in samples {
            let idx = (s as f64 / bin_db).floor() as i64;
            *counts.entry(idx).or_insert(0) += 1;
            total += 1;
        }
        SinrHistogram { bin_db, counts, total }
    }

    /// Lower edge and count of the most populated bin; ties resolve to the
    /// lowest bin so the mode is deterministic.
    pub fn mode(&self) -> Option<(f64, u64)> {
        let (&idx, &count) = self.counts.iter().max_by(|a, b| {
            a.1.cmp(b.1).then(b.0.cmp(a.0)) // prefer higher count, then lower bin
        })?;
        Some((idx as f64 * self.bin_db, count))
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    sent_at: SimTime,
}

/// Handle to a registered flow (dense index into the monitor).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowHandle(pub usize);

/// The run-wide flow ledger.
pub struct FlowMonitor {
    flows: Vec<FlowStats>,
    index: BTreeMap<FlowKey, usize>,
    pending: BTreeMap<(usize, u64), Pending>,
    finalized: bool,
}

impl FlowMonitor {
    pub fn new() -> Self {
        FlowMonitor { flows: Vec::new(), index: BTreeMap::new(), pending: BTreeMap::new(), finalized: false }
    }

    pub fn register(&mut self, key: FlowKey, class: FlowClass, stack: StackTag) -> FlowHandle {
        if let Some(&idx) = self.index.get(&key) {
            return FlowHandle(idx);
        }
        let idx = self.flows.len();
        self.flows.push(FlowStats::new(key, class, stack));
        self.index.insert(key, idx);
        FlowHandle(idx)
    }

    pub fn lookup(&self, key: &FlowKey) -> Option<FlowHandle> {
        self.index.get(key).copied().map(FlowHandle)
    }

    /// Record a transmission: `seq` identifies the packet within its flow so
    /// the matching reception or loss can settle it later.
    pub fn on_tx(&mut self, h: FlowHandle, seq: u64, bytes: u64, t: SimTime) {
        let f = &mut self.flows[h.0];
        f.tx_packets += 1;
        f.tx_bytes += bytes;
        let bin = f.bin_mut(t);
        bin.sent += 1;
        bin.tx_bytes += bytes;
        f.first_tx = Some(f.first_tx.map_or(t, |p| p.min(t)));
        self.pending.insert((h.0, seq), Pending { sent_at: t });
    }

    /// Record a reception. `sent_at` is the packet's application send time;
    /// receiving before sending is a causality bug in the caller.
    pub fn on_rx(
        &mut self,
        h: FlowHandle,
        seq: u64,
        bytes: u64,
        sent_at: SimTime,
        t: SimTime,
        sinr_db: f64,
    ) -> Result<(), FlowMonError> {
        if t < sent_at {
            return Err(FlowMonError::ReceiveBeforeSend { sent_at, t });
        }
        self.pending.remove(&(h.0, seq));
        let f = &mut self.flows[h.0];
        f.rx_packets += 1;
        f.rx_bytes += bytes;
        f.delay_sum_us += t.saturating_sub(sent_at);
        f.bin_mut(t).rx_bytes += bytes;
        f.sinr_samples.push(sinr_db as f32);
        f.last_rx = Some(f.last_rx.map_or(t, |p| p.max(t)));
        Ok(())
    }

    /// Record an explicit loss (queue drop, delivery failure, detachment).
    /// The loss is binned at the packet's transmission second.
    pub fn on_lost(&mut self, h: FlowHandle, seq: u64) {
        let sent_at = match self.pending.remove(&(h.0, seq)) {
            Some(p) => p.sent_at,
            None => return, // already settled (or never transmitted)
        };
        let f = &mut self.flows[h.0];
        f.lost_packets += 1;
        f.bin_mut(sent_at).lost += 1;
    }

    /// Key-based reception used for flows nobody registered up front: the
    /// flow is created on the spot.
    pub fn on_rx_by_key(
        &mut self,
        key: FlowKey,
        class: FlowClass,
        stack: StackTag,
        seq: u64,
        bytes: u64,
        sent_at: SimTime,
        t: SimTime,
        sinr_db: f64,
    ) -> Result<(), FlowMonError> {
        let h = self.register(key, class, stack);
        self.on_rx(h, seq, bytes, sent_at, t, sinr_db)
    }

    /// Settle every packet still outstanding at the end of the run as lost.
    /// After this, `tx = rx + lost` holds for every flow.
    pub fn finalize(&mut self) {
        let pending = std::mem::take(&mut self.pending);
        for ((flow_idx, _seq), p) in pending {
            let f = &mut self.flows[flow_idx];
            f.lost_packets += 1;
            f.bin_mut(p.sent_at).lost += 1;
        }
        self.finalized = true;
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn flows(&self) -> &[FlowStats] {
        &self.flows
    }

    pub fn flow(&self, h: FlowHandle) -> &FlowStats {
        &self.flows[h.0]
    }

    /// Histogram over every recorded SINR sample in the run.
    pub fn sinr_histogram(&self, bin_db: f64) -> SinrHistogram {
        SinrHistogram::from_samples(self.flows.iter().flat_map(|f| f.sinr_samples.iter()), bin_db)
    }

    /// Sum totals over flows selected by `filter`.
    pub fn totals(&self, filter: impl Fn(&FlowStats) -> bool) -> Totals {
        Totals::over(self.flows.iter().filter(|f| filter(f)))
    }
}

impl Default for FlowMonitor {
    fn default() -> Self {
        Self::new()
    }
}

/// Aggregated totals over a set of flows; same metric formulas as a single
/// flow, applied to the summed integer counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Totals {
    pub flows: u64,
    pub tx_packets: u64,
    pub rx_packets: u64,
    pub lost_packets: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub delay_sum_us: u64,
}

impl Totals {
    /// Sum the integer counters of any set of flows.
    pub fn over<'a>(flows: impl Iterator<Item = &'a FlowStats>) -> Totals {
        let mut t = Totals::default();
        for f in flows {
            t.tx_packets += f.tx_packets;
            t.rx_packets += f.rx_packets;
            t.lost_packets += f.lost_packets;
            t.tx_bytes += f.tx_bytes;
            t.rx_bytes += f.rx_bytes;
            t.delay_sum_us += f.delay_sum_us;
            t.flows += 1;
        }
        t
    }

    pub fn loss_ratio(&self) -> Option<f64> {
        if self.tx_packets == 0 {
            None
        } else {
            Some(self.lost_packets as f64 / self.tx_packets as f64)
        }
    }

    pub fn mean_delay_ms(&self) -> Option<f64> {
        if self.rx_packets == 0 {
            None
        } else {
            Some(self.delay_sum_us as f64 / 1000.0 / self.rx_packets as f64)
        }
    }

    pub fn rx_kbps(&self, run_duration_s: f64) -> f64 {
        self.rx_bytes as f64 * 8.0 / run_duration_s / 1000.0
    }

    pub fn tx_kbps(&self, run_duration_s: f64) -> f64 {
        self.tx_bytes as f64 * 8.0 / run_duration_s / 1000.0
    }

    pub fn mean_packet_size(&self) -> Option<f64> {
        if self.rx_packets == 0 {
            None
        } else {
            Some(self.rx_bytes as f64 / self.rx_packets as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(src: u32, flow_id: u32) -> FlowKey {
        FlowKey { src: NodeId(src), dst: Dest::Node(NodeId(99)), flow_id }
    }

    fn monitor_with_flow() -> (FlowMonitor, FlowHandle) {
        let mut fm = FlowMonitor::new();
        let h = fm.register(key(1, 0), FlowClass::Data, StackTag::Dsrc);
        (fm, h)
    }

    #[test]
    fn tx_updates_totals_and_bins() {
        let (mut fm, h) = monitor_with_flow();
        fm.on_tx(h, 0, 200, SimTime::from_millis(2500));
        let f = fm.flow(h);
        assert_eq!(f.tx_packets, 1);
        assert_eq!(f.tx_bytes, 200);
        assert_eq!(f.per_second[2], SecondBin { sent: 1, lost: 0, tx_bytes: 200, rx_bytes: 0 });
    }

    #[test]
    fn rx_accumulates_delay_and_sinr() {
        let (mut fm, h) = monitor_with_flow();
        let sent = SimTime::from_millis(1000);
        fm.on_tx(h, 0, 200, sent);
        fm.on_rx(h, 0, 200, sent, SimTime::from_millis(1003), 24.0).unwrap();
        let f = fm.flow(h);
        assert_eq!(f.rx_packets, 1);
        assert_eq!(f.delay_sum_us, 3000);
        assert_eq!(f.sinr_samples, vec![24.0f32]);
        assert_eq!(f.per_second[1].rx_bytes, 200);
    }

    #[test]
    fn rx_before_tx_is_rejected() {
        let (mut fm, h) = monitor_with_flow();
        let err = fm
            .on_rx(h, 0, 200, SimTime::from_millis(10), SimTime::from_millis(9), 0.0)
            .unwrap_err();
        assert!(matches!(err, FlowMonError::ReceiveBeforeSend { .. }));
    }

    #[test]
    fn loss_ratio_follows_the_ledger() {
        let (mut fm, h) = monitor_with_flow();
        for seq in 0..100u64 {
            fm.on_tx(h, seq, 100, SimTime::from_millis(seq));
        }
        for seq in 0..93u64 {
            fm.on_rx(h, seq, 100, SimTime::from_millis(seq), SimTime::from_millis(seq + 1), 15.0)
                .unwrap();
        }
        for seq in 93..100u64 {
            fm.on_lost(h, seq);
        }
        let f = fm.flow(h);
        assert_eq!(f.loss_ratio(), Some(0.07));
        assert_eq!(f.tx_packets, f.rx_packets + f.lost_packets);
    }

    #[test]
    fn mean_delay_is_arithmetic_mean_in_ms() {
        let (mut fm, h) = monitor_with_flow();
        for (seq, d_ms) in [(0u64, 1u64), (1, 2), (2, 3)] {
            let sent = SimTime::from_secs(seq);
            fm.on_tx(h, seq, 50, sent);
            fm.on_rx(h, seq, 50, sent, sent.add_micros(d_ms * 1000), 10.0).unwrap();
        }
        assert_eq!(fm.flow(h).mean_delay_ms(), Some(2.0));
    }

    #[test]
    fn bitrates_divide_by_configured_duration() {
        let (mut fm, h) = monitor_with_flow();
        // 5,000,000 bytes received over a 10 s run = 4000 Kbps.
        let mut seq = 0u64;
        for _ in 0..50 {
            let t = SimTime::from_millis(seq * 100);
            fm.on_tx(h, seq, 100_000, t);
            fm.on_rx(h, seq, 100_000, t, t.add_micros(500), 30.0).unwrap();
            seq += 1;
        }
        let f = fm.flow(h);
        assert!((f.rx_kbps(10.0) - 4000.0).abs() < 1e-9);
        assert!((f.tx_kbps(10.0) - 4000.0).abs() < 1e-9);
        // Spanning only ~5 s of the run, the span-normalized variant is higher.
        assert!(f.rx_kbps_active().unwrap() > f.rx_kbps(10.0));
    }

    #[test]
    fn mean_packet_size_is_rx_bytes_over_rx_packets() {
        let (mut fm, h) = monitor_with_flow();
        for seq in 0..4u64 {
            let t = SimTime::from_millis(seq);
            fm.on_tx(h, seq, 1400, t);
            fm.on_rx(h, seq, 1400, t, t.add_micros(100), 40.0).unwrap();
        }
        assert_eq!(fm.flow(h).mean_packet_size(), Some(1400.0));
    }

    #[test]
    fn zero_packet_flows_have_undefined_metrics() {
        let (fm, h) = monitor_with_flow();
        let f = fm.flow(h);
        assert_eq!(f.loss_ratio(), None);
        assert_eq!(f.mean_delay_ms(), None);
        assert_eq!(f.mean_packet_size(), None);
        assert_eq!(f.rx_kbps(10.0), 0.0);
    }

    #[test]
    fn unknown_flow_on_rx_auto_registers() {
        let mut fm = FlowMonitor::new();
        let k = key(5, 3);
        assert!(fm.lookup(&k).is_none());
        fm.on_rx_by_key(k, FlowClass::Data, StackTag::Dsrc, 0, 64, SimTime::ZERO, SimTime::from_millis(1), 12.0)
            .unwrap();
        let h = fm.lookup(&k).expect("registered by reception");
        assert_eq!(fm.flow(h).rx_packets, 1);
    }

    #[test]
    fn finalize_settles_outstanding_packets_as_lost() {
        let (mut fm, h) = monitor_with_flow();
        for seq in 0..10u64 {
            fm.on_tx(h, seq, 100, SimTime::from_millis(seq * 50));
        }
        for seq in 0..6u64 {
            let t = SimTime::from_millis(seq * 50);
            fm.on_rx(h, seq, 100, t, t.add_micros(400), 20.0).unwrap();
        }
        fm.finalize();
        let f = fm.flow(h);
        assert_eq!(f.lost_packets, 4);
        assert_eq!(f.tx_packets, f.rx_packets + f.lost_packets);
        // Losses are binned at the tx second (all in second 0 here).
        assert_eq!(f.per_second[0].lost, 4);
    }

    #[test]
    fn histogram_mode_and_bins() {
        let samples: Vec<f32> = vec![49.2, 49.9, 49.0, 50.1, 12.4, -3.2];
        let hist = SinrHistogram::from_samples(samples.iter(), 1.0);
        assert_eq!(hist.total, 6);
        assert_eq!(hist.counts[&49], 3);
        assert_eq!(hist.counts[&50], 1);
        assert_eq!(hist.counts[&12], 1);
        assert_eq!(hist.counts[&-4], 1, "negative samples floor downward");
        assert_eq!(hist.mode(), Some((49.0, 3)));
    }

    #[test]
    fn histogram_mode_tie_breaks_to_lowest_bin() {
        let samples: Vec<f32> = vec![10.5, 20.5];
        let hist = SinrHistogram::from_samples(samples.iter(), 1.0);
        assert_eq!(hist.mode(), Some((10.0, 1)));
    }

    proptest! {
        /// Bins always sum to totals and conservation holds after finalize,
        /// no matter how tx/rx/loss interleave.
        #[test]
        fn bins_sum_to_totals(events in proptest::collection::vec((0u64..5000, 1u64..2000, 0u8..3), 1..300)) {
            let mut fm = FlowMonitor::new();
            let h = fm.register(key(1, 0), FlowClass::Data, StackTag::Dsrc);
            let mut seq = 0u64;
            for (t_ms, bytes, action) in events {
                let t = SimTime::from_millis(t_ms);
                fm.on_tx(h, seq, bytes, t);
                match action {
                    0 => { fm.on_rx(h, seq, bytes, t, t.add_micros(250), 10.0).unwrap(); }
                    1 => { fm.on_lost(h, seq); }
                    _ => {} // left pending for finalize
                }
                seq += 1;
            }
            fm.finalize();
            let f = fm.flow(h);
            prop_assert_eq!(f.tx_packets, f.rx_packets + f.lost_packets);
            let sent: u64 = f.per_second.iter().map(|b| b.sent).sum();
            let lost: u64 = f.per_second.iter().map(|b| b.lost).sum();
            let txb: u64 = f.per_second.iter().map(|b| b.tx_bytes).sum();
            let rxb: u64 = f.per_second.iter().map(|b| b.rx_bytes).sum();
            prop_assert_eq!(sent, f.tx_packets);
            prop_assert_eq!(lost, f.lost_packets);
            prop_assert_eq!(txb, f.tx_bytes);
            prop_assert_eq!(rxb, f.rx_bytes);
        }
    }
}
