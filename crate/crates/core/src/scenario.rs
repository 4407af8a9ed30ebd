//! Scenario configuration: a flat dotted-key text format, named presets,
//! eager validation with per-key diagnostics, and assembly of a runnable
//! [`Sim`].
//!
//! The file format is one `key = value` per line, `#` comments, blank lines
//! ignored. Every key has a default; unknown keys are rejected so typos fail
//! loudly. The resolved configuration is renormalized into a canonical form
//! that drives both the reproducibility hash and the config copy written next
//! to run artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::apps::FcwState;
use crate::channel::NakagamiProfile;
use crate::dsrc::{DsrcParams, DsrcStack};
use crate::engine::{fnv1a64, SimTime};
use crate::flowmon::StackTag;
use crate::mmwave::{BlockageParams, MmwaveParams, MmwaveStack};
use crate::mobility::{
    group_by_vehicle, load_trace, mph_to_mps, synth_corridor, MobilityError, NodeId, NodeKind,
    TraceSample,
};
use crate::sim::{EnterActions, Ev, Sim};

/// First roadside-unit id; vehicles count up from 1 and never reach this.
const RSU_ID_BASE: u32 = 9_000;
/// First base-station id.
const BS_ID_BASE: u32 = 9_500;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}`: expected {expected}, got `{value}`")]
    BadValue { key: String, expected: &'static str, value: String },
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown preset `{name}` (available: {known})")]
    UnknownPreset { name: String, known: String },
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read config `{path}`: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trace file not found: {0}")]
    MissingTrace(PathBuf),
    #[error("trace `{path}`: {source}")]
    Trace { path: PathBuf, source: MobilityError },
}

/// Which radio stack(s) a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackSel {
    Dsrc,
    Mmwave,
    Both,
}

impl StackSel {
    pub fn includes_dsrc(self) -> bool {
        matches!(self, StackSel::Dsrc | StackSel::Both)
    }
    pub fn includes_mmwave(self) -> bool {
        matches!(self, StackSel::Mmwave | StackSel::Both)
    }
    pub fn as_str(self) -> &'static str {
        match self {
            StackSel::Dsrc => "dsrc",
            StackSel::Mmwave => "mmwave",
            StackSel::Both => "both",
        }
    }
}

/// Which application a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppSel {
    Fcw,
    Datacol,
}

impl AppSel {
    pub fn as_str(self) -> &'static str {
        match self {
            AppSel::Fcw => "fcw",
            AppSel::Datacol => "datacol",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorridorCfg {
    pub length_m: f64,
    pub speed_mph: f64,
    pub rate_vpm: f64,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct FcwCfg {
    pub followers: u32,
    pub follower_gap_m: f64,
    pub bs_distance_m: f64,
    pub warning_bytes: u64,
    pub trigger_s: f64,
}

#[derive(Debug, Clone)]
pub struct DatacolCfg {
    pub packet_bytes: u64,
    pub rate_kbps: f64,
    /// When true, collection payloads travel unicast over the on-demand
    /// routed path to the nearest roadside unit instead of broadcast beacons.
    pub routed: bool,
}

/// A fully validated run configuration plus its canonical key-value form.
#[derive(Debug, Clone)]
pub struct Scenario {
    canonical: BTreeMap<String, String>,
    pub seed: u64,
    pub duration_s: f64,
    pub output_dir: PathBuf,
    pub stack: StackSel,
    pub app: AppSel,
    pub corridor: CorridorCfg,
    pub fcw: FcwCfg,
    pub datacol: DatacolCfg,
    pub rsu_positions: Vec<(f64, f64)>,
    pub bs_positions: Vec<(f64, f64)>,
    pub dsrc: DsrcParams,
    pub mmw: MmwaveParams,
}

/// Every key the format accepts, with its default value. Sorted by key.
const DEFAULTS: &[(&str, &str)] = &[
    ("app", "datacol"),
    ("corridor.length_m", "2000.0"),
    ("corridor.rate_vpm", "0.0"),
    ("corridor.speed_mph", "45.0"),
    ("corridor.trace", ""),
    ("datacol.packet_bytes", "200"),
    ("datacol.rate_kbps", "16.0"),
    ("datacol.routed", "false"),
    ("dsrc.aodv.discovery_timeout_us", "1000000"),
    ("dsrc.aodv.max_retries", "2"),
    ("dsrc.aodv.route_lifetime_us", "5000000"),
    ("dsrc.aodv.rreq_ttl", "8"),
    ("dsrc.bandwidth_hz", "10e6"),
    ("dsrc.bsm_jitter_us", "1000"),
    ("dsrc.cs_threshold_dbm", "-65.0"),
    ("dsrc.cw_max", "1023"),
    ("dsrc.cw_min", "15"),
    ("dsrc.decode_threshold_db", "10.0"),
    ("dsrc.fading", "true"),
    ("dsrc.frequency_hz", "5.9e9"),
    ("dsrc.min_rx_dbm", "-110.0"),
    ("dsrc.noise_figure_db", "6.0"),
    ("dsrc.phy_rate_bps", "6e6"),
    ("dsrc.preamble_us", "40"),
    ("dsrc.queue_cap", "64"),
    ("dsrc.retry_limit", "3"),
    ("dsrc.rx_gain_dbi", "1.0"),
    ("dsrc.sifs_us", "32"),
    ("dsrc.slot_us", "13"),
    ("dsrc.tx_gain_dbi", "1.0"),
    ("dsrc.tx_power_dbm", "20.0"),
    ("duration_s", "10.0"),
    ("fcw.bs_distance_m", "441.96"),
    ("fcw.follower_gap_m", "50.0"),
    ("fcw.followers", "3"),
    ("fcw.trigger_s", "1.0"),
    ("fcw.warning_bytes", "200"),
    ("infra.bs_positions", ""),
    ("infra.rsu_positions", "200,6;600,6;1000,6;1400,6;1800,6"),
    ("mmw.assoc_period_us", "100000"),
    ("mmw.bandwidth_hz", "1e9"),
    ("mmw.blockage_per_s", "0.0"),
    ("mmw.clear_per_s", "2.0"),
    ("mmw.decode_threshold_db", "5.0"),
    ("mmw.fading", "false"),
    ("mmw.frequency_hz", "28e9"),
    ("mmw.harq_rtt_slots", "4"),
    ("mmw.max_retx", "3"),
    ("mmw.noise_figure_db", "5.0"),
    ("mmw.processing_delay_us", "1000"),
    ("mmw.rx_gain_dbi", "25.0"),
    ("mmw.slot_payload_bits", "64000"),
    ("mmw.slot_us", "125"),
    ("mmw.tx_gain_dbi", "25.0"),
    ("mmw.tx_power_dbm", "30.0"),
    ("output_dir", "runs/out"),
    ("seed", "1"),
    ("stack", "dsrc"),
];

pub const PRESET_NAMES: &[&str] =
    &["fcw_dsrc", "fcw_mmwave_1450ft", "datacol_dsrc", "datacol_dsrc_160k", "datacol_mmwave"];

/// Overrides a preset applies on top of the defaults.
fn preset_overrides(name: &str) -> Option<&'static [(&'static str, &'static str)]> {
    Some(match name {
        // Direct vehicle-to-vehicle collision warning on an otherwise silent
        // channel; speed comes from the corridor key and is swept externally.
        "fcw_dsrc" => &[
            ("app", "fcw"),
            ("stack", "dsrc"),
            ("duration_s", "5.0"),
            ("output_dir", "runs/fcw_dsrc"),
        ],
        // Warning relayed through a base station placed 441.96 m (1450 ft)
        // from the braking vehicle at trigger time.
        "fcw_mmwave_1450ft" => &[
            ("app", "fcw"),
            ("stack", "mmwave"),
            ("duration_s", "5.0"),
            ("fcw.bs_distance_m", "441.96"),
            ("mmw.blockage_per_s", "0.2"),
            ("output_dir", "runs/fcw_mmwave_1450ft"),
        ],
        // ~30 concurrent beaconing vehicles collected at roadside units:
        // 18/min arrivals at 45 mph dwell ~99.5 s on the 2 km corridor.
        "datacol_dsrc" => &[
            ("app", "datacol"),
            ("stack", "dsrc"),
            ("duration_s", "120.0"),
            ("corridor.rate_vpm", "18.0"),
            ("datacol.packet_bytes", "200"),
            ("datacol.rate_kbps", "16.0"),
            ("infra.rsu_positions", "200,6;600,6;1000,6;1400,6;1800,6"),
            ("output_dir", "runs/datacol_dsrc"),
        ],
        // Same collection scenario at the ten-times application rate.
        "datacol_dsrc_160k" => &[
            ("app", "datacol"),
            ("stack", "dsrc"),
            ("duration_s", "120.0"),
            ("corridor.rate_vpm", "18.0"),
            ("datacol.packet_bytes", "200"),
            ("datacol.rate_kbps", "160.0"),
            ("infra.rsu_positions", "200,6;600,6;1000,6;1400,6;1800,6"),
            ("output_dir", "runs/datacol_dsrc_160k"),
        ],
        // High-rate uplink streaming into a four-cell corridor deployment.
        "datacol_mmwave" => &[
            ("app", "datacol"),
            ("stack", "mmwave"),
            ("duration_s", "600.0"),
            ("corridor.rate_vpm", "20.0"),
            ("datacol.packet_bytes", "1400"),
            ("datacol.rate_kbps", "4000.0"),
            ("infra.bs_positions", "250,10;750,10;1250,10;1750,10"),
            ("mmw.blockage_per_s", "0.2"),
            ("output_dir", "runs/datacol_mmwave"),
        ],
        _ => return None,
    })
}

/// Typed readers over the resolved raw map. Each read renormalizes the value
/// into `canonical`, so semantically equal configs canonicalize identically.
struct Cfg {
    raw: BTreeMap<String, String>,
    canonical: BTreeMap<String, String>,
}

impl Cfg {
    fn raw_str(&self, key: &str) -> &str {
        self.raw.get(key).map(String::as_str).expect("all keys defaulted")
    }

    fn f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        let raw = self.raw_str(key);
        let v: f64 = raw.trim().parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            expected: "a number",
            value: raw.into(),
        })?;
        if !v.is_finite() {
            return Err(ConfigError::BadValue {
                key: key.into(),
                expected: "a finite number",
                value: raw.into(),
            });
        }
        self.canonical.insert(key.into(), format!("{v:?}"));
        Ok(v)
    }

    fn u64(&mut self, key: &str) -> Result<u64, ConfigError> {
        let raw = self.raw_str(key);
        let v: u64 = raw.trim().parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            expected: "a non-negative integer",
            value: raw.into(),
        })?;
        self.canonical.insert(key.into(), v.to_string());
        Ok(v)
    }

    fn u32(&mut self, key: &str) -> Result<u32, ConfigError> {
        let v = self.u64(key)?;
        u32::try_from(v).map_err(|_| ConfigError::BadValue {
            key: key.into(),
            expected: "a 32-bit integer",
            value: v.to_string(),
        })
    }

    fn bool(&mut self, key: &str) -> Result<bool, ConfigError> {
        let raw = self.raw_str(key);
        let v = match raw.trim() {
            "true" => true,
            "false" => false,
            _ => {
                return Err(ConfigError::BadValue {
                    key: key.into(),
                    expected: "true or false",
                    value: raw.into(),
                })
            }
        };
        self.canonical.insert(key.into(), v.to_string());
        Ok(v)
    }

    fn string(&mut self, key: &str) -> String {
        let v = self.raw_str(key).trim().to_string();
        self.canonical.insert(key.into(), v.clone());
        v
    }

    /// `x,y;x,y` position list; empty string is an empty list.
    fn positions(&mut self, key: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
        let raw = self.string(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for pair in raw.split(';') {
            let mut it = pair.split(',');
            let (Some(x), Some(y), None) = (it.next(), it.next(), it.next()) else {
                return Err(ConfigError::BadValue {
                    key: key.into(),
                    expected: "positions like `x,y;x,y`",
                    value: raw,
                });
            };
            let parse = |s: &str| -> Result<f64, ConfigError> {
                s.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    expected: "positions like `x,y;x,y`",
                    value: pair.to_string(),
                })
            };
            out.push((parse(x)?, parse(y)?));
        }
        // Renormalize so spacing variants hash identically.
        let canon: Vec<String> = out.iter().map(|(x, y)| format!("{x:?},{y:?}")).collect();
        self.canonical.insert(key.into(), canon.join(";"));
        Ok(out)
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

fn require_positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

impl Scenario {
    /// The default configuration rendered as config text.
    pub fn default_text() -> String {
        DEFAULTS.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// A named preset rendered as config text.
    pub fn preset_text(name: &str) -> Result<String, ConfigError> {
        let overrides = preset_overrides(name).ok_or_else(|| ConfigError::UnknownPreset {
            name: name.into(),
            known: PRESET_NAMES.join(", "),
        })?;
        let mut map: BTreeMap<&str, &str> = DEFAULTS.iter().copied().collect();
        for (k, v) in overrides {
            map.insert(k, v);
        }
        Ok(map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }

    /// Load and validate a named preset.
    pub fn preset(name: &str) -> Result<Scenario, ConfigError> {
        Self::from_text(&Self::preset_text(name)?)
    }

    /// Load and validate a config file.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Ok(Self::from_text(&text)?)
    }

    /// Parse config text over the defaults and validate every field.
    pub fn from_text(text: &str) -> Result<Scenario, ConfigError> {
        let known: BTreeMap<&str, &str> = DEFAULTS.iter().copied().collect();
        let mut raw: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: idx + 1, text: line.to_string() });
            };
            let key = key.trim();
            if !known.contains_key(key) {
                return Err(ConfigError::UnknownKey { key: key.to_string() });
            }
            raw.insert(key.to_string(), value.trim().to_string());
        }
        Self::from_raw(raw)
    }

    fn from_raw(raw: BTreeMap<String, String>) -> Result<Scenario, ConfigError> {
        let mut c = Cfg { raw, canonical: BTreeMap::new() };

        let seed = c.u64("seed")?;
        let duration_s = require_positive("duration_s", c.f64("duration_s")?)?;
        let output_dir = PathBuf::from(c.string("output_dir"));

        let stack = match c.string("stack").as_str() {
            "dsrc" => StackSel::Dsrc,
            "mmwave" => StackSel::Mmwave,
            "both" => StackSel::Both,
            other => {
                return Err(ConfigError::BadValue {
                    key: "stack".into(),
                    expected: "dsrc, mmwave, or both",
                    value: other.into(),
                })
            }
        };
        let app = match c.string("app").as_str() {
            "fcw" => AppSel::Fcw,
            "datacol" => AppSel::Datacol,
            other => {
                return Err(ConfigError::BadValue {
                    key: "app".into(),
                    expected: "fcw or datacol",
                    value: other.into(),
                })
            }
        };

        let corridor = CorridorCfg {
            length_m: require_positive("corridor.length_m", c.f64("corridor.length_m")?)?,
            speed_mph: require_positive("corridor.speed_mph", c.f64("corridor.speed_mph")?)?,
            rate_vpm: {
                let v = c.f64("corridor.rate_vpm")?;
                if v < 0.0 {
                    return Err(invalid("corridor.rate_vpm", "must be non-negative"));
                }
                v
            },
            trace: {
                let s = c.string("corridor.trace");
                if s.is_empty() { None } else { Some(PathBuf::from(s)) }
            },
        };
        if corridor.trace.is_some() && corridor.rate_vpm > 0.0 {
            return Err(invalid(
                "corridor.trace",
                "provide either a trace file or an arrival rate, not both",
            ));
        }

        let fcw = FcwCfg {
            followers: {
                let v = c.u32("fcw.followers")?;
                if v == 0 {
                    return Err(invalid("fcw.followers", "need at least one follower"));
                }
                v
            },
            follower_gap_m: require_positive("fcw.follower_gap_m", c.f64("fcw.follower_gap_m")?)?,
            bs_distance_m: require_positive("fcw.bs_distance_m", c.f64("fcw.bs_distance_m")?)?,
            warning_bytes: {
                let v = c.u64("fcw.warning_bytes")?;
                if v == 0 {
                    return Err(invalid("fcw.warning_bytes", "must be positive"));
                }
                v
            },
            trigger_s: require_positive("fcw.trigger_s", c.f64("fcw.trigger_s")?)?,
        };
        let datacol = DatacolCfg {
            packet_bytes: {
                let v = c.u64("datacol.packet_bytes")?;
                if v == 0 {
                    return Err(invalid("datacol.packet_bytes", "must be positive"));
                }
                v
            },
            rate_kbps: require_positive("datacol.rate_kbps", c.f64("datacol.rate_kbps")?)?,
            routed: c.bool("datacol.routed")?,
        };

        let rsu_positions = c.positions("infra.rsu_positions")?;
        let bs_positions = c.positions("infra.bs_positions")?;

        let mut dsrc = DsrcParams::default();
        dsrc.budget.tx_power_dbm = c.f64("dsrc.tx_power_dbm")?;
        dsrc.budget.tx_gain_dbi = c.f64("dsrc.tx_gain_dbi")?;
        dsrc.budget.rx_gain_dbi = c.f64("dsrc.rx_gain_dbi")?;
        dsrc.budget.frequency_hz = require_positive("dsrc.frequency_hz", c.f64("dsrc.frequency_hz")?)?;
        dsrc.budget.bandwidth_hz = require_positive("dsrc.bandwidth_hz", c.f64("dsrc.bandwidth_hz")?)?;
        dsrc.budget.noise_figure_db = c.f64("dsrc.noise_figure_db")?;
        dsrc.phy_rate_bps = require_positive("dsrc.phy_rate_bps", c.f64("dsrc.phy_rate_bps")?)?;
        dsrc.preamble_us = c.u64("dsrc.preamble_us")?;
        dsrc.slot_us = c.u64("dsrc.slot_us")?.max(1);
        dsrc.sifs_us = c.u64("dsrc.sifs_us")?;
        dsrc.aifs_us = dsrc.sifs_us + 2 * dsrc.slot_us;
        dsrc.cw_min = c.u32("dsrc.cw_min")?;
        dsrc.cw_max = c.u32("dsrc.cw_max")?;
        if dsrc.cw_max < dsrc.cw_min {
            return Err(invalid("dsrc.cw_max", "must be at least dsrc.cw_min"));
        }
        dsrc.queue_cap = c.u64("dsrc.queue_cap")?.max(1) as usize;
        dsrc.retry_limit = c.u32("dsrc.retry_limit")?;
        dsrc.decode_threshold_db = c.f64("dsrc.decode_threshold_db")?;
        dsrc.cs_threshold_dbm = c.f64("dsrc.cs_threshold_dbm")?;
        dsrc.min_rx_dbm = c.f64("dsrc.min_rx_dbm")?;
        dsrc.fading = if c.bool("dsrc.fading")? { Some(NakagamiProfile::default()) } else { None };
        dsrc.bsm_jitter_us = c.u64("dsrc.bsm_jitter_us")?.max(1);
        dsrc.aodv.rreq_ttl = {
            let ttl = c.u32("dsrc.aodv.rreq_ttl")?;
            u8::try_from(ttl).map_err(|_| ConfigError::BadValue {
                key: "dsrc.aodv.rreq_ttl".into(),
                expected: "a hop count up to 255",
                value: ttl.to_string(),
            })?
        };
        dsrc.aodv.discovery_timeout_us = c.u64("dsrc.aodv.discovery_timeout_us")?.max(1);
        dsrc.aodv.max_discovery_retries = c.u32("dsrc.aodv.max_retries")?;
        dsrc.aodv.route_lifetime_us = c.u64("dsrc.aodv.route_lifetime_us")?.max(1);
        // The collection app rides the beacon machinery: its packet size and
        // rate define the beacon payload and cadence.
        dsrc.bsm_bytes = datacol.packet_bytes;
        dsrc.bsm_period_us =
            ((datacol.packet_bytes * 8) as f64 / datacol.rate_kbps * 1000.0).round().max(1.0) as u64;

        let mut mmw = MmwaveParams::default();
        mmw.budget.tx_power_dbm = c.f64("mmw.tx_power_dbm")?;
        mmw.budget.tx_gain_dbi = c.f64("mmw.tx_gain_dbi")?;
        mmw.budget.rx_gain_dbi = c.f64("mmw.rx_gain_dbi")?;
        mmw.budget.frequency_hz = require_positive("mmw.frequency_hz", c.f64("mmw.frequency_hz")?)?;
        mmw.budget.bandwidth_hz = require_positive("mmw.bandwidth_hz", c.f64("mmw.bandwidth_hz")?)?;
        mmw.budget.noise_figure_db = c.f64("mmw.noise_figure_db")?;
        mmw.decode_threshold_db = c.f64("mmw.decode_threshold_db")?;
        mmw.slot_us = c.u64("mmw.slot_us")?.max(1);
        mmw.slot_payload_bits = c.u64("mmw.slot_payload_bits")?.max(8);
        mmw.max_retx = c.u32("mmw.max_retx")?;
        mmw.harq_rtt_slots = c.u64("mmw.harq_rtt_slots")?.max(1);
        mmw.processing_delay_us = c.u64("mmw.processing_delay_us")?;
        mmw.assoc_period_us = c.u64("mmw.assoc_period_us")?.max(1);
        let blockage_per_s = c.f64("mmw.blockage_per_s")?;
        let clear_per_s = c.f64("mmw.clear_per_s")?;
        if blockage_per_s < 0.0 {
            return Err(invalid("mmw.blockage_per_s", "must be non-negative"));
        }
        mmw.blockage = if blockage_per_s > 0.0 {
            let clear = require_positive("mmw.clear_per_s", clear_per_s)?;
            Some(BlockageParams { lambda_block_per_s: blockage_per_s, lambda_clear_per_s: clear })
        } else {
            None
        };
        mmw.fading = if c.bool("mmw.fading")? { Some(NakagamiProfile::default()) } else { None };

        // Cross-field rules.
        if app == AppSel::Fcw {
            if stack == StackSel::Both {
                return Err(invalid("stack", "the warning needs one carrying stack: dsrc or mmwave"));
            }
            if fcw.trigger_s >= duration_s {
                return Err(invalid("fcw.trigger_s", "must fire before the run ends"));
            }
        }
        if app == AppSel::Datacol {
            if stack.includes_dsrc() && rsu_positions.is_empty() {
                return Err(invalid(
                    "infra.rsu_positions",
                    "broadcast data collection needs at least one roadside unit",
                ));
            }
            if stack.includes_mmwave() && bs_positions.is_empty() {
                return Err(invalid(
                    "infra.bs_positions",
                    "cellular data collection needs at least one base station",
                ));
            }
        }

        Ok(Scenario {
            canonical: c.canonical,
            seed,
            duration_s,
            output_dir,
            stack,
            app,
            corridor,
            fcw,
            datacol,
            rsu_positions,
            bs_positions,
            dsrc,
            mmw,
        })
    }

    /// The canonical key-value view this scenario was validated from.
    pub fn canonical(&self) -> &BTreeMap<String, String> {
        &self.canonical
    }

    /// Canonical config text: every key, normalized, sorted. Writing this
    /// back through the parser reproduces the scenario exactly.
    pub fn dump(&self) -> String {
        self.canonical.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Reproducibility hash over every semantic field. The output directory
    /// is where results land, not what they are, so it is excluded.
    pub fn config_hash(&self) -> u64 {
        let blob: String = self
            .canonical
            .iter()
            .filter(|(k, _)| k.as_str() != "output_dir")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fnv1a64(blob.as_bytes())
    }

    /// Derive a copy with one key overridden (used by sweeps). The value is
    /// revalidated in the context of the full config.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Scenario, ConfigError> {
        let mut raw = self.canonical.clone();
        if !raw.contains_key(key) {
            return Err(ConfigError::UnknownKey { key: key.into() });
        }
        raw.insert(key.into(), value.into());
        Self::from_raw(raw)
    }

    pub fn horizon(&self) -> SimTime {
        SimTime::from_micros((self.duration_s * 1e6).round() as u64)
    }

    /// Assemble the runnable simulation: stacks, infrastructure, vehicle
    /// tracks, applications, and the seed events that drive them.
    pub fn build(&self) -> Result<Sim, ScenarioError> {
        let mut sim = Sim::new(self.horizon(), self.seed);
        let speed_mps = mph_to_mps(self.corridor.speed_mph);

        if self.stack.includes_dsrc() {
            sim.dsrc = Some(DsrcStack::new(self.dsrc.clone()));
        }
        if self.stack.includes_mmwave() {
            sim.mmw = Some(MmwaveStack::new(self.mmw.clone()));
            sim.q
                .schedule(SimTime::from_micros(self.mmw.assoc_period_us), Ev::AssocTick)
                .expect("assoc tick in future");
        }

        for (k, &(x, y)) in self.rsu_positions.iter().enumerate() {
            let id = NodeId(RSU_ID_BASE + k as u32);
            sim.world.add(id, NodeKind::Rsu, format!("rsu{k}"));
            sim.mob.insert_static(id, x, y);
            if let Some(d) = sim.dsrc.as_mut() {
                d.attach(id);
            }
        }

        let mut bs_positions = self.bs_positions.clone();
        if bs_positions.is_empty() && self.app == AppSel::Fcw && self.stack.includes_mmwave() {
            // Place the relay cell so the braking vehicle is exactly the
            // configured distance away at trigger time.
            bs_positions.push((speed_mps * self.fcw.trigger_s, self.fcw.bs_distance_m));
        }
        for (k, &(x, y)) in bs_positions.iter().enumerate() {
            let id = NodeId(BS_ID_BASE + k as u32);
            sim.world.add(id, NodeKind::BaseStation, format!("bs{k}"));
            sim.mob.insert_static(id, x, y);
            if let Some(m) = sim.mmw.as_mut() {
                m.add_bs(id, (x, y));
            }
        }

        let mut next_vehicle: u32 = 1;
        if self.app == AppSel::Fcw {
            // Leader at x=0 moving +x; followers trail at fixed gaps.
            let leader = NodeId(next_vehicle);
            next_vehicle += 1;
            let mut followers = Vec::new();
            for i in 0..self.fcw.followers {
                followers.push(NodeId(next_vehicle + i));
            }
            next_vehicle += self.fcw.followers;

            let add_vehicle = |sim: &mut Sim, id: NodeId, label: String, x0: f64| {
                let samples = [
                    TraceSample {
                        t: SimTime::ZERO,
                        vehicle: u64::from(id.0),
                        x_m: x0,
                        y_m: 0.0,
                        speed_mps,
                    },
                    TraceSample {
                        t: self.horizon(),
                        vehicle: u64::from(id.0),
                        x_m: x0 + speed_mps * self.duration_s,
                        y_m: 0.0,
                        speed_mps,
                    },
                ];
                sim.world.add(id, NodeKind::Vehicle, label);
                sim.mob.insert_moving(id, &samples);
                sim.q.schedule(SimTime::ZERO, Ev::NodeEnter(id)).expect("enter at start");
            };
            add_vehicle(&mut sim, leader, "leader".into(), 0.0);
            for (i, &f) in followers.iter().enumerate() {
                add_vehicle(&mut sim, f, format!("follower{i}"), -self.fcw.follower_gap_m * (i + 1) as f64);
            }

            let stag = match self.stack {
                StackSel::Dsrc => StackTag::Dsrc,
                StackSel::Mmwave => StackTag::Mmwave,
                StackSel::Both => unreachable!("rejected in validation"),
            };
            let trigger = SimTime::from_micros((self.fcw.trigger_s * 1e6).round() as u64);
            sim.fcw = Some(FcwState::new(leader, followers, stag, self.fcw.warning_bytes, trigger));
            sim.q.schedule(trigger, Ev::FcwTrigger).expect("trigger before horizon");
        }

        // Background / collection traffic: an explicit trace file, or
        // synthesized arrivals when a rate is configured.
        let samples: Vec<TraceSample> = match &self.corridor.trace {
            Some(path) => {
                if !path.exists() {
                    return Err(ScenarioError::MissingTrace(path.clone()));
                }
                load_trace(path)
                    .map_err(|source| ScenarioError::Trace { path: path.clone(), source })?
            }
            None if self.corridor.rate_vpm > 0.0 => synth_corridor(
                self.corridor.rate_vpm,
                self.corridor.speed_mph,
                self.corridor.length_m,
                self.duration_s,
                sim.rng.stream("corridor"),
            )
            .expect("validated corridor parameters"),
            None => Vec::new(),
        };
        for (orig, track) in group_by_vehicle(&samples) {
            let id = NodeId(next_vehicle);
            next_vehicle += 1;
            sim.world.add(id, NodeKind::Vehicle, format!("veh{orig}"));
            sim.mob.insert_moving(id, &track);
            if let Some((t0, t1)) = sim.mob.span(id) {
                sim.q.schedule(t0, Ev::NodeEnter(id)).expect("enter within run");
                sim.q.schedule(t1, Ev::NodeExit(id)).expect("exit after enter");
            }
        }

        sim.enter = match self.app {
            AppSel::Fcw => EnterActions {
                dsrc_attach: self.stack.includes_dsrc(),
                mmw_attach: self.stack.includes_mmwave(),
                ..Default::default()
            },
            AppSel::Datacol => EnterActions {
                dsrc_attach: self.stack.includes_dsrc(),
                dsrc_beacon: self.stack.includes_dsrc() && !self.datacol.routed,
                dsrc_data: (self.stack.includes_dsrc() && self.datacol.routed)
                    .then_some((self.datacol.packet_bytes, self.datacol.rate_kbps)),
                mmw_attach: self.stack.includes_mmwave(),
                mmw_cbr: self
                    .stack
                    .includes_mmwave()
                    .then_some((self.datacol.packet_bytes, self.datacol.rate_kbps)),
            },
        };

        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_parse_and_match_module_defaults() {
        let sc = Scenario::from_text("").unwrap();
        assert_eq!(sc.seed, 1);
        assert_eq!(sc.stack, StackSel::Dsrc);
        assert_eq!(sc.app, AppSel::Datacol);
        let d = DsrcParams::default();
        assert_eq!(sc.dsrc.slot_us, d.slot_us);
        assert_eq!(sc.dsrc.cw_min, d.cw_min);
        assert!((sc.dsrc.budget.tx_power_dbm - d.budget.tx_power_dbm).abs() < 1e-12);
        let m = MmwaveParams::default();
        assert_eq!(sc.mmw.slot_us, m.slot_us);
        assert_eq!(sc.mmw.slot_payload_bits, m.slot_payload_bits);
        // 200 bytes at 16 kbit/s -> one packet every 100 ms.
        assert_eq!(sc.dsrc.bsm_period_us, 100_000);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        let err = Scenario::from_text("dsrc.slot_sz = 13").unwrap_err();
        assert!(err.to_string().contains("dsrc.slot_sz"), "{err}");
        let err = Scenario::from_text("dsrc.slot_us = thirteen").unwrap_err();
        assert!(err.to_string().contains("dsrc.slot_us"), "{err}");
        assert!(err.to_string().contains("thirteen"), "{err}");
        let err = Scenario::from_text("just a line").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn cross_field_rules_reject_bad_combinations() {
        let err = Scenario::from_text("app = fcw\nstack = both").unwrap_err();
        assert!(err.to_string().contains("stack"), "{err}");
        let err = Scenario::from_text("app = datacol\nstack = mmwave").unwrap_err();
        assert!(err.to_string().contains("infra.bs_positions"), "{err}");
        let err = Scenario::from_text("infra.rsu_positions =").unwrap_err();
        assert!(err.to_string().contains("infra.rsu_positions"), "{err}");
        let err =
            Scenario::from_text("app = fcw\nstack = dsrc\nfcw.trigger_s = 20\nduration_s = 5")
                .unwrap_err();
        assert!(err.to_string().contains("fcw.trigger_s"), "{err}");
    }

    #[test]
    fn config_hash_tracks_semantics_not_presentation() {
        let base = Scenario::from_text("").unwrap();
        // Same value, different spelling: identical hash.
        let respelled = Scenario::from_text("duration_s = 10.000\nseed = 01").unwrap();
        assert_eq!(base.config_hash(), respelled.config_hash());
        // Different value: different hash.
        let other = Scenario::from_text("seed = 2").unwrap();
        assert_ne!(base.config_hash(), other.config_hash());
        // Output directory is excluded.
        let moved = Scenario::from_text("output_dir = elsewhere/").unwrap();
        assert_eq!(base.config_hash(), moved.config_hash());
    }

    #[test]
    fn dump_roundtrips_exactly() {
        let sc = Scenario::preset("datacol_mmwave").unwrap();
        let again = Scenario::from_text(&sc.dump()).unwrap();
        assert_eq!(sc.dump(), again.dump());
        assert_eq!(sc.config_hash(), again.config_hash());
    }

    #[test]
    fn every_preset_parses_and_builds() {
        for name in PRESET_NAMES {
            let sc = Scenario::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            sc.build().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(Scenario::preset("no_such").is_err());
    }

    #[test]
    fn relay_cell_sits_at_the_configured_distance_at_trigger() {
        let sc = Scenario::preset("fcw_mmwave_1450ft").unwrap();
        let sim = sc.build().unwrap();
        let bss = sim.world.ids_of(NodeKind::BaseStation);
        assert_eq!(bss.len(), 1);
        let trigger = SimTime::from_micros(1_000_000);
        let leader = sim.mob.position_at(NodeId(1), trigger).unwrap();
        let bs = sim.mob.position_at(bss[0], trigger).unwrap();
        let d = crate::mobility::distance(leader, bs);
        assert!((d - 441.96).abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn position_lists_parse_and_reject_garbage() {
        let sc =
            Scenario::from_text("infra.rsu_positions = 200,6; 600 , 6 ;1000,6").unwrap();
        assert_eq!(sc.rsu_positions, vec![(200.0, 6.0), (600.0, 6.0), (1000.0, 6.0)]);
        let err = Scenario::from_text("infra.rsu_positions = 200;6").unwrap_err();
        assert!(err.to_string().contains("infra.rsu_positions"), "{err}");
    }

    #[test]
    fn missing_trace_is_reported_with_its_path() {
        let sc = Scenario::from_text("corridor.trace = /no/such/trace.csv").unwrap();
        let Err(err) = sc.build() else { panic!("build should fail") };
        assert!(matches!(err, ScenarioError::MissingTrace(_)));
        assert!(err.to_string().contains("/no/such/trace.csv"), "{err}");
    }

    #[test]
    fn sweep_override_revalidates() {
        let sc = Scenario::preset("fcw_dsrc").unwrap();
        let faster = sc.with_override("corridor.speed_mph", "55").unwrap();
        assert!((faster.corridor.speed_mph - 55.0).abs() < 1e-12);
        assert_ne!(sc.config_hash(), faster.config_hash());
        assert!(sc.with_override("corridor.speed_mph", "-3").is_err());
        assert!(sc.with_override("no.such.key", "1").is_err());
    }
    proptest! {
        #[test]
        fn canonical_form_ignores_numeric_presentation(
            seed in proptest::num::u64::ANY,
            duration_tenths in 10_u32..3000,
            speed_tenths in 50_u32..800,
            rate_tenths in 10_u32..600,
            pad in 0_usize..8,
        ) {
            // Tenth-of-a-unit values survive fixed-point formatting exactly,
            // so every variant below spells the *same* number.
            let duration_s = duration_tenths as f64 / 10.0;
            let speed_mph = speed_tenths as f64 / 10.0;
            let rate_vpm = rate_tenths as f64 / 10.0;
            let plain = format!(
                "seed = {seed}\nduration_s = {duration_s:?}\ncorridor.speed_mph = {speed_mph:?}\ncorridor.rate_vpm = {rate_vpm:?}\n"
            );
            // Same values dressed differently: zero-padded integer, fixed-point
            // floats, shuffled order, stray whitespace, and a comment line.
            let dressed = format!(
                "# generated\ncorridor.rate_vpm = {rate_vpm:.6}\n\n  corridor.speed_mph={speed_mph:.6}\nduration_s =  {duration_s:.6}\nseed = {:0width$}\n",
                seed,
                width = pad + 1,
            );
            let a = Scenario::from_text(&plain).expect("plain text parses");
            let b = Scenario::from_text(&dressed).expect("dressed text parses");
            prop_assert_eq!(a.dump(), b.dump());
            prop_assert_eq!(a.config_hash(), b.config_hash());

            // The canonical dump is a fixed point of the parser.
            let again = Scenario::from_text(&a.dump()).expect("dump re-parses");
            prop_assert_eq!(again.dump(), a.dump());
            prop_assert_eq!(again.config_hash(), a.config_hash());

            // Where results land is not part of what they are.
            let moved = a.with_override("output_dir", "elsewhere/over-the-rainbow").unwrap();
            prop_assert_eq!(moved.config_hash(), a.config_hash());
            prop_assert!(moved.dump() != a.dump());
        }
    }

}
