//! Per-subframe scheduling records to per-slot slice states and PRB demands.
//!
//! The chain is: raw records → per-second user counts and mean downlink MCS
//! → slot sampling every `D` seconds with state quantization → demand from
//! the per-MCS rate table.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Records reporting more PRBs than a 20 MHz carrier holds are decode errors.
pub const MAX_PRB_PER_SUBFRAME: u32 = 110;

pub const RAW_COLUMNS: [&str; 7] = [
    "timestamp",
    "sfn",
    "subframe",
    "rnti",
    "direction",
    "mcs_idx",
    "nof_prb",
];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("records are not sorted by timestamp (row {0})")]
    UnsortedInput(usize),
    #[error("no downlink samples at second {0}")]
    NoSamples(i64),
    #[error("MCS index {0} is not covered by the demand table")]
    McsOutOfTable(u32),
    #[error("invalid demand table: {0}")]
    InvalidTable(String),
    #[error("invalid aggregation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Uplink = 0,
    Downlink = 1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub timestamp: f64,
    pub rnti: u32,
    pub direction: Direction,
    pub mcs_idx: u8,
    pub nof_prb: u32,
}

impl RawRecord {
    pub fn downlink(timestamp: f64, rnti: u32, mcs_idx: u8) -> Self {
        Self {
            timestamp,
            rnti,
            direction: Direction::Downlink,
            mcs_idx,
            nof_prb: 1,
        }
    }

    pub fn second(&self) -> i64 {
        self.timestamp.floor() as i64
    }
}

/// Slice state `X_i(t)`: quantized connected users and mean MCS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceState {
    pub users: u32,
    pub mcs: u32,
}

impl SliceState {
    pub fn new(users: u32, mcs: u32) -> Self {
        Self { users, mcs }
    }
}

/// One slot of a slice: its state and the PRB demand derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSample {
    pub state: SliceState,
    pub demand: u32,
}

/// Values indexed by consecutive integer seconds starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSecond<T> {
    pub start: i64,
    pub values: Vec<T>,
}

impl<T> PerSecond<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> i64 {
        self.start + self.values.len() as i64 - 1
    }
}

/// Reads raw scheduling records. Records with more than
/// [`MAX_PRB_PER_SUBFRAME`] PRBs are dropped with a warning.
pub fn read_raw_records<R: Read>(reader: R) -> Result<Vec<RawRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TraceError::MissingColumn(name.to_string()))
    };
    let ts = col("timestamp")?;
    col("sfn")?;
    col("subframe")?;
    let rnti = col("rnti")?;
    let dir = col("direction")?;
    let mcs = col("mcs_idx")?;
    let prb = col("nof_prb")?;

    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec?;
        let field = |idx: usize, name: &str| {
            rec.get(idx).ok_or_else(|| TraceError::Malformed {
                row,
                reason: format!("missing `{name}`"),
            })
        };
        let bad = |name: &str, raw: &str| TraceError::Malformed {
            row,
            reason: format!("cannot parse `{name}` from {raw:?}"),
        };
        let raw = field(ts, "timestamp")?;
        let timestamp: f64 = raw.parse().map_err(|_| bad("timestamp", raw))?;
        if !timestamp.is_finite() {
            return Err(bad("timestamp", raw));
        }
        let raw = field(rnti, "rnti")?;
        let rnti_v: u32 = raw.parse().map_err(|_| bad("rnti", raw))?;
        let raw = field(dir, "direction")?;
        let direction = match raw {
            "0" => Direction::Uplink,
            "1" => Direction::Downlink,
            _ => return Err(bad("direction", raw)),
        };
        let raw = field(mcs, "mcs_idx")?;
        let mcs_idx: u8 = raw.parse().map_err(|_| bad("mcs_idx", raw))?;
        if mcs_idx > 31 {
            return Err(TraceError::Malformed {
                row,
                reason: format!("mcs_idx {mcs_idx} outside [0, 31]"),
            });
        }
        let raw = field(prb, "nof_prb")?;
        let nof_prb: u32 = raw.parse().map_err(|_| bad("nof_prb", raw))?;
        if nof_prb > MAX_PRB_PER_SUBFRAME {
            dropped += 1;
            continue;
        }
        out.push(RawRecord {
            timestamp,
            rnti: rnti_v,
            direction,
            mcs_idx,
            nof_prb,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} records with more than {MAX_PRB_PER_SUBFRAME} PRBs");
    }
    Ok(out)
}

/// Reads a precomputed `timestamp,users` per-second series. Gaps hold the
/// previous value.
pub fn read_user_counts<R: Read>(reader: R) -> Result<PerSecond<u32>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ts = headers
        .iter()
        .position(|h| h == "timestamp")
        .ok_or_else(|| TraceError::MissingColumn("timestamp".into()))?;
    let users = headers
        .iter()
        .position(|h| h == "users")
        .ok_or_else(|| TraceError::MissingColumn("users".into()))?;
    let mut points: BTreeMap<i64, u32> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let t: f64 = rec
            .get(ts)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TraceError::Malformed {
                row,
                reason: "cannot parse `timestamp`".into(),
            })?;
        let u: u32 = rec
            .get(users)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TraceError::Malformed {
                row,
                reason: "cannot parse `users`".into(),
            })?;
        points.insert(t.floor() as i64, u);
    }
    let Some((&start, _)) = points.iter().next() else {
        return Ok(PerSecond {
            start: 0,
            values: Vec::new(),
        });
    };
    let end = *points.keys().next_back().unwrap();
    let mut values = Vec::with_capacity((end - start + 1) as usize);
    let mut last = 0;
    for t in start..=end {
        if let Some(&u) = points.get(&t) {
            last = u;
        }
        values.push(last);
    }
    Ok(PerSecond { start, values })
}

fn check_sorted(records: &[RawRecord]) -> Result<(), TraceError> {
    for (i, w) in records.windows(2).enumerate() {
        if w[1].timestamp < w[0].timestamp {
            return Err(TraceError::UnsortedInput(i + 1));
        }
    }
    Ok(())
}

/// Seconds covered by `records`, `None` for an empty stream.
pub fn record_span(records: &[RawRecord]) -> Option<(i64, i64)> {
    Some((records.first()?.second(), records.last()?.second()))
}

/// Distinct downlink RNTIs seen in the trailing `window_seconds` seconds,
/// i.e. records whose second lies in `(t − window, t]`, for every second `t`
/// of `span` (defaults to the records' own span).
pub fn count_connected_users(
    records: &[RawRecord],
    window_seconds: u32,
    span: Option<(i64, i64)>,
) -> Result<PerSecond<u32>, TraceError> {
    if window_seconds == 0 {
        return Err(TraceError::InvalidConfig("window_seconds must be at least 1".into()));
    }
    check_sorted(records)?;
    let Some((start, end)) = span.or_else(|| record_span(records)) else {
        return Ok(PerSecond {
            start: 0,
            values: Vec::new(),
        });
    };
    let window = i64::from(window_seconds);
    let mut last_seen: HashMap<u32, i64> = HashMap::new();
    let mut expiry: VecDeque<(i64, u32)> = VecDeque::new();
    let mut values = Vec::with_capacity((end - start + 1).max(0) as usize);
    let mut next = 0usize;
    for t in start..=end {
        while next < records.len() && records[next].second() <= t {
            let r = &records[next];
            next += 1;
            if r.direction != Direction::Downlink || r.second() <= t - window {
                continue;
            }
            last_seen.insert(r.rnti, r.second());
            expiry.push_back((r.second(), r.rnti));
        }
        while let Some(&(s, rnti)) = expiry.front() {
            if s > t - window {
                break;
            }
            expiry.pop_front();
            if last_seen.get(&rnti) == Some(&s) {
                last_seen.remove(&rnti);
            }
        }
        values.push(last_seen.len() as u32);
    }
    Ok(PerSecond { start, values })
}

/// Mean downlink MCS index over records stamped with `second`.
pub fn average_mcs(records: &[RawRecord], second: i64) -> Result<f64, TraceError> {
    let (sum, n) = records
        .iter()
        .filter(|r| r.direction == Direction::Downlink && r.second() == second)
        .fold((0u64, 0u64), |(s, n), r| (s + u64::from(r.mcs_idx), n + 1));
    if n == 0 {
        return Err(TraceError::NoSamples(second));
    }
    Ok(sum as f64 / n as f64)
}

/// Mean downlink MCS for every second of `span`. Seconds without downlink
/// records hold the previous value; leading gaps take the first observed
/// value.
pub fn mcs_series(records: &[RawRecord], span: (i64, i64)) -> Result<PerSecond<f64>, TraceError> {
    check_sorted(records)?;
    let mut per_second: BTreeMap<i64, (u64, u64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.direction == Direction::Downlink) {
        let e = per_second.entry(r.second()).or_default();
        e.0 += u64::from(r.mcs_idx);
        e.1 += 1;
    }
    let Some((_, &(s0, n0))) = per_second.iter().next() else {
        return Err(TraceError::NoSamples(span.0));
    };
    let mut last = s0 as f64 / n0 as f64;
    let values = (span.0..=span.1)
        .map(|t| {
            if let Some(&(s, n)) = per_second.get(&t) {
                last = s as f64 / n as f64;
            }
            last
        })
        .collect();
    Ok(PerSecond { start: span.0, values })
}

/// Deliverable downlink rate per PRB for each MCS index.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMapTable {
    rates: BTreeMap<u32, f64>,
    mimo_factor: f64,
}

/// Single-layer kbps per PRB at even MCS indices 0, 2, …, 28: the one-PRB
/// transport block size of the LTE TBS table, in bits per 1 ms subframe,
/// after the MCS to TBS-index mapping. Odd indices are interpolated.
const DEFAULT_ANCHORS: [(u32, f64); 15] = [
    (0, 16.0),
    (2, 32.0),
    (4, 56.0),
    (6, 88.0),
    (8, 120.0),
    (10, 136.0),
    (12, 176.0),
    (14, 224.0),
    (16, 280.0),
    (18, 328.0),
    (20, 376.0),
    (22, 440.0),
    (24, 520.0),
    (26, 584.0),
    (28, 712.0),
];

impl DemandMapTable {
    pub fn new(rates: BTreeMap<u32, f64>, mimo_factor: f64) -> Result<Self, TraceError> {
        if rates.is_empty() {
            return Err(TraceError::InvalidTable("table is empty".into()));
        }
        if !(mimo_factor.is_finite() && mimo_factor > 0.0) {
            return Err(TraceError::InvalidTable(format!(
                "mimo factor must be positive, got {mimo_factor}"
            )));
        }
        let mut prev = 0.0;
        for (&mcs, &rate) in &rates {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(TraceError::InvalidTable(format!(
                    "rate for MCS {mcs} must be positive, got {rate}"
                )));
            }
            if rate < prev {
                return Err(TraceError::InvalidTable(format!("rate decreases at MCS {mcs}")));
            }
            prev = rate;
        }
        Ok(Self { rates, mimo_factor })
    }

    /// Default approximation for MCS 0–28 with 2x2 MIMO.
    pub fn default_lte() -> Self {
        let mut rates = BTreeMap::new();
        for pair in DEFAULT_ANCHORS.windows(2) {
            let (m0, r0) = pair[0];
            let (m1, r1) = pair[1];
            for m in m0..m1 {
                let f = f64::from(m - m0) / f64::from(m1 - m0);
                rates.insert(m, r0 + f * (r1 - r0));
            }
        }
        let (last_m, last_r) = DEFAULT_ANCHORS[DEFAULT_ANCHORS.len() - 1];
        rates.insert(last_m, last_r);
        Self::new(rates, 2.0).expect("default table is valid")
    }

    /// Reads `mcs_idx,kbps_per_prb` rows of single-layer rates.
    pub fn from_csv<R: Read>(reader: R, mimo_factor: f64) -> Result<Self, TraceError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for name in ["mcs_idx", "kbps_per_prb"] {
            if !headers.iter().any(|h| h == name) {
                return Err(TraceError::MissingColumn(name.into()));
            }
        }
        let mcs_col = headers.iter().position(|h| h == "mcs_idx").unwrap();
        let rate_col = headers.iter().position(|h| h == "kbps_per_prb").unwrap();
        let mut rates = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse =
                || -> Option<(u32, f64)> { Some((rec.get(mcs_col)?.parse().ok()?, rec.get(rate_col)?.parse().ok()?)) };
            let (m, r) = parse().ok_or_else(|| TraceError::Malformed {
                row: i + 2,
                reason: "expected integer mcs_idx and numeric kbps_per_prb".into(),
            })?;
            rates.insert(m, r);
        }
        Self::new(rates, mimo_factor)
    }

    /// Effective kbps per PRB (single-layer rate times the MIMO factor).
    pub fn rate(&self, mcs: u32) -> Option<f64> {
        self.rates.get(&mcs).map(|r| r * self.mimo_factor)
    }

    pub fn min_rate(&self) -> f64 {
        self.rates.values().next().copied().unwrap_or(f64::NAN) * self.mimo_factor
    }

    pub fn mimo_factor(&self) -> f64 {
        self.mimo_factor
    }
}

/// Slack absorbing interpolation round-off before taking a ceiling.
const CEIL_SLACK: f64 = 1e-9;

/// PRBs needed to give each connected user `bitrate_kbps`: users times the
/// per-user PRB count at the state's mean MCS.
pub fn demand_map(state: SliceState, bitrate_kbps: f64, table: &DemandMapTable) -> Result<u32, TraceError> {
    if state.users == 0 {
        return Ok(0);
    }
    let rate = table.rate(state.mcs).ok_or(TraceError::McsOutOfTable(state.mcs))?;
    let per_user = (bitrate_kbps / rate - CEIL_SLACK).ceil().max(0.0) as u32;
    Ok(per_user * state.users)
}

/// Rounds `value` up to a multiple of `step`.
pub fn ceil_to_multiple(value: u32, step: u32) -> u32 {
    value.div_ceil(step) * step
}

pub fn floor_to_multiple(value: f64, step: u32) -> u32 {
    let step = f64::from(step);
    ((value / step).floor() * step).max(0.0) as u32
}

/// Quantization steps and QoS target for one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Slot length `D` in seconds.
    pub slot_seconds: u32,
    pub users_step: u32,
    pub mcs_step: u32,
    pub demand_step: u32,
    /// Per-user target bitrate, kbps.
    pub bitrate_kbps: f64,
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.slot_seconds == 0 || self.users_step == 0 || self.mcs_step == 0 || self.demand_step == 0 {
            return Err(TraceError::InvalidConfig(
                "slot length and quantization steps must be at least 1".into(),
            ));
        }
        if !(self.bitrate_kbps.is_finite() && self.bitrate_kbps > 0.0) {
            return Err(TraceError::InvalidConfig(format!(
                "bitrate must be positive, got {}",
                self.bitrate_kbps
            )));
        }
        Ok(())
    }
}

/// Demand of a quantized state: the demand map rounded up to the demand step.
pub fn slot_demand(state: SliceState, cfg: &AggregationConfig, table: &DemandMapTable) -> Result<u32, TraceError> {
    Ok(ceil_to_multiple(
        demand_map(state, cfg.bitrate_kbps, table)?,
        cfg.demand_step,
    ))
}

/// Quantizes a raw `(users, mean MCS)` pair to a slice state.
pub fn quantize_state(users: f64, mcs: f64, cfg: &AggregationConfig) -> SliceState {
    SliceState {
        users: floor_to_multiple(users, cfg.users_step),
        mcs: floor_to_multiple(mcs, cfg.mcs_step).min(31),
    }
}

/// Samples a per-second `(users, mean MCS)` series every `D` entries,
/// quantizes each sampled state and derives its demand.
pub fn aggregate(
    series: &[(f64, f64)],
    cfg: &AggregationConfig,
    table: &DemandMapTable,
) -> Result<Vec<SlotSample>, TraceError> {
    cfg.validate()?;
    series
        .iter()
        .step_by(cfg.slot_seconds as usize)
        .map(|&(users, mcs)| {
            let state = quantize_state(users, mcs, cfg);
            Ok(SlotSample {
                state,
                demand: slot_demand(state, cfg, table)?,
            })
        })
        .collect()
}

/// Raw records (plus an optional precomputed user-count series, which takes
/// precedence over the windowed RNTI count) to a slot series.
pub fn extract_slot_series(
    records: &[RawRecord],
    users_override: Option<&PerSecond<u32>>,
    window_seconds: u32,
    cfg: &AggregationConfig,
    table: &DemandMapTable,
) -> Result<Vec<SlotSample>, TraceError> {
    cfg.validate()?;
    let span = match users_override {
        Some(u) if !u.is_empty() => (u.start, u.end()),
        _ => match record_span(records) {
            Some(s) => s,
            None => {
                log::warn!("no records; emitting an empty slot series");
                return Ok(Vec::new());
            }
        },
    };
    if !records.iter().any(|r| r.direction == Direction::Downlink) {
        log::warn!("no downlink records; emitting an empty slot series");
        return Ok(Vec::new());
    }
    let users: Vec<u32> = match users_override {
        Some(u) if !u.is_empty() => u.values.clone(),
        _ => count_connected_users(records, window_seconds, Some(span))?.values,
    };
    let mcs = mcs_series(records, span)?;
    let joined: Vec<(f64, f64)> = users
        .iter()
        .zip(&mcs.values)
        .map(|(&u, &m)| (f64::from(u), m))
        .collect();
    aggregate(&joined, cfg, table)
}

pub const SLOT_COLUMNS: [&str; 4] = ["slot", "users_q", "mcs_q", "demand_prb"];

pub fn write_slot_series<W: Write>(writer: W, series: &[SlotSample]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SLOT_COLUMNS)?;
    for (slot, s) in series.iter().enumerate() {
        w.write_record(&[
            slot.to_string(),
            s.state.users.to_string(),
            s.state.mcs.to_string(),
            s.demand.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_slot_series<R: Read>(reader: R) -> Result<Vec<SlotSample>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = SLOT_COLUMNS
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| TraceError::MissingColumn(name.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let get = |k: usize| -> Result<u32, TraceError> {
            rec.get(idx[k])
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TraceError::Malformed {
                    row,
                    reason: format!("cannot parse `{}`", SLOT_COLUMNS[k]),
                })
        };
        let slot = get(0)? as usize;
        if slot != out.len() {
            return Err(TraceError::Malformed {
                row,
                reason: format!("expected slot {}, found {slot}", out.len()),
            });
        }
        out.push(SlotSample {
            state: SliceState::new(get(1)?, get(2)?),
            demand: get(3)?,
        });
    }
    Ok(out)
}
