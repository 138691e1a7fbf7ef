//! Experiment driver: scenario files, synthetic workloads, trial and
//! regular phases under each scheme, metrics and report tables.

mod report;
mod run;
mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{summarize, write_outputs, write_report, write_slots, write_summary, SummaryRow};
pub use run::{
    acceptance_ratios, build_cases, rejection_ratios, run_case, run_scheme, simulate, sweep, Case, CaseResult, Metrics,
    SchemeRun, SlotLog,
};
pub use synth::{random_chain, splitmix, synthesize, ChainSpec};

use crate::anomaly::{AnomalyError, AnomalySpec};
use crate::markov::{MarkovError, TransitionMatrix};
use crate::scheduler::{GrantSpace, SchedulerError, Scheme};
use crate::trace::{
    read_slot_series, slot_demand, AggregationConfig, DemandMapTable, SliceState, SlotSample, TraceError,
};
use crate::trial::{fit_transitions, fit_trial, ChainKind, TransitionCounts, TrialConfig, TrialError, TrialOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        HarnessError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True when the error reflects a broken engine invariant rather than
    /// bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            HarnessError::Scheduler(SchedulerError::CapacityExceeded { .. })
                | HarnessError::Scheduler(SchedulerError::PreconditionViolated { .. })
        )
    }
}

fn default_true() -> bool {
    true
}
fn default_one() -> u32 {
    1
}
fn default_slot_seconds() -> u32 {
    10
}
fn default_trial_slots() -> usize {
    7200
}
fn default_regular_slots() -> usize {
    1800
}
fn default_alpha() -> f64 {
    0.05
}
fn default_mimo() -> f64 {
    2.0
}

/// Per-MCS single-layer rates overriding the built-in table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    #[serde(default)]
    pub rates: Option<BTreeMap<u32, f64>>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_mimo")]
    pub mimo_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// Slot-series CSV files for the two phases.
    Series { trial: PathBuf, regular: PathBuf },
    /// Independent user-count and MCS chains.
    Synthetic { users: ChainSpec, mcs: ChainSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub name: String,
    pub bitrate_kbps: f64,
    pub p_h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_one")]
    pub users_step: u32,
    #[serde(default = "default_one")]
    pub mcs_step: u32,
    #[serde(default = "default_one")]
    pub demand_step: u32,
    pub source: SourceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSettings {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub corrected_threshold: bool,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            corrected_threshold: false,
        }
    }
}

/// Grid of anomaly strengths and window sizes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remove_k: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Slot length in seconds; informational only.
    #[serde(default = "default_slot_seconds")]
    pub slot_seconds: u32,
    #[serde(default = "default_trial_slots")]
    pub trial_slots: usize,
    #[serde(default = "default_regular_slots")]
    pub regular_slots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_table: Option<TableSpec>,
    pub slices: Vec<SliceSpec>,
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub detector: DetectorSettings,
    #[serde(default = "default_true")]
    pub transform: bool,
    #[serde(default)]
    pub chain: ChainKind,
    #[serde(default)]
    pub grant_space: GrantSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub report_timing: bool,
    /// Directory relative series paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::config(path, e.into_inner().to_string())
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Replaces every seed in the scenario.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(a) = &mut self.anomaly {
            a.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.slices.is_empty() {
            return Err(HarnessError::config("slices", "at least one slice is required"));
        }
        if self.schemes.is_empty() {
            return Err(HarnessError::config("schemes", "at least one scheme is required"));
        }
        if self.trial_slots < 2 {
            return Err(HarnessError::config("trial_slots", "at least 2 slots are required"));
        }
        if self.regular_slots == 0 {
            return Err(HarnessError::config("regular_slots", "must be positive"));
        }
        let a = self.detector.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(HarnessError::config("detector.alpha", format!("{a} outside (0, 1)")));
        }
        for (i, s) in self.slices.iter().enumerate() {
            if !(s.p_h > 0.0 && s.p_h <= 1.0) {
                return Err(HarnessError::config(
                    format!("slices[{i}].p_h"),
                    format!("{} outside (0, 1]", s.p_h),
                ));
            }
            if let Some(a) = s.alpha {
                if !(a > 0.0 && a < 1.0) {
                    return Err(HarnessError::config(
                        format!("slices[{i}].alpha"),
                        format!("{a} outside (0, 1)"),
                    ));
                }
            }
            self.aggregation(i)
                .validate()
                .map_err(|e| HarnessError::config(format!("slices[{i}]"), e.to_string()))?;
            if let SourceSpec::Synthetic { users, mcs } = &s.source {
                users
                    .validate()
                    .map_err(|r| HarnessError::config(format!("slices[{i}].source.users"), r))?;
                mcs.validate()
                    .map_err(|r| HarnessError::config(format!("slices[{i}].source.mcs"), r))?;
            }
        }
        if let Some(an) = &self.anomaly {
            if an.slice >= self.slices.len() {
                return Err(HarnessError::config(
                    "anomaly.slice",
                    format!("no slice {} among {}", an.slice, self.slices.len()),
                ));
            }
        }
        if let Some(sw) = &self.sweep {
            if self.anomaly.is_none() {
                return Err(HarnessError::config("sweep", "a sweep needs an `anomaly` entry"));
            }
            if !sw.beta.is_empty() && !sw.remove_k.is_empty() {
                return Err(HarnessError::config(
                    "sweep",
                    "give either `beta` or `remove_k`, not both",
                ));
            }
            if let Some(b) = sw.beta.iter().find(|b| !(0.0..1.0).contains(*b)) {
                return Err(HarnessError::config("sweep.beta", format!("{b} outside [0, 1)")));
            }
            if let Some(n) = sw.n.iter().find(|&&n| n < 2) {
                return Err(HarnessError::config("sweep.n", format!("window {n} below 2")));
            }
        }
        Ok(())
    }

    pub fn aggregation(&self, slice: usize) -> AggregationConfig {
        let s = &self.slices[slice];
        AggregationConfig {
            slot_seconds: self.slot_seconds,
            users_step: s.users_step,
            mcs_step: s.mcs_step,
            demand_step: s.demand_step,
            bitrate_kbps: s.bitrate_kbps,
        }
    }

    pub fn table(&self) -> Result<DemandMapTable, HarnessError> {
        let Some(spec) = &self.demand_table else {
            return Ok(DemandMapTable::default_lte());
        };
        let table = match (&spec.rates, &spec.csv) {
            (Some(r), None) => DemandMapTable::new(r.clone(), spec.mimo_factor)?,
            (None, Some(p)) => {
                let path = self.resolve(p);
                let f = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
                DemandMapTable::from_csv(f, spec.mimo_factor)?
            }
            _ => {
                return Err(HarnessError::config(
                    "demand_table",
                    "give exactly one of `rates` or `csv`",
                ))
            }
        };
        Ok(table)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Schemes to run: the listed ones plus one tested scheme per window
    /// size in the sweep grid.
    pub fn effective_schemes(&self) -> Vec<Scheme> {
        let mut out: Vec<Scheme> = Vec::new();
        let extra = self.sweep.iter().flat_map(|s| s.n.iter().map(|&n| Scheme::ShT(n)));
        for s in self.schemes.iter().copied().chain(extra) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn slice_alpha(&self, slice: usize) -> f64 {
        self.slices[slice].alpha.unwrap_or(self.detector.alpha)
    }
}

/// Trial outcome plus everything the regular phase needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub trial: Vec<Vec<SlotSample>>,
    pub regular: Vec<Vec<SlotSample>>,
    pub outcome: TrialOutcome,
    /// Per-slice chains of the user-count component, fitted on the trial.
    pub user_chains: Vec<TransitionMatrix<u32>>,
    /// Per-slice chains of the joint (users, MCS) state.
    pub joint_chains: Vec<TransitionMatrix<SliceState>>,
    pub aggregation: Vec<AggregationConfig>,
    pub table: DemandMapTable,
}

impl Prepared {
    pub fn demand_of(&self, slice: usize, state: SliceState) -> Result<u32, HarnessError> {
        Ok(slot_demand(state, &self.aggregation[slice], &self.table)?)
    }
}

fn read_series(path: &Path) -> Result<Vec<SlotSample>, HarnessError> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(read_slot_series(f)?)
}

/// Loads or generates both phases and runs the trial estimation.
pub fn prepare(scenario: &Scenario) -> Result<Prepared, HarnessError> {
    let table = scenario.table()?;
    let synthetic = synthesize(scenario, &table)?;
    let mut trial = Vec::new();
    let mut regular = Vec::new();
    for (i, s) in scenario.slices.iter().enumerate() {
        match &s.source {
            SourceSpec::Series { trial: t, regular: r } => {
                let t = read_series(&scenario.resolve(t))?;
                let r = read_series(&scenario.resolve(r))?;
                trial.push(t);
                regular.push(r);
            }
            SourceSpec::Synthetic { .. } => {
                let (t, r) = synthetic[i].clone().expect("synthetic slice generated");
                trial.push(t);
                regular.push(r);
            }
        }
    }
    let reg_len = regular[0].len();
    if let Some((i, r)) = regular.iter().enumerate().find(|(_, r)| r.len() != reg_len) {
        return Err(HarnessError::config(
            format!("slices[{i}].source.regular"),
            format!("{} slots, slice 0 has {reg_len}", r.len()),
        ));
    }
    if reg_len == 0 {
        return Err(HarnessError::config("slices", "regular phase is empty"));
    }
    let cfg = TrialConfig {
        p_h: scenario.slices.iter().map(|s| s.p_h).collect(),
        alpha: (0..scenario.slices.len()).map(|i| scenario.slice_alpha(i)).collect(),
        transform: scenario.transform,
        chain: scenario.chain,
    };
    let outcome = fit_trial(&trial, &cfg)?;
    let user_chains = trial
        .iter()
        .map(|t| {
            let users: Vec<u32> = t.iter().map(|s| s.state.users).collect();
            fit_transitions(&TransitionCounts::from_sequence(&users))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let joint_chains = trial
        .iter()
        .map(|t| {
            let states: Vec<SliceState> = t.iter().map(|s| s.state).collect();
            fit_transitions(&TransitionCounts::from_sequence(&states))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prepared {
        trial,
        regular,
        outcome,
        user_chains,
        joint_chains,
        aggregation: (0..scenario.slices.len()).map(|i| scenario.aggregation(i)).collect(),
        table,
    })
}
