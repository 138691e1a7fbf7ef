//! `netslice`: ingest traces, fit trial models, simulate and sweep.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use netslice::harness::{self, HarnessError, Scenario, SourceSpec};
use netslice::trace::{
    extract_slot_series, read_raw_records, read_slot_series, read_user_counts, write_slot_series, AggregationConfig,
    DemandMapTable, TraceError,
};
use netslice::trial::{fit_trial, ChainKind, TrialConfig};

#[derive(Parser)]
#[command(name = "netslice", version, about = "Network slice sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Io {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw scheduling traces into slot series.
    Ingest {
        #[command(flatten)]
        io: Io,
    },
    /// Fit per-slice models and the provisioning plan from slot series.
    Trial {
        #[command(flatten)]
        io: Io,
    },
    /// Run the scenario's configured case under every scheme.
    Simulate {
        #[command(flatten)]
        io: Io,
        /// Replaces every seed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the baseline and every anomaly strength of the sweep grid.
    Sweep {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        seed: Option<u64>,
        /// Cases run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the synthetic slices of a scenario as slot-series files plus a
    /// scenario that reads them.
    Synth {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    /// Bad input or configuration.
    User(String),
    /// Broken engine invariant.
    Internal(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_internal() {
            Failure::Internal(e.to_string())
        } else {
            Failure::User(e.to_string())
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Failure::User(e.to_string())
    }
}

fn user<E: std::fmt::Display>(context: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::User(format!("{}: {e}", context.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(user(path))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        Failure::User(format!(
            "{}: invalid field `{}`: {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn default_window() -> u32 {
    10
}
fn default_one() -> u32 {
    1
}
fn default_slot() -> u32 {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestSlice {
    name: String,
    raw: PathBuf,
    #[serde(default)]
    users: Option<PathBuf>,
    bitrate_kbps: f64,
    #[serde(default = "default_one")]
    users_step: u32,
    #[serde(default = "default_one")]
    mcs_step: u32,
    #[serde(default = "default_one")]
    demand_step: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestConfig {
    #[serde(default = "default_slot")]
    slot_seconds: u32,
    #[serde(default = "default_window")]
    window_seconds: u32,
    #[serde(default)]
    demand_table: Option<PathBuf>,
    #[serde(default)]
    mimo_factor: Option<f64>,
    slices: Vec<IngestSlice>,
}

fn ingest(io: &Io) -> Result<(), Failure> {
    let cfg: IngestConfig = read_json(&io.config)?;
    let base = base_dir(&io.config);
    let table = match &cfg.demand_table {
        Some(p) => {
            let p = resolve(&base, p);
            DemandMapTable::from_csv(File::open(&p).map_err(user(&p))?, cfg.mimo_factor.unwrap_or(2.0))
                .map_err(user(&p))?
        }
        None => DemandMapTable::default_lte(),
    };
    fs::create_dir_all(&io.out).map_err(user(&io.out))?;
    for s in &cfg.slices {
        let agg = AggregationConfig {
            slot_seconds: cfg.slot_seconds,
            users_step: s.users_step,
            mcs_step: s.mcs_step,
            demand_step: s.demand_step,
            bitrate_kbps: s.bitrate_kbps,
        };
        let raw = resolve(&base, &s.raw);
        let text = fs::read(&raw).map_err(user(&raw))?;
        let series = if text.iter().all(u8::is_ascii_whitespace) {
            log::warn!("{} is empty; writing an empty series", raw.display());
            Vec::new()
        } else {
            let records = read_raw_records(text.as_slice()).map_err(user(&raw))?;
            let users = match &s.users {
                Some(p) => {
                    let p = resolve(&base, p);
                    Some(read_user_counts(File::open(&p).map_err(user(&p))?).map_err(user(&p))?)
                }
                None => None,
            };
            extract_slot_series(&records, users.as_ref(), cfg.window_seconds, &agg, &table).map_err(user(&raw))?
        };
        let path = io.out.join(format!("{}.csv", s.name));
        write_slot_series(File::create(&path).map_err(user(&path))?, &series)?;
        println!("{}: {} slots -> {}", s.name, series.len(), path.display());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialFile {
    series: Vec<PathBuf>,
    p_h: Vec<f64>,
    alpha: Vec<f64>,
    #[serde(default = "default_true")]
    transform: bool,
    #[serde(default)]
    chain: ChainKind,
}

fn trial(io: &Io) -> Result<(), Failure> {
    let cfg: TrialFile = read_json(&io.config)?;
    let base = base_dir(&io.config);
    let series = cfg
        .series
        .iter()
        .map(|p| {
            let p = resolve(&base, p);
            read_slot_series(File::open(&p).map_err(user(&p))?).map_err(user(&p))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = fit_trial(
        &series,
        &TrialConfig {
            p_h: cfg.p_h,
            alpha: cfg.alpha,
            transform: cfg.transform,
            chain: cfg.chain,
        },
    )
    .map_err(|e| Failure::User(e.to_string()))?;
    fs::create_dir_all(&io.out).map_err(user(&io.out))?;
    let write = |name: String, json: String| -> Result<(), Failure> {
        let path = io.out.join(name);
        fs::write(&path, json + "\n").map_err(user(&path))
    };
    write(
        "plan.json".into(),
        serde_json::to_string_pretty(&out.plan).expect("plan serializes"),
    )?;
    for (i, m) in out.models.iter().enumerate() {
        write(
            format!("model_{i}.json"),
            serde_json::to_string_pretty(m).expect("model serializes"),
        )?;
    }
    for (i, w) in out.plan.w_h.iter().enumerate() {
        println!("slice {i}: W_H = {w}");
    }
    println!("W_c = {}", out.plan.w_c);
    Ok(())
}

fn load_scenario(io: &Io, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut s = Scenario::load(&io.config)?;
    if let Some(seed) = seed {
        s.override_seed(seed);
    }
    Ok(s)
}

fn print_summary(rows: &[harness::SummaryRow]) {
    for r in rows {
        let iso = r
            .isolation_pct
            .map(|x| format!("{x:.1}%"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:>8}  savings {:>6.2}%  isolation {iso}",
            r.scheme.to_string(),
            r.prb_savings_pct
        );
    }
}

fn simulate(io: &Io, seed: Option<u64>) -> Result<(), Failure> {
    let scenario = load_scenario(io, seed)?;
    let prep = harness::prepare(&scenario)?;
    let results = harness::simulate(&prep, &scenario)?;
    let rows = harness::write_outputs(&io.out, &scenario, &prep, &results)?;
    print_summary(&rows);
    Ok(())
}

fn sweep(io: &Io, seed: Option<u64>, jobs: usize) -> Result<(), Failure> {
    let scenario = load_scenario(io, seed)?;
    let prep = harness::prepare(&scenario)?;
    let results = harness::sweep(&prep, &scenario, jobs)?;
    let rows = harness::write_outputs(&io.out, &scenario, &prep, &results)?;
    print_summary(&rows);
    Ok(())
}

fn synth(io: &Io, seed: Option<u64>) -> Result<(), Failure> {
    let mut scenario = load_scenario(io, seed)?;
    let table = scenario.table()?;
    let generated = harness::synthesize(&scenario, &table)?;
    fs::create_dir_all(&io.out).map_err(user(&io.out))?;
    for (s, g) in scenario.slices.iter_mut().zip(generated) {
        let Some((trial, regular)) = g else { continue };
        let mut files = Vec::new();
        for (phase, series) in [("trial", &trial), ("regular", &regular)] {
            let name = PathBuf::from(format!("{}_{phase}.csv", s.name));
            let path = io.out.join(&name);
            write_slot_series(File::create(&path).map_err(user(&path))?, series)?;
            files.push(name);
        }
        s.source = SourceSpec::Series {
            trial: files[0].clone(),
            regular: files[1].clone(),
        };
    }
    let path = io.out.join("scenario.json");
    fs::write(&path, scenario.to_json() + "\n").map_err(user(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest { io } => ingest(io),
        Command::Trial { io } => trial(io),
        Command::Simulate { io, seed } => simulate(io, *seed),
        Command::Sweep { io, seed, jobs } => sweep(io, *seed, *jobs),
        Command::Synth { io, seed } => synth(io, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}
