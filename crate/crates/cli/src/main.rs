//! Command-line front end: single runs, policy comparisons, density sweeps
//! and PRR CDF export.

mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use v2x_nlos::config::ConfigFile;
use v2x_nlos::engine::{self, collect_cdf, sweep_density, Compression, RunMetrics, SimConfig};
use v2x_nlos::relay::PolicyKind;
use v2x_nlos::scenario::ScenarioConfig;

use report::{render_report, Format, ReportRow};

#[derive(Parser)]
#[command(name = "v2x-nlos", version, about = "Sensor-sharing relay simulator for an occluded intersection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy for each seed and write per-run metrics.
    Run(CommonArgs),
    /// Run densities × policies × seeds and tabulate mean PRR.
    Sweep(CommonArgs),
    /// Run all four policies on shared seeds and print a comparison table.
    Compare(CommonArgs),
    /// Export the pooled per-window PRR CDF of each policy.
    Cdf(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key-value scenario file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// mohed, signal_strength, random or direct. `run` defaults to mohed;
    /// the other commands default to all four.
    #[arg(long)]
    policy: Option<String>,
    /// Seeds: `7`, `1,2,5` or `1..20` (inclusive).
    #[arg(long)]
    seed: Option<String>,
    /// Mean background spacing in meters; `sweep` accepts a list.
    #[arg(long, value_delimiter = ',')]
    density: Vec<f64>,
    /// Ego speed, km/h.
    #[arg(long)]
    speed: Option<f64>,
    /// Point-cloud compression ratio, 16 or 32.
    #[arg(long)]
    compression: Option<u32>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Extra per-hop attempts after a loss.
    #[arg(long)]
    retransmissions: Option<u32>,
    /// Output directory for metrics, tables and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format on stdout.
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Worker threads for multi-run commands (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write the relay decision trace of each run (`run` only).
    #[arg(long)]
    trace: bool,
}

/// Error in the user's configuration or flags, reported with exit code 2.
#[derive(Debug)]
struct ConfigProblem(anyhow::Error);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(ConfigProblem(e.into()))
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().with_context(|| format!("bad seed range `{part}`"))?;
            let b: u64 = b.trim().parse().with_context(|| format!("bad seed range `{part}`"))?;
            if a > b {
                bail!("empty seed range `{part}`");
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

struct Plan {
    scenario: ScenarioConfig,
    sim: SimConfig,
    seeds: Vec<u64>,
    densities: Vec<f64>,
    policies: Vec<PolicyKind>,
}

fn plan(args: &CommonArgs, default_all_policies: bool) -> anyhow::Result<Plan> {
    let mut scenario = ScenarioConfig::default();
    let mut sim = SimConfig::default();
    if let Some(path) = &args.scenario {
        ConfigFile::load(path)
            .and_then(|f| f.apply(&mut scenario, &mut sim))
            .map_err(config_err)?;
    }
    if let Some(s) = args.speed {
        scenario.ego_target_speed = s;
    }
    if let Some(d) = args.duration {
        scenario.duration = d;
    }
    if let Some(c) = args.compression {
        sim.set_compression(Compression::try_from(c).map_err(|e| config_err(anyhow::anyhow!(e)))?);
    }
    if let Some(r) = args.retransmissions {
        sim.retransmissions = r;
    }
    let seeds = match &args.seed {
        Some(s) => parse_seeds(s).map_err(config_err)?,
        None => vec![scenario.seed],
    };
    let densities = if args.density.is_empty() {
        vec![scenario.spawn_spacing_n]
    } else {
        args.density.clone()
    };
    let policies = match &args.policy {
        Some(p) => vec![p.parse::<PolicyKind>().map_err(config_err)?],
        None if default_all_policies => PolicyKind::ALL.to_vec(),
        None => vec![sim.policy.kind],
    };
    sim.policy.kind = policies[0];
    scenario.seed = seeds[0];
    scenario.spawn_spacing_n = densities[0];
    for &density in &densities {
        ScenarioConfig {
            spawn_spacing_n: density,
            ..scenario.clone()
        }
        .validate()
        .map_err(config_err)?;
    }
    sim.validate().map_err(config_err)?;
    Ok(Plan {
        scenario,
        sim,
        seeds,
        densities,
        policies,
    })
}

/// Write `bytes` to `dir/name` via a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let dest = dir.join(name);
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, &dest).with_context(|| format!("renaming to {}", dest.display()))?;
    Ok(())
}

fn fmt_density(d: f64) -> String {
    let s = format!("{d}");
    s.replace('.', "p")
}

fn run_file_stem(m: &RunMetrics) -> String {
    format!("{}_seed{}_N{}", m.policy, m.seed, fmt_density(m.density))
}

fn to_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(plan: &Plan) -> Self {
        let echo = ConfigFile::resolved(&plan.scenario, &plan.sim).to_toml();
        Self {
            files: vec![("config.toml".into(), echo.into_bytes())],
        }
    }

    fn add(&mut self, name: String, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }

    fn run_metrics(&mut self, runs: &[RunMetrics]) -> anyhow::Result<()> {
        for m in runs {
            let mut json = serde_json::to_vec_pretty(m)?;
            json.push(b'\n');
            self.add(format!("metrics_{}.json", run_file_stem(m)), json);
        }
        Ok(())
    }

    fn flush(self, out: Option<&Path>) -> anyhow::Result<()> {
        let Some(dir) = out else { return Ok(()) };
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, bytes) in &self.files {
            write_atomic(dir, name, bytes)?;
        }
        Ok(())
    }
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    match jobs {
        Some(0) => Err(config_err(anyhow::anyhow!("--jobs must be at least 1"))),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
        None => Ok(f()),
    }
}

#[derive(Serialize)]
struct SweepRow {
    density: f64,
    policy: String,
    runs: usize,
    mean_prr: f64,
    std_prr: f64,
    pooled_prr: f64,
    mean_per: f64,
    mean_switches: f64,
}

#[derive(Serialize)]
struct CdfRow {
    policy: String,
    prr: f64,
    cumulative_fraction: f64,
}

fn cmd_run(args: &CommonArgs) -> anyhow::Result<String> {
    if args.density.len() > 1 {
        return Err(config_err(anyhow::anyhow!("`run` takes a single --density")));
    }
    let p = plan(args, false)?;
    let mut out = Outputs::new(&p);
    let mut runs = Vec::new();
    for &seed in &p.seeds {
        let sc = ScenarioConfig {
            seed,
            ..p.scenario.clone()
        };
        let mut sim = p.sim.clone();
        sim.record_trace = args.trace;
        let o = engine::run(&sc, &sim)?;
        if args.trace {
            let mut lines = Vec::new();
            for rec in &o.trace {
                serde_json::to_writer(&mut lines, rec)?;
                lines.push(b'\n');
            }
            out.add(format!("trace_{}.jsonl", run_file_stem(&o.metrics)), lines);
        }
        runs.push(o.metrics);
    }
    out.run_metrics(&runs)?;
    let text = match args.format {
        Format::Json if runs.len() == 1 => serde_json::to_string_pretty(&runs[0])? + "\n",
        Format::Json => serde_json::to_string_pretty(&runs)? + "\n",
        Format::Csv => {
            let rows: Vec<ReportRow> = runs.iter().map(row_of_run).collect();
            String::from_utf8(to_csv(&rows)?)?
        }
        Format::Table => {
            let mut s = format!("{:<16} {:>6} {:>9} {:>9} {:>9} {:>10}\n", "policy", "seed", "PRR", "switches", "PER", "trigger s");
            for m in &runs {
                s.push_str(&format!(
                    "{:<16} {:>6} {:>8.2}% {:>9} {:>8.2}% {:>10}\n",
                    m.policy,
                    m.seed,
                    100.0 * m.prr,
                    m.relay_switches,
                    100.0 * m.per,
                    m.trigger_time.map_or("-".into(), |t| format!("{t:.1}"))
                ));
            }
            s
        }
    };
    out.flush(args.out.as_deref())?;
    Ok(text)
}

fn row_of_run(m: &RunMetrics) -> ReportRow {
    ReportRow {
        policy: m.policy.to_string(),
        avg_prr: m.prr,
        relay_switches: f64::from(m.relay_switches),
        per: m.per,
    }
}

fn cmd_compare(args: &CommonArgs) -> anyhow::Result<String> {
    if args.density.len() > 1 {
        return Err(config_err(anyhow::anyhow!("`compare` takes a single --density; use `sweep`")));
    }
    let p = plan(args, true)?;
    let res = in_pool(args.jobs, || sweep_density(&p.densities, &p.seeds, &p.policies, &p.scenario, &p.sim))??;
    let rows: Vec<ReportRow> = res.cells.iter().map(ReportRow::from).collect();
    let mut out = Outputs::new(&p);
    out.run_metrics(&res.runs)?;
    let tag = format!("N{}", fmt_density(p.densities[0]));
    out.add(format!("compare_{tag}.csv"), render_report(&rows, Format::Csv)?.into_bytes());
    out.add(format!("compare_{tag}.json"), render_report(&rows, Format::Json)?.into_bytes());
    let text = render_report(&rows, args.format)?;
    out.flush(args.out.as_deref())?;
    Ok(text)
}

fn cmd_sweep(args: &CommonArgs) -> anyhow::Result<String> {
    let p = plan(args, true)?;
    let res = in_pool(args.jobs, || sweep_density(&p.densities, &p.seeds, &p.policies, &p.scenario, &p.sim))??;
    let rows: Vec<SweepRow> = res
        .cells
        .iter()
        .map(|c| SweepRow {
            density: c.density,
            policy: c.policy.to_string(),
            runs: c.runs,
            mean_prr: c.mean_prr,
            std_prr: c.std_prr,
            pooled_prr: c.pooled_prr,
            mean_per: c.mean_per,
            mean_switches: c.mean_switches,
        })
        .collect();
    let mut out = Outputs::new(&p);
    out.run_metrics(&res.runs)?;
    let csv = to_csv(&rows)?;
    out.add("sweep.csv".into(), csv.clone());
    let text = match args.format {
        Format::Csv => String::from_utf8(csv)?,
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
        Format::Table => {
            let mut s = format!("{:>8} {:<16} {:>9} {:>8} {:>9}\n", "N (m)", "policy", "mean PRR", "std", "switches");
            for r in &rows {
                s.push_str(&format!(
                    "{:>8} {:<16} {:>8.2}% {:>7.2}% {:>9.2}\n",
                    r.density,
                    r.policy,
                    100.0 * r.mean_prr,
                    100.0 * r.std_prr,
                    r.mean_switches
                ));
            }
            s
        }
    };
    out.flush(args.out.as_deref())?;
    Ok(text)
}

fn cmd_cdf(args: &CommonArgs) -> anyhow::Result<String> {
    if args.density.len() > 1 {
        return Err(config_err(anyhow::anyhow!("`cdf` takes a single --density")));
    }
    let p = plan(args, true)?;
    let res = in_pool(args.jobs, || sweep_density(&p.densities, &p.seeds, &p.policies, &p.scenario, &p.sim))??;
    let mut rows = Vec::new();
    for &policy in &p.policies {
        let runs: Vec<RunMetrics> = res.runs.iter().filter(|m| m.policy == policy).cloned().collect();
        rows.extend(collect_cdf(&runs).into_iter().map(|(prr, frac)| CdfRow {
            policy: policy.to_string(),
            prr,
            cumulative_fraction: frac,
        }));
    }
    let mut out = Outputs::new(&p);
    let csv = to_csv(&rows)?;
    out.add(format!("cdf_N{}.csv", fmt_density(p.densities[0])), csv.clone());
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
        Format::Csv => String::from_utf8(csv)?,
        Format::Table => {
            // Quartiles per policy keep the terminal output short.
            let mut s = format!("{:<16} {:>8} {:>8} {:>8} {:>8}\n", "policy", "p25", "median", "p75", "samples");
            for &policy in &p.policies {
                let pts: Vec<&CdfRow> = rows.iter().filter(|r| r.policy == policy.name()).collect();
                let q = |f: f64| {
                    pts.iter()
                        .find(|r| r.cumulative_fraction >= f)
                        .map_or("-".to_string(), |r| format!("{:.2}%", 100.0 * r.prr))
                };
                s.push_str(&format!(
                    "{:<16} {:>8} {:>8} {:>8} {:>8}\n",
                    policy,
                    q(0.25),
                    q(0.5),
                    q(0.75),
                    pts.len()
                ));
            }
            s
        }
    };
    out.flush(args.out.as_deref())?;
    Ok(text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Cdf(a) => cmd_cdf(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) if e.is::<ConfigProblem>() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
