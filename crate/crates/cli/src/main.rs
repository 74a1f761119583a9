use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use slung::bench::{ablate, ablation_csv, bench_csv, bench_planning, bench_timing_csv, gate_run, standard_suite, summarize};
use slung::planner::PlannerConfig;
use slung::scenario::{plan_on_map, Family, Scenario, Variant};
use slung::sim::{metrics, run, timing_stats};

#[derive(Parser)]
#[command(name = "slung", version, about = "Planner, simulator and benchmarks for a quadrotor with a slung payload")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a trajectory for a scenario and audit it.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan (or build) the reference and simulate the closed loop.
    Sim {
        /// Scenario file; a 10 s hover when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// plain, indi, force or full; overrides the scenario flags.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run controller variants on identical seeds and tabulate tracking errors.
    Ablate {
        /// Scenario file; the standard figure-eight suite when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeatable; all four variants when omitted.
        #[arg(long)]
        variant: Vec<Variant>,
    },
    /// Planning success and timing on seeded instance families.
    Bench {
        /// 12-squares, random-gap or clutter; all three when omitted.
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// First instance seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run instances one after another instead of in parallel.
        #[arg(long)]
        serial: bool,
    },
    /// Fast flight through a gate.
    Gate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad input: unreadable files, invalid scenarios.
    Usage(String),
    /// The request was understood but could not be satisfied.
    Domain(String),
}

impl From<slung::Error> for Failure {
    fn from(e: slung::Error) -> Self {
        match e {
            slung::Error::Io(_) | slung::Error::Json(_) | slung::Error::Parse(_) | slung::Error::InvalidParameter(_) => Self::Usage(e.to_string()),
            other => Self::Domain(other.to_string()),
        }
    }
}

type CmdResult = Result<bool, Failure>;

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path).map_err(|e| Failure::Usage(format!("cannot read scenario {}: {e}", path.display())))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

struct Output(Option<PathBuf>);

impl Output {
    fn new(dir: Option<PathBuf>) -> Result<Self, Failure> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self(dir))
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        if let Some(d) = &self.0 {
            let path = d.join(name);
            fs::write(&path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
            log::info!("wrote {}", path.display());
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        self.write(name, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
    }
}

fn cmd_plan(scenario: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let sc = load_scenario(scenario, seed)?;
    let out = Output::new(out)?;
    let map = sc.map.build()?;
    let outcome = match plan_on_map(&sc, &map, &PlannerConfig::default()) {
        Ok(o) => o,
        Err(e) => {
            let reason = e.to_string();
            out.json("report.json", &serde_json::json!({ "feasible": false, "reason": reason }))?;
            println!("plan failed: {reason}");
            return Ok(false);
        }
    };
    let mut report = outcome.plan.report.clone();
    let runtime_ms = report.runtime_ms;
    report.runtime_ms = 0.0;
    out.write("trajectory.txt", &outcome.plan.poly.to_text())?;
    out.json("report.json", &report)?;
    out.json("timing.json", &serde_json::json!({ "plan_ms": outcome.plan_ms, "optimizer_ms": runtime_ms }))?;
    println!(
        "{}: {} pieces, {:.2} s, feasible {} (collision {:.4} m, thrust {:.4} N, tilt {:.4} rad, vel {:.4}, acc {:.4}, tension {:.4}), {:.0} ms",
        sc.name,
        outcome.plan.poly.piece_count(),
        report.total_time,
        report.feasible,
        report.collision,
        report.thrust,
        report.tilt,
        report.vel,
        report.acc,
        report.tension,
        outcome.plan_ms
    );
    Ok(report.feasible)
}

fn cmd_sim(scenario: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, variant: Option<Variant>) -> CmdResult {
    let mut sc = match scenario {
        Some(p) => load_scenario(p, seed)?,
        None => Scenario { seed: seed.unwrap_or(0), ..Scenario::default() },
    };
    if let Some(v) = variant {
        sc = sc.with_variant(v);
    }
    let out = Output::new(out)?;
    let (log, plan) = run(&sc)?;
    let m = metrics(&log)?;
    out.write("log.csv", &log.to_csv())?;
    out.write("cycles.csv", &log.cycles_csv())?;
    out.write("events.csv", &log.events_csv())?;
    out.json("metrics.json", &serde_json::json!({ "tracking_cm": m, "aborted": log.aborted }))?;
    let timing = timing_stats(&log);
    out.json("timing.json", &serde_json::json!({ "controllers": timing, "plan_ms": plan.as_ref().map(|p| p.plan_ms) }))?;
    println!(
        "{}: payload RMSE {:.3} cm (max {:.3}), quadrotor RMSE {:.3} cm (max {:.3}), NMPC {:.2} ms mean",
        sc.name, m.rmse_l, m.max_l, m.rmse_q, m.max_q, timing.nmpc_mean_ms
    );
    if let Some(a) = &log.aborted {
        println!("aborted: {a}");
    }
    Ok(log.aborted.is_none())
}

fn cmd_ablate(scenario: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, variants: Vec<Variant>) -> CmdResult {
    let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
    let suite = match scenario {
        Some(p) => vec![("scenario".to_string(), load_scenario(p, seed)?)],
        None => standard_suite().into_iter().map(|(n, sc)| (n, Scenario { seed: seed.unwrap_or(sc.seed), ..sc })).collect(),
    };
    let out = Output::new(out)?;
    let mut all_ok = true;
    let mut table = serde_json::Map::new();
    for (name, sc) in &suite {
        let rows = ablate(sc, &variants)?;
        println!("== {name}\n{}", ablation_csv(&rows));
        all_ok &= rows.iter().all(|r| r.aborted.is_none());
        out.write(&format!("ablation_{name}.csv"), &ablation_csv(&rows))?;
        table.insert(name.clone(), serde_json::to_value(&rows).expect("serializable"));
    }
    out.json("ablation.json", &table)?;
    Ok(all_ok)
}

fn cmd_bench(family: Option<Family>, count: usize, seed: u64, out: Option<PathBuf>, serial: bool) -> CmdResult {
    let families = family.map_or(Family::ALL.to_vec(), |f| vec![f]);
    let out = Output::new(out)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for f in families {
        let r = bench_planning(f, count, seed, !serial);
        let s = summarize(f, &r);
        println!("{:<11} success {}/{}  mean {:.1} ms  max {:.1} ms", f.name(), s.successes, s.instances, s.mean_plan_ms, s.max_plan_ms);
        rows.extend(r);
        summaries.push(s);
    }
    out.write("bench.csv", &bench_csv(&rows))?;
    out.write("bench_timing.csv", &bench_timing_csv(&rows))?;
    let counts: Vec<_> = summaries.iter().map(|s| serde_json::json!({ "family": s.family, "instances": s.instances, "successes": s.successes })).collect();
    out.json("summary.json", &counts)?;
    out.json("timing.json", &summaries)?;
    Ok(true)
}

fn cmd_gate(scenario: Option<&Path>, out: Option<PathBuf>) -> CmdResult {
    let sc = scenario.map(|p| load_scenario(p, None)).transpose()?;
    let out = Output::new(out)?;
    let mut g = gate_run(sc.as_ref())?;
    let plan_ms = g.plan_ms;
    g.plan_ms = 0.0;
    g.report.runtime_ms = 0.0;
    out.json("gate.json", &g)?;
    out.json("timing.json", &serde_json::json!({ "plan_ms": plan_ms }))?;
    println!(
        "gate: feasible {} (collision {:.4} m), peak payload speed {:.2} m/s, peak acceleration {:.2} m/s^2, {:.2} s flight, planned in {:.0} ms",
        g.feasible, g.collision, g.peak_speed, g.peak_acc, g.total_time, plan_ms
    );
    Ok(g.feasible)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLUNG_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { scenario, seed, out } => cmd_plan(&scenario, seed, out),
        Command::Sim { scenario, seed, out, variant } => cmd_sim(scenario.as_deref(), seed, out, variant),
        Command::Ablate { scenario, seed, out, variant } => cmd_ablate(scenario.as_deref(), seed, out, variant),
        Command::Bench { family, count, seed, out, serial } => cmd_bench(family, count, seed, out, serial),
        Command::Gate { scenario, out } => cmd_gate(scenario.as_deref(), out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
