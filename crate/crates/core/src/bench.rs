//! Benchmarks and experiment drivers behind the command-line interface.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::planner::{audit, FeasibilityReport, PlannerConfig};
use crate::scenario::{figure_eight_scenario, gate_scenario, generate, plan_on_map, Disturbance, Event, Family, Scenario, Variant, Wind};
use crate::sim::{metrics, run_with_reference, TrackingMetrics};
use crate::{Result, Vec3};

/// Planning budget per instance (ms).
pub const PLAN_BUDGET_MS: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: Family,
    pub seed: u64,
    /// Audit-feasible plan within the budget.
    pub success: bool,
    pub plan_ms: f64,
    pub length: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub family: Family,
    pub instances: usize,
    pub successes: usize,
    pub mean_plan_ms: f64,
    pub max_plan_ms: f64,
}

/// Plans one generated instance; success is judged by the dense audit only.
pub fn bench_instance(family: Family, seed: u64) -> BenchRow {
    let sc = generate(family, seed);
    let mut row = BenchRow { family, seed, success: false, plan_ms: 0.0, length: 0.0, reason: String::new() };
    let map = match sc.map.build() {
        Ok(m) => m,
        Err(e) => {
            row.reason = e.to_string();
            return row;
        }
    };
    match plan_on_map(&sc, &map, &PlannerConfig::default()) {
        Ok(out) => {
            row.plan_ms = out.plan_ms;
            row.length = out.plan.poly.length(0.01);
            row.success = out.plan.report.feasible && out.plan_ms <= PLAN_BUDGET_MS;
            row.reason = if row.success { "ok".into() } else { failure_reason(&out.plan.report, out.plan_ms) };
        }
        Err(e) => row.reason = e.to_string(),
    }
    row
}

fn failure_reason(r: &FeasibilityReport, ms: f64) -> String {
    if ms > PLAN_BUDGET_MS {
        return "over budget".into();
    }
    format!(
        "audit: collision {:.4} thrust {:.4} tilt {:.4} vel {:.4} acc {:.4} tension {:.4} singular {}",
        r.collision, r.thrust, r.tilt, r.vel, r.acc, r.tension, r.singular
    )
}

/// Runs `count` seeded instances starting at `seed_base`. Rows come back in
/// seed order whether or not they ran in parallel.
pub fn bench_planning(family: Family, count: usize, seed_base: u64, parallel: bool) -> Vec<BenchRow> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed_base + i).collect();
    if parallel {
        seeds.par_iter().map(|&s| bench_instance(family, s)).collect()
    } else {
        seeds.iter().map(|&s| bench_instance(family, s)).collect()
    }
}

pub fn summarize(family: Family, rows: &[BenchRow]) -> BenchSummary {
    let times: Vec<f64> = rows.iter().map(|r| r.plan_ms).collect();
    BenchSummary {
        family,
        instances: rows.len(),
        successes: rows.iter().filter(|r| r.success).count(),
        mean_plan_ms: if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 },
        max_plan_ms: times.iter().copied().fold(0.0, f64::max),
    }
}

/// Per-instance outcomes. Wall-clock times are left out so the table is
/// reproducible; see [`bench_timing_csv`].
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("family,seed,success,length,reason\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.3},\"{}\"", r.family.name(), r.seed, r.success as u8, r.length, r.reason.replace('"', "'"));
    }
    s
}

pub fn bench_timing_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("family,seed,plan_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.3}", r.family.name(), r.seed, r.plan_ms);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: TrackingMetrics,
    pub aborted: Option<String>,
}

/// Simulates every variant on the same reference and seed.
pub fn ablate(sc: &Scenario, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    sc.validate()?;
    let (poly, _) = crate::scenario::reference(sc)?;
    variants
        .par_iter()
        .map(|&v| {
            let log = run_with_reference(&sc.with_variant(v), &poly)?;
            Ok(AblationRow { variant: v, metrics: metrics(&log)?, aborted: log.aborted })
        })
        .collect()
}

/// RMSE/MAX table in centimetres, one row per variant.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,rmse_q_cm,max_q_cm,rmse_l_cm,max_l_cm,aborted\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(s, "{},{:.3},{:.3},{:.3},{:.3},{}", r.variant.name(), m.rmse_q, m.max_q, m.rmse_l, m.max_l, r.aborted.is_some() as u8);
    }
    s
}

/// Figure-eight rows of the standard ablation: no disturbance, +200 g at
/// 3 s, 4.5 m/s head wind and a constant CoM-offset torque.
pub fn standard_suite() -> Vec<(String, Scenario)> {
    let at = |time, disturbance| vec![Event { time, disturbance }];
    vec![
        ("none".into(), figure_eight_scenario(Vec::new())),
        ("weight+200g".into(), figure_eight_scenario(at(3.0, Disturbance::AttachMass { mass: 0.2 }))),
        ("wind4.5".into(), figure_eight_scenario(at(0.0, Disturbance::Wind(Wind { velocity: Vec3::new(4.5, 0.0, 0.0), ..Wind::default() })))),
        ("com-offset".into(), figure_eight_scenario(at(0.0, Disturbance::ComOffsetTorque { torque: Vec3::new(0.03, 0.03, 0.0) }))),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub plan_ms: f64,
    pub feasible: bool,
    /// Deepest bubble penetration from a 1 ms audit (m).
    pub collision: f64,
    pub peak_speed: f64,
    pub peak_acc: f64,
    pub total_time: f64,
    pub report: FeasibilityReport,
}

/// Plans the fast gate flight and audits it at 1 ms.
pub fn gate_run(sc: Option<&Scenario>) -> Result<GateReport> {
    let default = gate_scenario();
    let sc = sc.unwrap_or(&default);
    sc.validate()?;
    let map = sc.map.build()?;
    let cfg = PlannerConfig::default();
    let out = plan_on_map(sc, &map, &cfg)?;
    let dense = audit(&out.plan.poly, &map, &sc.limits, &sc.params, cfg.weights.bubbles, 1e-3);
    Ok(GateReport {
        plan_ms: out.plan_ms,
        feasible: dense.feasible,
        collision: dense.collision,
        peak_speed: dense.peak_speed,
        peak_acc: dense.peak_acc,
        total_time: dense.total_time,
        report: out.plan.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_counts() {
        let rows = vec![
            BenchRow { family: Family::Clutter, seed: 0, success: true, plan_ms: 10.0, length: 1.0, reason: "ok".into() },
            BenchRow { family: Family::Clutter, seed: 1, success: false, plan_ms: 30.0, length: 1.0, reason: "x".into() },
        ];
        let s = summarize(Family::Clutter, &rows);
        assert_eq!((s.instances, s.successes), (2, 1));
        assert_eq!((s.mean_plan_ms, s.max_plan_ms), (20.0, 30.0));
        assert_eq!(bench_csv(&rows).lines().count(), 3);
    }
}
