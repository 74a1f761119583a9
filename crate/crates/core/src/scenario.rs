//! Scenario files, seeded benchmark instances and reference trajectories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemParams;
use crate::esdf::{build_esdf, rasterize, EsdfMap, OccupancyGrid, Primitive};
use crate::estimator::EstimatorConfig;
use crate::flatness::BubbleSpec;
use crate::indi::IndiConfig;
use crate::kinodynamic::{search, SearchConfig};
use crate::minco::{BoundaryState, Minco, PiecewisePoly};
use crate::nmpc::NmpcConfig;
use crate::planner::{optimize, DynamicLimits, PlanResult, PlannerConfig};
use crate::{Error, Result, Vec3};

/// Where the occupancy map comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MapSpec {
    Primitives { min: Vec3, max: Vec3, resolution: f64, primitives: Vec<Primitive> },
    /// Occupancy grid in the text format of [`OccupancyGrid::save`].
    File { path: PathBuf },
}

impl MapSpec {
    pub fn empty(min: Vec3, max: Vec3) -> Self {
        Self::Primitives { min, max, resolution: 0.1, primitives: Vec::new() }
    }

    pub fn build(&self) -> Result<EsdfMap> {
        let grid = match self {
            Self::Primitives { min, max, resolution, primitives } => rasterize(primitives, *min, *max, *resolution)?,
            Self::File { path } => OccupancyGrid::load(path)?,
        };
        build_esdf(&grid)
    }
}

/// Trajectory the controllers track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Plan from `start` to `goal` through the map.
    Plan,
    /// Hold `start`.
    Hover { duration: f64 },
    /// Figure-eight around `start` with the given peak payload speed.
    FigureEight { half_length: f64, half_width: f64, peak_speed: f64 },
    /// Trajectory in the text format of [`PiecewisePoly::save`].
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Wind {
    /// Mean wind velocity (m/s).
    pub velocity: Vec3,
    pub gust_amplitude: Vec3,
    pub gust_freq_hz: f64,
}

impl Default for Wind {
    fn default() -> Self {
        Self { velocity: Vec3::zeros(), gust_amplitude: Vec3::zeros(), gust_freq_hz: 0.5 }
    }
}

impl Wind {
    pub fn at(&self, t: f64) -> Vec3 {
        self.velocity + self.gust_amplitude * (2.0 * std::f64::consts::PI * self.gust_freq_hz * t).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Disturbance {
    /// Replaces the active wind field.
    Wind(Wind),
    /// Adds mass to the payload (kg).
    AttachMass { mass: f64 },
    /// Constant body torque (N m), replacing any previous one.
    ComOffsetTorque { torque: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub disturbance: Disturbance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub sim_dt: f64,
    pub nmpc_hz: f64,
    pub indi_hz: f64,
    pub estimator_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { sim_dt: 1e-3, nmpc_hz: 100.0, indi_hz: 1000.0, estimator_hz: 100.0 }
    }
}

impl Rates {
    /// Sim steps per controller period, for NMPC, inner loop and estimator.
    pub fn dividers(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, hz) in out.iter_mut().zip([self.nmpc_hz, self.indi_hz, self.estimator_hz]) {
            let ratio = 1.0 / (hz * self.sim_dt);
            let k = ratio.round();
            if !(hz > 0.0 && k >= 1.0 && (ratio - k).abs() < 1e-9) {
                return Err(Error::InvalidParameter(format!("{hz} Hz does not divide the {} s simulation grid", self.sim_dt)));
            }
            *o = k as usize;
        }
        if !(self.sim_dt > 0.0 && self.sim_dt <= 0.01) {
            return Err(Error::InvalidParameter(format!("simulation step {} outside (0, 0.01]", self.sim_dt)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Accelerometer noise (m/s^2).
    pub acc_sigma: f64,
    /// Gyro noise (rad/s).
    pub gyro_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { acc_sigma: 0.05, gyro_sigma: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeroConfig {
    pub rho_air: f64,
    /// Drag area of the quadrotor and of the payload (m^2).
    pub cda_q: f64,
    pub cda_l: f64,
}

impl Default for AeroConfig {
    fn default() -> Self {
        Self { rho_air: 1.225, cda_q: 0.01, cda_l: 0.005 }
    }
}

impl AeroConfig {
    /// `0.5 rho C_dA |v_w - v| (v_w - v)`.
    pub fn drag(&self, cda: f64, wind: &Vec3, vel: &Vec3) -> Vec3 {
        let rel = wind - vel;
        0.5 * self.rho_air * cda * rel.norm() * rel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerFlags {
    pub force_comp: bool,
    pub indi: bool,
}

impl Default for ControllerFlags {
    fn default() -> Self {
        Self { force_comp: true, indi: true }
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Indi,
    Force,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Indi, Variant::Force, Variant::Full];

    pub fn flags(self) -> ControllerFlags {
        match self {
            Self::Plain => ControllerFlags { force_comp: false, indi: false },
            Self::Indi => ControllerFlags { force_comp: false, indi: true },
            Self::Force => ControllerFlags { force_comp: true, indi: false },
            Self::Full => ControllerFlags { force_comp: true, indi: true },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Indi => "indi",
            Self::Force => "force",
            Self::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown variant {s:?} (expected plain, indi, force or full)")))
    }
}

/// Everything needed to plan and simulate one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub params: SystemParams,
    pub map: MapSpec,
    /// Payload start and goal, both at rest.
    pub start: Vec3,
    pub goal: Vec3,
    pub limits: DynamicLimits,
    pub reference: ReferenceSpec,
    pub events: Vec<Event>,
    pub flags: ControllerFlags,
    pub seed: u64,
    pub rates: Rates,
    pub noise: NoiseConfig,
    pub aero: AeroConfig,
    pub nmpc: NmpcConfig,
    pub estimator: EstimatorConfig,
    pub indi: IndiConfig,
    /// Simulated time after the reference ends (s).
    pub settle_time: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "hover".into(),
            params: SystemParams::default(),
            map: MapSpec::empty(Vec3::new(-5.0, -5.0, 0.0), Vec3::new(5.0, 5.0, 4.0)),
            start: Vec3::new(0.0, 0.0, 1.0),
            goal: Vec3::new(0.0, 0.0, 1.0),
            limits: DynamicLimits::default(),
            reference: ReferenceSpec::Hover { duration: 10.0 },
            events: Vec::new(),
            flags: ControllerFlags::default(),
            seed: 0,
            rates: Rates::default(),
            noise: NoiseConfig::default(),
            aero: AeroConfig::default(),
            nmpc: NmpcConfig::default(),
            estimator: EstimatorConfig::default(),
            indi: IndiConfig::default(),
            settle_time: 0.0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.limits.validate()?;
        self.nmpc.validate()?;
        self.estimator.validate()?;
        self.rates.dividers()?;
        if self.events.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::InvalidParameter("events must be ordered by time".into()));
        }
        if self.events.iter().any(|e| !(e.time >= 0.0)) {
            return Err(Error::InvalidParameter("event times must be non-negative".into()));
        }
        if !(self.settle_time >= 0.0) {
            return Err(Error::InvalidParameter("settle_time must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        Self { flags: v.flags(), ..self.clone() }
    }

    /// Front-end configuration matching the limits and bubble radii.
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            v_max: self.limits.v_max,
            a_max: self.limits.a_max,
            bubbles: BubbleSpec { d_payload: self.limits.d_l, d_quad: self.limits.d_q, ..BubbleSpec::default() },
            eps_tension: self.limits.eps_tension,
            ..SearchConfig::default()
        }
    }
}

/// A plan together with the wall-clock time of the planning call.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: PlanResult,
    pub plan_ms: f64,
}

/// Front-end search plus trajectory optimization on a prebuilt map.
pub fn plan_on_map(sc: &Scenario, map: &EsdfMap, cfg: &PlannerConfig) -> Result<PlanOutcome> {
    let started = Instant::now();
    let path = search(map, &sc.start, &Vec3::zeros(), &sc.goal, &sc.search_config(), &sc.params)?;
    let plan = optimize(&path, map, &sc.limits, cfg, &sc.params, BoundaryState::rest(sc.start), BoundaryState::rest(sc.goal))?;
    Ok(PlanOutcome { plan, plan_ms: started.elapsed().as_secs_f64() * 1e3 })
}

/// Durations proportional to chord length at a nominal speed.
fn chord_durations(points: &[Vec3], speed: f64) -> Vec<f64> {
    points.windows(2).map(|w| ((w[1] - w[0]).norm() / speed).max(0.05)).collect()
}

/// Peak speed over a dense sampling.
pub fn peak_speed(poly: &PiecewisePoly) -> f64 {
    let total = poly.total_duration();
    let n = (total / 1e-3).ceil() as usize;
    (0..=n).map(|i| poly.evaluate(total * i as f64 / n as f64, 1).norm()).fold(0.0, f64::max)
}

/// Rest-to-rest figure-eight (lemniscate of Gerono) through `center`,
/// time-scaled so the payload peak speed equals `peak`.
pub fn figure_eight(center: Vec3, half_length: f64, half_width: f64, peak: f64) -> Result<PiecewisePoly> {
    if !(half_length > 0.0 && half_width > 0.0 && peak > 0.0) {
        return Err(Error::InvalidParameter("figure-eight size and speed must be positive".into()));
    }
    let n = 16;
    let pts: Vec<Vec3> = (0..=n)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            center + Vec3::new(half_length * th.sin(), half_width * th.sin() * th.cos(), 0.0)
        })
        .collect();
    let head = BoundaryState::rest(center);
    let inner = &pts[1..n];
    let mut durations = chord_durations(&pts, peak);
    // Speed scales inversely with a uniform stretch of all durations.
    for _ in 0..2 {
        let poly = Minco::construct(head, head, inner, &durations)?.poly;
        let s = peak_speed(&poly) / peak;
        durations.iter_mut().for_each(|d| *d *= s);
    }
    Ok(Minco::construct(head, head, inner, &durations)?.poly)
}

/// Reference trajectory for a scenario, with the planning outcome if one ran.
pub fn reference(sc: &Scenario) -> Result<(PiecewisePoly, Option<PlanOutcome>)> {
    match &sc.reference {
        ReferenceSpec::Plan => {
            let map = sc.map.build()?;
            let out = plan_on_map(sc, &map, &PlannerConfig::default())?;
            Ok((out.plan.poly.clone(), Some(out)))
        }
        ReferenceSpec::Hover { duration } => {
            let head = BoundaryState::rest(sc.start);
            Ok((Minco::construct(head, head, &[], &[duration.max(0.1)])?.poly, None))
        }
        ReferenceSpec::FigureEight { half_length, half_width, peak_speed } => {
            Ok((figure_eight(sc.start, *half_length, *half_width, *peak_speed)?, None))
        }
        ReferenceSpec::File { path } => Ok((PiecewisePoly::load(path)?, None)),
    }
}

/// Benchmark scenario families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TwelveSquares,
    RandomGap,
    Clutter,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::TwelveSquares, Family::RandomGap, Family::Clutter];

    pub fn name(self) -> &'static str {
        match self {
            Self::TwelveSquares => "12-squares",
            Self::RandomGap => "random-gap",
            Self::Clutter => "clutter",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown family {s:?} (expected 12-squares, random-gap or clutter)")))
    }
}

/// Fraction of clutter cells that hold a column.
pub const CLUTTER_DENSITY: f64 = 0.4;
const CLUTTER_CELL: f64 = 1.5;

fn column(cx: f64, cy: f64, half: f64, height: f64) -> Primitive {
    Primitive::Box { min: Vec3::new(cx - half, cy - half, 0.0), max: Vec3::new(cx + half, cy + half, height) }
}

/// Seeded planning instance of a family. Start and goal sit outside the
/// obstacle band, so every instance has free endpoints.
pub fn generate(family: Family, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = 3.0;
    let (lo, hi) = (Vec3::new(-1.0, -4.0, 0.0), Vec3::new(11.0, 4.0, height));
    let start = Vec3::new(0.0, rng.random_range(-1.0..1.0), 1.2);
    let goal = Vec3::new(10.0, rng.random_range(-1.0..1.0), 1.2);
    let primitives = match family {
        Family::TwelveSquares => (0..12)
            .map(|_| column(rng.random_range(2.0..8.0), rng.random_range(-3.0..3.0), rng.random_range(0.15..0.4), height))
            .collect(),
        Family::RandomGap => {
            let (x0, x1) = (4.8, 5.2);
            let gy = rng.random_range(-1.5..1.5);
            let gz = rng.random_range(1.1..1.5);
            let (hw, hh) = (0.6, 0.8);
            vec![
                Primitive::Box { min: Vec3::new(x0, lo.y, 0.0), max: Vec3::new(x1, gy - hw, height) },
                Primitive::Box { min: Vec3::new(x0, gy + hw, 0.0), max: Vec3::new(x1, hi.y, height) },
                Primitive::Box { min: Vec3::new(x0, gy - hw, 0.0), max: Vec3::new(x1, gy + hw, gz - hh) },
                Primitive::Box { min: Vec3::new(x0, gy - hw, gz + hh), max: Vec3::new(x1, gy + hw, height) },
            ]
        }
        Family::Clutter => {
            let mut prims = Vec::new();
            let nx = (6.0 / CLUTTER_CELL) as usize;
            let ny = (6.0 / CLUTTER_CELL) as usize;
            for i in 0..nx {
                for j in 0..ny {
                    let occupied = rng.random_bool(CLUTTER_DENSITY);
                    let jitter = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                    let half = rng.random_range(0.15..0.3);
                    if occupied {
                        let cx = 2.0 + CLUTTER_CELL * (i as f64 + 0.5) + jitter.0;
                        let cy = -3.0 + CLUTTER_CELL * (j as f64 + 0.5) + jitter.1;
                        prims.push(column(cx, cy, half, height));
                    }
                }
            }
            prims
        }
    };
    Scenario {
        name: format!("{}-{seed}", family.name()),
        map: MapSpec::Primitives { min: lo, max: hi, resolution: 0.1, primitives },
        start,
        goal,
        reference: ReferenceSpec::Plan,
        seed,
        ..Scenario::default()
    }
}

/// Gate width and height (m).
pub const GATE_SIZE: (f64, f64) = (1.0, 1.2);

/// Fast flight through a single gate in a wall.
pub fn gate_scenario() -> Scenario {
    let height = 3.5;
    let (gw, gh) = GATE_SIZE;
    let (x0, x1) = (5.0, 5.2);
    let (gz0, gz1) = (0.9, 0.9 + gh);
    let (lo, hi) = (Vec3::new(-1.0, -4.0, 0.0), Vec3::new(11.0, 4.0, height));
    let primitives = vec![
        Primitive::Box { min: Vec3::new(x0, lo.y, 0.0), max: Vec3::new(x1, -gw / 2.0, height) },
        Primitive::Box { min: Vec3::new(x0, gw / 2.0, 0.0), max: Vec3::new(x1, hi.y, height) },
        Primitive::Box { min: Vec3::new(x0, -gw / 2.0, 0.0), max: Vec3::new(x1, gw / 2.0, gz0) },
        Primitive::Box { min: Vec3::new(x0, -gw / 2.0, gz1), max: Vec3::new(x1, gw / 2.0, height) },
    ];
    Scenario {
        name: "gate".into(),
        map: MapSpec::Primitives { min: lo, max: hi, resolution: 0.05, primitives },
        start: Vec3::new(0.0, 0.0, 1.1),
        goal: Vec3::new(10.0, 0.0, 1.1),
        limits: DynamicLimits { v_max: 5.9, a_max: 9.0, f_u: 45.0, theta_max: 70f64.to_radians(), d_q: 0.25, d_l: 0.1, ..Default::default() },
        reference: ReferenceSpec::Plan,
        ..Scenario::default()
    }
}

/// The ablation trajectory: figure-eight at 4 m/s.
pub fn figure_eight_scenario(events: Vec<Event>) -> Scenario {
    Scenario {
        name: "figure-eight".into(),
        map: MapSpec::empty(Vec3::new(-10.0, -6.0, 0.0), Vec3::new(10.0, 6.0, 4.0)),
        start: Vec3::new(0.0, 0.0, 1.5),
        goal: Vec3::new(0.0, 0.0, 1.5),
        reference: ReferenceSpec::FigureEight { half_length: 8.0, half_width: 4.0, peak_speed: 4.0 },
        events,
        settle_time: 1.0,
        ..Scenario::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_json_round_trip() {
        let mut sc = figure_eight_scenario(vec![
            Event { time: 3.0, disturbance: Disturbance::AttachMass { mass: 0.2 } },
            Event { time: 4.0, disturbance: Disturbance::Wind(Wind { velocity: Vec3::new(4.5, 0.0, 0.0), ..Default::default() }) },
        ]);
        sc.seed = 17;
        let back = Scenario::from_json_str(&sc.to_json()).unwrap();
        assert_eq!(back, sc);
        let minimal = Scenario::from_json_str(r#"{"name": "x", "reference": {"kind": "hover", "duration": 2.0}}"#).unwrap();
        assert_eq!(minimal.rates, Rates::default());
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut sc = Scenario::default();
        sc.events = vec![
            Event { time: 2.0, disturbance: Disturbance::AttachMass { mass: 0.1 } },
            Event { time: 1.0, disturbance: Disturbance::AttachMass { mass: 0.1 } },
        ];
        assert!(sc.validate().is_err());
        let sc = Scenario { rates: Rates { nmpc_hz: 300.0, ..Default::default() }, ..Scenario::default() };
        assert!(sc.validate().is_err());
        assert!(Scenario::from_json_str("{ not json").is_err());
    }

    #[test]
    fn rate_dividers() {
        assert_eq!(Rates::default().dividers().unwrap(), [10, 1, 10]);
    }

    #[test]
    fn drag_examples() {
        let aero = AeroConfig::default();
        assert_eq!(aero.drag(0.01, &Vec3::zeros(), &Vec3::zeros()), Vec3::zeros());
        let f = aero.drag(0.01, &Vec3::new(4.5, 0.0, 0.0), &Vec3::zeros());
        assert!((f.x - 0.5 * 1.225 * 0.01 * 4.5 * 4.5).abs() < 1e-12);
        let f = aero.drag(0.01, &Vec3::zeros(), &Vec3::new(2.0, 0.0, 0.0));
        assert!(f.x < 0.0);
    }

    #[test]
    fn generators_are_seeded() {
        for f in Family::ALL {
            assert_eq!(generate(f, 4), generate(f, 4));
            assert_ne!(generate(f, 4).map, generate(f, 5).map);
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        let sc = generate(Family::Clutter, 0);
        let MapSpec::Primitives { primitives, .. } = &sc.map else { panic!() };
        assert!(primitives.len() <= 16);
    }

    #[test]
    fn figure_eight_hits_peak_speed() {
        let poly = figure_eight(Vec3::new(0.0, 0.0, 1.5), 5.0, 2.5, 4.0).unwrap();
        assert!((peak_speed(&poly) - 4.0).abs() < 0.02);
        let end = poly.evaluate(poly.total_duration(), 0);
        assert!((end - Vec3::new(0.0, 0.0, 1.5)).norm() < 1e-9);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
