//! The experiments: Wheeler's interferometer with BS2 absent, present or
//! switched mid-flight, the spin-flip marker and the pointer marker.
//! Ensembles run in parallel; reports are assembled in trajectory order.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::marker::{MarkerContext, MarkerError, MarkerKind, MarkerModel, Spin};
use crate::optics::{ActiveInterval, Channel, DetectorId, Layout, LayoutParams, OpticsError};
use crate::pilotwave::{
    sample_ensemble, trajectory_rng, Configuration, PilotError, Recording, SamplingMode, Tolerances,
    Trajectory, TrajectoryFlag, WaveField,
};
use crate::vec2::Vec2;

/// Largest tolerated fraction of node-flagged trajectories.
pub const NODE_FLAG_BUDGET: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Marker(#[from] MarkerError),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error("t_c = {t_c} falls inside the I2 transit window [{start}, {end}]")]
    ScheduleInsideTransit { t_c: f64, start: f64, end: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{flagged} of {n} trajectories hit wave-function nodes (budget {budget})")]
    NodeBudgetExceeded { flagged: usize, n: usize, budget: f64 },
    #[error("scenarios differ in more than the BS2 schedule")]
    NotASchedulePair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Insert,
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scenario")]
pub enum ScenarioName {
    WheelerOpen,
    WheelerClosed,
    WheelerDelayed {
        t_c: f64,
        direction: Direction,
    },
    EsswSpin {
        efficiency_sq: f64,
    },
    AvPointer {
        ejection_speed: f64,
        pointer_sigma: f64,
        pointer_mass: f64,
    },
}

impl ScenarioName {
    pub fn slug(&self) -> &'static str {
        match self {
            ScenarioName::WheelerOpen => "wheeler_open",
            ScenarioName::WheelerClosed => "wheeler_closed",
            ScenarioName::WheelerDelayed { .. } => "wheeler_delayed",
            ScenarioName::EsswSpin { .. } => "essw_spin",
            ScenarioName::AvPointer { .. } => "av_pointer",
        }
    }

    pub fn av_pointer_default() -> Self {
        ScenarioName::AvPointer {
            ejection_speed: 40.0,
            pointer_sigma: 1.0,
            pointer_mass: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "t_c")]
pub enum Bs2Schedule {
    Absent,
    Present,
    InsertAt(f64),
    RemoveAt(f64),
}

impl Bs2Schedule {
    pub fn interval(self) -> ActiveInterval {
        match self {
            Bs2Schedule::Absent => ActiveInterval::NEVER,
            Bs2Schedule::Present => ActiveInterval::ALWAYS,
            Bs2Schedule::InsertAt(t) => ActiveInterval {
                start: t,
                end: f64::INFINITY,
            },
            Bs2Schedule::RemoveAt(t) => ActiveInterval {
                start: f64::NEG_INFINITY,
                end: t,
            },
        }
    }

    pub fn switch_time(self) -> Option<f64> {
        match self {
            Bs2Schedule::InsertAt(t) | Bs2Schedule::RemoveAt(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n: usize,
    pub seed: u64,
    pub mode: SamplingMode,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 1,
            mode: SamplingMode::Random,
        }
    }
}

/// Optional replacements for the documented defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub sigma0: Option<f64>,
    pub mass: Option<f64>,
    pub wavenumber: Option<f64>,
    pub source_offset: Option<f64>,
    pub arm_length: Option<f64>,
    pub detector_distance: Option<f64>,
    pub detector_radius: Option<f64>,
    pub bs1_reflectance: Option<f64>,
    pub bs2_reflectance: Option<f64>,
    pub marker_channel: Option<Channel>,
    pub marker_position: Option<Vec2>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub sampling: Option<SamplingMode>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub sample_dt: Option<f64>,
    /// Factor applied per reflection; only fault-injection tests change it.
    pub reflection_factor: Option<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioName,
    pub layout: Layout,
    pub marker: MarkerModel,
    pub bs2_schedule: Bs2Schedule,
    pub ensemble: EnsembleSpec,
    pub tolerances: Tolerances,
    pub t_end: f64,
}

/// Builds a scenario from its name and overrides.
pub fn build(name: ScenarioName, overrides: &Overrides) -> Result<Scenario, ScenarioError> {
    let schedule = match &name {
        ScenarioName::WheelerClosed => Bs2Schedule::Present,
        ScenarioName::WheelerDelayed { t_c, direction } => {
            if !t_c.is_finite() {
                return Err(ScenarioError::Invalid("t_c must be finite".into()));
            }
            match direction {
                Direction::Insert => Bs2Schedule::InsertAt(*t_c),
                Direction::Remove => Bs2Schedule::RemoveAt(*t_c),
            }
        }
        _ => Bs2Schedule::Absent,
    };
    let d = LayoutParams::default();
    let params = LayoutParams {
        sigma0: overrides.sigma0.unwrap_or(d.sigma0),
        mass: overrides.mass.unwrap_or(d.mass),
        wavenumber: overrides.wavenumber.unwrap_or(d.wavenumber),
        source_offset: overrides.source_offset.unwrap_or(d.source_offset),
        arm_length: overrides.arm_length.unwrap_or(d.arm_length),
        detector_distance: overrides.detector_distance.unwrap_or(d.detector_distance),
        bs1_reflectance: overrides.bs1_reflectance.unwrap_or(FRAC_1_SQRT_2),
        bs2_reflectance: overrides.bs2_reflectance.unwrap_or(FRAC_1_SQRT_2),
        bs2_active: ActiveInterval::NEVER,
        detector_radius: overrides.detector_radius,
        reflection_factor: overrides.reflection_factor.unwrap_or(d.reflection_factor),
    };
    // the transit window is measured on the unswitched layout
    let probe = Layout::mach_zehnder(&params)?;
    if let Some(t_c) = schedule.switch_time() {
        let (start, end) = transit_window(&probe);
        if t_c >= start && t_c <= end {
            return Err(ScenarioError::ScheduleInsideTransit { t_c, start, end });
        }
    }
    let layout = Layout::mach_zehnder(&LayoutParams {
        bs2_active: schedule.interval(),
        ..params
    })?;

    let kind = match &name {
        ScenarioName::EsswSpin { efficiency_sq } => MarkerKind::Discrete {
            efficiency_sq: *efficiency_sq,
        },
        ScenarioName::AvPointer {
            ejection_speed,
            pointer_sigma,
            pointer_mass,
        } => MarkerKind::Pointer {
            ejection_speed: *ejection_speed,
            pointer_sigma: *pointer_sigma,
            pointer_mass: *pointer_mass,
        },
        _ => MarkerKind::None,
    };
    let channel = overrides.marker_channel.unwrap_or(Channel::Two);
    let position = overrides.marker_position.unwrap_or_else(|| {
        let half = 0.5 * layout.geometry.arm_length;
        match channel {
            Channel::One => Vec2::new(0.0, half),
            Channel::Two => Vec2::new(half, 0.0),
        }
    });
    let marker = MarkerModel::new(kind, channel, position);
    marker.validate()?;

    let ensemble = EnsembleSpec {
        n: overrides.n.unwrap_or(EnsembleSpec::default().n),
        seed: overrides.seed.unwrap_or(EnsembleSpec::default().seed),
        mode: overrides.sampling.unwrap_or(SamplingMode::Random),
    };
    if ensemble.n == 0 {
        return Err(ScenarioError::Invalid("ensemble size must be at least 1".into()));
    }
    let dt = Tolerances::default();
    let tolerances = Tolerances {
        rtol: overrides.rtol.unwrap_or(dt.rtol),
        atol: overrides.atol.unwrap_or(dt.atol),
        sample_dt: overrides.sample_dt.unwrap_or(dt.sample_dt),
    };
    tolerances.validate()?;
    let radius = layout.detector_radius(DetectorId::D1);
    let t_end = layout.detector_arrival_time() + 2.0 * radius / layout.speed();
    let scenario = Scenario {
        name,
        layout,
        marker,
        bs2_schedule: schedule,
        ensemble,
        tolerances,
        t_end,
    };
    // resolve once so configuration problems surface here
    scenario.wave_field()?;
    Ok(scenario)
}

/// Times during which some packet occupies the I2 neighborhood.
pub fn transit_window(layout: &Layout) -> (f64, f64) {
    let t2 = layout.i2_arrival_time();
    let w = layout.source.width_at(t2);
    let half = (layout.geometry.i2_radius + 5.0 * w) / layout.speed();
    (t2 - half, t2 + half)
}

impl Scenario {
    pub fn wave_field(&self) -> Result<WaveField, ScenarioError> {
        let ctx = MarkerContext::new(self.marker.clone(), &self.layout)?;
        Ok(WaveField::new(
            self.layout.clone(),
            ctx,
            self.tolerances,
            self.t_end,
        )?)
    }

    pub fn initial_ensemble(&self) -> Vec<Configuration> {
        let pointer_sigma = match self.marker.kind {
            MarkerKind::Pointer { pointer_sigma, .. } => Some(pointer_sigma),
            _ => None,
        };
        sample_ensemble(
            &self.layout.source,
            pointer_sigma,
            self.ensemble.n,
            self.ensemble.seed,
            self.ensemble.mode,
        )
    }

    /// SHA-256 of the canonical JSON form of the scenario.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn with_ensemble(mut self, n: usize, seed: u64) -> Self {
        self.ensemble.n = n;
        self.ensemble.seed = seed;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapClass {
    Straight,
    Swap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerOutcome {
    Up,
    Down,
    Unfired,
    Fired,
}

impl MarkerOutcome {
    pub fn excited(self) -> bool {
        matches!(self, MarkerOutcome::Down | MarkerOutcome::Fired)
    }
}

/// Straight iff the terminal detector lies on the ballistic continuation of
/// the trajectory's post-BS1 channel.
pub fn classify_swap(trajectory: &Trajectory, layout: &Layout) -> Option<SwapClass> {
    let terminal = trajectory.terminal?;
    let channel = trajectory.channel?;
    Some(if layout.ballistic_detector(channel) == terminal {
        SwapClass::Straight
    } else {
        SwapClass::Swap
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: usize,
    pub initial: Configuration,
    pub channel: Option<Channel>,
    pub terminal: Option<DetectorId>,
    pub marker_outcome: Option<MarkerOutcome>,
    pub class: Option<SwapClass>,
    pub flag: Option<TrajectoryFlag>,
    pub final_time: f64,
    pub max_quantum_potential: f64,
    pub min_modulus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCount {
    pub detector: DetectorId,
    pub marker: Option<MarkerOutcome>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub flagged: usize,
    pub node_flagged: usize,
    pub counted: usize,
    pub d1: usize,
    pub d2: usize,
    pub p_d1: f64,
    pub p_d2: f64,
    /// `[channel][detector]` terminal counts.
    pub channel_detector: [[usize; 2]; 2],
    pub joint: Vec<JointCount>,
    pub straight: usize,
    pub swap: usize,
    /// Pairs of straight channel-1 and straight channel-2 trajectories; such
    /// pairs must cross in the output region.
    pub crossing_count: usize,
    /// Excited markers whose particle never entered the marked arm.
    pub excited_outside_marked_arm: usize,
}

impl Aggregates {
    pub fn joint_count(&self, detector: DetectorId, marker: Option<MarkerOutcome>) -> usize {
        self.joint
            .iter()
            .find(|j| j.detector == detector && j.marker == marker)
            .map(|j| j.count)
            .unwrap_or(0)
    }

    pub fn channel_count(&self, channel: Channel) -> usize {
        self.channel_detector[channel.index()].iter().sum()
    }

    /// Straight fraction among counted trajectories of one channel.
    pub fn straight_fraction(&self, channel: Channel, layout: &Layout) -> f64 {
        let total = self.channel_count(channel);
        if total == 0 {
            return f64::NAN;
        }
        let straight = self.channel_detector[channel.index()][layout.ballistic_detector(channel).index()];
        straight as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub tolerances: Tolerances,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub aggregates: Aggregates,
    pub trajectories: Vec<TrajectoryRecord>,
}

fn record(id: usize, q0: Configuration, tr: &Trajectory, field: &WaveField) -> TrajectoryRecord {
    let last = tr.last();
    let marker_outcome = match field.marker.model.kind {
        MarkerKind::None => None,
        MarkerKind::Discrete { .. } => tr.beable.discrete_value.map(|s| match s {
            Spin::Up => MarkerOutcome::Up,
            Spin::Down => MarkerOutcome::Down,
        }),
        MarkerKind::Pointer { .. } => last.pointer.map(|y| {
            if field.marker.pointer_fired_at(y, last.t) {
                MarkerOutcome::Fired
            } else {
                MarkerOutcome::Unfired
            }
        }),
    };
    TrajectoryRecord {
        id,
        initial: q0,
        channel: tr.channel,
        terminal: tr.terminal,
        marker_outcome,
        class: classify_swap(tr, &field.layout),
        flag: tr.flag,
        final_time: last.t,
        max_quantum_potential: tr.diagnostics.max_quantum_potential,
        min_modulus: tr.diagnostics.min_modulus,
    }
}

fn aggregate(records: &[TrajectoryRecord], marked: Channel) -> Aggregates {
    let n = records.len();
    let flagged = records.iter().filter(|r| r.flag.is_some()).count();
    let node_flagged = records
        .iter()
        .filter(|r| r.flag == Some(TrajectoryFlag::NodeDegenerate))
        .count();
    let mut agg = Aggregates {
        n,
        flagged,
        node_flagged,
        counted: 0,
        d1: 0,
        d2: 0,
        p_d1: 0.0,
        p_d2: 0.0,
        channel_detector: [[0; 2]; 2],
        joint: Vec::new(),
        straight: 0,
        swap: 0,
        crossing_count: 0,
        excited_outside_marked_arm: 0,
    };
    let mut straight_by_channel = [0usize; 2];
    for r in records.iter().filter(|r| r.flag.is_none()) {
        let Some(det) = r.terminal else { continue };
        agg.counted += 1;
        match det {
            DetectorId::D1 => agg.d1 += 1,
            DetectorId::D2 => agg.d2 += 1,
        }
        if let Some(ch) = r.channel {
            agg.channel_detector[ch.index()][det.index()] += 1;
        }
        match agg.joint.iter_mut().find(|j| j.detector == det && j.marker == r.marker_outcome) {
            Some(j) => j.count += 1,
            None => agg.joint.push(JointCount {
                detector: det,
                marker: r.marker_outcome,
                count: 1,
            }),
        }
        match r.class {
            Some(SwapClass::Straight) => {
                agg.straight += 1;
                if let Some(ch) = r.channel {
                    straight_by_channel[ch.index()] += 1;
                }
            }
            Some(SwapClass::Swap) => agg.swap += 1,
            None => {}
        }
        if r.marker_outcome.is_some_and(MarkerOutcome::excited) && r.channel != Some(marked) {
            agg.excited_outside_marked_arm += 1;
        }
    }
    agg.joint.sort_by_key(|j| (j.detector, j.marker));
    if agg.counted > 0 {
        agg.p_d1 = agg.d1 as f64 / agg.counted as f64;
        agg.p_d2 = agg.d2 as f64 / agg.counted as f64;
    }
    agg.crossing_count = straight_by_channel[0] * straight_by_channel[1];
    agg
}

fn assemble(scenario: &Scenario, records: Vec<TrajectoryRecord>) -> Result<RunReport, ScenarioError> {
    let aggregates = aggregate(&records, scenario.marker.placement_channel);
    let report = RunReport {
        provenance: Provenance {
            scenario: scenario.name.slug().to_string(),
            config_hash: scenario.config_hash(),
            seed: scenario.ensemble.seed,
            n: scenario.ensemble.n,
            tolerances: scenario.tolerances,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        aggregates,
        trajectories: records,
    };
    let n = report.aggregates.n;
    if report.aggregates.node_flagged as f64 > NODE_FLAG_BUDGET * n as f64 {
        return Err(ScenarioError::NodeBudgetExceeded {
            flagged: report.aggregates.node_flagged,
            n,
            budget: NODE_FLAG_BUDGET,
        });
    }
    Ok(report)
}

/// Runs the ensemble and keeps only the per-trajectory records.
pub fn run(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    run_detailed(scenario, &Recording::Endpoints).map(|(r, _)| r)
}

/// Runs the ensemble, returning the report and every trajectory with the
/// requested samples.
pub fn run_detailed(
    scenario: &Scenario,
    recording: &Recording,
) -> Result<(RunReport, Vec<Trajectory>), ScenarioError> {
    let field = scenario.wave_field()?;
    let initial = scenario.initial_ensemble();
    let seed = scenario.ensemble.seed;
    let results: Vec<Result<Trajectory, PilotError>> = initial
        .par_iter()
        .enumerate()
        .map(|(i, q0)| {
            let mut rng = trajectory_rng(seed, i);
            field.integrate(*q0, scenario.t_end, &mut rng, recording)
        })
        .collect();
    let mut trajectories = Vec::with_capacity(results.len());
    for r in results {
        trajectories.push(r?);
    }
    let records = trajectories
        .iter()
        .zip(&initial)
        .enumerate()
        .map(|(i, (tr, q0))| record(i, *q0, tr, &field))
        .collect();
    Ok((assemble(scenario, records)?, trajectories))
}

fn same_except_schedule(a: &Scenario, b: &Scenario) -> bool {
    let strip = |s: &Scenario| {
        let mut l = s.layout.clone();
        for e in &mut l.elements {
            e.active = ActiveInterval::ALWAYS;
        }
        (l, s.marker.clone(), s.tolerances, s.t_end)
    };
    strip(a) == strip(b)
}

/// Largest distance between matched trajectories of two schedules, over all
/// sample times before any packet reaches the I2 neighborhood (center
/// distance above the I2 radius plus five packet widths).
pub fn delayed_choice_prefix_check(
    pair: (&Scenario, &Scenario),
    initial: &[Configuration],
    seed: u64,
) -> Result<f64, ScenarioError> {
    let (a, b) = pair;
    if !same_except_schedule(a, b) {
        return Err(ScenarioError::NotASchedulePair);
    }
    let fa = a.wave_field()?;
    let fb = b.wave_field()?;
    let layout = &a.layout;
    let center = layout.geometry.i2_center;
    let radius = layout.geometry.i2_radius;
    let outside = |t: f64| {
        let w = layout.source.width_at(t);
        fa.branches_at(t)
            .iter()
            .all(|br| (br.packet.center_at(t) - center).norm() > radius + 5.0 * w)
    };
    let horizon = fa
        .stop_times()
        .into_iter()
        .take_while(|&t| outside(t))
        .last()
        .unwrap_or(layout.source.birth_time);
    let devs: Vec<Result<f64, PilotError>> = initial
        .par_iter()
        .enumerate()
        .map(|(i, q0)| {
            let ta = fa.integrate(*q0, horizon, &mut trajectory_rng(seed, i), &Recording::All)?;
            let tb = fb.integrate(*q0, horizon, &mut trajectory_rng(seed, i), &Recording::All)?;
            let mut worst: f64 = 0.0;
            for (p, q) in ta.samples.iter().zip(&tb.samples) {
                if p.t != q.t {
                    return Ok(f64::INFINITY);
                }
                let mut d = (p.particle - q.particle).norm_sq();
                if let (Some(x), Some(y)) = (p.pointer, q.pointer) {
                    d += (x - y) * (x - y);
                }
                worst = worst.max(d.sqrt());
            }
            if ta.samples.len() != tb.samples.len() {
                return Ok(f64::INFINITY);
            }
            Ok(worst)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for d in devs {
        worst = worst.max(d?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_branch_algebra_gives_dark_d2() {
        let s = build(ScenarioName::WheelerClosed, &Overrides::default()).unwrap();
        let t = s.layout.detector_arrival_time() + 0.5;
        let branches = crate::optics::propagate_branches(&s.layout, t).unwrap();
        let amps = crate::optics::detector_amplitudes(&s.layout, &branches);
        let d2: Complex64 = amps
            .iter()
            .filter(|a| a.detector == DetectorId::D2)
            .map(|a| a.total())
            .sum();
        assert!(d2.norm_sqr() < 1e-24);
    }

    #[test]
    fn essw_defaults() {
        let s = build(ScenarioName::EsswSpin { efficiency_sq: 1.0 }, &Overrides::default()).unwrap();
        assert_eq!(s.marker.placement_channel, Channel::Two);
        assert_eq!(s.bs2_schedule, Bs2Schedule::Absent);
        assert!(matches!(s.marker.kind, MarkerKind::Discrete { efficiency_sq } if efficiency_sq == 1.0));
    }

    #[test]
    fn schedule_inside_transit_rejected() {
        let open = build(ScenarioName::WheelerOpen, &Overrides::default()).unwrap();
        let t2 = open.layout.i2_arrival_time();
        for direction in [Direction::Insert, Direction::Remove] {
            let err = build(ScenarioName::WheelerDelayed { t_c: t2, direction }, &Overrides::default())
                .unwrap_err();
            assert!(matches!(err, ScenarioError::ScheduleInsideTransit { .. }));
        }
    }

    #[test]
    fn late_insert_is_open() {
        let o = Overrides {
            n: Some(40),
            ..Overrides::default()
        };
        let open = build(ScenarioName::WheelerOpen, &o).unwrap();
        let late = build(
            ScenarioName::WheelerDelayed {
                t_c: open.t_end + 1.0,
                direction: Direction::Insert,
            },
            &o,
        )
        .unwrap();
        let a = run(&open).unwrap();
        let b = run(&late).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn classification_by_ballistic_continuation() {
        let layout = build(ScenarioName::WheelerOpen, &Overrides::default()).unwrap().layout;
        let mut tr = Trajectory {
            samples: vec![Configuration {
                particle: Vec2::ZERO,
                pointer: None,
                t: 0.0,
            }],
            terminal: Some(DetectorId::D1),
            channel: Some(Channel::One),
            beable: Default::default(),
            flag: None,
            diagnostics: Default::default(),
        };
        assert_eq!(classify_swap(&tr, &layout), Some(SwapClass::Straight));
        tr.channel = Some(Channel::Two);
        assert_eq!(classify_swap(&tr, &layout), Some(SwapClass::Swap));
        tr.terminal = None;
        assert_eq!(classify_swap(&tr, &layout), None);
    }

    #[test]
    fn identical_scenarios_have_zero_prefix_deviation() {
        let s = build(
            ScenarioName::WheelerOpen,
            &Overrides {
                n: Some(8),
                ..Overrides::default()
            },
        )
        .unwrap();
        let init = s.initial_ensemble();
        assert_eq!(delayed_choice_prefix_check((&s, &s), &init, 1).unwrap(), 0.0);
    }

    #[test]
    fn small_open_run_swaps() {
        let s = build(
            ScenarioName::WheelerOpen,
            &Overrides {
                n: Some(30),
                ..Overrides::default()
            },
        )
        .unwrap();
        let r = run(&s).unwrap();
        assert_eq!(r.aggregates.straight, 0);
        assert_eq!(r.aggregates.crossing_count, 0);
        assert_eq!(r.aggregates.counted + r.aggregates.flagged, 30);
    }
}
