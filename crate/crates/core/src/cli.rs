//! Command-line front end: `run`, `sweep` and `validate`.
//!
//! Configuration is TOML with one table per concern. Every key is optional
//! except `scenario`; unknown keys are rejected.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marker::{MarkerBeable, MarkerKind, Spin};
use crate::optics::{Channel, DetectorId, ElementKind, Layout};
use crate::oracle;
use crate::pilotwave::{min_pairwise_separation, Configuration, Recording, SamplingMode, Trajectory};
use crate::scenarios::{self, Direction, Overrides, RunReport, Scenario, ScenarioError, ScenarioName};
use crate::vec2::Vec2;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn from_build(e: ScenarioError) -> CliError {
    CliError::Config(e.to_string())
}

fn from_run(e: ScenarioError) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Trajectories,
    Fields,
    Svg,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arm_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_offset: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_radius: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavenumber: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bs1_reflectance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bs2_reflectance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub efficiency_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ejection_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointer_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointer_mass: Option<f64>,
    /// Arm carrying the marker: 1 or 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<SamplingMode>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_dt: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub emit: Vec<Emit>,
    /// Time of the quantum-potential grid; defaults to the I2 arrival.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_time: Option<f64>,
    /// Half side of the square grid around the I2 center.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_half_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_resolution: Option<usize>,
    /// Marker value used for the conditional field of a spin marker.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_spin: Option<Spin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svg_max_trajectories: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "is_default")]
    pub geometry: GeometryConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub packet: PacketConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub optics: OpticsConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub schedule: ScheduleConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub marker: MarkerConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub ensemble: EnsembleConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Scenario name and overrides, rejecting keys that do not apply.
    pub fn scenario_parts(&self) -> Result<(ScenarioName, Overrides), CliError> {
        let m = &self.marker;
        let s = &self.schedule;
        let unused = |what: &str| Err(CliError::Config(format!("{what} does not apply to {}", self.scenario)));
        let spin_keys = m.efficiency_sq.is_some();
        let pointer_keys = m.ejection_speed.is_some() || m.pointer_sigma.is_some() || m.pointer_mass.is_some();
        let any_marker = spin_keys || pointer_keys || m.channel.is_some() || m.position.is_some();
        let schedule_keys = s.t_c.is_some() || s.direction.is_some();
        let name = match self.scenario.as_str() {
            "wheeler_open" | "wheeler_closed" | "wheeler_delayed" if any_marker => return unused("marker"),
            "wheeler_open" | "wheeler_closed" | "essw_spin" | "av_pointer" if schedule_keys => return unused("schedule"),
            "essw_spin" if pointer_keys => return unused("marker pointer keys"),
            "av_pointer" if spin_keys => return unused("marker.efficiency_sq"),
            "wheeler_open" => ScenarioName::WheelerOpen,
            "wheeler_closed" => ScenarioName::WheelerClosed,
            "wheeler_delayed" => ScenarioName::WheelerDelayed {
                t_c: s
                    .t_c
                    .ok_or_else(|| CliError::Config("wheeler_delayed needs schedule.t_c".into()))?,
                direction: s
                    .direction
                    .ok_or_else(|| CliError::Config("wheeler_delayed needs schedule.direction".into()))?,
            },
            "essw_spin" => ScenarioName::EsswSpin {
                efficiency_sq: m.efficiency_sq.unwrap_or(1.0),
            },
            "av_pointer" => {
                let ScenarioName::AvPointer {
                    ejection_speed,
                    pointer_sigma,
                    pointer_mass,
                } = ScenarioName::av_pointer_default()
                else {
                    unreachable!()
                };
                ScenarioName::AvPointer {
                    ejection_speed: m.ejection_speed.unwrap_or(ejection_speed),
                    pointer_sigma: m.pointer_sigma.unwrap_or(pointer_sigma),
                    pointer_mass: m.pointer_mass.unwrap_or(pointer_mass),
                }
            }
            other => return Err(CliError::Config(format!("unknown scenario {other:?}"))),
        };
        let marker_channel = match m.channel {
            None => None,
            Some(1) => Some(Channel::One),
            Some(2) => Some(Channel::Two),
            Some(c) => return Err(CliError::Config(format!("marker.channel must be 1 or 2, got {c}"))),
        };
        let overrides = Overrides {
            sigma0: self.packet.sigma0,
            mass: self.packet.mass,
            wavenumber: self.packet.wavenumber,
            source_offset: self.geometry.source_offset,
            arm_length: self.geometry.arm_length,
            detector_distance: self.geometry.detector_distance,
            detector_radius: self.geometry.detector_radius,
            bs1_reflectance: self.optics.bs1_reflectance,
            bs2_reflectance: self.optics.bs2_reflectance,
            marker_channel,
            marker_position: m.position.map(|[x, y]| Vec2::new(x, y)),
            n: self.ensemble.n,
            seed: self.ensemble.seed,
            sampling: self.ensemble.mode,
            rtol: self.integrator.rtol,
            atol: self.integrator.atol,
            sample_dt: self.integrator.sample_dt,
            reflection_factor: None,
        };
        Ok((name, overrides))
    }

    pub fn build(&self) -> Result<Scenario, CliError> {
        let (name, overrides) = self.scenario_parts()?;
        scenarios::build(name, &overrides).map_err(from_build)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mzpilot", version, about = "Pilot-wave trajectories in a Mach-Zehnder interferometer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its report.
    Run(RunArgs),
    /// Run a scenario once per parameter value and write a summary CSV.
    Sweep(SweepArgs),
    /// Run the oracle suite and print a pass/fail table.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    /// Extra outputs, comma separated.
    #[arg(long, value_delimiter = ',')]
    emit: Vec<Emit>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    #[value(name = "a2")]
    EfficiencySq,
    #[value(name = "t_c")]
    SwitchTime,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    param: SweepParam,
    /// Comma-separated parameter values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Optional config supplying integrator tolerances and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size for the statistical checks.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, hide = true)]
    fault_reflection_minus_i: bool,
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I>(args: I) -> i32
where
    I: IntoIterator<Item = OsString>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a.common),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Validate(a) => cmd_validate(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mzpilot: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<(RunConfig, PathBuf, Vec<Emit>), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.ensemble.seed = Some(s);
    }
    if let Some(n) = common.n {
        cfg.ensemble.n = Some(n);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut emit = cfg.output.emit.clone();
    emit.extend(common.emit.iter().copied());
    emit.sort();
    emit.dedup();
    Ok((cfg, out, emit))
}

/// Rendered output files of one run, written only once all are ready.
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn write(self) -> Result<(), CliError> {
        for (path, bytes) in &self.0 {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)
                    .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
            }
            fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn render_run(
    cfg: &RunConfig,
    scenario: &Scenario,
    emit: &[Emit],
    dir: &Path,
) -> Result<(RunReport, Outputs), CliError> {
    let need_paths = emit.contains(&Emit::Trajectories) || emit.contains(&Emit::Svg);
    let recording = if need_paths { Recording::All } else { Recording::Endpoints };
    let (report, trajectories) = scenarios::run_detailed(scenario, &recording).map_err(from_run)?;
    let mut files = Vec::new();
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    json.push('\n');
    files.push((dir.join("report.json"), json.into_bytes()));
    if emit.contains(&Emit::Trajectories) {
        files.push((dir.join("trajectories.csv"), trajectories_csv(&trajectories).into_bytes()));
    }
    if emit.contains(&Emit::Fields) {
        files.push((dir.join("fields.csv"), field_csv(cfg, scenario)?.into_bytes()));
    }
    if emit.contains(&Emit::Svg) {
        let max = cfg.output.svg_max_trajectories.unwrap_or(200);
        files.push((
            dir.join("trajectories.svg"),
            svg(&scenario.layout, &trajectories, max).into_bytes(),
        ));
    }
    Ok((report, Outputs(files)))
}

fn cmd_run(common: &CommonArgs) -> Result<i32, CliError> {
    let (cfg, out, emit) = load_config(common)?;
    let scenario = cfg.build()?;
    let (report, outputs) = render_run(&cfg, &scenario, &emit, &out)?;
    outputs.write()?;
    let a = &report.aggregates;
    eprintln!(
        "{}: n = {}, D1 = {}, D2 = {}, flagged = {}, written to {}",
        report.provenance.scenario,
        a.n,
        a.d1,
        a.d2,
        a.flagged,
        out.display()
    );
    Ok(EXIT_OK)
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.16e}")
    }
}

/// CSV with one row per recorded sample.
pub fn trajectories_csv(trajectories: &[Trajectory]) -> String {
    let pointer = trajectories
        .iter()
        .any(|t| t.samples.first().is_some_and(|s| s.pointer.is_some()));
    let mut s = String::from(if pointer {
        "trajectory_id,t,x,y,pointer_y,flag\n"
    } else {
        "trajectory_id,t,x,y,flag\n"
    });
    for (i, tr) in trajectories.iter().enumerate() {
        let flag = tr.flag.map(|f| f.label()).unwrap_or("");
        for c in &tr.samples {
            let _ = write!(s, "{i},{},{},{}", fmt_f64(c.t), fmt_f64(c.particle.x), fmt_f64(c.particle.y));
            if pointer {
                let _ = write!(s, ",{}", fmt_f64(c.pointer.unwrap_or(f64::NAN)));
            }
            let _ = writeln!(s, ",{flag}");
        }
    }
    s
}

/// Quantum potential and `|Ψ|²` of the conditional wave on a square grid.
fn field_csv(cfg: &RunConfig, scenario: &Scenario) -> Result<String, CliError> {
    let field = scenario.wave_field().map_err(from_build)?;
    let layout = &scenario.layout;
    let t = cfg.output.field_time.unwrap_or_else(|| layout.i2_arrival_time());
    if !(t >= layout.source.birth_time && t <= scenario.t_end) {
        return Err(CliError::Config(format!("output.field_time {t} outside the run")));
    }
    let half = cfg.output.field_half_width.unwrap_or(layout.geometry.i2_radius);
    let n = cfg.output.field_resolution.unwrap_or(161);
    if n < 2 || !(half > 0.0) {
        return Err(CliError::Config("field grid needs resolution >= 2 and a positive half width".into()));
    }
    let pointer = field.marker.pointer.as_ref().map(|(u, _)| u.center_at(t));
    let mut beable = MarkerBeable::for_model(&scenario.marker, pointer.unwrap_or(0.0));
    if matches!(scenario.marker.kind, MarkerKind::Discrete { .. }) && t >= field.marker.t_interaction {
        beable = MarkerBeable::discrete(cfg.output.field_spin.unwrap_or(Spin::Up));
    }
    let c = layout.geometry.i2_center;
    let h = 2.0 * half / (n - 1) as f64;
    let mut s = String::from("x,y,Q,R2\n");
    for j in 0..n {
        for i in 0..n {
            let q = Configuration {
                particle: Vec2::new(c.x - half + i as f64 * h, c.y - half + j as f64 * h),
                pointer,
                t,
            };
            let r2 = field.field_jet(&beable, &q).value.norm_sqr();
            let qp = field.dynamics(&beable, &q).map(|d| d.quantum_potential).unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "{},{},{},{}",
                fmt_f64(q.particle.x),
                fmt_f64(q.particle.y),
                fmt_f64(qp),
                fmt_f64(r2)
            );
        }
    }
    Ok(s)
}

/// Layout with trajectory fans, y axis pointing up.
pub fn svg(layout: &Layout, trajectories: &[Trajectory], max_trajectories: usize) -> String {
    let mut lo = layout.source.center;
    let mut hi = layout.source.center;
    for e in &layout.elements {
        let r = match e.kind {
            ElementKind::Detector { radius, .. } => radius,
            _ => e.half_width,
        };
        lo = Vec2::new(lo.x.min(e.position.x - r), lo.y.min(e.position.y - r));
        hi = Vec2::new(hi.x.max(e.position.x + r), hi.y.max(e.position.y + r));
    }
    let pad = 5.0;
    let (x0, y0) = (lo.x - pad, lo.y - pad);
    let (w, h) = (hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad);
    let px = |p: Vec2| (p.x - x0, y0 + h - p.y);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.3} {h:.3}\" width=\"{:.0}\" height=\"{:.0}\">",
        w * 8.0,
        h * 8.0
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{w:.3}\" height=\"{h:.3}\" fill=\"white\"/>");
    for e in &layout.elements {
        match e.kind {
            ElementKind::Detector { id, radius } => {
                let (cx, cy) = px(e.position);
                let _ = writeln!(
                    s,
                    "<circle cx=\"{cx:.3}\" cy=\"{cy:.3}\" r=\"{radius:.3}\" fill=\"none\" stroke=\"black\" stroke-width=\"0.3\"/>"
                );
                let _ = writeln!(
                    s,
                    "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"3\" font-family=\"sans-serif\">{}</text>",
                    cx + radius + 1.0,
                    cy,
                    id.label()
                );
            }
            _ => {
                let (a, b) = (px(e.position - e.tangent() * e.half_width), px(e.position + e.tangent() * e.half_width));
                let (color, width, dash) = match e.kind {
                    ElementKind::Mirror => ("black", 0.8, ""),
                    _ if e.active == crate::optics::ActiveInterval::NEVER => ("gray", 0.4, " stroke-dasharray=\"1,1\""),
                    _ => ("steelblue", 0.5, ""),
                };
                let _ = writeln!(
                    s,
                    "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>",
                    a.0, a.1, b.0, b.1
                );
            }
        }
    }
    let n = trajectories.len();
    let take = max_trajectories.min(n);
    for k in 0..take {
        let tr = &trajectories[k * n / take];
        let color = match tr.channel {
            Some(Channel::One) => "#1f77b4",
            Some(Channel::Two) => "#d62728",
            None => "#7f7f7f",
        };
        let mut pts = String::new();
        for c in &tr.samples {
            let (x, y) = px(c.particle);
            let _ = write!(pts, "{x:.3},{y:.3} ");
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.15\" stroke-opacity=\"0.8\"/>",
            pts.trim_end()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32, CliError> {
    if args.values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let (cfg, out, emit) = load_config(&args.common)?;
    let mut runs = Vec::with_capacity(args.values.len());
    for &v in &args.values {
        let mut c = cfg.clone();
        match (args.param, c.scenario.as_str()) {
            (SweepParam::EfficiencySq, "essw_spin") => c.marker.efficiency_sq = Some(v),
            (SweepParam::SwitchTime, "wheeler_delayed") => c.schedule.t_c = Some(v),
            (p, s) => return Err(CliError::Config(format!("cannot sweep {p:?} for scenario {s}"))),
        }
        let scenario = c.build()?;
        runs.push((v, c, scenario));
    }
    let mut outputs = Vec::new();
    let mut summary = String::from("value,p_d1,p_d2,straight_fraction_ch1,straight_fraction_ch2\n");
    for (i, (v, c, scenario)) in runs.iter().enumerate() {
        let (report, files) = render_run(c, scenario, &emit, &out.join(format!("run_{i:03}")))?;
        outputs.extend(files.0);
        let a = &report.aggregates;
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            fmt_f64(*v),
            fmt_f64(a.p_d1),
            fmt_f64(a.p_d2),
            fmt_f64(a.straight_fraction(Channel::One, &scenario.layout)),
            fmt_f64(a.straight_fraction(Channel::Two, &scenario.layout))
        );
    }
    outputs.push((out.join("summary.csv"), summary.into_bytes()));
    Outputs(outputs).write()?;
    eprintln!("sweep: {} runs written to {}", runs.len(), out.display());
    Ok(EXIT_OK)
}

/// One row of the validation table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Settings of the oracle suite.
#[derive(Clone, Debug)]
pub struct ValidateOptions {
    pub n: usize,
    pub seed: u64,
    pub overrides: Overrides,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            n: 10_000,
            seed: 1,
            overrides: Overrides::default(),
        }
    }
}

fn check(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass,
        detail,
    }
}

fn failed(name: &str, e: impl std::fmt::Display) -> CheckResult {
    check(name, false, format!("error: {e}"))
}

/// Time at which the packets sit halfway along the arms.
fn arm_midpoint_time(layout: &Layout) -> f64 {
    let bs1 = &layout.elements[layout.element_index("BS1").expect("layout has BS1")];
    let path = (bs1.position - layout.source.center).norm() + 0.5 * layout.geometry.arm_length;
    layout.source.birth_time + path / layout.speed()
}

/// Runs every oracle check and returns the table rows.
pub fn validation_suite(opts: &ValidateOptions) -> Vec<CheckResult> {
    let mut rows = Vec::new();
    let ov = |extra: Overrides| Overrides {
        n: Some(opts.n),
        seed: Some(opts.seed),
        ..extra
    };
    let base = ov(opts.overrides.clone());
    let build = |name: ScenarioName| scenarios::build(name, &base);

    match build(ScenarioName::WheelerClosed) {
        Ok(s) => match oracle::closed_amplitude_deviation(&s.layout, s.t_end) {
            Ok(d) => rows.push(check("amplitude_algebra", d < 1e-12, format!("max coefficient deviation {d:.3e}"))),
            Err(e) => rows.push(failed("amplitude_algebra", e)),
        },
        Err(e) => rows.push(failed("amplitude_algebra", e)),
    }

    let open = match build(ScenarioName::WheelerOpen) {
        Ok(s) => s,
        Err(e) => {
            rows.push(failed("build", e));
            return rows;
        }
    };
    let early = arm_midpoint_time(&open.layout) + 0.25;
    let mut builtins = vec![
        ScenarioName::WheelerOpen,
        ScenarioName::WheelerClosed,
        ScenarioName::WheelerDelayed {
            t_c: early,
            direction: Direction::Insert,
        },
        ScenarioName::WheelerDelayed {
            t_c: early,
            direction: Direction::Remove,
        },
        ScenarioName::av_pointer_default(),
    ];
    for a2 in [0.0, 0.25, 0.5, 0.75, 1.0] {
        builtins.push(ScenarioName::EsswSpin { efficiency_sq: a2 });
    }
    let mut worst_gap: f64 = 0.0;
    let mut worst_conv: f64 = 0.0;
    let mut born_err = None;
    for name in &builtins {
        let s = match build(name.clone()) {
            Ok(s) => s,
            Err(e) => {
                born_err = Some(e.to_string());
                break;
            }
        };
        for d in DetectorId::ALL {
            match oracle::born_estimate(&s, d, None) {
                Ok(e) => {
                    worst_gap = worst_gap.max((e.branch_algebra - e.quadrature).abs());
                    worst_conv = worst_conv.max(e.quadrature_convergence());
                }
                Err(e) => born_err = Some(e.to_string()),
            }
        }
    }
    match born_err {
        Some(e) => rows.push(failed("born_self_consistency", e)),
        None => {
            rows.push(check(
                "born_self_consistency",
                worst_gap <= oracle::ROUTE_AGREEMENT,
                format!("max route gap {worst_gap:.3e} over {} scenarios", builtins.len()),
            ));
            rows.push(check(
                "quadrature_convergence",
                worst_conv < 1e-5,
                format!("max change on doubling {worst_conv:.3e}"),
            ));
        }
    }

    let t2 = open.layout.i2_arrival_time();
    let fd_cases = [
        ScenarioName::WheelerOpen,
        ScenarioName::WheelerClosed,
        ScenarioName::EsswSpin { efficiency_sq: 0.5 },
        ScenarioName::av_pointer_default(),
    ];
    let mut fd = oracle::FdErrors::default();
    let mut fd_err = None;
    for (k, name) in fd_cases.iter().enumerate() {
        let res = build(name.clone()).map_err(oracle::OracleError::from).and_then(|s| {
            let field = s.wave_field()?;
            let pointer0 = field.marker.pointer.as_ref().map(|(u, _)| u.center_at(t2)).unwrap_or(0.0);
            let beable = match s.marker.kind {
                MarkerKind::Discrete { .. } => MarkerBeable::discrete(Spin::Up),
                _ => MarkerBeable::for_model(&s.marker, pointer0),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
            let pts = oracle::random_nonnode_points(
                &field,
                &beable,
                s.layout.geometry.i2_center,
                2.0 * s.layout.source.width_at(t2),
                t2,
                100,
                &mut rng,
            );
            oracle::fd_check(&field, &beable, &pts)
        });
        match res {
            Ok(e) => {
                fd.gradient = fd.gradient.max(e.gradient);
                fd.laplacian = fd.laplacian.max(e.laplacian);
                fd.velocity = fd.velocity.max(e.velocity);
                fd.quantum_potential = fd.quantum_potential.max(e.quantum_potential);
            }
            Err(e) => fd_err = Some(e.to_string()),
        }
    }
    match fd_err {
        Some(e) => rows.push(failed("fd_check", e)),
        None => {
            let pass = fd.gradient < 1e-6 && fd.laplacian < 1e-5 && fd.velocity < 1e-5 && fd.quantum_potential < 1e-5;
            rows.push(check(
                "fd_check",
                pass,
                format!(
                    "gradient {:.2e}, laplacian {:.2e}, velocity {:.2e}, Q {:.2e}",
                    fd.gradient, fd.laplacian, fd.velocity, fd.quantum_potential
                ),
            ));
        }
    }

    let checkpoints = [open.layout.source.birth_time, arm_midpoint_time(&open.layout), t2];
    match oracle::equivariance_multi(&open, &checkpoints, opts.n, 20) {
        Ok(rs) => {
            let pass = rs.iter().all(|r| r.pass);
            let detail = rs
                .iter()
                .map(|r| format!("t={:.2}: {:.1}/{:.1}", r.t, r.statistic, r.critical))
                .collect::<Vec<_>>()
                .join(", ");
            rows.push(check("equivariance", pass, detail));
        }
        Err(e) => rows.push(failed("equivariance", e)),
    }

    let n_small = opts.n.clamp(2, 1000);
    let prefix = (|| -> Result<f64, ScenarioError> {
        let small = open.clone().with_ensemble(n_small, opts.seed);
        let init = small.initial_ensemble();
        let closed = build(ScenarioName::WheelerClosed)?.with_ensemble(n_small, opts.seed);
        let insert = build(ScenarioName::WheelerDelayed {
            t_c: early,
            direction: Direction::Insert,
        })?
        .with_ensemble(n_small, opts.seed);
        let a = scenarios::delayed_choice_prefix_check((&small, &closed), &init, opts.seed)?;
        let b = scenarios::delayed_choice_prefix_check((&small, &insert), &init, opts.seed)?;
        Ok(a.max(b))
    })();
    match prefix {
        Ok(d) => rows.push(check("delayed_choice_prefix", d < 1e-8, format!("max prefix deviation {d:.3e}"))),
        Err(e) => rows.push(failed("delayed_choice_prefix", e)),
    }

    let crossing = (|| -> Result<f64, ScenarioError> {
        let small = open.clone().with_ensemble(n_small, opts.seed);
        let (_, trs) = scenarios::run_detailed(&small, &Recording::All)?;
        Ok(min_pairwise_separation(&trs))
    })();
    let floor = open.tolerances.atol.max(open.tolerances.rtol);
    match crossing {
        Ok(d) => rows.push(check(
            "non_crossing",
            d > floor,
            format!("min pairwise separation {d:.3e} over {n_small} trajectories"),
        )),
        Err(e) => rows.push(failed("non_crossing", e)),
    }
    rows
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32, CliError> {
    let mut opts = ValidateOptions::default();
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path)?;
        let (_, ov) = cfg.scenario_parts()?;
        opts.overrides = Overrides {
            rtol: ov.rtol,
            atol: ov.atol,
            sample_dt: ov.sample_dt,
            ..Overrides::default()
        };
        if let Some(s) = ov.seed {
            opts.seed = s;
        }
        if let Some(n) = ov.n {
            opts.n = n;
        }
    }
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    if let Some(n) = args.n {
        opts.n = n;
    }
    if args.fault_reflection_minus_i {
        opts.overrides.reflection_factor = Some(Complex64::new(0.0, -1.0));
    }
    let rows = validation_suite(&opts);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &rows {
        println!("{}  {:width$}  {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if rows.iter().all(|r| r.pass) {
        Ok(EXIT_OK)
    } else {
        Err(CliError::Runtime(format!(
            "{} of {} checks failed",
            rows.iter().filter(|r| !r.pass).count(),
            rows.len()
        )))
    }
}
