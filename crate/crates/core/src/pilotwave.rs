//! Guidance dynamics: velocity field, quantum potential, trajectory
//! integration and equilibrium ensembles.
//!
//! Between element events the wave function is a fixed superposition of free
//! packets (an *epoch*). At an active beam splitter the wave switches
//! instantaneously; the particle is then carried by the monotone transport
//! map that takes the pre-event density to the post-event density along the
//! element normal. All packets at such an event share center and envelope,
//! so both densities factor into the same envelope times a profile along the
//! normal, and the 1D map preserves the full distribution.

use std::cell::Cell;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use thiserror::Error;

use crate::marker::{interact, split_branches, MarkerBeable, MarkerContext, MarkerError, MarkerLabel, Spin};
use crate::optics::{
    propagate_branches, Branch, Channel, DetectorId, Layout, OpticsError, EVENT_TIME_TOL,
};
use crate::vec2::Vec2;
use crate::wavepacket::GaussianPacket;

/// Relative node floor: `|Ψ|` below this times the single-packet peak is a node.
pub const NODE_FLOOR: f64 = 1e-12;
/// Consecutive node rejections tolerated before a trajectory is flagged.
pub const MAX_NODE_REJECTIONS: u32 = 10;
const MAX_STEPS: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PilotError {
    #[error("|Psi| = {modulus:e} below node floor {floor:e} at t = {t}")]
    NodeProximity { modulus: f64, floor: f64, t: f64 },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Marker(#[from] MarkerError),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("invalid tolerances: {0}")]
    InvalidTolerance(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub particle: Vec2,
    pub pointer: Option<f64>,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFlag {
    NodeDegenerate,
    Unterminated,
    StepLimit,
}

impl TrajectoryFlag {
    pub fn label(self) -> &'static str {
        match self {
            TrajectoryFlag::NodeDegenerate => "node_degenerate",
            TrajectoryFlag::Unterminated => "unterminated",
            TrajectoryFlag::StepLimit => "step_limit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_quantum_potential: f64,
    /// Smallest `|Ψ|` met, relative to the single-packet peak.
    pub min_modulus: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            max_quantum_potential: f64::NEG_INFINITY,
            min_modulus: f64::INFINITY,
            accepted_steps: 0,
            rejected_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Configuration>,
    pub terminal: Option<DetectorId>,
    pub channel: Option<Channel>,
    pub beable: MarkerBeable,
    pub flag: Option<TrajectoryFlag>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn last(&self) -> &Configuration {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Sample recorded at time `t`, if any.
    pub fn sample_at(&self, t: f64) -> Option<&Configuration> {
        let i = self.samples.partition_point(|s| s.t < t - EVENT_TIME_TOL);
        self.samples.get(i).filter(|s| (s.t - t).abs() <= EVENT_TIME_TOL)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    /// Absolute tolerance in units of the source width.
    pub atol: f64,
    /// Spacing of the fixed output time grid.
    pub sample_dt: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            sample_dt: 0.01,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<(), PilotError> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.sample_dt > 0.0)
            || !(self.rtol.is_finite() && self.atol.is_finite() && self.sample_dt.is_finite())
        {
            return Err(PilotError::InvalidTolerance(
                "rtol, atol and sample_dt must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What an integration keeps of its samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Recording {
    All,
    /// First and last configuration only.
    Endpoints,
    /// Endpoints plus the stops at these times.
    Times(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Epoch {
    start: f64,
    branches: Vec<Branch>,
    /// Evaluation terms: branches with identical packet and label summed,
    /// cancelled sums dropped.
    terms: Vec<(GaussianPacket, Complex64, MarkerLabel)>,
}

impl Epoch {
    fn new(start: f64, branches: Vec<Branch>) -> Self {
        let mut terms: Vec<(GaussianPacket, Complex64, MarkerLabel)> = Vec::new();
        for b in &branches {
            match terms
                .iter_mut()
                .find(|(p, _, l)| *l == b.marker_label && p.same_as(&b.packet, 1e-9))
            {
                Some(t) => t.1 += b.coefficient,
                None => terms.push((b.packet.clone(), b.coefficient, b.marker_label)),
            }
        }
        let scale = branches.iter().map(|b| b.coefficient.norm()).fold(0.0, f64::max);
        terms.retain(|t| t.1.norm() > 1e-12 * scale);
        Self { start, branches, terms }
    }
}

#[derive(Clone, Debug)]
struct Stop {
    t: f64,
    /// Epoch in force after this stop.
    epoch_after: usize,
    transports: Vec<usize>,
    marker: bool,
    channel: bool,
}

/// Monotone map `s ↦ C_post⁻¹(C_pre(s))` along an element normal.
#[derive(Clone, Debug)]
struct TransportMap {
    s0: f64,
    h: f64,
    cdf_pre: Vec<f64>,
    cdf_post: Vec<f64>,
}

impl TransportMap {
    fn apply(&self, s: f64) -> f64 {
        let n = self.cdf_pre.len();
        let x = (s - self.s0) / self.h;
        if !(x >= 0.0 && x < (n - 1) as f64) {
            return s;
        }
        let i = x.floor() as usize;
        let f = x - i as f64;
        let u = self.cdf_pre[i] + f * (self.cdf_pre[i + 1] - self.cdf_pre[i]);
        let j = self.cdf_post.partition_point(|&c| c <= u).clamp(1, n - 1) - 1;
        let (c0, c1) = (self.cdf_post[j], self.cdf_post[j + 1]);
        let g = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.5 };
        self.s0 + (j as f64 + g) * self.h
    }
}

#[derive(Debug)]
struct TransportSlot {
    t: f64,
    epoch_pre: usize,
    epoch_post: usize,
    center: Vec2,
    normal: Vec2,
    cache: [OnceLock<Arc<TransportMap>>; 3],
}

fn beable_key(v: Option<Spin>) -> usize {
    match v {
        None => 0,
        Some(Spin::Up) => 1,
        Some(Spin::Down) => 2,
    }
}

/// Conditional wave function and its configuration-space derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldJet {
    pub value: Complex64,
    /// `∂x, ∂y` of the particle and `∂` of the pointer coordinate.
    pub grad: [Complex64; 3],
    pub lap_particle: Complex64,
    pub d2_pointer: Complex64,
}

/// Velocity and quantum potential at one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalDynamics {
    pub velocity: Vec2,
    pub pointer_velocity: Option<f64>,
    pub quantum_potential: f64,
    pub modulus: f64,
}

/// Everything needed to integrate trajectories for one scenario.
#[derive(Debug)]
pub struct WaveField {
    pub layout: Layout,
    pub marker: MarkerContext,
    pub tolerances: Tolerances,
    pub t_end: f64,
    pub channel_time: f64,
    epochs: Vec<Epoch>,
    stops: Vec<Stop>,
    transports: Vec<TransportSlot>,
}

impl WaveField {
    pub fn new(
        layout: Layout,
        marker: MarkerContext,
        tolerances: Tolerances,
        t_end: f64,
    ) -> Result<Self, PilotError> {
        tolerances.validate()?;
        let birth = layout.source.birth_time;
        if !(t_end > birth) {
            return Err(PilotError::InvalidTolerance("t_end must follow the source birth".into()));
        }
        let crossings = layout.crossings()?;
        let t_m = marker.t_interaction;

        let mut event_times: Vec<f64> = crossings.iter().map(|c| c.time).collect();
        event_times.push(t_m);
        let event_times = cluster(event_times);

        let mut epochs = vec![Epoch::new(birth, epoch_branches(&layout, &marker, birth)?)];
        for &b in &event_times {
            if b > birth {
                epochs.push(Epoch::new(b, epoch_branches(&layout, &marker, b)?));
            }
        }

        let t_bs1 = crossings
            .iter()
            .find(|c| c.active && c.channel.is_none() && layout.elements[c.element].is_splitter())
            .map(|c| c.time)
            .ok_or_else(|| PilotError::Unsupported("no input beam splitter on the source path".into()))?;
        let t_next = event_times
            .iter()
            .copied()
            .find(|&t| t > t_bs1 + EVENT_TIME_TOL)
            .unwrap_or(t_end);
        let mut channel_time = 0.5 * (t_bs1 + t_next);
        if t_m > t_bs1 + EVENT_TIME_TOL && t_m < channel_time {
            channel_time = t_m;
        }

        let epoch_at = |t: f64| epochs.iter().rposition(|e| e.start <= t + EVENT_TIME_TOL).unwrap_or(0);

        let mut transports: Vec<TransportSlot> = Vec::new();
        for c in &crossings {
            let e = &layout.elements[c.element];
            if !(c.active && e.is_splitter()) {
                continue;
            }
            let dup = transports
                .iter()
                .any(|s| (s.t - c.time).abs() <= EVENT_TIME_TOL && (s.center - c.center).norm() < 1e-6);
            if dup {
                continue;
            }
            if marker.model.is_pointer() && c.time > t_m + EVENT_TIME_TOL {
                return Err(PilotError::Unsupported(format!(
                    "active {} after the pointer interaction",
                    e.name
                )));
            }
            let post = epoch_at(c.time);
            transports.push(TransportSlot {
                t: c.time,
                epoch_pre: post.saturating_sub(1),
                epoch_post: post,
                center: c.center,
                normal: e.normal,
                cache: Default::default(),
            });
        }

        let mut times: Vec<f64> = event_times.iter().copied().filter(|&t| t < t_end).collect();
        times.push(channel_time);
        let n_samples = ((t_end - birth) / tolerances.sample_dt).floor() as usize;
        times.extend((0..=n_samples).map(|i| birth + i as f64 * tolerances.sample_dt));
        times.push(t_end);
        // events take precedence over nearby grid points
        let mut stops_t: Vec<f64> = Vec::new();
        times.sort_by(f64::total_cmp);
        for t in times {
            if t < birth - EVENT_TIME_TOL || t > t_end + EVENT_TIME_TOL {
                continue;
            }
            match stops_t.last_mut() {
                Some(last) if (t - *last).abs() <= EVENT_TIME_TOL => {
                    if event_times.iter().any(|&e| (e - t).abs() <= EVENT_TIME_TOL) {
                        *last = event_times
                            .iter()
                            .copied()
                            .find(|&e| (e - t).abs() <= EVENT_TIME_TOL)
                            .unwrap();
                    }
                }
                _ => stops_t.push(t),
            }
        }
        let stops = stops_t
            .iter()
            .map(|&t| Stop {
                t,
                epoch_after: epoch_at(t),
                transports: transports
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| (s.t - t).abs() <= EVENT_TIME_TOL)
                    .map(|(i, _)| i)
                    .collect(),
                marker: (t - t_m).abs() <= EVENT_TIME_TOL,
                channel: (t - channel_time).abs() <= EVENT_TIME_TOL,
            })
            .collect();

        Ok(Self {
            layout,
            marker,
            tolerances,
            t_end,
            channel_time,
            epochs,
            stops,
            transports,
        })
    }

    pub fn mass(&self) -> f64 {
        self.layout.source.mass
    }

    /// Branches of the wave function in force at `t` (post-event at event times).
    pub fn branches_at(&self, t: f64) -> &[Branch] {
        &self.epochs[self.epoch_index(t)].branches
    }

    fn epoch_index(&self, t: f64) -> usize {
        self.epochs
            .iter()
            .rposition(|e| e.start <= t + EVENT_TIME_TOL)
            .unwrap_or(0)
    }

    pub fn stop_times(&self) -> Vec<f64> {
        self.stops.iter().map(|s| s.t).collect()
    }

    /// Modulus scale used by the node floor.
    pub fn peak_scale(&self, t: f64) -> f64 {
        let mut p = self.layout.source.peak_modulus(t);
        if let Some((u, _)) = &self.marker.pointer {
            p *= u.peak_modulus(t);
        }
        p
    }

    fn field_jet_epoch(&self, epoch: usize, discrete: Option<Spin>, q: &Configuration) -> FieldJet {
        let mut acc = FieldJet::default();
        for (packet, c, label) in &self.epochs[epoch].terms {
            let m = self.marker.factor_jet(discrete, q.pointer, *label, q.t);
            if m.value == Complex64::new(0.0, 0.0) && m.d1 == Complex64::new(0.0, 0.0) {
                continue;
            }
            let pj = packet.jet_unchecked(q.particle, q.t);
            let c = *c;
            let cv = c * m.value;
            acc.value += cv * pj.value;
            acc.grad[0] += cv * pj.grad[0];
            acc.grad[1] += cv * pj.grad[1];
            acc.grad[2] += c * m.d1 * pj.value;
            acc.lap_particle += cv * pj.lap;
            acc.d2_pointer += c * m.d2 * pj.value;
        }
        acc
    }

    /// Conditional wave function with derivatives at `q` for the given beable.
    pub fn field_jet(&self, beable: &MarkerBeable, q: &Configuration) -> FieldJet {
        self.field_jet_epoch(self.epoch_index(q.t), beable.discrete_value, q)
    }

    fn dynamics_epoch(
        &self,
        epoch: usize,
        discrete: Option<Spin>,
        q: &Configuration,
    ) -> Result<LocalDynamics, PilotError> {
        let jet = self.field_jet_epoch(epoch, discrete, q);
        let modulus = jet.value.norm();
        let peak = self.peak_scale(q.t);
        let floor = NODE_FLOOR * peak;
        if !(modulus >= floor) {
            return Err(PilotError::NodeProximity {
                modulus,
                floor,
                t: q.t,
            });
        }
        let inv = jet.value.inv();
        let m = self.mass();
        let gx = jet.grad[0] * inv;
        let gy = jet.grad[1] * inv;
        let velocity = Vec2::new(gx.im / m, gy.im / m);
        let mut q_pot = -((jet.lap_particle * inv).re + gx.im * gx.im + gy.im * gy.im) / (2.0 * m);
        let pointer_velocity = match (self.marker.pointer_mass(), q.pointer) {
            (Some(mp), Some(_)) => {
                let gp = jet.grad[2] * inv;
                q_pot -= ((jet.d2_pointer * inv).re + gp.im * gp.im) / (2.0 * mp);
                Some(gp.im / mp)
            }
            _ => None,
        };
        Ok(LocalDynamics {
            velocity,
            pointer_velocity,
            quantum_potential: q_pot,
            modulus: modulus / peak,
        })
    }

    /// Velocity and quantum potential at `q`.
    pub fn dynamics(&self, beable: &MarkerBeable, q: &Configuration) -> Result<LocalDynamics, PilotError> {
        self.dynamics_epoch(self.epoch_index(q.t), beable.discrete_value, q)
    }

    fn transport_map(&self, slot: usize, discrete: Option<Spin>) -> Arc<TransportMap> {
        let s = &self.transports[slot];
        s.cache[beable_key(discrete)]
            .get_or_init(|| Arc::new(self.build_transport(s, discrete)))
            .clone()
    }

    fn build_transport(&self, slot: &TransportSlot, discrete: Option<Spin>) -> TransportMap {
        let t = slot.t;
        let w = self.layout.source.width_at(t);
        let k_max = self
            .epochs
            .iter()
            .flat_map(|e| e.branches.iter())
            .map(|b| b.packet.wavevector.norm())
            .fold(1.0, f64::max);
        let h = (w / 64.0).min(std::f64::consts::PI / (16.0 * k_max));
        let half = 10.0 * w;
        let n = (2.0 * half / h).ceil() as usize + 1;
        let h = 2.0 * half / (n - 1) as f64;
        let cdf = |epoch: usize| {
            let mut out = Vec::with_capacity(n);
            let mut acc = 0.0;
            let mut prev = 0.0;
            for i in 0..n {
                let s = -half + i as f64 * h;
                let q = Configuration {
                    particle: slot.center + slot.normal * s,
                    pointer: None,
                    t,
                };
                let d = self.field_jet_epoch(epoch, discrete, &q).value.norm_sqr();
                if i > 0 {
                    acc += 0.5 * (d + prev) * h;
                }
                out.push(acc);
                prev = d;
            }
            let total = acc;
            if total > 0.0 {
                out.iter_mut().for_each(|c| *c /= total);
            }
            out
        };
        TransportMap {
            s0: -half,
            h,
            cdf_pre: cdf(slot.epoch_pre),
            cdf_post: cdf(slot.epoch_post),
        }
    }

    fn dominant_channel(&self, epoch: usize, q: &Configuration) -> Option<Channel> {
        self.epochs[epoch]
            .branches
            .iter()
            .filter(|b| b.channel.is_some())
            .map(|b| (b.channel, (b.coefficient * b.packet.jet_unchecked(q.particle, q.t).value).norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .and_then(|(c, _)| c)
    }

    /// Integrates one trajectory from `q0` to `t_end` (capped by the field's end time).
    pub fn integrate<R: Rng + ?Sized>(
        &self,
        q0: Configuration,
        t_end: f64,
        rng: &mut R,
        recording: &Recording,
    ) -> Result<Trajectory, PilotError> {
        let t_end = t_end.min(self.t_end);
        let mut beable = MarkerBeable::for_model(&self.marker.model, q0.pointer.unwrap_or(0.0));
        let mut traj = Trajectory {
            samples: vec![q0],
            terminal: None,
            channel: None,
            beable: MarkerBeable::default(),
            flag: None,
            diagnostics: Diagnostics::default(),
        };
        let mut y = [q0.particle.x, q0.particle.y, q0.pointer.unwrap_or(0.0)];
        let dim = if q0.pointer.is_some() { 3 } else { 2 };
        let mut t = q0.t;
        let mut epoch = self.epoch_index(t);

        let start_epoch = epoch;
        if t >= self.channel_time - EVENT_TIME_TOL {
            traj.channel = self.dominant_channel(start_epoch, &q0);
        }
        if t >= self.marker.t_interaction + EVENT_TIME_TOL {
            let ch = traj.channel.unwrap_or(Channel::One);
            interact(&self.marker.model, &mut beable, ch, rng)?;
        }

        let max_q = Cell::new(f64::NEG_INFINITY);
        let min_mod = Cell::new(f64::INFINITY);
        let mut h = 1e-3;
        let first = self.stops.partition_point(|s| s.t <= t + EVENT_TIME_TOL);
        let mut steps = 0usize;
        let mut node_rejections = 0u32;
        let detectors: Vec<(DetectorId, Vec2, f64)> = DetectorId::ALL
            .iter()
            .map(|&d| (d, self.layout.detector(d).position, self.layout.detector_radius(d)))
            .collect();
        let wants = |ts: f64| match recording {
            Recording::All => true,
            Recording::Endpoints => false,
            Recording::Times(v) => v.iter().any(|&x| (x - ts).abs() <= EVENT_TIME_TOL),
        };

        'stops: for stop in self.stops[first..].iter() {
            if stop.t > t_end + EVENT_TIME_TOL {
                break;
            }
            let t_b = stop.t;
            let mut k1: Option<[f64; 3]> = None;
            while t < t_b {
                if steps >= MAX_STEPS {
                    traj.flag = Some(TrajectoryFlag::StepLimit);
                    break 'stops;
                }
                let remaining = t_b - t;
                if h >= remaining || remaining - h < 1e-12 * (1.0 + t_b.abs()) {
                    h = remaining;
                }
                let disc = beable.discrete_value;
                let f = |tt: f64, yy: &[f64; 3]| -> Option<[f64; 3]> {
                    let q = Configuration {
                        particle: Vec2::new(yy[0], yy[1]),
                        pointer: (dim == 3).then_some(yy[2]),
                        t: tt,
                    };
                    let d = self.dynamics_epoch(epoch, disc, &q).ok()?;
                    max_q.set(max_q.get().max(d.quantum_potential));
                    min_mod.set(min_mod.get().min(d.modulus));
                    let v = [d.velocity.x, d.velocity.y, d.pointer_velocity.unwrap_or(0.0)];
                    v.iter().all(|x| x.is_finite()).then_some(v)
                };
                let k1v = match k1 {
                    Some(k) => Some(k),
                    None => f(t, &y),
                };
                let result = k1v.and_then(|k1v| dp5_step(&f, t, &y, h, &k1v, dim).map(|r| (k1v, r)));
                steps += 1;
                let Some((_, step)) = result else {
                    traj.diagnostics.rejected_steps += 1;
                    node_rejections += 1;
                    k1 = None;
                    if node_rejections > MAX_NODE_REJECTIONS {
                        traj.flag = Some(TrajectoryFlag::NodeDegenerate);
                        break 'stops;
                    }
                    h *= 0.25;
                    continue;
                };
                node_rejections = 0;
                let tol = &self.tolerances;
                let mut err: f64 = 0.0;
                for i in 0..dim {
                    let sc = tol.atol + tol.rtol * (step.y[i] - y[i]).abs();
                    err = err.max((step.err[i] / sc).abs());
                }
                if err <= 1.0 {
                    let t_new = if h == remaining { t_b } else { t + h };
                    t = t_new;
                    y = step.y;
                    k1 = Some(step.k7);
                    traj.diagnostics.accepted_steps += 1;
                    let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    h *= fac;
                    let r = Vec2::new(y[0], y[1]);
                    if let Some(&(id, _, _)) = detectors.iter().find(|(_, c, rad)| (r - *c).norm() < *rad) {
                        traj.terminal = Some(id);
                        break 'stops;
                    }
                } else {
                    traj.diagnostics.rejected_steps += 1;
                    h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                    k1 = Some(k1v.unwrap());
                }
            }

            let q = Configuration {
                particle: Vec2::new(y[0], y[1]),
                pointer: (dim == 3).then_some(y[2]),
                t,
            };
            if stop.channel && traj.channel.is_none() {
                traj.channel = self.dominant_channel(epoch, &q);
            }
            if stop.marker && !beable.interacted() {
                let ch = traj.channel.or_else(|| self.dominant_channel(epoch, &q)).unwrap_or(Channel::One);
                interact(&self.marker.model, &mut beable, ch, rng)?;
            }
            if !stop.transports.is_empty() {
                let slot = stop
                    .transports
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da = (self.transports[a].center - q.particle).norm();
                        let db = (self.transports[b].center - q.particle).norm();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                let map = self.transport_map(slot, beable.discrete_value);
                let ts = &self.transports[slot];
                let rel = q.particle - ts.center;
                let s = rel.dot(ts.normal);
                let s_new = map.apply(s);
                let p = ts.center + ts.normal * s_new + ts.normal.perp() * rel.dot(ts.normal.perp());
                y[0] = p.x;
                y[1] = p.y;
            }
            epoch = stop.epoch_after;
            if wants(t) {
                let q = Configuration {
                    particle: Vec2::new(y[0], y[1]),
                    pointer: (dim == 3).then_some(y[2]),
                    t,
                };
                if traj.samples.last().is_none_or(|s| s.t < t) {
                    traj.samples.push(q);
                }
            }
        }

        let last = Configuration {
            particle: Vec2::new(y[0], y[1]),
            pointer: (dim == 3).then_some(y[2]),
            t,
        };
        match traj.samples.last_mut() {
            Some(s) if s.t == t => *s = last,
            _ => traj.samples.push(last),
        }
        if traj.terminal.is_none() && traj.flag.is_none() {
            traj.flag = Some(TrajectoryFlag::Unterminated);
        }
        traj.beable = beable;
        traj.diagnostics.max_quantum_potential = max_q.get();
        traj.diagnostics.min_modulus = min_mod.get();
        Ok(traj)
    }
}

fn cluster(mut times: Vec<f64>) -> Vec<f64> {
    times.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::new();
    for t in times {
        if out.last().is_none_or(|&l| t - l > EVENT_TIME_TOL) {
            out.push(t);
        }
    }
    out
}

fn epoch_branches(layout: &Layout, marker: &MarkerContext, t: f64) -> Result<Vec<Branch>, PilotError> {
    let mut branches = propagate_branches(layout, t)?;
    let label = marker.model.initial_label();
    for b in &mut branches {
        b.marker_label = label;
    }
    if t >= marker.t_interaction - EVENT_TIME_TOL {
        branches = split_branches(&marker.model, &branches, marker.t_interaction);
    }
    Ok(branches)
}

struct Dp5Step {
    y: [f64; 3],
    err: [f64; 3],
    k7: [f64; 3],
}

fn dp5_step<F>(f: &F, t: f64, y: &[f64; 3], h: f64, k1: &[f64; 3], dim: usize) -> Option<Dp5Step>
where
    F: Fn(f64, &[f64; 3]) -> Option<[f64; 3]>,
{
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A2: [f64; 1] = [1.0 / 5.0];
    const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
    const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
    const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
    const A6: [f64; 5] = [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ];
    const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let stage = |ks: &[&[f64; 3]], a: &[f64]| {
        let mut out = *y;
        for i in 0..dim {
            let mut s = 0.0;
            for (k, c) in ks.iter().zip(a) {
                s += c * k[i];
            }
            out[i] += h * s;
        }
        out
    };
    let k2 = f(t + C[0] * h, &stage(&[k1], &A2))?;
    let k3 = f(t + C[1] * h, &stage(&[k1, &k2], &A3))?;
    let k4 = f(t + C[2] * h, &stage(&[k1, &k2, &k3], &A4))?;
    let k5 = f(t + C[3] * h, &stage(&[k1, &k2, &k3, &k4], &A5))?;
    let k6 = f(t + C[4] * h, &stage(&[k1, &k2, &k3, &k4, &k5], &A6))?;
    let y5 = stage(&[k1, &k2, &k3, &k4, &k5, &k6], &B);
    let k7 = f(t + h, &y5)?;
    let mut err = [0.0; 3];
    let ks = [k1, &k2, &k3, &k4, &k5, &k6, &k7];
    for i in 0..dim {
        err[i] = h * ks.iter().zip(E).map(|(k, e)| e * k[i]).sum::<f64>();
    }
    Some(Dp5Step { y: y5, err, k7 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Random,
    Stratified,
}

/// Initial configurations distributed as `|ψ₀|²` (and `|Φ₀|²` for a pointer).
///
/// Random mode draws from `ChaCha8Rng` seeded with `seed` on stream 0.
/// Stratified mode places particles on the longitudinal center line at the
/// normal quantiles `(i + 1/2) / n` across the beam, with the pointer at rest at 0.
pub fn sample_ensemble(
    source: &GaussianPacket,
    pointer_sigma: Option<f64>,
    n: usize,
    seed: u64,
    mode: SamplingMode,
) -> Vec<Configuration> {
    let t = source.birth_time;
    let sd = source.sigma0 / std::f64::consts::SQRT_2;
    let c = source.center;
    match mode {
        SamplingMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sd).expect("positive width");
            let pnormal = pointer_sigma.map(|s| Normal::new(0.0, s / std::f64::consts::SQRT_2).unwrap());
            (0..n)
                .map(|_| {
                    let x = c.x + normal.sample(&mut rng);
                    let y = c.y + normal.sample(&mut rng);
                    let pointer = pnormal.as_ref().map(|p| p.sample(&mut rng));
                    Configuration {
                        particle: Vec2::new(x, y),
                        pointer,
                        t,
                    }
                })
                .collect()
        }
        SamplingMode::Stratified => {
            let std_normal = StatNormal::new(0.0, 1.0).unwrap();
            let dir = source.group_velocity.normalized();
            let across = if dir.is_finite() { dir.perp() } else { Vec2::new(0.0, 1.0) };
            (0..n)
                .map(|i| {
                    let z = std_normal.inverse_cdf((i as f64 + 0.5) / n as f64);
                    Configuration {
                        particle: c + across * (sd * z),
                        pointer: pointer_sigma.map(|_| 0.0),
                        t,
                    }
                })
                .collect()
        }
    }
}

/// Generator for the per-trajectory marker draws of trajectory `index`.
pub fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Smallest distance between any two trajectories at a shared sample time.
/// Returns `f64::INFINITY` for fewer than two trajectories.
pub fn min_pairwise_separation(trajectories: &[Trajectory]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in trajectories.iter().enumerate() {
        for b in &trajectories[i + 1..] {
            let n = a.samples.len().min(b.samples.len());
            for k in 0..n {
                let (p, q) = (&a.samples[k], &b.samples[k]);
                if p.t != q.t {
                    break;
                }
                let mut d2 = (p.particle - q.particle).norm_sq();
                if let (Some(x), Some(y)) = (p.pointer, q.pointer) {
                    d2 += (x - y) * (x - y);
                }
                best = best.min(d2);
            }
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marker::{MarkerKind, MarkerModel};
    use crate::optics::{ActiveInterval, LayoutParams};

    fn field(bs2: ActiveInterval, kind: MarkerKind) -> WaveField {
        let layout = Layout::mach_zehnder(&LayoutParams {
            bs2_active: bs2,
            ..LayoutParams::default()
        })
        .unwrap();
        let model = MarkerModel::new(kind, Channel::Two, Vec2::new(20.0, 0.0));
        let ctx = MarkerContext::new(model, &layout).unwrap();
        let t_end = layout.detector_arrival_time() + 1.0;
        WaveField::new(layout, ctx, Tolerances::default(), t_end).unwrap()
    }

    fn open() -> WaveField {
        field(ActiveInterval::NEVER, MarkerKind::None)
    }

    #[test]
    fn single_packet_velocity_is_carrier_at_center() {
        let f = open();
        let b = MarkerBeable::default();
        let q = Configuration {
            particle: Vec2::new(-10.0, 0.0),
            pointer: None,
            t: 0.0,
        };
        let d = f.dynamics(&b, &q).unwrap();
        assert!((d.velocity.x - 40.0).abs() < 1e-12 && d.velocity.y.abs() < 1e-12);
        // Q at the peak of a 2D Gaussian at birth: 1/(m σ0²)
        assert!((d.quantum_potential - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_counterpropagating_packets_stagnate_on_bisector() {
        let a = GaussianPacket::new(Vec2::new(-0.5, 0.0), Vec2::new(5.0, 0.0), 1.0, 1.0, 0.0).unwrap();
        let b = GaussianPacket::new(Vec2::new(0.5, 0.0), Vec2::new(-5.0, 0.0), 1.0, 1.0, 0.0).unwrap();
        let r = Vec2::new(0.0, 0.3);
        let ja = a.jet(r, 0.2).unwrap();
        let jb = b.jet(r, 0.2).unwrap();
        let v = ja.value + jb.value;
        let gx = ja.grad[0] + jb.grad[0];
        assert!((gx / v).im.abs() < 1e-12);
    }

    #[test]
    fn straight_leg_is_uniform_motion() {
        let f = open();
        let mut rng = trajectory_rng(0, 0);
        let q0 = Configuration {
            particle: Vec2::new(-10.0, 0.0),
            pointer: None,
            t: 0.0,
        };
        let tr = f.integrate(q0, 0.2, &mut rng, &Recording::All).unwrap();
        for s in &tr.samples {
            let expect = -10.0 + 40.0 * s.t;
            assert!((s.particle.x - expect).abs() < 1e-8, "{} vs {}", s.particle.x, expect);
            assert!(s.particle.y.abs() < 1e-8);
        }
        assert!(tr.samples.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn transport_map_preserves_unchanged_density() {
        let f = open();
        let slot = &f.transports[0];
        let map = f.transport_map(0, None);
        assert!((slot.t - 0.25).abs() < 1e-12);
        // monotone and bounded
        let mut last = f64::NEG_INFINITY;
        for i in -40..=40 {
            let s = i as f64 * 0.1;
            let m = map.apply(s);
            assert!(m >= last);
            last = m;
        }
    }

    #[test]
    fn stratified_sample_is_symmetric() {
        let src = open().layout.source.clone();
        let qs = sample_ensemble(&src, None, 20, 0, SamplingMode::Stratified);
        for i in 0..10 {
            let a = qs[i].particle - src.center;
            let b = qs[19 - i].particle - src.center;
            assert!((a + b).norm() < 1e-12);
        }
    }

    #[test]
    fn random_sample_mean_near_center() {
        let src = open().layout.source.clone();
        let n = 10_000;
        let qs = sample_ensemble(&src, None, n, 7, SamplingMode::Random);
        let mut m = Vec2::ZERO;
        for q in &qs {
            m += q.particle;
        }
        let m = m * (1.0 / n as f64);
        assert!((m - src.center).norm() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn pointer_with_late_active_splitter_is_rejected() {
        let layout = Layout::mach_zehnder(&LayoutParams {
            bs2_active: ActiveInterval::ALWAYS,
            ..LayoutParams::default()
        })
        .unwrap();
        let model = MarkerModel::new(
            MarkerKind::Pointer {
                ejection_speed: 40.0,
                pointer_sigma: 1.0,
                pointer_mass: 10.0,
            },
            Channel::Two,
            Vec2::new(20.0, 0.0),
        );
        let ctx = MarkerContext::new(model, &layout).unwrap();
        let err = WaveField::new(layout, ctx, Tolerances::default(), 4.0).unwrap_err();
        assert!(matches!(err, PilotError::Unsupported(_)));
    }

    #[test]
    fn discrete_full_efficiency_removes_interference_in_overlap() {
        let f = field(ActiveInterval::NEVER, MarkerKind::Discrete { efficiency_sq: 1.0 });
        let t = f.layout.i2_arrival_time() - 0.01;
        let up = MarkerBeable::discrete(Spin::Up);
        let branches = f.branches_at(t);
        let single = branches
            .iter()
            .find(|b| b.channel == Some(Channel::One))
            .unwrap();
        for r in [Vec2::new(40.1, 39.7), Vec2::new(39.5, 40.4)] {
            let q = Configuration {
                particle: r,
                pointer: None,
                t,
            };
            let got = f.dynamics(&up, &q).unwrap().quantum_potential;
            let j = single.packet.jet(r, t).unwrap();
            let g = [j.grad[0] / j.value, j.grad[1] / j.value];
            let expect = -((j.lap / j.value).re + g[0].im.powi(2) + g[1].im.powi(2)) / 2.0;
            assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn neighbouring_trajectories_never_meet(
            x in -2.0f64..2.0,
            y in -2.0f64..2.0,
            dx in -1e-3f64..1e-3,
            dy in -1e-3f64..1e-3,
        ) {
            proptest::prop_assume!(dx.abs() + dy.abs() > 1e-6);
            let f = open();
            let start = |p: Vec2| Configuration { particle: f.layout.source.center + p, pointer: None, t: 0.0 };
            let rng = || rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let t_end = f.t_end;
            let a = f.integrate(start(Vec2::new(x, y)), t_end, &mut rng(), &Recording::All).unwrap();
            let b = f.integrate(start(Vec2::new(x + dx, y + dy)), t_end, &mut rng(), &Recording::All).unwrap();
            let sep = min_pairwise_separation(&[a, b]);
            proptest::prop_assert!(sep > f.tolerances.atol, "separation {}", sep);
        }
    }
}
