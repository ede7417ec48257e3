//! The interferometer as a set of ideal optical elements acting on packet
//! branches.
//!
//! Phase convention: every reflection multiplies a branch by `i`, every
//! transmission by `1`; a beam splitter additionally contributes its real
//! amplitude `ρ` (reflected) or `τ` (transmitted). An element acts on a
//! branch at the instant the branch's packet center crosses the element
//! line, replacing the packet by its mirror image when reflected.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marker::MarkerLabel;
use crate::vec2::Vec2;
use crate::wavepacket::{GaussianPacket, PacketError, PacketJet};

/// Events closer together than this are treated as simultaneous.
pub const EVENT_TIME_TOL: f64 = 1e-9;
/// A splitter reached this close to a schedule endpoint is ambiguous.
pub const SCHEDULE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error("packet reaches {element} at t = {time}, within {tol} of its schedule endpoint {endpoint}")]
    AmbiguousSchedule {
        element: String,
        time: f64,
        endpoint: f64,
        tol: f64,
    },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("requested time {t} precedes the source birth time {birth}")]
    BeforeSource { t: f64, birth: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::One => 0,
            Channel::Two => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorId {
    D1,
    D2,
}

impl DetectorId {
    pub const ALL: [DetectorId; 2] = [DetectorId::D1, DetectorId::D2];

    pub fn index(self) -> usize {
        match self {
            DetectorId::D1 => 0,
            DetectorId::D2 => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DetectorId::D1 => "D1",
            DetectorId::D2 => "D2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ElementKind {
    BeamSplitter { reflectance: f64, transmittance: f64 },
    Mirror,
    Detector { id: DetectorId, radius: f64 },
}

/// Half-open activity window `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveInterval {
    pub start: f64,
    pub end: f64,
}

impl ActiveInterval {
    pub const ALWAYS: ActiveInterval = ActiveInterval {
        start: f64::NEG_INFINITY,
        end: f64::INFINITY,
    };
    pub const NEVER: ActiveInterval = ActiveInterval {
        start: f64::INFINITY,
        end: f64::INFINITY,
    };

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    fn nearest_endpoint(&self, t: f64) -> Option<f64> {
        [self.start, self.end]
            .into_iter()
            .find(|e| e.is_finite() && (t - e).abs() <= SCHEDULE_TOL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub name: String,
    pub kind: ElementKind,
    pub position: Vec2,
    /// Unit normal of the element line.
    pub normal: Vec2,
    /// Aperture half-length along the element line.
    pub half_width: f64,
    pub active: ActiveInterval,
}

impl Element {
    pub fn is_splitter(&self) -> bool {
        matches!(self.kind, ElementKind::BeamSplitter { .. })
    }

    pub fn tangent(&self) -> Vec2 {
        self.normal.perp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Reflected,
    Transmitted,
    Absorbed,
    /// Branch split by a which-way marker; the factor is the marker amplitude.
    Marked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchEvent {
    /// Element index, or `None` for marker events.
    pub element: Option<usize>,
    pub action: Action,
    pub time: f64,
    pub factor: Complex64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub packet: GaussianPacket,
    pub coefficient: Complex64,
    pub marker_label: MarkerLabel,
    pub history: Vec<BranchEvent>,
    /// Arm taken at the first beam splitter: reflected is channel 1.
    pub channel: Option<Channel>,
}

impl Branch {
    pub fn source(packet: GaussianPacket, label: MarkerLabel) -> Self {
        Self {
            packet,
            coefficient: Complex64::new(1.0, 0.0),
            marker_label: label,
            history: Vec::new(),
            channel: None,
        }
    }

    /// Product of all recorded event factors; equals `coefficient`.
    pub fn history_product(&self) -> Complex64 {
        self.history
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, e| acc * e.factor)
    }

    pub fn absorbed_by(&self, layout: &Layout) -> Option<DetectorId> {
        let last = self.history.last()?;
        if last.action != Action::Absorbed {
            return None;
        }
        match layout.elements[last.element?].kind {
            ElementKind::Detector { id, .. } => Some(id),
            _ => None,
        }
    }

    fn last_event_time(&self) -> f64 {
        self.history
            .iter()
            .rev()
            .find(|e| e.element.is_some())
            .map(|e| e.time)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub arm_length: f64,
    pub i2_center: Vec2,
    pub i2_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub elements: Vec<Element>,
    pub source: GaussianPacket,
    pub geometry: Geometry,
    /// Factor applied per reflection. Always `i` outside of fault-injection tests.
    pub reflection_factor: Complex64,
}

/// Parameters of the square interferometer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub sigma0: f64,
    pub mass: f64,
    pub wavenumber: f64,
    /// Distance from the source packet center to the first splitter.
    pub source_offset: f64,
    pub arm_length: f64,
    /// Distance from the output crossing to each detector center.
    pub detector_distance: f64,
    pub bs1_reflectance: f64,
    pub bs2_reflectance: f64,
    pub bs2_active: ActiveInterval,
    /// Detector radius; defaults to four packet widths at nominal arrival.
    pub detector_radius: Option<f64>,
    pub reflection_factor: Complex64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            mass: 1.0,
            wavenumber: 40.0,
            source_offset: 10.0,
            arm_length: 40.0,
            detector_distance: 40.0,
            bs1_reflectance: FRAC_1_SQRT_2,
            bs2_reflectance: FRAC_1_SQRT_2,
            bs2_active: ActiveInterval::NEVER,
            detector_radius: None,
            reflection_factor: Complex64::new(0.0, 1.0),
        }
    }
}

fn splitter(reflectance: f64) -> ElementKind {
    ElementKind::BeamSplitter {
        reflectance,
        transmittance: (1.0 - reflectance * reflectance).max(0.0).sqrt(),
    }
}

impl Layout {
    /// Square Mach-Zehnder interferometer.
    ///
    /// The source travels along +x into BS1 at the origin. Channel 1 is
    /// reflected up to M1 at (0, L) and turned along +x; channel 2 is
    /// transmitted to M2 at (L, 0) and turned along +y. Both legs cross at
    /// (L, L), the location of BS2. D1 sits on the +x continuation and D2 on
    /// the +y continuation.
    pub fn mach_zehnder(p: &LayoutParams) -> Result<Layout, OpticsError> {
        for (name, v) in [
            ("sigma0", p.sigma0),
            ("mass", p.mass),
            ("wavenumber", p.wavenumber),
            ("source_offset", p.source_offset),
            ("arm_length", p.arm_length),
            ("detector_distance", p.detector_distance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OpticsError::InvalidLayout(format!("{name} must be positive")));
            }
        }
        for (name, r) in [("bs1", p.bs1_reflectance), ("bs2", p.bs2_reflectance)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(OpticsError::InvalidLayout(format!(
                    "{name} reflectance amplitude must lie in [0, 1]"
                )));
            }
        }
        let l = p.arm_length;
        let source = GaussianPacket::new(
            Vec2::new(-p.source_offset, 0.0),
            Vec2::new(p.wavenumber, 0.0),
            p.sigma0,
            p.mass,
            0.0,
        )?;
        let speed = p.wavenumber / p.mass;
        let diag = Vec2::new(1.0, -1.0).normalized();
        let t_i2 = (p.source_offset + 2.0 * l) / speed;
        let t_det = t_i2 + p.detector_distance / speed;
        let radius = p
            .detector_radius
            .unwrap_or_else(|| 4.0 * source.width_at(t_det));
        if !(radius > 0.0) {
            return Err(OpticsError::InvalidLayout("detector radius must be positive".into()));
        }
        let aperture = 0.45 * l;
        let elements = vec![
            Element {
                name: "BS1".into(),
                kind: splitter(p.bs1_reflectance),
                position: Vec2::ZERO,
                normal: diag,
                half_width: aperture,
                active: ActiveInterval::ALWAYS,
            },
            Element {
                name: "M1".into(),
                kind: ElementKind::Mirror,
                position: Vec2::new(0.0, l),
                normal: diag,
                half_width: aperture,
                active: ActiveInterval::ALWAYS,
            },
            Element {
                name: "M2".into(),
                kind: ElementKind::Mirror,
                position: Vec2::new(l, 0.0),
                normal: diag,
                half_width: aperture,
                active: ActiveInterval::ALWAYS,
            },
            Element {
                name: "BS2".into(),
                kind: splitter(p.bs2_reflectance),
                position: Vec2::new(l, l),
                normal: diag,
                half_width: aperture,
                active: p.bs2_active,
            },
            Element {
                name: "D1".into(),
                kind: ElementKind::Detector {
                    id: DetectorId::D1,
                    radius,
                },
                position: Vec2::new(l + p.detector_distance, l),
                normal: Vec2::new(1.0, 0.0),
                half_width: radius,
                active: ActiveInterval::ALWAYS,
            },
            Element {
                name: "D2".into(),
                kind: ElementKind::Detector {
                    id: DetectorId::D2,
                    radius,
                },
                position: Vec2::new(l, l + p.detector_distance),
                normal: Vec2::new(0.0, 1.0),
                half_width: radius,
                active: ActiveInterval::ALWAYS,
            },
        ];
        let i2_radius = 4.0 * source.width_at(t_i2);
        let layout = Layout {
            elements,
            source,
            geometry: Geometry {
                arm_length: l,
                i2_center: Vec2::new(l, l),
                i2_radius,
            },
            reflection_factor: p.reflection_factor,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        for e in &self.elements {
            if (e.normal.norm() - 1.0).abs() > 1e-12 {
                return Err(OpticsError::InvalidLayout(format!("{} normal is not unit", e.name)));
            }
            if let ElementKind::BeamSplitter {
                reflectance,
                transmittance,
            } = e.kind
            {
                if (reflectance * reflectance + transmittance * transmittance - 1.0).abs() > 1e-12 {
                    return Err(OpticsError::InvalidLayout(format!(
                        "{} amplitudes violate rho^2 + tau^2 = 1",
                        e.name
                    )));
                }
            }
        }
        // element events must be strictly ordered along every path
        let crossings = self.crossings()?;
        for c in &crossings {
            if !(c.time > self.source.birth_time) {
                return Err(OpticsError::InvalidLayout(format!(
                    "{} is reached before the source exists",
                    self.elements[c.element].name
                )));
            }
        }
        Ok(())
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.name == name)
    }

    pub fn detector(&self, id: DetectorId) -> &Element {
        self.elements
            .iter()
            .find(|e| matches!(e.kind, ElementKind::Detector { id: d, .. } if d == id))
            .expect("layout has both detectors")
    }

    pub fn detector_radius(&self, id: DetectorId) -> f64 {
        match self.detector(id).kind {
            ElementKind::Detector { radius, .. } => radius,
            _ => unreachable!(),
        }
    }

    pub fn speed(&self) -> f64 {
        self.source.group_velocity.norm()
    }

    /// Nominal time at which packet centers reach the output crossing.
    pub fn i2_arrival_time(&self) -> f64 {
        let (x, y) = (self.geometry.i2_center, self.source.center);
        // the path bends at right angles, so its length is the taxicab distance
        ((x.x - y.x).abs() + (x.y - y.y).abs()) / self.speed() + self.source.birth_time
    }

    /// Nominal time at which packet centers reach the detector centers.
    pub fn detector_arrival_time(&self) -> f64 {
        let det = self.detector(DetectorId::D1);
        self.i2_arrival_time() + (det.position - self.geometry.i2_center).norm() / self.speed()
    }

    /// Ballistic continuation of a channel: the detector the channel's arm
    /// points at when nothing deflects it.
    pub fn ballistic_detector(&self, channel: Channel) -> DetectorId {
        match channel {
            Channel::One => DetectorId::D1,
            Channel::Two => DetectorId::D2,
        }
    }

    /// Every crossing of a branch center with an element line, whether the
    /// element is active at that time or not.
    pub fn crossings(&self) -> Result<Vec<Crossing>, OpticsError> {
        let mut out = Vec::new();
        let branches = self.trace(f64::INFINITY, &mut |c| out.push(c))?;
        drop(branches);
        out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.element.cmp(&b.element)));
        Ok(out)
    }

    fn next_crossing(&self, branch: &Branch, after: f64) -> Option<(usize, f64)> {
        let p = &branch.packet;
        let mut best: Option<(usize, f64)> = None;
        for (idx, e) in self.elements.iter().enumerate() {
            let vn = p.group_velocity.dot(e.normal);
            if vn.abs() < 1e-14 {
                continue;
            }
            let t = p.birth_time + (e.position - p.center).dot(e.normal) / vn;
            if !(t > after + EVENT_TIME_TOL) {
                continue;
            }
            let offset = (p.center_at(t) - e.position).dot(e.tangent());
            if offset.abs() > e.half_width {
                continue;
            }
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((idx, t));
            }
        }
        best
    }

    /// Propagates the source through the elements, applying every event up
    /// to and including time `t_max`, reporting each crossing to `visit`.
    fn trace(
        &self,
        t_max: f64,
        visit: &mut dyn FnMut(Crossing),
    ) -> Result<Vec<Branch>, OpticsError> {
        let mut done = Vec::new();
        let mut stack = vec![Branch::source(self.source.clone(), MarkerLabel::Neutral)];
        while let Some(mut branch) = stack.pop() {
            loop {
                let after = branch.last_event_time().max(branch.packet.birth_time - 1.0);
                let Some((idx, t)) = self.next_crossing(&branch, after) else {
                    done.push(branch);
                    break;
                };
                let element = &self.elements[idx];
                let active = element.active.contains(t);
                if element.is_splitter() {
                    if let Some(endpoint) = element.active.nearest_endpoint(t) {
                        return Err(OpticsError::AmbiguousSchedule {
                            element: element.name.clone(),
                            time: t,
                            endpoint,
                            tol: SCHEDULE_TOL,
                        });
                    }
                }
                visit(Crossing {
                    element: idx,
                    time: t,
                    active,
                    channel: branch.channel,
                    center: branch.packet.center_at(t),
                });
                if t > t_max + EVENT_TIME_TOL {
                    done.push(branch);
                    break;
                }
                if !active {
                    // transparent: remember that we passed it
                    branch.history.push(BranchEvent {
                        element: Some(idx),
                        action: Action::Transmitted,
                        time: t,
                        factor: Complex64::new(1.0, 0.0),
                    });
                    continue;
                }
                match element.kind {
                    ElementKind::Mirror => {
                        let f = self.reflection_factor;
                        branch.packet = branch.packet.reflected(element.position, element.normal);
                        branch.coefficient *= f;
                        branch.history.push(BranchEvent {
                            element: Some(idx),
                            action: Action::Reflected,
                            time: t,
                            factor: f,
                        });
                    }
                    ElementKind::BeamSplitter {
                        reflectance,
                        transmittance,
                    } => {
                        let first = branch.channel.is_none();
                        let mut reflected = branch.clone();
                        let fr = self.reflection_factor * reflectance;
                        reflected.packet = branch.packet.reflected(element.position, element.normal);
                        reflected.coefficient *= fr;
                        reflected.history.push(BranchEvent {
                            element: Some(idx),
                            action: Action::Reflected,
                            time: t,
                            factor: fr,
                        });
                        let ft = Complex64::new(transmittance, 0.0);
                        branch.coefficient *= ft;
                        branch.history.push(BranchEvent {
                            element: Some(idx),
                            action: Action::Transmitted,
                            time: t,
                            factor: ft,
                        });
                        if first {
                            reflected.channel = Some(Channel::One);
                            branch.channel = Some(Channel::Two);
                        }
                        stack.push(reflected);
                    }
                    ElementKind::Detector { .. } => {
                        branch.history.push(BranchEvent {
                            element: Some(idx),
                            action: Action::Absorbed,
                            time: t,
                            factor: Complex64::new(1.0, 0.0),
                        });
                        done.push(branch);
                        break;
                    }
                }
            }
        }
        Ok(done)
    }
}

/// One passage of a branch center through an element line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub element: usize,
    pub time: f64,
    pub active: bool,
    pub channel: Option<Channel>,
    pub center: Vec2,
}

/// All branches of the source wave at time `t`, with every element event at
/// or before `t` applied.
pub fn propagate_branches(layout: &Layout, t: f64) -> Result<Vec<Branch>, OpticsError> {
    if t < layout.source.birth_time {
        return Err(OpticsError::BeforeSource {
            t,
            birth: layout.source.birth_time,
        });
    }
    let mut branches = layout.trace(t, &mut |_| {})?;
    // Deterministic order: by channel, then by event sequence.
    branches.sort_by(|a, b| {
        a.channel
            .cmp(&b.channel)
            .then_with(|| history_key(a).cmp(&history_key(b)))
    });
    Ok(branches)
}

fn history_key(b: &Branch) -> Vec<(usize, u8)> {
    b.history
        .iter()
        .filter_map(|e| {
            e.element.map(|i| {
                let a = match e.action {
                    Action::Transmitted => 0,
                    Action::Reflected => 1,
                    Action::Absorbed => 2,
                    Action::Marked => 3,
                };
                (i, a)
            })
        })
        .collect()
}

/// Superposition `Σ c_b · m(label_b) · ψ_b(r, t)`.
pub fn total_wavefunction<F>(branches: &[Branch], marker_eval: F, r: Vec2, t: f64) -> Complex64
where
    F: Fn(MarkerLabel) -> Complex64,
{
    total_jet(branches, marker_eval, r, t).value
}

/// Superposition with gradient and Laplacian, same branch structure as
/// [`total_wavefunction`].
pub fn total_jet<F>(branches: &[Branch], marker_eval: F, r: Vec2, t: f64) -> PacketJet
where
    F: Fn(MarkerLabel) -> Complex64,
{
    let mut acc = PacketJet::default();
    for b in branches {
        let f = marker_eval(b.marker_label) * b.coefficient;
        if f == Complex64::new(0.0, 0.0) {
            continue;
        }
        acc.accumulate(&b.packet.jet_unchecked(r, t).scaled(f));
    }
    acc
}

/// Coherent amplitude collected by a detector: branches with identical
/// packets and labels add; the sum is grouped by the branch channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorAmplitude {
    pub detector: DetectorId,
    pub label: MarkerLabel,
    /// Coefficient contributed by each channel (index 0 = channel 1).
    pub by_channel: [Complex64; 2],
}

impl DetectorAmplitude {
    pub fn total(&self) -> Complex64 {
        self.by_channel[0] + self.by_channel[1]
    }
}

/// Groups branches that ended in a detector into coherent amplitudes.
pub fn detector_amplitudes(layout: &Layout, branches: &[Branch]) -> Vec<DetectorAmplitude> {
    let mut groups: Vec<(GaussianPacket, DetectorAmplitude)> = Vec::new();
    for b in branches {
        let Some(det) = b.absorbed_by(layout) else {
            continue;
        };
        let slot = groups.iter_mut().find(|(p, a)| {
            a.detector == det && a.label == b.marker_label && p.same_as(&b.packet, 1e-9)
        });
        let ch = b.channel.map(Channel::index).unwrap_or(0);
        match slot {
            Some((_, amp)) => amp.by_channel[ch] += b.coefficient,
            None => {
                let mut by_channel = [Complex64::new(0.0, 0.0); 2];
                by_channel[ch] = b.coefficient;
                groups.push((
                    b.packet.clone(),
                    DetectorAmplitude {
                        detector: det,
                        label: b.marker_label,
                        by_channel,
                    },
                ));
            }
        }
    }
    groups.into_iter().map(|(_, a)| a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn open() -> Layout {
        Layout::mach_zehnder(&LayoutParams::default()).unwrap()
    }

    fn closed() -> Layout {
        Layout::mach_zehnder(&LayoutParams {
            bs2_active: ActiveInterval::ALWAYS,
            ..LayoutParams::default()
        })
        .unwrap()
    }

    fn late(layout: &Layout) -> f64 {
        layout.detector_arrival_time() + 1.0
    }

    #[test]
    fn open_interferometer_amplitudes() {
        let layout = open();
        let branches = propagate_branches(&layout, late(&layout)).unwrap();
        assert_eq!(branches.len(), 2);
        let amps = detector_amplitudes(&layout, &branches);
        let d1 = amps.iter().find(|a| a.detector == DetectorId::D1).unwrap();
        let d2 = amps.iter().find(|a| a.detector == DetectorId::D2).unwrap();
        // −ψ1 at D1 and iψ2 at D2, each carrying 1/√2
        assert!((d1.by_channel[0] - c(-FRAC_1_SQRT_2, 0.0)).norm() < 1e-15);
        assert!((d2.by_channel[1] - c(0.0, FRAC_1_SQRT_2)).norm() < 1e-15);
        assert_eq!(d1.by_channel[1], c(0.0, 0.0));
    }

    #[test]
    fn closed_interferometer_amplitudes() {
        let layout = closed();
        let branches = propagate_branches(&layout, late(&layout)).unwrap();
        assert_eq!(branches.len(), 4);
        let amps = detector_amplitudes(&layout, &branches);
        assert_eq!(amps.len(), 2);
        let d1 = amps.iter().find(|a| a.detector == DetectorId::D1).unwrap();
        let d2 = amps.iter().find(|a| a.detector == DetectorId::D2).unwrap();
        // −(ψ1 + ψ2) and i(ψ2 − ψ1), each term carrying 1/2
        assert!((d1.by_channel[0] - c(-0.5, 0.0)).norm() < 1e-15);
        assert!((d1.by_channel[1] - c(-0.5, 0.0)).norm() < 1e-15);
        assert!((d2.by_channel[0] - c(0.0, -0.5)).norm() < 1e-15);
        assert!((d2.by_channel[1] - c(0.0, 0.5)).norm() < 1e-15);
        assert!((d1.total().norm_sqr() - 1.0).abs() < 1e-12);
        assert!(d2.total().norm_sqr() < 1e-12);
    }

    #[test]
    fn unitarity_and_auditable_history() {
        for layout in [open(), closed()] {
            for t in [0.0, 0.3, 1.0, 2.0, 2.25, 2.5, 4.0] {
                let branches = propagate_branches(&layout, t).unwrap();
                let total: f64 = branches.iter().map(|b| b.coefficient.norm_sqr()).sum();
                assert!((total - 1.0).abs() < 1e-14, "t = {t}: {total}");
                for b in &branches {
                    assert!((b.history_product() - b.coefficient).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn single_mirror_branch() {
        let source =
            GaussianPacket::new(Vec2::new(-5.0, 0.0), Vec2::new(10.0, 0.0), 1.0, 1.0, 0.0).unwrap();
        let layout = Layout {
            elements: vec![Element {
                name: "M".into(),
                kind: ElementKind::Mirror,
                position: Vec2::ZERO,
                normal: Vec2::new(1.0, -1.0).normalized(),
                half_width: 10.0,
                active: ActiveInterval::ALWAYS,
            }],
            source,
            geometry: Geometry {
                arm_length: 5.0,
                i2_center: Vec2::ZERO,
                i2_radius: 1.0,
            },
            reflection_factor: c(0.0, 1.0),
        };
        let branches = propagate_branches(&layout, 1.0).unwrap();
        assert_eq!(branches.len(), 1);
        assert_eq!(branches[0].coefficient, c(0.0, 1.0));
        assert_eq!(branches[0].coefficient.norm_sqr(), 1.0);
        let v = branches[0].packet.group_velocity;
        assert!(v.x.abs() < 1e-14 && (v.y - 10.0).abs() < 1e-12);
    }

    #[test]
    fn inactive_splitter_is_transparent() {
        let open = open();
        let late_insert = Layout::mach_zehnder(&LayoutParams {
            bs2_active: ActiveInterval {
                start: 10.0,
                end: f64::INFINITY,
            },
            ..LayoutParams::default()
        })
        .unwrap();
        let t = late(&open);
        let a = propagate_branches(&open, t).unwrap();
        let b = propagate_branches(&late_insert, t).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.coefficient, y.coefficient);
            assert_eq!(x.packet, y.packet);
        }
    }

    #[test]
    fn ambiguous_schedule_rejected() {
        let t2 = open().i2_arrival_time();
        let err = Layout::mach_zehnder(&LayoutParams {
            bs2_active: ActiveInterval {
                start: t2,
                end: f64::INFINITY,
            },
            ..LayoutParams::default()
        })
        .unwrap_err();
        assert!(matches!(err, OpticsError::AmbiguousSchedule { .. }));
    }

    #[test]
    fn packets_recombine_exactly_at_second_splitter() {
        let layout = open();
        let t2 = layout.i2_arrival_time();
        let branches = propagate_branches(&layout, t2 - 1e-6).unwrap();
        let bs2 = &layout.elements[layout.element_index("BS2").unwrap()];
        let a = &branches[0].packet;
        let b = &branches[1].packet;
        assert!((a.center_at(t2) - bs2.position).norm() < 1e-10);
        assert!(a.same_as(&b.reflected(bs2.position, bs2.normal), 1e-12));
    }

    #[test]
    fn interference_identity_in_overlap() {
        let layout = open();
        let t2 = layout.i2_arrival_time();
        let branches = propagate_branches(&layout, t2).unwrap();
        let one = |_: MarkerLabel| c(1.0, 0.0);
        for r in [Vec2::new(40.3, 39.8), Vec2::new(41.0, 40.2), Vec2::new(39.0, 39.5)] {
            let psi1 = branches[0].coefficient * branches[0].packet.evaluate(r, t2).unwrap();
            let psi2 = branches[1].coefficient * branches[1].packet.evaluate(r, t2).unwrap();
            let total = total_wavefunction(&branches, one, r, t2);
            let (r1, s1) = psi1.to_polar();
            let (r2, s2) = psi2.to_polar();
            let expect = r1 * r1 + r2 * r2 + 2.0 * r1 * r2 * (s2 - s1).cos();
            assert!((total.norm_sqr() - expect).abs() < 1e-12 * expect.max(1e-300));
        }
    }

    #[test]
    fn destructive_and_constructive_limits() {
        // equal moduli: ΔS' = π cancels, ΔS' = 0 quadruples
        let p = GaussianPacket::new(Vec2::ZERO, Vec2::ZERO, 1.0, 1.0, 0.0).unwrap();
        let mk = |coef: Complex64| Branch {
            coefficient: coef,
            ..Branch::source(p.clone(), MarkerLabel::Neutral)
        };
        let one = |_: MarkerLabel| c(1.0, 0.0);
        let r = Vec2::new(0.2, 0.1);
        let single = p.evaluate(r, 0.0).unwrap().norm_sqr();
        let destructive = [mk(c(1.0, 0.0)), mk(c(-1.0, 0.0))];
        assert!(total_wavefunction(&destructive, one, r, 0.0).norm_sqr() < 1e-30);
        let constructive = [mk(c(1.0, 0.0)), mk(c(1.0, 0.0))];
        let v = total_wavefunction(&constructive, one, r, 0.0).norm_sqr();
        assert!((v - 4.0 * single).abs() < 1e-14);
    }

    #[test]
    fn disjoint_branches_add_incoherently() {
        let layout = open();
        let t = 1.0;
        let branches = propagate_branches(&layout, t).unwrap();
        let one = |_: MarkerLabel| c(1.0, 0.0);
        for b in &branches {
            let r = b.packet.center_at(t) + Vec2::new(0.4, -0.7);
            let total = total_wavefunction(&branches, one, r, t).norm_sqr();
            let incoherent: f64 = branches
                .iter()
                .map(|x| (x.coefficient * x.packet.evaluate(r, t).unwrap()).norm_sqr())
                .sum();
            assert!((total - incoherent).abs() <= 1e-8 * incoherent);
        }
    }

    proptest::proptest! {
        #[test]
        fn coefficients_stay_unitary(
            r1 in 0.0f64..=1.0,
            r2 in 0.0f64..=1.0,
            t in 0.0f64..4.0,
            bs2 in proptest::bool::ANY,
        ) {
            let layout = Layout::mach_zehnder(&LayoutParams {
                bs1_reflectance: r1,
                bs2_reflectance: r2,
                bs2_active: if bs2 { ActiveInterval::ALWAYS } else { ActiveInterval::NEVER },
                ..LayoutParams::default()
            })
            .unwrap();
            let branches = propagate_branches(&layout, t).unwrap();
            let total: f64 = branches.iter().map(|b| b.coefficient.norm_sqr()).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-14);
        }

        #[test]
        fn two_branch_overlap_obeys_interference_identity(dx in -3.0f64..3.0, dy in -3.0f64..3.0, dt in -0.1f64..0.1) {
            let layout = open();
            let t = layout.i2_arrival_time() + dt;
            let branches = propagate_branches(&layout, t).unwrap();
            proptest::prop_assert_eq!(branches.len(), 2);
            let r = layout.geometry.i2_center + Vec2::new(dx, dy);
            let one = |_: MarkerLabel| c(1.0, 0.0);
            let (r1, s1) = (branches[0].coefficient * branches[0].packet.evaluate(r, t).unwrap()).to_polar();
            let (r2, s2) = (branches[1].coefficient * branches[1].packet.evaluate(r, t).unwrap()).to_polar();
            let expect = r1 * r1 + r2 * r2 + 2.0 * r1 * r2 * (s2 - s1).cos();
            let total = total_wavefunction(&branches, one, r, t).norm_sqr();
            proptest::prop_assert!((total - expect).abs() <= 1e-12 * (r1 + r2).powi(2).max(1e-300));
        }

        #[test]
        fn separated_branches_add_incoherently(t in 0.5f64..1.9, dx in -2.0f64..2.0, dy in -2.0f64..2.0) {
            let layout = open();
            let branches = propagate_branches(&layout, t).unwrap();
            let one = |_: MarkerLabel| c(1.0, 0.0);
            let w = layout.source.width_at(t);
            let centers: Vec<Vec2> = branches.iter().map(|b| b.packet.center_at(t)).collect();
            proptest::prop_assume!((centers[0] - centers[1]).norm() >= 10.0 * w);
            for c0 in &centers {
                let r = *c0 + Vec2::new(dx, dy);
                let total = total_wavefunction(&branches, one, r, t).norm_sqr();
                let incoherent: f64 = branches
                    .iter()
                    .map(|x| (x.coefficient * x.packet.evaluate(r, t).unwrap()).norm_sqr())
                    .sum();
                proptest::prop_assert!((total - incoherent).abs() <= 1e-8 * incoherent);
            }
        }

        #[test]
        fn inactive_splitter_leaves_coefficients_unchanged(start in 2.6f64..20.0, t in 0.0f64..5.0) {
            let base = open();
            let late_insert = Layout::mach_zehnder(&LayoutParams {
                bs2_active: ActiveInterval { start, end: f64::INFINITY },
                ..LayoutParams::default()
            })
            .unwrap();
            let a = propagate_branches(&base, t).unwrap();
            let b = propagate_branches(&late_insert, t).unwrap();
            proptest::prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert_eq!(x.coefficient, y.coefficient);
                proptest::prop_assert_eq!(&x.packet, &y.packet);
            }
        }
    }
}
