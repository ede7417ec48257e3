//! Which-way markers: the branch relabeling at interaction, the marker beable
//! and the conditional evaluation rule.
//!
//! A discrete marker is a two-level system left in `Up` unless a passage
//! through the marked arm flips it to `Down` (with efficiency `a²`). A pointer
//! marker is a 1D packet that is kicked away from `y = 0` when the marked arm
//! is traversed; its coordinate becomes an extra configuration dimension.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{propagate_branches, Action, Branch, BranchEvent, Channel, Layout, OpticsError};
use crate::vec2::Vec2;
use crate::wavepacket::{GaussianPacket1d, Jet1d, PacketError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkerError {
    #[error("marker already interacted in this run")]
    DoubleInteraction,
    #[error("invalid marker model: {0}")]
    InvalidModel(String),
    #[error("no {channel:?} packet passes the interaction position ({x}, {y})")]
    Unreachable { channel: Channel, x: f64, y: f64 },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerLabel {
    Neutral,
    Up,
    Down,
    PointerUnfired,
    PointerFired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spin {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MarkerKind {
    None,
    Discrete {
        efficiency_sq: f64,
    },
    Pointer {
        ejection_speed: f64,
        pointer_sigma: f64,
        pointer_mass: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerModel {
    pub kind: MarkerKind,
    pub placement_channel: Channel,
    pub interaction_position: Vec2,
}

impl MarkerModel {
    pub fn new(kind: MarkerKind, placement_channel: Channel, interaction_position: Vec2) -> Self {
        Self {
            kind,
            placement_channel,
            interaction_position,
        }
    }

    pub fn validate(&self) -> Result<(), MarkerError> {
        if !self.interaction_position.is_finite() {
            return Err(MarkerError::InvalidModel("interaction position must be finite".into()));
        }
        match self.kind {
            MarkerKind::None => Ok(()),
            MarkerKind::Discrete { efficiency_sq } => {
                if (0.0..=1.0).contains(&efficiency_sq) {
                    Ok(())
                } else {
                    Err(MarkerError::InvalidModel(format!(
                        "efficiency a^2 = {efficiency_sq} outside [0, 1]"
                    )))
                }
            }
            MarkerKind::Pointer {
                ejection_speed,
                pointer_sigma,
                pointer_mass,
            } => {
                if !(ejection_speed.is_finite() && pointer_sigma > 0.0 && pointer_mass > 0.0)
                    || !(pointer_sigma.is_finite() && pointer_mass.is_finite())
                {
                    Err(MarkerError::InvalidModel(
                        "pointer needs finite speed and positive sigma and mass".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn is_pointer(&self) -> bool {
        matches!(self.kind, MarkerKind::Pointer { .. })
    }

    /// `(a, b)` with `a² + b² = 1`; `a = 0` when no spin flip can occur.
    pub fn amplitudes(&self) -> (f64, f64) {
        match self.kind {
            MarkerKind::Discrete { efficiency_sq } => {
                (efficiency_sq.sqrt(), (1.0 - efficiency_sq).sqrt())
            }
            _ => (0.0, 1.0),
        }
    }

    pub fn initial_label(&self) -> MarkerLabel {
        if self.is_pointer() {
            MarkerLabel::PointerUnfired
        } else {
            MarkerLabel::Neutral
        }
    }

    /// Time at which the marked arm's packet center passes the interaction
    /// position.
    pub fn interaction_time(&self, layout: &Layout) -> Result<f64, MarkerError> {
        let crossings = layout.crossings()?;
        let mut bounds: Vec<f64> = crossings.iter().map(|c| c.time).collect();
        bounds.push(f64::INFINITY);
        let mut start = layout.source.birth_time;
        let pos = self.interaction_position;
        for end in bounds {
            if end - start > 0.0 {
                let probe = if end.is_finite() { 0.5 * (start + end) } else { start + 1.0 };
                for b in propagate_branches(layout, probe)? {
                    if b.channel != Some(self.placement_channel) {
                        continue;
                    }
                    let p = &b.packet;
                    let v2 = p.group_velocity.norm_sq();
                    let t = p.birth_time + (pos - p.center).dot(p.group_velocity) / v2;
                    let miss = (p.center_at(t) - pos).norm();
                    if t > start && t < end && miss <= 1e-9 * (1.0 + pos.norm()) {
                        return Ok(t);
                    }
                }
            }
            start = end;
        }
        Err(MarkerError::Unreachable {
            channel: self.placement_channel,
            x: pos.x,
            y: pos.y,
        })
    }

    /// Pointer packets `(unfired, fired)` for a kick at `t_interaction`.
    pub fn pointer_packets(
        &self,
        t_interaction: f64,
    ) -> Result<Option<(GaussianPacket1d, GaussianPacket1d)>, MarkerError> {
        match self.kind {
            MarkerKind::Pointer {
                ejection_speed,
                pointer_sigma,
                pointer_mass,
            } => {
                let unfired = GaussianPacket1d::new(0.0, 0.0, pointer_sigma, pointer_mass, 0.0)?;
                let fired = unfired.kicked(pointer_mass * ejection_speed, t_interaction);
                Ok(Some((unfired, fired)))
            }
            _ => Ok(None),
        }
    }
}

/// Actual configuration of the marker in one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkerBeable {
    pub discrete_value: Option<Spin>,
    pub pointer_position: Option<f64>,
    #[serde(skip)]
    interacted: bool,
}

impl MarkerBeable {
    pub fn for_model(model: &MarkerModel, pointer_start: f64) -> Self {
        Self {
            discrete_value: None,
            pointer_position: model.is_pointer().then_some(pointer_start),
            interacted: false,
        }
    }

    /// A discrete beable already set by an interaction.
    pub fn discrete(value: Spin) -> Self {
        Self {
            discrete_value: Some(value),
            pointer_position: None,
            interacted: true,
        }
    }

    pub fn interacted(&self) -> bool {
        self.interacted
    }

    /// The beable excited by the marked passage: a flipped spin or a fired pointer.
    pub fn excited(&self, model: &MarkerModel, pointer_fired: impl Fn(f64) -> bool) -> bool {
        match model.kind {
            MarkerKind::None => false,
            MarkerKind::Discrete { .. } => self.discrete_value == Some(Spin::Down),
            MarkerKind::Pointer { .. } => self.pointer_position.is_some_and(pointer_fired),
        }
    }
}

/// Relabels the branch list at the interaction time. For the discrete model
/// each marked-arm branch `ψ` splits into `b ψ` (up) followed by `a ψ` (down)
/// and every other branch is relabeled up; zero-weight pieces are dropped.
/// For the pointer model marked-arm branches become fired.
pub fn split_branches(model: &MarkerModel, branches: &[Branch], t_interaction: f64) -> Vec<Branch> {
    let marked = |b: &Branch| b.channel == Some(model.placement_channel);
    let mut out = Vec::with_capacity(branches.len() + 2);
    for b in branches {
        match model.kind {
            MarkerKind::None => out.push(b.clone()),
            MarkerKind::Discrete { .. } => {
                if !marked(b) {
                    out.push(Branch {
                        marker_label: MarkerLabel::Up,
                        ..b.clone()
                    });
                    continue;
                }
                let (a, bb) = model.amplitudes();
                for (amp, label) in [(bb, MarkerLabel::Up), (a, MarkerLabel::Down)] {
                    if amp == 0.0 {
                        continue;
                    }
                    let mut piece = b.clone();
                    let f = Complex64::new(amp, 0.0);
                    piece.coefficient *= f;
                    piece.marker_label = label;
                    let at = piece.history.partition_point(|e| e.time <= t_interaction);
                    piece.history.insert(
                        at,
                        BranchEvent {
                            element: None,
                            action: Action::Marked,
                            time: t_interaction,
                            factor: f,
                        },
                    );
                    out.push(piece);
                }
            }
            MarkerKind::Pointer { .. } => {
                let label = if marked(b) {
                    MarkerLabel::PointerFired
                } else {
                    MarkerLabel::PointerUnfired
                };
                out.push(Branch {
                    marker_label: label,
                    ..b.clone()
                });
            }
        }
    }
    out
}

/// Beable update at the interaction time. The Bernoulli draw happens only
/// for a discrete marker when the particle is in the marked arm.
pub fn interact<R: Rng + ?Sized>(
    model: &MarkerModel,
    beable: &mut MarkerBeable,
    particle_channel: Channel,
    rng: &mut R,
) -> Result<(), MarkerError> {
    if beable.interacted {
        return Err(MarkerError::DoubleInteraction);
    }
    beable.interacted = true;
    if let MarkerKind::Discrete { efficiency_sq } = model.kind {
        let flipped =
            particle_channel == model.placement_channel && rng.random::<f64>() < efficiency_sq;
        beable.discrete_value = Some(if flipped { Spin::Down } else { Spin::Up });
    }
    Ok(())
}

/// Marker model resolved against a layout: interaction time and pointer packets.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerContext {
    pub model: MarkerModel,
    pub t_interaction: f64,
    pub pointer: Option<(GaussianPacket1d, GaussianPacket1d)>,
}

impl MarkerContext {
    pub fn new(model: MarkerModel, layout: &Layout) -> Result<Self, MarkerError> {
        model.validate()?;
        let t_interaction = model.interaction_time(layout)?;
        let pointer = model.pointer_packets(t_interaction)?;
        Ok(Self {
            model,
            t_interaction,
            pointer,
        })
    }

    pub fn pointer_mass(&self) -> Option<f64> {
        self.pointer.as_ref().map(|(p, _)| p.mass)
    }

    /// Factor multiplying a branch of the given label in the conditional
    /// wave function, with its first two derivatives in the pointer coordinate.
    pub fn conditional_jet(&self, beable: &MarkerBeable, label: MarkerLabel, t: f64) -> Jet1d {
        self.factor_jet(beable.discrete_value, beable.pointer_position, label, t)
    }

    /// As [`MarkerContext::conditional_jet`] with the beable given by parts.
    pub fn factor_jet(
        &self,
        discrete: Option<Spin>,
        pointer: Option<f64>,
        label: MarkerLabel,
        t: f64,
    ) -> Jet1d {
        let one = Jet1d {
            value: Complex64::new(1.0, 0.0),
            ..Jet1d::default()
        };
        match label {
            MarkerLabel::Neutral => one,
            MarkerLabel::Up | MarkerLabel::Down => match discrete {
                None => one,
                Some(Spin::Up) if label == MarkerLabel::Up => one,
                Some(Spin::Down) if label == MarkerLabel::Down => one,
                Some(_) => Jet1d::default(),
            },
            MarkerLabel::PointerUnfired | MarkerLabel::PointerFired => {
                let (Some((unfired, fired)), Some(y)) = (&self.pointer, pointer) else {
                    return one;
                };
                let p = if label == MarkerLabel::PointerFired { fired } else { unfired };
                p.jet_unchecked(y, t)
            }
        }
    }

    pub fn conditional_factor(&self, beable: &MarkerBeable, label: MarkerLabel, t: f64) -> Complex64 {
        self.conditional_jet(beable, label, t).value
    }

    /// Whether a pointer at `y` sits closer to the fired than to the unfired packet.
    pub fn pointer_fired_at(&self, y: f64, t: f64) -> bool {
        match &self.pointer {
            Some((u, f)) => (y - f.center_at(t)).abs() < (y - u.center_at(t)).abs(),
            None => false,
        }
    }
}

/// Conditional factor of a label for a marker model already resolved to a layout.
pub fn conditional_factor(
    context: &MarkerContext,
    beable: &MarkerBeable,
    label: MarkerLabel,
    t: f64,
) -> Complex64 {
    context.conditional_factor(beable, label, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::LayoutParams;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> Layout {
        Layout::mach_zehnder(&LayoutParams::default()).unwrap()
    }

    fn discrete(a2: f64) -> MarkerModel {
        MarkerModel::new(
            MarkerKind::Discrete { efficiency_sq: a2 },
            Channel::Two,
            Vec2::new(20.0, 0.0),
        )
    }

    fn pointer() -> MarkerModel {
        MarkerModel::new(
            MarkerKind::Pointer {
                ejection_speed: 40.0,
                pointer_sigma: 1.0,
                pointer_mass: 10.0,
            },
            Channel::Two,
            Vec2::new(20.0, 0.0),
        )
    }

    #[test]
    fn interaction_time_on_marked_arm() {
        let t = discrete(1.0).interaction_time(&layout()).unwrap();
        assert!((t - 0.75).abs() < 1e-12);
        let off = MarkerModel::new(MarkerKind::None, Channel::One, Vec2::new(20.0, 0.0));
        assert!(off.interaction_time(&layout()).is_err());
    }

    #[test]
    fn full_efficiency_flips_only_in_marked_arm() {
        let model = discrete(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = MarkerBeable::for_model(&model, 0.0);
        interact(&model, &mut b, Channel::Two, &mut rng).unwrap();
        assert_eq!(b.discrete_value, Some(Spin::Down));
        let mut b = MarkerBeable::for_model(&model, 0.0);
        interact(&model, &mut b, Channel::One, &mut rng).unwrap();
        assert_eq!(b.discrete_value, Some(Spin::Up));
    }

    #[test]
    fn double_interaction_rejected() {
        let model = discrete(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = MarkerBeable::for_model(&model, 0.0);
        interact(&model, &mut b, Channel::Two, &mut rng).unwrap();
        let first = b.discrete_value;
        assert_eq!(
            interact(&model, &mut b, Channel::Two, &mut rng),
            Err(MarkerError::DoubleInteraction)
        );
        assert_eq!(b.discrete_value, first);
    }

    #[test]
    fn zero_efficiency_keeps_branch_structure() {
        let layout = layout();
        let before = propagate_branches(&layout, 1.0).unwrap();
        let after = split_branches(&discrete(0.0), &before, 0.75);
        assert_eq!(before.len(), after.len());
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.coefficient, y.coefficient);
            assert_eq!(x.packet, y.packet);
            assert_eq!(y.marker_label, MarkerLabel::Up);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut b = MarkerBeable::for_model(&discrete(0.0), 0.0);
            interact(&discrete(0.0), &mut b, Channel::Two, &mut rng).unwrap();
            assert_eq!(b.discrete_value, Some(Spin::Up));
        }
    }

    #[test]
    fn conditional_zeroing() {
        let ctx = MarkerContext::new(discrete(1.0), &layout()).unwrap();
        let down = MarkerBeable {
            discrete_value: Some(Spin::Down),
            ..MarkerBeable::default()
        };
        let up = MarkerBeable {
            discrete_value: Some(Spin::Up),
            ..MarkerBeable::default()
        };
        assert_eq!(ctx.conditional_factor(&down, MarkerLabel::Up, 1.0), Complex64::new(0.0, 0.0));
        assert_eq!(ctx.conditional_factor(&up, MarkerLabel::Up, 1.0), Complex64::new(1.0, 0.0));
        assert_eq!(ctx.conditional_factor(&down, MarkerLabel::Neutral, 1.0), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn separated_pointer_packets_decouple() {
        let ctx = MarkerContext::new(pointer(), &layout()).unwrap();
        let (u, f) = ctx.pointer.clone().unwrap();
        // find a time with 10 widths of separation
        let t = (0..400)
            .map(|i| ctx.t_interaction + 0.01 * i as f64)
            .find(|&t| f.center_at(t) - u.center_at(t) >= 10.0 * u.width_at(t))
            .unwrap();
        let y = f.center_at(t);
        let beable = MarkerBeable {
            pointer_position: Some(y),
            ..MarkerBeable::default()
        };
        let fired = ctx.conditional_factor(&beable, MarkerLabel::PointerFired, t).norm();
        let unfired = ctx.conditional_factor(&beable, MarkerLabel::PointerUnfired, t).norm();
        assert!(unfired < 1e-10 * fired);
    }

    #[test]
    fn pointer_overlap_decreases_after_kick() {
        let ctx = MarkerContext::new(pointer(), &layout()).unwrap();
        let (u, f) = ctx.pointer.clone().unwrap();
        // density overlap: the wave overlap is conserved by the common free evolution
        let overlap = |t: f64| {
            let h = 0.01;
            let mut acc = 0.0;
            for i in -20000..20000 {
                let y = i as f64 * h;
                acc += u.evaluate(y, t).unwrap().norm() * f.evaluate(y, t).unwrap().norm();
            }
            acc * h
        };
        let t0 = ctx.t_interaction;
        assert!((overlap(t0) - 1.0).abs() < 1e-9);
        let mut last = overlap(t0);
        for dt in [0.02, 0.05, 0.1, 0.2, 0.4] {
            let o = overlap(t0 + dt);
            assert!(o < last, "overlap {o} at +{dt} not below {last}");
            last = o;
        }
    }

    #[test]
    fn invalid_efficiency_rejected() {
        assert!(discrete(1.5).validate().is_err());
        assert!(discrete(-0.1).validate().is_err());
    }

    proptest! {
        #[test]
        fn split_preserves_total_weight(a2 in 0.0f64..=1.0) {
            let layout = layout();
            let before = propagate_branches(&layout, 1.0).unwrap();
            let after = split_branches(&discrete(a2), &before, 0.75);
            let w: f64 = after.iter().map(|b| b.coefficient.norm_sqr()).sum();
            prop_assert!((w - 1.0).abs() < 1e-14);
            for b in &after {
                prop_assert!((b.history_product() - b.coefficient).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn flip_fraction_is_binomial() {
        for a2 in [0.25, 0.5, 0.75] {
            let model = discrete(a2);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let n = 20_000;
            let mut down = 0usize;
            for _ in 0..n {
                let mut b = MarkerBeable::for_model(&model, 0.0);
                interact(&model, &mut b, Channel::Two, &mut rng).unwrap();
                down += (b.discrete_value == Some(Spin::Down)) as usize;
            }
            let p = down as f64 / n as f64;
            let sigma = (a2 * (1.0 - a2) / n as f64).sqrt();
            assert!((p - a2).abs() < 3.0 * sigma, "a2 = {a2}: {p}");
        }
    }
}
