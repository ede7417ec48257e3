//! Brute-force checks: Born probabilities by branch algebra and by grid
//! quadrature, finite-difference derivative checks, and chi-square tests of
//! ensemble positions against `|Ψ|²`.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::marker::{split_branches, MarkerBeable, MarkerContext, MarkerLabel};
use crate::optics::{detector_amplitudes, propagate_branches, Branch, DetectorId, Layout, OpticsError};
use crate::pilotwave::{trajectory_rng, Configuration, PilotError, Recording, WaveField};
use crate::scenarios::{Scenario, ScenarioError};
use crate::vec2::Vec2;

/// Largest allowed gap between the two Born routes.
pub const ROUTE_AGREEMENT: f64 = 1e-4;
pub const FD_STEP_FIRST: f64 = 1e-4;
pub const FD_STEP_SECOND: f64 = 1e-3;
pub const CHI_SQUARE_LEVEL: f64 = 0.99;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error("branch algebra gives {algebra}, quadrature gives {quadrature}")]
    RouteDisagreement { algebra: f64, quadrature: f64 },
    #[error("distinct packets share detector {0:?} and cannot be grouped")]
    Ungroupable(DetectorId),
    #[error("trajectory {index} ended at t = {t} before the checkpoint {t_check}")]
    EndedEarly { index: usize, t: f64, t_check: f64 },
    #[error("invalid oracle input: {0}")]
    Invalid(String),
}

/// Rectangular trapezoid grid. `bounds` are the lower-left and upper-right
/// corners; `resolution` counts points per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub bounds: (Vec2, Vec2),
    pub resolution: (usize, usize),
    pub t: f64,
}

impl QuadratureGrid {
    /// Covers `margin` widths around every live packet center with
    /// `points_per_width` points per packet width.
    pub fn covering(branches: &[Branch], t: f64, margin: f64, points_per_width: f64) -> Self {
        let w = branches
            .iter()
            .map(|b| b.packet.width_at(t))
            .fold(0.0, f64::max);
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for b in branches {
            let c = b.packet.center_at(t);
            lo = Vec2::new(lo.x.min(c.x), lo.y.min(c.y));
            hi = Vec2::new(hi.x.max(c.x), hi.y.max(c.y));
        }
        let pad = Vec2::new(margin * w, margin * w);
        let (lo, hi) = (lo - pad, hi + pad);
        let h = w / points_per_width;
        let nx = ((hi.x - lo.x) / h).ceil() as usize + 1;
        let ny = ((hi.y - lo.y) / h).ceil() as usize + 1;
        Self {
            bounds: (lo, hi),
            resolution: (nx, ny),
            t,
        }
    }

    pub fn spacing(&self) -> (f64, f64) {
        let (lo, hi) = self.bounds;
        (
            (hi.x - lo.x) / (self.resolution.0 - 1) as f64,
            (hi.y - lo.y) / (self.resolution.1 - 1) as f64,
        )
    }

    /// Trapezoid rule; the edges sit in the Gaussian tails so end weights
    /// barely matter, but they are applied anyway.
    pub fn integrate<F>(&self, f: F) -> f64
    where
        F: Fn(Vec2) -> f64 + Sync,
    {
        let (lo, _) = self.bounds;
        let (hx, hy) = self.spacing();
        let (nx, ny) = self.resolution;
        let rows: f64 = (0..ny)
            .into_par_iter()
            .map(|j| {
                let y = lo.y + j as f64 * hy;
                let wy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                let mut s = 0.0;
                for i in 0..nx {
                    let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                    s += wx * f(Vec2::new(lo.x + i as f64 * hx, y));
                }
                wy * s
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        rows * hx * hy
    }
}

/// `∫|Ψ|²` over a grid covering `margin` widths around every branch.
pub fn norm_by_quadrature(branches: &[Branch], t: f64, margin: f64, points_per_width: f64) -> f64 {
    let grid = QuadratureGrid::covering(branches, t, margin, points_per_width);
    let labels = labels_of(branches);
    grid.integrate(|r| {
        labels
            .iter()
            .map(|&l| label_field(branches, l, r, t).norm_sqr())
            .sum()
    })
}

fn labels_of(branches: &[Branch]) -> Vec<MarkerLabel> {
    let mut labels: Vec<MarkerLabel> = branches.iter().map(|b| b.marker_label).collect();
    labels.sort();
    labels.dedup();
    labels
}

fn label_field(branches: &[Branch], label: MarkerLabel, r: Vec2, t: f64) -> Complex64 {
    branches
        .iter()
        .filter(|b| b.marker_label == label)
        .map(|b| b.coefficient * b.packet.jet_unchecked(r, t).value)
        .sum()
}

/// `⟨χ_l'|χ_l⟩` for the marker states attached to two labels at time `t`.
fn label_overlap(ctx: &MarkerContext, l: MarkerLabel, lp: MarkerLabel, t: f64) -> Complex64 {
    if l == lp {
        return Complex64::new(1.0, 0.0);
    }
    let pointer_pair = matches!(
        (l, lp),
        (MarkerLabel::PointerFired, MarkerLabel::PointerUnfired)
            | (MarkerLabel::PointerUnfired, MarkerLabel::PointerFired)
    );
    match (&ctx.pointer, pointer_pair) {
        (Some((u, f)), true) => {
            let (chi_l, chi_lp) = if l == MarkerLabel::PointerFired { (f, u) } else { (u, f) };
            let w = u.width_at(t).max(f.width_at(t));
            let lo = u.center_at(t).min(f.center_at(t)) - 10.0 * w;
            let hi = u.center_at(t).max(f.center_at(t)) + 10.0 * w;
            let k = u.wavenumber.abs().max(f.wavenumber.abs()).max(1.0 / w);
            let h = (w / 64.0).min(std::f64::consts::PI / (16.0 * k));
            let n = ((hi - lo) / h).ceil() as usize;
            let h = (hi - lo) / n as f64;
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..=n {
                let y = lo + i as f64 * h;
                let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                s += chi_lp.jet_unchecked(y, t).value.conj() * chi_l.jet_unchecked(y, t).value * wgt;
            }
            s * h
        }
        _ => Complex64::new(0.0, 0.0),
    }
}

/// Branches of the scenario's wave at `t`, relabeled by the marker once the
/// interaction time has passed.
fn labeled_branches(scenario: &Scenario, ctx: &MarkerContext, t: f64) -> Result<Vec<Branch>, OracleError> {
    let branches = propagate_branches(&scenario.layout, t)?;
    if t >= ctx.t_interaction {
        Ok(split_branches(&ctx.model, &branches, ctx.t_interaction))
    } else {
        let initial = ctx.model.initial_label();
        Ok(branches
            .into_iter()
            .map(|b| Branch {
                marker_label: initial,
                ..b
            })
            .collect())
    }
}

/// Outcome of both Born routes for one detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BornEstimate {
    pub branch_algebra: f64,
    pub quadrature: f64,
    /// Quadrature repeated at twice the resolution.
    pub quadrature_fine: f64,
    pub t_quadrature: f64,
}

impl BornEstimate {
    pub fn routes_agree(&self) -> bool {
        (self.branch_algebra - self.quadrature).abs() <= ROUTE_AGREEMENT
    }

    pub fn quadrature_convergence(&self) -> f64 {
        (self.quadrature_fine - self.quadrature).abs()
    }
}

/// Time at which the outgoing beams are well separated but not yet absorbed.
fn quadrature_time(layout: &Layout) -> f64 {
    let t2 = layout.i2_arrival_time();
    let entry = layout.detector_arrival_time() - layout.detector_radius(DetectorId::D1) / layout.speed();
    if entry > t2 {
        entry - 0.1 * (entry - t2)
    } else {
        t2 + 0.5
    }
}

/// Whether `r` lies on the side of the output region that feeds `detector`.
fn side_weight(layout: &Layout, detector: DetectorId, r: Vec2) -> f64 {
    let d1 = layout.detector(DetectorId::D1).position;
    let d2 = layout.detector(DetectorId::D2).position;
    let u = (d1 - d2).normalized();
    let mid = (d1 + d2) * 0.5;
    let s = (r - mid).dot(u);
    let s = if detector == DetectorId::D1 { s } else { -s };
    if s > 0.0 {
        1.0
    } else if s == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Both Born routes for `P(detector)`, optionally restricted to one
/// marker label (joint probability with an orthogonal marker state).
pub fn born_estimate(
    scenario: &Scenario,
    detector: DetectorId,
    label: Option<MarkerLabel>,
) -> Result<BornEstimate, OracleError> {
    let layout = &scenario.layout;
    let ctx = MarkerContext::new(scenario.marker.clone(), layout).map_err(ScenarioError::from)?;
    let keep = |l: MarkerLabel| label.is_none_or(|x| x == l);

    // (a) absorbed amplitudes after the run, grouped by packet and label
    let t_a = scenario.t_end;
    let finished = labeled_branches(scenario, &ctx, t_a)?;
    let amps: Vec<_> = detector_amplitudes(layout, &finished)
        .into_iter()
        .filter(|a| a.detector == detector && keep(a.label))
        .collect();
    let mut algebra = Complex64::new(0.0, 0.0);
    for a in &amps {
        for b in &amps {
            if a.label == b.label && !std::ptr::eq(a, b) {
                return Err(OracleError::Ungroupable(detector));
            }
            algebra += label_overlap(&ctx, a.label, b.label, t_a) * a.total() * b.total().conj();
        }
    }

    // (b) grid quadrature on the detector's half of the output region
    let t_q = quadrature_time(layout);
    let live = labeled_branches(scenario, &ctx, t_q)?;
    let labels: Vec<MarkerLabel> = labels_of(&live).into_iter().filter(|&l| keep(l)).collect();
    let mut overlaps = Vec::new();
    for &l in &labels {
        for &lp in &labels {
            overlaps.push((l, lp, label_overlap(&ctx, l, lp, t_q)));
        }
    }
    let density = |r: Vec2| {
        let side = side_weight(layout, detector, r);
        if side == 0.0 {
            return 0.0;
        }
        let fields: Vec<(MarkerLabel, Complex64)> =
            labels.iter().map(|&l| (l, label_field(&live, l, r, t_q))).collect();
        let mut s = Complex64::new(0.0, 0.0);
        for &(l, lp, o) in &overlaps {
            if o == Complex64::new(0.0, 0.0) {
                continue;
            }
            let fl = fields.iter().find(|f| f.0 == l).unwrap().1;
            let flp = fields.iter().find(|f| f.0 == lp).unwrap().1;
            s += o * fl * flp.conj();
        }
        side * s.re
    };
    let coarse = QuadratureGrid::covering(&live, t_q, 8.0, 16.0);
    let fine = QuadratureGrid::covering(&live, t_q, 8.0, 32.0);
    Ok(BornEstimate {
        branch_algebra: algebra.re,
        quadrature: coarse.integrate(density),
        quadrature_fine: fine.integrate(density),
        t_quadrature: t_q,
    })
}

/// `P(detector)` by branch algebra, after checking it against quadrature.
pub fn born_probability(scenario: &Scenario, detector: DetectorId) -> Result<f64, OracleError> {
    checked(born_estimate(scenario, detector, None)?)
}

/// Joint probability of `detector` and an orthogonal marker `label`.
pub fn born_joint(scenario: &Scenario, detector: DetectorId, label: MarkerLabel) -> Result<f64, OracleError> {
    checked(born_estimate(scenario, detector, Some(label))?)
}

fn checked(e: BornEstimate) -> Result<f64, OracleError> {
    if e.routes_agree() {
        Ok(e.branch_algebra)
    } else {
        Err(OracleError::RouteDisagreement {
            algebra: e.branch_algebra,
            quadrature: e.quadrature,
        })
    }
}

/// Largest deviation of the absorbed detector coefficients of a layout with
/// both splitters active from the path products under the `i`-per-reflection
/// convention: channel 1 gives `−r₁t₂` at D1 and `−i r₁r₂` at D2, channel 2
/// gives `−t₁r₂` at D1 and `i t₁t₂` at D2.
pub fn closed_amplitude_deviation(layout: &Layout, t: f64) -> Result<f64, OracleError> {
    let splitter = |name: &str| -> Result<(f64, f64), OracleError> {
        let idx = layout
            .element_index(name)
            .ok_or_else(|| OracleError::Invalid(format!("layout has no {name}")))?;
        match layout.elements[idx].kind {
            crate::optics::ElementKind::BeamSplitter {
                reflectance,
                transmittance,
            } => Ok((reflectance, transmittance)),
            _ => Err(OracleError::Invalid(format!("{name} is not a beam splitter"))),
        }
    };
    let (r1, t1) = splitter("BS1")?;
    let (r2, t2) = splitter("BS2")?;
    let c = Complex64::new;
    let expected = [
        (DetectorId::D1, [c(-r1 * t2, 0.0), c(-t1 * r2, 0.0)]),
        (DetectorId::D2, [c(0.0, -r1 * r2), c(0.0, t1 * t2)]),
    ];
    let branches = propagate_branches(layout, t)?;
    let amps = detector_amplitudes(layout, &branches);
    let mut worst: f64 = 0.0;
    for (det, want) in expected {
        let mut got = [Complex64::new(0.0, 0.0); 2];
        for a in amps.iter().filter(|a| a.detector == det) {
            got[0] += a.by_channel[0];
            got[1] += a.by_channel[1];
        }
        for ch in 0..2 {
            worst = worst.max((got[ch] - want[ch]).norm());
        }
    }
    Ok(worst)
}

/// Worst relative errors of analytic quantities against finite differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdErrors {
    pub gradient: f64,
    pub laplacian: f64,
    pub velocity: f64,
    pub quantum_potential: f64,
}

impl FdErrors {
    fn max(self, o: FdErrors) -> FdErrors {
        FdErrors {
            gradient: self.gradient.max(o.gradient),
            laplacian: self.laplacian.max(o.laplacian),
            velocity: self.velocity.max(o.velocity),
            quantum_potential: self.quantum_potential.max(o.quantum_potential),
        }
    }
}

fn first_stencil<T, F>(f: F, h: f64) -> T
where
    F: Fn(f64) -> T,
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    (f(-2.0 * h) - f(2.0 * h) + (f(h) - f(-h)) * 8.0) * (1.0 / (12.0 * h))
}

fn second_stencil<T, F>(f: F, h: f64) -> T
where
    F: Fn(f64) -> T,
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    ((f(h) + f(-h)) * 16.0 - (f(2.0 * h) + f(-2.0 * h)) - f(0.0) * 30.0) * (1.0 / (12.0 * h * h))
}

fn shifted(q: &Configuration, axis: usize, d: f64) -> Configuration {
    let mut s = *q;
    match axis {
        0 => s.particle.x += d,
        1 => s.particle.y += d,
        _ => s.pointer = s.pointer.map(|y| y + d),
    }
    s
}

/// Compares the analytic gradient, Laplacian, velocity and quantum potential
/// of the conditional wave at each point with fourth-order central
/// differences. Gradient and Laplacian errors are relative to the vector
/// norm of the analytic value, floored at `|Ψ|/σ₀` and `|Ψ|/σ₀²`; velocity
/// error is relative to `|v|`; quantum potential error is relative to `|Q|`
/// floored at `1/(m σ(t)²)`. The amplitude derivatives are taken on
/// `|Ψ|²` rather than `|Ψ|`, whose kinks at nodes spoil the stencil.
pub fn fd_check(field: &WaveField, beable: &MarkerBeable, points: &[Configuration]) -> Result<FdErrors, OracleError> {
    let m = field.mass();
    let sigma0 = field.layout.source.sigma0;
    let pointer_mass = field.marker.pointer_mass();
    let mut worst = FdErrors::default();
    for q in points {
        let axes: Vec<usize> = if q.pointer.is_some() { vec![0, 1, 2] } else { vec![0, 1] };
        let jet = field.field_jet(beable, q);
        let psi = |axis: usize, d: f64| field.field_jet(beable, &shifted(q, axis, d)).value;
        let density = |axis: usize, d: f64| psi(axis, d).norm_sqr();
        let dynamics = field.dynamics(beable, q)?;

        let scale = jet.value.norm();
        let mut grad_err = 0.0;
        let mut grad_norm = 0.0;
        for &a in &axes {
            let fd = first_stencil(|d| psi(a, d), FD_STEP_FIRST);
            grad_err += (fd - jet.grad[a]).norm_sqr();
            grad_norm += jet.grad[a].norm_sqr();
        }
        let gradient = grad_err.sqrt() / grad_norm.sqrt().max(scale / sigma0);

        let lap_fd = second_stencil(|d| psi(0, d), FD_STEP_SECOND) + second_stencil(|d| psi(1, d), FD_STEP_SECOND);
        let laplacian = (lap_fd - jet.lap_particle).norm() / jet.lap_particle.norm().max(scale / (sigma0 * sigma0));

        // phase increments relative to the center point stay unwrapped for small h
        let phase = |a: usize, d: f64| (psi(a, d) / jet.value).arg();
        let mut v_fd = [0.0; 3];
        for &a in &axes {
            let mass = if a == 2 { pointer_mass.unwrap_or(m) } else { m };
            v_fd[a] = first_stencil(|d| phase(a, d), FD_STEP_FIRST) / mass;
        }
        let v_an = [
            dynamics.velocity.x,
            dynamics.velocity.y,
            dynamics.pointer_velocity.unwrap_or(0.0),
        ];
        let dv: f64 = (0..3).map(|i| (v_fd[i] - v_an[i]).powi(2)).sum::<f64>().sqrt();
        let vn: f64 = v_an.iter().map(|v| v * v).sum::<f64>().sqrt();
        let velocity = dv / vn.max(1e-300);

        // ∇²R/R = ∇²ρ/(2ρ) − |∇ρ|²/(4ρ²) with ρ = R², smooth through nodes
        let rho0 = density(0, 0.0);
        let q_at = |h: f64| {
            let mut q_fd = 0.0;
            for &a in &axes {
                let mass = if a == 2 { pointer_mass.unwrap_or(m) } else { m };
                let d1 = first_stencil(|d| density(a, d), FD_STEP_FIRST);
                let d2 = second_stencil(|d| density(a, d), h);
                q_fd += -(d2 / (2.0 * rho0) - d1 * d1 / (4.0 * rho0 * rho0)) / (2.0 * mass);
            }
            q_fd
        };
        // one Richardson step removes the h⁴ term, which dominates near fringe minima
        let q_fd = (16.0 * q_at(FD_STEP_SECOND) - q_at(2.0 * FD_STEP_SECOND)) / 15.0;
        let w = field.layout.source.width_at(q.t);
        let q_scale = dynamics.quantum_potential.abs().max(1.0 / (m * w * w));
        let quantum_potential = (q_fd - dynamics.quantum_potential).abs() / q_scale;

        worst = worst.max(FdErrors {
            gradient,
            laplacian,
            velocity,
            quantum_potential,
        });
    }
    Ok(worst)
}

/// Smallest accepted estimate `R/|∇R|` of the distance to a node: twice the
/// widest stencil reach used by [`fd_check`].
pub const NODE_CLEARANCE: f64 = 8.0 * FD_STEP_SECOND;

/// Random points within `radius` of `center` at time `t` where the
/// conditional wave exceeds `1e-8` of its peak scale and the nearest node is
/// at least [`NODE_CLEARANCE`] away.
pub fn random_nonnode_points<R: Rng + ?Sized>(
    field: &WaveField,
    beable: &MarkerBeable,
    center: Vec2,
    radius: f64,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Vec<Configuration> {
    let mut out = Vec::with_capacity(n);
    let pointer = field.marker.pointer.as_ref().map(|(u, _)| u.center_at(t));
    while out.len() < n {
        let r = radius * rng.random::<f64>().sqrt();
        let th = std::f64::consts::TAU * rng.random::<f64>();
        let q = Configuration {
            particle: center + Vec2::new(r * th.cos(), r * th.sin()),
            pointer,
            t,
        };
        let jet = field.field_jet(beable, &q);
        let r0 = jet.value.norm();
        if r0 <= 1e-8 * field.peak_scale(t) {
            continue;
        }
        let grad_r = jet
            .grad
            .iter()
            .map(|g| ((jet.value.conj() * g).re / r0).powi(2))
            .sum::<f64>()
            .sqrt();
        if r0 >= NODE_CLEARANCE * grad_r {
            out.push(q);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiSquareResult {
    pub t: f64,
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub pass: bool,
}

/// Marginal density of `|Ψ(t)|²` along the axis `u` through the I2 center
/// (the direction separating the two output beams), as a cumulative table.
fn marginal_cdf(scenario: &Scenario, ctx: &MarkerContext, t: f64) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let layout = &scenario.layout;
    let branches = labeled_branches(scenario, ctx, t)?;
    let labels = labels_of(&branches);
    let d1 = layout.detector(DetectorId::D1).position;
    let d2 = layout.detector(DetectorId::D2).position;
    let u = (d1 - d2).normalized();
    let v = u.perp();
    let origin = layout.geometry.i2_center;
    let w = branches.iter().map(|b| b.packet.width_at(t)).fold(0.0, f64::max);
    let k = branches.iter().map(|b| b.packet.wavevector.norm()).fold(0.0, f64::max);
    let (mut slo, mut shi, mut plo, mut phi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for b in &branches {
        let c = b.packet.center_at(t) - origin;
        slo = slo.min(c.dot(u));
        shi = shi.max(c.dot(u));
        plo = plo.min(c.dot(v));
        phi = phi.max(c.dot(v));
    }
    let (slo, shi) = (slo - 10.0 * w, shi + 10.0 * w);
    let (plo, phi) = (plo - 8.0 * w, phi + 8.0 * w);
    let hs = (w / 64.0).min(std::f64::consts::PI / (16.0 * k.max(1.0)));
    let ns = ((shi - slo) / hs).ceil() as usize;
    let hs = (shi - slo) / ns as f64;
    let np = ((phi - plo) / (w / 16.0)).ceil() as usize;
    let hp = (phi - plo) / np as f64;
    let dens: Vec<f64> = (0..=ns)
        .into_par_iter()
        .map(|i| {
            let s = slo + i as f64 * hs;
            let mut acc = 0.0;
            for j in 0..=np {
                let p = plo + j as f64 * hp;
                let r = origin + u * s + v * p;
                let wgt = if j == 0 || j == np { 0.5 } else { 1.0 };
                let d: f64 = labels.iter().map(|&l| label_field(&branches, l, r, t).norm_sqr()).sum();
                acc += wgt * d;
            }
            acc * hp
        })
        .collect();
    let mut cdf = vec![0.0; ns + 1];
    for i in 1..=ns {
        cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * hs;
    }
    let total = cdf[ns];
    for c in &mut cdf {
        *c /= total;
    }
    let s: Vec<f64> = (0..=ns).map(|i| slo + i as f64 * hs).collect();
    Ok((s, cdf))
}

fn quantile(s: &[f64], cdf: &[f64], p: f64) -> f64 {
    let i = cdf.partition_point(|&c| c < p).clamp(1, cdf.len() - 1);
    let (c0, c1) = (cdf[i - 1], cdf[i]);
    if c1 <= c0 {
        return s[i];
    }
    s[i - 1] + (p - c0) / (c1 - c0) * (s[i] - s[i - 1])
}

/// Chi-square test of ensemble positions against the `|Ψ|²` marginal at
/// each checkpoint, with `bins` equiprobable bins along the axis separating
/// the output beams. One integration serves all checkpoints.
pub fn equivariance_multi(
    scenario: &Scenario,
    times: &[f64],
    n: usize,
    bins: usize,
) -> Result<Vec<ChiSquareResult>, OracleError> {
    if bins < 2 || n < 20 * bins {
        return Err(OracleError::Invalid(format!(
            "{n} samples over {bins} bins leaves fewer than 20 expected per bin"
        )));
    }
    let scenario = scenario.clone().with_ensemble(n, scenario.ensemble.seed);
    let field = scenario.wave_field()?;
    let ctx = &field.marker;
    let t_last = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let initial = scenario.initial_ensemble();
    let seed = scenario.ensemble.seed;
    let recording = Recording::Times(times.to_vec());
    let trajectories: Vec<Result<Vec<Vec2>, OracleError>> = initial
        .par_iter()
        .enumerate()
        .map(|(i, q0)| {
            let tr = field.integrate(*q0, t_last, &mut trajectory_rng(seed, i), &recording)?;
            times
                .iter()
                .map(|&t| {
                    tr.sample_at(t).map(|c| c.particle).ok_or(OracleError::EndedEarly {
                        index: i,
                        t: tr.last().t,
                        t_check: t,
                    })
                })
                .collect()
        })
        .collect();
    let mut positions = Vec::with_capacity(n);
    for p in trajectories {
        positions.push(p?);
    }
    let layout = &scenario.layout;
    let u = (layout.detector(DetectorId::D1).position - layout.detector(DetectorId::D2).position).normalized();
    let origin = layout.geometry.i2_center;
    let dof = bins - 1;
    let critical = ChiSquared::new(dof as f64)
        .expect("positive dof")
        .inverse_cdf(CHI_SQUARE_LEVEL);
    let mut results = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let (s, cdf) = marginal_cdf(&scenario, ctx, t)?;
        let edges: Vec<f64> = (1..bins).map(|b| quantile(&s, &cdf, b as f64 / bins as f64)).collect();
        let mut counts = vec![0usize; bins];
        for p in &positions {
            let x = (p[k] - origin).dot(u);
            counts[edges.partition_point(|&e| e < x)] += 1;
        }
        let expected = n as f64 / bins as f64;
        let statistic: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        results.push(ChiSquareResult {
            t,
            statistic,
            dof,
            critical,
            pass: statistic <= critical,
        });
    }
    Ok(results)
}

pub fn equivariance_test(
    scenario: &Scenario,
    t_check: f64,
    n: usize,
    bins: usize,
) -> Result<ChiSquareResult, OracleError> {
    Ok(equivariance_multi(scenario, &[t_check], n, bins)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{build, Overrides, ScenarioName};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(name: ScenarioName) -> Scenario {
        build(name, &Overrides::default()).unwrap()
    }

    #[test]
    fn closed_is_certain_d1() {
        let s = scenario(ScenarioName::WheelerClosed);
        let p1 = born_estimate(&s, DetectorId::D1, None).unwrap();
        let p2 = born_estimate(&s, DetectorId::D2, None).unwrap();
        assert!((p1.branch_algebra - 1.0).abs() < 1e-12);
        assert!(p2.branch_algebra.abs() < 1e-12);
        assert!(p1.routes_agree() && p2.routes_agree(), "{p1:?} {p2:?}");
    }

    #[test]
    fn essw_full_efficiency_is_even() {
        let s = scenario(ScenarioName::EsswSpin { efficiency_sq: 1.0 });
        for d in DetectorId::ALL {
            let p = born_probability(&s, d).unwrap();
            assert!((p - 0.5).abs() < 1e-12);
        }
        let up = born_joint(&s, DetectorId::D2, MarkerLabel::Up).unwrap();
        assert!(up.abs() < 1e-12);
    }

    #[test]
    fn essw_half_efficiency_from_branch_weights() {
        // Ψ = (ψ₁ + bψ₂)|up⟩ + aψ₂|down⟩ with the open output region
        let s = scenario(ScenarioName::EsswSpin { efficiency_sq: 0.5 });
        let a2 = 0.5;
        let b2 = 1.0 - a2;
        // with BS2 absent each output port carries exactly one arm
        let p2 = born_probability(&s, DetectorId::D2).unwrap();
        assert!((p2 - 0.5 * (a2 + b2)).abs() < 1e-12);
        let down = born_joint(&s, DetectorId::D2, MarkerLabel::Down).unwrap();
        assert!((down - 0.5 * a2).abs() < 1e-12);
    }

    #[test]
    fn pointer_labels_are_orthogonal_after_kick() {
        let s = scenario(ScenarioName::av_pointer_default());
        let p1 = born_estimate(&s, DetectorId::D1, None).unwrap();
        assert!((p1.branch_algebra - 0.5).abs() < 1e-9, "{p1:?}");
        assert!(p1.routes_agree());
    }

    #[test]
    fn source_norm_by_quadrature() {
        let s = scenario(ScenarioName::WheelerOpen);
        let src = &s.layout.source;
        let t = src.birth_time + 3.0 * src.mass * src.sigma0 * src.sigma0;
        let branches = vec![Branch::source(src.clone(), MarkerLabel::Neutral)];
        let n = norm_by_quadrature(&branches, t, 8.0, 16.0);
        assert!((n - 1.0).abs() < 1e-6, "{n}");
    }

    #[test]
    fn fd_on_single_packet() {
        let s = scenario(ScenarioName::WheelerOpen);
        let field = s.wave_field().unwrap();
        let beable = MarkerBeable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = s.layout.source.center_at(0.1);
        let pts = random_nonnode_points(&field, &beable, c, 3.0, 0.1, 20, &mut rng);
        let e = fd_check(&field, &beable, &pts).unwrap();
        assert!(e.gradient < 1e-6 && e.laplacian < 1e-5, "{e:?}");
        assert!(e.velocity < 1e-5 && e.quantum_potential < 1e-5, "{e:?}");
    }

    #[test]
    fn closed_amplitudes_follow_convention() {
        let s = scenario(ScenarioName::WheelerClosed);
        assert!(closed_amplitude_deviation(&s.layout, s.t_end).unwrap() < 1e-12);
        let flipped = build(
            ScenarioName::WheelerClosed,
            &Overrides {
                reflection_factor: Some(Complex64::new(0.0, -1.0)),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert!(closed_amplitude_deviation(&flipped.layout, flipped.t_end).unwrap() > 0.5);
    }

    #[test]
    fn quantile_inverts_linear_cdf() {
        let s: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let c: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        assert!((quantile(&s, &c, 0.35) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn equivariance_rejects_thin_bins() {
        let s = scenario(ScenarioName::WheelerOpen);
        assert!(equivariance_test(&s, 0.0, 100, 20).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn packet_norm_is_preserved(t in 0.0f64..4.0) {
            let s = scenario(ScenarioName::WheelerOpen);
            let branches = [Branch::source(s.layout.source.clone(), MarkerLabel::Neutral)];
            let norm = norm_by_quadrature(&branches, t, 8.0, 16.0);
            proptest::prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
