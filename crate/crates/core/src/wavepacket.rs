//! Freely propagating Gaussian wave packets with closed-form derivatives.
//!
//! Units throughout the crate: ħ = 1, lengths in units of the source width.
//! A packet born at `t0` with width `σ0` has complex width
//! `α(t) = σ0² + i (t − t0) / m`, and its density `|ψ|²` is an isotropic
//! Gaussian with width `|α| / σ0`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vec2::Vec2;

/// Moduli below this are treated as exactly zero.
pub const AMPLITUDE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PacketError {
    #[error("packet evaluated at t = {t} before its birth time {birth}")]
    BeforeBirth { t: f64, birth: f64 },
    #[error("invalid packet parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Value, gradient and Laplacian of a 2D wave function at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PacketJet {
    pub value: Complex64,
    pub grad: [Complex64; 2],
    pub lap: Complex64,
}

impl PacketJet {
    pub fn scaled(&self, c: Complex64) -> PacketJet {
        PacketJet {
            value: self.value * c,
            grad: [self.grad[0] * c, self.grad[1] * c],
            lap: self.lap * c,
        }
    }

    pub fn accumulate(&mut self, other: &PacketJet) {
        self.value += other.value;
        self.grad[0] += other.grad[0];
        self.grad[1] += other.grad[1];
        self.lap += other.lap;
    }
}

/// Isotropic 2D Gaussian packet riding its own carrier wave.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPacket {
    /// Center at `birth_time`.
    pub center: Vec2,
    pub group_velocity: Vec2,
    pub sigma0: f64,
    pub wavevector: Vec2,
    pub phase0: f64,
    pub birth_time: f64,
    pub mass: f64,
}

impl GaussianPacket {
    pub fn new(
        center: Vec2,
        wavevector: Vec2,
        sigma0: f64,
        mass: f64,
        birth_time: f64,
    ) -> Result<Self, PacketError> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(PacketError::InvalidParameter("sigma0 must be positive"));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(PacketError::InvalidParameter("mass must be positive"));
        }
        if !center.is_finite() || !wavevector.is_finite() || !birth_time.is_finite() {
            return Err(PacketError::InvalidParameter("non-finite packet data"));
        }
        Ok(Self {
            center,
            group_velocity: wavevector * (1.0 / mass),
            sigma0,
            wavevector,
            phase0: 0.0,
            birth_time,
            mass,
        })
    }

    pub fn with_phase(mut self, phase0: f64) -> Self {
        self.phase0 = phase0;
        self
    }

    #[inline]
    fn complex_width(&self, tau: f64) -> Complex64 {
        Complex64::new(self.sigma0 * self.sigma0, tau / self.mass)
    }

    pub fn center_at(&self, t: f64) -> Vec2 {
        self.center + self.group_velocity * (t - self.birth_time)
    }

    /// Width of the density `|ψ|² ∝ exp(−|r − c|² / w²)` at time `t`.
    pub fn width_at(&self, t: f64) -> f64 {
        self.complex_width(t - self.birth_time).norm() / self.sigma0
    }

    /// Modulus at the packet center.
    pub fn peak_modulus(&self, t: f64) -> f64 {
        self.sigma0 / (PI.sqrt() * self.complex_width(t - self.birth_time).norm())
    }

    fn check_time(&self, t: f64) -> Result<(), PacketError> {
        if t < self.birth_time {
            Err(PacketError::BeforeBirth {
                t,
                birth: self.birth_time,
            })
        } else {
            Ok(())
        }
    }

    pub fn evaluate(&self, r: Vec2, t: f64) -> Result<Complex64, PacketError> {
        self.check_time(t)?;
        Ok(self.jet_unchecked(r, t).value)
    }

    pub fn gradient(&self, r: Vec2, t: f64) -> Result<[Complex64; 2], PacketError> {
        self.check_time(t)?;
        Ok(self.jet_unchecked(r, t).grad)
    }

    pub fn laplacian(&self, r: Vec2, t: f64) -> Result<Complex64, PacketError> {
        self.check_time(t)?;
        Ok(self.jet_unchecked(r, t).lap)
    }

    pub fn jet(&self, r: Vec2, t: f64) -> Result<PacketJet, PacketError> {
        self.check_time(t)?;
        Ok(self.jet_unchecked(r, t))
    }

    /// Value and derivatives without the birth-time check.
    pub(crate) fn jet_unchecked(&self, r: Vec2, t: f64) -> PacketJet {
        let tau = t - self.birth_time;
        let s2 = self.sigma0 * self.sigma0;
        let a_im = tau / self.mass;
        let den = s2 * s2 + a_im * a_im;
        let inv_alpha = Complex64::new(s2 / den, -a_im / den);
        let dx = r.x - self.center.x - self.group_velocity.x * tau;
        let dy = r.y - self.center.y - self.group_velocity.y * tau;
        let d2 = dx * dx + dy * dy;
        // Re(−d²/(2α)) decides whether anything survives the floor.
        let decay = -0.5 * d2 * inv_alpha.re;
        if decay < -745.0 {
            return PacketJet::default();
        }
        let scale = self.sigma0 / (PI * den).sqrt() * decay.exp();
        if scale < AMPLITUDE_FLOOR {
            return PacketJet::default();
        }
        let k = self.wavevector;
        let phase = k.x * (r.x - self.center.x) + k.y * (r.y - self.center.y)
            - k.norm_sq() * tau / (2.0 * self.mass)
            + self.phase0
            - 0.5 * d2 * inv_alpha.im;
        let (sin, cos) = phase.sin_cos();
        // σ0/(√π α) = |σ0/(√π α)| · (α*/|α|)
        let unit = Complex64::new(s2, -a_im) / den.sqrt();
        let value = unit * Complex64::new(scale * cos, scale * sin);
        let gx = Complex64::new(-inv_alpha.re * dx, k.x - inv_alpha.im * dx);
        let gy = Complex64::new(-inv_alpha.re * dy, k.y - inv_alpha.im * dy);
        PacketJet {
            value,
            grad: [value * gx, value * gy],
            lap: value * (gx * gx + gy * gy - inv_alpha * 2.0),
        }
    }

    /// The packet `r ↦ ψ(M r, t)` where `M` mirrors across the line through
    /// `point` with unit normal `normal`. Free evolution commutes with `M`,
    /// so the image is again a free packet with the same birth time.
    pub fn reflected(&self, point: Vec2, normal: Vec2) -> GaussianPacket {
        GaussianPacket {
            center: self.center.reflect_about(point, normal),
            group_velocity: self.group_velocity.reflect(normal),
            sigma0: self.sigma0,
            wavevector: self.wavevector.reflect(normal),
            phase0: self.phase0,
            birth_time: self.birth_time,
            mass: self.mass,
        }
    }

    /// True when both packets describe the same function (to `tol` in every parameter).
    pub fn same_as(&self, other: &GaussianPacket, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
        close(self.center.x, other.center.x)
            && close(self.center.y, other.center.y)
            && close(self.wavevector.x, other.wavevector.x)
            && close(self.wavevector.y, other.wavevector.y)
            && close(self.sigma0, other.sigma0)
            && close(self.phase0, other.phase0)
            && close(self.birth_time, other.birth_time)
            && close(self.mass, other.mass)
    }
}

/// Value and first two derivatives of a 1D wave function.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet1d {
    pub value: Complex64,
    pub d1: Complex64,
    pub d2: Complex64,
}

/// 1D free Gaussian packet, used for the marker pointer coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPacket1d {
    pub center: f64,
    pub velocity: f64,
    pub sigma0: f64,
    pub wavenumber: f64,
    pub phase0: f64,
    pub birth_time: f64,
    pub mass: f64,
}

impl GaussianPacket1d {
    pub fn new(
        center: f64,
        wavenumber: f64,
        sigma0: f64,
        mass: f64,
        birth_time: f64,
    ) -> Result<Self, PacketError> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(PacketError::InvalidParameter("sigma0 must be positive"));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(PacketError::InvalidParameter("mass must be positive"));
        }
        Ok(Self {
            center,
            velocity: wavenumber / mass,
            sigma0,
            wavenumber,
            phase0: 0.0,
            birth_time,
            mass,
        })
    }

    /// This packet after an instantaneous momentum kick `q` at time `t_kick`:
    /// `ψ(y, t_kick) e^{i q y}` continued freely. The result is exactly a
    /// Galilean boost, written as a free packet with the original birth time.
    pub fn kicked(&self, q: f64, t_kick: f64) -> GaussianPacket1d {
        let tau = t_kick - self.birth_time;
        let k_new = self.wavenumber + q;
        let v_new = k_new / self.mass;
        // Choose the birth center so the envelope center at t_kick is unchanged.
        let c_kick = self.center + self.velocity * tau;
        let center = c_kick - v_new * tau;
        // Match the phase at t_kick: old phase + q y must equal the new phase.
        let old_phase = |y: f64| {
            self.wavenumber * (y - self.center) - self.wavenumber.powi(2) * tau / (2.0 * self.mass)
                + self.phase0
        };
        let new_phase_no_offset =
            |y: f64| k_new * (y - center) - k_new * k_new * tau / (2.0 * self.mass);
        let phase0 = old_phase(0.0) - new_phase_no_offset(0.0);
        GaussianPacket1d {
            center,
            velocity: v_new,
            sigma0: self.sigma0,
            wavenumber: k_new,
            phase0,
            birth_time: self.birth_time,
            mass: self.mass,
        }
    }

    pub fn center_at(&self, t: f64) -> f64 {
        self.center + self.velocity * (t - self.birth_time)
    }

    pub fn width_at(&self, t: f64) -> f64 {
        Complex64::new(self.sigma0 * self.sigma0, (t - self.birth_time) / self.mass).norm() / self.sigma0
    }

    pub fn peak_modulus(&self, t: f64) -> f64 {
        (PI.sqrt() * self.width_at(t)).powf(-0.5)
    }

    pub fn evaluate(&self, y: f64, t: f64) -> Result<Complex64, PacketError> {
        if t < self.birth_time {
            return Err(PacketError::BeforeBirth {
                t,
                birth: self.birth_time,
            });
        }
        Ok(self.jet_unchecked(y, t).value)
    }

    pub(crate) fn jet_unchecked(&self, y: f64, t: f64) -> Jet1d {
        let tau = t - self.birth_time;
        let alpha = Complex64::new(self.sigma0 * self.sigma0, tau / self.mass);
        let inv_alpha = alpha.inv();
        let d = y - self.center - self.velocity * tau;
        let decay = -0.5 * d * d * inv_alpha.re;
        if decay < -745.0 {
            return Jet1d::default();
        }
        let norm = (PI * self.sigma0 * self.sigma0).powf(-0.25);
        let pref = (inv_alpha * (self.sigma0 * self.sigma0)).sqrt() * norm;
        if pref.norm() * decay.exp() < AMPLITUDE_FLOOR {
            return Jet1d::default();
        }
        let k = self.wavenumber;
        let phase = k * (y - self.center) - k * k * tau / (2.0 * self.mass) + self.phase0;
        let value = pref * Complex64::new(decay, -0.5 * d * d * inv_alpha.im + phase).exp();
        let g = -inv_alpha * d + Complex64::new(0.0, k);
        Jet1d {
            value,
            d1: value * g,
            d2: value * (g * g - inv_alpha),
        }
    }
}
