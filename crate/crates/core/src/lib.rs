//! Pilot-wave (de Broglie-Bohm) trajectories through a Mach-Zehnder
//! interferometer, with which-way markers and delayed-choice scheduling of
//! the output beam splitter.

pub mod cli;
pub mod marker;
pub mod optics;
pub mod oracle;
pub mod pilotwave;
pub mod scenarios;
pub mod vec2;
pub mod wavepacket;

pub use vec2::Vec2;
