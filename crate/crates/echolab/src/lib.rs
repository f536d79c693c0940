//! Equivalent-circuit simulation of an ultrasonic backscatter channel.
//!
//! The crate models an interrogator transducer, an air gap and a passive
//! sensor node (USN) as a linear circuit built from Leach thickness-mode
//! transducer models joined by a lossy acoustic line. A shunt capacitance on
//! the sensor node moves its parallel resonance; the [`dsp`] module measures
//! that shift from the interrogator side with four techniques (ringdown,
//! chirp spectroscopy, swept lock-in and a phase-locked loop), and
//! [`experiments`] runs the load sweep that compares them.

pub mod circuit;
pub mod dsp;
pub mod experiments;
pub mod linalg;
pub mod netlist;
pub mod piezo;
pub mod transient;
pub mod units;

pub use circuit::{Circuit, Element, ElementKind, Waveform};

pub use piezo::{AirChannelParams, LoadConfig, TransducerParams};

pub use experiments::{ChannelConfig, ResonanceEstimate, ShiftTable};
pub use transient::{Trace, TransientConfig};
