//! Simulation toolkit for an endcap Paul trap with an integrated fibre
//! Fabry-Perot cavity.
//!
//! The trap positions its ion by superposing additional rf voltages,
//! synchronous with the main drive, on dedicated electrodes; the cavity mode
//! is then mapped by sweeping the pseudopotential minimum through the
//! standing wave. This crate models that machinery end to end: unit-voltage
//! electrostatics ([`fieldsolver`]), the analytic multipole trap model and
//! its calibration ([`trapmodel`]), full time-dependent ion motion
//! ([`dynamics`]), photon-level detection channels ([`optics`]), shared
//! least-squares fitting ([`fitkit`]), the cavity length lock ([`servo`]) and
//! the virtual experiments that tie them together ([`experiments`]).

pub mod constants;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fieldsolver;
pub mod fitkit;
pub mod optics;
pub mod servo;
pub mod trapmodel;

pub use error::{Error, Result};
