//! Joint training of speech-driven 3D facial animation and its inverse,
//! lip reading, with shared encoders, a duality regularizer and a
//! kernel-weighted cross-modal consistency loss.

pub mod diffcore;
pub mod data;
pub mod model;
pub mod losses;
pub mod metrics;
pub mod train;
pub mod verify;
pub mod cli;
