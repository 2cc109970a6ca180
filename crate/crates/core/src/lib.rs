//! Self-supervised tempo estimation.
//!
//! The pipeline turns audio into a spectral-flux novelty curve, then into a
//! Fourier, autocorrelation or hybrid tempogram on a logarithmic tempo axis.
//! A twin-branch convolutional encoder/decoder with shared weights is trained
//! to predict the vertical shift between two slices of the same tempogram
//! frame; a linear fit on synthetic click tracks then maps its scalar output
//! to BPM.
//!
//! ```text
//! synth ─► novelty ─► tempogram ─► pretext (nn) ─► calibrate
//!                                   └──────── harness ────────┘
//! ```

pub mod calibrate;
pub mod error;
pub mod harness;
pub mod io;
pub mod nn;
pub mod novelty;
pub mod plot;
pub mod pretext;
pub mod synth;
pub mod tempogram;

pub use error::{Error, Result};
