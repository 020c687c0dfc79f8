//! Online multichannel speech dereverberation by STFT-magnitude inverse
//! filtering.
//!
//! Each frequency bin runs its own recursive cross-relation identification of
//! critically sampled convolutive transfer functions (CTFs), and an adaptive
//! magnitude-domain MINT inverse filter built from the CTF magnitudes. The
//! filtered microphone magnitudes are floored, given the phase of a reference
//! microphone and resynthesized by overlap-add.
//!
//! ```no_run
//! use smif::pipeline::{process_stream, EngineConfig};
//!
//! # fn main() -> smif::Result<()> {
//! let mics: Vec<Vec<f64>> = vec![vec![0.0; 16_000]; 2];
//! let (dereverberated, report) = process_stream(&EngineConfig::default(), &mics)?;
//! assert_eq!(dereverberated.len(), 16_000);
//! println!("{}", report.to_json()?);
//! # Ok(())
//! # }
//! ```

pub mod awpe;
pub mod cli;
pub mod ctf_ident;
pub mod error;
pub mod history;
pub mod kv;
pub mod mag_mint;
pub mod metrics;
pub mod pipeline;
pub mod postproc;
pub mod simulator;
pub mod stft;
pub mod wav;

pub use error::{Error, Result};
