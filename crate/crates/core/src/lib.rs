pub mod analysis;
pub mod cli;
pub mod dissipativity;
pub mod error;
pub mod io;
pub mod nlp;
pub mod ocp;
pub mod par;
pub mod problems;
pub mod sop;
pub mod transcription;

pub use error::{Error, Result};
