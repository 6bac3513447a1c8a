//! Personal data plane: identity vault, consent and restriction centers,
//! request workflow, service bus, simulated business services and audit log.

pub mod audit;
pub mod bls;
pub mod bus;
pub mod consent;
pub mod demo;
pub mod error;
pub mod export;
pub mod hygiene;
pub mod ids;
pub mod journal;
pub mod minimization;
pub mod plane;
pub mod request;
pub mod restriction;
pub mod sim;
pub mod staging;
pub mod types;
pub mod vault;

pub use error::{Error, Result};
pub use types::*;
