//! Data preparation, metrics, verification and plotting around the NVAE
//! models, plus the `nvib` command line.

pub mod config;
pub mod corpus;
pub mod error;
pub mod fig3;
pub mod metrics;
pub mod plot;
pub mod run;
pub mod synthetic;
pub mod verify;
