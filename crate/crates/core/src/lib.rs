//! Federated recommendation with personalized data sharing.
//!
//! Clients train a one-layer LGC model with BPR on the interactions they keep
//! local; the server averages their item tables, then refines them on the
//! graph built from shared interactions with BPR plus a local/global
//! contrastive term. Withdrawn shared data is unlearned with a contrastive
//! objective against views inferred from historical item-table snapshots.

pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod fedlearn;
pub mod graph;
pub mod losses;
pub mod seed;
pub mod unlearn;

pub use error::{Error, Result};
