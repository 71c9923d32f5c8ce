//! Temporal and stylistic analysis of dated document corpora: chunking,
//! embedding, neighbour search, 2-D/3-D projection, clustering, changepoint
//! detection, author attribution and date regression.

pub mod attribution;
pub mod corpus;
pub mod dateline;
pub mod embed;
pub mod error;
pub mod knn;
pub mod pipeline;
pub mod reduce;
pub mod report;
pub mod seed;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
