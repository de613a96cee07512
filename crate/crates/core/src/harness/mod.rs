//! Synthetic evaluation harness: scenes, referring queries, the toy
//! selection task and corpus benchmarks.

pub mod query;
pub mod scene;

pub use query::*;
pub use scene::*;
pub mod train;
pub use train::*;
pub mod checks;
pub use checks::*;
pub mod bench;
pub use bench::*;
