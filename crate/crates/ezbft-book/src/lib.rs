//! Doc-test companion for the guide under `book/`.
//!
//! mdbook renders the chapters but cannot run their code blocks against
//! this workspace's crates, so each chapter is also included here as module
//! documentation: `cargo test -p ezbft-book --doc` compiles and executes
//! every snippet, keeping the book and the library in lockstep.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/commands.md")]
pub mod commands {}

#[doc = include_str!("../../../book/src/ordering.md")]
pub mod ordering {}

#[doc = include_str!("../../../book/src/fast-path.md")]
pub mod fast_path {}

#[doc = include_str!("../../../book/src/slow-path.md")]
pub mod slow_path {}

#[doc = include_str!("../../../book/src/execution.md")]
pub mod execution {}

#[doc = include_str!("../../../book/src/recovery.md")]
pub mod recovery {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
