//! A formal model of a speculative out-of-order processor that tracks the
//! secrecy of every value it handles, together with the tooling to test its
//! security guarantee differentially.
//!
//! The crate is organized bottom-up:
//!
//! * [`isa`] — μASM: labeled values, expressions, instructions, the
//!   memory secrecy partition and the text syntax.
//! * [`arch`] — the sequential semantics, its patched variant, and the
//!   constant-time checkers that form the software side of the contract.
//! * [`microctx`] — the attacker: a log of everything observable plus
//!   strategies for scheduling and prediction.
//! * [`hardware`] — the speculative semantics with a reorder buffer, secrecy
//!   tracking, and run-time invariant monitors.
//! * [`security`] — the differential harness: low-equivalent pairs, the
//!   two security checks, the classical declassification check and a leak
//!   search.
//! * [`corpus`] — a catalog of transient-execution and declassification
//!   gadgets.
//! * [`config`] — JSON file formats.
//!
//! # Quick start
//!
//! ```
//! use prospect::corpus::get_gadget;
//! use prospect::hardware::Mode;
//! use prospect::security::{leak_search_report, theorem1_check, ExperimentSpec, Verdict};
//!
//! let pht = get_gadget("spectre-pht").unwrap();
//!
//! // The insecure baseline leaks the secret through the probe array...
//! let mut spec = ExperimentSpec::for_gadget(&pht, Mode::InsecureBaseline);
//! assert_eq!(leak_search_report(&spec, 16).verdict, Verdict::Fail);
//!
//! // ...while the secrecy-tracking machine does not.
//! spec.params.mode = Mode::Prospect;
//! spec.seeds = 5;
//! assert_eq!(theorem1_check(&spec).verdict, Verdict::Pass);
//! ```

#![warn(missing_docs)]

pub mod arch;
pub mod config;
pub mod corpus;
pub mod hardware;
pub mod isa;
pub mod microctx;
pub mod security;

pub use arch::{arch_run, arch_run_patched, arch_step, ArchConfig, Memory};
pub use corpus::{get_gadget, Gadget};
pub use hardware::{hw_run, hw_run_patched, hw_step, HardwareConfig, Machine, Mode};
pub use isa::{parse_program, LabeledValue, Program, SecLevel, SecretPartition, Value};
pub use microctx::{MicroContext, StrategySpec};
pub use security::{theorem1_check, theorem2_check, ExperimentSpec, Report, Verdict};

/// The guide's chapters, compiled as doc-tests so their snippets stay in
/// sync with the code.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/isa.md")]
    pub mod isa {}
    #[doc = include_str!("../../../book/src/sequential.md")]
    pub mod sequential {}
    #[doc = include_str!("../../../book/src/speculative.md")]
    pub mod speculative {}
    #[doc = include_str!("../../../book/src/attacker.md")]
    pub mod attacker {}
    #[doc = include_str!("../../../book/src/security.md")]
    pub mod security {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub mod corpus {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
