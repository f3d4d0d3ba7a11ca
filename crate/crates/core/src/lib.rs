//! ISA-level simulation core for pointer authentication and kernel
//! control-flow integrity.
//!
//! The crate is split along the natural seams of the problem:
//!
//! * [`qarma`] — the QARMA-64 tweakable block cipher used as keyed MAC;
//! * [`pac`] — PAC computation (cipher, truncation, generic signing);
//! * [`pointer`] — VMSA pointer geometry: classification, PAC field
//!   insertion/stripping, failure poisoning;
//! * [`key`] — key bank, key classes and enable flags;
//! * [`pauth`] — architectural sign/authenticate/strip semantics and the
//!   modifier construction schemes;
//! * [`isa`] / [`mem`] / [`machine`] — a deterministic mini-machine with two
//!   exception levels, permissioned paged memory and cycle accounting;
//! * [`program`] / [`ir`] / [`instrument`] — a toy kernel IR, the lowering
//!   pass that instruments it, accessor generation, boot-time signing and
//!   static image verification;
//! * [`harness`] — attack scenarios, replay/collision/forgery analyses and
//!   the overhead reporter.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod harness;
pub mod instrument;
pub mod ir;
pub mod isa;
pub mod key;
pub mod machine;
pub mod mem;
pub mod pac;
pub mod pauth;
pub mod pointer;
pub mod program;
pub mod qarma;

pub use key::{KeyBank, KeyClass, PacControl, PacKey};
