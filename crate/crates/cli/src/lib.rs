//! File formats and reporting for the simulator toolkit. The binary in
//! `main.rs` wires these to the command line.

pub mod fmt_img;
pub mod fmt_ir;
pub mod fmt_scn;
pub mod out;
