//! Compiles the book's code samples as doctests so the chapters stay in step
//! with the library.

#[doc = include_str!("../../../book/src/ch1_lattice.md")]
pub mod chapter1 {}
#[doc = include_str!("../../../book/src/ch2_epidemics.md")]
pub mod chapter2 {}
#[doc = include_str!("../../../book/src/ch3_branching.md")]
pub mod chapter3 {}
#[doc = include_str!("../../../book/src/ch4_kernels.md")]
pub mod chapter4 {}
#[doc = include_str!("../../../book/src/ch5_threshold.md")]
pub mod chapter5 {}
#[doc = include_str!("../../../book/src/ch6_blocks.md")]
pub mod chapter6 {}
#[doc = include_str!("../../../book/src/ch7_cli.md")]
pub mod chapter7 {}
