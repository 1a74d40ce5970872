#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod design;
pub mod fxp;
pub mod linalg;
pub mod preset;
pub mod simloop;
pub mod solver;
pub mod ssmodel;
pub mod verify;
