#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod init;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod penalty;
pub mod density;
pub mod optim;
pub mod likelihood;
pub mod clustering;
pub mod pipeline;
pub mod selection;
pub mod sim;
pub mod io;
pub mod cli;
