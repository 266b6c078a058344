pub mod basis;
pub mod error;
pub mod linalg;
pub mod pls;
pub mod sample;
pub mod fpca;
pub mod data_io;
pub mod fosr;
pub mod twostep;
pub mod fofr;
pub mod inference;
pub mod sim;
pub mod cli;

pub use error::{FdaError, Result};
