pub mod bandwidth;
pub mod data;
pub mod dgp;
pub mod effects;
pub mod error;
pub mod io;
pub mod kernels;
pub mod localpoly;
pub mod nuisance;
pub mod pseudo;
pub mod quad;
pub mod sim;
pub mod smooth;

pub use data::{Dataset, FoldId, Target};
pub use error::{Error, Result};
pub use kernels::{Kernel, KernelFamily, Support};
pub use localpoly::LocalFit;
pub use pseudo::{CurveEstimate, Method, Quantity};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
