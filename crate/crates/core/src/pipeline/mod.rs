mod data;
mod report;
mod run;
mod train;

pub use data::*;
pub use report::*;
pub use run::*;
pub use train::*;
