pub mod bundle;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod losses;
pub mod objective;
pub mod optim;
pub mod parts;
pub mod pipeline;
pub mod prior;
pub mod render;
pub mod skeleton;

pub use error::{LassieError, Result};
