pub mod allocation;
pub mod ao;
pub mod cvx;
pub mod error;
pub mod experiment;
pub mod model;
pub mod placement;
pub mod rates;

pub use ao::{run, run_batch, run_from, AoConfig, AoSolution, AoTrace, Mode};
pub use error::{Error, Result};
pub use model::{Placement, Point3, Scenario, Topology, UavKind, UavParams, XyBox, HAP};
pub use rates::{Allocation, Network, RateReport};
