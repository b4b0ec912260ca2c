pub mod baseline_ekf;
pub mod error;
pub mod factors;
pub mod harness;
pub mod manifold;
pub mod optimizer;
pub mod preintegration;
pub mod simulator;
pub mod tdoa;
