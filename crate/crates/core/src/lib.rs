pub mod cli;
pub mod linalg;
mod lp;
pub mod lti;
pub mod ocp;
pub mod polytope;
pub mod qp;
pub mod scalar;
pub mod scenario;
pub mod simulator;
pub mod supervisor;
pub mod terminal;

pub use scalar::Real;

// Concrete aliases. The simulator and CLI run in f64; f32 variants exist
// for the set and solver layers.
pub type Polytope = polytope::Polytope<f64>;
pub type Polytope32 = polytope::Polytope<f32>;
pub type QpProblem = qp::QpProblem<f64>;
pub type QpProblem32 = qp::QpProblem<f32>;
pub type QpSolution = qp::QpSolution<f64>;
pub type QpSolution32 = qp::QpSolution<f32>;
pub type QpSolver = qp::QpSolver<f64>;
pub type QpSolver32 = qp::QpSolver<f32>;
pub type ContinuousLti = lti::ContinuousLti<f64>;
pub type DiscreteModel = lti::DiscreteModel<f64>;
pub type DiscreteModel32 = lti::DiscreteModel<f32>;
pub type TerminalKit = terminal::TerminalKit<f64>;
pub type TerminalKit32 = terminal::TerminalKit<f32>;
pub type MpcConfig = ocp::MpcConfig<f64>;
pub type OcpSolution = ocp::OcpSolution<f64>;
