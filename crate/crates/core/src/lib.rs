//! Simulation toolkit for non-Markovian fully coupled forward–backward
//! SDEs and the functional (pathwise) calculus of their value maps.
//!
//! The pipeline: simulate the forward component under Euler–Maruyama,
//! recover the backward pair (Y, Z) by least-squares Monte Carlo
//! regression, and close the coupling with an outer Picard iteration.
//! On top of the solver sit finite-difference functional derivatives in
//! the Dupire sense and consistency checks for the representation
//! formulas tying Z to the derivatives of the value map.

pub mod error;
pub mod fbsde_problem;
pub mod feynman_kac;
pub mod functional_calculus;
pub mod path_space;
pub mod regression;
pub mod rng;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use fbsde_problem::{
    check_assumptions, oracle_coupled_ou, oracle_path_integral, oracle_riccati, pairing, registry,
    AssumptionReport, ClosedFormSolution, CoefficientSet, OracleProblem, RiccatiParams, Verdict,
};
pub use feynman_kac::{
    regularity_probe, FlowReport, FunctionalEstimator, ProbeTable, ResidualReport, ZRepReport,
};
pub use functional_calculus::{
    ito_decay_study, ito_residual, FDConfig, FnFunctional, ItoDecayReport, PathFunctional, Scheme,
};
pub use path_space::{node_index, GridPath, PathPair, PathView};
pub use regression::{Feature, PolynomialBasis, Predictor, RegressionBasisSpec};
pub use solver::{
    picard_solve, picard_solve_warm, EnsembleSolution, NodePredictors, PicardSolver, SolverConfig,
};
