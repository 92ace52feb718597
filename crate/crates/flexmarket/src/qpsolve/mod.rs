//! Convex quadratic programs with equality, box and disk constraints.
//!
//! One engine serves the DSO projection, the social-welfare problem and the
//! shadow problem whose solution coincides with the market equilibrium.

mod admm;
mod polish;
mod problems;
mod program;

pub use admm::Workspace;
pub use problems::{
    allocation_program, project_onto_psi, solve_shadow, solve_welfare, Optimum, PsiProjector,
};
pub use program::{ConvexProgram, Disk, Kkt, Settings, Solution, Status};

use crate::error::Result;

/// Solves `program` from a cold start.
pub fn solve(program: &ConvexProgram, settings: &Settings) -> Result<Solution> {
    let mut ws = Workspace::new(program.clone(), *settings)?;
    Ok(ws.solve())
}
