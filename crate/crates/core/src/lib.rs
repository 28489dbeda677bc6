//! Role-based multi-LLM collaboration for developing robot following policies.
//!
//! An analyst decomposes the operator's requirements into subtasks, a
//! programmer writes a policy in a small rule language, and a tester runs it
//! through a kinematic simulator, tunes its parameters and escalates back to
//! the analyst when tuning is not enough. The human operator reviews the
//! result and steers the loop with structured feedback.

pub mod backend;
pub mod orchestrator;
pub mod policy;
pub mod roles;
pub mod simulator;
pub mod tester;
