//! Egocentric-vision navigation for a simplified avatar.
//!
//! A discrete-action Q policy looks at a rendered depth/semantic/goal-mask
//! view and picks a head target; a motion prior turns the target into a
//! short motion chunk inside a static box scene.

pub mod actions;
pub mod body;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod error;
pub mod gait;
pub mod gridworld;
pub mod math;
pub mod nn;
pub mod prior;
pub mod qlearn;
pub mod scene;
pub mod sensor;

pub use error::{Error, Result};
