//! Safe reinforcement learning with adaptive multi-step control barrier
//! functions.
//!
//! A DDPG actor proposes controls, a min-norm CBF quadratic program rectifies
//! them, and a learned monotone class-K network sets how aggressively the
//! barrier constraint may be approached. Gradients of the critic's value flow
//! back through the QP by implicit differentiation of its KKT conditions, so
//! the actor and the class-K network are trained jointly.
//!
//! Module map:
//! - [`numkit`]: matrices, LU solves, the gradient tape, MLPs and Adam.
//! - [`dynamics`]: first- and second-order Dubins car models.
//! - [`safety`]: circular-obstacle barriers, the class-K network and CBF rows.
//! - [`qpdiff`]: dense QP solver and its KKT backward pass.
//! - [`envs`]: benchmark scenarios, rewards, rollouts and exports.
//! - [`rl`]: DDPG with gradients through the safety filter.

pub mod dynamics;
pub mod envs;
pub mod numkit;
pub mod qpdiff;
pub mod rl;
pub mod safety;
