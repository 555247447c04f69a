//! Table-tennis robot laboratory: deterministic game-space simulation,
//! analytic paddle control over a 6-DOF assembly, dynamics models trained
//! from demonstration logs, model-based striking policies, and self-play
//! strategy learning.
//!
//! The coordinate system places the table center at `(0, 0, 0.76)` m with
//! `x` increasing from the learner toward the opponent, `y` to the left of
//! the net, and `z` up.  The learner's robot base sits at `(-1.8, 0, 0.76)`.

pub mod config;
pub mod demogen;
pub mod kinematics;
pub mod learnsub;
pub mod logfmt;
pub mod models;
pub mod physics;
pub mod policies;
pub mod strategy;
pub mod trajopt;
