//! Mid- and low-level skills: analytic paddle control with its forward
//! model, positioning, the model-based land-ball policy (open-loop, CEM,
//! and closed-loop variants), and the hit-ball policy.

use nalgebra::{DVector, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::config::CemConfig;
use crate::demogen::capability_invert;
use crate::kinematics::{
    forward_kinematics, inverse_kinematics, jacobian, joint_velocities_for_twist_damped,
    orientation_from_normal, IkParams, IkTarget, KinError, RobotModel,
};
use crate::logfmt::PaddleRecord;
use crate::models::{
    inverse_launch, BallEstimator, BallFlightModel, LandingModels, StrikeSample,
};
use crate::physics::{
    paddle_contact, paddle_pose_from_normal, BallState, CollisionEvent, PaddleState, PhysicsParams,
    Side, TableGeometry, World, ENV_DT, STEPS_PER_TICK,
};
use crate::strategy::cem_optimize;
use crate::trajopt::{plan_min_time, plan_time_fixed, JointTrajectory, TrajError};

/// Strike candidates are taken from the 20 cm band in front of the robot.
pub const STRIKE_BAND_X: (f64, f64) = (-1.8, -1.6);

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("no reachable strike candidate")]
    NoReachableCandidate,
    #[error(transparent)]
    Kin(#[from] KinError),
    #[error(transparent)]
    Traj(#[from] TrajError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hand {
    Forehand,
    Backhand,
}

/// Robot description shared by all skills.
#[derive(Clone, Copy)]
pub struct RobotContext<'a> {
    pub model: &'a RobotModel,
    pub ik: &'a IkParams,
}

/// Sampled joint state at a point in time.
#[derive(Debug, Clone)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub time: f64,
}

/// A paddle state to realize at an absolute time.
#[derive(Debug, Clone)]
pub struct PaddleCommand {
    pub t: f64,
    pub target: PaddleRecord,
}

/// A landing request: position on the landing plane plus impact speed.
#[derive(Debug, Clone)]
pub struct LandingTarget {
    pub position: Vector3<f64>,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct PositioningCommand {
    pub position: Vector3<f64>,
    pub forehand: bool,
}

/// A fully resolved strike: the command, the forward-model prediction of
/// the executed paddle, the predicted landing, and the plan to execute.
#[derive(Debug, Clone)]
pub struct StrikeDecision {
    pub command: PaddleCommand,
    pub predicted_paddle: PaddleRecord,
    pub predicted_landing: Option<(Vector3<f64>, f64)>,
    pub hand: Hand,
    pub candidate: usize,
    pub candidate_ball: BallState,
    pub trajectory: JointTrajectory,
}

/// Paddle state (position, normal, velocities) realized at a joint state.
pub fn paddle_record_at(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<PaddleRecord, KinError> {
    let pose = forward_kinematics(model, q)?;
    let jac = jacobian(model, q)?;
    let twist = &jac * qdot;
    Ok(PaddleRecord {
        position: pose.position,
        normal: pose.normal(),
        linear_velocity: Vector3::new(twist[0], twist[1], twist[2]),
        angular_velocity: Vector3::new(twist[3], twist[4], twist[5]),
    })
}

/// Analytic paddle control: resolve the commanded paddle state into a
/// joint-space boundary and plan a time-fixed trajectory to it.  Returns
/// the plan (when one exists) plus the forward-model prediction of the
/// paddle state actually reached at the command time.
pub fn paddle_control(
    ctx: &RobotContext,
    cmd: &PaddleCommand,
    js: &JointState,
) -> Result<(Option<JointTrajectory>, PaddleRecord), PolicyError> {
    paddle_control_seeded(ctx, cmd, js, None)
}

/// As [`paddle_control`], with an optional joint-space seed that warm
/// starts the pose IK (used by iterative refinement).
pub fn paddle_control_seeded(
    ctx: &RobotContext,
    cmd: &PaddleCommand,
    js: &JointState,
    seed: Option<&DVector<f64>>,
) -> Result<(Option<JointTrajectory>, PaddleRecord), PolicyError> {
    if cmd.t <= js.time {
        return Err(PolicyError::InvalidTarget(format!(
            "command time {} not after {}",
            cmd.t, js.time
        )));
    }
    let model = ctx.model;
    let zero = DVector::zeros(model.dof());
    // Resolve the position + normal into a full pose, then the pose into
    // joints.
    let pose = match orientation_from_normal(model, &cmd.target.position, &cmd.target.normal, ctx.ik)
    {
        Ok(p) => p,
        Err(KinError::NotConverged { best, .. }) => {
            return Ok((None, paddle_record_at(model, &best, &zero)?));
        }
        Err(e) => return Err(e.into()),
    };
    let ik_seed = seed
        .cloned()
        .unwrap_or_else(|| model.rest_pose(cmd.target.normal.x >= 0.0).clone());
    let q_t = match inverse_kinematics(model, &IkTarget::Pose(pose), &ik_seed, ctx.ik) {
        Ok(q) => q,
        Err(KinError::NotConverged { best, .. }) => {
            return Ok((None, paddle_record_at(model, &best, &zero)?));
        }
        Err(e) => return Err(e.into()),
    };
    let jac = jacobian(model, &q_t)?;
    let twist = DVector::from_row_slice(&[
        cmd.target.linear_velocity.x,
        cmd.target.linear_velocity.y,
        cmd.target.linear_velocity.z,
        cmd.target.angular_velocity.x,
        cmd.target.angular_velocity.y,
        cmd.target.angular_velocity.z,
    ]);
    let mut qdot_t = joint_velocities_for_twist_damped(&jac, &twist, 0.25, 0.02);
    // Near singular configurations the exact twist may demand joint rates
    // past the velocity limits.  Scale the whole boundary velocity into
    // limits; the prediction below reports the reduced paddle state, so
    // callers judge candidates by what the arm actually delivers.
    let mut scale = 1.0_f64;
    for (i, lim) in model.limits.joints.iter().enumerate() {
        if qdot_t[i].abs() > lim.v_max {
            scale = scale.min(lim.v_max / qdot_t[i].abs());
        }
    }
    if scale < 1.0 {
        qdot_t *= 0.98 * scale;
    }
    let mut traj = match plan_time_fixed(
        cmd.t - js.time,
        &js.q,
        &js.qdot,
        &q_t,
        &qdot_t,
        &model.limits,
    ) {
        Ok(t) => t,
        Err(TrajError::InfeasibleBoundary { .. }) => {
            return Ok((None, paddle_record_at(model, &q_t, &qdot_t)?));
        }
        Err(e) => return Err(e.into()),
    };
    traj.start_time = js.time;
    let (qf, vf) = traj.achieved_final.clone();
    let predicted = paddle_record_at(model, &qf, &vf)?;
    Ok((Some(traj), predicted))
}

/// Positioning: minimum-time move to a waiting paddle position with zero
/// joint velocities, seeded by the canonical pose of the requested hand.
/// An unconverged IK still yields a closest-pose trajectory.
pub fn positioning(
    ctx: &RobotContext,
    cmd: &PositioningCommand,
    js: &JointState,
) -> Result<JointTrajectory, PolicyError> {
    let model = ctx.model;
    // Already there and at rest: nothing to plan.
    if js.qdot.amax() <= 1e-9 {
        if let Ok(pose) = forward_kinematics(model, &js.q) {
            let fh = pose.normal().x >= 0.0;
            if (pose.position - cmd.position).norm() <= 1e-6 && fh == cmd.forehand {
                return Ok(JointTrajectory::hold(js.time, js.q.clone(), js.qdot.clone()));
            }
        }
    }
    let seed = model.rest_pose(cmd.forehand);
    let mut q_t =
        match crate::kinematics::position_ik_with_restarts(model, &cmd.position, seed, ctx.ik) {
            Ok(q) => q,
            Err(KinError::NotConverged { best, .. }) => best,
            Err(e) => return Err(e.into()),
        };
    // A position-only solve can settle on a pose facing the wrong way for
    // the requested hand; re-solve against the hand's canonical facing.
    let facing_ok = |q: &DVector<f64>| {
        forward_kinematics(model, q)
            .map(|p| (p.normal().x >= 0.0) == cmd.forehand)
            .unwrap_or(false)
    };
    if !facing_ok(&q_t) {
        // Sweep waiting-pose pitches from the canonical facing upward until
        // one is reachable at the requested position; the waiting pose only
        // has to face the right way, not hold an exact normal.
        let sign = if cmd.forehand { 1.0 } else { -1.0 };
        let rest_pitch = forward_kinematics(model, seed)
            .map(|p| p.normal().z.clamp(-1.0, 1.0).asin())
            .unwrap_or(0.2);
        for i in 0..8 {
            let pitch = (rest_pitch + 0.21 * i as f64).min(1.45);
            let n = Vector3::new(sign * pitch.cos(), 0.0, pitch.sin());
            let Ok(pose) = orientation_from_normal(model, &cmd.position, &n, ctx.ik) else {
                continue;
            };
            let solved = match inverse_kinematics(model, &IkTarget::Pose(pose), &q_t, ctx.ik) {
                Ok(q) => q,
                Err(KinError::NotConverged { best, .. }) => best,
                Err(_) => continue,
            };
            let pos_ok = forward_kinematics(model, &solved)
                .map(|p| (p.position - cmd.position).norm() <= ctx.ik.position_tol)
                .unwrap_or(false);
            if pos_ok && facing_ok(&solved) {
                q_t = solved;
                break;
            }
        }
    }
    let zero = DVector::zeros(model.dof());
    let mut traj = plan_min_time(&js.q, &js.qdot, &q_t, &zero, &model.limits)?;
    traj.start_time = js.time;
    Ok(traj)
}

/// Landing prediction and paddle-parameter inversion, either learned or
/// replaced by the physics oracle in fixtures.
pub trait LandingOracle {
    fn forward(&self, sample: &StrikeSample) -> Option<(Vector3<f64>, f64)>;
    fn inverse(
        &self,
        ball: &BallState,
        target: &LandingTarget,
        backhand: bool,
    ) -> Option<PaddleRecord>;
}

impl LandingOracle for LandingModels {
    fn forward(&self, sample: &StrikeSample) -> Option<(Vector3<f64>, f64)> {
        Some(self.predict_landing(sample))
    }

    fn inverse(
        &self,
        ball: &BallState,
        target: &LandingTarget,
        backhand: bool,
    ) -> Option<PaddleRecord> {
        Some(self.paddle_for_target(ball, &target.position, target.speed, backhand))
    }
}

/// The exact-simulation stand-in for the landing models: forward by
/// simulation, inverse by ballistic shooting plus contact-law inversion
/// with one aim-correction pass.
pub struct PhysicsLandingOracle {
    pub params: PhysicsParams,
    pub table: TableGeometry,
}

impl LandingOracle for PhysicsLandingOracle {
    fn forward(&self, sample: &StrikeSample) -> Option<(Vector3<f64>, f64)> {
        crate::models::strike_landing(sample, &self.params, &self.table)
    }

    fn inverse(
        &self,
        ball: &BallState,
        target: &LandingTarget,
        backhand: bool,
    ) -> Option<PaddleRecord> {
        // A flatter, faster return needs far less upward paddle motion
        // against a rising ball, keeping the strike inside joint rates.
        let guess_vx = (target.speed * 0.95).clamp(2.0, 8.5);
        let mut aim = Vector3::new(
            target.position.x,
            target.position.y,
            self.table.landing_z() + 0.02,
        );
        let mut record = None;
        for _ in 0..3 {
            let v_out = inverse_launch(
                &self.params,
                &self.table,
                ball.position,
                aim,
                Vector3::new(guess_vx, 0.0, 1.5),
            )
            .ok()?
            .velocity;
            let (n, w) = capability_invert(
                &ball.velocity,
                &v_out,
                self.params.paddle_restitution,
                self.params.paddle_tangential_retention,
            );
            let n = if backhand { -n } else { n };
            let rec = PaddleRecord {
                position: ball.position,
                normal: n,
                linear_velocity: w,
                angular_velocity: Vector3::zeros(),
            };
            let sample = StrikeSample {
                ball: *ball,
                paddle: rec.clone(),
            };
            record = Some(rec);
            let (land, _) = self.forward(&sample)?;
            let miss = land - target.position;
            if miss.xy().norm() <= 0.01 {
                break;
            }
            aim.x -= miss.x;
            aim.y -= miss.y;
        }
        record
    }
}

fn landing_cost(predicted: &(Vector3<f64>, f64), target: &LandingTarget) -> f64 {
    // Position error with a small speed tie-breaker.
    (predicted.0.xy() - target.position.xy()).norm() + 0.05 * (predicted.1 - target.speed).abs()
}

fn paddle_fidelity(p_hat: &PaddleRecord, p: &PaddleRecord) -> f64 {
    (p_hat.position - p.position).norm()
        + (p_hat.normal.normalize() - p.normal.normalize()).norm()
        + 0.1 * (p_hat.linear_velocity - p.linear_velocity).norm()
        + 0.01 * (p_hat.angular_velocity - p.angular_velocity).norm()
}

/// Model-based land-ball: walk the predicted trajectory through the strike
/// band, invert the landing model at each candidate for both hands, check
/// reachability through the paddle controller, and keep the candidate
/// whose forward-predicted landing is closest to the target.
pub fn land_ball_open_loop<O: LandingOracle>(
    ball: &BallState,
    target: &LandingTarget,
    flight: &BallFlightModel,
    oracle: &O,
    ctx: &RobotContext,
    js: &JointState,
) -> Result<StrikeDecision, PolicyError> {
    let pred = flight.predict(ball, 60);
    let params = flight.params();
    // Oracles trained on free-paddle demonstrations suggest paddle motions
    // without regard for the arm; re-express each suggestion through the
    // equivalent contact normal that is cheapest for the arm, preserving
    // the predicted outgoing ball.
    let reproject = |p: &PaddleRecord, b: &BallState, backhand: bool| -> PaddleRecord {
        let state = PaddleState {
            pose: paddle_pose_from_normal(p.position, p.normal),
            linear_velocity: p.linear_velocity,
            angular_velocity: p.angular_velocity,
        };
        let Ok(out) = paddle_contact(b, &state, &params, &flight.table) else {
            return p.clone();
        };
        let (n, w) = capability_invert(
            &b.velocity,
            &out.velocity,
            params.paddle_restitution,
            params.paddle_tangential_retention,
        );
        PaddleRecord {
            position: p.position,
            normal: if backhand { -n } else { n },
            linear_velocity: w,
            angular_velocity: Vector3::zeros(),
        }
    };
    let mut best: Option<(f64, StrikeDecision)> = None;
    for (k, b_k) in pred.iter().enumerate() {
        if b_k.position.x < STRIKE_BAND_X.0 || b_k.position.x > STRIKE_BAND_X.1 {
            continue;
        }
        if b_k.position.z < flight.table.landing_z() + 0.05 {
            continue;
        }
        let t_k = js.time + (k + 1) as f64 * ENV_DT;
        // Rising balls need strong upward paddle motion that the arm often
        // cannot deliver in the band; a faster, flatter return trades a
        // little landing speed for a strike the arm can execute, so both
        // hands compete across a small speed ladder on execution fidelity
        // |p_hat - p|.
        let mut speeds = vec![target.speed];
        for s in [6.0, 7.0, 8.0] {
            if s > target.speed + 0.25 {
                speeds.push(s);
            }
        }
        let mut chosen: Option<(f64, Hand, f64, PaddleRecord, JointTrajectory, PaddleRecord)> =
            None;
        for hand in [Hand::Forehand, Hand::Backhand] {
            for &speed in &speeds {
                let want = LandingTarget {
                    position: target.position,
                    speed,
                };
                let p_k = match oracle.inverse(b_k, &want, hand == Hand::Backhand) {
                    Some(p) => reproject(&p, b_k, hand == Hand::Backhand),
                    None => continue,
                };
                let cmd = PaddleCommand {
                    t: t_k,
                    target: p_k.clone(),
                };
                let (traj, p_hat) = match paddle_control(ctx, &cmd, js) {
                    Ok(x) => x,
                    Err(_) => continue,
                };
                let traj = match traj {
                    Some(t) if t.feasible => t,
                    _ => continue,
                };
                let fid = paddle_fidelity(&p_hat, &p_k);
                if chosen.as_ref().map_or(true, |c| fid < c.0) {
                    chosen = Some((fid, hand, speed, p_k, traj, p_hat));
                }
            }
        }
        let (_, hand, speed, p_k, traj, p_hat) = match chosen {
            Some(c) => c,
            None => continue,
        };
        let sample = StrikeSample {
            ball: *b_k,
            paddle: p_hat.clone(),
        };
        let g_hat = match oracle.forward(&sample) {
            Some(g) => g,
            None => continue,
        };
        let cost = landing_cost(&g_hat, target);
        // The inversion aims for the requested paddle, not the one the arm
        // delivers.  Re-invert against a shifted target to cancel the miss
        // of the achieved paddle, keeping the best attempt.
        let mut tuple = (cost, p_k, traj, p_hat, g_hat);
        let mut aim = target.position;
        for _ in 0..3 {
            let miss = tuple.4 .0.xy() - target.position.xy();
            if miss.norm() <= 0.01 {
                break;
            }
            aim.x = (aim.x - miss.x).clamp(0.05, 1.32);
            aim.y = (aim.y - miss.y).clamp(-0.71, 0.71);
            let adj = LandingTarget {
                position: aim,
                speed,
            };
            let Some(p_r) = oracle.inverse(b_k, &adj, hand == Hand::Backhand) else {
                break;
            };
            let p_r = reproject(&p_r, b_k, hand == Hand::Backhand);
            let cmd = PaddleCommand {
                t: t_k,
                target: p_r.clone(),
            };
            let seed_q = tuple.2.achieved_final.0.clone();
            let Ok((Some(traj_r), p_hat_r)) =
                paddle_control_seeded(ctx, &cmd, js, Some(&seed_q))
            else {
                break;
            };
            if !traj_r.feasible {
                break;
            }
            let Some(g_r) = oracle.forward(&StrikeSample {
                ball: *b_k,
                paddle: p_hat_r.clone(),
            }) else {
                break;
            };
            let cost_r = landing_cost(&g_r, target);
            if cost_r < tuple.0 {
                tuple = (cost_r, p_r, traj_r, p_hat_r, g_r);
            }
        }
        let (cost, p_k, traj, p_hat, g_hat) = tuple;
        // Strict comparison keeps the earlier contact on ties.
        if best.as_ref().map_or(true, |b| cost < b.0) {
            best = Some((
                cost,
                StrikeDecision {
                    command: PaddleCommand {
                        t: t_k,
                        target: p_k,
                    },
                    predicted_paddle: p_hat,
                    predicted_landing: Some(g_hat),
                    hand,
                    candidate: k,
                    candidate_ball: *b_k,
                    trajectory: traj,
                },
            ));
        }
    }
    best.map(|(_, d)| d).ok_or(PolicyError::NoReachableCandidate)
}

/// CEM refinement of the open-loop decision over the 9-dim paddle
/// parameters (normal, linear velocity, angular velocity); fitness is the
/// predicted landing error through the paddle forward model and the
/// landing model.
pub fn land_ball_cem<O: LandingOracle, R: Rng>(
    ball: &BallState,
    target: &LandingTarget,
    flight: &BallFlightModel,
    oracle: &O,
    ctx: &RobotContext,
    js: &JointState,
    cem: &CemConfig,
    rng: &mut R,
) -> Result<StrikeDecision, PolicyError> {
    let base = land_ball_open_loop(ball, target, flight, oracle, ctx, js)?;
    if cem.iterations == 0 {
        return Ok(base);
    }
    let b_k = base.candidate_ball;
    let t_k = base.command.t;
    let p0 = &base.command.target;
    let seed_q = base.trajectory.achieved_final.0.clone();
    let mean0 = DVector::from_row_slice(&[
        p0.normal.x,
        p0.normal.y,
        p0.normal.z,
        p0.linear_velocity.x,
        p0.linear_velocity.y,
        p0.linear_velocity.z,
        p0.angular_velocity.x,
        p0.angular_velocity.y,
        p0.angular_velocity.z,
    ]);
    let sigma0 = DVector::from_row_slice(&[
        cem.sigma_normal,
        cem.sigma_normal,
        cem.sigma_normal,
        cem.sigma_speed,
        cem.sigma_speed,
        cem.sigma_speed,
        cem.sigma_spin,
        cem.sigma_spin,
        cem.sigma_spin,
    ]);
    let paddle_of = |x: &DVector<f64>| -> Option<PaddleRecord> {
        let n = Vector3::new(x[0], x[1], x[2]);
        if n.norm() < 1e-6 {
            return None;
        }
        Some(PaddleRecord {
            position: b_k.position,
            normal: n.normalize(),
            linear_velocity: Vector3::new(x[3], x[4], x[5]),
            angular_velocity: Vector3::new(x[6], x[7], x[8]),
        })
    };
    let evaluate = |x: &DVector<f64>| -> Option<(StrikeDecision, f64)> {
        let p = paddle_of(x)?;
        let cmd = PaddleCommand {
            t: t_k,
            target: p.clone(),
        };
        let (traj, p_hat) = paddle_control_seeded(ctx, &cmd, js, Some(&seed_q)).ok()?;
        let traj = match traj {
            Some(t) if t.feasible => t,
            _ => return None,
        };
        let g_hat = oracle.forward(&StrikeSample {
            ball: b_k,
            paddle: p_hat.clone(),
        })?;
        let cost = landing_cost(&g_hat, target);
        Some((
            StrikeDecision {
                command: cmd,
                predicted_paddle: p_hat,
                predicted_landing: Some(g_hat),
                hand: base.hand,
                candidate: base.candidate,
                candidate_ball: b_k,
                trajectory: traj,
            },
            cost,
        ))
    };
    let mut cost_fn = |x: &DVector<f64>| evaluate(x).map_or(1e6, |(_, c)| c);
    let (best_x, best_cost) = cem_optimize(
        &mut cost_fn,
        &mean0,
        &sigma0,
        cem.population,
        cem.elites,
        cem.iterations,
        Some(cem.stop_error),
        rng,
    );
    let base_cost = base
        .predicted_landing
        .as_ref()
        .map_or(f64::INFINITY, |g| landing_cost(g, target));
    if best_cost < base_cost {
        if let Some((decision, _)) = evaluate(&best_x) {
            return Ok(decision);
        }
    }
    Ok(base)
}

/// Closed-loop land-ball: each tick re-estimates the ball, re-plans, and
/// follows the current plan for one tick.  Infeasible or failed re-plans
/// are ignored in favor of the last feasible plan; an unchanged strike
/// command keeps the existing trajectory untouched.
pub struct ClosedLoopLandBall {
    pub target: LandingTarget,
    pub estimator: BallEstimator,
    pub plan: Option<StrikeDecision>,
}

impl ClosedLoopLandBall {
    pub fn new(target: LandingTarget, estimator: BallEstimator) -> Self {
        ClosedLoopLandBall {
            target,
            estimator,
            plan: None,
        }
    }

    fn same_command(a: &PaddleCommand, b: &PaddleCommand) -> bool {
        (a.t - b.t).abs() <= 1e-9
            && (a.target.position - b.target.position).norm() <= 1e-9
            && (a.target.normal - b.target.normal).norm() <= 1e-9
            && (a.target.linear_velocity - b.target.linear_velocity).norm() <= 1e-9
            && (a.target.angular_velocity - b.target.angular_velocity).norm() <= 1e-9
    }

    /// One 20 ms tick: fold in the observation (if any), re-plan, and
    /// return the trajectory to follow for this tick.
    pub fn tick<O: LandingOracle>(
        &mut self,
        observation: Option<Vector3<f64>>,
        flight: &BallFlightModel,
        oracle: &O,
        ctx: &RobotContext,
        js: &JointState,
    ) -> Option<&JointTrajectory> {
        if let Some(obs) = observation {
            self.estimator.update(obs);
        }
        let est = self.estimator.state;
        if let Ok(decision) = land_ball_open_loop(&est, &self.target, flight, oracle, ctx, js) {
            let keep = self
                .plan
                .as_ref()
                .map_or(false, |p| Self::same_command(&p.command, &decision.command));
            if !keep {
                self.plan = Some(decision);
            }
        }
        self.estimator.predict();
        self.plan.as_ref().map(|p| &p.trajectory)
    }
}

/// Hit-ball: strike the predicted trajectory point closest to the plane
/// x = l_x with externally chosen paddle normal and velocities; no landing
/// models are consulted.
pub fn hit_ball(
    ball: &BallState,
    l_x: f64,
    normal: &Vector3<f64>,
    velocity: &Vector3<f64>,
    spin: &Vector3<f64>,
    flight: &BallFlightModel,
    ctx: &RobotContext,
    js: &JointState,
) -> Result<StrikeDecision, PolicyError> {
    let pred = flight.predict(ball, 60);
    let mut order: Vec<usize> = (0..pred.len())
        .filter(|&k| pred[k].position.z > flight.table.landing_z() + 0.05)
        .collect();
    order.sort_by(|&a, &b| {
        (pred[a].position.x - l_x)
            .abs()
            .total_cmp(&(pred[b].position.x - l_x).abs())
    });
    for k in order {
        let b_k = pred[k];
        let cmd = PaddleCommand {
            t: js.time + (k + 1) as f64 * ENV_DT,
            target: PaddleRecord {
                position: b_k.position,
                normal: *normal,
                linear_velocity: *velocity,
                angular_velocity: *spin,
            },
        };
        let (traj, p_hat) = match paddle_control(ctx, &cmd, js) {
            Ok(x) => x,
            Err(_) => continue,
        };
        if let Some(traj) = traj {
            if traj.feasible {
                return Ok(StrikeDecision {
                    command: cmd,
                    predicted_paddle: p_hat,
                    predicted_landing: None,
                    hand: if normal.x >= 0.0 {
                        Hand::Forehand
                    } else {
                        Hand::Backhand
                    },
                    candidate: k,
                    candidate_ball: b_k,
                    trajectory: traj,
                });
            }
        }
    }
    Err(PolicyError::NoReachableCandidate)
}

/// World plus a trajectory-following robot paddle for the learner side.
pub struct RobotSim {
    pub world: World,
    pub model: RobotModel,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub trajectory: Option<JointTrajectory>,
}

impl RobotSim {
    pub fn new(params: PhysicsParams, table: TableGeometry, model: RobotModel) -> Self {
        let q = model.rest_pose_forehand.clone();
        let qdot = DVector::zeros(model.dof());
        RobotSim {
            world: World::new(params, table),
            model,
            q,
            qdot,
            trajectory: None,
        }
    }

    pub fn joint_state(&self) -> JointState {
        JointState {
            q: self.q.clone(),
            qdot: self.qdot.clone(),
            time: self.world.time,
        }
    }

    pub fn set_trajectory(&mut self, traj: JointTrajectory) {
        self.trajectory = Some(traj);
    }

    fn follow(&mut self, t: f64) {
        if let Some(traj) = &self.trajectory {
            let clamped = t.clamp(traj.start_time, traj.end_time());
            if let Ok((q, v, _)) = crate::trajopt::query_state_at(traj, clamped) {
                self.q = q;
                self.qdot = if t > traj.end_time() {
                    DVector::zeros(v.len())
                } else {
                    v
                };
            }
        }
    }

    /// One 20 ms environment tick at 1 kHz paddle tracking.
    pub fn tick(&mut self) -> Vec<CollisionEvent> {
        let mut events = Vec::new();
        for _ in 0..STEPS_PER_TICK {
            self.follow(self.world.time);
            if let Ok(rec) = paddle_record_at(&self.model, &self.q, &self.qdot) {
                self.world.paddles[World::side_index(Side::Learner)] = Some(PaddleState {
                    pose: crate::physics::paddle_pose_from_normal(rec.position, rec.normal),
                    linear_velocity: rec.linear_velocity,
                    angular_velocity: rec.angular_velocity,
                });
            }
            events.extend(self.world.step_physics());
        }
        events
    }
}
