//! Learned dynamics: translation/yaw normalization, the ball-flight model
//! (physics fit plus an optional residual network), landing models L and
//! L-inverse over paddle parameters, a Kalman ball-state estimator, and
//! inverse launch solving.

use nalgebra::{DVector, Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::learnsub::{train_regressor, LearnError, Regressor, TrainConfig};
use crate::logfmt::{PaddleRecord, TrajectoryLog};
use crate::physics::{
    paddle_contact, simulate_until_landing, step_ball, BallState, LandingOutcome, PaddleState,
    PhysicsParams, TableGeometry, PHYSICS_DT, STEPS_PER_TICK,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("not enough data: {0}")]
    NotEnoughData(&'static str),
    #[error("shooting solve did not converge (best miss {best_miss} m)")]
    ShootingDiverged { best_miss: f64 },
    #[error(transparent)]
    Learn(#[from] LearnError),
}

/// Translation (xy) and yaw normalization anchored at a reference ball
/// state: the reference position maps to x = y = 0 and its velocity maps
/// into the xz-plane with nonnegative x.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationFrame {
    pub shift_x: f64,
    pub shift_y: f64,
    pub yaw: f64,
}

fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

impl NormalizationFrame {
    pub fn from_ball(ball: &BallState) -> Self {
        let v = ball.velocity;
        let yaw = if v.x.hypot(v.y) < 1e-12 {
            0.0
        } else {
            v.y.atan2(v.x)
        };
        NormalizationFrame {
            shift_x: ball.position.x,
            shift_y: ball.position.y,
            yaw,
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        rot_z(-self.yaw) * Vector3::new(p.x - self.shift_x, p.y - self.shift_y, p.z)
    }

    pub fn invert_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let r = rot_z(self.yaw) * p;
        Vector3::new(r.x + self.shift_x, r.y + self.shift_y, r.z)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        rot_z(-self.yaw) * v
    }

    pub fn invert_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        rot_z(self.yaw) * v
    }

    pub fn apply_ball(&self, b: &BallState) -> BallState {
        BallState {
            position: self.apply_point(&b.position),
            velocity: self.apply_vector(&b.velocity),
        }
    }

    pub fn invert_ball(&self, b: &BallState) -> BallState {
        BallState {
            position: self.invert_point(&b.position),
            velocity: self.invert_vector(&b.velocity),
        }
    }
}

/// Canonicalizes a paddle normal to the forehand half-space (x >= 0);
/// returns the flip flag needed to restore the original.
pub fn canonical_normal(n: &Vector3<f64>) -> (Vector3<f64>, bool) {
    if n.x < 0.0 {
        (-n, true)
    } else {
        (*n, false)
    }
}

/// Ball-flight dynamics fitted from logged trajectories: gravity, linear
/// drag, and table bounce coefficients, plus an optional residual network
/// correcting each 20 ms step in the normalized frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallFlightModel {
    pub gravity_z: f64,
    pub drag: f64,
    pub restitution: f64,
    pub tangential_retention: f64,
    pub table: TableGeometry,
    pub residual: Option<Regressor>,
}

impl BallFlightModel {
    pub fn params(&self) -> PhysicsParams {
        PhysicsParams {
            gravity: Vector3::new(0.0, 0.0, self.gravity_z),
            drag_coefficient: self.drag,
            table_restitution: self.restitution,
            table_tangential_retention: self.tangential_retention,
            // Paddle coefficients are irrelevant for free flight.
            paddle_restitution: 0.85,
            paddle_tangential_retention: 0.65,
        }
    }

    /// One 20 ms step of the fitted physics alone.
    pub fn step_env_physics(&self, state: &BallState) -> BallState {
        let params = self.params();
        let mut s = *state;
        for _ in 0..STEPS_PER_TICK {
            let (next, _) = step_ball(&s, 0.0, &params, &self.table);
            s = next;
        }
        s
    }

    /// One 20 ms step including the residual correction.
    pub fn step_env(&self, state: &BallState) -> BallState {
        let phys = self.step_env_physics(state);
        match &self.residual {
            None => phys,
            Some(net) => {
                let frame = NormalizationFrame::from_ball(state);
                let corr = net.predict(&residual_features(state, &frame));
                BallState {
                    position: phys.position
                        + frame.invert_vector(&Vector3::new(corr[0], corr[1], corr[2])),
                    velocity: phys.velocity
                        + frame.invert_vector(&Vector3::new(corr[3], corr[4], corr[5])),
                }
            }
        }
    }

    /// Trajectory prediction at 20 ms resolution, `n` steps ahead.
    pub fn predict(&self, state: &BallState, n: usize) -> Vec<BallState> {
        let mut out = Vec::with_capacity(n);
        let mut s = *state;
        for _ in 0..n {
            s = self.step_env(&s);
            out.push(s);
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(LearnError::from)?;
        std::fs::write(path, text).map_err(LearnError::from)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(LearnError::from)?;
        Ok(serde_json::from_str(&text).map_err(LearnError::from)?)
    }
}

fn residual_features(state: &BallState, frame: &NormalizationFrame) -> DVector<f64> {
    let v = frame.apply_vector(&state.velocity);
    DVector::from_row_slice(&[state.position.z, v.x, v.z])
}

/// Fits gravity, drag, and bounce coefficients from 1 kHz logs by least
/// squares on the exact semi-implicit Euler step relation
/// `dv = dt*g - dt*k*v`.
pub fn fit_ball_flight(
    logs: &[TrajectoryLog],
    table: &TableGeometry,
) -> Result<BallFlightModel, ModelError> {
    let dt = PHYSICS_DT;
    // Normal equations for (g_z, k): rows [1, -v_z] for z, [0, -v_a] for xy.
    let mut ata = [[0.0_f64; 2]; 2];
    let mut atb = [0.0_f64; 2];
    let mut bounce_pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    let mut flight_rows = 0usize;
    for log in logs {
        for w in log.samples.windows(2) {
            let v0 = w[0].ball.velocity;
            let v1 = w[1].ball.velocity;
            let near_table = w[0].ball.position.z < table.landing_z() + 0.05
                && table.over_table(w[0].ball.position.x, w[0].ball.position.y);
            // A velocity jump far beyond one step of gravity and drag marks
            // a contact (table, net, or floor), not free flight.
            if (v1 - v0).norm() > 0.05 {
                if v0.z < 0.0 && v1.z > 0.0 && near_table {
                    bounce_pairs.push((v0, v1));
                }
                continue;
            }
            for (axis, has_g) in [(0usize, false), (1, false), (2, true)] {
                let a0 = if has_g { 1.0 } else { 0.0 };
                let a1 = -v0[axis];
                let b = (v1[axis] - v0[axis]) / dt;
                ata[0][0] += a0 * a0;
                ata[0][1] += a0 * a1;
                ata[1][0] += a1 * a0;
                ata[1][1] += a1 * a1;
                atb[0] += a0 * b;
                atb[1] += a1 * b;
            }
            flight_rows += 1;
        }
    }
    if flight_rows < 10 {
        return Err(ModelError::NotEnoughData("need at least 10 flight steps"));
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    if det.abs() < 1e-12 {
        return Err(ModelError::NotEnoughData("degenerate flight data"));
    }
    let gravity_z = (atb[0] * ata[1][1] - ata[0][1] * atb[1]) / det;
    let drag = (ata[0][0] * atb[1] - ata[1][0] * atb[0]) / det;
    // Bounce coefficients from pre/post pairs; pre-bounce velocity first
    // takes the in-step gravity/drag update.
    let (mut e_sum, mut mu_sum, mut n_b) = (0.0, 0.0, 0.0);
    for (v0, v1) in &bounce_pairs {
        let pre = v0 + (Vector3::new(0.0, 0.0, gravity_z) - v0 * drag) * dt;
        if pre.z >= -1e-9 {
            continue;
        }
        e_sum += -v1.z / pre.z;
        let pre_xy = (pre.x * pre.x + pre.y * pre.y).sqrt();
        let post_xy = (v1.x * v1.x + v1.y * v1.y).sqrt();
        if pre_xy > 1e-9 {
            mu_sum += post_xy / pre_xy;
        } else {
            mu_sum += 1.0;
        }
        n_b += 1.0;
    }
    let (restitution, tangential_retention) = if n_b > 0.0 {
        (e_sum / n_b, mu_sum / n_b)
    } else {
        (0.87, 0.75)
    };
    Ok(BallFlightModel {
        gravity_z,
        drag,
        restitution,
        tangential_retention,
        table: table.clone(),
        residual: None,
    })
}

/// Extracts 20 ms-apart state pairs from 1 kHz logs, once per phase offset
/// (0..offsets ms), amplifying the dataset twenty-fold at the default.
pub fn subsample_pairs(logs: &[TrajectoryLog], offsets: usize) -> Vec<(BallState, BallState)> {
    let mut pairs = Vec::new();
    for log in logs {
        for offset in 0..offsets.max(1) {
            let mut i = offset;
            while i + STEPS_PER_TICK < log.samples.len() {
                pairs.push((log.samples[i].ball, log.samples[i + STEPS_PER_TICK].ball));
                i += STEPS_PER_TICK;
            }
        }
    }
    pairs
}

/// Trains the residual network on the physics model's 20 ms step errors,
/// in the normalized frame of each step's start state.
pub fn train_residual<R: Rng>(
    model: &mut BallFlightModel,
    pairs: &[(BallState, BallState)],
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<f64, ModelError> {
    if pairs.len() < 10 {
        return Err(ModelError::NotEnoughData("need at least 10 step pairs"));
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ys = Vec::with_capacity(pairs.len());
    for (s0, s1) in pairs {
        let frame = NormalizationFrame::from_ball(s0);
        let phys = model.step_env_physics(s0);
        let dp = frame.apply_vector(&(s1.position - phys.position));
        let dv = frame.apply_vector(&(s1.velocity - phys.velocity));
        // A residual of several m/s marks an unmodeled discontinuity inside
        // the window (a paddle contact in the log); free-flight correction
        // targets are small, so such pairs would only poison the fit.
        if dv.norm() > 0.5 {
            continue;
        }
        xs.push(residual_features(s0, &frame));
        ys.push(DVector::from_row_slice(&[dp.x, dp.y, dp.z, dv.x, dv.y, dv.z]));
    }
    if xs.len() < 10 {
        return Err(ModelError::NotEnoughData(
            "need at least 10 contact-free step pairs",
        ));
    }
    let tc = TrainConfig {
        hidden: cfg.hidden.clone(),
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
    };
    let (net, loss) = train_regressor(&xs, &ys, &tc, rng)?;
    model.residual = Some(net);
    Ok(loss)
}

/// A recorded pre-contact situation: the incoming ball and the paddle that
/// strikes it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrikeSample {
    pub ball: BallState,
    pub paddle: PaddleRecord,
}

impl StrikeSample {
    pub fn paddle_state(&self) -> PaddleState {
        PaddleState {
            pose: crate::physics::paddle_pose_from_normal(self.paddle.position, self.paddle.normal),
            linear_velocity: self.paddle.linear_velocity,
            angular_velocity: self.paddle.angular_velocity,
        }
    }
}

/// Applies the contact law and simulates to the landing plane.  Returns the
/// landing position and speed under the extended landing definition (clean
/// table landings and off-table surface crossings; net balls are excluded).
pub fn strike_landing(
    sample: &StrikeSample,
    params: &PhysicsParams,
    table: &TableGeometry,
) -> Option<(Vector3<f64>, f64)> {
    let outgoing = paddle_contact(&sample.ball, &sample.paddle_state(), params, table).ok()?;
    landing_of(&outgoing, params, table)
}

/// Extended landing of a free-flying ball.
pub fn landing_of(
    ball: &BallState,
    params: &PhysicsParams,
    table: &TableGeometry,
) -> Option<(Vector3<f64>, f64)> {
    match simulate_until_landing(ball, params, table) {
        LandingOutcome::OnTable {
            position,
            speed,
            hit_net,
            ..
        } => {
            if hit_net {
                None
            } else {
                Some((position, speed))
            }
        }
        LandingOutcome::Out { crossing, .. } => crossing,
    }
}

/// 15-dim forward-model features in the pre-contact ball's frame: paddle
/// offset (3), canonical normal (3), linear velocity (3), angular velocity
/// (3), ball height and in-plane velocity (3).
pub fn forward_features(sample: &StrikeSample) -> DVector<f64> {
    let frame = NormalizationFrame::from_ball(&sample.ball);
    let rel = frame.apply_vector(&(sample.paddle.position - sample.ball.position));
    let (n, _) = canonical_normal(&frame.apply_vector(&sample.paddle.normal));
    let lv = frame.apply_vector(&sample.paddle.linear_velocity);
    let av = frame.apply_vector(&sample.paddle.angular_velocity);
    let bv = frame.apply_vector(&sample.ball.velocity);
    DVector::from_row_slice(&[
        rel.x,
        rel.y,
        rel.z,
        n.x,
        n.y,
        n.z,
        lv.x,
        lv.y,
        lv.z,
        av.x,
        av.y,
        av.z,
        sample.ball.position.z,
        bv.x,
        bv.z,
    ])
}

/// 6-dim inverse-model features: ball height and in-plane velocity plus the
/// requested landing target (frame xy and speed).
pub fn inverse_features(
    ball: &BallState,
    target_world_xy: &Vector3<f64>,
    speed: f64,
) -> DVector<f64> {
    let frame = NormalizationFrame::from_ball(ball);
    let bv = frame.apply_vector(&ball.velocity);
    let t = frame.apply_point(target_world_xy);
    DVector::from_row_slice(&[ball.position.z, bv.x, bv.z, t.x, t.y, speed])
}

/// Landing models: L maps paddle parameters to the landing (x, y, speed);
/// L-inverse maps a requested landing to paddle parameters (normal,
/// velocities), with the paddle position pinned to the predicted ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandingModels {
    pub forward: Regressor,
    pub inverse: Regressor,
}

impl LandingModels {
    /// Predicted landing (world xy at the landing plane, speed).
    pub fn predict_landing(&self, sample: &StrikeSample) -> (Vector3<f64>, f64) {
        let frame = NormalizationFrame::from_ball(&sample.ball);
        let y = self.forward.predict(&forward_features(sample));
        let p = frame.invert_point(&Vector3::new(y[0], y[1], 0.0));
        (p, y[2])
    }

    /// Paddle parameters for a requested landing; `backhand` restores an
    /// x-negative normal.
    pub fn paddle_for_target(
        &self,
        ball: &BallState,
        target_world_xy: &Vector3<f64>,
        speed: f64,
        backhand: bool,
    ) -> PaddleRecord {
        let frame = NormalizationFrame::from_ball(ball);
        let y = self.inverse.predict(&inverse_features(ball, target_world_xy, speed));
        let mut n = Vector3::new(y[0], y[1], y[2]);
        if n.norm() < 1e-9 {
            n = Vector3::x();
        }
        let mut n = n.normalize();
        if backhand {
            n = -n;
        }
        PaddleRecord {
            position: ball.position,
            normal: frame.invert_vector(&n),
            linear_velocity: frame.invert_vector(&Vector3::new(y[3], y[4], y[5])),
            angular_velocity: frame.invert_vector(&Vector3::new(y[6], y[7], y[8])),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(LearnError::from)?;
        std::fs::write(path, text).map_err(LearnError::from)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(LearnError::from)?;
        Ok(serde_json::from_str(&text).map_err(LearnError::from)?)
    }
}

/// Trains L and L-inverse on strike samples, labeling each by simulation
/// and dropping strikes that never reach the landing plane.
pub fn train_landing_models<R: Rng>(
    samples: &[StrikeSample],
    forward_cfg: &ModelConfig,
    inverse_cfg: &ModelConfig,
    params: &PhysicsParams,
    table: &TableGeometry,
    rng: &mut R,
) -> Result<LandingModels, ModelError> {
    let mut fwd_x = Vec::new();
    let mut fwd_y = Vec::new();
    let mut inv_x = Vec::new();
    let mut inv_y = Vec::new();
    for s in samples {
        let (land, speed) = match strike_landing(s, params, table) {
            Some(l) => l,
            None => continue,
        };
        let frame = NormalizationFrame::from_ball(&s.ball);
        let lf = frame.apply_point(&land);
        fwd_x.push(forward_features(s));
        fwd_y.push(DVector::from_row_slice(&[lf.x, lf.y, speed]));
        // The same outgoing ball is produced by a one-parameter family of
        // contact normals (any unit normal with a positive component along
        // the velocity change).  The striking policies execute
        // capability-reprojected members of that family, so the forward
        // model trains across it: equivalent paddles, identical landing.
        if let Ok(out) = paddle_contact(&s.ball, &s.paddle_state(), params, table) {
            let (n0, w0) = crate::demogen::invert_contact(
                &s.ball.velocity,
                &out.velocity,
                params.paddle_restitution,
                params.paddle_tangential_retention,
            );
            let axis = n0.cross(&Vector3::z());
            if axis.norm() > 1e-6 {
                let axis = nalgebra::Unit::new_normalize(axis);
                let dv = out.velocity - s.ball.velocity;
                for theta in [-0.6, -0.3, 0.0, 0.3, 0.6] {
                    let n = nalgebra::UnitQuaternion::from_axis_angle(&axis, theta) * n0;
                    if dv.dot(&n) <= 0.2 {
                        continue;
                    }
                    let w = if theta == 0.0 {
                        w0
                    } else {
                        crate::demogen::invert_contact_for_normal(
                            &s.ball.velocity,
                            &out.velocity,
                            &n,
                            params.paddle_restitution,
                            params.paddle_tangential_retention,
                        )
                    };
                    // Small paddle-center offsets leave the contact
                    // unchanged for a spinless paddle but cover the
                    // positional slack of executed strikes.
                    let offset = Vector3::new(
                        rng.gen_range(-0.03..0.03),
                        rng.gen_range(-0.03..0.03),
                        rng.gen_range(-0.03..0.03),
                    );
                    let variant = StrikeSample {
                        ball: s.ball,
                        paddle: PaddleRecord {
                            position: s.ball.position + offset,
                            normal: n,
                            linear_velocity: w,
                            angular_velocity: Vector3::zeros(),
                        },
                    };
                    fwd_x.push(forward_features(&variant));
                    fwd_y.push(DVector::from_row_slice(&[lf.x, lf.y, speed]));
                }
            }
        }
        inv_x.push(inverse_features(&s.ball, &land, speed));
        let (n, _) = canonical_normal(&frame.apply_vector(&s.paddle.normal));
        let lv = frame.apply_vector(&s.paddle.linear_velocity);
        let av = frame.apply_vector(&s.paddle.angular_velocity);
        inv_y.push(DVector::from_row_slice(&[
            n.x, n.y, n.z, lv.x, lv.y, lv.z, av.x, av.y, av.z,
        ]));
    }
    if fwd_x.len() < 10 {
        return Err(ModelError::NotEnoughData(
            "need at least 10 landing strikes",
        ));
    }
    let to_tc = |m: &ModelConfig| TrainConfig {
        hidden: m.hidden.clone(),
        lr: m.lr,
        epochs: m.epochs,
        batch_size: m.batch_size,
    };
    let (forward, _) = train_regressor(&fwd_x, &fwd_y, &to_tc(forward_cfg), rng)?;
    let (inverse, _) = train_regressor(&inv_x, &inv_y, &to_tc(inverse_cfg), rng)?;
    Ok(LandingModels { forward, inverse })
}

/// Augments strike samples by lowering the whole contact situation, adding
/// trajectories that skim closer to the table.
pub fn augment_height_reduction(
    samples: &[StrikeSample],
    table: &TableGeometry,
) -> Vec<StrikeSample> {
    let mut out = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        out.push(s.clone());
        for delta in [0.02, 0.04, 0.06] {
            let z = s.ball.position.z - delta;
            if z <= table.landing_z() + 0.02 {
                continue;
            }
            let mut low = s.clone();
            low.ball.position.z = z;
            low.paddle.position.z -= delta;
            out.push(low);
        }
    }
    out
}

/// Constant-parameter Kalman filter over (position, velocity) with 20 ms
/// prediction through the fitted flight dynamics.  The covariance is
/// inflated when the prediction window contains a table bounce.
#[derive(Debug, Clone)]
pub struct BallEstimator {
    pub state: BallState,
    pub covariance: SMatrix<f64, 6, 6>,
    pub measurement_noise: f64,
    model: BallFlightModel,
}

impl BallEstimator {
    /// Starts from an already-known full ball state with tight covariance.
    pub fn with_state(state: BallState, model: BallFlightModel) -> Self {
        let mut est = Self::new(state.position, model);
        est.state = state;
        est.covariance = SMatrix::<f64, 6, 6>::identity() * 1e-8;
        est
    }

    pub fn new(first_measurement: Vector3<f64>, model: BallFlightModel) -> Self {
        let mut cov = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            cov[(i, i)] = 1e-4;
            cov[(i + 3, i + 3)] = 4.0;
        }
        BallEstimator {
            state: BallState::new(first_measurement, Vector3::zeros()),
            covariance: cov,
            measurement_noise: 2e-3,
            model,
        }
    }

    /// Advances the estimate by one 20 ms tick.
    pub fn predict(&mut self) {
        let params = self.model.params();
        let dt = PHYSICS_DT;
        let decay = 1.0 - dt * params.drag_coefficient;
        let mut f = SMatrix::<f64, 6, 6>::identity();
        let mut s = self.state;
        let mut bounced = false;
        for _ in 0..STEPS_PER_TICK {
            let z_before = s.position.z;
            let (next, _) = step_ball(&s, 0.0, &params, &self.model.table);
            let step_bounce = next.velocity.z > 0.0 && s.velocity.z < 0.0
                && z_before < self.model.table.landing_z() + 0.05;
            // Per-step transition: p' = p + dt v', v' = decay v + dt g.
            let mut fs = SMatrix::<f64, 6, 6>::zeros();
            for i in 0..3 {
                fs[(i, i)] = 1.0;
                fs[(i, i + 3)] = dt * decay;
                fs[(i + 3, i + 3)] = decay;
            }
            if step_bounce {
                bounced = true;
                fs[(3, 3)] *= params.table_tangential_retention;
                fs[(4, 4)] *= params.table_tangential_retention;
                fs[(5, 5)] *= -params.table_restitution;
            }
            f = fs * f;
            s = next;
        }
        self.state = s;
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let (qp, qv) = if bounced {
            // Bounce-parameter uncertainty dominates after table contact.
            (1e-4, 0.25)
        } else {
            (1e-8, 1e-4)
        };
        for i in 0..3 {
            q[(i, i)] = qp;
            q[(i + 3, i + 3)] = qv;
        }
        self.covariance = f * self.covariance * f.transpose() + q;
    }

    /// Folds in a position measurement.
    pub fn update(&mut self, measured: Vector3<f64>) {
        let mut h = SMatrix::<f64, 3, 6>::zeros();
        for i in 0..3 {
            h[(i, i)] = 1.0;
        }
        let r = SMatrix::<f64, 3, 3>::identity() * self.measurement_noise.powi(2);
        let innov_cov = h * self.covariance * h.transpose() + r;
        let k = self.covariance * h.transpose()
            * innov_cov.try_inverse().unwrap_or_else(SMatrix::zeros);
        let residual = measured - self.state.position;
        let dx: SVector<f64, 6> = k * residual;
        self.state.position += Vector3::new(dx[0], dx[1], dx[2]);
        self.state.velocity += Vector3::new(dx[3], dx[4], dx[5]);
        self.covariance = (SMatrix::<f64, 6, 6>::identity() - k * h) * self.covariance;
    }
}

/// Filters a 20 ms position-measurement sequence into a ball state estimate
/// at the last measurement time.
pub fn estimate_ball_state(
    measurements: &[Vector3<f64>],
    model: &BallFlightModel,
) -> Result<BallState, ModelError> {
    let first = measurements
        .first()
        .ok_or(ModelError::NotEnoughData("no measurements"))?;
    let mut est = BallEstimator::new(*first, model.clone());
    for m in &measurements[1..] {
        est.predict();
        est.update(*m);
    }
    Ok(est.state)
}

/// Damped-Newton shooting: finds the launch velocity at `start` whose
/// trajectory passes through `target` (within 2 cm) when it crosses the
/// target's x-plane.  The initial x-velocity of `v_guess` is kept fixed.
pub fn inverse_launch(
    params: &PhysicsParams,
    table: &TableGeometry,
    start: Vector3<f64>,
    target: Vector3<f64>,
    v_guess: Vector3<f64>,
) -> Result<BallState, ModelError> {
    let miss = |vy: f64, vz: f64| -> Option<Vector3<f64>> {
        let mut s = BallState::new(start, Vector3::new(v_guess.x, vy, vz));
        let toward = (target.x - start.x).signum();
        for _ in 0..5000 {
            let prev = s;
            let (next, events) = step_ball(&s, 0.0, params, table);
            if !events.is_empty() {
                return None;
            }
            if (next.position.x - target.x) * toward >= 0.0 {
                let span = next.position.x - prev.position.x;
                let frac = if span.abs() < 1e-12 {
                    0.0
                } else {
                    (target.x - prev.position.x) / span
                };
                let cross = prev.position + (next.position - prev.position) * frac;
                return Some(cross - target);
            }
            s = next;
        }
        None
    };
    let mut vy = v_guess.y;
    let mut vz = v_guess.z;
    // The guess arc may clip the net or bounce short; scan nearby launch
    // angles for an event-free flight to start the Newton iteration from.
    if miss(vy, vz).is_none() {
        let mut found = false;
        for i in 1..=24 {
            let mag = 0.25 * ((i + 1) / 2) as f64;
            let off = if i % 2 == 1 { mag } else { -mag };
            if miss(vy, vz + off).is_some() {
                vz += off;
                found = true;
                break;
            }
        }
        if !found {
            return Err(ModelError::ShootingDiverged {
                best_miss: f64::INFINITY,
            });
        }
    }
    let mut best_miss = f64::INFINITY;
    let h = 1e-5;
    for _ in 0..60 {
        let m = match miss(vy, vz) {
            Some(m) => m,
            None => return Err(ModelError::ShootingDiverged { best_miss }),
        };
        let err = (m.y * m.y + m.z * m.z).sqrt();
        best_miss = best_miss.min(err);
        if err <= 0.02 {
            return Ok(BallState::new(start, Vector3::new(v_guess.x, vy, vz)));
        }
        let my = miss(vy + h, vz).ok_or(ModelError::ShootingDiverged { best_miss })?;
        let mz = miss(vy, vz + h).ok_or(ModelError::ShootingDiverged { best_miss })?;
        // 2x2 Jacobian of the (y, z) miss in (vy, vz).
        let j = [
            [(my.y - m.y) / h, (mz.y - m.y) / h],
            [(my.z - m.z) / h, (mz.z - m.z) / h],
        ];
        let lambda = 1e-6;
        let det = (j[0][0] * j[0][0] + j[1][0] * j[1][0] + lambda)
            * (j[0][1] * j[0][1] + j[1][1] * j[1][1] + lambda)
            - (j[0][0] * j[0][1] + j[1][0] * j[1][1]).powi(2);
        if det.abs() < 1e-15 {
            return Err(ModelError::ShootingDiverged { best_miss });
        }
        // Solve (J^T J + lambda I) d = J^T m.
        let jt_m = [
            j[0][0] * m.y + j[1][0] * m.z,
            j[0][1] * m.y + j[1][1] * m.z,
        ];
        let a11 = j[0][0] * j[0][0] + j[1][0] * j[1][0] + lambda;
        let a12 = j[0][0] * j[0][1] + j[1][0] * j[1][1];
        let a22 = j[0][1] * j[0][1] + j[1][1] * j[1][1] + lambda;
        let dy = (jt_m[0] * a22 - a12 * jt_m[1]) / det;
        let dz = (a11 * jt_m[1] - a12 * jt_m[0]) / det;
        vy -= dy.clamp(-2.0, 2.0);
        vz -= dz.clamp(-2.0, 2.0);
    }
    Err(ModelError::ShootingDiverged { best_miss })
}
