//! Demonstration generation: free-paddle strikes built by inverting the
//! contact law toward sampled landing targets, and robot strikes executed
//! with fixed joint velocities against inverse-launched balls.

use nalgebra::{DVector, UnitQuaternion, Vector3};
use rand::Rng;

use crate::config::Config;
use crate::kinematics::{forward_kinematics, jacobian, RobotModel};
use crate::logfmt::{LogMeta, LogSample, PaddleRecord, TrajectoryLog};
use crate::models::{inverse_launch, StrikeSample};
use crate::physics::{
    launch_ball, paddle_contact, step_ball, BallState, CollisionEvent, CollisionKind, PaddleState,
    Side, World, PHYSICS_DT,
};

/// Inverts the paddle contact law: paddle normal and linear velocity that
/// turn an incoming ball velocity into a requested outgoing one.  The
/// normal is taken along the velocity change, which keeps the required
/// paddle speed small.
pub fn invert_contact(
    v_in: &Vector3<f64>,
    v_out: &Vector3<f64>,
    restitution: f64,
    tangential_retention: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let dv = v_out - v_in;
    let n = if dv.norm() < 1e-9 {
        Vector3::x()
    } else {
        dv.normalize()
    };
    let vn_in = v_in.dot(&n);
    let vn_out = v_out.dot(&n);
    let w_n = (vn_out + restitution * vn_in) / (1.0 + restitution);
    let vt_in = v_in - n * vn_in;
    let vt_out = v_out - n * vn_out;
    let w_t = (vt_out - vt_in * tangential_retention) / (1.0 - tangential_retention);
    (n, n * w_n + w_t)
}

/// As [`invert_contact`] with the contact normal chosen by the caller: any
/// unit normal with a positive component along the velocity change gives an
/// exact inversion, trading normal against tangential paddle motion.
pub fn invert_contact_for_normal(
    v_in: &Vector3<f64>,
    v_out: &Vector3<f64>,
    n: &Vector3<f64>,
    restitution: f64,
    tangential_retention: f64,
) -> Vector3<f64> {
    let vn_in = v_in.dot(n);
    let vn_out = v_out.dot(n);
    let w_n = (vn_out + restitution * vn_in) / (1.0 + restitution);
    let vt_in = v_in - n * vn_in;
    let vt_out = v_out - n * vn_out;
    let w_t = (vt_out - vt_in * tangential_retention) / (1.0 - tangential_retention);
    n * w_n + w_t
}

fn jitter_normal<R: Rng>(n: &Vector3<f64>, magnitude: f64, rng: &mut R) -> Vector3<f64> {
    if magnitude <= 0.0 {
        return *n;
    }
    let axis = loop {
        let a = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if a.norm() > 1e-6 {
            break nalgebra::Unit::new_normalize(a);
        }
    };
    let angle = rng.gen_range(-magnitude..magnitude);
    UnitQuaternion::from_axis_angle(&axis, angle) * n
}

fn jitter_vector<R: Rng>(v: &Vector3<f64>, magnitude: f64, rng: &mut R) -> Vector3<f64> {
    if magnitude <= 0.0 {
        return *v;
    }
    v + Vector3::new(
        rng.gen_range(-magnitude..magnitude),
        rng.gen_range(-magnitude..magnitude),
        rng.gen_range(-magnitude..magnitude),
    )
}

/// Contact-law inversion with the normal chosen for the arm.  The
/// inversion is exact for a whole family of normals (any unit vector with
/// a positive component along the velocity change); tilting the normal in
/// its vertical plane shifts paddle motion from the weak vertical axis
/// onto the stronger horizontal ones.  Returns the capability-cheapest
/// (normal, contact velocity) pair.
pub fn capability_invert(
    v_in: &Vector3<f64>,
    v_out: &Vector3<f64>,
    restitution: f64,
    tangential_retention: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let (n, w) = invert_contact(v_in, v_out, restitution, tangential_retention);
    let cap_cost = |w: &Vector3<f64>| w.z.abs().max(w.x.abs() / 2.0).max(w.y.abs() / 1.5);
    let axis = n.cross(&Vector3::z());
    let mut best = (n, w, cap_cost(&w));
    if axis.norm() > 1e-6 {
        let axis = nalgebra::Unit::new_normalize(axis);
        let dv = v_out - v_in;
        for i in 1..=30 {
            let theta = 0.05 * ((i + 1) / 2) as f64 * if i % 2 == 1 { 1.0 } else { -1.0 };
            let cand = nalgebra::UnitQuaternion::from_axis_angle(&axis, theta) * n;
            if dv.dot(&cand) <= 0.2 {
                continue;
            }
            let w_c = invert_contact_for_normal(v_in, v_out, &cand, restitution, tangential_retention);
            let c = cap_cost(&w_c);
            if c < best.2 {
                best = (cand, w_c, c);
            }
        }
    }
    (best.0, best.1)
}

/// Generates `cfg.demogen.count` free-paddle strike episodes.  Each episode
/// launches a ball, lets it bounce on the learner half, strikes it on the
/// x = -1.65 plane with a paddle solved from the contact-law inversion
/// toward a random opponent-side target, and records the full 1 kHz log
/// with the paddle parameters attached at the contact sample.
pub fn free_paddle_strikes<R: Rng>(cfg: &Config, rng: &mut R) -> Vec<TrajectoryLog> {
    let params = &cfg.physics;
    let table = &cfg.table;
    let strike_x = -1.65;
    let mut logs = Vec::with_capacity(cfg.demogen.count);
    let mut attempts = 0usize;
    let budget = cfg.demogen.count.max(1) * 50;
    while logs.len() < cfg.demogen.count && attempts < budget {
        attempts += 1;
        let launch = &cfg.launcher;
        let ball0 = match launch_ball(
            &launch.pos_low,
            &launch.pos_high,
            &launch.vel_low,
            &launch.vel_high,
            params,
            table,
            rng,
        ) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let mut log = TrajectoryLog {
            meta: LogMeta {
                seed: rng.gen(),
                label: "free-paddle".into(),
            },
            ..Default::default()
        };
        let mut s = ball0;
        let mut t = 0.0;
        let mut bounced = false;
        let mut contact: Option<BallState> = None;
        for _ in 0..3000 {
            log.samples.push(LogSample {
                t,
                ball: s,
                paddle: None,
            });
            let (next, events) = step_ball(&s, t, params, table);
            for e in &events {
                if matches!(e.kind, CollisionKind::TableSide(Side::Learner)) {
                    bounced = true;
                }
                if matches!(e.kind, CollisionKind::Net | CollisionKind::Floor) {
                    bounced = false;
                    contact = None;
                }
            }
            log.events.extend(events);
            if bounced && next.position.x <= strike_x && next.velocity.x < 0.0 {
                contact = Some(next);
                t += PHYSICS_DT;
                break;
            }
            s = next;
            t += PHYSICS_DT;
        }
        let contact = match contact {
            Some(c) if c.position.z > table.landing_z() + 0.05 => c,
            _ => continue,
        };
        // Aim the outgoing flight at a random opponent-side target just
        // above the landing plane.
        let target = Vector3::new(
            rng.gen_range(0.3..1.2),
            rng.gen_range(-0.6..0.6),
            table.landing_z() + 0.04,
        );
        let out_vx = rng.gen_range(2.5..4.5);
        let guess = Vector3::new(out_vx, 0.0, 1.5);
        let v_out =
            match inverse_launch(params, table, contact.position, target, guess) {
                Ok(b) => b.velocity,
                Err(_) => continue,
            };
        // Plain inversion (normal along the velocity change) keeps the
        // labels a smooth function of ball and target, which the landing
        // regressors can learn; the striking policies re-express the
        // suggestion through an arm-friendly equivalent normal at use.
        let (n, w) = invert_contact(
            &contact.velocity,
            &v_out,
            params.paddle_restitution,
            params.paddle_tangential_retention,
        );
        let record = PaddleRecord {
            position: contact.position,
            normal: jitter_normal(&n, cfg.demogen.normal_jitter, rng),
            linear_velocity: jitter_vector(&w, cfg.demogen.velocity_jitter, rng),
            angular_velocity: Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ),
        };
        let strike = StrikeSample {
            ball: contact,
            paddle: record.clone(),
        };
        let struck = match paddle_contact(&strike.ball, &strike.paddle_state(), params, table) {
            Ok(b) => b,
            Err(_) => continue,
        };
        log.samples.push(LogSample {
            t,
            ball: contact,
            paddle: Some(record),
        });
        log.events.push(CollisionEvent {
            kind: CollisionKind::Paddle(Side::Learner),
            time: t,
            ball: struck,
        });
        // Follow the outgoing flight down to the landing plane.
        let mut s = struck;
        t += PHYSICS_DT;
        for _ in 0..2000 {
            log.samples.push(LogSample {
                t,
                ball: s,
                paddle: None,
            });
            let (next, events) = step_ball(&s, t, params, table);
            let done = !events.is_empty() || next.position.z < table.landing_z();
            log.events.extend(events);
            s = next;
            t += PHYSICS_DT;
            if done {
                break;
            }
        }
        logs.push(log);
    }
    logs
}

/// Extracts the pre-contact strike samples (ball plus paddle parameters)
/// recorded in demonstration logs.
pub fn strikes_from_logs(logs: &[TrajectoryLog]) -> Vec<StrikeSample> {
    let mut out = Vec::new();
    for log in logs {
        for sample in &log.samples {
            if let Some(p) = &sample.paddle {
                out.push(StrikeSample {
                    ball: sample.ball,
                    paddle: p.clone(),
                });
            }
        }
    }
    out
}

/// Generates robot strike episodes: the launcher is inverted to deliver the
/// ball to where a fixed-joint-velocity swing will put the paddle, and the
/// swept world contact does the rest.  Episodes without a paddle contact
/// are discarded.
pub fn robot_strikes<R: Rng>(
    cfg: &Config,
    model: &RobotModel,
    count: usize,
    rng: &mut R,
) -> Vec<TrajectoryLog> {
    let params = &cfg.physics;
    let table = &cfg.table;
    let swing_duration = 0.15;
    let rest = model.rest_pose_forehand.clone();
    let mut logs = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let budget = count.max(1) * 60;
    while logs.len() < count && attempts < budget {
        attempts += 1;
        // A forward swing: mostly shoulder/elbow pitch plus a little yaw
        // and rail travel.
        let mut qdot = DVector::zeros(model.dof());
        qdot[0] = rng.gen_range(-0.3..0.3);
        qdot[1] = rng.gen_range(-0.5..0.5);
        qdot[2] = rng.gen_range(-2.0..-0.5);
        qdot[3] = rng.gen_range(0.5..2.0);
        qdot[4] = rng.gen_range(-0.5..0.5);
        let q_strike = {
            let mut q = &rest + &qdot * swing_duration;
            crate::kinematics::clamp_to_limits(model, &mut q);
            q
        };
        let strike_pose = match forward_kinematics(model, &q_strike) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let target = strike_pose.position;
        if target.z < table.landing_z() + 0.1 || target.y.abs() > 0.6 || target.x > -1.4 {
            continue;
        }
        let start = Vector3::new(
            rng.gen_range(cfg.launcher.pos_low.x..cfg.launcher.pos_high.x),
            rng.gen_range(cfg.launcher.pos_low.y..cfg.launcher.pos_high.y),
            rng.gen_range(cfg.launcher.pos_low.z..cfg.launcher.pos_high.z),
        );
        let guess = Vector3::new(rng.gen_range(-6.0..-5.0), 0.0, 1.0);
        let ball0 = match inverse_launch(params, table, start, target, guess) {
            Ok(b) => b,
            Err(_) => continue,
        };
        // Predicted arrival at the strike plane fixes the swing schedule.
        let mut probe = ball0;
        let mut t_arrive = None;
        for i in 0..3000 {
            let (next, events) = step_ball(&probe, 0.0, params, table);
            if !events.is_empty() {
                break;
            }
            if next.position.x <= target.x {
                t_arrive = Some(i as f64 * PHYSICS_DT);
                break;
            }
            probe = next;
        }
        let t_arrive = match t_arrive {
            Some(t) => t,
            None => continue,
        };
        let t_swing = t_arrive - swing_duration;
        if t_swing < 0.0 {
            continue;
        }
        let mut world = World::new(params.clone(), table.clone());
        world.ball = ball0;
        let mut log = TrajectoryLog {
            meta: LogMeta {
                seed: rng.gen(),
                label: "robot-strike".into(),
            },
            ..Default::default()
        };
        let mut hit = false;
        let mut settle = 0usize;
        for _ in 0..3000 {
            let t = world.time;
            let phase = ((t - t_swing) / 1.0).clamp(0.0, swing_duration + 0.05);
            let q = {
                let mut q = &rest + &qdot * phase;
                crate::kinematics::clamp_to_limits(model, &mut q);
                q
            };
            let (pose, jac) = match (forward_kinematics(model, &q), jacobian(model, &q)) {
                (Ok(p), Ok(j)) => (p, j),
                _ => break,
            };
            let swinging = t >= t_swing && phase < swing_duration + 0.05;
            let twist = if swinging { &jac * &qdot } else { DVector::zeros(6) };
            let paddle = PaddleState {
                pose: pose.clone(),
                linear_velocity: Vector3::new(twist[0], twist[1], twist[2]),
                angular_velocity: Vector3::new(twist[3], twist[4], twist[5]),
            };
            world.paddles[World::side_index(Side::Learner)] = Some(paddle.clone());
            log.samples.push(LogSample {
                t,
                ball: world.ball,
                paddle: Some(PaddleRecord {
                    position: paddle.pose.position,
                    normal: paddle.pose.normal(),
                    linear_velocity: paddle.linear_velocity,
                    angular_velocity: paddle.angular_velocity,
                }),
            });
            let events = world.step_physics();
            for e in &events {
                if matches!(e.kind, CollisionKind::Paddle(Side::Learner)) {
                    hit = true;
                }
            }
            log.events.extend(events);
            if hit {
                settle += 1;
                if settle > 800 || world.ball.position.z < table.landing_z() {
                    break;
                }
            }
        }
        if hit {
            logs.push(log);
        }
    }
    logs
}
