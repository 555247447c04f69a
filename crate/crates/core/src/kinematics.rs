//! Robot-space geometry: kinematic chain model, forward kinematics, the
//! geometric Jacobian, damped-least-squares inverse kinematics with a
//! null-space bias toward canonical rest poses, and resolution of a paddle
//! surface normal into a full orientation.

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajopt::{JointLimits, MotionConstraints};

/// Paddle face normal in the paddle's local frame.
pub const PADDLE_REF_NORMAL: Vector3<f64> = Vector3::new(1.0, 0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointKind {
    Prismatic,
    Revolute,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub kind: JointKind,
    pub axis: Unit<Vector3<f64>>,
    /// Fixed transform from the previous joint frame to this joint frame.
    pub origin: Isometry3<f64>,
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    pub joints: Vec<Joint>,
    /// Rigid transform from the last link frame to the paddle face center.
    pub paddle_offset: Isometry3<f64>,
    pub limits: MotionConstraints,
    pub rest_pose_forehand: DVector<f64>,
    pub rest_pose_backhand: DVector<f64>,
}

/// Paddle face pose in the world frame.
#[derive(Debug, Clone)]
pub struct PaddlePose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl PaddlePose {
    pub fn normal(&self) -> Vector3<f64> {
        self.orientation * PADDLE_REF_NORMAL
    }
}

#[derive(Debug, Error)]
pub enum KinError {
    #[error("joint vector has {got} entries, model has {expected} joints")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("IK did not converge: position residual {position_residual} m, normal residual {normal_residual} rad")]
    NotConverged {
        position_residual: f64,
        normal_residual: f64,
        best: DVector<f64>,
    },
    #[error("invalid robot model: {0}")]
    BadModel(String),
}

/// Inverse-kinematics target: full pose or position only.
#[derive(Debug, Clone)]
pub enum IkTarget {
    Pose(PaddlePose),
    Position(Vector3<f64>),
}

/// Damped-least-squares IK parameters.
#[derive(Debug, Clone, Copy)]
pub struct IkParams {
    pub damping: f64,
    pub null_space_gain: f64,
    pub max_iterations: usize,
    pub step_clamp: f64,
    pub position_tol: f64,
    pub normal_tol: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        IkParams {
            damping: 0.05,
            null_space_gain: 0.1,
            max_iterations: 200,
            step_clamp: 0.2,
            position_tol: 1e-4,
            normal_tol: 1e-3,
        }
    }
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), KinError> {
        if self.joints.is_empty() {
            return Err(KinError::BadModel("no joints".into()));
        }
        if self.rest_pose_forehand.len() != self.dof() || self.rest_pose_backhand.len() != self.dof()
        {
            return Err(KinError::BadModel("rest pose dimension mismatch".into()));
        }
        if self.limits.dof() != self.dof() {
            return Err(KinError::BadModel("limits dimension mismatch".into()));
        }
        for rest in [&self.rest_pose_forehand, &self.rest_pose_backhand] {
            for (i, lim) in self.limits.joints.iter().enumerate() {
                if rest[i] < lim.q_min || rest[i] > lim.q_max {
                    return Err(KinError::BadModel(format!(
                        "rest pose joint {} value {} outside [{}, {}]",
                        i, rest[i], lim.q_min, lim.q_max
                    )));
                }
            }
        }
        // Forehand convention: positive x component of the paddle normal.
        let fh = forward_kinematics(self, &self.rest_pose_forehand)?;
        let bh = forward_kinematics(self, &self.rest_pose_backhand)?;
        if fh.normal().x <= 0.0 || bh.normal().x >= 0.0 {
            return Err(KinError::BadModel(
                "rest poses violate forehand/backhand normal sign convention".into(),
            ));
        }
        Ok(())
    }

    pub fn rest_pose(&self, forehand: bool) -> &DVector<f64> {
        if forehand {
            &self.rest_pose_forehand
        } else {
            &self.rest_pose_backhand
        }
    }

    /// The default six-joint assembly: a prismatic rail along world y
    /// followed by a five-revolute arm, base at (-1.8, 0, 0.76).  Link
    /// dimensions are nominal configuration, not ground truth.
    pub fn default_assembly() -> RobotModel {
        let z = |d: f64| Isometry3::from_parts(Translation3::new(0.0, 0.0, d), UnitQuaternion::identity());
        let joints = vec![
            Joint {
                kind: JointKind::Prismatic,
                axis: Unit::new_normalize(Vector3::y()),
                origin: Isometry3::from_parts(
                    Translation3::new(-1.8, 0.0, 0.76),
                    UnitQuaternion::identity(),
                ),
            },
            Joint {
                kind: JointKind::Revolute,
                axis: Unit::new_normalize(Vector3::z()),
                origin: z(0.14),
            },
            Joint {
                kind: JointKind::Revolute,
                axis: Unit::new_normalize(Vector3::y()),
                origin: z(0.30),
            },
            Joint {
                kind: JointKind::Revolute,
                axis: Unit::new_normalize(Vector3::y()),
                origin: z(0.30),
            },
            Joint {
                kind: JointKind::Revolute,
                axis: Unit::new_normalize(Vector3::y()),
                origin: z(0.12),
            },
            Joint {
                kind: JointKind::Revolute,
                axis: Unit::new_normalize(Vector3::x()),
                origin: z(0.06),
            },
        ];
        let limits = MotionConstraints {
            joints: vec![
                JointLimits {
                    q_min: -1.0,
                    q_max: 1.0,
                    v_max: 2.0,
                    a_max: 10.0,
                    j_max: None,
                },
                JointLimits {
                    q_min: -3.5,
                    q_max: 3.5,
                    v_max: 8.0,
                    a_max: 60.0,
                    j_max: None,
                },
                JointLimits {
                    q_min: -3.5,
                    q_max: 3.5,
                    v_max: 8.0,
                    a_max: 60.0,
                    j_max: None,
                },
                JointLimits {
                    q_min: -3.5,
                    q_max: 3.5,
                    v_max: 8.0,
                    a_max: 60.0,
                    j_max: None,
                },
                JointLimits {
                    q_min: -3.5,
                    q_max: 3.5,
                    v_max: 8.0,
                    a_max: 60.0,
                    j_max: None,
                },
                JointLimits {
                    q_min: -3.5,
                    q_max: 3.5,
                    v_max: 8.0,
                    a_max: 60.0,
                    j_max: None,
                },
            ],
        };
        RobotModel {
            joints,
            paddle_offset: z(0.10),
            limits,
            rest_pose_forehand: DVector::from_row_slice(&[0.0, 0.0, 3.0, -2.6, -0.6, 0.0]),
            rest_pose_backhand: DVector::from_row_slice(&[0.0, 0.0, 3.0, -2.6, 2.94, 0.0]),
        }
    }
}

fn joint_motion(joint: &Joint, q: f64) -> Isometry3<f64> {
    match joint.kind {
        JointKind::Prismatic => Isometry3::from_parts(
            Translation3::from(joint.axis.into_inner() * q),
            UnitQuaternion::identity(),
        ),
        JointKind::Revolute => Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_axis_angle(&joint.axis, q),
        ),
    }
}

fn check_dim(model: &RobotModel, q: &DVector<f64>) -> Result<(), KinError> {
    if q.len() != model.dof() {
        return Err(KinError::DimensionMismatch {
            expected: model.dof(),
            got: q.len(),
        });
    }
    Ok(())
}

/// Paddle face pose in the world frame for joint values `q`.
pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Result<PaddlePose, KinError> {
    check_dim(model, q)?;
    let mut iso = Isometry3::identity();
    for (i, joint) in model.joints.iter().enumerate() {
        iso *= joint.origin * joint_motion(joint, q[i]);
    }
    iso *= model.paddle_offset;
    Ok(PaddlePose {
        position: iso.translation.vector,
        orientation: UnitQuaternion::new_normalize(iso.rotation.into_inner()),
    })
}

/// Geometric Jacobian (rows: paddle linear velocity xyz, angular velocity
/// xyz); column j is the paddle twist per unit joint-j velocity.
pub fn jacobian(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>, KinError> {
    check_dim(model, q)?;
    let n = model.dof();
    let mut anchors = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    let mut iso = Isometry3::identity();
    for (i, joint) in model.joints.iter().enumerate() {
        iso *= joint.origin;
        anchors.push(iso.translation.vector);
        axes.push(iso.rotation * joint.axis.into_inner());
        iso *= joint_motion(joint, q[i]);
    }
    let end = (iso * model.paddle_offset).translation.vector;
    let mut j = DMatrix::zeros(6, n);
    for (i, joint) in model.joints.iter().enumerate() {
        let (lin, ang) = match joint.kind {
            JointKind::Prismatic => (axes[i], Vector3::zeros()),
            JointKind::Revolute => (axes[i].cross(&(end - anchors[i])), axes[i]),
        };
        j[(0, i)] = lin.x;
        j[(1, i)] = lin.y;
        j[(2, i)] = lin.z;
        j[(3, i)] = ang.x;
        j[(4, i)] = ang.y;
        j[(5, i)] = ang.z;
    }
    Ok(j)
}

/// Moore-Penrose pseudo-inverse with singular values below `cutoff` zeroed.
pub fn pseudo_inverse(m: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        sinv[(i, i)] = if *s > cutoff { 1.0 / s } else { 0.0 };
    }
    vt.transpose() * sinv * u.transpose()
}

/// q̇ = J⁺ · twist (minimum-norm least-squares solution).
pub fn joint_velocities_for_twist(j: &DMatrix<f64>, twist: &DVector<f64>) -> DVector<f64> {
    pseudo_inverse(j, 1e-8) * twist
}

/// Damped weighted twist resolution: linear-velocity rows are matched
/// closely while angular rows are soft (weight < 1), and the damping keeps
/// joint velocities bounded near singular configurations at the price of a
/// small twist error.
pub fn joint_velocities_for_twist_damped(
    j: &DMatrix<f64>,
    twist: &DVector<f64>,
    angular_weight: f64,
    damping: f64,
) -> DVector<f64> {
    let n = j.ncols();
    let mut jw = j.clone();
    let mut tw = twist.clone();
    for r in 3..j.nrows().min(6) {
        for c in 0..n {
            jw[(r, c)] *= angular_weight;
        }
        tw[r] *= angular_weight;
    }
    let a = jw.transpose() * &jw + DMatrix::identity(n, n) * damping * damping;
    let b = jw.transpose() * tw;
    a.lu().solve(&b).unwrap_or_else(|| DVector::zeros(n))
}

fn rotation_error(current: &UnitQuaternion<f64>, target: &UnitQuaternion<f64>) -> Vector3<f64> {
    let delta = target * current.inverse();
    delta.scaled_axis()
}

pub fn clamp_to_limits(model: &RobotModel, q: &mut DVector<f64>) {
    for (i, lim) in model.limits.joints.iter().enumerate() {
        q[i] = q[i].clamp(lim.q_min, lim.q_max);
    }
}

/// Iterative damped-least-squares inverse kinematics.  The null-space term
/// biases solutions toward the seed pose (the canonical rest pose for IK_c).
pub fn inverse_kinematics(
    model: &RobotModel,
    target: &IkTarget,
    seed: &DVector<f64>,
    params: &IkParams,
) -> Result<DVector<f64>, KinError> {
    check_dim(model, seed)?;
    let mut q = seed.clone();
    let n = model.dof();
    let mut best_q = q.clone();
    let mut best_res = f64::INFINITY;
    for _ in 0..params.max_iterations {
        let pose = forward_kinematics(model, &q)?;
        let (err, jac): (DVector<f64>, DMatrix<f64>) = match target {
            IkTarget::Position(p) => {
                let e = p - pose.position;
                let full = jacobian(model, &q)?;
                (DVector::from_row_slice(&[e.x, e.y, e.z]), full.rows(0, 3).into_owned())
            }
            IkTarget::Pose(t) => {
                let ep = t.position - pose.position;
                let er = rotation_error(&pose.orientation, &t.orientation);
                (
                    DVector::from_row_slice(&[ep.x, ep.y, ep.z, er.x, er.y, er.z]),
                    jacobian(model, &q)?,
                )
            }
        };
        let pos_res = err.rows(0, 3).norm();
        let rot_res = match target {
            IkTarget::Position(_) => 0.0,
            IkTarget::Pose(t) => {
                let n_cur = pose.normal();
                let n_tgt = t.normal();
                n_cur.dot(&n_tgt).clamp(-1.0, 1.0).acos()
            }
        };
        let total = pos_res + rot_res;
        if total < best_res {
            best_res = total;
            best_q = q.clone();
        }
        if pos_res <= params.position_tol && rot_res <= params.normal_tol {
            return Ok(q);
        }
        let m = jac.nrows();
        // Error-adaptive damping: full damping far away, near-Newton close in
        // so near-singular poses still contract below tolerance.
        let lambda = params.damping * (pos_res / 0.05).clamp(0.02, 1.0);
        let jjt = &jac * jac.transpose() + DMatrix::identity(m, m) * (lambda * lambda);
        let lambda_inv = jjt
            .lu()
            .solve(&err)
            .unwrap_or_else(|| DVector::zeros(m));
        let mut dq = jac.transpose() * lambda_inv;
        // Null-space bias toward the seed pose; dropped near convergence so
        // its second-order coupling cannot hold the residual above tolerance.
        if pos_res > 10.0 * params.position_tol {
            let jp = pseudo_inverse(&jac, 1e-8);
            let null_proj = DMatrix::identity(n, n) - &jp * &jac;
            dq += null_proj * (seed - &q) * params.null_space_gain;
        }
        for v in dq.iter_mut() {
            *v = v.clamp(-params.step_clamp, params.step_clamp);
        }
        q += dq;
        clamp_to_limits(model, &mut q);
    }
    // Report the best residual seen, not the last iterate's.
    let pose = forward_kinematics(model, &best_q)?;
    let pos_res = match target {
        IkTarget::Position(p) => (p - pose.position).norm(),
        IkTarget::Pose(t) => (t.position - pose.position).norm(),
    };
    let rot_res = match target {
        IkTarget::Position(_) => 0.0,
        IkTarget::Pose(t) => pose.normal().dot(&t.normal()).clamp(-1.0, 1.0).acos(),
    };
    if pos_res <= params.position_tol && rot_res <= params.normal_tol {
        return Ok(best_q);
    }
    Err(KinError::NotConverged {
        position_residual: pos_res,
        normal_residual: rot_res,
        best: best_q,
    })
}

/// Position-only IK that retries from seeded random perturbations of the
/// seed pose: the descent can stall against a joint limit from an unlucky
/// seed, and the fixed retry stream keeps the call deterministic.
pub fn position_ik_with_restarts(
    model: &RobotModel,
    position: &Vector3<f64>,
    seed: &DVector<f64>,
    params: &IkParams,
) -> Result<DVector<f64>, KinError> {
    let mut q = inverse_kinematics(model, &IkTarget::Position(*position), seed, params);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6f72_6965_6e74);
    for _ in 0..20 {
        if q.is_ok() {
            break;
        }
        let mut alt = seed.clone();
        for v in alt.iter_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        clamp_to_limits(model, &mut alt);
        q = inverse_kinematics(model, &IkTarget::Position(*position), &alt, params);
    }
    q
}

/// Resolves a requested paddle position + surface normal into a full pose:
/// position-only IK from the canonical rest pose, forward kinematics to read
/// the intermediate normal, then the minimum rotation aligning it with the
/// requested normal applied to the intermediate orientation.
pub fn orientation_from_normal(
    model: &RobotModel,
    position: &Vector3<f64>,
    normal: &Vector3<f64>,
    params: &IkParams,
) -> Result<PaddlePose, KinError> {
    let n_req = Unit::new_normalize(*normal);
    let seed = model.rest_pose(n_req.x >= 0.0);
    let q_l = position_ik_with_restarts(model, position, seed, params)?;
    let pose_l = forward_kinematics(model, &q_l)?;
    let n_int = Unit::new_normalize(pose_l.normal());
    let phi = UnitQuaternion::rotation_between_axis(&n_int, &n_req).unwrap_or_else(|| {
        // Antiparallel normals: rotate half a turn about any orthogonal axis.
        let ortho = Unit::new_normalize(if n_int.x.abs() < 0.9 {
            n_int.cross(&Vector3::x())
        } else {
            n_int.cross(&Vector3::y())
        });
        UnitQuaternion::from_axis_angle(&ortho, std::f64::consts::PI)
    });
    Ok(PaddlePose {
        position: *position,
        orientation: UnitQuaternion::new_normalize((phi * pose_l.orientation).into_inner()),
    })
}
