//! Per-joint, time-synchronized trajectory generation under motion
//! constraints.  Profiles are piecewise-constant-acceleration (trapezoidal
//! velocity) with nonzero boundary velocities, in minimum-time and
//! time-fixed modes.
//!
//! Jerk limits may be declared in [`MotionConstraints`] and are validated as
//! a diagnostic, but profile synthesis is acceleration-limited.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physics / control step for sampled setpoints.
pub const SETPOINT_DT: f64 = 1e-3;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointLimits {
    pub q_min: f64,
    pub q_max: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionConstraints {
    pub joints: Vec<JointLimits>,
}

impl MotionConstraints {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), TrajError> {
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.q_min < j.q_max) || j.v_max <= 0.0 || j.a_max <= 0.0 {
                return Err(TrajError::BadConstraints { joint: i });
            }
            if let Some(jm) = j.j_max {
                if jm <= 0.0 {
                    return Err(TrajError::BadConstraints { joint: i });
                }
            }
        }
        Ok(())
    }

    /// Checks that a boundary state is inside position and velocity limits.
    pub fn check_state(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<(), TrajError> {
        let tol = 1e-9;
        for (i, j) in self.joints.iter().enumerate() {
            if q[i] < j.q_min - tol || q[i] > j.q_max + tol || v[i].abs() > j.v_max + tol {
                return Err(TrajError::InfeasibleBoundary {
                    joint: i,
                    q: q[i],
                    v: v[i],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("joint {joint}: boundary state (q={q}, v={v}) violates limits")]
    InfeasibleBoundary { joint: usize, q: f64, v: f64 },
    #[error("joint {joint}: invalid motion constraints")]
    BadConstraints { joint: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query time {time} outside trajectory range [{start}, {end}]")]
    TimeOutOfRange { time: f64, start: f64, end: f64 },
}

/// One sampled trajectory point for all joints.
#[derive(Debug, Clone)]
pub struct Setpoint {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub a: DVector<f64>,
}

/// A time-sampled multi-joint trajectory.
#[derive(Debug, Clone)]
pub struct JointTrajectory {
    pub start_time: f64,
    pub dt: f64,
    pub setpoints: Vec<Setpoint>,
    pub feasible: bool,
    /// Joint state at the end of the sampled horizon (the commanded target
    /// when feasible, the clamped minimum-time query state otherwise).
    pub achieved_final: (DVector<f64>, DVector<f64>),
    pub duration: f64,
}

impl JointTrajectory {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }

    /// Empty zero-duration trajectory holding a state.
    pub fn hold(start_time: f64, q: DVector<f64>, v: DVector<f64>) -> Self {
        JointTrajectory {
            start_time,
            dt: SETPOINT_DT,
            setpoints: vec![Setpoint {
                q: q.clone(),
                v: v.clone(),
                a: DVector::zeros(q.len()),
            }],
            feasible: true,
            achieved_final: (q, v),
            duration: 0.0,
        }
    }
}

/// Closed-form piecewise-constant-acceleration profile for one joint.
#[derive(Debug, Clone)]
struct Profile {
    q0: f64,
    v0: f64,
    /// (duration, acceleration) segments.
    segs: Vec<(f64, f64)>,
}

impl Profile {
    fn duration(&self) -> f64 {
        self.segs.iter().map(|s| s.0).sum()
    }

    fn state_at(&self, t: f64) -> (f64, f64, f64) {
        let mut q = self.q0;
        let mut v = self.v0;
        let mut rem = t.max(0.0);
        for &(dur, a) in &self.segs {
            if rem <= dur {
                return (q + v * rem + 0.5 * a * rem * rem, v + a * rem, a);
            }
            q += v * dur + 0.5 * a * dur * dur;
            v += a * dur;
            rem -= dur;
        }
        (q, v, 0.0)
    }

}

/// Builds the time-optimal profile from (q0, v0) to (q1, v1).
fn min_time_profile(q0: f64, v0: f64, q1: f64, v1: f64, lim: &JointLimits) -> Profile {
    let d = q1 - q0;
    if d.abs() < EPS && (v1 - v0).abs() < EPS && v0.abs() < EPS {
        return Profile {
            q0,
            v0,
            segs: vec![],
        };
    }
    let a = lim.a_max;
    let mut best: Option<Profile> = None;
    for s in [1.0_f64, -1.0] {
        let vp_sq = (2.0 * s * a * d + v0 * v0 + v1 * v1) / 2.0;
        if vp_sq < -EPS {
            continue;
        }
        let vp = s * vp_sq.max(0.0).sqrt();
        let cand = if vp.abs() <= lim.v_max + EPS {
            let t1 = (vp - v0) / (s * a);
            let t2 = (vp - v1) / (s * a);
            if t1 < -1e-9 || t2 < -1e-9 {
                continue;
            }
            Profile {
                q0,
                v0,
                segs: vec![(t1.max(0.0), s * a), (t2.max(0.0), -s * a)],
            }
        } else {
            let vc = s * lim.v_max;
            let t1 = (vc - v0) / (s * a);
            let t3 = (vc - v1) / (s * a);
            if t1 < -1e-9 || t3 < -1e-9 {
                continue;
            }
            let d1 = (v0 + vc) / 2.0 * t1;
            let d3 = (vc + v1) / 2.0 * t3;
            let tc = (d - d1 - d3) / vc;
            if tc < -1e-9 {
                continue;
            }
            Profile {
                q0,
                v0,
                segs: vec![(t1.max(0.0), s * a), (tc.max(0.0), 0.0), (t3.max(0.0), -s * a)],
            }
        };
        match &best {
            Some(b) if b.duration() <= cand.duration() => {}
            _ => best = Some(cand),
        }
    }
    // Both boundary states are within limits, so at least one branch is valid.
    best.expect("no valid min-time branch for in-limit boundary states")
}

/// Duration of a profile that accelerates to cruise velocity `vc`, cruises,
/// and accelerates to `v1`.  Returns `None` when the cruise distance has the
/// wrong sign for `vc`.
fn stretched_duration(d: f64, v0: f64, v1: f64, a: f64, vc: f64) -> Option<(f64, f64, f64)> {
    if vc.abs() < EPS {
        return None;
    }
    let t1 = (vc - v0).abs() / a;
    let t3 = (v1 - vc).abs() / a;
    let d1 = (v0 + vc) / 2.0 * t1;
    let d3 = (vc + v1) / 2.0 * t3;
    let dc = d - d1 - d3;
    let tc = dc / vc;
    if tc < -1e-9 {
        return None;
    }
    Some((t1, tc.max(0.0), t3))
}

fn stretched_profile_at(q0: f64, v0: f64, v1: f64, a: f64, vc: f64, t1: f64, tc: f64, t3: f64) -> Profile {
    let a1 = if (vc - v0).abs() < EPS {
        0.0
    } else {
        a * (vc - v0).signum()
    };
    let a3 = if (v1 - vc).abs() < EPS {
        0.0
    } else {
        a * (v1 - vc).signum()
    };
    Profile {
        q0,
        v0,
        segs: vec![(t1, a1), (tc, 0.0), (t3, a3)],
    }
}

/// For a fixed cruise velocity, solves the acceleration magnitude that makes
/// the accelerate-cruise-accelerate profile take exactly time `t`.  Returns
/// the profile when the solution respects `a_max` and a nonnegative cruise.
fn profile_for_cruise(
    q0: f64,
    v0: f64,
    v1: f64,
    d: f64,
    t: f64,
    vc: f64,
    a_max: f64,
) -> Option<Profile> {
    let d1 = vc - v0;
    let d3 = v1 - vc;
    // d - vc*t = K / alpha with K = -((vc-v0)|vc-v0| + (vc-v1)|vc-v1|) / 2.
    let k = -(d1 * d1.abs() - d3 * d3.abs()) / 2.0;
    let num = d - vc * t;
    let alpha = if k.abs() < 1e-12 {
        if num.abs() < 1e-9 {
            // Any acceleration works; pick the largest allowed.
            a_max
        } else {
            return None;
        }
    } else {
        if num.abs() < 1e-15 {
            return None;
        }
        k / num
    };
    if !(alpha > 0.0) || alpha > a_max * (1.0 + 1e-9) {
        return None;
    }
    let alpha = alpha.min(a_max);
    let t1 = d1.abs() / alpha;
    let t3 = d3.abs() / alpha;
    let tc = t - t1 - t3;
    if tc < -1e-9 {
        return None;
    }
    let a1 = if d1.abs() < EPS { 0.0 } else { alpha * d1.signum() };
    let a3 = if d3.abs() < EPS { 0.0 } else { alpha * d3.signum() };
    Some(Profile {
        q0,
        v0,
        segs: vec![(t1, a1), (tc.max(0.0), 0.0), (t3, a3)],
    })
}

/// Builds a profile that reaches (q1, v1) exactly at time `t >= t_min`.
/// A grid over cruise velocities with the acceleration solved per candidate
/// covers the whole duration range; a bracket search at full acceleration
/// around the minimum-time peak covers durations just above the minimum,
/// where the feasible cruise interval is narrower than the grid.
///
/// The second return value reports exactness.  Some (q1, v1, t) with large
/// same-sign boundary velocities and a short displacement have no solution
/// at any acceleration (the reachable displacement interval at time `t`
/// excludes d); the fallback then runs the minimum-time profile and drifts
/// at v1 for the remaining time.
fn time_fixed_profile(
    q0: f64,
    v0: f64,
    q1: f64,
    v1: f64,
    lim: &JointLimits,
    t: f64,
) -> (Profile, bool) {
    let mt = min_time_profile(q0, v0, q1, v1, lim);
    let t_min = mt.duration();
    if (t - t_min).abs() <= 1e-9 {
        return (mt, true);
    }
    let d = q1 - q0;
    if d.abs() < EPS && v0.abs() < EPS && v1.abs() < EPS {
        // Dwell in place, no motion needed.
        return (
            Profile {
                q0,
                v0,
                segs: vec![(t, 0.0)],
            },
            true,
        );
    }
    let a = lim.a_max;
    // Cruise-velocity grid with per-candidate acceleration solve.
    let n_scan = 4000;
    for i in 0..=n_scan {
        let vc = -lim.v_max + 2.0 * lim.v_max * i as f64 / n_scan as f64;
        if let Some(p) = profile_for_cruise(q0, v0, v1, d, t, vc, a) {
            return (p, true);
        }
    }
    // Peak velocity of the min-time profile fixes the search branch.
    let peak = {
        let (_, v_after_first, _) = mt.state_at(mt.segs.first().map(|s| s.0).unwrap_or(0.0));
        if v_after_first.abs() < EPS {
            if d.abs() > EPS {
                d.signum() * 1e-6
            } else {
                -(v0 + v1).signum() * 1e-6
            }
        } else {
            v_after_first
        }
    };
    for branch_sign in [1.0_f64, -1.0] {
        let hi = branch_sign * peak;
        if hi.abs() < EPS || hi.abs() > lim.v_max + 1e-9 {
            continue;
        }
        // Scan cruise velocities geometrically toward zero to find a bracket
        // where the duration crosses t, then bisect.
        let mut prev: Option<(f64, f64)> = stretched_duration(d, v0, v1, a, hi)
            .map(|(t1, tc, t3)| (hi, t1 + tc + t3));
        let mut bracket = None;
        let mut vc = hi;
        for _ in 0..1200 {
            vc *= 0.97;
            if vc.abs() < 1e-12 {
                break;
            }
            match stretched_duration(d, v0, v1, a, vc) {
                Some((t1, tc, t3)) => {
                    let dur = t1 + tc + t3;
                    if let Some((pvc, pd)) = prev {
                        if (pd - t) * (dur - t) <= 0.0 {
                            bracket = Some((pvc, vc));
                            break;
                        }
                    }
                    prev = Some((vc, dur));
                }
                // Cruise infeasible at this vc; keep scanning toward zero.
                None => prev = None,
            }
        }
        if let Some((mut lo_vc, mut hi_vc)) = bracket {
            // lo_vc has duration <= t side not guaranteed; just bisect on sign.
            let f = |vc: f64| {
                stretched_duration(d, v0, v1, a, vc)
                    .map(|(t1, tc, t3)| t1 + tc + t3 - t)
            };
            for _ in 0..200 {
                let mid = 0.5 * (lo_vc + hi_vc);
                // An infeasible cruise cannot dwell, so its duration is short.
                let fm = f(mid).unwrap_or(-t);
                let fl = f(lo_vc).unwrap_or(-t);
                if (fl <= 0.0) == (fm <= 0.0) {
                    lo_vc = mid;
                } else {
                    hi_vc = mid;
                }
                if (hi_vc - lo_vc).abs() < 1e-14 {
                    break;
                }
            }
            let vc = 0.5 * (lo_vc + hi_vc);
            if let Some((t1, tc, t3)) = stretched_duration(d, v0, v1, a, vc) {
                if ((t1 + tc + t3) - t).abs() < 1e-6 {
                    return (stretched_profile_at(q0, v0, v1, a, vc, t1, tc, t3), true);
                }
            }
        }
    }
    // No exact profile exists: arrive at minimum time, then drift at v1.
    let mut segs = mt.segs.clone();
    segs.push(((t - t_min).max(0.0), 0.0));
    (
        Profile {
            q0: mt.q0,
            v0: mt.v0,
            segs,
        },
        false,
    )
}

fn check_dims(
    constraints: &MotionConstraints,
    vs: &[&DVector<f64>],
) -> Result<(), TrajError> {
    let n = constraints.dof();
    for v in vs {
        if v.len() != n {
            return Err(TrajError::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    Ok(())
}

fn sample_profiles(
    profiles: &[Profile],
    duration: f64,
    q_t: &DVector<f64>,
    v_t: &DVector<f64>,
    exact_final: bool,
) -> Vec<Setpoint> {
    let n = profiles.len();
    let steps = (duration / SETPOINT_DT).ceil() as usize;
    let mut pts = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = (i as f64 * SETPOINT_DT).min(duration);
        let mut q = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        let mut a = DVector::zeros(n);
        for (j, p) in profiles.iter().enumerate() {
            let (qj, vj, aj) = p.state_at(t);
            q[j] = qj;
            v[j] = vj;
            a[j] = aj;
        }
        pts.push(Setpoint { q, v, a });
    }
    if exact_final {
        if let Some(last) = pts.last_mut() {
            last.q = q_t.clone();
            last.v = v_t.clone();
        }
    }
    pts
}

/// Minimum-time plan: each joint runs a time-optimal profile, all joints
/// synchronized to the slowest joint's duration by time-stretching.
pub fn plan_min_time(
    q_s: &DVector<f64>,
    v_s: &DVector<f64>,
    q_t: &DVector<f64>,
    v_t: &DVector<f64>,
    constraints: &MotionConstraints,
) -> Result<JointTrajectory, TrajError> {
    check_dims(constraints, &[q_s, v_s, q_t, v_t])?;
    constraints.validate()?;
    constraints.check_state(q_s, v_s)?;
    constraints.check_state(q_t, v_t)?;
    let n = constraints.dof();
    let mut t_min = 0.0_f64;
    let mut minimal = Vec::with_capacity(n);
    for j in 0..n {
        let p = min_time_profile(q_s[j], v_s[j], q_t[j], v_t[j], &constraints.joints[j]);
        t_min = t_min.max(p.duration());
        minimal.push(p);
    }
    if t_min <= 0.0 {
        return Ok(JointTrajectory::hold(0.0, q_t.clone(), v_t.clone()));
    }
    let mut profiles = Vec::with_capacity(n);
    let mut exact = true;
    for (j, p) in minimal.into_iter().enumerate() {
        if (p.duration() - t_min).abs() <= 1e-9 {
            profiles.push(p);
        } else {
            let (sp, ex) = time_fixed_profile(
                q_s[j],
                v_s[j],
                q_t[j],
                v_t[j],
                &constraints.joints[j],
                t_min,
            );
            exact &= ex;
            profiles.push(sp);
        }
    }
    let setpoints = sample_profiles(&profiles, t_min, q_t, v_t, exact);
    let achieved = if exact {
        (q_t.clone(), v_t.clone())
    } else {
        let last = setpoints.last().expect("nonempty setpoints");
        (last.q.clone(), last.v.clone())
    };
    Ok(JointTrajectory {
        start_time: 0.0,
        dt: SETPOINT_DT,
        setpoints,
        feasible: exact,
        achieved_final: achieved,
        duration: t_min,
    })
}

/// Time-fixed plan: reach (q_t, v_t) exactly at time `t` when feasible.  If
/// `t` is below the minimum time, the minimum-time plan is computed instead,
/// truncated at `t`, and flagged infeasible; `achieved_final` reports the
/// state the joints can reach by `t`.
pub fn plan_time_fixed(
    t: f64,
    q_s: &DVector<f64>,
    v_s: &DVector<f64>,
    q_t: &DVector<f64>,
    v_t: &DVector<f64>,
    constraints: &MotionConstraints,
) -> Result<JointTrajectory, TrajError> {
    check_dims(constraints, &[q_s, v_s, q_t, v_t])?;
    constraints.validate()?;
    constraints.check_state(q_s, v_s)?;
    constraints.check_state(q_t, v_t)?;
    let n = constraints.dof();
    let mut t_min = 0.0_f64;
    let mut minimal = Vec::with_capacity(n);
    for j in 0..n {
        let p = min_time_profile(q_s[j], v_s[j], q_t[j], v_t[j], &constraints.joints[j]);
        t_min = t_min.max(p.duration());
        minimal.push(p);
    }
    if t + 1e-9 < t_min {
        // Target time unreachable: clamp to the minimum-time plan sampled at t.
        let full = plan_min_time(q_s, v_s, q_t, v_t, constraints)?;
        let steps = (t / SETPOINT_DT).floor() as usize;
        let pts: Vec<Setpoint> = full
            .setpoints
            .iter()
            .take(steps + 1)
            .cloned()
            .collect();
        let achieved = pts
            .last()
            .map(|s| (s.q.clone(), s.v.clone()))
            .unwrap_or((q_s.clone(), v_s.clone()));
        return Ok(JointTrajectory {
            start_time: 0.0,
            dt: SETPOINT_DT,
            setpoints: pts,
            feasible: false,
            achieved_final: achieved,
            duration: t,
        });
    }
    let mut profiles = Vec::with_capacity(n);
    let mut exact = true;
    for (j, p) in minimal.into_iter().enumerate() {
        if (p.duration() - t).abs() <= 1e-9 {
            profiles.push(p);
        } else {
            let (sp, ex) =
                time_fixed_profile(q_s[j], v_s[j], q_t[j], v_t[j], &constraints.joints[j], t);
            exact &= ex;
            profiles.push(sp);
        }
    }
    let setpoints = sample_profiles(&profiles, t, q_t, v_t, exact);
    let achieved = if exact {
        (q_t.clone(), v_t.clone())
    } else {
        let last = setpoints.last().expect("nonempty setpoints");
        (last.q.clone(), last.v.clone())
    };
    Ok(JointTrajectory {
        start_time: 0.0,
        dt: SETPOINT_DT,
        setpoints,
        feasible: exact,
        achieved_final: achieved,
        duration: t,
    })
}

/// Linear interpolation between 1 ms setpoints.
pub fn query_state_at(
    traj: &JointTrajectory,
    time: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), TrajError> {
    let rel = time - traj.start_time;
    if rel < -1e-9 || rel > traj.duration + 1e-9 {
        return Err(TrajError::TimeOutOfRange {
            time,
            start: traj.start_time,
            end: traj.end_time(),
        });
    }
    if traj.setpoints.is_empty() {
        return Err(TrajError::TimeOutOfRange {
            time,
            start: traj.start_time,
            end: traj.end_time(),
        });
    }
    let rel = rel.clamp(0.0, traj.duration);
    let idx = (rel / traj.dt).floor() as usize;
    if idx + 1 >= traj.setpoints.len() {
        let last = traj.setpoints.last().unwrap();
        return Ok((last.q.clone(), last.v.clone(), last.a.clone()));
    }
    let frac = (rel - idx as f64 * traj.dt) / traj.dt;
    let a = &traj.setpoints[idx];
    let b = &traj.setpoints[idx + 1];
    Ok((
        &a.q * (1.0 - frac) + &b.q * frac,
        &a.v * (1.0 - frac) + &b.v * frac,
        &a.a * (1.0 - frac) + &b.a * frac,
    ))
}
