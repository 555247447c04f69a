//! Top-level game play: the exchange-level environment, cooperative and
//! adversarial rewards, CEM / ARS / PPO trainers, frozen-opponent
//! self-play, and the model-free baselines.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ArsConfig, PpoConfig, SelfPlayConfig};
use crate::kinematics::{IkParams, RobotModel};
use crate::learnsub::{Adam, Mlp};
use crate::logfmt::PaddleRecord;
use crate::models::BallFlightModel;
use crate::physics::{
    launch_ball, paddle_contact, paddle_pose_from_normal, step_ball, BallState, CollisionKind,
    LauncherRanges, PaddleState, PhysicsParams, Side, TableGeometry, ENV_DT, PHYSICS_DT,
};
use crate::policies::{
    hit_ball, land_ball_open_loop, paddle_control, paddle_record_at, JointState, LandingTarget,
    PaddleCommand, PhysicsLandingOracle, RobotContext,
};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("non-finite value in {0}; training aborted")]
    NonFinite(String),
}

/// One draw from a standard normal via Box-Muller.
pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Cross-entropy method over a boxed-free continuous parameter vector.
/// Minimizes `cost`; returns the final elite mean and its cost.  Stops
/// early once the best elite cost drops below `stop_cost`.
pub fn cem_optimize<F, R>(
    cost: &mut F,
    mean0: &DVector<f64>,
    sigma0: &DVector<f64>,
    population: usize,
    elites: usize,
    iterations: usize,
    stop_cost: Option<f64>,
    rng: &mut R,
) -> (DVector<f64>, f64)
where
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng,
{
    let n = mean0.len();
    let mut mean = mean0.clone();
    let mut sigma = sigma0.clone();
    let mut best = (mean.clone(), cost(&mean));
    let elites = elites.clamp(1, population.max(1));
    for _ in 0..iterations {
        let mut scored: Vec<(f64, DVector<f64>)> = (0..population)
            .map(|_| {
                let x = DVector::from_fn(n, |i, _| mean[i] + sigma[i] * gauss(rng));
                (cost(&x), x)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        if scored[0].0 < best.1 {
            best = (scored[0].1.clone(), scored[0].0);
        }
        let elite = &scored[..elites];
        for i in 0..n {
            let m = elite.iter().map(|(_, x)| x[i]).sum::<f64>() / elites as f64;
            let var = elite.iter().map(|(_, x)| (x[i] - m).powi(2)).sum::<f64>() / elites as f64;
            mean[i] = m;
            sigma[i] = var.sqrt();
        }
        if let Some(stop) = stop_cost {
            if best.1 < stop {
                break;
            }
        }
    }
    best
}

/// Which skill the strategy policy drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyVariant {
    /// Action (x, y, speed, p_flip): landing target plus a flip gate.
    LandBall,
    /// Action (l_x, normal 3, v 3, omega 3): raw paddle parameters at a plane.
    HitBall,
    /// Action (t, position 3, normal 3, v 3, omega 3): one paddle command.
    Paddle,
    /// Action: six joint velocity targets per tick (baseline variant).
    Joint,
}

impl StrategyVariant {
    pub fn action_dim(self) -> usize {
        match self {
            StrategyVariant::LandBall => 4,
            StrategyVariant::HitBall => 10,
            StrategyVariant::Paddle => 13,
            StrategyVariant::Joint => 6,
        }
    }
}

/// Gaussian policy over a variant's action space: one net produces the
/// per-dimension mean and log-sigma; an optional value net serves the
/// policy-gradient trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyPolicy {
    pub variant: StrategyVariant,
    pub net: Mlp,
    pub value: Option<Mlp>,
}

const LOG_SIG_MIN: f64 = -4.0;
const LOG_SIG_MAX: f64 = 1.0;

impl StrategyPolicy {
    pub fn new<R: Rng>(
        variant: StrategyVariant,
        obs_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let adim = variant.action_dim();
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * adim);
        let mut net = Mlp::new(&sizes, rng);
        // Near-zero output weights start the policy at the centered
        // default action; exploration starts at sigma ~ exp(-1.5), wide
        // enough to learn from, tight enough to stay on the table.
        if let Some(last) = net.layers.last_mut() {
            last.w *= 0.01;
            for i in adim..2 * adim {
                last.b[i] = -1.5;
            }
        }
        StrategyPolicy {
            variant,
            net,
            value: None,
        }
    }

    pub fn with_value<R: Rng>(mut self, obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        self.value = Some(Mlp::new(&sizes, rng));
        self
    }

    /// Action dimension is read off the net head (half mean, half
    /// log-sigma), so auxiliary nets with non-variant dimensions work too.
    pub fn head_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Mean and clamped log-sigma at an observation.
    pub fn dist(&self, obs: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let out = self.net.forward(obs);
        let adim = self.head_dim();
        let mean = DVector::from_fn(adim, |i, _| out[i]);
        let logsig = DVector::from_fn(adim, |i, _| out[adim + i].clamp(LOG_SIG_MIN, LOG_SIG_MAX));
        (mean, logsig)
    }

    /// Sampled (stochastic) or mean action.
    pub fn act<R: Rng>(&self, obs: &DVector<f64>, stochastic: bool, rng: &mut R) -> DVector<f64> {
        let (mean, logsig) = self.dist(obs);
        if !stochastic {
            return mean;
        }
        DVector::from_fn(mean.len(), |i, _| mean[i] + logsig[i].exp() * gauss(rng))
    }

    /// Log density of an action under the diagonal Gaussian.
    pub fn log_prob(mean: &DVector<f64>, logsig: &DVector<f64>, action: &DVector<f64>) -> f64 {
        let mut lp = 0.0;
        for i in 0..mean.len() {
            let s = logsig[i].exp();
            let z = (action[i] - mean[i]) / s;
            lp += -0.5 * z * z - logsig[i] - 0.5 * (std::f64::consts::TAU).ln();
        }
        lp
    }
}

/// Reward scheme per exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    Cooperative,
    Adversarial,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mode: RewardMode,
}

/// The four binary events of one exchange, learner's perspective.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExchangeEvents {
    pub learner_contact: bool,
    pub learner_land: bool,
    pub opponent_contact: bool,
    pub opponent_land: bool,
}

impl ExchangeEvents {
    pub fn all(&self) -> bool {
        self.learner_contact && self.learner_land && self.opponent_contact && self.opponent_land
    }
}

impl RewardConfig {
    pub fn reward(&self, e: &ExchangeEvents) -> f64 {
        match self.mode {
            // +1 per event, credited to the learner: max +4 per exchange.
            RewardMode::Cooperative => {
                [
                    e.learner_contact,
                    e.learner_land,
                    e.opponent_contact,
                    e.opponent_land,
                ]
                .iter()
                .filter(|b| **b)
                .count() as f64
            }
            // Shaping 0.1 per own event, +1 for winning the exchange.
            RewardMode::Adversarial => {
                let shaping = 0.1
                    * [e.learner_contact, e.learner_land]
                        .iter()
                        .filter(|b| **b)
                        .count() as f64;
                let won = e.learner_land && !(e.opponent_contact && e.opponent_land);
                shaping + if won { 1.0 } else { 0.0 }
            }
        }
    }
}

/// Episodic environment interface for the trainers.
pub trait Env {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> DVector<f64>;
    /// Returns (next observation, reward, done).
    fn step(&mut self, action: &DVector<f64>, rng: &mut ChaCha8Rng) -> (DVector<f64>, f64, bool);
}

/// Exchange-level rally environment: one step spans one full exchange
/// (learner strike, flight, opponent return, flight back).  The opponent
/// is a frozen policy acting on the pi-rotated (mirrored) game.
pub struct GameEnv {
    pub params: PhysicsParams,
    pub table: TableGeometry,
    pub model: RobotModel,
    pub ik: IkParams,
    pub flight: BallFlightModel,
    pub oracle: PhysicsLandingOracle,
    pub launcher: LauncherRanges,
    pub reward: RewardConfig,
    pub cap: usize,
    pub variant: StrategyVariant,
    pub opponent: StrategyPolicy,
    pub opponent_stochastic: bool,
    ball: BallState,
    exchanges: usize,
}

pub const GAME_OBS_DIM: usize = 6;

impl GameEnv {
    pub fn new(variant: StrategyVariant, opponent: StrategyPolicy, reward: RewardConfig, cap: usize) -> Self {
        let params = PhysicsParams::default();
        let table = TableGeometry::default();
        let flight = BallFlightModel {
            gravity_z: params.gravity.z,
            drag: params.drag_coefficient,
            restitution: params.table_restitution,
            tangential_retention: params.table_tangential_retention,
            table: table.clone(),
            residual: None,
        };
        let oracle = PhysicsLandingOracle {
            params: params.clone(),
            table: table.clone(),
        };
        GameEnv {
            params,
            table,
            model: RobotModel::default_assembly(),
            ik: IkParams::default(),
            flight,
            oracle,
            launcher: LauncherRanges::default(),
            reward,
            cap,
            variant,
            opponent,
            opponent_stochastic: true,
            ball: BallState::new(Vector3::zeros(), Vector3::zeros()),
            exchanges: 0,
        }
    }

    fn obs_of(ball: &BallState) -> DVector<f64> {
        DVector::from_row_slice(&[
            ball.position.x,
            ball.position.y,
            ball.position.z,
            ball.velocity.x,
            ball.velocity.y,
            ball.velocity.z,
        ])
    }

    /// Pi rotation about the table's vertical center line maps one player's
    /// frame onto the other's.
    fn mirror(b: &BallState) -> BallState {
        BallState {
            position: Vector3::new(-b.position.x, -b.position.y, b.position.z),
            velocity: Vector3::new(-b.velocity.x, -b.velocity.y, b.velocity.z),
        }
    }

    fn rest_state(&self) -> JointState {
        JointState {
            q: self.model.rest_pose_forehand.clone(),
            qdot: DVector::zeros(self.model.dof()),
            time: 0.0,
        }
    }

    /// Executes one strike in the striker's own frame (ball incoming toward
    /// negative x).  Returns (contact, post-contact ball).
    fn strike(
        &self,
        incoming: &BallState,
        action: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> (bool, Option<BallState>) {
        let ctx = RobotContext {
            model: &self.model,
            ik: &self.ik,
        };
        let js = self.rest_state();
        let decision = match self.variant {
            StrategyVariant::LandBall => {
                let mut y = action[1].clamp(-0.71, 0.71);
                // p_flip: Bernoulli gate that mirrors the target across y.
                let p_flip = 1.0 / (1.0 + (-action[3]).exp());
                if rng.gen_range(0.0..1.0) < p_flip {
                    y = -y;
                }
                // Actions are offsets from the center-table return, so a
                // freshly initialized (near-zero) policy already sustains
                // a rally instead of aiming at the clamp boundary.
                let target = LandingTarget {
                    position: Vector3::new(
                        (0.685 + action[0]).clamp(0.05, 1.32),
                        y,
                        self.table.landing_z(),
                    ),
                    speed: (5.0 + action[2]).clamp(2.0, 10.0),
                };
                land_ball_open_loop(incoming, &target, &self.flight, &self.oracle, &ctx, &js)
            }
            StrategyVariant::HitBall => {
                let l_x = action[0].clamp(crate::policies::STRIKE_BAND_X.0, crate::policies::STRIKE_BAND_X.1);
                let mut n = Vector3::new(action[1], action[2], action[3]);
                if n.norm() < 1e-6 {
                    n = Vector3::x();
                }
                let n = n.normalize();
                let v = Vector3::new(
                    action[4].clamp(-10.0, 10.0),
                    action[5].clamp(-10.0, 10.0),
                    action[6].clamp(-10.0, 10.0),
                );
                let w = Vector3::new(
                    action[7].clamp(-50.0, 50.0),
                    action[8].clamp(-50.0, 50.0),
                    action[9].clamp(-50.0, 50.0),
                );
                hit_ball(incoming, l_x, &n, &v, &w, &self.flight, &ctx, &js)
            }
            StrategyVariant::Paddle => {
                let t = action[0].clamp(2.0 * ENV_DT, 1.2);
                let mut n = Vector3::new(action[4], action[5], action[6]);
                if n.norm() < 1e-6 {
                    n = Vector3::x();
                }
                let cmd = PaddleCommand {
                    t,
                    target: PaddleRecord {
                        position: Vector3::new(
                            action[1].clamp(-2.2, -1.4),
                            action[2].clamp(-0.8, 0.8),
                            action[3].clamp(0.8, 1.4),
                        ),
                        normal: n.normalize(),
                        linear_velocity: Vector3::new(
                            action[7].clamp(-5.0, 5.0),
                            action[8].clamp(-5.0, 5.0),
                            action[9].clamp(-5.0, 5.0),
                        ),
                        angular_velocity: Vector3::new(
                            action[10].clamp(-50.0, 50.0),
                            action[11].clamp(-50.0, 50.0),
                            action[12].clamp(-50.0, 50.0),
                        ),
                    },
                };
                // A bare paddle command: contact only if the commanded swing
                // meets the predicted ball at its tick.
                match paddle_control(&ctx, &cmd, &js) {
                    Ok((Some(traj), p_hat)) if traj.feasible => {
                        let k = ((t / ENV_DT).round() as usize).max(1) - 1;
                        let pred = self.flight.predict(incoming, k + 1);
                        match pred.get(k) {
                            Some(b_k) => {
                                let paddle = PaddleState {
                                    pose: paddle_pose_from_normal(p_hat.position, p_hat.normal),
                                    linear_velocity: p_hat.linear_velocity,
                                    angular_velocity: p_hat.angular_velocity,
                                };
                                return match paddle_contact(b_k, &paddle, &self.params, &self.table)
                                {
                                    Ok(out) => (true, Some(out)),
                                    Err(_) => (false, None),
                                };
                            }
                            None => return (false, None),
                        }
                    }
                    _ => return (false, None),
                }
            }
            StrategyVariant::Joint => return (false, None),
        };
        match decision {
            Ok(d) => {
                let paddle = PaddleState {
                    pose: paddle_pose_from_normal(
                        d.predicted_paddle.position,
                        d.predicted_paddle.normal,
                    ),
                    linear_velocity: d.predicted_paddle.linear_velocity,
                    angular_velocity: d.predicted_paddle.angular_velocity,
                };
                match paddle_contact(&d.candidate_ball, &paddle, &self.params, &self.table) {
                    Ok(out) => (true, Some(out)),
                    Err(_) => (false, None),
                }
            }
            Err(_) => (false, None),
        }
    }

    /// Integrates a struck ball until it bounces on the opposite half
    /// (success: returns the state right after the bounce) or leaves play.
    fn fly_to_bounce(&self, from: &BallState) -> (bool, Option<BallState>) {
        let mut state = *from;
        let mut t = 0.0;
        while t < 3.0 {
            let (next, events) = step_ball(&state, t, &self.params, &self.table);
            for e in &events {
                match e.kind {
                    CollisionKind::TableSide(Side::Opponent) => return (true, Some(next)),
                    CollisionKind::TableSide(Side::Learner)
                    | CollisionKind::Net
                    | CollisionKind::Floor
                    | CollisionKind::Out => return (false, None),
                    CollisionKind::Paddle(_) => {}
                }
            }
            state = next;
            t += PHYSICS_DT;
        }
        (false, None)
    }

    /// Plays one full exchange and returns the events.
    fn exchange(&mut self, action: &DVector<f64>, rng: &mut ChaCha8Rng) -> ExchangeEvents {
        let mut ev = ExchangeEvents::default();
        let (contact, out) = self.strike(&self.ball.clone(), action, rng);
        ev.learner_contact = contact;
        if let Some(out_ball) = out {
            let (landed, _) = self.fly_to_bounce(&out_ball);
            ev.learner_land = landed;
            if landed {
                // Hand the opponent the pre-bounce state right after our
                // contact: the striker sees the ball for its whole flight,
                // not just after the bounce on its own half, so the arm has
                // the full flight time to reach the contact pose.
                let opp_in = Self::mirror(&out_ball);
                let opp_obs = Self::obs_of(&opp_in);
                let opp_action = self.opponent.act(&opp_obs, self.opponent_stochastic, rng);
                let (oc, oout) = self.strike(&opp_in, &opp_action, rng);
                ev.opponent_contact = oc;
                if let Some(oball) = oout {
                    let (ol, _) = self.fly_to_bounce(&oball);
                    ev.opponent_land = ol;
                    if ol {
                        self.ball = Self::mirror(&oball);
                    }
                }
            }
        }
        ev
    }

    /// Serves toward the learner, bouncing the serve off the opponent when
    /// the rally starts from the learner-side launcher.
    fn serve(&mut self, rng: &mut ChaCha8Rng) {
        for _ in 0..20 {
            let ball = match launch_ball(
                &self.launcher.pos_low,
                &self.launcher.pos_high,
                &self.launcher.vel_low,
                &self.launcher.vel_high,
                &self.params,
                &self.table,
                rng,
            ) {
                Ok(b) => b,
                Err(_) => continue,
            };
            if rng.gen_range(0.0..1.0) < 0.5 {
                // Opponent-side launcher: straight at the learner.
                self.ball = ball;
                return;
            }
            // Learner-side launcher: the opponent returns the serve first.
            let opp_obs = Self::obs_of(&ball);
            let opp_action = self.opponent.act(&opp_obs, self.opponent_stochastic, rng);
            let (contact, out) = self.strike(&ball, &opp_action, rng);
            if !contact {
                continue;
            }
            if let Some(oball) = out {
                if self.fly_to_bounce(&oball).0 {
                    self.ball = Self::mirror(&oball);
                    return;
                }
            }
        }
        // Budget exhausted: fall back to a direct serve.
        if let Ok(b) = launch_ball(
            &self.launcher.pos_low,
            &self.launcher.pos_high,
            &self.launcher.vel_low,
            &self.launcher.vel_high,
            &self.params,
            &self.table,
            rng,
        ) {
            self.ball = b;
        }
    }
}

impl Env for GameEnv {
    fn obs_dim(&self) -> usize {
        GAME_OBS_DIM
    }

    fn action_dim(&self) -> usize {
        self.variant.action_dim()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.exchanges = 0;
        self.serve(rng);
        Self::obs_of(&self.ball)
    }

    fn step(&mut self, action: &DVector<f64>, rng: &mut ChaCha8Rng) -> (DVector<f64>, f64, bool) {
        self.exchanges += 1;
        let ev = self.exchange(action, rng);
        let r = self.reward.reward(&ev);
        let done = !ev.all() || self.exchanges >= self.cap;
        (Self::obs_of(&self.ball), r, done)
    }
}

/// The clipped PPO surrogate term for one sample (to be maximized).
pub fn ppo_clipped_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

struct Transition {
    obs: DVector<f64>,
    action: DVector<f64>,
    logp: f64,
    reward: f64,
    done: bool,
}

/// Generalized advantage estimates and value targets for one rollout.
fn gae(
    transitions: &[Transition],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = transitions.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let next_v = if transitions[i].done {
            0.0
        } else if i + 1 < n {
            values[i + 1]
        } else {
            bootstrap
        };
        let delta = transitions[i].reward + gamma * next_v - values[i];
        acc = delta
            + if transitions[i].done {
                0.0
            } else {
                gamma * lam * acc
            };
        adv[i] = acc;
    }
    let targets: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// PPO with a clipped surrogate, GAE advantages from the learned value
/// baseline, and an entropy bonus.  Returns the mean episodic return per
/// iteration.
pub fn ppo_train<E: Env>(
    env: &mut E,
    policy: &mut StrategyPolicy,
    cfg: &PpoConfig,
    iterations: usize,
    steps_per_iter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, StrategyError> {
    assert!(policy.value.is_some(), "ppo needs a value net");
    let adim = policy.head_dim();
    let mut opt_pi = Adam::new(&policy.net, cfg.lr_policy);
    let mut opt_v = Adam::new(policy.value.as_ref().unwrap(), cfg.lr_value);
    let mut history = Vec::with_capacity(iterations);
    let mut obs = env.reset(rng);
    for _ in 0..iterations {
        // Rollout.
        let mut transitions = Vec::with_capacity(steps_per_iter);
        let mut episode_returns = Vec::new();
        let mut ep_ret = 0.0;
        for _ in 0..steps_per_iter {
            let (mean, logsig) = policy.dist(&obs);
            let action =
                DVector::from_fn(adim, |i, _| mean[i] + logsig[i].exp() * gauss(rng));
            let logp = StrategyPolicy::log_prob(&mean, &logsig, &action);
            let (next, r, done) = env.step(&action, rng);
            ep_ret += r;
            transitions.push(Transition {
                obs: obs.clone(),
                action,
                logp,
                reward: r,
                done,
            });
            obs = if done {
                episode_returns.push(ep_ret);
                ep_ret = 0.0;
                env.reset(rng)
            } else {
                next
            };
        }
        let value_net = policy.value.as_ref().unwrap();
        let values: Vec<f64> = transitions
            .iter()
            .map(|t| value_net.forward(&t.obs)[0])
            .collect();
        let bootstrap = value_net.forward(&obs)[0];
        let (mut adv, targets) = gae(&transitions, &values, bootstrap, cfg.gamma, cfg.lam);
        // Advantage normalization stabilizes the tiny-batch regime.
        let m = adv.iter().sum::<f64>() / adv.len() as f64;
        let sd = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / adv.len() as f64)
            .sqrt()
            .max(1e-8);
        for a in adv.iter_mut() {
            *a = (*a - m) / sd;
        }
        for _ in 0..cfg.epochs {
            let mut pi_grad = crate::learnsub::MlpGrad::zeros_like(&policy.net);
            let mut v_grad =
                crate::learnsub::MlpGrad::zeros_like(policy.value.as_ref().unwrap());
            for (i, t) in transitions.iter().enumerate() {
                let out = policy.net.forward(&t.obs);
                let mean = DVector::from_fn(adim, |j, _| out[j]);
                let logsig =
                    DVector::from_fn(adim, |j, _| out[adim + j].clamp(LOG_SIG_MIN, LOG_SIG_MAX));
                let logp = StrategyPolicy::log_prob(&mean, &logsig, &t.action);
                let ratio = (logp - t.logp).exp();
                if !ratio.is_finite() {
                    return Err(StrategyError::NonFinite("policy ratio".into()));
                }
                let a = adv[i];
                let clipped_out = (a >= 0.0 && ratio > 1.0 + cfg.clip)
                    || (a < 0.0 && ratio < 1.0 - cfg.clip);
                let mut dl = DVector::zeros(2 * adim);
                for j in 0..adim {
                    let s = logsig[j].exp();
                    let z = (t.action[j] - mean[j]) / s;
                    if !clipped_out {
                        // d(-ratio*A)/dout via dlogp/dout.
                        dl[j] = -a * ratio * (z / s);
                        if out[adim + j] > LOG_SIG_MIN && out[adim + j] < LOG_SIG_MAX {
                            dl[adim + j] = -a * ratio * (z * z - 1.0);
                        }
                    }
                    // Entropy bonus: maximize sum of log-sigma.
                    if out[adim + j] > LOG_SIG_MIN && out[adim + j] < LOG_SIG_MAX {
                        dl[adim + j] -= cfg.entropy_coef;
                    }
                }
                let (g, _) = policy.net.backprop(&t.obs, &dl);
                pi_grad.add_assign(&g);
                let v = policy.value.as_ref().unwrap().forward(&t.obs)[0];
                let dv = DVector::from_row_slice(&[2.0 * (v - targets[i])]);
                let (gv, _) = policy.value.as_ref().unwrap().backprop(&t.obs, &dv);
                v_grad.add_assign(&gv);
            }
            let n = transitions.len() as f64;
            pi_grad.scale(1.0 / n);
            v_grad.scale(1.0 / n);
            opt_pi.step(&mut policy.net, &pi_grad);
            opt_v.step(policy.value.as_mut().unwrap(), &v_grad);
        }
        if policy.net.flatten().iter().any(|v| !v.is_finite()) {
            return Err(StrategyError::NonFinite("policy parameters".into()));
        }
        let mean_ret = if episode_returns.is_empty() {
            ep_ret
        } else {
            episode_returns.iter().sum::<f64>() / episode_returns.len() as f64
        };
        history.push(mean_ret);
    }
    Ok(history)
}

/// Running observation whitening for ARS.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Whitening {
    pub count: f64,
    pub mean: DVector<f64>,
    pub m2: DVector<f64>,
}

impl Whitening {
    pub fn new(dim: usize) -> Self {
        Whitening {
            count: 0.0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    pub fn push(&mut self, obs: &DVector<f64>) {
        self.count += 1.0;
        for i in 0..self.mean.len() {
            let d = obs[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (obs[i] - self.mean[i]);
        }
    }

    pub fn apply(&self, obs: &DVector<f64>) -> DVector<f64> {
        if self.count < 2.0 {
            return obs.clone();
        }
        DVector::from_fn(obs.len(), |i, _| {
            let var = self.m2[i] / (self.count - 1.0);
            (obs[i] - self.mean[i]) / var.sqrt().max(1e-8)
        })
    }
}

/// One ARS parameter update from antithetic rollout returns: top-b
/// directions by max(r+, r-), step scaled by the reward standard deviation.
pub fn ars_step(
    theta: &DVector<f64>,
    deltas: &[DVector<f64>],
    r_plus: &[f64],
    r_minus: &[f64],
    top_b: usize,
    step_size: f64,
) -> DVector<f64> {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| {
        r_plus[b]
            .max(r_minus[b])
            .total_cmp(&r_plus[a].max(r_minus[a]))
    });
    let b = top_b.clamp(1, deltas.len());
    let used = &order[..b];
    let mut rewards = Vec::with_capacity(2 * b);
    for &i in used {
        rewards.push(r_plus[i]);
        rewards.push(r_minus[i]);
    }
    let m = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let sigma_r = (rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rewards.len() as f64)
        .sqrt()
        .max(1e-8);
    let mut update = DVector::zeros(theta.len());
    for &i in used {
        update += &deltas[i] * (r_plus[i] - r_minus[i]);
    }
    theta + update * (step_size / (b as f64 * sigma_r))
}

/// ARS training outcome: the whitening statistics travel with the policy.
pub struct ArsOutcome {
    pub whitening: Whitening,
    /// Unperturbed-policy return after each iteration.
    pub eval_history: Vec<f64>,
    /// Best return seen so far, per iteration (non-decreasing).
    pub best_history: Vec<f64>,
}

fn rollout_return<E: Env>(
    env: &mut E,
    policy: &StrategyPolicy,
    whitening: &mut Whitening,
    observe: bool,
    rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..rollouts {
        let mut obs = env.reset(rng);
        let mut steps = 0;
        loop {
            if observe {
                whitening.push(&obs);
            }
            let white = whitening.apply(&obs);
            let action = policy.act(&white, false, rng);
            let (next, r, done) = env.step(&action, rng);
            total += r;
            obs = next;
            steps += 1;
            if done || steps >= 1000 {
                break;
            }
        }
    }
    total / rollouts as f64
}

/// Augmented random search (V2): antithetic parameter perturbations,
/// observation whitening, top-b direction filtering, reward-sigma-scaled
/// steps, k-rollout return averaging.
pub fn ars_train<E: Env>(
    env: &mut E,
    policy: &mut StrategyPolicy,
    cfg: &ArsConfig,
    rng: &mut ChaCha8Rng,
) -> ArsOutcome {
    let dim = policy.net.param_count();
    let mut whitening = Whitening::new(env.obs_dim());
    let mut eval_history = Vec::with_capacity(cfg.iterations);
    let mut best_history = Vec::with_capacity(cfg.iterations);
    let mut best = f64::NEG_INFINITY;
    let k = cfg.rollouts_per_eval.max(1);
    for _ in 0..cfg.iterations {
        let theta = policy.net.flatten();
        let deltas: Vec<DVector<f64>> = (0..cfg.n_directions)
            .map(|_| DVector::from_fn(dim, |_, _| gauss(rng)))
            .collect();
        let mut r_plus = Vec::with_capacity(cfg.n_directions);
        let mut r_minus = Vec::with_capacity(cfg.n_directions);
        let mut probe = policy.clone();
        for delta in &deltas {
            probe.net.assign_flat(&(&theta + delta * cfg.noise));
            r_plus.push(rollout_return(env, &probe, &mut whitening, true, k, rng));
            probe.net.assign_flat(&(&theta - delta * cfg.noise));
            r_minus.push(rollout_return(env, &probe, &mut whitening, true, k, rng));
        }
        let next = ars_step(&theta, &deltas, &r_plus, &r_minus, cfg.top_b, cfg.step_size);
        policy.net.assign_flat(&next);
        let ret = rollout_return(env, policy, &mut whitening, false, k, rng);
        best = best.max(ret);
        eval_history.push(ret);
        best_history.push(best);
    }
    ArsOutcome {
        whitening,
        eval_history,
        best_history,
    }
}

/// Evaluation statistics over complete episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyStats {
    pub mean_len: f64,
    pub std_len: f64,
    pub mean_reward: f64,
    /// Episode-length counts, index = length (0..=cap).
    pub histogram: Vec<usize>,
}

/// Plays `episodes` rallies of `policy` against `opponent` and collects
/// episode-length statistics.
pub fn eval_strategy(
    policy: &StrategyPolicy,
    opponent: &StrategyPolicy,
    variant: StrategyVariant,
    reward: RewardConfig,
    episodes: usize,
    cap: usize,
    stochastic: bool,
    seed: u64,
) -> StrategyStats {
    let mut env = GameEnv::new(variant, opponent.clone(), reward, cap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lengths = Vec::with_capacity(episodes);
    let mut rewards = Vec::with_capacity(episodes);
    let mut histogram = vec![0usize; cap + 1];
    for _ in 0..episodes {
        let mut obs = env.reset(&mut rng);
        let mut len = 0usize;
        let mut total = 0.0;
        loop {
            let action = policy.act(&obs, stochastic, &mut rng);
            let (next, r, done) = env.step(&action, &mut rng);
            total += r;
            len += 1;
            obs = next;
            if done {
                break;
            }
        }
        histogram[len.min(cap)] += 1;
        lengths.push(len as f64);
        rewards.push(total);
    }
    let n = episodes.max(1) as f64;
    let mean_len = lengths.iter().sum::<f64>() / n;
    let std_len =
        (lengths.iter().map(|l| (l - mean_len).powi(2)).sum::<f64>() / n).sqrt();
    StrategyStats {
        mean_len,
        std_len,
        mean_reward: rewards.iter().sum::<f64>() / n,
        histogram,
    }
}

/// Which trainer drives a self-play level.
#[derive(Debug, Clone)]
pub enum Trainer {
    Ppo(PpoConfig),
    Ars(ArsConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: usize,
    pub mean_len: f64,
    pub std_len: f64,
    pub mean_reward: f64,
}

/// Frozen-opponent self-play: the learner trains against a frozen copy of
/// its most recent policy; after each level the learner is frozen in turn.
/// Level budget: workers x steps-per-worker exchanges.
pub fn self_play_run(
    variant: StrategyVariant,
    trainer: &Trainer,
    sp: &SelfPlayConfig,
    reward: RewardConfig,
    seed: u64,
) -> Result<(StrategyPolicy, Vec<LevelResult>), StrategyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = StrategyPolicy::new(variant, GAME_OBS_DIM, &[10, 10], &mut rng)
        .with_value(GAME_OBS_DIM, &[10, 10], &mut rng);
    let mut results = Vec::with_capacity(sp.max_levels);
    for level in 0..sp.max_levels {
        // Level 0 trains against the initial policy itself.
        let opponent = policy.clone();
        let mut env = GameEnv::new(variant, opponent.clone(), reward, sp.rally_cap);
        match trainer {
            Trainer::Ppo(cfg) => {
                // One "worker" chunk = one PPO iteration of
                // steps-per-worker exchanges; the chunks run sequentially
                // with a shared stream, which keeps the run deterministic.
                ppo_train(
                    &mut env,
                    &mut policy,
                    cfg,
                    sp.workers,
                    sp.steps_per_level,
                    &mut rng,
                )?;
            }
            Trainer::Ars(cfg) => {
                ars_train(&mut env, &mut policy, cfg, &mut rng);
            }
        }
        let stats = eval_strategy(
            &policy,
            &opponent,
            variant,
            reward,
            sp.eval_episodes,
            sp.rally_cap,
            true,
            seed ^ (0x5eed_0000 + level as u64),
        );
        results.push(LevelResult {
            level,
            mean_len: stats.mean_len,
            std_len: stats.std_len,
            mean_reward: stats.mean_reward,
        });
    }
    Ok((policy, results))
}

/// Model-free baseline task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineTask {
    ReturnBall,
    LandBall,
}

/// Joint-velocity tick environment for the model-free baselines: one env
/// step is one 20 ms tick, the action is six joint velocity targets, and
/// the episodic reward is the gated landing score.
pub struct TickEnv {
    pub params: PhysicsParams,
    pub table: TableGeometry,
    pub model: RobotModel,
    pub launcher: LauncherRanges,
    pub task: BaselineTask,
    pub max_ticks: usize,
    ball: BallState,
    q: DVector<f64>,
    qdot: DVector<f64>,
    target: Vector3<f64>,
    hit: bool,
    ticks: usize,
    min_dist: f64,
    returned: bool,
}

impl TickEnv {
    pub fn new(task: BaselineTask) -> Self {
        let model = RobotModel::default_assembly();
        let q = model.rest_pose_forehand.clone();
        let qdot = DVector::zeros(model.dof());
        TickEnv {
            params: PhysicsParams::default(),
            table: TableGeometry::default(),
            model,
            launcher: LauncherRanges::default(),
            task,
            max_ticks: 100,
            ball: BallState::new(Vector3::zeros(), Vector3::zeros()),
            q,
            qdot,
            target: Vector3::zeros(),
            hit: false,
            ticks: 0,
            min_dist: f64::INFINITY,
            returned: false,
        }
    }

    /// Whether the last completed episode returned the ball onto the
    /// opponent half (the success measure, independent of shaping).
    pub fn last_returned(&self) -> bool {
        self.returned
    }

    /// Gated landing reward: zero unless the ball was returned onto the
    /// opponent half, else 3 minus the distance to the target.
    pub fn landing_reward(returned: bool, landing: &Vector3<f64>, target: &Vector3<f64>) -> f64 {
        if !returned {
            return 0.0;
        }
        (3.0 - (landing.xy() - target.xy()).norm()).max(0.0)
    }

    fn observation(&self) -> DVector<f64> {
        let mut v = vec![
            self.ball.position.x,
            self.ball.position.y,
            self.ball.position.z,
            self.ball.velocity.x,
            self.ball.velocity.y,
            self.ball.velocity.z,
        ];
        v.extend(self.q.iter());
        v.extend(self.qdot.iter());
        if self.task == BaselineTask::LandBall {
            v.extend([self.target.x, self.target.y, self.target.z]);
        }
        DVector::from_vec(v)
    }
}

impl Env for TickEnv {
    fn obs_dim(&self) -> usize {
        6 + 2 * self.model.dof() + if self.task == BaselineTask::LandBall { 3 } else { 0 }
    }

    fn action_dim(&self) -> usize {
        self.model.dof()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.ball = launch_ball(
            &self.launcher.pos_low,
            &self.launcher.pos_high,
            &self.launcher.vel_low,
            &self.launcher.vel_high,
            &self.params,
            &self.table,
            rng,
        )
        .unwrap_or_else(|_| {
            BallState::new(Vector3::new(1.7, 0.0, 1.1), Vector3::new(-5.5, 0.0, 2.0))
        });
        self.q = self.model.rest_pose_forehand.clone();
        self.qdot = DVector::zeros(self.model.dof());
        self.target = if self.task == BaselineTask::LandBall {
            Vector3::new(
                rng.gen_range(0.3..1.2),
                rng.gen_range(-0.6..0.6),
                self.table.landing_z(),
            )
        } else {
            Vector3::new(0.685, 0.0, self.table.landing_z())
        };
        self.hit = false;
        self.ticks = 0;
        self.min_dist = f64::INFINITY;
        self.returned = false;
        self.observation()
    }

    fn step(&mut self, action: &DVector<f64>, _rng: &mut ChaCha8Rng) -> (DVector<f64>, f64, bool) {
        self.ticks += 1;
        // Clamp the commanded joint velocities into limits and integrate.
        for i in 0..self.model.dof() {
            let lim = &self.model.limits.joints[i];
            self.qdot[i] = action
                .get(i)
                .copied()
                .unwrap_or(0.0)
                .clamp(-lim.v_max, lim.v_max);
        }
        let mut done = false;
        let mut reward = 0.0;
        for _ in 0..crate::physics::STEPS_PER_TICK {
            for i in 0..self.model.dof() {
                let lim = &self.model.limits.joints[i];
                self.q[i] = (self.q[i] + self.qdot[i] * PHYSICS_DT).clamp(lim.q_min, lim.q_max);
            }
            let paddle = paddle_record_at(&self.model, &self.q, &self.qdot)
                .ok()
                .map(|rec| PaddleState {
                    pose: paddle_pose_from_normal(rec.position, rec.normal),
                    linear_velocity: rec.linear_velocity,
                    angular_velocity: rec.angular_velocity,
                });
            let (next, events) = step_ball(&self.ball, 0.0, &self.params, &self.table);
            self.ball = next;
            if !self.hit {
                if let Some(p) = &paddle {
                    self.min_dist = self
                        .min_dist
                        .min((p.pose.position - self.ball.position).norm());
                    let closing = (self.ball.velocity - p.linear_velocity)
                        .dot(&(p.pose.position - self.ball.position))
                        > 0.0;
                    if closing {
                        if let Ok(out) =
                            paddle_contact(&self.ball, p, &self.params, &self.table)
                        {
                            self.ball = out;
                            self.hit = true;
                        }
                    }
                }
            }
            for e in &events {
                match e.kind {
                    CollisionKind::TableSide(Side::Opponent) if self.hit => {
                        reward = Self::landing_reward(true, &e.ball.position, &self.target);
                        self.returned = true;
                        done = true;
                    }
                    CollisionKind::TableSide(Side::Learner) if self.hit => done = true,
                    CollisionKind::TableSide(_) => {}
                    CollisionKind::Net | CollisionKind::Floor | CollisionKind::Out => done = true,
                    CollisionKind::Paddle(_) => {}
                }
            }
            if done {
                break;
            }
        }
        if self.ticks >= self.max_ticks {
            done = true;
        }
        if done {
            // The gated landing reward alone is too sparse to bootstrap a
            // random-search policy at desk scale; a small terminal
            // approach bonus (at most 0.5, below any landing score)
            // rewards getting the paddle near the ball's path.
            reward += 0.5 * (1.0 - self.min_dist.min(1.0)).max(0.0);
            if self.hit {
                reward += 0.5;
            }
        }
        (self.observation(), reward, done)
    }
}

/// Trains a model-free baseline (single 20-unit hidden layer, joint
/// velocity actions) with ARS; returns the policy, its whitening, and the
/// per-iteration success rate of the unperturbed policy.
pub fn model_free_baseline_train(
    task: BaselineTask,
    cfg: &ArsConfig,
    seed: u64,
) -> (StrategyPolicy, Whitening, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = TickEnv::new(task);
    let mut policy = StrategyPolicy::new(StrategyVariant::Joint, env.obs_dim(), &[20], &mut rng);
    let outcome = ars_train(&mut env, &mut policy, cfg, &mut rng);
    (policy, outcome.whitening, outcome.eval_history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cem_finds_a_1d_quadratic_minimum() {
        let mut cost = |x: &DVector<f64>| (x[0] - 3.0).powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (m, _) = cem_optimize(
            &mut cost,
            &DVector::from_row_slice(&[0.0]),
            &DVector::from_row_slice(&[5.0]),
            64,
            8,
            20,
            None,
            &mut rng,
        );
        assert!((m[0] - 3.0).abs() <= 1e-2, "mean {}", m[0]);
    }

    #[test]
    fn cem_with_zero_sigma_stays_at_the_optimum() {
        let mut cost = |x: &DVector<f64>| (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (m, c) = cem_optimize(
            &mut cost,
            &DVector::from_row_slice(&[1.0, -2.0]),
            &DVector::from_row_slice(&[0.0, 0.0]),
            16,
            4,
            5,
            None,
            &mut rng,
        );
        assert_eq!(m[0], 1.0);
        assert_eq!(m[1], -2.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cem_converges_per_coordinate_on_a_2d_quadratic() {
        let mut cost = |x: &DVector<f64>| (x[0] + 1.5).powi(2) + 2.0 * (x[1] - 0.25).powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (m, _) = cem_optimize(
            &mut cost,
            &DVector::from_row_slice(&[0.0, 0.0]),
            &DVector::from_row_slice(&[2.0, 2.0]),
            64,
            8,
            25,
            None,
            &mut rng,
        );
        assert!((m[0] + 1.5).abs() <= 1e-2);
        assert!((m[1] - 0.25).abs() <= 1e-2);
    }

    #[test]
    fn cem_is_deterministic_per_seed() {
        let mut cost = |x: &DVector<f64>| x[0].powi(2);
        let mut run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            cem_optimize(
                &mut cost,
                &DVector::from_row_slice(&[4.0]),
                &DVector::from_row_slice(&[1.0]),
                32,
                4,
                10,
                None,
                &mut rng,
            )
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn cooperative_reward_is_an_integer_in_zero_to_four() {
        let cfg = RewardConfig {
            mode: RewardMode::Cooperative,
        };
        // Only monotone event prefixes can occur in a real exchange.
        let sequences = [
            [false, false, false, false],
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ];
        for (k, s) in sequences.iter().enumerate() {
            let ev = ExchangeEvents {
                learner_contact: s[0],
                learner_land: s[1],
                opponent_contact: s[2],
                opponent_land: s[3],
            };
            let r = cfg.reward(&ev);
            assert_eq!(r, k as f64);
            assert_eq!(r.fract(), 0.0);
            assert!((0.0..=4.0).contains(&r));
        }
    }

    #[test]
    fn adversarial_reward_gives_the_win_plus_shaping() {
        let cfg = RewardConfig {
            mode: RewardMode::Adversarial,
        };
        let won = ExchangeEvents {
            learner_contact: true,
            learner_land: true,
            opponent_contact: false,
            opponent_land: false,
        };
        assert!((cfg.reward(&won) - 1.2).abs() < 1e-12);
        let rally_on = ExchangeEvents {
            learner_contact: true,
            learner_land: true,
            opponent_contact: true,
            opponent_land: true,
        };
        assert!((cfg.reward(&rally_on) - 0.2).abs() < 1e-12);
        let whiff = ExchangeEvents::default();
        assert_eq!(cfg.reward(&whiff), 0.0);
    }

    fn center_policy() -> StrategyPolicy {
        // Deterministic hand-built net: zero offsets (the center-table
        // return), flip logit -6, tiny sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = StrategyPolicy::new(StrategyVariant::LandBall, GAME_OBS_DIM, &[4], &mut rng);
        for layer in p.net.layers.iter_mut() {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let last = p.net.layers.last_mut().unwrap();
        last.b[3] = -6.0;
        for i in 4..8 {
            last.b[i] = LOG_SIG_MIN;
        }
        p
    }

    #[test]
    fn whiffed_exchange_gives_zero_reward_and_ends_the_episode() {
        let opponent = center_policy();
        let mut env = GameEnv::new(
            StrategyVariant::LandBall,
            opponent,
            RewardConfig {
                mode: RewardMode::Cooperative,
            },
            10,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _ = env.reset(&mut rng);
        // Sabotage: a ball dropping far outside the strike band.
        env.ball = BallState::new(Vector3::new(-1.7, 1.4, 0.9), Vector3::new(0.0, 0.0, -1.0));
        let action = DVector::from_row_slice(&[0.0, 0.0, 0.0, -6.0]);
        let (_, r, done) = env.step(&action, &mut rng);
        assert_eq!(r, 0.0);
        assert!(done);
    }

    #[test]
    fn full_cooperative_exchange_scores_four() {
        let opponent = center_policy();
        let mut env = GameEnv::new(
            StrategyVariant::LandBall,
            opponent,
            RewardConfig {
                mode: RewardMode::Cooperative,
            },
            10,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scored = false;
        for _ in 0..6 {
            let _ = env.reset(&mut rng);
            let action = DVector::from_row_slice(&[0.0, 0.0, 0.0, -6.0]);
            let (_, r, _) = env.step(&action, &mut rng);
            if r == 4.0 {
                scored = true;
                break;
            }
        }
        assert!(scored, "no full exchange in 6 rallies");
    }

    #[test]
    fn center_rally_sustains_several_exchanges() {
        let policy = center_policy();
        let stats = eval_strategy(
            &policy,
            &policy,
            StrategyVariant::LandBall,
            RewardConfig {
                mode: RewardMode::Cooperative,
            },
            8,
            5,
            false,
            21,
        );
        assert!(
            stats.mean_len >= 2.0,
            "mean episode length {}",
            stats.mean_len
        );
        assert_eq!(stats.histogram.iter().sum::<usize>(), 8);
    }

    #[test]
    fn eval_strategy_is_deterministic_per_seed() {
        let policy = center_policy();
        let run = || {
            eval_strategy(
                &policy,
                &policy,
                StrategyVariant::LandBall,
                RewardConfig {
                    mode: RewardMode::Cooperative,
                },
                4,
                4,
                true,
                99,
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.mean_len, b.mean_len);
        assert_eq!(a.mean_reward, b.mean_reward);
        assert_eq!(a.histogram, b.histogram);
    }

    #[test]
    fn ppo_clip_identities() {
        // theta = theta_old: every ratio is 1, objective = advantage.
        for adv in [-2.0, -0.5, 0.3, 1.7] {
            assert_eq!(ppo_clipped_term(1.0, adv, 0.2), adv);
        }
        // ratio 2, positive advantage: the clipped branch at 1.2 wins.
        assert!((ppo_clipped_term(2.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        // Beyond 1 + eps the objective is flat in the ratio.
        assert_eq!(
            ppo_clipped_term(1.3, 2.0, 0.2),
            ppo_clipped_term(5.0, 2.0, 0.2)
        );
    }

    /// One-step environment with reward -(a - 0.7)^2.
    struct Bandit1D {
        obs: DVector<f64>,
    }

    impl Bandit1D {
        fn new() -> Self {
            Bandit1D {
                obs: DVector::from_row_slice(&[1.0]),
            }
        }
    }

    impl Env for Bandit1D {
        fn obs_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn reset(&mut self, _rng: &mut ChaCha8Rng) -> DVector<f64> {
            self.obs.clone()
        }
        fn step(&mut self, action: &DVector<f64>, _rng: &mut ChaCha8Rng) -> (DVector<f64>, f64, bool) {
            (self.obs.clone(), -(action[0] - 0.7).powi(2), true)
        }
    }

    #[test]
    fn ppo_solves_the_one_d_bandit() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        // 1-d action head: net output = [mean, log-sigma].
        let mut policy = StrategyPolicy {
            variant: StrategyVariant::Joint,
            net: Mlp::new(&[1, 8, 2], &mut rng),
            value: Some(Mlp::new(&[1, 8, 1], &mut rng)),
        };
        let cfg = crate::config::PpoConfig {
            hidden: vec![8],
            lr_policy: 3e-3,
            lr_value: 1e-2,
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            epochs: 4,
        };
        let mut env = Bandit1D::new();
        let history = ppo_train(&mut env, &mut policy, &cfg, 200, 64, &mut rng).unwrap();
        assert_eq!(history.len(), 200);
        let obs = DVector::from_row_slice(&[1.0]);
        let mean = policy.net.forward(&obs)[0];
        assert!(
            (mean - 0.7).abs() <= 0.05,
            "policy mean {} after training",
            mean
        );
    }

    #[test]
    fn ars_update_is_zero_under_antithetic_cancellation() {
        let theta = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let deltas = vec![
            DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0, 0.0]),
        ];
        let next = ars_step(&theta, &deltas, &[3.0, 1.0], &[3.0, 1.0], 2, 0.05);
        assert_eq!(next, theta);
    }

    #[test]
    fn ars_update_is_invariant_to_constant_return_shifts() {
        let theta = DVector::from_row_slice(&[0.3, 0.1]);
        let deltas = vec![
            DVector::from_row_slice(&[0.5, -0.4]),
            DVector::from_row_slice(&[-0.2, 0.9]),
            DVector::from_row_slice(&[0.7, 0.3]),
        ];
        let rp = [2.0, -1.0, 0.5];
        let rm = [1.0, 0.5, -0.5];
        let a = ars_step(&theta, &deltas, &rp, &rm, 2, 0.05);
        let rp2: Vec<f64> = rp.iter().map(|r| r + 100.0).collect();
        let rm2: Vec<f64> = rm.iter().map(|r| r + 100.0).collect();
        let b = ars_step(&theta, &deltas, &rp2, &rm2, 2, 0.05);
        assert!((a - b).amax() < 1e-9);
    }

    /// Deterministic quadratic environment: reward -(a - target)^2 summed
    /// over one step; optimum at the constant action `target`.
    struct LinearBandit {
        target: DVector<f64>,
    }

    impl Env for LinearBandit {
        fn obs_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            2
        }
        fn reset(&mut self, _rng: &mut ChaCha8Rng) -> DVector<f64> {
            DVector::from_row_slice(&[1.0])
        }
        fn step(&mut self, action: &DVector<f64>, _rng: &mut ChaCha8Rng) -> (DVector<f64>, f64, bool) {
            let mut r = 0.0;
            for i in 0..self.target.len() {
                r -= (action[i] - self.target[i]).powi(2);
            }
            (DVector::from_row_slice(&[1.0]), r, true)
        }
    }

    #[test]
    fn ars_improves_on_the_linear_bandit_with_seed_averaging() {
        let cfg = crate::config::ArsConfig {
            n_directions: 8,
            top_b: 4,
            step_size: 0.05,
            noise: 0.05,
            rollouts_per_eval: 1,
            iterations: 50,
        };
        let mut first_sum = 0.0;
        let mut last_sum = 0.0;
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut env = LinearBandit {
                target: DVector::from_row_slice(&[0.6, -0.4]),
            };
            let mut policy = StrategyPolicy {
                variant: StrategyVariant::Joint,
                net: Mlp::new(&[1, 4], &mut rng),
                value: None,
            };
            let out = ars_train(&mut env, &mut policy, &cfg, &mut rng);
            first_sum += out.eval_history[0];
            last_sum += *out.eval_history.last().unwrap();
        }
        assert!(
            last_sum > first_sum,
            "seed-averaged return did not improve: {} -> {}",
            first_sum,
            last_sum
        );
    }

    #[test]
    fn self_play_results_are_deterministic_and_freeze_the_opponent() {
        let sp = crate::config::SelfPlayConfig {
            steps_per_level: 3,
            workers: 1,
            rally_cap: 3,
            eval_episodes: 2,
            max_levels: 2,
        };
        let cfg = crate::config::PpoConfig {
            hidden: vec![10, 10],
            lr_policy: 1e-4,
            lr_value: 1e-3,
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            entropy_coef: 0.1,
            epochs: 1,
        };
        let run = || {
            self_play_run(
                StrategyVariant::LandBall,
                &Trainer::Ppo(cfg.clone()),
                &sp,
                RewardConfig {
                    mode: RewardMode::Cooperative,
                },
                17,
            )
            .unwrap()
        };
        let (pa, a) = run();
        let (pb, b) = run();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mean_len, y.mean_len);
            assert_eq!(x.mean_reward, y.mean_reward);
        }
        assert_eq!(pa.net.flatten(), pb.net.flatten());
    }

    #[test]
    fn baseline_landing_reward_examples() {
        let center = Vector3::new(0.685, 0.0, 0.78);
        // Non-returning episode scores zero.
        assert_eq!(TickEnv::landing_reward(false, &center, &center), 0.0);
        // Perfect center landing scores 3.
        assert_eq!(TickEnv::landing_reward(true, &center, &center), 3.0);
        // Distance reduces the score.
        let off = Vector3::new(1.685, 0.0, 0.78);
        assert_eq!(TickEnv::landing_reward(true, &off, &center), 2.0);
    }

    #[test]
    fn tick_env_shapes_and_determinism() {
        let mut env = TickEnv::new(BaselineTask::LandBall);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obs = env.reset(&mut rng);
        assert_eq!(obs.len(), env.obs_dim());
        assert_eq!(env.action_dim(), 6);
        let action = DVector::zeros(6);
        let (o1, r1, _) = env.step(&action, &mut rng);
        let mut env2 = TickEnv::new(BaselineTask::LandBall);
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let _ = env2.reset(&mut rng2);
        let (o2, r2, _) = env2.step(&action, &mut rng2);
        assert_eq!(o1, o2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn whitening_matches_batch_statistics() {
        let mut w = Whitening::new(2);
        let data = [
            DVector::from_row_slice(&[1.0, -2.0]),
            DVector::from_row_slice(&[3.0, 0.0]),
            DVector::from_row_slice(&[5.0, 2.0]),
        ];
        for d in &data {
            w.push(d);
        }
        let z = w.apply(&DVector::from_row_slice(&[3.0, 0.0]));
        assert!(z.amax() < 1e-12, "mean sample should whiten to zero");
    }
}
