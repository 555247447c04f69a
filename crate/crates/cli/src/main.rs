//! Experiment orchestration: every pipeline stage behind one binary.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, bad config
//! file, missing checkpoint), 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttlab_core::config::Config;
use ttlab_core::demogen::{free_paddle_strikes, robot_strikes, strikes_from_logs};
use ttlab_core::kinematics::RobotModel;
use ttlab_core::logfmt::{read_trajectory_logs, write_trajectory_logs};
use ttlab_core::models::{
    fit_ball_flight, subsample_pairs, train_landing_models, train_residual, BallFlightModel,
    LandingModels,
};
use ttlab_core::physics::{
    launch_ball, paddle_contact, paddle_pose_from_normal, simulate_until_landing, step_ball,
    PaddleState, STEPS_PER_TICK,
};
use ttlab_core::policies::{
    hit_ball, land_ball_cem, land_ball_open_loop, JointState, LandingOracle, LandingTarget,
    RobotContext, StrikeDecision,
};
use ttlab_core::strategy::{
    model_free_baseline_train, self_play_run, BaselineTask, RewardConfig, RewardMode,
    StrategyVariant, Trainer,
};

#[derive(Parser)]
#[command(name = "ttlab", about = "Table-tennis simulation laboratory", version)]
struct Cli {
    /// Configuration file (flat INI sections of key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; the TT_SEED environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run directory for artifacts and logs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the free-paddle demonstration corpus.
    DemoGen,
    /// Generate the fixed-joint-velocity robot strike corpus.
    RobotStrikes,
    /// Fit the ball-flight model (physics fit plus residual) on the corpus.
    FitBall,
    /// Train the forward and inverse landing models on the corpus.
    TrainLanding,
    /// Per-step prediction error of the fitted flight model on held-out flights.
    EvalDynamics {
        /// Held-out flight count.
        #[arg(long, default_value_t = 1000)]
        flights: usize,
    },
    /// Land-ball return rate and landing error over random launches.
    EvalLandball {
        #[arg(long, default_value_t = 200)]
        launches: usize,
        /// Refine each strike with CEM.
        #[arg(long)]
        cem: bool,
        /// Use the exact physics oracle instead of the trained landing
        /// models (diagnostic upper bound; needs no checkpoints).
        #[arg(long)]
        oracle: bool,
    },
    /// Hit-ball contact rate over random launches and paddle parameters.
    EvalHitball {
        #[arg(long, default_value_t = 200)]
        launches: usize,
    },
    /// Frozen-opponent self-play over the land-ball strategy.
    Selfplay,
    /// ARS on the joint-velocity return-ball baseline.
    BaselineTrain,
    /// Convert run-directory JSONL logs into the documented CSV schemas.
    ExportCsv,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path).map_err(|e| {
            CliError::Config(format!("{}: {}", path.display(), e))
        })?,
        None => Config::default(),
    };
    let seed = match std::env::var("TT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("TT_SEED is not an integer: {v:?}")))?,
        Err(_) => cli.seed,
    };
    std::fs::create_dir_all(&cli.out).map_err(runtime)?;
    match &cli.command {
        Command::DemoGen => demo_gen(&cfg, seed, &cli.out),
        Command::RobotStrikes => robot_strikes_cmd(&cfg, seed, &cli.out),
        Command::FitBall => fit_ball(&cfg, seed, &cli.out),
        Command::TrainLanding => train_landing(&cfg, seed, &cli.out),
        Command::EvalDynamics { flights } => eval_dynamics(&cfg, seed, &cli.out, *flights),
        Command::EvalLandball {
            launches,
            cem,
            oracle,
        } => eval_landball(&cfg, seed, &cli.out, *launches, *cem, *oracle),
        Command::EvalHitball { launches } => eval_hitball(&cfg, seed, &cli.out, *launches),
        Command::Selfplay => selfplay(&cfg, seed, &cli.out),
        Command::BaselineTrain => baseline_train(&cfg, seed, &cli.out),
        Command::ExportCsv => export_csv(&cli.out),
    }
}

/// Every artifact-producing command echoes the effective config, the seed,
/// and its outputs into one manifest for diff-able provenance.
fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    cfg: &Config,
    outputs: &[&Path],
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str("[run]\n");
    text.push_str(&format!("command = {command}\n"));
    text.push_str(&format!("seed = {seed}\n"));
    for o in outputs {
        text.push_str(&format!("output = {}\n", o.display()));
    }
    text.push('\n');
    text.push_str(&cfg.to_ini());
    std::fs::write(out.join(format!("manifest-{command}.ini")), text).map_err(runtime)
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "missing {what} checkpoint: {} (run the producing subcommand first)",
            path.display()
        )))
    }
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(runtime)
}

fn demo_gen(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logs = free_paddle_strikes(cfg, &mut rng);
    let path = out.join("demos.jsonl");
    write_trajectory_logs(&path, &logs).map_err(runtime)?;
    println!("wrote {} demonstration strikes to {}", logs.len(), path.display());
    write_manifest(out, "demo-gen", seed, cfg, &[&path])
}

fn robot_strikes_cmd(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RobotModel::default_assembly();
    let logs = robot_strikes(cfg, &model, cfg.demogen.count, &mut rng);
    let path = out.join("robot_strikes.jsonl");
    write_trajectory_logs(&path, &logs).map_err(runtime)?;
    println!("wrote {} robot strikes to {}", logs.len(), path.display());
    write_manifest(out, "robot-strikes", seed, cfg, &[&path])
}

fn load_corpus(out: &Path) -> Result<Vec<ttlab_core::logfmt::TrajectoryLog>, CliError> {
    let demos = out.join("demos.jsonl");
    require(&demos, "demonstration corpus")?;
    let mut logs = read_trajectory_logs(&demos).map_err(runtime)?;
    let robot = out.join("robot_strikes.jsonl");
    if robot.exists() {
        logs.extend(read_trajectory_logs(&robot).map_err(runtime)?);
    }
    Ok(logs)
}

fn fit_ball(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let logs = load_corpus(out)?;
    let mut model = fit_ball_flight(&logs, &cfg.table).map_err(runtime)?;
    let pairs = subsample_pairs(&logs, 3);
    if pairs.len() >= 10 && cfg.ball_model.epochs > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = train_residual(&mut model, &pairs, &cfg.ball_model, &mut rng).map_err(runtime)?;
        println!("residual trained on {} step pairs, loss {loss:.3e}", pairs.len());
    }
    let path = out.join("ball_model.json");
    model.save(&path).map_err(runtime)?;
    println!(
        "fitted flight model: g_z {:.3}, drag {:.3}, e_t {:.3}, mu_t {:.3} -> {}",
        model.gravity_z,
        model.drag,
        model.restitution,
        model.tangential_retention,
        path.display()
    );
    write_manifest(out, "fit-ball", seed, cfg, &[&path])
}

fn train_landing(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let logs = load_corpus(out)?;
    let samples = strikes_from_logs(&logs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = train_landing_models(
        &samples,
        &cfg.landing_model,
        &cfg.landing_model,
        &cfg.physics,
        &cfg.table,
        &mut rng,
    )
    .map_err(runtime)?;
    let path = out.join("landing_models.json");
    models.save(&path).map_err(runtime)?;
    println!(
        "trained landing models on {} strikes -> {}",
        samples.len(),
        path.display()
    );
    write_manifest(out, "train-landing", seed, cfg, &[&path])
}

fn eval_dynamics(cfg: &Config, seed: u64, out: &Path, flights: usize) -> Result<(), CliError> {
    let model_path = out.join("ball_model.json");
    require(&model_path, "ball-flight model")?;
    let model = BallFlightModel::load(&model_path).map_err(runtime)?;
    // Held-out stream: offset the seed so it never overlaps a corpus run.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00de_7e57);
    let steps = 30usize;
    let mut pos_err = vec![0.0f64; steps];
    let mut vel_err = vec![0.0f64; steps];
    let r = &cfg.launcher;
    for _ in 0..flights {
        let ball = launch_ball(
            &r.pos_low, &r.pos_high, &r.vel_low, &r.vel_high, &cfg.physics, &cfg.table, &mut rng,
        )
        .map_err(runtime)?;
        let pred = model.predict(&ball, steps);
        let mut truth = ball;
        for k in 0..steps {
            for _ in 0..STEPS_PER_TICK {
                truth = step_ball(&truth, 0.0, &cfg.physics, &cfg.table).0;
            }
            pos_err[k] += (pred[k].position - truth.position).norm();
            vel_err[k] += (pred[k].velocity - truth.velocity).norm();
        }
    }
    let rows: Vec<serde_json::Value> = (0..steps)
        .map(|k| {
            serde_json::json!({
                "step": k + 1,
                "mean_pos_err_m": pos_err[k] / flights as f64,
                "mean_vel_err_mps": vel_err[k] / flights as f64,
            })
        })
        .collect();
    let path = out.join("eval_dynamics.jsonl");
    write_jsonl(&path, &rows)?;
    println!(
        "dynamics over {flights} flights: step-25 pos err {:.4} m, vel err {:.4} m/s",
        pos_err[24] / flights as f64,
        vel_err[24] / flights as f64
    );
    write_manifest(out, "eval-dynamics", seed, cfg, &[&path])
}

/// Executes a resolved strike through the exact contact law and reports
/// the true landing on the opponent half, if any.
fn execute_strike(
    cfg: &Config,
    decision: &StrikeDecision,
) -> Option<(Vector3<f64>, f64)> {
    let paddle = PaddleState {
        pose: paddle_pose_from_normal(
            decision.predicted_paddle.position,
            decision.predicted_paddle.normal,
        ),
        linear_velocity: decision.predicted_paddle.linear_velocity,
        angular_velocity: decision.predicted_paddle.angular_velocity,
    };
    let out = paddle_contact(&decision.candidate_ball, &paddle, &cfg.physics, &cfg.table).ok()?;
    simulate_until_landing(&out, &cfg.physics, &cfg.table)
        .on_table()
        .filter(|(p, _)| p.x > 0.0)
}

fn eval_landball(
    cfg: &Config,
    seed: u64,
    out: &Path,
    launches: usize,
    cem: bool,
    exact_oracle: bool,
) -> Result<(), CliError> {
    enum Oracle {
        Learned(LandingModels),
        Exact(ttlab_core::policies::PhysicsLandingOracle),
    }
    impl ttlab_core::policies::LandingOracle for Oracle {
        fn forward(
            &self,
            sample: &ttlab_core::models::StrikeSample,
        ) -> Option<(Vector3<f64>, f64)> {
            match self {
                Oracle::Learned(m) => m.forward(sample),
                Oracle::Exact(o) => o.forward(sample),
            }
        }
        fn inverse(
            &self,
            ball: &ttlab_core::physics::BallState,
            target: &LandingTarget,
            backhand: bool,
        ) -> Option<ttlab_core::logfmt::PaddleRecord> {
            match self {
                Oracle::Learned(m) => m.inverse(ball, target, backhand),
                Oracle::Exact(o) => o.inverse(ball, target, backhand),
            }
        }
    }
    let (flight, oracle) = if exact_oracle {
        let flight = BallFlightModel {
            gravity_z: cfg.physics.gravity.z,
            drag: cfg.physics.drag_coefficient,
            restitution: cfg.physics.table_restitution,
            tangential_retention: cfg.physics.table_tangential_retention,
            table: cfg.table.clone(),
            residual: None,
        };
        let oracle = Oracle::Exact(ttlab_core::policies::PhysicsLandingOracle {
            params: cfg.physics.clone(),
            table: cfg.table.clone(),
        });
        (flight, oracle)
    } else {
        let ball_path = out.join("ball_model.json");
        require(&ball_path, "ball-flight model")?;
        let landing_path = out.join("landing_models.json");
        require(&landing_path, "landing models")?;
        (
            BallFlightModel::load(&ball_path).map_err(runtime)?,
            Oracle::Learned(LandingModels::load(&landing_path).map_err(runtime)?),
        )
    };
    let model = RobotModel::default_assembly();
    let ctx = RobotContext {
        model: &model,
        ik: &cfg.ik,
    };
    let js = JointState {
        q: model.rest_pose_forehand.clone(),
        qdot: nalgebra::DVector::zeros(model.dof()),
        time: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &cfg.launcher;
    let mut rows = Vec::with_capacity(launches);
    let mut returned = 0usize;
    let mut err_sum = 0.0;
    for _ in 0..launches {
        let ball = launch_ball(
            &r.pos_low, &r.pos_high, &r.vel_low, &r.vel_high, &cfg.physics, &cfg.table, &mut rng,
        )
        .map_err(runtime)?;
        let target = LandingTarget {
            position: Vector3::new(
                rng.gen_range(0.3..1.2),
                rng.gen_range(-0.6..0.6),
                cfg.table.landing_z(),
            ),
            speed: rng.gen_range(2.0..6.0),
        };
        let decision = if cem {
            land_ball_cem(&ball, &target, &flight, &oracle, &ctx, &js, &cfg.cem, &mut rng)
        } else {
            land_ball_open_loop(&ball, &target, &flight, &oracle, &ctx, &js)
        };
        let planned = decision.is_ok();
        let predicted = decision
            .as_ref()
            .ok()
            .and_then(|d| d.predicted_landing.map(|(p, _)| p));
        let landing = decision.ok().and_then(|d| execute_strike(cfg, &d));
        // Forward-model residual on strikes that actually landed.
        let model_err = match (predicted, landing) {
            (Some(p), Some((l, _))) => Some((p.xy() - l.xy()).norm()),
            _ => None,
        };
        let err = landing.map(|(p, _)| (p.xy() - target.position.xy()).norm());
        if let Some(e) = err {
            returned += 1;
            err_sum += e;
        }
        rows.push(serde_json::json!({
            "planned": planned,
            "model_err_m": model_err,
            "returned": err.is_some(),
            "landing_err_m": err,
            "target_x": target.position.x,
            "target_y": target.position.y,
        }));
    }
    let path = out.join("eval_landball.jsonl");
    write_jsonl(&path, &rows)?;
    println!(
        "land-ball ({}) over {launches} launches: return rate {:.1}%, mean landing err {:.3} m",
        if cem { "cem" } else { "open-loop" },
        100.0 * returned as f64 / launches.max(1) as f64,
        err_sum / returned.max(1) as f64
    );
    write_manifest(out, "eval-landball", seed, cfg, &[&path])
}

fn eval_hitball(cfg: &Config, seed: u64, out: &Path, launches: usize) -> Result<(), CliError> {
    let flight = BallFlightModel {
        gravity_z: cfg.physics.gravity.z,
        drag: cfg.physics.drag_coefficient,
        restitution: cfg.physics.table_restitution,
        tangential_retention: cfg.physics.table_tangential_retention,
        table: cfg.table.clone(),
        residual: None,
    };
    let model = RobotModel::default_assembly();
    let ctx = RobotContext {
        model: &model,
        ik: &cfg.ik,
    };
    let js = JointState {
        q: model.rest_pose_forehand.clone(),
        qdot: nalgebra::DVector::zeros(model.dof()),
        time: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &cfg.launcher;
    let mut rows = Vec::with_capacity(launches);
    let mut contacts = 0usize;
    let mut landings = 0usize;
    for _ in 0..launches {
        let ball = launch_ball(
            &r.pos_low, &r.pos_high, &r.vel_low, &r.vel_high, &cfg.physics, &cfg.table, &mut rng,
        )
        .map_err(runtime)?;
        // Forehand-facing normal jittered around +x, a flat forward swing.
        let normal = Vector3::new(
            1.0,
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.1..0.4),
        )
        .normalize();
        let velocity = Vector3::new(
            rng.gen_range(1.0..4.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..1.0),
        );
        let spin = Vector3::zeros();
        let decision = hit_ball(&ball, -1.7, &normal, &velocity, &spin, &flight, &ctx, &js);
        let (contact, landing) = match decision {
            Ok(d) => (true, execute_strike(cfg, &d)),
            Err(_) => (false, None),
        };
        contacts += contact as usize;
        landings += landing.is_some() as usize;
        rows.push(serde_json::json!({
            "contact": contact,
            "landed": landing.is_some(),
        }));
    }
    let path = out.join("eval_hitball.jsonl");
    write_jsonl(&path, &rows)?;
    println!(
        "hit-ball over {launches} launches: contact rate {:.1}%, landed rate {:.1}%",
        100.0 * contacts as f64 / launches.max(1) as f64,
        100.0 * landings as f64 / launches.max(1) as f64
    );
    write_manifest(out, "eval-hitball", seed, cfg, &[&path])
}

fn selfplay(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let (policy, levels) = self_play_run(
        StrategyVariant::LandBall,
        &Trainer::Ppo(cfg.ppo.clone()),
        &cfg.selfplay,
        RewardConfig {
            mode: RewardMode::Cooperative,
        },
        seed,
    )
    .map_err(runtime)?;
    let rows: Vec<serde_json::Value> = levels
        .iter()
        .map(|l| serde_json::to_value(l).unwrap())
        .collect();
    let log_path = out.join("selfplay.jsonl");
    write_jsonl(&log_path, &rows)?;
    let policy_path = out.join("selfplay_policy.json");
    std::fs::write(
        &policy_path,
        serde_json::to_string(&policy).map_err(runtime)?,
    )
    .map_err(runtime)?;
    for l in &levels {
        println!(
            "level {}: mean len {:.2}, std {:.2}, mean reward {:.2}",
            l.level, l.mean_len, l.std_len, l.mean_reward
        );
    }
    write_manifest(out, "selfplay", seed, cfg, &[&log_path, &policy_path])
}

fn baseline_train(cfg: &Config, seed: u64, out: &Path) -> Result<(), CliError> {
    let (policy, whitening, history) =
        model_free_baseline_train(BaselineTask::ReturnBall, &cfg.ars, seed);
    let rows: Vec<serde_json::Value> = history
        .iter()
        .enumerate()
        .map(|(i, r)| serde_json::json!({ "iteration": i + 1, "mean_return": r }))
        .collect();
    let log_path = out.join("baseline.jsonl");
    write_jsonl(&log_path, &rows)?;
    let policy_path = out.join("baseline_policy.json");
    let blob = serde_json::json!({ "policy": policy, "whitening": whitening });
    std::fs::write(&policy_path, blob.to_string()).map_err(runtime)?;
    println!(
        "baseline return-ball: {} iterations, final mean return {:.3}",
        history.len(),
        history.last().copied().unwrap_or(0.0)
    );
    write_manifest(out, "baseline-train", seed, cfg, &[&log_path, &policy_path])
}

/// CSV schemas (documented in the README): dynamics.csv has
/// (step, mean_pos_err_m, mean_vel_err_mps); selfplay.csv has
/// (level, mean_len, std_len, mean_reward).  Missing or malformed log
/// lines are skipped and counted on stderr; absent logs still produce the
/// header-only CSVs.
fn export_csv(out: &Path) -> Result<(), CliError> {
    let mut skipped = 0usize;
    let mut convert = |jsonl: &str, csv: &str, columns: &[&str]| -> Result<(), CliError> {
        let mut text = String::from(columns.join(","));
        text.push('\n');
        if let Ok(body) = std::fs::read_to_string(out.join(jsonl)) {
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str::<serde_json::Value>(line) {
                    Ok(v) => {
                        let cells: Option<Vec<String>> = columns
                            .iter()
                            .map(|c| v.get(c).map(|x| x.to_string()))
                            .collect();
                        match cells {
                            Some(cells) => {
                                text.push_str(&cells.join(","));
                                text.push('\n');
                            }
                            None => skipped += 1,
                        }
                    }
                    Err(_) => skipped += 1,
                }
            }
        }
        std::fs::write(out.join(csv), text).map_err(runtime)
    };
    convert(
        "eval_dynamics.jsonl",
        "dynamics.csv",
        &["step", "mean_pos_err_m", "mean_vel_err_mps"],
    )?;
    convert(
        "selfplay.jsonl",
        "selfplay.csv",
        &["level", "mean_len", "std_len", "mean_reward"],
    )?;
    convert("baseline.jsonl", "baseline.csv", &["iteration", "mean_return"])?;
    if skipped > 0 {
        eprintln!("skipped {skipped} malformed log lines");
    }
    println!("wrote dynamics.csv, selfplay.csv, baseline.csv in {}", out.display());
    Ok(())
}
