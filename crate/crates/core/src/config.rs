//! Run configuration: built-in defaults, an INI-style `[section] key = value`
//! overlay format, and an effective-config echo for run manifests.
//!
//! Vector values are whitespace-separated (`pos_low = 1.4 -0.3 0.86`), as
//! are integer lists (`hidden = 64 64`).

use nalgebra::Vector3;
use thiserror::Error;

use crate::kinematics::IkParams;
use crate::physics::{LauncherRanges, PhysicsParams, TableGeometry};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: bad value for `{key}`: {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
}

/// Network and optimizer knobs for a supervised model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// CEM refinement over paddle parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub sigma_normal: f64,
    pub sigma_speed: f64,
    pub sigma_spin: f64,
    pub stop_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArsConfig {
    pub n_directions: usize,
    pub top_b: usize,
    pub step_size: f64,
    pub noise: f64,
    pub rollouts_per_eval: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfPlayConfig {
    pub steps_per_level: usize,
    pub workers: usize,
    pub rally_cap: usize,
    pub eval_episodes: usize,
    pub max_levels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemogenConfig {
    pub count: usize,
    pub normal_jitter: f64,
    pub velocity_jitter: f64,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub physics: PhysicsParams,
    pub table: TableGeometry,
    pub launcher: LauncherRanges,
    pub ik: IkParams,
    pub ball_model: ModelConfig,
    pub landing_model: ModelConfig,
    pub cem: CemConfig,
    pub ppo: PpoConfig,
    pub ars: ArsConfig,
    pub selfplay: SelfPlayConfig,
    pub demogen: DemogenConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            physics: PhysicsParams::default(),
            table: TableGeometry::default(),
            launcher: LauncherRanges::default(),
            ik: IkParams::default(),
            ball_model: ModelConfig {
                hidden: vec![64, 64],
                lr: 1e-3,
                epochs: 40,
                batch_size: 64,
            },
            landing_model: ModelConfig {
                hidden: vec![64, 64],
                lr: 1e-3,
                epochs: 60,
                batch_size: 64,
            },
            cem: CemConfig {
                population: 64,
                elites: 8,
                iterations: 10,
                sigma_normal: 0.1,
                sigma_speed: 0.5,
                sigma_spin: 2.0,
                stop_error: 0.02,
            },
            ppo: PpoConfig {
                hidden: vec![10, 10],
                lr_policy: 1e-4,
                lr_value: 1e-3,
                gamma: 0.99,
                lam: 0.95,
                clip: 0.2,
                entropy_coef: 0.1,
                epochs: 4,
            },
            ars: ArsConfig {
                n_directions: 30,
                top_b: 5,
                step_size: 0.05,
                noise: 0.05,
                rollouts_per_eval: 15,
                iterations: 20,
            },
            selfplay: SelfPlayConfig {
                steps_per_level: 100,
                workers: 24,
                rally_cap: 10,
                eval_episodes: 240,
                max_levels: 12,
            },
            demogen: DemogenConfig {
                count: 64,
                normal_jitter: 0.05,
                velocity_jitter: 0.2,
            },
        }
    }
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.into(),
        value: value.into(),
    })
}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.into(),
        value: value.into(),
    })
}

fn parse_usize_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split_whitespace()
        .map(|tok| tok.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| ConfigError::BadValue {
            line,
            key: key.into(),
            value: value.into(),
        })
}

fn parse_vec3(line: usize, key: &str, value: &str) -> Result<Vector3<f64>, ConfigError> {
    let parts: Vec<f64> = value
        .split_whitespace()
        .map(|tok| tok.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| ConfigError::BadValue {
            line,
            key: key.into(),
            value: value.into(),
        })?;
    if parts.len() != 3 {
        return Err(ConfigError::BadValue {
            line,
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

impl Config {
    /// Defaults overlaid with the overrides in `text`.
    pub fn from_ini(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_ini(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini(&text)
    }

    pub fn apply_ini(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "physics"
                        | "table"
                        | "launcher"
                        | "ik"
                        | "ball_model"
                        | "landing_model"
                        | "cem"
                        | "ppo"
                        | "ars"
                        | "selfplay"
                        | "demogen"
                ) {
                    return Err(ConfigError::UnknownSection {
                        line: line_no,
                        section,
                    });
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine {
                line: line_no,
            })?;
            let key = key.trim();
            let value = value.trim();
            self.apply_key(line_no, &section, key, value)?;
        }
        Ok(())
    }

    fn apply_key(
        &mut self,
        line: usize,
        section: &str,
        key: &str,
        value: &str,
    ) -> Result<(), ConfigError> {
        let unknown = || ConfigError::UnknownKey {
            line,
            section: section.into(),
            key: key.into(),
        };
        match section {
            "physics" => match key {
                "gravity" => self.physics.gravity = parse_vec3(line, key, value)?,
                "drag_coefficient" => self.physics.drag_coefficient = parse_f64(line, key, value)?,
                "table_restitution" => {
                    self.physics.table_restitution = parse_f64(line, key, value)?
                }
                "table_tangential_retention" => {
                    self.physics.table_tangential_retention = parse_f64(line, key, value)?
                }
                "paddle_restitution" => {
                    self.physics.paddle_restitution = parse_f64(line, key, value)?
                }
                "paddle_tangential_retention" => {
                    self.physics.paddle_tangential_retention = parse_f64(line, key, value)?
                }
                _ => return Err(unknown()),
            },
            "table" => match key {
                "center" => self.table.center = parse_vec3(line, key, value)?,
                "length" => self.table.length = parse_f64(line, key, value)?,
                "width" => self.table.width = parse_f64(line, key, value)?,
                "net_height" => self.table.net_height = parse_f64(line, key, value)?,
                "ball_radius" => self.table.ball_radius = parse_f64(line, key, value)?,
                "paddle_radius" => self.table.paddle_radius = parse_f64(line, key, value)?,
                _ => return Err(unknown()),
            },
            "launcher" => match key {
                "pos_low" => self.launcher.pos_low = parse_vec3(line, key, value)?,
                "pos_high" => self.launcher.pos_high = parse_vec3(line, key, value)?,
                "vel_low" => self.launcher.vel_low = parse_vec3(line, key, value)?,
                "vel_high" => self.launcher.vel_high = parse_vec3(line, key, value)?,
                _ => return Err(unknown()),
            },
            "ik" => match key {
                "damping" => self.ik.damping = parse_f64(line, key, value)?,
                "null_space_gain" => self.ik.null_space_gain = parse_f64(line, key, value)?,
                "max_iterations" => self.ik.max_iterations = parse_usize(line, key, value)?,
                "step_clamp" => self.ik.step_clamp = parse_f64(line, key, value)?,
                "position_tol" => self.ik.position_tol = parse_f64(line, key, value)?,
                "normal_tol" => self.ik.normal_tol = parse_f64(line, key, value)?,
                _ => return Err(unknown()),
            },
            "ball_model" | "landing_model" => {
                let m = if section == "ball_model" {
                    &mut self.ball_model
                } else {
                    &mut self.landing_model
                };
                match key {
                    "hidden" => m.hidden = parse_usize_list(line, key, value)?,
                    "lr" => m.lr = parse_f64(line, key, value)?,
                    "epochs" => m.epochs = parse_usize(line, key, value)?,
                    "batch_size" => m.batch_size = parse_usize(line, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "cem" => match key {
                "population" => self.cem.population = parse_usize(line, key, value)?,
                "elites" => self.cem.elites = parse_usize(line, key, value)?,
                "iterations" => self.cem.iterations = parse_usize(line, key, value)?,
                "sigma_normal" => self.cem.sigma_normal = parse_f64(line, key, value)?,
                "sigma_speed" => self.cem.sigma_speed = parse_f64(line, key, value)?,
                "sigma_spin" => self.cem.sigma_spin = parse_f64(line, key, value)?,
                "stop_error" => self.cem.stop_error = parse_f64(line, key, value)?,
                _ => return Err(unknown()),
            },
            "ppo" => match key {
                "hidden" => self.ppo.hidden = parse_usize_list(line, key, value)?,
                "lr_policy" => self.ppo.lr_policy = parse_f64(line, key, value)?,
                "lr_value" => self.ppo.lr_value = parse_f64(line, key, value)?,
                "gamma" => self.ppo.gamma = parse_f64(line, key, value)?,
                "lam" => self.ppo.lam = parse_f64(line, key, value)?,
                "clip" => self.ppo.clip = parse_f64(line, key, value)?,
                "entropy_coef" => self.ppo.entropy_coef = parse_f64(line, key, value)?,
                "epochs" => self.ppo.epochs = parse_usize(line, key, value)?,
                _ => return Err(unknown()),
            },
            "ars" => match key {
                "n_directions" => self.ars.n_directions = parse_usize(line, key, value)?,
                "top_b" => self.ars.top_b = parse_usize(line, key, value)?,
                "step_size" => self.ars.step_size = parse_f64(line, key, value)?,
                "noise" => self.ars.noise = parse_f64(line, key, value)?,
                "rollouts_per_eval" => {
                    self.ars.rollouts_per_eval = parse_usize(line, key, value)?
                }
                "iterations" => self.ars.iterations = parse_usize(line, key, value)?,
                _ => return Err(unknown()),
            },
            "selfplay" => match key {
                "steps_per_level" => {
                    self.selfplay.steps_per_level = parse_usize(line, key, value)?
                }
                "workers" => self.selfplay.workers = parse_usize(line, key, value)?,
                "rally_cap" => self.selfplay.rally_cap = parse_usize(line, key, value)?,
                "eval_episodes" => self.selfplay.eval_episodes = parse_usize(line, key, value)?,
                "max_levels" => self.selfplay.max_levels = parse_usize(line, key, value)?,
                _ => return Err(unknown()),
            },
            "demogen" => match key {
                "count" => self.demogen.count = parse_usize(line, key, value)?,
                "normal_jitter" => self.demogen.normal_jitter = parse_f64(line, key, value)?,
                "velocity_jitter" => self.demogen.velocity_jitter = parse_f64(line, key, value)?,
                _ => return Err(unknown()),
            },
            _ => {
                return Err(ConfigError::UnknownSection {
                    line,
                    section: section.into(),
                })
            }
        }
        Ok(())
    }

    /// The full effective configuration in the same INI format the loader
    /// accepts, suitable for echoing into run manifests.
    pub fn to_ini(&self) -> String {
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        s.push_str("[physics]\n");
        s.push_str(&format!("gravity = {}\n", v3(&self.physics.gravity)));
        s.push_str(&format!("drag_coefficient = {}\n", self.physics.drag_coefficient));
        s.push_str(&format!("table_restitution = {}\n", self.physics.table_restitution));
        s.push_str(&format!(
            "table_tangential_retention = {}\n",
            self.physics.table_tangential_retention
        ));
        s.push_str(&format!("paddle_restitution = {}\n", self.physics.paddle_restitution));
        s.push_str(&format!(
            "paddle_tangential_retention = {}\n",
            self.physics.paddle_tangential_retention
        ));
        s.push_str("\n[table]\n");
        s.push_str(&format!("center = {}\n", v3(&self.table.center)));
        s.push_str(&format!("length = {}\n", self.table.length));
        s.push_str(&format!("width = {}\n", self.table.width));
        s.push_str(&format!("net_height = {}\n", self.table.net_height));
        s.push_str(&format!("ball_radius = {}\n", self.table.ball_radius));
        s.push_str(&format!("paddle_radius = {}\n", self.table.paddle_radius));
        s.push_str("\n[launcher]\n");
        s.push_str(&format!("pos_low = {}\n", v3(&self.launcher.pos_low)));
        s.push_str(&format!("pos_high = {}\n", v3(&self.launcher.pos_high)));
        s.push_str(&format!("vel_low = {}\n", v3(&self.launcher.vel_low)));
        s.push_str(&format!("vel_high = {}\n", v3(&self.launcher.vel_high)));
        s.push_str("\n[ik]\n");
        s.push_str(&format!("damping = {}\n", self.ik.damping));
        s.push_str(&format!("null_space_gain = {}\n", self.ik.null_space_gain));
        s.push_str(&format!("max_iterations = {}\n", self.ik.max_iterations));
        s.push_str(&format!("step_clamp = {}\n", self.ik.step_clamp));
        s.push_str(&format!("position_tol = {}\n", self.ik.position_tol));
        s.push_str(&format!("normal_tol = {}\n", self.ik.normal_tol));
        for (name, m) in [("ball_model", &self.ball_model), ("landing_model", &self.landing_model)]
        {
            s.push_str(&format!("\n[{}]\n", name));
            s.push_str(&format!("hidden = {}\n", list(&m.hidden)));
            s.push_str(&format!("lr = {}\n", m.lr));
            s.push_str(&format!("epochs = {}\n", m.epochs));
            s.push_str(&format!("batch_size = {}\n", m.batch_size));
        }
        s.push_str("\n[cem]\n");
        s.push_str(&format!("population = {}\n", self.cem.population));
        s.push_str(&format!("elites = {}\n", self.cem.elites));
        s.push_str(&format!("iterations = {}\n", self.cem.iterations));
        s.push_str(&format!("sigma_normal = {}\n", self.cem.sigma_normal));
        s.push_str(&format!("sigma_speed = {}\n", self.cem.sigma_speed));
        s.push_str(&format!("sigma_spin = {}\n", self.cem.sigma_spin));
        s.push_str(&format!("stop_error = {}\n", self.cem.stop_error));
        s.push_str("\n[ppo]\n");
        s.push_str(&format!("hidden = {}\n", list(&self.ppo.hidden)));
        s.push_str(&format!("lr_policy = {}\n", self.ppo.lr_policy));
        s.push_str(&format!("lr_value = {}\n", self.ppo.lr_value));
        s.push_str(&format!("gamma = {}\n", self.ppo.gamma));
        s.push_str(&format!("lam = {}\n", self.ppo.lam));
        s.push_str(&format!("clip = {}\n", self.ppo.clip));
        s.push_str(&format!("entropy_coef = {}\n", self.ppo.entropy_coef));
        s.push_str(&format!("epochs = {}\n", self.ppo.epochs));
        s.push_str("\n[ars]\n");
        s.push_str(&format!("n_directions = {}\n", self.ars.n_directions));
        s.push_str(&format!("top_b = {}\n", self.ars.top_b));
        s.push_str(&format!("step_size = {}\n", self.ars.step_size));
        s.push_str(&format!("noise = {}\n", self.ars.noise));
        s.push_str(&format!("rollouts_per_eval = {}\n", self.ars.rollouts_per_eval));
        s.push_str(&format!("iterations = {}\n", self.ars.iterations));
        s.push_str("\n[selfplay]\n");
        s.push_str(&format!("steps_per_level = {}\n", self.selfplay.steps_per_level));
        s.push_str(&format!("workers = {}\n", self.selfplay.workers));
        s.push_str(&format!("rally_cap = {}\n", self.selfplay.rally_cap));
        s.push_str(&format!("eval_episodes = {}\n", self.selfplay.eval_episodes));
        s.push_str(&format!("max_levels = {}\n", self.selfplay.max_levels));
        s.push_str("\n[demogen]\n");
        s.push_str(&format!("count = {}\n", self.demogen.count));
        s.push_str(&format!("normal_jitter = {}\n", self.demogen.normal_jitter));
        s.push_str(&format!("velocity_jitter = {}\n", self.demogen.velocity_jitter));
        s
    }
}
