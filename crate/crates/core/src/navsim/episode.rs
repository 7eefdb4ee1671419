//! Robot navigation episodes among social-force pedestrians.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::social_force::{
    accelerations, driving_force, integrate, pair_repulsion, predictor_force, tie_direction, SFParams, SimAgent, Vec2,
};
use crate::data::{AgentTrack, FrameSettings, Modality, ModalityTensor, SceneRecord};
use crate::error::{Error, Result};
use crate::model::{predict, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: Vec2,
    pub goal: Vec2,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_speed")]
    pub desired_speed: f64,
}

fn default_radius() -> f64 {
    0.3
}

fn default_speed() -> f64 {
    1.3
}

impl AgentSpec {
    pub fn new(start: Vec2, goal: Vec2) -> Self {
        Self {
            start,
            goal,
            radius: default_radius(),
            desired_speed: default_speed(),
        }
    }

    /// An agent already moving toward its goal at its desired speed.
    fn spawn(&self) -> SimAgent {
        let mut a = SimAgent::new(self.start, self.goal);
        a.radius = self.radius;
        a.desired_speed = self.desired_speed;
        let d = a.desired_direction();
        a.velocity = [d[0] * a.desired_speed, d[1] * a.desired_speed];
        a
    }
}

/// A rectangular arena centred at the origin, one robot and its crowd.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub arena_half_extents: Vec2,
    pub robot: AgentSpec,
    #[serde(default)]
    pub humans: Vec<AgentSpec>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let [hx, hy] = self.arena_half_extents;
        if !(hx > 0.0 && hy > 0.0) {
            return Err(Error::contract("arena half extents must be positive"));
        }
        let inside = |p: Vec2| p[0].abs() <= hx && p[1].abs() <= hy && p[0].is_finite() && p[1].is_finite();
        for (i, a) in std::iter::once(&self.robot).chain(&self.humans).enumerate() {
            let who = if i == 0 { "robot".to_string() } else { format!("human {}", i - 1) };
            if !inside(a.start) || !inside(a.goal) {
                return Err(Error::contract(format!("{who} starts or ends outside the arena")));
            }
            if !(a.radius > 0.0) || !(a.desired_speed > 0.0) {
                return Err(Error::contract(format!("{who} needs a positive radius and speed")));
            }
        }
        Ok(())
    }

    /// The same scenario reflected across the x axis.
    pub fn reflect_y(&self) -> Self {
        let f = |a: &AgentSpec| AgentSpec {
            start: [a.start[0], -a.start[1]],
            goal: [a.goal[0], -a.goal[1]],
            ..*a
        };
        Self {
            arena_half_extents: self.arena_half_extents,
            robot: f(&self.robot),
            humans: self.humans.iter().map(f).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }
}

/// Forecasts every human from its observed history.
pub trait TrajectoryPredictor: Sync {
    /// Rate at which histories are sampled.
    fn history_fps(&self) -> f64;
    /// Frames of history needed before predictions start.
    fn history_frames(&self) -> usize;
    /// One predicted future path per history, in world coordinates.
    fn predict(&self, histories: &[Vec<Vec2>]) -> Result<Vec<Vec<Vec2>>>;
}

/// Drives a trained model: histories become one scene and every human is
/// predicted as the ego with the trajectory modality only; mode 0 is used.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub settings: FrameSettings,
}

impl TrajectoryPredictor for ModelPredictor<'_> {
    fn history_fps(&self) -> f64 {
        self.settings.fps.get()
    }

    fn history_frames(&self) -> usize {
        self.settings.t_obs().unwrap_or(1)
    }

    fn predict(&self, histories: &[Vec<Vec2>]) -> Result<Vec<Vec<Vec2>>> {
        let t_obs = self.settings.t_obs()?;
        let t_pred = self.settings.t_pred()?;
        let frames = t_obs + t_pred;
        let agents = histories
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let h = &h[h.len().saturating_sub(t_obs)..];
                let mut values = vec![f64::NAN; frames * 2];
                let mut valid = vec![false; frames];
                let offset = t_obs - h.len();
                for (t, p) in h.iter().enumerate() {
                    values[2 * (offset + t)] = p[0];
                    values[2 * (offset + t) + 1] = p[1];
                    valid[offset + t] = true;
                }
                Ok(AgentTrack::new(i.to_string(), ModalityTensor::new(Modality::Traj, frames, values, valid)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = SceneRecord {
            scene_id: "navsim".into(),
            fps: self.settings.fps,
            t_obs,
            t_pred,
            agents,
        };
        (0..histories.len())
            .map(|i| {
                let (out, _) = predict(self.model, &scene, &i.to_string(), &[Modality::Traj])?;
                Ok(out.traj_modes.into_iter().next().unwrap_or_default())
            })
            .collect()
    }
}

/// Linear extrapolation of the last history step.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVelocityPredictor {
    pub fps: f64,
    pub horizon: usize,
}

impl TrajectoryPredictor for ConstantVelocityPredictor {
    fn history_fps(&self) -> f64 {
        self.fps
    }

    fn history_frames(&self) -> usize {
        2
    }

    fn predict(&self, histories: &[Vec<Vec2>]) -> Result<Vec<Vec<Vec2>>> {
        Ok(histories
            .iter()
            .map(|h| {
                let last = h[h.len() - 1];
                let prev = if h.len() > 1 { h[h.len() - 2] } else { last };
                let v = [last[0] - prev[0], last[1] - prev[1]];
                (1..=self.horizon)
                    .map(|k| [last[0] + k as f64 * v[0], last[1] + k as f64 * v[1]])
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Copy)]
pub enum Navigator<'a> {
    Baseline,
    Predictive(&'a dyn TrajectoryPredictor),
}

impl Navigator<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Navigator::Baseline => "baseline",
            Navigator::Predictive(_) => "predictive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub params: SFParams,
    pub timeout: f64,
    pub goal_tolerance: f64,
    /// Whether humans react to the robot.
    pub robot_visible: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            params: SFParams::default(),
            timeout: 30.0,
            goal_tolerance: 0.3,
            robot_visible: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Seconds until the goal was reached; `None` on collision or timeout.
    pub completion_time: Option<f64>,
    pub timed_out: bool,
    pub collided: bool,
    /// Smallest robot-human clearance (centre distance minus radii) seen.
    pub min_clearance: f64,
    pub steps: usize,
    pub robot_path: Vec<Vec2>,
}

fn clearance(robot: &SimAgent, humans: &[SimAgent]) -> f64 {
    humans
        .iter()
        .map(|h| robot.distance_to(h.position) - robot.radius - h.radius)
        .fold(f64::INFINITY, f64::min)
}

/// Simulates one episode.
///
/// Humans follow the social-force model among themselves. The robot uses the
/// same model against the humans' current positions; the predictive
/// navigator adds [`predictor_force`] once enough history is recorded, with
/// predictions refreshed at the predictor's history rate.
pub fn run_episode(scenario: &Scenario, navigator: Navigator<'_>, cfg: &EpisodeConfig) -> Result<EpisodeResult> {
    scenario.validate()?;
    cfg.params.validate()?;
    if !(cfg.timeout > 0.0) || !(cfg.goal_tolerance > 0.0) {
        return Err(Error::contract("timeout and goal tolerance must be positive"));
    }
    let dt = cfg.params.dt;
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::contract(format!("step {dt} s outside (0, 0.1]")));
    }
    let sample_every = match navigator {
        Navigator::Baseline => 0,
        Navigator::Predictive(p) => {
            let ratio = 1.0 / (p.history_fps() * dt);
            let every = ratio.round();
            if every < 1.0 || (ratio - every).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "history rate {} fps is not a whole number of {dt} s steps",
                    p.history_fps()
                )));
            }
            every as usize
        }
    };

    let mut robot = scenario.robot.spawn();
    let mut humans: Vec<SimAgent> = scenario.humans.iter().map(AgentSpec::spawn).collect();
    let mut histories: Vec<Vec<Vec2>> = vec![Vec::new(); humans.len()];
    let mut predictions: Vec<Vec<Vec2>> = Vec::new();
    let max_steps = (cfg.timeout / dt).round() as usize;
    let mut path = vec![robot.position];
    let mut min_clear = clearance(&robot, &humans);
    let human_radius = scenario.humans.first().map_or(0.3, |h| h.radius);

    for step in 0..max_steps {
        if let Navigator::Predictive(p) = navigator {
            if step % sample_every == 0 {
                for (h, a) in histories.iter_mut().zip(&humans) {
                    h.push(a.position);
                }
                if !humans.is_empty() && histories[0].len() >= p.history_frames() {
                    predictions = p.predict(&histories)?;
                }
            }
        }

        let mut acc = driving_force(&robot, &cfg.params);
        for (j, h) in humans.iter().enumerate() {
            let f = pair_repulsion(robot.position, h.position, robot.radius + h.radius, &cfg.params, || {
                tie_direction(cfg.params.tie_seed, usize::MAX, j)
            });
            acc[0] += f[0];
            acc[1] += f[1];
        }
        if !predictions.is_empty() {
            let f = predictor_force(&robot, &predictions, human_radius, &cfg.params);
            acc[0] += f[0];
            acc[1] += f[1];
        }

        let human_acc = if cfg.robot_visible {
            let mut all = humans.clone();
            all.push(robot);
            let mut a = accelerations(&all, &cfg.params);
            a.pop();
            a
        } else {
            accelerations(&humans, &cfg.params)
        };
        robot = integrate(&robot, acc, dt);
        humans = humans.iter().zip(human_acc).map(|(h, a)| integrate(h, a, dt)).collect();
        path.push(robot.position);

        let clear = clearance(&robot, &humans);
        min_clear = min_clear.min(clear);
        let t = (step + 1) as f64 * dt;
        if clear < 0.0 {
            return Ok(EpisodeResult {
                completion_time: None,
                timed_out: false,
                collided: true,
                min_clearance: min_clear,
                steps: step + 1,
                robot_path: path,
            });
        }
        if robot.distance_to(robot.goal) <= cfg.goal_tolerance {
            return Ok(EpisodeResult {
                completion_time: Some(t),
                timed_out: false,
                collided: false,
                min_clearance: min_clear,
                steps: step + 1,
                robot_path: path,
            });
        }
    }
    Ok(EpisodeResult {
        completion_time: None,
        timed_out: true,
        collided: false,
        min_clearance: min_clear,
        steps: max_steps,
        robot_path: path,
    })
}
