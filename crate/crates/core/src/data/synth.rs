//! Procedural multi-agent scenes.
//!
//! Walkers move under the social-force stepper toward distant goals; some
//! switch goal shortly before the end of the observation window. The body turns
//! toward a new goal faster than the velocity follows, so the emitted pose
//! (shoulder line, limb swing) carries information about the upcoming path.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{AgentTrack, FrameSettings, Modality, ModalityTensor, SceneRecord};
use super::vocab::joint;
use crate::error::{Error, Result};
use crate::navsim::social_force::{self, SFParams, SimAgent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Inclusive agent-count range.
    pub agents: [usize; 2],
    /// Half side length of the square spawn area, meters.
    pub arena: f64,
    /// Desired walking speed range, m/s.
    pub speed: [f64; 2],
    pub settings: FrameSettings,
    /// Frames simulated before the recorded window starts.
    pub warmup_frames: usize,
    /// Probability that a walker switches goal near the end of observation.
    pub turn_probability: f64,
    /// A switching walker turns within this many frames before the last
    /// observed frame.
    pub turn_window: usize,
    /// Turn angle range in degrees (sign drawn separately).
    pub turn_degrees: [f64; 2],
    /// Time constant of the body yaw toward the goal direction, seconds.
    pub yaw_time: f64,
    pub relaxation_time: f64,
    pub pose: bool,
    pub boxes: bool,
    pub image: bool,
    /// Gaussian jitter added to pose joints, meters.
    pub pose_noise: f64,
    pub scene_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            agents: [2, 4],
            arena: 5.0,
            speed: [0.8, 1.6],
            settings: FrameSettings::default(),
            warmup_frames: 3,
            turn_probability: 0.5,
            turn_window: 3,
            turn_degrees: [40.0, 100.0],
            yaw_time: 0.1,
            relaxation_time: 0.8,
            pose: true,
            boxes: false,
            image: false,
            pose_noise: 0.0,
            scene_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.agents[0] == 0 || self.agents[0] > self.agents[1] {
            return bad("agent range must satisfy 1 <= min <= max");
        }
        if !(self.arena > 0.0) {
            return bad("arena must be positive");
        }
        if !(self.speed[0] > 0.0 && self.speed[0] <= self.speed[1]) {
            return bad("speed range must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.turn_probability) {
            return bad("turn_probability must lie in [0, 1]");
        }
        if !(self.yaw_time > 0.0 && self.relaxation_time > 0.0) {
            return bad("time constants must be positive");
        }
        if self.pose_noise < 0.0 {
            return bad("pose_noise must be non-negative");
        }
        self.settings.t_obs()?;
        self.settings.t_pred()?;
        Ok(())
    }
}

/// A generated scene plus the generator's body yaw per agent and frame.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub record: SceneRecord,
    pub headings: Vec<Vec<f64>>,
}

/// Deterministic in `seed`; scene `i` depends only on `(seed, i)`.
pub fn synth_generate(seed: u64, n_scenes: usize, cfg: &SynthConfig) -> Result<Vec<SceneRecord>> {
    Ok(synth_generate_with_truth(seed, n_scenes, cfg)?
        .into_iter()
        .map(|s| s.record)
        .collect())
}

pub fn synth_generate_with_truth(seed: u64, n_scenes: usize, cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    (0..n_scenes).map(|i| generate_scene(seed, i, cfg)).collect()
}

const SEGMENT: f64 = 0.45;
const STRIDE_LENGTH: f64 = 1.4;
const GOAL_DISTANCE: f64 = 30.0;

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

struct Walker {
    yaw: f64,
    phase: f64,
    turn_at: Option<usize>,
    turn_angle: f64,
}

fn generate_scene(seed: u64, index: usize, cfg: &SynthConfig) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let fps = cfg.settings.fps.get();
    let t_obs = cfg.settings.t_obs()?;
    let t_pred = cfg.settings.t_pred()?;
    let frames = t_obs + t_pred;
    let steps_per_frame = ((1.0 / fps) / 0.04).ceil().max(1.0) as usize;
    let dt = 1.0 / (fps * steps_per_frame as f64);
    let params = SFParams {
        tau: cfg.relaxation_time,
        tie_seed: seed ^ index as u64,
        ..SFParams::default()
    };

    let n = rng.gen_range(cfg.agents[0]..=cfg.agents[1]);
    let mut agents: Vec<SimAgent> = Vec::with_capacity(n);
    let mut walkers = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pos = [0.0, 0.0];
        for _ in 0..100 {
            pos = [rng.gen_range(-cfg.arena..cfg.arena), rng.gen_range(-cfg.arena..cfg.arena)];
            if agents.iter().all(|a| a.distance_to(pos) > 1.0) {
                break;
            }
        }
        let heading = rng.gen_range(-PI..PI);
        let speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
        let dir = [heading.cos(), heading.sin()];
        agents.push(SimAgent {
            position: pos,
            velocity: [dir[0] * speed, dir[1] * speed],
            goal: [pos[0] + GOAL_DISTANCE * dir[0], pos[1] + GOAL_DISTANCE * dir[1]],
            radius: 0.3,
            desired_speed: speed,
        });
        let turns = cfg.turn_window > 0 && rng.gen_bool(cfg.turn_probability);
        let lo = t_obs.saturating_sub(cfg.turn_window);
        let turn_at = turns.then(|| cfg.warmup_frames + rng.gen_range(lo..t_obs));
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let turn_angle = sign * rng.gen_range(cfg.turn_degrees[0]..=cfg.turn_degrees[1]).to_radians();
        walkers.push(Walker {
            yaw: heading,
            phase: rng.gen_range(0.0..TAU),
            turn_at,
            turn_angle,
        });
    }

    let total = cfg.warmup_frames + frames;
    let mut positions = vec![vec![[0.0; 2]; frames]; n];
    let mut poses = vec![vec![[[0.0; 3]; POSE_JOINTS.len()]; frames]; n];
    let mut headings = vec![vec![0.0; frames]; n];
    for frame in 0..total {
        for (a, w) in agents.iter_mut().zip(&walkers) {
            if w.turn_at == Some(frame) {
                let h = a.desired_direction();
                let ang = h[1].atan2(h[0]) + w.turn_angle;
                a.goal = [
                    a.position[0] + GOAL_DISTANCE * ang.cos(),
                    a.position[1] + GOAL_DISTANCE * ang.sin(),
                ];
            }
        }
        if frame >= cfg.warmup_frames {
            let f = frame - cfg.warmup_frames;
            for i in 0..n {
                positions[i][f] = agents[i].position;
                poses[i][f] = gait_pose(&agents[i], &walkers[i]);
                headings[i][f] = walkers[i].yaw;
            }
        }
        for _ in 0..steps_per_frame {
            let next = social_force::sf_step(&agents, &params, dt)?;
            for ((a, w), nx) in agents.iter().zip(walkers.iter_mut()).zip(&next) {
                let d = a.desired_direction();
                let target = d[1].atan2(d[0]);
                w.yaw = wrap(w.yaw + wrap(target - w.yaw) * (dt / cfg.yaw_time).min(1.0));
                w.phase = (w.phase + TAU * nx.speed() * dt / STRIDE_LENGTH).rem_euclid(TAU);
            }
            agents = next;
        }
    }

    let noise = Normal::new(0.0, cfg.pose_noise.max(0.0)).expect("finite std");
    let mut tracks = Vec::with_capacity(n);
    for i in 0..n {
        let traj_values = positions[i].iter().flatten().copied().collect();
        let traj = ModalityTensor::new(Modality::Traj, frames, traj_values, vec![true; frames])?;
        let mut track = AgentTrack::new(i.to_string(), traj);
        if cfg.pose_noise > 0.0 {
            for frame in poses[i].iter_mut() {
                for j in frame.iter_mut() {
                    for c in j.iter_mut() {
                        *c += noise.sample(&mut rng);
                    }
                }
            }
        }
        if cfg.pose {
            let mut p = ModalityTensor::empty(Modality::Pose3d, frames);
            for (t, frame) in poses[i].iter().enumerate() {
                for (k, &slot) in POSE_JOINTS.iter().enumerate() {
                    p.set(t, slot, Some(&frame[k]));
                }
            }
            track.pose3d = Some(p);
        }
        if cfg.boxes {
            let mut b = ModalityTensor::empty(Modality::Box3d, frames);
            for (t, pos) in positions[i].iter().enumerate() {
                b.set(t, 0, Some(&[pos[0] - 0.3, pos[1] - 0.3, 0.0]));
                b.set(t, 1, Some(&[pos[0] + 0.3, pos[1] + 0.3, 1.75]));
            }
            track.bbox3d = Some(b);
        }
        if cfg.image {
            let mut p2 = ModalityTensor::empty(Modality::Pose2d, frames);
            let mut b2 = ModalityTensor::empty(Modality::Box2d, frames);
            for (t, frame) in poses[i].iter().enumerate() {
                let mut lo = [f64::INFINITY; 2];
                let mut hi = [f64::NEG_INFINITY; 2];
                for (k, &slot) in POSE_JOINTS.iter().enumerate() {
                    let uv = project(frame[k]);
                    p2.set(t, slot, Some(&uv));
                    for c in 0..2 {
                        lo[c] = lo[c].min(uv[c]);
                        hi[c] = hi[c].max(uv[c]);
                    }
                }
                b2.set(t, 0, Some(&lo));
                b2.set(t, 1, Some(&hi));
            }
            track.pose2d = Some(p2);
            track.bbox2d = Some(b2);
            track.img_wh = Some(IMAGE_WH);
        }
        tracks.push(track);
    }

    Ok(SynthScene {
        record: SceneRecord {
            scene_id: format!("{}-{seed}-{index:05}", cfg.scene_prefix),
            fps: cfg.settings.fps,
            t_obs,
            t_pred,
            agents: tracks,
        },
        headings,
    })
}

const IMAGE_WH: [f64; 2] = [1280.0, 720.0];

/// Fixed oblique camera: meters to pixels.
fn project(p: [f64; 3]) -> [f64; 2] {
    [640.0 + 60.0 * p[0], 360.0 + 20.0 * p[1] - 60.0 * (p[2] - 0.9)]
}

/// Unified slots filled by the procedural skeleton.
pub const POSE_JOINTS: [usize; 15] = [
    joint::PELVIS,
    joint::RIGHT_HIP,
    joint::RIGHT_KNEE,
    joint::RIGHT_ANKLE,
    joint::LEFT_HIP,
    joint::LEFT_KNEE,
    joint::LEFT_ANKLE,
    joint::NECK,
    joint::HEAD_CENTER,
    joint::LEFT_SHOULDER,
    joint::LEFT_ELBOW,
    joint::LEFT_WRIST,
    joint::RIGHT_SHOULDER,
    joint::RIGHT_ELBOW,
    joint::RIGHT_WRIST,
];

fn gait_pose(agent: &SimAgent, w: &Walker) -> [[f64; 3]; 15] {
    let f = [w.yaw.cos(), w.yaw.sin()];
    let l = [-f[1], f[0]];
    let [x, y] = agent.position;
    // body frame (forward, left, up) to world
    let at = |fw: f64, lf: f64, up: f64| [x + fw * f[0] + lf * l[0], y + fw * f[1] + lf * l[1], up];
    let amp = 0.45 * (agent.speed() / 1.3).min(1.2);
    let leg = |side: f64, seg: f64| {
        let th = side * amp * w.phase.sin();
        let hip_z = 0.92;
        (seg * th.sin(), hip_z - seg * th.cos())
    };
    let arm = |side: f64, seg: f64| {
        let th = -side * 0.7 * amp * w.phase.sin();
        (seg * th.sin(), 1.45 - seg * th.cos())
    };
    let (rk_f, rk_z) = leg(-1.0, SEGMENT);
    let (ra_f, ra_z) = leg(-1.0, 2.0 * SEGMENT);
    let (lk_f, lk_z) = leg(1.0, SEGMENT);
    let (la_f, la_z) = leg(1.0, 2.0 * SEGMENT);
    let (le_f, le_z) = arm(1.0, 0.3);
    let (lw_f, lw_z) = arm(1.0, 0.55);
    let (re_f, re_z) = arm(-1.0, 0.3);
    let (rw_f, rw_z) = arm(-1.0, 0.55);
    [
        at(0.0, 0.0, 0.95),
        at(0.0, -0.1, 0.92),
        at(rk_f, -0.1, rk_z),
        at(ra_f, -0.1, ra_z),
        at(0.0, 0.1, 0.92),
        at(lk_f, 0.1, lk_z),
        at(la_f, 0.1, la_z),
        at(0.0, 0.0, 1.5),
        at(0.04, 0.0, 1.65),
        at(0.0, 0.2, 1.45),
        at(le_f, 0.2, le_z),
        at(lw_f, 0.2, lw_z),
        at(0.0, -0.2, 1.45),
        at(re_f, -0.2, re_z),
        at(rw_f, -0.2, rw_z),
    ]
}
