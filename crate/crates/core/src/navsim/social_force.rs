//! Helbing-style social force dynamics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Ratio of the speed cap to the desired speed.
pub const SPEED_CAP_FACTOR: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAgent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub goal: Vec2,
    pub radius: f64,
    pub desired_speed: f64,
}

impl SimAgent {
    /// Agent at rest at `position` heading for `goal` with default radius
    /// and speed.
    pub fn new(position: Vec2, goal: Vec2) -> Self {
        Self {
            position,
            velocity: [0.0, 0.0],
            goal,
            radius: 0.3,
            desired_speed: 1.3,
        }
    }

    pub fn speed(&self) -> f64 {
        norm(self.velocity)
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        norm(sub(p, self.position))
    }

    /// Unit vector from the agent toward its goal, or zero at the goal.
    pub fn desired_direction(&self) -> Vec2 {
        let d = sub(self.goal, self.position);
        let n = norm(d);
        if n < 1e-9 {
            [0.0, 0.0]
        } else {
            [d[0] / n, d[1] / n]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SFParams {
    /// Relaxation time τ in seconds.
    pub tau: f64,
    /// Repulsion strength A.
    pub a: f64,
    /// Repulsion range B in meters.
    pub b: f64,
    /// Weight on prediction-derived repulsion.
    pub predictor_gain: f64,
    /// Per-step discount γ on predicted positions.
    pub gamma: f64,
    pub dt: f64,
    /// Seed for the coincident-agent tie-break direction.
    pub tie_seed: u64,
}

impl Default for SFParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            a: 2.0,
            b: 0.3,
            predictor_gain: 1.0,
            gamma: 0.9,
            dt: 0.04,
            tie_seed: 0,
        }
    }
}

impl SFParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.b > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("tau, b and dt must be positive".into()));
        }
        if !(self.a >= 0.0 && self.predictor_gain >= 0.0) {
            return Err(Error::Config("a and predictor_gain must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded unit vector for the unordered pair `{i, j}`. The caller flips it for
/// the higher index so the pair pushes apart symmetrically.
pub fn tie_direction(seed: u64, i: usize, j: usize) -> Vec2 {
    let (lo, hi) = (i.min(j) as u64, i.max(j) as u64);
    let h = splitmix(seed ^ splitmix(lo ^ splitmix(hi)));
    let angle = (h >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
    [angle.cos(), angle.sin()]
}

/// Repulsion on a body at `p_i` from one at `p_j`: A·exp((r_sum − d)/B)·n̂.
///
/// `tie` supplies the direction when the two positions coincide.
pub fn pair_repulsion(p_i: Vec2, p_j: Vec2, r_sum: f64, params: &SFParams, tie: impl FnOnce() -> Vec2) -> Vec2 {
    let diff = sub(p_i, p_j);
    let d = norm(diff);
    let n = if d > 0.0 { [diff[0] / d, diff[1] / d] } else { tie() };
    let mag = params.a * ((r_sum - d) / params.b).exp();
    [mag * n[0], mag * n[1]]
}

/// Goal-attraction term (v_desired − v)/τ.
pub fn driving_force(agent: &SimAgent, params: &SFParams) -> Vec2 {
    let dir = agent.desired_direction();
    [
        (dir[0] * agent.desired_speed - agent.velocity[0]) / params.tau,
        (dir[1] * agent.desired_speed - agent.velocity[1]) / params.tau,
    ]
}

/// Symplectic Euler update with the speed cap applied to the new velocity.
pub fn integrate(agent: &SimAgent, accel: Vec2, dt: f64) -> SimAgent {
    let mut v = [agent.velocity[0] + accel[0] * dt, agent.velocity[1] + accel[1] * dt];
    let cap = SPEED_CAP_FACTOR * agent.desired_speed;
    let s = norm(v);
    if s > cap {
        v = [v[0] * cap / s, v[1] * cap / s];
    }
    SimAgent {
        position: [agent.position[0] + v[0] * dt, agent.position[1] + v[1] * dt],
        velocity: v,
        ..*agent
    }
}

/// Accelerations of all agents under goal attraction and pairwise repulsion.
pub fn accelerations(agents: &[SimAgent], params: &SFParams) -> Vec<Vec2> {
    agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut acc = driving_force(a, params);
            for (j, b) in agents.iter().enumerate() {
                if i == j {
                    continue;
                }
                let f = pair_repulsion(a.position, b.position, a.radius + b.radius, params, || {
                    let t = tie_direction(params.tie_seed, i, j);
                    if i < j {
                        t
                    } else {
                        [-t[0], -t[1]]
                    }
                });
                acc[0] += f[0];
                acc[1] += f[1];
            }
            acc
        })
        .collect()
}

/// Advances every agent by one step of `dt` seconds.
pub fn sf_step(agents: &[SimAgent], params: &SFParams, dt: f64) -> Result<Vec<SimAgent>> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::contract(format!("step {dt} s outside (0, 0.1]")));
    }
    let acc = accelerations(agents, params);
    Ok(agents.iter().zip(acc).map(|(a, f)| integrate(a, f, dt)).collect())
}

/// Extra repulsion on `robot` from neighbors' predicted positions.
///
/// Step `t` (1-based) of each prediction contributes
/// γ^t·A·exp((r_sum − d_t)/B)·n̂_t, scaled by the predictor gain. Positions
/// farther than `r_sum + 5B` contribute nothing.
pub fn predictor_force(robot: &SimAgent, predictions: &[Vec<Vec2>], neighbor_radius: f64, params: &SFParams) -> Vec2 {
    let r_sum = robot.radius + neighbor_radius;
    let cutoff = r_sum + 5.0 * params.b;
    let mut total = [0.0, 0.0];
    for (n, pred) in predictions.iter().enumerate() {
        let mut discount = 1.0;
        for (t, &p) in pred.iter().enumerate() {
            discount *= params.gamma;
            if robot.distance_to(p) > cutoff {
                continue;
            }
            let f = pair_repulsion(robot.position, p, r_sum, params, || {
                tie_direction(params.tie_seed ^ 0x5EED, n, t + 1_000_000)
            });
            total[0] += discount * f[0];
            total[1] += discount * f[1];
        }
    }
    [total[0] * params.predictor_gain, total[1] * params.predictor_gain]
}
