//! Paired baseline-versus-predictive navigation benchmark.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{run_episode, AgentSpec, EpisodeConfig, EpisodeResult, Navigator, Scenario, TrajectoryPredictor};
use crate::error::{Error, Result};

/// A robot crossing the arena left to right while 1 to 3 pedestrians cross
/// its path, timed to reach the crossing point near the robot's arrival.
pub fn crossing_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC055);
    let half = [8.0, 8.0];
    let robot = AgentSpec::new([-6.0, 0.0], [6.0, 0.0]);
    let n = rng.gen_range(1..=3);
    let humans = (0..n)
        .map(|_| {
            let x_c: f64 = rng.gen_range(-2.0..3.0);
            let speed: f64 = rng.gen_range(1.0..1.5);
            let arrival = (x_c + 6.0) / robot.desired_speed + rng.gen_range(-2.0..2.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y0 = (side * speed * arrival).clamp(-7.5, 7.5);
            let drift: f64 = rng.gen_range(-0.5..0.5);
            AgentSpec {
                start: [x_c - drift, y0],
                goal: [x_c + drift, -side * 7.5],
                radius: 0.3,
                desired_speed: speed,
            }
        })
        .collect();
    Scenario {
        arena_half_extents: half,
        robot,
        humans,
    }
}

/// `n` crossing scenarios with seeds `base_seed..base_seed + n`.
pub fn crossing_suite(base_seed: u64, n: usize) -> Vec<(u64, Scenario)> {
    (0..n as u64).map(|i| (base_seed + i, crossing_scenario(base_seed + i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub seed: u64,
    pub navigator: String,
    pub completion_time: Option<f64>,
    pub collided: bool,
    pub timed_out: bool,
    pub min_clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavigatorSummary {
    pub navigator: String,
    pub episodes: usize,
    /// Mean over episodes that reached the goal.
    pub mean_completion_time: Option<f64>,
    pub collision_rate: f64,
    pub collisions: usize,
    pub timeouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub baseline: NavigatorSummary,
    pub predictive: NavigatorSummary,
    /// Relative change of the predictive navigator, percent; negative is better.
    pub completion_gain_pct: Option<f64>,
    pub collision_gain_pct: Option<f64>,
}

fn summarize(name: &str, results: &[EpisodeResult]) -> NavigatorSummary {
    let done: Vec<f64> = results.iter().filter_map(|r| r.completion_time).collect();
    let collisions = results.iter().filter(|r| r.collided).count();
    NavigatorSummary {
        navigator: name.into(),
        episodes: results.len(),
        mean_completion_time: (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64),
        collision_rate: if results.is_empty() {
            0.0
        } else {
            collisions as f64 / results.len() as f64
        },
        collisions,
        timeouts: results.iter().filter(|r| r.timed_out).count(),
    }
}

fn gain(base: f64, new: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (new - base) / base)
}

pub fn summarize_pair(baseline: &[EpisodeResult], predictive: &[EpisodeResult]) -> BenchmarkSummary {
    let b = summarize("baseline", baseline);
    let p = summarize("predictive", predictive);
    BenchmarkSummary {
        completion_gain_pct: match (b.mean_completion_time, p.mean_completion_time) {
            (Some(x), Some(y)) => gain(x, y),
            _ => None,
        },
        collision_gain_pct: gain(b.collision_rate, p.collision_rate),
        baseline: b,
        predictive: p,
    }
}

pub struct BenchmarkOutcome {
    pub baseline: Vec<EpisodeResult>,
    pub predictive: Vec<EpisodeResult>,
    pub rows: Vec<EpisodeRow>,
    pub summary: BenchmarkSummary,
}

/// Runs every scenario under both navigators with identical settings.
pub fn benchmark(scenarios: &[(u64, Scenario)], predictor: &dyn TrajectoryPredictor, cfg: &EpisodeConfig) -> Result<BenchmarkOutcome> {
    let run = |nav: Navigator<'_>| -> Result<Vec<EpisodeResult>> {
        scenarios.par_iter().map(|(_, s)| run_episode(s, nav, cfg)).collect()
    };
    let baseline = run(Navigator::Baseline)?;
    let predictive = run(Navigator::Predictive(predictor))?;
    let mut rows = Vec::with_capacity(2 * scenarios.len());
    for (name, results) in [("baseline", &baseline), ("predictive", &predictive)] {
        for ((seed, _), r) in scenarios.iter().zip(results.iter()) {
            rows.push(EpisodeRow {
                seed: *seed,
                navigator: name.into(),
                completion_time: r.completion_time,
                collided: r.collided,
                timed_out: r.timed_out,
                min_clearance: r.min_clearance,
            });
        }
    }
    let summary = summarize_pair(&baseline, &predictive);
    Ok(BenchmarkOutcome {
        baseline,
        predictive,
        rows,
        summary,
    })
}

pub fn write_episode_csv<W: Write>(w: W, rows: &[EpisodeRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Data(format!("writing episodes: {e}")))?;
    }
    out.flush().map_err(|e| Error::io("<episodes>", e))
}
