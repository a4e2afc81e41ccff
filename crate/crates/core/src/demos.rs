//! Scripted expert for the two-door world.
//!
//! Each demo follows two cubic Bézier segments with horizontal end tangents,
//! start → door → goal, giving the S-curve shape. Waypoints get Gaussian
//! jitter before the curve is built. The agent walks the curve at a fixed
//! fraction of the speed cap and the result is replayed through the
//! environment; demos that fail are redrawn.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{NavEnv, Outcome};
use crate::error::{CoreError, Result};
use crate::rng;
use crate::rollout::{Trajectory, TrajectoryMeta, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub count: usize,
    pub chunk_len: usize,
    /// Std of the Gaussian waypoint jitter.
    pub jitter: f64,
    /// Walking speed as a fraction of the speed cap.
    pub speed_fraction: f64,
    /// Redraws allowed per demo before giving up.
    pub max_attempts: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            count: 200,
            chunk_len: 8,
            jitter: 0.01,
            speed_fraction: 0.9,
            max_attempts: 100,
        }
    }
}

type Point = [f64; 2];

fn bezier(p: [Point; 4], s: f64) -> Point {
    let u = 1.0 - s;
    let w = [u * u * u, 3.0 * u * u * s, 3.0 * u * s * s, s * s * s];
    let mut out = [0.0; 2];
    for (wi, pi) in w.iter().zip(&p) {
        out[0] += wi * pi[0];
        out[1] += wi * pi[1];
    }
    out
}

/// Cubic from `a` to `b` leaving and arriving horizontally.
fn s_curve(a: Point, b: Point) -> [Point; 4] {
    let h = 0.5 * (b[0] - a[0]);
    [a, [a[0] + h, a[1]], [b[0] - h, b[1]], b]
}

/// Dense polyline of the expert path through door `door`.
fn expert_polyline<R: Rng>(env: &NavEnv, door: usize, jitter: f64, rng: &mut R) -> Result<Vec<Point>> {
    let c = env.config();
    let noise = Normal::new(0.0, jitter).map_err(|e| CoreError::Config(e.to_string()))?;
    let mut n = || noise.sample(rng);
    let gate = [c.wall_x, c.doors[door].center_y + n()];
    let goal = [c.goal[0] + n(), c.goal[1] + n()];
    let mut pts = Vec::with_capacity(801);
    for (k, seg) in [s_curve(c.start, gate), s_curve(gate, goal)].into_iter().enumerate() {
        for i in usize::from(k > 0)..=400 {
            pts.push(bezier(seg, i as f64 / 400.0));
        }
    }
    Ok(pts)
}

/// Points spaced `step` apart along the polyline, by arc length.
fn resample(poly: &[Point], step: f64) -> Vec<Point> {
    let mut out = vec![poly[0]];
    let mut next = step;
    let mut travelled = 0.0;
    for w in poly.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        while d > 0.0 && travelled + d >= next {
            let s = (next - travelled) / d;
            out.push([w[0][0] + s * (w[1][0] - w[0][0]), w[0][1] + s * (w[1][1] - w[0][1])]);
            next += step;
        }
        travelled += d;
    }
    out
}

/// Executes per-step velocities from reset, returning the positions visited
/// and the final outcome. Stops at the first terminal state.
pub fn replay(env: &NavEnv, velocities: &[[f64; 2]]) -> Result<(Vec<Point>, Outcome, usize)> {
    let mut s = env.reset();
    let mut path = vec![s.position];
    for (i, v) in velocities.iter().enumerate() {
        s = env.step(&s, *v)?;
        path.push(s.position);
        if s.is_terminal() {
            return Ok((path, s.outcome, i + 1));
        }
    }
    Ok((path, s.outcome, velocities.len()))
}

/// Groups per-step actions (policy units) into padded chunks.
pub fn chunk_actions(actions: &[[f64; 2]], chunk_len: usize) -> Vec<Vec<f64>> {
    actions
        .chunks(chunk_len)
        .map(|c| {
            let last = c[c.len() - 1];
            (0..chunk_len)
                .flat_map(|i| c.get(i).copied().unwrap_or(last))
                .collect()
        })
        .collect()
}

/// Successful expert demos alternating between doors, so door counts differ
/// by at most one.
pub fn generate_expert_demos(env: &NavEnv, config: &DemoConfig, seed: u64) -> Result<Vec<Trajectory>> {
    if config.count == 0 {
        return Err(CoreError::Config("demo count must be at least 1".into()));
    }
    if config.chunk_len == 0 || !(config.speed_fraction > 0.0 && config.speed_fraction <= 1.0) {
        return Err(CoreError::Config("invalid chunk length or speed fraction".into()));
    }
    let cap = env.config().speed_cap;
    let step = cap * config.speed_fraction;
    let doors = env.config().doors.len();
    (0..config.count)
        .map(|i| {
            let door = i % doors;
            let mut r = rng::rng(rng::substream(seed, i as u64));
            for _ in 0..config.max_attempts {
                let poly = expert_polyline(env, door, config.jitter, &mut r)?;
                let pts = resample(&poly, step);
                let velocities: Vec<Point> = pts
                    .windows(2)
                    .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
                    .collect();
                let (path, outcome, used) = replay(env, &velocities)?;
                if outcome != Outcome::Success || env.crossing_door(&path) != Some(door) {
                    continue;
                }
                let actions: Vec<Point> = velocities[..used]
                    .iter()
                    .map(|v| [v[0] / cap, v[1] / cap])
                    .collect();
                let chunks = chunk_actions(&actions, config.chunk_len);
                let transitions: Vec<Transition> = chunks
                    .into_iter()
                    .enumerate()
                    .map(|(t, action)| Transition {
                        state: path[t * config.chunk_len].to_vec(),
                        action,
                        t,
                    })
                    .collect();
                return Ok(Trajectory {
                    success_step: Some(transitions.len() - 1),
                    transitions,
                    success: true,
                    outcome,
                    path,
                    meta: TrajectoryMeta {
                        policy: String::new(),
                        seed,
                        episode: i,
                    },
                });
            }
            Err(CoreError::DemoGeneration(format!(
                "demo {i} through door {door} failed {} attempts",
                config.max_attempts
            )))
        })
        .collect()
}
