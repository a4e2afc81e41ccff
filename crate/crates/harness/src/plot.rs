//! SVG plots of rollouts and of verifier score landscapes.
//!
//! World coordinates live in the unit square. They map to pixels through
//! [`Viewport`]: `px = margin + x·size`, `py = margin + (1 − y)·size`, so y
//! points up in the picture.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use veristeer_core::{EnvConfig, Trajectory, Verifier};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub size: f64,
    pub margin: f64,
}

impl Default for Viewport {
    fn default() -> Self {
        Self {
            size: 500.0,
            margin: 20.0,
        }
    }
}

impl Viewport {
    pub fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (self.margin + p[0] * self.size, self.margin + (1.0 - p[1]) * self.size)
    }

    fn width(&self) -> f64 {
        self.size + 2.0 * self.margin
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Wall segments, doors, goal and start.
fn scene(env: &EnvConfig, vp: &Viewport, out: &mut String) {
    let (x0, y0) = vp.px([0.0, 1.0]);
    let _ = writeln!(
        out,
        r##"<rect class="workspace" x="{x0:.2}" y="{y0:.2}" width="{s:.2}" height="{s:.2}" fill="#fafafa" stroke="#333"/>"##,
        s = vp.size
    );
    let mut doors: Vec<_> = env.doors.clone();
    doors.sort_by(|a, b| a.lo().total_cmp(&b.lo()));
    let mut y = 0.0;
    let mut solid = Vec::new();
    for d in &doors {
        solid.push((y, d.lo()));
        y = d.hi();
    }
    solid.push((y, 1.0));
    for (lo, hi) in solid.into_iter().filter(|(lo, hi)| hi > lo) {
        let (x, top) = vp.px([env.wall_left(), hi]);
        let _ = writeln!(
            out,
            r##"<rect class="wall" x="{x:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="#555"/>"##,
            w = env.wall_thickness * vp.size,
            h = (hi - lo) * vp.size
        );
    }
    for (i, d) in env.doors.iter().enumerate() {
        let (x, top) = vp.px([env.wall_x, d.hi()]);
        let (_, bottom) = vp.px([env.wall_x, d.lo()]);
        let _ = writeln!(
            out,
            r##"<line class="door" data-door="{i}" x1="{x:.2}" y1="{top:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="#2a9d8f" stroke-width="2" stroke-dasharray="4 2"/>"##
        );
    }
    let (gx, gy) = vp.px(env.goal);
    let _ = writeln!(
        out,
        r##"<circle class="goal" cx="{gx:.2}" cy="{gy:.2}" r="{r:.2}" fill="none" stroke="#e9c46a" stroke-width="2"/>"##,
        r = env.goal_radius * vp.size
    );
    let (sx, sy) = vp.px(env.start);
    let _ = writeln!(out, r##"<circle class="start" cx="{sx:.2}" cy="{sy:.2}" r="4" fill="#264653"/>"##);
}

/// Rollouts drawn over the scene, green for successes and red otherwise.
pub fn trajectories_svg(trajectories: &[Trajectory], env: &EnvConfig) -> Result<String> {
    if trajectories.is_empty() {
        return Err(HarnessError::EmptyPlot("no trajectories"));
    }
    let vp = Viewport::default();
    let w = vp.width();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#,
        h = w + 40.0
    );
    scene(env, &vp, &mut out);
    let successes = trajectories.iter().filter(|t| t.success).count();
    for t in trajectories {
        let points: Vec<String> = t
            .path
            .iter()
            .map(|&p| {
                let (x, y) = vp.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let (class, color) = if t.success {
            ("success", "#2a9d8f")
        } else {
            ("failure", "#e76f51")
        };
        let _ = writeln!(
            out,
            r#"<polyline class="trajectory {class}" points="{}" fill="none" stroke="{color}" stroke-opacity="0.5" stroke-width="1"/>"#,
            points.join(" ")
        );
    }
    let ly = w + 15.0;
    let _ = writeln!(
        out,
        r##"<g class="legend" font-family="sans-serif" font-size="13"><line x1="20" y1="{ly}" x2="40" y2="{ly}" stroke="#2a9d8f" stroke-width="2"/><text x="45" y="{ty}">success ({successes})</text><line x1="170" y1="{ly}" x2="190" y2="{ly}" stroke="#e76f51" stroke-width="2"/><text x="195" y="{ty}">failure ({failures})</text></g>"##,
        ty = ly + 4.0,
        failures = trajectories.len() - successes
    );
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn plot_trajectories(trajectories: &[Trajectory], env: &EnvConfig, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &trajectories_svg(trajectories, env)?)
}

/// Verifier scores of straight probe chunks toward each grid cell centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub state: Vec<f64>,
    pub grid: usize,
    /// `scores[j][i]` belongs to the cell with centre `(centers[i], centers[j])`.
    pub scores: Vec<Vec<f64>>,
    pub centers: Vec<f64>,
}

/// A chunk of `chunk_len` unit-speed actions (policy units) pointing from
/// `state` at `target`.
pub fn probe_chunk(state: &[f64], target: [f64; 2], chunk_len: usize) -> Vec<f64> {
    let (dx, dy) = (target[0] - state[0], target[1] - state[1]);
    let norm = (dx * dx + dy * dy).sqrt();
    let dir = if norm > 0.0 { [dx / norm, dy / norm] } else { [0.0, 0.0] };
    (0..chunk_len).flat_map(|_| dir).collect()
}

/// Scores every cell of a `grid × grid` partition of the unit square at chunk index 0.
pub fn landscape(verifier: &dyn Verifier, state: &[f64], chunk_len: usize, grid: usize) -> Result<Landscape> {
    if grid < 2 {
        return Err(HarnessError::Config("landscape grid must be at least 2×2".into()));
    }
    let centers: Vec<f64> = (0..grid).map(|i| (i as f64 + 0.5) / grid as f64).collect();
    let scores = centers
        .iter()
        .map(|&y| {
            let chunks: Vec<Vec<f64>> = centers.iter().map(|&x| probe_chunk(state, [x, y], chunk_len)).collect();
            Ok(verifier.score(state, 0, &chunks)?)
        })
        .collect::<Result<_>>()?;
    Ok(Landscape {
        state: state.to_vec(),
        grid,
        scores,
        centers,
    })
}

impl Landscape {
    /// Whether the ray from the state through cell `(i, j)` meets the wall
    /// plane inside `door`.
    pub fn in_corridor(&self, env: &EnvConfig, door: usize, i: usize, j: usize) -> bool {
        let (sx, sy) = (self.state[0], self.state[1]);
        let (cx, cy) = (self.centers[i], self.centers[j]);
        if cx <= sx {
            return false;
        }
        let y = sy + (cy - sy) * (env.wall_x - sx) / (cx - sx);
        let d = env.doors[door];
        y >= d.lo() && y <= d.hi()
    }

    /// Mean score over the corridor cells of `door`, if there are any.
    pub fn corridor_mean(&self, env: &EnvConfig, door: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..self.grid {
            for i in 0..self.grid {
                if self.in_corridor(env, door, i, j) {
                    sum += self.scores[j][i];
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Tab-separated `x y score`, one row per cell.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("x\ty\tscore\n");
        for (j, row) in self.scores.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}", self.centers[i], self.centers[j], s);
            }
        }
        out
    }

    pub fn to_svg(&self, env: &EnvConfig) -> String {
        let vp = Viewport::default();
        let w = vp.width();
        let (lo, hi) = self
            .scores
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
        let cell = vp.size / self.grid as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#,
            h = w + 40.0
        );
        for (j, row) in self.scores.iter().enumerate() {
            for (i, &s) in row.iter().enumerate() {
                let t = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
                let (x, y) = vp.px([self.centers[i], self.centers[j]]);
                let _ = writeln!(
                    out,
                    r#"<rect class="cell" x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"><title>{s:.4}</title></rect>"#,
                    x - cell / 2.0,
                    y - cell / 2.0,
                    color(t)
                );
            }
        }
        let mut overlay = String::new();
        scene(env, &vp, &mut overlay);
        out.push_str(&overlay.replace(r##"fill="#fafafa""##, r#"fill="none""#));
        let _ = writeln!(
            out,
            r#"<text class="scale" x="20" y="{:.0}" font-family="sans-serif" font-size="13">score {lo:.3} (dark) to {hi:.3} (light)</text>"#,
            w + 20.0
        );
        out.push_str("</svg>\n");
        out
    }
}

/// Dark blue through teal to yellow.
fn color(t: f64) -> String {
    const STOPS: [(f64, [f64; 3]); 3] = [(0.0, [38.0, 70.0, 83.0]), (0.5, [42.0, 157.0, 143.0]), (1.0, [233.0, 196.0, 106.0])];
    let t = t.clamp(0.0, 1.0);
    let k = if t <= 0.5 { 0 } else { 1 };
    let (t0, c0) = STOPS[k];
    let (t1, c1) = STOPS[k + 1];
    let u = (t - t0) / (t1 - t0);
    let c: Vec<u8> = (0..3).map(|i| (c0[i] + u * (c1[i] - c0[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Writes the heatmap SVG to `path` and the numeric grid next to it as `.tsv`.
pub fn plot_verifier_landscape(
    verifier: &dyn Verifier,
    chunk_len: usize,
    env: &EnvConfig,
    state: &[f64],
    grid: usize,
    path: impl AsRef<Path>,
) -> Result<Landscape> {
    let path = path.as_ref();
    let l = landscape(verifier, state, chunk_len, grid)?;
    write_file(path, &l.to_svg(env))?;
    write_file(&path.with_extension("tsv"), &l.to_tsv())?;
    Ok(l)
}
