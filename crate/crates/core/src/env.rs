//! Two-door navigation world.
//!
//! A point agent moves in the unit square under velocity control. A vertical
//! wall splits the square; it can only be crossed through one of the door
//! openings. Motion is checked as a swept segment, so a fast step cannot
//! tunnel through the wall.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Door {
    pub center_y: f64,
    pub width: f64,
}

impl Door {
    pub fn lo(&self) -> f64 {
        self.center_y - self.width / 2.0
    }

    pub fn hi(&self) -> f64 {
        self.center_y + self.width / 2.0
    }

    fn contains(&self, y: f64) -> bool {
        y >= self.lo() && y <= self.hi()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub wall_x: f64,
    pub wall_thickness: f64,
    /// Door openings; index 0 is the wide door in the shipped geometry.
    pub doors: Vec<Door>,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub start: [f64; 2],
    pub max_steps: usize,
    pub speed_cap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            wall_x: 0.5,
            wall_thickness: 0.01,
            doors: vec![
                Door {
                    center_y: 0.70,
                    width: 0.20,
                },
                Door {
                    center_y: 0.30,
                    width: 0.03,
                },
            ],
            goal: [0.92, 0.50],
            goal_radius: 0.05,
            start: [0.06, 0.50],
            max_steps: 120,
            speed_cap: 0.04,
        }
    }
}

impl EnvConfig {
    pub fn wall_left(&self) -> f64 {
        self.wall_x - self.wall_thickness / 2.0
    }

    pub fn wall_right(&self) -> f64 {
        self.wall_x + self.wall_thickness / 2.0
    }

    /// Index of the widest door.
    pub fn wide_door(&self) -> usize {
        argmax_by(&self.doors, |d| d.width)
    }

    /// Index of the narrowest door.
    pub fn narrow_door(&self) -> usize {
        argmax_by(&self.doors, |d| -d.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.doors.is_empty() {
            return bad("at least one door required".into());
        }
        if !(self.speed_cap > 0.0) || !(self.goal_radius > 0.0) || !(self.wall_thickness >= 0.0) {
            return bad("speed cap, goal radius and wall thickness must be positive".into());
        }
        for (i, d) in self.doors.iter().enumerate() {
            if d.width <= 0.0 || d.lo() < 0.0 || d.hi() > 1.0 {
                return bad(format!("door {i} must have positive width inside the workspace"));
            }
            for (j, e) in self.doors.iter().enumerate().skip(i + 1) {
                if d.lo() <= e.hi() && e.lo() <= d.hi() {
                    return bad(format!("doors {i} and {j} overlap"));
                }
            }
        }
        let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        if !inside(self.start) || !inside(self.goal) {
            return bad("start and goal must lie in the unit square".into());
        }
        if self.start[0] >= self.wall_left() {
            return bad("start must be left of the wall".into());
        }
        if self.goal[0] - self.goal_radius <= self.wall_right() {
            return bad("goal circle must be right of the wall".into());
        }
        if self.max_steps < self.shortest_path_steps() {
            return bad(format!(
                "max_steps {} below the shortest path length {}",
                self.max_steps,
                self.shortest_path_steps()
            ));
        }
        Ok(())
    }

    /// Lower bound on the steps needed to reach the goal through any door.
    pub fn shortest_path_steps(&self) -> usize {
        let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let best = self
            .doors
            .iter()
            .map(|d| {
                let y = self.start[1].clamp(d.lo(), d.hi());
                let door = [self.wall_x, y];
                dist(self.start, door) + (dist(door, self.goal) - self.goal_radius).max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        (best / self.speed_cap).ceil() as usize
    }

    /// Index of the door containing `y`, if any.
    pub fn door_at(&self, y: f64) -> Option<usize> {
        self.doors.iter().position(|d| d.contains(y))
    }
}

fn argmax_by(doors: &[Door], key: impl Fn(&Door) -> f64) -> usize {
    doors
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, d)| {
            let v = key(d);
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub steps: usize,
    pub outcome: Outcome,
}

impl EnvState {
    pub fn is_terminal(&self) -> bool {
        self.outcome != Outcome::Running
    }
}

#[derive(Debug, Clone)]
pub struct NavEnv {
    config: EnvConfig,
}

impl NavEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            position: self.config.start,
            steps: 0,
            outcome: Outcome::Running,
        }
    }

    /// Velocity after clipping its norm to the speed cap.
    pub fn clip_velocity(&self, velocity: [f64; 2]) -> [f64; 2] {
        let norm = (velocity[0].powi(2) + velocity[1].powi(2)).sqrt();
        let cap = self.config.speed_cap;
        if norm > cap {
            [velocity[0] * cap / norm, velocity[1] * cap / norm]
        } else {
            velocity
        }
    }

    /// Advances one step. The earliest event along the swept segment wins:
    /// leaving the workspace or touching the wall outside a door is a
    /// collision, touching the goal circle is a success. On an event the
    /// agent stops at the event point.
    pub fn step(&self, state: &EnvState, velocity: [f64; 2]) -> Result<EnvState> {
        if state.is_terminal() {
            return Err(CoreError::TerminalStep);
        }
        if !velocity.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Shape("non-finite velocity".into()));
        }
        let v = self.clip_velocity(velocity);
        let p = state.position;
        let q = [p[0] + v[0], p[1] + v[1]];

        let collision = self
            .boundary_exit(p, v)
            .into_iter()
            .chain(self.wall_hit(p, v))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))));
        let goal = self.goal_entry(p, v);

        let steps = state.steps + 1;
        let at = |s: f64| [p[0] + s * v[0], p[1] + s * v[1]];
        let (position, mut outcome) = match (collision, goal) {
            (Some(c), Some(g)) if g <= c => (at(g), Outcome::Success),
            (Some(c), _) => (at(c), Outcome::Collision),
            (None, Some(g)) => (at(g), Outcome::Success),
            (None, None) => (q, Outcome::Running),
        };
        if outcome == Outcome::Running && steps >= self.config.max_steps {
            outcome = Outcome::Timeout;
        }
        Ok(EnvState {
            position: [position[0].clamp(0.0, 1.0), position[1].clamp(0.0, 1.0)],
            steps,
            outcome,
        })
    }

    /// Earliest fraction of the step at which the segment leaves `[0,1]²`.
    fn boundary_exit(&self, p: [f64; 2], v: [f64; 2]) -> Option<f64> {
        let mut first: Option<f64> = None;
        for axis in 0..2 {
            let end = p[axis] + v[axis];
            let s = if end < 0.0 {
                Some(p[axis] / -v[axis])
            } else if end > 1.0 {
                Some((1.0 - p[axis]) / v[axis])
            } else {
                None
            };
            if let Some(s) = s {
                first = Some(first.map_or(s, |f: f64| f.min(s)));
            }
        }
        first.map(|s| s.clamp(0.0, 1.0))
    }

    /// Earliest fraction of the step at which the segment is inside the wall
    /// slab at a height not covered by a door.
    fn wall_hit(&self, p: [f64; 2], v: [f64; 2]) -> Option<f64> {
        let (lo, hi) = (self.config.wall_left(), self.config.wall_right());
        let (s0, s1) = if v[0] == 0.0 {
            if p[0] >= lo && p[0] <= hi {
                (0.0, 1.0)
            } else {
                return None;
            }
        } else {
            let a = (lo - p[0]) / v[0];
            let b = (hi - p[0]) / v[0];
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let (a, b) = (a.max(0.0), b.min(1.0));
            if a > b {
                return None;
            }
            (a, b)
        };
        let y0 = p[1] + s0 * v[1];
        let Some(door) = self.config.door_at(y0).map(|i| self.config.doors[i]) else {
            return Some(s0);
        };
        // Inside a door at slab entry: hit when y leaves the opening before the slab ends.
        let exit = if v[1] > 0.0 {
            (door.hi() - p[1]) / v[1]
        } else if v[1] < 0.0 {
            (door.lo() - p[1]) / v[1]
        } else {
            f64::INFINITY
        };
        (exit < s1).then_some(exit.max(s0))
    }

    /// Earliest fraction of the step at which the segment touches the goal circle.
    fn goal_entry(&self, p: [f64; 2], v: [f64; 2]) -> Option<f64> {
        let c = self.config.goal;
        let r = self.config.goal_radius;
        let d = [p[0] - c[0], p[1] - c[1]];
        let cc = d[0] * d[0] + d[1] * d[1] - r * r;
        if cc <= 0.0 {
            return Some(0.0);
        }
        let a = v[0] * v[0] + v[1] * v[1];
        if a == 0.0 {
            return None;
        }
        let b = 2.0 * (d[0] * v[0] + d[1] * v[1]);
        let disc = b * b - 4.0 * a * cc;
        if disc < 0.0 {
            return None;
        }
        let s = (-b - disc.sqrt()) / (2.0 * a);
        (0.0..=1.0).contains(&s).then_some(s)
    }

    /// Door through which a recorded path first crosses the wall plane.
    pub fn crossing_door(&self, path: &[[f64; 2]]) -> Option<usize> {
        let x = self.config.wall_x;
        path.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            if (a[0] < x) == (b[0] < x) {
                return None;
            }
            let s = (x - a[0]) / (b[0] - a[0]);
            self.config.door_at(a[1] + s * (b[1] - a[1]))
        })
    }

    /// Whether the straight segment `a -> b` crosses the wall only through a
    /// door (used to audit recorded paths).
    pub fn segment_is_clear(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        self.wall_hit(a, [b[0] - a[0], b[1] - a[1]]).is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> NavEnv {
        NavEnv::new(EnvConfig::default()).unwrap()
    }

    fn at(x: f64, y: f64) -> EnvState {
        EnvState {
            position: [x, y],
            steps: 0,
            outcome: Outcome::Running,
        }
    }

    #[test]
    fn default_geometry_is_valid() {
        let c = EnvConfig::default();
        c.validate().unwrap();
        assert_eq!(c.wide_door(), 0);
        assert_eq!(c.narrow_door(), 1);
    }

    #[test]
    fn hitting_wall_between_doors_collides() {
        let e = env();
        let s = e.step(&at(0.48, 0.5), [0.04, 0.0]).unwrap();
        assert_eq!(s.outcome, Outcome::Collision);
        assert!((s.position[0] - 0.495).abs() < 1e-12);
    }

    #[test]
    fn passing_through_doors_is_free() {
        let e = env();
        let s = e.step(&at(0.48, 0.70), [0.04, 0.0]).unwrap();
        assert_eq!(s.outcome, Outcome::Running);
        let s = e.step(&at(0.48, 0.30), [0.04, 0.0]).unwrap();
        assert_eq!(s.outcome, Outcome::Running);
        // Grazing the narrow door edge while moving diagonally.
        let s = e.step(&at(0.48, 0.325), [0.03, 0.02]).unwrap();
        assert_eq!(s.outcome, Outcome::Collision);
    }

    #[test]
    fn fast_motion_cannot_tunnel() {
        let e = env();
        // Endpoint on the far side, segment crosses the solid wall.
        let s = e.step(&at(0.49, 0.5), [0.02, 0.0]).unwrap();
        assert_eq!(s.outcome, Outcome::Collision);
    }

    #[test]
    fn reaching_goal_succeeds() {
        let e = env();
        let s = e.step(&at(0.84, 0.5), [0.04, 0.0]).unwrap();
        assert_eq!(s.outcome, Outcome::Success);
        assert!((s.position[0] - 0.87).abs() < 1e-12);
    }

    #[test]
    fn leaving_workspace_collides() {
        let e = env();
        let s = e.step(&at(0.02, 0.5), [-0.04, 0.0]).unwrap();
        assert_eq!(s.outcome, Outcome::Collision);
        assert_eq!(s.position, [0.0, 0.5]);
    }

    #[test]
    fn standing_still_times_out() {
        let e = env();
        let mut s = e.reset();
        for _ in 0..e.config().max_steps {
            s = e.step(&s, [0.0, 0.0]).unwrap();
        }
        assert_eq!(s.outcome, Outcome::Timeout);
        assert!(matches!(e.step(&s, [0.0, 0.0]), Err(CoreError::TerminalStep)));
    }

    #[test]
    fn velocity_is_clipped() {
        let e = env();
        let s = e.step(&at(0.1, 0.5), [0.3, 0.4]).unwrap();
        assert!((s.position[0] - (0.1 + 0.024)).abs() < 1e-12);
        assert!((s.position[1] - (0.5 + 0.032)).abs() < 1e-12);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut c = EnvConfig::default();
        c.doors[1].center_y = 0.68;
        assert!(c.validate().is_err());
        let c = EnvConfig {
            start: [0.7, 0.5],
            ..EnvConfig::default()
        };
        assert!(c.validate().is_err());
        let c = EnvConfig {
            max_steps: 5,
            ..EnvConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
