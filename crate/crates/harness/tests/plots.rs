use veristeer::plot::{landscape, plot_trajectories, plot_verifier_landscape, trajectories_svg, Viewport};
use veristeer::HarnessError;
use veristeer_core::*;

struct Constant(f64);

impl Verifier for Constant {
    fn score(&self, _: &[f64], _: usize, chunks: &[Vec<f64>]) -> veristeer_core::Result<Vec<f64>> {
        Ok(vec![self.0; chunks.len()])
    }
    fn score_gradient(&self, _: &[f64], _: usize, chunk: &[f64]) -> veristeer_core::Result<Vec<f64>> {
        Ok(vec![0.0; chunk.len()])
    }
}

/// Rewards probes that point up: the wide door sits above the start.
struct Upward;

impl Verifier for Upward {
    fn score(&self, _: &[f64], _: usize, chunks: &[Vec<f64>]) -> veristeer_core::Result<Vec<f64>> {
        Ok(chunks.iter().map(|c| c[1]).collect())
    }
    fn score_gradient(&self, _: &[f64], _: usize, chunk: &[f64]) -> veristeer_core::Result<Vec<f64>> {
        Ok(vec![0.0; chunk.len()])
    }
}

struct Heading(f64);

impl ChunkSource for Heading {
    fn chunk_len(&self) -> usize {
        8
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn choose(&self, _: &[f64], _: usize, _: u64) -> veristeer_core::Result<Vec<f64>> {
        Ok((0..8).flat_map(|_| [1.0, self.0]).collect())
    }
}

fn straight(env: &NavEnv, dy: f64, episode: usize) -> Trajectory {
    let meta = TrajectoryMeta {
        episode,
        ..Default::default()
    };
    run_episode(&Heading(dy), env, 0, meta).unwrap()
}

#[test]
fn ten_trajectories_give_ten_polylines() {
    let env = NavEnv::new(EnvConfig::default()).unwrap();
    let trajs: Vec<Trajectory> = (0..10).map(|i| straight(&env, i as f64 * 0.05 - 0.2, i)).collect();
    let svg = trajectories_svg(&trajs, env.config()).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 10);
    let failures = trajs.iter().filter(|t| !t.success).count();
    assert_eq!(svg.matches(r#"class="trajectory failure""#).count(), failures);
    assert_eq!(svg.matches(r#"class="trajectory success""#).count(), 10 - failures);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.svg");
    plot_trajectories(&trajs, env.config(), &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), svg);
}

#[test]
fn empty_trajectory_list_is_an_error() {
    let config = EnvConfig::default();
    assert!(matches!(trajectories_svg(&[], &config), Err(HarnessError::EmptyPlot(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(plot_trajectories(&[], &config, dir.path().join("e.svg")).is_err());
    assert!(!dir.path().join("e.svg").exists());
}

#[test]
fn geometry_follows_the_viewport() {
    let config = EnvConfig::default();
    let env = NavEnv::new(config.clone()).unwrap();
    let svg = trajectories_svg(&[straight(&env, 0.0, 0)], &config).unwrap();
    let vp = Viewport::default();
    let (gx, gy) = vp.px(config.goal);
    assert!(svg.contains(&format!(r#"cx="{gx:.2}" cy="{gy:.2}""#)), "goal not at ({gx}, {gy})");
    let (sx, sy) = vp.px(config.start);
    assert!(svg.contains(&format!(r#"cx="{sx:.2}" cy="{sy:.2}""#)));
    assert_eq!(svg.matches(r#"class="door""#).count(), config.doors.len());
    for d in &config.doors {
        let (_, top) = vp.px([config.wall_x, d.hi()]);
        assert!(svg.contains(&format!("{top:.2}")), "door top {top}");
    }
}

#[test]
fn unwritable_path_is_an_error() {
    let env = NavEnv::new(EnvConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("missing").join("t.svg");
    assert!(matches!(
        plot_trajectories(&[straight(&env, 0.0, 0)], env.config(), &bad),
        Err(HarnessError::Io { .. })
    ));
}

#[test]
fn fifty_grid_has_2500_cells_in_svg_and_text() {
    let config = EnvConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("land.svg");
    let l = plot_verifier_landscape(&Upward, 8, &config, &config.start, 50, &path).unwrap();
    assert_eq!(l.scores.len(), 50);
    let svg = std::fs::read_to_string(&path).unwrap();
    assert_eq!(svg.matches(r#"class="cell""#).count(), 2500);
    let tsv = std::fs::read_to_string(path.with_extension("tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2500);
    assert!(rows.iter().all(|r| r.split('\t').count() == 3));
    assert_eq!(svg.matches(r#"class="door""#).count(), 2);
}

#[test]
fn constant_verifier_gives_uniform_heatmap() {
    let config = EnvConfig::default();
    let l = landscape(&Constant(0.7), &config.start, 8, 20).unwrap();
    assert!(l.scores.iter().flatten().all(|&s| s == 0.7));
    let svg = l.to_svg(&config);
    let fills: std::collections::HashSet<&str> = svg
        .lines()
        .filter(|line| line.contains(r#"class="cell""#))
        .map(|line| line.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
        .collect();
    assert_eq!(fills.len(), 1);
}

#[test]
fn corridors_follow_door_geometry() {
    let config = EnvConfig::default();
    let l = landscape(&Upward, &config.start, 8, 50).unwrap();
    let wide = l.corridor_mean(&config, 0).unwrap();
    let narrow = l.corridor_mean(&config, 1).unwrap();
    assert!(wide > 0.0 && narrow < 0.0, "{wide} {narrow}");
    // No cell is in both corridors, and cells behind the start are in neither.
    for j in 0..50 {
        for i in 0..50 {
            assert!(!(l.in_corridor(&config, 0, i, j) && l.in_corridor(&config, 1, i, j)));
            if l.centers[i] <= config.start[0] {
                assert!(!l.in_corridor(&config, 0, i, j));
            }
        }
    }
}

#[test]
fn grid_below_two_is_rejected() {
    assert!(landscape(&Upward, &[0.1, 0.5], 8, 1).is_err());
}
