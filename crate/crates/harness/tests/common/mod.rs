#![allow(dead_code)]

use std::path::Path;

use veristeer::ExperimentConfig;

/// A run small enough for a test: every stage executes, nothing is expected to work well.
pub fn small_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml_with(
        "",
        &[
            format!("output_dir={:?}", dir.display().to_string()),
            "seed=11".into(),
            "demos.count=24".into(),
            "policy.arch.hidden=64".into(),
            "policy.arch.time_embed_dim=16".into(),
            "policy.arch.schedule.steps=20".into(),
            "policy.train.epochs=300".into(),
            "policy.train.batch_size=64".into(),
            "policy.train.variance_floor=1e-9".into(),
            "rollouts.collect=40".into(),
            "rollouts.eval=24".into(),
            "verifier.epochs=3".into(),
            "verifier.encoder_width=16".into(),
            "verifier.step_embed_dim=8".into(),
            "verifier.trunk=[16]".into(),
            "steering.best_of_n=3".into(),
            "sweep.classifier=[0.05]".into(),
            "sweep.time_to_success=[0.5]".into(),
            "plots.grid=6".into(),
            "plots.trajectories=5".into(),
        ],
    )
    .unwrap()
}

pub fn shipped_config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}
