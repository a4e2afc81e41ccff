//! Pipeline stages and their composition.
//!
//! Each stage reads its inputs from memory, writes its outputs under the run
//! directory and records their SHA-256 in `manifest.json` together with the
//! config hash. The CLI verbs load inputs from disk and call the same stage
//! functions, and `run_pipeline` calls them in order.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use veristeer_core::steering::ChunkDiagnostic;
use veristeer_core::{
    collect_rollouts, generate_expert_demos, rng, train_policy, train_verifier, DiffusionPolicy, NavEnv,
    PolicyTrainReport, RolloutDataset, SteeredPolicy, SteeringMode, Verifier, VerifierKind, VerifierNet,
    VerifierTrainReport,
};
use veristeer_nn::hex_digest;

use crate::config::ExperimentConfig;
use crate::error::{in_stage, HarnessError, Result, Stage};
use crate::plot::{plot_trajectories, plot_verifier_landscape, Landscape};
use crate::report::{EvalReport, ReportContext};

pub const DEMOS: &str = "demos.jsonl";
pub const POLICY: &str = "policy.ckpt";
pub const POLICY_REPORT: &str = "policy_train.json";
pub const ROLLOUTS: &str = "rollouts.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

pub fn verifier_file(kind: VerifierKind) -> String {
    format!("verifier_{}.ckpt", kind.name())
}

pub fn verifier_report_file(kind: VerifierKind) -> String {
    format!("verifier_{}.json", kind.name())
}

pub fn report_file(label: &str) -> String {
    format!("reports/{label}.json")
}

/// Report label for a steered evaluation, e.g. `classifier_bon`.
pub fn label_for(kind: Option<VerifierKind>, mode: SteeringMode) -> String {
    match (kind, mode) {
        (_, SteeringMode::None) | (None, _) => "base".into(),
        (Some(k), SteeringMode::BestOfN { .. }) => format!("{}_bon", k.name()),
        (Some(k), SteeringMode::Guidance { .. }) => format!("{}_cg", k.name()),
    }
}

/// Artifact digests keyed by path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub artifacts: BTreeMap<String, String>,
}

/// A training report stamped with the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub report: T,
}

/// A run directory bound to one config.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub env: NavEnv,
}

impl Run {
    /// Creates the directory and writes the resolved config. A manifest left
    /// by a different config is discarded.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.output_dir.clone();
        for sub in ["", "reports", "plots", "diagnostics", "evals"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| HarnessError::io(&d, e))?;
        }
        let run = Self {
            hash: config.hash(),
            env: config.env()?,
            dir,
            config,
        };
        if run.manifest()?.config_hash != run.hash {
            run.write_manifest(&Manifest {
                config_hash: run.hash.clone(),
                artifacts: BTreeMap::new(),
            })?;
        }
        run.config.save(run.path(CONFIG))?;
        run.record(CONFIG)?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(HarnessError::io(&path, e)),
        }
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let path = self.path(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(m)?).map_err(|e| HarnessError::io(&path, e))
    }

    /// Adds the digest of an artifact that was just written.
    pub fn record(&self, rel: &str) -> Result<()> {
        let path = self.path(rel);
        let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut m = self.manifest()?;
        m.config_hash = self.hash.clone();
        m.artifacts.insert(rel.to_string(), hex_digest(&bytes));
        self.write_manifest(&m)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let path = self.path(rel);
        std::fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| HarnessError::io(&path, e))?;
        self.record(rel)
    }

    fn stamp<T>(&self, report: T) -> Stamped<T> {
        Stamped {
            config_hash: self.hash.clone(),
            report,
        }
    }

    pub fn load_demos(&self) -> Result<RolloutDataset> {
        Ok(RolloutDataset::load(self.path(DEMOS))?)
    }

    pub fn load_policy(&self) -> Result<DiffusionPolicy> {
        Ok(DiffusionPolicy::load(self.path(POLICY))?)
    }

    pub fn load_rollouts(&self) -> Result<RolloutDataset> {
        Ok(RolloutDataset::load(self.path(ROLLOUTS))?)
    }

    pub fn load_verifier(&self, kind: VerifierKind) -> Result<VerifierNet> {
        Ok(VerifierNet::load(self.path(&verifier_file(kind)))?)
    }
}

pub fn gen_demos(run: &Run) -> Result<RolloutDataset> {
    in_stage(Stage::GenDemos, || {
        let demos = generate_expert_demos(&run.env, &run.config.demos, run.config.seed_for("gen-demos"))?;
        let data = RolloutDataset::new(demos);
        data.save(run.path(DEMOS))?;
        run.record(DEMOS)?;
        Ok(data)
    })
}

pub fn train_policy_stage(run: &Run, demos: &RolloutDataset) -> Result<(DiffusionPolicy, PolicyTrainReport)> {
    in_stage(Stage::TrainPolicy, || {
        let (policy, report) = train_policy(&demos.trajectories, &run.config.policy.arch, &run.config.policy_train())?;
        policy.save(run.path(POLICY))?;
        run.record(POLICY)?;
        run.write_json(POLICY_REPORT, &run.stamp(&report))?;
        Ok((policy, report))
    })
}

pub fn collect_stage(run: &Run, policy: &DiffusionPolicy) -> Result<RolloutDataset> {
    in_stage(Stage::Collect, || {
        let data = collect_rollouts(
            policy,
            &run.env,
            run.config.rollouts.collect,
            run.config.seed_for("collect"),
            policy.digest(),
        )?;
        data.save(run.path(ROLLOUTS))?;
        run.record(ROLLOUTS)?;
        Ok(data)
    })
}

pub fn train_verifier_stage(
    run: &Run,
    data: &RolloutDataset,
    kind: VerifierKind,
) -> Result<(VerifierNet, VerifierTrainReport)> {
    in_stage(Stage::TrainVerifier, || {
        let (net, report) = train_verifier(data, kind, &run.config.verifier_train(kind))?;
        let file = verifier_file(kind);
        net.save(run.path(&file))?;
        run.record(&file)?;
        run.write_json(&verifier_report_file(kind), &run.stamp(&report))?;
        Ok((net, report))
    })
}

/// One line of the steering diagnostics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub episode: usize,
    #[serde(flatten)]
    pub chunk: ChunkDiagnostic,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rollouts: RolloutDataset,
    pub diagnostics: Vec<DiagnosticRecord>,
}

/// `episodes` paired-seed episodes of `policy` under `mode`. Episode `i`
/// uses `substream(seed, i)` whatever the mode.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &DiffusionPolicy,
    verifier: Option<&VerifierNet>,
    env: &NavEnv,
    mode: SteeringMode,
    episodes: usize,
    seed: u64,
    config_hash: &str,
    label: &str,
    diagnostics: bool,
) -> Result<Evaluation> {
    if let Some(v) = verifier {
        check_dims(policy, v)?;
    }
    let mut steered = SteeredPolicy::new(policy, verifier.map(|v| v as &dyn Verifier), mode)?;
    if diagnostics {
        steered = steered.with_diagnostics();
    }
    let rollouts = collect_rollouts(&steered, env, episodes, seed, policy.digest())?;
    let mut by_seed = steered.take_diagnostics();
    let mut records = Vec::new();
    if diagnostics {
        for traj in &rollouts.trajectories {
            for tr in &traj.transitions {
                if let Some(chunk) = by_seed.remove(&rng::substream(traj.meta.seed, tr.t as u64)) {
                    records.push(DiagnosticRecord {
                        episode: traj.meta.episode,
                        chunk,
                    });
                }
            }
        }
    }
    let report = EvalReport::new(
        ReportContext {
            label: label.to_string(),
            mode,
            verifier: verifier.map(VerifierNet::kind),
            seed,
            policy: policy.digest().to_string(),
            verifier_source: verifier.map(|v| v.source_policy().to_string()),
            config_hash: config_hash.to_string(),
        },
        env,
        &rollouts,
    );
    Ok(Evaluation {
        report,
        rollouts,
        diagnostics: records,
    })
}

fn check_dims(policy: &DiffusionPolicy, verifier: &VerifierNet) -> Result<()> {
    let (p, v) = (policy.spec(), verifier.spec());
    if p.obs_dim != v.obs_dim || p.chunk_dim() != v.chunk_dim {
        return Err(HarnessError::Dimension(format!(
            "policy has obs {} and chunk {}, verifier expects obs {} and chunk {}",
            p.obs_dim,
            p.chunk_dim(),
            v.obs_dim,
            v.chunk_dim
        )));
    }
    Ok(())
}

/// Evaluates one configuration on the run's evaluation seeds and writes the
/// report, the rollouts and, if requested, the diagnostics log.
pub fn eval_stage(
    run: &Run,
    policy: &DiffusionPolicy,
    verifier: Option<&VerifierNet>,
    mode: SteeringMode,
    label: &str,
    diagnostics: bool,
) -> Result<Evaluation> {
    in_stage(Stage::Eval, || {
        let eval = evaluate(
            policy,
            verifier,
            &run.env,
            mode,
            run.config.rollouts.eval,
            run.config.seed_for("eval"),
            &run.hash,
            label,
            diagnostics,
        )?;
        save_evaluation(run, &eval)?;
        Ok(eval)
    })
}

fn save_evaluation(run: &Run, eval: &Evaluation) -> Result<()> {
    let label = &eval.report.label;
    let rel = report_file(label);
    eval.report.save(run.path(&rel))?;
    run.record(&rel)?;
    let rel = format!("evals/{label}.jsonl");
    eval.rollouts.save(run.path(&rel))?;
    run.record(&rel)?;
    if !eval.diagnostics.is_empty() {
        let rel = format!("diagnostics/{label}.jsonl");
        let path = run.path(&rel);
        let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for d in &eval.diagnostics {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n").map_err(|e| HarnessError::io(&path, e))?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
        drop(w);
        run.record(&rel)?;
    }
    Ok(())
}

/// Guidance at each strength in the config's sweep list for `kind`.
pub fn sweep_stage(
    run: &Run,
    policy: &DiffusionPolicy,
    verifier: &VerifierNet,
    lambdas: &[f64],
) -> Result<Vec<EvalReport>> {
    lambdas
        .iter()
        .map(|&l| {
            let mode = run.config.steering.guidance_with(l);
            let label = format!("{}_lambda_{l}", label_for(Some(verifier.kind()), mode));
            Ok(eval_stage(run, policy, Some(verifier), mode, &label, false)?.report)
        })
        .collect()
}

/// Steers `policy` with a verifier that may come from another run. The
/// report's `on_policy` flag compares the verifier's source digest with the policy's.
pub fn cross_steer(
    run: &Run,
    policy: &DiffusionPolicy,
    verifier: &VerifierNet,
    mode: SteeringMode,
    label: &str,
) -> Result<EvalReport> {
    in_stage(Stage::CrossSteer, || {
        let eval = evaluate(
            policy,
            Some(verifier),
            &run.env,
            mode,
            run.config.rollouts.eval,
            run.config.seed_for("eval"),
            &run.hash,
            label,
            false,
        )?;
        save_evaluation(run, &eval)?;
        Ok(eval.report)
    })
}

/// Trajectory plots for evaluations and landscapes for verifiers at the start state.
pub fn plot_stage(
    run: &Run,
    policy: &DiffusionPolicy,
    evals: &[(&str, &RolloutDataset)],
    verifiers: &[&VerifierNet],
) -> Result<Vec<Landscape>> {
    in_stage(Stage::Plot, || {
        for (label, rollouts) in evals {
            let n = run.config.plots.trajectories.min(rollouts.len());
            let rel = format!("plots/{label}.svg");
            plot_trajectories(&rollouts.trajectories[..n], &run.config.env, run.path(&rel))?;
            run.record(&rel)?;
        }
        verifiers
            .iter()
            .map(|v| {
                let rel = format!("plots/landscape_{}.svg", v.kind().name());
                let l = plot_verifier_landscape(
                    *v,
                    policy.spec().chunk_len,
                    &run.config.env,
                    &run.config.env.start,
                    run.config.plots.grid,
                    run.path(&rel),
                )?;
                run.record(&rel)?;
                run.record(&rel.replace(".svg", ".tsv"))?;
                Ok(l)
            })
            .collect()
    })
}

pub struct PipelineOutput {
    pub run: Run,
    pub policy: DiffusionPolicy,
    pub policy_report: PolicyTrainReport,
    pub rollouts: RolloutDataset,
    /// Classifier first, then time-to-success.
    pub verifiers: Vec<(VerifierNet, VerifierTrainReport)>,
    /// Base first, then the steering runs in config order.
    pub reports: Vec<EvalReport>,
    pub landscapes: Vec<Landscape>,
}

impl PipelineOutput {
    pub fn verifier(&self, kind: VerifierKind) -> &VerifierNet {
        &self.verifiers.iter().find(|(v, _)| v.kind() == kind).expect("both kinds trained").0
    }

    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.label == label)
    }
}

/// Demos, policy, base evaluation, rollouts, both verifiers, the four
/// steered evaluations and the plots.
pub fn run_pipeline(config: ExperimentConfig) -> Result<PipelineOutput> {
    let run = Run::open(config)?;
    let demos = gen_demos(&run)?;
    let (policy, policy_report) = train_policy_stage(&run, &demos)?;
    let base = eval_stage(&run, &policy, None, SteeringMode::None, "base", false)?;
    let rollouts = collect_stage(&run, &policy)?;
    let verifiers = [VerifierKind::Classifier, VerifierKind::TimeToSuccess]
        .into_iter()
        .map(|k| train_verifier_stage(&run, &rollouts, k))
        .collect::<Result<Vec<_>>>()?;
    let mut evals = vec![base];
    for (kind, mode) in run.config.steering_runs() {
        let v = &verifiers.iter().find(|(v, _)| v.kind() == kind).expect("trained").0;
        evals.push(eval_stage(&run, &policy, Some(v), mode, &label_for(Some(kind), mode), true)?);
    }
    let plots: Vec<(&str, &RolloutDataset)> = evals.iter().map(|e| (e.report.label.as_str(), &e.rollouts)).collect();
    let nets: Vec<&VerifierNet> = verifiers.iter().map(|(v, _)| v).collect();
    let landscapes = plot_stage(&run, &policy, &plots, &nets)?;
    Ok(PipelineOutput {
        reports: evals.into_iter().map(|e| e.report).collect(),
        run,
        policy,
        policy_report,
        rollouts,
        verifiers,
        landscapes,
    })
}

/// Paths of every report in `dir/reports`, sorted.
pub fn list_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = dir.join("reports");
    let mut out: Vec<PathBuf> = std::fs::read_dir(&reports)
        .map_err(|e| HarnessError::io(&reports, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}
