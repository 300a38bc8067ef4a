//! Command-line interface: data generation, training, prediction, metric
//! reports, ensembling, and correctness audits.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::audit::check_invariance;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::ensemble::{ensemble_scene, EnsembleMember};
use crate::error::{Error, Result};
use crate::generator::{generate_synthetic_scene, GeneratorConfig};
use crate::gradcheck::{end_to_end, DEFAULT_GRADCHECK_PARAMS};
use crate::metrics::{scenario_metrics, MetricReport, MetricThresholds};
use crate::model::Model;
use crate::prediction::{
    read_predictions, write_predictions, AgentModes, PredictionEntry,
};
use crate::scene::Scene;
use crate::scene_io::{read_scenes, write_scenes};
use crate::train::train;

/// Lloyd iteration cap for ensembling; assignments almost always fix well
/// before this.
pub const KMEANS_ITERS: usize = 100;

#[derive(Parser)]
#[command(
    name = "jointcast",
    version,
    about = "Joint multi-agent trajectory forecasting on synthetic driving scenes"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Primary output path of the subcommand (see each command's help).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes deterministic synthetic scene files (train + val).
    ///
    /// `--out` is a directory receiving train.jsonl and val.jsonl; without
    /// it the configuration's train/val paths are used.
    GenData,

    /// Trains from the configuration's scene files; writes a checkpoint per
    /// epoch (`--out` overrides the path) and a per-step CSV log.
    Train,

    /// Writes a prediction file for a scene file using a trained checkpoint.
    Predict {
        /// Checkpoint to load; defaults to the configuration's path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file to predict; defaults to the configuration's val path.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },

    /// Scores a prediction file against scene ground truth; writes the
    /// metric CSV (one row per scenario plus an aggregate row).
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Scene file with ground-truth futures; defaults to the
        /// configuration's val path.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },

    /// Clusters the joint worlds of several prediction files into one
    /// K-world consensus prediction file.
    Ensemble {
        /// Prediction files; every mode of every file becomes one weighted
        /// candidate world.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Comma-separated per-file weights (default: all 1).
        #[arg(long)]
        weights: Option<String>,
    },

    /// Audits rigid-motion, time-shift, and permutation symmetry of the
    /// full pipeline; nonzero exit if any family drifts past tolerance.
    CheckInvariance {
        /// Checkpoint to audit; a freshly initialized model is used when
        /// omitted (the symmetries are architectural).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file; scenes are generated when omitted.
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Number of scenes to audit.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },

    /// Verifies analytic gradients of the training loss against central
    /// finite differences on a small two-agent scene.
    Gradcheck,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default().validated()?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let (train_path, val_path) = match out {
        Some(dir) => (dir.join("train.jsonl"), dir.join("val.jsonl")),
        None => (
            PathBuf::from(&cfg.train_path),
            PathBuf::from(&cfg.val_path),
        ),
    };
    for path in [&train_path, &val_path] {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let gen = |offset: u64, n: usize| -> Result<Vec<Scene>> {
        (0..n as u64)
            .map(|i| generate_synthetic_scene(cfg.seed.wrapping_add(offset + i), &cfg.generator))
            .collect()
    };
    let train_scenes = gen(0, cfg.num_train)?;
    let val_scenes = gen(cfg.num_train as u64, cfg.num_val)?;
    write_scenes(&train_scenes, &train_path)?;
    write_scenes(&val_scenes, &val_path)?;
    println!(
        "wrote {} train scenes to {} and {} val scenes to {}",
        train_scenes.len(),
        train_path.display(),
        val_scenes.len(),
        val_path.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let scenes = read_scenes(Path::new(&cfg.train_path), true)?;
    let val_path = Path::new(&cfg.val_path);
    let val_scenes = if val_path.exists() {
        read_scenes(val_path, true)?
    } else {
        Vec::new()
    };
    let ckpt = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.checkpoint_path));
    let log = PathBuf::from(&cfg.log_path);
    let mut model = Model::init(cfg.clone(), cfg.seed)?;
    let report = train(&mut model, &scenes, &val_scenes, Some(&ckpt), Some(&log))?;
    for (epoch, mean) in report.epoch_train_mean.iter().enumerate() {
        match report.epoch_val_mean.get(epoch) {
            Some(val) => println!("epoch {epoch}: train loss {mean:.4}, val loss {val:.4}"),
            None => println!("epoch {epoch}: train loss {mean:.4}"),
        }
    }
    println!("checkpoint: {}", ckpt.display());
    println!("log: {}", log.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.checkpoint_path));
    Model::from_checkpoint(cfg.clone(), checkpoint::load(&path)?)
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    scenes: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let scene_path = scenes
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.val_path));
    let scene_list = read_scenes(&scene_path, false)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("out/predictions.jsonl"));
    let entries: Vec<PredictionEntry> = scene_list
        .iter()
        .map(|s| model.predict(s))
        .collect::<Result<_>>()?;
    write_predictions(&entries, &out)?;
    println!("wrote {} predictions to {}", entries.len(), out.display());
    Ok(())
}

/// Ground-truth futures for the prediction's agents, in the prediction's
/// agent order.
fn aligned_gt(entry: &PredictionEntry, scene: &Scene) -> Result<Vec<Vec<[f64; 2]>>> {
    entry
        .agents
        .iter()
        .map(|pa| {
            let track = scene
                .agents
                .iter()
                .find(|t| t.id == pa.id)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "scenario {}: predicted agent {} not in scene",
                        entry.scenario_id, pa.id
                    ))
                })?;
            track.future_gt.clone().ok_or_else(|| {
                Error::Validation(format!(
                    "scenario {}: agent {} has no ground-truth future",
                    entry.scenario_id, pa.id
                ))
            })
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, predictions: &Path, scenes: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let entries = read_predictions(predictions)?;
    let scene_path = scenes
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.val_path));
    let scene_list = read_scenes(&scene_path, true)?;
    let missing: Vec<&str> = entries
        .iter()
        .filter(|e| !scene_list.iter().any(|s| s.scenario_id == e.scenario_id))
        .map(|e| e.scenario_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "predictions reference scenarios missing from the scene file: {}",
            missing.join(", ")
        )));
    }
    let thresholds = MetricThresholds::default();
    let mut rows = Vec::with_capacity(entries.len());
    for entry in &entries {
        let scene = scene_list
            .iter()
            .find(|s| s.scenario_id == entry.scenario_id)
            .expect("alignment checked above");
        let gt = aligned_gt(entry, scene)?;
        rows.push(scenario_metrics(
            &entry.scenario_id,
            &entry.worlds(),
            &entry.pi,
            &gt,
            &thresholds,
        )?);
    }
    let report = MetricReport::build(rows)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("out/metrics.csv"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    report.write_csv(&out)?;
    let agg = &report.aggregate;
    println!(
        "aggregate over {} scenarios / {} actors:",
        report.scenarios.len(),
        agg.num_actors
    );
    println!(
        "  avgMinFDE_K {:.4}  avgMinFDE_1 {:.4}  avgMinADE_K {:.4}  avgBrierMinFDE_K {:.4}",
        agg.avg_min_fde, agg.avg_min_fde_top, agg.avg_min_ade, agg.avg_brier_min_fde
    );
    println!(
        "  actorMR_K {:.4}  actorCR_K {:.4}  minFDE_K {:.4}  minADE_K {:.4}  MR_K {:.4}",
        agg.actor_mr, agg.actor_cr, agg.min_fde, agg.min_ade, agg.mr
    );
    println!("report: {}", out.display());
    Ok(())
}

fn parse_weights(spec: Option<&str>, n: usize) -> Result<Vec<f64>> {
    match spec {
        None => Ok(vec![1.0; n]),
        Some(s) => {
            let ws: Vec<f64> = s
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad weight {t:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if ws.len() != n {
                return Err(Error::Config(format!(
                    "{} weights given for {} prediction files",
                    ws.len(),
                    n
                )));
            }
            Ok(ws)
        }
    }
}

fn cmd_ensemble(
    cfg: &RunConfig,
    files: &[PathBuf],
    weights: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let file_weights = parse_weights(weights, files.len())?;
    let mut per_file: Vec<Vec<PredictionEntry>> = Vec::with_capacity(files.len());
    for path in files {
        per_file.push(read_predictions(path)?);
    }
    let reference = &per_file[0];
    for (i, entries) in per_file.iter().enumerate().skip(1) {
        let ours: Vec<&str> = entries.iter().map(|e| e.scenario_id.as_str()).collect();
        let theirs: Vec<&str> = reference.iter().map(|e| e.scenario_id.as_str()).collect();
        if ours != theirs {
            return Err(Error::Validation(format!(
                "{} and {} cover different scenarios",
                files[i].display(),
                files[0].display()
            )));
        }
    }

    let mut merged = Vec::with_capacity(reference.len());
    for (si, first) in reference.iter().enumerate() {
        let mut members = Vec::new();
        for (fi, entries) in per_file.iter().enumerate() {
            let entry = &entries[si];
            let worlds = entry.worlds();
            let ids: Vec<u64> = entry.agents.iter().map(|a| a.id).collect();
            for (k, world) in worlds.into_iter().enumerate() {
                members.push(EnsembleMember {
                    weight: file_weights[fi] * entry.pi[k],
                    agent_ids: ids.clone(),
                    trajectories: world,
                });
            }
        }
        let combined = ensemble_scene(&members, cfg.k, KMEANS_ITERS, cfg.seed, true)?;
        merged.push(PredictionEntry {
            scenario_id: first.scenario_id.clone(),
            pi: combined.pi,
            agents: combined
                .agent_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| AgentModes {
                    id,
                    modes: combined.worlds.iter().map(|w| w[i].clone()).collect(),
                })
                .collect(),
        });
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("out/ensemble.jsonl"));
    write_predictions(&merged, &out)?;
    println!(
        "ensembled {} files into {} ({} scenarios, K={})",
        files.len(),
        out.display(),
        merged.len(),
        cfg.k
    );
    Ok(())
}

fn cmd_check_invariance(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    scenes: Option<&Path>,
    trials: usize,
) -> Result<()> {
    let model = match checkpoint {
        Some(_) => load_model(cfg, checkpoint)?,
        None => Model::init(cfg.clone(), cfg.seed)?,
    };
    let mut scene_list = match scenes {
        Some(path) => read_scenes(path, false)?,
        None => (0..trials as u64)
            .map(|i| generate_synthetic_scene(cfg.seed.wrapping_add(i), &cfg.generator))
            .collect::<Result<_>>()?,
    };
    scene_list.truncate(trials);
    let report = check_invariance(&model, &scene_list, cfg.seed)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Validation(
            "invariance audit exceeded tolerance".into(),
        ))
    }
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    // Reduced sizes keep the finite-difference probes fast; the architecture
    // (attention families, recurrence, refinement, scoring) is unchanged.
    let cfg = RunConfig {
        d: 16,
        h: 2,
        k: 3,
        l_enc: 1,
        l_dec: 1,
        recurrent_steps: 2,
        chunk_steps: 2,
        t: 6,
        t_prime: 4,
        dropout: 0.0,
        seed,
        generator: GeneratorConfig {
            lanes: 2,
            agents: 2,
            static_agents: 0,
            crosswalks: 0,
            ..GeneratorConfig::default()
        },
        ..RunConfig::default()
    }
    .validated()?;
    let model = Model::init(cfg.clone(), seed)?;
    let scene = generate_synthetic_scene(seed.wrapping_add(1), &cfg.generator)?;
    let report = end_to_end(&model, &scene, &DEFAULT_GRADCHECK_PARAMS, 1e-5, 6, 1e-4)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check exceeded tolerance".into()))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg, out),
        Cmd::Train => cmd_train(&cfg, out),
        Cmd::Predict { checkpoint, scenes } => {
            cmd_predict(&cfg, checkpoint.as_deref(), scenes.as_deref(), out)
        }
        Cmd::Eval { predictions, scenes } => cmd_eval(&cfg, predictions, scenes.as_deref(), out),
        Cmd::Ensemble { files, weights } => cmd_ensemble(&cfg, files, weights.as_deref(), out),
        Cmd::CheckInvariance {
            checkpoint,
            scenes,
            trials,
        } => cmd_check_invariance(&cfg, checkpoint.as_deref(), scenes.as_deref(), *trials),
        Cmd::Gradcheck => cmd_gradcheck(cfg.seed),
    }
}

/// Parses arguments from the process environment and runs the requested
/// command, mapping errors onto exit codes (2 validation, 3 numeric).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
