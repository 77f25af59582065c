//! Command-line pipeline: synthetic data generation, training, prediction,
//! evaluation, and heatmap inspection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;

use anyhow::{anyhow, bail, Context};
use charpose::data::{
    load_dataset_file, save_dataset, split_by_actor, synth_generate, DatasetRecord, LayoutSpec,
};
use charpose::eval::{
    evaluate, write_per_joint_csv, AveragePoseBaseline, BaselineMode, EvalCase,
};
use charpose::heatmap::{
    dump_heatmap, load_heatmap, pgm_slice, GridTransform, VolumetricHeatmap, GRID_RES,
};
use charpose::model::{
    load_checkpoint, save_checkpoint, ModelParams, StageInput,
};
use charpose::refine::{refine, RefinementProblem};
use charpose::sampler::{
    read_predictions, sample_pose_set, sample_pose_set_independent, write_predictions,
};
use charpose::skeleton::{Pose, LEFT_FINGER, MID_HIP, NUM_JOINTS, RIGHT_FINGER};
use charpose::train::{train_stage, LossKind, Stage, StageModels, StepLog};
use charpose::rng::derive;
use clap::{Parser, Subcommand, ValueEnum};
use config::{LossName, RunConfig};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Marker for errors that should exit with the usage code (2).
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "charpose", version, about = "Probabilistic characteristic 3D pose forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayoutName {
    TwoMode,
    Standard,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineName {
    ZeroVelocity,
    AvgGlobal,
    AvgPerAction,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisName {
    X,
    Y,
    Z,
}

/// Flags shared by config-consuming commands; set flags override the file.
#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Training objective (cross-entropy, l1, l2, deterministic).
    #[arg(long)]
    loss: Option<LossName>,
    #[arg(long)]
    dropout_p: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    stop_below_val_error: Option<f64>,
    /// Comma-separated train actors (with val/test, defines the split).
    #[arg(long, value_delimiter = ',')]
    train_actors: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    val_actors: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    test_actors: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .map_err(|e| usage_err(format!("config {}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        take!(seed);
        take!(embed_dim);
        take!(learning_rate);
        take!(warmup_steps);
        take!(batch_size);
        take!(max_steps);
        take!(loss);
        take!(dropout_p);
        take!(k);
        take!(eval_every);
        if self.patience.is_some() {
            cfg.patience = self.patience;
        }
        if self.stop_below_val_error.is_some() {
            cfg.stop_below_val_error = self.stop_below_val_error;
        }
        if !self.train_actors.is_empty()
            || !self.val_actors.is_empty()
            || !self.test_actors.is_empty()
        {
            cfg.split = Some(charpose::data::SplitConfig {
                train_actors: self.train_actors.iter().cloned().collect(),
                val_actors: self.val_actors.iter().cloned().collect(),
                test_actors: self.test_actors.iter().cloned().collect(),
            });
        }
        // The effective configuration is echoed so runs are auditable.
        eprintln!(
            "effective config: {}",
            serde_json::to_string(&cfg).unwrap_or_default()
        );
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON Lines).
    GenData {
        /// Output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Records per mode of every action.
        #[arg(long, default_value_t = 10)]
        n_per_mode: usize,
        #[arg(long, value_enum, default_value_t = LayoutName::Standard)]
        layout: LayoutName,
        /// Number of actors to cycle records over.
        #[arg(long, default_value_t = 10)]
        actors: usize,
    },
    /// Train the three autoregressive stages (or an ablation variant).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and step logs.
        #[arg(long)]
        out_dir: PathBuf,
        /// Train the single-pass all-joints model instead of the stages.
        #[arg(long)]
        independent: bool,
        /// Condition on ground-truth action labels (adds an attention node).
        #[arg(long)]
        action_label: bool,
        /// Initialize stages from checkpoints in this directory
        /// (optimizer state starts fresh).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sample pose hypotheses from trained checkpoints.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the trained checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the pose-refinement step.
        #[arg(long)]
        no_refine: bool,
        /// Sample from the independent (single-pass) model.
        #[arg(long)]
        independent: bool,
        /// Feed ground-truth action labels (requires a vocab.json).
        #[arg(long)]
        action_label: bool,
        /// Also write per-record teacher-forced heatmap dumps here.
        #[arg(long)]
        dump_heatmaps: Option<PathBuf>,
        /// Which split of the dataset to predict on.
        #[arg(long, value_enum, default_value_t = SplitName::All)]
        on: SplitName,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predictions against the dataset targets.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Predictions JSONL (from `predict`); omit when using --baseline.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Score a statistical baseline instead of predictions.
        #[arg(long, value_enum)]
        baseline: Option<BaselineName>,
        /// Directory of heatmap dumps for the likelihood metric.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Report JSON output path (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-joint error table CSV path.
        #[arg(long)]
        per_joint_csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::All)]
        on: SplitName,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export a dumped heatmap as PGM slices or re-dump it.
    Inspect {
        /// Heatmap dump to read.
        #[arg(long)]
        heatmap: PathBuf,
        /// Write 16 PGM slices along the chosen axis into this directory.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AxisName::Z)]
        axis: AxisName,
        /// Mark suppression survivors at full intensity.
        #[arg(long)]
        overlay_nms: bool,
        /// Re-encode the heatmap to this path (round-trip check).
        #[arg(long)]
        redump: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CHARPOSE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some()
                || matches!(
                    err.downcast_ref::<charpose::Error>(),
                    Some(charpose::Error::InvalidConfig(_))
                )
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { out, seed, n_per_mode, layout, actors } => {
            cmd_gen_data(&out, seed, n_per_mode, layout, actors)
        }
        Command::Train { data, out_dir, independent, action_label, resume, config } => {
            cmd_train(&data, &out_dir, independent, action_label, resume.as_deref(), &config)
        }
        Command::Predict {
            data,
            checkpoints,
            out,
            no_refine,
            independent,
            action_label,
            dump_heatmaps,
            on,
            config,
        } => cmd_predict(
            &data,
            &checkpoints,
            &out,
            no_refine,
            independent,
            action_label,
            dump_heatmaps.as_deref(),
            on,
            &config,
        ),
        Command::Eval {
            data,
            predictions,
            baseline,
            heatmaps,
            out,
            per_joint_csv,
            on,
            config,
        } => cmd_eval(
            &data,
            predictions.as_deref(),
            baseline,
            heatmaps.as_deref(),
            out.as_deref(),
            per_joint_csv.as_deref(),
            on,
            &config,
        ),
        Command::Inspect { heatmap, pgm_dir, axis, overlay_nms, redump } => {
            cmd_inspect(&heatmap, pgm_dir.as_deref(), axis, overlay_nms, redump.as_deref())
        }
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    out: &Path,
    seed: u64,
    n_per_mode: usize,
    layout: LayoutName,
    actors: usize,
) -> anyhow::Result<()> {
    let layout = match layout {
        LayoutName::TwoMode => LayoutSpec::two_mode(actors),
        LayoutName::Standard => LayoutSpec::standard(actors),
    };
    let records = synth_generate(seed, n_per_mode, &layout)?;
    let mut file = BufWriter::new(File::create(out).context("creating output file")?);
    save_dataset(&records, &mut file)?;
    file.flush()?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn split_records(
    records: Vec<DatasetRecord>,
    cfg: &RunConfig,
) -> anyhow::Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    match &cfg.split {
        Some(split) => {
            split.validate().map_err(|e| usage_err(e.to_string()))?;
            Ok(split_by_actor(&records, split)?)
        }
        None => Ok((records, Vec::new(), Vec::new())),
    }
}

fn select_split(
    records: Vec<DatasetRecord>,
    cfg: &RunConfig,
    on: SplitName,
) -> anyhow::Result<Vec<DatasetRecord>> {
    if on == SplitName::All {
        return Ok(records);
    }
    let (train, val, test) = split_records(records, cfg)?;
    Ok(match on {
        SplitName::Train => train,
        SplitName::Val => val,
        SplitName::Test => test,
        SplitName::All => unreachable!(),
    })
}

/// Sorted unique actions of the training split; index = action id.
fn build_vocab(records: &[DatasetRecord]) -> Vec<String> {
    let mut actions: Vec<String> = records.iter().map(|r| r.action.clone()).collect();
    actions.sort();
    actions.dedup();
    actions
}

fn vocab_lookup(vocab: &[String]) -> BTreeMap<String, usize> {
    vocab.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect()
}

fn stage_file(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.ckpt"))
}

fn open_log(dir: &Path, stage: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(format!("train_{stage}.csv"));
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "step,lr,loss,wall_ms")?;
    Ok(w)
}

fn log_step(w: &mut BufWriter<File>, log: &StepLog) -> anyhow::Result<()> {
    writeln!(w, "{},{},{},{}", log.step, log.lr, log.loss, log.wall_ms)?;
    Ok(())
}

fn cmd_train(
    data: &Path,
    out_dir: &Path,
    independent: bool,
    action_label: bool,
    resume: Option<&Path>,
    config_args: &ConfigArgs,
) -> anyhow::Result<()> {
    let cfg = config_args.resolve()?;
    let training = cfg.training();
    training.validate().map_err(|e| usage_err(e.to_string()))?;
    let records = load_dataset_file(data)?;
    let (train, val, _test) = split_records(records, &cfg)?;
    if train.is_empty() {
        bail!(charpose::Error::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir)?;

    let vocab = build_vocab(&train);
    let lookup = vocab_lookup(&vocab);
    let use_action = action_label;
    if use_action {
        let mut f = File::create(out_dir.join("vocab.json"))?;
        serde_json::to_writer(&mut f, &vocab)?;
    }
    let action_of = move |r: &DatasetRecord| -> Option<usize> {
        use_action.then(|| lookup.get(&r.action).copied().unwrap_or(0))
    };

    let loss: LossKind = cfg.loss.into();
    let stages: Vec<Stage> = if independent || loss == LossKind::DeterministicL2 {
        vec![Stage::AllJoints]
    } else {
        vec![Stage::RightHand, Stage::LeftHand, Stage::Body]
    };

    for (idx, stage) in stages.iter().copied().enumerate() {
        let mut model_config = stage.config(cfg.embed_dim);
        model_config.use_action_node = use_action;
        model_config.action_vocab_size = vocab.len().max(1);
        model_config.dropout_p = cfg.dropout_p;

        let stage_name = match loss {
            LossKind::DeterministicL2 => "deterministic",
            _ if independent => "independent",
            _ => stage.name(),
        };
        let mut params = match resume {
            Some(dir) => {
                let path = stage_file(dir, stage_name);
                let mut f = File::open(&path)
                    .with_context(|| format!("missing resume checkpoint {}", path.display()))?;
                load_checkpoint(&mut f)?
            }
            None => {
                let mut p = ModelParams::init(model_config, derive(training.seed, 100 + idx as u64))?;
                match loss {
                    LossKind::L1 | LossKind::L2 => {
                        p.add_scalar_head(derive(training.seed, 200 + idx as u64))
                    }
                    LossKind::DeterministicL2 => {
                        p.add_deterministic_head(derive(training.seed, 300))
                    }
                    LossKind::CrossEntropy => {}
                }
                p
            }
        };
        params.config.dropout_p = cfg.dropout_p;

        let mut log = open_log(out_dir, stage_name)?;
        let mut log_err = None;
        params = train_stage(
            &train,
            &val,
            stage,
            model_config,
            &training,
            &action_of,
            params,
            &mut |step| {
                if let Err(e) = log_step(&mut log, &step) {
                    log_err.get_or_insert(e);
                }
            },
        )?;
        log.flush()?;
        if let Some(e) = log_err {
            return Err(e);
        }
        let mut f = BufWriter::new(File::create(stage_file(out_dir, stage_name))?);
        save_checkpoint(&params, &mut f)?;
        f.flush()?;
        println!("trained {stage_name} stage -> {}", stage_file(out_dir, stage_name).display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn load_stage(dir: &Path, stage: &str) -> anyhow::Result<ModelParams> {
    let path = stage_file(dir, stage);
    let mut f =
        File::open(&path).with_context(|| format!("missing checkpoint {}", path.display()))?;
    Ok(load_checkpoint(&mut f)?)
}

fn load_vocab(dir: &Path) -> anyhow::Result<BTreeMap<String, usize>> {
    let path = dir.join("vocab.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("missing action vocab {}", path.display()))?;
    let vocab: Vec<String> = serde_json::from_str(&text)?;
    Ok(vocab_lookup(&vocab))
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    data: &Path,
    checkpoints: &Path,
    out: &Path,
    no_refine: bool,
    independent: bool,
    action_label: bool,
    dump_heatmaps: Option<&Path>,
    on: SplitName,
    config_args: &ConfigArgs,
) -> anyhow::Result<()> {
    let cfg = config_args.resolve()?;
    if cfg.k == 0 {
        return Err(usage_err("k must be at least 1"));
    }
    let mut records = select_split(load_dataset_file(data)?, &cfg, on)?;
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let vocab = if action_label { Some(load_vocab(checkpoints)?) } else { None };
    let action_of = |r: &DatasetRecord| -> anyhow::Result<Option<usize>> {
        match &vocab {
            Some(v) => v
                .get(&r.action)
                .copied()
                .map(Some)
                .ok_or_else(|| anyhow!("action {:?} not in training vocab", r.action)),
            None => Ok(None),
        }
    };

    let models = if independent {
        None
    } else {
        Some(StageModels {
            right: load_stage(checkpoints, "right")?,
            left: load_stage(checkpoints, "left")?,
            body: load_stage(checkpoints, "body")?,
        })
    };
    let all_model = if independent { Some(load_stage(checkpoints, "independent")?) } else { None };

    if let Some(dir) = dump_heatmaps {
        std::fs::create_dir_all(dir)?;
    }

    let solver = cfg.solver();
    let outputs: Vec<anyhow::Result<(String, Vec<Pose>)>> = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let action = action_of(record)?;
            let seed = derive(cfg.seed, i as u64);
            let set = match (&models, &all_model) {
                (Some(m), _) => sample_pose_set(m, &record.input_pose, cfg.k, seed, action)?,
                (None, Some(m)) => {
                    sample_pose_set_independent(m, &record.input_pose, cfg.k, seed)?
                }
                _ => unreachable!(),
            };
            let poses: Vec<Pose> = if no_refine {
                set.poses.clone()
            } else {
                set.poses
                    .iter()
                    .zip(&set.heatmaps)
                    .map(|(pose, maps)| {
                        let problem = RefinementProblem::from_sample(
                            &record.input_pose,
                            pose,
                            maps.clone(),
                            cfg.refine_weights,
                        );
                        refine(&problem, &solver).map(|(p, _, _)| p)
                    })
                    .collect::<Result<_, _>>()?
            };
            if let Some(dir) = dump_heatmaps {
                dump_record_heatmaps(dir, record, &models, &all_model, action)?;
            }
            Ok((record.id.clone(), poses))
        })
        .collect();

    let mut sets = Vec::with_capacity(outputs.len());
    for o in outputs {
        sets.push(o?);
    }
    let mut file = BufWriter::new(File::create(out)?);
    write_predictions(&sets, &mut file)?;
    file.flush()?;
    println!(
        "wrote {} hypotheses for {} records to {}",
        sets.iter().map(|(_, p)| p.len()).sum::<usize>(),
        sets.len(),
        out.display()
    );
    Ok(())
}

/// Teacher-forced per-joint heatmaps for likelihood evaluation: conditional
/// stages see the ground-truth prior joints, mirroring how the stages were
/// trained.
fn dump_record_heatmaps(
    dir: &Path,
    record: &DatasetRecord,
    models: &Option<StageModels>,
    all_model: &Option<ModelParams>,
    action: Option<usize>,
) -> anyhow::Result<()> {
    let transform = GridTransform::centered_on(record.input_pose.joints[MID_HIP]);
    let mut per_joint: Vec<Option<VolumetricHeatmap>> = vec![None; NUM_JOINTS];
    match (models, all_model) {
        (Some(m), _) => {
            let right = charpose::model::predict_heatmaps(
                &m.right,
                &StageInput {
                    input_pose: &record.input_pose,
                    prior_joints: &[],
                    action_id: action,
                    transform,
                },
            )?;
            per_joint[RIGHT_FINGER] = Some(right.into_iter().next().unwrap());
            let left = charpose::model::predict_heatmaps(
                &m.left,
                &StageInput {
                    input_pose: &record.input_pose,
                    prior_joints: &[(RIGHT_FINGER, record.target_pose.joints[RIGHT_FINGER])],
                    action_id: action,
                    transform,
                },
            )?;
            per_joint[LEFT_FINGER] = Some(left.into_iter().next().unwrap());
            let body = charpose::model::predict_heatmaps(
                &m.body,
                &StageInput {
                    input_pose: &record.input_pose,
                    prior_joints: &[
                        (RIGHT_FINGER, record.target_pose.joints[RIGHT_FINGER]),
                        (LEFT_FINGER, record.target_pose.joints[LEFT_FINGER]),
                    ],
                    action_id: action,
                    transform,
                },
            )?;
            for (h, j) in body.into_iter().zip(Stage::Body.out_joints()) {
                per_joint[j] = Some(h);
            }
        }
        (None, Some(m)) => {
            let maps = charpose::model::predict_heatmaps(
                &m.clone(),
                &StageInput {
                    input_pose: &record.input_pose,
                    prior_joints: &[],
                    action_id: None,
                    transform,
                },
            )?;
            for (j, h) in maps.into_iter().enumerate() {
                per_joint[j] = Some(h);
            }
        }
        _ => unreachable!(),
    }
    for (j, h) in per_joint.into_iter().enumerate() {
        let h = h.expect("all joints covered");
        let path = dir.join(format!("{}_j{j:02}.chm", record.id));
        let mut f = BufWriter::new(File::create(path)?);
        dump_heatmap(&h, &mut f)?;
        f.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data: &Path,
    predictions: Option<&Path>,
    baseline: Option<BaselineName>,
    heatmaps: Option<&Path>,
    out: Option<&Path>,
    per_joint_csv: Option<&Path>,
    on: SplitName,
    config_args: &ConfigArgs,
) -> anyhow::Result<()> {
    let cfg = config_args.resolve()?;
    let all_records = load_dataset_file(data)?;
    let eval_records = select_split(all_records.clone(), &cfg, on)?;
    if eval_records.is_empty() {
        bail!("no records to evaluate in the selected split");
    }

    let hypotheses_by_id: BTreeMap<String, Vec<Pose>> = match (predictions, baseline) {
        (Some(path), None) => {
            let preds = read_predictions(File::open(path)?)?;
            let by_id: BTreeMap<String, Vec<Pose>> = preds.into_iter().collect();
            let missing: Vec<&String> = eval_records
                .iter()
                .map(|r| &r.id)
                .filter(|id| !by_id.contains_key(*id))
                .collect();
            let unknown: Vec<&String> = by_id
                .keys()
                .filter(|id| !eval_records.iter().any(|r| &r.id == *id))
                .collect();
            if !missing.is_empty() || !unknown.is_empty() {
                bail!(
                    "prediction/target id mismatch: missing predictions for {missing:?}, \
                     predictions without targets {unknown:?}"
                );
            }
            by_id
        }
        (None, Some(mode)) => {
            let (train, _, _) = split_records(all_records.clone(), &cfg)?;
            let fit_on = if train.is_empty() { &all_records } else { &train };
            baseline_hypotheses(mode, fit_on, &eval_records)?
        }
        _ => {
            return Err(usage_err(
                "provide exactly one of --predictions or --baseline",
            ))
        }
    };

    let cases: Vec<EvalCase> = eval_records
        .iter()
        .map(|record| -> anyhow::Result<EvalCase> {
            let maps = match heatmaps {
                Some(dir) => Some(load_record_heatmaps(dir, record)?),
                None => None,
            };
            Ok(EvalCase {
                id: record.id.clone(),
                hypotheses: hypotheses_by_id[&record.id].clone(),
                target: record.target_pose.clone(),
                heatmaps: maps,
            })
        })
        .collect::<anyhow::Result<_>>()?;

    let report = evaluate(&cases)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(path) = per_joint_csv {
        let mut f = BufWriter::new(File::create(path)?);
        write_per_joint_csv(&report, &mut f)?;
        f.flush()?;
    }
    eprintln!(
        "evaluated {} records (k={}): mpjpe {:.4} m, <0.15m {:.2}%, <0.25m {:.2}%",
        report.records, report.k, report.mpjpe_mean, report.pct_below_015, report.pct_below_025
    );
    Ok(())
}

fn baseline_hypotheses(
    mode: BaselineName,
    train: &[DatasetRecord],
    eval_records: &[DatasetRecord],
) -> anyhow::Result<BTreeMap<String, Vec<Pose>>> {
    let mut out = BTreeMap::new();
    match mode {
        BaselineName::ZeroVelocity => {
            for r in eval_records {
                out.insert(r.id.clone(), vec![charpose::eval::zero_velocity_baseline(&r.input_pose)]);
            }
        }
        BaselineName::AvgGlobal | BaselineName::AvgPerAction => {
            let targets: Vec<(String, Pose)> = train
                .iter()
                .map(|r| (r.action.clone(), r.target_pose.clone()))
                .collect();
            let fitted = AveragePoseBaseline::fit(&targets)?;
            let kind = if mode == BaselineName::AvgGlobal {
                BaselineMode::Global
            } else {
                BaselineMode::PerAction
            };
            for r in eval_records {
                let (pose, fell_back) = fitted.predict(&r.action, kind);
                if fell_back {
                    eprintln!(
                        "warning: action {:?} unseen in training; falling back to the global mean",
                        r.action
                    );
                }
                out.insert(r.id.clone(), vec![pose]);
            }
        }
    }
    Ok(out)
}

/// Load `{id}_jNN.chm` for all 25 joints and re-anchor them on the record's
/// input grid (the dump format stores values and voxel size only).
fn load_record_heatmaps(dir: &Path, record: &DatasetRecord) -> anyhow::Result<Vec<VolumetricHeatmap>> {
    let transform = GridTransform::centered_on(record.input_pose.joints[MID_HIP]);
    (0..NUM_JOINTS)
        .map(|j| {
            let path = dir.join(format!("{}_j{j:02}.chm", record.id));
            let mut f = File::open(&path)
                .with_context(|| format!("missing heatmap dump {}", path.display()))?;
            let loaded = load_heatmap(&mut f)?;
            let values = loaded.values().to_vec();
            Ok(match loaded.form() {
                charpose::heatmap::HeatmapForm::Logits => {
                    VolumetricHeatmap::logits(transform, values)?
                }
                charpose::heatmap::HeatmapForm::Continuous => {
                    VolumetricHeatmap::continuous(transform, values)?
                }
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn cmd_inspect(
    heatmap: &Path,
    pgm_dir: Option<&Path>,
    axis: AxisName,
    overlay_nms: bool,
    redump: Option<&Path>,
) -> anyhow::Result<()> {
    let mut f = File::open(heatmap).context("opening heatmap dump")?;
    let loaded = load_heatmap(&mut f)?;
    let continuous = match loaded.form() {
        charpose::heatmap::HeatmapForm::Continuous => loaded.clone(),
        charpose::heatmap::HeatmapForm::Logits => {
            charpose::heatmap::expected_value_grid(&loaded)?
        }
    };
    if let Some(path) = redump {
        let mut w = BufWriter::new(File::create(path)?);
        dump_heatmap(&loaded, &mut w)?;
        w.flush()?;
        println!("re-dumped to {}", path.display());
    }
    if let Some(dir) = pgm_dir {
        std::fs::create_dir_all(dir)?;
        let (axis_index, axis_name) = match axis {
            AxisName::X => (0, "x"),
            AxisName::Y => (1, "y"),
            AxisName::Z => (2, "z"),
        };
        for slice in 0..GRID_RES {
            let img = pgm_slice(&continuous, axis_index, slice, overlay_nms)?;
            let path = dir.join(format!("slice_{axis_name}{slice:02}.pgm"));
            std::fs::write(path, img)?;
        }
        println!("wrote {GRID_RES} slices to {}", dir.display());
    }
    Ok(())
}
