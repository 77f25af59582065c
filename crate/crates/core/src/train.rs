//! Losses, class weighting, Adam with linear warmup, and the teacher-forced
//! three-stage training loop.

use crate::data::DatasetRecord;
use crate::heatmap::{
    discretize, gaussian_target, sample_voxel, BinGrid, GridTransform, VolumetricHeatmap,
    GRID_VOL, PROB_BINS,
};
use crate::model::{
    predict_heatmaps, predict_on_tape, BoundParams, HeadKind, ModelConfig, ModelParams,
    StageInput, TrainCtx,
};
use crate::numeric::{NodeId, Tape, Tensor};
use crate::rng::{derive, SplitMix64};
use crate::skeleton::{dist, Pose, LEFT_FINGER, MID_HIP, NUM_JOINTS, RIGHT_FINGER};
use crate::{Error, Result};
use rayon::prelude::*;
use std::time::Instant;

/// Which objective trains the heatmap decoder (or the deterministic head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    CrossEntropy,
    L1,
    L2,
    DeterministicL2,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub loss_kind: LossKind,
    pub bin0_weight: f64,
    pub seed: u64,
    /// Evaluate the stage on validation records every this many steps
    /// (0 disables evaluation and early stopping).
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    /// Stop as soon as the validation error drops below this threshold.
    pub stop_below_val_error: Option<f64>,
    /// Hypotheses per joint for the validation min-of-k error.
    pub eval_k: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.002,
            warmup_steps: 4000,
            batch_size: 250,
            max_steps: 20_000,
            loss_kind: LossKind::CrossEntropy,
            bin0_weight: 0.1,
            seed: 0,
            eval_every: 0,
            patience: None,
            stop_below_val_error: None,
            eval_k: 6,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("learning rate and warmup must be positive".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig("batch size and max steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bin0_weight) {
            return Err(Error::InvalidConfig("bin0_weight must be in [0, 1]".into()));
        }
        if self.eval_every > 0 && self.eval_k == 0 {
            return Err(Error::InvalidConfig("eval_k must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup: `lr · min(1, step / warmup)`, flat afterwards. Steps are
/// 1-based.
pub fn lr_schedule(config: &TrainingConfig, step: usize) -> f64 {
    config.learning_rate * (step as f64 / config.warmup_steps as f64).min(1.0)
}

/// Per-bin weights for the cross-entropy loss. The no-probability bin gets
/// a fixed small weight; the rest are inverse log-scaled occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: [f64; PROB_BINS],
}

/// Compute class weights from the training targets: for bins c ≥ 1,
/// `w_c = 1 / ln(1 + n_c)` rescaled so present bins average to 1; bin 0 is
/// pinned to `bin0_weight`. Bins that never occur get the maximum of the
/// other rescaled weights and are reported back for a caller-side warning.
pub fn class_weights<'a>(
    targets: impl IntoIterator<Item = &'a BinGrid>,
    bin0_weight: f64,
) -> Result<(ClassWeights, Vec<u8>)> {
    let mut counts = [0u64; PROB_BINS];
    let mut any = false;
    for grid in targets {
        any = true;
        for &b in &grid.bins {
            counts[b as usize] += 1;
        }
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    let mut weights = [0.0; PROB_BINS];
    weights[0] = bin0_weight;
    let present: Vec<usize> = (1..PROB_BINS).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::InvalidConfig(
            "no nonzero-probability bins in the training targets".into(),
        ));
    }
    for &c in &present {
        weights[c] = 1.0 / (1.0 + counts[c] as f64).ln();
    }
    let mean: f64 = present.iter().map(|&c| weights[c]).sum::<f64>() / present.len() as f64;
    for &c in &present {
        weights[c] /= mean;
    }
    let max_present = present.iter().map(|&c| weights[c]).fold(0.0, f64::max);
    let mut missing = Vec::new();
    for c in 1..PROB_BINS {
        if counts[c] == 0 {
            weights[c] = max_present;
            missing.push(c as u8);
        }
    }
    Ok((ClassWeights { weights }, missing))
}

/// Weighted cross-entropy over per-joint bin logits, on the tape:
/// mean over joints and voxels of `w[target] · (−log softmax(logits)[target])`.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: &[NodeId],
    targets: &[&BinGrid],
    w: &ClassWeights,
) -> Result<NodeId> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            detail: format!("{} logit sets vs {} targets", logits.len(), targets.len()),
        });
    }
    let stacked = if logits.len() == 1 {
        logits[0]
    } else {
        tape.concat_rows(logits)?
    };
    let mut ids = Vec::with_capacity(targets.len() * GRID_VOL);
    let mut row_weights = Vec::with_capacity(targets.len() * GRID_VOL);
    for grid in targets {
        for &b in &grid.bins {
            ids.push(b as usize);
            row_weights.push(w.weights[b as usize]);
        }
    }
    let lp = tape.log_softmax(stacked)?;
    let picked = tape.pick_neg_log_prob(lp, &ids)?;
    let wvec = tape.leaf(Tensor::new(vec![row_weights.len()], row_weights)?);
    let weighted = tape.mul(picked, wvec)?;
    Ok(tape.mean(weighted))
}

/// Mean absolute / mean squared voxel difference between two continuous
/// heatmaps on the same grid.
pub fn continuous_heatmap_loss(
    pred: &VolumetricHeatmap,
    target: &VolumetricHeatmap,
    kind: LossKind,
) -> Result<f64> {
    use crate::heatmap::HeatmapForm;
    if pred.form() != HeatmapForm::Continuous || target.form() != HeatmapForm::Continuous {
        return Err(Error::FormMismatch { expected: "continuous" });
    }
    let n = pred.values().len() as f64;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| match kind {
            LossKind::L1 => (p - t).abs(),
            _ => (p - t) * (p - t),
        })
        .sum();
    Ok(sum / n)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with the conventional moment defaults (β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8) and bias correction.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.entries().iter().map(|(_, t)| t.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update; `grads` aligned with `params.entries()` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in params.entries_mut().into_iter().enumerate() {
            let g = grads[i].values();
            let mut values = tensor.values().to_vec();
            for (j, val) in values.iter_mut().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / c1;
                let vhat = *v / c2;
                *val -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            *tensor = Tensor::new(tensor.shape().to_vec(), values).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// The autoregressive stages plus the single-pass ablation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RightHand,
    LeftHand,
    Body,
    /// All 25 joints in one unconditioned pass (independent ablation and
    /// the deterministic head trunk).
    AllJoints,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::RightHand => "right",
            Stage::LeftHand => "left",
            Stage::Body => "body",
            Stage::AllJoints => "all",
        }
    }

    /// Joint ids this stage predicts, in output order.
    pub fn out_joints(self) -> Vec<usize> {
        match self {
            Stage::RightHand => vec![RIGHT_FINGER],
            Stage::LeftHand => vec![LEFT_FINGER],
            Stage::Body => (0..NUM_JOINTS)
                .filter(|&j| j != RIGHT_FINGER && j != LEFT_FINGER)
                .collect(),
            Stage::AllJoints => (0..NUM_JOINTS).collect(),
        }
    }

    /// Joint ids this stage conditions on (teacher-forced at train time).
    pub fn prior_ids(self) -> &'static [usize] {
        match self {
            Stage::RightHand | Stage::AllJoints => &[],
            Stage::LeftHand => &[RIGHT_FINGER],
            Stage::Body => &[RIGHT_FINGER, LEFT_FINGER],
        }
    }

    pub fn config(self, embed_dim: usize) -> ModelConfig {
        match self {
            Stage::RightHand => ModelConfig::right_hand(embed_dim),
            Stage::LeftHand => ModelConfig::left_hand(embed_dim),
            Stage::Body => ModelConfig::body(embed_dim),
            Stage::AllJoints => ModelConfig::all_joints(embed_dim),
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

struct PreparedExample {
    transform: GridTransform,
    priors: Vec<(usize, [f64; 3])>,
    /// Per out-joint discretized targets (cross-entropy path).
    bins: Vec<BinGrid>,
    /// Per out-joint continuous targets (regression path).
    continuous: Vec<Vec<f64>>,
    /// Flattened target pose minus input pose (deterministic path).
    offsets: Vec<f64>,
    input_pose: Pose,
}

fn prepare(records: &[DatasetRecord], stage: Stage) -> Result<Vec<PreparedExample>> {
    let out_joints = stage.out_joints();
    records
        .iter()
        .map(|r| {
            let transform = GridTransform::centered_on(r.input_pose.joints[MID_HIP]);
            let mut bins = Vec::with_capacity(out_joints.len());
            let mut continuous = Vec::with_capacity(out_joints.len());
            for &j in &out_joints {
                let voxel = transform.world_to_voxel(r.target_pose.joints[j]).ok_or(
                    Error::TargetOutOfGrid {
                        record: r.id.clone(),
                        joint: j,
                    },
                )?;
                let target = gaussian_target(transform, voxel)?;
                bins.push(discretize(&target)?);
                continuous.push(target.values().to_vec());
            }
            let priors = stage
                .prior_ids()
                .iter()
                .map(|&j| (j, r.target_pose.joints[j]))
                .collect();
            let mut offsets = Vec::with_capacity(NUM_JOINTS * 3);
            for (t, i) in r.target_pose.joints.iter().zip(r.input_pose.joints.iter()) {
                offsets.extend_from_slice(&[t[0] - i[0], t[1] - i[1], t[2] - i[2]]);
            }
            Ok(PreparedExample {
                transform,
                priors,
                bins,
                continuous,
                offsets,
                input_pose: r.input_pose.clone(),
            })
        })
        .collect()
}

/// Build the per-example loss on a fresh tape; returns (loss node, bound).
fn example_loss(
    tape: &mut Tape,
    params: &ModelParams,
    example: &PreparedExample,
    action_id: Option<usize>,
    weights: &ClassWeights,
    loss_kind: LossKind,
    dropout_seed: u64,
) -> Result<(NodeId, BoundParams)> {
    let bound = params.bind(tape);
    let input = StageInput {
        input_pose: &example.input_pose,
        prior_joints: &example.priors,
        action_id,
        transform: example.transform,
    };
    let train = Some(TrainCtx { dropout_seed });
    let loss = match loss_kind {
        LossKind::CrossEntropy => {
            let logits = predict_on_tape(tape, params, &bound, &input, HeadKind::Bins, train)?;
            let refs: Vec<&BinGrid> = example.bins.iter().collect();
            weighted_cross_entropy(tape, &logits, &refs, weights)?
        }
        LossKind::L1 | LossKind::L2 => {
            let preds = predict_on_tape(tape, params, &bound, &input, HeadKind::Scalar, train)?;
            let mut rows = Vec::with_capacity(preds.len());
            for p in preds {
                rows.push(tape.reshape(p, vec![1, GRID_VOL])?);
            }
            let stacked = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
            let flat_target: Vec<f64> = example.continuous.concat();
            let target = tape.leaf(Tensor::new(
                vec![example.continuous.len(), GRID_VOL],
                flat_target,
            )?);
            let diff = tape.sub(stacked, target)?;
            let dev = if loss_kind == LossKind::L1 {
                tape.abs(diff)
            } else {
                tape.mul(diff, diff)?
            };
            tape.mean(dev)
        }
        LossKind::DeterministicL2 => {
            let off = crate::model::deterministic_head_on_tape(tape, params, &bound, &input, train)?;
            let flat = tape.reshape(off, vec![NUM_JOINTS * 3])?;
            let target = tape.leaf(Tensor::new(vec![NUM_JOINTS * 3], example.offsets.clone())?);
            let diff = tape.sub(flat, target)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)
        }
    };
    Ok((loss, bound))
}

/// Deterministic permutation of 0..n from a seed (Fisher-Yates).
fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}

/// Min-of-k error of one stage on held-out records: per record, draw k
/// voxel samples per output joint, score each hypothesis by the mean
/// distance to the ground-truth joints, and take the best. Returns the mean
/// over records.
pub fn stage_val_error(
    params: &ModelParams,
    stage: Stage,
    records: &[DatasetRecord],
    k: usize,
    seed: u64,
    action_of: &dyn Fn(&DatasetRecord) -> Option<usize>,
) -> Result<f64> {
    let out_joints = stage.out_joints();
    let mut total = 0.0;
    for (ri, r) in records.iter().enumerate() {
        let transform = GridTransform::centered_on(r.input_pose.joints[MID_HIP]);
        let priors: Vec<(usize, [f64; 3])> = stage
            .prior_ids()
            .iter()
            .map(|&j| (j, r.target_pose.joints[j]))
            .collect();
        let input = StageInput {
            input_pose: &r.input_pose,
            prior_joints: &priors,
            action_id: action_of(r),
            transform,
        };
        let heatmaps = predict_heatmaps(params, &input)?;
        let mut draws: Vec<Vec<[f64; 3]>> = Vec::with_capacity(heatmaps.len());
        for (ji, h) in heatmaps.iter().enumerate() {
            let ev = crate::heatmap::expected_value_grid(h)?;
            let voxels = sample_voxel(&ev, k, derive(seed, (ri * 31 + ji) as u64))?;
            draws.push(voxels.into_iter().map(|v| transform.voxel_center(v)).collect());
        }
        let mut best = f64::INFINITY;
        for s in 0..k {
            let mut err = 0.0;
            for (ji, &j) in out_joints.iter().enumerate() {
                err += dist(draws[ji][s.min(draws[ji].len() - 1)], r.target_pose.joints[j]);
            }
            best = best.min(err / out_joints.len() as f64);
        }
        total += best;
    }
    Ok(total / records.len() as f64)
}

/// Train one stage with teacher forcing. `action_of` maps a record to its
/// action id when the config uses an action node (and `None` otherwise).
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    stage: Stage,
    model_config: ModelConfig,
    config: &TrainingConfig,
    action_of: &(dyn Fn(&DatasetRecord) -> Option<usize> + Sync),
    mut params: ModelParams,
    on_step: &mut dyn FnMut(StepLog),
) -> Result<ModelParams> {
    config.validate()?;
    if params.config != model_config {
        return Err(Error::InvalidConfig(
            "stage parameters do not match the model configuration".into(),
        ));
    }
    if train_records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples = prepare(train_records, stage)?;
    let (weights, _missing) = match config.loss_kind {
        LossKind::CrossEntropy => {
            let all_bins: Vec<&BinGrid> = examples.iter().flat_map(|e| e.bins.iter()).collect();
            class_weights(all_bins, config.bin0_weight)?
        }
        _ => (ClassWeights { weights: [1.0; PROB_BINS] }, Vec::new()),
    };

    let actions: Vec<Option<usize>> = train_records.iter().map(|r| action_of(r)).collect();
    let mut adam = Adam::new(&params);
    let n = examples.len();
    let mut order = permutation(n, derive(config.seed, 0));
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut best_val = f64::INFINITY;
    let mut evals_since_best = 0usize;

    for step in 1..=config.max_steps {
        let started = Instant::now();
        let lr = lr_schedule(config, step);

        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == n {
                epoch += 1;
                order = permutation(n, derive(config.seed, epoch));
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        // Per-example gradients on independent tapes, reduced in batch order.
        let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &ei)| {
                let mut tape = Tape::new();
                let dropout_seed = derive(config.seed, (step as u64) << 20 | bi as u64);
                let (loss, bound) = example_loss(
                    &mut tape,
                    &params,
                    &examples[ei],
                    actions[ei],
                    &weights,
                    config.loss_kind,
                    dropout_seed,
                )?;
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = bound.ids.iter().map(|&(_, id)| grads.wrt(id)).collect();
                Ok((tape.value(loss).item(), g))
            })
            .collect();

        let mut batch_loss = 0.0;
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (loss, grads) = r?;
            batch_loss += loss;
            match &mut sum {
                None => sum = Some(grads.iter().map(|t| t.values().to_vec()).collect()),
                Some(acc) => {
                    for (a, t) in acc.iter_mut().zip(&grads) {
                        for (x, &y) in a.iter_mut().zip(t.values()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        batch_loss /= config.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "training diverged: non-finite loss at step {step}"
            )));
        }
        let scale = 1.0 / config.batch_size as f64;
        let grads: Vec<Tensor> = sum
            .unwrap()
            .into_iter()
            .zip(params.entries().iter())
            .map(|(mut v, (_, t))| {
                for x in &mut v {
                    *x *= scale;
                }
                Tensor::new(t.shape().to_vec(), v).unwrap()
            })
            .collect();
        adam.step(&mut params, &grads, lr);

        on_step(StepLog {
            step,
            lr,
            loss: batch_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        if config.eval_every > 0 && step % config.eval_every == 0 && !val_records.is_empty() {
            let val = stage_val_error(
                &params,
                stage,
                val_records,
                config.eval_k,
                derive(config.seed, 0xEAA1),
                &|r| action_of(r),
            )?;
            if let Some(limit) = config.stop_below_val_error {
                if val <= limit {
                    break;
                }
            }
            if val + 1e-12 < best_val {
                best_val = val;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if let Some(p) = config.patience {
                    if evals_since_best >= p {
                        break;
                    }
                }
            }
        }
    }
    Ok(params)
}

/// The three trained autoregressive stages.
#[derive(Debug, Clone)]
pub struct StageModels {
    pub right: ModelParams,
    pub left: ModelParams,
    pub body: ModelParams,
}

/// Train right hand, left hand, and body stages with teacher forcing
/// (conditional stages see ground-truth prior joints).
pub fn train_full(
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    embed_dim: usize,
    config: &TrainingConfig,
    use_action_node: bool,
    action_of: &(dyn Fn(&DatasetRecord) -> Option<usize> + Sync),
    mut on_step: impl FnMut(&'static str, StepLog),
) -> Result<StageModels> {
    let mut trained = Vec::with_capacity(3);
    for (idx, stage) in [Stage::RightHand, Stage::LeftHand, Stage::Body].into_iter().enumerate() {
        let mut mc = stage.config(embed_dim);
        mc.use_action_node = use_action_node;
        let params = ModelParams::init(mc, derive(config.seed, 100 + idx as u64))?;
        let name = stage.name();
        let params = train_stage(
            train_records,
            val_records,
            stage,
            mc,
            config,
            action_of,
            params,
            &mut |log| on_step(name, log),
        )?;
        trained.push(params);
    }
    let body = trained.pop().unwrap();
    let left = trained.pop().unwrap();
    let right = trained.pop().unwrap();
    Ok(StageModels { right, left, body })
}
