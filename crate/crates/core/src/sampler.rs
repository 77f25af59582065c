//! Autoregressive pose generation.
//!
//! Per hypothesis: draw the right finger from its heatmap, predict the left
//! finger conditioned on that drawn point and draw it, then predict the 23
//! body joints conditioned on both fingers and draw one voxel per joint.
//! All randomness sits in the right-finger draw phase (per-hypothesis
//! conditional draws are single-sample, hence deterministic top maxima), so
//! hypothesis sets for growing k are nested under a fixed seed.
//!
//! Conditional heatmaps are cached by the conditioning voxels: hypotheses
//! that drew the same right finger share the left-stage prediction, and so
//! on for the body stage.

use crate::heatmap::{
    expected_value_grid, sample_voxel, GridTransform, VolumetricHeatmap, VoxelIndex,
};
use crate::model::{predict_heatmaps, StageInput};
use crate::rng::derive;
use crate::skeleton::{Point3, Pose, LEFT_FINGER, MID_HIP, NUM_JOINTS, RIGHT_FINGER};
use crate::train::{Stage, StageModels};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

/// k sampled pose hypotheses plus the continuous heatmap each joint was
/// drawn from (heatmap buffers are shared, clones are cheap).
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub poses: Vec<Pose>,
    /// `heatmaps[i][j]`: continuous heatmap behind joint j of hypothesis i.
    pub heatmaps: Vec<Vec<VolumetricHeatmap>>,
    pub seed: u64,
}

fn check_stage(params: &crate::model::ModelParams, stage: Stage) -> Result<()> {
    let cfg = stage.config(params.config.embed_dim);
    if params.config.n_out_joints != cfg.n_out_joints || params.config.n_prior != cfg.n_prior {
        return Err(Error::MissingStage(stage.name()));
    }
    Ok(())
}

/// Continuous per-joint grids for one stage pass: the expected-value grid
/// of the bin logits, or the raw regression output when the stage was
/// trained with the scalar ablation head.
fn stage_continuous(
    params: &crate::model::ModelParams,
    input: &StageInput,
) -> Result<Vec<VolumetricHeatmap>> {
    if params.has_scalar_head() {
        crate::model::predict_continuous(params, input)
    } else {
        predict_heatmaps(params, input)?
            .iter()
            .map(expected_value_grid)
            .collect()
    }
}

/// Draw k complete pose hypotheses autoregressively.
pub fn sample_pose_set(
    models: &StageModels,
    input_pose: &Pose,
    k: usize,
    seed: u64,
    action_id: Option<usize>,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    check_stage(&models.right, Stage::RightHand)?;
    check_stage(&models.left, Stage::LeftHand)?;
    check_stage(&models.body, Stage::Body)?;
    let transform = GridTransform::centered_on(input_pose.joints[MID_HIP]);

    // Stage 1: one right-finger heatmap serves every hypothesis.
    let right_ev = stage_continuous(
        &models.right,
        &StageInput {
            input_pose,
            prior_joints: &[],
            action_id,
            transform,
        },
    )?
    .remove(0);
    let right_voxels = sample_voxel(&right_ev, k, seed)?;

    let mut left_cache: HashMap<VoxelIndex, (VolumetricHeatmap, VoxelIndex)> = HashMap::new();
    let mut body_cache: HashMap<(VoxelIndex, VoxelIndex), (Vec<VolumetricHeatmap>, Vec<VoxelIndex>)> =
        HashMap::new();

    let body_joints = Stage::Body.out_joints();
    let mut poses = Vec::with_capacity(k);
    let mut heatmap_sets = Vec::with_capacity(k);
    for (i, &right_voxel) in right_voxels.iter().enumerate() {
        // Per-hypothesis substream; conditional draws are single-sample and
        // therefore deterministic, so this only matters if a conditional
        // stage ever samples more than its top maximum.
        let hyp_seed = derive(seed, i as u64);
        let right_point = transform.voxel_center(right_voxel);

        let (left_ev, left_voxel) = match left_cache.get(&right_voxel) {
            Some(hit) => hit.clone(),
            None => {
                let ev = stage_continuous(
                    &models.left,
                    &StageInput {
                        input_pose,
                        prior_joints: &[(RIGHT_FINGER, right_point)],
                        action_id,
                        transform,
                    },
                )?
                .remove(0);
                let voxel = sample_voxel(&ev, 1, derive(hyp_seed, 1))?[0];
                left_cache.insert(right_voxel, (ev.clone(), voxel));
                (ev, voxel)
            }
        };
        let left_point = transform.voxel_center(left_voxel);

        let key = (right_voxel, left_voxel);
        let (body_evs, body_voxels) = match body_cache.get(&key) {
            Some(hit) => hit.clone(),
            None => {
                let evs = stage_continuous(
                    &models.body,
                    &StageInput {
                        input_pose,
                        prior_joints: &[
                            (RIGHT_FINGER, right_point),
                            (LEFT_FINGER, left_point),
                        ],
                        action_id,
                        transform,
                    },
                )?;
                let mut voxels = Vec::with_capacity(evs.len());
                for (ji, ev) in evs.iter().enumerate() {
                    voxels.push(sample_voxel(ev, 1, derive(hyp_seed, 2 + ji as u64))?[0]);
                }
                body_cache.insert(key, (evs.clone(), voxels.clone()));
                (evs, voxels)
            }
        };

        let mut pose = Pose::zero();
        pose.joints[RIGHT_FINGER] = right_point;
        pose.joints[LEFT_FINGER] = left_point;
        let mut heatmaps: Vec<Option<VolumetricHeatmap>> = vec![None; NUM_JOINTS];
        heatmaps[RIGHT_FINGER] = Some(right_ev.clone());
        heatmaps[LEFT_FINGER] = Some(left_ev.clone());
        for (ji, &j) in body_joints.iter().enumerate() {
            pose.joints[j] = transform.voxel_center(body_voxels[ji]);
            heatmaps[j] = Some(body_evs[ji].clone());
        }
        poses.push(pose);
        heatmap_sets.push(heatmaps.into_iter().map(Option::unwrap).collect());
    }
    Ok(SampleSet { poses, heatmaps: heatmap_sets, seed })
}

/// Ablation: all 25 joints from one unconditioned pass, sampled
/// independently per joint.
pub fn sample_pose_set_independent(
    model: &crate::model::ModelParams,
    input_pose: &Pose,
    k: usize,
    seed: u64,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    check_stage(model, Stage::AllJoints)?;
    let transform = GridTransform::centered_on(input_pose.joints[MID_HIP]);
    let evs = stage_continuous(
        model,
        &StageInput {
            input_pose,
            prior_joints: &[],
            action_id: None,
            transform,
        },
    )?;
    let mut draws: Vec<Vec<VoxelIndex>> = Vec::with_capacity(NUM_JOINTS);
    for (j, ev) in evs.iter().enumerate() {
        draws.push(sample_voxel(ev, k, derive(seed, j as u64))?);
    }
    let mut poses = Vec::with_capacity(k);
    let mut heatmap_sets = Vec::with_capacity(k);
    for i in 0..k {
        let mut pose = Pose::zero();
        for j in 0..NUM_JOINTS {
            pose.joints[j] = transform.voxel_center(draws[j][i]);
        }
        poses.push(pose);
        heatmap_sets.push(evs.clone());
    }
    Ok(SampleSet { poses, heatmaps: heatmap_sets, seed })
}

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

/// One prediction line: a single hypothesis for a record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub record_id: String,
    pub hypothesis_index: usize,
    pub joints: Vec<Point3>,
}

/// Write hypotheses as JSON Lines, one record per hypothesis.
pub fn write_predictions(
    sets: &[(String, Vec<Pose>)],
    w: &mut impl Write,
) -> Result<()> {
    for (record_id, poses) in sets {
        for (i, pose) in poses.iter().enumerate() {
            let rec = PredictionRecord {
                record_id: record_id.clone(),
                hypothesis_index: i,
                joints: pose.joints.to_vec(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Read predictions back, grouped by record id in file order.
pub fn read_predictions(r: impl Read) -> Result<Vec<(String, Vec<Pose>)>> {
    let reader = BufReader::new(r);
    let mut out: Vec<(String, Vec<Pose>)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.joints.len() != NUM_JOINTS {
            return Err(Error::BadJointCount {
                record: rec.record_id,
                got: rec.joints.len(),
            });
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        joints.copy_from_slice(&rec.joints);
        let pose = Pose::new(joints).map_err(|_| Error::NonFinitePose {
            record: rec.record_id.clone(),
        })?;
        match out.last_mut() {
            Some((id, poses)) if *id == rec.record_id => poses.push(pose),
            _ => out.push((rec.record_id, vec![pose])),
        }
    }
    Ok(out)
}
