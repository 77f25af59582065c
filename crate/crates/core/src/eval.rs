//! Evaluation: MPJPE, min-of-k, threshold percentages, negative
//! log-likelihood, per-bodypart and per-joint breakdowns, and the
//! statistical baselines.

use crate::heatmap::{expected_value_grid, HeatmapForm, VolumetricHeatmap};
use crate::sampler::SampleSet;
use crate::skeleton::{bodypart_of, dist, BodyPart, Pose, JOINT_NAMES, NUM_JOINTS};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Mean per-joint position error in meters: the average Euclidean distance
/// over the 25 joints (non-squared; distances compare directly against the
/// meter-valued thresholds).
pub fn mpjpe(pred: &Pose, target: &Pose) -> f64 {
    let sum: f64 = pred
        .joints
        .iter()
        .zip(target.joints.iter())
        .map(|(&p, &t)| dist(p, t))
        .sum();
    sum / NUM_JOINTS as f64
}

/// Squared variant (mean of squared distances), for fidelity experiments.
pub fn mpjpe_squared(pred: &Pose, target: &Pose) -> f64 {
    let sum: f64 = pred
        .joints
        .iter()
        .zip(target.joints.iter())
        .map(|(&p, &t)| {
            let d = dist(p, t);
            d * d
        })
        .sum();
    sum / NUM_JOINTS as f64
}

/// Best hypothesis of a sample set against the single observed target:
/// (minimum MPJPE, index), ties broken by the lowest index.
pub fn min_of_k(samples: &SampleSet, target: &Pose) -> (f64, usize) {
    min_of_k_poses(&samples.poses, target)
}

pub fn min_of_k_poses(poses: &[Pose], target: &Pose) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in poses.iter().enumerate() {
        let e = mpjpe(p, target);
        if e < best.0 {
            best = (e, i);
        }
    }
    best
}

/// Percentage of errors strictly below a threshold.
pub fn pct_below(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyList("pct_below"));
    }
    let n = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * n as f64 / errors.len() as f64)
}

/// Negative log-likelihood of the target joints under the predicted
/// distributions: per joint, the expected-value grid normalized over the
/// 4096 voxels, evaluated at the target joint's voxel; mean over joints,
/// in nats.
pub fn nll(heatmaps: &[VolumetricHeatmap], target: &Pose) -> Result<f64> {
    if heatmaps.len() != NUM_JOINTS {
        return Err(Error::ShapeMismatch {
            op: "nll",
            detail: format!("{} heatmaps for {NUM_JOINTS} joints", heatmaps.len()),
        });
    }
    let mut total = 0.0;
    for (j, h) in heatmaps.iter().enumerate() {
        let probs = match h.form() {
            HeatmapForm::Logits => expected_value_grid(h)?,
            HeatmapForm::Continuous => h.clone(),
        };
        // Continuous predictions (regression ablations) are clamped away
        // from zero before normalizing.
        let values: Vec<f64> = probs.values().iter().map(|&v| v.clamp(1e-9, 1.0)).collect();
        let sum: f64 = values.iter().sum();
        let voxel = probs
            .transform
            .world_to_voxel(target.joints[j])
            .ok_or(Error::TargetOutOfGrid {
                record: String::new(),
                joint: j,
            })?;
        let p = values[crate::heatmap::flat(voxel)] / sum;
        total += -p.ln();
    }
    Ok(total / NUM_JOINTS as f64)
}

/// The unchanged input pose.
pub fn zero_velocity_baseline(input_pose: &Pose) -> Pose {
    input_pose.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Global,
    PerAction,
}

/// Coordinate-wise mean target poses, over the whole training split and
/// per action.
#[derive(Debug, Clone)]
pub struct AveragePoseBaseline {
    global: Pose,
    per_action: BTreeMap<String, Pose>,
}

fn mean_pose<'a>(poses: impl Iterator<Item = &'a Pose>) -> Option<Pose> {
    let mut acc = [[0.0; 3]; NUM_JOINTS];
    let mut n = 0usize;
    for p in poses {
        for (a, j) in acc.iter_mut().zip(p.joints.iter()) {
            for c in 0..3 {
                a[c] += j[c];
            }
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    for a in &mut acc {
        for c in a.iter_mut() {
            *c /= n as f64;
        }
    }
    Some(Pose { joints: acc })
}

impl AveragePoseBaseline {
    pub fn fit(train_targets: &[(String, Pose)]) -> Result<Self> {
        let global =
            mean_pose(train_targets.iter().map(|(_, p)| p)).ok_or(Error::EmptyDataset)?;
        let mut groups: BTreeMap<String, Vec<&Pose>> = BTreeMap::new();
        for (action, pose) in train_targets {
            groups.entry(action.clone()).or_default().push(pose);
        }
        let per_action = groups
            .into_iter()
            .map(|(a, poses)| (a.clone(), mean_pose(poses.into_iter()).unwrap()))
            .collect();
        Ok(AveragePoseBaseline { global, per_action })
    }

    /// Predicted pose for a query action. In per-action mode an unknown
    /// action falls back to the global mean; the flag reports the fallback
    /// so callers can warn.
    pub fn predict(&self, action: &str, mode: BaselineMode) -> (Pose, bool) {
        match mode {
            BaselineMode::Global => (self.global.clone(), false),
            BaselineMode::PerAction => match self.per_action.get(action) {
                Some(p) => (p.clone(), false),
                None => (self.global.clone(), true),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Aggregated reports
// ---------------------------------------------------------------------------

/// One record to score: k hypotheses against one observed target, with
/// optional per-joint heatmaps for the likelihood metric.
pub struct EvalCase {
    pub id: String,
    pub hypotheses: Vec<Pose>,
    pub target: Pose,
    pub heatmaps: Option<Vec<VolumetricHeatmap>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over records of the best-hypothesis MPJPE, meters.
    pub mpjpe_mean: f64,
    pub pct_below_015: f64,
    pub pct_below_025: f64,
    /// Mean NLL in nats; absent when no heatmaps were supplied.
    pub nll_mean: Option<f64>,
    /// Best-hypothesis error broken down by body part, meters.
    pub per_bodypart: BTreeMap<String, f64>,
    /// Best-hypothesis error per joint, meters.
    pub per_joint: Vec<f64>,
    /// Hypotheses scored per record.
    pub k: usize,
    pub records: usize,
}

/// Score a set of records: per record the best-MPJPE hypothesis is
/// selected, and its per-joint errors feed the breakdowns (so per-joint
/// values average back to the overall mean).
pub fn evaluate(cases: &[EvalCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyList("evaluate"));
    }
    let k = cases.iter().map(|c| c.hypotheses.len()).max().unwrap_or(0);
    let mut best_errors = Vec::with_capacity(cases.len());
    let mut per_joint_sum = vec![0.0; NUM_JOINTS];
    let mut nll_sum = 0.0;
    let mut nll_count = 0usize;
    for case in cases {
        if case.hypotheses.is_empty() {
            return Err(Error::EmptyList("hypotheses"));
        }
        let (best, idx) = min_of_k_poses(&case.hypotheses, &case.target);
        best_errors.push(best);
        let chosen = &case.hypotheses[idx];
        for (j, sum) in per_joint_sum.iter_mut().enumerate() {
            *sum += dist(chosen.joints[j], case.target.joints[j]);
        }
        if let Some(maps) = &case.heatmaps {
            nll_sum += nll(maps, &case.target)?;
            nll_count += 1;
        }
    }
    let n = cases.len() as f64;
    let per_joint: Vec<f64> = per_joint_sum.iter().map(|s| s / n).collect();
    let mut per_bodypart = BTreeMap::new();
    for part in BodyPart::ALL {
        let members = part.members();
        let mean = members.iter().map(|&j| per_joint[j]).sum::<f64>() / members.len() as f64;
        per_bodypart.insert(part.name().to_string(), mean);
    }
    Ok(EvalReport {
        mpjpe_mean: best_errors.iter().sum::<f64>() / n,
        pct_below_015: pct_below(&best_errors, 0.15)?,
        pct_below_025: pct_below(&best_errors, 0.25)?,
        nll_mean: (nll_count > 0).then(|| nll_sum / nll_count as f64),
        per_bodypart,
        per_joint,
        k,
        records: cases.len(),
    })
}

/// Per-joint errors as a CSV table, one row per joint in layout order.
pub fn write_per_joint_csv(report: &EvalReport, w: &mut impl Write) -> Result<()> {
    writeln!(w, "joint_index,joint_name,body_part,mpjpe_m")?;
    for (j, err) in report.per_joint.iter().enumerate() {
        let part = bodypart_of(j)?;
        writeln!(w, "{j},{},{},{err}", JOINT_NAMES[j], part.name())?;
    }
    Ok(())
}
