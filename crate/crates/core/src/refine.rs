//! Pose refinement: first-order minimization of the consistency objective
//! over the 75 joint coordinates.
//!
//! The objective pulls the end effectors toward their sampled locations,
//! bone lengths and joint angles toward the observed input skeleton's, and
//! every joint toward high-probability regions of its heatmap:
//!
//! `w_e·‖x_e − e‖₂ + w_b·‖bonelengths(x) − b‖₁ + w_a·‖angles(x) − θ‖₁
//!  + w_h·Σ_j (1 − H_j(x_j))`

use crate::heatmap::VolumetricHeatmap;
use crate::skeleton::{
    bone_lengths, cross, dot, joint_angles, norm, sub, BoneSet, JointAngle, Point3, Pose,
    LEFT_FINGER, NUM_BONES, NUM_JOINTS, RIGHT_FINGER,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// The four scalar weights of the refinement objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementWeights {
    pub w_e: f64,
    pub w_b: f64,
    pub w_a: f64,
    pub w_h: f64,
}

impl Default for RefinementWeights {
    fn default() -> Self {
        RefinementWeights { w_e: 1.0, w_b: 1.0, w_a: 3.0, w_h: 0.1 }
    }
}

/// One refinement instance: the raw sampled pose, its targets, and the
/// heatmaps (continuous form, one per joint, sharing a transform).
#[derive(Debug, Clone)]
pub struct RefinementProblem {
    pub x0: Pose,
    /// Sampled end-effector locations (right finger, left finger).
    pub end_effectors: [Point3; 2],
    /// Reference bone lengths from the observed input pose.
    pub bone_refs: [f64; NUM_BONES],
    /// Reference joint angles from the observed input pose.
    pub angle_refs: Vec<JointAngle>,
    /// Continuous heatmaps, one per joint in joint order.
    pub heatmaps: Vec<VolumetricHeatmap>,
    pub weights: RefinementWeights,
    pub bones: BoneSet,
}

impl RefinementProblem {
    /// Assemble a problem from a sampled hypothesis: end effectors are the
    /// sampled finger locations, bone/angle references come from the
    /// observed input pose.
    pub fn from_sample(
        input_pose: &Pose,
        sampled: &Pose,
        heatmaps: Vec<VolumetricHeatmap>,
        weights: RefinementWeights,
    ) -> Self {
        let bones = BoneSet::body25();
        RefinementProblem {
            x0: sampled.clone(),
            end_effectors: [sampled.joints[RIGHT_FINGER], sampled.joints[LEFT_FINGER]],
            bone_refs: bone_lengths(input_pose, &bones),
            angle_refs: joint_angles(input_pose, &bones),
            heatmaps,
            weights,
            bones,
        }
    }
}

/// Objective value at a pose.
pub fn objective(x: &Pose, prob: &RefinementProblem) -> f64 {
    objective_with_grad(x, prob, None)
}

/// Objective value, also accumulating the gradient when a buffer is given.
/// ℓ1 kinks and the ℓ2 norm at zero use subgradient 0; undefined angles
/// (degenerate bones on either side) are skipped.
fn objective_with_grad(
    x: &Pose,
    prob: &RefinementProblem,
    mut grad: Option<&mut [[f64; 3]; NUM_JOINTS]>,
) -> f64 {
    let w = &prob.weights;
    let mut total = 0.0;

    // End effectors: one Euclidean norm over the stacked 6-vector.
    let r4 = sub(x.joints[RIGHT_FINGER], prob.end_effectors[0]);
    let r7 = sub(x.joints[LEFT_FINGER], prob.end_effectors[1]);
    let e_norm = (dot(r4, r4) + dot(r7, r7)).sqrt();
    total += w.w_e * e_norm;
    if let Some(g) = grad.as_deref_mut() {
        if e_norm > 0.0 {
            for a in 0..3 {
                g[RIGHT_FINGER][a] += w.w_e * r4[a] / e_norm;
                g[LEFT_FINGER][a] += w.w_e * r7[a] / e_norm;
            }
        }
    }

    // Bone lengths, ℓ1.
    let lengths = bone_lengths(x, &prob.bones);
    for (i, &(p, c)) in prob.bones.edges.iter().enumerate() {
        let diff = lengths[i] - prob.bone_refs[i];
        total += w.w_b * diff.abs();
        if let Some(g) = grad.as_deref_mut() {
            if diff != 0.0 && lengths[i] > 0.0 {
                let s = w.w_b * diff.signum() / lengths[i];
                let d = sub(x.joints[c], x.joints[p]);
                for a in 0..3 {
                    g[c][a] += s * d[a];
                    g[p][a] -= s * d[a];
                }
            }
        }
    }

    // Joint angles, ℓ1, paired positionally with the references.
    let angles = joint_angles(x, &prob.bones);
    debug_assert_eq!(angles.len(), prob.angle_refs.len());
    for (entry, reference) in angles.iter().zip(&prob.angle_refs) {
        let (Some(theta), Some(theta_ref)) = (entry.angle, reference.angle) else {
            continue;
        };
        let diff = theta - theta_ref;
        total += w.w_a * diff.abs();
        if let Some(g) = grad.as_deref_mut() {
            if diff == 0.0 {
                continue;
            }
            let j = entry.joint;
            let parent = prob.bones.parent_of(j).expect("angle joints have parents");
            let child = entry.child;
            let u = sub(x.joints[parent], x.joints[j]);
            let v = sub(x.joints[child], x.joints[j]);
            let wv = cross(u, v);
            let s = norm(wv);
            if s == 0.0 {
                continue; // collinear: non-smooth point, subgradient 0
            }
            let c = dot(u, v);
            let r2 = s * s + c * c;
            let wh = [wv[0] / s, wv[1] / s, wv[2] / s];
            // θ = atan2(‖u×v‖, u·v):
            //   dθ/du = (c·(v×ŵ) − s·v)/r², dθ/dv = (c·(ŵ×u) − s·u)/r²
            let dv_du = cross(v, wh);
            let du_dv = cross(wh, u);
            let scale = w.w_a * diff.signum();
            for a in 0..3 {
                let dtheta_du = (c * dv_du[a] - s * v[a]) / r2;
                let dtheta_dv = (c * du_dv[a] - s * u[a]) / r2;
                g[parent][a] += scale * dtheta_du;
                g[child][a] += scale * dtheta_dv;
                g[j][a] -= scale * (dtheta_du + dtheta_dv);
            }
        }
    }

    // Heatmap agreement: trilinear interpolation, zero outside the grid.
    for (j, h) in prob.heatmaps.iter().enumerate() {
        let (value, g_world) = h
            .interp_with_grad(x.joints[j])
            .expect("refinement heatmaps are continuous");
        total += w.w_h * (1.0 - value);
        if let Some(g) = grad.as_deref_mut() {
            for a in 0..3 {
                g[j][a] -= w.w_h * g_world[a];
            }
        }
    }

    total
}

/// Gradient of the objective at a pose (zero at non-smooth points' kinks).
pub fn objective_grad(x: &Pose, prob: &RefinementProblem) -> (f64, [[f64; 3]; NUM_JOINTS]) {
    let mut grad = [[0.0; 3]; NUM_JOINTS];
    let value = objective_with_grad(x, prob, Some(&mut grad));
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { learning_rate: 0.01, iterations: 500 }
    }
}

/// Minimize the objective with Adam over the 75 coordinates, linearly
/// decaying the step size so late iterates settle; returns the best iterate
/// seen (never worse than the start).
pub fn refine(prob: &RefinementProblem, solver: &SolverConfig) -> Result<(Pose, f64, usize)> {
    let start = objective(&prob.x0, prob);
    if !start.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut x = prob.x0.clone();
    let mut best = (prob.x0.clone(), start);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = [[0.0; 3]; NUM_JOINTS];
    let mut v = [[0.0; 3]; NUM_JOINTS];
    let mut iterations = 0;
    for t in 1..=solver.iterations {
        iterations = t;
        let (value, grad) = objective_grad(&x, prob);
        if value < best.1 {
            best = (x.clone(), value);
        }
        let lr = solver.learning_rate * (1.0 - (t - 1) as f64 / solver.iterations as f64);
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        for j in 0..NUM_JOINTS {
            for a in 0..3 {
                m[j][a] = beta1 * m[j][a] + (1.0 - beta1) * grad[j][a];
                v[j][a] = beta2 * v[j][a] + (1.0 - beta2) * grad[j][a] * grad[j][a];
                x.joints[j][a] -= lr * (m[j][a] / c1) / ((v[j][a] / c2).sqrt() + eps);
            }
        }
    }
    let final_value = objective(&x, prob);
    if final_value < best.1 {
        best = (x, final_value);
    }
    Ok((best.0, best.1, iterations))
}
