//! BODY_25 joint layout, SMPL-X correspondences, bone tree, and the
//! geometric quantities (bone lengths, joint angles) consumed by pose
//! refinement and evaluation.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of joints in the BODY_25 layout.
pub const NUM_JOINTS: usize = 25;

/// Number of bones in the kinematic tree.
pub const NUM_BONES: usize = 24;

/// End-effector joints driving the autoregressive stages: right and left
/// finger. (The terminal hand joints; "finger" follows the layout's naming.)
pub const RIGHT_FINGER: usize = 4;
pub const LEFT_FINGER: usize = 7;
pub const MID_HIP: usize = 8;

/// Joint names, indexed by BODY_25 joint id.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "Nose",           // 0
    "Neck",           // 1
    "Right Shoulder", // 2
    "Right Elbow",    // 3
    "Right Finger",   // 4
    "Left Shoulder",  // 5
    "Left Elbow",     // 6
    "Left Finger",    // 7
    "Mid-Hip",        // 8
    "Right Hip",      // 9
    "Right Knee",     // 10
    "Right Ankle",    // 11
    "Left Hip",       // 12
    "Left Knee",      // 13
    "Left Ankle",     // 14
    "Right Eye",      // 15
    "Left Eye",       // 16
    "Right Ear",      // 17
    "Left Ear",       // 18
    "Left Big Toe",   // 19
    "Left Small Toe", // 20
    "Left Heel",      // 21
    "Right Big Toe",  // 22
    "Right Small Toe",// 23
    "Right Heel",     // 24
];

/// SMPL-X source index for each BODY_25 joint.
/// `output joint i = source joint SMPLX_SOURCE[i]`.
pub const SMPLX_SOURCE: [usize; NUM_JOINTS] = [
    55, // Nose
    12, // Neck
    17, // Right Shoulder
    19, // Right Elbow
    42, // Right Finger  (Right Index 3)
    16, // Left Shoulder
    18, // Left Elbow
    27, // Left Finger   (Left Index 3)
    0,  // Mid-Hip       (Pelvis)
    2,  // Right Hip
    5,  // Right Knee
    8,  // Right Ankle
    1,  // Left Hip
    4,  // Left Knee
    7,  // Left Ankle
    24, // Right Eye
    23, // Left Eye
    58, // Right Ear
    59, // Left Ear
    60, // Left Big Toe
    61, // Left Small Toe
    62, // Left Heel
    63, // Right Big Toe
    64, // Right Small Toe
    65, // Right Heel
];

/// A 3D point in meters.
pub type Point3 = [f64; 3];

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

/// A 25-joint 3D pose, coordinates in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: [Point3; NUM_JOINTS],
}

impl Pose {
    /// A pose with every joint at the origin.
    pub fn zero() -> Self {
        Pose {
            joints: [[0.0; 3]; NUM_JOINTS],
        }
    }

    pub fn new(joints: [Point3; NUM_JOINTS]) -> Result<Self> {
        let pose = Pose { joints };
        pose.validate()?;
        Ok(pose)
    }

    /// All coordinates finite.
    pub fn validate(&self) -> Result<()> {
        for j in &self.joints {
            if !j.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinitePose {
                    record: String::new(),
                });
            }
        }
        Ok(())
    }

    pub fn translated(&self, t: Point3) -> Pose {
        let mut out = self.clone();
        for j in &mut out.joints {
            *j = add(*j, t);
        }
        out
    }

    /// Apply a 3×3 rotation matrix (rows) to every joint.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Pose {
        let mut out = self.clone();
        for j in &mut out.joints {
            let p = *j;
            *j = [dot(r[0], p), dot(r[1], p), dot(r[2], p)];
        }
        out
    }

    pub fn mid_hip(&self) -> Point3 {
        self.joints[MID_HIP]
    }
}

/// Extract the 25 BODY_25 joints from an SMPL-X joint array.
///
/// The source must carry at least 66 joints (the largest referenced index
/// is 65). Unreferenced source entries are ignored.
pub fn smplx_to_openpose(source_joints: &[Point3]) -> Result<Pose> {
    let needed = SMPLX_SOURCE.iter().copied().max().unwrap();
    if source_joints.len() <= needed {
        return Err(Error::MappingSourceTooShort {
            needed,
            got: source_joints.len(),
        });
    }
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    for (i, &src) in SMPLX_SOURCE.iter().enumerate() {
        joints[i] = source_joints[src];
    }
    Pose::new(joints)
}

/// The kinematic tree: 24 (parent, child) edges rooted at Mid-Hip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoneSet {
    pub edges: [(usize, usize); NUM_BONES],
}

impl BoneSet {
    /// The standard BODY_25 tree rooted at Mid-Hip (8).
    pub fn body25() -> Self {
        BoneSet {
            edges: [
                (8, 1),   // spine
                (1, 0),   // neck -> nose
                (0, 15),  // nose -> right eye
                (0, 16),  // nose -> left eye
                (15, 17), // right eye -> right ear
                (16, 18), // left eye -> left ear
                (1, 2),   // neck -> right shoulder
                (2, 3),
                (3, 4),
                (1, 5), // neck -> left shoulder
                (5, 6),
                (6, 7),
                (8, 9), // right leg
                (9, 10),
                (10, 11),
                (11, 22),
                (22, 23),
                (11, 24),
                (8, 12), // left leg
                (12, 13),
                (13, 14),
                (14, 19),
                (19, 20),
                (14, 21),
            ],
        }
    }

    /// Parent joint of each non-root joint, `None` for the root.
    pub fn parent_of(&self, joint: usize) -> Option<usize> {
        self.edges
            .iter()
            .find(|&&(_, c)| c == joint)
            .map(|&(p, _)| p)
    }

    /// Children of a joint, in edge order.
    pub fn children_of(&self, joint: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(p, _)| p == joint)
            .map(|&(_, c)| c)
            .collect()
    }
}

/// Per-edge Euclidean lengths, in the bone set's edge order.
pub fn bone_lengths(pose: &Pose, bones: &BoneSet) -> [f64; NUM_BONES] {
    let mut out = [0.0; NUM_BONES];
    for (i, &(p, c)) in bones.edges.iter().enumerate() {
        out[i] = dist(pose.joints[p], pose.joints[c]);
    }
    out
}

/// One angle entry per (parent-edge, child-edge) pair at a joint that has both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointAngle {
    /// The joint at which the angle is measured.
    pub joint: usize,
    /// The child joint of the outgoing bone.
    pub child: usize,
    /// Angle in [0, π] between the bone to the parent and the bone to the
    /// child, or `None` when either incident bone is degenerate.
    pub angle: Option<f64>,
}

/// Angles at every internal joint, one per (parent-edge, child-edge) pair,
/// ordered by joint index then child order. Pairs with a zero-length incident
/// bone are flagged undefined and excluded from downstream penalties.
pub fn joint_angles(pose: &Pose, bones: &BoneSet) -> Vec<JointAngle> {
    let mut out = Vec::new();
    for joint in 0..NUM_JOINTS {
        let Some(parent) = bones.parent_of(joint) else {
            continue;
        };
        for child in bones.children_of(joint) {
            let u = sub(pose.joints[parent], pose.joints[joint]);
            let v = sub(pose.joints[child], pose.joints[joint]);
            let (nu, nv) = (norm(u), norm(v));
            let angle = if nu == 0.0 || nv == 0.0 {
                None
            } else {
                // atan2 of (‖u×v‖, u·v) stays stable near 0 and π, where the
                // arccosine derivative blows up.
                Some(norm(cross(u, v)).atan2(dot(u, v)))
            };
            out.push(JointAngle { joint, child, angle });
        }
    }
    out
}

/// Body-part grouping used by the per-bodypart evaluation breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyPart {
    RightArm,
    LeftArm,
    RightLeg,
    LeftLeg,
    Hip,
    Head,
}

impl BodyPart {
    pub const ALL: [BodyPart; 6] = [
        BodyPart::RightArm,
        BodyPart::LeftArm,
        BodyPart::RightLeg,
        BodyPart::LeftLeg,
        BodyPart::Hip,
        BodyPart::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::RightArm => "Right Arm",
            BodyPart::LeftArm => "Left Arm",
            BodyPart::RightLeg => "Right Leg",
            BodyPart::LeftLeg => "Left Leg",
            BodyPart::Hip => "Hip",
            BodyPart::Head => "Head",
        }
    }

    /// Joint indices belonging to this part.
    pub fn members(self) -> &'static [usize] {
        match self {
            BodyPart::RightArm => &[2, 3, 4],
            BodyPart::LeftArm => &[5, 6, 7],
            BodyPart::RightLeg => &[9, 10, 11, 22, 23, 24],
            BodyPart::LeftLeg => &[12, 13, 14, 19, 20, 21],
            BodyPart::Hip => &[8],
            BodyPart::Head => &[0, 1, 15, 16, 17, 18],
        }
    }
}

/// Body part owning a joint index.
pub fn bodypart_of(joint_index: usize) -> Result<BodyPart> {
    if joint_index >= NUM_JOINTS {
        return Err(Error::JointIndexOutOfRange(joint_index));
    }
    for part in BodyPart::ALL {
        if part.members().contains(&joint_index) {
            return Ok(part);
        }
    }
    unreachable!("every joint 0..25 is grouped");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rotation_from(rng: &mut SplitMix64) -> [[f64; 3]; 3] {
        // Random rotation from a normalized quaternion.
        let (q0, q1, q2, q3) = (rng.normal(), rng.normal(), rng.normal(), rng.normal());
        let n = (q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3).sqrt();
        let (w, x, y, z) = (q0 / n, q1 / n, q2 / n, q3 / n);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    fn random_pose(rng: &mut SplitMix64) -> Pose {
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for j in &mut joints {
            *j = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        }
        Pose { joints }
    }

    #[test]
    fn mapping_nose_from_smplx_55() {
        let mut src = vec![[0.0; 3]; 66];
        src[55] = [1.0, 2.0, 3.0];
        let pose = smplx_to_openpose(&src).unwrap();
        assert_eq!(pose.joints[0], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn mapping_midhip_from_pelvis_0() {
        let mut src = vec![[0.0; 3]; 70];
        src[0] = [0.5, 0.0, 0.0];
        let pose = smplx_to_openpose(&src).unwrap();
        assert_eq!(pose.joints[MID_HIP], [0.5, 0.0, 0.0]);
    }

    #[test]
    fn mapping_zero_source_gives_zero_pose() {
        let src = vec![[0.0; 3]; 66];
        let pose = smplx_to_openpose(&src).unwrap();
        assert_eq!(pose, Pose::zero());
    }

    #[test]
    fn mapping_rejects_short_source() {
        let src = vec![[0.0; 3]; 65];
        let err = smplx_to_openpose(&src).unwrap_err();
        assert!(matches!(err, Error::MappingSourceTooShort { needed: 65, got: 65 }));
    }

    #[test]
    fn mapping_ignores_unreferenced_indices() {
        let mut rng = SplitMix64::new(11);
        let mut src = vec![[0.0; 3]; 80];
        for p in src.iter_mut() {
            *p = [rng.normal(), rng.normal(), rng.normal()];
        }
        let base = smplx_to_openpose(&src).unwrap();
        // Scramble entries that the mapping never reads.
        let referenced: Vec<usize> = SMPLX_SOURCE.to_vec();
        for i in 0..src.len() {
            if !referenced.contains(&i) {
                src[i] = [99.0, 99.0, 99.0];
            }
        }
        assert_eq!(base, smplx_to_openpose(&src).unwrap());
    }

    #[test]
    fn bone_tree_is_a_spanning_tree() {
        let bones = BoneSet::body25();
        let mut parent_count = [0usize; NUM_JOINTS];
        for &(p, c) in &bones.edges {
            assert!(p < NUM_JOINTS && c < NUM_JOINTS);
            parent_count[c] += 1;
        }
        assert_eq!(parent_count[MID_HIP], 0, "root has no parent");
        for (j, &n) in parent_count.iter().enumerate() {
            if j != MID_HIP {
                assert_eq!(n, 1, "joint {j} must have exactly one parent");
            }
        }
        // Acyclic + connected: walking up from every joint reaches the root.
        for j in 0..NUM_JOINTS {
            let mut cur = j;
            let mut steps = 0;
            while let Some(p) = bones.parent_of(cur) {
                cur = p;
                steps += 1;
                assert!(steps <= NUM_JOINTS, "cycle detected at joint {j}");
            }
            assert_eq!(cur, MID_HIP);
        }
    }

    #[test]
    fn coincident_joints_give_zero_lengths() {
        let pose = Pose::zero();
        let lengths = bone_lengths(&pose, &BoneSet::body25());
        assert!(lengths.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn single_edge_length() {
        let mut pose = Pose::zero();
        pose.joints[3] = [0.0, 0.0, 0.0];
        pose.joints[4] = [0.3, 0.0, 0.0];
        let bones = BoneSet::body25();
        let lengths = bone_lengths(&pose, &bones);
        let idx = bones.edges.iter().position(|&e| e == (3, 4)).unwrap();
        assert!((lengths[idx] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lengths_translation_invariant() {
        let mut rng = SplitMix64::new(5);
        let bones = BoneSet::body25();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let t = [rng.normal(), rng.normal(), rng.normal()];
            let a = bone_lengths(&pose, &bones);
            let b = bone_lengths(&pose.translated(t), &bones);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn collinear_chain_angle_is_pi() {
        let mut pose = Pose::zero();
        // Chain 2 -> 3 -> 4 along x.
        pose.joints[2] = [0.0, 0.0, 0.0];
        pose.joints[3] = [1.0, 0.0, 0.0];
        pose.joints[4] = [2.0, 0.0, 0.0];
        let angles = joint_angles(&pose, &BoneSet::body25());
        let a = angles
            .iter()
            .find(|a| a.joint == 3 && a.child == 4)
            .unwrap();
        assert!((a.angle.unwrap() - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn right_angle_elbow() {
        let mut pose = Pose::zero();
        pose.joints[2] = [0.0, 1.0, 0.0];
        pose.joints[3] = [0.0, 0.0, 0.0];
        pose.joints[4] = [0.5, 0.0, 0.0];
        let angles = joint_angles(&pose, &BoneSet::body25());
        let a = angles
            .iter()
            .find(|a| a.joint == 3 && a.child == 4)
            .unwrap();
        assert!((a.angle.unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bone_flags_undefined() {
        let pose = Pose::zero();
        let angles = joint_angles(&pose, &BoneSet::body25());
        assert!(!angles.is_empty());
        assert!(angles.iter().all(|a| a.angle.is_none()));
    }

    #[test]
    fn angles_invariant_under_rigid_transform() {
        let mut rng = SplitMix64::new(23);
        let bones = BoneSet::body25();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let r = rotation_from(&mut rng);
            let t = [rng.normal(), rng.normal(), rng.normal()];
            let moved = pose.rotated(&r).translated(t);
            let a = joint_angles(&pose, &bones);
            let b = joint_angles(&moved, &bones);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                match (x.angle, y.angle) {
                    (Some(ax), Some(ay)) => assert!((ax - ay).abs() < 1e-9, "{ax} vs {ay}"),
                    (None, None) => {}
                    _ => panic!("defined-ness changed under rigid transform"),
                }
            }
        }
    }

    #[test]
    fn internal_joint_angle_count() {
        // One angle per (parent-edge, child-edge) pair over the whole tree.
        let mut rng = SplitMix64::new(1);
        let pose = random_pose(&mut rng);
        let angles = joint_angles(&pose, &BoneSet::body25());
        assert_eq!(angles.len(), 21);
    }

    #[test]
    fn bodypart_lookup_matches_grouping() {
        assert_eq!(bodypart_of(4).unwrap(), BodyPart::RightArm);
        assert_eq!(bodypart_of(8).unwrap(), BodyPart::Hip);
        assert_eq!(bodypart_of(21).unwrap(), BodyPart::LeftLeg);
        assert!(bodypart_of(25).is_err());
        // Groups partition all 25 joints.
        let total: usize = BodyPart::ALL.iter().map(|p| p.members().len()).sum();
        assert_eq!(total, NUM_JOINTS);
    }
}
