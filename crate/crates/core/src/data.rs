//! Dataset records, actor-based splits, and a synthetic multi-modal
//! generator for desk-scale training and testing.
//!
//! Files are JSON Lines, UTF-8, one record per line with keys
//! `{id, actor, action, input, target}`; poses are 25 arrays of 3 numbers
//! in meters.

use crate::skeleton::{add, Point3, Pose, NUM_JOINTS};
use crate::rng::SplitMix64;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

/// One (input pose, target characteristic pose) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub actor: String,
    pub action: String,
    pub input_pose: Pose,
    pub target_pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    id: String,
    actor: String,
    action: String,
    input: Vec<Point3>,
    target: Vec<Point3>,
}

fn pose_from_vec(record: &str, joints: Vec<Point3>) -> Result<Pose> {
    if joints.len() != NUM_JOINTS {
        return Err(Error::BadJointCount {
            record: record.to_string(),
            got: joints.len(),
        });
    }
    let mut arr = [[0.0; 3]; NUM_JOINTS];
    arr.copy_from_slice(&joints);
    Pose::new(arr).map_err(|_| Error::NonFinitePose {
        record: record.to_string(),
    })
}

/// Parse a JSONL dataset. Errors carry 1-based line numbers; duplicate ids
/// and malformed poses are rejected.
pub fn load_dataset(r: impl Read) -> Result<Vec<DatasetRecord>> {
    let reader = BufReader::new(r);
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordJson = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        let input_pose = pose_from_vec(&raw.id, raw.input)?;
        let target_pose = pose_from_vec(&raw.id, raw.target)?;
        records.push(DatasetRecord {
            id: raw.id,
            actor: raw.actor,
            action: raw.action,
            input_pose,
            target_pose,
        });
    }
    Ok(records)
}

pub fn load_dataset_file(path: &std::path::Path) -> Result<Vec<DatasetRecord>> {
    load_dataset(std::fs::File::open(path)?)
}

pub fn save_dataset(records: &[DatasetRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        let raw = RecordJson {
            id: r.id.clone(),
            actor: r.actor.clone(),
            action: r.action.clone(),
            input: r.input_pose.joints.to_vec(),
            target: r.target_pose.joints.to_vec(),
        };
        let line = serde_json::to_string(&raw).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Disjoint actor sets defining the train/val/test partition.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitConfig {
    pub train_actors: BTreeSet<String>,
    pub val_actors: BTreeSet<String>,
    pub test_actors: BTreeSet<String>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for a in &self.train_actors {
            if self.val_actors.contains(a) || self.test_actors.contains(a) {
                return Err(Error::InvalidConfig(format!("actor {a:?} in multiple splits")));
            }
        }
        for a in &self.val_actors {
            if self.test_actors.contains(a) {
                return Err(Error::InvalidConfig(format!("actor {a:?} in multiple splits")));
            }
        }
        Ok(())
    }
}

/// Partition records by actor, preserving input order within each split.
pub fn split_by_actor(
    records: &[DatasetRecord],
    config: &SplitConfig,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    config.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if config.train_actors.contains(&r.actor) {
            train.push(r.clone());
        } else if config.val_actors.contains(&r.actor) {
            val.push(r.clone());
        } else if config.test_actors.contains(&r.actor) {
            test.push(r.clone());
        } else {
            return Err(Error::UnassignedActor(r.actor.clone()));
        }
    }
    Ok((train, val, test))
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// A canonical standing skeleton with plausible bone lengths, mid-hip near
/// (0, 0.95, 0), y up. Every joint stays well inside the 2 m grid cube
/// centered on the mid-hip.
pub fn canonical_pose() -> Pose {
    let mut j = [[0.0; 3]; NUM_JOINTS];
    j[0] = [0.0, 1.58, 0.06]; // nose
    j[1] = [0.0, 1.42, 0.0]; // neck
    j[2] = [0.19, 1.38, 0.0]; // right shoulder
    j[3] = [0.24, 1.10, 0.0]; // right elbow
    j[4] = [0.26, 0.84, 0.02]; // right finger
    j[5] = [-0.19, 1.38, 0.0]; // left shoulder
    j[6] = [-0.24, 1.10, 0.0]; // left elbow
    j[7] = [-0.26, 0.84, 0.02]; // left finger
    j[8] = [0.0, 0.95, 0.0]; // mid-hip
    j[9] = [0.09, 0.91, 0.0]; // right hip
    j[10] = [0.10, 0.50, 0.0]; // right knee
    j[11] = [0.10, 0.09, -0.02]; // right ankle
    j[12] = [-0.09, 0.91, 0.0]; // left hip
    j[13] = [-0.10, 0.50, 0.0]; // left knee
    j[14] = [-0.10, 0.09, -0.02]; // left ankle
    j[15] = [0.035, 1.62, 0.08]; // right eye
    j[16] = [-0.035, 1.62, 0.08]; // left eye
    j[17] = [0.07, 1.60, 0.02]; // right ear
    j[18] = [-0.07, 1.60, 0.02]; // left ear
    j[19] = [-0.09, 0.02, 0.12]; // left big toe
    j[20] = [-0.14, 0.02, 0.10]; // left small toe
    j[21] = [-0.10, 0.04, -0.06]; // left heel
    j[22] = [0.09, 0.02, 0.12]; // right big toe
    j[23] = [0.14, 0.02, 0.10]; // right small toe
    j[24] = [0.10, 0.04, -0.06]; // right heel
    Pose { joints: j }
}

/// Deterministic target-pose shapes. Arm modes re-pose both arms by
/// rotating them about the shoulders: elbow and finger positions follow
/// unit directions scaled by the canonical segment lengths, so bone lengths
/// are preserved and the refinement references stay meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseMode {
    /// Target equals the input pose.
    Identity,
    /// Both arms raised overhead.
    ArmsUp,
    /// Both arms stretched out to the sides.
    ArmsSide,
    /// Both arms reaching forward.
    ArmsForward,
}

fn normalize(v: Point3) -> Point3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl PoseMode {
    /// Unit directions (shoulder→elbow, elbow→finger) for the right arm;
    /// the left arm mirrors in x.
    fn arm_directions(self) -> Option<(Point3, Point3)> {
        match self {
            PoseMode::Identity => None,
            PoseMode::ArmsUp => Some((
                normalize([0.20, 0.95, 0.15]),
                normalize([0.10, 0.90, 0.30]),
            )),
            PoseMode::ArmsSide => Some((
                normalize([0.98, 0.05, 0.0]),
                normalize([0.99, 0.10, 0.0]),
            )),
            PoseMode::ArmsForward => Some((
                normalize([0.25, 0.10, 0.95]),
                normalize([0.05, 0.35, 0.93]),
            )),
        }
    }

    /// The deterministic part of the target pose for a given input.
    pub fn apply(self, input: &Pose) -> Pose {
        let Some((dir_elbow, dir_finger)) = self.arm_directions() else {
            return input.clone();
        };
        let canon = canonical_pose();
        let upper = crate::skeleton::dist(canon.joints[2], canon.joints[3]);
        let fore = crate::skeleton::dist(canon.joints[3], canon.joints[4]);
        let mut out = input.clone();
        for (shoulder, elbow, finger, mirror) in [(2, 3, 4, 1.0), (5, 6, 7, -1.0)] {
            let de = [mirror * dir_elbow[0], dir_elbow[1], dir_elbow[2]];
            let df = [mirror * dir_finger[0], dir_finger[1], dir_finger[2]];
            let s = input.joints[shoulder];
            let e = add(s, [de[0] * upper, de[1] * upper, de[2] * upper]);
            out.joints[elbow] = e;
            out.joints[finger] = add(e, [df[0] * fore, df[1] * fore, df[2] * fore]);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ActionSpec {
    pub name: String,
    /// One or two target modes.
    pub modes: Vec<PoseMode>,
}

/// Shape of a synthetic dataset: actors, actions, and per-record jitter
/// amplitude (uniform, meters).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayoutSpec {
    pub actors: Vec<String>,
    pub actions: Vec<ActionSpec>,
    pub jitter: f64,
}

impl LayoutSpec {
    /// One action with two well-separated modes (right-finger targets
    /// ~0.66 m apart): the fixture behind the multi-modality experiments.
    pub fn two_mode(n_actors: usize) -> Self {
        LayoutSpec {
            actors: (1..=n_actors.max(1)).map(|i| format!("s{i}")).collect(),
            actions: vec![ActionSpec {
                name: "reach".into(),
                modes: vec![PoseMode::ArmsUp, PoseMode::ArmsSide],
            }],
            jitter: 0.01,
        }
    }

    /// A small mixed layout: a two-mode action plus single-mode actions.
    pub fn standard(n_actors: usize) -> Self {
        LayoutSpec {
            actors: (1..=n_actors.max(1)).map(|i| format!("s{i}")).collect(),
            actions: vec![
                ActionSpec {
                    name: "reach".into(),
                    modes: vec![PoseMode::ArmsUp, PoseMode::ArmsSide],
                },
                ActionSpec {
                    name: "hold".into(),
                    modes: vec![PoseMode::ArmsForward],
                },
                ActionSpec {
                    name: "still".into(),
                    modes: vec![PoseMode::Identity],
                },
            ],
            jitter: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.actors.is_empty() {
            return Err(Error::InvalidConfig("layout needs at least one actor".into()));
        }
        if self.actions.is_empty() {
            return Err(Error::InvalidConfig("layout needs at least one action".into()));
        }
        for a in &self.actions {
            if a.modes.is_empty() || a.modes.len() > 2 {
                return Err(Error::InvalidConfig(format!(
                    "action {:?} needs 1 or 2 modes, has {}",
                    a.name,
                    a.modes.len()
                )));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidConfig("jitter must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn jittered(pose: &Pose, amp: f64, rng: &mut SplitMix64) -> Pose {
    let mut out = pose.clone();
    for j in &mut out.joints {
        for c in j.iter_mut() {
            *c += rng.uniform(-amp, amp);
        }
    }
    out
}

/// Generate a reproducible synthetic dataset: `n_per_mode` records per mode
/// of every action, with mode assignment alternating so both modes of a
/// two-mode action appear equally often.
pub fn synth_generate(seed: u64, n_per_mode: usize, layout: &LayoutSpec) -> Result<Vec<DatasetRecord>> {
    layout.validate()?;
    let base = canonical_pose();
    let mut rng = SplitMix64::new(seed);
    let mut records = Vec::new();
    let mut global = 0usize;
    for action in &layout.actions {
        let count = n_per_mode * action.modes.len();
        for r in 0..count {
            let mode = action.modes[r % action.modes.len()];
            let actor = layout.actors[global % layout.actors.len()].clone();
            let input = jittered(&base, layout.jitter, &mut rng);
            let target = jittered(&mode.apply(&input), layout.jitter, &mut rng);
            records.push(DatasetRecord {
                id: format!("{}-{r:04}", action.name),
                actor,
                action: action.name.clone(),
                input_pose: input,
                target_pose: target,
            });
            global += 1;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::GridTransform;
    use crate::skeleton::MID_HIP;
    use crate::skeleton::{bone_lengths, dist, BoneSet, RIGHT_FINGER};

    fn to_bytes(records: &[DatasetRecord]) -> Vec<u8> {
        let mut buf = Vec::new();
        save_dataset(records, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_file_loads_empty() {
        assert!(load_dataset(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_preserves_records() {
        let records = synth_generate(3, 2, &LayoutSpec::standard(2)).unwrap();
        let buf = to_bytes(&records);
        let back = load_dataset(buf.as_slice()).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn parse_error_reports_line() {
        let buf = b"{\"id\":\"a\",\"actor\":\"s\",\"action\":\"x\",\"input\":[],\"target\":[]}\nnot json\n";
        match load_dataset(&buf[..]) {
            Err(Error::BadJointCount { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let good = to_bytes(&synth_generate(1, 1, &LayoutSpec::two_mode(1)).unwrap());
        let mut bad = good.clone();
        bad.extend_from_slice(b"not json\n");
        match load_dataset(bad.as_slice()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let records = synth_generate(1, 1, &LayoutSpec::two_mode(1)).unwrap();
        let mut twice = records.clone();
        twice.extend(records);
        match load_dataset(to_bytes(&twice).as_slice()) {
            Err(Error::DuplicateId { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_joint_count_names_record() {
        let line = format!(
            "{{\"id\":\"r26\",\"actor\":\"s\",\"action\":\"x\",\"input\":{},\"target\":{}}}\n",
            serde_json::to_string(&vec![[0.0; 3]; 26]).unwrap(),
            serde_json::to_string(&vec![[0.0; 3]; 25]).unwrap(),
        );
        match load_dataset(line.as_bytes()) {
            Err(Error::BadJointCount { record, got }) => {
                assert_eq!(record, "r26");
                assert_eq!(got, 26);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_partitions_records() {
        let records = synth_generate(5, 3, &LayoutSpec::standard(4)).unwrap();
        let cfg = SplitConfig {
            train_actors: ["s1", "s2"].iter().map(|s| s.to_string()).collect(),
            val_actors: ["s3"].iter().map(|s| s.to_string()).collect(),
            test_actors: ["s4"].iter().map(|s| s.to_string()).collect(),
        };
        let (train, val, test) = split_by_actor(&records, &cfg).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), records.len());
        assert!(train.iter().all(|r| cfg.train_actors.contains(&r.actor)));
        assert!(val.iter().all(|r| r.actor == "s3"));
        assert!(test.iter().all(|r| r.actor == "s4"));

        // Single-actor config: everything lands in train.
        let only = SplitConfig {
            train_actors: ["solo"].iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        let mut solo_records = records.clone();
        for r in &mut solo_records {
            r.actor = "solo".into();
        }
        let (train, val, test) = split_by_actor(&solo_records, &only).unwrap();
        assert_eq!(train.len(), solo_records.len());
        assert!(val.is_empty() && test.is_empty());

        // Unassigned actor errors.
        let missing = SplitConfig {
            train_actors: ["s1"].iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        assert!(matches!(
            split_by_actor(&records, &missing),
            Err(Error::UnassignedActor(_))
        ));

        // Overlapping sets are invalid.
        let overlap = SplitConfig {
            train_actors: ["s1"].iter().map(|s| s.to_string()).collect(),
            val_actors: ["s1"].iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        assert!(overlap.validate().is_err());
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let layout = LayoutSpec::standard(3);
        let a = to_bytes(&synth_generate(7, 4, &layout).unwrap());
        let b = to_bytes(&synth_generate(7, 4, &layout).unwrap());
        assert_eq!(a, b);
        let c = to_bytes(&synth_generate(8, 4, &layout).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn two_mode_action_alternates_equally() {
        let records = synth_generate(1, 10, &LayoutSpec::two_mode(2)).unwrap();
        assert_eq!(records.len(), 20);
        // Even records are arms-up, odd are arms-side; fingers differ.
        let up: Vec<&DatasetRecord> = records.iter().step_by(2).collect();
        let side: Vec<&DatasetRecord> = records.iter().skip(1).step_by(2).collect();
        assert_eq!(up.len(), 10);
        assert_eq!(side.len(), 10);
        for (u, s) in up.iter().zip(&side) {
            let d = dist(
                u.target_pose.joints[RIGHT_FINGER],
                s.target_pose.joints[RIGHT_FINGER],
            );
            assert!(d >= 0.5, "modes only {d} m apart at the right finger");
        }
    }

    #[test]
    fn targets_fit_the_input_grid() {
        let records = synth_generate(11, 5, &LayoutSpec::standard(3)).unwrap();
        for r in &records {
            let t = GridTransform::centered_on(r.input_pose.joints[MID_HIP]);
            for (j, &p) in r.target_pose.joints.iter().enumerate() {
                assert!(
                    t.world_to_voxel(p).is_some(),
                    "record {} target joint {j} outside grid",
                    r.id
                );
            }
        }
    }

    #[test]
    fn modes_keep_plausible_proportions() {
        // The canonical skeleton's bones stay fixed across inputs; arm
        // repositioning keeps segment lengths within anatomical range so
        // refinement references stay meaningful.
        let bones = BoneSet::body25();
        let base = canonical_pose();
        let base_lengths = bone_lengths(&base, &bones);
        for mode in [PoseMode::ArmsUp, PoseMode::ArmsSide, PoseMode::ArmsForward] {
            let posed = mode.apply(&base);
            let lengths = bone_lengths(&posed, &bones);
            for (i, (&a, &b)) in base_lengths.iter().zip(lengths.iter()).enumerate() {
                assert!(
                    (a - b).abs() < 1e-9,
                    "mode {mode:?} changes bone {i}: {a} -> {b}"
                );
            }
        }
    }
}
