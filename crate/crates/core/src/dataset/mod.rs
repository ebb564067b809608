//! Skeleton sequences, frame annotations and temporal windowing.

mod io;
mod synth;

pub use io::{read_sequence, write_sequence, DatasetManifest, SEQUENCE_EXTENSION};
pub use synth::{generate_synthetic, primitive_names, SynthConfig, PRIMITIVE_BANK_SIZE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SkeletonWindow3D, TorsoJoints, Vec3};
use crate::tensor::Tensor;

/// Default window length in frames.
pub const WINDOW_FRAMES: usize = 16;

/// Joint names and bone edges of a skeleton tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub joint_names: Vec<String>,
    /// `(parent, child)` pairs.
    pub bones: Vec<(usize, usize)>,
    pub torso: TorsoJoints,
}

const JOINT_TABLE: [(&str, Option<usize>); 15] = [
    ("pelvis", None),
    ("left_hip", Some(0)),
    ("right_hip", Some(0)),
    ("left_shoulder", Some(0)),
    ("right_shoulder", Some(0)),
    ("left_elbow", Some(3)),
    ("right_elbow", Some(4)),
    ("left_hand", Some(5)),
    ("right_hand", Some(6)),
    ("left_knee", Some(1)),
    ("right_knee", Some(2)),
    ("left_foot", Some(9)),
    ("right_foot", Some(10)),
    ("neck", Some(0)),
    ("head", Some(13)),
];

pub const MAX_JOINTS: usize = JOINT_TABLE.len();

impl SkeletonTopology {
    /// The first `joints` entries of the built-in 15-joint body. Every prefix
    /// of length ≥ 5 is a tree containing the four torso joints.
    pub fn standard(joints: usize) -> Result<Self> {
        if !(5..=MAX_JOINTS).contains(&joints) {
            return Err(Error::InvalidArgument(format!(
                "joint count must be in 5..={MAX_JOINTS}, got {joints}"
            )));
        }
        let table = &JOINT_TABLE[..joints];
        Ok(Self {
            joint_names: table.iter().map(|(n, _)| n.to_string()).collect(),
            bones: table
                .iter()
                .enumerate()
                .filter_map(|(c, (_, p))| p.map(|p| (p, c)))
                .collect(),
            torso: TorsoJoints {
                left_shoulder: 3,
                right_shoulder: 4,
                right_hip: 2,
                left_hip: 1,
            },
        })
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// A tree: `J − 1` edges, every node reachable from the root, no repeats.
    pub fn is_tree(&self) -> bool {
        let n = self.num_joints();
        if n == 0 || self.bones.len() != n - 1 {
            return false;
        }
        let mut parent = vec![None; n];
        for &(p, c) in &self.bones {
            if p >= n || c >= n || parent[c].is_some() {
                return false;
            }
            parent[c] = Some(p);
        }
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return false;
        }
        (0..n).all(|mut j| {
            for _ in 0..n {
                match parent[j] {
                    None => return true,
                    Some(p) => j = p,
                }
            }
            false
        })
    }
}

/// Annotated action instance over frames `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// A recorded (or generated) motion with frame-level multi-label annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub fps: f64,
    pub topology: SkeletonTopology,
    pub class_names: Vec<String>,
    /// `n_frames × J` positions, frame-major.
    pub positions: Vec<Vec3<f64>>,
    pub segments: Vec<GroundTruthSegment>,
}

impl SkeletonSequence {
    pub fn new(
        id: impl Into<String>,
        fps: f64,
        topology: SkeletonTopology,
        class_names: Vec<String>,
        positions: Vec<Vec3<f64>>,
        segments: Vec<GroundTruthSegment>,
    ) -> Result<Self> {
        let j = topology.num_joints();
        if j == 0 || positions.len() % j != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} positions is not a whole number of {j}-joint frames",
                positions.len()
            )));
        }
        if !topology.is_tree() {
            return Err(Error::InvalidArgument("skeleton topology is not a tree".into()));
        }
        let n = positions.len() / j;
        for s in &segments {
            if s.start >= s.end || s.end > n {
                return Err(Error::InvalidArgument(format!(
                    "segment [{}, {}) invalid for {n} frames",
                    s.start, s.end
                )));
            }
            if s.class >= class_names.len() {
                return Err(Error::InvalidArgument(format!(
                    "segment class {} outside {} classes",
                    s.class,
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            fps,
            topology,
            class_names,
            positions,
            segments,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.positions.len() / self.num_joints()
    }

    pub fn num_joints(&self) -> usize {
        self.topology.num_joints()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn frame(&self, f: usize) -> &[Vec3<f64>] {
        let j = self.num_joints();
        &self.positions[f * j..(f + 1) * j]
    }

    /// Sorted, deduplicated class set of every frame.
    pub fn frame_labels(&self) -> Vec<Vec<usize>> {
        let mut labels = vec![Vec::new(); self.num_frames()];
        for s in &self.segments {
            for l in &mut labels[s.start..s.end] {
                l.push(s.class);
            }
        }
        for l in &mut labels {
            l.sort_unstable();
            l.dedup();
        }
        labels
    }
}

/// Number of windows needed to cover `n_frames` with the given length/stride.
pub fn window_count(n_frames: usize, frames: usize, stride: usize) -> usize {
    if n_frames == 0 {
        0
    } else if n_frames <= frames {
        1
    } else {
        (n_frames - frames).div_ceil(stride) + 1
    }
}

/// Fixed-length windows of one sequence with their window-level labels.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub windows: Vec<SkeletonWindow3D<f64>>,
    pub starts: Vec<usize>,
    /// Majority class per window; `num_classes` stands for background.
    pub labels: Vec<usize>,
    pub frames: usize,
    pub stride: usize,
    pub num_classes: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

fn check_window_args(seq: &SkeletonSequence, frames: usize, stride: usize) -> Result<()> {
    if frames < 2 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "window length {frames} must be >= 2 and stride {stride} >= 1"
        )));
    }
    if seq.num_frames() == 0 {
        return Err(Error::InvalidArgument(format!("sequence {} is empty", seq.id)));
    }
    Ok(())
}

/// Cuts `seq` into windows starting at `0, stride, 2·stride, …`. A final
/// partial window is completed by repeating the last frame.
pub fn split_windows(seq: &SkeletonSequence, frames: usize, stride: usize) -> Result<WindowBatch> {
    check_window_args(seq, frames, stride)?;
    let n = seq.num_frames();
    let k = seq.num_classes();
    let frame_labels = seq.frame_labels();
    let count = window_count(n, frames, stride);
    let mut batch = WindowBatch {
        windows: Vec::with_capacity(count),
        starts: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        frames,
        stride,
        num_classes: k,
    };
    for w in 0..count {
        let start = w * stride;
        let mut positions = Vec::with_capacity(frames * seq.num_joints());
        let mut votes = vec![0usize; k + 1];
        for f in start..start + frames {
            let src = f.min(n - 1);
            positions.extend_from_slice(seq.frame(src));
            if frame_labels[src].is_empty() {
                votes[k] += 1;
            } else {
                for &c in &frame_labels[src] {
                    votes[c] += 1;
                }
            }
        }
        // max_by_key keeps the last maximum; scan in reverse so ties go to the lowest index
        let label = (0..=k).rev().max_by_key(|&c| votes[c]).unwrap_or(k);
        batch
            .windows
            .push(SkeletonWindow3D::new(frames, seq.num_joints(), positions)?);
        batch.starts.push(start);
        batch.labels.push(label);
    }
    Ok(batch)
}

/// `T × K` multi-label targets: row `t` marks every class present in any
/// real frame of window `t`.
pub fn frame_targets(seq: &SkeletonSequence, frames: usize, stride: usize) -> Result<Tensor<f64>> {
    check_window_args(seq, frames, stride)?;
    let n = seq.num_frames();
    let k = seq.num_classes();
    let t = window_count(n, frames, stride);
    let mut data = vec![0.0; t * k];
    for s in &seq.segments {
        for w in 0..t {
            let (ws, we) = (w * stride, (w * stride + frames).min(n));
            if s.start < we && ws < s.end {
                data[w * k + s.class] = 1.0;
            }
        }
    }
    Tensor::new(vec![t, k], data)
}

/// Frame span `[start, end)` covered by windows `[w0, w1)`.
pub fn windows_to_frames(
    w0: usize,
    w1: usize,
    frames: usize,
    stride: usize,
    n_frames: usize,
) -> (usize, usize) {
    let start = (w0 * stride).min(n_frames);
    let end = ((w1.saturating_sub(1)) * stride + frames).min(n_frames);
    (start, end.max(start))
}
