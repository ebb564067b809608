//! `.skel` sequence files and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GroundTruthSegment, SkeletonSequence, SkeletonTopology};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{join_header, split_header};

pub const SEQUENCE_EXTENSION: &str = "skel";
const FORMAT_TAG: &str = "hydraview-skel-v1";

#[derive(Serialize, Deserialize)]
struct SkelHeader {
    format: String,
    id: String,
    joints: usize,
    fps: f64,
    n_frames: usize,
    topology: SkeletonTopology,
    class_names: Vec<String>,
    segments: Vec<GroundTruthSegment>,
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &SkeletonSequence) -> Result<()> {
    let header = SkelHeader {
        format: FORMAT_TAG.into(),
        id: seq.id.clone(),
        joints: seq.num_joints(),
        fps: seq.fps,
        n_frames: seq.num_frames(),
        topology: seq.topology.clone(),
        class_names: seq.class_names.clone(),
        segments: seq.segments.clone(),
    };
    let mut payload = Vec::with_capacity(seq.positions.len() * 12);
    for p in &seq.positions {
        for c in p {
            payload.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    fs::write(path, join_header(&header, &payload)?)?;
    Ok(())
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let (h, payload) = split_header::<SkelHeader>(&bytes)?;
    if h.format != FORMAT_TAG {
        return Err(Error::Format(format!("{}: unknown format {}", path.display(), h.format)));
    }
    if h.topology.num_joints() != h.joints {
        return Err(Error::Format(format!(
            "{}: topology has {} joints, header says {}",
            path.display(),
            h.topology.num_joints(),
            h.joints
        )));
    }
    let expected = h.n_frames * h.joints * 3 * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, expected {expected}",
            path.display(),
            payload.len()
        )));
    }
    let positions = payload
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect();
    SkeletonSequence::new(h.id, h.fps, h.topology, h.class_names, positions, h.segments)
}

/// Class vocabulary plus `.skel` paths (relative to the manifest's directory)
/// for each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub joints: usize,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl DatasetManifest {
    /// Writes every sequence as `<id>.skel` under `dir` plus `manifest.json`.
    pub fn write_splits(
        dir: impl AsRef<Path>,
        train: &[SkeletonSequence],
        val: &[SkeletonSequence],
        test: &[SkeletonSequence],
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let first = train
            .iter()
            .chain(val)
            .chain(test)
            .next()
            .ok_or_else(|| Error::InvalidArgument("no sequences to write".into()))?;
        fs::create_dir_all(dir)?;
        let mut seen = std::collections::HashSet::new();
        let mut write = |seqs: &[SkeletonSequence]| -> Result<Vec<PathBuf>> {
            seqs.iter()
                .map(|s| {
                    if s.class_names != first.class_names || s.num_joints() != first.num_joints() {
                        return Err(Error::InvalidArgument(format!(
                            "sequence {} differs from {} in classes or joints",
                            s.id, first.id
                        )));
                    }
                    if !seen.insert(s.id.clone()) {
                        return Err(Error::InvalidArgument(format!("duplicate sequence id {}", s.id)));
                    }
                    let name = PathBuf::from(format!("{}.{SEQUENCE_EXTENSION}", s.id));
                    write_sequence(dir.join(&name), s)?;
                    Ok(name)
                })
                .collect()
        };
        let manifest = Self {
            classes: first.class_names.clone(),
            joints: first.num_joints(),
            train: write(train)?,
            val: write(val)?,
            test: write(test)?,
        };
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, name: &str) -> Result<&[PathBuf]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }

    /// Loads one split, checking every file against the manifest vocabulary.
    pub fn load_split(&self, base: impl AsRef<Path>, name: &str) -> Result<Vec<SkeletonSequence>> {
        self.split(name)?
            .iter()
            .map(|p| {
                let seq = read_sequence(base.as_ref().join(p))?;
                if seq.class_names != self.classes || seq.num_joints() != self.joints {
                    return Err(Error::Format(format!(
                        "{}: class vocabulary or joint count differs from the manifest",
                        p.display()
                    )));
                }
                Ok(seq)
            })
            .collect()
    }

    /// SHA-256 over the manifest and the bytes of every listed file.
    pub fn content_hash(&self, base: impl AsRef<Path>) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            let full = base.as_ref().join(p);
            let bytes =
                fs::read(&full).map_err(|e| Error::Missing(format!("{}: {e}", full.display())))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }
}
