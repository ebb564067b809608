//! On-disk feature-grid cache: length-prefixed JSON header plus an `f32`
//! little-endian payload, keyed by sequence id, view count and stride.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hydraview::FeatureGrid;
use crate::tensor::checkpoint::{join_header, split_header};
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "hydraview-features-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    seq: String,
    views: usize,
    stride: usize,
    windows: usize,
    channels: usize,
    encoder_hash: String,
    valid: Vec<bool>,
}

/// A grid read back from the cache together with its provenance.
#[derive(Clone, Debug)]
pub struct CachedFeatures {
    pub seq: String,
    pub stride: usize,
    /// Hash of the window encoder that produced the grid.
    pub encoder_hash: String,
    pub grid: FeatureGrid<f64>,
}

pub fn feature_cache_path(dir: impl AsRef<Path>, seq: &str, views: usize, stride: usize) -> PathBuf {
    dir.as_ref().join(format!("{seq}_v{views}_s{stride}.feat"))
}

pub fn save_features(
    path: impl AsRef<Path>,
    seq: &str,
    stride: usize,
    encoder_hash: &str,
    grid: &FeatureGrid<f64>,
) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        seq: seq.into(),
        views: grid.views(),
        stride,
        windows: grid.windows(),
        channels: grid.channels(),
        encoder_hash: encoder_hash.into(),
        valid: grid.valid().to_vec(),
    };
    let payload: Vec<u8> = grid
        .values()
        .data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect();
    fs::write(path, join_header(&header, &payload)?)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<CachedFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let (h, payload) = split_header::<Header>(&bytes)?;
    if h.format != FORMAT_TAG {
        return Err(Error::Format(format!("{}: unknown feature format {}", path.display(), h.format)));
    }
    let n = h.views * h.windows * h.channels;
    if payload.len() != 4 * n || h.valid.len() != h.views * h.windows {
        return Err(Error::Format(format!(
            "{}: payload does not match a {}×{}×{} grid",
            path.display(),
            h.views,
            h.windows,
            h.channels
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(CachedFeatures {
        seq: h.seq,
        stride: h.stride,
        encoder_hash: h.encoder_hash,
        grid: FeatureGrid::new(Tensor::new(vec![h.views, h.windows, h.channels], data)?, h.valid)?,
    })
}
