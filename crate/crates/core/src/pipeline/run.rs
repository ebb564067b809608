//! Run directory: `config.json`, `manifest.json`, `stage1.ckpt`,
//! `stage2.ckpt`, `features/` and `log.csv`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{feature_cache_path, load_features, save_features};
use super::{sequence_features, train_stage1, train_stage2, SequenceFeatures, Stage1Outcome, Stage2Outcome, TrainConfig};
use crate::dataset::{frame_targets, DatasetManifest, SkeletonSequence};
use crate::error::{Error, Result};
use crate::geometry::{make_virtual_cameras, RigConfig};
use crate::hydraview::HydraView;
use crate::swgcn::Swgcn;
use crate::tensor::{read_checkpoint, write_checkpoint};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub map: Option<f64>,
}

impl EpochLog {
    fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.stage,
            self.epoch,
            self.split,
            self.loss,
            opt(self.accuracy),
            opt(self.map)
        )
    }
}

const LOG_HEADER: &str = "stage,epoch,split,loss,accuracy,map";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: TrainConfig,
    /// Checkpoint path relative to the run directory, or as given when external.
    pub checkpoint: PathBuf,
    pub best_epoch: Option<usize>,
    /// Window encoder parameter hash at the end of the stage.
    pub encoder_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset_hash: Option<String>,
    pub stage1: Option<StageRecord>,
    pub stage2: Option<StageRecord>,
    pub log: Vec<EpochLog>,
}

pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Opens `dir`, creating it and an empty manifest if needed.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("features"))?;
        let mpath = dir.join("manifest.json");
        let manifest = if mpath.exists() {
            serde_json::from_str(&fs::read_to_string(&mpath)?)?
        } else {
            RunManifest::default()
        };
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn features_dir(&self) -> PathBuf {
        self.dir.join("features")
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("stage{stage}.ckpt"))
    }

    fn save_manifest(&self) -> Result<()> {
        fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        Ok(())
    }

    /// Records the config of a stage about to start. A stage runs at most
    /// once per directory and all stages must see the same dataset.
    fn begin(&mut self, cfg: &TrainConfig, dataset_hash: &str) -> Result<()> {
        let done = match cfg.stage {
            1 => self.manifest.stage1.is_some(),
            _ => self.manifest.stage2.is_some(),
        };
        if done {
            return Err(Error::InvalidArgument(format!(
                "{} already holds a stage-{} result; use a fresh run directory",
                self.dir.display(),
                cfg.stage
            )));
        }
        match &self.manifest.dataset_hash {
            Some(h) if h != dataset_hash => {
                return Err(Error::Format(format!(
                    "dataset hash {dataset_hash} differs from the run's {h}"
                )))
            }
            _ => self.manifest.dataset_hash = Some(dataset_hash.into()),
        }
        let cpath = self.dir.join("config.json");
        let mut configs: serde_json::Map<String, serde_json::Value> = if cpath.exists() {
            serde_json::from_str(&fs::read_to_string(&cpath)?)?
        } else {
            serde_json::Map::new()
        };
        configs.insert(format!("stage{}", cfg.stage), serde_json::to_value(cfg)?);
        fs::write(&cpath, serde_json::to_string_pretty(&configs)? + "\n")?;
        self.save_manifest()
    }

    /// Appends rows to `log.csv` and the manifest.
    fn append_log(&mut self, rows: &[EpochLog]) -> Result<()> {
        let path = self.dir.join("log.csv");
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        for r in rows {
            writeln!(f, "{}", r.csv_row())?;
        }
        self.manifest.log.extend_from_slice(rows);
        self.save_manifest()
    }

    fn finish(&mut self, record: StageRecord) -> Result<()> {
        match record.config.stage {
            1 => self.manifest.stage1 = Some(record),
            _ => self.manifest.stage2 = Some(record),
        }
        self.save_manifest()
    }
}

/// Loads a dataset manifest plus the directory its paths are relative to.
pub fn open_dataset(manifest_path: impl AsRef<Path>) -> Result<(DatasetManifest, PathBuf)> {
    let p = manifest_path.as_ref();
    let m = DatasetManifest::load(p)?;
    let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, base))
}

/// Stage 1 inside a run directory; writes `stage1.ckpt` with the encoder frozen.
pub fn run_stage1(dir: impl AsRef<Path>, cfg: &TrainConfig, dataset: impl AsRef<Path>) -> Result<Stage1Outcome> {
    let (data, base) = open_dataset(dataset)?;
    let mut run = Run::open(dir)?;
    let mut cfg = cfg.clone();
    cfg.stage = 1;
    cfg.validate()?;
    run.begin(&cfg, &data.content_hash(&base)?)?;
    let train = data.load_split(&base, "train")?;
    let mut out = train_stage1(&cfg, &train)?;
    run.append_log(&out.log)?;
    out.model.freeze();
    let ckpt = run.checkpoint_path(1);
    write_checkpoint(&ckpt, &out.model.to_checkpoint(out.best_epoch.map_or(0, |e| e as u64 + 1))?)?;
    run.finish(StageRecord {
        config: cfg,
        checkpoint: "stage1.ckpt".into(),
        best_epoch: out.best_epoch,
        encoder_hash: out.model.params().content_hash(),
    })?;
    Ok(out)
}

/// Reads a stage-1 checkpoint and freezes it.
pub fn load_encoder(path: impl AsRef<Path>) -> Result<Swgcn<f64>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Missing(format!("stage-1 checkpoint {}", path.display())));
    }
    let mut enc = Swgcn::from_checkpoint(&read_checkpoint(path)?)?;
    enc.freeze();
    Ok(enc)
}

pub fn load_temporal(path: impl AsRef<Path>) -> Result<HydraView<f64>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Missing(format!("stage-2 checkpoint {}", path.display())));
    }
    HydraView::from_checkpoint(&read_checkpoint(path)?)
}

/// Feature grids for `seqs`, read from `cache_dir` when a file made by the
/// same encoder exists and computed (then written) otherwise.
pub fn cached_features(
    cache_dir: impl AsRef<Path>,
    encoder: &Swgcn<f64>,
    seqs: &[SkeletonSequence],
    views: usize,
    stride: usize,
    margin: f64,
) -> Result<Vec<SequenceFeatures>> {
    let hash = encoder.params().content_hash();
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        let path = feature_cache_path(&cache_dir, &s.id, views, stride);
        let cached = load_features(&path)
            .ok()
            .filter(|c| c.encoder_hash == hash && c.stride == stride && c.seq == s.id);
        let item = match cached {
            Some(c) => SequenceFeatures {
                targets: frame_targets(s, encoder.config().frames, stride)?,
                grid: c.grid,
                seq: s.clone(),
            },
            None => {
                let item = sequence_features(encoder, std::slice::from_ref(s), views, stride, margin)?
                    .pop()
                    .expect("one sequence in, one out");
                save_features(&path, &s.id, stride, &hash, &item.grid)?;
                item
            }
        };
        out.push(item);
    }
    Ok(out)
}

/// Extracts and caches grids for every split of a dataset.
pub fn extract_all(
    dir: impl AsRef<Path>,
    encoder: &Swgcn<f64>,
    dataset: impl AsRef<Path>,
    views: usize,
    stride: usize,
    margin: f64,
) -> Result<usize> {
    let (data, base) = open_dataset(dataset)?;
    let run = Run::open(dir)?;
    make_virtual_cameras::<f64>(&RigConfig::with_views(views))?;
    let mut n = 0;
    for split in ["train", "val", "test"] {
        let seqs = data.load_split(&base, split)?;
        n += cached_features(run.features_dir(), encoder, &seqs, views, stride, margin)?.len();
    }
    Ok(n)
}

/// Stage 2 inside a run directory against a frozen stage-1 checkpoint.
pub fn run_stage2(
    dir: impl AsRef<Path>,
    cfg: &TrainConfig,
    dataset: impl AsRef<Path>,
    stage1: impl AsRef<Path>,
) -> Result<Stage2Outcome> {
    let encoder = load_encoder(stage1)?;
    let (data, base) = open_dataset(dataset)?;
    let mut run = Run::open(dir)?;
    let mut cfg = cfg.clone();
    cfg.stage = 2;
    cfg.validate()?;
    run.begin(&cfg, &data.content_hash(&base)?)?;
    if data.classes.len() + 1 != encoder.config().classes || encoder.topology().num_joints() != data.joints {
        return Err(Error::Format(
            "stage-1 checkpoint does not match the dataset's classes or skeleton".into(),
        ));
    }
    let train = data.load_split(&base, "train")?;
    let val = data.load_split(&base, "val")?;
    let cache = run.features_dir();
    let train_f = cached_features(&cache, &encoder, &train, cfg.views, cfg.stride, cfg.occlusion_margin)?;
    let val_f = cached_features(&cache, &encoder, &val, cfg.views, cfg.stride, cfg.occlusion_margin)?;
    let out = train_stage2(&cfg, &encoder, &train_f, &val_f)?;
    run.append_log(&out.log)?;
    write_checkpoint(
        run.checkpoint_path(2),
        &out.model.to_checkpoint(out.best_epoch.map_or(0, |e| e as u64 + 1))?,
    )?;
    run.finish(StageRecord {
        config: cfg,
        checkpoint: "stage2.ckpt".into(),
        best_epoch: out.best_epoch,
        encoder_hash: out.encoder_hash.clone(),
    })?;
    Ok(out)
}
