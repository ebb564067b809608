//! Two-stage training, inference and the run-directory lifecycle.
//!
//! Stage one trains the window encoder with cross-entropy on randomly chosen
//! (window, view) renders. Stage two freezes it, caches feature grids and
//! trains the temporal encoder with multi-label BCE on whole sequences.

mod features;
mod run;

pub use features::{feature_cache_path, load_features, save_features, CachedFeatures};
pub use run::{
    cached_features, extract_all, load_encoder, load_temporal, open_dataset, run_stage1, run_stage2, EpochLog, Run,
    RunManifest, StageRecord,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_targets, split_windows, SkeletonSequence};
use crate::error::{Error, Result};
use crate::evaluation::{detections_in_frames, evaluate, ground_truth_events, EvalReport};
use crate::geometry::{make_virtual_cameras, render_views, ProjectedWindow, RigConfig, VirtualCamera};
use crate::hydraview::{FeatureGrid, HydraView, HydraViewConfig};
use crate::swgcn::{batch_input, Swgcn, SwgcnConfig};
use crate::tensor::{clip_global_norm, AdamW, AdamWConfig, Tape, Tensor};

/// Multipliers applied to each stage's loss before differentiation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cross_entropy: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cross_entropy: 1.0,
            bce: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Cameras of the training rig.
    pub views: usize,
    /// Window stride in frames.
    pub stride: usize,
    pub loss_weights: LossWeights,
    pub clip_norm: f64,
    /// Renders drawn per window per stage-1 epoch, each from a random view.
    pub views_per_window: usize,
    /// Stage 1: batch every visible view of one window together instead of
    /// sampling views at random.
    pub grouped_views: bool,
    /// Stage 2: train on random contiguous view blocks instead of the full rig.
    pub view_subsets: bool,
    pub occlusion_margin: f64,
    /// Probability threshold for turning predictions into events.
    pub detection_threshold: f64,
    /// Anneal the learning rate to zero over the run along a half cosine.
    pub cosine_decay: bool,
    pub swgcn: SwgcnConfig,
    pub hydraview: HydraViewConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 30,
            lr: 0.00045,
            weight_decay: 0.01,
            batch_size: 4,
            seed: 0,
            views: 12,
            stride: 16,
            loss_weights: LossWeights::default(),
            clip_norm: 5.0,
            views_per_window: 1,
            grouped_views: false,
            view_subsets: false,
            occlusion_margin: 0.0,
            detection_threshold: 0.5,
            cosine_decay: false,
            swgcn: SwgcnConfig::default(),
            hydraview: HydraViewConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.views == 0 || self.stride == 0 || self.views_per_window == 0 {
            return bad("batch_size, views, stride and views_per_window must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return bad(format!("detection threshold {} outside [0, 1]", self.detection_threshold));
        }
        self.swgcn.validate()?;
        self.hydraview.validate()
    }

    pub fn rig(&self) -> RigConfig {
        RigConfig::with_views(self.views)
    }

    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay && self.epochs > 0 {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn check_vocabulary(seqs: &[SkeletonSequence]) -> Result<()> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::InvalidArgument("training split is empty".into()))?;
    for s in seqs {
        if s.class_names != first.class_names || s.topology != first.topology {
            return Err(Error::Format(format!(
                "sequence {} disagrees with {} on classes or skeleton",
                s.id, first.id
            )));
        }
    }
    Ok(())
}

/// Every window of every sequence rendered from every camera.
pub struct RenderedWindows {
    /// `[window][view]`.
    pub renders: Vec<Vec<ProjectedWindow<f64>>>,
    /// Window labels, background = number of classes.
    pub labels: Vec<usize>,
}

pub fn render_windows(
    seqs: &[SkeletonSequence],
    cams: &[VirtualCamera<f64>],
    frames: usize,
    stride: usize,
    margin: f64,
) -> Result<RenderedWindows> {
    let mut out = RenderedWindows {
        renders: Vec::new(),
        labels: Vec::new(),
    };
    for s in seqs {
        let batch = split_windows(s, frames, stride)?;
        for (w, &label) in batch.windows.iter().zip(&batch.labels) {
            out.renders.push(render_views(w, cams, &s.topology.torso, margin)?);
            out.labels.push(label);
        }
    }
    Ok(out)
}

/// Fraction of (window, view) pairs with at least one visible joint that the
/// encoder head classifies correctly.
pub fn window_accuracy(model: &Swgcn<f64>, data: &RenderedWindows) -> Result<f64> {
    let mut pairs = Vec::new();
    for (w, views) in data.renders.iter().enumerate() {
        for pw in views.iter().filter(|pw| pw.visible_count() > 0) {
            pairs.push((pw, data.labels[w]));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no visible window renders".into()));
    }
    let mut correct = 0usize;
    for chunk in pairs.chunks(64) {
        let batch: Vec<_> = chunk.iter().map(|(pw, _)| *pw).collect();
        let feats = model.encode_batch(&batch)?;
        let d = model.feature_dim();
        for (row, (_, label)) in chunk.iter().enumerate() {
            let logits = model.classify_window(&feats.data()[row * d..(row + 1) * d])?;
            correct += usize::from(argmax(&logits) == *label);
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub struct Stage1Outcome {
    /// Parameters of the best epoch (the initialization when `epochs == 0`).
    pub model: Swgcn<f64>,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Trains the window encoder and its classification head from scratch.
pub fn train_stage1(cfg: &TrainConfig, train: &[SkeletonSequence]) -> Result<Stage1Outcome> {
    cfg.validate()?;
    check_vocabulary(train)?;
    let k = train[0].num_classes();
    let mut enc_cfg = cfg.swgcn.clone();
    enc_cfg.classes = k + 1;
    let mut model = Swgcn::<f64>::new(enc_cfg, train[0].topology.clone(), cfg.seed)?;
    let cams = make_virtual_cameras::<f64>(&cfg.rig())?;
    let data = render_windows(train, &cams, model.config().frames, cfg.stride, cfg.occlusion_margin)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4531);
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut best = (model.params().clone(), None::<usize>, f64::NEG_INFINITY);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        opt.config.lr = cfg.lr_at(epoch);
        // a group is trained in one batch; ungrouped samples are singletons
        let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
        for (w, views) in data.renders.iter().enumerate() {
            let visible: Vec<usize> = (0..views.len()).filter(|&v| views[v].visible_count() > 0).collect();
            if cfg.grouped_views {
                if !visible.is_empty() {
                    groups.push(visible.iter().map(|&v| (w, v)).collect());
                }
                continue;
            }
            for _ in 0..cfg.views_per_window {
                if let Some(&v) = visible.choose(&mut rng) {
                    groups.push(vec![(w, v)]);
                }
            }
        }
        groups.shuffle(&mut rng);
        let per_batch = if cfg.grouped_views { 1 } else { cfg.batch_size };
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for block in groups.chunks(per_batch) {
            let chunk: Vec<(usize, usize)> = block.iter().flatten().copied().collect();
            let batch: Vec<_> = chunk.iter().map(|&(w, v)| &data.renders[w][v]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(w, _)| data.labels[w]).collect();
            let (loss, grads, hits) = stage1_step(&model, &batch, &labels, cfg.loss_weights.cross_entropy)
                .map_err(|e| diverged(epoch, step, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            let mut grads = grads;
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(model.params_mut(), &grads)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
            seen += chunk.len();
            step += 1;
        }
        let n = seen.max(1) as f64;
        let entry = EpochLog {
            stage: 1,
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: Some(correct as f64 / n),
            map: None,
        };
        log::info!("stage 1 epoch {epoch}: loss {:.4} acc {:.4}", entry.loss, correct as f64 / n);
        if correct as f64 / n > best.2 {
            best = (model.params().clone(), Some(epoch), correct as f64 / n);
        }
        log.push(entry);
    }
    *model.params_mut() = best.0;
    Ok(Stage1Outcome {
        model,
        log,
        best_epoch: best.1,
    })
}

fn stage1_step(
    model: &Swgcn<f64>,
    batch: &[&ProjectedWindow<f64>],
    labels: &[usize],
    weight: f64,
) -> Result<(f64, Vec<Tensor<f64>>, usize)> {
    let tape = Tape::new();
    let bound = model.params().bind(&tape)?;
    let input = tape.constant(batch_input(batch)?)?;
    let (_, logits) = model.forward(&bound, input)?;
    let k = model.config().classes;
    let hits = logits
        .value()
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let loss = logits.cross_entropy(labels)?.scale(weight)?;
    let value = loss.value().item()?;
    let grads = tape.backward(loss)?;
    let g = bound.iter().map(|&v| grads.get_or_zeros(v)).collect::<Result<_>>()?;
    Ok((value, g, hits))
}

/// One sequence ready for stage 2: its feature grid and `T × K` targets.
#[derive(Clone, Debug)]
pub struct SequenceFeatures {
    pub seq: SkeletonSequence,
    pub grid: FeatureGrid<f64>,
    pub targets: Tensor<f64>,
}

/// Renders and encodes every window of `seq` with a frozen encoder.
pub fn extract_sequence_grid(
    encoder: &Swgcn<f64>,
    seq: &SkeletonSequence,
    cams: &[VirtualCamera<f64>],
    stride: usize,
    margin: f64,
) -> Result<FeatureGrid<f64>> {
    let batch = split_windows(seq, encoder.config().frames, stride)?;
    encoder.extract_feature_grid(&batch.windows, cams, margin)
}

pub fn sequence_features(
    encoder: &Swgcn<f64>,
    seqs: &[SkeletonSequence],
    views: usize,
    stride: usize,
    margin: f64,
) -> Result<Vec<SequenceFeatures>> {
    let cams = make_virtual_cameras::<f64>(&RigConfig::with_views(views))?;
    seqs.iter()
        .map(|s| {
            Ok(SequenceFeatures {
                grid: extract_sequence_grid(encoder, s, &cams, stride, margin)?,
                targets: frame_targets(s, encoder.config().frames, stride)?,
                seq: s.clone(),
            })
        })
        .collect()
}

pub struct Stage2Outcome {
    pub model: HydraView<f64>,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    /// Window encoder parameter hash, identical before and after training.
    pub encoder_hash: String,
}

/// Trains the temporal encoder on cached grids. `encoder` must be frozen and
/// is checked bit-for-bit after training. Selection uses validation
/// mAP@0.5 when `val` is non-empty, the training loss otherwise.
pub fn train_stage2(
    cfg: &TrainConfig,
    encoder: &Swgcn<f64>,
    train: &[SequenceFeatures],
    val: &[SequenceFeatures],
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if !encoder.is_frozen() {
        return Err(Error::NotFrozen("stage 2 requires the window encoder to be frozen".into()));
    }
    let before = encoder.params().content_hash();
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training sequences for stage 2".into()))?;
    let k = first.targets.shape()[1];
    let mut hv_cfg = cfg.hydraview.clone();
    hv_cfg.in_channels = encoder.feature_dim();
    hv_cfg.classes = k;
    let mut model = HydraView::<f64>::new(hv_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4532);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (model.params().clone(), None::<usize>, f64::NEG_INFINITY);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        opt.config.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<f64>>> = None;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let item = &train[i];
                let grid = if cfg.view_subsets {
                    random_view_block(&item.grid, &mut rng)?
                } else {
                    item.grid.clone()
                };
                let (loss, grads) = model
                    .loss_and_grads(&grid, &item.targets)
                    .map_err(|e| diverged(epoch, step, e))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("loss {loss}"),
                    });
                }
                batch_loss += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            x.add_assign(g)?;
                        }
                    }
                }
            }
            let scale = cfg.loss_weights.bce / chunk.len() as f64;
            let mut grads: Vec<_> = acc
                .unwrap_or_default()
                .into_iter()
                .map(|g| g.map(|x| x * scale))
                .collect();
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(model.params_mut(), &grads)?;
            loss_sum += batch_loss * cfg.loss_weights.bce;
            step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        log.push(EpochLog {
            stage: 2,
            epoch,
            split: "train".into(),
            loss: train_loss,
            accuracy: None,
            map: None,
        });
        let score = if val.is_empty() {
            -train_loss
        } else {
            let report = evaluate_features(&model, val, cfg.detection_threshold, encoder.config().frames, cfg.stride)?;
            let map = report.map_at(0.5).unwrap_or(0.0);
            log.push(EpochLog {
                stage: 2,
                epoch,
                split: "val".into(),
                loss: mean_bce(&model, val)?,
                accuracy: None,
                map: Some(map),
            });
            map
        };
        log::info!("stage 2 epoch {epoch}: loss {train_loss:.4} score {score:.4}");
        if score > best.2 {
            best = (model.params().clone(), Some(epoch), score);
        }
    }
    *model.params_mut() = best.0;
    let after = encoder.params().content_hash();
    if after != before {
        return Err(Error::Frozen(format!(
            "window encoder changed during stage 2 ({before} -> {after})"
        )));
    }
    Ok(Stage2Outcome {
        model,
        log,
        best_epoch: best.1,
        encoder_hash: after,
    })
}

/// A random run of consecutive rig cameras (cyclic), mimicking a smaller rig.
fn random_view_block(grid: &FeatureGrid<f64>, rng: &mut ChaCha8Rng) -> Result<FeatureGrid<f64>> {
    let v = grid.views();
    let size = rng.gen_range(1..=v);
    let start = rng.gen_range(0..v);
    let views: Vec<usize> = (0..size).map(|i| (start + i) % v).collect();
    grid.select_views(&views)
}

fn mean_bce(model: &HydraView<f64>, items: &[SequenceFeatures]) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        total += crate::tensor::bce_multilabel_value(&model.logits(&it.grid)?, &it.targets)?;
    }
    Ok(total / items.len().max(1) as f64)
}

/// Event mAP of `model` on prepared grids.
pub fn evaluate_features(
    model: &HydraView<f64>,
    items: &[SequenceFeatures],
    threshold: f64,
    frames: usize,
    stride: usize,
) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut names = Vec::new();
    for it in items {
        let probs = model.probabilities(&it.grid)?;
        dets.extend(detections_in_frames(
            &it.seq.id,
            &probs,
            threshold,
            frames,
            stride,
            it.seq.num_frames(),
        )?);
        gts.extend(ground_truth_events(&it.seq));
        names = it.seq.class_names.clone();
    }
    evaluate(&dets, &gts, &names, &crate::evaluation::DEFAULT_IOU_THRESHOLDS)
}

/// Per-window class probabilities for one sequence seen by `views` cameras.
pub fn infer(
    encoder: &Swgcn<f64>,
    model: &HydraView<f64>,
    seq: &SkeletonSequence,
    views: usize,
    stride: usize,
    margin: f64,
) -> Result<Tensor<f64>> {
    if views == 0 {
        return Err(Error::InvalidArgument("inference needs at least one view".into()));
    }
    check_pair(encoder, model, seq)?;
    let cams = make_virtual_cameras::<f64>(&RigConfig::with_views(views))?;
    let grid = extract_sequence_grid(encoder, seq, &cams, stride, margin)?;
    model.probabilities(&grid)
}

/// Checks that the two checkpoints fit each other and the data.
pub fn check_pair(encoder: &Swgcn<f64>, model: &HydraView<f64>, seq: &SkeletonSequence) -> Result<()> {
    if model.config().in_channels != encoder.feature_dim() {
        return Err(Error::Format(format!(
            "temporal encoder expects {} channels, window encoder produces {}",
            model.config().in_channels,
            encoder.feature_dim()
        )));
    }
    if model.config().classes != seq.num_classes() || encoder.config().classes != seq.num_classes() + 1 {
        return Err(Error::Format(format!(
            "model classes ({}, {} with background) do not match the {} classes of {}",
            model.config().classes,
            encoder.config().classes,
            seq.num_classes(),
            seq.id
        )));
    }
    if encoder.topology() != &seq.topology {
        return Err(Error::Format(format!("sequence {} uses a different skeleton", seq.id)));
    }
    Ok(())
}
