//! Stage-one window encoder: stacked graph convolution, group norm, rectifier
//! and stride-1 temporal convolution over a projected skeleton window,
//! followed by global average pooling and a linear classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SkeletonTopology;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{render_views, ProjectedWindow, SkeletonWindow3D, VirtualCamera};
use crate::hydraview::FeatureGrid;
use crate::scalar::Real;
use crate::tensor::{concat, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

/// Channels per joint fed to the first block: `(x, y, visible)`.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwgcnConfig {
    pub feature_dim: usize,
    pub blocks: usize,
    pub temporal_kernel: usize,
    pub groups: usize,
    /// Output classes including the background class.
    pub classes: usize,
    pub frames: usize,
    pub norm_eps: f64,
}

impl Default for SwgcnConfig {
    fn default() -> Self {
        Self {
            feature_dim: 384,
            blocks: 3,
            temporal_kernel: 5,
            groups: 8,
            classes: 5,
            frames: 16,
            norm_eps: 1e-5,
        }
    }
}

impl SwgcnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.temporal_kernel % 2 == 0 || self.temporal_kernel > self.frames {
            return bad(format!(
                "temporal kernel {} must be odd and <= {} frames",
                self.temporal_kernel, self.frames
            ));
        }
        if self.groups == 0 || self.feature_dim % self.groups != 0 {
            return bad(format!(
                "feature dim {} not divisible by {} groups",
                self.feature_dim, self.groups
            ));
        }
        if self.blocks == 0 || self.classes < 2 {
            return bad("need at least one block and two classes".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("normalization epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Symmetric-normalized adjacency `D^{-1/2}(A + I)D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph<S> {
    adjacency: Tensor<S>,
}

impl<S: Real> SkeletonGraph<S> {
    pub fn from_edges(joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = vec![0.0f64; joints * joints];
        for i in 0..joints {
            a[i * joints + i] = 1.0;
        }
        for &(p, c) in edges {
            if p >= joints || c >= joints {
                return Err(Error::InvalidArgument(format!(
                    "edge ({p}, {c}) outside {joints} joints"
                )));
            }
            a[p * joints + c] = 1.0;
            a[c * joints + p] = 1.0;
        }
        let deg: Vec<f64> = (0..joints)
            .map(|i| a[i * joints..(i + 1) * joints].iter().sum::<f64>())
            .collect();
        let data = (0..joints * joints)
            .map(|k| {
                let (i, j) = (k / joints, k % joints);
                S::lit(a[k] / (deg[i] * deg[j]).sqrt())
            })
            .collect();
        Ok(Self {
            adjacency: Tensor::new(vec![joints, joints], data)?,
        })
    }

    pub fn from_topology(t: &SkeletonTopology) -> Result<Self> {
        Self::from_edges(t.num_joints(), &t.bones)
    }

    pub fn adjacency(&self) -> &Tensor<S> {
        &self.adjacency
    }

    pub fn joints(&self) -> usize {
        self.adjacency.shape()[0]
    }
}

/// `Y = Â X W (+ b)` for `x` shaped `[.., J, C_in]` and `w` shaped `[C_in, C_out]`.
pub fn graph_conv<'t, S: Real>(
    x: Var<'t, S>,
    adj: &Tensor<S>,
    w: Var<'t, S>,
    bias: Option<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let ws = w.shape();
    let (Some(&cin), [wi, cout]) = (shape.last(), ws.as_slice()) else {
        return Err(shape_err("graph_conv", format!("input {shape:?}, weight {ws:?}")));
    };
    if cin != *wi {
        return Err(shape_err("graph_conv", format!("input {shape:?}, weight {ws:?}")));
    }
    let rows = shape.iter().product::<usize>() / cin.max(1);
    let mut y = x.joint_mix(adj)?.reshape(vec![rows, cin])?.matmul(w)?;
    if let Some(b) = bias {
        y = y.add_bias(b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = *cout;
    y.reshape(out_shape)
}

/// Stride-1 convolution along axis 1 of `x` shaped `[B, F, J, C]`, padded
/// by repeating the edge frames so the output keeps `F` frames. `w` is
/// `[k_t·C, C_out]` with row `k·C + c` weighting input frame
/// `t + k − (k_t − 1)/2` (clamped), channel `c`.
pub fn temporal_conv<'t, S: Real>(
    x: Var<'t, S>,
    w: Var<'t, S>,
    bias: Option<Var<'t, S>>,
    kernel: usize,
) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let &[b, f, j, c] = shape.as_slice() else {
        return Err(shape_err("temporal_conv", format!("expected [B, F, J, C], got {shape:?}")));
    };
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("temporal kernel {kernel} must be odd")));
    }
    if kernel > f {
        return Err(Error::InvalidArgument(format!(
            "temporal kernel {kernel} exceeds {f} frames"
        )));
    }
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != kernel * c {
        return Err(shape_err("temporal_conv", format!("weight {ws:?} for {kernel}×{c} taps")));
    }
    let pad = (kernel - 1) / 2;
    let taps = (0..kernel)
        .map(|k| {
            let idx: Vec<Option<usize>> = (0..f)
                .map(|t| Some((t + k).saturating_sub(pad).min(f - 1)))
                .collect();
            x.gather(1, &idx)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = if kernel == 1 { taps[0] } else { concat(&taps, 3)? };
    let mut y = stacked.reshape(vec![b * f * j, kernel * c])?.matmul(w)?;
    if let Some(bias) = bias {
        y = y.add_bias(bias)?;
    }
    y.reshape(vec![b, f, j, ws[1]])
}

#[derive(Clone, Debug)]
struct BlockIds {
    graph_w: ParamId,
    graph_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    temporal_w: ParamId,
    temporal_b: ParamId,
}

/// Encoder plus classification head; parameters live in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Swgcn<S> {
    config: SwgcnConfig,
    topology: SkeletonTopology,
    graph: SkeletonGraph<S>,
    params: ParamStore<S>,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

fn glorot<S: Real>(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<S> {
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.gen_range(-bound..bound)))
}

#[derive(Serialize, Deserialize)]
struct Hyper {
    config: SwgcnConfig,
    topology: SkeletonTopology,
}

impl<S: Real> Swgcn<S> {
    pub fn new(config: SwgcnConfig, topology: SkeletonTopology, seed: u64) -> Result<Self> {
        config.validate()?;
        if !topology.is_tree() {
            return Err(Error::InvalidArgument("skeleton topology is not a tree".into()));
        }
        let graph = SkeletonGraph::from_topology(&topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.feature_dim;
        let k = config.temporal_kernel;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let cin = if i == 0 { INPUT_CHANNELS } else { d };
            blocks.push(BlockIds {
                graph_w: params.add(format!("block{i}.graph.weight"), glorot(&mut rng, [cin, d])),
                graph_b: params.add(format!("block{i}.graph.bias"), Tensor::zeros(vec![d])),
                gamma: params.add(format!("block{i}.norm.gamma"), Tensor::full(vec![d], S::one())),
                beta: params.add(format!("block{i}.norm.beta"), Tensor::zeros(vec![d])),
                temporal_w: params.add(
                    format!("block{i}.temporal.weight"),
                    glorot(&mut rng, [k * d, d]),
                ),
                temporal_b: params.add(format!("block{i}.temporal.bias"), Tensor::zeros(vec![d])),
            });
        }
        let head_w = params.add("head.weight", glorot(&mut rng, [d, config.classes]));
        let head_b = params.add("head.bias", Tensor::zeros(vec![config.classes]));
        Ok(Self {
            config,
            topology,
            graph,
            params,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &SwgcnConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn graph(&self) -> &SkeletonGraph<S> {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// After this, weights refuse updates and feature extraction is allowed.
    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Pooled features `[B, d]` and logits `[B, classes]` for an input batch
    /// `[B, F, J, 3]`. `bound` comes from `params().bind(tape)`.
    pub fn forward<'t>(
        &self,
        bound: &[Var<'t, S>],
        input: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let shape = input.shape();
        let j = self.graph.joints();
        if shape.len() != 4
            || shape[1] != self.config.frames
            || shape[2] != j
            || shape[3] != INPUT_CHANNELS
        {
            return Err(shape_err(
                "swgcn",
                format!(
                    "input {shape:?}, model expects [B, {}, {j}, {INPUT_CHANNELS}]",
                    self.config.frames
                ),
            ));
        }
        if bound.len() != self.params.len() {
            return Err(shape_err("swgcn", "parameter binding does not match the model"));
        }
        let b = shape[0];
        let eps = S::lit(self.config.norm_eps);
        let mut x = input;
        for ids in &self.blocks {
            x = graph_conv(x, self.graph.adjacency(), bound[ids.graph_w.0], Some(bound[ids.graph_b.0]))?;
            x = x.group_norm(self.config.groups, bound[ids.gamma.0], bound[ids.beta.0], eps)?;
            x = x.relu()?;
            x = temporal_conv(
                x,
                bound[ids.temporal_w.0],
                Some(bound[ids.temporal_b.0]),
                self.config.temporal_kernel,
            )?;
        }
        let d = self.config.feature_dim;
        let pooled = x
            .reshape(vec![b, self.config.frames * j, d])?
            .mean_axis(1)?;
        let logits = pooled.matmul(bound[self.head_w.0])?.add_bias(bound[self.head_b.0])?;
        Ok((pooled, logits))
    }

    fn bind_constants<'t>(&self, tape: &'t Tape<S>) -> Result<Vec<Var<'t, S>>> {
        self.params.values().iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Value-only features `[B, d]` for a batch of projected windows.
    pub fn encode_batch(&self, windows: &[&ProjectedWindow<S>]) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let bound = self.bind_constants(&tape)?;
        let input = tape.constant(batch_input(windows)?)?;
        let (pooled, _) = self.forward(&bound, input)?;
        let out = pooled.value();
        Ok((*out).clone())
    }

    pub fn encode_window(&self, window: &ProjectedWindow<S>) -> Result<Vec<S>> {
        Ok(self.encode_batch(&[window])?.into_data())
    }

    /// Head logits for one pooled feature vector.
    pub fn classify_window(&self, feature: &[S]) -> Result<Vec<S>> {
        let d = self.config.feature_dim;
        if feature.len() != d {
            return Err(shape_err("classify_window", format!("{} features, expected {d}", feature.len())));
        }
        let w = self.params.get(self.head_w);
        let b = self.params.get(self.head_b);
        let k = self.config.classes;
        Ok((0..k)
            .map(|o| {
                b.data()[o]
                    + (0..d)
                        .map(|i| feature[i] * w.data()[i * k + o])
                        .sum::<S>()
            })
            .collect())
    }

    /// Renders every window from every camera and encodes it. A cell whose
    /// view has no visible joint is marked invalid and zero-filled.
    pub fn extract_feature_grid(
        &self,
        windows: &[SkeletonWindow3D<S>],
        cams: &[VirtualCamera<S>],
        occlusion_margin: S,
    ) -> Result<FeatureGrid<S>> {
        if !self.is_frozen() {
            return Err(Error::NotFrozen(
                "feature extraction needs a frozen window encoder".into(),
            ));
        }
        if windows.is_empty() || cams.is_empty() {
            return Err(Error::InvalidArgument("need at least one window and one view".into()));
        }
        let (v, t, d) = (cams.len(), windows.len(), self.config.feature_dim);
        let mut rendered = Vec::with_capacity(t);
        for w in windows {
            rendered.push(render_views(w, cams, &self.topology.torso, occlusion_margin)?);
        }
        let mut values = vec![S::zero(); v * t * d];
        let mut valid = vec![false; v * t];
        const CHUNK: usize = 64;
        for view in 0..v {
            let cells: Vec<usize> = (0..t).filter(|&i| rendered[i][view].visible_count() > 0).collect();
            for chunk in cells.chunks(CHUNK) {
                let batch: Vec<&ProjectedWindow<S>> = chunk.iter().map(|&i| &rendered[i][view]).collect();
                let feats = self.encode_batch(&batch)?;
                for (row, &i) in chunk.iter().enumerate() {
                    let cell = view * t + i;
                    values[cell * d..(cell + 1) * d]
                        .copy_from_slice(&feats.data()[row * d..(row + 1) * d]);
                    valid[cell] = true;
                }
            }
        }
        FeatureGrid::new(Tensor::new(vec![v, t, d], values)?, valid)
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let hyper = serde_json::to_value(Hyper {
            config: self.config.clone(),
            topology: self.topology.clone(),
        })?;
        Ok(self.params.to_checkpoint(hyper, step))
    }

    /// Rebuilds the architecture recorded in the checkpoint header and loads
    /// its weights. The result is not frozen.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let hyper: Hyper = serde_json::from_value(ckpt.hyperparameters.clone())
            .map_err(|e| Error::Format(format!("window encoder checkpoint header: {e}")))?;
        let mut model = Self::new(hyper.config, hyper.topology, 0)?;
        model.params.load_from(ckpt)?;
        Ok(model)
    }
}

/// `[F, J, 3]` encoder input: normalized coordinates plus visibility.
pub fn window_input<S: Real>(window: &ProjectedWindow<S>) -> Vec<S> {
    let n = window.normalized();
    n.coords
        .iter()
        .zip(&n.visible)
        .flat_map(|(c, &v)| [c[0], c[1], if v { S::one() } else { S::zero() }])
        .collect()
}

pub fn batch_input<S: Real>(windows: &[&ProjectedWindow<S>]) -> Result<Tensor<S>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty window batch".into()))?;
    let (f, j) = (first.frames, first.joints);
    let mut data = Vec::with_capacity(windows.len() * f * j * INPUT_CHANNELS);
    for w in windows {
        if (w.frames, w.joints) != (f, j) {
            return Err(shape_err("batch_input", "windows differ in frames or joints"));
        }
        data.extend(window_input(w));
    }
    Tensor::new(vec![windows.len(), f, j, INPUT_CHANNELS], data)
}
