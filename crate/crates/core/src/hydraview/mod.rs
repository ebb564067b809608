//! Multi-view, multi-scale selective state-space encoder over feature grids.
//!
//! Each branch applies a view-strided convolution to the `V × T × C` grid,
//! splits time into dilated strands and scans the view/time grid in four
//! directions. Branches run at different temporal scales on the same input;
//! the fuser pools views, scans across the scale axis at every time step and
//! maps each step to per-class logits.

mod grid;
mod layers;
mod scan;

pub use grid::FeatureGrid;
pub use layers::{
    conv_validity, dilated_ss2d, masked_view_mean, ss2d_scan, strand_indices, strand_merge,
    strand_split, view_padding, view_strided_conv,
};
pub use scan::{scan_core, scan_values, selective_scan, time_selective_scan, BoundScan, ScanParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{stack, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use scan::linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HydraViewConfig {
    /// Channels of the incoming feature grid.
    pub in_channels: usize,
    pub conv_channels: usize,
    pub state_dim: usize,
    pub view_stride: usize,
    /// `(K_v, K_t)`.
    pub kernel: (usize, usize),
    /// Temporal dilation of each branch.
    pub scales: Vec<usize>,
    pub fuse_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Adds the conv output back onto the scan output inside each branch.
    pub residual: bool,
    pub norm_eps: f64,
}

impl Default for HydraViewConfig {
    fn default() -> Self {
        Self {
            in_channels: 384,
            conv_channels: 192,
            state_dim: 16,
            view_stride: 2,
            kernel: (2, 3),
            scales: vec![1, 2, 3],
            fuse_channels: 192,
            hidden: 192,
            classes: 4,
            residual: false,
            norm_eps: 1e-5,
        }
    }
}

impl HydraViewConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("conv_channels", self.conv_channels),
            ("state_dim", self.state_dim),
            ("view_stride", self.view_stride),
            ("kernel_v", self.kernel.0),
            ("kernel_t", self.kernel.1),
            ("fuse_channels", self.fuse_channels),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::InvalidArgument("scales must be non-empty and >= 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidArgument("normalization epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BranchIds {
    conv: ParamId,
    scans: [ScanParams; 4],
    proj_w: ParamId,
    proj_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct HydraView<S> {
    config: HydraViewConfig,
    params: ParamStore<S>,
    branches: Vec<BranchIds>,
    fuse_fwd: ScanParams,
    fuse_bwd: ScanParams,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

fn glorot<S: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / (fan_in + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| S::lit(rng.gen_range(-bound..bound)))
}

impl<S: Real> HydraView<S> {
    pub fn new(config: HydraViewConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (c, cp, f) = (config.in_channels, config.conv_channels, config.fuse_channels);
        let taps = config.kernel.0 * config.kernel.1;
        let mut branches = Vec::with_capacity(config.scales.len());
        for (b, _) in config.scales.iter().enumerate() {
            let conv = p.add(format!("branch{b}.conv.weight"), glorot(&mut rng, taps * c, cp, taps * c));
            let scans = [0, 1, 2, 3].map(|d| {
                ScanParams::init(&mut p, &format!("branch{b}.scan{d}"), cp, config.state_dim, &mut rng)
            });
            branches.push(BranchIds {
                conv,
                scans,
                proj_w: p.add(format!("fuse.proj{b}.weight"), glorot(&mut rng, cp, f, cp)),
                proj_b: p.add(format!("fuse.proj{b}.bias"), Tensor::zeros(vec![f])),
                gamma: p.add(format!("fuse.norm{b}.gamma"), Tensor::full(vec![f], S::one())),
                beta: p.add(format!("fuse.norm{b}.beta"), Tensor::zeros(vec![f])),
            });
        }
        let fuse_fwd = ScanParams::init(&mut p, "fuse.scan_fwd", f, config.state_dim, &mut rng);
        let fuse_bwd = ScanParams::init(&mut p, "fuse.scan_bwd", f, config.state_dim, &mut rng);
        let h = config.hidden;
        let k = config.classes;
        let fc1_w = p.add("head.fc1.weight", glorot(&mut rng, f, h, f));
        let fc1_b = p.add("head.fc1.bias", Tensor::zeros(vec![h]));
        let fc2_w = p.add("head.fc2.weight", glorot(&mut rng, h, k, h));
        let fc2_b = p.add("head.fc2.bias", Tensor::zeros(vec![k]));
        Ok(Self {
            config,
            params: p,
            branches,
            fuse_fwd,
            fuse_bwd,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    pub fn config(&self) -> &HydraViewConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// One branch: conv, dilated four-direction scan, returning the branch
    /// output `[V', T, C']` and its validity.
    pub fn branch<'t>(
        &self,
        bound: &[Var<'t, S>],
        index: usize,
        grid: Var<'t, S>,
        valid: &[bool],
    ) -> Result<(Var<'t, S>, Vec<bool>)> {
        let ids = &self.branches[index];
        let v = grid.shape()[0];
        let y = view_strided_conv(grid, bound[ids.conv.0], self.config.kernel, self.config.view_stride)?;
        let vmask = conv_validity(valid, v, self.config.kernel.0, self.config.view_stride);
        let dirs = ids.scans.map(|s| s.bind(bound));
        let mut z = dilated_ss2d(y, &vmask, &dirs, self.config.scales[index])?;
        if self.config.residual {
            z = z.add(y)?;
        }
        Ok((z, vmask))
    }

    /// Per-step logits `[T, K]` for a grid `[V, T, C]` with validity `valid`.
    pub fn forward<'t>(&self, bound: &[Var<'t, S>], grid: Var<'t, S>, valid: &[bool]) -> Result<Var<'t, S>> {
        let shape = grid.shape();
        if shape.len() != 3 || shape[2] != self.config.in_channels {
            return Err(shape_err(
                "hydraview",
                format!("grid {shape:?}, model expects [V, T, {}]", self.config.in_channels),
            ));
        }
        if bound.len() != self.params.len() {
            return Err(shape_err("hydraview", "parameter binding does not match the model"));
        }
        let eps = S::lit(self.config.norm_eps);
        let mut per_scale = Vec::with_capacity(self.branches.len());
        for (b, ids) in self.branches.iter().enumerate() {
            let (z, vmask) = self.branch(bound, b, grid, valid)?;
            let pooled = masked_view_mean(z, &vmask)?;
            let proj = linear(pooled, bound[ids.proj_w.0])?.add_bias(bound[ids.proj_b.0])?;
            per_scale.push(proj.layer_norm(bound[ids.gamma.0], bound[ids.beta.0], eps)?);
        }
        self.fuse(bound, &per_scale)
    }

    /// Stacks per-scale `[T, F]` features, scans the scale axis in both
    /// directions at each time step, averages over scales and applies the head.
    pub fn fuse<'t>(&self, bound: &[Var<'t, S>], per_scale: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = per_scale
            .first()
            .ok_or_else(|| Error::InvalidArgument("no scale outputs to fuse".into()))?;
        if per_scale.iter().any(|v| v.shape() != first.shape()) {
            return Err(shape_err("fuse", "scale outputs differ in shape"));
        }
        let nscale = per_scale.len();
        let seq = stack(per_scale)?.permute(&[1, 0, 2])?;
        let fwd = selective_scan(seq, &self.fuse_fwd.bind(bound))?;
        let rev: Vec<usize> = (0..nscale).rev().collect();
        let bwd = selective_scan(seq.select(1, &rev)?, &self.fuse_bwd.bind(bound))?.select(1, &rev)?;
        let fused = fwd.add(bwd)?.mean_axis(1)?;
        let hidden = linear(fused, bound[self.fc1_w.0])?
            .add_bias(bound[self.fc1_b.0])?
            .relu()?;
        linear(hidden, bound[self.fc2_w.0])?.add_bias(bound[self.fc2_b.0])
    }

    fn check_grid(&self, grid: &FeatureGrid<S>) -> Result<()> {
        if grid.channels() != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "grid has {} channels, model expects {}",
                grid.channels(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Value-only logits `[T, K]`.
    pub fn logits(&self, grid: &FeatureGrid<S>) -> Result<Tensor<S>> {
        self.check_grid(grid)?;
        let tape = Tape::new();
        let bound: Vec<_> = self
            .params
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect::<Result<_>>()?;
        let m = tape.constant(grid.values().clone())?;
        let out = self.forward(&bound, m, grid.valid())?.value();
        Ok((*out).clone())
    }

    /// Elementwise sigmoid of [`Self::logits`].
    pub fn probabilities(&self, grid: &FeatureGrid<S>) -> Result<Tensor<S>> {
        Ok(self.logits(grid)?.map(crate::scalar::sigmoid))
    }

    /// Mean multi-label BCE on one grid, with gradients for every parameter.
    pub fn loss_and_grads(&self, grid: &FeatureGrid<S>, targets: &Tensor<S>) -> Result<(S, Vec<Tensor<S>>)> {
        self.check_grid(grid)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape)?;
        let m = tape.constant(grid.values().clone())?;
        let loss = self.forward(&bound, m, grid.valid())?.bce_multilabel(targets)?;
        let value = loss.value().item()?;
        let grads = tape.backward(loss)?;
        let g = bound.iter().map(|&v| grads.get_or_zeros(v)).collect::<Result<_>>()?;
        Ok((value, g))
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(self.params.to_checkpoint(serde_json::to_value(&self.config)?, step))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: HydraViewConfig = serde_json::from_value(ckpt.hyperparameters.clone())
            .map_err(|e| Error::Format(format!("temporal encoder checkpoint header: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(ckpt)?;
        Ok(model)
    }
}
