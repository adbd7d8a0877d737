//! The weighted multi-region network: a shared convolutional backbone,
//! ROI pooling, separate fully connected paths for the primary region and
//! the secondary regions, and a box-regression head on the primary path.

mod fusion;
mod roi;
mod train;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::layers::{
    apply_mask, conv2d, conv2d_backward, dropout, fully_connected, fully_connected_backward,
    max_pool2d, max_pool2d_backward, relu, relu_backward, DropoutMode, LayerParams, PoolIndices,
};
use crate::region::RegionAnnotation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::WmrRng;

pub use fusion::{
    fuse_region_scores, multi_task_loss, regression_targets, FusionConfig, LossBreakdown,
};
pub use roi::{roi_pool, roi_pool_backward, RoiIndices};
pub use train::{
    accumulate_frame_gradients, frame_loss, predict_frame, region_scores, train_step,
    FrameGradients, LossTerms, TrainSample,
};

/// Network shape. Every convolution is 3×3 with padding 1 and stride 1,
/// followed by ReLU; `pool_after` lists the convolutions followed by a 2×2
/// max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub roi_size: usize,
    pub fc_hidden: usize,
    pub classes: usize,
    /// When false the secondary path is absent and the fused score is the
    /// primary score alone.
    pub secondary_path: bool,
}

impl Architecture {
    /// Default desk-scale network for `in_channels` inputs.
    pub fn small(in_channels: usize, classes: usize) -> Self {
        Architecture {
            in_channels,
            conv_channels: vec![8, 16, 16],
            pool_after: vec![0],
            roi_size: 4,
            fc_hidden: 64,
            classes,
            secondary_path: true,
        }
    }

    /// Tiny network used by gradient checks.
    pub fn tiny(in_channels: usize, classes: usize) -> Self {
        Architecture {
            in_channels,
            conv_channels: vec![2, 3],
            pool_after: vec![0],
            roi_size: 2,
            fc_hidden: 5,
            classes,
            secondary_path: true,
        }
    }

    pub fn primary_only(mut self) -> Self {
        self.secondary_path = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.classes < 2 {
            return Err(Error::config(
                "need at least one input channel and two classes",
            ));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config(
                "conv_channels must be non-empty and positive",
            ));
        }
        if self
            .pool_after
            .iter()
            .any(|&i| i >= self.conv_channels.len())
        {
            return Err(Error::config("pool_after refers to a missing convolution"));
        }
        if self.roi_size == 0 || self.fc_hidden == 0 {
            return Err(Error::config("roi_size and fc_hidden must be positive"));
        }
        Ok(())
    }

    /// Ratio of feature-map to image resolution.
    pub fn spatial_scale(&self) -> f64 {
        0.5f64.powi(self.pool_after.len() as i32)
    }

    fn roi_features(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.roi_size * self.roi_size
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BackboneLayer<T> {
    Conv(LayerParams<T>),
    Relu,
    MaxPool,
}

/// Three fully connected layers; dropout follows the first two ReLUs.
#[derive(Debug, Clone, PartialEq)]
pub struct FcPath<T> {
    pub fc1: LayerParams<T>,
    pub fc2: LayerParams<T>,
    pub fc3: LayerParams<T>,
}

impl<T: Scalar> FcPath<T> {
    fn new(inputs: usize, hidden: usize, classes: usize, rng: &mut WmrRng) -> Self {
        FcPath {
            fc1: LayerParams::he_uniform(&[hidden, inputs], hidden, inputs, rng),
            fc2: LayerParams::he_uniform(&[hidden, hidden], hidden, hidden, rng),
            fc3: LayerParams::he_uniform(&[classes, hidden], classes, hidden, rng),
        }
    }
}

/// Source of dropout masks for one forward pass. Masks are drawn in a fixed
/// order: primary fc1, primary fc2, then fc1/fc2 of each secondary region.
pub enum DropoutPlan<'a, T> {
    Eval,
    Sample { ratio: f64, rng: &'a mut WmrRng },
    Replay { masks: &'a [Tensor<T>], next: usize },
}

impl<'a, T: Scalar> DropoutPlan<'a, T> {
    pub fn replay(masks: &'a [Tensor<T>]) -> Self {
        DropoutPlan::Replay { masks, next: 0 }
    }

    fn apply(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            DropoutPlan::Eval => Ok((x.clone(), None)),
            DropoutPlan::Sample { ratio, rng } => dropout(x, *ratio, DropoutMode::Train, *rng),
            DropoutPlan::Replay { masks, next } => {
                let mask = masks
                    .get(*next)
                    .ok_or_else(|| Error::config("dropout replay ran out of masks"))?;
                *next += 1;
                Ok((apply_mask(x, mask)?, Some(mask.clone())))
            }
        }
    }
}

struct BackboneCache<T> {
    activations: Vec<Tensor<T>>,
    pool_indices: Vec<PoolIndices>,
}

/// Intermediate values of one fully connected path.
pub struct PathCache<T> {
    input: Tensor<T>,
    pre1: Tensor<T>,
    mask1: Option<Tensor<T>>,
    x1: Tensor<T>,
    pre2: Tensor<T>,
    mask2: Option<Tensor<T>>,
    x2: Tensor<T>,
    scores: Vec<T>,
}

impl<T: Scalar> PathCache<T> {
    pub fn scores(&self) -> &[T] {
        &self.scores
    }
}

/// Everything the backward pass needs from one frame's forward pass.
pub struct FrameForward<T> {
    pub primary_scores: Vec<T>,
    pub secondary_scores: Vec<Vec<T>>,
    pub bbox_deltas: Option<Vec<T>>,
    backbone: BackboneCache<T>,
    primary_roi: RoiIndices,
    primary_path: PathCache<T>,
    secondary_rois: Vec<RoiIndices>,
    secondary_paths: Vec<PathCache<T>>,
}

impl<T: Scalar> FrameForward<T> {
    /// Dropout masks in draw order, for replaying this pass.
    pub fn masks(&self) -> Vec<Tensor<T>> {
        std::iter::once(&self.primary_path)
            .chain(&self.secondary_paths)
            .flat_map(|p| [p.mask1.clone(), p.mask2.clone()])
            .flatten()
            .collect()
    }
}

/// Weighted multi-region network with parameters of scalar type `T`.
#[derive(Debug)]
pub struct WmrModel<T> {
    arch: Architecture,
    backbone: Vec<BackboneLayer<T>>,
    pub primary: FcPath<T>,
    pub secondary: Option<FcPath<T>>,
    pub bbox_head: LayerParams<T>,
    backbone_calls: AtomicUsize,
}

impl<T: Scalar> Clone for WmrModel<T> {
    fn clone(&self) -> Self {
        WmrModel {
            arch: self.arch.clone(),
            backbone: self.backbone.clone(),
            primary: self.primary.clone(),
            secondary: self.secondary.clone(),
            bbox_head: self.bbox_head.clone(),
            backbone_calls: AtomicUsize::new(self.backbone_call_count()),
        }
    }
}

impl<T: Scalar> WmrModel<T> {
    /// Fresh model with uniform fan-in scaled weights drawn from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = WmrRng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut c_in = arch.in_channels;
        for (i, &c_out) in arch.conv_channels.iter().enumerate() {
            backbone.push(BackboneLayer::Conv(LayerParams::he_uniform(
                &[c_out, c_in, 3, 3],
                c_out,
                c_in * 9,
                &mut rng,
            )));
            backbone.push(BackboneLayer::Relu);
            if arch.pool_after.contains(&i) {
                backbone.push(BackboneLayer::MaxPool);
            }
            c_in = c_out;
        }
        let feats = arch.roi_features();
        let primary = FcPath::new(feats, arch.fc_hidden, arch.classes, &mut rng);
        let secondary = arch
            .secondary_path
            .then(|| FcPath::new(feats, arch.fc_hidden, arch.classes, &mut rng));
        let bbox_head = LayerParams::he_uniform(&[4, arch.fc_hidden], 4, arch.fc_hidden, &mut rng);
        Ok(WmrModel {
            arch,
            backbone,
            primary,
            secondary,
            bbox_head,
            backbone_calls: AtomicUsize::new(0),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Number of backbone evaluations since construction.
    pub fn backbone_call_count(&self) -> usize {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    /// Parameter sets with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &LayerParams<T>)> {
        let mut out = Vec::new();
        let mut conv = 0;
        for layer in &self.backbone {
            if let BackboneLayer::Conv(p) = layer {
                out.push((format!("backbone.conv{conv}"), p));
                conv += 1;
            }
        }
        for (prefix, path) in std::iter::once(("primary", &self.primary))
            .chain(self.secondary.as_ref().map(|p| ("secondary", p)))
        {
            out.push((format!("{prefix}.fc1"), &path.fc1));
            out.push((format!("{prefix}.fc2"), &path.fc2));
            out.push((format!("{prefix}.fc3"), &path.fc3));
        }
        out.push(("bbox".to_string(), &self.bbox_head));
        out
    }

    /// Mutable parameter sets in the order of [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut out: Vec<&mut LayerParams<T>> = Vec::new();
        for layer in &mut self.backbone {
            if let BackboneLayer::Conv(p) = layer {
                out.push(p);
            }
        }
        for path in std::iter::once(&mut self.primary).chain(self.secondary.as_mut()) {
            out.push(&mut path.fc1);
            out.push(&mut path.fc2);
            out.push(&mut path.fc3);
        }
        out.push(&mut self.bbox_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, p)| p.param_count())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    fn backbone_forward(&self, input: &Tensor<T>) -> Result<BackboneCache<T>> {
        let (c, _, _) = input.chw()?;
        if c != self.arch.in_channels {
            return Err(Error::input(format!(
                "input has {c} channels, network expects {}",
                self.arch.in_channels
            )));
        }
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let mut activations = vec![input.clone()];
        let mut pool_indices = Vec::new();
        for layer in &self.backbone {
            let x = activations.last().expect("input present");
            let y = match layer {
                BackboneLayer::Conv(p) => conv2d(x, p, 1, 1)?,
                BackboneLayer::Relu => relu(x),
                BackboneLayer::MaxPool => {
                    let (y, idx) = max_pool2d(x, 2, 2)?;
                    pool_indices.push(idx);
                    y
                }
            };
            activations.push(y);
        }
        Ok(BackboneCache {
            activations,
            pool_indices,
        })
    }

    fn path_forward(
        path: &FcPath<T>,
        pooled: Tensor<T>,
        plan: &mut DropoutPlan<'_, T>,
    ) -> Result<PathCache<T>> {
        let input = pooled.reshape(&[path.fc1.weights.shape()[1]])?;
        let pre1 = fully_connected(&input, &path.fc1)?;
        let (x1, mask1) = plan.apply(&relu(&pre1))?;
        let pre2 = fully_connected(&x1, &path.fc2)?;
        let (x2, mask2) = plan.apply(&relu(&pre2))?;
        let scores = fully_connected(&x2, &path.fc3)?.into_data();
        Ok(PathCache {
            input,
            pre1,
            mask1,
            x1,
            pre2,
            mask2,
            x2,
            scores,
        })
    }

    /// One backbone evaluation shared by the primary and every secondary
    /// region. `with_bbox` runs the regression head.
    pub fn forward_frame(
        &self,
        input: &Tensor<T>,
        annotation: &RegionAnnotation,
        plan: &mut DropoutPlan<'_, T>,
        with_bbox: bool,
    ) -> Result<FrameForward<T>> {
        if self.secondary.is_some() && annotation.secondary.is_empty() {
            return Err(Error::Invariant(format!(
                "frame {} has no secondary regions",
                annotation.frame_id
            )));
        }
        let backbone = self.backbone_forward(input)?;
        let featmap = backbone.activations.last().expect("feature map");
        let (s, r) = (self.arch.spatial_scale(), self.arch.roi_size);

        let (pooled, primary_roi) = roi_pool(featmap, &annotation.primary, r, r, s)?;
        let primary_path = Self::path_forward(&self.primary, pooled, plan)?;
        let bbox_deltas = if with_bbox {
            Some(fully_connected(&primary_path.x2, &self.bbox_head)?.into_data())
        } else {
            None
        };

        let mut secondary_rois = Vec::new();
        let mut secondary_paths = Vec::new();
        if let Some(sec) = &self.secondary {
            for region in &annotation.secondary {
                let (pooled, idx) = roi_pool(featmap, region, r, r, s)?;
                secondary_paths.push(Self::path_forward(sec, pooled, plan)?);
                secondary_rois.push(idx);
            }
        }
        Ok(FrameForward {
            primary_scores: primary_path.scores.clone(),
            secondary_scores: secondary_paths.iter().map(|p| p.scores.clone()).collect(),
            bbox_deltas,
            backbone,
            primary_roi,
            primary_path,
            secondary_rois,
            secondary_paths,
        })
    }

    /// Backward through one fully connected path; `extra_x2` is an
    /// additional gradient arriving at the second hidden activation.
    fn path_backward(
        path: &mut FcPath<T>,
        cache: &PathCache<T>,
        grad_scores: &[T],
        extra_x2: Option<Tensor<T>>,
    ) -> Result<Vec<T>> {
        let g = Tensor::vector(grad_scores)?;
        let mut g_x2 = fully_connected_backward(&cache.x2, &mut path.fc3, &g)?;
        if let Some(extra) = extra_x2 {
            g_x2.add_assign(&extra)?;
        }
        let g_a2 = match &cache.mask2 {
            Some(m) => apply_mask(&g_x2, m)?,
            None => g_x2,
        };
        let g_pre2 = relu_backward(&cache.pre2, &g_a2)?;
        let g_x1 = fully_connected_backward(&cache.x1, &mut path.fc2, &g_pre2)?;
        let g_a1 = match &cache.mask1 {
            Some(m) => apply_mask(&g_x1, m)?,
            None => g_x1,
        };
        let g_pre1 = relu_backward(&cache.pre1, &g_a1)?;
        Ok(fully_connected_backward(&cache.input, &mut path.fc1, &g_pre1)?.into_data())
    }

    /// Accumulates parameter gradients for the given score and delta
    /// gradients. Secondary rows and box gradients that are entirely zero
    /// are skipped. Returns
    /// the input gradient when requested.
    pub fn backward_frame(
        &mut self,
        fwd: &FrameForward<T>,
        grad_primary: &[T],
        grad_secondary: &[Vec<T>],
        grad_bbox: Option<&[T]>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if grad_secondary.len() != fwd.secondary_paths.len() {
            return Err(Error::config("secondary gradient count mismatch"));
        }
        let featmap_shape = fwd
            .backbone
            .activations
            .last()
            .expect("feature map")
            .shape()
            .to_vec();
        let mut g_feat = Tensor::zeros(&featmap_shape);

        let extra = match grad_bbox {
            Some(g) if g.iter().any(|&v| v != T::zero()) => Some(fully_connected_backward(
                &fwd.primary_path.x2,
                &mut self.bbox_head,
                &Tensor::vector(g)?,
            )?),
            _ => None,
        };
        let g_pooled =
            Self::path_backward(&mut self.primary, &fwd.primary_path, grad_primary, extra)?;
        roi_pool_backward(&fwd.primary_roi, &g_pooled, &mut g_feat)?;

        if let Some(sec) = self.secondary.as_mut() {
            for ((cache, idx), grad) in fwd
                .secondary_paths
                .iter()
                .zip(&fwd.secondary_rois)
                .zip(grad_secondary)
            {
                if grad.iter().all(|&g| g == T::zero()) {
                    continue;
                }
                let g_pooled = Self::path_backward(sec, cache, grad, None)?;
                roi_pool_backward(idx, &g_pooled, &mut g_feat)?;
            }
        }

        let acts = &fwd.backbone.activations;
        let mut pools = fwd.backbone.pool_indices.iter().rev();
        let mut grad = g_feat;
        for (i, layer) in self.backbone.iter_mut().enumerate().rev() {
            let x = &acts[i];
            grad = match layer {
                BackboneLayer::Conv(p) => {
                    let want = i > 0 || want_input_grad;
                    match conv2d_backward(x, p, 1, 1, &grad, want)? {
                        Some(g) => g,
                        None => return Ok(None),
                    }
                }
                BackboneLayer::Relu => relu_backward(x, &grad)?,
                BackboneLayer::MaxPool => {
                    let idx = pools.next().expect("pool indices recorded");
                    max_pool2d_backward(x.shape(), idx, &grad)?
                }
            };
        }
        Ok(want_input_grad.then_some(grad))
    }

    /// Copies parameters from a name → tensor table; every parameter must be
    /// present with a matching shape.
    pub fn load_params(&mut self, table: &[(String, Tensor<f64>)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, params) in names.iter().zip(self.params_mut()) {
            for (suffix, target) in [
                ("weights", &mut params.weights),
                ("biases", &mut params.biases),
            ] {
                let key = format!("{name}.{suffix}");
                let src = table
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::input(format!("checkpoint lacks tensor {key}")))?;
                if src.shape() != target.shape() {
                    return Err(Error::input(format!(
                        "tensor {key} has shape {:?}, expected {:?}",
                        src.shape(),
                        target.shape()
                    )));
                }
                *target = src.cast();
            }
        }
        Ok(())
    }

    /// Name → tensor table of every weight and bias.
    pub fn param_table(&self) -> Vec<(String, Tensor<f64>)> {
        self.named_params()
            .into_iter()
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weights"), p.weights.cast()),
                    (format!("{name}.biases"), p.biases.cast()),
                ]
            })
            .collect()
    }
}

/// Textual description saved next to a checkpoint and validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureManifest {
    pub architecture: Architecture,
    pub tensors: Vec<(String, Vec<usize>)>,
}

/// Path of the architecture manifest belonging to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".arch.json");
    PathBuf::from(name)
}

impl<T: Scalar> WmrModel<T> {
    pub fn manifest(&self) -> ArchitectureManifest {
        ArchitectureManifest {
            architecture: self.arch.clone(),
            tensors: self
                .param_table()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect(),
        }
    }

    /// Writes the parameter checkpoint and its architecture manifest.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        write_checkpoint(checkpoint, &self.param_table())?;
        let text = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(manifest_path(checkpoint), text + "\n")?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint, checking every tensor against the
    /// manifest saved alongside.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let mpath = manifest_path(checkpoint);
        if !mpath.exists() {
            return Err(Error::MissingFile(mpath));
        }
        let manifest: ArchitectureManifest =
            serde_json::from_str(&std::fs::read_to_string(&mpath)?)
                .map_err(|e| Error::parse(mpath.display().to_string(), e.to_string()))?;
        let table = read_checkpoint(checkpoint)?;
        let mut model = WmrModel::new(manifest.architecture.clone(), 0)?;
        if model.manifest() != manifest {
            return Err(Error::input(format!(
                "{} does not describe the architecture it names",
                mpath.display()
            )));
        }
        let found: Vec<(String, Vec<usize>)> = table
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if found != manifest.tensors {
            return Err(Error::input(format!(
                "{} does not match its architecture manifest",
                checkpoint.display()
            )));
        }
        model.load_params(&table)?;
        Ok(model)
    }
}
