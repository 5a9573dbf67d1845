use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::{image_statistics, STATS_DIM};
use crate::dist::{self, BucketScale, Logits, ScoreDistribution};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn random(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Returns (pre-activation, activation).
    fn apply(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre: Vec<f64> = self
            .weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let out = match self.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
        };
        (pre, out)
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.activation == other.activation
    }
}

/// Fixed input geometry applied before inference: resize to
/// `resize_to × resize_to`, then take the centered `crop_to × crop_to` window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputGeometry {
    pub resize_to: usize,
    pub crop_to: usize,
}

impl InputGeometry {
    pub fn center_view(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let resized = img.resize(self.resize_to, self.resize_to)?;
        let off = (self.resize_to - self.crop_to) / 2;
        resized.crop(off, off, self.crop_to, self.crop_to)
    }
}

/// Per-statistic standardization `(x − shift) / scale`, fitted on the
/// training set and frozen with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity() -> Self {
        Self {
            shift: vec![0.0; STATS_DIM],
            scale: vec![1.0; STATS_DIM],
        }
    }

    /// Column means and population standard deviations; columns with
    /// (near) zero spread keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Degenerate(
                "no rows to fit input normalization".into(),
            ));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != STATS_DIM) {
            return Err(Error::LengthMismatch {
                expected: STATS_DIM,
                got: r.len(),
            });
        }
        let n = rows.len() as f64;
        let mut shift = vec![0.0; STATS_DIM];
        for r in rows {
            shift.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; STATS_DIM];
        for r in rows {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&shift) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { shift, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.shift.len() != STATS_DIM || self.scale.len() != STATS_DIM {
            return Err(Error::Shape(format!(
                "input normalization must have {STATS_DIM} entries"
            )));
        }
        if self.shift.iter().any(|v| !v.is_finite())
            || self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::NonFinite("input normalization"));
        }
        Ok(())
    }
}

/// Scoring network: fixed image statistics → standardization → backbone MLP
/// → N-way head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub scale: BucketScale,
    pub input_norm: InputNorm,
    pub backbone: Vec<Dense>,
    pub head: Dense,
    pub geometry: InputGeometry,
    pub seed: u64,
}

impl ModelParams {
    pub fn new(scale: BucketScale, hidden: &[usize], geometry: InputGeometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(hidden.len());
        let mut fan_in = STATS_DIM;
        for &width in hidden {
            backbone.push(Dense::random(fan_in, width, Activation::Relu, &mut rng));
            fan_in = width;
        }
        let head = Dense::random(fan_in, scale.len(), Activation::Identity, &mut rng);
        Self {
            scale,
            input_norm: InputNorm::identity(),
            backbone,
            head,
            geometry,
            seed,
        }
    }

    /// All weights and biases zero; predicts the uniform distribution.
    pub fn zeros(scale: BucketScale, hidden: &[usize], geometry: InputGeometry) -> Self {
        let mut p = Self::new(scale, hidden, geometry, 0);
        for layer in p.layers_mut() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.head.inputs
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.iter().chain(std::iter::once(&self.head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks layer chaining and the head width.
    pub fn validate(&self) -> Result<()> {
        self.input_norm.validate()?;
        let mut fan_in = STATS_DIM;
        for (i, layer) in self.layers().enumerate() {
            if layer.inputs != fan_in {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer gives {fan_in}",
                    layer.inputs
                )));
            }
            if layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::Shape(format!(
                    "layer {i} buffers do not match its shape"
                )));
            }
            if layer
                .weights
                .iter()
                .chain(&layer.bias)
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite("model parameters"));
            }
            fan_in = layer.outputs;
        }
        if self.head.outputs != self.scale.len() {
            return Err(Error::Shape(format!(
                "head has {} outputs for {} buckets",
                self.head.outputs,
                self.scale.len()
            )));
        }
        if self.geometry.crop_to == 0 || self.geometry.crop_to > self.geometry.resize_to {
            return Err(Error::Shape("crop larger than resize target".into()));
        }
        Ok(())
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.backbone.len() == other.backbone.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.same_shape(b))
    }
}

/// Runs the backbone on precomputed statistics.
fn backbone_forward(stats: &[f64], params: &ModelParams) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if let Some(first) = params.backbone.first() {
        if first.inputs != stats.len() {
            return Err(Error::Shape(format!(
                "first layer expects {} inputs, got {}",
                first.inputs,
                stats.len()
            )));
        }
    } else if params.head.inputs != stats.len() {
        return Err(Error::Shape(format!(
            "head expects {} inputs, got {}",
            params.head.inputs,
            stats.len()
        )));
    }
    if stats.len() != params.input_norm.shift.len() {
        return Err(Error::Shape(format!(
            "normalization expects {} inputs, got {}",
            params.input_norm.shift.len(),
            stats.len()
        )));
    }
    let mut pre = Vec::with_capacity(params.backbone.len());
    let mut acts = vec![params.input_norm.apply(stats)];
    for layer in &params.backbone {
        let (z, a) = layer.apply(acts.last().expect("nonempty"));
        pre.push(z);
        acts.push(a);
    }
    Ok((pre, acts))
}

/// Backbone output for an image: the feature vector consumed by the head.
pub fn extract_features(img: &ImageTensor, params: &ModelParams) -> Result<Vec<f64>> {
    let stats = image_statistics(img);
    let (_, mut acts) = backbone_forward(&stats, params)?;
    Ok(acts.pop().expect("nonempty"))
}

/// Dropout state for a training-mode forward pass.
pub struct TrainMode<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dropout_rate: f64,
}

/// Intermediates kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// activations[0] is the statistics vector, activations[i+1] the output of
    /// backbone layer i.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers on the head input (0 or 1/(1-rate)),
    /// `None` when no dropout was applied.
    mask: Option<Vec<f64>>,
    head_input: Vec<f64>,
    logits: Vec<f64>,
    shape: ModelParams,
}

impl ForwardCache {
    pub fn dropout_mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }

    pub fn logits(&self) -> Logits {
        Logits(self.logits.clone())
    }
}

/// Forward pass on an already prepared image (no resize/crop).
pub fn forward(
    img: &ImageTensor,
    params: &ModelParams,
    train: Option<TrainMode<'_>>,
) -> Result<(Logits, ForwardCache)> {
    forward_stats(&image_statistics(img), params, train)
}

/// Forward pass from a statistics vector.
pub fn forward_stats(
    stats: &[f64],
    params: &ModelParams,
    train: Option<TrainMode<'_>>,
) -> Result<(Logits, ForwardCache)> {
    let (pre, acts) = backbone_forward(stats, params)?;
    let features = acts.last().expect("nonempty");
    let (head_input, mask) = match train {
        Some(TrainMode { rng, dropout_rate }) if dropout_rate > 0.0 => {
            let keep = 1.0 - dropout_rate;
            let mask: Vec<f64> = (0..features.len())
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let x = features.iter().zip(&mask).map(|(a, m)| a * m).collect();
            (x, Some(mask))
        }
        _ => (features.clone(), None),
    };
    let (logits, _) = params.head.apply(&head_input);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    // the cache keeps only shapes; zero-sized buffers are enough to compare against
    let shape = ModelParams {
        scale: params.scale.clone(),
        input_norm: InputNorm {
            shift: Vec::new(),
            scale: Vec::new(),
        },
        backbone: params
            .backbone
            .iter()
            .map(|l| Dense {
                weights: Vec::new(),
                bias: Vec::new(),
                ..l.clone()
            })
            .collect(),
        head: Dense {
            weights: Vec::new(),
            bias: Vec::new(),
            ..params.head.clone()
        },
        geometry: params.geometry,
        seed: params.seed,
    };
    let cache = ForwardCache {
        activations: acts,
        pre_activations: pre,
        mask,
        head_input,
        logits: logits.clone(),
        shape,
    };
    Ok((Logits(logits), cache))
}

/// Training objective on the head's logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    SquaredEmd,
    CrossEntropy,
}

impl LossKind {
    pub fn value(self, gt: &ScoreDistribution, z: &Logits) -> Result<f64> {
        match self {
            LossKind::SquaredEmd => dist::squared_emd_loss(gt, z),
            LossKind::CrossEntropy => dist::cross_entropy_loss(gt, z),
        }
    }

    pub fn grad(self, gt: &ScoreDistribution, z: &Logits) -> Result<Vec<f64>> {
        match self {
            LossKind::SquaredEmd => dist::squared_emd_grad(gt, z),
            LossKind::CrossEntropy => dist::cross_entropy_grad(gt, z),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SquaredEmd => "squared_emd",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_emd" | "emd" => Ok(LossKind::SquaredEmd),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
        }
    }
}

/// Per-layer gradients, backbone layers first, head last.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn head(&self) -> &LayerGrad {
        self.layers.last().expect("head gradient")
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= k);
            l.bias.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// All gradient entries in the same order as the parameters.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Gradients of the squared-EMD loss for one cached example.
pub fn backward(
    gt: &ScoreDistribution,
    cache: &ForwardCache,
    params: &ModelParams,
) -> Result<Gradients> {
    backward_with(LossKind::SquaredEmd, gt, cache, params)
}

pub fn backward_with(
    loss: LossKind,
    gt: &ScoreDistribution,
    cache: &ForwardCache,
    params: &ModelParams,
) -> Result<Gradients> {
    if !params.same_shape(&cache.shape) {
        return Err(Error::Shape(
            "forward cache does not match the model".into(),
        ));
    }
    if gt.scale() != &params.scale {
        return Err(Error::ScaleMismatch);
    }
    let mut grads = Gradients::zeros_like(params);
    let dz = loss.grad(gt, &Logits(cache.logits.clone()))?;

    // head
    let head = &params.head;
    let mut delta = vec![0.0; head.inputs];
    {
        let g = grads.layers.last_mut().expect("head");
        for (o, d) in dz.iter().enumerate() {
            g.bias[o] = *d;
            let row = &mut g.weights[o * head.inputs..(o + 1) * head.inputs];
            for (i, x) in cache.head_input.iter().enumerate() {
                row[i] = d * x;
                delta[i] += d * head.weights[o * head.inputs + i];
            }
        }
    }
    if let Some(mask) = &cache.mask {
        delta.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
    }

    for (li, layer) in params.backbone.iter().enumerate().rev() {
        let pre = &cache.pre_activations[li];
        if layer.activation == Activation::Relu {
            delta.iter_mut().zip(pre).for_each(|(d, z)| {
                if *z <= 0.0 {
                    *d = 0.0
                }
            });
        }
        let input = &cache.activations[li];
        let mut next = vec![0.0; layer.inputs];
        let g = &mut grads.layers[li];
        for (o, d) in delta.iter().enumerate() {
            g.bias[o] = *d;
            if *d == 0.0 {
                continue;
            }
            let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (i, x) in input.iter().enumerate() {
                row[i] = d * x;
                next[i] += d * layer.weights[o * layer.inputs + i];
            }
        }
        delta = next;
    }
    Ok(grads)
}

/// Predicted score distribution for an image, after the model's input
/// geometry is applied.
pub fn predict(img: &ImageTensor, params: &ModelParams) -> Result<ScoreDistribution> {
    let view = params.geometry.center_view(img)?;
    let (z, _) = forward(&view, params, None)?;
    dist::softmax(&params.scale, &z)
}
