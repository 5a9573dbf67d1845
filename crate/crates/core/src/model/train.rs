use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::Augmentation;
use super::features::image_statistics;
use super::net::{
    backward_with, forward_stats, Gradients, InputGeometry, InputNorm, LossKind, ModelParams,
    TrainMode,
};
use crate::data::DatasetRecord;
use crate::dist::ScoreDistribution;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// SGD-with-momentum training schedule. Defaults are the reference
/// full-scale values; desk-scale runs override learning rates, epochs and
/// image geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub dropout_rate: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub resize_to: usize,
    pub crop_to: usize,
    pub hflip: bool,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 3e-7,
            lr_head: 3e-6,
            momentum: 0.9,
            dropout_rate: 0.75,
            decay_factor: 0.95,
            decay_every_epochs: 10,
            epochs: 50,
            batch_size: 32,
            resize_to: 256,
            crop_to: 224,
            hflip: true,
            seed: 0,
            hidden: vec![64, 64],
            loss: LossKind::SquaredEmd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor {} not in (0, 1]", self.decay_factor));
        }
        if self.decay_every_epochs == 0 || self.batch_size == 0 {
            return bad("decay interval and batch size must be positive".into());
        }
        if !(self.lr_backbone >= 0.0
            && self.lr_head >= 0.0
            && self.lr_backbone.is_finite()
            && self.lr_head.is_finite())
        {
            return bad("learning rates must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        self.augmentation().validate()
    }

    pub fn augmentation(&self) -> Augmentation {
        Augmentation {
            resize_to: self.resize_to,
            crop_to: self.crop_to,
            hflip: self.hflip,
        }
    }

    pub fn geometry(&self) -> InputGeometry {
        InputGeometry {
            resize_to: self.resize_to,
            crop_to: self.crop_to,
        }
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based):
    /// `decay^⌊epoch / every⌋`.
    pub fn lr_multiplier(&self, epoch: usize) -> f64 {
        self.decay_factor
            .powi((epoch / self.decay_every_epochs) as i32)
    }

    /// Flat `key = value` echo of every setting, one per line.
    pub fn echo(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        [
            format!("lr_backbone = {}", self.lr_backbone),
            format!("lr_head = {}", self.lr_head),
            format!("momentum = {}", self.momentum),
            format!("dropout = {}", self.dropout_rate),
            format!("decay_factor = {}", self.decay_factor),
            format!("decay_every = {}", self.decay_every_epochs),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("resize_to = {}", self.resize_to),
            format!("crop_to = {}", self.crop_to),
            format!("hflip = {}", self.hflip),
            format!("seed = {}", self.seed),
            format!("hidden = {}", hidden.join(",")),
            format!("loss = {}", self.loss.name()),
        ]
        .join("\n")
    }
}

/// Momentum accumulators, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Gradients,
}

impl MomentumState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
        }
    }
}

/// One update: `v ← μ v + g`, `w ← w − lr v`, with `lr_head` on the last
/// layer and `lr_backbone` elsewhere.
pub fn momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut MomentumState,
    lr_backbone: f64,
    lr_head: f64,
    momentum: f64,
) {
    let n_layers = grads.layers.len();
    for (li, ((layer, g), v)) in params
        .layers_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
        .enumerate()
    {
        let lr = if li + 1 == n_layers {
            lr_head
        } else {
            lr_backbone
        };
        for ((w, gw), vw) in layer.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
            *vw = momentum * *vw + gw;
            *w -= lr * *vw;
        }
        for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = momentum * *vb + gb;
            *b -= lr * *vb;
        }
    }
}

/// Mean loss and mean gradient over a batch of (statistics, target) pairs.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[(Vec<f64>, &ScoreDistribution)],
    loss: LossKind,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut dropout = dropout;
    for (stats, gt) in batch {
        let mode = dropout.as_mut().map(|(rng, rate)| TrainMode {
            rng,
            dropout_rate: *rate,
        });
        let (z, cache) = forward_stats(stats, params, mode)?;
        loss_sum += loss.value(gt, &z)?;
        total.add_assign(&backward_with(loss, gt, &cache, params)?);
    }
    let k = 1.0 / batch.len() as f64;
    total.scale(k);
    Ok((loss_sum * k, total))
}

/// Trains a fresh model; returns it with the mean training loss per epoch.
/// Input normalization is fitted on the centered views of the training
/// images before the first step.
pub fn train(dataset: &[DatasetRecord], config: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    let images: Vec<ImageTensor> = dataset
        .iter()
        .map(DatasetRecord::load_image)
        .collect::<Result<_>>()?;
    train_on_images(dataset, &images, config)
}

/// As [`train`] with images already loaded (`images[i]` belongs to
/// `dataset[i]`).
pub fn train_on_images(
    dataset: &[DatasetRecord],
    images: &[ImageTensor],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Degenerate("empty training set".into()))?;
    if images.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            expected: dataset.len(),
            got: images.len(),
        });
    }
    let scale = first.gt.scale().clone();
    if let Some(index) = dataset.iter().position(|r| r.gt.scale() != &scale) {
        return Err(Error::AtExample {
            index,
            source: Box::new(Error::ScaleMismatch),
        });
    }

    let mut params = ModelParams::new(scale, &config.hidden, config.geometry(), config.seed);
    let centered: Vec<Vec<f64>> = images
        .iter()
        .map(|img| {
            params
                .geometry
                .center_view(img)
                .map(|v| image_statistics(&v))
        })
        .collect::<Result<_>>()?;
    params.input_norm = InputNorm::fit(&centered)?;
    let mut state = MomentumState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let aug = config.augmentation();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mult = config.lr_multiplier(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let draw = aug.draw(&mut rng);
                let view = aug.apply(&images[i], draw)?;
                batch.push((image_statistics(&view), &dataset[i].gt));
            }
            let (loss, grads) = batch_gradient(
                &params,
                &batch,
                config.loss,
                Some((&mut rng, config.dropout_rate)),
            )?;
            if !loss.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss * chunk.len() as f64;
            momentum_step(
                &mut params,
                &grads,
                &mut state,
                config.lr_backbone * mult,
                config.lr_head * mult,
                config.momentum,
            );
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }
    Ok((params, trace))
}
