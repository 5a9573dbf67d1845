//! Score-driven parameter search for image enhancement operators.
//!
//! Every setting of an [`OperatorGrid`] is applied to the input, the result
//! is scored by averaging a quality model's predicted mean over random crops,
//! and the best-scoring setting wins. The crop offsets are drawn once and
//! shared by all settings so candidates are compared on identical windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, gaussian_blur_raw, ImageTensor};
use crate::model::{predict, ModelParams};

/// Pre-clamp AWGN field in [0, 1] units for a noise std given in 8-bit
/// intensity units.
pub fn awgn_noise(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Adds white Gaussian noise (std `sigma` in 8-bit units) and clamps.
pub fn add_awgn(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let noise = awgn_noise(img.data().len(), sigma, seed);
    let data = img.data().iter().zip(noise).map(|(v, n)| v + n).collect();
    ImageTensor::from_unclamped(img.height(), img.width(), img.channels(), data)
}

/// Gaussian spatial smoothing; `spatial_sigma` in pixels, 0 is identity.
pub fn denoise(img: &ImageTensor, spatial_sigma: f64) -> Result<ImageTensor> {
    if !(spatial_sigma >= 0.0 && spatial_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spatial sigma must be >= 0, got {spatial_sigma}"
        )));
    }
    Ok(gaussian_blur(img, spatial_sigma))
}

/// Unclamped smoothing of raw values; linear in `data`.
pub fn denoise_raw(
    data: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    spatial_sigma: f64,
) -> Vec<f64> {
    gaussian_blur_raw(data, height, width, channels, spatial_sigma)
}

const DETAIL_SIGMA: f64 = 2.0;

/// Detail boost, shadow lift and brightness offset, applied in that order.
///
/// * detail ≥ 0: `x + detail·(x − blur(x))`
/// * shadow ∈ [−1, 1]: values below 0.5 map to `0.5·(x/0.5)^(2^−shadow)`
/// * brightness ∈ [−1, 1]: additive offset
pub fn tone_adjust(
    img: &ImageTensor,
    detail: f64,
    shadow: f64,
    brightness: f64,
) -> Result<ImageTensor> {
    if !(detail >= 0.0 && detail.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "detail must be >= 0, got {detail}"
        )));
    }
    for (name, v) in [("shadow", shadow), ("brightness", brightness)] {
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be in [-1, 1], got {v}"
            )));
        }
    }
    let mut data = img.data().to_vec();
    if detail != 0.0 {
        let smooth = gaussian_blur_raw(
            &data,
            img.height(),
            img.width(),
            img.channels(),
            DETAIL_SIGMA,
        );
        for (x, s) in data.iter_mut().zip(smooth) {
            *x = (*x + detail * (*x - s)).clamp(0.0, 1.0);
        }
    }
    if shadow != 0.0 {
        let gamma = (-shadow).exp2();
        for x in data.iter_mut().filter(|x| **x < 0.5) {
            *x = 0.5 * (*x / 0.5).powf(gamma);
        }
    }
    if brightness != 0.0 {
        data.iter_mut().for_each(|x| *x += brightness);
    }
    ImageTensor::from_unclamped(img.height(), img.width(), img.channels(), data)
}

/// Enhancement operators the tuner knows how to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Denoise,
    Tone,
}

impl Operator {
    pub fn parameters(self) -> &'static [&'static str] {
        match self {
            Operator::Denoise => &["spatial_sigma"],
            Operator::Tone => &["detail", "shadow", "brightness"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Denoise => "denoise",
            Operator::Tone => "tone",
        }
    }

    /// `values` follow [`Operator::parameters`] order.
    pub fn apply(self, img: &ImageTensor, values: &[f64]) -> Result<ImageTensor> {
        match (self, values) {
            (Operator::Denoise, [s]) => denoise(img, *s),
            (Operator::Tone, [d, sh, b]) => tone_adjust(img, *d, *sh, *b),
            _ => Err(Error::LengthMismatch {
                expected: self.parameters().len(),
                got: values.len(),
            }),
        }
    }
}

impl std::str::FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Operator::Denoise),
            "tone" => Ok(Operator::Tone),
            other => Err(Error::InvalidArgument(format!(
                "unknown operator {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Cartesian grid over an operator's parameters, enumerated row-major (the
/// last axis varies fastest).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorGrid {
    pub operator: Operator,
    pub axes: Vec<GridAxis>,
}

fn steps(start: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start + step * i as f64).collect()
}

impl OperatorGrid {
    pub fn new(operator: Operator, axes: Vec<GridAxis>) -> Result<Self> {
        let names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
        if names != operator.parameters() {
            return Err(Error::InvalidArgument(format!(
                "{} grid needs axes {:?}, got {names:?}",
                operator.name(),
                operator.parameters()
            )));
        }
        for a in &axes {
            if a.values.is_empty() {
                return Err(Error::InvalidArgument(format!("axis {} is empty", a.name)));
            }
            if a.values.windows(2).any(|w| !(w[0] < w[1]))
                || a.values.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidArgument(format!(
                    "axis {} must be strictly increasing",
                    a.name
                )));
            }
        }
        Ok(Self { operator, axes })
    }

    /// spatial_sigma ∈ {0.25, 0.5, …, 10.0}.
    pub fn default_denoise() -> Self {
        Self {
            operator: Operator::Denoise,
            axes: vec![GridAxis {
                name: "spatial_sigma".into(),
                values: steps(0.25, 0.25, 40),
            }],
        }
    }

    /// 6 detail × 11 shadow × 11 brightness levels.
    pub fn default_tone() -> Self {
        Self {
            operator: Operator::Tone,
            axes: vec![
                GridAxis {
                    name: "detail".into(),
                    values: steps(0.0, 0.4, 6),
                },
                GridAxis {
                    name: "shadow".into(),
                    values: steps(-0.5, 0.1, 11),
                },
                GridAxis {
                    name: "brightness".into(),
                    values: steps(-0.1, 0.02, 11),
                },
            ],
        }
    }

    pub fn default_for(operator: Operator) -> Self {
        match operator {
            Operator::Denoise => Self::default_denoise(),
            Operator::Tone => Self::default_tone(),
        }
    }

    /// Parses `name=v1,v2,...` or `name=start:stop:step` axis specs,
    /// separated by `;`, in the operator's parameter order.
    pub fn parse(operator: Operator, spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, vals) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("grid axis {part:?} lacks '='")))?;
            let num = |t: &str| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad grid value {t:?}")))
            };
            let values = if vals.contains(':') {
                let f: Vec<f64> = vals.split(':').map(num).collect::<Result<_>>()?;
                let [start, stop, step] = f[..] else {
                    return Err(Error::InvalidArgument(format!(
                        "range {vals:?} needs start:stop:step"
                    )));
                };
                if !(step > 0.0) || stop < start {
                    return Err(Error::InvalidArgument(format!("bad range {vals:?}")));
                }
                let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
                steps(start, step, count)
            } else {
                vals.split(',').map(num).collect::<Result<_>>()?
            };
            axes.push(GridAxis {
                name: name.trim().to_string(),
                values,
            });
        }
        Self::new(operator, axes)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter values of setting `index` in enumeration order.
    pub fn setting(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            out[k] = axis.values[rem % axis.values.len()];
            rem /= axis.values.len();
        }
        out
    }

    pub fn settings(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.setting(i))
    }

    pub fn describe(&self, values: &[f64]) -> String {
        self.axes
            .iter()
            .zip(values)
            .map(|(a, v)| format!("{}={v}", a.name))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Anything that can assign a quality score to an image crop. `top`/`left`
/// locate the crop in the image being tuned.
pub trait Scorer: Sync {
    fn score(&self, crop: &ImageTensor, top: usize, left: usize) -> Result<f64>;
}

/// Predicted mean score.
impl Scorer for ModelParams {
    fn score(&self, crop: &ImageTensor, _top: usize, _left: usize) -> Result<f64> {
        Ok(predict(crop, self)?.mean())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TuneProtocol {
    pub n_crops: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl TuneProtocol {
    pub fn new(crop_size: usize, seed: u64) -> Self {
        Self {
            n_crops: 50,
            crop_size,
            seed,
        }
    }
}

/// Seeded crop origins, uniform over valid positions.
pub fn crop_offsets(
    height: usize,
    width: usize,
    protocol: &TuneProtocol,
) -> Result<Vec<(usize, usize)>> {
    if protocol.n_crops == 0 || protocol.crop_size == 0 {
        return Err(Error::InvalidArgument(
            "need at least one non-empty crop".into(),
        ));
    }
    if protocol.crop_size > height || protocol.crop_size > width {
        return Err(Error::Image(format!(
            "crop {} larger than {height}x{width} image",
            protocol.crop_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    Ok((0..protocol.n_crops)
        .map(|_| {
            (
                rng.random_range(0..=height - protocol.crop_size),
                rng.random_range(0..=width - protocol.crop_size),
            )
        })
        .collect())
}

fn score_at(
    img: &ImageTensor,
    offsets: &[(usize, usize)],
    size: usize,
    scorer: &dyn Scorer,
) -> Result<f64> {
    let mut total = 0.0;
    for &(top, left) in offsets {
        total += scorer.score(&img.crop(top, left, size, size)?, top, left)?;
    }
    Ok(total / offsets.len() as f64)
}

/// Scorer output averaged over the protocol's random crops.
pub fn crop_averaged_score(
    img: &ImageTensor,
    protocol: &TuneProtocol,
    scorer: &dyn Scorer,
) -> Result<f64> {
    let offsets = crop_offsets(img.height(), img.width(), protocol)?;
    score_at(img, &offsets, protocol.crop_size, scorer)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub operator: Operator,
    pub parameters: Vec<String>,
    pub best_index: usize,
    pub best_setting: Vec<f64>,
    pub best_score: f64,
    /// One entry per grid setting, in enumeration order.
    pub score_table: Vec<f64>,
}

impl TuneResult {
    pub fn to_text(&self, grid: &OperatorGrid) -> String {
        let mut out = format!(
            "# operator = {}\n# settings = {}\n",
            self.operator.name(),
            self.score_table.len()
        );
        out.push_str(&format!("{}\tscore\n", self.parameters.join("\t")));
        for (i, s) in self.score_table.iter().enumerate() {
            let vals: Vec<String> = grid.setting(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{}\t{s:.6}\n", vals.join("\t")));
        }
        out.push_str(&format!(
            "# best = {} score {:.6}\n",
            grid.describe(&self.best_setting),
            self.best_score
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// Applies every setting of `grid`, scores each on shared crops and returns
/// the argmax (lowest index on ties).
pub fn tune(
    img: &ImageTensor,
    grid: &OperatorGrid,
    protocol: &TuneProtocol,
    scorer: &dyn Scorer,
) -> Result<TuneResult> {
    let offsets = crop_offsets(img.height(), img.width(), protocol)?;
    let score_table: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let setting = grid.setting(i);
            let at_setting = |e: Error| Error::AtSetting {
                setting: grid.describe(&setting),
                source: Box::new(e),
            };
            let out = grid.operator.apply(img, &setting).map_err(at_setting)?;
            score_at(&out, &offsets, protocol.crop_size, scorer).map_err(at_setting)
        })
        .collect::<Result<_>>()?;
    let mut best_index = 0;
    for (i, s) in score_table.iter().enumerate() {
        if *s > score_table[best_index] {
            best_index = i;
        }
    }
    Ok(TuneResult {
        operator: grid.operator,
        parameters: grid.axes.iter().map(|a| a.name.clone()).collect(),
        best_index,
        best_setting: grid.setting(best_index),
        best_score: score_table[best_index],
        score_table,
    })
}
