//! Dataset ingestion, train/test splitting and the synthetic distortion
//! dataset.
//!
//! File formats (ASCII, one record per line, `#` starts a comment, blank
//! lines ignored, fields separated by spaces or tabs):
//!
//! * counts file: `<id> <c1> ... <cN>` rating counts per bucket
//! * MOS file: `<id> <mean> <std>`
//!
//! `<id>` names the image relative to the listing's directory; when no file
//! of that exact name exists, `<id>.ppm` and `<id>.pgm` are tried.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dist::{BucketScale, ScoreDistribution};
use crate::error::{Error, Result};
use crate::image::{gaussian_blur, ImageTensor};
use crate::maxent::{fit_maxent_default, MomentTarget};

#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    Embedded(ImageTensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    NativeCounts,
    MaxentFitted,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionKind {
    Noise,
    Blur,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub image: ImageRef,
    pub gt: ScoreDistribution,
    pub source: SourceTag,
    /// 1-based distortion level for synthetic records.
    pub level: Option<usize>,
}

impl DatasetRecord {
    pub fn load_image(&self) -> Result<ImageTensor> {
        match &self.image {
            ImageRef::Path(p) => ImageTensor::load(p),
            ImageRef::Embedded(img) => Ok(img.clone()),
        }
    }
}

/// Parsed listing row before image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Row<T> {
    pub line: usize,
    pub id: String,
    pub value: T,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits a line into (1-based char column, token) pairs, dropping comments.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let content = line.split('#').next().unwrap_or("");
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in content.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &content[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &content[s..]));
    }
    out.into_iter()
        .map(|(s, t)| (content[..s].chars().count() + 1, t))
        .collect()
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        column,
        message: message.into(),
    }
}

fn row_error(path: &Path, line: usize, e: Error) -> Error {
    Error::Row {
        path: path.display().to_string(),
        line,
        source: Box::new(e),
    }
}

fn parse_number(path: &Path, line: usize, (col, tok): (usize, &str), what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_error(path, line, col, format!("expected {what}, found {tok:?}")))
}

/// Reads a counts listing into normalized distributions on `scale`.
/// Counts may be integers or nonnegative decimals.
pub fn read_counts_file(
    path: impl AsRef<Path>,
    scale: &BucketScale,
) -> Result<Vec<Row<ScoreDistribution>>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks = tokens(line);
        if toks.is_empty() {
            continue;
        }
        if toks.len() != scale.len() + 1 {
            let col = toks.get(scale.len() + 1).or(toks.last()).map_or(1, |t| t.0);
            return Err(parse_error(
                path,
                lineno,
                col,
                format!(
                    "expected id and {} counts, found {} fields",
                    scale.len(),
                    toks.len()
                ),
            ));
        }
        let mut counts = Vec::with_capacity(scale.len());
        for &tok in &toks[1..] {
            let v = parse_number(path, lineno, tok, "a count")?;
            if v < 0.0 {
                return Err(parse_error(path, lineno, tok.0, "negative count"));
            }
            counts.push(v);
        }
        if counts.iter().sum::<f64>() <= 0.0 {
            return Err(row_error(
                path,
                lineno,
                Error::InvalidDistribution("row has zero total count".into()),
            ));
        }
        let dist = ScoreDistribution::from_weights(scale.clone(), counts)
            .map_err(|e| row_error(path, lineno, e))?;
        rows.push(Row {
            line: lineno,
            id: toks[0].1.to_string(),
            value: dist,
        });
    }
    Ok(rows)
}

/// Affine map of raw MOS values from `[lo, hi]` onto the scale's range
/// (e.g. LIVE's 0..100 onto 1..10).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosRescale {
    pub lo: f64,
    pub hi: f64,
}

impl MosRescale {
    pub fn apply(&self, scale: &BucketScale, mean: f64, std: f64) -> (f64, f64) {
        let k = (scale.last() - scale.first()) / (self.hi - self.lo);
        (scale.first() + (mean - self.lo) * k, std * k)
    }
}

/// Reads a MOS listing into `(mean, std)` pairs, rescaled when requested.
pub fn read_mos_file(
    path: impl AsRef<Path>,
    scale: &BucketScale,
    rescale: Option<MosRescale>,
) -> Result<Vec<Row<(f64, f64)>>> {
    let path = path.as_ref();
    if let Some(r) = rescale {
        if !(r.lo.is_finite() && r.hi.is_finite() && r.hi > r.lo) {
            return Err(Error::InvalidArgument(format!(
                "bad rescale range [{}, {}]",
                r.lo, r.hi
            )));
        }
    }
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks = tokens(line);
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 3 {
            let col = toks.get(3).or(toks.last()).map_or(1, |t| t.0);
            return Err(parse_error(
                path,
                lineno,
                col,
                format!("expected id, mean and std, found {} fields", toks.len()),
            ));
        }
        let mean = parse_number(path, lineno, toks[1], "a mean")?;
        let std = parse_number(path, lineno, toks[2], "a standard deviation")?;
        let value = match rescale {
            Some(r) => r.apply(scale, mean, std),
            None => (mean, std),
        };
        rows.push(Row {
            line: lineno,
            id: toks[0].1.to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Locates the image for `id` next to the listing.
pub fn resolve_image(listing: &Path, id: &str) -> Option<PathBuf> {
    let dir = listing.parent().unwrap_or_else(|| Path::new("."));
    let direct = dir.join(id);
    if direct.is_file() {
        return Some(direct);
    }
    ["ppm", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn image_for(path: &Path, line: usize, id: &str) -> Result<ImageRef> {
    resolve_image(path, id).map(ImageRef::Path).ok_or_else(|| {
        row_error(
            path,
            line,
            Error::Image(format!("no image found for id {id:?}")),
        )
    })
}

/// Counts listing with resolved images.
pub fn load_counts_file(path: impl AsRef<Path>, scale: &BucketScale) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    read_counts_file(path, scale)?
        .into_iter()
        .map(|row| {
            Ok(DatasetRecord {
                image: image_for(path, row.line, &row.id)?,
                id: row.id,
                gt: row.value,
                source: SourceTag::NativeCounts,
                level: None,
            })
        })
        .collect()
}

/// MOS listing with maxent-fitted ground truth and resolved images.
pub fn load_mos_file(
    path: impl AsRef<Path>,
    scale: &BucketScale,
    rescale: Option<MosRescale>,
) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    fit_mos_rows(path, scale, rescale)?
        .into_iter()
        .map(|row| {
            Ok(DatasetRecord {
                image: image_for(path, row.line, &row.id)?,
                id: row.id,
                gt: row.value,
                source: SourceTag::MaxentFitted,
                level: None,
            })
        })
        .collect()
}

fn fit_mos_rows(
    path: &Path,
    scale: &BucketScale,
    rescale: Option<MosRescale>,
) -> Result<Vec<Row<ScoreDistribution>>> {
    read_mos_file(path, scale, rescale)?
        .into_iter()
        .map(|row| {
            let (mu, sigma) = row.value;
            let fit = fit_maxent_default(&MomentTarget::new(mu, sigma, scale.clone()))
                .map_err(|e| row_error(path, row.line, e))?;
            Ok(Row {
                line: row.line,
                id: row.id,
                value: fit.dist,
            })
        })
        .collect()
}

/// Listing kinds recognized by [`load_listing`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListingFormat {
    Counts,
    Mos,
}

/// Guesses the format from the first data row: 3 fields is MOS, `N + 1` is
/// counts.
pub fn detect_format(path: impl AsRef<Path>, scale: &BucketScale) -> Result<ListingFormat> {
    let path = path.as_ref();
    let text = read_text(path)?;
    for (i, line) in text.lines().enumerate() {
        let toks = tokens(line);
        match toks.len() {
            0 => continue,
            3 => return Ok(ListingFormat::Mos),
            n if n == scale.len() + 1 => return Ok(ListingFormat::Counts),
            n => {
                return Err(parse_error(
                    path,
                    i + 1,
                    1,
                    format!("cannot tell listing format from {n} fields"),
                ))
            }
        }
    }
    Err(Error::Degenerate(format!(
        "{}: empty listing",
        path.display()
    )))
}

pub fn load_listing(
    path: impl AsRef<Path>,
    scale: &BucketScale,
    format: Option<ListingFormat>,
    rescale: Option<MosRescale>,
) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let format = match format {
        Some(f) => f,
        None => detect_format(path, scale)?,
    };
    match format {
        ListingFormat::Counts => load_counts_file(path, scale),
        ListingFormat::Mos => load_mos_file(path, scale, rescale),
    }
}

/// Ground-truth distributions of a listing, without resolving images.
pub fn load_ground_truth(
    path: impl AsRef<Path>,
    scale: &BucketScale,
    rescale: Option<MosRescale>,
) -> Result<Vec<Row<ScoreDistribution>>> {
    let path = path.as_ref();
    match detect_format(path, scale)? {
        ListingFormat::Counts => read_counts_file(path, scale),
        ListingFormat::Mos => fit_mos_rows(path, scale, rescale),
    }
}

/// One counts-format row; probabilities are written in shortest round-trip
/// form so re-reading reproduces the distribution.
pub fn format_counts_row(id: &str, d: &ScoreDistribution) -> String {
    let mut s = id.to_string();
    for m in d.mass() {
        s.push(' ');
        s.push_str(&m.to_string());
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Number of test records: `round(n × fraction)`, kept within `1..n`.
pub fn test_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Seeded random partition; each side keeps the input's relative order.
pub fn split<T: Clone>(records: &[T], spec: SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    if records.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut is_test = vec![false; n];
    for &i in &order[..test_size(n, spec.test_fraction)] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_base: usize,
    pub levels: usize,
    pub seed: u64,
    pub size: usize,
    pub channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_base: 200,
            levels: 5,
            seed: 0,
            size: 32,
            channels: 3,
        }
    }
}

/// Ground-truth mean for a distortion level: 8.0 at level 1 falling linearly
/// to 2.0 at the last level.
pub fn level_mean(level: usize, levels: usize) -> f64 {
    8.0 - 6.0 * (level - 1) as f64 / (levels - 1) as f64
}

/// Ground-truth std: wider at the two extreme levels.
pub fn level_std(level: usize, levels: usize) -> f64 {
    if level == 1 || level == levels {
        1.4
    } else {
        1.0
    }
}

fn base_image(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> ImageTensor {
    let mut data = vec![0.0; size * size * channels];
    let s = size as f64;
    for c in 0..channels {
        let (a, bx, by) = (
            rng.random_range(0.3..0.7),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
        );
        for y in 0..size {
            for x in 0..size {
                data[(y * size + x) * channels + c] =
                    a + bx * (x as f64 / s - 0.5) + by * (y as f64 / s - 0.5);
            }
        }
    }
    let patches = rng.random_range(2..5);
    for _ in 0..patches {
        let h = rng.random_range(size / 4..=size / 2);
        let w = rng.random_range(size / 4..=size / 2);
        let top = rng.random_range(0..=size - h);
        let left = rng.random_range(0..=size - w);
        let period = rng.random_range(3.0..8.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(0.08..0.2);
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in top..top + h {
            for x in left..left + w {
                let phase = (x as f64 * ca + y as f64 * sa) * std::f64::consts::TAU / period;
                for c in 0..channels {
                    data[(y * size + x) * channels + c] += amp * phase.sin();
                }
            }
        }
    }
    ImageTensor::from_unclamped(size, size, channels, data).expect("valid shape")
}

fn distort(
    img: &ImageTensor,
    kind: DistortionKind,
    level: usize,
    levels: usize,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let t = level as f64 / levels as f64;
    match kind {
        DistortionKind::Noise => {
            let normal = Normal::new(0.0, 0.12 * t).expect("finite std");
            let data = img.data().iter().map(|v| v + normal.sample(rng)).collect();
            ImageTensor::from_unclamped(img.height(), img.width(), img.channels(), data)
                .expect("same shape")
        }
        DistortionKind::Blur => gaussian_blur(img, 2.0 * t),
    }
}

/// Procedural stand-in for a distortion-level quality dataset: `n_base`
/// clean images, each distorted (noise or blur, chosen per image) at
/// `levels` increasing intensities, labeled by maxent-fitted distributions
/// whose mean falls with the level.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<DatasetRecord>> {
    if config.levels < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 distortion levels".into(),
        ));
    }
    if config.size < 4 {
        return Err(Error::InvalidArgument(
            "synthetic images need size >= 4".into(),
        ));
    }
    let scale = BucketScale::ava();
    let labels: Vec<ScoreDistribution> = (1..=config.levels)
        .map(|l| {
            let t = MomentTarget::new(
                level_mean(l, config.levels),
                level_std(l, config.levels),
                scale.clone(),
            );
            fit_maxent_default(&t).map(|s| s.dist)
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.n_base * config.levels);
    for b in 0..config.n_base {
        let base = base_image(&mut rng, config.size, config.channels);
        let kind = if rng.random::<bool>() {
            DistortionKind::Noise
        } else {
            DistortionKind::Blur
        };
        for level in 1..=config.levels {
            out.push(DatasetRecord {
                id: format!("synth_{b:04}_l{level}"),
                image: ImageRef::Embedded(distort(&base, kind, level, config.levels, &mut rng)),
                gt: labels[level - 1].clone(),
                source: SourceTag::Synthetic,
                level: Some(level),
            });
        }
    }
    Ok(out)
}

/// Writes synthetic (or any embedded-image) records as `<id>.ppm`/`.pgm`
/// images plus a MOS listing `listing_name` in `dir`. Returns the listing
/// path.
pub fn write_dataset(
    records: &[DatasetRecord],
    dir: impl AsRef<Path>,
    listing_name: &str,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut listing = String::from("# id mean std\n");
    for r in records {
        let img = r.load_image()?;
        let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
        img.save(dir.join(format!("{}.{ext}", r.id)))?;
        listing.push_str(&format!("{} {} {}\n", r.id, r.gt.mean(), r.gt.std_dev()));
    }
    let path = dir.join(listing_name);
    fs::write(&path, listing).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
