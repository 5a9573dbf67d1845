//! `nima` command-line front end.
//!
//! Every subcommand resolves its options from built-in defaults, then an
//! optional `--config` file of flat `key = value` lines, then flags, and
//! echoes the resolved set as `# key = value` header lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::data::{self, DatasetRecord, MosRescale, Row, SplitSpec, SynthConfig};
use crate::dist::{BucketScale, ScoreDistribution};
use crate::error::{Error, ErrorCategory, Result};
use crate::image::ImageTensor;
use crate::maxent::{fit_maxent_default, MomentTarget};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{predict, Checkpoint, LossKind, ModelParams, TrainConfig};
use crate::tuner::{add_awgn, tune, Operator, OperatorGrid, TuneProtocol};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => EXIT_USAGE,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Numerical => EXIT_NUMERICAL,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nima",
    version,
    about = "Image quality assessment with predicted score distributions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a listing; writes a checkpoint and `<out>.trace.csv`.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or precomputed predictions) on a listing.
    Eval(EvalArgs),
    /// Predict the score distribution of each image.
    Score(ImageArgs),
    /// Order images by predicted mean score, highest first.
    Rank(ImageArgs),
    /// Fit maximum-entropy distributions to mean/std pairs.
    FitDist(FitArgs),
    /// Grid-search an enhancement operator against a model's score.
    Tune(TuneArgs),
    /// Train on each TRAIN listing and test on each paired TEST listing.
    CrossEval(CrossArgs),
    /// Write a synthetic distortion dataset.
    GenSynth(SynthArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rating scale: ava (1..10) or tid (0..9).
    #[arg(long)]
    scale: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    resize_to: Option<usize>,
    #[arg(long)]
    crop_to: Option<usize>,
    #[arg(long)]
    hflip: Option<bool>,
    /// Hidden layer widths, comma separated (`none` for a head-only model).
    #[arg(long)]
    hidden: Option<String>,
    /// squared_emd or cross_entropy.
    #[arg(long)]
    loss: Option<String>,
    /// Fraction of the listing held out for testing (0 trains on everything).
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    /// Counts or MOS listing.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Counts listing of predicted distributions, used instead of a model.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Evaluate only the held-out side of a seeded split.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    cutoff: Option<f64>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImageArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// File of image paths, one per line, relative to the file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// MOS listing (`id mean std` rows).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Raw MOS range `lo,hi` mapped onto the scale.
    #[arg(long)]
    rescale: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `MEAN,STD` pairs.
    pairs: Vec<String>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    /// Input image (PPM/PGM).
    #[arg(long, alias = "image")]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// denoise or tone.
    #[arg(long)]
    operator: Option<String>,
    /// `default` or `name=v1,v2;name=start:stop:step;...`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    n_crops: Option<usize>,
    /// Crop side in pixels; defaults to the model's input crop.
    #[arg(long)]
    crop_size: Option<usize>,
    /// AWGN std (8-bit units) added to the input before tuning.
    #[arg(long)]
    noise: Option<f64>,
    /// Writes the best-scoring output image here.
    #[arg(long)]
    save_best: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    cutoff: Option<f64>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `TRAIN=TEST` listing pairs.
    #[arg(required = true)]
    pairs: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_base: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolved options in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    entries: Vec<(&'static str, Option<String>)>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path_opt(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

impl Settings {
    /// `spec` lists every accepted key with its default; `flags` holds the
    /// values given on the command line.
    pub fn resolve(
        spec: Vec<(&'static str, Option<String>)>,
        config: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
    ) -> Result<Self> {
        let mut entries = spec;
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut seen = Vec::new();
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let where_ = format!("{}:{}", path.display(), i + 1);
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{where_}: expected `key = value`")))?;
                let (k, v) = (k.trim(), v.trim());
                let slot = entries
                    .iter_mut()
                    .find(|(name, _)| *name == k)
                    .ok_or_else(|| usage(format!("{where_}: unknown key {k:?}")))?;
                if seen.contains(&slot.0) {
                    return Err(usage(format!("{where_}: duplicate key {k:?}")));
                }
                seen.push(slot.0);
                slot.1 = Some(v.to_string());
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                let slot = entries
                    .iter_mut()
                    .find(|(name, _)| *name == k)
                    .expect("flag keys are declared");
                slot.1 = Some(v);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.as_deref())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            usage(format!(
                "missing required option --{}",
                key.replace('_', "-")
            ))
        })
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| usage(format!("bad value {raw:?} for {key}")))
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    /// `# key = value` lines for every set option.
    pub fn echo(&self) -> String {
        self.entries
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| format!("# {k} = {v}\n")))
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v) in &self.entries {
            if let Some(v) = v {
                m.insert((*k).to_string(), Value::String(v.clone()));
            }
        }
        Value::Object(m)
    }
}

fn common_spec() -> Vec<(&'static str, Option<String>)> {
    vec![("seed", Some("0".into())), ("scale", Some("ava".into()))]
}

fn common_flags(c: &Common) -> Vec<(&'static str, Option<String>)> {
    vec![("seed", opt(&c.seed)), ("scale", c.scale.clone())]
}

fn train_spec() -> Vec<(&'static str, Option<String>)> {
    let d = TrainConfig::default();
    let hidden: Vec<String> = d.hidden.iter().map(ToString::to_string).collect();
    vec![
        ("lr_backbone", Some(d.lr_backbone.to_string())),
        ("lr_head", Some(d.lr_head.to_string())),
        ("momentum", Some(d.momentum.to_string())),
        ("dropout", Some(d.dropout_rate.to_string())),
        ("decay_factor", Some(d.decay_factor.to_string())),
        ("decay_every", Some(d.decay_every_epochs.to_string())),
        ("epochs", Some(d.epochs.to_string())),
        ("batch_size", Some(d.batch_size.to_string())),
        ("resize_to", Some(d.resize_to.to_string())),
        ("crop_to", Some(d.crop_to.to_string())),
        ("hflip", Some(d.hflip.to_string())),
        ("hidden", Some(hidden.join(","))),
        ("loss", Some(d.loss.name().to_string())),
    ]
}

fn train_flags(t: &TrainFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("lr_backbone", opt(&t.lr_backbone)),
        ("lr_head", opt(&t.lr_head)),
        ("momentum", opt(&t.momentum)),
        ("dropout", opt(&t.dropout)),
        ("decay_factor", opt(&t.decay_factor)),
        ("decay_every", opt(&t.decay_every)),
        ("epochs", opt(&t.epochs)),
        ("batch_size", opt(&t.batch_size)),
        ("resize_to", opt(&t.resize_to)),
        ("crop_to", opt(&t.crop_to)),
        ("hflip", opt(&t.hflip)),
        ("hidden", t.hidden.clone()),
        ("loss", t.loss.clone()),
        ("holdout", opt(&t.holdout)),
    ]
}

pub fn parse_scale(name: &str) -> Result<BucketScale> {
    match name {
        "ava" => Ok(BucketScale::ava()),
        "tid" => Ok(BucketScale::tid()),
        other => Err(usage(format!(
            "unknown scale {other:?} (expected ava or tid)"
        ))),
    }
}

fn parse_hidden(raw: &str) -> Result<Vec<usize>> {
    let raw = raw.trim();
    if raw.is_empty() || raw == "none" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| usage(format!("bad hidden width {w:?}")))
        })
        .collect()
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        lr_backbone: s.parse("lr_backbone")?,
        lr_head: s.parse("lr_head")?,
        momentum: s.parse("momentum")?,
        dropout_rate: s.parse("dropout")?,
        decay_factor: s.parse("decay_factor")?,
        decay_every_epochs: s.parse("decay_every")?,
        epochs: s.parse("epochs")?,
        batch_size: s.parse("batch_size")?,
        resize_to: s.parse("resize_to")?,
        crop_to: s.parse("crop_to")?,
        hflip: s.parse("hflip")?,
        seed: s.parse("seed")?,
        hidden: parse_hidden(s.require("hidden")?)?,
        loss: s
            .require("loss")?
            .parse::<LossKind>()
            .map_err(|e| usage(e.to_string()))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Keeps the held-out side of a seeded split when `holdout > 0`, otherwise
/// everything; `train_side` selects the complement instead.
fn holdout_side<T: Clone>(
    records: Vec<T>,
    holdout: f64,
    seed: u64,
    train_side: bool,
) -> Result<Vec<T>> {
    if holdout == 0.0 {
        return Ok(records);
    }
    let (train, test) = data::split(
        &records,
        SplitSpec {
            test_fraction: holdout,
            seed,
        },
    )?;
    Ok(if train_side { train } else { test })
}

fn predict_all(images: &[ImageTensor], params: &ModelParams) -> Result<Vec<ScoreDistribution>> {
    images.par_iter().map(|img| predict(img, params)).collect()
}

fn load_images(records: &[DatasetRecord]) -> Result<Vec<ImageTensor>> {
    records.par_iter().map(DatasetRecord::load_image).collect()
}

/// Indices ordered by descending value; equal values keep input order.
pub fn rank_order(means: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
    order
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn trace_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace.csv");
    PathBuf::from(s)
}

fn cmd_train(a: &TrainArgs) -> Result<String> {
    let mut spec = common_spec();
    spec.extend(train_spec());
    spec.extend([("holdout", Some("0".into())), ("data", None), ("out", None)]);
    let mut flags = common_flags(&a.common);
    flags.extend(train_flags(&a.train));
    flags.extend([("data", path_opt(&a.data)), ("out", path_opt(&a.out))]);
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;

    let cfg = train_config(&s)?;
    let scale = parse_scale(s.require("scale")?)?;
    let holdout: f64 = s.parse("holdout")?;
    let data_path = PathBuf::from(s.require("data")?);
    let out = PathBuf::from(s.require("out")?);

    let records = data::load_listing(&data_path, &scale, None, None)?;
    let records = holdout_side(records, holdout, cfg.seed, true)?;
    let images = load_images(&records)?;
    let (params, trace) = crate::model::train_on_images(&records, &images, &cfg)?;

    let echo = format!(
        "{}\nholdout = {holdout}\nscale = {}",
        cfg.echo(),
        s.require("scale")?
    );
    Checkpoint {
        params: params.clone(),
        config_echo: echo,
    }
    .save(&out)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    let tpath = trace_path(&out);
    write_file(&tpath, &csv)?;

    let mut text = s.echo();
    text.push_str(&format!("examples = {}\n", records.len()));
    text.push_str(&format!("parameters = {}\n", params.parameter_count()));
    if let Some(last) = trace.last() {
        text.push_str(&format!("final_loss = {last:.6}\n"));
    }
    text.push_str(&format!(
        "checkpoint = {}\ntrace = {}\n",
        out.display(),
        tpath.display()
    ));
    Ok(text)
}

fn read_predictions(
    path: &Path,
    scale: &BucketScale,
    gt: &[Row<ScoreDistribution>],
) -> Result<Vec<ScoreDistribution>> {
    let rows = data::read_counts_file(path, scale)?;
    gt.iter()
        .map(|r| {
            rows.iter()
                .find(|row| row.id == r.id)
                .map(|row| row.value.clone())
                .ok_or_else(|| Error::MissingId {
                    path: path.display().to_string(),
                    id: r.id.clone(),
                })
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<(String, Option<(PathBuf, String)>)> {
    let mut spec = common_spec();
    spec.extend([
        ("holdout", Some("0".into())),
        ("cutoff", Some(crate::metrics::DEFAULT_CUTOFF.to_string())),
        ("data", None),
        ("model", None),
        ("pred", None),
        ("out", None),
    ]);
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("holdout", opt(&a.holdout)),
        ("cutoff", opt(&a.cutoff)),
        ("data", path_opt(&a.data)),
        ("model", path_opt(&a.model)),
        ("pred", path_opt(&a.pred)),
        ("out", path_opt(&a.out)),
    ]);
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;
    let scale = parse_scale(s.require("scale")?)?;
    let (holdout, seed) = (s.parse("holdout")?, s.parse("seed")?);
    let (pred, gt) = match (s.get("model"), s.get("pred")) {
        (Some(_), Some(_)) => return Err(usage("give either --model or --pred, not both")),
        (None, None) => return Err(usage("missing required option --model (or --pred)")),
        (Some(m), None) => {
            let records = data::load_listing(s.require("data")?, &scale, None, None)?;
            let records = holdout_side(records, holdout, seed, false)?;
            let ckpt = Checkpoint::load(m)?;
            let pred = predict_all(&load_images(&records)?, &ckpt.params)?;
            (pred, records.into_iter().map(|r| r.gt).collect())
        }
        (None, Some(p)) => {
            let rows = data::load_ground_truth(s.require("data")?, &scale, None)?;
            let rows = holdout_side(rows, holdout, seed, false)?;
            let pred = read_predictions(Path::new(p), &scale, &rows)?;
            (pred, rows.into_iter().map(|r| r.value).collect::<Vec<_>>())
        }
    };
    let report = evaluate(&pred, &gt, s.parse("cutoff")?)?;
    let text = s.echo() + &report.to_text();
    let json = s
        .get("out")
        .map(|o| (PathBuf::from(o), report_json(&s, &report)));
    Ok((text, json))
}

fn report_json(s: &Settings, report: &EvalReport) -> String {
    let report: Value = serde_json::from_str(&report.to_json()).expect("report JSON");
    serde_json::to_string_pretty(&json!({ "config": s.to_json(), "report": report })).expect("json")
        + "\n"
}

fn image_list(a: &ImageArgs) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    if let Some(list) = &a.data {
        let text = fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        let dir = list.parent().unwrap_or_else(|| Path::new("."));
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            paths.push(dir.join(line));
        }
    }
    paths.extend(a.images.iter().cloned());
    if paths.is_empty() {
        return Err(usage("no images given"));
    }
    Ok(paths)
}

fn score_images(a: &ImageArgs) -> Result<(Settings, Vec<PathBuf>, Vec<ScoreDistribution>)> {
    let mut spec = common_spec();
    spec.extend([("model", None), ("data", None), ("out", None)]);
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("model", path_opt(&a.model)),
        ("data", path_opt(&a.data)),
        ("out", path_opt(&a.out)),
    ]);
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;
    let ckpt = Checkpoint::load(s.require("model")?)?;
    let paths = image_list(a)?;
    let images: Vec<ImageTensor> = paths
        .par_iter()
        .map(ImageTensor::load)
        .collect::<Result<_>>()?;
    let preds = predict_all(&images, &ckpt.params)?;
    Ok((s, paths, preds))
}

fn cmd_score(a: &ImageArgs) -> Result<(String, Option<PathBuf>)> {
    let (s, paths, preds) = score_images(a)?;
    let scale = preds[0].scale();
    let mut text = s.echo();
    text.push_str("image\tmean\tstd\tsummary");
    for v in scale.values() {
        text.push_str(&format!("\tp_{v}"));
    }
    text.push('\n');
    for (p, d) in paths.iter().zip(&preds) {
        let (m, sd) = (d.mean(), d.std_dev());
        text.push_str(&format!(
            "{}\t{m:.6}\t{sd:.6}\t{m:.2} (\u{b1}{sd:.2})",
            p.display()
        ));
        for q in d.mass() {
            text.push_str(&format!("\t{q:.6}"));
        }
        text.push('\n');
    }
    Ok((text, s.get("out").map(PathBuf::from)))
}

fn cmd_rank(a: &ImageArgs) -> Result<(String, Option<PathBuf>)> {
    let (s, paths, preds) = score_images(a)?;
    let means: Vec<f64> = preds.iter().map(ScoreDistribution::mean).collect();
    let mut text = s.echo();
    text.push_str("rank\timage\tmean\n");
    for (r, i) in rank_order(&means).into_iter().enumerate() {
        text.push_str(&format!(
            "{}\t{}\t{:.6}\n",
            r + 1,
            paths[i].display(),
            means[i]
        ));
    }
    Ok((text, s.get("out").map(PathBuf::from)))
}

fn parse_pair(raw: &str) -> Result<(f64, f64)> {
    let (m, s) = raw
        .split_once(',')
        .ok_or_else(|| usage(format!("expected MEAN,STD, got {raw:?}")))?;
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("bad number in {raw:?}")))
    };
    Ok((num(m)?, num(s)?))
}

fn cmd_fit(a: &FitArgs) -> Result<(String, Option<PathBuf>)> {
    let mut spec = common_spec();
    spec.extend([("data", None), ("rescale", None), ("out", None)]);
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("data", path_opt(&a.data)),
        ("rescale", a.rescale.clone()),
        ("out", path_opt(&a.out)),
    ]);
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;
    let scale = parse_scale(s.require("scale")?)?;
    let rescale = s
        .get("rescale")
        .map(|r| parse_pair(r).map(|(lo, hi)| MosRescale { lo, hi }))
        .transpose()?;

    let mut targets: Vec<(String, f64, f64)> = Vec::new();
    if let Some(path) = s.get("data") {
        for row in data::read_mos_file(path, &scale, rescale)? {
            targets.push((row.id, row.value.0, row.value.1));
        }
    }
    for (i, raw) in a.pairs.iter().enumerate() {
        let (m, sd) = parse_pair(raw)?;
        let (m, sd) = rescale.map_or((m, sd), |r| r.apply(&scale, m, sd));
        targets.push((format!("q{}", i + 1), m, sd));
    }
    if targets.is_empty() {
        return Err(usage("no mean/std pairs given"));
    }

    let mut text = s.echo();
    for (i, (id, m, sd)) in targets.iter().enumerate() {
        let sol = fit_maxent_default(&MomentTarget::new(*m, *sd, scale.clone())).map_err(|e| {
            Error::AtExample {
                index: i,
                source: Box::new(e),
            }
        })?;
        text.push_str(&data::format_counts_row(id, &sol.dist));
        text.push('\n');
    }
    Ok((text, s.get("out").map(PathBuf::from)))
}

fn cmd_tune(a: &TuneArgs) -> Result<(String, Option<(PathBuf, String)>)> {
    let mut spec = common_spec();
    spec.extend([
        ("operator", Some("denoise".into())),
        ("grid", Some("default".into())),
        ("n_crops", Some("50".into())),
        ("crop_size", None),
        ("noise", Some("0".into())),
        ("data", None),
        ("model", None),
        ("save_best", None),
        ("out", None),
    ]);
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("operator", a.operator.clone()),
        ("grid", a.grid.clone()),
        ("n_crops", opt(&a.n_crops)),
        ("crop_size", opt(&a.crop_size)),
        ("noise", opt(&a.noise)),
        ("data", path_opt(&a.data)),
        ("model", path_opt(&a.model)),
        ("save_best", path_opt(&a.save_best)),
        ("out", path_opt(&a.out)),
    ]);
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;
    let operator: Operator = s.require("operator")?.parse()?;
    let grid = match s.require("grid")? {
        "default" => OperatorGrid::default_for(operator),
        g => OperatorGrid::parse(operator, g)?,
    };
    let seed: u64 = s.parse("seed")?;
    let ckpt = Checkpoint::load(s.require("model")?)?;
    let crop_size = s
        .parse_opt("crop_size")?
        .unwrap_or(ckpt.params.geometry.crop_to);
    let protocol = TuneProtocol {
        n_crops: s.parse("n_crops")?,
        crop_size,
        seed,
    };

    let img = ImageTensor::load(s.require("data")?)?;
    let img = add_awgn(&img, s.parse("noise")?, seed)?;
    let result = tune(&img, &grid, &protocol, &ckpt.params)?;
    if let Some(p) = s.get("save_best") {
        grid.operator.apply(&img, &result.best_setting)?.save(p)?;
    }
    let text = s.echo() + &result.to_text(&grid);
    let json = s.get("out").map(|o| {
        let doc = json!({
            "config": s.to_json(),
            "result": serde_json::to_value(&result).expect("serializable"),
        });
        (
            PathBuf::from(o),
            serde_json::to_string_pretty(&doc).expect("json") + "\n",
        )
    });
    Ok((text, json))
}

fn cmd_cross(a: &CrossArgs) -> Result<(String, Option<(PathBuf, String)>)> {
    let mut spec = common_spec();
    spec.extend(train_spec());
    spec.extend([
        ("holdout", Some("0.2".into())),
        ("cutoff", Some(crate::metrics::DEFAULT_CUTOFF.to_string())),
        ("out", None),
    ]);
    let mut flags = common_flags(&a.common);
    flags.extend(train_flags(&a.train));
    flags.extend([("cutoff", opt(&a.cutoff)), ("out", path_opt(&a.out))]);
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;
    let cfg = train_config(&s)?;
    let scale = parse_scale(s.require("scale")?)?;
    let holdout: f64 = s.parse("holdout")?;
    let cutoff: f64 = s.parse("cutoff")?;

    let mut pairs = Vec::new();
    for raw in &a.pairs {
        let (tr, te) = raw
            .split_once('=')
            .ok_or_else(|| usage(format!("expected TRAIN=TEST, got {raw:?}")))?;
        pairs.push((tr.to_string(), te.to_string()));
    }
    let mut trains: Vec<String> = Vec::new();
    let mut tests: Vec<String> = Vec::new();
    for (tr, te) in &pairs {
        if !trains.contains(tr) {
            trains.push(tr.clone());
        }
        if !tests.contains(te) {
            tests.push(te.clone());
        }
    }

    let mut models = Vec::new();
    for tr in &trains {
        let recs = holdout_side(
            data::load_listing(tr, &scale, None, None)?,
            holdout,
            cfg.seed,
            true,
        )?;
        let images = load_images(&recs)?;
        models.push(crate::model::train_on_images(&recs, &images, &cfg)?.0);
    }
    let mut test_sets = Vec::new();
    for te in &tests {
        let recs = holdout_side(
            data::load_listing(te, &scale, None, None)?,
            holdout,
            cfg.seed,
            false,
        )?;
        let images = load_images(&recs)?;
        test_sets.push((recs, images));
    }

    let mut cells: Vec<Vec<Option<EvalReport>>> = vec![vec![None; tests.len()]; trains.len()];
    for (tr, te) in &pairs {
        let i = trains.iter().position(|t| t == tr).expect("collected");
        let j = tests.iter().position(|t| t == te).expect("collected");
        let (recs, images) = &test_sets[j];
        let pred = predict_all(images, &models[i])?;
        let gt: Vec<ScoreDistribution> = recs.iter().map(|r| r.gt.clone()).collect();
        cells[i][j] = Some(evaluate(&pred, &gt, cutoff)?);
    }

    let mut text = s.echo();
    let matrix = |name: &str, f: fn(&EvalReport) -> f64| -> (String, Value) {
        let mut t = format!("{name}\ntrain\\test");
        for te in &tests {
            t.push_str(&format!("\t{te}"));
        }
        t.push('\n');
        let mut rows = Vec::new();
        for (i, tr) in trains.iter().enumerate() {
            t.push_str(tr);
            let mut row = Vec::new();
            for cell in &cells[i] {
                match cell {
                    Some(r) => {
                        t.push_str(&format!("\t{:.6}", f(r)));
                        row.push(json_num(f(r)));
                    }
                    None => {
                        t.push_str("\t-");
                        row.push(Value::Null);
                    }
                }
            }
            t.push('\n');
            rows.push(Value::Array(row));
        }
        (t, Value::Array(rows))
    };
    let (lcc_t, lcc_j) = matrix("lcc_mean", |r| r.lcc_mean);
    let (srcc_t, srcc_j) = matrix("srcc_mean", |r| r.srcc_mean);
    text.push_str(&lcc_t);
    text.push_str(&srcc_t);
    let json = s.get("out").map(|o| {
        let doc = json!({
            "config": s.to_json(),
            "train_sets": trains,
            "test_sets": tests,
            "lcc_mean": lcc_j,
            "srcc_mean": srcc_j,
        });
        (
            PathBuf::from(o),
            serde_json::to_string_pretty(&doc).expect("json") + "\n",
        )
    });
    Ok((text, json))
}

fn json_num(v: f64) -> Value {
    if v.is_finite() {
        let rounded: f64 = format!("{v:.6}").parse().expect("formatted float");
        json!(rounded)
    } else {
        Value::Null
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let d = SynthConfig::default();
    let spec = vec![
        ("seed", Some("0".into())),
        ("n_base", Some(d.n_base.to_string())),
        ("levels", Some(d.levels.to_string())),
        ("size", Some(d.size.to_string())),
        ("channels", Some(d.channels.to_string())),
        ("out", None),
    ];
    let flags = vec![
        ("seed", opt(&a.common.seed)),
        ("n_base", opt(&a.n_base)),
        ("levels", opt(&a.levels)),
        ("size", opt(&a.size)),
        ("channels", opt(&a.channels)),
        ("out", path_opt(&a.out)),
    ];
    if a.common.scale.is_some() {
        return Err(usage("gen-synth does not take --scale"));
    }
    let s = Settings::resolve(spec, a.common.config.as_deref(), flags)?;
    let cfg = SynthConfig {
        n_base: s.parse("n_base")?,
        levels: s.parse("levels")?,
        seed: s.parse("seed")?,
        size: s.parse("size")?,
        channels: s.parse("channels")?,
    };
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(usage("channels must be 1 or 3"));
    }
    let records = data::generate_synthetic(&cfg)?;
    let listing = data::write_dataset(&records, s.require("out")?, "synth.txt")?;
    let mut levels = String::from("id\tlevel\n");
    for r in &records {
        levels.push_str(&format!("{}\t{}\n", r.id, r.level.unwrap_or(0)));
    }
    let lpath = listing.with_file_name("levels.tsv");
    write_file(&lpath, &levels)?;
    Ok(format!(
        "{}records = {}\nlisting = {}\nlevels = {}\n",
        s.echo(),
        records.len(),
        listing.display(),
        lpath.display()
    ))
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let (text, file) = match &cli.command {
        Command::Train(a) => (cmd_train(a)?, None),
        Command::Eval(a) => cmd_eval(a)?,
        Command::Tune(a) => cmd_tune(a)?,
        Command::CrossEval(a) => cmd_cross(a)?,
        Command::GenSynth(a) => (cmd_synth(a)?, None),
        Command::Score(a) => same_text(cmd_score(a)?)?,
        Command::Rank(a) => same_text(cmd_rank(a)?)?,
        Command::FitDist(a) => same_text(cmd_fit(a)?)?,
    };
    if let Some((path, body)) = file {
        write_file(&path, &body)?;
    }
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Text that goes both to stdout and, when requested, to `--out`.
fn same_text(
    (text, out): (String, Option<PathBuf>),
) -> Result<(String, Option<(PathBuf, String)>)> {
    Ok((text.clone(), out.map(|p| (p, text))))
}

/// Runs the CLI on `args` (including the program name), writing normal
/// output to `stdout` and the error line to `stderr`. Returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = write!(stderr, "{e}");
                return EXIT_USAGE;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            let _ = writeln!(stderr, "error[usage]: {first}");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let category = e.category();
            let detail = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error[{}]: {detail}", category.as_str());
            exit_code(category)
        }
    }
}

pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
