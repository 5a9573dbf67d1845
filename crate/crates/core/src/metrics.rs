//! Evaluation metrics: Pearson and Spearman correlation, two-class accuracy
//! at a cutoff score, and mean EMD between predicted and ground-truth
//! distributions.

use serde::Serialize;

use crate::dist::{emd, ScoreDistribution};
use crate::error::{Error, Result};

/// Cutoff used for high/low classification on the 1..10 scale.
pub const DEFAULT_CUTOFF: f64 = 5.0;

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < min_len {
        return Err(Error::Degenerate(format!(
            "need at least {min_len} values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|a| *a == v[0])
}

/// Pearson linear correlation coefficient.
pub fn lcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(x, y)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    // the rounded mean of a constant vector can differ from its values
    if is_constant(x) || is_constant(y) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    // one square root of the product is exact when x and y coincide
    let denom = match (sxx * syy).sqrt() {
        d if d.is_finite() && d > 0.0 => d,
        _ => sxx.sqrt() * syy.sqrt(),
    };
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties replaced by the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j share rank (i+1 + j) / 2
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Fraction of items whose prediction and ground truth fall on the same side
/// of `cutoff`. Exactly `cutoff` counts as the low class.
pub fn two_class_accuracy(pred_means: &[f64], gt_means: &[f64], cutoff: f64) -> Result<f64> {
    check_pair(pred_means, gt_means, 1)?;
    let agree = pred_means
        .iter()
        .zip(gt_means)
        .filter(|(p, g)| (**p > cutoff) == (**g > cutoff))
        .count();
    Ok(agree as f64 / pred_means.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy_two_class: f64,
    pub lcc_mean: f64,
    pub srcc_mean: f64,
    pub lcc_std: f64,
    pub srcc_std: f64,
    pub mean_emd_r1: f64,
    pub n_examples: usize,
}

impl EvalReport {
    fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("accuracy_two_class", self.accuracy_two_class),
            ("lcc_mean", self.lcc_mean),
            ("srcc_mean", self.srcc_mean),
            ("lcc_std", self.lcc_std),
            ("srcc_std", self.srcc_std),
            ("mean_emd_r1", self.mean_emd_r1),
        ]
    }

    /// `key = value` lines, six decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            out.push_str(&format!("{k} = {v:.6}\n"));
        }
        out.push_str(&format!("n_examples = {}\n", self.n_examples));
        out
    }

    /// JSON object with fixed key order and six-decimal numbers.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        for (k, v) in self.fields() {
            out.push_str(&format!("  \"{k}\": {},\n", fmt6(v)));
        }
        out.push_str(&format!("  \"n_examples\": {}\n}}\n", self.n_examples));
        out
    }
}

fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "null".into()
    }
}

/// Undefined correlations (a constant side, a single example) become NaN so
/// the remaining fields are still reported.
fn defined(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::Degenerate(_)) => Ok(f64::NAN),
        r => r,
    }
}

/// Full report over paired predicted / ground-truth distributions.
pub fn evaluate(
    pred: &[ScoreDistribution],
    gt: &[ScoreDistribution],
    cutoff: f64,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Degenerate("no examples".into()));
    }
    let mut total_emd = 0.0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        total_emd += emd(p, g, 1.0).map_err(|e| Error::AtExample {
            index: i,
            source: Box::new(e),
        })?;
    }
    let pm: Vec<f64> = pred.iter().map(ScoreDistribution::mean).collect();
    let gm: Vec<f64> = gt.iter().map(ScoreDistribution::mean).collect();
    let ps: Vec<f64> = pred.iter().map(ScoreDistribution::std_dev).collect();
    let gs: Vec<f64> = gt.iter().map(ScoreDistribution::std_dev).collect();
    Ok(EvalReport {
        accuracy_two_class: two_class_accuracy(&pm, &gm, cutoff)?,
        lcc_mean: defined(lcc(&pm, &gm))?,
        srcc_mean: defined(srcc(&pm, &gm))?,
        lcc_std: defined(lcc(&ps, &gs))?,
        srcc_std: defined(srcc(&ps, &gs))?,
        mean_emd_r1: total_emd / pred.len() as f64,
        n_examples: pred.len(),
    })
}
