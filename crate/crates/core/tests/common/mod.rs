//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nima_core::dist::{squared_emd_loss, BucketScale, Logits, ScoreDistribution};
use nima_core::image::ImageTensor;
use nima_core::model::{backward, forward_stats, ModelParams};
use nima_core::tuner::Scorer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random distribution with a random subset of empty buckets.
pub fn random_dist(rng: &mut ChaCha8Rng, scale: &BucketScale) -> ScoreDistribution {
    loop {
        let w: Vec<f64> = (0..scale.len())
            .map(|_| {
                if rng.random::<f64>() < 0.25 {
                    0.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        if w.iter().sum::<f64>() > 0.0 {
            return ScoreDistribution::from_weights(scale.clone(), w).unwrap();
        }
    }
}

/// Unnormalized 1-D earth mover's distance with unit spacing, by moving mass
/// from the leftmost remaining supply to the leftmost remaining demand.
pub fn greedy_transport(p: &[f64], q: &[f64]) -> f64 {
    let mut supply = p.to_vec();
    let mut demand = q.to_vec();
    let (mut i, mut j) = (0, 0);
    let mut cost = 0.0;
    while i < supply.len() && j < demand.len() {
        if supply[i] <= 0.0 {
            i += 1;
            continue;
        }
        if demand[j] <= 0.0 {
            j += 1;
            continue;
        }
        let moved = supply[i].min(demand[j]);
        cost += moved * (i as f64 - j as f64).abs();
        supply[i] -= moved;
        demand[j] -= moved;
    }
    cost
}

/// Pearson correlation from raw sums; None when either side is constant.
pub fn pearson_brute(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return None;
    }
    Some((n * sxy - sx * sy) / (vx * vy).sqrt())
}

/// Rank = count of smaller values + half the count of equal values
/// (including itself) + 1/2.
pub fn ranks_brute(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let less = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_brute(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_brute(&ranks_brute(x), &ranks_brute(y))
}

/// Central differences of the squared-EMD loss with respect to the logits.
pub fn fd_logit_grad(p: &ScoreDistribution, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|k| {
            let mut up = z.to_vec();
            let mut dn = z.to_vec();
            up[k] += h;
            dn[k] -= h;
            (squared_emd_loss(p, &Logits(up)).unwrap() - squared_emd_loss(p, &Logits(dn)).unwrap())
                / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn model_loss(params: &ModelParams, stats: &[f64], gt: &ScoreDistribution) -> f64 {
    let (z, _) = forward_stats(stats, params, None).unwrap();
    squared_emd_loss(gt, &z).unwrap()
}

/// Mutable reference to the `index`-th parameter in `Gradients::flatten`
/// order (per layer: weights, then bias).
pub fn param_mut(params: &mut ModelParams, mut index: usize) -> &mut f64 {
    for layer in params.layers_mut() {
        if index < layer.weights.len() {
            return &mut layer.weights[index];
        }
        index -= layer.weights.len();
        if index < layer.bias.len() {
            return &mut layer.bias[index];
        }
        index -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

/// (analytic, finite-difference) gradients over every parameter, dropout
/// off, in `Gradients::flatten` order.
pub fn model_gradients(
    params: &ModelParams,
    stats: &[f64],
    gt: &ScoreDistribution,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (_, cache) = forward_stats(stats, params, None).unwrap();
    let analytic = backward(gt, &cache, params).unwrap().flatten();
    let mut work = params.clone();
    let numeric = (0..params.parameter_count())
        .map(|i| {
            let orig = *param_mut(&mut work, i);
            *param_mut(&mut work, i) = orig + h;
            let up = model_loss(&work, stats, gt);
            *param_mut(&mut work, i) = orig - h;
            let dn = model_loss(&work, stats, gt);
            *param_mut(&mut work, i) = orig;
            (up - dn) / (2.0 * h)
        })
        .collect();
    (analytic, numeric)
}

/// Direction in the null space of the (1, s, s²) constraints: moving along
/// it keeps total mass, mean and second moment fixed.
pub fn moment_null_direction(values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = vec![
        vec![1.0; values.len()],
        values.to_vec(),
        values.iter().map(|s| s * s).collect(),
    ];
    let r: Vec<f64> = (0..values.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    // solve (A Aᵀ) c = A r, then d = r − Aᵀ c
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = dot(&rows[i], &rows[j]);
        }
        m[i][3] = dot(&rows[i], &r);
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let c: Vec<f64> = (0..3).map(|i| m[i][3] / m[i][i]).collect();
    (0..values.len())
        .map(|k| r[k] - (0..3).map(|i| c[i] * rows[i][k]).sum::<f64>())
        .collect()
}

/// Negative mean squared error against the clean image at the same window.
pub struct OracleScorer {
    pub clean: ImageTensor,
}

impl Scorer for OracleScorer {
    fn score(&self, crop: &ImageTensor, top: usize, left: usize) -> nima_core::Result<f64> {
        let reference = self.clean.crop(top, left, crop.height(), crop.width())?;
        let sse: f64 = crop
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(-sse / crop.data().len() as f64)
    }
}
