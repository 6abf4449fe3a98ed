//! Capacity-constrained k-means over the columns of the first FFN weight.

use rand::Rng;

use super::{bank::normalize_columns, ExpertBank, RouterConfig};
use crate::error::{Error, Result};
use crate::matcore::{seeded_rng, DenseMatrix};

const MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding over `points`.
fn init_centers(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Assigns every point to a center with at most `cap` points per center,
/// greedily by ascending distance (ties by point, then center index).
fn balanced_assign(points: &[Vec<f64>], centers: &[Vec<f64>], cap: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(points.len() * centers.len());
    for (i, p) in points.iter().enumerate() {
        for (c, ctr) in centers.iter().enumerate() {
            pairs.push((sq_dist(p, ctr), i, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assign = vec![usize::MAX; points.len()];
    let mut load = vec![0usize; centers.len()];
    let mut left = points.len();
    for (_, i, c) in pairs {
        if assign[i] == usize::MAX && load[c] < cap {
            assign[i] = c;
            load[c] += 1;
            left -= 1;
            if left == 0 {
                break;
            }
        }
    }
    assign
}

fn centroids(points: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= (*n).max(1) as f64;
        }
    }
    sums
}

/// Clusters the `d_ffn` columns of `w1` (`d_model × d_ffn`) into
/// `cfg.num_experts` equal-size experts by L2 distance.
///
/// Capacity-constrained Lloyd iterations from a seeded k-means++ start;
/// deterministic for a given seed. Expert means are the unit-normalized
/// centroids.
pub fn cluster_columns(w1: &DenseMatrix, cfg: &RouterConfig, seed: u64) -> Result<ExpertBank> {
    let (e, d_ffn) = (cfg.num_experts, w1.cols());
    if e == 0 {
        return Err(Error::InvalidParams("num_experts must be at least 1".into()));
    }
    if d_ffn % e != 0 {
        return Err(Error::NotDivisible {
            what: "d_ffn",
            value: d_ffn,
            by: e,
        });
    }
    let cap = d_ffn / e;
    if cap % 4 != 0 {
        return Err(Error::InvalidParams(format!(
            "each expert would own {cap} columns; need a multiple of 4"
        )));
    }
    let points: Vec<Vec<f64>> = (0..d_ffn)
        .map(|c| (0..w1.rows()).map(|r| w1.get(r, c)).collect())
        .collect();

    let mut centers = init_centers(&points, e, seed);
    let mut assign = balanced_assign(&points, &centers, cap);
    for _ in 0..MAX_ITERS {
        centers = centroids(&points, &assign, e);
        let next = balanced_assign(&points, &centers, cap);
        if next == assign {
            break;
        }
        assign = next;
    }
    let centers = centroids(&points, &assign, e);

    let mut sets = vec![Vec::with_capacity(cap); e];
    for (col, &c) in assign.iter().enumerate() {
        sets[c].push(col);
    }
    let means = DenseMatrix::from_fn(w1.rows(), e, |r, c| centers[c][r]);
    ExpertBank::new(normalize_columns(&means), sets)
}
