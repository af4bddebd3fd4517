#![allow(dead_code)]

use mcr_stitch::aggregation::{Centricity, PseudoQuadruple};
use mcr_stitch::store::l2_normalize;
use mcr_stitch::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| r.sample::<f32, _>(StandardNormal)).collect())
        .collect()
}

pub fn unit_matrix(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    l2_normalize(&EmbeddingMatrix::from_rows(&gaussian_rows(r, rows, dim)).unwrap()).unwrap()
}

pub fn unit_vec(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn row64(m: &EmbeddingMatrix, i: usize) -> Vec<f64> {
    m.row(i).iter().map(|&v| v as f64).collect()
}

/// Random quadruples of independent unit vectors.
pub fn toy_quads(n: usize, d: usize, seed: u64) -> Vec<PseudoQuadruple> {
    let mut r = rng(seed);
    let v = |r: &mut ChaCha8Rng| unit_vec(r, d).into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    (0..n)
        .map(|_| PseudoQuadruple {
            leaf_nonoverlap: v(&mut r),
            leaf_overlap: v(&mut r),
            base_overlap: v(&mut r),
            base_nonoverlap: v(&mut r),
            centricity: Centricity::Overlap,
        })
        .collect()
}

/// Mean average precision and recall@k by fully sorting each query's
/// gallery scores (stable sort, so equal scores keep index order).
pub fn sort_oracle(sims: &[Vec<f64>], gt: &[usize], ks: &[usize]) -> (f64, Vec<f64>) {
    let mut ranks = Vec::new();
    for (q, row) in sims.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        ranks.push(order.iter().position(|&j| j == gt[q]).unwrap() + 1);
    }
    let n = ranks.len() as f64;
    let map = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let recalls = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    (map, recalls)
}
