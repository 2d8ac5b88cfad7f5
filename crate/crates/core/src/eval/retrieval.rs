use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Fraction of queries whose top-k holds a strict majority of `y_t`.
    pub success_rate: f64,
    /// Mean fraction of `y_t` items among each query's top-k.
    pub mean_target_fraction: f64,
    pub successes: Vec<bool>,
}

/// Indices of the `k` gallery rows nearest to `query` in squared L2
/// distance (summed in `f64`, coordinate order), nearest first; ties go to
/// the lower gallery index.
pub fn nearest<T: Scalar>(gallery: &Tensor<T>, query: &[T], k: usize) -> Vec<usize> {
    let d = query.len();
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, row) in gallery.data().chunks(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(query)
            .map(|(&a, &b)| {
                let t = Scalar::to_f64(a) - Scalar::to_f64(b);
                t * t
            })
            .sum();
        if best.len() == k && dist >= best[k - 1].0 {
            continue;
        }
        // Strictly-greater insertion point keeps earlier indices ahead of
        // equal distances.
        let pos = best.partition_point(|&(bd, _)| bd <= dist);
        best.insert(pos, (dist, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Label most frequent among `labels[neighbours]`, ties to the lower label.
pub fn majority_label(labels: &[usize], neighbours: &[usize]) -> usize {
    let classes = neighbours.iter().map(|&i| labels[i]).max().unwrap_or(0) + 1;
    let mut counts = alloc::vec![0usize; classes];
    for &i in neighbours {
        counts[labels[i]] += 1;
    }
    let mut best = 0;
    for c in 1..classes {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// Top-k retrieval of each query row against the gallery. A query succeeds
/// when more than `k/2` of its neighbours carry `y_t`.
pub fn retrieval_topk<T: Scalar>(
    gallery: &Tensor<T>,
    gallery_labels: &[usize],
    queries: &Tensor<T>,
    y_t: usize,
    k: usize,
) -> Result<RetrievalResult> {
    if gallery.rank() != 2 || queries.rank() != 2 || gallery.shape()[1] != queries.shape()[1] {
        return Err(shape_err(
            "retrieval_topk",
            format!(
                "gallery {:?} and queries {:?} must be [G,D] and [Q,D]",
                gallery.shape(),
                queries.shape()
            ),
        ));
    }
    if gallery_labels.len() != gallery.shape()[0] {
        return Err(shape_err(
            "retrieval_topk",
            format!("{} labels for {} gallery rows", gallery_labels.len(), gallery.shape()[0]),
        ));
    }
    if k == 0 || k > gallery.shape()[0] {
        return Err(invalid(format!(
            "k = {k} must lie in 1..={} (gallery size)",
            gallery.shape()[0]
        )));
    }
    let d = queries.shape()[1];
    let per_query: Vec<(bool, f64)> = crate::par::map_indexed(queries.shape()[0], |q| {
        let nn = nearest(gallery, &queries.data()[q * d..(q + 1) * d], k);
        let hits = nn.iter().filter(|&&i| gallery_labels[i] == y_t).count();
        (2 * hits > k, hits as f64 / k as f64)
    });
    let q = per_query.len() as f64;
    let successes: Vec<bool> = per_query.iter().map(|p| p.0).collect();
    Ok(RetrievalResult {
        success_rate: successes.iter().filter(|&&s| s).count() as f64 / q,
        mean_target_fraction: super::metrics::order_free_mean(
            per_query.iter().map(|p| p.1).collect(),
        ),
        successes,
    })
}
