//! Point-set kernels used at every pyramid level: farthest point sampling,
//! exact k-nearest neighbors, neighborhood grouping and inverse-distance
//! interpolation.
//!
//! Distances use only the three spatial coordinates; radial velocity and
//! intensity are feature channels, never geometry. All functions are pure and
//! reentrant.

use crate::error::{Result, RvoError};
use crate::geometry::Vec3;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Numerical guard added to distances before inverting them for
/// interpolation weights.
pub const INTERP_EPS: f64 = 1e-8;

/// Point coordinates with the raw 5D channels and a per-point feature matrix.
#[derive(Debug, Clone)]
pub struct FeatureSet<S: Scalar> {
    /// Spatial part of each point, meters.
    pub coords: Vec<Vec3<S>>,
    /// Raw channels per point: x, y, z, relative radial velocity, intensity.
    pub raw5: Vec<[S; 5]>,
    /// Per-point features, `N x C`. `C = 0` is allowed.
    pub features: Tensor<S>,
}

impl<S: Scalar> FeatureSet<S> {
    pub fn from_raw(raw5: Vec<[S; 5]>) -> Self {
        let coords = raw5.iter().map(|p| [p[0], p[1], p[2]]).collect();
        let n = raw5.len();
        FeatureSet {
            coords,
            raw5,
            features: Tensor::zeros(n, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let raw5 = indices.iter().map(|&i| self.raw5[i]).collect();
        let mut features = Tensor::zeros(indices.len(), self.features.cols);
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).copy_from_slice(self.features.row(i));
        }
        FeatureSet {
            coords,
            raw5,
            features,
        }
    }
}

/// K-nearest-neighbor lookup result. `dist` is sorted ascending along k and
/// ties are broken by the lower source index.
#[derive(Debug, Clone)]
pub struct NeighborIndex<S: Scalar> {
    pub idx: Vec<Vec<usize>>,
    pub dist: Vec<Vec<S>>,
}

impl<S: Scalar> NeighborIndex<S> {
    pub fn k(&self) -> usize {
        self.idx.first().map_or(0, |row| row.len())
    }

    /// Neighbor indices flattened row-major, for gather-style tensor ops.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.idx.iter().flatten().copied().collect()
    }
}

fn dist_sq<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling starting from index 0.
///
/// Each successive pick maximizes the minimum distance to the already
/// selected set; ties break toward the lowest index so results are
/// deterministic.
pub fn farthest_point_sample<S: Scalar>(coords: &[Vec3<S>], m: usize) -> Result<Vec<usize>> {
    farthest_point_sample_from(coords, m, 0)
}

/// Farthest point sampling with an explicit first pick.
pub fn farthest_point_sample_from<S: Scalar>(
    coords: &[Vec3<S>],
    m: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let n = coords.len();
    if m < 1 || m > n {
        return Err(RvoError::CountOutOfRange { m, n });
    }
    if start >= n {
        return Err(RvoError::IndexOutOfRange { idx: start, n });
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![S::infinity(); n];
    let mut current = start;
    selected.push(current);
    for _ in 1..m {
        let mut best = 0usize;
        let mut best_dist = S::neg_infinity();
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = dist_sq(&coords[i], &coords[current]);
            if nd < *d {
                *d = nd;
            }
            if *d > best_dist {
                best_dist = *d;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Exact brute-force k-nearest neighbors from each query to the source set.
pub fn knn<S: Scalar>(
    query: &[Vec3<S>],
    source: &[Vec3<S>],
    k: usize,
) -> Result<NeighborIndex<S>> {
    let n = source.len();
    if k > n {
        return Err(RvoError::KTooLarge { k, n });
    }
    let mut idx = Vec::with_capacity(query.len());
    let mut dist = Vec::with_capacity(query.len());
    let mut scratch: Vec<(S, usize)> = Vec::with_capacity(n);
    for q in query {
        scratch.clear();
        scratch.extend(source.iter().enumerate().map(|(i, s)| (dist_sq(q, s), i)));
        // Ties break toward the lower source index.
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        idx.push(scratch[..k].iter().map(|&(_, i)| i).collect());
        dist.push(scratch[..k].iter().map(|&(d, _)| d.sqrt()).collect());
    }
    Ok(NeighborIndex { idx, dist })
}

/// Gather each neighborhood into a `(M*K) x (3 + 2 + C)` matrix: the
/// center-relative offset, the neighbor's velocity and intensity channels,
/// and the neighbor's feature vector. Relative offsets make downstream
/// feature extraction translation-invariant.
pub fn group<S: Scalar>(
    source: &FeatureSet<S>,
    neighbor: &NeighborIndex<S>,
    center_coords: &[Vec3<S>],
) -> Result<Tensor<S>> {
    let k = neighbor.k();
    let c = source.features.cols;
    let m = center_coords.len();
    if neighbor.idx.len() != m {
        return Err(RvoError::shape(format!(
            "neighbor rows {} vs {} centers",
            neighbor.idx.len(),
            m
        )));
    }
    let width = 5 + c;
    let mut out = Tensor::zeros(m * k, width);
    for (g, center) in center_coords.iter().enumerate() {
        for (j, &src) in neighbor.idx[g].iter().enumerate() {
            if src >= source.len() {
                return Err(RvoError::IndexOutOfRange {
                    idx: src,
                    n: source.len(),
                });
            }
            let row = out.row_mut(g * k + j);
            let p = &source.raw5[src];
            row[0] = p[0] - center[0];
            row[1] = p[1] - center[1];
            row[2] = p[2] - center[2];
            row[3] = p[3];
            row[4] = p[4];
            row[5..].copy_from_slice(source.features.row(src));
        }
    }
    Ok(out)
}

/// Inverse-distance weighted interpolation from sparse to dense coordinates
/// over the `k` nearest sparse points. Weights are normalized to sum to one.
pub fn knn_interpolate<S: Scalar>(
    sparse_coords: &[Vec3<S>],
    sparse_values: &Tensor<S>,
    dense_coords: &[Vec3<S>],
    k: usize,
) -> Result<Tensor<S>> {
    let (neighbors, weights) = interpolation_weights(sparse_coords, dense_coords, k)?;
    let d = sparse_values.cols;
    let mut out = Tensor::zeros(dense_coords.len(), d);
    for i in 0..dense_coords.len() {
        let row = out.row_mut(i);
        for (j, &src) in neighbors.idx[i].iter().enumerate() {
            let w = weights[i][j];
            let values = sparse_values.row(src);
            for (o, v) in row.iter_mut().zip(values) {
                *o = *o + w * *v;
            }
        }
    }
    Ok(out)
}

/// Neighbor indices and normalized inverse-distance weights, exposed so the
/// differentiable path can reuse the same weighting.
pub fn interpolation_weights<S: Scalar>(
    sparse_coords: &[Vec3<S>],
    dense_coords: &[Vec3<S>],
    k: usize,
) -> Result<(NeighborIndex<S>, Vec<Vec<S>>)> {
    let neighbors = knn(dense_coords, sparse_coords, k)?;
    let eps = S::from_f64(INTERP_EPS);
    let weights = neighbors
        .dist
        .iter()
        .map(|row| {
            let inv: Vec<S> = row.iter().map(|&d| S::one() / (d + eps)).collect();
            let total: S = inv.iter().fold(S::zero(), |a, &b| a + b);
            inv.into_iter().map(|w| w / total).collect()
        })
        .collect();
    Ok((neighbors, weights))
}
