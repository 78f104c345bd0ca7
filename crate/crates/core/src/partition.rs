//! Assignment of training points to experts.
//!
//! Three schemes are provided: a random partition, a disjoint partition from
//! k-means clustering, and the hybrid used by GRBCM where subset 0 is a
//! random communication subset and the rest is clustered.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Random,
    Disjoint,
    GrbcmHybrid,
}

/// `M` disjoint index subsets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub kind: PartitionKind,
    pub seed: u64,
    /// Index of the communication subset, if one is designated.
    pub communication_index: Option<usize>,
    pub subsets: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn n_points(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }

    /// Marks `index` as the communication subset.
    pub fn with_communication(mut self, index: usize) -> Result<Self> {
        if index >= self.subsets.len() {
            return Err(Error::InvalidPartition(format!(
                "communication index {index} out of range for {} subsets",
                self.subsets.len()
            )));
        }
        self.communication_index = Some(index);
        Ok(self)
    }

    /// Checks that the subsets are nonempty, pairwise disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (s, subset) in self.subsets.iter().enumerate() {
            if subset.is_empty() {
                return Err(Error::InvalidPartition(format!("subset {s} is empty")));
            }
            for &i in subset {
                if i >= n {
                    return Err(Error::InvalidPartition(format!("index {i} out of range 0..{n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidPartition(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!("index {missing} not assigned")));
        }
        if let Some(c) = self.communication_index {
            if c >= self.subsets.len() {
                return Err(Error::InvalidPartition(format!("communication index {c} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn check_counts(n: usize, m: usize, min_m: usize) -> Result<()> {
    if m < min_m || m > n {
        return Err(Error::InvalidPartition(format!(
            "need {min_m} <= M <= n, got M = {m}, n = {n}"
        )));
    }
    Ok(())
}

/// Target sizes `⌈n/M⌉` for the first `n mod M` subsets and `⌊n/M⌋` for the rest.
fn near_equal_sizes(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| n / m + usize::from(i < n % m)).collect()
}

/// Uniformly random assignment into `M` near-equal subsets.
pub fn random_partition(n: usize, m: usize, seed: u64) -> Result<Partition> {
    check_counts(n, m, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut subsets = Vec::with_capacity(m);
    let mut start = 0;
    for size in near_equal_sizes(n, m) {
        let mut block = perm[start..start + size].to_vec();
        block.sort_unstable();
        subsets.push(block);
        start += size;
    }
    Ok(Partition {
        kind: PartitionKind::Random,
        seed,
        communication_index: None,
        subsets,
    })
}

/// Options for the k-means based partitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Lloyd iterations stop once no centroid moves more than this.
    pub tolerance: f64,
    /// Rebalance cluster sizes to within one of `n / M`.
    pub rebalance: bool,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-8,
            rebalance: true,
        }
    }
}

/// Row-major copy of the selected rows for cache-friendly distance loops.
struct Points {
    data: Vec<f64>,
    d: usize,
}

impl Points {
    fn from_rows(x: &DMatrix<f64>, rows: &[usize]) -> Self {
        let d = x.ncols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend(x.row(r).iter());
        }
        Self { data, d }
    }

    fn len(&self) -> usize {
        self.data.len() / self.d.max(1)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Clustering {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

fn kmeans_pp_seed(points: &Points, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(points.row(first).to_vec());
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in dist.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centroid; pick any unchosen one
            let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = points.row(next).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn update_centroids(points: &Points, labels: &[usize], m: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; points.d]; m];
    let mut counts = vec![0usize; m];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its centroid in the largest cluster into each empty cluster.
fn repair_empty(points: &Points, labels: &mut [usize], centroids: &mut [Vec<f64>], counts: &mut [usize]) {
    while let Some(empty) = counts.iter().position(|c| *c == 0) {
        let largest = (0..counts.len())
            .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
            .expect("at least one cluster");
        let far = (0..labels.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(points.row(a), &centroids[largest])
                    .total_cmp(&sq_dist(points.row(b), &centroids[largest]))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster is nonempty");
        labels[far] = empty;
        counts[largest] -= 1;
        counts[empty] = 1;
        centroids[empty] = points.row(far).to_vec();
    }
}

fn kmeans(points: &Points, m: usize, seed: u64, opts: &KMeansOptions) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(points, m, &mut rng);
    let n = points.len();
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids)).collect();
    for _ in 0..opts.max_iter {
        let (mut next, mut counts) = update_centroids(points, &labels, m);
        for (j, c) in counts.iter().enumerate() {
            if *c == 0 {
                next[j] = centroids[j].clone();
            }
        }
        repair_empty(points, &mut labels, &mut next, &mut counts);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        for (i, l) in labels.iter_mut().enumerate() {
            *l = nearest(points.row(i), &centroids);
        }
        if shift < opts.tolerance {
            break;
        }
    }
    let (_, mut counts) = update_centroids(points, &labels, m);
    repair_empty(points, &mut labels, &mut centroids, &mut counts);
    Clustering { labels, centroids }
}

/// Greedy size repair: each undersized cluster pulls in the points from
/// oversized clusters that lie nearest to its centroid.
fn rebalance(points: &Points, clustering: &mut Clustering) {
    let m = clustering.centroids.len();
    let n = points.len();
    let mut counts = vec![0usize; m];
    for &l in &clustering.labels {
        counts[l] += 1;
    }
    // largest clusters keep the larger targets
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(counts[j]), j));
    let sizes = near_equal_sizes(n, m);
    let mut target = vec![0usize; m];
    for (rank, &j) in order.iter().enumerate() {
        target[j] = sizes[rank];
    }

    for receiver in 0..m {
        if counts[receiver] >= target[receiver] {
            continue;
        }
        let centroid = &clustering.centroids[receiver];
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&i| {
                let l = clustering.labels[i];
                l != receiver && counts[l] > target[l]
            })
            .map(|i| (sq_dist(points.row(i), centroid), i))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, i) in candidates {
            if counts[receiver] >= target[receiver] {
                break;
            }
            let donor = clustering.labels[i];
            if counts[donor] > target[donor] {
                counts[donor] -= 1;
                counts[receiver] += 1;
                clustering.labels[i] = receiver;
            }
        }
    }
}

fn cluster_rows(x: &DMatrix<f64>, rows: &[usize], m: usize, seed: u64, opts: &KMeansOptions) -> Vec<Vec<usize>> {
    let points = Points::from_rows(x, rows);
    let mut clustering = kmeans(&points, m, seed, opts);
    if opts.rebalance {
        rebalance(&points, &mut clustering);
    }
    let mut subsets = vec![Vec::new(); m];
    for (local, &label) in clustering.labels.iter().enumerate() {
        subsets[label].push(rows[local]);
    }
    for s in &mut subsets {
        s.sort_unstable();
    }
    subsets
}

/// k-means partition of the rows of `x` into `M` clusters, rebalanced to near-equal sizes.
pub fn disjoint_partition(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Partition> {
    disjoint_partition_with(x, m, seed, &KMeansOptions::default())
}

pub fn disjoint_partition_with(x: &DMatrix<f64>, m: usize, seed: u64, opts: &KMeansOptions) -> Result<Partition> {
    let n = x.nrows();
    check_counts(n, m, 1)?;
    let rows: Vec<usize> = (0..n).collect();
    Ok(Partition {
        kind: PartitionKind::Disjoint,
        seed,
        communication_index: None,
        subsets: cluster_rows(x, &rows, m, seed, opts),
    })
}

/// Random communication subset of `⌊n/M⌋` points as subset 0, k-means on the remainder.
pub fn grbcm_partition(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<Partition> {
    grbcm_partition_with(x, m, seed, &KMeansOptions::default())
}

pub fn grbcm_partition_with(x: &DMatrix<f64>, m: usize, seed: u64, opts: &KMeansOptions) -> Result<Partition> {
    let n = x.nrows();
    check_counts(n, m, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let n_comm = n / m;
    let mut comm = perm[..n_comm].to_vec();
    comm.sort_unstable();
    let mut rest = perm[n_comm..].to_vec();
    rest.sort_unstable();
    let cluster_seed = rng.random::<u64>();
    let mut subsets = Vec::with_capacity(m);
    subsets.push(comm);
    subsets.extend(cluster_rows(x, &rest, m - 1, cluster_seed, opts));
    Ok(Partition {
        kind: PartitionKind::GrbcmHybrid,
        seed,
        communication_index: Some(0),
        subsets,
    })
}
