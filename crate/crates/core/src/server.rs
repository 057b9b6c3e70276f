//! Server side of a round: first-neighbour clustering of uploaded
//! prototypes, cluster and mean global prototypes, and sample-count-weighted
//! parameter aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{write_checkpoint, CheckpointError, ParamStore};
use crate::prototypes::PrototypeUpload;
use crate::segnet::Pathway;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("no client uploads")]
    NoClients,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Distance used to find first neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                1.0 - dot / (na * nb)
            }
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

/// Clusters as member-index lists. Members ascend, clusters are ordered by
/// their smallest member.
pub type Partition = Vec<Vec<usize>>;

/// Index of each point's nearest other point; ties go to the lowest index.
/// A lone point is its own neighbour.
pub fn first_neighbours(points: &[Vec<f64>], metric: Metric) -> Vec<usize> {
    (0..points.len())
        .map(|i| {
            let mut best = i;
            let mut best_d = f64::INFINITY;
            for (j, q) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = metric.distance(&points[i], q);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the smaller index as root so roots are stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// First partition of the FINCH hierarchy: connected components of the
/// graph linking `i` and `j` when `j = κ(i)`, `i = κ(j)` or `κ(i) = κ(j)`.
pub fn finch_cluster(points: &[Vec<f64>], metric: Metric) -> Partition {
    let kappa = first_neighbours(points, metric);
    let mut uf = UnionFind::new(points.len());
    // Linking i to κ(i) covers the first two rules; κ(i) = κ(j) puts both
    // in κ(i)'s component through the same edges.
    for (i, &k) in kappa.iter().enumerate() {
        uf.union(i, k);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..points.len() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(i);
    }
    let mut partition: Partition = groups.into_values().collect();
    partition.sort_by_key(|c| c[0]);
    partition
}

/// Successive FINCH partitions of the original points, each level
/// clustering the previous level's cluster means, until a single cluster,
/// no further merging, or `max_levels` partitions.
pub fn finch_hierarchy(points: &[Vec<f64>], metric: Metric, max_levels: usize) -> Vec<Partition> {
    let mut levels: Vec<Partition> = Vec::new();
    if points.is_empty() {
        return levels;
    }
    let mut current: Partition = (0..points.len()).map(|i| vec![i]).collect();
    while levels.len() < max_levels.max(1) {
        let means = cluster_representatives(&current, points);
        let merged = finch_cluster(&means, metric);
        if levels.len() > 0 && merged.len() == current.len() {
            break;
        }
        let mut next: Partition = merged
            .iter()
            .map(|group| {
                let mut members: Vec<usize> = group.iter().flat_map(|&g| current[g].iter().copied()).collect();
                members.sort_unstable();
                members
            })
            .collect();
        next.sort_by_key(|c| c[0]);
        let done = next.len() == 1;
        current = next.clone();
        levels.push(next);
        if done {
            break;
        }
    }
    levels
}

/// Arithmetic mean of each cluster's members.
pub fn cluster_representatives(partition: &Partition, points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    partition
        .iter()
        .map(|members| mean_of(members.iter().map(|&i| points[i].as_slice())))
        .collect()
}

/// Mean over cluster representatives.
pub fn mean_prototype(representatives: &[Vec<f64>]) -> Vec<f64> {
    mean_of(representatives.iter().map(Vec::as_slice))
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    sum.into_iter().map(|s| s / n as f64).collect()
}

/// Per-client aggregation weights `N_m / Σ N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self, ServerError> {
        let total: usize = counts.iter().sum();
        if counts.is_empty() {
            return Err(ServerError::NoClients);
        }
        if total == 0 {
            return Err(ServerError::Aggregation("all sample counts are zero".into()));
        }
        Ok(AggregationWeights(counts.iter().map(|&n| n as f64 / total as f64).collect()))
    }

    /// Explicit weights; must be nonnegative and sum to 1 within 1e-12.
    pub fn new(weights: Vec<f64>) -> Result<Self, ServerError> {
        if weights.is_empty() {
            return Err(ServerError::NoClients);
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(ServerError::Aggregation("weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(ServerError::Aggregation(format!("weights sum to {sum}, not 1")));
        }
        Ok(AggregationWeights(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Weighted parameter average, reduced in client order as
/// `θ₀ + Σ_{k≥1} w_k (θ_k − θ₀)`. Because the weights sum to one this is the
/// weighted sum, and identical client parameters come back bit-for-bit.
pub fn fedavg_aggregate(clients: &[ParamStore], weights: &AggregationWeights) -> Result<ParamStore, ServerError> {
    let w = weights.as_slice();
    let first = clients.first().ok_or(ServerError::NoClients)?;
    if clients.len() != w.len() {
        return Err(ServerError::Aggregation(format!(
            "{} clients but {} weights",
            clients.len(),
            w.len()
        )));
    }
    for (k, c) in clients.iter().enumerate().skip(1) {
        if !c.same_layout(first) {
            return Err(ServerError::Aggregation(format!(
                "client {k} parameter identifiers or shapes differ from client 0"
            )));
        }
    }
    let mut out = first.clone();
    out.zero_grad();
    for (id, p) in out.iter_mut() {
        let base = first.value(id)?.data().to_vec();
        let acc = p.value.data_mut();
        for (k, client) in clients.iter().enumerate().skip(1) {
            let theta = client.value(id)?.data();
            for i in 0..acc.len() {
                acc[i] += w[k] * (theta[i] - base[i]);
            }
        }
    }
    Ok(out)
}

/// Global prototypes of one class and pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalClassPrototypes {
    pub class_id: usize,
    pub pathway: Pathway,
    pub representatives: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Cluster representatives and mean prototypes keyed by (pathway, class).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalPrototypeSet {
    entries: Vec<GlobalClassPrototypes>,
}

impl GlobalPrototypeSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GlobalClassPrototypes] {
        &self.entries
    }

    pub fn get(&self, pathway: Pathway, class_id: usize) -> Option<&GlobalClassPrototypes> {
        self.entries
            .iter()
            .find(|e| e.pathway == pathway && e.class_id == class_id)
    }

    /// Representatives of every other class in the same pathway.
    pub fn negatives(&self, pathway: Pathway, class_id: usize) -> Vec<&[f64]> {
        self.entries
            .iter()
            .filter(|e| e.pathway == pathway && e.class_id != class_id)
            .flat_map(|e| e.representatives.iter().map(Vec::as_slice))
            .collect()
    }

    /// Largest representative norm, the running estimate of the prototype bound.
    pub fn max_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.representatives.iter())
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Clusters uploads per (pathway, class); clients are taken in upload order.
    pub fn from_uploads(uploads: &[PrototypeUpload], metric: Metric) -> Self {
        let mut groups: BTreeMap<(Pathway, usize), Vec<Vec<f64>>> = BTreeMap::new();
        for up in uploads {
            groups.entry((up.pathway, up.class_id)).or_default().push(up.values.clone());
        }
        let entries = groups
            .into_iter()
            .map(|((pathway, class_id), points)| {
                let partition = finch_cluster(&points, metric);
                let representatives = cluster_representatives(&partition, &points);
                let mean = mean_prototype(&representatives);
                GlobalClassPrototypes {
                    class_id,
                    pathway,
                    representatives,
                    mean,
                }
            })
            .collect();
        GlobalPrototypeSet { entries }
    }
}

/// One server step: aggregate parameters and build global prototypes.
pub fn run_server_round(
    uploads: &[PrototypeUpload],
    client_params: &[ParamStore],
    sample_counts: &[usize],
    metric: Metric,
) -> Result<(ParamStore, GlobalPrototypeSet), ServerError> {
    if client_params.is_empty() {
        return Err(ServerError::NoClients);
    }
    let weights = AggregationWeights::from_counts(sample_counts)?;
    let global = fedavg_aggregate(client_params, &weights)?;
    Ok((global, GlobalPrototypeSet::from_uploads(uploads, metric)))
}

/// Writes `global.fbcs` (checkpoint) and `prototypes.json` into `dir`.
pub fn write_broadcast(dir: &Path, params: &ParamStore, prototypes: &GlobalPrototypeSet) -> Result<(), ServerError> {
    fs::create_dir_all(dir)?;
    write_checkpoint(params, io::BufWriter::new(fs::File::create(dir.join("global.fbcs"))?))?;
    let json = serde_json::to_string_pretty(prototypes).map_err(io::Error::other)?;
    fs::write(dir.join("prototypes.json"), json)?;
    Ok(())
}
