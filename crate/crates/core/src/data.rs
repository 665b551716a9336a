//! Datasets, the three initial-distribution partitioners, and label metrics.

use std::io::{Read, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::DataBatch;
use crate::rng::{stream, Domain};

/// `S × d` inputs with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::contract("inputs length is not samples x input_dim"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            inputs: Vec::new(),
            labels: Vec::new(),
            input_dim,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn full_batch(&self) -> Result<DataBatch<'_>> {
        DataBatch::borrowed(&self.inputs, &self.labels, self.input_dim)
    }

    /// Copy the given rows into an owned batch.
    pub fn gather(&self, indices: &[usize]) -> Result<DataBatch<'static>> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        DataBatch::new(inputs, labels, self.input_dim)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            inputs,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn restrict_to_classes(&self, classes: &[usize]) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&keep)
    }

    /// Indices of each class, in ascending index order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Write as CSV: `d` feature columns `x0..`, then `label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim).map(|k| format!("x{k}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read the CSV layout written by [`write_csv`](Self::write_csv). The class
    /// count defaults to one past the largest label.
    pub fn read_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().next_back() != Some("label") {
            return Err(Error::Parse {
                line: 1,
                message: "last header column must be `label`".into(),
            });
        }
        let d = header.len() - 1;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", d + 1, rec.len()),
                });
            }
            for field in rec.iter().take(d) {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad feature value `{field}`"),
                })?;
                inputs.push(v);
            }
            let label: usize = rec[d].trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad label `{}`", &rec[d]),
            })?;
            labels.push(label);
        }
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        LabeledDataset::new(inputs, labels, d, c)
    }
}

/// Class means for the synthetic blobs: fixed Gaussian draws (independent of
/// the dataset seed) rescaled so the closest pair is exactly `separation` apart.
fn class_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(num_classes as u64, Domain::Dataset, u64::MAX, dim as u64);
    let raw: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut closest = f64::INFINITY;
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            let d: f64 = raw[a].iter().zip(&raw[b]).map(|(x, y)| (x - y).powi(2)).sum();
            closest = closest.min(d.sqrt());
        }
    }
    let scale = separation / closest;
    raw.into_iter()
        .map(|m| m.into_iter().map(|v| v * scale).collect())
        .collect()
}

/// Gaussian blobs: one unit-variance cluster per class, `per_class` samples each.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    generate_synthetic_split(num_classes, dim, per_class, separation, seed, 0)
}

/// Like [`generate_synthetic`] with an independent sample stream per `split`
/// (0 for training, 1 for test); the class means are shared.
pub fn generate_synthetic_split(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
    split: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim < 2 || per_class < 1 || !(separation > 0.0) {
        return Err(Error::contract(
            "generate_synthetic needs C >= 2, d >= 2, per_class >= 1, separation > 0",
        ));
    }
    let means = class_means(num_classes, dim, separation);
    let mut rng = stream(seed, Domain::Dataset, split, 0);
    let mut inputs = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        for _ in 0..per_class {
            for &mu in &means[c] {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(mu + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(inputs, labels, dim, num_classes)
}

/// Disjoint shards of a parent dataset plus, for edge-level plans, each
/// vehicle's initial edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
    pub edge_assignment: Option<Vec<usize>>,
    /// Classes that no shard received.
    pub unassigned_classes: Vec<usize>,
}

impl PartitionPlan {
    pub fn num_vehicles(&self) -> usize {
        self.shards.len()
    }

    pub fn covered(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// `α_m = |D_m| / |D|`
    pub fn alpha(&self) -> Vec<f64> {
        let total = self.covered() as f64;
        self.shards.iter().map(|s| s.len() as f64 / total).collect()
    }
}

/// Split `items` into `parts` runs whose sizes differ by at most one; the
/// first `len % parts` runs are the longer ones.
fn split_even<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Random permutation split into `M` shards.
pub fn partition_iid(dataset: &LabeledDataset, vehicles: usize, seed: u64) -> Result<PartitionPlan> {
    if vehicles == 0 || vehicles > dataset.len() {
        return Err(Error::config(
            "M",
            format!("need 1 <= M <= S, got M = {vehicles}, S = {}", dataset.len()),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream(seed, Domain::Partition, 0, 0));
    Ok(PartitionPlan {
        shards: split_even(&order, vehicles),
        edge_assignment: None,
        unassigned_classes: missing_classes(dataset, &order),
    })
}

fn missing_classes(dataset: &LabeledDataset, used: &[usize]) -> Vec<usize> {
    let mut present = vec![false; dataset.num_classes()];
    for &i in used {
        present[dataset.labels()[i]] = true;
    }
    (0..dataset.num_classes()).filter(|&c| !present[c]).collect()
}

/// Sort by label, cut each class into `M·l/C` chunks, and give each vehicle
/// `l` chunks from `l` distinct classes.
pub fn partition_local_niid(
    dataset: &LabeledDataset,
    vehicles: usize,
    classes_per_vehicle: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let c = dataset.num_classes();
    let l = classes_per_vehicle;
    if vehicles == 0 || l == 0 || l > c {
        return Err(Error::config("l", format!("need M >= 1 and 1 <= l <= C = {c}")));
    }
    if !(vehicles * l).is_multiple_of(c) {
        return Err(Error::config(
            "l",
            format!("M*l must be divisible by C (M = {vehicles}, l = {l}, C = {c})"),
        ));
    }
    let chunks_per_class = vehicles * l / c;
    let mut rng = stream(seed, Domain::Partition, 1, 0);
    // chunks[k] belongs to class k / chunks_per_class
    let mut chunks = Vec::with_capacity(vehicles * l);
    for mut members in dataset.indices_by_class() {
        if members.len() < chunks_per_class {
            return Err(Error::config(
                "l",
                format!("a class has {} samples but needs {chunks_per_class} chunks", members.len()),
            ));
        }
        members.shuffle(&mut rng);
        chunks.extend(split_even(&members, chunks_per_class));
    }
    // Vehicle m takes chunks m, m+M, m+2M, ...: consecutive picks are M ≥ chunks_per_class
    // apart, so they always land in distinct classes.
    let shards: Vec<Vec<usize>> = (0..vehicles)
        .map(|m| (0..l).flat_map(|i| chunks[m + i * vehicles].iter().copied()).collect())
        .collect();
    Ok(PartitionPlan {
        shards,
        edge_assignment: None,
        unassigned_classes: Vec::new(),
    })
}

/// Give edge `n` the classes `[n·l, (n+1)·l)`, then split each edge's pool
/// uniformly over its `M/N` vehicles (vehicle `m` starts on edge `m / (M/N)`).
pub fn partition_edge_niid(
    dataset: &LabeledDataset,
    edges: usize,
    vehicles: usize,
    classes_per_edge: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let c = dataset.num_classes();
    let l = classes_per_edge;
    if edges == 0 || l == 0 {
        return Err(Error::config("l", "need N >= 1 and l >= 1"));
    }
    let owned = edges * l;
    if owned > c {
        return Err(Error::config("l", format!("N*l = {owned} exceeds C = {c}")));
    }
    if !c.is_multiple_of(owned) && !owned.is_multiple_of(c) {
        return Err(Error::config(
            "l",
            format!("C = {c} and N*l = {owned} must divide one another"),
        ));
    }
    if !vehicles.is_multiple_of(edges) || vehicles < edges {
        return Err(Error::config("M", format!("M = {vehicles} must be a positive multiple of N = {edges}")));
    }
    let unassigned: Vec<usize> = (owned..c).collect();
    if !unassigned.is_empty() {
        warn!("edge non-iid partition leaves classes {unassigned:?} unassigned");
    }
    let per_edge = vehicles / edges;
    let by_class = dataset.indices_by_class();
    let mut pools: Vec<Vec<usize>> = (0..edges)
        .map(|n| (n * l..(n + 1) * l).flat_map(|k| by_class[k].iter().copied()).collect())
        .collect();
    // Equal shard sizes across edges: trim every pool to the smallest.
    let min_pool = pools.iter().map(Vec::len).min().unwrap_or(0);
    if min_pool < per_edge {
        return Err(Error::config("M", "an edge pool has fewer samples than vehicles"));
    }
    let mut shards = Vec::with_capacity(vehicles);
    let mut assignment = Vec::with_capacity(vehicles);
    for (n, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut stream(seed, Domain::Partition, 2, n as u64));
        pool.truncate(min_pool);
        for shard in split_even(pool, per_edge) {
            shards.push(shard);
            assignment.push(n);
        }
    }
    Ok(PartitionPlan {
        shards,
        edge_assignment: Some(assignment),
        unassigned_classes: unassigned,
    })
}

/// Probability vector over class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::contract("label distribution entries must be nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("label distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Empty("no samples to form a label distribution".into()));
        }
        Ok(Self(counts.iter().map(|c| c / total).collect()))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

pub fn label_counts(dataset: &LabeledDataset, indices: &[usize]) -> Vec<f64> {
    let mut counts = vec![0.0; dataset.num_classes()];
    for &i in indices {
        counts[dataset.labels()[i]] += 1.0;
    }
    counts
}

/// Empirical label frequencies of a shard or pooled edge dataset.
pub fn label_distribution(dataset: &LabeledDataset, indices: &[usize]) -> Result<LabelDistribution> {
    if indices.is_empty() {
        return Err(Error::Empty("label distribution of an empty shard".into()));
    }
    LabelDistribution::from_counts(&label_counts(dataset, indices))
}

/// `‖p − q‖₁`
pub fn probability_difference(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::contract(format!(
            "distributions over {} and {} classes",
            p.num_classes(),
            q.num_classes()
        )));
    }
    Ok(p.0.iter().zip(&q.0).map(|(a, b)| (a - b).abs()).sum())
}
