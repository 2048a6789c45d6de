//! Synthetic image data and the label-skew partitioners.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ccmp::{compute_class_priors, label_histogram, ClassPriors};
use crate::error::{CoreError, Result};
use crate::rng::{stream, Purpose};

/// Linear feature shift applied to every sample of one domain: each pair of
/// consecutive pixels is rotated by `rotation` radians, then `offset` is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub rotation: f64,
    pub offset: f64,
}

impl DomainTransform {
    pub fn apply(&self, pixels: &mut [f64]) {
        let (s, c) = self.rotation.sin_cos();
        for pair in pixels.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        pixels.iter_mut().for_each(|v| *v += self.offset);
    }
}

mod defaults {
    pub fn image_size() -> usize {
        16
    }
    pub fn train_per_class() -> usize {
        60
    }
    pub fn test_per_class() -> usize {
        20
    }
    pub fn separation() -> f64 {
        16.0
    }
    pub fn noise() -> f64 {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    /// Expected Euclidean distance between two class centers.
    #[serde(default = "defaults::separation")]
    pub separation: f64,
    /// Per-pixel standard deviation around the class center.
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Optional per-domain shifts; client `k` is rendered in domain `k mod len`.
    #[serde(default)]
    pub domains: Vec<DomainTransform>,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            train_per_class: defaults::train_per_class(),
            test_per_class: defaults::test_per_class(),
            image_size: defaults::image_size(),
            separation: defaults::separation(),
            noise: defaults::noise(),
            domains: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub image_size: usize,
    pub centers: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.label).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|s| s.label).collect()
    }
}

/// Gaussian class clusters in pixel space, grouped by class in both splits.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes == 0 {
        return Err(CoreError::config("data.num_classes", "must be at least 1"));
    }
    if spec.train_per_class == 0 {
        return Err(CoreError::config("data.train_per_class", "must be at least 1"));
    }
    if spec.image_size == 0 {
        return Err(CoreError::config("data.image_size", "must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(CoreError::config("data.noise", "must be finite and nonnegative"));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(CoreError::config("data.separation", "must be finite and nonnegative"));
    }
    let pixels = spec.image_size * spec.image_size;
    let center_std = spec.separation / (2.0 * pixels as f64).sqrt();
    let mut rng = stream(seed, Purpose::Data, 0, 0);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..pixels).map(|_| center_std * gauss(&mut rng)).collect())
        .collect();
    let draw = |count: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(count * spec.num_classes);
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..count {
                let pixels = center.iter().map(|c| c + spec.noise * gauss(rng)).collect();
                out.push(Sample { pixels, label });
            }
        }
        out
    };
    let train = draw(spec.train_per_class, &mut rng);
    let test = draw(spec.test_per_class, &mut rng);
    Ok(Dataset {
        num_classes: spec.num_classes,
        image_size: spec.image_size,
        centers,
        train,
        test,
    })
}

/// Disjoint client shards of one split, with their label statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<usize>>,
    /// `None` for a client whose shard is empty.
    pub priors: Vec<Option<ClassPriors>>,
}

impl Partition {
    fn from_shards(mut shards: Vec<Vec<usize>>, labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut histograms = Vec::with_capacity(shards.len());
        let mut priors = Vec::with_capacity(shards.len());
        for shard in shards.iter_mut() {
            shard.sort_unstable();
            let ys: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
            histograms.push(label_histogram(&ys, num_classes)?);
            priors.push(if ys.is_empty() {
                None
            } else {
                Some(compute_class_priors(&ys, num_classes)?)
            });
        }
        Ok(Self {
            shards,
            histograms,
            priors,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// Checks that shards are pairwise disjoint and cover `0..len`.
    pub fn is_disjoint_cover(&self, len: usize) -> bool {
        let mut seen = vec![false; len];
        for &i in self.shards.iter().flatten() {
            if i >= len || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

fn group_by_class(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        groups
            .get_mut(y)
            .ok_or_else(|| CoreError::Data(format!("label {y} out of range")))?
            .push(i);
    }
    Ok(groups)
}

/// Each client receives exactly `k` distinct classes. Classes are laid out
/// round-robin over a random permutation, so every class is owned by
/// `⌊nk/|C|⌋` or `⌈nk/|C|⌉` clients, and each class's samples are split as
/// evenly as possible among its owners.
pub fn partition_pathological(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(CoreError::config("train.num_clients", "must be at least 1"));
    }
    if classes_per_client == 0 || classes_per_client > num_classes {
        return Err(CoreError::config(
            "partition.classes_per_client",
            format!("must be in 1..={num_classes}"),
        ));
    }
    if num_clients * classes_per_client < num_classes {
        return Err(CoreError::config(
            "partition.classes_per_client",
            format!("{num_clients} clients × {classes_per_client} classes cannot cover {num_classes} classes"),
        ));
    }
    let mut rng = stream(seed, Purpose::Partition, 0, 0);
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(&mut rng);
    let mut owners = vec![Vec::new(); num_classes];
    for client in 0..num_clients {
        for j in 0..classes_per_client {
            owners[perm[(client * classes_per_client + j) % num_classes]].push(client);
        }
    }
    let mut groups = group_by_class(labels, num_classes)?;
    let mut shards = vec![Vec::new(); num_clients];
    for (c, (group, owners)) in groups.iter_mut().zip(&owners).enumerate() {
        if group.len() < owners.len() {
            return Err(CoreError::Data(format!(
                "class {c} has {} samples for {} owning clients",
                group.len(),
                owners.len()
            )));
        }
        group.shuffle(&mut rng);
        let counts = largest_remainder(&vec![1.0; owners.len()], group.len());
        let mut start = 0;
        for (&owner, count) in owners.iter().zip(counts) {
            shards[owner].extend_from_slice(&group[start..start + count]);
            start += count;
        }
    }
    Partition::from_shards(shards, labels, num_classes)
}

/// Per class, client proportions drawn from a symmetric Dirichlet(β) and
/// turned into integer counts by largest-remainder rounding.
pub fn partition_dirichlet(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(CoreError::config("train.num_clients", "must be at least 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(CoreError::config("partition.beta", "concentration must be positive"));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| CoreError::config("partition.beta", e.to_string()))?;
    let mut rng = stream(seed, Purpose::Partition, 0, 0);
    let mut groups = group_by_class(labels, num_classes)?;
    let mut shards = vec![Vec::new(); num_clients];
    for group in groups.iter_mut() {
        let mut weights: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        if weights.iter().sum::<f64>() == 0.0 {
            // Every draw underflowed (tiny β): the Dirichlet limit is a vertex.
            weights[rng.random_range(0..num_clients)] = 1.0;
        }
        group.shuffle(&mut rng);
        let counts = largest_remainder(&weights, group.len());
        let mut start = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&group[start..start + count]);
            start += count;
        }
    }
    Partition::from_shards(shards, labels, num_classes)
}

/// Splits `total` into integers proportional to `weights`: floors first, then
/// the leftover units go to the largest fractional parts (ties to the lower
/// index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits another sample set (typically the test split) so that each client
/// receives classes in proportion to its share of `reference`.
pub fn split_like(reference: &Partition, labels: &[usize], num_classes: usize) -> Result<Partition> {
    let groups = group_by_class(labels, num_classes)?;
    let mut shards = vec![Vec::new(); reference.num_clients()];
    for (c, group) in groups.iter().enumerate() {
        let weights: Vec<f64> = reference.histograms.iter().map(|h| h[c] as f64).collect();
        if weights.iter().all(|w| *w == 0.0) {
            continue;
        }
        let counts = largest_remainder(&weights, group.len());
        let mut start = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&group[start..start + count]);
            start += count;
        }
    }
    Partition::from_shards(shards, labels, num_classes)
}

/// Renders each client's samples in its domain. Labels and shard membership
/// are untouched.
pub fn apply_domain_shift(samples: &mut [Sample], partition: &Partition, domains: &[DomainTransform]) {
    if domains.is_empty() {
        return;
    }
    for (client, shard) in partition.shards.iter().enumerate() {
        let domain = &domains[client % domains.len()];
        for &i in shard {
            domain.apply(&mut samples[i].pixels);
        }
    }
}

/// Shannon entropy (nats) of a label histogram.
pub fn label_entropy(histogram: &[usize]) -> f64 {
    let n: usize = histogram.iter().sum();
    if n == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}
