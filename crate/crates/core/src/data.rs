//! Datasets, non-IID partitioning, holdout splits and tier assignment.

use std::fs;
use std::io::{Read, Write};
use std::path::Path as FsPath;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::Rng as ChaRng;

/// Labelled samples of a fixed per-sample shape, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let numel: usize = sample_shape.iter().product();
        if numel == 0 || inputs.len() != numel * labels.len() {
            return Err(Error::Data(format!(
                "{} input values do not match {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            sample_shape,
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let numel: usize = self.sample_shape.iter().product();
        &self.inputs[i * numel..(i + 1) * numel]
    }

    /// Gather `indices` into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let numel: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * numel);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("consistent by construction"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let numel: usize = self.sample_shape.iter().product();
        let mut inputs = Vec::with_capacity(indices.len() * numel);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_histogram(&self.labels, self.classes, None)
    }

    /// Indices of each class, in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }
}

pub fn class_histogram(labels: &[usize], classes: usize, indices: Option<&[usize]>) -> Vec<usize> {
    let mut h = vec![0; classes];
    match indices {
        Some(idx) => idx.iter().for_each(|&i| h[labels[i]] += 1),
        None => labels.iter().for_each(|&y| h[y] += 1),
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples: usize,
    pub noise: f64,
    pub side: usize,
    /// Width of the Gaussian envelope, in pixels.
    pub envelope_sigma: f64,
    /// Grating wavelength, in pixels.
    pub wavelength: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 4000,
            noise: 1.0,
            side: 8,
            envelope_sigma: 2.5,
            wavelength: 4.0,
        }
    }
}

/// Class-conditional templates plus iid Gaussian pixel noise, together
/// with the accuracy of the nearest-template classifier on the generated
/// samples.
pub struct Synthetic {
    pub dataset: Dataset,
    pub templates: Vec<Vec<f64>>,
    pub template_accuracy: f64,
}

/// Generate a balanced synthetic image dataset of shape `[1, side, side]`.
///
/// Each class owns a Gaussian-windowed grating with its own orientation. Generation fails if the nearest-template classifier (a linear
/// rule, since templates are compared by squared distance) scores 80% or
/// less at noise up to 0.5.
pub fn gen_synthetic(cfg: &SyntheticConfig, rng: &mut ChaRng) -> Result<Synthetic> {
    if cfg.classes < 2 || cfg.samples < cfg.classes || cfg.side == 0 {
        return Err(Error::Data(format!(
            "need classes >= 2, samples >= classes and a non-empty image, got {cfg:?}"
        )));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Data("noise must be >= 0".into()));
    }
    let side = cfg.side;
    let px = side * side;
    // Gabor templates: a Gaussian envelope times an oriented grating, one
    // orientation per class, with a random centre and phase.
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            let theta = std::f64::consts::PI * c as f64 / cfg.classes as f64;
            let (s, co) = theta.sin_cos();
            let mid = (side as f64 - 1.0) / 2.0;
            let cy = mid + rng.random_range(-0.5..0.5);
            let cx = mid + rng.random_range(-0.5..0.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut t = vec![0.0; px];
            for y in 0..side {
                for x in 0..side {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let env = (-(dy * dy + dx * dx) / (2.0 * cfg.envelope_sigma.powi(2))).exp();
                    let u = dx * co + dy * s;
                    t[y * side + x] = env * (std::f64::consts::TAU * u / cfg.wavelength + phase).cos();
                }
            }
            t
        })
        .collect();

    let mut labels: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.classes).collect();
    labels.shuffle(rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(cfg.samples * px);
    for &y in &labels {
        inputs.extend(templates[y].iter().map(|&v| v + cfg.noise * normal.sample(rng)));
    }
    let dataset = Dataset::new(vec![1, side, side], inputs, labels, cfg.classes)?;

    let correct = (0..dataset.len())
        .filter(|&i| nearest_template(&templates, dataset.sample(i)) == dataset.labels[i])
        .count();
    let template_accuracy = correct as f64 / dataset.len() as f64;
    if cfg.noise <= 0.5 && template_accuracy <= 0.8 {
        return Err(Error::Data(format!(
            "templates not separable: nearest-template accuracy {template_accuracy:.3}"
        )));
    }
    Ok(Synthetic {
        dataset,
        templates,
        template_accuracy,
    })
}

pub fn nearest_template(templates: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, t) in templates.iter().enumerate() {
        let d: f64 = t.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// One client's share of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub tier: usize,
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
}

/// Non-IID partition with per-client class proportions drawn from
/// `Dirichlet(alpha)`.
///
/// Clients take turns drawing one sample at a time: a class is drawn from
/// the client's proportions (renormalized over classes that still have
/// samples) and an unused sample of that class is assigned. Shard sizes
/// therefore differ by at most one.
pub fn lda_partition<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    num_clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    let n = labels.len();
    if !(alpha > 0.0) {
        return Err(Error::Data(format!("alpha must be > 0, got {alpha}")));
    }
    if num_clients == 0 || num_clients > n / 10 {
        return Err(Error::Data(format!(
            "cannot give {num_clients} clients non-empty shards of >= 10 samples from {n}"
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    for p in pools.iter_mut() {
        p.shuffle(rng);
    }
    let props: Vec<Vec<f64>> = (0..num_clients).map(|_| dirichlet(alpha, classes, rng)).collect();
    let mut shards: Vec<Vec<usize>> = vec![Vec::with_capacity(n / num_clients + 1); num_clients];
    let mut remaining = n;
    let mut client = 0;
    while remaining > 0 {
        let p = &props[client];
        let mass: f64 = (0..classes).filter(|&c| !pools[c].is_empty()).map(|c| p[c]).sum();
        let class = if mass > 0.0 {
            let mut u = rng.random::<f64>() * mass;
            let mut pick = None;
            for c in (0..classes).filter(|&c| !pools[c].is_empty()) {
                pick = Some(c);
                if u < p[c] {
                    break;
                }
                u -= p[c];
            }
            pick.expect("some class has samples")
        } else {
            // All of this client's mass sits on exhausted classes.
            let open: Vec<usize> = (0..classes).filter(|&c| !pools[c].is_empty()).collect();
            *open.choose(rng).expect("remaining > 0")
        };
        shards[client].push(pools[class].pop().expect("non-empty pool"));
        remaining -= 1;
        client = (client + 1) % num_clients;
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard {
                client_id,
                indices,
                tier: 0,
            }
        })
        .collect())
}

/// Largest-remainder apportionment of `total` items over `fractions`.
pub fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assign clients to tiers uniformly at random, with per-tier counts given
/// by largest-remainder rounding of `fractions`.
pub fn assign_tiers<R: Rng + ?Sized>(shards: &mut [ClientShard], fractions: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let k = shards.len();
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Data(format!("tier fractions must be non-negative and sum to 1, got {fractions:?}")));
    }
    if let Some(t) = fractions.iter().position(|&f| f * k as f64 + 1e-9 < 1.0) {
        return Err(Error::Data(format!(
            "tier {t} gets fewer than one of {k} clients with fraction {}",
            fractions[t]
        )));
    }
    let counts = largest_remainder(fractions, k);
    let mut tiers: Vec<usize> = counts.iter().enumerate().flat_map(|(t, &c)| std::iter::repeat_n(t, c)).collect();
    tiers.shuffle(rng);
    for (s, &t) in shards.iter_mut().zip(&tiers) {
        s.tier = t;
    }
    Ok(counts)
}

/// Stratified split into train, validation and test sets.
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn holdout_split<R: Rng + ?Sized>(dataset: &Dataset, val_fraction: f64, test_fraction: f64, rng: &mut R) -> Result<Split> {
    if !(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::Data(format!(
            "holdout fractions must be positive with sum < 1, got ({val_fraction}, {test_fraction})"
        )));
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut idx in dataset.indices_by_class() {
        idx.shuffle(rng);
        let nv = (val_fraction * idx.len() as f64).round() as usize;
        let nt = (test_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..nv]);
        test.extend_from_slice(&idx[nv..nv + nt]);
        train.extend_from_slice(&idx[nv + nt..]);
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    Ok(Split {
        train: dataset.subset(&train),
        val: dataset.subset(&val),
        test: dataset.subset(&test),
    })
}

/// Stratified random subset holding `fraction` of each class.
pub fn stratified_subsample<R: Rng + ?Sized>(dataset: &Dataset, fraction: f64, rng: &mut R) -> Dataset {
    if fraction >= 1.0 {
        return dataset.clone();
    }
    let mut keep = Vec::new();
    for mut idx in dataset.indices_by_class() {
        idx.shuffle(rng);
        let n = ((fraction * idx.len() as f64).round() as usize).max(1).min(idx.len());
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    dataset.subset(&keep)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    classes: usize,
    files: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    class: usize,
    file: String,
}

/// Load a dataset from a directory holding `manifest.json` and one binary
/// tensor file per class. Each file starts with four little-endian `u32`
/// values `N, C, H, W` followed by `N*C*H*W` little-endian `f64` values.
pub fn load_tensor_dir(dir: &FsPath) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut sample_shape: Option<Vec<usize>> = None;
    for entry in &manifest.files {
        let mut f = fs::File::open(dir.join(&entry.file))?;
        let mut header = [0u8; 16];
        f.read_exact(&mut header)?;
        let dims: Vec<usize> = header
            .chunks(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let shape = dims[1..].to_vec();
        match &sample_shape {
            Some(s) if *s != shape => {
                return Err(Error::Data(format!("{}: shape {shape:?} differs from {s:?}", entry.file)));
            }
            _ => sample_shape = Some(shape),
        }
        let count: usize = dims.iter().product();
        let mut bytes = Vec::with_capacity(count * 8);
        f.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::Data(format!(
                "{}: expected {} bytes of data, found {}",
                entry.file,
                count * 8,
                bytes.len()
            )));
        }
        inputs.extend(bytes.chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())));
        labels.extend(std::iter::repeat_n(entry.class, dims[0]));
    }
    let shape = sample_shape.ok_or_else(|| Error::Data("manifest lists no files".into()))?;
    Dataset::new(shape, inputs, labels, manifest.classes)
}

/// Write `dataset` in the layout read by [`load_tensor_dir`].
pub fn write_tensor_dir(dataset: &Dataset, dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = dataset.sample_shape();
    if shape.len() != 3 {
        return Err(Error::Data("tensor directories hold [C, H, W] samples".into()));
    }
    let mut files = Vec::new();
    for (class, idx) in dataset.indices_by_class().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let name = format!("class_{class}.bin");
        let mut f = fs::File::create(dir.join(&name))?;
        for d in std::iter::once(idx.len()).chain(shape.iter().copied()) {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &i in &idx {
            for v in dataset.sample(i) {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        files.push(ManifestEntry { class, file: name });
    }
    let manifest = Manifest {
        classes: dataset.classes(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}
