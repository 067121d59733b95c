//! The weight-sharing supernet and single-path execution.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, argmax_rows, softmax_cross_entropy, OperatorKind, Parameter, SgdConfig, Tensor};
use crate::sampling::Subspace;
use crate::space::{Chain, Path, SearchSpace, Stage};

/// Identifies one parameter group of the supernet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKey {
    Fixed(usize),
    Op { layer: usize, candidate: usize },
}

pub type ParamMap<P> = BTreeMap<ParamKey, Vec<P>>;

/// Every parameter group touched by `path`, in network order. Searchable
/// candidates without parameters still get a (possibly empty) key.
pub fn path_keys(space: &SearchSpace, path: &Path) -> Vec<ParamKey> {
    space
        .stages
        .iter()
        .map(|s| match *s {
            Stage::Fixed(i) => ParamKey::Fixed(i),
            Stage::Searchable(l) => ParamKey::Op {
                layer: l,
                candidate: path.choices[l],
            },
        })
        .collect()
}

/// Keys of the fixed components plus every candidate in `subspace`.
pub fn subspace_keys(space: &SearchSpace, subspace: &Subspace) -> Vec<ParamKey> {
    let mut keys: Vec<ParamKey> = (0..space.fixed.len()).map(ParamKey::Fixed).collect();
    for l in 0..space.num_layers() {
        keys.extend(subspace.candidates(l).map(|c| ParamKey::Op { layer: l, candidate: c }));
    }
    keys
}

fn chain_for(space: &SearchSpace, key: ParamKey) -> &Chain {
    match key {
        ParamKey::Fixed(i) => &space.fixed[i].chain,
        ParamKey::Op { layer, candidate } => &space.layers[layer].candidates[candidate].chain,
    }
}

/// Residual candidates add their input back. Identity in a residual
/// layer stands for skipping the layer, so it passes `x` through as is.
fn is_skip(space: &SearchSpace, key: ParamKey) -> bool {
    match key {
        ParamKey::Op { layer, candidate } => {
            let l = &space.layers[layer];
            l.skip && l.candidates[candidate].kind != OperatorKind::Identity
        }
        ParamKey::Fixed(_) => false,
    }
}

/// Fresh parameters for every group of the space.
pub fn init_params<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Result<ParamMap<Parameter>> {
    let mut keys: Vec<ParamKey> = (0..space.fixed.len()).map(ParamKey::Fixed).collect();
    for (l, layer) in space.layers.iter().enumerate() {
        keys.extend((0..layer.candidates.len()).map(|c| ParamKey::Op { layer: l, candidate: c }));
    }
    init_keys(space, &keys, rng)
}

pub fn init_keys<R: Rng + ?Sized>(space: &SearchSpace, keys: &[ParamKey], rng: &mut R) -> Result<ParamMap<Parameter>> {
    let mut out = BTreeMap::new();
    for &key in keys {
        let chain = chain_for(space, key);
        let mut ps = Vec::with_capacity(chain.num_params());
        for (op, shape) in &chain.ops {
            ps.extend(op.init_params(shape, rng)?);
        }
        out.insert(key, ps);
    }
    Ok(out)
}

fn lookup<P>(params: &ParamMap<P>, key: ParamKey) -> Result<&[P]> {
    params
        .get(&key)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::Invalid(format!("no parameters for {key:?}")))
}

/// Forward a batch along `path`.
pub fn forward_path<P: AsRef<Tensor>>(space: &SearchSpace, params: &ParamMap<P>, path: &Path, x: &Tensor) -> Result<Tensor> {
    let mut act = x.clone();
    for key in path_keys(space, path) {
        let chain = chain_for(space, key);
        let ps = lookup(params, key)?;
        let input = act.clone();
        for (i, (op, _)) in chain.ops.iter().enumerate() {
            act = nn::forward(*op, &ps[chain.offsets[i]..chain.offsets[i + 1]], &act)?;
        }
        if is_skip(space, key) {
            act.add_assign(&input);
        }
    }
    Ok(act)
}

/// Forward, cross-entropy loss and backward along `path`, accumulating
/// gradients into `params`. Returns the mean batch loss.
pub fn loss_and_grad(
    space: &SearchSpace,
    params: &mut ParamMap<Parameter>,
    path: &Path,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let keys = path_keys(space, path);
    // tape[s][i] is the input of op i of stage s.
    let mut tape: Vec<Vec<Tensor>> = Vec::with_capacity(keys.len());
    let mut act = x.clone();
    for &key in &keys {
        let chain = chain_for(space, key);
        let ps = lookup(params, key)?;
        let input = act.clone();
        let mut inputs = Vec::with_capacity(chain.ops.len());
        for (i, (op, _)) in chain.ops.iter().enumerate() {
            let next = nn::forward(*op, &ps[chain.offsets[i]..chain.offsets[i + 1]], &act)?;
            inputs.push(std::mem::replace(&mut act, next));
        }
        if is_skip(space, key) {
            act.add_assign(&input);
        }
        tape.push(inputs);
    }
    let (loss, mut grad) = softmax_cross_entropy(&act, labels)?;
    for (&key, inputs) in keys.iter().zip(tape).rev() {
        let chain = chain_for(space, key);
        let ps = params
            .get_mut(&key)
            .ok_or_else(|| Error::Invalid(format!("no parameters for {key:?}")))?;
        let upstream = grad.clone();
        for (i, ((op, _), input)) in chain.ops.iter().zip(&inputs).enumerate().rev() {
            grad = nn::backward(*op, &mut ps[chain.offsets[i]..chain.offsets[i + 1]], input, &grad)?;
        }
        if is_skip(space, key) {
            grad.add_assign(&upstream);
        }
    }
    Ok(loss)
}

/// One SGD step on a single batch along `path`.
pub fn train_step(
    space: &SearchSpace,
    params: &mut ParamMap<Parameter>,
    path: &Path,
    x: &Tensor,
    labels: &[usize],
    sgd: &SgdConfig,
    lr: f64,
) -> Result<f64> {
    let loss = loss_and_grad(space, params, path, x, labels)?;
    let keys: BTreeSet<ParamKey> = path_keys(space, path).into_iter().collect();
    nn::sgd_step(
        params
            .iter_mut()
            .filter(|(k, _)| keys.contains(k))
            .flat_map(|(_, v)| v.iter_mut()),
        lr,
        sgd.momentum,
        sgd.clip_norm,
    )?;
    Ok(loss)
}

pub const EVAL_BATCH: usize = 256;

/// Correct predictions and sample count of `path` on `data` (or on the
/// listed `indices` of it).
pub fn count_correct<P: AsRef<Tensor>>(
    space: &SearchSpace,
    params: &ParamMap<P>,
    path: &Path,
    data: &Dataset,
    indices: Option<&[usize]>,
) -> Result<(usize, usize)> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = forward_path(space, params, path, &x)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok((correct, idx.len()))
}

pub fn accuracy<P: AsRef<Tensor>>(space: &SearchSpace, params: &ParamMap<P>, path: &Path, data: &Dataset) -> Result<f64> {
    let (c, n) = count_correct(space, params, path, data, None)?;
    if n == 0 {
        return Err(Error::Data("accuracy on an empty dataset".into()));
    }
    Ok(c as f64 / n as f64)
}

/// Server-side store of every operator's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub space: Arc<SearchSpace>,
    pub params: ParamMap<Tensor>,
}

impl Supernet {
    pub fn init<R: Rng + ?Sized>(space: Arc<SearchSpace>, rng: &mut R) -> Result<Self> {
        let params = init_params(&space, rng)?
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| p.value).collect()))
            .collect();
        Ok(Self { space, params })
    }

    pub fn total_param_count(&self) -> u64 {
        self.params.values().flatten().map(|t| t.numel() as u64).sum()
    }

    pub fn forward(&self, path: &Path, x: &Tensor) -> Result<Tensor> {
        self.space.validate_path(path)?;
        forward_path(&self.space, &self.params, path, x)
    }

    pub fn accuracy(&self, path: &Path, data: &Dataset) -> Result<f64> {
        self.space.validate_path(path)?;
        accuracy(&self.space, &self.params, path, data)
    }

    /// Trainable copies of the listed groups.
    pub fn checkout(&self, keys: &[ParamKey]) -> Result<ParamMap<Parameter>> {
        keys.iter()
            .map(|&k| {
                let v = lookup(&self.params, k)?;
                Ok((k, v.iter().cloned().map(Parameter::new).collect()))
            })
            .collect()
    }

    /// Standalone model holding deep copies of the path's weights.
    pub fn extract(&self, path: &Path) -> Result<Model> {
        self.space.validate_path(path)?;
        Ok(Model {
            space: self.space.clone(),
            path: path.clone(),
            params: self.checkout(&path_keys(&self.space, path))?,
        })
    }
}

pub fn extract_model(supernet: &Supernet, path: &Path) -> Result<Model> {
    supernet.extract(path)
}

/// A single architecture with its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub space: Arc<SearchSpace>,
    pub path: Path,
    pub params: ParamMap<Parameter>,
}

impl Model {
    /// Freshly initialized parameters for `path`.
    pub fn fresh<R: Rng + ?Sized>(space: Arc<SearchSpace>, path: &Path, rng: &mut R) -> Result<Self> {
        space.validate_path(path)?;
        let params = init_keys(&space, &path_keys(&space, path), rng)?;
        Ok(Self {
            space,
            path: path.clone(),
            params,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        forward_path(&self.space, &self.params, &self.path, x)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        accuracy(&self.space, &self.params, &self.path, data)
    }

    pub fn train_step(&mut self, x: &Tensor, labels: &[usize], sgd: &SgdConfig, lr: f64) -> Result<f64> {
        train_step(&self.space, &mut self.params, &self.path, x, labels, sgd, lr)
    }

    pub fn values(&self) -> ParamMap<Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (*k, v.iter().map(|p| p.value.clone()).collect()))
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.params.values().flatten().map(|p| p.value.numel() as u64).sum()
    }
}
