//! Search-space topology and cost accounting.
//!
//! The network is a feed-forward stack: a fixed stem, then blocks of
//! searchable layers each followed by a fixed reduction, then a fixed
//! classifier head. Every searchable layer holds a list of candidate
//! operators that all preserve the layer's input shape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Cost, Expansion, OperatorKind};

pub const DEFAULT_CANDIDATES: [&str; 6] = [
    "identity",
    "conv1x1",
    "conv3x3",
    "dwsep3x3_e0.5",
    "dwsep3x3_e1",
    "dwsep3x3_e2",
];

/// Candidate names accepted in configs; `{k}` and `{w}` are odd sizes,
/// `{r}` one of 0.5, 1, 2, `{c}` an explicit channel count.
pub const VALID_KINDS: &str =
    "identity, zero, conv1x1, conv3x3, conv1x1_c{c}, conv3x3_c{c}, dwsep{k}x{k}_e{r}, avgpool{w}, dense{c}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    /// Global searchable-layer index.
    pub layer: usize,
    pub candidates: Vec<String>,
    /// Residual slot: the layer outputs `x + op(x)`. Defaults to the
    /// space-wide `residual` setting.
    #[serde(default)]
    pub skip: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub stem_channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    /// Channel multiplier applied by each reduction.
    pub channel_growth: f64,
    pub candidates: Vec<String>,
    /// Searchable layers output `x + op(x)`; `identity` then skips the
    /// layer entirely.
    pub residual: bool,
    pub overrides: Vec<LayerOverride>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            input_shape: [1, 8, 8],
            classes: 4,
            stem_channels: 8,
            blocks: 2,
            layers_per_block: 2,
            channel_growth: 1.5,
            candidates: DEFAULT_CANDIDATES.iter().map(|s| s.to_string()).collect(),
            residual: true,
            overrides: Vec::new(),
        }
    }
}

/// Parse a candidate name into its kernel kind, given the layer width.
pub fn parse_candidate(name: &str, channels: usize) -> Result<OperatorKind> {
    let bad = || Error::Space(format!("unknown operator '{name}'; valid kinds: {VALID_KINDS}"));
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let kind = match name {
        "identity" => OperatorKind::Identity,
        "zero" => OperatorKind::Zero,
        "conv1x1" => OperatorKind::Conv1x1 { out_channels: channels },
        "conv3x3" => OperatorKind::Conv3x3 { out_channels: channels },
        n if n.starts_with("conv1x1_c") => OperatorKind::Conv1x1 { out_channels: num(&n[9..])? },
        n if n.starts_with("conv3x3_c") => OperatorKind::Conv3x3 { out_channels: num(&n[9..])? },
        n if n.starts_with("dense") => OperatorKind::Dense { out_features: num(&n[5..])? },
        n if n.starts_with("avgpool") => OperatorKind::AvgPool { window: num(&n[7..])?, stride: 1 },
        n if n.starts_with("dwsep") => {
            let rest = &n[5..];
            let (k, rest) = rest.split_once('x').ok_or_else(bad)?;
            let (k2, r) = rest.split_once("_e").ok_or_else(bad)?;
            if k != k2 {
                return Err(bad());
            }
            let kernel = num(k)?;
            let ratio: f64 = r.parse().map_err(|_| bad())?;
            let expansion = Expansion::from_ratio(ratio).ok_or_else(bad)?;
            if kernel % 2 == 0 {
                return Err(bad());
            }
            OperatorKind::DwSepConv { kernel, expansion }
        }
        _ => return Err(bad()),
    };
    Ok(kind)
}

/// A straight chain of kernels sharing one concatenated parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// Kernel with its per-sample input shape.
    pub ops: Vec<(OperatorKind, Vec<usize>)>,
    /// `offsets[i]..offsets[i + 1]` is the slice of parameters of op `i`.
    pub offsets: Vec<usize>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub cost: Cost,
}

impl Chain {
    pub fn new(kinds: &[OperatorKind], in_shape: &[usize]) -> Result<Self> {
        let mut shape = in_shape.to_vec();
        let mut ops = Vec::with_capacity(kinds.len());
        let mut offsets = vec![0];
        let mut cost = Cost::default();
        for &k in kinds {
            let n = k.param_shapes(&shape)?.len();
            cost += k.cost(&shape)?;
            let next = k.output_shape(&shape)?;
            ops.push((k, shape));
            offsets.push(offsets.last().unwrap() + n);
            shape = next;
        }
        Ok(Self {
            ops,
            offsets,
            in_shape: in_shape.to_vec(),
            out_shape: shape,
            cost,
        })
    }

    pub fn num_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.ops
            .iter()
            .flat_map(|(k, s)| k.param_shapes(s).expect("validated at construction"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub name: String,
    pub kind: OperatorKind,
    pub chain: Chain,
}

impl Candidate {
    pub fn cost(&self) -> Cost {
        self.chain.cost
    }

    pub fn is_parametric(&self) -> bool {
        self.chain.cost.params > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub index: usize,
    pub block: usize,
    pub in_shape: Vec<usize>,
    pub candidates: Vec<Candidate>,
    pub skip: bool,
    /// No Identity/Zero option: a path must put a real operator here.
    pub mandatory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedComponent {
    pub name: String,
    pub chain: Chain,
}

/// Execution order of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fixed(usize),
    Searchable(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub config: SpaceConfig,
    pub layers: Vec<Layer>,
    pub fixed: Vec<FixedComponent>,
    pub stages: Vec<Stage>,
}

/// One candidate index per searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Path {
    pub choices: Vec<usize>,
}

impl Path {
    pub fn new(choices: Vec<usize>) -> Self {
        Self { choices }
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.choices.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", s.join("-"))
    }
}

/// Per-candidate costs of a space, detached from the network itself so
/// samplers can run on synthetic tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub fixed: Cost,
    pub layers: Vec<Vec<Cost>>,
}

impl CostTable {
    /// Table with the given per-layer FLOPs and params equal to FLOPs.
    pub fn from_flops(fixed: u64, layers: &[&[u64]]) -> Self {
        Self {
            fixed: Cost { params: fixed, flops: fixed },
            layers: layers
                .iter()
                .map(|l| l.iter().map(|&f| Cost { params: f, flops: f }).collect())
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn path_cost(&self, path: &Path) -> Cost {
        self.fixed
            + path
                .choices
                .iter()
                .zip(&self.layers)
                .map(|(&c, l)| l[c])
                .sum::<Cost>()
    }

    pub fn min_path_flops(&self) -> u64 {
        self.fixed.flops
            + self
                .layers
                .iter()
                .map(|l| l.iter().map(|c| c.flops).min().unwrap_or(0))
                .sum::<u64>()
    }

    pub fn max_path_flops(&self) -> u64 {
        self.fixed.flops
            + self
                .layers
                .iter()
                .map(|l| l.iter().map(|c| c.flops).max().unwrap_or(0))
                .sum::<u64>()
    }

    /// Sum of parameters over every searchable candidate.
    pub fn searchable_params(&self) -> u64 {
        self.layers.iter().flatten().map(|c| c.params).sum()
    }

    pub fn num_paths(&self) -> u128 {
        self.layers.iter().map(|l| l.len() as u128).product()
    }
}

impl SearchSpace {
    pub fn build(config: &SpaceConfig) -> Result<Self> {
        build_space(config)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.config.input_shape.to_vec()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn fixed_cost(&self) -> Cost {
        self.fixed.iter().map(|f| f.chain.cost).sum()
    }

    pub fn cost_table(&self) -> CostTable {
        CostTable {
            fixed: self.fixed_cost(),
            layers: self
                .layers
                .iter()
                .map(|l| l.candidates.iter().map(Candidate::cost).collect())
                .collect(),
        }
    }

    pub fn validate_path(&self, path: &Path) -> Result<()> {
        if path.len() != self.layers.len() {
            return Err(Error::Space(format!(
                "path has {} choices, space has {} layers",
                path.len(),
                self.layers.len()
            )));
        }
        for (l, (&c, layer)) in path.choices.iter().zip(&self.layers).enumerate() {
            if c >= layer.candidates.len() {
                return Err(Error::Space(format!("layer {l} has no candidate {c}")));
            }
        }
        Ok(())
    }

    /// Sum of fixed-component and chosen-candidate costs.
    pub fn cost_of_path(&self, path: &Path) -> Result<Cost> {
        self.validate_path(path)?;
        Ok(self.fixed_cost()
            + path
                .choices
                .iter()
                .zip(&self.layers)
                .map(|(&c, l)| l.candidates[c].cost())
                .sum::<Cost>())
    }

    /// Candidate index of Identity in each layer, if present.
    pub fn identity_index(&self, layer: usize) -> Option<usize> {
        self.layers[layer]
            .candidates
            .iter()
            .position(|c| c.kind == OperatorKind::Identity)
    }

    /// Every searchable candidate and fixed component, parameters included.
    pub fn total_params(&self) -> u64 {
        self.fixed_cost().params + self.cost_table().searchable_params()
    }

    pub fn describe_path(&self, path: &Path) -> String {
        path.choices
            .iter()
            .zip(&self.layers)
            .map(|(&c, l)| l.candidates[c].name.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn conv_unit(kind: OperatorKind) -> Vec<OperatorKind> {
    if kind.is_conv() {
        vec![kind, OperatorKind::LayerNorm, OperatorKind::Relu]
    } else {
        vec![kind]
    }
}

/// Build the search space described by `config`.
pub fn build_space(config: &SpaceConfig) -> Result<SearchSpace> {
    let [c_in, h, w] = config.input_shape;
    if c_in == 0 || h == 0 || w == 0 {
        return Err(Error::Space("input shape must be positive".into()));
    }
    if config.classes < 2 {
        return Err(Error::Space("need at least 2 classes".into()));
    }
    if config.stem_channels == 0 || config.blocks == 0 || config.layers_per_block == 0 {
        return Err(Error::Space("stem_channels, blocks and layers_per_block must be > 0".into()));
    }
    if !(config.channel_growth >= 1.0) {
        return Err(Error::Space("channel_growth must be >= 1".into()));
    }
    let num_layers = config.blocks * config.layers_per_block;
    for o in &config.overrides {
        if o.layer >= num_layers {
            return Err(Error::Space(format!(
                "override for layer {} but space has {num_layers} layers",
                o.layer
            )));
        }
    }

    let mut fixed = Vec::new();
    let mut stages = Vec::new();
    let mut layers = Vec::new();

    let stem_kind = OperatorKind::Conv3x3 { out_channels: config.stem_channels };
    let stem = Chain::new(&conv_unit(stem_kind), &config.input_shape)?;
    let mut shape = stem.out_shape.clone();
    fixed.push(FixedComponent { name: "stem".into(), chain: stem });
    stages.push(Stage::Fixed(0));

    for block in 0..config.blocks {
        for j in 0..config.layers_per_block {
            let index = block * config.layers_per_block + j;
            let (names, skip) = match config.overrides.iter().find(|o| o.layer == index) {
                Some(o) => (o.candidates.clone(), o.skip.unwrap_or(config.residual)),
                None => (config.candidates.clone(), config.residual),
            };
            if names.len() < 2 {
                return Err(Error::Space(format!("layer {index} needs >=2 candidates, got {}", names.len())));
            }
            let mut candidates = Vec::with_capacity(names.len());
            for name in &names {
                if candidates.iter().any(|c: &Candidate| &c.name == name) {
                    return Err(Error::Space(format!("layer {index}: duplicate candidate '{name}'")));
                }
                let kind = parse_candidate(name, shape[0])?;
                if kind == OperatorKind::Zero && !skip {
                    return Err(Error::Space(format!(
                        "layer {index}: candidate 'zero' is only allowed in skip layers"
                    )));
                }
                let chain = Chain::new(&conv_unit(kind), &shape).map_err(|e| {
                    Error::Space(format!("layer {index}, candidate '{name}': {e}"))
                })?;
                if chain.out_shape != shape {
                    return Err(Error::Space(format!(
                        "layer {index}, candidate '{name}': output shape {:?} differs from input {:?}",
                        chain.out_shape, shape
                    )));
                }
                candidates.push(Candidate { name: name.clone(), kind, chain });
            }
            let mandatory = !candidates
                .iter()
                .any(|c| matches!(c.kind, OperatorKind::Identity | OperatorKind::Zero));
            layers.push(Layer {
                index,
                block,
                in_shape: shape.clone(),
                candidates,
                skip,
                mandatory,
            });
            stages.push(Stage::Searchable(index));
        }

        let out_c = ((shape[0] as f64 * config.channel_growth).round() as usize).max(1);
        let mut kinds = conv_unit(OperatorKind::Conv1x1 { out_channels: out_c });
        if shape[1] >= 2 && shape[2] >= 2 {
            kinds.push(OperatorKind::AvgPool { window: 2, stride: 2 });
        }
        let chain = Chain::new(&kinds, &shape)?;
        shape = chain.out_shape.clone();
        stages.push(Stage::Fixed(fixed.len()));
        fixed.push(FixedComponent { name: format!("reduction{block}"), chain });
    }

    let head = Chain::new(
        &[OperatorKind::Flatten, OperatorKind::Dense { out_features: config.classes }],
        &shape,
    )?;
    stages.push(Stage::Fixed(fixed.len()));
    fixed.push(FixedComponent { name: "classifier".into(), chain: head });

    Ok(SearchSpace {
        config: config.clone(),
        layers,
        fixed,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_shape() {
        let space = build_space(&SpaceConfig::default()).unwrap();
        assert_eq!(space.num_layers(), 4);
        for layer in &space.layers {
            assert_eq!(layer.candidates.len(), 6);
            assert!(!layer.mandatory);
            for c in &layer.candidates {
                assert_eq!(c.chain.out_shape, layer.in_shape);
            }
        }
        assert_eq!(space.layers[0].in_shape, vec![8, 8, 8]);
        assert_eq!(space.layers[2].in_shape, vec![12, 4, 4]);
        assert_eq!(space.fixed.len(), 4);
        assert_eq!(space.fixed[3].chain.out_shape, vec![4]);
    }

    #[test]
    fn lone_candidate_rejected() {
        let mut cfg = SpaceConfig::default();
        cfg.overrides.push(LayerOverride { layer: 1, candidates: vec!["conv1x1".into()], skip: Some(false) });
        let err = build_space(&cfg).unwrap_err().to_string();
        assert!(err.contains("layer 1 needs >=2 candidates"), "{err}");
    }

    #[test]
    fn missing_identity_flags_mandatory() {
        let mut cfg = SpaceConfig::default();
        cfg.overrides.push(LayerOverride {
            layer: 0,
            candidates: vec!["conv1x1".into(), "conv3x3".into()],
            skip: Some(false),
        });
        let space = build_space(&cfg).unwrap();
        assert!(space.layers[0].mandatory);
        assert!(!space.layers[1].mandatory);
    }

    #[test]
    fn shape_incompatible_candidate_names_layer() {
        let mut cfg = SpaceConfig::default();
        cfg.overrides.push(LayerOverride {
            layer: 2,
            candidates: vec!["identity".into(), "conv1x1_c5".into()],
            skip: Some(false),
        });
        let err = build_space(&cfg).unwrap_err().to_string();
        assert!(err.contains("layer 2") && err.contains("conv1x1_c5"), "{err}");

        cfg.overrides[0].candidates[1] = "dense4".into();
        let err = build_space(&cfg).unwrap_err().to_string();
        assert!(err.contains("layer 2") && err.contains("dense4"), "{err}");
    }

    #[test]
    fn unknown_operator_lists_valid_kinds() {
        let mut cfg = SpaceConfig::default();
        cfg.candidates.push("lstm".into());
        let err = build_space(&cfg).unwrap_err().to_string();
        assert!(err.contains("lstm") && err.contains("dwsep"), "{err}");
    }

    #[test]
    fn zero_only_in_skip_layers() {
        let mut cfg = SpaceConfig::default();
        cfg.overrides.push(LayerOverride { layer: 0, candidates: vec!["zero".into(), "conv1x1".into()], skip: Some(false) });
        assert!(build_space(&cfg).is_err());
        cfg.overrides[0].skip = Some(true);
        assert!(build_space(&cfg).is_ok());
    }

    #[test]
    fn identity_path_costs_fixed_only() {
        let space = build_space(&SpaceConfig::default()).unwrap();
        let path = Path::new(vec![0; 4]);
        assert_eq!(space.cost_of_path(&path).unwrap(), space.fixed_cost());
        let mut heavier = path.clone();
        heavier.choices[1] = 2;
        let a = space.cost_of_path(&path).unwrap();
        let b = space.cost_of_path(&heavier).unwrap();
        assert!(b.params > a.params && b.flops > a.flops);
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            parse_candidate("dwsep1x1_e2", 4).unwrap(),
            OperatorKind::DwSepConv { kernel: 1, expansion: Expansion::Two }
        );
        assert_eq!(parse_candidate("avgpool3", 4).unwrap(), OperatorKind::AvgPool { window: 3, stride: 1 });
        assert!(parse_candidate("dwsep3x5_e1", 4).is_err());
        assert!(parse_candidate("dwsep3x3_e3", 4).is_err());
    }
}
