//! Stage-wise ConvNet search space, its 41-digit integer encoding, and decoding
//! into explicit layer lists.
//!
//! A network is described stage by stage. Layers inside a stage share one
//! configuration tuple; the first layer of a stage carries the stage stride and
//! every following layer has stride 1. Stage 8 is a fixed head
//! (Conv1x1 + pooling + FC with 1792 filters) and is never encoded.
//!
//! Digit layout of a [`NetworkEncoding`]:
//!
//! | digits  | meaning                                                   |
//! |---------|-----------------------------------------------------------|
//! | 0       | input resolution (pixels)                                 |
//! | 1       | stage 0 filters (shared with stage 1)                     |
//! | 2..=4   | stage 1 kernel, activation, #layers                       |
//! | 5..=40  | stages 2..=7: filters, kernel, expansion, SE, act, #layers |
//!
//! Activations are encoded as `0 = ReLU`, `1 = Swish`; SE as `0`/`1`. Filter and
//! resolution digits hold the actual channel count / pixel size.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of integer digits in an encoding.
pub const ENCODING_LEN: usize = 41;
/// Channels of the network input image.
pub const INPUT_CHANNELS: u32 = 3;
/// Filters of the fixed Conv1x1 head.
pub const HEAD_FILTERS: u32 = 1792;
/// Classifier width of the fixed head.
pub const NUM_CLASSES: u32 = 1000;
/// Version tag written into exported architecture documents.
pub const ARCH_SCHEMA_VERSION: u32 = 1;

/// Number of searched stages (0..=7).
pub const SEARCHED_STAGES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchSpaceError {
    #[error("invalid encoding at digit {digit}: {reason}")]
    InvalidEncoding { digit: usize, reason: String },
    #[error("architecture not representable in the search space: {0}")]
    NotRepresentable(String),
    #[error("malformed architecture document: {0}")]
    Document(String),
    #[error("malformed encoding text: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Conv,
    FusedIrb,
    Irb,
    Head,
}

impl LayerType {
    pub fn token(self) -> &'static str {
        match self {
            LayerType::Conv => "conv",
            LayerType::FusedIrb => "fused_irb",
            LayerType::Irb => "irb",
            LayerType::Head => "head",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "conv" => Some(LayerType::Conv),
            "fused_irb" => Some(LayerType::FusedIrb),
            "irb" => Some(LayerType::Irb),
            "head" => Some(LayerType::Head),
            _ => None,
        }
    }

    /// IRB and Fused-IRB blocks carry expansion and SE settings.
    pub fn is_block(self) -> bool {
        matches!(self, LayerType::FusedIrb | LayerType::Irb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn digit(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Swish => 1,
        }
    }

    pub fn from_digit(digit: u32) -> Option<Self> {
        match digit {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Swish),
            _ => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "relu" => Some(Activation::Relu),
            "swish" => Some(Activation::Swish),
            _ => None,
        }
    }
}

/// Filter grid `lo, lo + step, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRange {
    pub lo: u32,
    pub hi: u32,
    pub step: u32,
}

impl FilterRange {
    pub const fn new(lo: u32, hi: u32, step: u32) -> Self {
        Self { lo, hi, step }
    }

    pub fn values(&self) -> Vec<u32> {
        let step = self.step.max(1);
        (self.lo..=self.hi).step_by(step as usize).collect()
    }

    pub fn contains(&self, filters: u32) -> bool {
        let step = self.step.max(1);
        filters >= self.lo && filters <= self.hi && (filters - self.lo) % step == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: u8,
    pub layer_type: LayerType,
    pub first_layer_stride: u32,
    pub kernel_choices: Vec<u32>,
    /// Inclusive `[min, max]` number of layers.
    pub layer_range: (u32, u32),
    pub activation_choices: Vec<Activation>,
    /// Inclusive integer expansion range; blocks only.
    pub expansion_range: Option<(u32, u32)>,
    pub filters: FilterRange,
    pub se_choices: Vec<bool>,
}

/// What a single encoding digit controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DigitRole {
    Resolution,
    Filters,
    Kernel,
    Expansion,
    Se,
    Activation,
    Layers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DigitSlot {
    /// `None` for the resolution digit.
    pub stage: Option<u8>,
    pub role: DigitRole,
}

const BLOCK_ROLES: [DigitRole; 6] = [
    DigitRole::Filters,
    DigitRole::Kernel,
    DigitRole::Expansion,
    DigitRole::Se,
    DigitRole::Activation,
    DigitRole::Layers,
];

/// The frozen digit ordering.
pub fn digit_layout() -> [DigitSlot; ENCODING_LEN] {
    let mut slots = [DigitSlot {
        stage: None,
        role: DigitRole::Resolution,
    }; ENCODING_LEN];
    slots[1] = DigitSlot {
        stage: Some(0),
        role: DigitRole::Filters,
    };
    for (offset, role) in [DigitRole::Kernel, DigitRole::Activation, DigitRole::Layers]
        .into_iter()
        .enumerate()
    {
        slots[2 + offset] = DigitSlot {
            stage: Some(1),
            role,
        };
    }
    for stage in 2..SEARCHED_STAGES {
        for (offset, role) in BLOCK_ROLES.into_iter().enumerate() {
            slots[block_digit(stage, 0) + offset] = DigitSlot {
                stage: Some(stage as u8),
                role,
            };
        }
    }
    slots
}

/// Index of the first digit of block stage `stage` (2..=7) plus `offset`.
fn block_digit(stage: usize, offset: usize) -> usize {
    5 + 6 * (stage - 2) + offset
}

/// Digit index of `role` in `stage`, if that stage encodes it.
pub fn digit_index(stage: u8, role: DigitRole) -> Option<usize> {
    let stage = stage as usize;
    match (stage, role) {
        (0, DigitRole::Filters) => Some(1),
        (1, DigitRole::Kernel) => Some(2),
        (1, DigitRole::Activation) => Some(3),
        (1, DigitRole::Layers) => Some(4),
        (2..=7, role) => BLOCK_ROLES
            .iter()
            .position(|r| *r == role)
            .map(|offset| block_digit(stage, offset)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub stages: Vec<StageSpec>,
    pub resolution_values: Vec<u32>,
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        Self::table1()
    }
}

impl SearchSpaceSpec {
    /// The published ConvNet search space.
    pub fn table1() -> Self {
        use Activation::*;
        use LayerType::*;
        let acts = vec![Relu, Swish];
        let kernels = vec![3, 5];
        let se = vec![false, true];
        let block = |index: u8, layer_type, stride, layers, filters| StageSpec {
            index,
            layer_type,
            first_layer_stride: stride,
            kernel_choices: kernels.clone(),
            layer_range: layers,
            activation_choices: acts.clone(),
            expansion_range: Some((2, 6)),
            filters,
            se_choices: se.clone(),
        };
        let stages = vec![
            // Stage 0 is the single stem 3x3 convolution; only its filters are
            // searched and its activation follows stage 1.
            StageSpec {
                index: 0,
                layer_type: Conv,
                first_layer_stride: 2,
                kernel_choices: vec![3],
                layer_range: (1, 1),
                activation_choices: acts.clone(),
                expansion_range: None,
                filters: FilterRange::new(24, 32, 8),
                se_choices: vec![],
            },
            StageSpec {
                index: 1,
                layer_type: Conv,
                first_layer_stride: 1,
                kernel_choices: kernels.clone(),
                layer_range: (1, 4),
                activation_choices: acts.clone(),
                expansion_range: None,
                filters: FilterRange::new(24, 32, 8),
                se_choices: vec![],
            },
            block(2, FusedIrb, 2, (1, 8), FilterRange::new(32, 80, 16)),
            block(3, FusedIrb, 2, (1, 8), FilterRange::new(48, 112, 16)),
            block(4, Irb, 2, (1, 10), FilterRange::new(96, 192, 16)),
            block(5, Irb, 1, (0, 15), FilterRange::new(112, 224, 16)),
            block(6, Irb, 2, (1, 15), FilterRange::new(128, 416, 32)),
            block(7, Irb, 1, (0, 15), FilterRange::new(256, 832, 64)),
            StageSpec {
                index: 8,
                layer_type: Head,
                first_layer_stride: 1,
                kernel_choices: vec![1],
                layer_range: (1, 1),
                activation_choices: vec![],
                expansion_range: None,
                filters: FilterRange::new(HEAD_FILTERS, HEAD_FILTERS, 1),
                se_choices: vec![],
            },
        ];
        Self {
            stages,
            resolution_values: (0..10).map(|i| 224 + 32 * i).collect(),
        }
    }

    pub fn stage(&self, index: u8) -> &StageSpec {
        &self.stages[index as usize]
    }

    /// Allowed values of one digit, in ascending choice-index order.
    pub fn digit_values(&self, digit: usize) -> Vec<u32> {
        let slot = digit_layout()[digit];
        let Some(stage) = slot.stage else {
            return self.resolution_values.clone();
        };
        let spec = self.stage(stage);
        match slot.role {
            DigitRole::Resolution => self.resolution_values.clone(),
            DigitRole::Filters => spec.filters.values(),
            DigitRole::Kernel => spec.kernel_choices.clone(),
            DigitRole::Expansion => {
                let (lo, hi) = spec.expansion_range.unwrap_or((1, 1));
                (lo..=hi).collect()
            }
            DigitRole::Se => spec.se_choices.iter().map(|&s| s as u32).collect(),
            DigitRole::Activation => spec.activation_choices.iter().map(|a| a.digit()).collect(),
            DigitRole::Layers => (spec.layer_range.0..=spec.layer_range.1).collect(),
        }
    }

    /// Allowed values for every digit.
    pub fn domains(&self) -> Vec<Vec<u32>> {
        (0..ENCODING_LEN).map(|d| self.digit_values(d)).collect()
    }

    /// Number of choices per digit.
    pub fn choice_counts(&self) -> Vec<usize> {
        self.domains().iter().map(Vec::len).collect()
    }

    /// Number of distinct encodings in the space.
    pub fn cardinality(&self) -> BigUint {
        self.choice_counts()
            .into_iter()
            .fold(BigUint::from(1u32), |acc, k| acc * BigUint::from(k))
    }

    /// Lists every problem with `encoding`; empty iff it is a member of the space.
    pub fn validate(&self, encoding: &NetworkEncoding) -> Vec<Violation> {
        let digits = encoding.digits();
        if digits.len() != ENCODING_LEN {
            return vec![Violation::LengthMismatch(digits.len())];
        }
        digits
            .iter()
            .enumerate()
            .filter_map(|(digit, &value)| {
                let values = self.digit_values(digit);
                if values.contains(&value) {
                    return None;
                }
                let (lo, hi) = match (values.first(), values.last()) {
                    (Some(lo), Some(hi)) => (*lo, *hi),
                    _ => return Some(Violation::OutOfRange { digit, value }),
                };
                if value >= lo && value <= hi {
                    Some(Violation::OffGrid { digit, value })
                } else {
                    Some(Violation::OutOfRange { digit, value })
                }
            })
            .collect()
    }

    /// Per-digit choice indices of a valid encoding.
    pub fn to_indices(&self, encoding: &NetworkEncoding) -> Result<Vec<usize>, SearchSpaceError> {
        self.check(encoding)?;
        Ok(self
            .domains()
            .iter()
            .zip(encoding.digits())
            .map(|(values, v)| values.iter().position(|x| x == v).unwrap_or(0))
            .collect())
    }

    /// Encoding from per-digit choice indices; indices are clamped to the domain.
    pub fn from_indices(&self, indices: &[usize]) -> NetworkEncoding {
        let domains = self.domains();
        NetworkEncoding::new(
            domains
                .iter()
                .zip(indices)
                .map(|(values, &i)| values[i.min(values.len() - 1)])
                .collect(),
        )
    }

    /// The encoding picking the first choice of every digit.
    pub fn minimum_encoding(&self) -> NetworkEncoding {
        self.from_indices(&[0; ENCODING_LEN])
    }

    /// The encoding picking the last choice of every digit.
    pub fn maximum_encoding(&self) -> NetworkEncoding {
        self.from_indices(&[usize::MAX; ENCODING_LEN])
    }

    fn check(&self, encoding: &NetworkEncoding) -> Result<(), SearchSpaceError> {
        match self.validate(encoding).into_iter().next() {
            None => Ok(()),
            Some(v) => Err(SearchSpaceError::InvalidEncoding {
                digit: v.digit(),
                reason: v.to_string(),
            }),
        }
    }

    /// Expands an encoding into its explicit layer list.
    pub fn decode(&self, encoding: &NetworkEncoding) -> Result<NetworkArchitecture, SearchSpaceError> {
        self.check(encoding)?;
        let d = encoding.digits();
        let stem_filters = d[1];
        let stem_act = Activation::from_digit(d[3]).expect("validated");

        let mut configs = Vec::with_capacity(SEARCHED_STAGES);
        configs.push(StageConfig {
            stage: 0,
            kernel: self.stage(0).kernel_choices[0],
            filters: stem_filters,
            expansion: None,
            se: None,
            activation: stem_act,
            layers: 1,
        });
        configs.push(StageConfig {
            stage: 1,
            kernel: d[2],
            filters: stem_filters,
            expansion: None,
            se: None,
            activation: stem_act,
            layers: d[4],
        });
        for stage in 2..SEARCHED_STAGES {
            let digit = |offset| d[block_digit(stage, offset)];
            configs.push(StageConfig {
                stage: stage as u8,
                filters: digit(0),
                kernel: digit(1),
                expansion: Some(digit(2)),
                se: Some(digit(3) == 1),
                activation: Activation::from_digit(digit(4)).expect("validated"),
                layers: digit(5),
            });
        }

        let mut layers = Vec::new();
        let mut empty_stages = Vec::new();
        let mut channels = INPUT_CHANNELS;
        for config in configs {
            let spec = self.stage(config.stage);
            if config.layers == 0 {
                empty_stages.push(EmptyStage {
                    stage: config.stage,
                    kernel: config.kernel,
                    out_filters: config.filters,
                    expansion: config.expansion,
                    se: config.se,
                    activation: config.activation,
                });
                continue;
            }
            for i in 0..config.layers {
                layers.push(LayerConfig {
                    stage: config.stage,
                    layer_type: spec.layer_type,
                    kernel: config.kernel,
                    stride: if i == 0 { spec.first_layer_stride } else { 1 },
                    in_filters: channels,
                    out_filters: config.filters,
                    expansion: config.expansion,
                    se: config.se,
                    activation: config.activation,
                });
                channels = config.filters;
            }
        }
        Ok(NetworkArchitecture {
            resolution: d[0],
            layers,
            empty_stages,
            head: HeadConfig::fixed(channels),
        })
    }

    /// Inverse of [`decode`](Self::decode) for architectures that respect stage
    /// uniformity and the digit grids.
    ///
    /// A zero-layer stage without an [`EmptyStage`] record takes the first
    /// choice of each of its digits.
    pub fn encode(&self, arch: &NetworkArchitecture) -> Result<NetworkEncoding, SearchSpaceError> {
        use SearchSpaceError::NotRepresentable as Bad;

        let mut by_stage: Vec<Vec<&LayerConfig>> = vec![Vec::new(); SEARCHED_STAGES];
        let mut last_stage = 0u8;
        for layer in &arch.layers {
            if layer.stage as usize >= SEARCHED_STAGES {
                return Err(Bad(format!("layer in unknown stage {}", layer.stage)));
            }
            if layer.stage < last_stage {
                return Err(Bad(format!("stage {} appears after stage {last_stage}", layer.stage)));
            }
            last_stage = layer.stage;
            by_stage[layer.stage as usize].push(layer);
        }

        let mut configs = Vec::with_capacity(SEARCHED_STAGES);
        let mut channels = INPUT_CHANNELS;
        for (stage, layers) in by_stage.iter().enumerate() {
            let spec = self.stage(stage as u8);
            let Some(first) = layers.first() else {
                let empty = arch.empty_stages.iter().find(|e| e.stage as usize == stage);
                configs.push(self.empty_stage_config(stage as u8, empty));
                continue;
            };
            for (i, layer) in layers.iter().enumerate() {
                if layer.layer_type != spec.layer_type {
                    return Err(Bad(format!(
                        "stage {stage} holds a {} layer, expected {}",
                        layer.layer_type.token(),
                        spec.layer_type.token()
                    )));
                }
                let same = layer.kernel == first.kernel
                    && layer.out_filters == first.out_filters
                    && layer.expansion == first.expansion
                    && layer.se == first.se
                    && layer.activation == first.activation;
                if !same {
                    return Err(Bad(format!("stage {stage} mixes layer configurations")));
                }
                let stride = if i == 0 { spec.first_layer_stride } else { 1 };
                if layer.stride != stride {
                    return Err(Bad(format!("stage {stage} layer {i} has stride {}", layer.stride)));
                }
                if layer.in_filters != channels {
                    return Err(Bad(format!(
                        "stage {stage} layer {i} consumes {} channels, previous layer emits {channels}",
                        layer.in_filters
                    )));
                }
                channels = layer.out_filters;
            }
            if spec.layer_type.is_block() != first.expansion.is_some()
                || spec.layer_type.is_block() != first.se.is_some()
            {
                return Err(Bad(format!("stage {stage} expansion/SE presence does not match its type")));
            }
            configs.push(StageConfig {
                stage: stage as u8,
                kernel: first.kernel,
                filters: first.out_filters,
                expansion: first.expansion,
                se: first.se,
                activation: first.activation,
                layers: layers.len() as u32,
            });
        }

        let stem = &configs[0];
        let stage1 = &configs[1];
        if stem.layers != 1 {
            return Err(Bad(format!("stage 0 must hold exactly one layer, found {}", stem.layers)));
        }
        if stem.kernel != self.stage(0).kernel_choices[0] {
            return Err(Bad(format!("stage 0 kernel {} is fixed", stem.kernel)));
        }
        if stage1.filters != stem.filters || stage1.activation != stem.activation {
            return Err(Bad("stage 1 must share stage 0 filters and activation".into()));
        }
        if arch.head != HeadConfig::fixed(channels) {
            return Err(Bad("head differs from the fixed Conv1x1/pool/FC head".into()));
        }

        let mut digits = vec![0u32; ENCODING_LEN];
        digits[0] = arch.resolution;
        digits[1] = stem.filters;
        digits[2] = stage1.kernel;
        digits[3] = stage1.activation.digit();
        digits[4] = stage1.layers;
        for config in &configs[2..] {
            let stage = config.stage as usize;
            digits[block_digit(stage, 0)] = config.filters;
            digits[block_digit(stage, 1)] = config.kernel;
            digits[block_digit(stage, 2)] = config.expansion.unwrap_or(0);
            digits[block_digit(stage, 3)] = config.se.map(u32::from).unwrap_or(0);
            digits[block_digit(stage, 4)] = config.activation.digit();
            digits[block_digit(stage, 5)] = config.layers;
        }
        let encoding = NetworkEncoding::new(digits);
        match self.validate(&encoding).into_iter().next() {
            None => Ok(encoding),
            Some(v) => Err(Bad(v.to_string())),
        }
    }

    fn empty_stage_config(&self, stage: u8, empty: Option<&EmptyStage>) -> StageConfig {
        let first = |digit_role| {
            digit_index(stage, digit_role)
                .map(|d| self.digit_values(d)[0])
                .unwrap_or(0)
        };
        match empty {
            Some(e) => StageConfig {
                stage,
                kernel: e.kernel,
                filters: e.out_filters,
                expansion: e.expansion,
                se: e.se,
                activation: e.activation,
                layers: 0,
            },
            None => StageConfig {
                stage,
                kernel: first(DigitRole::Kernel),
                filters: first(DigitRole::Filters),
                expansion: Some(first(DigitRole::Expansion)),
                se: Some(first(DigitRole::Se) == 1),
                activation: Activation::from_digit(first(DigitRole::Activation)).unwrap_or(Activation::Relu),
                layers: 0,
            },
        }
    }
}

struct StageConfig {
    stage: u8,
    kernel: u32,
    filters: u32,
    expansion: Option<u32>,
    se: Option<bool>,
    activation: Activation,
    layers: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch(usize),
    OutOfRange { digit: usize, value: u32 },
    OffGrid { digit: usize, value: u32 },
}

impl Violation {
    pub fn digit(&self) -> usize {
        match self {
            Violation::LengthMismatch(len) => (*len).min(ENCODING_LEN),
            Violation::OutOfRange { digit, .. } | Violation::OffGrid { digit, .. } => *digit,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch(len) => write!(f, "expected {ENCODING_LEN} digits, got {len}"),
            Violation::OutOfRange { digit, value } => write!(f, "digit {digit} value {value} out of range"),
            Violation::OffGrid { digit, value } => write!(f, "digit {digit} value {value} off grid"),
        }
    }
}

/// One network as 41 integers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetworkEncoding(Vec<u32>);

impl NetworkEncoding {
    pub fn new(digits: Vec<u32>) -> Self {
        Self(digits)
    }

    pub fn digits(&self) -> &[u32] {
        &self.0
    }

    pub fn into_digits(self) -> Vec<u32> {
        self.0
    }
}

/// Comma separated digits; also the canonical dedup key.
impl fmt::Display for NetworkEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkEncoding {
    type Err = SearchSpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| SearchSpaceError::Parse(format!("digit {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub stage: u8,
    #[serde(rename = "type")]
    pub layer_type: LayerType,
    pub kernel: u32,
    pub stride: u32,
    pub in_filters: u32,
    pub out_filters: u32,
    pub expansion: Option<u32>,
    pub se: Option<bool>,
    pub activation: Activation,
}

/// Configuration of a stage that was searched with zero layers. It produces
/// no layers but keeps the encoding recoverable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptyStage {
    pub stage: u8,
    pub kernel: u32,
    pub out_filters: u32,
    pub expansion: Option<u32>,
    pub se: Option<bool>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_filters: u32,
    pub filters: u32,
    pub num_classes: u32,
}

impl HeadConfig {
    pub fn fixed(in_filters: u32) -> Self {
        Self {
            in_filters,
            filters: HEAD_FILTERS,
            num_classes: NUM_CLASSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub resolution: u32,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub empty_stages: Vec<EmptyStage>,
    pub head: HeadConfig,
}

impl NetworkArchitecture {
    /// Number of layers in `stage`.
    pub fn stage_depth(&self, stage: u8) -> usize {
        self.layers.iter().filter(|l| l.stage == stage).count()
    }

    /// Output filters of each non-empty stage, in order.
    pub fn stage_filters(&self) -> Vec<u32> {
        let mut out: Vec<(u8, u32)> = Vec::new();
        for layer in &self.layers {
            match out.last() {
                Some((stage, _)) if *stage == layer.stage => {}
                _ => out.push((layer.stage, layer.out_filters)),
            }
        }
        out.into_iter().map(|(_, f)| f).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ArchitectureDocument {
    schema_version: u32,
    resolution: u32,
    layers: Vec<LayerConfig>,
    empty_stages: Vec<EmptyStage>,
    head: HeadDocument,
}

#[derive(Serialize, Deserialize)]
struct HeadDocument {
    #[serde(rename = "type")]
    kind: String,
    in_filters: u32,
    filters: u32,
    num_classes: u32,
}

const HEAD_KIND: &str = "conv1x1_pool_fc";

/// Serializes an architecture into a schema-versioned JSON document.
pub fn export_architecture(arch: &NetworkArchitecture) -> String {
    let doc = ArchitectureDocument {
        schema_version: ARCH_SCHEMA_VERSION,
        resolution: arch.resolution,
        layers: arch.layers.clone(),
        empty_stages: arch.empty_stages.clone(),
        head: HeadDocument {
            kind: HEAD_KIND.to_string(),
            in_filters: arch.head.in_filters,
            filters: arch.head.filters,
            num_classes: arch.head.num_classes,
        },
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("architecture document serializes");
    text.push('\n');
    text
}

pub fn import_architecture(text: &str) -> Result<NetworkArchitecture, SearchSpaceError> {
    let doc: ArchitectureDocument =
        serde_json::from_str(text).map_err(|e| SearchSpaceError::Document(e.to_string()))?;
    if doc.schema_version != ARCH_SCHEMA_VERSION {
        return Err(SearchSpaceError::Document(format!(
            "unsupported schema version {}",
            doc.schema_version
        )));
    }
    if doc.head.kind != HEAD_KIND {
        return Err(SearchSpaceError::Document(format!("unknown head type {:?}", doc.head.kind)));
    }
    Ok(NetworkArchitecture {
        resolution: doc.resolution,
        layers: doc.layers,
        empty_stages: doc.empty_stages,
        head: HeadConfig {
            in_filters: doc.head.in_filters,
            filters: doc.head.filters,
            num_classes: doc.head.num_classes,
        },
    })
}
