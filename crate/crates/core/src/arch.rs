//! MLP architectures with an optional fair dropout placement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairdropout::FairDropoutConfig;
use crate::nn::{DenseLayer, Layer, Model};
use crate::seed;

/// Where the fair dropout layer goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPosition {
    /// After the activation of hidden layer `i`.
    Hidden(usize),
    /// After a new linear projection inserted before the classifier head.
    Projection,
}

impl std::fmt::Display for DropoutPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropoutPosition::Hidden(i) => write!(f, "hidden{i}"),
            DropoutPosition::Projection => f.write_str("projection"),
        }
    }
}

impl std::str::FromStr for DropoutPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "projection" {
            return Ok(DropoutPosition::Projection);
        }
        s.strip_prefix("hidden")
            .and_then(|i| i.parse().ok())
            .map(DropoutPosition::Hidden)
            .ok_or_else(|| Error::Config(format!("unknown dropout position '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairDropoutSpec {
    pub position: DropoutPosition,
    pub p_gen: f64,
    pub p_mem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fair_dropout: Option<FairDropoutSpec>,
}

impl ModelSpec {
    pub fn new(input: usize, hidden: Vec<usize>, classes: usize) -> Self {
        ModelSpec {
            input,
            hidden,
            classes,
            fair_dropout: None,
        }
    }

    pub fn with_fair_dropout(mut self, fd: FairDropoutSpec) -> Self {
        self.fair_dropout = Some(fd);
        self
    }

    /// Build with Glorot weights drawn from `init_seed`. Dense layers are
    /// numbered in order from 0.
    pub fn build(&self, init_seed: u64, allocation_seed: u64) -> Result<Model> {
        if self.classes == 0 || self.input == 0 {
            return Err(Error::Config("input and class counts must be >= 1".into()));
        }
        let mut rng = seed::rng(init_seed);
        let mut layers = Vec::new();
        let mut width = self.input;
        let mut index = 0;
        let fd = self.fair_dropout;
        if let Some(FairDropoutSpec {
            position: DropoutPosition::Hidden(i),
            ..
        }) = fd
        {
            if i >= self.hidden.len() {
                return Err(Error::Config(format!(
                    "fair dropout after hidden layer {i}, but the model has {}",
                    self.hidden.len()
                )));
            }
        }
        let dropout = |width: usize, spec: &FairDropoutSpec| -> Result<Layer> {
            Ok(Layer::FairDropout(FairDropoutConfig::new(
                width,
                spec.p_gen,
                spec.p_mem,
                allocation_seed,
            )?))
        };
        for (i, &h) in self.hidden.iter().enumerate() {
            layers.push(Layer::Dense(DenseLayer::init(width, h, index, &mut rng)?));
            layers.push(Layer::relu(h));
            index += 1;
            width = h;
            if let Some(spec) = fd
                .as_ref()
                .filter(|s| s.position == DropoutPosition::Hidden(i))
            {
                layers.push(dropout(h, spec)?);
            }
        }
        if let Some(spec) = fd
            .as_ref()
            .filter(|s| s.position == DropoutPosition::Projection)
        {
            layers.push(Layer::Dense(DenseLayer::init(
                width, width, index, &mut rng,
            )?));
            index += 1;
            layers.push(dropout(width, spec)?);
        }
        layers.push(Layer::Dense(DenseLayer::init(
            width,
            self.classes,
            index,
            &mut rng,
        )?));
        Model::new(layers, init_seed)
    }
}
