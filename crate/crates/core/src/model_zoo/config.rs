use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::feature_store::FEATURE_DIM;

/// Which architecture to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    /// Video only.
    V,
    /// Audio only.
    A,
    /// Early concatenation of the pooled encoder outputs.
    EC,
    /// Late concatenation: each pooled output passes a dense layer first.
    LC,
    /// Element-wise average.
    EA,
    /// Element-wise product.
    EP,
    /// One bidirectional cross-attention stage.
    CT,
    /// Two cascaded cross-attention stages.
    SNIFR,
}

impl FusionKind {
    pub const ALL: [FusionKind; 8] = [
        FusionKind::V,
        FusionKind::A,
        FusionKind::EC,
        FusionKind::LC,
        FusionKind::EA,
        FusionKind::EP,
        FusionKind::CT,
        FusionKind::SNIFR,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::V => "V",
            FusionKind::A => "A",
            FusionKind::EC => "EC",
            FusionKind::LC => "LC",
            FusionKind::EA => "EA",
            FusionKind::EP => "EP",
            FusionKind::CT => "CT",
            FusionKind::SNIFR => "SNIFR",
        }
    }

    pub fn uses_audio(self) -> bool {
        self != FusionKind::V
    }

    pub fn uses_video(self) -> bool {
        self != FusionKind::A
    }

    /// Number of cross-attention stages.
    pub fn cascade_stages(self) -> usize {
        match self {
            FusionKind::CT => 1,
            FusionKind::SNIFR => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    pub input_dim: usize,
    /// Width after the input projection.
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub dropout_p: f64,
    pub hidden_classifier: usize,
    pub lc_dense: usize,
    pub n_classes: usize,
    /// Bias terms on the attention Q/K/V/O projections.
    pub proj_bias: bool,
    /// Ablation switch: cascade stages pass their inputs through unchanged.
    pub cascade_identity: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(fusion: FusionKind) -> Self {
        Self {
            fusion,
            input_dim: FEATURE_DIM,
            d_model: 256,
            n_heads: 1,
            d_ff: 512,
            n_encoder_layers: 1,
            dropout_p: 0.1,
            hidden_classifier: 120,
            lc_dense: 128,
            n_classes: 4,
            proj_bias: true,
            cascade_identity: false,
            seed: 0,
        }
    }

    /// Small widths used by gradient checks: `d_model = 8`, `d_ff = 16`.
    pub fn tiny(fusion: FusionKind) -> Self {
        Self { d_model: 8, d_ff: 16, ..Self::new(fusion) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("hidden_classifier", self.hidden_classifier),
            ("lc_dense", self.lc_dense),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model < 2 {
            return Err(ModelError::Config("d_model must be at least 2 for layer norm".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!("dropout {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Width of the vector entering the classifier.
    pub fn head_input_dim(&self) -> usize {
        match self.fusion {
            FusionKind::V | FusionKind::A | FusionKind::EA | FusionKind::EP => self.d_model,
            FusionKind::EC | FusionKind::CT | FusionKind::SNIFR => 2 * self.d_model,
            FusionKind::LC => 2 * self.lc_dense,
        }
    }
}
