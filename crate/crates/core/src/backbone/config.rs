use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Vgg,
    Resnet,
    Seresnet,
}

/// Where frequency attention is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FefaMode {
    None,
    /// One layer before the input layer.
    Single,
    /// Before the input and before every stage that changes the frequency size.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    pub channel_widths: Vec<usize>,
    /// Residual blocks per stage (conv layers per stage for `vgg`).
    pub block_counts: Vec<usize>,
    pub embedding_dim: usize,
    pub se_reduction: usize,
    pub fefa_mode: FefaMode,
    pub fefa_bias: bool,
    pub fefa_input_dependent: bool,
    /// Frequency bins of the network input.
    #[serde(default = "default_bins")]
    pub input_bins: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Weight of the old value in the batch-norm running averages.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bins() -> usize {
    257
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.9
}

impl BackboneConfig {
    pub fn new(family: Family, fefa_mode: FefaMode) -> Self {
        BackboneConfig {
            family,
            channel_widths: vec![16, 32, 64],
            block_counts: match family {
                Family::Vgg => vec![1, 1, 1],
                Family::Resnet | Family::Seresnet => vec![2, 2, 2],
            },
            embedding_dim: 128,
            se_reduction: 4,
            fefa_mode,
            fefa_bias: true,
            fefa_input_dependent: true,
            input_bins: default_bins(),
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    /// Same architecture with a different attention setting.
    pub fn with_fefa(&self, mode: FefaMode) -> Self {
        BackboneConfig {
            fefa_mode: mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return bad("channel_widths must be non-empty and positive".into());
        }
        if self.block_counts.len() != self.channel_widths.len() || self.block_counts.contains(&0) {
            return bad("block_counts must give a positive count for every stage".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.input_bins < 2 {
            return bad("input_bins must be at least 2".into());
        }
        if self.family == Family::Seresnet {
            if self.se_reduction == 0 {
                return bad("se_reduction must be positive".into());
            }
            if let Some(w) = self
                .channel_widths
                .iter()
                .find(|&&w| w % self.se_reduction != 0)
            {
                return bad(format!(
                    "se_reduction {} does not divide channel width {w}",
                    self.se_reduction
                ));
            }
        }
        if self.stage0_bins() == 0 || self.stage_bins().contains(&0) {
            return bad(format!(
                "input_bins {} too small for the network depth",
                self.input_bins
            ));
        }
        Ok(())
    }

    /// Frequency size entering stage 0.
    pub fn stage0_bins(&self) -> usize {
        match self.family {
            Family::Vgg => self.input_bins,
            // stem: conv keeps the size, 2x2 pool halves it
            Family::Resnet | Family::Seresnet => self.input_bins / 2,
        }
    }

    /// Frequency size leaving each stage.
    pub fn stage_bins(&self) -> Vec<usize> {
        let mut f = self.stage0_bins();
        self.channel_widths
            .iter()
            .map(|_| {
                f = match self.family {
                    Family::Vgg => f / 2,
                    Family::Resnet | Family::Seresnet => f.div_ceil(2),
                };
                f
            })
            .collect()
    }

    /// Frequency sizes of every attention layer, input first. Stage entries
    /// are `(stage index, bins)`.
    pub fn fefa_points(&self) -> (Option<usize>, Vec<(usize, usize)>) {
        match self.fefa_mode {
            FefaMode::None => (None, vec![]),
            FefaMode::Single => (Some(self.input_bins), vec![]),
            FefaMode::Multi => {
                let outs = self.stage_bins();
                let mut fin = self.stage0_bins();
                let mut stages = Vec::new();
                for (s, &fout) in outs.iter().enumerate() {
                    // a stage fed directly by the input is already covered
                    let fed_by_input = s == 0 && self.family == Family::Vgg;
                    if fout != fin && !fed_by_input {
                        stages.push((s, fin));
                    }
                    fin = fout;
                }
                (Some(self.input_bins), stages)
            }
        }
    }
}
