use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DynamicConvConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Toy,
    ConvnextTinyStructural,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `relu(bn(conv3x3(x))) + x`
    Plain,
    /// Depthwise 7x7, layer norm, pointwise expand x4, gelu, pointwise project, layer scale, residual.
    Convnext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub block: BlockKind,
    pub input_channels: usize,
    /// Width of the stride-4 stage fed by the patchify stem.
    pub stem_channels: usize,
    /// Widths of the exported stages at strides 8, 16 and 32.
    pub stage_channels: [usize; 3],
    /// Block counts of the stride 4, 8, 16 and 32 stages.
    pub stage_depths: [usize; 4],
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            variant: BackboneVariant::Toy,
            block: BlockKind::Plain,
            input_channels: 1,
            stem_channels: 4,
            stage_channels: [8, 16, 32],
            stage_depths: [1, 1, 1, 1],
        }
    }

    pub fn convnext_tiny() -> Self {
        Self {
            variant: BackboneVariant::ConvnextTinyStructural,
            block: BlockKind::Convnext,
            input_channels: 3,
            stem_channels: 96,
            stage_channels: [192, 384, 768],
            stage_depths: [3, 3, 9, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtmConfig {
    pub enabled: bool,
    /// Per-branch output widths; `None` means half the input width, capped at 96.
    pub out_channels: Option<[usize; 3]>,
    pub dynamic: DynamicConvConfig,
    /// Reduction ratio of the channel-attention MLP.
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
    /// Apply two dynamic blocks after the residual pair, as written; one when false.
    pub outer_double: bool,
}

impl Default for FtmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            out_channels: None,
            dynamic: DynamicConvConfig::default(),
            channel_reduction: 4,
            spatial_kernel: 7,
            outer_double: true,
        }
    }
}

impl FtmConfig {
    pub fn out_width(&self, branch: usize, cin: usize) -> usize {
        match self.out_channels {
            Some(w) => w[branch],
            None => (cin / 2).clamp(1, 96),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Upsample branches 2 and 3 with transposed convolutions and concatenate channels.
    Concat,
    /// Project every branch to a common width, upsample, add.
    Add,
    /// Coarse-to-fine: project, upsample x2, add; twice.
    Stepwise,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "add" => Ok(Fusion::Add),
            "stepwise" => Ok(Fusion::Stepwise),
            other => Err(Error::Config(format!(
                "unknown fusion strategy {other:?} (expected concat, add or stepwise)"
            ))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Concat => "concat",
            Fusion::Add => "add",
            Fusion::Stepwise => "stepwise",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub ftm: FtmConfig,
    pub fusion: Fusion,
    /// Common width for additive fusion; defaults to branch 1's width.
    #[serde(default)]
    pub add_width: Option<usize>,
    #[serde(default)]
    pub head_bias_init: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Small network for desk-scale training: widths 8/16/32, FTM out 8, concat fusion.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            ftm: FtmConfig {
                out_channels: Some([8, 8, 8]),
                ..FtmConfig::default()
            },
            fusion: Fusion::Concat,
            add_width: None,
            head_bias_init: 0.0,
            seed: 0,
        }
    }

    /// ConvNeXt-Tiny geometry with default FTM and concat fusion, for accounting.
    pub fn convnext_tiny() -> Self {
        Self {
            backbone: BackboneConfig::convnext_tiny(),
            ftm: FtmConfig {
                dynamic: DynamicConvConfig {
                    kernel_size: 1,
                    kernels: 1,
                    reduction: 16,
                    ..DynamicConvConfig::default()
                },
                channel_reduction: 16,
                ..FtmConfig::default()
            },
            fusion: Fusion::Concat,
            add_width: None,
            head_bias_init: 0.0,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }

    /// Widths of the three branches entering fusion.
    pub fn branch_widths(&self) -> [usize; 3] {
        let c = self.backbone.stage_channels;
        if self.ftm.enabled {
            [0, 1, 2].map(|i| self.ftm.out_width(i, c[i]))
        } else {
            c
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let bad = |m: String| Err(Error::Config(m));
        if b.input_channels == 0 || b.stem_channels == 0 || b.stage_channels.contains(&0) {
            return bad("backbone widths must be positive".into());
        }
        if self.ftm.enabled {
            for (i, &cin) in b.stage_channels.iter().enumerate() {
                let out = self.ftm.out_width(i, cin);
                if out == 0 || out > cin {
                    return bad(format!(
                        "FTM {} output width {out} must be in 1..={cin} (input width)",
                        i + 1
                    ));
                }
            }
            let d = &self.ftm.dynamic;
            if d.kernels == 0 || d.kernel_size == 0 || d.kernel_size.is_multiple_of(2) {
                return bad("dynamic convolution needs at least one kernel of odd size".into());
            }
            if self.ftm.spatial_kernel.is_multiple_of(2) {
                return bad("spatial attention kernel must be odd".into());
            }
        }
        if self.add_width == Some(0) {
            return bad("add_width must be positive".into());
        }
        Ok(())
    }
}
