use rand::Rng;

use super::config::{BackboneConfig, BlockKind};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, CostRow, DepthwiseConv2d, Init, LayerNorm2d, ParamId, ParamKind, Session};
use crate::tensor::{Element, Shape, Var};

#[derive(Clone, Debug)]
enum Norm {
    Batch(BatchNorm2d),
    Layer(LayerNorm2d),
}

impl Norm {
    fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, kind: BlockKind, name: &str, c: usize) -> Self {
        match kind {
            BlockKind::Plain => Norm::Batch(BatchNorm2d::new(init, name, c)),
            BlockKind::Convnext => Norm::Layer(LayerNorm2d::new(init, name, c)),
        }
    }

    fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Norm::Batch(n) => n.forward(s, x),
            Norm::Layer(n) => n.forward(s, x),
        }
    }

    fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        match self {
            Norm::Batch(n) => n.account(input, rows),
            Norm::Layer(n) => n.account(input, rows),
        }
    }
}

#[derive(Clone, Debug)]
enum Block {
    Plain {
        conv: Conv2d,
        bn: BatchNorm2d,
    },
    Convnext {
        dw: DepthwiseConv2d,
        norm: LayerNorm2d,
        expand: Conv2d,
        project: Conv2d,
        scale: ParamId,
        name: String,
    },
}

impl Block {
    fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, kind: BlockKind, name: &str, c: usize) -> Self {
        match kind {
            BlockKind::Plain => Block::Plain {
                conv: Conv2d::new(init, &format!("{name}.conv"), c, c, 3, 1, 1, false),
                bn: BatchNorm2d::new(init, &format!("{name}.bn"), c),
            },
            BlockKind::Convnext => Block::Convnext {
                dw: DepthwiseConv2d::new(init, &format!("{name}.dwconv"), c, 7, true),
                norm: LayerNorm2d::new(init, &format!("{name}.norm"), c),
                expand: Conv2d::new(init, &format!("{name}.pwconv1"), c, 4 * c, 1, 1, 0, true),
                project: Conv2d::new(init, &format!("{name}.pwconv2"), 4 * c, c, 1, 1, 0, true),
                scale: init.constant(format!("{name}.gamma"), [1, c, 1, 1], 1e-6, ParamKind::NoDecay),
                name: name.to_string(),
            },
        }
    }

    fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Plain { conv, bn } => {
                let y = conv.forward(s, x)?;
                let y = bn.forward(s, y)?;
                let y = s.graph.relu(y);
                s.graph.add(y, x)
            }
            Block::Convnext {
                dw,
                norm,
                expand,
                project,
                scale,
                ..
            } => {
                let y = dw.forward(s, x)?;
                let y = norm.forward(s, y)?;
                let y = expand.forward(s, y)?;
                let y = s.graph.gelu(y);
                let y = project.forward(s, y)?;
                let g = s.param(*scale);
                let y = s.graph.mul(y, g)?;
                s.graph.add(y, x)
            }
        }
    }

    fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let n = crate::tensor::numel(input) as u64;
        match self {
            Block::Plain { conv, bn } => {
                let out = conv.account(input, rows);
                bn.account(out, rows);
                rows.push(CostRow::new(format!("{}.relu_add", conv.name), "elementwise", 0, 2 * n));
                out
            }
            Block::Convnext {
                dw,
                norm,
                expand,
                project,
                name,
                ..
            } => {
                let out = dw.account(input, rows);
                norm.account(out, rows);
                let wide = expand.account(out, rows);
                rows.push(CostRow::new(
                    format!("{name}.gelu"),
                    "elementwise",
                    0,
                    crate::tensor::numel(wide) as u64,
                ));
                project.account(wide, rows);
                let c = input[1] as u64;
                rows.push(CostRow::new(format!("{name}.scale_add"), "elementwise", c, 2 * n));
                input
            }
        }
    }
}

/// Down-sampling step in front of a stage.
#[derive(Clone, Debug)]
struct Transition {
    conv: Conv2d,
    /// Applied before the conv for ConvNeXt, after it (with relu) for plain blocks.
    norm: Norm,
    kind: BlockKind,
}

impl Transition {
    fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self.kind {
            BlockKind::Convnext => {
                let y = self.norm.forward(s, x)?;
                self.conv.forward(s, y)
            }
            BlockKind::Plain => {
                let y = self.conv.forward(s, x)?;
                let y = self.norm.forward(s, y)?;
                Ok(s.graph.relu(y))
            }
        }
    }

    fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        match self.kind {
            BlockKind::Convnext => {
                self.norm.account(input, rows);
                self.conv.account(input, rows)
            }
            BlockKind::Plain => {
                let out = self.conv.account(input, rows);
                self.norm.account(out, rows);
                rows.push(CostRow::new(
                    format!("{}.relu", self.conv.name),
                    "elementwise",
                    0,
                    crate::tensor::numel(out) as u64,
                ));
                out
            }
        }
    }
}

/// Four-stage hierarchical backbone exporting the stride 8, 16 and 32 stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// `transitions[0]` is the stride-4 stem.
    transitions: Vec<Transition>,
    stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, config: &BackboneConfig) -> Self {
        let kind = config.block;
        let widths = [
            config.stem_channels,
            config.stage_channels[0],
            config.stage_channels[1],
            config.stage_channels[2],
        ];
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            let (cin, k, name) = if i == 0 {
                (config.input_channels, 4, "backbone.stem".to_string())
            } else {
                (widths[i - 1], 2, format!("backbone.down{i}"))
            };
            // ConvNeXt normalizes the stem after its conv and the later transitions before
            let norm_width = if kind == BlockKind::Convnext && i > 0 { cin } else { c };
            let conv = Conv2d::new(init, &format!("{name}.conv"), cin, c, k, k, 0, kind == BlockKind::Convnext);
            let norm = Norm::new(init, kind, &format!("{name}.norm"), norm_width);
            transitions.push(Transition {
                conv,
                norm,
                kind,
            });
            let blocks = (0..config.stage_depths[i])
                .map(|j| Block::new(init, kind, &format!("backbone.stage{i}.block{j}"), c))
                .collect();
            stages.push(blocks);
        }
        Self {
            config: config.clone(),
            transitions,
            stages,
        }
    }

    fn stem<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let t = &self.transitions[0];
        match self.config.block {
            BlockKind::Convnext => {
                let y = t.conv.forward(s, x)?;
                t.norm.forward(s, y)
            }
            BlockKind::Plain => t.forward(s, x),
        }
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape[1] != self.config.input_channels {
            return Err(Error::InvalidArgument(format!(
                "backbone expects {} input channels, got shape {shape:?}",
                self.config.input_channels
            )));
        }
        if shape[2] == 0 || shape[3] == 0 || !shape[2].is_multiple_of(32) || !shape[3].is_multiple_of(32) {
            return Err(Error::InvalidArgument(format!(
                "input height and width must be positive multiples of 32, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Returns the stride 8, 16 and 32 feature maps.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<[Var; 3]> {
        self.check_input(s.graph.shape(x))?;
        let mut y = self.stem(s, x)?;
        let mut out = Vec::with_capacity(3);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                y = self.transitions[i].forward(s, y)?;
            }
            for b in blocks {
                y = b.forward(s, y)?;
            }
            if i > 0 {
                out.push(y);
            }
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> [Shape; 3] {
        let t = &self.transitions[0];
        let mut shape = match self.config.block {
            BlockKind::Convnext => {
                let out = t.conv.account(input, rows);
                t.norm.account(out, rows)
            }
            BlockKind::Plain => t.account(input, rows),
        };
        let mut out = Vec::with_capacity(3);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                shape = self.transitions[i].account(shape, rows);
            }
            for b in blocks {
                shape = b.account(shape, rows);
            }
            if i > 0 {
                out.push(shape);
            }
        }
        [out[0], out[1], out[2]]
    }
}
