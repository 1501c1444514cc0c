use rand::Rng;

use super::config::FtmConfig;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, ChannelAttention, CostRow, DynamicConv2d, Init, Session, SpatialAttention};
use crate::tensor::{numel, Element, Shape, Var};

/// Dynamic convolution followed by relu and batch norm.
#[derive(Clone, Debug)]
pub struct DynamicBlock {
    pub conv: DynamicConv2d,
    pub bn: BatchNorm2d,
}

impl DynamicBlock {
    fn new<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cin: usize, cout: usize, cfg: &FtmConfig) -> Self {
        Self {
            conv: DynamicConv2d::new(init, &format!("{name}.dynconv"), cin, cout, &cfg.dynamic),
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = s.graph.relu(y);
        self.bn.forward(s, y)
    }

    fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let out = self.conv.account(input, rows);
        rows.push(CostRow::new(
            format!("{}.relu", self.conv.name),
            "elementwise",
            0,
            numel(out) as u64,
        ));
        self.bn.account(out, rows)
    }
}

/// Focus transition module: channel attention, two residual dynamic blocks,
/// one or two width-reducing dynamic blocks, spatial attention.
#[derive(Clone, Debug)]
pub struct Ftm {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub channel: ChannelAttention,
    /// `[Y1, Y2]`, both `cin -> cin`, each wrapped in a residual.
    pub residual: [DynamicBlock; 2],
    /// `Y3: cin -> cout`, then optionally `Y4: cout -> cout`.
    pub outer: Vec<DynamicBlock>,
    pub spatial: SpatialAttention,
}

/// Intermediate maps of one FTM pass.
#[derive(Clone, Copy, Debug)]
pub struct FtmTrace {
    pub channel: Var,
    pub a: Var,
    pub b: Var,
    pub p: Var,
    pub out: Var,
}

impl Ftm {
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &FtmConfig,
    ) -> Self {
        let channel = ChannelAttention::new(init, &format!("{name}.channel_attention"), cin, cfg.channel_reduction);
        let residual = [
            DynamicBlock::new(init, &format!("{name}.y1"), cin, cin, cfg),
            DynamicBlock::new(init, &format!("{name}.y2"), cin, cin, cfg),
        ];
        let mut outer = vec![DynamicBlock::new(init, &format!("{name}.y3"), cin, cout, cfg)];
        if cfg.outer_double {
            outer.push(DynamicBlock::new(init, &format!("{name}.y4"), cout, cout, cfg));
        }
        let spatial = SpatialAttention::new(init, &format!("{name}.spatial_attention"), cfg.spatial_kernel);
        Self {
            name: name.to_string(),
            cin,
            cout,
            channel,
            residual,
            outer,
            spatial,
        }
    }

    pub fn trace<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<FtmTrace> {
        let shape = s.graph.shape(x);
        if shape[1] != self.cin {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} channels, got shape {shape:?}",
                self.name, self.cin
            )));
        }
        let c = self.channel.forward(s, x)?;
        let y = self.residual[0].forward(s, c)?;
        let a = s.graph.add(y, c)?;
        let y = self.residual[1].forward(s, a)?;
        let b = s.graph.add(y, a)?;
        let mut p = b;
        for block in &self.outer {
            p = block.forward(s, p)?;
        }
        let out = self.spatial.forward(s, p)?;
        Ok(FtmTrace {
            channel: c,
            a,
            b,
            p,
            out,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(s, x)?.out)
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let mut shape = self.channel.account(input, rows);
        for (i, block) in self.residual.iter().enumerate() {
            shape = block.account(shape, rows);
            rows.push(CostRow::new(
                format!("{}.residual{}", self.name, i + 1),
                "elementwise",
                0,
                numel(shape) as u64,
            ));
        }
        for block in &self.outer {
            shape = block.account(shape, rows);
        }
        self.spatial.account(shape, rows)
    }
}
