use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::Linear;
use super::cost::{elems, CostRow};
use super::{Init, ParamId, Session};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelAttention {
    /// Independent sigmoid gate per kernel.
    #[default]
    Sigmoid,
    /// Softmax across the kernel axis.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicConvConfig {
    /// Number of base kernels.
    pub kernels: usize,
    /// Hidden width of the attention trunk is `cin / reduction`, at least `min_hidden`.
    pub reduction: usize,
    pub min_hidden: usize,
    pub kernel_size: usize,
    pub kernel_attention: KernelAttention,
}

impl Default for DynamicConvConfig {
    fn default() -> Self {
        Self {
            kernels: 4,
            reduction: 4,
            min_hidden: 4,
            kernel_size: 3,
            kernel_attention: KernelAttention::Sigmoid,
        }
    }
}

impl DynamicConvConfig {
    pub fn hidden(&self, cin: usize) -> usize {
        (cin / self.reduction.max(1)).max(self.min_hidden).max(1)
    }
}

/// Per-sample attention vectors, each shaped `(n, len, 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct Attentions {
    /// Over base kernels, length `kernels`.
    pub kernel: Var,
    /// Over kernel positions, length `k * k`.
    pub spatial: Var,
    /// Over input channels.
    pub input: Var,
    /// Over output channels.
    pub output: Var,
}

/// Convolution whose kernel is an input-conditioned, attention-weighted
/// combination of a bank of base kernels along four axes.
#[derive(Clone, Debug)]
pub struct DynamicConv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub config: DynamicConvConfig,
    /// Base kernels stacked as `(kernels * cout, cin, k, k)`.
    pub bank: ParamId,
    pub trunk: Linear,
    pub head_kernel: Linear,
    pub head_spatial: Linear,
    pub head_input: Linear,
    pub head_output: Linear,
}

impl DynamicConv2d {
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        config: &DynamicConvConfig,
    ) -> Self {
        let k = config.kernel_size;
        let hidden = config.hidden(cin);
        let bank = init.he(
            format!("{name}.bank"),
            [config.kernels * cout, cin, k, k],
            cin * k * k,
        );
        Self {
            name: name.to_string(),
            cin,
            cout,
            config: config.clone(),
            bank,
            trunk: Linear::new(init, &format!("{name}.attn.fc"), cin, hidden, true),
            head_kernel: Linear::new(init, &format!("{name}.attn.kernel"), hidden, config.kernels, true),
            head_spatial: Linear::new(init, &format!("{name}.attn.spatial"), hidden, k * k, true),
            head_input: Linear::new(init, &format!("{name}.attn.input"), hidden, cin, true),
            head_output: Linear::new(init, &format!("{name}.attn.output"), hidden, cout, true),
        }
    }

    fn check_input<T: Element>(&self, s: &Session<'_, T>, x: Var) -> Result<()> {
        let shape = s.graph.shape(x);
        if shape[1] != self.cin {
            return Err(Error::ShapeMismatch {
                op: "dynamic_conv2d",
                lhs: shape,
                rhs: [self.cout, self.cin, self.config.kernel_size, self.config.kernel_size],
            });
        }
        Ok(())
    }

    /// Pool, shared FC trunk with relu, then one head per axis squashed into (0, 1).
    pub fn attention<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Attentions> {
        self.check_input(s, x)?;
        let pooled = s.graph.global_avg_pool(x);
        let h = self.trunk.forward(s, pooled)?;
        let h = s.graph.relu(h);
        let ak = self.head_kernel.forward(s, h)?;
        let kernel = match self.config.kernel_attention {
            KernelAttention::Sigmoid => s.graph.sigmoid(ak),
            KernelAttention::Softmax => s.graph.softmax_channels(ak),
        };
        let asp = self.head_spatial.forward(s, h)?;
        let ai = self.head_input.forward(s, h)?;
        let ao = self.head_output.forward(s, h)?;
        Ok(Attentions {
            kernel,
            spatial: s.graph.sigmoid(asp),
            input: s.graph.sigmoid(ai),
            output: s.graph.sigmoid(ao),
        })
    }

    /// The aggregated per-sample kernels `(n * cout, cin, k, k)`.
    pub fn aggregate<T: Element>(&self, s: &mut Session<'_, T>, att: &Attentions) -> Result<Var> {
        let bank = s.param(self.bank);
        s.graph
            .kernel_aggregate(att.kernel, att.spatial, att.input, att.output, bank)
    }

    /// Same-padded, stride-1 convolution with externally supplied attentions.
    pub fn forward_with<T: Element>(&self, s: &mut Session<'_, T>, x: Var, att: &Attentions) -> Result<Var> {
        self.check_input(s, x)?;
        let kernel = self.aggregate(s, att)?;
        s.graph
            .conv2d_per_sample(x, kernel, None, 1, self.config.kernel_size / 2)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let att = self.attention(s, x)?;
        self.forward_with(s, x, &att)
    }

    pub fn params(&self) -> u64 {
        let k = self.config.kernel_size;
        (self.config.kernels * self.cout * self.cin * k * k) as u64
            + [&self.trunk, &self.head_kernel, &self.head_spatial, &self.head_input, &self.head_output]
                .iter()
                .map(|l| l.params())
                .sum::<u64>()
    }

    pub fn account(&self, input: Shape, rows: &mut Vec<CostRow>) -> Shape {
        let n = input[0];
        let k = self.config.kernel_size;
        let kk = (k * k) as u64;
        let heads = [&self.trunk, &self.head_kernel, &self.head_spatial, &self.head_input, &self.head_output];
        let attn_macs = elems(input)
            + heads.iter().map(|l| (n * l.din * l.dout) as u64).sum::<u64>()
            + (n * (self.config.kernels + k * k + self.cin + self.cout)) as u64;
        let per_kernel = self.cout as u64 * self.cin as u64 * kk;
        // weighted sum over the bank, then three broadcast multiplies
        let aggregate_macs = n as u64 * per_kernel * (self.config.kernels as u64 + 3);
        let out = [n, self.cout, input[2], input[3]];
        let conv_macs = self.cin as u64 * kk * elems(out);
        rows.push(CostRow::new(
            &self.name,
            "dynamic_conv2d",
            self.params(),
            attn_macs + aggregate_macs + conv_macs,
        ));
        out
    }
}
