//! FFNet assembly: backbone, per-branch focus transition modules, fusion,
//! and a 1x1 density head with relu.

mod backbone;
mod config;
mod ftm;
mod fusion;

pub use backbone::Backbone;
pub use config::{BackboneConfig, BackboneVariant, BlockKind, Fusion, FtmConfig, ModelConfig};
pub use ftm::{DynamicBlock, Ftm, FtmTrace};
pub use fusion::FusionModule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Conv2d, CostRow, Init, Mode, ParamStore, Session};
use crate::tensor::{numel, Element, Shape, Tensor, Var};

/// Input pixels per density cell along each axis.
pub const DENSITY_STRIDE: usize = 8;

/// Every intermediate of interest from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    /// Backbone maps at strides 8, 16, 32.
    pub features: [Var; 3],
    /// Branch outputs entering fusion (FTM outputs, or the raw features without FTM).
    pub branches: [Var; 3],
    pub fused: Var,
    /// Non-negative `(n, 1, h/8, w/8)` density.
    pub density: Var,
}

#[derive(Clone, Debug)]
pub struct FfNet<T: Element = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub ftms: Option<[Ftm; 3]>,
    pub fusion: FusionModule,
    pub head: Conv2d,
}

impl<T: Element> FfNet<T> {
    /// Builds the network with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let backbone = Backbone::new(&mut init, &config.backbone);
        let widths = config.branch_widths();
        let c = config.backbone.stage_channels;
        let ftms = config.ftm.enabled.then(|| {
            [0, 1, 2].map(|i| Ftm::new(&mut init, &format!("ftm{}", i + 1), c[i], widths[i], &config.ftm))
        });
        let fusion = FusionModule::new(&mut init, config.fusion, widths, config.add_width);
        let head = Conv2d::new(&mut init, "head", fusion.out_channels, 1, 1, 1, 0, true);
        if let Some(b) = head.bias {
            store.get_mut(b).data_mut().fill(T::cast(config.head_bias_init));
        }
        Ok(Self {
            config,
            store,
            backbone,
            ftms,
            fusion,
            head,
        })
    }

    pub fn session(&self, mode: Mode) -> Session<'_, T> {
        Session::new(&self.store, mode)
    }

    pub fn trace(&self, s: &mut Session<'_, T>, x: Var) -> Result<ForwardTrace> {
        let features = self.backbone.forward(s, x)?;
        let branches = match &self.ftms {
            Some(ftms) => [
                ftms[0].forward(s, features[0])?,
                ftms[1].forward(s, features[1])?,
                ftms[2].forward(s, features[2])?,
            ],
            None => features,
        };
        let fused = self.fusion.forward(s, branches)?;
        let logits = self.head.forward(s, fused)?;
        let density = s.graph.relu(logits);
        Ok(ForwardTrace {
            features,
            branches,
            fused,
            density,
        })
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(s, x)?.density)
    }

    /// Eval-mode density map of a batch of images.
    pub fn predict_density(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.check_input(images.shape())?;
        let mut s = self.session(Mode::Eval);
        let x = s.graph.input(images.clone());
        let d = self.forward(&mut s, x)?;
        Ok(s.graph.value(d).clone())
    }

    /// Per-layer cost rows for one forward pass at `input`.
    pub fn account(&self, input: Shape) -> Vec<CostRow> {
        let mut rows = Vec::new();
        let features = self.backbone.account(input, &mut rows);
        let branches = match &self.ftms {
            Some(ftms) => [0, 1, 2].map(|i| ftms[i].account(features[i], &mut rows)),
            None => features,
        };
        let fused = self.fusion.account(branches, &mut rows);
        let out = self.head.account(fused, &mut rows);
        rows.push(CostRow::new("head.relu", "elementwise", 0, numel(out) as u64));
        rows
    }

    /// Converts to another element type, keeping every value.
    pub fn cast<U: Element>(&self) -> FfNet<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.add(p.name.clone(), p.kind, p.value.cast());
        }
        FfNet {
            config: self.config.clone(),
            store,
            backbone: self.backbone.clone(),
            ftms: self.ftms.clone(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
        }
    }
}
