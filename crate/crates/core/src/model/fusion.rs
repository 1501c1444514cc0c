use rand::Rng;

use super::config::Fusion;
use crate::error::Result;
use crate::layers::{Conv2d, ConvTranspose2d, CostRow, Init, Session};
use crate::tensor::{numel, Element, Shape, Var};

#[derive(Clone, Debug)]
enum Plan {
    Concat {
        up2: ConvTranspose2d,
        up3: ConvTranspose2d,
    },
    Add {
        project: [Option<Conv2d>; 3],
        up2: ConvTranspose2d,
        up3: ConvTranspose2d,
    },
    Stepwise {
        match32: Conv2d,
        up32: ConvTranspose2d,
        match21: Conv2d,
        up21: ConvTranspose2d,
    },
}

/// Merges the three branch maps onto the stride-8 grid.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub strategy: Fusion,
    pub out_channels: usize,
    plan: Plan,
}

fn upsampler<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cin: usize, cout: usize, factor: usize) -> ConvTranspose2d {
    ConvTranspose2d::new(init, name, cin, cout, factor, factor, 0, true)
}

fn pointwise<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cin: usize, cout: usize) -> Conv2d {
    Conv2d::new(init, name, cin, cout, 1, 1, 0, true)
}

impl FusionModule {
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        strategy: Fusion,
        widths: [usize; 3],
        add_width: Option<usize>,
    ) -> Self {
        let [w1, w2, w3] = widths;
        let (plan, out_channels) = match strategy {
            Fusion::Concat => (
                Plan::Concat {
                    up2: upsampler(init, "fusion.up2", w2, w2, 2),
                    up3: upsampler(init, "fusion.up3", w3, w3, 4),
                },
                w1 + w2 + w3,
            ),
            Fusion::Add => {
                let common = add_width.unwrap_or(w1);
                let project = [0, 1, 2].map(|i| {
                    (widths[i] != common)
                        .then(|| pointwise(init, &format!("fusion.project{}", i + 1), widths[i], common))
                });
                (
                    Plan::Add {
                        project,
                        up2: upsampler(init, "fusion.up2", common, common, 2),
                        up3: upsampler(init, "fusion.up3", common, common, 4),
                    },
                    common,
                )
            }
            Fusion::Stepwise => (
                Plan::Stepwise {
                    match32: pointwise(init, "fusion.match32", w3, w2),
                    up32: upsampler(init, "fusion.up32", w2, w2, 2),
                    match21: pointwise(init, "fusion.match21", w2, w1),
                    up21: upsampler(init, "fusion.up21", w1, w1, 2),
                },
                w1,
            ),
        };
        Self {
            strategy,
            out_channels,
            plan,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, b: [Var; 3]) -> Result<Var> {
        match &self.plan {
            Plan::Concat { up2, up3 } => {
                let u2 = up2.forward(s, b[1])?;
                let u3 = up3.forward(s, b[2])?;
                s.graph.concat_channels(&[b[0], u2, u3])
            }
            Plan::Add { project, up2, up3 } => {
                let mut p = b;
                for (v, conv) in p.iter_mut().zip(project) {
                    if let Some(conv) = conv {
                        *v = conv.forward(s, *v)?;
                    }
                }
                let u2 = up2.forward(s, p[1])?;
                let u3 = up3.forward(s, p[2])?;
                let sum = s.graph.add(p[0], u2)?;
                s.graph.add(sum, u3)
            }
            Plan::Stepwise {
                match32,
                up32,
                match21,
                up21,
            } => {
                let t = match32.forward(s, b[2])?;
                let t = up32.forward(s, t)?;
                let t = s.graph.add(t, b[1])?;
                let t = match21.forward(s, t)?;
                let t = up21.forward(s, t)?;
                s.graph.add(t, b[0])
            }
        }
    }

    pub fn account(&self, b: [Shape; 3], rows: &mut Vec<CostRow>) -> Shape {
        let add = |name: &str, shape: Shape, rows: &mut Vec<CostRow>| {
            rows.push(CostRow::new(name, "elementwise", 0, numel(shape) as u64));
        };
        match &self.plan {
            Plan::Concat { up2, up3 } => {
                up2.account(b[1], rows);
                up3.account(b[2], rows);
                [b[0][0], self.out_channels, b[0][2], b[0][3]]
            }
            Plan::Add { project, up2, up3 } => {
                let mut p = b;
                for (shape, conv) in p.iter_mut().zip(project) {
                    if let Some(conv) = conv {
                        *shape = conv.account(*shape, rows);
                    }
                }
                let out = up2.account(p[1], rows);
                up3.account(p[2], rows);
                add("fusion.add", out, rows);
                add("fusion.add", out, rows);
                out
            }
            Plan::Stepwise {
                match32,
                up32,
                match21,
                up21,
            } => {
                let t = match32.account(b[2], rows);
                let t = up32.account(t, rows);
                add("fusion.add32", t, rows);
                let t = match21.account(t, rows);
                let t = up21.account(t, rows);
                add("fusion.add21", t, rows);
                t
            }
        }
    }
}
