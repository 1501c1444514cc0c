use fflab::layers::{Init, Mode, ParamKind, ParamStore, Session};
use fflab::model::{FfNet, Ftm, FtmConfig, Fusion, ModelConfig};
use fflab::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{check_params, micro, param_total, perturb_norms, probe};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn toy_model_shapes() {
    let m = FfNet::<f64>::new(ModelConfig::toy()).unwrap();
    for size in [256, 512] {
        let x = Tensor::uniform([1, 1, size, size], 0.0, 1.0, &mut rng(1));
        let mut s = m.session(Mode::Eval);
        let v = s.graph.input(x);
        let t = m.trace(&mut s, v).unwrap();
        let f = t.features.map(|v| s.graph.shape(v));
        assert_eq!(f, [
            [1, 8, size / 8, size / 8],
            [1, 16, size / 16, size / 16],
            [1, 32, size / 32, size / 32]
        ]);
        let b = t.branches.map(|v| s.graph.shape(v));
        assert_eq!(b.map(|s| s[1]), [8, 8, 8]);
        assert_eq!(s.graph.shape(t.fused), [1, 24, size / 8, size / 8]);
        assert_eq!(s.graph.shape(t.density), [1, 1, size / 8, size / 8]);
    }
}

#[test]
fn inputs_must_be_multiples_of_32() {
    let m = FfNet::<f64>::new(ModelConfig::toy()).unwrap();
    for shape in [[1, 1, 48, 64], [1, 3, 64, 64], [1, 1, 0, 32]] {
        assert!(matches!(m.predict_density(&Tensor::zeros(shape)), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn ftm_reduces_192_channels_to_96() {
    let cfg = FtmConfig::default();
    assert_eq!(cfg.out_width(0, 192), 96);
    assert_eq!(cfg.out_width(2, 768), 96);
    assert_eq!(cfg.out_width(0, 16), 8);
    let mut store = ParamStore::<f32>::new();
    let ftm = Ftm::new(&mut Init { store: &mut store, rng: &mut rng(2) }, "ftm", 192, 96, &cfg);
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.graph.input(Tensor::uniform([1, 192, 32, 32], -1.0, 1.0, &mut rng(3)));
    let y = ftm.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(y), [1, 96, 32, 32]);
}

#[test]
fn ftm_zero_input_gives_zero_output() {
    let mut store = ParamStore::<f64>::new();
    let ftm = Ftm::new(&mut Init { store: &mut store, rng: &mut rng(4) }, "ftm", 16, 8, &FtmConfig::default());
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.graph.input(Tensor::zeros([2, 16, 8, 8]));
    let y = ftm.forward(&mut s, x).unwrap();
    assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn ftm_rejects_wrong_width() {
    let mut store = ParamStore::<f64>::new();
    let ftm = Ftm::new(&mut Init { store: &mut store, rng: &mut rng(4) }, "ftm", 16, 8, &FtmConfig::default());
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.graph.input(Tensor::zeros([1, 8, 8, 8]));
    assert!(ftm.forward(&mut s, x).is_err());
}

/// Runs one sub-module on a concrete tensor in its own eval session.
fn apply(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Session<'_>, fflab::Var) -> fflab::Result<fflab::Var>) -> Tensor {
    let mut s = Session::new(store, Mode::Eval);
    let v = s.graph.input(x.clone());
    let y = f(&mut s, v).unwrap();
    s.graph.value(y).clone()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn ftm_matches_stage_by_stage_composition() {
    for outer_double in [true, false] {
        let cfg = FtmConfig {
            outer_double,
            ..FtmConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let ftm = Ftm::new(&mut Init { store: &mut store, rng: &mut rng(5) }, "ftm", 8, 4, &cfg);
        perturb_norms(&mut store, 6);
        let x = Tensor::uniform([2, 8, 6, 6], -1.0, 1.0, &mut rng(7));

        // C = CA(S); A = Y1(C) + C; B = Y2(A) + A; P = Y(B) or Y(Y(B)); out = SA(P)
        let c = apply(&store, &x, |s, v| ftm.channel.forward(s, v));
        let a = add(&apply(&store, &c, |s, v| ftm.residual[0].forward(s, v)), &c);
        let b = add(&apply(&store, &a, |s, v| ftm.residual[1].forward(s, v)), &a);
        let mut p = apply(&store, &b, |s, v| ftm.outer[0].forward(s, v));
        if outer_double {
            p = apply(&store, &p, |s, v| ftm.outer[1].forward(s, v));
        }
        let out = apply(&store, &p, |s, v| ftm.spatial.forward(s, v));

        let mut s = Session::new(&store, Mode::Eval);
        let v = s.graph.input(x.clone());
        let t = ftm.trace(&mut s, v).unwrap();
        assert_eq!(ftm.outer.len(), if outer_double { 2 } else { 1 });
        for (oracle, var) in [(&c, t.channel), (&a, t.a), (&b, t.b), (&p, t.p), (&out, t.out)] {
            assert!(max_diff(oracle, s.graph.value(var)) < 1e-12);
        }
    }
}

#[test]
fn concat_fusion_matches_composition() {
    let m = FfNet::<f64>::new(micro(Fusion::Concat)).unwrap();
    let x = Tensor::uniform([1, 1, 64, 64], 0.0, 1.0, &mut rng(8));
    let mut s = m.session(Mode::Eval);
    let v = s.graph.input(x);
    let t = m.trace(&mut s, v).unwrap();
    let b = t.branches.map(|v| s.graph.value(v).clone());
    let fused = s.graph.value(t.fused).clone();
    // the first channels of the concatenation are branch 1 itself
    let [_, c1, h, w] = b[0].shape();
    assert_eq!(fused.shape(), [1, 2 + 2 + 2, h, w]);
    for c in 0..c1 {
        for i in 0..h {
            for j in 0..w {
                assert_eq!(fused.get([0, c, i, j]), b[0].get([0, c, i, j]));
            }
        }
    }
    // head = relu(1x1 conv of fused)
    let wt = m.store.get(m.store.find("head.weight").unwrap());
    let bias = m.store.get(m.store.find("head.bias").unwrap()).data()[0];
    let d = s.graph.value(t.density);
    for i in 0..h {
        for j in 0..w {
            let z: f64 = (0..6).map(|c| wt.get([0, c, 0, 0]) * fused.get([0, c, i, j])).sum::<f64>() + bias;
            assert!((d.get([0, 0, i, j]) - z.max(0.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_head_gives_zero_map() {
    let mut m = FfNet::<f64>::new(ModelConfig::toy()).unwrap();
    for name in ["head.weight", "head.bias"] {
        let id = m.store.find(name).unwrap();
        m.store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::uniform([2, 1, 64, 64], 0.0, 1.0, &mut rng(9));
    let d = m.predict_density(&x).unwrap();
    assert_eq!(d.shape(), [2, 1, 8, 8]);
    assert_eq!(d.sum(), 0.0);
}

#[test]
fn head_bias_init_is_applied() {
    let m = FfNet::<f64>::new(ModelConfig {
        head_bias_init: 0.25,
        ..ModelConfig::toy()
    })
    .unwrap();
    assert_eq!(m.store.get(m.store.find("head.bias").unwrap()).data(), &[0.25]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn density_is_non_negative(seed in 0u64..1000, bias in -1.0f64..0.5) {
        let m = FfNet::<f64>::new(ModelConfig { seed, head_bias_init: bias, ..micro(Fusion::Concat) }).unwrap();
        let x = Tensor::uniform([1, 1, 32, 64], -1.0, 2.0, &mut rng(seed + 1));
        let d = m.predict_density(&x).unwrap();
        prop_assert!(d.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn every_fusion_keeps_the_grid(
        hb in 1usize..4,
        wb in 1usize..4,
        n in 1usize..3,
        ftm in any::<bool>(),
        seed in 0u64..100,
    ) {
        let (h, w) = (32 * hb, 32 * wb);
        let x = Tensor::uniform([n, 1, h, w], 0.0, 1.0, &mut rng(seed));
        for fusion in [Fusion::Concat, Fusion::Add, Fusion::Stepwise] {
            let mut cfg = micro(fusion);
            cfg.ftm.enabled = ftm;
            cfg.seed = seed;
            let m = FfNet::<f64>::new(cfg).unwrap();
            prop_assert_eq!(m.predict_density(&x).unwrap().shape(), [n, 1, h / 8, w / 8]);
        }
    }
}

#[test]
fn fusion_widths() {
    let widths = |fusion, add_width| {
        let m = FfNet::<f64>::new(ModelConfig {
            fusion,
            add_width,
            ..ModelConfig::toy()
        })
        .unwrap();
        m.fusion.out_channels
    };
    assert_eq!(widths(Fusion::Concat, None), 24);
    assert_eq!(widths(Fusion::Add, None), 8);
    assert_eq!(widths(Fusion::Add, Some(12)), 12);
    assert_eq!(widths(Fusion::Stepwise, None), 8);
    let no_ftm = ModelConfig {
        ftm: FtmConfig {
            enabled: false,
            ..FtmConfig::default()
        },
        ..ModelConfig::toy()
    };
    assert_eq!(no_ftm.branch_widths(), [8, 16, 32]);
    let m = FfNet::<f64>::new(no_ftm).unwrap();
    assert!(m.ftms.is_none());
    assert!(m.store.iter().all(|(_, p)| !p.name.starts_with("ftm")));
}

#[test]
fn micro_model_end_to_end_gradcheck() {
    let mut m = FfNet::<f64>::new(micro(Fusion::Concat)).unwrap();
    perturb_norms(&mut m.store, 12);
    let params = param_total(&m);
    assert!(params <= 5000, "{params} parameters");
    let ids: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .map(|(id, _)| id)
        .collect();
    let x = Tensor::uniform([1, 1, 64, 64], 0.0, 1.0, &mut rng(13));
    let report = check_params(&m.store, &ids, &[x], |s, v| {
        let d = m.forward(s, v[0])?;
        probe(&mut s.graph, d, 14)
    });
    assert!(report.passes_normwise(1e-4), "{report:?}");
}

#[test]
fn config_json_round_trip_and_validation() {
    for cfg in [ModelConfig::toy(), ModelConfig::convnext_tiny(), micro(Fusion::Stepwise)] {
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
    let minimal = r#"{"backbone": {"variant": "toy", "block": "plain", "input_channels": 1,
        "stem_channels": 4, "stage_channels": [8, 16, 32], "stage_depths": [1, 1, 1, 1]}, "fusion": "add"}"#;
    let cfg = ModelConfig::from_json(minimal).unwrap();
    assert_eq!(cfg.ftm, FtmConfig::default());
    assert_eq!(cfg.branch_widths(), [4, 8, 16]);

    let mut wide = ModelConfig::toy();
    wide.ftm.out_channels = Some([16, 8, 8]);
    assert!(matches!(FfNet::<f64>::new(wide), Err(Error::Config(_))));
    let mut even = ModelConfig::toy();
    even.ftm.dynamic.kernel_size = 2;
    assert!(even.validate().is_err());
    assert!(ModelConfig::from_json(r#"{"fusion": "concat", "bogus": 1}"#).is_err());
    assert!("sum".parse::<Fusion>().is_err());
    for f in [Fusion::Concat, Fusion::Add, Fusion::Stepwise] {
        assert_eq!(f.to_string().parse::<Fusion>().unwrap(), f);
    }
}

#[test]
fn same_seed_same_weights() {
    let a = FfNet::<f64>::new(ModelConfig::toy()).unwrap();
    let b = FfNet::<f64>::new(ModelConfig::toy()).unwrap();
    let c = FfNet::<f64>::new(ModelConfig {
        seed: 1,
        ..ModelConfig::toy()
    })
    .unwrap();
    let flat = |m: &FfNet| m.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}
