use std::fs;

use fflab::data::{
    augment, crop, decode_pnm, encode_pnm, flip, generate_dataset, generate_scene, rasterize, read_dataset,
    sample_points, write_dataset, Annotation, Image, RasterMode, SceneConfig,
};
use fflab::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        width: 96,
        height: 64,
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn no_parents_means_pure_background() {
    let cfg = SceneConfig {
        parents: 0.0,
        noise_std: 0.0,
        ..small_scene(3)
    };
    let (img, ann) = generate_scene(&cfg).unwrap();
    assert_eq!(ann.count(), 0);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let t = 0.5 * ((x as f64 + 0.5) / 96.0 + (y as f64 + 0.5) / 64.0);
            let want = ((cfg.background + cfg.gradient * t) * 255.0).round() as u8;
            assert_eq!(img.get(0, y, x), want);
        }
    }
}

#[test]
fn same_seed_same_scene() {
    let (a, pa) = generate_scene(&small_scene(42)).unwrap();
    let (b, pb) = generate_scene(&small_scene(42)).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(pa.points, pb.points);
    let (c, _) = generate_scene(&small_scene(43)).unwrap();
    assert_ne!(a.data, c.data);
}

#[test]
fn mean_count_matches_cluster_intensity() {
    let cfg = SceneConfig {
        parents: 4.0,
        offspring_mean: 6.0,
        ..small_scene(0)
    };
    let counts: Vec<f64> = (0..200)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.for_index(i).seed);
            sample_points(&cfg, &mut r).len() as f64
        })
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!((mean - 24.0).abs() < 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn generated_points_lie_inside_the_frame() {
    let cfg = SceneConfig {
        spread: 80.0,
        ..small_scene(9)
    };
    let (_, ann) = generate_scene(&cfg).unwrap();
    assert!(ann.count() > 0);
    ann.check().unwrap();
}

#[test]
fn zero_size_scene_is_rejected() {
    let cfg = SceneConfig {
        width: 0,
        ..SceneConfig::default()
    };
    assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
}

#[test]
fn three_channel_scene_replicates_gray() {
    let cfg = SceneConfig {
        channels: 3,
        ..small_scene(5)
    };
    let (img, _) = generate_scene(&cfg).unwrap();
    let plane = 96 * 64;
    assert_eq!(&img.data[..plane], &img.data[plane..2 * plane]);
    let t: Tensor = img.to_tensor();
    assert_eq!(t.shape(), [1, 3, 64, 96]);
}

// ------------------------------------------------------------------------ rasterize

fn ann(points: &[[f64; 2]], w: usize, h: usize) -> Annotation {
    Annotation::new(w, h, points.to_vec()).unwrap()
}

#[test]
fn rasterize_origin_and_collisions() {
    let z: Tensor = rasterize(&ann(&[[0.0, 0.0]], 32, 32), 8, RasterMode::Additive).unwrap();
    assert_eq!(z.shape(), [1, 1, 4, 4]);
    assert_eq!(z.get([0, 0, 0, 0]), 1.0);
    assert_eq!(z.sum(), 1.0);
    let two = ann(&[[9.0, 17.5], [15.9, 23.9]], 32, 32);
    let z: Tensor = rasterize(&two, 8, RasterMode::Additive).unwrap();
    assert_eq!(z.get([0, 0, 2, 1]), 2.0);
    let z: Tensor = rasterize(&two, 8, RasterMode::Clamped).unwrap();
    assert_eq!(z.get([0, 0, 2, 1]), 1.0);
}

#[test]
fn out_of_bounds_points_are_named() {
    let bad = Annotation {
        width: 16,
        height: 16,
        points: vec![[1.0, 1.0], [16.0, 3.0]],
    };
    match rasterize::<f64>(&bad, 8, RasterMode::Additive) {
        Err(Error::PointOutOfBounds { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected out-of-bounds, got {other:?}"),
    }
    assert!(Annotation::new(16, 16, vec![[-0.1, 0.0]]).is_err());
}

proptest! {
    #[test]
    fn rasterized_mass_equals_count(seed in 0u64..5000, n in 0usize..200) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [r.random::<f64>() * 64.0, r.random::<f64>() * 40.0]).collect();
        let z: Tensor = rasterize(&ann(&pts, 64, 40), 8, RasterMode::Additive).unwrap();
        prop_assert_eq!(z.sum(), n as f64);
        // independent recount per cell
        for (i, &v) in z.data().iter().enumerate() {
            let (cy, cx) = (i / 8, i % 8);
            let here = pts.iter().filter(|p| (p[0] / 8.0).floor() as usize == cx && (p[1] / 8.0).floor() as usize == cy).count();
            prop_assert_eq!(v, here as f64);
        }
    }

    #[test]
    fn crop_keeps_exactly_the_points_in_the_window(seed in 0u64..5000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (img, a) = generate_scene(&SceneConfig { width: 160, height: 128, seed, ..SceneConfig::default() }).unwrap();
        let x0 = r.random_range(0..=96);
        let y0 = r.random_range(0..=64);
        let (c, ca) = crop(&img, &a, x0, y0, 64).unwrap();
        let inside = a.points.iter().filter(|p| {
            p[0] >= x0 as f64 && p[0] < (x0 + 64) as f64 && p[1] >= y0 as f64 && p[1] < (y0 + 64) as f64
        }).count();
        prop_assert_eq!(ca.count(), inside);
        prop_assert_eq!(c.get(0, 5, 7), img.get(0, y0 + 5, x0 + 7));
        let z: Tensor = rasterize(&ca, 8, RasterMode::Additive).unwrap();
        prop_assert_eq!(z.sum(), inside as f64);
    }
}

// ------------------------------------------------------------------------- augment

#[test]
fn double_flip_is_identity() {
    let (img, a) = generate_scene(&small_scene(11)).unwrap();
    let (f1, a1) = flip(&img, &a);
    let (f2, a2) = flip(&f1, &a1);
    assert_eq!(f2, img);
    for (p, q) in a2.points.iter().zip(&a.points) {
        assert!((p[0] - q[0]).abs() < 1e-9 && p[1] == q[1]);
    }
    // the flipped point lands in the mirrored pixel column
    let (px, qx) = (a.points[0][0], a1.points[0][0]);
    assert_eq!(px.floor() as usize, 96 - 1 - qx.floor() as usize);
}

#[test]
fn full_crop_without_flip_is_identity() {
    let cfg = SceneConfig {
        width: 64,
        height: 64,
        seed: 2,
        ..SceneConfig::default()
    };
    let (img, a) = generate_scene(&cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (i2, a2) = augment(&img, &a, 64, 0.0, &mut r).unwrap();
    assert_eq!(i2, img);
    assert_eq!(a2, a);
}

#[test]
fn augment_rejects_bad_crops() {
    let (img, a) = generate_scene(&small_scene(1)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(augment(&img, &a, 48, 0.5, &mut r).is_err());
    assert!(augment(&img, &a, 128, 0.5, &mut r).is_err());
}

#[test]
fn forced_flip_mirrors_pixels() {
    let (img, a) = generate_scene(&small_scene(4)).unwrap();
    let img = img.crop(0, 0, 64, 64);
    let a = Annotation::new(64, 64, a.points.into_iter().filter(|p| p[0] < 64.0 && p[1] < 64.0).collect()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (f, fa) = augment(&img, &a, 64, 1.0, &mut r).unwrap();
    assert_eq!(f.get(0, 3, 0), img.get(0, 3, 63));
    assert_eq!(fa.count(), a.count());
}

// ---------------------------------------------------------------------------- io

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_scene(7), 3).unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(manifest.entries.len(), fs::read_dir(dir.path().join("images")).unwrap().count());
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.scene, ds.scene);
    for (x, y) in back.samples.iter().zip(&ds.samples) {
        assert_eq!(x.image.data, y.image.data);
        assert_eq!(x.name, y.name);
        assert_eq!(x.annotation.count(), y.annotation.count());
        for (p, q) in x.annotation.points.iter().zip(&y.annotation.points) {
            assert!((p[0] - q[0]).abs() <= 1e-6 && (p[1] - q[1]).abs() <= 1e-6);
        }
    }
    let csv = fs::read_to_string(dir.path().join("annotations/scene_0000.csv")).unwrap();
    assert!(csv.starts_with("x,y\n"));
    if let Some(line) = csv.lines().nth(1) {
        assert_eq!(line.split(',').next().unwrap().split('.').nth(1).unwrap().len(), 6);
    }
}

#[test]
fn generated_datasets_are_reproducible() {
    let a = generate_dataset(&small_scene(1), 4).unwrap();
    let b = generate_dataset(&small_scene(1), 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupted_magic_reports_position() {
    let img = Image::new(4, 2, 1, vec![7; 8]).unwrap();
    let mut bytes = encode_pnm(&img).unwrap();
    assert_eq!(decode_pnm(&bytes).unwrap(), img);
    bytes[1] = b'2';
    match decode_pnm(&bytes) {
        Err(Error::Format { position, .. }) => assert_eq!(position, 1),
        other => panic!("expected format error, got {other:?}"),
    }
    bytes[0] = b'X';
    assert!(matches!(decode_pnm(&bytes), Err(Error::Format { position: 0, .. })));
}

#[test]
fn truncated_raster_is_rejected() {
    let img = Image::new(4, 2, 1, vec![7; 8]).unwrap();
    let bytes = encode_pnm(&img).unwrap();
    let err = decode_pnm(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("header promises 8"), "{err}");
}

#[test]
fn color_images_round_trip() {
    let img = Image::new(3, 2, 3, (0..18).collect()).unwrap();
    let bytes = encode_pnm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    assert_eq!(decode_pnm(&bytes).unwrap(), img);
}

#[test]
fn manifest_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_scene(8), 2).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let path = dir.path().join("annotations/scene_0001.csv");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("{text}1.000000,1.000000\n")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest says"), "{err}");
}

#[test]
fn corrupted_image_on_disk_names_file_and_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_scene(8), 1).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let path = dir.path().join("images/scene_0000.pgm");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'Q';
    fs::write(&path, bytes).unwrap();
    let msg = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("scene_0000.pgm") && msg.contains("byte 0"), "{msg}");
}
