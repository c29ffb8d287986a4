use proptest::prelude::*;
use svdamage::backbone::{BackboneConfig, Family};
use svdamage::data::{preprocess, SyntheticDatasetSpec, TransformConfig};
use svdamage::fusion::{DualModel, ModelSpec};
use svdamage::gradcam::*;
use svdamage::Tensor;

fn images(seed: u64) -> (svdamage::data::SyntheticPair, Tensor<f32>, Tensor<f32>) {
    let (_, p) = SyntheticDatasetSpec::default().generate(seed, 0).unwrap();
    let t = TransformConfig {
        target_size: 64,
        ..Default::default()
    };
    let (a, b) = (preprocess(&p.pre, &t).unwrap(), preprocess(&p.post, &t).unwrap());
    (p, a, b)
}

fn check_invariants(h: &Heatmap) {
    assert!(h.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let max = h.values.iter().copied().fold(0.0f32, f32::max);
    assert!(max == 0.0 || max == 1.0, "max {max}");
}

#[test]
fn every_model_yields_a_valid_heatmap_at_its_default_layer() {
    let (_, pre, post) = images(3);
    for model in DualModel::ALL {
        let spec = ModelSpec::dual(model, BackboneConfig::mini(model.family()), 3);
        let mut store = spec.init_params::<f32>(1).unwrap();
        spec.freeze_backbones(&mut store);
        let h = grad_cam(&spec, &store, Some(&pre), &post, &HeatmapConfig::default()).unwrap();
        assert_eq!(h.layer, spec.default_target());
        assert_eq!((h.height, h.width), (2, 2));
        check_invariants(&h);
        assert!(h.values.iter().any(|&v| v > 0.0), "{model}: frozen model produced an empty map");
        let again = grad_cam(&spec, &store, Some(&pre), &post, &HeatmapConfig::default()).unwrap();
        assert_eq!(h, again);
    }
}

#[test]
fn swin_tokens_map_to_their_grid_and_layers_are_selectable() {
    let (_, _, post) = images(4);
    let spec = ModelSpec::single(BackboneConfig::mini(Family::Swin), 3);
    let store = spec.init_params::<f32>(2).unwrap();
    for (layer, side) in [("main.stage1", 16), ("main.stage2", 8), ("main.stage3", 4), ("main.features", 2)] {
        let cfg = HeatmapConfig {
            target_layer: Some(layer.into()),
            target_class: TargetClass::Index(1),
            ..Default::default()
        };
        let h = grad_cam(&spec, &store, None, &post, &cfg).unwrap();
        assert_eq!((h.height, h.width, h.class), (side, side, 1));
        check_invariants(&h);
    }
    let missing = HeatmapConfig {
        target_layer: Some("main.stage9".into()),
        ..Default::default()
    };
    assert!(grad_cam(&spec, &store, None, &post, &missing).is_err());
    let bad_class = HeatmapConfig {
        target_class: TargetClass::Index(5),
        ..Default::default()
    };
    assert!(grad_cam(&spec, &store, None, &post, &bad_class).is_err());
}

#[test]
fn export_writes_named_triptych_and_grid() {
    let (pair, pre, post) = images(5);
    let spec = ModelSpec::dual(DualModel::S3FusionConvnext, BackboneConfig::mini(Family::Convnext), 3);
    let store = spec.init_params::<f32>(0).unwrap();
    let cfg = HeatmapConfig::default();
    let h = grad_cam(&spec, &store, Some(&pre), &post, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = export_stem("synth-00000", "s3_fusion_convnext", "severe");
    let (png, pfm) = export(dir.path(), &stem, &pair.pre, &pair.post, &h, &cfg).unwrap();
    assert!(png.ends_with("synth-00000_s3_fusion_convnext_severe.png"));
    let img = svdamage::data::PixelImage::load(&png).unwrap();
    assert_eq!((img.height(), img.width()), (64, 192));
    let (hh, ww, v) = read_pfm(std::io::BufReader::new(std::fs::File::open(pfm).unwrap())).unwrap();
    assert_eq!((hh, ww), (h.height, h.width));
    assert_eq!(v, h.values);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn heatmaps_are_normalized_and_scale_invariant(
        act in prop::collection::vec(-3.0f64..3.0, 27),
        grad in prop::collection::vec(-3.0f64..3.0, 27),
        k in 1e-3f64..1e3,
    ) {
        let a = Tensor::from_vec(&[3, 3, 3], act).unwrap();
        let g = Tensor::from_vec(&[3, 3, 3], grad).unwrap();
        let base = cam_from(&a, &g).unwrap();
        prop_assert!(base.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = base.iter().copied().fold(0.0f32, f32::max);
        prop_assert!(max == 0.0 || max == 1.0);
        let scaled = cam_from(&a, &g.map(|v| v * k)).unwrap();
        for (x, y) in base.iter().zip(&scaled) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn overlay_keeps_dimensions(h in 1usize..6, w in 1usize..6, ih in 1usize..20, iw in 1usize..20, alpha in 0.0f32..=1.0) {
        let hm = Heatmap { height: h, width: w, values: (0..h * w).map(|i| i as f32 / (h * w) as f32).collect(), layer: "x".into(), class: 0 };
        let img = svdamage::data::PixelImage::filled(ih, iw, [0.3, 0.5, 0.7]);
        let cfg = HeatmapConfig { alpha, ..Default::default() };
        let o = overlay(&hm, &img, &cfg).unwrap();
        prop_assert_eq!((o.height(), o.width()), (ih, iw));
        prop_assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
