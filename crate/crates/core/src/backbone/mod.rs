//! Hierarchical ConvNeXt- and Swin-style feature extractors.
//!
//! Parameters live in a [`ParamStore`] under canonical layer paths (see
//! [`param_shapes`]). Both families produce four stages; the final feature map
//! is the last stage after a per-token layer norm, with spatial extent
//! `input / 32`.

pub mod archive;
pub mod config;
pub mod convnext;
pub mod swin;
pub mod window;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamStore};
use crate::tensor::{Float, Tensor};

pub use archive::{load_archive, save_archive};
pub use config::{BackboneConfig, Family, Variant};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

pub(crate) type Decl = (String, Vec<usize>, Init);

pub(crate) use crate::nn::layer_error;

fn declarations(cfg: &BackboneConfig) -> Vec<Decl> {
    let mut out = Vec::new();
    match cfg.family {
        Family::Convnext => convnext::declare(cfg, &mut out),
        Family::Swin => swin::declare(cfg, &mut out),
    }
    out
}

/// Every parameter the configuration declares, in declaration order.
pub fn param_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    declarations(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Fresh parameters for `cfg`, drawn in declaration order.
pub fn init_params<T: Float, R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape, init) in declarations(cfg) {
        let t = match init {
            Init::TruncNormal(std) => nn::trunc_normal(rng, &shape, std),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, T::one()),
            Init::Const(v) => Tensor::full(&shape, T::lit(v)),
        };
        store.insert(name, t);
    }
    Ok(store)
}

pub fn stem_weight_name(family: Family) -> &'static str {
    match family {
        Family::Convnext => "stem.conv.weight",
        Family::Swin => "patch_embed.proj.weight",
    }
}

/// Expand a 3-channel patchify weight `[p*p*3, D]` to 6 channels by copying
/// it into both halves at half scale, so equal halves reproduce the original.
pub fn adapt_stem_to_six_channels<T: Float>(w3: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = w3.shape();
    if s.len() != 2 || s[0] != patch * patch * 3 {
        return Err(Error::Shape(format!(
            "stem weight {s:?} is not a 3-channel {patch}x{patch} patchify weight"
        )));
    }
    let d = s[1];
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(patch * patch * 6 * d);
    for cell in 0..patch * patch {
        for c in 0..6 {
            let row = &w3.data()[(cell * 3 + c % 3) * d..][..d];
            out.extend(row.iter().map(|&v| v * half));
        }
    }
    Tensor::from_vec(&[patch * patch * 6, d], out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// Archive entries no declared parameter used.
    pub unused: Vec<String>,
    /// Whether a 3-channel stem was widened to 6 channels.
    pub adapted_stem: bool,
}

/// Match archive tensors to the parameters `cfg` declares.
pub fn bind_weights<T: Float>(archive: &ParamStore<T>, cfg: &BackboneConfig) -> Result<(ParamStore<T>, LoadReport)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut report = LoadReport::default();
    let stem = stem_weight_name(cfg.family);
    for (name, shape) in param_shapes(cfg) {
        let t = archive.tensor(&name)?;
        if t.shape() == shape.as_slice() {
            store.insert(name, t.clone());
        } else if name == stem && cfg.input_channels == 6 && t.shape() == [shape[0] / 2, shape[1]] {
            store.insert(name, adapt_stem_to_six_channels(t, cfg.patch_size)?);
            report.adapted_stem = true;
        } else {
            return Err(Error::WeightShape {
                path: name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
    }
    report.unused = archive.names().filter(|n| !store.contains(n)).map(String::from).collect();
    Ok((store, report))
}

pub fn load_weights<T: Float>(dir: impl AsRef<Path>, cfg: &BackboneConfig) -> Result<(ParamStore<T>, LoadReport)> {
    let archive = load_archive(dir.as_ref())?;
    let (store, report) = bind_weights(&archive, cfg)?;
    for name in &report.unused {
        log::warn!("{}: unused archive entry `{name}`", dir.as_ref().display());
    }
    Ok((store, report))
}

/// Mark every parameter in `store` (a backbone-only store) as frozen.
pub fn freeze<T: Float>(store: &mut ParamStore<T>) {
    store.set_frozen("", true);
}

pub struct BackboneOutput {
    /// Raw output of each stage, NHWC.
    pub stages: [Var; 4],
    /// Final stage after layer norm, NHWC.
    pub features: Var,
}

/// Run the backbone whose parameters sit under `prefix` in the binder's store.
pub fn forward<T: Float>(
    cfg: &BackboneConfig,
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<BackboneOutput> {
    let [_, h, w, c] = window::dims4(g.shape(x))?;
    if c != cfg.input_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, backbone expects {}",
            cfg.input_channels
        )));
    }
    let r = cfg.reduction();
    if h % r != 0 || w % r != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}x{w} is not divisible by {r}")));
    }
    let stages = match cfg.family {
        Family::Convnext => convnext::forward(cfg, g, b, prefix, x)?,
        Family::Swin => swin::forward(cfg, g, b, prefix, x)?,
    };
    let features = nn::layer_norm(g, b, &format!("{prefix}norm"), stages[3])?;
    Ok(BackboneOutput { stages, features })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLayout {
    /// `[height, width, channels]` per sample.
    Spatial,
    /// `[tokens, channels]` per sample.
    Tokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub layout: FeatureLayout,
    /// Batched values: `[B, H, W, C]` (spatial) or `[B, N, C]` (tokens).
    pub values: Tensor<T>,
    pub source_stage: usize,
}

/// Inference-only feature extraction for a batch of NHWC images.
pub fn extract_features<T: Float>(
    cfg: &BackboneConfig,
    store: &ParamStore<T>,
    images: &Tensor<T>,
) -> Result<FeatureMap<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let x = g.constant(images.clone());
    let out = forward(cfg, &mut g, &mut b, "", x)?;
    let v = g.value(out.features).clone();
    Ok(match cfg.family {
        Family::Convnext => FeatureMap {
            layout: FeatureLayout::Spatial,
            values: v,
            source_stage: 4,
        },
        Family::Swin => {
            let s = v.shape().to_vec();
            FeatureMap {
                layout: FeatureLayout::Tokens,
                values: v.reshape(&[s[0], s[1] * s[2], s[3]])?,
                source_stage: 4,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn mini_shapes() {
        for fam in [Family::Convnext, Family::Swin] {
            let cfg = BackboneConfig::mini(fam);
            let store = init_params::<f32, _>(&cfg, &mut rng()).unwrap();
            let f = extract_features(&cfg, &store, &random_input(&[2, 64, 64, 3], 1)).unwrap();
            match fam {
                Family::Convnext => assert_eq!(f.values.shape(), [2, 2, 2, 128]),
                Family::Swin => assert_eq!(f.values.shape(), [2, 4, 128]),
            }
        }
    }

    #[test]
    fn tiny_convnext_declares_expected_final_width() {
        let cfg = BackboneConfig::new(Family::Convnext, Variant::Tiny);
        let shapes = param_shapes(&cfg);
        assert!(shapes.iter().any(|(n, s)| n == "norm.weight" && s == &[768]));
        assert_eq!(shapes[0].1, vec![48, 96]);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_features() {
        let cfg = BackboneConfig::mini(Family::Convnext);
        let store = init_params::<f32, _>(&cfg, &mut rng()).unwrap();
        let f = extract_features(&cfg, &store, &Tensor::zeros(&[1, 32, 32, 3])).unwrap();
        assert!(f.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_input_geometry_is_rejected() {
        let cfg = BackboneConfig::mini(Family::Convnext);
        let store = init_params::<f32, _>(&cfg, &mut rng()).unwrap();
        assert!(extract_features(&cfg, &store, &Tensor::zeros(&[1, 48, 64, 3])).is_err());
        assert!(extract_features(&cfg, &store, &Tensor::zeros(&[1, 64, 64, 6])).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let cfg = BackboneConfig::mini(Family::Swin);
        let store = init_params::<f32, _>(&cfg, &mut rng()).unwrap();
        let x = random_input(&[1, 64, 64, 3], 4);
        assert_eq!(extract_features(&cfg, &store, &x).unwrap(), extract_features(&cfg, &store, &x).unwrap());
    }

    #[test]
    fn weight_binding_reports_missing_shape_and_unused() {
        let cfg = BackboneConfig::mini(Family::Convnext);
        let full = init_params::<f32, _>(&cfg, &mut rng()).unwrap();
        let (bound, report) = bind_weights(&full, &cfg).unwrap();
        assert_eq!(bound, full);
        assert!(report.unused.is_empty());

        let mut missing = ParamStore::new();
        for (n, p) in full.iter().filter(|(n, _)| *n != "norm.weight") {
            missing.insert(n, p.value.clone());
        }
        let err = bind_weights(&missing, &cfg).unwrap_err();
        assert!(err.to_string().contains("norm.weight"), "{err}");

        let mut wrong = full.clone();
        wrong.get_mut("stem.norm.bias").unwrap().value = Tensor::zeros(&[3]);
        wrong.insert("extra.thing", Tensor::zeros(&[1]));
        let err = bind_weights(&wrong, &cfg).unwrap_err();
        assert!(matches!(err, Error::WeightShape { ref path, .. } if path == "stem.norm.bias"));

        let mut extra = full.clone();
        extra.insert("extra.thing", Tensor::zeros(&[1]));
        assert_eq!(bind_weights(&extra, &cfg).unwrap().1.unused, ["extra.thing"]);
    }

    #[test]
    fn six_channel_stem_from_three_channel_archive() {
        let cfg3 = BackboneConfig::mini(Family::Convnext);
        let full = init_params::<f64, _>(&cfg3, &mut rng()).unwrap();
        let cfg6 = cfg3.clone().with_input_channels(6);
        let (bound, report) = bind_weights(&full, &cfg6).unwrap();
        assert!(report.adapted_stem);
        assert_eq!(bound.tensor("stem.conv.weight").unwrap().shape(), [96, 16]);
        for (n, p) in full.iter().filter(|(n, _)| *n != "stem.conv.weight") {
            assert_eq!(&bound.tensor(n).unwrap().clone(), &p.value);
        }
    }

    #[test]
    fn archive_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackboneConfig::mini(Family::Swin);
        let full = init_params::<f32, _>(&cfg, &mut rng()).unwrap();
        save_archive(dir.path(), &full).unwrap();
        let (loaded, report) = load_weights::<f32>(dir.path(), &cfg).unwrap();
        assert_eq!(loaded, full);
        assert!(report.unused.is_empty());
    }
}
