//! ConvNeXt-style backbone on NHWC tensors.
//!
//! Stem: 4x4 patchify + layer norm. Each later stage opens with layer norm +
//! 2x2 patchify. Block: depthwise kxk conv, layer norm, pointwise expansion,
//! GELU, pointwise projection, per-channel scale, residual add.

use super::{BackboneConfig, Decl, Init};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{layer_norm, linear, patchify, Binder};
use crate::tensor::Float;

pub(crate) fn declare(cfg: &BackboneConfig, out: &mut Vec<Decl>) {
    let d = cfg.stage_dims;
    let p = cfg.patch_size;
    let push = |out: &mut Vec<Decl>, name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push(out, "stem.conv.weight".into(), vec![p * p * cfg.input_channels, d[0]], Init::TruncNormal(0.02));
    push(out, "stem.conv.bias".into(), vec![d[0]], Init::Zeros);
    push(out, "stem.norm.weight".into(), vec![d[0]], Init::Ones);
    push(out, "stem.norm.bias".into(), vec![d[0]], Init::Zeros);
    for s in 0..4 {
        let c = d[s];
        if s > 0 {
            let pre = format!("stages.{s}.downsample");
            push(out, format!("{pre}.norm.weight"), vec![d[s - 1]], Init::Ones);
            push(out, format!("{pre}.norm.bias"), vec![d[s - 1]], Init::Zeros);
            push(out, format!("{pre}.conv.weight"), vec![4 * d[s - 1], c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.conv.bias"), vec![c], Init::Zeros);
        }
        for j in 0..cfg.stage_depths[s] {
            let pre = format!("stages.{s}.blocks.{j}");
            let k = cfg.kernel_size;
            push(out, format!("{pre}.conv_dw.weight"), vec![k, k, c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.conv_dw.bias"), vec![c], Init::Zeros);
            push(out, format!("{pre}.norm.weight"), vec![c], Init::Ones);
            push(out, format!("{pre}.norm.bias"), vec![c], Init::Zeros);
            push(out, format!("{pre}.mlp.fc1.weight"), vec![c, cfg.mlp_ratio * c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.mlp.fc1.bias"), vec![cfg.mlp_ratio * c], Init::Zeros);
            push(out, format!("{pre}.mlp.fc2.weight"), vec![cfg.mlp_ratio * c, c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.mlp.fc2.bias"), vec![c], Init::Zeros);
            push(out, format!("{pre}.gamma"), vec![c], Init::Const(cfg.layer_scale_init));
        }
    }
    push(out, "norm.weight".into(), vec![d[3]], Init::Ones);
    push(out, "norm.bias".into(), vec![d[3]], Init::Zeros);
}

fn block<T: Float>(cfg: &BackboneConfig, g: &mut Graph<T>, b: &mut Binder<'_, T>, pre: &str, x: Var) -> Result<Var> {
    let w = b.param(g, &format!("{pre}.conv_dw.weight"))?;
    let bias = b.param(g, &format!("{pre}.conv_dw.bias"))?;
    let y = g
        .depthwise_conv(x, w, bias, cfg.kernel_size / 2)
        .map_err(|e| super::layer_error(&format!("{pre}.conv_dw"), e))?;
    let y = layer_norm(g, b, &format!("{pre}.norm"), y)?;
    let y = linear(g, b, &format!("{pre}.mlp.fc1"), y)?;
    let y = g.gelu(y);
    let y = linear(g, b, &format!("{pre}.mlp.fc2"), y)?;
    let gamma = b.param(g, &format!("{pre}.gamma"))?;
    let y = g.mul_suffix(y, gamma).map_err(|e| super::layer_error(&format!("{pre}.gamma"), e))?;
    g.add(x, y)
}

pub(crate) fn forward<T: Float>(
    cfg: &BackboneConfig,
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<[Var; 4]> {
    let n = |s: &str| format!("{prefix}{s}");
    let mut h = patchify(g, b, &n("stem.conv"), x, cfg.patch_size)?;
    h = layer_norm(g, b, &n("stem.norm"), h)?;
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        if s > 0 {
            let pre = n(&format!("stages.{s}.downsample"));
            h = layer_norm(g, b, &format!("{pre}.norm"), h)?;
            h = patchify(g, b, &format!("{pre}.conv"), h, 2)?;
        }
        for j in 0..cfg.stage_depths[s] {
            h = block(cfg, g, b, &n(&format!("stages.{s}.blocks.{j}")), h)?;
        }
        stages.push(h);
    }
    Ok(stages.try_into().expect("four stages"))
}
