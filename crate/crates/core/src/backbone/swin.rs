//! Swin-style backbone with (shifted) window attention on NHWC tensors.
//!
//! Grids that are not a multiple of the window are zero-padded at the
//! bottom/right inside each block. When a stage's grid is no larger than the
//! window, the window shrinks to the grid and the shift is dropped.

use super::window::{partition_var, relative_position_index, reverse_var, shift_mask};
use super::{BackboneConfig, Decl, Init};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{layer_norm, linear, patchify, space_to_depth, Binder};
use crate::tensor::Float;

pub(crate) fn declare(cfg: &BackboneConfig, out: &mut Vec<Decl>) {
    let d = cfg.stage_dims;
    let p = cfg.patch_size;
    let w = cfg.window_size;
    let push = |out: &mut Vec<Decl>, name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push(out, "patch_embed.proj.weight".into(), vec![p * p * cfg.input_channels, d[0]], Init::TruncNormal(0.02));
    push(out, "patch_embed.proj.bias".into(), vec![d[0]], Init::Zeros);
    push(out, "patch_embed.norm.weight".into(), vec![d[0]], Init::Ones);
    push(out, "patch_embed.norm.bias".into(), vec![d[0]], Init::Zeros);
    for s in 0..4 {
        let c = d[s];
        if s > 0 {
            let pre = format!("layers.{s}.downsample");
            push(out, format!("{pre}.norm.weight"), vec![4 * d[s - 1]], Init::Ones);
            push(out, format!("{pre}.norm.bias"), vec![4 * d[s - 1]], Init::Zeros);
            push(out, format!("{pre}.reduction.weight"), vec![4 * d[s - 1], c], Init::TruncNormal(0.02));
        }
        for j in 0..cfg.stage_depths[s] {
            let pre = format!("layers.{s}.blocks.{j}");
            let hidden = cfg.mlp_ratio * c;
            push(out, format!("{pre}.norm1.weight"), vec![c], Init::Ones);
            push(out, format!("{pre}.norm1.bias"), vec![c], Init::Zeros);
            push(out, format!("{pre}.attn.qkv.weight"), vec![c, 3 * c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.attn.qkv.bias"), vec![3 * c], Init::Zeros);
            push(
                out,
                format!("{pre}.attn.relative_position_bias_table"),
                vec![(2 * w - 1) * (2 * w - 1), cfg.heads[s]],
                Init::TruncNormal(0.02),
            );
            push(out, format!("{pre}.attn.proj.weight"), vec![c, c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.attn.proj.bias"), vec![c], Init::Zeros);
            push(out, format!("{pre}.norm2.weight"), vec![c], Init::Ones);
            push(out, format!("{pre}.norm2.bias"), vec![c], Init::Zeros);
            push(out, format!("{pre}.mlp.fc1.weight"), vec![c, hidden], Init::TruncNormal(0.02));
            push(out, format!("{pre}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
            push(out, format!("{pre}.mlp.fc2.weight"), vec![hidden, c], Init::TruncNormal(0.02));
            push(out, format!("{pre}.mlp.fc2.bias"), vec![c], Init::Zeros);
        }
    }
    push(out, "norm.weight".into(), vec![d[3]], Init::Ones);
    push(out, "norm.bias".into(), vec![d[3]], Init::Zeros);
}

/// Effective `(window, shift)` for an `h x w` grid.
pub fn window_geometry(window: usize, h: usize, w: usize, shifted: bool) -> (usize, usize) {
    let m = h.min(w);
    if m <= window {
        (m, 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// One (shifted) window attention block with its MLP.
pub fn block<T: Float>(
    cfg: &BackboneConfig,
    stage: usize,
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    pre: &str,
    x: Var,
    shifted: bool,
) -> Result<Var> {
    let [bs, h, w, c] = super::window::dims4(g.shape(x))?;
    let heads = cfg.heads[stage];
    let hd = c / heads;
    let (win, shift) = window_geometry(cfg.window_size, h, w, shifted);
    let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let n = win * win;

    let y = layer_norm(g, b, &format!("{pre}.norm1"), x)?;
    let mut y = if (hp, wp) != (h, w) { g.pad_hw(y, hp, wp)? } else { y };
    if shift > 0 {
        y = g.roll(y, -(shift as isize), -(shift as isize))?;
    }
    let windows = partition_var(g, y, win)?;
    let nw_total = g.shape(windows)[0];
    let nw = nw_total / bs;

    let qkv = linear(g, b, &format!("{pre}.attn.qkv"), windows)?;
    let qkv = g.reshape(qkv, &[nw_total, n, 3, heads, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3 * nw_total * heads, n, hd])?;
    let per = nw_total * heads * n * hd;
    let flat = g.reshape(qkv, &[3, per])?;
    let parts = split_rows(g, flat, 3)?;
    let shape = [nw_total * heads, n, hd];
    let q = g.reshape(parts[0], &shape)?;
    let q = g.scale(q, 1.0 / (hd as f64).sqrt());
    let k = g.reshape(parts[1], &shape)?;
    let v = g.reshape(parts[2], &shape)?;

    let logits = g.batch_matmul(q, k, true)?;
    let logits = g.reshape(logits, &[nw_total, heads, n, n])?;
    let table = b.param(g, &format!("{pre}.attn.relative_position_bias_table"))?;
    let bias = g.gather_rows(table, &relative_position_index(win, cfg.window_size))?;
    let bias = g.reshape(bias, &[n, n, heads])?;
    let bias = g.permute(bias, &[2, 0, 1])?;
    let mut logits = g.add_suffix(logits, bias)?;
    if shift > 0 {
        let mask = shift_mask::<T>(hp, wp, win, shift)?;
        let mut rep = Vec::with_capacity(nw * heads * n * n);
        for k in 0..nw {
            let block = &mask.data()[k * n * n..(k + 1) * n * n];
            for _ in 0..heads {
                rep.extend_from_slice(block);
            }
        }
        let mask = g.constant(crate::tensor::Tensor::from_vec(&[nw, heads, n, n], rep)?);
        let l5 = g.reshape(logits, &[bs, nw, heads, n, n])?;
        let l5 = g.add_suffix(l5, mask)?;
        logits = g.reshape(l5, &[nw_total, heads, n, n])?;
    }
    let logits = g.reshape(logits, &[nw_total * heads, n, n])?;
    let attn = g.softmax(logits);
    let out = g.batch_matmul(attn, v, false)?;
    let out = g.reshape(out, &[nw_total, heads, n, hd])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[nw_total, n, c])?;
    let out = linear(g, b, &format!("{pre}.attn.proj"), out)?;

    let mut y = reverse_var(g, out, win, bs, hp, wp)?;
    if shift > 0 {
        y = g.roll(y, shift as isize, shift as isize)?;
    }
    if (hp, wp) != (h, w) {
        y = g.crop_hw(y, h, w)?;
    }
    let x = g.add(x, y)?;
    let z = layer_norm(g, b, &format!("{pre}.norm2"), x)?;
    let z = linear(g, b, &format!("{pre}.mlp.fc1"), z)?;
    let z = g.gelu(z);
    let z = linear(g, b, &format!("{pre}.mlp.fc2"), z)?;
    g.add(x, z)
}

/// Split a `[k, m]` tensor into `k` row vectors of shape `[1, m]`.
fn split_rows<T: Float>(g: &mut Graph<T>, x: Var, k: usize) -> Result<Vec<Var>> {
    let m = g.shape(x)[1];
    // Gather on a [k, m] table selects whole rows.
    (0..k)
        .map(|i| {
            let r = g.gather_rows(x, &[i])?;
            g.reshape(r, &[1, m])
        })
        .collect()
}

pub(crate) fn forward<T: Float>(
    cfg: &BackboneConfig,
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<[Var; 4]> {
    let n = |s: &str| format!("{prefix}{s}");
    let mut h = patchify(g, b, &n("patch_embed.proj"), x, cfg.patch_size)?;
    h = layer_norm(g, b, &n("patch_embed.norm"), h)?;
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        if s > 0 {
            let pre = n(&format!("layers.{s}.downsample"));
            h = space_to_depth(g, h, 2)?;
            h = layer_norm(g, b, &format!("{pre}.norm"), h)?;
            h = linear(g, b, &format!("{pre}.reduction"), h)?;
        }
        for j in 0..cfg.stage_depths[s] {
            h = block(cfg, s, g, b, &n(&format!("layers.{s}.blocks.{j}")), h, j % 2 == 1)?;
        }
        stages.push(h);
    }
    Ok(stages.try_into().expect("four stages"))
}
