//! Window partitioning and shifted-window helpers for Swin blocks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn check(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "grid {h}x{w} is not divisible by window {window}; pad first"
        )));
    }
    Ok(())
}

/// `[B, H, W, C]` to `[B * nH * nW, window * window, C]`, windows in row-major order.
pub fn window_partition<T: Float>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = dims4(x.shape())?;
    check(h, w, window)?;
    let t = x.clone().reshape(&[b, h / window, window, w / window, window, c])?;
    t.permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b * (h / window) * (w / window), window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Float>(windows: &Tensor<T>, window: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    check(h, w, window)?;
    let s = windows.shape();
    if s.len() != 3 || s[1] != window * window || s[0] % ((h / window) * (w / window)) != 0 {
        return Err(Error::Shape(format!(
            "windows {s:?} incompatible with {h}x{w} grid and window {window}"
        )));
    }
    let c = s[2];
    let b = s[0] / ((h / window) * (w / window));
    let t = windows.clone().reshape(&[b, h / window, w / window, window, window, c])?;
    t.permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b, h, w, c])
}

pub fn partition_var<T: Float>(g: &mut Graph<T>, x: Var, window: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(g.shape(x))?;
    check(h, w, window)?;
    let t = g.reshape(x, &[b, h / window, window, w / window, window, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b * (h / window) * (w / window), window * window, c])
}

pub fn reverse_var<T: Float>(g: &mut Graph<T>, x: Var, window: usize, batch: usize, h: usize, w: usize) -> Result<Var> {
    check(h, w, window)?;
    let c = *g.shape(x).last().unwrap();
    let t = g.reshape(x, &[batch, h / window, w / window, window, window, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[batch, h, w, c])
}

pub(crate) fn dims4(s: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(s).map_err(|_| Error::Shape(format!("expected [batch, height, width, channels], got {s:?}")))
}

/// Additive attention mask for a cyclically shifted `h x w` grid:
/// `[nW, N, N]` with 0 where both tokens come from the same image region
/// and -100 otherwise.
pub fn shift_mask<T: Float>(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor<T>> {
    check(h, w, window)?;
    let mut region = Tensor::<f64>::zeros(&[1, h, w, 1]);
    let bands = |n: usize| [(0, n - window), (n - window, n - shift), (n - shift, n)];
    let mut id = 0.0;
    for (y0, y1) in bands(h) {
        for (x0, x1) in bands(w) {
            for y in y0..y1 {
                for x in x0..x1 {
                    region.data_mut()[y * w + x] = id;
                }
            }
            id += 1.0;
        }
    }
    let wins = window_partition(&region, window)?;
    let n = window * window;
    let nw = wins.dim(0);
    let mut out = Vec::with_capacity(nw * n * n);
    for k in 0..nw {
        let r = &wins.data()[k * n..(k + 1) * n];
        for i in 0..n {
            for j in 0..n {
                out.push(if r[i] == r[j] { T::zero() } else { T::lit(-100.0) });
            }
        }
    }
    Tensor::from_vec(&[nw, n, n], out)
}

/// Index into a `(2 * table_window - 1)^2` bias table for every token pair of
/// a `window x window` window, row-major over `(query, key)`.
pub fn relative_position_index(window: usize, table_window: usize) -> Vec<usize> {
    let side = 2 * table_window - 1;
    let coords: Vec<(isize, isize)> = (0..window)
        .flat_map(|y| (0..window).map(move |x| (y as isize, x as isize)))
        .collect();
    let off = table_window as isize - 1;
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for &(qy, qx) in &coords {
        for &(ky, kx) in &coords {
            idx.push(((qy - ky + off) as usize) * side + (qx - kx + off) as usize);
        }
    }
    idx
}
