//! Naive dense references used as ground truth. Nothing here is shared with the
//! sparse kernels: loops are direct and accumulate in `i32`.

use crate::error::{Error, Result};
use crate::kernels::ConvConfig;
use crate::kwta::{SparseActivation, Winner};
use crate::tensor::{AccTensor, QTensor, SparseKernel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub output: AccTensor,
    /// Multiply-accumulates of the dense computation, padding taps included.
    pub dense_macs: u64,
}

fn conv_dims(input: &QTensor, weights: &QTensor, cfg: &ConvConfig) -> Result<(usize, usize, usize, usize)> {
    let (h, w, c) = match input.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::ShapeMismatch(format!("oracle conv input shape {s:?}"))),
    };
    let k = cfg.kernel_size;
    if weights.shape() != [cfg.out_channels, k, k, cfg.in_channels] || c != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} / input channels {c} disagree with {cfg:?}",
            weights.shape()
        )));
    }
    let (oh, ow) = cfg.output_dims(h, w)?;
    Ok((h, w, oh, ow))
}

/// Direct convolution: output location, then output channel, then the
/// receptive field in (ky, kx, c) order.
pub fn dense_conv_reference(input: &QTensor, weights: &QTensor, cfg: &ConvConfig) -> Result<OracleResult> {
    let (h, w, oh, ow) = conv_dims(input, weights, cfg)?;
    let (k, cin, cout) = (cfg.kernel_size, cfg.in_channels, cfg.out_channels);
    let x = input.values();
    let wt = weights.values();
    let mut out = vec![0i32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0i32;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                        let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let a = x[((iy as usize) * w + ix as usize) * cin + ci] as i32;
                            let b = wt[((co * k + ky) * k + kx) * cin + ci] as i32;
                            acc += a * b;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    Ok(OracleResult {
        output: AccTensor::new(vec![oh, ow, cout], out)?,
        dense_macs: (oh * ow * k * k * cin * cout) as u64,
    })
}

/// Same convolution coded as a scatter from each input element, so the
/// accumulation order differs from [`dense_conv_reference`].
pub fn dense_conv_scatter(input: &QTensor, weights: &QTensor, cfg: &ConvConfig) -> Result<OracleResult> {
    let (h, w, oh, ow) = conv_dims(input, weights, cfg)?;
    let (k, cin, cout) = (cfg.kernel_size, cfg.in_channels, cfg.out_channels);
    let mut out = vec![0i32; oh * ow * cout];
    for ci in (0..cin).rev() {
        for iy in 0..h {
            for ix in 0..w {
                let a = input.values()[(iy * w + ix) * cin + ci] as i32;
                for ky in 0..k {
                    for kx in 0..k {
                        let ty = iy as isize + cfg.padding as isize - ky as isize;
                        let tx = ix as isize + cfg.padding as isize - kx as isize;
                        if ty < 0 || tx < 0 {
                            continue;
                        }
                        let (ty, tx) = (ty as usize, tx as usize);
                        if ty % cfg.stride != 0 || tx % cfg.stride != 0 {
                            continue;
                        }
                        let (oy, ox) = (ty / cfg.stride, tx / cfg.stride);
                        if oy >= oh || ox >= ow {
                            continue;
                        }
                        for co in (0..cout).rev() {
                            let b = weights.values()[((co * k + ky) * k + kx) * cin + ci] as i32;
                            out[(oy * ow + ox) * cout + co] += a * b;
                        }
                    }
                }
            }
        }
    }
    Ok(OracleResult {
        output: AccTensor::new(vec![oh, ow, cout], out)?,
        dense_macs: (oh * ow * k * k * cin * cout) as u64,
    })
}

/// Naive matrix-vector product; `matrix` is `[out, in]`.
pub fn dense_linear_reference(input: &[i8], matrix: &QTensor) -> Result<OracleResult> {
    let (rows, cols) = match matrix.shape() {
        &[r, c] => (r, c),
        s => return Err(Error::ShapeMismatch(format!("matrix shape {s:?}"))),
    };
    if cols != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {cols} columns, input has {} elements",
            input.len()
        )));
    }
    let m = matrix.values();
    let out = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| input[c] as i32 * m[r * cols + c] as i32)
                .sum()
        })
        .collect();
    Ok(OracleResult {
        output: AccTensor::new(vec![rows], out)?,
        dense_macs: (rows * cols) as u64,
    })
}

/// Mask-expanded dense weights `[n_out, kernel_shape...]`; kernels absent from
/// the list stay all-zero.
pub fn expand_weights(kernels: &[SparseKernel], n_out: usize, kernel_shape: &[usize]) -> Result<QTensor> {
    let per: usize = kernel_shape.iter().product();
    let mut values = vec![0i8; n_out * per];
    for k in kernels {
        if k.kernel_id() >= n_out || k.shape() != kernel_shape {
            return Err(Error::ShapeMismatch(format!(
                "kernel {} does not fit {n_out} x {kernel_shape:?}",
                k.kernel_id()
            )));
        }
        for &(p, w) in k.entries() {
            values[k.kernel_id() * per + p] = w;
        }
    }
    let mut shape = vec![n_out];
    shape.extend_from_slice(kernel_shape);
    QTensor::new(shape, values)
}

/// Stable descending sort then take `k`; equal values keep index order, so the
/// lowest indices win ties.
pub fn naive_topk(v: &[i8], k: usize) -> SparseActivation {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].cmp(&v[a]));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    let winners = chosen
        .into_iter()
        .map(|index| Winner {
            index,
            value: v[index],
        })
        .collect();
    SparseActivation::new(v.len(), k, winners).expect("indices are sorted and in range")
}

/// 2x2 / stride-2 style max pooling on an `H x W x C` map.
pub fn naive_maxpool(input: &QTensor, size: usize, stride: usize) -> Result<QTensor> {
    let (h, w, c) = match input.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::ShapeMismatch(format!("pool input shape {s:?}"))),
    };
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = QTensor::zeros(vec![oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = i8::MIN;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(input.get(&[oy * stride + dy, ox * stride + dx, ch]).unwrap());
                    }
                }
                out.values_mut()[(oy * ow + ox) * c + ch] = m;
            }
        }
    }
    Ok(out)
}
