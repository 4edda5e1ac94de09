//! Hot numeric kernels behind the tape ops: batched linear maps and 3x3
//! convolutions. Columns are the batch dimension throughout. Parallel
//! partitioning uses fixed chunk sizes so outputs do not depend on the
//! thread count.

use crate::par::for_each_chunk_mut;

/// y += w * x, where w is (m x k) row-major, x is (k x n), y is (m x n).
/// Parallelised over output rows; each row is an axpy sweep over the rows
/// of x, which keeps all inner loops contiguous.
pub fn matmul_acc(y: &mut [f64], w: &[f64], x: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(y.len(), m * n);
    assert_eq!(w.len(), m * k);
    assert_eq!(x.len(), k * n);
    for_each_chunk_mut(y, n, |off, yrow| {
        let i = off / n;
        let wr = &w[i * k..(i + 1) * k];
        if n == 1 {
            let mut acc = 0.0;
            for (wv, xv) in wr.iter().zip(x.iter()) {
                acc += wv * xv;
            }
            yrow[0] += acc;
        } else {
            for (j, &wv) in wr.iter().enumerate() {
                if wv != 0.0 {
                    let xr = &x[j * n..(j + 1) * n];
                    for (yv, xv) in yrow.iter_mut().zip(xr.iter()) {
                        *yv += wv * xv;
                    }
                }
            }
        }
    });
}

/// dw += d * x^T, where d is (m x n), x is (k x n), dw is (m x k).
pub fn matmul_abt_acc(dw: &mut [f64], d: &[f64], x: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(dw.len(), m * k);
    assert_eq!(d.len(), m * n);
    assert_eq!(x.len(), k * n);
    for_each_chunk_mut(dw, k, |off, dwrow| {
        let i = off / k;
        let dr = &d[i * n..(i + 1) * n];
        for (j, dwv) in dwrow.iter_mut().enumerate() {
            let xr = &x[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (dv, xv) in dr.iter().zip(xr.iter()) {
                acc += dv * xv;
            }
            *dwv += acc;
        }
    });
}

/// dx += w^T * d, where w is (m x k), d is (m x n), dx is (k x n).
pub fn matmul_atb_acc(dx: &mut [f64], w: &[f64], d: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(dx.len(), k * n);
    assert_eq!(w.len(), m * k);
    assert_eq!(d.len(), m * n);
    for_each_chunk_mut(dx, n, |off, dxrow| {
        let j = off / n;
        for i in 0..m {
            let wv = w[i * k + j];
            if wv != 0.0 {
                let dr = &d[i * n..(i + 1) * n];
                for (dxv, dv) in dxrow.iter_mut().zip(dr.iter()) {
                    *dxv += wv * dv;
                }
            }
        }
    });
}

/// Adds `b[i]` to every element of row i. b has length m, y is (m x n).
pub fn add_bias(y: &mut [f64], b: &[f64], m: usize, n: usize) {
    assert_eq!(y.len(), m * n);
    assert_eq!(b.len(), m);
    for (i, row) in y.chunks_mut(n).enumerate() {
        let bv = b[i];
        for v in row {
            *v += bv;
        }
    }
}

/// Spatial dims after a 3x3 convolution with padding 1.
pub fn conv_out_dim(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

/// 3x3 convolution, padding 1. x is (cin x h*w) channel-major, out (cout x ho*wo).
/// kernel layout: [cout][cin][3][3].
pub fn conv3x3(
    out: &mut [f64],
    kern: &[f64],
    bias: Option<&[f64]>,
    x: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    stride: usize,
) {
    let (ho, wo) = conv_out_dim(h, w, stride);
    assert_eq!(out.len(), cout * ho * wo);
    assert_eq!(kern.len(), cout * cin * 9);
    assert_eq!(x.len(), cin * h * w);
    for_each_chunk_mut(out, ho * wo, |off, orow| {
        let co = off / (ho * wo);
        let kbase = co * cin * 9;
        for oy in 0..ho {
            for ox in 0..wo {
                let iy0 = (oy * stride) as isize - 1;
                let ix0 = (ox * stride) as isize - 1;
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cin {
                    let xc = &x[ci * h * w..(ci + 1) * h * w];
                    let kc = &kern[kbase + ci * 9..kbase + ci * 9 + 9];
                    for ky in 0..3 {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kc[ky * 3 + kx] * xc[iy as usize * w + ix as usize];
                        }
                    }
                }
                orow[oy * wo + ox] = acc;
            }
        }
    });
}

/// Backward of [`conv3x3`]: accumulates kernel, bias and input gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    dkern: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
    dout: &[f64],
    kern: &[f64],
    x: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    stride: usize,
) {
    let (ho, wo) = conv_out_dim(h, w, stride);
    assert_eq!(dout.len(), cout * ho * wo);
    if let Some(db) = dbias {
        for co in 0..cout {
            db[co] += dout[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
        }
    }
    if let Some(dk) = dkern {
        for co in 0..cout {
            let dor = &dout[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                let kc = &mut dk[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let dv = dor[oy * wo + ox];
                        if dv == 0.0 {
                            continue;
                        }
                        let iy0 = (oy * stride) as isize - 1;
                        let ix0 = (ox * stride) as isize - 1;
                        for ky in 0..3 {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                kc[ky * 3 + kx] += dv * xc[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dxs) = dx {
        for co in 0..cout {
            let dor = &dout[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let kc = &kern[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                let dxc = &mut dxs[ci * h * w..(ci + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let dv = dor[oy * wo + ox];
                        if dv == 0.0 {
                            continue;
                        }
                        let iy0 = (oy * stride) as isize - 1;
                        let ix0 = (ox * stride) as isize - 1;
                        for ky in 0..3 {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxc[iy as usize * w + ix as usize] += dv * kc[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}
