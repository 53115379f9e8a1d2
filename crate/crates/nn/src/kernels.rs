//! Slice-level forward/backward kernels. Everything here is single-threaded
//! and iterates in a fixed order, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// `c = a * b + beta * c` with arbitrary strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f32], s: &ConvShape, cols: &mut [f32]) {
    let (p, g) = (s.p(), s.geom);
    for ci in 0..s.cin {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = ((ci * s.kh + ky) * s.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..s.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * s.ow..(oy + 1) * s.ow];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= s.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], s: &ConvShape, dx: &mut [f32]) {
    let (p, g) = (s.p(), s.geom);
    for ci in 0..s.cin {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = ((ci * s.kh + ky) * s.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..s.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < s.w {
                            dst[ix as usize] += src[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    s: &ConvShape,
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let (k, p) = (s.k(), s.p());
    let mut cols = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..n {
        let xb = &x[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        let ob = &mut out[b * s.cout * p..(b + 1) * s.cout * p];
        let cols_ref: &[f32] = if s.is_pointwise() {
            xb
        } else {
            im2col(xb, s, &mut cols);
            &cols
        };
        gemm(s.cout, k, p, weight, (k, 1), cols_ref, (p, 1), 0.0, ob);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_exact_mut(p).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Accumulates weight/bias gradients and optionally writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    s: &ConvShape,
    weight: &[f32],
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let (k, p) = (s.k(), s.p());
    let pointwise = s.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = vec![0.0; if dx.is_some() { k * p } else { 0 }];
    for b in 0..n {
        let xb = &x[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        let dyb = &dy[b * s.cout * p..(b + 1) * s.cout * p];
        if let Some(dw) = dw.as_deref_mut() {
            let cols_ref: &[f32] = if pointwise {
                xb
            } else {
                im2col(xb, s, &mut cols);
                &cols
            };
            // dW (cout x k) += dY (cout x p) * cols^T (p x k)
            gemm(s.cout, p, k, dyb, (p, 1), cols_ref, (1, p), 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyb.chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
            // dCols (k x p) = W^T (k x cout) * dY (cout x p)
            if pointwise {
                gemm(k, s.cout, p, weight, (1, k), dyb, (p, 1), 1.0, dxb);
            } else {
                gemm(k, s.cout, p, weight, (1, k), dyb, (p, 1), 0.0, &mut dcols);
                col2im(&dcols, s, dxb);
            }
        }
    }
}

/// PyTorch-compatible adaptive pooling bin `[start, end)` for output index `i`.
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub(crate) fn adaptive_avg_pool_forward(
    x: &[f32],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [f32],
) {
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for v in &src[y * w + x0..y * w + x1] {
                        acc += v;
                    }
                }
                dst[oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
}

pub(crate) fn adaptive_avg_pool_backward(
    dy: &[f32],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f32],
) {
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let g = src[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for v in &mut dst[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Per-axis source indices and blend weight for align-corners bilinear resizing.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub(crate) fn resize_bilinear_forward(
    x: &[f32],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [f32],
) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

pub(crate) fn resize_bilinear_backward(
    dy: &[f32],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f32],
) {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Max pooling with implicit -inf padding; returns the flat argmax per output.
pub(crate) fn max_pool_forward(
    x: &[f32],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
    geom: ConvGeom,
    (oh, ow): (usize, usize),
    out: &mut [f32],
) -> Vec<u32> {
    let mut arg = vec![0u32; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = pl * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    arg
}

pub(crate) struct BatchStats {
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn batch_norm_train_forward(
    x: &[f32],
    (n, c, hw): (usize, usize, usize),
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    xhat: &mut [f32],
    out: &mut [f32],
) -> BatchStats {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let o = (b * c + ch) * hw;
            s += x[o..o + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for b in 0..n {
            let o = (b * c + ch) * hw;
            ss += x[o..o + hw]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        let var = ss / m;
        let istd = 1.0 / (var + eps as f64).sqrt();
        mean[ch] = mu as f32;
        var_unbiased[ch] = if m > 1.0 { (ss / (m - 1.0)) as f32 } else { 0.0 };
        inv_std[ch] = istd as f32;
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                let xh = ((x[i] as f64 - mu) * istd) as f32;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BatchStats {
        mean,
        var_unbiased,
        inv_std,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_train_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    (n, c, hw): (usize, usize, usize),
    dx: Option<&mut [f32]>,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let m = (n * hw) as f32;
    let mut sum_dy = vec![0.0f32; c];
    let mut sum_dy_xhat = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * xhat[i];
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    if let Some(dx) = dx {
        for b in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * inv_std[ch] / m;
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dx[i] += k * (m * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f32],
        s: &ConvShape,
        weight: &[f32],
        bias: Option<&[f32]>,
    ) -> Vec<f32> {
        let g = s.geom;
        let mut out = vec![0.0; s.cout * s.oh * s.ow];
        for co in 0..s.cout {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..s.cin {
                        for ky in 0..s.kh {
                            for kx in 0..s.kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize
                                    - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize
                                    - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w
                                {
                                    acc += weight[((co * s.cin + ci) * s.kh + ky) * s.kw + kx]
                                        * x[(ci * s.h + iy as usize) * s.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * s.oh + oy) * s.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, geom) in &[
            (3, ConvGeom::new(1, 1, 1)),
            (3, ConvGeom::new(2, 1, 1)),
            (3, ConvGeom::new(1, 2, 2)),
            (4, ConvGeom::new(2, 1, 1)),
            (1, ConvGeom::new(1, 0, 1)),
            (1, ConvGeom::new(2, 0, 1)),
        ] {
            let (cin, h, w, cout) = (3, 7, 6, 4);
            let oh = geom.out_len(h, k).unwrap();
            let ow = geom.out_len(w, k).unwrap();
            let s = ConvShape {
                cin,
                h,
                w,
                cout,
                kh: k,
                kw: k,
                oh,
                ow,
                geom,
            };
            let x: Vec<f32> = (0..cin * h * w).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
            let wt: Vec<f32> = (0..cout * cin * k * k)
                .map(|i| ((i * 5) % 7) as f32 * 0.1 - 0.3)
                .collect();
            let bias = vec![0.5, -0.25, 0.0, 1.0];
            let mut out = vec![0.0; cout * oh * ow];
            conv2d_forward(&x, 1, &s, &wt, Some(&bias), &mut out);
            let want = naive_conv(&x, &s, &wt, Some(&bias));
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adaptive_bins_match_torch_convention() {
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
    }

    #[test]
    fn bilinear_resize_keeps_corners() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 9];
        resize_bilinear_forward(&x, 1, (2, 2), (3, 3), &mut out);
        assert_eq!(out, vec![1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.0, 3.5, 4.0]);
    }
}
