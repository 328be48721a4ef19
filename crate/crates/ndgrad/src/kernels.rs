//! Raw loops behind the graph ops. Everything here works on flat row-major
//! slices; shape checking happens when the graph is built.

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.pad, self.in_w);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // largest ox with ox*s + kx - p <= w - 1
        let hi = if w + p < kx + 1 {
            0
        } else {
            ((w - 1 + p - kx) / s + 1).min(self.out_w())
        };
        (lo, hi.max(lo))
    }

    /// Input row for output row `oy` and tap `ky`, if inside the image.
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        if iy < self.pad || iy - self.pad >= self.in_h {
            None
        } else {
            Some(iy - self.pad)
        }
    }
}

pub fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.in_h * g.in_w;
    let plane_out = oh * ow;
    for o in 0..g.out_channels {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        out_o.fill(bias.map_or(0.0, |b| b[o]));
        for c in 0..g.in_channels {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    let w = weight[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &in_c[iy * g.in_w..(iy + 1) * g.in_w];
                        let dst = &mut out_o[oy * ow + lo..oy * ow + hi];
                        if g.stride == 1 {
                            let src = &row[lo + kx - g.pad..hi + kx - g.pad];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d += w * row[(lo + i) * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input, weight and bias gradients of a convolution.
/// Any of the outputs may be skipped by passing `None`.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.in_h * g.in_w;
    let plane_out = oh * ow;
    if let Some(gb) = grad_b {
        for o in 0..g.out_channels {
            gb[o] += grad_out[o * plane_out..(o + 1) * plane_out].iter().sum::<f64>();
        }
    }
    for o in 0..g.out_channels {
        let go = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.in_channels {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    let widx = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                    let w = weight[widx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let go_row = &go[oy * ow + lo..oy * ow + hi];
                        let base = iy * g.in_w;
                        if g.stride == 1 {
                            let start = base + lo + kx - g.pad;
                            let src = &in_c[start..start + (hi - lo)];
                            if grad_w.is_some() {
                                acc += go_row.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let off = c * plane_in + start;
                                let dst = &mut gi[off..off + (hi - lo)];
                                for (d, s) in dst.iter_mut().zip(go_row) {
                                    *d += w * s;
                                }
                            }
                        } else {
                            for (i, &gv) in go_row.iter().enumerate() {
                                let ix = base + (lo + i) * g.stride + kx - g.pad;
                                acc += gv * in_c[ix];
                                if let Some(gi) = grad_in.as_deref_mut() {
                                    gi[c * plane_in + ix] += w * gv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// `out = a @ b` with `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `ga += g @ b^T` with `g: [m, n]`, `b: [k, n]`.
pub fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            ga[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb += a^T @ g` with `a: [m, k]`, `g: [m, n]`.
pub fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (o, gv) in gb_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}
