//! Resampling and smoothing of single-channel row-major planes.

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    if (w, h) == (out_w, out_h) {
        return src.to_vec();
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn kernel(sigma: f64, radius: usize) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Separable convolution with `exp(-d^2 / 2 sigma^2)` taps (peak 1, not
/// normalized) and zero padding, so each unit impulse becomes a unit-height
/// Gaussian blob.
pub fn gaussian_blur_unnormalized(src: &[f64], w: usize, h: usize, sigma: f64, radius: usize) -> Vec<f64> {
    let k = kernel(sigma, radius);
    separable(src, w, h, &k, radius, false)
}

/// Normalized Gaussian smoothing; border taps are renormalized so constant
/// planes stay constant. `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let k = kernel(sigma, radius);
    separable(src, w, h, &k, radius, true)
}

fn separable(src: &[f64], w: usize, h: usize, k: &[f64], radius: usize, renorm: bool) -> Vec<f64> {
    let r = radius as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for d in -r..=r {
                let xx = x as isize + d;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let kv = k[(d + r) as usize];
                acc += kv * src[y * w + xx as usize];
                wsum += kv;
            }
            tmp[y * w + x] = if renorm { acc / wsum } else { acc };
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for d in -r..=r {
                let yy = y as isize + d;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let kv = k[(d + r) as usize];
                acc += kv * tmp[yy as usize * w + x];
                wsum += kv;
            }
            out[y * w + x] = if renorm { acc / wsum } else { acc };
        }
    }
    out
}

/// Non-overlapping `k x k` block average; extents must divide.
pub fn block_average(src: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let (ow, oh) = (w / k, h / k);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh * k {
        for x in 0..ow * k {
            out[(y / k) * ow + x / k] += src[y * w + x];
        }
    }
    let n = (k * k) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(src: &[f64], w: usize, h: usize, f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h * f * f);
    for y in 0..h * f {
        for x in 0..w * f {
            out.push(src[(y / f) * w + x / f]);
        }
    }
    out
}
