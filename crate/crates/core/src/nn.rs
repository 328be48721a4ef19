//! Layer construction, initialization and batched gradient evaluation.

use ndgrad::{GradError, Gradients, Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Trainable parameter or frozen input, depending on `trainable`.
pub fn weight(g: &mut Graph, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId, GradError> {
    if trainable {
        g.param(name, shape)
    } else {
        g.input(name, shape)
    }
}

/// Same-padded `k x k` convolution reading `{name}.w` and `{name}.b`.
pub fn conv(
    g: &mut Graph,
    x: NodeId,
    name: &str,
    out_channels: usize,
    k: usize,
    stride: usize,
    trainable: bool,
) -> Result<NodeId, GradError> {
    let in_channels = g.shape(x)[0];
    let w = weight(g, &format!("{name}.w"), &[out_channels, in_channels, k, k], trainable)?;
    let b = weight(g, &format!("{name}.b"), &[out_channels], trainable)?;
    g.conv2d(x, w, Some(b), stride, k / 2)
}

/// `x @ w + b` for `x: [m, in]`, reading `{name}.w: [in, out]` and `{name}.b`.
pub fn dense(g: &mut Graph, x: NodeId, name: &str, out: usize, trainable: bool) -> Result<NodeId, GradError> {
    let n_in = g.shape(x)[1];
    let w = weight(g, &format!("{name}.w"), &[n_in, out], trainable)?;
    let b = weight(g, &format!("{name}.b"), &[out], trainable)?;
    g.linear(x, w, b)
}

/// He-normal kernel and zero bias.
pub fn init_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, k: usize) {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), normal(&[out, inp, k, k], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

/// Normal weights with `std = gain / sqrt(in)` and zero bias.
pub fn init_dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize, gain: f64) {
    let std = gain / (inp as f64).sqrt();
    store.insert(format!("{name}.w"), normal(&[inp, out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std)
}

/// Worker count: `WEBSAL_THREADS` if set, else the available parallelism.
pub fn threads() -> usize {
    std::env::var("WEBSAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Order-preserving parallel map over contiguous chunks.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n = threads().min(items.len());
    if n <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(n);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Mean loss and mean gradient over `items`; reduction runs in item order
/// so the result does not depend on the worker count.
pub fn mean_gradients<T: Sync>(
    items: &[T],
    f: impl Fn(&T) -> Result<(f64, Gradients), GradError> + Sync,
) -> Result<(f64, Gradients), GradError> {
    let results = par_map(items, f);
    let mut total = 0.0;
    let mut acc = Gradients::new();
    for r in results {
        let (l, g) = r?;
        total += l;
        acc.accumulate(&g);
    }
    let k = 1.0 / items.len().max(1) as f64;
    acc.scale(k);
    Ok((total * k, acc))
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Relative drop between the mean of the first and last `w` entries.
pub fn relative_drop(v: &[f64], w: usize) -> f64 {
    let w = w.min(v.len()).max(1);
    let head = v[..w].iter().sum::<f64>() / w as f64;
    let tail = v[v.len() - w..].iter().sum::<f64>() / w as f64;
    (head - tail) / head
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert!((relative_drop(&[4.0, 4.0, 2.0, 2.0], 2) - 0.5).abs() < 1e-12);
    }
}
