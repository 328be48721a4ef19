//! Builds a two-layer network, checks its gradients against finite
//! differences and fits it to XOR with Adam.

use ndgrad::{adam_step, grad_check, AdamConfig, AdamState, Bindings, Graph, ParamStore, Tensor};

fn main() -> Result<(), ndgrad::GradError> {
    let mut g = Graph::new();
    let x = g.input("x", &[4, 2])?;
    let y = g.input("y", &[4, 1])?;
    let w1 = g.param("w1", &[2, 8])?;
    let b1 = g.param("b1", &[8])?;
    let w2 = g.param("w2", &[8, 1])?;
    let b2 = g.param("b2", &[1])?;
    let h = g.linear(x, w1, b1)?;
    let h = g.sigmoid(h)?;
    let o = g.linear(h, w2, b2)?;
    let p = g.sigmoid(o)?;
    let d = g.sub(p, y)?;
    let sq = g.mul(d, d)?;
    let loss = g.mean(sq)?;

    let xs = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let ys = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0])?;
    let mut params = ParamStore::new();
    let mut k = 0.0;
    for (name, shape) in g.trainable_inputs() {
        let t = Tensor::from_fn(&shape, |_| {
            k += 1.0;
            (k * 1.618f64).sin()
        });
        params.insert(name, t);
    }

    let mut b = Bindings::new();
    b.bind("x", &xs).bind("y", &ys).bind_store(&params);
    println!("gradient check: worst relative error {:.2e}", grad_check(&g, loss, &b, 1e-4)?);

    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    for step in 0..=2000 {
        let mut b = Bindings::new();
        b.bind("x", &xs).bind("y", &ys).bind_store(&params);
        let v = g.forward(&b)?;
        if step % 500 == 0 {
            println!("step {step:4}: loss {:.5}, predictions {:.3?}", v.scalar(loss), v.get(p).data());
        }
        let grads = g.backward(&v, loss)?;
        adam_step(&mut params, &grads, &cfg, &mut state)?;
    }
    Ok(())
}
