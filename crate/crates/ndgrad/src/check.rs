use crate::{Bindings, GradError, Graph, NodeId, Tensor};

/// Worst elementwise relative error between `backward` and central
/// differences of step `h`, over every trainable input of the graph.
///
/// Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check(graph: &Graph, loss: NodeId, bindings: &Bindings, h: f64) -> Result<f64, GradError> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(GradError::InvalidStep(h));
    }
    let values = graph.forward(bindings)?;
    let analytic = graph.backward(&values, loss)?;
    let mut worst: f64 = 0.0;
    for (name, _) in graph.trainable_inputs() {
        let base = bindings
            .get(&name)
            .ok_or_else(|| GradError::UnboundInput(name.clone()))?;
        let grad = analytic.get(&name).expect("backward covers every trainable input");
        let mut probe: Tensor = base.clone();
        for i in 0..probe.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = eval_with(graph, loss, bindings, &name, &probe)?;
            probe.data_mut()[i] = orig - h;
            let minus = eval_with(graph, loss, bindings, &name, &probe)?;
            probe.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval_with(
    graph: &Graph,
    loss: NodeId,
    bindings: &Bindings,
    name: &str,
    value: &Tensor,
) -> Result<f64, GradError> {
    let mut b = bindings.clone();
    b.bind(name, value);
    Ok(graph.forward(&b)?.scalar(loss))
}
