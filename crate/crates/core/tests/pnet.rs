use ndgrad::{grad_check, Bindings, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use websal::efnet::{CamStack, GapCnn};
use websal::pnet::{
    gt_denominator, init_fusion, loss_l1, loss_l2, mdrd_graph, mdrd_selector, total_loss, FusionGraph, GraphOptions,
};
use websal::ppl::PlNetParams;
use websal::saldata::{synth_page_sized, Layout, SaliencyMap};

/// Direct evaluation on plain slices.
fn oracle_l1(p: &[f64], s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        let q = p[i].max(1e-7).min(1.0 - 1e-7);
        acc += s[i] * q.ln() + (1.0 - s[i]) * (1.0 - q).ln();
    }
    -acc / p.len() as f64
}

fn oracle_l2(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let mut acc = 0.0;
    for i in 0..p.len() {
        let pi = p[i] / sp;
        if pi > 0.0 {
            acc += pi * (pi / (q[i] / sq + eps) + eps).ln();
        }
    }
    acc
}

fn map(v: Vec<f64>, w: usize) -> SaliencyMap {
    let h = v.len() / w;
    SaliencyMap::new(w, h, v).unwrap()
}

proptest! {
    #[test]
    fn losses_match_direct_evaluation(
        p in prop::collection::vec(0.0f64..=1.0, 12),
        s in prop::collection::vec(0.01f64..=1.0, 12),
        eps in 1e-6f64..1e-2,
    ) {
        prop_assume!(p.iter().sum::<f64>() > 1e-3);
        let (pm, sm) = (map(p.clone(), 4), map(s.clone(), 4));
        prop_assert!((loss_l1(&pm, &sm).unwrap() - oracle_l1(&p, &s)).abs() < 1e-10);
        prop_assert!((loss_l2(&pm, &sm, eps).unwrap() - oracle_l2(&p, &s, eps)).abs() < 1e-10);
        let t = total_loss(&pm, &sm, 0.7, 0.3, eps).unwrap();
        prop_assert!((t - 0.7 * oracle_l1(&p, &s) - 0.3 * oracle_l2(&p, &s, eps)).abs() < 1e-10);
    }
}

#[test]
fn l2_of_identical_maps_shrinks_with_epsilon() {
    let u = SaliencyMap::filled(2, 2, 0.25);
    let printed = loss_l2(&u, &u, 1e-4).unwrap();
    assert!((printed - (0.25f64 / 0.2501 + 1e-4).ln()).abs() < 1e-15);
    assert!((printed + 2.9988e-4).abs() < 1e-7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = SaliencyMap::from_fn(8, 6, |_, _| rng.gen_range(0.05..1.0));
    let mags: Vec<f64> = [1e-2, 1e-4, 1e-6].iter().map(|&e| loss_l2(&s, &s, e).unwrap().abs()).collect();
    assert!(mags[0] > mags[1] && mags[1] > mags[2], "{mags:?}");
    assert!(mags[2] < 1e-4);
}

#[test]
fn loss_inputs_are_validated() {
    let a = SaliencyMap::filled(2, 2, 0.5);
    let b = SaliencyMap::filled(3, 2, 0.5);
    assert!(loss_l1(&a, &b).is_err());
    assert!(loss_l2(&a, &a, 0.0).is_err());
    assert!(loss_l2(&SaliencyMap::zeros(2, 2), &a, 1e-4).is_err());
    assert!(gt_denominator(&SaliencyMap::zeros(2, 2), 1e-4).is_err());
}

const W: usize = 16;
const H: usize = 12;

fn all_on() -> GraphOptions {
    GraphOptions {
        use_ppl: true,
        use_mdrd: true,
        use_trd: true,
        plnet_in_graph: false,
        plnet_trainable: false,
        mdrd_in_graph: false,
        n_classes: 3,
    }
}

struct Inputs {
    stim: Tensor,
    gt: Tensor,
    gt_den: Tensor,
    prior: Tensor,
    mdrd: Tensor,
    text: Tensor,
    sel: Tensor,
}

fn inputs(seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plane = |lo: f64, hi: f64| Tensor::from_fn(&[1, H, W], |_| rng.gen_range(lo..hi));
    let gt = plane(0.0, 1.0);
    let prior = plane(0.0, 1.0);
    let mdrd = plane(0.0, 1.0);
    let text = plane(0.0, 1.0);
    let gt_map = SaliencyMap::from_tensor(&gt).unwrap();
    let stim = synth_page_sized(seed, Layout::SidebarMixed, W, H).0.to_tensor();
    Inputs {
        gt_den: gt_denominator(&gt_map, 1e-4).unwrap(),
        stim,
        gt,
        prior,
        mdrd,
        text,
        sel: Tensor::new(vec![1, 3], vec![0.5, 0.0, 0.25]).unwrap(),
    }
}

fn bind<'a>(b: &mut Bindings<'a>, x: &'a Inputs) {
    b.bind("pnet.in.stim", &x.stim)
        .bind("pnet.in.gt", &x.gt)
        .bind("pnet.in.gt_den", &x.gt_den)
        .bind("pnet.in.prior", &x.prior)
        .bind("pnet.in.mdrd", &x.mdrd)
        .bind("pnet.in.text", &x.text)
        .bind("pnet.in.mdrd_sel", &x.sel);
}

#[test]
fn fusion_objective_gradients_match_finite_differences() {
    let x = inputs(3);
    let fusion = init_fusion(4);
    for (alpha, beta) in [(1.0, 0.0), (0.0, 1.0), (1.0, 0.1)] {
        let fg = FusionGraph::build(W, H, all_on(), alpha, beta, 1e-4).unwrap();
        let mut b = Bindings::new();
        bind(&mut b, &x);
        b.bind_store(&fusion);
        let err = grad_check(&fg.graph, fg.total, &b, 1e-5).unwrap();
        assert!(err < 1e-4, "alpha {alpha} beta {beta}: relative error {err}");
    }
}

/// Norm-wise relative error between backprop and central differences over
/// randomly sampled parameter coordinates. Deep ReLU stacks leave some
/// coordinates with gradients near round-off, where per-coordinate ratios
/// carry no information.
fn sampled_gradient_error(fg: &FusionGraph, x: &Inputs, params: &ndgrad::ParamStore, n: usize, h: f64) -> f64 {
    let eval = |p: &ndgrad::ParamStore| {
        let mut b = Bindings::new();
        bind(&mut b, x);
        b.bind_store(p);
        fg.graph.forward(&b).unwrap().scalar(fg.total)
    };
    let mut b = Bindings::new();
    bind(&mut b, x);
    b.bind_store(params);
    let v = fg.graph.forward(&b).unwrap();
    let grads = fg.graph.backward(&v, fg.total).unwrap();
    let names: Vec<String> = fg.graph.trainable_inputs().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut diff, mut norm) = (0.0, 0.0);
    for _ in 0..n {
        let name = &names[rng.gen_range(0..names.len())];
        let len = params.get(name).unwrap().len();
        let i = rng.gen_range(0..len);
        let mut p = params.clone();
        p.get_mut(name).unwrap().data_mut()[i] += h;
        let plus = eval(&p);
        p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
        let minus = eval(&p);
        let numeric = (plus - minus) / (2.0 * h);
        let a = grads.get(name).unwrap().data()[i];
        diff += (a - numeric).powi(2);
        norm += a.powi(2).max(numeric.powi(2));
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}

#[test]
fn in_graph_branch_gradients_match_finite_differences() {
    let x = inputs(5);
    let fusion = init_fusion(6);
    let pl = PlNetParams::init(7);
    let gap = GapCnn::init(3, 8);
    let opts = GraphOptions {
        plnet_in_graph: true,
        plnet_trainable: true,
        mdrd_in_graph: true,
        ..all_on()
    };
    let fg = FusionGraph::build(W, H, opts, 1.0, 0.1, 1e-4).unwrap();
    let mut b = Bindings::new();
    bind(&mut b, &x);
    let mut params = fusion.clone();
    params.extend_prefixed("", &pl.weights);
    params.extend_prefixed("", &gap.weights);
    let err = sampled_gradient_error(&fg, &x, &params, 400, 1e-5);
    assert!(err < 1e-6, "norm-wise relative error {err}");
    let names: Vec<String> = fg.graph.trainable_inputs().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n.starts_with("plnet.")));
    assert!(names.iter().any(|n| n.starts_with("gap.")));
    assert!(!names.iter().any(|n| n == "gap.fc.b"));
}

#[test]
fn in_graph_class_regions_equal_the_computed_map() {
    let gap = GapCnn::init(3, 2);
    for seed in 0..3 {
        let stim = synth_page_sized(seed, Layout::ALL[seed as usize], W, H).0;
        let stack = CamStack::compute(&stim, &gap, 0.9).unwrap();
        let sel = mdrd_selector(&stack).unwrap();
        let mut g = ndgrad::Graph::new();
        let si = g.input("pnet.in.stim", &[3, H, W]).unwrap();
        let out = mdrd_graph(&mut g, si, 3).unwrap();
        let stim_t = stim.to_tensor();
        let mut b = Bindings::new();
        b.bind("pnet.in.stim", &stim_t).bind("pnet.in.mdrd_sel", &sel).bind_store(&gap.weights);
        let v = g.forward(&b).unwrap();
        let want = stack.map(websal::efnet::GAP_STRIDE);
        for (a, b) in v.get(out).data().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_inputs_with_zero_biases_predict_one_half() {
    let fusion = init_fusion(9);
    let fg = FusionGraph::build(W, H, all_on(), 1.0, 0.1, 1e-4).unwrap();
    let z3 = Tensor::zeros(&[3, H, W]);
    let z1 = Tensor::zeros(&[1, H, W]);
    let one = Tensor::full(&[1, H, W], 1.0);
    let mut b = Bindings::new();
    b.bind("pnet.in.stim", &z3)
        .bind("pnet.in.prior", &z1)
        .bind("pnet.in.mdrd", &z1)
        .bind("pnet.in.text", &z1)
        .bind("pnet.in.gt", &one)
        .bind("pnet.in.gt_den", &one)
        .bind_store(&fusion);
    let v = fg.graph.forward(&b).unwrap();
    assert!(v.get(fg.pred).data().iter().all(|&p| p == 0.5));
}

/// Gradient mass reaching the fusion input channel `c` of the first layer.
fn channel_grad(fg: &FusionGraph, b: &Bindings, c: usize) -> f64 {
    let v = fg.graph.forward(b).unwrap();
    let g = fg.graph.backward(&v, fg.total).unwrap();
    let w = g.get("pnet.conv1.w").unwrap();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let k = w.len() / (out * inp);
    (0..out)
        .flat_map(|o| (0..k).map(move |j| (o * inp + c) * k + j))
        .map(|i| w.data()[i].abs())
        .sum()
}

#[test]
fn only_enabled_branches_receive_gradient() {
    let x = inputs(11);
    let fusion = init_fusion(12);
    for (ppl, mdrd, trd) in [(true, true, true), (false, true, false), (true, false, true), (false, false, false)] {
        let opts = GraphOptions {
            use_ppl: ppl,
            use_mdrd: mdrd,
            use_trd: trd,
            ..all_on()
        };
        let fg = FusionGraph::build(W, H, opts, 1.0, 0.1, 1e-4).unwrap();
        let mut b = Bindings::new();
        bind(&mut b, &x);
        b.bind_store(&fusion);
        for (c, on) in [(8, ppl), (9, mdrd), (10, trd)] {
            let g = channel_grad(&fg, &b, c);
            if on {
                assert!(g > 0.0, "branch channel {c} enabled but gradient is zero");
            } else {
                assert_eq!(g, 0.0, "branch channel {c} disabled but gradient is {g}");
            }
        }
        assert!(channel_grad(&fg, &b, 0) > 0.0);
    }
}
