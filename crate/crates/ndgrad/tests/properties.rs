use ndgrad::{Bindings, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v[..shape.iter().product::<usize>()].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn log_softmax_rows_are_log_distributions(
        rows in 1usize..4,
        cols in 1usize..6,
        v in prop::collection::vec(-20.0f64..20.0, 24),
    ) {
        let mut g = Graph::new();
        let x = g.input("x", &[rows, cols]).unwrap();
        let y = g.log_softmax(x).unwrap();
        let t = tensor(&[rows, cols], &v);
        let out = g.forward(&Bindings::new().with("x", &t)).unwrap().into_tensor(y);
        for r in out.data().chunks(cols) {
            let total: f64 = r.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|l| *l <= 1e-15));
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss_scale(
        v in prop::collection::vec(-2.0f64..2.0, 6),
        k in -3.0f64..3.0,
    ) {
        let mut g = Graph::new();
        let x = g.param("x", &[2, 3]).unwrap();
        let s = g.sigmoid(x).unwrap();
        let m = g.mul(s, x).unwrap();
        let base = g.sum(m).unwrap();
        let scaled = g.scale(base, k).unwrap();
        let t = tensor(&[2, 3], &v);
        let b = Bindings::new().with("x", &t);
        let vals = g.forward(&b).unwrap();
        let g1 = g.backward(&vals, base).unwrap();
        let gk = g.backward(&vals, scaled).unwrap();
        for (a, c) in g1.get("x").unwrap().data().iter().zip(gk.get("x").unwrap().data()) {
            prop_assert!((a * k - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn checkpoints_restore_every_value(
        v in prop::collection::vec(prop::num::f64::NORMAL, 1..20),
        names in prop::collection::btree_set("[a-z]{1,6}(\\.[a-z]{1,4})?", 1..4),
    ) {
        let mut store = ParamStore::new();
        for (i, n) in names.iter().enumerate() {
            let len = 1 + (v.len() - 1) * i / names.len().max(1);
            store.insert(n.clone(), Tensor::vector(&v[..len]));
        }
        let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
        prop_assert_eq!(back, store);
    }
}
