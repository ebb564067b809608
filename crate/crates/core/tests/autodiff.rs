mod common;

use common::{analytic_grad, max_grad_rel_err, rand_tensor};
use hydraview::tensor::{concat, stack, Tape, Tensor};
use hydraview::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

#[test]
fn power_rule() {
    let g = analytic_grad(&[Tensor::scalar(3.0)], &|_, xs| xs[0].square());
    assert_eq!(g[0], vec![6.0]);
}

#[test]
fn product_rule() {
    let g = analytic_grad(&[Tensor::scalar(2.0), Tensor::scalar(5.0)], &|_, xs| {
        xs[0].mul(xs[1])
    });
    assert_eq!(g, vec![vec![5.0], vec![2.0]]);
}

#[test]
fn reused_tensor_accumulates_both_paths() {
    // f(x) = x·w + x·x, duplicated-input oracle: df/dx = w + 2x
    let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
    let w = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
    let g = analytic_grad(&[x.clone(), w.clone()], &|_, xs| {
        xs[0].mul(xs[1])?.add(xs[0].mul(xs[0])?)?.sum_all()
    });
    for i in 0..3 {
        assert!((g[0][i] - (w.data()[i] + 2.0 * x.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 5], 1.0),
        rand_tensor(&mut rng, &[5, 6], 0.7),
        rand_tensor(&mut rng, &[6], 0.3),
        rand_tensor(&mut rng, &[6, 6], 0.7),
        rand_tensor(&mut rng, &[6, 3], 0.7),
    ];
    let err = max_grad_rel_err(&inputs, H, FLOOR, |_, p| {
        let h1 = p[0].matmul(p[1])?.add_bias(p[2])?.softplus()?;
        let h2 = h1.matmul(p[3])?.sigmoid()?;
        h2.matmul(p[4])?.square()?.mean_all()
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let y = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let gamma = rand_tensor(&mut rng, &[4], 1.0);
    let beta = rand_tensor(&mut rng, &[4], 1.0);
    let adj = rand_tensor(&mut rng, &[3, 3], 1.0);
    let probe = rand_tensor(&mut rng, &[2, 3, 4], 1.0);

    type Case = Box<dyn for<'t> Fn(&'t Tape<f64>, &[hydraview::tensor::Var<'t, f64>]) -> hydraview::Result<hydraview::tensor::Var<'t, f64>>>;
    let p = probe.clone();
    let adj2 = adj.clone();
    let cases: Vec<(&str, Case)> = vec![
        ("sub", Box::new(move |t, v| v[0].sub(v[1])?.mul(t.constant(p.clone())?)?.sum_all())),
        ("relu", Box::new(|_, v| v[0].relu()?.square()?.sum_all())),
        ("permute", Box::new(|_, v| {
            v[0].permute(&[2, 0, 1])?.reshape(vec![4, 6])?.matmul(v[1].reshape(vec![6, 4])?)?.square()?.sum_all()
        })),
        ("gather", Box::new(|_, v| {
            v[0].gather(1, &[Some(2), None, Some(0), Some(2)])?.square()?.sum_all()
        })),
        ("concat", Box::new(|_, v| {
            concat(&[v[0], v[1], v[0]], 2)?.square()?.sum_axis(1)?.square()?.mean_all()
        })),
        ("stack", Box::new(|_, v| stack(&[v[0], v[1]])?.mean_axis(1)?.square()?.sum_all())),
        ("scale_rows", Box::new(|_, v| {
            v[0].scale_rows(&[1.0, -2.0, 0.0, 0.5, 3.0, 1.5])?.square()?.sum_all()
        })),
        ("joint_mix", Box::new(move |_, v| v[0].joint_mix(&adj2)?.square()?.sum_all())),
        ("group_norm", Box::new(|_, v| {
            v[0].group_norm(2, v[2], v[3], 1e-5)?.mul(v[1])?.sum_all()
        })),
        ("layer_norm", Box::new(|_, v| v[0].layer_norm(v[2], v[3], 1e-5)?.square()?.mul(v[1])?.sum_all())),
        ("cross_entropy", Box::new(|_, v| v[0].reshape(vec![6, 4])?.cross_entropy(&[0, 3, 1, 2, 2, 0]))),
        ("bce", Box::new(|_, v| {
            let targets = Tensor::from_fn(vec![2, 3, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
            v[0].scale(3.0)?.bce_multilabel(&targets)
        })),
    ];
    for (name, f) in cases {
        let err = max_grad_rel_err(
            &[x.clone(), y.clone(), gamma.clone(), beta.clone()],
            H,
            1e-7,
            |t, v| f(t, v),
        );
        assert!(err < 1e-5, "{name}: max relative error {err}");
    }
}

#[test]
fn backward_rejects_bad_roots() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    let other = Tape::<f64>::new();
    let y = other.param(Tensor::zeros(vec![2])).unwrap();
    let ys = y.sum_all().unwrap();
    assert!(matches!(tape.backward(ys), Err(Error::ForeignTensor)));
    assert!(matches!(x.add(y), Err(Error::ForeignTensor)));
}

#[test]
fn non_finite_forward_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(1e200)).unwrap();
    assert!(matches!(x.square(), Err(Error::NonFinite { .. })));
    assert!(tape.leaf(Tensor::scalar(f64::NAN), false).is_err());
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(2.0)).unwrap();
    let c = tape.constant(Tensor::scalar(4.0)).unwrap();
    let loss = x.mul(c).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4], 1.0), rand_tensor(&mut rng, &[4, 2], 1.0)];
        analytic_grad(&inputs, &|_, p| p[0].matmul(p[1])?.softplus()?.sum_all())
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
