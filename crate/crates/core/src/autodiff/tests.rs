use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Packs all inputs into one flat leaf, splits it back into the requested
/// shapes, applies `build`, and reduces with fixed random weights so that
/// no output direction is degenerate.
fn check_primitive<F>(name: &str, shapes: &[&[usize]], positive: bool, trials: usize, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    for trial in 0..trials {
        let data: Vec<f64> = (0..total)
            .map(|_| {
                let v = rng.gen_range(-2.0..2.0);
                if positive {
                    f64::abs(v) + 0.5
                } else {
                    v
                }
            })
            .collect();
        let weight_seed: u64 = rng.gen();
        let point = Tensor::new(&[total], data).unwrap();
        let f = |g: &mut Graph, x: Var| -> Result<Var> {
            let mut parts = Vec::new();
            let mut off = 0;
            for s in shapes {
                let n: usize = s.iter().product();
                let piece = g.slice(x, 0, off, n)?;
                parts.push(g.reshape(piece, s)?);
                off += n;
            }
            let out = build(g, &parts)?;
            let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
            let n = g.value(out).len();
            let w: Vec<f64> = (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect();
            let shape = g.shape(out).to_vec();
            let wv = g.constant_from(&shape, w)?;
            let prod = g.mul(out, wv)?;
            Ok(g.sum(prod))
        };
        let r = grad_check(f, &point, 1e-5).unwrap();
        assert!(
            r.max_rel_error < 1e-6,
            "{name} trial {trial}: rel error {} at {}",
            r.max_rel_error,
            r.worst_index
        );
    }
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    check_primitive("add", &[&[3, 2], &[3, 2]], false, 100, |g, v| g.add(v[0], v[1]));
    check_primitive("sub", &[&[3, 2], &[3, 2]], false, 100, |g, v| g.sub(v[0], v[1]));
    check_primitive("mul", &[&[3, 2], &[3, 2]], false, 100, |g, v| g.mul(v[0], v[1]));
    check_primitive("mul-scalar", &[&[3, 2], &[1]], false, 100, |g, v| g.mul(v[0], v[1]));
    check_primitive("sub-scalar", &[&[1], &[4]], false, 100, |g, v| g.sub(v[0], v[1]));
    check_primitive("sigmoid", &[&[5]], false, 100, |g, v| Ok(g.sigmoid(v[0])));
    check_primitive("silu", &[&[5]], false, 100, |g, v| Ok(g.silu(v[0])));
    check_primitive("exp", &[&[5]], false, 100, |g, v| Ok(g.exp(v[0])));
    check_primitive("log", &[&[5]], true, 100, |g, v| Ok(g.log(v[0])));
    check_primitive("square", &[&[5]], false, 100, |g, v| Ok(g.square(v[0])));
    check_primitive("sqrt", &[&[5]], true, 100, |g, v| Ok(g.sqrt(v[0])));
    check_primitive("scale", &[&[5]], false, 100, |g, v| Ok(g.scale(v[0], -1.7)));
    check_primitive("add_scalar", &[&[5]], false, 100, |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check_primitive("recip", &[&[5]], true, 100, |g, v| Ok(g.recip(v[0])));
}

#[test]
fn structural_primitives_match_finite_differences() {
    check_primitive("matmul", &[&[3, 4], &[4, 2]], false, 100, |g, v| g.matmul(v[0], v[1]));
    check_primitive("concat0", &[&[2, 3], &[1, 3]], false, 100, |g, v| g.concat(&[v[0], v[1]], 0));
    check_primitive("concat1", &[&[2, 3], &[2, 1]], false, 100, |g, v| g.concat(&[v[0], v[1]], 1));
    check_primitive("slice", &[&[4, 3]], false, 100, |g, v| g.slice(v[0], 1, 1, 2));
    check_primitive("reverse0", &[&[4, 3]], false, 100, |g, v| g.reverse(v[0], 0));
    check_primitive("reverse1", &[&[4, 3]], false, 100, |g, v| g.reverse(v[0], 1));
    check_primitive("mean0", &[&[4, 3]], false, 100, |g, v| g.mean(v[0], 0));
    check_primitive("mean1", &[&[4, 3]], false, 100, |g, v| g.mean(v[0], 1));
    check_primitive("sum", &[&[4, 3]], false, 100, |g, v| Ok(g.sum(v[0])));
    check_primitive("frobenius", &[&[4, 3]], false, 100, |g, v| Ok(g.frobenius(v[0])));
    check_primitive("cosine", &[&[6], &[6]], false, 100, |g, v| g.cosine(v[0], v[1]));
    check_primitive("softmax0", &[&[4, 3]], false, 100, |g, v| g.softmax(v[0], 0));
    check_primitive("softmax1", &[&[4, 3]], false, 100, |g, v| g.softmax(v[0], 1));
    check_primitive("linear", &[&[3, 4], &[4, 2], &[2]], false, 100, |g, v| g.linear(v[0], v[1], v[2]));
    let plan = Arc::new(RowPlan {
        rows: vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![], vec![(3, 2.0), (0, -1.0)]],
    });
    check_primitive("row_combine", &[&[4, 3]], false, 100, move |g, v| g.row_combine(v[0], plan.clone()));
}

#[test]
fn fused_primitives_match_finite_differences() {
    for (segment, reverse) in [(4, false), (4, true), (2, false), (2, true), (1, true)] {
        let cfg = ScanConfig {
            segment,
            reverse,
            selective: false,
        };
        check_primitive("scan", &[&[4, 3], &[2], &[3], &[2, 3], &[3, 2], &[3]], false, 30, move |g, v| {
            let delta = g.scale(v[2], 0.3);
            let delta = g.exp(delta);
            g.scan(v[0], v[1], delta, v[3], v[4], v[5], cfg)
        });
        let cfg = ScanConfig { selective: true, ..cfg };
        check_primitive("scan-selective", &[&[4, 3], &[2], &[4, 3], &[4, 2], &[4, 2], &[3]], false, 30, move |g, v| {
            let delta = g.scale(v[2], 0.3);
            let delta = g.exp(delta);
            g.scan(v[0], v[1], delta, v[3], v[4], v[5], cfg)
        });
    }
    check_primitive("conv2d", &[&[2, 6, 4], &[3, 2, 3, 3]], false, 30, |g, v| g.conv2d(v[0], v[1], 3));
    check_primitive("conv2d-single", &[&[1, 2, 2], &[1, 1, 3, 3]], false, 30, |g, v| g.conv2d(v[0], v[1], 2));
    check_primitive("batch_norm", &[&[3, 4], &[1], &[1]], false, 100, |g, v| {
        g.batch_norm(v[0], v[1], v[2], 1e-5, None)
    });
    check_primitive("batch_norm-fixed", &[&[3, 4], &[1], &[1]], false, 100, |g, v| {
        g.batch_norm(v[0], v[1], v[2], 1e-5, Some((0.2, 1.3)))
    });
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let x = Tensor::new(&[3, 5], (0..15).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
    let i3 = g.constant(&Tensor::eye(3));
    let xv = g.constant(&x);
    let y = g.matmul(i3, xv).unwrap();
    assert_eq!(g.value(y), x.data());
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.scalar(y), 0.5);
}

#[test]
fn reverse_is_an_involution() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    for axis in 0..2 {
        let r = g.reverse(x, axis).unwrap();
        let rr = g.reverse(r, axis).unwrap();
        assert_eq!(g.value(rr), g.value(x));
    }
}

#[test]
fn backward_closed_forms() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = g.square(x);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(&Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    let sq = g.square(x);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, -4.0]);
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -2.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[2]));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(MantaError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(&Tensor::zeros(&[3, 2]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn random_three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w1 = Tensor::uniform(&[4, 5], 1.0, &mut rng);
    let w2 = Tensor::uniform(&[5, 3], 1.0, &mut rng);
    let w3 = Tensor::uniform(&[3, 1], 1.0, &mut rng);
    let x0 = Tensor::uniform(&[2, 4], 2.0, &mut rng);
    let r = grad_check(
        |g, x| {
            let (a, b, c) = (g.constant(&w1), g.constant(&w2), g.constant(&w3));
            let h = g.matmul(x, a)?;
            let h = g.silu(h);
            let h = g.matmul(h, b)?;
            let h = g.sigmoid(h);
            let h = g.matmul(h, c)?;
            let h = g.square(h);
            Ok(g.sum(h))
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn cosine_gradient_is_bounded_near_zero() {
    let mut g = Graph::new();
    let a = g.param(&Tensor::zeros(&[3]));
    let b = g.param(&Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap());
    let c = g.cosine(a, b).unwrap();
    assert_eq!(g.scalar(c), 0.0);
    g.backward(c).unwrap();
    assert!(g.grad(a).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn fault_injection_breaks_gradients() {
    let mut g = Graph::with_fault(PrimitiveKind::Sigmoid);
    let x = g.param(&Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.375]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::uniform(&[6, 3], 2.0, &mut rng));
        let w = g.constant(&Tensor::uniform(&[3, 3], 1.0, &mut rng));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn concat_then_slices_reproduce_parts(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 4),
        axis in 0usize..2,
    ) {
        let mut g = Graph::new();
        let (sa, sb) = if axis == 0 { ([3, 2], [2, 2]) } else { ([2, 3], [2, 2]) };
        let va = g.constant_from(&sa, a.clone()).unwrap();
        let vb = g.constant_from(&sb, b.clone()).unwrap();
        let cat = g.concat(&[va, vb], axis).unwrap();
        let first = g.slice(cat, axis, 0, sa[axis]).unwrap();
        let second = g.slice(cat, axis, sa[axis], sb[axis]).unwrap();
        prop_assert_eq!(g.value(first), &a[..]);
        prop_assert_eq!(g.value(second), &b[..]);
    }
}
