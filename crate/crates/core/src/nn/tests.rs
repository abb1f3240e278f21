use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::relative_error;
use super::*;
use crate::tensor::Tensor;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Checks every parameter coordinate of a tiny graph against central differences.
fn check_all(store: &mut ParamStore<f64>, build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss, store.len());
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let l = build(&mut g, s);
        g.value(l).data()[0]
    };
    let ids: Vec<_> = store.iter().map(|(id, _, t)| (id, t.len())).collect();
    for (id, n) in ids {
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + 1e-6;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - 1e-6;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / 2e-6;
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(analytic, numeric, 1e-7);
            assert!(
                err < 1e-5,
                "{}[{i}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
        }
    }
}

#[test]
fn elementwise_ops_and_losses() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let a = store.add("a", randn(&[2, 3], &mut r));
    let b = store.add("b", randn(&[2, 3], &mut r));
    let target = randn(&[2, 3], &mut r);
    check_all(&mut store, |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let sum = g.add(a, b);
        let prod = g.mul(sum, a);
        let diff = g.sub(prod, b);
        let scaled = g.scale(diff, 0.7);
        let act = g.silu(scaled);
        let t = g.constant(target.clone());
        let l1 = g.l1_loss(act, t);
        let l2 = g.mse_loss(act, b);
        g.add(l1, l2)
    });
}

#[test]
fn linear_relu_glu_layer_norm() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let x = store.add("x", randn(&[4, 3], &mut r));
    let w = store.add("w", randn(&[3, 6], &mut r));
    let b = store.add("b", randn(&[6], &mut r));
    let gamma = store.add("gamma", randn(&[3], &mut r));
    let beta = store.add("beta", randn(&[3], &mut r));
    let target = randn(&[4, 3], &mut r);
    check_all(&mut store, |g, s| {
        let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let h = g.linear(x, w, Some(b));
        let h = g.glu(h);
        let (gm, bt) = (g.param(s, gamma), g.param(s, beta));
        let h = g.layer_norm(h, gm, bt);
        let h = g.relu(h);
        let t = g.constant(target.clone());
        g.mse_loss(h, t)
    });
}

#[test]
fn conv2d_group_norm_film_upsample_concat() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let x = store.add("x", randn(&[2, 2, 4, 4], &mut r));
    let w = store.add("w", randn(&[4, 2, 3, 3], &mut r));
    let b = store.add("b", randn(&[4], &mut r));
    let w2 = store.add("w2", randn(&[2, 4, 3, 3], &mut r));
    let b2 = store.add("b2", randn(&[2], &mut r));
    let gamma = store.add("gamma", randn(&[4], &mut r));
    let beta = store.add("beta", randn(&[4], &mut r));
    let film = store.add("film", randn(&[2, 8], &mut r).map(|v| 0.3 * v));
    let target = randn(&[2, 6, 4, 4], &mut r);
    check_all(&mut store, |g, s| {
        let xv = g.param(s, x);
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let h = g.conv2d(xv, wv, bv, Conv2dSpec { stride: 1, padding: 1 });
        let (gm, bt) = (g.param(s, gamma), g.param(s, beta));
        let h = g.group_norm(h, gm, bt, 2);
        let f = g.param(s, film);
        let h = g.film(h, f);
        let h = g.silu(h);
        let (w2v, b2v) = (g.param(s, w2), g.param(s, b2));
        let down = g.conv2d(h, w2v, b2v, Conv2dSpec { stride: 2, padding: 1 });
        let up = g.upsample2x(down);
        let cat = g.concat1(h, up);
        let t = g.constant(target.clone());
        g.mse_loss(cat, t)
    });
}

#[test]
fn reshape_and_flatten_linear() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let x = store.add("x", randn(&[2, 3, 2, 2], &mut r));
    let w = store.add("w", randn(&[12, 2], &mut r));
    let target = randn(&[2, 2], &mut r);
    check_all(&mut store, |g, s| {
        let xv = g.param(s, x);
        let flat = g.reshape(xv, &[2, 12]);
        let wv = g.param(s, w);
        let y = g.linear(flat, wv, None);
        let t = g.constant(target.clone());
        g.mse_loss(y, t)
    });
}

#[test]
fn conv1d_strided_and_depthwise() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let x = store.add("x", randn(&[9, 3], &mut r));
    let w = store.add("w", randn(&[2 * 3, 4], &mut r));
    let b = store.add("b", randn(&[4], &mut r));
    let wp = store.add("wp", randn(&[3 * 4, 4], &mut r));
    let bp = store.add("bp", randn(&[4], &mut r));
    let dw = store.add("dw", randn(&[5, 4], &mut r));
    let db = store.add("db", randn(&[4], &mut r));
    let target = randn(&[4, 4], &mut r);
    check_all(&mut store, |g, s| {
        let xv = g.param(s, x);
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let h = g.conv1d(xv, wv, bv, 2, 2, 0);
        let (wpv, bpv) = (g.param(s, wp), g.param(s, bp));
        let h = g.conv1d(h, wpv, bpv, 3, 1, 1);
        let (dwv, dbv) = (g.param(s, dw), g.param(s, db));
        let h = g.depthwise_conv1d(h, dwv, dbv);
        let t = g.constant(target.clone());
        g.mse_loss(h, t)
    });
}

#[test]
fn attention_with_relative_bias() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let q = store.add("q", randn(&[5, 4], &mut r));
    let k = store.add("k", randn(&[5, 4], &mut r));
    let v = store.add("v", randn(&[5, 4], &mut r));
    let bias = store.add("bias", randn(&[2, 5], &mut r));
    let target = randn(&[5, 4], &mut r);
    check_all(&mut store, |g, s| {
        let (q, k, v, b) = (g.param(s, q), g.param(s, k), g.param(s, v), g.param(s, bias));
        let o = g.attention(q, k, v, b, 2);
        let t = g.constant(target.clone());
        g.mse_loss(o, t)
    });
}

#[test]
fn attention_rows_are_convex_combinations() {
    let mut r = rng();
    let mut g = Graph::<f64>::inference();
    let q = g.constant(randn(&[6, 4], &mut r));
    let k = g.constant(randn(&[6, 4], &mut r));
    // constant values per column: output must reproduce them
    let v = g.constant(Tensor::from_vec(&[6, 4], (0..24).map(|i| (i % 4) as f64).collect()).unwrap());
    let b = g.constant(Tensor::zeros(&[1, 3]));
    let o = g.attention(q, k, v, b, 1);
    for row in g.value(o).data().chunks(4) {
        for (c, &val) in row.iter().enumerate() {
            assert!((val - c as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_vec(&[1], vec![3.0]).unwrap());
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let again = g.param(&store, a);
    assert_eq!(av, again);
    let sq = g.mul(av, again);
    let zero = g.constant(Tensor::zeros(&[1]));
    // mse(a*a, 0) = a^4, derivative 4a^3 = 108
    let loss = g.mse_loss(sq, zero);
    let grads = g.backward(loss, 1);
    assert!((grads.get(a).unwrap().data()[0] - 108.0).abs() < 1e-9);
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::inference();
    let av = g.param(&store, a);
    let zero = g.constant(Tensor::zeros(&[2]));
    let loss = g.mse_loss(av, zero);
    let grads = g.backward(loss, 1);
    assert!(grads.get(a).is_none());
}

#[test]
fn dropout_identity_without_rng_and_scaled_with_it() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::full(&[1000], 1.0));
    let same = layers::dropout::<f64, ChaCha8Rng>(&mut g, x, 0.1, None);
    assert_eq!(same, x);
    let mut r = rng();
    let d = layers::dropout(&mut g, x, 0.5, Some(&mut r));
    let vals = g.value(d).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = vals.iter().sum::<f64>() / 1000.0;
    assert!((mean - 1.0).abs() < 0.15);
}
