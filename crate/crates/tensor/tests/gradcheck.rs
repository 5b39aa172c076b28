//! Central finite differences against the reverse sweep for every op.

use ctxdet_tensor::nn::{Conv2d, ConvBlock};
use ctxdet_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduces `out` to a scalar with fixed random weights: L = sum(r * out).
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(g.shape(out), &mut rng);
    let value = g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    g.custom_scalar(&[out], value, vec![r])
}

fn check<F>(x0: Tensor<f64>, store: &ParamStore<f64>, build: F)
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Var,
{
    let loss_at = |x: &Tensor<f64>| {
        let mut g = Graph::new(store, true);
        let xv = g.input(x.clone());
        let out = build(&mut g, xv);
        let l = project(&mut g, out, 99);
        g.value(l).data()[0]
    };
    let mut g = Graph::new(store, true);
    let xv = g.input_tracked(x0.clone());
    let out = build(&mut g, xv);
    let l = project(&mut g, out, 99);
    let grads = g.backward(l);
    let analytic = grads.wrt(xv).expect("input gradient").clone();
    let h = 1e-6;
    for i in (0..x0.numel()).step_by(1 + x0.numel() / 40) {
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        let numeric = (loss_at(&xp) - loss_at(&xm)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
        assert!(err < 1e-5, "index {i}: analytic {a} vs numeric {numeric}");
    }
}

#[test]
fn conv_block_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &mut rng, "b", 2, 3, 3, 2);
    let x = random(&[2, 2, 6, 6], &mut rng);
    check(x, &store, |g, x| block.forward(g, x));
}

#[test]
fn resampling_and_concat_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 2, 1, 1, true);
    let x = random(&[1, 2, 4, 4], &mut rng);
    check(x, &store, |g, x| {
        let up = g.resize_bilinear(x, 8, 8);
        let pooled = g.avg_pool(up, 2);
        let near = g.upsample_nearest2x(pooled);
        let lat = conv.forward(g, x);
        let lat = g.upsample_nearest2x(lat);
        let sum = g.add(near, lat);
        let act = g.silu(sum);
        g.concat_channels(&[act, up])
    });
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &mut rng, "b", 1, 2, 3, 1);
    let head = Conv2d::new(&mut store, &mut rng, "h", 2, 3, 1, 1, true);
    let x = random(&[2, 1, 5, 5], &mut rng);
    let loss = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store, true);
        let xv = g.input(x.clone());
        let y = block.forward(&mut g, xv);
        let y = head.forward(&mut g, y);
        let l = project(&mut g, y, 5);
        (g.value(l).data()[0], g.backward(l))
    };
    let (_, grads) = loss(&store);
    let h = 1e-6;
    for id in store.ids().filter(|&id| store.is_trainable(id)).collect::<Vec<_>>() {
        let analytic = grads.param(id).expect("param gradient").clone();
        for i in 0..analytic.numel() {
            let mut sp = store.clone();
            sp.get_mut(id).data_mut()[i] += h;
            let mut sm = store.clone();
            sm.get_mut(id).data_mut()[i] -= h;
            let numeric = (loss(&sp).0 - loss(&sm).0) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(err < 1e-5, "{}[{i}]: {a} vs {numeric}", store.entry(id).name);
        }
    }
}

#[test]
fn eval_mode_uses_running_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &mut rng, "b", 1, 2, 3, 1);
    let x = random(&[2, 1, 4, 4], &mut rng);
    let mut g = Graph::new(&store, true);
    let xv = g.input(x.clone());
    block.forward(&mut g, xv);
    let updates = g.take_bn_updates();
    assert_eq!(updates.len(), 1);
    drop(g);
    let before = store.get(block.bn.running_mean).clone();
    store.apply_bn_updates(&updates, 1.0);
    assert_ne!(&before, store.get(block.bn.running_mean));
    // with momentum 1 the running stats equal the batch stats, so eval on the
    // same batch reproduces training mode up to the unbiased-variance factor
    let mut g = Graph::new(&store, false);
    let xv = g.input(x);
    let y = block.forward(&mut g, xv);
    assert!(g.value(y).all_finite());
    assert!(g.take_bn_updates().is_empty());
}
