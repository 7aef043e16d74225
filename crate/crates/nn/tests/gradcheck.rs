//! Central finite differences against the tape's analytic gradients.

use lesionforge_nn::{he_uniform, ConvGeom, Graph, NnError, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares every parameter coordinate of `store` against finite differences.
fn check<F>(store: &mut ParamStore<f64>, f: F)
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, NnError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g).unwrap();
        let grads = g.backward(loss).unwrap();
        store.ids().map(|id| grads.param(id).cloned()).collect::<Vec<_>>()
    };
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let loss = f(&mut g).unwrap();
        g.value(loss).item()
    };
    let eps = 1e-6;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            assert!(
                rel_err(a, numeric) < 1e-5 || (a - numeric).abs() < 1e-9,
                "{}[{}]: analytic {} numeric {}",
                store.name(id),
                i,
                a,
                numeric
            );
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn conv_stack_with_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", he_uniform(&mut rng, &[3, 1, 3, 3], 9));
    let b1 = store.add("b1", random_tensor(&mut rng, &[3]));
    let w2 = store.add("w2", he_uniform(&mut rng, &[2, 3, 4, 4], 48));
    let b2 = store.add("b2", random_tensor(&mut rng, &[2]));
    let w3 = store.add("w3", he_uniform(&mut rng, &[2, 1, 3, 3], 18));
    let x = random_tensor(&mut rng, &[2, 1, 6, 6]);
    let target = random_tensor(&mut rng, &[2, 1, 6, 6]).map(|v| v.abs());
    check(&mut store, |g| {
        let xi = g.input(x.clone());
        let h = g.conv2d(xi, w1, Some(b1), ConvGeom::new(3, 1, 2, 2))?;
        let h = g.leaky_relu(h, 0.2);
        let h = g.conv2d(h, w2, Some(b2), ConvGeom::new(4, 2, 1, 1))?;
        let h = g.tanh(h);
        let h = g.conv_transpose2d(h, w3, None, ConvGeom::new(3, 2, 1, 1))?;
        let h = g.sigmoid(h);
        let t = g.input(target.clone());
        let tcrop = {
            let tv = g.value(t).clone();
            let mut data = Vec::new();
            for s in 0..2 {
                for y in 0..5 {
                    for xx in 0..5 {
                        data.push(tv.data()[s * 36 + y * 6 + xx]);
                    }
                }
            }
            g.input(Tensor::from_vec(&[2, 1, 5, 5], data)?)
        };
        // mean of squared difference exercised through sub + mean_square
        let d = g.sub(h, tcrop)?;
        let sq = g.mean_square(d);
        let l1 = g.mean_abs_diff(h, tcrop)?;
        Ok(g.sum_scalars(&[sq, l1]))
    });
}

#[test]
fn linear_head_with_weighted_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let w = store.add("conv", he_uniform(&mut rng, &[4, 1, 3, 3], 9));
    let lw = store.add("lin.w", random_tensor(&mut rng, &[1, 4]));
    let lb = store.add("lin.b", random_tensor(&mut rng, &[1]));
    let x = random_tensor(&mut rng, &[3, 1, 5, 5]);
    check(&mut store, |g| {
        let xi = g.input(x.clone());
        let h = g.conv2d(xi, w, None, ConvGeom::new(3, 1, 1, 1))?;
        let h = g.relu(h);
        let p = g.global_avg_pool(h)?;
        let logit = g.linear(p, lw, lb)?;
        let bce = g.bce_with_logits(logit, vec![1.0, 0.0, 1.0], vec![2.0, 0.5, 2.0])?;
        let scaled = g.scale(bce, 3.0);
        let m = g.mean(logit);
        Ok(g.sum_scalars(&[scaled, m]))
    });
}

#[test]
fn global_max_pool_routes_to_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.add("conv", he_uniform(&mut rng, &[3, 1, 3, 3], 9));
    let lw = store.add("lin.w", random_tensor(&mut rng, &[1, 3]));
    let lb = store.add("lin.b", random_tensor(&mut rng, &[1]));
    let x = random_tensor(&mut rng, &[2, 1, 6, 5]);
    check(&mut store, |g| {
        let xi = g.input(x.clone());
        let h = g.conv2d(xi, w, None, ConvGeom::new(3, 1, 1, 1))?;
        let p = g.global_max_pool(h)?;
        let logit = g.linear(p, lw, lb)?;
        g.bce_with_logits(logit, vec![1.0, 0.0], vec![1.0, 1.0])
    });
}

#[test]
fn shared_parameter_accumulates_from_every_use() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("shared", he_uniform(&mut rng, &[2, 2, 3, 3], 18));
    let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
    check(&mut store, |g| {
        let xi = g.input(x.clone());
        let a = g.conv2d(xi, w, None, ConvGeom::new(3, 1, 1, 1))?;
        let a = g.tanh(a);
        let b = g.conv2d(a, w, None, ConvGeom::new(3, 1, 1, 1))?;
        let r = g.add(a, b)?;
        Ok(g.mean_square(r))
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let w = store.add("w", he_uniform::<f64, _>(&mut rng, &[1, 1, 3, 3], 9));
    let x = random_tensor(&mut rng, &[1, 1, 4, 4]);
    let g0 = {
        let mut g = Graph::new(&store);
        let xi = g.input(x.clone());
        let h = g.conv2d(xi, w, None, ConvGeom::new(3, 1, 1, 1)).unwrap();
        let d = g.detach(h);
        let loss = g.mean_square(d);
        g.backward(loss).unwrap().param(w).cloned()
    };
    assert!(g0.is_none());
}
