//! Reverse-mode differentiation on a tiny conv -> batch norm -> relu ->
//! pool graph, checked against central differences.

use coral::nn::params::kaiming;
use coral::nn::tape::Tape;
use coral::nn::{grad_check, GradCheckConfig, ParamStore, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(store: &ParamStore<f64>, x: &Tensor4<f64>, r: &Tensor4<f64>) -> coral::Result<(f64, Vec<f64>)> {
    let w = store.id("w").unwrap();
    let (g, b) = (store.id("bn.gamma").unwrap(), store.id("bn.beta").unwrap());
    let (m, v) = (store.id("bn.running_mean").unwrap(), store.id("bn.running_var").unwrap());
    let mut tape = Tape::new(store, true);
    let xi = tape.input(x.clone());
    let c = tape.conv2d(xi, w, None, 1, 1)?;
    let n = tape.batch_norm(c, g, b, m, v)?;
    let a = tape.relu(n);
    let p = tape.avg_pool(a, 2, 2)?;
    let out = tape.value(p);
    let value: f64 = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    let grads = tape.backward(p, r.clone())?;
    Ok((value, grads.param(w).unwrap().data().to_vec()))
}

fn main() -> coral::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    store.add("w", kaiming([4, 2, 3, 3], &mut rng), true);
    store.add("bn.gamma", Tensor4::filled([1, 4, 1, 1], 1.0), true);
    store.add("bn.beta", Tensor4::zeros([1, 4, 1, 1]), true);
    store.add("bn.running_mean", Tensor4::zeros([1, 4, 1, 1]), false);
    store.add("bn.running_var", Tensor4::filled([1, 4, 1, 1], 1.0), false);
    let x = kaiming::<f64>([3, 2, 6, 6], &mut rng);
    let r = kaiming::<f64>([3, 4, 3, 3], &mut rng);

    let (_, analytic) = loss(&store, &x, &r)?;
    let w0 = store.get(store.id("w").unwrap()).data().to_vec();
    let report = grad_check(
        |w| {
            let mut s = store.clone();
            let id = s.id("w").unwrap();
            s.get_mut(id).data_mut().copy_from_slice(w);
            loss(&s, &x, &r).unwrap().0
        },
        &w0,
        &analytic,
        None,
        GradCheckConfig::default(),
    );
    println!("checked {} weights, max relative error {:.2e}, passed: {}", report.checked, report.max_rel_error, report.passed());
    Ok(())
}
