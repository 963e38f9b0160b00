//! Criterion 2: reverse-mode gradients against central differences.

use std::sync::Arc;

use coral::network::ArchConfig;
use coral::nn::params::uniform;
use coral::nn::{grad_check, GatherEntry, GatherPlan, GradCheckConfig, ParamId, ParamStore, Tape, Tensor4, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{end_to_end_check, E2E_PARAMS, E2E_TOLERANCE};
use crate::Outcome;

pub const OP_TOLERANCE: f64 = 1e-4;

type Build<'a> = Box<dyn Fn(&mut Tape<f64>, Var) -> Var + 'a>;

enum Wrt {
    Input,
    Param(ParamId),
}

/// Worst relative error of d/d(wrt) sum(r * build(x)).
fn check(x: &Tensor4<f64>, store: &ParamStore<f64>, wrt: Wrt, build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tape = Tape::new(store, true);
    let xv = tape.input(x.clone());
    let y = build(&mut tape, xv);
    let r = uniform::<f64>(tape.value(y).dims(), 1.0, &mut rng);
    let g = tape.backward(y, r.clone()).unwrap();
    let objective = |s: &ParamStore<f64>, x: Tensor4<f64>| {
        let mut tape = Tape::new(s, true);
        let xv = tape.input(x);
        let y = build(&mut tape, xv);
        tape.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let cfg = GradCheckConfig { tolerance: OP_TOLERANCE, ..GradCheckConfig::default() };
    let rep = match wrt {
        Wrt::Input => {
            let analytic = g.input(xv).cloned().unwrap_or_else(|| Tensor4::zeros(x.dims()));
            grad_check(|v| objective(store, Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()), x.data(), analytic.data(), None, cfg)
        }
        Wrt::Param(id) => {
            let analytic = g.param(id).cloned().unwrap_or_else(|| Tensor4::zeros(store.get(id).dims()));
            let dims = store.get(id).dims();
            grad_check(
                |v| {
                    let mut s = store.clone();
                    *s.get_mut(id) = Tensor4::from_vec(dims, v.to_vec()).unwrap();
                    objective(&s, x.clone())
                },
                store.get(id).data(),
                analytic.data(),
                None,
                cfg,
            )
        }
    };
    rep.max_rel_error
}

fn random_plan(rng: &mut ChaCha8Rng, batch: usize, h: usize, w: usize) -> GatherPlan {
    let per_sample = (0..batch)
        .map(|_| {
            (0..20)
                .map(|cell| {
                    let (u, v) = (rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64));
                    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                    let (du, dv) = (u - x0 as f64, v - y0 as f64);
                    GatherEntry {
                        cell,
                        src: [y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1],
                        weights: [(1.0 - du) * (1.0 - dv), du * (1.0 - dv), (1.0 - du) * dv, du * dv],
                    }
                })
                .collect()
        })
        .collect();
    GatherPlan { src_h: h, src_w: w, out_h: 5, out_w: 5, per_sample }
}

/// Returns (op, worst relative error) for every differentiable op.
fn per_op() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let cw = store.add("cw", uniform([4, 3, 3, 3], 1.0, &mut rng), true);
    let cb = store.add("cb", uniform([1, 4, 1, 1], 1.0, &mut rng), true);
    let gamma = store.add("gamma", uniform([1, 3, 1, 1], 1.0, &mut rng), true);
    let beta = store.add("beta", uniform([1, 3, 1, 1], 1.0, &mut rng), true);
    let rm = store.add("rm", Tensor4::zeros([1, 3, 1, 1]), false);
    let rv = store.add("rv", Tensor4::filled([1, 3, 1, 1], 1.0), false);
    let lw = store.add("lw", uniform([5, 3 * 6 * 6, 1, 1], 1.0, &mut rng), true);
    let lb = store.add("lb", uniform([1, 5, 1, 1], 1.0, &mut rng), true);
    let centers = store.add("centers", uniform([4, 3, 1, 1], 1.0, &mut rng), true);
    let plan = Arc::new(random_plan(&mut rng, 2, 6, 6));
    let x = uniform::<f64>([2, 3, 6, 6], 1.0, &mut rng);

    let cases: Vec<(&'static str, Wrt, Build)> = vec![
        ("conv input", Wrt::Input, Box::new(|t, v| t.conv2d(v, cw, Some(cb), 2, 1).unwrap())),
        ("conv weight", Wrt::Param(cw), Box::new(|t, v| t.conv2d(v, cw, Some(cb), 1, 1).unwrap())),
        ("conv bias", Wrt::Param(cb), Box::new(|t, v| t.conv2d(v, cw, Some(cb), 1, 0).unwrap())),
        ("batch_norm input", Wrt::Input, Box::new(|t, v| t.batch_norm(v, gamma, beta, rm, rv).unwrap())),
        ("batch_norm gamma", Wrt::Param(gamma), Box::new(|t, v| t.batch_norm(v, gamma, beta, rm, rv).unwrap())),
        ("batch_norm beta", Wrt::Param(beta), Box::new(|t, v| t.batch_norm(v, gamma, beta, rm, rv).unwrap())),
        ("relu", Wrt::Input, Box::new(|t, v| t.relu(v))),
        ("max_pool", Wrt::Input, Box::new(|t, v| t.max_pool(v, 3, 2, 1).unwrap())),
        ("avg_pool", Wrt::Input, Box::new(|t, v| t.avg_pool(v, 2, 2).unwrap())),
        ("resize_nearest", Wrt::Input, Box::new(|t, v| t.resize_nearest(v, 12, 9).unwrap())),
        ("add", Wrt::Input, Box::new(|t, v| {
            let r = t.relu(v);
            t.add(v, r).unwrap()
        })),
        ("concat", Wrt::Input, Box::new(|t, v| {
            let r = t.relu(v);
            t.concat(v, r).unwrap()
        })),
        ("flatten+linear input", Wrt::Input, Box::new(|t, v| {
            let f = t.flatten(v);
            t.linear(f, lw, Some(lb)).unwrap()
        })),
        ("linear weight", Wrt::Param(lw), Box::new(|t, v| {
            let f = t.flatten(v);
            t.linear(f, lw, Some(lb)).unwrap()
        })),
        ("softmax", Wrt::Input, Box::new(|t, v| t.softmax_channels(v))),
        ("l2_normalize", Wrt::Input, Box::new(|t, v| t.l2_normalize(v, 12, 1e-12).unwrap())),
        ("vlad features", Wrt::Input, Box::new(|t, v| {
            let logits = t.conv2d(v, cw, Some(cb), 1, 1).unwrap();
            let a = t.softmax_channels(logits);
            t.vlad(v, a, centers).unwrap()
        })),
        ("vlad centers", Wrt::Param(centers), Box::new(|t, v| {
            let logits = t.conv2d(v, cw, Some(cb), 1, 1).unwrap();
            let a = t.softmax_channels(logits);
            t.vlad(v, a, centers).unwrap()
        })),
        ("gather", Wrt::Input, Box::new(move |t, v| t.gather(v, plan.clone()).unwrap())),
    ];
    cases.into_iter().map(|(name, wrt, build)| (name, check(&x, &store, wrt, &build))).collect()
}

pub fn run() -> Outcome {
    let ops = per_op();
    let (worst_name, worst) = ops.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let (e2e, n) = end_to_end_check(ArchConfig::desk(), 11);
    let failing: Vec<&str> = ops.iter().filter(|o| o.1 > OP_TOLERANCE).map(|o| o.0).collect();
    Outcome {
        pass: failing.is_empty() && e2e <= E2E_TOLERANCE && n >= 20 && E2E_PARAMS >= 20,
        detail: format!(
            "{} ops at f64, worst {worst:.1e} ({worst_name}, tol {OP_TOLERANCE:.0e}){}; end-to-end f32 worst {e2e:.1e} over {n} params (tol {E2E_TOLERANCE:.0e})",
            ops.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    }
}
