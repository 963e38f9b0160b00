//! End-to-end gradient of the desk-scale network: 32-bit reverse mode
//! against 64-bit central differences of the same weights.

use coral::network::{random_sample, ArchConfig, CoralNet, SampleInput};
use coral::nn::gradcheck::relative_error;
use coral::nn::params::uniform;
use coral::nn::tape::Tape;
use coral::nn::{ParamStore, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const E2E_TOLERANCE: f64 = 1e-3;
pub const E2E_PARAMS: usize = 24;

fn loss_f64(store: &ParamStore<f64>, cfg: &ArchConfig, batch: &[&SampleInput], r: &Tensor4<f64>) -> f64 {
    let net = CoralNet { cfg: cfg.clone(), store: store.clone() };
    let mut tape = Tape::new(&net.store, true);
    let out = net.forward(&mut tape, batch).unwrap();
    tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Returns the worst relative error over the sampled parameters.
pub fn end_to_end_check(arch: ArchConfig, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = CoralNet::<f32>::new(arch.clone(), seed).unwrap();
    let samples: Vec<SampleInput> = (0..3).map(|_| random_sample(&arch, &mut rng)).collect();
    let batch: Vec<&SampleInput> = samples.iter().collect();
    let r64 = uniform::<f64>([3, arch.descriptor_dim, 1, 1], 1.0, &mut rng);

    let mut tape = Tape::new(&net.store, true);
    let out = net.forward(&mut tape, &batch).unwrap();
    let grads = tape.backward(out, r64.cast::<f32>()).unwrap().into_param_grads(&net.store);

    let ids = net.store.trainable_ids();
    let store64 = net.store.cast::<f64>();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..E2E_PARAMS {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..store64.get(id).len());
        let mut s = store64.clone();
        let v0 = s.get(id).data()[k];
        s.get_mut(id).data_mut()[k] = v0 + h;
        let up = loss_f64(&s, &arch, &batch, &r64);
        s.get_mut(id).data_mut()[k] = v0 - h;
        let down = loss_f64(&s, &arch, &batch, &r64);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[id.0].data()[k] as f64;
        let err = relative_error(analytic, numeric, 1e-4);
        worst = worst.max(err);
    }
    (worst, E2E_PARAMS)
}
