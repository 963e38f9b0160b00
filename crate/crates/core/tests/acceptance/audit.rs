//! Criterion 7: paper preset layer structure.

use coral::network::{random_sample, ArchConfig, CoralNet};
use coral::nn::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

pub const CONVS: [usize; 5] = [2, 4, 4, 6, 6];
pub const CHANNELS: [usize; 5] = [64, 64, 128, 192, 256];
pub const STRIDES: [usize; 5] = [1, 2, 2, 2, 2];

pub fn run() -> Outcome {
    let cfg = ArchConfig::paper();
    let net = CoralNet::<f32>::new(cfg.clone(), 0).unwrap();
    let groups = net.audit();
    let convs: Vec<usize> = groups.iter().map(|g| g.convs).collect();
    let channels: Vec<usize> = groups.iter().map(|g| g.channels).collect();
    let strides: Vec<usize> = groups.iter().map(|g| g.stride).collect();
    let kernels_ok = groups.iter().all(|g| g.kernel == 3);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sample = random_sample(&cfg, &mut rng);
    let image_dims = sample.image.dims();
    let mut tape = Tape::new(&net.store, false);
    let out = net.forward(&mut tape, &[&sample]).unwrap();
    let desc_dims = tape.value(out).dims();

    let pass = convs == CONVS
        && channels == CHANNELS
        && strides == STRIDES
        && kernels_ok
        && image_dims == [1, 3, 112, 112]
        && desc_dims == [1, 256, 1, 1];
    Outcome {
        pass,
        detail: format!(
            "convs {convs:?}, channels {channels:?}, strides {strides:?}, 3x3 kernels {kernels_ok}, image {}x{}, descriptor {}",
            image_dims[2], image_dims[3], desc_dims[1]
        ),
    }
}
