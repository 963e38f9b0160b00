//! Builds the two-stream network, prints the structural-stream audit and
//! computes descriptors for random inputs.
//!
//! cargo run --release -p coral --example descriptor_network [desk|paper]

use coral::config::{Preset, RunConfig};
use coral::network::{random_sample, CoralNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coral::Result<()> {
    let preset: Preset = std::env::args().nth(1).as_deref().unwrap_or("desk").parse()?;
    let arch = RunConfig::preset(preset).arch;
    let net = CoralNet::<f32>::new(arch.clone(), 0)?;
    println!("{} parameters tensors, {} trainable values", net.store.len(), net.store.num_trainable_values());
    for g in net.audit() {
        println!(
            "group {}: {} convs {}x{}, {} channels, stride {}, {}x{}",
            g.group, g.convs, g.kernel, g.kernel, g.channels, g.stride, g.size.0, g.size.1
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<_> = (0..2).map(|_| random_sample(&arch, &mut rng)).collect();
    let refs: Vec<_> = samples.iter().collect();
    let d = net.describe(&refs)?;
    let norm: f32 = d[0].iter().map(|v| v * v).sum::<f32>().sqrt();
    let dist: f32 = d[0].iter().zip(&d[1]).map(|(a, b)| (a - b).powi(2)).sum();
    println!("descriptor dim {}, norm {norm:.6}, squared distance between samples {dist:.4}", d[0].len());
    Ok(())
}
