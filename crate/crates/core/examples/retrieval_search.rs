//! Exact descriptor search: linear scan and k-d tree agree, and recall is
//! computed with the cross-run protocol.

use coral::retrieval::{evaluate, DescriptorDatabase, DescriptorRecord, KdTree, DEFAULT_RADIUS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn main() -> coral::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 16;
    let places: Vec<Vec<f32>> = (0..50).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut records = Vec::new();
    for run in 0..2u32 {
        for (k, p) in places.iter().enumerate() {
            // second run sees each place through some descriptor noise
            let noisy = p.iter().map(|v| v + run as f32 * rng.random_range(-0.3..0.3)).collect();
            records.push(DescriptorRecord {
                id: run as u64 * 100 + k as u64,
                run,
                x: k as f64 * 70.0,
                y: 0.0,
                desc: unit(noisy),
            });
        }
    }
    let db = DescriptorDatabase::new(records)?;
    let tree = KdTree::build(&db);
    let q = &db.records()[60];
    let lin = db.query(q.id, &q.desc, 3, Some(q.run))?;
    let kd = tree.query(q.id, &q.desc, 3, Some(q.run))?;
    println!("query {} -> {:?} (k-d tree agrees: {})", q.id, lin.ranked, lin == kd);
    println!("{}", evaluate(&db, &[1], DEFAULT_RADIUS)?.summary());
    Ok(())
}
