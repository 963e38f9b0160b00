//! Criterion 1: library kernels against direct loop implementations.

use coral::elevation::{fuse, ElevationCell, ElevationMap, ElevationMeasurement, VAR_FLOOR};
use coral::geometry::{CameraModel, Frame, GridSpec, Point3, Pose};
use coral::network::{ArchConfig, CoralNet, Modality};
use coral::nn::ops::{self, Conv2dGeom};
use coral::nn::params::uniform;
use coral::nn::{Tape, Tensor4};
use coral::projection::{build_projection_table, gather_bev_features};
use coral::retrieval::{DescriptorDatabase, DescriptorRecord, KdTree};
use coral::synth::camera_extrinsic;
use coral::training::{lazy_quadruplet_loss, LossParams};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

pub const TOL: f64 = 1e-9;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scalar Bayes update written in gain form, with the same gate, strike
/// counter and variance floor.
fn bayes_oracle(seq: &[(f64, f64)], gate: f64, limit: u8) -> (f64, f64) {
    let mut state: Option<(f64, f64)> = None;
    let mut strikes = 0u8;
    for &(z, r) in seq {
        let r = r.max(VAR_FLOOR);
        state = Some(match state {
            None => (z, r),
            Some((m, p)) => {
                let s = p + r;
                if (z - m).abs() <= gate * s.sqrt() {
                    strikes = 0;
                    let k = p / s;
                    (m + k * (z - m), ((1.0 - k) * p).max(VAR_FLOOR))
                } else {
                    strikes += 1;
                    if strikes >= limit {
                        strikes = 0;
                        (z, r)
                    } else {
                        (m, p)
                    }
                }
            }
        });
    }
    state.unwrap()
}

fn elevation(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let seq: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let z = if rng.random_bool(0.03) { rng.random_range(2.0..5.0) } else { rng.random_range(-0.3..0.3) };
                (z, rng.random_range(1e-4..0.05))
            })
            .collect();
        let mut cell = ElevationCell::INVALID;
        for &(z, r) in &seq {
            let m = ElevationMeasurement {
                e_p: z,
                var_p: r,
                source_cell: (0, 0),
                ray_origin: Point3::origin(),
                point: Point3::origin(),
            };
            cell = fuse(cell, &m, 3.0, 3);
        }
        let (e, v) = bayes_oracle(&seq, 3.0, 3);
        worst = worst.max((cell.e_g - e).abs()).max((cell.var_g - v).abs());
    }
    worst
}

fn conv_loops(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, ic, h, wd] = x.dims();
    let [oc, _, kh, kw] = w.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Vec::with_capacity(n * oc * oh * ow);
    for bi in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for c in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                    s += w.at(o, c, ky, kx) * x.at(bi, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    y.push(s);
                }
            }
        }
    }
    y
}

fn pool_loops(x: &Tensor4<f64>, k: usize, stride: usize, pad: usize, max: bool) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut y = Vec::new();
    for bi in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals = Vec::new();
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                                vals.push(x.at(bi, ci, iy as usize, ix as usize));
                            }
                        }
                    }
                    y.push(if max {
                        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / (k * k) as f64
                    });
                }
            }
        }
    }
    y
}

fn dense_layers(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let (ic, oc) = (rng.random_range(1..5), rng.random_range(1..6));
        let k = rng.random_range(1..4);
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let x = uniform::<f64>([2, ic, rng.random_range(3..12), rng.random_range(3..12)], 1.0, rng);
        let w = uniform::<f64>([oc, ic, k, k], 1.0, rng);
        let b: Vec<f64> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = ops::conv2d_forward(&x, &w, Some(&b), Conv2dGeom { stride, pad }).unwrap();
        worst = worst.max(max_diff(y.data(), &conv_loops(&x, &w, &b, stride, pad)));

        let (y, _) = ops::max_pool_forward(&x, 3, Conv2dGeom { stride: 2, pad: 1 }).unwrap();
        worst = worst.max(max_diff(y.data(), &pool_loops(&x, 3, 2, 1, true)));
        let y = ops::avg_pool_forward(&x, 2, 2).unwrap();
        worst = worst.max(max_diff(y.data(), &pool_loops(&x, 2, 2, 0, false)));

        let n = x.sample_len();
        let m = rng.random_range(1..8);
        let lw = uniform::<f64>([m, n, 1, 1], 1.0, rng);
        let lb: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = ops::linear_forward(&x, &lw, Some(&lb)).unwrap();
        let mut expect = Vec::new();
        for bi in 0..2 {
            for o in 0..m {
                expect.push(lb[o] + (0..n).map(|i| lw.data()[o * n + i] * x.sample(bi)[i]).sum::<f64>());
            }
        }
        worst = worst.max(max_diff(y.data(), &expect));
    }
    worst
}

/// Soft assignment, residual sums, intra then global normalization, one
/// site and one cluster at a time.
fn vlad_loops(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], c: &Tensor4<f64>) -> Vec<f64> {
    let (d, k) = (x.channels(), w.batch());
    let mut v = vec![0.0; k * d];
    for yy in 0..x.height() {
        for xx in 0..x.width() {
            let logits: Vec<f64> = (0..k)
                .map(|kk| b[kk] + (0..d).map(|dd| w.at(kk, dd, 0, 0) * x.at(0, dd, yy, xx)).sum::<f64>())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for kk in 0..k {
                let a = (logits[kk] - top).exp() / z;
                for dd in 0..d {
                    v[kk * d + dd] += a * (x.at(0, dd, yy, xx) - c.at(kk, dd, 0, 0));
                }
            }
        }
    }
    for kk in 0..k {
        let n = v[kk * d..(kk + 1) * d].iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v[kk * d..(kk + 1) * d].iter_mut().for_each(|a| *a /= n);
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|a| a / n).collect()
}

fn netvlad(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let cfg = ArchConfig { modality: Modality::StructureOnly, ..ArchConfig::desk() };
    let net = CoralNet::<f64>::new(cfg.clone(), 5).unwrap();
    let get = |n: &str| net.store.get(net.store.id(n).unwrap()).clone();
    let run = |x: Tensor4<f64>| {
        let mut tape = Tape::new(&net.store, false);
        let xv = tape.input(x);
        let v = net.netvlad(&mut tape, xv).unwrap();
        tape.value(v).data().to_vec()
    };
    let (mut oracle, mut perm): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let (h, w) = (rng.random_range(2..8), rng.random_range(2..8));
        let d = cfg.fpn_width();
        let x = uniform::<f64>([1, d, h, w], 1.0, rng);
        let got = run(x.clone());
        let expect = vlad_loops(&x, &get("vlad.assign.weight"), get("vlad.assign.bias").data(), &get("vlad.centers"));
        oracle = oracle.max(max_diff(&got, &expect));

        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(rng);
        let mut shuffled = Tensor4::zeros(x.dims());
        for c in 0..d {
            for (to, &from) in order.iter().enumerate() {
                shuffled.set(0, c, to / w, to % w, x.at(0, c, from / w, from % w));
            }
        }
        perm = perm.max(max_diff(&run(shuffled), &got));
    }
    (oracle, perm)
}

fn bilinear_at(f: &Tensor4<f64>, c: usize, u: f64, v: f64) -> f64 {
    let (w, h) = (f.width(), f.height());
    let x0 = (u.floor() as usize).min(w - 2);
    let y0 = (v.floor() as usize).min(h - 2);
    let mut s = 0.0;
    for (yy, xx) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)] {
        let wx = 1.0 - (u - xx as f64).abs();
        let wy = 1.0 - (v - yy as f64).abs();
        s += wx.max(0.0) * wy.max(0.0) * f.at(0, c, yy, xx);
    }
    s
}

/// Returns the worst value difference and whether the set of covered cells
/// matched the direct projection.
fn gather(rng: &mut ChaCha8Rng) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut same_cells = true;
    for _ in 0..10 {
        let yaw = rng.random_range(-3.0..3.0);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.8);
        let sensor = Pose::from_euler(t, 0.0, 0.0, yaw, Frame::Lidar, Frame::World);
        let spec = GridSpec::centered(32, 32, 0.5, t.x, t.y).unwrap();
        let mut map = ElevationMap::new(spec);
        for j in 0..32 {
            for i in 0..32 {
                if rng.random_bool(0.8) {
                    *map.cell_mut(i, j) = ElevationCell { e_g: rng.random_range(-0.5..1.0), var_g: 0.01, valid: true, outlier_count: 0 };
                }
            }
        }
        let cam = CameraModel::with_fov(64, 48, 90.0, camera_extrinsic(&Vector3::new(0.2, 0.0, 0.1), 25.0).unwrap()).unwrap();
        let table = build_projection_table(&map, &sensor, &cam).unwrap();
        let fv = uniform::<f64>([1, 3, 48, 64], 1.0, rng);
        let bev = gather_bev_features(&table, &fv).unwrap();

        // camera <- world, spelled out with matrices
        let (rs, ts) = (sensor.rotation(), sensor.translation());
        let (re, te) = (cam.extrinsic.rotation(), cam.extrinsic.translation());
        for j in 0..32 {
            for i in 0..32 {
                let cell = map.cell(i, j);
                let (x, y) = spec.cell_center(i, j);
                let p = re * (rs.transpose() * (Vector3::new(x, y, cell.e_g) - ts)) + te;
                let visible = cell.valid && p.z > 1e-6 && {
                    let (u, v) = (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
                    (0.0..=63.0).contains(&u) && (0.0..=47.0).contains(&v)
                };
                let listed = table.entries.iter().any(|e| e.cell == (i, j));
                same_cells &= listed == visible;
                for c in 0..3 {
                    let expect = if visible {
                        bilinear_at(&fv, c, cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy)
                    } else {
                        0.0
                    };
                    worst = worst.max((bev.at(0, c, j, i) - expect).abs());
                }
            }
        }
    }
    (worst, same_cells)
}

/// Every (positive, negative) pair is scored; the loss terms are the
/// largest hinges and the chosen indices must attain them.
fn loss(rng: &mut ChaCha8Rng) -> bool {
    let p = LossParams::default();
    for _ in 0..2000 {
        let d_ap: Vec<f64> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0.0..2.0)).collect();
        let n = rng.random_range(1..20);
        let d_an: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let d_s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let v = lazy_quadruplet_loss(&d_ap, &d_an, &d_s, &p);
        let mut best1 = (f64::NEG_INFINITY, 0, 0);
        let mut best2 = (f64::NEG_INFINITY, 0, 0);
        for (i, &a) in d_ap.iter().enumerate() {
            for (j, &b) in d_an.iter().enumerate() {
                if p.alpha + a - b > best1.0 {
                    best1 = (p.alpha + a - b, i, j);
                }
            }
            for (j, &b) in d_s.iter().enumerate() {
                if p.beta + a - b > best2.0 {
                    best2 = (p.beta + a - b, i, j);
                }
            }
        }
        let ok = v.term1 == best1.0.max(0.0)
            && v.term2 == best2.0.max(0.0)
            && (v.pos, v.neg1) == (best1.1, best1.2)
            && v.neg2 == best2.2;
        if !ok {
            return false;
        }
    }
    true
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| (a / n) as f32).collect()
}

fn retrieval(rng: &mut ChaCha8Rng) -> bool {
    for _ in 0..20 {
        let mut recs: Vec<DescriptorRecord> = (0..300u64)
            .map(|id| DescriptorRecord { id, run: (id % 3) as u32, x: 0.0, y: 0.0, desc: unit(rng, 8) })
            .collect();
        // exact ties
        for k in 0..20 {
            recs[k * 7 + 1].desc = recs[k * 7].desc.clone();
        }
        let db = DescriptorDatabase::new(recs.clone()).unwrap();
        let tree = KdTree::build(&db);
        for _ in 0..30 {
            let q = if rng.random_bool(0.3) { recs[rng.random_range(0..300)].desc.clone() } else { unit(rng, 8) };
            let k = rng.random_range(1..40);
            let excl = if rng.random_bool(0.5) { Some(rng.random_range(0..3)) } else { None };
            let mut all: Vec<(f64, u64)> = recs
                .iter()
                .filter(|r| Some(r.run) != excl)
                .map(|r| (r.desc.iter().zip(&q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum(), r.id))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<u64> = all.iter().take(k).map(|c| c.1).collect();
            let ids = |r: Vec<(u64, f64)>| r.into_iter().map(|c| c.0).collect::<Vec<_>>();
            if ids(db.query(0, &q, k, excl).unwrap().ranked) != expect || ids(tree.query(0, &q, k, excl).unwrap().ranked) != expect {
                return false;
            }
        }
    }
    true
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let e = elevation(&mut rng);
    let d = dense_layers(&mut rng);
    let (v, perm) = netvlad(&mut rng);
    let (g, cells) = gather(&mut rng);
    let l = loss(&mut rng);
    let r = retrieval(&mut rng);
    let pass = e <= TOL && d <= TOL && v <= TOL && perm <= TOL && g <= TOL && cells && l && r;
    Outcome {
        pass,
        detail: format!(
            "fusion {e:.1e}, conv/linear/pool {d:.1e}, netvlad {v:.1e} (perm {perm:.1e}), gather {g:.1e} cells {}, loss indices {}, ranking {} (tol {TOL:.0e})",
            yes(cells),
            yes(l),
            yes(r)
        ),
    }
}

fn yes(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISMATCH"
    }
}
