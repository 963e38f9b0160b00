//! Tuple mining, the lazy quadruplet loss, negative sampling and the
//! optimisation loop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoralError, Result};
use crate::geometry::wrap_degrees;
use crate::network::{CoralNet, SampleInput};
use crate::nn::{apply_bn_updates, Adam, BnUpdate, Real, Tape, Tensor4};
use crate::synth::SampleMeta;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningRules {
    pub positive_radius: f64,
    pub positive_heading_deg: f64,
    pub negative_radius: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl Default for MiningRules {
    fn default() -> Self {
        MiningRules {
            positive_radius: 10.0,
            positive_heading_deg: 30.0,
            negative_radius: 50.0,
            positives: 2,
            negatives: 18,
        }
    }
}

fn dist(a: &SampleMeta, b: &SampleMeta) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

impl MiningRules {
    pub fn is_positive(&self, a: &SampleMeta, b: &SampleMeta) -> bool {
        a.id != b.id
            && dist(a, b) < self.positive_radius
            && wrap_degrees(a.heading - b.heading).abs() < self.positive_heading_deg
    }

    pub fn is_negative(&self, a: &SampleMeta, b: &SampleMeta) -> bool {
        dist(a, b) >= self.negative_radius
    }
}

/// Indices into the sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTuple {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub extra_negative: usize,
}

impl TrainingTuple {
    /// Batch order used by the training step.
    pub fn members(&self) -> Vec<usize> {
        let mut m = Vec::with_capacity(2 + self.positives.len() + self.negatives.len());
        m.push(self.anchor);
        m.extend(&self.positives);
        m.extend(&self.negatives);
        m.push(self.extra_negative);
        m
    }
}

/// An anchor with its positives and the pool its negatives are drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negative_pool: Vec<usize>,
}

/// Finds every anchor with enough positives. The closest positives are kept.
pub fn mine_anchors(metas: &[SampleMeta], rules: &MiningRules) -> Result<Vec<MinedAnchor>> {
    let mut out = Vec::new();
    let mut short_pos = 0;
    let mut short_neg = 0;
    for (a, ma) in metas.iter().enumerate() {
        let mut pos: Vec<usize> = (0..metas.len()).filter(|&b| rules.is_positive(ma, &metas[b])).collect();
        let pool: Vec<usize> = (0..metas.len()).filter(|&b| rules.is_negative(ma, &metas[b])).collect();
        if pos.len() < rules.positives {
            short_pos += 1;
            continue;
        }
        // one slot is reserved for the extra negative
        if pool.len() < rules.negatives + 1 {
            short_neg += 1;
            continue;
        }
        pos.sort_by(|&x, &y| dist(ma, &metas[x]).total_cmp(&dist(ma, &metas[y])).then(x.cmp(&y)));
        pos.truncate(rules.positives);
        out.push(MinedAnchor {
            anchor: a,
            positives: pos,
            negative_pool: pool,
        });
    }
    if out.is_empty() {
        return Err(CoralError::Mining(format!(
            "no usable anchor among {} samples: {short_pos} lack {} positives (<{} m, <{} deg), \
             {short_neg} lack {} negatives (>= {} m)",
            metas.len(),
            rules.positives,
            rules.positive_radius,
            rules.positive_heading_deg,
            rules.negatives + 1,
            rules.negative_radius
        )));
    }
    Ok(out)
}

/// Draws an extra negative that is far from the anchor and the positives,
/// and returns it with the part of the pool that is also far from it.
pub fn pick_extra_negative(
    metas: &[SampleMeta],
    mined: &MinedAnchor,
    rules: &MiningRules,
    rng: &mut impl Rng,
) -> Result<(usize, Vec<usize>)> {
    let far_from_pos = |c: usize| mined.positives.iter().all(|&p| rules.is_negative(&metas[p], &metas[c]));
    let cands: Vec<usize> = mined.negative_pool.iter().copied().filter(|&c| far_from_pos(c)).collect();
    let mut order = cands.clone();
    // try candidates in random order until one leaves enough negatives
    for k in (1..order.len()).rev() {
        order.swap(k, rng.random_range(0..=k));
    }
    for &e in &order {
        let rest: Vec<usize> = mined
            .negative_pool
            .iter()
            .copied()
            .filter(|&n| rules.is_negative(&metas[e], &metas[n]))
            .collect();
        if rest.len() >= rules.negatives {
            return Ok((e, rest));
        }
    }
    Err(CoralError::Mining(format!(
        "anchor {}: no extra negative leaves {} negatives ({} candidates)",
        metas[mined.anchor].id,
        rules.negatives,
        cands.len()
    )))
}

/// Tuples with random negatives.
pub fn mine_tuples(metas: &[SampleMeta], rules: &MiningRules, rng: &mut impl Rng) -> Result<Vec<TrainingTuple>> {
    mine_anchors(metas, rules)?
        .iter()
        .map(|m| {
            let (extra, pool) = pick_extra_negative(metas, m, rules, rng)?;
            let negatives = sample_negatives(NegativeStage::Random, rules.negatives, &pool, None, rng)?;
            Ok(TrainingTuple {
                anchor: m.anchor,
                positives: m.positives.clone(),
                negatives,
                extra_negative: extra,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStage {
    Random,
    Hard,
}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

/// Picks `n` negatives from `pool`. The hard stage needs descriptors for the
/// anchor and every sample (`descs[sample]`) and returns the `n` closest to
/// the anchor, ties by sample index.
pub fn sample_negatives(
    stage: NegativeStage,
    n: usize,
    pool: &[usize],
    hard: Option<(&[f32], &[Vec<f32>])>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if pool.len() < n {
        return Err(CoralError::Mining(format!("negative pool has {} samples, need {n}", pool.len())));
    }
    match stage {
        NegativeStage::Random => Ok(sample_indices(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect()),
        NegativeStage::Hard => {
            let (anchor, descs) = hard.ok_or_else(|| CoralError::InvalidArgument("hard stage needs descriptors".into()))?;
            let mut scored: Vec<(f64, usize)> = pool.iter().map(|&s| (sq_dist(anchor, &descs[s]), s)).collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(scored.into_iter().take(n).map(|(_, s)| s).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondTerm {
    /// `[beta + d(a,pos) - d(neg*, neg)]`, minimised over negatives.
    NegstarNegatives,
    /// `[beta + d(a,pos) - d(a, neg*)]`.
    AnchorNegstar,
}

impl FromStr for SecondTerm {
    type Err = CoralError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negstar_negatives" => Ok(SecondTerm::NegstarNegatives),
            "anchor_negstar" => Ok(SecondTerm::AnchorNegstar),
            other => Err(CoralError::Config(format!(
                "unknown second_term {other:?} (expected negstar_negatives or anchor_negstar)"
            ))),
        }
    }
}

impl fmt::Display for SecondTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecondTerm::NegstarNegatives => "negstar_negatives",
            SecondTerm::AnchorNegstar => "anchor_negstar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { alpha: 0.5, beta: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub term1: f64,
    pub term2: f64,
    /// Hardest positive.
    pub pos: usize,
    /// Closest negative in term 1.
    pub neg1: usize,
    /// Index into the second-term distance list.
    pub neg2: usize,
}

fn argmax(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b })
}

fn argmin(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |b, k| if v[k] < v[b] { k } else { b })
}

/// Lazy quadruplet loss on squared distances. `d_second` holds the
/// distances the second hinge compares against (extra negative to each
/// negative, or the single anchor to extra negative distance). Ties select
/// the lowest index.
pub fn lazy_quadruplet_loss(d_ap: &[f64], d_an: &[f64], d_second: &[f64], p: &LossParams) -> LossValue {
    assert!(!d_ap.is_empty() && !d_an.is_empty() && !d_second.is_empty());
    let pos = argmax(d_ap);
    let neg1 = argmin(d_an);
    let neg2 = argmin(d_second);
    let term1 = (p.alpha + d_ap[pos] - d_an[neg1]).max(0.0);
    let term2 = (p.beta + d_ap[pos] - d_second[neg2]).max(0.0);
    LossValue {
        loss: term1 + term2,
        term1,
        term2,
        pos,
        neg1,
        neg2,
    }
}

/// Loss of one tuple from its descriptors (rows in [`TrainingTuple::members`]
/// order) and the gradient with respect to every row.
pub fn tuple_loss(descs: &[Vec<f64>], n_pos: usize, n_neg: usize, p: &LossParams, second: SecondTerm) -> (LossValue, Vec<Vec<f64>>) {
    let a = &descs[0];
    let pos = &descs[1..1 + n_pos];
    let neg = &descs[1 + n_pos..1 + n_pos + n_neg];
    let star = &descs[1 + n_pos + n_neg];
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let d_ap: Vec<f64> = pos.iter().map(|x| d(a, x)).collect();
    let d_an: Vec<f64> = neg.iter().map(|x| d(a, x)).collect();
    let d_second: Vec<f64> = match second {
        SecondTerm::NegstarNegatives => neg.iter().map(|x| d(star, x)).collect(),
        SecondTerm::AnchorNegstar => vec![d(a, star)],
    };
    let lv = lazy_quadruplet_loss(&d_ap, &d_an, &d_second, p);
    let dim = a.len();
    let mut g = vec![vec![0.0; dim]; descs.len()];
    // d|x-y|^2 / dx = 2(x-y)
    let add = |g: &mut Vec<Vec<f64>>, i: usize, j: usize, sign: f64| {
        for k in 0..dim {
            let v = 2.0 * (descs[i][k] - descs[j][k]) * sign;
            g[i][k] += v;
            g[j][k] -= v;
        }
    };
    let ip = 1 + lv.pos;
    if lv.term1 > 0.0 {
        add(&mut g, 0, ip, 1.0);
        add(&mut g, 0, 1 + n_pos + lv.neg1, -1.0);
    }
    if lv.term2 > 0.0 {
        add(&mut g, 0, ip, 1.0);
        let istar = 1 + n_pos + n_neg;
        match second {
            SecondTerm::NegstarNegatives => add(&mut g, istar, 1 + n_pos + lv.neg2, -1.0),
            SecondTerm::AnchorNegstar => add(&mut g, 0, istar, -1.0),
        }
    }
    (lv, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    /// Learning rate is halved every this many epochs.
    pub lr_halve_every: usize,
    pub epochs: usize,
    /// Stops after this many optimiser steps when set.
    pub max_steps: Option<usize>,
    /// Epochs with random negatives before hard mining starts.
    pub stage1_epochs: usize,
    pub loss: LossParams,
    pub second_term: SecondTerm,
    pub rules: MiningRules,
    pub bn_momentum: f64,
    /// When non-zero, this many tuples with random negatives are drawn once
    /// and replayed every epoch instead of being re-mined.
    pub fixed_tuples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            learning_rate: 1e-4,
            lr_halve_every: 5,
            epochs: 10,
            max_steps: None,
            stage1_epochs: 2,
            loss: LossParams::default(),
            second_term: SecondTerm::NegstarNegatives,
            rules: MiningRules::default(),
            bn_momentum: 0.1,
            fixed_tuples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub term1: f64,
    pub term2: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.curve.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.curve.last().map(|r| r.epoch)
    }
}

/// `step,loss,term1,term2`.
pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "epoch", "loss", "term1", "term2"])?;
    for r in curve {
        w.write_record([r.step.to_string(), r.epoch.to_string(), r.loss.to_string(), r.term1.to_string(), r.term2.to_string()])?;
    }
    w.flush().map_err(|e| CoralError::io(path, e))
}

/// Batch size used when re-estimating normalization statistics and when
/// computing descriptors for a whole dataset.
pub const DESCRIBE_BATCH: usize = 24;

/// Replaces every running mean/variance with the average batch statistics
/// over the given samples, so inference mode matches what training saw.
pub fn recalibrate_batch_norm<T: Real>(net: &mut CoralNet<T>, inputs: &[&SampleInput]) -> Result<()> {
    let mut sums: Vec<BnUpdate<T>> = Vec::new();
    let mut batches = 0usize;
    for chunk in inputs.chunks(DESCRIBE_BATCH) {
        if chunk.len() < 2 && batches > 0 {
            continue;
        }
        let mut tape = Tape::new(&net.store, true);
        net.forward(&mut tape, chunk)?;
        let ups = tape.bn_updates();
        if sums.is_empty() {
            sums = ups.to_vec();
        } else {
            for (s, u) in sums.iter_mut().zip(ups) {
                s.mean.iter_mut().zip(&u.mean).for_each(|(a, &b)| *a += b);
                s.var.iter_mut().zip(&u.var).for_each(|(a, &b)| *a += b);
            }
        }
        batches += 1;
    }
    let inv = T::lit(1.0 / batches.max(1) as f64);
    for s in sums.iter_mut() {
        s.mean.iter_mut().for_each(|v| *v *= inv);
        s.var.iter_mut().for_each(|v| *v *= inv);
    }
    apply_bn_updates(&mut net.store, &sums, 1.0);
    Ok(())
}

/// Inference descriptors for every input, computed in fixed-size batches.
pub fn describe_all<T: Real>(net: &CoralNet<T>, inputs: &[&SampleInput]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(DESCRIBE_BATCH) {
        out.extend(net.describe(chunk)?);
    }
    Ok(out)
}

/// Trains `net` on the samples; `inputs[k]` belongs to `metas[k]`.
/// Checkpoints go to `ckpt_dir` after every epoch when given.
pub fn train(
    net: &mut CoralNet<f32>,
    metas: &[SampleMeta],
    inputs: &[SampleInput],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    if metas.len() != inputs.len() {
        return Err(CoralError::InvalidArgument("metas and inputs differ in length".into()));
    }
    let mined = mine_anchors(metas, &cfg.rules)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net.store, cfg.learning_rate);
    let all: Vec<&SampleInput> = inputs.iter().collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let fixed: Vec<TrainingTuple> = if cfg.fixed_tuples > 0 {
        let mut t = mine_tuples(metas, &cfg.rules, &mut rng)?;
        t.truncate(cfg.fixed_tuples);
        t
    } else {
        Vec::new()
    };
    'epochs: for epoch in 0..cfg.epochs {
        adam.lr = cfg.learning_rate * 0.5f64.powi((epoch / cfg.lr_halve_every.max(1)) as i32);
        let stage = if epoch < cfg.stage1_epochs { NegativeStage::Random } else { NegativeStage::Hard };
        let descs = match stage {
            NegativeStage::Hard if fixed.is_empty() => Some(describe_all(net, &all)?),
            _ => None,
        };
        let n = if fixed.is_empty() { mined.len() } else { fixed.len() };
        let mut order: Vec<usize> = (0..n).collect();
        for k in (1..order.len()).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        for &m in &order {
            if cfg.max_steps.is_some_and(|s| step >= s) {
                break 'epochs;
            }
            let tuple = if fixed.is_empty() {
                let ma = &mined[m];
                let (extra, pool) = pick_extra_negative(metas, ma, &cfg.rules, &mut rng)?;
                let hard = descs.as_ref().map(|d| (d[ma.anchor].as_slice(), d.as_slice()));
                let negatives = sample_negatives(stage, cfg.rules.negatives, &pool, hard, &mut rng)?;
                TrainingTuple {
                    anchor: ma.anchor,
                    positives: ma.positives.clone(),
                    negatives,
                    extra_negative: extra,
                }
            } else {
                fixed[m].clone()
            };
            let rec = train_step(net, &mut adam, &tuple, inputs, cfg, step, epoch)?;
            on_step(&rec);
            report.curve.push(rec);
            step += 1;
        }
        recalibrate_batch_norm(net, &all)?;
        if let Some(dir) = ckpt_dir {
            let p = dir.join(format!("epoch{:03}.ckpt", epoch + 1));
            net.store.save(&p)?;
            report.checkpoints.push(p);
        }
    }
    if cfg.max_steps.is_some_and(|s| step >= s) {
        recalibrate_batch_norm(net, &all)?;
    }
    if let Some(dir) = ckpt_dir {
        let p = dir.join("final.ckpt");
        net.store.save(&p)?;
        report.checkpoints.push(p);
    }
    Ok(report)
}

/// One optimiser step on one tuple, the tuple forming the batch.
pub fn train_step(
    net: &mut CoralNet<f32>,
    adam: &mut Adam<f32>,
    tuple: &TrainingTuple,
    inputs: &[SampleInput],
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
) -> Result<LossRecord> {
    let members = tuple.members();
    let batch: Vec<&SampleInput> = members.iter().map(|&k| &inputs[k]).collect();
    let (grads, updates, lv) = {
        let mut tape = Tape::new(&net.store, true);
        let out = net.forward(&mut tape, &batch)?;
        let t = tape.value(out);
        let dim = t.channels();
        let descs: Vec<Vec<f64>> = (0..t.batch()).map(|b| t.sample(b).iter().map(|&v| v as f64).collect()).collect();
        let (lv, g) = tuple_loss(&descs, tuple.positives.len(), tuple.negatives.len(), &cfg.loss, cfg.second_term);
        if !lv.loss.is_finite() {
            return Err(CoralError::NonFinite(format!(
                "loss {} at step {step} (epoch {epoch}, anchor sample {}, term1 {}, term2 {})",
                lv.loss, tuple.anchor, lv.term1, lv.term2
            )));
        }
        let seed = Tensor4::from_vec([t.batch(), dim, 1, 1], g.into_iter().flatten().map(|v| v as f32).collect())?;
        let grads = tape.backward(out, seed)?.into_param_grads(&net.store);
        (grads, tape.bn_updates().to_vec(), lv)
    };
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(CoralError::NonFinite(format!("gradient at step {step} (epoch {epoch})")));
    }
    adam.step(&mut net.store, &grads);
    apply_bn_updates(&mut net.store, &updates, cfg.bn_momentum);
    Ok(LossRecord {
        step,
        epoch,
        loss: lv.loss,
        term1: lv.term1,
        term2: lv.term2,
    })
}
