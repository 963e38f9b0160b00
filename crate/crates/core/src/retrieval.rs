//! Descriptor database, exact nearest-neighbour search and recall metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoralError, Result};
use crate::network::{read_descriptors, write_descriptors};
use crate::synth::SampleMeta;

/// Default success radius in meters.
pub const DEFAULT_RADIUS: f64 = 25.0;
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorRecord {
    pub id: u64,
    pub run: u32,
    pub x: f64,
    pub y: f64,
    pub desc: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDatabase {
    dim: usize,
    records: Vec<DescriptorRecord>,
    by_id: HashMap<u64, usize>,
}

/// Ranked candidates, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub ranked: Vec<(u64, f64)>,
    /// Number of records searched after exclusion.
    pub searched: usize,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// (distance, id) ordering used everywhere: nearer first, then lower id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand(f64, u64);

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Keeps the `k` smallest candidates.
struct TopK {
    k: usize,
    heap: BinaryHeap<Cand>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn push(&mut self, c: Cand) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if c < *self.heap.peek().unwrap() {
            self.heap.pop();
            self.heap.push(c);
        }
    }

    fn worst(&self) -> Option<f64> {
        (self.heap.len() == self.k).then(|| self.heap.peek().unwrap().0)
    }

    fn into_sorted(self) -> Vec<(u64, f64)> {
        self.heap.into_sorted_vec().into_iter().map(|c| (c.1, c.0)).collect()
    }
}

impl DescriptorDatabase {
    pub fn new(records: Vec<DescriptorRecord>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.desc.len());
        let mut by_id = HashMap::with_capacity(records.len());
        for (k, r) in records.iter().enumerate() {
            if r.desc.len() != dim {
                return Err(CoralError::Shape(format!("record {} has dimension {}, expected {dim}", r.id, r.desc.len())));
            }
            let n = r.desc.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(CoralError::InvalidArgument(format!("record {} has norm {n}, expected 1", r.id)));
            }
            if by_id.insert(r.id, k).is_some() {
                return Err(CoralError::InvalidArgument(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(DescriptorDatabase { dim, records, by_id })
    }

    /// Database of the given samples; `descs[k]` belongs to `metas[k]`.
    pub fn from_samples(metas: &[SampleMeta], descs: &[Vec<f32>]) -> Result<Self> {
        if metas.len() != descs.len() {
            return Err(CoralError::InvalidArgument(format!("{} samples but {} descriptors", metas.len(), descs.len())));
        }
        DescriptorDatabase::new(
            metas
                .iter()
                .zip(descs)
                .map(|(m, d)| DescriptorRecord {
                    id: m.id,
                    run: m.run,
                    x: m.x,
                    y: m.y,
                    desc: d.clone(),
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DescriptorRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&DescriptorRecord> {
        self.by_id.get(&id).map(|&k| &self.records[k])
    }

    fn searched(&self, exclude_run: Option<u32>) -> Result<usize> {
        let n = match exclude_run {
            Some(r) => self.records.iter().filter(|x| x.run != r).count(),
            None => self.records.len(),
        };
        if n == 0 {
            return Err(CoralError::EmptyDatabase(exclude_run.unwrap_or(u32::MAX)));
        }
        Ok(n)
    }

    /// Exact top-`k` by linear scan.
    pub fn query(&self, query_id: u64, q: &[f32], k: usize, exclude_run: Option<u32>) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(CoralError::InvalidArgument("k must be >= 1".into()));
        }
        if q.len() != self.dim {
            return Err(CoralError::Shape(format!("query has dimension {}, database {}", q.len(), self.dim)));
        }
        let searched = self.searched(exclude_run)?;
        let mut top = TopK::new(k);
        for r in &self.records {
            if Some(r.run) != exclude_run {
                top.push(Cand(sq_dist(q, &r.desc), r.id));
            }
        }
        Ok(RetrievalResult {
            query_id,
            ranked: top.into_sorted(),
            searched,
        })
    }

    /// Writes `path` (descriptor binary) and the sidecar `id,run,x,y` CSV
    /// next to it (same stem, `.csv`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let recs: Vec<(u64, Vec<f32>)> = self.records.iter().map(|r| (r.id, r.desc.clone())).collect();
        write_descriptors(path, &recs)?;
        let side = sidecar_path(path);
        let mut w = csv::Writer::from_path(&side)?;
        for r in &self.records {
            w.serialize(SidecarRow {
                id: r.id,
                run: r.run,
                x: r.x,
                y: r.y,
            })?;
        }
        w.flush().map_err(|e| CoralError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let descs = read_descriptors(path)?;
        let side = sidecar_path(path);
        let file = std::fs::File::open(&side).map_err(|e| CoralError::io(&side, e))?;
        let rows: Vec<SidecarRow> = csv::Reader::from_reader(file).deserialize().collect::<std::result::Result<_, _>>()?;
        let meta: HashMap<u64, SidecarRow> = rows.into_iter().map(|r| (r.id, r)).collect();
        let records = descs
            .into_iter()
            .map(|(id, desc)| {
                let m = meta
                    .get(&id)
                    .ok_or_else(|| CoralError::format(&side, format!("no sidecar row for id {id}")))?;
                Ok(DescriptorRecord {
                    id,
                    run: m.run,
                    x: m.x,
                    y: m.y,
                    desc,
                })
            })
            .collect::<Result<_>>()?;
        DescriptorDatabase::new(records)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct SidecarRow {
    id: u64,
    run: u32,
    x: f64,
    y: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Exact k-d tree over the database descriptors. Returns the same ranking
/// as [`DescriptorDatabase::query`], ties included.
pub struct KdTree<'a> {
    db: &'a DescriptorDatabase,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

enum KdNode {
    Leaf(Vec<usize>),
    Split { axis: usize, value: f32, left: usize, right: usize },
}

const LEAF_SIZE: usize = 8;

impl<'a> KdTree<'a> {
    pub fn build(db: &'a DescriptorDatabase) -> Self {
        let mut t = KdTree {
            db,
            nodes: Vec::new(),
            root: None,
        };
        if !db.is_empty() {
            let idx: Vec<usize> = (0..db.len()).collect();
            t.root = Some(t.build_node(idx));
        }
        t
    }

    fn build_node(&mut self, mut idx: Vec<usize>) -> usize {
        let recs = &self.db.records;
        if idx.len() <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf(idx));
            return self.nodes.len() - 1;
        }
        // split on the axis of largest spread, at the median
        let axis = (0..self.db.dim)
            .map(|a| {
                let (lo, hi) = idx.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &k| {
                    let v = recs[k].desc[a];
                    (lo.min(v), hi.max(v))
                });
                (hi - lo, a)
            })
            .max_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)))
            .map_or(0, |x| x.1);
        idx.sort_by(|&a, &b| recs[a].desc[axis].total_cmp(&recs[b].desc[axis]));
        let mid = idx.len() / 2;
        let value = recs[idx[mid]].desc[axis];
        let right_idx = idx.split_off(mid);
        if idx.is_empty() || right_idx.is_empty() {
            let mut all = idx;
            all.extend(right_idx);
            self.nodes.push(KdNode::Leaf(all));
            return self.nodes.len() - 1;
        }
        let left = self.build_node(idx);
        let right = self.build_node(right_idx);
        self.nodes.push(KdNode::Split { axis, value, left, right });
        self.nodes.len() - 1
    }

    pub fn query(&self, query_id: u64, q: &[f32], k: usize, exclude_run: Option<u32>) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(CoralError::InvalidArgument("k must be >= 1".into()));
        }
        if q.len() != self.db.dim {
            return Err(CoralError::Shape(format!("query has dimension {}, database {}", q.len(), self.db.dim)));
        }
        let searched = self.db.searched(exclude_run)?;
        let mut top = TopK::new(k);
        if let Some(r) = self.root {
            self.search(r, q, exclude_run, &mut top);
        }
        Ok(RetrievalResult {
            query_id,
            ranked: top.into_sorted(),
            searched,
        })
    }

    fn search(&self, n: usize, q: &[f32], exclude_run: Option<u32>, top: &mut TopK) {
        match &self.nodes[n] {
            KdNode::Leaf(idx) => {
                for &k in idx {
                    let r = &self.db.records[k];
                    if Some(r.run) != exclude_run {
                        top.push(Cand(sq_dist(q, &r.desc), r.id));
                    }
                }
            }
            &KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] as f64 - value as f64;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude_run, top);
                // equal distances must still be visited for the id tie-break
                if top.worst().is_none_or(|w| diff * diff <= w) {
                    self.search(far, q, exclude_run, top);
                }
            }
        }
    }
}

/// `max(1, round(percent / 100 * size))`, rounding half away from zero.
pub fn percent_to_n(percent: f64, size: usize) -> usize {
    ((percent / 100.0 * size as f64).round() as usize).max(1)
}

/// Whether any of the top `n` candidates lies within `radius` of `pos`.
pub fn success_at(result: &RetrievalResult, db: &DescriptorDatabase, pos: (f64, f64), n: usize, radius: f64) -> bool {
    result.ranked.iter().take(n).any(|(id, _)| {
        let r = db.get(*id).expect("result ids come from the database");
        (r.x - pos.0).powi(2) + (r.y - pos.1).powi(2) <= radius * radius
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopN {
    K(usize),
    Percent(f64),
}

/// Fraction of queries with a true match in their top-N.
pub fn recall_at(results: &[RetrievalResult], positions: &[(f64, f64)], db: &DescriptorDatabase, n: TopN, radius: f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .zip(positions)
        .filter(|(r, &p)| {
            let n = match n {
                TopN::K(k) => k,
                TopN::Percent(pc) => percent_to_n(pc, r.searched),
            };
            success_at(r, db, p, n, radius)
        })
        .count();
    hits as f64 / results.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub run: u32,
    pub rank1_id: u64,
    pub rank1_dist: f64,
    pub success_1: bool,
    pub success_1pct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub outcomes: Vec<QueryOutcome>,
    pub recall_1: f64,
    pub recall_1pct: f64,
    pub radius: f64,
}

impl EvalReport {
    /// Recall@1 and recall@1% restricted to the queries of each run.
    pub fn by_run(&self) -> BTreeMap<u32, (f64, f64, usize)> {
        let mut acc: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
        for o in &self.outcomes {
            let e = acc.entry(o.run).or_default();
            e.0 += o.success_1 as usize;
            e.1 += o.success_1pct as usize;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|(r, (a, b, n))| (r, (a as f64 / n as f64, b as f64 / n as f64, n)))
            .collect()
    }

    pub fn summary(&self) -> String {
        format!(
            "recall@1={:.4} recall@1%={:.4} queries={} radius_m={}",
            self.recall_1,
            self.recall_1pct,
            self.outcomes.len(),
            self.radius
        )
    }

    /// `query_id,rank1_id,rank1_dist,success@1,success@1pct` rows, then a
    /// `# ` summary line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["query_id", "rank1_id", "rank1_dist", "success@1", "success@1pct"])?;
            for o in &self.outcomes {
                w.write_record([
                    o.query_id.to_string(),
                    o.rank1_id.to_string(),
                    format!("{:.9}", o.rank1_dist),
                    (o.success_1 as u8).to_string(),
                    (o.success_1pct as u8).to_string(),
                ])?;
            }
            w.flush().map_err(|e| CoralError::io(path, e))?;
        }
        writeln!(buf, "# {}", self.summary()).map_err(|e| CoralError::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| CoralError::io(path, e))
    }
}

/// Cross-run protocol: every record of `query_runs` is a query against all
/// records of the other runs.
pub fn evaluate(db: &DescriptorDatabase, query_runs: &[u32], radius: f64) -> Result<EvalReport> {
    let mut outcomes = Vec::new();
    let mut results = Vec::new();
    let mut positions = Vec::new();
    for q in db.records().iter().filter(|r| query_runs.contains(&r.run)) {
        let searched = db.searched(Some(q.run))?;
        let n1pct = percent_to_n(1.0, searched);
        let res = db.query(q.id, &q.desc, n1pct.max(1), Some(q.run))?;
        let pos = (q.x, q.y);
        let (rank1_id, rank1_dist) = res.ranked[0];
        outcomes.push(QueryOutcome {
            query_id: q.id,
            run: q.run,
            rank1_id,
            rank1_dist,
            success_1: success_at(&res, db, pos, 1, radius),
            success_1pct: success_at(&res, db, pos, n1pct, radius),
        });
        results.push(res);
        positions.push(pos);
    }
    if outcomes.is_empty() {
        return Err(CoralError::InvalidArgument(format!("no queries in runs {query_runs:?}")));
    }
    Ok(EvalReport {
        recall_1: recall_at(&results, &positions, db, TopN::K(1), radius),
        recall_1pct: recall_at(&results, &positions, db, TopN::Percent(1.0), radius),
        outcomes,
        radius,
    })
}
