//! Agglomerative clustering of task latents, purity-driven choice of the
//! cluster count and nearest-center routing.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::Family;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
    Ward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogRow {
    pub task_id: u64,
    /// Generator family. Read only by [`purity`] and the sampling weights.
    pub family: Family,
    pub mu: Vec<f64>,
}

/// Embedded meta-train tasks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentCatalog {
    rows: Vec<CatalogRow>,
}

impl LatentCatalog {
    pub fn new(rows: Vec<CatalogRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.mu.len();
            if let Some(bad) = rows.iter().find(|r| r.mu.len() != d) {
                return Err(Error::contract(format!(
                    "task {} has a {}-dim latent, expected {d}",
                    bad.task_id,
                    bad.mu.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = rows.iter().find(|r| !seen.insert(r.task_id)) {
            return Err(Error::contract(format!("duplicate task id {}", dup.task_id)));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[CatalogRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.mu.len())
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.mu.as_slice()).collect()
    }

    pub fn families(&self) -> Vec<Family> {
        self.rows.iter().map(|r| r.family).collect()
    }

    /// `embeddings.csv`: `task_id,family,dim_0..dim_{d-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["task_id".to_string(), "family".to_string()];
        header.extend((0..self.dim()).map(|i| format!("dim_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            write!(out, "{},{}", r.task_id, r.family)?;
            for v in &r.mu {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(format!("{} not found", path.display())))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::MissingArtifact("empty embeddings.csv".into()))?;
        if !header.starts_with("task_id,family") {
            return Err(Error::MissingArtifact(format!("{}: bad header", path.display())));
        }
        let bad = |n: usize| Error::MissingArtifact(format!("{}: malformed row {n}", path.display()));
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut cols = line.split(',');
            let task_id = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(n))?;
            let family = cols.next().and_then(Family::parse).ok_or_else(|| bad(n))?;
            let mu = cols.map(|s| s.parse::<f64>().map_err(|_| bad(n))).collect::<Result<_>>()?;
            rows.push(CatalogRow { task_id, family, mu });
        }
        Self::new(rows)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One merge of the dendrogram: clusters are named by their smallest member
/// row index at the time of the merge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Full merge history over `n` points, sorted by height.
#[derive(Clone, Debug, PartialEq)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Builds the dendrogram with the nearest-neighbour chain algorithm on a
    /// Lance–Williams distance matrix (O(n²) time and memory). Ward works on
    /// squared distances; reported heights are square-rooted back.
    pub fn build(points: &[&[f64]], linkage: Linkage) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::contract("cannot cluster an empty catalog"));
        }
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut v = euclidean(points[i], points[j]);
                if linkage == Linkage::Ward {
                    v *= v;
                }
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        let mut size = vec![1usize; n];
        let mut active = vec![true; n];
        let mut merges = Vec::with_capacity(n.saturating_sub(1));
        let mut chain: Vec<usize> = Vec::new();
        for _ in 1..n {
            if chain.is_empty() {
                chain.push(active.iter().position(|&a| a).unwrap_or(0));
            }
            loop {
                let top = *chain.last().unwrap_or(&0);
                let prev = (chain.len() >= 2).then(|| chain[chain.len() - 2]);
                // Nearest active neighbour; the previous chain element wins ties.
                let mut best = prev;
                let mut best_d = prev.map_or(f64::INFINITY, |p| d[top * n + p]);
                for j in 0..n {
                    if j != top && active[j] && d[top * n + j] < best_d {
                        best = Some(j);
                        best_d = d[top * n + j];
                    }
                }
                let nn = best.ok_or_else(|| Error::Numerical("no active neighbour".into()))?;
                if Some(nn) == prev {
                    chain.pop();
                    chain.pop();
                    let (a, b) = (top.min(nn), top.max(nn));
                    // Merge b into a.
                    let (sa, sb) = (size[a] as f64, size[b] as f64);
                    for k in 0..n {
                        if !active[k] || k == a || k == b {
                            continue;
                        }
                        let (dak, dbk) = (d[a * n + k], d[b * n + k]);
                        let v = match linkage {
                            Linkage::Single => dak.min(dbk),
                            Linkage::Complete => dak.max(dbk),
                            Linkage::Average => (sa * dak + sb * dbk) / (sa + sb),
                            Linkage::Ward => {
                                let sk = size[k] as f64;
                                ((sa + sk) * dak + (sb + sk) * dbk - sk * best_d) / (sa + sb + sk)
                            }
                        };
                        d[a * n + k] = v;
                        d[k * n + a] = v;
                    }
                    active[b] = false;
                    size[a] += size[b];
                    let height = if linkage == Linkage::Ward { best_d.max(0.0).sqrt() } else { best_d };
                    merges.push(Merge { a, b, height });
                    break;
                }
                chain.push(nn);
            }
        }
        // Stable: equal heights keep discovery order.
        merges.sort_by(|x, y| x.height.total_cmp(&y.height));
        Ok(Self { n, merges })
    }

    /// Whether cutting into `k` clusters undoes a zero-height merge, i.e.
    /// separates identical points. Such cuts are arbitrary.
    pub fn splits_duplicates(&self, k: usize) -> bool {
        k > 1 && k <= self.n && self.merges[self.n - k].height <= 0.0
    }

    /// Flat assignment into `k` clusters, labelled by first appearance in row
    /// order.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::contract(format!("k = {k} outside 1..={}", self.n)));
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for m in &self.merges[..self.n - k] {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
        }
        let mut label = BTreeMap::new();
        Ok((0..self.n)
            .map(|i| {
                let r = find(&mut parent, i);
                let next = label.len();
                *label.entry(r).or_insert(next)
            })
            .collect())
    }
}

/// Bottom-up clustering of the catalog into `k` clusters.
pub fn agglomerate(catalog: &LatentCatalog, k: usize, linkage: Linkage) -> Result<Vec<usize>> {
    Dendrogram::build(&catalog.vectors(), linkage)?.cut(k)
}

/// `(1/N)·Σ_clusters max_label |cluster ∩ label|`.
pub fn purity<L: Ord + Clone>(assignments: &[usize], labels: &[L]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::contract("purity of an empty clustering"));
    }
    let mut counts: BTreeMap<usize, BTreeMap<L, usize>> = BTreeMap::new();
    for (&c, l) in assignments.iter().zip(labels) {
        *counts.entry(c).or_default().entry(l.clone()).or_default() += 1;
    }
    let hit: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(hit as f64 / assignments.len() as f64)
}

/// Outcome of a sweep over candidate cluster counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    /// `(k, score)` for every candidate.
    pub scores: Vec<(usize, f64)>,
}

fn check_range(range: &RangeInclusive<usize>, n: usize) -> Result<()> {
    if range.is_empty() {
        return Err(Error::contract("empty k range"));
    }
    if *range.start() == 0 || *range.end() > n {
        return Err(Error::contract(format!("k range {range:?} outside 1..={n}")));
    }
    Ok(())
}

/// Best-scoring `k`, ties to the smaller one. Counts that only split
/// identical points are skipped unless nothing else is left.
fn argmax_smallest(scores: &[(usize, f64)], tree: &Dendrogram) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for &s in scores {
        if tree.splits_duplicates(s.0) {
            continue;
        }
        if best.is_none_or(|b| s.1 > b.1) {
            best = Some(s);
        }
    }
    best.unwrap_or(scores[0]).0
}

/// Cluster count with the highest purity; ties go to the smaller `k`.
/// The dendrogram is built once and cut at every `k`.
pub fn select_k(catalog: &LatentCatalog, range: RangeInclusive<usize>, linkage: Linkage) -> Result<KSelection> {
    check_range(&range, catalog.len())?;
    let tree = Dendrogram::build(&catalog.vectors(), linkage)?;
    let families = catalog.families();
    let scores = range
        .map(|k| Ok((k, purity(&tree.cut(k)?, &families)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(KSelection {
        k: argmax_smallest(&scores, &tree),
        scores,
    })
}

/// Mean silhouette coefficient; 0 for a single cluster.
pub fn silhouette(points: &[&[f64]], assignments: &[usize]) -> f64 {
    let n = points.len();
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sum[assignments[j]] += euclidean(points[i], points[j]);
                cnt[assignments[j]] += 1;
            }
        }
        let own = assignments[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Label-free alternative to [`select_k`]: highest mean silhouette.
pub fn select_k_silhouette(catalog: &LatentCatalog, range: RangeInclusive<usize>, linkage: Linkage) -> Result<KSelection> {
    check_range(&range, catalog.len())?;
    let points = catalog.vectors();
    let tree = Dendrogram::build(&points, linkage)?;
    let scores = range
        .map(|k| Ok((k, silhouette(&points, &tree.cut(k)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(KSelection {
        k: argmax_smallest(&scores, &tree),
        scores,
    })
}

/// Member means of each cluster.
pub fn centers(points: &[&[f64]], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, |p| p.len());
    let mut sum = vec![vec![0.0; d]; k];
    let mut cnt = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        cnt[c] += 1;
        for (s, v) in sum[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sum.iter_mut().zip(&cnt) {
        for v in s.iter_mut() {
            *v /= c.max(1) as f64;
        }
    }
    sum
}

/// Index of the nearest center; ties go to the lowest index.
pub fn route(embedding: &[f64], centers: &[Vec<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in centers.iter().enumerate() {
        if c.len() != embedding.len() {
            return Err(Error::shape("route", &[embedding.len()], &[c.len()]));
        }
        let d = euclidean(embedding, c);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j).ok_or_else(|| Error::contract("no cluster centers"))
}

/// Result of the clustering stage, written to `clusters.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    /// Purity (or silhouette) of every candidate count.
    pub purity_by_k: Vec<(usize, f64)>,
    pub assignments: BTreeMap<u64, usize>,
    pub linkage: Linkage,
    /// Families in the order of `sampling_weights` columns.
    pub families: Vec<Family>,
    /// Per cluster, the share of each family among its members.
    pub sampling_weights: Vec<Vec<f64>>,
    /// Per-cluster checkpoint paths relative to the run directory.
    pub checkpoints: Vec<String>,
}

impl ClusterModel {
    /// Builds the model from a flat assignment. Cluster ids without members
    /// are dropped (with a warning) and the rest renumbered in order.
    pub fn from_assignments(
        catalog: &LatentCatalog,
        assignments: &[usize],
        families: &[Family],
        linkage: Linkage,
        purity_by_k: Vec<(usize, f64)>,
    ) -> Result<Self> {
        if assignments.len() != catalog.len() {
            return Err(Error::contract("assignment count differs from catalog size"));
        }
        let used: Vec<usize> = {
            let max = assignments.iter().max().map_or(0, |m| m + 1);
            (0..max).filter(|c| assignments.contains(c)).collect()
        };
        let declared = assignments.iter().max().map_or(0, |m| m + 1);
        if used.len() < declared {
            log::warn!("dropping {} empty cluster(s)", declared - used.len());
        }
        let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let flat: Vec<usize> = assignments.iter().map(|c| remap[c]).collect();
        let k = used.len();
        let points = catalog.vectors();
        let mut sampling_weights = vec![vec![0.0; families.len()]; k];
        let mut sizes = vec![0usize; k];
        for (row, &c) in catalog.rows().iter().zip(&flat) {
            let f = families
                .iter()
                .position(|&f| f == row.family)
                .ok_or_else(|| Error::contract(format!("family {} not in the distribution", row.family)))?;
            sampling_weights[c][f] += 1.0;
            sizes[c] += 1;
        }
        for (w, &s) in sampling_weights.iter_mut().zip(&sizes) {
            for v in w.iter_mut() {
                *v /= s as f64;
            }
        }
        Ok(Self {
            k,
            centers: centers(&points, &flat, k),
            purity_by_k,
            assignments: catalog.rows().iter().zip(&flat).map(|(r, &c)| (r.task_id, c)).collect(),
            linkage,
            families: families.to_vec(),
            sampling_weights,
            checkpoints: Vec::new(),
        })
    }

    pub fn route(&self, embedding: &[f64]) -> Result<usize> {
        route(embedding, &self.centers)
    }

    pub fn members(&self, cluster: usize) -> Vec<u64> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(format!("{} not found", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
