//! Candidate neighborhoods.
//!
//! Four heuristics each propose, for every center node, a weighted list of
//! candidate neighbors: graph neighbors, two-hop nodes, attribute nearest
//! neighbors, and personalized-PageRank mass. Each center's list is
//! normalized to sum to one. The bandit mixes the lists with its
//! strategy probabilities and the mixture is sampled without replacement
//! to produce the neighborhood each node aggregates from.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, Graph, Normalization};
use crate::rng::{self, Rng, Stream};
use crate::sparse::spmm_power;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    OneHop,
    TwoHop,
    Knn,
    Ppr,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::OneHop,
        Strategy::TwoHop,
        Strategy::Knn,
        Strategy::Ppr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OneHop => "one-hop",
            Strategy::TwoHop => "two-hop",
            Strategy::Knn => "knn",
            Strategy::Ppr => "ppr",
        }
    }
}

/// Per-center candidate lists for one strategy. Candidates within a center
/// are sorted by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTable {
    strategy: Strategy,
    offsets: Vec<usize>,
    candidates: Vec<usize>,
    weights: Vec<f64>,
}

impl StrategyTable {
    /// Builds a table from per-center `(candidate, weight)` lists. Lists are
    /// sorted, and renormalized when their mass is positive.
    pub fn from_lists(strategy: Strategy, lists: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut candidates = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (i, mut list) in lists.into_iter().enumerate() {
            list.sort_unstable_by_key(|e| e.0);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Consistency(format!(
                    "duplicate candidate for center {i}"
                )));
            }
            if list
                .iter()
                .any(|&(j, w)| j == i || j >= n || !(w >= 0.0) || !w.is_finite())
            {
                return Err(Error::Consistency(format!(
                    "invalid candidate list for center {i}"
                )));
            }
            let total: f64 = list.iter().map(|e| e.1).sum();
            for (j, w) in list {
                candidates.push(j);
                weights.push(if total > 0.0 { w / total } else { w });
            }
            offsets.push(candidates.len());
        }
        Ok(StrategyTable {
            strategy,
            offsets,
            candidates,
            weights,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn centers(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.candidates.len()
    }

    /// Candidate ids and weights for center `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        (&self.candidates[lo..hi], &self.weights[lo..hi])
    }

    /// `Q(i → j)`, zero when `j` is not a candidate of `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (c, w) = self.row(i);
        c.binary_search(&j).map_or(0.0, |p| w[p])
    }
}

/// Rows of the row-stochastic adjacency.
pub fn build_onehop(g: &Graph) -> StrategyTable {
    let p = normalized_adjacency(g, Normalization::RowStochastic, false);
    let lists = (0..g.n())
        .map(|i| {
            let (c, w) = p.row(i);
            c.iter().copied().zip(w.iter().copied()).collect()
        })
        .collect();
    StrategyTable::from_lists(Strategy::OneHop, lists).expect("adjacency rows are valid lists")
}

/// Rows of the squared row-stochastic adjacency, minus the center and its
/// direct neighbors.
pub fn build_twohop(g: &Graph) -> StrategyTable {
    let p = normalized_adjacency(g, Normalization::RowStochastic, false);
    let p2 = spmm_power(&p, 2).expect("square matrix");
    let lists = (0..g.n())
        .map(|i| {
            let (c, w) = p2.row(i);
            c.iter()
                .zip(w)
                .filter(|&(&j, _)| j != i && !g.adjacency().contains(i, j))
                .map(|(&j, &w)| (j, w))
                .collect()
        })
        .collect();
    StrategyTable::from_lists(Strategy::TwoHop, lists).expect("two-hop rows are valid lists")
}

/// Row-normalized attributes; zero rows stay zero.
fn unit_rows(x: &Tensor) -> (Tensor, Vec<bool>) {
    let mut out = x.clone();
    let mut zero = vec![false; x.rows()];
    for i in 0..x.rows() {
        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        } else {
            zero[i] = true;
        }
    }
    (out, zero)
}

fn top_by_similarity(sims: &[f64], center: usize, k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..sims.len()).filter(|&j| j != center).collect();
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|j| (j, sims[j])).collect()
}

fn knn_weights(top: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let positive: f64 = top.iter().map(|e| e.1.max(0.0)).sum();
    if positive > 0.0 {
        top.into_iter().map(|(j, s)| (j, s.max(0.0))).collect()
    } else {
        let u = 1.0 / top.len().max(1) as f64;
        top.into_iter().map(|(j, _)| (j, u)).collect()
    }
}

/// The `knn_k` most cosine-similar nodes per center. Weights follow positive
/// similarity, falling back to uniform when none is positive. Centers with an
/// all-zero attribute row get `knn_k` uniformly random candidates drawn from
/// the pool stream of `seed`.
pub fn build_knn(g: &Graph, knn_k: usize, seed: u64) -> Result<StrategyTable> {
    let n = g.n();
    if knn_k == 0 || knn_k >= n {
        return Err(Error::Argument(format!("knn_k={knn_k} must be in 1..{n}")));
    }
    let (unit, zero) = unit_rows(g.attributes());
    let nnz = unit.data().iter().filter(|v| **v != 0.0).count();
    let density = nnz as f64 / unit.len().max(1) as f64;
    let mut lists: Vec<Vec<(usize, f64)>> = if density < 0.1 {
        knn_sparse(&unit, &zero, knn_k)
    } else {
        knn_dense(&unit, &zero, knn_k)?
    };
    let mut rng = rng::stream(seed, Stream::Pool);
    for i in (0..n).filter(|&i| zero[i]) {
        let u = 1.0 / knn_k as f64;
        lists[i] = sample(&mut rng, n - 1, knn_k)
            .into_iter()
            .map(|c| (if c >= i { c + 1 } else { c }, u))
            .collect();
    }
    StrategyTable::from_lists(Strategy::Knn, lists)
}

fn knn_dense(unit: &Tensor, zero: &[bool], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    const BLOCK: usize = 256;
    let n = unit.rows();
    let d = unit.cols();
    let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let parts: Result<Vec<Vec<Vec<(usize, f64)>>>> = blocks
        .par_iter()
        .map(|&start| {
            let end = (start + BLOCK).min(n);
            let slice = Tensor::from_vec(end - start, d, unit.data()[start * d..end * d].to_vec())?;
            let sims = gemm(&slice, false, unit, true)?;
            Ok((start..end)
                .map(|i| {
                    if zero[i] {
                        Vec::new()
                    } else {
                        knn_weights(top_by_similarity(sims.row(i - start), i, k))
                    }
                })
                .collect())
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}

fn knn_sparse(unit: &Tensor, zero: &[bool], k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = unit.rows();
    let d = unit.cols();
    // feature -> (node, value)
    let mut postings: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for i in 0..n {
        for (f, &v) in unit.row(i).iter().enumerate() {
            if v != 0.0 {
                postings[f].push((i, v));
            }
        }
    }
    (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0f64; n],
            |sims, i| {
                if zero[i] {
                    return Vec::new();
                }
                sims.iter_mut().for_each(|s| *s = 0.0);
                for (f, &v) in unit.row(i).iter().enumerate() {
                    if v != 0.0 {
                        for &(j, w) in &postings[f] {
                            sims[j] += v * w;
                        }
                    }
                }
                knn_weights(top_by_similarity(sims, i, k))
            },
        )
        .collect()
}

/// Approximate personalized PageRank from `source` with teleport
/// probability `teleport`, within `tol` of the exact vector in L1 norm.
pub fn ppr_vector(g: &Graph, source: usize, teleport: f64, tol: f64) -> Vec<f64> {
    let est = ppr_block(g, &[source], teleport, tol);
    est.into_iter().map(|row| row[0]).collect()
}

/// Push rounds for several sources at once. Every node holding residual
/// pushes all of it each round, so the residual mass, which bounds the L1
/// error, shrinks by exactly `1 − teleport` per round. Returns `est[u][s]`,
/// one row per node with one entry per source.
fn ppr_block(g: &Graph, sources: &[usize], teleport: f64, tol: f64) -> Vec<Vec<f64>> {
    let n = g.n();
    let b = sources.len();
    let mut est = vec![0.0; n * b];
    let mut res = vec![0.0; n * b];
    let mut next = vec![0.0; n * b];
    for (c, &s) in sources.iter().enumerate() {
        if g.degree(s) == 0 {
            est[s * b + c] = 1.0;
        } else {
            res[s * b + c] = 1.0;
        }
    }
    let mut mass = 1.0;
    while mass > tol {
        for u in 0..n {
            let deg = g.degree(u);
            if deg == 0 {
                continue;
            }
            let r = &res[u * b..(u + 1) * b];
            for (e, &v) in est[u * b..(u + 1) * b].iter_mut().zip(r) {
                *e += teleport * v;
            }
            let share = (1.0 - teleport) / deg as f64;
            for &v in g.neighbors(u) {
                for (x, &y) in next[v * b..(v + 1) * b].iter_mut().zip(r) {
                    *x += share * y;
                }
            }
        }
        std::mem::swap(&mut res, &mut next);
        next.iter_mut().for_each(|x| *x = 0.0);
        mass *= 1.0 - teleport;
    }
    est.chunks_exact(b).map(<[f64]>::to_vec).collect()
}

/// The `top` highest-PPR nodes per center (center excluded), renormalized.
pub fn build_ppr(g: &Graph, teleport: f64, top: usize, tol: f64) -> Result<StrategyTable> {
    if !(teleport > 0.0 && teleport < 1.0) {
        return Err(Error::Argument(format!(
            "teleport {teleport} must lie in (0, 1)"
        )));
    }
    if top == 0 || !(tol > 0.0) {
        return Err(Error::Argument(
            "ppr top must be positive and tol > 0".into(),
        ));
    }
    const BLOCK: usize = 32;
    let n = g.n();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let lists: Vec<Vec<(usize, f64)>> = starts
        .into_par_iter()
        .flat_map_iter(|s0| {
            let sources: Vec<usize> = (s0..(s0 + BLOCK).min(n)).collect();
            let est = ppr_block(g, &sources, teleport, tol);
            sources
                .iter()
                .enumerate()
                .map(|(c, &i)| {
                    if g.degree(i) == 0 {
                        return Vec::new();
                    }
                    let mut mass: Vec<(usize, f64)> = (0..n)
                        .filter(|&u| u != i && est[u][c] > 0.0)
                        .map(|u| (u, est[u][c]))
                        .collect();
                    mass.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    mass.truncate(top);
                    mass
                })
                .collect::<Vec<_>>()
        })
        .collect();
    StrategyTable::from_lists(Strategy::Ppr, lists)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub knn_k: usize,
    pub teleport: f64,
    pub ppr_top: usize,
    pub ppr_tol: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            knn_k: 10,
            teleport: 0.15,
            ppr_top: 10,
            ppr_tol: 1e-5,
        }
    }
}

/// Mixed sampling law for one center.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// Union of candidates, sorted by node id.
    pub nodes: Vec<usize>,
    /// Normalized mixture mass per node.
    pub phi: Vec<f64>,
    /// `Q_k(i → j)` per node, row-major `nodes.len() × K`.
    pub q: Vec<f64>,
    /// True when no strategy had mass and a uniform fallback was used.
    pub fallback: bool,
}

/// Realized neighborhoods for every center from one sampling round.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    k: usize,
    probs: Vec<f64>,
    offsets: Vec<usize>,
    nodes: Vec<usize>,
    phi: Vec<f64>,
    q: Vec<f64>,
}

impl Selection {
    /// Strategy probabilities the round was drawn under.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn strategies(&self) -> usize {
        self.k
    }

    pub fn centers(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nodes[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Mixture mass of each selected neighbor of `i`.
    pub fn phi(&self, i: usize) -> &[f64] {
        &self.phi[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Strategy weights `Q_k(i → j)` for the `slot`-th selected neighbor of `i`.
    pub fn q(&self, i: usize, slot: usize) -> &[f64] {
        let p = self.offsets[i] + slot;
        &self.q[p * self.k..(p + 1) * self.k]
    }

    pub fn all_neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.centers())
            .map(|i| self.neighbors(i).to_vec())
            .collect()
    }

    /// Builds a selection directly from per-center picks and the mixtures
    /// they were drawn from.
    pub fn from_picks(probs: &[f64], picks: &[(Vec<usize>, Mixture)]) -> Result<Selection> {
        let k = probs.len();
        let mut offsets = vec![0];
        let mut nodes = Vec::new();
        let mut phi = Vec::new();
        let mut q = Vec::new();
        for (i, (chosen, mix)) in picks.iter().enumerate() {
            for &j in chosen {
                let pos = mix.nodes.binary_search(&j).map_err(|_| {
                    Error::Consistency(format!("node {j} selected for {i} outside its mixture"))
                })?;
                nodes.push(j);
                phi.push(mix.phi[pos]);
                q.extend_from_slice(&mix.q[pos * k..(pos + 1) * k]);
            }
            offsets.push(nodes.len());
        }
        Ok(Selection {
            k,
            probs: probs.to_vec(),
            offsets,
            nodes,
            phi,
            q,
        })
    }
}

/// Strategy tables plus the most recent neighborhood draw.
#[derive(Debug, Clone)]
pub struct NeighborPool {
    tables: Vec<StrategyTable>,
    selection: Option<Selection>,
}

impl NeighborPool {
    /// Builds the four default tables.
    pub fn build(g: &Graph, cfg: &PoolConfig, seed: u64) -> Result<Self> {
        if g.n() < 2 {
            return Err(Error::Argument(
                "neighbor pool needs at least two nodes".into(),
            ));
        }
        let knn_k = cfg.knn_k.min(g.n() - 1);
        let tables = vec![
            build_onehop(g),
            build_twohop(g),
            build_knn(g, knn_k, seed)?,
            build_ppr(g, cfg.teleport, cfg.ppr_top, cfg.ppr_tol)?,
        ];
        NeighborPool::from_tables(tables)
    }

    pub fn from_tables(tables: Vec<StrategyTable>) -> Result<Self> {
        let Some(first) = tables.first() else {
            return Err(Error::Argument("pool needs at least one strategy".into()));
        };
        let n = first.centers();
        if tables.iter().any(|t| t.centers() != n) {
            return Err(Error::Consistency(
                "strategy tables disagree on node count".into(),
            ));
        }
        Ok(NeighborPool {
            tables,
            selection: None,
        })
    }

    pub fn strategies(&self) -> usize {
        self.tables.len()
    }

    pub fn centers(&self) -> usize {
        self.tables[0].centers()
    }

    pub fn tables(&self) -> &[StrategyTable] {
        &self.tables
    }

    pub fn selection(&self) -> Option<&Selection> {
        self.selection.as_ref()
    }

    /// Total candidate entries over all tables.
    pub fn entries(&self) -> usize {
        self.tables.iter().map(StrategyTable::entries).sum()
    }

    /// `Φ_i(j) ∝ Σ_k p_k Q_k(i → j)` over the union of candidate lists.
    pub fn mixture(&self, probs: &[f64], i: usize) -> Mixture {
        let k = self.tables.len();
        debug_assert_eq!(probs.len(), k);
        let mut nodes: Vec<usize> = self
            .tables
            .iter()
            .flat_map(|t| t.row(i).0.iter().copied())
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        let mut q = vec![0.0; nodes.len() * k];
        let mut phi = vec![0.0; nodes.len()];
        for (s, table) in self.tables.iter().enumerate() {
            let (cands, weights) = table.row(i);
            for (&j, &w) in cands.iter().zip(weights) {
                let pos = nodes.binary_search(&j).unwrap();
                q[pos * k + s] = w;
                phi[pos] += probs[s] * w;
            }
        }
        let total: f64 = phi.iter().sum();
        if total > 0.0 {
            phi.iter_mut().for_each(|v| *v /= total);
            return Mixture {
                nodes,
                phi,
                q,
                fallback: false,
            };
        }
        let knn = self.tables.iter().find(|t| t.strategy() == Strategy::Knn);
        let fallback_nodes: Vec<usize> = match knn.map(|t| t.row(i).0) {
            Some(c) if !c.is_empty() => c.to_vec(),
            _ => (0..self.centers()).filter(|&j| j != i).collect(),
        };
        let u = 1.0 / fallback_nodes.len().max(1) as f64;
        let zeros = vec![0.0; fallback_nodes.len() * k];
        Mixture {
            phi: vec![u; fallback_nodes.len()],
            nodes: fallback_nodes,
            q: zeros,
            fallback: true,
        }
    }

    /// Draws a neighborhood for every center and caches it.
    pub fn resample(&mut self, probs: &[f64], m: usize, rng: &mut Rng) -> Result<&Selection> {
        if probs.len() != self.tables.len() {
            return Err(Error::Argument(format!(
                "{} strategy probabilities for {} strategies",
                probs.len(),
                self.tables.len()
            )));
        }
        let mixtures: Vec<Mixture> = (0..self.centers())
            .into_par_iter()
            .map(|i| self.mixture(probs, i))
            .collect();
        let picks: Vec<(Vec<usize>, Mixture)> = mixtures
            .into_iter()
            .map(|mix| (sample_neighborhood(&mix, m, rng), mix))
            .collect();
        self.selection = Some(Selection::from_picks(probs, &picks)?);
        Ok(self.selection.as_ref().unwrap())
    }

    /// One TSV line per `(strategy, center, candidate, weight)`.
    pub fn dump_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "strategy\tcenter\tcandidate\tweight")?;
        for t in &self.tables {
            for i in 0..t.centers() {
                let (c, wt) = t.row(i);
                for (j, x) in c.iter().zip(wt) {
                    writeln!(w, "{}\t{i}\t{j}\t{x}", t.strategy().name())?;
                }
            }
        }
        Ok(())
    }
}

/// Up to `m` draws without replacement from the mixture, in draw order.
/// Uses exponential keys `ln(u)/w`, equivalent to successive weighted draws.
pub fn sample_neighborhood(mix: &Mixture, m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(mix.nodes.len());
    for (&j, &w) in mix.nodes.iter().zip(&mix.phi) {
        if w > 0.0 {
            let u: f64 = 1.0 - rng.gen::<f64>();
            keyed.push((u.ln() / w, j));
        }
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if m < keyed.len() {
        keyed.select_nth_unstable_by(m, cmp);
        keyed.truncate(m);
    }
    keyed.sort_unstable_by(cmp);
    keyed.into_iter().map(|e| e.1).collect()
}
