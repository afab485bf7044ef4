//! Synthetic anomaly injection: dense cliques (structural) and
//! far-attribute swaps (contextual).

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, Rng, Stream};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub clique_size: usize,
    pub clique_count: usize,
    pub attr_count: usize,
    pub candidate_pool_size: usize,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            clique_size: 15,
            clique_count: 5,
            attr_count: 75,
            candidate_pool_size: 50,
            seed: 0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.clique_size < 2 {
            return Err(Error::Argument("clique size must be at least 2".into()));
        }
        if self.candidate_pool_size == 0 {
            return Err(Error::Argument(
                "candidate pool size must be positive".into(),
            ));
        }
        let total = self.clique_size * self.clique_count + self.attr_count;
        if total > n {
            return Err(Error::Capacity(format!(
                "{total} anomalies requested on a {n}-node graph"
            )));
        }
        Ok(())
    }
}

/// Output of a full injection run.
#[derive(Debug, Clone)]
pub struct Injected {
    pub graph: Graph,
    /// One sorted node list per clique.
    pub cliques: Vec<Vec<usize>>,
    pub attribute_nodes: Vec<usize>,
}

fn current_labels(g: &Graph) -> Vec<u8> {
    g.labels().map_or_else(|| vec![0; g.n()], <[u8]>::to_vec)
}

fn unlabeled(labels: &[u8]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == 0).collect()
}

/// Adds `q` node-disjoint cliques of `p` previously unlabeled nodes.
/// Returns the new graph and the cliques (each sorted).
pub fn inject_structural(
    g: &Graph,
    p: usize,
    q: usize,
    rng: &mut Rng,
) -> Result<(Graph, Vec<Vec<usize>>)> {
    if q == 0 {
        return Ok((g.clone(), Vec::new()));
    }
    if p < 2 {
        return Err(Error::Argument("clique size must be at least 2".into()));
    }
    let mut labels = current_labels(g);
    let free = unlabeled(&labels);
    if p * q > free.len() {
        return Err(Error::Capacity(format!(
            "{} clique members requested but only {} unlabeled nodes",
            p * q,
            free.len()
        )));
    }
    let picked = sample(rng, free.len(), p * q).into_vec();
    let mut cliques = Vec::with_capacity(q);
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for chunk in picked.chunks(p) {
        let mut members: Vec<usize> = chunk.iter().map(|&k| free[k]).collect();
        members.sort_unstable();
        for (a, &u) in members.iter().enumerate() {
            labels[u] = 1;
            for &v in &members[a + 1..] {
                triplets.push((u, v, 1.0));
                triplets.push((v, u, 1.0));
            }
        }
        cliques.push(members);
    }
    let adj = g.adjacency();
    for i in 0..g.n() {
        for &j in adj.row(i).0 {
            triplets.push((i, j, 1.0));
        }
    }
    // Merge, then clamp summed duplicates back to 1.
    let merged = SparseMatrix::from_triplets(g.n(), g.n(), triplets)?;
    let (rows, cols) = (merged.rows(), merged.cols());
    let adjacency = SparseMatrix::from_csr(
        rows,
        cols,
        merged.indptr().to_vec(),
        merged.indices().to_vec(),
        vec![1.0; merged.nnz()],
    )?;
    let graph = Graph::new(adjacency, g.attributes().clone(), Some(labels))?;
    Ok((graph, cliques))
}

/// Index of the row farthest (Euclidean) from `target` among `candidates`;
/// ties go to the lowest node index.
pub(crate) fn farthest_candidate(
    x: &crate::tensor::Tensor,
    target: usize,
    candidates: &[usize],
) -> usize {
    let t = x.row(target);
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for &c in candidates {
        let dist: f64 = x.row(c).iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist > best.0 || (dist == best.0 && c < best.1) {
            best = (dist, c);
        }
    }
    best.1
}

/// Replaces the attributes of `count` unlabeled targets with the row of the
/// farthest among `k` random candidates (target excluded). Candidate rows
/// are read from the input attributes, so swaps never chain.
pub fn inject_attribute(
    g: &Graph,
    count: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<(Graph, Vec<usize>)> {
    let n = g.n();
    if count == 0 {
        return Ok((g.clone(), Vec::new()));
    }
    if k == 0 || k >= n {
        return Err(Error::Argument(format!(
            "candidate pool size {k} must be in 1..{n}"
        )));
    }
    let mut labels = current_labels(g);
    let free = unlabeled(&labels);
    if count > free.len() {
        return Err(Error::Capacity(format!(
            "{count} attribute anomalies requested but only {} unlabeled nodes",
            free.len()
        )));
    }
    let original = g.attributes();
    let mut attrs = original.clone();
    let mut targets: Vec<usize> = sample(rng, free.len(), count)
        .into_iter()
        .map(|k| free[k])
        .collect();
    for &target in &targets {
        // Sample from n-1 slots and shift past the target to exclude it.
        let candidates: Vec<usize> = sample(rng, n - 1, k)
            .into_iter()
            .map(|c| if c >= target { c + 1 } else { c })
            .collect();
        let src = farthest_candidate(original, target, &candidates);
        attrs.row_mut(target).copy_from_slice(original.row(src));
        labels[target] = 1;
    }
    targets.sort_unstable();
    let graph = Graph::new(g.adjacency().clone(), attrs, Some(labels))?;
    Ok((graph, targets))
}

/// Structural then attribute injection from the config's own seed stream.
pub fn inject(g: &Graph, cfg: &InjectionConfig) -> Result<Injected> {
    cfg.validate(g.n())?;
    let mut rng = rng::stream(cfg.seed, Stream::Inject);
    let (g1, cliques) = inject_structural(g, cfg.clique_size, cfg.clique_count, &mut rng)?;
    let (graph, attribute_nodes) =
        inject_attribute(&g1, cfg.attr_count, cfg.candidate_pool_size, &mut rng)?;
    let graph = if graph.labels().is_none() {
        let n = graph.n();
        graph.with_labels(Some(vec![0; n]))?
    } else {
        graph
    };
    Ok(Injected {
        graph,
        cliques,
        attribute_nodes,
    })
}
