//! Attribute-clustered random graphs for dataset-free experiments.
//!
//! Nodes are split evenly into clusters. Attributes are sparse binary
//! bag-of-words rows: each cluster owns a block of topic words, and a node
//! draws a log-normal number of words, each from its cluster's topic block
//! with probability `topic_prob` and from the whole vocabulary otherwise.
//! Edges follow a stochastic block model with separate intra- and
//! inter-cluster probabilities.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    /// Vocabulary size.
    pub dims: usize,
    pub clusters: usize,
    /// Topic words owned by each cluster.
    pub topic_words: usize,
    /// Median word draws per node (duplicates collapse).
    pub words_per_node: usize,
    /// Log-scale spread of the per-node word count.
    pub length_spread: f64,
    pub topic_prob: f64,
    /// Expected number of same-cluster neighbors per node.
    pub intra_degree: f64,
    /// Expected number of other-cluster neighbors per node.
    pub inter_degree: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 1000,
            dims: 200,
            clusters: 5,
            topic_words: 20,
            words_per_node: 12,
            length_spread: 0.5,
            topic_prob: 0.8,
            intra_degree: 6.0,
            inter_degree: 0.5,
            seed: 0,
        }
    }
}

/// Cluster id of each node: contiguous equal blocks.
pub fn cluster_of(cfg: &SynthConfig, i: usize) -> usize {
    i * cfg.clusters / cfg.nodes
}

pub fn generate(cfg: &SynthConfig) -> Result<Graph> {
    if cfg.nodes < 2
        || cfg.clusters == 0
        || cfg.clusters > cfg.nodes
        || cfg.topic_words == 0
        || cfg.clusters * cfg.topic_words > cfg.dims
        || cfg.words_per_node == 0
        || !(0.0..=1.0).contains(&cfg.topic_prob)
    {
        return Err(Error::Argument(format!("invalid generator config {cfg:?}")));
    }
    let lengths = LogNormal::new((cfg.words_per_node as f64).ln(), cfg.length_spread)
        .map_err(|e| Error::Argument(format!("length distribution: {e}")))?;
    let mut rng = stream(cfg.seed, Stream::Synth);
    let n = cfg.nodes;
    let mut attrs = Tensor::zeros(n, cfg.dims);
    for i in 0..n {
        let base = cluster_of(cfg, i) * cfg.topic_words;
        let draws = (lengths.sample(&mut rng).round() as usize).clamp(1, cfg.dims);
        for _ in 0..draws {
            let word = if rng.gen::<f64>() < cfg.topic_prob {
                base + rng.gen_range(0..cfg.topic_words)
            } else {
                rng.gen_range(0..cfg.dims)
            };
            attrs.set(i, word, 1.0);
        }
    }

    let size = n as f64 / cfg.clusters as f64;
    let p_in = (cfg.intra_degree / (size - 1.0).max(1.0)).min(1.0);
    let p_out = if cfg.clusters > 1 {
        (cfg.inter_degree / (n as f64 - size)).min(1.0)
    } else {
        0.0
    };
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if cluster_of(cfg, i) == cluster_of(cfg, j) {
                p_in
            } else {
                p_out
            };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Ok(Graph::from_edges(attrs, &edges, None)?.0)
}
