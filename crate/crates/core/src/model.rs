//! The detection network.
//!
//! Attributes are encoded by a bias-free two-layer tanh MLP. Nodes whose
//! embeddings lie farthest from the mean embedding are masked: they keep
//! their embedding and receive no messages. Every other node aggregates its
//! sampled neighborhood through a per-dimension tanh attention matrix, so
//! individual neighbors can contribute negatively or not at all. Two
//! decoders reconstruct the adjacency (`H·Hᵀ`) and the attributes; the
//! per-node blend of both reconstruction errors is the anomaly score.
//!
//! The aggregation is batched into a few dense and sparse products over the
//! whole graph, which keeps the tape to a handful of nodes.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, Graph, Normalization};
use crate::optim::{xavier_init, ParamSet};
use crate::pool::Selection;
use crate::rng::Rng;
use crate::sparse::SparseMatrix;
use crate::tensor::{gemm, Tensor};

/// Node count above which a dense `n × n` topology reconstruction is refused
/// unless minibatch rows are configured.
pub const DENSE_TOPOLOGY_LIMIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeDecoder {
    /// `tanh(Â_norm · H) · W`
    GraphConv,
    /// `tanh(H · W1) · W2`
    Mlp,
}

impl std::str::FromStr for AttributeDecoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph-conv" | "gcn" => Ok(AttributeDecoder::GraphConv),
            "mlp" => Ok(AttributeDecoder::Mlp),
            other => Err(Error::Argument(format!(
                "unknown attribute decoder {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding: usize,
    pub mask_rate: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub decoder: AttributeDecoder,
    /// When set, the topology loss uses this many sampled adjacency rows per
    /// step instead of the full `n × n` reconstruction.
    pub topology_rows: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding: 64,
            mask_rate: 0.03,
            alpha: 0.5,
            lambda: 0.0,
            decoder: AttributeDecoder::GraphConv,
            topology_rows: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding == 0 {
            return Err(Error::Argument("embedding size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Argument(format!(
                "mask rate {} outside [0, 1)",
                self.mask_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Argument(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Argument("lambda must be non-negative".into()));
        }
        if self.topology_rows == Some(0) {
            return Err(Error::Argument("topology rows must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of the model's tensors inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slots {
    enc1: usize,
    enc2: usize,
    att: usize,
    mp: usize,
    dec1: usize,
    dec2: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: ParamSet,
    slots: Slots,
}

impl Model {
    /// Xavier-initialized parameters for `d` input attributes.
    pub fn init(d: usize, config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        if d == 0 {
            return Err(Error::Argument("graph has no attributes".into()));
        }
        let h = config.embedding;
        let mut params = ParamSet::new();
        let enc1 = params.push("encoder.w1", xavier_init(d, h, rng));
        let enc2 = params.push("encoder.w2", xavier_init(h, h, rng));
        let att = params.push("aggregator.w_att", xavier_init(h, h, rng));
        let mp = params.push("aggregator.w_mp", xavier_init(h, h, rng));
        let (dec1, dec2) = match config.decoder {
            AttributeDecoder::GraphConv => (params.push("decoder.w", xavier_init(h, d, rng)), None),
            AttributeDecoder::Mlp => {
                let a = params.push("decoder.w1", xavier_init(h, h, rng));
                let b = params.push("decoder.w2", xavier_init(h, d, rng));
                (a, Some(b))
            }
        };
        Ok(Model {
            config,
            params,
            slots: Slots {
                enc1,
                enc2,
                att,
                mp,
                dec1,
                dec2,
            },
        })
    }

    /// Rebuilds a model from named parameters (e.g. a checkpoint).
    pub fn from_params(params: ParamSet, config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let find = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))
        };
        let enc1 = find("encoder.w1")?;
        let enc2 = find("encoder.w2")?;
        let att = find("aggregator.w_att")?;
        let mp = find("aggregator.w_mp")?;
        let (dec1, dec2) = match config.decoder {
            AttributeDecoder::GraphConv => (find("decoder.w")?, None),
            AttributeDecoder::Mlp => (find("decoder.w1")?, Some(find("decoder.w2")?)),
        };
        let h = config.embedding;
        let d = params.value(enc1).rows();
        let mut expect = vec![(enc1, (d, h)), (enc2, (h, h)), (att, (h, h)), (mp, (h, h))];
        match dec2 {
            None => expect.push((dec1, (h, d))),
            Some(d2) => {
                expect.push((dec1, (h, h)));
                expect.push((d2, (h, d)));
            }
        }
        for (i, shape) in expect {
            if params.value(i).shape() != shape {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {shape:?}",
                    params.iter().nth(i).unwrap().name,
                    params.value(i).shape()
                )));
            }
        }
        Ok(Model {
            config,
            params,
            slots: Slots {
                enc1,
                enc2,
                att,
                mp,
                dec1,
                dec2,
            },
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.value(self.slots.enc1).rows()
    }

    /// Aggregation weights, `(W_att, W_mp)`.
    pub fn aggregator_weights(&self) -> (&Tensor, &Tensor) {
        (
            self.params.value(self.slots.att),
            self.params.value(self.slots.mp),
        )
    }

    pub fn set_aggregator_weights(&mut self, w_att: Tensor, w_mp: Tensor) -> Result<()> {
        let h = self.config.embedding;
        if w_att.shape() != (h, h) || w_mp.shape() != (h, h) {
            return Err(Error::Argument("aggregator weights must be h×h".into()));
        }
        *self.params.value_mut(self.slots.att) = w_att;
        *self.params.value_mut(self.slots.mp) = w_mp;
        Ok(())
    }
}

/// Per-graph constants reused across forward passes.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub attributes: Tensor,
    pub adjacency: Arc<SparseMatrix>,
    /// Symmetric normalization with self-loops.
    pub norm_adjacency: Arc<SparseMatrix>,
    dense_adjacency: Option<Tensor>,
}

impl GraphInputs {
    pub fn new(g: &Graph) -> GraphInputs {
        let dense_adjacency = (g.n() <= DENSE_TOPOLOGY_LIMIT).then(|| g.adjacency().to_dense());
        GraphInputs {
            attributes: g.attributes().clone(),
            adjacency: Arc::new(g.adjacency().clone()),
            norm_adjacency: Arc::new(normalized_adjacency(g, Normalization::Symmetric, true)),
            dense_adjacency,
        }
    }

    pub fn n(&self) -> usize {
        self.attributes.rows()
    }
}

/// Source of the per-center neighborhoods used for aggregation.
pub trait Neighborhoods {
    fn neighbors(&self, i: usize) -> &[usize];
}

impl Neighborhoods for Selection {
    fn neighbors(&self, i: usize) -> &[usize] {
        Selection::neighbors(self, i)
    }
}

impl Neighborhoods for [Vec<usize>] {
    fn neighbors(&self, i: usize) -> &[usize] {
        &self[i]
    }
}

impl Neighborhoods for Vec<Vec<usize>> {
    fn neighbors(&self, i: usize) -> &[usize] {
        &self[i]
    }
}

/// How the masked set is chosen in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    /// Farthest `⌊rate·n⌋` nodes from the anchor, `rate` from the config.
    FromConfig,
    /// A fixed set, e.g. to hold the mask still for finite differences.
    Fixed(Vec<usize>),
}

/// Rows used by the topology loss.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyRows {
    All,
    Subset(Vec<usize>),
}

/// Mean-pooled embedding.
pub fn center_anchor(embeddings: &Tensor) -> Vec<f64> {
    embeddings.mean_rows().into_vec()
}

/// The `⌊mr·n⌋` rows farthest (squared Euclidean) from `anchor`, ties to the
/// lower index; returned sorted by node id.
pub fn mask_ids(embeddings: &Tensor, anchor: &[f64], mask_rate: f64) -> Vec<usize> {
    let n = embeddings.rows();
    let count = ((mask_rate * n as f64) + 1e-9).floor() as usize;
    if count == 0 {
        return Vec::new();
    }
    let dist: Vec<f64> = (0..n)
        .map(|i| {
            embeddings
                .row(i)
                .iter()
                .zip(anchor)
                .map(|(e, a)| (e - a) * (e - a))
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| dist[*b].total_cmp(&dist[*a]).then(a.cmp(b));
    let count = count.min(n);
    if count < n {
        order.select_nth_unstable_by(count - 1, cmp);
    }
    order.truncate(count);
    order.sort_unstable();
    order
}

/// `tanh(tanh(X·W1)·W2)`
pub fn encode(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let z = tape.matmul(x, w1)?;
    let z = tape.tanh(z)?;
    let z = tape.matmul(z, w2)?;
    tape.tanh(z)
}

/// Distinguishing message passing. Masked nodes pass their embedding through;
/// every other node `i` stacks `[E_i; E_j for j ∈ N_i]`, scores it with
/// `tanh(S·W_att)`, and sums the gated rows before projecting by `W_mp`.
///
/// The stacked product acts row by row, so the gate of row `j` is
/// `tanh(E_j·W_att)` whichever center stacked it. Gates are therefore
/// computed once per node and the per-center sums become one sparse product
/// with a matrix counting how often each node appears in each stack.
pub fn aggregate(
    tape: &mut Tape,
    e: Var,
    neighborhoods: &(impl Neighborhoods + ?Sized),
    mask: &[usize],
    w_att: Var,
    w_mp: Var,
) -> Result<Var> {
    let n = tape.value(e).rows();
    let mut masked = vec![false; n];
    for &m in mask {
        if m >= n {
            return Err(Error::Argument(format!("masked node {m} out of range")));
        }
        masked[m] = true;
    }
    let mut triplets = Vec::new();
    for i in (0..n).filter(|&i| !masked[i]) {
        triplets.push((i, i, 1.0));
        for &j in neighborhoods.neighbors(i) {
            if j >= n {
                return Err(Error::Argument(format!("neighbor {j} of {i} out of range")));
            }
            triplets.push((i, j, 1.0));
        }
    }
    let counts = SparseMatrix::from_triplets(n, n, triplets)?;

    let scores = tape.matmul(e, w_att)?;
    let att = tape.tanh(scores)?;
    let gated = tape.mul(att, e)?;
    let summed = tape.sparse_left(Arc::new(counts), gated)?;
    let messages = tape.matmul(summed, w_mp)?;
    if mask.is_empty() {
        return Ok(messages);
    }
    let mut keep: Vec<usize> = mask.to_vec();
    keep.sort_unstable();
    keep.dedup();
    let mut ptr = vec![0usize; n + 1];
    for i in 0..n {
        ptr[i + 1] = ptr[i] + usize::from(masked[i]);
    }
    let k = keep.len();
    let passthrough = SparseMatrix::from_csr(n, n, ptr, keep, vec![1.0; k])?;
    let own = tape.sparse_left(Arc::new(passthrough), e)?;
    tape.add(own, messages)
}

/// `Â = H·Hᵀ`
pub fn decode_topology(tape: &mut Tape, h: Var) -> Result<Var> {
    let n = tape.value(h).rows();
    if n > DENSE_TOPOLOGY_LIMIT {
        return Err(Error::Capacity(format!(
            "dense {n}x{n} topology reconstruction exceeds the {DENSE_TOPOLOGY_LIMIT}-node budget; set topology rows for minibatch mode"
        )));
    }
    tape.matmul_nt(h, h)
}

/// Per-row squared errors and weighted blend:
/// `S_i = (1−α)·‖a_i − â_i‖² + α·‖x_i − x̂_i‖²`.
pub fn anomaly_scores(
    a: &Tensor,
    a_hat: &Tensor,
    x: &Tensor,
    x_hat: &Tensor,
    alpha: f64,
) -> Result<Vec<f64>> {
    if a.shape() != a_hat.shape() || x.shape() != x_hat.shape() || a.rows() != x.rows() {
        return Err(Error::Argument("reconstruction shapes disagree".into()));
    }
    let topo = row_sq_errors(a, a_hat);
    let attr = row_sq_errors(x, x_hat);
    Ok(blend(&topo, &attr, alpha))
}

fn row_sq_errors(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        })
        .collect()
}

fn blend(topo: &[f64], attr: &[f64], alpha: f64) -> Vec<f64> {
    topo.iter()
        .zip(attr)
        .map(|(t, a)| (1.0 - alpha) * t + alpha * a)
        .collect()
}

/// `(1−α)·mean_i ‖a_i−â_i‖² + α·mean_i ‖x_i−x̂_i‖² + λ·Σ‖θ‖²`
pub fn loss_value(
    a: &Tensor,
    a_hat: &Tensor,
    x: &Tensor,
    x_hat: &Tensor,
    alpha: f64,
    lambda: f64,
    params: &ParamSet,
) -> Result<f64> {
    if a.shape() != a_hat.shape() || x.shape() != x_hat.shape() || a.rows() != x.rows() {
        return Err(Error::Argument("reconstruction shapes disagree".into()));
    }
    let n = a.rows() as f64;
    let topo: f64 = row_sq_errors(a, a_hat).iter().sum();
    let attr: f64 = row_sq_errors(x, x_hat).iter().sum();
    Ok((1.0 - alpha) * topo / n + alpha * attr / n + lambda * params.squared_norm())
}

/// Topology errors `‖a_i − h_i·Hᵀ‖²` per node without materializing `Â`.
pub fn topology_errors(adjacency: &SparseMatrix, h: &Tensor) -> Result<Vec<f64>> {
    const BLOCK: usize = 512;
    let n = h.rows();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let parts: Result<Vec<Vec<f64>>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + BLOCK).min(n);
            let hb = Tensor::from_vec(
                e - s,
                h.cols(),
                h.data()[s * h.cols()..e * h.cols()].to_vec(),
            )?;
            let ab = gemm(&hb, false, h, true)?;
            Ok((s..e)
                .map(|i| {
                    let row = ab.row(i - s);
                    let mut err: f64 = row.iter().map(|v| v * v).sum();
                    for &j in adjacency.row(i).0 {
                        err += 1.0 - 2.0 * row[j];
                    }
                    err
                })
                .collect())
        })
        .collect();
    Ok(parts?.concat())
}

/// Everything produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: Var,
    pub embeddings: Var,
    pub hidden: Var,
    pub attr_recon: Var,
    pub mask: Vec<usize>,
    /// Per-node topology and attribute errors and their blend.
    pub topo_errors: Vec<f64>,
    pub attr_errors: Vec<f64>,
    pub scores: Vec<f64>,
    pub loss_value: f64,
    pub l_topo: f64,
    pub l_attr: f64,
}

impl Model {
    /// Builds the full computation for one step.
    pub fn forward(
        &self,
        inputs: &GraphInputs,
        neighborhoods: &(impl Neighborhoods + ?Sized),
        mask: MaskSpec,
        topology: TopologyRows,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let n = inputs.n();
        if inputs.attributes.cols() != self.input_dim() {
            return Err(Error::Argument(format!(
                "model expects {} attributes, graph has {}",
                self.input_dim(),
                inputs.attributes.cols()
            )));
        }
        let mut tape = Tape::new();
        let s = self.slots;
        let w1 = tape.param(&self.params, s.enc1);
        let w2 = tape.param(&self.params, s.enc2);
        let w_att = tape.param(&self.params, s.att);
        let w_mp = tape.param(&self.params, s.mp);
        let dec1 = tape.param(&self.params, s.dec1);
        let dec2 = s.dec2.map(|i| tape.param(&self.params, i));
        let x = tape.constant(inputs.attributes.clone());

        let e = encode(&mut tape, x, w1, w2)?;
        let mask = match mask {
            MaskSpec::FromConfig => {
                let anchor = center_anchor(tape.value(e));
                mask_ids(tape.value(e), &anchor, cfg.mask_rate)
            }
            MaskSpec::Fixed(m) => m,
        };
        let h = aggregate(&mut tape, e, neighborhoods, &mask, w_att, w_mp)?;

        let x_hat = match (cfg.decoder, dec2) {
            (AttributeDecoder::GraphConv, _) => {
                let z = tape.sparse_left(Arc::clone(&inputs.norm_adjacency), h)?;
                let z = tape.tanh(z)?;
                tape.matmul(z, dec1)?
            }
            (AttributeDecoder::Mlp, Some(dec2)) => {
                let z = tape.matmul(h, dec1)?;
                let z = tape.tanh(z)?;
                tape.matmul(z, dec2)?
            }
            (AttributeDecoder::Mlp, None) => unreachable!("mlp decoder always has two layers"),
        };
        let attr = tape.sq_dist_rows(x, x_hat)?;
        let attr_errors = tape.value(attr).data().to_vec();
        let attr_sum = tape.sum(attr)?;
        let attr_term = tape.scale(attr_sum, cfg.alpha / n as f64)?;

        let (topo_term, topo_errors) = match topology {
            TopologyRows::All => {
                let a_hat = decode_topology(&mut tape, h)?;
                let dense = inputs.dense_adjacency.clone().ok_or_else(|| {
                    Error::Capacity("dense adjacency unavailable; use topology rows".into())
                })?;
                let a = tape.constant(dense);
                let topo = tape.sq_dist_rows(a, a_hat)?;
                let errors = tape.value(topo).data().to_vec();
                let sum = tape.sum(topo)?;
                (tape.scale(sum, (1.0 - cfg.alpha) / n as f64)?, errors)
            }
            TopologyRows::Subset(rows) => {
                if rows.is_empty() || rows.iter().any(|&r| r >= n) {
                    return Err(Error::Argument(
                        "topology rows must be non-empty and in range".into(),
                    ));
                }
                let b = rows.len();
                let select =
                    SparseMatrix::from_csr(b, n, (0..=b).collect(), rows.clone(), vec![1.0; b])?;
                let hb = tape.sparse_left(Arc::new(select), h)?;
                let a_hat = tape.matmul_nt(hb, h)?;
                let mut dense = Tensor::zeros(b, n);
                for (r, &i) in rows.iter().enumerate() {
                    for &j in inputs.adjacency.row(i).0 {
                        dense.set(r, j, 1.0);
                    }
                }
                let a = tape.constant(dense);
                let topo = tape.sq_dist_rows(a, a_hat)?;
                let sum = tape.sum(topo)?;
                let errors = topology_errors(&inputs.adjacency, tape.value(h))?;
                (tape.scale(sum, (1.0 - cfg.alpha) / b as f64)?, errors)
            }
        };

        let mut loss = tape.add(topo_term, attr_term)?;
        if cfg.lambda > 0.0 {
            let mut leaves = vec![w1, w2, w_att, w_mp, dec1];
            leaves.extend(dec2);
            for p in leaves {
                let sq = tape.mul(p, p)?;
                let s = tape.sum(sq)?;
                let s = tape.scale(s, cfg.lambda)?;
                loss = tape.add(loss, s)?;
            }
        }
        let l_topo = topo_errors.iter().sum::<f64>() / n as f64;
        let l_attr = attr_errors.iter().sum::<f64>() / n as f64;
        let scores = blend(&topo_errors, &attr_errors, cfg.alpha);
        let loss_value = tape.value(loss).item()?;
        Ok(ForwardPass {
            tape,
            loss,
            embeddings: e,
            hidden: h,
            attr_recon: x_hat,
            mask,
            topo_errors,
            attr_errors,
            scores,
            loss_value,
            l_topo,
            l_attr,
        })
    }
}
