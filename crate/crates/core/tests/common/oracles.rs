//! Brute-force reference implementations shared by the module tests and the
//! acceptance run.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_gad::autodiff::{Tape, Var};
use rand_gad::model::{AttributeDecoder, GraphInputs, MaskSpec, Model, ModelConfig, TopologyRows};
use rand_gad::pool::{NeighborPool, Selection, Strategy, StrategyTable};
use rand_gad::rng::{stream, Stream};
use rand_gad::sparse::SparseMatrix;
use rand_gad::{Graph, Result, Tensor};

use super::*;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error between backward gradients of every input and
/// central differences.
pub fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        let analytic = grads.get(*v).unwrap_or(&zero);
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += GRAD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= GRAD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * GRAD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

pub fn rt(rows: usize, cols: usize, seed: u64) -> Tensor {
    random_tensor(rows, cols, &mut rng(seed))
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output entry carries a distinct weight.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(v).shape();
    let w = tape.constant(rt(r, c, seed ^ 0xabc));
    let m = tape.mul(v, w)?;
    tape.sum(m)
}

/// First two rows via a constant selector, keeping the graph in the op set.
pub fn first_two(t: &mut Tape, v: Var) -> Result<Var> {
    let rows = t.value(v).rows();
    let sel = SparseMatrix::from_triplets(2, rows, vec![(0, 0, 1.0), (1, 1, 1.0)])?;
    t.sparse_left(Arc::new(sel), v)
}

/// One gradient check per tensor op, as `(op, worst relative error)`.
pub fn per_op_gradchecks() -> Vec<(&'static str, f64)> {
    let sel = Arc::new(
        SparseMatrix::from_triplets(
            3,
            4,
            vec![(0, 1, 0.5), (0, 3, -2.0), (2, 0, 1.5), (2, 2, 0.25)],
        )
        .unwrap(),
    );
    vec![
        (
            "matmul",
            gradcheck(&[rt(3, 4, 1), rt(4, 2, 2)], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 3)
            }),
        ),
        (
            "matmul_nt",
            gradcheck(&[rt(3, 4, 4), rt(5, 4, 5)], |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                project(t, y, 6)
            }),
        ),
        (
            "matmul_nt self",
            gradcheck(&[rt(4, 3, 7)], |t, v| {
                let y = t.matmul_nt(v[0], v[0])?;
                project(t, y, 8)
            }),
        ),
        (
            "add/mul",
            gradcheck(&[rt(3, 3, 9), rt(3, 3, 10)], |t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                let sq = t.mul(v[0], v[0])?;
                let y = t.add(m, sq)?;
                project(t, y, 11)
            }),
        ),
        (
            "tanh",
            gradcheck(&[rt(4, 3, 12).map(|x| 2.0 * x)], |t, v| {
                let y = t.tanh(v[0])?;
                project(t, y, 13)
            }),
        ),
        (
            "concat_rows/mean_rows",
            gradcheck(&[rt(2, 3, 14), rt(3, 3, 15)], |t, v| {
                let c = t.concat_rows(&[v[0], v[1], v[0]])?;
                let y = project(t, c, 16)?;
                let m = t.mean_rows(c)?;
                let z = project(t, m, 17)?;
                t.add(y, z)
            }),
        ),
        (
            "sq_dist_rows/sum/scale",
            gradcheck(&[rt(4, 3, 18), rt(4, 3, 19)], |t, v| {
                let d = t.sq_dist_rows(v[0], v[1])?;
                let y = project(t, d, 20)?;
                let s = t.sum(d)?;
                let s = t.scale(s, -0.7)?;
                t.add(y, s)
            }),
        ),
        (
            "sparse_left",
            gradcheck(&[rt(4, 2, 21)], move |t, v| {
                let y = t.sparse_left(Arc::clone(&sel), v[0])?;
                project(t, y, 22)
            }),
        ),
    ]
}

/// Random neighborhoods of at most `m` distinct non-self nodes.
pub fn neighborhoods(n: usize, m: usize, r: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(r);
            others.truncate(r.gen_range(0..=m.min(n - 1)));
            others
        })
        .collect()
}

/// Small random graph, model and fixed neighborhoods.
pub fn small_case(seed: u64, decoder: AttributeDecoder) -> (Graph, Model, Vec<Vec<usize>>) {
    let mut r = rng(seed);
    let n = r.gen_range(5..12);
    let d = r.gen_range(2..6);
    let g = random_graph(n, d, 0.3, seed);
    let cfg = ModelConfig {
        embedding: r.gen_range(2..5),
        mask_rate: r.gen_range(0.0..0.4),
        alpha: r.gen_range(0.0..=1.0),
        lambda: if r.gen_bool(0.5) {
            0.0
        } else {
            r.gen_range(0.0..0.1)
        },
        decoder,
        topology_rows: None,
    };
    let model = Model::init(d, cfg, &mut stream(seed, Stream::Init)).unwrap();
    let nb = neighborhoods(n, 4, &mut r);
    (g, model, nb)
}

/// Worst relative error of the full-model loss gradient for random case
/// `seed`, with the mask held fixed across perturbations. Cases rotate over
/// both decoders and the row-subset topology loss.
pub fn model_gradcheck(seed: u64) -> f64 {
    let kind = if seed % 3 == 0 {
        AttributeDecoder::Mlp
    } else {
        AttributeDecoder::GraphConv
    };
    let (g, mut model, nb) = small_case(100 + seed, kind);
    let inputs = GraphInputs::new(&g);
    let rows = if seed % 4 == 1 {
        TopologyRows::Subset(vec![0, 2, 3])
    } else {
        TopologyRows::All
    };
    let first = model
        .forward(&inputs, &nb, MaskSpec::FromConfig, rows.clone())
        .unwrap();
    let mask = first.mask.clone();
    let grads = first.tape.backward(first.loss).unwrap();
    let mut with_grads = model.params().clone();
    grads.accumulate_into(&mut with_grads);

    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        let analytic = with_grads.grad(p).unwrap().clone();
        for e in 0..analytic.len() {
            let orig = model.params().value(p).data()[e];
            let mut loss_at = |v: f64| {
                model.params_mut().value_mut(p).data_mut()[e] = v;
                model
                    .forward(&inputs, &nb, MaskSpec::Fixed(mask.clone()), rows.clone())
                    .unwrap()
                    .loss_value
            };
            let numeric =
                (loss_at(orig + GRAD_STEP) - loss_at(orig - GRAD_STEP)) / (2.0 * GRAD_STEP);
            model.params_mut().value_mut(p).data_mut()[e] = orig;
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// Top-`k` by cosine similarity, ties to the lower index.
pub fn knn_oracle(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows();
    let norm: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    (0..n)
        .map(|i| {
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a / norm[i]) * (b / norm[j]))
                        .sum();
                    (s, j)
                })
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut top: Vec<usize> = sims[..k].iter().map(|e| e.1).collect();
            top.sort_unstable();
            top
        })
        .collect()
}

/// `π = α·e_s + (1−α)·π·D⁻¹A`, iterated from zero.
pub fn ppr_power(g: &Graph, s: usize, alpha: f64, steps: usize) -> Vec<f64> {
    let n = g.n();
    let p = dense_row_stochastic(&dense(g));
    let mut x = vec![0.0; n];
    for _ in 0..steps {
        let mut next = vec![0.0; n];
        next[s] += alpha;
        for u in 0..n {
            for v in 0..n {
                next[v] += (1.0 - alpha) * x[u] * p[u][v];
            }
        }
        x = next;
    }
    x
}

/// Fraction of (anomaly, normal) pairs ranked correctly, ties counting half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                wins += match scores[i].total_cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

pub struct Toy {
    pub pool: NeighborPool,
    pub q: [[[f64; 3]; 3]; 2],
}

/// Three nodes, two strategies with hand-set candidate weights.
pub fn toy() -> Toy {
    let q = [
        [[0.0, 0.7, 0.3], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]],
        [[0.0, 0.0, 1.0], [0.25, 0.0, 0.75], [0.0, 1.0, 0.0]],
    ];
    let tables = q
        .iter()
        .zip([Strategy::OneHop, Strategy::Knn])
        .map(|(rows, s)| {
            let lists = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .filter(|e| *e.1 > 0.0)
                        .map(|(j, &w)| (j, w))
                        .collect()
                })
                .collect();
            StrategyTable::from_lists(s, lists).unwrap()
        })
        .collect();
    Toy {
        pool: NeighborPool::from_tables(tables).unwrap(),
        q,
    }
}

pub fn toy_selection(t: &Toy, p: &[f64], picks: &[Vec<usize>]) -> Selection {
    let with_mix: Vec<_> = picks
        .iter()
        .enumerate()
        .map(|(i, nb)| (nb.clone(), t.pool.mixture(p, i)))
        .collect();
    Selection::from_picks(p, &with_mix).unwrap()
}

/// Reward by direct summation over the toy's dense `Q` and `Φ`.
pub fn toy_reward(t: &Toy, p: &[f64], picks: &[Vec<usize>], scores: &[f64], eps: f64) -> [f64; 2] {
    let mut oracle = [0.0; 2];
    for (i, nb) in picks.iter().enumerate() {
        let logits: Vec<f64> = nb
            .iter()
            .map(|&j| 1.0 / ((scores[i] - scores[j]).abs() + eps))
            .collect();
        let top = logits.iter().copied().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = ex.iter().sum();
        let phi_all: Vec<f64> = (0..3)
            .map(|j| p[0] * t.q[0][i][j] + p[1] * t.q[1][i][j])
            .collect();
        let phi_total: f64 = phi_all.iter().sum();
        for (slot, &j) in nb.iter().enumerate() {
            let c = ex[slot] / z;
            let phi = phi_all[j] / phi_total;
            for k in 0..2 {
                oracle[k] += c * p[k] * t.q[k][i][j] / phi;
            }
        }
    }
    oracle.map(|v| v / picks.len() as f64)
}
