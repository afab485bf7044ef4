//! Attribute-only MLP autoencoder, kept as a sanity reference: it ignores
//! the graph and scores nodes by attribute reconstruction error.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::Result;
use crate::graph::Graph;
use crate::optim::{xavier_init, Adam, AdamConfig, ParamSet};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden: 64,
            epochs: 100,
            lr: 5e-3,
            seed: 0,
        }
    }
}

/// Trains `x̂ = tanh(x·W1)·W2` and returns `‖x_i − x̂_i‖²` per node.
pub fn autoencoder_scores(g: &Graph, cfg: &AutoencoderConfig) -> Result<Vec<f64>> {
    let mut rng = stream(cfg.seed, Stream::Init);
    let mut params = ParamSet::new();
    params.push("ae.w1", xavier_init(g.d(), cfg.hidden, &mut rng));
    params.push("ae.w2", xavier_init(cfg.hidden, g.d(), &mut rng));
    let mut adam = Adam::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut errors = Vec::new();
    for epoch in 0..=cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.constant(g.attributes().clone());
        let w1 = tape.param(&params, 0);
        let w2 = tape.param(&params, 1);
        let z = tape.matmul(x, w1)?;
        let z = tape.tanh(z)?;
        let x_hat = tape.matmul(z, w2)?;
        let err = tape.sq_dist_rows(x, x_hat)?;
        errors = tape.value(err).data().to_vec();
        if epoch == cfg.epochs {
            break;
        }
        let total = tape.sum(err)?;
        let loss = tape.scale(total, 1.0 / g.n() as f64)?;
        tape.backward(loss)?.accumulate_into(&mut params);
        adam.step(&mut params)?;
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn outlier_row_scores_highest() {
        let mut rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![0.1 * (i % 3) as f64, 0.2, -0.1])
            .collect();
        rows[7] = vec![4.0, -4.0, 4.0];
        let g = Graph::from_edges(Tensor::from_rows(&rows).unwrap(), &[], None)
            .unwrap()
            .0;
        let cfg = AutoencoderConfig {
            hidden: 2,
            epochs: 50,
            ..AutoencoderConfig::default()
        };
        let s = autoencoder_scores(&g, &cfg).unwrap();
        let top = (0..30).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(top, 7);
    }
}
