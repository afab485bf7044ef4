//! Training loop, evaluation, and report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bandit::{reward, BanditConfig, BanditState, CONSISTENCY_EPS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{ap, auc};
use crate::model::{GraphInputs, MaskSpec, Model, ModelConfig, Neighborhoods, TopologyRows};
use crate::optim::{save_checkpoint, Adam, AdamConfig};
use crate::pool::{NeighborPool, PoolConfig, Strategy};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub bandit: BanditConfig,
    pub pool: PoolConfig,
    /// Sampled neighborhood size `M`.
    pub neighborhood: usize,
    /// Keep `p` uniform for the whole run (bandit ablation).
    pub freeze_bandit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 5e-3,
            seed: 0,
            model: ModelConfig::default(),
            bandit: BanditConfig::default(),
            pool: PoolConfig::default(),
            neighborhood: 20,
            freeze_bandit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be positive".into()));
        }
        if self.epochs < self.bandit.warmup {
            return Err(Error::Argument(format!(
                "epochs ({}) must be at least the warm-up ({})",
                self.epochs, self.bandit.warmup
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if self.neighborhood == 0 {
            return Err(Error::Argument("neighborhood size must be positive".into()));
        }
        BanditState::new(Strategy::ALL.len(), self.bandit).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_topo: f64,
    pub l_attr: f64,
    /// Strategy probabilities at the end of the epoch.
    pub probs: Vec<f64>,
    /// Rewards, on update epochs only.
    pub reward: Option<Vec<f64>>,
    /// Diagnostic AUC of this epoch's scores when labels were supplied.
    pub auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    /// Per-node topology and attribute reconstruction errors behind `scores`.
    pub topo_errors: Vec<f64>,
    pub attr_errors: Vec<f64>,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// Masked node ids of the final forward pass.
    pub mask: Vec<usize>,
    /// Aggregated representations `H` of the final forward pass.
    #[serde(skip)]
    pub embeddings: Tensor,
    /// Epoch with the highest diagnostic AUC; never used for selection.
    pub best_auc_epoch: Option<usize>,
}

/// Options that do not affect the result.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    /// Where to write the last good parameters if training diverges.
    pub rescue_dir: Option<PathBuf>,
}

/// Full training run. Labels, if present, are only used for report metrics:
/// the optimization sees a label-stripped copy of the graph.
pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<(Model, ScoreReport)> {
    train_with(g, cfg, &TrainHooks::default())
}

pub fn train_with(
    g: &Graph,
    cfg: &TrainConfig,
    hooks: &TrainHooks,
) -> Result<(Model, ScoreReport)> {
    cfg.validate()?;
    let labels = g.labels().map(<[u8]>::to_vec);
    let unlabeled = g.without_labels();
    let (model, fit) = fit(&unlabeled, cfg, hooks)?;
    let (auc_v, ap_v, history) = match &labels {
        Some(l) if has_both_classes(l) => {
            let mut history = fit.history;
            for (rec, scores) in history.iter_mut().zip(&fit.epoch_scores) {
                rec.auc = Some(auc(scores, l)?);
            }
            (
                Some(auc(&fit.scores, l)?),
                Some(ap(&fit.scores, l)?),
                history,
            )
        }
        _ => (None, None, fit.history),
    };
    let best_auc_epoch = history
        .iter()
        .filter_map(|r| r.auc.map(|a| (r.epoch, a)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(e, _)| e);
    Ok((
        model,
        ScoreReport {
            scores: fit.scores,
            topo_errors: fit.topo_errors,
            attr_errors: fit.attr_errors,
            auc: auc_v,
            ap: ap_v,
            history,
            mask: fit.mask,
            embeddings: fit.embeddings,
            best_auc_epoch,
        },
    ))
}

fn has_both_classes(labels: &[u8]) -> bool {
    labels.iter().any(|&l| l != 0) && labels.iter().any(|&l| l == 0)
}

struct Fit {
    scores: Vec<f64>,
    topo_errors: Vec<f64>,
    attr_errors: Vec<f64>,
    mask: Vec<usize>,
    embeddings: Tensor,
    history: Vec<EpochRecord>,
    epoch_scores: Vec<Vec<f64>>,
}

fn fit(g: &Graph, cfg: &TrainConfig, hooks: &TrainHooks) -> Result<(Model, Fit)> {
    debug_assert!(g.labels().is_none());
    let n = g.n();
    let inputs = GraphInputs::new(g);
    let mut pool = NeighborPool::build(g, &cfg.pool, cfg.seed)?;
    let mut bandit = BanditState::new(pool.strategies(), cfg.bandit)?;
    let mut model = Model::init(g.d(), cfg.model, &mut stream(cfg.seed, Stream::Init))?;
    let mut adam = Adam::new(model.params(), AdamConfig::with_lr(cfg.lr));
    let mut sampling = stream(cfg.seed, Stream::Sampling);
    let topo_rows = cfg.model.topology_rows.filter(|&b| b < n);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut epoch_scores = Vec::with_capacity(cfg.epochs);
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let probs = bandit.probs().to_vec();
        let selection = pool.resample(&probs, cfg.neighborhood, &mut sampling)?;
        let rows = match topo_rows {
            Some(b) => {
                let mut r = rand::seq::index::sample(&mut sampling, n, b).into_vec();
                r.sort_unstable();
                TopologyRows::Subset(r)
            }
            None => TopologyRows::All,
        };
        let last_good = model.params().clone();
        let step = (|| {
            let pass = model.forward(&inputs, selection, MaskSpec::FromConfig, rows)?;
            if !pass.loss_value.is_finite() {
                return Err(Error::Numeric("loss is not finite".into()));
            }
            let grads = pass.tape.backward(pass.loss)?;
            grads.accumulate_into(model.params_mut());
            adam.step(model.params_mut())?;
            Ok(pass)
        })();
        let pass = match step {
            Ok(p) => p,
            Err(Error::Numeric(msg)) => {
                let mut msg = format!("epoch {epoch}: {msg}");
                if let Some(dir) = &hooks.rescue_dir {
                    save_checkpoint(&last_good, dir, "last_good")?;
                    msg.push_str(&format!("; last good parameters in {}", dir.display()));
                }
                return Err(Error::Numeric(msg));
            }
            Err(e) => return Err(e),
        };
        let mut rec_reward = None;
        if !cfg.freeze_bandit && bandit.is_update_epoch(epoch) {
            let r = reward(selection, &pass.scores, CONSISTENCY_EPS)?;
            bandit.update_weights(&r, n)?;
            bandit.update_probs();
            rec_reward = Some(r.0);
        }
        log::debug!(
            "epoch {epoch}: loss {:.6} topo {:.6} attr {:.6} p {:?}",
            pass.loss_value,
            pass.l_topo,
            pass.l_attr,
            bandit.probs()
        );
        history.push(EpochRecord {
            epoch,
            loss: pass.loss_value,
            l_topo: pass.l_topo,
            l_attr: pass.l_attr,
            probs: bandit.probs().to_vec(),
            reward: rec_reward,
            auc: None,
            seconds: started.elapsed().as_secs_f64(),
        });
        epoch_scores.push(pass.scores.clone());
        last = Some(pass);
    }
    let last = last.expect("at least one epoch");
    Ok((
        model,
        Fit {
            scores: last.scores,
            topo_errors: last.topo_errors,
            attr_errors: last.attr_errors,
            embeddings: last.tape.value(last.hidden).clone(),
            mask: last.mask,
            history,
            epoch_scores,
        },
    ))
}

/// Scores a labeled graph with fixed parameters: one forward pass with the
/// configured mask rate over the given neighborhoods.
pub fn evaluate(
    g: &Graph,
    model: &Model,
    neighborhoods: &(impl Neighborhoods + ?Sized),
) -> Result<ScoreReport> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::UndefinedMetric("evaluation needs labels".into()))?;
    let inputs = GraphInputs::new(&g.without_labels());
    let pass = model.forward(
        &inputs,
        neighborhoods,
        MaskSpec::FromConfig,
        TopologyRows::All,
    )?;
    Ok(ScoreReport {
        auc: Some(auc(&pass.scores, labels)?),
        ap: Some(ap(&pass.scores, labels)?),
        scores: pass.scores,
        topo_errors: pass.topo_errors,
        attr_errors: pass.attr_errors,
        history: Vec::new(),
        embeddings: pass.tape.value(pass.hidden).clone(),
        mask: pass.mask,
        best_auc_epoch: None,
    })
}

/// `v<crate version>`.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// `node,score` with shortest round-trip formatting.
pub fn write_scores_csv(scores: &[f64], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "node,score").map_err(io)?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(w, "{i},{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a scores file written by [`write_scores_csv`] (or one score per
/// line without a header).
pub fn read_scores_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("node")) {
            continue;
        }
        let field = line.rsplit(',').next().unwrap_or(line).trim();
        let v: f64 = field.parse().map_err(|_| {
            Error::Format(format!(
                "{}:{}: bad score {field:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(v);
    }
    Ok(out)
}

/// One row per epoch: losses, `p` and `r` per strategy, diagnostic AUC, and
/// wall-clock seconds.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let k = history
        .first()
        .map_or(Strategy::ALL.len(), |r| r.probs.len());
    let names: Vec<&str> = if k == Strategy::ALL.len() {
        Strategy::ALL.iter().map(|s| s.name()).collect()
    } else {
        (0..k).map(|_| "arm").collect()
    };
    let mut header = vec![
        "epoch".to_string(),
        "loss".into(),
        "l_topo".into(),
        "l_attr".into(),
    ];
    header.extend(
        names
            .iter()
            .enumerate()
            .map(|(i, s)| format!("p_{s}{}", suffix(k, i))),
    );
    header.extend(
        names
            .iter()
            .enumerate()
            .map(|(i, s)| format!("r_{s}{}", suffix(k, i))),
    );
    header.push("auc".into());
    header.push("seconds".into());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.loss.to_string(),
            r.l_topo.to_string(),
            r.l_attr.to_string(),
        ];
        row.extend(r.probs.iter().map(f64::to_string));
        match &r.reward {
            Some(rw) => row.extend(rw.iter().map(f64::to_string)),
            None => row.extend((0..k).map(|_| String::new())),
        }
        row.push(r.auc.map(|a| a.to_string()).unwrap_or_default());
        row.push(format!("{:.6}", r.seconds));
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn suffix(k: usize, i: usize) -> String {
    if k == Strategy::ALL.len() {
        String::new()
    } else {
        i.to_string()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub best_auc_epoch: Option<usize>,
    pub final_probs: Vec<f64>,
    pub config: TrainConfig,
}

impl Summary {
    pub fn new(cfg: &TrainConfig, report: &ScoreReport) -> Summary {
        Summary {
            version: version_string(),
            seed: cfg.seed,
            auc: report.auc,
            ap: report.ap,
            best_auc_epoch: report.best_auc_epoch,
            final_probs: report
                .history
                .last()
                .map(|r| r.probs.clone())
                .unwrap_or_default(),
            config: cfg.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("summary serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_graph() -> Graph {
        let attrs = Tensor::from_vec(
            6,
            2,
            vec![1.0, 0.0, 0.9, 0.1, 1.0, 0.2, 0.0, 1.0, 0.1, 0.9, 5.0, -3.0],
        )
        .unwrap();
        let edges = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (2, 3)];
        Graph::from_edges(attrs, &edges, Some(vec![0, 0, 0, 0, 0, 1]))
            .unwrap()
            .0
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            model: ModelConfig {
                embedding: 4,
                ..ModelConfig::default()
            },
            neighborhood: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_only_keeps_uniform_probs() {
        let (_, report) = train(&small_graph(), &cfg(3)).unwrap();
        assert_eq!(report.history.len(), 3);
        for r in &report.history {
            assert_eq!(r.probs, vec![0.25; 4]);
            assert!(r.reward.is_none());
        }
    }

    #[test]
    fn epochs_below_warmup_rejected() {
        assert!(matches!(
            train(&small_graph(), &cfg(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn same_seed_same_scores() {
        let a = train(&small_graph(), &cfg(8)).unwrap().1;
        let b = train(&small_graph(), &cfg(8)).unwrap().1;
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.scores), bits(&b.scores));
        assert!(a.history.iter().any(|r| r.reward.is_some()));
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = vec![0.1, 1.0 / 3.0, 2e-300];
        write_scores_csv(&s, &p).unwrap();
        assert_eq!(read_scores_csv(&p).unwrap(), s);
    }
}
