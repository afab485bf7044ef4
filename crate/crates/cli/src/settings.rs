//! Flat `key=value` run settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_gad::bandit::BanditConfig;
use rand_gad::inject::InjectionConfig;
use rand_gad::model::{AttributeDecoder, ModelConfig};
use rand_gad::pool::PoolConfig;
use rand_gad::train::TrainConfig;
use rand_gad::{Error, Result};

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn pool_pairs() -> Vec<(&'static str, String)> {
    let p = PoolConfig::default();
    vec![
        ("knn-k", p.knn_k.to_string()),
        ("teleport", p.teleport.to_string()),
        ("ppr-top", p.ppr_top.to_string()),
        ("ppr-tol", p.ppr_tol.to_string()),
    ]
}

impl Settings {
    fn from_pairs(pairs: Vec<(&'static str, String)>) -> Self {
        Settings {
            values: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn inject_defaults() -> Self {
        let c = InjectionConfig::default();
        Self::from_pairs(vec![
            ("p", c.clique_size.to_string()),
            ("q", c.clique_count.to_string()),
            ("attr-count", c.attr_count.to_string()),
            ("k", c.candidate_pool_size.to_string()),
            ("seed", c.seed.to_string()),
        ])
    }

    pub fn pool_defaults() -> Self {
        let mut pairs = pool_pairs();
        pairs.push(("seed", "0".into()));
        Self::from_pairs(pairs)
    }

    pub fn train_defaults() -> Self {
        let t = TrainConfig::default();
        let m = &t.model;
        let b = &t.bandit;
        let mut pairs = vec![
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("seed", t.seed.to_string()),
            ("embedding", m.embedding.to_string()),
            ("mask-rate", m.mask_rate.to_string()),
            ("alpha", m.alpha.to_string()),
            ("lambda", m.lambda.to_string()),
            ("decoder", decoder_name(m.decoder).into()),
            ("topology-rows", m.topology_rows.unwrap_or(0).to_string()),
            ("p-min", b.p_min.to_string()),
            ("delta1", b.delta1.to_string()),
            ("delta2", b.delta2.to_string()),
            ("interval", b.interval.to_string()),
            ("warmup", b.warmup.to_string()),
            ("neighborhood", t.neighborhood.to_string()),
            ("freeze-bandit", t.freeze_bandit.to_string()),
        ];
        pairs.extend(pool_pairs());
        Self::from_pairs(pairs)
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn check_key(&self, key: &str) -> Result<()> {
        if self.values.contains_key(key) {
            Ok(())
        } else {
            let known: Vec<&str> = self.values.keys().map(String::as_str).collect();
            Err(Error::Argument(format!(
                "unknown setting {key:?} (known: {})",
                known.join(", ")
            )))
        }
    }

    /// Overwrites a known key; callers check the key first.
    pub fn set(&mut self, key: &str, value: String) {
        debug_assert!(self.values.contains_key(key), "{key}");
        self.values.insert(key.to_string(), value);
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v.to_string());
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::Argument(format!("missing setting {key:?}")))?;
        raw.parse()
            .map_err(|e| Error::Argument(format!("setting {key}={raw}: {e}")))
    }

    /// Reads `key=value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!("config line {}: expected key=value", no + 1))
            })?;
            let key = k.trim().replace('_', "-");
            self.check_key(&key)?;
            self.set(&key, v.trim().to_string());
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.merge_str(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let text: String = self
            .values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn pool_config(&self) -> Result<PoolConfig> {
        Ok(PoolConfig {
            knn_k: self.get("knn-k")?,
            teleport: self.get("teleport")?,
            ppr_top: self.get("ppr-top")?,
            ppr_tol: self.get("ppr-tol")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let rows: usize = self.get("topology-rows")?;
        let cfg = TrainConfig {
            epochs: self.get("epochs")?,
            lr: self.get("lr")?,
            seed: self.get("seed")?,
            model: ModelConfig {
                embedding: self.get("embedding")?,
                mask_rate: self.get("mask-rate")?,
                alpha: self.get("alpha")?,
                lambda: self.get("lambda")?,
                decoder: self.get("decoder")?,
                topology_rows: (rows > 0).then_some(rows),
            },
            bandit: BanditConfig {
                p_min: self.get("p-min")?,
                delta1: self.get("delta1")?,
                delta2: self.get("delta2")?,
                interval: self.get("interval")?,
                warmup: self.get("warmup")?,
            },
            pool: self.pool_config()?,
            neighborhood: self.get("neighborhood")?,
            freeze_bandit: self.get("freeze-bandit")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn decoder_name(d: AttributeDecoder) -> &'static str {
    match d {
        AttributeDecoder::GraphConv => "graph-conv",
        AttributeDecoder::Mlp => "mlp",
    }
}

/// Worker-thread cap from `RAND_GAD_THREADS`.
pub fn thread_cap() -> Option<usize> {
    std::env::var("RAND_GAD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// `key=start:end:step`, inclusive of `end` when it lies on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub key: String,
    start: f64,
    end: f64,
    step: f64,
    decimals: usize,
}

fn decimals(s: &str) -> usize {
    let mantissa = s.split(['e', 'E']).next().unwrap_or(s);
    mantissa.split_once('.').map_or(0, |(_, f)| f.len())
}

impl SweepSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("sweep {spec:?}: expected key=start:end:step"));
        let (key, range) = spec.split_once('=').ok_or_else(bad)?;
        let parts: Vec<&str> = range.split(':').map(str::trim).collect();
        if parts.len() != 3 || parts.iter().any(|p| p.contains(['e', 'E'])) {
            return Err(bad());
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || !(end >= start) || !start.is_finite() || !end.is_finite() {
            return Err(Error::Argument(format!(
                "sweep {spec:?}: need step > 0 and end >= start"
            )));
        }
        Ok(SweepSpec {
            key: key.trim().replace('_', "-"),
            start,
            end,
            step,
            decimals: parts.iter().map(|p| decimals(p)).max().unwrap_or(0),
        })
    }

    /// Grid values, printed at the precision of the inputs so that
    /// `0:1:0.1` yields `0.3` rather than `0.30000000000000004`.
    pub fn values(&self) -> Vec<String> {
        let count = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| format!("{:.*}", self.decimals, self.start + i as f64 * self.step))
            .collect()
    }
}

impl fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}:{}:{}", self.key, self.start, self.end, self.step)
    }
}
