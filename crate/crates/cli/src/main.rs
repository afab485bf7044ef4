use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rand_gad::graph::{load_graph, read_labels, save_graph, write_attributes_csv};
use rand_gad::inject::{inject, InjectionConfig};
use rand_gad::metrics::{ap, auc};
use rand_gad::optim::save_checkpoint;
use rand_gad::pool::NeighborPool;
use rand_gad::train::{
    read_scores_csv, train_with, version_string, write_history_csv, write_scores_csv, Summary,
    TrainHooks,
};
use rand_gad::{Error, Result};

mod settings;

use settings::{Settings, SweepSpec};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(
    name = "rand-gad",
    version,
    about = "Unsupervised graph anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Inject clique and attribute-swap anomalies into a graph.
    Inject(InjectArgs),
    /// Build the candidate-neighborhood tables and dump them as TSV.
    Pool(PoolArgs),
    /// Train a detector and write scores, history, summary and checkpoint.
    Train(TrainArgs),
    /// Compute AUC and AP of a score file against labels.
    Eval(EvalArgs),
    /// Run one training per value of a swept setting.
    Sweep(TrainArgs),
}

#[derive(Args, Debug)]
struct GraphInput {
    /// Edge list, one "src dst" pair per line.
    #[arg(long)]
    edges: PathBuf,
    /// Attribute matrix (headerless CSV or binary).
    #[arg(long)]
    attrs: PathBuf,
    /// Per-node 0/1 labels.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InjectArgs {
    #[command(flatten)]
    input: GraphInput,
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clique size.
    #[arg(long)]
    p: Option<usize>,
    /// Number of cliques.
    #[arg(long)]
    q: Option<usize>,
    /// Number of attribute-swap anomalies.
    #[arg(long)]
    attr_count: Option<usize>,
    /// Candidates examined per attribute swap.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct PoolFlags {
    /// Attribute neighbors kept per node.
    #[arg(long)]
    knn_k: Option<usize>,
    /// PPR teleport probability.
    #[arg(long)]
    teleport: Option<f64>,
    /// PPR candidates kept per node.
    #[arg(long)]
    ppr_top: Option<usize>,
    /// L1 tolerance of the PPR push.
    #[arg(long)]
    ppr_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[command(flatten)]
    input: GraphInput,
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    pool: PoolFlags,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    input: GraphInput,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=start:end:step`, one run per value.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width.
    #[arg(long)]
    embedding: Option<usize>,
    /// Fraction of nodes masked from message passing.
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Attribute weight in the loss and score; topology gets 1 − alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// L2 weight on all parameters.
    #[arg(long)]
    lambda: Option<f64>,
    /// graph-conv or mlp.
    #[arg(long)]
    decoder: Option<String>,
    /// Sampled adjacency rows per step for the topology loss (0 = all).
    #[arg(long)]
    topology_rows: Option<usize>,
    /// Floor on each strategy probability.
    #[arg(long)]
    p_min: Option<f64>,
    #[arg(long)]
    delta1: Option<f64>,
    #[arg(long)]
    delta2: Option<f64>,
    /// Epochs between bandit updates.
    #[arg(long)]
    interval: Option<usize>,
    /// Epochs before the first bandit update.
    #[arg(long)]
    warmup: Option<usize>,
    /// Sampled neighborhood size.
    #[arg(long)]
    neighborhood: Option<usize>,
    /// Keep strategy probabilities uniform.
    #[arg(long)]
    freeze_bandit: Option<bool>,
    #[command(flatten)]
    pool: PoolFlags,
    /// Parallel child runs in sweep mode.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// `node,score` CSV as written by train.
    #[arg(long)]
    scores: PathBuf,
    /// Per-node 0/1 labels.
    #[arg(long)]
    labels: PathBuf,
    /// Directory for metrics.json and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    inputs: BTreeMap<String, InputDigest>,
    output: String,
    config: BTreeMap<String, String>,
    seed: Option<u64>,
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    inputs: &[(&str, Option<&Path>)],
    config: &BTreeMap<String, String>,
    seed: Option<u64>,
) -> Result<()> {
    let mut digests = BTreeMap::new();
    for (name, path) in inputs {
        if let Some(p) = path {
            digests.insert(name.to_string(), digest(p)?);
        }
    }
    let manifest = RunManifest {
        subcommand: subcommand.into(),
        version: version_string(),
        inputs: digests,
        output: out.display().to_string(),
        config: config.clone(),
        seed,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn graph_inputs(g: &GraphInput) -> Vec<(&'static str, Option<&Path>)> {
    vec![
        ("edges", Some(g.edges.as_path())),
        ("attrs", Some(g.attrs.as_path())),
        ("labels", g.labels.as_deref()),
    ]
}

fn cmd_inject(args: InjectArgs) -> Result<()> {
    let mut s = Settings::inject_defaults();
    if let Some(path) = &args.config {
        s.merge_file(path)?;
    }
    s.set_opt("p", args.p);
    s.set_opt("q", args.q);
    s.set_opt("attr-count", args.attr_count);
    s.set_opt("k", args.k);
    s.set_opt("seed", args.seed);
    let cfg = InjectionConfig {
        clique_size: s.get("p")?,
        clique_count: s.get("q")?,
        attr_count: s.get("attr-count")?,
        candidate_pool_size: s.get("k")?,
        seed: s.get("seed")?,
    };
    let g = load_graph(
        &args.input.edges,
        &args.input.attrs,
        args.input.labels.as_deref(),
    )?;
    let injected = inject(&g, &cfg)?;
    create_dir(&args.out)?;
    save_graph(
        &injected.graph,
        &args.out.join("edges.txt"),
        &args.out.join("attributes.csv"),
        Some(&args.out.join("labels.txt")),
    )?;
    #[derive(Serialize)]
    struct Anomalies<'a> {
        cliques: &'a [Vec<usize>],
        attribute_nodes: &'a [usize],
    }
    let path = args.out.join("anomalies.json");
    let json = serde_json::to_string_pretty(&Anomalies {
        cliques: &injected.cliques,
        attribute_nodes: &injected.attribute_nodes,
    })
    .expect("anomaly lists serialize");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    let count = injected
        .graph
        .labels()
        .map_or(0, |l| l.iter().filter(|&&v| v == 1).count());
    println!("injected {count} anomalies into {}", args.out.display());
    write_manifest(
        &args.out,
        "inject",
        &graph_inputs(&args.input),
        s.map(),
        Some(cfg.seed),
    )
}

fn apply_pool_flags(s: &mut Settings, f: &PoolFlags) {
    s.set_opt("knn-k", f.knn_k);
    s.set_opt("teleport", f.teleport);
    s.set_opt("ppr-top", f.ppr_top);
    s.set_opt("ppr-tol", f.ppr_tol);
}

fn cmd_pool(args: PoolArgs) -> Result<()> {
    let mut s = Settings::pool_defaults();
    if let Some(path) = &args.config {
        s.merge_file(path)?;
    }
    apply_pool_flags(&mut s, &args.pool);
    s.set_opt("seed", args.seed);
    let cfg = s.pool_config()?;
    let seed: u64 = s.get("seed")?;
    let g = load_graph(&args.input.edges, &args.input.attrs, None)?.without_labels();
    let pool = NeighborPool::build(&g, &cfg, seed)?;
    create_dir(&args.out)?;
    let path = args.out.join("pool.tsv");
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    pool.dump_tsv(std::io::BufWriter::new(file))
        .map_err(|e| io_err(&path, e))?;
    println!(
        "{} candidate entries written to {}",
        pool.entries(),
        path.display()
    );
    let inputs = &graph_inputs(&args.input)[..2];
    write_manifest(&args.out, "pool", inputs, s.map(), Some(seed))
}

fn train_settings(args: &TrainArgs) -> Result<Settings> {
    let mut s = Settings::train_defaults();
    if let Some(path) = &args.config {
        s.merge_file(path)?;
    }
    s.set_opt("epochs", args.epochs);
    s.set_opt("lr", args.lr);
    s.set_opt("seed", args.seed);
    s.set_opt("embedding", args.embedding);
    s.set_opt("mask-rate", args.mask_rate);
    s.set_opt("alpha", args.alpha);
    s.set_opt("lambda", args.lambda);
    s.set_opt("decoder", args.decoder.clone());
    s.set_opt("topology-rows", args.topology_rows);
    s.set_opt("p-min", args.p_min);
    s.set_opt("delta1", args.delta1);
    s.set_opt("delta2", args.delta2);
    s.set_opt("interval", args.interval);
    s.set_opt("warmup", args.warmup);
    s.set_opt("neighborhood", args.neighborhood);
    s.set_opt("freeze-bandit", args.freeze_bandit);
    apply_pool_flags(&mut s, &args.pool);
    Ok(s)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let s = train_settings(&args)?;
    if let Some(spec) = &args.sweep {
        return run_sweep(&args, s, &SweepSpec::parse(spec)?);
    }
    let cfg = s.train_config()?;
    let g = load_graph(
        &args.input.edges,
        &args.input.attrs,
        args.input.labels.as_deref(),
    )?;
    create_dir(&args.out)?;
    s.write_file(&args.out.join("config.txt"))?;
    write_manifest(
        &args.out,
        "train",
        &graph_inputs(&args.input),
        s.map(),
        Some(cfg.seed),
    )?;
    let hooks = TrainHooks {
        rescue_dir: Some(args.out.clone()),
    };
    let (model, report) = train_with(&g, &cfg, &hooks)?;
    save_checkpoint(model.params(), &args.out, "params")?;
    write_scores_csv(&report.scores, &args.out.join("scores.csv"))?;
    write_history_csv(&report.history, &args.out.join("history.csv"))?;
    write_attributes_csv(&report.embeddings, &args.out.join("embeddings.csv"))?;
    Summary::new(&cfg, &report).write(&args.out.join("summary.json"))?;
    match (report.auc, report.ap) {
        (Some(a), Some(p)) => println!("AUC\t{a:.6}\nAP\t{p:.6}"),
        _ => println!("trained; scores in {}", args.out.display()),
    }
    Ok(())
}

fn run_sweep(args: &TrainArgs, base: Settings, spec: &SweepSpec) -> Result<()> {
    base.check_key(&spec.key)?;
    let exe = std::env::current_exe().map_err(|e| io_err(Path::new("rand-gad"), e))?;
    create_dir(&args.out)?;
    let jobs = args
        .jobs
        .or_else(settings::thread_cap)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let mut runs = Vec::new();
    for value in spec.values() {
        let mut s = base.clone();
        s.set(&spec.key, value.clone());
        s.train_config()?;
        let dir = args.out.join(format!("{}={value}", spec.key));
        create_dir(&dir)?;
        let cfg_path = dir.join("sweep-config.txt");
        s.write_file(&cfg_path)?;
        let mut cmd = Command::new(&exe);
        cmd.arg("train")
            .arg("--edges")
            .arg(&args.input.edges)
            .arg("--attrs")
            .arg(&args.input.attrs)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&dir)
            .env("RAND_GAD_THREADS", "1");
        if let Some(l) = &args.input.labels {
            cmd.arg("--labels").arg(l);
        }
        runs.push((value, cmd));
    }
    let mut failures = Vec::new();
    for chunk in runs.chunks_mut(jobs) {
        let children: Vec<_> = chunk
            .iter_mut()
            .map(|(v, cmd)| (v.clone(), cmd.spawn()))
            .collect();
        for (v, child) in children {
            let status = child
                .and_then(|mut c| c.wait())
                .map_err(|e| io_err(&exe, e))?;
            if !status.success() {
                failures.push((v, status.code().unwrap_or(1)));
            }
        }
    }
    let mut sweep_cfg = base.map().clone();
    sweep_cfg.insert("sweep".into(), spec.to_string());
    write_manifest(
        &args.out,
        "sweep",
        &graph_inputs(&args.input),
        &sweep_cfg,
        None,
    )?;
    if let Some((v, code)) = failures.first() {
        let msg = format!(
            "{} of {} sweep runs failed (first: {}={v})",
            failures.len(),
            runs.len(),
            spec.key
        );
        return Err(match code {
            2 => Error::Argument(msg),
            4 => Error::Numeric(msg),
            _ => Error::Consistency(msg),
        });
    }
    println!("{} runs written under {}", runs.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scores = read_scores_csv(&args.scores)?;
    let labels = read_labels(&args.labels)?;
    let a = auc(&scores, &labels)?;
    let p = ap(&scores, &labels)?;
    println!("AUC\t{a}\nAP\t{p}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join("metrics.json");
        let json = serde_json::json!({ "auc": a, "ap": p, "n": scores.len() });
        fs::write(&path, format!("{json:#}\n")).map_err(|e| io_err(&path, e))?;
        let inputs = [
            ("scores", Some(args.scores.as_path())),
            ("labels", Some(args.labels.as_path())),
        ];
        write_manifest(out, "eval", &inputs, &BTreeMap::new(), None)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Inject(a) => cmd_inject(a),
        Cmd::Pool(a) => cmd_pool(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => {
            if a.sweep.is_none() {
                return Err(Error::Argument(
                    "sweep needs --sweep key=start:end:step".into(),
                ));
            }
            cmd_train(a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = settings::thread_cap() {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not cap worker threads: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
