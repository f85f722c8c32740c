use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jobgraph::diagnostics::{tiny_gradient_check, GradCheckOptions};
use jobgraph::eval::{self, SplitPart};
use jobgraph::hetgraph::{load_graph, write_graph, Metapath, NodeId, RelationType};
use jobgraph::prompts::{self, PromptInstance};
use jobgraph::synth::generate_graph;
use jobgraph::train::{
    load_checkpoint, save_checkpoint, Checkpoint, EpochStats, RunConfig, Setup, TaskKind, Trainer,
};

mod plot;

#[derive(Parser)]
#[command(name = "jobgraph", version, about = "Graph-prompted language model for member/job graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph and its cluster sidecar.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth clusters (defaults to `<out>.clusters.json`).
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Stage-0 text pretraining followed by the warmup epochs.
    Pretrain(TrainArgs),
    /// The full schedule, optionally continuing from a checkpoint.
    Finetune(TrainArgs),
    /// Metrics of a checkpoint on validation or test splits.
    Evaluate {
        #[command(flatten)]
        common: ModelArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the report JSON here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Averaged prediction for one node.
    Predict {
        #[command(flatten)]
        common: ModelArgs,
        #[arg(long)]
        node: usize,
        /// Ranking length for link tasks.
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Write node embedding rows as TSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter class on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 64)]
        precision: u32,
        #[arg(long, default_value_t = 3e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print prompt instances as JSON lines.
    DumpPrompts {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        node: usize,
        #[arg(long, value_enum, default_value = "feature")]
        kind: PromptArg,
        /// Metapath for structural prompts, e.g. `UIU`.
        #[arg(long, default_value = "UI")]
        metapath: String,
        /// Task for node-task and link prompts.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; `--config` is then ignored, `--set` still applies.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Append epoch statistics as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write an SVG of per-epoch losses.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Task to evaluate; defaults to the first trained task.
    #[arg(long)]
    task: Option<String>,
    /// Ego graphs averaged per prediction.
    #[arg(long)]
    n_g: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptArg {
    Feature,
    FirstOrder,
    HigherOrder,
    NodeTask,
    Link,
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Res<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or("empty override key")?;
    let mut cur = root;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("{p} in {key} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_overrides(mut table: toml::Table, args: &ConfigArgs) -> Res<RunConfig> {
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("override {o:?} lacks '='"))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(s) = args.seed {
        set_path(&mut table, "train.seed", toml::Value::Integer(s as i64))?;
    }
    let cfg: RunConfig = table.try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_config(args: &ConfigArgs) -> Res<RunConfig> {
    let table = match &args.config {
        Some(p) => fs::read_to_string(p)?.parse::<toml::Table>()?,
        None => toml::Table::new(),
    };
    apply_overrides(table, args)
}

fn config_table(cfg: &RunConfig) -> Res<toml::Table> {
    Ok(toml::Table::try_from(cfg)?)
}

fn gen_data(cfg: &RunConfig, out: &Path, clusters: Option<&Path>) -> Res<()> {
    let s = generate_graph(&cfg.synth)?;
    write_graph(&s.graph, BufWriter::new(File::create(out)?))?;
    let side = clusters.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".clusters.json");
        PathBuf::from(p)
    });
    fs::write(&side, serde_json::to_vec_pretty(&s.clusters)?)?;
    eprintln!(
        "wrote {} members, {} jobs to {}",
        s.graph.n_members(),
        s.graph.n_jobs(),
        out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs, full_schedule: bool) -> Res<()> {
    let ck_init: Option<Checkpoint<f32>> = args.init.as_deref().map(load_checkpoint).transpose()?;
    let cfg = match &ck_init {
        Some(ck) => apply_overrides(config_table(&ck.config)?, &args.cfg)?,
        None => load_config(&args.cfg)?,
    };
    let graph = load_graph(&args.graph)?;
    let setup = Setup::new(graph, &cfg)?;
    let mut trainer = match ck_init {
        Some(mut ck) => {
            ck.config = cfg.clone();
            Trainer::from_checkpoint(&setup, ck)?
        }
        None => Trainer::<f32>::new(&setup, cfg.clone())?,
    };
    if let Some(p) = &args.log {
        let f = fs::OpenOptions::new().create(true).append(true).open(p)?;
        trainer.set_log(Box::new(BufWriter::new(f)));
    }
    trainer.stage0()?;
    let stop = if full_schedule {
        cfg.train.epochs
    } else {
        cfg.train.warmup_epochs
    };
    while trainer.state.epoch < stop {
        let s = trainer.run_epoch()?;
        eprintln!("{}", summary(&s));
    }
    save_checkpoint(&trainer.checkpoint(), &args.out)?;
    if let Some(p) = &args.plot {
        fs::write(p, plot::loss_svg(&trainer.history))?;
    }
    eprintln!("saved {}", args.out.display());
    Ok(())
}

fn summary(s: &EpochStats) -> String {
    let parts: Vec<String> = s
        .objectives
        .iter()
        .map(|(k, o)| format!("{k} {:.4} ({} used, {} skipped)", o.mean_loss, o.instances, o.skipped))
        .collect();
    format!("epoch {} {:?}: {}", s.epoch, s.phase, parts.join(", "))
}

struct Loaded {
    ck: Checkpoint<f32>,
    setup: Setup,
    task: TaskKind,
}

fn load_model(m: &ModelArgs) -> Res<Loaded> {
    let mut ck: Checkpoint<f32> = load_checkpoint(&m.checkpoint)?;
    if let Some(n) = m.n_g {
        ck.config.eval.n_g = n;
        ck.config.eval.n_g_valid = n;
    }
    if let Some(s) = m.seed {
        ck.config.eval.seed = s;
    }
    let graph = load_graph(&m.graph)?;
    let setup = Setup::new(graph, &ck.config)?;
    if setup.vocab != ck.vocab {
        return Err("graph does not match the checkpoint vocabulary".into());
    }
    let task = match &m.task {
        Some(t) => t.parse::<TaskKind>()?,
        None => ck.config.train.tasks.first().cloned().ok_or("checkpoint has no tasks")?,
    };
    Ok(Loaded { ck, setup, task })
}

fn evaluate(m: &ModelArgs, split: SplitArg, out: Option<&Path>) -> Res<()> {
    let l = load_model(m)?;
    let part = match split {
        SplitArg::Valid => SplitPart::Valid,
        SplitArg::Test => SplitPart::Test,
    };
    let report = eval::evaluate(&l.ck.model, &l.setup, &l.task, part, &l.ck.config)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = out {
        fs::write(p, json)?;
    }
    Ok(())
}

fn predict(m: &ModelArgs, node: usize, top: usize) -> Res<()> {
    let l = load_model(m)?;
    let k = NodeId(node);
    let c = &l.ck.config.eval;
    let value = match &l.task {
        TaskKind::Node(name) => {
            let (class, probs) = eval::predict_node(&l.ck.model, &l.setup, k, name, c.n_g, c.seed)?;
            serde_json::json!({ "node": node, "task": name, "class": class, "probabilities": probs })
        }
        TaskKind::Link(rel) => {
            let ranked = eval::predict_links(&l.ck.model, &l.setup, k, *rel, top, c.n_g, c.seed, &[])?;
            serde_json::json!({
                "node": node,
                "task": l.task.to_string(),
                "ranked": ranked.iter().map(|n| n.0).collect::<Vec<_>>(),
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn export(checkpoint: &Path, out: &Path) -> Res<()> {
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let l = &ck.vocab.layout;
    // types and ids only depend on the layout sizes
    let g = jobgraph::hetgraph::GraphBuilder::new(l.n_members, l.n_jobs).build()?;
    eval::export_embeddings(&ck.model, &g, BufWriter::new(File::create(out)?))?;
    eprintln!("wrote {} rows to {}", g.n_nodes(), out.display());
    Ok(())
}

fn grad_check(precision: u32, epsilon: f64, per_tensor: usize, tolerance: f64) -> Res<bool> {
    if precision != 64 {
        return Err("gradient checks run in 64-bit precision only".into());
    }
    let r = tiny_gradient_check(GradCheckOptions {
        epsilon,
        per_tensor,
        seed: 0,
    })?;
    let mut by_group: std::collections::BTreeMap<String, f64> = Default::default();
    for t in &r.tensors {
        let e = by_group.entry(format!("{:?}", t.group)).or_insert(0.0);
        *e = e.max(t.max_rel_error);
    }
    for (g, e) in &by_group {
        println!("{g:<16} max relative error {e:.3e}");
    }
    if let Some(w) = r.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)) {
        println!("worst tensor {} (absolute error {:.3e})", w.name, w.max_abs_error);
    }
    println!("max relative error {:.3e}", r.max_rel_error);
    Ok(r.max_rel_error < tolerance)
}

#[allow(clippy::too_many_arguments)]
fn dump_prompts(
    cfg: &ConfigArgs,
    graph: &Path,
    node: usize,
    kind: PromptArg,
    metapath: &str,
    task: Option<&str>,
    count: usize,
) -> Res<()> {
    let mut cfg = load_config(cfg)?;
    if let Some(t) = task {
        let t: TaskKind = t.parse()?;
        if !cfg.train.tasks.contains(&t) {
            cfg.train.tasks.push(t);
        }
    }
    let setup = Setup::new(load_graph(graph)?, &cfg)?;
    let g = &setup.train_graph;
    let k = NodeId(node);
    g.check(k)?;
    let b = setup.builder(g);
    let out = std::io::stdout();
    let mut out = out.lock();
    for i in 0..count {
        let seed = jobgraph::seed::derive(cfg.train.seed, node as u64, i as u64, "dump");
        let ego = setup.sample_ego(g, k, seed)?;
        let built: Result<PromptInstance, prompts::PromptError> = match kind {
            PromptArg::Feature => {
                let f = setup.feature_of(k).ok_or("node has no feature text")?;
                b.feature(&ego, k, f)
            }
            PromptArg::FirstOrder => b.first_order(&ego, k, &Metapath::parse(metapath)?, seed),
            PromptArg::HigherOrder => b.higher_order(&ego, k, &Metapath::parse(metapath)?, seed),
            PromptArg::NodeTask => {
                let name = task.ok_or("--task is required for node-task prompts")?;
                let (_, spec) = setup.task_spec(name).ok_or("unknown node task")?;
                b.node_task(&ego, k, spec, &setup.task_features)
            }
            PromptArg::Link => {
                let rel = match task.map(str::parse::<TaskKind>).transpose()? {
                    Some(TaskKind::Link(r)) => r,
                    _ => RelationType::MemberJob,
                };
                b.link_task(&ego, k, rel, seed)
            }
        };
        match built {
            Ok(inst) => {
                serde_json::to_writer(&mut out, &prompts::dump(&inst, g, &setup.vocab))?;
                writeln!(out)?;
            }
            Err(e) if e.is_skip() => eprintln!("instance {i} skipped: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Res<ExitCode> {
    match cli.command {
        Command::GenData { cfg, out, clusters } => gen_data(&load_config(&cfg)?, &out, clusters.as_deref())?,
        Command::Pretrain(a) => train(&a, false)?,
        Command::Finetune(a) => train(&a, true)?,
        Command::Evaluate { common, split, out } => evaluate(&common, split, out.as_deref())?,
        Command::Predict { common, node, top } => predict(&common, node, top)?,
        Command::ExportEmbeddings { checkpoint, out } => export(&checkpoint, &out)?,
        Command::GradCheck {
            precision,
            epsilon,
            per_tensor,
            tolerance,
        } => {
            if !grad_check(precision, epsilon, per_tensor, tolerance)? {
                eprintln!("gradient check failed: error at or above {tolerance:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpPrompts {
            cfg,
            graph,
            node,
            kind,
            metapath,
            task,
            count,
        } => dump_prompts(&cfg, &graph, node, kind, &metapath, task.as_deref(), count)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
