//! Experiment runner: train, eval, probes, halting sweeps, equivalence
//! stats, and parameter accounting, all driven by flat key=value configs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use stmoe::config::RunConfig;
use stmoe::data::{fixed_val_batches, load_corpus, split, Batch, Corpus};
use stmoe::error::{Error, Result};
use stmoe::model::{
    breakdown_from_config, load_checkpoint_into, read_checkpoint, save_checkpoint, Model,
};
use stmoe::probes;
use stmoe::stats::{all_pairs_report, seed_variance, DEFAULT_RESAMPLES};
use stmoe::train::{eval_on_batches, train_loop};

#[derive(Parser)]
#[command(name = "stmoe", version, about = "Geometric multi-hop MoE experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key=value config file with # comments.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training/init seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $STMOE_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes per-batch losses for the stats pipeline.
    Eval(EvalArgs),
    /// Run a mechanistic probe on a checkpoint.
    Probe(ProbeArgs),
    /// Sweep relative-norm halting thresholds on a checkpoint.
    HaltSweep(HaltSweepArgs),
    /// All-pairs bootstrap/TOST equivalence report over loss files.
    Stats(StatsArgs),
    /// Parameter breakdown for a config, including routing budgets.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus override (default: the checkpoint's corpus key).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Variant label; names the per-batch loss file.
    #[arg(long)]
    label: Option<String>,
    /// Also write per-token hop trajectories to <label>.traces.
    #[arg(long, default_value_t = false)]
    dump_traces: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    Echo,
    Frozen,
    Identity,
    CrossSeed,
    Zeroing,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which probe to run.
    #[arg(value_enum)]
    which: ProbeKind,
    #[arg(long)]
    ckpt: PathBuf,
    /// Second checkpoint (cross-seed probe).
    #[arg(long)]
    ckpt_b: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Top-n vocabulary projections (cross-seed probe).
    #[arg(long, default_value_t = 10)]
    top_n: usize,
}

#[derive(Args)]
struct HaltSweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated thresholds.
    #[arg(long, default_value = "0.0,0.02,0.05,0.10,0.15")]
    eps: String,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Per-variant loss files, one value per line; file stem is the label.
    #[arg(long, num_args = 2.., required = true)]
    losses: Vec<PathBuf>,
    /// Comma-separated equivalence margins.
    #[arg(long, default_value = "0.02,0.03,0.05")]
    margins: String,
    /// Comma-separated block sizes for the robustness section.
    #[arg(long, default_value = "5,10")]
    blocks: String,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    /// Optional per-variant grouping file for seed variance: lines of
    /// `variant value` pairs.
    #[arg(long)]
    seed_table: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    common: CommonArgs,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Probe(args) => cmd_probe(args),
        Command::HaltSweep(args) => cmd_halt_sweep(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Params(args) => cmd_params(args),
    }
}

fn out_dir(common: &CommonArgs) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var("STMOE_OUT").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn apply_overrides(cfg: &mut RunConfig, common: &CommonArgs) -> Result<()> {
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(())
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, common)?;
    Ok(cfg)
}

/// Write an artifact with the resolved config embedded as comment lines.
fn write_report<P: AsRef<Path>>(path: P, cfg: &RunConfig, body: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    for (k, v) in cfg.to_lines() {
        writeln!(f, "# {k}={v}")?;
    }
    for line in body {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn load_model_from(path: &Path) -> Result<(Model<f32>, RunConfig)> {
    let (lines, blocks) = read_checkpoint(path)?;
    let cfg = RunConfig::from_lines(&lines)?;
    let model = load_checkpoint_into(cfg.model.clone(), &blocks)?;
    Ok((model, cfg))
}

fn val_batches_for(cfg: &RunConfig, corpus_path: Option<&Path>) -> Result<Vec<Batch>> {
    let path: PathBuf = match corpus_path {
        Some(p) => p.to_path_buf(),
        None => {
            if cfg.corpus.is_empty() {
                return Err(Error::Config(
                    "no corpus: set the config key or pass --corpus".to_string(),
                ));
            }
            PathBuf::from(&cfg.corpus)
        }
    };
    let corpus = load_corpus(&path)?;
    let (_, val) = split(&corpus, cfg.val_fraction)?;
    fixed_val_batches(&val, cfg.train.batch_size, cfg.model.seq_len, cfg.train.val_batches)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    cfg.validate()?;
    if cfg.corpus.is_empty() {
        return Err(Error::Config("train needs a corpus path (key 'corpus')".to_string()));
    }
    let dir = out_dir(&args.common)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let (train_corpus, val_corpus): (Corpus, Option<Corpus>) = if cfg.val_fraction > 0.0 {
        let (t, v) = split(&corpus, cfg.val_fraction)?;
        (t, Some(v))
    } else {
        (corpus, None)
    };

    write_report(dir.join("resolved.cfg"), &cfg, &[])?;
    let metrics_path = dir.join("metrics.log");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    for (k, v) in cfg.to_lines() {
        writeln!(metrics_file, "# {k}={v}")?;
    }

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let cfg_lines = cfg.to_lines();
    let result = train_loop(
        &mut model,
        &train_corpus,
        val_corpus.as_ref(),
        &cfg.train,
        |rec| {
            let line = rec.to_line();
            println!("{line}");
            let _ = writeln!(metrics_file, "{line}");
        },
        |step, m| {
            let name = if step == cfg.train.steps {
                "model.ckpt".to_string()
            } else {
                format!("model_step{step}.ckpt")
            };
            save_checkpoint(m, &cfg_lines, dir.join(name))
        },
    )?;
    for (step, eval) in &result.val_history {
        println!("val step={} loss={} ppl={}", step, eval.mean_loss, eval.ppl);
    }

    if let Some(val) = &val_corpus {
        let vb = fixed_val_batches(val, cfg.train.batch_size, cfg.model.seq_len, cfg.train.val_batches)?;
        let eval = eval_on_batches(&model, &vb, &Default::default())?;
        let loss_lines: Vec<String> = eval.per_batch.iter().map(|l| l.to_string()).collect();
        let mut f = std::fs::File::create(dir.join("val.losses"))?;
        for line in &loss_lines {
            writeln!(f, "{line}")?;
        }
        println!(
            "final val: loss={} ppl={} batches={}",
            eval.mean_loss,
            eval.ppl,
            eval.per_batch.len()
        );
    }
    println!("checkpoint: {}", dir.join("model.ckpt").display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, mut cfg) = load_model_from(&args.ckpt)?;
    apply_overrides(&mut cfg, &args.common)?;
    let dir = out_dir(&args.common)?;
    let batches = val_batches_for(&cfg, args.corpus.as_deref())?;
    let eval = eval_on_batches(&model, &batches, &Default::default())?;
    let label = args.label.clone().unwrap_or_else(|| {
        args.ckpt.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "eval".to_string())
    });
    let losses_path = dir.join(format!("{label}.losses"));
    let mut f = std::fs::File::create(&losses_path)?;
    for l in &eval.per_batch {
        writeln!(f, "{l}")?;
    }
    write_report(
        dir.join(format!("{label}.eval.txt")),
        &cfg,
        &[
            format!("mean_loss={}", eval.mean_loss),
            format!("ppl={}", eval.ppl),
            format!("batches={}", eval.per_batch.len()),
        ],
    )?;
    if args.dump_traces {
        let mut lines = Vec::new();
        let mut token_base = 0usize;
        for batch in &batches {
            let mut tape = stmoe::numkern::Tape::new();
            let out = model.forward_batch(&mut tape, batch, false, None, &Default::default())?;
            for (layer, traces) in out.traces.iter().enumerate() {
                for line in stmoe::layer::dump_traces(traces) {
                    lines.push(format!("layer={layer} {}", offset_token(&line, token_base)));
                }
            }
            token_base += batch.inputs.len() * model.config.seq_len;
        }
        let traces_path = dir.join(format!("{label}.traces"));
        write_report(&traces_path, &cfg, &lines)?;
        println!("traces: {}", traces_path.display());
    }
    println!("label={label} loss={} ppl={} batches={}", eval.mean_loss, eval.ppl, eval.per_batch.len());
    println!("losses: {}", losses_path.display());
    Ok(())
}

/// Shift the token index in a dump line by the batch offset.
fn offset_token(line: &str, base: usize) -> String {
    match line.strip_prefix("token=").and_then(|rest| rest.split_once(' ')) {
        Some((idx, rest)) => match idx.parse::<usize>() {
            Ok(i) => format!("token={} {rest}", i + base),
            Err(_) => line.to_string(),
        },
        None => line.to_string(),
    }
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let (model, mut cfg) = load_model_from(&args.ckpt)?;
    apply_overrides(&mut cfg, &args.common)?;
    let dir = out_dir(&args.common)?;
    let report = match args.which {
        ProbeKind::Echo => {
            let batches = val_batches_for(&cfg, args.corpus.as_deref())?;
            probes::echo_chamber(&model, &batches)?
        }
        ProbeKind::Frozen => {
            let batches = val_batches_for(&cfg, args.corpus.as_deref())?;
            probes::frozen_routing_eval(&model, &batches)?.report()
        }
        ProbeKind::Identity => identity_report(&model)?,
        ProbeKind::CrossSeed => {
            let other = args.ckpt_b.as_ref().ok_or_else(|| {
                Error::Config("cross-seed probe needs --ckpt-b".to_string())
            })?;
            let (model_b, _) = load_model_from(other)?;
            probes::cross_seed_alignment(&model, &model_b, args.top_n)?.report()
        }
        ProbeKind::Zeroing => {
            let batches = val_batches_for(&cfg, args.corpus.as_deref())?;
            probes::expert_zeroing(&model, &batches)?.report()
        }
    };
    let mut lines = report.to_lines();
    for line in &lines {
        println!("{line}");
    }
    // per-expert records for the identity probe
    if args.which == ProbeKind::Identity {
        lines.extend(per_expert_identity_lines(&model)?);
    }
    write_report(dir.join(format!("probe_{}.txt", report.name)), &cfg, &lines)?;
    Ok(())
}

fn per_expert_identity_lines(model: &Model<f32>) -> Result<Vec<String>> {
    let rank = match model.config.expert {
        stmoe::layer::ExpertKind::Mlp { rank } => rank,
        _ => return Ok(Vec::new()),
    };
    let mut lines = Vec::new();
    for l in 0..model.config.layers {
        let down = model.params.get(&format!("l{l}.moe.w_down")).unwrap().tensor.clone();
        let up = model.params.get(&format!("l{l}.moe.w_up")).unwrap().tensor.clone();
        let pool = stmoe::experts::MlpPool::new(down, up, rank)?;
        let report = stmoe::experts::identity_cosines(&pool)?;
        for (e, cos) in report.per_expert.iter().enumerate() {
            lines.push(format!("layer={l} expert={e} cos={cos}"));
        }
    }
    Ok(lines)
}

/// Identity-falsification summary across layers, as a probe report.
fn identity_report(model: &Model<f32>) -> Result<probes::ProbeReport> {
    use stmoe::experts::identity_cosines;
    let mut per_layer = Vec::new();
    let mut all = Vec::new();
    for l in 0..model.config.layers {
        let down = model
            .params
            .get(&format!("l{l}.moe.w_down"))
            .ok_or_else(|| Error::Unsupported("identity probe needs MLP experts".to_string()))?;
        let up = model.params.get(&format!("l{l}.moe.w_up")).unwrap();
        let rank = match model.config.expert {
            stmoe::layer::ExpertKind::Mlp { rank } => rank,
            _ => return Err(Error::Unsupported("identity probe needs MLP experts".to_string())),
        };
        let pool =
            stmoe::experts::MlpPool::new(down.tensor.clone(), up.tensor.clone(), rank)?;
        let report = identity_cosines(&pool)?;
        per_layer.push((l, report.mean_cos));
        all.extend(report.per_expert);
    }
    let n = all.len();
    let mean = all.iter().sum::<f64>() / n as f64;
    let mean_abs = all.iter().map(|c| c.abs()).sum::<f64>() / n as f64;
    let identity_like = all.iter().filter(|c| c.abs() > 0.8).count() as f64 / n as f64;
    let near_orthogonal = all.iter().filter(|c| c.abs() < 0.2).count() as f64 / n as f64;
    Ok(probes::ProbeReport {
        name: "identity_falsification".to_string(),
        metrics: vec![
            ("mean_cos".to_string(), mean),
            ("mean_abs_cos".to_string(), mean_abs),
            ("frac_identity_like".to_string(), identity_like),
            ("frac_near_orthogonal".to_string(), near_orthogonal),
        ],
        per_layer: Some(per_layer),
        sample_size: n,
    })
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

fn cmd_halt_sweep(args: HaltSweepArgs) -> Result<()> {
    let (model, mut cfg) = load_model_from(&args.ckpt)?;
    apply_overrides(&mut cfg, &args.common)?;
    let dir = out_dir(&args.common)?;
    let eps = parse_f64_list(&args.eps, "eps")?;
    let batches = val_batches_for(&cfg, args.corpus.as_deref())?;
    let rows = probes::halting_sweep(&model, &batches, &eps)?;
    println!("{:>8} {:>10} {:>14} {:>12} {:>14}", "eps", "avg hops", "FLOP savings", "ppl", "delta ppl");
    let mut lines = Vec::new();
    for row in &rows {
        println!(
            "{:>8.4} {:>10.4} {:>13.2}% {:>12.4} {:>13.3}%",
            row.eps, row.avg_hops, row.savings_pct, row.ppl, row.delta_ppl_pct
        );
        lines.push(row.to_line());
    }
    write_report(dir.join("halt_sweep.txt"), &cfg, &lines)?;
    Ok(())
}

fn read_losses(path: &Path) -> Result<(String, Vec<f64>)> {
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .ok_or_else(|| Error::Config(format!("bad loss file path {}", path.display())))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Stats(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|_| Error::Stats(format!("{}: bad value '{line}'", path.display())))?,
        );
    }
    Ok((label, values))
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let dir = out_dir(&args.common)?;
    let margins = parse_f64_list(&args.margins, "margin")?;
    let blocks: Vec<usize> = args
        .blocks
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad block size '{s}'")))
        })
        .collect::<Result<_>>()?;
    let mut variants = Vec::new();
    for path in &args.losses {
        variants.push(read_losses(path)?);
    }
    let seed = args.common.seed.unwrap_or(stmoe::stats::DEFAULT_SEED);
    let report = all_pairs_report(&variants, &margins, &blocks, args.resamples, seed)?;
    print!("{}", report.to_table());
    write_report(dir.join("equiv_report.txt"), &cfg, &report.to_lines())?;
    if let Some(table) = &args.seed_table {
        let text = std::fs::read_to_string(table)
            .map_err(|e| Error::Stats(format!("{}: {e}", table.display())))?;
        let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Stats(format!("bad seed-table line '{line}'")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Stats(format!("bad seed-table value '{value}'")))?;
            match groups.iter_mut().find(|(l, _)| l == label) {
                Some((_, vs)) => vs.push(value),
                None => groups.push((label.to_string(), vec![value])),
            }
        }
        let sv = seed_variance(&groups)?;
        for (label, mean, std) in &sv.per_variant {
            println!("variant={label} mean={mean} std={std}");
        }
        println!(
            "spread_of_means={} avg_std={} spread_to_noise={}",
            sv.spread_of_means,
            sv.avg_std,
            sv.spread_to_noise.map(|r| r.to_string()).unwrap_or_else(|| "undefined".to_string())
        );
    }
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    cfg.model.validate()?;
    let breakdown = breakdown_from_config(&cfg.model);
    println!("{:<12} {:>14}", "component", "parameters");
    for (name, count) in breakdown.rows() {
        println!("{name:<12} {count:>14}");
    }
    let dir = out_dir(&args.common)?;
    let lines: Vec<String> =
        breakdown.rows().iter().map(|(n, c)| format!("{n}={c}")).collect();
    write_report(dir.join("params.txt"), &cfg, &lines)?;
    Ok(())
}
