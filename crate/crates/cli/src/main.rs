use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use catprune::eval::{calibration_batch, recalibrate_bn};
use catprune::io::load_tensor_batch;
use catprune::orchestrator::{self, IterationConfig, RunOptions, CONFIG_FILE};
use catprune::prune::{fuse_bn, prune_with, FusionMode, PruneRequest};
use catprune::sensitivity::{self, SelectionConfig};
use catprune::{build_graph, cost, export_dot, zoo, Criterion, Error, LayerId, NetworkIR, PruningPlan, Result, SelectionMode};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "catprune", version, about = "Structured filter pruning for CNNs with concat layers")]
struct Cli {
    /// Model manifest (JSON next to a .bin weight blob).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output path: a manifest for `prune` and `zoo`, a directory for `iterate`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Worker threads for the sensitivity sweep.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a per-layer table of shapes, parameters and FLOPs.
    Inspect,
    /// Write the connectivity graph as DOT.
    Graph {
        #[arg(long, default_value = "-")]
        dot: String,
    },
    /// Run the per-layer rate sweep and write one CSV row per (layer, rate).
    Sensitivity(SensitivityArgs),
    /// Remove filters, from a plan file or from per-layer rates.
    Prune(PruneArgs),
    /// Run the iterative prune/score/recover loop.
    Iterate(IterateArgs),
    /// Per-layer cost difference between a base and a pruned model.
    Report {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long, default_value = "-")]
        csv: String,
    },
    /// Write a bundled network.
    Zoo(ZooArgs),
}

#[derive(Args)]
struct SensitivityArgs {
    /// Comma-separated pruning rates.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, default_value = "smallest_l2")]
    criterion: String,
    #[arg(long, default_value = "-")]
    csv: String,
    /// Calibration batch sidecar; random inputs from --seed otherwise.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Exponent in V = x * y^a, used for the V columns.
    #[arg(short, default_value_t = 2.0)]
    a: f64,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long, conflicts_with_all = ["layers", "rate"])]
    plan: Option<PathBuf>,
    /// `all` or comma-separated conv ids.
    #[arg(long, requires = "rate")]
    layers: Option<String>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value = "smallest_l2")]
    criterion: String,
    #[arg(long, default_value = "independent")]
    mode: SelectionMode,
    #[arg(long, default_value = "off")]
    fuse_bn: FusionMode,
}

#[derive(Args)]
struct IterateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue an interrupted run in this directory.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Stop after this many iterations in this invocation.
    #[arg(long)]
    halt_after: Option<usize>,
}

#[derive(Args)]
struct ZooArgs {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(zoo::BUNDLED))]
    name: String,
    /// Input 64x64 and channel widths divided by 16.
    #[arg(long)]
    small: bool,
    /// Refresh batch norm statistics on this many random inputs.
    #[arg(long)]
    calibrate: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Inspect => inspect(&model(cli)?),
        Command::Graph { dot } => {
            let text = export_dot(&build_graph(&model(cli)?)?);
            with_output(dot, |w| w.write_all(text.as_bytes()))
        }
        Command::Sensitivity(args) => sensitivity(cli, args),
        Command::Prune(args) => prune(cli, args),
        Command::Iterate(args) => iterate(cli, args),
        Command::Report { base, pruned, csv } => {
            let diff = cost::diff_reports(
                &cost::cost_report(&catprune::load_model(base)?)?,
                &cost::cost_report(&catprune::load_model(pruned)?)?,
            )?;
            log::info!(
                "params sparsity {:.4}, flops sparsity {:.4}",
                diff.params_sparsity,
                diff.flops_sparsity
            );
            with_output(csv, |w| diff.write_csv(w))
        }
        Command::Zoo(args) => zoo_cmd(cli, args),
    }
}

fn model(cli: &Cli) -> Result<NetworkIR> {
    let path = cli.model.as_ref().ok_or_else(|| Error::Parse("--model is required".into()))?;
    catprune::load_model(path)
}

fn out_path(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Parse("--out is required".into()))
}

/// Runs `f` against stdout for `-`, otherwise against a new file.
fn with_output(target: &str, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let wrap = |e| Error::Io {
        path: PathBuf::from(target),
        source: e,
    };
    if target == "-" {
        let mut out = io::stdout().lock();
        f(&mut out).and_then(|_| out.flush()).map_err(wrap)
    } else {
        let mut out = BufWriter::new(File::create(target).map_err(wrap)?);
        f(&mut out).and_then(|_| out.flush()).map_err(wrap)
    }
}

fn inspect(ir: &NetworkIR) -> Result<()> {
    let shapes = ir.infer_shapes()?;
    let report = cost::cost_report(ir)?;
    let mut out = io::stdout().lock();
    let mut row = |cells: [String; 5]| {
        writeln!(out, "{:>5}  {:<12} {:<16} {:>14} {:>18}", cells[0], cells[1], cells[2], cells[3], cells[4])
    };
    let table = (|| {
        row(["id", "kind", "shape", "params", "flops"].map(String::from))?;
        for l in &report.per_layer {
            let [c, h, w] = shapes[&l.id];
            row([
                l.id.to_string(),
                l.kind.clone(),
                format!("{c}x{h}x{w}"),
                l.params.to_string(),
                l.flops.to_string(),
            ])?;
        }
        row([
            "total".into(),
            String::new(),
            String::new(),
            report.total_params.to_string(),
            report.total_flops.to_string(),
        ])
    })();
    table.map_err(|e| Error::Io {
        path: PathBuf::from("-"),
        source: e,
    })
}

fn sensitivity(cli: &Cli, args: &SensitivityArgs) -> Result<()> {
    let ir = model(cli)?;
    let criterion = Criterion::parse(&args.criterion, cli.seed)?;
    let mut config = SelectionConfig {
        a: args.a,
        ..Default::default()
    };
    if let Some(rates) = &args.rates {
        config.rate_grid = rates.clone();
    }
    config.validate()?;
    let batch = match &args.calib {
        Some(p) => load_tensor_batch(p)?,
        None => calibration_batch(ir.input_shape, args.samples, cli.seed),
    };
    let graph = build_graph(&ir)?;
    let records = sensitivity::sweep(&ir, &graph, criterion, &config, &batch)?;
    with_output(&args.csv, |w| sensitivity::write_csv(&records, config.a, w))
}

fn parse_layers(spec: &str, ir: &NetworkIR) -> Result<Vec<LayerId>> {
    if spec == "all" {
        let heads = sensitivity::default_exclusions(ir);
        return Ok(ir.conv_ids().into_iter().filter(|l| !heads.contains(l)).collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad layer id `{s}` in --layers")))
        })
        .collect()
}

fn prune(cli: &Cli, args: &PruneArgs) -> Result<()> {
    let ir = model(cli)?;
    let out = out_path(cli)?;
    let request = match (&args.plan, &args.layers, args.rate) {
        (Some(p), _, _) => PruneRequest::Plan(PruningPlan::load(p)?),
        (None, Some(spec), Some(rate)) => PruneRequest::Rates {
            layers: parse_layers(spec, &ir)?.into_iter().map(|l| (l, rate)).collect(),
            criterion: Criterion::parse(&args.criterion, cli.seed)?,
            mode: args.mode,
        },
        _ => return Err(Error::Parse("either --plan or --layers with --rate is required".into())),
    };
    let pruned = prune_with(&ir, &request, args.fuse_bn)?;
    catprune::save_model(&pruned.ir, out)?;
    pruned.plan.save(out.with_extension("plan.json"))?;
    let base = match args.fuse_bn {
        FusionMode::Off => ir,
        _ => fuse_bn(&ir)?,
    };
    let diff = cost::diff_reports(&cost::cost_report(&base)?, &cost::cost_report(&pruned.ir)?)?;
    println!(
        "removed {} filters; params {} -> {} ({:.2}%), flops {} -> {} ({:.2}%)",
        pruned.plan.removed_count(),
        diff.base_params,
        diff.params,
        100.0 * diff.params_sparsity,
        diff.base_flops,
        diff.flops,
        100.0 * diff.flops_sparsity
    );
    Ok(())
}

fn iterate(cli: &Cli, args: &IterateArgs) -> Result<()> {
    let opts = RunOptions {
        halt_after: args.halt_after,
    };
    let trace = match &args.resume {
        Some(dir) => {
            let config = IterationConfig::load(dir.join(CONFIG_FILE))?;
            orchestrator::resume(dir, &config, opts)?
        }
        None => {
            let config = match &args.config {
                Some(p) => IterationConfig::load(p)?,
                None => {
                    let mut c = IterationConfig::default();
                    c.calibration.seed = cli.seed;
                    c
                }
            };
            orchestrator::run(&model(cli)?, &config, out_path(cli)?, opts)?
        }
    };
    for it in &trace.iterations {
        println!(
            "iteration {:2}: removed {:4} filters, params sparsity {:.4}, flops sparsity {:.4}, score {:.4}",
            it.index, it.removed_filters, it.params_sparsity, it.flops_sparsity, it.score
        );
    }
    match trace.stop_reason {
        Some(r) => println!("stopped: {r}"),
        None => println!("halted after {} iterations; continue with --resume", trace.iterations.len()),
    }
    Ok(())
}

fn zoo_cmd(cli: &Cli, args: &ZooArgs) -> Result<()> {
    let opts = if args.small {
        zoo::ZooOptions::small(cli.seed)
    } else {
        zoo::ZooOptions {
            seed: cli.seed,
            ..Default::default()
        }
    };
    let mut ir = zoo::by_name(&args.name, opts)?;
    if let Some(n) = args.calibrate {
        ir = recalibrate_bn(&ir, &calibration_batch(ir.input_shape, n, cli.seed))?;
    }
    catprune::save_model(&ir, out_path(cli)?)
}
