use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use attnlab::attention::{ModelConfig, Variant};
use attnlab::config::RunConfig;
use attnlab::diagnostics::{
    attention_gradcheck, supported_matrix, GradCheckOptions, GradCheckReport, DIFFUSION_CSV_HEADER,
};
use attnlab::harness::{
    compare, crafts_label, diffusion_report, make_task, metrics_csv, mode_label, train,
    ModelWeights,
};
use attnlab::kvcache::{cache_report, reports_csv, reports_table};
use attnlab::report::{render_aligned, sig6};
use attnlab::tensor::{Fault, Tensor};
use attnlab::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Attention-variant laboratory.
#[derive(Parser)]
#[command(name = "attnlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-token KV-cache footprint of a variant.
    CacheReport(CacheArgs),
    /// Finite-difference gradient check of attention layers.
    Gradcheck(GradcheckArgs),
    /// Train one config and write its metrics, summary and weights.
    Train(TrainArgs),
    /// Train several configs on one task and tabulate final accuracy.
    Compare(CompareArgs),
    /// Attention-entropy report from a finished run directory.
    Entropy(EntropyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args)]
struct CacheArgs {
    /// Run or model config; replaces the shape flags.
    #[arg(long, conflicts_with = "variant")]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    variant: Option<String>,
    #[arg(long, default_value_t = 1024)]
    d_model: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    /// Per-head key width (defaults to d_model / heads).
    #[arg(long)]
    d_k: Option<usize>,
    /// Per-head value width (defaults to d_model / heads).
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    d_latent: Option<usize>,
    #[arg(long)]
    d_ctx: Option<usize>,
    #[arg(long, default_value_t = 2)]
    precision_bytes: usize,
    #[arg(long, default_value_t = 1)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, required_unless_present = "all_variants")]
    config: Option<PathBuf>,
    /// Check every supported variant and positional scheme.
    #[arg(long)]
    all_variants: bool,
    #[arg(long, default_value_t = 5)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: break the softmax backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    configs: Vec<PathBuf>,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for summary.csv, diffusion.csv and per-run metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long)]
    run: PathBuf,
}

/// A check ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. }) | Some(Error::NonFiniteLoss { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CacheReport(a) => cmd_cache_report(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Entropy(a) => cmd_entropy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Loads a full run config, or a bare model config.
fn load_model(path: &Path) -> anyhow::Result<ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(run) = serde_json::from_str::<RunConfig>(&text) {
        run.validate()?;
        return Ok(run.model);
    }
    let model: ModelConfig = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| {
            format!(
                "{} is neither a run config nor a model config",
                path.display()
            )
        })?;
    model.validate()?;
    Ok(model)
}

fn load_run(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_variant(a: &CacheArgs, name: &str) -> anyhow::Result<Variant> {
    let need = |v: Option<usize>, flag: &str| {
        v.with_context(|| format!("variant {name} requires --{flag}"))
    };
    Ok(match name.to_ascii_lowercase().replace('-', "_").as_str() {
        "qkv" => Variant::Qkv,
        "qv" => Variant::Qv,
        "mqa" => Variant::Mqa,
        "gqa" => Variant::Gqa {
            groups: need(a.groups, "groups")?,
        },
        "qvvv" => Variant::Qvvv {
            groups: need(a.groups, "groups")?,
        },
        "mla" | "mla_lite" => Variant::MlaLite {
            d_latent: need(a.d_latent, "d-latent")?,
        },
        "vshared_unique_k" => Variant::VsharedUniqueK {
            groups: need(a.groups, "groups")?,
        },
        "qv_ka" => Variant::QvKa {
            d_ctx: need(a.d_ctx, "d-ctx")?,
        },
        other => bail!(
            "unknown variant {other:?}; expected one of {:?}",
            Variant::NAMES
        ),
    })
}

fn cmd_cache_report(a: CacheArgs) -> anyhow::Result<()> {
    let cfg = match (&a.config, &a.variant) {
        (Some(path), _) => load_model(path)?,
        (None, Some(name)) => {
            let mut cfg = ModelConfig::new(a.d_model, a.heads.max(1), parse_variant(&a, name)?);
            cfg.heads = a.heads;
            cfg.d_k = a.d_k.unwrap_or(cfg.d_k);
            cfg.d_v = a.d_v.unwrap_or(cfg.d_v);
            cfg.validate()?;
            cfg
        }
        (None, None) => bail!("either --config or --variant is required"),
    };
    let report = cache_report(&cfg, a.precision_bytes)?;
    let reports = [report];
    match a.format {
        Format::Table => print!("{}", reports_table(&reports, a.seq_len, a.layers, a.batch)),
        Format::Csv => print!("{}", reports_csv(&reports, a.seq_len, a.layers, a.batch)),
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let configs = if a.all_variants {
        supported_matrix()
    } else {
        vec![load_model(
            a.config.as_deref().expect("clap enforces --config"),
        )?]
    };
    let opts = GradCheckOptions {
        seed: a.seed,
        fault: a.inject_fault.then_some(Fault::SoftmaxBackward),
        ..GradCheckOptions::default()
    };
    println!(
        "# seed={} seq_len={} eps={} threshold={}",
        a.seed, a.seq_len, opts.eps, opts.threshold
    );
    let mut failures = 0;
    let mut rows = vec![[
        "variant",
        "positions",
        "max_rel_error",
        "worst_param",
        "result",
    ]
    .map(String::from)];
    for cfg in &configs {
        let report: GradCheckReport = attention_gradcheck(cfg, a.seq_len, &opts)?;
        failures += usize::from(!report.passed);
        rows.push([
            cfg.variant.to_string(),
            cfg.positions.label().to_string(),
            sig6(report.max_rel_error),
            report.worst_param.clone(),
            if report.passed { "pass" } else { "FAIL" }.to_string(),
        ]);
    }
    print!("{}", render_aligned(&rows));
    if failures > 0 {
        return Err(CheckFailed(format!(
            "{failures} of {} gradient checks failed",
            configs.len()
        ))
        .into());
    }
    println!("all {} gradient checks passed", configs.len());
    Ok(())
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let run = load_run(&a.config)?;
    let data = make_task(&run.task)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = train(&run.model, &run.train, &data)?;
    let last = outcome.final_row();
    write(
        &a.out.join("metrics.csv"),
        &metrics_csv(&outcome.rows, run.train.seed, &run.name),
    )?;
    let summary = serde_json::json!({
        "name": run.name,
        "seed": run.train.seed,
        "mode": mode_label(&run.model),
        "crafts": crafts_label(&run.model),
        "steps": last.step,
        "final_train_loss": last.train_loss,
        "final_valid_loss": last.valid_loss,
        "final_valid_acc": last.valid_acc,
        "final_mean_attn_entropy": last.mean_attn_entropy,
        "param_count": outcome.weights.param_count(),
        "attention_params_per_layer": run.model.attention_param_count(),
    });
    write(
        &a.out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    write(
        &a.out.join("weights.json"),
        &serde_json::to_string(&outcome.weights)?,
    )?;
    run.save(a.out.join("config.json"))?;
    println!(
        "{}: step {} valid_acc {} valid_loss {}",
        run.name,
        last.step,
        sig6(last.valid_acc),
        sig6(last.valid_loss)
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> anyhow::Result<()> {
    let runs = a
        .configs
        .iter()
        .map(|p| load_run(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let result = compare(&runs, a.jobs)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write(&out.join("summary.csv"), &result.summary_csv())?;
        let data = make_task(&runs[0].task)?;
        let mut diffusion = format!("# seed={}\n{DIFFUSION_CSV_HEADER}\n", runs[0].train.seed);
        for r in &result.runs {
            let dir = out.join(&r.config.name);
            fs::create_dir_all(&dir)?;
            write(
                &dir.join("metrics.csv"),
                &metrics_csv(&r.outcome.rows, r.config.train.seed, &r.config.name),
            )?;
            let report = diffusion_report(
                &r.config.name,
                r.config.train.steps,
                &r.config.model,
                &r.outcome.weights,
                &data.valid,
            )?;
            diffusion.push_str(&report.csv_rows());
        }
        write(&out.join("diffusion.csv"), &diffusion)?;
    }
    match a.format {
        Format::Table => print!("{}", result.summary_table()),
        Format::Csv => print!("{}", result.summary_csv()),
    }
    Ok(())
}

fn cmd_entropy(a: EntropyArgs) -> anyhow::Result<()> {
    if !a.run.is_dir() {
        return Err(
            Error::Config(format!("run directory {} does not exist", a.run.display())).into(),
        );
    }
    let run = load_run(&a.run.join("config.json"))?;
    let path = a.run.join("weights.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let weights: ModelWeights<Tensor> = serde_json::from_str(&text).map_err(Error::from)?;
    weights.check_shapes(&run.model)?;
    let data = make_task(&run.task)?;
    let report = diffusion_report(
        &run.name,
        run.train.steps,
        &run.model,
        &weights,
        &data.valid,
    )?;
    print!(
        "# seed={}\n{DIFFUSION_CSV_HEADER}\n{}",
        run.train.seed,
        report.csv_rows()
    );
    Ok(())
}
