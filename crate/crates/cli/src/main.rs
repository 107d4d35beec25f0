use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use diva_core::harness::{
    export_embeddings, paired_ttest, parse_report, report_tsv, summary_tsv, write_embeddings,
    write_text, zero_shot_metrics, Experiment, ExperimentConfig, Method, MetricSet,
    PretrainedModel, RunResult, Variant, ZeroShotPrompts,
};
use diva_core::synthbench::{dump_dataset, generate_scenario};

const PRETRAINED_FILE: &str = "pretrained.diva";

#[derive(Parser)]
#[command(
    name = "diva",
    version,
    about = "Disease-informed adaptation of dual-encoder models on a synthetic benchmark"
)]
struct Cli {
    /// Experiment configuration (`[section]` / `key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this adaptation seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, reports and exports.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain both encoders on the caption corpus and save `pretrained.diva`.
    Pretrain,
    /// Adapt the pretrained model with one method (or `all`) and write a report.
    Adapt {
        /// dicop_dpl, linear_probe, clip_adapter, coop, cocoop or all; defaults to the configured method.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Few-shot fraction of the training split; defaults to the configured fraction.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Score an adapted checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dicop_dpl")]
        method: String,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Run one method over the configured data fractions.
    Sweep {
        #[arg(long, default_value = "dicop_dpl")]
        method: String,
    },
    /// Run the full model and every leave-one-out variant.
    Ablate,
    /// One-tailed paired t-test of two methods in a report, paired by seed.
    Ttest {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "dicop_dpl")]
        ours: String,
        #[arg(long, default_value = "linear_probe")]
        baseline: String,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Write image, prompt and prototype embeddings of a main-method checkpoint as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Destination CSV; defaults to `<out>/embeddings.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the adaptation split as raw f32 images plus `manifest.tsv`.
    DumpDataset {
        /// Destination directory; defaults to `<out>/dataset`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seeds = vec![seed];
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Pretrain => pretrain(config, out),
        Command::Adapt {
            method,
            variant,
            fraction,
        } => {
            let methods = match method.as_deref() {
                Some("all") => Method::ALL.to_vec(),
                Some(m) => vec![Method::parse(m)?],
                None => vec![config.train.method],
            };
            let variant = Variant::parse(&variant)?;
            let fraction = fraction.unwrap_or(config.train.fraction);
            adapt(experiment(config, out)?, out, &methods, variant, fraction)
        }
        Command::Eval {
            checkpoint,
            method,
            variant,
        } => {
            let exp = experiment(config, out)?;
            let model = exp.load_adapted(
                &checkpoint,
                Method::parse(&method)?,
                Variant::parse(&variant)?,
            )?;
            print_metrics(&format!("{method}/{variant}"), &exp.evaluate(&model)?);
            Ok(())
        }
        Command::Sweep { method } => {
            let method = Method::parse(&method)?;
            let exp = experiment(config, out)?;
            let runs = exp.sweep_data_fraction(method, &exp.config.sweep_fractions.clone())?;
            write_runs(out, &format!("sweep_{method}"), &runs)
        }
        Command::Ablate => {
            let exp = experiment(config, out)?;
            let runs = exp.run_ablation()?;
            write_runs(out, "ablation", &runs)
        }
        Command::Ttest {
            report,
            ours,
            baseline,
            variant,
        } => ttest(&report, &ours, &baseline, &variant),
        Command::ExportEmbeddings {
            checkpoint,
            variant,
            output,
        } => {
            let exp = experiment(config, out)?;
            let model =
                exp.load_adapted(&checkpoint, Method::DicopDpl, Variant::parse(&variant)?)?;
            let (rows, pca) = export_embeddings(&exp, &model)?;
            let path = output.unwrap_or_else(|| out.join("embeddings.csv"));
            write_embeddings(&path, &rows)?;
            println!(
                "wrote {} rows to {} (PCA variances {:.6}, {:.6})",
                rows.len(),
                path.display(),
                pca.variances[0],
                pca.variances[1]
            );
            Ok(())
        }
        Command::DumpDataset { dir } => {
            let scenario = generate_scenario(&config.scenario)?;
            let dir = dir.unwrap_or_else(|| out.join("dataset"));
            let n = dump_dataset(&scenario.dataset, &dir)?;
            println!("wrote {n} images and manifest.tsv to {}", dir.display());
            Ok(())
        }
    }
}

fn pretrain(config: ExperimentConfig, out: &Path) -> Result<()> {
    let scenario = generate_scenario(&config.scenario)?;
    log::info!(
        "pretraining on {} caption pairs for {} epochs",
        scenario.pretrain.len(),
        config.pretrain.epochs
    );
    let (model, report) = PretrainedModel::train(&scenario, &config)?;
    let path = out.join(PRETRAINED_FILE);
    model.save(&path, &config)?;
    let curve: String = report
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l:.6}\n", i + 1))
        .collect();
    write_text(
        &out.join("pretrain_loss.tsv"),
        &format!("epoch\tloss\n{curve}"),
    )?;
    println!("saved {}", path.display());
    for (name, kind) in [
        ("class-name", ZeroShotPrompts::ClassName),
        ("attribute", ZeroShotPrompts::Attributes),
    ] {
        print_metrics(
            &format!("zero-shot ({name} prompts)"),
            &zero_shot_metrics(&model, &scenario, kind)?,
        );
    }
    Ok(())
}

fn experiment(config: ExperimentConfig, out: &Path) -> Result<Experiment> {
    let scenario = generate_scenario(&config.scenario)?;
    let pretrained =
        PretrainedModel::load(&out.join(PRETRAINED_FILE), &config, scenario.vocab.len())?;
    Ok(Experiment::new(config, scenario, pretrained)?)
}

fn adapt(
    exp: Experiment,
    out: &Path,
    methods: &[Method],
    variant: Variant,
    fraction: f64,
) -> Result<()> {
    let mut runs = Vec::new();
    for &method in methods {
        let start = std::time::Instant::now();
        let mut seeds = Vec::new();
        for &seed in &exp.config.train.seeds {
            let (result, model) = exp.run_seed(method, variant, fraction, seed)?;
            let path = out
                .join("checkpoints")
                .join(format!("{method}_{variant}_{fraction}_seed{seed}.diva"));
            model.save(&path, &exp.config)?;
            log::info!(
                "{method}/{variant} seed {seed}: weighted F1 {:.4} (epoch {}), saved {}",
                result.test.weighted_f1,
                result.best_epoch,
                path.display()
            );
            seeds.push(result);
        }
        runs.push(RunResult {
            method,
            variant,
            fraction,
            seeds,
            wall_time: start.elapsed(),
        });
    }
    let name = match methods {
        [m] => format!("report_{m}"),
        _ => "report".to_string(),
    };
    write_runs(out, &name, &runs)
}

/// Writes `<name>.tsv` (per seed) and `<name>_summary.tsv`, and prints the summary.
fn write_runs(out: &Path, name: &str, runs: &[RunResult]) -> Result<()> {
    let report = out.join(format!("{name}.tsv"));
    write_text(&report, &report_tsv(runs))?;
    let summary = summary_tsv(runs);
    write_text(&out.join(format!("{name}_summary.tsv")), &summary)?;
    print!("{summary}");
    println!("wrote {}", report.display());
    Ok(())
}

fn ttest(report: &Path, ours: &str, baseline: &str, variant: &str) -> Result<()> {
    let text =
        std::fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let rows = parse_report(&text).with_context(|| format!("parsing {}", report.display()))?;
    let pick = |method: &str| {
        let mut v: Vec<(String, u64, f64)> = rows
            .iter()
            .filter(|r| r.method == method && r.variant == variant)
            .map(|r| (r.fraction.clone(), r.seed, r.weighted_f1))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    };
    let (a, b) = (pick(ours), pick(baseline));
    if a.is_empty() || b.is_empty() {
        bail!("report has no `{variant}` rows for both `{ours}` and `{baseline}`");
    }
    let keys = |v: &[(String, u64, f64)]| v.iter().map(|r| (r.0.clone(), r.1)).collect::<Vec<_>>();
    if keys(&a) != keys(&b) {
        bail!("`{ours}` and `{baseline}` cover different (fraction, seed) pairs; cannot pair them");
    }
    let x: Vec<f64> = a.iter().map(|r| r.2).collect();
    let y: Vec<f64> = b.iter().map(|r| r.2).collect();
    let r = paired_ttest(&x, &y)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("pairs\t{}", x.len());
    println!("mean_{ours}\t{:.6}", mean(&x));
    println!("mean_{baseline}\t{:.6}", mean(&y));
    println!("t\t{:.6}", r.t);
    println!("dof\t{}", r.dof);
    println!("p_one_tailed\t{:.6}", r.p);
    println!("significant\t{}", r.significant);
    println!("degenerate\t{}", r.degenerate);
    Ok(())
}

fn print_metrics(label: &str, m: &MetricSet) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    println!(
        "{label}: accuracy {:.4}, weighted F1 {:.4}, macro AUC {}",
        m.accuracy,
        m.weighted_f1,
        fmt(m.macro_auc)
    );
    for (k, c) in m.per_class.iter().enumerate() {
        println!(
            "  class {k}: support {}, precision {}, recall {}, F1 {}, AUC {}",
            c.support,
            fmt(c.precision),
            fmt(c.recall),
            fmt(c.f1),
            fmt(c.auc)
        );
    }
}
