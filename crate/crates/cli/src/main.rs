use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use progsiam::cohort::Split;
use progsiam::pipeline::{Pipeline, PipelineConfig, Status};
use progsiam::{Error, ErrorKind, LossKind, ProgressionLevel, Result};

#[derive(Parser)]
#[command(name = "progsiam", version, about = "Siamese progression-level pipeline")]
struct Cli {
    /// JSON pipeline config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and the train/test split.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's working directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Re-run stages whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort CSV and volumes.
    Gen,
    /// Label progression levels of the cohort.
    Label,
    /// Split participants into train/test triplet manifests.
    Split {
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Check the manifests for split-hygiene violations.
    Verify,
    /// Train one encoder per (loss, seed).
    Train(RunArgs),
    /// Score trained encoders with MAE and RMSE.
    Eval(RunArgs),
    /// Export embeddings of every manifest scan.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
    },
    /// Project embeddings to 2-D with t-SNE.
    Tsne {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
        /// Overrides the split's configured perplexity.
        #[arg(long)]
        perplexity: Option<f64>,
        /// Drop the configured under-represented levels first.
        #[arg(long)]
        filter_levels: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Defaults to the config's loss kind.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Comma-separated; defaults to the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Weighted,
    Unweighted,
    Both,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Both,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Test => vec![Split::Test],
            SplitArg::Both => vec![Split::Train, Split::Test],
        }
    }
}

fn runs(p: &Pipeline, args: &RunArgs) -> Vec<(LossKind, u64)> {
    let kinds = match args.loss {
        None => vec![p.cfg.train.loss_kind],
        Some(LossArg::Weighted) => vec![LossKind::Weighted],
        Some(LossArg::Unweighted) => vec![LossKind::Unweighted],
        Some(LossArg::Both) => vec![LossKind::Unweighted, LossKind::Weighted],
    };
    let seeds = args.seeds.clone().unwrap_or_else(|| p.cfg.train.seeds.clone());
    kinds.into_iter().flat_map(|k| seeds.iter().map(move |&s| (k, s))).collect()
}

fn note(status: Status, what: &str) {
    if status == Status::Skipped {
        println!("{what}: outputs exist, skipped (use --force to rebuild)");
    }
}

fn format_table(rows: impl IntoIterator<Item = (ProgressionLevel, usize)>) -> String {
    rows.into_iter().map(|(l, n)| format!("{l}:{n}")).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(w) = cli.workdir {
        cfg.workdir = w;
    }
    if let Cmd::Split { train_fraction: Some(f) } = cli.cmd {
        cfg.split.train_fraction = f;
    }
    if let Cmd::Tsne { filter_levels: true, .. } = cli.cmd {
        cfg.tsne.filter_levels = true;
    }
    let p = Pipeline::new(cfg, cli.force)?;

    match &cli.cmd {
        Cmd::Gen => {
            let (status, table) = p.gen()?;
            note(status, "gen");
            println!("levels {}", format_table(table.0));
        }
        Cmd::Label => {
            let (status, labeled) = p.label()?;
            note(status, "label");
            println!("labeled {} scans", labeled.scans.len());
            println!("levels {}", format_table(progsiam::cohort::distribution_table(&labeled.scans).0));
            for (class, n) in labeled.class_counts() {
                println!("{class}: {n}");
            }
        }
        Cmd::Split { .. } => {
            let (status, train, test) = p.split()?;
            note(status, "split");
            println!("train {} triplets, test {} triplets", train.triplets.len(), test.triplets.len());
        }
        Cmd::Verify => {
            let violations = p.verify()?;
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("violation: {v}");
                }
                return Err(Error::Overlap(format!("{} violation(s)", violations.len())));
            }
            println!("manifests ok");
        }
        Cmd::Train(args) => {
            let (train, test) = p.manifests()?;
            let volumes = p.load_volumes(&[&train, &test])?;
            let results: Vec<_> = runs(&p, args)
                .into_par_iter()
                .map(|(k, s)| {
                    let t0 = std::time::Instant::now();
                    (k, s, p.train_one(k, s, (&train, &test), &volumes, |_| {}), t0.elapsed())
                })
                .collect();
            for (kind, seed, r, took) in results {
                let (status, sum) = r?;
                note(status, &format!("train {kind} seed {seed}"));
                println!(
                    "{kind} seed {seed}: train_loss {:.4} -> {:.4}, test_loss {:.4} ({:.1}s)",
                    sum.initial_train_loss,
                    sum.final_train_loss,
                    sum.final_test_loss,
                    took.as_secs_f64()
                );
            }
        }
        Cmd::Eval(args) => {
            let (train, test) = p.manifests()?;
            let volumes = p.load_volumes(&[&train, &test])?;
            let mut by_kind: Vec<(LossKind, Vec<u64>, Vec<_>)> = Vec::new();
            for (kind, seed) in runs(&p, args) {
                let (status, _, report) = p.eval_one(kind, seed, (&train, &test), &volumes)?;
                note(status, &format!("eval {kind} seed {seed}"));
                println!("{kind} seed {seed}: mae={:.4}, rmse={:.4}", report.mae, report.rmse);
                match by_kind.last_mut() {
                    Some((k, seeds, reports)) if *k == kind => {
                        seeds.push(seed);
                        reports.push(report);
                    }
                    _ => by_kind.push((kind, vec![seed], vec![report])),
                }
            }
            for (kind, seeds, reports) in by_kind {
                let (mae, rmse) = p.write_eval_summary(kind, &seeds, &reports)?;
                println!("{kind} mean over {} run(s): mae={mae:.4}, rmse={rmse:.4}", reports.len());
            }
        }
        Cmd::Embed { run, split } => {
            let (train, test) = p.manifests()?;
            let volumes = p.load_volumes(&[&train, &test])?;
            for (kind, seed) in runs(&p, run) {
                for s in split.splits() {
                    let m = if s == Split::Train { &train } else { &test };
                    let (status, rows) = p.embed_one(kind, seed, m, &volumes)?;
                    note(status, &format!("embed {kind} seed {seed} {s}"));
                    println!("{kind} seed {seed} {s}: {} embeddings", rows.len());
                }
            }
        }
        Cmd::Tsne { run, split, perplexity, .. } => {
            let (train, test) = p.manifests()?;
            let volumes = p.load_volumes(&[&train, &test])?;
            for (kind, seed) in runs(&p, run) {
                for s in split.splits() {
                    let m = if s == Split::Train { &train } else { &test };
                    let (_, rows) = p.embed_one(kind, seed, m, &volumes)?;
                    let cfg = p.tsne_config(s, *perplexity, seed);
                    let (status, n) = p.tsne_one(kind, seed, s, &rows, &cfg)?;
                    note(status, &format!("tsne {kind} seed {seed} {s}"));
                    println!("{kind} seed {seed} {s}: {n} points, perplexity {}", cfg.perplexity);
                }
            }
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Validation => 4,
        ErrorKind::Numeric => 5,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
