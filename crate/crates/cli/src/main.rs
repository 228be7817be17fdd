use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clsd_core::corpus::{self, Corpus, GenConfig};
use clsd_core::metrics;
use clsd_core::model::Backbone;
use clsd_core::objective::{LossConfig, Variant};
use clsd_core::runner::{
    self, parse_grid_file, run_grid, DataSource, ExperimentGrid, GridResult, RunSettings, DEFAULT_ALPHAS,
    DEFAULT_EPOCHS, DEFAULT_SEEDS,
};
use clsd_core::trainer::{load_checkpoint, TrainConfig, DEFAULT_LEARNING_RATE};
use clsd_core::Exec;

#[derive(Parser)]
#[command(
    name = "clsd",
    version,
    about = "Click-confidence self-distillation lab for CTR models"
)]
struct Cli {
    /// Run every batch sequentially instead of fanning out over threads.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus pair.
    GenData(GenArgs),
    /// Train one model; writes report.csv and model.ckpt.
    Train(TrainArgs),
    /// Print test AUC and log-loss of a checkpoint.
    Eval(EvalArgs),
    /// Run an experiment grid described by a key=value file.
    Ablate(AblateArgs),
    /// Sweep alpha for the clsd objective.
    SweepAlpha(SweepArgs),
    /// Per-group CTR and mean predictions of a checkpoint.
    AnalyzeGroups(AnalyzeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = GenConfig::default().users)]
    users: u32,
    #[arg(long, default_value_t = GenConfig::default().items)]
    items: u32,
    #[arg(long, default_value_t = GenConfig::default().groups)]
    groups: u32,
    /// Train records.
    #[arg(long, default_value_t = GenConfig::default().records)]
    records: usize,
    #[arg(long, default_value_t = GenConfig::default().test_records)]
    test_records: usize,
    #[arg(long, default_value_t = GenConfig::default().clickbait_rate)]
    clickbait_rate: f64,
    #[arg(long, default_value_t = GenConfig::default().group_ctr_slope)]
    group_ctr_slope: f64,
    #[arg(long, default_value_t = GenConfig::default().seed)]
    seed: u64,
    /// Output directory; receives train.clsd and test.clsd.
    #[arg(long)]
    out: PathBuf,
}

/// A corpus directory with train.clsd and test.clsd, or a train file plus
/// `--test`.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Result<(PathBuf, PathBuf)> {
        if self.corpus.is_dir() {
            Ok((self.corpus.join("train.clsd"), self.corpus.join("test.clsd")))
        } else {
            let test = self
                .test
                .clone()
                .context("--test is required when --corpus is a file")?;
            Ok((self.corpus.clone(), test))
        }
    }

    fn load(&self) -> Result<(Corpus, Corpus)> {
        let (train, test) = self.paths()?;
        Ok((read(&train)?, read(&test)?))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "deepfm")]
    backbone: Backbone,
    #[arg(long, default_value = "clsd")]
    loss: Variant,
    #[arg(long, default_value_t = LossConfig::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = LossConfig::default().warmup_fraction)]
    warmup_frac: f64,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = corpus::DEFAULT_BATCH_SIZE)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus file to score.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    grid_file: PathBuf,
    /// Receives rows.csv and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Corpus directory; the default synthetic corpus is generated if absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "deepfm")]
    backbone: Backbone,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS)]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<Corpus> {
    corpus::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenArgs) -> Result<()> {
    let cfg = GenConfig {
        users: a.users,
        items: a.items,
        groups: a.groups,
        records: a.records,
        test_records: a.test_records,
        clickbait_rate: a.clickbait_rate,
        group_ctr_slope: a.group_ctr_slope,
        seed: a.seed,
        ..GenConfig::default()
    };
    let g = corpus::generate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    corpus::write(&g.train, a.out.join("train.clsd"))?;
    corpus::write(&g.test, a.out.join("test.clsd"))?;
    println!(
        "wrote {} train and {} test records to {}",
        g.train.len(),
        g.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, exec: Exec) -> Result<()> {
    let (train_set, test_set) = a.data.load()?;
    let loss = LossConfig {
        variant: a.loss,
        alpha: a.alpha,
        warmup_fraction: a.warmup_frac,
        ..LossConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        exec,
        ..TrainConfig::new(loss, a.epochs, a.seed)
    };
    let (_, report) = runner::run_single(&train_set, &test_set, a.backbone, &cfg, &a.out_dir)?;
    if let Some(auc) = report.final_auc() {
        println!("test_auc {auc:.6}");
    }
    Ok(())
}

fn eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let data = read(&a.corpus)?;
    let state = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let e = metrics::evaluate(&state.params, &data, exec)?;
    println!("auc,logloss\n{:.6},{:.6}", e.auc, e.logloss);
    Ok(())
}

fn write_grid(result: &GridResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write(&out_dir.join("rows.csv"), &result.rows_csv())?;
    write(&out_dir.join("summary.csv"), &result.summary_csv())?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn ablate(a: AblateArgs, exec: Exec) -> Result<()> {
    let text = std::fs::read_to_string(&a.grid_file).with_context(|| format!("reading {}", a.grid_file.display()))?;
    let gf = parse_grid_file(&text)?;
    let (train_set, test_set) = gf.data.load()?;
    let settings = RunSettings { exec, ..gf.settings };
    let result = run_grid(&gf.grid, &settings, &train_set, &test_set, runner::threads_from_env()?)?;
    write_grid(&result, &a.out_dir)
}

fn sweep_alpha(a: SweepArgs, exec: Exec) -> Result<()> {
    let source = match &a.corpus {
        Some(dir) => DataSource::Files {
            train: dir.join("train.clsd"),
            test: dir.join("test.clsd"),
        },
        None => DataSource::Generate(GenConfig::default()),
    };
    let (train_set, test_set) = source.load()?;
    let grid = ExperimentGrid::alpha_sweep(a.backbone, a.alphas, a.seeds)?;
    let settings = RunSettings {
        epochs: a.epochs,
        exec,
        ..RunSettings::default()
    };
    let result = run_grid(&grid, &settings, &train_set, &test_set, runner::threads_from_env()?)?;
    write_grid(&result, &a.out_dir)?;
    if let Some(alpha) = runner::peak_alpha(&result) {
        eprintln!("peak alpha {alpha}");
    }
    Ok(())
}

fn analyze_groups(a: AnalyzeArgs, exec: Exec) -> Result<()> {
    let data = read(&a.corpus)?;
    let state = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if data.schema.cardinalities() != state.params.spec().cardinalities.as_slice() {
        bail!("checkpoint was trained on a different schema");
    }
    let stats = metrics::group_stats(&data, &state.params, exec)?;
    write(&a.out, &stats.to_csv())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Ablate(a) => ablate(a, exec),
        Command::SweepAlpha(a) => sweep_alpha(a, exec),
        Command::AnalyzeGroups(a) => analyze_groups(a, exec),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clsd(args: &[&str]) -> Result<()> {
        run(Cli::try_parse_from(
            std::iter::once("clsd").chain(args.iter().copied()),
        )?)
    }

    fn path(dir: &Path, rel: &str) -> String {
        dir.join(rel).display().to_string()
    }

    fn gen_small(dir: &Path, name: &str, groups: &str) {
        let out = path(dir, name);
        clsd(&[
            "gen-data",
            "--users",
            "50",
            "--items",
            "30",
            "--groups",
            groups,
            "--records",
            "1500",
            "--test-records",
            "400",
            "--seed",
            "3",
            "--out",
            &out,
        ])
        .unwrap();
    }

    #[test]
    fn unknown_flag_is_named() {
        let e = Cli::try_parse_from(["clsd", "train", "--bogus-flag", "1"])
            .err()
            .unwrap();
        assert!(e.to_string().contains("--bogus-flag"));
    }

    #[test]
    fn gen_data_writes_both_splits() {
        let dir = tempfile::tempdir().unwrap();
        gen_small(dir.path(), "data", "4");
        for split in ["train.clsd", "test.clsd"] {
            let text = std::fs::read_to_string(dir.path().join("data").join(split)).unwrap();
            assert!(text.starts_with("CLSDCORPUS v1\nfields "));
        }
    }

    #[test]
    fn same_seed_gives_same_files() {
        let dir = tempfile::tempdir().unwrap();
        gen_small(dir.path(), "data", "4");
        let data = path(dir.path(), "data");
        for out_dir in ["a", "b"] {
            let out = path(dir.path(), out_dir);
            clsd(&[
                "train",
                "--corpus",
                &data,
                "--backbone",
                "fm",
                "--epochs",
                "3",
                "--seed",
                "7",
                "--out-dir",
                &out,
            ])
            .unwrap();
        }
        for file in ["report.csv", "model.ckpt"] {
            let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
            assert_eq!(a, b, "{file}");
        }
    }

    #[test]
    fn corpus_file_needs_a_test_file() {
        let dir = tempfile::tempdir().unwrap();
        gen_small(dir.path(), "data", "4");
        let (train, out) = (path(dir.path(), "data/train.clsd"), path(dir.path(), "run"));
        let e = clsd(&["train", "--corpus", &train, "--out-dir", &out]).unwrap_err();
        assert!(e.to_string().contains("--test"));
    }

    #[test]
    fn empty_variant_list_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let grid = path(dir.path(), "grid.txt");
        std::fs::write(&grid, "backbones = lr\nvariants =\n").unwrap();
        let out = path(dir.path(), "out");
        let e = clsd(&["ablate", "--grid-file", &grid, "--out-dir", &out]).unwrap_err();
        assert!(format!("{e:#}").contains("variants"));
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn missing_checkpoint_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        gen_small(dir.path(), "data", "4");
        let test = path(dir.path(), "data/test.clsd");
        let e = clsd(&["eval", "--corpus", &test, "--checkpoint", "nope.ckpt"]).unwrap_err();
        assert!(format!("{e:#}").contains("nope.ckpt"));
    }

    #[test]
    fn analyze_groups_checks_the_schema() {
        let dir = tempfile::tempdir().unwrap();
        gen_small(dir.path(), "four", "4");
        gen_small(dir.path(), "five", "5");
        let (four, run_dir) = (path(dir.path(), "four"), path(dir.path(), "run"));
        clsd(&[
            "train",
            "--corpus",
            &four,
            "--backbone",
            "lr",
            "--epochs",
            "2",
            "--out-dir",
            &run_dir,
        ])
        .unwrap();
        let ckpt = path(dir.path(), "run/model.ckpt");
        let (ok_in, ok_out) = (path(dir.path(), "four/test.clsd"), path(dir.path(), "g.csv"));
        clsd(&[
            "analyze-groups",
            "--corpus",
            &ok_in,
            "--checkpoint",
            &ckpt,
            "--out",
            &ok_out,
        ])
        .unwrap();
        let csv = std::fs::read_to_string(&ok_out).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let (bad_in, bad_out) = (path(dir.path(), "five/test.clsd"), path(dir.path(), "h.csv"));
        let e = clsd(&[
            "analyze-groups",
            "--corpus",
            &bad_in,
            "--checkpoint",
            &ckpt,
            "--out",
            &bad_out,
        ])
        .unwrap_err();
        assert!(e.to_string().contains("schema"));
    }
}
