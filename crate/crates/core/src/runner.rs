//! Single runs and experiment grids: objective comparison, ablation and the
//! alpha sweep, reported as CSV tables.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{self, Corpus, FieldSchema, GenConfig, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::exec::{with_threads, Exec};
use crate::model::{Backbone, ModelParams, ModelSpec};
use crate::objective::{LossConfig, Variant};
use crate::stats::{mean, paired_t_test, std_dev};
use crate::trainer::{
    derive_seed, save_checkpoint, train, RunReport, SeedUse, TrainConfig, TrainState, DEFAULT_LEARNING_RATE,
};

pub const DEFAULT_EPOCHS: usize = 24;
pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25];
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Environment variable capping the number of grid cells trained at once.
pub const THREADS_ENV: &str = "CLSD_THREADS";

/// A grid column: a loss variant, or one half of the clsd objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridVariant {
    Loss(Variant),
    /// The confidence-weighted loss without a gate.
    GlobalOnly,
    /// The gated loss with `alpha = 0`.
    LocalOnly,
}

impl GridVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GridVariant::Loss(v) => v.as_str(),
            GridVariant::GlobalOnly => "global_only",
            GridVariant::LocalOnly => "local_only",
        }
    }

    /// Loss configuration for this column at `alpha`.
    pub fn loss_config(self, alpha: f64, warmup_fraction: f64) -> LossConfig {
        let (variant, alpha) = match self {
            GridVariant::Loss(Variant::Clsd) => (Variant::Clsd, alpha),
            GridVariant::Loss(v) => (v, LossConfig::default().alpha),
            GridVariant::GlobalOnly => (Variant::Global, LossConfig::default().alpha),
            GridVariant::LocalOnly => (Variant::Clsd, 0.0),
        };
        LossConfig {
            variant,
            alpha,
            warmup_fraction,
            ..LossConfig::default()
        }
    }
}

impl fmt::Display for GridVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GridVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_only" | "global-only" => Ok(GridVariant::GlobalOnly),
            "local_only" | "local-only" => Ok(GridVariant::LocalOnly),
            other => other.parse().map(GridVariant::Loss),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub backbones: Vec<Backbone>,
    pub variants: Vec<GridVariant>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One grid row's coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub backbone: Backbone,
    pub variant: GridVariant,
    pub alpha: f64,
    pub seed: u64,
}

impl ExperimentGrid {
    pub fn new(
        backbones: Vec<Backbone>,
        variants: Vec<GridVariant>,
        alphas: Vec<f64>,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        for (name, empty) in [
            ("backbones", backbones.is_empty()),
            ("variants", variants.is_empty()),
            ("alphas", alphas.is_empty()),
            ("seeds", seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("grid has no {name}")));
            }
        }
        let mut seen = HashSet::new();
        if let Some(s) = seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {s} appears twice")));
        }
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {a}")));
        }
        Ok(Self {
            backbones,
            variants,
            alphas,
            seeds,
        })
    }

    /// The alpha sweep: the clsd objective over `alphas`.
    pub fn alpha_sweep(backbone: Backbone, alphas: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        Self::new(vec![backbone], vec![GridVariant::Loss(Variant::Clsd)], alphas, seeds)
    }

    /// The ablation: plain, global-only, local-only and full clsd at one alpha.
    pub fn ablation(backbone: Backbone, alpha: f64, seeds: Vec<u64>) -> Result<Self> {
        Self::new(
            vec![backbone],
            vec![
                GridVariant::Loss(Variant::Ori),
                GridVariant::GlobalOnly,
                GridVariant::LocalOnly,
                GridVariant::Loss(Variant::Clsd),
            ],
            vec![alpha],
            seeds,
        )
    }

    /// Rows in output order: backbone, variant, alpha, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.len());
        for &backbone in &self.backbones {
            for &variant in &self.variants {
                for &alpha in &self.alphas {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            backbone,
                            variant,
                            alpha,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.backbones.len() * self.variants.len() * self.alphas.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training settings shared by every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub exec: Exec,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            warmup_fraction: LossConfig::default().warmup_fraction,
            exec: Exec::default(),
        }
    }
}

impl RunSettings {
    pub fn train_config(&self, loss: LossConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            loss,
            adam: Default::default(),
            exec: self.exec,
        }
    }
}

/// Where a grid's train and test corpora come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Generate(GenConfig),
    Files { train: PathBuf, test: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<(Corpus, Corpus)> {
        match self {
            DataSource::Generate(cfg) => {
                let g = corpus::generate(cfg)?;
                Ok((g.train, g.test))
            }
            DataSource::Files { train, test } => Ok((corpus::read(train)?, corpus::read(test)?)),
        }
    }
}

/// Freshly initialized parameters for `backbone` on `schema`.
pub fn init_model(backbone: Backbone, schema: &FieldSchema, seed: u64) -> Result<ModelParams> {
    ModelParams::init(ModelSpec::new(backbone, schema), derive_seed(seed, SeedUse::Init))
}

/// Trains one model and writes `report.csv` and `model.ckpt` into `out_dir`.
pub fn run_single(
    train_set: &Corpus,
    test_set: &Corpus,
    backbone: Backbone,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(TrainState, RunReport)> {
    let init = init_model(backbone, &train_set.schema, cfg.seed)?;
    let (state, report) = train(train_set, Some(test_set), init, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    save_checkpoint(&state, &out_dir.join("model.ckpt"))?;
    Ok((state, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: Cell,
    pub outcome: std::result::Result<(f64, f64), String>,
}

impl GridRow {
    pub fn auc(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|o| o.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub backbone: Backbone,
    pub variant: GridVariant,
    pub alpha: f64,
    /// Successful seeds.
    pub n: usize,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    /// Paired t-test against `ori` over seeds where both succeeded.
    pub p_vs_ori: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub summary: Vec<SummaryRow>,
}

impl GridResult {
    pub const ROWS_HEADER: &'static str = "backbone,variant,alpha,seed,test_auc,test_logloss,status";
    pub const SUMMARY_HEADER: &'static str = "backbone,variant,alpha,n,mean_auc,std_auc,p_vs_ori";

    pub fn rows_csv(&self) -> String {
        let mut out = format!("{}\n", Self::ROWS_HEADER);
        for r in &self.rows {
            let c = &r.cell;
            let (auc, ll, status) = match &r.outcome {
                Ok((auc, ll)) => (format!("{auc:.6}"), format!("{ll:.6}"), "ok".to_string()),
                Err(e) => (
                    String::new(),
                    String::new(),
                    format!("error: {}", e.replace([',', '\n'], ";")),
                ),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{auc},{ll},{status}",
                c.backbone, c.variant, c.alpha, c.seed
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::SUMMARY_HEADER);
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.backbone,
                s.variant,
                s.alpha,
                s.n,
                opt(s.mean_auc),
                opt(s.std_auc),
                opt(s.p_vs_ori)
            );
        }
        out
    }

    pub fn summary_for(&self, backbone: Backbone, variant: GridVariant, alpha: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.backbone == backbone && s.variant == variant && s.alpha == alpha)
    }

    /// Seed-ordered AUCs of one summary cell; `None` where a run failed.
    pub fn aucs(&self, backbone: Backbone, variant: GridVariant, alpha: f64) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.cell.backbone == backbone && r.cell.variant == variant && r.cell.alpha == alpha)
            .map(GridRow::auc)
            .collect()
    }
}

/// Reads the cell-parallelism cap from [`THREADS_ENV`].
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Identifies cells whose training runs are identical.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RunKey {
    backbone: Backbone,
    variant: Variant,
    alpha_bits: u64,
    seed: u64,
}

/// Trains every grid cell and summarizes. Cells that resolve to the same
/// training run are trained once; failed cells are recorded and the grid
/// continues. Output order follows [`ExperimentGrid::cells`].
pub fn run_grid(
    grid: &ExperimentGrid,
    settings: &RunSettings,
    train_set: &Corpus,
    test_set: &Corpus,
    threads: Option<usize>,
) -> Result<GridResult> {
    let cells = grid.cells();
    let mut jobs: Vec<(RunKey, Cell)> = Vec::new();
    let mut keys = Vec::with_capacity(cells.len());
    let mut index: HashMap<RunKey, usize> = HashMap::new();
    for cell in &cells {
        let loss = cell.variant.loss_config(cell.alpha, settings.warmup_fraction);
        let key = RunKey {
            backbone: cell.backbone,
            variant: loss.variant,
            alpha_bits: loss.alpha.to_bits(),
            seed: cell.seed,
        };
        index.entry(key.clone()).or_insert_with(|| {
            jobs.push((key.clone(), *cell));
            jobs.len() - 1
        });
        keys.push(key);
    }

    // One cell per worker; each cell's own forward/backward runs inside the
    // same capped pool.
    let outcomes: Vec<std::result::Result<(f64, f64), String>> = with_threads(threads, || {
        settings.exec.map(&jobs, |(_, cell)| {
            run_cell(cell, settings, train_set, test_set).map_err(|e| e.to_string())
        })
    })?;

    let rows: Vec<GridRow> = cells
        .iter()
        .zip(&keys)
        .map(|(cell, key)| GridRow {
            cell: *cell,
            outcome: outcomes[index[key]].clone(),
        })
        .collect();
    let summary = summarize(grid, &rows);
    Ok(GridResult { rows, summary })
}

fn run_cell(cell: &Cell, settings: &RunSettings, train_set: &Corpus, test_set: &Corpus) -> Result<(f64, f64)> {
    let loss = cell.variant.loss_config(cell.alpha, settings.warmup_fraction);
    let cfg = settings.train_config(loss, cell.seed);
    let init = init_model(cell.backbone, &train_set.schema, cell.seed)?;
    let (_, report) = train(train_set, Some(test_set), init, &cfg)?;
    let last = report
        .rows
        .last()
        .ok_or_else(|| Error::InsufficientData("run produced no epochs".into()))?;
    match (last.test_auc, last.test_logloss) {
        (Some(a), Some(l)) => Ok((a, l)),
        _ => Err(Error::UndefinedMetric("no test metrics".into())),
    }
}

fn summarize(grid: &ExperimentGrid, rows: &[GridRow]) -> Vec<SummaryRow> {
    let ori = GridVariant::Loss(Variant::Ori);
    let per_seed = |backbone: Backbone, variant: GridVariant, alpha: f64| -> Vec<Option<f64>> {
        rows.iter()
            .filter(|r| r.cell.backbone == backbone && r.cell.variant == variant && r.cell.alpha == alpha)
            .map(GridRow::auc)
            .collect()
    };
    let mut out = Vec::new();
    for &backbone in &grid.backbones {
        for &variant in &grid.variants {
            for &alpha in &grid.alphas {
                let aucs = per_seed(backbone, variant, alpha);
                let ok: Vec<f64> = aucs.iter().flatten().copied().collect();
                let p_vs_ori = if variant != ori && grid.variants.contains(&ori) {
                    let base = per_seed(backbone, ori, alpha);
                    let (a, b): (Vec<f64>, Vec<f64>) =
                        aucs.iter().zip(&base).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip();
                    paired_t_test(&a, &b).map(|(_, p)| p)
                } else {
                    None
                };
                out.push(SummaryRow {
                    backbone,
                    variant,
                    alpha,
                    n: ok.len(),
                    mean_auc: (!ok.is_empty()).then(|| mean(&ok)),
                    std_auc: (ok.len() > 1).then(|| std_dev(&ok)),
                    p_vs_ori,
                });
            }
        }
    }
    out
}

/// A grid file: the grid plus shared settings and the data source.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub grid: ExperimentGrid,
    pub settings: RunSettings,
    pub data: DataSource,
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("`{key}`: `{s}`: {e}")))
        })
        .collect()
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: `{value}`: {e}")))
}

/// Parses a flat `key = value` file. `#` starts a comment. Lists are
/// comma-separated. Unset keys take the defaults; corpus files, when given,
/// replace generation.
///
/// ```text
/// backbones = deepfm
/// variants = ori, global_only, local_only, clsd
/// alphas = 1.0
/// seeds = 1, 2, 3, 4, 5
/// epochs = 24
/// ```
pub fn parse_grid_file(text: &str) -> Result<GridFile> {
    let mut backbones = vec![Backbone::DeepFm];
    let mut variants: Option<Vec<GridVariant>> = None;
    let mut alphas = DEFAULT_ALPHAS.to_vec();
    let mut seeds = DEFAULT_SEEDS.to_vec();
    let mut settings = RunSettings::default();
    let mut gen = GenConfig::default();
    let mut train_path: Option<PathBuf> = None;
    let mut test_path: Option<PathBuf> = None;

    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "backbones" => backbones = list(key, value)?,
            "variants" => variants = Some(list(key, value)?),
            "alphas" => alphas = list(key, value)?,
            "seeds" => seeds = list(key, value)?,
            "epochs" => settings.epochs = scalar(key, value)?,
            "lr" | "learning_rate" => settings.learning_rate = scalar(key, value)?,
            "batch" | "batch_size" => settings.batch_size = scalar(key, value)?,
            "warmup_frac" | "warmup_fraction" => settings.warmup_fraction = scalar(key, value)?,
            "users" => gen.users = scalar(key, value)?,
            "items" => gen.items = scalar(key, value)?,
            "groups" => gen.groups = scalar(key, value)?,
            "records" => gen.records = scalar(key, value)?,
            "test_records" => gen.test_records = scalar(key, value)?,
            "clickbait_rate" => gen.clickbait_rate = scalar(key, value)?,
            "group_ctr_slope" => gen.group_ctr_slope = scalar(key, value)?,
            "data_seed" => gen.seed = scalar(key, value)?,
            "train_corpus" => train_path = Some(PathBuf::from(value)),
            "test_corpus" => test_path = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
        }
    }
    let variants = variants.ok_or_else(|| Error::Config("grid file sets no `variants`".into()))?;
    let data = match (train_path, test_path) {
        (Some(train), Some(test)) => DataSource::Files { train, test },
        (None, None) => DataSource::Generate(gen),
        _ => {
            return Err(Error::Config(
                "`train_corpus` and `test_corpus` must be given together".into(),
            ))
        }
    };
    Ok(GridFile {
        grid: ExperimentGrid::new(backbones, variants, alphas, seeds)?,
        settings,
        data,
    })
}

/// The alpha with the highest mean AUC among clsd summary rows.
pub fn peak_alpha(result: &GridResult) -> Option<f64> {
    result
        .summary
        .iter()
        .filter(|s| s.variant == GridVariant::Loss(Variant::Clsd))
        .filter_map(|s| Some((s.alpha, s.mean_auc?)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(alpha, _)| alpha)
}
