//! The `dmih` command line tool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::codes::{BinaryCode, CodeBank};
use crate::error::{Error, Result};
use crate::eval::{
    self, candidates_at_recall, evaluate_ranking, lookup_cost_report, precision_recall_time_curve, RetrievalProtocol,
    Setting, TimingConfig,
};
use crate::mih_index::MihIndex;
use crate::table_construction::{KeyLayout, Strategy};
use crate::trainer::{
    self, encode, generate, stream_rng, DatasetParams, EpochLoss, HashModel, HyperParams, LabeledBank, Split, Stream,
    SyntheticDataset, TrainConfig,
};

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "dmih",
    version,
    about = "Multi-index hashing search and search-aware hash learning"
)]
pub struct Cli {
    /// Seed for every random stream (data, init, batching, queries).
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic identity-labelled dataset.
    Gen(GenArgs),
    /// Train a hash model on a generated dataset.
    Train(TrainArgs),
    /// Encode a dataset into a code bank.
    Encode(EncodeArgs),
    /// Build or query a multi-index hash index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Precision/recall-time curves and lookup-cost comparisons.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Hamming-ranking retrieval metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Check the index and losses against brute-force oracles.
    Selftest(SelftestArgs),
    /// Run gen, train, encode, index, eval and bench end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, default_value_t = 50)]
    pub identities: usize,
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    #[arg(long = "feature-dim", default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.8)]
    pub spread: f64,
    #[arg(long = "camera-shift", default_value_t = 0.5)]
    pub camera_shift: f64,
    #[arg(long = "centroid-scale", default_value_t = 1.0)]
    pub centroid_scale: f64,
}

impl DataArgs {
    fn params(&self, branches: usize, seed: u64, split: Split) -> DatasetParams {
        DatasetParams {
            samples: self.samples,
            identities: self.identities,
            cameras: self.cameras,
            branches,
            feature_dim: self.feature_dim,
            spread: self.spread,
            camera_shift: self.camera_shift,
            centroid_scale: self.centroid_scale,
            seed,
            split,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 3)]
    pub branches: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CodeArgs {
    /// Number of branches B.
    #[arg(long, default_value_t = 3)]
    pub branches: usize,
    /// Bits per branch r.
    #[arg(long)]
    pub r: Option<usize>,
    /// Total code length R = B * r.
    #[arg(long = "code-bits")]
    pub code_bits: Option<usize>,
}

impl CodeArgs {
    /// Bits per branch, 32 unless set by `--r` or `--code-bits`.
    pub fn bits_per_branch(&self) -> Result<usize> {
        if self.branches == 0 {
            return Err(Error::param("--branches must be positive"));
        }
        let from_total = match self.code_bits {
            Some(total) if total % self.branches != 0 || total == 0 => {
                return Err(Error::param(format!(
                    "--code-bits {total} is not a positive multiple of --branches {}",
                    self.branches
                )))
            }
            Some(total) => Some(total / self.branches),
            None => None,
        };
        match (self.r, from_total) {
            (Some(r), Some(t)) if r != t => Err(Error::param(format!(
                "--r {r} disagrees with --code-bits {} for {} branches",
                self.code_bits.unwrap_or_default(),
                self.branches
            ))),
            (Some(0), _) => Err(Error::param("--r must be positive")),
            (Some(r), _) => Ok(r),
            (None, Some(t)) => Ok(t),
            (None, None) => Ok(32),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LossArgs {
    /// Triplet margin.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Classification weight.
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// SAMI weight.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 160)]
    pub epochs: usize,
    #[arg(long = "lr", default_value_t = 4e-4)]
    pub learning_rate: f64,
    #[arg(long = "weight-decay", default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Identities per batch.
    #[arg(long = "p", default_value_t = 16)]
    pub p: usize,
    /// Samples per identity.
    #[arg(long = "k", default_value_t = 4)]
    pub k: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            identities_per_batch: self.p,
            samples_per_identity: self.k,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TableArgs {
    /// Number of hash tables.
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value = "blockwise")]
    pub strategy: Strategy,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub code: CodeArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Tables whose keys the SAMI loss shapes.
    #[arg(long, default_value_t = 4)]
    pub m: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexCommand {
    /// Build substring tables over a code bank.
    Build(IndexBuildArgs),
    /// Radius or k-NN query against a saved index.
    Query(IndexQueryArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub branches: usize,
    #[command(flatten)]
    pub tables: TableArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["radius", "knn"]))]
#[command(group = clap::ArgGroup::new("probe").required(true).args(["query_id", "query"]))]
pub struct IndexQueryArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// All codes within this Hamming distance.
    #[arg(long)]
    pub radius: Option<usize>,
    /// This many nearest codes.
    #[arg(long)]
    pub knn: Option<usize>,
    /// Use the bank's code with this id as the query.
    #[arg(long = "query-id")]
    pub query_id: Option<usize>,
    /// Query code as a bit string, bit 0 first.
    #[arg(long)]
    pub query: Option<String>,
    /// Write `id,distance` rows here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchCommand {
    /// Re-ranked precision and recall against lookup time.
    Curves(CurvesArgs),
    /// Per-query lookup cost of two indexes.
    LookupCost(LookupCostArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CurvesArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Dataset directory the bank was encoded from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "k-nn", value_delimiter = ',', default_value = "10,20,50,100,200,400")]
    pub k_nn: Vec<usize>,
    #[arg(long = "top-n", default_value_t = 20)]
    pub top_n: usize,
    #[arg(long, default_value_t = 3)]
    pub branches: usize,
    #[command(flatten)]
    pub tables: TableArgs,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TimingArgs {
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
}

impl TimingArgs {
    fn config(&self) -> TimingConfig {
        TimingConfig {
            warmup: self.warmup,
            repetitions: self.repetitions,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LookupCostArgs {
    #[arg(long = "bank-a")]
    pub bank_a: PathBuf,
    /// Defaults to `--bank-a`.
    #[arg(long = "bank-b")]
    pub bank_b: Option<PathBuf>,
    /// Dataset directory the banks were encoded from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "strategy-a", default_value = "blockwise")]
    pub strategy_a: Strategy,
    #[arg(long = "strategy-b", default_value = "contiguous")]
    pub strategy_b: Strategy,
    #[arg(long = "name-a", default_value = "a")]
    pub name_a: String,
    #[arg(long = "name-b", default_value = "b")]
    pub name_b: String,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub branches: usize,
    #[arg(long, value_delimiter = ',', default_value = "")]
    pub radii: Vec<usize>,
    #[arg(long = "k-nn", value_delimiter = ',', default_value = "10,50,100")]
    pub k_nn: Vec<usize>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCommand {
    /// Mean average precision of the Hamming ranking.
    Map(EvalArgs),
    /// CMC of the Hamming ranking.
    Cmc(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    pub ranks: Vec<usize>,
    /// Write `metric,value` rows here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 24)]
    pub trials: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub code: CodeArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long = "lr", default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long = "weight-decay", default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long = "p", default_value_t = 16)]
    pub p: usize,
    #[arg(long = "k", default_value_t = 4)]
    pub k: usize,
    #[command(flatten)]
    pub tables: TableArgs,
    #[arg(long = "k-nn", value_delimiter = ',', default_value = "10,20,50,100,200,400")]
    pub k_nn: Vec<usize>,
    #[arg(long = "target-recall", default_value_t = 0.8)]
    pub target_recall: f64,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    cli: &'a Cli,
}

/// Parses `argv` and runs the command, writing the metadata line and any
/// stdout results to `out`.
pub fn run_from<I, T>(argv: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::param(e.to_string()))?;
    run(&cli, out)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let meta = Metadata {
        tool: "dmih",
        version: env!("CARGO_PKG_VERSION"),
        cli,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&meta).map_err(|e| Error::param(e.to_string()))?
    )?;
    let seed = cli.seed;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, seed),
        Command::Train(a) => cmd_train(a, seed, out),
        Command::Encode(a) => cmd_encode(a),
        Command::Index(IndexCommand::Build(a)) => cmd_index_build(a),
        Command::Index(IndexCommand::Query(a)) => cmd_index_query(a, out),
        Command::Bench(BenchCommand::Curves(a)) => cmd_curves(a),
        Command::Bench(BenchCommand::LookupCost(a)) => cmd_lookup_cost(a),
        Command::Eval(EvalCommand::Map(a)) => cmd_eval(a, true, out),
        Command::Eval(EvalCommand::Cmc(a)) => cmd_eval(a, false, out),
        Command::Selftest(a) => cmd_selftest(a, seed, out),
        Command::Pipeline(a) => cmd_pipeline(a, seed, out),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::from(e).at(path))?))
}

fn cmd_gen(a: &GenArgs, seed: u64) -> Result<()> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    generate(&a.data.params(a.branches, seed, split))?.save(&a.out)
}

fn write_trace(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for e in trace {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

fn train_model(
    ds: &SyntheticDataset,
    code: &CodeArgs,
    loss: &LossArgs,
    m: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<(HashModel, Vec<EpochLoss>)> {
    let r = code.bits_per_branch()?;
    if ds.branches != code.branches {
        return Err(Error::param(format!(
            "dataset has {} branches but --branches is {}",
            ds.branches, code.branches
        )));
    }
    KeyLayout::new(Strategy::Blockwise, code.branches, r, m)?;
    let hyper = HyperParams {
        alpha: loss.alpha,
        beta: loss.beta,
        gamma: loss.gamma,
        tables: m,
    };
    let model = HashModel::init(ds.branches, ds.feature_dim, r, ds.identities(), hyper, seed)?;
    trainer::train(ds, model, config)
}

fn cmd_train(a: &TrainArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let ds = SyntheticDataset::load(&a.data)?;
    let (model, trace) = train_model(&ds, &a.code, &a.loss, a.m, &a.optim.config(seed), seed)?;
    model.save(&a.out)?;
    if let Some(path) = &a.trace {
        write_trace(path, &trace)?;
    }
    if let Some(last) = trace.last() {
        writeln!(
            out,
            "{}",
            serde_json::to_string(last).map_err(|e| Error::param(e.to_string()))?
        )?;
    }
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let model = HashModel::load(&a.model)?;
    let ds = SyntheticDataset::load(&a.data)?;
    encode(&model, &ds)?.bank.save(&a.out)
}

fn cmd_index_build(a: &IndexBuildArgs) -> Result<()> {
    let bank = Arc::new(CodeBank::load(&a.bank)?);
    MihIndex::with_params(bank, a.tables.m, a.tables.strategy, a.branches)?.save(&a.out)
}

fn cmd_index_query(a: &IndexQueryArgs, out: &mut dyn Write) -> Result<()> {
    let bank = Arc::new(CodeBank::load(&a.bank)?);
    let index = MihIndex::load(&a.index, bank.clone())?;
    let query = match (&a.query_id, &a.query) {
        (Some(id), _) if *id < bank.len() => bank.get(*id),
        (Some(id), _) => {
            return Err(Error::param(format!(
                "--query-id {id} is outside the {}-code bank",
                bank.len()
            )))
        }
        (None, Some(bits)) => bits.parse::<BinaryCode>()?,
        (None, None) => return Err(Error::param("either --query-id or --query is required")),
    };
    let (rows, stats): (Vec<(u32, u32)>, _) = match (a.radius, a.knn) {
        (Some(k), _) => {
            let (ids, stats) = index.r_neighbor_search(&query, k)?;
            let rows = ids
                .into_iter()
                .map(|id| (id, bank.distance_to(id as usize, query.words())))
                .collect();
            (rows, stats)
        }
        (None, Some(k)) => {
            let (ns, stats) = index.knn_search(&query, k)?;
            (ns.into_iter().map(|n| (n.id, n.distance)).collect(), stats)
        }
        (None, None) => return Err(Error::param("either --radius or --knn is required")),
    };
    writeln!(
        out,
        "{{\"buckets_probed\":{},\"candidates_verified\":{},\"survivors\":{},\"time_s\":{}}}",
        stats.buckets_probed,
        stats.candidates_verified,
        stats.survivors,
        stats.wall_time.as_secs_f64()
    )?;
    let write_rows = |w: &mut dyn Write| -> Result<()> {
        writeln!(w, "id,distance")?;
        for (id, d) in &rows {
            writeln!(w, "{id},{d}")?;
        }
        Ok(())
    };
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_rows(&mut w)?;
            w.flush()?;
        }
        None => write_rows(out)?,
    }
    Ok(())
}

fn load_labeled(bank: &Path, data: &Path) -> Result<LabeledBank> {
    LabeledBank::attach(CodeBank::load(bank)?, &SyntheticDataset::load(data)?)
}

fn gallery_index(
    data: &LabeledBank,
    protocol: &RetrievalProtocol,
    m: usize,
    strategy: Strategy,
    branches: usize,
) -> Result<MihIndex> {
    MihIndex::with_params(Arc::new(protocol.gallery_bank(data)?), m, strategy, branches)
}

fn cmd_curves(a: &CurvesArgs) -> Result<()> {
    let data = load_labeled(&a.bank, &a.data)?;
    let protocol = RetrievalProtocol::reid(&data.labels, &data.cameras, a.top_n)?;
    let index = gallery_index(&data, &protocol, a.tables.m, a.tables.strategy, a.branches)?;
    let points = precision_recall_time_curve(&index, &data, &protocol, &a.k_nn, a.timing.config())?;
    let mut w = create(&a.out)?;
    eval::write_curve_csv(&mut w, &points)?;
    w.flush()?;
    Ok(())
}

fn settings(radii: &[usize], k_nn: &[usize]) -> Vec<Setting> {
    radii
        .iter()
        .map(|&k| Setting::Radius(k))
        .chain(k_nn.iter().map(|&k| Setting::Knn(k)))
        .collect()
}

fn cmd_lookup_cost(a: &LookupCostArgs) -> Result<()> {
    let ds = SyntheticDataset::load(&a.data)?;
    let data_a = LabeledBank::attach(CodeBank::load(&a.bank_a)?, &ds)?;
    let data_b = match &a.bank_b {
        Some(path) => LabeledBank::attach(CodeBank::load(path)?, &ds)?,
        None => data_a.clone(),
    };
    let protocol = RetrievalProtocol::reid(&ds.labels, &ds.cameras, 20)?;
    let gallery_a = Arc::new(protocol.gallery_bank(&data_a)?);
    let gallery_b = match a.bank_b {
        Some(_) => Arc::new(protocol.gallery_bank(&data_b)?),
        None => gallery_a.clone(),
    };
    let index_a = MihIndex::with_params(gallery_a, a.m, a.strategy_a, a.branches)?;
    let index_b = MihIndex::with_params(gallery_b, a.m, a.strategy_b, a.branches)?;
    let qa: Vec<BinaryCode> = protocol.queries.iter().map(|&q| data_a.bank.get(q)).collect();
    let qb: Vec<BinaryCode> = protocol.queries.iter().map(|&q| data_b.bank.get(q)).collect();
    let report = lookup_cost_report(
        &index_a,
        &index_b,
        &qa,
        &qb,
        &settings(&a.radii, &a.k_nn),
        a.timing.config(),
    )?;
    let mut w = create(&a.out)?;
    eval::write_cost_csv(&mut w, &a.name_a, &a.name_b, &report)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    metric: String,
    value: f64,
}

fn write_metrics(w: &mut dyn Write, rows: &[MetricRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, map: bool, out: &mut dyn Write) -> Result<()> {
    let data = load_labeled(&a.bank, &a.data)?;
    let protocol = RetrievalProtocol::reid(&data.labels, &data.cameras, 20)?;
    let metrics = evaluate_ranking(&data, &protocol, &a.ranks)?;
    let rows: Vec<MetricRow> = if map {
        vec![MetricRow {
            metric: "map".into(),
            value: metrics.map,
        }]
    } else {
        metrics
            .cmc
            .iter()
            .map(|&(k, v)| MetricRow {
                metric: format!("cmc@{k}"),
                value: v,
            })
            .collect()
    };
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            write_metrics(&mut w, &rows)?;
            w.flush()?;
        }
        None => write_metrics(out, &rows)?,
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let mut rng = stream_rng(seed, Stream::TestData);
    let results = crate::selftest::run(&mut rng, a.trials.max(1))?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict} {} ({} cases, {} failures)", r.name, r.cases, r.failures)?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Exactness(format!("selftest failed: {}", failed.join(", "))))
    }
}

/// Files written by [`cmd_pipeline`], relative to `--out`.
pub const PIPELINE_FILES: &[&str] = &[
    "train/dataset.csv",
    "train/features.bin",
    "test/dataset.csv",
    "test/features.bin",
    "model.bin",
    "model_gamma0.bin",
    "loss.csv",
    "loss_gamma0.csv",
    "codes.bin",
    "codes_gamma0.bin",
    "index.bin",
    "metrics.csv",
    "curves.csv",
    "cost_blockwise_vs_contiguous.csv",
    "cost_gamma0_vs_sami.csv",
];

fn cmd_pipeline(a: &PipelineArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let dir = &a.out;
    let branches = a.code.branches;
    let train_ds = generate(&a.data.params(branches, seed, Split::Train))?;
    let test_ds = generate(&a.data.params(branches, seed, Split::Test))?;
    train_ds.save(dir.join("train"))?;
    test_ds.save(dir.join("test"))?;

    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        identities_per_batch: a.p,
        samples_per_identity: a.k,
        seed,
    };
    let m = a.tables.m;
    let (model, trace) = train_model(&train_ds, &a.code, &a.loss, m, &config, seed)?;
    let baseline_loss = LossArgs {
        gamma: 0.0,
        ..a.loss.clone()
    };
    let (baseline, baseline_trace) = train_model(&train_ds, &a.code, &baseline_loss, m, &config, seed)?;
    model.save(dir.join("model.bin"))?;
    baseline.save(dir.join("model_gamma0.bin"))?;
    write_trace(&dir.join("loss.csv"), &trace)?;
    write_trace(&dir.join("loss_gamma0.csv"), &baseline_trace)?;

    let data = encode(&model, &test_ds)?;
    let data0 = encode(&baseline, &test_ds)?;
    data.bank.save(dir.join("codes.bin"))?;
    data0.bank.save(dir.join("codes_gamma0.bin"))?;

    let protocol = RetrievalProtocol::reid(&data.labels, &data.cameras, 20)?;
    let index = gallery_index(&data, &protocol, m, a.tables.strategy, branches)?;
    index.save(dir.join("index.bin"))?;

    let metrics = evaluate_ranking(&data, &protocol, &[1, 5, 10, 20])?;
    let metrics0 = evaluate_ranking(&data0, &protocol, &[1, 5, 10, 20])?;
    let mut rows = vec![MetricRow {
        metric: "map".into(),
        value: metrics.map,
    }];
    rows.extend(metrics.cmc.iter().map(|&(k, v)| MetricRow {
        metric: format!("cmc@{k}"),
        value: v,
    }));
    rows.push(MetricRow {
        metric: "map_gamma0".into(),
        value: metrics0.map,
    });
    let matched = candidates_at_recall(&index, &data, &protocol, a.target_recall)?;
    let index0 = gallery_index(&data0, &protocol, m, a.tables.strategy, branches)?;
    let matched0 = candidates_at_recall(&index0, &data0, &protocol, a.target_recall)?;
    rows.push(MetricRow {
        metric: "candidates_at_recall".into(),
        value: matched.candidates,
    });
    rows.push(MetricRow {
        metric: "candidates_at_recall_gamma0".into(),
        value: matched0.candidates,
    });
    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics(&mut w, &rows)?;
    w.flush()?;

    let points = precision_recall_time_curve(&index, &data, &protocol, &a.k_nn, a.timing.config())?;
    let mut w = create(&dir.join("curves.csv"))?;
    eval::write_curve_csv(&mut w, &points)?;
    w.flush()?;

    let queries: Vec<BinaryCode> = protocol.queries.iter().map(|&q| data.bank.get(q)).collect();
    let queries0: Vec<BinaryCode> = protocol.queries.iter().map(|&q| data0.bank.get(q)).collect();
    let other = if a.tables.strategy == Strategy::Blockwise {
        Strategy::Contiguous
    } else {
        Strategy::Blockwise
    };
    let contiguous = MihIndex::with_params(index.bank().clone(), m, other, branches)?;
    let knn_settings = settings(&[], &[10, 50, 100]);
    let report = lookup_cost_report(
        &index,
        &contiguous,
        &queries,
        &queries,
        &knn_settings,
        a.timing.config(),
    )?;
    let mut w = create(&dir.join("cost_blockwise_vs_contiguous.csv"))?;
    eval::write_cost_csv(&mut w, &a.tables.strategy.to_string(), &other.to_string(), &report)?;
    w.flush()?;

    let report = lookup_cost_report(&index0, &index, &queries0, &queries, &knn_settings, a.timing.config())?;
    let mut w = create(&dir.join("cost_gamma0_vs_sami.csv"))?;
    eval::write_cost_csv(&mut w, "gamma0", "sami", &report)?;
    w.flush()?;

    writeln!(
        out,
        "{{\"map\":{},\"map_gamma0\":{},\"candidates_at_recall\":{},\"candidates_at_recall_gamma0\":{}}}",
        metrics.map, metrics0.map, matched.candidates, matched0.candidates
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_length_flags() {
        let c = |branches, r, code_bits| CodeArgs { branches, r, code_bits };
        assert_eq!(c(3, None, None).bits_per_branch().unwrap(), 32);
        assert_eq!(c(3, None, Some(48)).bits_per_branch().unwrap(), 16);
        assert_eq!(c(3, Some(16), Some(48)).bits_per_branch().unwrap(), 16);
        assert!(c(3, Some(8), Some(48)).bits_per_branch().is_err());
        assert!(c(3, None, Some(50)).bits_per_branch().is_err());
        assert!(c(0, None, None).bits_per_branch().is_err());
    }

    #[test]
    fn defaults_and_metadata() {
        let cli = Cli::try_parse_from(["dmih", "train", "--data", "d", "--out", "m.bin"]).unwrap();
        let Command::Train(t) = &cli.command else { panic!() };
        assert_eq!((t.loss.alpha, t.loss.beta, t.loss.gamma), (1.0, 2.0, 0.5));
        assert_eq!((t.m, t.code.branches, t.optim.p, t.optim.k), (4, 3, 16, 4));
        assert_eq!(t.optim.epochs, 160);
        assert_eq!(cli.seed, 7);
        let json = serde_json::to_string(&Metadata {
            tool: "dmih",
            version: "x",
            cli: &cli,
        })
        .unwrap();
        assert!(json.contains("\"seed\":7") && json.contains("\"gamma\":0.5"), "{json}");
    }

    #[test]
    fn rejects_bad_invocations() {
        let mut sink = Vec::new();
        assert!(run_from(["dmih", "frobnicate"], &mut sink).is_err());
        assert!(run_from(["dmih", "gen", "--out", "x", "--bogus"], &mut sink).is_err());
        assert!(run_from(
            [
                "dmih",
                "index",
                "query",
                "--bank",
                "b",
                "--index",
                "i",
                "--query-id",
                "0"
            ],
            &mut sink
        )
        .is_err());
        let err = run_from(
            [
                "dmih",
                "encode",
                "--model",
                "/nonexistent/m.bin",
                "--data",
                "d",
                "--out",
                "o",
            ],
            &mut sink,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("/nonexistent/m.bin"), "{err}");
    }

    #[test]
    fn selftest_command() {
        let mut out = Vec::new();
        run_from(["dmih", "selftest", "--trials", "4"], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().skip(1).all(|l| l.starts_with("PASS")), "{text}");
    }
}
