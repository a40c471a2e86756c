use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualgen::diffusion::GuidanceScales;
use dualgen::evalharness::{
    chance_levels, evaluate, random_baseline, read_samples, write_report, write_samples, EvalReport, Sample, Task,
};
use dualgen::model::{read_checkpoint, write_checkpoint, DualModel, ModelConfig};
use dualgen::pipeline::{
    infer_gor, infer_pfitb, train_stage, Generated, InferenceOptions, LogRow, OptimizerKind, Stage, TrainConfig,
    TrainObserver,
};
use dualgen::synthworld::{gen_world, read_dataset, write_dataset, Dataset, Split, WorldSpec};
use dualgen::{Error, Result};

#[derive(Parser)]
#[command(name = "dualgen", version, about = "Personalized outfit generation on a synthetic fashion world")]
struct Cli {
    /// Flat `key=value` file whose keys are flag names of the subcommand; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as a dataset file.
    GenWorld(GenWorldArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Generate items for fill-in-the-blank or whole-outfit requests.
    Infer(InferArgs),
    /// Score a samples file with the oracle metrics.
    Eval(EvalArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct GenWorldArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    outfits: usize,
    #[arg(long, default_value_t = 4)]
    outfit_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adamw,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    stage: u32,
    /// Checkpoint to start from; required for stages 2 and 3.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// CSV metrics log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-5)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.2)]
    lambda_text: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_m: f64,
    #[arg(long, default_value_t = 0.5)]
    drop_m: f64,
    #[arg(long, default_value_t = 0.1)]
    drop_p: f64,
    #[arg(long, default_value_t = 0.1)]
    drop_d: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Also write `<out>.step<N>` every N steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Model shape for a fresh stage-1 run; ignored with `--init`.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TaskArg {
    Pfitb,
    Gor,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Number of requests. Fill-in requests take the first test outfits.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Single fill-in request for this outfit (its owner is the user unless `--user` is given).
    #[arg(long)]
    outfit: Option<usize>,
    #[arg(long)]
    user: Option<usize>,
    /// Comma-separated categories, one round each (outfit generation).
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// Samples per request with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8.0)]
    s_d: f64,
    #[arg(long, default_value_t = 7.0)]
    s_m: f64,
    #[arg(long, default_value_t = 8.0)]
    s_p: f64,
    #[arg(long, default_value_t = 50)]
    image_steps: usize,
    #[arg(long, default_value_t = 8)]
    text_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_m: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BaselineArg {
    Random,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also score a random baseline on the same requests and print analytic chance levels.
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let run = match cli.command {
        Command::GenWorld(a) => cmd_gen_world(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { 2 } else { 1 })
}

/// Splices `--key value` pairs from the config file in front of the
/// command-line flags, so later (command-line) occurrences override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = if let Some(p) = argv[pos].strip_prefix("--config=") {
        p.to_string()
    } else {
        argv.get(pos + 1).cloned().ok_or_else(|| Error::Usage("--config needs a path".into()))?
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Usage(format!("config {path}: {e}")))?;
    let entries = parse_config(&text)?;
    let mut rest: Vec<String> = argv.clone();
    rest.drain(pos..if argv[pos].contains('=') { pos + 1 } else { pos + 2 });
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map(|i| i + 1)
        .ok_or_else(|| Error::Usage("missing subcommand".into()))?;
    let mut out: Vec<String> = rest[..=sub].to_vec();
    for (k, v) in entries {
        out.push(format!("--{k}"));
        out.push(v);
    }
    out.extend_from_slice(&rest[sub + 1..]);
    Ok(out)
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().trim_start_matches("--").to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(open(path)?)
}

fn load_checkpoint(path: &Path) -> Result<DualModel<f32>> {
    read_checkpoint(open(path)?)
}

fn save_checkpoint(model: &DualModel<f32>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_gen_world(a: GenWorldArgs) -> Result<()> {
    let spec = WorldSpec {
        seed: a.seed,
        n_items: a.items,
        n_users: a.users,
        n_outfits: a.outfits,
        outfit_size: a.outfit_size,
        noise: a.noise,
        test_fraction: a.test_fraction,
        ..WorldSpec::default()
    };
    let ds = gen_world(&spec)?;
    write_dataset(&ds, create(&a.out)?)?;
    let test = ds.outfits.iter().filter(|o| o.split == Split::Test).count();
    println!(
        "items={} users={} outfits={} test_outfits={} eta_max={}",
        ds.items.len(),
        ds.users.len(),
        ds.outfits.len(),
        test,
        ds.eta_max
    );
    Ok(())
}

struct FileObserver {
    log: BufWriter<File>,
    out: PathBuf,
}

impl TrainObserver for FileObserver {
    fn log(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.log, "{row}")?;
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, model: &DualModel<f32>) -> Result<()> {
        let mut name = self.out.clone().into_os_string();
        name.push(format!(".step{step}"));
        save_checkpoint(model, Path::new(&name))
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let stage = Stage::from_number(a.stage)?;
    if stage != Stage::Warmup && a.init.is_none() {
        return Err(Error::Usage(format!("stage {} needs --init <checkpoint>", a.stage)));
    }
    let ds = load_dataset(&a.data)?;
    let model = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => DualModel::new(ModelConfig {
            depth: a.depth,
            width: a.width,
            heads: a.heads,
            latent_shape: ds.latent_shape(),
            seed: a.seed,
            ..ModelConfig::default()
        })?,
    };
    let mut cfg = TrainConfig::new(stage);
    cfg.steps = a.steps.unwrap_or(stage.default_steps());
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr;
    cfg.weight_decay = a.weight_decay;
    cfg.optimizer = match a.optimizer {
        OptimizerArg::Sgd => OptimizerKind::Sgd,
        OptimizerArg::Adamw => OptimizerKind::adamw(),
    };
    cfg.weights.lambda_text = a.lambda_text;
    cfg.weights.lambda_m = a.lambda_m;
    cfg.weights.drop_m = a.drop_m;
    cfg.weights.drop_p = a.drop_p;
    cfg.weights.drop_d = a.drop_d;
    cfg.temperature = a.temperature;
    cfg.seed = a.seed;
    cfg.log_every = a.log_every;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.validate()?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut log = create(&log_path)?;
    writeln!(log, "{}", LogRow::HEADER)?;
    let mut obs = FileObserver { log, out: a.out.clone() };
    let model = train_stage(model, &ds, &cfg, &mut obs)?;
    obs.log.flush()?;
    save_checkpoint(&model, &a.out)?;
    println!("stage={} steps={} checkpoint={}", a.stage, cfg.steps, a.out.display());
    Ok(())
}

fn to_sample(g: Generated, task: Task, user: usize, outfit: Option<usize>, categories: &[String], seed: u64) -> Sample {
    Sample {
        task,
        user,
        outfit,
        categories: categories.to_vec(),
        category: g.category,
        seed,
        round: g.round,
        caption: g.caption,
        latent: g.latent,
    }
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let opts = InferenceOptions {
        scales: GuidanceScales::new(a.s_d, a.s_m, a.s_p)?,
        image_steps: a.image_steps,
        text_steps: a.text_steps,
        temperature: a.temperature,
        lambda_m: a.lambda_m,
        pref_len: model.config.pref_len,
    };
    if a.repeats == 0 || a.n == 0 {
        return Err(Error::Usage("--n and --repeats must be positive".into()));
    }
    let seeds = (0..a.repeats as u64).map(|r| a.seed + r);
    let mut samples = Vec::new();
    match a.task {
        TaskArg::Pfitb => {
            let requests: Vec<(usize, usize)> = match a.outfit {
                Some(o) => vec![(a.user.unwrap_or(ds.outfit(o)?.user), o)],
                None => ds
                    .outfits
                    .iter()
                    .filter(|o| o.split == Split::Test)
                    .take(a.n)
                    .map(|o| (a.user.unwrap_or(o.user), o.id))
                    .collect(),
            };
            for (user, outfit) in requests {
                for seed in seeds.clone() {
                    let g = infer_pfitb(&model, &ds, user, outfit, &opts, seed)?;
                    samples.push(to_sample(g, Task::Pfitb, user, Some(outfit), &[], seed));
                }
            }
        }
        TaskArg::Gor => {
            if a.categories.is_empty() {
                return Err(Error::Usage("--categories is required for outfit generation".into()));
            }
            let users: Vec<usize> = match a.user {
                Some(u) => vec![u],
                None => (0..a.n).map(|i| i % ds.users.len()).collect(),
            };
            for user in users {
                for seed in seeds.clone() {
                    for g in infer_gor(&model, &ds, user, &a.categories, &opts, seed)? {
                        samples.push(to_sample(g, Task::Gor, user, None, &a.categories, seed));
                    }
                }
            }
        }
    }
    write_samples(&samples, create(&a.out)?)?;
    println!("records={} out={}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let samples = read_samples(open(&a.samples)?, &ds)?;
    let mut reports = vec![evaluate(&ds, &samples, a.seed, "model")?];
    if a.baseline == Some(BaselineArg::Random) {
        let base = random_baseline(&ds, &samples, a.seed);
        reports.push(evaluate(&ds, &base, a.seed, "random")?);
    }
    let mut out = create(&a.out)?;
    write_report(&reports, &mut out)?;
    if a.baseline.is_some() {
        let c = chance_levels(&ds);
        writeln!(out, "chance.category_accuracy = {}", c.category_accuracy)?;
        writeln!(out, "chance.alignment = {}", c.alignment)?;
        writeln!(out, "chance.single_value_personalization = {}", c.single_value_personalization)?;
    }
    out.flush()?;
    for r in &reports {
        print_headline(r);
    }
    Ok(())
}

fn print_headline(r: &EvalReport) {
    for (task, m) in &r.tasks {
        println!(
            "{} {}: category_accuracy={:.4} compatibility={:.4} personalization={:.4} alignment={:.4}",
            r.label,
            task.name(),
            m.category_accuracy.value(),
            m.compatibility.value(),
            m.personalization.value(),
            m.alignment.value()
        );
    }
}
