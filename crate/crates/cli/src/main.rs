//! Command-line harness: dataset generation, training, evaluation,
//! explanation, inductive inference, and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numeric
//! divergence during training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use gbpgr::ground::ValueDomains;
use gbpgr::infer::{render_report, HeadValue};
use gbpgr::logic::{parse_rules, RuleSet};
use gbpgr::neural::CrossEntropyForm;
use gbpgr::tasks::{
    attribute_names, digit_domains, gen_attribute_dataset, gen_digit_dataset,
    gen_multi_digit_dataset, load_dataset, make_addition_rules, save_dataset, Dataset, Split,
};
use gbpgr::train::{
    evaluate, explain_dataset, infer_dataset, load_checkpoint, render_diagnostics,
    save_checkpoint, train, Checkpoint, EvalMode, EvalReport, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(
    name = "gbpgr",
    version,
    about = "Rule-grounded Markov logic coupled to neural predictors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (digit addition or attribute classes).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Report ranked rule evidence for transductive predictions.
    Explain(ExplainArgs),
    /// Apply a rewritten ruleset to a trained checkpoint, item by item.
    Infer(InferArgs),
    /// Train the full model plus the -SRM, -NRM and -OI variants and compare.
    Ablate(AblateArgs),
}

/// Training-config knobs shared by train and ablate. Precedence: flags beat
/// the config file, which beats the built-in defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Plain `key = value` file mirroring the training config fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Task-loss factor.
    #[arg(long)]
    alpha: Option<f64>,
    /// Symbolic-objective factor.
    #[arg(long)]
    beta: Option<f64>,
    /// Concept cross-entropy factor.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Digit-addition data with this operand width.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    digits: Option<u8>,
    /// Attribute ruleset; selects the attribute task when --digits is absent.
    #[arg(long, value_name = "FILE")]
    rules: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the matching addition ruleset here (digit tasks only).
    #[arg(long, value_name = "FILE")]
    rules_out: Option<PathBuf>,
    /// Training items: digit pairs, or items per class for the attribute task.
    #[arg(long, default_value_t = 300)]
    count: usize,
    /// Held-out test items (digit tasks; the attribute task holds out a class).
    #[arg(long, default_value_t = 200)]
    test_count: usize,
    /// Bit-flip probability on generated inputs.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Ruleset to ground and train against.
    #[arg(long, value_name = "FILE")]
    rules: PathBuf,
    /// Dataset file produced by gen-data (or the same format).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output directory: checkpoint `final`, diagnostics.txt, config.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Operand width when training on digit glyphs; sets the value ranges.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    digits: Option<u8>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(ValueEnum, Clone, Copy)]
enum Mode {
    /// Revise pseudo-labels against the checkpoint's own rules.
    Transductive,
    /// Apply a rewritten ruleset to the trained concept scorers.
    Inductive,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset file; the test split is scored when one is tagged.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Transductive)]
    mode: Mode,
    /// Required for inductive mode; checked against the checkpoint otherwise.
    #[arg(long, value_name = "FILE")]
    rules: Option<PathBuf>,
    /// Directory for metrics.txt (also printed to stdout).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Checkpoint written by train.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Items to explain (test split when one is tagged, else every record).
    #[arg(long, visible_alias = "input", value_name = "FILE")]
    data: PathBuf,
    /// Directory for report.txt (also printed to stdout).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by train.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Rewritten ruleset for the new task.
    #[arg(long, value_name = "FILE")]
    rules: PathBuf,
    /// Items for the new task.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Directory for inferences.txt (also printed to stdout).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Ruleset to ground and train against.
    #[arg(long, value_name = "FILE")]
    rules: PathBuf,
    /// Dataset file shared by every variant.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Directory for ablation.txt (also printed to stdout).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Operand width when training on digit glyphs.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    digits: Option<u8>,
    #[command(flatten)]
    overrides: Overrides,
}

enum Failure {
    Usage(String),
    Data(String),
    Diverged(String),
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn data_err(msg: impl Into<String>) -> Failure {
    Failure::Data(msg.into())
}

/// Divergence keeps its own exit code; everything else out of the engine is
/// a data-level failure.
fn engine(err: TrainError) -> Failure {
    match err {
        TrainError::Diverged { round, .. } => {
            Failure::Diverged(format!("training diverged at round {round}"))
        }
        other => data_err(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let shown = err.print().is_ok();
            return match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => {
                    if !shown {
                        eprintln!("bad usage");
                    }
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Explain(args) => run_explain(&args),
        Command::Infer(args) => run_infer(&args),
        Command::Ablate(args) => run_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (code, msg) = match &failure {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Diverged(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn read_text(path: &Path, flag: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("--{flag} {}: {e}", path.display())))
}

fn load_rules(path: &Path) -> CliResult<RuleSet> {
    let text = read_text(path, "rules")?;
    parse_rules(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Loads a dataset file, inferring entities-per-item from the first record's
/// byte count and the given per-entity width.
fn load_data(path: &Path, input_dim: usize) -> CliResult<Dataset> {
    let text = read_text(path, "data")?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| data_err(format!("{}: empty dataset", path.display())))?;
    let blob = first.rsplit('\t').next().unwrap_or("").trim();
    let bytes = BASE64
        .decode(blob)
        .map_err(|e| data_err(format!("{}: bad base64 in first record: {e}", path.display())))?;
    if input_dim == 0 || bytes.is_empty() || bytes.len() % input_dim != 0 {
        return Err(data_err(format!(
            "{}: record holds {} bytes, not a multiple of the entity width {}",
            path.display(),
            bytes.len(),
            input_dim
        )));
    }
    let entities = bytes.len() / input_dim;
    load_dataset(&mut text.as_bytes(), input_dim, entities)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|e| usage(format!("--checkpoint {}: {e}", path.display())))?;
    load_checkpoint(&mut bytes.as_slice())
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_out(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(format!("--out {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> CliResult<()> {
    let mut bytes = Vec::new();
    save_checkpoint(checkpoint, &mut bytes).map_err(engine)?;
    fs::write(path, bytes).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Per-entity input width and value ranges for the dataset the rules expect.
fn task_shape(rules: &RuleSet, digits: Option<u8>) -> CliResult<(usize, ValueDomains)> {
    if let Some(d) = digits {
        let domains = digit_domains(d as usize).map_err(|e| data_err(e.to_string()))?;
        return Ok((64, domains));
    }
    if rules.predicates.iter().any(|p| p.value_arity > 0) {
        return Err(usage(
            "ruleset scores value predicates; pass --digits {1,2} to set their ranges",
        ));
    }
    let attrs = attribute_names(rules);
    if attrs.is_empty() {
        return Err(usage(
            "ruleset has no latent attribute predicates; pass --digits for glyph data",
        ));
    }
    Ok((attrs.len(), ValueDomains::default()))
}

fn set_field(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("bad value `{v}`"))
    }
    match key {
        "alpha" => cfg.alpha = num(value)?,
        "beta" => cfg.beta = num(value)?,
        "gamma" => cfg.gamma = num(value)?,
        "em_rounds" => cfg.em_rounds = num(value)?,
        "e_passes" => cfg.e_passes = num(value)?,
        "m_steps" => cfg.m_steps = num(value)?,
        "lr_theta1" => cfg.lr_theta1 = num(value)?,
        "lr_theta2" => cfg.lr_theta2 = num(value)?,
        "lr_w" => cfg.lr_w = num(value)?,
        "batch" => cfg.batch = num(value)?,
        "seed" => cfg.seed = num(value)?,
        "grounding_cap" => cfg.grounding_cap = num(value)?,
        "hidden_dim" => cfg.hidden_dim = num(value)?,
        "feature_dim" => cfg.feature_dim = num(value)?,
        "l_cro_form" => {
            cfg.l_cro_form = match value {
                "paper-literal" => CrossEntropyForm::PaperLiteral,
                "conventional" => CrossEntropyForm::Conventional,
                other => return Err(format!("unknown l_cro_form `{other}`")),
            }
        }
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> CliResult<()> {
    let text = read_text(path, "config")?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            usage(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                lineno + 1
            ))
        })?;
        set_field(cfg, key.trim(), value.trim())
            .map_err(|msg| usage(format!("{}:{}: {msg}", path.display(), lineno + 1)))?;
    }
    Ok(())
}

fn resolve_config(ov: &Overrides) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &ov.config {
        apply_config_file(&mut cfg, path)?;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = ov.beta {
        cfg.beta = v;
    }
    if let Some(v) = ov.gamma {
        cfg.gamma = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn render_config(cfg: &TrainConfig) -> String {
    let form = match cfg.l_cro_form {
        CrossEntropyForm::PaperLiteral => "paper-literal",
        CrossEntropyForm::Conventional => "conventional",
    };
    format!(
        "alpha = {}\nbeta = {}\ngamma = {}\nem_rounds = {}\ne_passes = {}\nm_steps = {}\n\
         lr_theta1 = {}\nlr_theta2 = {}\nlr_w = {}\nbatch = {}\nseed = {}\n\
         grounding_cap = {}\nl_cro_form = {}\nhidden_dim = {}\nfeature_dim = {}\n",
        cfg.alpha,
        cfg.beta,
        cfg.gamma,
        cfg.em_rounds,
        cfg.e_passes,
        cfg.m_steps,
        cfg.lr_theta1,
        cfg.lr_theta2,
        cfg.lr_w,
        cfg.batch,
        cfg.seed,
        cfg.grounding_cap,
        form,
        cfg.hidden_dim,
        cfg.feature_dim
    )
}

fn render_metrics(report: &EvalReport) -> String {
    let m = &report.metrics;
    format!(
        "items = {}\nacc = {:.4}\ntp = {}\ntn = {}\nfp = {}\nfn = {}\n",
        report.predictions.len(),
        m.acc,
        m.tp,
        m.tn,
        m.fp,
        m.fn_
    )
}

fn run_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let dataset = match (args.digits, &args.rules) {
        (Some(d), _) => {
            let gen = |seed: u64, n: usize| match d {
                1 => gen_digit_dataset(seed, n, args.noise),
                _ => gen_multi_digit_dataset(seed, n, args.noise),
            };
            let mut set = gen(args.seed, args.count).map_err(|e| data_err(e.to_string()))?;
            if args.test_count > 0 {
                let test = gen(args.seed.wrapping_add(1), args.test_count)
                    .map_err(|e| data_err(e.to_string()))?
                    .with_split(Split::Test);
                set.items.extend(test.items);
            }
            set
        }
        (None, Some(rules_path)) => {
            let rules = load_rules(rules_path)?;
            gen_attribute_dataset(args.seed, args.count, args.noise, &rules, 1)
                .map_err(|e| data_err(e.to_string()))?
        }
        (None, None) => {
            return Err(usage(
                "pass --digits for the addition tasks or --rules for the attribute task",
            ))
        }
    };
    if let Some(rules_out) = &args.rules_out {
        let d = args
            .digits
            .ok_or_else(|| usage("--rules-out applies to the digit tasks; pass --digits"))?;
        let ruleset = make_addition_rules(d as usize).map_err(|e| data_err(e.to_string()))?;
        fs::write(rules_out, ruleset.render())
            .map_err(|e| data_err(format!("{}: {e}", rules_out.display())))?;
        println!("wrote ruleset to {}", rules_out.display());
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| data_err(format!("--out {}: {e}", parent.display())))?;
        }
    }
    let mut bytes = Vec::new();
    save_dataset(&dataset, &mut bytes).map_err(|e| data_err(e.to_string()))?;
    fs::write(&args.out, bytes).map_err(|e| data_err(format!("{}: {e}", args.out.display())))?;
    let test = dataset.split_items(Split::Test).count();
    println!(
        "wrote {} items ({} train, {} test) to {}",
        dataset.items.len(),
        dataset.items.len() - test,
        test,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    let rules = load_rules(&args.rules)?;
    let (input_dim, domains) = task_shape(&rules, args.digits)?;
    let dataset = load_data(&args.data, input_dim)?;
    let cfg = resolve_config(&args.overrides)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| usage(format!("--out {}: {e}", args.out.display())))?;
    match train(&cfg, &dataset, &rules, &domains) {
        Ok(outcome) => {
            write_out(&args.out, "diagnostics.txt", &render_diagnostics(&outcome.diagnostics))?;
            write_out(&args.out, "config.txt", &render_config(&cfg))?;
            write_checkpoint(&args.out.join("final"), &outcome.checkpoint)?;
            if let Some(last) = outcome.diagnostics.last() {
                println!(
                    "trained {} rounds; objective {:.6}, train acc {:.4}",
                    outcome.diagnostics.len(),
                    last.objective,
                    last.train_acc
                );
            }
            println!("checkpoint: {}", args.out.join("final").display());
            Ok(())
        }
        Err(TrainError::Diverged { round, last_good }) => {
            let rescue = args.out.join("last_good");
            write_checkpoint(&rescue, &last_good)?;
            Err(Failure::Diverged(format!(
                "training diverged at round {round}; last good checkpoint written to {}",
                rescue.display()
            )))
        }
        Err(other) => Err(engine(other)),
    }
}

fn run_eval(args: &EvalArgs) -> CliResult<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let dataset = load_data(&args.data, checkpoint.task_net.input_dim)?;
    let rules = match &args.rules {
        Some(path) => Some(load_rules(path)?),
        None => None,
    };
    let mode = match args.mode {
        Mode::Transductive => EvalMode::Transductive,
        Mode::Inductive => EvalMode::Inductive,
    };
    let report = evaluate(&checkpoint, &dataset, mode, rules.as_ref()).map_err(engine)?;
    let text = render_metrics(&report);
    print!("{text}");
    if let Some(dir) = &args.out {
        write_out(dir, "metrics.txt", &text)?;
    }
    Ok(())
}

fn run_explain(args: &ExplainArgs) -> CliResult<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let dataset = load_data(&args.data, checkpoint.task_net.input_dim)?;
    let explained = explain_dataset(&checkpoint, &dataset).map_err(engine)?;
    let mut text = String::new();
    let mut correct = 0;
    for (i, item) in explained.iter().enumerate() {
        if item.prediction == item.truth {
            correct += 1;
        }
        let _ = writeln!(text, "item {i}: truth = {}", item.truth);
        text.push_str(&render_report(
            &item.explanation,
            &item.prediction.to_string(),
        ));
        text.push('\n');
    }
    let _ = writeln!(
        text,
        "explained {} items, {correct} predicted correctly",
        explained.len()
    );
    print!("{text}");
    if let Some(dir) = &args.out {
        write_out(dir, "report.txt", &text)?;
    }
    Ok(())
}

fn run_infer(args: &InferArgs) -> CliResult<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let rules = load_rules(&args.rules)?;
    let dataset = load_data(&args.data, checkpoint.task_net.input_dim)?;
    let results = infer_dataset(&checkpoint, &rules, &dataset).map_err(engine)?;
    let mut text = String::new();
    let mut hits = 0;
    for (i, (truth, result)) in results.iter().enumerate() {
        let shown = match &result.head_value {
            HeadValue::Int(v) => v.to_string(),
            HeadValue::Label(name) => name.clone(),
        };
        if shown == truth.to_string() {
            hits += 1;
        }
        let _ = writeln!(text, "item {i}: predicted = {shown}, truth = {truth}");
        for step in &result.reasoning_path {
            let _ = writeln!(text, "  {} (score {:.4})", step.atom, step.score);
        }
    }
    let _ = writeln!(text, "exact match {hits}/{}", results.len());
    print!("{text}");
    if let Some(dir) = &args.out {
        write_out(dir, "inferences.txt", &text)?;
    }
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> CliResult<()> {
    let rules = load_rules(&args.rules)?;
    let (input_dim, domains) = task_shape(&rules, args.digits)?;
    let dataset = load_data(&args.data, input_dim)?;
    let base = resolve_config(&args.overrides)?;
    let variants = [
        ("full", 1.0, 1.0, 1.0),
        ("-SRM", 1.0, 0.0, 0.0),
        ("-NRM", 0.5, 1.0, 1.0),
        ("-OI", 1.0, 1.0, 0.0),
    ];
    let mut text = String::from("variant  alpha  beta  gamma  acc\n");
    for (name, alpha, beta, gamma) in variants {
        let cfg = TrainConfig {
            alpha,
            beta,
            gamma,
            ..base.clone()
        };
        let outcome = train(&cfg, &dataset, &rules, &domains).map_err(|e| match e {
            TrainError::Diverged { round, .. } => Failure::Diverged(format!(
                "variant {name} diverged at round {round}"
            )),
            other => engine(other),
        })?;
        let report =
            evaluate(&outcome.checkpoint, &dataset, EvalMode::Transductive, None).map_err(engine)?;
        let _ = writeln!(
            text,
            "{name:<9}{alpha:<7.2}{beta:<6.2}{gamma:<7.2}{acc:.4}",
            acc = report.metrics.acc
        );
    }
    print!("{text}");
    if let Some(dir) = &args.out {
        write_out(dir, "ablation.txt", &text)?;
    }
    Ok(())
}
