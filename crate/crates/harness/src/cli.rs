//! Subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rlv_core::scaling::{
    adaptive_length_select, best_of_k_estimate, best_of_k_exact, budget_force, majority_vote, sort_by_score, sweep,
    weighted_vote, BudgetSpec, Generator, Strategy, TaskSamples,
};
use rlv_core::task::{extract_answer, generate_task, parse_tokens, reward};
use rlv_core::trainer::{balance, train, RunArtifacts};
use rlv_core::verifier::{score_generative, verifier_accuracy, ScoredSolution, ValueAggregation};
use rlv_core::{rng, Decoding, Domain, Head, Policy64, Scorer, TaskInstance, Token, Vocab};

use crate::backend::{lift, BackendKind, BackendSpec, BuiltinGenerator, RemoteGenerator};
use crate::config::HarnessConfig;
use crate::error::{HarnessError, Result};
use crate::logs::{self, EpisodeRecord, MetricsRow, METRICS_HEADER};
use crate::params;

#[derive(Debug, Parser)]
#[command(name = "rlv", about = "Joint reasoner/verifier RL on modular arithmetic chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write artifacts under <out-dir>/<run_id>/
    Train(TrainArgs),
    /// Pass@1, verifier accuracy and voting accuracies on a generated eval set
    Eval(EvalArgs),
    /// Accuracy per (strategy, N) from one pool of samples per task
    SweepN(SweepArgs),
    /// Budget-forced accuracy per budget plus an adaptive-length row
    BudgetDemo(BudgetArgs),
    /// Best-of-k estimates from `alpha score` lines
    Bok(BokArgs),
    /// Reasoner and verifier accuracy on a logged probe set
    VerifyProbe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value`, applied after the file and environment
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct EvalSet {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub difficulty: u32,
    #[arg(long, default_value = "ADD_ONLY")]
    pub domain: Domain,
    #[arg(long, default_value_t = 200)]
    pub tasks: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the table here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub set: EvalSet,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value = "native")]
    pub scorer: String,
    /// Also write every sample as an episode log usable by `verify-probe`
    #[arg(long)]
    pub episodes_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub set: EvalSet,
    #[arg(long, default_value = "1,2,4,8,16", value_delimiter = ',')]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value = "majority,best_of_n,weighted", value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[command(flatten)]
    pub set: EvalSet,
    #[arg(long, default_value = "4,8,12,16", value_delimiter = ',')]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long, default_value_t = 2)]
    pub buffer: usize,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value = "END_THINK SEP")]
    pub conclusion: String,
    #[arg(long, default_value = "builtin")]
    pub backend: BackendKind,
    #[arg(long, default_value = "")]
    pub endpoint: String,
    #[arg(long, default_value = "rlv")]
    pub model: String,
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
}

#[derive(Debug, Args)]
pub struct BokArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to every k from 1 to N
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    /// generative, bce, reg, value-mean, value-last, native or all
    #[arg(long, default_value = "native")]
    pub scorer: String,
    /// Keep only records from this iteration
    #[arg(long)]
    pub iteration: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses a scorer name against the heads a policy actually has.
pub fn resolve_scorer(name: &str, policy: &Policy64) -> Result<Scorer> {
    let heads = policy.heads();
    let scorer = match name {
        "generative" => Scorer::Generative,
        "bce" => Scorer::BceHead,
        "reg" => Scorer::RegHead,
        "value-mean" => Scorer::PpoValue(ValueAggregation::Mean),
        "value-last" => Scorer::PpoValue(ValueAggregation::Last),
        "native" if heads.bce => Scorer::BceHead,
        "native" if heads.reg => Scorer::RegHead,
        "native" if heads.value => Scorer::PpoValue(ValueAggregation::Last),
        "native" => Scorer::Generative,
        other => return Err(HarnessError::Config(format!("unknown scorer `{other}`"))),
    };
    let needed = match scorer {
        Scorer::BceHead => Some(Head::Bce),
        Scorer::RegHead => Some(Head::Reg),
        Scorer::PpoValue(_) => Some(Head::Value),
        Scorer::Generative => None,
    };
    if let Some(h) = needed {
        if policy.head(h).is_none() {
            return Err(HarnessError::Config(format!("scorer `{name}` needs a {h:?} head the params do not have")));
        }
    }
    Ok(scorer)
}

pub fn scorer_name(s: Scorer) -> &'static str {
    match s {
        Scorer::Generative => "generative",
        Scorer::BceHead => "bce",
        Scorer::RegHead => "reg",
        Scorer::PpoValue(ValueAggregation::Mean) => "value-mean",
        Scorer::PpoValue(ValueAggregation::Last) => "value-last",
    }
}

/// Hex SHA-256 prefix of the config echo, which includes the seed.
pub fn run_id(echo: &str) -> String {
    let digest = Sha256::digest(echo.as_bytes());
    format!("{digest:x}")[..16].to_string()
}

fn emit(out: &Option<PathBuf>, stdout: &mut dyn Write, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| HarnessError::artifact(path, e)),
        None => stdout.write_all(text.as_bytes()).map_err(|e| HarnessError::Artifact(format!("stdout: {e}"))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::artifact(path, e))
}

pub fn cmd_train<I, K, V>(args: &TrainArgs, env: I, stdout: &mut dyn Write) -> Result<PathBuf>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let path = args.config.display().to_string();
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| HarnessError::Config(format!("{path}: cannot read config: {e}")))?;
    let config = HarnessConfig::load(Some((&path, &text)), env, &args.overrides)?;
    if config.backend.kind != BackendKind::Builtin {
        // Updates need gradients of the policy itself.
        return Err(HarnessError::Config("`backend.kind`: training runs only on the builtin policy".into()));
    }
    let artifacts: RunArtifacts<f64> = train(&config.run)?;
    let id = run_id(&config.echo);
    let dir = args.out_dir.join(&id);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::artifact(&dir, e))?;
    params::write(&dir.join("params.txt"), &artifacts.final_policy)?;
    let rows: Vec<MetricsRow> = artifacts.metrics.iter().map(MetricsRow::from).collect();
    write_file(&dir.join("metrics.csv"), &logs::csv_string(&METRICS_HEADER, &rows)?)?;
    let records: Vec<EpisodeRecord> = artifacts.episodes.iter().map(|e| EpisodeRecord::new(&id, e)).collect();
    logs::write_episodes(&dir.join("episodes.jsonl"), &records)?;
    write_file(&dir.join("config.txt"), &config.echo)?;
    writeln!(stdout, "run_id {id}\nartifacts {}", dir.display()).map_err(|e| HarnessError::Artifact(e.to_string()))?;
    Ok(dir)
}

fn eval_tasks(set: &EvalSet, vocab: &Vocab) -> Result<Vec<TaskInstance>> {
    (0..set.tasks)
        .map(|j| {
            let seed = rng::derive_seed(set.seed, &[0xE7A1, u64::from(set.difficulty), j as u64]);
            Ok(generate_task(vocab, set.difficulty, set.domain, seed)?)
        })
        .collect()
}

/// `samples` solutions per task, each task on its own stream.
fn sample_pool(policy: &Policy64, set: &EvalSet, tasks: &[TaskInstance], samples: usize, scorer: Scorer) -> Vec<Vec<ScoredSolution<f64>>> {
    let decoding = Decoding::Temperature(set.temperature);
    tasks
        .iter()
        .enumerate()
        .map(|(j, task)| {
            let mut r = rng::stream(set.seed, &[0x5A3B, j as u64]);
            (0..samples)
                .map(|_| {
                    let (solution, _) = policy.continue_from(&task.prompt, set.max_len, decoding, &mut r);
                    ScoredSolution {
                        answer: extract_answer(policy.vocab(), &solution),
                        score: scorer.score(policy, task, &solution),
                        solution,
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct EvalRow {
    difficulty: u32,
    domain: &'static str,
    tasks: usize,
    samples: usize,
    scorer: &'static str,
    pass_at_1: f64,
    coverage: f64,
    verifier_accuracy: f64,
    majority: f64,
    best_of_n: f64,
    weighted: f64,
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    if args.samples == 0 || args.set.tasks == 0 {
        return Err(HarnessError::Config("eval needs at least one task and one sample".into()));
    }
    let policy = params::read(&args.set.params)?;
    let scorer = resolve_scorer(&args.scorer, &policy)?;
    let vocab = *policy.vocab();
    let tasks = eval_tasks(&args.set, &vocab)?;
    let pool = sample_pool(&policy, &args.set, &tasks, args.samples, scorer);
    let (mut pass, mut cov, mut maj, mut bon, mut wt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut probe = Vec::new();
    let mut records = Vec::new();
    for (j, (task, sols)) in tasks.iter().zip(&pool).enumerate() {
        let correct: Vec<bool> = sols.iter().map(|s| s.answer == Some(task.ground_truth)).collect();
        let hit = |a: Option<u32>| f64::from(u8::from(a == Some(task.ground_truth)));
        pass += correct.iter().filter(|&&c| c).count() as f64 / sols.len() as f64;
        cov += f64::from(u8::from(correct.iter().any(|&c| c)));
        maj += hit(majority_vote(sols)?.chosen);
        wt += hit(weighted_vote(sols)?.chosen);
        let scores: Vec<f64> = sols.iter().map(|s| s.score).collect();
        bon += best_of_k_estimate::<f64>(&sort_by_score(&scores, &correct), sols.len())?;
        for (s, &c) in sols.iter().zip(&correct) {
            probe.push((task.clone(), s.solution.clone(), c));
            records.push(EpisodeRecord {
                run_id: "eval".into(),
                iteration: 0,
                group_id: j,
                prompt: rlv_core::task::render(&task.prompt),
                solution: rlv_core::task::render(&s.solution),
                reward: u8::from(c),
                old_logprobs: Vec::new(),
                verifier_score: s.score,
            });
        }
    }
    let n = tasks.len() as f64;
    let row = EvalRow {
        difficulty: args.set.difficulty,
        domain: args.set.domain.as_str(),
        tasks: tasks.len(),
        samples: args.samples,
        scorer: scorer_name(scorer),
        pass_at_1: pass / n,
        coverage: cov / n,
        verifier_accuracy: balanced_accuracy(&policy, scorer, probe),
        majority: maj / n,
        best_of_n: bon / n,
        weighted: wt / n,
    };
    if let Some(path) = &args.episodes_out {
        logs::write_episodes(path, &records)?;
    }
    let header = [
        "difficulty", "domain", "tasks", "samples", "scorer", "pass_at_1", "coverage", "verifier_accuracy", "majority",
        "best_of_n", "weighted",
    ];
    emit(&args.set.out, stdout, &logs::csv_string(&header, &[row])?)
}

/// Accuracy on the class-balanced subset; NaN when one class is missing.
fn balanced_accuracy(policy: &Policy64, scorer: Scorer, items: Vec<(TaskInstance, Vec<Token>, bool)>) -> f64 {
    let probe = balance(items);
    if probe.is_empty() {
        return f64::NAN;
    }
    let scores: Vec<f64> = probe.iter().map(|(t, s, _)| scorer.score(policy, t, s)).collect();
    let labels: Vec<bool> = probe.iter().map(|p| p.2).collect();
    verifier_accuracy(&scores, &labels, scorer.is_bounded()).unwrap_or(f64::NAN)
}

#[derive(Debug, Serialize)]
struct SweepCsvRow {
    strategy: &'static str,
    n: usize,
    accuracy: f64,
    stderr: f64,
}

pub fn cmd_sweep(args: &SweepArgs, stdout: &mut dyn Write) -> Result<()> {
    let max_n = args.n_grid.iter().copied().max().unwrap_or(0);
    if max_n == 0 || args.set.tasks == 0 || args.n_grid.contains(&0) {
        return Err(HarnessError::Config("n-grid entries and task count must be positive".into()));
    }
    let policy = params::read(&args.set.params)?;
    let tasks = eval_tasks(&args.set, policy.vocab())?;
    let pool = sample_pool(&policy, &args.set, &tasks, max_n, Scorer::Generative);
    let samples: Vec<TaskSamples<f64>> = tasks
        .iter()
        .zip(pool)
        .map(|(t, solutions)| TaskSamples { ground_truth: t.ground_truth, solutions })
        .collect();
    let mut r = rng::stream(args.set.seed, &[0x5EE9]);
    let rows: Vec<SweepCsvRow> = sweep(&samples, &args.n_grid, &args.strategies, args.trials, &mut r)?
        .into_iter()
        .map(|row| SweepCsvRow { strategy: row.strategy.as_str(), n: row.n, accuracy: row.accuracy, stderr: row.stderr })
        .collect();
    emit(&args.set.out, stdout, &logs::csv_string(&["strategy", "n", "accuracy", "stderr"], &rows)?)
}

#[derive(Debug, Serialize)]
struct BudgetRow {
    mode: &'static str,
    budget: usize,
    tau: f64,
    accuracy: f64,
    mean_length: f64,
    /// Exhausted budgets for fixed rows, unmet thresholds for the adaptive row.
    flag_rate: f64,
}

enum AnyGenerator<'a> {
    Builtin(BuiltinGenerator<'a>),
    Remote(RemoteGenerator),
}

impl Generator for AnyGenerator<'_> {
    fn generate(&mut self, prompt: &[Token], max_new: usize) -> rlv_core::Result<Vec<Token>> {
        match self {
            AnyGenerator::Builtin(g) => g.generate(prompt, max_new),
            AnyGenerator::Remote(g) => g.generate(prompt, max_new),
        }
    }
}

pub fn cmd_budget(args: &BudgetArgs, stdout: &mut dyn Write) -> Result<()> {
    if args.budgets.is_empty() || args.budgets.windows(2).any(|w| w[0] >= w[1]) || args.budgets[0] < 2 {
        return Err(HarnessError::Config("budgets must be increasing and at least 2".into()));
    }
    if args.samples == 0 || args.set.tasks == 0 {
        return Err(HarnessError::Config("budget-demo needs at least one task and one sample".into()));
    }
    let conclusion = parse_tokens(&args.conclusion).map_err(|e| HarnessError::Config(format!("conclusion: {e}")))?;
    let policy = params::read(&args.set.params)?;
    let vocab = *policy.vocab();
    let tasks = eval_tasks(&args.set, &vocab)?;
    let decoding = Decoding::Temperature(args.set.temperature);
    let make_generator = |j: usize| -> Result<AnyGenerator<'_>> {
        Ok(match args.backend {
            BackendKind::Builtin => AnyGenerator::Builtin(BuiltinGenerator {
                policy: &policy,
                decoding,
                rng: rng::stream(args.set.seed, &[0xB0D6, j as u64]),
            }),
            BackendKind::Remote => AnyGenerator::Remote(RemoteGenerator::new(
                BackendSpec {
                    endpoint: args.endpoint.clone(),
                    model: args.model.clone(),
                    timeout_ms: args.timeout_ms,
                    max_retries: args.max_retries,
                    ..BackendSpec::remote("")
                },
                args.set.temperature,
            )?),
        })
    };
    let spec_for = |budget: usize| BudgetSpec::new(budget, args.buffer.min(budget - 1).max(1), conclusion.clone());
    let n = tasks.len() as f64;
    let mut rows = Vec::new();
    for &budget in &args.budgets {
        let spec = spec_for(budget)?;
        let (mut acc, mut len, mut exhausted) = (0.0, 0.0, 0.0);
        for (j, task) in tasks.iter().enumerate() {
            let mut g = make_generator(j)?;
            let mut sols = Vec::with_capacity(args.samples);
            for _ in 0..args.samples {
                let forced = budget_force(&mut g, &task.prompt, &spec).map_err(lift)?;
                len += forced.tokens.len() as f64;
                exhausted += f64::from(u8::from(forced.exhausted));
                sols.push(ScoredSolution {
                    answer: extract_answer(&vocab, &forced.tokens),
                    score: score_generative(&policy, task, &forced.tokens),
                    solution: forced.tokens,
                });
            }
            acc += f64::from(u8::from(weighted_vote(&sols)?.chosen == Some(task.ground_truth)));
        }
        let draws = n * args.samples as f64;
        rows.push(BudgetRow { mode: "budget", budget, tau: f64::NAN, accuracy: acc / n, mean_length: len / draws, flag_rate: exhausted / draws });
    }
    let (mut acc, mut used, mut unmet) = (0.0, 0.0, 0.0);
    for (j, task) in tasks.iter().enumerate() {
        let mut g = make_generator(j)?;
        let mut scorer = |sol: &[Token]| score_generative(&policy, task, sol);
        let outcome = adaptive_length_select(
            &mut g,
            &mut scorer,
            &vocab,
            &task.prompt,
            &args.budgets,
            args.buffer,
            &conclusion,
            args.threshold,
            args.samples,
        )
        .map_err(lift)?;
        acc += f64::from(u8::from(outcome.answer == Some(task.ground_truth)));
        used += outcome.length_used as f64;
        unmet += f64::from(u8::from(!outcome.threshold_met));
    }
    rows.push(BudgetRow {
        mode: "adaptive",
        budget: *args.budgets.last().unwrap(),
        tau: args.threshold,
        accuracy: acc / n,
        mean_length: used / n,
        flag_rate: unmet / n,
    });
    let header = ["mode", "budget", "tau", "accuracy", "mean_length", "flag_rate"];
    emit(&args.set.out, stdout, &logs::csv_string(&header, &rows)?)
}

/// Reads `alpha score` pairs; `#` starts a comment.
pub fn read_bok_input(path: &Path) -> Result<(Vec<bool>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::artifact(path, e))?;
    let (mut alpha, mut scores) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| HarnessError::artifact(path, format!("line {}: {msg}", i + 1));
        let mut parts = line.split_whitespace();
        let a = match parts.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad("alpha must be 0 or 1")),
        };
        let s: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing or bad score"))?;
        if parts.next().is_some() || !s.is_finite() {
            return Err(bad("expected `alpha score`"));
        }
        alpha.push(a);
        scores.push(s);
    }
    Ok((alpha, scores))
}

#[derive(Debug, Serialize)]
struct BokRow {
    k: usize,
    estimate: f64,
    exact: String,
}

pub fn cmd_bok(args: &BokArgs, stdout: &mut dyn Write) -> Result<()> {
    let (alpha, scores) = read_bok_input(&args.input)?;
    let sorted = sort_by_score(&scores, &alpha);
    let ks: Vec<usize> = if args.k.is_empty() { (1..=sorted.len()).collect() } else { args.k.clone() };
    let rows = ks
        .into_iter()
        .map(|k| {
            let estimate = best_of_k_estimate::<f64>(&sorted, k).map_err(|e| HarnessError::Config(e.to_string()))?;
            let exact = best_of_k_exact(&sorted, k).map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(BokRow { k, estimate, exact: exact.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    emit(&args.out, stdout, &logs::csv_string(&["k", "estimate", "exact"], &rows)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub scorer: &'static str,
    pub reasoner_accuracy: f64,
    pub verifier_accuracy: f64,
    pub probe_size: usize,
}

pub fn probe_rows(args: &ProbeArgs) -> Result<Vec<ProbeRow>> {
    let policy = params::read(&args.params)?;
    let vocab = *policy.vocab();
    let records: Vec<EpisodeRecord> = logs::read_episodes(&args.episodes)?
        .into_iter()
        .filter(|r| args.iteration.is_none_or(|it| r.iteration == it))
        .collect();
    if records.is_empty() {
        return Err(HarnessError::Artifact(format!("{}: no episodes selected", args.episodes.display())));
    }
    let mut items = Vec::with_capacity(records.len());
    for rec in &records {
        let ep = rec.to_episode(&vocab)?;
        let correct = reward(&vocab, &ep.task, &ep.solution) == 1;
        items.push((ep.task, ep.solution, correct));
    }
    let reasoner = items.iter().filter(|i| i.2).count() as f64 / items.len() as f64;
    let scorers: Vec<Scorer> = if args.scorer == "all" {
        ["generative", "bce", "reg", "value-mean", "value-last"]
            .into_iter()
            .filter_map(|name| resolve_scorer(name, &policy).ok())
            .collect()
    } else {
        vec![resolve_scorer(&args.scorer, &policy)?]
    };
    let probe_size = balance(items.clone()).len();
    Ok(scorers
        .into_iter()
        .map(|s| ProbeRow {
            scorer: scorer_name(s),
            reasoner_accuracy: reasoner,
            verifier_accuracy: balanced_accuracy(&policy, s, items.clone()),
            probe_size,
        })
        .collect())
}

pub fn cmd_probe(args: &ProbeArgs, stdout: &mut dyn Write) -> Result<()> {
    let rows = probe_rows(args)?;
    emit(&args.out, stdout, &logs::csv_string(&["scorer", "reasoner_accuracy", "verifier_accuracy", "probe_size"], &rows)?)
}

pub fn execute<I, K, V>(cli: &Cli, env: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    match &cli.command {
        Command::Train(a) => cmd_train(a, env, stdout).map(|_| ()),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::SweepN(a) => cmd_sweep(a, stdout),
        Command::BudgetDemo(a) => cmd_budget(a, stdout),
        Command::Bok(a) => cmd_bok(a, stdout),
        Command::VerifyProbe(a) => cmd_probe(a, stdout),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<A, I, K, V>(args: A, env: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    A: IntoIterator,
    A::Item: Into<std::ffi::OsString> + Clone,
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, env, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
