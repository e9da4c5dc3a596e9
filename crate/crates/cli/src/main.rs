//! `promptforge`: train prompts, compare them across environments, or serve
//! the built-in reward endpoint.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use promptforge::env::{EnvSpec, StubBackend, StubServer};
use promptforge::harness::{select_top_prompts, train_with, transfer_matrix, ResultsFile, TopPrompt, TrainSetup, TransferMetric};
use promptforge::{Checkpoint, Environment, Error, Example, LearnerState, Policy, PolicyConfig};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "promptforge",
    version,
    about = "Discrete prompt optimization with on-policy soft Q-learning",
    after_help = "Logging: set PROMPTFORGE_LOG (default: info), e.g. PROMPTFORGE_LOG=debug.\n\
                  Exit codes: 0 ok, 1 bad config or input, 2 environment unreachable or port busy, 3 non-finite loss."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a prompt policy and write checkpoint, log and results.
    Train {
        /// JSON run config.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the training and policy seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score prompts on several environments and write a CSV matrix.
    Transfer {
        /// JSON list of prompts, each a list of token strings.
        #[arg(long)]
        prompts: PathBuf,
        /// Environment spec, e.g. `classifier:seed=1` or `remote:http://host:8080`; repeatable.
        #[arg(long = "env", required = true)]
        envs: Vec<String>,
        #[arg(long, value_enum, default_value_t = Metric::MeanReward)]
        metric: Metric,
        /// Evaluations averaged per cell for stochastic environments.
        #[arg(long, default_value_t = 1)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the CSV.
        #[arg(long, default_value = "transfer.csv")]
        output: PathBuf,
    },
    /// Serve `/v1/info` and `/v1/evaluate` from the built-in environments.
    ServeStub {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Seed of the served classifier and style simulator.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    MeanReward,
    Accuracy,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            e if e.is_remote() => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::config(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROMPTFORGE_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            output_dir,
        } => cmd_train(&config, seed, output_dir),
        Command::Transfer {
            prompts,
            envs,
            metric,
            bootstrap,
            seed,
            output,
        } => cmd_transfer(&prompts, &envs, metric, bootstrap, seed, &output),
        Command::ServeStub {
            port,
            host,
            seed,
            workers,
        } => cmd_serve_stub(&host, port, seed, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(config_path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let run = RunConfig::load(config_path).map_err(Failure::config)?;
    let built = run.env.build()?;
    let env = built.env.as_ref();
    let mut train_cfg = run
        .train_config(&env.task())
        .map_err(|e| Failure::config(format!("{}: {e}", config_path.display())))?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    let policy_cfg = PolicyConfig {
        prompt_length: run.prompt_length(env.prompt_length_bounds()),
        adapter_hidden: run.policy.adapter_hidden,
        adapter_init_scale: run.policy.adapter_init_scale,
        condition_on_input: run.policy.condition_on_input,
        seed: train_cfg.seed,
        ..PolicyConfig::new(env.vocab().len(), 0)
    };
    let learner = LearnerState::new(Policy::new(policy_cfg)?, run.learner.clone())?;

    let out_dir = output_dir.unwrap_or_else(|| run.output_dir(config_path));
    std::fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?);

    log::info!(
        "training on {} for {} steps (T = {}, seed {})",
        env.name(),
        train_cfg.total_steps,
        learner.online.prompt_length(),
        train_cfg.seed
    );
    let setup = TrainSetup {
        env,
        data: &built.data,
        config: &train_cfg,
        action_mask: None,
    };
    let outcome = train_with(&setup, learner, |record| {
        writeln!(log_file, "{}", serde_json::to_string(record)?)?;
        if let Some(v) = &record.validation {
            log::info!("step {}: loss {:.4}, validation {:.4} for {:?}", record.step, record.loss, v.metric, v.prompt_text);
        }
        Ok(())
    })?;
    log_file.flush().map_err(|e| io_failure(&log_path, e))?;

    let ckpt_path = out_dir.join("checkpoint.json");
    Checkpoint::from_policy(&outcome.learner.online).save(&ckpt_path)?;

    let available = outcome.log.validations().map(|(_, v)| v.prompt_text.clone()).collect::<std::collections::HashSet<_>>().len();
    let top = match run.top_prompts.min(available) {
        0 => Vec::new(),
        k => select_top_prompts(&outcome.log, k)?,
    };
    let mut effective = run.clone();
    if let serde_json::Value::Object(m) = serde_json::to_value(&train_cfg).map_err(Error::from)? {
        effective.train = m;
    }
    let results = ResultsFile {
        config: serde_json::to_value(&effective).map_err(Error::from)?,
        seeds: vec![train_cfg.seed],
        top_prompts: top
            .into_iter()
            .map(|(_, v)| TopPrompt {
                text: v.prompt_text,
                metric: v.metric,
            })
            .collect(),
        final_greedy_prompt: outcome.final_prompt.text().to_string(),
        final_greedy_reward: outcome.final_validation.mean_reward,
        transfer_matrix: None,
        finished_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let results_path = out_dir.join("results.json");
    results.save(&results_path)?;
    println!(
        "final greedy prompt {:?}, reward {:.4}; wrote {}",
        results.final_greedy_prompt,
        results.final_greedy_reward,
        out_dir.display()
    );
    Ok(())
}

fn cmd_transfer(prompts_path: &Path, specs: &[String], metric: Metric, bootstrap: usize, seed: u64, output: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(prompts_path).map_err(|e| io_failure(prompts_path, e))?;
    let prompts: Vec<Vec<String>> =
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: expected a JSON list of token lists: {e}", prompts_path.display())))?;
    let named: Vec<(String, Vec<String>)> = prompts.into_iter().map(|p| (p.join(" "), p)).collect();
    let mut built = Vec::with_capacity(specs.len());
    for s in specs {
        let spec: EnvSpec = s.parse().map_err(|e: Error| Failure::config(format!("--env {s}: {e}")))?;
        built.push(spec.build()?);
    }
    let envs: Vec<(&dyn Environment, &[Example])> = built.iter().map(|b| (b.env.as_ref(), b.data.validation.as_slice())).collect();
    let metric = match metric {
        Metric::MeanReward => TransferMetric::MeanReward,
        Metric::Accuracy => TransferMetric::Accuracy,
    };
    let matrix = transfer_matrix(&named, &envs, metric, bootstrap.max(1), seed)?;
    let csv = matrix.to_csv();
    print!("{csv}");
    std::fs::write(output, &csv).map_err(|e| io_failure(output, e))?;
    Ok(())
}

fn cmd_serve_stub(host: &str, port: u16, seed: u64, workers: usize) -> Result<(), Failure> {
    let backend = StubBackend::desk(seed)?;
    let server = StubServer::start(&format!("{host}:{port}"), Arc::new(backend), workers).map_err(|e| Failure {
        code: 2,
        message: format!("cannot listen on {host}:{port}: {e}"),
    })?;
    println!("serving on {}", server.url());
    server.join();
    Ok(())
}
