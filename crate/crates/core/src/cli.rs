//! Command-line front end. [`run`] parses arguments and dispatches to the
//! library; [`run_with_registry`] lets a downstream binary register plugins
//! first.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::algo::Registry;
use crate::config::load_config;
use crate::env::{generate_instances, read_instances, write_instances, EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, write_plot_data, Trainer};
use crate::proto::{DumpRecord, Observation};

#[derive(Debug, Parser)]
#[command(
    name = "rlforge",
    version,
    about = "Desk-scale RL post-training for token MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes metrics, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path overrides such as `algorithm.adv_estimator=rloo`.
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one CSV per metric under `OUT/plots`.
        #[arg(long)]
        plot_data: bool,
    },
    /// Greedy evaluation of a checkpoint on an instance file.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        overrides: Vec<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a deterministic instance file.
    GenData {
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        num_symbols: Option<usize>,
        #[arg(long)]
        max_turns: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Render a trajectory dump.
    Inspect {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        row: Option<usize>,
    },
    /// List registered estimators, policy losses and reward functions.
    Plugins,
}

/// Parses `args` (including the program name) and runs the command with the
/// built-in registry.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with_registry(args, Registry::with_builtins())
}

/// Like [`run`] with a caller-populated registry. Returns the text the
/// command would print.
pub fn run_with_registry<I, T>(args: I, registry: Registry) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli.command, registry)
}

pub fn execute(command: Command, registry: Registry) -> Result<String> {
    match command {
        Command::Train {
            config,
            overrides,
            out,
            plot_data,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let mut trainer = Trainer::new(cfg, registry)?.with_output(&out)?;
            let summary = trainer.run()?;
            let mut text = String::new();
            if let Some(last) = summary.history.last() {
                let _ = writeln!(
                    text,
                    "finished step {}: mean_reward {:.4} accuracy {:.4}",
                    last.global_step, last.mean_reward, last.accuracy
                );
            }
            if let Some(ckpt) = summary.final_checkpoint {
                let _ = writeln!(text, "checkpoint: {}", ckpt.display());
            }
            if plot_data {
                let files = write_plot_data(&out)?;
                let _ = writeln!(
                    text,
                    "plot data: {} files in {}",
                    files.len(),
                    out.join("plots").display()
                );
            }
            Ok(text)
        }
        Command::Eval {
            config,
            overrides,
            ckpt,
            data,
            report,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            cfg.validate(&registry)?;
            let instances = read_instances(&data)?;
            let r = evaluate(&cfg, &registry, &ckpt, &instances)?;
            let json = serde_json::to_string_pretty(&r)?;
            if let Some(path) = report {
                std::fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
            }
            Ok(format!(
                "accuracy {:.4}\nmean_reward {:.4}\nmean_turns {:.4}\n{json}\n",
                r.accuracy, r.mean_reward, r.mean_turns
            ))
        }
        Command::GenData {
            env,
            n,
            seed,
            out,
            height,
            width,
            num_symbols,
            max_turns,
            max_new_tokens,
        } => {
            let d = EnvSpec::default_for(env);
            let spec = EnvSpec {
                kind: env,
                height: height.unwrap_or(d.height),
                width: width.unwrap_or(d.width),
                num_symbols: num_symbols.unwrap_or(d.num_symbols),
                max_turns: max_turns.unwrap_or(d.max_turns),
                max_new_tokens: max_new_tokens.unwrap_or(d.max_new_tokens),
            };
            let instances = generate_instances(&spec, n, seed)?;
            write_instances(&out, &instances)?;
            Ok(format!(
                "wrote {n} {} instances to {}\n",
                env.name(),
                out.display()
            ))
        }
        Command::Inspect { dump, row } => inspect(&dump, row),
        Command::Plugins => {
            let mut text = String::new();
            let _ = writeln!(
                text,
                "estimators: {}",
                registry.estimator_names().join(", ")
            );
            let _ = writeln!(
                text,
                "policy losses: {}",
                registry.policy_loss_names().join(", ")
            );
            let _ = writeln!(text, "rewards: {}", registry.reward_names().join(", "));
            Ok(text)
        }
    }
}

fn inspect(path: &Path, row: Option<usize>) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = DumpRecord::read_all(BufReader::new(file))?;
    let selected: Vec<(usize, &DumpRecord)> = match row {
        Some(r) => vec![(
            r,
            records.get(r).ok_or_else(|| {
                Error::Config(format!(
                    "row {r} out of range; dump has {} rows",
                    records.len()
                ))
            })?,
        )],
        None => records.iter().enumerate().collect(),
    };
    let mut text = String::new();
    for (i, rec) in selected {
        render_record(&mut text, i, rec);
    }
    Ok(text)
}

fn render_grid(out: &mut String, obs: &Observation) {
    for r in 0..obs.height {
        let cells: Vec<String> = (0..obs.width).map(|c| obs.get(r, c).to_string()).collect();
        let _ = writeln!(out, "    | {} |", cells.join(" "));
    }
}

/// One record: metadata, then the token stream with actor tokens in
/// brackets and observations drawn as grids.
pub fn render_record(out: &mut String, index: usize, rec: &DumpRecord) {
    let _ = writeln!(
        out,
        "row {index}: prompt {} group {} seed {} turns {} reward {:.4}",
        rec.prompt_id, rec.group_id, rec.rng_seed, rec.turn_count, rec.total_reward
    );
    for (k, v) in &rec.reward_components {
        let _ = writeln!(out, "  {k}: {v:.4}");
    }
    let name = |id: u32| rec.vocab.map_or_else(|| id.to_string(), |v| v.name(id));
    let obs_start = rec.vocab.map(|v| v.obs_start());
    let obs_end = rec.vocab.map(|v| v.obs_end());
    let mut observations = rec.observations.iter();
    let mut line: Vec<String> = Vec::new();
    let mut in_obs = false;
    let flush = |out: &mut String, line: &mut Vec<String>| {
        if !line.is_empty() {
            let _ = writeln!(out, "  {}", line.join(" "));
            line.clear();
        }
    };
    for (t, &tok) in rec.flat_tokens.iter().enumerate() {
        if Some(tok) == obs_start {
            flush(out, &mut line);
            in_obs = true;
            match observations.next() {
                Some(obs) => render_grid(out, obs),
                None => {
                    let _ = writeln!(out, "    <observation>");
                }
            }
            continue;
        }
        if in_obs {
            in_obs = Some(tok) != obs_end;
            continue;
        }
        let label = name(tok);
        line.push(if rec.response_mask.get(t) == Some(&1) {
            format!("[{label}]")
        } else {
            label
        });
    }
    flush(out, &mut line);
    let mask: String = rec
        .response_mask
        .iter()
        .map(|&m| if m == 1 { '1' } else { '.' })
        .collect();
    let _ = writeln!(out, "  mask {mask}");
}
