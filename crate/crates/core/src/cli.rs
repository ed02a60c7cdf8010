//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or data failure, 2 divergence, 3
//! configuration error (including malformed arguments).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::error;

use crate::analysis::{accumulated_update_rank, all_delta_spectra, delta_spectrum_archives, write_reports, RANK_EPS};
use crate::checkpoint::Archive;
use crate::config::{Mode, RunManifest};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::trainer;

#[derive(Debug, Parser)]
#[command(name = "relora", about = "Restarted low-rank training of small transformer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train in one of the four modes.
    Train {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the `data` key.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the `out_dir` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity of a checkpoint on the held-out split of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Maximum evaluation windows; 0 uses the whole split.
        #[arg(long, default_value_t = 0)]
        windows: usize,
    },
    /// Singular-value analysis of weight differences.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Runs rows of the ablation table (restarts, jagged schedule,
    /// optimizer reset, warm start).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Row list such as `1-7`, `6` or `1,5,7`.
        #[arg(long, default_value = "1-7")]
        rows: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum Analyze {
    /// Spectra of `W_b - W_a` for one or every projection.
    Spectrum {
        #[arg(long = "ckpt-a")]
        ckpt_a: PathBuf,
        #[arg(long = "ckpt-b")]
        ckpt_b: PathBuf,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical rank of the accumulated update after every reset.
    Ranks {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Parses `1-7`, `3` or `1,4-5`.
pub fn parse_rows(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid row list `{spec}`"));
    let mut rows = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                rows.extend(a..=b);
            }
            None => rows.push(part.parse().map_err(|_| bad())?),
        }
    }
    if rows.is_empty() {
        return Err(bad());
    }
    for &r in &rows {
        trainer::ablation_row(r)?;
    }
    Ok(rows)
}

fn load_manifest(path: &Path, mode: Option<Mode>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(RunManifest, Corpus)> {
    let text = fs::read_to_string(path)?;
    let mut manifest = RunManifest::parse(&text, mode)?;
    if data.is_some() {
        manifest.data = data;
    }
    if out.is_some() {
        manifest.out_dir = out;
    }
    let data = manifest
        .data
        .clone()
        .ok_or_else(|| Error::Config("no corpus given (set `data` or pass --data)".into()))?;
    let corpus = Corpus::load_with_eval_fraction(&data, manifest.eval_fraction)?;
    Ok((manifest, corpus))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            mode,
            config,
            resume,
            data,
            out,
        } => {
            let mode: Mode = mode.parse()?;
            let (manifest, corpus) = load_manifest(&config, Some(mode), data, out)?;
            let outcome = match resume {
                Some(ckpt) => trainer::resume(&manifest, &corpus, &ckpt)?,
                None => trainer::run(&manifest, &corpus)?,
            };
            println!(
                "mode={} steps={} eval_ppl={:.4}",
                manifest.mode,
                outcome.log.losses().len(),
                outcome.final_eval.perplexity
            );
            if let Some(w) = outcome.warm_start_eval {
                println!("warm_start_eval_ppl={:.4}", w.perplexity);
            }
            if let Some(c) = outcome.control {
                println!(
                    "control hidden={} heads={} params={} target={} gap={:.4}",
                    c.config.hidden, c.config.heads, c.achieved, c.target, c.relative_gap
                );
            }
        }
        Command::Eval { ckpt, data, windows } => {
            let corpus = Corpus::load(&data)?;
            let r = trainer::evaluate_checkpoint(&ckpt, &corpus, windows)?;
            println!("eval_nll={:.6} eval_ppl={:.4} tokens={}", r.mean_nll, r.perplexity, r.tokens);
        }
        Command::Analyze { what } => match what {
            Analyze::Spectrum {
                ckpt_a,
                ckpt_b,
                layer,
                out,
            } => {
                let (a, b) = (Archive::load(&ckpt_a)?, Archive::load(&ckpt_b)?);
                let reports = match layer {
                    Some(l) => vec![delta_spectrum_archives(&a, &b, &l)?],
                    None => all_delta_spectra(&a, &b)?,
                };
                write_reports(&out, &reports)?;
                println!("layer\tnumerical_rank\tcount_below_0.1");
                for r in &reports {
                    println!("{}\t{}\t{}", r.layer, r.numerical_rank(), r.count_below_threshold());
                }
            }
            Analyze::Ranks { run } => {
                let t = accumulated_update_rank(&run)?;
                println!("numerical rank (cutoff {RANK_EPS:e} * sigma_max) after each reset");
                for (i, layer) in t.layers.iter().enumerate() {
                    let ranks: Vec<String> = t.ranks.iter().map(|r| r[i].to_string()).collect();
                    println!("{layer}\t{}", ranks.join("\t"));
                }
            }
        },
        Command::Ablate { config, rows, data, out } => {
            let rows = parse_rows(&rows)?;
            let (manifest, corpus) = load_manifest(&config, Some(Mode::Relora), data, out)?;
            let results = trainer::ablate(&manifest, &corpus, &rows)?;
            println!("row\trestarts\tjagged\topt_reset\twarm_start\teval_ppl");
            for r in results {
                let yn = |b: bool| if b { "yes" } else { "no" };
                let ppl = match &r.outcome {
                    Ok(o) => format!("{:.4}", o.final_eval.perplexity),
                    Err(_) => "N/A (diverged)".to_string(),
                };
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    r.row,
                    yn(r.flags.0),
                    yn(r.flags.1),
                    yn(r.flags.2),
                    yn(r.flags.3),
                    ppl
                );
            }
        }
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 3 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_lists() {
        assert_eq!(parse_rows("1-7").unwrap(), (1..=7).collect::<Vec<_>>());
        assert_eq!(parse_rows("1,4-5").unwrap(), vec![1, 4, 5]);
        assert!(parse_rows("0").is_err());
        assert!(parse_rows("5-2").is_err());
    }

    #[test]
    fn bad_mode_is_a_config_error() {
        assert_eq!(run(["relora", "train", "--mode", "sideways", "--config", "/nonexistent"]), 3);
    }

    #[test]
    fn missing_arguments_exit_three() {
        assert_eq!(run(["relora", "eval"]), 3);
    }
}
