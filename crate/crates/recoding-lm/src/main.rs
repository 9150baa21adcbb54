//! Command-line interface: train, eval, trace, gradcheck, ablate.
//! Exit codes: 0 success, 1 validation/usage error, 2 numerical divergence.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use recoding_lm::checkpoint::Checkpoint;
use recoding_lm::config::{SignalKind, TrainConfig};
use recoding_lm::corpus::{batchify, read_lines};
use recoding_lm::error::Error;
use recoding_lm::harness::eval::EvalOptions;
use recoding_lm::harness::{
    ablate, evaluate_params, model_uses_ensemble, trace_sentences, train, AblateMode,
};
use recoding_lm::verifier;

const USAGE: &str = "\
usage:
  relm train --config <file> --train <txt> --valid <txt> --out <ckpt> [--log <csv>]
  relm eval --ckpt <ckpt> --corpus <txt> [--batch-size <B>] [--seq-len <T>]
  relm trace --ckpt <ckpt> --sentences <txt> [--recode-at t1,t2,...|none]
  relm gradcheck [--tol <x>] [--seed <n>]
  relm ablate --ckpt <ckpt> --corpus <txt> --mode strip|graft [--signal surprisal|mcd|bae] [--alpha <x>] [--batch-size <B>] [--seq-len <T>]

config files are flat key=value; see configs/ and docs/formats.md.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

struct Flags {
    values: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, Error> {
        let mut values = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let key = args[i].strip_prefix("--").ok_or_else(|| {
                Error::Invalid(format!("expected a --flag, got '{}'\n{USAGE}", args[i]))
            })?;
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Invalid(format!("flag --{key} needs a value\n{USAGE}")))?;
            values.push((key.to_string(), value.clone()));
            i += 2;
        }
        Ok(Flags { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, Error> {
        self.get(key)
            .ok_or_else(|| Error::Invalid(format!("missing required flag --{key}\n{USAGE}")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, Error> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value '{v}' for --{key}"))),
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), Error> {
    let Some(cmd) = args.first() else {
        return Err(Error::Invalid(format!("no subcommand\n{USAGE}")));
    };
    let flags = Flags::parse(&args[1..])?;
    match cmd.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "trace" => cmd_trace(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "ablate" => cmd_ablate(&flags),
        other => Err(Error::Invalid(format!(
            "unknown subcommand '{other}'\n{USAGE}"
        ))),
    }
}

fn cmd_train(flags: &Flags) -> Result<(), Error> {
    let config = TrainConfig::from_file(Path::new(flags.required("config")?))?;
    let train_lines = read_lines(Path::new(flags.required("train")?))?;
    let valid_lines = read_lines(Path::new(flags.required("valid")?))?;
    let out = PathBuf::from(flags.required("out")?);
    let log = flags.get("log").map(PathBuf::from);

    let outcome = train(
        &config,
        &train_lines,
        &valid_lines,
        &out,
        log.as_deref(),
        |line| eprintln!("{line}"),
    )?;
    println!(
        "best validation perplexity {:.4} at epoch {}; checkpoint {} metrics {}",
        outcome.best_val_ppl,
        outcome.best_epoch,
        outcome.checkpoint_path.display(),
        outcome.metrics_path.display()
    );
    Ok(())
}

fn load_and_encode(ckpt: &Checkpoint, corpus: &Path) -> Result<Vec<u32>, Error> {
    let lines = read_lines(corpus)?;
    if lines.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    Ok(ckpt.vocabulary().encode(&lines))
}

fn cmd_eval(flags: &Flags) -> Result<(), Error> {
    let ckpt = Checkpoint::load(Path::new(flags.required("ckpt")?))?;
    let batch_size = flags.parsed("batch-size", 1usize)?;
    let seq_len = flags.parsed("seq-len", ckpt.config.seq_len)?;
    let ids = load_and_encode(&ckpt, Path::new(flags.required("corpus")?))?;
    let batched = batchify(&ids, batch_size, seq_len)?;
    let report = evaluate_params(
        &ckpt.params,
        &EvalOptions {
            config: &ckpt.config,
            recoding: ckpt.config.recoding.enabled,
            score_with_ensemble: model_uses_ensemble(&ckpt.config),
            seed: ckpt.config.seed,
        },
        &batched,
    )?;
    println!("perplexity {:.6}", report.perplexity);
    println!("tokens {}", report.token_count);
    println!("tokens_per_sec {:.1}", report.tokens_per_sec);
    println!("mean_delta {:.6}", report.mean_delta);
    Ok(())
}

fn parse_recode_at(spec: Option<&str>) -> Result<Option<BTreeSet<usize>>, Error> {
    match spec {
        None => Ok(None),
        Some("none") => Ok(Some(BTreeSet::new())),
        Some(list) => {
            let mut set = BTreeSet::new();
            for part in list.split(',') {
                let t: usize = part.trim().parse().map_err(|_| {
                    Error::Invalid(format!("bad step index '{part}' in --recode-at"))
                })?;
                set.insert(t);
            }
            Ok(Some(set))
        }
    }
}

fn cmd_trace(flags: &Flags) -> Result<(), Error> {
    let ckpt = Checkpoint::load(Path::new(flags.required("ckpt")?))?;
    let sentences = read_lines(Path::new(flags.required("sentences")?))?;
    let recode_at = parse_recode_at(flags.get("recode-at"))?;

    let traces = trace_sentences(&ckpt, &sentences, recode_at.as_ref())?;
    println!("sentence,position,token,surprisal_bits,delta,post_surprisal_bits,post_delta,recoded");
    for (idx, trace) in traces.iter().enumerate() {
        for (record, token) in trace.records.iter().zip(&trace.gold_tokens) {
            println!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                idx,
                record.position,
                token,
                record.surprisal_bits,
                record.delta,
                record.post_surprisal_bits,
                record.post_delta,
                record.recoded
            );
        }
    }
    Ok(())
}

fn cmd_gradcheck(flags: &Flags) -> Result<(), Error> {
    let tol: f64 = flags.parsed("tol", 1e-4)?;
    let seed: u64 = flags.parsed("seed", 17u64)?;

    let params = verifier::toy_fixture(seed);
    let mut reports = verifier::top_grad_reports(&params, seed, tol)?;
    for kind in [SignalKind::Surprisal, SignalKind::Mcd, SignalKind::Bae] {
        reports.extend(verifier::within_step_chain_reports(
            &params, kind, seed, tol,
        )?);
    }
    reports.push(verifier::bptt_report(&params, seed, 4, tol)?);

    let mut failed = false;
    for report in &reports {
        println!("{}", report.summary_line());
        failed |= !report.passed;
    }
    if failed {
        return Err(Error::Invalid("gradient checks failed".into()));
    }
    println!(
        "all {} gradient checks passed (tol {:.0e})",
        reports.len(),
        tol
    );
    Ok(())
}

fn cmd_ablate(flags: &Flags) -> Result<(), Error> {
    let ckpt = Checkpoint::load(Path::new(flags.required("ckpt")?))?;
    let corpus_lines = read_lines(Path::new(flags.required("corpus")?))?;
    let batch_size = flags.parsed("batch-size", 1usize)?;
    let seq_len = flags.parsed("seq-len", ckpt.config.seq_len)?;

    let mode = match flags.required("mode")? {
        "strip" => AblateMode::Strip,
        "graft" => {
            let signal = SignalKind::parse(flags.required("signal")?)?;
            let alpha: f64 = flags.parsed("alpha", ckpt.config.recoding.alpha)?;
            AblateMode::Graft { signal, alpha }
        }
        other => {
            return Err(Error::Invalid(format!(
                "unknown ablation mode '{other}' (expected strip|graft)"
            )))
        }
    };

    let report = ablate(&ckpt, mode, &corpus_lines, batch_size, seq_len)?;
    println!("perplexity {:.6}", report.perplexity);
    println!("tokens {}", report.token_count);
    println!("tokens_per_sec {:.1}", report.tokens_per_sec);
    println!("mean_delta {:.6}", report.mean_delta);
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(())
}
