//! `hafrm`: train and evaluate dual-head reward models from the command
//! line. Subcommands: synth (generate ground-truth corpora), stats, train,
//! eval (accuracy and cross-dataset matrices), bon (best-of-N with top-k
//! recall), sweep (policy-ratio sweep).

mod config;
mod errors;
mod rundir;

use clap::{Parser, Subcommand};
use config::{resolve, CommonFlags, RunConfig};
use errors::CliError;
use hafrm_core::data::{
    compute_stats, load_jsonl, split, synth_generate, DatasetStats, SynthRule,
};
use hafrm_core::eval::{
    accuracy_csv, best_of_n, bon_jsonl, judged_ranking, ood_matrix, ood_matrix_csv,
    pairwise_accuracy, recall_csv, sample_candidates_with_len, top_k_recall, BestOfNResult,
    FileJudge, Judge, ModelScorer, OracleJudge, RecallMode, RewardScorer,
};
use hafrm_core::model::DualHeadModel;
use hafrm_core::train::{alpha_sweep, fit_with, Checkpoint, FitEvent};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hafrm", version, about = "dual-head reward model kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reward model; alpha=0 runs the baseline method.
    Train {
        #[command(flatten)]
        flags: CommonFlags,
        /// Run directory for config.json, train_log.jsonl and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pairwise accuracy, and the full cross-dataset matrix with --ood.
    Eval {
        /// Checkpoint(s), as PATH or TAG=PATH.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<String>,
        /// Dataset(s), as PATH or TAG=PATH.
        #[arg(long = "data", required = true)]
        datasets: Vec<String>,
        /// JSON file mapping every tag to its preference group; enables the
        /// cross-dataset matrix.
        #[arg(long)]
        ood: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Best-of-N reranking; with a judge, top-1/top-2 recall.
    Bon {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSONL prompts: {"prompt": .., "id": optional}.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 24)]
        max_new_tokens: usize,
        /// `oracle` (marker-count ground truth), `oracle:<rule>` or
        /// `file:<path>`.
        #[arg(long)]
        judge: Option<String>,
        /// Comma-separated recall cutoffs.
        #[arg(long, default_value = "1,2")]
        k: String,
        /// Score set overlap instead of argmax membership.
        #[arg(long)]
        overlap_recall: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train once per policy ratio and emit aligned margin/accuracy series.
    Sweep {
        #[command(flatten)]
        flags: CommonFlags,
        /// Comma-separated policy ratios.
        #[arg(long, allow_hyphen_values = true)]
        alphas: String,
        /// Allow negative ratios (an intentionally degraded setting).
        #[arg(long)]
        allow_negative: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Corpus statistics: size, words per QA, tokens per QA.
    Stats {
        files: Vec<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic preference corpus plus its true-score sidecar.
    Synth {
        rule: String,
        n: usize,
        seed: u64,
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { flags, out, force } => cmd_train(&flags, &out, force),
        Command::Eval {
            ckpts,
            datasets,
            ood,
            report,
            force,
        } => cmd_eval(&ckpts, &datasets, ood.as_deref(), &report, force),
        Command::Bon {
            ckpt,
            prompts,
            n,
            temperature,
            seed,
            max_new_tokens,
            judge,
            k,
            overlap_recall,
            out,
            force,
        } => cmd_bon(
            &ckpt,
            &prompts,
            n,
            temperature,
            seed,
            max_new_tokens,
            judge.as_deref(),
            &k,
            overlap_recall,
            &out,
            force,
        ),
        Command::Sweep {
            flags,
            alphas,
            allow_negative,
            out,
            force,
        } => cmd_sweep(&flags, &alphas, allow_negative, &out, force),
        Command::Stats { files, json } => cmd_stats(&files, json.as_deref()),
        Command::Synth { rule, n, seed, out } => cmd_synth(&rule, n, seed, &out),
    }
}

fn load_split(run: &RunConfig) -> Result<hafrm_core::data::DatasetSplit, CliError> {
    let report = load_jsonl(&run.data)?;
    if report.duplicates_dropped > 0 {
        eprintln!(
            "note: dropped {} duplicate record(s) from {}",
            report.duplicates_dropped, run.data
        );
    }
    Ok(split(
        &report.records,
        run.train.seed,
        run.test_frac,
        run.val_frac,
    )?)
}

fn cmd_train(flags: &CommonFlags, out: &Path, force: bool) -> Result<(), CliError> {
    let mut run = resolve(flags)?;
    run.data_fingerprint = Some(config::data_fingerprint(&run.data)?);
    let _lock = rundir::prepare(out, force)?;
    let data = load_split(&run)?;
    let model = DualHeadModel::new(run.model.clone())?;

    rundir::write_file(out, "config.json", &run.to_pretty_json())?;
    let ckpt_dir = out.join("checkpoints");
    let outcome = fit_with(model, &data, &run.train, |event| {
        if let FitEvent::Improved {
            step, checkpoint, ..
        } = event
        {
            std::fs::create_dir_all(&ckpt_dir).ok();
            let _ = checkpoint.save(ckpt_dir.join(format!("step_{step}.ckpt")));
        }
    })?;
    rundir::write_file(out, "train_log.jsonl", &outcome.log.to_jsonl())?;
    outcome
        .best
        .save(out.join("best.ckpt"))
        .map_err(CliError::from)?;
    println!(
        "mode={} best_step={} validation_accuracy={} out={}",
        run.mode,
        outcome.best.step,
        outcome.best.validation_accuracy,
        out.display()
    );
    Ok(())
}

/// Split `TAG=PATH` (or bare PATH, tagged by file stem).
fn tag_and_path(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((tag, path)) => (tag.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(spec);
            let tag = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (tag, path)
        }
    }
}

fn cmd_eval(
    ckpts: &[String],
    datasets: &[String],
    ood: Option<&Path>,
    report_dir: &Path,
    force: bool,
) -> Result<(), CliError> {
    let _lock = rundir::prepare(report_dir, force)?;
    let resolved = serde_json::json!({
        "command": "eval",
        "ckpts": ckpts,
        "datasets": datasets,
        "ood": ood.map(|p| p.display().to_string()),
    });
    rundir::write_file(
        report_dir,
        "config.json",
        &serde_json::to_string_pretty(&resolved).expect("eval config serializes"),
    )?;
    let mut models: Vec<(String, DualHeadModel)> = Vec::new();
    for spec in ckpts {
        let (tag, path) = tag_and_path(spec);
        if models.iter().any(|(t, _)| *t == tag) {
            return Err(CliError::config(format!("duplicate checkpoint tag '{tag}'")));
        }
        let ckpt = Checkpoint::load(&path)?;
        models.push((tag, ckpt.model));
    }
    let mut data: BTreeMap<String, Vec<hafrm_core::data::PreferenceRecord>> = BTreeMap::new();
    for spec in datasets {
        let (tag, path) = tag_and_path(spec);
        if data.contains_key(&tag) {
            return Err(CliError::config(format!("duplicate dataset tag '{tag}'")));
        }
        data.insert(tag, load_jsonl(&path)?.records);
    }

    match ood {
        None => {
            if models.len() != 1 {
                return Err(CliError::config(
                    "several checkpoints need --ood with a group map",
                ));
            }
            let (_, model) = &models[0];
            let scorer = ModelScorer { model };
            let mut reports = Vec::new();
            for (tag, records) in &data {
                reports.push(pairwise_accuracy(&scorer, tag, records)?);
            }
            rundir::write_file(report_dir, "accuracy.csv", &accuracy_csv(&reports))?;
            rundir::write_file(
                report_dir,
                "accuracy.json",
                &serde_json::to_string_pretty(&reports).expect("reports serialize"),
            )?;
            for r in &reports {
                println!(
                    "{}: accuracy {} ({}/{}), margin {}",
                    r.dataset, r.accuracy, r.n_correct, r.n_pairs, r.mean_margin
                );
            }
        }
        Some(groups_path) => {
            let text = std::fs::read_to_string(groups_path)?;
            let groups: BTreeMap<String, String> = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("bad group map: {e}")))?;
            let scorers: Vec<(String, ModelScorer)> = models
                .iter()
                .map(|(tag, model)| (tag.clone(), ModelScorer { model }))
                .collect();
            let mut by_tag: BTreeMap<String, &dyn RewardScorer> = BTreeMap::new();
            for (tag, scorer) in &scorers {
                by_tag.insert(tag.clone(), scorer);
            }
            let matrix = ood_matrix(&by_tag, &data, &groups)?;
            rundir::write_file(report_dir, "ood_matrix.csv", &ood_matrix_csv(&matrix))?;
            rundir::write_file(
                report_dir,
                "ood_matrix.json",
                &serde_json::to_string_pretty(&matrix).expect("matrix serializes"),
            )?;
            println!("{}", ood_matrix_csv(&matrix).trim_end());
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct PromptLine {
    prompt: String,
    #[serde(default)]
    id: Option<String>,
}

fn parse_judge(spec: &str) -> Result<Box<dyn Judge>, CliError> {
    match spec.split_once(':') {
        Some(("oracle", rule)) => Ok(Box::new(OracleJudge {
            rule: SynthRule::parse(rule)?,
        })),
        Some(("file", path)) => Ok(Box::new(FileJudge::from_path(path)?)),
        None if spec == "oracle" => Ok(Box::new(OracleJudge {
            rule: SynthRule::MarkerCount,
        })),
        _ => Err(CliError::config(format!(
            "judge must be oracle, oracle:<rule> or file:<path>, got '{spec}'"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_bon(
    ckpt: &Path,
    prompts_path: &Path,
    n: usize,
    temperature: f64,
    seed: Option<u64>,
    max_new_tokens: usize,
    judge_spec: Option<&str>,
    ks: &str,
    overlap_recall: bool,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    let _lock = rundir::prepare(out, force)?;
    // seed precedence mirrors training: flag, then HAFRM_SEED, then 0
    let seed = match seed {
        Some(s) => s,
        None => match std::env::var(config::SEED_ENV) {
            Ok(v) => v.parse().map_err(|_| {
                CliError::config(format!("{} must be an unsigned integer", config::SEED_ENV))
            })?,
            Err(_) => 0,
        },
    };
    let ks: Vec<usize> = ks
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad k value '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    let model = Checkpoint::load(ckpt)?.model;
    let judge = judge_spec.map(parse_judge).transpose()?;

    let text = std::fs::read_to_string(prompts_path)?;
    let mut results: Vec<BestOfNResult> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PromptLine = serde_json::from_str(line)
            .map_err(|e| CliError::config(format!("{}:{}: {e}", prompts_path.display(), idx + 1)))?;
        let id = parsed.id.unwrap_or_else(|| format!("line{}", idx + 1));
        let candidates = sample_candidates_with_len(
            &model,
            &parsed.prompt,
            n,
            temperature,
            hafrm_core::rng::derive_seed(seed, idx as u64),
            max_new_tokens,
        )?;
        let scorer = ModelScorer { model: &model };
        let mut result = best_of_n(&scorer, &id, &parsed.prompt, &candidates)?;
        if let Some(judge) = &judge {
            result.judge_ranking =
                Some(judged_ranking(judge.as_ref(), &id, &parsed.prompt, &candidates)?);
        }
        results.push(result);
    }
    if results.is_empty() {
        return Err(CliError::config("prompts file is empty"));
    }
    let resolved = serde_json::json!({
        "command": "bon",
        "ckpt": ckpt.display().to_string(),
        "prompts": prompts_path.display().to_string(),
        "n": n,
        "temperature": temperature,
        "seed": seed,
        "max_new_tokens": max_new_tokens,
        "judge": judge_spec,
        "k": ks,
        "overlap_recall": overlap_recall,
    });
    rundir::write_file(
        out,
        "config.json",
        &serde_json::to_string_pretty(&resolved).expect("bon config serializes"),
    )?;
    rundir::write_file(out, "bon.jsonl", &bon_jsonl(&results))?;
    if judge.is_some() {
        let mode = if overlap_recall {
            RecallMode::TopKOverlap
        } else {
            RecallMode::ArgmaxInTopK
        };
        let report = top_k_recall(&results, &ks, mode)?;
        rundir::write_file(out, "recall.csv", &recall_csv(&report))?;
        for e in &report.entries {
            println!("top-{} recall: {}", e.k, e.recall);
        }
    } else {
        println!("no judge given: bon.jsonl written, recall skipped");
    }
    Ok(())
}

fn cmd_sweep(
    flags: &CommonFlags,
    alphas: &str,
    allow_negative: bool,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    let alphas: Vec<f64> = alphas
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(format!("bad alpha '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(CliError::config("alphas must be finite"));
    }
    if !allow_negative {
        if let Some(bad) = alphas.iter().find(|a| **a < 0.0) {
            return Err(CliError::config(format!(
                "negative policy ratio {bad} requires --allow-negative"
            )));
        }
    }
    let mut run = resolve(flags)?;
    run.data_fingerprint = Some(config::data_fingerprint(&run.data)?);
    let _lock = rundir::prepare(out, force)?;
    let data = load_split(&run)?;
    rundir::write_file(out, "config.json", &run.to_pretty_json())?;

    let sweep = alpha_sweep(&run.model, &data, &run.train, &alphas)?;
    rundir::write_file(out, "margin_vs_step.csv", &sweep.margin_vs_step_csv())?;
    rundir::write_file(out, "acc_vs_step.csv", &sweep.accuracy_vs_step_csv())?;
    for r in &sweep.runs {
        let sub = out.join(format!("alpha_{}", r.alpha));
        std::fs::create_dir_all(&sub)?;
        rundir::write_file(&sub, "train_log.jsonl", &r.outcome.log.to_jsonl())?;
        r.outcome.best.save(sub.join("best.ckpt"))?;
        let negativity = if r.alpha < 0.0 { " (negative ratio)" } else { "" };
        println!(
            "alpha={}{}: best accuracy {} at step {}, margin {}",
            r.alpha, negativity, r.best_accuracy, r.best_step, r.margin_at_best
        );
    }
    Ok(())
}

fn cmd_stats(files: &[PathBuf], json_out: Option<&Path>) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::config("stats needs at least one file"));
    }
    let vocab = hafrm_core::model::Vocab::default();
    let mut rows: Vec<DatasetStats> = Vec::new();
    for path in files {
        let report = load_jsonl(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push(compute_stats(&name, &report.records, &vocab));
    }
    println!("{:<20} {:>8} {:>10} {:>10}", "Name", "Size", "Words/QA", "Tokens/QA");
    for r in &rows {
        println!(
            "{:<20} {:>8} {:>10.1} {:>10.1}",
            r.name, r.size, r.words_per_qa, r.tokens_per_qa
        );
    }
    if let Some(path) = json_out {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&rows).expect("stats serialize"),
        )?;
    }
    Ok(())
}

fn cmd_synth(rule: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let corpus = synth_generate(rule, n, seed)?;
    hafrm_core::data::write_jsonl(out, &corpus.preference_records())?;
    let sidecar = sidecar_path(out);
    let mut lines = String::new();
    for r in &corpus.records {
        lines.push_str(
            &serde_json::to_string(&serde_json::json!({
                "id": r.record.id,
                "rule": corpus.rule.id(),
                "chosen_score": r.chosen_score,
                "rejected_score": r.rejected_score,
            }))
            .expect("sidecar line serializes"),
        );
        lines.push('\n');
    }
    std::fs::write(&sidecar, lines)?;
    println!(
        "wrote {} records to {} (+ {})",
        n,
        out.display(),
        sidecar.display()
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synth".into());
    out.with_file_name(format!("{stem}.scores.jsonl"))
}
