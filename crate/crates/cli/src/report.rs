//! Comparison of finished runs: learning curves and the final test table.
//!
//! Writes three CSV files with a header row each:
//! `training_curves.csv` (one row per validation), `al_curves.csv` (one
//! row per active-learning iteration, iteration 0 being the starting
//! model) and `test_table.csv` (one column per run).

use std::fs;
use std::path::Path;

use activemt::active_loop::{read_journal, JournalRecord};
use activemt::trainer::LogRecord;
use anyhow::{Context, Result};

use crate::commands::TestReport;
use crate::run_dir::RunDir;

/// Display name and column rank of a model variant.
fn variant_label(variant: &str) -> (usize, String) {
    match variant {
        "full" => (0, "Fully Trained".into()),
        "baseline" => (1, "Baseline".into()),
        "margin" => (2, "Margin".into()),
        "least_confidence" => (3, "Least Confidence".into()),
        "random" => (4, "Random".into()),
        other => (5, other.to_string()),
    }
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn read_train_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("{}: bad record", path.display())))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the CSV files into `out`. Runs with missing artifacts are
/// reported with warnings and left out of the affected file.
pub fn report(runs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut warnings = Vec::new();

    let mut training = csv::Writer::from_path(out.join("training_curves.csv"))?;
    training.write_record(["run", "phase", "step", "epoch", "train_loss", "lr", "dev_ppl", "dev_bleu"])?;
    let mut al = csv::Writer::from_path(out.join("al_curves.csv"))?;
    al.write_record(["run", "strategy", "iteration", "labeled", "pool", "dev_bleu", "dev_ppl"])?;
    let mut columns: Vec<(usize, usize, String, TestReport)> = Vec::new();

    for (order, dir) in runs.iter().enumerate() {
        let run = RunDir::new(dir);
        let name = run_name(dir);
        let mut found = false;
        for (phase, path) in [("train", run.train_log()), ("active_learning", run.al_train_log())] {
            if !path.exists() {
                continue;
            }
            found = true;
            match read_train_log(&path) {
                Ok(records) => {
                    for r in records {
                        training.write_record([
                            name.clone(),
                            phase.to_string(),
                            r.step.to_string(),
                            r.epoch.to_string(),
                            r.train_loss.to_string(),
                            r.lr.to_string(),
                            r.dev_ppl.to_string(),
                            opt(r.dev_bleu),
                        ])?;
                    }
                }
                Err(e) => warnings.push(format!("{name}: {e:#}")),
            }
        }
        if !found {
            warnings.push(format!("{name}: no training log"));
        }

        if run.journal().exists() {
            match read_journal(&run.journal()) {
                Ok(records) => {
                    let mut strategy = String::new();
                    let (mut labeled, mut pool) = (0, 0);
                    for r in records {
                        match r {
                            JournalRecord::Header(h) => {
                                strategy = h.strategy.as_str().to_string();
                                labeled = h.initial_labeled;
                                pool = h.initial_pool;
                            }
                            JournalRecord::Baseline { dev_bleu, dev_ppl } => al.write_record([
                                name.clone(),
                                strategy.clone(),
                                "0".into(),
                                labeled.to_string(),
                                pool.to_string(),
                                dev_bleu.to_string(),
                                dev_ppl.to_string(),
                            ])?,
                            JournalRecord::IterationEnd {
                                iteration,
                                dev_bleu,
                                dev_ppl,
                                labeled_count,
                                pool_count,
                                ..
                            } => al.write_record([
                                name.clone(),
                                strategy.clone(),
                                iteration.to_string(),
                                labeled_count.to_string(),
                                pool_count.to_string(),
                                dev_bleu.to_string(),
                                dev_ppl.to_string(),
                            ])?,
                            _ => {}
                        }
                    }
                }
                Err(e) => warnings.push(format!("{name}: {e}")),
            }
        }

        match fs::read_to_string(run.test_report()) {
            Ok(text) => match serde_json::from_str::<TestReport>(&text) {
                Ok(t) => {
                    let (rank, label) = variant_label(&t.variant);
                    columns.push((rank, order, label, t));
                }
                Err(e) => warnings.push(format!("{name}: bad test report: {e}")),
            },
            Err(_) => warnings.push(format!("{name}: no test report (run `test`)")),
        }
    }
    training.flush()?;
    al.flush()?;

    columns.sort_by_key(|(rank, order, ..)| (*rank, *order));
    let mut header = vec!["metric".to_string()];
    for (_, order, label, _) in &columns {
        let shared = columns.iter().filter(|c| &c.2 == label).count() > 1;
        header.push(if shared {
            format!("{label} ({})", run_name(&runs[*order]))
        } else {
            label.clone()
        });
    }
    let mut table = csv::Writer::from_path(out.join("test_table.csv"))?;
    table.write_record(&header)?;
    let mut bleu = vec!["BLEU".to_string()];
    let mut ppl = vec!["PPL".to_string()];
    for (.., t) in &columns {
        bleu.push(format!("{:.2}", t.bleu_percent));
        ppl.push(format!("{:.2}", t.perplexity));
    }
    table.write_record(&bleu)?;
    table.write_record(&ppl)?;
    table.flush()?;

    for w in &warnings {
        log::warn!("{w}");
    }
    println!(
        "report for {} run(s) written to {} ({} warning(s))",
        runs.len(),
        out.display(),
        warnings.len()
    );
    Ok(())
}
