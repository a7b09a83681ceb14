use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use tabii::adaptation::Ablation;
use tabii::harness::{
    ablate, accuracy_matrix, attribute_study, count_tiers, importance_tiers, load_results, markdown_table, mi_report,
    rank, rank_candidates, results_markdown, run, save_result, stress_suite, write_atomic, DataSource,
    ExperimentConfig, Method, RunResult, StudyMode,
};
use tabii::mine::Which;
use tabii::{Result, TabiiError};

#[derive(Parser)]
#[command(name = "tabii", about = "Adapt tabular models to columns that appear at inference time")]
struct Cli {
    /// JSON experiment config; its fields override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "TABII_OUTPUT_ROOT", default_value = "results")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// CSV path, or `synthetic:<name>[:rows]`.
    #[arg(long)]
    data: Option<String>,
    /// Target column for CSV input (default: last column).
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated incremental columns, or a policy
    /// `importance:<unimportant|moderate|very_important>` / `count:<few|moderate|many>`.
    #[arg(long)]
    incremental: Option<String>,
    /// Candidate columns for a policy when the data has no default set.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one method over seeds.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "tabii")]
        method: String,
    },
    /// Run the adapted model with one component removed.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        drop: String,
    },
    /// Attribute importance or count tiers.
    Study {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        mode: String,
    },
    /// Placeholder length, missing values, renamed columns, test-only mode.
    Stress {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Mutual-information probes for four model families.
    MiReport {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Rank table over the result files in a directory.
    Rank {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then flags, then the config file.
fn build_config(cli_config: Option<&Path>, data: &DataArgs, method: Method) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    };
    if let Some(d) = &data.data {
        cfg.data = match d.strip_prefix("synthetic:") {
            Some(name) => DataSource::Synthetic { name: name.into() },
            None => DataSource::Csv {
                path: d.into(),
                target: data.target.clone(),
            },
        };
    }
    if let Some(n) = data.seeds {
        cfg.seeds = n;
    }
    let policy = data.incremental.as_deref().and_then(|s| s.split_once(':'));
    match (policy, &data.incremental) {
        (None, Some(list)) => cfg.incremental = split_list(list),
        (Some(_), _) | (None, None) => {}
    }
    if let Some(path) = cli_config {
        let text = std::fs::read_to_string(path).map_err(|e| TabiiError::Config(format!("{}: {e}", path.display())))?;
        let over: Value = serde_json::from_str(&text)?;
        let mut v = serde_json::to_value(&cfg)?;
        merge(&mut v, over);
        cfg = serde_json::from_value(v)?;
    }
    if let Some((kind, tier)) = policy {
        if let Some(c) = &data.candidates {
            cfg.incremental = split_list(c);
        }
        let tiers = match kind {
            "importance" => importance_tiers(&rank_candidates(&cfg)?)?,
            "count" => count_tiers(&cfg.table_for(cfg.first_seed)?.1)?,
            other => return Err(TabiiError::Config(format!("unknown selection policy `{other}`"))),
        };
        cfg.incremental = tiers
            .into_iter()
            .find(|(name, _)| name == tier)
            .ok_or_else(|| TabiiError::Config(format!("unknown tier `{tier}`")))?
            .1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli_out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| cli_out.to_path_buf())
}

fn emit(dir: &Path, results: &[RunResult], md_name: &str) -> Result<()> {
    for r in results {
        let p = save_result(dir, r)?;
        eprintln!("wrote {}", p.display());
    }
    let md = results_markdown(&load_results(dir)?);
    write_atomic(&dir.join(md_name), md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn main_inner(cli: Cli) -> Result<()> {
    let conf = cli.config.as_deref();
    match cli.cmd {
        Cmd::Run { data, method } => {
            let cfg = build_config(conf, &data, method.parse()?)?;
            let dir = out_dir(&cli.out, &cfg);
            emit(&dir, &[run(&cfg)?], "results.md")
        }
        Cmd::Ablate { data, drop } => {
            let flag = Ablation::parse(&drop)?;
            let cfg = build_config(conf, &data, Method::Ablation(flag))?;
            let dir = out_dir(&cli.out, &cfg);
            emit(&dir, &[ablate(&cfg, flag)?], "results.md")
        }
        Cmd::Study { data, mode } => {
            let mode: StudyMode = mode.parse()?;
            let cfg = build_config(conf, &data, Method::Tabii)?;
            let dir = out_dir(&cli.out, &cfg);
            let tiers = attribute_study(&cfg, mode)?;
            write_json(&dir.join("study.json"), &tiers)?;
            let mut md = String::from("| Tier | Columns | Accuracy |\n|---|---|---|\n");
            for t in &tiers {
                md.push_str(&format!(
                    "| {} | {} | {:.3} ± {:.3} |\n",
                    t.tier,
                    t.columns.join(", "),
                    t.result.mean,
                    t.result.std
                ));
            }
            write_atomic(&dir.join("study.md"), md.as_bytes())?;
            print!("{md}");
            Ok(())
        }
        Cmd::Stress { data } => {
            let cfg = build_config(conf, &data, Method::Tabii)?;
            let dir = out_dir(&cli.out, &cfg);
            let rep = stress_suite(&cfg)?;
            write_json(&dir.join("stress.json"), &rep)?;
            let mut md = format!("Full pipeline: {:.3} ± {:.3}\n\n", rep.full.mean, rep.full.std);
            md.push_str("| Placeholder length | Accuracy |\n|---|---|\n");
            for p in &rep.placeholder {
                md.push_str(&format!("| ×{} | {:.3} |\n", p.factor, p.result.mean));
            }
            md.push_str("\n| Missing rate | Adapted | Mean imputation | Random imputation |\n|---|---|---|---|\n");
            for m in &rep.missing {
                md.push_str(&format!(
                    "| {:.0}% | {:.3} | {:.3} | {:.3} |\n",
                    m.rate * 100.0,
                    m.tabii.mean,
                    m.mean_imputation.mean,
                    m.random_imputation.mean
                ));
            }
            md.push_str(&format!(
                "\nRandomized column names: {:.3}\nTest set only: {:.3}\n",
                rep.randomized_names.mean, rep.test_only.mean
            ));
            write_atomic(&dir.join("stress.md"), md.as_bytes())?;
            print!("{md}");
            Ok(())
        }
        Cmd::MiReport { data } => {
            let cfg = build_config(conf, &data, Method::Tabii)?;
            let dir = out_dir(&cli.out, &cfg);
            let rep = mi_report(&cfg)?;
            write_json(&dir.join("mi_report.json"), &rep)?;
            let mut md = String::from("| Seed | Family | I(Z;Y) | I(X;Z) |\n|---|---|---|---|\n");
            for s in &rep {
                for m in tabii::harness::PROBE_METHODS {
                    md.push_str(&format!(
                        "| {} | {m} | {:.3} | {:.3} |\n",
                        s.seed,
                        s.value(m, Which::IZy).unwrap_or(f64::NAN),
                        s.value(m, Which::IXz).unwrap_or(f64::NAN)
                    ));
                }
            }
            write_atomic(&dir.join("mi_report.md"), md.as_bytes())?;
            print!("{md}");
            Ok(())
        }
        Cmd::Rank { input } => {
            let results = load_results(&input)?;
            if results.is_empty() {
                return Err(TabiiError::Empty(format!("no result files in {}", input.display())));
            }
            let (methods, datasets, acc) = accuracy_matrix(&results);
            let table = rank(&methods, &datasets, &acc)?;
            let md = markdown_table(&table, &acc);
            write_atomic(&input.join("rank.md"), md.as_bytes())?;
            print!("{md}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
