use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logicqa::backend::ResponseCache;
use logicqa::config::BackendKind;
use logicqa::pipeline::{collect_reports, read_json, Annotation};
use logicqa::{build_backend, demo, EvalReport, Error, Pipeline, Result, RunConfig};

#[derive(Parser)]
#[command(name = "logicqa", version, about = "Logical anomaly detection by checklist question answering")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    category: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `live` or `mock`.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Keep every generated question.
    #[arg(long, global = true)]
    no_filter: bool,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Describe, summarize, generate and paraphrase questions, then filter them.
    Synth(RunSel),
    /// Re-apply filtering to stored candidates.
    Filter(RunSel),
    /// Judge every test image with the stored question sets.
    Infer(RunSel),
    /// Compute per-run metrics and their mean.
    Eval,
    /// Synth, infer and eval for every run.
    Run,
    /// Print the metrics table of every category under the output directory.
    Report,
    /// Compare a run's Main-Q answers with annotator answers.
    Agreement {
        #[arg(long)]
        run: usize,
        /// JSON list of {image_id, main_index, answer}.
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Inspect or empty the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Write the bundled mock scenario into a directory.
    Demo {
        dir: PathBuf,
        /// Also run it.
        #[arg(long)]
        run: bool,
    },
}

#[derive(Args)]
struct RunSel {
    /// A single run; all configured runs otherwise.
    #[arg(long)]
    run: Option<usize>,
}

#[derive(Subcommand)]
enum CacheAction {
    Stats,
    Clear,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        let mut cfg = RunConfig::load(path)?;
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(c) = &self.category {
            cfg.dataset.category = c.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.backend {
            cfg.backend.kind = b;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if self.no_filter {
            cfg.filter.enabled = false;
        }
        if let Some(p) = self.parallelism {
            cfg.parallelism = p;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
    }
}

fn runs(sel: &RunSel, cfg: &RunConfig) -> Result<Vec<usize>> {
    match sel.run {
        Some(k) if k == 0 || k > cfg.runs => Err(Error::Config(format!(
            "run {k} is outside 1..={}",
            cfg.runs
        ))),
        Some(k) => Ok(vec![k]),
        None => Ok((1..=cfg.runs).collect()),
    }
}

fn pipeline(cfg: RunConfig) -> Result<Pipeline> {
    let backend = build_backend(&cfg)?;
    Pipeline::new(cfg, backend)
}

fn print_report(report: &EvalReport) {
    print!("{}", EvalReport::to_csv(std::slice::from_ref(report)));
    if report.degraded {
        println!("note: scores come from verdicts only; AUROC is not comparable");
    }
}

fn cache_of(cfg: &RunConfig) -> Result<ResponseCache> {
    let dir = cfg
        .cache_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no cache_dir configured".into()))?;
    ResponseCache::open(dir)
}

fn run_demo(dir: &Path, also_run: bool, ov: &Overrides) -> Result<()> {
    let config = demo::write_demo(dir)?;
    println!("wrote {}", config.display());
    if also_run {
        let mut cfg = RunConfig::load(&config)?;
        ov.apply(&mut cfg);
        cfg.validate()?;
        print_report(&pipeline(cfg)?.run_all()?);
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let ov = &cli.overrides;
    match &cli.command {
        Command::Demo { dir, run } => run_demo(dir, *run, ov),
        Command::Synth(sel) => {
            let cfg = ov.load()?;
            let ks = runs(sel, &cfg)?;
            let p = pipeline(cfg)?;
            for k in ks {
                for set in p.synth(k)? {
                    let sub = set.subclass.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default();
                    println!("run {k}{sub}: {} Main-Qs", set.m());
                }
            }
            Ok(())
        }
        Command::Filter(sel) => {
            let cfg = ov.load()?;
            let ks = runs(sel, &cfg)?;
            let p = pipeline(cfg)?;
            for k in ks {
                for set in p.filter(k)? {
                    println!("run {k}: {} Main-Qs kept", set.m());
                }
            }
            Ok(())
        }
        Command::Infer(sel) => {
            let cfg = ov.load()?;
            let ks = runs(sel, &cfg)?;
            let p = pipeline(cfg)?;
            for k in ks {
                let verdicts = p.infer(k)?;
                let anomalies = verdicts
                    .iter()
                    .filter(|v| v.result.verdict == Some(logicqa::Verdict::Anomaly))
                    .count();
                println!("run {k}: {} images, {anomalies} judged anomalous", verdicts.len());
            }
            Ok(())
        }
        Command::Eval => {
            print_report(&pipeline(ov.load()?)?.eval()?);
            Ok(())
        }
        Command::Run => {
            print_report(&pipeline(ov.load()?)?.run_all()?);
            Ok(())
        }
        Command::Report => {
            let out = match &ov.config {
                Some(_) => ov.load()?.out_dir,
                None => ov.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            };
            let reports = collect_reports(&out)?;
            if reports.is_empty() {
                log::warn!("no reports under {}", out.display());
            }
            let table = EvalReport::to_csv(&reports);
            logicqa::pipeline::write_json(&out.join("summary.json"), &reports)?;
            print!("{table}");
            Ok(())
        }
        Command::Agreement { run, annotations } => {
            let p = pipeline(ov.load()?)?;
            let rows: Vec<Annotation> = read_json(annotations)?;
            let stats = p.agreement(*run, &rows)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(Error::from)?);
            Ok(())
        }
        Command::Cache { action } => {
            let cache = cache_of(&ov.load()?)?;
            match action {
                CacheAction::Stats => {
                    let s = cache.stats()?;
                    println!("{} entries, {} bytes in {}", s.entries, s.bytes, cache.dir().display());
                }
                CacheAction::Clear => {
                    cache.clear()?;
                    println!("cleared {}", cache.dir().display());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.overrides.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
