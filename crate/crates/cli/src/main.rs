use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tumorfuse::pipeline::checkpoint::load_artifacts;
use tumorfuse::pipeline::config::DataSource;
use tumorfuse::pipeline::report::write_round_log;
use tumorfuse::pipeline::train::{synth_seed, Prepared};
use tumorfuse::pipeline::{
    evaluate, ingest_dataset, prepare_data, save_artifacts, synth_generate, train_all, write_report, Domain, RunConfig,
    RunReport,
};
use tumorfuse::verify::{gradient_suite, GRAD_TOL};

#[derive(Parser)]
#[command(name = "tumorfuse", version, about = "Three-branch tumor classifier with transfer boosting and decision-template fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic target and source sets as PGM folders.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all branches, build templates, evaluate, and write checkpoints and reports.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Carve a validation set of this fraction out of the training split.
        #[arg(long)]
        val_ratio: Option<f64>,
    },
    /// Evaluate saved checkpoints.
    Eval {
        /// Directory holding vit.fbst, capsnet.fbst and cnn.fbst.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Labeled image folder to test on. Defaults to the test split of
        /// the run the checkpoints came from.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render report files from a metrics.json.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Seeded random instances per check.
        #[arg(long, default_value_t = 10)]
        instances: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().validated()?,
    })
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    if cfg.data.source != DataSource::Synthetic {
        bail!("config does not describe a synthetic data source");
    }
    // same seeds as a training run, so `train` on these folders sees the same images
    let target = synth_generate(cfg.data.target_counts, cfg.image_size, Domain::Target, synth_seed(cfg.seed, Domain::Target))?;
    let source = synth_generate(cfg.data.source_counts, cfg.image_size, Domain::Source, synth_seed(cfg.seed, Domain::Source))?;
    target.write_images(&out.join("target"), &cfg.class_names)?;
    source.write_images(&out.join("source"), &cfg.class_names)?;
    println!(
        "wrote {} target and {} source images under {}",
        target.len(),
        source.len(),
        out.display()
    );
    Ok(())
}

fn train(config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>, val_ratio: Option<f64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = val_ratio {
        cfg.val_ratio = v;
    }
    let cfg = cfg.validated()?;
    let start = Instant::now();
    let data = prepare_data(&cfg)?;
    log::info!(
        "target train {:?}, test {:?}, source {:?}",
        data.train.counts(),
        data.test.counts(),
        data.source.as_ref().map(|s| s.counts())
    );
    let artifacts = train_all(&cfg, &data)?;
    let metrics = evaluate(&artifacts.models, &artifacts.templates, &data.test)?;
    let dir = &cfg.output_dir;
    save_artifacts(&artifacts, dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?).with_context(|| format!("writing {}", dir.display()))?;
    for (branch, log) in &artifacts.round_logs {
        write_round_log(log, &dir.join(format!("rounds_{branch}.csv")))?;
    }
    let report = RunReport {
        class_names: cfg.class_names.clone(),
        test_size: data.test.len(),
        metrics,
        curves: artifacts.curves,
    };
    write_report(&report, dir)?;
    print!("{}", tumorfuse::pipeline::report::summary_text(&report));
    println!("finished in {:.1}s, outputs in {}", start.elapsed().as_secs_f64(), dir.display());
    Ok(())
}

fn eval(checkpoints: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let loaded = load_artifacts(checkpoints)?;
    let cfg = &loaded.config;
    let test = match data {
        Some(dir) => ingest_dataset(dir, &cfg.class_names, cfg.image_size)?.0,
        None => {
            let Prepared { test, .. } = prepare_data(cfg)?;
            test
        }
    };
    let metrics = evaluate(&loaded.models, &loaded.templates, &test)?;
    let report = RunReport {
        class_names: cfg.class_names.clone(),
        test_size: test.len(),
        metrics,
        curves: Vec::new(),
    };
    write_report(&report, out)?;
    print!("{}", tumorfuse::pipeline::report::summary_text(&report));
    Ok(())
}

fn gradcheck(instances: u64) -> Result<bool> {
    let start = Instant::now();
    let results = gradient_suite(instances)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<22} {:>3} instances  max rel err {:.2e}  {:>7.2}s  {}",
            r.name,
            r.instances,
            r.max_error,
            r.elapsed.as_secs_f64(),
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    println!(
        "{} checks, tolerance {GRAD_TOL:e}, {:.1}s total: {}",
        results.len(),
        start.elapsed().as_secs_f64(),
        if ok { "all passed" } else { "FAILURES" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out } => synth(config.as_deref(), &out).map(|_| true),
        Command::Train {
            config,
            out,
            seed,
            val_ratio,
        } => train(config.as_deref(), out, seed, val_ratio).map(|_| true),
        Command::Eval { checkpoints, data, out } => eval(&checkpoints, data.as_deref(), &out).map(|_| true),
        Command::Report { metrics, out } => RunReport::load(&metrics)
            .and_then(|r| write_report(&r, &out))
            .map(|_| true)
            .map_err(Into::into),
        Command::Gradcheck { instances } => gradcheck(instances),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
