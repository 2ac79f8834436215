//! Command-line harness around the staged routed-expert training stack.
//!
//! Subcommands: train, gradcheck, route-stats, synth, eval, verify.
//! Exit codes: 0 success, 1 validation failure, 2 numeric failure
//! (non-finite values or a gradient-check over threshold), 3 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prw_core::checkpoint::{load_checkpoint, save_checkpoint, verify_checkpoint, CkptError};
use prw_core::config::RunConfig;
use prw_core::dataset::{verify_dataset, write_dataset, DatasetError};
use prw_core::eval::{
    alpha_sweep, duality_study, held_out_report, rank_sweep, rho_sweep, route_stats,
};
use prw_core::gradcheck::{model_gradcheck, GRADCHECK_STEP};
use prw_core::metrics::{MetricsRecord, MetricsWriter};
use prw_core::model::PrwModel;
use prw_core::rng;
use prw_core::supervision::SupervisionConfig;
use prw_core::tasks::TaskKind;
use prw_core::trainer::{
    run_cotrain, run_curriculum, FlowSample, TrainError, TrainModeKind, TrainState,
};

#[derive(Parser)]
#[command(name = "prw", version, about = "Routed low-rank KV experts: staged training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Staged,
    Cotrain,
}

#[derive(Subcommand)]
enum Command {
    /// Train the curriculum (or the co-training baseline) from a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "staged")]
        baseline: Baseline,
        /// Resume at stage N from the stage N-1 checkpoint in the output dir.
        #[arg(long)]
        stage: Option<usize>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of independent random samples to check.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Routing statistics of a checkpoint over held-out task data.
    RouteStats {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize a dataset dump for one task.
    Synth {
        /// mask_inpainting | grounding | controllable | customized | instruction_edit
        task: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out evaluation of checkpoints, or a named study.
    Eval {
        /// Staged checkpoint (optional when running --study).
        checkpoint: Option<PathBuf>,
        /// Second checkpoint to compare against (e.g. the co-trained one).
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        /// duality | sweep
        #[arg(long)]
        study: Option<String>,
    },
    /// Verify a dataset file or a checkpoint directory by content hash.
    Verify { path: PathBuf },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Validation(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numeric(m) | Failure::Io(m) => m,
        }
    }
}

fn from_train_error(e: TrainError) -> Failure {
    match &e {
        TrainError::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
        TrainError::Tensor { source, .. } => match source {
            prw_core::tensor::TensorError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        },
        _ => Failure::Validation(e.to_string()),
    }
}

fn from_ckpt_error(e: CkptError) -> Failure {
    match &e {
        CkptError::Io { .. } => Failure::Io(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    }
}

fn from_dataset_error(e: DatasetError) -> Failure {
    match &e {
        DatasetError::Io(_) => Failure::Io(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::Validation(e.to_string()))
}

fn quiet() -> bool {
    std::env::var("PRW_LOG").map(|v| v == "quiet").unwrap_or(false)
}

fn say(msg: &str) {
    if !quiet() {
        println!("{msg}");
    }
}

fn fresh_state(cfg: &RunConfig, seed: u64) -> Result<(TrainState, prw_core::tasks::SampleGen), Failure> {
    let gen = cfg.sample_gen().map_err(|e| Failure::Validation(e.to_string()))?;
    let mut mc = cfg.model_config().map_err(|e| Failure::Validation(e.to_string()))?;
    mc.seed = seed;
    let s0 = cfg.stage_config(0);
    let model = PrwModel::init(mc, s0.lora_rank, s0.lora_alpha);
    Ok((TrainState::new(model, seed), gen))
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    baseline: Baseline,
    stage: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_string_lossy().to_string();
    }
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let stages = cfg.stage_configs();
    let gen = cfg.sample_gen().map_err(|e| Failure::Validation(e.to_string()))?;

    let (mut state, metrics_path) = match stage {
        None => {
            let (state, _) = fresh_state(&cfg, cfg.seed)?;
            (state, out_dir.join("metrics.jsonl"))
        }
        Some(n) => {
            if n == 0 || n >= stages.len() {
                return Err(Failure::Validation(format!(
                    "--stage {n} outside resumable range 1..{}",
                    stages.len() - 1
                )));
            }
            let ckpt = out_dir.join(format!("stage_{}", n - 1));
            let state = load_checkpoint(&ckpt).map_err(from_ckpt_error)?;
            if state.completed_stages.len() != n {
                return Err(Failure::Validation(format!(
                    "checkpoint {} completed {} stages, cannot resume at stage {n}",
                    ckpt.display(),
                    state.completed_stages.len()
                )));
            }
            (state, out_dir.join(format!("metrics_from_stage_{n}.jsonl")))
        }
    };

    let file = fs::File::create(&metrics_path)
        .map_err(|e| Failure::Io(format!("cannot write {}: {e}", metrics_path.display())))?;
    let mut writer = MetricsWriter::new(std::io::BufWriter::new(file));
    let t0 = std::time::Instant::now();
    let mut io_failure: Option<Failure> = None;
    let mut sink = |r: MetricsRecord| {
        if io_failure.is_none() {
            if let Err(e) = writer.write(&r) {
                io_failure = Some(Failure::Io(format!("metrics write: {e}")));
            }
        }
    };

    match baseline {
        Baseline::Staged => {
            let dir = out_dir.clone();
            run_curriculum(&mut state, &stages, &gen, &mut sink, cfg.train.checkpoint_every_steps, &mut |s| {
                let stage_dir = dir.join(format!("stage_{}", s.completed_stages.len() - 1));
                save_checkpoint(&stage_dir, s)
                    .map_err(|e| TrainError::Config(format!("checkpoint: {e}")))
            })
            .map_err(from_train_error)?;
        }
        Baseline::Cotrain => {
            run_cotrain(&mut state, &stages, &gen, &mut sink).map_err(from_train_error)?;
            save_checkpoint(&out_dir.join("cotrain"), &state).map_err(from_ckpt_error)?;
        }
    }
    if let Some(f) = io_failure {
        return Err(f);
    }
    drop(writer);
    say(&format!(
        "trained {} mode in {:.1}s; metrics at {}",
        match baseline {
            Baseline::Staged => "staged",
            Baseline::Cotrain => "cotrain",
        },
        t0.elapsed().as_secs_f64(),
        metrics_path.display()
    ));
    Ok(())
}

fn cmd_gradcheck(config: &Path, seed: Option<u64>, samples: usize) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if cfg.model.d_model > 16 {
        return Err(Failure::Validation(format!(
            "gradcheck requires d_model <= 16 (config has {})",
            cfg.model.d_model
        )));
    }
    let seed = seed.unwrap_or(cfg.seed);
    let gen = cfg.sample_gen().map_err(|e| Failure::Validation(e.to_string()))?;
    let mut mc = cfg.model_config().map_err(|e| Failure::Validation(e.to_string()))?;
    mc.seed = seed;
    let s1 = cfg.stage_config(if cfg.stages.len() > 1 { 1 } else { 0 });
    let mut model = PrwModel::init(mc, s1.lora_rank, s1.lora_alpha);
    let mut grow_rng = rng::stream(seed, "grow", 0);
    model.grow_pool(s1.lora_rank, s1.lora_alpha, &mut grow_rng);
    let mut r = rng::stream(seed, "gradcheck-init", 0);
    model.randomize_all(&mut r);
    let sup = SupervisionConfig { rho: s1.rho, alpha: s1.alpha };

    let mut worst: Option<prw_core::gradcheck::GradcheckReport> = None;
    for k in 0..samples.max(1) {
        let task = TaskKind::ALL[k % TaskKind::ALL.len()];
        let sample = gen.generate(task, rng::derive_seed(seed, "gradcheck-data", k as u64));
        let mut frng = rng::stream(seed, "gradcheck-flow", k as u64);
        let fs = FlowSample::from_task_sample(&sample, &gen, &mut frng);
        let report = model_gradcheck(
            &model,
            &fs,
            &sup,
            GRADCHECK_STEP,
            rng::derive_seed(seed, "gradcheck-noise", k as u64),
            &|_| true,
            None,
        )
        .map_err(|e| Failure::Numeric(e.to_string()))?;
        let replace = worst.as_ref().map(|w| report.max_rel_err > w.max_rel_err).unwrap_or(true);
        if replace {
            worst = Some(report);
        }
    }
    let report = worst.expect("at least one sample");
    for g in &report.groups {
        println!(
            "{:<28} params {:>5}  max rel err {:.3e}  veteran |g| {:.3e}",
            g.name, g.n_params, g.max_rel_err, g.veteran_grad_linf
        );
    }
    println!(
        "gradcheck: max rel err {:.3e} (threshold {:.1e}) over {samples} sample(s)",
        report.max_rel_err, report.threshold
    );
    if report.passed() {
        Ok(())
    } else {
        let worst_group =
            report.worst_group().map(|g| g.name.clone()).unwrap_or_else(|| "?".into());
        Err(Failure::Numeric(format!(
            "gradient check failed: group {worst_group} at {:.3e}",
            report.max_rel_err
        )))
    }
}

fn cmd_route_stats(
    checkpoint: &Path,
    config: &Path,
    samples: usize,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let state = load_checkpoint(checkpoint).map_err(from_ckpt_error)?;
    let mc = cfg.model_config().map_err(|e| Failure::Validation(e.to_string()))?;
    let ckpt_mc = &state.model.cfg;
    if (ckpt_mc.d_model, ckpt_mc.len_x, ckpt_mc.len_y, ckpt_mc.len_h)
        != (mc.d_model, mc.len_x, mc.len_y, mc.len_h)
    {
        return Err(Failure::Validation(format!(
            "checkpoint model {:?} does not match config model {:?}",
            ckpt_mc, mc
        )));
    }
    if state.model.n_experts() > cfg.stages.len() {
        return Err(Failure::Validation(format!(
            "checkpoint pool of {} exceeds the {} configured stages",
            state.model.n_experts(),
            cfg.stages.len()
        )));
    }
    let gen = cfg.sample_gen().map_err(|e| Failure::Validation(e.to_string()))?;
    let mut model = state.model;
    model.set_noise_enabled(false);
    let stats = route_stats(&model, &gen, samples, seed.unwrap_or(cfg.eval.eval_seed));
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    for e in &stats.underused_experts {
        println!("warning: expert {e} utilization below 1%");
    }
    Ok(())
}

fn cmd_synth(
    task: &str,
    config: &Path,
    samples: u64,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let task = TaskKind::parse(task)
        .ok_or_else(|| Failure::Validation(format!("unknown task {task:?}")))?;
    let gen = cfg.sample_gen().map_err(|e| Failure::Validation(e.to_string()))?;
    let seed = seed.unwrap_or(cfg.seed);
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(format!("{}.jsonl", task.name()));
    let audit = write_dataset(&path, &gen, task, samples, seed, cfg.data.codebook_seed)
        .map_err(from_dataset_error)?;
    println!("wrote {} records to {}", samples, path.display());
    println!("{audit}");
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<PathBuf>,
    baseline_checkpoint: Option<PathBuf>,
    config: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    study: Option<String>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let gen = cfg.sample_gen().map_err(|e| Failure::Validation(e.to_string()))?;
    let n = samples.unwrap_or(cfg.eval.samples_per_task);
    let eval_seed = seed.unwrap_or(cfg.eval.eval_seed);

    match study.as_deref() {
        Some("duality") => {
            let report =
                duality_study(&cfg, &cfg.eval.study_seeds).map_err(from_train_error)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report"));
            let sweep = rho_sweep(&cfg, &[0.6, 0.7, 0.8, 0.9, 1.0], cfg.eval.study_seeds[0])
                .map_err(from_train_error)?;
            println!("rho sweep best value: {}", sweep.best_value);
            println!(
                "duality: staged won {}/{} seeds (need >= 4 of 5)",
                report.wins, report.total
            );
            Ok(())
        }
        Some("sweep") => {
            let seed0 = cfg.eval.study_seeds[0];
            let a = alpha_sweep(&cfg, &[0.0, 0.1, 0.5, 1.0], seed0).map_err(from_train_error)?;
            let r = rho_sweep(&cfg, &[0.6, 0.7, 0.8, 0.9, 1.0], seed0).map_err(from_train_error)?;
            let k = rank_sweep(&cfg, &[2, 4, 8, 16], seed0).map_err(from_train_error)?;
            for sweep in [&a, &r, &k] {
                println!("sweep {}:", sweep.parameter);
                for p in &sweep.points {
                    println!("  {:>6}  combined held-out loss {:.6}", p.value, p.combined_loss);
                }
                println!("  best: {}", sweep.best_value);
            }
            Ok(())
        }
        Some(other) => Err(Failure::Validation(format!("unknown study {other:?}"))),
        None => {
            let ckpt = checkpoint
                .ok_or_else(|| Failure::Validation("eval needs a checkpoint or --study".into()))?;
            let state = load_checkpoint(&ckpt).map_err(from_ckpt_error)?;
            let mut model = state.model;
            model.set_noise_enabled(false);
            let report = held_out_report(&model, &gen, n, eval_seed);
            println!("checkpoint {}:", ckpt.display());
            println!("{}", serde_json::to_string_pretty(&report).expect("report"));
            if let Some(base) = baseline_checkpoint {
                let bstate = load_checkpoint(&base).map_err(from_ckpt_error)?;
                let mut bmodel = bstate.model;
                bmodel.set_noise_enabled(false);
                let breport = held_out_report(&bmodel, &gen, n, eval_seed);
                println!("baseline {}:", base.display());
                println!("{}", serde_json::to_string_pretty(&breport).expect("report"));
                println!(
                    "combined loss difference (checkpoint - baseline): {:.6}",
                    report.combined - breport.combined
                );
            }
            Ok(())
        }
    }
}

fn cmd_verify(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        let manifest = verify_checkpoint(path).map_err(from_ckpt_error)?;
        println!(
            "checkpoint ok: {} params, {} stages, mode {:?}",
            manifest.params.len(),
            manifest.stage_history.len(),
            if manifest.mode == TrainModeKind::Staged { "staged" } else { "cotrain" }
        );
        Ok(())
    } else {
        let audit = verify_dataset(path).map_err(from_dataset_error)?;
        println!("dataset ok");
        println!("{audit}");
        Ok(())
    }
}

fn run() -> Result<(), Failure> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out, baseline, stage } => {
            cmd_train(&config, seed, out, baseline, stage)
        }
        Command::Gradcheck { config, seed, samples } => cmd_gradcheck(&config, seed, samples),
        Command::RouteStats { checkpoint, config, samples, seed } => {
            cmd_route_stats(&checkpoint, &config, samples, seed)
        }
        Command::Synth { task, config, samples, seed, out } => {
            cmd_synth(&task, &config, samples, seed, out)
        }
        Command::Eval { checkpoint, baseline_checkpoint, config, seed, samples, study } => {
            cmd_eval(checkpoint, baseline_checkpoint, &config, seed, samples, study)
        }
        Command::Verify { path } => cmd_verify(&path),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
