use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use p2s_core::episode::{EpisodeMode, EpisodeRecord};
use p2s_hls::dafny_compile::{signature_hints, DafnyCompiler};
use p2s_hls::synth::{synthesize, MockTable, SynthConfig, SynthStatus, ToolMode};
use p2s_hls::{transpile, DirectivePolicy, LowerOptions, TestVectors, TranspileOptions};
use p2s_harness::gradcheck::run_grad_check;
use p2s_harness::suite::{RunInfo, SuiteEnv, EPISODES_DIR, FUNNEL_FILE, RUN_FILE};
use p2s_harness::table::to_csv;
use p2s_harness::train::{run_training, TrainOverrides};
use p2s_harness::{
    format_pct, render_training_curves, run_suite, verification_rate_table, FunnelStats, HarnessConfig, HarnessError,
    EXIT_CONFIG,
};

#[derive(Parser)]
#[command(name = "p2s", version, about = "Verifier-guided generation to HLS: suites, training and tools")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline over the configured corpus in the configured mode.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Static-prompting suite, single shot or with raw verifier feedback.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        feedback: OnOff,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// PPO training of the prompt-repair policy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the SVG plots.
        #[arg(long)]
        no_plots: bool,
    },
    /// Compile verified programs (`*.dfy`) or compiled modules (`*.py`) in a
    /// directory to HLS C.
    Transpile {
        dir: PathBuf,
        #[arg(long, default_value = "transpiled")]
        out: PathBuf,
        /// Use captured compiler output from this directory instead of dafny.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Test vectors (`<kernel>.vectors.json`) for the testbenches.
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// TOML file with directive policy settings.
        #[arg(long)]
        directives: Option<PathBuf>,
    },
    /// Synthesize one kernel and print the parsed report.
    Synth {
        kernel: PathBuf,
        /// Testbench; defaults to `<kernel>_tb.c` beside the kernel.
        #[arg(long)]
        tb: Option<PathBuf>,
        /// Config whose `[synth]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Funnel and verification-rate summary of finished runs, and/or plots
    /// of a training log.
    Report {
        /// Run ids (under --runs-dir) or run directories.
        runs: Vec<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        /// Model label that deltas are taken against.
        #[arg(long)]
        baseline: Option<String>,
        /// Training-curve CSV to plot.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Where plots go; defaults to the CSV's directory.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
        /// Plot the raw value loss instead of value loss × 1000.
        #[arg(long)]
        no_scale: bool,
    },
    /// Finite-difference check of the PPO gradients.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Run {
            config,
            jobs,
            run_id,
            output_dir,
        } => suite(&config, None, jobs, run_id, output_dir),
        Cmd::Baseline {
            config,
            feedback,
            jobs,
            run_id,
            output_dir,
        } => {
            let mode = match feedback {
                OnOff::On => EpisodeMode::BaselineWithFeedback,
                OnOff::Off => EpisodeMode::BaselineNoFeedback,
            };
            suite(&config, Some(mode), jobs, run_id, output_dir)
        }
        Cmd::Train {
            config,
            episodes,
            seed,
            out,
            no_plots,
        } => {
            let cfg = HarnessConfig::load(&config)?;
            let ov = TrainOverrides {
                episodes,
                seed,
                output_dir: out,
                no_plots,
            };
            let (dir, summary) = run_training(&cfg, &ov)?;
            println!("trained {} episodes (seed {}) -> {}", summary.episodes, summary.seed, dir.display());
            if let (Some(t), Some(u)) = (summary.trained_success, summary.uniform_success) {
                println!("held-out success: trained {t:.3}, uniform {u:.3}");
            }
            match summary.aborted {
                Some(e) => Err(HarnessError::Suite(format!("training aborted: {e}"))),
                None => Ok(()),
            }
        }
        Cmd::Transpile {
            dir,
            out,
            fixtures,
            vectors,
            directives,
        } => transpile_dir(&dir, &out, fixtures, vectors.as_deref(), directives.as_deref()),
        Cmd::Synth { kernel, tb, config, out } => synth_one(&kernel, tb.as_deref(), config.as_deref(), out),
        Cmd::Report {
            runs,
            runs_dir,
            baseline,
            curves,
            plot_dir,
            no_scale,
        } => report(&runs, &runs_dir, baseline.as_deref(), curves.as_deref(), plot_dir, no_scale),
        Cmd::Gradcheck { seeds, batch, hidden } => {
            let s = run_grad_check(seeds, batch, hidden).map_err(HarnessError::config)?;
            println!("max relative error {:.3e} over {seeds} seeds (batch {batch}, hidden {hidden})", s.max_rel_error);
            println!("sign-flipped actor gradient: relative error {:.3e}", s.mutated_min_rel_error);
            if s.max_rel_error < 1e-4 && s.mutated_min_rel_error > 1e-2 {
                Ok(())
            } else {
                Err(HarnessError::Suite("gradient check failed".into()))
            }
        }
    }
}

fn suite(
    config: &Path,
    mode: Option<EpisodeMode>,
    jobs: Option<usize>,
    run_id: Option<String>,
    output_dir: Option<PathBuf>,
) -> Result<(), HarnessError> {
    let mut cfg = HarnessConfig::load(config)?;
    let section = cfg
        .suite
        .as_mut()
        .ok_or_else(|| HarnessError::Config("missing [suite] section".into()))?;
    if let Some(m) = mode {
        section.mode = m;
    }
    if let Some(j) = jobs {
        section.jobs = j;
    }
    if run_id.is_some() {
        section.run_id = run_id;
    }
    if let Some(d) = output_dir {
        section.output_dir = d;
    }
    cfg.validate()?;
    let suite_cfg = cfg.suite_config()?;
    let gateway = cfg.gateway()?;
    let verifier = cfg.verifier()?;
    let mock = cfg.mock_table()?;
    let env = SuiteEnv {
        gateway: gateway.as_ref(),
        verifier: verifier.as_ref(),
        mock: mock.as_ref(),
    };
    let run = run_suite(&suite_cfg, &env)?;
    print_funnel(&suite_cfg.run_id, &run.stats);
    print!("{}", to_csv(&run.table));
    println!("artifacts in {}", run.dir.display());
    Ok(())
}

fn print_funnel(name: &str, s: &FunnelStats) {
    let (n, v, c, h) = s.counts();
    let mem = s
        .avg_peak_memory_mb
        .map(|m| format!("{m:.2} MB"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{name}: {n} tasks, {v} verified, {c} compiled to HLS, {h} synthesized ({}%), avg {:.2} s, {mem}",
        format_pct(s.synth_rate_pct),
        s.avg_elapsed_s
    );
}

fn transpile_dir(
    dir: &Path,
    out: &Path,
    fixtures: Option<PathBuf>,
    vectors: Option<&Path>,
    directives: Option<&Path>,
) -> Result<(), HarnessError> {
    let policy = match directives {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<DirectivePolicy>(&text).map_err(HarnessError::config)?
        }
        None => DirectivePolicy::default(),
    };
    let compiler = match fixtures {
        Some(d) => DafnyCompiler::fixture(d),
        None => DafnyCompiler::real(600),
    };
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("dfy" | "py")))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(HarnessError::Config(format!("no .dfy or .py files in {}", dir.display())));
    }
    let mut failed = 0;
    for path in &entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("kernel").to_string();
        let result = (|| -> Result<String, String> {
            let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
            let (python, lower) = if path.extension().and_then(|x| x.to_str()) == Some("dfy") {
                let hints = signature_hints(&text);
                let method = hints.as_ref().map(|(m, _)| m.clone()).unwrap_or_default();
                let python = compiler.compile(&[&stem, &method], &text).map_err(|e| e.to_string())?;
                let lower = LowerOptions {
                    top: hints.as_ref().map(|(m, _)| m.clone()),
                    param_types: hints.map(|(_, h)| h).unwrap_or_default(),
                };
                (python, lower)
            } else {
                (text, LowerOptions::default())
            };
            let opts = TranspileOptions {
                lower,
                directives: policy.clone(),
            };
            let vecs = match (vectors, p2s_hls::to_kernel(&python, &opts.lower)) {
                (Some(vd), Ok(k)) => {
                    let vp = vd.join(format!("{}.vectors.json", k.name));
                    if vp.is_file() {
                        Some(TestVectors::load(&vp).map_err(|e| e.to_string())?)
                    } else {
                        None
                    }
                }
                _ => None,
            };
            let t = transpile(&python, &opts, vecs.as_ref()).map_err(|e| e.to_string())?;
            let dest = out.join(&stem);
            t.write_to(&dest).map_err(|e| e.to_string())?;
            Ok(format!("kernel {} -> {}", t.kernel.name, dest.join(t.c_file_name()).display()))
        })();
        match result {
            Ok(msg) => println!("{}: ok, {msg}", path.display()),
            Err(e) => {
                failed += 1;
                println!("{}: {e}", path.display());
            }
        }
    }
    if failed > 0 {
        return Err(HarnessError::Suite(format!("{failed} of {} inputs failed", entries.len())));
    }
    Ok(())
}

fn synth_one(kernel: &Path, tb: Option<&Path>, config: Option<&Path>, out: Option<PathBuf>) -> Result<(), HarnessError> {
    let (cfg, mock) = match config {
        Some(c) => {
            let h = HarnessConfig::load(c)?;
            let mock = h.mock_table()?;
            (h.synth, mock)
        }
        None => (SynthConfig::default(), None::<MockTable>),
    };
    if cfg.tool_mode == ToolMode::Mock && mock.is_none() {
        return Err(HarnessError::Config(
            "mock synthesis needs --config with synth.mock_table (or tool_mode = \"real\")".into(),
        ));
    }
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())));
    let name = kernel
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| HarnessError::Config("kernel path has no file name".into()))?
        .to_string();
    let kernel_c = read(kernel)?;
    let sibling = kernel.with_file_name(format!("{name}_tb.c"));
    let tb_c = match tb {
        Some(p) => read(p)?,
        None if sibling.is_file() => read(&sibling)?,
        None => "int main(void) { return 0; }\n".to_string(),
    };
    let work = out.unwrap_or_else(|| PathBuf::from(format!("synth_{name}")));
    let (report, _) = synthesize(&name, &kernel_c, &tb_c, &cfg, mock.as_ref(), &work).map_err(|e| match e {
        p2s_hls::synth::SynthError::Config(_) | p2s_hls::synth::SynthError::ToolNotFound => HarnessError::config(e),
        other => HarnessError::suite(other),
    })?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(HarnessError::suite)?);
    if report.status == SynthStatus::Synthesized {
        Ok(())
    } else {
        Err(HarnessError::Suite(format!("synthesis did not complete: {:?}", report.status)))
    }
}

fn report(
    runs: &[String],
    runs_dir: &Path,
    baseline: Option<&str>,
    curves: Option<&Path>,
    plot_dir: Option<PathBuf>,
    no_scale: bool,
) -> Result<(), HarnessError> {
    if runs.is_empty() && curves.is_none() {
        return Err(HarnessError::Config("give run ids and/or --curves".into()));
    }
    let mut labelled: Vec<(String, EpisodeRecord)> = Vec::new();
    for run in runs {
        let dir = if Path::new(run).join(FUNNEL_FILE).is_file() {
            PathBuf::from(run)
        } else {
            runs_dir.join(run)
        };
        let read = |name: &Path| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| HarnessError::Config(format!("{}: {e}", dir.join(name).display())))
        };
        let info: RunInfo = serde_json::from_str(&read(Path::new(RUN_FILE))?).map_err(HarnessError::config)?;
        let stats: FunnelStats = serde_json::from_str(&read(Path::new(FUNNEL_FILE))?).map_err(HarnessError::config)?;
        stats.check_monotone().map_err(HarnessError::Suite)?;
        print_funnel(&info.run_id, &stats);
        let episodes = read(&Path::new(EPISODES_DIR).join(format!("{}.jsonl", info.run_id)))?;
        for line in episodes.lines().filter(|l| !l.trim().is_empty()) {
            let rec: EpisodeRecord = serde_json::from_str(line).map_err(HarnessError::config)?;
            labelled.push((info.label.clone(), rec));
        }
    }
    if !runs.is_empty() {
        let table = verification_rate_table(&labelled, baseline).map_err(HarnessError::suite)?;
        print!("{}", to_csv(&table));
    }
    if let Some(csv_path) = curves {
        let text = std::fs::read_to_string(csv_path).map_err(|e| HarnessError::Config(format!("{}: {e}", csv_path.display())))?;
        let dir = plot_dir.unwrap_or_else(|| csv_path.parent().map(Path::to_path_buf).unwrap_or_default());
        let plots = render_training_curves(&text, &dir, !no_scale).map_err(|e| match e {
            p2s_harness::CurveError::Schema(_) => HarnessError::config(e),
            other => HarnessError::suite(other),
        })?;
        for f in plots.files {
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}
