use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use guidecot::cot::{build_corpus, train_llm, LlmTrainConfig, Seq2Seq, SeqModelConfig};
use guidecot::dataset::{
    corridor_benchmark, default_synth_benchmark, leave_one_out_split, load_dataset, write_synth_dataset, Dataset,
    SceneGroup, WindowConfig,
};
use guidecot::eval::{
    condition_grid, evaluate_checkpoints, prompt_style_grid, run_ablation, save_prediction_plot, AblationSetup,
    EvalConfig, ExperimentSpec, SelectionRule,
};
use guidecot::goal::{train_goal_module, EncoderBackend, GoalModel, GoalModelConfig, GoalTrainConfig};
use guidecot::guidance::GuidanceSpec;
use guidecot::pipeline::{predict_full, PredictConfig};
use guidecot_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "guidecot", about = "Goal-guided pedestrian trajectory prediction", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Five scenes, one per group.
    Benchmark,
    /// Two dense corridor scenes (eth for training, hotel held out).
    Corridor,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// Six visual prompt styles.
    Prompt,
    /// Semantic only, visual only and both.
    Condition,
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    MinAde,
    MinFde,
    Independent,
}

impl From<Selection> for SelectionRule {
    fn from(s: Selection) -> Self {
        match s {
            Selection::MinAde => SelectionRule::MinAde,
            Selection::MinFde => SelectionRule::MinFde,
            Selection::Independent => SelectionRule::Independent,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "benchmark")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the goal module on every group except the held-out one.
    TrainGoal {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        held_out: String,
        #[arg(long)]
        out: PathBuf,
        /// JSON goal-module configuration; desk layout when absent.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the sequence model on ground-truth goal sentences.
    TrainLlm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        held_out: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict one pedestrian and print the response as JSON.
    Generate {
        #[command(flatten)]
        target: Target,
        /// GuidanceSpec as JSON.
        #[arg(long)]
        guidance: Option<String>,
    },
    /// Best-of-K evaluation on the held-out group.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        goal_ckpt: PathBuf,
        #[arg(long)]
        llm_ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, value_enum, default_value = "min-ade")]
        selection: Selection,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_windows: Option<usize>,
        /// Directory for metrics.csv and metrics.md.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation sweep over prompt styles or condition modes.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        held_out: String,
        #[arg(long)]
        llm_ckpt: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        max_windows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a prediction over the scene image.
    Plot {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        guidance: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Run the HTTP steering service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the ground-truth training documents as JSON lines.
    DumpPrompts {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Target {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    goal_ckpt: PathBuf,
    #[arg(long)]
    llm_ckpt: PathBuf,
    #[arg(long)]
    window: String,
    #[arg(long, default_value_t = 0)]
    pedestrian: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    Ok(serde_json::from_str(&text)?)
}

fn dataset(manifest: &Path) -> Result<Dataset> {
    load_dataset(manifest).with_context(|| format!("loading {}", manifest.display()))
}

fn predict_target(t: &Target, guidance: Option<&str>) -> Result<(Dataset, guidecot::pipeline::Prediction)> {
    let ds = dataset(&t.manifest)?;
    let goal = GoalModel::load(&t.goal_ckpt, &Device::Cpu)?;
    let llm = Seq2Seq::load(&t.llm_ckpt, &Device::Cpu)?;
    let w = ds.window(&t.window).with_context(|| format!("unknown window {}", t.window))?;
    let scene = ds.scene(&w.scene_id).context("window without scene")?;
    let spec: Option<GuidanceSpec> = guidance.map(serde_json::from_str).transpose()?;
    let cfg = PredictConfig {
        k: t.k,
        decode: llm.config().decode.clone(),
        ..Default::default()
    };
    let pred = predict_full(&goal, &llm, scene, w, t.pedestrian, spec.as_ref(), &cfg, t.seed)?;
    Ok((ds, pred))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().cmd {
        Cmd::Synth { out, preset, seed } => {
            let specs = match preset {
                Preset::Benchmark => default_synth_benchmark(seed),
                Preset::Corridor => corridor_benchmark(seed),
            };
            let path = write_synth_dataset(&out, &specs, WindowConfig::default())?;
            println!("{}", path.display());
        }
        Cmd::TrainGoal {
            manifest,
            held_out,
            out,
            model_config,
            epochs,
            seed,
        } => {
            let ds = dataset(&manifest)?;
            let split = leave_one_out_split(&ds, &held_out)?;
            let mut mc = match model_config {
                Some(p) => read_json(&p)?,
                None => GoalModelConfig::desk(),
            };
            mc.seed = seed;
            let mut tc = GoalTrainConfig { seed, ..GoalTrainConfig::desk() };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let r = train_goal_module(&ds.scene_map(), &split.train, mc, &tc)?;
            r.model.save(&out)?;
            r.curve.write_csv(&out.with_extension("curve.csv"))?;
            println!("loss {:.4} -> {:.4}; saved {}", r.curve.initial_loss, r.curve.final_loss, out.display());
        }
        Cmd::TrainLlm {
            manifest,
            held_out,
            out,
            model_config,
            epochs,
            seed,
        } => {
            let ds = dataset(&manifest)?;
            let split = leave_one_out_split(&ds, &held_out)?;
            let mut mc = match model_config {
                Some(p) => read_json(&p)?,
                None => SeqModelConfig::toy(),
            };
            mc.seed = seed;
            let mut tc = LlmTrainConfig { seed, ..LlmTrainConfig::desk() };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let r = train_llm(&ds.scene_map(), &split.train, mc, &tc)?;
            r.model.save(&out)?;
            r.curve.write_csv(&out.with_extension("curve.csv"))?;
            println!("loss {:.4} -> {:.4}; saved {}", r.curve.initial_loss, r.curve.final_loss, out.display());
        }
        Cmd::Generate { target, guidance } => {
            let (_, pred) = predict_target(&target, guidance.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&pred)?);
        }
        Cmd::Eval {
            manifest,
            split,
            goal_ckpt,
            llm_ckpt,
            k,
            selection,
            seed,
            max_windows,
            out,
        } => {
            let ds = dataset(&manifest)?;
            let cfg = EvalConfig {
                predict: PredictConfig { k, ..Default::default() },
                selection: selection.into(),
                seed,
                max_windows,
            };
            let r = evaluate_checkpoints(&ds, &split, &goal_ckpt, &llm_ckpt, &cfg)?;
            let md = r.to_markdown();
            println!("{md}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                r.write_csv(&dir.join("metrics.csv"))?;
                std::fs::write(dir.join("metrics.md"), md)?;
                std::fs::write(dir.join("per_window.json"), serde_json::to_string_pretty(&r.per_window)?)?;
            }
        }
        Cmd::Ablate {
            manifest,
            held_out,
            llm_ckpt,
            grid,
            seeds,
            k,
            max_windows,
            out,
        } => {
            let ds = dataset(&manifest)?;
            let held: SceneGroup = held_out.parse()?;
            let llm = Arc::new(Seq2Seq::load(&llm_ckpt, &Device::Cpu)?);
            let base = ExperimentSpec {
                name: "base".into(),
                held_out: held,
                prompt: GoalModelConfig::desk().prompt,
                encoder: EncoderBackend::ToyCnn,
                mode: Default::default(),
                seeds,
                k,
            };
            let specs = match grid {
                Grid::Prompt => prompt_style_grid(&base),
                Grid::Condition => condition_grid(&base),
            };
            let llm_for = move |g: SceneGroup| {
                if g == held {
                    Ok(Arc::clone(&llm))
                } else {
                    Err(guidecot::Error::Input(format!("the text model was trained with {held} held out, not {g}")))
                }
            };
            let setup = AblationSetup {
                dataset: &ds,
                goal_base: GoalModelConfig::desk(),
                goal_train: GoalTrainConfig::desk(),
                eval: EvalConfig {
                    max_windows,
                    ..Default::default()
                },
                llm_for: &llm_for,
                cache_dir: Some(out.join("cache")),
            };
            let report = run_ablation(&specs, &setup)?;
            let (csv, md) = report.write(&out)?;
            println!("{}\nwrote {} and {}", report.to_markdown(), csv.display(), md.display());
        }
        Cmd::Plot {
            target,
            guidance,
            out,
            scale,
        } => {
            let (ds, pred) = predict_target(&target, guidance.as_deref())?;
            let w = ds.window(&target.window).context("unknown window")?;
            let scene = ds.scene(&w.scene_id).context("window without scene")?;
            save_prediction_plot(&out, scene, w, &pred, scale)?;
            println!("{}", out.display());
        }
        Cmd::Serve { config } => {
            let mut cfg = match config {
                Some(p) => ServiceConfig::load(&p)?,
                None => ServiceConfig::default(),
            };
            cfg.apply_env(|k| std::env::var(k).ok())?;
            let engine = guidecot_service::build_engine(cfg)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(guidecot_service::serve(engine, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
        }
        Cmd::DumpPrompts { manifest, out } => {
            let ds = dataset(&manifest)?;
            let docs = build_corpus(&ds.scene_map(), &ds.windows, &SeqModelConfig::toy())?;
            let mut text = String::new();
            for (id, d) in &docs {
                text.push_str(&serde_json::to_string(&serde_json::json!({
                    "id": id, "question": d.question, "cot": d.cot, "answer": d.answer
                }))?);
                text.push('\n');
            }
            std::fs::write(&out, text)?;
            println!("{} documents -> {}", docs.len(), out.display());
        }
    }
    Ok(())
}
