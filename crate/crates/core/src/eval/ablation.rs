use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evaluate::{evaluate, EvalConfig};
use crate::cot::Seq2Seq;
use crate::dataset::{leave_one_out_split, Dataset, SceneGroup};
use crate::error::{Error, Result};
use crate::goal::{train_goal_module, ConditionMode, EncoderBackend, EncoderConfig, GoalModelConfig, GoalTrainConfig};
use crate::render::VisualPromptStyle;

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub held_out: SceneGroup,
    pub prompt: VisualPromptStyle,
    pub encoder: EncoderBackend,
    pub mode: ConditionMode,
    pub seeds: Vec<u64>,
    pub k: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "at least one seed is required"));
        }
        if self.k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        self.prompt.validate()
    }

    /// Cache key over everything that affects the cell's numbers.
    fn key(&self, setup: &AblationSetup) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        h.update(serde_json::to_vec(&setup.goal_base)?);
        h.update(serde_json::to_vec(&setup.goal_train)?);
        h.update(serde_json::to_vec(&setup.eval)?);
        Ok(hex::encode(&h.finalize()[..12]))
    }
}

/// The prompt-style axis: red/green/blue arrows plus red/green/blue points.
pub fn prompt_style_grid(base: &ExperimentSpec) -> Vec<ExperimentSpec> {
    use crate::render::{PromptColor, PromptShape};
    let mut out = Vec::new();
    for shape in [PromptShape::Arrow, PromptShape::Points] {
        for color in [PromptColor::Red, PromptColor::Green, PromptColor::Blue] {
            let prompt = VisualPromptStyle {
                color,
                shape,
                ..base.prompt
            };
            out.push(ExperimentSpec {
                name: prompt.label(),
                prompt,
                ..base.clone()
            });
        }
    }
    out
}

/// The condition axis: semantic only, visual only, both.
pub fn condition_grid(base: &ExperimentSpec) -> Vec<ExperimentSpec> {
    [
        ("sem-only", ConditionMode::SemOnly),
        ("vis-only", ConditionMode::VisOnly),
        ("both", ConditionMode::Both),
    ]
    .into_iter()
    .map(|(name, mode)| ExperimentSpec {
        name: name.into(),
        mode,
        ..base.clone()
    })
    .collect()
}

pub struct AblationSetup<'a> {
    pub dataset: &'a Dataset,
    /// Every spec overrides prompt, encoder, mode and seed of this layout.
    pub goal_base: GoalModelConfig,
    pub goal_train: GoalTrainConfig,
    /// `predict.k` and `seed` are replaced by each spec.
    pub eval: EvalConfig,
    /// Text model for a held-out group. It does not vary along any ablation axis.
    pub llm_for: &'a (dyn Fn(SceneGroup) -> Result<Arc<Seq2Seq>> + 'a),
    /// Completed cells are stored here and reused on rerun.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ade: f64,
    pub fde: f64,
    pub cv_fde: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: ExperimentSpec,
    pub key: String,
    pub runs: Vec<SeedResult>,
    /// Set when the cell failed; the sweep carries on.
    pub error: Option<String>,
    #[serde(skip)]
    pub cached: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl CellResult {
    pub fn ade(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.ade).collect::<Vec<_>>())
    }

    pub fn fde(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.fde).collect::<Vec<_>>())
    }

    pub fn fallback_rate(&self) -> f64 {
        mean_std(&self.runs.iter().map(|r| r.fallback_rate).collect::<Vec<_>>()).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.spec.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "Metrics are means (± std) over seeds of the AVG row; best-of-K selected by ADE.\n\n\
             | setting | held out | prompt | encoder | condition | seeds | ADE | FDE | fallback rate | status |\n\
             |---|---|---|---|---|---|---|---|---|---|\n",
        );
        for c in &self.cells {
            let (a, sa) = c.ade();
            let (f, sf) = c.fde();
            let status = match &c.error {
                Some(e) => format!("failed: {}", e.replace('|', "/")),
                None if c.cached => "ok (cached)".into(),
                None => "ok".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:?} | {} | {a:.3} ± {sa:.3} | {f:.3} ± {sf:.3} | {:.3} | {status} |",
                c.spec.name,
                c.spec.held_out,
                c.spec.prompt.label(),
                c.spec.encoder.as_str(),
                c.spec.mode,
                c.spec.seeds.len(),
                c.fallback_rate(),
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        w.write_record([
            "setting", "held_out", "prompt", "encoder", "condition", "seeds", "ade_mean", "ade_std", "fde_mean",
            "fde_std", "fallback_rate", "error",
        ])
        .map_err(|e| Error::Io(e.into()))?;
        for c in &self.cells {
            let (a, sa) = c.ade();
            let (f, sf) = c.fde();
            w.write_record([
                c.spec.name.clone(),
                c.spec.held_out.to_string(),
                c.spec.prompt.label(),
                c.spec.encoder.as_str().to_string(),
                format!("{:?}", c.spec.mode),
                c.spec.seeds.len().to_string(),
                format!("{a:.6}"),
                format!("{sa:.6}"),
                format!("{f:.6}"),
                format!("{sf:.6}"),
                format!("{:.6}", c.fallback_rate()),
                c.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `ablation.csv` and `ablation.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join("ablation.csv");
        let md = dir.join("ablation.md");
        self.write_csv(&csv)?;
        std::fs::write(&md, self.to_markdown())?;
        Ok((csv, md))
    }
}

fn run_cell(spec: &ExperimentSpec, setup: &AblationSetup) -> Result<Vec<SeedResult>> {
    spec.validate()?;
    let split = leave_one_out_split(setup.dataset, spec.held_out.as_str())?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyDataset(format!("held-out group {} gives an empty split", spec.held_out)));
    }
    let llm = (setup.llm_for)(spec.held_out)?;
    let scenes = setup.dataset.scene_map();
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        let mut goal_cfg = setup.goal_base.clone();
        goal_cfg.prompt = spec.prompt;
        goal_cfg.mode = spec.mode;
        goal_cfg.seed = seed;
        if spec.encoder != goal_cfg.encoder.backend {
            goal_cfg.encoder = EncoderConfig {
                backend: spec.encoder,
                ..EncoderConfig::resnet(spec.encoder, None)
            };
        }
        let train_cfg = GoalTrainConfig {
            seed,
            ..setup.goal_train.clone()
        };
        let trained = train_goal_module(&scenes, &split.train, goal_cfg, &train_cfg)?;
        let mut eval = setup.eval.clone();
        eval.predict.k = spec.k;
        eval.seed = seed;
        let r = evaluate(setup.dataset, &split.test, &trained.model, &llm, &eval)?;
        runs.push(SeedResult {
            seed,
            ade: r.average.ade,
            fde: r.average.fde,
            cv_fde: r.average.cv_fde,
            fallback_rate: r.average.fallback_rate,
        });
    }
    Ok(runs)
}

/// Runs every cell, reusing cached cells. A failing cell is recorded and the
/// sweep moves on.
pub fn run_ablation(grid: &[ExperimentSpec], setup: &AblationSetup) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::Input("the ablation grid is empty".into()));
    }
    if let Some(dir) = &setup.cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut cells = Vec::new();
    for spec in grid {
        let key = spec.key(setup)?;
        let cache = setup.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(p) = cache.as_ref().filter(|p| p.exists()) {
            match std::fs::read(p).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice::<CellResult>(&b)?)) {
                Ok(mut c) if c.error.is_none() => {
                    log::info!("ablation cell `{}` reused from cache", spec.name);
                    c.cached = true;
                    cells.push(c);
                    continue;
                }
                Ok(_) => {}
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", p.display()),
            }
        }
        log::info!("ablation cell `{}`", spec.name);
        let cell = match run_cell(spec, setup) {
            Ok(runs) => CellResult {
                spec: spec.clone(),
                key,
                runs,
                error: None,
                cached: false,
            },
            Err(e) => {
                log::warn!("ablation cell `{}` failed: {e}", spec.name);
                CellResult {
                    spec: spec.clone(),
                    key,
                    runs: Vec::new(),
                    error: Some(e.to_string()),
                    cached: false,
                }
            }
        };
        if let Some(p) = &cache {
            std::fs::write(p, serde_json::to_vec_pretty(&cell)?)?;
        }
        cells.push(cell);
    }
    Ok(AblationReport { cells })
}
