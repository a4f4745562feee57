use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::metrics::{ade, best_of_k, constant_velocity, fde, SelectionRule};
use crate::cot::Seq2Seq;
use crate::dataset::{leave_one_out_split, Dataset, ObservationWindow};
use crate::error::{Error, Result};
use crate::goal::GoalModel;
use crate::pipeline::{derive_seed, predict_from_logits, window_logits, PredictConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub predict: PredictConfig,
    #[serde(default)]
    pub selection: SelectionRule,
    pub seed: u64,
    /// Evaluate at most `n` windows, spread evenly over the id order.
    #[serde(default)]
    pub max_windows: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predict: PredictConfig::default(),
            selection: SelectionRule::MinAde,
            seed: 0,
            max_windows: None,
        }
    }
}

/// Best-of-K result of one pedestrian in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetric {
    pub window_id: String,
    pub group: String,
    pub pedestrian_id: i64,
    pub ade: f64,
    pub fde: f64,
    /// Constant-velocity baseline on the same pedestrian.
    pub cv_ade: f64,
    pub cv_fde: f64,
    pub selected: usize,
    /// Candidates that fell back to constant velocity.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub samples: usize,
    pub ade: f64,
    pub fde: f64,
    pub cv_ade: f64,
    pub cv_fde: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub k: usize,
    pub selection: SelectionRule,
    /// One row per group in name order.
    pub rows: Vec<GroupRow>,
    /// Unweighted mean of the group rows.
    pub average: GroupRow,
    pub per_window: Vec<WindowMetric>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricResult {
    fn from_windows(k: usize, selection: SelectionRule, per_window: Vec<WindowMetric>) -> Self {
        let mut groups: BTreeMap<&str, Vec<&WindowMetric>> = BTreeMap::new();
        for m in &per_window {
            groups.entry(m.group.as_str()).or_default().push(m);
        }
        let rows: Vec<GroupRow> = groups
            .into_iter()
            .map(|(g, ms)| GroupRow {
                group: g.to_string(),
                samples: ms.len(),
                ade: mean(ms.iter().map(|m| m.ade)),
                fde: mean(ms.iter().map(|m| m.fde)),
                cv_ade: mean(ms.iter().map(|m| m.cv_ade)),
                cv_fde: mean(ms.iter().map(|m| m.cv_fde)),
                fallback_rate: ms.iter().map(|m| m.fallbacks).sum::<usize>() as f64 / (ms.len() * k) as f64,
            })
            .collect();
        let average = GroupRow {
            group: "AVG".into(),
            samples: rows.iter().map(|r| r.samples).sum(),
            ade: mean(rows.iter().map(|r| r.ade)),
            fde: mean(rows.iter().map(|r| r.fde)),
            cv_ade: mean(rows.iter().map(|r| r.cv_ade)),
            cv_fde: mean(rows.iter().map(|r| r.cv_fde)),
            fallback_rate: mean(rows.iter().map(|r| r.fallback_rate)),
        };
        Self {
            k,
            selection,
            rows,
            average,
            per_window,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "Best-of-{} selected by `{}`; fallback trajectories are included in the metrics.\n\n",
            self.k,
            self.selection.as_str()
        );
        s.push_str("| group | samples | ADE | FDE | CV ADE | CV FDE | fallback rate |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.group, r.samples, r.ade, r.fde, r.cv_ade, r.cv_fde, r.fallback_rate
            );
        }
        s
    }

    /// Group rows plus the average row, with the selection rule on every line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        w.write_record(["group", "samples", "k", "selection", "ade", "fde", "cv_ade", "cv_fde", "fallback_rate"])
            .map_err(|e| Error::Io(e.into()))?;
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            w.write_record([
                r.group.clone(),
                r.samples.to_string(),
                self.k.to_string(),
                self.selection.as_str().to_string(),
                format!("{:.6}", r.ade),
                format!("{:.6}", r.fde),
                format!("{:.6}", r.cv_ade),
                format!("{:.6}", r.cv_fde),
                format!("{:.6}", r.fallback_rate),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Windows in id order. With a cap of `n`, every `ceil(len / n)`-th window is
/// kept, so early frames of a scene do not dominate a small evaluation.
pub fn select_windows(windows: &[ObservationWindow], max: Option<usize>) -> Vec<&ObservationWindow> {
    let mut v: Vec<&ObservationWindow> = windows.iter().collect();
    v.sort_by_key(|w| (w.scene_id.clone(), w.anchor_frame));
    match max {
        Some(0) => Vec::new(),
        Some(n) if n < v.len() => {
            let stride = v.len().div_ceil(n);
            v.into_iter().step_by(stride).collect()
        }
        _ => v,
    }
}

/// Best-of-K evaluation of every pedestrian in `windows`. Seeds are derived from
/// the window id and pedestrian id, so results do not depend on window order.
pub fn evaluate(
    dataset: &Dataset,
    windows: &[ObservationWindow],
    goal: &GoalModel,
    llm: &Seq2Seq,
    cfg: &EvalConfig,
) -> Result<MetricResult> {
    let selected = select_windows(windows, cfg.max_windows);
    if selected.is_empty() {
        return Err(Error::EmptyDataset("no windows to evaluate".into()));
    }
    let mut per_window = Vec::new();
    for w in selected {
        let scene = dataset
            .scene(&w.scene_id)
            .ok_or_else(|| Error::Reference(format!("unknown scene {}", w.scene_id)))?;
        let logits = window_logits(goal, scene, w)?;
        for i in 0..w.num_pedestrians() {
            let pid = w.pedestrian_ids[i];
            let seed = derive_seed(cfg.seed, &format!("{}#{pid}", w.id()));
            let pred = predict_from_logits(llm, scene, w, i, &logits, None, &cfg.predict, seed)?;
            let gt = &w.future[i];
            let best = best_of_k(&pred.worlds(), gt, cfg.selection)?;
            let cv = constant_velocity(&w.past[i], w.pred_len());
            per_window.push(WindowMetric {
                window_id: w.id(),
                group: scene.group.as_str().to_string(),
                pedestrian_id: pid,
                ade: best.ade,
                fde: best.fde,
                cv_ade: ade(&cv, gt)?,
                cv_fde: fde(&cv, gt)?,
                selected: best.index,
                fallbacks: pred.fallback_count(),
            });
        }
    }
    Ok(MetricResult::from_windows(cfg.predict.k, cfg.selection, per_window))
}

/// Loads both checkpoints and evaluates the held-out group's test windows.
pub fn evaluate_checkpoints(
    dataset: &Dataset,
    held_out: &str,
    goal_ckpt: &Path,
    llm_ckpt: &Path,
    cfg: &EvalConfig,
) -> Result<MetricResult> {
    let dev = Device::Cpu;
    let goal = GoalModel::load(goal_ckpt, &dev)?;
    let llm = Seq2Seq::load(llm_ckpt, &dev)?;
    let split = leave_one_out_split(dataset, held_out)?;
    evaluate(dataset, &split.test, &goal, &llm, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(group: &str, ade: f64, fde: f64, fallbacks: usize) -> WindowMetric {
        WindowMetric {
            window_id: "w".into(),
            group: group.into(),
            pedestrian_id: 0,
            ade,
            fde,
            cv_ade: 2.0 * ade,
            cv_fde: 2.0 * fde,
            selected: 0,
            fallbacks,
        }
    }

    #[test]
    fn average_row_is_the_mean_of_groups() {
        let r = MetricResult::from_windows(
            4,
            SelectionRule::MinAde,
            vec![metric("zara1", 1.0, 2.0, 0), metric("eth", 3.0, 4.0, 2), metric("eth", 5.0, 6.0, 0)],
        );
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].group, "eth");
        assert_eq!((r.rows[0].ade, r.rows[0].fde), (4.0, 5.0));
        assert_eq!(r.rows[0].fallback_rate, 0.25);
        assert_eq!((r.average.ade, r.average.fde), (2.5, 3.5));
        assert_eq!(r.average.samples, 3);
        let md = r.to_markdown();
        assert!(md.contains("min_ade"));
        assert!(md.contains("| AVG | 3 |"));
    }

    #[test]
    fn csv_has_average_row() {
        let r = MetricResult::from_windows(1, SelectionRule::MinFde, vec![metric("hotel", 1.0, 1.0, 0)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().last().unwrap().starts_with("AVG,1,1,min_fde"));
    }

    #[test]
    fn missing_checkpoint_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = evaluate_checkpoints(
            &Dataset::default(),
            "eth",
            &dir.path().join("g.safetensors"),
            &dir.path().join("l.safetensors"),
            &EvalConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. } | Error::Io(_)), "{err}");
    }
}
