use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::RawAnnotation;
use crate::error::{Error, Result};
use crate::Vec2;

/// Observation and prediction horizons, in (decimated) frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub obs_len: usize,
    pub pred_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            obs_len: 8,
            pred_len: 12,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_len < 2 {
            return Err(Error::param("obs_len", "needs at least 2 observed frames"));
        }
        if self.pred_len < 1 {
            return Err(Error::param("pred_len", "must be at least 1"));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.obs_len + self.pred_len
    }
}

/// Past and future tracks of every pedestrian fully visible around one anchor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub scene_id: String,
    /// Last observed frame.
    pub anchor_frame: i64,
    pub pedestrian_ids: Vec<i64>,
    /// `N x obs_len` world positions.
    pub past: Vec<Vec<Vec2>>,
    /// `N x pred_len` world positions.
    pub future: Vec<Vec<Vec2>>,
}

impl ObservationWindow {
    pub fn id(&self) -> String {
        format!("{}/{}", self.scene_id, self.anchor_frame)
    }

    pub fn num_pedestrians(&self) -> usize {
        self.pedestrian_ids.len()
    }

    pub fn obs_len(&self) -> usize {
        self.past.first().map_or(0, Vec::len)
    }

    pub fn pred_len(&self) -> usize {
        self.future.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, pedestrian_id: i64) -> Option<usize> {
        self.pedestrian_ids.iter().position(|&p| p == pedestrian_id)
    }

    pub fn current_position(&self, i: usize) -> Vec2 {
        *self.past[i].last().expect("window tracks are non-empty")
    }

    pub fn final_position(&self, i: usize) -> Vec2 {
        *self.future[i].last().expect("window tracks are non-empty")
    }
}

/// Enumerates windows anchored at every annotated frame. A pedestrian joins a
/// window only if all `obs_len + pred_len` frames, spaced by `stride`, are present.
pub fn build_windows(
    scene_id: &str,
    annotations: &[RawAnnotation],
    cfg: &WindowConfig,
    stride: i64,
) -> Result<Vec<ObservationWindow>> {
    cfg.validate()?;
    if stride < 1 {
        return Err(Error::param("frame_stride", "must be positive"));
    }
    let mut tracks: BTreeMap<i64, BTreeMap<i64, Vec2>> = BTreeMap::new();
    for a in annotations {
        tracks
            .entry(a.pedestrian_id)
            .or_default()
            .insert(a.frame_id, a.position);
    }
    let anchors: BTreeSet<i64> = annotations.iter().map(|a| a.frame_id).collect();
    let before = (cfg.obs_len as i64 - 1) * stride;

    let mut windows = Vec::new();
    for &t in &anchors {
        let mut ids = Vec::new();
        let mut past = Vec::new();
        let mut future = Vec::new();
        for (&ped, frames) in &tracks {
            let collect = |start: i64, n: usize| -> Option<Vec<Vec2>> {
                (0..n as i64)
                    .map(|k| frames.get(&(start + k * stride)).copied())
                    .collect()
            };
            let (Some(p), Some(f)) = (
                collect(t - before, cfg.obs_len),
                collect(t + stride, cfg.pred_len),
            ) else {
                continue;
            };
            ids.push(ped);
            past.push(p);
            future.push(f);
        }
        if !ids.is_empty() {
            windows.push(ObservationWindow {
                scene_id: scene_id.to_string(),
                anchor_frame: t,
                pedestrian_ids: ids,
                past,
                future,
            });
        }
    }
    Ok(windows)
}
