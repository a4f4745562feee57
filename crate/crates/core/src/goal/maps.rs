use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dataset::Homography;
use crate::error::{Error, Result};
use crate::guidance::GuidanceField;
use crate::render::render_heatmap;
use crate::Vec2;

/// Links goal-grid cells to scene pixels. Cell `(r, c)` covers the pixel
/// rectangle `[c * sx, (c + 1) * sx) x [r * sy, (r + 1) * sy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Scene pixels per cell along x and y.
    pub cell_px: Vec2,
}

impl GridSpec {
    pub fn for_scene(rows: usize, cols: usize, scene_height: usize, scene_width: usize) -> Self {
        Self {
            rows,
            cols,
            cell_px: [
                scene_width as f64 / cols as f64,
                scene_height as f64 / rows as f64,
            ],
        }
    }

    pub fn pixel_to_grid(&self, p: Vec2) -> Vec2 {
        [p[0] / self.cell_px[0], p[1] / self.cell_px[1]]
    }

    pub fn grid_to_pixel(&self, g: Vec2) -> Vec2 {
        [g[0] * self.cell_px[0], g[1] * self.cell_px[1]]
    }

    pub fn world_to_grid(&self, h: &Homography, w: Vec2) -> Result<Vec2> {
        Ok(self.pixel_to_grid(h.world_to_pixel(w)?))
    }

    pub fn grid_to_world(&self, h: &Homography, g: Vec2) -> Result<Vec2> {
        h.pixel_to_world(self.grid_to_pixel(g))
    }

    pub fn contains(&self, g: Vec2) -> bool {
        g[0] >= 0.0 && g[1] >= 0.0 && g[0] < self.cols as f64 && g[1] < self.rows as f64
    }

    /// Cell holding a grid point, if inside.
    pub fn cell_of(&self, g: Vec2) -> Option<(usize, usize)> {
        self.contains(g)
            .then(|| (g[1].floor() as usize, g[0].floor() as usize))
    }
}

/// Raw goal-module output on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalLogitMap {
    pub grid: Array2<f64>,
    pub spec: GridSpec,
}

/// Per-cell sigmoid of the (possibly guided) logits. Not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalProbabilityMap {
    pub grid: Array2<f64>,
    pub spec: GridSpec,
}

impl GoalProbabilityMap {
    /// Wraps an arbitrary map with values in `[0, 1]`.
    pub fn from_grid(grid: Array2<f64>, spec: GridSpec) -> Result<Self> {
        if grid.dim() != (spec.rows, spec.cols) {
            return Err(Error::Dimension(format!(
                "map {:?} vs grid {}x{}",
                grid.dim(),
                spec.rows,
                spec.cols
            )));
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("probability", "values must lie in [0, 1]"));
        }
        Ok(Self { grid, spec })
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = ((0, 0), f64::NEG_INFINITY);
        for (idx, &v) in self.grid.indexed_iter() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    }

    /// Block-averaged copy at most `max_side` cells on each side.
    pub fn downsampled(&self, max_side: usize) -> Array2<f64> {
        let (h, w) = self.grid.dim();
        let f = h.max(w).div_ceil(max_side.max(1)).max(1);
        if f == 1 {
            return self.grid.clone();
        }
        let (oh, ow) = (h.div_ceil(f), w.div_ceil(f));
        Array2::from_shape_fn((oh, ow), |(r, c)| {
            let (mut sum, mut n) = (0.0, 0);
            for rr in r * f..((r + 1) * f).min(h) {
                for cc in c * f..((c + 1) * f).min(w) {
                    sum += self.grid[(rr, cc)];
                    n += 1;
                }
            }
            sum / n as f64
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigmoid(logits + lambda * field)`. With no field or `lambda == 0` this is the
/// plain sigmoid, computed on the same path so the two are bit-equal.
pub fn goal_probability(
    logits: &GoalLogitMap,
    field: Option<&GuidanceField>,
    lambda: f64,
) -> Result<GoalProbabilityMap> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param("lambda", format!("{lambda} must be a finite value >= 0")));
    }
    let grid = match field {
        Some(f) if lambda != 0.0 => {
            if f.grid.dim() != logits.grid.dim() {
                return Err(Error::Dimension(format!(
                    "guidance field {:?} vs logits {:?}",
                    f.grid.dim(),
                    logits.grid.dim()
                )));
            }
            let mut g = logits.grid.clone();
            g.zip_mut_with(&f.grid, |l, &v| *l = sigmoid(*l + lambda * v));
            g
        }
        _ => logits.grid.mapv(sigmoid),
    };
    Ok(GoalProbabilityMap {
        grid,
        spec: logits.spec,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    Multinomial,
    TopkThenMultinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub strategy: SamplingStrategy,
    /// Weights are `p^(1/T)`; `T = 0` picks the argmax.
    pub temperature: f64,
    /// Cells kept by the top-k strategy.
    pub top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::Multinomial,
            temperature: 1.0,
            top_k: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSample {
    pub cell: (usize, usize),
    /// Cell center in grid coordinates.
    pub grid: Vec2,
    pub pixel: Vec2,
    pub world: Vec2,
    pub score: f64,
}

/// Draws `k` cells from the map normalized to a distribution. Duplicates allowed.
pub fn sample_goals(
    map: &GoalProbabilityMap,
    k: usize,
    cfg: &SamplingConfig,
    seed: u64,
    homography: &Homography,
) -> Result<Vec<GoalSample>> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if !(cfg.temperature >= 0.0) || !cfg.temperature.is_finite() {
        return Err(Error::param("temperature", "must be finite and >= 0"));
    }
    let (_, cols) = map.grid.dim();
    let flat: Vec<f64> = map.grid.iter().copied().collect();
    if !flat.iter().any(|&p| p > 0.0) {
        return Err(Error::DegenerateDistribution(
            "probability map has no positive cell".into(),
        ));
    }
    let mut candidates: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] > 0.0).collect();
    if cfg.strategy == SamplingStrategy::TopkThenMultinomial {
        if cfg.top_k == 0 {
            return Err(Error::param("top_k", "must be at least 1"));
        }
        // Stable order: higher probability first, then lower index.
        candidates.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
        candidates.truncate(cfg.top_k);
        candidates.sort_unstable();
    }
    let picks: Vec<usize> = if cfg.temperature == 0.0 {
        let best = candidates
            .iter()
            .copied()
            .fold(candidates[0], |b, i| if flat[i] > flat[b] { i } else { b });
        vec![best; k]
    } else {
        let logs: Vec<f64> = candidates.iter().map(|&i| flat[i].ln() / cfg.temperature).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::DegenerateDistribution(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| candidates[dist.sample(&mut rng)]).collect()
    };
    picks
        .into_iter()
        .map(|i| {
            let cell = (i / cols, i % cols);
            let grid = [cell.1 as f64 + 0.5, cell.0 as f64 + 0.5];
            let pixel = map.spec.grid_to_pixel(grid);
            Ok(GoalSample {
                cell,
                grid,
                pixel,
                world: homography.pixel_to_world(pixel)?,
                score: flat[i],
            })
        })
        .collect()
}

/// Gaussian target around the ground-truth final position, peak 1 at its cell.
/// Points outside the grid give an out-of-bounds error; training skips them.
pub fn make_goal_target(
    final_world: Vec2,
    homography: &Homography,
    spec: &GridSpec,
    sigma: f64,
) -> Result<Array2<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma_g", format!("{sigma} must be positive")));
    }
    let g = spec.world_to_grid(homography, final_world)?;
    if !spec.contains(g) {
        return Err(Error::OutOfBounds(format!(
            "final position ({:.3}, {:.3}) maps to grid point ({:.2}, {:.2}) outside {}x{}",
            final_world[0], final_world[1], g[0], g[1], spec.rows, spec.cols
        )));
    }
    render_heatmap(&[g], sigma, spec.rows, spec.cols)
}
