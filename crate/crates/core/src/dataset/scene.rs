use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Homography, ObservationWindow};
use crate::error::{Error, Result};
use crate::raster::{RgbImage, SemanticClasses, SemanticMap};

/// The five ETH/UCY scene groups used for leave-one-out evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneGroup {
    Eth,
    Hotel,
    Univ,
    Zara1,
    Zara2,
}

impl SceneGroup {
    pub const ALL: [SceneGroup; 5] = [
        SceneGroup::Eth,
        SceneGroup::Hotel,
        SceneGroup::Univ,
        SceneGroup::Zara1,
        SceneGroup::Zara2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneGroup::Eth => "eth",
            SceneGroup::Hotel => "hotel",
            SceneGroup::Univ => "univ",
            SceneGroup::Zara1 => "zara1",
            SceneGroup::Zara2 => "zara2",
        }
    }
}

impl fmt::Display for SceneGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneGroup::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scene group `{s}` (expected eth, hotel, univ, zara1 or zara2)"
                ))
            })
    }
}

/// A static camera view: color image, aligned semantic classes and its homography.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub group: SceneGroup,
    pub image: RgbImage,
    pub semantic: SemanticMap,
    pub classes: SemanticClasses,
    pub homography: Homography,
    pub frame_stride: i64,
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        group: SceneGroup,
        image: RgbImage,
        semantic: SemanticMap,
        classes: SemanticClasses,
        homography: Homography,
        frame_stride: i64,
    ) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Dimension(format!("scene image has {c} channels")));
        }
        if (h, w) != (semantic.height(), semantic.width()) {
            return Err(Error::Dimension(format!(
                "scene image is {h}x{w} but semantic map is {}x{}",
                semantic.height(),
                semantic.width()
            )));
        }
        if semantic.num_classes() != classes.len() {
            return Err(Error::Dimension(format!(
                "semantic map has {} classes, class list has {}",
                semantic.num_classes(),
                classes.len()
            )));
        }
        if frame_stride < 1 {
            return Err(Error::param("frame_stride", "must be positive"));
        }
        Ok(Self {
            id: id.into(),
            group,
            image,
            semantic,
            classes,
            homography,
            frame_stride,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn contains_pixel(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width() as f64 && p[1] < self.height() as f64
    }

    /// Fraction of window coordinates (past and future) that project outside the image.
    pub fn out_of_bounds_rate(&self, windows: &[ObservationWindow]) -> f64 {
        let mut total = 0usize;
        let mut outside = 0usize;
        for w in windows.iter().filter(|w| w.scene_id == self.id) {
            for p in w.past.iter().chain(&w.future).flatten() {
                total += 1;
                let inside = self
                    .homography
                    .world_to_pixel(*p)
                    .map(|px| self.contains_pixel(px))
                    .unwrap_or(false);
                if !inside {
                    outside += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            outside as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn group_parsing() {
        assert_eq!("ZARA1".parse::<SceneGroup>().unwrap(), SceneGroup::Zara1);
        assert!(matches!("sdd".parse::<SceneGroup>(), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_semantic_map() {
        let sem = SemanticMap::new(Array2::zeros((4, 4)), 3).unwrap();
        let err = Scene::new(
            "s",
            SceneGroup::Eth,
            Array3::zeros((4, 5, 3)),
            sem,
            SemanticClasses::default(),
            Homography::identity(),
            1,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
