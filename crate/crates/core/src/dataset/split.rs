use std::collections::HashMap;
use std::sync::Arc;

use super::{ObservationWindow, Scene, SceneGroup};
use crate::error::{Error, Result};

/// Scenes plus every window built from their annotations.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scenes: Vec<Arc<Scene>>,
    pub windows: Vec<ObservationWindow>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&Arc<Scene>> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn scene_map(&self) -> HashMap<String, Arc<Scene>> {
        self.scenes
            .iter()
            .map(|s| (s.id.clone(), Arc::clone(s)))
            .collect()
    }

    pub fn group_of(&self, window: &ObservationWindow) -> Option<SceneGroup> {
        self.scene(&window.scene_id).map(|s| s.group)
    }

    pub fn window(&self, id: &str) -> Option<&ObservationWindow> {
        self.windows.iter().find(|w| w.id() == id)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub held_out: SceneGroup,
    pub train: Vec<ObservationWindow>,
    pub test: Vec<ObservationWindow>,
    pub warning: Option<String>,
}

/// Test on the held-out group, train on every other group.
pub fn leave_one_out_split(dataset: &Dataset, held_out: &str) -> Result<Split> {
    let held_out: SceneGroup = held_out.parse()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for w in &dataset.windows {
        let group = dataset
            .group_of(w)
            .ok_or_else(|| Error::Reference(format!("window {} has no scene", w.id())))?;
        if group == held_out {
            test.push(w.clone());
        } else {
            train.push(w.clone());
        }
    }
    let warning = train.is_empty().then(|| {
        let msg = format!("leave-one-out split on `{held_out}` leaves no training windows");
        log::warn!("{msg}");
        msg
    });
    Ok(Split {
        held_out,
        train,
        test,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_scene, SceneLayout};
    use std::collections::HashSet;

    fn dataset(groups: &[SceneGroup]) -> Dataset {
        let mut ds = Dataset::default();
        for (i, &g) in groups.iter().enumerate() {
            let layout = SceneLayout {
                num_pedestrians: 6,
                ..SceneLayout::plaza()
            };
            let out = synth_scene(&layout, i as u64 + 1).unwrap();
            let mut scene = out.scene;
            scene.id = format!("scene{i}");
            scene.group = g;
            ds.windows.extend(
                crate::dataset::build_windows(
                    &scene.id,
                    &out.annotations,
                    &Default::default(),
                    1,
                )
                .unwrap(),
            );
            ds.scenes.push(Arc::new(scene));
        }
        ds
    }

    #[test]
    fn eth_held_out() {
        let ds = dataset(&SceneGroup::ALL);
        let split = leave_one_out_split(&ds, "eth").unwrap();
        assert!(split.test.iter().all(|w| w.scene_id == "scene0"));
        let train_groups: HashSet<_> = split.train.iter().map(|w| ds.group_of(w).unwrap()).collect();
        assert_eq!(
            train_groups,
            [SceneGroup::Hotel, SceneGroup::Univ, SceneGroup::Zara1, SceneGroup::Zara2]
                .into_iter()
                .collect()
        );
        assert!(split.warning.is_none());
    }

    #[test]
    fn single_group_degenerates() {
        let ds = dataset(&[SceneGroup::Hotel]);
        let split = leave_one_out_split(&ds, "hotel").unwrap();
        assert!(split.train.is_empty());
        assert_eq!(split.test.len(), ds.windows.len());
        assert!(split.warning.is_some());
    }

    #[test]
    fn unknown_group() {
        let ds = dataset(&[SceneGroup::Hotel]);
        assert!(matches!(
            leave_one_out_split(&ds, "sdd"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partition_algebra() {
        let ds = dataset(&SceneGroup::ALL);
        let all: HashSet<String> = ds.windows.iter().map(|w| w.id()).collect();
        for g in SceneGroup::ALL {
            let split = leave_one_out_split(&ds, g.as_str()).unwrap();
            let train: HashSet<String> = split.train.iter().map(|w| w.id()).collect();
            let test: HashSet<String> = split.test.iter().map(|w| w.id()).collect();
            assert_eq!(split.train.len() + split.test.len(), ds.windows.len());
            assert!(train.is_disjoint(&test));
            assert_eq!(&train | &test, all);
        }
    }
}
