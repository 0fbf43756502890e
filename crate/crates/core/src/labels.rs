//! Shared label types: class palettes and per-point panoptic labelings.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub name: String,
    /// Countable object class (gets track ids) as opposed to stuff.
    pub thing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPalette {
    pub classes: Vec<ClassInfo>,
}

impl ClassPalette {
    pub fn new(classes: Vec<ClassInfo>) -> Self {
        ClassPalette { classes }
    }

    /// Palette used by the synthetic generator unless configured otherwise.
    pub fn driving() -> Self {
        let c = |name: &str, thing| ClassInfo { name: name.to_string(), thing };
        ClassPalette::new(vec![c("road", false), c("terrain", false), c("building", false), c("car", true), c("pedestrian", true)])
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn is_thing(&self, class: u16) -> bool {
        self.classes.get(class as usize).is_some_and(|c| c.thing)
    }

    pub fn things(&self) -> impl Iterator<Item = u16> + '_ {
        self.classes.iter().enumerate().filter(|(_, c)| c.thing).map(|(i, _)| i as u16)
    }

    pub fn stuff(&self) -> impl Iterator<Item = u16> + '_ {
        self.classes.iter().enumerate().filter(|(_, c)| !c.thing).map(|(i, _)| i as u16)
    }

    pub fn first_stuff(&self) -> Option<u16> {
        self.stuff().next()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.classes.is_empty() {
            return Err("class palette is empty".into());
        }
        if self.classes.len() > u16::MAX as usize {
            return Err("too many classes".into());
        }
        if self.first_stuff().is_none() {
            return Err("class palette needs at least one stuff class".into());
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate class name".into());
        }
        if names.iter().any(|n| n.is_empty()) {
            return Err("empty class name".into());
        }
        Ok(())
    }
}

/// Labels for one frame: class id and track id per point (track 0 = none).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameLabels {
    pub class: Vec<u16>,
    pub track: Vec<u32>,
}

impl FrameLabels {
    pub fn new(class: Vec<u16>, track: Vec<u32>) -> Self {
        assert_eq!(class.len(), track.len(), "class and track streams must align");
        FrameLabels { class, track }
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }
}

/// Per-frame point labels for a whole sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PanopticLabeling {
    pub frames: Vec<FrameLabels>,
}

impl PanopticLabeling {
    pub fn new(frames: Vec<FrameLabels>) -> Self {
        PanopticLabeling { frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}
