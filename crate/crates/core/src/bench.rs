//! Benchmark assembly: filtered background boxes paired with subjects and
//! per-subject identity and editing prompts.
//!
//! Annotations are a JSON list of `{"image": <relative path>, "boxes": [[x, y, w, h], ...]}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adm::{AttributeCategory, PromptRecord};
use crate::error::{Error, Result};
use crate::eval::Task;
use crate::grid::{BinaryMask, BoundingBox};
use crate::rng;

pub const DEFAULT_MIN_RESOLUTION: usize = 256;
pub const DEFAULT_MIN_BOX_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image: String,
    pub boxes: Vec<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundEntry {
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    /// `[x, y, w, h]` of the largest qualifying box.
    pub bbox: [usize; 4],
}

impl BackgroundEntry {
    pub fn mask(&self) -> BinaryMask {
        let [x, y, w, h] = self.bbox;
        BinaryMask::from_box(self.height, self.width, &BoundingBox::from_xywh(x, y, w, h))
    }
}

/// Keeps images whose shorter side is at least `min_resolution` and that hold
/// a box, lying inside the image, whose shorter side is at least
/// `min_box_side`. Entries that cannot be read are collected and reported
/// together.
pub fn filter_backgrounds(
    image_dir: impl AsRef<Path>,
    annotations: &[Annotation],
    min_resolution: usize,
    min_box_side: usize,
) -> Result<Vec<BackgroundEntry>> {
    let dir = image_dir.as_ref();
    let mut kept = Vec::new();
    let mut unreadable = Vec::new();
    for ann in annotations {
        let path = dir.join(&ann.image);
        let (w, h) = match image::image_dimensions(&path) {
            Ok((w, h)) => (w as usize, h as usize),
            Err(e) => {
                unreadable.push(format!("{}: {e}", ann.image));
                continue;
            }
        };
        if w.min(h) < min_resolution {
            continue;
        }
        let best = ann
            .boxes
            .iter()
            .filter(|[x, y, bw, bh]| *bw.min(bh) >= min_box_side && x + bw <= w && y + bh <= h)
            .max_by_key(|[x, y, bw, bh]| (bw * bh, std::cmp::Reverse((*y, *x))));
        if let Some(b) = best {
            kept.push(BackgroundEntry {
                image: PathBuf::from(&ann.image),
                width: w,
                height: h,
                bbox: *b,
            });
        }
    }
    if !unreadable.is_empty() {
        return Err(Error::UnreadableAnnotations(unreadable));
    }
    Ok(kept)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub id: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    pub identity: Vec<PromptRecord>,
    pub editing: Vec<PromptRecord>,
}

impl PromptSet {
    pub fn for_task(&self, task: Task) -> &[PromptRecord] {
        match task {
            Task::Identity => &self.identity,
            Task::Editing => &self.editing,
        }
    }
}

const IDENTITY_TEMPLATES: &[&str] = &[
    "a [sks] {class}",
    "a photo of a [sks] {class}",
    "a [sks] {class} in the scene",
    "a [sks] {class} on the table",
];

const EDITING_TEMPLATES: &[(&str, AttributeCategory, &str)] = &[
    ("a red [sks] {class}", AttributeCategory::Color, "red"),
    ("a blue [sks] {class}", AttributeCategory::Color, "blue"),
    ("a glass [sks] {class}", AttributeCategory::Material, "glass"),
    ("a striped [sks] {class}", AttributeCategory::Texture, "striped"),
];

/// Four identity and four editing prompts for `subject`.
pub fn default_prompt_set(subject: &Subject) -> PromptSet {
    let fill = |t: &str| t.replace("{class}", &subject.class);
    PromptSet {
        identity: IDENTITY_TEMPLATES
            .iter()
            .map(|t| PromptRecord::new(fill(t), vec![]))
            .collect(),
        editing: EDITING_TEMPLATES
            .iter()
            .map(|(t, c, w)| PromptRecord::new(fill(t), vec![(*c, w.to_string())]))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTuple {
    pub id: String,
    pub subject_id: String,
    pub background_path: PathBuf,
    pub mask_path: PathBuf,
    pub bbox: [usize; 4],
    pub size: (usize, usize),
    pub prompts: Vec<PromptRecord>,
    pub split: Task,
}

impl BenchTuple {
    pub fn mask(&self) -> BinaryMask {
        let [x, y, w, h] = self.bbox;
        BinaryMask::from_box(self.size.0, self.size.1, &BoundingBox::from_xywh(x, y, w, h))
    }
}

/// Draws `per_subject` distinct backgrounds for every subject. Each subject
/// has its own generator keyed by `(seed, subject id)`, so the pairs a
/// subject receives do not depend on the order of `subjects`. Tuples
/// alternate between the identity and editing splits.
pub fn assemble(
    subjects: &[Subject],
    backgrounds: &[BackgroundEntry],
    per_subject: usize,
    prompt_sets: &BTreeMap<String, PromptSet>,
    seed: u64,
) -> Result<Vec<BenchTuple>> {
    if per_subject > backgrounds.len() {
        return Err(Error::InsufficientBackgrounds {
            needed: per_subject,
            available: backgrounds.len(),
        });
    }
    let mut out = Vec::with_capacity(subjects.len() * per_subject);
    for subject in subjects {
        let prompts = prompt_sets
            .get(&subject.id)
            .cloned()
            .unwrap_or_else(|| default_prompt_set(subject));
        let mut order: Vec<usize> = (0..backgrounds.len()).collect();
        order.shuffle(&mut rng::seeded(seed, rng::stable_hash(subject.id.as_bytes())));
        for (idx, &b) in order.iter().take(per_subject).enumerate() {
            let bg = &backgrounds[b];
            let split = if idx % 2 == 0 { Task::Identity } else { Task::Editing };
            let id = format!("{}-{idx:04}", subject.id);
            let list = prompts.for_task(split).to_vec();
            if list.is_empty() {
                return Err(Error::Config(format!(
                    "subject {} has no {} prompts",
                    subject.id,
                    split.name()
                )));
            }
            out.push(BenchTuple {
                mask_path: PathBuf::from(format!("masks/{id}.png")),
                id,
                subject_id: subject.id.clone(),
                background_path: bg.image.clone(),
                bbox: bg.bbox,
                size: (bg.height, bg.width),
                prompts: list,
                split,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub seed: u64,
    /// Directory the `background_path` entries are relative to.
    pub image_root: PathBuf,
    pub tuples: Vec<BenchTuple>,
}

impl BenchManifest {
    /// Writes `benchmark.json` and one mask PNG per tuple under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let masks = dir.join("masks");
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        for t in &self.tuples {
            t.mask().save_png(dir.join(&t.mask_path))?;
        }
        let path = dir.join("benchmark.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_backgrounds(n: usize) -> Vec<BackgroundEntry> {
        (0..n)
            .map(|i| BackgroundEntry {
                image: PathBuf::from(format!("bg{i:03}.png")),
                width: 320,
                height: 256,
                bbox: [10, 20, 64 + i % 7, 80],
            })
            .collect()
    }

    fn subjects(n: usize) -> Vec<Subject> {
        (0..n)
            .map(|i| Subject {
                id: format!("subj{i:02}"),
                class: "teapot".into(),
            })
            .collect()
    }

    fn write_png(path: &Path, w: u32, h: u32) {
        image::RgbImage::new(w, h).save(path).unwrap();
    }

    #[test]
    fn filtering_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut anns = Vec::new();
        for i in 0..10 {
            let name = format!("img{i}.png");
            let (w, h) = if i < 2 { (200, 300) } else { (300, 260) };
            write_png(&dir.path().join(&name), w, h);
            let boxes = if (2..4).contains(&i) {
                vec![[0, 0, 8, 100]]
            } else {
                vec![[5, 5, 70, 90], [0, 0, 10, 10]]
            };
            anns.push(Annotation { image: name, boxes });
        }
        let kept = filter_backgrounds(dir.path(), &anns, 256, 32).unwrap();
        assert_eq!(kept.len(), 6);
        assert!(kept.iter().all(|k| k.bbox == [5, 5, 70, 90]));
        assert_eq!(filter_backgrounds(dir.path(), &anns, 1, 1).unwrap().len(), 10);
        anns.push(Annotation {
            image: "missing.png".into(),
            boxes: vec![],
        });
        anns.push(Annotation {
            image: "gone.png".into(),
            boxes: vec![],
        });
        match filter_backgrounds(dir.path(), &anns, 1, 1) {
            Err(Error::UnreadableAnnotations(v)) => assert_eq!(v.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tuple_counts_and_determinism() {
        let bgs = synthetic_backgrounds(140);
        let t = assemble(&subjects(30), &bgs, 140, &BTreeMap::new(), 1).unwrap();
        assert_eq!(t.len(), 4200);
        let one = assemble(&subjects(1), &bgs, 1, &BTreeMap::new(), 1).unwrap();
        assert_eq!(one.len(), 1);
        let small = synthetic_backgrounds(5);
        let a = assemble(&subjects(3), &small, 5, &BTreeMap::new(), 9).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a, assemble(&subjects(3), &small, 5, &BTreeMap::new(), 9).unwrap());
        assert!(matches!(
            assemble(&subjects(1), &small, 6, &BTreeMap::new(), 9),
            Err(Error::InsufficientBackgrounds {
                needed: 6,
                available: 5
            })
        ));
    }

    #[test]
    fn subject_order_does_not_change_pairs() {
        let bgs = synthetic_backgrounds(20);
        let mut subs = subjects(4);
        let pairs = |t: Vec<BenchTuple>| {
            let mut v: Vec<_> = t.into_iter().map(|t| (t.subject_id, t.background_path)).collect();
            v.sort();
            v
        };
        let a = pairs(assemble(&subs, &bgs, 7, &BTreeMap::new(), 3).unwrap());
        subs.reverse();
        assert_eq!(a, pairs(assemble(&subs, &bgs, 7, &BTreeMap::new(), 3).unwrap()));
    }

    #[test]
    fn prompt_invariants() {
        let set = default_prompt_set(&Subject {
            id: "s".into(),
            class: "dog".into(),
        });
        for task in [Task::Identity, Task::Editing] {
            let n = set.for_task(task).len();
            assert!((3..=5).contains(&n));
        }
        assert!(set
            .editing
            .iter()
            .all(|p| !p.attributes_used.is_empty() && p.has_identity_token));
        let t = assemble(&subjects(2), &synthetic_backgrounds(4), 4, &BTreeMap::new(), 0).unwrap();
        assert!(t.iter().all(|t| t.mask().dims() == t.size && !t.prompts.is_empty()));
        assert_eq!(t.iter().filter(|t| t.split == Task::Editing).count(), 4);
    }

    #[test]
    fn manifest_round_trip_writes_masks() {
        let dir = tempfile::tempdir().unwrap();
        let tuples = assemble(&subjects(1), &synthetic_backgrounds(2), 2, &BTreeMap::new(), 0).unwrap();
        let m = BenchManifest {
            seed: 0,
            image_root: PathBuf::from("imgs"),
            tuples,
        };
        let path = m.save(dir.path()).unwrap();
        assert_eq!(BenchManifest::load(path).unwrap(), m);
        let mask = BinaryMask::load(dir.path().join(&m.tuples[0].mask_path)).unwrap();
        assert_eq!(mask, m.tuples[0].mask());
    }
}
