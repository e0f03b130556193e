//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use subinpaint::grid::{BinaryMask, BoundingBox, ImageGrid};

pub const BIN: &str = env!("CARGO_BIN_EXE_subinpaint");

/// A brown disc on a pale backdrop.
pub fn subject_image(size: usize) -> ImageGrid {
    let c = (size as f64 - 1.0) / 2.0;
    let r2 = (size as f64 * 0.32).powi(2);
    ImageGrid::from_fn(size, size, 3, |(y, x, k)| {
        let d = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
        if d < r2 {
            [0.55, 0.3, 0.15][k]
        } else {
            0.85
        }
    })
}

pub fn subject_mask(size: usize) -> BinaryMask {
    let c = (size as f64 - 1.0) / 2.0;
    let r2 = (size as f64 * 0.32).powi(2);
    BinaryMask::from_fn(size, size, |(y, x)| {
        (y as f64 - c).powi(2) + (x as f64 - c).powi(2) < r2
    })
}

/// A smooth gradient scene with mild texture.
pub fn background(h: usize, w: usize) -> ImageGrid {
    ImageGrid::from_fn(h, w, 3, |(y, x, k)| {
        let t = (y as f64 / h as f64 + x as f64 / w as f64) / 2.0;
        let ripple = 0.05 * ((x as f64 * 0.7 + k as f64).sin() * (y as f64 * 0.4).cos());
        (0.2 + 0.6 * t + 0.1 * k as f64 + ripple).clamp(0.0, 1.0)
    })
}

pub fn box_mask(h: usize, w: usize, top: usize, left: usize, bh: usize, bw: usize) -> BinaryMask {
    BinaryMask::from_box(h, w, &BoundingBox::new(top, left, top + bh, left + bw))
}

/// Writes `n` subject images (with masks) into `dir/subject`.
pub fn write_subject_dir(dir: &Path, n: usize) -> PathBuf {
    let sub = dir.join("subject");
    std::fs::create_dir_all(sub.join("masks")).unwrap();
    for i in 0..n {
        let name = format!("{i:02}.png");
        subject_image(32).save_png(sub.join(&name)).unwrap();
        subject_mask(32).save_png(sub.join("masks").join(&name)).unwrap();
    }
    sub
}

/// Background plus mask PNGs; returns `(background, mask)` paths.
pub fn write_scene(dir: &Path) -> (PathBuf, PathBuf) {
    let bg = dir.join("background.png");
    let mask = dir.join("mask.png");
    background(64, 80).save_png(&bg).unwrap();
    box_mask(64, 80, 20, 28, 24, 22).save_png(&mask).unwrap();
    (bg, mask)
}

pub struct CliRun {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CliRun {
    pub fn path(&self) -> PathBuf {
        PathBuf::from(self.stdout.trim())
    }
}

pub fn cli(args: &[&str]) -> CliRun {
    let Output { status, stdout, stderr } = Command::new(BIN)
        .args(args)
        .env("SUBINPAINT_LOG", "warn")
        .output()
        .unwrap();
    CliRun {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

pub fn cli_ok(args: &[&str]) -> CliRun {
    let r = cli(args);
    assert_eq!(r.code, 0, "command {args:?} failed:\n{}", r.stderr);
    r
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn count_files(dir: &Path, prefix: &str) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_string_lossy().starts_with(prefix))
                .count()
        })
        .unwrap_or(0)
}

pub fn dir_entries(dir: &Path) -> usize {
    std::fs::read_dir(dir).map(|rd| rd.count()).unwrap_or(0)
}

/// Writes a small benchmark corpus: `n_images` annotated backgrounds and a
/// subject list of `n_subjects`. Returns `(annotations, images, subjects)`.
pub fn write_bench_corpus(dir: &Path, n_images: usize, n_subjects: usize) -> (PathBuf, PathBuf, PathBuf) {
    let images = dir.join("backgrounds");
    std::fs::create_dir_all(&images).unwrap();
    let mut anns = Vec::new();
    for i in 0..n_images {
        let name = format!("bg{i:02}.png");
        background(64, 72).save_png(images.join(&name)).unwrap();
        anns.push(serde_json::json!({ "image": name, "boxes": [[20 + i % 5, 16, 24, 28], [0, 0, 4, 4]] }));
    }
    let annotations = dir.join("annotations.json");
    std::fs::write(&annotations, serde_json::to_string(&anns).unwrap()).unwrap();
    let subjects: Vec<_> = (0..n_subjects)
        .map(|i| serde_json::json!({ "id": format!("subj{i}"), "class": "object" }))
        .collect();
    let subjects_path = dir.join("subjects.json");
    std::fs::write(&subjects_path, serde_json::to_string(&subjects).unwrap()).unwrap();
    (annotations, images, subjects_path)
}
