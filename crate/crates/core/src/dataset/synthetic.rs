//! Procedurally rendered geometric shapes with templated captions.
//!
//! One class per shape kind; colors vary within a class and are named in
//! the captions. The color of each image is also written as a one-hot
//! attribute vector to `aux.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AUX, CLASSES, MANIFEST};
use crate::error::{Error, Result};
use crate::image::rgb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown shape {name:?}")))
    }

    /// Membership test in coordinates normalized to the shape's half-extent.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => (-0.9..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.9) / 1.7,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9)
            }
            ShapeKind::Ring => (0.3025..=1.0).contains(&(u * u + v * v)),
        }
    }
}

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 200, 60]),
    ("blue", [40, 70, 230]),
    ("yellow", [235, 220, 40]),
    ("magenta", [220, 40, 210]),
    ("cyan", [40, 210, 220]),
    ("white", [240, 240, 240]),
    ("orange", [245, 140, 20]),
];

const TEMPLATES: [&str; 5] = [
    "a {color} {shape}",
    "a {shape} colored {color}",
    "this is a {color} {shape}",
    "a {color} {shape} on a black background",
    "the image shows a {color} {shape}",
];

pub const MAX_CAPTIONS: usize = TEMPLATES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<String>,
    pub per_class: usize,
    pub resolution: usize,
    pub captions_per_image: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `n_classes` shapes in every palette color.
    pub fn shapes(n_classes: usize, per_class: usize, resolution: usize, seed: u64) -> Self {
        Self {
            shapes: ShapeKind::ALL.iter().copied().take(n_classes).collect(),
            colors: PALETTE.iter().map(|(n, _)| n.to_string()).collect(),
            per_class,
            resolution,
            captions_per_image: MAX_CAPTIONS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Validation("need at least one shape and one color".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Validation("per_class must be positive".into()));
        }
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(Error::Validation(format!(
                "resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        if !(1..=MAX_CAPTIONS).contains(&self.captions_per_image) {
            return Err(Error::Validation(format!(
                "captions_per_image must be in 1..={MAX_CAPTIONS}"
            )));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(s) {
                return Err(Error::Validation(format!("shape {} listed twice", s.name())));
            }
        }
        for c in &self.colors {
            palette_color(c)?;
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.shapes.len() * self.per_class
    }
}

fn palette_color(name: &str) -> Result<[u8; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Validation(format!("unknown color {name:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSummary {
    pub root: PathBuf,
    pub n_images: usize,
    pub n_classes: usize,
    pub n_captions: usize,
    pub files: Vec<PathBuf>,
}

const SUPERSAMPLE: usize = 4;

fn render(shape: ShapeKind, color: [u8; 3], res: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let r = res as f64;
    let half = rng.random_range(0.25..0.4) * r;
    let slack = (r / 2.0 - half).max(0.0);
    let cx = r / 2.0 + rng.random_range(-1.0..=1.0) * slack.min(0.12 * r);
    let cy = r / 2.0 + rng.random_range(-1.0..=1.0) * slack.min(0.12 * r);
    let shade = rng.random_range(0.8..=1.0);
    let mut img = RgbImage::new(res as u32, res as u32);
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..res {
        for x in 0..res {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if shape.contains((px - cx) / half, (py - cy) / half) {
                        hits += 1;
                    }
                }
            }
            let a = hits as f64 / samples * shade;
            let c = |k: usize| (f64::from(color[k]) * a).round() as u8;
            img.put_pixel(x as u32, y as u32, rgb(c(0), c(1), c(2)));
        }
    }
    img
}

/// Renders `spec` into `out` using the dataset directory layout.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticSummary> {
    spec.validate()?;
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = String::new();
    let mut aux = String::new();
    let mut files = Vec::with_capacity(spec.n_images() + 3);
    let mut n_captions = 0;
    for (class_id, &shape) in spec.shapes.iter().enumerate() {
        for i in 0..spec.per_class {
            let color_idx = rng.random_range(0..spec.colors.len());
            let color_name = &spec.colors[color_idx];
            let img = render(shape, palette_color(color_name)?, spec.resolution, &mut rng);
            let rel = format!("images/{}_{i:04}.png", shape.name());
            let path = out.join(&rel);
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            files.push(path);
            for template in &TEMPLATES[..spec.captions_per_image] {
                let caption = template
                    .replace("{color}", color_name)
                    .replace("{shape}", shape.name());
                writeln!(manifest, "{rel}\t{class_id}\t{caption}").expect("string write");
                n_captions += 1;
            }
            let q: Vec<&str> = (0..spec.colors.len())
                .map(|k| if k == color_idx { "1" } else { "0" })
                .collect();
            writeln!(aux, "{rel}\t{}", q.join(",")).expect("string write");
        }
    }
    let classes: String = spec.shapes.iter().map(|s| format!("{}\n", s.name())).collect();
    for (name, body) in [(MANIFEST, manifest), (CLASSES, classes), (AUX, aux)] {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(SyntheticSummary {
        root: out.to_path_buf(),
        n_images: spec.n_images(),
        n_classes: spec.shapes.len(),
        n_captions,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_spec_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            shapes: vec![ShapeKind::Circle, ShapeKind::Square],
            colors: vec!["red".into(), "blue".into()],
            per_class: 8,
            resolution: 32,
            captions_per_image: 1,
            seed: 7,
        };
        let summary = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        assert_eq!(summary.n_images, 16);
        assert_eq!(summary.n_classes, 2);
        let pngs = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(pngs, 16);
    }

    #[test]
    fn zero_per_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::shapes(2, 0, 32, 1);
        assert!(matches!(generate_synthetic_dataset(&spec, dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn resolution_must_be_multiple_of_16() {
        assert!(SyntheticSpec::shapes(2, 1, 24, 1).validate().is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let spec = SyntheticSpec::shapes(2, 1, 16, 1);
        assert!(matches!(
            generate_synthetic_dataset(&spec, &blocker.join("sub")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn shapes_are_distinguishable() {
        let mut masks = Vec::new();
        for s in ShapeKind::ALL {
            let m: Vec<bool> = (0..400)
                .map(|i| s.contains((i % 20) as f64 / 10.0 - 1.0, (i / 20) as f64 / 10.0 - 1.0))
                .collect();
            assert!(m.iter().any(|b| *b));
            assert!(!masks.contains(&m));
            masks.push(m);
        }
    }
}
