//! Captioned, class-labelled image collections and the real/wrong/caption
//! triplets the discriminator trains on.
//!
//! On disk a dataset is a directory holding `manifest.tsv` with one
//! `image_relpath<TAB>class_id<TAB>caption` line per caption (an image may
//! span several lines), plus two optional files:
//!
//! * `classes.tsv`: one class name per line; its line count fixes the
//!   number of classes. Without it the count is `max(class_id) + 1`.
//! * `aux.tsv`: `image_relpath<TAB>q1,q2,...` attribute vectors in `[0, 1]`
//!   for the auxiliary discriminator head.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

pub use synthetic::{generate_synthetic_dataset, ShapeKind, SyntheticSpec, SyntheticSummary, MAX_CAPTIONS, PALETTE};

pub const MANIFEST: &str = "manifest.tsv";
pub const CLASSES: &str = "classes.tsv";
pub const AUX: &str = "aux.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInstance {
    pub image_path: String,
    pub image: Image,
    pub captions: Vec<String>,
    pub class_id: usize,
    pub aux: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<DatasetInstance>,
    n_classes: usize,
    resolution: usize,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(instances: Vec<DatasetInstance>, n_classes: usize, resolution: usize) -> Result<Self> {
        if n_classes == 0 || resolution == 0 {
            return Err(Error::Validation("n_classes and resolution must be positive".into()));
        }
        let aux_len = instances.first().and_then(|i| i.aux.as_ref().map(Vec::len));
        let mut seen = vec![false; n_classes];
        for inst in &instances {
            let name = &inst.image_path;
            if inst.captions.is_empty() {
                return Err(Error::Validation(format!("instance {name} has no caption")));
            }
            if inst.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::Validation(format!("instance {name} has an empty caption")));
            }
            if inst.class_id >= n_classes {
                return Err(Error::Validation(format!(
                    "instance {name}: class_id {} out of range for {n_classes} classes",
                    inst.class_id
                )));
            }
            if inst.image.height() != resolution || inst.image.width() != resolution {
                return Err(Error::Validation(format!(
                    "instance {name}: image is {}x{}, expected {resolution}x{resolution}",
                    inst.image.height(),
                    inst.image.width()
                )));
            }
            if !inst.image.in_range() {
                return Err(Error::Validation(format!("instance {name}: pixel values outside [-1, 1]")));
            }
            match (&inst.aux, aux_len) {
                (None, None) => {}
                (Some(q), Some(len)) if q.len() == len && q.iter().all(|v| (0.0..=1.0).contains(v)) => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "instance {name}: auxiliary vector missing, of inconsistent length, or outside [0, 1]"
                    )))
                }
            }
            seen[inst.class_id] = true;
        }
        if seen.iter().filter(|s| **s).count() < 2 {
            return Err(Error::Validation("need ≥ 2 classes".into()));
        }
        Ok(Self {
            instances,
            n_classes,
            resolution,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_classes {
            return Err(Error::Validation(format!(
                "{} class names for {} classes",
                names.len(),
                self.n_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn instances(&self) -> &[DatasetInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Width of the auxiliary vectors, 0 when the dataset has none.
    pub fn aux_dim(&self) -> usize {
        self.instances
            .first()
            .and_then(|i| i.aux.as_ref())
            .map_or(0, Vec::len)
    }

    /// Indices of the instances of `class_id`, in dataset order.
    pub fn class_indices(&self, class_id: usize) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a dataset directory, resizing every image to `resolution`.
pub fn load_dataset(root: &Path, resolution: usize) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST);
    let manifest = read_text(&manifest_path)?;

    let mut order: Vec<String> = Vec::new();
    let mut entries: HashMap<String, (usize, Vec<String>)> = HashMap::new();
    for (i, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let mut fields = line.splitn(3, '\t');
        let (path, class, caption) = match (fields.next(), fields.next(), fields.next()) {
            (Some(p), Some(c), caption) => (p, c, caption.unwrap_or("")),
            _ => {
                return Err(Error::Validation(format!(
                    "{} line {row}: expected image_relpath<TAB>class_id<TAB>caption",
                    manifest_path.display()
                )))
            }
        };
        let class_id: usize = class.trim().parse().map_err(|_| {
            Error::Validation(format!("instance {path}: class_id {class:?} is not a non-negative integer"))
        })?;
        let entry = entries.entry(path.to_string()).or_insert_with(|| {
            order.push(path.to_string());
            (class_id, Vec::new())
        });
        if entry.0 != class_id {
            return Err(Error::Validation(format!(
                "instance {path}: conflicting class ids {} and {class_id}",
                entry.0
            )));
        }
        if !caption.trim().is_empty() {
            entry.1.push(caption.to_string());
        }
    }

    let class_names = match fs::read_to_string(root.join(CLASSES)) {
        Ok(text) => Some(text.lines().map(str::to_string).filter(|l| !l.is_empty()).collect::<Vec<_>>()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(root.join(CLASSES), e)),
    };
    let aux = match fs::read_to_string(root.join(AUX)) {
        Ok(text) => Some(parse_aux(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(root.join(AUX), e)),
    };

    let mut instances = Vec::with_capacity(order.len());
    for path in order {
        let (class_id, captions) = entries.remove(&path).expect("recorded above");
        if captions.is_empty() {
            return Err(Error::Validation(format!("instance {path} has no caption")));
        }
        let image = Image::load(&root.join(&path), resolution)?;
        let aux = match &aux {
            Some(table) => Some(
                table
                    .get(&path)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("instance {path} has no row in {AUX}")))?,
            ),
            None => None,
        };
        instances.push(DatasetInstance {
            image_path: path,
            image,
            captions,
            class_id,
            aux,
        });
    }

    let n_classes = match &class_names {
        Some(names) => names.len(),
        None => instances.iter().map(|i| i.class_id + 1).max().unwrap_or(0),
    };
    let dataset = Dataset::new(instances, n_classes.max(1), resolution)?;
    match class_names {
        Some(names) => dataset.with_class_names(names),
        None => Ok(dataset),
    }
}

fn parse_aux(text: &str) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{AUX} row {}: missing tab separator", i + 1)))?;
        let q = values
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{AUX} row {}: {e}", i + 1)))?;
        out.insert(path.to_string(), q);
    }
    Ok(out)
}

pub fn one_hot(class_id: usize, n_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_classes];
    v[class_id] = 1.0;
    v
}

/// A real image, a mismatched ("wrong") image from another class, and the
/// caption of the real image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub real_index: usize,
    pub wrong_index: usize,
    pub real_image: Image,
    pub wrong_image: Image,
    pub caption: String,
    pub real_class: Vec<f64>,
    pub wrong_class: Vec<f64>,
    pub real_aux: Option<Vec<f64>>,
    pub wrong_aux: Option<Vec<f64>>,
}

/// Triplet for a uniformly drawn real instance.
pub fn sample_triplet<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> TrainingTriplet {
    let real = rng.random_range(0..dataset.len());
    triplet_for(dataset, real, rng)
}

/// Triplet for a given real instance: a uniform caption of that instance
/// and a uniform wrong instance among those with a different class.
pub fn triplet_for<R: Rng + ?Sized>(dataset: &Dataset, real: usize, rng: &mut R) -> TrainingTriplet {
    let inst = &dataset.instances[real];
    let caption = inst.captions[rng.random_range(0..inst.captions.len())].clone();
    let wrong = loop {
        let j = rng.random_range(0..dataset.len());
        if dataset.instances[j].class_id != inst.class_id {
            break j;
        }
    };
    let other = &dataset.instances[wrong];
    TrainingTriplet {
        real_index: real,
        wrong_index: wrong,
        real_image: inst.image.clone(),
        wrong_image: other.image.clone(),
        caption,
        real_class: one_hot(inst.class_id, dataset.n_classes),
        wrong_class: one_hot(other.class_id, dataset.n_classes),
        real_aux: inst.aux.clone(),
        wrong_aux: other.aux.clone(),
    }
}

/// Deterministic stream of derived generators: one per `(seed, domain, index)`.
pub fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) ^ index);
    rng
}

const EPOCH_DOMAIN: u64 = 1;
const STEP_DOMAIN: u64 = 2;

/// Triplets for training step `step`: instances are visited in a fresh
/// permutation every epoch, captions and wrong images are drawn per step.
/// Depends only on `(dataset, seed, step, batch_size)`, so training can
/// resume at any step.
pub fn batch_triplets(dataset: &Dataset, seed: u64, step: u64, batch_size: usize) -> Vec<TrainingTriplet> {
    let n = dataset.len() as u64;
    let mut rng = derived_rng(seed, STEP_DOMAIN, step);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let sample = step * batch_size as u64 + j;
            let (epoch, pos) = (sample / n, (sample % n) as usize);
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(dataset.len(), seed, epoch)));
            }
            let real = cached.as_ref().expect("set above").1[pos];
            triplet_for(dataset, real, &mut rng)
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, EPOCH_DOMAIN, epoch));
    order
}
