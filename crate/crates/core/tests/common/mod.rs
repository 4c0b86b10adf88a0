#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tacgan::dataset::{Dataset, DatasetInstance};
use tacgan::image::Image;
use tacgan::network::{generator_pass, Mode, Model, ModelConfig};
use tacgan::tensor::{ParamSet, Tensor};
use tacgan::text_encoder::EncoderBackend;
use tacgan::training::{
    discriminator_objective, generator_objective, step_inputs, LossTerm, TrainBatch, TrainOptions,
};

/// Two-class dataset of random-pixel images with 3-dim one-hot aux vectors.
pub fn noisy_dataset(cfg: &ModelConfig, per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.resolution;
    let mut instances = Vec::new();
    for c in 0..cfg.n_classes {
        for i in 0..per_class {
            let data = (0..r * r * 3).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let aux = (cfg.aux_dim > 0).then(|| {
                (0..cfg.aux_dim).map(|k| if k == i % cfg.aux_dim { 1.0 } else { 0.0 }).collect()
            });
            instances.push(DatasetInstance {
                image_path: format!("{c}_{i}.png"),
                image: Image::new(r, r, data).unwrap(),
                captions: vec![format!("picture {i} of kind {c}")],
                class_id: c,
                aux,
            });
        }
    }
    Dataset::new(instances, cfg.n_classes, r).unwrap()
}

pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs())
    }
}

fn term_value(model: &Model, batch: &TrainBatch, fake: &Tensor, noise: &Tensor, term: LossTerm) -> (f64, ParamSet) {
    let (values, grads) = if LossTerm::DISCRIMINATOR.contains(&term) {
        let (v, g, _) = discriminator_objective(model, batch, fake, &[term]).unwrap();
        (v, g)
    } else {
        let (v, g, _) = generator_objective(model, batch, noise, &[term]).unwrap();
        (v, g)
    };
    (values.get(term).expect("term active"), grads)
}

/// Central finite differences with step `h` on `count` randomly chosen
/// parameters that receive a non-zero analytic gradient from `term`.
/// A point whose forward and backward differences disagree straddles an
/// activation kink; it is skipped and counted in the second return value.
pub fn gradient_check(term: LossTerm, count: usize, h: f64, seed: u64) -> (Vec<GradCheck>, usize) {
    let mut cfg = ModelConfig::tiny(2);
    cfg.aux_dim = 3;
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let ds = noisy_dataset(&cfg, 3, seed + 1);
    let enc = EncoderBackend::hashing(seed, cfg.text_dim);
    let opts = TrainOptions { batch_size: 4, seed };
    let (batch, noise_d, noise_g) = step_inputs(&ds, &enc, &model, &opts, 0).unwrap();
    let fake = generator_pass(&cfg, &model.params, &model.stats, &batch.embeddings, &noise_d, Mode::Train)
        .unwrap()
        .into_images();

    let (center, grads) = term_value(&model, &batch, &fake, &noise_g, term);
    let is_d = LossTerm::DISCRIMINATOR.contains(&term);
    let mut candidates: Vec<(String, usize)> = Vec::new();
    for (name, g) in grads.iter() {
        for (i, v) in g.data().iter().enumerate() {
            if v.abs() > 1e-5 {
                candidates.push((name.to_string(), i));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    candidates.shuffle(&mut rng);

    let mut out = Vec::new();
    let mut kinks = 0;
    for (name, index) in candidates {
        if out.len() == count {
            break;
        }
        let mut eval = |delta: f64| {
            let set = if is_d {
                &mut model.params.discriminator
            } else {
                &mut model.params.generator
            };
            let orig = set.get(&name).unwrap().data()[index];
            set.get_mut(&name).unwrap().data_mut()[index] = orig + delta;
            let v = term_value(&model, &batch, &fake, &noise_g, term).0;
            let set = if is_d {
                &mut model.params.discriminator
            } else {
                &mut model.params.generator
            };
            set.get_mut(&name).unwrap().data_mut()[index] = orig;
            v
        };
        let (up, down) = (eval(h), eval(-h));
        let (fwd, bwd) = ((up - center) / h, (center - down) / h);
        if (fwd - bwd).abs() > 1e-4 * fwd.abs().max(bwd.abs()) {
            kinks += 1;
            continue;
        }
        out.push(GradCheck {
            analytic: grads.get(&name).unwrap().data()[index],
            numeric: (up - down) / (2.0 * h),
            name,
            index,
        });
    }
    (out, kinks)
}
