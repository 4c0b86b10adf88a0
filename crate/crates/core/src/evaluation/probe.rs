//! Small convolutional classifier used as the score's class-posterior model
//! and as an independent judge of generated images.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{derived_rng, Dataset};
use crate::error::{Error, Result};
use crate::image::{images_to_batch, Image};
use crate::layers::{self, Geometry, LEAKY_SLOPE};
use crate::tensor::{ParamSet, Tensor};
use crate::training::{AdamConfig, OptimizerState};

const KERNEL: usize = 5;
const CHANNELS: [usize; 2] = [16, 32];
const BATCH: usize = 32;
pub const HELD_OUT_FRACTION: f64 = 0.2;

const SPLIT_DOMAIN: u64 = 16;
const BATCH_DOMAIN: u64 = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    n_classes: usize,
    resolution: usize,
    params: ParamSet,
}

struct Trace {
    input: Tensor,
    acts: Vec<Tensor>,
    probs: Tensor,
}

impl ProbeClassifier {
    /// He-scaled Gaussian weights, zero biases.
    pub fn new(n_classes: usize, resolution: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Validation("need ≥ 2 classes".into()));
        }
        if resolution < 4 || resolution % 4 != 0 {
            return Err(Error::Validation(format!("probe resolution {resolution} must be a multiple of 4")));
        }
        let mut rng = derived_rng(seed, 0, 0);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (i, &c) in CHANNELS.iter().enumerate() {
            let std = (2.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
            params.insert(format!("conv{i}.w"), Tensor::randn(&[c, c_in, KERNEL, KERNEL], std, &mut rng));
            params.insert(format!("conv{i}.b"), Tensor::zeros(&[c]));
            c_in = c;
        }
        let flat = c_in * (resolution / 4) * (resolution / 4);
        params.insert("out.w", Tensor::randn(&[n_classes, flat], (1.0 / flat as f64).sqrt(), &mut rng));
        params.insert("out.b", Tensor::zeros(&[n_classes]));
        Ok(Self {
            n_classes,
            resolution,
            params,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn forward(&self, images: &[&Image]) -> Result<Trace> {
        for img in images {
            if img.height() != self.resolution || img.width() != self.resolution {
                return Err(Error::shape(
                    "probe input",
                    (self.resolution, self.resolution),
                    (img.height(), img.width()),
                ));
            }
        }
        let input = images_to_batch(images)?;
        let mut acts: Vec<Tensor> = Vec::new();
        for i in 0..CHANNELS.len() {
            let x = acts.last().unwrap_or(&input);
            let side = x.shape()[2];
            let g = Geometry::same(side, side, KERNEL, 2);
            let p = |n: &str| self.params.get(&format!("conv{i}.{n}")).expect("probe parameter");
            let mut y = layers::conv2d_forward(x, p("w"), Some(p("b")), &g);
            layers::leaky_relu_inplace(&mut y);
            acts.push(y);
        }
        let logits = layers::linear_forward(
            acts.last().expect("two layers"),
            self.params.get("out.w").expect("probe parameter"),
            Some(self.params.get("out.b").expect("probe parameter")),
        );
        let mut probs = logits;
        for i in 0..probs.batch() {
            softmax_inplace(probs.item_mut(i));
        }
        Ok(Trace { input, acts, probs })
    }

    /// Class posteriors, one softmax vector per image.
    pub fn predict_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let t = self.forward(chunk)?;
            out.extend((0..chunk.len()).map(|i| t.probs.item(i).to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    pub fn classify(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.predict(image)?))
    }

    pub fn accuracy(&self, samples: &[(&Image, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Validation("no samples to score".into()));
        }
        let images: Vec<&Image> = samples.iter().map(|(i, _)| *i).collect();
        let probs = self.predict_batch(&images)?;
        let hits = probs.iter().zip(samples).filter(|(p, (_, c))| argmax(p) == *c).count();
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Mean softmax cross entropy and its gradient.
    fn gradients(&self, images: &[&Image], labels: &[usize]) -> Result<(f64, ParamSet)> {
        let t = self.forward(images)?;
        let n = images.len();
        let mut d = t.probs.clone();
        let mut loss = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            loss -= t.probs.item(i)[c].max(1e-300).ln();
            d.item_mut(i)[c] -= 1.0;
        }
        d.data_mut().iter_mut().for_each(|v| *v /= n as f64);

        let mut grads = ParamSet::new();
        let last = t.acts.last().expect("two layers");
        let lg = layers::linear_backward(last, self.params.get("out.w").expect("probe parameter"), &d, true, true);
        grads.insert("out.w", lg.weight);
        grads.insert("out.b", lg.bias.expect("requested"));
        let mut dy = lg.input.expect("requested").reshape(last.shape())?;
        for i in (0..CHANNELS.len()).rev() {
            layers::rectifier_backward(&t.acts[i], &mut dy, LEAKY_SLOPE);
            let x = if i == 0 { &t.input } else { &t.acts[i - 1] };
            let side = x.shape()[2];
            let g = Geometry::same(side, side, KERNEL, 2);
            let w = self.params.get(&format!("conv{i}.w")).expect("probe parameter");
            let lg = layers::conv2d_backward(x, w, &dy, &g, true, i > 0);
            grads.insert(format!("conv{i}.w"), lg.weight);
            grads.insert(format!("conv{i}.b"), lg.bias.expect("requested"));
            if let Some(dx) = lg.input {
                dy = dx;
            }
        }
        Ok((loss / n as f64, grads))
    }
}

fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone)]
pub struct ProbeTraining {
    pub classifier: ProbeClassifier,
    pub held_out_accuracy: f64,
    pub train_indices: Vec<usize>,
    pub held_out_indices: Vec<usize>,
    pub final_loss: f64,
}

/// Stratified split: `HELD_OUT_FRACTION` of every class with at least two
/// instances is held out.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = derived_rng(seed, SPLIT_DOMAIN, 0);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for c in 0..dataset.n_classes() {
        let mut idx = dataset.class_indices(c);
        idx.shuffle(&mut rng);
        let k = if idx.len() >= 2 {
            ((idx.len() as f64 * HELD_OUT_FRACTION).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Adam (lr 1e-3, beta1 0.9) on minibatches of 32 drawn from the training
/// split; accuracy is measured on the held-out split.
pub fn train_probe_classifier(dataset: &Dataset, steps: usize, seed: u64) -> Result<ProbeTraining> {
    let mut classifier = ProbeClassifier::new(dataset.n_classes(), dataset.resolution(), seed)?;
    let (train, held) = split_dataset(dataset, seed);
    let mut opt = OptimizerState::new(
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            ..AdamConfig::default()
        },
        &classifier.params,
    );
    let inst = dataset.instances();
    let mut final_loss = f64::NAN;
    for step in 0..steps {
        let mut rng = derived_rng(seed, BATCH_DOMAIN, step as u64);
        let picks: Vec<usize> = (0..BATCH.min(train.len()))
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let images: Vec<&Image> = picks.iter().map(|&i| &inst[i].image).collect();
        let labels: Vec<usize> = picks.iter().map(|&i| inst[i].class_id).collect();
        let (loss, grads) = classifier.gradients(&images, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                term: "probe_cross_entropy",
                step: step as u64,
            });
        }
        opt.update(&mut classifier.params, &grads)?;
        final_loss = loss;
    }
    let held_out_accuracy = if held.is_empty() {
        f64::NAN
    } else {
        let samples: Vec<(&Image, usize)> = held.iter().map(|&i| (&inst[i].image, inst[i].class_id)).collect();
        classifier.accuracy(&samples)?
    };
    Ok(ProbeTraining {
        classifier,
        held_out_accuracy,
        train_indices: train,
        held_out_indices: held,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_distributions() {
        let probe = ProbeClassifier::new(3, 16, 1).unwrap();
        let img = Image::filled(16, 16, 0.3);
        let p = probe.predict(&img).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rejects_single_class_and_bad_input() {
        assert!(ProbeClassifier::new(1, 16, 0).is_err());
        let probe = ProbeClassifier::new(2, 16, 0).unwrap();
        assert!(probe.predict(&Image::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let probe = ProbeClassifier::new(3, 8, 4).unwrap();
        let mut rng = derived_rng(5, 0, 0);
        let imgs: Vec<Image> = (0..4)
            .map(|_| Image::new(8, 8, (0..192).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap())
            .collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let labels = [0, 2, 1, 2];
        let (_, grads) = probe.gradients(&refs, &labels).unwrap();
        for (name, index) in [("out.w", 5), ("out.b", 1), ("conv1.w", 77), ("conv0.w", 13), ("conv0.b", 3)] {
            let h = 1e-6;
            let at = |delta: f64| {
                let mut p = probe.clone();
                p.params.get_mut(name).unwrap().data_mut()[index] += delta;
                p.gradients(&refs, &labels).unwrap().0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic = grads.get(name).unwrap().data()[index];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()),
                "{name}[{index}] {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = crate::dataset::tests::toy(3, 10, 1);
        let (train, held) = split_dataset(&ds, 9);
        assert_eq!(held.len(), 6);
        assert_eq!(train.len() + held.len(), 30);
        assert!(held.iter().all(|i| !train.contains(i)));
        assert_eq!(split_dataset(&ds, 9), (train, held));
    }
}
