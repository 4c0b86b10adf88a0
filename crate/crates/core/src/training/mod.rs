//! Adversarial training: one discriminator update followed by one generator
//! update per batch.

mod adam;
mod checkpoint;
mod losses;

pub use adam::{adam_update, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{
    bce, bce_sum, loss_aux, loss_d_class, loss_d_source, loss_g, AuxProbe, AuxiliaryTarget, LossBreakdown,
    PROB_CLAMP,
};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dataset::{batch_triplets, derived_rng, Dataset, TrainingTriplet};
use crate::error::{Error, Result};
use crate::image::images_to_batch;
use crate::layers::sigmoid;
use crate::network::{
    absorb_discriminator_stats, absorb_generator_stats, discriminator_backward, discriminator_pass,
    generator_backward, generator_pass, DiscriminatorTrace, GeneratorTrace, HeadLogits, Mode, Model, BN_MOMENTUM,
};
use crate::tensor::{ParamSet, Tensor};
use crate::text_encoder::EncoderBackend;

pub const DEFAULT_BATCH_SIZE: usize = 64;

const NOISE_D_DOMAIN: u64 = 3;
const NOISE_G_DOMAIN: u64 = 4;

/// Per-row targets for the auxiliary head.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxBatch {
    pub q_real: Tensor,
    pub q_wrong: Tensor,
    pub q_fake: Tensor,
}

/// A batch of triplets packed into tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// `[N, text_dim]`
    pub embeddings: Tensor,
    /// `[N, 3, res, res]`
    pub real: Tensor,
    pub wrong: Tensor,
    /// `[N, n_classes]` one-hot rows.
    pub c_real: Tensor,
    pub c_wrong: Tensor,
    pub aux: Option<AuxBatch>,
}

impl TrainBatch {
    /// Embeds every caption with `encoder`. Auxiliary targets are kept when
    /// `with_aux` is set; the fake target equals the real one.
    pub fn from_triplets(triplets: &[TrainingTriplet], encoder: &EncoderBackend, with_aux: bool) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let n = triplets.len();
        let mut emb = Vec::with_capacity(n * encoder.dim());
        for t in triplets {
            emb.extend_from_slice(encoder.embed(&t.caption)?.vector());
        }
        let rows = |f: &dyn Fn(&TrainingTriplet) -> &[f64]| -> Result<Tensor> {
            let width = f(&triplets[0]).len();
            let data: Vec<f64> = triplets.iter().flat_map(|t| f(t).iter().copied()).collect();
            Tensor::from_vec(&[n, width], data)
        };
        let aux = if with_aux {
            if triplets.iter().any(|t| t.real_aux.is_none() || t.wrong_aux.is_none()) {
                return Err(Error::Validation("auxiliary head enabled but the dataset has no aux vectors".into()));
            }
            let q_real = rows(&|t| t.real_aux.as_deref().expect("checked"))?;
            Some(AuxBatch {
                q_wrong: rows(&|t| t.wrong_aux.as_deref().expect("checked"))?,
                q_fake: q_real.clone(),
                q_real,
            })
        } else {
            None
        };
        Ok(Self {
            embeddings: Tensor::from_vec(&[n, encoder.dim()], emb)?,
            real: images_to_batch(&triplets.iter().map(|t| &t.real_image).collect::<Vec<_>>())?,
            wrong: images_to_batch(&triplets.iter().map(|t| &t.wrong_image).collect::<Vec<_>>())?,
            c_real: rows(&|t| &t.real_class)?,
            c_wrong: rows(&|t| &t.wrong_class)?,
            aux,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform noise in `[-1, 1]`, a pure function of `(seed, index)`.
pub fn noise_vector(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = derived_rng(seed, 0, index);
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn noise_batch(seed: u64, domain: u64, step: u64, n: usize, dim: usize) -> Tensor {
    let mut rng = derived_rng(seed, domain, step);
    let data = (0..n * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::from_vec(&[n, dim], data).expect("length matches")
}

/// Individually selectable loss terms, used to isolate gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    DSource,
    DClass,
    DAux,
    GSource,
    GClass,
    GAux,
}

impl LossTerm {
    pub const DISCRIMINATOR: [LossTerm; 3] = [LossTerm::DSource, LossTerm::DClass, LossTerm::DAux];
    pub const GENERATOR: [LossTerm; 3] = [LossTerm::GSource, LossTerm::GClass, LossTerm::GAux];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::DSource => "d_source",
            LossTerm::DClass => "d_class",
            LossTerm::DAux => "d_aux",
            LossTerm::GSource => "g_source",
            LossTerm::GClass => "g_class",
            LossTerm::GAux => "g_aux",
        }
    }
}

/// Batch-mean BCE of `sigmoid(logits)` against `targets`, and the
/// matching logit gradient `(p - t) / N` added into `grad` when given.
fn bce_logits(logits: &Tensor, targets: &Tensor, grad: Option<&mut Tensor>) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape("loss targets", logits.shape(), targets.shape()));
    }
    let n = logits.batch() as f64;
    let mut loss = 0.0;
    let mut g = grad;
    for (i, (&z, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        let p = sigmoid(z);
        loss += bce(p, t);
        if let Some(g) = g.as_deref_mut() {
            g.data_mut()[i] += (p - t) / n;
        }
    }
    Ok(loss / n)
}

fn zero_logit_grads(logits: &HeadLogits) -> HeadLogits {
    HeadLogits {
        source: Tensor::zeros(logits.source.shape()),
        class: Tensor::zeros(logits.class.shape()),
        aux: logits.aux.as_ref().map(|a| Tensor::zeros(a.shape())),
    }
}

fn merge(into: &mut ParamSet, from: ParamSet) {
    for (name, g) in from.iter() {
        let acc = into.accum(name, g.shape());
        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v;
        }
    }
}

/// Discriminator losses on `(real, fake, wrong)` and the gradient of the
/// sum of `terms` w.r.t. the discriminator parameters. Each image set gets
/// its own forward pass and batch statistics.
pub fn discriminator_objective(
    model: &Model,
    batch: &TrainBatch,
    fake: &Tensor,
    terms: &[LossTerm],
) -> Result<(LossValues, ParamSet, Vec<DiscriminatorTrace>)> {
    let cfg = &model.config;
    let n = batch.len();
    let ones = Tensor::filled(&[n, 1], 1.0);
    let zeros = Tensor::zeros(&[n, 1]);
    let mut values = LossValues::default();
    let mut grads = ParamSet::new();
    let mut traces = Vec::with_capacity(3);
    let sets = [(&batch.real, true, &batch.c_real), (fake, false, &batch.c_real), (&batch.wrong, false, &batch.c_wrong)];
    for (k, (images, is_real, classes)) in sets.into_iter().enumerate() {
        let trace = discriminator_pass(cfg, &model.params, &model.stats, images, &batch.embeddings, Mode::Train)?;
        let mut d = zero_logit_grads(&trace.logits);
        let want = |t| terms.contains(&t).then_some(());
        values.d_source += bce_logits(
            &trace.logits.source,
            if is_real { &ones } else { &zeros },
            want(LossTerm::DSource).map(|_| &mut d.source),
        )?;
        values.d_class += bce_logits(&trace.logits.class, classes, want(LossTerm::DClass).map(|_| &mut d.class))?;
        if let (Some(aux), Some(logits)) = (&batch.aux, &trace.logits.aux) {
            let q = if k == 2 { &aux.q_wrong } else { &aux.q_real };
            let v = bce_logits(logits, q, want(LossTerm::DAux).and(d.aux.as_mut()))?;
            values.d_aux = Some(values.d_aux.unwrap_or(0.0) + v);
        }
        let (g, _) = discriminator_backward(cfg, &model.params, &trace, &d, false);
        merge(&mut grads, g);
        traces.push(trace);
    }
    Ok((values, grads, traces))
}

/// Generator losses for a fresh fake batch and the gradient of the sum of
/// `terms` w.r.t. the generator parameters. The discriminator is a fixed
/// function here: its parameter gradients are discarded.
pub fn generator_objective(
    model: &Model,
    batch: &TrainBatch,
    noise: &Tensor,
    terms: &[LossTerm],
) -> Result<(LossValues, ParamSet, GeneratorTrace)> {
    let cfg = &model.config;
    let n = batch.len();
    let g_trace = generator_pass(cfg, &model.params, &model.stats, &batch.embeddings, noise, Mode::Train)?;
    let d_trace = discriminator_pass(cfg, &model.params, &model.stats, g_trace.images(), &batch.embeddings, Mode::Train)?;
    let mut d = zero_logit_grads(&d_trace.logits);
    let want = |t| terms.contains(&t).then_some(());
    let mut values = LossValues {
        g_source: bce_logits(
            &d_trace.logits.source,
            &Tensor::filled(&[n, 1], 1.0),
            want(LossTerm::GSource).map(|_| &mut d.source),
        )?,
        g_class: bce_logits(&d_trace.logits.class, &batch.c_real, want(LossTerm::GClass).map(|_| &mut d.class))?,
        ..LossValues::default()
    };
    if let (Some(aux), Some(logits)) = (&batch.aux, &d_trace.logits.aux) {
        values.g_aux = Some(bce_logits(logits, &aux.q_fake, want(LossTerm::GAux).and(d.aux.as_mut()))?);
    }
    let (_, d_images) = discriminator_backward(cfg, &model.params, &d_trace, &d, true);
    let grads = generator_backward(cfg, &model.params, &g_trace, &d_images.expect("requested"));
    Ok((values, grads, g_trace))
}

/// Raw loss values accumulated by the objectives.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub d_source: f64,
    pub d_class: f64,
    pub d_aux: Option<f64>,
    pub g_source: f64,
    pub g_class: f64,
    pub g_aux: Option<f64>,
}

impl LossValues {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        match term {
            LossTerm::DSource => Some(self.d_source),
            LossTerm::DClass => Some(self.d_class),
            LossTerm::DAux => self.d_aux,
            LossTerm::GSource => Some(self.g_source),
            LossTerm::GClass => Some(self.g_class),
            LossTerm::GAux => self.g_aux,
        }
    }
}

fn check_finite(values: &LossValues, terms: &[LossTerm], step: u64) -> Result<()> {
    for &t in terms {
        if values.get(t).is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: t.name(), step });
        }
    }
    Ok(())
}

/// Model and both optimizers, plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: Model,
    pub opt_d: OptimizerState,
    pub opt_g: OptimizerState,
    pub step: u64,
}

impl TrainingState {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        Self {
            opt_d: OptimizerState::new(adam, &model.params.discriminator),
            opt_g: OptimizerState::new(adam, &model.params.generator),
            model,
            step: 0,
        }
    }
}

/// Discriminator update on `(real, G(noise), wrong)`. The fake images carry
/// no gradient into the generator, whose parameters are left untouched.
pub fn discriminator_step(state: &mut TrainingState, batch: &TrainBatch, noise: &Tensor) -> Result<LossValues> {
    let model = &mut state.model;
    let fake = generator_pass(&model.config, &model.params, &model.stats, &batch.embeddings, noise, Mode::Train)?
        .into_images();
    let (values, grads, traces) = discriminator_objective(model, batch, &fake, &LossTerm::DISCRIMINATOR)?;
    check_finite(&values, &LossTerm::DISCRIMINATOR, state.step)?;
    state.opt_d.update(&mut model.params.discriminator, &grads)?;
    for t in &traces {
        absorb_discriminator_stats(&mut model.stats, t, BN_MOMENTUM);
    }
    Ok(values)
}

/// Generator update on a fresh forward pass; discriminator parameters are
/// left untouched.
pub fn generator_step(state: &mut TrainingState, batch: &TrainBatch, noise: &Tensor) -> Result<LossValues> {
    let model = &mut state.model;
    let (values, grads, trace) = generator_objective(model, batch, noise, &LossTerm::GENERATOR)?;
    check_finite(&values, &LossTerm::GENERATOR, state.step)?;
    state.opt_g.update(&mut model.params.generator, &grads)?;
    absorb_generator_stats(&mut model.stats, &trace, BN_MOMENTUM);
    Ok(values)
}

/// One discriminator update with `noise_d`, then one generator update with
/// `noise_g`. Returns the losses of the two steps' forward passes.
pub fn train_step(state: &mut TrainingState, batch: &TrainBatch, noise_d: &Tensor, noise_g: &Tensor) -> Result<LossBreakdown> {
    let d = discriminator_step(state, batch, noise_d)?;
    let g = generator_step(state, batch, noise_g)?;
    state.step += 1;
    Ok(LossBreakdown {
        d_source: d.d_source,
        d_class: d.d_class,
        g_source: g.g_source,
        g_class: g.g_class,
        d_aux: d.d_aux,
        g_aux: g.g_aux,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// Batch and noise for step `step`; a pure function of its arguments.
pub fn step_inputs(
    dataset: &Dataset,
    encoder: &EncoderBackend,
    model: &Model,
    options: &TrainOptions,
    step: u64,
) -> Result<(TrainBatch, Tensor, Tensor)> {
    let triplets = batch_triplets(dataset, options.seed, step, options.batch_size);
    let batch = TrainBatch::from_triplets(&triplets, encoder, model.config.aux_dim > 0)?;
    let nz = model.config.noise_dim;
    let noise_d = noise_batch(options.seed, NOISE_D_DOMAIN, step, options.batch_size, nz);
    let noise_g = noise_batch(options.seed, NOISE_G_DOMAIN, step, options.batch_size, nz);
    Ok((batch, noise_d, noise_g))
}

/// Runs `steps` more steps, calling `on_step(step, losses)` after each one
/// with the 1-based number of completed steps.
pub fn train(
    state: &mut TrainingState,
    dataset: &Dataset,
    encoder: &EncoderBackend,
    options: &TrainOptions,
    steps: u64,
    mut on_step: impl FnMut(&TrainingState, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    check_compatible(&state.model, dataset, encoder)?;
    if options.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    for _ in 0..steps {
        let (batch, noise_d, noise_g) = step_inputs(dataset, encoder, &state.model, options, state.step)?;
        let losses = train_step(state, &batch, &noise_d, &noise_g)?;
        on_step(state, &losses)?;
    }
    Ok(())
}

/// Checks that the model, dataset and encoder agree on every shared size.
pub fn check_compatible(model: &Model, dataset: &Dataset, encoder: &EncoderBackend) -> Result<()> {
    let cfg = &model.config;
    if cfg.text_dim != encoder.dim() {
        return Err(Error::Validation(format!(
            "encoder produces {} dimensions, model expects {}",
            encoder.dim(),
            cfg.text_dim
        )));
    }
    if cfg.n_classes != dataset.n_classes() {
        return Err(Error::Validation(format!(
            "dataset has {} classes, model expects {}",
            dataset.n_classes(),
            cfg.n_classes
        )));
    }
    if cfg.resolution != dataset.resolution() {
        return Err(Error::Validation(format!(
            "dataset resolution {} differs from model resolution {}",
            dataset.resolution(),
            cfg.resolution
        )));
    }
    if cfg.aux_dim > 0 && cfg.aux_dim != dataset.aux_dim() {
        return Err(Error::Validation(format!(
            "auxiliary head has {} outputs, dataset aux vectors have {}",
            cfg.aux_dim,
            dataset.aux_dim()
        )));
    }
    Ok(())
}

/// Append-only TSV loss log.
pub struct LossLog {
    file: File,
}

pub const LOSS_LOG_HEADER: &str = "step\tL_DS\tL_DC\tL_GS\tL_GC";

impl LossLog {
    /// Opens `path` for appending and writes the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, step: u64, l: &LossBreakdown) -> Result<()> {
        writeln!(self.file, "{}", format_loss_row(step, l)).map_err(|e| Error::io("loss log", e))
    }
}

pub fn format_loss_row(step: u64, l: &LossBreakdown) -> String {
    format!("{step}\t{}\t{}\t{}\t{}", l.d_source, l.d_class, l.g_source, l.g_class)
}

#[cfg(test)]
mod tests;
