//! Binary cross-entropy objectives for the discriminator and generator.
//!
//! Every probability is clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before
//! the logarithm, so every loss is finite and non-negative.

use crate::error::{Error, Result};
use crate::network::DiscriminatorOutput;

pub const PROB_CLAMP: f64 = 1e-7;

/// `-[t ln p + (1 - t) ln(1 - p)]` on the clamped probability.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Element-wise [`bce`] summed over a vector.
pub fn bce_sum(probs: &[f64], targets: &[f64]) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::Validation(format!(
            "probability vector has length {}, target has {}",
            probs.len(),
            targets.len()
        )));
    }
    Ok(probs.iter().zip(targets).map(|(&p, &t)| bce(p, t)).sum())
}

/// Source loss: real toward 1, fake and wrong toward 0.
pub fn loss_d_source(real: &DiscriminatorOutput, fake: &DiscriminatorOutput, wrong: &DiscriminatorOutput) -> f64 {
    bce(real.source_prob, 1.0) + bce(fake.source_prob, 0.0) + bce(wrong.source_prob, 0.0)
}

/// Class loss: real and fake toward the real class, wrong toward its own.
pub fn loss_d_class(
    real: &DiscriminatorOutput,
    fake: &DiscriminatorOutput,
    wrong: &DiscriminatorOutput,
    c_real: &[f64],
    c_wrong: &[f64],
) -> Result<f64> {
    Ok(bce_sum(&real.class_probs, c_real)?
        + bce_sum(&fake.class_probs, c_real)?
        + bce_sum(&wrong.class_probs, c_wrong)?)
}

/// `(source, class)` generator losses for one fake image.
pub fn loss_g(fake: &DiscriminatorOutput, c_real: &[f64]) -> Result<(f64, f64)> {
    Ok((bce(fake.source_prob, 1.0), bce_sum(&fake.class_probs, c_real)?))
}

/// Which discriminator output an auxiliary objective reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxProbe {
    ClassHead,
    AuxHead,
}

impl AuxProbe {
    pub fn read<'a>(&self, out: &'a DiscriminatorOutput) -> Result<&'a [f64]> {
        match self {
            AuxProbe::ClassHead => Ok(&out.class_probs),
            AuxProbe::AuxHead => out
                .aux_probs
                .as_deref()
                .ok_or_else(|| Error::Validation("discriminator has no auxiliary head".into())),
        }
    }
}

/// Per-triplet targets for an additional information source.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryTarget {
    pub probe: AuxProbe,
    pub q_real: Vec<f64>,
    pub q_wrong: Vec<f64>,
    pub q_fake: Vec<f64>,
}

impl AuxiliaryTarget {
    pub fn new(probe: AuxProbe, q_real: Vec<f64>, q_wrong: Vec<f64>, q_fake: Vec<f64>) -> Result<Self> {
        let len = q_real.len();
        for q in [&q_real, &q_wrong, &q_fake] {
            if q.len() != len {
                return Err(Error::Validation("auxiliary targets differ in length".into()));
            }
            if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation("auxiliary target outside [0, 1]".into()));
            }
        }
        Ok(Self {
            probe,
            q_real,
            q_wrong,
            q_fake,
        })
    }
}

/// `(d_aux, g_aux)`: the discriminator term pushes real and fake toward
/// `q_real` and wrong toward `q_wrong`; the generator term pushes fake
/// toward `q_fake`.
pub fn loss_aux(target: &AuxiliaryTarget, real: &[f64], fake: &[f64], wrong: &[f64]) -> Result<(f64, f64)> {
    let d = bce_sum(real, &target.q_real)? + bce_sum(fake, &target.q_real)? + bce_sum(wrong, &target.q_wrong)?;
    let g = bce_sum(fake, &target.q_fake)?;
    Ok((d, g))
}

/// Per-term losses of one training step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub d_source: f64,
    pub d_class: f64,
    pub g_source: f64,
    pub g_class: f64,
    pub d_aux: Option<f64>,
    pub g_aux: Option<f64>,
}

impl LossBreakdown {
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("d_source", self.d_source),
            ("d_class", self.d_class),
            ("g_source", self.g_source),
            ("g_class", self.g_class),
        ];
        out.extend(self.d_aux.map(|v| ("d_aux", v)));
        out.extend(self.g_aux.map(|v| ("g_aux", v)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn out(source: f64, class: Vec<f64>) -> DiscriminatorOutput {
        DiscriminatorOutput {
            source_prob: source,
            class_probs: class,
            aux_probs: None,
        }
    }

    /// Direct `-[t ln p + (1-t) ln(1-p)]` without clamping.
    fn oracle(p: f64, t: f64) -> f64 {
        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
    }

    #[test]
    fn perfect_source_discrimination_is_near_zero() {
        let l = loss_d_source(&out(1.0, vec![]), &out(0.0, vec![]), &out(0.0, vec![]));
        assert!(l >= 0.0);
        assert!(l <= 3.0 * bce(1.0 - PROB_CLAMP, 1.0) + 1e-15);
        assert!(l < 1e-6);
    }

    #[test]
    fn half_probabilities_give_three_ln2() {
        let h = out(0.5, vec![]);
        let l = loss_d_source(&h, &h, &h);
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn source_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (r, f, w) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            let l = loss_d_source(&out(r, vec![]), &out(f, vec![]), &out(w, vec![]));
            let o = oracle(r, 1.0) + oracle(f, 0.0) + oracle(w, 0.0);
            assert!((l - o).abs() < 1e-9);
        }
    }

    #[test]
    fn class_loss_cases() {
        let c_real = [1.0, 0.0];
        let c_wrong = [0.0, 1.0];
        let exact = loss_d_class(
            &out(0.0, c_real.to_vec()),
            &out(0.0, c_real.to_vec()),
            &out(0.0, c_wrong.to_vec()),
            &c_real,
            &c_wrong,
        )
        .unwrap();
        assert!(exact < 1e-6);
        let h = out(0.5, vec![0.5, 0.5]);
        let l = loss_d_class(&h, &h, &h, &c_real, &c_wrong).unwrap();
        assert!((l - 6.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn class_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = 4;
            let mut probs = || (0..k).map(|_| rng.random_range(0.01..0.99)).collect::<Vec<f64>>();
            let (r, f, w) = (out(0.5, probs()), out(0.5, probs()), out(0.5, probs()));
            let cr = [0.0, 0.0, 1.0, 0.0];
            let cw = [1.0, 0.0, 0.0, 0.0];
            let mut o = 0.0;
            for i in 0..k {
                o += oracle(r.class_probs[i], cr[i]) + oracle(f.class_probs[i], cr[i]) + oracle(w.class_probs[i], cw[i]);
            }
            assert!((loss_d_class(&r, &f, &w, &cr, &cw).unwrap() - o).abs() < 1e-9);
        }
    }

    #[test]
    fn class_loss_length_mismatch() {
        let h = out(0.5, vec![0.5, 0.5]);
        assert!(loss_d_class(&h, &h, &h, &[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn generator_loss_cases() {
        let (s, c) = loss_g(&out(1.0, vec![1.0, 0.0]), &[1.0, 0.0]).unwrap();
        assert!(s < 1e-6 && c < 1e-6);
        let (s, _) = loss_g(&out(0.5, vec![0.5]), &[1.0]).unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-12);
        let grid: Vec<f64> = (1..100).map(|i| loss_g(&out(i as f64 / 100.0, vec![]), &[]).unwrap().0).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn aux_on_class_head_equals_class_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut probs = || (0..3).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
        let (r, f, w) = (out(0.3, probs()), out(0.6, probs()), out(0.1, probs()));
        let cr = vec![0.0, 1.0, 0.0];
        let cw = vec![0.0, 0.0, 1.0];
        let target = AuxiliaryTarget::new(AuxProbe::ClassHead, cr.clone(), cw.clone(), cr.clone()).unwrap();
        let probe = |o| target.probe.read(o).unwrap();
        let (d_aux, g_aux) = loss_aux(&target, probe(&r), probe(&f), probe(&w)).unwrap();
        let d_class = loss_d_class(&r, &f, &w, &cr, &cw).unwrap();
        assert!((d_aux - d_class).abs() <= 1e-12);
        assert!((g_aux - loss_g(&f, &cr).unwrap().1).abs() <= 1e-12);
    }

    #[test]
    fn aux_matches_oracle_and_vanishes_on_targets() {
        let q_r = vec![0.2, 0.9];
        let q_w = vec![0.7, 0.1];
        let q_f = vec![0.4, 0.4];
        let t = AuxiliaryTarget::new(AuxProbe::AuxHead, q_r.clone(), q_w.clone(), q_f.clone()).unwrap();
        let (r, f, w) = ([0.3, 0.8], [0.5, 0.6], [0.9, 0.2]);
        let (d, g) = loss_aux(&t, &r, &f, &w).unwrap();
        let mut od = 0.0;
        for i in 0..2 {
            od += oracle(r[i], q_r[i]) + oracle(f[i], q_r[i]) + oracle(w[i], q_w[i]);
        }
        let og: f64 = (0..2).map(|i| oracle(f[i], q_f[i])).sum();
        assert!((d - od).abs() < 1e-9);
        assert!((g - og).abs() < 1e-9);

        let binary = AuxiliaryTarget::new(AuxProbe::AuxHead, vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let (d, g) = loss_aux(&binary, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(d < 1e-6 && g < 1e-6);
        assert!(loss_aux(&binary, &[1.0], &[1.0, 0.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn bce_is_finite_and_non_negative(p in -1.0f64..2.0, t in 0.0f64..=1.0) {
            let v = bce(p, t);
            prop_assert!(v.is_finite());
            prop_assert!(v >= -1e-12);
        }

        #[test]
        fn losses_finite_for_any_probe(
            r in 0.0f64..=1.0, f in 0.0f64..=1.0, w in 0.0f64..=1.0,
            cls in proptest::collection::vec(0.0f64..=1.0, 3),
        ) {
            let (ro, fo, wo) = (out(r, cls.clone()), out(f, cls.clone()), out(w, cls.clone()));
            let cr = [1.0, 0.0, 0.0];
            let cw = [0.0, 1.0, 0.0];
            let ds = loss_d_source(&ro, &fo, &wo);
            let dc = loss_d_class(&ro, &fo, &wo, &cr, &cw).unwrap();
            let (gs, gc) = loss_g(&fo, &cr).unwrap();
            for v in [ds, dc, gs, gc] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}
