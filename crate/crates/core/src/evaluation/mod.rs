//! Diversity (within-class MS-SSIM) and discriminability (score over class
//! posteriors) of image sets.

mod msssim;
mod probe;
mod score;

pub use msssim::{downsample, ms_ssim, ms_ssim_factors, MsSsimConfig, MsSsimFactors, STANDARD_WEIGHTS};
pub use probe::{argmax, split_dataset, train_probe_classifier, ProbeClassifier, ProbeTraining, HELD_OUT_FRACTION};
pub use score::{discriminability_score, DEFAULT_SPLITS};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use serde_json::json;

use crate::dataset::{derived_rng, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::Model;
use crate::text_encoder::EncoderBackend;
use crate::training::noise_vector;

pub const DEFAULT_PAIRS_PER_CLASS: usize = 200;

const PAIR_DOMAIN: u64 = 32;
const CAPTION_DOMAIN: u64 = 33;
const NOISE_DOMAIN_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDiversity {
    pub class_id: usize,
    pub mean_msssim: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diversity {
    pub classes: Vec<ClassDiversity>,
    /// Classes with fewer than two images.
    pub omitted: Vec<usize>,
    pub overall_mean: f64,
    /// Population standard deviation across classes.
    pub overall_std: f64,
}

fn decode_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Mean MS-SSIM over up to `pairs_per_class` within-class pairs, drawn
/// uniformly without replacement (all pairs when there are fewer).
pub fn per_class_diversity(
    samples: &[(&Image, usize)],
    cfg: &MsSsimConfig,
    pairs_per_class: usize,
    seed: u64,
) -> Result<Diversity> {
    if samples.is_empty() {
        return Err(Error::Validation("no images to compare".into()));
    }
    if pairs_per_class == 0 {
        return Err(Error::Validation("pairs_per_class must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&Image>> = BTreeMap::new();
    for (img, c) in samples {
        by_class.entry(*c).or_default().push(img);
    }
    let mut classes = Vec::new();
    let mut omitted = Vec::new();
    for (&c, imgs) in &by_class {
        let n = imgs.len();
        if n < 2 {
            omitted.push(c);
            continue;
        }
        let total = n * (n - 1) / 2;
        let picks: Vec<usize> = if total <= pairs_per_class {
            (0..total).collect()
        } else {
            let mut rng = derived_rng(seed, PAIR_DOMAIN, c as u64);
            let mut v = index::sample(&mut rng, total, pairs_per_class).into_vec();
            v.sort_unstable();
            v
        };
        let mut sum = 0.0;
        for &k in &picks {
            let (i, j) = decode_pair(k, n);
            sum += ms_ssim(imgs[i], imgs[j], cfg)?;
        }
        classes.push(ClassDiversity {
            class_id: c,
            mean_msssim: sum / picks.len() as f64,
            n_pairs: picks.len(),
        });
    }
    if classes.is_empty() {
        return Err(Error::Validation("no class has two or more images".into()));
    }
    let means: Vec<f64> = classes.iter().map(|c| c.mean_msssim).collect();
    let overall_mean = means.iter().sum::<f64>() / means.len() as f64;
    let overall_std = (means.iter().map(|m| (m - overall_mean).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
    Ok(Diversity {
        classes,
        omitted,
        overall_mean,
        overall_std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub image: Image,
    pub class_id: usize,
    pub caption: String,
}

/// `per_class` images for every class, each conditioned on a caption drawn
/// from that class's training captions. Noise vector `j` of class `c` is
/// `noise_vector(seed, c * per_class + j)` (offset into its own stream).
pub fn generate_per_class(
    model: &Model,
    dataset: &Dataset,
    encoder: &EncoderBackend,
    per_class: usize,
    seed: u64,
) -> Result<Vec<GeneratedSample>> {
    let mut out = Vec::with_capacity(per_class * dataset.n_classes());
    for c in 0..dataset.n_classes() {
        let captions: Vec<&str> = dataset
            .class_indices(c)
            .into_iter()
            .flat_map(|i| dataset.instances()[i].captions.iter().map(String::as_str))
            .collect();
        if captions.is_empty() {
            continue;
        }
        let mut rng = derived_rng(seed, CAPTION_DOMAIN, c as u64);
        for j in 0..per_class {
            let caption = captions[rng.random_range(0..captions.len())];
            let emb = encoder.embed(caption)?;
            let z = noise_vector(seed, NOISE_DOMAIN_BASE + (c * per_class + j) as u64, model.config.noise_dim);
            out.push(GeneratedSample {
                image: model.generate(&emb, &z)?,
                class_id: c,
                caption: caption.to_string(),
            });
        }
    }
    Ok(out)
}

/// Per-class diversity plus the score, with a config echo.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub diversity: Diversity,
    pub score_mean: f64,
    pub score_std: f64,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

pub const REPORT_HEADER: &str = "class_id\tmean_msssim\tn_pairs";

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for c in &self.diversity.classes {
            writeln!(out, "{}\t{}\t{}", c.class_id, c.mean_msssim, c.n_pairs).expect("string write");
        }
        out
    }

    pub fn summary_value(&self) -> serde_json::Value {
        json!({
            "overall_mean": self.diversity.overall_mean,
            "overall_std": self.diversity.overall_std,
            "score_mean": self.score_mean,
            "score_std": self.score_std,
            "seed": self.seed,
            "omitted_classes": self.diversity.omitted,
            "config": self.config,
        })
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary_value()).expect("serializable") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_decoding_enumerates_all_pairs() {
        let n = 7;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| decode_pair(k, n)).collect();
        let mut expect = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expect.push((i, j));
            }
        }
        assert_eq!(pairs, expect);
    }

    fn img(seed: u64) -> Image {
        let mut rng = derived_rng(seed, 0, 0);
        Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_copies_have_unit_mean() {
        let cfg = MsSsimConfig::for_side(32).unwrap();
        let x = img(1);
        let samples: Vec<(&Image, usize)> = (0..4).map(|_| (&x, 0)).collect();
        let d = per_class_diversity(&samples, &cfg, 200, 0).unwrap();
        assert!((d.classes[0].mean_msssim - 1.0).abs() < 1e-9);
        assert_eq!(d.classes[0].n_pairs, 6);
    }

    #[test]
    fn sampling_caps_pairs_and_omits_singletons() {
        let cfg = MsSsimConfig::for_side(32).unwrap();
        let imgs: Vec<Image> = (0..12).map(img).collect();
        let mut samples: Vec<(&Image, usize)> = imgs[..11].iter().map(|i| (i, 0)).collect();
        samples.push((&imgs[11], 1));
        let d = per_class_diversity(&samples, &cfg, 20, 3).unwrap();
        assert_eq!(d.classes.len(), 1);
        assert_eq!(d.classes[0].n_pairs, 20);
        assert_eq!(d.omitted, vec![1]);
        assert_eq!(d, per_class_diversity(&samples, &cfg, 20, 3).unwrap());
        assert!(per_class_diversity(&[], &cfg, 20, 3).is_err());
    }

    #[test]
    fn report_formats() {
        let report = EvalReport {
            diversity: Diversity {
                classes: vec![ClassDiversity {
                    class_id: 0,
                    mean_msssim: 0.25,
                    n_pairs: 3,
                }],
                omitted: vec![],
                overall_mean: 0.25,
                overall_std: 0.0,
            },
            score_mean: 1.5,
            score_std: 0.1,
            seed: 7,
            config: [("n_pairs".to_string(), "200".to_string())].into(),
        };
        assert_eq!(report.to_tsv(), "class_id\tmean_msssim\tn_pairs\n0\t0.25\t3\n");
        let v: serde_json::Value = serde_json::from_str(&report.summary_json()).unwrap();
        for key in ["overall_mean", "overall_std", "score_mean", "score_std", "seed", "config"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["seed"], 7);
    }
}
