//! Multi-scale structural similarity on luminance planes.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const STANDARD_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub n_scales: usize,
    pub scale_weights: Vec<f64>,
    pub window: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            n_scales: STANDARD_WEIGHTS.len(),
            scale_weights: STANDARD_WEIGHTS.to_vec(),
            window: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MsSsimConfig {
    /// The first `n` standard weights, renormalized to sum to one.
    pub fn with_scales(n: usize) -> Result<Self> {
        if !(1..=STANDARD_WEIGHTS.len()).contains(&n) {
            return Err(Error::Validation(format!(
                "n_scales must be in 1..={}, got {n}",
                STANDARD_WEIGHTS.len()
            )));
        }
        let total: f64 = STANDARD_WEIGHTS[..n].iter().sum();
        Ok(Self {
            n_scales: n,
            scale_weights: STANDARD_WEIGHTS[..n].iter().map(|w| w / total).collect(),
            ..Self::default()
        })
    }

    /// Largest scale count the window allows for a `side x side` image.
    pub fn max_scales(&self, side: usize) -> usize {
        let mut n = 0;
        while n < 32 && side >= self.window << n {
            n += 1;
        }
        n
    }

    /// Standard configuration with as many scales as `side` allows.
    pub fn for_side(side: usize) -> Result<Self> {
        let n = Self::default().max_scales(side).min(STANDARD_WEIGHTS.len());
        if n == 0 {
            return Err(Error::Validation(format!(
                "images of side {side} are smaller than the {}-pixel window",
                Self::default().window
            )));
        }
        Self::with_scales(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 {
            return Err(Error::Validation("n_scales must be at least 1".into()));
        }
        if self.scale_weights.len() != self.n_scales {
            return Err(Error::Validation(format!(
                "{} scale weights for {} scales",
                self.scale_weights.len(),
                self.n_scales
            )));
        }
        if self.scale_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Validation("scale weights must be positive".into()));
        }
        // The published five-scale weights sum to 1.0001.
        if (self.scale_weights.iter().sum::<f64>() - 1.0).abs() > 1e-3 {
            return Err(Error::Validation("scale weights must sum to 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Validation(format!("window {} must be odd", self.window)));
        }
        if !(self.gaussian_sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::Validation("sigma and stabilizers must be positive".into()));
        }
        Ok(())
    }

    fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let need = self.window << (self.n_scales - 1);
        let side = height.min(width);
        if side < need {
            return Err(Error::Validation(format!(
                "{height}x{width} image is too small for {} scales (needs {need} per side); use n_scales <= {}",
                self.n_scales,
                self.max_scales(side)
            )));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Contrast-structure term per scale (finest first) and the luminance term
/// at the coarsest scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimFactors {
    pub contrast_structure: Vec<f64>,
    pub luminance: f64,
}

impl MsSsimFactors {
    pub fn combine(&self, weights: &[f64]) -> f64 {
        let last = weights.len() - 1;
        let mut v = self.luminance.powf(weights[last]);
        for (cs, w) in self.contrast_structure.iter().zip(weights) {
            v *= cs.powf(*w);
        }
        v
    }
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn gray(img: &Image) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            data: img.to_gray_unit(),
        }
    }

    fn map(&self, f: impl Fn(usize) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: (0..self.data.len()).map(f).collect(),
        }
    }

    /// Separable valid-mode filtering.
    fn filter(&self, k: &[f64]) -> Self {
        let n = k.len();
        let w1 = self.w + 1 - n;
        let mut rows = vec![0.0; self.h * w1];
        for y in 0..self.h {
            let src = &self.data[y * self.w..(y + 1) * self.w];
            for x in 0..w1 {
                rows[y * w1 + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let h1 = self.h + 1 - n;
        let mut out = vec![0.0; h1 * w1];
        for y in 0..h1 {
            for x in 0..w1 {
                out[y * w1 + x] = (0..n).map(|i| k[i] * rows[(y + i) * w1 + x]).sum();
            }
        }
        Self { h: h1, w: w1, data: out }
    }

    fn downsample(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.data[(2 * y + dy) * self.w + 2 * x + dx];
                data[y * w + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
        Self { h, w, data }
    }
}

/// Returns `(mean luminance term, mean contrast-structure term)`.
fn ssim_terms(a: &Plane, b: &Plane, cfg: &MsSsimConfig, kernel: &[f64]) -> (f64, f64) {
    // Planes are in [0, 1], so the dynamic range is 1.
    let c1 = cfg.k1.powi(2);
    let c2 = cfg.k2.powi(2);
    let mu_a = a.filter(kernel);
    let mu_b = b.filter(kernel);
    let aa = a.map(|i| a.data[i] * a.data[i]).filter(kernel);
    let bb = b.map(|i| b.data[i] * b.data[i]).filter(kernel);
    let ab = a.map(|i| a.data[i] * b.data[i]).filter(kernel);
    let n = mu_a.data.len() as f64;
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (lum / n, cs / n)
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape("ms_ssim inputs", (a.height(), a.width()), (b.height(), b.width())));
    }
    Ok(())
}

/// Per-scale factors; negative means are clipped to zero.
pub fn ms_ssim_factors(a: &Image, b: &Image, cfg: &MsSsimConfig) -> Result<MsSsimFactors> {
    cfg.validate()?;
    check_pair(a, b)?;
    cfg.check_size(a.height(), a.width())?;
    let kernel = cfg.kernel();
    let (mut pa, mut pb) = (Plane::gray(a), Plane::gray(b));
    let mut contrast_structure = Vec::with_capacity(cfg.n_scales);
    let mut luminance = 1.0;
    for s in 0..cfg.n_scales {
        let (l, cs) = ssim_terms(&pa, &pb, cfg, &kernel);
        contrast_structure.push(cs.max(0.0));
        if s + 1 == cfg.n_scales {
            luminance = l.max(0.0);
        } else {
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(MsSsimFactors {
        contrast_structure,
        luminance,
    })
}

pub fn ms_ssim(a: &Image, b: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(ms_ssim_factors(a, b, cfg)?.combine(&cfg.scale_weights).clamp(0.0, 1.0))
}

/// One dyadic level of 2x2 mean pooling, per channel.
pub fn downsample(img: &Image) -> Image {
    let (h, w) = (img.height() / 2, img.width() / 2);
    let src = img.data();
    let mut data = vec![0.0; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let at = |dy: usize, dx: usize| src[((2 * y + dy) * img.width() + 2 * x + dx) * CHANNELS + c];
                data[(y * w + x) * CHANNELS + c] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    Image::new(h, w, data).expect("dimensions match")
}
