//! Synthetic clean images and the three degradation families (noise, haze,
//! rain) the all-in-one model learns to invert.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Haze,
    Rain,
    Noise,
}

impl DegradationKind {
    /// Column order used in every report table.
    pub const ALL: [DegradationKind; 3] = [Self::Haze, Self::Rain, Self::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Self::Haze => "haze",
            Self::Rain => "rain",
            Self::Noise => "noise",
        }
    }

    /// Restoration task name used as a table heading.
    pub fn task(self) -> &'static str {
        match self {
            Self::Haze => "Dehazing",
            Self::Rain => "Deraining",
            Self::Noise => "Denoising",
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Self::Haze => 1,
            Self::Rain => 2,
            Self::Noise => 3,
        }
    }

    pub(crate) fn from_code(code: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haze" | "dehaze" | "dehazing" => Ok(Self::Haze),
            "rain" | "derain" | "deraining" => Ok(Self::Rain),
            "noise" | "denoise" | "denoising" => Ok(Self::Noise),
            other => Err(Error::Config(format!(
                "unknown degradation kind `{other}` (expected haze, rain or noise)"
            ))),
        }
    }
}

/// Parameters of one degradation. Only the fields belonging to `kind` are
/// read; the rest are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub noise_sigma: Option<f64>,
    pub haze_beta: Option<f64>,
    pub airlight: Option<f64>,
    pub rain_density: Option<f64>,
    pub streak_length: Option<usize>,
    pub seed: u64,
}

impl DegradationSpec {
    fn empty(kind: DegradationKind, seed: u64) -> Self {
        Self {
            kind,
            noise_sigma: None,
            haze_beta: None,
            airlight: None,
            rain_density: None,
            streak_length: None,
            seed,
        }
    }

    /// Gaussian noise with standard deviation `sigma` in `[0, 1]` units.
    pub fn noise(sigma: f64, seed: u64) -> Self {
        Self {
            noise_sigma: Some(sigma),
            ..Self::empty(DegradationKind::Noise, seed)
        }
    }

    pub fn haze(beta: f64, airlight: f64, seed: u64) -> Self {
        Self {
            haze_beta: Some(beta),
            airlight: Some(airlight),
            ..Self::empty(DegradationKind::Haze, seed)
        }
    }

    pub fn rain(density: f64, streak_length: usize, seed: u64) -> Self {
        Self {
            rain_density: Some(density),
            streak_length: Some(streak_length),
            ..Self::empty(DegradationKind::Rain, seed)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |name: &str| {
            Error::Config(format!("{} degradation requires `{name}`", self.kind))
        };
        match self.kind {
            DegradationKind::Noise => {
                let sigma = self.noise_sigma.ok_or_else(|| missing("noise_sigma"))?;
                if !(0.0..1.0).contains(&sigma) {
                    return Err(Error::Config(format!("noise_sigma must lie in [0, 1), got {sigma}")));
                }
            }
            DegradationKind::Haze => {
                let beta = self.haze_beta.ok_or_else(|| missing("haze_beta"))?;
                let a = self.airlight.ok_or_else(|| missing("airlight"))?;
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Config(format!("haze_beta must be positive, got {beta}")));
                }
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Config(format!("airlight must lie in [0, 1], got {a}")));
                }
            }
            DegradationKind::Rain => {
                let d = self.rain_density.ok_or_else(|| missing("rain_density"))?;
                let len = self.streak_length.ok_or_else(|| missing("streak_length"))?;
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::Config(format!("rain_density must lie in [0, 1], got {d}")));
                }
                if len == 0 {
                    return Err(Error::Config("streak_length must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// A degraded image with its clean counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub kind: DegradationKind,
    pub index: usize,
}

fn image_dims(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *img.shape() {
        [CHANNELS, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected a {CHANNELS}xHxW image, got {:?}", img.shape()),
        }),
    }
}

fn check_unit(img: &Tensor, op: &'static str) -> Result<()> {
    if img.in_unit_range() {
        Ok(())
    } else {
        Err(Error::OutOfRange(op))
    }
}

/// Procedurally generated clean images: a two-colour gradient, low
/// frequency sinusoidal texture and a handful of flat rectangles and
/// ellipses. Image `i` depends only on `(seed, i)`.
pub fn make_clean_corpus(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(Error::InvalidArgument("corpus count must be at least 1".into()));
    }
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    (0..count)
        .map(|i| clean_image(height, width, derive_seed(seed, &[0xC1EA, i as u64])))
        .collect()
}

fn clean_image(h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from(seed, &[]);
    let plane = h * w;
    let mut px = vec![0.0; CHANNELS * plane];

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fx: rng.random_range(-3.0..3.0),
            fy: rng.random_range(-3.0..3.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: std::array::from_fn(|_| rng.random_range(0.02..0.1)),
        })
        .collect();

    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                let mut val = c0[c] + (c1[c] - c0[c]) * t;
                for wv in &waves {
                    let arg = std::f64::consts::TAU * (wv.fx * u + wv.fy * v) + wv.phase;
                    val += wv.amp[c] * arg.sin();
                }
                px[c * plane + y * w + x] = val;
            }
        }
    }

    let shapes = rng.random_range(3..=7);
    for _ in 0..shapes {
        let ellipse = rng.random_bool(0.5);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.08..0.35) * w as f64;
        let ry = rng.random_range(0.08..0.35) * h as f64;
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.6..1.0);
        for y in 0..h {
            for x in 0..w {
                let (ox, oy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if ellipse {
                    ox * ox + oy * oy <= 1.0
                } else {
                    ox.abs() <= 1.0 && oy.abs() <= 1.0
                };
                if inside {
                    for c in 0..CHANNELS {
                        let p = &mut px[c * plane + y * w + x];
                        *p = (1.0 - alpha) * *p + alpha * color[c];
                    }
                }
            }
        }
    }

    px.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Tensor::new(&[CHANNELS, h, w], px)
}

/// Applies `spec` to `clean`. The result is a pure function of both
/// arguments.
pub fn apply_degradation(clean: &Tensor, spec: &DegradationSpec) -> Result<DegradedPair> {
    let (h, w) = image_dims(clean, "apply_degradation")?;
    check_unit(clean, "apply_degradation")?;
    spec.validate()?;
    let degraded = match spec.kind {
        DegradationKind::Noise => add_noise(clean, spec.noise_sigma.unwrap_or_default(), spec.seed)?,
        DegradationKind::Haze => {
            let beta = spec.haze_beta.unwrap_or_default();
            let transmission: Vec<f64> = depth_ramp(h, w).iter().map(|d| (-beta * d).exp()).collect();
            haze_with_transmission(clean, &transmission, spec.airlight.unwrap_or_default())?
        }
        DegradationKind::Rain => add_rain(
            clean,
            spec.rain_density.unwrap_or_default(),
            spec.streak_length.unwrap_or(1),
            spec.seed,
        )?,
    };
    Ok(DegradedPair {
        degraded,
        clean: clean.clone(),
        kind: spec.kind,
        index: 0,
    })
}

fn add_noise(clean: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from(seed, &[DegradationKind::Noise.code()]);
    let values = clean
        .values()
        .iter()
        .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(clean.shape(), values)
}

/// Per-pixel scene depth in `[0, 1]`, increasing along the main diagonal.
pub fn depth_ramp(h: usize, w: usize) -> Vec<f64> {
    let (sy, sx) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    (0..h)
        .flat_map(|y| (0..w).map(move |x| 0.5 * (x as f64 / sx + y as f64 / sy)))
        .collect()
}

/// Atmospheric scattering model `I = J·t + A·(1 − t)` with a per-pixel
/// transmission map shared by all channels.
pub fn haze_with_transmission(clean: &Tensor, transmission: &[f64], airlight: f64) -> Result<Tensor> {
    let (h, w) = image_dims(clean, "haze")?;
    if transmission.len() != h * w {
        return Err(Error::InvalidShape {
            op: "haze",
            reason: format!("transmission map has {} entries for a {h}x{w} image", transmission.len()),
        });
    }
    let values = clean
        .values()
        .chunks(h * w)
        .flat_map(|plane| {
            plane
                .iter()
                .zip(transmission)
                .map(|(j, t)| (j * t + airlight * (1.0 - t)).clamp(0.0, 1.0))
        })
        .collect();
    Tensor::new(clean.shape(), values)
}

fn add_rain(clean: &Tensor, density: f64, length: usize, seed: u64) -> Result<Tensor> {
    let (h, w) = image_dims(clean, "rain")?;
    let mut rng = rng_from(seed, &[DegradationKind::Rain.code()]);
    let mut mask = vec![0.0_f64; h * w];
    let streaks = (density * (h * w) as f64 / length as f64).round() as usize;
    // one dominant fall direction per image, small per-streak jitter
    let angle: f64 = rng.random_range(-0.35..0.35);
    for _ in 0..streaks {
        let a = angle + rng.random_range(-0.05..0.05);
        let (sx, sy) = (a.sin(), a.cos());
        let x0 = rng.random_range(-2.0..w as f64 + 2.0);
        let y0 = rng.random_range(-(length as f64)..h as f64);
        let brightness = rng.random_range(0.2..=0.6);
        for s in 0..length {
            let x = (x0 + s as f64 * sx).round();
            let y = (y0 + s as f64 * sy).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let m = &mut mask[y as usize * w + x as usize];
                *m = m.max(brightness);
            }
        }
    }
    let values = clean
        .values()
        .chunks(h * w)
        .flat_map(|plane| plane.iter().zip(&mask).map(|(v, m)| (v + m).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(clean.shape(), values)
}

/// `clamp(clean + p, 0, 1)` with `p ~ U(−0.5, 0.5)` drawn independently
/// per element from `seed`.
pub fn make_adversarial_target(clean: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from(seed, &[0xAD5]);
    let perturbation: Vec<f64> = (0..clean.len())
        .map(|_| rng.random_range(-0.5..=0.5))
        .collect();
    adversarial_from_perturbation(clean, &perturbation)
}

/// Adversarial target for an explicit perturbation tensor.
pub fn adversarial_from_perturbation(clean: &Tensor, perturbation: &[f64]) -> Result<Tensor> {
    check_unit(clean, "make_adversarial_target")?;
    if perturbation.len() != clean.len() {
        return Err(Error::ShapeMismatch {
            op: "make_adversarial_target",
            left: clean.shape().to_vec(),
            right: vec![perturbation.len()],
        });
    }
    let values = clean
        .values()
        .iter()
        .zip(perturbation)
        .map(|(y, p)| (y + p).clamp(0.0, 1.0))
        .collect();
    Tensor::new(clean.shape(), values)
}

/// Degradation parameters for all three kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    pub noise_sigma: f64,
    pub haze_beta: f64,
    pub airlight: f64,
    pub rain_density: f64,
    pub streak_length: usize,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            noise_sigma: 25.0 / 255.0,
            haze_beta: 1.2,
            airlight: 0.85,
            rain_density: 0.1,
            streak_length: 9,
        }
    }
}

impl DegradationParams {
    pub fn spec(&self, kind: DegradationKind, seed: u64) -> DegradationSpec {
        match kind {
            DegradationKind::Noise => DegradationSpec::noise(self.noise_sigma, seed),
            DegradationKind::Haze => DegradationSpec::haze(self.haze_beta, self.airlight, seed),
            DegradationKind::Rain => DegradationSpec::rain(self.rain_density, self.streak_length, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Pairs generated per degradation kind.
    pub per_kind: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            per_kind: 300,
            height: 48,
            width: 48,
            seed: 1,
        }
    }
}

/// The full degraded corpus: `per_kind` pairs of each kind, laid out in
/// [`DegradationKind::ALL`] order, every pair with its own clean image.
pub fn build_corpus(cfg: &CorpusConfig, params: &DegradationParams) -> Result<Vec<DegradedPair>> {
    if cfg.per_kind == 0 {
        return Err(Error::Config("corpus.per_kind must be at least 1".into()));
    }
    let total = cfg.per_kind * DegradationKind::ALL.len();
    let cleans = make_clean_corpus(total, cfg.height, cfg.width, cfg.seed)?;
    cleans
        .iter()
        .enumerate()
        .map(|(index, clean)| {
            let kind = DegradationKind::ALL[index / cfg.per_kind];
            let spec = params.spec(kind, derive_seed(cfg.seed, &[kind.code(), index as u64]));
            let mut pair = apply_degradation(clean, &spec)?;
            pair.index = index;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, v: f64) -> Tensor {
        Tensor::full(&[CHANNELS, h, w], v).unwrap()
    }

    fn std_dev(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let a = make_clean_corpus(2, 32, 32, 7).unwrap();
        let b = make_clean_corpus(2, 32, 32, 7).unwrap();
        assert_eq!(a, b);
        for img in &a {
            assert!(img.min() >= 0.0 && img.max() <= 1.0);
        }
        assert_ne!(a, make_clean_corpus(2, 32, 32, 8).unwrap());
    }

    #[test]
    fn corpus_rejects_small_sizes() {
        assert!(make_clean_corpus(1, 15, 32, 0).is_err());
        assert!(make_clean_corpus(0, 32, 32, 0).is_err());
    }

    #[test]
    fn corpus_images_are_not_flat() {
        let imgs = make_clean_corpus(100, 32, 32, 1).unwrap();
        let textured = imgs.iter().filter(|i| std_dev(i.values()) > 0.02).count();
        assert!(textured >= 95, "only {textured} of 100 images have std > 0.02");
    }

    #[test]
    fn uniform_haze_blends_with_airlight() {
        let clean = constant(4, 4, 1.0);
        let hazy = haze_with_transmission(&clean, &[0.5; 16], 0.8).unwrap();
        for v in hazy.values() {
            assert!((v - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let clean = &make_clean_corpus(1, 16, 16, 3).unwrap()[0];
        let pair = apply_degradation(clean, &DegradationSpec::noise(0.0, 5)).unwrap();
        assert_eq!(&pair.degraded, clean);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let sigma = 25.0 / 255.0;
        let clean = constant(64, 64, 0.5);
        let pair = apply_degradation(&clean, &DegradationSpec::noise(sigma, 11)).unwrap();
        let diff: Vec<f64> = pair
            .degraded
            .values()
            .iter()
            .zip(clean.values())
            .map(|(a, b)| a - b)
            .collect();
        let s = std_dev(&diff);
        assert!((s - sigma).abs() < 0.15 * sigma, "std {s} vs sigma {sigma}");
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let clean = constant(16, 16, 0.5);
        let mut spec = DegradationSpec::haze(1.0, 0.8, 0);
        spec.airlight = None;
        assert!(matches!(apply_degradation(&clean, &spec), Err(Error::Config(_))));
        let mut spec = DegradationSpec::rain(0.1, 5, 0);
        spec.streak_length = None;
        assert!(apply_degradation(&clean, &spec).is_err());
    }

    #[test]
    fn foreign_parameters_are_ignored() {
        let clean = &make_clean_corpus(1, 16, 16, 9).unwrap()[0];
        let plain = DegradationSpec::noise(0.1, 4);
        let mut noisy_extra = plain;
        noisy_extra.haze_beta = Some(-3.0);
        noisy_extra.streak_length = Some(0);
        assert_eq!(
            apply_degradation(clean, &plain).unwrap(),
            apply_degradation(clean, &noisy_extra).unwrap()
        );
    }

    #[test]
    fn every_kind_stays_in_unit_range_and_is_deterministic() {
        let params = DegradationParams::default();
        for (i, clean) in make_clean_corpus(6, 24, 20, 2).unwrap().iter().enumerate() {
            for kind in DegradationKind::ALL {
                let spec = params.spec(kind, i as u64);
                let a = apply_degradation(clean, &spec).unwrap();
                let b = apply_degradation(clean, &spec).unwrap();
                assert!(a.degraded.in_unit_range());
                assert_eq!(a.degraded.values(), b.degraded.values());
                assert_ne!(a.degraded.values(), clean.values(), "{kind} left image unchanged");
            }
        }
    }

    #[test]
    fn adversarial_target_bounds() {
        let zero = constant(16, 16, 0.0);
        let y = make_adversarial_target(&zero, 1).unwrap();
        assert!(y.values().iter().all(|v| (0.0..=0.5).contains(v)));
        let one = constant(16, 16, 1.0);
        let y = make_adversarial_target(&one, 1).unwrap();
        assert!(y.values().iter().all(|v| (0.5..=1.0).contains(v)));
    }

    #[test]
    fn adversarial_target_distribution_at_midgray() {
        // 3 × 58 × 58 = 10092 elements
        let clean = constant(58, 58, 0.5);
        let y = make_adversarial_target(&clean, 42).unwrap();
        let diffs: Vec<f64> = y.values().iter().map(|v| v - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        let far = diffs.iter().filter(|d| d.abs() > 0.3).count();
        assert!(far * 10 >= diffs.len());
    }

    #[test]
    fn adversarial_targets_are_fresh_per_seed() {
        let mid = constant(32, 32, 0.5);
        let a = make_adversarial_target(&mid, 1).unwrap();
        let b = make_adversarial_target(&mid, 2).unwrap();
        let differ = a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count();
        assert!(differ * 100 > a.len() * 99);

        // on a real image, draws can only coincide where both were clipped
        let clean = &make_clean_corpus(1, 32, 32, 0).unwrap()[0];
        let a = make_adversarial_target(clean, 1).unwrap();
        let b = make_adversarial_target(clean, 2).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            if x == y {
                assert!(*x == 0.0 || *x == 1.0);
            }
        }
    }

    #[test]
    fn corpus_layout() {
        let cfg = CorpusConfig {
            per_kind: 4,
            height: 16,
            width: 16,
            seed: 3,
        };
        let pairs = build_corpus(&cfg, &DegradationParams::default()).unwrap();
        assert_eq!(pairs.len(), 12);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.index, i);
            assert_eq!(p.kind, DegradationKind::ALL[i / 4]);
            assert_eq!(p.degraded.shape(), p.clean.shape());
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("Haze".parse::<DegradationKind>().unwrap(), DegradationKind::Haze);
        assert_eq!("denoise".parse::<DegradationKind>().unwrap(), DegradationKind::Noise);
        assert!("blur".parse::<DegradationKind>().is_err());
    }
}
