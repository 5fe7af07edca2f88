//! PSNR and SSIM, plus per-kind evaluation of a model on held-out pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::degrade::{DegradationKind, DegradedPair};
use crate::error::{Error, Result};
use crate::model::RestorationModel;

/// Reported PSNR when the two images are numerically identical.
pub const PSNR_CAP: f64 = 120.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-peak images. Both inputs are
/// clamped to `[0, 1]` first.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    let mse = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-12 {
        Ok(PSNR_CAP)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "ssim",
                reason: format!("expected C×H×W or H×W, got {:?}", img.shape()),
            })
        }
    };
    let plane = h * w;
    let mut gray = vec![0.0; plane];
    for ch in img.values().chunks(plane) {
        for (g, v) in gray.iter_mut().zip(ch) {
            *g += v.clamp(0.0, 1.0);
        }
    }
    gray.iter_mut().for_each(|g| *g /= c as f64);
    Ok((gray, h, w))
}

/// Mean structural similarity over all 11×11 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, unit dynamic range) of the channel-mean
/// grayscale images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (ga, h, w) = grayscale(a)?;
    let (gb, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            reason: format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();

    let mu_a = filter_valid(&ga, h, w, &k);
    let mu_b = filter_valid(&gb, h, w, &k);
    let e_aa = filter_valid(&sq(&ga), h, w, &k);
    let e_bb = filter_valid(&sq(&gb), h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);

    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub kind: DegradationKind,
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

/// Mean PSNR/SSIM per degradation kind at one stage of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stage: String,
    pub kinds: Vec<KindMetrics>,
}

impl MetricReport {
    pub fn get(&self, kind: DegradationKind) -> Option<&KindMetrics> {
        self.kinds.iter().find(|k| k.kind == kind)
    }

    /// PSNR for `kind`, NaN if the kind was not evaluated.
    pub fn psnr(&self, kind: DegradationKind) -> f64 {
        self.get(kind).map_or(f64::NAN, |k| k.psnr)
    }

    pub fn ssim(&self, kind: DegradationKind) -> f64 {
        self.get(kind).map_or(f64::NAN, |k| k.ssim)
    }

    pub fn with_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = stage.into();
        self
    }
}

fn group_by_kind(heldout: &[DegradedPair]) -> Vec<(DegradationKind, Vec<&DegradedPair>)> {
    DegradationKind::ALL
        .iter()
        .map(|&k| (k, heldout.iter().filter(|p| p.kind == k).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

fn summarize<'a>(
    stage: &str,
    heldout: &'a [DegradedPair],
    mut restore: impl FnMut(&[&'a DegradedPair]) -> Result<Vec<Tensor>>,
) -> Result<MetricReport> {
    if heldout.is_empty() {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let mut kinds = Vec::new();
    for (kind, pairs) in group_by_kind(heldout) {
        let outputs = restore(&pairs)?;
        let (mut p, mut s) = (0.0, 0.0);
        for (out, pair) in outputs.iter().zip(&pairs) {
            p += psnr(out, &pair.clean)?;
            s += ssim(out, &pair.clean)?;
        }
        let n = pairs.len();
        kinds.push(KindMetrics {
            kind,
            psnr: p / n as f64,
            ssim: s / n as f64,
            count: n,
        });
    }
    Ok(MetricReport {
        stage: stage.to_string(),
        kinds,
    })
}

/// Per-kind mean PSNR/SSIM of `model`'s clamped outputs.
pub fn evaluate(model: &RestorationModel, heldout: &[DegradedPair], stage: &str) -> Result<MetricReport> {
    summarize(stage, heldout, |pairs| {
        let mut outs = Vec::with_capacity(pairs.len());
        // images of different sizes cannot share a batch
        for chunk in pairs.chunk_by(|a, b| a.degraded.shape() == b.degraded.shape()) {
            let inputs: Vec<&Tensor> = chunk.iter().map(|p| &p.degraded).collect();
            let batch = Tensor::stack(&inputs)?;
            outs.extend(model.restore_batch(&batch)?.unstack());
        }
        Ok(outs)
    })
}

/// Metrics of the degraded inputs themselves, i.e. of the identity model.
pub fn degraded_baseline(heldout: &[DegradedPair], stage: &str) -> Result<MetricReport> {
    summarize(stage, heldout, |pairs| {
        Ok(pairs.iter().map(|p| p.degraded.clone()).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::make_clean_corpus;

    fn full(v: f64) -> Tensor {
        Tensor::full(&[3, 16, 16], v).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        assert_eq!(psnr(&full(0.3), &full(0.3)).unwrap(), PSNR_CAP);
        let p = psnr(&full(0.5), &full(0.4)).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
        assert!(psnr(&full(0.5), &Tensor::zeros(&[3, 8, 8]).unwrap()).is_err());
    }

    #[test]
    fn psnr_clamps_inputs() {
        assert_eq!(psnr(&full(1.7), &full(1.0)).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_decreases_with_offset() {
        let mut last = f64::INFINITY;
        for step in 1..10 {
            let p = psnr(&full(0.5), &full(0.5 - 0.05 * step as f64)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let img = &make_clean_corpus(1, 32, 32, 4).unwrap()[0];
        assert!((ssim(img, img).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constants() {
        // zero variances leave only the luminance term:
        // (2·0.5·0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4)
        let s = ssim(&full(0.5), &full(0.25)).unwrap();
        assert!((s - 0.800_063_979_526_551_5).abs() < 1e-6, "{s}");
    }

    #[test]
    fn ssim_requires_window_sized_images() {
        let small = Tensor::zeros(&[3, 10, 12]).unwrap();
        assert!(ssim(&small, &small).is_err());
    }
}
