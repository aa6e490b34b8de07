//! Test-set metrics on shared evaluation masks, imputation grids and
//! parameter images.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conditional::{conditional_mixture, mixture_imputation, Imputation};
use crate::dmfa::{head_loss, DmfaNetwork, LossMode};
use crate::error::{Error, Result};
use crate::lowrank::FactorGaussian;
use crate::masking::{apply_mask, random_patch_mask, sample_rng, Mask, MaskedSample, EVAL_STREAM};
use crate::mfa::MfaModel;
use crate::tensorio::{self, Dataset, ImageShape};

/// Tag stored with every [`Metrics`]: pixel values are scored in `[0, 1]`.
pub const PIXEL_SCALE: &str = "[0,1]";
const EVAL_BATCH: usize = 64;
/// Gray level used for missing pixels in the masked column of a grid.
const MASK_GRAY: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: String,
    /// Conditional NLL of the missing pixels, nats per image.
    pub mean_nll: f64,
    /// Squared error summed over the missing pixels, averaged over images.
    pub mean_mse: f64,
    pub count: usize,
    pub pixel_scale: String,
    pub mask_seed: u64,
    pub patch: (usize, usize),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imputation: Option<Imputation>,
    /// Average largest conditional mixture weight (MFA only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_max_weight: Option<f64>,
}

/// The evaluation mask of test image `index`.
pub fn eval_mask(shape: ImageShape, patch: (usize, usize), mask_seed: u64, index: usize) -> Result<Mask> {
    random_patch_mask(shape, patch.0, patch.1, &mut sample_rng(mask_seed, EVAL_STREAM, index as u64))
}

/// Every test image with its evaluation mask applied.
pub fn eval_samples(test: &Dataset, patch: (usize, usize), mask_seed: u64) -> Result<Vec<MaskedSample>> {
    (0..test.count())
        .map(|i| apply_mask(test.sample(i), &eval_mask(test.shape(), patch, mask_seed, i)?))
        .collect()
}

fn check_test(test: &Dataset, shape: ImageShape) -> Result<()> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    if test.shape() != shape {
        return Err(Error::Shape(format!(
            "model expects {shape:?}, test data has {:?}",
            test.shape()
        )));
    }
    Ok(())
}

/// Per-image `(nll, squared error)` of the network on `samples`, computed in
/// f64 from the f32 network outputs.
pub fn dmfa_scores(net: &DmfaNetwork, samples: &[MaskedSample]) -> Result<Vec<(f64, f64)>> {
    let (n, l) = (net.shape().len(), net.latent());
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&MaskedSample> = chunk.iter().collect();
        for (out, s) in net.outputs(&refs)?.iter().zip(chunk) {
            let out: Vec<f64> = out.iter().map(|&v| v as f64).collect();
            let x_m: Vec<f64> = s.missing_values().iter().map(|&v| v as f64).collect();
            let h = head_loss(&out, n, l, &s.missing_indices(), &x_m, LossMode::Nll, 0.0, false)?;
            scores.push((h.nll, h.sq_err));
        }
    }
    Ok(scores)
}

pub fn evaluate_dmfa(net: &DmfaNetwork, test: &Dataset, patch: (usize, usize), mask_seed: u64) -> Result<Metrics> {
    check_test(test, net.shape())?;
    let samples = eval_samples(test, patch, mask_seed)?;
    let scores = dmfa_scores(net, &samples)?;
    let count = scores.len();
    let (nll, mse) = scores.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
    Ok(Metrics {
        model: "dmfa".into(),
        mean_nll: nll / count as f64,
        mean_mse: mse / count as f64,
        count,
        pixel_scale: PIXEL_SCALE.into(),
        mask_seed,
        patch,
        imputation: None,
        mean_max_weight: None,
    })
}

/// Conditional mixture of one masked sample, in f64.
fn mfa_condition(mix: &MfaModel<f64>, s: &MaskedSample) -> Result<MfaModel<f64>> {
    let split = s.mask.split_index();
    let x: Vec<f64> = s.ground_truth.iter().map(|&v| v as f64).collect();
    conditional_mixture(mix, &split.gather_observed(&x), &split)
}

pub fn evaluate_mfa(
    mix: &MfaModel<f32>,
    test: &Dataset,
    patch: (usize, usize),
    mask_seed: u64,
    mode: Imputation,
) -> Result<Metrics> {
    check_test(test, test.shape())?;
    if mix.dim() != test.shape().len() {
        return Err(Error::Shape(format!(
            "model dimension {} does not match test data dimension {}",
            mix.dim(),
            test.shape().len()
        )));
    }
    let mix64 = mix.cast::<f64>();
    let samples = eval_samples(test, patch, mask_seed)?;
    let per: Vec<(f64, f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let cond = mfa_condition(&mix64, s)?;
            let x_m: Vec<f64> = s.missing_values().iter().map(|&v| v as f64).collect();
            let nll = -cond.log_density(&x_m)?;
            let imp = mixture_imputation(&cond, mode);
            let sq: f64 = imp.iter().zip(&x_m).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((nll, sq, cond.max_weight()))
        })
        .collect::<Result<_>>()?;
    let count = per.len() as f64;
    let (nll, mse, w) = per
        .iter()
        .fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    Ok(Metrics {
        model: "mfa".into(),
        mean_nll: nll / count,
        mean_mse: mse / count,
        count: per.len(),
        pixel_scale: PIXEL_SCALE.into(),
        mask_seed,
        patch,
        imputation: Some(mode),
        mean_max_weight: Some(w / count),
    })
}

/// `sample` with its missing pixels replaced by `fill` (indexed over the
/// missing coordinates in increasing order).
fn fill_missing(sample: &MaskedSample, fill: impl Iterator<Item = f32>) -> Vec<f32> {
    let mut out = sample.ground_truth.clone();
    for (i, v) in sample.missing_indices().into_iter().zip(fill) {
        out[i] = v;
    }
    out
}

/// Full images with the missing pixels replaced by the network mean.
pub fn dmfa_imputations(net: &DmfaNetwork, samples: &[MaskedSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&MaskedSample> = chunk.iter().collect();
        for (raw, s) in net.outputs(&refs)?.iter().zip(chunk) {
            out.push(fill_missing(s, s.missing_indices().into_iter().map(|i| raw[i])));
        }
    }
    Ok(out)
}

/// Full images with the missing pixels replaced by the MFA conditional
/// imputation.
pub fn mfa_imputations(mix: &MfaModel<f32>, samples: &[MaskedSample], mode: Imputation) -> Result<Vec<Vec<f32>>> {
    let mix64 = mix.cast::<f64>();
    samples
        .par_iter()
        .map(|s| {
            let cond = mfa_condition(&mix64, s)?;
            let imp = mixture_imputation(&cond, mode);
            Ok(fill_missing(s, imp.into_iter().map(|v| v as f32)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    /// Pixel size of the whole grid image.
    pub height: usize,
    pub width: usize,
}

/// One row per sample: original, masked (missing pixels gray), then one
/// imputation per model. `imputations[j][i]` is model `j`'s full image for
/// sample `i`.
pub fn export_imputation_grid(
    path: impl AsRef<Path>,
    samples: &[MaskedSample],
    imputations: &[Vec<Vec<f32>>],
) -> Result<GridLayout> {
    let Some(first) = samples.first() else {
        return Err(Error::Config("imputation grid needs at least one sample".into()));
    };
    let shape = first.mask.shape();
    let rows = samples.len();
    let cols = 2 + imputations.len();
    for (j, model) in imputations.iter().enumerate() {
        if model.len() != rows || model.iter().any(|img| img.len() != shape.len()) {
            return Err(Error::Shape(format!("imputations of model {j} do not match the samples")));
        }
    }
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let grid_shape = ImageShape::new(c, rows * h, cols * w);
    let mut grid = vec![0.0f32; grid_shape.len()];
    let mut put = |r: usize, col: usize, img: &[f32]| {
        for ch in 0..c {
            for y in 0..h {
                let src = &img[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                let start = ch * grid_shape.pixels() + (r * h + y) * grid_shape.width + col * w;
                grid[start..start + w].copy_from_slice(src);
            }
        }
    };
    for (r, s) in samples.iter().enumerate() {
        if s.mask.shape() != shape {
            return Err(Error::Shape("grid samples must share one shape".into()));
        }
        put(r, 0, &s.ground_truth);
        let masked: Vec<f32> = s
            .values
            .iter()
            .zip(s.mask.bits())
            .map(|(&v, &m)| if m { MASK_GRAY } else { v })
            .collect();
        put(r, 1, &masked);
        for (j, model) in imputations.iter().enumerate() {
            put(r, 2 + j, &model[r]);
        }
    }
    tensorio::write_pnm(path, grid_shape, &grid)?;
    Ok(GridLayout {
        rows,
        cols,
        height: grid_shape.height,
        width: grid_shape.width,
    })
}

/// Display scale of one exported image: stored value `v` maps to pixel
/// `(v − min) / (max − min)`; degenerate images are written mid-gray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayScale {
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

fn min_max(values: &[f64]) -> (Vec<f32>, DisplayScale) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(max - min > 1e-12 * max.abs().max(min.abs()).max(1.0));
    let pixels = values
        .iter()
        .map(|&v| if degenerate { MASK_GRAY } else { ((v - min) / (max - min)) as f32 })
        .collect();
    (pixels, DisplayScale { min, max, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterImages {
    pub mean: PathBuf,
    pub factors: Vec<PathBuf>,
    pub noise: PathBuf,
    pub sidecar: PathBuf,
    pub factor_scales: Vec<DisplayScale>,
    /// Scale of `ln d`.
    pub noise_scale: DisplayScale,
}

impl ParameterImages {
    pub fn image_files(&self) -> Vec<&Path> {
        let mut v = vec![self.mean.as_path()];
        v.extend(self.factors.iter().map(PathBuf::as_path));
        v.push(self.noise.as_path());
        v
    }
}

/// Writes the mean (raw values, clamped), each factor column (min-max
/// normalized) and the noise (min-max normalized `ln d`) as images into
/// `dir`, named `{prefix}mean`, `{prefix}factor-K` and `{prefix}noise`,
/// plus a `{prefix}scales.json` sidecar with the display scales.
pub fn export_parameter_images(
    g: &FactorGaussian<f32>,
    shape: ImageShape,
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<ParameterImages> {
    let dir = dir.as_ref();
    if g.dim() != shape.len() {
        return Err(Error::Shape(format!(
            "Gaussian has dimension {}, shape {shape:?} needs {}",
            g.dim(),
            shape.len()
        )));
    }
    let ext = if shape.channels == 3 { "ppm" } else { "pgm" };
    let file = |name: &str| dir.join(format!("{prefix}{name}.{ext}"));

    let mean = file("mean");
    tensorio::write_pnm(&mean, shape, g.mean())?;

    let l = g.latent();
    let mut factors = Vec::with_capacity(l);
    let mut factor_scales = Vec::with_capacity(l);
    for k in 0..l {
        let col: Vec<f64> = (0..g.dim()).map(|i| g.factor_row(i)[k] as f64).collect();
        let (pixels, scale) = min_max(&col);
        let path = file(&format!("factor-{k}"));
        tensorio::write_pnm(&path, shape, &pixels)?;
        factors.push(path);
        factor_scales.push(scale);
    }

    let log_noise: Vec<f64> = g.noise().iter().map(|&d| (d as f64).ln()).collect();
    let (pixels, noise_scale) = min_max(&log_noise);
    let noise = file("noise");
    tensorio::write_pnm(&noise, shape, &pixels)?;

    let sidecar = dir.join(format!("{prefix}scales.json"));
    let doc = json!({
        "mean": {"transform": "identity-clamped"},
        "factors": factor_scales,
        "noise": {"transform": "ln", "scale": noise_scale},
    });
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&doc).expect("json"))
        .map_err(|e| Error::io(&sidecar, e))?;
    Ok(ParameterImages {
        mean,
        factors,
        noise,
        sidecar,
        factor_scales,
        noise_scale,
    })
}
