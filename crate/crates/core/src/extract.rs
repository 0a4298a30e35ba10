//! Per-view dense feature extraction: crops, super-pixels, local-token
//! encoding, broadcast and multi-scale fusion.

use rayon::prelude::*;

use crate::features::FeatureMap;
use crate::regions::{generate_crops, CropSpec, FusionAccumulator};
use crate::superpixel::{slic, SlicParams, SuperpixelMap};
use crate::tensorio::Rgb8Image;
use crate::vit_local::{broadcast_superpixel_features, forward_with_local_tokens, ViTWeights};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractConfig {
    pub scales: Vec<f32>,
    pub stride_frac: f32,
    pub n_superpixels: usize,
    pub compactness: f32,
    pub slic_iterations: usize,
    /// Integer box-filter factor applied to the view before extraction.
    pub downscale: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        let slic = SlicParams::new(50);
        ExtractConfig {
            scales: vec![1.0, 0.5, 0.25],
            stride_frac: 0.5,
            n_superpixels: slic.n_segments,
            compactness: slic.compactness,
            slic_iterations: slic.iterations,
            downscale: 1,
        }
    }
}

impl ExtractConfig {
    pub fn slic_params(&self) -> SlicParams {
        SlicParams { n_segments: self.n_superpixels, compactness: self.compactness, iterations: self.slic_iterations }
    }
}

/// Box-filter downscale by an integer factor; trailing pixels that do not
/// fill a whole block are dropped.
pub fn downscale_box(img: &Rgb8Image, factor: usize) -> Result<Rgb8Image> {
    if factor == 0 {
        return Err(Error::Argument("downscale factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width / factor, img.height / factor);
    if w == 0 || h == 0 {
        return Err(Error::Argument(format!("image {}x{} too small to downscale by {factor}", img.width, img.height)));
    }
    let mut out = Rgb8Image::filled(w, h, [0, 0, 0]);
    let area = (factor * factor) as u32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for yy in 0..factor {
                for xx in 0..factor {
                    let p = img.pixel(x * factor + xx, y * factor + yy);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                }
            }
            out.put(x, y, acc.map(|a| ((a + area / 2) / area) as u8));
        }
    }
    Ok(out)
}

/// Features of one crop before broadcasting.
#[derive(Clone, Debug)]
pub struct CropFeatures {
    pub crop: CropSpec,
    pub superpixels: SuperpixelMap,
    /// `N × C`
    pub features: Vec<f32>,
}

pub fn extract_crop(view: &Rgb8Image, crop: CropSpec, weights: &ViTWeights, cfg: &ExtractConfig) -> Result<CropFeatures> {
    let img = view.crop(crop.x0, crop.y0, crop.w, crop.h)?;
    let superpixels = slic(&img, &cfg.slic_params())?;
    let local = forward_with_local_tokens(&img, &superpixels, weights)?;
    Ok(CropFeatures { crop, superpixels, features: local.superpixel_features })
}

/// Dense `H' × W' × C` features of one view, where `(W', H')` is the view
/// size after `cfg.downscale`.
pub fn extract_view(view: &Rgb8Image, weights: &ViTWeights, cfg: &ExtractConfig) -> Result<FeatureMap> {
    let view = downscale_box(view, cfg.downscale)?;
    let mut crops = generate_crops(view.width, view.height, &cfg.scales, cfg.stride_frac)?;
    crops.sort_by_key(|c| c.order_key());
    let per_crop = crops
        .par_iter()
        .map(|&c| extract_crop(&view, c, weights, cfg))
        .collect::<Result<Vec<_>>>()?;
    let channels = weights.config.embed_dim;
    let mut acc = FusionAccumulator::new(view.width, view.height, channels);
    for cf in &per_crop {
        let fm = broadcast_superpixel_features(&cf.features, channels, &cf.superpixels)?;
        acc.add(&cf.crop, &fm)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit_local::{Activation, ViTConfig};

    fn tiny_weights() -> ViTWeights {
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 4,
            width: 8,
            heads: 2,
            layers: 1,
            embed_dim: 4,
            mlp_dim: 8,
            ln_eps: 1e-5,
            activation: Activation::QuickGelu,
            ln_pre: false,
        };
        ViTWeights::random(cfg, 3).unwrap()
    }

    fn gradient_image(w: usize, h: usize) -> Rgb8Image {
        let mut img = Rgb8Image::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x * 255 / w) as u8, (y * 255 / h) as u8, 90]);
            }
        }
        img
    }

    #[test]
    fn box_downscale_averages_blocks() {
        let mut img = Rgb8Image::filled(4, 2, [0, 0, 0]);
        img.put(0, 0, [200, 0, 0]);
        img.put(1, 1, [100, 0, 0]);
        let d = downscale_box(&img, 2).unwrap();
        assert_eq!((d.width, d.height), (2, 1));
        assert_eq!(d.pixel(0, 0), [75, 0, 0]);
        assert!(downscale_box(&img, 0).is_err());
    }

    #[test]
    fn view_features_are_deterministic_and_cover_view() {
        let w = tiny_weights();
        let cfg = ExtractConfig { n_superpixels: 6, scales: vec![1.0, 0.5], ..Default::default() };
        let img = gradient_image(80, 64);
        let a = extract_view(&img, &w, &cfg).unwrap();
        let b = extract_view(&img, &w, &cfg).unwrap();
        assert_eq!((a.width, a.height, a.channels), (80, 64, 4));
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_crop_single_segment_is_constant() {
        let w = tiny_weights();
        let cfg = ExtractConfig { n_superpixels: 1, scales: vec![1.0], ..Default::default() };
        let fm = extract_view(&gradient_image(40, 40), &w, &cfg).unwrap();
        let first = fm.at(0, 0).to_vec();
        assert!(fm.data.chunks(4).all(|p| p == first.as_slice()));
    }
}
