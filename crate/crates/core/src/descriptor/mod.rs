//! Global image appearance: dense gradient descriptors, PCA, a diagonal GMM
//! and Fisher-vector encoding with a whole-image + three-band layout.

mod dsift;
mod fisher;
mod gmm;
mod pca;
mod table;

use std::collections::BTreeMap;

use log::info;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dsift::{dense_descriptors, DenseSiftConfig, LocalDescriptorField};
pub use fisher::{
    band_of, block_len, fisher_block, fisher_encode, l2_normalize, signed_sqrt, GlobalDescriptor,
    REGIONS,
};
pub use gmm::{fit_gmm, GmmConfig, GmmFitReport, GmmModel};
pub use pca::{fit_pca, PcaModel};
pub use table::DescriptorTable;

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::util::{derive_seed, rng_from};

/// Everything needed to fit a Fisher encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub sift: DenseSiftConfig,
    pub pca_dim: usize,
    pub components: usize,
    /// Upper bound on local descriptors sampled for PCA/GMM fitting.
    pub max_samples: usize,
    pub gmm: GmmConfig,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            sift: DenseSiftConfig::default(),
            pca_dim: 84,
            components: 64,
            max_samples: 200_000,
            gmm: GmmConfig::default(),
        }
    }
}

impl DescriptorConfig {
    /// Fisher vector length: 2·K·d per region, four regions.
    pub fn output_dim(&self) -> usize {
        2 * self.components * self.pca_dim * REGIONS
    }
}

/// Anything that maps an image to a fixed-length global descriptor.
pub trait GlobalFeatures: Send + Sync {
    fn describe(&self, img: &Image) -> Result<GlobalDescriptor>;
    fn dim(&self) -> usize;
    fn name(&self) -> &str;
}

/// Fitted PCA + GMM pair that turns images into Fisher vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherEncoder {
    pub config: DenseSiftConfig,
    pub pca: PcaModel,
    pub gmm: GmmModel,
}

impl GlobalFeatures for FisherEncoder {
    fn describe(&self, img: &Image) -> Result<GlobalDescriptor> {
        let field = dense_descriptors(img, &self.config)?;
        fisher_encode(&field, &self.pca, &self.gmm)
    }

    fn dim(&self) -> usize {
        2 * self.gmm.components() * self.gmm.dim() * REGIONS
    }

    fn name(&self) -> &str {
        "fisher"
    }
}

/// Fits PCA and the GMM on a uniform random subsample of the dense
/// descriptors of `images`.
pub fn fit_fisher_encoder(images: &[&Image], cfg: &DescriptorConfig, seed: u64) -> Result<FisherEncoder> {
    cfg.sift.validate()?;
    if images.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let counts: Vec<usize> = images
        .iter()
        .map(|im| cfg.sift.grid_len(im.width()) * cfg.sift.grid_len(im.height()))
        .collect();
    let total: usize = counts.iter().sum();
    let take = total.min(cfg.max_samples);
    let mut rng = rng_from(derive_seed(seed, &[0x5A]));
    let mut picks: Vec<usize> = index::sample(&mut rng, total, take).into_vec();
    picks.sort_unstable();

    // Group global picks by image.
    let mut per_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut offset = 0;
    let mut it = picks.iter().peekable();
    for (img_idx, &c) in counts.iter().enumerate() {
        while let Some(&&p) = it.peek() {
            if p >= offset + c {
                break;
            }
            per_image.entry(img_idx).or_default().push(p - offset);
            it.next();
        }
        offset += c;
    }
    let dim = cfg.sift.dim();
    let chunks: Vec<Vec<f32>> = per_image
        .par_iter()
        .map(|(&i, local)| -> Result<Vec<f32>> {
            let field = dense_descriptors(images[i], &cfg.sift)?;
            Ok(local
                .iter()
                .flat_map(|&j| field.descriptor(j).iter().copied())
                .collect())
        })
        .collect::<Result<_>>()?;
    let sample: Vec<f32> = chunks.into_iter().flatten().collect();
    info!("fitting PCA on {} descriptors of dim {dim}", sample.len() / dim);
    let pca = fit_pca(&sample, dim, cfg.pca_dim)?;
    let projected: Vec<f64> = sample
        .par_chunks(dim)
        .flat_map_iter(|row| pca.project(row))
        .collect();
    info!("fitting {}-component GMM", cfg.components);
    let (gmm, report) = fit_gmm(
        &projected,
        cfg.pca_dim,
        cfg.components,
        derive_seed(seed, &[0x6A]),
        &cfg.gmm,
    )?;
    info!(
        "GMM converged after {} iterations (mean log-likelihood {:.4})",
        report.log_likelihood.len(),
        report.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(FisherEncoder {
        config: cfg.sift.clone(),
        pca,
        gmm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = rng_from(seed);
        Image::from_fn(w, h, |x, y| {
            let base = if (x / 8 + y / 8) % 2 == 0 { 40 } else { 200 };
            let n: u8 = rng.random_range(0..30);
            [base + n; 3]
        })
    }

    #[test]
    fn encoder_output_has_unit_blocks() {
        let imgs: Vec<Image> = (0..4).map(|s| noise_image(s, 48, 48)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let cfg = DescriptorConfig {
            pca_dim: 6,
            components: 3,
            max_samples: 150,
            ..DescriptorConfig::default()
        };
        let enc = fit_fisher_encoder(&refs, &cfg, 1).unwrap();
        let g = enc.describe(&imgs[0]).unwrap();
        assert_eq!(g.dim(), cfg.output_dim());
        let b = block_len(&enc.gmm);
        for r in 0..REGIONS {
            let n: f64 = g.0[r * b..(r + 1) * b].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "region {r} norm {n}");
        }
        let again = fit_fisher_encoder(&refs, &cfg, 1).unwrap();
        assert_eq!(enc, again);
    }
}
