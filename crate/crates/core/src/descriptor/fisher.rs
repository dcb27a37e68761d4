use serde::{Deserialize, Serialize};

use super::dsift::LocalDescriptorField;
use super::gmm::GmmModel;
use super::pca::PcaModel;
use crate::error::{Error, Result};

/// Number of spatial regions: whole image plus three horizontal bands.
pub const REGIONS: usize = 4;

/// Fixed-length global appearance vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for GlobalDescriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Length of one region block: mean and standard-deviation gradients.
pub fn block_len(gmm: &GmmModel) -> usize {
    2 * gmm.components() * gmm.dim()
}

/// Unnormalized Fisher block for one set of (already projected) descriptors.
///
/// Layout: `K × d` mean gradients followed by `K × d` standard-deviation
/// gradients, each scaled by the diagonal Fisher-information factor
/// (1/√w for means, 1/√(2w) for deviations). Empty input gives zeros.
pub fn fisher_block(projected: &[Vec<f64>], gmm: &GmmModel) -> Vec<f64> {
    let (k, d) = (gmm.components(), gmm.dim());
    let mut out = vec![0.0; 2 * k * d];
    if projected.is_empty() {
        return out;
    }
    let prepared = gmm.prepared();
    let mut post = vec![0.0; k];
    for x in projected {
        prepared.posteriors(x, &mut post);
        accumulate(&mut out, x, &post, gmm);
    }
    finish(&mut out, projected.len(), gmm);
    out
}

fn accumulate(out: &mut [f64], x: &[f64], post: &[f64], gmm: &GmmModel) {
    let (k, d) = (gmm.components(), gmm.dim());
    let (mu_part, sd_part) = out.split_at_mut(k * d);
    for c in 0..k {
        let g = post[c];
        if g < 1e-12 {
            continue;
        }
        let m = gmm.mean(c);
        let v = gmm.variance(c);
        for i in 0..d {
            let z = (x[i] - m[i]) / v[i].sqrt();
            mu_part[c * d + i] += g * z;
            sd_part[c * d + i] += g * (z * z - 1.0);
        }
    }
}

fn finish(out: &mut [f64], count: usize, gmm: &GmmModel) {
    let (k, d) = (gmm.components(), gmm.dim());
    let t = count as f64;
    for c in 0..k {
        let w = gmm.weights[c];
        let sm = 1.0 / (t * w.sqrt());
        let ss = 1.0 / (t * (2.0 * w).sqrt());
        for i in 0..d {
            out[c * d + i] *= sm;
            out[k * d + c * d + i] *= ss;
        }
    }
}

/// x → sign(x)·√|x|.
pub fn signed_sqrt(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.signum() * x.abs().sqrt();
    }
}

/// Scales to unit L2 norm; all-zero input is left as is.
pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Band index (0..3) of a vertical position within an image of `height`.
pub fn band_of(center_y: f64, height: usize) -> usize {
    ((center_y * 3.0 / height as f64).floor() as usize).min(2)
}

/// Fisher vector of a descriptor field: whole image then three horizontal
/// bands, each block signed-square-rooted and L2-normalized separately.
pub fn fisher_encode(
    field: &LocalDescriptorField,
    pca: &PcaModel,
    gmm: &GmmModel,
) -> Result<GlobalDescriptor> {
    if field.is_empty() {
        return Err(Error::InvalidArgument("empty descriptor field".into()));
    }
    if pca.input_dim() != field.dim {
        return Err(Error::dims(pca.input_dim(), field.dim));
    }
    if pca.output_dim() != gmm.dim() {
        return Err(Error::dims(gmm.dim(), pca.output_dim()));
    }
    let block = block_len(gmm);
    let mut out = vec![0.0; block * REGIONS];
    let mut counts = [0usize; REGIONS];
    let prepared = gmm.prepared();
    let mut y = vec![0.0; pca.output_dim()];
    let mut post = vec![0.0; gmm.components()];
    for i in 0..field.len() {
        pca.project_into(field.descriptor(i), &mut y);
        prepared.posteriors(&y, &mut post);
        let band = 1 + band_of(field.center_y(i), field.height);
        for r in [0, band] {
            accumulate(&mut out[r * block..(r + 1) * block], &y, &post, gmm);
            counts[r] += 1;
        }
    }
    for r in 0..REGIONS {
        let b = &mut out[r * block..(r + 1) * block];
        if counts[r] == 0 {
            continue;
        }
        finish(b, counts[r], gmm);
        signed_sqrt(b);
        l2_normalize(b);
    }
    Ok(GlobalDescriptor(out))
}
