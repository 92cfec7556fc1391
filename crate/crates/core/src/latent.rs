//! Patch codebook standing in for a VQ encoder/decoder, Monte Carlo latent
//! evidence, semantic fusion constraints, and latent-space guided sampling.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::Circuit;
use crate::diffusion::{draw, value_grid};
use crate::format::{read_f32, read_magic, read_u32, write_u32, FormatError};
use crate::inference::{
    backward_marginals, conditional_sample_with, forward_soft_evidence, InferenceError, PosteriorMarginals, SoftEvidence,
};
use crate::learning::Dataset;
use crate::oracle::CodecView;
use crate::rng::{seeded, Rng};
use crate::table::CategoricalTable;

pub const MAGIC: &[u8; 4] = b"PCCB";
pub const VERSION: u32 = 1;
pub const DEFAULT_EVIDENCE_SAMPLES: usize = 4;
pub const DEFAULT_DECODES: usize = 8;
const MAX_LLOYD_ITERS: usize = 100;

/// Soft evidence over latent codes.
pub type LatentEvidence = SoftEvidence<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatentError {
    #[error("codebook size {k} exceeds the {distinct} distinct training patches")]
    KTooLarge { k: usize, distinct: usize },
    #[error("expected {expected} {what}, got {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// How a patch is turned into a distribution over codes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SoftAssign {
    /// All mass on the nearest embedding.
    Hard,
    /// `q(j | patch) ∝ exp(−‖patch − e_j‖ / λ)`.
    Temperature(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodebook {
    patch_h: usize,
    patch_w: usize,
    grid_h: usize,
    grid_w: usize,
    num_cats: usize,
    /// `K` patches in pixel-value space, row-major within the patch.
    embeddings: Vec<Vec<f64>>,
    grid: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

impl PatchCodebook {
    /// Panics unless every embedding has `patch_h · patch_w` entries.
    pub fn new(patch_h: usize, patch_w: usize, grid_h: usize, grid_w: usize, num_cats: usize, embeddings: Vec<Vec<f64>>) -> Self {
        assert!(embeddings.iter().all(|e| e.len() == patch_h * patch_w), "embedding length must equal patch area");
        Self { patch_h, patch_w, grid_h, grid_w, num_cats, embeddings, grid: value_grid(num_cats) }
    }

    /// Seeded k-means++ followed by at most 100 Lloyd iterations over the
    /// distinct training patches, weighted by multiplicity. An emptied cluster
    /// is re-seeded at the patch farthest from its current centre.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        data: &Dataset,
        image_h: usize,
        image_w: usize,
        patch_h: usize,
        patch_w: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self, LatentError> {
        if patch_h == 0 || patch_w == 0 || !image_h.is_multiple_of(patch_h) || !image_w.is_multiple_of(patch_w) {
            return Err(LatentError::InvalidConfig(format!("{patch_h}x{patch_w} patches do not tile a {image_h}x{image_w} image")));
        }
        if data.num_vars() != image_h * image_w {
            return Err(LatentError::DimMismatch { what: "pixels per image", expected: image_h * image_w, found: data.num_vars() });
        }
        if k == 0 {
            return Err(LatentError::InvalidConfig("codebook size must be positive".into()));
        }
        let mut cb = Self::new(patch_h, patch_w, image_h / patch_h, image_w / patch_w, data.num_cats(), Vec::new());

        let mut counts: HashMap<Vec<u16>, usize> = HashMap::new();
        for img in data.rows() {
            for cell in 0..cb.num_cells() {
                let p: Vec<u16> = cb.cell_pixels(cell).map(|i| img[i]).collect();
                *counts.entry(p).or_insert(0) += 1;
            }
        }
        let mut distinct: Vec<(Vec<u16>, usize)> = counts.into_iter().collect();
        distinct.sort();
        if k > distinct.len() {
            return Err(LatentError::KTooLarge { k, distinct: distinct.len() });
        }
        let points: Vec<Vec<f64>> = distinct.iter().map(|(p, _)| p.iter().map(|&c| cb.grid[c as usize]).collect()).collect();
        let weights: Vec<f64> = distinct.iter().map(|(_, n)| *n as f64).collect();

        let mut rng = seeded(seed);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(points[rng.random_range(0..points.len())].clone());
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().zip(&weights).map(|(d, w)| d * w).sum();
            let next = if total > 0.0 {
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = points.len() - 1;
                for (i, (d, w)) in d2.iter().zip(&weights).enumerate() {
                    acc += d * w;
                    if u < acc && d * w > 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                argmin(&d2.iter().map(|d| -d).collect::<Vec<_>>())
            };
            centers.push(points[next].clone());
            for (d, p) in d2.iter_mut().zip(&points) {
                *d = d.min(sq_dist(p, centers.last().expect("just pushed")));
            }
        }

        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..MAX_LLOYD_ITERS {
            let mut changed = false;
            for (a, p) in assign.iter_mut().zip(&points) {
                let d: Vec<f64> = centers.iter().map(|c| sq_dist(p, c)).collect();
                let best = argmin(&d);
                if *a != best {
                    *a = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let dim = patch_h * patch_w;
            let mut sums = vec![vec![0.0; dim]; k];
            let mut mass = vec![0.0; k];
            for ((p, &a), &w) in points.iter().zip(&assign).zip(&weights) {
                mass[a] += w;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += w * v;
                }
            }
            for j in 0..k {
                if mass[j] > 0.0 {
                    centers[j] = sums[j].iter().map(|s| s / mass[j]).collect();
                } else {
                    let far = argmin(
                        &points.iter().zip(&assign).map(|(p, &a)| -sq_dist(p, &centers[a])).collect::<Vec<_>>(),
                    );
                    centers[j] = points[far].clone();
                    assign[far] = j;
                }
            }
        }
        // Stored precision is f32; round now so saved and in-memory codebooks agree.
        cb.embeddings = centers.into_iter().map(|c| c.into_iter().map(|v| v as f32 as f64).collect()).collect();
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.embeddings.len()
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid_h * self.patch_h, self.grid_w * self.patch_w)
    }

    pub fn num_pixels(&self) -> usize {
        self.grid_h * self.patch_h * self.grid_w * self.patch_w
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn value_grid(&self) -> &[f64] {
        &self.grid
    }

    /// Row-major pixel indices of a latent cell, in patch order.
    pub fn cell_pixels(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let (gr, gc) = (cell / self.grid_w, cell % self.grid_w);
        let width = self.grid_w * self.patch_w;
        (0..self.patch_h)
            .flat_map(move |r| (0..self.patch_w).map(move |c| (gr * self.patch_h + r) * width + gc * self.patch_w + c))
    }

    fn check_image(&self, image: &[u16]) -> Result<(), LatentError> {
        if image.len() != self.num_pixels() {
            return Err(LatentError::DimMismatch { what: "pixels", expected: self.num_pixels(), found: image.len() });
        }
        Ok(())
    }

    pub fn patch_values(&self, image: &[u16], cell: usize) -> Vec<f64> {
        self.cell_pixels(cell).map(|i| self.grid[image[i] as usize]).collect()
    }

    /// Euclidean distance from a value-space patch to every embedding.
    pub fn distances(&self, patch: &[f64]) -> Vec<f64> {
        self.embeddings.iter().map(|e| sq_dist(e, patch).sqrt()).collect()
    }

    pub fn assign(&self, patch: &[f64], mode: SoftAssign) -> Vec<f64> {
        let d = self.distances(patch);
        match mode {
            SoftAssign::Hard => {
                let mut q = vec![0.0; d.len()];
                q[argmin(&d)] = 1.0;
                q
            }
            SoftAssign::Temperature(lambda) => {
                let m = d[argmin(&d)];
                let e: Vec<f64> = d.iter().map(|x| (-(x - m) / lambda).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        }
    }

    /// Nearest embedding per cell, ties to the lowest index.
    pub fn encode(&self, image: &[u16]) -> Result<Vec<u16>, LatentError> {
        self.check_image(image)?;
        Ok((0..self.num_cells()).map(|cell| argmin(&self.distances(&self.patch_values(image, cell))) as u16).collect())
    }

    /// Pixel categories of one embedding, re-discretized to the value grid.
    pub fn decode_code(&self, code: usize) -> Vec<u16> {
        self.embeddings[code]
            .iter()
            .map(|&v| argmin(&self.grid.iter().map(|g| (g - v).abs()).collect::<Vec<_>>()) as u16)
            .collect()
    }

    pub fn decode(&self, codes: &[u16]) -> Result<Vec<u16>, LatentError> {
        if codes.len() != self.num_cells() {
            return Err(LatentError::DimMismatch { what: "latent codes", expected: self.num_cells(), found: codes.len() });
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= self.k()) {
            return Err(LatentError::InvalidConfig(format!("code {bad} is outside the codebook")));
        }
        let decoded: Vec<Vec<u16>> = (0..self.k()).map(|j| self.decode_code(j)).collect();
        let mut image = vec![0u16; self.num_pixels()];
        for (cell, &code) in codes.iter().enumerate() {
            for (slot, px) in self.cell_pixels(cell).enumerate() {
                image[px] = decoded[code as usize][slot];
            }
        }
        Ok(image)
    }

    /// The codec as seen by the exact latent oracle.
    pub fn oracle_view(&self, mode: SoftAssign) -> CodecView<'_> {
        CodecView {
            image_width: self.grid_w * self.patch_w,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            embeddings: &self.embeddings,
            value_grid: &self.grid,
            temperature: match mode {
                SoftAssign::Hard => None,
                SoftAssign::Temperature(l) => Some(l),
            },
        }
    }

    pub fn write_pccb(&self, w: &mut impl Write) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, self.k() as u32, self.patch_h as u32, self.patch_w as u32, self.grid_h as u32, self.grid_w as u32, self.num_cats as u32] {
            write_u32(&mut buf, v)?;
        }
        for e in &self.embeddings {
            for &v in e {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pccb(r: &mut impl Read) -> Result<Self, FormatError> {
        read_magic(r, MAGIC)?;
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let [k, ph, pw, gh, gw, nc] = dims;
        if k == 0 || ph == 0 || pw == 0 || k.saturating_mul(ph * pw) > 1 << 28 {
            return Err(FormatError::Malformed(format!("implausible codebook dims {dims:?}")));
        }
        let mut embeddings = Vec::with_capacity(k);
        for _ in 0..k {
            let mut e = Vec::with_capacity(ph * pw);
            for _ in 0..ph * pw {
                e.push(read_f32(r)? as f64);
            }
            embeddings.push(e);
        }
        Ok(Self::new(ph, pw, gh, gw, nc, embeddings))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_pccb(&mut v).expect("writing to memory");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path)?;
        Self::read_pccb(&mut bytes.as_slice())
    }
}

/// Monte Carlo estimate of per-cell code weights: draw `num_samples` images from
/// the factorized pixel evidence, softly encode every patch, average.
///
/// Each sample consumes exactly one uniform per pixel in pixel order, so the
/// row of one cell depends only on the evidence of its own pixels.
pub fn estimate_latent_evidence(
    cb: &PatchCodebook,
    pixel_evidence: &SoftEvidence<f64>,
    num_samples: usize,
    mode: SoftAssign,
    rng: &mut Rng,
) -> Result<LatentEvidence, LatentError> {
    if num_samples == 0 {
        return Err(LatentError::InvalidConfig("need at least one evidence sample".into()));
    }
    if pixel_evidence.num_vars() != cb.num_pixels() || pixel_evidence.num_cats() != cb.num_cats() {
        return Err(LatentError::DimMismatch { what: "pixel evidence variables", expected: cb.num_pixels(), found: pixel_evidence.num_vars() });
    }
    let probs = pixel_evidence.normalized_probs()?;
    let nc = cb.num_cats();
    let k = cb.k();
    let mut acc = vec![0.0; cb.num_cells() * k];
    let mut image = vec![0u16; cb.num_pixels()];
    for _ in 0..num_samples {
        for (px, slot) in image.iter_mut().enumerate() {
            *slot = draw(&probs[px * nc..(px + 1) * nc], rng) as u16;
        }
        for cell in 0..cb.num_cells() {
            let q = cb.assign(&cb.patch_values(&image, cell), mode);
            for (a, qj) in acc[cell * k..(cell + 1) * k].iter_mut().zip(q) {
                *a += qj;
            }
        }
    }
    let logs = acc.iter().map(|a| if *a > 0.0 { (a / num_samples as f64).ln() } else { f64::NEG_INFINITY }).collect();
    Ok(SoftEvidence::from_log_weights(cb.num_cells(), k, logs)?)
}

/// A reference image and which of its pixels may be used.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionReference {
    pub image: Vec<u16>,
    /// `true` where the reference pixel is usable.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionEvidence {
    pub evidence: LatentEvidence,
    /// Cells constrained by at least one reference.
    pub covered: Vec<bool>,
    /// Set when no reference covers any cell; the evidence is then uniform.
    pub empty_coverage: bool,
}

/// `w_i(j) = exp(−‖e − e_j‖ / λ)` for every cell whose patch is fully visible in a
/// reference (`e` is that patch); overlapping references multiply, uncovered
/// cells stay uniform.
pub fn semantic_fusion_evidence(cb: &PatchCodebook, refs: &[FusionReference], lambda: f64) -> Result<FusionEvidence, LatentError> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(LatentError::InvalidConfig(format!("temperature {lambda} must be positive")));
    }
    let k = cb.k();
    let mut logs = vec![0.0; cb.num_cells() * k];
    let mut covered = vec![false; cb.num_cells()];
    for r in refs {
        cb.check_image(&r.image)?;
        if r.visible.len() != r.image.len() {
            return Err(LatentError::DimMismatch { what: "mask entries", expected: r.image.len(), found: r.visible.len() });
        }
        for cell in 0..cb.num_cells() {
            if !cb.cell_pixels(cell).all(|p| r.visible[p]) {
                continue;
            }
            covered[cell] = true;
            let d = cb.distances(&cb.patch_values(&r.image, cell));
            for (l, dj) in logs[cell * k..(cell + 1) * k].iter_mut().zip(d) {
                *l -= dj / lambda;
            }
        }
    }
    let empty_coverage = !covered.iter().any(|&c| c);
    let evidence = SoftEvidence::from_log_weights(cb.num_cells(), k, logs)?;
    Ok(FusionEvidence { evidence, covered, empty_coverage })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    /// Average of the decoded one-hot images, per pixel.
    pub pixels: CategoricalTable<f64>,
    pub latent_marginals: PosteriorMarginals<f64>,
    pub latent_samples: Vec<Vec<u16>>,
}

/// Conditions the latent circuit on `evidence`, draws `num_decodes` latent
/// samples and averages their decodes into per-pixel distributions.
pub fn latent_guided_sample(
    circuit: &Circuit<f64>,
    cb: &PatchCodebook,
    evidence: &LatentEvidence,
    num_decodes: usize,
    rng: &mut Rng,
) -> Result<LatentSample, LatentError> {
    if circuit.num_vars() != cb.num_cells() || circuit.num_cats() != cb.k() {
        return Err(LatentError::DimMismatch { what: "latent circuit variables", expected: cb.num_cells(), found: circuit.num_vars() });
    }
    if num_decodes == 0 {
        return Err(LatentError::InvalidConfig("need at least one decode".into()));
    }
    let fw = forward_soft_evidence(circuit, evidence)?;
    let latent_marginals = backward_marginals(circuit, evidence, &fw)?;
    let latent_samples = conditional_sample_with(circuit, evidence, &fw, rng, num_decodes);
    let nc = cb.num_cats();
    let mut counts = vec![0usize; cb.num_pixels() * nc];
    for z in &latent_samples {
        for (px, &c) in cb.decode(z)?.iter().enumerate() {
            counts[px * nc + c as usize] += 1;
        }
    }
    let probs = counts.iter().map(|&n| n as f64 / num_decodes as f64).collect();
    let table = CategoricalTable::from_vec(cb.num_pixels(), nc, probs);
    Ok(LatentSample { pixels: table, latent_marginals, latent_samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2x2 image, 1x1 patches... too trivial; use 4x4 images with 2x2 patches.
    fn two_constant_patches() -> Dataset {
        // Left half all 0, right half all 1, and the reverse.
        let a = [0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let b = [1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0];
        Dataset::new(16, 2, [a, b, a].concat()).unwrap()
    }

    #[test]
    fn separable_patches_are_recovered_exactly() {
        let cb = PatchCodebook::train(&two_constant_patches(), 4, 4, 2, 2, 2, 1).unwrap();
        let mut e: Vec<Vec<f64>> = cb.embeddings().to_vec();
        e.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(e, vec![vec![-1.0; 4], vec![1.0; 4]]);
        assert_eq!(
            PatchCodebook::train(&two_constant_patches(), 4, 4, 2, 2, 3, 1).unwrap_err(),
            LatentError::KTooLarge { k: 3, distinct: 2 }
        );
    }

    #[test]
    fn single_code_decodes_to_the_mean_patch() {
        let data = Dataset::new(4, 3, vec![0, 0, 2, 2, 2, 2, 2, 2]).unwrap();
        let cb = PatchCodebook::train(&data, 2, 2, 1, 2, 1, 0).unwrap();
        // Patches (0,0),(2,2),(2,2),(2,2): mean value (-1+1+1+1)/4 = 0.5 → nearest grid value 1.0? grid is -1,0,1.
        assert_eq!(cb.embeddings()[0], vec![0.5, 0.5]);
        assert_eq!(cb.decode(&[0, 0]).unwrap(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn encode_is_a_fixed_point_of_decode() {
        let cb = PatchCodebook::new(1, 2, 2, 1, 2, vec![vec![-1.0, 0.2], vec![1.0, 1.0], vec![-0.8, -1.0]]);
        let img = [0u16, 1, 1, 1];
        let z = cb.encode(&img).unwrap();
        let z2 = cb.encode(&cb.decode(&z).unwrap()).unwrap();
        assert_eq!(z, z2);
        assert!(cb.encode(&[0, 1]).is_err());
    }

    #[test]
    fn ties_go_to_the_lowest_code() {
        let cb = PatchCodebook::new(1, 1, 1, 1, 3, vec![vec![1.0], vec![-1.0]]);
        assert_eq!(cb.encode(&[1]).unwrap(), vec![0]);
    }

    #[test]
    fn codebook_file_round_trips() {
        let cb = PatchCodebook::train(&two_constant_patches(), 4, 4, 2, 2, 2, 5).unwrap();
        let bytes = cb.to_bytes();
        let back = PatchCodebook::read_pccb(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn hard_pixels_give_one_hot_latents() {
        let cb = PatchCodebook::train(&two_constant_patches(), 4, 4, 2, 2, 2, 1).unwrap();
        let img = two_constant_patches().row(1).to_vec();
        let ev = SoftEvidence::from_hard(&img, 2);
        let le = estimate_latent_evidence(&cb, &ev, DEFAULT_EVIDENCE_SAMPLES, SoftAssign::Hard, &mut seeded(0)).unwrap();
        let z = cb.encode(&img).unwrap();
        for (cell, &code) in z.iter().enumerate() {
            assert_eq!(le.row(cell)[code as usize], 0.0);
            assert!(le.row(cell).iter().enumerate().all(|(j, &l)| j == code as usize || l == f64::NEG_INFINITY));
        }
    }

    #[test]
    fn fusion_formula_on_an_exact_patch() {
        let cb = PatchCodebook::new(1, 2, 1, 2, 2, vec![vec![-1.0, -1.0], vec![1.0, -1.0], vec![1.0, 1.0]]);
        let r = FusionReference { image: vec![1, 0, 0, 0], visible: vec![true, true, false, true] };
        let f = semantic_fusion_evidence(&cb, &[r], 0.7).unwrap();
        assert_eq!(f.covered, vec![true, false]);
        assert!(!f.empty_coverage);
        assert_eq!(f.evidence.row(0)[1].exp(), 1.0);
        assert!(f.evidence.row(0)[0].exp() < 1.0 && f.evidence.row(0)[2].exp() < 1.0);
        assert!((f.evidence.row(0)[0] - (-2.0 / 0.7)).abs() < 1e-15);
        assert_eq!(f.evidence.row(1), &[0.0, 0.0, 0.0]);
        let none = semantic_fusion_evidence(&cb, &[], 1.0).unwrap();
        assert!(none.empty_coverage);
    }
}
