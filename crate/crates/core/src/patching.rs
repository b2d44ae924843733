//! Image partitioning, random patch masking and block-mean downsampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Grayscale image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}×{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.pixels.clone()).expect("image dims")
    }
}

/// Non-overlapping square patches of a square image, in row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// Patches per side (√N).
    pub side: usize,
    /// `N × patch_size²` pixel vectors.
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Inverse of [`partition`].
    pub fn reassemble(&self) -> Image {
        let p = self.patch_size;
        let side_px = self.side * p;
        let mut img = Image::filled(side_px, side_px, 0.0);
        for (k, patch) in self.patches.data().chunks(p * p).enumerate() {
            let (gy, gx) = (k / self.side, k % self.side);
            for dy in 0..p {
                for dx in 0..p {
                    img.set(gy * p + dy, gx * p + dx, patch[dy * p + dx]);
                }
            }
        }
        img
    }
}

pub fn partition(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if image.height != image.width {
        return Err(Error::Shape(format!(
            "partition needs a square image, got {}×{}",
            image.height, image.width
        )));
    }
    if patch_size == 0 || image.height % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image side {} is not divisible by patch size {patch_size}",
            image.height
        )));
    }
    let side = image.height / patch_size;
    let p = patch_size;
    let mut data = Vec::with_capacity(image.pixels.len());
    for gy in 0..side {
        for gx in 0..side {
            for dy in 0..p {
                let start = (gy * p + dy) * image.width + gx * p;
                data.extend_from_slice(&image.pixels[start..start + p]);
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        side,
        patches: Tensor::new(vec![side * side, p * p], data)?,
    })
}

/// Block-mean pooling by an integer `ratio`.
pub fn downsample(image: &Image, ratio: usize) -> Result<Image> {
    if ratio == 0 || image.height % ratio != 0 || image.width % ratio != 0 {
        return Err(Error::Shape(format!(
            "{}×{} image is not divisible by ratio {ratio}",
            image.height, image.width
        )));
    }
    if ratio == 1 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height / ratio, image.width / ratio);
    let inv = 1.0 / (ratio * ratio) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..ratio {
                for dx in 0..ratio {
                    acc += image.get(y * ratio + dy, x * ratio + dx);
                }
            }
            out[y * w + x] = acc * inv;
        }
    }
    Image::new(h, w, out)
}

/// Which patches an instance keeps (sampled) and which it hides (masked).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub n_total: usize,
    /// Ascending patch indices fed to the encoder.
    pub sampled: Vec<usize>,
    /// Ascending patch indices the decoder must reconstruct.
    pub masked: Vec<usize>,
    /// 1 at sampled positions, 0 at masked ones.
    pub position_map: Vec<f64>,
}

fn check_square(n_total: usize) -> Result<()> {
    let s = (n_total as f64).sqrt().round() as usize;
    if n_total == 0 || s * s != n_total {
        return Err(Error::param(
            "n_total",
            format!("patch count {n_total} is not a positive perfect square"),
        ));
    }
    Ok(())
}

impl MaskPlan {
    /// Builds a plan from an explicit sampled set.
    pub fn from_sampled(n_total: usize, sampled: &[usize]) -> Result<Self> {
        check_square(n_total)?;
        let mut map = vec![0.0; n_total];
        for &i in sampled {
            if i >= n_total || map[i] != 0.0 {
                return Err(Error::param(
                    "sampled",
                    format!("index {i} is out of range or repeated"),
                ));
            }
            map[i] = 1.0;
        }
        let sampled_sorted: Vec<usize> = (0..n_total).filter(|&i| map[i] == 1.0).collect();
        let masked = (0..n_total).filter(|&i| map[i] == 0.0).collect();
        Ok(Self {
            n_total,
            sampled: sampled_sorted,
            masked,
            position_map: map,
        })
    }

    /// Every patch visible (inference).
    pub fn full(n_total: usize) -> Result<Self> {
        let all: Vec<usize> = (0..n_total).collect();
        Self::from_sampled(n_total, &all)
    }

    pub fn n_sampled(&self) -> usize {
        self.sampled.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    /// Position map as a `√N × √N` matrix.
    pub fn position_grid(&self) -> Tensor {
        let s = (self.n_total as f64).sqrt().round() as usize;
        Tensor::new(vec![s, s], self.position_map.clone()).expect("square plan")
    }
}

/// Draws `round(N·(1 − mask_ratio))` patches uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(n_total: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    check_square(n_total)?;
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::param(
            "mask_ratio",
            format!("must lie strictly between 0 and 1, got {mask_ratio}"),
        ));
    }
    let n_sampled = (n_total as f64 * (1.0 - mask_ratio)).round() as usize;
    if n_sampled < 1 {
        return Err(Error::param(
            "mask_ratio",
            format!("{mask_ratio} leaves no sampled patch out of {n_total}"),
        ));
    }
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(rng);
    MaskPlan::from_sampled(n_total, &order[..n_sampled])
}

/// Sampled patch vectors in plan order, with their grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedPatches {
    pub vectors: Tensor,
    pub positions: Vec<usize>,
}

pub fn select_patches(grid: &PatchGrid, plan: &MaskPlan) -> Result<SelectedPatches> {
    if plan.n_total != grid.len() {
        return Err(Error::Shape(format!(
            "plan covers {} patches but grid has {}",
            plan.n_total,
            grid.len()
        )));
    }
    let dim = grid.patch_dim();
    let mut data = Vec::with_capacity(plan.sampled.len() * dim);
    for &i in &plan.sampled {
        data.extend_from_slice(grid.patches.row(i));
    }
    Ok(SelectedPatches {
        vectors: Tensor::new(vec![plan.sampled.len(), dim], data)?,
        positions: plan.sampled.clone(),
    })
}

/// Places selected rows back at their grid positions; other rows are zero.
pub fn scatter_patches(selected: &SelectedPatches, n_total: usize) -> Result<Tensor> {
    let (_, dim) = selected.vectors.as_matrix_dims();
    let mut out = vec![0.0; n_total * dim];
    for (k, &pos) in selected.positions.iter().enumerate() {
        if pos >= n_total {
            return Err(Error::Shape(format!("position {pos} outside {n_total} patches")));
        }
        out[pos * dim..(pos + 1) * dim].copy_from_slice(selected.vectors.row(k));
    }
    Tensor::new(vec![n_total, dim], out)
}

/// Standardizes each row to zero mean and unit variance (per-patch targets).
pub fn standardize_patches(patches: &Tensor) -> Tensor {
    let (_, cols) = patches.as_matrix_dims();
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(side, side, (0..side * side).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn partition_counts() {
        let g = partition(&random_image(64, 1), 8).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(g.patch_dim(), 64);
        let g = partition(&Image::filled(224, 224, 0.0), 16).unwrap();
        assert_eq!(g.len(), 196);
    }

    #[test]
    fn partition_rejects_indivisible() {
        assert!(matches!(
            partition(&Image::filled(30, 30, 0.0), 8),
            Err(Error::Shape(_))
        ));
        assert!(partition(&Image::filled(32, 16, 0.0), 8).is_err());
    }

    #[test]
    fn partition_reassemble_round_trip() {
        let img = random_image(32, 3);
        assert_eq!(partition(&img, 4).unwrap().reassemble(), img);
    }

    #[test]
    fn patch_order_is_row_major() {
        let mut img = Image::filled(4, 4, 0.0);
        img.set(0, 2, 7.0); // top-right patch of a 2×2 grid
        let g = partition(&img, 2).unwrap();
        assert_eq!(g.patches.row(1), &[7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!(p.n_sampled(), 16);
        assert_eq!(p.n_masked(), 48);
        assert_eq!(p.position_map.iter().sum::<f64>(), 16.0);
        let p = sample_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!(p.n_sampled(), 49);
    }

    #[test]
    fn mask_is_deterministic() {
        let a = sample_mask(64, 0.75, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_mask(64, 0.75, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.0, 1.0, -0.1, 1.5, 0.999] {
            assert!(matches!(
                sample_mask(64, r, &mut rng),
                Err(Error::Parameter { .. })
            ));
        }
        assert!(sample_mask(60, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mask_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 64];
        let trials = 10_000;
        for _ in 0..trials {
            for i in sample_mask(64, 0.75, &mut rng).unwrap().sampled {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn downsample_cases() {
        let c = Image::filled(8, 8, 0.3);
        assert!(downsample(&c, 2).unwrap().pixels.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let img = Image::new(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(downsample(&img, 2).unwrap().pixels, vec![3.0]);
        let r = random_image(6, 9);
        assert_eq!(downsample(&r, 1).unwrap(), r);
        assert!(downsample(&r, 4).is_err());
    }

    #[test]
    fn select_all_and_first() {
        let g = partition(&random_image(16, 4), 4).unwrap();
        let all = select_patches(&g, &MaskPlan::full(16).unwrap()).unwrap();
        assert_eq!(all.vectors, g.patches);
        let first = select_patches(&g, &MaskPlan::from_sampled(16, &[0]).unwrap()).unwrap();
        assert_eq!(first.vectors.data(), g.patches.row(0));
        assert_eq!(first.positions, vec![0]);
    }

    #[test]
    fn select_rejects_count_mismatch() {
        let g = partition(&random_image(16, 4), 4).unwrap();
        assert!(select_patches(&g, &MaskPlan::full(4).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn plan_invariants(seed in any::<u64>(), ratio in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_mask(64, ratio, &mut rng).unwrap();
            prop_assert_eq!(p.n_sampled() + p.n_masked(), 64);
            prop_assert_eq!(p.position_map.iter().sum::<f64>() as usize, p.n_sampled());
            let mut all: Vec<usize> = p.sampled.iter().chain(&p.masked).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..64).collect::<Vec<_>>());
            for &i in &p.sampled { prop_assert_eq!(p.position_map[i], 1.0); }
            for &i in &p.masked { prop_assert_eq!(p.position_map[i], 0.0); }
        }

        #[test]
        fn scatter_inverts_select(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = partition(&random_image(32, seed), 8).unwrap();
            let p = sample_mask(16, 0.5, &mut rng).unwrap();
            let sel = select_patches(&g, &p).unwrap();
            let back = scatter_patches(&sel, 16).unwrap();
            for &i in &p.sampled { prop_assert_eq!(back.row(i), g.patches.row(i)); }
            for &i in &p.masked { prop_assert!(back.row(i).iter().all(|&v| v == 0.0)); }
        }
    }
}
