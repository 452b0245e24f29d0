//! High-frequency structure extraction.
//!
//! The image spectrum is computed with a 2D FFT, rearranged so that DC sits at
//! `(floor(H/2), floor(W/2))`, multiplied by an inverted Gaussian mask and
//! transformed back. The real part of the result is the high-frequency image.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use thiserror::Error;

/// Default mask width in frequency-index units.
pub const DEFAULT_SIGMA: f64 = 20.0;

/// Largest imaginary residue tolerated after the inverse transform of a
/// masked real spectrum. Anything bigger means the mask broke Hermitian symmetry.
const IMAG_RESIDUE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FrequencyError {
    #[error("mask sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image must be non-empty")]
    Empty,
    #[error("inverse transform left an imaginary residue of {0:e}")]
    ImaginaryResidue(f64),
}

/// A single-channel real image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self, FrequencyError> {
        if data.len() != height * width {
            return Err(FrequencyError::ShapeMismatch(height, width, data.len(), 1));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ImagePlane) -> Result<(), FrequencyError> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(FrequencyError::ShapeMismatch(self.height, self.width, other.height, other.width))
        }
    }
}

/// A multi-channel image (1 or 3 planes of equal shape), values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: Vec<ImagePlane>,
}

impl Image {
    pub fn new(channels: Vec<ImagePlane>) -> Self {
        debug_assert!(channels.windows(2).all(|w| w[0].same_shape(&w[1]).is_ok()));
        Self { channels }
    }

    pub fn zeros(num_channels: usize, height: usize, width: usize) -> Self {
        Self { channels: vec![ImagePlane::zeros(height, width); num_channels] }
    }

    pub fn height(&self) -> usize {
        self.channels.first().map_or(0, ImagePlane::height)
    }

    pub fn width(&self) -> usize {
        self.channels.first().map_or(0, ImagePlane::width)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Complex spectrum in DC-at-center layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    /// Index of the zero-frequency bin.
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Elementwise product with a mask of the same shape.
    pub fn apply_mask(&mut self, mask: &FrequencyMask) -> Result<(), FrequencyError> {
        if mask.height != self.height || mask.width != self.width {
            return Err(FrequencyError::ShapeMismatch(self.height, self.width, mask.height, mask.width));
        }
        for (z, m) in self.data.iter_mut().zip(&mask.values) {
            *z *= *m;
        }
        Ok(())
    }
}

/// Gaussian high-emphasis mask `1 - exp(-r² / 2σ²)` with `r` measured from
/// the DC bin of a centered spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    sigma: f64,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FrequencyMask {
    pub fn build(height: usize, width: usize, sigma: f64) -> Result<Self, FrequencyError> {
        if !(sigma > 0.0) {
            return Err(FrequencyError::NonPositiveSigma(sigma));
        }
        // Column index runs against W, row index against H.
        let (cr, cc) = ((height / 2) as f64, (width / 2) as f64);
        let two_s2 = 2.0 * sigma * sigma;
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let d2 = (c as f64 - cc).powi(2) + (r as f64 - cr).powi(2);
                values.push(1.0 - (-d2 / two_s2).exp());
            }
        }
        Ok(Self { sigma, height, width, values })
    }

    /// A mask of ones, i.e. the identity filter.
    pub fn ones(height: usize, width: usize) -> Self {
        Self { sigma: f64::INFINITY, height, width, values: vec![1.0; height * width] }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Convenience wrapper matching the operation name.
pub fn build_mask(height: usize, width: usize, sigma: f64) -> Result<FrequencyMask, FrequencyError> {
    FrequencyMask::build(height, width, sigma)
}

/// Cyclic shift moving index 0 to `floor(n/2)` along rows and columns.
fn fftshift(data: &mut [Complex64], height: usize, width: usize) {
    roll(data, height, width, height / 2, width / 2);
}

/// Inverse of [`fftshift`] (differs from it for odd sizes).
fn ifftshift(data: &mut [Complex64], height: usize, width: usize) {
    roll(data, height, width, height - height / 2, width - width / 2);
}

fn roll(data: &mut [Complex64], height: usize, width: usize, dr: usize, dc: usize) {
    let src = data.to_vec();
    for r in 0..height {
        let nr = (r + dr) % height;
        for c in 0..width {
            data[nr * width + (c + dc) % width] = src[r * width + c];
        }
    }
}

fn fft_in_place(data: &mut [Complex64], height: usize, width: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(width, direction);
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(height, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            column[r] = data[r * width + c];
        }
        col_fft.process(&mut column);
        for r in 0..height {
            data[r * width + c] = column[r];
        }
    }
}

/// Forward 2D transform, returned with DC at the center.
pub fn fft2(img: &ImagePlane) -> Result<Spectrum, FrequencyError> {
    if img.height == 0 || img.width == 0 {
        return Err(FrequencyError::Empty);
    }
    let (h, w) = (img.height, img.width);
    let mut data: Vec<Complex64> = img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut data, h, w, FftDirection::Forward);
    fftshift(&mut data, h, w);
    Ok(Spectrum { height: h, width: w, data })
}

/// Inverse of [`fft2`], returning the complex image (normalized by `1/HW`).
pub fn ifft2(spec: &Spectrum) -> Vec<Complex64> {
    let (h, w) = (spec.height, spec.width);
    let mut data = spec.data.clone();
    ifftshift(&mut data, h, w);
    fft_in_place(&mut data, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    for z in &mut data {
        *z *= scale;
    }
    data
}

/// Real part of [`ifft2`], checking that the discarded imaginary part is negligible.
pub fn ifft2_real(spec: &Spectrum) -> Result<ImagePlane, FrequencyError> {
    let complex = ifft2(spec);
    let residue = complex.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let scale = complex.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    if residue > IMAG_RESIDUE_TOL * scale {
        return Err(FrequencyError::ImaginaryResidue(residue));
    }
    Ok(ImagePlane { height: spec.height, width: spec.width, data: complex.into_iter().map(|z| z.re).collect() })
}

/// Filter a plane with an arbitrary centered mask.
pub fn filter_with_mask(img: &ImagePlane, mask: &FrequencyMask) -> Result<ImagePlane, FrequencyError> {
    let mut spec = fft2(img)?;
    spec.apply_mask(mask)?;
    ifft2_real(&spec)
}

/// High-frequency image `Re(IFFT(FFT(I) ⊙ M_h))`.
pub fn extract_hf(img: &ImagePlane, sigma: f64) -> Result<ImagePlane, FrequencyError> {
    let mask = FrequencyMask::build(img.height, img.width, sigma)?;
    filter_with_mask(img, &mask)
}

/// Per-channel [`extract_hf`].
pub fn extract_hf_image(img: &Image, sigma: f64) -> Result<Image, FrequencyError> {
    let (h, w) = (img.height(), img.width());
    let mask = FrequencyMask::build(h, w, sigma)?;
    let channels = img.channels.iter().map(|c| filter_with_mask(c, &mask)).collect::<Result<_, _>>()?;
    Ok(Image { channels })
}

/// Affine stretch of `[min, max]` onto `[0, 255]`. A constant plane maps to zeros.
pub fn normalize_display(img: &ImagePlane) -> ImagePlane {
    let (lo, hi) = (img.min(), img.max());
    if !(hi > lo) {
        return ImagePlane::zeros(img.height, img.width);
    }
    let scale = 255.0 / (hi - lo);
    ImagePlane { height: img.height, width: img.width, data: img.data.iter().map(|v| (v - lo) * scale).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N²) DFT with the same centered layout.
    fn naive_dft(img: &ImagePlane) -> Vec<Complex64> {
        let (h, w) = (img.height(), img.width());
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        acc += img.get(r, c) * Complex64::from_polar(1.0, phase);
                    }
                }
                out[((u + h / 2) % h) * w + (v + w / 2) % w] = acc;
            }
        }
        out
    }

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_image_is_dc_only() {
        let img = ImagePlane::filled(6, 5, 2.5);
        let spec = fft2(&img).unwrap();
        let (cr, cc) = spec.center();
        assert!((spec.get(cr, cc).re - 2.5 * 30.0).abs() < 1e-9);
        for r in 0..6 {
            for c in 0..5 {
                if (r, c) != (cr, cc) {
                    assert!(spec.get(r, c).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut img = ImagePlane::zeros(8, 8);
        img.set(3, 2, 1.0);
        let spec = fft2(&img).unwrap();
        assert!(spec.data().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_dft_on_small_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(1, 1), (2, 3), (5, 4), (7, 7), (8, 8)] {
            let img = random_plane(&mut rng, h, w);
            let fast = fft2(&img).unwrap();
            let slow = naive_dft(&img);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9, "{h}x{w}");
            }
        }
    }

    #[test]
    fn parseval_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, w) in [(16, 16), (9, 14)] {
            let img = random_plane(&mut rng, h, w);
            let spec = fft2(&img).unwrap();
            let spatial: f64 = img.data().iter().map(|v| v * v).sum();
            assert!((spec.energy() / (h * w) as f64 - spatial).abs() < 1e-9 * spatial);
            let back = ifft2_real(&spec).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_values() {
        let m = FrequencyMask::build(64, 64, 20.0).unwrap();
        assert_eq!(m.get(32, 32), 0.0);
        let expected = 1.0 - (-0.5f64).exp();
        assert!((m.get(32, 52) - expected).abs() < 1e-12);
        assert!((m.get(12, 32) - 0.393469).abs() < 1e-6);
        assert!(m.values().iter().all(|v| (0.0..1.0).contains(v)));
        let odd = FrequencyMask::build(5, 7, 1.0).unwrap();
        assert_eq!(odd.get(2, 3), 0.0);
        let sharp = FrequencyMask::build(8, 8, 1e-3).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                if (r, c) != (4, 4) {
                    assert_eq!(sharp.get(r, c), 1.0);
                }
            }
        }
        assert_eq!(FrequencyMask::build(4, 4, 0.0), Err(FrequencyError::NonPositiveSigma(0.0)));
    }

    #[test]
    fn hf_of_trivial_images() {
        let zero = extract_hf(&ImagePlane::zeros(10, 12), 2.0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let flat = extract_hf(&ImagePlane::filled(10, 12, 0.7), 2.0).unwrap();
        assert!(flat.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn step_edge_peaks_on_edges() {
        let img = ImagePlane::from_fn(8, 8, |_, c| if c >= 4 { 1.0 } else { 0.0 });
        let hf = extract_hf(&img, 1.0).unwrap();
        // reference: mask the naive DFT and invert it directly
        let mask = FrequencyMask::build(8, 8, 1.0).unwrap();
        let spec = naive_dft(&img);
        for r in 0..8 {
            for c in 0..8 {
                let mut acc = Complex64::new(0.0, 0.0);
                for u in 0..8 {
                    for v in 0..8 {
                        let (fu, fv) = ((u + 8 - 4) % 8, (v + 8 - 4) % 8);
                        let phase =
                            2.0 * std::f64::consts::PI * ((fu * r) as f64 / 8.0 + (fv * c) as f64 / 8.0);
                        acc += spec[u * 8 + v] * mask.get(u, v) * Complex64::from_polar(1.0, phase);
                    }
                }
                assert!((acc.re / 64.0 - hf.get(r, c)).abs() < 1e-9);
            }
        }
        let (mut best, mut at) = (0.0, 0);
        for c in 0..8 {
            if hf.get(0, c).abs() > best {
                best = hf.get(0, c).abs();
                at = c;
            }
        }
        // the step is at 3|4 and, periodically, at 7|0
        assert!([0, 3, 4, 7].contains(&at), "peak at column {at}");
        let edge_energy: f64 = [3, 4].iter().map(|&c| hf.get(0, c).powi(2)).sum();
        let interior: f64 = [1, 2, 5, 6].iter().map(|&c| hf.get(0, c).powi(2)).sum();
        assert!(edge_energy > interior);
    }

    #[test]
    fn ones_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_plane(&mut rng, 12, 9);
        let out = filter_with_mask(&img, &FrequencyMask::ones(12, 9)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn display_normalization() {
        let img = ImagePlane::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(normalize_display(&img).data(), &[0.0, 85.0, 170.0, 255.0]);
        let flat = normalize_display(&ImagePlane::filled(3, 3, 4.0));
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn linear_and_dc_free(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i1 = random_plane(&mut rng, 16, 16);
            let i2 = random_plane(&mut rng, 16, 16);
            let mix = ImagePlane::from_fn(16, 16, |r, c| a * i1.get(r, c) + b * i2.get(r, c));
            let (h1, h2, hm) = (extract_hf(&i1, 3.0).unwrap(), extract_hf(&i2, 3.0).unwrap(), extract_hf(&mix, 3.0).unwrap());
            for k in 0..256 {
                proptest::prop_assert!((hm.data()[k] - a * h1.data()[k] - b * h2.data()[k]).abs() < 1e-8);
            }
            let mean: f64 = hm.data().iter().sum::<f64>() / 256.0;
            let mean_abs: f64 = mix.data().iter().map(|v| v.abs()).sum::<f64>() / 256.0;
            proptest::prop_assert!(mean.abs() < 1e-6 * mean_abs.max(f64::MIN_POSITIVE));
        }
    }
}
