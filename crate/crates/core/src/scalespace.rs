//! Multi-scale Gaussian smoothing.
//!
//! Kernel sizes are window side lengths with sigma = size/2. Even-sized
//! windows are anchored at the top-left of the 2x2 center block. Images are
//! reflect-padded (mirror without edge repetition), so constant images are
//! exact fixed points.

use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub kernel_sizes: Vec<usize>,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec {
            kernel_sizes: vec![2, 4, 6, 8],
        }
    }
}

impl ScaleSpec {
    pub fn new(kernel_sizes: Vec<usize>) -> Result<Self> {
        let spec = ScaleSpec { kernel_sizes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::Parameter("scale spec needs at least one kernel size".into()));
        }
        for w in self.kernel_sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Parameter(format!(
                    "kernel sizes must be strictly increasing, got {:?}",
                    self.kernel_sizes
                )));
            }
        }
        if self.kernel_sizes[0] == 0 {
            return Err(Error::Parameter("kernel sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sigma_for(size: usize) -> f64 {
        size as f64 / 2.0
    }

    pub fn num_scales(&self) -> usize {
        self.kernel_sizes.len()
    }
}

/// Sampled 2-D Gaussian on a size x size window, normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 {
        return Err(Error::Parameter("kernel size must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let center = ((size - 1) / 2) as f64;
    let mut kernel = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
    }
    for v in &mut kernel {
        *v /= sum;
    }
    Ok(kernel)
}

/// Mirror index including the edge sample: -1 -> 0, n -> n-1. This variant
/// conserves total mass under symmetric kernels, so channel means survive
/// smoothing.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // Window radii here never exceed the image, so one fold suffices, but
    // loop for safety on tiny images.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-channel 2-D convolution with reflect padding; shape preserved.
pub fn gaussian_smooth(image: &Tensor, kernel: &[f64], size: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("gaussian_smooth", &[3], &[s.len()])),
    };
    if kernel.len() != size * size {
        return Err(Error::shape("gaussian_smooth: kernel", &[size * size], &[kernel.len()]));
    }
    let anchor = ((size - 1) / 2) as isize;
    let mut out = vec![0.0f32; image.numel()];
    for ch in 0..c {
        let src = &image.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for ky in 0..size {
                    let iy = reflect(y as isize + ky as isize - anchor, h);
                    for kx in 0..size {
                        let ix = reflect(x as isize + kx as isize - anchor, w);
                        acc += kernel[ky * size + kx] * src[iy * w + ix] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(&image.shape, out)
}

/// Smooth every channel at every kernel size and stack the scales
/// channel-wise, scale-major: [s0 bands..., s1 bands..., ...].
pub fn multi_scale_stack(patch: &PatchPair, spec: &ScaleSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let stack = |image: &Tensor| -> Result<Tensor> {
        let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
        let mut data = Vec::with_capacity(c * h * w * spec.num_scales());
        for &size in &spec.kernel_sizes {
            let kernel = gaussian_kernel(size, ScaleSpec::sigma_for(size))?;
            let smoothed = gaussian_smooth(image, &kernel, size)?;
            data.extend_from_slice(&smoothed.data);
        }
        Tensor::new(&[c * spec.num_scales(), h, w], data)
    };
    Ok((stack(&patch.sar)?, stack(&patch.msi)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_one_kernel_is_identity() {
        let k = gaussian_kernel(1, 0.5).unwrap();
        assert_eq!(k, vec![1.0]);
    }

    #[test]
    fn kernels_sum_to_one() {
        for size in 1..=9 {
            let k = gaussian_kernel(size, ScaleSpec::sigma_for(size)).unwrap();
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "size {size}: sum {sum}");
        }
    }

    #[test]
    fn odd_kernel_center_is_max_and_rotation_symmetric() {
        let size = 3;
        let k = gaussian_kernel(size, 1.5).unwrap();
        let center = k[4];
        assert!(k.iter().all(|&v| v <= center));
        // 90-degree rotation: (y, x) -> (x, size-1-y)
        for y in 0..size {
            for x in 0..size {
                let rot = k[x * size + (size - 1 - y)];
                assert!((k[y * size + x] - rot).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        assert!(gaussian_kernel(3, 0.0).is_err());
        assert!(gaussian_kernel(3, -1.0).is_err());
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let img = Tensor::full(&[2, 8, 8], 3.25f32);
        for size in [2, 4, 6, 8] {
            let k = gaussian_kernel(size, ScaleSpec::sigma_for(size)).unwrap();
            let out = gaussian_smooth(&img, &k, size).unwrap();
            for &v in &out.data {
                assert!((v - 3.25).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn impulse_response_reproduces_the_kernel() {
        let size = 3;
        let k = gaussian_kernel(size, 1.0).unwrap();
        let mut img = Tensor::zeros(&[1, 9, 9]);
        img.data[4 * 9 + 4] = 1.0;
        let out = gaussian_smooth(&img, &k, size).unwrap();
        for ky in 0..size {
            for kx in 0..size {
                // Correlation with a symmetric kernel: the response centered
                // on the impulse equals the kernel.
                let v = out.data[(3 + ky) * 9 + (3 + kx)] as f64;
                assert!((v - k[ky * size + kx]).abs() < 1e-7);
            }
        }
    }
}
