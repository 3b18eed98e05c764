//! Multi-scale stacking laws: channel accounting, smoothing linearity,
//! variance ordering across the default scale set.

use lczlab_core::data::{PatchPair, MSI_BANDS, PATCH_SIZE, SAR_BANDS};
use lczlab_core::scalespace::{gaussian_kernel, gaussian_smooth, multi_scale_stack, ScaleSpec};
use lczlab_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_patch(seed: u64) -> PatchPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchPair::new(
        Tensor::randn(&[SAR_BANDS, PATCH_SIZE, PATCH_SIZE], &mut rng),
        Tensor::randn(&[MSI_BANDS, PATCH_SIZE, PATCH_SIZE], &mut rng),
        0,
    )
    .unwrap()
}

#[test]
fn default_spec_stacks_32_sar_and_40_msi_channels() {
    let (sar, msi) = multi_scale_stack(&random_patch(1), &ScaleSpec::default()).unwrap();
    assert_eq!(sar.shape, [32, PATCH_SIZE, PATCH_SIZE]);
    assert_eq!(msi.shape, [40, PATCH_SIZE, PATCH_SIZE]);
}

#[test]
fn single_size_one_kernel_reproduces_the_patch() {
    let patch = random_patch(2);
    let spec = ScaleSpec::new(vec![1]).unwrap();
    let (sar, msi) = multi_scale_stack(&patch, &spec).unwrap();
    assert_eq!(sar.data, patch.sar.data);
    assert_eq!(msi.data, patch.msi.data);
}

#[test]
fn stack_is_scale_major() {
    let patch = random_patch(3);
    let spec = ScaleSpec::new(vec![1, 3]).unwrap();
    let (sar, _) = multi_scale_stack(&patch, &spec).unwrap();
    // first block is the size-1 (identity) scale: all 8 original bands
    let plane = PATCH_SIZE * PATCH_SIZE;
    assert_eq!(&sar.data[..SAR_BANDS * plane], patch.sar.data.as_slice());
}

#[test]
fn variance_is_non_increasing_across_the_default_scales() {
    let spec = ScaleSpec::default();
    for seed in 0..5 {
        let patch = random_patch(100 + seed);
        let (sar, _) = multi_scale_stack(&patch, &spec).unwrap();
        let plane = PATCH_SIZE * PATCH_SIZE;
        for band in 0..SAR_BANDS {
            let mut variances = Vec::new();
            for s in 0..spec.num_scales() {
                let ch = s * SAR_BANDS + band;
                let vals = &sar.data[ch * plane..(ch + 1) * plane];
                let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                let var =
                    vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
                variances.push(var);
            }
            for pair in variances.windows(2) {
                assert!(
                    pair[1] <= pair[0],
                    "seed {seed} band {band}: variances {variances:?}"
                );
            }
        }
    }
}

#[test]
fn smoothing_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f32>::randn(&[2, 16, 16], &mut rng);
    let y = Tensor::<f32>::randn(&[2, 16, 16], &mut rng);
    let (a, b) = (1.7f32, -0.6f32);
    let combo = Tensor::new(
        &[2, 16, 16],
        x.data.iter().zip(&y.data).map(|(&u, &v)| a * u + b * v).collect(),
    )
    .unwrap();
    let kernel = gaussian_kernel(4, 2.0).unwrap();
    let sx = gaussian_smooth(&x, &kernel, 4).unwrap();
    let sy = gaussian_smooth(&y, &kernel, 4).unwrap();
    let s_combo = gaussian_smooth(&combo, &kernel, 4).unwrap();
    for ((&c, &u), &v) in s_combo.data.iter().zip(&sx.data).zip(&sy.data) {
        assert!((c - (a * u + b * v)).abs() <= 1e-5);
    }
}

#[test]
fn output_range_is_bounded_by_input_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f32>::randn(&[1, 12, 12], &mut rng);
    let lo = x.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = x.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    for size in [2, 4, 6, 8] {
        let kernel = gaussian_kernel(size, ScaleSpec::sigma_for(size)).unwrap();
        let out = gaussian_smooth(&x, &kernel, size).unwrap();
        for &v in &out.data {
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }
}

#[test]
fn odd_kernels_preserve_the_channel_mean_under_reflection() {
    // Whole-sample reflection conserves mass for symmetric windows.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = Tensor::<f32>::randn(&[3, 10, 10], &mut rng);
    for size in [3, 5, 7] {
        let kernel = gaussian_kernel(size, ScaleSpec::sigma_for(size)).unwrap();
        let out = gaussian_smooth(&x, &kernel, size).unwrap();
        for c in 0..3 {
            let before: f64 = x.data[c * 100..(c + 1) * 100].iter().map(|&v| v as f64).sum();
            let after: f64 = out.data[c * 100..(c + 1) * 100].iter().map(|&v| v as f64).sum();
            assert!(
                (before / 100.0 - after / 100.0).abs() <= 1e-5,
                "size {size} channel {c}"
            );
        }
    }
}

#[test]
fn non_increasing_sizes_are_rejected() {
    assert!(ScaleSpec::new(vec![2, 2]).is_err());
    assert!(ScaleSpec::new(vec![4, 2]).is_err());
    assert!(ScaleSpec::new(vec![]).is_err());
}
