//! Classical color-transfer baselines: gray world and histogram matching.
//! Both act per pixel and per channel and never change image dimensions.

use crate::data_pipeline::{normalize, RasterImage, ValueRange};
use crate::error::{invalid_input, Error, Result};
use crate::scalar::Scalar;

/// Scales each channel by `g / mean_c`, where `g` is the mean of the
/// channel means, then clamps to the raster's range. Signed rasters are
/// processed in byte space and normalized back.
pub fn gray_world<T: Scalar>(image: &RasterImage<T>) -> Result<RasterImage<T>> {
    let (factors, byte) = gray_world_factors(image)?;
    let mut px = byte.pixels().clone();
    for (c, f) in factors.iter().enumerate() {
        let f = T::lit(*f);
        for v in px.plane_slice_mut(0, c) {
            *v = (*v * f).round().max(T::zero()).min(T::lit(255.0));
        }
    }
    let out = RasterImage::new(px, ValueRange::Byte)?;
    Ok(match image.range() {
        ValueRange::Byte => out,
        ValueRange::Signed => normalize(&out),
    })
}

/// Per-channel scale factors `g / mean_c` of [`gray_world`], computed on
/// byte intensities.
pub fn gray_world_factors<T: Scalar>(image: &RasterImage<T>) -> Result<(Vec<f64>, RasterImage<T>)> {
    let byte = crate::data_pipeline::denormalize(image);
    let means = byte.channel_means();
    if means.is_empty() {
        return Err(invalid_input!("image has no channels"));
    }
    if let Some(c) = means.iter().position(|&m| m == 0.0) {
        return Err(Error::DegenerateInput(format!("channel {c} has zero mean")));
    }
    let g = means.iter().sum::<f64>() / means.len() as f64;
    Ok((means.iter().map(|m| g / m).collect(), byte))
}

fn histograms<T: Scalar>(image: &RasterImage<T>) -> Vec<[u64; 256]> {
    (0..image.channels())
        .map(|c| {
            let mut h = [0u64; 256];
            for v in image.pixels().plane_slice(0, c) {
                h[v.to_usize().unwrap_or(0).min(255)] += 1;
            }
            h
        })
        .collect()
}

/// Per-channel 256-entry lookup tables sending the source CDF onto the
/// reference CDF: each source level maps to the lowest reference level
/// whose CDF reaches the source level's CDF.
pub fn histogram_lut<T: Scalar>(source: &RasterImage<T>, reference: &RasterImage<T>) -> Result<Vec<[u8; 256]>> {
    if source.channels() != reference.channels() {
        return Err(invalid_input!(
            "source has {} channels, reference has {}",
            source.channels(),
            reference.channels()
        ));
    }
    let src = crate::data_pipeline::denormalize(source);
    let refr = crate::data_pipeline::denormalize(reference);
    let hs = histograms(&src);
    let hr = histograms(&refr);
    Ok(hs
        .iter()
        .zip(&hr)
        .map(|(hs, hr)| {
            let (ns, nr) = (hs.iter().sum::<u64>(), hr.iter().sum::<u64>());
            let mut rcdf = [0u64; 256];
            let mut acc = 0;
            for (i, n) in hr.iter().enumerate() {
                acc += n;
                rcdf[i] = acc;
            }
            let mut lut = [0u8; 256];
            let mut acc = 0u64;
            let mut j = 0usize;
            for (i, n) in hs.iter().enumerate() {
                acc += n;
                // Compare acc/ns with rcdf[j]/nr exactly in integers.
                while j < 255 && (rcdf[j] as u128) * (ns as u128) < (acc as u128) * (nr as u128) {
                    j += 1;
                }
                lut[i] = j as u8;
            }
            lut
        })
        .collect())
}

/// Remaps each channel of `source` so its histogram approximates the
/// reference's. The output keeps the source's value range.
pub fn histogram_match<T: Scalar>(source: &RasterImage<T>, reference: &RasterImage<T>) -> Result<RasterImage<T>> {
    let luts = histogram_lut(source, reference)?;
    let mut px = crate::data_pipeline::denormalize(source).into_pixels();
    for (c, lut) in luts.iter().enumerate() {
        for v in px.plane_slice_mut(0, c) {
            *v = T::lit(f64::from(lut[v.to_usize().unwrap_or(0).min(255)]));
        }
    }
    let out = RasterImage::new(px, ValueRange::Byte)?;
    Ok(match source.range() {
        ValueRange::Byte => out,
        ValueRange::Signed => normalize(&out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> u8) -> RasterImage<f64> {
        let data: Vec<u8> = (0..h * w * 3).map(|i| f(i / 3 / w, i / 3 % w, i % 3)).collect();
        RasterImage::from_interleaved_u8(h, w, 3, &data).unwrap()
    }

    #[test]
    fn gray_world_scale_factors() {
        let img = rgb(2, 2, |_, _, c| [100, 120, 140][c]);
        let (f, _) = gray_world_factors(&img).unwrap();
        assert!((f[0] - 1.2).abs() < 1e-12);
        assert!((f[1] - 1.0).abs() < 1e-12);
        assert!((f[2] - 6.0 / 7.0).abs() < 1e-12);
        let out = gray_world(&img).unwrap();
        assert_eq!(out.channel_means(), vec![120.0, 120.0, 120.0]);
    }

    #[test]
    fn gray_world_fixed_point_and_errors() {
        let gray = rgb(3, 3, |y, x, _| (10 * y + 3 * x + 20) as u8);
        assert_eq!(gray_world(&gray).unwrap(), gray);
        let dark = rgb(2, 2, |_, _, c| if c == 1 { 0 } else { 50 });
        assert!(matches!(gray_world(&dark), Err(Error::DegenerateInput(_))));
        let signed = normalize(&gray);
        assert_eq!(gray_world(&signed).unwrap(), signed);
    }

    #[test]
    fn histogram_constant_source_maps_to_quantile() {
        // Reference levels 10, 20, 30, 40: every source pixel sits at the
        // top of the source CDF, so it maps to the highest level.
        let src = RasterImage::<f64>::from_interleaved_u8(1, 4, 1, &[77; 4]).unwrap();
        let reference = RasterImage::<f64>::from_interleaved_u8(1, 4, 1, &[10, 40, 20, 30]).unwrap();
        let out = histogram_match(&src, &reference).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 40.0));
        // Two source levels split in half: the lower half maps to 20.
        let src = RasterImage::<f64>::from_interleaved_u8(1, 4, 1, &[5, 5, 9, 9]).unwrap();
        let out = histogram_match(&src, &reference).unwrap();
        assert_eq!(out.pixels().data(), &[20.0, 20.0, 40.0, 40.0]);
    }

    #[test]
    fn histogram_channel_mismatch() {
        let a = RasterImage::<f64>::from_interleaved_u8(1, 2, 1, &[1, 2]).unwrap();
        let b = rgb(1, 2, |_, _, _| 1);
        assert!(matches!(histogram_match(&a, &b), Err(Error::InvalidInput(_))));
    }

    fn arb_image() -> impl Strategy<Value = RasterImage<f64>> {
        prop::collection::vec(any::<u8>(), 48).prop_map(|d| RasterImage::from_interleaved_u8(4, 4, 3, &d).unwrap())
    }

    proptest! {
        #[test]
        fn histogram_identity(img in arb_image()) {
            prop_assert_eq!(histogram_match(&img, &img).unwrap(), img);
        }

        #[test]
        fn histogram_monotone_and_idempotent(src in arb_image(), reference in arb_image()) {
            for lut in histogram_lut(&src, &reference).unwrap() {
                prop_assert!(lut.windows(2).all(|w| w[0] <= w[1]));
            }
            let once = histogram_match(&src, &reference).unwrap();
            let twice = histogram_match(&once, &reference).unwrap();
            let diff = once.pixels().max_abs_diff(twice.pixels());
            prop_assert!(diff <= 1.0, "{diff}");
            prop_assert_eq!(once.pixels().shape(), src.pixels().shape());
        }

        #[test]
        fn gray_world_equalizes_means(img in arb_image()) {
            prop_assume!(img.channel_means().iter().all(|&m| m > 0.0));
            let (f, byte) = gray_world_factors(&img).unwrap();
            let g = byte.channel_means().iter().sum::<f64>() / 3.0;
            for (c, m) in byte.channel_means().iter().enumerate() {
                prop_assert!((m * f[c] - g).abs() < 1e-9);
            }
        }
    }
}
