//! Image loading and preprocessing: resize with a high-quality filter,
//! optional random crop, normalization to [-1, 1] NCHW tensors.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub fn filter_from_name(name: &str) -> Result<FilterType> {
    match name {
        "lanczos3" => Ok(FilterType::Lanczos3),
        "triangle" => Ok(FilterType::Triangle),
        "catmullrom" => Ok(FilterType::CatmullRom),
        "nearest" => Ok(FilterType::Nearest),
        _ => Err(Error::contract(format!("unknown resample filter {name}"))),
    }
}

/// Load an 8-bit RGB file resized square to `side`.
pub fn load_rgb(path: &Path, side: usize, filter: FilterType) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize == side && img.height() as usize == side {
        return Ok(img);
    }
    Ok(image::imageops::resize(&img, side as u32, side as u32, filter))
}

/// Random crop of `round(side * ratio)` pixels, resized back to `side`.
/// `ratio == 1.0` is the identity.
pub fn random_crop(
    img: &RgbImage,
    ratio: f64,
    filter: FilterType,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    if ratio >= 1.0 {
        return img.clone();
    }
    let side = img.width() as usize;
    let crop = ((side as f64 * ratio).round() as usize).max(1);
    let max_off = side - crop;
    let x0 = rng.gen_range(0..=max_off) as u32;
    let y0 = rng.gen_range(0..=max_off) as u32;
    let view = image::imageops::crop_imm(img, x0, y0, crop as u32, crop as u32).to_image();
    image::imageops::resize(&view, side as u32, side as u32, filter)
}

/// `[3, H, W]` tensor in [-1, 1].
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> ArrayD<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + (y as usize) * w + x as usize] =
                s::<T>(px.0[c] as f64 / 127.5 - 1.0);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[3, h, w]), out).unwrap()
}

/// `[-1, 1]` tensor back to an 8-bit image (for sample output).
pub fn to_image<T: Scalar>(tensor: &ArrayD<T>) -> Result<RgbImage> {
    let shape = tensor.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!(
            "to_image expects [3, H, W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (tensor[[c, y, x]].widen() + 1.0) * 127.5;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Stack `[3, H, W]` tensors into a `[B, 3, H, W]` batch.
pub fn stack_batch<T: Scalar>(items: &[ArrayD<T>]) -> ArrayD<T> {
    assert!(!items.is_empty());
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).unwrap().into_dyn()
}

/// Deterministic sample order: a fresh permutation per epoch, epoch derived
/// from the step so resumed runs see the identical stream.
pub fn batch_indices(
    n_records: usize,
    batch_size: usize,
    step: u64,
    seed: u64,
) -> Vec<usize> {
    let per_epoch = (n_records as u64).div_ceil(batch_size as u64);
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = crate::rng::stream_rng(seed, "data-epoch", epoch);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    (0..batch_size)
        .map(|k| order[(slot * batch_size + k) % n_records])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let mut img = RgbImage::new(4, 4);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = image::Rgb([(i * 16) as u8, 255 - (i * 16) as u8, 7]);
        }
        let t = to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert!(t.iter().all(|&x| (-1.0..=1.0).contains(&x)));
        let back = to_image(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn batch_indices_deterministic_and_step_addressable() {
        let a = batch_indices(10, 4, 7, 99);
        let b = batch_indices(10, 4, 7, 99);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|&i| i < 10));
        // different epochs reshuffle
        let c = batch_indices(10, 4, 7 + 3 * 10, 99);
        assert_ne!(a, c);
    }

    #[test]
    fn crop_identity_at_ratio_one() {
        let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let mut rng = crate::rng::stream_rng(1, "crop", 0);
        let out = random_crop(&img, 1.0, FilterType::Lanczos3, &mut rng);
        assert_eq!(out, img);
        let cropped = random_crop(&img, 0.75, FilterType::Lanczos3, &mut rng);
        assert_eq!(cropped.dimensions(), (8, 8));
    }
}
