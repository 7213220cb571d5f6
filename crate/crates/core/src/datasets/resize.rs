//! Grayscale resampling.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

/// Bilinear (triangle-filter) resize of a row-major grayscale image.
pub fn resize_gray(src: &[f32], width: usize, height: usize, new_width: usize, new_height: usize) -> Vec<f32> {
    assert_eq!(src.len(), width * height, "source buffer does not match its dimensions");
    if width == new_width && height == new_height {
        return src.to_vec();
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width as u32, height as u32, src.to_vec())
            .expect("buffer length checked above");
    let out = imageops::resize(&img, new_width as u32, new_height as u32, FilterType::Triangle);
    out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_stay_constant() {
        let src = vec![0.4f32; 16 * 16];
        let out = resize_gray(&src, 16, 16, 28, 28);
        assert_eq!(out.len(), 784);
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn output_stays_in_unit_range() {
        let src: Vec<f32> = (0..256).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let out = resize_gray(&src, 16, 16, 28, 28);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        // upsampling interpolates, so some intermediate values must appear
        assert!(out.iter().any(|v| *v > 0.05 && *v < 0.95));
    }
}
