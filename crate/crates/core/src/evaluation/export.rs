//! Association grids (PNG) and discriminator features (TSV).

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::networks::layers::ForwardCtx;
use crate::networks::{images_to_tensor, tensor_to_images, Channel, Domain, LatentNoise, Model, StackSplit};
use crate::{IMAGE_SIZE, MODEL_CHANNELS};

use super::preprocessed;

/// Columns of each row in an association grid.
pub const GRID_COLUMNS: usize = 5;

/// Maps a model-range value to an 8-bit pixel.
pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn batch(set: &LabeledImageSet, n: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let n = n.min(set.len());
    images_to_tensor(&set.images()[..n * set.image_len()], n, dtype)
}

/// Per channel, one row per sample: source image, its association, the
/// target image's association, the generator output for it, the target image.
fn association_rows(model: &Model, split: StackSplit, xs: &Tensor, xt: &Tensor, ch: Channel) -> Result<[Vec<f32>; 5]> {
    let ctx = ForwardCtx::EVAL;
    let zs = model.encode(xs, Domain::Source, LatentNoise::Zero, &ctx)?.sample;
    let zt = model.encode(xt, Domain::Target, LatentNoise::Zero, &ctx)?.sample;
    let assoc_s = model.graft(&zs, ch, split, &ctx, None)?;
    let assoc_t = model.graft(&zt, ch, split, &ctx, None)?;
    let fake = model.generate(&assoc_t, ch, &ctx)?;
    Ok([
        tensor_to_images(xs)?,
        tensor_to_images(&assoc_s)?,
        tensor_to_images(&assoc_t)?,
        tensor_to_images(&fake)?,
        tensor_to_images(xt)?,
    ])
}

/// Writes a PNG grid for `n` source/target pairs: the `st` panel above the
/// `ts` panel, five columns per row.
pub fn export_associations(
    model: &Model,
    split: StackSplit,
    source: &LabeledImageSet,
    target: &LabeledImageSet,
    n: usize,
    path: &Path,
) -> Result<()> {
    let source = preprocessed(source)?;
    let target = preprocessed(target)?;
    let rows = n.min(source.len()).min(target.len());
    if rows == 0 {
        return Err(Error::Data("no images to export".into()));
    }
    let xs = batch(&source, rows, model.dtype())?;
    let xt = batch(&target, rows, model.dtype())?;
    let per = IMAGE_SIZE * IMAGE_SIZE * MODEL_CHANNELS;
    let (w, h) = (GRID_COLUMNS * IMAGE_SIZE, Channel::BOTH.len() * rows * IMAGE_SIZE);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (panel, ch) in Channel::BOTH.into_iter().enumerate() {
        let cols = association_rows(model, split, &xs, &xt, ch)?;
        for (c, pixels) in cols.iter().enumerate() {
            for r in 0..rows {
                let tile = &pixels[r * per..(r + 1) * per];
                let (ox, oy) = (c * IMAGE_SIZE, (panel * rows + r) * IMAGE_SIZE);
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let p = &tile[(y * IMAGE_SIZE + x) * MODEL_CHANNELS..][..MODEL_CHANNELS];
                        img.put_pixel(
                            (ox + x) as u32,
                            (oy + y) as u32,
                            image::Rgb([to_byte(p[0]), to_byte(p[1]), to_byte(p[2])]),
                        );
                    }
                }
            }
        }
    }
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::Builder::new().suffix(".png").tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    img.save_with_format(tmp.path(), image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes discriminator trunk features of real source associations (domain
/// 0) and generated target associations (domain 1) as TSV:
/// `domain  label  f0 .. f{d-1}`.
pub fn export_features(
    model: &Model,
    split: StackSplit,
    channel: Channel,
    source: &LabeledImageSet,
    target: &LabeledImageSet,
    batch_size: usize,
    path: &Path,
) -> Result<usize> {
    let ctx = ForwardCtx::EVAL;
    let mut out = String::new();
    let mut written = 0;
    for (domain, set) in [(Domain::Source, source), (Domain::Target, target)] {
        let set = preprocessed(set)?;
        let per = set.image_len();
        for start in (0..set.len()).step_by(batch_size.max(1)) {
            let end = (start + batch_size).min(set.len());
            let x = images_to_tensor(&set.images()[start * per..end * per], end - start, model.dtype())?;
            let z = model.encode(&x, domain, LatentNoise::Zero, &ctx)?.sample;
            let mut assoc = model.graft(&z, channel, split, &ctx, None)?;
            if domain == Domain::Target {
                assoc = model.generate(&assoc, channel, &ctx)?;
            }
            let feats = model.discriminate(&assoc, channel)?.features;
            let feats = feats.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
            if written == 0 && out.is_empty() {
                out.push_str("domain\tlabel");
                for i in 0..feats.first().map_or(0, Vec::len) {
                    out.push_str(&format!("\tf{i}"));
                }
                out.push('\n');
            }
            for (row, &label) in feats.iter().zip(&set.labels()[start..end]) {
                out.push_str(&format!("{}\t{label}", domain as u8));
                for v in row {
                    out.push_str(&format!("\t{v}"));
                }
                out.push('\n');
                written += 1;
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Split;
    use crate::networks::ArchConfig;

    fn set(n: usize, v: f32) -> LabeledImageSet {
        LabeledImageSet::new("mnist", Split::Test, 1, vec![v; n * 784], (0..n as u8).collect()).unwrap()
    }

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(7.0), 255);
    }

    #[test]
    fn grid_dimensions_and_source_column() {
        let model = Model::build(&ArchConfig::tiny(), 0, candle_core::DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.png");
        export_associations(&model, StackSplit::default(), &set(3, 1.0), &set(4, 0.0), 3, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (5 * 28, 2 * 3 * 28));
        // First column holds the source images (all white) in both panels.
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(27, 3 * 28 + 5).0, [255, 255, 255]);
        // Last column holds the target images (all black).
        assert_eq!(img.get_pixel(4 * 28, 0).0, [0, 0, 0]);
    }

    #[test]
    fn feature_table_shape() {
        let arch = ArchConfig::tiny();
        let model = Model::build(&arch, 0, candle_core::DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        let n = export_features(&model, StackSplit::default(), Channel::Ts, &set(3, 0.5), &set(2, 0.2), 2, &p).unwrap();
        assert_eq!(n, 5);
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0].split('\t').count(), 2 + arch.feature_dim);
        assert!(lines[1].starts_with("0\t0\t"));
        assert!(lines[5].starts_with("1\t1\t"));
    }
}
