//! PNG ingestion and export.
//!
//! A dataset directory is a flat folder of PNG images. An optional `seg/`
//! subfolder holds label maps with the same file names, the class id stored
//! in the red channel.

use std::fs;
use std::path::{Path, PathBuf};

pub use image::imageops::FilterType;
use image::imageops;
use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};

use crate::color::{ColorSpaceSpec, Rgb8Image};
use crate::error::{Error, Result};
use crate::synth::{held_out_set, sample_to_rgb8, Sample, SegmentationMap, SyntheticSceneSpec};

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("cannot decode PNG: {e}")))
}

fn require_8bit(img: &DynamicImage) -> Result<()> {
    use image::ColorType::*;
    match img.color() {
        L8 | La8 | Rgb8 | Rgba8 => Ok(()),
        other => Err(Error::Validation(format!(
            "unsupported bit depth / color type {other:?}; expected 8-bit"
        ))),
    }
}

/// Decode 8-bit PNG bytes into an RGB raster (gray and alpha are flattened).
pub fn decode_png(bytes: &[u8]) -> Result<Rgb8Image> {
    let img = decode(bytes)?;
    require_8bit(&img)?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

pub fn encode_png(image: &Rgb8Image) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb_image(image)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn encode_gray_png(width: usize, height: usize, values: Vec<u8>) -> Vec<u8> {
    let buf: ImageBuffer<image::Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, values).expect("gray buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn read_png(path: &Path) -> Result<Rgb8Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn write_png(path: &Path, image: &Rgb8Image) -> Result<()> {
    fs::write(path, encode_png(image)).map_err(|e| Error::io(path, e))
}

fn to_rgb_image(image: &Rgb8Image) -> RgbImage {
    let raw: Vec<u8> = image.pixels.iter().flatten().copied().collect();
    RgbImage::from_raw(image.width as u32, image.height as u32, raw).expect("raster size")
}

fn from_rgb_image(img: &RgbImage) -> Rgb8Image {
    let pixels = img.pixels().map(|Rgb(p)| *p).collect();
    Rgb8Image::new(img.width() as usize, img.height() as usize, pixels).expect("raster size")
}

/// Center-crop to the target aspect ratio, then resize.
pub fn fit_to(image: &Rgb8Image, height: usize, width: usize, filter: FilterType) -> Rgb8Image {
    if (image.height, image.width) == (height, width) {
        return image.clone();
    }
    let mut img = to_rgb_image(image);
    let (iw, ih) = (image.width as f64, image.height as f64);
    let target = width as f64 / height as f64;
    let (cw, ch) = if iw / ih > target {
        ((ih * target).round() as u32, ih as u32)
    } else {
        (iw as u32, (iw / target).round() as u32)
    };
    let (cw, ch) = (cw.max(1), ch.max(1));
    let x0 = (image.width as u32 - cw) / 2;
    let y0 = (image.height as u32 - ch) / 2;
    let cropped = imageops::crop(&mut img, x0, y0, cw, ch).to_image();
    from_rgb_image(&imageops::resize(&cropped, width as u32, height as u32, filter))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Load every PNG in `dir`, fitted to `height × width`.
pub fn load_dataset_dir(dir: &Path, color_space: ColorSpaceSpec, height: usize, width: usize) -> Result<Vec<Sample>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no PNG images in {}", dir.display())));
    }
    files
        .iter()
        .map(|path| {
            let raster = fit_to(&read_png(path)?, height, width, FilterType::Triangle);
            let ms = color_space.to_model_space(&raster);
            let seg_path = dir.join("seg").join(path.file_name().expect("file name"));
            let segmentation = if seg_path.is_file() {
                let seg = fit_to(&read_png(&seg_path)?, height, width, FilterType::Nearest);
                Some(SegmentationMap::new(
                    height,
                    width,
                    seg.pixels.iter().map(|p| p[0] as u32).collect(),
                )?)
            } else {
                None
            };
            Ok(Sample {
                input: ms.input,
                target: ms.target,
                segmentation,
            })
        })
        .collect()
}

/// Write `count` synthetic scenes (and their label maps) as a dataset directory.
pub fn export_synthetic(dir: &Path, spec: &SyntheticSceneSpec, color_space: ColorSpaceSpec, count: usize) -> Result<()> {
    let seg_dir = dir.join("seg");
    fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
    for (i, sample) in held_out_set(spec, color_space, count, spec.seed)?.iter().enumerate() {
        let name = format!("scene_{i:05}.png");
        write_png(&dir.join(&name), &sample_to_rgb8(sample, color_space)?)?;
        if let Some(seg) = &sample.segmentation {
            if seg.max_label() > 255 {
                return Err(Error::Validation("label ids above 255 cannot be stored in 8 bits".into()));
            }
            let pixels = seg.labels.iter().map(|&l| [l as u8, 0, 0]).collect();
            write_png(&seg_dir.join(&name), &Rgb8Image::new(seg.width, seg.height, pixels)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_png_rejected() {
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_pixel(2, 2, Rgb([1000, 2000, 3000]));
        let mut bytes = std::io::Cursor::new(Vec::new());
        img.write_to(&mut bytes, image::ImageFormat::Png).unwrap();
        let err = decode_png(&bytes.into_inner()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn garbage_bytes_rejected() {
        assert!(matches!(decode_png(b"not a png"), Err(Error::Image(_))));
    }

    #[test]
    fn png_round_trip() {
        let img = Rgb8Image::new(3, 2, vec![[1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 11, 12], [13, 14, 15], [255, 0, 128]]).unwrap();
        assert_eq!(decode_png(&encode_png(&img)).unwrap(), img);
    }

    #[test]
    fn fit_crops_to_center() {
        let pixels = (0..4 * 2).map(|i| [(i % 4) as u8 * 60, 0, 0]).collect();
        let img = Rgb8Image::new(4, 2, pixels).unwrap();
        let out = fit_to(&img, 2, 2, FilterType::Nearest);
        assert_eq!(out.get(0, 0), [60, 0, 0]);
        assert_eq!(out.get(0, 1), [120, 0, 0]);
    }

    #[test]
    fn exported_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec { seed: 3, ..Default::default() };
        export_synthetic(dir.path(), &spec, ColorSpaceSpec::LAB, 4).unwrap();
        let loaded = load_dataset_dir(dir.path(), ColorSpaceSpec::LAB, spec.height, spec.width).unwrap();
        let original = held_out_set(&spec, ColorSpaceSpec::LAB, 4, 3).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in loaded.iter().zip(&original) {
            assert_eq!(a.segmentation, b.segmentation);
            let err = a.target.data().iter().zip(b.target.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(err < 0.02, "8-bit quantization error {err}");
        }
    }
}
