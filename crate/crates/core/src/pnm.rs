//! Label-mask export (PGM P5) and color overlays (PPM P6).

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::{atomic, Error, Result};

/// Gray value written for background pixels.
pub const BACKGROUND_VALUE: u8 = 255;

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

pub fn label_color(label: i32) -> [u8; 3] {
    PALETTE[label.rem_euclid(PALETTE.len() as i32) as usize]
}

/// Labels `>= 0` map to their value, negatives to [`BACKGROUND_VALUE`].
pub fn labels_to_gray(labels: &[i32], width: u32, height: u32) -> Result<GrayImage> {
    if labels.len() != (width * height) as usize {
        return Err(Error::DimMismatch { expected: (width * height) as usize, got: labels.len() });
    }
    let data = labels
        .iter()
        .map(|&l| {
            if l < 0 {
                Ok(BACKGROUND_VALUE)
            } else if l < BACKGROUND_VALUE as i32 {
                Ok(l as u8)
            } else {
                Err(Error::InvalidArgument(format!("label {l} does not fit a PGM mask")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(GrayImage::from_raw(width, height, data).expect("sized"))
}

pub fn encode_pgm(mask: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary)).write_image(
        mask.as_raw(),
        mask.width(),
        mask.height(),
        ExtendedColorType::L8,
    )?;
    Ok(buf)
}

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary)).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

pub fn save_label_pgm(labels: &[i32], width: u32, height: u32, path: &Path) -> Result<()> {
    let mask = labels_to_gray(labels, width, height)?;
    atomic::write_atomic(path, &encode_pgm(&mask)?)
}

pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    atomic::write_atomic(path, &encode_ppm(img)?)
}

/// Reads a PGM label image; [`BACKGROUND_VALUE`] becomes `-1`.
pub fn load_label_pgm(path: &Path) -> Result<(Vec<i64>, u32, u32)> {
    let bytes = std::fs::read(path)?;
    let reader = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Pnm);
    let gray = reader.decode()?.into_luma8();
    let labels = gray.as_raw().iter().map(|&v| if v == BACKGROUND_VALUE { -1 } else { v as i64 }).collect();
    Ok((labels, gray.width(), gray.height()))
}

/// Alpha-blends label colors over the frame; background pixels are dimmed.
pub fn overlay(rgb: &RgbImage, labels: &[i32]) -> Result<RgbImage> {
    if labels.len() != (rgb.width() * rgb.height()) as usize {
        return Err(Error::DimMismatch { expected: (rgb.width() * rgb.height()) as usize, got: labels.len() });
    }
    let mut out = rgb.clone();
    for (px, &label) in out.pixels_mut().zip(labels) {
        if label < 0 {
            for c in px.0.iter_mut() {
                *c /= 3;
            }
        } else {
            let color = label_color(label);
            for (c, &k) in px.0.iter_mut().zip(&color) {
                *c = ((*c as u16 + k as u16) / 2) as u8;
            }
        }
    }
    Ok(out)
}
