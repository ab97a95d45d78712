//! Binary PPM (P6) and PGM (P5) reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};

fn encode(path: &Path, data: &[u8], width: u32, height: u32, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(data, width, height, color)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let subtype = PnmSubtype::Pixmap(SampleEncoding::Binary);
    encode(path, image.as_raw(), image.width(), image.height(), subtype, ExtendedColorType::Rgb8)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let subtype = PnmSubtype::Graymap(SampleEncoding::Binary);
    encode(path, image.as_raw(), image.width(), image.height(), subtype, ExtendedColorType::L8)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    match decode(path)? {
        image::DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(Error::Format(format!("{}: expected 8-bit RGB, got {:?}", path.display(), other.color()))),
    }
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    match decode(path)? {
        image::DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(Error::Format(format!("{}: expected 8-bit gray, got {:?}", path.display(), other.color()))),
    }
}
