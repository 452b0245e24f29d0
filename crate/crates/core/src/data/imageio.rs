//! Binary PNM (P5 grey / P6 colour) images, stored as f64 planes in [0, 1].

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::frequency::{Image, ImagePlane};

pub fn read_image(path: &Path) -> image::ImageResult<Image> {
    let dynimg = image::open(path)?;
    Ok(from_dynamic(&dynimg))
}

fn from_dynamic(dynimg: &image::DynamicImage) -> Image {
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb8();
        let channels =
            (0..3).map(|k| ImagePlane::from_fn(h, w, |r, c| rgb.get_pixel(c as u32, r as u32)[k] as f64 / 255.0)).collect();
        Image::new(channels)
    } else {
        let g = dynimg.to_luma8();
        Image::new(vec![ImagePlane::from_fn(h, w, |r, c| g.get_pixel(c as u32, r as u32)[0] as f64 / 255.0)])
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write 1-channel images as P5 and 3-channel images as P6.
pub fn write_image(path: &Path, img: &Image) -> image::ImageResult<()> {
    let (h, w) = (img.height(), img.width());
    let colour = img.num_channels() == 3;
    let chans: &[ImagePlane] = if colour { &img.channels } else { &img.channels[..1] };
    let mut bytes = Vec::with_capacity(h * w * chans.len());
    for r in 0..h {
        for c in 0..w {
            bytes.extend(chans.iter().map(|p| quantize(p.get(r, c))));
        }
    }
    let (subtype, colour_type) = if colour {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file).with_subtype(subtype).write_image(&bytes, w as u32, h as u32, colour_type)
}

/// Write planes already scaled to [0, 255] (see
/// [`normalize_display`](crate::frequency::normalize_display)), rounding each
/// value to the nearest 8-bit level. One plane gives P5, three give P6.
pub fn write_display(path: &Path, planes: &[ImagePlane]) -> image::ImageResult<()> {
    let scaled: Vec<ImagePlane> = planes
        .iter()
        .map(|p| ImagePlane::from_fn(p.height(), p.width(), |r, c| p.get(r, c).round().clamp(0.0, 255.0) / 255.0))
        .collect();
    write_image(path, &Image::new(scaled))
}

/// Luminance average of all channels.
pub fn to_gray(img: &Image) -> ImagePlane {
    let n = img.num_channels() as f64;
    ImagePlane::from_fn(img.height(), img.width(), |r, c| img.channels.iter().map(|p| p.get(r, c)).sum::<f64>() / n)
}
