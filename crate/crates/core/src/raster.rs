//! 8-bit RGB rasters and lossless PNG files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::avatar::Geometry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps a `[3, H, W]` tensor in `[-1, 1]` to interleaved RGB bytes.
pub fn quantize<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    if image.shape().len() != 3 || image.dim(0) != 3 {
        return Err(Error::invalid(format!("expected [3, H, W] image, got {:?}", image.shape())));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let v = (d[(k * h + y) * w + x].as_f64() + 1.0) * 127.5;
                out[(y * w + x) * 3 + k] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`quantize`] up to rounding.
pub fn dequantize<T: Scalar>(rgb: &[u8], geometry: Geometry) -> Result<Tensor<T>> {
    let (h, w) = (geometry.height, geometry.width);
    if rgb.len() != 3 * h * w || geometry.channels != 3 {
        return Err(Error::invalid(format!(
            "raster of {} bytes does not match {geometry:?}",
            rgb.len()
        )));
    }
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                data[(k * h + y) * w + x] = T::lit(rgb[(y * w + x) * 3 + k] as f64 / 127.5 - 1.0);
            }
        }
    }
    Tensor::from_vec(&geometry.shape(), data)
}

pub fn write_png(path: &Path, rgb: &[u8], geometry: Geometry) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), geometry.width as u32, geometry.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format("png", format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(rgb).map_err(fail)?;
    writer.finish().map_err(fail)
}

pub fn read_png(path: &Path) -> Result<(Vec<u8>, Geometry)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |e: png::DecodingError| Error::format("png", format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(fail)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            "png",
            format!("{}: expected 8-bit RGB, got {:?} {:?}", path.display(), info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, Geometry::rgb(info.height as usize, info.width as usize)))
}
