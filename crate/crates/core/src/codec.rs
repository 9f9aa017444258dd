//! Mask and image file formats.
//!
//! Masks are 8-bit single-channel index maps (pixel value = class id), stored
//! as PNG or binary PGM (`P5`), with the vocabulary in a JSON sidecar.
//! Images are written as 8-bit RGB PNG. A raw little-endian f64 container
//! keeps full precision where a later stage must resume from an image.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::SegMask;
use crate::scalar::Scalar;
use crate::vocab::ClassVocabulary;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const RAW_MAGIC: &[u8] = b"MGIMAGE1";

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMask {
    pub png: Vec<u8>,
    pub vocabulary_json: String,
}

pub fn encode_mask<T: Scalar>(mask: &SegMask<T>, vocab: &ClassVocabulary) -> Result<EncodedMask> {
    if mask.num_classes() != vocab.len() {
        return Err(Error::shape(
            mask.shape_string(),
            format!("vocabulary of {} classes", vocab.len()),
        ));
    }
    let ids = mask.class_map().ok_or(Error::SoftMaskSerialization)?;
    Ok(EncodedMask {
        png: write_png(mask.width(), mask.height(), png::ColorType::Grayscale, &ids)?,
        vocabulary_json: vocab.to_json(),
    })
}

/// Decodes a PNG or PGM index map against `vocab`.
pub fn decode_mask<T: Scalar>(bytes: &[u8], vocab: &ClassVocabulary) -> Result<SegMask<T>> {
    let (width, height, ids) = if bytes.starts_with(PNG_MAGIC) {
        read_index_png(bytes)?
    } else if bytes.starts_with(b"P5") {
        read_pgm(bytes)?
    } else {
        return Err(Error::Codec("mask is neither PNG nor binary PGM".into()));
    };
    if let Some(bad) = ids.iter().find(|&&c| c as usize >= vocab.len()) {
        return Err(Error::Codec(format!(
            "mask pixel value {bad} is not a class id of the {}-class vocabulary",
            vocab.len()
        )));
    }
    SegMask::from_class_map(width, height, vocab.len(), &ids)
}

pub fn encode_mask_pgm<T: Scalar>(mask: &SegMask<T>) -> Result<Vec<u8>> {
    let ids = mask.class_map().ok_or(Error::SoftMaskSerialization)?;
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(&ids);
    Ok(out)
}

pub fn image_to_png<T: Scalar>(image: &Image<T>) -> Result<Vec<u8>> {
    write_png(image.width(), image.height(), png::ColorType::Rgb, &image.to_rgb8())
}

pub fn image_from_png<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(codec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Codec("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(codec_err)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Codec(format!("unsupported PNG color type {other:?}"))),
    };
    Image::from_rgb8(w, h, &rgb)
}

/// Lossless container: magic, width and height as u32 LE, then f64 LE values.
pub fn image_to_raw<T: Scalar>(image: &Image<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_MAGIC.len() + 8 + image.data().len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(image.width() as u32).to_le_bytes());
    out.extend_from_slice(&(image.height() as u32).to_le_bytes());
    for v in image.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn image_from_raw<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let header = RAW_MAGIC.len() + 8;
    if bytes.len() < header || !bytes.starts_with(RAW_MAGIC) {
        return Err(Error::Codec("not a raw image container".into()));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[header..];
    if body.len() != w * h * 3 * 8 {
        return Err(Error::Codec("raw image body has wrong length".into()));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Image::new(w, h, data)
}

fn write_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(codec_err)?;
        writer.write_image_data(data).map_err(codec_err)?;
        writer.finish().map_err(codec_err)?;
    }
    Ok(out)
}

fn read_index_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(codec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Codec("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(codec_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Codec(format!(
            "index map must be 8-bit, found {:?}",
            info.bit_depth
        )));
    }
    let ids = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => {
            buf.truncate(info.buffer_size());
            buf
        }
        other => {
            return Err(Error::Codec(format!(
                "index map must be single-channel, found {other:?}"
            )))
        }
    };
    Ok((info.width as usize, info.height as usize, ids))
}

fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    // Header: "P5" then width, height, maxval as whitespace-separated ASCII,
    // '#' comments allowed, one whitespace byte before the raster.
    let mut fields = Vec::with_capacity(3);
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(Error::Codec("truncated PGM header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("ascii digits");
        fields.push(
            text.parse::<usize>()
                .map_err(|e| Error::Codec(format!("PGM header: {e}")))?,
        );
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval > 255 {
        return Err(Error::Codec("PGM index map must be 8-bit".into()));
    }
    i += 1;
    let raster = bytes
        .get(i..i + w * h)
        .ok_or_else(|| Error::Codec("truncated PGM raster".into()))?;
    Ok((w, h, raster.to_vec()))
}

fn codec_err(e: impl std::fmt::Display) -> Error {
    Error::Codec(e.to_string())
}
