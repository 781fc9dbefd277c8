//! Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::tensor::Tensor;

/// Colours for argmax maps: background, building, road, then extras.
pub const PALETTE: [[u8; 3]; 6] = [
    [40, 40, 40],
    [220, 60, 50],
    [250, 250, 250],
    [60, 160, 60],
    [60, 90, 220],
    [230, 200, 40],
];

fn encode(magic: &str, width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

fn decode<'a>(bytes: &'a [u8], magic: &str, channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let bad = |reason: &str| Error::Format {
        kind: "netpbm",
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * channels;
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != need {
        return Err(bad(&format!("raster has {} bytes, expected {need}", raster.len())));
    }
    Ok((w, h, raster))
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    write(path.as_ref(), encode("P5", width, height, gray))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path.as_ref())?;
    let (w, h, raster) = decode(&bytes, "P5", 1)?;
    Ok((w, h, raster.to_vec()))
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    write(path.as_ref(), encode("P6", width, height, rgb))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path.as_ref())?;
    let (w, h, raster) = decode(&bytes, "P6", 3)?;
    Ok((w, h, raster.to_vec()))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]`.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let g = image.grid()?;
    if g.channels != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", g.channels)));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    write_ppm(path, g.width, g.height, &bytes)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let (w, h, rgb) = read_ppm(path)?;
    Tensor::new(&[h, w, 3], rgb.into_iter().map(|b| b as f32 / 255.0).collect())
}

/// Class indices as gray levels.
pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_pgm(path, labels.width(), labels.height(), labels.data())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (w, h, gray) = read_pgm(path)?;
    LabelMap::new(h, w, gray)
}

/// A single-channel map with values in `[0, 1]` as gray levels.
pub fn save_unit_map(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let g = map.grid()?;
    if g.channels != 1 {
        return Err(Error::Shape(format!("PGM needs 1 channel, got {}", g.channels)));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    write_pgm(path, g.width, g.height, &bytes)
}

/// Colour-coded class map.
pub fn save_label_colors(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let rgb: Vec<u8> = labels
        .data()
        .iter()
        .flat_map(|&l| PALETTE[l as usize % PALETTE.len()])
        .collect();
    write_ppm(path, labels.width(), labels.height(), &rgb)
}
