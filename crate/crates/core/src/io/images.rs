//! Binary PGM (P5) and PPM (P6) images, 8-bit, and ROI mask directories.

use std::fs;
use std::path::Path;

use crate::doppler::{GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::metrics::RoiSet;

pub const ROI_FILES: [&str; 3] = ["blood.pgm", "background.pgm", "noise.pgm"];

fn netpbm(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    netpbm("P5", img.width, img.height, &img.pixels)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    netpbm("P6", img.width, img.height, &img.pixels)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(format!("netpbm: {}", msg.into()))
}

/// Reads `magic width height maxval` (with `#` comments) and returns the
/// header fields plus the offset of the raster.
fn header(bytes: &[u8]) -> Result<(String, [usize; 3], usize)> {
    let mut tokens = Vec::with_capacity(4);
    let mut i = 0;
    while tokens.len() < 4 {
        match bytes.get(i) {
            None => return Err(bad("header ends early")),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    // exactly one whitespace byte separates maxval from the raster
    if i >= bytes.len() {
        return Err(bad("no raster"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number '{s}'")));
    Ok((tokens[0].clone(), [num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?], i + 1))
}

fn decode(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (m, [w, h, maxval], off) = header(bytes)?;
    if m != magic {
        return Err(bad(format!("expected {magic}, found {m}")));
    }
    if maxval != 255 {
        return Err(bad(format!("only 8-bit images are supported (maxval {maxval})")));
    }
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let raster = &bytes[off..];
    if raster.len() < n {
        return Err(Error::Truncated {
            needed: n,
            available: raster.len(),
        });
    }
    Ok((w, h, raster[..n].to_vec()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, pixels) = decode(bytes, "P5", 1)?;
    Ok(GrayImage { width, height, pixels })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, pixels) = decode(bytes, "P6", 3)?;
    Ok(RgbImage { width, height, pixels })
}

pub fn save_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn save_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

fn mask_image(mask: &[bool], width: usize, height: usize) -> GrayImage {
    GrayImage {
        width,
        height,
        pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    }
}

/// Writes the three masks as 0/255 PGMs into `dir` (created if missing).
pub fn save_rois(dir: impl AsRef<Path>, rois: &RoiSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (w, h) = (rois.n_lateral(), rois.n_axial());
    for (name, mask) in ROI_FILES.iter().zip([rois.blood(), rois.background(), rois.noise()]) {
        save_pgm(dir.join(name), &mask_image(mask, w, h))?;
    }
    Ok(())
}

/// Reads masks written by [`save_rois`]; any nonzero pixel is inside.
pub fn load_rois(dir: impl AsRef<Path>) -> Result<RoiSet> {
    let dir = dir.as_ref();
    let mut masks = Vec::with_capacity(3);
    let mut dims = None;
    for name in ROI_FILES {
        let img = load_pgm(dir.join(name))?;
        if *dims.get_or_insert((img.width, img.height)) != (img.width, img.height) {
            return Err(Error::ShapeMismatch(format!("{name} differs in size from blood.pgm")));
        }
        masks.push(img.pixels.iter().map(|&p| p != 0).collect::<Vec<bool>>());
    }
    let (w, h) = dims.expect("three masks read");
    let noise = masks.pop().expect("noise");
    let background = masks.pop().expect("background");
    let blood = masks.pop().expect("blood");
    RoiSet::new(h, w, blood, background, noise)
}
