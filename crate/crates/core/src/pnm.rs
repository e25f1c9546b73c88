//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample, and the on-disk
//! dataset layout `<root>/<split>/<seed>.{ppm,mask.pgm,edge.pgm}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MglError, Result};
use crate::synth::SceneSample;

/// Decoded image: `channels` is 3 for P6 and 1 for P5; samples interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn bad(path: &Path, reason: impl Into<String>) -> MglError {
    MglError::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse P5/P6 bytes. Comments (`#` to end of line) are accepted in the
/// header; exactly one whitespace byte separates the header from the pixels.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad(path, "not a binary PPM/PGM (expected P6 or P5)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "malformed header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(path, "malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad(path, "zero image dimension"));
    }
    let need = width * height * channels;
    let data = &bytes[pos..];
    if data.len() != need {
        return Err(bad(
            path,
            format!("expected {need} pixel bytes for {width}×{height}, found {}", data.len()),
        ));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        data: data.to_vec(),
    })
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| MglError::io(path, e))
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| MglError::io(path, e))?;
    decode(&bytes, path)
}

/// Binary 0/1 plane written as 0/255.
pub fn write_binary(path: &Path, width: usize, height: usize, plane: &[u8]) -> Result<()> {
    write(
        path,
        &Pnm {
            width,
            height,
            channels: 1,
            data: plane.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        },
    )
}

fn read_binary(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let img = read(path)?;
    if img.channels != 1 || img.width != width || img.height != height {
        return Err(bad(
            path,
            format!(
                "expected a {width}×{height} PGM, found {}×{} with {} channel(s)",
                img.width, img.height, img.channels
            ),
        ));
    }
    img.data
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(bad(path, format!("label value {other} is neither 0 nor 255"))),
        })
        .collect()
}

pub fn sample_paths(dir: &Path, seed: u64) -> [PathBuf; 3] {
    [
        dir.join(format!("{seed}.ppm")),
        dir.join(format!("{seed}.mask.pgm")),
        dir.join(format!("{seed}.edge.pgm")),
    ]
}

pub fn write_sample(s: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MglError::io(dir, e))?;
    let [img, mask, edge] = sample_paths(dir, s.seed);
    write(
        &img,
        &Pnm {
            width: s.width,
            height: s.height,
            channels: 3,
            data: s.image.clone(),
        },
    )?;
    write_binary(&mask, s.width, s.height, &s.mask)?;
    write_binary(&edge, s.width, s.height, &s.edge)
}

pub fn read_sample(dir: &Path, seed: u64) -> Result<SceneSample> {
    let [img_p, mask_p, edge_p] = sample_paths(dir, seed);
    let img = read(&img_p)?;
    if img.channels != 3 {
        return Err(bad(&img_p, "expected a colour (P6) image"));
    }
    let mask = read_binary(&mask_p, img.width, img.height)?;
    let edge = read_binary(&edge_p, img.width, img.height)?;
    Ok(SceneSample {
        height: img.height,
        width: img.width,
        image: img.data,
        mask,
        edge,
        seed,
    })
}

/// Seeds present in a split directory, ascending.
pub fn list_split(dir: &Path) -> Result<Vec<u64>> {
    let entries = fs::read_dir(dir).map_err(|e| MglError::io(dir, e))?;
    let mut seeds = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| MglError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".ppm") {
            if let Ok(seed) = stem.parse() {
                seeds.push(seed);
            }
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

pub fn read_split(dir: &Path) -> Result<Vec<SceneSample>> {
    list_split(dir)?.into_iter().map(|s| read_sample(dir, s)).collect()
}
