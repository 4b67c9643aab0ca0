//! Image samples and portable pixmap (PPM/PGM) encoding.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H x W x C` image with values in `[0, 1]` and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub identity: usize,
    pub camera: usize,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB image as binary PPM (P6), or a 1-channel image as PGM (P5).
pub fn write_pnm(path: &Path, pixels: &Tensor) -> Result<()> {
    let s = pixels.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::Dimension(format!(
            "pixmap needs [h, w, 1|3], got {:?}",
            s
        )));
    }
    let magic = if s[2] == 3 { "P6" } else { "P5" };
    let mut out = Vec::with_capacity(pixels.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", s[1], s[0]).expect("vec write");
    out.extend(pixels.data().iter().map(|&v| to_byte(v)));
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a binary PPM (P6) or PGM (P5) with maxval 255.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            return Err(bad("truncated header"));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let channels = match tokens[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("unsupported magic")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let mut bytes = vec![0u8; w * h * channels];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Tensor::new(
        vec![h, w, channels],
        bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}
