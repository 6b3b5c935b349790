//! Image buffers and the PPM / PFM formats.
//!
//! Buffers hold f64; quantization happens only at the file boundary. PPM is
//! binary P6 with maxval 255. PFM is the grayscale `Pf` variant, 32-bit
//! little-endian floats (scale -1.0), rows bottom to top per convention.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image, channels in [0, 1] for display purposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        ColorImage {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    pub fn from_rows(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height);
        ColorImage { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.data[y * self.width + x] = value;
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in px {
                bytes.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(file))
    }

    pub fn read_ppm(mut r: impl BufRead) -> Result<Self> {
        let magic = read_token(&mut r)?;
        if magic != "P6" {
            return Err(Error::parse("ppm.magic", format!("expected P6, got {magic}")));
        }
        let width: usize = parse_token(&mut r, "ppm.width")?;
        let height: usize = parse_token(&mut r, "ppm.height")?;
        let maxval: usize = parse_token(&mut r, "ppm.maxval")?;
        if maxval != 255 {
            return Err(Error::parse("ppm.maxval", format!("expected 255, got {maxval}")));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::parse("ppm.pixels", e.to_string()))?;
        let data = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Ok(ColorImage { width, height, data })
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_ppm(std::io::BufReader::new(file))
    }
}

/// Row-major single-channel f64 image (depth maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl ScalarImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        ScalarImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_rows(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        ScalarImage { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Grayscale PFM, scale -1.0 (little endian), bottom row first.
    pub fn write_pfm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                bytes.extend_from_slice(&(self.get(x, y) as f32).to_le_bytes());
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_pfm(std::io::BufWriter::new(file))
    }

    pub fn read_pfm(mut r: impl BufRead) -> Result<Self> {
        let magic = read_token(&mut r)?;
        if magic != "Pf" {
            return Err(Error::parse("pfm.magic", format!("expected Pf, got {magic}")));
        }
        let width: usize = parse_token(&mut r, "pfm.width")?;
        let height: usize = parse_token(&mut r, "pfm.height")?;
        let scale: f64 = parse_token(&mut r, "pfm.scale")?;
        if scale >= 0.0 {
            return Err(Error::parse("pfm.scale", "big-endian PFM is not supported"));
        }
        let mut bytes = vec![0u8; width * height * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::parse("pfm.pixels", e.to_string()))?;
        let mut img = ScalarImage::filled(width, height, 0.0);
        let mut i = 0;
        for y in (0..height).rev() {
            for x in 0..width {
                let v = f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
                img.set(x, y, v as f64);
                i += 4;
            }
        }
        Ok(img)
    }
}

/// Reads one whitespace-delimited token, skipping `#` comments.
fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read(&mut byte)? {
            0 => break,
            _ => {
                let c = byte[0] as char;
                if in_comment {
                    if c == '\n' {
                        in_comment = false;
                    }
                    continue;
                }
                if c == '#' {
                    in_comment = true;
                    continue;
                }
                if c.is_whitespace() {
                    if token.is_empty() {
                        continue;
                    }
                    break;
                }
                token.push(c);
            }
        }
    }
    if token.is_empty() {
        return Err(Error::parse("header", "unexpected end of file"));
    }
    Ok(token)
}

fn parse_token<T: std::str::FromStr>(r: &mut impl BufRead, field: &str) -> Result<T> {
    let token = read_token(r)?;
    token
        .parse()
        .map_err(|_| Error::parse(field, format!("cannot parse {token:?}")))
}
