//! Portable graymap I/O.
//!
//! Writes binary P5 with 16-bit big-endian samples. Real-valued images are
//! mapped affinely from `[min, max]` onto `[0, 65535]`; the bounds go into a
//! `<file>.txt` sidecar so readers can undo the mapping.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAXVAL: u16 = 65535;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sidecar {
    pub min: f64,
    pub max: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Quantizes `img` to 16 bits and writes it plus its sidecar.
pub fn write_pgm16(path: impl AsRef<Path>, img: &Array2<f64>) -> Result<Sidecar> {
    let path = path.as_ref();
    let (h, w) = img.dim();
    let min = img.iter().copied().fold(f64::INFINITY, f64::min);
    let max = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite("image written to PGM".into()));
    }
    let span = max - min;
    let mut bytes = format!("P5\n{w} {h}\n{MAXVAL}\n").into_bytes();
    bytes.reserve(h * w * 2);
    for &v in img.iter() {
        let q = if span > 0.0 {
            ((v - min) / span * MAXVAL as f64).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    writeln!(f, "min = {min:e}\nmax = {max:e}\nwidth = {w}\nheight = {h}")
        .map_err(|e| Error::io(&side, e))?;
    Ok(Sidecar { min, max })
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Sidecar> {
    let side = sidecar_path(path.as_ref());
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut min = None;
    let mut max = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::ImageFormat(format!("bad sidecar value {line:?}")))?;
        match k.trim() {
            "min" => min = Some(v),
            "max" => max = Some(v),
            _ => {}
        }
    }
    match (min, max) {
        (Some(min), Some(max)) => Ok(Sidecar { min, max }),
        _ => Err(Error::ImageFormat(format!(
            "{} lacks min/max",
            side.display()
        ))),
    }
}

struct Header<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    rest: &'a [u8],
}

fn parse_header(bytes: &[u8]) -> Result<Header<'_>> {
    if bytes.len() < 2 {
        return Err(Error::ImageFormat("file too short for a PNM header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    match &magic {
        b"P2" | b"P5" => {}
        other => {
            return Err(Error::ImageFormat(format!(
                "magic {:?} is not a graymap (P2/P5)",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::ImageFormat("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ImageFormat("corrupt header field".into()))?;
    }
    // exactly one whitespace byte separates the header from binary data
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::ImageFormat("corrupt header terminator".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::ImageFormat(format!(
            "invalid dimensions {width}x{height} or maxval {maxval}"
        )));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        rest: &bytes[pos + 1..],
    })
}

/// Raw sample values of a P2 or P5 graymap, plus its maxval.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Array2<f64>, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hd = parse_header(&bytes)?;
    let n = hd.width * hd.height;
    let samples: Vec<f64> = if &hd.magic == b"P5" {
        let bps = if hd.maxval < 256 { 1 } else { 2 };
        if hd.rest.len() < n * bps {
            return Err(Error::ImageFormat(format!(
                "payload has {} bytes, expected {}",
                hd.rest.len(),
                n * bps
            )));
        }
        if bps == 1 {
            hd.rest[..n].iter().map(|&b| b as f64).collect()
        } else {
            hd.rest[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(hd.rest)
            .map_err(|_| Error::ImageFormat("P2 payload is not ASCII".into()))?;
        let vals: std::result::Result<Vec<f64>, _> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u32>().map(f64::from))
            .collect();
        let vals = vals.map_err(|_| Error::ImageFormat("non-numeric P2 sample".into()))?;
        if vals.len() < n {
            return Err(Error::ImageFormat(format!(
                "P2 payload has {} samples, expected {n}",
                vals.len()
            )));
        }
        vals
    };
    let img = Array2::from_shape_vec((hd.height, hd.width), samples).expect("length checked");
    Ok((img, hd.maxval))
}

/// Reads a file written by [`write_pgm16`] and maps samples back to reals.
pub fn read_pgm16_real(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let (raw, maxval) = read_pgm(path)?;
    let side = read_sidecar(path)?;
    let span = side.max - side.min;
    Ok(raw.mapv(|q| side.min + q / maxval as f64 * span))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Array2::from_shape_fn((5, 7), |(i, j)| (i as f64 - j as f64 * 0.3).sin());
        let sc = write_pgm16(&p, &img).unwrap();
        let back = read_pgm16_real(&p).unwrap();
        let step = (sc.max - sc.min) / 65535.0;
        assert!((&back - &img).iter().all(|d| d.abs() <= step));
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n7 5\n65535\n"));
        assert_eq!(bytes.len(), 13 + 5 * 7 * 2);
    }

    #[test]
    fn p2_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        std::fs::write(&p, "P2\n# hi\n2 2\n255\n0 255\n10 20\n").unwrap();
        let (img, maxval) = read_pgm(&p).unwrap();
        assert_eq!(maxval, 255);
        assert_eq!(img[[0, 1]], 255.0);
        assert_eq!(img[[1, 0]], 10.0);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        std::fs::write(&p, "P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::ImageFormat(_))));
        std::fs::write(&p, "P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::ImageFormat(_))));
        std::fs::write(&p, "P5\nx 4\n255\n").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::ImageFormat(_))));
    }
}
