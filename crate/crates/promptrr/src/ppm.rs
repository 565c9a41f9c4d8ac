//! Binary PPM (P6, 8-bit) images as `3×H×W` tensors in `[0, 1]`.

use std::fs;
use std::path::Path;

use promptrr_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error("not a binary PPM: {0}")]
    Header(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("expected a 3×H×W image, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], PpmError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::Header("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, PpmError> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| PpmError::Header(format!("bad {what} {:?}", String::from_utf8_lossy(t))))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, PpmError> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P6" {
        return Err(PpmError::Header("magic is not P6".into()));
    }
    let w = number(bytes, &mut pos, "width")?;
    let h = number(bytes, &mut pos, "height")?;
    let max = number(bytes, &mut pos, "maxval")?;
    if max != 255 {
        return Err(PpmError::Header(format!("only maxval 255 is supported, got {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let expected = 3 * w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    let mut data = vec![0.0f32; expected];
    for (i, px) in raster[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data).expect("buffer sized from header"))
}

/// Values are clamped to `[0, 1]` and rounded to the nearest level.
pub fn encode(img: &Tensor<f32>) -> Result<Vec<u8>, PpmError> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(PpmError::Shape(s.to_vec()));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>, PpmError> {
    decode(&fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<(), PpmError> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[4 + 1], 1.0);
        assert_eq!(t.data()[8 + 2], 1.0);
        assert_eq!(t.data()[3], 0.2);
        assert_eq!(encode(&t).unwrap(), bytes);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 1\n# depth\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert_eq!(decode(&bytes).unwrap().shape(), &[3, 1, 1]);
    }

    #[test]
    fn clamps_on_write() {
        let t = Tensor::new(&[3, 1, 1], vec![1.5, -0.2, 0.5]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 128]);
    }

    #[test]
    fn malformed() {
        assert!(matches!(decode(b"P5\n1 1\n255\n\0"), Err(PpmError::Header(_))));
        assert!(matches!(decode(b"P6\n1 x\n255\n\0\0\0"), Err(PpmError::Header(_))));
        assert!(matches!(decode(b"P6\n1 1\n65535\n"), Err(PpmError::Header(_))));
        assert!(matches!(decode(b"P6\n2 1\n255\n\0\0\0"), Err(PpmError::Truncated { expected: 6, found: 3 })));
        assert!(matches!(decode(b"P6\n2"), Err(PpmError::Header(_))));
        assert!(encode(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
