//! Binary PGM (`P5`, maxval 255) decoding and encoding.

use crate::error::{Error, Result};

/// Grayscale image with pixels scaled to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != pixels.len() {
            return Err(Error::Data(format!(
                "image {width}x{height} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Pgm {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Pgm {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(r.err("truncated magic number"));
    }
    match &bytes[..2] {
        b"P5" => {}
        [b'P', b'1'..=b'7'] => return Err(r.err("unsupported PGM variant")),
        _ => return Err(r.err("not a PGM file")),
    }
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(r.err("image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(r.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.err("expected whitespace after maxval")),
    }
    let n = width * height;
    let data = &bytes[r.pos..];
    if data.len() < n {
        return Err(Error::Pgm {
            offset: bytes.len(),
            message: format!("truncated pixel data: need {n} bytes, found {}", data.len()),
        });
    }
    let pixels = data[..n].iter().map(|&b| b as f64 / 255.0).collect();
    GrayImage::new(width, height, pixels)
}

/// Encodes as `P5` with a minimal header; pixels are rounded to 8 bits.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_small_image() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn tolerates_header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 # width\n1\n255\n".to_vec();
        bytes.extend([10u8, 20]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![10.0 / 255.0, 20.0 / 255.0]);
    }

    #[test]
    fn rejects_variants_and_bad_headers() {
        let err = parse_pgm(b"P2 2 2 255\n0 0 0 0").unwrap_err().to_string();
        assert!(err.contains("unsupported PGM variant"), "{err}");
        assert!(parse_pgm(b"GIF89a").is_err());
        let err = parse_pgm(b"P5 2 2 65535\n").unwrap_err();
        assert!(matches!(err, Error::Pgm { .. }));
        let err = parse_pgm(b"P5 2 2 255\n\x01\x02").unwrap_err();
        match err {
            Error::Pgm { offset, message } => {
                assert_eq!(offset, 13);
                assert!(message.contains("truncated"));
            }
            e => panic!("{e}"),
        }
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let raw: Vec<u8> = (0..w * h)
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 56) as u8)
                .collect();
            let mut file = format!("P5\n{w} {h}\n255\n").into_bytes();
            file.extend(&raw);
            let img = parse_pgm(&file).unwrap();
            prop_assert_eq!(encode_pgm(&img), file);
        }
    }
}
