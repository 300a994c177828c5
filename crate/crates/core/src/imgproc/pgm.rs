//! Binary PGM (P5) reader/writer with `# key=value` header comments.
//!
//! Files written here always use maxval 65535 (16-bit big-endian samples) and
//! a fixed header layout, so `save(load(f)) == f` byte for byte for any file
//! this module produced. Recognized keys: `pitch_nm`, `exposure_s`, `mode`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::image::{Image, ImageMeta, DEFAULT_PIXEL_PITCH_NM};
use crate::error::{Error, Result};
use crate::io::write_atomic;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    pitch: Option<f64>,
    meta: ImageMeta,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("missing P5 magic number".into()));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    let mut pitch = None;
    let mut meta = ImageMeta::default();

    while fields.len() < 3 {
        match bytes.get(pos) {
            None => return Err(Error::Format("header ends before maxval".into())),
            Some(b'#') => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map(|i| pos + i)
                    .ok_or_else(|| Error::Format("unterminated header comment".into()))?;
                let text = std::str::from_utf8(&bytes[pos + 1..end])
                    .map_err(|_| Error::Format("header comment is not UTF-8".into()))?;
                if let Some((key, value)) = text.trim().split_once('=') {
                    let value = value.trim();
                    match key.trim() {
                        "pitch_nm" => {
                            pitch = Some(value.parse::<f64>().map_err(|_| {
                                Error::Format(format!("bad pitch_nm value `{value}`"))
                            })?)
                        }
                        "exposure_s" => {
                            meta.exposure_s = Some(value.parse::<f64>().map_err(|_| {
                                Error::Format(format!("bad exposure_s value `{value}`"))
                            })?)
                        }
                        "mode" => meta.mode = Some(value.to_string()),
                        _ => {}
                    }
                }
                pos = end + 1;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                    pos += 1;
                }
                let token = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
                let value: u64 = token
                    .parse()
                    .map_err(|_| Error::Format(format!("header number `{token}` out of range")))?;
                fields.push(value);
            }
            Some(&b) => {
                return Err(Error::Format(format!(
                    "unexpected byte 0x{b:02x} in header at offset {pos}"
                )))
            }
        }
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }

    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("invalid dimensions {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("invalid maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u32,
        pitch,
        meta,
        data_offset: pos,
    })
}

/// Decodes an in-memory PGM file.
pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Image> {
    let h = parse_header(bytes)?;
    let bytes_per_sample = if h.maxval < 256 { 1 } else { 2 };
    let n = h.width * h.height;
    let payload = &bytes[h.data_offset..];
    if payload.len() < n * bytes_per_sample {
        return Err(Error::io(
            origin,
            io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!(
                    "raster truncated: expected {} bytes, found {}",
                    n * bytes_per_sample,
                    payload.len()
                ),
            ),
        ));
    }
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let v = if bytes_per_sample == 1 {
            payload[i] as u32
        } else {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32
        };
        if v > h.maxval {
            return Err(Error::Format(format!(
                "sample {v} at index {i} exceeds maxval {}",
                h.maxval
            )));
        }
        counts.push(v as f64);
    }
    let pitch = h.pitch.unwrap_or(DEFAULT_PIXEL_PITCH_NM);
    Ok(Image::new(h.width, h.height, counts, pitch)?.with_meta(h.meta))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Encodes an image; counts are rounded to the nearest integer and clamped to 0..=65535.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 2 * img.counts().len());
    out.extend_from_slice(b"P5\n");
    let _ = writeln!(out, "# pitch_nm={}", img.pixel_pitch());
    if let Some(e) = img.meta.exposure_s {
        let _ = writeln!(out, "# exposure_s={e}");
    }
    if let Some(m) = &img.meta.mode {
        let _ = writeln!(out, "# mode={}", m.replace('\n', " "));
    }
    let _ = write!(out, "{} {}\n65535\n", img.width(), img.height());
    for &c in img.counts() {
        let v = c.round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(bytes: &[u8]) -> Result<Image> {
        decode_pgm(bytes, Path::new("mem.pgm"))
    }

    #[test]
    fn reads_two_by_two() {
        let mut f = b"P5\n2 2\n65535\n".to_vec();
        for v in [0u16, 1, 2, 3] {
            f.extend_from_slice(&v.to_be_bytes());
        }
        let img = p(&f).unwrap();
        assert_eq!(img.counts(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(img.row(1), &[2.0, 3.0]);
        assert_eq!(img.pixel_pitch(), 59.0);
    }

    #[test]
    fn reads_metadata_comments() {
        let mut f = b"P5\n# pitch_nm=61.5\n# mode=doped-markers\n# exposure_s=1\n1 1\n65535\n".to_vec();
        f.extend_from_slice(&[0, 7]);
        let img = p(&f).unwrap();
        assert_eq!(img.pixel_pitch(), 61.5);
        assert_eq!(img.meta.mode.as_deref(), Some("doped-markers"));
        assert_eq!(img.meta.exposure_s, Some(1.0));
        assert_eq!(img.get(0, 0), 7.0);
    }

    #[test]
    fn eight_bit_payload() {
        let f = b"P5 2 1 255\n\x05\x09".to_vec();
        assert_eq!(p(&f).unwrap().counts(), &[5.0, 9.0]);
    }

    #[test]
    fn malformed_header_is_format_error() {
        assert!(matches!(p(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(p(b"P5\n1 x\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(p(b"P5\n0 1\n255\n"), Err(Error::Format(_))));
        assert!(matches!(p(b"P5\n1 1\n70000\n00"), Err(Error::Format(_))));
        assert!(matches!(p(b"P5\n# pitch_nm=abc\n1 1\n255\n0"), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let f = b"P5\n2 2\n65535\n\x00\x01\x00".to_vec();
        assert!(matches!(p(&f), Err(Error::Io { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Image::new(3, 2, vec![0.0, 1.0, 65535.0, 4.0, 5.0, 6.0], 47.25).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.counts(), img.counts());
        assert_eq!(back.pixel_pitch(), 47.25);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_identical(
            w in 1usize..40,
            h in 1usize..40,
            seed in any::<u64>(),
            pitch in 1.0f64..500.0,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::rng_from_seed(seed);
            let counts: Vec<f64> = (0..w * h).map(|_| rng.random_range(0..=65535u32) as f64).collect();
            let img = Image::new(w, h, counts, pitch).unwrap();
            let bytes = encode_pgm(&img);
            let back = p(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_pgm(&back), bytes);
        }
    }
}
