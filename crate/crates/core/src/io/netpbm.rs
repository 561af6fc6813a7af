//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Frame;

/// Decodes a P6 (3 channels) or P5 (1 channel) image. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Frame> {
    let err = |offset: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    if bytes.len() < 2 {
        return Err(err(0, "missing magic number".into()));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => return Err(err(0, format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // Whitespace and comments before each header field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields[i] = text.parse().map_err(|_| err(start, format!("{name} {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace byte after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    if width == 0 || height == 0 {
        return Err(err(2, format!("empty {width}x{height} image")));
    }
    let need = width as usize * height as usize * channels;
    let have = bytes.len() - pos;
    if have < need {
        return Err(err(bytes.len(), format!("pixel payload has {have} bytes, expected {need}")));
    }
    if have > need {
        return Err(err(pos + need, format!("{} trailing bytes after pixel payload", have - need)));
    }
    Frame::new(width as usize, height as usize, channels, bytes[pos..].to_vec())
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>> {
    let magic = match frame.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::contract(format!("cannot write a {c}-channel netpbm image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    Ok(out)
}

pub fn read(path: &Path) -> Result<Frame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, frame: &Frame) -> Result<()> {
    std::fs::write(path, encode(frame)?).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("x.ppm")
    }

    #[test]
    fn parses_header_with_comments() {
        let mut bytes = b"P5 # gray\n# size next\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let f = decode(&bytes, p()).unwrap();
        assert_eq!((f.width, f.height, f.channels), (2, 1, 1));
        assert_eq!(f.data, vec![7, 9]);
    }

    #[test]
    fn distinct_errors() {
        let deep = b"P6\n1 1\n65535\n\0\0\0\0\0\0";
        assert!(matches!(decode(deep, p()), Err(Error::UnsupportedMaxval { maxval: 65535, .. })));
        let short = b"P6\n2 2\n255\n\0\0\0";
        match decode(short, p()) {
            Err(Error::Parse { offset, detail, .. }) => {
                assert_eq!(offset, short.len());
                assert!(detail.contains("payload"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"P3\n1 1\n255\n", p()), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode(b"P6\n1 x\n255\n", p()), Err(Error::Parse { offset: 5, .. })));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..6, h in 1usize..6, gray in any::<bool>(), seed in any::<u8>()) {
            let c = if gray { 1 } else { 3 };
            let data: Vec<u8> = (0..w * h * c).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let f = Frame::new(w, h, c, data).unwrap();
            prop_assert_eq!(decode(&encode(&f).unwrap(), p()).unwrap(), f);
        }
    }
}
