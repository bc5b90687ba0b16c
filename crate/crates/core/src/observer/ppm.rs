//! Binary PPM (P6) output for tiled images — no image library needed, and
//! the byte layout is simple enough to assert exactly in tests.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::observer::tiles::Image;

/// Serializes an image as binary PPM: `P6\n<w> <h>\n255\n` then raw RGB.
pub fn ppm_bytes(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + image.rgb.len());
    write!(out, "P6\n{} {}\n255\n", image.width, image.height).expect("vec write");
    out.extend_from_slice(&image.rgb);
    out
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ppm_bytes(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_layout() {
        let image = Image {
            width: 2,
            height: 1,
            rgb: vec![1, 2, 3, 4, 5, 6],
        };
        let bytes = ppm_bytes(&image);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/i.ppm");
        let image = Image {
            width: 1,
            height: 1,
            rgb: vec![9, 8, 7],
        };
        write_ppm(&path, &image).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), ppm_bytes(&image));
    }
}
