//! Binary PPM (P6, RGB) and PGM (P5, gray) images with maxval 255.
//!
//! Pixels load as `[H, W, ch]` tensors scaled to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header_tokens(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("image header is truncated".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, i + 1))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (tok, offset) = header_tokens(bytes)?;
    let channels = match tok[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Format(format!("unsupported image magic '{other}' (expected P5 or P6)"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad image header field '{s}'")));
    let (w, h, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    let n = w * h * channels;
    let raster = bytes.get(offset..offset + n).ok_or_else(|| Error::Format("image raster is truncated".into()))?;
    Tensor::from_vec(&[h, w, channels], raster.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w, ch] = image.shape() else {
        return Err(Error::invalid("encode_pnm", format!("expected [H, W, ch], got {:?}", image.shape())));
    };
    let magic = match ch {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::invalid("encode_pnm", format!("{ch} channels (expected 1 or 3)"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_the_8_bit_grid() {
        for ch in [1, 3] {
            let data: Vec<f32> = (0..2 * 3 * ch).map(|i| (i * 37 % 256) as f32 / 255.0).collect();
            let img = Tensor::from_vec(&[2, 3, ch], data).unwrap();
            assert_eq!(decode_pnm(&encode_pnm(&img).unwrap()).unwrap(), img);
        }
    }

    #[test]
    fn comments_are_skipped_and_bad_headers_rejected() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[0.0, 1.0]);
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
