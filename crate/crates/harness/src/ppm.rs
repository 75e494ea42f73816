//! Binary PPM (P6, 8-bit) for `[3, H, W]` images in `[0, 1]`.

use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context};

use mcl_core::Tensor;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &Tensor<f32>) -> anyhow::Result<Vec<u8>> {
    ensure!(img.ndim() == 3 && img.dim(0) == 3, "PPM wants [3, H, W], got {:?}", img.shape());
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn write(path: &Path, img: &Tensor<f32>) -> anyhow::Result<()> {
    let bytes = encode(img)?;
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut f = BufWriter::new(f);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> anyhow::Result<Tensor<f32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn decode(bytes: &[u8]) -> anyhow::Result<Tensor<f32>> {
    // header: magic, width, height, maxval separated by whitespace, with
    // `#` comments running to end of line; one whitespace byte before the
    // raster
    let mut pos = 0;
    let mut fields = vec![];
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PPM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" {
        bail!("not a binary PPM (magic {:?})", fields[0]);
    }
    let w: usize = fields[1].parse()?;
    let h: usize = fields[2].parse()?;
    let maxval: usize = fields[3].parse()?;
    ensure!((1..=255).contains(&maxval), "only 8-bit PPM is supported (maxval {maxval})");
    let raster = bytes.get(pos..pos + 3 * h * w).context("PPM raster shorter than its header says")?;
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / maxval as f32;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i as f32 * 0.37).sin().abs());
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P6\n4 4\n255\n\x00").is_err());
    }
}
