//! 8-bit PNG reading and writing for `[C, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes a `[0, 1]` value to the nearest 8-bit level.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Snaps every value onto the 8-bit grid, so PNG round trips are exact.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| from_byte(to_byte(v)))
}

/// Writes a 1- or 3-channel tensor as grayscale or RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("cannot write image of shape {s:?}"))),
    };
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut bytes = Vec::with_capacity(c * h * w);
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(to_byte(d[(ch * h + y) * w + x]));
            }
        }
    }
    let io_err = |e: png::EncodingError| Error::storage(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&bytes).map_err(io_err)?;
    writer.finish().map_err(io_err)?;
    Ok(())
}

/// Reads an 8-bit PNG into `[C, H, W]` with C = 1 (grayscale) or 3 (RGB).
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let bad = |msg: String| Error::Load(format!("{}: {msg}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad("only 8-bit images are supported".into()));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let out_c = c.min(3);
    let mut data = vec![0.0f32; out_c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..out_c {
                data[(ch * h + y) * w + x] = from_byte(buf[y * info.line_size + x * c + ch]);
            }
        }
    }
    Tensor::new(&[out_c, h, w], data)
}

/// Places equally sized `[3, H, W]` tiles left to right.
pub fn hstack(tiles: &[Tensor]) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::Dimension("empty grid".into()))?;
    let (c, h, w) = match first.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("bad tile shape {s:?}"))),
    };
    let n = tiles.len();
    let mut data = vec![0.0f32; c * h * w * n];
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(Error::Dimension("grid tiles differ in shape".into()));
        }
        for ch in 0..c {
            for y in 0..h {
                let src = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let off = (ch * h + y) * w * n + i * w;
                data[off..off + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[c, h, w * n], data)
}

/// Nearest-neighbour resize by an integer factor.
pub fn upscale(t: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (h2, w2) = (h * factor, w * factor);
    let d = t.data();
    Tensor::from_fn(&[c, h2, w2], |i| {
        let ch = i / (h2 * w2);
        let y = (i / w2) % h2;
        let x = i % w2;
        d[(ch * h + y / factor) * w + x / factor]
    })
}
