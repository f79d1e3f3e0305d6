use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::imageio::quantize;
use super::{Attributes, CaptionedSample, Grammar};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;

const SUPERSAMPLE: usize = 4;
const MIN_RADIUS: f32 = 13.0;
const MAX_RADIUS: f32 = 22.0;
const CENTER_SCALE: f32 = 0.45;
const MASK_RANGE: (f64, f64) = (0.05, 0.6);

/// Point-in-shape test in coordinates normalised by the shape radius.
fn inside(shape: &str, u: f32, v: f32) -> bool {
    match shape {
        "circle" => u * u + v * v <= 1.0,
        "square" => u.abs() <= 0.8 && v.abs() <= 0.8,
        "triangle" => v <= 0.5 && v >= -1.0 + 3f32.sqrt() * u.abs(),
        "diamond" => u.abs() + v.abs() <= 1.0,
        // unknown shapes are rejected by Grammar::validate; fall back to a disc
        _ => u * u + v * v <= 1.0,
    }
}

/// Rasterises one sample with supersampled anti-aliasing.
///
/// The mask marks every pixel the object touches at all, so pixels outside
/// it carry the pure background colour.
pub fn render_sample(grammar: &Grammar, attributes: &Attributes, seed: u64) -> Result<CaptionedSample> {
    grammar.validate(attributes)?;
    let fg = grammar.color_rgb(&attributes.color).unwrap_or_default();
    let bg = grammar.background_rgb(&attributes.background).unwrap_or_default();
    let inner = attributes.color2.as_deref().and_then(|c| grammar.color_rgb(c));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = IMAGE_SIZE;
    for _ in 0..100 {
        let r = rng.random_range(MIN_RADIUS..MAX_RADIUS);
        let lo = r + 1.0;
        let hi = n as f32 - r - 1.0;
        let cx = rng.random_range(lo..hi);
        let cy = rng.random_range(lo..hi);
        let mut image = vec![0.0f32; 3 * n * n];
        let mut mask = vec![0.0f32; n * n];
        let ss = SUPERSAMPLE as f32;
        for y in 0..n {
            for x in 0..n {
                let mut cov_obj = 0usize;
                let mut cov_in = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f32 + (sx as f32 + 0.5) / ss;
                        let py = y as f32 + (sy as f32 + 0.5) / ss;
                        let (u, v) = ((px - cx) / r, (py - cy) / r);
                        if inside(&attributes.shape, u, v) {
                            cov_obj += 1;
                            if inner.is_some() && inside(&attributes.shape, u / CENTER_SCALE, v / CENTER_SCALE) {
                                cov_in += 1;
                            }
                        }
                    }
                }
                let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
                let a_obj = (cov_obj - cov_in) as f32 / total;
                let a_in = cov_in as f32 / total;
                let a_bg = 1.0 - cov_obj as f32 / total;
                let c2 = inner.unwrap_or(fg);
                for ch in 0..3 {
                    image[(ch * n + y) * n + x] = if cov_obj == 0 {
                        bg[ch]
                    } else {
                        bg[ch] * a_bg + fg[ch] * a_obj + c2[ch] * a_in
                    };
                }
                if cov_obj > 0 {
                    mask[y * n + x] = 1.0;
                }
            }
        }
        let mask = Tensor::new(&[1, n, n], mask)?;
        let frac = mask.mean();
        if frac < MASK_RANGE.0 || frac > MASK_RANGE.1 {
            continue;
        }
        let image = quantize(&Tensor::new(&[3, n, n], image)?);
        return Ok(CaptionedSample {
            id: format!("s{seed:016x}"),
            image,
            mask,
            tokens: attributes.caption(),
            attributes: attributes.clone(),
        });
    }
    Err(Error::Config(format!(
        "could not place a {} with mask fraction in range",
        attributes.shape
    )))
}

/// Pure background render, for mask-consistency checks.
pub(crate) fn background_image(grammar: &Grammar, background: &str) -> Option<Tensor> {
    let bg = grammar.background_rgb(background)?;
    let n = IMAGE_SIZE;
    Some(quantize(&Tensor::from_fn(&[3, n, n], |i| bg[i / (n * n)])))
}
