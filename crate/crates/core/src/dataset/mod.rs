//! Procedural captioned-shapes corpus.
//!
//! Every sample is a single flat-coloured shape on a flat background,
//! optionally with a differently coloured centre, together with its exact
//! object mask and a templated caption. The masks make "edit the object,
//! keep the rest" a measurable property.

pub mod imageio;
mod manifest;
mod render;

pub use manifest::{load_manifest, make_dataset, Dataset, ManifestRecord, Split, MANIFEST_FILE, VOCAB_FILE};
pub use render::{render_sample, IMAGE_SIZE};

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Object colours and their RGB anchors.
pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("purple", [0.60, 0.20, 0.75]),
    ("orange", [0.95, 0.50, 0.05]),
];

pub const BACKGROUNDS: [(&str, [f32; 3]); 4] = [
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.50, 0.50, 0.50]),
    ("brown", [0.45, 0.30, 0.15]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "diamond"];

/// Words of the caption templates that are not attribute values.
pub const TEMPLATE_WORDS: [&str; 5] = ["a", "background", "center", "on", "with"];

/// The finite attribute sets captions are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub shapes: Vec<String>,
    pub colors: Vec<(String, [f32; 3])>,
    pub backgrounds: Vec<(String, [f32; 3])>,
    /// Probability that a sampled record has a second-part colour.
    pub two_part_prob: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
            colors: COLORS.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            backgrounds: BACKGROUNDS.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            two_part_prob: 0.3,
        }
    }
}

impl Grammar {
    pub fn color_rgb(&self, name: &str) -> Option<[f32; 3]> {
        self.colors.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn background_rgb(&self, name: &str) -> Option<[f32; 3]> {
        self.backgrounds.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn shape_index(&self, name: &str) -> Option<usize> {
        self.shapes.iter().position(|s| s == name)
    }

    pub fn validate(&self, a: &Attributes) -> Result<()> {
        if self.shape_index(&a.shape).is_none() {
            return Err(config_err!("unknown shape {:?}", a.shape));
        }
        if self.color_rgb(&a.color).is_none() {
            return Err(config_err!("unknown colour {:?}", a.color));
        }
        if self.background_rgb(&a.background).is_none() {
            return Err(config_err!("unknown background {:?}", a.background));
        }
        if let Some(c2) = &a.color2 {
            if self.color_rgb(c2).is_none() {
                return Err(config_err!("unknown colour {c2:?}"));
            }
            if *c2 == a.color {
                return Err(config_err!("second-part colour equals the object colour"));
            }
        }
        Ok(())
    }

    pub fn sample_attributes<R: Rng + ?Sized>(&self, rng: &mut R) -> Attributes {
        let shape = self.shapes[rng.random_range(0..self.shapes.len())].clone();
        let ci = rng.random_range(0..self.colors.len());
        let background = self.backgrounds[rng.random_range(0..self.backgrounds.len())].0.clone();
        let color2 = if self.colors.len() > 1 && rng.random_bool(self.two_part_prob) {
            let mut cj = rng.random_range(0..self.colors.len() - 1);
            if cj >= ci {
                cj += 1;
            }
            Some(self.colors[cj].0.clone())
        } else {
            None
        };
        Attributes {
            shape,
            color: self.colors[ci].0.clone(),
            background,
            color2,
        }
    }

    /// One caption per attribute combination; enumerates every terminal.
    pub fn all_captions(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for shape in &self.shapes {
            for (color, _) in &self.colors {
                for (bg, _) in &self.backgrounds {
                    let base = Attributes {
                        shape: shape.clone(),
                        color: color.clone(),
                        background: bg.clone(),
                        color2: None,
                    };
                    out.push(base.caption());
                    for (c2, _) in self.colors.iter().filter(|(c, _)| c != color) {
                        out.push(
                            Attributes {
                                color2: Some(c2.clone()),
                                ..base.clone()
                            }
                            .caption(),
                        );
                    }
                }
            }
        }
        out
    }
}

/// Attribute record of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub shape: String,
    pub color: String,
    pub background: String,
    pub color2: Option<String>,
}

impl Attributes {
    /// `a <color> <shape> [with a <color2> center] on a <bg> background`
    pub fn caption(&self) -> Vec<String> {
        let mut words = vec!["a", &self.color, &self.shape];
        if let Some(c2) = &self.color2 {
            words.extend(["with", "a", c2, "center"]);
        }
        words.extend(["on", "a", &self.background, "background"]);
        words.into_iter().map(str::to_string).collect()
    }

    pub fn parse_caption<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let t: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        let bad = || Error::Load(format!("caption does not follow the template: {:?}", t.join(" ")));
        match t.as_slice() {
            ["a", color, shape, "on", "a", bg, "background"] => Ok(Self {
                shape: shape.to_string(),
                color: color.to_string(),
                background: bg.to_string(),
                color2: None,
            }),
            ["a", color, shape, "with", "a", c2, "center", "on", "a", bg, "background"] => Ok(Self {
                shape: shape.to_string(),
                color: color.to_string(),
                background: bg.to_string(),
                color2: Some(c2.to_string()),
            }),
            _ => Err(bad()),
        }
    }
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedSample {
    pub id: String,
    /// `[3, 64, 64]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, 64, 64]`, 1 inside the object.
    pub mask: Tensor,
    pub tokens: Vec<String>,
    pub attributes: Attributes,
}

impl CaptionedSample {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeField {
    Color,
    Background,
    Color2,
}

/// Which attributes a mismatch may alter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MismatchKind {
    /// Any non-empty subset of the mutable colour attributes.
    #[default]
    Any,
    /// Only the object colour.
    ObjectColor,
}

/// A sample paired with a caption that deliberately disagrees with it.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchedPair {
    pub sample: CaptionedSample,
    pub new_tokens: Vec<String>,
    pub new_attributes: Attributes,
    pub changed: Vec<AttributeField>,
}

fn alternatives<'a>(values: &'a [(String, [f32; 3])], exclude: &[&str]) -> Vec<&'a str> {
    values
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| !exclude.contains(n))
        .collect()
}

/// Resamples at least one mutable colour attribute to a different value and
/// rebuilds the caption. Shape never changes.
pub fn sample_mismatch<R: Rng + ?Sized>(
    grammar: &Grammar,
    sample: &CaptionedSample,
    kind: MismatchKind,
    rng: &mut R,
) -> Result<MismatchedPair> {
    let a = &sample.attributes;
    let mut fields = Vec::new();
    let color_excl: Vec<&str> = std::iter::once(a.color.as_str()).chain(a.color2.as_deref()).collect();
    if !alternatives(&grammar.colors, &color_excl).is_empty() {
        fields.push(AttributeField::Color);
    }
    if kind == MismatchKind::Any {
        if grammar.backgrounds.len() > 1 {
            fields.push(AttributeField::Background);
        }
        if a.color2.is_some() && !alternatives(&grammar.colors, &color_excl).is_empty() {
            fields.push(AttributeField::Color2);
        }
    }
    if fields.is_empty() {
        return Err(config_err!("sample {} has no mutable attribute under this grammar", sample.id));
    }
    let mut chosen: Vec<AttributeField> = fields.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(fields[rng.random_range(0..fields.len())]);
    }
    let mut new = a.clone();
    let mut changed = Vec::new();
    for f in chosen {
        match f {
            AttributeField::Color => {
                let excl: Vec<&str> = std::iter::once(a.color.as_str()).chain(new.color2.as_deref()).collect();
                let opts = alternatives(&grammar.colors, &excl);
                if opts.is_empty() {
                    continue;
                }
                new.color = opts[rng.random_range(0..opts.len())].to_string();
            }
            AttributeField::Background => {
                let opts = alternatives(&grammar.backgrounds, &[a.background.as_str()]);
                new.background = opts[rng.random_range(0..opts.len())].to_string();
            }
            AttributeField::Color2 => {
                let old = a.color2.as_deref().unwrap_or_default();
                let opts = alternatives(&grammar.colors, &[old, new.color.as_str()]);
                if opts.is_empty() {
                    continue;
                }
                new.color2 = Some(opts[rng.random_range(0..opts.len())].to_string());
            }
        }
        changed.push(f);
    }
    if changed.is_empty() {
        return Err(config_err!("could not mutate sample {}", sample.id));
    }
    Ok(MismatchedPair {
        sample: sample.clone(),
        new_tokens: new.caption(),
        new_attributes: new,
        changed,
    })
}

#[cfg(test)]
mod tests;
