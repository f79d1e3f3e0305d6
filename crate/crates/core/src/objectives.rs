//! Training losses.
//!
//! Pixel-space terms take images already mapped to `[0, 1]` (see
//! [`to_unit`]). Discriminator outputs are handled as logits, so
//! `-log D = softplus(-l)` and `-log(1 - D) = softplus(l)`.

use crate::config::LossWeights;
use crate::encoders::Encoders;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Weight of the shallow-feature term in [`rec_loss`].
pub const REC_FEATURE_WEIGHT: f32 = 0.1;

/// `[-1, 1]` network output to `[0, 1]` pixel space.
pub fn to_unit(g: &mut Graph, x: Var) -> Var {
    let h = g.mul_scalar(x, 0.5);
    g.add_scalar(h, 0.5)
}

/// Anti-identity regularizer `1 - mean|I' - I|`.
pub fn l_reg(g: &mut Graph, generated: Var, original: Var) -> Result<Var> {
    let d = g.sub(generated, original)?;
    let a = g.abs(d);
    let m = g.mean(a);
    Ok(g.rsub_scalar(1.0, m))
}

/// Symmetric batch-softmax matching loss over global vectors, with
/// scores `gamma * cosine`.
pub fn damsm_loss(g: &mut Graph, images: &[Var], texts: &[Var], gamma: f32) -> Result<Var> {
    let b = images.len();
    if b < 2 {
        return Err(config_err!("matching loss needs a batch of at least 2, got {b}"));
    }
    if texts.len() != b {
        return Err(dim_err!("{b} image vectors but {} text vectors", texts.len()));
    }
    let stack = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
        let mut rows = Vec::with_capacity(xs.len());
        for &x in xs {
            let n = g.normalize(x)?;
            let d = g.value(n).numel();
            rows.push(g.reshape(n, &[1, d])?);
        }
        g.concat(&rows)
    };
    let iv = stack(g, images)?;
    let tv = stack(g, texts)?;
    if g.shape(iv) != g.shape(tv) {
        return Err(dim_err!("image and text vectors differ in width"));
    }
    let cos = g.matmul_t(iv, tv, false, true)?;
    let scores = g.mul_scalar(cos, gamma);
    let eye = g.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { 1.0 } else { 0.0 }));
    let lp_text = g.log_softmax_rows(scores)?;
    let st = g.transpose(scores)?;
    let lp_image = g.log_softmax_rows(st)?;
    let both = g.add(lp_text, lp_image)?;
    let diag = g.mul(both, eye)?;
    let s = g.sum(diag);
    Ok(g.mul_scalar(s, -1.0 / b as f32))
}

/// Mean over words of the cosine between each word and the region
/// features pooled by that word's attention. Both inputs are already in a
/// shared space: `regions [N, d]`, `words [L, d]`.
pub fn corre_core(g: &mut Graph, regions: Var, words: Var) -> Result<Var> {
    let scores = g.matmul_t(words, regions, false, true)?;
    let alpha = g.softmax_rows(scores)?;
    let pooled = g.matmul(alpha, regions)?;
    let pw = g.mul(pooled, words)?;
    let dot = g.mean_axis(pw, 1)?;
    let pp = g.square(pooled);
    let np = g.mean_axis(pp, 1)?;
    let ww = g.square(words);
    let nw = g.mean_axis(ww, 1)?;
    let prod = g.mul(np, nw)?;
    let prod = g.add_scalar(prod, 1e-12);
    let denom = g.sqrt(prod);
    let cos = g.div(dot, denom)?;
    Ok(g.mean(cos))
}

/// Word/region correspondence of regional features `[C_r, h, w]` and word
/// features `[L, d_text]`, in `[-1, 1]`.
pub fn corre_loss(g: &mut Graph, store: &ParamStore, enc: &Encoders, regional: Var, words: Var) -> Result<Var> {
    let r = enc.project_regions(g, store, regional)?;
    let w = enc.project_words(g, store, words)?;
    corre_core(g, r, w)
}

/// `mean|I' - I| + 0.1 * mean((f(I') - f(I))^2)` with `f` the shallow
/// features.
pub fn rec_loss(g: &mut Graph, generated: Var, original: Var, gen_features: Var, orig_features: Var) -> Result<Var> {
    let d = g.sub(generated, original)?;
    let a = g.abs(d);
    let pix = g.mean(a);
    let fd = g.sub(gen_features, orig_features)?;
    let sq = g.square(fd);
    let feat = g.mean(sq);
    let feat = g.mul_scalar(feat, REC_FEATURE_WEIGHT);
    g.add(pix, feat)
}

/// Discriminator logits for a batch of images at one resolution.
#[derive(Debug, Clone, Copy)]
pub struct StageLogits {
    pub uncond: Var,
    pub cond: Var,
}

/// `-1/2 log D(x) - 1/2 log D(x, S)` averaged over the batch.
pub fn generator_adversarial(g: &mut Graph, l: StageLogits) -> Var {
    let half_nll = |g: &mut Graph, x: Var| {
        let n = g.neg(x);
        let sp = g.softplus(n);
        let m = g.mean(sp);
        g.mul_scalar(m, 0.5)
    };
    let u = half_nll(g, l.uncond);
    let c = half_nll(g, l.cond);
    g.add(u, c).expect("scalar add")
}

/// Components of the generator objective. Absent terms are skipped.
#[derive(Debug, Clone, Default)]
pub struct GeneratorTerms {
    /// One entry per produced image resolution.
    pub adversarial: Vec<StageLogits>,
    pub damsm: Option<Var>,
    pub corre: Option<Var>,
    pub rec: Option<Var>,
    pub reg: Option<Var>,
}

/// Values of the individual terms of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(String, f32)>,
    pub total: f32,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f32> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some((name, v)) = self.terms.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what} term {name} is {v}")));
        }
        if !self.total.is_finite() {
            return Err(Error::Numeric(format!("{what} total is {}", self.total)));
        }
        Ok(())
    }
}

/// `sum_i adv_i + l2 * damsm + l3 * (1 - corre) + l4 * rec + l1 * reg`.
pub fn generator_loss(g: &mut Graph, t: &GeneratorTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    if t.adversarial.is_empty() {
        return Err(config_err!("generator loss needs at least one discriminator"));
    }
    let mut terms = Vec::new();
    let mut total: Option<Var> = None;
    let mut acc = |g: &mut Graph, v: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
        Ok(())
    };
    for (i, &l) in t.adversarial.iter().enumerate() {
        let a = generator_adversarial(g, l);
        terms.push((format!("adv{i}"), g.value(a).item()));
        acc(g, a)?;
    }
    if let Some(d) = t.damsm {
        terms.push(("damsm".to_string(), g.value(d).item()));
        let v = g.mul_scalar(d, w.lambda2);
        acc(g, v)?;
    }
    if let Some(c) = t.corre {
        terms.push(("corre".to_string(), g.value(c).item()));
        let one_minus = g.rsub_scalar(1.0, c);
        let v = g.mul_scalar(one_minus, w.lambda3);
        acc(g, v)?;
    }
    if let Some(r) = t.rec {
        terms.push(("rec".to_string(), g.value(r).item()));
        let v = g.mul_scalar(r, w.lambda4);
        acc(g, v)?;
    }
    if let Some(r) = t.reg {
        terms.push(("reg".to_string(), g.value(r).item()));
        let v = g.mul_scalar(r, w.lambda1);
        acc(g, v)?;
    }
    let total = total.ok_or_else(|| config_err!("empty generator loss"))?;
    let report = LossReport {
        terms,
        total: g.value(total).item(),
    };
    report.ensure_finite("generator loss")?;
    Ok((total, report))
}

/// `-1/2[log D(I) + log(1 - D(I'))] - 1/2[log D(I,S) + log(1 - D(I',S))]
/// + l3 * ((1 - corre(I,S)) + corre(I,S'))`, batch-averaged.
pub fn discriminator_loss(
    g: &mut Graph,
    real: StageLogits,
    fake: StageLogits,
    corre_matched: Var,
    corre_mismatched: Var,
    lambda3: f32,
) -> Result<(Var, LossReport)> {
    if g.shape(real.uncond) != g.shape(fake.uncond) || g.shape(real.cond) != g.shape(fake.cond) {
        return Err(dim_err!("real and fake logits differ in shape"));
    }
    let term = |g: &mut Graph, x: Var, negate: bool| {
        let x = if negate { g.neg(x) } else { x };
        let sp = g.softplus(x);
        g.mean(sp)
    };
    let a = term(g, real.uncond, true);
    let b = term(g, fake.uncond, false);
    let c = term(g, real.cond, true);
    let d = term(g, fake.cond, false);
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    let adv = g.add(ab, cd)?;
    let adv = g.mul_scalar(adv, 0.5);
    let one_minus = g.rsub_scalar(1.0, corre_matched);
    let cs = g.add(one_minus, corre_mismatched)?;
    let cs = g.mul_scalar(cs, lambda3);
    let total = g.add(adv, cs)?;
    let report = LossReport {
        terms: vec![
            ("adv".to_string(), g.value(adv).item()),
            ("corre_matched".to_string(), g.value(corre_matched).item()),
            ("corre_mismatched".to_string(), g.value(corre_mismatched).item()),
        ],
        total: g.value(total).item(),
    };
    report.ensure_finite("discriminator loss")?;
    Ok((total, report))
}

#[cfg(test)]
mod tests;
