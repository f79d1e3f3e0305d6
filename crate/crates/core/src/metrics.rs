//! Evaluation: pixel difference, text-image similarity, manipulative
//! precision and a classifier-based inception score.
//!
//! All image arguments are `[3, H, W]` in `[0, 1]`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::dataset::imageio::upscale;
use crate::dataset::{sample_mismatch, CaptionedSample, Grammar, MismatchKind, MismatchedPair};
use crate::encoders::{batches, fit_resolution, he_init, to_net, Encoders};
use crate::error::{config_err, dim_err, Error, Result};
use crate::networks::{Model, NoiseVector};
use crate::optim::Adam;
use crate::tensor::{ConvSpec, Graph, LinearSpec, ParamId, ParamStore, Tensor, Var};
use crate::text::Vocabulary;

pub const CLASSIFIER_PREFIX: &str = "classifier/";

/// Mean absolute difference over every entry.
pub fn pixel_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err!("pixel_diff: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(dim_err!("pixel_diff on empty images"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(s / a.numel() as f64)
}

/// Mean absolute difference inside and outside a `[1, H, W]` mask.
/// Either side is `None` when the mask leaves it empty.
pub fn masked_pixel_diff(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<(Option<f64>, Option<f64>)> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(dim_err!("masked_pixel_diff: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if mask.shape() != [1, h, w] {
        return Err(dim_err!("mask {:?} does not cover a {h}x{w} image", mask.shape()));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for ch in 0..c {
        for p in 0..h * w {
            let d = (a.data()[ch * h * w + p] - b.data()[ch * h * w + p]).abs() as f64;
            if mask.data()[p] > 0.5 {
                si += d;
                ni += 1;
            } else {
                so += d;
                no += 1;
            }
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok((avg(si, ni), avg(so, no)))
}

/// Cosine of two vectors; a zero-norm input is a numeric error.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(dim_err!("cosine of {} and {} entries", a.numel(), b.numel()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine between the global vectors of an image and a caption.
pub fn text_image_similarity(store: &ParamStore, enc: &Encoders, image: &Tensor, tokens: &[usize]) -> Result<f64> {
    let img = to_net(&fit_resolution(image, enc.image_size)?);
    let iv = enc.match_encode_image(store, &img)?;
    let tv = enc.match_encode_text(store, tokens)?;
    cosine_similarity(&iv, &tv)
}

/// `(1 - diff) * sim`.
pub fn manipulative_precision(diff: f64, sim: f64) -> f64 {
    (1.0 - diff) * sim
}

/// `exp(mean_x KL(p(y|x) || p(y)))` from a table of class conditionals.
pub fn inception_from_conditionals(p: &[Vec<f64>]) -> Result<f64> {
    if p.len() < 2 {
        return Err(config_err!("inception score needs at least 2 images, got {}", p.len()));
    }
    let k = p[0].len();
    if k == 0 || p.iter().any(|r| r.len() != k) {
        return Err(dim_err!("ragged or empty conditional table"));
    }
    let mut marginal = vec![0.0f64; k];
    for row in p {
        for (m, &v) in marginal.iter_mut().zip(row) {
            *m += v / p.len() as f64;
        }
    }
    let mut kl = 0.0f64;
    for row in p {
        for (&v, &m) in row.iter().zip(&marginal) {
            if v > 0.0 {
                kl += v * (v / m).ln();
            }
        }
    }
    let score = (kl / p.len() as f64).exp();
    Ok(score.clamp(1.0, k as f64))
}

/// Small convolutional classifier over the corpus' shape classes, used for
/// the inception-score proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClassifier {
    pub classes: usize,
    pub image_size: usize,
    convs: [ConvSpec; 3],
    fc: LinearSpec,
    trained: ParamId,
}

impl ShapeClassifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(config_err!("classifier needs at least 2 classes"));
        }
        let w = 8;
        let convs = [
            ConvSpec::new(store, "classifier/conv0", 3, w, 4, 2, 1, rng)?,
            ConvSpec::new(store, "classifier/conv1", w, 2 * w, 4, 2, 1, rng)?,
            ConvSpec::new(store, "classifier/conv2", 2 * w, 4 * w, 4, 2, 1, rng)?,
        ];
        for c in &convs {
            he_init(store, c, rng)?;
        }
        let fc = LinearSpec::new(store, "classifier/fc", 8 * w, cfg.classes, 1.0 / (8.0 * w as f32).sqrt(), rng)?;
        let trained = store.add_buffer("classifier/trained", Tensor::scalar(0.0))?;
        Ok(Self {
            classes: cfg.classes,
            image_size: cfg.image_size,
            convs,
            fc,
            trained,
        })
    }

    pub fn is_trained(&self, store: &ParamStore) -> bool {
        store.get(self.trained).item() != 0.0
    }

    /// Logits `[1, K]` of a network-space image.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let s = self.image_size;
        if g.shape(image) != [3, s, s] {
            return Err(dim_err!("classifier expects [3, {s}, {s}], got {:?}", g.shape(image)));
        }
        let mut x = image;
        for c in &self.convs {
            let y = g.conv2d(store, c, x)?;
            x = g.leaky_relu(y, 0.2);
        }
        let mean = g.spatial_mean(x)?;
        let max = g.spatial_max(x)?;
        let m = g.concat(&[mean, max])?;
        let d = g.value(m).numel();
        let row = g.reshape(m, &[1, d])?;
        g.linear(store, &self.fc, row)
    }

    /// Class probabilities of a `[0, 1]` image.
    pub fn probabilities(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let img = to_net(&fit_resolution(image, self.image_size)?);
        let mut g = Graph::new();
        let x = g.constant(img);
        let l = self.logits(&mut g, store, x)?;
        let p = g.softmax_rows(l)?;
        Ok(g.value(p).data().iter().map(|&v| v as f64).collect())
    }

    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<usize> {
        let p = self.probabilities(store, image)?;
        Ok(p
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    /// Mean cross-entropy of a batch of network-space images.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, images: &[Tensor], labels: &[usize]) -> Result<Var> {
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            let x = g.constant(img.clone());
            rows.push(self.logits(g, store, x)?);
        }
        let logits = g.concat(&rows)?;
        let lp = g.log_softmax_rows(logits)?;
        let k = self.classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(config_err!("label {bad} out of range for {k} classes"));
        }
        let onehot = g.constant(Tensor::from_fn(&[labels.len(), k], |i| {
            if labels[i / k] == i % k {
                1.0
            } else {
                0.0
            }
        }));
        let picked = g.mul(lp, onehot)?;
        let s = g.sum(picked);
        Ok(g.mul_scalar(s, -1.0 / labels.len() as f32))
    }

    /// Trains on `[0, 1]` images with integer labels; returns per-epoch
    /// mean loss and flags the classifier as trained.
    pub fn train(
        &self,
        store: &mut ParamStore,
        images: &[Tensor],
        labels: &[usize],
        epochs: usize,
        batch_size: usize,
        lr: f32,
        seed: u64,
    ) -> Result<Vec<f32>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(config_err!("{} images with {} labels", images.len(), labels.len()));
        }
        let net: Vec<Tensor> = images
            .iter()
            .map(|i| fit_resolution(i, self.image_size).map(|t| to_net(&t)))
            .collect::<Result<_>>()?;
        let mut adam = Adam::new(lr, 0.9, 0.999)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..net.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let (mut total, mut count) = (0.0f64, 0usize);
            for batch in batches(&order, batch_size) {
                let imgs: Vec<Tensor> = batch.iter().map(|&i| net[i].clone()).collect();
                let labs: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::with_trainable(&[CLASSIFIER_PREFIX]);
                let l = self.loss(&mut g, store, &imgs, &labs)?;
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("classifier loss not finite in epoch {epoch}")));
                }
                g.backward(l)?;
                adam.step(store, &g.param_grads())?;
                total += v as f64;
                count += 1;
            }
            let mean = (total / count.max(1) as f64) as f32;
            log::info!("classifier epoch {epoch}: loss {mean:.4}");
            history.push(mean);
        }
        store.set(self.trained, Tensor::scalar(1.0))?;
        Ok(history)
    }
}

/// Inception-score proxy over a batch of `[0, 1]` images.
pub fn proxy_inception_score(store: &ParamStore, cls: &ShapeClassifier, images: &[Tensor]) -> Result<f64> {
    if images.len() < 2 {
        return Err(config_err!("inception score needs at least 2 images, got {}", images.len()));
    }
    let p = images
        .iter()
        .map(|i| cls.probabilities(store, i))
        .collect::<Result<Vec<_>>>()?;
    inception_from_conditionals(&p)
}

/// Anything that edits an image according to a caption.
pub trait Manipulator {
    /// Returns the edited `[0, 1]` image. `index` identifies the sample so
    /// stochastic models can draw reproducible noise.
    fn manipulate(&self, image: &Tensor, tokens: &[usize], index: usize) -> Result<Tensor>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl Manipulator for IdentityModel {
    fn manipulate(&self, image: &Tensor, _tokens: &[usize], _index: usize) -> Result<Tensor> {
        Ok(image.clone())
    }
}

/// A trained model with a fixed noise seed. Outputs smaller than the
/// input are brought back to the input size by pixel repetition.
#[derive(Debug, Clone, Copy)]
pub struct SeededModel<'a> {
    pub model: &'a Model,
    pub seed: u64,
}

impl Manipulator for SeededModel<'_> {
    fn manipulate(&self, image: &Tensor, tokens: &[usize], index: usize) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let z = NoiseVector::sample(self.model.config.d_z, &mut rng);
        let m = self.model.manipulate(image, tokens, &z)?;
        let out = m.final_image();
        let (src, dst) = (image.shape()[1], out.shape()[1]);
        if dst < src && src % dst == 0 {
            Ok(upscale(out, src / dst))
        } else {
            Ok(out.clone())
        }
    }
}

/// Pretrained encoders and classifier used to score outputs.
#[derive(Debug, Clone, Copy)]
pub struct Judge<'a> {
    pub store: &'a ParamStore,
    pub encoders: &'a Encoders,
    pub classifier: &'a ShapeClassifier,
    pub vocab: &'a Vocabulary,
}

impl<'a> Judge<'a> {
    pub fn of(model: &'a Model) -> Self {
        Self {
            store: &model.store,
            encoders: &model.encoders,
            classifier: &model.classifier,
            vocab: &model.vocab,
        }
    }
}

/// Mismatched pairs for evaluation, deterministic in `seed`.
pub fn mismatch_set(grammar: &Grammar, samples: &[CaptionedSample], kind: MismatchKind, seed: u64) -> Result<Vec<MismatchedPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.iter().map(|s| sample_mismatch(grammar, s, kind, &mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub diff: f64,
    pub sim: f64,
    pub mp: f64,
    /// Mean difference inside / outside the object mask.
    pub diff_object: Option<f64>,
    pub diff_background: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub diff: f64,
    pub sim: f64,
    /// From the averaged `diff` and `sim`.
    pub mp: f64,
    pub is_proxy: f64,
    pub sample_count: usize,
    /// Mean of per-sample precision values.
    pub mp_per_sample: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    /// Aggregates per-sample values in order.
    pub fn aggregate(samples: Vec<SampleMetrics>, is_proxy: f64) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(config_err!("evaluation set is empty"));
        }
        let diff = samples.iter().map(|s| s.diff).sum::<f64>() / n as f64;
        let sim = samples.iter().map(|s| s.sim).sum::<f64>() / n as f64;
        let mp_per_sample = samples.iter().map(|s| s.mp).sum::<f64>() / n as f64;
        Ok(Self {
            diff,
            sim,
            mp: manipulative_precision(diff, sim),
            is_proxy,
            sample_count: n,
            mp_per_sample,
            samples,
        })
    }

    /// Mean masked differences over samples that have both regions.
    pub fn region_diffs(&self) -> Option<(f64, f64)> {
        let both: Vec<(f64, f64)> = self
            .samples
            .iter()
            .filter_map(|s| Some((s.diff_object?, s.diff_background?)))
            .collect();
        if both.is_empty() {
            return None;
        }
        let n = both.len() as f64;
        Some((
            both.iter().map(|p| p.0).sum::<f64>() / n,
            both.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("diff", format!("{:.6}", self.diff)),
            ("sim", format!("{:.6}", self.sim)),
            ("mp", format!("{:.6}", self.mp)),
            ("is_proxy", format!("{:.6}", self.is_proxy)),
            ("sample_count", self.sample_count.to_string()),
            ("mp_per_sample", format!("{:.6}", self.mp_per_sample)),
        ]
    }

    /// `metric = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// One JSON object per line, one line per metric.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{{\"metric\": \"{k}\", \"value\": {v}}}");
        }
        s
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_records()).map_err(|e| Error::storage(path, e))
    }
}

/// Scores one edited image against its source and target caption.
pub fn score_sample(judge: &Judge, source: &CaptionedSample, edited: &Tensor, tokens: &[usize]) -> Result<SampleMetrics> {
    let diff = pixel_diff(edited, &source.image)?;
    let sim = text_image_similarity(judge.store, judge.encoders, edited, tokens)?;
    let (obj, bg) = masked_pixel_diff(edited, &source.image, &source.mask)?;
    Ok(SampleMetrics {
        diff,
        sim,
        mp: manipulative_precision(diff, sim),
        diff_object: obj,
        diff_background: bg,
    })
}

/// Edits every pair under its mismatched caption and aggregates the scores.
pub fn evaluate(model: &dyn Manipulator, pairs: &[MismatchedPair], judge: &Judge) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(config_err!("evaluation set is empty"));
    }
    let mut samples = Vec::with_capacity(pairs.len());
    let mut outputs = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let tokens = judge.vocab.encode(&p.new_tokens);
        let edited = model.manipulate(&p.sample.image, &tokens, i)?;
        if edited.shape() != p.sample.image.shape() {
            return Err(Error::Evaluation(format!(
                "model returned {:?} for a {:?} input",
                edited.shape(),
                p.sample.image.shape()
            )));
        }
        samples.push(score_sample(judge, &p.sample, &edited, &tokens)?);
        outputs.push(edited);
    }
    let is_proxy = if outputs.len() >= 2 {
        proxy_inception_score(judge.store, judge.classifier, &outputs)?
    } else {
        1.0
    };
    MetricsReport::aggregate(samples, is_proxy)
}
