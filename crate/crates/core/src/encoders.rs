//! Image towers and the text/image matching space.
//!
//! One convolutional tower provides all image views: its second layer is
//! the shallow feature map (`image_size / 2`), its fourth the regional map
//! (`image_size / 8`). Global vectors for matching come from linear maps of
//! the spatially pooled regional features and of the sentence feature.
//! Encoders are trained once by [`pretrain_matching`] and frozen afterwards.
//!
//! Images entering any network are in `[-1, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{config_err, dim_err, Error, Result};
use crate::objectives::damsm_loss;
use crate::optim::Adam;
use crate::tensor::{ConvSpec, Graph, LinearSpec, ParamId, ParamStore, Tensor, Var};
use crate::text::TextEncoder;

pub const PREFIX: &str = "encoders/";
const SLOPE: f32 = 0.2;

/// Resets a convolution's weight to He-normal for leaky-ReLU stacks.
pub(crate) fn he_init<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ConvSpec, rng: &mut R) -> Result<()> {
    let fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
    let std = (2.0 / (1.0 + SLOPE * SLOPE) / fan_in as f32).sqrt();
    let shape = store.get(spec.weight).shape().to_vec();
    store.set(spec.weight, Tensor::randn(&shape, std, rng))
}

/// Text encoder, image tower and matching projections.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub text: TextEncoder,
    pub image_size: usize,
    pub regional_channels: usize,
    pub shallow_channels: usize,
    pub d_m: usize,
    tower: [ConvSpec; 4],
    img_proj: LinearSpec,
    txt_proj: LinearSpec,
    pretrained: ParamId,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let text = TextEncoder::new(store, "encoders/text", vocab_size, cfg.d_text, rng)?;
        let cs = cfg.shallow_channels;
        let cr = cfg.regional_channels;
        let tower = [
            ConvSpec::new(store, "encoders/image/conv0", 3, cs / 2, 3, 1, 1, rng)?,
            ConvSpec::new(store, "encoders/image/conv1", cs / 2, cs, 4, 2, 1, rng)?,
            ConvSpec::new(store, "encoders/image/conv2", cs, cr, 4, 2, 1, rng)?,
            ConvSpec::new(store, "encoders/image/conv3", cr, cr, 4, 2, 1, rng)?,
        ];
        for spec in &tower {
            he_init(store, spec, rng)?;
        }
        let img_proj = LinearSpec::new(store, "encoders/match/image", cr, cfg.d_m, 1.0 / (cr as f32).sqrt(), rng)?;
        let txt_proj = LinearSpec::new(
            store,
            "encoders/match/text",
            cfg.d_text,
            cfg.d_m,
            1.0 / (cfg.d_text as f32).sqrt(),
            rng,
        )?;
        let pretrained = store.add_buffer("encoders/pretrained", Tensor::scalar(0.0))?;
        Ok(Self {
            text,
            image_size: cfg.image_size,
            regional_channels: cr,
            shallow_channels: cs,
            d_m: cfg.d_m,
            tower,
            img_proj,
            txt_proj,
            pretrained,
        })
    }

    pub fn is_pretrained(&self, store: &ParamStore) -> bool {
        store.get(self.pretrained).item() != 0.0
    }

    pub fn set_pretrained(&self, store: &mut ParamStore, flag: bool) -> Result<()> {
        store.set(self.pretrained, Tensor::scalar(if flag { 1.0 } else { 0.0 }))
    }

    pub fn require_pretrained(&self, store: &ParamStore) -> Result<()> {
        if self.is_pretrained(store) {
            Ok(())
        } else {
            Err(Error::State("matching encoders have not been pretrained".into()))
        }
    }

    fn check_image(&self, g: &Graph, image: Var) -> Result<()> {
        let s = self.image_size;
        if g.shape(image) != [3, s, s] {
            return Err(dim_err!("encoders expect a [3, {s}, {s}] image, got {:?}", g.shape(image)));
        }
        Ok(())
    }

    /// Shallow features `[C_s, S/2, S/2]`.
    pub fn shallow(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        self.check_image(g, image)?;
        let x = g.conv2d(store, &self.tower[0], image)?;
        let x = g.leaky_relu(x, SLOPE);
        let x = g.conv2d(store, &self.tower[1], x)?;
        Ok(g.leaky_relu(x, SLOPE))
    }

    /// Regional features computed from shallow features.
    pub fn regional_from_shallow(&self, g: &mut Graph, store: &ParamStore, shallow: Var) -> Result<Var> {
        let x = g.conv2d(store, &self.tower[2], shallow)?;
        let x = g.leaky_relu(x, SLOPE);
        g.conv2d(store, &self.tower[3], x)
    }

    /// Regional features `[C_r, S/8, S/8]`.
    pub fn regional(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let s = self.shallow(g, store, image)?;
        self.regional_from_shallow(g, store, s)
    }

    /// Both views from one pass: `(shallow, regional)`.
    pub fn both(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Var, Var)> {
        let s = self.shallow(g, store, image)?;
        let r = self.regional_from_shallow(g, store, s)?;
        Ok((s, r))
    }

    /// Global image vector `[d_m]` from regional features.
    pub fn image_global(&self, g: &mut Graph, store: &ParamStore, regional: Var) -> Result<Var> {
        let c = g.shape(regional)[0];
        let pooled = g.spatial_mean(regional)?;
        let row = g.reshape(pooled, &[1, c])?;
        let y = g.linear(store, &self.img_proj, row)?;
        g.reshape_flat(y)
    }

    /// Global text vector `[d_m]` from the sentence feature.
    pub fn text_global(&self, g: &mut Graph, store: &ParamStore, sentence: Var) -> Result<Var> {
        let d = g.value(sentence).numel();
        let row = g.reshape(sentence, &[1, d])?;
        let y = g.linear(store, &self.txt_proj, row)?;
        g.reshape_flat(y)
    }

    /// Regions `[N, d_m]` in the matching space, one row per location.
    pub fn project_regions(&self, g: &mut Graph, store: &ParamStore, regional: Var) -> Result<Var> {
        let (c, h, w) = match g.shape(regional) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err!("regional features must be C x H x W, got {s:?}")),
        };
        let m = g.reshape(regional, &[c, h * w])?;
        let t = g.transpose(m)?;
        g.linear(store, &self.img_proj, t)
    }

    /// Words `[L, d_m]` in the matching space. The sentence vector is the
    /// mean of these rows, since both maps are affine.
    pub fn project_words(&self, g: &mut Graph, store: &ParamStore, words: Var) -> Result<Var> {
        g.linear(store, &self.txt_proj, words)
    }

    pub fn match_encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        self.require_pretrained(store)?;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let r = self.regional(&mut g, store, x)?;
        let v = self.image_global(&mut g, store, r)?;
        Ok(g.value(v).clone())
    }

    pub fn match_encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        self.require_pretrained(store)?;
        let mut g = Graph::new();
        let t = self.text.encode(&mut g, store, tokens)?;
        let v = self.text_global(&mut g, store, t.sentence)?;
        Ok(g.value(v).clone())
    }
}

/// Average-pools a `[C, H, W]` image by powers of two down to `size`.
pub fn fit_resolution(image: &Tensor, size: usize) -> Result<Tensor> {
    let mut t = image.clone();
    while t.shape()[1] > size {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            break;
        }
        let data = crate::tensor::kernels::avg_pool2x(t.data(), c, h, w);
        t = Tensor::new(&[c, h / 2, w / 2], data)?;
    }
    if t.shape()[1] != size || t.shape()[2] != size {
        return Err(dim_err!("cannot fit {:?} to {size}x{size}", image.shape()));
    }
    Ok(t)
}

/// Maps a `[0, 1]` image to network space.
pub fn to_net(image: &Tensor) -> Tensor {
    image.map(|v| v * 2.0 - 1.0)
}

/// Batch matching loss of `(image, tokens)` pairs on a graph.
pub fn matching_loss(
    g: &mut Graph,
    store: &ParamStore,
    enc: &Encoders,
    images: &[Tensor],
    tokens: &[Vec<usize>],
    gamma: f32,
) -> Result<Var> {
    if images.len() != tokens.len() {
        return Err(config_err!("{} images but {} captions", images.len(), tokens.len()));
    }
    let mut iv = Vec::with_capacity(images.len());
    let mut tv = Vec::with_capacity(images.len());
    for (img, tok) in images.iter().zip(tokens) {
        let x = g.constant(img.clone());
        let r = enc.regional(g, store, x)?;
        iv.push(enc.image_global(g, store, r)?);
        let t = enc.text.encode(g, store, tok)?;
        tv.push(enc.text_global(g, store, t.sentence)?);
    }
    damsm_loss(g, &iv, &tv, gamma)
}

/// Trains text encoder, image tower and projections on the symmetric
/// batch matching loss, then flags the encoders as pretrained.
///
/// `images` are in network space. Returns the mean training loss of each
/// epoch.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_matching(
    store: &mut ParamStore,
    enc: &Encoders,
    images: &[Tensor],
    tokens: &[Vec<usize>],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    gamma: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    if batch_size < 2 {
        return Err(config_err!("matching pretraining needs batches of at least 2"));
    }
    if images.len() < 2 {
        return Err(config_err!("matching pretraining needs at least 2 samples"));
    }
    let mut adam = Adam::new(lr, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in batches(&order, batch_size) {
            let imgs: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
            let toks: Vec<Vec<usize>> = batch.iter().map(|&i| tokens[i].clone()).collect();
            let mut g = Graph::with_trainable(&[PREFIX]);
            let loss = matching_loss(&mut g, store, enc, &imgs, &toks, gamma)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("matching loss not finite in epoch {epoch}")));
            }
            g.backward(loss)?;
            adam.step(store, &g.param_grads())?;
            total += value as f64;
            count += 1;
        }
        let mean = (total / count as f64) as f32;
        log::info!("pretrain epoch {epoch}: matching loss {mean:.4}");
        history.push(mean);
    }
    enc.set_pretrained(store, true)?;
    Ok(history)
}

/// Splits `order` into chunks of `size`, folding a trailing singleton into
/// the previous chunk so every batch holds at least two items.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}
