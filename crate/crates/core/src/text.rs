//! Vocabulary and the bidirectional recurrent text encoder.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::{Graph, LinearSpec, ParamStore, Tensor, Var};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Longest caption the encoder accepts; longer ones are truncated.
pub const MAX_TOKENS: usize = 16;

/// Token/index bijection. Index 0 is padding, index 1 is unknown, the rest
/// are the corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(config_err!("cannot build a vocabulary from an empty corpus"));
        }
        let distinct: BTreeSet<&str> = corpus
            .iter()
            .flatten()
            .map(AsRef::as_ref)
            .filter(|t| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(distinct)
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Load("vocabulary must start with <pad> and <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Load(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    /// One token per line, in index order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_text(&text)
    }
}

/// Per-word features and their mean-pooled sentence feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// `[L, d_text]`
    pub word_features: Tensor,
    /// `[d_text]`
    pub sentence_feature: Tensor,
}

impl TextFeatures {
    pub fn len(&self) -> usize {
        self.word_features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph-resident text features.
#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub words: Var,
    pub sentence: Var,
    pub len: usize,
}

impl TextVars {
    pub fn values(&self, g: &Graph) -> TextFeatures {
        TextFeatures {
            word_features: g.value(self.words).clone(),
            sentence_feature: g.value(self.sentence).clone(),
        }
    }

    pub fn constant(g: &mut Graph, f: &TextFeatures) -> Self {
        Self {
            words: g.constant(f.word_features.clone()),
            sentence: g.constant(f.sentence_feature.clone()),
            len: f.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GruDirection {
    wz: LinearSpec,
    wr: LinearSpec,
    wn: LinearSpec,
    uz: LinearSpec,
    ur: LinearSpec,
    un: LinearSpec,
}

impl GruDirection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let std_x = 1.0 / (d_in as f32).sqrt();
        let std_h = 1.0 / (hidden as f32).sqrt();
        Ok(Self {
            wz: LinearSpec::new(store, &format!("{name}/wz"), d_in, hidden, std_x, rng)?,
            wr: LinearSpec::new(store, &format!("{name}/wr"), d_in, hidden, std_x, rng)?,
            wn: LinearSpec::new(store, &format!("{name}/wn"), d_in, hidden, std_x, rng)?,
            uz: LinearSpec::new(store, &format!("{name}/uz"), hidden, hidden, std_h, rng)?,
            ur: LinearSpec::new(store, &format!("{name}/ur"), hidden, hidden, std_h, rng)?,
            un: LinearSpec::new(store, &format!("{name}/un"), hidden, hidden, std_h, rng)?,
        })
    }

    /// Hidden states `[L, H]`, row `t` holding the state after token `t`
    /// in this direction's reading order.
    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let len = g.shape(x)[0];
        let hidden = self.uz.out_features;
        let xz = g.linear(store, &self.wz, x)?;
        let xr = g.linear(store, &self.wr, x)?;
        let xn = g.linear(store, &self.wn, x)?;
        let mut h = g.constant(Tensor::zeros(&[1, hidden]));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let hz = g.linear(store, &self.uz, h)?;
            let hr = g.linear(store, &self.ur, h)?;
            let hn = g.linear(store, &self.un, h)?;
            let xz_t = g.narrow(xz, t, 1)?;
            let xr_t = g.narrow(xr, t, 1)?;
            let xn_t = g.narrow(xn, t, 1)?;
            let z = g.add(xz_t, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr_t, hr)?;
            let r = g.sigmoid(r);
            let gated = g.mul(r, hn)?;
            let n = g.add(xn_t, gated)?;
            let n = g.tanh(n);
            let diff = g.sub(h, n)?;
            let keep = g.mul(z, diff)?;
            h = g.add(n, keep)?;
            states[t] = h;
        }
        g.concat(&states)
    }
}

/// Embedding followed by a bidirectional GRU; word features concatenate
/// the two directions and the sentence feature is their row mean.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub d_text: usize,
    embedding: crate::tensor::ParamId,
    forward: GruDirection,
    backward: GruDirection,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        d_text: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_text < 2 || !d_text.is_multiple_of(2) {
            return Err(config_err!("d_text must be even and >= 2, got {d_text}"));
        }
        let embedding = store.add(
            format!("{prefix}/embedding"),
            Tensor::randn(&[vocab_size, d_text], 1.0, rng),
        )?;
        let hidden = d_text / 2;
        Ok(Self {
            vocab_size,
            d_text,
            embedding,
            forward: GruDirection::new(store, &format!("{prefix}/fwd"), d_text, hidden, rng)?,
            backward: GruDirection::new(store, &format!("{prefix}/bwd"), d_text, hidden, rng)?,
        })
    }

    /// Drops padding, truncates to [`MAX_TOKENS`], and validates indices.
    pub fn prepare(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != Vocabulary::PAD).collect();
        if ids.is_empty() {
            return Err(Error::Encoding("empty token list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Encoding(format!(
                "token index {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        if ids.len() > MAX_TOKENS {
            log::warn!("caption of {} tokens truncated to {MAX_TOKENS}", ids.len());
            ids.truncate(MAX_TOKENS);
        }
        Ok(ids)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<TextVars> {
        let ids = self.prepare(tokens)?;
        let table = g.param(store, self.embedding);
        let x = g.gather_rows(table, &ids)?;
        self.encode_embedded(g, store, x)
    }

    /// Encodes an already-embedded sequence `[L, d_text]`.
    pub fn encode_embedded(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<TextVars> {
        let len = g.shape(x)[0];
        let fwd = self.forward.run(g, store, x, false)?;
        let bwd = self.backward.run(g, store, x, true)?;
        let ft = g.transpose(fwd)?;
        let bt = g.transpose(bwd)?;
        let both = g.concat(&[ft, bt])?;
        let words = g.transpose(both)?;
        let sentence = g.mean_axis(words, 0)?;
        Ok(TextVars { words, sentence, len })
    }

    /// Value-only encoding.
    pub fn features(&self, store: &ParamStore, tokens: &[usize]) -> Result<TextFeatures> {
        let mut g = Graph::new();
        let v = self.encode(&mut g, store, tokens)?;
        Ok(v.values(&g))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn words(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    fn encoder(vocab: usize, seed: u64) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TextEncoder::new(&mut store, "text", vocab, 8, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn vocab_counts_distinct_tokens_plus_specials() {
        let v = Vocabulary::build(&[words(&["red", "square"])]).unwrap();
        assert_eq!(v.size(), 4);
        let v = Vocabulary::build(&[words(&["red", "square"]), words(&["square", "red", "a"])]).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.token(2), Some("a"));
        assert_eq!(v.index_of("zebra"), Vocabulary::UNK);
        assert!(Vocabulary::build::<String>(&[]).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocabulary::build(&[words(&["b", "a", "c"])]).unwrap();
        let text = v.to_text();
        assert_eq!(text, "<pad>\n<unk>\na\nb\nc\n");
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn single_token_sentence_equals_word() {
        let (store, enc) = encoder(6, 1);
        let f = enc.features(&store, &[3]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.word_features.data(), f.sentence_feature.data());
    }

    #[test]
    fn encoding_is_deterministic_and_order_sensitive() {
        let (store, enc) = encoder(8, 2);
        let a = enc.features(&store, &[2, 3, 4, 5]).unwrap();
        let b = enc.features(&store, &[2, 3, 4, 5]).unwrap();
        assert_eq!(a, b);
        let swapped = enc.features(&store, &[2, 4, 3, 5]).unwrap();
        assert_ne!(a.word_features, swapped.word_features);
    }

    #[test]
    fn sentence_is_exact_row_mean() {
        let (store, enc) = encoder(8, 3);
        let f = enc.features(&store, &[2, 3, 7, 3, 5]).unwrap();
        let (l, d) = (f.len(), enc.d_text);
        for j in 0..d {
            let m = (0..l).map(|i| f.word_features.data()[i * d + j] as f64).sum::<f64>() / l as f64;
            assert_eq!(m as f32, f.sentence_feature.data()[j]);
        }
    }

    #[test]
    fn encode_errors_and_padding() {
        let (store, enc) = encoder(6, 4);
        assert!(matches!(enc.features(&store, &[]), Err(Error::Encoding(_))));
        assert!(matches!(enc.features(&store, &[0, 0]), Err(Error::Encoding(_))));
        assert!(matches!(enc.features(&store, &[2, 6]), Err(Error::Encoding(_))));
        let padded = enc.features(&store, &[2, 3, 0]).unwrap();
        assert_eq!(padded.len(), 2);
        let long: Vec<usize> = (0..20).map(|i| 2 + i % 4).collect();
        assert_eq!(enc.features(&store, &long).unwrap().len(), MAX_TOKENS);
    }

    #[test]
    fn encoder_gradient_passes_grad_check() {
        for seed in 0..3 {
            let (store, enc) = encoder(6, 10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let w = Tensor::uniform(&[3 * 8], -1.0, 1.0, &mut rng);
            let err = grad_check(
                |g, x| {
                    let t = enc.encode_embedded(g, &store, x)?;
                    let flat = g.reshape_flat(t.words)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(flat, wv)?;
                    let s1 = g.sum(p);
                    let s2 = g.sum(t.sentence);
                    g.add(s1, s2)
                },
                &x,
                1e-2,
            )
            .unwrap();
            assert!(err < 1e-3, "{err}");
        }
    }
}
