use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{config_err, Error, Result};

/// Standard deviation of the zero-mean normal used for weight init.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    frozen: bool,
    /// Buffers (running statistics) are stored and checkpointed but never
    /// receive gradients.
    buffer: bool,
}

/// Named parameter table shared by every network in a model.
///
/// Names are `/`-separated paths (`encoders/image/conv0/weight`); prefixes
/// are used to select trainable groups and to freeze whole subnetworks.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    fn insert(&mut self, name: String, value: Tensor, buffer: bool) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
            buffer,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.entries[id.0].buffer
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable (non-buffer) parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| !e.buffer && e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
        }
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Total count of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Copies every value whose name exists in `other`; the name sets must
    /// match exactly when `strict` is set.
    pub fn load_from(&mut self, other: &[(String, Tensor)], strict: bool) -> Result<()> {
        let mut seen = 0usize;
        for (name, value) in other {
            match self.index.get(name) {
                Some(&i) => {
                    self.set(ParamId(i), value.clone())?;
                    seen += 1;
                }
                None if strict => {
                    return Err(Error::Load(format!("unexpected tensor {name} in checkpoint")))
                }
                None => {}
            }
        }
        if strict && seen != self.entries.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {seen} of {} model tensors",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// Parameter handles for one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvSpec {
    /// Registers `<name>/weight` (normal, std 0.02) and `<name>/bias` (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
            return Err(config_err!("degenerate convolution {name}"));
        }
        let weight = store.add(
            format!("{name}/weight"),
            Tensor::randn(&[out_channels, in_channels, kernel_size, kernel_size], INIT_STD, rng),
        )?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            weight,
            bias,
        })
    }

    /// `3x3`, stride 1, padding 1.
    pub fn same3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_size(h, w, self.kernel_size, self.stride, self.padding)
    }
}

pub(crate) fn conv_output_size(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    let dim = |n: usize| -> Result<usize> {
        let span = n + 2 * p;
        if span < k {
            return Err(Error::Dimension(format!(
                "input extent {n} with padding {p} smaller than kernel {k}"
            )));
        }
        if !(span - k).is_multiple_of(s) {
            return Err(config_err!(
                "non-integral output size: ({n} + 2*{p} - {k}) / {s}"
            ));
        }
        Ok((span - k) / s + 1)
    };
    Ok((dim(h)?, dim(w)?))
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearSpec {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}/weight"),
            Tensor::randn(&[in_features, out_features], std, rng),
        )?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self {
            in_features,
            out_features,
            weight,
            bias,
        })
    }
}
