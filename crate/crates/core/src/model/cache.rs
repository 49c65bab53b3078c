use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

/// Per-layer key/value sequences of one generation stream.
///
/// A layer only grows during scales at which it runs, so after a full
/// generation the full-only layers hold just the bridge-zone tokens.
#[derive(Clone, Debug)]
pub struct KVCache {
    width: usize,
    layers: Vec<LayerCache>,
    /// Sequence offset after each completed scale.
    boundaries: Vec<usize>,
}

impl KVCache {
    pub fn new(depth: usize, width: usize) -> Self {
        Self {
            width,
            layers: vec![LayerCache::default(); depth],
            boundaries: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Tokens of all completed scales.
    pub fn tokens(&self) -> usize {
        self.boundaries.last().copied().unwrap_or(0)
    }

    pub fn completed_scales(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    /// Cached token·layer entries summed over layers.
    pub fn total_entries(&self) -> u64 {
        self.layers.iter().map(|l| l.len as u64).sum()
    }

    /// Cached keys of `layer` as `[len, width]`.
    pub fn keys(&self, layer: usize) -> Tensor {
        let l = &self.layers[layer];
        Tensor::from_parts(vec![l.len, self.width], l.keys.clone())
    }

    pub fn values(&self, layer: usize) -> Tensor {
        let l = &self.layers[layer];
        Tensor::from_parts(vec![l.len, self.width], l.values.clone())
    }

    /// Checks that `layer` may join the scale now being computed: it must
    /// have run at every completed scale.
    pub(crate) fn check_active(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::State(format!(
                "layer {layer} outside cache of depth {}",
                self.layers.len()
            )));
        }
        let len = self.layers[layer].len;
        if len != self.tokens() {
            return Err(Error::State(format!(
                "layer {layer} holds {len} tokens but {} are complete; \
                 a layer skipped at an earlier scale cannot rejoin",
                self.tokens()
            )));
        }
        Ok(())
    }

    /// Keys/values of `layer` over cached tokens followed by `k`/`v`.
    pub(crate) fn extended(&self, layer: usize, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let l = &self.layers[layer];
        let rows = l.len + k.shape()[0];
        let cat = |old: &[f64], new: &[f64]| {
            let mut out = Vec::with_capacity(old.len() + new.len());
            out.extend_from_slice(old);
            out.extend_from_slice(new);
            Tensor::from_parts(vec![rows, self.width], out)
        };
        (cat(&l.keys, k.data()), cat(&l.values, v.data()))
    }

    pub(crate) fn append(&mut self, layer: usize, k: &Tensor, v: &Tensor) {
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(k.data());
        l.values.extend_from_slice(v.data());
        l.len += k.shape()[0];
    }

    pub(crate) fn finish_scale(&mut self, tokens: usize) {
        let end = self.tokens() + tokens;
        self.boundaries.push(end);
    }
}
