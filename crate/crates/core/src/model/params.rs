use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::depth::LayerSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EMBED_STD: f64 = 0.1;
const HEAD_STD: f64 = 0.02;

/// One transformer block: pre-norm attention and a 4× MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl LayerParams {
    pub const TENSORS: usize = 10;

    pub fn tensors(&self) -> [&Tensor; Self::TENSORS] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.w2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; Self::TENSORS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// All weights of the supernet.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub class_emb: Tensor,
    /// One `[h_k·w_k, width]` table per scale.
    pub pos_emb: Vec<Tensor>,
    pub layers: Vec<LayerParams>,
    pub out_gain: Tensor,
    pub out_bias: Tensor,
    pub head: Tensor,
}

impl ModelParams {
    /// Every tensor in declaration order: embeddings, per-scale positions,
    /// layers, output norm, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.class_emb];
        out.extend(self.pos_emb.iter());
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.out_gain, &self.out_bias, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.class_emb];
        out.extend(self.pos_emb.iter_mut());
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.out_gain, &mut self.out_bias, &mut self.head]);
        out
    }

    /// Positions in [`ModelParams::tensors`] holding layer `l`.
    pub fn layer_tensor_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = 2 + self.pos_emb.len() + l * LayerParams::TENSORS;
        start..start + LayerParams::TENSORS
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Seeded initialisation: projections `N(0, 1/width)`, norm gains 1 and
/// biases 0, embeddings `N(0, 0.1²)`, head `N(0, 0.02²)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, w, c) = (config.vocab(), config.width, config.classes);
    let proj = 1.0 / (w as f64).sqrt();

    let tok_emb = normal(&mut rng, &[v, w], EMBED_STD);
    let class_emb = normal(&mut rng, &[c, w], EMBED_STD);
    let pos_emb = config
        .schedule
        .tokens_per_scale()
        .into_iter()
        .map(|t| normal(&mut rng, &[t, w], EMBED_STD))
        .collect();
    let layers = (0..config.depth)
        .map(|_| LayerParams {
            ln1_gain: Tensor::full(&[w], 1.0),
            ln1_bias: Tensor::zeros(&[w]),
            wq: normal(&mut rng, &[w, w], proj),
            wk: normal(&mut rng, &[w, w], proj),
            wv: normal(&mut rng, &[w, w], proj),
            wo: normal(&mut rng, &[w, w], proj),
            ln2_gain: Tensor::full(&[w], 1.0),
            ln2_bias: Tensor::zeros(&[w]),
            w1: normal(&mut rng, &[w, 4 * w], proj),
            w2: normal(&mut rng, &[4 * w, w], proj),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tok_emb,
        class_emb,
        pos_emb,
        layers,
        out_gain: Tensor::full(&[w], 1.0),
        out_bias: Tensor::zeros(&[w]),
        head: normal(&mut rng, &[w, v], HEAD_STD),
    })
}

/// Standalone model made of the `selected` layers (in order) plus the
/// shared embeddings, output norm and head.
pub fn extract_subnet(params: &ModelParams, selected: &LayerSet) -> Result<ModelParams> {
    if selected.is_empty() {
        return Err(Error::Contract("cannot extract an empty subnet".into()));
    }
    if let Some(max) = selected.max() {
        if max >= params.config.depth {
            return Err(Error::Contract(format!(
                "layer {max} outside depth {}",
                params.config.depth
            )));
        }
    }
    let mut config = params.config.clone();
    config.depth = selected.len();
    Ok(ModelParams {
        config,
        tok_emb: params.tok_emb.clone(),
        class_emb: params.class_emb.clone(),
        pos_emb: params.pos_emb.clone(),
        layers: selected.iter().map(|l| params.layers[l].clone()).collect(),
        out_gain: params.out_gain.clone(),
        out_bias: params.out_bias.clone(),
        head: params.head.clone(),
    })
}
