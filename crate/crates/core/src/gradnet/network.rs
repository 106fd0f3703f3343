use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Flat, ordered list of named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn push(&mut self, name: &str, value: Tensor<T>) -> usize {
        self.params.push(Param { name: name.to_string(), value });
        self.params.len() - 1
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast() })
                .collect(),
        }
    }
}

/// Layer sizes of the conv/dense embedding.
///
/// Layout: `conv(1×k1, F1) → ReLU → conv(2×k2, F2) → ReLU → flatten →
/// dense(D) → ReLU` gives the feature vector; `dropout → dense(N)` gives logits.
/// Convolutions are valid (no padding), stride 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_classes: usize,
    pub sample_len: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Architecture {
    /// Scaled-down CNN2 for desk runs: 32 (1×3) / 16 (2×3) / 64.
    pub fn desk(n_classes: usize, sample_len: usize) -> Self {
        Self {
            n_classes,
            sample_len,
            conv1_filters: 32,
            conv1_kernel: 3,
            conv2_filters: 16,
            conv2_kernel: 3,
            feature_dim: 64,
            dropout: 0.5,
        }
    }

    /// Full-size CNN2: 256 / 80 / 256.
    pub fn full_size(n_classes: usize, sample_len: usize) -> Self {
        Self {
            conv1_filters: 256,
            conv2_filters: 80,
            feature_dim: 256,
            ..Self::desk(n_classes, sample_len)
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.conv2_filters * (self.sample_len + 2 - self.conv1_kernel - self.conv2_kernel)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        if [self.conv1_filters, self.conv2_filters, self.feature_dim, self.conv1_kernel, self.conv2_kernel]
            .contains(&0)
        {
            return bad("layer sizes must be positive");
        }
        if self.sample_len + 2 <= self.conv1_kernel + self.conv2_kernel {
            return bad("sample too short for the kernels");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    feat_w: usize,
    feat_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Shared feature extractor with a dense classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork<T> {
    arch: Architecture,
    params: ParamStore<T>,
    ids: LayerIds,
}

impl<T: Real> EmbeddingNetwork<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut layer = |name: &str, shape: Vec<usize>, fan_in: usize, params: &mut ParamStore<T>| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            let w = params.push(&format!("{name}.weight"), Tensor::new(shape.clone(), data).unwrap());
            let b = params.push(&format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
            (w, b)
        };
        let (k1, k2) = (arch.conv1_kernel, arch.conv2_kernel);
        let (conv1_w, conv1_b) = layer("conv1", vec![arch.conv1_filters, 1, 1, k1], k1, &mut params);
        let (conv2_w, conv2_b) = layer(
            "conv2",
            vec![arch.conv2_filters, arch.conv1_filters, 2, k2],
            arch.conv1_filters * 2 * k2,
            &mut params,
        );
        let (feat_w, feat_b) =
            layer("dense_feat", vec![arch.feature_dim, arch.flat_dim()], arch.flat_dim(), &mut params);
        let (out_w, out_b) =
            layer("dense_out", vec![arch.n_classes, arch.feature_dim], arch.feature_dim, &mut params);
        Ok(Self {
            arch,
            params,
            ids: LayerIds { conv1_w, conv1_b, conv2_w, conv2_b, feat_w, feat_b, out_w, out_b },
        })
    }

    /// Rebuild from an architecture and a parameter store in construction order.
    pub fn from_params(arch: Architecture, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(arch.clone(), 0)?;
        if template.params.len() != params.len()
            || template.params.iter().zip(params.iter()).any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Shape("parameter store does not match architecture".into()));
        }
        Ok(Self { arch, params, ids: template.ids })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> EmbeddingNetwork<U> {
        EmbeddingNetwork { arch: self.arch.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    /// Record a forward pass of `input: [B, 2, L]` on `tape`.
    ///
    /// `rng` is only drawn from in [`Mode::Train`] with nonzero dropout.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let s = input.shape();
        if s.len() != 3 || s[1] != 2 || s[2] != self.arch.sample_len {
            return Err(Error::Shape(format!(
                "expected input [B, 2, {}], got {s:?}",
                self.arch.sample_len
            )));
        }
        let b = s[0];
        let x = tape.constant(input.clone().reshaped(&[b, 1, 2, self.arch.sample_len])?);
        let p = |tape: &mut Tape<T>, id| tape.param(&self.params, id);

        let (w, bias) = (p(tape, self.ids.conv1_w), p(tape, self.ids.conv1_b));
        let h = tape.conv2d(x, w, bias);
        let h = tape.relu(h);
        let (w, bias) = (p(tape, self.ids.conv2_w), p(tape, self.ids.conv2_b));
        let h = tape.conv2d(h, w, bias);
        let h = tape.relu(h);
        let h = tape.reshape(h, &[b, self.arch.flat_dim()]);
        let (w, bias) = (p(tape, self.ids.feat_w), p(tape, self.ids.feat_b));
        let z = tape.linear(h, w, bias);
        let features = tape.relu(z);

        let mut head_in = features;
        if mode == Mode::Train && self.arch.dropout > 0.0 {
            let keep = 1.0 - self.arch.dropout;
            let scale = T::of(1.0 / keep);
            let mask = (0..b * self.arch.feature_dim)
                .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                .collect();
            head_in = tape.dropout(features, mask);
        }
        let (w, bias) = (p(tape, self.ids.out_w), p(tape, self.ids.out_b));
        let logits = tape.linear(head_in, w, bias);
        Ok(Forward { features, logits })
    }

    /// Eval-mode features and class probabilities, without keeping a tape around.
    pub fn infer(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, input, Mode::Eval, &mut unused)?;
        let probs = tape.softmax(out.logits);
        if let Some(op) = tape.fault() {
            return Err(Error::NonFinite(format!("forward op `{op}`")));
        }
        Ok((tape.value(out.features).clone(), tape.value(probs).clone()))
    }
}
