//! Block-structured feedforward encoder and linear classification head.
//!
//! Each block is `relu(x·Wᵀ + b)`; the last block skips the relu so
//! features span the whole space.

use std::ops::Deref;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{kernels, Tensor};

/// Default widths: input 32, four hidden blocks of 64, 64-d features.
pub const DEFAULT_DIMS: [usize; 6] = [32, 64, 64, 64, 64, 64];

/// One affine block: `weight` is `[out × in]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Block {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    blocks: Vec<Block>,
}

impl Encoder {
    /// He-initialised encoder for `dims = [input, hidden..., feature]`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("encoder needs at least input and feature dims"));
        }
        let mut rng = rng::stream(seed, Purpose::EncoderInit, &[]);
        let blocks = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::contract(e.to_string()))?;
                let weight = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Ok(Block {
                    weight: Tensor::matrix(fan_out, fan_in, weight)?,
                    bias: Tensor::zeros(vec![fan_out])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::contract("encoder needs at least one block"));
        }
        for b in &blocks {
            let (o, _) = b.weight.dims2()?;
            if b.bias.shape() != [o] {
                return Err(Error::dim("encoder block", b.weight.shape(), b.bias.shape()));
            }
        }
        for pair in blocks.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    "encoder chain",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `[input, block outputs...]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.blocks.iter().map(Block::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Block::num_params).sum()
    }

    /// Flat parameter arrays in `[w1, b1, w2, b2, ...]` order.
    pub fn params(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| [b.weight.data(), b.bias.data()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [b.weight.data_mut(), b.bias.data_mut()])
            .collect()
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in self.dims() {
            h.update((d as u64).to_le_bytes());
        }
        for p in self.params() {
            for v in p {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (m, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::dim("encoder forward", x.shape(), &[m, self.input_dim()]));
        }
        Ok(m)
    }

    /// Tape-free forward pass returning every block's output.
    pub fn infer_blocks(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let m = self.check_input(x)?;
        let last = self.blocks.len() - 1;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let input = if i == 0 { x } else { &outs[i - 1] };
            let mut y = kernels::linear(
                m,
                b.in_dim(),
                b.out_dim(),
                input.data(),
                b.weight.data(),
                b.bias.data(),
            );
            if i != last {
                kernels::relu_inplace(&mut y);
            }
            outs.push(Tensor::matrix(m, b.out_dim(), y)?);
        }
        Ok(outs)
    }

    /// Tape-free forward pass to the feature layer.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer_blocks(x)?.pop().expect("at least one block"))
    }

    /// Registers the parameters on `tape` as gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        let params = self
            .blocks
            .iter()
            .map(|b| (tape.param(b.weight.clone()), tape.param(b.bias.clone())))
            .collect();
        BoundEncoder {
            params,
            input_dim: self.input_dim(),
        }
    }

    /// Deep copy whose parameters can no longer be updated.
    pub fn clone_frozen(&self) -> FrozenEncoder {
        FrozenEncoder(self.clone())
    }
}

/// Read-only encoder. Only `&Encoder` is reachable through it, so no
/// optimiser can touch its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder(Encoder);

impl Deref for FrozenEncoder {
    type Target = Encoder;

    fn deref(&self) -> &Encoder {
        &self.0
    }
}

impl FrozenEncoder {
    /// Trainable copy of the frozen parameters.
    pub fn thaw(&self) -> Encoder {
        self.0.clone()
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    params: Vec<(Var, Var)>,
    input_dim: usize,
}

impl BoundEncoder {
    pub fn forward_blocks(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        match tape.shape(x) {
            [_, d] if *d == self.input_dim => {}
            s => return Err(Error::dim("encoder forward", s, &[0, self.input_dim])),
        }
        let last = self.params.len() - 1;
        let mut outs = Vec::with_capacity(self.params.len());
        let mut h = x;
        for (i, &(w, b)) in self.params.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i != last {
                h = tape.relu(h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(*self.forward_blocks(tape, x)?.last().expect("at least one block"))
    }

    /// Parameter handles in the same order as [`Encoder::params_mut`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Per-block mean of squared parameter differences.
pub fn block_parameter_change(before: &Encoder, after: &Encoder) -> Result<Vec<f64>> {
    if before.dims() != after.dims() {
        return Err(Error::contract(format!(
            "architecture mismatch: {:?} vs {:?}",
            before.dims(),
            after.dims()
        )));
    }
    Ok(before
        .blocks
        .iter()
        .zip(&after.blocks)
        .map(|(a, b)| {
            let sq: f64 = [(&a.weight, &b.weight), (&a.bias, &b.bias)]
                .iter()
                .flat_map(|(p, q)| p.data().iter().zip(q.data()))
                .map(|(p, q)| (q - p) * (q - p))
                .sum();
            sq / a.num_params() as f64
        })
        .collect())
}

/// Linear classifier `features·Wᵀ + b` over `num_classes` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    /// Small uniform init in `±1/√feature_dim`, zero bias.
    pub fn new(num_classes: usize, feature_dim: usize, rng: &mut rng::Rng) -> Result<Self> {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let weight = (0..num_classes * feature_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Ok(Self {
            weight: Tensor::matrix(num_classes, feature_dim, weight)?,
            bias: Tensor::zeros(vec![num_classes])?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (m, f) = features.dims2()?;
        if f != self.weight.shape()[1] {
            return Err(Error::dim("head", features.shape(), self.weight.shape()));
        }
        let y = kernels::linear(
            m,
            f,
            self.num_classes(),
            features.data(),
            self.weight.data(),
            self.bias.data(),
        );
        Tensor::matrix(m, self.num_classes(), y)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), self.bias.data_mut()]
    }
}
