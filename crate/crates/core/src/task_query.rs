//! Task-description query vectors: a frozen hashed bag-of-tokens text
//! featurizer followed by a learnable linear projection to the feature width.

use crate::dataset::TaskDescription;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

pub const TEXT_DIM: usize = 64;
pub const HASH_BUCKETS: usize = 1024;
/// Seed of the frozen token table. Changing it invalidates every checkpoint.
pub const TABLE_SEED: u64 = 0x7AB1_E5EE_D000_0001;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn bucket_of(token: &str) -> usize {
    (fnv1a64(token.as_bytes()) % HASH_BUCKETS as u64) as usize
}

#[derive(Debug, Clone)]
pub struct QueryEmbedder {
    table: Vec<f64>,
    pub projection: Tensor,
    pub bias: Tensor,
}

impl QueryEmbedder {
    pub fn new(out_dim: usize, rng: &mut RngState) -> Self {
        let std = 1.0 / (TEXT_DIM as f64).sqrt();
        QueryEmbedder {
            table: frozen_table(),
            projection: Tensor::randn(&[TEXT_DIM, out_dim], std, rng).into_param(),
            bias: Tensor::zeros(&[out_dim]).into_param(),
        }
    }

    pub fn from_weights(projection: Tensor, bias: Tensor) -> Result<Self> {
        let out = bias.numel();
        if projection.shape() != [TEXT_DIM, out] || bias.shape() != [out] {
            return Err(Error::dim(format!(
                "query projection {:?} / bias {:?} do not match [{TEXT_DIM}, C] / [C]",
                projection.shape(),
                bias.shape()
            )));
        }
        Ok(QueryEmbedder {
            table: frozen_table(),
            projection: projection.detach().into_param(),
            bias: bias.detach().into_param(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.numel()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.projection.clone(), self.bias.clone()]
    }

    /// Frozen text feature: mean of the token bucket vectors.
    pub fn text_feature(&self, text: &str) -> Result<Vec<f64>> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::arg("task description is empty"));
        }
        // canonical order keeps equal token multisets bitwise equal
        tokens.sort();
        let mut acc = vec![0.0; TEXT_DIM];
        for tok in &tokens {
            let b = bucket_of(tok);
            let row = &self.table[b * TEXT_DIM..(b + 1) * TEXT_DIM];
            acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
        }
        acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
        Ok(acc)
    }

    pub fn embed_task(&self, desc: &TaskDescription) -> Result<Tensor> {
        let feat = Tensor::from_vec(&[1, TEXT_DIM], self.text_feature(&desc.text)?)?;
        let out = self.out_dim();
        feat.matmul(&self.projection)?.reshape(&[out])?.add(&self.bias)
    }
}

pub fn embed_task(embedder: &QueryEmbedder, desc: &TaskDescription) -> Result<Tensor> {
    embedder.embed_task(desc)
}

fn frozen_table() -> Vec<f64> {
    let mut rng = RngState::new(TABLE_SEED);
    (0..HASH_BUCKETS * TEXT_DIM).map(|_| rng.normal()).collect()
}
