//! Model parameters and scoring.
//!
//! The scoring model concatenates a user embedding and an item embedding,
//! passes the pair through a small MLP, and squashes a final linear score
//! through a sigmoid to produce an interaction probability. Parameters are
//! split into the private per-user embedding table and the public part
//! (item embeddings, MLP layers, output vector) that federated clients
//! exchange with the server.

mod adam;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use loss::{
    bce_backward, bce_loss, bce_loss_parts, cosine, grad_item_cl, grad_total_client_loss,
    info_nce, info_nce_grad, info_nce_row, info_nce_row_sampled, ClientClConfig, ClientGrad,
    PublicGrads, Triple, UserContrast, PROB_CLAMP,
};

use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn apply_array2(self, mut x: Array2<f64>) -> Array2<f64> {
        x.mapv_inplace(|v| self.apply(v));
        x
    }

    pub(crate) fn apply_array1(self, mut x: Array1<f64>) -> Array1<f64> {
        x.mapv_inplace(|v| self.apply(v));
        x
    }

    /// Multiplies `grad` elementwise by the activation derivative at `pre`.
    pub(crate) fn mask_deriv(self, grad: &mut Array2<f64>, pre: &Array2<f64>) {
        ndarray::Zip::from(grad)
            .and(pre)
            .for_each(|g, &z| *g *= self.deriv(z));
    }
}

/// One fully connected layer, weights stored input-major (`in x out`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Model architecture: embedding width and MLP hidden sizes.
///
/// The first MLP layer always takes the concatenated pair, so its input
/// width is twice the embedding dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embedding_dim: 32,
            hidden: vec![32, 16, 8],
            activation: Activation::Relu,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("model.embedding_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "model.hidden must be a non-empty list of positive widths".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters shared between server and clients: item embeddings, MLP, and
/// the output vector. This is exactly the set a client uploads after local
/// training; private user embeddings are deliberately not part of it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PublicParams {
    pub item_emb: Array2<f64>,
    pub layers: Vec<DenseLayer>,
    pub out: Array1<f64>,
    pub activation: Activation,
}

impl PublicParams {
    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.item_emb.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embedding_dim();
        if self.layers.is_empty() {
            return Err(Error::Shape("model has no MLP layers".into()));
        }
        if self.layers[0].w.nrows() != 2 * d {
            return Err(Error::Shape(format!(
                "first MLP layer expects input width {} but embeddings have dimension {}",
                self.layers[0].w.nrows(),
                d
            )));
        }
        let mut width = 2 * d;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.w.nrows() != width {
                return Err(Error::Shape(format!(
                    "layer {i} input width {} does not match previous width {width}",
                    layer.w.nrows()
                )));
            }
            if layer.b.len() != layer.w.ncols() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
            width = layer.w.ncols();
        }
        if self.out.len() != width {
            return Err(Error::Shape(format!(
                "output vector length {} does not match last hidden width {width}",
                self.out.len()
            )));
        }
        Ok(())
    }

    /// Flat views over every tensor, in a fixed order shared with
    /// [`PublicGrads`]. Used to drive the optimizer.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        out.push(self.item_emb.as_slice_mut().expect("contiguous"));
        for layer in &mut self.layers {
            out.push(layer.w.as_slice_mut().expect("contiguous"));
            out.push(layer.b.as_slice_mut().expect("contiguous"));
        }
        out.push(self.out.as_slice_mut().expect("contiguous"));
        out
    }

    /// Elementwise mean of several parameter sets. Used for federated
    /// aggregation; all inputs must share shapes.
    pub fn mean(parts: &[PublicParams]) -> Result<PublicParams> {
        Self::weighted_mean(parts, None)
    }

    /// Mean with optional positive weights (normalized internally).
    pub fn weighted_mean(parts: &[PublicParams], weights: Option<&[f64]>) -> Result<PublicParams> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("cannot aggregate zero parameter sets".into()))?;
        let w = match weights {
            Some(w) => {
                if w.len() != parts.len() {
                    return Err(Error::Shape("weight count != parameter set count".into()));
                }
                let total: f64 = w.iter().sum();
                if !(total > 0.0) || w.iter().any(|&x| x < 0.0) {
                    return Err(Error::Invalid("aggregation weights must be non-negative with positive sum".into()));
                }
                w.iter().map(|&x| x / total).collect::<Vec<_>>()
            }
            None => vec![1.0 / parts.len() as f64; parts.len()],
        };
        let mut acc = first.clone();
        acc.item_emb.mapv_inplace(|x| x * w[0]);
        for layer in &mut acc.layers {
            layer.w.mapv_inplace(|x| x * w[0]);
            layer.b.mapv_inplace(|x| x * w[0]);
        }
        acc.out.mapv_inplace(|x| x * w[0]);
        for (part, &wi) in parts.iter().zip(&w).skip(1) {
            if part.item_emb.dim() != acc.item_emb.dim() || part.layers.len() != acc.layers.len() {
                return Err(Error::Shape("aggregation inputs have mismatched shapes".into()));
            }
            acc.item_emb.scaled_add(wi, &part.item_emb);
            for (al, pl) in acc.layers.iter_mut().zip(&part.layers) {
                al.w.scaled_add(wi, &pl.w);
                al.b.scaled_add(wi, &pl.b);
            }
            acc.out.scaled_add(wi, &part.out);
        }
        Ok(acc)
    }
}

/// Full model: private user embeddings plus the public part.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub user_emb: Array2<f64>,
    pub public: PublicParams,
}

impl ModelParams {
    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_emb.ncols() != self.public.embedding_dim() {
            return Err(Error::Shape(
                "user and item embedding dimensions differ".into(),
            ));
        }
        self.public.validate()
    }

    /// Flat views over all tensors: user embeddings first, then the public
    /// tensors in their fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 + 2 * self.public.layers.len());
        out.push(self.user_emb.as_slice_mut().expect("contiguous"));
        out.extend(self.public.tensors_mut());
        out
    }
}

/// Seed-deterministic initialization: embedding entries from N(0, 0.01),
/// small enough that rows can reorient within a short training budget yet
/// large enough that the directional contrastive gradients (which scale with
/// 1/norm) stay on the same footing as the ranking-loss gradients; MLP
/// weights Xavier-uniform, biases zero.
pub fn init_params(
    num_users: usize,
    num_items: usize,
    dims: &ModelDims,
    seed: u64,
) -> Result<ModelParams> {
    dims.validate()?;
    if num_users == 0 || num_items == 0 {
        return Err(Error::Invalid(
            "model needs at least one user and one item".into(),
        ));
    }
    let d = dims.embedding_dim;
    let normal = Normal::new(0.0, 0.1).expect("valid std");

    let mut user_rng = rng::stream(seed, "init/user_emb");
    let user_emb = Array2::from_shape_fn((num_users, d), |_| normal.sample(&mut user_rng));
    let mut item_rng = rng::stream(seed, "init/item_emb");
    let item_emb = Array2::from_shape_fn((num_items, d), |_| normal.sample(&mut item_rng));

    let mut layers = Vec::with_capacity(dims.hidden.len());
    let mut fan_in = 2 * d;
    for (l, &width) in dims.hidden.iter().enumerate() {
        let mut w_rng = rng::indexed_stream(seed, "init/mlp", l as u64);
        let limit = (6.0 / (fan_in + width) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let w = Array2::from_shape_fn((fan_in, width), |_| dist.sample(&mut w_rng));
        layers.push(DenseLayer {
            w,
            b: Array1::zeros(width),
        });
        fan_in = width;
    }

    let mut out_rng = rng::stream(seed, "init/out");
    let limit = (6.0 / (fan_in + 1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let out = Array1::from_shape_fn(fan_in, |_| dist.sample(&mut out_rng));

    let params = ModelParams {
        user_emb,
        public: PublicParams {
            item_emb,
            layers,
            out,
            activation: dims.activation,
        },
    };
    params.validate()?;
    Ok(params)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Score one (user row, item) pair through the shared MLP.
pub fn score_pair(public: &PublicParams, u: ArrayView1<f64>, item: usize) -> f64 {
    let d = public.embedding_dim();
    let v = public.item_emb.row(item);
    let (w_u, w_v) = public.layers[0].w.view().split_at(Axis(0), d);
    let mut a = u.dot(&w_u) + v.dot(&w_v) + &public.layers[0].b;
    a = public.activation.apply_array1(a);
    for layer in &public.layers[1..] {
        a = public.activation.apply_array1(a.dot(&layer.w) + &layer.b);
    }
    sigmoid(a.dot(&public.out))
}

/// Predicted interaction probability for a (user, item) pair.
pub fn predict_score(params: &ModelParams, user: usize, item: usize) -> Result<f64> {
    if user >= params.num_users() || item >= params.public.num_items() {
        return Err(Error::Invalid(format!(
            "pair ({user}, {item}) out of range for {}x{} model",
            params.num_users(),
            params.public.num_items()
        )));
    }
    Ok(score_pair(&params.public, params.user_emb.row(user), item))
}

/// Precomputed item-side first-layer activations, valid for one parameter
/// snapshot. Scoring all items for many users against the same snapshot is
/// the hot path of both evaluation and augmentation ranking; the item half
/// of the first layer does not depend on the user, so it is shared here.
pub struct ItemScoreCache {
    v_w1: Array2<f64>,
}

impl ItemScoreCache {
    pub fn new(public: &PublicParams) -> ItemScoreCache {
        let d = public.embedding_dim();
        let (_, w_v) = public.layers[0].w.view().split_at(Axis(0), d);
        ItemScoreCache {
            v_w1: public.item_emb.dot(&w_v) + &public.layers[0].b,
        }
    }

    /// Scores of every item for one user row.
    pub fn score_all(&self, public: &PublicParams, u: ArrayView1<f64>) -> Array1<f64> {
        let d = public.embedding_dim();
        let (w_u, _) = public.layers[0].w.view().split_at(Axis(0), d);
        let u_part = u.dot(&w_u);
        let mut a = public.activation.apply_array2(&self.v_w1 + &u_part);
        for layer in &public.layers[1..] {
            a = public.activation.apply_array2(a.dot(&layer.w) + &layer.b);
        }
        let mut s = a.dot(&public.out);
        s.mapv_inplace(sigmoid);
        s
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: ModelParams,
}

/// Write the full model to a versioned JSON tensor dump. Values survive the
/// round trip bit-exactly.
pub fn save_checkpoint(path: &Path, model: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer(BufWriter::new(file), &ckpt)
        .map_err(|e| Error::Invalid(format!("cannot serialize checkpoint: {e}")))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], rejecting unknown
/// format versions.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.format_version
        )));
    }
    ckpt.model.validate()?;
    Ok(ckpt.model)
}
