//! Losses and their hand-derived gradients.
//!
//! Three pieces: binary cross-entropy over scored (user, item, label)
//! triples, an InfoNCE contrastive term over cosine similarities, and the
//! combined client objective (BCE plus a weighted contrastive term anchored
//! at the client's own user embedding). Gradients are written out manually
//! and are checked against central finite differences in the test suites.

use super::{sigmoid, PublicParams};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Predicted probabilities are clamped to this range inside the loss value
/// so that mislabeled extremes cannot produce infinite loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// One training example. `user` indexes the user-embedding table passed
/// alongside the triples, which for a federated client is a single row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

impl Triple {
    pub fn new(user: usize, item: usize, label: f64) -> Self {
        Triple { user, item, label }
    }
}

/// Gradients for the public parameter set, shapes mirroring [`PublicParams`].
#[derive(Clone, Debug)]
pub struct PublicGrads {
    pub item_emb: Array2<f64>,
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub out: Array1<f64>,
}

impl PublicGrads {
    pub fn zeros_like(public: &PublicParams) -> Self {
        PublicGrads {
            item_emb: Array2::zeros(public.item_emb.dim()),
            layers: public
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect(),
            out: Array1::zeros(public.out.len()),
        }
    }

    /// Flat views in the order matching [`PublicParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        out.push(self.item_emb.as_slice().expect("contiguous"));
        for (w, b) in &self.layers {
            out.push(w.as_slice().expect("contiguous"));
            out.push(b.as_slice().expect("contiguous"));
        }
        out.push(self.out.as_slice().expect("contiguous"));
        out
    }
}

/// Client-side gradient: the private embedding row plus the public tensors.
#[derive(Clone, Debug)]
pub struct ClientGrad {
    pub u: Array1<f64>,
    pub public: PublicGrads,
}

/// Contrastive settings for the client objective.
#[derive(Clone, Copy, Debug)]
pub struct ClientClConfig {
    pub lambda: f64,
    pub tau: f64,
}

/// The auxiliary user table as one client sees it: the broadcast table, the
/// client's own row, and optionally the server-sampled denominator rows.
/// With `rows` set, the InfoNCE denominator runs over the client's own row
/// plus the sample instead of the full table.
#[derive(Clone, Copy, Debug)]
pub struct UserContrast<'a, 'v> {
    pub table: &'a ArrayView2<'v, f64>,
    pub self_row: usize,
    pub rows: Option<&'a [usize]>,
}

fn check_triples(user_rows: usize, num_items: usize, triples: &[Triple]) -> Result<()> {
    if triples.is_empty() {
        return Err(Error::Invalid("loss over an empty triple list".into()));
    }
    for t in triples {
        if t.user >= user_rows || t.item >= num_items {
            return Err(Error::Invalid(format!(
                "triple ({}, {}) out of range for {user_rows} users x {num_items} items",
                t.user, t.item
            )));
        }
        if t.label != 0.0 && t.label != 1.0 {
            return Err(Error::Invalid(format!(
                "label {} is not binary",
                t.label
            )));
        }
    }
    Ok(())
}

struct BatchForward {
    xu: Array2<f64>,
    xv: Array2<f64>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
    probs: Array1<f64>,
    loss: f64,
}

fn forward_batch(
    user_emb: &ArrayView2<f64>,
    public: &PublicParams,
    triples: &[Triple],
) -> Result<BatchForward> {
    check_triples(user_emb.nrows(), public.num_items(), triples)?;
    let n = triples.len();
    let d = public.embedding_dim();

    let mut xu = Array2::zeros((n, d));
    let mut xv = Array2::zeros((n, d));
    for (r, t) in triples.iter().enumerate() {
        xu.row_mut(r).assign(&user_emb.row(t.user));
        xv.row_mut(r).assign(&public.item_emb.row(t.item));
    }

    let (w_u, w_v) = public.layers[0].w.view().split_at(Axis(0), d);
    let mut pre = Vec::with_capacity(public.layers.len());
    let mut act = Vec::with_capacity(public.layers.len());
    let z0 = xu.dot(&w_u) + xv.dot(&w_v) + &public.layers[0].b;
    act.push(public.activation.apply_array2(z0.clone()));
    pre.push(z0);
    for layer in &public.layers[1..] {
        let z = act.last().unwrap().dot(&layer.w) + &layer.b;
        act.push(public.activation.apply_array2(z.clone()));
        pre.push(z);
    }

    let scores = act.last().unwrap().dot(&public.out);
    let probs = scores.mapv(sigmoid);

    let mut loss = 0.0;
    for (r, t) in triples.iter().enumerate() {
        let p = probs[r].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= t.label * p.ln() + (1.0 - t.label) * (1.0 - p).ln();
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("BCE loss is not finite".into()));
    }
    Ok(BatchForward {
        xu,
        xv,
        pre,
        act,
        probs,
        loss,
    })
}

/// Summed binary cross-entropy of the model over `triples`, with `user_emb`
/// as the user table (a single row for federated clients).
pub fn bce_loss_parts(
    user_emb: &ArrayView2<f64>,
    public: &PublicParams,
    triples: &[Triple],
) -> Result<f64> {
    Ok(forward_batch(user_emb, public, triples)?.loss)
}

/// Summed binary cross-entropy of a full model over `triples`.
pub fn bce_loss(params: &super::ModelParams, triples: &[Triple]) -> Result<f64> {
    bce_loss_parts(&params.user_emb.view(), &params.public, triples)
}

/// BCE loss together with gradients for the user table and public tensors.
///
/// The gradient is the exact derivative of the unclamped objective; the
/// clamp above only guards the reported value. Embedding gradients are
/// accumulated per touched row in triple order.
pub fn bce_backward(
    user_emb: &ArrayView2<f64>,
    public: &PublicParams,
    triples: &[Triple],
) -> Result<(f64, Array2<f64>, PublicGrads)> {
    let fwd = forward_batch(user_emb, public, triples)?;
    let n = triples.len();
    let d = public.embedding_dim();
    let last = public.layers.len() - 1;

    // d loss / d score for sigmoid + BCE collapses to (p - y).
    let mut ds = fwd.probs.clone();
    for (r, t) in triples.iter().enumerate() {
        ds[r] -= t.label;
    }

    let mut grads = PublicGrads::zeros_like(public);
    grads.out = fwd.act[last].t().dot(&ds);

    // Walk the hidden layers backwards, carrying d loss / d activation.
    let mut da = ds
        .view()
        .insert_axis(Axis(1))
        .dot(&public.out.view().insert_axis(Axis(0)));
    for l in (1..public.layers.len()).rev() {
        public.activation.mask_deriv(&mut da, &fwd.pre[l]);
        // dot picks its output layout from the operands; the optimizer
        // wants flat slices, so force standard layout.
        grads.layers[l]
            .0
            .assign(&fwd.act[l - 1].t().dot(&da));
        grads.layers[l].1 = da.sum_axis(Axis(0));
        da = da.dot(&public.layers[l].w.t());
    }

    // First layer: its input is the concatenated embedding pair, so the
    // incoming gradient splits into user and item halves that scatter back
    // onto the touched embedding rows.
    public.activation.mask_deriv(&mut da, &fwd.pre[0]);
    let dw_u = fwd.xu.t().dot(&da);
    let dw_v = fwd.xv.t().dot(&da);
    grads.layers[0].0.slice_mut(s![..d, ..]).assign(&dw_u);
    grads.layers[0].0.slice_mut(s![d.., ..]).assign(&dw_v);
    grads.layers[0].1 = da.sum_axis(Axis(0));
    let (w_u, w_v) = public.layers[0].w.view().split_at(Axis(0), d);
    let dxu = da.dot(&w_u.t());
    let dxv = da.dot(&w_v.t());
    let mut du = Array2::zeros((user_emb.nrows(), d));
    for r in 0..n {
        let t = &triples[r];
        du.row_mut(t.user).scaled_add(1.0, &dxu.row(r));
        grads.item_emb.row_mut(t.item).scaled_add(1.0, &dxv.row(r));
    }
    Ok((fwd.loss, du, grads))
}

fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok(a.dot(&b) / (na * nb))
}

fn check_cl_inputs(views: &ArrayView2<f64>, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature {tau} must be positive")));
    }
    if views.nrows() == 0 {
        return Err(Error::Invalid("contrastive term over zero views".into()));
    }
    Ok(())
}

/// One InfoNCE row: `-log softmax_pos(cos(anchor, view_j) / tau)` with the
/// denominator running over every view row. Returns the loss and its
/// gradient with respect to the anchor (views are treated as constants).
pub fn info_nce_row(
    anchor: ArrayView1<f64>,
    views: &ArrayView2<f64>,
    pos: usize,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    let all: Vec<usize> = (0..views.nrows()).collect();
    info_nce_row_over(anchor, views, pos, tau, &all)
}

/// InfoNCE row with the denominator restricted to `rows` (which must
/// contain `pos`). Backs the sampled-denominator mode for large runs.
pub fn info_nce_row_sampled(
    anchor: ArrayView1<f64>,
    views: &ArrayView2<f64>,
    pos: usize,
    tau: f64,
    rows: &[usize],
) -> Result<(f64, Array1<f64>)> {
    if !rows.contains(&pos) {
        return Err(Error::Invalid(
            "sampled denominator must contain the positive row".into(),
        ));
    }
    info_nce_row_over(anchor, views, pos, tau, rows)
}

fn info_nce_row_over(
    anchor: ArrayView1<f64>,
    views: &ArrayView2<f64>,
    pos: usize,
    tau: f64,
    rows: &[usize],
) -> Result<(f64, Array1<f64>)> {
    check_cl_inputs(views, tau)?;
    if pos >= views.nrows() {
        return Err(Error::Invalid(format!(
            "positive row {pos} out of range for {} views",
            views.nrows()
        )));
    }
    if anchor.len() != views.ncols() {
        return Err(Error::Shape(
            "anchor and view dimensions differ".into(),
        ));
    }
    let na = l2_norm(anchor);
    if na == 0.0 {
        return Err(Error::Numeric("zero-norm anchor row".into()));
    }

    let k = rows.len();
    let mut cos = vec![0.0; k];
    let mut inv_nb = vec![0.0; k];
    let mut pos_at = None;
    for (j, &row) in rows.iter().enumerate() {
        let v = views.row(row);
        let nb = l2_norm(v);
        if nb == 0.0 {
            return Err(Error::Numeric(format!("zero-norm view row {row}")));
        }
        inv_nb[j] = 1.0 / nb;
        cos[j] = anchor.dot(&v) / (na * nb);
        if row == pos {
            pos_at = Some(j);
        }
    }
    let pos_at = pos_at.expect("pos is in rows");

    let max_s = cos
        .iter()
        .map(|c| c / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for c in &cos {
        denom += (c / tau - max_s).exp();
    }
    let lse = max_s + denom.ln();
    let loss = lse - cos[pos_at] / tau;

    // softmax weights, with the positive shifted by -1.
    let mut q = vec![0.0; k];
    for j in 0..k {
        q[j] = (cos[j] / tau - lse).exp();
    }
    q[pos_at] -= 1.0;

    // d cos_j / d a = v_j / (|a||v_j|) - cos_j * a / |a|^2
    let mut grad = Array1::zeros(anchor.len());
    let mut coef = 0.0;
    for (j, &row) in rows.iter().enumerate() {
        grad.scaled_add(q[j] * inv_nb[j] / na, &views.row(row));
        coef += q[j] * cos[j];
    }
    grad.scaled_add(-coef / (na * na), &anchor);
    grad.mapv_inplace(|g| g / tau);

    if !loss.is_finite() {
        return Err(Error::Numeric("InfoNCE loss is not finite".into()));
    }
    Ok((loss, grad))
}

/// Summed InfoNCE over aligned anchor/view rows: row i's positive is view i
/// and its denominator runs over all views.
pub fn info_nce(anchors: &ArrayView2<f64>, views: &ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(info_nce_grad(anchors, views, tau)?.0)
}

/// InfoNCE with the gradient for the anchor matrix.
pub fn info_nce_grad(
    anchors: &ArrayView2<f64>,
    views: &ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if anchors.dim() != views.dim() {
        return Err(Error::Shape(format!(
            "anchors {:?} and views {:?} differ",
            anchors.dim(),
            views.dim()
        )));
    }
    if anchors.nrows() < 2 {
        return Err(Error::Invalid(
            "InfoNCE needs at least two rows to contrast".into(),
        ));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros(anchors.dim());
    for i in 0..anchors.nrows() {
        let (l, g) = info_nce_row(anchors.row(i), views, i, tau)?;
        total += l;
        grad.row_mut(i).assign(&g);
    }
    Ok((total, grad))
}

/// Server-side item alignment term: `beta` times InfoNCE between the shared
/// item embeddings (anchors, trainable) and the auxiliary model's item
/// embeddings (views, constant). With `sample`, each row's denominator is
/// restricted to the sampled rows plus the row's own positive.
pub fn grad_item_cl(
    item_emb: &ArrayView2<f64>,
    aux_item_emb: &ArrayView2<f64>,
    beta: f64,
    tau: f64,
    sample: Option<&[usize]>,
) -> Result<(f64, Array2<f64>)> {
    if beta < 0.0 {
        return Err(Error::Invalid(format!("beta {beta} must be non-negative")));
    }
    let (loss, mut grad) = match sample {
        None => info_nce_grad(item_emb, aux_item_emb, tau)?,
        Some(rows) => {
            if item_emb.dim() != aux_item_emb.dim() {
                return Err(Error::Shape("item embedding shapes differ".into()));
            }
            let mut total = 0.0;
            let mut grad = Array2::zeros(item_emb.dim());
            let mut with_pos = Vec::with_capacity(rows.len() + 1);
            for i in 0..item_emb.nrows() {
                with_pos.clear();
                with_pos.push(i);
                with_pos.extend(rows.iter().copied().filter(|&r| r != i));
                let (l, g) = info_nce_row_over(item_emb.row(i), aux_item_emb, i, tau, &with_pos)?;
                total += l;
                grad.row_mut(i).assign(&g);
            }
            (total, grad)
        }
    };
    grad.mapv_inplace(|g| g * beta);
    Ok((beta * loss, grad))
}

/// Client objective and gradient: summed BCE over the client's triples plus
/// `lambda` times the client's own InfoNCE row against the auxiliary user
/// table. `u_self` is the private embedding; every triple must use user 0.
pub fn grad_total_client_loss(
    u_self: ArrayView1<f64>,
    public: &PublicParams,
    triples: &[Triple],
    u_aux: Option<UserContrast<'_, '_>>,
    cl: &ClientClConfig,
) -> Result<(f64, ClientGrad)> {
    if triples.iter().any(|t| t.user != 0) {
        return Err(Error::Invalid(
            "client triples must reference user row 0".into(),
        ));
    }
    let table = u_self.insert_axis(Axis(0));
    let (mut loss, du_table, public_grads) = bce_backward(&table, public, triples)?;
    let mut du = du_table.row(0).to_owned();
    if let Some(ctx) = u_aux {
        if cl.lambda > 0.0 {
            let (l, g) = match ctx.rows {
                None => info_nce_row(u_self, ctx.table, ctx.self_row, cl.tau)?,
                Some(sample) => {
                    let mut rows = Vec::with_capacity(sample.len() + 1);
                    rows.push(ctx.self_row);
                    rows.extend(sample.iter().copied().filter(|&r| r != ctx.self_row));
                    info_nce_row_sampled(u_self, ctx.table, ctx.self_row, cl.tau, &rows)?
                }
            };
            loss += cl.lambda * l;
            du.scaled_add(cl.lambda, &g);
        }
    }
    Ok((
        loss,
        ClientGrad {
            u: du,
            public: public_grads,
        },
    ))
}
