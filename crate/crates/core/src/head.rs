//! Trainable projection head: BatchNorm(affine=False) -> Linear -> L2
//! normalization, plus the ArcFace objective with analytic gradients.
//!
//! All math is f64; matrices are flat row-major slices.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Embedding width the head compresses to.
pub const DEFAULT_EMBED_DIM: usize = 64;
/// Shape features appended to each backbone vector.
pub const GEOMETRY_DIMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of the affine-free BatchNorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    /// Fresh state: mean 0, variance 1, conventional defaults.
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            epsilon: 1e-5,
            mode: BnMode::Train,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }
}

/// Saved activations from a train-mode forward, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch: usize,
    pub dim: usize,
}

/// Train mode: normalize by batch statistics (biased variance) and update
/// running stats, `r <- (1-momentum)*r + momentum*batch_stat` with the
/// unbiased variance feeding `running_var`. Eval mode: use running stats,
/// state untouched, no cache.
pub fn batchnorm_forward(
    x: &[f64],
    batch: usize,
    state: &mut BatchNormState,
) -> Result<(Vec<f64>, Option<BnCache>)> {
    let dim = state.dim();
    if x.len() != batch * dim {
        return Err(Error::Domain(format!(
            "batchnorm input length {} != batch {} x dim {}",
            x.len(),
            batch,
            dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite batchnorm input".into()));
    }
    match state.mode {
        BnMode::Eval => {
            let mut y = vec![0.0; x.len()];
            for b in 0..batch {
                for d in 0..dim {
                    y[b * dim + d] = (x[b * dim + d] - state.running_mean[d])
                        / (state.running_var[d] + state.epsilon).sqrt();
                }
            }
            Ok((y, None))
        }
        BnMode::Train => {
            if batch < 2 {
                return Err(Error::Domain(
                    "train-mode batchnorm requires batch size >= 2".into(),
                ));
            }
            let nf = batch as f64;
            let mut mean = vec![0.0; dim];
            for b in 0..batch {
                for d in 0..dim {
                    mean[d] += x[b * dim + d];
                }
            }
            for m in &mut mean {
                *m /= nf;
            }
            let mut var = vec![0.0; dim];
            for b in 0..batch {
                for d in 0..dim {
                    let c = x[b * dim + d] - mean[d];
                    var[d] += c * c;
                }
            }
            for v in &mut var {
                *v /= nf; // biased
            }
            let inv_std: Vec<f64> =
                var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
            let mut y = vec![0.0; x.len()];
            for b in 0..batch {
                for d in 0..dim {
                    y[b * dim + d] = (x[b * dim + d] - mean[d]) * inv_std[d];
                }
            }
            let unbiased = nf / (nf - 1.0);
            for d in 0..dim {
                state.running_mean[d] =
                    (1.0 - state.momentum) * state.running_mean[d] + state.momentum * mean[d];
                state.running_var[d] = (1.0 - state.momentum) * state.running_var[d]
                    + state.momentum * var[d] * unbiased;
            }
            let cache = BnCache { x_hat: y.clone(), inv_std, batch, dim };
            Ok((y, Some(cache)))
        }
    }
}

/// Exact gradient of the train-mode normalization map:
/// `dX = inv_std/B * (B*dY - sum(dY) - x_hat * sum(dY * x_hat))` per column.
pub fn batchnorm_backward(dy: &[f64], cache: &BnCache) -> Result<Vec<f64>> {
    let (batch, dim) = (cache.batch, cache.dim);
    if dy.len() != batch * dim {
        return Err(Error::Domain(format!(
            "batchnorm_backward shape mismatch: dY length {} vs cache {}x{}",
            dy.len(),
            batch,
            dim
        )));
    }
    let nf = batch as f64;
    let mut sum_dy = vec![0.0; dim];
    let mut sum_dy_xhat = vec![0.0; dim];
    for b in 0..batch {
        for d in 0..dim {
            sum_dy[d] += dy[b * dim + d];
            sum_dy_xhat[d] += dy[b * dim + d] * cache.x_hat[b * dim + d];
        }
    }
    let mut dx = vec![0.0; batch * dim];
    for b in 0..batch {
        for d in 0..dim {
            dx[b * dim + d] = cache.inv_std[d] / nf
                * (nf * dy[b * dim + d]
                    - sum_dy[d]
                    - cache.x_hat[b * dim + d] * sum_dy_xhat[d]);
        }
    }
    Ok(dx)
}

// --- head parameters ----------------------------------------------------

/// Linear weights, bias, and the ArcFace class-weight matrix, stored as
/// one flat vector so the optimizer can treat the model as a single
/// parameter block. Layout: `[W_proj (d_out x d_in) | b_proj | W_arc
/// (n_classes x d_out)]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub d_in: usize,
    pub d_out: usize,
    pub n_classes: usize,
    pub data: Vec<f64>,
}

impl HeadParams {
    pub fn n_params(d_in: usize, d_out: usize, n_classes: usize) -> usize {
        d_out * d_in + d_out + n_classes * d_out
    }

    pub fn zeros(d_in: usize, d_out: usize, n_classes: usize) -> Self {
        Self {
            d_in,
            d_out,
            n_classes,
            data: vec![0.0; Self::n_params(d_in, d_out, n_classes)],
        }
    }

    /// W_proj uniform with bound 1/sqrt(d_in), b_proj zero, W_arc rows
    /// standard Gaussian then L2-normalized.
    pub fn init(d_in: usize, d_out: usize, n_classes: usize, seed: u64) -> Self {
        let mut p = Self::zeros(d_in, d_out, n_classes);
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        for i in 0..d_out * d_in {
            p.data[i] = (2.0 * rng.next_f64() - 1.0) * bound;
        }
        let arc0 = d_out * d_in + d_out;
        for row in 0..n_classes {
            let s = arc0 + row * d_out;
            let mut norm2 = 0.0;
            for j in 0..d_out {
                let g = rng.next_gauss();
                p.data[s + j] = g;
                norm2 += g * g;
            }
            let inv = 1.0 / norm2.sqrt();
            for j in 0..d_out {
                p.data[s + j] *= inv;
            }
        }
        p
    }

    fn proj_len(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn w_proj(&self) -> &[f64] {
        &self.data[..self.proj_len()]
    }

    pub fn b_proj(&self) -> &[f64] {
        &self.data[self.proj_len()..self.proj_len() + self.d_out]
    }

    pub fn w_arc(&self) -> &[f64] {
        &self.data[self.proj_len() + self.d_out..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcFaceConfig {
    pub scale: f64,
    pub margin: f64,
}

use serde::{Deserialize, Serialize};

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.5 }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Domain("ArcFace scale must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Domain("ArcFace margin must be in [0, pi/2)".into()));
        }
        Ok(())
    }
}

// --- embedding ----------------------------------------------------------

/// Eval-mode embedding of a single input: BN -> Linear -> L2 normalize.
pub fn head_embed(x: &[f64], params: &HeadParams, bn: &BatchNormState) -> Result<Vec<f64>> {
    if bn.mode != BnMode::Eval {
        return Err(Error::Domain("head_embed requires eval-mode batchnorm".into()));
    }
    if x.len() != params.d_in || bn.dim() != params.d_in {
        return Err(Error::Domain(format!(
            "head_embed input length {} != d_in {}",
            x.len(),
            params.d_in
        )));
    }
    let mut bn_state = bn.clone();
    let (x_hat, _) = batchnorm_forward(x, 1, &mut bn_state)?;
    let w = params.w_proj();
    let b = params.b_proj();
    let mut u = vec![0.0; params.d_out];
    for o in 0..params.d_out {
        let row = &w[o * params.d_in..(o + 1) * params.d_in];
        let mut acc = b[o];
        for i in 0..params.d_in {
            acc += row[i] * x_hat[i];
        }
        u[o] = acc;
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Domain(
            "degenerate embedding: pre-normalization vector is zero".into(),
        ));
    }
    for v in &mut u {
        *v /= norm;
    }
    Ok(u)
}

// --- ArcFace ------------------------------------------------------------

/// Row-normalizes `w_arc`; returns (w_hat, row norms).
fn normalize_rows(w_arc: &[f64], n_classes: usize, d_out: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut w_hat = vec![0.0; n_classes * d_out];
    let mut w_norm = vec![0.0; n_classes];
    for j in 0..n_classes {
        let row = &w_arc[j * d_out..(j + 1) * d_out];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Domain(format!("ArcFace class row {j} has zero norm")));
        }
        w_norm[j] = norm;
        for o in 0..d_out {
            w_hat[j * d_out + o] = row[o] / norm;
        }
    }
    Ok((w_hat, w_norm))
}

/// The ArcFace logit matrix (B x n_classes): `s*cos(theta)` everywhere
/// except the target column, which carries the margin. Exposed so the
/// margin arithmetic is auditable independently of the loss.
pub fn arcface_logits(
    e: &[f64],
    batch: usize,
    d_out: usize,
    w_arc: &[f64],
    n_classes: usize,
    labels: &[usize],
    cfg: &ArcFaceConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (w_hat, _) = normalize_rows(w_arc, n_classes, d_out)?;
    let cos_m = cfg.margin.cos();
    let sin_m = cfg.margin.sin();
    let guard = (std::f64::consts::PI - cfg.margin).cos();
    let mm = cfg.margin * sin_m;
    let mut logits = vec![0.0; batch * n_classes];
    for b in 0..batch {
        for j in 0..n_classes {
            let mut c = 0.0;
            for o in 0..d_out {
                c += e[b * d_out + o] * w_hat[j * d_out + o];
            }
            logits[b * n_classes + j] = if j == labels[b] {
                if c > guard {
                    let sin = (1.0 - c * c).max(0.0).sqrt();
                    cfg.scale * (c * cos_m - sin * sin_m)
                } else {
                    cfg.scale * (c - mm)
                }
            } else {
                cfg.scale * c
            };
        }
    }
    Ok(logits)
}

/// ArcFace loss and exact gradients.
///
/// With row-normalized class weights `w_hat`, the target logit is
/// `s*cos(theta + m)` computed as `cos*cos_m - sin*sin_m`; when
/// `cos <= cos(pi - m)` the monotone fallback `cos - m*sin_m` is used.
/// Returns (mean cross-entropy, dL/dE, dL/dW_arc).
pub fn arcface_loss(
    e: &[f64],
    batch: usize,
    d_out: usize,
    w_arc: &[f64],
    n_classes: usize,
    labels: &[usize],
    cfg: &ArcFaceConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if e.len() != batch * d_out || w_arc.len() != n_classes * d_out || labels.len() != batch {
        return Err(Error::Domain("arcface_loss shape mismatch".into()));
    }
    for b in 0..batch {
        let norm = e[b * d_out..(b + 1) * d_out]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!(
                "arcface_loss row {b} has norm {norm}, not unit within 1e-4"
            )));
        }
    }
    for (b, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Domain(format!(
                "label {y} out of range for {n_classes} classes (row {b})"
            )));
        }
    }

    // Row-normalize the class weights, remembering norms for the chain rule.
    let mut w_hat = vec![0.0; n_classes * d_out];
    let mut w_norm = vec![0.0; n_classes];
    for j in 0..n_classes {
        let row = &w_arc[j * d_out..(j + 1) * d_out];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Domain(format!("ArcFace class row {j} has zero norm")));
        }
        w_norm[j] = norm;
        for o in 0..d_out {
            w_hat[j * d_out + o] = row[o] / norm;
        }
    }

    let cos_m = cfg.margin.cos();
    let sin_m = cfg.margin.sin();
    let guard = (std::f64::consts::PI - cfg.margin).cos();
    let mm = cfg.margin * sin_m;

    let mut cosines = vec![0.0; batch * n_classes];
    for b in 0..batch {
        for j in 0..n_classes {
            let mut acc = 0.0;
            for o in 0..d_out {
                acc += e[b * d_out + o] * w_hat[j * d_out + o];
            }
            cosines[b * n_classes + j] = acc;
        }
    }

    // logits and the target-column derivative factor d(logit)/d(cos)/s
    let mut logits = vec![0.0; batch * n_classes];
    let mut target_dfactor = vec![1.0; batch];
    for b in 0..batch {
        for j in 0..n_classes {
            let c = cosines[b * n_classes + j];
            logits[b * n_classes + j] = if j == labels[b] {
                if c > guard {
                    let sin = (1.0 - c * c).max(0.0).sqrt().max(1e-12);
                    target_dfactor[b] = cos_m + c / sin * sin_m;
                    cfg.scale * (c * cos_m - sin * sin_m)
                } else {
                    target_dfactor[b] = 1.0;
                    cfg.scale * (c - mm)
                }
            } else {
                cfg.scale * c
            };
        }
    }

    // softmax cross-entropy, mean over the batch
    let nf = batch as f64;
    let mut loss = 0.0;
    let mut dz = vec![0.0; batch * n_classes]; // dL/dlogits
    for b in 0..batch {
        let row = &logits[b * n_classes..(b + 1) * n_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[labels[b]]) / nf;
        for j in 0..n_classes {
            let p = (row[j] - max).exp() / denom;
            dz[b * n_classes + j] = (p - if j == labels[b] { 1.0 } else { 0.0 }) / nf;
        }
    }

    // dL/dcos, folding the scale and margin chain
    let mut g = dz;
    for b in 0..batch {
        for j in 0..n_classes {
            let f = if j == labels[b] { target_dfactor[b] } else { 1.0 };
            g[b * n_classes + j] *= cfg.scale * f;
        }
    }

    let mut de = vec![0.0; batch * d_out];
    for b in 0..batch {
        for j in 0..n_classes {
            let gij = g[b * n_classes + j];
            if gij == 0.0 {
                continue;
            }
            for o in 0..d_out {
                de[b * d_out + o] += gij * w_hat[j * d_out + o];
            }
        }
    }

    let mut dw_hat = vec![0.0; n_classes * d_out];
    for b in 0..batch {
        for j in 0..n_classes {
            let gij = g[b * n_classes + j];
            if gij == 0.0 {
                continue;
            }
            for o in 0..d_out {
                dw_hat[j * d_out + o] += gij * e[b * d_out + o];
            }
        }
    }
    // back through the row normalization: dW = (dw_hat - w_hat*(w_hat . dw_hat)) / norm
    let mut dw_arc = vec![0.0; n_classes * d_out];
    for j in 0..n_classes {
        let s = j * d_out;
        let dot: f64 = (0..d_out).map(|o| w_hat[s + o] * dw_hat[s + o]).sum();
        for o in 0..d_out {
            dw_arc[s + o] = (dw_hat[s + o] - w_hat[s + o] * dot) / w_norm[j];
        }
    }

    Ok((loss, de, dw_arc))
}

// --- full head chain ----------------------------------------------------

/// Loss and parameter gradients for a batch of already-normalized inputs
/// (the BatchNorm output). Returns `(loss, grads, dX_hat)` where `grads`
/// shares `HeadParams` layout and `dX_hat` is produced only on request.
pub fn head_loss_grads(
    x_hat: &[f64],
    batch: usize,
    labels: &[usize],
    params: &HeadParams,
    cfg: &ArcFaceConfig,
    want_dx: bool,
) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
    let (d_in, d_out, n_classes) = (params.d_in, params.d_out, params.n_classes);
    if x_hat.len() != batch * d_in {
        return Err(Error::Domain("head_loss_grads input shape mismatch".into()));
    }
    let w = params.w_proj();
    let b_vec = params.b_proj();

    // Linear: U = X_hat W^T + b
    let mut u = vec![0.0; batch * d_out];
    for b in 0..batch {
        let xrow = &x_hat[b * d_in..(b + 1) * d_in];
        for o in 0..d_out {
            let wrow = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b_vec[o];
            for i in 0..d_in {
                acc += wrow[i] * xrow[i];
            }
            u[b * d_out + o] = acc;
        }
    }

    // L2 normalize rows
    let mut norms = vec![0.0; batch];
    let mut e = vec![0.0; batch * d_out];
    for b in 0..batch {
        let n = u[b * d_out..(b + 1) * d_out]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if n < 1e-12 {
            return Err(Error::Domain(format!(
                "degenerate embedding in batch row {b}: zero pre-normalization vector"
            )));
        }
        norms[b] = n;
        for o in 0..d_out {
            e[b * d_out + o] = u[b * d_out + o] / n;
        }
    }

    let (loss, de, dw_arc) =
        arcface_loss(&e, batch, d_out, params.w_arc(), n_classes, labels, cfg)?;

    // back through normalization: dU = (dE - E*(E . dE)) / norm
    let mut du = vec![0.0; batch * d_out];
    for b in 0..batch {
        let s = b * d_out;
        let dot: f64 = (0..d_out).map(|o| e[s + o] * de[s + o]).sum();
        for o in 0..d_out {
            du[s + o] = (de[s + o] - e[s + o] * dot) / norms[b];
        }
    }

    // back through Linear
    let mut grads = vec![0.0; params.data.len()];
    {
        let (dw, rest) = grads.split_at_mut(d_out * d_in);
        let (db, darc) = rest.split_at_mut(d_out);
        for b in 0..batch {
            let xrow = &x_hat[b * d_in..(b + 1) * d_in];
            for o in 0..d_out {
                let g = du[b * d_out + o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let wrow = &mut dw[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    wrow[i] += g * xrow[i];
                }
            }
        }
        darc.copy_from_slice(&dw_arc);
    }

    let dx = if want_dx {
        let mut dx = vec![0.0; batch * d_in];
        for b in 0..batch {
            for o in 0..d_out {
                let g = du[b * d_out + o];
                if g == 0.0 {
                    continue;
                }
                let wrow = &w[o * d_in..(o + 1) * d_in];
                let drow = &mut dx[b * d_in..(b + 1) * d_in];
                for i in 0..d_in {
                    drow[i] += g * wrow[i];
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    Ok((loss, grads, dx))
}
