//! The fixed scoring rule under test.
//!
//! A [`ToyDecoder`] maps a representation `z` in context `c` to a softmax
//! over a small vocabulary: `softmax(W φ(z + e_c) + b)`, where `φ` is the
//! identity (linear variant) or `tanh(U x + c₀)` (two-layer variant). Log
//! scores are floored at `log η` with `η = 1 / V`.
//!
//! Decoders are trained on the text law only. Extra vocabulary tokens can be
//! reserved as readouts for non-target attributes; they are never targets
//! during training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingSet, TARGET};
use crate::error::{Error, Result};
use crate::modes::ModeSpectrum;
use crate::npy;
use crate::rng;
use crate::stats;

pub const MAX_EPOCHS: usize = 2000;
pub const GRAD_TOL: f64 = 1e-5;
/// Cap applied to the isotropy ratio when one mode class carries no gradient.
pub const RATIO_CAP: f64 = 1e6;

/// Fixed nonlinear layer of the two-layer variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hidden {
    /// h×d input weights.
    pub u: Array2<f64>,
    pub c: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoder {
    /// V×d (linear) or V×h (two-layer) readout weights.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// One offset per context, added to `z` before scoring.
    pub context_embed: Array2<f64>,
    pub hidden: Option<Hidden>,
    /// Vocabulary token per class of each attribute. The target attribute
    /// reads tokens `0..K` unless overridden.
    pub readouts: BTreeMap<String, Vec<usize>>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Vocabulary size; `None` uses the target class count.
    pub vocab: Option<usize>,
    pub init_std: f64,
    pub weight_decay: f64,
    /// Hidden width of the two-layer variant; 0 selects the linear decoder.
    pub hidden: usize,
    /// Scale of the fixed hidden weights: `U ~ N(0, gain² / d)`.
    pub hidden_gain: f64,
    pub train_hidden: bool,
    pub max_epochs: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab: None,
            init_std: 0.01,
            weight_decay: 1e-4,
            hidden: 0,
            hidden_gain: 1.0,
            train_hidden: false,
            max_epochs: MAX_EPOCHS,
        }
    }
}

impl ToyDecoder {
    /// A linear decoder with the given readout and no context offsets.
    pub fn linear(w: Array2<f64>, b: Array1<f64>) -> Self {
        let d = w.ncols();
        Self {
            w,
            b,
            context_embed: Array2::zeros((1, d)),
            hidden: None,
            readouts: BTreeMap::new(),
            converged: true,
            iterations: 0,
        }
    }

    pub fn vocab(&self) -> usize {
        self.w.nrows()
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.context_embed.ncols()
    }

    pub fn num_contexts(&self) -> usize {
        self.context_embed.nrows()
    }

    /// `log η = -log V`.
    pub fn log_floor(&self) -> f64 {
        -(self.vocab() as f64).ln()
    }

    pub fn with_readout(mut self, attribute: &str, tokens: Vec<usize>) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.vocab() });
        }
        self.readouts.insert(attribute.to_string(), tokens);
        Ok(self)
    }

    /// Token that scores class `class` of `attribute`.
    pub fn readout_token(&self, attribute: &str, class: usize) -> usize {
        match self.readouts.get(attribute) {
            Some(tokens) => tokens[class],
            None => class,
        }
    }

    pub fn readout_tokens(&self, attribute: &str, classes: usize) -> Vec<usize> {
        (0..classes).map(|k| self.readout_token(attribute, k)).collect()
    }

    fn check(&self, c: usize, y: usize) -> Result<()> {
        if y >= self.vocab() {
            return Err(Error::TokenOutOfRange { token: y, vocab: self.vocab() });
        }
        if c >= self.num_contexts() {
            return Err(Error::ContextOutOfRange { context: c, contexts: self.num_contexts() });
        }
        Ok(())
    }

    fn features(&self, c: usize, z: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let x = &z + &self.context_embed.row(c);
        let h = match &self.hidden {
            Some(hid) => (hid.u.dot(&x) + &hid.c).mapv(f64::tanh),
            None => x.clone(),
        };
        (x, h)
    }

    /// Unfloored logits.
    pub fn logits(&self, c: usize, z: ArrayView1<f64>) -> Array1<f64> {
        let (_, h) = self.features(c, z);
        self.w.dot(&h) + &self.b
    }

    /// Unfloored `log q(y | z, c)`.
    pub fn raw_log_prob(&self, c: usize, z: ArrayView1<f64>, y: usize) -> f64 {
        stats::log_softmax_at(&self.logits(c, z).to_vec(), y)
    }

    /// `ℓ(c, z, y) = max(log q(y | z, c), log η)`.
    pub fn log_score(&self, c: usize, z: ArrayView1<f64>, y: usize) -> Result<f64> {
        self.check(c, y)?;
        Ok(self.raw_log_prob(c, z, y).max(self.log_floor()))
    }

    /// Log scores of every vocabulary token, floored.
    pub fn log_scores(&self, c: usize, z: ArrayView1<f64>) -> Array1<f64> {
        let logits = self.logits(c, z);
        let lse = stats::log_sum_exp(logits.as_slice().expect("contiguous"));
        let floor = self.log_floor();
        logits.mapv(|v| (v - lse).max(floor))
    }

    /// `∇_z ℓ(c, z, y)` and whether the floor is active (gradient then zero).
    pub fn grad_log_score(&self, c: usize, z: ArrayView1<f64>, y: usize) -> Result<(Array1<f64>, bool)> {
        self.check(c, y)?;
        let (_, h) = self.features(c, z);
        let logits = self.w.dot(&h) + &self.b;
        let logits = logits.as_slice().expect("contiguous");
        if stats::log_softmax_at(logits, y) < self.log_floor() {
            return Ok((Array1::zeros(self.dim()), true));
        }
        let coef = Array1::from(stats::one_hot_residual(logits, y));
        let dh = self.w.t().dot(&coef);
        let grad = match &self.hidden {
            Some(hid) => hid.u.t().dot(&(&dh * &h.mapv(|v| 1.0 - v * v))),
            None => dh,
        };
        Ok((grad, false))
    }

    /// Global Lipschitz bound of `z ↦ ℓ(c, z, y)`: the largest pairwise
    /// readout-row distance, times `‖U‖₂` for the two-layer variant.
    pub fn analytic_lipschitz(&self) -> f64 {
        let rows = max_row_gap(&self.w);
        match &self.hidden {
            Some(hid) => rows * operator_norm(&hid.u),
            None => rows,
        }
    }

    /// Forced choice among the attribute's readout tokens.
    pub fn predict(&self, c: usize, z: ArrayView1<f64>, tokens: &[usize]) -> usize {
        let logits = self.logits(c, z);
        crate::probe::argmax(tokens.iter().map(|&t| logits[t]))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, a: &Array2<f64>| {
            npy::write_f64(&dir.join(name), &[a.nrows(), a.ncols()], a.as_standard_layout().as_slice().expect("standard"))
        };
        put("w.npy", &self.w)?;
        put("context.npy", &self.context_embed)?;
        npy::write_f64(&dir.join("b.npy"), &[self.b.len()], &self.b.to_vec())?;
        if let Some(hid) = &self.hidden {
            put("u.npy", &hid.u)?;
            npy::write_f64(&dir.join("c.npy"), &[hid.c.len()], &hid.c.to_vec())?;
        }
        let manifest = CheckpointManifest {
            vocab: self.vocab(),
            dim: self.dim(),
            contexts: self.num_contexts(),
            hidden: self.hidden.as_ref().map(|h| h.u.nrows()),
            readouts: self.readouts.clone(),
            converged: self.converged,
            iterations: self.iterations,
        };
        let path = dir.join("decoder.json");
        let text = serde_json::to_string_pretty(&manifest).expect("serializable");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: manifest_path.to_path_buf(),
            source: e,
        })?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let matrix = |name: &str, shape: [usize; 2]| -> Result<Array2<f64>> {
            let path = dir.join(name);
            let arr = npy::read(&path)?;
            if arr.shape != shape {
                return Err(Error::ShapeMismatch { what: name.into(), expected: shape.to_vec(), found: arr.shape.clone() });
            }
            Ok(Array2::from_shape_vec((shape[0], shape[1]), arr.to_f64().ok_or_else(|| Error::Npy { path: path.clone(), reason: "expected a float array".into() })?).expect("checked"))
        };
        let vector = |name: &str, len: usize| -> Result<Array1<f64>> {
            let path = dir.join(name);
            let arr = npy::read(&path)?;
            if arr.shape != [len] {
                return Err(Error::ShapeMismatch { what: name.into(), expected: vec![len], found: arr.shape.clone() });
            }
            Ok(Array1::from(arr.to_f64().ok_or_else(|| Error::Npy { path: path.clone(), reason: "expected a float array".into() })?))
        };
        let width = manifest.hidden.unwrap_or(manifest.dim);
        let hidden = match manifest.hidden {
            Some(h) => Some(Hidden { u: matrix("u.npy", [h, manifest.dim])?, c: vector("c.npy", h)? }),
            None => None,
        };
        Ok(Self {
            w: matrix("w.npy", [manifest.vocab, width])?,
            b: vector("b.npy", manifest.vocab)?,
            context_embed: matrix("context.npy", [manifest.contexts, manifest.dim])?,
            hidden,
            readouts: manifest.readouts,
            converged: manifest.converged,
            iterations: manifest.iterations,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    vocab: usize,
    dim: usize,
    contexts: usize,
    hidden: Option<usize>,
    readouts: BTreeMap<String, Vec<usize>>,
    converged: bool,
    iterations: usize,
}

fn max_row_gap(w: &Array2<f64>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..w.nrows() {
        for j in i + 1..w.nrows() {
            let diff = &w.row(i) - &w.row(j);
            best = best.max(diff.dot(&diff).sqrt());
        }
    }
    best
}

/// Spectral norm via the top eigenvalue of `UᵀU`.
pub fn operator_norm(u: &Array2<f64>) -> f64 {
    let gram = u.t().dot(u);
    match stats::top_k_eigen(&gram, 1) {
        Ok(basis) => basis.eigenvalues[0].max(0.0).sqrt(),
        Err(_) => 0.0,
    }
}

/// Trainable parameter block.
#[derive(Debug, Clone)]
struct Params {
    w: Array2<f64>,
    b: Array1<f64>,
    ctx: Array2<f64>,
    u: Option<Array2<f64>>,
    c: Option<Array1<f64>>,
}

impl Params {
    fn norm2(&self) -> f64 {
        let sq = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| v * v).sum::<f64>();
        sq(&mut self.w.iter())
            + sq(&mut self.b.iter())
            + sq(&mut self.ctx.iter())
            + self.u.as_ref().map_or(0.0, |u| sq(&mut u.iter()))
            + self.c.as_ref().map_or(0.0, |c| sq(&mut c.iter()))
    }

    /// `self + beta (self − previous)`.
    fn extrapolate(&self, previous: &Params, beta: f64) -> Params {
        let ext2 = |a: &Array2<f64>, b: &Array2<f64>| a + &((a - b) * beta);
        let ext1 = |a: &Array1<f64>, b: &Array1<f64>| a + &((a - b) * beta);
        Params {
            w: ext2(&self.w, &previous.w),
            b: ext1(&self.b, &previous.b),
            ctx: ext2(&self.ctx, &previous.ctx),
            u: self.u.as_ref().map(|u| ext2(u, previous.u.as_ref().expect("paired"))),
            c: self.c.as_ref().map(|c| ext1(c, previous.c.as_ref().expect("paired"))),
        }
    }

    fn step(&self, grad: &Params, size: f64) -> Params {
        Params {
            w: &self.w - &(&grad.w * size),
            b: &self.b - &(&grad.b * size),
            ctx: &self.ctx - &(&grad.ctx * size),
            u: self.u.as_ref().map(|u| u - &(grad.u.as_ref().expect("paired") * size)),
            c: self.c.as_ref().map(|c| c - &(grad.c.as_ref().expect("paired") * size)),
        }
    }
}

/// Mean unclipped cross-entropy over the batch plus weight decay on the
/// weight matrices, and its gradient. `fixed` supplies a frozen hidden layer
/// when `params` does not train it.
fn objective(
    params: &Params,
    fixed: Option<&Hidden>,
    x: &Array2<f64>,
    contexts: &[usize],
    targets: &[usize],
    weight_decay: f64,
) -> (f64, Params) {
    let n = x.nrows() as f64;
    let inputs = x + &params.ctx.select(Axis(0), contexts);
    let (u, c) = match (&params.u, fixed) {
        (Some(u), _) => (Some(u), params.c.as_ref()),
        (None, Some(h)) => (Some(&h.u), Some(&h.c)),
        (None, None) => (None, None),
    };
    let hidden = u.map(|u| (inputs.dot(&u.t()) + c.expect("paired")).mapv(f64::tanh));
    let feats = hidden.as_ref().unwrap_or(&inputs);
    let mut g = feats.dot(&params.w.t()) + &params.b;
    let mut loss = 0.0;
    for (mut row, &y) in g.outer_iter_mut().zip(targets) {
        let lse = stats::log_sum_exp(row.as_slice().expect("standard"));
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
        row[y] -= 1.0;
    }
    g /= n;
    loss /= n;
    let mut decay = params.w.iter().map(|v| v * v).sum::<f64>();
    let grad_w = g.t().dot(feats) + &params.w * weight_decay;
    let grad_b = g.sum_axis(Axis(0));
    let d_feats = g.dot(&params.w);
    let (d_inputs, grad_u, grad_c) = match (&hidden, u) {
        (Some(h), Some(u)) => {
            let da = &d_feats * &h.mapv(|v| 1.0 - v * v);
            let d_in = da.dot(u);
            if params.u.is_some() {
                decay += u.iter().map(|v| v * v).sum::<f64>();
                let gu = da.t().dot(&inputs) + u * weight_decay;
                (d_in, Some(gu), Some(da.sum_axis(Axis(0))))
            } else {
                (d_in, None, None)
            }
        }
        _ => (d_feats, None, None),
    };
    let mut grad_ctx = Array2::zeros(params.ctx.dim());
    for (row, &cid) in d_inputs.outer_iter().zip(contexts) {
        let mut target = grad_ctx.row_mut(cid);
        target += &row;
    }
    loss += 0.5 * weight_decay * decay;
    (
        loss,
        Params { w: grad_w, b: grad_b, ctx: grad_ctx, u: grad_u, c: grad_c },
    )
}

/// Maximum-likelihood fit on the text law. Samples need a `target`
/// attribute; a `context` attribute is optional.
pub fn train_decoder(text_law: &EmbeddingSet, seed: u64, cfg: &DecoderConfig) -> Result<ToyDecoder> {
    let targets = text_law.targets()?;
    let vocab = cfg.vocab.unwrap_or(text_law.classes(TARGET)?);
    if vocab < 2 {
        return Err(Error::InvalidParameter(format!("decoder vocabulary must have at least 2 tokens, got {vocab}")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab });
    }
    let d = text_law.dim();
    let contexts = text_law.contexts();
    let num_contexts = text_law.num_contexts();
    let mut rng = rng::stream(seed, rng::streams::DECODER_INIT);
    let init = Normal::new(0.0, cfg.init_std.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let x = text_law.features();
    let hidden = (cfg.hidden > 0).then(|| {
        let gain = Normal::new(0.0, cfg.hidden_gain / (d as f64).sqrt()).expect("finite gain");
        let u = Array2::from_shape_fn((cfg.hidden, d), |_| gain.sample(&mut rng));
        // each unit's transition passes through a random training point
        let c = Array1::from_shape_fn(cfg.hidden, |k| {
            let anchor = rng.random_range(0..x.nrows());
            -u.row(k).dot(&x.row(anchor))
        });
        Hidden { u, c }
    });
    let width = hidden.as_ref().map_or(d, |h| h.u.nrows());
    let mut params = Params {
        w: Array2::from_shape_fn((vocab, width), |_| init.sample(&mut rng)),
        b: Array1::zeros(vocab),
        ctx: Array2::zeros((num_contexts, d)),
        u: None,
        c: None,
    };
    let fixed = if cfg.train_hidden {
        let h = hidden.clone().expect("train_hidden needs a hidden layer");
        params.u = Some(h.u);
        params.c = Some(h.c);
        None
    } else {
        hidden.clone()
    };
    let fit = gradient_descent(params, cfg.max_epochs, |p| {
        objective(p, fixed.as_ref(), &x, &contexts, targets, cfg.weight_decay)
    });
    let p = fit.params;
    let hidden = match (p.u, p.c) {
        (Some(u), Some(c)) => Some(Hidden { u, c }),
        _ => fixed,
    };
    Ok(ToyDecoder {
        w: p.w,
        b: p.b,
        context_embed: p.ctx,
        hidden,
        readouts: BTreeMap::new(),
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

struct Descent {
    params: Params,
    converged: bool,
    iterations: usize,
}

/// Accelerated full-batch gradient descent: Nesterov extrapolation with a
/// backtracking (Armijo) step at the extrapolated point, and a momentum
/// restart whenever the objective increases.
fn gradient_descent(params: Params, max_epochs: usize, f: impl Fn(&Params) -> (f64, Params)) -> Descent {
    let mut x = params;
    let (mut fx, _) = f(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut step = 1.0;
    for epoch in 0..max_epochs {
        let (fy, gy) = f(&y);
        let g2 = gy.norm2();
        if g2.sqrt() < GRAD_TOL {
            return Descent { params: y, converged: true, iterations: epoch };
        }
        step *= 1.25;
        let (x_new, f_new) = loop {
            let trial = y.step(&gy, step);
            let (l, _) = f(&trial);
            if l <= fy - 0.5 * step * g2 {
                break (trial, l);
            }
            step *= 0.5;
            if step < 1e-16 {
                return Descent { params: y, converged: false, iterations: epoch };
            }
        };
        if f_new > fx {
            // restart from the last iterate without momentum
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        y = x_new.extrapolate(&x, beta);
        x = x_new;
        fx = f_new;
        t = t_new;
    }
    let (_, g) = f(&x);
    let converged = g.norm2().sqrt() < GRAD_TOL;
    Descent { params: x, converged, iterations: max_epochs }
}

/// Mean floored loss `-ℓ` and the per-sample losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossEntropy {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

fn per_sample_losses(dec: &ToyDecoder, set: &EmbeddingSet, x: &Array2<f64>, attribute: &str) -> Result<Vec<f64>> {
    let labels = set.labels(attribute)?;
    let contexts = set.contexts();
    x.outer_iter()
        .zip(labels.iter().zip(&contexts))
        .map(|(z, (&a, &c))| Ok(-dec.log_score(c, z, dec.readout_token(attribute, a))?))
        .collect()
}

/// Floored cross-entropy of the target tokens.
pub fn cross_entropy(dec: &ToyDecoder, set: &EmbeddingSet) -> Result<CrossEntropy> {
    attribute_cross_entropy(dec, set, TARGET)
}

/// Floored cross-entropy of an attribute scored through its readout tokens.
pub fn attribute_cross_entropy(dec: &ToyDecoder, set: &EmbeddingSet, attribute: &str) -> Result<CrossEntropy> {
    let per_sample = per_sample_losses(dec, set, &set.features(), attribute)?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CrossEntropy { mean, per_sample })
}

/// Target cross-entropy with the set's labels but replacement features
/// (kept in double precision).
pub fn cross_entropy_features(dec: &ToyDecoder, set: &EmbeddingSet, x: &Array2<f64>) -> Result<CrossEntropy> {
    if x.dim() != (set.len(), set.dim()) {
        return Err(Error::ShapeMismatch {
            what: "replacement features".into(),
            expected: vec![set.len(), set.dim()],
            found: vec![x.nrows(), x.ncols()],
        });
    }
    let per_sample = per_sample_losses(dec, set, x, TARGET)?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CrossEntropy { mean, per_sample })
}

/// Forced-choice cross-entropy among the attribute's readout tokens
/// (unfloored); the retune objective.
pub fn forced_choice_cross_entropy(dec: &ToyDecoder, set: &EmbeddingSet, attribute: &str) -> Result<f64> {
    let labels = set.labels(attribute)?;
    let tokens = dec.readout_tokens(attribute, set.classes(attribute)?);
    let contexts = set.contexts();
    let x = set.features();
    let total: f64 = x
        .outer_iter()
        .zip(labels.iter().zip(&contexts))
        .map(|(z, (&a, &c))| {
            let logits = dec.logits(c, z);
            let picked: Vec<f64> = tokens.iter().map(|&t| logits[t]).collect();
            stats::log_sum_exp(&picked) - picked[a]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Forced-choice accuracy among the attribute's readout tokens.
pub fn accuracy(dec: &ToyDecoder, set: &EmbeddingSet, attribute: &str) -> Result<f64> {
    let labels = set.labels(attribute)?;
    let tokens = dec.readout_tokens(attribute, set.classes(attribute)?);
    let contexts = set.contexts();
    let x = set.features();
    let hits = x
        .outer_iter()
        .zip(labels.iter().zip(&contexts))
        .filter(|(z, (&a, &c))| dec.predict(c, *z, &tokens) == a)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-sample gradient-norm summary. This is also the interchange format
/// for gradient norms measured on external models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub mean: f64,
    pub p95: f64,
    pub n_samples: usize,
    pub per_sample_norms: Vec<f64>,
    /// Global bound from the decoder parameters, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic_bound: Option<f64>,
    /// Floor-active samples left out of the norms.
    #[serde(default)]
    pub excluded: usize,
}

impl LipschitzEstimate {
    pub fn from_norms(norms: Vec<f64>) -> Self {
        let (mean, _) = stats::mean_std(&norms);
        Self {
            mean: if norms.is_empty() { 0.0 } else { mean },
            p95: if norms.is_empty() { 0.0 } else { stats::quantile(&norms, 0.95) },
            n_samples: norms.len(),
            per_sample_norms: norms,
            analytic_bound: None,
            excluded: 0,
        }
    }

    /// Read and validate a JSON estimate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let est: Self = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        est.validate().map_err(|reason| Error::Manifest { path: path.to_path_buf(), reason })?;
        Ok(est)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_samples != self.per_sample_norms.len() {
            return Err(format!("n_samples = {} but {} norms listed", self.n_samples, self.per_sample_norms.len()));
        }
        if self.per_sample_norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("norms must be finite and nonnegative".into());
        }
        if !self.per_sample_norms.is_empty() {
            let p95 = stats::quantile(&self.per_sample_norms, 0.95);
            if (p95 - self.p95).abs() > 1e-6 * (1.0 + p95) {
                return Err(format!("p95 = {} does not match the norms (expected {p95})", self.p95));
            }
        }
        Ok(())
    }
}

/// Gradient norms `‖∇_z ℓ(c_i, z_i, y_i)‖` at every sample with an inactive
/// floor, summarised by mean and 95th percentile.
pub fn estimate_lipschitz(dec: &ToyDecoder, samples: &EmbeddingSet) -> Result<LipschitzEstimate> {
    if samples.len() < 30 {
        return Err(Error::TooFewSamples { required: 30, found: samples.len() });
    }
    let targets = samples.targets()?;
    let contexts = samples.contexts();
    let x = samples.features();
    let mut norms = Vec::with_capacity(x.nrows());
    let mut excluded = 0;
    for (z, (&y, &c)) in x.outer_iter().zip(targets.iter().zip(&contexts)) {
        let (g, floored) = dec.grad_log_score(c, z, y)?;
        if floored {
            excluded += 1;
        } else {
            norms.push(g.dot(&g).sqrt());
        }
    }
    let mut est = LipschitzEstimate::from_norms(norms);
    est.analytic_bound = Some(dec.analytic_lipschitz());
    est.excluded = excluded;
    Ok(est)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsotropyReport {
    pub g_ms: f64,
    pub g_ta: f64,
    /// `g_ta / g_ms`, capped at [`RATIO_CAP`].
    pub ratio: f64,
    pub capped: bool,
    /// Spearman correlation between alignment and per-mode gradient
    /// magnitude; `None` when either side is constant.
    pub spearman_rho: Option<f64>,
    pub p: Option<f64>,
    pub per_mode: Vec<f64>,
}

/// Mean `|u_kᵀ ∇ℓ|` per mode, grouped by mode class.
pub fn gradient_isotropy(dec: &ToyDecoder, samples: &EmbeddingSet, spectrum: &ModeSpectrum) -> Result<IsotropyReport> {
    let ms = spectrum.ms_indices();
    let ta = spectrum.ta_indices();
    if ms.is_empty() {
        return Err(Error::EmptyModeClass("modality-specific"));
    }
    if ta.is_empty() {
        return Err(Error::EmptyModeClass("text-aligned"));
    }
    let targets = samples.targets()?;
    let contexts = samples.contexts();
    let x = samples.features();
    let basis = &spectrum.basis.eigenvectors;
    let mut totals = Array1::<f64>::zeros(basis.ncols());
    let mut count = 0usize;
    for (z, (&y, &c)) in x.outer_iter().zip(targets.iter().zip(&contexts)) {
        let (g, floored) = dec.grad_log_score(c, z, y)?;
        if floored {
            continue;
        }
        totals += &basis.t().dot(&g).mapv(f64::abs);
        count += 1;
    }
    let per_mode = (totals / count.max(1) as f64).to_vec();
    let group = |idx: &[usize]| idx.iter().map(|&k| per_mode[k]).sum::<f64>() / idx.len() as f64;
    let (g_ms, g_ta) = (group(&ms), group(&ta));
    if g_ms == 0.0 && g_ta == 0.0 {
        return Err(Error::EmptyGradient);
    }
    let raw = if g_ms > 0.0 { g_ta / g_ms } else { f64::INFINITY };
    let capped = raw > RATIO_CAP;
    let (spearman_rho, p) = match stats::spearman(&spectrum.alignment.to_vec(), &per_mode) {
        Ok((rho, p)) => (Some(rho), Some(p)),
        Err(_) => (None, None),
    };
    Ok(IsotropyReport {
        g_ms,
        g_ta,
        ratio: raw.min(RATIO_CAP),
        capped,
        spearman_rho,
        p,
        per_mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetuneConfig {
    pub max_epochs: usize,
    pub init_std: f64,
}

impl Default for RetuneConfig {
    fn default() -> Self {
        Self { max_epochs: MAX_EPOCHS, init_std: 1.0 }
    }
}

/// Fit a rank-`rank` update `W' = W + A B` to the forced-choice objective of
/// `attribute` over `objective_law`; everything else stays frozen. `A`
/// (V×rank) starts at zero and `B` (rank×d) random, so the initial decoder
/// is the base one and only rows of tokens the objective touches move.
pub fn low_rank_retune(
    dec: &ToyDecoder,
    objective_law: &EmbeddingSet,
    attribute: &str,
    rank: usize,
    seed: u64,
    cfg: &RetuneConfig,
) -> Result<ToyDecoder> {
    let (v, width) = dec.w.dim();
    if rank > v.min(dec.dim()) {
        return Err(Error::InvalidParameter(format!(
            "retune rank {rank} exceeds min(V, d) = {}",
            v.min(dec.dim())
        )));
    }
    let labels = objective_law.labels(attribute)?;
    if rank == 0 {
        return Ok(dec.clone());
    }
    let tokens = dec.readout_tokens(attribute, objective_law.classes(attribute)?);
    let contexts = objective_law.contexts();
    let x = objective_law.features();
    let inputs = &x + &dec.context_embed.select(Axis(0), &contexts);
    let feats = match &dec.hidden {
        Some(h) => (inputs.dot(&h.u.t()) + &h.c).mapv(f64::tanh),
        None => inputs,
    };
    let base_logits = feats.dot(&dec.w.t()) + &dec.b;
    let n = x.nrows() as f64;

    let mut rng = rng::stream(seed, rng::streams::RETUNE_INIT);
    let init = Normal::new(0.0, cfg.init_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    // A lives in `w`, B in `ctx`; the other slots stay empty.
    let start = Params {
        w: Array2::zeros((v, rank)),
        b: Array1::zeros(0),
        ctx: Array2::from_shape_fn((rank, width), |_| init.sample(&mut rng)),
        u: None,
        c: None,
    };
    let objective = |p: &Params| -> (f64, Params) {
        let delta = p.w.dot(&p.ctx);
        let logits = &base_logits + &feats.dot(&delta.t());
        let mut g = Array2::<f64>::zeros((x.nrows(), v));
        let mut loss = 0.0;
        for (i, &a) in labels.iter().enumerate() {
            let picked: Vec<f64> = tokens.iter().map(|&t| logits[[i, t]]).collect();
            let lse = stats::log_sum_exp(&picked);
            loss += lse - picked[a];
            for (k, &t) in tokens.iter().enumerate() {
                g[[i, t]] += (picked[k] - lse).exp();
            }
            g[[i, tokens[a]]] -= 1.0;
        }
        let d_delta = g.t().dot(&feats) / n;
        let grad = Params {
            w: d_delta.dot(&p.ctx.t()),
            b: Array1::zeros(0),
            ctx: p.w.t().dot(&d_delta),
            u: None,
            c: None,
        };
        (loss / n, grad)
    };
    let fit = gradient_descent(start, cfg.max_epochs, objective);
    let mut out = dec.clone();
    out.w = &dec.w + &fit.params.w.dot(&fit.params.ctx);
    out.converged = fit.converged;
    out.iterations = fit.iterations;
    Ok(out)
}

/// Unconstrained refit of the readout on the same objective as
/// [`low_rank_retune`]; the capacity reference for the low-rank update.
pub fn full_retune(dec: &ToyDecoder, objective_law: &EmbeddingSet, attribute: &str, max_epochs: usize) -> Result<ToyDecoder> {
    let labels = objective_law.labels(attribute)?;
    let tokens = dec.readout_tokens(attribute, objective_law.classes(attribute)?);
    let contexts = objective_law.contexts();
    let x = objective_law.features();
    let inputs = &x + &dec.context_embed.select(Axis(0), &contexts);
    let feats = match &dec.hidden {
        Some(h) => (inputs.dot(&h.u.t()) + &h.c).mapv(f64::tanh),
        None => inputs,
    };
    let n = x.nrows() as f64;
    let start = Params { w: dec.w.clone(), b: Array1::zeros(0), ctx: Array2::zeros((0, 0)), u: None, c: None };
    let objective = |p: &Params| -> (f64, Params) {
        let logits = feats.dot(&p.w.t()) + &dec.b;
        let mut g = Array2::<f64>::zeros(logits.dim());
        let mut loss = 0.0;
        for (i, &a) in labels.iter().enumerate() {
            let picked: Vec<f64> = tokens.iter().map(|&t| logits[[i, t]]).collect();
            let lse = stats::log_sum_exp(&picked);
            loss += lse - picked[a];
            for (k, &t) in tokens.iter().enumerate() {
                g[[i, t]] += (picked[k] - lse).exp();
            }
            g[[i, tokens[a]]] -= 1.0;
        }
        let grad = Params { w: g.t().dot(&feats) / n, b: Array1::zeros(0), ctx: Array2::zeros((0, 0)), u: None, c: None };
        (loss / n, grad)
    };
    let fit = gradient_descent(start, max_epochs, objective);
    let mut out = dec.clone();
    out.w = fit.params.w;
    out.converged = fit.converged;
    out.iterations = fit.iterations;
    Ok(out)
}
