//! Multinomial logistic probes.
//!
//! Probes are fit on z-scored features with an inverse-strength ridge
//! penalty `(1 / (2 C)) ‖W‖²` on the summed cross-entropy, by full-batch
//! gradient descent with backtracking. The normalisation is baked into the
//! model, so every method takes raw representation vectors.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, EmbeddingSet, LayerTag, PairedLaws};
use crate::error::{Error, Result};
use crate::stats;
use crate::transport::{self, W1Estimate, W1Method};

pub const PROTOCOL_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];
pub const TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_REG_C: f64 = 1.0;
pub const MAX_EPOCHS: usize = 500;
/// Convergence threshold on the gradient norm of the per-sample mean loss.
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeModel {
    pub attribute: String,
    /// K×d weights acting on z-scored inputs.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub classes: usize,
    pub reg_c: f64,
    pub train_mean: Array1<f64>,
    pub train_std: Array1<f64>,
    pub test_accuracy: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ProbeModel {
    /// A probe with explicit parameters and the identity normalisation.
    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        let (k, d) = weights.dim();
        Self {
            attribute: String::new(),
            weights,
            bias,
            classes: k,
            reg_c: DEFAULT_REG_C,
            train_mean: Array1::zeros(d),
            train_std: Array1::ones(d),
            test_accuracy: f64::NAN,
            converged: true,
            iterations: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn normalize(&self, z: ArrayView1<f64>) -> Array1<f64> {
        (&z - &self.train_mean) / &self.train_std
    }

    pub fn logits(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&self.normalize(z)) + &self.bias
    }

    /// `log h(a | z)`.
    pub fn log_prob(&self, z: ArrayView1<f64>, a: usize) -> f64 {
        stats::log_softmax_at(&self.logits(z).to_vec(), a)
    }

    /// `log h(a | z)` floored at `log(1/K)`.
    pub fn clipped_log_prob(&self, z: ArrayView1<f64>, a: usize) -> f64 {
        self.log_prob(z, a).max(-(self.classes as f64).ln())
    }

    /// Input gradient `∇_z log h(a | z)`.
    pub fn grad_log_prob(&self, z: ArrayView1<f64>, a: usize) -> Array1<f64> {
        let coef = Array1::from(stats::one_hot_residual(&self.logits(z).to_vec(), a));
        self.weights.t().dot(&coef) / &self.train_std
    }

    /// Predicted class; ties go to the lowest id.
    pub fn predict(&self, z: ArrayView1<f64>) -> usize {
        argmax(self.logits(z).iter().copied())
    }

    pub fn accuracy(&self, x: &Array2<f64>, labels: &[usize]) -> f64 {
        let hits = x
            .outer_iter()
            .zip(labels)
            .filter(|(z, &a)| self.predict(*z) == a)
            .count();
        hits as f64 / labels.len() as f64
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Penalised objective `Σ_i -log softmax(W x_i + b)_{y_i} + ‖W‖² / (2C)` and
/// its gradients with respect to `W` and `b`.
pub fn probe_objective(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    x: &Array2<f64>,
    labels: &[usize],
    reg_c: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let mut logits = x.dot(&weights.t()) + bias;
    let mut loss = 0.0;
    for (mut row, &y) in logits.outer_iter_mut().zip(labels) {
        let lse = stats::log_sum_exp(row.as_slice().expect("standard layout"));
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
        row[y] -= 1.0;
    }
    // logits now holds softmax - onehot
    let grad_w = logits.t().dot(x) + weights / reg_c;
    let grad_b = logits.sum_axis(Axis(0));
    loss += weights.iter().map(|w| w * w).sum::<f64>() / (2.0 * reg_c);
    (loss, grad_w, grad_b)
}

struct Fit {
    weights: Array2<f64>,
    bias: Array1<f64>,
    converged: bool,
    iterations: usize,
}

fn fit(x: &Array2<f64>, labels: &[usize], classes: usize, reg_c: f64) -> Fit {
    let n = x.nrows() as f64;
    let objective = |w: &Array2<f64>, b: &Array1<f64>| probe_objective(w, b, x, labels, reg_c);
    let mut w = Array2::<f64>::zeros((classes, x.ncols()));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut fx, _, _) = objective(&w, &b);
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t = 1.0f64;
    let mut step = 1.0 / n;
    for epoch in 0..MAX_EPOCHS {
        let (fy, gw, gb) = objective(&yw, &yb);
        let g2 = gw.iter().chain(gb.iter()).map(|g| g * g).sum::<f64>();
        if g2.sqrt() / n < GRAD_TOL {
            return Fit { weights: yw, bias: yb, converged: true, iterations: epoch };
        }
        step *= 1.25;
        let (w_new, b_new, f_new) = loop {
            let tw = &yw - &(&gw * step);
            let tb = &yb - &(&gb * step);
            let (l, _, _) = objective(&tw, &tb);
            if l <= fy - 0.5 * step * g2 || step < 1e-20 {
                break (tw, tb, l);
            }
            step *= 0.5;
        };
        if f_new > fx {
            t = 1.0;
            yw = w.clone();
            yb = b.clone();
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        yw = &w_new + &((&w_new - &w) * beta);
        yb = &b_new + &((&b_new - &b) * beta);
        w = w_new;
        b = b_new;
        fx = f_new;
        t = t_new;
    }
    let (_, gw, gb) = objective(&w, &b);
    let gnorm = gw.iter().chain(gb.iter()).map(|g| g * g).sum::<f64>().sqrt();
    Fit { weights: w, bias: b, converged: gnorm / n < GRAD_TOL, iterations: MAX_EPOCHS }
}

fn check_classes(set: &EmbeddingSet, attribute: &str) -> Result<usize> {
    let k = set.classes(attribute)?;
    let present = dataset::group_by_id(set.labels(attribute)?).len();
    if k < 2 || present < 2 {
        return Err(Error::DegenerateClasses {
            attribute: attribute.to_string(),
            classes: present,
        });
    }
    Ok(k)
}

/// Fit on the seed's stratified 80% split, score on the held-out 20%.
pub fn train_probe(set: &EmbeddingSet, attribute: &str, seed: u64, reg_c: f64) -> Result<ProbeModel> {
    train_probe_split(set, attribute, seed, reg_c, TRAIN_FRACTION)
}

/// [`train_probe`] with a custom train fraction.
pub fn train_probe_split(
    set: &EmbeddingSet,
    attribute: &str,
    seed: u64,
    reg_c: f64,
    fraction: f64,
) -> Result<ProbeModel> {
    if !(reg_c > 0.0) {
        return Err(Error::InvalidParameter(format!("reg_c must be positive, got {reg_c}")));
    }
    let classes = check_classes(set, attribute)?;
    let plan = dataset::stratified_split(set, attribute, seed, fraction)?;
    let labels = set.labels(attribute)?;
    let features = set.features();
    let train = features.select(Axis(0), &plan.train_idx);
    let test = features.select(Axis(0), &plan.test_idx);
    let (train_x, mean, std) = dataset::zscore_normalize(&train, &train)?;
    let train_y: Vec<usize> = plan.train_idx.iter().map(|&i| labels[i]).collect();
    let test_y: Vec<usize> = plan.test_idx.iter().map(|&i| labels[i]).collect();

    let fitted = fit(&train_x, &train_y, classes, reg_c);
    let mut model = ProbeModel {
        attribute: attribute.to_string(),
        weights: fitted.weights,
        bias: fitted.bias,
        classes,
        reg_c,
        train_mean: mean,
        train_std: std,
        test_accuracy: f64::NAN,
        converged: fitted.converged,
        iterations: fitted.iterations,
    };
    model.test_accuracy = model.accuracy(&test, &test_y);
    Ok(model)
}

/// Fit on every sample (no held-out split); used where the probe is an
/// instrument rather than a measurement.
pub fn train_probe_full(set: &EmbeddingSet, attribute: &str, reg_c: f64) -> Result<ProbeModel> {
    let classes = check_classes(set, attribute)?;
    let labels = set.labels(attribute)?;
    let features = set.features();
    let (x, mean, std) = dataset::zscore_normalize(&features, &features)?;
    let fitted = fit(&x, labels, classes, reg_c);
    let mut model = ProbeModel {
        attribute: attribute.to_string(),
        weights: fitted.weights,
        bias: fitted.bias,
        classes,
        reg_c,
        train_mean: mean,
        train_std: std,
        test_accuracy: f64::NAN,
        converged: fitted.converged,
        iterations: fitted.iterations,
    };
    model.test_accuracy = model.accuracy(&features, labels);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub attribute: String,
    pub layer_tag: LayerTag,
    pub mean: f64,
    pub std: f64,
    pub chance: f64,
    pub per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
    pub converged: bool,
}

/// Five-seed protocol: one probe per seed, mean and (population) std of the
/// held-out accuracies.
pub fn run_probe_protocol(set: &EmbeddingSet, attribute: &str) -> Result<ProbeResult> {
    run_probe_seeds(set, attribute, &PROTOCOL_SEEDS, DEFAULT_REG_C)
}

pub fn run_probe_seeds(
    set: &EmbeddingSet,
    attribute: &str,
    seeds: &[u64],
    reg_c: f64,
) -> Result<ProbeResult> {
    run_probe(set, attribute, seeds, reg_c, TRAIN_FRACTION)
}

pub fn run_probe(
    set: &EmbeddingSet,
    attribute: &str,
    seeds: &[u64],
    reg_c: f64,
    fraction: f64,
) -> Result<ProbeResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one probe seed is required".into()));
    }
    let models = seeds
        .par_iter()
        .map(|&seed| train_probe_split(set, attribute, seed, reg_c, fraction))
        .collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<f64> = models.iter().map(|m| m.test_accuracy).collect();
    let (mean, std) = stats::mean_std(&per_seed);
    Ok(ProbeResult {
        attribute: attribute.to_string(),
        layer_tag: set.layer_tag,
        mean,
        std,
        chance: 1.0 / models[0].classes as f64,
        per_seed,
        seeds: seeds.to_vec(),
        converged: models.iter().all(|m| m.converged),
    })
}

/// Lipschitz constant of `z ↦ log h(a | z)` in input space, valid for every
/// class `a`: the largest pairwise distance between normalised weight rows.
///
/// The input gradient is `Σ_k (δ_ak − p_k) w_k / σ = Σ_{k≠a} p_k (w_a − w_k) / σ`,
/// a sub-convex combination of row differences.
pub fn probe_lipschitz(model: &ProbeModel) -> f64 {
    let rows: Vec<Array1<f64>> = model
        .weights
        .outer_iter()
        .map(|r| &r / &model.train_std)
        .collect();
    let mut best = 0.0f64;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let diff = &rows[i] - &rows[j];
            best = best.max(diff.dot(&diff).sqrt());
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub lipschitz: f64,
    /// Attribute-conditional W1, weighted by class frequency.
    pub w1: f64,
    pub per_class: Vec<W1Estimate>,
    pub modal_log_score: f64,
    pub text_log_score: f64,
}

/// Mean clipped log-likelihood of the attribute labels.
pub fn mean_clipped_log_score(model: &ProbeModel, set: &EmbeddingSet, attribute: &str) -> Result<f64> {
    let labels = set.labels(attribute)?;
    let x = set.features();
    let total: f64 = x
        .outer_iter()
        .zip(labels)
        .map(|(z, &a)| model.clipped_log_prob(z, a))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Check `|E_M[log h(A|Z)] − E_T[log h(A|Z)]| ≤ L_h · W1`, with W1 taken
/// between the attribute-conditional laws (both laws must share the
/// attribute's class counts).
pub fn probe_penalty_check(model: &ProbeModel, laws: &PairedLaws, attribute: &str) -> Result<PenaltyCheck> {
    let modal_labels = laws.modal.labels(attribute)?;
    let text_labels = laws.text.labels(attribute)?;
    let modal_groups = dataset::group_by_id(modal_labels);
    let text_groups = dataset::group_by_id(text_labels);
    let counts = |g: &std::collections::BTreeMap<usize, Vec<usize>>| {
        g.iter().map(|(k, v)| (*k, v.len())).collect::<Vec<_>>()
    };
    if counts(&modal_groups) != counts(&text_groups) {
        return Err(Error::StratumMismatch);
    }
    let modal_x = laws.modal.features();
    let text_x = laws.text.features();
    let per_class = modal_groups
        .par_iter()
        .map(|(class, mi)| {
            let a = modal_x.select(Axis(0), mi);
            let b = text_x.select(Axis(0), &text_groups[class]);
            if mi.len() <= transport::EXACT_LIMIT {
                transport::w1_exact(a.view(), b.view())
            } else {
                W1Method::Sinkhorn { epsilon: 1e-3, max_iter: 2000 }.estimate(a.view(), b.view())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = modal_labels.len() as f64;
    let w1: f64 = per_class.iter().map(|e| e.value * e.n_modal as f64 / n).sum();

    let modal_log_score = mean_clipped_log_score(model, &laws.modal, attribute)?;
    let text_log_score = mean_clipped_log_score(model, &laws.text, attribute)?;
    let lipschitz = probe_lipschitz(model);
    let lhs = (modal_log_score - text_log_score).abs();
    let rhs = lipschitz * w1;
    Ok(PenaltyCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-6) + 1e-12,
        lipschitz,
        w1,
        per_class,
        modal_log_score,
        text_log_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LawTag;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn clouds(n: usize, gap: f64, seed: u64) -> EmbeddingSet {
        let mut rng = rng::stream(seed, 0);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Array2::from_shape_fn((n, 2), |(i, j)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            noise + if j == 0 { gap * labels[i] as f64 } else { 0.0 }
        });
        EmbeddingSet::from_f64(&data, LayerTag::Synthetic, LawTag::Text)
            .unwrap()
            .with_labels("a", labels)
            .unwrap()
    }

    #[test]
    fn separated_clouds_are_perfect() {
        let set = clouds(100, 10.0, 1);
        let model = train_probe(&set, "a", 42, 1.0).unwrap();
        assert_eq!(model.test_accuracy, 1.0);
        let result = run_probe_protocol(&set, "a").unwrap();
        assert_eq!(result.mean, 1.0);
        assert_eq!(result.std, 0.0);
        assert_eq!(result.seeds, PROTOCOL_SEEDS);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = rng::stream(2, 0);
        let set = clouds(100, 0.0, 2);
        let mut labels = set.labels("a").unwrap().to_vec();
        labels.shuffle(&mut rng);
        let set = set.with_data(set.data().to_owned()).unwrap().with_labels("a", labels).unwrap();
        let model = train_probe(&set, "a", 42, 1.0).unwrap();
        assert!((model.test_accuracy - 0.5).abs() <= 0.3, "{}", model.test_accuracy);
        let result = run_probe_protocol(&set, "a").unwrap();
        assert!((result.mean - 0.5).abs() <= 0.12, "{}", result.mean);
    }

    #[test]
    fn chance_fixture_with_four_classes() {
        let mut rng = rng::stream(3, 0);
        let data = Array2::from_shape_fn((400, 4), |_| StandardNormal.sample(&mut rng));
        let set = EmbeddingSet::from_f64(&data, LayerTag::Synthetic, LawTag::Text)
            .unwrap()
            .with_labels("a", (0..400).map(|i| i % 4).collect())
            .unwrap();
        let result = run_probe_protocol(&set, "a").unwrap();
        assert!((result.mean - 0.25).abs() <= 0.1, "{}", result.mean);
        assert_eq!(result.chance, 0.25);
        let (mean, std) = stats::mean_std(&result.per_seed);
        assert_eq!((mean, std), (result.mean, result.std));
        assert_eq!(run_probe_protocol(&set, "a").unwrap(), result);
    }

    #[test]
    fn single_class_is_rejected() {
        let set = clouds(10, 1.0, 4).with_labels("one", vec![0; 10]).unwrap();
        assert!(matches!(
            train_probe(&set, "one", 42, 1.0),
            Err(Error::DegenerateClasses { .. })
        ));
    }

    #[test]
    fn lipschitz_examples() {
        let model = ProbeModel::from_parts(array![[3.0, 4.0], [0.0, 0.0]], Array1::zeros(2));
        assert_abs_diff_eq!(probe_lipschitz(&model), 5.0);
        let zero = ProbeModel::from_parts(Array2::zeros((3, 2)), Array1::zeros(3));
        assert_eq!(probe_lipschitz(&zero), 0.0);
        // e_1 vs e_2: the gradient (1 - p)(w_1 - w_2) approaches √2 in norm
        let eye = ProbeModel::from_parts(array![[1.0, 0.0], [0.0, 1.0]], Array1::zeros(2));
        assert_abs_diff_eq!(probe_lipschitz(&eye), 2f64.sqrt());
        let z = array![-20.0, 20.0];
        let g = eye.grad_log_prob(z.view(), 0);
        assert!(g.dot(&g).sqrt() <= probe_lipschitz(&eye));
        assert!(g.dot(&g).sqrt() > 1.4);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = rng::stream(5, 0);
        let x = Array2::from_shape_fn((12, 3), |_| StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let w = Array2::from_shape_fn((3, 3), |_| StandardNormal.sample(&mut rng));
        let b = Array1::from_shape_fn(3, |_| StandardNormal.sample(&mut rng));
        let (_, gw, gb) = probe_objective(&w, &b, &x, &labels, 0.7);
        let h = 1e-5;
        for ((i, j), &g) in gw.indexed_iter() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[[i, j]] += h;
            wm[[i, j]] -= h;
            let fd = (probe_objective(&wp, &b, &x, &labels, 0.7).0
                - probe_objective(&wm, &b, &x, &labels, 0.7).0)
                / (2.0 * h);
            assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()));
        }
        for (k, &g) in gb.iter().enumerate() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[k] += h;
            bm[k] -= h;
            let fd = (probe_objective(&w, &bp, &x, &labels, 0.7).0
                - probe_objective(&w, &bm, &x, &labels, 0.7).0)
                / (2.0 * h);
            assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()));
        }
    }

    #[test]
    fn accuracy_survives_diagonal_rescaling() {
        let set = clouds(120, 2.0, 6);
        let scale = array![1e3f32, 1e-2];
        let scaled = set.with_data(&set.data() * &scale).unwrap();
        let a = train_probe(&set, "a", 42, 1.0).unwrap();
        let b = train_probe(&scaled, "a", 42, 1.0).unwrap();
        assert!((a.test_accuracy - b.test_accuracy).abs() < 1e-12);
    }

    fn paired(shift: f64) -> PairedLaws {
        let text = clouds(40, 3.0, 7).with_strata((0..40).map(|i| i % 2).collect()).unwrap();
        let moved = text.data().mapv(|v| v) + &array![shift as f32, 0.0];
        let modal = text.with_data(moved).unwrap();
        let mut modal = modal;
        modal.law_tag = LawTag::Modal;
        PairedLaws::new(modal, text).unwrap()
    }

    #[test]
    fn penalty_examples() {
        let same = paired(0.0);
        let model = train_probe_full(&same.text, "a", 1.0).unwrap();
        let check = probe_penalty_check(&model, &same, "a").unwrap();
        assert_eq!(check.lhs, 0.0);
        assert!(check.holds);

        let shifted = paired(0.75);
        let unit = ProbeModel::from_parts(array![[1.0, 0.0], [0.0, 0.0]], Array1::zeros(2));
        let check = probe_penalty_check(&unit, &shifted, "a").unwrap();
        assert!(check.lhs <= 0.75 + 1e-6);
        assert_abs_diff_eq!(check.w1, 0.75, epsilon = 1e-6);
        assert!(check.holds);

        let zero = ProbeModel::from_parts(Array2::zeros((2, 2)), Array1::zeros(2));
        assert_eq!(probe_penalty_check(&zero, &shifted, "a").unwrap().lhs, 0.0);
        assert!(probe_penalty_check(&zero, &shifted, "missing").is_err());
    }
}
