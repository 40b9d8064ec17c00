//! Shared builders for unit tests.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{EmbeddingSet, LawTag, LayerTag, CONTEXT, TARGET};
use crate::rng;

/// A set with target labels over `vocab` classes and optional contexts.
pub fn labelled(x: &Array2<f64>, targets: Vec<usize>, vocab: usize, contexts: Option<(Vec<usize>, usize)>) -> EmbeddingSet {
    let set = EmbeddingSet::from_f64(x, LayerTag::Synthetic, LawTag::Text)
        .unwrap()
        .with_labels_k(TARGET, targets, vocab)
        .unwrap();
    match contexts {
        Some((ids, k)) => set.with_labels_k(CONTEXT, ids, k).unwrap(),
        None => set,
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, 99);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut r))
}

pub fn gaussian_vector(len: usize, seed: u64) -> Array1<f64> {
    let mut r = rng::stream(seed, 98);
    Array1::from_shape_fn(len, |_| StandardNormal.sample(&mut r))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.dot(&diff).sqrt() / scale
    }
}

/// Central finite-difference gradient of `f` at `z`.
pub fn numeric_gradient(f: impl Fn(&Array1<f64>) -> f64, z: &Array1<f64>, h: f64) -> Array1<f64> {
    Array1::from_shape_fn(z.len(), |j| {
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[j] += h;
        minus[j] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}
