//! Mode-alignment spectra and causal eigenmode ablation.
//!
//! The eigenmodes `u_k` of the modal covariance `Σ_M` are scored by how much
//! of their variance the text law shares, `α̃_k = u_kᵀ Σ_T u_k / λ_k`. Modes
//! below the threshold are modality-specific (MS), the rest text-aligned
//! (TA). Ablation removes a set of modes from modal samples and measures the
//! decoder's change in cross-entropy.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::decoder::{self, ToyDecoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{self, EigenBasis};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MODES: usize = 100;
pub const DEFAULT_BUDGET: usize = 200;
pub const RANDOM_SEEDS: usize = 5;
/// Modes with `λ_k ≤ DROP_RATIO · λ_1` are left unclassified.
pub const DROP_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeClass {
    #[serde(rename = "MS")]
    ModalitySpecific,
    #[serde(rename = "TA")]
    TextAligned,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSpectrum {
    pub basis: EigenBasis,
    pub alignment: Array1<f64>,
    pub classification: Vec<ModeClass>,
    pub ms_variance_share: f64,
    pub threshold: f64,
    /// Modes removed for a vanishing eigenvalue.
    pub dropped: usize,
    /// Modal mean, the center used by ablation.
    pub modal_mean: Array1<f64>,
}

impl ModeSpectrum {
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn ms_indices(&self) -> Vec<usize> {
        self.indices(ModeClass::ModalitySpecific)
    }

    pub fn ta_indices(&self) -> Vec<usize> {
        self.indices(ModeClass::TextAligned)
    }

    fn indices(&self, class: ModeClass) -> Vec<usize> {
        self.classification
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Share of the spectrum's variance carried by `modes`, in percent.
    pub fn variance_pct(&self, modes: &[usize]) -> f64 {
        let lambda = |k: usize| self.basis.eigenvalues[k].max(0.0);
        let total: f64 = (0..self.basis.eigenvalues.len()).map(lambda).sum();
        if total <= 0.0 || modes.is_empty() {
            return 0.0;
        }
        100.0 * modes.iter().map(|&k| lambda(k)).sum::<f64>() / total
    }

    /// Reclassify under a different threshold.
    pub fn with_threshold(&self, threshold: f64) -> ModeSpectrum {
        let mut out = self.clone();
        out.threshold = threshold;
        out.classification = classify(&self.alignment, threshold);
        out.ms_variance_share = out.variance_pct(&out.ms_indices()) / 100.0;
        out
    }
}

fn classify(alignment: &Array1<f64>, threshold: f64) -> Vec<ModeClass> {
    alignment
        .iter()
        .map(|&a| {
            if a < threshold {
                ModeClass::ModalitySpecific
            } else {
                ModeClass::TextAligned
            }
        })
        .collect()
}

/// Spectrum of the top-`k` modal eigenmodes scored against the text
/// covariance.
pub fn mode_alignment(modal: &EmbeddingSet, text: &EmbeddingSet, k: usize, threshold: f64) -> Result<ModeSpectrum> {
    if modal.dim() != text.dim() {
        return Err(Error::DimensionMismatch(modal.dim(), text.dim()));
    }
    let modal_x = modal.features();
    let sigma_m = stats::covariance(&modal_x)?;
    let sigma_t = stats::covariance(&text.features())?;
    let full = stats::top_k_eigen(&sigma_m, k)?;
    let top = full.eigenvalues.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let kept: Vec<usize> = (0..full.len()).filter(|&i| full.eigenvalues[i] > DROP_RATIO * top).collect();
    let dropped = full.len() - kept.len();
    let basis = full.select(&kept);
    let alignment = Array1::from_shape_fn(basis.len(), |i| {
        let u = basis.eigenvectors.column(i);
        u.dot(&sigma_t.dot(&u)) / basis.eigenvalues[i]
    });
    let classification = classify(&alignment, threshold);
    let mut spectrum = ModeSpectrum {
        basis,
        alignment,
        classification,
        ms_variance_share: 0.0,
        threshold,
        dropped,
        modal_mean: modal_x.mean_axis(Axis(0)).expect("nonempty"),
    };
    spectrum.ms_variance_share = spectrum.variance_pct(&spectrum.ms_indices()) / 100.0;
    Ok(spectrum)
}

/// `z' = z − Σ_{k∈S} (zᵀu_k) u_k` for every row. An empty set returns the
/// input unchanged.
pub fn project_out(z: &Array2<f64>, basis: &EigenBasis, modes: &[usize]) -> Array2<f64> {
    if modes.is_empty() {
        return z.clone();
    }
    let u = basis.eigenvectors.select(Axis(1), modes);
    z - &z.dot(&u).dot(&u.t())
}

/// `z' = μ + P(z − μ)`: removes the modes' fluctuation around `center`
/// while keeping the mean.
pub fn project_out_centered(z: &Array2<f64>, center: &Array1<f64>, basis: &EigenBasis, modes: &[usize]) -> Array2<f64> {
    if modes.is_empty() {
        return z.clone();
    }
    let centered = z - center;
    project_out(&centered, basis, modes) + center
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCondition {
    /// No modes removed; the baseline.
    None,
    MsAll,
    TaMatched,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub condition: AblationCondition,
    pub modes_removed: usize,
    pub removed: Vec<usize>,
    pub variance_removed_pct: f64,
    pub baseline_loss: f64,
    pub ablated_loss: f64,
    pub delta_loss_pct: f64,
    pub t: f64,
    pub p: f64,
    pub seed: Option<u64>,
    pub samples: usize,
    /// Set when the spectrum has no MS modes, so nothing can be ablated.
    pub degenerate: bool,
}

/// Evenly spaced sample indices, at most `budget` of them.
pub fn budget_indices(n: usize, budget: usize) -> Vec<usize> {
    if budget >= n {
        return (0..n).collect();
    }
    (0..budget).map(|i| i * n / budget).collect()
}

/// The mode set removed under `condition`.
pub fn ablation_modes(spectrum: &ModeSpectrum, condition: AblationCondition, seed: u64) -> Vec<usize> {
    let ms = spectrum.ms_indices();
    match condition {
        AblationCondition::None => Vec::new(),
        AblationCondition::MsAll => ms,
        AblationCondition::TaMatched => spectrum.ta_indices().into_iter().take(ms.len()).collect(),
        AblationCondition::Random => {
            let mut rng = rng::stream(seed, rng::streams::MODE_CHOICE);
            let mut picked = index::sample(&mut rng, spectrum.len(), ms.len()).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// Remove the condition's modes from the modal samples and compare the
/// decoder's per-sample target losses against the unablated baseline.
pub fn run_ablation(
    dec: &ToyDecoder,
    modal: &EmbeddingSet,
    spectrum: &ModeSpectrum,
    condition: AblationCondition,
    seed: u64,
    budget: usize,
) -> Result<AblationReport> {
    let idx = budget_indices(modal.len(), budget);
    let sample = modal.subset(&idx);
    let baseline = decoder::cross_entropy(dec, &sample)?;
    let degenerate = condition != AblationCondition::None && spectrum.ms_indices().is_empty();
    let removed = if degenerate { Vec::new() } else { ablation_modes(spectrum, condition, seed) };
    let ablated = if removed.is_empty() {
        baseline.clone()
    } else {
        let z = project_out_centered(&sample.features(), &spectrum.modal_mean, &spectrum.basis, &removed);
        decoder::cross_entropy_features(dec, &sample, &z)?
    };
    let deltas: Vec<f64> = ablated
        .per_sample
        .iter()
        .zip(&baseline.per_sample)
        .map(|(a, b)| a - b)
        .collect();
    let (t, p) = match stats::paired_t(&deltas) {
        Ok(tp) => tp,
        Err(Error::ZeroVariance) => {
            let mean = deltas.iter().sum::<f64>();
            if mean == 0.0 {
                (0.0, 1.0)
            } else {
                (mean.signum() * f64::INFINITY, 0.0)
            }
        }
        Err(e) => return Err(e),
    };
    let delta_loss_pct = if ablated.mean == baseline.mean {
        0.0
    } else {
        100.0 * (ablated.mean - baseline.mean) / baseline.mean
    };
    Ok(AblationReport {
        condition,
        modes_removed: removed.len(),
        variance_removed_pct: spectrum.variance_pct(&removed),
        removed,
        baseline_loss: baseline.mean,
        ablated_loss: ablated.mean,
        delta_loss_pct,
        t,
        p,
        seed: (condition == AblationCondition::Random).then_some(seed),
        samples: idx.len(),
        degenerate,
    })
}

/// Random-condition ablation averaged over `seeds` (delta, t and variance
/// are seed means).
pub fn run_random_ablation(
    dec: &ToyDecoder,
    modal: &EmbeddingSet,
    spectrum: &ModeSpectrum,
    seeds: &[u64],
    budget: usize,
) -> Result<AblationReport> {
    let reports = seeds
        .iter()
        .map(|&s| run_ablation(dec, modal, spectrum, AblationCondition::Random, s, budget))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&AblationReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    let mut out = reports[0].clone();
    out.delta_loss_pct = avg(|r| r.delta_loss_pct);
    out.t = avg(|r| r.t);
    out.p = avg(|r| r.p);
    out.ablated_loss = avg(|r| r.ablated_loss);
    out.variance_removed_pct = avg(|r| r.variance_removed_pct);
    out.seed = None;
    out.removed = Vec::new();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, fixtures};
    use crate::testkit::{gaussian_matrix, labelled};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn set(x: &Array2<f64>) -> EmbeddingSet {
        labelled(x, vec![0; x.nrows()], 1, None)
    }

    fn rotation(theta: f64) -> Array2<f64> {
        let (s, c) = theta.sin_cos();
        array![[c, -s], [s, c]]
    }

    #[test]
    fn identical_laws_are_fully_aligned() {
        let x = gaussian_matrix(200, 4, 1);
        let spectrum = mode_alignment(&set(&x), &set(&x), 4, DEFAULT_THRESHOLD).unwrap();
        for &a in &spectrum.alignment {
            assert_abs_diff_eq!(a, 1.0, epsilon = 1e-9);
        }
        assert!(spectrum.ms_indices().is_empty());
        assert_eq!(spectrum.ms_variance_share, 0.0);
    }

    #[test]
    fn diagonal_example() {
        let c = 1.5f64.sqrt();
        let modal = array![[c, 0.0], [-c, 0.0], [0.0, c], [0.0, -c]];
        let text = array![[c, 0.0], [-c, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let spectrum = mode_alignment(&set(&modal), &set(&text), 2, DEFAULT_THRESHOLD).unwrap();
        let mut alignment = spectrum.alignment.to_vec();
        alignment.sort_by(|a, b| b.total_cmp(a));
        assert_abs_diff_eq!(alignment[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(alignment[1], 0.0, epsilon = 1e-12);
        assert_eq!(spectrum.ms_indices().len(), 1);
        assert_abs_diff_eq!(spectrum.ms_variance_share, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn alignment_can_exceed_one() {
        let modal = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 0.1], [0.0, -0.1]];
        let text = modal.mapv(|v| v * 2f64.sqrt());
        let spectrum = mode_alignment(&set(&modal), &set(&text), 2, DEFAULT_THRESHOLD).unwrap();
        assert_abs_diff_eq!(spectrum.alignment[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn alignment_errors() {
        let a = gaussian_matrix(10, 3, 1);
        let b = gaussian_matrix(10, 2, 2);
        assert!(matches!(mode_alignment(&set(&a), &set(&b), 2, 0.5), Err(Error::DimensionMismatch(3, 2))));
        assert!(mode_alignment(&set(&a), &set(&a), 4, 0.5).is_err());
        let flat = Array2::zeros((5, 2));
        assert!(matches!(mode_alignment(&set(&flat), &set(&flat), 2, 0.5), Err(Error::ZeroSpectrum)));
    }

    #[test]
    fn vanishing_modes_are_dropped() {
        let modal = array![[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]];
        let spectrum = mode_alignment(&set(&modal), &set(&modal), 2, 0.5).unwrap();
        assert_eq!(spectrum.len(), 1);
        assert_eq!(spectrum.dropped, 1);
    }

    #[test]
    fn projection_examples() {
        let basis = EigenBasis { eigenvalues: array![1.0, 0.5], eigenvectors: array![[1.0, 0.0], [0.0, 1.0]], source_trace: 1.5 };
        let z = array![[1.0, 2.0]];
        assert_eq!(project_out(&z, &basis, &[]), z);
        assert_eq!(project_out(&z, &basis, &[0]), array![[0.0, 2.0]]);
        assert_eq!(project_out(&z, &basis, &[0, 1]), array![[0.0, 0.0]]);
        let center = array![0.5, 0.5];
        assert_eq!(project_out_centered(&z, &center, &basis, &[0, 1]), array![[0.5, 0.5]]);
    }

    #[test]
    fn threshold_monotonicity() {
        let cfg = fixtures::non_aligned(1);
        let laws = synth::draw(&cfg, 0).unwrap();
        let spectrum = mode_alignment(&laws.modal, &laws.text, cfg.d, DEFAULT_THRESHOLD).unwrap();
        let mut last = -1.0;
        for t in [0.0, 0.01, 0.1, 0.5, 0.9, 1.0, 1.5, 10.0] {
            let share = spectrum.with_threshold(t).ms_variance_share;
            assert!(share >= last);
            last = share;
        }
        assert_abs_diff_eq!(spectrum.with_threshold(1e9).ms_variance_share, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unablated_condition_is_bit_exact() {
        let cfg = fixtures::non_aligned(0);
        let laws = synth::draw(&cfg, 0).unwrap();
        let spectrum = mode_alignment(&laws.modal, &laws.text, fixtures::ABLATION_MODES, DEFAULT_THRESHOLD).unwrap();
        let dec = fixtures::ablation_decoder(&cfg, &laws, 0).unwrap();
        let r = run_ablation(&dec, &laws.modal, &spectrum, AblationCondition::None, 0, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.delta_loss_pct, 0.0);
        assert_eq!(r.baseline_loss.to_bits(), r.ablated_loss.to_bits());
        assert_eq!(r.modes_removed, 0);
        assert_eq!(r.samples, DEFAULT_BUDGET);
    }

    #[test]
    fn ms_removal_helps_and_ta_removal_barely_matters() {
        let cfg = fixtures::non_aligned(0);
        let laws = synth::draw(&cfg, 0).unwrap();
        let spectrum = mode_alignment(&laws.modal, &laws.text, fixtures::ABLATION_MODES, DEFAULT_THRESHOLD).unwrap();
        let dec = fixtures::ablation_decoder(&cfg, &laws, 0).unwrap();
        let ms = run_ablation(&dec, &laws.modal, &spectrum, AblationCondition::MsAll, 0, DEFAULT_BUDGET).unwrap();
        let ta = run_ablation(&dec, &laws.modal, &spectrum, AblationCondition::TaMatched, 0, DEFAULT_BUDGET).unwrap();
        assert!(ms.delta_loss_pct < 0.0);
        assert!(ta.delta_loss_pct.abs() < ms.delta_loss_pct.abs() / 5.0);
        assert_eq!(ta.modes_removed, ms.modes_removed);
        for r in [&ms, &ta] {
            assert_abs_diff_eq!(r.variance_removed_pct, spectrum.variance_pct(&r.removed), epsilon = 1e-12);
        }
    }

    #[test]
    fn random_condition_is_seeded() {
        let cfg = fixtures::non_aligned(0);
        let laws = synth::draw(&cfg, 0).unwrap();
        let spectrum = mode_alignment(&laws.modal, &laws.text, fixtures::ABLATION_MODES, DEFAULT_THRESHOLD).unwrap();
        let a = ablation_modes(&spectrum, AblationCondition::Random, 3);
        assert_eq!(a, ablation_modes(&spectrum, AblationCondition::Random, 3));
        assert_eq!(a.len(), spectrum.ms_indices().len());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn budget_indices_are_even() {
        assert_eq!(budget_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(budget_indices(3, 5), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed in 0u64..1000, picks in prop::collection::btree_set(0usize..5, 0..5)) {
            let x = gaussian_matrix(30, 5, seed);
            let basis = stats::top_k_eigen(&stats::covariance(&x).unwrap(), 5).unwrap();
            let modes: Vec<usize> = picks.into_iter().collect();
            let once = project_out(&x, &basis, &modes);
            let twice = project_out(&once, &basis, &modes);
            let drift = (&once - &twice).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert!(drift <= 1e-9);
        }

        #[test]
        fn alignment_is_rotation_invariant(seed in 0u64..1000, theta in 0.0f64..std::f64::consts::TAU) {
            let mut modal = gaussian_matrix(60, 2, seed);
            modal.column_mut(0).mapv_inplace(|v| 3.0 * v);
            let mut text = gaussian_matrix(60, 2, seed + 1);
            text.column_mut(1).mapv_inplace(|v| 0.2 * v);
            let r = rotation(theta);
            let base = mode_alignment(&set(&modal), &set(&text), 2, 0.5).unwrap();
            let turned = mode_alignment(&set(&modal.dot(&r.t())), &set(&text.dot(&r.t())), 2, 0.5).unwrap();
            for (a, b) in base.alignment.iter().zip(turned.alignment.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }
    }
}
