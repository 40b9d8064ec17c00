//! Generalized mutual information of a fixed decoder and the
//! GMI–Wasserstein bound.
//!
//! For a sample `(c_i, z_i, y_i)` the estimator scores the true pair against
//! a pool of negatives drawn from the same context:
//!
//! ```text
//! gmi_i = ℓ(c_i, z_i, y_i) − log( (1/|P|) Σ_{j∈P(c_i)} exp ℓ(c_i, z_j, y_i) )
//! ```
//!
//! The pool includes `z_i` itself, so every contribution is at most
//! `log |P|`. The mean of the first term is the direct term, the mean of the
//! second the competition term.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_id, EmbeddingSet, PairedLaws, TARGET};
use crate::decoder::{self, LipschitzEstimate, ToyDecoder};
use crate::error::{Error, Result};
use crate::probe::{self, ProbeModel};
use crate::rng;
use crate::stats;
use crate::transport::{self, StratifiedW1, W1Method};

/// Exact diameter up to this many samples; random pairs beyond.
pub const EXACT_DIAMETER_LIMIT: usize = 2048;
pub const DIAMETER_PAIRS: usize = 1_000_000;
/// Slack on the holds flags, relative to the bound.
pub const BOUND_SLACK: f64 = 1e-6;
/// Tolerance below zero before an accessibility gap counts as violated.
pub const GAP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmiEstimate {
    pub value: f64,
    pub direct_term: f64,
    pub competition_term: f64,
    /// Largest negative pool; `value ≤ log(negatives_per_stratum)`.
    pub negatives_per_stratum: usize,
    pub n: usize,
    /// Standard error of the mean contribution.
    pub std_error: f64,
    /// Contexts with a single sample, scored against all samples instead.
    pub fallback_pools: usize,
    #[serde(skip)]
    pub per_sample: Vec<f64>,
}

/// Target GMI of `dec` under `law`.
pub fn estimate_gmi(dec: &ToyDecoder, law: &EmbeddingSet) -> Result<GmiEstimate> {
    estimate_gmi_attribute(dec, law, TARGET)
}

/// GMI with the attribute's readout tokens in place of the target.
pub fn estimate_gmi_attribute(dec: &ToyDecoder, law: &EmbeddingSet, attribute: &str) -> Result<GmiEstimate> {
    let labels = law.labels(attribute)?;
    let tokens: Vec<usize> = labels.iter().map(|&a| dec.readout_token(attribute, a)).collect();
    let contexts = law.contexts();
    let x = law.features();
    gmi_from_tokens(dec, &x, &contexts, &tokens)
}

fn gmi_from_tokens(dec: &ToyDecoder, x: &Array2<f64>, contexts: &[usize], tokens: &[usize]) -> Result<GmiEstimate> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty);
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= dec.vocab()) {
        return Err(Error::TokenOutOfRange { token: t, vocab: dec.vocab() });
    }
    if let Some(&c) = contexts.iter().find(|&&c| c >= dec.num_contexts()) {
        return Err(Error::ContextOutOfRange { context: c, contexts: dec.num_contexts() });
    }
    let pools = group_by_id(contexts);
    // floored scores of every token at every sample, in the sample's own context
    let scores: Vec<Array1<f64>> = x
        .outer_iter()
        .zip(contexts)
        .map(|(z, &c)| dec.log_scores(c, z))
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let mut direct = vec![0.0; n];
    let mut competition = vec![0.0; n];
    let mut fallback_pools = 0;
    let mut largest = 0;
    for (&c, members) in &pools {
        let (pool, rescore) = if members.len() < 2 {
            fallback_pools += 1;
            (&all, true)
        } else {
            (members, false)
        };
        largest = largest.max(pool.len());
        for &i in members {
            let y = tokens[i];
            direct[i] = scores[i][y];
            let negatives: Vec<f64> = if rescore {
                pool.iter()
                    .map(|&j| dec.log_scores(c, x.row(j))[y])
                    .collect()
            } else {
                pool.iter().map(|&j| scores[j][y]).collect()
            };
            competition[i] = stats::log_sum_exp(&negatives) - (pool.len() as f64).ln();
        }
    }
    let per_sample: Vec<f64> = direct.iter().zip(&competition).map(|(a, b)| a - b).collect();
    let direct_term = direct.iter().sum::<f64>() / n as f64;
    let competition_term = competition.iter().sum::<f64>() / n as f64;
    let (_, sd) = stats::mean_std(&per_sample);
    Ok(GmiEstimate {
        value: direct_term - competition_term,
        direct_term,
        competition_term,
        negatives_per_stratum: largest,
        n,
        std_error: if n > 1 { sd / ((n - 1) as f64).sqrt() } else { 0.0 },
        fallback_pools,
        per_sample,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Diameter {
    pub d: f64,
    /// Clamped to `d`.
    pub d_eff: f64,
    pub participation_ratio: f64,
    /// Whether `d` came from random pairs.
    pub approximate: bool,
}

/// Ambient diameter and the effective support diameter
/// `2 sqrt(Σ_{k ≤ ⌈PR⌉} λ_k)` of the pooled covariance spectrum.
pub fn effective_diameter(pooled: &EmbeddingSet) -> Result<Diameter> {
    let x = pooled.features();
    let n = x.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples { required: 2, found: n });
    }
    let dist = |i: usize, j: usize| {
        x.row(i)
            .iter()
            .zip(x.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let approximate = n > EXACT_DIAMETER_LIMIT;
    let d = if approximate {
        let mut rng = rng::stream(0, rng::streams::PAIR_SAMPLING);
        (0..DIAMETER_PAIRS)
            .map(|_| dist(rng.random_range(0..n), rng.random_range(0..n)))
            .fold(0.0, f64::max)
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| dist(i, j)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    };
    let cov = stats::covariance(&x)?;
    let spectrum = stats::top_k_eigen(&cov, cov.nrows())?;
    let lambdas = spectrum.eigenvalues.to_vec();
    let (pr, d_eff) = match stats::participation_ratio(&lambdas) {
        Ok(pr) => {
            let k = (pr.ceil() as usize).min(lambdas.len());
            (pr, 2.0 * lambdas[..k].iter().sum::<f64>().sqrt())
        }
        Err(Error::ZeroSpectrum) => (0.0, 0.0),
        Err(e) => return Err(e),
    };
    Ok(Diameter { d, d_eff: d_eff.min(d), participation_ratio: pr, approximate })
}

/// `(1 + e^{L·D}) · L · W1`.
pub fn bound_value(l: f64, diameter: f64, w1: f64) -> f64 {
    if l == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    (1.0 + (l * diameter).exp()) * l * w1
}

pub fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + BOUND_SLACK)
}

/// Bound evaluated with one Lipschitz constant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundSides {
    pub lipschitz: f64,
    pub bound_ambient: f64,
    pub bound_support: f64,
    pub holds_ambient: bool,
    pub holds_support: bool,
}

impl BoundSides {
    fn new(lhs: f64, l: f64, diameter: &Diameter, w1: f64) -> Self {
        let bound_ambient = bound_value(l, diameter.d, w1);
        let bound_support = bound_value(l, diameter.d_eff, w1);
        Self {
            lipschitz: l,
            bound_ambient,
            bound_support,
            holds_ambient: holds(lhs, bound_ambient),
            holds_support: holds(lhs, bound_support),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub gmi_text: GmiEstimate,
    pub gmi_modal: GmiEstimate,
    /// `|GMI_text − GMI_modal|`.
    pub lhs: f64,
    pub delta_direct: f64,
    pub delta_competition: f64,
    pub l_log: LipschitzEstimate,
    pub d: f64,
    pub d_eff: f64,
    pub participation_ratio: f64,
    pub w1: StratifiedW1,
    /// With `L = l_log.p95`.
    pub bound_ambient: f64,
    pub bound_support: f64,
    pub holds_ambient: bool,
    pub holds_support: bool,
    /// With the decoder's global Lipschitz bound.
    pub analytic: BoundSides,
}

/// Both sides of the GMI–Wasserstein inequality for a frozen decoder.
pub fn evaluate_bound(dec: &ToyDecoder, laws: &PairedLaws, w1_method: W1Method) -> Result<BoundReport> {
    evaluate_bound_with(dec, laws, w1_method, None)
}

/// [`evaluate_bound`] with gradient norms measured elsewhere (for instance
/// on the real model the toy decoder stands in for). The analytic side
/// still uses `dec`.
pub fn evaluate_bound_with(
    dec: &ToyDecoder,
    laws: &PairedLaws,
    w1_method: W1Method,
    l_log: Option<&LipschitzEstimate>,
) -> Result<BoundReport> {
    laws.check()?;
    let gmi_text = estimate_gmi(dec, &laws.text)?;
    let gmi_modal = estimate_gmi(dec, &laws.modal)?;
    let pooled = laws.pooled();
    let l_log = match l_log {
        Some(est) => est.clone(),
        None => decoder::estimate_lipschitz(dec, &pooled)?,
    };
    let diameter = effective_diameter(&pooled)?;
    let w1 = transport::stratified_w1(laws, w1_method)?;
    let lhs = (gmi_text.value - gmi_modal.value).abs();
    let empirical = BoundSides::new(lhs, l_log.p95, &diameter, w1.value);
    let analytic = BoundSides::new(lhs, dec.analytic_lipschitz(), &diameter, w1.value);
    Ok(BoundReport {
        lhs,
        delta_direct: (gmi_text.direct_term - gmi_modal.direct_term).abs(),
        delta_competition: (gmi_text.competition_term - gmi_modal.competition_term).abs(),
        gmi_text,
        gmi_modal,
        l_log,
        d: diameter.d,
        d_eff: diameter.d_eff,
        participation_ratio: diameter.participation_ratio,
        w1,
        bound_ambient: empirical.bound_ambient,
        bound_support: empirical.bound_support,
        holds_ambient: empirical.holds_ambient,
        holds_support: empirical.holds_support,
        analytic,
    })
}

/// Source of `I(Z; A)` for a law with known generative densities.
pub trait MiOracle: Sync {
    /// Mutual information in nats and its Monte-Carlo standard error.
    fn mutual_information(&self, attribute: &str) -> Result<(f64, f64)>;
}

pub enum MiSource<'a> {
    Oracle(&'a dyn MiOracle),
    Supplied(f64),
    Unknown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub attribute: String,
    pub mi: f64,
    pub mi_std: f64,
    pub gmi: GmiEstimate,
    pub gap: f64,
    /// `gap < −GAP_TOLERANCE`.
    pub violated: bool,
}

/// `I(Z; A) − GMI(A)`, with the attribute scored through its readout
/// tokens.
pub fn accessibility_gap(dec: &ToyDecoder, modal: &EmbeddingSet, attribute: &str, mi: MiSource<'_>) -> Result<GapReport> {
    let (mi, mi_std) = match mi {
        MiSource::Oracle(o) => o.mutual_information(attribute)?,
        MiSource::Supplied(v) => (v, 0.0),
        MiSource::Unknown => return Err(Error::UnknownDensities),
    };
    let gmi = estimate_gmi_attribute(dec, modal, attribute)?;
    let gap = mi - gmi.value;
    Ok(GapReport {
        attribute: attribute.to_string(),
        mi,
        mi_std,
        gmi,
        gap,
        violated: gap < -GAP_TOLERANCE,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymmetryReport {
    pub attribute: String,
    /// `|E_M log h − E_T log h|` with clipped log-likelihoods.
    pub probe_drop: f64,
    pub probe_bound: f64,
    /// Drop relative to the probe's gain over chance, `log K + E_T log h`.
    pub probe_relative_drop: f64,
    pub probe_holds: bool,
    pub gmi_drop: f64,
    pub decoder_bound: f64,
    /// `|ΔGMI| / GMI_text`.
    pub decoder_relative_drop: f64,
    pub decoder_holds: bool,
    pub l_log: f64,
    pub l_h: f64,
    /// `L_log / L_h`.
    pub sensitivity_ratio: f64,
    pub w1: f64,
}

/// Run the probe penalty check and the decoder bound on one law pair.
pub fn asymmetry_experiment(
    dec: &ToyDecoder,
    probe_model: &ProbeModel,
    laws: &PairedLaws,
    attribute: &str,
    w1_method: W1Method,
) -> Result<AsymmetryReport> {
    let penalty = probe::probe_penalty_check(probe_model, laws, attribute)?;
    let bound = evaluate_bound(dec, laws, w1_method)?;
    let gain = (probe_model.classes as f64).ln() + penalty.text_log_score;
    let relative = |drop: f64, base: f64| if drop == 0.0 { 0.0 } else { drop / base };
    Ok(AsymmetryReport {
        attribute: attribute.to_string(),
        probe_drop: penalty.lhs,
        probe_bound: penalty.rhs,
        probe_relative_drop: relative(penalty.lhs, gain),
        probe_holds: penalty.holds,
        gmi_drop: bound.lhs,
        decoder_bound: bound.bound_support,
        decoder_relative_drop: relative(bound.lhs, bound.gmi_text.value),
        decoder_holds: bound.holds_support,
        l_log: bound.l_log.p95,
        l_h: penalty.lipschitz,
        sensitivity_ratio: if penalty.lipschitz > 0.0 { bound.l_log.p95 / penalty.lipschitz } else { f64::INFINITY },
        w1: bound.w1.value,
    })
}

/// Per-context pool sizes of a law.
pub fn pool_sizes(law: &EmbeddingSet) -> BTreeMap<usize, usize> {
    group_by_id(&law.contexts()).into_iter().map(|(c, v)| (c, v.len())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LawTag;
    use crate::synth::{self, fixtures, AttributePlan, Carrier, GroundTruth, SynthConfig};
    use crate::testkit::{gaussian_matrix, gaussian_vector, labelled};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn strata_set(x: &Array2<f64>, pools: usize, vocab: usize) -> EmbeddingSet {
        let n = x.nrows();
        labelled(x, (0..n).map(|i| i % vocab).collect(), vocab, Some(((0..n).map(|i| i % pools).collect(), pools)))
    }

    #[test]
    fn uniform_decoder_has_zero_gmi() {
        let set = strata_set(&gaussian_matrix(50, 3, 1), 2, 4);
        let dec = ToyDecoder::linear(Array2::zeros((4, 3)), Array1::zeros(4));
        let mut dec = dec;
        dec.context_embed = Array2::zeros((2, 3));
        let g = estimate_gmi(&dec, &set).unwrap();
        assert_eq!(g.value, 0.0);
        assert_eq!(g.negatives_per_stratum, 25);
    }

    #[test]
    fn duplicated_samples_have_zero_gmi() {
        let row = gaussian_vector(3, 2);
        let x = Array2::from_shape_fn((20, 3), |(_, j)| row[j]);
        let set = strata_set(&x, 2, 4);
        let mut dec = ToyDecoder::linear(gaussian_matrix(4, 3, 3), Array1::zeros(4));
        dec.context_embed = Array2::zeros((2, 3));
        assert_abs_diff_eq!(estimate_gmi(&dec, &set).unwrap().value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn separable_pool_reaches_the_ceiling() {
        for n in [2usize, 4, 8] {
            let (set, dec) = fixtures::separable_pool(n, 20 * (n - 1) + 1, 6.0).unwrap();
            let g = estimate_gmi(&dec, &set).unwrap();
            let ceiling = (n as f64).ln();
            assert!(g.value <= ceiling + 1e-9);
            assert!(g.value >= ceiling - 0.05, "n = {n}: {}", g.value);
        }
    }

    #[test]
    fn singleton_contexts_fall_back_to_all_samples() {
        let x = gaussian_matrix(5, 2, 4);
        let set = labelled(&x, vec![0, 1, 0, 1, 0], 2, Some((vec![0, 0, 0, 0, 1], 2)));
        let mut dec = ToyDecoder::linear(gaussian_matrix(2, 2, 5), Array1::zeros(2));
        dec.context_embed = Array2::zeros((2, 2));
        let g = estimate_gmi(&dec, &set).unwrap();
        assert_eq!(g.fallback_pools, 1);
        assert_eq!(g.negatives_per_stratum, 5);
    }

    #[test]
    fn diameter_examples() {
        let two = labelled(&array![[0.0, 0.0], [3.0, 4.0]], vec![0, 0], 1, None);
        assert_abs_diff_eq!(effective_diameter(&two).unwrap().d, 5.0, epsilon = 1e-12);
        let same = labelled(&array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]], vec![0; 3], 1, None);
        let d = effective_diameter(&same).unwrap();
        assert_eq!((d.d, d.d_eff), (0.0, 0.0));
        let iso = labelled(&gaussian_matrix(4000, 2, 6), vec![0; 4000], 1, None);
        let d = effective_diameter(&iso).unwrap();
        assert!(d.approximate);
        assert_abs_diff_eq!(d.participation_ratio, 2.0, epsilon = 0.05);
        assert!((d.d_eff / (2.0 * 2f64.sqrt()) - 1.0).abs() < 0.1);
        assert!(d.d_eff <= d.d);
    }

    #[test]
    fn bound_value_examples() {
        assert_eq!(bound_value(0.0, 3.0, 1.0), 0.0);
        assert_eq!(bound_value(2.0, 3.0, 0.0), 0.0);
        assert_abs_diff_eq!(bound_value(1.0, 0.0, 0.5), 1.0, epsilon = 1e-15);
        assert!(holds(1.0, 1.0));
        assert!(!holds(1.1, 1.0));
    }

    #[test]
    fn identical_laws_have_zero_lhs() {
        let cfg = SynthConfig { n_per_stratum: 16, ..SynthConfig::default() };
        let laws = synth::draw(&cfg, 0).unwrap();
        let same = PairedLaws::new(laws.text.clone(), laws.text.clone()).unwrap();
        let dec = decoder::train_decoder(&laws.text, 0, &decoder::DecoderConfig::default()).unwrap();
        let r = evaluate_bound(&dec, &same, W1Method::Exact).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.holds_support && r.holds_ambient && r.analytic.holds_support);
        assert!(r.d_eff <= r.d);
    }

    #[test]
    fn translated_laws_obey_the_bound() {
        for delta in [0.25, 1.0, 3.0] {
            let cfg = fixtures::shift_ladder(5, delta);
            let cfg = SynthConfig { n_per_stratum: 16, ..cfg };
            let laws = synth::draw(&cfg, 0).unwrap();
            let dec = decoder::train_decoder(&laws.text, 0, &decoder::DecoderConfig::default()).unwrap();
            let r = evaluate_bound(&dec, &laws, W1Method::Exact).unwrap();
            assert_abs_diff_eq!(r.w1.value, delta, epsilon = 1e-5 * (1.0 + delta));
            assert!(r.holds_support, "δ = {delta}: {} > {}", r.lhs, r.bound_support);
            assert!(r.holds_ambient);
            let expected = bound_value(r.l_log.p95, r.d_eff, r.w1.value);
            assert_abs_diff_eq!(r.bound_support, expected, epsilon = 1e-12 * expected);
        }
    }

    #[test]
    fn supplied_gradient_norms_replace_the_measured_ones() {
        let cfg = SynthConfig { n_per_stratum: 16, shift: 1.0, ..SynthConfig::default() };
        let laws = synth::draw(&cfg, 0).unwrap();
        let dec = decoder::train_decoder(&laws.text, 0, &decoder::DecoderConfig::default()).unwrap();
        let external = LipschitzEstimate::from_norms(vec![0.5; 40]);
        let r = evaluate_bound_with(&dec, &laws, W1Method::Exact, Some(&external)).unwrap();
        assert_eq!(r.l_log, external);
        assert_abs_diff_eq!(r.bound_support, bound_value(0.5, r.d_eff, r.w1.value), epsilon = 1e-12);
        let measured = evaluate_bound(&dec, &laws, W1Method::Exact).unwrap();
        assert_eq!(r.lhs, measured.lhs);
        assert_eq!(r.analytic.bound_support, measured.analytic.bound_support);
    }

    #[test]
    fn gap_examples() {
        let base = SynthConfig {
            n_per_stratum: 64,
            attribute_plan: vec![
                AttributePlan::new("noise", Carrier::TextSpan, 0.0, 2),
                AttributePlan::new("tone", Carrier::TextSpan, 4.0, 2),
            ],
            seed: 9,
            ..SynthConfig::default()
        };
        let laws = synth::draw(&base, 0).unwrap();
        let oracle = GroundTruth::new(base.clone(), LawTag::Modal);
        let n = laws.modal.len() as f64;

        let noise_dec = fixtures::attribute_decoder(&laws.text, "noise", 0).unwrap();
        let r = accessibility_gap(&noise_dec, &laws.modal, "noise", MiSource::Oracle(&oracle)).unwrap();
        assert_abs_diff_eq!(r.mi, 0.0, epsilon = 3.0 / n.sqrt());
        assert_abs_diff_eq!(r.gmi.value, 0.0, epsilon = 3.0 / n.sqrt());
        assert!(!r.violated);

        let tone_dec = fixtures::attribute_decoder(&laws.text, "tone", 0).unwrap();
        let r = accessibility_gap(&tone_dec, &laws.modal, "tone", MiSource::Oracle(&oracle)).unwrap();
        assert!(r.mi > 0.6);
        assert!(r.gap <= 0.1 * r.mi, "{r:?}");
        assert!(!r.violated);

        let cfg = fixtures::orthogonal_carrier(9);
        let laws = synth::draw(&cfg, 0).unwrap();
        let dec = fixtures::orthogonal_decoder(&cfg, &laws, 0).unwrap();
        let oracle = GroundTruth::new(cfg, LawTag::Modal);
        let r = accessibility_gap(&dec, &laws.modal, fixtures::CARRIED, MiSource::Oracle(&oracle)).unwrap();
        assert!(r.mi > 0.2);
        assert!(r.gmi.value.abs() < 0.05);
        assert!(r.gap >= 0.8 * r.mi);

        assert!(matches!(
            accessibility_gap(&dec, &laws.modal, fixtures::CARRIED, MiSource::Unknown),
            Err(Error::UnknownDensities)
        ));
        let supplied = accessibility_gap(&dec, &laws.modal, fixtures::CARRIED, MiSource::Supplied(0.3)).unwrap();
        assert_eq!(supplied.mi, 0.3);
    }

    #[test]
    fn asymmetry_on_identical_laws_is_zero() {
        let cfg = SynthConfig { n_per_stratum: 16, ..SynthConfig::default() };
        let laws = synth::draw(&cfg, 0).unwrap();
        let same = PairedLaws::new(laws.text.clone(), laws.text.clone()).unwrap();
        let dec = decoder::train_decoder(&laws.text, 0, &decoder::DecoderConfig::default()).unwrap();
        let probe_model = probe::train_probe_full(&laws.text, TARGET, 1.0).unwrap();
        let r = asymmetry_experiment(&dec, &probe_model, &same, TARGET, W1Method::Exact).unwrap();
        assert_eq!((r.probe_drop, r.gmi_drop), (0.0, 0.0));
        assert!(r.probe_holds && r.decoder_holds);
    }

    #[test]
    fn constant_probe_never_degrades() {
        let cfg = SynthConfig { n_per_stratum: 16, shift: 2.0, ..SynthConfig::default() };
        let laws = synth::draw(&cfg, 0).unwrap();
        let dec = decoder::train_decoder(&laws.text, 0, &decoder::DecoderConfig::default()).unwrap();
        let flat = ProbeModel::from_parts(Array2::zeros((4, cfg.d)), Array1::zeros(4));
        let r = asymmetry_experiment(&dec, &flat, &laws, TARGET, W1Method::Exact).unwrap();
        assert_eq!(r.probe_drop, 0.0);
        assert_eq!(r.l_h, 0.0);
        assert!(r.gmi_drop > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gmi_never_exceeds_its_ceiling(seed in 0u64..10_000, n in 2usize..40, pools in 1usize..4, scale in 0.0f64..20.0) {
            let set = strata_set(&gaussian_matrix(n, 3, seed), pools.min(n), 5);
            let mut dec = ToyDecoder::linear(gaussian_matrix(5, 3, seed + 1) * scale, gaussian_vector(5, seed + 2));
            dec.context_embed = gaussian_matrix(pools.min(n), 3, seed + 3);
            let g = estimate_gmi(&dec, &set).unwrap();
            prop_assert!(g.value <= (g.negatives_per_stratum as f64).ln() + 1e-9);
            prop_assert!((g.value - (g.direct_term - g.competition_term)).abs() < 1e-12);
            let mx = g.per_sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mx <= (g.negatives_per_stratum as f64).ln() + 1e-9);
        }
    }
}
