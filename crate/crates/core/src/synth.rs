//! Synthetic law pairs with known densities.
//!
//! Both laws are Gaussian mixtures over `contexts × targets` strata. The
//! first `text_dim` coordinates form the text span, the rest the
//! modality-specific (MS) span. Within the text span the leading
//! `signal_dims` coordinates carry the target means, followed by one
//! coordinate per text-span attribute carrier, followed by nuisance
//! coordinates. MS-span attribute carriers take the leading MS coordinates.
//!
//! Modal and text samples are drawn with common base noise: modal sample `i`
//! of a stratum reuses the standard-normal vector of text sample `i`. A
//! shift-only configuration therefore produces a modal set that is exactly
//! the text set translated by `shift`.

pub mod fixtures;

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingSet, LawTag, LayerTag, PairedLaws, CONTEXT, TARGET};
use crate::decoder::ToyDecoder;
use crate::error::{Error, Result};
use crate::gmi::MiOracle;
use crate::rng;
use crate::stats;

pub const MI_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    TextSpan,
    MsSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePlan {
    pub name: String,
    pub carrier: Carrier,
    /// Distance between adjacent class means along the carrier.
    pub separation: f64,
    pub classes: usize,
}

impl AttributePlan {
    pub fn new(name: &str, carrier: Carrier, separation: f64, classes: usize) -> Self {
        Self { name: name.to_string(), carrier, separation, classes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d: usize,
    pub text_dim: usize,
    pub signal_dims: usize,
    pub contexts: usize,
    pub targets: usize,
    pub n_per_stratum: usize,
    /// Scale of the random target means.
    pub class_separation: f64,
    /// Scale of the random per-context offsets.
    pub context_separation: f64,
    pub within_std: f64,
    pub nuisance_std: f64,
    /// Standard deviation of the text law along the MS span.
    pub text_ms_std: f64,
    /// Modal mean translation, along a random unit direction of the text span.
    pub shift: f64,
    /// Angle of the Givens rotations pairing text coordinate `i` with MS
    /// coordinate `i`, applied to modal deviations.
    pub rotation_angle: f64,
    /// Extra modal standard deviation along the MS span.
    pub ms_noise_scale: f64,
    pub attribute_plan: Vec<AttributePlan>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 16,
            text_dim: 8,
            signal_dims: 4,
            contexts: 2,
            targets: 4,
            n_per_stratum: 64,
            class_separation: 1.5,
            context_separation: 1.0,
            within_std: 0.5,
            nuisance_std: 0.5,
            text_ms_std: 0.05,
            shift: 0.0,
            rotation_angle: 0.0,
            ms_noise_scale: 0.0,
            attribute_plan: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn strata(&self) -> usize {
        self.contexts * self.targets
    }

    pub fn ms_dim(&self) -> usize {
        self.d - self.text_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.text_dim > self.d || self.text_dim == 0 {
            return bad(format!("text_dim {} must lie in 1..={}", self.text_dim, self.d));
        }
        let text_carriers = self.carriers(Carrier::TextSpan).len();
        let ms_carriers = self.carriers(Carrier::MsSpan).len();
        if self.signal_dims == 0 || self.signal_dims + text_carriers > self.text_dim {
            return bad(format!(
                "text span of {} dims cannot hold {} signal dims and {} carriers",
                self.text_dim, self.signal_dims, text_carriers
            ));
        }
        if ms_carriers > self.ms_dim() {
            return bad(format!("MS span of {} dims cannot hold {} carriers", self.ms_dim(), ms_carriers));
        }
        if self.contexts == 0 || self.targets < 2 || self.n_per_stratum < 2 {
            return bad("need at least one context, two targets and two samples per stratum".into());
        }
        let magnitudes = [
            self.class_separation,
            self.context_separation,
            self.within_std,
            self.nuisance_std,
            self.text_ms_std,
            self.shift,
            self.rotation_angle,
            self.ms_noise_scale,
        ];
        if magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad("magnitudes must be finite and nonnegative".into());
        }
        for plan in &self.attribute_plan {
            if plan.classes < 2 || !(plan.separation >= 0.0) {
                return bad(format!("attribute `{}` needs ≥ 2 classes and a nonnegative separation", plan.name));
            }
            if plan.name == TARGET || plan.name == CONTEXT {
                return bad(format!("attribute name `{}` is reserved", plan.name));
            }
        }
        Ok(())
    }

    fn carriers(&self, span: Carrier) -> Vec<usize> {
        self.attribute_plan
            .iter()
            .enumerate()
            .filter(|(_, p)| p.carrier == span)
            .map(|(i, _)| i)
            .collect()
    }

    /// Coordinate carrying each planned attribute.
    pub fn carrier_dims(&self) -> Vec<usize> {
        let mut dims = vec![0; self.attribute_plan.len()];
        for (slot, i) in self.carriers(Carrier::TextSpan).into_iter().enumerate() {
            dims[i] = self.signal_dims + slot;
        }
        for (slot, i) in self.carriers(Carrier::MsSpan).into_iter().enumerate() {
            dims[i] = self.text_dim + slot;
        }
        dims
    }

    /// Coordinates of the target signal.
    pub fn signal_range(&self) -> std::ops::Range<usize> {
        0..self.signal_dims
    }

    /// Per-coordinate standard deviation of the base noise in one law.
    pub fn noise_std(&self, law: LawTag) -> Array1<f64> {
        let text_carriers = self.carriers(Carrier::TextSpan).len();
        Array1::from_shape_fn(self.d, |j| {
            if j < self.signal_dims + text_carriers {
                self.within_std
            } else if j < self.text_dim {
                self.nuisance_std
            } else {
                match law {
                    LawTag::Text => self.text_ms_std,
                    LawTag::Modal => self.text_ms_std.hypot(self.ms_noise_scale),
                }
            }
        })
    }
}

/// The aligned-encoder analogue of a configuration: MS-span carriers move to
/// the text span with the same separation, and the modal law gains no MS
/// variance (no extra noise, no rotation into the MS span).
pub fn aligned_encoder_variant(cfg: &SynthConfig) -> SynthConfig {
    let mut out = cfg.clone();
    for plan in &mut out.attribute_plan {
        plan.carrier = Carrier::TextSpan;
    }
    out.ms_noise_scale = 0.0;
    out.rotation_angle = 0.0;
    out
}

/// Seed-determined structure shared by every draw of a configuration.
#[derive(Debug, Clone)]
pub struct Structure {
    /// `strata × d` text-law stratum means (stratum `s = c · targets + y`).
    pub means: Array2<f64>,
    pub shift_direction: Array1<f64>,
}

pub fn structure(cfg: &SynthConfig) -> Structure {
    let mut rng = rng::stream(cfg.seed, rng::streams::STRUCTURE);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let sig = cfg.signal_dims;
    let target_means: Vec<Vec<f64>> = (0..cfg.targets).map(|_| normal(sig)).collect();
    let context_means: Vec<Vec<f64>> = (0..cfg.contexts).map(|_| normal(sig)).collect();
    let mut means = Array2::zeros((cfg.strata(), cfg.d));
    for c in 0..cfg.contexts {
        for y in 0..cfg.targets {
            for j in 0..sig {
                means[[c * cfg.targets + y, j]] =
                    cfg.class_separation * target_means[y][j] + cfg.context_separation * context_means[c][j];
            }
        }
    }
    let dir = loop {
        let v = Array1::from(normal(cfg.text_dim));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            break v / norm;
        }
    };
    let mut shift_direction = Array1::zeros(cfg.d);
    shift_direction.slice_mut(ndarray::s![..cfg.text_dim]).assign(&dir);
    Structure { means, shift_direction }
}

/// Class ids of every planned attribute for within-stratum index `i`
/// (balanced: mixed-radix digits of `i`).
fn attribute_classes(cfg: &SynthConfig, i: usize) -> Vec<usize> {
    let mut rest = i;
    cfg.attribute_plan
        .iter()
        .map(|p| {
            let k = rest % p.classes;
            rest /= p.classes;
            k
        })
        .collect()
}

fn attribute_offset(plan: &AttributePlan, class: usize) -> f64 {
    (class as f64 - (plan.classes as f64 - 1.0) / 2.0) * plan.separation
}

/// Rotate `x` in the planes `(i, text_dim + i)`.
fn rotate(cfg: &SynthConfig, x: &mut Array1<f64>) {
    if cfg.rotation_angle == 0.0 {
        return;
    }
    let (s, c) = cfg.rotation_angle.sin_cos();
    for i in 0..cfg.text_dim.min(cfg.ms_dim()) {
        let j = cfg.text_dim + i;
        let (a, b) = (x[i], x[j]);
        x[i] = c * a - s * b;
        x[j] = s * a + c * b;
    }
}

fn law_mean(cfg: &SynthConfig, st: &Structure, law: LawTag, stratum: usize, classes: &[usize]) -> Array1<f64> {
    let mut m = st.means.row(stratum).to_owned();
    let dims = cfg.carrier_dims();
    for ((plan, &k), &dim) in cfg.attribute_plan.iter().zip(classes).zip(&dims) {
        if law == LawTag::Modal || plan.carrier == Carrier::TextSpan {
            m[dim] += attribute_offset(plan, k);
        }
    }
    if law == LawTag::Modal {
        m.scaled_add(cfg.shift, &st.shift_direction);
    }
    m
}

/// One draw of the law pair; `draw` selects an independent sample stream
/// over the same structure.
pub fn draw(cfg: &SynthConfig, draw: u64) -> Result<PairedLaws> {
    cfg.validate()?;
    let st = structure(cfg);
    let n = cfg.strata() * cfg.n_per_stratum;
    let mut text = Array2::<f64>::zeros((n, cfg.d));
    let mut modal = Array2::<f64>::zeros((n, cfg.d));
    let mut strata = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    let mut attrs: Vec<Vec<usize>> = vec![Vec::with_capacity(n); cfg.attribute_plan.len()];
    let text_std = cfg.noise_std(LawTag::Text);
    let modal_std = cfg.noise_std(LawTag::Modal);
    let mut rng = rng::stream(rng::child_seed(cfg.seed, draw), rng::streams::SAMPLES);
    let mut row = 0;
    for s in 0..cfg.strata() {
        for i in 0..cfg.n_per_stratum {
            let classes = attribute_classes(cfg, i);
            let e = Array1::from_shape_fn(cfg.d, |_| StandardNormal.sample(&mut rng));
            let t = law_mean(cfg, &st, LawTag::Text, s, &classes) + &(&e * &text_std);
            let mut dev = &e * &modal_std;
            rotate(cfg, &mut dev);
            let m = law_mean(cfg, &st, LawTag::Modal, s, &classes) + &dev;
            text.row_mut(row).assign(&t);
            modal.row_mut(row).assign(&m);
            strata.push(s);
            contexts.push(s / cfg.targets);
            targets.push(s % cfg.targets);
            for (a, &k) in attrs.iter_mut().zip(&classes) {
                a.push(k);
            }
            row += 1;
        }
    }
    let build = |x: &Array2<f64>, law: LawTag| -> Result<EmbeddingSet> {
        let mut set = EmbeddingSet::from_f64(x, LayerTag::Synthetic, law)?
            .with_labels_k(TARGET, targets.clone(), cfg.targets)?
            .with_labels_k(CONTEXT, contexts.clone(), cfg.contexts)?
            .with_strata(strata.clone())?;
        for (plan, ids) in cfg.attribute_plan.iter().zip(&attrs) {
            set = set.with_labels_k(&plan.name, ids.clone(), plan.classes)?;
        }
        Ok(set)
    };
    PairedLaws::new(build(&modal, LawTag::Modal)?, build(&text, LawTag::Text)?)
}

/// Draw 0 of the configuration together with its densities.
pub fn generate_pair(cfg: &SynthConfig) -> Result<(PairedLaws, GroundTruth)> {
    let laws = draw(cfg, 0)?;
    Ok((laws, GroundTruth::new(cfg.clone(), LawTag::Modal)))
}

/// Exact densities of one law of a configuration.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub cfg: SynthConfig,
    pub law: LawTag,
    structure: Structure,
    /// Per-coordinate noise std (jittered away from zero).
    std: Array1<f64>,
}

impl GroundTruth {
    pub fn new(cfg: SynthConfig, law: LawTag) -> Self {
        let structure = structure(&cfg);
        let raw = cfg.noise_std(law);
        let scale = raw.iter().fold(0.0f64, |a, &v| a.max(v)).max(1.0);
        let std = raw.mapv(|v| v.max(1e-9 * scale).max(1e-300));
        Self { cfg, law, structure, std }
    }

    pub fn for_law(&self, law: LawTag) -> Self {
        Self::new(self.cfg.clone(), law)
    }

    fn whiten(&self, z: ArrayView1<f64>, mean: &Array1<f64>) -> Array1<f64> {
        let mut dev = &z - mean;
        if self.law == LawTag::Modal && self.cfg.rotation_angle != 0.0 {
            // inverse rotation
            let mut inv = self.cfg.clone();
            inv.rotation_angle = -inv.rotation_angle;
            rotate(&inv, &mut dev);
        }
        dev / &self.std
    }

    fn log_norm_const(&self) -> f64 {
        -self.std.mapv(f64::ln).sum() - 0.5 * self.cfg.d as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// `log p(z | stratum, attribute classes)`.
    pub fn log_density_component(&self, z: ArrayView1<f64>, stratum: usize, classes: &[usize]) -> f64 {
        let mean = law_mean(&self.cfg, &self.structure, self.law, stratum, classes);
        let w = self.whiten(z, &mean);
        self.log_norm_const() - 0.5 * w.dot(&w)
    }

    fn combos(&self) -> Vec<Vec<usize>> {
        let total: usize = self.cfg.attribute_plan.iter().map(|p| p.classes).product();
        (0..total).map(|i| attribute_classes(&self.cfg, i)).collect()
    }

    /// `log p(z | stratum)`, a uniform mixture over attribute classes.
    pub fn log_density(&self, z: ArrayView1<f64>, stratum: usize) -> f64 {
        let parts: Vec<f64> = self
            .combos()
            .iter()
            .map(|k| self.log_density_component(z, stratum, k))
            .collect();
        stats::log_sum_exp(&parts) - (parts.len() as f64).ln()
    }

    fn sample_component(&self, rng: &mut rng::Rng, stratum: usize, classes: &[usize]) -> Array1<f64> {
        let e = Array1::from_shape_fn(self.cfg.d, |_| StandardNormal.sample(rng));
        let mut dev = &e * &self.std;
        if self.law == LawTag::Modal {
            rotate(&self.cfg, &mut dev);
        }
        law_mean(&self.cfg, &self.structure, self.law, stratum, classes) + dev
    }

    /// Importance-sampling estimate of `∫ p(z | stratum) dz` under a
    /// Gaussian proposal that is 1.5 times broader than the law along every
    /// coordinate, plus the spread of the attribute means.
    pub fn integrate_stratum(&self, stratum: usize, samples: usize, seed: u64) -> f64 {
        let d = self.cfg.d;
        let means: Vec<Array1<f64>> = self
            .combos()
            .iter()
            .map(|k| law_mean(&self.cfg, &self.structure, self.law, stratum, k))
            .collect();
        let center: Array1<f64> = means.iter().fold(Array1::zeros(d), |a, m| a + m) / means.len() as f64;
        let pairs = self.cfg.text_dim.min(self.cfg.ms_dim());
        let sigma = Array1::from_shape_fn(d, |j| {
            let partner = if self.cfg.rotation_angle == 0.0 {
                j
            } else if j < pairs {
                self.cfg.text_dim + j
            } else if j >= self.cfg.text_dim && j < self.cfg.text_dim + pairs {
                j - self.cfg.text_dim
            } else {
                j
            };
            let spread = means.iter().map(|m| (m[j] - center[j]).abs()).fold(0.0f64, f64::max);
            1.5 * self.std[j].max(self.std[partner]) + spread
        });
        let log_norm = -sigma.mapv(f64::ln).sum() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut rng = rng::stream(seed, rng::streams::MI_ORACLE);
        let total: f64 = (0..samples)
            .map(|_| {
                let e: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
                let z = &center + &(&e * &sigma);
                let log_q = log_norm - 0.5 * e.dot(&e);
                (self.log_density(z.view(), stratum) - log_q).exp()
            })
            .sum();
        total / samples as f64
    }

    /// Monte-Carlo `I(Z; A | stratum)` with `samples` draws. Strata differ
    /// only by a mean translation, so one stratum suffices.
    pub fn mutual_information_mc(&self, attribute: &str, samples: usize, seed: u64) -> Result<(f64, f64)> {
        let idx = self
            .cfg
            .attribute_plan
            .iter()
            .position(|p| p.name == attribute)
            .ok_or_else(|| Error::MissingAttribute(attribute.to_string()))?;
        let k = self.cfg.attribute_plan[idx].classes;
        let combos = self.combos();
        let mut rng = rng::stream(seed, rng::streams::MI_ORACLE);
        let values: Vec<f64> = (0..samples)
            .map(|m| {
                let combo = &combos[m % combos.len()];
                let z = self.sample_component(&mut rng, 0, combo);
                let comp: Vec<f64> = combos.iter().map(|c| self.log_density_component(z.view(), 0, c)).collect();
                let all = stats::log_sum_exp(&comp) - (combos.len() as f64).ln();
                let same: Vec<f64> = combos
                    .iter()
                    .zip(&comp)
                    .filter(|(c, _)| c[idx] == combo[idx])
                    .map(|(_, &v)| v)
                    .collect();
                let cond = stats::log_sum_exp(&same) - (same.len() as f64).ln();
                cond - all
            })
            .collect();
        let (mean, sd) = stats::mean_std(&values);
        Ok((mean.clamp(0.0, (k as f64).ln()), sd / (samples as f64).sqrt()))
    }
}

impl MiOracle for GroundTruth {
    fn mutual_information(&self, attribute: &str) -> Result<(f64, f64)> {
        self.mutual_information_mc(attribute, MI_SAMPLES, self.cfg.seed)
    }
}

/// Add a fixed random response to the MS span of a linear decoder:
/// `W[:, j] += N(0, scale²)` for every MS coordinate `j`.
pub fn inject_ms_response(dec: &ToyDecoder, cfg: &SynthConfig, scale: f64, seed: u64) -> ToyDecoder {
    let mut out = dec.clone();
    let mut rng = rng::stream(seed, rng::streams::DECODER_INIT);
    for j in cfg.text_dim..cfg.d {
        for v in 0..out.w.nrows() {
            let g: f64 = StandardNormal.sample(&mut rng);
            out.w[[v, j]] += scale * g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmi;
    use crate::modes;
    use crate::transport;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ms_attribute_config() -> SynthConfig {
        SynthConfig {
            ms_noise_scale: 2.0,
            attribute_plan: vec![AttributePlan::new("speaker", Carrier::MsSpan, 4.0, 2)],
            seed: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_configuration_repeats_the_text_law() {
        let laws = draw(&SynthConfig::default(), 0).unwrap();
        assert_eq!(laws.modal.features(), laws.text.features());
        let w1 = transport::stratified_w1(&laws, transport::W1Method::Exact).unwrap();
        assert_eq!(w1.value, 0.0);
    }

    #[test]
    fn shift_only_w1_is_the_shift() {
        for delta in [0.5, 2.0] {
            let cfg = SynthConfig { shift: delta, n_per_stratum: 32, seed: 11, ..SynthConfig::default() };
            let laws = draw(&cfg, 0).unwrap();
            assert_eq!(laws.text.len(), 256);
            let pooled = transport::pooled_w1(&laws, transport::W1Method::Exact).unwrap();
            assert!((pooled.value - delta).abs() <= 0.1 * delta);
            let strat = transport::stratified_w1(&laws, transport::W1Method::Exact).unwrap();
            assert_abs_diff_eq!(strat.value, delta, epsilon = 1e-5 * (1.0 + delta));
        }
    }

    #[test]
    fn draws_are_deterministic_and_distinct() {
        let cfg = ms_attribute_config();
        let a = draw(&cfg, 0).unwrap();
        let b = draw(&cfg, 0).unwrap();
        let c = draw(&cfg, 1).unwrap();
        assert_eq!(a.modal.features(), b.modal.features());
        assert_ne!(a.modal.features(), c.modal.features());
        assert_eq!(a.modal.labels("speaker").unwrap(), c.modal.labels("speaker").unwrap());
    }

    #[test]
    fn attributes_are_balanced_within_strata() {
        let mut cfg = ms_attribute_config();
        cfg.attribute_plan.push(AttributePlan::new("tone", Carrier::TextSpan, 1.0, 3));
        let laws = draw(&cfg, 0).unwrap();
        let strata = laws.text.stratum_ids().unwrap();
        let tone = laws.text.labels("tone").unwrap();
        for s in 0..cfg.strata() {
            let counts = (0..3)
                .map(|k| (0..strata.len()).filter(|&i| strata[i] == s && tone[i] == k).count())
                .collect::<Vec<_>>();
            // tone is the second mixed-radix digit, so counts move in pairs
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 2);
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let bad = [
            SynthConfig { text_dim: 20, ..SynthConfig::default() },
            SynthConfig { signal_dims: 9, ..SynthConfig::default() },
            SynthConfig { targets: 1, ..SynthConfig::default() },
            SynthConfig { shift: -1.0, ..SynthConfig::default() },
            SynthConfig { within_std: f64::NAN, ..SynthConfig::default() },
            SynthConfig {
                attribute_plan: vec![AttributePlan::new(TARGET, Carrier::TextSpan, 1.0, 2)],
                ..SynthConfig::default()
            },
            SynthConfig {
                attribute_plan: (0..9).map(|i| AttributePlan::new(&format!("a{i}"), Carrier::MsSpan, 1.0, 2)).collect(),
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidParameter(_))), "{cfg:?}");
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let mut cfg = ms_attribute_config();
        cfg.d = 6;
        cfg.text_dim = 4;
        cfg.signal_dims = 2;
        cfg.rotation_angle = 0.4;
        cfg.text_ms_std = 0.5;
        for law in [LawTag::Text, LawTag::Modal] {
            let truth = GroundTruth::new(cfg.clone(), law);
            for stratum in [0, 5] {
                let mass = truth.integrate_stratum(stratum, 200_000, 1);
                assert!((mass - 1.0).abs() < 0.01, "{law:?} stratum {stratum}: {mass}");
            }
        }
    }

    #[test]
    fn mutual_information_limits() {
        let mut cfg = ms_attribute_config();
        cfg.attribute_plan.push(AttributePlan::new("flat", Carrier::MsSpan, 0.0, 2));
        let truth = GroundTruth::new(cfg.clone(), LawTag::Modal);
        let (flat, se) = truth.mutual_information_mc("flat", 20_000, 0).unwrap();
        assert!(flat <= 3.0 * se + 1e-3);
        cfg.attribute_plan[0].separation = 40.0;
        let truth = GroundTruth::new(cfg, LawTag::Modal);
        let (sharp, _) = truth.mutual_information_mc("speaker", 20_000, 0).unwrap();
        assert_abs_diff_eq!(sharp, 2f64.ln(), epsilon = 1e-3);
        assert!(matches!(truth.mutual_information_mc("nope", 10, 0), Err(Error::MissingAttribute(_))));
    }

    #[test]
    fn ms_attribute_is_absent_from_the_text_law() {
        let cfg = ms_attribute_config();
        let text = GroundTruth::new(cfg, LawTag::Text);
        let (mi, se) = text.mutual_information_mc("speaker", 20_000, 0).unwrap();
        assert!(mi <= 3.0 * se + 1e-3);
    }

    #[test]
    fn aligned_variant_examples() {
        assert_eq!(aligned_encoder_variant(&SynthConfig::default()), SynthConfig::default());

        let cfg = ms_attribute_config();
        let non = draw(&cfg, 0).unwrap();
        let spectrum = modes::mode_alignment(&non.modal, &non.text, cfg.d, modes::DEFAULT_THRESHOLD).unwrap();
        assert!(spectrum.alignment[0] < 0.05);

        let aligned_cfg = aligned_encoder_variant(&cfg);
        let aligned = draw(&aligned_cfg, 0).unwrap();
        let spectrum = modes::mode_alignment(&aligned.modal, &aligned.text, cfg.d, modes::DEFAULT_THRESHOLD).unwrap();
        assert!(spectrum.ms_indices().is_empty());

        let gmi_of = |laws: &PairedLaws| {
            let dec = fixtures::attribute_decoder(&laws.text, "speaker", 0).unwrap();
            gmi::estimate_gmi_attribute(&dec, &laws.modal, "speaker").unwrap().value
        };
        let (before, after) = (gmi_of(&non), gmi_of(&aligned));
        assert!(after > before + 0.3, "{before} -> {after}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_pairs_share_stratum_marginals(
            seed in 0u64..1000,
            shift in 0.0f64..3.0,
            angle in 0.0f64..1.5,
            noise in 0.0f64..2.0,
            n in 2usize..12,
        ) {
            let cfg = SynthConfig {
                shift, rotation_angle: angle, ms_noise_scale: noise, n_per_stratum: n, seed,
                attribute_plan: vec![AttributePlan::new("speaker", Carrier::MsSpan, 1.0, 2)],
                ..SynthConfig::default()
            };
            let laws = draw(&cfg, 0).unwrap();
            prop_assert!(laws.check().is_ok());
            prop_assert_eq!(laws.modal.len(), cfg.strata() * n);
            prop_assert_eq!(laws.modal.targets().unwrap(), laws.text.targets().unwrap());
        }
    }
}
