//! Named configurations used by the experiments, the CLI defaults and the
//! acceptance suite.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::{draw, inject_ms_response, AttributePlan, Carrier, SynthConfig};
use crate::dataset::{EmbeddingSet, LawTag, LayerTag, PairedLaws, CONTEXT, TARGET};
use crate::decoder::{self, DecoderConfig, ToyDecoder};
use crate::error::Result;
use crate::rng;

pub const SWEEP_CONFIGS: usize = 200;
pub const SWEEP_MAX_SHIFT: f64 = 3.0;
pub const SWEEP_MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_4;

/// Configuration `i` of the randomized sweep: random shift and rotation over
/// the default geometry.
pub fn sweep_config(master: u64, i: u64) -> SynthConfig {
    let seed = rng::child_seed(master, i);
    let mut r = rng::stream(seed, rng::streams::SWEEP);
    SynthConfig {
        shift: r.random_range(0.0..SWEEP_MAX_SHIFT),
        rotation_angle: r.random_range(0.0..SWEEP_MAX_ANGLE),
        seed,
        ..SynthConfig::default()
    }
}

pub const ASYMMETRY_CONFIGS: usize = 40;
/// Inverse regularization of the probes in the asymmetry arm. Strongly
/// regularized probes are the flat instrument the contrast is about.
pub const ASYMMETRY_PROBE_C: f64 = 1e-3;

/// Configuration `i` of the asymmetry arm: overlapping classes (so the
/// two-layer decoder fits sharp boundaries), isotropic noise, and shifts
/// large enough for `W1 ≥ 1`.
pub fn asymmetry_config(master: u64, i: u64) -> SynthConfig {
    let seed = rng::child_seed(master, i);
    let mut r = rng::stream(seed, rng::streams::SWEEP);
    SynthConfig {
        shift: r.random_range(1.0..SWEEP_MAX_SHIFT),
        rotation_angle: r.random_range(0.0..SWEEP_MAX_ANGLE),
        class_separation: r.random_range(0.3..1.0),
        text_ms_std: 0.5,
        n_per_stratum: 32,
        seed,
        ..SynthConfig::default()
    }
}

/// The steep two-layer decoder of the asymmetry arm.
pub fn asymmetry_decoder() -> DecoderConfig {
    DecoderConfig { hidden: 64, hidden_gain: 20.0, ..DecoderConfig::default() }
}

/// A non-aligned encoder: the modal law carries a strong MS-span component
/// (with an MS-span attribute) that the text law lacks. The text span has a
/// weak target signal and louder nuisance coordinates.
pub fn non_aligned(seed: u64) -> SynthConfig {
    SynthConfig {
        d: 32,
        text_dim: 24,
        signal_dims: 2,
        class_separation: 0.8,
        context_separation: 0.4,
        within_std: 0.25,
        nuisance_std: 1.5,
        text_ms_std: 0.05,
        ms_noise_scale: 4.0,
        attribute_plan: vec![AttributePlan::new("speaker", Carrier::MsSpan, 4.0, 2)],
        seed,
        ..SynthConfig::default()
    }
}

/// Modes kept in the ablation spectrum: the MS span and the loudest
/// nuisance coordinates, not the weak signal directions.
pub const ABLATION_MODES: usize = 16;

/// Scale of the MS-span response given to the ablation decoder.
pub const ABLATION_MS_RESPONSE: f64 = 0.3;

/// Text-trained linear decoder with a fixed MS-span response added.
pub fn ablation_decoder(cfg: &SynthConfig, laws: &PairedLaws, seed: u64) -> Result<ToyDecoder> {
    let dec = decoder::train_decoder(&laws.text, seed, &DecoderConfig::default())?;
    Ok(inject_ms_response(&dec, cfg, ABLATION_MS_RESPONSE, seed))
}

pub const CARRIED: &str = "speaker";

/// Two attributes on orthogonal carriers: the target (text span) and
/// `speaker` (binary, MS span, absent from the text law).
pub fn orthogonal_carrier(seed: u64) -> SynthConfig {
    SynthConfig {
        ms_noise_scale: 1.5,
        attribute_plan: vec![AttributePlan::new(CARRIED, Carrier::MsSpan, 4.0, 2)],
        seed,
        ..SynthConfig::default()
    }
}

/// Text-trained linear decoder whose vocabulary has two extra tokens that
/// read out `speaker`.
pub fn orthogonal_decoder(cfg: &SynthConfig, laws: &PairedLaws, seed: u64) -> Result<ToyDecoder> {
    let dcfg = DecoderConfig { vocab: Some(cfg.targets + 2), ..DecoderConfig::default() };
    decoder::train_decoder(&laws.text, seed, &dcfg)?.with_readout(CARRIED, vec![cfg.targets, cfg.targets + 1])
}

pub const SHIFT_LADDER: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

/// The default geometry with a pure mean shift of `delta`.
pub fn shift_ladder(seed: u64, delta: f64) -> SynthConfig {
    SynthConfig { shift: delta, seed, ..SynthConfig::default() }
}

/// One context of `n` samples, each with its own target, placed on the
/// coordinate axes at distance `margin`; and a linear decoder that reads
/// token `i` off axis `i` with the same gain. Vocabulary `vocab ≥ n`.
pub fn separable_pool(n: usize, vocab: usize, margin: f64) -> Result<(EmbeddingSet, ToyDecoder)> {
    let x = Array2::from_shape_fn((n, n), |(i, j)| if i == j { margin } else { 0.0 });
    let targets: Vec<usize> = (0..n).collect();
    let set = EmbeddingSet::from_f64(&x, LayerTag::Synthetic, LawTag::Text)?
        .with_labels_k(TARGET, targets, vocab)?
        .with_labels_k(CONTEXT, vec![0; n], 1)?;
    let w = Array2::from_shape_fn((vocab, n), |(v, j)| if v == j { margin } else { 0.0 });
    Ok((set, ToyDecoder::linear(w, Array1::zeros(vocab))))
}

/// Draws `0` and `1` of a configuration.
pub fn two_draws(cfg: &SynthConfig) -> Result<(PairedLaws, PairedLaws)> {
    Ok((draw(cfg, 0)?, draw(cfg, 1)?))
}

/// Vocabulary of [`attribute_decoder`]. With `η = 1/V` a vocabulary as small
/// as the class count would cap the attribute GMI well below `log K`.
pub const ATTRIBUTE_VOCAB: usize = 64;

/// Linear decoder trained on the text law to emit `attribute` as its target
/// (tokens `0..K` read out the attribute's classes; the rest are never
/// targets).
pub fn attribute_decoder(text: &EmbeddingSet, attribute: &str, seed: u64) -> Result<ToyDecoder> {
    let labels = text.labels(attribute)?.to_vec();
    let relabelled = text.clone().with_labels_k(TARGET, labels, ATTRIBUTE_VOCAB)?;
    let cfg = DecoderConfig { vocab: Some(ATTRIBUTE_VOCAB), ..DecoderConfig::default() };
    decoder::train_decoder(&relabelled, seed, &cfg)
}

/// One text-span attribute (`tone`) and one MS-span attribute (`speaker`)
/// over a sweep configuration.
pub fn gap_config(master: u64, i: u64) -> SynthConfig {
    let mut cfg = sweep_config(master, i);
    cfg.ms_noise_scale = 1.0;
    cfg.attribute_plan = vec![
        AttributePlan::new("tone", Carrier::TextSpan, 2.0, 2),
        AttributePlan::new(CARRIED, Carrier::MsSpan, 3.0, 2),
    ];
    cfg
}

/// Hook points of the layered probe fixtures, in depth order.
pub const LAYERS: [LayerTag; 4] = [LayerTag::Encoder, LayerTag::Adapter, LayerTag::LlmMid, LayerTag::LlmFinal];

/// Modal samples at each of [`LAYERS`], one configuration per layer that
/// differs only in the attributes' separations (`plans[i].2[layer]`). Labels
/// are shared across layers.
pub fn layered(seed: u64, plans: &[(&str, Carrier, [f64; 4])]) -> Result<Vec<EmbeddingSet>> {
    LAYERS
        .iter()
        .enumerate()
        .map(|(layer, &tag)| {
            let cfg = SynthConfig {
                ms_noise_scale: 1.0,
                attribute_plan: plans
                    .iter()
                    .map(|(name, carrier, seps)| AttributePlan::new(name, *carrier, seps[layer], 2))
                    .collect(),
                seed,
                ..SynthConfig::default()
            };
            let mut set = draw(&cfg, 0)?.modal;
            set.layer_tag = tag;
            Ok(set)
        })
        .collect()
}

/// A text-span `tone` that grows with depth and an MS-span `speaker` that
/// fades after the adapter.
pub fn decaying_layers(seed: u64) -> Result<Vec<EmbeddingSet>> {
    layered(
        seed,
        &[
            ("tone", Carrier::TextSpan, [1.0, 1.0, 2.0, 4.0]),
            (CARRIED, Carrier::MsSpan, [4.0, 4.0, 1.5, 0.5]),
        ],
    )
}

/// Both attributes far apart at every layer.
pub fn separable_layers(seed: u64) -> Result<Vec<EmbeddingSet>> {
    layered(
        seed,
        &[("tone", Carrier::TextSpan, [20.0; 4]), (CARRIED, Carrier::MsSpan, [20.0; 4])],
    )
}
