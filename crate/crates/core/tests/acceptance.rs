//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gmi_lab::cli::{self, Command, RunArgs, SweepSummary};
use gmi_lab::dataset::{EmbeddingSet, LawTag, LayerTag, CONTEXT, TARGET};
use gmi_lab::decoder::{self, DecoderConfig, RetuneConfig, ToyDecoder};
use gmi_lab::gmi::{self, MiSource};
use gmi_lab::modes::{self, AblationCondition};
use gmi_lab::probe::{self, ProbeModel};
use gmi_lab::rng;
use gmi_lab::synth::{self, fixtures, GroundTruth};
use gmi_lab::transport::{self, W1Params};
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 42;
const SWEEP_BUDGET: Duration = Duration::from_secs(300);
const FD_TOLERANCE: f64 = 1e-6;
const GAP_CONFIGS: u64 = 10;

#[derive(Default)]
struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    /// Run one criterion; a panic counts as a failure of that criterion.
    fn guarded(&mut self, name: &'static str, f: impl FnOnce(&mut Suite)) {
        let before = self.failed.len();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(self)));
        if outcome.is_err() && self.failed.len() == before {
            self.check(name, false, "panicked");
        }
    }

    fn check(&mut self, name: &'static str, pass: bool, detail: impl AsRef<str>) {
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        if !pass {
            self.failed.push(name);
        }
    }
}

fn run_sweep() -> Result<(SweepSummary, Vec<cli::Failure>, Duration), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("config.json");
    fs::write(&config, "{}").map_err(|e| e.to_string())?;
    let args = RunArgs { config, jobs: None, out: Some(dir.path().join("run")), set: Vec::new() };
    let start = Instant::now();
    let outcome = cli::run(&Command::Sweep(args), None).map_err(|e| format!("{e:#}"))?;
    let elapsed = start.elapsed();
    let text = fs::read_to_string(dir.path().join("run/results/sweep.json")).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let summary = serde_json::from_value(value["result"].clone()).map_err(|e| e.to_string())?;
    Ok((summary, outcome.failures, elapsed))
}

fn gaussian(rows: usize, cols: usize, r: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(r))
}

fn relative_error(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.dot(&diff).sqrt() / scale
    }
}

/// Central differences at `h` and `h/2`, combined by Richardson
/// extrapolation (fourth-order accurate).
fn central_difference(f: impl Fn(&Array1<f64>) -> f64, z: &Array1<f64>) -> Array1<f64> {
    const H: f64 = 1e-4;
    let diff = |j: usize, h: f64| {
        let mut plus = z.clone();
        let mut minus = z.clone();
        plus[j] += h;
        minus[j] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    };
    Array1::from_shape_fn(z.len(), |j| (4.0 * diff(j, H / 2.0) - diff(j, H)) / 3.0)
}

fn ot_oracle(suite: &mut Suite) {
    let mut r = rng::stream(SEED, 7001);
    let mut sliced_ok = 0;
    let mut sinkhorn_ok = 0;
    let mut worst_sinkhorn = 0.0f64;
    const INSTANCES: usize = 50;
    for i in 0..INSTANCES {
        let d = r.random_range(1..=8);
        let n = r.random_range(8..=128);
        let m = r.random_range(8..=128);
        let a = gaussian(n, d, &mut r);
        let mut b = gaussian(m, d, &mut r) * r.random_range(0.5..2.0);
        let shift: f64 = r.random_range(0.0..2.0);
        b.column_mut(0).mapv_inplace(|v| v + shift);
        let exact = transport::w1_exact(a.view(), b.view()).expect("exact").value;
        let sliced = transport::w1_sliced(a.view(), b.view(), 256, i as u64).expect("sliced");
        let W1Params::Sliced { mc_std, .. } = sliced.params else { unreachable!() };
        if sliced.value <= exact + 3.0 * mc_std + 1e-12 {
            sliced_ok += 1;
        }
        let sink = transport::w1_sinkhorn(a.view(), b.view(), 1e-2, 5000).expect("sinkhorn").value;
        let rel = (sink - exact).abs() / exact.max(1e-12);
        worst_sinkhorn = worst_sinkhorn.max(rel);
        if rel <= 0.05 {
            sinkhorn_ok += 1;
        }
    }
    let sink_rate = sinkhorn_ok as f64 / INSTANCES as f64;
    suite.check(
        "ot-oracle-equivalence",
        sliced_ok == INSTANCES && sink_rate >= 0.95,
        format!(
            "sliced <= exact + 3 MC-std in {sliced_ok}/{INSTANCES}; sinkhorn within 5% in {sinkhorn_ok}/{INSTANCES} (worst {:.2}%)",
            100.0 * worst_sinkhorn
        ),
    );
}

fn random_pool(n: usize, d: usize, vocab: usize, contexts: usize, r: &mut rng::Rng) -> EmbeddingSet {
    let x = gaussian(n, d, r);
    let targets = (0..n).map(|_| r.random_range(0..vocab)).collect();
    let ctx = (0..n).map(|i| i % contexts).collect();
    EmbeddingSet::from_f64(&x, LayerTag::Synthetic, LawTag::Text)
        .and_then(|s| s.with_labels_k(TARGET, targets, vocab))
        .and_then(|s| s.with_labels_k(CONTEXT, ctx, contexts))
        .expect("valid pool")
}

fn gmi_calibration(suite: &mut Suite) {
    let mut r = rng::stream(SEED, 7002);
    let mut ceiling_ok = true;
    let mut tightest = f64::INFINITY;
    for _ in 0..100 {
        let (n, d, vocab, contexts) = (r.random_range(2..200), r.random_range(1..8), r.random_range(2..20), r.random_range(1..4));
        let law = random_pool(n, d, vocab, contexts, &mut r);
        let scale = r.random_range(0.0..10.0);
        let mut dec = ToyDecoder::linear(gaussian(vocab, d, &mut r) * scale, gaussian(vocab, 1, &mut r).column(0).to_owned());
        dec.context_embed = gaussian(contexts, d, &mut r);
        let est = gmi::estimate_gmi(&dec, &law).expect("gmi");
        let ceiling = (est.negatives_per_stratum as f64).ln();
        tightest = tightest.min(ceiling - est.value);
        ceiling_ok &= est.value <= ceiling + 1e-9;
    }

    let mut uniform_ok = true;
    let mut worst_uniform = 0.0f64;
    for n in [100, 1000, 5000] {
        let law = random_pool(n, 4, 8, 2, &mut r);
        let mut dec = ToyDecoder::linear(Array2::zeros((8, 4)), Array1::zeros(8));
        dec.context_embed = Array2::zeros((2, 4));
        let v = gmi::estimate_gmi(&dec, &law).expect("gmi").value;
        worst_uniform = worst_uniform.max(v.abs() * (n as f64).sqrt());
        uniform_ok &= v.abs() <= 3.0 / (n as f64).sqrt();
    }

    let mut separable_ok = true;
    let mut shortfall = 0.0f64;
    for n in [4, 8, 16, 32] {
        let (law, dec) = fixtures::separable_pool(n, 20 * (n - 1) + 1, 6.0).expect("fixture");
        let v = gmi::estimate_gmi(&dec, &law).expect("gmi").value;
        shortfall = shortfall.max((n as f64).ln() - v);
        separable_ok &= v >= (n as f64).ln() - 0.05;
    }
    suite.check(
        "gmi-ceiling-calibration",
        ceiling_ok && uniform_ok && separable_ok,
        format!(
            "ceiling held on 100 random pools (min slack {tightest:.3e}); uniform max |GMI|·sqrt(N) = {worst_uniform:.3}; separable max shortfall from log n = {shortfall:.4}"
        ),
    );
}

fn gradient_checks(suite: &mut Suite) {
    let cfg = synth::SynthConfig { seed: SEED, shift: 1.0, ..synth::SynthConfig::default() };
    let laws = synth::draw(&cfg, 0).expect("draw");
    let points: Vec<(usize, Array1<f64>, usize)> = {
        let x = laws.modal.features();
        let contexts = laws.modal.contexts();
        let targets = laws.modal.targets().expect("targets");
        (0..100).map(|i| {
            let k = i * x.nrows() / 100;
            (contexts[k], x.row(k).to_owned(), targets[k])
        })
        .collect()
    };

    let mut worst = Vec::new();
    for dcfg in [DecoderConfig::default(), fixtures::asymmetry_decoder()] {
        let dec = decoder::train_decoder(&laws.text, SEED, &dcfg).expect("decoder");
        let mut max_err = 0.0f64;
        let mut checked = 0;
        for (c, z, y) in &points {
            let (mut g, floored) = dec.grad_log_score(*c, z.view(), *y).expect("grad");
            let mut token = *y;
            if floored {
                // Score the most likely token instead, whose floor is inactive.
                let scores = dec.log_scores(*c, z.view());
                token = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).expect("vocab");
                g = dec.grad_log_score(*c, z.view(), token).expect("grad").0;
            }
            let fd = central_difference(|v| dec.raw_log_prob(*c, v.view(), token), z);
            max_err = max_err.max(relative_error(&g, &fd));
            checked += 1;
        }
        worst.push((if dcfg.hidden == 0 { "linear" } else { "two-layer" }, max_err, checked));
    }

    let mut r = rng::stream(SEED, 7003);
    let fitted = probe::train_probe_full(&laws.text, TARGET, 1.0).expect("probe");
    let mut steep = ProbeModel::from_parts(gaussian(4, 16, &mut r) * 3.0, gaussian(4, 1, &mut r).column(0).to_owned());
    steep.train_mean = gaussian(1, 16, &mut r).row(0).to_owned();
    steep.train_std = gaussian(1, 16, &mut r).row(0).mapv(|v| 0.5 + v.abs());
    for (name, model) in [("probe", &fitted), ("probe-random", &steep)] {
        let mut max_err = 0.0f64;
        for (_, z, y) in &points {
            let g = model.grad_log_prob(z.view(), *y);
            let fd = central_difference(|v| model.log_prob(v.view(), *y), z);
            max_err = max_err.max(relative_error(&g, &fd));
        }
        worst.push((name, max_err, points.len()));
    }
    let pass = worst.iter().all(|&(_, e, n)| e <= FD_TOLERANCE && n == 100);
    let detail = worst
        .iter()
        .map(|(name, e, n)| format!("{name} {e:.2e} over {n} points"))
        .collect::<Vec<_>>()
        .join("; ");
    suite.check("gradient-correctness", pass, detail);
}

fn ablation(suite: &mut Suite) {
    let cfg = fixtures::non_aligned(SEED);
    let laws = synth::draw(&cfg, 0).expect("draw");
    let spectrum = modes::mode_alignment(&laws.modal, &laws.text, fixtures::ABLATION_MODES, modes::DEFAULT_THRESHOLD)
        .expect("spectrum");
    let dec = fixtures::ablation_decoder(&cfg, &laws, SEED).expect("decoder");
    let run = |c| modes::run_ablation(&dec, &laws.modal, &spectrum, c, SEED, modes::DEFAULT_BUDGET).expect("ablation");
    let ms = run(AblationCondition::MsAll);
    let ta = run(AblationCondition::TaMatched);
    let seeds: Vec<u64> = (0..modes::RANDOM_SEEDS as u64).map(|i| rng::child_seed(SEED, i)).collect();
    let random = modes::run_random_ablation(&dec, &laws.modal, &spectrum, &seeds, modes::DEFAULT_BUDGET).expect("random");
    let (lo, hi) = (ms.delta_loss_pct.min(ta.delta_loss_pct), ms.delta_loss_pct.max(ta.delta_loss_pct));
    let pass = ms.delta_loss_pct < 0.0
        && ms.t < -3.0
        && ms.delta_loss_pct.abs() >= 5.0 * ta.delta_loss_pct.abs()
        && random.delta_loss_pct > lo
        && random.delta_loss_pct < hi;
    suite.check(
        "ablation-asymmetry",
        pass,
        format!(
            "MS {:+.1}% (t = {:.1}), TA-matched {:+.1}% (t = {:.1}), random {:+.1}%; {} MS modes of {}",
            ms.delta_loss_pct,
            ms.t,
            ta.delta_loss_pct,
            ta.t,
            random.delta_loss_pct,
            ms.modes_removed,
            spectrum.len()
        ),
    );
}

fn mode_alignment_pattern(suite: &mut Suite) {
    let pattern = |cfg: &synth::SynthConfig| {
        let laws = synth::draw(cfg, 0).expect("draw");
        let k = modes::DEFAULT_MODES.min(cfg.d);
        let s = modes::mode_alignment(&laws.modal, &laws.text, k, modes::DEFAULT_THRESHOLD).expect("spectrum");
        (s.alignment[0], s.ms_variance_share)
    };
    let base = fixtures::non_aligned(SEED);
    let (a0, share) = pattern(&base);
    let (b0, b_share) = pattern(&synth::aligned_encoder_variant(&base));
    suite.check(
        "mode-alignment-pattern",
        a0 < 0.05 && share > 0.5 && b0 > 0.5 && b_share < 0.25,
        format!(
            "non-aligned mode-0 alignment {a0:.4}, MS share {:.1}%; aligned variant {b0:.3}, {:.1}%",
            100.0 * share,
            100.0 * b_share
        ),
    );
}

fn asymmetry(suite: &mut Suite, sweep: &SweepSummary) {
    let probe_all = sweep.probe_hold_rate == Some(1.0) && sweep.asymmetry_probe_hold_rate == Some(1.0);
    let rate = sweep.asymmetry_rate.unwrap_or(0.0);
    suite.check(
        "probe-decoder-asymmetry",
        probe_all && sweep.asymmetry_eligible > 0 && rate >= 0.9,
        format!(
            "probe penalty held on {:.1}% of sweep and {:.1}% of asymmetry configs; decoder degrades more in {:.1}% of {} configs with ratio >= 10 and W1 >= 1",
            100.0 * sweep.probe_hold_rate.unwrap_or(0.0),
            100.0 * sweep.asymmetry_probe_hold_rate.unwrap_or(0.0),
            100.0 * rate,
            sweep.asymmetry_eligible
        ),
    );
}

fn retune(suite: &mut Suite) {
    let cfg = fixtures::orthogonal_carrier(SEED);
    let (fit, held) = fixtures::two_draws(&cfg).expect("draws");
    let dec = fixtures::orthogonal_decoder(&cfg, &fit, SEED).expect("decoder");
    let opts = RetuneConfig::default();
    let tuned = decoder::low_rank_retune(&dec, &fit.modal, fixtures::CARRIED, 4, SEED, &opts).expect("retune");
    let same = decoder::low_rank_retune(&dec, &fit.modal, fixtures::CARRIED, 0, SEED, &opts).expect("retune");
    let acc = |d: &ToyDecoder, a: &str| decoder::accuracy(d, &held.modal, a).expect("accuracy");
    let gain_a = 100.0 * (acc(&tuned, fixtures::CARRIED) - acc(&dec, fixtures::CARRIED));
    let shift_b = 100.0 * (acc(&tuned, TARGET) - acc(&dec, TARGET));
    let identical = same.w == dec.w && same.b == dec.b && same.context_embed == dec.context_embed;
    suite.check(
        "retune-selectivity",
        gain_a >= 20.0 && shift_b.abs() <= 2.0 && identical,
        format!("attribute A {gain_a:+.1} points, attribute B {shift_b:+.1} points, rank-0 bit-exact: {identical}"),
    );
}

fn scaling(suite: &mut Suite, sweep: &SweepSummary) {
    let rho = sweep.spearman_rho.unwrap_or(f64::NAN);
    let ladder = sweep
        .ladder
        .iter()
        .map(|r| format!("{}:{:.4}", r.delta, r.abs_delta_gmi))
        .collect::<Vec<_>>()
        .join(" ");
    suite.check(
        "degradation-scaling",
        rho > 0.6 && sweep.ladder_monotone == Some(true),
        format!("Spearman(L·W1, |dGMI|) = {rho:.3}; ladder |dGMI| by shift {ladder}"),
    );
}

fn gap(suite: &mut Suite) {
    let mut worst = f64::INFINITY;
    let mut cases = 0;
    let mut all_ok = true;
    let mut score = |dec: &ToyDecoder, modal: &EmbeddingSet, attribute: &str, truth: &GroundTruth| -> f64 {
        let r = gmi::accessibility_gap(dec, modal, attribute, MiSource::Oracle(truth)).expect("gap");
        worst = worst.min(r.gap);
        cases += 1;
        all_ok &= r.gap >= -gmi::GAP_TOLERANCE;
        r.gap / r.mi
    };
    for i in 0..GAP_CONFIGS {
        let cfg = fixtures::gap_config(SEED, i);
        let (laws, truth) = synth::generate_pair(&cfg).expect("pair");
        for attribute in ["tone", fixtures::CARRIED] {
            let dec = fixtures::attribute_decoder(&laws.text, attribute, cfg.seed).expect("decoder");
            score(&dec, &laws.modal, attribute, &truth);
        }
    }
    let na = fixtures::non_aligned(SEED);
    let (laws, truth) = synth::generate_pair(&na).expect("pair");
    let dec = fixtures::attribute_decoder(&laws.text, fixtures::CARRIED, SEED).expect("decoder");
    score(&dec, &laws.modal, fixtures::CARRIED, &truth);

    let oc = fixtures::orthogonal_carrier(SEED);
    let (laws, truth) = synth::generate_pair(&oc).expect("pair");
    let dec = fixtures::orthogonal_decoder(&oc, &laws, SEED).expect("decoder");
    let fraction = score(&dec, &laws.modal, fixtures::CARRIED, &truth);
    suite.check(
        "accessibility-gap",
        all_ok && fraction >= 0.8,
        format!("min gap {worst:.4} nats over {cases} attribute/config pairs; orthogonal carrier gap = {:.1}% of MI", 100.0 * fraction),
    );
}

fn main() -> ExitCode {
    let mut suite = Suite::default();
    let sweep = match run_sweep() {
        Ok(s) => Some(s),
        Err(e) => {
            println!("sweep did not run: {e}");
            None
        }
    };
    match &sweep {
        Some((s, failures, elapsed)) => suite.check(
            "bound-hold-rate",
            failures.is_empty() && s.completed == s.configs && s.hold_rate_support == Some(1.0) && *elapsed <= SWEEP_BUDGET,
            format!(
                "support-restricted bound held on {:.1}% of {} configs ({} failed units); sweep took {:.1}s on {} thread(s)",
                100.0 * s.hold_rate_support.unwrap_or(0.0),
                s.configs,
                failures.len(),
                elapsed.as_secs_f64(),
                rayon::current_num_threads()
            ),
        ),
        None => suite.check("bound-hold-rate", false, "sweep failed"),
    }
    suite.guarded("ot-oracle-equivalence", ot_oracle);
    suite.guarded("gmi-ceiling-calibration", gmi_calibration);
    suite.guarded("gradient-correctness", gradient_checks);
    suite.guarded("ablation-asymmetry", ablation);
    suite.guarded("mode-alignment-pattern", mode_alignment_pattern);
    match &sweep {
        Some((s, _, _)) => asymmetry(&mut suite, s),
        None => suite.check("probe-decoder-asymmetry", false, "sweep failed"),
    }
    suite.guarded("retune-selectivity", retune);
    match &sweep {
        Some((s, _, _)) => scaling(&mut suite, s),
        None => suite.check("degradation-scaling", false, "sweep failed"),
    }
    suite.guarded("accessibility-gap", gap);
    if let Some((s, _, _)) = &sweep {
        println!(
            "INFO competition-vs-direct: |dB| >= |dA| in {:.1}% of {} configs with L·D_eff >= 1",
            100.0 * s.competition_dominance_rate.unwrap_or(0.0),
            s.competition_eligible
        );
    }
    if suite.failed.is_empty() {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criterion/criteria failed: {}", suite.failed.len(), suite.failed.join(", "));
        ExitCode::FAILURE
    }
}
