//! The invariant suite behind `patchopt verify`.

use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{reference_results, ReferenceResults, REFERENCE_BASE_PARAMS, REFERENCE_DIMS};
use crate::gradcheck::{self, LOSS_STEP, LOSS_TOLERANCE, VIT_TOLERANCE};
use crate::init::gaussian;
use crate::loss::{dice_ce_parts, one_hot, EPS_SMOOTH};
use crate::patch_select::token_geometry;
use crate::tokenizer::{detokenize, extract_patches};
use crate::vit::ops::normalize_rows;
use crate::vit::{self, attention_weights, encoder_block, msa, softmax_rows, ViTConfig, ViTParams};

/// Factor applied to analytic gradients by `--perturb-grad`.
pub const PERTURB_FACTOR: f64 = 1e-2;
pub const INVARIANT_TOLERANCE: f64 = 1e-12;
pub const LOSS_VALUE_TOLERANCE: f64 = 1e-9;
pub const PARAM_COUNT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub config: ViTConfig,
    pub perturb_grad: bool,
    /// Only check parameter count and token geometry.
    pub geometry_only: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, config: ViTConfig::tiny(), perturb_grad: false, geometry_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub config: ViTConfig,
    pub perturb_grad: bool,
    pub geometry_only: bool,
    pub all_passed: bool,
    pub checks: Vec<CheckResult>,
    pub reference: ReferenceResults,
}

fn timed<F>(name: &'static str, tolerance: f64, f: F) -> CheckResult
where
    F: FnOnce() -> Result<(f64, bool, String), String>,
{
    let start = Instant::now();
    let outcome = f();
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok((measured, passed, detail)) => CheckResult { name, passed, measured, tolerance, detail, elapsed_ms },
        Err(detail) => CheckResult { name, passed: false, measured: f64::NAN, tolerance, detail, elapsed_ms },
    }
}

/// Largest elementwise |a − b| scaled by the largest |b|.
fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn random_volume(rng: &mut ChaCha8Rng, max_edge: usize, max_channels: usize) -> Array4<f64> {
    let (l, w, h) = (rng.random_range(1..=max_edge), rng.random_range(1..=max_edge), rng.random_range(1..=max_edge));
    let c = rng.random_range(1..=max_channels);
    Array4::from_shape_simple_fn((l, w, h, c), || rng.random_range(-1.0..1.0))
}

/// Count of cases where `detokenize ∘ extract_patches` is not bit-identical.
pub fn tokenize_round_trip_failures(cases: usize, max_edge: usize, max_patch: usize, max_channels: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let vol = random_volume(&mut rng, max_edge, max_channels);
        let m = rng.random_range(1..=max_patch);
        let (l, w, h, c) = vol.dim();
        let geo = token_geometry([h, w, l], m);
        let patches = extract_patches(vol.view(), m);
        match detokenize(patches.view(), geo.grid, m, [h, w, l], c) {
            Ok(back) if back == vol => {}
            _ => failures += 1,
        }
    }
    failures
}

fn check_round_trip(seed: u64) -> CheckResult {
    timed("tokenize_round_trip", 0.0, || {
        let failures = tokenize_round_trip_failures(50, 16, 6, 3, seed);
        Ok((failures as f64, failures == 0, "50 random volumes, patch edge <= 6".into()))
    })
}

fn check_softmax(seed: u64) -> CheckResult {
    timed("softmax_rows", INVARIANT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(32, 9, 20.0, &mut rng);
        let y = softmax_rows(x.view());
        let worst = y.rows().into_iter().fold(0.0f64, |m, r| m.max((r.sum() - 1.0).abs()));
        let in_range = y.iter().all(|v| (0.0..=1.0).contains(v));
        Ok((worst, in_range && worst <= INVARIANT_TOLERANCE, "max |row sum - 1|, entries in [0, 1]".into()))
    })
}

fn check_layer_norm(seed: u64) -> CheckResult {
    timed("layer_norm_statistics", 1e-6, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(3, 8, 2.0, &mut rng) + 5.0;
        let n = normalize_rows(x.view(), 1e-12).normalized;
        let p = n.ncols() as f64;
        let mut worst_mean = 0.0f64;
        let mut worst_var = 0.0f64;
        for row in n.rows() {
            let mean = row.sum() / p;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
        let passed = worst_mean < INVARIANT_TOLERANCE && worst_var <= 1e-6;
        Ok((worst_var, passed, format!("max |row mean| {worst_mean:.3e}, measured is max |row var - 1|")))
    })
}

/// Worst violation of "each output row is a convex combination of `v`'s
/// rows": negative weights, row sums off 1, output outside the per-column
/// range of `v`, or output not equal to `weights·v`.
pub fn convex_hull_violation(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let w = attention_weights(q.view(), k.view());
    let out = vit::attention_head(q.view(), k.view(), v.view());
    let mut worst = 0.0f64;
    for row in w.rows() {
        worst = worst.max((row.sum() - 1.0).abs());
        worst = worst.max(row.iter().fold(0.0f64, |m, &x| m.max(-x)));
    }
    for (j, col) in v.axis_iter(Axis(1)).enumerate() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &o in out.column(j) {
            worst = worst.max(lo - o).max(o - hi);
        }
    }
    worst.max(rel_diff(&out, &w.dot(v)))
}

fn check_convex_hull(seed: u64) -> CheckResult {
    timed("attention_convex_hull", INVARIANT_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let n = rng.random_range(1..=12);
            let kh = rng.random_range(1..=6);
            let q = gaussian(n, kh, 3.0, &mut rng);
            let k = gaussian(n, kh, 3.0, &mut rng);
            let v = gaussian(n, kh, 1.0, &mut rng);
            worst = worst.max(convex_hull_violation(&q, &k, &v));
        }
        Ok((worst, worst <= INVARIANT_TOLERANCE, "20 random heads".into()))
    })
}

fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    x.select(Axis(0), perm)
}

/// Largest relative deviation from `f(Π·z) = Π·f(z)` for msa and the
/// encoder block over random permutations.
pub fn permutation_equivariance_error(cfg: &ViTConfig, tokens: usize, trials: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ViTParams::random(cfg, rng.random(), 0.3);
    let layer = &params.layers[0];
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let z = gaussian(tokens, cfg.hidden, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(&mut rng);
        let zp = permute_rows(&z, &perm);
        let a = msa(zp.view(), layer, cfg).map_err(|e| e.to_string())?;
        let b = permute_rows(&msa(z.view(), layer, cfg).map_err(|e| e.to_string())?, &perm);
        worst = worst.max(rel_diff(&a, &b));
        let a = encoder_block(zp.view(), layer, cfg).map_err(|e| e.to_string())?;
        let b = permute_rows(&encoder_block(z.view(), layer, cfg).map_err(|e| e.to_string())?, &perm);
        worst = worst.max(rel_diff(&a, &b));
    }
    Ok(worst)
}

fn check_permutation(cfg: &ViTConfig, seed: u64) -> CheckResult {
    timed("msa_permutation_equivariance", INVARIANT_TOLERANCE, || {
        let worst = permutation_equivariance_error(cfg, 6, 20, seed)?;
        Ok((worst, worst <= INVARIANT_TOLERANCE, "msa and encoder block, 20 permutations of 6 tokens".into()))
    })
}

fn check_determinism(cfg: &ViTConfig, seed: u64) -> CheckResult {
    timed("forward_determinism", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = gaussian(4, cfg.hidden, 1.0, &mut rng);
        let params = ViTParams::init(cfg, seed);
        let (a, tape) = vit::forward(&z0, cfg, &params).map_err(|e| e.to_string())?;
        let (b, _) = vit::forward(&z0, cfg, &ViTParams::init(cfg, seed)).map_err(|e| e.to_string())?;
        let replay = tape.replay().map_err(|e| e.to_string())?;
        let same = |x: &Array2<f64>, y: &Array2<f64>| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
        let passed = same(&a, &b) && same(&a, &replay);
        Ok((if passed { 0.0 } else { 1.0 }, passed, "repeat run and tape replay bit-identical".into()))
    })
}

fn check_vit_gradients(cfg: &ViTConfig, seed: u64, perturb: f64) -> CheckResult {
    timed("vit_gradcheck", VIT_TOLERANCE, || {
        let report = gradcheck::vit_gradcheck(*cfg, 4, 8, seed, perturb).map_err(|e| e.to_string())?;
        let worst = report
            .per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|t| t.name.clone())
            .unwrap_or_default();
        Ok((
            report.max_rel_err,
            report.passes(VIT_TOLERANCE),
            format!("{} entries over {} tensors, worst {worst}", report.checked_entries, report.per_tensor.len()),
        ))
    })
}

/// `(perfect-prediction loss, uniform 2×2 loss)`; the oracles are `0` and
/// `1/3 + ln 2`.
pub fn loss_oracle_values() -> Result<(f64, f64), String> {
    let g = one_hot(&[0, 1, 1, 0, 1], 2);
    let perfect = dice_ce_parts(g.view(), g.view(), 0.0).map_err(|e| e.to_string())?.loss;
    let g2 = one_hot(&[0, 1], 2);
    let uniform = Array2::from_elem((2, 2), 0.5);
    let uni = dice_ce_parts(uniform.view(), g2.view(), 0.0).map_err(|e| e.to_string())?.loss;
    Ok((perfect, uni))
}

fn check_loss_values() -> CheckResult {
    timed("loss_oracle", LOSS_VALUE_TOLERANCE, || {
        let (perfect, uniform) = loss_oracle_values()?;
        let expected = 1.0 / 3.0 + std::f64::consts::LN_2;
        let err = perfect.abs().max((uniform - expected).abs());
        Ok((err, err <= LOSS_VALUE_TOLERANCE, format!("perfect {perfect:.3e}, uniform {uniform:.12}")))
    })
}

fn check_loss_gradients(seed: u64, perturb: f64) -> CheckResult {
    timed("loss_gradcheck", LOSS_TOLERANCE, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let (a, c) = (rng.random_range(1..=12), rng.random_range(2..=4));
            let (logits, g) = gradcheck::random_loss_case(a, c, rng.random());
            let check = gradcheck::loss_gradcheck(&logits, &g, EPS_SMOOTH, LOSS_STEP, perturb).map_err(|e| e.to_string())?;
            worst = worst.max(check.max_rel_err);
        }
        Ok((worst, worst < LOSS_TOLERANCE, "10 random instances".into()))
    })
}

/// Parameter counts without allocating weights: `(encoder, encoder + E +
/// E_pos)` for single-channel input at `patch`.
pub fn analytic_param_counts(cfg: &ViTConfig, dims: [usize; 3], patch: usize) -> (usize, usize) {
    let geo = token_geometry(dims, patch);
    let embedding = patch.pow(3) * cfg.hidden + geo.token_count * cfg.hidden;
    let encoder = cfg.encoder_param_count();
    (encoder, encoder + embedding)
}

fn check_geometry(cfg: &ViTConfig) -> CheckResult {
    let is_base = *cfg == ViTConfig::base();
    timed("parameter_count_and_geometry", PARAM_COUNT_TOLERANCE, || {
        let geo = token_geometry(REFERENCE_DIMS, 16);
        let (encoder, total) = analytic_param_counts(cfg, REFERENCE_DIMS, 16);
        let geometry_ok = geo.token_count == 1536 && geo.divides_exactly.iter().all(|&d| d);
        if is_base {
            let reference = REFERENCE_BASE_PARAMS as f64;
            let dev = ((encoder as f64 - reference) / reference).abs().max(((total as f64 - reference) / reference).abs());
            Ok((
                dev,
                geometry_ok && dev <= PARAM_COUNT_TOLERANCE,
                format!("encoder {encoder}, with embedding {total}, N = {} at M = 16", geo.token_count),
            ))
        } else {
            // no published count; the analytic formula must match allocation
            let allocated = ViTParams::init(cfg, 0).param_count();
            let dev = (allocated as f64 - encoder as f64).abs();
            Ok((dev, geometry_ok && dev == 0.0, format!("encoder {encoder}, allocated {allocated}, N = {}", geo.token_count)))
        }
    })
}

pub fn run(options: &VerifyOptions) -> VerifyReport {
    let cfg = options.config;
    let seed = options.seed;
    let perturb = if options.perturb_grad { PERTURB_FACTOR } else { 0.0 };
    let mut checks = vec![check_geometry(&cfg)];
    if !options.geometry_only {
        // the numeric suites always run at desk scale
        let tiny = ViTConfig::tiny();
        checks.extend([
            check_round_trip(seed),
            check_softmax(seed),
            check_layer_norm(seed),
            check_convex_hull(seed),
            check_permutation(&tiny, seed),
            check_determinism(&tiny, seed),
            check_vit_gradients(&tiny, seed, perturb),
            check_loss_values(),
            check_loss_gradients(seed, perturb),
        ]);
    }
    for c in &checks {
        log::info!("{} {} measured {:.3e}", c.name, if c.passed { "ok" } else { "FAILED" }, c.measured);
    }
    VerifyReport {
        seed,
        config: cfg,
        perturb_grad: options.perturb_grad,
        geometry_only: options.geometry_only,
        all_passed: checks.iter().all(|c| c.passed),
        checks,
        reference: reference_results(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run(&VerifyOptions::default());
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(report.all_passed);
        assert_eq!(report.checks.len(), 10);
    }

    #[test]
    fn perturbed_gradients_fail() {
        let report = run(&VerifyOptions { perturb_grad: true, ..Default::default() });
        assert!(!report.all_passed);
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["vit_gradcheck", "loss_gradcheck"]);
    }

    #[test]
    fn base_geometry_only() {
        let report = run(&VerifyOptions { config: ViTConfig::base(), geometry_only: true, ..Default::default() });
        assert_eq!(report.checks.len(), 1);
        assert!(report.all_passed, "{:?}", report.checks);
        assert_eq!(analytic_param_counts(&ViTConfig::base(), REFERENCE_DIMS, 16), (85_017_600, 89_342_976));
    }

    #[test]
    fn single_value_row_is_its_own_hull() {
        let q = Array2::from_elem((1, 2), 1.0);
        let v = ndarray::array![[0.25, -3.0]];
        assert!(convex_hull_violation(&q, &q, &v) < 1e-15);
    }
}
