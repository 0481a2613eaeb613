//! Central-difference gradient checks for the encoder and the loss.
//!
//! The numeric side only calls forward functions, so it shares nothing with
//! the tape's backward pass.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::init::gaussian;
use crate::loss::{dice_ce_grad, dice_ce_loss_from_logits, one_hot, LossError, LossParts};
use crate::tokenizer::EmbeddingParams;
use crate::vit::{self, Source, ViTConfig, ViTParams, VitError};

pub const VIT_STEP: f64 = 1e-4;
pub const LOSS_STEP: f64 = 1e-5;
pub const VIT_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// Denominator floor so entries whose true gradient is ~0 are judged on
/// absolute error instead of round-off ratios.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub per_tensor: Vec<TensorCheck>,
}

impl GradCheckReport {
    fn from_tensors(step: f64, per_tensor: Vec<TensorCheck>) -> Self {
        Self {
            step,
            checked_entries: per_tensor.iter().map(|t| t.entries).sum(),
            max_rel_err: per_tensor.iter().fold(0.0, |m, t| m.max(t.max_rel_err)),
            per_tensor,
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tolerance
    }
}

fn compare(name: String, analytic: &Array2<f64>, numeric: &Array2<f64>) -> TensorCheck {
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    Zip::from(analytic).and(numeric).for_each(|&a, &n| {
        max_rel_err = max_rel_err.max(relative_error(a, n));
        max_abs_err = max_abs_err.max((a - n).abs());
    });
    TensorCheck { name, entries: analytic.len(), max_rel_err, max_abs_err }
}

/// Central differences of `f` around every entry of `x`.
pub fn numeric_gradient<F>(x: &Array2<f64>, step: f64, mut f: F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * step);
    }
    grad
}

/// A randomly parameterized encoder with embedding, a patch matrix and a
/// probe `R`; the scalar under test is `Σ R ⊙ z_T`.
#[derive(Debug, Clone)]
pub struct VitProbe {
    pub cfg: ViTConfig,
    pub params: ViTParams,
    pub patches: Array2<f64>,
    pub probe: Array2<f64>,
}

impl VitProbe {
    /// Parameters are drawn with `std` rather than the 0.02 init so that the
    /// attention and GELU paths are exercised away from their linear regime.
    pub fn new(cfg: ViTConfig, tokens: usize, patch_dim: usize, seed: u64, std: f64) -> Result<Self, VitError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingParams {
            projection: gaussian(patch_dim, cfg.hidden, std, &mut rng),
            positional: gaussian(tokens, cfg.hidden, std, &mut rng),
        };
        let params = ViTParams::random(&cfg, rng.random(), std).with_embedding(embedding);
        let patches = gaussian(tokens, patch_dim, 1.0, &mut rng);
        let probe = gaussian(tokens, cfg.hidden, 1.0, &mut rng);
        Ok(Self { cfg, params, patches, probe })
    }

    fn objective_patches(&self, params: &ViTParams, patches: &Array2<f64>) -> f64 {
        let (out, _) = vit::forward_patches(patches, &self.cfg, params).expect("probe shapes are consistent");
        (&out * &self.probe).sum()
    }

    fn objective_tokens(&self, z0: &Array2<f64>) -> f64 {
        let (out, _) = vit::forward(z0, &self.cfg, &self.params).expect("probe shapes are consistent");
        (&out * &self.probe).sum()
    }

    fn tokens(&self) -> Array2<f64> {
        let e = self.params.embedding.as_ref().expect("probe has embedding");
        self.patches.dot(&e.projection) + &e.positional
    }

    /// Compare tape gradients against central differences for every
    /// parameter tensor, the patch matrix and `z₀`. A nonzero `perturb`
    /// scales the analytic gradients by `1 + perturb` first.
    pub fn check(&self, step: f64, perturb: f64) -> Result<GradCheckReport, VitError> {
        let (_, tape) = vit::forward_patches(&self.patches, &self.cfg, &self.params)?;
        let grads = tape.backward(&self.probe)?;
        let scale = 1.0 + perturb;
        let mut per_tensor = Vec::new();

        for key in self.params.keys() {
            let analytic = grads
                .param(key)
                .ok_or_else(|| VitError::TapeMismatch(format!("no gradient for {key}")))?
                * scale;
            let numeric = numeric_gradient(self.params.tensor(key).expect("key from params"), step, |t| {
                let mut p = self.params.clone();
                *p.tensor_mut(key).expect("key from params") = t.clone();
                self.objective_patches(&p, &self.patches)
            });
            per_tensor.push(compare(key.to_string(), &analytic, &numeric));
        }

        let d_patches = grads
            .get(Source::Patches)
            .ok_or_else(|| VitError::TapeMismatch("no gradient for patches".into()))?
            * scale;
        let numeric = numeric_gradient(&self.patches, step, |x| self.objective_patches(&self.params, x));
        per_tensor.push(compare("patches".into(), &d_patches, &numeric));

        let d_tokens =
            grads.tokens().ok_or_else(|| VitError::TapeMismatch("no gradient for z0".into()))? * scale;
        let numeric = numeric_gradient(&self.tokens(), step, |z| self.objective_tokens(z));
        per_tensor.push(compare("z0".into(), &d_tokens, &numeric));

        Ok(GradCheckReport::from_tensors(step, per_tensor))
    }
}

/// Check the encoder gradients of `cfg` on `tokens` random patches of width
/// `patch_dim`.
pub fn vit_gradcheck(
    cfg: ViTConfig,
    tokens: usize,
    patch_dim: usize,
    seed: u64,
    perturb: f64,
) -> Result<GradCheckReport, VitError> {
    VitProbe::new(cfg, tokens, patch_dim, seed, 0.3)?.check(VIT_STEP, perturb)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub voxels: usize,
    pub classes: usize,
    pub parts: LossParts,
    pub step: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Random logits and one-hot targets with `voxels × classes` entries.
pub fn random_loss_case(voxels: usize, classes: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = gaussian(voxels, classes, 1.5, &mut rng);
    let labels: Vec<usize> = (0..voxels).map(|_| rng.random_range(0..classes)).collect();
    (logits, one_hot(&labels, classes))
}

/// Gradient of the Dice + cross-entropy loss with respect to the logits,
/// analytic against central differences.
pub fn loss_gradcheck(
    logits: &Array2<f64>,
    truth: &Array2<f64>,
    eps_smooth: f64,
    step: f64,
    perturb: f64,
) -> Result<LossCheck, LossError> {
    let parts = dice_ce_loss_from_logits(logits.view(), truth.view(), eps_smooth)?;
    let analytic = dice_ce_grad(logits.view(), truth.view(), eps_smooth)? * (1.0 + perturb);
    let numeric = numeric_gradient(logits, step, |x| {
        dice_ce_loss_from_logits(x.view(), truth.view(), eps_smooth).map(|p| p.loss).unwrap_or(f64::NAN)
    });
    let cmp = compare("logits".into(), &analytic, &numeric);
    Ok(LossCheck {
        voxels: logits.nrows(),
        classes: logits.ncols(),
        parts,
        step,
        max_rel_err: cmp.max_rel_err,
        max_abs_err: cmp.max_abs_err,
    })
}
