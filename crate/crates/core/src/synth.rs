//! Pseudo-healthy synthesis: minimize the compound symmetry/anatomy loss over a
//! stationary velocity field with Adam, using a reverse-mode adjoint through
//! warping, scaling-and-squaring and every loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::{
    displaced_stencils, gradient_loss_raw, integrate_full, integrate_velocity, jacobian_loss_raw, DeformationField,
    Upsampler, VelocityField, DEFAULT_CONTROL_FACTOR, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::metrics::{
    jeffreys_with_grad, soft_dice, soft_dice_with_grad, ssim_symmetry, HistogramSpec, LossValue, MetricsConfig,
    SsimParams,
};
use crate::optim::Adam;
use crate::volume::{flip_x, slab_adjoint, split_channel, Dims, MaskClass, MaskVolume, ScalarVolume, VectorField};

/// The seven terms of the compound loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Jeffrey,
    Ssim,
    Ventricle,
    Hematoma,
    Skull,
    Jacobian,
    Gradient,
}

impl Term {
    pub const ALL: [Term; 7] =
        [Term::Jeffrey, Term::Ssim, Term::Ventricle, Term::Hematoma, Term::Skull, Term::Jacobian, Term::Gradient];

    pub fn name(self) -> &'static str {
        match self {
            Term::Jeffrey => "jeffrey",
            Term::Ssim => "ssim",
            Term::Ventricle => "ventricle",
            Term::Hematoma => "hematoma",
            Term::Skull => "skull",
            Term::Jacobian => "jacobian",
            Term::Gradient => "gradient",
        }
    }
}

/// Coefficients of the compound loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub jeffrey: f64,
    pub ssim: f64,
    pub ventricle: f64,
    pub hematoma: f64,
    pub skull: f64,
    pub jacobian: f64,
    pub gradient: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { jeffrey: 1.0, ssim: 1.0, ventricle: 1.0, hematoma: 1.0, skull: 5.0, jacobian: 5.0, gradient: 5.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { jeffrey: 0.0, ssim: 0.0, ventricle: 0.0, hematoma: 0.0, skull: 0.0, jacobian: 0.0, gradient: 0.0 }
    }

    /// All weights zero except `term`.
    pub fn only(term: Term, value: f64) -> Self {
        let mut w = Self::zero();
        *w.get_mut(term) = value;
        w
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Jeffrey => self.jeffrey,
            Term::Ssim => self.ssim,
            Term::Ventricle => self.ventricle,
            Term::Hematoma => self.hematoma,
            Term::Skull => self.skull,
            Term::Jacobian => self.jacobian,
            Term::Gradient => self.gradient,
        }
    }

    pub fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Jeffrey => &mut self.jeffrey,
            Term::Ssim => &mut self.ssim,
            Term::Ventricle => &mut self.ventricle,
            Term::Hematoma => &mut self.hematoma,
            Term::Skull => &mut self.skull,
            Term::Jacobian => &mut self.jacobian,
            Term::Gradient => &mut self.gradient,
        }
    }

    fn check_values(&self) -> Result<()> {
        if let Some(t) = Term::ALL.iter().find(|&&t| !(self.get(t).is_finite() && self.get(t) >= 0.0)) {
            return Err(Error::Config(format!("loss weight `{}` must be finite and >= 0", t.name())));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_values()?;
        if Term::ALL.iter().all(|&t| self.get(t) == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TermBreakdown {
    pub total: f64,
    pub jeffrey: f64,
    pub ssim: f64,
    pub ventricle: f64,
    pub hematoma: f64,
    pub skull: f64,
    pub jacobian: f64,
    pub gradient: f64,
}

impl TermBreakdown {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Jeffrey => self.jeffrey,
            Term::Ssim => self.ssim,
            Term::Ventricle => self.ventricle,
            Term::Hematoma => self.hematoma,
            Term::Skull => self.skull,
            Term::Jacobian => self.jacobian,
            Term::Gradient => self.gradient,
        }
    }

    pub fn weighted_sum(&self, weights: &LossWeights) -> f64 {
        Term::ALL.iter().map(|&t| weights.get(t) * self.get(t)).sum()
    }
}

/// Optimizer settings for [`optimize_velocity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub weights: LossWeights,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Scaling-and-squaring steps.
    pub steps: usize,
    pub control_factor: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Intensity above which voxels count as skull when no skull mask is given.
    pub skull_threshold: f64,
    /// Stop once the best total has not improved by a relative `tolerance` for this
    /// many iterations; 0 runs every iteration.
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            weights: LossWeights::default(),
            iterations: 2000,
            learning_rate: 3e-4,
            steps: DEFAULT_STEPS,
            control_factor: DEFAULT_CONTROL_FACTOR,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            skull_threshold: 300.0,
            patience: 200,
            tolerance: 1e-3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let checks = [
            (self.iterations >= 1, "synth.iterations must be >= 1"),
            (self.learning_rate.is_finite() && self.learning_rate > 0.0, "synth.learning_rate must be > 0"),
            (self.steps >= 1, "synth.steps must be >= 1"),
            (self.control_factor >= 1, "synth.control_factor must be >= 1"),
            ((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "synth.beta1/beta2 must lie in [0, 1)"),
            (self.epsilon > 0.0, "synth.epsilon must be > 0"),
            (self.skull_threshold.is_finite(), "synth.skull_threshold must be finite"),
            (self.tolerance.is_finite() && self.tolerance >= 0.0, "synth.tolerance must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// `1 - Dice(phi(S_left), flip(phi(S_right)))`.
pub fn ventricle_loss(warped: &MaskVolume) -> Result<LossValue> {
    let l = warped.channel(MaskClass::VentricleLeft);
    let r = warped.channel(MaskClass::VentricleRight);
    if !l.iter().any(|&v| v > 0.0) || !r.iter().any(|&v| v > 0.0) {
        return Err(Error::EmptySupport("ventricle channel is empty".into()));
    }
    let value = 1.0 - soft_dice(l, &flip_x(r, warped.dims()));
    Ok(LossValue { value, differentiable: true })
}

/// Remaining fraction of the hematoma mass after warping: 1 unchanged, 0 fully removed.
pub fn hematoma_loss(original: &[f64], warped: &[f64]) -> Result<LossValue> {
    let total: f64 = original.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptySupport("hematoma mask is empty".into()));
    }
    if original.len() != warped.len() {
        return Err(Error::InvalidParameter("hematoma masks differ in size".into()));
    }
    let remaining: f64 = warped.iter().sum();
    Ok(LossValue { value: 1.0 - (total - remaining) / total, differentiable: true })
}

/// `1 - Dice(S_skull, phi(S_skull))`.
pub fn skull_loss(original: &[f64], warped: &[f64]) -> Result<LossValue> {
    if !original.iter().any(|&v| v > 0.0) {
        return Err(Error::EmptySupport("skull mask is empty".into()));
    }
    if original.len() != warped.len() {
        return Err(Error::InvalidParameter("skull masks differ in size".into()));
    }
    Ok(LossValue { value: 1.0 - soft_dice(original, warped), differentiable: true })
}

/// Warped channel index: 0 is the image, `1 + MaskClass::channel()` the masks.
const IMAGE: usize = 0;
fn ch(class: MaskClass) -> usize {
    1 + class.channel()
}

/// The fixed inputs of one synthesis problem.
struct Problem {
    dims: Dims,
    /// Image followed by the five mask channels.
    sources: [Vec<f64>; 6],
    /// The same channels interleaved per voxel.
    packed: Vec<[f64; 6]>,
    weights: LossWeights,
    hist: HistogramSpec,
    ssim: SsimParams,
    steps: usize,
    up: Upsampler,
    hematoma_total: f64,
    control: Dims,
}

impl Problem {
    fn new(
        x: &ScalarVolume,
        masks: &MaskVolume,
        weights: LossWeights,
        metrics: &MetricsConfig,
        steps: usize,
        factor: usize,
        skull_threshold: f64,
    ) -> Result<Self> {
        metrics.validate()?;
        weights.check_values()?;
        let dims = x.dims();
        dims.ensure_same(masks.dims())?;
        if steps == 0 {
            return Err(Error::InvalidParameter("scaling and squaring needs at least one step".into()));
        }
        let masks = masks.clone().with_skull_fallback(x, skull_threshold)?;
        let hematoma_total: f64 = masks.channel(MaskClass::Hematoma).iter().sum();
        let mut weights = weights;
        if hematoma_total <= 0.0 {
            weights.hematoma = 0.0;
        }
        if weights.ventricle > 0.0 {
            for class in [MaskClass::VentricleLeft, MaskClass::VentricleRight] {
                if masks.mass(class) <= 0.0 {
                    return Err(Error::EmptySupport(format!("{} channel is empty", class.name())));
                }
            }
        }
        if weights.skull > 0.0 && masks.mass(MaskClass::Skull) <= 0.0 {
            return Err(Error::EmptySupport("skull mask is empty".into()));
        }
        if (weights.jeffrey > 0.0 || weights.ssim > 0.0) && dims.nx() < 2 {
            return Err(Error::InvalidVolume("symmetry terms need nx >= 2".into()));
        }
        let control = crate::diffeo::control_dims(dims, factor);
        let sources = [
            x.data().to_vec(),
            masks.channel(MaskClass::Brain).to_vec(),
            masks.channel(MaskClass::Skull).to_vec(),
            masks.channel(MaskClass::Hematoma).to_vec(),
            masks.channel(MaskClass::VentricleLeft).to_vec(),
            masks.channel(MaskClass::VentricleRight).to_vec(),
        ];
        let packed = (0..dims.len()).map(|p| std::array::from_fn(|c| sources[c][p])).collect();
        Ok(Problem {
            dims,
            sources,
            packed,
            weights,
            hist: metrics.histogram(),
            ssim: metrics.ssim(),
            steps,
            up: Upsampler::new(control, dims),
            hematoma_total,
            control,
        })
    }

    /// Loss terms at control velocity `ctrl` and, if requested, the gradient w.r.t. `ctrl`.
    fn evaluate(&self, ctrl: &[[f64; 3]], want_grad: bool) -> Result<(TermBreakdown, Option<Vec<[f64; 3]>>)> {
        let dims = self.dims;
        let w = self.weights;
        let (u, tape) = integrate_full(&self.up.apply(ctrl), dims, self.steps);
        let stencils = displaced_stencils(&u, dims);
        let needed = |c: usize| match c {
            IMAGE => w.jeffrey > 0.0 || w.ssim > 0.0,
            c if c == ch(MaskClass::Brain) => w.jeffrey > 0.0 || w.ssim > 0.0,
            c if c == ch(MaskClass::Skull) => w.skull > 0.0,
            c if c == ch(MaskClass::Hematoma) => w.hematoma > 0.0,
            _ => w.ventricle > 0.0,
        };
        let samples: Vec<[f64; 6]> = stencils.par_iter().map(|s| s.sample_vec(&self.packed)).collect();
        let warped: Vec<Option<Vec<f64>>> =
            (0..6).map(|c| needed(c).then(|| samples.iter().map(|v| v[c]).collect())).collect();
        let get = |c: usize| warped[c].as_deref().expect("channel warped when its term is active");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; 6];
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, c: usize, g: Vec<f64>| match &mut grads[c] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        };
        let mut terms = TermBreakdown::default();

        if w.jeffrey > 0.0 {
            let (lx, rx, half) = split_channel(get(IMAGE), dims);
            let (lb, rb, _) = split_channel(get(ch(MaskClass::Brain)), dims);
            let (value, g) = jeffreys_with_grad(&lx, Some(&lb), &rx, Some(&rb), &self.hist)?;
            terms.jeffrey = value;
            if want_grad {
                let h = half.nx();
                let x0 = dims.nx() - h;
                let spread = |l: &[f64], r: &[f64]| {
                    let mut full = vec![0.0; dims.len()];
                    slab_adjoint(&l.iter().map(|v| v * w.jeffrey).collect::<Vec<_>>(), &mut full, dims, 0, h);
                    slab_adjoint(&r.iter().map(|v| v * w.jeffrey).collect::<Vec<_>>(), &mut full, dims, x0, h);
                    full
                };
                acc(&mut grads, IMAGE, spread(&g.left_values, &g.right_values));
                acc(&mut grads, ch(MaskClass::Brain), spread(&g.left_weights, &g.right_weights));
            }
        }
        if w.ssim > 0.0 {
            let (xw, bw) = (get(IMAGE), get(ch(MaskClass::Brain)));
            let masked: Vec<f64> = xw.iter().zip(bw).map(|(a, b)| a * b).collect();
            let (neg, g) = ssim_symmetry(&masked, dims, &self.ssim, want_grad);
            // Offset by one so the term vanishes at perfect symmetry; gradients are unaffected.
            terms.ssim = 1.0 + neg;
            if let Some(g) = g {
                acc(&mut grads, IMAGE, g.iter().zip(bw).map(|(gy, b)| w.ssim * gy * b).collect());
                acc(&mut grads, ch(MaskClass::Brain), g.iter().zip(xw).map(|(gy, x)| w.ssim * gy * x).collect());
            }
        }
        if w.ventricle > 0.0 {
            let l = get(ch(MaskClass::VentricleLeft));
            let rf = flip_x(get(ch(MaskClass::VentricleRight)), dims);
            let (d, da, db) = soft_dice_with_grad(l, &rf);
            terms.ventricle = 1.0 - d;
            if want_grad {
                acc(&mut grads, ch(MaskClass::VentricleLeft), da.iter().map(|g| -w.ventricle * g).collect());
                let back = flip_x(&db, dims);
                acc(&mut grads, ch(MaskClass::VentricleRight), back.iter().map(|g| -w.ventricle * g).collect());
            }
        }
        if w.hematoma > 0.0 {
            let hw = get(ch(MaskClass::Hematoma));
            terms.hematoma = hw.iter().sum::<f64>() / self.hematoma_total;
            if want_grad {
                acc(&mut grads, ch(MaskClass::Hematoma), vec![w.hematoma / self.hematoma_total; dims.len()]);
            }
        }
        if w.skull > 0.0 {
            let (d, _, db) = soft_dice_with_grad(&self.sources[ch(MaskClass::Skull)], get(ch(MaskClass::Skull)));
            terms.skull = 1.0 - d;
            if want_grad {
                acc(&mut grads, ch(MaskClass::Skull), db.iter().map(|g| -w.skull * g).collect());
            }
        }
        let mut du = vec![[0.0; 3]; dims.len()];
        if w.jacobian > 0.0 {
            let (value, g) = jacobian_loss_raw(&u, dims, &self.sources[ch(MaskClass::Hematoma)], want_grad);
            terms.jacobian = value;
            if let Some(g) = g {
                for (d, gj) in du.iter_mut().zip(g) {
                    for a in 0..3 {
                        d[a] += w.jacobian * gj[a];
                    }
                }
            }
        }
        let mut g_reg = None;
        if w.gradient > 0.0 {
            let (value, g) = gradient_loss_raw(ctrl, self.control, want_grad);
            terms.gradient = value;
            g_reg = g;
        }
        for t in Term::ALL {
            if !terms.get(t).is_finite() {
                return Err(Error::NonFiniteLoss { term: t.name().into() });
            }
        }
        terms.total = terms.weighted_sum(&w);
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss { term: "total".into() });
        }
        if !want_grad {
            return Ok((terms, None));
        }

        // Sample-position gradients of every warped channel that received a gradient.
        let channel_grads: Vec<[f64; 6]> =
            (0..dims.len()).map(|p| std::array::from_fn(|c| grads[c].as_ref().map_or(0.0, |g| g[p]))).collect();
        du.par_iter_mut().enumerate().for_each(|(p, d)| {
            let s = &stencils[p];
            let gp = &channel_grads[p];
            if gp.iter().all(|&g| g == 0.0) {
                return;
            }
            // The interpolant is linear in the source values, so the channels combine before differentiating.
            let corners = s.nodes().map(|n| self.packed[n].iter().zip(gp).map(|(v, g)| v * g).sum());
            let grad = s.gradient(corners);
            for a in 0..3 {
                d[a] += grad[a];
            }
        });
        let mut g_ctrl = self.up.adjoint(&tape.backward(du));
        if let Some(g) = g_reg {
            for (a, b) in g_ctrl.iter_mut().zip(g) {
                for c in 0..3 {
                    a[c] += w.gradient * b[c];
                }
            }
        }
        Ok((terms, Some(g_ctrl)))
    }
}

/// Evaluate every compound-loss term at velocity `v`.
pub fn compound_loss(
    x: &ScalarVolume,
    masks: &MaskVolume,
    v: &VelocityField,
    cfg: &SynthConfig,
    metrics: &MetricsConfig,
) -> Result<TermBreakdown> {
    let problem = Problem::new(x, masks, cfg.weights, metrics, cfg.steps, v.factor(), cfg.skull_threshold)?;
    x.dims().ensure_same(v.image_dims())?;
    Ok(problem.evaluate(v.control().data(), false)?.0)
}

/// Gradient of the compound loss w.r.t. the control-grid velocity.
pub fn compound_loss_gradient(
    x: &ScalarVolume,
    masks: &MaskVolume,
    v: &VelocityField,
    cfg: &SynthConfig,
    metrics: &MetricsConfig,
) -> Result<(TermBreakdown, VectorField)> {
    let problem = Problem::new(x, masks, cfg.weights, metrics, cfg.steps, v.factor(), cfg.skull_threshold)?;
    x.dims().ensure_same(v.image_dims())?;
    let (terms, g) = problem.evaluate(v.control().data(), true)?;
    let g = g.expect("gradient requested");
    Ok((terms, VectorField::new(v.control().dims(), g)?))
}

/// Outcome of [`optimize_velocity`].
#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub velocity: VelocityField,
    pub deformation: DeformationField,
    pub pseudo_healthy: ScalarVolume,
    pub warped_masks: MaskVolume,
    /// Term values at every iterate that was evaluated.
    pub trace: Vec<TermBreakdown>,
    pub best_iteration: usize,
    /// `(sum S_hem - sum phi(S_hem)) / sum S_hem`; `None` without a hematoma.
    pub hematoma_reduction: Option<f64>,
}

/// Minimize the compound loss over the control-grid velocity, starting from zero.
///
/// Adam runs on the velocity expressed in units of the grid half-extent per axis,
/// so that a single learning rate transfers across grid sizes.
pub fn optimize_velocity(
    x: &ScalarVolume,
    masks: &MaskVolume,
    cfg: &SynthConfig,
    metrics: &MetricsConfig,
) -> Result<SynthesisResult> {
    cfg.validate()?;
    let problem = Problem::new(x, masks, cfg.weights, metrics, cfg.steps, cfg.control_factor, cfg.skull_threshold)?;
    let dims = x.dims();
    let scale = dims.0.map(|n| (n.max(2) - 1) as f64 / 2.0);
    let n_ctrl = problem.control.len();
    let mut theta = vec![0.0; 3 * n_ctrl];
    let to_ctrl = |theta: &[f64]| -> Vec<[f64; 3]> {
        theta.chunks_exact(3).map(|t| [t[0] * scale[0], t[1] * scale[1], t[2] * scale[2]]).collect()
    };
    let mut adam = Adam::new(theta.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best = (f64::INFINITY, 0usize, theta.clone());
    let (mut plateau_ref, mut plateau_start) = (f64::INFINITY, 0usize);
    for it in 0..cfg.iterations {
        let ctrl = to_ctrl(&theta);
        let (terms, g) = problem.evaluate(&ctrl, true).map_err(|e| match e {
            Error::NonFiniteLoss { term } => Error::Diverged { iteration: it, detail: format!("non-finite `{term}` loss") },
            other => other,
        })?;
        if terms.total < best.0 {
            best = (terms.total, it, theta.clone());
        }
        if it % 100 == 0 {
            log::info!(
                "synth iteration {it}: total {:.5} | jeffrey {:.4} ssim {:.4} ventricle {:.4} hematoma {:.4} skull {:.4} jacobian {:.4} gradient {:.5}",
                terms.total,
                terms.jeffrey,
                terms.ssim,
                terms.ventricle,
                terms.hematoma,
                terms.skull,
                terms.jacobian,
                terms.gradient
            );
        }
        if terms.total < plateau_ref - cfg.tolerance * plateau_ref.abs() || it == 0 {
            (plateau_ref, plateau_start) = (terms.total, it);
        }
        trace.push(terms);
        if cfg.patience > 0 && it - plateau_start >= cfg.patience {
            log::info!("synth stopped at iteration {it}: no relative improvement above {} in {} iterations", cfg.tolerance, cfg.patience);
            break;
        }
        let g = g.expect("gradient requested");
        let g_theta: Vec<f64> = g.iter().flat_map(|d| [d[0] * scale[0], d[1] * scale[1], d[2] * scale[2]]).collect();
        adam.step(&mut theta, &g_theta);
    }
    let (_, best_iteration, best_theta) = best;
    let velocity = VelocityField::from_control(
        VectorField::new(problem.control, to_ctrl(&best_theta))?,
        cfg.control_factor,
        dims,
    )?;
    let deformation = integrate_velocity(&velocity, cfg.steps)?;
    let pseudo_healthy = deformation.apply(x)?;
    let warped_masks = deformation.apply(masks)?;
    let hematoma_reduction = (problem.hematoma_total > 0.0).then(|| {
        let remaining: f64 = warped_masks.channel(MaskClass::Hematoma).iter().sum();
        (problem.hematoma_total - remaining) / problem.hematoma_total
    });
    Ok(SynthesisResult { velocity, deformation, pseudo_healthy, warped_masks, trace, best_iteration, hematoma_reduction })
}

/// Maximum relative error between the adjoint gradient and central finite differences
/// (step `1e-3` voxel) at `samples` random control-grid coordinates. The relative error
/// uses the denominator `max(|g|, 1e-6)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    x: &ScalarVolume,
    masks: &MaskVolume,
    weights: &LossWeights,
    v: &VelocityField,
    samples: usize,
    seed: u64,
    steps: usize,
    metrics: &MetricsConfig,
) -> Result<f64> {
    const STEP: f64 = 1e-3;
    x.dims().ensure_same(v.image_dims())?;
    let problem = Problem::new(x, masks, *weights, metrics, steps, v.factor(), SynthConfig::default().skull_threshold)?;
    let base = v.control().data().to_vec();
    let (_, g) = problem.evaluate(&base, true)?;
    let g = g.expect("gradient requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let idx = rng.gen_range(0..base.len());
        let c = rng.gen_range(0..3);
        let mut probe = base.clone();
        probe[idx][c] = base[idx][c] + STEP;
        let plus = problem.evaluate(&probe, false)?.0.total;
        probe[idx][c] = base[idx][c] - STEP;
        let minus = problem.evaluate(&probe, false)?.0.total;
        let fd = (plus - minus) / (2.0 * STEP);
        worst = worst.max((g[idx][c] - fd).abs() / g[idx][c].abs().max(1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn binary(dims: Dims, on: impl Fn(usize, usize, usize) -> bool) -> Vec<f64> {
        (0..dims.len())
            .map(|idx| {
                let [i, j, k] = dims.coords(idx);
                if on(i, j, k) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn ventricle_loss_cases() {
        let dims = Dims::new(8, 2, 1);
        let mut m = MaskVolume::zeros(dims);
        m.set_channel(MaskClass::VentricleLeft, binary(dims, |i, _, _| i == 2)).unwrap();
        m.set_channel(MaskClass::VentricleRight, binary(dims, |i, _, _| i == 5)).unwrap();
        assert_abs_diff_eq!(ventricle_loss(&m).unwrap().value, 0.0, epsilon = 1e-6);
        m.set_channel(MaskClass::VentricleRight, binary(dims, |i, _, _| i == 6)).unwrap();
        assert_abs_diff_eq!(ventricle_loss(&m).unwrap().value, 1.0, epsilon = 1e-6);
        // Left {1,2} x {0,1}; flipped right {2,3} x {0,1}: overlap 2 of 4 and 4.
        m.set_channel(MaskClass::VentricleLeft, binary(dims, |i, _, _| i == 1 || i == 2)).unwrap();
        m.set_channel(MaskClass::VentricleRight, binary(dims, |i, _, _| i == 4 || i == 5)).unwrap();
        assert_abs_diff_eq!(ventricle_loss(&m).unwrap().value, 0.5, epsilon = 1e-6);
        assert!(ventricle_loss(&MaskVolume::zeros(dims)).is_err());
    }

    #[test]
    fn hematoma_and_skull_loss_cases() {
        let h = [0.0, 1.0, 1.0, 0.5];
        assert_abs_diff_eq!(hematoma_loss(&h, &h).unwrap().value, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hematoma_loss(&h, &[0.0; 4]).unwrap().value, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hematoma_loss(&h, &[0.0, 0.5, 0.5, 0.25]).unwrap().value, 0.5, epsilon = 1e-12);
        assert!(matches!(hematoma_loss(&[0.0; 4], &[0.0; 4]), Err(Error::EmptySupport(_))));

        let s = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_abs_diff_eq!(skull_loss(&s, &s).unwrap().value, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(skull_loss(&s, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap().value, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(skull_loss(&s, &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap().value, 0.5, epsilon = 1e-6);
        assert!(skull_loss(&[0.0; 6], &s).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights::zero().validate().is_err());
        assert!(LossWeights { jeffrey: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(LossWeights::only(Term::Skull, 2.0).get(Term::Skull), 2.0);
        assert!(SynthConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { tolerance: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn plateau_stops_early_unless_disabled() {
        let (x, masks) = crate::phantom::generate_downsampled(&crate::phantom::PhantomSpec::healthy(), 12).unwrap();
        let metrics = MetricsConfig::default();
        let cfg = SynthConfig { iterations: 12, patience: 5, tolerance: 0.5, ..Default::default() };
        let stopped = optimize_velocity(&x, &masks, &cfg, &metrics).unwrap();
        assert_eq!(stopped.trace.len(), 6);
        let full = optimize_velocity(&x, &masks, &SynthConfig { patience: 0, ..cfg }, &metrics).unwrap();
        assert_eq!(full.trace.len(), 12);
    }
}
