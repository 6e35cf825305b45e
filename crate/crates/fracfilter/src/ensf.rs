//! Ensemble score filter: a training-free Bayesian update. The forecast
//! ensemble defines an analytic score of its diffused density; the damped
//! observation log-likelihood gradient is added to that score; integrating
//! the reverse-time SDE from white noise then draws posterior samples.
//!
//! Pseudo-time runs over [t_min, 1 - t_min] with the linear schedule
//! alpha(t) = 1 - t, beta(t) = t. Scores are evaluated in batch (all
//! trajectories at once) through dense matrix products; per-vector entry
//! points are kept for reference and testing.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FfError, Result};
use crate::observe::ObservationModel;
use crate::stats;

/// Linear diffusion schedule and reverse-SDE discretization controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    /// Number of uniform Euler-Maruyama steps over [t_min, 1 - t_min].
    pub n_steps: usize,
    /// Lower pseudo-time cutoff; defaults to 1/n_steps.
    pub t_min: f64,
    /// Floor applied to beta wherever it appears in a denominator.
    pub beta_floor: f64,
}

impl DiffusionSchedule {
    pub fn new(n_steps: usize) -> Self {
        assert!(n_steps >= 2, "reverse SDE needs at least two steps");
        DiffusionSchedule {
            n_steps,
            t_min: 1.0 / n_steps as f64,
            beta_floor: 1e-4,
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    /// beta(t) = t, floored so score denominators stay finite at t -> 0.
    pub fn beta(&self, t: f64) -> f64 {
        t.max(self.beta_floor)
    }

    /// Drift and squared diffusion (b, sigma^2) of the forward SDE whose
    /// marginals match alpha(t) x0 + beta(t) eps:
    /// b = -1/(1-t), sigma^2 = 2t/(1-t).
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        let hi = 1.0 - self.t_min;
        if !t.is_finite() || t < 0.0 || t > hi + 1e-12 {
            return Err(FfError::Config(format!(
                "pseudo-time {t} outside schedule domain [0, {hi}]"
            )));
        }
        Ok((-1.0 / (1.0 - t), 2.0 * t / (1.0 - t)))
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::new(200)
    }
}

/// Damping applied to the likelihood gradient in the posterior score:
/// h(0) = 1, h(1) = 0, monotone decreasing.
pub fn damping(t: f64) -> f64 {
    1.0 - t
}

/// Observation term of the posterior score. `variance` is the effective
/// likelihood variance, already clamped by the caller if desired.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub model: &'a ObservationModel,
    pub data: &'a [f64],
    pub variance: f64,
}

/// Likelihood variance used inside the score: tiny observation noise is
/// clamped so the guidance drift stays integrable by n_steps Euler steps.
pub fn effective_variance(sigma_obs: f64, guidance_floor: f64, n_steps: usize) -> f64 {
    (sigma_obs * sigma_obs).max(guidance_floor / n_steps as f64)
}

/// Everything the score evaluation needs: the forecast ensemble, the
/// mini-batch over it, and the optional observation term.
pub struct ScoreContext<'a> {
    pub predictions: &'a [Vec<f64>],
    /// Indices into `predictions`; distinct. Defaults to the full ensemble.
    pub batch: Vec<usize>,
    pub guidance: Option<Guidance<'a>>,
}

impl<'a> ScoreContext<'a> {
    pub fn new(predictions: &'a [Vec<f64>], guidance: Option<Guidance<'a>>) -> Self {
        ScoreContext {
            predictions,
            batch: (0..predictions.len()).collect(),
            guidance,
        }
    }
}

/// Advances every sample through the model map and adds N(0, noise_std^2)
/// model noise componentwise.
pub fn predict(
    samples: &[Vec<f64>],
    mut step: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut x = step(s)?;
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("valid noise std");
            for v in &mut x {
                *v += normal.sample(rng);
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// Score of the diffused forecast density at pseudo-time t, evaluated at z:
/// a softmax-weighted sum of per-sample Gaussian scores
/// -(z - alpha x_o) / beta^2 with weights proportional to
/// exp(-|z - alpha x_o|^2 / (2 beta^2)), accumulated in the log domain.
pub fn prior_score(z: &[f64], t: f64, ctx: &ScoreContext, sched: &DiffusionSchedule) -> Vec<f64> {
    let alpha = sched.alpha(t);
    let beta = sched.beta(t);
    let b2 = beta * beta;
    let logits: Vec<f64> = ctx
        .batch
        .iter()
        .map(|&o| {
            let x = &ctx.predictions[o];
            let ss = stats::sum(z.iter().zip(x).map(|(&zi, &xi)| {
                let d = zi - alpha * xi;
                d * d
            }));
            -ss / (2.0 * b2)
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total = stats::sum(weights.iter().copied());
    for w in &mut weights {
        *w /= total;
    }
    let mut score = vec![0.0; z.len()];
    for (&o, &w) in ctx.batch.iter().zip(&weights) {
        let x = &ctx.predictions[o];
        for (si, (&zi, &xi)) in score.iter_mut().zip(z.iter().zip(x)) {
            *si -= w * (zi - alpha * xi) / b2;
        }
    }
    score
}

/// Prior score plus the damped observation term h(t) grad log p(y | z).
pub fn posterior_score(
    z: &[f64],
    t: f64,
    ctx: &ScoreContext,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let mut score = prior_score(z, t, ctx, sched);
    if let Some(g) = &ctx.guidance {
        g.model
            .accumulate_likelihood_grad(z, g.data, g.variance, damping(t), &mut score)?;
    }
    Ok(score)
}

/// Integrates the reverse-time SDE for `n_out` trajectories from N(0, I) at
/// t = 1 - t_min down to t_min. `score` receives the current trajectories as
/// the columns of a dim x n_out matrix plus the pseudo-time, and writes the
/// matching scores into the provided buffer (reused across steps). Used
/// directly with analytic scores in tests; filters go through
/// [`reverse_sample`].
pub fn sample_with_score(
    dim: usize,
    n_out: usize,
    mut score: impl FnMut(&Mat<f64>, f64, &mut Mat<f64>) -> Result<()>,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    faer::set_global_parallelism(faer::Par::Seq);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z = Mat::<f64>::zeros(dim, n_out);
    for c in 0..n_out {
        for v in z.col_as_slice_mut(c) {
            *v = normal.sample(rng);
        }
    }
    let mut s = Mat::<f64>::zeros(dim, n_out);
    let dt = (1.0 - 2.0 * sched.t_min) / sched.n_steps as f64;
    for k in 0..sched.n_steps {
        let t = 1.0 - sched.t_min - k as f64 * dt;
        let (b, sig2) = sched.coefficients(t)?;
        score(&z, t, &mut s)?;
        let sig = sig2.sqrt() * dt.sqrt();
        for c in 0..n_out {
            let sc = s.col_as_slice(c);
            for (v, &si) in z.col_as_slice_mut(c).iter_mut().zip(sc) {
                *v -= dt * (b * *v - sig2 * si);
                *v += sig * normal.sample(rng);
            }
        }
    }
    let mut out = Vec::with_capacity(n_out);
    for c in 0..n_out {
        let col = z.col_as_slice(c).to_vec();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(FfError::NonFinite(
                "reverse-SDE trajectory diverged".into(),
            ));
        }
        out.push(col);
    }
    Ok(out)
}

/// Draws `n_out` posterior samples given the forecast ensemble and the
/// (optional) observation. `batch_size` < J re-draws the score mini-batch
/// every reverse step; `None` uses the full ensemble throughout.
pub fn reverse_sample(
    predictions: &[Vec<f64>],
    guidance: Option<Guidance<'_>>,
    n_out: usize,
    batch_size: Option<usize>,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let j = predictions.len();
    if j == 0 {
        return Err(FfError::Config("empty forecast ensemble".into()));
    }
    let dim = predictions[0].len();
    if let Some(bad) = predictions.iter().find(|p| p.len() != dim) {
        return Err(FfError::DimensionMismatch {
            context: "forecast ensemble",
            expected: dim,
            got: bad.len(),
        });
    }
    let o = batch_size.unwrap_or(j).clamp(1, j);
    let sub_batching = o < j;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let mut pool: Vec<usize> = (0..j).collect();
    let mut xmat = Mat::<f64>::zeros(dim, o);
    let mut xnorm = vec![0.0; o];
    let load = |batch: &[usize], xmat: &mut Mat<f64>, xnorm: &mut Vec<f64>| {
        for (c, &idx) in batch.iter().enumerate() {
            let src = &predictions[idx];
            xmat.col_as_slice_mut(c).copy_from_slice(src);
            xnorm[c] = stats::sum(src.iter().map(|&v| v * v));
        }
    };
    if !sub_batching {
        load(&pool, &mut xmat, &mut xnorm);
    }
    let mut ws = ScoreWorkspace::new(n_out, o);

    let score = move |z: &Mat<f64>, t: f64, out: &mut Mat<f64>| -> Result<()> {
        if sub_batching {
            for i in 0..o {
                let pick = batch_rng.random_range(i..j);
                pool.swap(i, pick);
            }
            load(&pool[..o], &mut xmat, &mut xnorm);
        }
        batched_score(z, t, &xmat, &xnorm, guidance.as_ref(), sched, &mut ws, out)
    };
    sample_with_score(dim, n_out, score, sched, rng)
}

/// Scratch buffers for the batched score, reused across reverse steps.
struct ScoreWorkspace {
    /// n_traj x O: batch logits, then softmax weights, in place.
    logits: Mat<f64>,
    /// Per-trajectory running maximum of the logits.
    tops: Vec<f64>,
    /// Per-trajectory weight normalizer.
    totals: Vec<f64>,
    /// State-column copy handed to the likelihood gradient.
    zcol: Vec<f64>,
}

impl ScoreWorkspace {
    fn new(n_traj: usize, o: usize) -> Self {
        ScoreWorkspace {
            logits: Mat::zeros(n_traj, o),
            tops: vec![0.0; n_traj],
            totals: vec![0.0; n_traj],
            zcol: Vec::new(),
        }
    }
}

/// Posterior score for every column of `z` at once, written into `out`.
/// `xmat` holds the batch members as columns, `xnorm` their squared norms.
/// All passes run column-wise (stride-1) with per-row accumulators.
#[allow(clippy::too_many_arguments)]
fn batched_score(
    z: &Mat<f64>,
    t: f64,
    xmat: &Mat<f64>,
    xnorm: &[f64],
    guidance: Option<&Guidance<'_>>,
    sched: &DiffusionSchedule,
    ws: &mut ScoreWorkspace,
    out: &mut Mat<f64>,
) -> Result<()> {
    let n_traj = z.ncols();
    let o = xmat.ncols();
    let alpha = sched.alpha(t);
    let beta = sched.beta(t);
    let b2 = beta * beta;

    // Softmax logits: -(|z|^2 - 2 alpha z.x + alpha^2 |x|^2) / (2 beta^2);
    // the |z|^2 term is constant per trajectory and drops out.
    matmul(
        &mut ws.logits,
        Accum::Replace,
        z.transpose(),
        xmat,
        1.0,
        Par::Seq,
    );
    stats::clear_simd_upper_state();
    ws.tops.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
    for c in 0..o {
        let shift = 0.5 * alpha * alpha * xnorm[c];
        for (top, v) in ws.tops.iter_mut().zip(ws.logits.col_as_slice_mut(c)) {
            let l = (alpha * *v - shift) / b2;
            *v = l;
            *top = top.max(l);
        }
    }
    // Shifted logits below the cutoff correspond to weights < ~2e-22 of the
    // leading one; flushing them to exact zero skips the slow underflow path
    // of exp and keeps denormals out of the weight matrix.
    const LOGIT_CUTOFF: f64 = -50.0;
    ws.totals.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..o {
        for ((tot, &top), v) in ws
            .totals
            .iter_mut()
            .zip(&ws.tops)
            .zip(ws.logits.col_as_slice_mut(c))
        {
            let a = *v - top;
            let w = if a < LOGIT_CUTOFF { 0.0 } else { a.exp() };
            *v = w;
            *tot += w;
        }
    }
    for c in 0..o {
        for (&tot, v) in ws.totals.iter().zip(ws.logits.col_as_slice_mut(c)) {
            *v /= tot;
        }
    }

    // Weighted batch means per trajectory, then the Gaussian-mixture score.
    matmul(
        &mut *out,
        Accum::Replace,
        xmat,
        ws.logits.transpose(),
        1.0,
        Par::Seq,
    );
    stats::clear_simd_upper_state();
    for c in 0..n_traj {
        let zc = z.col_as_slice(c);
        for (s, &zi) in out.col_as_slice_mut(c).iter_mut().zip(zc) {
            *s = -(zi - alpha * *s) / b2;
        }
    }

    if let Some(g) = guidance {
        let h = damping(t);
        for c in 0..n_traj {
            ws.zcol.clear();
            ws.zcol.extend_from_slice(z.col_as_slice(c));
            g.model.accumulate_likelihood_grad(
                &ws.zcol,
                g.data,
                g.variance,
                h,
                out.col_as_slice_mut(c),
            )?;
        }
    }
    Ok(())
}

/// Ensemble mean, the committed state estimate.
pub fn analysis_mean(samples: &[Vec<f64>]) -> Vec<f64> {
    stats::mean_vector(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_coefficients_and_domain() {
        let sched = DiffusionSchedule::new(200);
        assert_eq!(sched.t_min, 0.005);
        let (b0, s0) = sched.coefficients(0.0).unwrap();
        assert_eq!((b0, s0), (-1.0, 0.0));
        let (b5, s5) = sched.coefficients(0.5).unwrap();
        assert_eq!((b5, s5), (-2.0, 2.0));
        assert!(sched.coefficients(0.999).is_err());
        assert!(sched.coefficients(-0.1).is_err());
        assert_eq!(sched.alpha(0.0), 1.0);
        assert_eq!(sched.alpha(1.0), 0.0);
        assert_eq!(sched.beta(1.0), 1.0);
        assert_eq!(sched.beta(0.0), sched.beta_floor);
    }

    #[test]
    fn single_sample_prior_score_is_gaussian_score() {
        let sched = DiffusionSchedule::new(200);
        let predictions = vec![vec![0.0]];
        let ctx = ScoreContext::new(&predictions, None);
        let s = prior_score(&[1.0], 0.5, &ctx, &sched);
        assert_abs_diff_eq!(s[0], -4.0, epsilon = 1e-14);

        // General single-sample case over random (z, x, t).
        let mut rng = substream(5, "single-sample", &[]);
        for _ in 0..1000 {
            let x = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let t: f64 = rng.random_range(0.01..0.99);
            let preds = vec![x.clone()];
            let ctx = ScoreContext::new(&preds, None);
            let s = prior_score(&z, t, &ctx, &sched);
            let beta2 = sched.beta(t) * sched.beta(t);
            for i in 0..2 {
                let exact = -(z[i] - (1.0 - t) * x[i]) / beta2;
                assert_abs_diff_eq!(s[i], exact, epsilon = 1e-12 * exact.abs().max(1.0));
            }
        }
    }

    #[test]
    fn symmetric_batch_scores_cancel_at_origin() {
        let sched = DiffusionSchedule::new(100);
        for a in [0.3, 1.7, 42.0] {
            let predictions = vec![vec![a, -2.0 * a], vec![-a, 2.0 * a]];
            let ctx = ScoreContext::new(&predictions, None);
            for t in [0.1, 0.5, 0.9] {
                let s = prior_score(&[0.0, 0.0], t, &ctx, &sched);
                assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-12);
            }
        }
    }

    /// Straightforward term-by-term evaluation with plain normalization,
    /// written independently of the log-sum-exp production path.
    fn brute_force_prior(
        z: &[f64],
        t: f64,
        predictions: &[Vec<f64>],
        sched: &DiffusionSchedule,
    ) -> Vec<f64> {
        let alpha = 1.0 - t;
        let beta = sched.beta(t);
        let mut weights = Vec::new();
        for x in predictions {
            let mut ss = 0.0;
            for i in 0..z.len() {
                ss += (z[i] - alpha * x[i]).powi(2);
            }
            weights.push((-ss / (2.0 * beta * beta)).exp());
        }
        let total: f64 = weights.iter().sum();
        let mut score = vec![0.0; z.len()];
        for (x, w) in predictions.iter().zip(&weights) {
            for i in 0..z.len() {
                score[i] += (w / total) * (-(z[i] - alpha * x[i]) / (beta * beta));
            }
        }
        score
    }

    #[test]
    fn prior_score_matches_brute_force() {
        let sched = DiffusionSchedule::new(200);
        let mut rng = substream(9, "brute-force", &[]);
        let predictions: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let ctx = ScoreContext::new(&predictions, None);
        // Moderate t: the direct evaluation is safe for arbitrary z.
        for t in [0.3, 0.6, 0.9] {
            for _ in 0..50 {
                let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let got = prior_score(&z, t, &ctx, &sched);
                let want = brute_force_prior(&z, t, &predictions, &sched);
                for i in 0..3 {
                    assert_abs_diff_eq!(got[i], want[i], epsilon = 1e-12 * want[i].abs().max(1.0));
                }
            }
        }
        // Small t: the direct evaluation underflows unless z sits near one
        // batch member, so draw z within a few beta of a random member.
        for t in [0.01, 0.05] {
            for k in 0..50 {
                let anchor = &predictions[k % predictions.len()];
                let beta = sched.beta(t);
                let z: Vec<f64> = anchor
                    .iter()
                    .map(|&a| (1.0 - t) * a + beta * rng.random_range(-2.0..2.0))
                    .collect();
                let got = prior_score(&z, t, &ctx, &sched);
                let want = brute_force_prior(&z, t, &predictions, &sched);
                for i in 0..3 {
                    assert_abs_diff_eq!(got[i], want[i], epsilon = 1e-12 * want[i].abs().max(1.0));
                }
            }
        }
    }

    fn toy_observation(n: usize) -> ObservationModel {
        ObservationModel {
            indices: (0..n).collect(),
            transformed: vec![false; n],
            sigma: 0.1,
        }
    }

    #[test]
    fn posterior_equals_prior_plus_damped_gradient() {
        let sched = DiffusionSchedule::new(100);
        let mut rng = substream(11, "posterior", &[]);
        let predictions: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let obs = toy_observation(4);
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let guidance = Guidance {
            model: &obs,
            data: &y,
            variance: 0.04,
        };
        let ctx = ScoreContext::new(&predictions, Some(guidance));
        let ctx_free = ScoreContext::new(&predictions, None);
        for t in [0.01, 0.37, 0.99] {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let post = posterior_score(&z, t, &ctx, &sched).unwrap();
            let prior = prior_score(&z, t, &ctx_free, &sched);
            let grad = obs.log_likelihood_grad(&z, &y, 0.04).unwrap();
            for i in 0..4 {
                let want = prior[i] + damping(t) * grad[i];
                assert_abs_diff_eq!(post[i], want, epsilon = 1e-12 * want.abs().max(1.0));
            }
        }
        // h(1) = 0: the observation term vanishes entirely.
        let z = vec![0.3, -0.2, 0.9, 0.0];
        let post = posterior_score(&z, 1.0, &ctx, &sched).unwrap();
        let prior = prior_score(&z, 1.0, &ctx_free, &sched);
        assert_eq!(post, prior);
    }

    #[test]
    fn batched_score_matches_per_vector() {
        let sched = DiffusionSchedule::new(50);
        let mut rng = substream(13, "batched", &[]);
        let dim = 5;
        let predictions: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let obs = toy_observation(dim);
        let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let guidance = Guidance {
            model: &obs,
            data: &y,
            variance: 0.09,
        };
        let ctx = ScoreContext::new(&predictions, Some(guidance));

        let mut xmat = Mat::<f64>::zeros(dim, predictions.len());
        let mut xnorm = vec![0.0; predictions.len()];
        for (c, p) in predictions.iter().enumerate() {
            xmat.col_as_slice_mut(c).copy_from_slice(p);
            xnorm[c] = p.iter().map(|v| v * v).sum();
        }
        let n_traj = 4;
        let mut z = Mat::<f64>::zeros(dim, n_traj);
        for c in 0..n_traj {
            for v in z.col_as_slice_mut(c) {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let mut ws = ScoreWorkspace::new(n_traj, predictions.len());
        let mut batched = Mat::<f64>::zeros(dim, n_traj);
        for t in [0.05, 0.37, 0.8] {
            batched_score(
                &z,
                t,
                &xmat,
                &xnorm,
                Some(&guidance),
                &sched,
                &mut ws,
                &mut batched,
            )
            .unwrap();
            for c in 0..n_traj {
                let zc: Vec<f64> = z.col_as_slice(c).to_vec();
                let want = posterior_score(&zc, t, &ctx, &sched).unwrap();
                for i in 0..dim {
                    assert_abs_diff_eq!(
                        batched[(i, c)],
                        want[i],
                        epsilon = 1e-12 * want[i].abs().max(1.0)
                    );
                }
            }
        }
    }

    #[test]
    fn analytic_standard_normal_score_generates_standard_normal() {
        // With the exact score of the diffused N(0, I) law the reverse SDE
        // must reproduce N(0, I) up to Monte-Carlo and Euler error.
        let sched = DiffusionSchedule::new(200);
        let mut rng = substream(17, "analytic-score", &[]);
        let n = 10_000;
        let samples = sample_with_score(
            1,
            n,
            |z, t, s| {
                let a = 1.0 - t;
                let var = a * a + t * t;
                for c in 0..z.ncols() {
                    for (o, &v) in s.col_as_slice_mut(c).iter_mut().zip(z.col_as_slice(c)) {
                        *o = -v / var;
                    }
                }
                Ok(())
            },
            &sched,
            &mut rng,
        )
        .unwrap();
        let flat: Vec<f64> = samples.iter().map(|s| s[0]).collect();
        let mean = stats::mean(&flat);
        let var = stats::sum(flat.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn single_point_forecast_contracts_to_that_point() {
        // One forecast sample: the prior score is an exact Gaussian bridge,
        // so trajectories end near alpha(t_min) x0 with spread ~ beta(t_min).
        let sched = DiffusionSchedule::new(200);
        let x0 = vec![1.0, -2.0];
        let predictions = vec![x0.clone()];
        let mut rng = substream(19, "bridge", &[]);
        let samples = reverse_sample(&predictions, None, 800, None, &sched, &mut rng).unwrap();
        let mean = analysis_mean(&samples);
        let dt = (1.0 - 2.0 * sched.t_min) / sched.n_steps as f64;
        for i in 0..2 {
            let target = sched.alpha(sched.t_min) * x0[i];
            let spread: f64 = stats::mean(
                &samples
                    .iter()
                    .map(|s| (s[i] - mean[i]).powi(2))
                    .collect::<Vec<_>>(),
            )
            .sqrt();
            let tol = 3.0 * spread / (samples.len() as f64).sqrt() + 2.0 * dt * x0[i].abs();
            assert!(
                (mean[i] - target).abs() < tol,
                "component {i}: mean {} target {target} tol {tol}",
                mean[i]
            );
            assert!(spread < 0.1, "component {i}: spread {spread}");
        }
    }

    #[test]
    fn prediction_is_deterministic_at_zero_noise_and_linear() {
        let samples: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let linear = |x: &[f64]| Ok(vec![0.9 * x[0] + 0.1 * x[1], -0.1 * x[0] + 0.8 * x[1]]);
        let mut rng = substream(23, "predict", &[]);
        let preds = predict(&samples, linear, 0.0, &mut rng).unwrap();
        let mean_in = analysis_mean(&samples);
        let mean_out = analysis_mean(&preds);
        let want = linear(&mean_in).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(mean_out[i], want[i], epsilon = 1e-10);
        }

        // Identical inputs stay identical through a deterministic map.
        let twin = predict(&[samples[0].clone(), samples[0].clone()], linear, 0.0, &mut rng).unwrap();
        assert_eq!(twin[0], twin[1]);
    }

    #[test]
    fn reverse_sampling_is_deterministic_in_the_seed() {
        let sched = DiffusionSchedule::new(40);
        let mut rng = substream(29, "determinism", &[]);
        let predictions: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let run = |seed: u64, batch: Option<usize>| {
            let mut r = substream(seed, "ensf-run", &[]);
            reverse_sample(&predictions, None, 10, batch, &sched, &mut r).unwrap()
        };
        assert_eq!(run(1, None), run(1, None));
        assert_ne!(run(1, None), run(2, None));
        assert_eq!(run(3, Some(4)), run(3, Some(4)));
        assert_ne!(run(3, Some(4)), run(3, None));
    }

    /// Exact Kalman filter for x' = A x + w, y = x + v with isotropic noise,
    /// written directly from the textbook recursion.
    struct Kalman {
        a: [[f64; 2]; 2],
        q: f64,
        r: f64,
        mean: [f64; 2],
        cov: [[f64; 2]; 2],
    }

    impl Kalman {
        fn step(&mut self, y: &[f64; 2]) {
            let a = &self.a;
            let m = [
                a[0][0] * self.mean[0] + a[0][1] * self.mean[1],
                a[1][0] * self.mean[0] + a[1][1] * self.mean[1],
            ];
            // P = A P A^T + Q
            let p = &self.cov;
            let ap = [
                [
                    a[0][0] * p[0][0] + a[0][1] * p[1][0],
                    a[0][0] * p[0][1] + a[0][1] * p[1][1],
                ],
                [
                    a[1][0] * p[0][0] + a[1][1] * p[1][0],
                    a[1][0] * p[0][1] + a[1][1] * p[1][1],
                ],
            ];
            let mut pp = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    pp[i][j] = ap[i][0] * a[j][0] + ap[i][1] * a[j][1];
                }
                pp[i][i] += self.q;
            }
            // K = P (P + R)^-1
            let s = [
                [pp[0][0] + self.r, pp[0][1]],
                [pp[1][0], pp[1][1] + self.r],
            ];
            let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
            let sinv = [
                [s[1][1] / det, -s[0][1] / det],
                [-s[1][0] / det, s[0][0] / det],
            ];
            let mut k = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    k[i][j] = pp[i][0] * sinv[0][j] + pp[i][1] * sinv[1][j];
                }
            }
            let innov = [y[0] - m[0], y[1] - m[1]];
            self.mean = [
                m[0] + k[0][0] * innov[0] + k[0][1] * innov[1],
                m[1] + k[1][0] * innov[0] + k[1][1] * innov[1],
            ];
            // P = (I - K) P' for H = I.
            let mut newp = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let ii = [if i == 0 { 1.0 } else { 0.0 }, if i == 1 { 1.0 } else { 0.0 }];
                    newp[i][j] = (ii[0] - k[i][0]) * pp[0][j] + (ii[1] - k[i][1]) * pp[1][j];
                }
            }
            self.cov = newp;
        }
    }

    #[test]
    fn tracks_exact_kalman_filter_on_linear_model() {
        let a = [[0.9, 0.1], [-0.1, 0.85]];
        let sigma_model = 0.1;
        let sigma_obs = 0.1;
        let n_steps = 50;
        let j = 200;
        let sched = DiffusionSchedule::new(200);
        let obs = toy_observation(2);
        let variance = effective_variance(sigma_obs, 1.0, sched.n_steps);
        assert_eq!(variance, sigma_obs * sigma_obs, "clamp must not engage here");

        let apply = |x: &[f64]| vec![
            a[0][0] * x[0] + a[0][1] * x[1],
            a[1][0] * x[0] + a[1][1] * x[1],
        ];

        // Simulated truth and observations.
        let mut truth_rng = substream(31, "kalman-truth", &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut truth = vec![0.5, -0.5];
        let mut ys = Vec::new();
        for _ in 0..n_steps {
            let mut next = apply(&truth);
            for v in &mut next {
                *v += sigma_model * normal.sample(&mut truth_rng);
            }
            truth = next;
            ys.push([
                truth[0] + sigma_obs * normal.sample(&mut truth_rng),
                truth[1] + sigma_obs * normal.sample(&mut truth_rng),
            ]);
        }

        let mut kf = Kalman {
            a,
            q: sigma_model * sigma_model,
            r: sigma_obs * sigma_obs,
            mean: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
        };

        let mut rng = substream(31, "kalman-ensf", &[]);
        let mut ensemble: Vec<Vec<f64>> = (0..j)
            .map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)])
            .collect();
        let mut err_sq_sum = 0.0;
        for y in &ys {
            let preds = predict(
                &ensemble,
                |x| Ok(apply(x)),
                sigma_model,
                &mut rng,
            )
            .unwrap();
            let guidance = Guidance {
                model: &obs,
                data: &y[..],
                variance,
            };
            ensemble = reverse_sample(&preds, Some(guidance), j, None, &sched, &mut rng).unwrap();
            let mean = analysis_mean(&ensemble);
            kf.step(y);
            err_sq_sum += ((mean[0] - kf.mean[0]).powi(2) + (mean[1] - kf.mean[1]).powi(2)) / 2.0;
        }
        let rmse = (err_sq_sum / n_steps as f64).sqrt();
        assert!(rmse < 0.1, "time-averaged RMSE vs exact Kalman: {rmse}");
    }
}
