//! Dictionary learning by stochastic windowing: each iteration samples a
//! small batch of windows from the corpus, sparse-codes them inexactly,
//! optionally trims high-error patches, and takes one projected-gradient
//! step on the dictionary. Codes are treated as constants for the step (no
//! differentiation through the solver).

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvOperator, ZSpectrum};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{stream, Stage};
use crate::robust::{
    build_mask, compute_threshold, patch_errors, trimmed_objective, OutlierMask, PatchErrorSeries,
    ThresholdRule,
};
use crate::sparse;
use crate::tensor::{
    extract_window, step_dictionary, ActivationMap, DictGrad, Dictionary, SignalTensor,
    WindowSpec,
};

/// How the dictionary step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Stochastic line search: backtracking with a sufficient-decrease test
    /// on the batch loss, search ceiling doubled after every accepted step.
    Sls,
    /// Adaptive moment estimation with bias correction.
    AdaptiveMoments,
}

/// How the initial dictionary is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Atoms are random atom-length chunks of the corpus, normalized.
    DataWindows,
    /// Atoms are white Gaussian noise, normalized.
    Gaussian,
}

/// Training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_atoms: usize,
    pub atom_len: usize,
    pub n_iter: usize,
    /// Windows sampled per iteration.
    pub n_windows: usize,
    /// Window width in samples.
    pub window_width: usize,
    /// Sparse-coding iterations per window (inexact codes are fine).
    pub n_fista: usize,
    /// Penalty as a fraction of the estimated `lambda_max` of the data.
    pub lambda_frac: f64,
    /// Inline trimming rule; `None` disables trimming.
    pub threshold: Option<ThresholdRule>,
    /// First iteration at which trimming is applied.
    pub trim_start: usize,
    /// Patch width for trimming; `None` means `atom_len`.
    pub patch_width: Option<usize>,
    pub optimizer: OptimizerKind,
    pub init: InitKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_atoms: 2,
            atom_len: 64,
            n_iter: 150,
            n_windows: 8,
            window_width: 640,
            n_fista: 50,
            lambda_frac: 0.1,
            threshold: None,
            trim_start: 0,
            patch_width: None,
            optimizer: OptimizerKind::Sls,
            init: InitKind::DataWindows,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_patch_width(&self) -> usize {
        self.patch_width.unwrap_or(self.atom_len)
    }

    pub fn validate(&self, corpus: &[SignalTensor]) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::InsufficientData("training corpus is empty".into()));
        }
        let channels = corpus[0].channels();
        if corpus.iter().any(|x| x.channels() != channels) {
            return Err(Error::DimensionMismatch(
                "corpus signals have differing channel counts".into(),
            ));
        }
        if self.n_atoms == 0 || self.atom_len < 2 {
            return Err(Error::Config(format!(
                "need n_atoms >= 1 and atom_len >= 2, got {} and {}",
                self.n_atoms, self.atom_len
            )));
        }
        if self.n_iter == 0 || self.n_windows == 0 || self.n_fista == 0 {
            return Err(Error::Config(
                "n_iter, n_windows and n_fista must all be positive".into(),
            ));
        }
        if self.window_width < self.atom_len {
            return Err(Error::Config(format!(
                "window width {} is below atom length {}",
                self.window_width, self.atom_len
            )));
        }
        if let Some(short) = corpus.iter().find(|x| x.length() < self.window_width) {
            return Err(Error::Config(format!(
                "window width {} exceeds a corpus signal of length {}",
                self.window_width,
                short.length()
            )));
        }
        if !self.lambda_frac.is_finite() || self.lambda_frac <= 0.0 {
            return Err(Error::Config(format!(
                "lambda_frac must be finite and > 0, got {}",
                self.lambda_frac
            )));
        }
        let w = self.effective_patch_width();
        if w == 0 || w > self.window_width {
            return Err(Error::Config(format!(
                "patch width {w} invalid for window width {}",
                self.window_width
            )));
        }
        if let Some(rule) = &self.threshold {
            rule.validate()?;
        }
        Ok(())
    }
}

/// One training iteration's diagnostics.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iteration: usize,
    /// Batch loss over inlier patches (the quantity being descended).
    pub trimmed_objective: f64,
    /// Batch loss with no trimming, for monitoring.
    pub untrimmed_objective: f64,
    pub step_size: f64,
    /// Fraction of batch patches trimmed this iteration.
    pub trimmed_fraction: f64,
    /// Recovery score against a reference dictionary, when one was given.
    pub recovery_score: Option<f64>,
    /// Wall-clock duration of the iteration (not persisted; reruns must be
    /// byte-identical).
    pub wall_ms: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    pub dictionary: Dictionary,
    /// Final penalty actually used.
    pub lambda: f64,
    /// Set when training aborted on a numeric failure; `records` then holds
    /// the iterations completed before the abort.
    pub failure: Option<String>,
}

/// `n_windows` uniformly random windows of `width` over `[0, signal_len)`.
pub fn sample_windows(
    signal_len: usize,
    n_windows: usize,
    width: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<WindowSpec>> {
    if width == 0 || width > signal_len {
        return Err(Error::OutOfRange(format!(
            "window width {width} invalid for signal length {signal_len}"
        )));
    }
    Ok((0..n_windows)
        .map(|_| WindowSpec { start: rng.random_range(0..=signal_len - width), width })
        .collect())
}

fn sample_corpus_windows(
    corpus: &[SignalTensor],
    n_windows: usize,
    width: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<(usize, WindowSpec)> {
    (0..n_windows)
        .map(|_| {
            let sig = rng.random_range(0..corpus.len());
            let start = rng.random_range(0..=corpus[sig].length() - width);
            (sig, WindowSpec { start, width })
        })
        .collect()
}

/// Random initial dictionary with unit-norm atoms.
pub fn init_dictionary(
    corpus: &[SignalTensor],
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Dictionary> {
    let p = corpus[0].channels();
    let l = cfg.atom_len;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gaussian_atom = |rng: &mut ChaCha12Rng| -> Vec<f64> {
        loop {
            let mut block: Vec<f64> = (0..p * l).map(|_| normal.sample(rng)).collect();
            let ns: f64 = block.iter().map(|v| v * v).sum();
            if ns > 1e-24 {
                let inv = 1.0 / ns.sqrt();
                block.iter_mut().for_each(|v| *v *= inv);
                return block;
            }
        }
    };
    let mut data = Vec::with_capacity(cfg.n_atoms * p * l);
    for _ in 0..cfg.n_atoms {
        match cfg.init {
            InitKind::Gaussian => data.extend(gaussian_atom(rng)),
            InitKind::DataWindows => {
                // mostly-zero corpora (stage-two residuals) can hand out
                // dead chunks; resample a few times, then fall back
                let mut chosen = None;
                for _ in 0..100 {
                    let sig = rng.random_range(0..corpus.len());
                    let start = rng.random_range(0..=corpus[sig].length() - l);
                    let x = &corpus[sig];
                    let mut block = Vec::with_capacity(p * l);
                    for ch in 0..p {
                        block.extend_from_slice(&x.row(ch)[start..start + l]);
                    }
                    let ns: f64 = block.iter().map(|v| v * v).sum();
                    if ns > 1e-12 {
                        let inv = 1.0 / ns.sqrt();
                        block.iter_mut().for_each(|v| *v *= inv);
                        chosen = Some(block);
                        break;
                    }
                }
                data.extend(chosen.unwrap_or_else(|| gaussian_atom(rng)));
            }
        }
    }
    Dictionary::new_projected(cfg.n_atoms, p, l, data)
}

/// Gradient of the trimmed batch data term with respect to the dictionary:
/// for each window, the masked residual `(D * z - x)` correlated with `z`,
/// scaled by the window's `1 / patch_width`, summed over windows.
pub fn dictionary_gradient(
    d: &Dictionary,
    windows: &[(&SignalTensor, &ActivationMap, &OutlierMask)],
) -> Result<DictGrad> {
    let mut total = DictGrad::zeros_like(d);
    for (x, z, mask) in windows {
        let recon = conv::convolve(d, z)?;
        if recon.length() != x.length() {
            return Err(Error::DimensionMismatch(format!(
                "activations code {} samples but window has {}",
                recon.length(),
                x.length()
            )));
        }
        // masked_residual gives x - recon on inlier patches; the gradient
        // needs recon - x, hence the negated accumulation
        let res = crate::robust::masked_residual(x, &recon, mask)?;
        let g = conv::correlate(&res, z)?;
        let scale = 1.0 / mask.patch_width() as f64;
        for (t, gv) in total.data.iter_mut().zip(&g.data) {
            *t -= scale * gv;
        }
    }
    Ok(total)
}

struct EncodedWindow {
    x: SignalTensor,
    z: ActivationMap,
    zspec: ZSpectrum,
    recon: Vec<f64>,
    l1: f64,
    errors: PatchErrorSeries,
}

fn batch_loss(
    cand: &Dictionary,
    batch: &[EncodedWindow],
    masks: &[OutlierMask],
    lambda: f64,
    width: usize,
) -> Result<f64> {
    let op = ConvOperator::new(cand, width)?;
    let p = cand.channels();
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|(w, mask)| {
            let mut recon = vec![0.0; p * width];
            op.forward_cached(w.z.data(), &w.zspec, &mut recon);
            let recon = SignalTensor::new(p, width, recon)?;
            trimmed_objective(&w.x, &recon, mask, w.l1, lambda)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total)
}

/// Search state for the stochastic line search: the ceiling the next
/// backtracking pass starts from.
#[derive(Debug, Clone)]
pub struct SlsState {
    pub alpha_max: f64,
}

impl Default for SlsState {
    fn default() -> Self {
        SlsState { alpha_max: 1.0 }
    }
}

const SLS_SUFFICIENT_DECREASE: f64 = 0.1;
const SLS_MAX_HALVINGS: usize = 30;
const SLS_ALPHA_CAP: f64 = 10.0;

fn sls_step(
    d: &Dictionary,
    grad: &DictGrad,
    batch: &[EncodedWindow],
    masks: &[OutlierMask],
    current_loss: f64,
    lambda: f64,
    width: usize,
    state: &mut SlsState,
) -> Result<(Dictionary, f64)> {
    let gnorm2 = grad.norm_sq();
    if gnorm2 == 0.0 {
        return Ok((d.clone(), state.alpha_max));
    }
    let mut alpha = state.alpha_max;
    for _ in 0..=SLS_MAX_HALVINGS {
        let cand = step_dictionary(d, grad, alpha)?;
        let loss = batch_loss(&cand, batch, masks, lambda, width)?;
        if loss <= current_loss - SLS_SUFFICIENT_DECREASE * alpha * gnorm2 {
            state.alpha_max = (2.0 * alpha).min(SLS_ALPHA_CAP);
            return Ok((cand, alpha));
        }
        alpha *= 0.5;
    }
    // no admissible step; keep the dictionary and flag with a zero step
    Ok((d.clone(), 0.0))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_STEP: f64 = 1e-2;
const ADAM_EPS: f64 = 1e-8;

fn adam_step(d: &Dictionary, grad: &DictGrad, state: &mut AdamState) -> Result<(Dictionary, f64)> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let mut delta = DictGrad::zeros_like(d);
    for i in 0..grad.data.len() {
        let g = grad.data[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        delta.data[i] = mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok((step_dictionary(d, &delta, ADAM_STEP)?, ADAM_STEP))
}

/// Largest sliding atom-length L2 norm of the signal: the smallest penalty
/// for which the zero code is optimal when the atom itself is free over the
/// unit ball (the best atom at position t is the normalized chunk there).
/// Anchoring lambda on this rather than on correlations with the initial
/// atoms keeps it independent of how lucky the initialization was.
fn sliding_norm_max(x: &SignalTensor, atom_len: usize) -> f64 {
    let t = x.length();
    if t < atom_len {
        return 0.0;
    }
    let mut best = 0.0f64;
    let mut sq = 0.0f64;
    // running sum of squares across channels for the window [s, s+atom_len)
    for s in 0..t {
        for ch in 0..x.channels() {
            let row = &x.data()[ch * t..(ch + 1) * t];
            sq += row[s] * row[s];
            if s >= atom_len {
                sq -= row[s - atom_len] * row[s - atom_len];
            }
        }
        if s + 1 >= atom_len {
            best = best.max(sq);
        }
    }
    best.max(0.0).sqrt()
}

fn resolve_lambda(corpus: &[SignalTensor], cfg: &TrainConfig) -> Result<f64> {
    let mut rng = stream(cfg.seed, Stage::LambdaBatch, 0);
    let picks = sample_corpus_windows(corpus, cfg.n_windows, cfg.window_width, &mut rng);
    let mut lmax = 0.0f64;
    for (sig, w) in picks {
        let x = extract_window(&corpus[sig], &w)?;
        lmax = lmax.max(sliding_norm_max(&x, cfg.atom_len));
    }
    if lmax == 0.0 {
        // Mostly-zero inputs (e.g. masked residuals) can make every sampled
        // window empty; fall back to scanning the whole corpus.
        for x in corpus {
            lmax = lmax.max(sliding_norm_max(x, cfg.atom_len));
        }
    }
    Ok(cfg.lambda_frac * lmax)
}

fn masked_lambda_anchor(batch: &[EncodedWindow], masks: &[OutlierMask], atom_len: usize) -> f64 {
    let mut lmax = 0.0f64;
    for (w, mask) in batch.iter().zip(masks) {
        let mut data = w.x.data().to_vec();
        let t = w.x.length();
        for (i, &flagged) in mask.flags().iter().enumerate() {
            if flagged {
                let (s, e) = mask.patch_bounds(i);
                for ch in 0..w.x.channels() {
                    data[ch * t + s..ch * t + e].fill(0.0);
                }
            }
        }
        let masked = SignalTensor::new(w.x.channels(), t, data).expect("masked window shape");
        lmax = lmax.max(sliding_norm_max(&masked, atom_len));
    }
    lmax
}

/// Learns a dictionary from the corpus. When `reference` is given, each
/// iteration records the recovery score of the current dictionary against
/// it.
///
/// Numeric failures mid-run (divergence, non-finite loss) abort the loop
/// and return the partial report with `failure` set; configuration and
/// shape errors fail eagerly.
pub fn train(
    corpus: &[SignalTensor],
    cfg: &TrainConfig,
    reference: Option<&Dictionary>,
) -> Result<TrainReport> {
    train_impl(corpus, cfg, reference, None)
}

/// Like [`train`] but with the penalty pinned to `lambda` instead of the
/// `lambda_frac` estimate; the trimming-time re-estimate is skipped too.
/// Meant for comparisons across settings that must share one objective.
pub fn train_with_lambda(
    corpus: &[SignalTensor],
    cfg: &TrainConfig,
    lambda: f64,
    reference: Option<&Dictionary>,
) -> Result<TrainReport> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "fixed lambda must be finite and >= 0, got {lambda}"
        )));
    }
    train_impl(corpus, cfg, reference, Some(lambda))
}

fn train_impl(
    corpus: &[SignalTensor],
    cfg: &TrainConfig,
    reference: Option<&Dictionary>,
    fixed_lambda: Option<f64>,
) -> Result<TrainReport> {
    cfg.validate(corpus)?;
    let width = cfg.window_width;
    let patch_w = cfg.effective_patch_width();
    let mut init_rng = stream(cfg.seed, Stage::DictInit, 0);
    let mut dict = init_dictionary(corpus, cfg, &mut init_rng)?;
    let mut lambda = match fixed_lambda {
        Some(l) => l,
        None => resolve_lambda(corpus, cfg)?,
    };
    let mut sls = SlsState::default();
    let mut adam = AdamState {
        m: vec![0.0; dict.data().len()],
        v: vec![0.0; dict.data().len()],
        t: 0,
    };
    let mut records: Vec<IterRecord> = Vec::with_capacity(cfg.n_iter);
    let mut lambda_retuned = fixed_lambda.is_some();

    let fail = |records: Vec<IterRecord>, dict: Dictionary, lambda: f64, msg: String| {
        Ok(TrainReport { records, dictionary: dict, lambda, failure: Some(msg) })
    };

    for iter in 0..cfg.n_iter {
        let t0 = Instant::now();
        let mut win_rng = stream(cfg.seed, Stage::WindowBatch, iter as u64);
        let picks = sample_corpus_windows(corpus, cfg.n_windows, width, &mut win_rng);

        let op = ConvOperator::new(&dict, width)?;
        let opnorm = conv::operator_norm_sq(&dict, width)?;
        let step = if opnorm > 0.0 { 1.0 / opnorm } else { 1.0 };

        let encoded: Vec<Result<EncodedWindow>> = picks
            .par_iter()
            .map(|(sig, w)| {
                let x = extract_window(&corpus[*sig], w)?;
                let z = sparse::fista_with_op(
                    &op,
                    dict.n_atoms(),
                    &x,
                    lambda,
                    cfg.n_fista,
                    step,
                    None,
                )?;
                let mut recon = vec![0.0; x.channels() * width];
                let zspec = op.z_spectrum(z.data());
                op.forward_cached(z.data(), &zspec, &mut recon);
                let recon_t = SignalTensor::new(x.channels(), width, recon.clone())?;
                let errors = patch_errors(&x, &recon_t, patch_w)?;
                let l1 = z.l1_norm();
                Ok(EncodedWindow { x, z, zspec, recon, l1, errors })
            })
            .collect();
        let mut batch = Vec::with_capacity(encoded.len());
        let mut batch_err = None;
        for e in encoded {
            match e {
                Ok(w) => batch.push(w),
                Err(err) => {
                    batch_err = Some(err);
                    break;
                }
            }
        }
        if let Some(err) = batch_err {
            return fail(records, dict, lambda, format!("iteration {iter}: {err}"));
        }

        let trimming = cfg.threshold.is_some() && iter >= cfg.trim_start;
        let (masks, trimmed_fraction) = if trimming {
            let rule = cfg.threshold.as_ref().expect("trimming rule");
            let pooled: Vec<f64> = batch
                .iter()
                .flat_map(|w| w.errors.errors().iter().copied())
                .collect();
            let beta = match compute_threshold(&pooled, rule) {
                Ok(b) => b,
                Err(err) => {
                    return fail(records, dict, lambda, format!("iteration {iter}: {err}"))
                }
            };
            let masks: Vec<OutlierMask> =
                batch.iter().map(|w| build_mask(&w.errors, beta)).collect();
            let flagged: usize = masks.iter().map(|m| m.n_flagged()).sum();
            (masks, flagged as f64 / pooled.len() as f64)
        } else {
            (
                (0..batch.len())
                    .map(|_| OutlierMask::all_inlier(width, patch_w))
                    .collect(),
                0.0,
            )
        };

        // gradient of the trimmed batch loss at the current dictionary
        let grads: Vec<Result<DictGrad>> = batch
            .par_iter()
            .zip(masks.par_iter())
            .map(|(w, mask)| {
                let recon = SignalTensor::new(w.x.channels(), width, w.recon.clone())?;
                let res = crate::robust::masked_residual(&w.x, &recon, mask)?;
                conv::correlate(&res, &w.z)
            })
            .collect();
        let mut grad = DictGrad::zeros_like(&dict);
        let scale = 1.0 / patch_w as f64;
        for g in grads {
            let g = match g {
                Ok(g) => g,
                Err(err) => {
                    return fail(records, dict, lambda, format!("iteration {iter}: {err}"))
                }
            };
            for (t, gv) in grad.data.iter_mut().zip(&g.data) {
                *t -= scale * gv;
            }
        }

        let mut trimmed_loss = 0.0;
        let mut untrimmed_loss = 0.0;
        for (w, mask) in batch.iter().zip(&masks) {
            trimmed_loss +=
                w.errors
                    .errors()
                    .iter()
                    .zip(mask.flags())
                    .filter(|(_, f)| !**f)
                    .map(|(e, _)| e)
                    .sum::<f64>()
                    * scale
                    + lambda * w.l1;
            untrimmed_loss += w.errors.errors().iter().sum::<f64>() * scale + lambda * w.l1;
        }
        if !trimmed_loss.is_finite() {
            return fail(
                records,
                dict,
                lambda,
                format!("iteration {iter}: batch loss is not finite"),
            );
        }

        let (next, alpha) = match cfg.optimizer {
            OptimizerKind::Sls => {
                match sls_step(&dict, &grad, &batch, &masks, trimmed_loss, lambda, width, &mut sls)
                {
                    Ok(r) => r,
                    Err(err) => {
                        return fail(records, dict, lambda, format!("iteration {iter}: {err}"))
                    }
                }
            }
            OptimizerKind::AdaptiveMoments => match adam_step(&dict, &grad, &mut adam) {
                Ok(r) => r,
                Err(err) => {
                    return fail(records, dict, lambda, format!("iteration {iter}: {err}"))
                }
            },
        };

        // with the first trimmed batch in hand, re-estimate lambda from the
        // masked data once: artifacts inflate the sliding-norm anchor and
        // with it the penalty
        if trimming && !lambda_retuned {
            lambda = cfg.lambda_frac * masked_lambda_anchor(&batch, &masks, cfg.atom_len);
            lambda_retuned = true;
        }

        dict = next;
        let recovery = match reference {
            Some(truth) => Some(metrics::recovery_score(truth, &dict)?.score),
            None => None,
        };
        records.push(IterRecord {
            iteration: iter,
            trimmed_objective: trimmed_loss,
            untrimmed_objective: untrimmed_loss,
            step_size: alpha,
            trimmed_fraction,
            recovery_score: recovery,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(TrainReport { records, dictionary: dict, lambda, failure: None })
}

/// The two-pattern segment population behind the trimming analysis: unit
/// atoms `d_a` (common) and `d_b` (rare, frequency `rho`), segments
/// `x = d_i + noise`, coded with a single unit atom `d` and one coefficient.
#[derive(Debug, Clone)]
pub struct TwoPatternModel {
    d_a: Vec<f64>,
    d_b: Vec<f64>,
    pub rho: f64,
    pub sigma: f64,
    pub lambda: f64,
}

/// Optimal single-coefficient code for a segment whose atom correlates
/// with the coding atom at `correlation`, given the noise-atom inner
/// product: `max(correlation + noise_dot - lambda, 0)`.
pub fn analytic_code(correlation: f64, noise_dot: f64, lambda: f64) -> f64 {
    (correlation + noise_dot - lambda).max(0.0)
}

impl TwoPatternModel {
    pub fn new(d_a: Vec<f64>, d_b: Vec<f64>, rho: f64, sigma: f64, lambda: f64) -> Result<Self> {
        if d_a.len() != d_b.len() || d_a.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "atoms must share a positive length, got {} and {}",
                d_a.len(),
                d_b.len()
            )));
        }
        for (name, atom) in [("d_a", &d_a), ("d_b", &d_b)] {
            let ns: f64 = atom.iter().map(|v| v * v).sum();
            if (ns - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} must be unit norm, got |.|^2 = {ns}")));
            }
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
        }
        if sigma < 0.0 || lambda < 0.0 {
            return Err(Error::Config("sigma and lambda must be >= 0".into()));
        }
        Ok(TwoPatternModel { d_a, d_b, rho, sigma, lambda })
    }

    pub fn atom_len(&self) -> usize {
        self.d_a.len()
    }

    pub fn d_a(&self) -> &[f64] {
        &self.d_a
    }

    pub fn d_b(&self) -> &[f64] {
        &self.d_b
    }

    /// `<d_a, d_b>`.
    pub fn correlation(&self) -> f64 {
        self.d_a.iter().zip(&self.d_b).map(|(a, b)| a * b).sum()
    }

    fn branch_loss(&self, c: f64) -> f64 {
        let l = self.atom_len() as f64;
        let s2 = self.sigma * self.sigma;
        if c > self.lambda {
            // envelope of the coded segment, exact for margins well above
            // the noise scale
            0.5 * (1.0 - (c - self.lambda) * (c - self.lambda) + (l - 1.0) * s2)
        } else {
            // code stays zero; the loss is the raw segment energy
            0.5 * (1.0 + l * s2)
        }
    }

    fn branch_gradient(&self, c: f64, d: &[f64], atom: &[f64], out: &mut [f64], weight: f64) {
        if c > self.lambda {
            // noise second moments cancel between the quadratic and cross
            // terms, leaving the noiseless expression
            let cm = c - self.lambda;
            for (o, (dv, av)) in out.iter_mut().zip(d.iter().zip(atom)) {
                *o += weight * (cm * cm * dv - cm * av);
            }
        }
    }

    /// Expected coding loss of a population segment against atom `d`.
    pub fn expected_loss(&self, d: &[f64]) -> Result<f64> {
        let (c_a, c_b) = self.correlations_with(d)?;
        Ok((1.0 - self.rho) * self.branch_loss(c_a) + self.rho * self.branch_loss(c_b))
    }

    /// Expected gradient of the coding loss with respect to `d`.
    pub fn expected_gradient(&self, d: &[f64]) -> Result<Vec<f64>> {
        let (c_a, c_b) = self.correlations_with(d)?;
        let mut out = vec![0.0; d.len()];
        self.branch_gradient(c_a, d, &self.d_a, &mut out, 1.0 - self.rho);
        self.branch_gradient(c_b, d, &self.d_b, &mut out, self.rho);
        Ok(out)
    }

    fn correlations_with(&self, d: &[f64]) -> Result<(f64, f64)> {
        if d.len() != self.d_a.len() {
            return Err(Error::DimensionMismatch(format!(
                "query atom has length {}, model atoms have {}",
                d.len(),
                self.d_a.len()
            )));
        }
        let c_a = self.d_a.iter().zip(d).map(|(a, b)| a * b).sum();
        let c_b = self.d_b.iter().zip(d).map(|(a, b)| a * b).sum();
        Ok((c_a, c_b))
    }

    /// Draws one segment; returns it and whether it came from the rare
    /// branch.
    pub fn sample_segment(&self, rng: &mut ChaCha12Rng) -> (Vec<f64>, bool) {
        let rare = rng.random_range(0.0..1.0) < self.rho;
        let atom = if rare { &self.d_b } else { &self.d_a };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let seg = atom
            .iter()
            .map(|a| a + self.sigma * normal.sample(rng))
            .collect();
        (seg, rare)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synthesize, SimSpec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let ns: f64 = v.iter().map(|x| x * x).sum();
        let inv = 1.0 / ns.sqrt();
        v.into_iter().map(|x| x * inv).collect()
    }

    fn orthogonal_pair(l: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; l];
        let mut b = vec![0.0; l];
        for i in 0..l {
            a[i] = ((i + 1) as f64 * 0.37).sin();
        }
        let a = unit(a);
        for i in 0..l {
            b[i] = ((i + 1) as f64 * 0.91).cos();
        }
        let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        for i in 0..l {
            b[i] -= proj * a[i];
        }
        (a.clone(), unit(b))
    }

    fn mixed_pair(l: usize, c: f64) -> (Vec<f64>, Vec<f64>) {
        let (a, e) = orthogonal_pair(l);
        let b: Vec<f64> =
            a.iter().zip(&e).map(|(av, ev)| c * av + (1.0 - c * c).sqrt() * ev).collect();
        (a, b)
    }

    #[test]
    fn window_sampling_stays_in_bounds() {
        let mut rng = stream(1, Stage::WindowBatch, 0);
        let ws = sample_windows(100, 50, 30, &mut rng).unwrap();
        assert_eq!(ws.len(), 50);
        for w in &ws {
            assert!(w.start + w.width <= 100);
        }
        let ws = sample_windows(30, 10, 30, &mut rng).unwrap();
        assert!(ws.iter().all(|w| w.start == 0));
        assert!(sample_windows(10, 1, 20, &mut rng).is_err());
    }

    #[test]
    fn gradient_at_exact_solution_is_zero() {
        // x generated exactly by (d, z), no trimming: residual is zero
        let spec = SimSpec { length: 600, noise_sigma: 0.0, n_signals: 1, ..Default::default() };
        let (signals, truth) = synthesize(&spec).unwrap();
        let mask = OutlierMask::all_inlier(600, 64);
        let g = dictionary_gradient(
            &truth.dictionary,
            &[(&signals[0], &truth.activations[0], &mask)],
        )
        .unwrap();
        assert!(g.norm_sq() < 1e-20);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = SimSpec {
            length: 400,
            atom_len: 16,
            n_signals: 1,
            sparsity: 0.01,
            ..Default::default()
        };
        let (signals, truth) = synthesize(&spec).unwrap();
        let x = &signals[0];
        let z = &truth.activations[0];
        // evaluate strictly inside the ball so perturbations stay feasible
        let d = Dictionary::new(
            truth.dictionary.n_atoms(),
            truth.dictionary.channels(),
            truth.dictionary.atom_len(),
            truth.dictionary.data().iter().map(|v| 0.9 * v).collect(),
        )
        .unwrap();
        let mask = OutlierMask::all_inlier(400, 16);
        let g = dictionary_gradient(&d, &[(x, z, &mask)]).unwrap();
        let loss = |dd: &Dictionary| -> f64 {
            let recon = conv::convolve(dd, z).unwrap();
            trimmed_objective(x, &recon, &mask, z.l1_norm(), 0.0).unwrap()
        };
        let h = 1e-6;
        for idx in [0usize, 7, 40, 63] {
            let mut plus = d.data().to_vec();
            plus[idx] += h;
            let mut minus = d.data().to_vec();
            minus[idx] -= h;
            let dp = Dictionary::new(d.n_atoms(), d.channels(), d.atom_len(), plus).unwrap();
            let dm = Dictionary::new(d.n_atoms(), d.channels(), d.atom_len(), minus).unwrap();
            let fd = (loss(&dp) - loss(&dm)) / (2.0 * h);
            assert_relative_eq!(g.data[idx], fd, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn sls_step_near_exact_on_quadratic() {
        // single window, fixed z, lambda 0: the loss is exactly quadratic
        // in d, so the first accepted alpha from a halving search must land
        // in (0.9, 1.8] times the exact line minimizer. Codes are scaled up
        // versus the generating amplitudes so the least-squares atom (and
        // the whole search segment) stays strictly inside the unit ball.
        let spec = SimSpec {
            length: 500,
            atom_len: 16,
            n_atoms: 1,
            channels: 1,
            n_signals: 1,
            sparsity: 0.05,
            noise_sigma: 0.0,
            amplitude_range: (0.5, 0.5),
            ..Default::default()
        };
        let (signals, truth) = synthesize(&spec).unwrap();
        let x = extract_window(&signals[0], &WindowSpec { start: 0, width: 500 }).unwrap();
        let zt = &truth.activations[0];
        assert!(zt.l1_norm() > 0.0);
        let z = ActivationMap::new(
            1,
            zt.valid_len(),
            zt.data().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let d0 = Dictionary::new(
            1,
            1,
            16,
            truth.dictionary.data().iter().map(|v| 0.4 * v).collect(),
        )
        .unwrap();
        let op = ConvOperator::new(&d0, 500).unwrap();
        let zspec = op.z_spectrum(z.data());
        let mut recon = vec![0.0; 500];
        op.forward_cached(z.data(), &zspec, &mut recon);
        let recon_t = SignalTensor::new(1, 500, recon.clone()).unwrap();
        let errors = patch_errors(&x, &recon_t, 16).unwrap();
        let mask = OutlierMask::all_inlier(500, 16);
        let batch = vec![EncodedWindow {
            x: x.clone(),
            z: z.clone(),
            zspec,
            recon,
            l1: z.l1_norm(),
            errors,
        }];
        let masks = vec![mask.clone()];
        let grad = dictionary_gradient(&d0, &[(&x, &z, &mask)]).unwrap();
        let loss0 = batch_loss(&d0, &batch, &masks, 0.0, 500).unwrap();
        let mut state = SlsState { alpha_max: 10.0 };
        let (d1, alpha) =
            sls_step(&d0, &grad, &batch, &masks, loss0, 0.0, 500, &mut state).unwrap();
        assert!(alpha > 0.0, "line search failed outright");
        assert!(d1.atom_norm_sq(0) < 1.0, "projection interfered with the step");
        // exact minimizer along -grad: alpha* = |g|^2 / (g' H g); evaluate
        // H on the unit-normalized gradient so it passes the ball check
        let gnorm = grad.norm_sq().sqrt();
        let gunit: Vec<f64> = grad.data.iter().map(|v| v / gnorm).collect();
        let gz = conv::convolve(&Dictionary::new(1, 1, 16, gunit.clone()).unwrap(), &z).unwrap();
        let hg = conv::correlate(&gz, &z).unwrap();
        let ghg_unit: f64 =
            gunit.iter().zip(&hg.data).map(|(a, b)| a * b).sum::<f64>() / 16.0;
        let alpha_star = 1.0 / ghg_unit;
        assert!(
            alpha > 0.9 * alpha_star && alpha <= 1.8 * alpha_star,
            "alpha {alpha} vs exact {alpha_star}"
        );
        let loss1 = batch_loss(&d1, &batch, &masks, 0.0, 500).unwrap();
        assert!(loss1 < loss0);
    }

    #[test]
    fn train_learns_the_generating_atoms() {
        let spec = SimSpec {
            length: 4000,
            atom_len: 32,
            n_signals: 2,
            sparsity: 0.006,
            noise_sigma: 0.05,
            amplitude_range: (1.0, 2.0),
            ..Default::default()
        };
        let (signals, truth) = synthesize(&spec).unwrap();
        let cfg = TrainConfig {
            n_atoms: 2,
            atom_len: 32,
            n_iter: 60,
            n_windows: 8,
            window_width: 320,
            n_fista: 30,
            seed: 3,
            ..Default::default()
        };
        let report = train(&signals, &cfg, Some(&truth.common_dictionary())).unwrap();
        assert!(report.failure.is_none());
        assert_eq!(report.records.len(), 60);
        assert!(report.records.iter().all(|r| r.recovery_score.is_some()));
        let first = report.records[0].recovery_score.unwrap();
        let last = report.records.last().unwrap().recovery_score.unwrap();
        assert!(
            last > 0.8 && last > first + 0.1,
            "recovery did not improve: {first} -> {last}"
        );
        for k in 0..report.dictionary.n_atoms() {
            assert!(report.dictionary.atom_norm_sq(k) <= 1.0 + crate::tensor::BALL_TOL);
        }
        assert!(report.records.iter().any(|r| r.step_size > 0.0));
    }

    #[test]
    fn train_is_deterministic_across_thread_counts() {
        let spec = SimSpec { length: 2000, atom_len: 16, n_signals: 1, ..Default::default() };
        let (signals, _) = synthesize(&spec).unwrap();
        let cfg = TrainConfig {
            n_atoms: 2,
            atom_len: 16,
            n_iter: 10,
            n_windows: 4,
            window_width: 160,
            n_fista: 20,
            threshold: Some(ThresholdRule::mad(3.5)),
            seed: 9,
            ..Default::default()
        };
        let a = train(&signals, &cfg, None).unwrap();
        let b = train(&signals, &cfg, None).unwrap();
        assert_eq!(a.dictionary.data(), b.dictionary.data());
        assert_eq!(a.lambda, b.lambda);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.trimmed_objective, rb.trimmed_objective);
            assert_eq!(ra.step_size, rb.step_size);
        }
    }

    #[test]
    fn trimming_reports_flagged_fraction() {
        let spec = SimSpec {
            length: 3000,
            atom_len: 16,
            n_signals: 1,
            rare: Some(crate::datagen::RareSpec {
                artifact_density: 0.003,
                artifact_amplitude: 10.0,
                ..Default::default()
            }),
            ..Default::default()
        };
        let (signals, _) = synthesize(&spec).unwrap();
        let cfg = TrainConfig {
            n_atoms: 2,
            atom_len: 16,
            n_iter: 8,
            n_windows: 6,
            window_width: 240,
            n_fista: 20,
            threshold: Some(ThresholdRule::quantile(0.2)),
            seed: 4,
            ..Default::default()
        };
        let report = train(&signals, &cfg, None).unwrap();
        assert!(report.records.iter().any(|r| r.trimmed_fraction > 0.0));
        assert!(report
            .records
            .iter()
            .all(|r| r.trimmed_objective <= r.untrimmed_objective + 1e-12));
    }

    #[test]
    fn sliding_norm_max_hand_examples() {
        let x = SignalTensor::new(1, 4, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        // windows of squared sums: 5, 8, 5
        assert_relative_eq!(sliding_norm_max(&x, 2), 8.0f64.sqrt(), epsilon = 1e-15);
        let x = SignalTensor::new(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        assert_relative_eq!(sliding_norm_max(&x, 2), 5.0, epsilon = 1e-15);
        let short = SignalTensor::new(1, 3, vec![1.0; 3]).unwrap();
        assert_eq!(sliding_norm_max(&short, 5), 0.0);
    }

    #[test]
    fn lambda_resolution_falls_back_when_sampled_windows_are_empty() {
        // Signal is zero except for one short burst, so the lambda batch
        // (seed 3 here) misses it and the full-corpus scan must kick in.
        let mut data = vec![0.0; 2000];
        for (i, v) in data.iter_mut().skip(1000).take(32).enumerate() {
            *v = (0.7 * i as f64).sin();
        }
        let x = SignalTensor::new(1, 2000, data).unwrap();
        let cfg = TrainConfig {
            n_atoms: 1,
            atom_len: 32,
            n_iter: 1,
            n_windows: 2,
            window_width: 64,
            n_fista: 5,
            seed: 3,
            ..Default::default()
        };
        let report = train(&[x], &cfg, None).unwrap();
        assert!(report.lambda > 0.0, "lambda should anchor to the burst, got 0");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let spec = SimSpec { length: 1000, n_signals: 1, ..Default::default() };
        let (signals, _) = synthesize(&spec).unwrap();
        let bad_width = TrainConfig { window_width: 32, atom_len: 64, ..Default::default() };
        assert!(train(&signals, &bad_width, None).is_err());
        let too_long = TrainConfig { window_width: 2000, ..Default::default() };
        assert!(train(&signals, &too_long, None).is_err());
        let bad_lambda = TrainConfig { lambda_frac: 0.0, ..Default::default() };
        assert!(train(&signals, &bad_lambda, None).is_err());
        assert!(train(&[], &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn analytic_code_branches() {
        assert_relative_eq!(analytic_code(0.8, 0.0, 0.2), 0.6, epsilon = 1e-15);
        assert_eq!(analytic_code(0.1, 0.0, 0.2), 0.0);
        assert_eq!(analytic_code(-0.3, 0.0, 0.2), 0.0);
        assert_relative_eq!(analytic_code(0.1, 0.3, 0.2), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn expected_gradient_noiseless_single_pattern() {
        // d = d_a, rho = 0, sigma = 0: gradient is -lambda (1 - lambda) d_a
        let (a, b) = orthogonal_pair(16);
        let lambda = 0.2;
        let m = TwoPatternModel::new(a.clone(), b, 0.0, 0.0, lambda).unwrap();
        let g = m.expected_gradient(&a).unwrap();
        for (gv, av) in g.iter().zip(&a) {
            assert_relative_eq!(*gv, -lambda * (1.0 - lambda) * av, epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_gradient_has_rare_component() {
        // rho > 0 and c_b above lambda: the gradient picks up a d_b term
        // with off-axis magnitude rho (c_b - lambda) sqrt(1 - c_b^2)
        let c_b = 0.5;
        let (a, b) = mixed_pair(16, c_b);
        let rho = 0.1;
        let lambda = 0.2;
        let m = TwoPatternModel::new(a.clone(), b.clone(), rho, 0.0, lambda).unwrap();
        let g = m.expected_gradient(&a).unwrap();
        // remove the d_a component and measure what is left
        let along: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
        let off: Vec<f64> = g.iter().zip(&a).map(|(x, y)| x - along * y).collect();
        let off_norm = off.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(
            off_norm,
            rho * (c_b - lambda) * (1.0 - c_b * c_b).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn expected_loss_and_gradient_match_monte_carlo() {
        // margins (c - lambda) sit several sigma above zero on both
        // branches, where the branch formulas are exact up to truncation
        // effects far below the Monte-Carlo error
        let c_b = 0.6;
        let (a, b) = mixed_pair(24, c_b);
        let rho = 0.15;
        let sigma = 0.1;
        let lambda = 0.25;
        let m = TwoPatternModel::new(a.clone(), b.clone(), rho, sigma, lambda).unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut loss_sum = 0.0;
        let mut loss_sq = 0.0;
        let mut grad_sum = vec![0.0; 24];
        let mut grad_sq = vec![0.0; 24];
        for _ in 0..n {
            let (x, _) = m.sample_segment(&mut rng);
            let u: f64 = x.iter().zip(&a).map(|(xv, av)| xv * av).sum();
            let z = (u - lambda).max(0.0);
            let r: f64 = x.iter().map(|v| v * v).sum();
            let loss = 0.5 * (r - 2.0 * z * u + z * z) + lambda * z;
            loss_sum += loss;
            loss_sq += loss * loss;
            for i in 0..24 {
                let g = z * (z * a[i] - x[i]);
                grad_sum[i] += g;
                grad_sq[i] += g * g;
            }
        }
        let nf = n as f64;
        let mc_loss = loss_sum / nf;
        let se = ((loss_sq / nf - mc_loss * mc_loss) / nf).sqrt();
        let pred = m.expected_loss(&a).unwrap();
        assert!(
            (mc_loss - pred).abs() <= 5.0 * se,
            "loss MC {mc_loss} vs analytic {pred}, se {se}"
        );
        let g_pred = m.expected_gradient(&a).unwrap();
        for i in 0..24 {
            let mc = grad_sum[i] / nf;
            let se_i = ((grad_sq[i] / nf - mc * mc) / nf).sqrt();
            assert!(
                (mc - g_pred[i]).abs() <= 5.0 * se_i + 1e-6,
                "gradient component {i}: MC {mc} vs analytic {}, se {se_i}",
                g_pred[i]
            );
        }
    }

    #[test]
    fn two_pattern_model_validates() {
        let (a, b) = orthogonal_pair(8);
        assert!(TwoPatternModel::new(a.clone(), b.clone(), 1.5, 0.1, 0.1).is_err());
        assert!(TwoPatternModel::new(vec![1.0, 1.0], vec![1.0, 0.0], 0.1, 0.1, 0.1).is_err());
        assert!(TwoPatternModel::new(a, b, 0.1, 0.1, 0.1).is_ok());
    }
}
