//! Whole-signal encoding and the two-stage rare-event pipeline: learn the
//! common dictionary with trimming, flag high-error patches of the
//! residual, then learn a second dictionary on the masked residual where
//! only flagged patches survive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{Error, Result};
use crate::learn::{train, TrainConfig, TrainReport};
use crate::robust::{build_mask, compute_threshold, patch_errors, OutlierMask};
use crate::sparse;
use crate::tensor::{extract_window, ActivationMap, Dictionary, SignalTensor, WindowSpec};

/// Settings for whole-signal encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeOptions {
    /// Solver iterations; this path favors accuracy over speed.
    pub n_fista: usize,
    /// Signals longer than this are encoded in overlapping chunks whose
    /// interiors are stitched together.
    pub chunk_size: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { n_fista: 500, chunk_size: 10_000_000 }
    }
}

impl EncodeOptions {
    pub fn validate(&self, atom_len: usize) -> Result<()> {
        if self.n_fista == 0 {
            return Err(Error::Config("n_fista must be positive".into()));
        }
        if self.chunk_size < 4 * atom_len {
            return Err(Error::Config(format!(
                "chunk_size {} is too small for atom length {atom_len} (need >= 4x)",
                self.chunk_size
            )));
        }
        Ok(())
    }
}

/// Sparse-codes a whole signal. Long signals are split into chunks with an
/// atom-length margin of context on both sides; only chunk interiors are
/// kept, so the stitched code tiles the signal without gaps.
pub fn encode_signal(
    x: &SignalTensor,
    d: &Dictionary,
    lambda: f64,
    opts: &EncodeOptions,
) -> Result<ActivationMap> {
    opts.validate(d.atom_len())?;
    let t = x.length();
    let l = d.atom_len();
    if t < l {
        return Err(Error::OutOfRange(format!(
            "signal of length {t} is shorter than the atom length {l}"
        )));
    }
    let v = t - l + 1;
    if t <= opts.chunk_size {
        let cfg = sparse::SparseCodeConfig::new(lambda, opts.n_fista);
        return sparse::fista(x, d, &cfg, None);
    }

    // plan chunk starts and kept position ranges up front so the solves
    // can run in parallel
    let c = opts.chunk_size;
    let mut plan: Vec<(usize, usize, usize, usize)> = Vec::new(); // (start, width, keep_from, keep_to)
    let mut pos = 0usize;
    while pos < v {
        let s = pos.saturating_sub(l);
        let width = c.min(t - s);
        let keep_to = if s + width >= t { v } else { s + width - 2 * l };
        if keep_to <= pos {
            return Err(Error::Config(format!(
                "chunk_size {c} cannot make progress at position {pos}"
            )));
        }
        plan.push((s, width, pos, keep_to));
        pos = keep_to;
    }

    let widths: Vec<usize> = {
        let mut ws: Vec<usize> = plan.iter().map(|p| p.1).collect();
        ws.sort_unstable();
        ws.dedup();
        ws
    };
    let mut steps = std::collections::HashMap::new();
    for w in widths {
        let nrm = conv::operator_norm_sq(d, w)?;
        steps.insert(w, if nrm > 0.0 { 1.0 / nrm } else { 1.0 });
    }

    let chunks: Vec<Result<Vec<f64>>> = plan
        .par_iter()
        .map(|&(s, width, keep_from, keep_to)| {
            let xw = extract_window(x, &WindowSpec { start: s, width })?;
            let op = conv::ConvOperator::new(d, width)?;
            let z = sparse::fista_with_op(
                &op,
                d.n_atoms(),
                &xw,
                lambda,
                opts.n_fista,
                steps[&width],
                None,
            )?;
            // copy the kept slice of every atom row, local offset s
            let vloc = width - l + 1;
            let mut kept = Vec::with_capacity(d.n_atoms() * (keep_to - keep_from));
            for k in 0..d.n_atoms() {
                let row = &z.data()[k * vloc..(k + 1) * vloc];
                kept.extend_from_slice(&row[keep_from - s..keep_to - s]);
            }
            Ok(kept)
        })
        .collect();

    let mut data = vec![0.0; d.n_atoms() * v];
    for (chunk, &(_, _, keep_from, keep_to)) in chunks.into_iter().zip(&plan) {
        let kept = chunk?;
        let span = keep_to - keep_from;
        for k in 0..d.n_atoms() {
            data[k * v + keep_from..k * v + keep_to]
                .copy_from_slice(&kept[k * span..(k + 1) * span]);
        }
    }
    ActivationMap::new(d.n_atoms(), v, data)
}

/// Encodes every signal of the corpus.
pub fn encode_corpus(
    corpus: &[SignalTensor],
    d: &Dictionary,
    lambda: f64,
    opts: &EncodeOptions,
) -> Result<Vec<ActivationMap>> {
    corpus
        .iter()
        .map(|x| encode_signal(x, d, lambda, opts))
        .collect()
}

/// Two-stage pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Common-pattern stage; must carry a trimming rule, which doubles as
    /// the residual threshold for the detection masks.
    pub stage1: TrainConfig,
    /// Rare-pattern stage, trained on the masked residual.
    pub stage2: TrainConfig,
    #[serde(default)]
    pub encode: EncodeOptions,
}

impl PipelineConfig {
    pub fn validate(&self, corpus: &[SignalTensor]) -> Result<()> {
        self.stage1.validate(corpus)?;
        self.stage2.validate(corpus)?;
        self.encode.validate(self.stage1.atom_len)?;
        if self.stage1.threshold.is_none() {
            return Err(Error::Config(
                "the first stage needs a threshold rule to produce detection masks".into(),
            ));
        }
        Ok(())
    }
}

/// What the pipeline found.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub common_dictionary: Dictionary,
    /// Dictionary fit to the flagged residual; `None` when nothing was
    /// flagged.
    pub rare_dictionary: Option<Dictionary>,
    /// Per-signal patch masks from the pooled residual threshold.
    pub masks: Vec<OutlierMask>,
    /// Codes of the masked residual under the rare dictionary; empty when
    /// no rare dictionary was learned.
    pub rare_activations: Vec<ActivationMap>,
    /// Per-signal, per-sample anomaly score: the patch residual error
    /// broadcast over the patch's samples.
    pub scores: Vec<Vec<f64>>,
    /// Pooled residual threshold behind the masks.
    pub threshold: f64,
    pub lambda1: f64,
    pub lambda2: Option<f64>,
    pub stage1_report: TrainReport,
    pub stage2_report: Option<TrainReport>,
    /// Set when no patch exceeded the threshold anywhere, in which case
    /// the rare stage was skipped.
    pub empty_mask_warning: bool,
}

/// Learns the common dictionary, masks residual outliers, and fits a rare
/// dictionary to what remains.
pub fn detect_rare_events(
    corpus: &[SignalTensor],
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    cfg.validate(corpus)?;
    let stage1_report = train(corpus, &cfg.stage1, None)?;
    if let Some(msg) = &stage1_report.failure {
        return Err(Error::Numeric(format!("common stage failed: {msg}")));
    }
    let common = stage1_report.dictionary.clone();
    let lambda1 = stage1_report.lambda;

    let codes = encode_corpus(corpus, &common, lambda1, &cfg.encode)?;
    let patch_w = cfg.stage1.effective_patch_width();
    let mut residuals = Vec::with_capacity(corpus.len());
    let mut error_series = Vec::with_capacity(corpus.len());
    for (x, z) in corpus.iter().zip(&codes) {
        let recon = conv::convolve(&common, z)?;
        let errs = patch_errors(x, &recon, patch_w)?;
        let mut res = SignalTensor::zeros(x.channels(), x.length());
        for p in 0..x.channels() {
            let xr = x.row(p);
            let rr = recon.row(p);
            let or = res.row_mut(p);
            for i in 0..xr.len() {
                or[i] = xr[i] - rr[i];
            }
        }
        residuals.push(res);
        error_series.push(errs);
    }

    let rule = cfg.stage1.threshold.as_ref().expect("validated above");
    let pooled: Vec<f64> = error_series
        .iter()
        .flat_map(|e| e.errors().iter().copied())
        .collect();
    let threshold = compute_threshold(&pooled, rule)?;
    let masks: Vec<OutlierMask> =
        error_series.iter().map(|e| build_mask(e, threshold)).collect();

    let scores: Vec<Vec<f64>> = error_series
        .iter()
        .map(|e| {
            let mut s = vec![0.0; e.signal_len()];
            for (i, &err) in e.errors().iter().enumerate() {
                let (a, b) = e.patch_bounds(i);
                s[a..b].fill(err);
            }
            s
        })
        .collect();

    let any_flagged = masks.iter().any(|m| m.n_flagged() > 0);
    if !any_flagged {
        return Ok(PipelineResult {
            common_dictionary: common,
            rare_dictionary: None,
            masks,
            rare_activations: Vec::new(),
            scores,
            threshold,
            lambda1,
            lambda2: None,
            stage1_report,
            stage2_report: None,
            empty_mask_warning: true,
        });
    }

    // keep the residual only where patches were flagged; the rare stage
    // sees zeros elsewhere
    let masked: Vec<SignalTensor> = residuals
        .iter()
        .zip(&masks)
        .map(|(res, mask)| {
            let t = res.length();
            let mut data = vec![0.0; res.channels() * t];
            for (i, &f) in mask.flags().iter().enumerate() {
                if f {
                    let (a, b) = mask.patch_bounds(i);
                    for p in 0..res.channels() {
                        data[p * t + a..p * t + b].copy_from_slice(&res.row(p)[a..b]);
                    }
                }
            }
            SignalTensor::new(res.channels(), t, data)
        })
        .collect::<Result<_>>()?;

    let stage2_report = train(&masked, &cfg.stage2, None)?;
    if let Some(msg) = &stage2_report.failure {
        return Err(Error::Numeric(format!("rare stage failed: {msg}")));
    }
    let rare = stage2_report.dictionary.clone();
    let lambda2 = stage2_report.lambda;
    let rare_activations = encode_corpus(&masked, &rare, lambda2, &cfg.encode)?;

    Ok(PipelineResult {
        common_dictionary: common,
        rare_dictionary: Some(rare),
        masks,
        rare_activations,
        scores,
        threshold,
        lambda1,
        lambda2: Some(lambda2),
        stage1_report: stage1_report.clone(),
        stage2_report: Some(stage2_report),
        empty_mask_warning: false,
    })
}
