//! Synthetic corpus generation: sparse activations of known atoms plus
//! Gaussian noise, optional rare atoms at a reduced rate, and optional
//! high-amplitude burst artifacts. Everything is driven by per-stage RNG
//! streams, so a spec generates bit-identical corpora on every run.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{Error, Result};
use crate::rng::{stream, Stage};
use crate::tensor::{ActivationMap, Dictionary, SignalTensor};

/// Rare-event and artifact settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RareSpec {
    /// Number of extra atoms that fire at the reduced rate.
    pub n_rare_atoms: usize,
    /// Rate of rare activations relative to `sparsity` (the paper-style
    /// rho): rare atoms fire with probability `rho * sparsity` per sample.
    pub rare_density: f64,
    /// Probability per sample of starting a burst artifact.
    pub artifact_density: f64,
    /// Standard deviation of burst noise.
    pub artifact_amplitude: f64,
    /// When set, the first rare atom is built as
    /// `c * d_0 + sqrt(1 - c^2) * e` with `e` a unit vector orthogonal to
    /// the first common atom, so its correlation to `d_0` is exactly `c`.
    pub rare_correlation: Option<f64>,
}

impl Default for RareSpec {
    fn default() -> Self {
        RareSpec {
            n_rare_atoms: 1,
            rare_density: 0.1,
            artifact_density: 0.0,
            artifact_amplitude: 8.0,
            rare_correlation: None,
        }
    }
}

/// Full description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub channels: usize,
    pub length: usize,
    pub n_atoms: usize,
    pub atom_len: usize,
    /// Activation probability per (atom, position).
    pub sparsity: f64,
    pub noise_sigma: f64,
    pub n_signals: usize,
    pub seed: u64,
    /// Uniform amplitude range for activations; make both ends equal for
    /// constant amplitude.
    pub amplitude_range: (f64, f64),
    /// Enforce at least `atom_len` samples between events of the same atom.
    pub min_separation: bool,
    pub rare: Option<RareSpec>,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            channels: 2,
            length: 50_000,
            n_atoms: 2,
            atom_len: 64,
            sparsity: 0.004,
            noise_sigma: 0.1,
            n_signals: 20,
            seed: 0,
            amplitude_range: (0.5, 1.5),
            min_separation: true,
            rare: None,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.n_atoms == 0 || self.n_signals == 0 {
            return Err(Error::Config("channels, n_atoms, n_signals must be positive".into()));
        }
        if self.atom_len < 2 {
            return Err(Error::Config(format!("atom_len must be >= 2, got {}", self.atom_len)));
        }
        if self.length <= self.atom_len {
            return Err(Error::Config(format!(
                "signal length {} must exceed atom length {}",
                self.length, self.atom_len
            )));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity must lie in [0, 1], got {}", self.sparsity)));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(Error::Config(format!(
                "amplitude range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if let Some(r) = &self.rare {
            if r.n_rare_atoms == 0 {
                return Err(Error::Config("rare spec needs at least one rare atom".into()));
            }
            if !(0.0..=1.0).contains(&r.rare_density) {
                return Err(Error::Config(format!(
                    "rare_density must lie in [0, 1], got {}",
                    r.rare_density
                )));
            }
            if !(0.0..1.0).contains(&r.artifact_density) {
                return Err(Error::Config(format!(
                    "artifact_density must lie in [0, 1), got {}",
                    r.artifact_density
                )));
            }
            if !r.artifact_amplitude.is_finite() || r.artifact_amplitude < 0.0 {
                return Err(Error::Config(format!(
                    "artifact_amplitude must be >= 0, got {}",
                    r.artifact_amplitude
                )));
            }
            if let Some(c) = r.rare_correlation {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Config(format!(
                        "rare_correlation must lie in [0, 1], got {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn n_total_atoms(&self) -> usize {
        self.n_atoms + self.rare.as_ref().map_or(0, |r| r.n_rare_atoms)
    }
}

/// Everything the generator knows about a corpus it produced.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Common atoms first, rare atoms after.
    pub dictionary: Dictionary,
    pub n_common_atoms: usize,
    /// Per-signal activations over all atoms.
    pub activations: Vec<ActivationMap>,
    /// Per-signal, per-sample: covered by a rare-atom event.
    pub rare_masks: Vec<Vec<bool>>,
    /// Per-signal, per-sample: covered by a burst artifact.
    pub artifact_masks: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn common_dictionary(&self) -> Dictionary {
        self.dictionary.slice_atoms(0, self.n_common_atoms).expect("common atoms")
    }

    pub fn rare_dictionary(&self) -> Option<Dictionary> {
        if self.n_common_atoms == self.dictionary.n_atoms() {
            None
        } else {
            Some(
                self.dictionary
                    .slice_atoms(self.n_common_atoms, self.dictionary.n_atoms())
                    .expect("rare atoms"),
            )
        }
    }

    /// Union of rare and artifact coverage per signal.
    pub fn anomaly_masks(&self) -> Vec<Vec<bool>> {
        self.rare_masks
            .iter()
            .zip(&self.artifact_masks)
            .map(|(r, a)| r.iter().zip(a).map(|(x, y)| *x || *y).collect())
            .collect()
    }
}

fn normalize(block: &mut [f64]) -> bool {
    let ns: f64 = block.iter().map(|v| v * v).sum();
    if ns <= 1e-24 {
        return false;
    }
    let inv = 1.0 / ns.sqrt();
    for v in block {
        *v *= inv;
    }
    true
}

fn sine_waveform(l: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let cycles = rng.random_range(1.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..l)
        .map(|i| (std::f64::consts::TAU * cycles * i as f64 / l as f64 + phase).sin())
        .collect()
}

fn bump_waveform(l: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let center = rng.random_range(0.25 * l as f64..0.75 * l as f64);
    let width = rng.random_range(0.08 * l as f64..0.2 * l as f64);
    (0..l)
        .map(|i| {
            let d = (i as f64 - center) / width;
            (-0.5 * d * d).exp()
        })
        .collect()
}

fn make_atom(k: usize, channels: usize, l: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut block = Vec::with_capacity(channels * l);
    for _ in 0..channels {
        let wave = if k % 2 == 0 { sine_waveform(l, rng) } else { bump_waveform(l, rng) };
        block.extend(wave);
    }
    normalize(&mut block);
    block
}

/// Smooth unit-norm atoms (alternating sinusoid / Gaussian bump per atom),
/// rare atoms appended after the common ones.
pub fn make_dictionary(spec: &SimSpec) -> Result<Dictionary> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stage::TruthDict, 0);
    let p = spec.channels;
    let l = spec.atom_len;
    let mut data = Vec::with_capacity(spec.n_total_atoms() * p * l);
    for k in 0..spec.n_atoms {
        data.extend(make_atom(k, p, l, &mut rng));
    }
    if let Some(rare) = &spec.rare {
        for r in 0..rare.n_rare_atoms {
            match (r, rare.rare_correlation) {
                (0, Some(c)) => {
                    // mix a fresh direction with the first common atom so
                    // that <rare, d_0> = c exactly
                    let base = &data[0..p * l];
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    let mut e: Vec<f64>;
                    loop {
                        let raw: Vec<f64> =
                            (0..p * l).map(|_| normal.sample(&mut rng)).collect();
                        let proj: f64 = raw.iter().zip(base).map(|(a, b)| a * b).sum();
                        e = raw.iter().zip(base).map(|(a, b)| a - proj * b).collect();
                        if normalize(&mut e) {
                            break;
                        }
                    }
                    let s = (1.0 - c * c).sqrt();
                    let atom: Vec<f64> =
                        base.iter().zip(&e).map(|(b, ev)| c * b + s * ev).collect();
                    data.extend(atom);
                }
                _ => data.extend(make_atom(spec.n_atoms + r, p, l, &mut rng)),
            }
        }
    }
    Dictionary::new_projected(spec.n_total_atoms(), p, l, data)
}

fn make_activations(spec: &SimSpec, signal_idx: u64) -> ActivationMap {
    let mut rng = stream(spec.seed, Stage::Activations, signal_idx);
    let k_total = spec.n_total_atoms();
    let v = spec.length - spec.atom_len + 1;
    let rho = spec.rare.as_ref().map_or(0.0, |r| r.rare_density);
    let (lo, hi) = spec.amplitude_range;
    let mut data = vec![0.0; k_total * v];
    for k in 0..k_total {
        let density =
            if k < spec.n_atoms { spec.sparsity } else { spec.sparsity * rho };
        let mut next_ok = 0usize;
        for pos in 0..v {
            if rng.random_range(0.0..1.0) < density {
                if spec.min_separation && pos < next_ok {
                    continue;
                }
                let amp = if lo == hi { lo } else { rng.random_range(lo..hi) };
                data[k * v + pos] = amp;
                next_ok = pos + spec.atom_len;
            }
        }
    }
    ActivationMap::new(k_total, v, data).expect("activation shape")
}

/// Generates the corpus and its ground truth.
pub fn synthesize(spec: &SimSpec) -> Result<(Vec<SignalTensor>, GroundTruth)> {
    spec.validate()?;
    let dictionary = make_dictionary(spec)?;
    let p = spec.channels;
    let t = spec.length;
    let l = spec.atom_len;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut signals = Vec::with_capacity(spec.n_signals);
    let mut activations = Vec::with_capacity(spec.n_signals);
    let mut rare_masks = Vec::with_capacity(spec.n_signals);
    let mut artifact_masks = Vec::with_capacity(spec.n_signals);
    for s in 0..spec.n_signals {
        let z = make_activations(spec, s as u64);
        let clean = conv::convolve(&dictionary, &z)?;
        let mut x = clean.data().to_vec();

        let mut artifact_mask = vec![false; t];
        if let Some(rare) = &spec.rare {
            if rare.artifact_density > 0.0 {
                let mut art_rng = stream(spec.seed, Stage::Artifacts, s as u64);
                let burst = (l / 2).max(1);
                for start in 0..=(t - burst) {
                    if art_rng.random_range(0.0..1.0) < rare.artifact_density {
                        for i in 0..burst {
                            for ch in 0..p {
                                x[ch * t + start + i] +=
                                    rare.artifact_amplitude * normal.sample(&mut art_rng);
                            }
                            artifact_mask[start + i] = true;
                        }
                    }
                }
            }
        }

        if spec.noise_sigma > 0.0 {
            let mut noise_rng = stream(spec.seed, Stage::Noise, s as u64);
            for v in x.iter_mut() {
                *v += spec.noise_sigma * normal.sample(&mut noise_rng);
            }
        }

        let mut rare_mask = vec![false; t];
        for k in spec.n_atoms..spec.n_total_atoms() {
            for (pos, &zv) in z.row(k).iter().enumerate() {
                if zv != 0.0 {
                    rare_mask[pos..pos + l].iter_mut().for_each(|m| *m = true);
                }
            }
        }

        signals.push(SignalTensor::new(p, t, x)?);
        activations.push(z);
        rare_masks.push(rare_mask);
        artifact_masks.push(artifact_mask);
    }
    Ok((
        signals,
        GroundTruth {
            dictionary,
            n_common_atoms: spec.n_atoms,
            activations,
            rare_masks,
            artifact_masks,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // error function accurate to ~1.5e-7 (Abramowitz & Stegun 7.1.26),
    // plenty for a KS test against the normal CDF
    fn erf(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    fn normal_cdf(x: f64, sigma: f64) -> f64 {
        0.5 * (1.0 + erf(x / (sigma * std::f64::consts::SQRT_2)))
    }

    #[test]
    fn atoms_are_unit_norm() {
        let spec = SimSpec { atom_len: 32, length: 2000, ..Default::default() };
        let d = make_dictionary(&spec).unwrap();
        for k in 0..d.n_atoms() {
            assert_relative_eq!(d.atom_norm_sq(k), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SimSpec {
            length: 3000,
            n_signals: 2,
            rare: Some(RareSpec { artifact_density: 0.001, ..Default::default() }),
            ..Default::default()
        };
        let (a, ta) = synthesize(&spec).unwrap();
        let (b, tb) = synthesize(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.dictionary, tb.dictionary);
        assert_eq!(ta.activations, tb.activations);
        assert_eq!(ta.rare_masks, tb.rare_masks);
        let (c, _) = synthesize(&SimSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn activation_count_is_binomial_without_min_separation() {
        let spec = SimSpec {
            length: 50_000,
            min_separation: false,
            seed: 3,
            n_signals: 1,
            ..Default::default()
        };
        let z = make_activations(&spec, 0);
        let n = (2 * (50_000 - 63)) as f64;
        let mean = n * 0.004;
        let sd = (n * 0.004 * 0.996).sqrt();
        let count = z.support_count(0.0) as f64;
        assert!(
            (count - mean).abs() <= 3.0 * sd,
            "count {count} outside {mean} +- 3 * {sd}"
        );
    }

    #[test]
    fn min_separation_enforced() {
        let spec = SimSpec { length: 20_000, sparsity: 0.05, seed: 5, ..Default::default() };
        let z = make_activations(&spec, 0);
        for k in 0..z.n_atoms() {
            let mut last: Option<usize> = None;
            for (pos, &v) in z.row(k).iter().enumerate() {
                if v != 0.0 {
                    if let Some(prev) = last {
                        assert!(pos - prev >= spec.atom_len, "events at {prev} and {pos}");
                    }
                    last = Some(pos);
                }
            }
        }
    }

    #[test]
    fn amplitudes_stay_in_range() {
        let spec = SimSpec { length: 30_000, sparsity: 0.01, seed: 7, ..Default::default() };
        let z = make_activations(&spec, 0);
        for &v in z.data().iter().filter(|v| **v != 0.0) {
            assert!((0.5..1.5).contains(&v), "amplitude {v}");
        }
        let constant = SimSpec { amplitude_range: (1.0, 1.0), ..spec };
        let z = make_activations(&constant, 0);
        for &v in z.data().iter().filter(|v| **v != 0.0) {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn residual_is_the_injected_noise() {
        let spec = SimSpec { n_signals: 1, ..Default::default() };
        let (signals, truth) = synthesize(&spec).unwrap();
        let clean = conv::convolve(&truth.dictionary, &truth.activations[0]).unwrap();
        let res: Vec<f64> = signals[0]
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| a - b)
            .collect();
        let n = res.len() as f64;
        let mean = res.iter().sum::<f64>() / n;
        let std = (res.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.005, "residual std {std}");

        // Kolmogorov-Smirnov against N(0, sigma^2), alpha = 0.01
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let mut d_stat = 0.0f64;
        for (i, v) in sorted.iter().enumerate() {
            let cdf = normal_cdf(*v, 0.1);
            let hi = (i + 1) as f64 / n;
            let lo = i as f64 / n;
            d_stat = d_stat.max((cdf - lo).abs().max((hi - cdf).abs()));
        }
        let crit = 1.628 / n.sqrt();
        assert!(d_stat < crit, "KS statistic {d_stat} exceeds {crit}");
    }

    #[test]
    fn rare_correlation_is_exact() {
        for c in [0.0, 0.3, 0.8, 1.0] {
            let spec = SimSpec {
                length: 2000,
                rare: Some(RareSpec { rare_correlation: Some(c), ..Default::default() }),
                ..Default::default()
            };
            let d = make_dictionary(&spec).unwrap();
            assert_eq!(d.n_atoms(), 3);
            let dot: f64 = d.atom(0).iter().zip(d.atom(2)).map(|(a, b)| a * b).sum();
            assert_relative_eq!(dot, c, epsilon = 1e-12);
            assert_relative_eq!(d.atom_norm_sq(2), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn masks_cover_events() {
        let spec = SimSpec {
            length: 5000,
            n_signals: 1,
            seed: 11,
            rare: Some(RareSpec {
                rare_density: 0.5,
                artifact_density: 0.002,
                ..Default::default()
            }),
            ..Default::default()
        };
        let (_, truth) = synthesize(&spec).unwrap();
        let z = &truth.activations[0];
        let rare_mask = &truth.rare_masks[0];
        let mut expected = vec![false; 5000];
        for k in 2..3 {
            for (pos, &v) in z.row(k).iter().enumerate() {
                if v != 0.0 {
                    expected[pos..pos + 64].iter_mut().for_each(|m| *m = true);
                }
            }
        }
        assert_eq!(rare_mask, &expected);
        assert!(rare_mask.iter().any(|m| *m), "no rare events generated");
        assert!(truth.artifact_masks[0].iter().any(|m| *m), "no artifacts generated");
    }

    #[test]
    fn validation_rejects_nonsense() {
        assert!(SimSpec { sparsity: 1.5, ..Default::default() }.validate().is_err());
        assert!(SimSpec { length: 64, atom_len: 64, ..Default::default() }.validate().is_err());
        assert!(SimSpec { amplitude_range: (0.0, 1.0), ..Default::default() }
            .validate()
            .is_err());
        assert!(SimSpec {
            rare: Some(RareSpec { rare_correlation: Some(1.5), ..Default::default() }),
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
