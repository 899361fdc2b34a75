//! Convolution kernels shared by coding, learning, and evaluation.
//!
//! Three linear maps, all expressed against the same index conventions:
//!
//! * `convolve`: reconstruction `x_hat[p, t] = sum_k sum_l d[k, p, l] * z[k, t - l]`
//! * `correlate`: dictionary gradient `g[k, p, l] = sum_j z[k, j] * r[p, j + l]`
//! * `correlate_signal`: code gradient `g[k, j] = sum_p sum_l d[k, p, l] * r[p, j + l]`
//!
//! Each op runs a direct loop for small shapes and an FFT path (zero padded
//! to a power of two, plans cached process-wide) once `atom_len * valid_len`
//! reaches `DIRECT_COST_LIMIT`. Both paths agree to floating-point accuracy,
//! and the choice depends only on shapes, so results are deterministic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{ActivationMap, DictGrad, Dictionary, SignalTensor};

/// Direct evaluation is used while `atom_len * valid_len` is below this.
pub const DIRECT_COST_LIMIT: usize = 1 << 14;

type PlanPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn plans(n: usize) -> PlanPair {
    static CACHE: OnceLock<Mutex<HashMap<usize, PlanPair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
        })
        .clone()
}

fn fft_padded(fwd: &Arc<dyn Fft<f64>>, x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (b, v) in buf.iter_mut().zip(x) {
        b.re = *v;
    }
    fwd.process(&mut buf);
    buf
}

struct OpFft {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Spectra of all atoms, `[atom][channel]` blocks of length `n`.
    dhat: Vec<Complex64>,
}

/// Precomputed state for repeated convolution/correlation against a fixed
/// dictionary and signal length. Shared read-only across threads.
pub(crate) struct ConvOperator {
    n_atoms: usize,
    channels: usize,
    atom_len: usize,
    signal_len: usize,
    valid_len: usize,
    atoms: Vec<f64>,
    fft: Option<OpFft>,
}

/// Cached activation spectra for re-evaluating `forward` against new
/// dictionaries of the same shape (step-size search).
pub(crate) enum ZSpectrum {
    Fft(Vec<Complex64>),
    Direct,
}

impl ConvOperator {
    pub(crate) fn new(d: &Dictionary, signal_len: usize) -> Result<Self> {
        let l = d.atom_len();
        if signal_len < l {
            return Err(Error::OutOfRange(format!(
                "signal length {signal_len} is shorter than atom length {l}"
            )));
        }
        let valid_len = signal_len - l + 1;
        Self::with_path(d, signal_len, l * valid_len >= DIRECT_COST_LIMIT)
    }

    pub(crate) fn with_path(d: &Dictionary, signal_len: usize, use_fft: bool) -> Result<Self> {
        let l = d.atom_len();
        if signal_len < l {
            return Err(Error::OutOfRange(format!(
                "signal length {signal_len} is shorter than atom length {l}"
            )));
        }
        let valid_len = signal_len - l + 1;
        let fft = if use_fft {
            let n = signal_len.next_power_of_two();
            let (fwd, inv) = plans(n);
            let mut dhat = Vec::with_capacity(d.n_atoms() * d.channels() * n);
            for k in 0..d.n_atoms() {
                for p in 0..d.channels() {
                    dhat.extend_from_slice(&fft_padded(&fwd, d.atom_row(k, p), n));
                }
            }
            Some(OpFft { n, fwd, inv, dhat })
        } else {
            None
        };
        Ok(ConvOperator {
            n_atoms: d.n_atoms(),
            channels: d.channels(),
            atom_len: l,
            signal_len,
            valid_len,
            atoms: d.data().to_vec(),
            fft,
        })
    }

    pub(crate) fn valid_len(&self) -> usize {
        self.valid_len
    }

    fn atom_row(&self, k: usize, p: usize) -> &[f64] {
        let base = (k * self.channels + p) * self.atom_len;
        &self.atoms[base..base + self.atom_len]
    }

    fn dhat_row<'a>(&self, fft: &'a OpFft, k: usize, p: usize) -> &'a [Complex64] {
        let base = (k * self.channels + p) * fft.n;
        &fft.dhat[base..base + fft.n]
    }

    /// Reconstruction `D * z`. `z` is `n_atoms x valid_len`, `out` is
    /// `channels x signal_len` and is overwritten.
    pub(crate) fn forward(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n_atoms * self.valid_len);
        debug_assert_eq!(out.len(), self.channels * self.signal_len);
        match &self.fft {
            None => self.forward_direct(z, out),
            Some(fft) => {
                let zhat = self.z_spectrum_fft(fft, z);
                self.forward_fft(fft, &zhat, out);
            }
        }
    }

    /// Precomputes whatever `forward_cached` can reuse for this `z`.
    pub(crate) fn z_spectrum(&self, z: &[f64]) -> ZSpectrum {
        match &self.fft {
            None => ZSpectrum::Direct,
            Some(fft) => ZSpectrum::Fft(self.z_spectrum_fft(fft, z)),
        }
    }

    /// `forward` reusing a `z_spectrum` from an operator with identical
    /// shape (possibly different atom values).
    pub(crate) fn forward_cached(&self, z: &[f64], cache: &ZSpectrum, out: &mut [f64]) {
        match (&self.fft, cache) {
            (Some(fft), ZSpectrum::Fft(zhat)) => self.forward_fft(fft, zhat, out),
            _ => self.forward_direct(z, out),
        }
    }

    fn z_spectrum_fft(&self, fft: &OpFft, z: &[f64]) -> Vec<Complex64> {
        let mut zhat = Vec::with_capacity(self.n_atoms * fft.n);
        for k in 0..self.n_atoms {
            let row = &z[k * self.valid_len..(k + 1) * self.valid_len];
            zhat.extend_from_slice(&fft_padded(&fft.fwd, row, fft.n));
        }
        zhat
    }

    fn forward_direct(&self, z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.n_atoms {
            let zrow = &z[k * self.valid_len..(k + 1) * self.valid_len];
            for p in 0..self.channels {
                let atom = self.atom_row(k, p);
                let orow = &mut out[p * self.signal_len..(p + 1) * self.signal_len];
                for (j, &zv) in zrow.iter().enumerate() {
                    if zv != 0.0 {
                        for (l, &av) in atom.iter().enumerate() {
                            orow[j + l] += zv * av;
                        }
                    }
                }
            }
        }
    }

    fn forward_fft(&self, fft: &OpFft, zhat: &[Complex64], out: &mut [f64]) {
        let n = fft.n;
        let scale = 1.0 / n as f64;
        for p in 0..self.channels {
            let mut acc = vec![Complex64::new(0.0, 0.0); n];
            for k in 0..self.n_atoms {
                let dh = self.dhat_row(fft, k, p);
                let zh = &zhat[k * n..(k + 1) * n];
                for i in 0..n {
                    acc[i] += dh[i] * zh[i];
                }
            }
            fft.inv.process(&mut acc);
            let orow = &mut out[p * self.signal_len..(p + 1) * self.signal_len];
            for (o, a) in orow.iter_mut().zip(&acc) {
                *o = a.re * scale;
            }
        }
    }

    /// Adjoint of `forward` in `z`: cross-correlation of `r` with every
    /// atom. `r` is `channels x signal_len`, `out` is `n_atoms x valid_len`.
    pub(crate) fn adjoint_z(&self, r: &[f64], out: &mut [f64]) {
        debug_assert_eq!(r.len(), self.channels * self.signal_len);
        debug_assert_eq!(out.len(), self.n_atoms * self.valid_len);
        match &self.fft {
            None => {
                for k in 0..self.n_atoms {
                    let orow = &mut out[k * self.valid_len..(k + 1) * self.valid_len];
                    orow.fill(0.0);
                    for p in 0..self.channels {
                        let atom = self.atom_row(k, p);
                        let rrow = &r[p * self.signal_len..(p + 1) * self.signal_len];
                        for (j, o) in orow.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for (l, &av) in atom.iter().enumerate() {
                                s += av * rrow[j + l];
                            }
                            *o += s;
                        }
                    }
                }
            }
            Some(fft) => {
                let n = fft.n;
                let scale = 1.0 / n as f64;
                let rhat: Vec<Vec<Complex64>> = (0..self.channels)
                    .map(|p| {
                        fft_padded(&fft.fwd, &r[p * self.signal_len..(p + 1) * self.signal_len], n)
                    })
                    .collect();
                for k in 0..self.n_atoms {
                    let mut acc = vec![Complex64::new(0.0, 0.0); n];
                    for (p, rh) in rhat.iter().enumerate() {
                        let dh = self.dhat_row(fft, k, p);
                        for i in 0..n {
                            acc[i] += dh[i].conj() * rh[i];
                        }
                    }
                    fft.inv.process(&mut acc);
                    let orow = &mut out[k * self.valid_len..(k + 1) * self.valid_len];
                    for (o, a) in orow.iter_mut().zip(&acc) {
                        *o = a.re * scale;
                    }
                }
            }
        }
    }
}

fn check_pair(d: &Dictionary, z: &ActivationMap) -> Result<()> {
    if d.n_atoms() != z.n_atoms() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary has {} atoms but activation map has {}",
            d.n_atoms(),
            z.n_atoms()
        )));
    }
    Ok(())
}

/// Reconstruction `D * z`, a signal of length `valid_len + atom_len - 1`.
pub fn convolve(d: &Dictionary, z: &ActivationMap) -> Result<SignalTensor> {
    check_pair(d, z)?;
    let t = z.valid_len() + d.atom_len() - 1;
    let op = ConvOperator::new(d, t)?;
    let mut out = vec![0.0; d.channels() * t];
    op.forward(z.data(), &mut out);
    SignalTensor::new(d.channels(), t, out)
}

/// Cross-correlation of a residual with the activations: the gradient of
/// `0.5 * ||x - D * z||^2` with respect to `D` at residual `r = D * z - x`
/// is `correlate(r, z)`. Atom length is inferred as
/// `r.length() - z.valid_len() + 1`.
pub fn correlate(r: &SignalTensor, z: &ActivationMap) -> Result<DictGrad> {
    if r.length() < z.valid_len() {
        return Err(Error::DimensionMismatch(format!(
            "residual length {} shorter than activation length {}",
            r.length(),
            z.valid_len()
        )));
    }
    let l = r.length() - z.valid_len() + 1;
    let k_n = z.n_atoms();
    let p_n = r.channels();
    let v = z.valid_len();
    let mut g = DictGrad::zeros(k_n, p_n, l);
    if l * v < DIRECT_COST_LIMIT {
        for k in 0..k_n {
            let zrow = z.row(k);
            for p in 0..p_n {
                let rrow = r.row(p);
                let grow = &mut g.data[(k * p_n + p) * l..(k * p_n + p + 1) * l];
                for (j, &zv) in zrow.iter().enumerate() {
                    if zv != 0.0 {
                        for (lo, gv) in grow.iter_mut().enumerate() {
                            *gv += zv * rrow[j + lo];
                        }
                    }
                }
            }
        }
    } else {
        let n = r.length().next_power_of_two();
        let (fwd, inv) = plans(n);
        let scale = 1.0 / n as f64;
        let rhat: Vec<Vec<Complex64>> = (0..p_n).map(|p| fft_padded(&fwd, r.row(p), n)).collect();
        for k in 0..k_n {
            let zhat = fft_padded(&fwd, z.row(k), n);
            for (p, rh) in rhat.iter().enumerate() {
                let mut acc: Vec<Complex64> =
                    zhat.iter().zip(rh).map(|(zv, rv)| zv.conj() * rv).collect();
                inv.process(&mut acc);
                let grow = &mut g.data[(k * p_n + p) * l..(k * p_n + p + 1) * l];
                for (gv, a) in grow.iter_mut().zip(&acc) {
                    *gv = a.re * scale;
                }
            }
        }
    }
    Ok(g)
}

/// Cross-correlation of a signal with every atom: the adjoint of `convolve`
/// in `z`. Output has `valid_len = r.length() - atom_len + 1`.
pub fn correlate_signal(d: &Dictionary, r: &SignalTensor) -> Result<ActivationMap> {
    if d.channels() != r.channels() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary has {} channels but signal has {}",
            d.channels(),
            r.channels()
        )));
    }
    let op = ConvOperator::new(d, r.length())?;
    let mut out = vec![0.0; d.n_atoms() * op.valid_len()];
    op.adjoint_z(r.data(), &mut out);
    ActivationMap::new(d.n_atoms(), op.valid_len(), out)
}

/// Squared operator norm of `z -> D * z` for signals of `signal_len`
/// samples, estimated by power iteration on the normal operator to relative
/// tolerance 1e-6 (at most 200 iterations).
pub fn operator_norm_sq(d: &Dictionary, signal_len: usize) -> Result<f64> {
    let op = ConvOperator::new(d, signal_len)?;
    let kv = d.n_atoms() * op.valid_len();
    let mut v = vec![1.0 / (kv as f64).sqrt(); kv];
    let mut recon = vec![0.0; d.channels() * signal_len];
    let mut back = vec![0.0; kv];
    let mut prev = f64::NAN;
    for _ in 0..200 {
        op.forward(&v, &mut recon);
        op.adjoint_z(&recon, &mut back);
        let nrm = back.iter().map(|b| b * b).sum::<f64>().sqrt();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        if prev.is_finite() && (nrm - prev).abs() <= 1e-6 * nrm {
            return Ok(nrm);
        }
        for (vi, bi) in v.iter_mut().zip(&back) {
            *vi = bi / nrm;
        }
        prev = nrm;
    }
    Ok(prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_atoms(k: usize, p: usize, l: usize, seed: u64) -> Dictionary {
        let mut rng = crate::rng::stream(seed, crate::rng::Stage::DictInit, 0);
        let mut data: Vec<f64> = (0..k * p * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        for a in 0..k {
            let ns: f64 = data[a * p * l..(a + 1) * p * l].iter().map(|v| v * v).sum();
            let inv = 1.0 / ns.sqrt();
            for v in &mut data[a * p * l..(a + 1) * p * l] {
                *v *= inv;
            }
        }
        Dictionary::new(k, p, l, data).unwrap()
    }

    fn random_signal(p: usize, t: usize, seed: u64) -> SignalTensor {
        let mut rng = crate::rng::stream(seed, crate::rng::Stage::Noise, 0);
        SignalTensor::new(p, t, (0..p * t).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_activations(k: usize, v: usize, seed: u64) -> ActivationMap {
        let mut rng = crate::rng::stream(seed, crate::rng::Stage::Activations, 0);
        ActivationMap::new(k, v, (0..k * v).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn convolve_places_atom_at_spike() {
        let d = Dictionary::new(1, 2, 3, vec![0.5, 0.3, -0.2, 0.1, 0.0, 0.4]).unwrap();
        let mut z = vec![0.0; 6];
        z[2] = 2.0;
        let z = ActivationMap::new(1, 6, z).unwrap();
        let x = convolve(&d, &z).unwrap();
        assert_eq!(x.length(), 8);
        assert_eq!(x.row(0), &[0.0, 0.0, 1.0, 0.6, -0.4, 0.0, 0.0, 0.0]);
        assert_eq!(x.row(1), &[0.0, 0.0, 0.2, 0.0, 0.8, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn convolve_rejects_atom_count_mismatch() {
        let d = unit_atoms(2, 1, 4, 0);
        let z = ActivationMap::zeros(3, 5);
        assert!(convolve(&d, &z).is_err());
    }

    #[test]
    fn adjoint_identity_in_z() {
        for (k, p, l, t) in [(1, 1, 3, 10), (2, 3, 4, 17), (3, 2, 5, 24)] {
            let d = unit_atoms(k, p, l, 11);
            let z = random_activations(k, t - l + 1, 12);
            let r = random_signal(p, t, 13);
            let az = convolve(&d, &z).unwrap();
            let atr = correlate_signal(&d, &r).unwrap();
            let lhs: f64 = az.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = z.data().iter().zip(atr.data()).map(|(a, b)| a * b).sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_in_d() {
        for (k, p, l, t) in [(1, 1, 3, 10), (2, 3, 4, 17)] {
            let d = unit_atoms(k, p, l, 21);
            let z = random_activations(k, t - l + 1, 22);
            let r = random_signal(p, t, 23);
            let az = convolve(&d, &z).unwrap();
            let g = correlate(&r, &z).unwrap();
            assert_eq!((g.n_atoms, g.channels, g.atom_len), (k, p, l));
            let lhs: f64 = az.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = d.data().iter().zip(&g.data).map(|(a, b)| a * b).sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn fft_and_direct_paths_agree() {
        let k = 2;
        let p = 2;
        let l = 16;
        let t = 300;
        let d = unit_atoms(k, p, l, 31);
        let z = random_activations(k, t - l + 1, 32);
        let r = random_signal(p, t, 33);

        let direct = ConvOperator::with_path(&d, t, false).unwrap();
        let fft = ConvOperator::with_path(&d, t, true).unwrap();

        let mut out_a = vec![0.0; p * t];
        let mut out_b = vec![0.0; p * t];
        direct.forward(z.data(), &mut out_a);
        fft.forward(z.data(), &mut out_b);
        for (a, b) in out_a.iter().zip(&out_b) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }

        let mut g_a = vec![0.0; k * (t - l + 1)];
        let mut g_b = vec![0.0; k * (t - l + 1)];
        direct.adjoint_z(r.data(), &mut g_a);
        fft.adjoint_z(r.data(), &mut g_b);
        for (a, b) in g_a.iter().zip(&g_b) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn correlate_fft_path_matches_direct() {
        // atom_len * valid_len above DIRECT_COST_LIMIT forces the FFT branch
        let k = 2;
        let p = 2;
        let l = 32;
        let t = 1024;
        let z = random_activations(k, t - l + 1, 41);
        let r = random_signal(p, t, 42);
        let fft = correlate(&r, &z).unwrap();
        assert!(l * (t - l + 1) >= DIRECT_COST_LIMIT);
        let mut direct = DictGrad::zeros(k, p, l);
        for kk in 0..k {
            for pp in 0..p {
                for lo in 0..l {
                    let mut s = 0.0;
                    for j in 0..(t - l + 1) {
                        s += z.row(kk)[j] * r.row(pp)[j + lo];
                    }
                    direct.data[(kk * p + pp) * l + lo] = s;
                }
            }
        }
        for (a, b) in fft.data.iter().zip(&direct.data) {
            assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-10);
        }
    }

    #[test]
    fn operator_norm_of_unit_spike_is_one() {
        let d = Dictionary::new(1, 1, 1, vec![1.0]).unwrap();
        for t in [1, 7, 64, 1000] {
            // the normal operator is the identity; the estimate is 1 up to
            // rounding in the norm accumulation
            assert_relative_eq!(operator_norm_sq(&d, t).unwrap(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn operator_norm_scales_quadratically_with_atoms() {
        let base = unit_atoms(2, 2, 8, 51);
        let half = Dictionary::new(
            2,
            2,
            8,
            base.data().iter().map(|v| 0.5 * v).collect(),
        )
        .unwrap();
        let quarter = Dictionary::new(
            2,
            2,
            8,
            base.data().iter().map(|v| 0.25 * v).collect(),
        )
        .unwrap();
        let a = operator_norm_sq(&half, 50).unwrap();
        let b = operator_norm_sq(&quarter, 50).unwrap();
        assert_relative_eq!(a, 4.0 * b, max_relative = 1e-9);
    }

    #[test]
    fn operator_norm_of_zero_dictionary_is_zero() {
        let d = Dictionary::new(2, 1, 4, vec![0.0; 8]).unwrap();
        assert_eq!(operator_norm_sq(&d, 20).unwrap(), 0.0);
    }

    #[test]
    fn operator_norm_matches_dense_svd() {
        // Dense conv matrix: column (k, j) holds atom k shifted to offset j.
        for (k, p, l, t, seed) in [(1, 1, 5, 40, 61u64), (2, 2, 6, 30, 62), (3, 1, 4, 25, 63)] {
            let d = unit_atoms(k, p, l, seed);
            let v = t - l + 1;
            let mut a = nalgebra::DMatrix::<f64>::zeros(p * t, k * v);
            for kk in 0..k {
                for j in 0..v {
                    for pp in 0..p {
                        for lo in 0..l {
                            a[(pp * t + j + lo, kk * v + j)] = d.atom_row(kk, pp)[lo];
                        }
                    }
                }
            }
            let smax = a.singular_values().max();
            let est = operator_norm_sq(&d, t).unwrap();
            // power iteration approaches sigma_max^2 from below; clustered
            // Toeplitz spectra make the last digits slow
            assert!(est <= smax * smax * (1.0 + 1e-9), "est {est} above svd {}", smax * smax);
            assert!(est >= smax * smax * (1.0 - 5e-3), "est {est} far below svd {}", smax * smax);
        }
    }

    #[test]
    fn operator_norm_bounded_by_padded_spectrum() {
        // For K = 1 the squared norm never exceeds the maximum padded power
        // spectrum of the atom (circulant extension dominates the Toeplitz
        // section), and never falls below the atom energy.
        for seed in 71u64..76 {
            let d = unit_atoms(1, 1, 9, seed);
            let t = 100usize;
            let n = t.next_power_of_two();
            let (fwd, _) = plans(n);
            let spec = fft_padded(&fwd, d.atom_row(0, 0), n);
            let bound = spec.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
            let est = operator_norm_sq(&d, t).unwrap();
            assert!(est <= bound * (1.0 + 1e-6), "est {est} exceeds spectral bound {bound}");
            assert!(est >= 1.0 - 1e-6, "est {est} below atom energy");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn convolve_is_linear(
            zvals in proptest::collection::vec(-2.0f64..2.0, 12),
            wvals in proptest::collection::vec(-2.0f64..2.0, 12),
            a in -3.0f64..3.0,
        ) {
            let d = unit_atoms(2, 1, 4, 81);
            let z = ActivationMap::new(2, 6, zvals.clone()).unwrap();
            let w = ActivationMap::new(2, 6, wvals.clone()).unwrap();
            let mix = ActivationMap::new(
                2, 6,
                zvals.iter().zip(&wvals).map(|(zv, wv)| a * zv + wv).collect(),
            ).unwrap();
            let lhs = convolve(&d, &mix).unwrap();
            let xz = convolve(&d, &z).unwrap();
            let xw = convolve(&d, &w).unwrap();
            for i in 0..lhs.data().len() {
                prop_assert!((lhs.data()[i] - (a * xz.data()[i] + xw.data()[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn operator_norm_brackets(seed in 0u64..500) {
            let d = unit_atoms(2, 1, 6, seed);
            let t = 40;
            let est = operator_norm_sq(&d, t).unwrap();
            // Any unit vector's image bounds sigma_max^2 from below; a unit
            // spike activation reproduces one atom.
            prop_assert!(est >= 1.0 - 1e-6);
            // Crude upper bound: K atoms of unit norm over V shifts.
            prop_assert!(est <= (2 * (t - 5)) as f64);
        }
    }
}
