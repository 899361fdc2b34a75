//! Dense tensor types for multivariate signals, dictionaries, and
//! activation maps.
//!
//! All layouts are row-major `Vec<f64>`. Constructors validate shapes and
//! finiteness so downstream numeric code can assume well-formed inputs.

use crate::error::{Error, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains non-finite value at flat index {i}")));
    }
    Ok(())
}

/// A multivariate signal with `channels` rows of `length` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTensor {
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl SignalTensor {
    pub fn new(channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::OutOfRange(format!(
                "signal must have at least one channel and one sample, got {channels}x{length}"
            )));
        }
        if data.len() != channels * length {
            return Err(Error::DimensionMismatch(format!(
                "signal data has {} values, expected {channels}x{length} = {}",
                data.len(),
                channels * length
            )));
        }
        check_finite(&data, "signal")?;
        Ok(SignalTensor { channels, length, data })
    }

    pub fn zeros(channels: usize, length: usize) -> Self {
        SignalTensor { channels, length, data: vec![0.0; channels * length] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::OutOfRange("signal must have at least one channel".into()));
        }
        let length = rows[0].len();
        if rows.iter().any(|r| r.len() != length) {
            return Err(Error::DimensionMismatch("signal rows have unequal lengths".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * length);
        for r in rows {
            data.extend_from_slice(r);
        }
        SignalTensor::new(rows.len(), length, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.length..(p + 1) * self.length]
    }

    pub fn row_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.length..(p + 1) * self.length]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// A window `[start, start + width)` into a signal's time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub start: usize,
    pub width: usize,
}

impl WindowSpec {
    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if self.width == 0 {
            return Err(Error::OutOfRange("window width must be positive".into()));
        }
        if self.start + self.width > signal_len {
            return Err(Error::OutOfRange(format!(
                "window [{}, {}) exceeds signal length {signal_len}",
                self.start,
                self.start + self.width
            )));
        }
        Ok(())
    }
}

/// Copy of the window `w` of `x`, all channels.
pub fn extract_window(x: &SignalTensor, w: &WindowSpec) -> Result<SignalTensor> {
    w.validate(x.length)?;
    let mut data = Vec::with_capacity(x.channels * w.width);
    for p in 0..x.channels {
        data.extend_from_slice(&x.row(p)[w.start..w.start + w.width]);
    }
    Ok(SignalTensor { channels: x.channels, length: w.width, data })
}

/// Tolerance on the unit-ball constraint for stored dictionary atoms.
pub const BALL_TOL: f64 = 1e-12;

/// A convolutional dictionary: `n_atoms` atoms, each `channels x atom_len`,
/// laid out `[atom][channel][offset]`. Every atom satisfies
/// `squared l2 norm <= 1 + BALL_TOL`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    n_atoms: usize,
    channels: usize,
    atom_len: usize,
    data: Vec<f64>,
}

impl Dictionary {
    /// Builds a dictionary, rejecting atoms outside the unit ball.
    pub fn new(n_atoms: usize, channels: usize, atom_len: usize, data: Vec<f64>) -> Result<Self> {
        let d = Dictionary::new_unconstrained(n_atoms, channels, atom_len, data)?;
        for k in 0..n_atoms {
            let ns = d.atom_norm_sq(k);
            if ns > 1.0 + BALL_TOL {
                return Err(Error::OutOfRange(format!(
                    "atom {k} has squared norm {ns} outside the unit ball"
                )));
            }
        }
        Ok(d)
    }

    /// Builds a dictionary, projecting any atom outside the unit ball onto
    /// the unit sphere. Zero atoms stay zero.
    pub fn new_projected(
        n_atoms: usize,
        channels: usize,
        atom_len: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut d = Dictionary::new_unconstrained(n_atoms, channels, atom_len, data)?;
        d.project_atoms();
        Ok(d)
    }

    fn new_unconstrained(
        n_atoms: usize,
        channels: usize,
        atom_len: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if n_atoms == 0 || channels == 0 || atom_len == 0 {
            return Err(Error::OutOfRange(format!(
                "dictionary must have positive shape, got {n_atoms}x{channels}x{atom_len}"
            )));
        }
        if data.len() != n_atoms * channels * atom_len {
            return Err(Error::DimensionMismatch(format!(
                "dictionary data has {} values, expected {n_atoms}x{channels}x{atom_len} = {}",
                data.len(),
                n_atoms * channels * atom_len
            )));
        }
        check_finite(&data, "dictionary")?;
        Ok(Dictionary { n_atoms, channels, atom_len, data })
    }

    fn project_atoms(&mut self) {
        let stride = self.channels * self.atom_len;
        for k in 0..self.n_atoms {
            let atom = &mut self.data[k * stride..(k + 1) * stride];
            let ns: f64 = atom.iter().map(|v| v * v).sum();
            if ns > 1.0 {
                let inv = 1.0 / ns.sqrt();
                for v in atom.iter_mut() {
                    *v *= inv;
                }
            }
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn atom_len(&self) -> usize {
        self.atom_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flat `channels * atom_len` slice of atom `k`.
    pub fn atom(&self, k: usize) -> &[f64] {
        let stride = self.channels * self.atom_len;
        &self.data[k * stride..(k + 1) * stride]
    }

    /// Row of atom `k` on channel `p`.
    pub fn atom_row(&self, k: usize, p: usize) -> &[f64] {
        let base = (k * self.channels + p) * self.atom_len;
        &self.data[base..base + self.atom_len]
    }

    pub fn atom_norm_sq(&self, k: usize) -> f64 {
        self.atom(k).iter().map(|v| v * v).sum()
    }

    /// Sub-dictionary of atoms `[from, to)`.
    pub fn slice_atoms(&self, from: usize, to: usize) -> Result<Dictionary> {
        if from >= to || to > self.n_atoms {
            return Err(Error::OutOfRange(format!(
                "atom range [{from}, {to}) invalid for {} atoms",
                self.n_atoms
            )));
        }
        let stride = self.channels * self.atom_len;
        Ok(Dictionary {
            n_atoms: to - from,
            channels: self.channels,
            atom_len: self.atom_len,
            data: self.data[from * stride..to * stride].to_vec(),
        })
    }
}

/// Projection onto the unit ball, atom by atom: atoms with norm above one
/// are rescaled to the sphere, others (including zero atoms) are untouched.
pub fn project_unit_ball(d: &Dictionary) -> Dictionary {
    let mut out = d.clone();
    out.project_atoms();
    out
}

/// A dictionary-shaped tensor without the ball constraint; carries
/// gradients and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct DictGrad {
    pub n_atoms: usize,
    pub channels: usize,
    pub atom_len: usize,
    pub data: Vec<f64>,
}

impl DictGrad {
    pub fn zeros(n_atoms: usize, channels: usize, atom_len: usize) -> Self {
        DictGrad { n_atoms, channels, atom_len, data: vec![0.0; n_atoms * channels * atom_len] }
    }

    pub fn zeros_like(d: &Dictionary) -> Self {
        DictGrad::zeros(d.n_atoms(), d.channels(), d.atom_len())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        let stride = self.channels * self.atom_len;
        &self.data[k * stride..(k + 1) * stride]
    }
}

/// `project_unit_ball(d - step * g)`, the projected gradient step.
pub fn step_dictionary(d: &Dictionary, g: &DictGrad, step: f64) -> Result<Dictionary> {
    if (g.n_atoms, g.channels, g.atom_len) != (d.n_atoms(), d.channels(), d.atom_len()) {
        return Err(Error::DimensionMismatch(format!(
            "gradient shape {}x{}x{} does not match dictionary {}x{}x{}",
            g.n_atoms,
            g.channels,
            g.atom_len,
            d.n_atoms(),
            d.channels(),
            d.atom_len()
        )));
    }
    let data: Vec<f64> =
        d.data().iter().zip(&g.data).map(|(dv, gv)| dv - step * gv).collect();
    Dictionary::new_projected(d.n_atoms(), d.channels(), d.atom_len(), data)
}

/// Activation (code) map: one row of `valid_len` coefficients per atom.
/// For a signal of length `T` and atoms of length `L`, `valid_len = T - L + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    n_atoms: usize,
    valid_len: usize,
    data: Vec<f64>,
}

impl ActivationMap {
    pub fn new(n_atoms: usize, valid_len: usize, data: Vec<f64>) -> Result<Self> {
        if n_atoms == 0 || valid_len == 0 {
            return Err(Error::OutOfRange(format!(
                "activation map must have positive shape, got {n_atoms}x{valid_len}"
            )));
        }
        if data.len() != n_atoms * valid_len {
            return Err(Error::DimensionMismatch(format!(
                "activation data has {} values, expected {n_atoms}x{valid_len} = {}",
                data.len(),
                n_atoms * valid_len
            )));
        }
        check_finite(&data, "activation map")?;
        Ok(ActivationMap { n_atoms, valid_len, data })
    }

    pub fn zeros(n_atoms: usize, valid_len: usize) -> Self {
        ActivationMap { n_atoms, valid_len, data: vec![0.0; n_atoms * valid_len] }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.valid_len..(k + 1) * self.valid_len]
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    /// Number of coefficients with magnitude above `tol`.
    pub fn support_count(&self, tol: f64) -> usize {
        self.data.iter().filter(|v| v.abs() > tol).count()
    }
}
