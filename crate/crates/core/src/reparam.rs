//! Gumbel-Max reparametrization of categorical sampling.
//!
//! All randomness of a sampling run lives in a [`NoiseGrid`]; given the grid,
//! every sampler in this crate is a deterministic function of the model.

use std::io::{Read, Write};

use crate::arm::{LogitsGrid, TokenBuffer};
use crate::codec::{write_f64s, write_u32, Reader};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{Matrix, Rng};

const NOISE_MAGIC: &[u8; 4] = b"PSNG";
const NOISE_VERSION: u32 = 1;

/// Standard-Gumbel noise, one value per (position, category).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid(Matrix);

impl NoiseGrid {
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("NoiseGrid"));
        }
        Ok(Self(m))
    }

    /// Grid of zeros; `gumbel_argmax` then reduces to the plain argmax.
    pub fn zeros(d: usize, k: usize) -> Self {
        Self(Matrix::zeros(d, k))
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        self.0.row_mut(i)
    }

    pub fn seq_len(&self) -> usize {
        self.0.rows()
    }

    pub fn categories(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn check_shape(&self, d: usize, k: usize) -> Result<()> {
        if self.0.shape() != (d, k) {
            return Err(shape_err(
                "noise grid",
                format!("({d}, {k})"),
                format!("{:?}", self.0.shape()),
            ));
        }
        Ok(())
    }

    /// Writes the `PSNG` replay format.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(NOISE_MAGIC)?;
        write_u32(w, NOISE_VERSION)?;
        write_u32(w, self.seq_len() as u32)?;
        write_u32(w, self.categories() as u32)?;
        write_f64s(w, self.0.as_slice())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic("noise grid", NOISE_MAGIC)?;
        r.version("noise grid", NOISE_VERSION)?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let data = r.f64s(d * k)?;
        Self::from_matrix(Matrix::from_vec(d, k, data)?)
    }
}

/// `-log(-log(u))` for `u` in `(0, 1)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

#[inline]
pub fn sample_gumbel(rng: &mut Rng) -> f64 {
    gumbel_from_uniform(rng.uniform_open())
}

/// Fresh `d × K` grid of standard Gumbel noise, filled row by row.
pub fn sample_gumbel_grid(rng: &mut Rng, d: usize, k: usize) -> Result<NoiseGrid> {
    if d == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "noise grid needs d, K >= 1 (got {d}, {k})"
        )));
    }
    let data = (0..d * k).map(|_| sample_gumbel(rng)).collect();
    Ok(NoiseGrid(Matrix::from_vec(d, k, data)?))
}

/// `argmax_c (mu_c + eps_c)`, lowest index on ties.
pub fn gumbel_argmax(mu: &[f64], eps: &[f64]) -> Result<usize> {
    if mu.len() != eps.len() || mu.is_empty() {
        return Err(shape_err("gumbel_argmax", mu.len(), eps.len()));
    }
    if mu.iter().chain(eps).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_argmax"));
    }
    Ok(perturbed_argmax(mu, eps))
}

/// Unchecked [`gumbel_argmax`] for the sampling hot loop.
#[inline]
pub(crate) fn perturbed_argmax(mu: &[f64], eps: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = mu[0] + eps[0];
    for c in 1..mu.len() {
        let v = mu[c] + eps[c];
        if v > best_val {
            best = c;
            best_val = v;
        }
    }
    best
}

/// Plain argmax, lowest index on ties.
#[inline]
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..values.len() {
        if values[c] > values[best] {
            best = c;
        }
    }
    best
}

/// Draw from `Gumbel(location)` conditioned on being at most `truncation`.
///
/// Uses max-stability: for `g ~ Gumbel(location)`,
/// `-log(exp(-g) + exp(-T))` has the truncated law. Evaluated as
/// `min(g, T) - log1p(exp(-|g - T|))`, which never exceeds `T`.
pub fn sample_truncated_gumbel(location: f64, truncation: f64, rng: &mut Rng) -> f64 {
    let g = location + sample_gumbel(rng);
    truncate_gumbel(g, truncation)
}

#[inline]
fn truncate_gumbel(g: f64, truncation: f64) -> f64 {
    if truncation == f64::INFINITY {
        return g;
    }
    g.min(truncation) - (-(g - truncation).abs()).exp().ln_1p()
}

/// Samples `eps ~ p(eps | x)` under the Gumbel-Max reparametrization.
///
/// Per position: the noise at the observed category is standard Gumbel;
/// every other category gets a truncated Gumbel below the observed maximum,
/// shifted back by its own log-probability. Positions are visited in order,
/// the observed category first, then the others by increasing index.
pub fn sample_posterior_noise(x: &TokenBuffer, mu: &LogitsGrid, rng: &mut Rng) -> Result<NoiseGrid> {
    let d = x.len();
    let k = mu.categories();
    if mu.len() != d {
        return Err(shape_err("sample_posterior_noise", d, mu.len()));
    }
    let mut eps = Matrix::zeros(d, k);
    for i in 0..d {
        let xi = x.get(i);
        if xi >= k {
            return Err(Error::TokenOutOfRange {
                position: i,
                token: xi,
                categories: k,
            });
        }
        let row = mu.row(i);
        let top_eps = sample_gumbel(rng);
        let top = row[xi] + top_eps;
        let out = eps.row_mut(i);
        out[xi] = top_eps;
        for c in (0..k).filter(|&c| c != xi) {
            let mut e = sample_truncated_gumbel(row[c], top, rng) - row[c];
            // Rounding in (tg - mu) + mu can land on or above the maximum.
            while !(row[c] + e < top || (row[c] + e == top && c > xi)) {
                e = e.next_down();
            }
            out[c] = e;
        }
    }
    NoiseGrid::from_matrix(eps)
}
