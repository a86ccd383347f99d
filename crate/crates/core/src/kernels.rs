//! Univariate robust building blocks: the bounded tanh loss, its derivative
//! and weight function, the M-scale, medians and robust column scaling.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::data::DataMatrix;
use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Constants of the tanh loss.
///
/// The loss is quadratic on `[0, b]`, blends through a log-cosh curve on
/// `[b, c]` and is constant (`d`) beyond `c`. `q1` and `q2` are the shape
/// constants that make the blend once-differentiable at `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoParams {
    pub b: f64,
    pub c: f64,
    pub q1: f64,
    pub q2: f64,
    /// Plateau value `max(rho)`.
    pub d: f64,
    /// Right-hand side of the M-scale equation, `d / 2`.
    pub delta_m: f64,
    /// Gaussian consistency factor of the M-scale.
    pub a: f64,
}

impl RhoParams {
    pub const DEFAULT_B: f64 = 1.5;
    pub const DEFAULT_C: f64 = 4.0;
    pub const DEFAULT_Q1: f64 = 1.540793;
    pub const DEFAULT_Q2: f64 = 0.8622731;

    /// Builds the parameter set, deriving `d`, `delta_m` and the consistency
    /// factor `a` (by quadrature against the standard Gaussian).
    pub fn new(b: f64, c: f64, q1: f64, q2: f64) -> Result<Self> {
        if !(b > 0.0 && c > b && q1 > 0.0 && q2 > 0.0) || ![b, c, q1, q2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tanh loss needs 0 < b < c and positive q1, q2 (got b={b}, c={c}, q1={q1}, q2={q2})"
            )));
        }
        let d = b * b / 2.0 + (q1 / q2) * (q2 * (c - b)).cosh().ln();
        let mut params = RhoParams {
            b,
            c,
            q1,
            q2,
            d,
            delta_m: d / 2.0,
            a: 1.0,
        };
        params.a = calibrate_consistency(&params);
        Ok(params)
    }

    #[inline]
    pub fn rho(&self, t: f64) -> f64 {
        let t = t.abs();
        if t <= self.b {
            0.5 * t * t
        } else if t <= self.c {
            self.d - (self.q1 / self.q2) * (self.q2 * (self.c - t)).cosh().ln()
        } else {
            self.d
        }
    }

    #[inline]
    pub fn psi(&self, t: f64) -> f64 {
        let s = t.abs();
        let v = if s <= self.b {
            s
        } else if s < self.c {
            self.q1 * (self.q2 * (self.c - s)).tanh()
        } else {
            0.0
        };
        v.copysign(t)
    }

    /// `psi(t) / t`, equal to 1 at the origin.
    #[inline]
    pub fn weight(&self, t: f64) -> f64 {
        let s = t.abs();
        if s <= self.b {
            1.0
        } else if s < self.c {
            self.q1 * (self.q2 * (self.c - s)).tanh() / s
        } else {
            0.0
        }
    }

    /// `E[rho(t / a)]` for `t ~ N(0, 1)`.
    pub fn gaussian_expectation(&self, a: f64) -> f64 {
        gaussian_expectation(self, a)
    }
}

impl Default for RhoParams {
    fn default() -> Self {
        static DEFAULT: OnceLock<RhoParams> = OnceLock::new();
        *DEFAULT.get_or_init(|| {
            RhoParams::new(Self::DEFAULT_B, Self::DEFAULT_C, Self::DEFAULT_Q1, Self::DEFAULT_Q2)
                .expect("default tanh constants are valid")
        })
    }
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn gaussian_expectation(p: &RhoParams, a: f64) -> f64 {
    // Quadratic piece in closed form: int_0^x t^2 phi(t) dt = (Phi(x) - 1/2) - x phi(x).
    let xb = a * p.b;
    let xc = a * p.c;
    let quad = ((0.5 - upper_tail(xb)) - xb * phi(xb)) / (2.0 * a * a);
    // Blend piece by composite Simpson; the integrand is smooth on [xb, xc].
    let panels = 4000;
    let h = (xc - xb) / panels as f64;
    let f = |t: f64| p.rho(t / a) * phi(t);
    let mut blend = f(xb) + f(xc);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        blend += w * f(xb + i as f64 * h);
    }
    blend *= h / 3.0;
    let plateau = p.d * upper_tail(xc);
    2.0 * (quad + blend + plateau)
}

fn calibrate_consistency(p: &RhoParams) -> f64 {
    // E[rho(t/a)] decreases from d (a -> 0) to 0 (a -> inf).
    let target = p.delta_m;
    let (mut lo, mut hi) = (1e-3f64, 1e3f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if gaussian_expectation(p, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// A loss function used by the subspace fit: the bounded tanh loss, or the
/// squared loss `t^2` that turns the fit into classical PCA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Rho {
    Tanh(RhoParams),
    Quadratic,
}

impl Default for Rho {
    fn default() -> Self {
        Rho::Tanh(RhoParams::default())
    }
}

impl Rho {
    #[inline]
    pub fn rho(&self, t: f64) -> f64 {
        match self {
            Rho::Tanh(p) => p.rho(t),
            Rho::Quadratic => t * t,
        }
    }

    #[inline]
    pub fn psi(&self, t: f64) -> f64 {
        match self {
            Rho::Tanh(p) => p.psi(t),
            Rho::Quadratic => 2.0 * t,
        }
    }

    /// `psi(t) / (t psi'(0))`: 1 at the origin, in `[0, 1]` everywhere.
    #[inline]
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            Rho::Tanh(p) => p.weight(t),
            Rho::Quadratic => 1.0,
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            Rho::Tanh(p) => p.d,
            Rho::Quadratic => f64::INFINITY,
        }
    }

    /// Upper cutoff beyond which the weight vanishes.
    pub fn cutoff(&self) -> Option<f64> {
        match self {
            Rho::Tanh(p) => Some(p.c),
            Rho::Quadratic => None,
        }
    }
}

/// Median of the finite entries; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    median_in_place(&mut v)
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Ranks `1..=n` with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// M-scale of a sample around its median.
pub fn centered_m_scale(values: &[f64], params: &RhoParams) -> Result<f64> {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| v - med).collect();
    m_scale(&dev, params)
}

/// M-scale of a sample: the `sigma` solving
/// `mean(rho(t_i / (a sigma))) = delta_m`.
///
/// Non-finite entries are treated as missing and skipped. Fails with
/// [`Error::DegenerateScale`] when more than half of the present entries are
/// exactly zero.
pub fn m_scale(t: &[f64], params: &RhoParams) -> Result<f64> {
    let abs: Vec<f64> = t.iter().filter(|v| v.is_finite()).map(|v| v.abs()).collect();
    let n = abs.len();
    let zeros = abs.iter().filter(|&&v| v == 0.0).count();
    if n == 0 || 2 * zeros > n {
        return Err(Error::DegenerateScale { column: None });
    }
    let nf = n as f64;
    let a = params.a;
    let eval = |s: f64| {
        let (mut f, mut df) = (0.0, 0.0);
        for &x in &abs {
            let u = x / (a * s);
            f += params.rho(u);
            df += params.psi(u) * u;
        }
        (f / nf - params.delta_m, -df / (nf * s))
    };

    let mut s0 = {
        let mut tmp = abs.clone();
        median_in_place(&mut tmp) / 0.6745
    };
    if !(s0 > 0.0) {
        s0 = abs.iter().copied().fold(0.0, f64::max);
    }
    let (mut lo, mut hi) = (s0 / 10.0, s0 * 10.0);
    while eval(lo).0 < 0.0 {
        lo /= 10.0;
    }
    while eval(hi).0 > 0.0 {
        hi *= 10.0;
    }

    let mut s = s0.clamp(lo, hi);
    for _ in 0..500 {
        let (f, df) = eval(s);
        if f == 0.0 && df < 0.0 {
            return Ok(s);
        }
        if f >= 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let newton = s - f / df;
        let next = if df < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            (lo * hi).sqrt()
        };
        if (next - s).abs() <= 1e-15 * s || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        s = next;
    }
    Ok(s)
}

/// Per-column robust location (median) and scale (M-scale of the
/// median-centered column).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleVector {
    pub values: Vec<f64>,
    pub centers: Vec<f64>,
}

impl ScaleVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_diagonal(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.values))
    }
}

/// Divides every column by its M-scale. The data are not centered; the
/// column medians are only used inside the scale computation and returned.
pub fn robust_standardize(x: &DataMatrix, params: &RhoParams) -> Result<(DataMatrix, ScaleVector)> {
    let p = x.ncols();
    let mut scales = Vec::with_capacity(p);
    let mut centers = Vec::with_capacity(p);
    for j in 0..p {
        let col = x.column_values(j);
        let first = col.first().copied();
        if first.is_none() || col.iter().all(|&v| Some(v) == first) {
            return Err(Error::DegenerateScale { column: Some(j) });
        }
        let med = median(&col);
        let centered: Vec<f64> = col.iter().map(|v| v - med).collect();
        let s = m_scale(&centered, params).map_err(|_| Error::DegenerateScale { column: Some(j) })?;
        scales.push(s);
        centers.push(med);
    }
    let inv: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
    Ok((
        x.scale_columns(&inv),
        ScaleVector {
            values: scales,
            centers,
        },
    ))
}
