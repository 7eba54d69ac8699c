//! Truncated Fourier representation of candidate stream functions and the
//! Gaussian prior `N(0, tau^2 (-Laplacian)^-alpha)` on the torus.
//!
//! A field stores the coefficients of the independent half plane
//! `{kx > 0} ∪ {kx = 0, ky > 0}` with `|k|_inf <= N`; the other half follows
//! from Hermitian symmetry, so every field is real by construction and carries
//! no `k = 0` mode. Constant mean-velocity components sit alongside.
//!
//! Whitened coordinates scale each coefficient by the prior standard deviation
//! so that a prior draw is a vector of independent standard normals.
use crate::geom::{wrap_unit, Point2, Vec2};
use crate::torus_flow::FlowParams;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use thiserror::Error;

const TAU: f64 = 2.0 * PI;

/// Largest supported truncation radius.
pub const MAX_TRUNCATION: usize = 32;
const MAX_ROW: usize = 2 * MAX_TRUNCATION + 1;

pub const FIELD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("truncation N = {n} cannot represent wavenumber {k}")]
    TruncationTooSmall { n: usize, k: u32 },
    #[error("coordinate vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("malformed field record: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorParams {
    /// Covariance exponent of the inverse Laplacian.
    pub alpha: f64,
    /// Overall amplitude multiplier.
    pub tau: f64,
    /// Truncation radius: largest retained `|k|_inf`.
    #[serde(rename = "N", alias = "n")]
    pub n: usize,
    /// Prior standard deviation of each constant mean-velocity component.
    pub mean_flow_std: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            tau: 1.0,
            n: 8,
            mean_flow_std: 1.0,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<(), SpectralError> {
        if !(self.alpha > 1.0) {
            return Err(SpectralError::InvalidPrior(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if self.n == 0 || self.n > MAX_TRUNCATION {
            return Err(SpectralError::InvalidPrior(format!(
                "truncation must lie in 1..={MAX_TRUNCATION}, got {}",
                self.n
            )));
        }
        if !(self.tau >= 0.0) || !(self.mean_flow_std >= 0.0) {
            return Err(SpectralError::InvalidPrior(
                "tau and mean_flow_std must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Eigenvalue `(4 pi^2 |k|^2)^-alpha` of the prior covariance (before `tau^2`).
    pub fn eigenvalue(&self, kx: i32, ky: i32) -> f64 {
        let k2 = (kx * kx + ky * ky) as f64;
        (4.0 * PI * PI * k2).powf(-self.alpha)
    }

    /// Number of whitened coordinates: real and imaginary parts of every
    /// independent wavenumber, plus the two mean-flow components.
    pub fn dim(&self) -> usize {
        2 * independent_count(self.n) + 2
    }

    /// Wavenumbers in whitened-coordinate order (one entry per complex pair).
    pub fn wavenumbers(&self) -> Vec<(i32, i32)> {
        independent_wavenumbers(self.n).collect()
    }

    /// Wavenumber owning whitened coordinate `i`, or `None` for the mean flow.
    pub fn coordinate_wavenumber(&self, i: usize) -> Option<(i32, i32)> {
        let h = independent_count(self.n);
        (i < 2 * h).then(|| independent_wavenumbers(self.n).nth(i / 2).expect("in range"))
    }

    /// Pointwise prior variance of the `(u, v)` velocity components. The
    /// prior is stationary so this does not depend on position.
    pub fn velocity_variance(&self) -> (f64, f64) {
        let t2 = self.tau * self.tau;
        let mut var_u = self.mean_flow_std * self.mean_flow_std;
        let mut var_v = var_u;
        // Each independent mode contributes twice (itself and its conjugate).
        for (kx, ky) in independent_wavenumbers(self.n) {
            let lam = t2 * self.eigenvalue(kx, ky);
            var_u += 2.0 * (TAU * ky as f64).powi(2) * lam;
            var_v += 2.0 * (TAU * kx as f64).powi(2) * lam;
        }
        (var_u, var_v)
    }

    /// Expected squared H¹ seminorm `sum 4 pi^2 |k|^2 tau^2 lambda_k` over the full plane.
    pub fn expected_h1_seminorm_sq(&self) -> f64 {
        let t2 = self.tau * self.tau;
        independent_wavenumbers(self.n)
            .map(|(kx, ky)| {
                let k2 = (kx * kx + ky * ky) as f64;
                2.0 * 4.0 * PI * PI * k2 * t2 * self.eigenvalue(kx, ky)
            })
            .sum()
    }
}

fn independent_count(n: usize) -> usize {
    n * (2 * n + 1) + n
}

fn independent_wavenumbers(n: usize) -> impl Iterator<Item = (i32, i32)> {
    let n = n as i32;
    (0..=n).flat_map(move |kx| {
        let lo = if kx == 0 { 1 } else { -n };
        (lo..=n).map(move |ky| (kx, ky))
    })
}

/// A real stream function `psi` plus a constant mean velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    n: usize,
    // Half plane kx = 0..=n, ky = -n..=n, stored ky-major so that the kx
    // entries of one ky are contiguous.
    re: Vec<f64>,
    im: Vec<f64>,
    pub mean_u: f64,
    pub mean_v: f64,
}

/// Stream function and its gradient at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEval {
    pub psi: f64,
    pub grad: Vec2,
}

impl SpectralField {
    pub fn zeros(n: usize) -> Self {
        assert!(
            (1..=MAX_TRUNCATION).contains(&n),
            "truncation must lie in 1..={MAX_TRUNCATION}"
        );
        let len = (n + 1) * (2 * n + 1);
        Self {
            n,
            re: vec![0.0; len],
            im: vec![0.0; len],
            mean_u: 0.0,
            mean_v: 0.0,
        }
    }

    pub fn truncation(&self) -> usize {
        self.n
    }

    fn row_len(&self) -> usize {
        2 * self.n + 1
    }

    fn half_index(&self, kx: i32, ky: i32) -> usize {
        (ky + self.n as i32) as usize * (self.n + 1) + kx as usize
    }

    fn in_range(&self, kx: i32, ky: i32) -> bool {
        let n = self.n as i32;
        kx.abs() <= n && ky.abs() <= n
    }

    fn is_independent(kx: i32, ky: i32) -> bool {
        kx > 0 || (kx == 0 && ky > 0)
    }

    /// Coefficient `psi_hat_k` for any `k`; zero outside the truncation and at `k = 0`.
    pub fn coeff(&self, kx: i32, ky: i32) -> Complex64 {
        if !self.in_range(kx, ky) || (kx == 0 && ky == 0) {
            return Complex64::new(0.0, 0.0);
        }
        if Self::is_independent(kx, ky) {
            let i = self.half_index(kx, ky);
            Complex64::new(self.re[i], self.im[i])
        } else {
            let i = self.half_index(-kx, -ky);
            Complex64::new(self.re[i], -self.im[i])
        }
    }

    /// Set `psi_hat_k`; the conjugate mode follows automatically. Setting
    /// `k = 0` or a wavenumber outside the truncation panics.
    pub fn set_coeff(&mut self, kx: i32, ky: i32, value: Complex64) {
        assert!(self.in_range(kx, ky), "wavenumber ({kx}, {ky}) outside truncation");
        assert!(!(kx == 0 && ky == 0), "the k = 0 mode is not represented");
        let (kx, ky, value) = if Self::is_independent(kx, ky) {
            (kx, ky, value)
        } else {
            (-kx, -ky, value.conj())
        };
        let i = self.half_index(kx, ky);
        self.re[i] = value.re;
        self.im[i] = value.im;
    }

    pub fn mean_flow(&self) -> Vec2 {
        Vec2::new(self.mean_u, self.mean_v)
    }

    /// Stream function and gradient by direct spectral summation.
    pub fn eval(&self, p: Point2) -> StreamEval {
        let n = self.n;
        let cols = n + 1;
        // e^{2 pi i ky y} for ky = -n..=n by recurrence from e^{2 pi i y}.
        let mut ey_re = [0.0f64; MAX_ROW];
        let mut ey_im = [0.0f64; MAX_ROW];
        let (sy, cy) = (TAU * wrap_unit(p.y)).sin_cos();
        ey_re[n] = 1.0;
        let (mut r, mut i) = (1.0f64, 0.0f64);
        for m in 1..=n {
            let nr = r * cy - i * sy;
            i = r * sy + i * cy;
            r = nr;
            ey_re[n + m] = r;
            ey_im[n + m] = i;
            ey_re[n - m] = r;
            ey_im[n - m] = -i;
        }
        // Per-kx sums over ky of c e^{2 pi i ky y} and of ky c e^{2 pi i ky y}.
        let mut sums = RowSums::default();
        match cols {
            5 => sums.accumulate_fixed::<5>(&self.re, &self.im, &ey_re, &ey_im, n),
            9 => sums.accumulate_fixed::<9>(&self.re, &self.im, &ey_re, &ey_im, n),
            17 => sums.accumulate_fixed::<17>(&self.re, &self.im, &ey_re, &ey_im, n),
            _ => sums.accumulate(cols, &self.re, &self.im, &ey_re, &ey_im, n),
        }
        let RowSums { s0re, s0im, s1re, s1im } = sums;
        let (sx, cx) = (TAU * wrap_unit(p.x)).sin_cos();
        let (mut ex_re, mut ex_im) = (1.0f64, 0.0f64);
        let mut psi = 0.0;
        let mut dx_acc = 0.0;
        let mut dy_acc = 0.0;
        for kx in 0..cols {
            psi += ex_re * s0re[kx] - ex_im * s0im[kx];
            dx_acc += kx as f64 * (ex_re * s0im[kx] + ex_im * s0re[kx]);
            dy_acc += ex_re * s1im[kx] + ex_im * s1re[kx];
            let nr = ex_re * cx - ex_im * sx;
            ex_im = ex_re * sx + ex_im * cx;
            ex_re = nr;
        }
        StreamEval {
            psi: 2.0 * psi,
            grad: Vec2::new(-2.0 * TAU * dx_acc, -2.0 * TAU * dy_acc),
        }
    }

    /// `psi(p)`; the mean flow does not contribute.
    pub fn eval_stream(&self, p: Point2) -> f64 {
        self.eval(p).psi
    }

    /// `(d psi/dx, d psi/dy)`, excluding the mean flow.
    pub fn eval_grad_stream(&self, p: Point2) -> Vec2 {
        self.eval(p).grad
    }

    /// Mean flow plus `(-d psi/dy, d psi/dx)`.
    pub fn eval_velocity(&self, p: Point2) -> Vec2 {
        let g = self.eval(p).grad;
        Vec2::new(self.mean_u - g.y, self.mean_v + g.x)
    }

    /// `self + a * other` on coefficients and mean flow.
    pub fn add_scaled(&mut self, a: f64, other: &SpectralField) {
        assert_eq!(self.n, other.n, "truncation mismatch");
        for (dst, src) in [
            (&mut self.re, &other.re),
            (&mut self.im, &other.im),
        ] {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
        }
        self.mean_u += a * other.mean_u;
        self.mean_v += a * other.mean_v;
    }

    pub fn scale(&mut self, a: f64) {
        for v in [&mut self.re, &mut self.im] {
            v.iter_mut().for_each(|x| *x *= a);
        }
        self.mean_u *= a;
        self.mean_v *= a;
    }

    pub fn to_record(&self) -> FieldRecord {
        let n = self.n as i32;
        let mut coeffs = Vec::with_capacity(self.row_len() * self.row_len());
        for kx in -n..=n {
            for ky in -n..=n {
                let c = self.coeff(kx, ky);
                coeffs.push([c.re, c.im]);
            }
        }
        FieldRecord {
            format_version: FIELD_FORMAT_VERSION,
            n: self.n,
            coeffs,
            mean_u: self.mean_u,
            mean_v: self.mean_v,
        }
    }

    pub fn from_record(rec: &FieldRecord) -> Result<Self, SpectralError> {
        if rec.format_version != FIELD_FORMAT_VERSION {
            return Err(SpectralError::Format(format!(
                "unsupported format version {}",
                rec.format_version
            )));
        }
        if rec.n == 0 || rec.n > MAX_TRUNCATION {
            return Err(SpectralError::Format(format!("bad truncation {}", rec.n)));
        }
        let w = 2 * rec.n + 1;
        if rec.coeffs.len() != w * w {
            return Err(SpectralError::Format(format!(
                "expected {} coefficients, found {}",
                w * w,
                rec.coeffs.len()
            )));
        }
        let n = rec.n as i32;
        let at = |kx: i32, ky: i32| rec.coeffs[((kx + n) as usize) * w + (ky + n) as usize];
        let mut field = SpectralField::zeros(rec.n);
        for kx in -n..=n {
            for ky in -n..=n {
                let [re, im] = at(kx, ky);
                let [cre, cim] = at(-kx, -ky);
                if re != cre || im != -cim {
                    return Err(SpectralError::Format(format!(
                        "coefficients at ({kx}, {ky}) break Hermitian symmetry"
                    )));
                }
                if kx == 0 && ky == 0 {
                    if re != 0.0 || im != 0.0 {
                        return Err(SpectralError::Format("nonzero k = 0 coefficient".into()));
                    }
                } else if Self::is_independent(kx, ky) {
                    field.set_coeff(kx, ky, Complex64::new(re, im));
                }
            }
        }
        field.mean_u = rec.mean_u;
        field.mean_v = rec.mean_v;
        Ok(field)
    }

    /// Hex SHA-256 of the canonical little-endian encoding.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        for (re, im) in self.re.iter().zip(&self.im) {
            h.update(re.to_le_bytes());
            h.update(im.to_le_bytes());
        }
        h.update(self.mean_u.to_le_bytes());
        h.update(self.mean_v.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct RowSums {
    s0re: [f64; MAX_TRUNCATION + 1],
    s0im: [f64; MAX_TRUNCATION + 1],
    s1re: [f64; MAX_TRUNCATION + 1],
    s1im: [f64; MAX_TRUNCATION + 1],
}

impl Default for RowSums {
    fn default() -> Self {
        Self {
            s0re: [0.0; MAX_TRUNCATION + 1],
            s0im: [0.0; MAX_TRUNCATION + 1],
            s1re: [0.0; MAX_TRUNCATION + 1],
            s1im: [0.0; MAX_TRUNCATION + 1],
        }
    }
}

impl RowSums {
    // Compile-time row length lets the kx loop unroll and vectorize.
    #[inline(always)]
    fn accumulate_fixed<const C: usize>(&mut self, re: &[f64], im: &[f64], ey_re: &[f64], ey_im: &[f64], n: usize) {
        let mut s0re = [0.0f64; C];
        let mut s0im = [0.0f64; C];
        let mut s1re = [0.0f64; C];
        let mut s1im = [0.0f64; C];
        for (j, (cre, cim)) in re.chunks_exact(C).zip(im.chunks_exact(C)).enumerate() {
            let cre: &[f64; C] = cre.try_into().expect("row length");
            let cim: &[f64; C] = cim.try_into().expect("row length");
            let (er, ei) = (ey_re[j], ey_im[j]);
            let ky = j as f64 - n as f64;
            for kx in 0..C {
                let pre = cre[kx] * er - cim[kx] * ei;
                let pim = cre[kx] * ei + cim[kx] * er;
                s0re[kx] += pre;
                s0im[kx] += pim;
                s1re[kx] += ky * pre;
                s1im[kx] += ky * pim;
            }
        }
        self.s0re[..C].copy_from_slice(&s0re);
        self.s0im[..C].copy_from_slice(&s0im);
        self.s1re[..C].copy_from_slice(&s1re);
        self.s1im[..C].copy_from_slice(&s1im);
    }

    fn accumulate(&mut self, cols: usize, re: &[f64], im: &[f64], ey_re: &[f64], ey_im: &[f64], n: usize) {
        let (s0re, s0im) = (&mut self.s0re[..cols], &mut self.s0im[..cols]);
        let (s1re, s1im) = (&mut self.s1re[..cols], &mut self.s1im[..cols]);
        for (j, (cre, cim)) in re.chunks_exact(cols).zip(im.chunks_exact(cols)).enumerate() {
            let (er, ei) = (ey_re[j], ey_im[j]);
            let ky = j as f64 - n as f64;
            for kx in 0..cols {
                let pre = cre[kx] * er - cim[kx] * ei;
                let pim = cre[kx] * ei + cim[kx] * er;
                s0re[kx] += pre;
                s0im[kx] += pim;
                s1re[kx] += ky * pre;
                s1im[kx] += ky * pim;
            }
        }
    }
}

/// Serialized form of a [`SpectralField`]: the full coefficient grid in
/// row-major `(kx, ky)` order, `kx, ky = -N..=N`, as `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub format_version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    pub coeffs: Vec<[f64; 2]>,
    pub mean_u: f64,
    pub mean_v: f64,
}

impl Serialize for SpectralField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpectralField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = FieldRecord::deserialize(d)?;
        SpectralField::from_record(&rec).map_err(serde::de::Error::custom)
    }
}

/// Whitened coordinates of a field under a given prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordVector(pub Vec<f64>);

impl CoordVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maps whitened coordinates to fields and back for one prior.
#[derive(Debug, Clone)]
pub struct WhiteningMap {
    prior: PriorParams,
    wavenumbers: Vec<(i32, i32)>,
    // Standard deviation of the real (and of the imaginary) part of each mode.
    part_std: Vec<f64>,
}

impl WhiteningMap {
    pub fn new(prior: &PriorParams) -> Result<Self, SpectralError> {
        prior.validate()?;
        let wavenumbers = prior.wavenumbers();
        let part_std = wavenumbers
            .iter()
            .map(|&(kx, ky)| prior.tau * prior.eigenvalue(kx, ky).sqrt() * FRAC_1_SQRT_2)
            .collect();
        Ok(Self {
            prior: *prior,
            wavenumbers,
            part_std,
        })
    }

    pub fn prior(&self) -> &PriorParams {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        2 * self.wavenumbers.len() + 2
    }

    fn check_dim(&self, len: usize) -> Result<(), SpectralError> {
        if len != self.dim() {
            return Err(SpectralError::DimensionMismatch {
                got: len,
                expected: self.dim(),
            });
        }
        Ok(())
    }

    pub fn decode(&self, coords: &[f64]) -> Result<SpectralField, SpectralError> {
        let mut f = SpectralField::zeros(self.prior.n);
        self.decode_into(coords, &mut f)?;
        Ok(f)
    }

    /// Decode into an existing field of the same truncation, reusing its storage.
    pub fn decode_into(&self, coords: &[f64], out: &mut SpectralField) -> Result<(), SpectralError> {
        self.check_dim(coords.len())?;
        if out.n != self.prior.n {
            return Err(SpectralError::Format("truncation mismatch".into()));
        }
        for (m, (&(kx, ky), &s)) in self.wavenumbers.iter().zip(&self.part_std).enumerate() {
            out.set_coeff(kx, ky, Complex64::new(s * coords[2 * m], s * coords[2 * m + 1]));
        }
        let h = 2 * self.wavenumbers.len();
        out.mean_u = self.prior.mean_flow_std * coords[h];
        out.mean_v = self.prior.mean_flow_std * coords[h + 1];
        Ok(())
    }

    /// Whitened coordinates of `field`. Components with zero prior variance
    /// encode to zero.
    pub fn encode(&self, field: &SpectralField) -> Result<CoordVector, SpectralError> {
        if field.n != self.prior.n {
            return Err(SpectralError::Format("truncation mismatch".into()));
        }
        let inv = |v: f64, s: f64| if s > 0.0 { v / s } else { 0.0 };
        let mut out = Vec::with_capacity(self.dim());
        for (&(kx, ky), &s) in self.wavenumbers.iter().zip(&self.part_std) {
            let c = field.coeff(kx, ky);
            out.push(inv(c.re, s));
            out.push(inv(c.im, s));
        }
        out.push(inv(field.mean_u, self.prior.mean_flow_std));
        out.push(inv(field.mean_v, self.prior.mean_flow_std));
        Ok(CoordVector(out))
    }
}

/// Draw whitened coordinates from the prior (independent standard normals).
pub fn sample_prior_coords<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> CoordVector {
    CoordVector((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Draw a field from the prior.
pub fn sample_prior<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &PriorParams,
) -> Result<SpectralField, SpectralError> {
    let map = WhiteningMap::new(prior)?;
    map.decode(&sample_prior_coords(rng, map.dim()).0)
}

/// The truth flow at `t = 0` in the inference basis:
/// `A sin(2 pi k x) sin(2 pi y)` as four Fourier modes, `mean_u = c`, and for
/// `eps != 0` the perturbation snapshot `eps sin(2 pi x) sin(4 pi y)`.
pub fn project_truth(params: &FlowParams, prior: &PriorParams) -> Result<SpectralField, SpectralError> {
    prior.validate()?;
    if (params.k as usize) > prior.n {
        return Err(SpectralError::TruncationTooSmall {
            n: prior.n,
            k: params.k,
        });
    }
    if params.eps != 0.0 && prior.n < 2 {
        return Err(SpectralError::TruncationTooSmall { n: prior.n, k: 2 });
    }
    let mut f = SpectralField::zeros(prior.n);
    let k = params.k as i32;
    let q = params.amplitude / 4.0;
    // sin a sin b = -(e^{i(a+b)} - e^{i(a-b)} - e^{-i(a-b)} + e^{-i(a+b)}) / 4
    f.set_coeff(k, 1, Complex64::new(-q, 0.0));
    f.set_coeff(k, -1, Complex64::new(q, 0.0));
    if params.eps != 0.0 {
        let e = params.eps / 4.0;
        let (a, b) = (f.coeff(1, 2), f.coeff(1, -2));
        f.set_coeff(1, 2, a + Complex64::new(-e, 0.0));
        f.set_coeff(1, -2, b + Complex64::new(e, 0.0));
    }
    f.mean_u = params.c;
    f.mean_v = 0.0;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus_flow;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force complex summation over the full wavenumber square.
    fn direct_sum(f: &SpectralField, p: Point2) -> (Complex64, Complex64, Complex64) {
        let n = f.truncation() as i32;
        let mut psi = Complex64::new(0.0, 0.0);
        let mut dx = psi;
        let mut dy = psi;
        for kx in -n..=n {
            for ky in -n..=n {
                let phase = TAU * (kx as f64 * p.x + ky as f64 * p.y);
                let e = Complex64::new(phase.cos(), phase.sin()) * f.coeff(kx, ky);
                psi += e;
                dx += Complex64::new(0.0, TAU * kx as f64) * e;
                dy += Complex64::new(0.0, TAU * ky as f64) * e;
            }
        }
        (psi, dx, dy)
    }

    fn random_field(seed: u64, n: usize) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = PriorParams { n, alpha: 1.5, ..Default::default() };
        sample_prior(&mut rng, &prior).unwrap()
    }

    fn sine_x() -> SpectralField {
        // sin(2 pi x) = (e^{i2pi x} - e^{-i2pi x}) / 2i
        let mut f = SpectralField::zeros(2);
        f.set_coeff(1, 0, Complex64::new(0.0, -0.5));
        f
    }

    #[test]
    fn dimension_of_default_prior() {
        assert_eq!(PriorParams::default().dim(), 290);
    }

    #[test]
    fn fast_evaluation_matches_direct_sum() {
        let f = random_field(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let p = Point2::new(rng.random::<f64>() * 3.0 - 1.0, rng.random());
            let (psi, dx, dy) = direct_sum(&f, p);
            let e = f.eval(p);
            assert!(psi.im.abs() < 1e-10);
            assert_abs_diff_eq!(e.psi, psi.re, epsilon = 1e-12);
            assert_abs_diff_eq!(e.grad.x, dx.re, epsilon = 1e-10);
            assert_abs_diff_eq!(e.grad.y, dy.re, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_mode_closed_forms() {
        let f = sine_x();
        assert_abs_diff_eq!(f.eval_stream(Point2::new(0.25, 0.7)), 1.0, epsilon = 1e-14);
        let v = f.eval_velocity(Point2::new(0.0, 0.3));
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v.y, TAU, epsilon = 1e-13);

        let mut g = SpectralField::zeros(1);
        g.set_coeff(0, 1, Complex64::new(0.0, -0.5));
        let grad = g.eval_grad_stream(Point2::new(0.4, 0.0));
        assert_abs_diff_eq!(grad.x, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(grad.y, TAU, epsilon = 1e-13);
    }

    #[test]
    fn zero_field_and_mean_flow() {
        let mut f = SpectralField::zeros(3);
        assert_eq!(f.eval_stream(Point2::new(0.3, 0.8)), 0.0);
        assert_eq!(f.eval_grad_stream(Point2::new(0.3, 0.8)), Vec2::ZERO);
        f.mean_u = 0.3;
        assert_eq!(f.eval_velocity(Point2::new(0.1, 0.9)), Vec2::new(0.3, 0.0));
        assert_eq!(f.eval_stream(Point2::new(0.1, 0.9)), 0.0);
    }

    #[test]
    fn periodic_under_integer_shift() {
        let f = random_field(7, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = Point2::new(rng.random(), rng.random());
            let q = Point2::new(p.x + 1.0, p.y + 1.0);
            assert!((f.eval_stream(p) - f.eval_stream(q)).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_is_divergence_free_and_orthogonal_to_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = sample_prior(&mut rng, &PriorParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-5;
        for _ in 0..100 {
            let p = Point2::new(rng.random(), rng.random());
            let div = (f.eval_velocity(Point2::new(p.x + h, p.y)).x
                - f.eval_velocity(Point2::new(p.x - h, p.y)).x
                + f.eval_velocity(Point2::new(p.x, p.y + h)).y
                - f.eval_velocity(Point2::new(p.x, p.y - h)).y)
                / (2.0 * h);
            assert!(div.abs() < 1e-6, "divergence {div}");
            let g = f.eval_grad_stream(p);
            let w = f.eval_velocity(p) - f.mean_flow();
            assert!(g.dot(w).abs() < 1e-10);
        }
    }

    #[test]
    fn velocity_is_linear() {
        let f = random_field(11, 4);
        let g = random_field(12, 4);
        let (a, b) = (0.7, -1.3);
        let mut h = f.clone();
        h.scale(a);
        h.add_scaled(b, &g);
        let p = Point2::new(0.31, 0.77);
        let lhs = h.eval_velocity(p);
        let rhs = a * f.eval_velocity(p) + b * g.eval_velocity(p);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn project_truth_reproduces_flow() {
        let params = FlowParams::default();
        let prior = PriorParams::default();
        let f = project_truth(&params, &prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let p = Point2::new(rng.random(), rng.random());
            let v = torus_flow::velocity(p, 0.0, &params);
            assert!((f.eval_velocity(p) - v).norm() < 1e-10);
            let psi = torus_flow::stream_function(p, 0.0, &params) + params.c * p.y;
            assert!((f.eval_stream(p) - psi).abs() < 1e-10);
        }
    }

    #[test]
    fn project_truth_includes_initial_perturbation() {
        let params = FlowParams { eps: 0.1, ..Default::default() };
        let f = project_truth(&params, &PriorParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let p = Point2::new(rng.random(), rng.random());
            assert!((f.eval_velocity(p) - torus_flow::velocity(p, 0.0, &params)).norm() < 1e-10);
        }
    }

    #[test]
    fn project_truth_edge_cases() {
        let prior = PriorParams { n: 1, ..Default::default() };
        let wide = FlowParams { k: 2, ..Default::default() };
        assert_eq!(
            project_truth(&wide, &prior),
            Err(SpectralError::TruncationTooSmall { n: 1, k: 2 })
        );
        let jet = FlowParams { amplitude: 0.0, ..Default::default() };
        let f = project_truth(&jet, &PriorParams::default()).unwrap();
        assert_eq!(f.mean_u, jet.c);
        assert!(f.to_record().coeffs.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));
    }

    #[test]
    fn zero_prior_gives_zero_field() {
        let prior = PriorParams { tau: 0.0, mean_flow_std: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = sample_prior(&mut rng, &prior).unwrap();
        assert_eq!(f, SpectralField::zeros(prior.n));
    }

    #[test]
    fn whitening_round_trip() {
        let prior = PriorParams::default();
        let map = WhiteningMap::new(&prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u = sample_prior_coords(&mut rng, map.dim());
        let f = map.decode(&u.0).unwrap();
        let back = map.encode(&f).unwrap();
        for (a, b) in u.0.iter().zip(&back.0) {
            assert!((a - b).abs() < 1e-14 * (1.0 + a.abs()));
        }
        assert!(matches!(
            map.decode(&[0.0; 3]),
            Err(SpectralError::DimensionMismatch { got: 3, .. })
        ));
    }

    #[test]
    fn coordinate_wavenumbers() {
        let prior = PriorParams { n: 2, ..Default::default() };
        assert_eq!(prior.coordinate_wavenumber(0), Some((0, 1)));
        assert_eq!(prior.coordinate_wavenumber(1), Some((0, 1)));
        assert_eq!(prior.coordinate_wavenumber(4), Some((1, -2)));
        assert_eq!(prior.coordinate_wavenumber(prior.dim() - 1), None);
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let f = random_field(16, 8);
        let json = serde_json::to_string(&f).unwrap();
        let g: SpectralField = serde_json::from_str(&json).unwrap();
        assert_eq!(f, g);
        assert_eq!(f.content_hash(), g.content_hash());
    }

    #[test]
    fn record_rejects_broken_symmetry() {
        let mut rec = random_field(17, 2).to_record();
        rec.coeffs[0][1] += 1.0;
        assert!(SpectralField::from_record(&rec).is_err());
        let mut rec = random_field(17, 2).to_record();
        rec.coeffs[12] = [1.0, 0.0];
        assert!(SpectralField::from_record(&rec).is_err());
    }

    #[test]
    fn prior_variance_of_modes_monte_carlo() {
        let prior = PriorParams::default();
        let map = WhiteningMap::new(&prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let draws = 100_000;
        let modes: Vec<(i32, i32)> = prior
            .wavenumbers()
            .into_iter()
            .filter(|&(kx, ky)| kx.abs().max(ky.abs()) <= 3)
            .collect();
        let mut sum_sq = vec![0.0; modes.len()];
        let (mut s10, mut s01, mut s1001) = (0.0, 0.0, 0.0);
        let mut f = SpectralField::zeros(prior.n);
        for _ in 0..draws {
            let u = sample_prior_coords(&mut rng, map.dim());
            map.decode_into(&u.0, &mut f).unwrap();
            for (acc, &(kx, ky)) in sum_sq.iter_mut().zip(&modes) {
                *acc += f.coeff(kx, ky).re.powi(2);
            }
            let a = f.coeff(1, 0).re;
            let b = f.coeff(0, 1).re;
            s10 += a * a;
            s01 += b * b;
            s1001 += a * b;
        }
        for (acc, &(kx, ky)) in sum_sq.iter().zip(&modes) {
            let expected = prior.tau.powi(2) * prior.eigenvalue(kx, ky) / 2.0;
            let got = acc / draws as f64;
            assert!((got / expected - 1.0).abs() < 0.05, "mode ({kx},{ky})");
        }
        let corr = s1001 / (s10 * s01).sqrt();
        assert!(corr.abs() < 3.0 / (draws as f64).sqrt());
    }

    #[test]
    fn h1_seminorm_of_draws() {
        let prior = PriorParams::default();
        let map = WhiteningMap::new(&prior).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let wn = prior.wavenumbers();
        let draws = 20_000;
        let mut acc = 0.0;
        let mut f = SpectralField::zeros(prior.n);
        for _ in 0..draws {
            let u = sample_prior_coords(&mut rng, map.dim());
            map.decode_into(&u.0, &mut f).unwrap();
            acc += wn
                .iter()
                .map(|&(kx, ky)| {
                    2.0 * 4.0 * PI * PI * ((kx * kx + ky * ky) as f64) * f.coeff(kx, ky).norm_sqr()
                })
                .sum::<f64>();
        }
        let expected = prior.expected_h1_seminorm_sq();
        assert!((acc / draws as f64 / expected - 1.0).abs() < 0.05);
    }
}
