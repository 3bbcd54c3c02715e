//! A deterministic, parametric family of image corruptions with five
//! severity levels each. Images are `[c, n, n]` planes with values in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    MotionBlur,
    JpegQuantize,
    ElasticWarp,
    Spatter,
    Contrast,
    Brightness,
    Identity,
}

impl CorruptionKind {
    /// The eight parametric kinds (identity excluded).
    pub const PARAMETRIC: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::JpegQuantize,
        CorruptionKind::ElasticWarp,
        CorruptionKind::Spatter,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::JpegQuantize => "jpeg_quantize",
            CorruptionKind::ElasticWarp => "elastic_warp",
            CorruptionKind::Spatter => "spatter",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Identity => "identity",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::PARAMETRIC
            .into_iter()
            .chain([CorruptionKind::Identity])
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown corruption kind `{s}`")))
    }
}

/// One data distribution: a corruption kind at a severity.
///
/// `variant` jitters the severity parameter by a fixed factor in
/// `[0.85, 1.15]` (variant 0 is the nominal parameter), which lets a domain
/// set grow beyond kinds × severities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: u32,
}

impl DomainSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Self {
        Self {
            kind,
            severity,
            seed: 0,
            variant: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Data(format!(
                "severity {} of {} outside 1..=5",
                self.severity, self.kind
            )));
        }
        Ok(())
    }

    /// Identity of the distribution, ignoring the noise seed.
    pub fn key(&self) -> (CorruptionKind, u8, u32) {
        (self.kind, self.severity, self.variant)
    }

    fn jitter(&self) -> f64 {
        if self.variant == 0 {
            return 1.0;
        }
        let u = seed::mix(&[0xA17E, self.kind.index(), self.severity as u64, self.variant as u64]);
        0.85 + 0.3 * (u >> 11) as f64 / (1u64 << 53) as f64
    }

    fn level(&self, table: [f64; 5]) -> f64 {
        table[self.severity as usize - 1] * self.jitter()
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.severity)?;
        if self.variant != 0 {
            write!(f, "v{}", self.variant)?;
        }
        Ok(())
    }
}

/// Applies `spec` to one image. Pure in `(x, spec, sample_seed)`; output is clipped to `[0, 1]`.
pub fn apply_corruption(x: &[f32], channels: usize, spec: &DomainSpec, sample_seed: u64) -> Result<Vec<f32>> {
    spec.validate()?;
    let plane = x.len() / channels.max(1);
    let n = (plane as f64).sqrt() as usize;
    if channels == 0 || n * n != plane || plane * channels != x.len() {
        return Err(Error::Data(format!(
            "corruption needs square [c, n, n] images; got {} values for {channels} channels",
            x.len()
        )));
    }
    let mut rng = seed::rng(seed::mix(&[
        spec.seed,
        spec.kind.index(),
        spec.severity as u64,
        spec.variant as u64,
        sample_seed,
    ]));
    let scale = n as f64 / 16.0;
    let out = match spec.kind {
        CorruptionKind::Identity => return Ok(x.to_vec()),
        CorruptionKind::GaussianNoise => {
            let sigma = spec.level([0.08, 0.12, 0.18, 0.26, 0.38]);
            x.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v as f64 + sigma * z
                })
                .collect::<Vec<f64>>()
        }
        CorruptionKind::ImpulseNoise => {
            let p = spec.level([0.03, 0.06, 0.09, 0.17, 0.27]);
            x.iter()
                .map(|&v| {
                    let u: f64 = rng.random();
                    let salt: bool = rng.random();
                    if u < p {
                        if salt {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v as f64
                    }
                })
                .collect()
        }
        CorruptionKind::MotionBlur => {
            let len = spec.level([1.0, 2.0, 3.0, 4.5, 6.0]) * scale;
            let angle = rng.random_range(-0.25 * std::f64::consts::PI..0.25 * std::f64::consts::PI);
            motion_blur(x, channels, n, len, angle)
        }
        CorruptionKind::JpegQuantize => {
            let q = spec.level([0.06, 0.12, 0.2, 0.3, 0.45]);
            dct_quantize(x, channels, n, q)
        }
        CorruptionKind::ElasticWarp => {
            let amp = spec.level([0.6, 0.9, 1.2, 1.6, 2.1]) * scale;
            elastic_warp(x, channels, n, amp, &mut rng)
        }
        CorruptionKind::Spatter => {
            let blobs = [2usize, 3, 4, 6, 8][spec.severity as usize - 1];
            let opacity = spec.level([0.35, 0.45, 0.55, 0.65, 0.75]);
            spatter(x, channels, n, blobs, opacity, &mut rng)
        }
        CorruptionKind::Contrast => {
            let c = spec.level([0.75, 0.6, 0.45, 0.3, 0.2]).min(1.0);
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
            x.iter().map(|&v| (v as f64 - mean) * c + mean).collect()
        }
        CorruptionKind::Brightness => {
            let d = spec.level([0.1, 0.2, 0.3, 0.4, 0.5]);
            x.iter().map(|&v| v as f64 + d).collect()
        }
    };
    Ok(out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

fn bilinear(plane: &[f32], n: usize, y: f64, x: f64) -> f64 {
    let max = (n - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * n + c] as f64;
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Average along a centred segment of length `len` pixels at `angle`.
fn motion_blur(x: &[f32], channels: usize, n: usize, len: f64, angle: f64) -> Vec<f64> {
    let taps = (len.ceil() as usize).max(1) * 2 + 1;
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut out = Vec::with_capacity(x.len());
    for c in 0..channels {
        let plane = &x[c * n * n..(c + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..taps {
                    let s = (t as f64 / (taps - 1) as f64 - 0.5) * len;
                    acc += bilinear(plane, n, i as f64 + s * dy, j as f64 + s * dx);
                }
                out.push(acc / taps as f64);
            }
        }
    }
    out
}

fn dct_basis(u: usize, i: usize) -> f64 {
    let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
    a * (((2 * i + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos()
}

/// 8×8 orthonormal DCT, coefficients rounded to a frequency-weighted step.
fn dct_quantize(x: &[f32], channels: usize, n: usize, q: f64) -> Vec<f64> {
    let mut basis = [[0.0f64; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        for (i, b) in row.iter_mut().enumerate() {
            *b = dct_basis(u, i);
        }
    }
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let plane = &x[c * n * n..(c + 1) * n * n];
        for by in (0..n).step_by(8) {
            for bx in (0..n).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + i).min(n - 1) * n + (bx + j).min(n - 1)] as f64;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for i in 0..8 {
                            for j in 0..8 {
                                s += basis[u][i] * basis[v][j] * block[i][j];
                            }
                        }
                        let step = q * (1.0 + 0.5 * (u + v) as f64);
                        coef[u][v] = (s / step).round() * step;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        if by + i >= n || bx + j >= n {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u][i] * basis[v][j] * coef[u][v];
                            }
                        }
                        out[c * n * n + (by + i) * n + bx + j] = s;
                    }
                }
            }
        }
    }
    out
}

fn smooth(field: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (ii, jj) = if horizontal {
                        (i as isize, (j as isize + d).clamp(0, n as isize - 1))
                    } else {
                        ((i as isize + d).clamp(0, n as isize - 1), j as isize)
                    };
                    acc += w * src[ii as usize * n + jj as usize];
                }
                dst[i * n + j] = acc / norm;
            }
        }
        dst
    };
    pass(&pass(field, true), false)
}

fn elastic_warp<R: Rng>(x: &[f32], channels: usize, n: usize, amp: f64, rng: &mut R) -> Vec<f64> {
    let sigma = (n as f64 / 6.0).max(1.0);
    let field = |rng: &mut R| {
        let raw: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
        let s = smooth(&raw, n, sigma);
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt().max(1e-12);
        s.into_iter().map(|v| v / rms * amp).collect::<Vec<f64>>()
    };
    let (fy, fx) = (field(rng), field(rng));
    let mut out = Vec::with_capacity(x.len());
    for c in 0..channels {
        let plane = &x[c * n * n..(c + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                out.push(bilinear(plane, n, i as f64 + fy[k], j as f64 + fx[k]));
            }
        }
    }
    out
}

fn spatter<R: Rng>(x: &[f32], channels: usize, n: usize, blobs: usize, opacity: f64, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        let radius = rng.random_range(0.06..0.16) * n as f64;
        let tone: f64 = if rng.random::<bool>() {
            rng.random_range(0.0..0.2)
        } else {
            rng.random_range(0.8..1.0)
        };
        for i in 0..n {
            for j in 0..n {
                let d = ((i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2)).sqrt();
                // soft edge over one pixel
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0) * opacity;
                if cover > 0.0 {
                    for c in 0..channels {
                        let k = c * n * n + i * n + j;
                        out[k] = out[k] * (1.0 - cover) + tone * cover;
                    }
                }
            }
        }
    }
    out
}
