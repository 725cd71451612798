//! Blur kernels: Gaussian family (isotropic, anisotropic, generalized,
//! plateau) and the circular-lowpass sinc kernel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::DegradeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Iso,
    Aniso,
    GeneralizedIso,
    GeneralizedAniso,
    PlateauIso,
    PlateauAniso,
    Sinc,
}

impl KernelKind {
    pub fn is_isotropic(self) -> bool {
        matches!(
            self,
            KernelKind::Iso | KernelKind::GeneralizedIso | KernelKind::PlateauIso
        )
    }
}

/// Shape parameters; `beta` is ignored by plain Gaussians, `omega_c` is only
/// read by [`KernelKind::Sinc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub beta: f64,
    pub omega_c: f64,
}

impl KernelParams {
    pub fn iso(sigma: f64) -> Self {
        Self {
            sigma_x: sigma,
            sigma_y: sigma,
            theta: 0.0,
            beta: 1.0,
            omega_c: PI,
        }
    }

    pub fn sinc(omega_c: f64) -> Self {
        Self {
            omega_c,
            ..Self::iso(1.0)
        }
    }
}

/// Bessel function of the first kind, order one, via
/// `J1(x) = (1/π) ∫₀^π cos(τ - x sin τ) dτ` (composite Simpson).
pub fn bessel_j1(x: f64) -> f64 {
    const N: usize = 512;
    let h = PI / N as f64;
    let f = |t: f64| (t - x * t.sin()).cos();
    let mut s = f(0.0) + f(PI);
    for k in 1..N {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(k as f64 * h);
    }
    s * h / 3.0 / PI
}

/// Quadratic form `dᵀ Σ⁻¹ d` on the centered grid, row-major.
fn mahalanobis_grid(size: usize, p: &KernelParams) -> Vec<f64> {
    let (c, s) = (p.theta.cos(), p.theta.sin());
    let (vx, vy) = (p.sigma_x * p.sigma_x, p.sigma_y * p.sigma_y);
    // Σ = R diag(vx, vy) Rᵀ
    let s00 = c * c * vx + s * s * vy;
    let s01 = c * s * (vx - vy);
    let s11 = s * s * vx + c * c * vy;
    let det = s00 * s11 - s01 * s01;
    let (i00, i01, i11) = (s11 / det, -s01 / det, s00 / det);
    let r = (size / 2) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - r, y as f64 - r);
            out.push(dx * dx * i00 + 2.0 * dx * dy * i01 + dy * dy * i11);
        }
    }
    out
}

fn normalize(mut k: Vec<f64>) -> Result<Vec<f64>, DegradeError> {
    let s: f64 = k.iter().sum();
    if !(s.is_finite() && s.abs() > 1e-12) {
        return Err(DegradeError::Config("kernel sums to zero".into()));
    }
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Builds a `size × size` kernel normalized to unit sum.
pub fn build_kernel(kind: KernelKind, size: usize, p: &KernelParams) -> Result<Vec<f64>, DegradeError> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(DegradeError::Config(format!("kernel size must be odd, got {size}")));
    }
    if kind != KernelKind::Sinc && !(p.sigma_x > 0.0 && p.sigma_y > 0.0) {
        return Err(DegradeError::Config("kernel sigmas must be positive".into()));
    }
    let p = if kind.is_isotropic() {
        KernelParams {
            sigma_y: p.sigma_x,
            theta: 0.0,
            ..*p
        }
    } else {
        *p
    };
    let raw: Vec<f64> = match kind {
        KernelKind::Iso | KernelKind::Aniso => mahalanobis_grid(size, &p)
            .into_iter()
            .map(|q| (-0.5 * q).exp())
            .collect(),
        KernelKind::GeneralizedIso | KernelKind::GeneralizedAniso => mahalanobis_grid(size, &p)
            .into_iter()
            .map(|q| (-0.5 * q.powf(p.beta)).exp())
            .collect(),
        KernelKind::PlateauIso | KernelKind::PlateauAniso => mahalanobis_grid(size, &p)
            .into_iter()
            .map(|q| 1.0 / (q.powf(p.beta) + 1.0))
            .collect(),
        KernelKind::Sinc => {
            let r = (size / 2) as f64;
            let w = p.omega_c;
            let mut k = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - r).powi(2) + (y as f64 - r).powi(2)).sqrt();
                    k.push(if d == 0.0 {
                        w * w / (4.0 * PI)
                    } else {
                        w * bessel_j1(w * d) / (2.0 * PI * d)
                    });
                }
            }
            k
        }
    };
    normalize(raw)
}
