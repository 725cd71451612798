//! 2D cross-correlation kernels (no kernel flip).

use super::{Result, TensorError};

/// Border handling for [`super::Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize, mode: PadMode) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if mode == PadMode::Reflect && pad > 0 && (pad >= h || pad >= w) {
            return Err(TensorError::Invalid(format!(
                "conv2d: reflect padding {pad} needs spatial extents above it, got {h}x{w}"
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        Ok(Self {
            b: x[0],
            c: x[1],
            h,
            w,
            o: k[0],
            kh,
            kw,
            stride,
            pad,
            oh: (hp - kh) / stride + 1,
            ow: (wp - kw) / stride + 1,
        })
    }

    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Source index in the unpadded plane for padded coordinate `i`.
fn source(i: usize, pad: usize, n: usize, mode: PadMode) -> Option<usize> {
    let s = i as isize - pad as isize;
    match mode {
        PadMode::Zero => (s >= 0 && (s as usize) < n).then_some(s as usize),
        PadMode::Reflect => Some(reflect(s, n)),
    }
}

fn pad_input(x: &[f64], g: &ConvGeom, mode: PadMode) -> Vec<f64> {
    if g.pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![0.0; g.b * g.c * hp * wp];
    let cols: Vec<Option<usize>> = (0..wp).map(|j| source(j, g.pad, g.w, mode)).collect();
    for plane in 0..g.b * g.c {
        let src = &x[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for i in 0..hp {
            let Some(si) = source(i, g.pad, g.h, mode) else {
                continue;
            };
            for (j, sj) in cols.iter().enumerate() {
                if let Some(sj) = sj {
                    dst[i * wp + j] = src[si * g.w + sj];
                }
            }
        }
    }
    out
}

fn unpad_grad(gp: &[f64], g: &ConvGeom, mode: PadMode) -> Vec<f64> {
    if g.pad == 0 {
        return gp.to_vec();
    }
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![0.0; g.b * g.c * g.h * g.w];
    let cols: Vec<Option<usize>> = (0..wp).map(|j| source(j, g.pad, g.w, mode)).collect();
    for plane in 0..g.b * g.c {
        let src = &gp[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut out[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        for i in 0..hp {
            let Some(si) = source(i, g.pad, g.h, mode) else {
                continue;
            };
            for (j, sj) in cols.iter().enumerate() {
                if let Some(sj) = sj {
                    dst[si * g.w + sj] += src[i * wp + j];
                }
            }
        }
    }
    out
}

pub(crate) fn forward(x: &[f64], k: &[f64], g: &ConvGeom, mode: PadMode) -> Vec<f64> {
    let xp = pad_input(x, g, mode);
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![0.0; g.b * g.o * g.oh * g.ow];
    for b in 0..g.b {
        for o in 0..g.o {
            let dst = &mut out[(b * g.o + o) * g.oh * g.ow..(b * g.o + o + 1) * g.oh * g.ow];
            for c in 0..g.c {
                let src = &xp[(b * g.c + c) * hp * wp..(b * g.c + c + 1) * hp * wp];
                let kern = &k[(o * g.c + c) * g.kh * g.kw..(o * g.c + c + 1) * g.kh * g.kw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = kern[ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let row = &src[(oy * g.stride + ky) * wp..];
                            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                for (d, s) in drow.iter_mut().zip(&row[kx..kx + g.ow]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    *d += wv * row[ox * g.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_k)` for upstream gradient `gout`.
pub(crate) fn backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mode: PadMode,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let xp = pad_input(x, g, mode);
    let (hp, wp) = (g.hp(), g.wp());
    let mut gxp = need_x.then(|| vec![0.0; g.b * g.c * hp * wp]);
    let mut gk = need_k.then(|| vec![0.0; k.len()]);
    for b in 0..g.b {
        for o in 0..g.o {
            let go = &gout[(b * g.o + o) * g.oh * g.ow..(b * g.o + o + 1) * g.oh * g.ow];
            for c in 0..g.c {
                let base = (b * g.c + c) * hp * wp;
                let kbase = (o * g.c + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[kbase + ky * g.kw + kx];
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let off = base + (oy * g.stride + ky) * wp + kx;
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                if need_k {
                                    acc += grow.iter().zip(&xp[off..off + g.ow]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gx) = gxp.as_mut() {
                                    for (d, s) in gx[off..off + g.ow].iter_mut().zip(grow) {
                                        *d += wv * s;
                                    }
                                }
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    let idx = off + ox * g.stride;
                                    acc += gv * xp[idx];
                                    if let Some(gx) = gxp.as_mut() {
                                        gx[idx] += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kbase + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gxp.map(|gp| unpad_grad(&gp, g, mode)), gk)
}
