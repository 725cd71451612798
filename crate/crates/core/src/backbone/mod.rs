//! Toy denoisers with per-layer feature taps.
//!
//! Both backbones take the channel concatenation of `z_t` and the resized LR
//! image, add a timestep (plus optional conditioning) embedding after a 1×1
//! stem, and run residual blocks `h + conv3x3(silu(conv1x1(h)))`. The
//! DiT-like stack keeps one resolution; the U-Net-like one goes
//! `C@H -> 2C@H/2 -> 4C@H/4 -> 2C@H/2 -> C@H` with additive skips, then
//! optional extra full-resolution blocks.

mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::tensor::{Graph, PadMode, Result, Tensor, TensorError, Var};

pub use params::{Bound, ParamStore};

/// Width of the sinusoidal timestep embedding.
pub const TIME_DIM: usize = 64;
/// Image channels; the stem sees `2 * IMAGE_CHANNELS` after concatenation.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "dit-like")]
    DitLike,
    #[serde(rename = "unet-like")]
    UnetLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub n_layers: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Width of the learned conditioning embedding; 0 disables it.
    pub cond_width: usize,
    /// Start the output projection at zero so `eps_pred == 0` at init.
    pub zero_init_output: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::DitLike,
            n_layers: 8,
            channels: 8,
            image_size: 32,
            cond_width: 8,
            zero_init_output: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let min_layers = match self.kind {
            BackboneKind::DitLike => 3,
            BackboneKind::UnetLike => 5,
        };
        if self.n_layers < min_layers {
            return Err(TensorError::Invalid(format!(
                "{:?} needs at least {min_layers} layers, got {}",
                self.kind, self.n_layers
            )));
        }
        if self.channels == 0 || self.image_size < 4 {
            return Err(TensorError::Invalid(
                "channels must be positive and image_size at least 4".into(),
            ));
        }
        if self.kind == BackboneKind::UnetLike && !self.image_size.is_multiple_of(4) {
            return Err(TensorError::Invalid(format!(
                "unet-like image_size {} must be divisible by 4",
                self.image_size
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` of tap `i` (1-based).
    pub fn tap_shape(&self, i: usize) -> [usize; 3] {
        let (c, s) = (self.channels, self.image_size);
        match self.kind {
            BackboneKind::DitLike => [c, s, s],
            BackboneKind::UnetLike => match i {
                2 | 4 => [2 * c, s / 2, s / 2],
                3 => [4 * c, s / 4, s / 4],
                _ => [c, s, s],
            },
        }
    }

    /// Shape every tap is adapted to: the final layer's.
    pub fn reference_shape(&self) -> [usize; 3] {
        self.tap_shape(self.n_layers)
    }

    /// Layers whose taps need a learned adapter.
    pub fn adapted_layers(&self) -> Vec<usize> {
        let r = self.reference_shape();
        (1..=self.n_layers).filter(|&i| self.tap_shape(i) != r).collect()
    }
}

/// Closed-form parameter count, adapters included.
pub fn count_params(config: &BackboneConfig) -> Result<usize> {
    config.validate()?;
    let c = config.channels;
    let block = |k: usize| 10 * k * k + 2 * k;
    let stem = (2 * IMAGE_CHANNELS + 1) * c;
    let time = TIME_DIM * c + c;
    let cond = config.cond_width + config.cond_width * c;
    let out = IMAGE_CHANNELS * c + IMAGE_CHANNELS;
    let body = match config.kind {
        BackboneKind::DitLike => config.n_layers * block(c),
        BackboneKind::UnetLike => {
            let stages = 2 * block(c) + 2 * block(2 * c) + block(4 * c);
            let transitions = (2 * c * c + 2 * c) + (8 * c * c + 4 * c) + (8 * c * c + 2 * c) + (2 * c * c + c);
            let adapters = (2 * c * c + c) + (4 * c * c + c) + (2 * c * c + c);
            stages + transitions + adapters + (config.n_layers - 5) * block(c)
        }
    };
    Ok(stem + time + cond + out + body)
}

/// One block output, observed during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTap {
    /// 1-based layer index.
    pub layer: usize,
    pub feature: Var,
    pub is_teacher: bool,
    /// `layer / n` in `(0, 1]`.
    pub depth: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Var,
    /// Ascending in layer; empty when taps are disabled.
    pub taps: Vec<FeatureTap>,
}

/// `[B, TIME_DIM]` sinusoidal embedding of integer timesteps.
pub fn timestep_embedding(t: &[usize]) -> Tensor {
    let half = TIME_DIM / 2;
    let mut data = Vec::with_capacity(t.len() * TIME_DIM);
    for &ti in t {
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new([t.len(), TIME_DIM], data).expect("embedding dims")
}

fn conv_weight<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain / ((inp * k * k) as f64).sqrt();
    Tensor::randn([out, inp, k, k], std, rng)
}

fn bias(c: usize) -> Tensor {
    Tensor::zeros([1, c, 1, 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Block widths per layer and the transitions feeding them.
    fn layer_channels(&self, i: usize) -> usize {
        self.config.tap_shape(i)[0]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let cfg = &self.config;
        let c = cfg.channels;
        let res_gain = 1.0 / (cfg.n_layers as f64).sqrt();
        let mut p = ParamStore::new();
        let mut add = |name: String, t: Tensor| p.push(name, t).expect("unique names");
        add("stem.w".into(), conv_weight(c, 2 * IMAGE_CHANNELS, 1, 1.0, rng));
        add("stem.b".into(), bias(c));
        add(
            "time.w".into(),
            Tensor::randn([TIME_DIM, c], 1.0 / (TIME_DIM as f64).sqrt(), rng),
        );
        add("time.b".into(), Tensor::zeros([c]));
        if cfg.cond_width > 0 {
            add("cond.embed".into(), Tensor::randn([1, cfg.cond_width], 1.0, rng));
            add(
                "cond.w".into(),
                Tensor::randn([cfg.cond_width, c], 1.0 / (cfg.cond_width as f64).sqrt(), rng),
            );
        }
        for i in 1..=cfg.n_layers {
            if cfg.kind == BackboneKind::UnetLike && (2..=5).contains(&i) {
                let (name, from) = match i {
                    2 => ("down.1", c),
                    3 => ("down.2", 2 * c),
                    4 => ("up.1", 4 * c),
                    _ => ("up.2", 2 * c),
                };
                let to = self.layer_channels(i);
                add(format!("{name}.w"), conv_weight(to, from, 1, 1.0, rng));
                add(format!("{name}.b"), bias(to));
            }
            let k = self.layer_channels(i);
            add(format!("block.{i}.mix.w"), conv_weight(k, k, 1, 1.0, rng));
            add(format!("block.{i}.mix.b"), bias(k));
            add(format!("block.{i}.spatial.w"), conv_weight(k, k, 3, res_gain, rng));
            add(format!("block.{i}.spatial.b"), bias(k));
        }
        let out_w = if cfg.zero_init_output {
            Tensor::zeros([IMAGE_CHANNELS, c, 1, 1])
        } else {
            conv_weight(IMAGE_CHANNELS, c, 1, 1.0, rng)
        };
        add("out.w".into(), out_w);
        add("out.b".into(), bias(IMAGE_CHANNELS));
        let r = cfg.reference_shape()[0];
        for i in cfg.adapted_layers() {
            let from = self.layer_channels(i);
            add(format!("adapter.{i}.w"), conv_weight(r, from, 1, 1.0, rng));
            add(format!("adapter.{i}.b"), bias(r));
        }
        p
    }

    fn conv_bias(&self, g: &mut Graph, p: &Bound, x: Var, name: &str, pad: usize) -> Result<Var> {
        let h = g.conv2d(x, p.var(&format!("{name}.w"))?, 1, pad, PadMode::Zero)?;
        g.add(h, p.var(&format!("{name}.b"))?)
    }

    fn block(&self, g: &mut Graph, p: &Bound, h: Var, i: usize) -> Result<Var> {
        let u = self.conv_bias(g, p, h, &format!("block.{i}.mix"), 0)?;
        let u = g.silu(u);
        let r = self.conv_bias(g, p, u, &format!("block.{i}.spatial"), 1)?;
        g.add(h, r)
    }

    /// Predicts ε. `z_t` and `cond_img` are `[B, 3, S, S]`; `c` is a
    /// `[1 | B, cond_width]` conditioning vector, defaulting to the learned
    /// embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        z_t: Var,
        t: &[usize],
        cond_img: Var,
        c: Option<Var>,
        with_taps: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let zs = g.shape(z_t).to_vec();
        let s = cfg.image_size;
        if zs.len() != 4 || zs[1] != IMAGE_CHANNELS || zs[2] != s || zs[3] != s {
            return Err(TensorError::ShapeMismatch {
                op: "backbone input",
                left: zs,
                right: vec![0, IMAGE_CHANNELS, s, s],
            });
        }
        if g.shape(cond_img) != zs.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "backbone conditioning",
                left: zs,
                right: g.shape(cond_img).to_vec(),
            });
        }
        let b = zs[0];
        if t.len() != b {
            return Err(TensorError::Invalid(format!("{} timesteps for batch {b}", t.len())));
        }
        let ch = cfg.channels;
        let x = g.concat(&[z_t, cond_img], 1)?;
        let h = self.conv_bias(g, p, x, "stem", 0)?;

        let temb = g.constant(timestep_embedding(t));
        let e = g.matmul(temb, p.var("time.w")?)?;
        let e = g.add(e, p.var("time.b")?)?;
        let mut e = g.silu(e);
        if cfg.cond_width > 0 {
            let cv = match c {
                Some(v) => v,
                None => p.var("cond.embed")?,
            };
            let proj = g.matmul(cv, p.var("cond.w")?)?;
            e = g.add(e, proj)?;
        }
        let e = g.reshape(e, &[b, ch, 1, 1])?;
        let mut h = g.add(h, e)?;

        let mut feats = Vec::with_capacity(cfg.n_layers);
        let mut skips: Vec<Var> = Vec::new();
        for i in 1..=cfg.n_layers {
            if cfg.kind == BackboneKind::UnetLike {
                h = match i {
                    2 | 3 => {
                        skips.push(h);
                        let d = g.avg_pool2(h)?;
                        self.conv_bias(g, p, d, if i == 2 { "down.1" } else { "down.2" }, 0)?
                    }
                    4 | 5 => {
                        let [_, hh, ww] = cfg.tap_shape(i);
                        let u = g.resize_bilinear(h, hh, ww)?;
                        let u = self.conv_bias(g, p, u, if i == 4 { "up.1" } else { "up.2" }, 0)?;
                        let skip = skips.pop().expect("encoder skip");
                        g.add(u, skip)?
                    }
                    _ => h,
                };
            }
            h = self.block(g, p, h, i)?;
            if with_taps {
                feats.push(h);
            }
        }
        let eps = self.conv_bias(g, p, h, "out", 0)?;
        let n = cfg.n_layers;
        let taps = feats
            .into_iter()
            .enumerate()
            .map(|(k, feature)| FeatureTap {
                layer: k + 1,
                feature,
                is_teacher: k + 1 == n,
                depth: (k + 1) as f64 / n as f64,
            })
            .collect();
        Ok(ForwardOutput { eps, taps })
    }

    /// Maps a tap to the reference (final-layer) shape: learned 1×1 conv
    /// when channels differ, then bilinear resize. Reference-shaped taps
    /// pass through untouched.
    pub fn adapt_tap(&self, g: &mut Graph, p: &Bound, tap: &FeatureTap) -> Result<Var> {
        let shape = g.shape(tap.feature).to_vec();
        let r = self.config.reference_shape();
        if shape[1..] == r {
            return Ok(tap.feature);
        }
        let name = format!("adapter.{}", tap.layer);
        let weights = match (p.try_var(&format!("{name}.w")), p.try_var(&format!("{name}.b"))) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        };
        adapt_feature(g, tap.feature, weights, r)
    }
}

/// Fixed `[out, in]` channel map averaging (or repeating) input channels by
/// interval overlap.
pub fn channel_average_matrix(inp: usize, out: usize) -> Tensor {
    let ratio = inp as f64 / out as f64;
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
        for i in 0..inp {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            m[o * inp + i] = overlap / ratio;
        }
    }
    Tensor::new([out, inp, 1, 1], m).expect("dims")
}

/// Adapts `[B, C, H, W]` to `target = (C', H', W')`: a 1×1 conv (learned
/// `weights`, or a parameter-free channel average) when channels differ,
/// then bilinear resize when the extent differs.
pub fn adapt_feature(g: &mut Graph, x: Var, weights: Option<(Var, Var)>, target: [usize; 3]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(TensorError::Invalid(format!("adapter expects [B,C,H,W], got {s:?}")));
    }
    let mut h = x;
    if s[1] != target[0] {
        h = match weights {
            Some((w, b)) => {
                let y = g.conv2d(h, w, 1, 0, PadMode::Zero)?;
                g.add(y, b)?
            }
            None => {
                let m = g.constant(channel_average_matrix(s[1], target[0]));
                g.conv2d(h, m, 1, 0, PadMode::Zero)?
            }
        };
    }
    if (s[2], s[3]) != (target[1], target[2]) {
        h = g.resize_bilinear(h, target[1], target[2])?;
    }
    Ok(h)
}

/// A backbone with frozen parameters, usable by the sampler.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamStore,
}

impl Snapshot<'_> {
    /// Forward pass without gradients; returns ε and the tap tensors.
    pub fn observe(&self, z_t: &Tensor, t: &[usize], cond: &Tensor, with_taps: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (z, c) = (g.constant(z_t.clone()), g.constant(cond.clone()));
        let out = self.backbone.forward(&mut g, &p, z, t, c, None, with_taps)?;
        let taps = out.taps.iter().map(|tap| g.value(tap.feature).clone()).collect();
        Ok((g.value(out.eps).clone(), taps))
    }
}

impl Denoiser for Snapshot<'_> {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        Ok(self.observe(z_t, t, cond, false)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: BackboneKind, n: usize) -> BackboneConfig {
        BackboneConfig {
            kind,
            n_layers: n,
            channels: 4,
            image_size: 8,
            cond_width: 3,
            zero_init_output: true,
        }
    }

    fn inputs(b: usize, s: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn([b, 3, s, s], 1.0, &mut rng),
            Tensor::randn([b, 3, s, s], 0.5, &mut rng),
        )
    }

    #[test]
    fn output_shape_taps_and_zero_init() {
        for (kind, n) in [(BackboneKind::DitLike, 4), (BackboneKind::UnetLike, 6)] {
            let bb = Backbone::new(cfg(kind, n)).unwrap();
            let params = bb.init_params(&mut ChaCha8Rng::seed_from_u64(1));
            let (z, c) = inputs(2, 8, 2);
            let snap = Snapshot {
                backbone: &bb,
                params: &params,
            };
            let (eps, taps) = snap.observe(&z, &[10, 500], &c, true).unwrap();
            assert_eq!(eps.shape(), z.shape());
            assert!(eps.data().iter().all(|v| *v == 0.0));
            assert_eq!(taps.len(), n);
            for (i, t) in taps.iter().enumerate() {
                let [ch, h, w] = bb.config().tap_shape(i + 1);
                assert_eq!(t.shape(), &[2, ch, h, w]);
            }
            let distinct: std::collections::HashSet<_> = taps.iter().map(|t| t.shape()[2]).collect();
            assert_eq!(distinct.len() > 1, kind == BackboneKind::UnetLike);
        }
    }

    #[test]
    fn exactly_one_teacher_in_ascending_order() {
        let bb = Backbone::new(cfg(BackboneKind::DitLike, 5)).unwrap();
        let params = bb.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let (z, c) = inputs(1, 8, 3);
        let (z, c) = (g.constant(z), g.constant(c));
        let out = bb.forward(&mut g, &p, z, &[3], c, None, true).unwrap();
        assert_eq!(out.taps.iter().filter(|t| t.is_teacher).count(), 1);
        assert!(out.taps.last().unwrap().is_teacher);
        assert!(out.taps.windows(2).all(|w| w[0].layer < w[1].layer));
        assert_eq!(out.taps.last().unwrap().depth, 1.0);
    }

    #[test]
    fn taps_do_not_change_the_prediction() {
        let mut c = cfg(BackboneKind::UnetLike, 5);
        c.zero_init_output = false;
        let bb = Backbone::new(c).unwrap();
        let params = bb.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        let snap = Snapshot {
            backbone: &bb,
            params: &params,
        };
        let (z, cond) = inputs(2, 8, 4);
        let a = snap.observe(&z, &[1, 2], &cond, true).unwrap().0;
        let b = snap.observe(&z, &[1, 2], &cond, false).unwrap().0;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn param_count_matches_the_store() {
        for kind in [BackboneKind::DitLike, BackboneKind::UnetLike] {
            for n in [5, 6, 8] {
                for ch in [2, 4, 8] {
                    let mut c = cfg(kind, n);
                    c.channels = ch;
                    let bb = Backbone::new(c.clone()).unwrap();
                    let store = bb.init_params(&mut ChaCha8Rng::seed_from_u64(0));
                    assert_eq!(store.numel(), count_params(&c).unwrap(), "{kind:?} n={n} c={ch}");
                }
            }
        }
    }

    #[test]
    fn param_count_formula_cases() {
        let mut c = cfg(BackboneKind::DitLike, 8);
        c.channels = 8;
        c.cond_width = 8;
        // stem 56, time 520, cond 72, out 27, blocks 8 * (640 + 16)
        assert_eq!(count_params(&c).unwrap(), 56 + 520 + 72 + 27 + 8 * 656);
        let base = count_params(&c).unwrap();
        c.n_layers = 9;
        assert_eq!(count_params(&c).unwrap() - base, 656);
        c.n_layers = 0;
        assert!(count_params(&c).is_err());
        let mut u = cfg(BackboneKind::UnetLike, 5);
        u.channels = 8;
        let small = count_params(&u).unwrap();
        u.n_layers = 6;
        assert_eq!(count_params(&u).unwrap() - small, 656);
    }

    #[test]
    fn doubling_channels_roughly_quadruples_block_params() {
        let mut c = cfg(BackboneKind::DitLike, 8);
        c.channels = 16;
        let a = count_params(&c).unwrap();
        c.channels = 32;
        let b = count_params(&c).unwrap();
        let ratio = b as f64 / a as f64;
        assert!((3.0..4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn adapter_shapes_and_identity_path() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.param(Tensor::randn([2, 8, 16, 16], 1.0, &mut rng));
        let w = g.param(Tensor::randn([16, 8, 1, 1], 0.3, &mut rng));
        let b = g.param(Tensor::zeros([1, 16, 1, 1]));
        let y = adapt_feature(&mut g, x, Some((w, b)), [16, 32, 32]).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 32, 32]);
        let same = adapt_feature(&mut g, x, None, [8, 16, 16]).unwrap();
        assert_eq!(same, x);
        let k = g.constant(Tensor::full([1, 1, 4, 4], 0.3));
        let up = adapt_feature(&mut g, k, None, [1, 8, 8]).unwrap();
        assert!(g.value(up).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let m = channel_average_matrix(4, 2);
        assert_eq!(m.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let m = channel_average_matrix(2, 4);
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn noise_loss_leaves_adapters_without_gradient() {
        let mut c = cfg(BackboneKind::UnetLike, 5);
        c.zero_init_output = false;
        let bb = Backbone::new(c).unwrap();
        let params = bb.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let (z, cond) = inputs(2, 8, 6);
        let (z, cond) = (g.constant(z), g.constant(cond));
        let out = bb.forward(&mut g, &p, z, &[5, 9], cond, None, true).unwrap();
        for tap in &out.taps {
            bb.adapt_tap(&mut g, &p, tap).unwrap();
        }
        let loss = g.mse(out.eps, z).unwrap();
        g.backward(loss).unwrap();
        let mut seen = 0;
        for (name, &v) in params.names().iter().zip(p.vars()) {
            if name.starts_with("adapter.") {
                seen += 1;
                assert!(g.grad(v).data().iter().all(|x| *x == 0.0), "{name}");
            }
        }
        assert_eq!(seen, 6);
        assert!(g.grad(p.var("stem.w").unwrap()).data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn backbone_gradient_check() {
        for kind in [BackboneKind::DitLike, BackboneKind::UnetLike] {
            let mut c = cfg(kind, if kind == BackboneKind::DitLike { 3 } else { 5 });
            c.channels = 2;
            c.zero_init_output = false;
            let bb = Backbone::new(c).unwrap();
            let store = bb.init_params(&mut ChaCha8Rng::seed_from_u64(11));
            let (z, cond) = inputs(1, 8, 12);
            let report = grad_check(
                |g, vars| {
                    let p = Bound::from_vars(&store, vars.to_vec())?;
                    let (zv, cv) = (g.constant(z.clone()), g.constant(cond.clone()));
                    let out = bb.forward(g, &p, zv, &[100], cv, None, false)?;
                    let sq = g.mul(out.eps, out.eps)?;
                    Ok(g.mean(sq))
                },
                store.tensors(),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{kind:?}: {report:?}");
        }
    }
}
