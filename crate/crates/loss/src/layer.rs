//! Per-sample band terms, per-layer aggregation over the batch, and the
//! total objective.

use framer_core::spectral::{Band, BandMasks};
use framer_core::tensor::{Graph, Tensor, TensorError, Var};
use framer_core::train::LayerRecord;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BandLoss, FramerConfig, LossKind, NegativeSelect, TeacherSelect};
use crate::contrastive::{inter_cl, intra_cl};
use crate::modulation::{fam_gate, faw_weights, FawWeights, LayerModulation};
use crate::negative::{draw_negative, previous_layer};
use crate::{LossError, Result};

/// Band features (`[LF, HF]`) of one sample at one student layer.
#[derive(Debug, Clone)]
pub struct SampleBands {
    pub student: [Var; 2],
    pub teacher: [Var; 2],
    /// Negative-layer band used by each branch.
    pub negative: [Var; 2],
    /// Same-layer bands of the other samples in the batch.
    pub batch_negatives: [Vec<Var>; 2],
}

/// Where the alignment gates come from.
#[derive(Debug, Clone, Copy)]
pub enum Gates {
    /// ReLU-cosine of these band features, detached inside the graph.
    InGraph { student: [Var; 2], teacher: [Var; 2] },
    /// Values injected as constants.
    Fixed([f64; 2]),
}

#[derive(Debug, Clone, Copy)]
pub struct SampleTerms {
    pub loss: Var,
    /// Unweighted sum of the pairwise contrastive terms.
    pub intra: f64,
    /// Unweighted sum of the in-batch contrastive terms.
    pub inter: f64,
    pub modulation: LayerModulation,
}

/// Unweighted term of one band, `None` when the band is switched off.
#[allow(clippy::too_many_arguments)]
pub fn band_term(
    g: &mut Graph,
    objective: LossKind,
    kind: BandLoss,
    student: Var,
    teacher: Var,
    negative: Var,
    batch_negatives: &[Var],
    temperature: f64,
) -> Result<Option<Var>> {
    if kind == BandLoss::None {
        return Ok(None);
    }
    let term = match (objective, kind) {
        (LossKind::Contrastive, BandLoss::Intra) => intra_cl(g, student, teacher, negative, temperature)?,
        (LossKind::Contrastive, _) => inter_cl(g, student, teacher, negative, batch_negatives, temperature)?,
        (LossKind::MseFreq, _) => g.mse(student, teacher)?,
        (other, _) => return Err(LossError::Config(format!("{other:?} has no band terms"))),
    };
    Ok(Some(term))
}

/// `w̃_lf · L_lf + w̃_hf · L_hf` for one sample, with `w̃ = w · a`. The
/// toggles replace the weights by 1/2 and the gates by 1.
pub fn sample_layer_loss(
    g: &mut Graph,
    config: &FramerConfig,
    layer: usize,
    bands: &SampleBands,
    weights: FawWeights,
    gates: Gates,
) -> Result<SampleTerms> {
    let w = if config.use_faw { weights } else { FawWeights::EQUAL };
    let gate_nodes: [Var; 2] = match (config.use_fam, gates) {
        (false, _) => [g.scalar(1.0), g.scalar(1.0)],
        (true, Gates::Fixed(a)) => [g.scalar(a[0]), g.scalar(a[1])],
        (true, Gates::InGraph { student, teacher }) => [
            fam_gate(g, student[0], teacher[0])?,
            fam_gate(g, student[1], teacher[1])?,
        ],
    };
    let a = [g.value(gate_nodes[0]).item(), g.value(gate_nodes[1]).item()];
    let (mut total, mut intra, mut inter) = (None, 0.0, 0.0);
    for (k, kind) in config.bands().into_iter().enumerate() {
        let Some(term) = band_term(
            g,
            config.objective,
            kind,
            bands.student[k],
            bands.teacher[k],
            bands.negative[k],
            &bands.batch_negatives[k],
            config.temperature,
        )?
        else {
            continue;
        };
        if config.objective == LossKind::Contrastive {
            match kind {
                BandLoss::Intra => intra += g.value(term).item(),
                _ => inter += g.value(term).item(),
            }
        }
        let coef = g.scale(gate_nodes[k], w.as_array()[k]);
        let weighted = g.mul(term, coef)?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let loss = total.unwrap_or_else(|| g.scalar(0.0));
    Ok(SampleTerms {
        loss,
        intra,
        inter,
        modulation: LayerModulation::new(layer, w, a),
    })
}

/// Every sampled or data-dependent choice of one loss evaluation, so the
/// same objective can be re-evaluated at perturbed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModulation {
    pub teacher: usize,
    /// Negative layers `[LF, HF]` per (student, sample), student-major.
    pub negatives: Vec<[usize; 2]>,
    /// Per (student, sample), student-major.
    pub modulation: Vec<LayerModulation>,
}

#[derive(Debug, Clone)]
pub struct FramerOutput {
    /// Sum of the per-layer terms; `None` when distillation is off.
    pub loss: Option<Var>,
    pub records: Vec<LayerRecord>,
    pub frozen: FrozenModulation,
}

/// Breakdown of the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub per_layer: Vec<LayerRecord>,
    pub noise_loss: f64,
    pub total: f64,
}

/// `noise + Σ framer_i`, rejecting non-finite components by layer.
pub fn total_loss(noise_loss: f64, per_layer: &[LayerRecord]) -> Result<LossBreakdown> {
    if !noise_loss.is_finite() {
        return Err(LossError::NonFinite {
            what: "noise loss",
            layer: None,
        });
    }
    let mut total = noise_loss;
    for r in per_layer {
        let fields = [r.framer, r.intra, r.inter, r.w_lf, r.w_hf, r.a_lf, r.a_hf];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite {
                what: "distillation term",
                layer: Some(r.i),
            });
        }
        total += r.framer;
    }
    Ok(LossBreakdown {
        per_layer: per_layer.to_vec(),
        noise_loss,
        total,
    })
}

fn sample_slice(t: &Tensor, b: usize) -> Tensor {
    let inner: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[b * inner..(b + 1) * inner].to_vec()).expect("slice")
}

/// The distillation objective over all student layers of a batch.
#[derive(Debug, Clone)]
pub struct FramerLoss {
    config: FramerConfig,
    masks: BandMasks,
}

impl FramerLoss {
    pub fn new(config: FramerConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let masks = BandMasks::new(height, width, config.radius)?;
        Ok(Self { config, masks })
    }

    pub fn config(&self) -> &FramerConfig {
        &self.config
    }

    pub fn masks(&self) -> &BandMasks {
        &self.masks
    }

    fn teacher(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let minimum = match self.config.teacher_select {
            TeacherSelect::FinalMinus2 => 3,
            _ => 2,
        };
        if n < minimum {
            return Err(LossError::InsufficientLayers { n });
        }
        Ok(match self.config.teacher_select {
            TeacherSelect::Final => n,
            TeacherSelect::FinalMinus1 => n - 1,
            TeacherSelect::FinalMinus2 => n - 2,
            TeacherSelect::Random => rng.random_range(1..=n),
        })
    }

    fn negative(&self, i: usize, teacher: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        match self.config.negative_select {
            NegativeSelect::RandomLayer => Ok(draw_negative(i, teacher, n, rng)?.layer),
            NegativeSelect::PreviousLayer => previous_layer(i, teacher, n),
        }
    }

    /// `features[l]` is layer `l + 1` mapped to the reference shape
    /// `[B, C, H, W]`. Random choices are drawn from `rng` in a fixed order
    /// (teacher, then per student layer and sample: LF negative, HF
    /// negative when redrawn) unless `frozen` supplies them.
    #[allow(clippy::needless_range_loop)]
    pub fn compute(
        &self,
        g: &mut Graph,
        features: &[Var],
        rng: &mut ChaCha8Rng,
        frozen: Option<&FrozenModulation>,
    ) -> Result<FramerOutput> {
        let cfg = &self.config;
        let n = features.len();
        let empty = FramerOutput {
            loss: None,
            records: Vec::new(),
            frozen: FrozenModulation {
                teacher: n,
                negatives: Vec::new(),
                modulation: Vec::new(),
            },
        };
        if cfg.objective == LossKind::None {
            return Ok(empty);
        }
        let shape = g
            .shape(*features.first().ok_or(LossError::InsufficientLayers { n: 0 })?)
            .to_vec();
        if shape.len() != 4 || (shape[2], shape[3]) != (self.masks.height(), self.masks.width()) {
            return Err(TensorError::Invalid(format!(
                "features must be [B, C, {}, {}], got {shape:?}",
                self.masks.height(),
                self.masks.width()
            ))
            .into());
        }
        for &f in features {
            if g.shape(f) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "framer features",
                    left: shape.clone(),
                    right: g.shape(f).to_vec(),
                }
                .into());
            }
        }
        let batch = shape[0];
        let teacher = match frozen {
            Some(f) => f.teacher,
            None => self.teacher(n, rng)?,
        };
        let tf = if cfg.detach_teacher {
            g.detach(features[teacher - 1])
        } else {
            features[teacher - 1]
        };
        let students: Vec<usize> = (1..=n).filter(|&i| i != teacher).collect();

        if cfg.objective == LossKind::Mse {
            let mut records = Vec::new();
            let mut total: Option<Var> = None;
            for &i in &students {
                let term = g.mse(features[i - 1], tf)?;
                records.push(LayerRecord {
                    i,
                    intra: 0.0,
                    inter: 0.0,
                    w_lf: 0.5,
                    w_hf: 0.5,
                    a_lf: 1.0,
                    a_hf: 1.0,
                    framer: g.value(term).item(),
                });
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
            return Ok(FramerOutput {
                loss: total,
                records,
                frozen: FrozenModulation {
                    teacher,
                    ..empty.frozen
                },
            });
        }

        let contrastive = cfg.objective == LossKind::Contrastive;
        if contrastive && n < 3 {
            return Err(LossError::InsufficientLayers { n });
        }
        let lf = self.masks.uncentered(Band::Lf);
        let hf = self.masks.uncentered(Band::Hf);
        let mut band_cache: Vec<Option<[Var; 2]>> = vec![None; n];
        let mut bands_of = |g: &mut Graph, l: usize| -> Result<[Var; 2]> {
            if let Some(b) = band_cache[l - 1] {
                return Ok(b);
            }
            let x = features[l - 1];
            let b = [g.band_filter(x, lf.clone())?, g.band_filter(x, hf.clone())?];
            band_cache[l - 1] = Some(b);
            Ok(b)
        };
        let teacher_bands = [g.band_filter(tf, lf.clone())?, g.band_filter(tf, hf.clone())?];
        let teacher_values: Vec<Tensor> = (0..batch).map(|b| sample_slice(g.value(tf), b)).collect();

        let mut records = Vec::with_capacity(students.len());
        let mut negatives = Vec::with_capacity(students.len() * batch);
        let mut modulation = Vec::with_capacity(students.len() * batch);
        let mut total: Option<Var> = None;
        for (si, &i) in students.iter().enumerate() {
            let sb = bands_of(g, i)?;
            let mut sum: Option<Var> = None;
            let (mut intra, mut inter) = (0.0, 0.0);
            let mut mean_mod = [0.0f64; 4];
            for b in 0..batch {
                let key = si * batch + b;
                let neg_layers = match frozen {
                    Some(f) => f.negatives[key],
                    None if contrastive => {
                        let j = self.negative(i, teacher, n, rng)?;
                        let j_hf = if cfg.redraw_per_branch {
                            self.negative(i, teacher, n, rng)?
                        } else {
                            j
                        };
                        [j, j_hf]
                    }
                    None => [0, 0],
                };
                let pick = |g: &mut Graph, bands: [Var; 2], k: usize| g.select(bands[k], b);
                let student = [pick(g, sb, 0)?, pick(g, sb, 1)?];
                let teacher_b = [pick(g, teacher_bands, 0)?, pick(g, teacher_bands, 1)?];
                let mut negative = student;
                let mut batch_negatives: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
                if contrastive {
                    for k in 0..2 {
                        let nb = bands_of(g, neg_layers[k])?;
                        negative[k] = g.select(nb[k], b)?;
                        if cfg.bands()[k] == BandLoss::Inter {
                            for other in (0..batch).filter(|&o| o != b) {
                                batch_negatives[k].push(g.select(sb[k], other)?);
                            }
                        }
                    }
                }
                let bands = SampleBands {
                    student,
                    teacher: teacher_b,
                    negative,
                    batch_negatives,
                };
                let (weights, gates) = match frozen {
                    Some(f) => {
                        let m = f.modulation[key];
                        (
                            FawWeights {
                                w_lf: m.w_lf,
                                w_hf: m.w_hf,
                                delta_lf: m.delta_lf,
                                delta_hf: m.delta_hf,
                            },
                            Gates::Fixed([m.a_lf, m.a_hf]),
                        )
                    }
                    None => {
                        let w = if cfg.use_faw {
                            let sv = sample_slice(g.value(features[i - 1]), b);
                            faw_weights(&sv, &teacher_values[b], &self.masks)?
                        } else {
                            FawWeights::EQUAL
                        };
                        (
                            w,
                            Gates::InGraph {
                                student,
                                teacher: teacher_b,
                            },
                        )
                    }
                };
                let terms = sample_layer_loss(g, cfg, i, &bands, weights, gates)?;
                intra += terms.intra;
                inter += terms.inter;
                let m = terms.modulation;
                for (acc, v) in mean_mod.iter_mut().zip([m.w_lf, m.w_hf, m.a_lf, m.a_hf]) {
                    *acc += v;
                }
                negatives.push(neg_layers);
                modulation.push(m);
                sum = Some(match sum {
                    Some(s) => g.add(s, terms.loss)?,
                    None => terms.loss,
                });
            }
            let sum = sum.expect("batch is nonempty");
            let framer_i = g.scale(sum, 1.0 / batch as f64);
            let inv = 1.0 / batch as f64;
            records.push(LayerRecord {
                i,
                intra: intra * inv,
                inter: inter * inv,
                w_lf: mean_mod[0] * inv,
                w_hf: mean_mod[1] * inv,
                a_lf: mean_mod[2] * inv,
                a_hf: mean_mod[3] * inv,
                framer: g.value(framer_i).item(),
            });
            total = Some(match total {
                Some(t) => g.add(t, framer_i)?,
                None => framer_i,
            });
        }
        Ok(FramerOutput {
            loss: total,
            records,
            frozen: FrozenModulation {
                teacher,
                negatives,
                modulation,
            },
        })
    }
}
