//! Adaptive band weights from spectral energy gaps, and alignment gates.

use framer_core::spectral::{band_energy, BandMasks, ENERGY_EPS};
use framer_core::tensor::{Graph, Tensor, Var};

use crate::contrastive::cosine_sim;
use crate::Result;

/// Band weights of one student feature relative to the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FawWeights {
    pub w_lf: f64,
    pub w_hf: f64,
    pub delta_lf: f64,
    pub delta_hf: f64,
}

impl FawWeights {
    pub const EQUAL: FawWeights = FawWeights {
        w_lf: 0.5,
        w_hf: 0.5,
        delta_lf: 0.0,
        delta_hf: 0.0,
    };

    pub fn as_array(&self) -> [f64; 2] {
        [self.w_lf, self.w_hf]
    }
}

/// Weights and gates applied to one student layer of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerModulation {
    pub i: usize,
    pub w_lf: f64,
    pub w_hf: f64,
    pub a_lf: f64,
    pub a_hf: f64,
    /// `w · a` per band.
    pub wt_lf: f64,
    pub wt_hf: f64,
    pub delta_lf: f64,
    pub delta_hf: f64,
}

impl LayerModulation {
    pub fn new(i: usize, w: FawWeights, a: [f64; 2]) -> Self {
        Self {
            i,
            w_lf: w.w_lf,
            w_hf: w.w_hf,
            a_lf: a[0],
            a_hf: a[1],
            wt_lf: w.w_lf * a[0],
            wt_hf: w.w_hf * a[1],
            delta_lf: w.delta_lf,
            delta_hf: w.delta_hf,
        }
    }
}

/// Relative band-energy gaps `|E_t - E_s| / (E_s + ε)` and their
/// two-way softmax. Plain values: the weights act as coefficients only.
pub fn faw_weights(student: &Tensor, teacher: &Tensor, masks: &BandMasks) -> Result<FawWeights> {
    let (s_lf, s_hf) = band_energy(student, masks)?;
    let (t_lf, t_hf) = band_energy(teacher, masks)?;
    let delta_lf = (t_lf - s_lf).abs() / (s_lf + ENERGY_EPS);
    let delta_hf = (t_hf - s_hf).abs() / (s_hf + ENERGY_EPS);
    let m = delta_lf.max(delta_hf);
    let (e_lf, e_hf) = ((delta_lf - m).exp(), (delta_hf - m).exp());
    Ok(FawWeights {
        w_lf: e_lf / (e_lf + e_hf),
        w_hf: e_hf / (e_lf + e_hf),
        delta_lf,
        delta_hf,
    })
}

/// `max(0, c)` per band.
pub fn fam_gates_from_cosines(cos_lf: f64, cos_hf: f64) -> (f64, f64) {
    (cos_lf.max(0.0), cos_hf.max(0.0))
}

/// ReLU of the student-teacher band cosine, as a node without gradient.
pub fn fam_gate(g: &mut Graph, student_band: Var, teacher_band: Var) -> Result<Var> {
    let c = cosine_sim(g, student_band, teacher_band)?;
    let a = g.relu(c);
    Ok(g.detach(a))
}

/// [`fam_gate`] for the LF and HF bands, returned as plain values.
pub fn fam_gates(g: &mut Graph, student: [Var; 2], teacher: [Var; 2]) -> Result<(f64, f64)> {
    let lf = fam_gate(g, student[0], teacher[0])?;
    let hf = fam_gate(g, student[1], teacher[1])?;
    Ok((g.value(lf).item(), g.value(hf).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_features_give_equal_weights_exactly() {
        let masks = BandMasks::new(8, 8, 0.3).unwrap();
        let x = Tensor::randn([2, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let w = faw_weights(&x, &x, &masks).unwrap();
        assert_eq!((w.w_lf, w.w_hf), (0.5, 0.5));
        assert_eq!((w.delta_lf, w.delta_hf), (0.0, 0.0));
    }

    #[test]
    fn weights_follow_the_larger_gap() {
        let masks = BandMasks::new(8, 8, 0.3).unwrap();
        let s = Tensor::randn([2, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        // Uniform scaling moves both bands by the same relative amount.
        let doubled = Tensor::new(s.shape().to_vec(), s.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let w = faw_weights(&s, &doubled, &masks).unwrap();
        assert!((w.delta_lf - 1.0).abs() < 1e-6 && (w.delta_hf - 1.0).abs() < 1e-6);
        assert!((w.w_lf - 0.5).abs() < 1e-9);
        // A checkerboard only adds energy at the Nyquist corner, which is HF.
        let mut hf = s.clone();
        for (k, v) in hf.data_mut().iter_mut().enumerate() {
            let (y, x) = ((k / 8) % 8, k % 8);
            *v += if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
        }
        let w = faw_weights(&s, &hf, &masks).unwrap();
        assert!(w.delta_lf.abs() < 1e-9 && w.delta_hf > 0.0);
        assert!(w.w_hf > w.w_lf);
        assert!((w.w_lf + w.w_hf - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gates_clamp_and_carry_no_gradient() {
        assert_eq!(fam_gates_from_cosines(-1.0, 0.25), (0.0, 0.25));
        let mut g = Graph::new();
        let a = g.param(Tensor::new([3], vec![1.0, 2.0, -1.0]).unwrap());
        let b = g.param(Tensor::new([3], vec![0.5, 2.5, 0.0]).unwrap());
        let nb = g.neg(a);
        let (s, t) = (fam_gate(&mut g, a, b).unwrap(), fam_gate(&mut g, a, nb).unwrap());
        assert!(g.value(s).item() > 0.0 && g.value(s).item() <= 1.0);
        assert_eq!(g.value(t).item(), 0.0);
        let y = g.mul(s, a).unwrap();
        let y = g.sum(y);
        g.backward(y).unwrap();
        assert!(g.grad(b).data().iter().all(|v| *v == 0.0));
    }
}
