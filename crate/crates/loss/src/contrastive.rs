//! Cosine similarity and the InfoNCE-style contrastive terms.

use framer_core::tensor::{Graph, TensorError, Var};

use crate::Result;

fn norm_of(g: &Graph, v: Var) -> f64 {
    g.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of two equally shaped features, flattened. A zero-norm input
/// yields a constant 0 (logged), since collapsed toy features do occur.
pub fn cosine_sim(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_sim",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        }
        .into());
    }
    if norm_of(g, a) == 0.0 || norm_of(g, b) == 0.0 {
        log::warn!("cosine of a zero-norm feature, using 0");
        return Ok(g.scalar(0.0));
    }
    let ab = g.dot(a, b)?;
    let aa = g.dot(a, a)?;
    let bb = g.dot(b, b)?;
    let den = g.mul(aa, bb)?;
    let den = g.sqrt(den)?;
    Ok(g.div(ab, den)?)
}

/// `-log(e^{s+/τ} / Σ_k e^{s_k/τ})` over the positive and all negatives,
/// through a max-shifted log-sum-exp.
pub fn info_nce(g: &mut Graph, positive: Var, negatives: &[Var], temperature: f64) -> Result<Var> {
    let mut scores = Vec::with_capacity(1 + negatives.len());
    scores.push(positive);
    scores.extend_from_slice(negatives);
    let stacked = g.stack_scalars(&scores)?;
    let scaled = g.scale(stacked, 1.0 / temperature);
    let lse = g.logsumexp(scaled)?;
    let pos = g.scale(positive, 1.0 / temperature);
    Ok(g.sub(lse, pos)?)
}

/// Pairwise term: teacher positive against one same-image negative layer.
pub fn intra_cl(g: &mut Graph, student: Var, teacher: Var, negative: Var, temperature: f64) -> Result<Var> {
    let pos = cosine_sim(g, student, teacher)?;
    let neg = cosine_sim(g, student, negative)?;
    info_nce(g, pos, &[neg], temperature)
}

/// [`intra_cl`] with extra negatives taken from other samples.
pub fn inter_cl(
    g: &mut Graph,
    student: Var,
    teacher: Var,
    negative: Var,
    batch_negatives: &[Var],
    temperature: f64,
) -> Result<Var> {
    let pos = cosine_sim(g, student, teacher)?;
    let mut negs = Vec::with_capacity(1 + batch_negatives.len());
    negs.push(cosine_sim(g, student, negative)?);
    for &x in batch_negatives {
        negs.push(cosine_sim(g, student, x)?);
    }
    info_nce(g, pos, &negs, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use framer_core::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(g: &mut Graph, v: Vec<f64>) -> Var {
        let n = v.len();
        g.param(Tensor::new([n], v).unwrap())
    }

    #[test]
    fn cosine_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn([64], 1.0, &mut rng);
        let b = Tensor::randn([64], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
        let c = cosine_sim(&mut g, va, vb).unwrap();
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..64 {
            dot += a.data()[k] * b.data()[k];
            na += a.data()[k] * a.data()[k];
            nb += b.data()[k] * b.data()[k];
        }
        let oracle = dot / na.sqrt() / nb.sqrt();
        assert!((g.value(c).item() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn cosine_edge_cases() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0, -2.0, 3.0]);
        let y = g.neg(x);
        let z = leaf(&mut g, vec![0.0; 3]);
        let s = cosine_sim(&mut g, x, x).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-15);
        let s = cosine_sim(&mut g, x, y).unwrap();
        assert!((g.value(s).item() + 1.0).abs() < 1e-15);
        let s = cosine_sim(&mut g, x, z).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let w = leaf(&mut g, vec![1.0, 2.0]);
        assert!(cosine_sim(&mut g, x, w).is_err());
    }

    #[test]
    fn closed_forms() {
        let mut g = Graph::new();
        let s = leaf(&mut g, vec![1.0, 0.0, 0.0]);
        let other = leaf(&mut g, vec![0.3, 0.9, 0.0]);
        let orth = leaf(&mut g, vec![0.0, 0.0, 2.0]);
        // Equal scores.
        let l = intra_cl(&mut g, s, other, other, 1.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        // Student == teacher, orthogonal negative.
        let l = intra_cl(&mut g, s, s, orth, 1.0).unwrap();
        assert!((g.value(l).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 0.313262).abs() < 1e-6);
        // Zero scores everywhere with three orthogonal in-batch negatives.
        let o2 = leaf(&mut g, vec![0.0, 1.0, 0.0]);
        let l = inter_cl(&mut g, s, o2, orth, &[orth, o2, orth], 1.0).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_pushes_student_towards_teacher() {
        let mut g = Graph::new();
        let s = leaf(&mut g, vec![1.0, 1.0, 0.0]);
        let t = g.constant(Tensor::new([3], vec![1.0, 0.0, 0.0]).unwrap());
        let n = g.constant(Tensor::new([3], vec![0.0, 1.0, 0.0]).unwrap());
        let l = intra_cl(&mut g, s, t, n, 1.0).unwrap();
        g.backward(l).unwrap();
        let d = g.grad(s);
        assert!(d.data()[0] < 0.0 && d.data()[1] > 0.0);
    }

    proptest! {
        #[test]
        fn info_nce_is_nonnegative_and_monotone(pos in -1.0f64..1.0, negs in proptest::collection::vec(-1.0f64..1.0, 1..6), bump in 0.01f64..0.5) {
            let mut g = Graph::new();
            let p = g.scalar(pos);
            let ns: Vec<Var> = negs.iter().map(|&v| g.scalar(v)).collect();
            let base = info_nce(&mut g, p, &ns, 1.0).unwrap();
            let base = g.value(base).item();
            prop_assert!(base >= 0.0);
            // Raising one negative score raises the loss.
            let mut raised = ns.clone();
            raised[0] = g.scalar(negs[0] + bump);
            let up = info_nce(&mut g, p, &raised, 1.0).unwrap();
            prop_assert!(g.value(up).item() > base);
            // Adding a negative never lowers it.
            let mut more = ns.clone();
            more.push(g.scalar(-1.0));
            let m = info_nce(&mut g, p, &more, 1.0).unwrap();
            prop_assert!(g.value(m).item() >= base);
            // Raising the positive lowers it.
            let p2 = g.scalar(pos + bump);
            let down = info_nce(&mut g, p2, &ns, 1.0).unwrap();
            prop_assert!(g.value(down).item() < base);
        }

        #[test]
        fn equal_scores_give_log_k(score in -1.0f64..1.0, k in 1usize..8) {
            let mut g = Graph::new();
            let p = g.scalar(score);
            let ns: Vec<Var> = (0..k).map(|_| g.scalar(score)).collect();
            let l = info_nce(&mut g, p, &ns, 1.0).unwrap();
            prop_assert!((g.value(l).item() - ((k + 1) as f64).ln()).abs() < 1e-12);
        }
    }
}
