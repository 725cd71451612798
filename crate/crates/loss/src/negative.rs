//! Choice of the negative layer contrasted against each student layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{LossError, Result};

/// One negative layer draw (layers are 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeDraw {
    pub student: usize,
    pub layer: usize,
    /// Position of the generator stream before the draw.
    pub word_pos: u128,
}

fn candidates(i: usize, teacher: usize, n: usize) -> Result<Vec<usize>> {
    if n < 3 {
        return Err(LossError::InsufficientLayers { n });
    }
    if !(1..=n).contains(&i) || !(1..=n).contains(&teacher) || i == teacher {
        return Err(LossError::Config(format!(
            "student {i} and teacher {teacher} must be distinct layers in 1..={n}"
        )));
    }
    Ok((1..=n).filter(|&j| j != i && j != teacher).collect())
}

/// Uniform over `{1..n} \ {i, teacher}`.
pub fn draw_negative(i: usize, teacher: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<NegativeDraw> {
    let pool = candidates(i, teacher, n)?;
    let word_pos = rng.get_word_pos();
    let layer = pool[rng.random_range(0..pool.len())];
    Ok(NegativeDraw {
        student: i,
        layer,
        word_pos,
    })
}

/// Uniform over `{1..n} \ {i, n}`, the final layer being the teacher.
pub fn draw_negative_layer(i: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<NegativeDraw> {
    draw_negative(i, n, n, rng)
}

/// Deepest layer shallower than `i` that is not the teacher; the first
/// student has no such layer and takes the nearest deeper one instead.
pub fn previous_layer(i: usize, teacher: usize, n: usize) -> Result<usize> {
    let pool = candidates(i, teacher, n)?;
    Ok(pool
        .iter()
        .rev()
        .find(|&&j| j < i)
        .or_else(|| pool.iter().find(|&&j| j > i))
        .copied()
        .expect("pool is nonempty for n >= 3"))
}
