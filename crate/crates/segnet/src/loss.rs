//! Cross-entropy plus soft Dice, evaluated in `f64`.
//!
//! Layout: `scores[b][c][v]`, `target[b][v]`, `ignore[b][v]`. Cross-entropy is
//! the mean over every non-ignored voxel of the batch; soft Dice is computed
//! per batch item over the foreground classes `1..C` and then averaged.

use crate::SegNetError;

/// Dice smoothing, added to numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub ce: f64,
    /// Mean soft Dice over items and foreground classes.
    pub dice: f64,
    /// `d loss / d scores`, same layout as the scores.
    pub grad: Vec<f64>,
}

/// Partial terms of one batch item. Summing `ce` over items and subtracting
/// the mean of `dice` from one gives the batch loss.
#[derive(Debug, Clone)]
pub(crate) struct ItemTerms {
    pub ce: f64,
    pub dice: f64,
    pub grad: Vec<f64>,
}

/// Loss terms of one item. `ce_count` is the number of non-ignored voxels in
/// the whole batch and `batch` the number of items sharing the Dice mean.
pub(crate) fn item_terms(
    scores: &[f64],
    target: &[u8],
    ignore: &[bool],
    classes: usize,
    ce_count: usize,
    batch: usize,
) -> Result<ItemTerms, SegNetError> {
    let n = target.len();
    debug_assert_eq!(scores.len(), classes * n);
    let mut probs = vec![0.0f64; classes * n];
    let mut ce = 0.0;
    let mut inter = vec![0.0f64; classes];
    let mut psum = vec![0.0f64; classes];
    let mut gsum = vec![0.0f64; classes];
    for v in 0..n {
        if ignore[v] {
            continue;
        }
        let t = target[v] as usize;
        if t >= classes {
            return Err(SegNetError::InvalidTarget { value: target[v], classes });
        }
        let m = (0..classes).map(|c| scores[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..classes).map(|c| (scores[c * n + v] - m).exp()).sum();
        for c in 0..classes {
            let p = (scores[c * n + v] - m).exp() / z;
            probs[c * n + v] = p;
            psum[c] += p;
        }
        ce -= scores[t * n + v] - m - z.ln();
        inter[t] += probs[t * n + v];
        gsum[t] += 1.0;
    }
    let fg = classes - 1;
    let w = 1.0 / (batch as f64 * fg as f64);
    let mut dice = 0.0;
    // d(−mean dice)/d p_c = −w · (2 y_c · den − num) / den²
    let mut coef_y = vec![0.0f64; classes];
    let mut coef = vec![0.0f64; classes];
    for c in 1..classes {
        let num = 2.0 * inter[c] + DICE_EPS;
        let den = psum[c] + gsum[c] + DICE_EPS;
        dice += num / den;
        coef_y[c] = -w * 2.0 / den;
        coef[c] = w * num / (den * den);
    }
    dice /= fg as f64;

    let inv = 1.0 / ce_count as f64;
    let mut grad = vec![0.0f64; classes * n];
    let mut dp = vec![0.0f64; classes];
    for v in 0..n {
        if ignore[v] {
            continue;
        }
        let t = target[v] as usize;
        let mut dot = 0.0;
        for c in 0..classes {
            dp[c] = coef[c] + if c == t { coef_y[c] } else { 0.0 };
            dot += probs[c * n + v] * dp[c];
        }
        for c in 0..classes {
            let p = probs[c * n + v];
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad[c * n + v] = (p - onehot) * inv + p * (dp[c] - dot);
        }
    }
    Ok(ItemTerms {
        ce: ce * inv,
        dice,
        grad,
    })
}

pub fn dice_ce_loss(scores: &[f64], target: &[u8], ignore: &[bool], batch: usize, classes: usize) -> Result<LossOutput, SegNetError> {
    if batch == 0 || classes < 2 || target.len() % batch != 0 || ignore.len() != target.len() || scores.len() != classes * target.len() {
        return Err(SegNetError::LossShape);
    }
    let count = ignore.iter().filter(|&&i| !i).count();
    if count == 0 {
        return Err(SegNetError::AllIgnored);
    }
    let n = target.len() / batch;
    let mut out = LossOutput {
        loss: 0.0,
        ce: 0.0,
        dice: 0.0,
        grad: Vec::with_capacity(scores.len()),
    };
    for b in 0..batch {
        let t = item_terms(&scores[b * classes * n..(b + 1) * classes * n], &target[b * n..(b + 1) * n], &ignore[b * n..(b + 1) * n], classes, count, batch)?;
        out.ce += t.ce;
        out.dice += t.dice / batch as f64;
        out.grad.extend(t.grad);
    }
    out.loss = out.ce + 1.0 - out.dice;
    Ok(out)
}
