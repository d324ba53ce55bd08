//! Summary statistics used by ablations, reports and the acceptance suite.

/// Trailing window used by [`overshoot_count`].
pub const OVERSHOOT_WINDOW: usize = 50;

/// Running mean; exact for constant inputs, `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut m = 0.0;
    for (k, x) in xs.iter().enumerate() {
        m += (x - m) / (k + 1) as f64;
    }
    m
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>())
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Median with NaNs ordered last; `NaN` for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Steps whose loss increase exceeds twice the median absolute increment
/// over the previous `window` steps.
pub fn overshoot_count(losses: &[f64], window: usize) -> usize {
    let inc: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    (window..inc.len())
        .filter(|&i| {
            let trailing: Vec<f64> = inc[i - window..i].iter().map(|d| d.abs()).collect();
            inc[i] > 0.0 && inc[i] > 2.0 * median(&trailing)
        })
        .count()
}

/// Fraction of consecutive pairs with strictly opposite signs.
pub fn sign_flip_rate(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.windows(2).filter(|w| w[0] * w[1] < 0.0).count() as f64 / (xs.len() - 1) as f64
}

/// `a / b`, with `0 / 0` read as "no change" (1).
pub fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else {
        a / b
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of the ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_statistics() {
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
        assert_eq!(variance(&[1.0, 3.0]), 1.0);
        assert_eq!(mean(&[0.01; 37]), 0.01);
        assert_eq!(variance(&[0.01; 37]), 0.0);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(ratio(0.0, 0.0), 1.0);
        assert_eq!(ratio(2.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn overshoots_are_spikes_above_the_trailing_median() {
        // steady decrease by 1, then one rise of 3 (> 2 x 1) and one of 1.5 (not)
        let mut l: Vec<f64> = (0..60).map(|i| 100.0 - i as f64).collect();
        l.push(l[59] + 3.0);
        l.push(l[60] + 1.5);
        assert_eq!(overshoot_count(&l, 50), 1);
        assert_eq!(overshoot_count(&l[..60], 50), 0);
    }

    #[test]
    fn sign_flips() {
        assert_eq!(sign_flip_rate(&[1.0, -1.0, 1.0, 1.0, 0.0, -1.0]), 0.4);
        assert_eq!(sign_flip_rate(&[1.0]), 0.0);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]) - 1.0).abs() < 1e-12);
        // one swapped pair: 1 - 6 * 2 / (5 * 24) = 0.9
        assert!((spearman(&x, &[2.0, 1.0, 3.0, 4.0, 5.0]) - 0.9).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }
}
