//! Global Otsu thresholding over a 256-bin quantization of a heatmap.

use num_bigint::BigUint;

use crate::raster::{BinaryMask, Heatmap};

pub const BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    /// Largest background bin; foreground is every bin strictly above it.
    pub threshold: u8,
    pub between_class_variance: f64,
    pub histogram: [u64; BINS],
}

/// Bin index of a heatmap value: `floor(v * 255)` clamped to `[0, 255]`.
pub fn quantize(v: f32) -> usize {
    ((v as f64 * 255.0).floor()).clamp(0.0, 255.0) as usize
}

pub fn histogram(h: &Heatmap) -> [u64; BINS] {
    let mut hist = [0u64; BINS];
    for &v in h.values() {
        hist[quantize(v)] += 1;
    }
    hist
}

/// Picks the split `t` in `0..=254` maximizing
/// `w0(t) * w1(t) * (mu0(t) - mu1(t))^2`, lowest `t` on ties.
///
/// Returns `None` when no split separates two non-empty classes with positive
/// variance (empty or single-valued histograms).
pub fn otsu_from_histogram(hist: &[u64; BINS]) -> Option<OtsuResult> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let weighted_total: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    let n = total as f64;
    let mut below: u64 = 0;
    let mut weighted_below: u128 = 0;
    // Best split with its variance as the exact fraction num / den.
    let mut best: Option<(u8, u128, BigUint, u128)> = None;
    for (t, &count) in hist.iter().enumerate().take(BINS - 1) {
        below += count;
        weighted_below += t as u128 * count as u128;
        let above = total - below;
        if below == 0 || above == 0 {
            continue;
        }
        // N^2 * w0 * w1 * (mu0 - mu1)^2 = (S0 * N - S * n0)^2 / (n0 * n1).
        let diff = (weighted_below * total as u128).abs_diff(weighted_total * below as u128);
        if diff == 0 {
            continue;
        }
        let d = BigUint::from(diff);
        let num = &d * &d;
        let den = below as u128 * above as u128;
        let better = match &best {
            None => true,
            Some((_, _, bn, bd)) => &num * *bd > bn * den,
        };
        if better {
            best = Some((t as u8, diff, num, den));
        }
    }
    let best = best.map(|(t, diff, _, den)| {
        let d = diff as f64;
        (t, d * d / den as f64 / (n * n))
    });
    best.map(|(threshold, between_class_variance)| OtsuResult {
        threshold,
        between_class_variance,
        histogram: *hist,
    })
}

/// Otsu on a heatmap; `None` is the no-foreground signal for degenerate input.
pub fn otsu_threshold(h: &Heatmap) -> Option<OtsuResult> {
    if h.is_degenerate() {
        return None;
    }
    otsu_from_histogram(&histogram(h))
}

/// Foreground = pixels whose bin is strictly greater than `threshold`.
pub fn apply_threshold(h: &Heatmap, threshold: u8) -> BinaryMask {
    let bits = h
        .values()
        .iter()
        .map(|&v| quantize(v) > threshold as usize)
        .collect();
    BinaryMask::new(h.width(), h.height(), bits).expect("heatmap dims are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{normalize_heatmap, FloatRaster};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: recompute class weights and means from scratch for
    /// every candidate split using probabilities.
    fn oracle(hist: &[u64; BINS]) -> Option<u8> {
        let total: u64 = hist.iter().sum();
        let p: Vec<f64> = hist.iter().map(|&c| c as f64 / total as f64).collect();
        let mut best: Option<(u8, f64)> = None;
        for t in 0..255usize {
            let w0: f64 = p[..=t].iter().sum();
            let w1: f64 = p[t + 1..].iter().sum();
            if hist[..=t].iter().all(|&c| c == 0) || hist[t + 1..].iter().all(|&c| c == 0) {
                continue;
            }
            let mu0 = p[..=t].iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / w0;
            let mu1 = p[t + 1..]
                .iter()
                .enumerate()
                .map(|(i, v)| (i + t + 1) as f64 * v)
                .sum::<f64>()
                / w1;
            let var = w0 * w1 * (mu0 - mu1).powi(2);
            let better = match best {
                None => var > 0.0,
                Some((_, b)) => var > b,
            };
            if better {
                best = Some((t as u8, var));
            }
        }
        best.map(|b| b.0)
    }

    #[test]
    fn bimodal_deltas_pick_lowest_maximizer() {
        let mut hist = [0u64; BINS];
        hist[50] = 10;
        hist[200] = 10;
        assert_eq!(oracle(&hist), Some(50));
        let r = otsu_from_histogram(&hist).unwrap();
        assert_eq!(r.threshold, 50);
        // w0 = w1 = 1/2, mu difference 150.
        assert!((r.between_class_variance - 0.25 * 150.0 * 150.0).abs() < 1e-9);
    }

    #[test]
    fn bimodal_heatmap_foreground_is_bright_pixels() {
        let values: Vec<f32> = (0..20)
            .map(|i| if i < 10 { 50.0 / 255.0 } else { 200.0 / 255.0 })
            .map(|v| v + 1e-4)
            .collect();
        // Pin the range so normalization keeps the bins in place.
        let mut raw = values.clone();
        raw.push(0.0);
        raw.push(1.0);
        let h = normalize_heatmap(&FloatRaster::new(22, 1, raw).unwrap()).unwrap();
        let r = otsu_threshold(&h).unwrap();
        let mask = apply_threshold(&h, r.threshold);
        let fg: Vec<u32> = mask.foreground().map(|(x, _)| x).collect();
        assert_eq!(fg, (10..20).chain(21..22).collect::<Vec<_>>());
    }

    #[test]
    fn constant_heatmap_has_no_foreground() {
        let h = normalize_heatmap(&FloatRaster::new(4, 4, vec![0.3; 16]).unwrap()).unwrap();
        assert!(otsu_threshold(&h).is_none());
        let mut hist = [0u64; BINS];
        hist[77] = 100;
        assert!(otsu_from_histogram(&hist).is_none());
        assert!(otsu_from_histogram(&[0; BINS]).is_none());
    }

    #[test]
    fn adjacent_bins_split_between_them() {
        let mut hist = [0u64; BINS];
        hist[10] = 3;
        hist[11] = 7;
        assert_eq!(otsu_from_histogram(&hist).unwrap().threshold, 10);
        assert_eq!(oracle(&hist), Some(10));
    }

    #[test]
    fn quantization_edges() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.999), 254);
        assert_eq!(quantize(1.5), 255);
    }

    #[test]
    fn random_heatmaps_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let raw = FloatRaster::from_fn(64, 64, |_, _| rng.gen::<f32>()).unwrap();
            let h = normalize_heatmap(&raw).unwrap();
            let hist = histogram(&h);
            assert_eq!(otsu_threshold(&h).map(|r| r.threshold), oracle(&hist));
        }
    }
}
