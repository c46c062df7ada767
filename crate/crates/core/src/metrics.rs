//! Error summaries shared by experiments and tests.

/// Root mean square; zero for an empty slice.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// RMS of the element-wise difference.
pub fn rms_error(estimate: &[f64], truth: &[f64]) -> f64 {
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    rms(&diff)
}

/// Shift (in samples) maximizing the correlation coefficient of `signal`
/// against `reference` over their overlap; positive when `signal` is delayed.
pub fn xcorr_lag(reference: &[f64], signal: &[f64], max_lag: usize) -> i64 {
    let n = reference.len().min(signal.len());
    let max_lag = max_lag.min(n.saturating_sub(2)) as i64;
    let mut best = (0i64, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let start = (-lag).max(0) as usize;
        let end = (n as i64 - lag.max(0)) as usize;
        let r = &reference[start..end];
        let s = &signal[(start as i64 + lag) as usize..(end as i64 + lag) as usize];
        let score = correlation(r, s);
        if score > best.1 {
            best = (lag, score);
        }
    }
    best.0
}

/// Pearson correlation coefficient.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
