//! Small least-squares helpers.

/// Ordinary least-squares line `y ≈ slope·x + intercept`.
/// Returns `(slope, intercept, max_abs_residual)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    assert!(xs.len() >= 2, "linear_fit needs at least two points");
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let mut max_res = 0.0f64;
    for (x, y) in xs.iter().zip(ys.iter()) {
        max_res = max_res.max((y - slope * x - intercept).abs());
    }
    (slope, intercept, max_res)
}
