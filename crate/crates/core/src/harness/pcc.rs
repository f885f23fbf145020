use super::HarnessError;

/// Pearson product-moment correlation of two equal-length series.
///
/// ```
/// use kinedecode::harness::pcc;
/// let r = pcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
/// assert!((r - 0.5).abs() < 1e-12);
/// ```
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64, HarnessError> {
    if x.len() != y.len() {
        return Err(HarnessError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(HarnessError::UndefinedCorrelation(format!(
            "{} samples; need at least 2",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(HarnessError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One correlation per axis over row-aligned `[x, y, z]` series.
pub fn pcc_axes(measured: &[[f64; 3]], predicted: &[[f64; 3]]) -> Result<[f64; 3], HarnessError> {
    let mut r = [0.0; 3];
    for (a, slot) in r.iter_mut().enumerate() {
        let m: Vec<f64> = measured.iter().map(|v| v[a]).collect();
        let p: Vec<f64> = predicted.iter().map(|v| v[a]).collect();
        *slot = pcc(&m, &p)?;
    }
    Ok(r)
}
