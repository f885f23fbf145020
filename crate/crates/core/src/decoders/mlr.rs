use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::epoching::DesignMatrix;
use crate::gradkit::gemm;

/// Multivariate linear regression from lagged EEG to the three hand axes.
///
/// `beta` is axis-major; within one axis it follows the design-matrix feature
/// order, so `beta[a * N * L + n * L + l]` weighs channel `n` at lag `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlrModel {
    pub alpha: [f64; 3],
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub layout: MlrLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlrLayout {
    pub channels: usize,
    pub lags: usize,
    /// Always `"axis,channel,lag"`.
    pub order: BetaOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaOrder {
    #[serde(rename = "axis,channel,lag")]
    AxisChannelLag,
}

/// Pivots below this fraction of the largest diagonal entry mark the normal
/// matrix as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// In-place Cholesky factorization of the `d x d` matrix `a` (lower triangle).
fn cholesky(a: &mut [f64], d: usize) -> Result<(), DecoderError> {
    let max_diag = (0..d).map(|i| a[i * d + i]).fold(0.0, f64::max);
    let floor = PIVOT_TOLERANCE * max_diag.max(f64::MIN_POSITIVE);
    for j in 0..d {
        let mut pivot = a[j * d + j];
        for k in 0..j {
            pivot -= a[j * d + k] * a[j * d + k];
        }
        if !(pivot > floor) {
            return Err(DecoderError::SingularSystem);
        }
        let l_jj = pivot.sqrt();
        a[j * d + j] = l_jj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l_jj;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

impl MlrModel {
    /// Least squares per axis with an unpenalized intercept and ridge
    /// penalty `lambda` on the slopes.
    pub fn fit(
        design: &DesignMatrix,
        targets: &[[f64; 3]],
        lambda: f64,
    ) -> Result<Self, DecoderError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(DecoderError::InvalidLambda(lambda));
        }
        let (t, d) = (design.rows(), design.width());
        if targets.len() != t {
            return Err(DecoderError::ShapeError(format!(
                "{} target rows for {t} design rows",
                targets.len()
            )));
        }
        if t == 0 {
            return Err(DecoderError::ShapeError("empty design".into()));
        }
        let x = design.as_slice();
        let mut x_mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, v) in x_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        x_mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut y_mean = [0.0; 3];
        for y in targets {
            for a in 0..3 {
                y_mean[a] += y[a];
            }
        }
        y_mean.iter_mut().for_each(|m| *m /= t as f64);

        let mut xc = x.to_vec();
        for row in xc.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&x_mean) {
                *v -= m;
            }
        }
        let yc: Vec<f64> = targets
            .iter()
            .flat_map(|y| (0..3).map(move |a| y[a] - y_mean[a]))
            .collect();

        let mut gram = vec![0.0; d * d];
        gemm(d, t, d, &xc, true, &xc, false, &mut gram, false);
        for i in 0..d {
            gram[i * d + i] += lambda;
        }
        let mut rhs = vec![0.0; d * 3];
        gemm(d, t, 3, &xc, true, &yc, false, &mut rhs, false);
        cholesky(&mut gram, d)?;

        let mut beta = vec![0.0; 3 * d];
        let mut alpha = [0.0; 3];
        for a in 0..3 {
            let mut b: Vec<f64> = (0..d).map(|i| rhs[i * 3 + a]).collect();
            cholesky_solve(&gram, d, &mut b);
            alpha[a] = y_mean[a] - b.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
            beta[a * d..(a + 1) * d].copy_from_slice(&b);
        }
        let model = Self {
            alpha,
            beta,
            lambda,
            layout: MlrLayout {
                channels: design.channel_count(),
                lags: design.lag_count(),
                order: BetaOrder::AxisChannelLag,
            },
        };
        if !model.is_finite() {
            return Err(DecoderError::SingularSystem);
        }
        Ok(model)
    }

    pub fn width(&self) -> usize {
        self.layout.channels * self.layout.lags
    }

    pub fn coefficient(&self, axis: usize, channel: usize, lag: usize) -> f64 {
        self.beta[axis * self.width() + channel * self.layout.lags + lag]
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).all(|v| v.is_finite())
    }

    pub fn predict(&self, design: &DesignMatrix) -> Result<Vec<[f64; 3]>, DecoderError> {
        let d = self.width();
        if design.channel_count() != self.layout.channels || design.lag_count() != self.layout.lags
        {
            return Err(DecoderError::ShapeError(format!(
                "design is {} channels x {} lags; model expects {} x {}",
                design.channel_count(),
                design.lag_count(),
                self.layout.channels,
                self.layout.lags
            )));
        }
        let t = design.rows();
        let mut out = vec![0.0; t * 3];
        gemm(
            t,
            d,
            3,
            design.as_slice(),
            false,
            &self.beta,
            true,
            &mut out,
            false,
        );
        Ok(out
            .chunks_exact(3)
            .map(|r| {
                [
                    r[0] + self.alpha[0],
                    r[1] + self.alpha[1],
                    r[2] + self.alpha[2],
                ]
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DecoderError> {
        let m: Self =
            serde_json::from_str(text).map_err(|e| DecoderError::CorruptModel(e.to_string()))?;
        if m.beta.len() != 3 * m.width() || !m.is_finite() {
            return Err(DecoderError::CorruptModel(
                "coefficient count or values do not match the layout".into(),
            ));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(
        rows: usize,
        channels: usize,
        lags: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> DesignMatrix {
        let w = channels * lags;
        let data = (0..rows * w).map(|i| f(i / w, i % w)).collect();
        DesignMatrix::from_vec(rows, channels, lags, data).unwrap()
    }

    #[test]
    fn cholesky_of_spd_matrix() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        cholesky(&mut a, 2).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-15);
        assert!((a[2] - 1.0).abs() < 1e-15);
        assert!((a[3] - 2f64.sqrt()).abs() < 1e-15);
        let mut b = vec![2.0, 1.0];
        cholesky_solve(&a, 2, &mut b);
        // [[4,2],[2,3]] x = [2,1]  =>  x = [0.5, 0]
        assert!((b[0] - 0.5).abs() < 1e-15 && b[1].abs() < 1e-15);
    }

    #[test]
    fn zero_targets_give_null_model() {
        let x = design(20, 2, 2, |t, j| {
            ((t * 7 + j * 3) % 11) as f64 - 5.0 + (t * j) as f64 * 0.01
        });
        let m = MlrModel::fit(&x, &vec![[0.0; 3]; 20], 0.0).unwrap();
        assert!(m.alpha.iter().chain(&m.beta).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn duplicate_columns_need_ridge() {
        let x = design(30, 2, 1, |t, _| (t as f64 * 0.37).sin());
        let y: Vec<[f64; 3]> = (0..30).map(|t| [t as f64; 3]).collect();
        assert_eq!(
            MlrModel::fit(&x, &y, 0.0),
            Err(DecoderError::SingularSystem)
        );
        let m = MlrModel::fit(&x, &y, 1e-8).unwrap();
        assert!(m.is_finite());
    }

    #[test]
    fn intercept_only_prediction() {
        let m = MlrModel {
            alpha: [1.0, 2.0, 3.0],
            beta: vec![0.5; 3 * 4],
            lambda: 0.0,
            layout: MlrLayout {
                channels: 2,
                lags: 2,
                order: BetaOrder::AxisChannelLag,
            },
        };
        let p = m.predict(&design(3, 2, 2, |_, _| 0.0)).unwrap();
        assert_eq!(p, vec![[1.0, 2.0, 3.0]; 3]);
        assert!(matches!(
            m.predict(&design(3, 1, 2, |_, _| 0.0)),
            Err(DecoderError::ShapeError(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let x = design(25, 2, 3, |t, j| ((t * 13 + j * 5) % 17) as f64);
        let y: Vec<[f64; 3]> = (0..25).map(|t| [t as f64, 1.0, -(t as f64)]).collect();
        let m = MlrModel::fit(&x, &y, 0.1).unwrap();
        let back = MlrModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        assert!(m.to_json().contains("\"axis,channel,lag\""));
    }
}
