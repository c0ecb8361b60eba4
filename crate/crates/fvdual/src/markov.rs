//! Finite-state transition matrices by uniformization.

/// Poisson terms past the mean are summed until they fall below this.
pub const UNIFORMIZATION_TOLERANCE: f64 = 1e-18;

type Matrix = Vec<Vec<f64>>;

fn identity(k: usize) -> Matrix {
    (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn multiply(a: &Matrix, b: &Matrix) -> Matrix {
    let k = a.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for l in 0..k {
            let ail = a[i][l];
            if ail != 0.0 {
                for j in 0..k {
                    out[i][j] += ail * b[l][j];
                }
            }
        }
    }
    out
}

/// `exp(t Q)` for a rate matrix `Q` (rows sum to zero, off-diagonals >= 0).
///
/// Long horizons are split by squaring so the Poisson weights stay
/// representable.
pub fn transition_matrix(generator: &[Vec<f64>], t: f64) -> Matrix {
    let k = generator.len();
    let lambda = generator.iter().enumerate().map(|(i, r)| -r[i]).fold(0.0, f64::max);
    if t <= 0.0 || lambda == 0.0 {
        return identity(k);
    }
    let mut squarings = 0;
    let mut tau = t;
    while lambda * tau > 20.0 {
        tau /= 2.0;
        squarings += 1;
    }
    let step: Matrix = (0..k)
        .map(|i| (0..k).map(|j| generator[i][j] / lambda + if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mean = lambda * tau;
    let mut weight = (-mean).exp();
    let mut power = identity(k);
    let mut out: Matrix = power.iter().map(|r| r.iter().map(|v| v * weight).collect()).collect();
    let mut n = 0u32;
    while (f64::from(n) < mean || weight > UNIFORMIZATION_TOLERANCE) && n < 10_000 {
        n += 1;
        power = multiply(&power, &step);
        weight *= mean / n as f64;
        for i in 0..k {
            for j in 0..k {
                out[i][j] += weight * power[i][j];
            }
        }
    }
    for _ in 0..squarings {
        out = multiply(&out, &out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_symmetric() {
        let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        for t in [0.0, 0.3, 1.0, 7.5, 60.0] {
            let p = transition_matrix(&q, t);
            let expect = (1.0 + (-2.0 * t).exp()) / 2.0;
            assert!((p[0][0] - expect).abs() < 1e-11, "t={t}: {} vs {expect}", p[0][0]);
            assert!((p[0][1] - (1.0 - expect)).abs() < 1e-11);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let q = vec![vec![-3.0, 2.0, 1.0], vec![0.5, -0.5, 0.0], vec![0.0, 4.0, -4.0]];
        let p = transition_matrix(&q, 2.3);
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-11);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}
