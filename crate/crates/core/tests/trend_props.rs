use ebtrend::nalgebra::{DMatrix, DVector};
use ebtrend::trend::{fit_trend, TrendKind};
use proptest::prelude::*;

/// Natural cubic spline least squares in the constrained truncated-power
/// basis {1, x, Σ_k b_k (x − ξ_k)³₊} with Σb_k = Σb_kξ_k = 0.
struct PowerSpline {
    lo: f64,
    scale: f64,
    knots: Vec<f64>,
    null: DMatrix<f64>,
}

impl PowerSpline {
    fn new(knots: &[f64]) -> Self {
        let lo = knots[0];
        let scale = knots[knots.len() - 1] - lo;
        let knots: Vec<f64> = knots.iter().map(|k| (k - lo) / scale).collect();
        let kk = knots.len();
        // Null space of the two linear constraints.
        let c = DMatrix::from_fn(2, kk, |r, j| if r == 0 { 1.0 } else { knots[j] });
        let svd = c.transpose().svd(true, false);
        let u = svd.u.unwrap();
        // [u, e_3, …] has full rank since no nonzero a + bξ vanishes at two
        // distinct knots; its Q extends u to an orthonormal basis.
        let ext = DMatrix::from_fn(kk, kk, |i, j| if j < 2 { u[(i, j)] } else if i == j { 1.0 } else { 0.0 });
        let full = ext.qr().q();
        let null = full.columns(2, kk - 2).into_owned();
        Self { lo, scale, knots, null }
    }

    fn row(&self, m: f64) -> Vec<f64> {
        let x = (m - self.lo) / self.scale;
        let powers = DVector::from_iterator(self.knots.len(), self.knots.iter().map(|k| (x - k).max(0.0).powi(3)));
        let mut row = vec![1.0, x];
        row.extend((self.null.transpose() * powers).iter());
        row
    }

    fn fit(&self, points: &[(f64, f64)]) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.knots.len();
        let x = DMatrix::from_fn(points.len(), p, |i, j| self.row(points[i].0)[j]);
        let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
        let qr = x.clone().qr();
        let beta = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
        (x, beta)
    }
}

fn points_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    (30usize..600, 0.5f64..5.0, 10.0f64..25.0, any::<u64>()).prop_map(|(n, width, center, seed)| {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n)
            .map(|_| {
                let m = center + width * (2.0 * next() - 1.0);
                // Rounded values create ties.
                let m = (m * 20.0).round() / 20.0;
                let v = (-(m - center) / width).tanh() * 2.0 + 0.5 * (next() - 0.5);
                (m, v)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn spline_matches_truncated_power_oracle(points in points_strategy()) {
        let fit = fit_trend(&points).unwrap();
        prop_assume!(fit.kind() == TrendKind::Spline);
        let oracle = PowerSpline::new(fit.knots());
        let (x, beta) = oracle.fit(&points);

        // Residuals are orthogonal to every basis column.
        let resid = DVector::from_iterator(points.len(), points.iter().map(|&(m, v)| v - fit.m_hat(m)));
        let y_norm = points.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
        for j in 0..x.ncols() {
            let col = x.column(j);
            let dot = col.dot(&resid);
            prop_assert!(dot.abs() <= 1e-8 * col.norm() * y_norm, "column {j}: {dot}");
        }

        let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..1000 {
            let m = lo + (hi - lo) * ((i as f64 * 0.618_034) % 1.0);
            let expect: f64 = oracle.row(m).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let got = fit.m_hat(m);
            prop_assert!((got - expect).abs() <= 1e-8, "m = {m}: {got} vs {expect}");
            prop_assert!(fit.xi2(m) > 0.0);
        }
    }
}

#[test]
fn xi2_positive_far_outside_the_data() {
    let points: Vec<(f64, f64)> = (0..200).map(|i| (i as f64 * 0.1, -3.0 * (i as f64 * 0.1))).collect();
    let fit = fit_trend(&points).unwrap();
    for m in [-50.0, 0.0, 19.9, 100.0] {
        assert!(fit.xi2(m) > 0.0, "{m}");
    }
}
