//! (H, C)-sum-of-ReLUs approximators of scalar functions on [-R, R].
//!
//! An approximator is sum_h c_h * relu(<a_h, [z; 1]>) with every ||a_h||_1 <= 1
//! and C = sum_h |c_h|. The builder is deterministic piecewise-linear
//! interpolation at equispaced knots; affine functions are represented
//! exactly. ReLU positive homogeneity lets the l1 normalization of a_h fold
//! its compensation into c_h without changing the function.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One ridge term c * relu(<a, [z; 1]>); `a` has arity + 1 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluTerm {
    pub c: f64,
    pub a: Vec<f64>,
}

/// A sum-of-ReLUs approximator of a scalar function of `arity` variables on
/// [-radius, radius]^arity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumOfRelus {
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "k")]
    pub arity: usize,
    pub terms: Vec<ReluTerm>,
}

/// Sup-error of an approximator against its target over a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub sup_error: f64,
    pub grid_points: usize,
    pub target_eps: f64,
}

impl SumOfRelus {
    pub fn new(radius: f64, arity: usize, terms: Vec<ReluTerm>) -> Result<Self> {
        for (h, t) in terms.iter().enumerate() {
            if t.a.len() != arity + 1 {
                return Err(Error::DimensionMismatch {
                    expected: arity + 1,
                    got: t.a.len(),
                    context: format!("term {h} direction"),
                });
            }
            if !t.c.is_finite() || t.a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("term {h}")));
            }
            let l1: f64 = t.a.iter().map(|v| v.abs()).sum();
            if l1 > 1.0 + 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "term {h} violates ||a||_1 <= 1 (got {l1})"
                )));
            }
        }
        Ok(SumOfRelus {
            radius,
            arity,
            terms,
        })
    }

    /// Term count H.
    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Coefficient mass C = sum |c_h|.
    pub fn coeff_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.c.abs()).sum()
    }

    /// sum_h c_h relu(<a_h, [z; 1]>). Linear extrapolation outside the
    /// build domain; no hard error.
    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.arity {
            return Err(Error::DimensionMismatch {
                expected: self.arity,
                got: z.len(),
                context: "sum-of-relus input".into(),
            });
        }
        let mut acc = 0.0;
        for t in &self.terms {
            let mut arg = t.a[self.arity];
            for (ai, zi) in t.a.iter().zip(z) {
                arg += ai * zi;
            }
            acc += t.c * arg.max(0.0);
        }
        Ok(acc)
    }

    /// Scalar convenience for arity-1 approximators.
    pub fn evaluate1(&self, z: f64) -> f64 {
        debug_assert_eq!(self.arity, 1);
        self.evaluate(std::slice::from_ref(&z)).expect("arity 1")
    }
}

/// Scale a, c so that ||a||_1 <= 1; ReLU positive homogeneity keeps the term
/// value unchanged.
fn normalized_term(c: f64, a: Vec<f64>) -> ReluTerm {
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let scale = l1.max(1.0);
    ReluTerm {
        c: c * scale,
        a: a.into_iter().map(|v| v / scale).collect(),
    }
}

/// Piecewise-linear interpolant of `f` at the knots -R + 2R t / segments,
/// expressed as one exact-constant bias term plus one slope-delta ReLU per
/// knot. For C^2 functions the sup error is at most max|f''| (2R/segments)^2 / 8.
pub fn build_pwl_approx(
    f: impl Fn(f64) -> f64,
    radius: f64,
    segments: usize,
) -> Result<SumOfRelus> {
    if segments < 1 {
        return Err(Error::InvalidConfig("segments must be >= 1".into()));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!("radius must be > 0, got {radius}")));
    }
    let knots: Vec<f64> = (0..=segments)
        .map(|t| -radius + 2.0 * radius * t as f64 / segments as f64)
        .collect();
    let values: Vec<f64> = knots.iter().map(|&z| f(z)).collect();
    for (z, v) in knots.iter().zip(&values) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("f({z}) at interpolation knot")));
        }
    }

    let mut terms = Vec::with_capacity(segments + 1);
    // bias f(-R) carried by relu(<[0, 1], [z; 1]>) = 1, exact
    terms.push(ReluTerm {
        c: values[0],
        a: vec![0.0, 1.0],
    });
    let mut prev_slope = 0.0;
    for t in 0..segments {
        let slope = (values[t + 1] - values[t]) / (knots[t + 1] - knots[t]);
        let delta = slope - prev_slope;
        prev_slope = slope;
        // delta * relu(z - knot)
        terms.push(normalized_term(delta, vec![1.0, -knots[t]]));
    }
    SumOfRelus::new(radius, 1, terms)
}

/// Exact representation of the affine map (z1, z2) -> alpha z1 + beta z2 as
/// two ReLU terms, via x = relu(x) - relu(-x).
pub fn build_affine2(alpha: f64, beta: f64, radius: f64) -> Result<SumOfRelus> {
    let l1 = alpha.abs() + beta.abs();
    if l1 == 0.0 {
        return SumOfRelus::new(radius, 2, Vec::new());
    }
    let scale = l1.max(1.0);
    let a = vec![alpha / scale, beta / scale, 0.0];
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    SumOfRelus::new(
        radius,
        2,
        vec![
            ReluTerm { c: scale, a },
            ReluTerm {
                c: -scale,
                a: neg,
            },
        ],
    )
}

/// Max |f(z) - approx(z)| over a uniform grid on [-R, R]^arity (arity <= 2).
pub fn measure_sup_error(
    approx: &SumOfRelus,
    f: impl Fn(&[f64]) -> f64,
    grid_points: usize,
    target_eps: f64,
) -> Result<ApproxReport> {
    if grid_points < 2 {
        return Err(Error::InvalidConfig("grid needs >= 2 points".into()));
    }
    let r = approx.radius;
    let axis = |i: usize| -r + 2.0 * r * i as f64 / (grid_points - 1) as f64;
    let mut sup: f64 = 0.0;
    match approx.arity {
        1 => {
            for i in 0..grid_points {
                let z = [axis(i)];
                sup = sup.max((f(&z) - approx.evaluate(&z)?).abs());
            }
        }
        2 => {
            for i in 0..grid_points {
                for j in 0..grid_points {
                    let z = [axis(i), axis(j)];
                    sup = sup.max((f(&z) - approx.evaluate(&z)?).abs());
                }
            }
        }
        k => {
            return Err(Error::InvalidConfig(format!(
                "sup measurement supports arity <= 2, got {k}"
            )))
        }
    }
    Ok(ApproxReport {
        sup_error: sup,
        grid_points,
        target_eps,
    })
}

/// Numerically estimated max |f''| over a uniform grid (second central
/// differences at the interior points).
pub fn estimate_max_second_derivative(f: impl Fn(f64) -> f64, radius: f64) -> f64 {
    const GRID: usize = 10_000;
    let h = 2.0 * radius / GRID as f64;
    let values: Vec<f64> = (0..=GRID)
        .map(|i| f(-radius + i as f64 * h))
        .collect();
    let mut best: f64 = 0.0;
    for i in 1..GRID {
        let second = (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h);
        best = best.max(second.abs());
    }
    best
}

/// Segment count for a PWL build to reach sup error <= eps:
/// ceil(2R * sqrt(max|f''| / (8 eps))). Errors out above the cap.
pub fn segments_for_tolerance(
    f: impl Fn(f64) -> f64,
    radius: f64,
    eps: f64,
    cap: usize,
) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be > 0, got {eps}")));
    }
    if eps.is_infinite() {
        return Ok(1);
    }
    let m2 = estimate_max_second_derivative(&f, radius);
    let raw = 2.0 * radius * (m2 / (8.0 * eps)).sqrt();
    let segments = (raw.ceil() as usize).max(1);
    if segments > cap {
        return Err(Error::BudgetInfeasible {
            quantity: "pwl approximation".into(),
            required: segments,
            unit: "segments".into(),
            cap,
        });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use proptest::prelude::*;

    fn sigmoid(z: f64) -> f64 {
        Activation::Sigmoid.value(z)
    }

    #[test]
    fn identity_is_exact() {
        let approx = build_pwl_approx(|z| z, 1.0, 3).unwrap();
        let report = measure_sup_error(&approx, |z| z[0], 4001, 0.0).unwrap();
        assert!(report.sup_error <= 1e-12, "sup {}", report.sup_error);
    }

    #[test]
    fn single_term_formula() {
        let approx = SumOfRelus::new(
            1.0,
            1,
            vec![ReluTerm {
                c: 2.0,
                a: vec![0.5, 0.5],
            }],
        )
        .unwrap();
        assert_eq!(approx.evaluate1(1.0), 2.0);
    }

    #[test]
    fn empty_term_list_is_zero() {
        let approx = SumOfRelus::new(1.0, 1, Vec::new()).unwrap();
        for z in [-1.0, 0.0, 0.33] {
            assert_eq!(approx.evaluate1(z), 0.0);
        }
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let approx = build_pwl_approx(sigmoid, 1.0, 4).unwrap();
        assert!(approx.evaluate(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn sigmoid_twenty_segments_meets_reference_envelope() {
        // eps <= 0.625, H <= 80, C <= 25 for the unit-width segmentation of
        // [-10, 10]
        let approx = build_pwl_approx(sigmoid, 10.0, 20).unwrap();
        let report = measure_sup_error(&approx, |z| sigmoid(z[0]), 100_001, 0.625).unwrap();
        assert!(report.sup_error <= 0.625);
        assert!(approx.term_count() <= 80, "H = {}", approx.term_count());
        assert!(approx.coeff_sum() <= 25.0, "C = {}", approx.coeff_sum());
        // measured value frozen from an independent interpolation oracle,
        // itself below the analytic bound max|f''| / 8 = 0.012028
        assert!((report.sup_error - 0.0116485).abs() < 5e-5, "sup {}", report.sup_error);
        assert!(report.sup_error <= 0.012028);
        // value at 0 within the reference tolerance of sigmoid(0) = 0.5
        assert!((approx.evaluate1(0.0) - 0.5).abs() <= 0.625);
    }

    #[test]
    fn doubling_segments_halves_error_at_least() {
        let e20 = measure_sup_error(
            &build_pwl_approx(sigmoid, 10.0, 20).unwrap(),
            |z| sigmoid(z[0]),
            100_001,
            0.0,
        )
        .unwrap()
        .sup_error;
        let e40 = measure_sup_error(
            &build_pwl_approx(sigmoid, 10.0, 40).unwrap(),
            |z| sigmoid(z[0]),
            100_001,
            0.0,
        )
        .unwrap()
        .sup_error;
        assert!(e20 / e40 >= 2.0, "ratio {}", e20 / e40);
    }

    #[test]
    fn quadrupling_segments_cuts_error_by_three() {
        let e20 = measure_sup_error(
            &build_pwl_approx(sigmoid, 10.0, 20).unwrap(),
            |z| sigmoid(z[0]),
            100_001,
            0.0,
        )
        .unwrap()
        .sup_error;
        let e80 = measure_sup_error(
            &build_pwl_approx(sigmoid, 10.0, 80).unwrap(),
            |z| sigmoid(z[0]),
            100_001,
            0.0,
        )
        .unwrap()
        .sup_error;
        assert!(e20 / e80 >= 3.0, "ratio {}", e20 / e80);
    }

    #[test]
    fn knot_interpolation_is_exact() {
        let segments = 17;
        let approx = build_pwl_approx(sigmoid, 4.0, segments).unwrap();
        for t in 0..=segments {
            let z = -4.0 + 8.0 * t as f64 / segments as f64;
            assert!(
                (approx.evaluate1(z) - sigmoid(z)).abs() <= 1e-10,
                "knot {z}"
            );
        }
    }

    #[test]
    fn affine_two_variable_is_exact() {
        // u(t, y) = 2 (t - y), one coordinate
        let approx = build_affine2(2.0, -2.0, 3.0).unwrap();
        let report =
            measure_sup_error(&approx, |z| 2.0 * (z[0] - z[1]), 301, 0.0).unwrap();
        assert!(report.sup_error <= 1e-12);
        assert_eq!(approx.term_count(), 2);
        assert_eq!(approx.coeff_sum(), 8.0);
    }

    #[test]
    fn pwl_error_bound_holds_for_smooth_f() {
        for segments in [5usize, 11, 23] {
            let r = 6.0;
            let approx = build_pwl_approx(sigmoid, r, segments).unwrap();
            let report = measure_sup_error(&approx, |z| sigmoid(z[0]), 40_001, 0.0).unwrap();
            let h = 2.0 * r / segments as f64;
            let bound = estimate_max_second_derivative(sigmoid, r) * h * h / 8.0;
            assert!(
                report.sup_error <= bound + 1e-12,
                "{segments} segments: {} > {bound}",
                report.sup_error
            );
        }
    }

    #[test]
    fn non_finite_sample_is_rejected_with_knot() {
        let err = build_pwl_approx(|z| 1.0 / z, 1.0, 2).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("f(0)"), "{msg}");
    }

    #[test]
    fn segment_selector_matches_formula_and_cap() {
        let eps = 1e-3;
        let n = segments_for_tolerance(sigmoid, 10.0, eps, 100_000).unwrap();
        let m2 = estimate_max_second_derivative(sigmoid, 10.0);
        let expected = (2.0 * 10.0 * (m2 / (8.0 * eps)).sqrt()).ceil() as usize;
        assert_eq!(n, expected);
        assert_eq!(segments_for_tolerance(sigmoid, 10.0, f64::INFINITY, 10).unwrap(), 1);
        let err = segments_for_tolerance(sigmoid, 10.0, 1e-12, 1000).unwrap_err();
        assert!(matches!(err, Error::BudgetInfeasible { .. }));
    }

    #[test]
    fn selector_tolerance_is_achieved() {
        for eps in [1e-2, 1e-3, 1e-4] {
            let n = segments_for_tolerance(sigmoid, 10.0, eps, 1_000_000).unwrap();
            let approx = build_pwl_approx(sigmoid, 10.0, n).unwrap();
            let report = measure_sup_error(&approx, |z| sigmoid(z[0]), 50_001, eps).unwrap();
            assert!(report.sup_error <= eps, "eps {eps}: sup {}", report.sup_error);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let approx = build_pwl_approx(sigmoid, 10.0, 20).unwrap();
        let json = serde_json::to_string(&approx).unwrap();
        let back: SumOfRelus = serde_json::from_str(&json).unwrap();
        assert_eq!(approx, back);
    }

    proptest! {
        #[test]
        fn l1_constraint_preserved_and_knots_interpolated(
            segments in 1usize..40,
            radius in 0.5f64..8.0,
        ) {
            let approx = build_pwl_approx(sigmoid, radius, segments).unwrap();
            for term in &approx.terms {
                let l1: f64 = term.a.iter().map(|v| v.abs()).sum();
                prop_assert!(l1 <= 1.0 + 1e-12);
            }
            for t in 0..=segments {
                let z = -radius + 2.0 * radius * t as f64 / segments as f64;
                prop_assert!((approx.evaluate1(z) - sigmoid(z)).abs() <= 1e-10);
            }
        }

        #[test]
        fn affine_functions_reproduced_exactly(
            slope in -3.0f64..3.0,
            intercept in -2.0f64..2.0,
            segments in 1usize..25,
        ) {
            let f = move |z: f64| slope * z + intercept;
            let approx = build_pwl_approx(f, 2.0, segments).unwrap();
            let report = measure_sup_error(&approx, |z| f(z[0]), 501, 0.0).unwrap();
            prop_assert!(report.sup_error <= 1e-12);
        }

        #[test]
        fn rescaling_terms_preserves_value(z in -2.0f64..2.0, lambda in 0.05f64..1.0) {
            // positive homogeneity: a -> lambda a, c -> c / lambda
            let approx = build_pwl_approx(sigmoid, 2.0, 7).unwrap();
            let scaled = SumOfRelus::new(
                2.0,
                1,
                approx
                    .terms
                    .iter()
                    .map(|t| ReluTerm {
                        c: t.c / lambda,
                        a: t.a.iter().map(|v| v * lambda).collect(),
                    })
                    .collect(),
            )
            .unwrap();
            prop_assert!((approx.evaluate1(z) - scaled.evaluate1(z)).abs() <= 1e-10);
        }
    }
}
