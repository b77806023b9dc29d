//! Small quadrature helpers shared by the observables and the PDE code.

/// Four-point Gauss–Legendre nodes and weights on `[-1, 1]`.
pub const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
pub const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_8,
    0.652_145_154_862_546_2,
    0.652_145_154_862_546_2,
    0.347_854_845_137_453_8,
];

/// Four-point Gauss–Legendre rule on `[a, b]`.
#[inline]
pub fn gauss_legendre4<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for k in 0..4 {
        acc += GL4_WEIGHTS[k] * f(mid + half * GL4_NODES[k]);
    }
    acc * half
}

/// Composite Gauss–Legendre with `panels` four-point panels.
pub fn gauss_legendre_composite<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + h * i as f64;
            gauss_legendre4(lo, lo + h, &mut f)
        })
        .sum()
}

/// Composite Simpson rule; `intervals` is rounded up to an even number.
pub fn simpson<F: FnMut(f64) -> f64>(a: f64, b: f64, intervals: usize, mut f: F) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Trapezoid rule over equally spaced samples.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl4_is_exact_for_degree_seven() {
        let v = gauss_legendre4(0.0, 2.0, |x| x.powi(7) - 3.0 * x.powi(2));
        assert!((v - (2f64.powi(8) / 8.0 - 8.0)).abs() < 1e-12);
    }

    #[test]
    fn simpson_and_trapezoid() {
        let s = simpson(0.0, std::f64::consts::PI, 200, f64::sin);
        assert!((s - 2.0).abs() < 1e-8);
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        assert!((trapezoid(&xs, 0.1) - 0.5).abs() < 1e-14);
    }
}
