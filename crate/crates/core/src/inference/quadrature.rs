/// Gauss-Legendre nodes and weights on `[-1, 1]`, found by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * d * d);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Gauss-Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let (c, h) = ((a + b) / 2.0, (b - a) / 2.0);
    (x.iter().map(|v| c + h * v).collect(), w.iter().map(|v| h * v).collect())
}

/// Linear map from knot values to knot slopes: a three-point parabolic slope in
/// the interior, one-sided parabolic slopes at the ends, the secant for two knots.
/// Row-major `[m, m]`.
fn slope_matrix(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut c = vec![0.0; m * m];
    if m == 2 {
        let h = x[1] - x[0];
        for r in 0..2 {
            c[r * 2] = -1.0 / h;
            c[r * 2 + 1] = 1.0 / h;
        }
        return c;
    }
    // Derivative at x[i + k] of the parabola through x[i], x[i+1], x[i+2].
    let parabola = |c: &mut [f64], row: usize, i: usize, at: usize| {
        let (a, b, d) = (x[i], x[i + 1], x[i + 2]);
        let t = x[at];
        c[row * m + i] += ((t - b) + (t - d)) / ((a - b) * (a - d));
        c[row * m + i + 1] += ((t - a) + (t - d)) / ((b - a) * (b - d));
        c[row * m + i + 2] += ((t - a) + (t - b)) / ((d - a) * (d - b));
    };
    parabola(&mut c, 0, 0, 0);
    for i in 1..m - 1 {
        parabola(&mut c, i, i - 1, i);
    }
    parabola(&mut c, m - 1, m - 3, m - 1);
    c
}

/// Cubic Hermite interpolation weights for knots `x` evaluated at `t`:
/// returns `(w, dw)`, each row-major `[t.len(), x.len()]`, so values are `w @ v`
/// and time derivatives `dw @ v`. Points outside `[x0, x_last]` extrapolate the end cubic.
pub fn hermite_weights(x: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = x.len();
    assert!(m >= 2, "interpolation needs two knots");
    let c = slope_matrix(x);
    let mut w = vec![0.0; t.len() * m];
    let mut dw = vec![0.0; t.len() * m];
    for (r, &tt) in t.iter().enumerate() {
        let i = x[1..m - 1].iter().take_while(|&&k| k <= tt).count();
        let h = x[i + 1] - x[i];
        let s = (tt - x[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let (h00, h10, h01, h11) = (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2);
        let (d00, d10, d01, d11) = (6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s);
        let row = &mut w[r * m..(r + 1) * m];
        let drow = &mut dw[r * m..(r + 1) * m];
        row[i] += h00;
        row[i + 1] += h01;
        drow[i] += d00 / h;
        drow[i + 1] += d01 / h;
        for j in 0..m {
            row[j] += h * (h10 * c[i * m + j] + h11 * c[(i + 1) * m + j]);
            drow[j] += d10 * c[i * m + j] + d11 * c[(i + 1) * m + j];
        }
    }
    (w, dw)
}
