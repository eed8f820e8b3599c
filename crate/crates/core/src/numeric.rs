//! Small numerical helpers: bracketed root finding, polynomial
//! extrapolation, and eigen utilities on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Brent's method on `[a, b]`; requires a sign change (a zero endpoint is
/// returned directly).
pub fn brent<F>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::BracketFailure { lo: a.min(b), hi: a.max(b) });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
    }
    Ok(b)
}

/// Neville tableau for the value at `x = 0` of the polynomial through
/// `(xs[i], ys[i])`. Returns the extrapolated value and, as an error estimate,
/// its distance from the one-order-lower fit through `xs[1..]`.
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let value = neville_at_zero(xs, ys);
    // compare against one order lower on the points closest to zero
    let est = if xs.len() > 1 { (value - neville_at_zero(&xs[1..], &ys[1..])).abs() } else { f64::INFINITY };
    (value, est)
}

fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for k in 1..n {
        for i in (k..n).rev() {
            p[i] = (xs[i] * p[i - 1] - xs[i - k] * p[i]) / (xs[i] - xs[i - k]);
        }
    }
    p[n - 1]
}

/// Entrywise extrapolation of a sequence of matrices sampled at `xs`.
pub fn extrapolate_matrices(xs: &[f64], ms: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (r, c) = ms[0].shape();
    let mut val = DMatrix::zeros(r, c);
    let mut err = DMatrix::zeros(r, c);
    let mut ys = vec![0.0; ms.len()];
    for i in 0..r {
        for j in 0..c {
            for (k, m) in ms.iter().enumerate() {
                ys[k] = m[(i, j)];
            }
            let (v, e) = extrapolate_to_zero(xs, &ys);
            val[(i, j)] = v;
            err[(i, j)] = e;
        }
    }
    (val, err)
}

/// Least-squares line `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Eigenvalues of a real square matrix (real Schur form), sorted by
/// decreasing modulus, ties broken by real then imaginary part.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<Complex<f64>> = m.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
    ev
}

/// `min | |lambda| - 1 |` over the spectrum; `+inf` for an empty matrix.
pub fn hyperbolicity_margin(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|l| (l.norm() - 1.0).abs()).fold(f64::INFINITY, f64::min)
}

/// Unit eigenvector for a real eigenvalue, from the right singular vector of
/// `M - lambda I` with the smallest singular value. Sign fixed so that the
/// largest-magnitude component is positive.
pub fn real_eigenvector(m: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let n = m.nrows();
    let shifted = m - DMatrix::identity(n, n) * lambda;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    let mut v: DVector<f64> = v_t.row(imin).transpose();
    let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
    if big < 0.0 {
        v = -v;
    }
    let norm = v.norm();
    v / norm
}

/// Angle in `[0, pi/2]` between the lines spanned by `a` and `b`.
pub fn line_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos()
}
