//! Dense linear algebra the stability analysis needs beyond what nalgebra
//! exposes: eigenvectors of general (non-symmetric) real matrices, ridge
//! least squares with conditioning diagnostics, and deterministically
//! oriented symmetric spectra.
//!
//! The general eigensolver is the classic balance / Hessenberg / shifted-QR
//! chain in the Numerical Recipes formulation, ported to `DMatrix<f64>`.
//! nalgebra's own Schur decomposition cross-checks the eigenvalues in tests;
//! it cannot replace this code because it does not return eigenvectors.

use crate::error::{AuditError, Result};
use nalgebra::{Complex, DMatrix, DVector, SVD};

pub type Complex64 = Complex<f64>;

/// One eigenvalue with its (possibly complex) right eigenvector. The vector
/// has unit norm over the concatenated real and imaginary parts, and its
/// largest-modulus entry is rotated to the positive real axis so repeated
/// runs produce identical output.
#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: Complex64,
    pub vector_re: DVector<f64>,
    pub vector_im: DVector<f64>,
}

impl Eigenpair {
    pub fn magnitude(&self) -> f64 {
        self.value.norm()
    }

    pub fn phase(&self) -> f64 {
        self.value.im.atan2(self.value.re)
    }

    pub fn is_real(&self) -> bool {
        self.value.im == 0.0
    }
}

/// Eigenvalues and right eigenvectors of a square real matrix, sorted by
/// descending modulus (ties: descending real part, then descending
/// imaginary part, so a conjugate pair keeps the positive-imaginary member
/// first).
pub fn eig_general(a: &DMatrix<f64>) -> Result<Vec<Eigenpair>> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(AuditError::DimensionMismatch {
            context: "eigendecomposition",
            expected: n.max(1),
            got: a.ncols(),
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(AuditError::InvalidArgument {
            what: "matrix",
            reason: "non-finite entry".into(),
        });
    }
    let mut h = a.clone();
    let scale = balance(&mut h);
    let perm = elmhes(&mut h);
    let mut v = DMatrix::<f64>::identity(n, n);
    eltran(&h, &mut v, &perm);
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    hqr2(&mut h, &mut v, &mut d, &mut e)?;
    balbak(&mut v, &scale);

    // Unpack the packed real storage: a real eigenvalue owns its column; a
    // conjugate pair stores (re, im) of the positive-imaginary member in two
    // adjacent columns.
    let mut pairs = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if e[i] == 0.0 {
            let re = v.column(i).into_owned();
            pairs.push(Eigenpair {
                value: Complex::new(d[i], 0.0),
                vector_re: re,
                vector_im: DVector::zeros(n),
            });
            i += 1;
        } else {
            let re = v.column(i).into_owned();
            let im = v.column(i + 1).into_owned();
            pairs.push(Eigenpair {
                value: Complex::new(d[i], e[i].abs()),
                vector_re: re.clone(),
                vector_im: im.clone(),
            });
            pairs.push(Eigenpair {
                value: Complex::new(d[i], -e[i].abs()),
                vector_re: re,
                vector_im: -im,
            });
            i += 2;
        }
    }
    for p in &mut pairs {
        normalize_phase(&mut p.vector_re, &mut p.vector_im);
    }
    pairs.sort_by(|x, y| {
        y.magnitude()
            .partial_cmp(&x.magnitude())
            .unwrap()
            .then(y.value.re.partial_cmp(&x.value.re).unwrap())
            .then(y.value.im.partial_cmp(&x.value.im).unwrap())
    });
    Ok(pairs)
}

/// Unit-norm with the largest-modulus entry rotated onto the positive real
/// axis. For a real vector this is a sign convention.
fn normalize_phase(re: &mut DVector<f64>, im: &mut DVector<f64>) {
    let norm = (re.norm_squared() + im.norm_squared()).sqrt();
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    let mut best_mod = -1.0;
    for k in 0..re.len() {
        let m = re[k] * re[k] + im[k] * im[k];
        if m > best_mod + 1e-30 {
            best_mod = m;
            best = k;
        }
    }
    let pivot_mod = (re[best] * re[best] + im[best] * im[best]).sqrt();
    if pivot_mod == 0.0 {
        return;
    }
    // Multiply by conj(pivot) / (|pivot| * norm).
    let cr = re[best] / (pivot_mod * norm);
    let ci = -im[best] / (pivot_mod * norm);
    for k in 0..re.len() {
        let (r, i) = (re[k], im[k]);
        re[k] = r * cr - i * ci;
        im[k] = r * ci + i * cr;
    }
}

fn balance(a: &mut DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let radix = 2.0f64;
    let sqrdx = radix * radix;
    let mut scale = vec![1.0; n];
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / radix;
                let mut f = 1.0;
                let s = c + r;
                let mut c_acc = c;
                while c_acc < g {
                    f *= radix;
                    c_acc *= sqrdx;
                }
                g = r * radix;
                while c_acc > g {
                    f /= radix;
                    c_acc /= sqrdx;
                }
                if (c_acc + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    scale[i] *= f;
                    for j in 0..n {
                        a[(i, j)] *= g;
                    }
                    for j in 0..n {
                        a[(j, i)] *= f;
                    }
                }
            }
        }
    }
    scale
}

fn elmhes(a: &mut DMatrix<f64>) -> Vec<usize> {
    let n = a.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 3 {
        return perm;
    }
    for m in 1..n - 1 {
        let mut x = 0.0f64;
        let mut i = m;
        for j in m..n {
            if a[(j, m - 1)].abs() > x.abs() {
                x = a[(j, m - 1)];
                i = j;
            }
        }
        perm[m] = i;
        if i != m {
            for j in (m - 1)..n {
                a.swap((i, j), (m, j));
            }
            for j in 0..n {
                a.swap((j, i), (j, m));
            }
        }
        if x != 0.0 {
            for i in (m + 1)..n {
                let mut y = a[(i, m - 1)];
                if y != 0.0 {
                    y /= x;
                    a[(i, m - 1)] = y;
                    for j in m..n {
                        let t = y * a[(m, j)];
                        a[(i, j)] -= t;
                    }
                    for j in 0..n {
                        let t = y * a[(j, i)];
                        a[(j, m)] += t;
                    }
                }
            }
        }
    }
    perm
}

fn eltran(a: &DMatrix<f64>, v: &mut DMatrix<f64>, perm: &[usize]) {
    let n = a.nrows();
    if n < 3 {
        return;
    }
    for mp in (1..n - 1).rev() {
        for k in mp + 1..n {
            v[(k, mp)] = a[(k, mp - 1)];
        }
        let i = perm[mp];
        if i != mp {
            for j in mp..n {
                v[(mp, j)] = v[(i, j)];
                v[(i, j)] = 0.0;
            }
            v[(i, mp)] = 1.0;
        }
    }
}

/// Shifted double-QR iteration on an upper Hessenberg matrix, accumulating
/// the similarity transform in `v`, followed by back-substitution for the
/// eigenvectors. `d`/`e` receive real and imaginary eigenvalue parts.
#[allow(clippy::too_many_lines)]
fn hqr2(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = a.nrows();
    let eps = f64::EPSILON;
    let mut z = 0.0f64;
    let mut s = 0.0f64;
    let mut r = 0.0f64;
    let mut q = 0.0f64;
    let mut p = 0.0f64;
    let mut anorm = 0.0f64;

    for i in 0..n {
        let lo = i.saturating_sub(1);
        for j in lo..n {
            anorm += a[(i, j)].abs();
        }
    }

    let mut nn = n - 1;
    let mut t = 0.0f64;
    'outer: loop {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l > 0 {
                s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() <= eps * s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[(nn, nn)];
            if l == nn {
                d[nn] = x + t;
                a[(nn, nn)] = x + t;
                if nn == 0 {
                    break 'outer;
                }
                nn -= 1;
            } else {
                let mut y = a[(nn - 1, nn - 1)];
                let mut w = a[(nn, nn - 1)] * a[(nn - 1, nn)];
                if l == nn - 1 {
                    p = 0.5 * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    a[(nn, nn)] = x;
                    a[(nn - 1, nn - 1)] = y + t;
                    if q >= 0.0 {
                        z = p + z.copysign(p);
                        d[nn - 1] = x + z;
                        d[nn] = x + z;
                        if z != 0.0 {
                            d[nn] = x - w / z;
                        }
                        x = a[(nn, nn - 1)];
                        s = x.abs() + z.abs();
                        p = x / s;
                        q = z / s;
                        r = (p * p + q * q).sqrt();
                        p /= r;
                        q /= r;
                        for j in nn - 1..n {
                            z = a[(nn - 1, j)];
                            a[(nn - 1, j)] = q * z + p * a[(nn, j)];
                            a[(nn, j)] = q * a[(nn, j)] - p * z;
                        }
                        for i in 0..=nn {
                            z = a[(i, nn - 1)];
                            a[(i, nn - 1)] = q * z + p * a[(i, nn)];
                            a[(i, nn)] = q * a[(i, nn)] - p * z;
                        }
                        for i in 0..n {
                            z = v[(i, nn - 1)];
                            v[(i, nn - 1)] = q * z + p * v[(i, nn)];
                            v[(i, nn)] = q * v[(i, nn)] - p * z;
                        }
                    } else {
                        d[nn] = x + p;
                        e[nn] = -z;
                        d[nn - 1] = d[nn];
                        e[nn - 1] = -e[nn];
                    }
                    if nn <= 1 {
                        break 'outer;
                    }
                    nn -= 2;
                } else {
                    if its == 30 {
                        return Err(AuditError::EigenFailure { size: n });
                    }
                    if its == 10 || its == 20 {
                        t += x;
                        for i in 0..=nn {
                            a[(i, i)] -= x;
                        }
                        s = a[(nn, nn - 1)].abs() + a[(nn - 1, nn - 2)].abs();
                        y = 0.75 * s;
                        x = 0.75 * s;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    let mut m = nn - 2;
                    while m >= l {
                        z = a[(m, m)];
                        r = x - z;
                        s = y - z;
                        p = (r * s - w) / a[(m + 1, m)] + a[(m, m + 1)];
                        q = a[(m + 1, m + 1)] - z - r - s;
                        r = a[(m + 2, m + 1)];
                        s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
                        let vv =
                            p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
                        if u <= eps * vv {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nn - 1 {
                        a[(i + 2, i)] = 0.0;
                        if i != m {
                            a[(i + 2, i - 1)] = 0.0;
                        }
                    }
                    for k in m..nn {
                        if k != m {
                            p = a[(k, k - 1)];
                            q = a[(k + 1, k - 1)];
                            r = 0.0;
                            if k + 1 != nn {
                                r = a[(k + 2, k - 1)];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = (p * p + q * q + r * r).sqrt().copysign(p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a[(k, k - 1)] = -a[(k, k - 1)];
                                }
                            } else {
                                a[(k, k - 1)] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..n {
                                p = a[(k, j)] + q * a[(k + 1, j)];
                                if k + 1 != nn {
                                    p += r * a[(k + 2, j)];
                                    a[(k + 2, j)] -= p * z;
                                }
                                a[(k + 1, j)] -= p * y;
                                a[(k, j)] -= p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in 0..=mmin {
                                p = x * a[(i, k)] + y * a[(i, k + 1)];
                                if k + 1 != nn {
                                    p += z * a[(i, k + 2)];
                                    a[(i, k + 2)] -= p * r;
                                }
                                a[(i, k + 1)] -= p * q;
                                a[(i, k)] -= p;
                            }
                            for i in 0..n {
                                p = x * v[(i, k)] + y * v[(i, k + 1)];
                                if k + 1 != nn {
                                    p += z * v[(i, k + 2)];
                                    v[(i, k + 2)] -= p * r;
                                }
                                v[(i, k + 1)] -= p * q;
                                v[(i, k)] -= p;
                            }
                        }
                    }
                }
            }
            if l + 1 >= nn {
                break;
            }
        }
    }

    if anorm != 0.0 {
        for nn in (0..n).rev() {
            p = d[nn];
            q = e[nn];
            let na = nn.wrapping_sub(1);
            if q == 0.0 {
                let mut m = nn;
                a[(nn, nn)] = 1.0;
                if nn > 0 {
                    let mut i = nn - 1;
                    loop {
                        let w = a[(i, i)] - p;
                        r = 0.0;
                        for j in m..=nn {
                            r += a[(i, j)] * a[(j, nn)];
                        }
                        if e[i] < 0.0 {
                            z = w;
                            s = r;
                        } else {
                            m = i;
                            if e[i] == 0.0 {
                                let mut tt = w;
                                if tt == 0.0 {
                                    tt = eps * anorm;
                                }
                                a[(i, nn)] = -r / tt;
                            } else {
                                let x = a[(i, i + 1)];
                                let y = a[(i + 1, i)];
                                q = (d[i] - p).powi(2) + e[i].powi(2);
                                let tt = (x * s - z * r) / q;
                                a[(i, nn)] = tt;
                                if x.abs() > z.abs() {
                                    a[(i + 1, nn)] = (-r - w * tt) / x;
                                } else {
                                    a[(i + 1, nn)] = (-s - y * tt) / z;
                                }
                            }
                            let tt = a[(i, nn)].abs();
                            if eps * tt * tt > 1.0 {
                                for j in i..=nn {
                                    a[(j, nn)] /= tt;
                                }
                            }
                        }
                        if i == 0 {
                            break;
                        }
                        i -= 1;
                    }
                }
            } else if q < 0.0 {
                let mut m = na;
                if a[(nn, na)].abs() > a[(na, nn)].abs() {
                    a[(na, na)] = q / a[(nn, na)];
                    a[(na, nn)] = -(a[(nn, nn)] - p) / a[(nn, na)];
                } else {
                    let temp = Complex::new(0.0, -a[(na, nn)]) / Complex::new(a[(na, na)] - p, q);
                    a[(na, na)] = temp.re;
                    a[(na, nn)] = temp.im;
                }
                a[(nn, na)] = 0.0;
                a[(nn, nn)] = 1.0;
                if nn >= 2 {
                    for i in (0..nn - 1).rev() {
                        let w = a[(i, i)] - p;
                        let mut ra = 0.0;
                        let mut sa = 0.0;
                        for j in m..=nn {
                            ra += a[(i, j)] * a[(j, na)];
                            sa += a[(i, j)] * a[(j, nn)];
                        }
                        if e[i] < 0.0 {
                            z = w;
                            r = ra;
                            s = sa;
                        } else {
                            m = i;
                            if e[i] == 0.0 {
                                let temp = Complex::new(-ra, -sa) / Complex::new(w, q);
                                a[(i, na)] = temp.re;
                                a[(i, nn)] = temp.im;
                            } else {
                                let x = a[(i, i + 1)];
                                let y = a[(i + 1, i)];
                                let mut vr = (d[i] - p).powi(2) + e[i].powi(2) - q * q;
                                let vi = 2.0 * q * (d[i] - p);
                                if vr == 0.0 && vi == 0.0 {
                                    vr = eps
                                        * anorm
                                        * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                                }
                                let temp = Complex::new(
                                    x * r - z * ra + q * sa,
                                    x * s - z * sa - q * ra,
                                ) / Complex::new(vr, vi);
                                a[(i, na)] = temp.re;
                                a[(i, nn)] = temp.im;
                                if x.abs() > z.abs() + q.abs() {
                                    a[(i + 1, na)] =
                                        (-ra - w * a[(i, na)] + q * a[(i, nn)]) / x;
                                    a[(i + 1, nn)] =
                                        (-sa - w * a[(i, nn)] - q * a[(i, na)]) / x;
                                } else {
                                    let temp = Complex::new(
                                        -r - y * a[(i, na)],
                                        -s - y * a[(i, nn)],
                                    ) / Complex::new(z, q);
                                    a[(i + 1, na)] = temp.re;
                                    a[(i + 1, nn)] = temp.im;
                                }
                            }
                        }
                        let tt = a[(i, na)].abs().max(a[(i, nn)].abs());
                        if eps * tt * tt > 1.0 {
                            for j in i..=nn {
                                a[(j, na)] /= tt;
                                a[(j, nn)] /= tt;
                            }
                        }
                    }
                }
            }
        }

        for j in (0..n).rev() {
            for i in 0..n {
                z = 0.0;
                for k in 0..=j {
                    z += v[(i, k)] * a[(k, j)];
                }
                v[(i, j)] = z;
            }
        }
    }
    Ok(())
}

fn balbak(v: &mut DMatrix<f64>, scale: &[f64]) {
    let n = v.nrows();
    for (i, &s) in scale.iter().enumerate().take(n) {
        for j in 0..n {
            v[(i, j)] *= s;
        }
    }
}

/// Ridge least squares `min ||A x - b||^2 + lambda^2 ||x||^2` solved through
/// the SVD, column by column of `b`. `regularization` is relative: the
/// actual `lambda` is `regularization * sigma_max`.
#[derive(Debug)]
pub struct RidgeSolution {
    pub solution: DMatrix<f64>,
    /// `sigma_max / sigma_min`; absent when the smallest singular value is
    /// exactly zero.
    pub condition_number: Option<f64>,
    /// Absolute ridge weight actually applied.
    pub lambda: f64,
}

/// Relative singular-value cutoff below which an unregularized system is
/// treated as singular.
pub const SINGULAR_CUTOFF: f64 = 1e-12;

pub fn ridge_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, regularization: f64) -> Result<RidgeSolution> {
    if a.nrows() != b.nrows() {
        return Err(AuditError::DimensionMismatch {
            context: "least squares",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if !(regularization >= 0.0) {
        return Err(AuditError::InvalidArgument {
            what: "regularization",
            reason: format!("{regularization}"),
        });
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0f64, f64::max);
    let sigma_min = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda = regularization * sigma_max;
    if regularization == 0.0 && sigma_min <= sigma_max * SINGULAR_CUTOFF {
        return Err(AuditError::SingularSystem {
            threshold: SINGULAR_CUTOFF,
        });
    }
    // x = V diag(s / (s^2 + lambda^2)) U^T b
    let mut ut_b = u.transpose() * b;
    for (i, &s) in sigma.iter().enumerate() {
        let factor = if s == 0.0 && lambda == 0.0 {
            0.0
        } else {
            s / (s * s + lambda * lambda)
        };
        ut_b.row_mut(i).scale_mut(factor);
    }
    let solution = v_t.transpose() * ut_b;
    let condition_number = if sigma_min > 0.0 && sigma_min.is_finite() {
        Some(sigma_max / sigma_min)
    } else {
        None
    };
    Ok(RidgeSolution {
        solution,
        condition_number,
        lambda,
    })
}

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric
/// matrix, each vector signed so its largest-magnitude entry is positive.
pub struct SymSpectrum {
    pub values: Vec<f64>,
    pub vectors: Vec<DVector<f64>>,
}

pub fn symmetric_spectrum(m: &DMatrix<f64>) -> Result<SymSpectrum> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(AuditError::DimensionMismatch {
            context: "symmetric spectrum",
            expected: m.nrows().max(1),
            got: m.ncols(),
        });
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut values = Vec::with_capacity(order.len());
    let mut vectors = Vec::with_capacity(order.len());
    for &i in &order {
        values.push(eig.eigenvalues[i]);
        let mut v = eig.eigenvectors.column(i).into_owned();
        let mut zeros = DVector::zeros(v.len());
        normalize_phase(&mut v, &mut zeros);
        vectors.push(v);
    }
    Ok(SymSpectrum { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn residual(a: &DMatrix<f64>, pair: &Eigenpair) -> f64 {
        // || A v - lambda v || with complex v split into parts.
        let avr = a * &pair.vector_re;
        let avi = a * &pair.vector_im;
        let lr = pair.value.re;
        let li = pair.value.im;
        let rr = avr - (lr * &pair.vector_re - li * &pair.vector_im);
        let ri = avi - (lr * &pair.vector_im + li * &pair.vector_re);
        (rr.norm_squared() + ri.norm_squared()).sqrt()
    }

    #[test]
    fn diagonal_matrix_eigenvalues_sorted_by_modulus() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.5]);
        let pairs = eig_general(&a).unwrap();
        assert_abs_diff_eq!(pairs[0].value.re, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(pairs[1].value.re, 0.5, epsilon = 1e-12);
        assert!(pairs[0].is_real() && pairs[1].is_real());
        assert_abs_diff_eq!(pairs[0].vector_re[1].abs(), 1.0, epsilon = 1e-12);
        // Sign convention: the dominant entry is positive.
        assert!(pairs[0].vector_re[1] > 0.0);
    }

    #[test]
    fn scaled_rotation_gives_modulus_and_quarter_turn_phase() {
        let r = 1.2f64;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -r, r, 0.0]);
        let pairs = eig_general(&a).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_abs_diff_eq!(p.magnitude(), r, epsilon = 1e-12);
            assert_abs_diff_eq!(p.phase().abs(), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
            assert!(residual(&a, p) < 1e-10);
        }
        // Positive-imaginary member first.
        assert!(pairs[0].value.im > 0.0);
        assert!(pairs[1].value.im < 0.0);
    }

    #[test]
    fn random_matrices_satisfy_eigen_residual_and_match_schur_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 2 + (trial % 5);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let pairs = eig_general(&a).unwrap();
            assert_eq!(pairs.len(), n);
            for p in &pairs {
                let res = residual(&a, p);
                assert!(res < 1e-8, "residual {res} on a {n}x{n} matrix");
                let norm =
                    (p.vector_re.norm_squared() + p.vector_im.norm_squared()).sqrt();
                assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-10);
            }
            // Independent eigenvalue source: nalgebra's Schur reduction.
            let mut ours: Vec<(f64, f64)> =
                pairs.iter().map(|p| (p.value.re, p.value.im)).collect();
            let mut schur: Vec<(f64, f64)> = a
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|c| (c.re, c.im))
                .collect();
            let key = |x: &(f64, f64)| (x.0, x.1);
            ours.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
            schur.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
            for (o, s) in ours.iter().zip(&schur) {
                assert_abs_diff_eq!(o.0, s.0, epsilon = 1e-7);
                assert_abs_diff_eq!(o.1.abs(), s.1.abs(), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn one_by_one_matrix_is_its_own_spectrum() {
        let a = DMatrix::from_row_slice(1, 1, &[-0.7]);
        let pairs = eig_general(&a).unwrap();
        assert_abs_diff_eq!(pairs[0].value.re, -0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(pairs[0].vector_re[0].abs(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ridge_solve_recovers_exact_solution_when_well_posed() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x_true = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.7, 0.25]);
        let b = &a * &x_true;
        let sol = ridge_solve(&a, &b, 0.0).unwrap();
        assert!((sol.solution - x_true).abs().max() < 1e-12);
        assert!(sol.condition_number.unwrap() > 1.0);
        assert_eq!(sol.lambda, 0.0);
    }

    #[test]
    fn ridge_shrinks_toward_zero_as_regularization_grows() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let loose = ridge_solve(&a, &b, 0.0).unwrap().solution.norm();
        let tight = ridge_solve(&a, &b, 10.0).unwrap().solution.norm();
        assert!(tight < loose / 10.0);
    }

    #[test]
    fn singular_unregularized_system_is_refused() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        match ridge_solve(&a, &b, 0.0) {
            Err(AuditError::SingularSystem { .. }) => {}
            other => panic!("expected singular refusal, got {other:?}"),
        }
        // The same system with a ridge goes through.
        let sol = ridge_solve(&a, &b, 1e-6).unwrap();
        assert!(sol.solution.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn symmetric_spectrum_is_descending_with_positive_pivots() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let s = symmetric_spectrum(&m).unwrap();
        assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
        for (lambda, v) in s.values.iter().zip(&s.vectors) {
            assert!((&m * v - *lambda * v).norm() < 1e-10);
            let pivot = v.iter().cloned().fold(0.0f64, |acc, x| {
                if x.abs() > acc.abs() {
                    x
                } else {
                    acc
                }
            });
            assert!(pivot > 0.0);
        }
    }
}
