//! Dense complex linear algebra shared by every module: tensor products,
//! isometry checks, deterministic orthonormal completions, spectral helpers,
//! and seeded random constructions used by tests and spanning sets.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::Rng;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    Complex::new(re, 0.0)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(rows: usize, cols: usize) -> CMat {
    CMat::zeros(rows, cols)
}

pub fn basis_vec(n: usize, i: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[i] = cr(1.0);
    v
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn outer(a: &CVec, b: &CVec) -> CMat {
    a * b.adjoint()
}

pub fn frob_dist(a: &CMat, b: &CMat) -> f64 {
    (a - b).norm()
}

pub fn approx_eq(a: &CMat, b: &CMat, tol: f64) -> bool {
    a.shape() == b.shape() && frob_dist(a, b) <= tol
}

pub fn is_isometry(v: &CMat, tol: f64) -> bool {
    let gram = v.adjoint() * v;
    frob_dist(&gram, &eye(v.ncols())) <= tol
}

pub fn is_unitary(u: &CMat, tol: f64) -> bool {
    u.nrows() == u.ncols() && is_isometry(u, tol)
}

/// Trace as a complex number.
pub fn tr(m: &CMat) -> C64 {
    m.diagonal().sum()
}

pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * cr(0.5)
}

/// Eigendecomposition of a Hermitian matrix by two-sided complex Jacobi
/// rotations: returns eigenvalues (descending) and the matching orthonormal
/// eigenvector columns. Hand-rolled for the same reason as `svd`: the backend
/// decomposition loses eigenvector orthogonality on degenerate complex
/// spectra.
pub fn eig_hermitian(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), zeros(0, 0));
    }
    let mut a = hermitize(m);
    let mut v = eye(n);
    let scale = a.norm().max(1e-300);
    for _ in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let b = apq.norm();
                if b <= 1e-300 {
                    continue;
                }
                // Phase the q column so the pivot is real, then rotate.
                let phase = apq / cr(b);
                let tau = (a[(q, q)].re - a[(p, p)].re) / (2.0 * b);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cth = 1.0 / (1.0 + t * t).sqrt();
                let sth = t * cth;
                let upp = cr(cth);
                let upq = cr(sth);
                let uqp = -phase.conj() * sth;
                let uqq = phase.conj() * cth;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * upp + akq * uqp;
                    a[(k, q)] = akp * upq + akq * uqq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = upp.conj() * apk + uqp.conj() * aqk;
                    a[(q, k)] = upq.conj() * apk + uqq.conj() * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * upp + vkq * uqp;
                    v[(k, q)] = vkp * upq + vkq * uqq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.partial_cmp(&a[(i, i)].re).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[(i, i)].re).collect();
    let cols: Vec<CVec> = order.iter().map(|&i| v.column(i).into_owned()).collect();
    (vals, CMat::from_columns(&cols))
}

/// Smallest eigenvalue of a Hermitian matrix (the input is symmetrised
/// first so tiny anti-Hermitian noise cannot poison the decomposition).
pub fn min_eig_hermitian(m: &CMat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = eig_hermitian(m);
    vals.last().copied().unwrap_or(0.0)
}

pub fn is_psd(m: &CMat, tol: f64) -> bool {
    min_eig_hermitian(m) >= -tol
}

/// Singular value decomposition with singular values sorted descending.
pub struct Svd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub vt: CMat,
}

/// One-sided Jacobi SVD. Hand-rolled because the generic complex SVD in the
/// matrix backend mis-reconstructs wide complex inputs; Jacobi is also the
/// accurate choice for the tiny singular values that rank decisions at 1e-10
/// depend on.
pub fn svd(m: &CMat) -> Svd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    let mut a = m.clone();
    let mut v = eye(cols);
    let limit = 60;
    for _ in 0..limit {
        let mut off = 0.0f64;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let ci = a.column(i).into_owned();
                let cj = a.column(j).into_owned();
                let na = ci.norm_squared();
                let nb = cj.norm_squared();
                let g = ci.dotc(&cj);
                let gn = g.norm();
                if gn <= 1e-300 || na <= 1e-300 || nb <= 1e-300 {
                    continue;
                }
                let rel = gn / (na * nb).sqrt();
                off = off.max(rel);
                if rel <= 1e-15 {
                    continue;
                }
                let phase = c(g.re / gn, g.im / gn);
                let tau = (nb - na) / (2.0 * gn);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cs = cr(1.0 / (1.0 + t * t).sqrt());
                let sn = cs * t;
                let ph = phase.conj();
                let rotate = |mat: &mut CMat, col_i: &CVec, col_j: &CVec| {
                    for r in 0..mat.nrows() {
                        let ui = col_i[r];
                        let wj = ph * col_j[r];
                        mat[(r, i)] = cs * ui - sn * wj;
                        mat[(r, j)] = sn * ui + cs * wj;
                    }
                };
                rotate(&mut a, &ci, &cj);
                let vi = v.column(i).into_owned();
                let vj = v.column(j).into_owned();
                rotate(&mut v, &vi, &vj);
            }
        }
        if off <= 1e-15 {
            break;
        }
    }
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|i| a.column(i).norm()).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));
    let s: Vec<f64> = order.iter().take(k).map(|&i| norms[i]).collect();
    let mut u_cols: Vec<CVec> = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        if norms[i] > 1e-300 {
            u_cols.push(a.column(i).into_owned() / cr(norms[i]));
        }
    }
    let u = if u_cols.is_empty() {
        complete_isometry(&zeros(rows, 0), 1e-12).columns(0, k).into_owned()
    } else {
        let partial = CMat::from_columns(&u_cols);
        complete_isometry(&partial, 1e-12).columns(0, k).into_owned()
    };
    let vt_rows: Vec<_> = order.iter().take(k).map(|&i| v.column(i).adjoint()).collect();
    let vt = CMat::from_rows(&vt_rows);
    Svd { u, s, vt }
}

pub fn rank(m: &CMat, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    svd(m).s.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis (as matrix columns) of the column space, from the
/// leading left singular vectors.
pub fn column_space(m: &CMat, tol: f64) -> CMat {
    if m.nrows() == 0 || m.ncols() == 0 {
        return zeros(m.nrows(), 0);
    }
    let dec = svd(m);
    let r = dec.s.iter().filter(|&&s| s > tol).count();
    dec.u.columns(0, r).into_owned()
}

/// Orthonormal basis of the right null space, as matrix columns. The thin
/// SVD only spans the row space, so the complement is completed explicitly.
pub fn null_space(m: &CMat, tol: f64) -> CMat {
    if m.ncols() == 0 {
        return zeros(m.ncols(), 0);
    }
    if m.nrows() == 0 {
        return eye(m.ncols());
    }
    let dec = svd(m);
    let r = dec.s.iter().filter(|&&s| s > tol).count();
    let row_basis = dec.vt.rows(0, r).adjoint();
    let full = complete_isometry(&row_basis, 1e-12);
    full.columns(r, m.ncols() - r).into_owned()
}

/// Deterministic two-pass Gram-Schmidt over the given vectors; returns an
/// orthonormal spanning set in first-seen order. Vectors whose residual
/// drops below `tol` are dropped as dependent.
pub fn gram_schmidt(vecs: &[CVec], tol: f64) -> Vec<CVec> {
    let mut basis: Vec<CVec> = Vec::new();
    for v in vecs {
        let mut r = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let overlap = b.dotc(&r);
                r -= b * overlap;
            }
        }
        let n = r.norm();
        if n > tol {
            basis.push(r / cr(n));
        }
    }
    basis
}

/// Completes a matrix with orthonormal columns to a full unitary by sweeping
/// the standard basis deterministically.
pub fn complete_isometry(v: &CMat, tol: f64) -> CMat {
    let n = v.nrows();
    let mut cols: Vec<CVec> = v.column_iter().map(|c| c.into_owned()).collect();
    for i in 0..n {
        if cols.len() == n {
            break;
        }
        let mut r = basis_vec(n, i);
        for _ in 0..2 {
            for b in &cols {
                let overlap = b.dotc(&r);
                r -= b * overlap;
            }
        }
        let norm = r.norm();
        if norm > tol.max(1e-8) {
            cols.push(r / cr(norm));
        }
    }
    assert_eq!(cols.len(), n, "isometry completion found too few directions");
    CMat::from_columns(&cols)
}

/// Mixed-radix index helpers: `dims` lists factor dimensions, index is
/// row-major (first factor most significant).
pub fn mr_encode(digits: &[usize], dims: &[usize]) -> usize {
    debug_assert_eq!(digits.len(), dims.len());
    let mut idx = 0;
    for (d, &dim) in digits.iter().zip(dims) {
        debug_assert!(*d < dim);
        idx = idx * dim + d;
    }
    idx
}

pub fn mr_decode(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for i in (0..dims.len()).rev() {
        out[i] = idx % dims[i];
        idx /= dims[i];
    }
    debug_assert_eq!(idx, 0);
    out
}

fn normal_pair(rng: &mut impl Rng) -> (f64, f64) {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

pub fn random_ginibre(rows: usize, cols: usize, rng: &mut impl Rng) -> CMat {
    CMat::from_fn(rows, cols, |_, _| {
        let (re, im) = normal_pair(rng);
        c(re, im)
    })
}

/// Haar-random unitary via QR of a Ginibre matrix with the phase convention
/// fixed by the R diagonal.
pub fn random_unitary(n: usize, rng: &mut impl Rng) -> CMat {
    let g = random_ginibre(n, n, rng);
    let qr = nalgebra::QR::new(g);
    let q = qr.q();
    let r = qr.r();
    let mut phases = CVec::zeros(n);
    for i in 0..n {
        let d = r[(i, i)];
        phases[i] = if d.norm() > 0.0 { d / cr(d.norm()) } else { cr(1.0) };
    }
    let mut u = q;
    for j in 0..n {
        let p = phases[j];
        for i in 0..n {
            u[(i, j)] *= p;
        }
    }
    u
}

/// Random isometry with `cols` orthonormal columns in dimension `rows`.
pub fn random_isometry(rows: usize, cols: usize, rng: &mut impl Rng) -> CMat {
    assert!(rows >= cols);
    let u = random_unitary(rows, rng);
    u.columns(0, cols).into_owned()
}

pub fn random_state(n: usize, rng: &mut impl Rng) -> CVec {
    let v = random_ginibre(n, 1, rng).column(0).into_owned();
    let norm = v.norm();
    v / cr(norm)
}

/// Random trace-preserving Kraus set `dout x din` with `k` operators, from a
/// Stinespring isometry.
pub fn random_kraus(dout: usize, din: usize, k: usize, rng: &mut impl Rng) -> Vec<CMat> {
    assert!(dout * k >= din, "environment too small for an isometry");
    let v = random_isometry(dout * k, din, rng);
    (0..k)
        .map(|e| {
            CMat::from_fn(dout, din, |i, j| v[(i * k + e, j)])
        })
        .collect()
}

pub fn random_density(n: usize, rng: &mut impl Rng) -> CMat {
    let g = random_ginibre(n, n, rng);
    let m = &g * g.adjoint();
    let t = tr(&m).re;
    m / cr(t)
}
