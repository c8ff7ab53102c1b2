//! Dense linear algebra on [`Tensor`] matrices.
//!
//! Sizes here are at most a few hundred, so everything is straightforward
//! O(n³) code on row-major buffers.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Matrix product. `b` may be a matrix `[k, n]` or a vector `[k]`; the result
/// has the matching rank.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("left operand must be a matrix, got shape {:?}", a.shape()),
        ));
    }
    let (m, k) = (a.rows(), a.cols());
    match b.rank() {
        1 => {
            if b.len() != k {
                return Err(Error::shape(
                    "matmul",
                    format!("{m}x{k} times vector of length {}", b.len()),
                ));
            }
            Ok(Tensor::vector(matvec_raw(a.data(), m, k, b.data())))
        }
        2 => {
            if b.rows() != k {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dimensions differ: {m}x{k} times {}x{}", b.rows(), b.cols()),
                ));
            }
            let n = b.cols();
            Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))
        }
        _ => Err(Error::shape(
            "matmul",
            format!("right operand must be a vector or matrix, got shape {:?}", b.shape()),
        )),
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn matvec_raw<T: Real>(a: &[T], m: usize, k: usize, x: &[T]) -> Vec<T> {
    (0..m)
        .map(|i| dot(&a[i * k..(i + 1) * k], x))
        .collect()
}

/// `aᵀ x` for a row-major `m × k` matrix.
pub(crate) fn matvec_t_raw<T: Real>(a: &[T], m: usize, k: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); k];
    for i in 0..m {
        let xi = x[i];
        if xi == T::zero() {
            continue;
        }
        for (o, &av) in out.iter_mut().zip(&a[i * k..(i + 1) * k]) {
            *o += av * xi;
        }
    }
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm_inf<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
}

pub fn norm2<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    Tensor::matrix(n, m, transpose_raw(a.data(), m, n)).expect("transpose shape")
}

pub(crate) fn transpose_raw<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `aᵀa + shift·I` for a row-major `m × n` matrix.
fn gram_cols<T: Real>(a: &[T], m: usize, n: usize, shift: T) -> Vec<T> {
    let mut g = vec![T::zero(); n * n];
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        for i in 0..n {
            let ri = row[i];
            if ri == T::zero() {
                continue;
            }
            for j in i..n {
                g[i * n + j] += ri * row[j];
            }
        }
    }
    for i in 0..n {
        g[i * n + i] += shift;
        for j in 0..i {
            g[i * n + j] = g[j * n + i];
        }
    }
    g
}

/// `a aᵀ + shift·I` for a row-major `m × n` matrix.
fn gram_rows<T: Real>(a: &[T], m: usize, n: usize, shift: T) -> Vec<T> {
    let mut g = vec![T::zero(); m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&a[i * n..(i + 1) * n], &a[j * n..(j + 1) * n]);
            g[i * m + j] = v;
            g[j * m + i] = v;
        }
        g[i * m + i] += shift;
    }
    g
}

/// Lower-triangular factor `L` of a symmetric positive definite matrix `M = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct SpdFactor<T> {
    n: usize,
    lower: Vec<T>,
}

impl<T: Real> SpdFactor<T> {
    /// Cholesky factorization. Returns `None` when a pivot is not safely positive.
    pub fn cholesky(a: &[T], n: usize) -> Option<Self> {
        let max_diag = (0..n).fold(T::zero(), |acc, i| acc.max(a[i * n + i].abs()));
        let floor = max_diag * T::epsilon() * T::of(n.max(1) as f64) * T::of(4.0);
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if !(d > floor) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / djj;
            }
        }
        Some(SpdFactor { n, lower: l })
    }

    /// Builds the factor from the `R` of a tall QR factorization, using `AᵀA = RᵀR`.
    fn from_qr_r(r: &[T], n: usize) -> Self {
        // r is n×n upper triangular, row-major
        SpdFactor {
            n,
            lower: transpose_raw(r, n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let y = self.solve_lower(b);
        self.solve_upper(&y)
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= l[i * n + p] * y[p];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[T]) -> Vec<T> {
        let n = self.n;
        let l = &self.lower;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in i + 1..n {
                s -= l[p * n + i] * x[p];
            }
            x[i] = s / l[i * n + i];
        }
        x
    }

    pub fn min_pivot(&self) -> T {
        (0..self.n).fold(T::infinity(), |acc, i| acc.min(self.lower[i * self.n + i]))
    }
}

/// Householder QR of a tall matrix (`rows ≥ cols`).
#[derive(Clone, Debug)]
pub struct Qr<T> {
    rows: usize,
    cols: usize,
    /// Householder vectors stored column-wise below the diagonal (row-major storage).
    packed: Vec<T>,
    betas: Vec<T>,
    rdiag: Vec<T>,
}

impl<T: Real> Qr<T> {
    pub fn factor(a: &[T], rows: usize, cols: usize) -> Result<Self> {
        if rows < cols {
            return Err(Error::shape(
                "qr",
                format!("expected a tall matrix, got {rows}x{cols}"),
            ));
        }
        let mut q = a.to_vec();
        let mut betas = vec![T::zero(); cols];
        let mut rdiag = vec![T::zero(); cols];
        for k in 0..cols {
            let mut norm = T::zero();
            for i in k..rows {
                norm = norm.hypot(q[i * cols + k]);
            }
            if norm == T::zero() {
                betas[k] = T::zero();
                rdiag[k] = T::zero();
                continue;
            }
            let alpha = if q[k * cols + k] > T::zero() { -norm } else { norm };
            // v = x - alpha e1, stored in place; v_k kept explicitly
            q[k * cols + k] -= alpha;
            let mut vnorm2 = T::zero();
            for i in k..rows {
                vnorm2 += q[i * cols + k] * q[i * cols + k];
            }
            let beta = if vnorm2 > T::zero() { T::of(2.0) / vnorm2 } else { T::zero() };
            betas[k] = beta;
            rdiag[k] = alpha;
            for j in k + 1..cols {
                let mut s = T::zero();
                for i in k..rows {
                    s += q[i * cols + k] * q[i * cols + j];
                }
                s *= beta;
                for i in k..rows {
                    let vik = q[i * cols + k];
                    q[i * cols + j] -= s * vik;
                }
            }
        }
        Ok(Qr {
            rows,
            cols,
            packed: q,
            betas,
            rdiag,
        })
    }

    /// Upper-triangular `R` (cols × cols), row-major.
    pub fn r(&self) -> Vec<T> {
        let n = self.cols;
        let mut r = vec![T::zero(); n * n];
        for i in 0..n {
            r[i * n + i] = self.rdiag[i];
            for j in i + 1..n {
                r[i * n + j] = self.packed[i * n + j];
            }
        }
        r
    }

    pub fn rdiag(&self) -> &[T] {
        &self.rdiag
    }

    /// True when every `|R_ii|` exceeds `rel · max |R_jj|`.
    pub fn is_full_rank(&self, rel: T) -> bool {
        let max = norm_inf(&self.rdiag);
        max > T::zero() && self.rdiag.iter().all(|d| d.abs() > rel * max)
    }

    /// Applies `Qᵀ` to a vector of length `rows`.
    pub fn qt_apply(&self, b: &[T]) -> Vec<T> {
        let mut y = b.to_vec();
        for k in 0..self.cols {
            self.reflect(k, &mut y);
        }
        y
    }

    /// Applies `Q` to a vector of length `rows`.
    pub fn q_apply(&self, b: &[T]) -> Vec<T> {
        let mut y = b.to_vec();
        for k in (0..self.cols).rev() {
            self.reflect(k, &mut y);
        }
        y
    }

    fn reflect(&self, k: usize, y: &mut [T]) {
        let beta = self.betas[k];
        if beta == T::zero() {
            return;
        }
        let c = self.cols;
        let mut s = T::zero();
        for i in k..self.rows {
            s += self.packed[i * c + k] * y[i];
        }
        s *= beta;
        for i in k..self.rows {
            y[i] -= s * self.packed[i * c + k];
        }
    }

    /// Solves `R x = y` using the first `cols` entries of `y`.
    pub fn r_solve(&self, y: &[T]) -> Vec<T> {
        let n = self.cols;
        let mut x = y[..n].to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.packed[i * n + j] * x[j];
            }
            x[i] = s / self.rdiag[i];
        }
        x
    }

    /// Solves `Rᵀ x = y`.
    pub fn rt_solve(&self, y: &[T]) -> Vec<T> {
        let n = self.cols;
        let mut x = y[..n].to_vec();
        for i in 0..n {
            let mut s = x[i];
            for p in 0..i {
                s -= self.packed[p * n + i] * x[p];
            }
            x[i] = s / self.rdiag[i];
        }
        x
    }

    /// Least-squares solution of `A x ≈ b`.
    pub fn least_squares(&self, b: &[T]) -> Vec<T> {
        let qtb = self.qt_apply(b);
        self.r_solve(&qtb)
    }
}

/// Singular values of a dense matrix, descending, by one-sided Jacobi rotations.
pub fn singular_values<T: Real>(a: &Tensor<T>) -> Vec<T> {
    let (m, n) = (a.rows(), a.cols());
    // work on columns of the taller orientation
    let (rows, cols, mut w) = if m >= n {
        (m, n, a.data().to_vec())
    } else {
        (n, m, transpose_raw(a.data(), m, n))
    };
    let tol = T::epsilon() * T::of(rows as f64);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for i in 0..rows {
                    let wp = w[i * cols + p];
                    let wq = w[i * cols + q];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = w[i * cols + p];
                    let wq = w[i * cols + q];
                    w[i * cols + p] = c * wp - s * wq;
                    w[i * cols + q] = s * wp + c * wq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = (0..cols)
        .map(|j| (0..rows).fold(T::zero(), |acc, i| acc + w[i * cols + j] * w[i * cols + j]).sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Numerical rank with threshold `rel · σ_max`.
pub fn numerical_rank<T: Real>(a: &Tensor<T>, rel: T) -> usize {
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(T::zero());
    if smax == T::zero() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel * smax).count()
}

/// Solves a square system by LU with partial pivoting.
pub fn lu_solve<T: Real>(a: &[T], n: usize, b: &[T]) -> Result<Vec<T>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = norm_inf(a).max(T::min_positive_value());
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|i| (i, m[i * n + k].abs()))
            .fold((k, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= scale * T::epsilon() {
            return Err(Error::Singular(format!(
                "LU pivot {pval} at column {k} of a {n}x{n} system"
            )));
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        let d = m[k * n + k];
        for i in k + 1..n {
            let f = m[i * n + k] / d;
            if f == T::zero() {
                continue;
            }
            m[i * n + k] = f;
            for j in k + 1..n {
                let v = m[k * n + j];
                m[i * n + j] -= f * v;
            }
            let xk = x[k];
            x[i] -= f * xk;
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m[i * n + j] * x[j];
        }
        x[i] = s / m[i * n + i];
    }
    Ok(x)
}

/// Which Gram matrix a regularized solve factored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramSide {
    /// `JᵀJ + λI` (n × n), used when `m ≥ n`.
    Columns,
    /// `JJᵀ + λI` (m × m), used when `m < n`.
    Rows,
}

/// Result of [`regularized_solve`], keeping the factorization for adjoint solves.
#[derive(Clone, Debug)]
pub struct RegularizedSolution<T> {
    pub step: Vec<T>,
    pub side: GramSide,
    pub factor: SpdFactor<T>,
    /// For [`GramSide::Rows`], the multiplier `w = (JJᵀ + λI)⁻¹ r` with `step = Jᵀw`.
    pub multiplier: Vec<T>,
}

/// Minimizer of `‖J s − r‖² + λ‖s‖²`, i.e. `s = (JᵀJ + λI)⁻¹ Jᵀ r`.
///
/// Uses the identity `(JᵀJ + λI)⁻¹Jᵀ = Jᵀ(JJᵀ + λI)⁻¹` to factor the smaller
/// Gram matrix. At `λ = 0` with a wide full-row-rank `J` this yields the
/// minimum-norm solution `J⁺ r`. Cholesky is tried first; when it fails and
/// `λ > 0`, the stacked system `[J; √λ I]` is factored by QR instead.
pub fn regularized_solve<T: Real>(j: &Tensor<T>, r: &[T], lambda: T) -> Result<RegularizedSolution<T>> {
    if j.rank() != 2 {
        return Err(Error::shape(
            "regularized_solve",
            format!("Jacobian must be a matrix, got shape {:?}", j.shape()),
        ));
    }
    let (m, n) = (j.rows(), j.cols());
    if r.len() != m {
        return Err(Error::shape(
            "regularized_solve",
            format!("Jacobian has {m} rows but residual has length {}", r.len()),
        ));
    }
    if lambda < T::zero() || !lambda.is_finite() {
        return Err(Error::Config(format!("LM weight must be finite and nonnegative, got {lambda}")));
    }
    let side = if m < n { GramSide::Rows } else { GramSide::Columns };
    let jd = j.data();
    let factor = match side {
        GramSide::Columns => {
            let gram = gram_cols(jd, m, n, lambda);
            SpdFactor::cholesky(&gram, n)
        }
        GramSide::Rows => {
            let gram = gram_rows(jd, m, n, lambda);
            SpdFactor::cholesky(&gram, m)
        }
    };
    let factor = match factor {
        Some(f) => f,
        None => stacked_qr_factor(jd, m, n, lambda, side)?,
    };
    Ok(match side {
        GramSide::Columns => {
            let jtr = matvec_t_raw(jd, m, n, r);
            RegularizedSolution {
                step: factor.solve(&jtr),
                side,
                factor,
                multiplier: Vec::new(),
            }
        }
        GramSide::Rows => {
            let w = factor.solve(r);
            RegularizedSolution {
                step: matvec_t_raw(jd, m, n, &w),
                side,
                factor,
                multiplier: w,
            }
        }
    })
}

fn stacked_qr_factor<T: Real>(jd: &[T], m: usize, n: usize, lambda: T, side: GramSide) -> Result<SpdFactor<T>> {
    let singular = || {
        Error::Singular(format!(
            "the {m}x{n} Jacobian is rank deficient and the LM weight is {lambda}; use a positive LM weight"
        ))
    };
    if lambda == T::zero() {
        return Err(singular());
    }
    // stacked = [B; √λ I] with B = J (Columns) or Jᵀ (Rows)
    let (b, rows_b, cols_b) = match side {
        GramSide::Columns => (jd.to_vec(), m, n),
        GramSide::Rows => (transpose_raw(jd, m, n), n, m),
    };
    let sq = lambda.sqrt();
    let mut stacked = b;
    stacked.reserve(cols_b * cols_b);
    for i in 0..cols_b {
        for k in 0..cols_b {
            stacked.push(if i == k { sq } else { T::zero() });
        }
    }
    let qr = Qr::factor(&stacked, rows_b + cols_b, cols_b)?;
    if !qr.is_full_rank(T::epsilon()) {
        return Err(singular());
    }
    Ok(SpdFactor::from_qr_r(&qr.r(), cols_b))
}
