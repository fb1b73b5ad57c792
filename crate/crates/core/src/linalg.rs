//! Dense and banded factorizations used across the crate.
//!
//! Matrices handed to [`PivotedQr`] are stored column-major so that a
//! Householder sweep touches each candidate column contiguously; that is the
//! access pattern of both the design-of-experiments selection (wide matrices,
//! one column per pool point) and the least-squares solves (tall matrices).

use ndarray::Array2;

/// Householder QR with classical column pivoting on residual column norms.
///
/// Computes `A Π = Q R` where `Π` moves the column with the largest remaining
/// norm into position at every step, so `|R_00| >= |R_11| >= ...` holds.
/// The factorization may be stopped after `steps` reflections, which is all
/// the pivot-selection code needs.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    rows: usize,
    cols: usize,
    /// Column-major; `R` on and above the diagonal, reflector tails below.
    qr: Vec<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    r_diag: Vec<f64>,
}

impl PivotedQr {
    /// Factor a row-major ndarray completely.
    pub fn factor(a: &Array2<f64>) -> Self {
        let (rows, cols) = a.dim();
        let mut data = vec![0.0; rows * cols];
        for ((i, j), v) in a.indexed_iter() {
            data[j * rows + i] = *v;
        }
        Self::from_columns(rows, cols, data, rows.min(cols))
    }

    /// Factor a column-major buffer, stopping after at most `max_steps`
    /// Householder reflections.
    pub fn from_columns(rows: usize, cols: usize, mut qr: Vec<f64>, max_steps: usize) -> Self {
        assert_eq!(qr.len(), rows * cols, "buffer does not match dimensions");
        let steps = max_steps.min(rows).min(cols);
        let mut perm: Vec<usize> = (0..cols).collect();
        let mut norms: Vec<f64> = qr.chunks_exact(rows.max(1)).map(sum_sq).collect();
        if rows == 0 {
            norms = vec![0.0; cols];
        }
        let mut tau = Vec::with_capacity(steps);
        let mut r_diag = Vec::with_capacity(steps);

        for k in 0..steps {
            let mut best = k;
            for j in k + 1..cols {
                if norms[j] > norms[best] {
                    best = j;
                }
            }
            if best != k {
                swap_columns(&mut qr, rows, k, best);
                perm.swap(k, best);
                norms.swap(k, best);
            }

            let (head, tail) = qr.split_at_mut((k + 1) * rows);
            let pivot_col = &mut head[k * rows..];
            let (beta, t) = householder(&mut pivot_col[k..]);
            tau.push(t);
            r_diag.push(beta);
            let v = &pivot_col[k..];

            for (offset, col) in tail.chunks_exact_mut(rows).enumerate() {
                let j = k + 1 + offset;
                if t != 0.0 {
                    apply_reflector(v, t, &mut col[k..]);
                }
                norms[j] = sum_sq(&col[k + 1..]);
            }
        }

        Self {
            rows,
            cols,
            qr,
            tau,
            perm,
            r_diag,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Original column index of each pivot position.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Signed diagonal of `R`, one entry per reflection performed.
    pub fn r_diagonal(&self) -> &[f64] {
        &self.r_diag
    }

    /// Number of diagonal entries above `rtol * |R_00|`.
    pub fn rank(&self, rtol: f64) -> usize {
        let Some(first) = self.r_diag.first() else {
            return 0;
        };
        let cut = first.abs() * rtol;
        if first.abs() == 0.0 {
            return 0;
        }
        self.r_diag.iter().take_while(|d| d.abs() > cut).count()
    }

    /// Ratio of the largest to the smallest retained `|R_kk|`.
    pub fn condition_estimate(&self) -> f64 {
        match (self.r_diag.first(), self.r_diag.last()) {
            (Some(a), Some(b)) if b.abs() > 0.0 => a.abs() / b.abs(),
            (Some(_), Some(_)) => f64::INFINITY,
            _ => f64::NAN,
        }
    }

    /// Overwrite `b` with `Qᵀ b`.
    pub fn apply_qt(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.rows);
        for (k, &t) in self.tau.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let col = &self.qr[k * self.rows + k..(k + 1) * self.rows];
            apply_reflector(col, t, &mut b[k..]);
        }
    }

    /// `R[i, j]` in pivoted column order.
    pub fn r(&self, i: usize, j: usize) -> f64 {
        if i > j {
            0.0
        } else if i == j {
            self.r_diag[i]
        } else {
            self.qr[j * self.rows + i]
        }
    }

    /// Least-squares solution using the leading `rank` pivots; the remaining
    /// coefficients are set to zero (basic solution).
    pub fn solve_least_squares(&self, b: &[f64], rank: usize) -> Vec<f64> {
        assert!(rank <= self.r_diag.len());
        let mut rhs = b.to_vec();
        self.apply_qt(&mut rhs);
        let mut x = vec![0.0; rank];
        for i in (0..rank).rev() {
            let mut s = rhs[i];
            for (j, xj) in x.iter().enumerate().skip(i + 1) {
                s -= self.r(i, j) * xj;
            }
            x[i] = s / self.r_diag[i];
        }
        let mut out = vec![0.0; self.cols];
        for (pos, v) in x.into_iter().enumerate() {
            out[self.perm[pos]] = v;
        }
        out
    }
}

fn sum_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn swap_columns(data: &mut [f64], rows: usize, a: usize, b: usize) {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (left, right) = data.split_at_mut(hi * rows);
    left[lo * rows..(lo + 1) * rows].swap_with_slice(&mut right[..rows]);
}

/// Turns `x` into `beta e_0` in place: returns `(beta, tau)` and leaves the
/// reflector `v` (with implicit `v_0 = 1`) in `x[1..]`.
fn householder(x: &mut [f64]) -> (f64, f64) {
    let norm = sum_sq(x).sqrt();
    if norm == 0.0 {
        return (0.0, 0.0);
    }
    let x0 = x[0];
    let beta = if x0 >= 0.0 { -norm } else { norm };
    let scale = 1.0 / (x0 - beta);
    for v in x[1..].iter_mut() {
        *v *= scale;
    }
    x[0] = beta;
    (beta, (beta - x0) / beta)
}

/// `y <- (I - tau v vᵀ) y` where `v = [1, v_tail[1..]]`.
fn apply_reflector(v: &[f64], tau: f64, y: &mut [f64]) {
    let mut s = y[0];
    for (vi, yi) in v[1..].iter().zip(&y[1..]) {
        s += vi * yi;
    }
    s *= tau;
    y[0] -= s;
    for (vi, yi) in v[1..].iter().zip(y[1..].iter_mut()) {
        *yi -= s * vi;
    }
}

/// Upper-triangular `R` with `A = Rᵀ R`, or `None` if a pivot is not positive.
pub fn cholesky_upper(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut r = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= r[[k, j]] * r[[k, j]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        r[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[j, i]];
            for k in 0..j {
                s -= r[[k, j]] * r[[k, i]];
            }
            r[[j, i]] = s / d;
        }
    }
    Some(r)
}

/// Inverse of an upper-triangular matrix by column-wise back-substitution.
pub fn invert_upper(r: &Array2<f64>) -> Array2<f64> {
    let n = r.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        inv[[col, col]] = 1.0 / r[[col, col]];
        for i in (0..col).rev() {
            let mut s = 0.0;
            for k in i + 1..=col {
                s += r[[i, k]] * inv[[k, col]];
            }
            inv[[i, col]] = -s / r[[i, i]];
        }
    }
    inv
}

/// Symmetric positive-definite band matrix, lower band stored by column.
///
/// Entry `(i, j)` with `j <= i <= j + bandwidth` lives at
/// `data[j * (bandwidth + 1) + (i - j)]`.
#[derive(Debug, Clone)]
pub struct SymBandMatrix {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl SymBandMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Add `v` at `(i, j)`; entries above the diagonal are ignored so callers
    /// can scatter full symmetric element matrices.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if i < j {
            return;
        }
        debug_assert!(i - j <= self.bandwidth, "entry outside band");
        self.data[j * (self.bandwidth + 1) + (i - j)] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.data[j * (self.bandwidth + 1) + (i - j)]
        }
    }

    /// In-place band Cholesky `A = L Lᵀ`. Returns the failing row on a
    /// non-positive pivot.
    pub fn factorize(mut self) -> Result<BandCholesky, usize> {
        let w = self.bandwidth + 1;
        for j in 0..self.n {
            let d = self.data[j * w];
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let d = d.sqrt();
            let len = w.min(self.n - j);
            let (head, tail) = self.data.split_at_mut((j + 1) * w);
            let col = &mut head[j * w..j * w + len];
            col[0] = d;
            let inv = 1.0 / d;
            for v in col[1..].iter_mut() {
                *v *= inv;
            }
            // Rank-one update of the trailing columns inside the band.
            for a in 1..len {
                let lij = col[a];
                if lij == 0.0 {
                    continue;
                }
                let target = &mut tail[(a - 1) * w..(a - 1) * w + (len - a)];
                for (t, l) in target.iter_mut().zip(&col[a..len]) {
                    *t -= l * lij;
                }
            }
        }
        Ok(BandCholesky { factor: self })
    }
}

/// Band Cholesky factor produced by [`SymBandMatrix::factorize`].
#[derive(Debug, Clone)]
pub struct BandCholesky {
    factor: SymBandMatrix,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.factor.n;
        let w = self.factor.bandwidth + 1;
        let l = &self.factor.data;
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for j in 0..n {
            let col = &l[j * w..j * w + w.min(n - j)];
            y[j] /= col[0];
            let yj = y[j];
            for (a, lv) in col.iter().enumerate().skip(1) {
                y[j + a] -= lv * yj;
            }
        }
        for j in (0..n).rev() {
            let col = &l[j * w..j * w + w.min(n - j)];
            let mut s = y[j];
            for (a, lv) in col.iter().enumerate().skip(1) {
                s -= lv * y[j + a];
            }
            y[j] = s / col[0];
        }
        y
    }
}
