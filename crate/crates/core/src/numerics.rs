//! Small numeric kernels: Nelder–Mead with infinite-penalty support, bisection,
//! trapezoid quadrature and 2×2 matrix helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric 2×2 matrix `[[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SymMat2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl SymMat2 {
    pub const ZERO: SymMat2 = SymMat2 { a11: 0.0, a12: 0.0, a22: 0.0 };
    pub const IDENTITY: SymMat2 = SymMat2 { a11: 1.0, a12: 0.0, a22: 1.0 };

    pub fn new(a11: f64, a12: f64, a22: f64) -> Self {
        SymMat2 { a11, a12, a22 }
    }

    pub fn diag(a11: f64, a22: f64) -> Self {
        SymMat2 { a11, a12: 0.0, a22 }
    }

    /// `v vᵀ`
    pub fn outer(v: [f64; 2]) -> Self {
        SymMat2 { a11: v[0] * v[0], a12: v[0] * v[1], a22: v[1] * v[1] }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    pub fn inverse(&self) -> Option<SymMat2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(SymMat2 { a11: self.a22 / det, a12: -self.a12 / det, a22: self.a11 / det })
    }

    pub fn add(&self, other: &SymMat2) -> SymMat2 {
        SymMat2 { a11: self.a11 + other.a11, a12: self.a12 + other.a12, a22: self.a22 + other.a22 }
    }

    pub fn sub(&self, other: &SymMat2) -> SymMat2 {
        SymMat2 { a11: self.a11 - other.a11, a12: self.a12 - other.a12, a22: self.a22 - other.a22 }
    }

    pub fn scale(&self, s: f64) -> SymMat2 {
        SymMat2 { a11: self.a11 * s, a12: self.a12 * s, a22: self.a22 * s }
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [self.a11 * v[0] + self.a12 * v[1], self.a12 * v[0] + self.a22 * v[1]]
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: [f64; 2]) -> f64 {
        self.a11 * v[0] * v[0] + 2.0 * self.a12 * v[0] * v[1] + self.a22 * v[1] * v[1]
    }

    pub fn to_mat2(&self) -> Mat2 {
        Mat2([[self.a11, self.a12], [self.a12, self.a22]])
    }

    pub fn is_finite(&self) -> bool {
        self.a11.is_finite() && self.a12.is_finite() && self.a22.is_finite()
    }

    /// Eigenvalues and unit eigenvectors (as columns) via a single Jacobi rotation.
    pub fn eigen(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let theta = 0.5 * (2.0 * self.a12).atan2(self.a11 - self.a22);
        let (s, c) = theta.sin_cos();
        let l1 = self.a11 * c * c + 2.0 * self.a12 * c * s + self.a22 * s * s;
        let l2 = self.a11 * s * s - 2.0 * self.a12 * c * s + self.a22 * c * c;
        ([l1, l2], [[c, -s], [s, c]])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let (l, _) = self.eigen();
        l[0].min(l[1])
    }

    /// Factor `F` with `F Fᵀ = self` for a PSD matrix (symmetric square root).
    /// Negative eigenvalues are treated as zero.
    pub fn psd_factor(&self) -> Mat2 {
        let (l, q) = self.eigen();
        let r0 = l[0].max(0.0).sqrt();
        let r1 = l[1].max(0.0).sqrt();
        Mat2([[q[0][0] * r0, q[0][1] * r1], [q[1][0] * r0, q[1][1] * r1]])
    }

    /// Correlation `a12 / sqrt(a11 a22)`, NaN when a diagonal entry is zero.
    pub fn correlation(&self) -> f64 {
        let d = (self.a11 * self.a22).sqrt();
        if d > 0.0 {
            self.a12 / d
        } else {
            f64::NAN
        }
    }
}

/// General 2×2 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub fn transpose(&self) -> Mat2 {
        let m = &self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn mul(&self, other: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    /// `Bᵀ S B` for symmetric `S`, symmetrized.
    pub fn congruence(&self, s: &SymMat2) -> SymMat2 {
        let m = self.transpose().mul(&s.to_mat2()).mul(self);
        SymMat2 { a11: m.0[0][0], a12: 0.5 * (m.0[0][1] + m.0[1][0]), a22: m.0[1][1] }
    }
}

/// `v` rounded to `digits` significant digits, in fixed notation for
/// magnitudes in `[1e-4, 1e15)` and scientific notation otherwise.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = digits.max(1);
    let sci = format!("{v:.*e}", digits - 1);
    // exponent after rounding, so 9.9999996 counts as 10
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-4..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        sci
    }
}

/// Clamps negative eigenvalues to zero: `Q max(Ψ, 0) Qᵀ`. Matrices that are
/// already PSD are returned unchanged.
pub fn psd_project(m: SymMat2) -> SymMat2 {
    let (l, q) = m.eigen();
    if l[0] >= 0.0 && l[1] >= 0.0 {
        return m;
    }
    let l0 = l[0].max(0.0);
    let l1 = l[1].max(0.0);
    SymMat2 {
        a11: l0 * q[0][0] * q[0][0] + l1 * q[0][1] * q[0][1],
        a12: l0 * q[0][0] * q[1][0] + l1 * q[0][1] * q[1][1],
        a22: l0 * q[1][0] * q[1][0] + l1 * q[1][1] * q[1][1],
    }
}

/// Composite trapezoid rule on a strictly ascending grid.
pub fn quadrature_trapezoid(grid: &[f64], values: &[f64]) -> Result<f64> {
    if grid.len() != values.len() {
        return Err(Error::LengthMismatch(grid.len(), values.len()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("quadrature grid must be strictly ascending".into()));
    }
    Ok(grid.windows(2).zip(values.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum())
}

/// Bisection on a sign-changing bracket. Stops when `|g(x)| <= tol` or the
/// bracket is narrower than `tol`.
pub fn find_root_bracketed<G>(mut g: G, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    G: FnMut(f64) -> f64,
{
    if !(lo < hi) {
        return Err(Error::InvalidInput(format!("bracket requires lo < hi, got [{lo}, {hi}]")));
    }
    let (mut a, mut b) = (lo, hi);
    let mut ga = g(a);
    let gb = g(b);
    if ga == 0.0 {
        return Ok(a);
    }
    if gb == 0.0 {
        return Ok(b);
    }
    if ga.signum() == gb.signum() || ga.is_nan() || gb.is_nan() {
        return Err(Error::NoSignChange { lo, hi, g_lo: ga, g_hi: gb });
    }
    for _ in 0..2000 {
        let mid = 0.5 * (a + b);
        let gm = g(mid);
        if gm.abs() <= tol || (b - a) <= tol || mid == a || mid == b {
            return Ok(mid);
        }
        if gm.signum() == ga.signum() {
            a = mid;
            ga = gm;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Stop once every vertex is within this distance of the best one.
    pub diameter_tol: f64,
    pub max_iter: usize,
    /// Per-coordinate initial edge lengths; defaults to 5% of each start
    /// coordinate (0.00025 for zero coordinates).
    pub initial_step: Option<Vec<f64>>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { diameter_tol: 1e-8, max_iter: 2000, initial_step: None }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub argmin: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

// +inf and NaN objective values are ranked as the worst possible finite value.
fn sentinel(v: f64) -> f64 {
    if v.is_nan() || v == f64::INFINITY {
        f64::MAX
    } else {
        v
    }
}

/// Nelder–Mead downhill simplex with standard coefficients. The objective may
/// return `+inf` to mark infeasible points; such vertices always rank last, so
/// the best vertex is always feasible once the start is.
pub fn minimize_simplex<F>(mut objective: F, start: &[f64], opts: &SimplexOptions) -> Result<SimplexResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = start.len();
    if dim == 0 {
        return Err(Error::InvalidInput("empty start vector".into()));
    }
    if !(opts.diameter_tol > 0.0) {
        return Err(Error::InvalidInput("diameter_tol must be positive".into()));
    }
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sentinel(objective(x))
    };

    let f0 = eval(start, &mut evaluations);
    if f0 == f64::MAX {
        return Err(Error::InfeasibleStart(start.to_vec()));
    }

    let steps: Vec<f64> = match &opts.initial_step {
        Some(s) if s.len() == dim => s.clone(),
        Some(s) => return Err(Error::LengthMismatch(s.len(), dim)),
        None => start.iter().map(|&x| if x != 0.0 { 0.05 * x } else { 0.00025 }).collect(),
    };

    let mut vertices: Vec<Vec<f64>> = vec![start.to_vec()];
    let mut values: Vec<f64> = vec![f0];
    for i in 0..dim {
        // Prefer a feasible initial vertex: try +step, -step, then shorter steps.
        let mut chosen = None;
        let mut step = steps[i];
        'search: for _ in 0..30 {
            for sign in [1.0, -1.0] {
                let mut v = start.to_vec();
                v[i] += sign * step;
                let fv = eval(&v, &mut evaluations);
                if fv < f64::MAX {
                    chosen = Some((v, fv));
                    break 'search;
                }
            }
            step *= 0.5;
        }
        let (v, fv) = chosen.unwrap_or_else(|| {
            let mut v = start.to_vec();
            v[i] += steps[i];
            (v, f64::MAX)
        });
        vertices.push(v);
        values.push(fv);
    }

    let mut order: Vec<usize> = (0..=dim).collect();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let diameter = vertices
            .iter()
            .map(|v| v.iter().zip(&vertices[best]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if diameter < opts.diameter_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let worst = order[dim];
        let second_worst = order[dim - 1];
        let mut centroid = vec![0.0; dim];
        for &idx in &order[..dim] {
            for (c, x) in centroid.iter_mut().zip(&vertices[idx]) {
                *c += x / dim as f64;
            }
        }
        let along =
            |t: f64| -> Vec<f64> { centroid.iter().zip(&vertices[worst]).map(|(c, w)| c + t * (c - w)).collect() };

        let reflected = along(REFLECT);
        let f_r = eval(&reflected, &mut evaluations);
        if f_r < values[best] {
            let expanded = along(REFLECT * EXPAND);
            let f_e = eval(&expanded, &mut evaluations);
            if f_e < f_r {
                vertices[worst] = expanded;
                values[worst] = f_e;
            } else {
                vertices[worst] = reflected;
                values[worst] = f_r;
            }
            continue;
        }
        if f_r < values[second_worst] {
            vertices[worst] = reflected;
            values[worst] = f_r;
            continue;
        }
        let (contracted, f_c) = if f_r < values[worst] {
            let p = along(REFLECT * CONTRACT);
            let f = eval(&p, &mut evaluations);
            (p, f)
        } else {
            let p = along(-CONTRACT);
            let f = eval(&p, &mut evaluations);
            (p, f)
        };
        if f_c < values[worst].min(f_r) {
            vertices[worst] = contracted;
            values[worst] = f_c;
            continue;
        }
        // Shrink toward the best vertex.
        let anchor = vertices[best].clone();
        for &idx in &order[1..] {
            let v: Vec<f64> = anchor.iter().zip(&vertices[idx]).map(|(b, x)| b + SHRINK * (x - b)).collect();
            values[idx] = eval(&v, &mut evaluations);
            vertices[idx] = v;
        }
    }

    let best = order[0];
    Ok(SimplexResult { argmin: vertices[best].clone(), value: values[best], converged, iterations, evaluations })
}

/// Damped Newton refinement of a smooth minimum, with central-difference
/// gradient and Hessian on steps `h_i = fd_step·(1 + |x_i|)`. Steps that do
/// not lower the objective raise the Levenberg damping; the result is never
/// worse than the start. Meant to sharpen a simplex answer, whose accuracy is
/// limited to roughly the square root of the objective's rounding noise.
pub fn polish_newton<F>(mut objective: F, start: &[f64], fd_step: f64, max_iter: usize) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = start.len();
    let mut x = start.to_vec();
    let mut fx = objective(&x);
    if !fx.is_finite() || dim == 0 {
        return (x, fx);
    }
    let mut damping = 1e-8;
    for _ in 0..max_iter {
        let h: Vec<f64> = x.iter().map(|v| fd_step * (1.0 + v.abs())).collect();
        let mut at = |shifts: &[(usize, f64)]| {
            let mut p = x.clone();
            for &(i, d) in shifts {
                p[i] += d;
            }
            objective(&p)
        };
        let mut grad = vec![0.0; dim];
        let mut hess = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            let up = at(&[(i, h[i])]);
            let dn = at(&[(i, -h[i])]);
            grad[i] = (up - dn) / (2.0 * h[i]);
            hess[i][i] = (up - 2.0 * fx + dn) / (h[i] * h[i]);
            for j in 0..i {
                let pp = at(&[(i, h[i]), (j, h[j])]);
                let pm = at(&[(i, h[i]), (j, -h[j])]);
                let mp = at(&[(i, -h[i]), (j, h[j])]);
                let mm = at(&[(i, -h[i]), (j, -h[j])]);
                let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
                hess[i][j] = v;
                hess[j][i] = v;
            }
        }
        if grad.iter().chain(hess.iter().flatten()).any(|v| !v.is_finite()) {
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = hess.clone();
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += damping * (row[i].abs() + 1.0);
            }
            let Some(step) = solve_dense(a, grad.iter().map(|g| -g).collect()) else {
                damping *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            let ft = objective(&trial);
            if ft < fx {
                let size = step.iter().map(|s| s * s).sum::<f64>().sqrt();
                x = trial;
                fx = ft;
                damping = (damping * 0.1).max(1e-12);
                accepted = size > 1e-14 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (x, fx)
}

// Gaussian elimination with partial pivoting; None when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[pivot][col].abs() > 0.0) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
