//! Dense vector and matrix primitives.
//!
//! Every layer in the model is written as a composition of these functions,
//! each with a hand-written backward counterpart. Buffers are owned by the
//! caller; nothing here holds state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Returns `W·x + b`.
pub fn affine_forward(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::Shape(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows,
            w.cols,
            x.len(),
            b.len()
        )));
    }
    let mut out = b.to_vec();
    matvec_acc(w, x, &mut out);
    Ok(out)
}

/// `out += W·x`. Dimensions are the caller's responsibility.
#[inline]
pub fn matvec_acc(w: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(r), x);
    }
}

/// `out += Wᵀ·y`.
#[inline]
pub fn matvec_t_acc(w: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows, y.len());
    debug_assert_eq!(w.cols, out.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, w.row(r), out);
        }
    }
}

/// `G += y·xᵀ`, the weight gradient of an affine map.
#[inline]
pub fn outer_acc(g: &mut Matrix, y: &[f64], x: &[f64]) {
    debug_assert_eq!(g.rows, y.len());
    debug_assert_eq!(g.cols, x.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, x, g.row_mut(r));
        }
    }
}

/// Backward of [`affine_forward`]: accumulates `dW`, `db` and returns `dx`.
pub fn affine_backward(
    w: &Matrix,
    x: &[f64],
    dy: &[f64],
    dw: &mut Matrix,
    db: &mut [f64],
) -> Vec<f64> {
    outer_acc(dw, dy, x);
    axpy(1.0, dy, db);
    let mut dx = vec![0.0; x.len()];
    matvec_t_acc(w, dy, &mut dx);
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Sigmoid,
    Tanh,
    Relu,
    Mul,
}

pub fn elementwise(op: ElementwiseOp, a: &[f64], b: Option<&[f64]>) -> Result<Vec<f64>> {
    match op {
        ElementwiseOp::Sigmoid => Ok(a.iter().map(|&x| sigmoid(x)).collect()),
        ElementwiseOp::Tanh => Ok(a.iter().map(|x| x.tanh()).collect()),
        ElementwiseOp::Relu => Ok(a.iter().map(|&x| relu(x)).collect()),
        ElementwiseOp::Mul => {
            let b = b.ok_or_else(|| Error::Shape("mul needs a second operand".into()))?;
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "mul: lengths {} and {} differ",
                    a.len(),
                    b.len()
                )));
            }
            Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
        }
    }
}

/// Backward of the unary ops, given the forward *output* `y` and upstream `dy`.
pub fn elementwise_backward(op: ElementwiseOp, y: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
    if y.len() != dy.len() {
        return Err(Error::Shape("elementwise backward: length mismatch".into()));
    }
    let it = y.iter().zip(dy);
    Ok(match op {
        ElementwiseOp::Sigmoid => it.map(|(y, d)| d * y * (1.0 - y)).collect(),
        ElementwiseOp::Tanh => it.map(|(y, d)| d * (1.0 - y * y)).collect(),
        ElementwiseOp::Relu => it.map(|(y, d)| if *y > 0.0 { *d } else { 0.0 }).collect(),
        ElementwiseOp::Mul => {
            return Err(Error::Shape(
                "mul backward needs both operands; use the other factor directly".into(),
            ))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` was observed.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences `(f(θ+h) − f(θ−h)) / 2h`
/// on every coordinate of `theta`.
pub fn check_gradients<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: theta.len(),
        tolerance: tol,
    };
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe)?;
        probe[i] = theta[i] - h;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
