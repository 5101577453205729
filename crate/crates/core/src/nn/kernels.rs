//! Dense kernels shared by plain evaluation and the tape so both produce
//! bit-identical values.

use serde::{Deserialize, Serialize};

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor::new(data.len(), 1, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }
}

/// `c (m×n) = op(a) · op(b)` (+ `c` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`; transposed operands are stored `k×m` / `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stacked truncated-Taylor channels of a batch of `points` inputs.
///
/// Rows `[c·points, (c+1)·points)` hold channel `c`: channel 0 is the value,
/// channels `1..=firsts` are first directional derivatives and, when
/// `second_of` is `Some(j)`, the final channel is the second derivative
/// along the direction of first-derivative channel `j` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JetLayout {
    pub points: usize,
    pub firsts: usize,
    pub second_of: Option<usize>,
}

impl JetLayout {
    pub fn plain(points: usize) -> Self {
        JetLayout {
            points,
            firsts: 0,
            second_of: None,
        }
    }

    pub fn channels(&self) -> usize {
        1 + self.firsts + usize::from(self.second_of.is_some())
    }

    pub fn rows(&self) -> usize {
        self.channels() * self.points
    }

    pub fn second_channel(&self) -> Option<usize> {
        self.second_of.map(|_| self.firsts + 1)
    }

    /// Input jet for `coords` (`points × dim`, row-major): first channel `c`
    /// differentiates along input coordinate `dirs[c]`; the second-order
    /// channel starts at zero because the input map is linear.
    pub fn seed(coords: &[f64], dim: usize, dirs: &[usize], second_of: Option<usize>) -> (Tensor, JetLayout) {
        let points = coords.len() / dim;
        let layout = JetLayout {
            points,
            firsts: dirs.len(),
            second_of,
        };
        let mut data = vec![0.0; layout.rows() * dim];
        data[..coords.len()].copy_from_slice(coords);
        for (c, &d) in dirs.iter().enumerate() {
            let base = (c + 1) * points * dim;
            for p in 0..points {
                data[base + p * dim + d] = 1.0;
            }
        }
        (Tensor::new(layout.rows(), dim, data), layout)
    }
}

/// `x · w (+ b on the first `bias_rows` rows)`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &[f64], bias_rows: usize) -> Tensor {
    assert_eq!(x.cols, w.rows, "dense input width {} vs weight rows {}", x.cols, w.rows);
    let mut out = Tensor::zeros(x.rows, w.cols);
    gemm(x.rows, x.cols, w.cols, &x.data, false, &w.data, false, &mut out.data, false);
    for r in 0..bias_rows.min(x.rows) {
        for (o, bv) in out.data[r * w.cols..(r + 1) * w.cols].iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

/// tanh applied to a jet: value `y = tanh(x)`, first channels `s·x_d`, and
/// second channel `s·x_zz − 2·y·s·x_z²` with `s = 1 − y²`.
pub fn tanh_jet_forward(x: &Tensor, layout: &JetLayout) -> Tensor {
    assert_eq!(x.rows, layout.rows());
    let block = layout.points * x.cols;
    let mut out = Tensor::zeros(x.rows, x.cols);
    let (vals, rest) = out.data.split_at_mut(block);
    for (y, &v) in vals.iter_mut().zip(&x.data[..block]) {
        *y = v.tanh();
    }
    for c in 1..=layout.firsts {
        let xs = &x.data[c * block..(c + 1) * block];
        let ys = &mut rest[(c - 1) * block..c * block];
        for i in 0..block {
            let y0 = vals[i];
            ys[i] = (1.0 - y0 * y0) * xs[i];
        }
    }
    if let (Some(j), Some(sc)) = (layout.second_of, layout.second_channel()) {
        let xz = &x.data[j * block..(j + 1) * block];
        let xzz = &x.data[sc * block..(sc + 1) * block];
        let ys = &mut rest[(sc - 1) * block..sc * block];
        for i in 0..block {
            let y0 = vals[i];
            let s = 1.0 - y0 * y0;
            ys[i] = s * xzz[i] - 2.0 * y0 * s * xz[i] * xz[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn seed_layout() {
        let (t, l) = JetLayout::seed(&[0.1, 0.2, 0.3, 0.4], 2, &[0, 1], Some(2));
        assert_eq!(l.channels(), 4);
        assert_eq!(t.rows, 8);
        assert_eq!(t.row(2), &[1.0, 0.0]);
        assert_eq!(t.row(5), &[0.0, 1.0]);
        assert_eq!(t.row(7), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_jet_closed_form() {
        let x = 0.3_f64;
        let (t, l) = JetLayout::seed(&[x], 1, &[0], Some(1));
        let y = tanh_jet_forward(&t, &l);
        let th = x.tanh();
        assert!((y.data[0] - th).abs() < 1e-15);
        assert!((y.data[1] - (1.0 - th * th)).abs() < 1e-12);
        assert!((y.data[2] - (-2.0 * th * (1.0 - th * th))).abs() < 1e-12);
    }
}
