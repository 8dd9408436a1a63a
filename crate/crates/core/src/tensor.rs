//! Dense row-major tensors over `f64` and the small linear-algebra kernels
//! the rest of the crate is built on.
//!
//! Layout is row-major everywhere; grouping schemes in [`crate::penalty`]
//! index into this layout. Zero-length extents are legal so fully pruned or
//! not-yet-grown filter banks stay representable.

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Builds a tensor from raw row-major data. The data length must match
    /// the shape product and every value must be finite.
    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                len
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {bad} in tensor data")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Tensor> {
        let shape = vec![data.len()];
        Tensor::from_data(&shape, data)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the flat data under a new shape with equal product.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            flat = flat * self.shape[i] + d;
        }
        flat
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

fn check_matrix(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{name} must be a matrix, got shape {s:?}"))),
    }
}

/// `a (m×k) · b (k×n)`, row-major triple loop ordered for cache locality.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = check_matrix(a, "a")?;
    let (kb, n) = check_matrix(b, "b")?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner extents disagree: {ka} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut od[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a (m×k) · bᵀ` for `b (n×k)`: rows of both operands are contiguous, which
/// makes this the fastest product shape here. Used for dense layers.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = check_matrix(a, "a")?;
    let (n, kb) = check_matrix(b, "b")?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul_nt inner extents disagree: {ka} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bd[j * ka..(j + 1) * ka];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            od[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// `aᵀ (k×m) · b (k×n)` for `a (k×m)`: accumulates rank-1 updates row by row.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = check_matrix(a, "a")?;
    let (kb, n) = check_matrix(b, "b")?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul_tn outer extents disagree: {ka} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for t in 0..ka {
        let arow = &ad[t * m..(t + 1) * m];
        let brow = &bd[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Output spatial extent of a cross-correlation along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::Dimension(format!(
            "kernel extent {kernel} does not fit padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unrolls conv patches of a `c_in×h×w` input into a `(h'·w') × (c_in·kh·kw)`
/// matrix so the convolution becomes one `matmul_nt` against the kernel bank.
pub(crate) fn im2col(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [f64],
) {
    let patch = c_in * kh * kw;
    debug_assert_eq!(col.len(), out_h * out_w * patch);
    col.fill(0.0);
    for oh in 0..out_h {
        for ow in 0..out_w {
            let base = (oh * out_w + ow) * patch;
            for ci in 0..c_in {
                let plane = &input[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let dst = base + (ci * kh + ki) * kw;
                    for kj in 0..kw {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            col[dst + kj] = row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a `(h'·w') × (c_in·kh·kw)` column-gradient matrix back onto the
/// input plane; the adjoint of [`im2col`].
pub(crate) fn col2im(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    input_grad: &mut [f64],
) {
    let patch = c_in * kh * kw;
    for oh in 0..out_h {
        for ow in 0..out_w {
            let base = (oh * out_w + ow) * patch;
            for ci in 0..c_in {
                let plane = &mut input_grad[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let src = base + (ci * kh + ki) * kw;
                    for kj in 0..kw {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            row[iw as usize] += col[src + kj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation of a single `c_in×h×w` input with a
/// `c_out×c_in×kh×kw` kernel bank.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_in, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("conv2d input must be rank 3, got {s:?}"))),
    };
    let (c_out, kc, kh, kw) = match kernels.shape() {
        [o, c, a, b] => (*o, *c, *a, *b),
        s => return Err(Error::Dimension(format!("conv2d kernels must be rank 4, got {s:?}"))),
    };
    if kc != c_in {
        return Err(Error::Dimension(format!(
            "kernel input channels {kc} do not match input channels {c_in}"
        )));
    }
    let out_h = conv_out_extent(h, kh, stride, pad)?;
    let out_w = conv_out_extent(w, kw, stride, pad)?;
    let patch = c_in * kh * kw;
    let mut col = vec![0.0; out_h * out_w * patch];
    im2col(input.data(), c_in, h, w, kh, kw, stride, pad, out_h, out_w, &mut col);
    let col_t = Tensor { shape: vec![out_h * out_w, patch], data: col };
    let ker_m = kernels.reshape(&[c_out, patch])?;
    // kernels (c_out×patch) · colᵀ → c_out × (h'·w'), already in output layout
    let out = matmul_nt(&ker_m, &col_t)?;
    out.reshape(&[c_out, out_h, out_w])
}

/// Largest eigenvalue of `XᵀX` for a data matrix `X (n×d)`, by power
/// iteration with a deterministic start, to relative tolerance `1e-8`.
pub fn spectral_norm_sq(x: &Tensor) -> Result<f64> {
    let (n, d) = check_matrix(x, "x")?;
    if n == 0 || d == 0 {
        return Err(Error::Dimension("spectral_norm_sq needs n, d >= 1".into()));
    }
    let xd = x.data();
    // v ← XᵀX v without forming XᵀX
    let apply = |v: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mut dot = 0.0;
            for (&a, &b) in row.iter().zip(v.iter()) {
                dot += a * b;
            }
            for (o, &a) in out.iter_mut().zip(row) {
                *o += dot * a;
            }
        }
    };
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut next = vec![0.0; d];
    let mut eig = 0.0f64;
    const CAP: usize = 100_000;
    for _ in 0..CAP {
        apply(&v, &mut next);
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for a in next.iter_mut() {
            *a /= norm;
        }
        std::mem::swap(&mut v, &mut next);
        // Rayleigh quotient vᵀ(XᵀX)v
        apply(&v, &mut next);
        let new_eig: f64 = v.iter().zip(&next).map(|(a, b)| a * b).sum();
        if (new_eig - eig).abs() <= 1e-8 * new_eig.abs().max(1e-300) {
            return Ok(new_eig);
        }
        eig = new_eig;
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge within {CAP} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_data(&[r, c], data).unwrap()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = Tensor::identity(2);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let z = Tensor::zeros(&[2, 3]);
        let az = matmul(&a, &z).unwrap();
        assert_eq!(az, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_reference_oracle() {
        // expected values frozen from a triple-loop reference
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, t2(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = crate::rng::SeededRng::new(7);
        let a = rng.normal_tensor(&[4, 6], 1.0);
        let b = rng.normal_tensor(&[6, 5], 1.0);
        let nn = matmul(&a, &b).unwrap();
        // bᵀ has shape 5×6
        let mut bt = Tensor::zeros(&[5, 6]);
        for i in 0..6 {
            for j in 0..5 {
                bt.set(&[j, i], b.at(&[i, j]));
            }
        }
        let nt = matmul_nt(&a, &bt).unwrap();
        let mut at = Tensor::zeros(&[6, 4]);
        for i in 0..4 {
            for j in 0..6 {
                at.set(&[j, i], a.at(&[i, j]));
            }
        }
        let tn = matmul_tn(&at, &b).unwrap();
        for (x, y) in nn.data().iter().zip(nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nn.data().iter().zip(tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_associativity_random_triples() {
        let mut rng = crate::rng::SeededRng::new(11);
        for _ in 0..20 {
            let a = rng.normal_tensor(&[3, 4], 1.0);
            let b = rng.normal_tensor(&[4, 5], 1.0);
            let c = rng.normal_tensor(&[5, 2], 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let denom = left.norm().max(1e-12);
            let diff = left.sub(&right).unwrap().norm();
            assert!(diff / denom <= 1e-9, "relative error {}", diff / denom);
        }
    }

    #[test]
    fn conv2d_channel_sum_with_ones_1x1() {
        let mut rng = crate::rng::SeededRng::new(3);
        let x = rng.normal_tensor(&[3, 4, 4], 1.0);
        let k = Tensor::filled(&[1, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let sum: f64 = (0..3).map(|c| x.at(&[c, i, j])).sum();
                assert!((y.at(&[0, i, j]) - sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_zero_kernels() {
        let x = Tensor::filled(&[2, 5, 5], 1.5);
        let k = Tensor::zeros(&[4, 2, 3, 3]);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[4, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_ones_kernel_constant_input() {
        // 3×3 ones kernel over constant-1 5×5 input, no padding → constant 9
        let x = Tensor::filled(&[1, 5, 5], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = crate::rng::SeededRng::new(5);
        let x = rng.normal_tensor(&[2, 6, 5], 1.0);
        let k = rng.normal_tensor(&[3, 2, 3, 2], 1.0);
        let (stride, pad) = (2, 1);
        let y = conv2d(&x, &k, stride, pad).unwrap();
        let out_h = conv_out_extent(6, 3, stride, pad).unwrap();
        let out_w = conv_out_extent(5, 2, stride, pad).unwrap();
        assert_eq!(y.shape(), &[3, out_h, out_w]);
        for co in 0..3 {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..2 {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih >= 0 && ih < 6 && iw >= 0 && iw < 5 {
                                    acc += x.at(&[ci, ih as usize, iw as usize])
                                        * k.at(&[co, ci, ki, kj]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[co, oh, ow]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_kernel_too_large_errors() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn spectral_norm_sq_identity_zero_diag() {
        assert!((spectral_norm_sq(&Tensor::identity(3)).unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(spectral_norm_sq(&Tensor::zeros(&[3, 3])).unwrap(), 0.0);
        let x = t2(&[&[3.0, 0.0], &[0.0, 4.0]]);
        // λ_max(XᵀX) for diag(3,4) is 16, from a dense 2×2 eigendecomposition
        assert!((spectral_norm_sq(&x).unwrap() - 16.0).abs() < 1e-7);
    }

    #[test]
    fn spectral_norm_sq_matches_2x2_closed_form() {
        let mut rng = crate::rng::SeededRng::new(9);
        for _ in 0..20 {
            let x = rng.normal_tensor(&[5, 2], 1.0);
            // dense eigenvalues of the 2×2 Gram matrix
            let g = matmul_tn(&x, &x).unwrap();
            let (a, b, c) = (g.at(&[0, 0]), g.at(&[0, 1]), g.at(&[1, 1]));
            let tr = a + c;
            let det = a * c - b * b;
            let lmax = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
            let got = spectral_norm_sq(&x).unwrap();
            assert!((got - lmax).abs() <= 1e-6 * lmax.max(1.0));
        }
    }

    #[test]
    fn zero_extent_tensors_are_legal() {
        let t = Tensor::zeros(&[0, 3, 3]);
        assert_eq!(t.len(), 0);
        let k = Tensor::zeros(&[0, 2, 3, 3]);
        let x = Tensor::zeros(&[2, 5, 5]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[0, 3, 3]);
    }

    #[test]
    fn from_data_rejects_non_finite() {
        assert!(matches!(
            Tensor::from_data(&[2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }
}
