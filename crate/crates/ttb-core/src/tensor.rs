//! Dense tensors, observation masks, and tensor-train cores.
//!
//! All dense storage is first-index-fastest: the flat offset of the
//! multi-index `(j_1, ..., j_D)` is `j_1 + J_1*(j_2 + J_2*(j_3 + ...))`.
//! Unfolding a tensor at a mode boundary is then a pure reshape of the
//! flat buffer, which keeps rank computations and refolds exact.

use ndarray::{s, Array2, Array3, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dims must be non-empty with every entry >= 1, got {0:?}")]
    BadDims(Vec<usize>),
    #[error("data length {got} does not match product of dims {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("unfold boundary {mode} out of range 1..={max}")]
    ModeOutOfRange { mode: usize, max: usize },
    #[error("core {core}: left rank {got} does not match interface rank {want}")]
    RankMismatch { core: usize, got: usize, want: usize },
    #[error("boundary ranks must be 1, got first={first}, last={last}")]
    BadBoundaryRanks { first: usize, last: usize },
    #[error("mask entries must be 0 or 1, found {0}")]
    BadMaskBit(u8),
    #[error("tensor train must have at least one core")]
    NoCores,
}

/// Order-D real tensor, first index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        validate_dims(&dims)?;
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(TensorError::LengthMismatch { got: data.len(), want });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        validate_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self { dims, data: vec![0.0; n] })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
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

    /// Flat offset of a multi-index (first index fastest).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (j, &d) in index.iter().zip(&self.dims) {
            debug_assert!(*j < d);
            off += j * stride;
            stride *= d;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn same_dims(&self, other: &DenseTensor) -> Result<(), TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::DimMismatch {
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        Ok(())
    }
}

/// Decode a flat offset back into a multi-index for the given dims.
pub fn multi_index(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(dims.len());
    for &d in dims {
        idx.push(flat % d);
        flat /= d;
    }
    idx
}

fn validate_dims(dims: &[usize]) -> Result<(), TensorError> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(TensorError::BadDims(dims.to_vec()));
    }
    Ok(())
}

/// 0/1 observation mask with the same layout as [`DenseTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    dims: Vec<usize>,
    bits: Vec<u8>,
}

impl MaskTensor {
    pub fn new(dims: Vec<usize>, bits: Vec<u8>) -> Result<Self, TensorError> {
        validate_dims(&dims)?;
        let want: usize = dims.iter().product();
        if bits.len() != want {
            return Err(TensorError::LengthMismatch { got: bits.len(), want });
        }
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(TensorError::BadMaskBit(b));
        }
        Ok(Self { dims, bits })
    }

    pub fn all_observed(dims: Vec<usize>) -> Result<Self, TensorError> {
        validate_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self { dims, bits: vec![1u8; n] })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of observed entries.
    pub fn observed_count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.observed_count() as f64 / self.bits.len() as f64
    }

    pub fn is_observed(&self, flat: usize) -> bool {
        self.bits[flat] == 1
    }
}

/// `||mask o (a - yhat)||_F`.
pub fn masked_residual_norm(
    a: &DenseTensor,
    yhat: &DenseTensor,
    mask: &MaskTensor,
) -> Result<f64, TensorError> {
    a.same_dims(yhat)?;
    if a.dims() != mask.dims() {
        return Err(TensorError::DimMismatch {
            left: a.dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    let mut acc = 0.0;
    for ((&x, &y), &b) in a.data().iter().zip(yhat.data()).zip(mask.bits()) {
        if b == 1 {
            let d = x - y;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Kronecker product; output is `(rows_a*rows_b) x (cols_a*cols_b)` with
/// `out[i_a*rows_b + i_b, j_a*cols_b + j_b] = a[i_a, j_a] * b[i_b, j_b]`.
pub fn kron(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::zeros((ra * rb, ca * cb));
    for ia in 0..ra {
        for ja in 0..ca {
            let v = a[[ia, ja]];
            if v == 0.0 {
                continue;
            }
            let mut block = out.slice_mut(s![ia * rb..(ia + 1) * rb, ja * cb..(ja + 1) * cb]);
            block.zip_mut_with(&b, |o, &x| *o += v * x);
        }
    }
    out
}

/// Unfold a tensor at boundary `mode` (1-based, `1..=D-1`) into a matrix of
/// shape `(prod(dims[..mode]), prod(dims[mode..]))`. Because storage is
/// first-index-fastest the matrix element `(r, c)` is `data[r + rows*c]`.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Array2<f64>, TensorError> {
    let d = t.order();
    if mode == 0 || mode >= d {
        return Err(TensorError::ModeOutOfRange { mode, max: d.saturating_sub(1) });
    }
    let rows: usize = t.dims()[..mode].iter().product();
    let cols: usize = t.dims()[mode..].iter().product();
    let mut m = Array2::zeros((rows, cols));
    for c in 0..cols {
        for r in 0..rows {
            m[[r, c]] = t.data()[r + rows * c];
        }
    }
    Ok(m)
}

/// Inverse of [`unfold`]: rebuild the tensor from its boundary unfolding.
pub fn refold(m: &Array2<f64>, dims: &[usize]) -> Result<DenseTensor, TensorError> {
    validate_dims(dims)?;
    let n: usize = dims.iter().product();
    let (rows, cols) = m.dim();
    if rows * cols != n {
        return Err(TensorError::LengthMismatch { got: rows * cols, want: n });
    }
    let mut data = vec![0.0; n];
    for c in 0..cols {
        for r in 0..rows {
            data[r + rows * c] = m[[r, c]];
        }
    }
    DenseTensor::new(dims.to_vec(), data)
}

/// Tensor-train cores: core `d` has shape `(L_d, L_{d+1}, J_d)` and its
/// frontal slice at mode index `j` is the `L_d x L_{d+1}` matrix multiplied
/// along the chain.
#[derive(Debug, Clone)]
pub struct TTCores {
    cores: Vec<Array3<f64>>,
}

impl TTCores {
    pub fn new(cores: Vec<Array3<f64>>) -> Result<Self, TensorError> {
        if cores.is_empty() {
            return Err(TensorError::NoCores);
        }
        let first = cores[0].dim().0;
        let last = cores[cores.len() - 1].dim().1;
        if first != 1 || last != 1 {
            return Err(TensorError::BadBoundaryRanks { first, last });
        }
        for d in 1..cores.len() {
            let want = cores[d - 1].dim().1;
            let got = cores[d].dim().0;
            if got != want {
                return Err(TensorError::RankMismatch { core: d, got, want });
            }
        }
        Ok(Self { cores })
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> &[Array3<f64>] {
        &self.cores
    }

    pub fn core(&self, d: usize) -> &Array3<f64> {
        &self.cores[d]
    }

    /// Mode sizes `J_1..J_D`.
    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dim().2).collect()
    }

    /// Interface ranks `L_1..L_{D+1}`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.dim().0).collect();
        r.push(1);
        r
    }

    /// Frontal slice of core `d` at mode index `j`.
    pub fn slice(&self, d: usize, j: usize) -> ArrayView2<'_, f64> {
        self.cores[d].slice(s![.., .., j])
    }

    /// Contract the chain into the dense tensor it represents.
    pub fn contract(&self) -> DenseTensor {
        tt_contract(self)
    }
}

/// Evaluate the full chain of frontal-slice matrix products.
///
/// Left-to-right sweep: after consuming core `d` the partial result is a
/// `(J_1*...*J_d) x L_{d+1}` matrix whose row order matches the
/// first-index-fastest flat layout, so each mode amounts to one matrix
/// product per slice index.
pub fn tt_contract(cores: &TTCores) -> DenseTensor {
    let dims = cores.dims();
    // acc: rows = flat prefix count, cols = current interface rank.
    let mut acc: Vec<f64> = vec![1.0];
    let mut acc_rows = 1usize;
    for core in cores.cores() {
        let (l, r, j_dim) = core.dim();
        let mut next = vec![0.0; acc_rows * j_dim * r];
        for j in 0..j_dim {
            let slice = core.slice(s![.., .., j]);
            // block of rows for this j: next[row + acc_rows*j, :] = acc[row, :] . slice
            for row in 0..acc_rows {
                let out_base = (row + acc_rows * j) * r;
                let in_base = row * l;
                for c in 0..r {
                    let mut v = 0.0;
                    for k in 0..l {
                        v += acc[in_base + k] * slice[[k, c]];
                    }
                    next[out_base + c] = v;
                }
            }
        }
        acc = next;
        acc_rows *= j_dim;
    }
    debug_assert_eq!(acc.len(), acc_rows);
    DenseTensor::new(dims, acc).expect("contract produced consistent shape")
}
