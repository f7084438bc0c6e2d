//! Contraction caches for the sweep.
//!
//! Entries of the mask are grouped into equivalence classes that share the
//! same index prefix (or suffix), and first- and second-moment chain
//! products of the expected core slices are stored once per class:
//!
//! * `mean` rows hold the running product of expected slices, one row per
//!   class (length `L` at the current interface);
//! * `second` rows hold the running product of expected Kronecker squares
//!   (length `L^2`, row-major over the index pair).
//!
//! A Kronecker-square step never materializes the `L^2 x L'^2` factor:
//! with `B` the current second-moment matrix, the extension by a slice
//! with mean `M` and variances `V` is `M^T B M` plus a diagonal correction
//! `sum_k B[k,k] V[k, .]`, which follows from the block-sparse structure
//! of the slice covariance (one nonzero per block).

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, Axis};

use crate::model::CorePosterior;
use crate::tensor::{DenseTensor, MaskTensor};

/// Flat list of mask entries with decoded per-mode coordinates.
pub(crate) struct EntrySet {
    pub order: usize,
    pub n: usize,
    coords: Vec<u32>,
    /// Data values per entry; empty for complement (missing-entry) sets.
    pub values: Vec<f64>,
}

impl EntrySet {
    pub fn observed(a: &DenseTensor, mask: &MaskTensor) -> Self {
        Self::build(mask, true, Some(a))
    }

    pub fn missing(mask: &MaskTensor) -> Self {
        Self::build(mask, false, None)
    }

    fn build(mask: &MaskTensor, keep_observed: bool, data: Option<&DenseTensor>) -> Self {
        let dims = mask.dims();
        let order = dims.len();
        let mut coords = Vec::new();
        let mut values = Vec::new();
        let mut idx = vec![0u32; order];
        for (flat, &bit) in mask.bits().iter().enumerate() {
            if (bit == 1) == keep_observed {
                coords.extend_from_slice(&idx);
                if let Some(t) = data {
                    values.push(t.data()[flat]);
                }
            }
            // odometer increment, first index fastest
            for (i, d) in dims.iter().enumerate() {
                idx[i] += 1;
                if (idx[i] as usize) < *d {
                    break;
                }
                idx[i] = 0;
            }
        }
        let n = coords.len() / order.max(1);
        Self { order, n, coords, values }
    }

    #[inline]
    pub fn coord(&self, entry: usize, mode: usize) -> usize {
        self.coords[entry * self.order + mode] as usize
    }
}

/// Chain values for the distinct index prefixes (or suffixes) present in
/// an entry set, at one interface.
#[derive(Debug, Clone)]
pub(crate) struct ChainTable {
    /// Class id of each entry.
    pub class_of: Vec<u32>,
    pub n_classes: usize,
    /// Interface rank of the stored chains.
    pub rank: usize,
    /// `n_classes x rank`.
    pub mean: Array2<f64>,
    /// `n_classes x rank^2`, row-major over the pair; `None` when second
    /// moments are not needed on this path.
    pub second: Option<Array2<f64>>,
}

impl ChainTable {
    /// The empty product: every entry in one class holding the scalar 1.
    pub fn trivial(n_entries: usize, with_second: bool) -> Self {
        Self {
            class_of: vec![0; n_entries],
            n_classes: 1,
            rank: 1,
            mean: Array2::ones((1, 1)),
            second: with_second.then(|| Array2::ones((1, 1))),
        }
    }

    /// Split classes by the coordinate at `mode`; returns the refined
    /// class assignment and, per new class, its (old class, j) parents.
    fn refine(&self, set: &EntrySet, mode: usize, j_dim: usize) -> (Vec<u32>, Vec<(u32, u32)>) {
        let mut remap = vec![u32::MAX; self.n_classes * j_dim];
        let mut parents = Vec::new();
        let mut class_of = vec![0u32; set.n];
        for e in 0..set.n {
            let j = set.coord(e, mode);
            let key = self.class_of[e] as usize * j_dim + j;
            let id = if remap[key] == u32::MAX {
                let id = parents.len() as u32;
                remap[key] = id;
                parents.push((self.class_of[e], j as u32));
                id
            } else {
                remap[key]
            };
            class_of[e] = id;
        }
        (class_of, parents)
    }

    /// Extend prefix chains (products running left to right) by the core
    /// at `mode`.
    pub fn advanced_prefix(&self, set: &EntrySet, mode: usize, core: &CorePosterior) -> ChainTable {
        let (l_in, l_out, j_dim) = core.shape();
        debug_assert_eq!(l_in, self.rank);
        let (class_of, parents) = self.refine(set, mode, j_dim);
        let n_new = parents.len();

        let mut mean = Array2::zeros((n_new, l_out));
        mean.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(parents.par_iter())
            .for_each(|(mut out, &(old, j))| {
                let m = core.mean_slice(j as usize);
                let prev = self.mean.row(old as usize);
                for b in 0..l_out {
                    let mut acc = 0.0;
                    for k in 0..l_in {
                        acc += prev[k] * m[[k, b]];
                    }
                    out[b] = acc;
                }
            });

        let second = self.second.as_ref().map(|sec| {
            let mut out = Array2::zeros((n_new, l_out * l_out));
            out.axis_iter_mut(Axis(0))
                .into_par_iter()
                .zip(parents.par_iter())
                .for_each(|(mut row, &(old, j))| {
                    let m = core.mean_slice(j as usize);
                    let v = core.var_slice(j as usize);
                    let bo = sec.row(old as usize);
                    kron_square_step_prefix(bo.as_slice().unwrap(), l_in, m, v, &mut row);
                });
            out
        });

        ChainTable { class_of, n_classes: n_new, rank: l_out, mean, second }
    }

    /// Extend suffix chains (products running right to left) by the core
    /// at `mode`.
    pub fn advanced_suffix(&self, set: &EntrySet, mode: usize, core: &CorePosterior) -> ChainTable {
        let (l_out, l_in, j_dim) = core.shape();
        debug_assert_eq!(l_in, self.rank);
        let (class_of, parents) = self.refine(set, mode, j_dim);
        let n_new = parents.len();

        let mut mean = Array2::zeros((n_new, l_out));
        mean.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(parents.par_iter())
            .for_each(|(mut out, &(old, j))| {
                let m = core.mean_slice(j as usize);
                let prev = self.mean.row(old as usize);
                for k in 0..l_out {
                    let mut acc = 0.0;
                    for b in 0..l_in {
                        acc += m[[k, b]] * prev[b];
                    }
                    out[k] = acc;
                }
            });

        let second = self.second.as_ref().map(|sec| {
            let mut out = Array2::zeros((n_new, l_out * l_out));
            out.axis_iter_mut(Axis(0))
                .into_par_iter()
                .zip(parents.par_iter())
                .for_each(|(mut row, &(old, j))| {
                    let m = core.mean_slice(j as usize);
                    let v = core.var_slice(j as usize);
                    let bo = sec.row(old as usize);
                    kron_square_step_suffix(bo.as_slice().unwrap(), l_in, m, v, &mut row);
                });
            out
        });

        ChainTable { class_of, n_classes: n_new, rank: l_out, mean, second }
    }

    /// For a table covering every mode the rank is 1; returns the scalar
    /// per entry.
    pub fn per_entry_scalars(&self, set: &EntrySet) -> (Vec<f64>, Option<Vec<f64>>) {
        debug_assert_eq!(self.rank, 1);
        let mean: Vec<f64> = (0..set.n)
            .map(|e| self.mean[[self.class_of[e] as usize, 0]])
            .collect();
        let second = self.second.as_ref().map(|sec| {
            (0..set.n)
                .map(|e| sec[[self.class_of[e] as usize, 0]])
                .collect()
        });
        (mean, second)
    }
}

/// `out = M^T B M` plus the diagonal variance correction, flattened
/// row-major. `bo` is `l_in x l_in` row-major.
fn kron_square_step_prefix(
    bo: &[f64],
    l_in: usize,
    m: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: &mut ndarray::ArrayViewMut1<f64>,
) {
    let l_out = m.ncols();
    // tmp = B M, l_in x l_out
    let mut tmp = vec![0.0; l_in * l_out];
    for k in 0..l_in {
        for kp in 0..l_in {
            let b = bo[k * l_in + kp];
            if b == 0.0 {
                continue;
            }
            for a in 0..l_out {
                tmp[k * l_out + a] += b * m[[kp, a]];
            }
        }
    }
    for a in 0..l_out {
        for b in 0..l_out {
            let mut acc = 0.0;
            for k in 0..l_in {
                acc += m[[k, a]] * tmp[k * l_out + b];
            }
            out[a * l_out + b] = acc;
        }
    }
    // diagonal correction from the slice variances
    for a in 0..l_out {
        let mut acc = 0.0;
        for k in 0..l_in {
            acc += bo[k * l_in + k] * v[[k, a]];
        }
        out[a * l_out + a] += acc;
    }
}

/// `out = M B M^T` plus the diagonal variance correction.
fn kron_square_step_suffix(
    bo: &[f64],
    l_in: usize,
    m: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: &mut ndarray::ArrayViewMut1<f64>,
) {
    let l_out = m.nrows();
    // tmp = M B, l_out x l_in
    let mut tmp = vec![0.0; l_out * l_in];
    for k in 0..l_out {
        for b in 0..l_in {
            let mut acc = 0.0;
            for l in 0..l_in {
                acc += m[[k, l]] * bo[l * l_in + b];
            }
            tmp[k * l_in + b] = acc;
        }
    }
    for k in 0..l_out {
        for kp in 0..l_out {
            let mut acc = 0.0;
            for b in 0..l_in {
                acc += tmp[k * l_in + b] * m[[kp, b]];
            }
            out[k * l_out + kp] = acc;
        }
    }
    for k in 0..l_out {
        let mut acc = 0.0;
        for l in 0..l_in {
            acc += v[[k, l]] * bo[l * l_in + l];
        }
        out[k * l_out + k] += acc;
    }
}

/// Chain of per-mode sums over every slice index, used on the
/// fully-observed fast path where the masked sums decouple into a product
/// of per-mode sums.
#[derive(Debug, Clone)]
pub(crate) struct SumChain {
    pub rank: usize,
    pub mean: Vec<f64>,
    pub second: Vec<f64>,
}

impl SumChain {
    pub fn trivial() -> Self {
        Self { rank: 1, mean: vec![1.0], second: vec![1.0] }
    }

    pub fn advanced_prefix(&self, core: &CorePosterior) -> SumChain {
        let (l_in, l_out, j_dim) = core.shape();
        debug_assert_eq!(l_in, self.rank);
        let mut mean = vec![0.0; l_out];
        let mut second = vec![0.0; l_out * l_out];
        let mut scratch = ndarray::Array1::zeros(l_out * l_out);
        for j in 0..j_dim {
            let m = core.mean_slice(j);
            for b in 0..l_out {
                let mut acc = 0.0;
                for k in 0..l_in {
                    acc += self.mean[k] * m[[k, b]];
                }
                mean[b] += acc;
            }
            let mut view = scratch.view_mut();
            kron_square_step_prefix(&self.second, l_in, m, core.var_slice(j), &mut view);
            for (o, &s) in second.iter_mut().zip(scratch.iter()) {
                *o += s;
            }
        }
        SumChain { rank: l_out, mean, second }
    }

    pub fn advanced_suffix(&self, core: &CorePosterior) -> SumChain {
        let (l_out, l_in, j_dim) = core.shape();
        debug_assert_eq!(l_in, self.rank);
        let mut mean = vec![0.0; l_out];
        let mut second = vec![0.0; l_out * l_out];
        let mut scratch = ndarray::Array1::zeros(l_out * l_out);
        for j in 0..j_dim {
            let m = core.mean_slice(j);
            for k in 0..l_out {
                let mut acc = 0.0;
                for b in 0..l_in {
                    acc += m[[k, b]] * self.mean[b];
                }
                mean[k] += acc;
            }
            let mut view = scratch.view_mut();
            kron_square_step_suffix(&self.second, l_in, m, core.var_slice(j), &mut view);
            for (o, &s) in second.iter_mut().zip(scratch.iter()) {
                *o += s;
            }
        }
        SumChain { rank: l_out, mean, second }
    }
}

/// Per-slice normal equations accumulated over an entry set: for each
/// mode index `j`, `h4` holds the second-moment Gram weights with layout
/// `[(k,k'), (l,l')]` (shape `La^2 x Lb^2`) and `r` the data-weighted
/// first-moment accumulation (shape `La x Lb`).
pub(crate) struct SliceSystems {
    pub h4: Vec<Array2<f64>>,
    pub r: Vec<Array2<f64>>,
}

pub(crate) fn accumulate_slice_systems(
    set: &EntrySet,
    mode: usize,
    j_dim: usize,
    prefix: &ChainTable,
    suffix: &ChainTable,
    with_r: bool,
) -> SliceSystems {
    let la = prefix.rank;
    let lb = suffix.rank;
    // bucket entries by the mode coordinate
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); j_dim];
    for e in 0..set.n {
        buckets[set.coord(e, mode)].push(e as u32);
    }
    let by_prefix = prefix.n_classes <= suffix.n_classes;
    let (group, other) = if by_prefix { (prefix, suffix) } else { (suffix, prefix) };

    let results: Vec<(Array2<f64>, Array2<f64>)> = buckets
        .par_iter()
        .map(|bucket| {
            let go2 = group.rank * group.rank;
            let oo2 = other.rank * other.rank;
            // local ids for the grouping side
            let mut local = vec![u32::MAX; group.n_classes];
            let mut members: Vec<u32> = Vec::new();
            for &e in bucket {
                let c = group.class_of[e as usize];
                if local[c as usize] == u32::MAX {
                    local[c as usize] = members.len() as u32;
                    members.push(c);
                }
            }
            let n_loc = members.len();
            let mut w_sec = Array2::<f64>::zeros((n_loc, oo2));
            let mut w_mean = Array2::<f64>::zeros(if with_r { (n_loc, other.rank) } else { (0, 0) });
            let other_sec = other.second.as_ref().expect("second moments required");
            for &e in bucket {
                let e = e as usize;
                let loc = local[group.class_of[e] as usize] as usize;
                let oc = other.class_of[e] as usize;
                {
                    let src = other_sec.row(oc);
                    let mut dst = w_sec.row_mut(loc);
                    dst += &src;
                }
                if with_r {
                    let v = set.values[e];
                    let src = other.mean.row(oc);
                    let mut dst = w_mean.row_mut(loc);
                    dst.zip_mut_with(&src, |d, &s| *d += v * s);
                }
            }
            // gather grouped-side rows
            let group_sec = group.second.as_ref().expect("second moments required");
            let mut g_sec = Array2::<f64>::zeros((n_loc, go2));
            let mut g_mean = Array2::<f64>::zeros(if with_r { (n_loc, group.rank) } else { (0, 0) });
            for (loc, &c) in members.iter().enumerate() {
                g_sec.row_mut(loc).assign(&group_sec.row(c as usize));
                if with_r {
                    g_mean.row_mut(loc).assign(&group.mean.row(c as usize));
                }
            }
            let (h4, r) = if by_prefix {
                (
                    g_sec.t().dot(&w_sec),
                    if with_r { g_mean.t().dot(&w_mean) } else { Array2::zeros((0, 0)) },
                )
            } else {
                (
                    w_sec.t().dot(&g_sec),
                    if with_r { w_mean.t().dot(&g_mean) } else { Array2::zeros((0, 0)) },
                )
            };
            debug_assert_eq!(h4.dim(), (la * la, lb * lb));
            (h4, r)
        })
        .collect();

    let mut h4 = Vec::with_capacity(j_dim);
    let mut r = Vec::with_capacity(j_dim);
    for (h, rr) in results {
        h4.push(h);
        r.push(rr);
    }
    SliceSystems { h4, r }
}

/// Data-weighted first-moment accumulation only (used on the fast path
/// where `h4` comes from the product of per-mode sums).
pub(crate) fn accumulate_rhs_only(
    set: &EntrySet,
    mode: usize,
    j_dim: usize,
    prefix: &ChainTable,
    suffix: &ChainTable,
) -> Vec<Array2<f64>> {
    let la = prefix.rank;
    let lb = suffix.rank;
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); j_dim];
    for e in 0..set.n {
        buckets[set.coord(e, mode)].push(e as u32);
    }
    buckets
        .par_iter()
        .map(|bucket| {
            let mut r = Array2::<f64>::zeros((la, lb));
            for &e in bucket {
                let e = e as usize;
                let v = set.values[e];
                let pm = prefix.mean.row(prefix.class_of[e] as usize);
                let sm = suffix.mean.row(suffix.class_of[e] as usize);
                for k in 0..la {
                    let vk = v * pm[k];
                    for l in 0..lb {
                        r[[k, l]] += vk * sm[l];
                    }
                }
            }
            r
        })
        .collect()
}
