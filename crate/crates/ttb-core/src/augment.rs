//! Folding 2-D images (with channels) into high-order tensors.
//!
//! Basic mode cuts the image into nested blocks: factor pairs
//! `(M_1, N_1), ..., (M_f, N_f)` with `prod M_i = height` and
//! `prod N_i = width`; factor 1 is the finest level, so mode-1 fibers are
//! the `M_1 x N_1` pixel blocks. Mode `i` has size `M_i * N_i`, indexed
//! `m_i + M_i * n_i`.
//!
//! Padded-overlap mode first replicates the image boundary, then folds
//! overlapping `(M_1+1) x (N_1+1)` blocks taken at vertical stride `M_1`
//! and horizontal stride `N_1` as the first mode; the block grid
//! `(prod_{i>=2} M_i) x (prod_{i>=2} N_i)` is folded as in basic mode.
//! The image is padded by one replicated pixel on the top/left and by
//! however much the declared grid requires on the bottom/right. The
//! inverse keeps each block's top-left `M_1 x N_1` sub-block, which tiles
//! the padded image, and drops the padding.
//!
//! Channels are never folded; they are appended as the last mode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuf;
use crate::tensor::{DenseTensor, MaskTensor, TensorError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("factor list must not be empty")]
    NoFactors,
    #[error("factors {axis} multiply to {got}, image side is {want}")]
    FactorMismatch { axis: &'static str, got: usize, want: usize },
    #[error("padded grid {side} covers {got} pixels, need at least {want}")]
    GridTooSmall { side: &'static str, got: usize, want: usize },
    #[error("plan is for {want_h}x{want_w}x{want_c}, image is {got_h}x{got_w}x{got_c}")]
    ImageMismatch {
        want_h: usize,
        want_w: usize,
        want_c: usize,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },
    #[error("tensor dims {got:?} do not match plan dims {want:?}")]
    TensorMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Basic,
    PaddedOverlap,
}

/// A folding plan for `height x width` images with `channels` bands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(M_i, N_i)` pairs, finest level first.
    pub factors: Vec<(usize, usize)>,
    pub mode: AugmentMode,
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.factors.is_empty() {
            return Err(AugmentError::NoFactors);
        }
        let pm: usize = self.factors.iter().map(|f| f.0).product();
        let pn: usize = self.factors.iter().map(|f| f.1).product();
        match self.mode {
            AugmentMode::Basic => {
                if pm != self.height {
                    return Err(AugmentError::FactorMismatch {
                        axis: "rows",
                        got: pm,
                        want: self.height,
                    });
                }
                if pn != self.width {
                    return Err(AugmentError::FactorMismatch {
                        axis: "cols",
                        got: pn,
                        want: self.width,
                    });
                }
            }
            AugmentMode::PaddedOverlap => {
                let (ph, pw) = self.padded_size();
                if ph < self.height + 2 {
                    return Err(AugmentError::GridTooSmall {
                        side: "rows",
                        got: ph,
                        want: self.height + 2,
                    });
                }
                if pw < self.width + 2 {
                    return Err(AugmentError::GridTooSmall {
                        side: "cols",
                        got: pw,
                        want: self.width + 2,
                    });
                }
            }
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let gm: usize = self.factors[1..].iter().map(|f| f.0).product();
        let gn: usize = self.factors[1..].iter().map(|f| f.1).product();
        (gm, gn)
    }

    /// Padded image size in padded-overlap mode.
    pub fn padded_size(&self) -> (usize, usize) {
        let (m1, n1) = self.factors[0];
        let (gm, gn) = self.grid();
        (gm * m1 + 1, gn * n1 + 1)
    }

    /// Mode sizes of the augmented tensor (channel mode last when > 1).
    pub fn tensor_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = match self.mode {
            AugmentMode::Basic => self.factors.iter().map(|&(m, n)| m * n).collect(),
            AugmentMode::PaddedOverlap => {
                let (m1, n1) = self.factors[0];
                let mut d = vec![(m1 + 1) * (n1 + 1)];
                d.extend(self.factors[1..].iter().map(|&(m, n)| m * n));
                d
            }
        };
        if self.channels > 1 {
            dims.push(self.channels);
        }
        dims
    }

    fn check_image(&self, img: &ImageBuf) -> Result<(), AugmentError> {
        if img.height != self.height || img.width != self.width || img.channels != self.channels {
            return Err(AugmentError::ImageMismatch {
                want_h: self.height,
                want_w: self.width,
                want_c: self.channels,
                got_h: img.height,
                got_w: img.width,
                got_c: img.channels,
            });
        }
        Ok(())
    }

    /// Pixel coordinates for one tensor multi-index (spatial modes only).
    /// In padded mode the coordinates refer to the padded image.
    fn pixel_of(&self, index: &[usize]) -> (usize, usize) {
        match self.mode {
            AugmentMode::Basic => {
                let mut row = 0;
                let mut col = 0;
                let mut row_stride = 1;
                let mut col_stride = 1;
                for (i, &(m, n)) in self.factors.iter().enumerate() {
                    let q = index[i];
                    row += (q % m) * row_stride;
                    col += (q / m) * col_stride;
                    row_stride *= m;
                    col_stride *= n;
                }
                (row, col)
            }
            AugmentMode::PaddedOverlap => {
                let (m1, n1) = self.factors[0];
                let q0 = index[0];
                let u = q0 % (m1 + 1);
                let v = q0 / (m1 + 1);
                let mut gm = 0;
                let mut gn = 0;
                let mut row_stride = 1;
                let mut col_stride = 1;
                for (i, &(m, n)) in self.factors[1..].iter().enumerate() {
                    let q = index[i + 1];
                    gm += (q % m) * row_stride;
                    gn += (q / m) * col_stride;
                    row_stride *= m;
                    col_stride *= n;
                }
                (gm * m1 + u, gn * n1 + v)
            }
        }
    }

    fn spatial_order(&self) -> usize {
        self.factors.len()
    }
}

fn padded_pixel(img: &ImageBuf, r: isize, c: isize, b: usize) -> f64 {
    let r = r.clamp(0, img.height as isize - 1) as usize;
    let c = c.clamp(0, img.width as isize - 1) as usize;
    img.get(r, c, b)
}

/// Fold an image into the plan's tensor (basic mode: a pure permutation).
pub fn augment_basic(img: &ImageBuf, plan: &AugmentPlan) -> Result<DenseTensor, AugmentError> {
    debug_assert_eq!(plan.mode, AugmentMode::Basic);
    plan.validate()?;
    plan.check_image(img)?;
    fold(plan, |r, c, b| img.get(r, c, b))
}

/// Fold an image with boundary replication and overlapping first-level
/// blocks.
pub fn augment_padded(img: &ImageBuf, plan: &AugmentPlan) -> Result<DenseTensor, AugmentError> {
    debug_assert_eq!(plan.mode, AugmentMode::PaddedOverlap);
    plan.validate()?;
    plan.check_image(img)?;
    // padded(r, c) = img(clamp(r - 1), clamp(c - 1))
    fold(plan, |r, c, b| padded_pixel(img, r as isize - 1, c as isize - 1, b))
}

/// Fold with either mode.
pub fn augment(img: &ImageBuf, plan: &AugmentPlan) -> Result<DenseTensor, AugmentError> {
    match plan.mode {
        AugmentMode::Basic => augment_basic(img, plan),
        AugmentMode::PaddedOverlap => augment_padded(img, plan),
    }
}

fn fold(
    plan: &AugmentPlan,
    read: impl Fn(usize, usize, usize) -> f64,
) -> Result<DenseTensor, AugmentError> {
    let dims = plan.tensor_dims();
    let mut t = DenseTensor::zeros(dims.clone())?;
    let spatial = plan.spatial_order();
    for flat in 0..t.len() {
        let idx = crate::tensor::multi_index(flat, &dims);
        let (r, c) = plan.pixel_of(&idx[..spatial]);
        let b = if plan.channels > 1 { idx[spatial] } else { 0 };
        t.data_mut()[flat] = read(r, c, b);
    }
    Ok(t)
}

/// Invert [`augment`]: exact for both modes.
pub fn deaugment(t: &DenseTensor, plan: &AugmentPlan) -> Result<ImageBuf, AugmentError> {
    plan.validate()?;
    let dims = plan.tensor_dims();
    if t.dims() != dims.as_slice() {
        return Err(AugmentError::TensorMismatch { got: t.dims().to_vec(), want: dims });
    }
    let mut img = ImageBuf::new(plan.height, plan.width, plan.channels);
    let spatial = plan.spatial_order();
    match plan.mode {
        AugmentMode::Basic => {
            for r in 0..plan.height {
                for c in 0..plan.width {
                    let idx_sp = basic_index_of_pixel(plan, r, c);
                    for b in 0..plan.channels {
                        let idx = with_channel(&idx_sp, b, plan.channels, spatial);
                        img.set(r, c, b, t.get(&idx));
                    }
                }
            }
        }
        AugmentMode::PaddedOverlap => {
            let (m1, n1) = plan.factors[0];
            for r in 0..plan.height {
                for c in 0..plan.width {
                    // original pixel sits at padded (r + 1, c + 1), always
                    // inside some block's top-left base region
                    let (pr, pc) = (r + 1, c + 1);
                    let (gm, u) = (pr / m1, pr % m1);
                    let (gn, v) = (pc / n1, pc % n1);
                    let mut idx_sp = vec![u + (m1 + 1) * v];
                    idx_sp.extend(grid_index(plan, gm, gn));
                    for b in 0..plan.channels {
                        let idx = with_channel(&idx_sp, b, plan.channels, spatial);
                        img.set(r, c, b, t.get(&idx));
                    }
                }
            }
        }
    }
    Ok(img)
}

fn with_channel(spatial: &[usize], b: usize, channels: usize, order: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(order + 1);
    idx.extend_from_slice(spatial);
    if channels > 1 {
        idx.push(b);
    }
    idx
}

fn basic_index_of_pixel(plan: &AugmentPlan, r: usize, c: usize) -> Vec<usize> {
    let mut row = r;
    let mut col = c;
    plan.factors
        .iter()
        .map(|&(m, n)| {
            let mi = row % m;
            let ni = col % n;
            row /= m;
            col /= n;
            mi + m * ni
        })
        .collect()
}

fn grid_index(plan: &AugmentPlan, mut gm: usize, mut gn: usize) -> Vec<usize> {
    plan.factors[1..]
        .iter()
        .map(|&(m, n)| {
            let mi = gm % m;
            let ni = gn % n;
            gm /= m;
            gn /= n;
            mi + m * ni
        })
        .collect()
}

/// Fold a 0/1 mask image with the same plan; replicated padding copies
/// observedness along with the pixel.
pub fn augment_mask(mask: &ImageBuf, plan: &AugmentPlan) -> Result<MaskTensor, AugmentError> {
    let t = augment(mask, plan)?;
    let bits = t.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    Ok(MaskTensor::new(t.dims().to_vec(), bits)?)
}
