//! Value-level convolution helpers and the sliced-matmul decomposition.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry, Padding};
use crate::scalar::Scalar;
use crate::tensor::{flatten_bhd, Tensor};

/// Stride-1 convolution description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn of_kernel(w: &Tensor<impl Scalar>, padding: Padding) -> Result<Self> {
        let s = w.shape();
        if s.len() != 4 {
            return shape_err("conv_spec", format!("kernel must be rank 4, got {:?}", s));
        }
        Ok(ConvSpec {
            kernel_h: s[0],
            kernel_w: s[1],
            in_channels: s[2],
            out_channels: s[3],
            padding,
        })
    }

    /// Output spatial dims for an `h x d` input, if the input admits this kernel.
    pub fn output_hw(&self, h: usize, d: usize) -> Option<(usize, usize)> {
        match self.padding {
            Padding::Same => Some((h, d)),
            Padding::Valid => (self.kernel_h <= h && self.kernel_w <= d)
                .then(|| (h - self.kernel_h + 1, d - self.kernel_w + 1)),
        }
    }
}

/// Cross-correlation without a tape.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    x.ensure_finite("conv2d")?;
    w.ensure_finite("conv2d")?;
    let Some(geom) = ConvGeometry::new(x.shape(), w.shape(), padding) else {
        return shape_err(
            "conv2d",
            format!("input {:?} with kernel {:?} ({:?} padding)", x.shape(), w.shape(), padding),
        );
    };
    let data = kernels::conv2d_forward(x.data(), w.data(), &geom);
    Tensor::new(geom.out_shape().to_vec(), data)
}

/// Valid convolution computed as
/// `sum_{i,j} X[:, i:H-Kh+1+i, j:D-Kw+1+j, :]^F * W[i, j]`.
///
/// Each slice is flattened to `[B*H'*D', IN]` and multiplied by the
/// `[IN, OUT]` tap matrix; the products are summed and reshaped back.
pub fn conv_as_matmul_sum<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    if padding != Padding::Valid {
        return Err(Error::Unsupported(
            "sliced-matmul convolution is defined for valid padding only".into(),
        ));
    }
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
        return shape_err("conv_as_matmul_sum", format!("input {:?} with kernel {:?}", sx, sw));
    }
    let (b, h, d, cin) = (sx[0], sx[1], sx[2], sx[3]);
    let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
    if kh > h || kw > d {
        return shape_err("conv_as_matmul_sum", format!("kernel {}x{} larger than map {}x{}", kh, kw, h, d));
    }
    let (oh, od) = (h - kh + 1, d - kw + 1);
    let rows = b * oh * od;
    let mut acc = vec![T::zero(); rows * cout];
    for i in 0..kh {
        for j in 0..kw {
            let slice = slice_hw(x, i..i + oh, j..j + od)?;
            let flat = flatten_bhd(&slice)?;
            let tap = &w.data()[(i * kw + j) * cin * cout..][..cin * cout];
            let prod = kernels::matmul(flat.data(), tap, rows, cin, cout);
            acc.iter_mut().zip(&prod).for_each(|(a, &p)| *a += p);
        }
    }
    Tensor::new(vec![b, oh, od, cout], acc)
}

/// `x[:, rows, cols, :]` for NHWC input.
pub fn slice_hw<T: Scalar>(
    x: &Tensor<T>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || rows.end > s[1] || cols.end > s[2] {
        return shape_err("slice_hw", format!("{:?}[{:?}, {:?}]", s, rows, cols));
    }
    let (b, h, d, c) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(b * rows.len() * cols.len() * c);
    for n in 0..b {
        for r in rows.clone() {
            let start = ((n * h + r) * d + cols.start) * c;
            data.extend_from_slice(&x.data()[start..start + cols.len() * c]);
        }
    }
    Tensor::new(vec![b, rows.len(), cols.len(), c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_same_padding() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 3, 1]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 1, 1]);
        assert!(matches!(
            conv_as_matmul_sum(&x, &w, Padding::Same),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn one_by_one_is_flat_matmul() {
        let x = Tensor::<f64>::from_fn(vec![2, 2, 3, 2], |i| i as f64 * 0.1 - 0.4);
        let w = Tensor::<f64>::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0]).unwrap();
        let y = conv_as_matmul_sum(&x, &w, Padding::Valid).unwrap();
        let flat = flatten_bhd(&x).unwrap();
        for r in 0..12 {
            for o in 0..3 {
                let expect = flat.at(&[r, 0]) * w.at(&[0, 0, 0, o]) + flat.at(&[r, 1]) * w.at(&[0, 0, 1, o]);
                assert!((y.data()[r * 3 + o] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_weight_gives_zero() {
        let x = Tensor::<f64>::from_fn(vec![1, 4, 4, 2], |i| i as f64);
        let w = Tensor::<f64>::zeros(vec![3, 2, 2, 3]);
        let y = conv_as_matmul_sum(&x, &w, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_dims() {
        let w = Tensor::<f64>::zeros(vec![3, 1, 2, 2]);
        let spec = ConvSpec::of_kernel(&w, Padding::Valid).unwrap();
        assert_eq!(spec.output_hw(5, 4), Some((3, 4)));
        assert_eq!(spec.output_hw(2, 4), None);
    }
}
