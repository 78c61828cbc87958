use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// For every element of the split layout, its flat index in the unsplit tensor.
fn split_indices(shape: &[usize], factor: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let [n, c, h, w] = *shape else {
        return Err(Error::dim(
            "patch_split",
            format!("expected an N×C×H×W tensor, got shape {shape:?}"),
        ));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(
            "patch_split",
            format!("{h}×{w} is not divisible into {factor}×{factor} patches"),
        ));
    }
    let (ph, pw) = (h / factor, w / factor);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for py in 0..factor {
            for px in 0..factor {
                for ch in 0..c {
                    for y in 0..ph {
                        let row = ((s * c + ch) * h + py * ph + y) * w + px * pw;
                        idx.extend(row..row + pw);
                    }
                }
            }
        }
    }
    Ok((idx, vec![n * factor * factor, c, ph, pw]))
}

fn merge_indices(shape: &[usize], factor: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let [b, c, ph, pw] = *shape else {
        return Err(Error::dim(
            "patch_merge",
            format!("expected an N×C×H×W tensor, got shape {shape:?}"),
        ));
    };
    let per_image = factor * factor;
    if factor == 0 || b % per_image != 0 {
        return Err(Error::dim(
            "patch_merge",
            format!("batch {b} is not a multiple of {per_image} patches"),
        ));
    }
    let full = [b / per_image, c, ph * factor, pw * factor];
    let (split, _) = split_indices(&full, factor)?;
    let mut inverse = vec![0; split.len()];
    for (i, &src) in split.iter().enumerate() {
        inverse[src] = i;
    }
    Ok((inverse, full.to_vec()))
}

/// Cuts each image into `factor × factor` non-overlapping patches stacked along the batch
/// axis; patch `(py, px)` of image `n` lands at batch index `n·factor² + py·factor + px`.
pub fn patch_split<'t, T: Scalar>(x: Var<'t, T>, factor: usize) -> Result<Var<'t, T>> {
    let (idx, shape) = split_indices(&x.shape(), factor)?;
    x.take(Rc::new(idx), shape)
}

/// Exact inverse of [`patch_split`].
pub fn patch_merge<'t, T: Scalar>(patches: Var<'t, T>, factor: usize) -> Result<Var<'t, T>> {
    let (idx, shape) = merge_indices(&patches.shape(), factor)?;
    patches.take(Rc::new(idx), shape)
}

pub fn split_tensor<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (idx, shape) = split_indices(x.shape(), factor)?;
    Ok(Tensor::from_parts(
        shape,
        idx.iter().map(|&i| x.data()[i]).collect(),
    ))
}

pub fn merge_tensor<T: Scalar>(patches: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (idx, shape) = merge_indices(patches.shape(), factor)?;
    Ok(Tensor::from_parts(
        shape,
        idx.iter().map(|&i| patches.data()[i]).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 4], |i| i as f32);
        assert_eq!(split_tensor(&x, 1).unwrap(), x);
    }

    #[test]
    fn ramp_splits_row_major() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |i| i as f32);
        let p = split_tensor(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 1, 2, 2]);
        assert_eq!(
            p.data(),
            &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
        assert_eq!(merge_tensor(&p, 2).unwrap(), x);
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 6, 8]);
        assert!(matches!(split_tensor(&x, 4), Err(Error::Dimension { .. })));
        assert!(matches!(
            merge_tensor(&Tensor::<f32>::zeros([3, 1, 2, 2]), 2),
            Err(Error::Dimension { .. })
        ));
    }
}
