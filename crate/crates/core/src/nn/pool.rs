use super::Matrix;
use crate::error::{Error, Result};

/// Channel-wise max over consecutive groups of `group` rows. Returns the
/// pooled `(rows / group) x C` matrix and, per output entry, the source row.
/// Ties resolve to the lowest row.
pub fn max_pool_groups(x: &Matrix, group: usize) -> Result<(Matrix, Vec<usize>)> {
    if group == 0 || x.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if x.rows() % group != 0 {
        return Err(Error::shape(
            "max_pool_groups",
            format!("row count divisible by {group}"),
            x.rows(),
        ));
    }
    let c = x.cols();
    let groups = x.rows() / group;
    let mut out = Matrix::zeros(groups, c);
    let mut argmax = vec![0usize; groups * c];
    for g in 0..groups {
        let first = g * group;
        let dst = out.row_mut(g);
        dst.copy_from_slice(x.row(first));
        let idx = &mut argmax[g * c..(g + 1) * c];
        idx.fill(first);
        for r in first + 1..first + group {
            for (j, &v) in x.row(r).iter().enumerate() {
                if v > dst[j] {
                    dst[j] = v;
                    idx[j] = r;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_groups_backward(grad_out: &Matrix, argmax: &[usize], input_rows: usize) -> Matrix {
    let c = grad_out.cols();
    let mut gx = Matrix::zeros(input_rows, c);
    for (k, (&g, &src)) in grad_out.data().iter().zip(argmax).enumerate() {
        let j = k % c;
        gx.row_mut(src)[j] += g;
    }
    gx
}

/// Max over all rows of an `N x C` set.
pub fn maxpool_set(x: &Matrix) -> Result<(Vec<f64>, Vec<usize>)> {
    let (pooled, argmax) = max_pool_groups(x, x.rows())?;
    Ok((pooled.into_data(), argmax))
}

pub fn maxpool_set_backward(grad_out: &[f64], argmax: &[usize], input_rows: usize) -> Matrix {
    max_pool_groups_backward(&Matrix::row_vector(grad_out), argmax, input_rows)
}
