//! Space-to-depth over each tile's token grid: every r×r neighborhood becomes one
//! token with r²·c channels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Source row for each (output token, channel block) pair, flattened. Output tokens
/// run tile by tile, row-major over the reduced grid; channel blocks run row-major
/// over the neighborhood.
pub fn shuffle_indices(tiles: usize, side: usize, r: usize) -> Result<Vec<usize>> {
    if r == 0 || side % r != 0 {
        return Err(Error::Config(format!(
            "token grid side {side} not divisible by shuffle factor {r}"
        )));
    }
    let reduced = side / r;
    let mut idx = Vec::with_capacity(tiles * side * side);
    for t in 0..tiles {
        let base = t * side * side;
        for big_r in 0..reduced {
            for big_c in 0..reduced {
                for dy in 0..r {
                    for dx in 0..r {
                        idx.push(base + (big_r * r + dy) * side + big_c * r + dx);
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn check_rows<F: Real>(x: &Tensor<F>, tiles: usize, side: usize) -> Result<()> {
    if x.shape().len() != 2 || x.rows() != tiles * side * side {
        return Err(Error::Dimension(format!(
            "expected {} tokens of {tiles} tiles with side {side}, got shape {:?}",
            tiles * side * side,
            x.shape()
        )));
    }
    Ok(())
}

pub fn pixel_shuffle<F: Real>(x: &Tensor<F>, tiles: usize, side: usize, r: usize) -> Result<Tensor<F>> {
    check_rows(x, tiles, side)?;
    let idx = shuffle_indices(tiles, side, r)?;
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for &i in &idx {
        out.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![x.rows() / (r * r), c * r * r], out)
}

pub fn pixel_unshuffle<F: Real>(y: &Tensor<F>, tiles: usize, side: usize, r: usize) -> Result<Tensor<F>> {
    let idx = shuffle_indices(tiles, side, r)?;
    if y.shape().len() != 2 || y.numel() != idx.len() * (y.cols() / (r * r)) || y.cols() % (r * r) != 0 {
        return Err(Error::Dimension(format!("cannot unshuffle shape {:?}", y.shape())));
    }
    let c = y.cols() / (r * r);
    let mut out = vec![F::zero(); y.numel()];
    for (k, &src) in idx.iter().enumerate() {
        out[src * c..(src + 1) * c].copy_from_slice(&y.data()[k * c..(k + 1) * c]);
    }
    Tensor::new(vec![idx.len(), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quarter_tokens_four_times_channels() {
        let x = Tensor::<f32>::zeros(&[2 * 32 * 32, 3]);
        let y = pixel_shuffle(&x, 2, 32, 2).unwrap();
        assert_eq!(y.shape(), &[512, 12]);
    }

    #[test]
    fn neighborhood_layout() {
        // 1 tile, 4x4 grid, one channel holding the source index
        let x = Tensor::<f64>::new(vec![16, 1], (0..16).map(|i| i as f64).collect()).unwrap();
        let y = pixel_shuffle(&x, 1, 4, 2).unwrap();
        assert_eq!(y.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(y.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(y.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn indivisible_grid_is_config_error() {
        let x = Tensor::<f32>::zeros(&[9, 2]);
        assert!(matches!(pixel_shuffle(&x, 1, 3, 2), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn bijective_and_invertible(tiles in 1usize..4, half in 1usize..4, c in 1usize..5, seed in any::<u32>()) {
            let side = half * 2;
            let n = tiles * side * side;
            let data: Vec<f64> = (0..n * c).map(|i| ((i as u64 * 2654435761 + seed as u64) % 1000) as f64).collect();
            let x = Tensor::new(vec![n, c], data.clone()).unwrap();
            let y = pixel_shuffle(&x, tiles, side, 2).unwrap();
            let mut a = data.clone();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(pixel_unshuffle(&y, tiles, side, 2).unwrap(), x);
        }
    }
}
