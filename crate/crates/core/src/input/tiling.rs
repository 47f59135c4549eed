//! Dynamic tiling of an image into square tiles plus a thumbnail, and patch extraction.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::input::image::RawImage;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileSet {
    pub tiles: Vec<RawImage>,
    pub thumbnail: RawImage,
    /// (rows, cols)
    pub grid: (usize, usize),
}

impl TileSet {
    pub fn tile_size(&self) -> usize {
        self.thumbnail.width()
    }

    /// Tiles in processing order: the grid row-major, then the thumbnail.
    pub fn all(&self) -> impl Iterator<Item = &RawImage> {
        self.tiles.iter().chain(std::iter::once(&self.thumbnail))
    }
}

/// Grid whose cols:rows ratio is closest to width:height. Ties go to fewer tiles,
/// then fewer rows. Comparison is exact integer arithmetic.
pub fn select_grid(width: usize, height: usize, max_tiles: usize) -> Result<(usize, usize)> {
    if width == 0 || height == 0 {
        return Err(Error::Input(format!("degenerate image {width}x{height}")));
    }
    if max_tiles == 0 {
        return Err(Error::Config("max_tiles must be at least 1".into()));
    }
    let (w, h) = (width as u128, height as u128);
    // |w/h - c/r| = |w·r - c·h| / (h·r); compare across grids by cross-multiplying r
    let key = |r: usize, c: usize| -> u128 { (w * r as u128).abs_diff(c as u128 * h) };
    let mut best = (1usize, 1usize);
    for r in 1..=max_tiles {
        for c in 1..=max_tiles / r {
            let (br, bc) = best;
            let lhs = key(r, c) * br as u128;
            let rhs = key(br, bc) * r as u128;
            let better = match lhs.cmp(&rhs) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => (r * c, r) < (br * bc, br),
            };
            if better {
                best = (r, c);
            }
        }
    }
    Ok(best)
}

pub fn dyn_process(img: &RawImage, tile_size: usize, max_tiles: usize) -> Result<TileSet> {
    if tile_size == 0 {
        return Err(Error::Config("tile_size must be positive".into()));
    }
    let (rows, cols) = select_grid(img.width(), img.height(), max_tiles)?;
    let resized = img.resize(cols * tile_size, rows * tile_size)?;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            tiles.push(resized.crop(c * tile_size, r * tile_size, tile_size)?);
        }
    }
    let thumbnail = img.resize(tile_size, tile_size)?;
    Ok(TileSet {
        tiles,
        thumbnail,
        grid: (rows, cols),
    })
}

/// Flattened non-overlapping patches of every tile, in processing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePatches {
    /// Tiles including the thumbnail.
    pub tile_count: usize,
    /// Patch tokens per side of one tile.
    pub grid_side: usize,
    pub stride: usize,
    /// `tokens() × patch_dim()` bytes; each patch is (row, col, channel) ordered.
    pub pixels: Vec<u8>,
}

impl ImagePatches {
    pub fn tokens(&self) -> usize {
        self.tile_count * self.grid_side * self.grid_side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.stride * self.stride
    }

    pub fn patch(&self, i: usize) -> &[u8] {
        let d = self.patch_dim();
        &self.pixels[i * d..(i + 1) * d]
    }
}

pub fn patchify(ts: &TileSet, stride: usize) -> Result<ImagePatches> {
    let size = ts.tile_size();
    if stride == 0 || size % stride != 0 {
        return Err(Error::Config(format!(
            "tile size {size} not divisible by patch stride {stride}"
        )));
    }
    let side = size / stride;
    let tile_count = ts.tiles.len() + 1;
    let mut pixels = Vec::with_capacity(tile_count * size * size * 3);
    for tile in ts.all() {
        let data = tile.data();
        for pr in 0..side {
            for pc in 0..side {
                for y in pr * stride..(pr + 1) * stride {
                    let start = (y * size + pc * stride) * 3;
                    pixels.extend_from_slice(&data[start..start + stride * 3]);
                }
            }
        }
    }
    Ok(ImagePatches {
        tile_count,
        grid_side: side,
        stride,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference grid choice by floating-point search over every candidate.
    fn brute_force(w: usize, h: usize, max_tiles: usize) -> (usize, usize) {
        let target = w as f64 / h as f64;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for r in 1..=max_tiles {
            for c in 1..=max_tiles {
                if r * c <= max_tiles {
                    cands.push(((target - c as f64 / r as f64).abs(), r, c));
                }
            }
        }
        // distances within rounding noise count as ties
        cands.sort_by(|a, b| {
            let d = if (a.0 - b.0).abs() < 1e-9 {
                Ordering::Equal
            } else {
                a.0.partial_cmp(&b.0).unwrap()
            };
            d.then((a.1 * a.2).cmp(&(b.1 * b.2))).then(a.1.cmp(&b.1))
        });
        (cands[0].1, cands[0].2)
    }

    #[test]
    fn square_image_single_tile() {
        let img = RawImage::filled(50, 50, [1, 2, 3]).unwrap();
        let ts = dyn_process(&img, 32, 1).unwrap();
        assert_eq!(ts.grid, (1, 1));
        assert_eq!(ts.tiles.len(), 1);
        assert_eq!(ts.thumbnail.width(), 32);
    }

    #[test]
    fn landscape_two_to_one() {
        assert_eq!(brute_force(200, 100, 6), (1, 2));
        let img = RawImage::filled(200, 100, [0, 0, 0]).unwrap();
        let ts = dyn_process(&img, 32, 6).unwrap();
        assert_eq!(ts.grid, (1, 2));
        assert_eq!(ts.tiles.len(), 2);
    }

    #[test]
    fn ties_prefer_fewer_tiles() {
        // square image: (1,1), (2,2) are both exact; (1,1) wins
        assert_eq!(select_grid(64, 64, 4).unwrap(), (1, 1));
    }

    #[test]
    fn desk_tiles_yield_sixteen_patches() {
        let img = RawImage::filled(32, 32, [9, 9, 9]).unwrap();
        let ts = dyn_process(&img, 32, 1).unwrap();
        let p = patchify(&ts, 8).unwrap();
        assert_eq!(p.grid_side * p.grid_side, 16);
        assert_eq!(p.tokens(), 32);
        assert_eq!(p.patch_dim(), 192);
    }

    #[test]
    fn patch_layout_row_major() {
        let mut img = RawImage::filled(4, 4, [0, 0, 0]).unwrap();
        img.set_pixel(2, 0, [7, 8, 9]);
        let ts = dyn_process(&img, 4, 1).unwrap();
        let p = patchify(&ts, 2).unwrap();
        // pixel (x=2, y=0) is the first pixel of patch (row 0, col 1)
        assert_eq!(&p.patch(1)[..3], &[7, 8, 9]);
        assert!(patchify(&ts, 3).is_err());
    }

    #[test]
    fn degenerate_image_is_input_error() {
        assert!(matches!(select_grid(0, 5, 4), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn grid_matches_brute_force(w in 1usize..400, h in 1usize..400, m in 1usize..13) {
            prop_assert_eq!(select_grid(w, h, m).unwrap(), brute_force(w, h, m));
        }

        #[test]
        fn every_tile_is_full_size(w in 1usize..90, h in 1usize..90, m in 1usize..7) {
            let img = RawImage::filled(w, h, [5, 6, 7]).unwrap();
            let ts = dyn_process(&img, 16, m).unwrap();
            prop_assert_eq!(ts.tiles.len(), ts.grid.0 * ts.grid.1);
            prop_assert!(ts.tiles.len() <= m);
            for t in ts.all() {
                prop_assert_eq!(t.data().len(), 16 * 16 * 3);
            }
            let again = dyn_process(&img, 16, m).unwrap();
            prop_assert_eq!(ts, again);
        }
    }
}
