//! Patch tiling and patch-level label synthesis.

use crate::data::grid::{BinaryMask, Grid};
use crate::error::{Error, Result};

/// Exact tiling of an `image_h × image_w` image into `patch_h × patch_w` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

/// One cell of the tiling; `rows` and `cols` are half-open pixel ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRegion {
    pub index: usize,
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
}

impl PatchGeometry {
    pub fn new(image_h: usize, image_w: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 {
            return Err(Error::Divisibility(format!("patch size {patch_h}x{patch_w} must be positive")));
        }
        let bad_h = image_h % patch_h != 0 || image_h == 0;
        let bad_w = image_w % patch_w != 0 || image_w == 0;
        if bad_h || bad_w {
            return Err(Error::Divisibility(format!(
                "image {image_h}x{image_w} is not tiled by patch {patch_h}x{patch_w}: \
                 height {image_h} mod {patch_h} = {}, width {image_w} mod {patch_w} = {}",
                image_h % patch_h,
                image_w % patch_w
            )));
        }
        Ok(Self { image_h, image_w, patch_h, patch_w })
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_h
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_w
    }

    /// Number of patches `K`.
    pub fn count(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Cells in row-major order.
    pub fn regions(&self) -> impl Iterator<Item = PatchRegion> + '_ {
        (0..self.count()).map(move |k| {
            let (gr, gc) = (k / self.grid_w(), k % self.grid_w());
            PatchRegion {
                index: k,
                rows: gr * self.patch_h..(gr + 1) * self.patch_h,
                cols: gc * self.patch_w..(gc + 1) * self.patch_w,
            }
        })
    }
}

/// Splits an `image_h × image_w` frame into non-overlapping patches, row-major.
pub fn crop_into_patch_grid(
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
) -> Result<Vec<PatchRegion>> {
    let geom = PatchGeometry::new(image_h, image_w, patch_h, patch_w)?;
    Ok(geom.regions().collect())
}

/// Binary per-patch labels and their block-constant pixel expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLabelGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid: BinaryMask,
    pub expanded: BinaryMask,
}

impl PatchLabelGrid {
    /// Builds labels from a per-patch grid, expanding it to pixels.
    pub fn from_grid(grid: BinaryMask, patch_h: usize, patch_w: usize) -> Result<Self> {
        check_binary(&grid)?;
        let expanded = Grid::from_fn(grid.height() * patch_h, grid.width() * patch_w, |r, c| {
            grid.get(r / patch_h, c / patch_w)
        });
        Ok(Self { patch_h, patch_w, grid, expanded })
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            image_h: self.expanded.height(),
            image_w: self.expanded.width(),
            patch_h: self.patch_h,
            patch_w: self.patch_w,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            grid: self.grid.flip_horizontal(),
            expanded: self.expanded.flip_horizontal(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        Self {
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            grid: self.grid.flip_vertical(),
            expanded: self.expanded.flip_vertical(),
        }
    }
}

pub(crate) fn check_binary(mask: &BinaryMask) -> Result<()> {
    match mask.data().iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::InvalidValue(format!("mask value {v} is not binary"))),
        None => Ok(()),
    }
}

/// A patch is changed iff any of its pixels is changed.
pub fn generate_patch_labels(mask: &BinaryMask, patch_h: usize, patch_w: usize) -> Result<PatchLabelGrid> {
    check_binary(mask)?;
    let geom = PatchGeometry::new(mask.height(), mask.width(), patch_h, patch_w)?;
    let mut grid = Grid::filled(geom.grid_h(), geom.grid_w(), 0u8);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) == 1 {
                grid.set(r / patch_h, c / patch_w, 1);
            }
        }
    }
    PatchLabelGrid::from_grid(grid, patch_h, patch_w)
}

/// Per-patch maximum of a `[0, 1]` map, one value per annotation patch.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalScaleMap(pub Grid<f64>);

impl LocalScaleMap {
    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }
}

impl From<&BinaryMask> for LocalScaleMap {
    fn from(mask: &BinaryMask) -> Self {
        LocalScaleMap(mask.map(f64::from))
    }
}

pub fn downsample_local(map: &Grid<f64>, patch_h: usize, patch_w: usize) -> Result<LocalScaleMap> {
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("map value {v} outside [0, 1]")));
    }
    let geom = PatchGeometry::new(map.height(), map.width(), patch_h, patch_w)?;
    let mut out = Grid::filled(geom.grid_h(), geom.grid_w(), 0.0f64);
    for r in 0..map.height() {
        for c in 0..map.width() {
            let (gr, gc) = (r / patch_h, c / patch_w);
            if map.get(r, c) > out.get(gr, gc) {
                out.set(gr, gc, map.get(r, c));
            }
        }
    }
    Ok(LocalScaleMap(out))
}
