//! Bird's-eye-view rasterization of point clouds.
//!
//! Each grid cell on the ground plane keeps the colour and
//! height-above-ground of the highest point falling into it, together with
//! that point's index so that per-pixel results can be mapped back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scene::PointCloud;

/// r, g, b, height above ground.
pub const BEV_CHANNELS: usize = 4;
pub const DEFAULT_CELL_SIZE: f64 = 0.03;
pub const DEFAULT_MAX_DIM: usize = 4096;
pub const DEFAULT_CEILING_FRACTION: f64 = 0.9;
/// Spatial alignment required by the 2D network (four 2× poolings).
pub const NET_ALIGNMENT: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BirdsEyeView {
    pub height: usize,
    pub width: usize,
    /// `H × W × 4`, zero on invalid cells.
    pub channels: Vec<f64>,
    pub valid: Vec<bool>,
    pub index_map: Vec<Option<u32>>,
    /// Metres per pixel.
    pub cell_size: f64,
    /// World xy of the corner of pixel (0, 0); rows follow y, columns x.
    pub origin: [f64; 2],
    /// World z taken as the ground plane.
    pub ground: f64,
    pub gt_semantic: Option<Vec<u32>>,
    pub gt_instance: Option<Vec<u32>>,
}

impl BirdsEyeView {
    pub fn empty(cell_size: f64) -> Self {
        Self {
            height: 0,
            width: 0,
            channels: Vec::new(),
            valid: Vec::new(),
            index_map: Vec::new(),
            cell_size,
            origin: [0.0, 0.0],
            ground: 0.0,
            gt_semantic: None,
            gt_instance: None,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        i * self.width + j
    }

    pub fn pixel(&self, cell: usize) -> &[f64] {
        &self.channels[cell * BEV_CHANNELS..(cell + 1) * BEV_CHANNELS]
    }

    pub fn has_gt(&self) -> bool {
        self.gt_semantic.is_some() && self.gt_instance.is_some()
    }

    /// Network input `[1, H, W, 4]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width, BEV_CHANNELS], self.channels.clone()).expect("consistent view")
    }

    /// Map index entries through `original[i]`, e.g. back to a cloud from
    /// which points were removed before rasterizing.
    pub fn remap_indices(&mut self, original: &[usize]) {
        for e in self.index_map.iter_mut().flatten() {
            *e = original[*e as usize] as u32;
        }
    }

    /// Rebuild the view on a new `h × w` grid where `src(i, j)` names the
    /// source cell (or none, for padding).
    fn resample(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> Option<usize>) -> Self {
        let mut out = Self {
            height: h,
            width: w,
            channels: vec![0.0; h * w * BEV_CHANNELS],
            valid: vec![false; h * w],
            index_map: vec![None; h * w],
            gt_semantic: self.gt_semantic.as_ref().map(|_| vec![0; h * w]),
            gt_instance: self.gt_instance.as_ref().map(|_| vec![0; h * w]),
            ..self.clone()
        };
        for i in 0..h {
            for j in 0..w {
                let Some(s) = src(i, j) else { continue };
                let d = i * w + j;
                out.channels[d * BEV_CHANNELS..(d + 1) * BEV_CHANNELS].copy_from_slice(self.pixel(s));
                out.valid[d] = self.valid[s];
                out.index_map[d] = self.index_map[s];
                if let (Some(o), Some(g)) = (out.gt_semantic.as_mut(), self.gt_semantic.as_ref()) {
                    o[d] = g[s];
                }
                if let (Some(o), Some(g)) = (out.gt_instance.as_mut(), self.gt_instance.as_ref()) {
                    o[d] = g[s];
                }
            }
        }
        out
    }

    /// Crop or pad (with invalid cells, bottom/right) to exactly `h × w`.
    pub fn fit(&self, h: usize, w: usize) -> Self {
        self.resample(h, w, |i, j| (i < self.height && j < self.width).then(|| self.cell(i, j)))
    }

    /// Pad to the next multiple of `m` in both dimensions.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let up = |v: usize| v.div_ceil(m).max(1) * m;
        self.fit(up(self.height), up(self.width))
    }

    /// The `h × w` window whose top-left cell is `(top, left)`; the window
    /// must lie inside the grid.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        assert!(top + h <= self.height && left + w <= self.width, "crop window outside the grid");
        let width = self.width;
        let mut out = self.resample(h, w, |i, j| Some((top + i) * width + left + j));
        out.origin = [
            self.origin[0] + left as f64 * self.cell_size,
            self.origin[1] + top as f64 * self.cell_size,
        ];
        out
    }

    /// Quarter turn; the output is `W × H`.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        self.resample(w, h, |i, j| Some(j * w + (w - 1 - i)))
    }

    /// Mirror columns.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.resample(self.height, w, |i, j| Some(i * w + (w - 1 - j)))
    }

    /// Mirror rows.
    pub fn flip_vertical(&self) -> Self {
        let (h, w) = (self.height, self.width);
        self.resample(h, w, |i, j| Some((h - 1 - i) * w + j))
    }

    /// Nearest-neighbour rescale by `factor`; heights are multiplied by the
    /// same factor. Index entries may repeat when `factor > 1`.
    pub fn scale(&self, factor: f64) -> Self {
        if factor == 1.0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let nh = ((h as f64 * factor).round() as usize).max(1).min(if h == 0 { 0 } else { usize::MAX });
        let nw = ((w as f64 * factor).round() as usize).max(1).min(if w == 0 { 0 } else { usize::MAX });
        let mut out = self.resample(nh, nw, |i, j| {
            let si = ((i as f64 / factor).floor() as usize).min(h - 1);
            let sj = ((j as f64 / factor).floor() as usize).min(w - 1);
            Some(si * w + sj)
        });
        for px in out.channels.chunks_mut(BEV_CHANNELS) {
            px[3] *= factor;
        }
        out.cell_size = self.cell_size / factor;
        out
    }
}

/// Height of the ground plane: the 1st-percentile z.
pub fn ground_level(cloud: &PointCloud) -> Option<f64> {
    if cloud.is_empty() {
        return None;
    }
    let mut z: Vec<f64> = (0..cloud.len()).map(|i| cloud.xyz(i)[2]).collect();
    z.sort_by(f64::total_cmp);
    Some(z[((z.len() - 1) as f64 * 0.01).floor() as usize])
}

/// Indices of points at or below `ground + fraction × (max_z − ground)`.
pub fn below_ceiling_indices(cloud: &PointCloud, fraction: f64) -> Vec<usize> {
    let Some(ground) = ground_level(cloud) else {
        return Vec::new();
    };
    let top = (0..cloud.len()).map(|i| cloud.xyz(i)[2]).fold(f64::NEG_INFINITY, f64::max);
    let cut = ground + fraction * (top - ground);
    (0..cloud.len()).filter(|&i| cloud.xyz(i)[2] <= cut).collect()
}

pub fn remove_ceiling(cloud: &PointCloud, fraction: f64) -> PointCloud {
    cloud.select(&below_ceiling_indices(cloud, fraction))
}

/// Project `cloud` onto the ground grid keeping the highest point per cell
/// (lowest index on equal z).
pub fn rasterize(cloud: &PointCloud, cell_size: f64, max_dim: usize) -> Result<BirdsEyeView> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::InvalidArgument(format!("cell size must be positive, got {cell_size}")));
    }
    let Some(bounds) = cloud.bounds() else {
        return Ok(BirdsEyeView::empty(cell_size));
    };
    let ground = ground_level(cloud).expect("non-empty");
    let origin = [bounds.min[0], bounds.min[1]];
    let extent = bounds.extent();
    let w = (extent[0] / cell_size).floor() as usize + 1;
    let h = (extent[1] / cell_size).floor() as usize + 1;
    if h > max_dim || w > max_dim {
        return Err(Error::InvalidArgument(format!(
            "raster of {h}x{w} exceeds the maximum dimension {max_dim}"
        )));
    }
    let mut best: Vec<Option<usize>> = vec![None; h * w];
    for p in 0..cloud.len() {
        let [x, y, z] = cloud.xyz(p);
        let j = (((x - origin[0]) / cell_size).floor() as usize).min(w - 1);
        let i = (((y - origin[1]) / cell_size).floor() as usize).min(h - 1);
        let c = i * w + j;
        match best[c] {
            Some(q) if cloud.xyz(q)[2] >= z => {}
            _ => best[c] = Some(p),
        }
    }
    let mut view = BirdsEyeView {
        height: h,
        width: w,
        channels: vec![0.0; h * w * BEV_CHANNELS],
        valid: vec![false; h * w],
        index_map: vec![None; h * w],
        cell_size,
        origin,
        ground,
        gt_semantic: cloud.gt_semantic.as_ref().map(|_| vec![0; h * w]),
        gt_instance: cloud.gt_instance.as_ref().map(|_| vec![0; h * w]),
    };
    for (c, p) in best.iter().enumerate() {
        let Some(p) = *p else { continue };
        let [r, g, b] = cloud.rgb(p);
        let z = cloud.xyz(p)[2];
        view.channels[c * BEV_CHANNELS..(c + 1) * BEV_CHANNELS].copy_from_slice(&[r, g, b, (z - ground).max(0.0)]);
        view.valid[c] = true;
        view.index_map[c] = Some(p as u32);
        if let (Some(v), Some(s)) = (view.gt_semantic.as_mut(), cloud.gt_semantic.as_ref()) {
            v[c] = s[p];
        }
        if let (Some(v), Some(s)) = (view.gt_instance.as_mut(), cloud.gt_instance.as_ref()) {
            v[c] = s[p];
        }
    }
    Ok(view)
}

/// Per-point features recovered from a pixel map.
#[derive(Debug, Clone, PartialEq)]
pub struct UnprojectedFeatures {
    pub dim: usize,
    /// `N × dim`, zero for unseen points.
    pub values: Vec<f64>,
    pub seen: Vec<bool>,
}

impl UnprojectedFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Assign each valid cell's feature vector to the point it indexes.
/// `pixel_features` is `[H, W, D]` or `[1, H, W, D]`.
pub fn unproject(view: &BirdsEyeView, pixel_features: &Tensor, num_points: usize) -> Result<UnprojectedFeatures> {
    let s = pixel_features.shape();
    let (h, w, d) = match *s {
        [h, w, d] | [1, h, w, d] => (h, w, d),
        _ => return Err(Error::shape("unproject", format!("expected [H,W,D], got {s:?}"))),
    };
    if h != view.height || w != view.width {
        return Err(Error::shape(
            "unproject",
            format!("features {h}x{w} for a {}x{} view", view.height, view.width),
        ));
    }
    let mut out = UnprojectedFeatures {
        dim: d,
        values: vec![0.0; num_points * d],
        seen: vec![false; num_points],
    };
    for (c, idx) in view.index_map.iter().enumerate() {
        if !view.valid[c] {
            continue;
        }
        let Some(p) = *idx else { continue };
        let p = p as usize;
        if p >= num_points {
            return Err(Error::shape("unproject", format!("index {p} >= {num_points} points")));
        }
        out.values[p * d..(p + 1) * d].copy_from_slice(pixel_features.row(c));
        out.seen[p] = true;
    }
    Ok(out)
}

/// One draw of the training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    /// Kept window as fractions of the grid: (top, left, rows, columns).
    pub crop: [f64; 4],
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub scale: f64,
}

impl Augmentation {
    pub const FULL: [f64; 4] = [0.0, 0.0, 1.0, 1.0];

    pub const IDENTITY: Augmentation = Augmentation {
        crop: Self::FULL,
        quarter_turns: 0,
        flip_horizontal: false,
        flip_vertical: false,
        scale: 1.0,
    };

    /// Each crop side keeps a uniform fraction in `[crop_min, 1]` of its
    /// axis at a uniform offset; `crop_min = 1` disables cropping.
    pub fn sample<R: Rng>(rng: &mut R, scale_range: (f64, f64), crop_min: f64) -> Self {
        let mut side = || {
            if crop_min < 1.0 {
                let keep = rng.random_range(crop_min..=1.0);
                [rng.random_range(0.0..=1.0 - keep), keep]
            } else {
                [0.0, 1.0]
            }
        };
        let [top, rows] = side();
        let [left, cols] = side();
        Self {
            crop: [top, left, rows, cols],
            quarter_turns: rng.random_range(0..4),
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            scale: if scale_range.0 < scale_range.1 {
                rng.random_range(scale_range.0..=scale_range.1)
            } else {
                scale_range.0
            },
        }
    }

    pub fn apply(&self, view: &BirdsEyeView) -> BirdsEyeView {
        let mut v = if self.crop == Self::FULL {
            view.clone()
        } else {
            let [top, left, rows, cols] = self.crop;
            let (h, w) = (view.height as f64, view.width as f64);
            let nh = ((rows * h).round() as usize).clamp(1.min(view.height), view.height);
            let nw = ((cols * w).round() as usize).clamp(1.min(view.width), view.width);
            let t = ((top * h).round() as usize).min(view.height - nh);
            let l = ((left * w).round() as usize).min(view.width - nw);
            view.crop(t, l, nh, nw)
        };
        for _ in 0..self.quarter_turns % 4 {
            v = v.rot90();
        }
        if self.flip_horizontal {
            v = v.flip_horizontal();
        }
        if self.flip_vertical {
            v = v.flip_vertical();
        }
        v.scale(self.scale)
    }
}

/// Random rotation by multiples of 90°, flips, and scaling in [0.9, 1.1].
pub fn augment(view: &BirdsEyeView, seed: u64) -> BirdsEyeView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Augmentation::sample(&mut rng, (0.9, 1.1), 1.0).apply(view)
}
