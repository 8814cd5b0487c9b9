//! Binary PPM (P6) images of views, label rasters and embedding maps.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::bev::{BirdsEyeView, BEV_CHANNELS};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn set(&mut self, cell: usize, c: [u8; 3]) {
        self.rgb[cell * 3..cell * 3 + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Colour channels of a view; invalid cells are black. Image row 0 is the
/// largest y so that the picture reads like a floor plan.
pub fn render_bev(view: &BirdsEyeView) -> Image {
    let mut img = Image::new(view.width, view.height);
    for c in (0..view.num_cells()).filter(|&c| view.valid[c]) {
        let p = view.pixel(c);
        img.set(flip_row(view, c), [to_byte(p[0]), to_byte(p[1]), to_byte(p[2])]);
    }
    img
}

/// Height channel as grey levels scaled by the maximum height.
pub fn render_height(view: &BirdsEyeView) -> Image {
    let mut img = Image::new(view.width, view.height);
    let top = (0..view.num_cells())
        .filter(|&c| view.valid[c])
        .map(|c| view.channels[c * BEV_CHANNELS + 3])
        .fold(0.0f64, f64::max);
    for c in (0..view.num_cells()).filter(|&c| view.valid[c]) {
        let v = if top > 0.0 { view.channels[c * BEV_CHANNELS + 3] / top } else { 0.0 };
        let b = to_byte(v);
        img.set(flip_row(view, c), [b, b, b]);
    }
    img
}

fn flip_row(view: &BirdsEyeView, cell: usize) -> usize {
    let (i, j) = (cell / view.width, cell % view.width);
    (view.height - 1 - i) * view.width + j
}

/// Distinct, deterministic colour for a label id.
pub fn label_color(id: u32) -> [u8; 3] {
    // Golden-ratio hue walk at full saturation.
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = if id.is_multiple_of(2) { 1.0 } else { 0.7 };
    [to_byte(r * v), to_byte(g * v), to_byte(b * v)]
}

/// A per-cell label raster coloured by id; invalid cells are black.
pub fn render_labels(view: &BirdsEyeView, labels: &[u32]) -> Image {
    let mut img = Image::new(view.width, view.height);
    for c in (0..view.num_cells()).filter(|&c| view.valid[c]) {
        img.set(flip_row(view, c), label_color(labels[c]));
    }
    img
}

/// Project per-cell `D`-dimensional features onto their first three
/// principal components (over valid cells) and map each component to a
/// colour channel by min–max scaling. Components without spread map to
/// mid-grey, so a constant map renders as one uniform colour.
pub fn render_pca(view: &BirdsEyeView, features: &Tensor) -> Result<Image> {
    let s = features.shape();
    let (h, w, d) = match *s {
        [h, w, d] | [1, h, w, d] => (h, w, d),
        _ => return Err(Error::shape("render_pca", format!("expected [H,W,D], got {s:?}"))),
    };
    if h < view.height || w < view.width {
        return Err(Error::shape(
            "render_pca",
            format!("features {h}x{w} smaller than the {}x{} view", view.height, view.width),
        ));
    }
    let cells: Vec<usize> = (0..view.num_cells()).filter(|&c| view.valid[c]).collect();
    let row = |c: usize| {
        let (i, j) = (c / view.width, c % view.width);
        features.row(i * w + j)
    };
    let mut img = Image::new(view.width, view.height);
    if cells.is_empty() {
        return Ok(img);
    }
    let n = cells.len() as f64;
    let mut mean = vec![0.0; d];
    for &c in &cells {
        for (m, v) in mean.iter_mut().zip(row(c)) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &c in &cells {
        let r = row(c);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut axes = Vec::new();
    for &k in order.iter().take(3) {
        if eig.eigenvalues[k] <= 1e-12 * scale.max(1.0) {
            axes.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let big = (0..d).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(Some(v));
    }
    while axes.len() < 3 {
        axes.push(None);
    }
    let proj: Vec<[Option<f64>; 3]> = cells
        .iter()
        .map(|&c| {
            let r = row(c);
            let mut out = [None; 3];
            for (o, a) in out.iter_mut().zip(&axes) {
                *o = a.as_ref().map(|a| a.iter().zip(r).zip(&mean).map(|((x, y), m)| x * (y - m)).sum());
            }
            out
        })
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &proj {
        for ch in 0..3 {
            if let Some(v) = p[ch] {
                lo[ch] = lo[ch].min(v);
                hi[ch] = hi[ch].max(v);
            }
        }
    }
    for (&c, p) in cells.iter().zip(&proj) {
        let mut px = [0u8; 3];
        for ch in 0..3 {
            px[ch] = match p[ch] {
                Some(v) if hi[ch] > lo[ch] => to_byte((v - lo[ch]) / (hi[ch] - lo[ch])),
                _ => 128,
            };
        }
        img.set(flip_row(view, c), px);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(h: usize, w: usize) -> BirdsEyeView {
        let mut v = BirdsEyeView::empty(0.1);
        v.height = h;
        v.width = w;
        v.channels = vec![0.5; h * w * BEV_CHANNELS];
        v.valid = vec![true; h * w];
        v.index_map = (0..h * w).map(|c| Some(c as u32)).collect();
        v
    }

    #[test]
    fn ppm_header_and_size() {
        let img = render_bev(&view(2, 3));
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }

    #[test]
    fn constant_features_render_uniformly() {
        let v = view(4, 4);
        let f = Tensor::full(&[4, 4, 8], 0.3);
        let img = render_pca(&v, &f).unwrap();
        assert!(img.rgb.chunks(3).all(|p| p == [128, 128, 128]));
    }

    #[test]
    fn pca_separates_two_groups() {
        let v = view(2, 2);
        let mut data = vec![0.0; 16];
        for c in 2..4 {
            data[c * 4] = 5.0;
            data[c * 4 + 1] = 5.0;
        }
        let img = render_pca(&v, &Tensor::new(vec![2, 2, 4], data).unwrap()).unwrap();
        let px: Vec<&[u8]> = img.rgb.chunks(3).collect();
        assert_eq!(px[0], px[1]);
        assert_eq!(px[2], px[3]);
        assert_ne!(px[0], px[2]);
    }
}
