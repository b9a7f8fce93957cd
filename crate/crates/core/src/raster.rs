//! Pure raster kernels: box filtering, bilinear sampling, rasterization,
//! dilation, exact Euclidean distance transforms and overlap blending.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{PatchLayout, Point, PromptPoint, Raster, RoadGraph};

/// Default stroke width when rasterizing graphs into masks.
pub const DEFAULT_THICKNESS: f64 = 5.0;

/// Mean over a `kernel x kernel` window, replicating border pixels.
pub fn box_filter(raster: &Raster, kernel: usize) -> Result<Raster> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::arg("box filter kernel must be odd and >= 1"));
    }
    if kernel == 1 || raster.is_empty() {
        return Ok(raster.clone());
    }
    let (h, w) = (raster.height(), raster.width());
    let r = (kernel / 2) as isize;
    let k = kernel as f64;
    let src = raster.data();

    let clamp_idx = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };

    let mut horizontal = vec![0.0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f64;
            for dx in -r..=r {
                acc += row[clamp_idx(x as isize + dx, w)] as f64;
            }
            horizontal[y * w + x] = acc / k;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                acc += horizontal[clamp_idx(y as isize + dy, h) * w + x];
            }
            out.push((acc / k) as f32);
        }
    }
    Raster::new(h, w, out)
}

/// One box-filtered copy of a road mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub kernel: usize,
    pub raster: Raster,
}

/// Multi-scale stack of box-filtered road masks, finest kernel first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn build(road: &Raster, kernels: &[usize]) -> Result<Self> {
        let levels = kernels
            .iter()
            .map(|&kernel| {
                Ok(PyramidLevel {
                    kernel,
                    raster: box_filter(road, kernel)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }
}

/// Bilinear interpolation with coordinates clamped to the raster bounds.
pub fn bilinear_sample(raster: &Raster, x: f64, y: f64) -> Result<f64> {
    if x.is_nan() || y.is_nan() {
        return Err(Error::arg("NaN sample coordinate"));
    }
    if raster.is_empty() {
        return Err(Error::arg("cannot sample an empty raster"));
    }
    Ok(sample_clamped(raster, x, y))
}

/// Unchecked variant of [`bilinear_sample`] for hot loops; the raster must be
/// non-empty and the coordinates finite.
#[inline]
pub(crate) fn sample_clamped(raster: &Raster, x: f64, y: f64) -> f64 {
    let (w, h) = (raster.width(), raster.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = math::floor(x) as usize;
    let y0 = math::floor(y) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = raster.get(x0, y0) as f64;
    let v10 = raster.get(x1, y0) as f64;
    let v01 = raster.get(x0, y1) as f64;
    let v11 = raster.get(x1, y1) as f64;
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    top + (bottom - top) * fy
}

/// Distance from `p` to the segment `a-b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Binary mask with every pixel center within `thickness / 2` of an edge set.
pub fn rasterize_graph(graph: &RoadGraph, height: usize, width: usize, thickness: f64) -> Raster {
    let mut out = Raster::zeros(height, width);
    if height == 0 || width == 0 {
        return out;
    }
    let half = thickness / 2.0;
    for &(i, j) in &graph.edges {
        let (a, b) = (graph.point(i), graph.point(j));
        let lo_x = math::floor(a.x.min(b.x) - half).max(0.0);
        let hi_x = math::ceil(a.x.max(b.x) + half).min((width - 1) as f64);
        let lo_y = math::floor(a.y.min(b.y) - half).max(0.0);
        let hi_y = math::ceil(a.y.max(b.y) + half).min((height - 1) as f64);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        for y in lo_y as usize..=hi_y as usize {
            for x in lo_x as usize..=hi_x as usize {
                if point_segment_distance(Point::new(x as f64, y as f64), a, b) <= half {
                    out.set(x, y, 1.0);
                }
            }
        }
    }
    out
}

/// Disk dilation: a pixel is set iff some set pixel lies within `radius`.
/// Any strictly positive input value counts as set.
pub fn dilate(raster: &Raster, radius: f64) -> Result<Raster> {
    if !(radius >= 0.0) {
        return Err(Error::arg("dilation radius must be non-negative"));
    }
    let d2 = squared_edt(raster);
    let r2 = radius * radius;
    let data = d2
        .into_iter()
        .map(|d| if d <= r2 { 1.0 } else { 0.0 })
        .collect();
    Raster::new(raster.height(), raster.width(), data)
}

/// Squared Euclidean distance from each pixel to the nearest set pixel
/// (`f64::INFINITY` when nothing is set).
pub fn squared_edt(mask: &Raster) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut cols = vec![f64::INFINITY; h * w];
    let mut seeds: Vec<(f64, f64)> = Vec::with_capacity(h.max(w));
    let mut line = vec![0.0; h.max(w)];
    for x in 0..w {
        seeds.clear();
        for y in 0..h {
            if mask.get(x, y) > 0.0 {
                seeds.push((y as f64, 0.0));
            }
        }
        lower_envelope(&seeds, &mut line[..h]);
        for y in 0..h {
            cols[y * w + x] = line[y];
        }
    }
    let mut out = vec![f64::INFINITY; h * w];
    for y in 0..h {
        seeds.clear();
        for x in 0..w {
            let v = cols[y * w + x];
            if v.is_finite() {
                seeds.push((x as f64, v));
            }
        }
        lower_envelope(&seeds, &mut line[..w]);
        out[y * w..(y + 1) * w].copy_from_slice(&line[..w]);
    }
    out
}

/// Evaluates `min_i (q - c_i)^2 + h_i` at `q = 0..out.len()` via the lower
/// envelope of parabolas. `parabolas` holds `(c_i, h_i)` sorted by `c_i`.
fn lower_envelope(parabolas: &[(f64, f64)], out: &mut [f64]) {
    if parabolas.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    // Coincident centers: only the lowest offset can win.
    let mut parts: Vec<(f64, f64)> = Vec::with_capacity(parabolas.len());
    for &(c, h) in parabolas {
        match parts.last_mut() {
            Some(last) if last.0 == c => last.1 = last.1.min(h),
            _ => parts.push((c, h)),
        }
    }
    let m = parts.len();
    let mut v = vec![0usize; m];
    let mut z = vec![0.0f64; m + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for i in 1..m {
        let (ci, hi) = parts[i];
        let intersect = |k: usize| {
            let (ck, hk) = parts[v[k]];
            ((hi + ci * ci) - (hk + ck * ck)) / (2.0 * ci - 2.0 * ck)
        };
        // z[0] is -inf, so this stops at k = 0 at the latest.
        let mut s = intersect(k);
        while s <= z[k] {
            k -= 1;
            s = intersect(k);
        }
        k += 1;
        v[k] = i;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let q = q as f64;
        while z[k + 1] < q {
            k += 1;
        }
        let (c, h) = parts[v[k]];
        let d = q - c;
        *slot = h + d * d;
    }
}

/// Distance from every pixel to the nearest prompt, divided by the image
/// diagonal `hypot(w, h)` so values fall in `[0, 1]`.
pub fn distance_transform(points: &[PromptPoint], height: usize, width: usize) -> Result<Raster> {
    if points.is_empty() {
        return Err(Error::arg("distance transform needs at least one point"));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::arg("non-finite prompt coordinate"));
    }
    let diag = math::hypot(width as f64, height as f64);
    let mut out = Raster::zeros(height, width);
    let mut sorted: Vec<Point> = points.iter().map(|p| Point::new(p.x, p.y)).collect();
    sorted.sort_by(|a, b| a.y.total_cmp(&b.y));
    let mut parabolas = Vec::with_capacity(sorted.len());
    let mut line = vec![0.0; height];
    for x in 0..width {
        parabolas.clear();
        let xf = x as f64;
        for p in &sorted {
            let dx = xf - p.x;
            parabolas.push((p.y, dx * dx));
        }
        lower_envelope(&parabolas, &mut line);
        for (y, &d2) in line.iter().enumerate() {
            out.set(x, y, ((math::sqrt(d2) / diag).min(1.0)) as f32);
        }
    }
    Ok(out)
}

/// Separable tent weight for patch-local coordinate `u`: ramps from near 0 at
/// the patch border to 1 over the overlap width.
pub fn ramp_weight(u: usize, patch: usize, overlap: usize) -> f64 {
    if overlap == 0 {
        return 1.0;
    }
    let ov = overlap as f64;
    let u = u as f64;
    let rising = (u + 0.5) / ov;
    let falling = (patch as f64 - u - 0.5) / ov;
    rising.min(falling).min(1.0)
}

/// Stitches patch rasters into the full image with normalized tent weights.
pub fn blend_patches(patches: &[((usize, usize), Raster)], layout: &PatchLayout) -> Result<Raster> {
    blend_region(
        patches,
        layout,
        (0, 0),
        layout.image_w,
        layout.image_h,
    )
}

/// Like [`blend_patches`] but only materializes the `width x height` window
/// whose top-left corner is `origin` (global pixels). Uncovered pixels are 0.
pub fn blend_region(
    patches: &[((usize, usize), Raster)],
    layout: &PatchLayout,
    origin: (usize, usize),
    width: usize,
    height: usize,
) -> Result<Raster> {
    let p = layout.patch;
    let overlap = layout.overlap();
    let ramp: Vec<f64> = (0..p).map(|u| ramp_weight(u, p, overlap)).collect();
    let n = width * height;
    let mut weighted = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    let mut coverage = vec![0u32; n];
    let mut single = vec![0.0f32; n];
    for ((ox, oy), raster) in patches {
        if raster.width() != p || raster.height() != p {
            return Err(Error::arg(alloc::format!(
                "patch at ({ox}, {oy}) is {}x{}, expected {p}x{p}",
                raster.height(),
                raster.width()
            )));
        }
        for v in 0..p {
            let gy = oy + v;
            if gy < origin.1 || gy >= origin.1 + height || gy >= layout.image_h {
                continue;
            }
            let ry = gy - origin.1;
            for u in 0..p {
                let gx = ox + u;
                if gx < origin.0 || gx >= origin.0 + width || gx >= layout.image_w {
                    continue;
                }
                let idx = ry * width + (gx - origin.0);
                let value = raster.get(u, v);
                let wgt = ramp[u] * ramp[v];
                weighted[idx] += wgt * value as f64;
                weights[idx] += wgt;
                coverage[idx] += 1;
                single[idx] = value;
            }
        }
    }
    let data = (0..n)
        .map(|i| match coverage[i] {
            0 => 0.0,
            1 => single[i],
            _ => (weighted[i] / weights[i]) as f32,
        })
        .collect();
    Raster::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vertex;
    use proptest::prelude::*;

    fn raster(rows: &[&[f32]]) -> Raster {
        let h = rows.len();
        let w = rows[0].len();
        Raster::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn box_filter_identity_and_constant() {
        let r = raster(&[&[0.1, 0.9, 0.3], &[0.4, 0.5, 0.6]]);
        assert_eq!(box_filter(&r, 1).unwrap(), r);
        let c = Raster::filled(12, 7, 0.7);
        assert_eq!(box_filter(&c, 9).unwrap(), c);
        assert!(box_filter(&c, 4).is_err());
    }

    #[test]
    fn box_filter_center_is_mean_of_neighbourhood() {
        let r = Raster::from_fn(3, 3, |x, y| (y * 3 + x) as f32 / 8.0);
        let f = box_filter(&r, 3).unwrap();
        assert!((f.get(1, 1) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn bilinear_examples() {
        let r = raster(&[&[0.0, 1.0], &[2.0, 3.0]]);
        assert_eq!(bilinear_sample(&r, 0.5, 0.5).unwrap(), 1.5);
        assert_eq!(bilinear_sample(&r, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(bilinear_sample(&r, -3.0, 0.0).unwrap(), 0.0);
        assert!(bilinear_sample(&r, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn rasterize_horizontal_edge() {
        let g = RoadGraph::from_points(&[(0.0, 5.0), (9.0, 5.0)], &[(0, 1)]).unwrap();
        let r = rasterize_graph(&g, 10, 10, 1.0);
        for y in 0..10 {
            for x in 0..10 {
                // Oracle: pixel-center distance to the segment.
                let d = point_segment_distance(
                    Point::new(x as f64, y as f64),
                    Point::new(0.0, 5.0),
                    Point::new(9.0, 5.0),
                );
                let expect = if d <= 0.5 { 1.0 } else { 0.0 };
                assert_eq!(r.get(x, y), expect, "pixel ({x},{y})");
            }
        }
        assert!((0..10).all(|x| r.get(x, 5) == 1.0));
    }

    #[test]
    fn rasterize_without_edges_is_zero() {
        let empty = rasterize_graph(&RoadGraph::default(), 4, 4, 5.0);
        assert!(empty.data().iter().all(|&v| v == 0.0));
        let g = RoadGraph::new(vec![Vertex::at(1.0, 1.0)], vec![]).unwrap();
        assert!(rasterize_graph(&g, 4, 4, 5.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilate_single_pixel_matches_disk() {
        let mut r = Raster::zeros(11, 11);
        r.set(5, 5, 1.0);
        let d = dilate(&r, 2.0).unwrap();
        for y in 0..11i32 {
            for x in 0..11i32 {
                let inside = (x - 5) * (x - 5) + (y - 5) * (y - 5) <= 4;
                assert_eq!(d.get(x as usize, y as usize) == 1.0, inside);
            }
        }
        assert_eq!(dilate(&r, 0.0).unwrap(), r);
        assert!(dilate(&r, -1.0).is_err());
        let ones = Raster::filled(5, 6, 1.0);
        assert_eq!(dilate(&ones, 3.0).unwrap(), ones);
    }

    #[test]
    fn distance_transform_examples() {
        let dt = distance_transform(&[PromptPoint::positive(0.0, 0.0)], 10, 10).unwrap();
        let diag = math::hypot(10.0, 10.0);
        assert!((dt.get(3, 4) as f64 - 5.0 / diag).abs() < 1e-7);
        assert_eq!(dt.get(0, 0), 0.0);
        assert!(distance_transform(&[], 3, 3).is_err());

        let pts = [PromptPoint::positive(1.0, 4.0), PromptPoint::negative(7.0, 4.0)];
        let dt = distance_transform(&pts, 9, 9).unwrap();
        assert!((dt.get(4, 4) as f64 - 3.0 / math::hypot(9.0, 9.0)).abs() < 1e-7);
    }

    #[test]
    fn blend_single_patch_passes_through() {
        let layout = PatchLayout::new(8, 8, 8, 6).unwrap();
        let r = Raster::from_fn(8, 8, |x, y| (x * 8 + y) as f32 / 64.0);
        let out = blend_patches(&[((0, 0), r.clone())], &layout).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn blend_overlap_midpoint_is_average() {
        let layout = PatchLayout::new(13, 8, 8, 5).unwrap();
        assert_eq!(layout.origins(), vec![(0, 0), (5, 0)]);
        let patches = [
            ((0, 0), Raster::filled(8, 8, 0.0)),
            ((5, 0), Raster::filled(8, 8, 1.0)),
        ];
        let out = blend_patches(&patches, &layout).unwrap();
        // Overlap spans x in [5, 7]; its midpoint is x = 6.
        assert_eq!(out.get(6, 3), 0.5);
        assert_eq!(out.get(2, 3), 0.0);
        assert_eq!(out.get(10, 3), 1.0);
    }

    #[test]
    fn blend_constant_patches() {
        let layout = PatchLayout::new(30, 20, 12, 8).unwrap();
        let patches: Vec<_> = layout
            .origins()
            .into_iter()
            .map(|o| (o, Raster::filled(12, 12, 0.6)))
            .collect();
        let out = blend_patches(&patches, &layout).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.6));
        let bad = [((0, 0), Raster::filled(11, 12, 0.6))];
        assert!(blend_patches(&bad, &layout).is_err());
    }

    fn brute_edt(mask: &Raster) -> Vec<f64> {
        let (h, w) = (mask.height(), mask.width());
        let set: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| mask.get(x, y) > 0.0)
            .collect();
        let mut out = vec![f64::INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                for &(sx, sy) in &set {
                    let dx = x as f64 - sx as f64;
                    let dy = y as f64 - sy as f64;
                    out[y * w + x] = out[y * w + x].min(dx * dx + dy * dy);
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn box_filter_stays_within_input_range(
            h in 1usize..12, w in 1usize..12, k in 0usize..4, seed in any::<u64>()
        ) {
            let kernel = 2 * k + 1;
            let mut s = seed;
            let r = Raster::from_fn(h, w, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32
            });
            let lo = r.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = r.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let f = box_filter(&r, kernel).unwrap();
            prop_assert!(f.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn squared_edt_matches_brute_force(
            h in 1usize..20, w in 1usize..20, bits in proptest::collection::vec(any::<bool>(), 400)
        ) {
            let mask = Raster::from_fn(h, w, |x, y| if bits[y * 20 + x] && (x + y) % 3 == 0 { 1.0 } else { 0.0 });
            prop_assert_eq!(squared_edt(&mask), brute_edt(&mask));
        }

        #[test]
        fn dilate_is_monotone(
            bits in proptest::collection::vec(any::<bool>(), 144), extra in proptest::collection::vec(any::<bool>(), 144),
            radius in 0.0f64..4.0
        ) {
            let a = Raster::from_fn(12, 12, |x, y| if bits[y * 12 + x] && x % 4 == 0 { 1.0 } else { 0.0 });
            let b = Raster::from_fn(12, 12, |x, y| if a.get(x, y) > 0.0 || extra[y * 12 + x] && y % 5 == 0 { 1.0 } else { 0.0 });
            let (da, db) = (dilate(&a, radius).unwrap(), dilate(&b, radius).unwrap());
            prop_assert!(da.data().iter().zip(db.data()).all(|(&p, &q)| p <= q));
        }

        #[test]
        fn bilinear_is_lipschitz(x in 0.0f64..6.0, y in 0.0f64..6.0, eps in 0.0f64..0.01) {
            let r = Raster::from_fn(7, 7, |x, y| ((x * 3 + y * 5) % 7) as f32 / 7.0);
            // Largest neighbouring difference bounds the slope of each bilinear cell.
            let a = bilinear_sample(&r, x, y).unwrap();
            let b = bilinear_sample(&r, x + eps, y).unwrap();
            prop_assert!((a - b).abs() <= eps * 2.0 + 1e-12);
        }

        #[test]
        fn blend_weights_partition_unity(w in 13usize..40, h in 13usize..40, value in 0.0f32..1.0) {
            let layout = PatchLayout::new(w, h, 12, 7).unwrap();
            let patches: Vec<_> = layout.origins().into_iter().map(|o| (o, Raster::filled(12, 12, value))).collect();
            let out = blend_patches(&patches, &layout).unwrap();
            prop_assert!(out.data().iter().all(|&v| (v - value).abs() <= 1e-6));
        }
    }
}
