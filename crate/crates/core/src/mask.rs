//! Inpainting mask construction: free-form random-walk masks with an IoU
//! filter against object masks, object-shaped masks, and irregular masks
//! built from a jittered closed Bézier loop around an object's bounding box
//! (20 uniformly sampled vertices, even-odd rasterization).
//!
//! Mask kinds are mixed at 20% random / 40% object-shaped / 40% irregular.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::scene::{GridConfig, GridScene, ObjectAnnotation};

/// Accepted random masks must have IoU <= this against every object mask
/// ("exceeds" is strict, so exactly 0.3 passes).
pub const RANDOM_MASK_IOU_LIMIT: f64 = 0.3;

/// An irregular mask polygon has exactly this many vertices.
pub const IRREGULAR_POLYGON_POINTS: usize = 20;

/// Outward jitter of the loop control points, as a fraction of the
/// bounding-box diagonal: uniform in [0, 0.3].
pub const MAX_JITTER_FRACTION: f64 = 0.3;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("degenerate bounding box {0:?}")]
    DegenerateBbox((usize, usize, usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Random,
    ObjectShaped,
    IrregularObject,
}

impl MaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::Random => "random",
            MaskKind::ObjectShaped => "object_shaped",
            MaskKind::IrregularObject => "irregular_object",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// H×W occupancy.
    pub bitmap: Vec<bool>,
    /// Index into the scene's object list, for object-derived masks.
    pub source_object: Option<usize>,
    /// The 20 sampled loop points (row, col), irregular masks only.
    pub polygon: Option<Vec<(f64, f64)>>,
}

/// Outcome of one random-mask draw. Rejection is a normal result; the caller
/// resamples.
#[derive(Debug)]
pub enum RandomMaskOutcome {
    Accepted(MaskSpec),
    Rejected { max_iou: f64 },
}

/// Intersection over union of two same-shape boolean grids; 0 when both are
/// empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "iou: shape mismatch {} vs {}", a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Highest IoU of `bitmap` against any object in the scene.
pub fn max_object_iou(bitmap: &[bool], scene: &GridScene) -> f64 {
    scene
        .objects
        .iter()
        .map(|o| iou(bitmap, &o.bitmap))
        .fold(0.0, f64::max)
}

/// Draw kind with probabilities 0.2 / 0.4 / 0.4.
pub fn sample_mask_type(rng: &mut Rng) -> MaskKind {
    let u = rng::uniform(rng);
    if u < 0.2 {
        MaskKind::Random
    } else if u < 0.6 {
        MaskKind::ObjectShaped
    } else {
        MaskKind::IrregularObject
    }
}

/// Free-form brush-stroke mask: 1..=3 random walks with per-stroke thickness
/// 1..=3 cells. Rejected whenever its IoU with any object mask exceeds the
/// limit, which biases accepted masks toward background regions.
pub fn random_mask(scene: &GridScene, rng: &mut Rng) -> RandomMaskOutcome {
    let grid = &scene.grid;
    let (h, w) = (grid.height, grid.width);
    let mut bitmap = vec![false; h * w];
    let strokes = 1 + rng::below(rng, 3);
    for _ in 0..strokes {
        let mut r = rng::below(rng, h) as i64;
        let mut c = rng::below(rng, w) as i64;
        let thickness = 1 + rng::below(rng, 3);
        let steps = (h + w) / 2 + rng::below(rng, h + w);
        let mut dir = rng::below(rng, 4);
        for _ in 0..steps {
            stamp(&mut bitmap, h, w, r, c, thickness);
            if rng::uniform(rng) < 0.3 {
                dir = rng::below(rng, 4);
            }
            let (dr, dc) = [(0, 1), (1, 0), (0, -1), (-1, 0)][dir];
            r = (r + dr).clamp(0, h as i64 - 1);
            c = (c + dc).clamp(0, w as i64 - 1);
        }
    }
    let max_iou = max_object_iou(&bitmap, scene);
    if max_iou > RANDOM_MASK_IOU_LIMIT {
        RandomMaskOutcome::Rejected { max_iou }
    } else {
        RandomMaskOutcome::Accepted(MaskSpec {
            kind: MaskKind::Random,
            bitmap,
            source_object: None,
            polygon: None,
        })
    }
}

fn stamp(bitmap: &mut [bool], h: usize, w: usize, r: i64, c: i64, thickness: usize) {
    let rad = thickness as i64 / 2;
    for dr in -rad..=rad {
        for dc in -rad..=rad {
            let (rr, cc) = (r + dr, c + dc);
            if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                bitmap[rr as usize * w + cc as usize] = true;
            }
        }
    }
}

/// A mask that is exactly the object's own bitmap.
pub fn object_shaped_mask(scene: &GridScene, object_index: usize) -> MaskSpec {
    MaskSpec {
        kind: MaskKind::ObjectShaped,
        bitmap: scene.objects[object_index].bitmap.clone(),
        source_object: Some(object_index),
        polygon: None,
    }
}

/// Irregular object-shaped mask: a closed quadratic Bézier loop through the
/// bbox corners and edge midpoints (each jittered outward by a uniform
/// fraction of the diagonal, clamped to the canvas), sampled at exactly 20
/// uniformly spaced parameters and rasterized with even-odd fill at cell
/// centers (a vertex or edge through a center counts as inside).
pub fn bezier_irregular_mask(
    grid: &GridConfig,
    obj: &ObjectAnnotation,
    object_index: usize,
    rng: &mut Rng,
) -> Result<MaskSpec, MaskError> {
    let (r0, c0, r1, c1) = obj.bbox;
    if r1 <= r0 || c1 <= c0 {
        return Err(MaskError::DegenerateBbox(obj.bbox));
    }
    let polygon = sample_loop_polygon(grid, obj.bbox, rng);
    let bitmap = rasterize_even_odd(grid, &polygon);
    Ok(MaskSpec {
        kind: MaskKind::IrregularObject,
        bitmap,
        source_object: Some(object_index),
        polygon: Some(polygon),
    })
}

/// The 8 loop anchors in clockwise order: corners and edge midpoints of the
/// bbox, each pushed outward from the box center.
fn control_points(
    grid: &GridConfig,
    bbox: (usize, usize, usize, usize),
    rng: &mut Rng,
) -> Vec<(f64, f64)> {
    let (r0, c0, r1, c1) = (bbox.0 as f64, bbox.1 as f64, bbox.2 as f64, bbox.3 as f64);
    let (rm, cm) = ((r0 + r1) / 2.0, (c0 + c1) / 2.0);
    let diag = ((r1 - r0).powi(2) + (c1 - c0).powi(2)).sqrt();
    let anchors = [
        (r0, c0),
        (r0, cm),
        (r0, c1),
        (rm, c1),
        (r1, c1),
        (r1, cm),
        (r1, c0),
        (rm, c0),
    ];
    anchors
        .iter()
        .map(|&(r, c)| {
            let (dr, dc) = (r - rm, c - cm);
            let norm = (dr * dr + dc * dc).sqrt().max(1e-9);
            let push = rng::uniform(rng) * MAX_JITTER_FRACTION * diag;
            let rr = (r + dr / norm * push).clamp(0.0, grid.height as f64);
            let cc = (c + dc / norm * push).clamp(0.0, grid.width as f64);
            (rr, cc)
        })
        .collect()
}

/// Sample 20 points at uniform parameter spacing along the closed smooth
/// loop: piece i is the quadratic Bézier from midpoint(P_i, P_{i+1}) to
/// midpoint(P_{i+1}, P_{i+2}) with control P_{i+1}.
fn sample_loop_polygon(
    grid: &GridConfig,
    bbox: (usize, usize, usize, usize),
    rng: &mut Rng,
) -> Vec<(f64, f64)> {
    let ctrl = control_points(grid, bbox, rng);
    let n = ctrl.len();
    let mut points = Vec::with_capacity(IRREGULAR_POLYGON_POINTS);
    for j in 0..IRREGULAR_POLYGON_POINTS {
        let t = j as f64 / IRREGULAR_POLYGON_POINTS as f64 * n as f64;
        let piece = (t.floor() as usize).min(n - 1);
        let s = t - piece as f64;
        let p0 = midpoint(ctrl[piece], ctrl[(piece + 1) % n]);
        let p1 = ctrl[(piece + 1) % n];
        let p2 = midpoint(ctrl[(piece + 1) % n], ctrl[(piece + 2) % n]);
        points.push(quad_bezier(p0, p1, p2, s));
    }
    points
}

fn midpoint(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
}

fn quad_bezier(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), s: f64) -> (f64, f64) {
    let u = 1.0 - s;
    (
        u * u * p0.0 + 2.0 * u * s * p1.0 + s * s * p2.0,
        u * u * p0.1 + 2.0 * u * s * p1.1 + s * s * p2.1,
    )
}

/// Even-odd polygon fill sampled at cell centers. A center lying exactly on
/// a polygon edge counts as inside.
pub fn rasterize_even_odd(grid: &GridConfig, polygon: &[(f64, f64)]) -> Vec<bool> {
    let (h, w) = (grid.height, grid.width);
    let mut bitmap = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            bitmap[r * w + c] = point_in_polygon_even_odd(p, polygon);
        }
    }
    bitmap
}

fn point_on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    if cross.abs() > 1e-9 {
        return false;
    }
    let dot = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
    let len2 = (b.0 - a.0).powi(2) + (b.1 - a.1).powi(2);
    (0.0..=len2).contains(&dot)
}

fn point_in_polygon_even_odd(p: (f64, f64), polygon: &[(f64, f64)]) -> bool {
    let n = polygon.len();
    let mut inside = false;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if point_on_segment(p, a, b) {
            return true;
        }
        // ray cast along +col; (row, col) plays (y, x)
        if (a.0 > p.0) != (b.0 > p.0) {
            let cx = a.1 + (p.0 - a.0) / (b.0 - a.0) * (b.1 - a.1);
            if p.1 < cx {
                inside = !inside;
            }
        }
    }
    inside
}

/// True when no two non-adjacent polygon edges intersect.
pub fn polygon_is_simple(polygon: &[(f64, f64)]) -> bool {
    let n = polygon.len();
    for i in 0..n {
        for j in i + 1..n {
            // skip adjacent edges (they share a vertex)
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (a1, a2) = (polygon[i], polygon[(i + 1) % n]);
            let (b1, b2) = (polygon[j], polygon[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_intersect(a1: (f64, f64), a2: (f64, f64), b1: (f64, f64), b2: (f64, f64)) -> bool {
    let d1 = orient(a1, a2, b1);
    let d2 = orient(a1, a2, b2);
    let d3 = orient(b1, b2, a1);
    let d4 = orient(b1, b2, a2);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen_scene;

    #[test]
    fn iou_basic_cases() {
        let a = vec![true, true, false, false];
        let b = vec![true, true, false, false];
        assert_eq!(iou(&a, &b), 1.0);
        let c = vec![false, false, true, true];
        assert_eq!(iou(&a, &c), 0.0);
        let empty = vec![false; 4];
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    #[test]
    fn iou_partial_overlap_counts_cells() {
        // 2x2 block overlapping a 2x2 block on exactly 1 cell: 1/7
        let mut a = vec![false; 16];
        let mut b = vec![false; 16];
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            a[r * 4 + c] = true;
        }
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            b[r * 4 + c] = true;
        }
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn mask_equal_to_object_is_rejected_by_filter() {
        let grid = GridConfig::default();
        let scene = gen_scene(&grid, &mut rng::stream(5, "data", 0));
        let object_mask = scene.objects[0].bitmap.clone();
        assert_eq!(max_object_iou(&object_mask, &scene), 1.0);
        assert!(max_object_iou(&object_mask, &scene) > RANDOM_MASK_IOU_LIMIT);
    }

    #[test]
    fn iou_exactly_at_limit_is_accepted() {
        // |∩| = 3, |∪| = 10 → exactly 0.3; "exceeds" is strict
        let mut a = vec![false; 16];
        let mut b = vec![false; 16];
        for i in 0..7 {
            a[i] = true;
        }
        for i in 4..10 {
            b[i] = true;
        }
        let v = iou(&a, &b);
        assert_eq!(v, 0.3);
        assert!(!(v > RANDOM_MASK_IOU_LIMIT));
    }

    #[test]
    fn accepted_random_masks_respect_the_limit() {
        let grid = GridConfig::default();
        let mut accepted = 0;
        for i in 0..2000u64 {
            let scene = gen_scene(&grid, &mut rng::stream(6, "data", i));
            let mut r = rng::stream(6, "mask", i);
            if let RandomMaskOutcome::Accepted(m) = random_mask(&scene, &mut r) {
                assert!(max_object_iou(&m.bitmap, &scene) <= RANDOM_MASK_IOU_LIMIT);
                assert!(m.bitmap.iter().any(|&b| b), "random mask painted nothing");
                accepted += 1;
            }
        }
        assert!(accepted > 500, "acceptance rate suspiciously low: {accepted}/2000");
    }

    #[test]
    fn mask_type_mixture_is_20_40_40() {
        let mut r = rng::stream(7, "mask", 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_mask_type(&mut r) {
                MaskKind::Random => counts[0] += 1,
                MaskKind::ObjectShaped => counts[1] += 1,
                MaskKind::IrregularObject => counts[2] += 1,
            }
        }
        let f: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!((f[0] - 0.2).abs() < 0.01, "random {}", f[0]);
        assert!((f[1] - 0.4).abs() < 0.01, "object {}", f[1]);
        assert!((f[2] - 0.4).abs() < 0.01, "irregular {}", f[2]);
        assert!((f[0] + f[1] + f[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn irregular_polygon_has_20_vertices_in_bounds_and_simple() {
        let grid = GridConfig::default();
        for i in 0..1000u64 {
            let scene = gen_scene(&grid, &mut rng::stream(8, "data", i));
            let mut r = rng::stream(8, "mask", i);
            let m = bezier_irregular_mask(&grid, &scene.objects[0], 0, &mut r).unwrap();
            let poly = m.polygon.as_ref().unwrap();
            assert_eq!(poly.len(), IRREGULAR_POLYGON_POINTS);
            for &(pr, pc) in poly {
                assert!((0.0..=grid.height as f64).contains(&pr));
                assert!((0.0..=grid.width as f64).contains(&pc));
            }
            assert!(polygon_is_simple(poly), "self-intersecting polygon at seed {i}");
        }
    }

    #[test]
    fn zero_jitter_polygon_inscribes_the_bbox() {
        // with zero jitter the loop stays within the bbox and the mask
        // still covers part of the object
        let grid = GridConfig::default();
        let scene = gen_scene(&grid, &mut rng::stream(9, "data", 3));
        let obj = &scene.objects[0];
        // zero jitter: uniform(rng) can't be forced, so build the loop
        // directly from unjittered anchors
        let polygon = {
            let (r0, c0, r1, c1) =
                (obj.bbox.0 as f64, obj.bbox.1 as f64, obj.bbox.2 as f64, obj.bbox.3 as f64);
            let (rm, cm) = ((r0 + r1) / 2.0, (c0 + c1) / 2.0);
            let ctrl = [
                (r0, c0),
                (r0, cm),
                (r0, c1),
                (rm, c1),
                (r1, c1),
                (r1, cm),
                (r1, c0),
                (rm, c0),
            ];
            let n = ctrl.len();
            (0..IRREGULAR_POLYGON_POINTS)
                .map(|j| {
                    let t = j as f64 / IRREGULAR_POLYGON_POINTS as f64 * n as f64;
                    let piece = (t.floor() as usize).min(n - 1);
                    let s = t - piece as f64;
                    let p0 = midpoint(ctrl[piece], ctrl[(piece + 1) % n]);
                    let p1 = ctrl[(piece + 1) % n];
                    let p2 = midpoint(ctrl[(piece + 1) % n], ctrl[(piece + 2) % n]);
                    quad_bezier(p0, p1, p2, s)
                })
                .collect::<Vec<_>>()
        };
        for &(pr, pc) in &polygon {
            assert!(pr >= obj.bbox.0 as f64 - 1e-9 && pr <= obj.bbox.2 as f64 + 1e-9);
            assert!(pc >= obj.bbox.1 as f64 - 1e-9 && pc <= obj.bbox.3 as f64 + 1e-9);
        }
        let bitmap = rasterize_even_odd(&grid, &polygon);
        let covered = obj
            .bitmap
            .iter()
            .zip(&bitmap)
            .filter(|(&o, &m)| o && m)
            .count();
        assert!(covered > 0, "inscribed loop must cover part of the object");
    }

    #[test]
    fn rasterization_even_odd_square() {
        let grid = GridConfig { height: 8, width: 8, channels: 3, max_objects: 1 };
        // unit square [2, 6) x [2, 6): centers (2.5..5.5) inside → 16 cells
        let poly = vec![(2.0, 2.0), (2.0, 6.0), (6.0, 6.0), (6.0, 2.0)];
        let bm = rasterize_even_odd(&grid, &poly);
        assert_eq!(bm.iter().filter(|&&b| b).count(), 16);
        assert!(bm[3 * 8 + 3]);
        assert!(!bm[0]);
    }

    #[test]
    fn edge_through_center_counts_inside() {
        let grid = GridConfig { height: 4, width: 4, channels: 3, max_objects: 1 };
        // degenerate sliver whose left edge passes through centers at col 0.5
        let poly = vec![(0.0, 0.5), (4.0, 0.5), (4.0, 0.6), (0.0, 0.6)];
        let bm = rasterize_even_odd(&grid, &poly);
        for r in 0..4 {
            assert!(bm[r * 4], "center (r+0.5, 0.5) lies on the boundary");
        }
    }
}
