//! Procedural grid scenes: small H×W×3 canvases with a textured background
//! and a handful of non-overlapping primitive objects (rectangles, crosses,
//! discs), each annotated with bitmap, bounding box, class, and color.
//!
//! Captions are integer token sequences that encode the exact object list
//! (class, color, bounding-box corner), so they decode back losslessly.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};

/// Token vocabulary layout. Ranges are disjoint; PAD is 0.
pub mod vocab {
    pub const PAD: u16 = 0;
    pub const CLASS_BASE: u16 = 1; // 3 classes
    pub const COLOR_BASE: u16 = 8; // 6 colors
    pub const ROW_BASE: u16 = 16; // up to 32 rows
    pub const COL_BASE: u16 = 48; // up to 32 cols
    pub const TASK_BASE: u16 = 80; // 5 task tags
    pub const MODE_BASE: u16 = 88; // 3 grounding modes
    pub const OP_BASE: u16 = 92; // 3 edit ops
    pub const ANN_COLOR_BASE: u16 = 96; // 4 annotation colors
    pub const TIME_BASE: u16 = 104; // 2 slots: bias + scale direction
    pub const SIZE: usize = 112;
}

pub const N_CLASSES: usize = 3;
pub const N_COLORS: usize = 6;
pub const N_ANN_COLORS: usize = 4;

/// Scene palette: all channels within [0.3, 0.8], far from both the dim
/// background and the saturated annotation palette.
pub const PALETTE: [[f64; 3]; N_COLORS] = [
    [0.8, 0.3, 0.3],
    [0.3, 0.8, 0.3],
    [0.3, 0.3, 0.8],
    [0.8, 0.8, 0.3],
    [0.8, 0.3, 0.8],
    [0.3, 0.8, 0.8],
];

/// Annotation palette: at least one channel saturated at 1.0, so an
/// annotated cell always differs from whatever the scene had there.
pub const ANN_PALETTE: [[f64; 3]; N_ANN_COLORS] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.1, 1.0],
    [1.0, 1.0, 1.0],
];

/// Cells whose 4-neighbors differ by more than this (any channel) are edges.
/// Background texture stays well below; object/background steps well above.
pub const EDGE_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_objects: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { height: 16, width: 16, channels: 3, max_objects: 4 }
    }
}

impl GridConfig {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.channels != 3 {
            return Err("data.channels: must be 3".into());
        }
        if self.height < 6 || self.width < 6 || self.height > 32 || self.width > 32 {
            return Err(format!(
                "data.grid: {}x{} outside supported range 6..=32",
                self.height, self.width
            ));
        }
        if self.max_objects < 1 || self.max_objects > 4 {
            return Err("data.max_objects: must be in 1..=4".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    /// 0 = rectangle, 1 = cross, 2 = disc.
    pub class_id: usize,
    pub color_id: usize,
    /// H×W occupancy, row-major.
    pub bitmap: Vec<bool>,
    /// Tight half-open bounding box (r0, c0, r1, c1).
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct GridScene {
    pub grid: GridConfig,
    /// H×W×C, row-major (r, c, ch).
    pub canvas: Vec<f64>,
    /// The pristine background (object removal restores from here).
    pub background: Vec<f64>,
    pub objects: Vec<ObjectAnnotation>,
    pub scene_id: u64,
    pub caption: Vec<u16>,
}

pub fn tight_bbox(bitmap: &[bool], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if bitmap[r * w + c] {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r + 1);
                c1 = c1.max(c + 1);
            }
        }
    }
    (r0, c0, r1, c1)
}

fn shape_bitmap(class_id: usize, size: usize, r: usize, c: usize, h: usize, w: usize) -> Vec<bool> {
    let mut bm = vec![false; h * w];
    match class_id {
        0 => {
            for dr in 0..size {
                for dc in 0..size {
                    bm[(r + dr) * w + (c + dc)] = true;
                }
            }
        }
        1 => {
            let mid = size / 2;
            for d in 0..size {
                bm[(r + mid) * w + (c + d)] = true;
                bm[(r + d) * w + (c + mid)] = true;
            }
        }
        _ => {
            let rad = size as f64 / 2.0;
            let (cr, cc) = (r as f64 + rad - 0.5, c as f64 + rad - 0.5);
            for dr in 0..size {
                for dc in 0..size {
                    let (pr, pc) = ((r + dr) as f64, (c + dc) as f64);
                    if (pr - cr).powi(2) + (pc - cc).powi(2) <= rad * rad {
                        bm[(r + dr) * w + (c + dc)] = true;
                    }
                }
            }
        }
    }
    bm
}

pub fn overlaps(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).any(|(&x, &y)| x && y)
}

pub fn paint(canvas: &mut [f64], bitmap: &[bool], color: &[f64; 3]) {
    for (cell, &on) in bitmap.iter().enumerate() {
        if on {
            canvas[cell * 3..cell * 3 + 3].copy_from_slice(color);
        }
    }
}

/// Restore background values on the given cells.
pub fn erase(canvas: &mut [f64], background: &[f64], bitmap: &[bool]) {
    for (cell, &on) in bitmap.iter().enumerate() {
        if on {
            canvas[cell * 3..cell * 3 + 3].copy_from_slice(&background[cell * 3..cell * 3 + 3]);
        }
    }
}

/// Generate a scene: textured background, 1..=max_objects disjoint objects
/// with distinct (class, color) pairs, caption derived from the object list.
pub fn gen_scene(grid: &GridConfig, rng: &mut Rng) -> GridScene {
    let cells = grid.cells();
    let mut background = vec![0.0; cells * 3];
    for v in background.iter_mut() {
        *v = 0.10 + 0.02 * rng::uniform(rng);
    }
    let mut canvas = background.clone();

    let want = 1 + rng::below(rng, grid.max_objects);
    let mut objects: Vec<ObjectAnnotation> = Vec::new();
    let mut used_pairs = Vec::new();
    let max_size = (grid.height.min(grid.width) / 2).clamp(3, 6);
    for _ in 0..want {
        for _try in 0..20 {
            let class_id = rng::below(rng, N_CLASSES);
            let color_id = rng::below(rng, N_COLORS);
            if used_pairs.contains(&(class_id, color_id)) {
                continue;
            }
            let size = 2 + rng::below(rng, max_size.saturating_sub(1).max(1));
            if size >= grid.height || size >= grid.width {
                continue;
            }
            let r = rng::below(rng, grid.height - size);
            let c = rng::below(rng, grid.width - size);
            let bitmap = shape_bitmap(class_id, size, r, c, grid.height, grid.width);
            if objects.iter().any(|o| overlaps(&o.bitmap, &bitmap)) {
                continue;
            }
            let bbox = tight_bbox(&bitmap, grid.height, grid.width);
            paint(&mut canvas, &bitmap, &PALETTE[color_id]);
            used_pairs.push((class_id, color_id));
            objects.push(ObjectAnnotation { class_id, color_id, bitmap, bbox });
            break;
        }
        // placement failure after bounded retries: fewer objects, never an
        // invalid scene (the first object always fits on an empty canvas)
    }
    let caption = encode_caption(&objects);
    let scene_id = rng.next_u64();
    GridScene { grid: *grid, canvas, background, objects, scene_id, caption }
}

/// Caption: 4 tokens per object — class, color, bbox row, bbox col.
pub fn encode_caption(objects: &[ObjectAnnotation]) -> Vec<u16> {
    let mut out = Vec::with_capacity(objects.len() * 4);
    for o in objects {
        out.push(vocab::CLASS_BASE + o.class_id as u16);
        out.push(vocab::COLOR_BASE + o.color_id as u16);
        out.push(vocab::ROW_BASE + o.bbox.0 as u16);
        out.push(vocab::COL_BASE + o.bbox.1 as u16);
    }
    out
}

/// Inverse of `encode_caption`: (class, color, r0, c0) per object.
pub fn decode_caption(tokens: &[u16]) -> Vec<(usize, usize, usize, usize)> {
    tokens
        .chunks_exact(4)
        .take_while(|ch| ch[0] != vocab::PAD)
        .map(|ch| {
            (
                (ch[0] - vocab::CLASS_BASE) as usize,
                (ch[1] - vocab::COLOR_BASE) as usize,
                (ch[2] - vocab::ROW_BASE) as usize,
                (ch[3] - vocab::COL_BASE) as usize,
            )
        })
        .collect()
}

/// Binary edge map: a cell is an edge when any 4-neighbor differs by more
/// than `EDGE_THRESHOLD` in any channel.
pub fn edge_map(grid: &GridConfig, canvas: &[f64]) -> Vec<bool> {
    let (h, w) = (grid.height, grid.width);
    let mut edges = vec![false; h * w];
    let differs = |a: usize, b: usize| -> bool {
        (0..3).any(|ch| (canvas[a * 3 + ch] - canvas[b * 3 + ch]).abs() > EDGE_THRESHOLD)
    };
    for r in 0..h {
        for c in 0..w {
            let cell = r * w + c;
            let mut e = false;
            if r > 0 {
                e |= differs(cell, cell - w);
            }
            if r + 1 < h {
                e |= differs(cell, cell + w);
            }
            if c > 0 {
                e |= differs(cell, cell - 1);
            }
            if c + 1 < w {
                e |= differs(cell, cell + 1);
            }
            edges[cell] = e;
        }
    }
    edges
}
