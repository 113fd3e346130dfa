//! Top-down PNG overlays of ground truth and predictions.

use segmap_core::eval::Detection;
use segmap_core::geometry::BevGrid;
use segmap_core::scene::{MapElement, Mask};

/// Pixels per BEV cell.
pub const SCALE: usize = 4;

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    fn line(&mut self, a: [f64; 2], b: [f64; 2], rgb: [u8; 3]) {
        let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = a[0] + t * (b[0] - a[0]);
            let y = a[1] + t * (b[1] - a[1]);
            self.put(x.round() as i64, y.round() as i64, rgb);
        }
    }
}

fn to_px(grid: &BevGrid, p: [f64; 2]) -> [f64; 2] {
    let rc = grid.to_cell(p);
    let s = SCALE as f64;
    [(rc[1] + 0.5) * s, (rc[0] + 0.5) * s]
}

fn polyline(c: &mut Canvas, grid: &BevGrid, pts: &[[f64; 2]], closed: bool, rgb: [u8; 3]) {
    for w in pts.windows(2) {
        c.line(to_px(grid, w[0]), to_px(grid, w[1]), rgb);
    }
    if closed && pts.len() > 2 {
        c.line(to_px(grid, pts[pts.len() - 1]), to_px(grid, pts[0]), rgb);
    }
}

/// Ground-truth mask in gray, predicted foreground (if any) in blue,
/// ground-truth elements in green and predictions in red. Vehicle heading
/// is up. Returns PNG bytes.
pub fn render(
    grid: &BevGrid,
    mask: &Mask,
    seg_probs: Option<&[f64]>,
    gt: &[MapElement],
    preds: &[Detection],
    score_min: f64,
) -> Vec<u8> {
    let (w, h) = (grid.w * SCALE, grid.h * SCALE);
    let mut c = Canvas {
        w,
        h,
        data: vec![255; w * h * 3],
    };
    for r in 0..grid.h {
        for col in 0..grid.w {
            let i = r * grid.w + col;
            let mut rgb = if mask.data[i] != 0 { [200, 200, 200] } else { [255, 255, 255] };
            if seg_probs.is_some_and(|p| p[i] > 0.5) {
                rgb = [rgb[0] / 2, rgb[1] / 2 + 40, 255];
            }
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    c.put((col * SCALE + dx) as i64, (r * SCALE + dy) as i64, rgb);
                }
            }
        }
    }
    for e in gt {
        polyline(&mut c, grid, &e.points, e.closed, [0, 150, 0]);
    }
    for d in preds.iter().filter(|d| d.score >= score_min) {
        polyline(&mut c, grid, &d.points, d.closed(), [220, 0, 0]);
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().expect("in-memory PNG header");
        wr.write_image_data(&c.data).expect("in-memory PNG data");
    }
    out
}
