//! Deterministic synthetic road scenes: vector map ground truth, surround
//! camera renders, and the binary UV/BEV segmentation targets derived from
//! the same geometry.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, BevRange, Camera, CameraRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    PedCrossing,
    Divider,
    Boundary,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::PedCrossing, MapClass::Divider, MapClass::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            MapClass::PedCrossing => "ped crossing",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub cls: MapClass,
    /// Ordered vertices in BEV meters. A closed element's last vertex
    /// connects back to the first.
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

impl MapElement {
    pub fn validate(&self, range: &BevRange) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::DegenerateGeometry("map element needs at least two points".into()));
        }
        if self.closed && self.cls != MapClass::PedCrossing {
            return Err(Error::DegenerateGeometry(format!(
                "{} elements are open polylines",
                self.cls.label()
            )));
        }
        check_in_range(core::slice::from_ref(self), range)
    }

    /// Segments in drawing order, including the closing edge of polygons.
    pub fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.points.len();
        let count = if self.closed { n } else { n - 1 };
        (0..count).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }
}

fn check_in_range(elements: &[MapElement], range: &BevRange) -> Result<()> {
    for e in elements {
        for &p in &e.points {
            if !range.contains(p) {
                return Err(Error::OutOfRange { x: p[0], y: p[1] });
            }
        }
    }
    Ok(())
}

/// Row-major binary raster (values 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.w + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Planar RGB image, `[3, h, w]` bytes. Intensity `b` stands for `b / 255`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn get(&self, ch: usize, row: usize, col: usize) -> u8 {
        self.data[(ch * self.h + row) * self.w + col]
    }

    /// Channel-last values in `[0, 1]`: `[h*w, 3]`.
    pub fn to_hwc<T: crate::real::Real>(&self) -> Vec<T> {
        let n = self.h * self.w;
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for ch in 0..3 {
                out.push(T::of(self.data[ch * n + i] as f64 / 255.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    /// Heading of each camera in degrees, counter-clockwise from forward.
    pub camera_yaws_deg: Vec<f64>,
    pub camera_height: f64,
    pub camera_pitch_deg: f64,
    pub camera_hfov_deg: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// BEV rows (along x).
    pub bev_h: usize,
    /// BEV columns (along y).
    pub bev_w: usize,
    /// Foreground half-width of map elements in the segmentation targets.
    pub half_width: f64,
    pub min_elements: usize,
    pub max_elements: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 64,
            seed: 0,
            image_h: 64,
            image_w: 96,
            camera_yaws_deg: vec![0.0, 90.0, -90.0, 180.0],
            camera_height: 4.0,
            camera_pitch_deg: 40.0,
            camera_hfov_deg: 90.0,
            x_min: -15.0,
            x_max: 15.0,
            y_min: -7.5,
            y_max: 7.5,
            bev_h: 100,
            bev_w: 50,
            half_width: 0.5,
            min_elements: 3,
            max_elements: 8,
        }
    }
}

impl SceneConfig {
    pub fn range(&self) -> BevRange {
        BevRange {
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
        }
    }

    pub fn grid(&self) -> Result<BevGrid> {
        BevGrid::new(self.range(), self.bev_h, self.bev_w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Config("scene.image_h and scene.image_w must be positive".into()));
        }
        if self.camera_yaws_deg.is_empty() {
            return Err(Error::Config("scene.camera_yaws_deg must list at least one camera".into()));
        }
        if self.min_elements > self.max_elements {
            return Err(Error::Config("scene.min_elements exceeds scene.max_elements".into()));
        }
        if !(self.half_width > 0.0) {
            return Err(Error::Config("scene.half_width must be positive".into()));
        }
        if !(self.camera_height > 0.0) || !(self.camera_hfov_deg > 0.0 && self.camera_hfov_deg < 180.0) {
            return Err(Error::Config("camera height and field of view must be positive".into()));
        }
        self.grid()?;
        Ok(())
    }

    pub fn rig(&self) -> Result<CameraRig> {
        let focal = self.image_w as f64 / 2.0 / libm::tan(self.camera_hfov_deg.to_radians() / 2.0);
        let cameras = self
            .camera_yaws_deg
            .iter()
            .map(|&yaw| {
                Camera::looking(
                    [0.0, 0.0, self.camera_height],
                    yaw.to_radians(),
                    self.camera_pitch_deg.to_radians(),
                    focal,
                    (self.image_h, self.image_w),
                )
            })
            .collect();
        let rig = CameraRig { cameras };
        rig.validate()?;
        Ok(rig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurroundFrame {
    pub images: Vec<RgbImage>,
    pub uv_masks: Vec<Mask>,
    pub bev_mask: Mask,
    pub elements: Vec<MapElement>,
    pub rig: CameraRig,
    pub bev_range: BevRange,
    pub seed: u64,
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    libm::sqrt(qx * qx + qy * qy)
}

/// Even-odd rule.
fn inside_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn distance_to_element(p: [f64; 2], e: &MapElement) -> f64 {
    e.segments()
        .map(|(a, b)| dist_to_segment(p, a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Foreground predicate shared by the BEV and UV targets: within
/// `half_width` of any element outline, or inside a closed element.
pub fn is_foreground(p: [f64; 2], elements: &[MapElement], half_width: f64) -> bool {
    elements
        .iter()
        .any(|e| (e.closed && inside_polygon(p, &e.points)) || distance_to_element(p, e) <= half_width)
}

/// Binary BEV target at the grid's cell centers.
pub fn rasterize_bev(elements: &[MapElement], grid: &BevGrid, half_width: f64) -> Result<Mask> {
    grid.validate()?;
    check_in_range(elements, &grid.range)?;
    let mut m = Mask::zeros(grid.h, grid.w);
    for r in 0..grid.h {
        for c in 0..grid.w {
            if is_foreground(grid.cell_center(r, c), elements, half_width) {
                m.data[r * grid.w + c] = 1;
            }
        }
    }
    Ok(m)
}

/// UV target: a pixel is foreground when its center's ground point is.
pub fn rasterize_uv(elements: &[MapElement], camera: &Camera, half_width: f64) -> Mask {
    let (h, w) = camera.image_size;
    let mut m = Mask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            if let Some(p) = camera.ground_hit(c as f64 + 0.5, r as f64 + 0.5) {
                if is_foreground(p, elements, half_width) {
                    m.data[r * w + c] = 1;
                }
            }
        }
    }
    m
}

const EDGE_MARGIN: f64 = 0.3;
const MIN_LATERAL_GAP: f64 = 1.5;
const DIVIDER_PAINT: f64 = 0.2;
const BOUNDARY_PAINT: f64 = 0.35;
const STRIPE_PERIOD: f64 = 1.0;

struct Layout<'a> {
    rng: ChaCha8Rng,
    range: &'a BevRange,
    lateral: Vec<f64>,
}

impl Layout<'_> {
    fn lateral_offset(&mut self, lo: f64, hi: f64) -> f64 {
        let mut y = self.rng.gen_range(lo..hi);
        for _ in 0..24 {
            if self.lateral.iter().all(|&o| (o - y).abs() >= MIN_LATERAL_GAP) {
                break;
            }
            y = self.rng.gen_range(lo..hi);
        }
        self.lateral.push(y);
        y
    }

    fn longitudinal(&mut self, cls: MapClass) -> MapElement {
        let r = self.range;
        let (ylo, yhi) = (r.y_min + EDGE_MARGIN, r.y_max - EDGE_MARGIN);
        let band = (yhi - ylo) * 0.5;
        let y0 = match cls {
            MapClass::Boundary => {
                // boundaries sit in the outer band on either side
                let side: bool = self.rng.gen();
                let off = self.rng.gen_range(0.55..0.95) * band;
                let mid = 0.5 * (ylo + yhi);
                let y = if side { mid + off } else { mid - off };
                self.lateral.push(y);
                y
            }
            _ => self.lateral_offset(ylo + 0.2 * band, yhi - 0.2 * band),
        };
        let (xlo, xhi) = (r.x_min + EDGE_MARGIN, r.x_max - EDGE_MARGIN);
        let (xa, xb) = if self.rng.gen_bool(0.6) {
            (xlo, xhi)
        } else {
            let len = self.rng.gen_range(0.4..0.8) * (xhi - xlo);
            let start = self.rng.gen_range(xlo..xhi - len);
            (start, start + len)
        };
        let mut curv = if self.rng.gen_bool(0.5) {
            0.0
        } else {
            let k = self.rng.gen_range(0.004..0.02);
            if self.rng.gen() {
                k
            } else {
                -k
            }
        };
        let xc = self.rng.gen_range(xa..xb);
        let n = (libm::ceil((xb - xa) / 2.0) as usize).max(2) + 1;
        let make = |k: f64| -> Vec<[f64; 2]> {
            (0..n)
                .map(|i| {
                    let x = xa + (xb - xa) * i as f64 / (n - 1) as f64;
                    [x, y0 + k * (x - xc) * (x - xc)]
                })
                .collect()
        };
        let mut pts = make(curv);
        while curv != 0.0 && pts.iter().any(|p| p[1] < ylo || p[1] > yhi) {
            curv *= 0.5;
            if curv.abs() < 1e-4 {
                curv = 0.0;
            }
            pts = make(curv);
        }
        MapElement {
            cls,
            points: pts,
            closed: false,
        }
    }

    fn crossing(&mut self) -> MapElement {
        let r = self.range;
        let depth = self.rng.gen_range(2.5..4.0);
        let xc = self.rng.gen_range(r.x_min + 2.5..r.x_max - 2.5);
        let width = self.rng.gen_range(0.4..0.85) * r.width_y();
        let yc = self.rng.gen_range(r.y_min + width / 2.0..r.y_max - width / 2.0);
        let (x0, x1) = (
            (xc - depth / 2.0).max(r.x_min + EDGE_MARGIN),
            (xc + depth / 2.0).min(r.x_max - EDGE_MARGIN),
        );
        let (y0, y1) = (
            (yc - width / 2.0).max(r.y_min + EDGE_MARGIN),
            (yc + width / 2.0).min(r.y_max - EDGE_MARGIN),
        );
        MapElement {
            cls: MapClass::PedCrossing,
            points: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            closed: true,
        }
    }
}

fn sample_elements(seed: u64, cfg: &SceneConfig) -> Vec<MapElement> {
    let range = cfg.range();
    let mut lay = Layout {
        rng: ChaCha8Rng::seed_from_u64(seed),
        range: &range,
        lateral: Vec::new(),
    };
    let n = lay.rng.gen_range(cfg.min_elements..=cfg.max_elements);
    let mut out = Vec::with_capacity(n);
    let mut crossings = 0;
    for _ in 0..n {
        let roll: f64 = lay.rng.gen();
        let e = if roll < 0.25 && crossings < 2 {
            crossings += 1;
            lay.crossing()
        } else if roll < 0.55 {
            lay.longitudinal(MapClass::Boundary)
        } else {
            lay.longitudinal(MapClass::Divider)
        };
        out.push(e);
    }
    out
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    h ^= (ix as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = h.rotate_left(27).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= (iy as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
    h ^= h >> 31;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn ground_color(p: [f64; 2], elements: &[MapElement], seed: u64) -> [f64; 3] {
    for e in elements.iter().filter(|e| e.closed) {
        if inside_polygon(p, &e.points) {
            let ymin = e.points.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
            let phase = (p[1] - ymin) / STRIPE_PERIOD;
            if phase - libm::floor(phase) < 0.5 {
                return [0.95, 0.95, 0.95];
            }
        }
    }
    for e in elements.iter().filter(|e| !e.closed) {
        let d = distance_to_element(p, e);
        match e.cls {
            MapClass::Boundary if d <= BOUNDARY_PAINT => return [0.9, 0.75, 0.25],
            MapClass::Divider if d <= DIVIDER_PAINT => return [0.97, 0.97, 0.9],
            _ => {}
        }
    }
    let t = hash2(libm::floor(p[0] / 0.5) as i64, libm::floor(p[1] / 0.5) as i64, seed);
    let g = 0.30 + 0.10 * t;
    [g, g, g + 0.02]
}

const SKY: [f64; 3] = [0.55, 0.7, 0.9];

fn render(camera: &Camera, elements: &[MapElement], seed: u64) -> RgbImage {
    let (h, w) = camera.image_size;
    let mut data = vec![0u8; 3 * h * w];
    const SUB: [f64; 2] = [0.25, 0.75];
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let col = match camera.ground_hit(c as f64 + sx, r as f64 + sy) {
                        Some(p) => ground_color(p, elements, seed),
                        None => SKY,
                    };
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                }
            }
            for (k, a) in acc.iter().enumerate() {
                let v = libm::round(a / 4.0 * 255.0).clamp(0.0, 255.0);
                data[(k * h + r) * w + c] = v as u8;
            }
        }
    }
    RgbImage { h, w, data }
}

/// Builds one frame. Identical `(seed, cfg)` always yields identical bytes.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SurroundFrame> {
    cfg.validate()?;
    let rig = cfg.rig()?;
    let grid = cfg.grid()?;
    let elements = sample_elements(seed, cfg);
    for e in &elements {
        e.validate(&grid.range)?;
    }
    let bev_mask = rasterize_bev(&elements, &grid, cfg.half_width)?;
    let images = rig.cameras.iter().map(|c| render(c, &elements, seed)).collect();
    let uv_masks = rig
        .cameras
        .iter()
        .map(|c| rasterize_uv(&elements, c, cfg.half_width))
        .collect();
    Ok(SurroundFrame {
        images,
        uv_masks,
        bev_mask,
        elements,
        rig,
        bev_range: grid.range,
        seed,
    })
}

/// Seed of frame `index` in a dataset seeded with `base`.
pub fn frame_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

pub fn generate_dataset(cfg: &SceneConfig) -> Result<Vec<SurroundFrame>> {
    (0..cfg.n_frames)
        .map(|i| generate_scene(frame_seed(cfg.seed, i), cfg))
        .collect()
}

fn mirror_camera(c: &Camera) -> Camera {
    // world mirror y -> -y, image mirror u -> w - u
    let mut out = c.clone();
    for i in 0..3 {
        out.extrinsics[i][1] = -out.extrinsics[i][1];
    }
    for j in 0..4 {
        out.extrinsics[0][j] = -out.extrinsics[0][j];
    }
    out
}

fn same_camera(a: &Camera, b: &Camera) -> bool {
    a.image_size == b.image_size
        && a.intrinsics
            .iter()
            .flatten()
            .zip(b.intrinsics.iter().flatten())
            .all(|(x, y)| (x - y).abs() < 1e-9)
        && a.extrinsics
            .iter()
            .flatten()
            .zip(b.extrinsics.iter().flatten())
            .all(|(x, y)| (x - y).abs() < 1e-9)
}

/// Left-right mirror of a whole frame (y -> -y). Requires a rig that maps
/// onto itself under the mirror with centered principal points; camera `k`
/// of the result shows the mirrored view of its mirror partner.
pub fn hflip(frame: &SurroundFrame) -> Result<SurroundFrame> {
    let cams = &frame.rig.cameras;
    let r = frame.bev_range;
    if (r.y_min + r.y_max).abs() > 1e-12 {
        return Err(Error::Config("horizontal flip needs a BEV range symmetric in y".into()));
    }
    let mut partner = Vec::with_capacity(cams.len());
    for c in cams {
        let (_, w) = c.image_size;
        if (c.intrinsics[0][2] - w as f64 / 2.0).abs() > 1e-12 || c.intrinsics[0][1] != 0.0 {
            return Err(Error::Config("horizontal flip needs centered principal points".into()));
        }
        let m = mirror_camera(c);
        match cams.iter().position(|o| same_camera(o, &m)) {
            Some(k) => partner.push(k),
            None => return Err(Error::Config("camera rig is not mirror-symmetric".into())),
        }
    }
    let flip_img = |img: &RgbImage| {
        let mut out = img.clone();
        for ch in 0..3 {
            for row in 0..img.h {
                for col in 0..img.w {
                    out.data[(ch * img.h + row) * img.w + col] = img.get(ch, row, img.w - 1 - col);
                }
            }
        }
        out
    };
    let flip_mask = |m: &Mask| {
        let mut out = m.clone();
        for row in 0..m.h {
            for col in 0..m.w {
                out.data[row * m.w + col] = m.get(row, m.w - 1 - col);
            }
        }
        out
    };
    let elements = frame
        .elements
        .iter()
        .map(|e| MapElement {
            cls: e.cls,
            points: e.points.iter().map(|p| [p[0], -p[1]]).collect(),
            closed: e.closed,
        })
        .collect();
    Ok(SurroundFrame {
        images: partner.iter().map(|&k| flip_img(&frame.images[k])).collect(),
        uv_masks: partner.iter().map(|&k| flip_mask(&frame.uv_masks[k])).collect(),
        bev_mask: flip_mask(&frame.bev_mask),
        elements,
        rig: frame.rig.clone(),
        bev_range: frame.bev_range,
        seed: frame.seed,
    })
}
