//! On-disk synthetic datasets.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/frame_00000/cam_0.png ... cam_{K-1}.png       RGB8 camera renders
//! <dir>/frame_00000/uv_mask_0.png ... uv_mask_{K-1}.png   8-bit gray, 0 or 255
//! <dir>/frame_00000/bev_mask.png                        8-bit gray, 0 or 255
//! ```
//!
//! The manifest holds the scene configuration, each frame's seed and vector
//! ground truth, and a CRC-32 of every file. Camera rigs and BEV ranges are
//! rebuilt from the scene configuration on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use segmap_core::scene::{Mask, MapElement, RgbImage, SceneConfig, SurroundFrame};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub dir: String,
    pub seed: u64,
    pub elements: Vec<MapElement>,
    /// File name to CRC-32.
    pub files: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub scene: SceneConfig,
    pub frames: Vec<FrameEntry>,
}

fn encode_png(w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().expect("in-memory PNG header");
        wr.write_image_data(data).expect("in-memory PNG data");
    }
    out
}

pub fn rgb_png(im: &RgbImage) -> Vec<u8> {
    let n = im.h * im.w;
    let mut hwc = Vec::with_capacity(n * 3);
    for i in 0..n {
        for ch in 0..3 {
            hwc.push(im.data[ch * n + i]);
        }
    }
    encode_png(im.w, im.h, png::ColorType::Rgb, &hwc)
}

pub fn mask_png(m: &Mask) -> Vec<u8> {
    let d: Vec<u8> = m.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode_png(m.w, m.h, png::ColorType::Grayscale, &d)
}

/// Decodes an 8-bit PNG into `(width, height, channels, bytes)`.
fn decode_png(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(bytes);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, format!("bad PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("bad PNG: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit PNG"));
    }
    let ch = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, ch, buf))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<u32> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(crc32fast::hash(bytes))
}

pub fn frame_dir(i: usize) -> String {
    format!("frame_{i:05}")
}

/// Writes `frames` under `dir` (created if missing).
pub fn save_dataset(dir: &Path, scene: &SceneConfig, frames: &[SurroundFrame]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = frame_dir(i);
        let fdir = dir.join(&name);
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        let mut files = BTreeMap::new();
        for (k, im) in f.images.iter().enumerate() {
            let file = format!("cam_{k}.png");
            files.insert(file.clone(), write_file(&fdir.join(&file), &rgb_png(im))?);
        }
        for (k, m) in f.uv_masks.iter().enumerate() {
            let file = format!("uv_mask_{k}.png");
            files.insert(file.clone(), write_file(&fdir.join(&file), &mask_png(m))?);
        }
        files.insert(
            "bev_mask.png".into(),
            write_file(&fdir.join("bev_mask.png"), &mask_png(&f.bev_mask))?,
        );
        entries.push(FrameEntry {
            dir: name,
            seed: f.seed,
            elements: f.elements.clone(),
            files,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        scene: scene.clone(),
        frames: entries,
    };
    let mpath = dir.join(MANIFEST);
    let file = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest).map_err(|e| Error::format(&mpath, e.to_string()))?;
    Ok(manifest)
}

fn read_checked(path: &Path, crc: u32) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let got = crc32fast::hash(&bytes);
    if got != crc {
        return Err(Error::format(
            path,
            format!("checksum mismatch (manifest {crc:08x}, file {got:08x})"),
        ));
    }
    Ok(bytes)
}

fn load_mask(path: &Path, crc: u32, h: usize, w: usize) -> Result<Mask> {
    let (pw, ph, ch, data) = decode_png(path, &read_checked(path, crc)?)?;
    if (ph, pw, ch) != (h, w, 1) {
        return Err(Error::format(
            path,
            format!("expected {h}x{w} grayscale mask, found {ph}x{pw} with {ch} channels"),
        ));
    }
    Ok(Mask {
        h,
        w,
        data: data.iter().map(|&v| u8::from(v >= 128)).collect(),
    })
}

fn load_rgb(path: &Path, crc: u32, h: usize, w: usize) -> Result<RgbImage> {
    let (pw, ph, ch, data) = decode_png(path, &read_checked(path, crc)?)?;
    if (ph, pw, ch) != (h, w, 3) {
        return Err(Error::format(
            path,
            format!("expected {h}x{w} RGB image, found {ph}x{pw} with {ch} channels"),
        ));
    }
    let n = h * w;
    let mut planar = vec![0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            planar[c * n + i] = data[i * 3 + c];
        }
    }
    Ok(RgbImage { h, w, data: planar })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported format version {}", m.format_version),
        ));
    }
    Ok(m)
}

/// Loads and verifies every frame listed in the manifest.
pub fn load_dataset(dir: &Path) -> Result<(SceneConfig, Vec<SurroundFrame>)> {
    let m = read_manifest(dir)?;
    let scene = m.scene;
    scene.validate()?;
    let rig = scene.rig()?;
    let (h, w) = (scene.image_h, scene.image_w);
    let mut frames = Vec::with_capacity(m.frames.len());
    for e in &m.frames {
        let fdir = dir.join(&e.dir);
        let crc = |name: &str| -> Result<u32> {
            e.files
                .get(name)
                .copied()
                .ok_or_else(|| Error::format(&fdir.join(name), "file not listed in manifest"))
        };
        let mut images = Vec::with_capacity(rig.cameras.len());
        let mut uv_masks = Vec::with_capacity(rig.cameras.len());
        for k in 0..rig.cameras.len() {
            let f = format!("cam_{k}.png");
            images.push(load_rgb(&fdir.join(&f), crc(&f)?, h, w)?);
            let f = format!("uv_mask_{k}.png");
            uv_masks.push(load_mask(&fdir.join(&f), crc(&f)?, h, w)?);
        }
        let bev_mask = load_mask(&fdir.join("bev_mask.png"), crc("bev_mask.png")?, scene.bev_h, scene.bev_w)?;
        frames.push(SurroundFrame {
            images,
            uv_masks,
            bev_mask,
            elements: e.elements.clone(),
            rig: rig.clone(),
            bev_range: scene.range(),
            seed: e.seed,
        });
    }
    Ok((scene, frames))
}
