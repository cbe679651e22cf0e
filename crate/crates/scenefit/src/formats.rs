//! File formats: PPM/PGM/PFM images, flat key-value configs, pose tables,
//! and the FNV digest used to freeze fixtures.
//!
//! Config files are deliberately plain `key = value` lines (`#` comments,
//! repeated keys allowed) so any language can parse them without a library.
//! PFM is written little-endian (negative scale) with the customary
//! bottom-to-top row order. A mask *bundle* is K consecutive binary PGM (P5)
//! pages in a single file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::field::{DepthMap, Image};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::masks::MaskStack;
use crate::scene::{ObjectConfig, SceneConfig, SyntheticScene, TextureDetail, TextureStyle};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Checksums

/// FNV-1a over raw bytes; stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Key-value config files

/// Ordered `key = value` pairs from a flat config file.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    pairs: Vec<(String, String)>,
    path: String,
}

impl KvFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(KvFile {
            pairs,
            path: path.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        KvFile::parse(&text, &path.display().to_string())
    }

    fn missing(&self, key: &str) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("missing key `{key}`"),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| self.missing(key))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?.parse::<f64>().map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("key `{key}`: {e}"),
        })
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?.parse::<usize>().map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("key `{key}`: {e}"),
        })
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        self.require(key)?.parse::<u64>().map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("key `{key}`: {e}"),
        })
    }

    pub fn require_f64_list(&self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        let values: std::result::Result<Vec<f64>, _> =
            raw.split_whitespace().map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("key `{key}`: {e}"),
        })?;
        if values.len() != expected {
            return Err(Error::Parse {
                path: self.path.clone(),
                line: 0,
                msg: format!("key `{key}`: expected {expected} numbers, got {}", values.len()),
            });
        }
        Ok(values)
    }
}

// ---------------------------------------------------------------------------
// Scene configs

fn transform_to_kv(t: &RigidTransform<f64>) -> String {
    format!(
        "{} {} {} {} {} {}",
        t.axis_angle[0], t.axis_angle[1], t.axis_angle[2], t.translation[0], t.translation[1], t.translation[2]
    )
}

fn transform_from_list(v: &[f64]) -> RigidTransform<f64> {
    RigidTransform::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
}

/// Serializes a scene config to the flat key-value schema (see
/// `read_scene_config` for the key list).
pub fn write_scene_config(cfg: &SceneConfig) -> String {
    let mut out = String::new();
    out.push_str("# scene configuration\n");
    out.push_str(&format!("width = {}\n", cfg.width));
    out.push_str(&format!("height = {}\n", cfg.height));
    out.push_str(&format!("fx = {}\n", cfg.intrinsics.fx));
    out.push_str(&format!("fy = {}\n", cfg.intrinsics.fy));
    out.push_str(&format!("cx = {}\n", cfg.intrinsics.cx));
    out.push_str(&format!("cy = {}\n", cfg.intrinsics.cy));
    out.push_str(&format!("background_depth = {}\n", cfg.background_depth));
    out.push_str(&format!("texture_seed = {}\n", cfg.texture_seed));
    out.push_str(&format!("texture_style = {}\n", cfg.texture_style.as_str()));
    out.push_str(&format!("texture_lattice = {}\n", cfg.texture_detail.lattice));
    out.push_str(&format!("texture_blurs = {}\n", cfg.texture_detail.blurs));
    out.push_str(&format!("texture_contrast = {}\n", cfg.texture_detail.contrast));
    out.push_str(&format!("ego_to_prev = {}\n", transform_to_kv(&cfg.ego_to_prev)));
    out.push_str(&format!("ego_to_next = {}\n", transform_to_kv(&cfg.ego_to_next)));
    out.push_str(&format!("object_count = {}\n", cfg.objects.len()));
    for (j, obj) in cfg.objects.iter().enumerate() {
        out.push_str(&format!(
            "object{j}_rect = {} {} {} {}\n",
            obj.rect[0], obj.rect[1], obj.rect[2], obj.rect[3]
        ));
        out.push_str(&format!("object{j}_depth = {}\n", obj.depth));
        out.push_str(&format!(
            "object{j}_motion = {} {} {}\n",
            obj.motion[0], obj.motion[1], obj.motion[2]
        ));
    }
    out
}

/// Keys: `width height fx fy cx cy background_depth texture_seed
/// texture_style ego_to_prev ego_to_next object_count`, then per object
/// `objectN_rect` (u0 v0 u1 v1), `objectN_depth`, `objectN_motion` (world
/// displacement per frame). Transforms are six numbers: axis-angle then
/// translation, mapping target-frame points into the source frame.
pub fn read_scene_config(path: &Path) -> Result<SceneConfig> {
    let kv = KvFile::load(path)?;
    let width = kv.require_usize("width")?;
    let height = kv.require_usize("height")?;
    let intrinsics = CameraIntrinsics::new(
        kv.require_f64("fx")?,
        kv.require_f64("fy")?,
        kv.require_f64("cx")?,
        kv.require_f64("cy")?,
    )?;
    let n_objects = kv.require_usize("object_count")?;
    let mut objects = Vec::with_capacity(n_objects);
    for j in 0..n_objects {
        let rect = kv.require_f64_list(&format!("object{j}_rect"), 4)?;
        let motion = kv.require_f64_list(&format!("object{j}_motion"), 3)?;
        objects.push(ObjectConfig {
            rect: [rect[0], rect[1], rect[2], rect[3]],
            depth: kv.require_f64(&format!("object{j}_depth"))?,
            motion: [motion[0], motion[1], motion[2]],
        });
    }
    let cfg = SceneConfig {
        width,
        height,
        intrinsics,
        background_depth: kv.require_f64("background_depth")?,
        ego_to_prev: transform_from_list(&kv.require_f64_list("ego_to_prev", 6)?),
        ego_to_next: transform_from_list(&kv.require_f64_list("ego_to_next", 6)?),
        objects,
        texture_seed: kv.require_u64("texture_seed")?,
        texture_style: TextureStyle::parse(kv.require("texture_style")?)?,
        texture_detail: {
            let default = TextureDetail::default();
            TextureDetail {
                lattice: match kv.get("texture_lattice") {
                    None => default.lattice,
                    Some(_) => kv.require_usize("texture_lattice")?,
                },
                blurs: match kv.get("texture_blurs") {
                    None => default.blurs,
                    Some(_) => kv.require_usize("texture_blurs")?,
                },
                contrast: match kv.get("texture_contrast") {
                    None => default.contrast,
                    Some(_) => kv.require_f64("texture_contrast")?,
                },
            }
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// PPM / PGM / PFM

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary 8-bit PPM (P6). Grayscale images are replicated across RGB.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.width() * img.height() * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.channels() == 3 {
                for c in 0..3 {
                    out.push(quantize(img.get(x, y, c)));
                }
            } else {
                let v = quantize(img.get(x, y, 0));
                out.extend_from_slice(&[v, v, v]);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // Returns (width, height, offset of pixel data).
    let mut fields = Vec::new();
    let mut i = magic.len();
    if &bytes[..magic.len()] != magic.as_bytes() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected {magic} header"),
        });
    }
    while fields.len() < 3 && i < bytes.len() {
        while i < bytes.len() && (bytes[i] as char).is_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !(bytes[i] as char).is_whitespace() {
            i += 1;
        }
        let token = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "invalid header token".into(),
        })?;
        fields.push(token.parse::<usize>().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("header field: {e}"),
        })?);
    }
    if fields.len() != 3 || fields[2] != 255 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "unsupported PNM header".into(),
        });
    }
    Ok((fields[0], fields[1], i + 1))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let (w, h, offset) = parse_pnm_header(&bytes, "P6", path)?;
    let need = w * h * 3;
    if bytes.len() < offset + need {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "truncated PPM".into(),
        });
    }
    let data: Vec<f64> = bytes[offset..offset + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(w, h, 3, data)
}

/// PFM (`Pf` grayscale), little-endian, rows bottom-to-top.
pub fn write_pfm_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", depth.width(), depth.height()).as_bytes());
    for y in (0..depth.height()).rev() {
        for x in 0..depth.width() {
            out.extend_from_slice(&(depth.get(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Color PFM (`PF`) from an image; grayscale inputs are replicated.
pub fn write_pfm_image(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", img.width(), img.height()).as_bytes());
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for c in 0..3 {
                let v = img.get(x, y, c.min(img.channels() - 1)) as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a grayscale PFM back into 32-bit floats (top-to-bottom order).
pub fn read_pfm_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    let text_end = {
        // Header: magic, dims, scale on three whitespace-separated fields.
        let mut seen = 0;
        let mut i = 0;
        while seen < 3 && i < bytes.len() {
            if bytes[i] == b'\n' {
                seen += 1;
            }
            i += 1;
        }
        i
    };
    let header = std::str::from_utf8(&bytes[..text_end]).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "invalid PFM header".into(),
    })?;
    let mut fields = header.split_whitespace();
    let magic = fields.next().unwrap_or("");
    if magic != "Pf" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected Pf, got {magic}"),
        });
    }
    let w: usize = fields.next().unwrap_or("0").parse().unwrap_or(0);
    let h: usize = fields.next().unwrap_or("0").parse().unwrap_or(0);
    let scale: f64 = fields.next().unwrap_or("0").parse().unwrap_or(0.0);
    if w == 0 || h == 0 || scale >= 0.0 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "unsupported PFM header".into(),
        });
    }
    let need = w * h * 4;
    if bytes.len() < text_end + need {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "truncated PFM".into(),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(h);
    let mut cursor = text_end;
    for _ in 0..h {
        let mut row = Vec::with_capacity(w);
        for _ in 0..w {
            let v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            row.push(v as f64);
            cursor += 4;
        }
        rows.push(row);
    }
    rows.reverse();
    DepthMap::new(w, h, rows.into_iter().flatten().collect())
}

/// K consecutive P5 pages, one per mask channel.
pub fn write_mask_bundle(masks: &MaskStack<f64>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for i in 0..masks.k {
        out.extend_from_slice(format!("P5\n{} {}\n255\n", masks.width, masks.height).as_bytes());
        for px in 0..masks.width * masks.height {
            out.push(quantize(masks.data[px * masks.k + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a mask bundle back. Quantization breaks the exact sum-to-one
/// invariant, so pixels are renormalized; this path feeds visualization only.
pub fn read_mask_bundle(path: &Path) -> Result<MaskStack<f64>> {
    let bytes = fs::read(path)?;
    let mut pages: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (w, h, data_start) = parse_pnm_header(&bytes[offset..], "P5", path)?;
        let need = w * h;
        let start = offset + data_start;
        if bytes.len() < start + need {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "truncated mask bundle".into(),
            });
        }
        let data: Vec<f64> = bytes[start..start + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        pages.push((w, h, data));
        offset = start + need;
    }
    if pages.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "empty mask bundle".into(),
        });
    }
    let (w, h, _) = pages[0];
    if pages.iter().any(|(pw, ph, _)| *pw != w || *ph != h) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "mask bundle pages disagree on size".into(),
        });
    }
    let k = pages.len();
    let mut data = vec![0.0; w * h * k];
    for (i, (_, _, page)) in pages.iter().enumerate() {
        for (px, v) in page.iter().enumerate() {
            data[px * k + i] = *v;
        }
    }
    for px in data.chunks_exact_mut(k) {
        let sum: f64 = px.iter().sum();
        if sum > 0.0 {
            for v in px.iter_mut() {
                *v /= sum;
            }
        } else {
            for v in px.iter_mut() {
                *v = 1.0 / k as f64;
            }
        }
    }
    Ok(MaskStack {
        width: w,
        height: h,
        k,
        data,
    })
}

// ---------------------------------------------------------------------------
// Pose tables

pub fn write_poses(poses: &[(&str, &crate::masks::TransformSet<f64>)], path: &Path) -> Result<()> {
    let mut out = String::from("# source component ax ay az tx ty tz\n");
    for (name, set) in poses {
        for (i, t) in set.0.iter().enumerate() {
            out.push_str(&format!("{name} {i} {}\n", transform_to_kv(t)));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Scene export

/// Writes the frame triplet, ground truth, config, and a checksum manifest.
pub fn export_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_ppm(&scene.prev, &dir.join("prev.ppm"))?;
    write_ppm(&scene.target, &dir.join("target.ppm"))?;
    write_ppm(&scene.next, &dir.join("next.ppm"))?;
    write_pfm_image(&scene.prev, &dir.join("prev.pfm"))?;
    write_pfm_image(&scene.target, &dir.join("target.pfm"))?;
    write_pfm_image(&scene.next, &dir.join("next.pfm"))?;
    write_pfm_depth(&scene.gt_depth, &dir.join("gt_depth.pfm"))?;
    write_mask_bundle(&scene.gt_masks, &dir.join("gt_masks.pgm"))?;
    write_poses(
        &[
            ("prev", &scene.gt_transforms[0]),
            ("next", &scene.gt_transforms[1]),
        ],
        &dir.join("gt_poses.txt"),
    )?;
    fs::write(dir.join("config.scene"), write_scene_config(&scene.meta.config))?;

    let mut manifest = String::from("# file fnv1a64\n");
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.txt")
        .collect();
    names.sort();
    for name in names {
        let mut bytes = Vec::new();
        fs::File::open(dir.join(&name))?.read_to_end(&mut bytes)?;
        manifest.push_str(&format!("{name} {:016x}\n", fnv1a64(&bytes)));
    }
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}
