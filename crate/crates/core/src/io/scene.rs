use std::fs;
use std::path::{Path, PathBuf};

use fwd_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use super::codec::{read_mask_png, read_pfm, read_rgb_png, write_mask_png, write_pfm, write_rgb_png};
use crate::error::{FwdError, Result};
use crate::geometry::{Intrinsics, Pose};

pub const CONVENTION: &str = "camera_from_world";

/// One posed input view held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` sensor depth in meters, 0 where missing.
    pub depth: Option<Tensor>,
    /// Row-major validity of `depth`.
    pub mask: Option<Vec<bool>>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl View {
    /// Validity mask, derived as `depth > 0` when none was stored.
    pub fn valid_mask(&self) -> Option<Vec<bool>> {
        match (&self.mask, &self.depth) {
            (Some(m), _) => Some(m.clone()),
            (None, Some(d)) => Some(d.data().iter().map(|&v| v > 0.0).collect()),
            (None, None) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub name: String,
    pub views: Vec<View>,
}

impl SceneBundle {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn intrinsics(&self) -> Option<Intrinsics> {
        self.views.first().map(|v| v.intrinsics)
    }

    pub fn has_depth(&self) -> bool {
        self.views.iter().all(|v| v.depth.is_some())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub rotation: [Real; 9],
    #[serde(rename = "T")]
    pub translation: [Real; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub convention: String,
    pub views: Vec<ViewEntry>,
}

fn manifest_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| FwdError::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| {
        FwdError::format(manifest_name(path), format!("line {}", e.line()), e.to_string())
    })?;
    if m.convention != CONVENTION {
        return Err(FwdError::format(
            manifest_name(path),
            "convention",
            format!("expected \"{CONVENTION}\", got \"{}\"", m.convention),
        ));
    }
    Ok(m)
}

pub fn entry_pose(entry: &ViewEntry, file: &str, index: usize) -> Result<Pose> {
    Pose::from_row_major(&entry.rotation, &entry.translation)
        .map_err(|e| {
            let msg = match e {
                FwdError::Domain(m) => m,
                other => other.to_string(),
            };
            FwdError::format(file, format!("views[{index}].R"), msg)
        })
}

/// Reads a manifest and decodes every referenced file.
pub fn load_scene(manifest_path: &Path) -> Result<SceneBundle> {
    let m = read_manifest(manifest_path)?;
    let file = manifest_name(manifest_path);
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if m.views.is_empty() {
        return Err(FwdError::format(file, "views", "no views listed"));
    }
    let (w0, h0) = (m.views[0].width, m.views[0].height);
    let mut views = Vec::with_capacity(m.views.len());
    for (i, e) in m.views.iter().enumerate() {
        if (e.width, e.height) != (w0, h0) {
            return Err(FwdError::format(&file, format!("views[{i}].width"), "resolution differs from views[0]"));
        }
        let intrinsics = Intrinsics::new(e.fx, e.fy, e.cx, e.cy, e.width, e.height)
            .map_err(|err| FwdError::format(&file, format!("views[{i}].fx"), err.to_string()))?;
        let pose = entry_pose(e, &file, i)?;
        let image = read_rgb_png(&base.join(&e.image))?;
        check_size(&image, e, &file, i, "image")?;
        let depth = e.depth.as_ref().map(|d| read_pfm(&base.join(d))).transpose()?;
        if let Some(d) = &depth {
            check_size(d, e, &file, i, "depth")?;
        }
        let mask = e.mask.as_ref().map(|p| read_mask_png(&base.join(p))).transpose()?;
        if let Some((mw, mh, _)) = &mask {
            if (*mw, *mh) != (e.width, e.height) {
                return Err(FwdError::format(&file, format!("views[{i}].mask"), "size differs from manifest"));
            }
        }
        views.push(View {
            image,
            depth,
            mask: mask.map(|m| m.2),
            intrinsics,
            pose,
        });
    }
    Ok(SceneBundle { name: m.name, views })
}

fn check_size(t: &Tensor, e: &ViewEntry, file: &str, i: usize, field: &str) -> Result<()> {
    if t.shape()[0] != e.height || t.shape()[1] != e.width {
        return Err(FwdError::format(
            file,
            format!("views[{i}].{field}"),
            format!("{:?} does not match manifest {}×{}", t.shape(), e.height, e.width),
        ));
    }
    Ok(())
}

/// Writes images, depth maps, masks and `manifest.json` into `dir`.
pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| FwdError::io(dir, e))?;
    let mut entries = Vec::with_capacity(bundle.len());
    for (i, v) in bundle.views.iter().enumerate() {
        let image = format!("rgb_{i:03}.png");
        write_rgb_png(&dir.join(&image), &v.image)?;
        let depth = match &v.depth {
            Some(d) => {
                let name = format!("depth_{i:03}.pfm");
                write_pfm(&dir.join(&name), d)?;
                Some(name)
            }
            None => None,
        };
        let mask = match &v.mask {
            Some(m) => {
                let name = format!("mask_{i:03}.png");
                write_mask_png(&dir.join(&name), v.intrinsics.width, v.intrinsics.height, m)?;
                Some(name)
            }
            None => None,
        };
        let k = &v.intrinsics;
        entries.push(ViewEntry {
            image,
            depth,
            mask,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: v.pose.rotation_row_major(),
            translation: v.pose.translation_array(),
        });
    }
    let m = Manifest {
        name: bundle.name.clone(),
        convention: CONVENTION.into(),
        views: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| FwdError::io(&path, e))?;
    Ok(path)
}
