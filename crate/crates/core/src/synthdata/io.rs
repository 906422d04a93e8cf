//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.csv            index,split,label_kind,image,semantic,instances
//! <dir>/images/<index>.ppm      binary P6, 8-bit RGB
//! <dir>/masks/<index>_semantic.pgm   binary P5, class id per pixel
//! <dir>/masks/<index>_inst<k>.pgm    binary P5, 0 or 255
//! <dir>/labels.jsonl            one object per scene
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_labels, BoundingBox, Instance, Mask, Scene};
use crate::error::{Error, Result};

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != magic {
        return Err(format_err(path, format!("expected {magic}, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field `{s}`")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, "only 8-bit images are supported"));
    }
    let body = raw.get(pos..).unwrap_or_default();
    if body.len() != w * h * channels {
        return Err(format_err(path, format!("expected {} data bytes, found {}", w * h * channels, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_netpbm(path, "P6", width, height, rgb)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6", 3)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_netpbm(path, "P5", width, height, gray)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: u64,
    pub split: String,
    pub label_kind: String,
    pub image: String,
    pub semantic: String,
    /// Instance mask paths joined with `;`.
    pub instances: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub index: u64,
    pub split: String,
    pub instance_classes: Vec<usize>,
    pub classes: Vec<usize>,
    pub counts: BTreeMap<usize, usize>,
    pub boxes: Vec<BoundingBox>,
    /// Per-instance confidence, present for pseudo-labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
}

/// A scene tagged with the split it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredScene {
    pub scene: Scene,
    pub split: String,
    pub label_kind: String,
    pub confidences: Option<Vec<f64>>,
}

impl StoredScene {
    pub fn new(scene: Scene, split: &str, label_kind: &str) -> Self {
        StoredScene {
            scene,
            split: split.to_string(),
            label_kind: label_kind.to_string(),
            confidences: None,
        }
    }
}

pub fn write_dataset(dir: &Path, scenes: &[StoredScene]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv")).map_err(|e| csv_err(dir, e))?;
    let mut labels = BufWriter::new(File::create(dir.join("labels.jsonl"))?);

    for stored in scenes {
        let s = &stored.scene;
        let image = format!("images/{:08}.ppm", s.index);
        write_ppm(&dir.join(&image), s.width, s.height, &s.image)?;
        let semantic = format!("masks/{:08}_semantic.pgm", s.index);
        write_pgm(&dir.join(&semantic), s.width, s.height, &s.semantic)?;
        let mut inst_paths = Vec::with_capacity(s.instances.len());
        for (k, inst) in s.instances.iter().enumerate() {
            let p = format!("masks/{:08}_inst{k}.pgm", s.index);
            let bytes: Vec<u8> = inst.mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
            write_pgm(&dir.join(&p), s.width, s.height, &bytes)?;
            inst_paths.push(p);
        }
        manifest
            .serialize(ManifestRow {
                index: s.index,
                split: stored.split.clone(),
                label_kind: stored.label_kind.clone(),
                image,
                semantic,
                instances: inst_paths.join(";"),
            })
            .map_err(|e| csv_err(dir, e))?;

        let l = derive_labels(s);
        let record = LabelRecord {
            index: s.index,
            split: stored.split.clone(),
            instance_classes: s.instances.iter().map(|i| i.class_id).collect(),
            classes: l.image_level.iter().copied().collect(),
            counts: l.counts,
            boxes: l.boxes,
            confidences: stored.confidences.clone(),
        };
        serde_json::to_writer(&mut labels, &record)?;
        labels.write_all(b"\n")?;
    }
    manifest.flush()?;
    labels.flush()?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    format_err(path, e.to_string())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(&path, e)))
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Vec<StoredScene>> {
    let rows = read_manifest(dir)?;
    let labels_path = dir.join("labels.jsonl");
    let mut records: BTreeMap<u64, LabelRecord> = BTreeMap::new();
    for line in BufReader::new(File::open(&labels_path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LabelRecord = serde_json::from_str(&line)?;
        records.insert(r.index, r);
    }

    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let record = records
            .get(&row.index)
            .ok_or_else(|| format_err(&labels_path, format!("no labels for scene {}", row.index)))?;
        let img_path: PathBuf = dir.join(&row.image);
        let (w, h, image) = read_ppm(&img_path)?;
        let (_, _, semantic) = read_pgm(&dir.join(&row.semantic))?;
        let paths: Vec<&str> = row.instances.split(';').filter(|p| !p.is_empty()).collect();
        if paths.len() != record.instance_classes.len() {
            return Err(format_err(&labels_path, format!("instance count mismatch for scene {}", row.index)));
        }
        let mut instances = Vec::with_capacity(paths.len());
        for (p, &class_id) in paths.iter().zip(&record.instance_classes) {
            let (mw, mh, bytes) = read_pgm(&dir.join(p))?;
            if (mw, mh) != (w, h) {
                return Err(format_err(&dir.join(p), "mask size differs from image"));
            }
            instances.push(Instance {
                class_id,
                mask: Mask {
                    height: h,
                    width: w,
                    data: bytes.iter().map(|&b| (b != 0) as u8).collect(),
                },
            });
        }
        out.push(StoredScene {
            scene: Scene {
                index: row.index,
                height: h,
                width: w,
                image,
                instances,
                semantic,
            },
            split: row.split,
            label_kind: row.label_kind,
            confidences: record.confidences.clone(),
        });
    }
    Ok(out)
}
