//! Dataset container: `manifest.json` plus `img/<id>.pgm` (8-bit image,
//! divided by 255 on read) and `lbl/<id>.pgm` (raw class indices 0..=3).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{quantize, CorruptionKind, Sample};
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub label: String,
    pub bbox: [usize; 4],
    pub severity: f64,
    pub domain: String,
    pub corruption: String,
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary (P5) 8-bit PGM. Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let bad = |detail: &str| Error::Format {
        what: format!("PGM {}", path.display()),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary P5 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    pos += 1;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, body.to_vec()))
}

/// Writes `samples` under `dir`. Images are quantized to 8 bits.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("img"))?;
    fs::create_dir_all(dir.join("lbl"))?;
    let mut manifest = Vec::with_capacity(samples.len());
    for s in samples {
        s.labels.validate(&s.sample_id)?;
        let image = format!("img/{}.pgm", s.sample_id);
        let label = format!("lbl/{}.pgm", s.sample_id);
        let pixels: Vec<u8> = s.image.data().iter().map(|&v| quantize(v)).collect();
        write_pgm(&dir.join(&image), s.width(), s.height(), &pixels)?;
        write_pgm(&dir.join(&label), s.width(), s.height(), &s.labels.data)?;
        manifest.push(ManifestRecord {
            id: s.sample_id.clone(),
            image,
            label,
            bbox: s.gt_bbox.as_array(),
            severity: s.severity,
            domain: s.domain_id.clone(),
            corruption: s.corruption.map_or("none", |k| k.as_str()).to_string(),
        });
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: format!("manifest {}", path.display()),
        detail: e.to_string(),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?.iter().map(|r| read_record(dir, r)).collect()
}

fn read_record(dir: &Path, r: &ManifestRecord) -> Result<Sample> {
    let ds_err = |detail: String| Error::Dataset {
        sample_id: r.id.clone(),
        detail,
    };
    let open = |rel: &str| -> Result<(usize, usize, Vec<u8>)> {
        let p: PathBuf = dir.join(rel);
        read_pgm(&p).map_err(|e| match e {
            Error::MissingFile(p) => ds_err(format!("missing file {}", p.display())),
            other => other,
        })
    };
    let (w, h, img) = open(&r.image)?;
    let (lw, lh, lbl) = open(&r.label)?;
    if (w, h) != (lw, lh) {
        return Err(ds_err(format!("image is {}x{} but labels are {}x{}", w, h, lw, lh)));
    }
    let labels = LabelMap::new(h, w, lbl)?;
    labels.validate(&r.id)?;
    let [l, t, bh, bw] = r.bbox;
    let gt_bbox = BBox::new(l, t, bh, bw);
    if !gt_bbox.within(h, w) {
        return Err(ds_err(format!("bbox {:?} outside the {}x{} frame", r.bbox, h, w)));
    }
    let corruption = match r.corruption.as_str() {
        "none" => None,
        k => Some(k.parse::<CorruptionKind>().map_err(|e| ds_err(e.to_string()))?),
    };
    if !(0.0..=1.0).contains(&r.severity) {
        return Err(ds_err(format!("severity {} outside [0, 1]", r.severity)));
    }
    Ok(Sample {
        sample_id: r.id.clone(),
        image: Tensor::new(vec![h, w], img.iter().map(|&v| v as f64 / 255.0).collect())?,
        labels,
        gt_bbox,
        severity: r.severity,
        corruption,
        domain_id: r.domain.clone(),
    })
}
