use std::fs;
use std::io::Write;
use std::path::Path;

use super::{quantize, Image, Record};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let plane = img.height * img.width;
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push((quantize(img.data[c * plane + i] as f64) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format("ppm", format!("{}: {detail}", path.display())),
        other => other,
    })
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    // header: magic, width, height, maxval, each separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    if fields[0] != "P6" {
        return Err(Error::format("ppm", format!("expected P6, found `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("ppm", format!("bad header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::format("ppm", format!("maxval {max} is not 255")));
    }
    let plane = w * h;
    let raster = bytes.get(pos..pos + 3 * plane).ok_or_else(|| Error::format("ppm", "truncated raster"))?;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raster[3 * i + c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Tab-separated rows: `path id camera black left top right bottom split`.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let b = r.bbox;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.path, r.id, r.camera, r.black as u8, b[0], b[1], b[2], b[3], r.split
        )
        .expect("writing to a Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| parse_row(line).map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1))))
        .collect()
}

fn parse_row(line: &str) -> std::result::Result<Record, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 9 {
        return Err(format!("expected 9 fields, found {}", f.len()));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("bad number `{}`", f[i]));
    let bbox = [num(4)?, num(5)?, num(6)?, num(7)?];
    if bbox[0] > bbox[2] || bbox[1] > bbox[3] || bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!("malformed box {bbox:?}"));
    }
    Ok(Record {
        path: f[0].to_string(),
        id: f[1].parse().map_err(|_| format!("bad id `{}`", f[1]))?,
        camera: f[2].parse().map_err(|_| format!("bad camera `{}`", f[2]))?,
        black: match f[3] {
            "0" => false,
            "1" => true,
            other => return Err(format!("bad black flag `{other}`")),
        },
        bbox,
        split: f[8].parse().map_err(|e: Error| e.to_string())?,
    })
}
