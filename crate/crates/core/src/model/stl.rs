//! STL reader (binary and ASCII) and writer.
//!
//! Coordinates are single precision in both encodings; ASCII values are
//! parsed as `f32` so that the two encodings of one solid load identically.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelError, TriMesh};
use crate::geom::Point3;

/// Vertices closer than this are merged.
const WELD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StlEncoding {
    Ascii,
    Binary,
}

pub fn load_stl(path: impl AsRef<Path>) -> Result<TriMesh, ModelError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ModelError::MissingMesh(path.to_path_buf()));
    }
    read_stl(&fs::read(path)?)
}

pub fn read_stl(bytes: &[u8]) -> Result<TriMesh, ModelError> {
    let binary_len = |n: usize| 84 + 50 * n;
    if bytes.len() >= 84 {
        let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
        if bytes.len() == binary_len(n) {
            return read_binary(bytes, n);
        }
    }
    let looks_ascii = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .is_some_and(|i| bytes[i..].starts_with(b"solid"));
    if looks_ascii && std::str::from_utf8(bytes).is_ok() {
        return read_ascii(std::str::from_utf8(bytes).unwrap());
    }
    if bytes.len() < 84 {
        return Err(ModelError::MalformedStl(format!(
            "{} bytes is shorter than a binary STL header",
            bytes.len()
        )));
    }
    let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
    Err(ModelError::MalformedStl(format!(
        "binary STL declares {n} triangles ({} bytes) but has {} bytes",
        binary_len(n),
        bytes.len()
    )))
}

fn read_binary(bytes: &[u8], n: usize) -> Result<TriMesh, ModelError> {
    let mut welder = Welder::default();
    let mut triangles = Vec::with_capacity(n);
    for rec in bytes[84..].chunks_exact(50) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        let mut tri = [0u32; 3];
        for (k, slot) in tri.iter_mut().enumerate() {
            let o = 12 + 12 * k;
            *slot = welder.index(Point3::new(f(o), f(o + 4), f(o + 8)))?;
        }
        triangles.push(tri);
    }
    Ok(TriMesh {
        vertices: welder.vertices,
        triangles,
    })
}

fn read_ascii(text: &str) -> Result<TriMesh, ModelError> {
    let mut welder = Welder::default();
    let mut triangles = Vec::new();
    let mut pending: Vec<u32> = Vec::with_capacity(3);
    let mut in_loop = false;
    let mut finished = false;
    let mut tokens = text.split_whitespace();
    let malformed = |m: &str| ModelError::MalformedStl(m.to_string());
    let mut in_name = false;
    while let Some(tok) = tokens.next() {
        match tok {
            "solid" => in_name = true,
            "facet" => {
                in_name = false;
                if tokens.next() != Some("normal") {
                    return Err(malformed("expected 'normal' after 'facet'"));
                }
                for _ in 0..3 {
                    let t = tokens.next().ok_or_else(|| malformed("truncated normal"))?;
                    t.parse::<f32>()
                        .map_err(|_| ModelError::MalformedStl(format!("bad normal {t:?}")))?;
                }
            }
            "outer" => {
                if tokens.next() != Some("loop") {
                    return Err(malformed("expected 'loop' after 'outer'"));
                }
                in_loop = true;
                pending.clear();
            }
            "vertex" => {
                if !in_loop {
                    return Err(malformed("vertex outside of a loop"));
                }
                let mut c = [0.0f64; 3];
                for v in c.iter_mut() {
                    let t = tokens.next().ok_or_else(|| malformed("truncated vertex"))?;
                    *v = t
                        .parse::<f32>()
                        .map_err(|_| ModelError::MalformedStl(format!("bad coordinate {t:?}")))?
                        as f64;
                }
                pending.push(welder.index(Point3::new(c[0], c[1], c[2]))?);
            }
            "endloop" => {
                if pending.len() != 3 {
                    return Err(ModelError::MalformedStl(format!(
                        "facet with {} vertices",
                        pending.len()
                    )));
                }
                triangles.push([pending[0], pending[1], pending[2]]);
                in_loop = false;
            }
            "endfacet" => {
                if in_loop {
                    return Err(malformed("facet ended inside a loop"));
                }
            }
            "endsolid" => {
                finished = true;
                break;
            }
            _ if in_name => {}
            other => return Err(ModelError::MalformedStl(format!("unexpected token {other:?}"))),
        }
    }
    if !finished || in_loop {
        return Err(malformed("truncated ASCII STL (missing endsolid)"));
    }
    Ok(TriMesh {
        vertices: welder.vertices,
        triangles,
    })
}

#[derive(Default)]
struct Welder {
    vertices: Vec<Point3>,
    lookup: HashMap<[i64; 3], u32>,
}

impl Welder {
    fn index(&mut self, p: Point3) -> Result<u32, ModelError> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(ModelError::MalformedStl("non-finite vertex".into()));
        }
        let key = [p.x, p.y, p.z].map(|c| (c / WELD_TOLERANCE).round() as i64);
        let next = self.vertices.len() as u32;
        let idx = *self.lookup.entry(key).or_insert(next);
        if idx == next {
            self.vertices.push(p);
        }
        Ok(idx)
    }
}

pub fn write_stl(
    path: impl AsRef<Path>,
    mesh: &TriMesh,
    encoding: StlEncoding,
) -> Result<(), ModelError> {
    fs::write(path, encode_stl(mesh, encoding))?;
    Ok(())
}

pub(crate) fn encode_stl(mesh: &TriMesh, encoding: StlEncoding) -> Vec<u8> {
    let normal = |t: usize| {
        let [a, b, c] = mesh.corners(t);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            n
        }
    };
    let mut out = Vec::new();
    match encoding {
        StlEncoding::Binary => {
            let mut header = [0u8; 80];
            header[..6].copy_from_slice(b"mesh  ");
            out.extend_from_slice(&header);
            out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
            for t in 0..mesh.triangles.len() {
                let n = normal(t);
                let corners = mesh.corners(t);
                for v in std::iter::once(&n).chain(corners.iter()) {
                    for c in v.iter() {
                        out.extend_from_slice(&(*c as f32).to_le_bytes());
                    }
                }
                out.extend_from_slice(&[0, 0]);
            }
        }
        StlEncoding::Ascii => {
            let _ = writeln!(out, "solid mesh");
            for t in 0..mesh.triangles.len() {
                let n = normal(t);
                let _ = writeln!(out, "  facet normal {} {} {}", n.x as f32, n.y as f32, n.z as f32);
                let _ = writeln!(out, "    outer loop");
                for v in mesh.corners(t) {
                    let _ = writeln!(out, "      vertex {} {} {}", v.x as f32, v.y as f32, v.z as f32);
                }
                let _ = writeln!(out, "    endloop");
                let _ = writeln!(out, "  endfacet");
            }
            let _ = writeln!(out, "endsolid mesh");
        }
    }
    out
}
