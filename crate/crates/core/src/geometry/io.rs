//! OBJ and PLY readers, OBJ writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::{TriangleMesh, Vec3, MIN_TRIANGLE_AREA};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::Parse(format!(
                "{}: unsupported mesh format (expected .obj or .ply)",
                path.display()
            ))),
        }
    }
}

/// Reads a mesh, fan-triangulating polygons and dropping degenerate triangles.
pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<TriangleMesh> {
    let format = match format {
        Some(f) => f,
        None => MeshFormat::from_path(path)?,
    };
    let bytes = fs::read(path)?;
    let mesh = match format {
        MeshFormat::Obj => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Parse(format!("{}: not UTF-8 text", path.display())))?;
            parse_obj(&text)?
        }
        MeshFormat::Ply => parse_ply(&bytes)?,
    };
    finish(mesh)
}

fn finish(mesh: TriangleMesh) -> Result<TriangleMesh> {
    let mesh = mesh.without_degenerate(MIN_TRIANGLE_AREA);
    if mesh.is_empty() {
        return Err(Error::DegenerateGeometry(
            "no non-degenerate triangles".into(),
        ));
    }
    Ok(mesh)
}

fn fan(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

/// Parses `v` and `f` records. Indices are 1-based; negative indices are relative.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
                if c.len() != 3 {
                    return Err(Error::Parse(format!(
                        "line {}: vertex needs 3 coordinates",
                        lineno + 1
                    )));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = tok
                    .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
                if idx.len() < 3 {
                    return Err(Error::Parse(format!(
                        "line {}: face needs at least 3 vertices",
                        lineno + 1
                    )));
                }
                faces.push((lineno + 1, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::new();
    for (lineno, idx) in faces {
        let poly = idx
            .iter()
            .map(|&i| {
                let r = if i > 0 { i - 1 } else { n + i };
                if i == 0 || r < 0 || r >= n {
                    Err(Error::Parse(format!(
                        "line {lineno}: face index {i} out of range (1..={n})"
                    )))
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        fan(&poly, &mut triangles);
    }
    TriangleMesh::new(vertices, triangles).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => LittleEndian::read_i16(b) as f64,
            Scalar::U16 => LittleEndian::read_u16(b) as f64,
            Scalar::I32 => LittleEndian::read_i32(b) as f64,
            Scalar::U32 => LittleEndian::read_u32(b) as f64,
            Scalar::F32 => LittleEndian::read_f32(b) as f64,
            Scalar::F64 => LittleEndian::read_f64(b),
        }
    }
}

#[derive(Debug)]
enum Property {
    Value {
        name: String,
        ty: Scalar,
    },
    List {
        name: String,
        count: Scalar,
        item: Scalar,
    },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Streams property values out of an ASCII or little-endian binary body.
enum Body<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary { data: &'a [u8], pos: usize },
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        match self {
            Body::Ascii(it) => it
                .next()
                .ok_or_else(|| Error::Parse("PLY body ended early".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("PLY value: {e}"))),
            Body::Binary { data, pos } => {
                let sz = ty.size();
                if *pos + sz > data.len() {
                    return Err(Error::Parse("PLY body ended early".into()));
                }
                let v = ty.read_le(&data[*pos..*pos + sz]);
                *pos += sz;
                Ok(v)
            }
        }
    }
}

/// Parses ASCII or binary little-endian PLY with `vertex` and `face` elements.
pub fn parse_ply(bytes: &[u8]) -> Result<TriangleMesh> {
    let header_end = find_subslice(bytes, b"end_header")
        .ok_or_else(|| Error::Parse("PLY: missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Parse("PLY: header is not ASCII".into()))?;
    let mut body_start = header_end + b"end_header".len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Parse("PLY: missing magic".into()));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(Error::Parse(format!("PLY: unsupported format {other}")))
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|e| Error::Parse(format!("PLY element count: {e}")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Parse("PLY: property before element".into()))?
                .props
                .push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Parse("PLY: property before element".into()))?
                .props
                .push(Property::Value {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                }),
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| Error::Parse("PLY: missing format line".into()))?;
    let body = &bytes[body_start..];
    let mut reader = if binary {
        Body::Binary { data: body, pos: 0 }
    } else {
        Body::Ascii(
            std::str::from_utf8(body)
                .map_err(|_| Error::Parse("PLY: ASCII body is not text".into()))?
                .split_ascii_whitespace(),
        )
    };

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            let mut face: Vec<usize> = Vec::new();
            for p in &el.props {
                match p {
                    Property::Value { name, ty } => {
                        let v = reader.next(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            _ => {}
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = reader.next(*count)?;
                        if n < 0.0 {
                            return Err(Error::Parse("PLY: negative list length".into()));
                        }
                        let keep = name == "vertex_indices" || name == "vertex_index";
                        for _ in 0..n as usize {
                            let v = reader.next(*item)?;
                            if keep {
                                if v < 0.0 {
                                    return Err(Error::Parse("PLY: negative face index".into()));
                                }
                                face.push(v as usize);
                            }
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    if xyz.iter().any(|c| c.is_nan()) {
                        return Err(Error::Parse("PLY: vertex lacks x/y/z".into()));
                    }
                    vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                "face" => {
                    if face.len() < 3 {
                        return Err(Error::Parse("PLY: face with fewer than 3 indices".into()));
                    }
                    fan(&face, &mut triangles);
                }
                _ => {}
            }
        }
    }
    let n = vertices.len();
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
        return Err(Error::Parse(format!(
            "PLY: face {t:?} references a vertex beyond {n}"
        )));
    }
    TriangleMesh::new(vertices, triangles).map_err(|e| Error::Parse(e.to_string()))
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Serializes as OBJ text with shortest round-trip coordinates.
pub fn obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 48 + mesh.triangle_count() * 24);
    for v in mesh.vertices() {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in mesh.triangles() {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    s
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(obj_string(mesh).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE_OBJ: &str = "\
# unit cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
";

    #[test]
    fn cube_obj() {
        let m = finish(parse_obj(CUBE_OBJ).unwrap()).unwrap();
        assert_eq!(m.vertex_count(), 8);
        assert_eq!(m.triangle_count(), 12);
        assert_eq!(m.boundary_edge_count(), 0);
    }

    #[test]
    fn quad_is_fan_split() {
        let m =
            parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn negative_indices_are_relative() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_face_is_parse_error() {
        let r = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n");
        assert!(matches!(r, Err(Error::Parse(_))));
    }

    #[test]
    fn malformed_vertex_is_parse_error() {
        assert!(matches!(parse_obj("v 0 zero 0\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn only_degenerate_faces_rejected() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(finish(m), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn ascii_ply() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.triangle_count(), 2);
    }

    #[test]
    fn binary_ply_with_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nelement face 1\nproperty list uchar uint vertex_indices\nproperty float quality\nend_header\n".to_vec();
        for v in [[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]] {
            for c in v {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
            bytes.push(200);
        }
        bytes.push(3);
        for i in [0u32, 1, 2] {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        let m = parse_ply(&bytes).unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
        assert_eq!(m.vertices()[2], Vec3::new(0.0, 1.0, 0.5));
    }

    #[test]
    fn truncated_binary_ply_fails() {
        let bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n\0\0\0\0".to_vec();
        assert!(matches!(parse_ply(&bytes), Err(Error::Parse(_))));
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let m = crate::shapes::icosphere(0.37, 1);
        let back = parse_obj(&obj_string(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unknown_extension_rejected() {
        assert!(MeshFormat::from_path(Path::new("a.stl")).is_err());
    }
}
