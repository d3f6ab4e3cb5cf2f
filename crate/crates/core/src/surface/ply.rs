//! PLY mesh IO: ascii and binary little-endian, float32 positions and
//! normals, uchar-counted int32 face lists.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use super::marching::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ply: {0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> PlyError {
    PlyError::Format(msg.into())
}

pub fn write_ply<W: Write>(w: &mut W, mesh: &TriangleMesh, format: PlyFormat) -> Result<(), PlyError> {
    let normals = mesh.normals.as_ref().filter(|n| n.len() == mesh.vertices.len());
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property float {name}")?;
    }
    if normals.is_some() {
        for name in ["nx", "ny", "nz"] {
            writeln!(w, "property float {name}")?;
        }
    }
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let mut vals = vec![v.x as f32, v.y as f32, v.z as f32];
        if let Some(n) = normals {
            vals.extend([n[i].x as f32, n[i].y as f32, n[i].z as f32]);
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = vals.iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for x in vals {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    for t in &mesh.triangles {
        let mut idx = [0i32; 3];
        for (dst, &i) in idx.iter_mut().zip(t) {
            *dst = i32::try_from(i).map_err(|_| bad("vertex index exceeds int32"))?;
        }
        let [a, b, c] = idx;
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {a} {b} {c}")?,
            PlyFormat::BinaryLittleEndian => {
                w.write_all(&[3u8])?;
                for x in [a, b, c] {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn save_ply(path: &Path, mesh: &TriangleMesh, format: PlyFormat) -> Result<(), PlyError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(&mut w, mesh, format)?;
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<TriangleMesh, PlyError> {
    read_ply(&mut BufReader::new(File::open(path)?))
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
    fn parse(s: &str) -> Result<Self, PlyError> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return Err(bad(format!("unknown type {s}"))),
        })
    }

    fn read_le<R: Read>(self, r: &mut R) -> Result<f64, PlyError> {
        macro_rules! get {
            ($t:ty) => {{
                let mut b = [0u8; std::mem::size_of::<$t>()];
                r.read_exact(&mut b)?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => get!(i8),
            Scalar::U8 => get!(u8),
            Scalar::I16 => get!(i16),
            Scalar::U16 => get!(u16),
            Scalar::I32 => get!(i32),
            Scalar::U32 => get!(u32),
            Scalar::F32 => get!(f32),
            Scalar::F64 => get!(f64),
        })
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Values of one element instance; lists are flattened into `lists`.
struct Record {
    scalars: Vec<(usize, f64)>,
    list: Option<Vec<f64>>,
}

/// Reads ascii and binary little-endian PLY meshes. Vertex positions and
/// normals are read by name; any other properties are skipped.
pub fn read_ply<R: BufRead>(r: &mut R) -> Result<TriangleMesh, PlyError> {
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<(), PlyError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(())
    };
    next_line(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(bad("missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(r, &mut line)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", f, _] => return Err(bad(format!("unsupported format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Property::List(Scalar::parse(ct)?, Scalar::parse(it)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            _ => return Err(bad(format!("unrecognized header line: {}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| bad("missing format"))?;

    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    let mut ascii_tokens: Vec<String> = Vec::new();
    let mut pos = 0usize;
    if format == PlyFormat::Ascii {
        let mut rest = String::new();
        r.read_to_string(&mut rest)?;
        ascii_tokens = rest.split_whitespace().map(str::to_string).collect();
    }
    let mut read_value = |r: &mut R, ty: Scalar| -> Result<f64, PlyError> {
        match format {
            PlyFormat::BinaryLittleEndian => ty.read_le(r),
            PlyFormat::Ascii => {
                let t = ascii_tokens.get(pos).ok_or_else(|| bad("unexpected end of data"))?;
                pos += 1;
                let parsed = if ty == Scalar::F32 { t.parse::<f32>().map(f64::from) } else { t.parse::<f64>() };
                parsed.map_err(|_| bad(format!("bad number {t}")))
            }
        }
    };
    for el in &elements {
        for _ in 0..el.count {
            let mut rec = Record {
                scalars: Vec::new(),
                list: None,
            };
            for (pi, p) in el.props.iter().enumerate() {
                match p {
                    Property::Scalar(_, ty) => {
                        rec.scalars.push((pi, read_value(r, *ty)?));
                    }
                    Property::List(ct, it) => {
                        let n = read_value(r, *ct)? as usize;
                        let vals = (0..n).map(|_| read_value(r, *it)).collect::<Result<Vec<_>, _>>()?;
                        rec.list = Some(vals);
                    }
                }
            }
            let named = |name: &str| {
                rec.scalars.iter().find_map(|&(pi, v)| match &el.props[pi] {
                    Property::Scalar(n, _) if n == name => Some(v),
                    _ => None,
                })
            };
            match el.name.as_str() {
                "vertex" => {
                    let p = Vector3::new(
                        named("x").ok_or_else(|| bad("vertex without x"))?,
                        named("y").ok_or_else(|| bad("vertex without y"))?,
                        named("z").ok_or_else(|| bad("vertex without z"))?,
                    );
                    mesh.vertices.push(p);
                    if let (Some(x), Some(y), Some(z)) = (named("nx"), named("ny"), named("nz")) {
                        normals.push(Vector3::new(x, y, z));
                    }
                }
                "face" => {
                    let list = rec.list.ok_or_else(|| bad("face without index list"))?;
                    let idx: Vec<usize> = list.iter().map(|&v| v as usize).collect();
                    // Fan-triangulate polygons.
                    for k in 1..idx.len().saturating_sub(1) {
                        mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    let n = mesh.vertices.len();
    if mesh.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(bad("face index out of range"));
    }
    if !normals.is_empty() {
        if normals.len() != n {
            return Err(bad("normals on some vertices only"));
        }
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}
