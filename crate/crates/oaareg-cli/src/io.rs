//! Point cloud file I/O: PLY (ASCII and binary little-endian) and plain XYZ
//! text. Descriptors ride along as `f_0 .. f_{d-1}` vertex properties.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use oaareg::geometry::{GeometryError, PointCloud};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed header: {message}")]
    MalformedHeader {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: vertex count mismatch: header says {expected}, found {got}")]
    InconsistentCount {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: vertex {index} has a non-finite coordinate")]
    NonFiniteCoordinate { path: String, index: usize },
    #[error("{path}:{line}: cannot parse numeric field: {message}")]
    BadNumber {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unsupported property layout: {message}")]
    Unsupported {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: unknown point cloud format (expected .ply or whitespace xyz)")]
    UnknownFormat { path: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    F32,
    F64,
}

impl ScalarType {
    fn size(self) -> usize {
        match self {
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Debug)]
struct VertexLayout {
    count: usize,
    /// (name, type) in declaration order.
    properties: Vec<(String, ScalarType)>,
}

/// Loads a cloud from `.ply` (ASCII or binary little-endian) or whitespace
/// XYZ text, chosen by extension (`.ply` vs anything else).
pub fn load_cloud(path: &Path) -> Result<PointCloud, IoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => load_ply(path),
        Some(_) | None => load_xyz(path),
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn file_err(path: &str, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.to_string(),
        source,
    }
}

fn load_ply(path: &Path) -> Result<PointCloud, IoError> {
    let p = path.display().to_string();
    let mut reader = BufReader::new(open(path)?);

    // ---- header ----
    let mut line_no = 0usize;
    let mut format: Option<PlyFormat> = None;
    let mut vertex: Option<VertexLayout> = None;
    let mut in_vertex_element = false;
    let mut line = String::new();

    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| file_err(&p, e))?;
        line_no += 1;
        if n == 0 {
            return Err(IoError::MalformedHeader {
                path: p,
                line: line_no,
                message: "unexpected end of file inside header".into(),
            });
        }
        if line_no == 1 {
            if line.trim() != "ply" {
                return Err(IoError::MalformedHeader {
                    path: p,
                    line: 1,
                    message: format!("expected 'ply' magic, found {:?}", line.trim()),
                });
            }
            continue;
        }

        let owned = line.trim_end().to_string();
        let words: Vec<&str> = owned.split_whitespace().collect();
        match words.as_slice() {
            [] | ["comment", ..] => continue,
            ["end_header"] => break,
            ["format", kind, "1.0"] => {
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(IoError::MalformedHeader {
                            path: p,
                            line: line_no,
                            message: format!("unsupported format {other:?}"),
                        })
                    }
                });
            }
            ["format", ..] => {
                return Err(IoError::MalformedHeader {
                    path: p,
                    line: line_no,
                    message: format!("cannot parse format line {owned:?}"),
                });
            }
            ["element", "vertex", count] => {
                let count: usize = count.parse().map_err(|_| IoError::MalformedHeader {
                    path: p.clone(),
                    line: line_no,
                    message: format!("bad vertex count {count:?}"),
                })?;
                vertex = Some(VertexLayout {
                    count,
                    properties: Vec::new(),
                });
                in_vertex_element = true;
            }
            ["element", ..] => {
                if vertex.is_none() {
                    // Data of an earlier element would precede the vertices
                    // and shift every offset.
                    return Err(IoError::Unsupported {
                        path: p,
                        line: line_no,
                        message: "elements before the vertex element are not supported".into(),
                    });
                }
                in_vertex_element = false;
            }
            ["property", "list", ..] if in_vertex_element => {
                return Err(IoError::Unsupported {
                    path: p,
                    line: line_no,
                    message: "list properties on vertices are not supported".into(),
                });
            }
            ["property", ty, name] if in_vertex_element => {
                let scalar = match *ty {
                    "float" | "float32" => ScalarType::F32,
                    "double" | "float64" => ScalarType::F64,
                    other => {
                        return Err(IoError::Unsupported {
                            path: p,
                            line: line_no,
                            message: format!("vertex property type {other:?} not supported"),
                        })
                    }
                };
                vertex
                    .as_mut()
                    .expect("in_vertex_element implies vertex layout")
                    .properties
                    .push((name.to_string(), scalar));
            }
            ["property", ..] => continue,
            _ => {
                return Err(IoError::MalformedHeader {
                    path: p,
                    line: line_no,
                    message: format!("unrecognized header line {owned:?}"),
                });
            }
        }
    }

    let format = format.ok_or_else(|| IoError::MalformedHeader {
        path: p.clone(),
        line: line_no,
        message: "missing format line".into(),
    })?;
    let vertex = vertex.ok_or_else(|| IoError::MalformedHeader {
        path: p.clone(),
        line: line_no,
        message: "missing vertex element".into(),
    })?;

    let index_of = |name: &str| vertex.properties.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (index_of("x"), index_of("y"), index_of("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(IoError::MalformedHeader {
                path: p,
                line: line_no,
                message: "vertex element must declare x, y and z".into(),
            })
        }
    };
    // descriptor columns f_0 .. f_{d-1}, in index order
    let mut descriptor_cols: Vec<(usize, usize)> = vertex
        .properties
        .iter()
        .enumerate()
        .filter_map(|(idx, (name, _))| {
            name.strip_prefix("f_")
                .and_then(|suffix| suffix.parse::<usize>().ok())
                .map(|d| (d, idx))
        })
        .collect();
    descriptor_cols.sort_unstable();

    let mut points = Vec::with_capacity(vertex.count);
    let mut descriptors = if descriptor_cols.is_empty() {
        None
    } else {
        Some(DMatrix::zeros(vertex.count, descriptor_cols.len()))
    };

    match format {
        PlyFormat::Ascii => {
            let mut parsed = 0usize;
            let mut line = String::new();
            while parsed < vertex.count {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| file_err(&p, e))?;
                line_no += 1;
                if n == 0 {
                    return Err(IoError::InconsistentCount {
                        path: p,
                        expected: vertex.count,
                        got: parsed,
                    });
                }
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != vertex.properties.len() {
                    return Err(IoError::BadNumber {
                        path: p,
                        line: line_no,
                        message: format!(
                            "expected {} fields, found {}",
                            vertex.properties.len(),
                            fields.len()
                        ),
                    });
                }
                let mut values = Vec::with_capacity(fields.len());
                for f in &fields {
                    let v: f64 = f.parse().map_err(|_| IoError::BadNumber {
                        path: p.clone(),
                        line: line_no,
                        message: format!("{f:?} is not a number"),
                    })?;
                    values.push(v);
                }
                push_vertex(
                    &p,
                    parsed,
                    &values,
                    (xi, yi, zi),
                    &descriptor_cols,
                    &mut points,
                    &mut descriptors,
                )?;
                parsed += 1;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = vertex.properties.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; stride];
            for parsed in 0..vertex.count {
                if let Err(source) = reader.read_exact(&mut buf) {
                    if source.kind() == std::io::ErrorKind::UnexpectedEof {
                        return Err(IoError::InconsistentCount {
                            path: p,
                            expected: vertex.count,
                            got: parsed,
                        });
                    }
                    return Err(file_err(&p, source));
                }
                let mut values = Vec::with_capacity(vertex.properties.len());
                let mut offset = 0usize;
                for (_, ty) in &vertex.properties {
                    let v = match ty {
                        ScalarType::F32 => f32::from_le_bytes(
                            buf[offset..offset + 4].try_into().expect("stride"),
                        ) as f64,
                        ScalarType::F64 => f64::from_le_bytes(
                            buf[offset..offset + 8].try_into().expect("stride"),
                        ),
                    };
                    offset += ty.size();
                    values.push(v);
                }
                push_vertex(
                    &p,
                    parsed,
                    &values,
                    (xi, yi, zi),
                    &descriptor_cols,
                    &mut points,
                    &mut descriptors,
                )?;
            }
        }
    }

    let cloud = match descriptors {
        Some(desc) => PointCloud::with_descriptors(points, desc)?,
        None => PointCloud::new(points)?,
    };
    Ok(cloud)
}

#[allow(clippy::too_many_arguments)]
fn push_vertex(
    path: &str,
    index: usize,
    values: &[f64],
    (xi, yi, zi): (usize, usize, usize),
    descriptor_cols: &[(usize, usize)],
    points: &mut Vec<Vector3<f64>>,
    descriptors: &mut Option<DMatrix<f64>>,
) -> Result<(), IoError> {
    let point = Vector3::new(values[xi], values[yi], values[zi]);
    if !point.iter().all(|v| v.is_finite()) {
        return Err(IoError::NonFiniteCoordinate {
            path: path.to_string(),
            index,
        });
    }
    points.push(point);
    if let Some(desc) = descriptors {
        for (col, (_, src)) in descriptor_cols.iter().enumerate() {
            desc[(index, col)] = values[*src];
        }
    }
    Ok(())
}

fn load_xyz(path: &Path) -> Result<PointCloud, IoError> {
    let p = path.display().to_string();
    let reader = BufReader::new(open(path)?);
    let mut points = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| file_err(&p, e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(IoError::BadNumber {
                path: p,
                line: line_no,
                message: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut coords = [0.0f64; 3];
        for (c, f) in coords.iter_mut().zip(&fields) {
            *c = f.parse().map_err(|_| IoError::BadNumber {
                path: p.clone(),
                line: line_no,
                message: format!("{f:?} is not a number"),
            })?;
        }
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(IoError::NonFiniteCoordinate {
                path: p,
                index: points.len(),
            });
        }
        points.push(Vector3::from(coords));
    }
    Ok(PointCloud::new(points)?)
}

/// Writes a cloud as PLY with double-precision coordinates (and `f_*`
/// descriptor columns when present). Both formats round-trip f64 exactly:
/// binary stores raw bytes, ASCII uses shortest round-trip decimal.
pub fn write_cloud(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<(), IoError> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| file_err(&p, e))?;
    let mut w = BufWriter::new(file);
    let d = cloud.descriptor_dim().unwrap_or(0);

    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    for k in 0..d {
        header.push_str(&format!("property double f_{k}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| file_err(&p, e))?;
    for (i, point) in cloud.points().iter().enumerate() {
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{} {} {}", point.x, point.y, point.z);
                if let Some(desc) = cloud.descriptors() {
                    for k in 0..d {
                        line.push_str(&format!(" {}", desc[(i, k)]));
                    }
                }
                line.push('\n');
                w.write_all(line.as_bytes()).map_err(|e| file_err(&p, e))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [point.x, point.y, point.z] {
                    w.write_all(&v.to_le_bytes()).map_err(|e| file_err(&p, e))?;
                }
                if let Some(desc) = cloud.descriptors() {
                    for k in 0..d {
                        w.write_all(&desc[(i, k)].to_le_bytes()).map_err(|e| file_err(&p, e))?;
                    }
                }
            }
        }
    }
    w.flush().map_err(|e| file_err(&p, e))
}
