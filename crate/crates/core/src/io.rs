//! Point-cloud and transform files, plus road removal for LiDAR scans.
//!
//! Text formats only: XYZ (one point per line), ASCII PLY and OFF. Numbers
//! are written with 17 significant digits so a write/read cycle is lossless.
//! Every write goes to a temporary file in the destination directory and is
//! renamed into place, so a failed write never leaves partial output.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::embed::FeatureCloud;
use crate::error::{Error, Result};
use crate::geometry::{check_rotation, PointCloud, RigidTransform, ROTATION_TOL};

/// Deviation of `RᵀR` from the identity above which a transform file is rejected.
pub const TRANSFORM_FILE_TOL: f64 = 1e-6;
/// Half the thickness of the removed road layer, in metres.
pub const DEFAULT_LAYER_HALF_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
    Off,
}

impl CloudFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "xyz" | "txt" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::PlyAscii),
            "off" => Ok(CloudFormat::Off),
            _ => Err(Error::UnsupportedFormat(format!(
                "cannot infer a cloud format from {}",
                path.display()
            ))),
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::PlyAscii),
            "off" => Ok(CloudFormat::Off),
            other => Err(Error::UnsupportedFormat(format!("unknown cloud format {other:?}"))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents` through a temporary sibling file and an atomic rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = read_text(path)?;
    parse_cloud(&text, format, path)
}

/// Reads a cloud, choosing the format from the extension.
pub fn read_cloud_auto(path: &Path) -> Result<PointCloud> {
    read_cloud(path, CloudFormat::from_path(path)?)
}

pub fn parse_cloud(text: &str, format: CloudFormat, path: &Path) -> Result<PointCloud> {
    let mut lines = Lines::new(text, path);
    let points = match format {
        CloudFormat::Xyz => parse_xyz(&mut lines)?,
        CloudFormat::PlyAscii => parse_ply(&mut lines)?,
        CloudFormat::Off => parse_off(&mut lines)?,
    };
    PointCloud::new(points)
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    write_atomic(path, &format_cloud(cloud, format))
}

pub fn format_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::with_capacity(cloud.len() * 72 + 128);
    match format {
        CloudFormat::Xyz => {}
        CloudFormat::PlyAscii => {
            let _ = write!(
                out,
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
                cloud.len()
            );
        }
        CloudFormat::Off => {
            let _ = write!(out, "OFF\n{} 0 0\n", cloud.len());
        }
    }
    for p in cloud.iter() {
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
    }
    out
}

/// Line cursor that tracks 1-based line numbers.
struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        Self {
            iter: text.lines().enumerate(),
            path,
            last: 0,
        }
    }

    /// Next line that is neither blank nor a `#` comment.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.iter.by_ref() {
            self.last = i + 1;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((i + 1, t));
            }
        }
        None
    }

    fn require(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let last = self.last;
        self.next_content()
            .ok_or_else(|| Error::parse(self.path, last + 1, format!("unexpected end of file, expected {what}")))
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(self.path, line, msg.into())
    }

    fn expect_end(&mut self) -> Result<()> {
        match self.next_content() {
            Some((n, _)) => Err(self.err(n, "unexpected content after the declared data")),
            None => Ok(()),
        }
    }
}

fn parse_real(lines: &Lines<'_>, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| lines.err(line, format!("invalid number {tok:?}")))?;
    if !v.is_finite() {
        return Err(lines.err(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn parse_count(lines: &Lines<'_>, line: usize, tok: Option<&str>, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| lines.err(line, format!("invalid {what} {tok:?}")))
}

fn parse_point(lines: &Lines<'_>, line: usize, text: &str) -> Result<Vector3<f64>> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(lines.err(line, format!("expected 3 coordinates, found {} fields", toks.len())));
    }
    Ok(Vector3::new(
        parse_real(lines, line, toks[0])?,
        parse_real(lines, line, toks[1])?,
        parse_real(lines, line, toks[2])?,
    ))
}

fn parse_xyz(lines: &mut Lines<'_>) -> Result<Vec<Vector3<f64>>> {
    let mut pts = Vec::new();
    while let Some((n, text)) = lines.next_content() {
        pts.push(parse_point(lines, n, text)?);
    }
    Ok(pts)
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names; `None` marks a list property.
    properties: Vec<Option<String>>,
}

const PLY_SCALARS: [&str; 16] = [
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16", "uint16",
    "int32", "uint32", "float32", "float64",
];

fn parse_ply(lines: &mut Lines<'_>) -> Result<Vec<Vector3<f64>>> {
    // the header keeps comment-like lines meaningful, so read it raw
    let (n, magic) = lines.require("ply magic")?;
    if magic != "ply" {
        return Err(lines.err(n, "missing ply magic"));
    }
    let (n, fmt) = lines.require("format line")?;
    let toks: Vec<&str> = fmt.split_whitespace().collect();
    match toks.as_slice() {
        ["format", "ascii", "1.0"] => {}
        ["format", kind, _] if kind.starts_with("binary") => {
            return Err(Error::UnsupportedFormat(format!(
                "binary PLY ({kind}) is not supported; convert to ascii"
            )))
        }
        _ => return Err(lines.err(n, format!("bad format line {fmt:?}"))),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (n, text) = lines.require("end_header")?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = parse_count(lines, n, Some(count), "element count")?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| lines.err(n, "property before any element"))?;
                if !PLY_SCALARS.contains(count_ty) || !PLY_SCALARS.contains(item_ty) {
                    return Err(lines.err(n, format!("unknown property type in {text:?}")));
                }
                el.properties.push(None);
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| lines.err(n, "property before any element"))?;
                if !PLY_SCALARS.contains(ty) {
                    return Err(lines.err(n, format!("unknown property type {ty:?}")));
                }
                el.properties.push(Some(name.to_string()));
            }
            _ => return Err(lines.err(n, format!("unrecognized header line {text:?}"))),
        }
    }
    let vertex = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| lines.err(lines.last, "no vertex element"))?;
    let props = &elements[vertex].properties;
    if props.iter().any(Option::is_none) {
        return Err(lines.err(lines.last, "list properties on vertices are not supported"));
    }
    let column = |axis: &str| props.iter().position(|p| p.as_deref() == Some(axis));
    let (Some(ix), Some(iy), Some(iz)) = (column("x"), column("y"), column("z")) else {
        return Err(lines.err(lines.last, "vertex element lacks x, y or z"));
    };

    let mut pts = Vec::with_capacity(elements[vertex].count);
    for (k, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let (n, text) = lines.require(&format!("{} data", el.name))?;
            if k != vertex {
                continue;
            }
            let toks: Vec<&str> = text.split_whitespace().collect();
            if toks.len() != props.len() {
                return Err(lines.err(
                    n,
                    format!("expected {} vertex fields, found {}", props.len(), toks.len()),
                ));
            }
            let mut vals = Vec::with_capacity(toks.len());
            for t in &toks {
                vals.push(parse_real(lines, n, t)?);
            }
            pts.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
        }
    }
    lines.expect_end()?;
    Ok(pts)
}

fn parse_off(lines: &mut Lines<'_>) -> Result<Vec<Vector3<f64>>> {
    let (n, first) = lines.require("OFF header")?;
    let mut toks = first.split_whitespace();
    if toks.next() != Some("OFF") {
        return Err(lines.err(n, "missing OFF header"));
    }
    // counts may share the header line
    let rest: Vec<&str> = toks.collect();
    let (n, counts) = if rest.is_empty() {
        let (n, text) = lines.require("vertex/face counts")?;
        (n, text.split_whitespace().collect::<Vec<_>>())
    } else {
        (n, rest)
    };
    if counts.len() != 3 {
        return Err(lines.err(n, "expected vertex, face and edge counts"));
    }
    let nv = parse_count(lines, n, Some(counts[0]), "vertex count")?;
    let nf = parse_count(lines, n, Some(counts[1]), "face count")?;
    parse_count(lines, n, Some(counts[2]), "edge count")?;

    let mut pts = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (n, text) = lines.require("vertex")?;
        pts.push(parse_point(lines, n, text)?);
    }
    for _ in 0..nf {
        let (n, text) = lines.require("face")?;
        let mut toks = text.split_whitespace();
        let k = parse_count(lines, n, toks.next(), "face size")?;
        let idx: Vec<&str> = toks.collect();
        if idx.len() < k {
            return Err(lines.err(n, format!("face declares {k} vertices, found {}", idx.len())));
        }
        for t in &idx[..k] {
            let i: usize = t
                .parse()
                .map_err(|_| lines.err(n, format!("invalid vertex index {t:?}")))?;
            if i >= nv {
                return Err(lines.err(n, format!("vertex index {i} out of range")));
            }
        }
    }
    lines.expect_end()?;
    Ok(pts)
}

pub fn format_transform(xf: &RigidTransform) -> String {
    let (r, t) = (xf.rotation(), xf.translation());
    let mut out = String::new();
    for i in 0..3 {
        let _ = writeln!(
            out,
            "{:.16e} {:.16e} {:.16e} {:.16e}",
            r[(i, 0)],
            r[(i, 1)],
            r[(i, 2)],
            t[i]
        );
    }
    out
}

pub fn write_transform(xf: &RigidTransform, path: &Path) -> Result<()> {
    write_atomic(path, &format_transform(xf))
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    parse_transform(&read_text(path)?, path)
}

/// Three rows of `r0 r1 r2 t`. Rotations within `TRANSFORM_FILE_TOL` of
/// orthonormal are projected back onto SO(3).
pub fn parse_transform(text: &str, path: &Path) -> Result<RigidTransform> {
    let mut lines = Lines::new(text, path);
    let mut r = Matrix3::zeros();
    let mut t = Vector3::zeros();
    for i in 0..3 {
        let (n, row) = lines.require("transform row")?;
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(lines.err(n, format!("expected 4 values, found {}", toks.len())));
        }
        for j in 0..3 {
            r[(i, j)] = parse_real(&lines, n, toks[j])?;
        }
        t[i] = parse_real(&lines, n, toks[3])?;
    }
    lines.expect_end()?;
    check_rotation(&r, TRANSFORM_FILE_TOL)?;
    if check_rotation(&r, ROTATION_TOL).is_err() {
        r = project_to_rotation(&r);
    }
    RigidTransform::new(r, t)
}

/// Nearest rotation in the Frobenius sense.
fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Whitespace-separated feature table, one row per point, all rows the same width.
pub fn read_features(path: &Path) -> Result<FeatureCloud> {
    let text = read_text(path)?;
    let mut lines = Lines::new(&text, path);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while let Some((n, line)) = lines.next_content() {
        let row = line
            .split_whitespace()
            .map(|t| parse_real(&lines, n, t))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(lines.err(n, format!("row has {} values, expected {}", row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    FeatureCloud::from_rows(&rows)
}

/// Indices of the points farther than `half_width` from the total-least-squares
/// plane of `cloud`.
pub fn ground_plane_survivors(cloud: &PointCloud, half_width: f64) -> Result<Vec<usize>> {
    if !(half_width >= 0.0 && half_width.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "layer half-width must be non-negative, got {half_width}"
        )));
    }
    if cloud.len() < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            available: cloud.len(),
        });
    }
    let c = cloud.centroid();
    let mut cov = Matrix3::zeros();
    for p in cloud.iter() {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= cloud.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, top) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(top > 0.0) || mid <= 1e-12 * top {
        return Err(Error::DegenerateFit(format!(
            "covariance rank below 2 (eigenvalues {:e}, {:e}, {:e})",
            eig.eigenvalues[order[0]], mid, top
        )));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let keep: Vec<usize> = cloud
        .iter()
        .enumerate()
        .filter(|(_, p)| normal.dot(&(*p - c)).abs() > half_width)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::AllRemoved);
    }
    Ok(keep)
}

/// Drops the points within `half_width` of the fitted plane, keeping order.
pub fn remove_ground_plane(cloud: &PointCloud, half_width: f64) -> Result<PointCloud> {
    cloud.select(&ground_plane_survivors(cloud, half_width)?)
}
