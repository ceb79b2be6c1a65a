use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::path::Path;

/// Triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.vertices.iter().map(|&v| Vector3::from(v)).collect()
    }

    pub fn with_points(&self, points: &[Vector3<f64>]) -> Self {
        Self {
            vertices: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.vertices.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("mesh", format!("vertex {i} is not finite")));
        }
        let n = self.vertices.len();
        if let Some((f, face)) = self.faces.iter().enumerate().find(|(_, f)| f.iter().any(|&i| i >= n)) {
            return Err(Error::invalid("mesh", format!("face {f} {face:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    /// Wavefront OBJ text: `v` and `f` records, 1-based indices. Numbers
    /// use the shortest representation that reads back exactly.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parse the `v` and `f` records of an OBJ file. Polygons are fanned
    /// into triangles, `v/vt/vn` references keep the vertex index, negative
    /// indices count from the end; everything else is ignored.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut mesh = Mesh::default();
        for (no, line) in text.lines().enumerate() {
            let bad = |m: String| Error::invalid("OBJ", format!("line {}: {m}", no + 1));
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts
                        .take(3)
                        .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
                        .collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad("vertex needs three coordinates".into()));
                    }
                    mesh.vertices.push([xyz[0], xyz[1], xyz[2]]);
                }
                Some("f") => {
                    let n = mesh.vertices.len() as i64;
                    let idx: Vec<usize> = parts
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|e| bad(format!("{t:?}: {e}")))?;
                            let i = if i < 0 { n + i } else { i - 1 };
                            if i < 0 || i >= n {
                                return Err(bad(format!("index {t} out of range")));
                            }
                            Ok(i as usize)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least three vertices".into()));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj(&text).map_err(|e| match e {
            Error::Invalid { what, reason } => Error::invalid(what, format!("{}: {reason}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }
}
