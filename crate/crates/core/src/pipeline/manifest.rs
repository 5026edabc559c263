//! Dataset manifests: `path,x,y,radius[,x2,y2][,roi_path][,um_per_pixel]`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// The path as written in the manifest; unique per record.
    pub id: String,
    /// `id` resolved against the manifest directory.
    pub path: PathBuf,
    pub x: f64,
    pub y: f64,
    /// Object radius in pixels of the original image.
    pub radius: f64,
    /// Second target, for two-target (left/right) tasks.
    pub second: Option<(f64, f64)>,
    pub roi: Option<PathBuf>,
    pub um_per_pixel: Option<f64>,
}

impl ManifestRecord {
    pub fn targets(&self) -> Vec<(f64, f64)> {
        let mut t = vec![(self.x, self.y)];
        t.extend(self.second);
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn field(row: &csv::StringRecord, idx: Option<usize>) -> Option<&str> {
    idx.and_then(|i| row.get(i)).map(str::trim).filter(|s| !s.is_empty())
}

fn number(row: &csv::StringRecord, idx: Option<usize>, name: &str, line: usize) -> Result<Option<f64>> {
    field(row, idx)
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("manifest line {line}: bad {name} '{s}'")))
        })
        .transpose()
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new("."));
        Self::from_reader(std::fs::File::open(path)?, root)
    }

    /// Parse CSV with relative paths resolved against `root`.
    pub fn from_reader<R: Read>(r: R, root: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let need = |name: &str| column(&headers, name).ok_or_else(|| Error::Config(format!("manifest is missing column '{name}'")));
        let (ip, ix, iy, ir) = (need("path")?, need("x")?, need("y")?, need("radius")?);
        let (ix2, iy2) = (column(&headers, "x2"), column(&headers, "y2"));
        let iroi = column(&headers, "roi_path");
        let ires = column(&headers, "um_per_pixel");
        let mut records = Vec::new();
        for (n, row) in rdr.records().enumerate() {
            let row = row?;
            let line = n + 2;
            let id = field(&row, Some(ip))
                .ok_or_else(|| Error::Config(format!("manifest line {line}: empty path")))?
                .to_string();
            let req = |i, name| number(&row, Some(i), name, line)?.ok_or_else(|| Error::Config(format!("manifest line {line}: missing {name}")));
            let second = match (number(&row, ix2, "x2", line)?, number(&row, iy2, "y2", line)?) {
                (Some(a), Some(b)) => Some((a, b)),
                (None, None) => None,
                _ => return Err(Error::Config(format!("manifest line {line}: x2 and y2 must be given together"))),
            };
            records.push(ManifestRecord {
                path: root.join(&id),
                x: req(ix, "x")?,
                y: req(iy, "y")?,
                radius: req(ir, "radius")?,
                second,
                roi: field(&row, iroi).map(|s| root.join(s)),
                um_per_pixel: number(&row, ires, "um_per_pixel", line)?,
                id,
            });
        }
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !(r.radius > 0.0) || !r.radius.is_finite() {
                return Err(Error::Config(format!("{}: radius must be positive, got {}", r.id, r.radius)));
            }
            if r.um_per_pixel.is_some_and(|u| !(u > 0.0)) {
                return Err(Error::Config(format!("{}: um_per_pixel must be positive", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest entry '{}'", r.id)));
            }
        }
        if let Some(first) = self.records.first() {
            if self.records.iter().any(|r| r.second.is_some() != first.second.is_some()) {
                return Err(Error::Config("either all records or none carry a second target".into()));
            }
        }
        Ok(())
    }

    /// Every image (and mask) path exists.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in std::iter::once(&r.path).chain(r.roi.as_ref()) {
                if !p.is_file() {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("{}: no such file", p.display()),
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.records.first().map_or(1, |r| 1 + r.second.is_some() as usize)
    }

    /// Write with paths relative to `root` when possible.
    pub fn write_to<W: Write>(&self, w: W, root: &Path) -> Result<()> {
        let two = self.num_targets() == 2;
        let roi = self.records.iter().any(|r| r.roi.is_some());
        let res = self.records.iter().any(|r| r.um_per_pixel.is_some());
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["path", "x", "y", "radius"];
        if two {
            header.extend(["x2", "y2"]);
        }
        if roi {
            header.push("roi_path");
        }
        if res {
            header.push("um_per_pixel");
        }
        wtr.write_record(&header)?;
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
        for r in &self.records {
            let mut row = vec![r.id.clone(), r.x.to_string(), r.y.to_string(), r.radius.to_string()];
            if two {
                let (a, b) = r.second.expect("validated");
                row.extend([a.to_string(), b.to_string()]);
            }
            if roi {
                row.push(r.roi.as_deref().map(rel).unwrap_or_default());
            }
            if res {
                row.push(r.um_per_pixel.map(|u| u.to_string()).unwrap_or_default());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new("."));
        self.write_to(std::fs::File::create(path)?, root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_optional_columns() {
        let text = "path,x,y,radius,x2,y2,roi_path\na.png,1,2,3,4,5,m.png\nb.png,6,7,8,9,10,\n";
        let m = DatasetManifest::from_reader(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].path, PathBuf::from("/data/a.png"));
        assert_eq!(m.records[0].second, Some((4.0, 5.0)));
        assert_eq!(m.records[0].roi, Some(PathBuf::from("/data/m.png")));
        assert_eq!(m.records[1].roi, None);
        assert_eq!(m.num_targets(), 2);
    }

    #[test]
    fn rejects_invalid_records() {
        let bad_radius = "path,x,y,radius\na.png,1,2,0\n";
        assert!(DatasetManifest::from_reader(bad_radius.as_bytes(), Path::new(".")).is_err());
        let missing = "path,x,radius\na.png,1,2\n";
        assert!(DatasetManifest::from_reader(missing.as_bytes(), Path::new(".")).is_err());
        let dup = "path,x,y,radius\na.png,1,2,3\na.png,1,2,3\n";
        assert!(DatasetManifest::from_reader(dup.as_bytes(), Path::new(".")).is_err());
    }

    #[test]
    fn round_trip() {
        let text = "path,x,y,radius,um_per_pixel\nimg/a.png,1.5,2,3,12.5\n";
        let m = DatasetManifest::from_reader(text.as_bytes(), Path::new("/d")).unwrap();
        let mut out = Vec::new();
        m.write_to(&mut out, Path::new("/d")).unwrap();
        let back = DatasetManifest::from_reader(out.as_slice(), Path::new("/d")).unwrap();
        assert_eq!(back, m);
    }
}
