//! Cloud text files and dataset manifests.
//!
//! A cloud file holds one point per line, `x y z [nx ny nz] [part]`, with
//! `#` comments. A part of `-1` marks an unknown part. The class label is
//! stored in a `# label <k>` comment. A dataset lives under
//! `<root>/<split>/<class>/<id>.xyz` and is indexed by `<root>/manifest.csv`
//! with a `path,label` header and paths relative to the root.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::cloud::PointCloud;
use super::shapes::{generate_variant, ShapeKind, ShapeSpec};
use crate::error::{Error, Result};

pub fn cloud_to_string(cloud: &PointCloud) -> String {
    let mut s = format!("# pointcaps cloud\n# label {}\n", cloud.label);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(n) = &cloud.normals {
            let _ = write!(s, " {} {} {}", n[i][0], n[i][1], n[i][2]);
        }
        if let Some(parts) = &cloud.part_labels {
            match parts[i] {
                Some(k) => {
                    let _ = write!(s, " {k}");
                }
                None => s.push_str(" -1"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_cloud(text: &str, origin: &Path) -> Result<PointCloud> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut label = 0;
    let mut columns = None;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut parts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = raw.trim();
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("label") {
                label = v.trim().parse().map_err(|_| perr(lineno, format!("bad label `{}`", v.trim())))?;
            }
            continue;
        }
        let line = trimmed.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !matches!(fields.len(), 3 | 4 | 6 | 7) {
            return Err(perr(lineno, format!("expected 3, 4, 6 or 7 columns, got {}", fields.len())));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(perr(lineno, format!("{} columns after {c} on earlier lines", fields.len())))
            }
            _ => {}
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| perr(lineno, format!("bad number `{s}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(lineno, format!("non-finite value `{s}`")))
            }
        };
        points.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
        if fields.len() >= 6 {
            normals.push([num(fields[3])?, num(fields[4])?, num(fields[5])?]);
        }
        if fields.len() % 3 == 1 {
            let p: i64 = fields[fields.len() - 1]
                .parse()
                .map_err(|_| perr(lineno, format!("bad part label `{}`", fields[fields.len() - 1])))?;
            parts.push(usize::try_from(p).ok());
        }
    }
    if points.is_empty() {
        return Err(perr(text.lines().count().max(1), "cloud file has no points".into()));
    }
    let mut cloud = PointCloud::new(points, label);
    if !normals.is_empty() {
        cloud = cloud.with_normals(normals)?;
    }
    if !parts.is_empty() {
        cloud = cloud.with_parts(parts)?;
    }
    Ok(cloud)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, cloud_to_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.csv";

    /// Reads `<root>/manifest.csv` and checks every referenced file exists.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(Self::FILE);
        let mut reader = csv::Reader::from_path(&path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
            return Err(Error::Parse {
                path,
                line: 1,
                msg: format!("expected header `path,label`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let perr = |msg: String| Error::Parse {
                path: path.clone(),
                line,
                msg,
            };
            let rel = PathBuf::from(&row[0]);
            let label = row[1].trim().parse().map_err(|_| perr(format!("bad label `{}`", &row[1])))?;
            let split = rel
                .components()
                .next()
                .and_then(|c| c.as_os_str().to_str())
                .ok_or_else(|| perr(format!("path `{}` has no split directory", rel.display())))?
                .parse()
                .map_err(|e: Error| perr(e.to_string()))?;
            if !root.join(&rel).is_file() {
                return Err(perr(format!("missing file `{}`", rel.display())));
            }
            records.push(ManifestRecord { path: rel, label, split });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(Self::FILE);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["path", "label"])?;
        for r in &self.records {
            let p = r.path.to_string_lossy().replace('\\', "/");
            w.write_record([p, r.label.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    /// Class directory name for each label.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.num_classes()];
        for r in &self.records {
            if let Some(name) = r.path.iter().nth(1).and_then(|c| c.to_str()) {
                names[r.label] = name.to_string();
            }
        }
        names
    }

    /// Loads every cloud of `split`; the manifest label wins over the file's.
    pub fn load_split(&self, split: Split) -> Result<Vec<PointCloud>> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| {
                let mut c = load_cloud(&self.root.join(&r.path))?;
                c.label = r.label;
                Ok(c)
            })
            .collect()
    }
}

/// Recipe for a synthetic dataset. Class `k` is `kinds[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kinds: Vec<ShapeKind>,
    pub num_points: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_points: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            kinds: ShapeKind::ALL.to_vec(),
            num_points,
            train_per_class,
            test_per_class,
            jitter: 0.2,
            seed,
        }
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one sample, independent across splits, classes and indices.
pub fn sample_seed(seed: u64, split: Split, class: usize, index: usize) -> u64 {
    let mut h = splitmix64(seed);
    for v in [split.tag(), class as u64, index as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

/// Generates one split in memory, grouped by class.
pub fn synthesize(spec: &SyntheticSpec, split: Split) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(spec.kinds.len() * spec.per_class(split));
    for (label, &kind) in spec.kinds.iter().enumerate() {
        let shape = ShapeSpec { kind, jitter: spec.jitter };
        for i in 0..spec.per_class(split) {
            let mut c = generate_variant(&shape, spec.num_points, sample_seed(spec.seed, split, label, i))?;
            c.label = label;
            out.push(c);
        }
    }
    Ok(out)
}

/// Writes both splits under `root` together with the manifest.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for split in [Split::Train, Split::Test] {
        let clouds = synthesize(spec, split)?;
        let mut counters = vec![0usize; spec.kinds.len()];
        for c in clouds {
            let id = counters[c.label];
            counters[c.label] += 1;
            let rel = PathBuf::from(split.to_string())
                .join(spec.kinds[c.label].name())
                .join(format!("{id:04}.xyz"));
            save_cloud(&c, &root.join(&rel))?;
            records.push(ManifestRecord {
                path: rel,
                label: c.label,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::generate_shape;

    #[test]
    fn cloud_round_trip() {
        let mut c = generate_shape(ShapeKind::Cylinder, 64, 2).unwrap();
        c.part_labels.as_mut().unwrap()[3] = None;
        let back = parse_cloud(&cloud_to_string(&c), Path::new("c.xyz")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn column_variants_parse() {
        let xyz = parse_cloud("0 0 0\n1 2 3\n", Path::new("a")).unwrap();
        assert!(xyz.normals.is_none() && xyz.part_labels.is_none());
        let with_part = parse_cloud("0 0 0 2\n1 2 3 -1\n", Path::new("a")).unwrap();
        assert_eq!(with_part.part_labels, Some(vec![Some(2), None]));
        let full = parse_cloud("# label 4\n0 0 0 0 0 1 1\n", Path::new("a")).unwrap();
        assert_eq!(full.label, 4);
        assert_eq!(full.normals.unwrap()[0], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_cloud("# header\n0 0 0\n0 zero 0\n", Path::new("a")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_cloud("0 0 0\n0 0 0 1\n", Path::new("a")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::new(32, 2, 1, 5);
        spec.kinds = vec![ShapeKind::Cube, ShapeKind::Sphere];
        let written = write_dataset(dir.path(), &spec).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records, written.records);
        assert_eq!(loaded.class_names(), vec!["cube", "sphere"]);
        let train = loaded.load_split(Split::Train).unwrap();
        assert_eq!(train, synthesize(&spec, Split::Train).unwrap());
        assert_eq!(loaded.load_split(Split::Test).unwrap().len(), 2);
    }

    #[test]
    fn manifest_with_missing_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.csv"), "path,label\ntrain/cube/0000.xyz,0\n").unwrap();
        assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Parse { line: 2, .. })));
    }
}
