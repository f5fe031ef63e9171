use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use mixdens::metrics::DensityOnGrid;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Output directory that records the hash of every file written into it.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write `name` through `body`, then hash it.
    pub fn write_with<F>(&mut self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.path(name);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        body(&mut out)?;
        out.flush()?;
        drop(out);
        self.written.insert(name.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write_with(name, |out| {
            serde_json::to_writer_pretty(&mut *out, value)?;
            out.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn written(&self) -> &BTreeMap<String, String> {
        &self.written
    }
}

/// First column of a CSV with a header row, as floats.
pub fn read_column(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let field = line.split(',').next().unwrap_or("").trim();
        if k == 0 || field.is_empty() {
            continue;
        }
        let v: f64 = field
            .parse()
            .with_context(|| format!("{}:{}: bad number {field:?}", path.display(), k + 1))?;
        out.push(v);
    }
    if out.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(out)
}

/// `theta,density` CSV.
pub fn read_density(path: &Path) -> Result<DensityOnGrid> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (mut grid, mut values) = (Vec::new(), Vec::new());
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if k == 0 || line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',').map(str::trim);
        let bad = || format!("{}:{}: expected theta,density", path.display(), k + 1);
        let t: f64 = it.next().with_context(bad)?.parse().with_context(bad)?;
        let d: f64 = it.next().with_context(bad)?.parse().with_context(bad)?;
        grid.push(t);
        values.push(d);
    }
    Ok(DensityOnGrid::new(grid, values)?)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}
