//! Sample directories and the dataset manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{fmap, generate_sample, RgbDpSample, SimConfig};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MAPS: [&str; 5] = ["rgb", "dpl", "dpr", "invdepth", "mask"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Bucket `(7·index + 3) mod 10`: 0–7 train, 8 val, 9 test. Any ten
/// consecutive indices hit every bucket once.
pub fn split_of(index: usize) -> Split {
    match (7 * (index % 10) + 3) % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

pub fn write_sample(sample: &RgbDpSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let maps = [&sample.rgb, &sample.dp_left, &sample.dp_right, &sample.invdepth, &sample.mask];
    for (name, map) in MAPS.iter().zip(maps) {
        fmap::write(&dir.join(format!("{name}.fmap")), map)?;
    }
    Ok(())
}

/// Reads all five maps; any bad file fails the whole sample.
pub fn read_sample(dir: &Path) -> Result<RgbDpSample> {
    let read = |name: &str| fmap::read(&dir.join(format!("{name}.fmap")));
    let sample = RgbDpSample {
        rgb: read("rgb")?,
        dp_left: read("dpl")?,
        dp_right: read("dpr")?,
        invdepth: read("invdepth")?,
        mask: read("mask")?,
    };
    sample.validate().map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let p = e.path.to_str().ok_or_else(|| Error::Data(format!("non UTF-8 path {}", e.path.display())))?;
        if p.contains(['\t', '\n']) {
            return Err(Error::Data(format!("path {p:?} contains a tab or newline")));
        }
        text.push_str(p);
        text.push('\t');
        text.push_str(e.split.as_str());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (p, s) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected \"path<TAB>split\"", path.display(), n + 1)))?;
            let split = s.parse().map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            Ok(ManifestEntry { path: PathBuf::from(p), split })
        })
        .collect()
}

/// A manifest resolved against its directory.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Accepts the manifest file itself or the directory holding it.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries: read_manifest(&file)?, root })
    }

    pub fn dirs(&self, split: Option<Split>) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .map(|e| self.root.join(&e.path))
            .collect()
    }

    pub fn load(&self, split: Option<Split>) -> Result<Vec<RgbDpSample>> {
        self.dirs(split).iter().map(|d| read_sample(d)).collect()
    }
}

/// Generates `n` samples with seeds `seed..seed+n` under `out`, plus the
/// manifest. Sample size and optics come from `sc`; its seed is ignored.
pub fn make_dataset(n: usize, seed: u64, out: &Path, sc: &SimConfig) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    sc.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let name = sample_dir_name(i);
        let sample = generate_sample(seed.wrapping_add(i as u64), sc)?;
        write_sample(&sample, &out.join(&name))?;
        entries.push(ManifestEntry { path: PathBuf::from(name), split: split_of(i) });
    }
    write_manifest(&out.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rule_enumeration() {
        let got: Vec<Split> = (0..10).map(split_of).collect();
        use Split::*;
        assert_eq!(got, [Train, Train, Train, Train, Train, Val, Train, Train, Test, Train]);
    }

    #[test]
    fn split_names_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("training".parse::<Split>().is_err());
    }
}
