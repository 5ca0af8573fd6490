//! Ingestion of Market-1501-style dataset directories.
//!
//! Filenames follow `<pid>_c<cam>s<seq>_<frame>_<k>.jpg`, e.g.
//! `0001_c1s1_000151_00.jpg`. A pid of -1 marks a distractor.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{Dataset, Domain, ImageRef, SampleMeta};

/// Identity and camera parsed from a Market-style filename.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedName {
    pub person_id: i32,
    pub camera_id: u32,
    pub sequence: u32,
    pub frame: u32,
    pub dup: u32,
}

impl ParsedName {
    pub fn is_distractor(&self) -> bool {
        self.person_id == -1
    }
}

/// Parse `<pid>_c<cam>s<seq>_<frame>_<k>.jpg`.
pub fn parse_market_filename(name: &str) -> Result<ParsedName> {
    let malformed = || Error::MalformedName(name.to_string());
    let stem = name.strip_suffix(".jpg").ok_or_else(malformed)?;
    let parts: Vec<&str> = stem.split('_').collect();
    // pid itself may be "-1"; it never contains an underscore
    if parts.len() != 4 {
        return Err(malformed());
    }
    let person_id: i32 = parts[0].parse().map_err(|_| malformed())?;
    if person_id < -1 {
        return Err(malformed());
    }
    let camseq = parts[1].strip_prefix('c').ok_or_else(malformed)?;
    let (cam_str, seq_str) = camseq.split_once('s').ok_or_else(malformed)?;
    let camera_id: u32 = cam_str.parse().map_err(|_| malformed())?;
    if camera_id < 1 {
        return Err(malformed());
    }
    let sequence: u32 = seq_str.parse().map_err(|_| malformed())?;
    let frame: u32 = parts[2].parse().map_err(|_| malformed())?;
    let dup: u32 = parts[3].parse().map_err(|_| malformed())?;
    Ok(ParsedName {
        person_id,
        camera_id,
        sequence,
        frame,
        dup,
    })
}

/// The three standard splits of a Market-style root.
#[derive(Debug, Clone)]
pub struct MarketSplits {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

/// Load one split directory. Files are sorted by name so ingestion is
/// order-stable; entries that do not parse are skipped.
fn load_split(dir: &Path, domain: Domain) -> Result<Dataset> {
    let mut names: Vec<(String, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    names.sort_by(|a, b| a.0.cmp(&b.0));
    let mut samples = Vec::new();
    for (name, path) in names {
        let Ok(parsed) = parse_market_filename(&name) else {
            continue;
        };
        samples.push(SampleMeta {
            sample_id: samples.len(),
            person_id: parsed.person_id,
            camera_id: parsed.camera_id,
            domain,
            image: ImageRef::Path(path),
        });
    }
    Ok(Dataset::from_samples(samples))
}

/// Load `<root>/bounding_box_train`, `<root>/query`, `<root>/bounding_box_test`.
pub fn load_market_root(root: &Path, domain: Domain) -> Result<MarketSplits> {
    let need = |sub: &str| -> Result<PathBuf> {
        let p = root.join(sub);
        if !p.is_dir() {
            return Err(Error::Config(format!(
                "missing directory {} under {}",
                sub,
                root.display()
            )));
        }
        Ok(p)
    };
    Ok(MarketSplits {
        train: load_split(&need("bounding_box_train")?, domain)?,
        query: load_split(&need("query")?, domain)?,
        gallery: load_split(&need("bounding_box_test")?, domain)?,
    })
}
