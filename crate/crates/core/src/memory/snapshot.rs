//! Snapshot manifests: a JSON layout document plus one raw blob per ROM/RAM
//! segment. Addresses are stored as `0x`-prefixed hex strings.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AddressSpace, LayoutError, Perm, Segment, SegmentKind};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

fn manifest_err(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Manifest(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub name: String,
    pub base: String,
    pub length: String,
    pub perm: Perm,
    pub kind: SegmentKind,
    /// Blob file name; absent for MMIO segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub segments: Vec<ManifestSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
    #[serde(default)]
    pub symbols: BTreeMap<String, String>,
}

pub fn format_addr(v: u32) -> String {
    format!("0x{v:08x}")
}

pub fn parse_addr(s: &str) -> Result<u32, SnapshotError> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| manifest_err(format!("address `{s}` lacks 0x prefix")))?;
    u32::from_str_radix(digits, 16).map_err(|_| manifest_err(format!("bad hex address `{s}`")))
}

impl SnapshotManifest {
    pub fn segment_list(&self) -> Result<Vec<Segment>, SnapshotError> {
        self.segments
            .iter()
            .map(|m| Ok(Segment::new(m.name.clone(), parse_addr(&m.base)?, parse_addr(&m.length)?, m.perm, m.kind)))
            .collect()
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).and_then(|s| parse_addr(s).ok())
    }

    fn check(&self) -> Result<(), SnapshotError> {
        for s in self.symbols.values() {
            parse_addr(s)?;
        }
        if let Some(entry) = &self.entry {
            if !self.symbols.contains_key(entry) {
                return Err(manifest_err(format!("entry `{entry}` does not resolve in symbols")));
            }
        }
        for m in &self.segments {
            match (m.kind, &m.blob) {
                (SegmentKind::Mmio, Some(_)) => {
                    return Err(manifest_err(format!("mmio segment `{}` must not carry a blob", m.name)))
                }
                (SegmentKind::Rom | SegmentKind::Ram, None) => {
                    return Err(manifest_err(format!("segment `{}` has no blob", m.name)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Builds an address space from a manifest and blobs keyed by blob name.
pub fn load_snapshot(
    manifest: &SnapshotManifest,
    blobs: &BTreeMap<String, Vec<u8>>,
) -> Result<AddressSpace, SnapshotError> {
    manifest.check()?;
    let segments = manifest.segment_list()?;
    let mut space = AddressSpace::with_segments(segments.iter().cloned())?;
    for (m, seg) in manifest.segments.iter().zip(&segments) {
        let Some(blob_name) = &m.blob else { continue };
        let data = blobs.get(blob_name).ok_or_else(|| manifest_err(format!("blob `{blob_name}` missing")))?;
        if data.len() != seg.length as usize {
            return Err(manifest_err(format!(
                "blob `{blob_name}` is {} bytes, segment `{}` is 0x{:x}",
                data.len(),
                seg.name,
                seg.length
            )));
        }
        space.fill(&seg.name, data);
    }
    space.clear_dirty();
    Ok(space)
}

/// Captures layout and ROM/RAM contents. MMIO segments are recorded as ranges only.
pub fn save_snapshot(
    space: &AddressSpace,
    entry: Option<&str>,
    symbols: &BTreeMap<String, u32>,
) -> (SnapshotManifest, BTreeMap<String, Vec<u8>>) {
    let mut manifest = SnapshotManifest {
        segments: Vec::new(),
        entry: entry.map(str::to_string),
        symbols: symbols.iter().map(|(k, v)| (k.clone(), format_addr(*v))).collect(),
    };
    let mut blobs = BTreeMap::new();
    for seg in space.segments() {
        let blob = space.segment_bytes(&seg.name).map(|bytes| {
            let file = format!("{}.bin", seg.name);
            blobs.insert(file.clone(), bytes.to_vec());
            file
        });
        manifest.segments.push(ManifestSegment {
            name: seg.name.clone(),
            base: format_addr(seg.base),
            length: format!("0x{:x}", seg.length),
            perm: seg.perm,
            kind: seg.kind,
            blob,
        });
    }
    (manifest, blobs)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io { path: path.display().to_string(), source }
}

pub fn write_snapshot_dir(
    dir: &Path,
    manifest: &SnapshotManifest,
    blobs: &BTreeMap<String, Vec<u8>>,
) -> Result<(), SnapshotError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(io_err(&path))?;
    for (name, data) in blobs {
        if name.contains('/') || name.contains("..") {
            return Err(manifest_err(format!("illegal blob name `{name}`")));
        }
        let path = dir.join(name);
        fs::write(&path, data).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_snapshot_dir(dir: &Path) -> Result<(SnapshotManifest, BTreeMap<String, Vec<u8>>), SnapshotError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: SnapshotManifest = serde_json::from_str(&text)?;
    let mut blobs = BTreeMap::new();
    for m in &manifest.segments {
        if let Some(name) = &m.blob {
            if name.contains('/') || name.contains("..") {
                return Err(manifest_err(format!("illegal blob name `{name}`")));
            }
            let path = dir.join(name);
            blobs.insert(name.clone(), fs::read(&path).map_err(io_err(&path))?);
        }
    }
    Ok((manifest, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_is_empty_space() {
        let space = load_snapshot(&SnapshotManifest::default(), &BTreeMap::new()).unwrap();
        assert!(space.is_empty());
        assert!(space.read_u8(0x200000).is_err());
        let (m, b) = save_snapshot(&space, None, &BTreeMap::new());
        assert!(m.segments.is_empty() && b.is_empty());
    }

    #[test]
    fn pattern_blob_roundtrip() {
        let mut space = AddressSpace::with_segments([Segment::ram("ram", 0x200000, 0x100)]).unwrap();
        let pattern: Vec<u8> = (0..=255).collect();
        space.write_bytes(0x200000, &pattern).unwrap();
        let (m, b) = save_snapshot(&space, None, &BTreeMap::new());
        assert_eq!(b["ram.bin"], pattern);
        let back = load_snapshot(&m, &b).unwrap();
        assert!(back.contents_eq(&space));
    }

    #[test]
    fn length_mismatch_is_manifest_error() {
        let space = AddressSpace::with_segments([Segment::ram("ram", 0x200000, 0x100)]).unwrap();
        let (m, mut b) = save_snapshot(&space, None, &BTreeMap::new());
        b.get_mut("ram.bin").unwrap().pop();
        assert!(matches!(load_snapshot(&m, &b), Err(SnapshotError::Manifest(_))));
    }

    #[test]
    fn overlap_is_layout_error() {
        let m = SnapshotManifest {
            segments: vec![
                ManifestSegment {
                    name: "a".into(),
                    base: "0x00000000".into(),
                    length: "0x200".into(),
                    perm: Perm::ReadWrite,
                    kind: SegmentKind::Mmio,
                    blob: None,
                },
                ManifestSegment {
                    name: "b".into(),
                    base: "0x00000100".into(),
                    length: "0x100".into(),
                    perm: Perm::ReadWrite,
                    kind: SegmentKind::Mmio,
                    blob: None,
                },
            ],
            ..Default::default()
        };
        assert!(matches!(load_snapshot(&m, &BTreeMap::new()), Err(SnapshotError::Layout(LayoutError::Overlap(..)))));
    }

    #[test]
    fn unresolved_entry_is_rejected() {
        let m = SnapshotManifest { entry: Some("main".into()), ..Default::default() };
        assert!(matches!(load_snapshot(&m, &BTreeMap::new()), Err(SnapshotError::Manifest(_))));
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut space =
            AddressSpace::with_segments([Segment::rom("rom", 0, 0x1000), Segment::mmio("coex", 0x650000, 0x800)])
                .unwrap();
        space.set_rom_overlay(true);
        space.write_u32(0x40, 0x1234_5678).unwrap();
        space.set_rom_overlay(false);
        let syms = BTreeMap::from([("main".to_string(), 0x40u32)]);
        let (m, b) = save_snapshot(&space, Some("main"), &syms);
        write_snapshot_dir(dir.path(), &m, &b).unwrap();
        let (m2, b2) = read_snapshot_dir(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.symbol("main"), Some(0x40));
        let back = load_snapshot(&m2, &b2).unwrap();
        assert!(back.contents_eq(&space));
        assert!(back.write_u8_fault_free_check());
    }

    impl AddressSpace {
        fn write_u8_fault_free_check(&self) -> bool {
            let mut c = self.clone();
            c.write_u8(0x40, 0).is_err()
        }
    }
}
