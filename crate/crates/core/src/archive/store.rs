//! On-disk archive layout.
//!
//! ```text
//! <dir>/manifest.json          run id, mode tag, node count, record digest
//! <dir>/nodes/00000000.json    one record per node
//! ```
//!
//! Scores are written as decimal strings (shortest round-trip form) so values
//! survive a round trip bit-exactly. `records_sha256` is the SHA-256 of the
//! concatenated per-record SHA-256 digests in id order, so hashing the
//! manifest alone fingerprints the whole archive.

use super::{AgentNode, Archive, ArchiveError, DomainScores, NodeId, Result};
use crate::Mode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NODES_DIR: &str = "nodes";
const FORMAT: &str = "stepstone-archive/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub run_id: String,
    pub mode_tag: Mode,
    pub node_count: usize,
    pub next_id: NodeId,
    pub node_ids: Vec<NodeId>,
    pub records_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRecord {
    train: String,
    validation: Option<String>,
    test: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: NodeId,
    parent_id: Option<NodeId>,
    payload_ref: String,
    compiled: bool,
    compiled_children: u32,
    scores: BTreeMap<String, ScoreRecord>,
    created_at_iteration: u64,
}

fn fmt_score(v: f64) -> String {
    // `{:?}` is the shortest representation that parses back to the same bits
    format!("{v:?}")
}

fn parse_score(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("bad score `{s}`: {e}"))
}

impl From<&AgentNode> for NodeRecord {
    fn from(n: &AgentNode) -> Self {
        Self {
            id: n.id,
            parent_id: n.parent_id,
            payload_ref: n.payload_ref.clone(),
            compiled: n.compiled,
            compiled_children: n.compiled_children,
            scores: n
                .scores
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        ScoreRecord {
                            train: fmt_score(s.train),
                            validation: s.validation.map(fmt_score),
                            test: s.test.map(fmt_score),
                        },
                    )
                })
                .collect(),
            created_at_iteration: n.created_at_iteration,
        }
    }
}

impl TryFrom<NodeRecord> for AgentNode {
    type Error = String;

    fn try_from(r: NodeRecord) -> std::result::Result<Self, String> {
        let mut scores = BTreeMap::new();
        for (k, s) in r.scores {
            scores.insert(
                k,
                DomainScores {
                    train: parse_score(&s.train)?,
                    validation: s.validation.as_deref().map(parse_score).transpose()?,
                    test: s.test.as_deref().map(parse_score).transpose()?,
                },
            );
        }
        Ok(AgentNode {
            id: r.id,
            parent_id: r.parent_id,
            payload_ref: r.payload_ref,
            compiled: r.compiled,
            compiled_children: r.compiled_children,
            scores,
            created_at_iteration: r.created_at_iteration,
        })
    }
}

fn record_name(id: NodeId) -> String {
    format!("{NODES_DIR}/{id:08}.json")
}

fn record_bytes(node: &AgentNode) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(&NodeRecord::from(node)).expect("record serializes");
    bytes.push(b'\n');
    bytes
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn digest_of(hashes: &BTreeMap<NodeId, [u8; 32]>) -> String {
    let mut outer = Sha256::new();
    for h in hashes.values() {
        outer.update(h);
    }
    hex::encode(outer.finalize())
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Incremental writer used by the engine: only records touched since the
/// previous flush are rewritten, then the manifest is replaced atomically.
#[derive(Debug)]
pub struct ArchiveStore {
    dir: PathBuf,
    hashes: BTreeMap<NodeId, [u8; 32]>,
}

impl ArchiveStore {
    /// Store for an archive not yet written to `dir`.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let nodes = dir.join(NODES_DIR);
        fs::create_dir_all(&nodes).map_err(io_err(&nodes))?;
        Ok(Self {
            dir,
            hashes: BTreeMap::new(),
        })
    }

    /// Store attached to an archive already loaded from `dir`.
    pub fn attach(dir: impl Into<PathBuf>, archive: &Archive) -> Self {
        let hashes = archive
            .nodes()
            .iter()
            .map(|n| (n.id, sha(&record_bytes(n))))
            .collect();
        Self {
            dir: dir.into(),
            hashes,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes dirty records, drops records of nodes no longer present, and
    /// rewrites the manifest. Returns the manifest written.
    pub fn flush(&mut self, archive: &mut Archive) -> Result<Manifest> {
        let dirty = archive.take_dirty();
        for id in dirty {
            let Ok(node) = archive.get(id) else { continue };
            let bytes = record_bytes(node);
            let path = self.dir.join(record_name(id));
            write_atomic(&path, &bytes).map_err(io_err(&path))?;
            self.hashes.insert(id, sha(&bytes));
        }
        let stale: Vec<NodeId> = self
            .hashes
            .keys()
            .copied()
            .filter(|id| !archive.contains(*id))
            .collect();
        for id in stale {
            self.hashes.remove(&id);
            let path = self.dir.join(record_name(id));
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            run_id: archive.run_id().to_string(),
            mode_tag: archive.mode(),
            node_count: archive.len(),
            next_id: archive.next_id(),
            node_ids: archive.nodes().iter().map(|n| n.id).collect(),
            records_sha256: digest_of(&self.hashes),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST_FILE);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

/// Writes the full archive to `dir`.
pub fn persist(archive: &Archive, dir: &Path) -> Result<Manifest> {
    let mut copy = archive.clone();
    for node in archive.nodes() {
        copy.dirty.insert(node.id);
    }
    let mut store = ArchiveStore::create(dir)?;
    // remove records left from an earlier, larger archive in the same dir
    let nodes_dir = dir.join(NODES_DIR);
    for entry in fs::read_dir(&nodes_dir).map_err(io_err(&nodes_dir))? {
        let entry = entry.map_err(io_err(&nodes_dir))?;
        let keep = entry
            .path()
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<NodeId>().ok())
            .is_some_and(|id| archive.contains(id));
        if !keep {
            let p = entry.path();
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    store.flush(&mut copy)
}

/// SHA-256 (hex) of the manifest file in `dir`.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads and fully validates the archive in `dir`.
pub fn load(dir: &Path) -> Result<Archive> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| ArchiveError::CorruptManifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ArchiveError::CorruptManifest(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    if manifest.node_count != manifest.node_ids.len() {
        return Err(ArchiveError::CorruptManifest(format!(
            "node_count {} but {} node ids listed",
            manifest.node_count,
            manifest.node_ids.len()
        )));
    }
    let mut nodes = Vec::with_capacity(manifest.node_count);
    let mut hashes = BTreeMap::new();
    for &id in &manifest.node_ids {
        let name = record_name(id);
        let path = dir.join(&name);
        let corrupt = |reason: String| ArchiveError::CorruptRecord {
            record: name.clone(),
            reason,
        };
        let bytes = fs::read(&path).map_err(|e| corrupt(e.to_string()))?;
        let record: NodeRecord =
            serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if record.id != id {
            return Err(corrupt(format!("record holds id {}", record.id)));
        }
        let node = AgentNode::try_from(record).map_err(corrupt)?;
        node.check_scores().map_err(|e| corrupt(e.to_string()))?;
        hashes.insert(id, sha(&bytes));
        nodes.push(node);
    }
    if digest_of(&hashes) != manifest.records_sha256 {
        return Err(ArchiveError::CorruptManifest(
            "record digest does not match manifest".into(),
        ));
    }
    let archive = Archive::from_parts(manifest.mode_tag, manifest.run_id, manifest.next_id, nodes);
    archive.validate().map_err(|e| match e {
        ArchiveError::ChildCountMismatch { id, .. }
        | ArchiveError::DanglingParent { id, .. }
        | ArchiveError::MissingParent(id)
        | ArchiveError::DuplicateId(id) => ArchiveError::CorruptRecord {
            record: record_name(id),
            reason: e.to_string(),
        },
        other => other,
    })?;
    Ok(archive)
}
