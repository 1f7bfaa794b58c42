//! Episode packs.
//!
//! ```text
//! "EPK1" | u32 manifest_len | manifest (JSON, UTF-8) | tensor blob*
//! blob := "EPK1" | u32 rank | u32 dim[rank] | f32 data[prod(dim)]
//! ```
//!
//! All integers and reals are little-endian. Blobs follow manifest order:
//! for each episode the query at L2, L3, L4, then for each class in id order,
//! for each shot, the support at L2, L3, L4. Every map is stored as rank 3
//! `(channels, height, width)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BoundingBox, ClassId, Episode, EpisodeError, LevelMaps, SynthConfig};
use crate::tensor::{FeatureMap, Level};

pub const PACK_MAGIC: &[u8; 4] = b"EPK1";
const MAX_MANIFEST: u32 = 256 << 20;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed pack: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

type Result<T> = std::result::Result<T, PackError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub format: String,
    pub num_classes: usize,
    pub shots: usize,
    pub channels: [usize; 3],
    pub grids: [usize; 3],
    pub support_grids: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub episodes: Vec<EpisodeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub query_id: String,
    pub present_classes: Vec<ClassId>,
    pub gt_boxes: Vec<ClassBoxes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBoxes {
    pub class: ClassId,
    pub boxes: Vec<[f32; 4]>,
}

fn manifest_for(episodes: &[Episode], synth: Option<&SynthConfig>) -> Result<PackManifest> {
    let first = episodes
        .first()
        .ok_or_else(|| PackError::Format("a pack needs at least one episode".into()))?;
    let dims = |ep: &Episode| {
        let q = ep.query();
        let s = &ep.all_supports()[0][0];
        (
            ep.num_classes(),
            ep.shots(),
            [q[0].channels(), q[1].channels(), q[2].channels()],
            [q[0].height(), q[1].height(), q[2].height()],
            [s[0].height(), s[1].height(), s[2].height()],
        )
    };
    let reference = dims(first);
    for ep in episodes {
        if dims(ep) != reference {
            return Err(PackError::Format(format!(
                "episode {} does not share the pack's dimensions",
                ep.query_id()
            )));
        }
        for map in ep.query().iter().chain(ep.all_supports().iter().flatten().flatten()) {
            if map.height() != map.width() {
                return Err(PackError::Format("pack maps must be square".into()));
            }
        }
        for shots in ep.all_supports() {
            for shot in shots {
                for (l, m) in shot.iter().enumerate() {
                    if m.height() != reference.4[l] {
                        return Err(PackError::Format("support grids differ across classes".into()));
                    }
                }
            }
        }
    }
    let (num_classes, shots, channels, grids, support_grids) = reference;
    Ok(PackManifest {
        format: "EPK1".into(),
        num_classes,
        shots,
        channels,
        grids,
        support_grids,
        synth: synth.cloned(),
        episodes: episodes
            .iter()
            .map(|ep| EpisodeEntry {
                query_id: ep.query_id().to_owned(),
                present_classes: ep.present().iter().copied().collect(),
                gt_boxes: ep
                    .gt_boxes()
                    .iter()
                    .map(|(class, boxes)| ClassBoxes {
                        class: *class,
                        boxes: boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
                    })
                    .collect(),
            })
            .collect(),
    })
}

fn write_blob<W: Write>(w: &mut W, map: &FeatureMap) -> io::Result<()> {
    w.write_all(PACK_MAGIC)?;
    w.write_all(&3u32.to_le_bytes())?;
    for d in [map.channels(), map.height(), map.width()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.data().len() * 4);
    for v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_pack<W: Write>(
    w: &mut W,
    episodes: &[Episode],
    synth: Option<&SynthConfig>,
) -> Result<PackManifest> {
    let manifest = manifest_for(episodes, synth)?;
    let text = serde_json::to_vec_pretty(&manifest)?;
    w.write_all(PACK_MAGIC)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(&text)?;
    for ep in episodes {
        for m in ep.query() {
            write_blob(w, m)?;
        }
        for shots in ep.all_supports() {
            for shot in shots {
                for m in shot {
                    write_blob(w, m)?;
                }
            }
        }
    }
    Ok(manifest)
}

pub fn write_pack_file(
    path: impl AsRef<Path>,
    episodes: &[Episode],
    synth: Option<&SynthConfig>,
) -> Result<PackManifest> {
    let mut w = BufWriter::new(File::create(path)?);
    let manifest = write_pack(&mut w, episodes, synth)?;
    w.flush()?;
    Ok(manifest)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != PACK_MAGIC {
        return Err(PackError::Format(format!("bad magic {m:?} at {what}")));
    }
    Ok(())
}

fn read_blob<R: Read>(r: &mut R, expect: [usize; 3], level: Level) -> Result<FeatureMap> {
    read_magic(r, "tensor blob")?;
    let rank = read_u32(r)?;
    if rank != 3 {
        return Err(PackError::Format(format!("expected a rank-3 blob, found rank {rank}")));
    }
    let dims = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
    if dims != expect {
        return Err(PackError::Format(format!("blob dims {dims:?}, manifest says {expect:?}")));
    }
    let n = dims.iter().product::<usize>();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FeatureMap::new(dims[0], dims[1], dims[2], data, level).map_err(EpisodeError::from)?)
}

fn read_levels<R: Read>(r: &mut R, channels: [usize; 3], grids: [usize; 3]) -> Result<LevelMaps> {
    Ok([
        read_blob(r, [channels[0], grids[0], grids[0]], Level::L2)?,
        read_blob(r, [channels[1], grids[1], grids[1]], Level::L3)?,
        read_blob(r, [channels[2], grids[2], grids[2]], Level::L4)?,
    ])
}

pub fn read_pack<R: Read>(r: &mut R) -> Result<(PackManifest, Vec<Episode>)> {
    read_magic(r, "pack header")?;
    let len = read_u32(r)?;
    if len > MAX_MANIFEST {
        return Err(PackError::Format(format!("manifest length {len} is implausible")));
    }
    let mut text = vec![0u8; len as usize];
    r.read_exact(&mut text)?;
    let manifest: PackManifest = serde_json::from_slice(&text)?;
    if manifest.format != "EPK1" {
        return Err(PackError::Format(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.num_classes == 0 || manifest.shots == 0 {
        return Err(PackError::Format("pack needs classes and shots".into()));
    }
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let query = read_levels(r, manifest.channels, manifest.grids)?;
        let mut supports = Vec::with_capacity(manifest.num_classes);
        for _ in 0..manifest.num_classes {
            let shots = (0..manifest.shots)
                .map(|_| read_levels(r, manifest.channels, manifest.support_grids))
                .collect::<Result<Vec<_>>>()?;
            supports.push(shots);
        }
        let mut gt: BTreeMap<ClassId, Vec<BoundingBox>> = BTreeMap::new();
        for cb in &entry.gt_boxes {
            gt.entry(cb.class).or_default().extend(
                cb.boxes.iter().map(|b| BoundingBox::new(b[0], b[1], b[2], b[3])),
            );
        }
        let ep = Episode::new(entry.query_id.clone(), query, supports, gt)?;
        if ep.present().iter().ne(entry.present_classes.iter()) {
            return Err(PackError::Format(format!(
                "episode {}: present_classes disagree with gt_boxes",
                entry.query_id
            )));
        }
        episodes.push(ep);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(PackError::Format("trailing bytes after the last blob".into()));
    }
    Ok((manifest, episodes))
}

pub fn read_pack_file(path: impl AsRef<Path>) -> Result<(PackManifest, Vec<Episode>)> {
    read_pack(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::synth_episodes;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            present_count: 2,
            channels: [2, 3, 4],
            grids: [16, 8, 4],
            support_grids: [4, 2, 1],
            min_separation: 2.0,
            radius_min: 0.6,
            radius_max: 0.8,
            shots: 2,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let cfg = small_cfg();
        let eps = synth_episodes(&cfg, 3).unwrap();
        let mut a = Vec::new();
        write_pack(&mut a, &eps, Some(&cfg)).unwrap();
        let (manifest, back) = read_pack(&mut a.as_slice()).unwrap();
        assert_eq!(back, eps);
        assert_eq!(manifest.synth.as_ref(), Some(&cfg));
        let mut b = Vec::new();
        write_pack(&mut b, &back, manifest.synth.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blob_layout_is_little_endian() {
        let eps = synth_episodes(&small_cfg(), 1).unwrap();
        let mut buf = Vec::new();
        write_pack(&mut buf, &eps, None).unwrap();
        assert_eq!(&buf[..4], b"EPK1");
        let mlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let blob = &buf[8 + mlen..];
        assert_eq!(&blob[..4], b"EPK1");
        assert_eq!(u32::from_le_bytes(blob[4..8].try_into().unwrap()), 3);
        let dims: Vec<u32> =
            (0..3).map(|i| u32::from_le_bytes(blob[8 + 4 * i..12 + 4 * i].try_into().unwrap())).collect();
        assert_eq!(dims, vec![2, 16, 16]);
        let first = f32::from_le_bytes(blob[20..24].try_into().unwrap());
        assert_eq!(first, eps[0].query()[0].data()[0]);
    }

    #[test]
    fn rejects_corruption() {
        let eps = synth_episodes(&small_cfg(), 1).unwrap();
        let mut buf = Vec::new();
        write_pack(&mut buf, &eps, None).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_pack(&mut bad_magic.as_slice()), Err(PackError::Format(_))));

        let truncated = &buf[..buf.len() - 3];
        assert!(read_pack(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_pack(&mut trailing.as_slice()).is_err());

        assert!(write_pack(&mut Vec::new(), &[], None).is_err());
    }
}
