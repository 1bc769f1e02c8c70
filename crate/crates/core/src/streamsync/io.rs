//! On-disk episode layout and NDJSON frame records.
//!
//! An episode directory holds `episode.toml` and one record file per
//! modality (`rgb.slip`, `depth.slip`, `audio.slip`, `ft.slip`). Record
//! files are little-endian:
//!
//! ```text
//! magic       [u8; 4]   b"SLIP"
//! version     u16       1
//! modality    u8        0 rgb, 1 depth, 2 audio, 3 ft
//! sample type u8        0 u8, 1 u16, 2 f32, 3 f64
//! rank        u8
//! dims        u32 × rank
//! records     (timestamp f64, payload sample × prod(dims))*
//! ```
//!
//! Every frame in a file shares the header shape.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Condition, Modality, SensorFrame, StreamSet};
use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"SLIP";
pub const STREAM_VERSION: u16 = 1;
const MANIFEST_FILE: &str = "episode.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleType {
    U8,
    U16,
    F32,
    F64,
}

impl SampleType {
    fn code(self) -> u8 {
        match self {
            SampleType::U8 => 0,
            SampleType::U16 => 1,
            SampleType::F32 => 2,
            SampleType::F64 => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => SampleType::U8,
            1 => SampleType::U16,
            2 => SampleType::F32,
            3 => SampleType::F64,
            other => return Err(Error::Format(format!("unknown sample type code {other}"))),
        })
    }

    /// Storage type the simulator quantizes each modality to.
    pub fn for_modality(modality: Modality) -> Self {
        match modality {
            Modality::Rgb => SampleType::U8,
            Modality::Depth => SampleType::U16,
            Modality::Audio | Modality::ForceTorque => SampleType::F32,
        }
    }

    fn write(self, w: &mut impl Write, v: f64) -> std::io::Result<bool> {
        match self {
            SampleType::U8 => {
                let q = v as u8;
                w.write_u8(q)?;
                Ok(q as f64 == v)
            }
            SampleType::U16 => {
                let q = v as u16;
                w.write_u16::<LittleEndian>(q)?;
                Ok(q as f64 == v)
            }
            SampleType::F32 => {
                let q = v as f32;
                w.write_f32::<LittleEndian>(q)?;
                Ok(q as f64 == v)
            }
            SampleType::F64 => {
                w.write_f64::<LittleEndian>(v)?;
                Ok(true)
            }
        }
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            SampleType::U8 => r.read_u8()? as f64,
            SampleType::U16 => r.read_u16::<LittleEndian>()? as f64,
            SampleType::F32 => r.read_f32::<LittleEndian>()? as f64,
            SampleType::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

/// Writes one modality stream. Fails if a value is not exactly
/// representable in `sample_type`.
pub fn write_stream_file(
    path: &Path,
    modality: Modality,
    frames: &[SensorFrame],
    sample_type: SampleType,
) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let shape = match frames.first() {
        Some(f) => f.shape.clone(),
        None => return Err(Error::MissingModality(modality)),
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut header = Vec::new();
    header.extend_from_slice(STREAM_MAGIC);
    header.write_u16::<LittleEndian>(STREAM_VERSION).unwrap();
    header.write_u8(modality.index() as u8).unwrap();
    header.write_u8(sample_type.code()).unwrap();
    header.write_u8(shape.len() as u8).unwrap();
    for &d in &shape {
        header.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    w.write_all(&header).map_err(io_err)?;
    for frame in frames {
        if frame.modality != modality || frame.shape != shape {
            return Err(Error::ShapeMismatch {
                modality,
                expected: shape.clone(),
                got: frame.shape.clone(),
            });
        }
        w.write_f64::<LittleEndian>(frame.timestamp).map_err(io_err)?;
        for &v in &frame.payload {
            if !sample_type.write(&mut w, v).map_err(io_err)? {
                return Err(Error::Format(format!(
                    "{modality} value {v} not representable as {sample_type:?}"
                )));
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_stream_file(path: &Path) -> Result<(Modality, Vec<SensorFrame>)> {
    let io_err = |e| Error::io(path, e);
    let bytes = fs::read(path).map_err(io_err)?;
    let mut r = std::io::Cursor::new(bytes.as_slice());
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != STREAM_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != STREAM_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let modality = Modality::from_index(r.read_u8().map_err(|_| bad("truncated header"))? as usize)
        .ok_or_else(|| bad("unknown modality code"))?;
    let sample_type = SampleType::from_code(r.read_u8().map_err(|_| bad("truncated header"))?)?;
    let rank = r.read_u8().map_err(|_| bad("truncated header"))? as usize;
    let shape = (0..rank)
        .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|_| bad("truncated header"))?;
    let count: usize = shape.iter().product();

    let mut frames = Vec::new();
    while (r.position() as usize) < bytes.len() {
        let timestamp = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated record"))?;
        let payload = (0..count)
            .map(|_| sample_type.read(&mut r))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|_| bad("truncated record"))?;
        frames.push(SensorFrame::new(modality, timestamp, shape.clone(), payload)?);
    }
    Ok((modality, frames))
}

/// `episode.toml`: condition and drop time, plus free-form provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub episode_id: String,
    pub condition: Condition,
    pub drop_time: Option<f64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn stream_file_name(modality: Modality) -> String {
    format!("{}.slip", modality.name())
}

pub fn write_episode(dir: &Path, streams: &StreamSet, manifest: &EpisodeManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for modality in Modality::ALL {
        write_stream_file(
            &dir.join(stream_file_name(modality)),
            modality,
            streams.stream(modality),
            SampleType::for_modality(modality),
        )?;
    }
    let text = toml::to_string(manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_episode(dir: &Path) -> Result<(StreamSet, EpisodeManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EpisodeManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut set = StreamSet::new(
        manifest.episode_id.clone(),
        manifest.condition,
        manifest.drop_time,
    );
    for modality in Modality::ALL {
        let file = dir.join(stream_file_name(modality));
        if !file.exists() {
            return Err(Error::MissingModality(modality));
        }
        let (found, frames) = read_stream_file(&file)?;
        if found != modality {
            return Err(Error::Format(format!(
                "{} holds {found} frames",
                file.display()
            )));
        }
        set = set.with_stream(modality, frames);
    }
    set.validate()?;
    Ok((set, manifest))
}

/// Parses one NDJSON frame object:
/// `{"modality":"ft","timestamp":0.1,"shape":[6],"payload":[...]}`.
pub fn parse_frame_ndjson(line: &str) -> Result<SensorFrame> {
    let frame: SensorFrame =
        serde_json::from_str(line).map_err(|e| Error::Format(format!("frame record: {e}")))?;
    frame.validate()?;
    if frame.payload.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} payload", frame.modality)));
    }
    Ok(frame)
}

pub fn format_frame_ndjson(frame: &SensorFrame) -> String {
    serde_json::to_string(frame).expect("frames always serialize")
}
