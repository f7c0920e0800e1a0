//! On-disk volume format: a JSON header next to a raw little-endian payload
//! with the same stem (`ct.json` + `ct.raw`), x-fastest ordering.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{Dims, FeatureVolume, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub dtype: DType,
    pub channels: usize,
}

impl VolumeHeader {
    fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }
}

/// Raw payload path for a header path: same stem, `.raw` extension.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_pair(header_path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    write_json(header_path, header)?;
    let raw = raw_path(header_path);
    fs::write(&raw, payload).map_err(|e| Error::io(raw, e))
}

fn read_pair(header_path: &Path, dtype: DType) -> Result<(VolumeHeader, Vec<u8>)> {
    let header: VolumeHeader = read_json(header_path)?;
    if header.dtype != dtype {
        return Err(Error::format(
            header_path,
            format!("expected dtype {dtype:?}, found {:?}", header.dtype),
        ));
    }
    if header.channels == 0 {
        return Err(Error::format(header_path, "channels must be >= 1"));
    }
    let raw = raw_path(header_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::U8 => 1,
    };
    let expect = header.dims().len() * header.channels * width;
    if bytes.len() != expect {
        return Err(Error::format(
            &raw,
            format!("payload is {} bytes, header implies {expect}", bytes.len()),
        ));
    }
    Ok((header, bytes))
}

fn f32_payload(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_intensity(header_path: &Path, vol: &Volume<f32>) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims().as_array(),
        dtype: DType::F32,
        channels: 1,
    };
    write_pair(header_path, &header, &f32_payload(vol.data()))
}

pub fn read_intensity(header_path: &Path) -> Result<Volume<f32>> {
    let (header, bytes) = read_pair(header_path, DType::F32)?;
    if header.channels != 1 {
        return Err(Error::format(
            header_path,
            "intensity volume must have one channel",
        ));
    }
    Volume::from_vec(header.dims(), f32_values(&bytes))
}

pub fn write_mask(header_path: &Path, mask: &Mask) -> Result<()> {
    let header = VolumeHeader {
        dims: mask.dims().as_array(),
        dtype: DType::U8,
        channels: 1,
    };
    let payload: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_pair(header_path, &header, &payload)
}

pub fn read_mask(header_path: &Path) -> Result<Mask> {
    let (header, bytes) = read_pair(header_path, DType::U8)?;
    if header.channels != 1 {
        return Err(Error::format(
            header_path,
            "mask volume must have one channel",
        ));
    }
    let data = bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(
                header_path,
                format!("binary mask holds value {other}"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::from_vec(header.dims(), data)
}

pub fn write_features(header_path: &Path, feats: &FeatureVolume) -> Result<()> {
    let header = VolumeHeader {
        dims: feats.dims().as_array(),
        dtype: DType::F32,
        channels: feats.channels(),
    };
    write_pair(header_path, &header, &f32_payload(feats.data()))
}

pub fn read_features(header_path: &Path) -> Result<FeatureVolume> {
    let (header, bytes) = read_pair(header_path, DType::F32)?;
    FeatureVolume::from_vec(header.dims(), header.channels, f32_values(&bytes))
}
