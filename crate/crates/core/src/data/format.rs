//! `CMVD` dataset files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic         4 bytes  "CMVD"
//! version       u32      1
//! num_videos    u32
//! num_classes   u32
//! t_total       u32
//! channels      u32
//! height        u32
//! width         u32
//! mean[C]       f32 × C
//! std[C]        f32 × C
//! seed          u64
//! per video:
//!   label       u32
//!   pixels      u8 × (t_total·C·H·W), T×C×H×W order, value = round(255·p)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::synthetic::{video_seed, ChannelStats, Dataset, DatasetHeader, SyntheticVideo};
use super::DataError;

pub const DATASET_MAGIC: &[u8; 4] = b"CMVD";
pub const DATASET_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), DataError> {
    let v = u32::try_from(v).map_err(|_| DataError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<(), DataError> {
    let h = &ds.header;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [ds.videos.len(), h.num_classes, h.t_total, h.channels, h.height, h.width] {
        put_u32(w, v)?;
    }
    for &m in &h.stats.mean {
        w.write_all(&m.to_le_bytes())?;
    }
    for &s in &h.stats.std {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&h.seed.to_le_bytes())?;
    let expected = h.video_len();
    for v in &ds.videos {
        if v.pixels.len() != expected {
            return Err(DataError::Format(format!(
                "video has {} pixels, header implies {expected}",
                v.pixels.len()
            )));
        }
        put_u32(w, v.label)?;
        w.write_all(&v.pixels)?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32(r: &mut impl Read) -> Result<f32, DataError> {
    Ok(f32::from_bits(get_u32(r)?))
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let num_videos = get_u32(r)? as usize;
    let num_classes = get_u32(r)? as usize;
    let t_total = get_u32(r)? as usize;
    let channels = get_u32(r)? as usize;
    let height = get_u32(r)? as usize;
    let width = get_u32(r)? as usize;
    if num_classes == 0 || t_total == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(DataError::Format("zero extent in header".into()));
    }
    let mean = (0..channels).map(|_| get_f32(r)).collect::<Result<Vec<_>, _>>()?;
    let std = (0..channels).map(|_| get_f32(r)).collect::<Result<Vec<_>, _>>()?;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let seed = u64::from_le_bytes(seed);
    let header = DatasetHeader {
        num_classes,
        t_total,
        channels,
        height,
        width,
        stats: ChannelStats { mean, std },
        seed,
    };
    let len = header.video_len();
    let mut videos = Vec::with_capacity(num_videos);
    for i in 0..num_videos {
        let label = get_u32(r)? as usize;
        if label >= num_classes {
            return Err(DataError::Format(format!("label {label} >= num_classes {num_classes}")));
        }
        let mut pixels = vec![0u8; len];
        r.read_exact(&mut pixels)?;
        videos.push(SyntheticVideo {
            pixels,
            label,
            seed: video_seed(seed, i),
        });
    }
    Ok(Dataset { header, videos })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, GenerateConfig};

    fn small() -> Dataset {
        generate(&GenerateConfig {
            num_videos: 8,
            t_total: 5,
            channels: 2,
            height: 8,
            width: 6,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_in_memory() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CMVD");
        let header_len = 4 + 4 + 6 * 4 + 2 * 2 * 4 + 8;
        assert_eq!(buf.len(), header_len + 8 * (4 + 5 * 2 * 8 * 6));
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert!(read_dataset(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(read_dataset(&mut buf.as_slice()), Err(DataError::Format(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let ds = small();
        let err = save_dataset(&ds, Path::new("/nonexistent-dir/x.cmvd")).unwrap_err();
        assert!(matches!(err, DataError::Io(_)));
    }
}
