//! MRC2014 reader/writer for the 32-bit-float (mode 2) little-endian subset.
//!
//! Volumes are nx = ny = nz cubes; stacks are m x m x P with nz = P. The
//! full 1024-byte header is preserved across a read-modify-write cycle, so
//! header words this library does not interpret survive a rewrite.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;

use crate::error::CryoError;

/// MRC header length in bytes.
pub const HEADER_LEN: usize = 1024;

/// In-memory MRC file: data plus the raw header it was read with (or a
/// freshly built one).
#[derive(Debug, Clone)]
pub struct MrcData {
    /// Data indexed (section, row, column) = (nz, ny, nx).
    pub data: Array3<f32>,
    /// Raw 1024-byte header; essential words are synchronized on write.
    pub header: Vec<u8>,
    /// Extended header bytes (preserved verbatim).
    pub extended: Vec<u8>,
}

fn word_i32(header: &[u8], index: usize) -> i32 {
    LittleEndian::read_i32(&header[4 * index..4 * index + 4])
}

fn word_f32(header: &[u8], index: usize) -> f32 {
    LittleEndian::read_f32(&header[4 * index..4 * index + 4])
}

fn set_word_i32(header: &mut [u8], index: usize, v: i32) {
    LittleEndian::write_i32(&mut header[4 * index..4 * index + 4], v);
}

fn set_word_f32(header: &mut [u8], index: usize, v: f32) {
    LittleEndian::write_f32(&mut header[4 * index..4 * index + 4], v);
}

impl MrcData {
    /// Wraps a data block in a fresh default header. `voxel_size` fills the
    /// cell dimensions; the origin is placed at the volume center.
    pub fn new(data: Array3<f32>, voxel_size: [f32; 3]) -> Self {
        let (nz, ny, nx) = data.dim();
        let mut header = vec![0u8; HEADER_LEN];
        set_word_i32(&mut header, 0, nx as i32);
        set_word_i32(&mut header, 1, ny as i32);
        set_word_i32(&mut header, 2, nz as i32);
        set_word_i32(&mut header, 3, 2); // mode 2: 32-bit float
        set_word_i32(&mut header, 7, nx as i32); // mx
        set_word_i32(&mut header, 8, ny as i32);
        set_word_i32(&mut header, 9, nz as i32);
        set_word_f32(&mut header, 10, nx as f32 * voxel_size[0]); // cella
        set_word_f32(&mut header, 11, ny as f32 * voxel_size[1]);
        set_word_f32(&mut header, 12, nz as f32 * voxel_size[2]);
        set_word_f32(&mut header, 13, 90.0); // cellb
        set_word_f32(&mut header, 14, 90.0);
        set_word_f32(&mut header, 15, 90.0);
        set_word_i32(&mut header, 16, 1); // mapc
        set_word_i32(&mut header, 17, 2); // mapr
        set_word_i32(&mut header, 18, 3); // maps
        set_word_i32(&mut header, 22, 1); // ispg
        set_word_i32(&mut header, 27, 20140); // nversion
        set_word_f32(&mut header, 49, -(nx as f32) / 2.0 * voxel_size[0]); // origin
        set_word_f32(&mut header, 50, -(ny as f32) / 2.0 * voxel_size[1]);
        set_word_f32(&mut header, 51, -(nz as f32) / 2.0 * voxel_size[2]);
        header[4 * 52..4 * 52 + 4].copy_from_slice(b"MAP ");
        header[4 * 53..4 * 53 + 4].copy_from_slice(&[0x44, 0x44, 0x00, 0x00]); // LE machst
        let mut out = MrcData {
            data,
            header,
            extended: Vec::new(),
        };
        out.sync_statistics();
        out
    }

    /// Refreshes the min/max/mean/rms header words from the data.
    fn sync_statistics(&mut self) {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &v in self.data.iter() {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        let count = self.data.len().max(1) as f64;
        let mean = sum / count;
        let rms = (self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count)
            .sqrt();
        set_word_f32(&mut self.header, 19, min);
        set_word_f32(&mut self.header, 20, max);
        set_word_f32(&mut self.header, 21, mean as f32);
        set_word_f32(&mut self.header, 54, rms as f32);
    }

    /// Dimensions as (nx, ny, nz).
    pub fn dims(&self) -> (usize, usize, usize) {
        let (nz, ny, nx) = self.data.dim();
        (nx, ny, nz)
    }

    /// Voxel size per axis from the cell dimensions.
    pub fn voxel_size(&self) -> [f32; 3] {
        let (nx, ny, nz) = self.dims();
        [
            word_f32(&self.header, 10) / nx as f32,
            word_f32(&self.header, 11) / ny as f32,
            word_f32(&self.header, 12) / nz as f32,
        ]
    }

    /// Interprets the file as a cubic volume; rejects nx != ny or ny != nz.
    pub fn as_volume(&self) -> Result<Array3<f64>, CryoError> {
        let (nx, ny, nz) = self.dims();
        if nx != ny || ny != nz {
            return Err(CryoError::Mrc(format!(
                "volume must be cubic, file is {nx} x {ny} x {nz}"
            )));
        }
        Ok(self.data.mapv(|v| v as f64))
    }

    /// Interprets the file as an image stack (nx = ny = m, nz = P):
    /// returns P images of shape (m, m).
    pub fn as_stack(&self) -> Result<Vec<ndarray::Array2<f64>>, CryoError> {
        let (nx, ny, nz) = self.dims();
        if nx != ny {
            return Err(CryoError::Mrc(format!(
                "stack sections must be square, file is {nx} x {ny}"
            )));
        }
        Ok((0..nz)
            .map(|p| {
                self.data
                    .index_axis(ndarray::Axis(0), p)
                    .mapv(|v| v as f64)
            })
            .collect())
    }
}

/// Builds an MRC container from a cubic f64 volume (values cast to f32).
pub fn volume_to_mrc(v: &Array3<f64>, voxel_size: f32) -> MrcData {
    MrcData::new(v.mapv(|x| x as f32), [voxel_size; 3])
}

/// Builds an MRC stack container from P images of shape (m, m).
pub fn stack_to_mrc(images: &[ndarray::Array2<f64>], pixel_size: [f32; 2]) -> MrcData {
    let p = images.len();
    let (ny, nx) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut data = Array3::<f32>::zeros((p, ny, nx));
    for (s, img) in images.iter().enumerate() {
        for ((i, j), v) in img.indexed_iter() {
            data[(s, i, j)] = *v as f32;
        }
    }
    MrcData::new(data, [pixel_size[0], pixel_size[1], 1.0])
}

/// Reads a mode-2 MRC file.
pub fn read_mrc(path: &Path) -> Result<MrcData, CryoError> {
    let mut file = std::fs::File::open(path)?;
    let mut header = vec![0u8; HEADER_LEN];
    read_exact_at(&mut file, &mut header, 0)?;
    let mode = word_i32(&header, 3);
    if mode != 2 {
        return Err(CryoError::Mrc(format!(
            "unsupported MRC mode {mode}; only mode 2 (32-bit float) is supported"
        )));
    }
    let nx = word_i32(&header, 0);
    let ny = word_i32(&header, 1);
    let nz = word_i32(&header, 2);
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(CryoError::Mrc(format!(
            "non-positive dimensions {nx} x {ny} x {nz}"
        )));
    }
    let nsymbt = word_i32(&header, 23).max(0) as usize;
    let mut extended = vec![0u8; nsymbt];
    read_exact_at(&mut file, &mut extended, HEADER_LEN)?;
    let count = nx as usize * ny as usize * nz as usize;
    let mut raw = vec![0u8; 4 * count];
    read_exact_at(&mut file, &mut raw, HEADER_LEN + nsymbt)?;
    let mut data = Array3::<f32>::zeros((nz as usize, ny as usize, nx as usize));
    for (i, v) in data.iter_mut().enumerate() {
        *v = LittleEndian::read_f32(&raw[4 * i..4 * i + 4]);
    }
    Ok(MrcData {
        data,
        header,
        extended,
    })
}

fn read_exact_at(
    file: &mut std::fs::File,
    buf: &mut [u8],
    offset: usize,
) -> Result<(), CryoError> {
    let mut filled = 0;
    while filled < buf.len() {
        let got = file.read(&mut buf[filled..])?;
        if got == 0 {
            return Err(CryoError::Mrc(format!(
                "truncated file: needed {} bytes at byte offset {}",
                buf.len(),
                offset + filled
            )));
        }
        filled += got;
    }
    Ok(())
}

/// Writes a mode-2 MRC file; dimensions, mode, and statistics words are
/// synchronized with the data, every other header word is written as stored.
pub fn write_mrc(path: &Path, mrc: &MrcData) -> Result<(), CryoError> {
    let mut m = mrc.clone();
    let (nx, ny, nz) = m.dims();
    set_word_i32(&mut m.header, 0, nx as i32);
    set_word_i32(&mut m.header, 1, ny as i32);
    set_word_i32(&mut m.header, 2, nz as i32);
    set_word_i32(&mut m.header, 3, 2);
    set_word_i32(&mut m.header, 23, m.extended.len() as i32);
    m.sync_statistics();
    let mut file = std::fs::File::create(path)?;
    file.write_all(&m.header)?;
    file.write_all(&m.extended)?;
    let mut raw = vec![0u8; 4 * m.data.len()];
    for (i, v) in m.data.iter().enumerate() {
        LittleEndian::write_f32(&mut raw[4 * i..4 * i + 4], *v);
    }
    file.write_all(&raw)?;
    Ok(())
}
