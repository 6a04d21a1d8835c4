//! VIPF frame files.
//!
//! Little-endian: `b"VIPF"`, u32 version (1), u32 width, u32 height,
//! u64 frame_index, u8 current_on, f64 exposure_s, then width·height f32
//! ADU values row-major. A file holds one frame or a concatenated stream.

use std::io::{ErrorKind, Read, Write};

use super::{FrameMeta, PixelFrame};
use crate::error::{format_err, Result};

pub const MAGIC: &[u8; 4] = b"VIPF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1 + 8;

pub fn write_frame<W: Write>(w: &mut W, frame: &PixelFrame) -> Result<()> {
    frame.validate()?;
    let dim = |n: usize| u32::try_from(n).map_err(|_| format_err("VIPF", format!("dimension {n} exceeds u32")));
    let mut head = Vec::with_capacity(HEADER_LEN);
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&dim(frame.width)?.to_le_bytes());
    head.extend_from_slice(&dim(frame.height)?.to_le_bytes());
    head.extend_from_slice(&frame.meta.frame_index.to_le_bytes());
    head.push(frame.meta.current_on as u8);
    head.extend_from_slice(&frame.meta.exposure.to_le_bytes());
    w.write_all(&head)?;
    let mut body = Vec::with_capacity(frame.adu.len() * 4);
    for v in &frame.adu {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn write_frames<'a, W: Write>(w: &mut W, frames: impl IntoIterator<Item = &'a PixelFrame>) -> Result<()> {
    for f in frames {
        write_frame(w, f)?;
    }
    Ok(())
}

/// Reads the next frame, or `None` at a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<PixelFrame>> {
    let mut head = [0u8; HEADER_LEN];
    // distinguish a clean EOF from a truncated header
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if got == 0 {
        return Ok(None);
    }
    if got < HEADER_LEN {
        return Err(format_err("VIPF", "truncated header"));
    }
    if &head[0..4] != MAGIC {
        return Err(format_err("VIPF", "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(format_err("VIPF", format!("unsupported version {version}")));
    }
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let frame_index = u64::from_le_bytes(head[16..24].try_into().unwrap());
    let current_on = match head[24] {
        0 => false,
        1 => true,
        b => return Err(format_err("VIPF", format!("current_on byte {b}"))),
    };
    let exposure = f64::from_le_bytes(head[25..33].try_into().unwrap());
    let n = width
        .checked_mul(height)
        .filter(|n| *n > 0)
        .ok_or_else(|| format_err("VIPF", format!("bad frame size {width}x{height}")))?;
    let mut body = vec![0u8; n * 4];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => format_err("VIPF", "truncated pixel data"),
        _ => e.into(),
    })?;
    let adu = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frame = PixelFrame {
        width,
        height,
        adu,
        meta: FrameMeta {
            seed: None,
            exposure,
            current_on,
            frame_index,
        },
    };
    frame.validate()?;
    Ok(Some(frame))
}

/// Iterator over the frames of a VIPF stream.
pub struct FrameReader<R> {
    inner: R,
    done: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, done: false }
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<PixelFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match read_frame(&mut self.inner) {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn read_frames<R: Read>(r: R) -> Result<Vec<PixelFrame>> {
    FrameReader::new(r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_frame, SimConfig};

    fn small() -> SimConfig {
        SimConfig {
            frame_width: 37,
            frame_height: 23,
            rates: crate::sim::Rates {
                continuum: 5.0,
                kalpha: 3.0,
                kbeta: 1.0,
                tracks: 1.0,
            },
            ..SimConfig::default()
        }
    }

    #[test]
    fn stream_round_trip_is_bit_exact() {
        let cfg = small();
        let frames: Vec<_> = (0..4).map(|i| simulate_frame(&cfg, i, i % 2 == 0).unwrap()).collect();
        let mut buf = Vec::new();
        write_frames(&mut buf, &frames).unwrap();
        assert_eq!(buf.len(), 4 * (HEADER_LEN + 37 * 23 * 4));
        let back = read_frames(&buf[..]).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.width, b.width);
            assert_eq!(a.height, b.height);
            assert_eq!(b.meta.seed, None);
            assert_eq!(a.meta.frame_index, b.meta.frame_index);
            assert_eq!(a.meta.current_on, b.meta.current_on);
            assert_eq!(a.meta.exposure.to_bits(), b.meta.exposure.to_bits());
            let bits = |f: &PixelFrame| f.adu.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn header_layout() {
        let f = simulate_frame(&small(), 9, true).unwrap();
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        assert_eq!(&buf[0..4], b"VIPF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 37);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 23);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 9);
        assert_eq!(buf[24], 1);
        assert_eq!(f64::from_le_bytes(buf[25..33].try_into().unwrap()), 600.0);
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let f = simulate_frame(&small(), 0, false).unwrap();
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_frames(&bad[..]).is_err());

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_frames(&bad[..]).is_err());

        assert!(read_frames(&buf[..buf.len() - 1]).is_err());
        assert!(read_frames(&buf[..10]).is_err());
        assert!(read_frames(&[][..]).unwrap().is_empty());
    }
}
