//! On-disk formats.
//!
//! * `FWL1` frames: `"FWL1" | u32 H | u32 W | u32 T | f32 voxels (h, w, t)`,
//!   optionally followed by `"TMAP" | u32 count | u32 indices`.
//! * `FWLL` label volumes: `"FWLL" | u32 H | u32 W | u32 T | u8 class codes`,
//!   with the same optional `TMAP` trailer and an optional `SBIN` trailer
//!   listing the sampled bins of an upsampled volume.
//! * Point clouds as ASCII PLY with per-vertex provenance and label.
//! * Trajectories as TUM text lines `timestamp tx ty tz qx qy qz qw`.
//! * Peak lists as CSV `pixel_row,pixel_col,position_bin,amplitude,width_bins,class`.
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{FwlError, Result};
use crate::frame::{check_index_map, Dims, FwlFrame, LabelVolume, Peak, PeakClass, Point3, PointCloud};
use crate::geometry::{Pose, Trajectory};

const FRAME_MAGIC: &[u8; 4] = b"FWL1";
const LABEL_MAGIC: &[u8; 4] = b"FWLL";
const TMAP_TAG: &[u8; 4] = b"TMAP";
const SBIN_TAG: &[u8; 4] = b"SBIN";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_index_list(buf: &mut Vec<u8>, tag: &[u8; 4], list: &[usize]) {
    buf.extend_from_slice(tag);
    put_u32(buf, list.len());
    for &i in list {
        put_u32(buf, i);
    }
}

/// Byte cursor that reports truncation as a format error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FwlError::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn dims(&mut self) -> Result<Dims> {
        let (h, w, t) = (self.u32()?, self.u32()?, self.u32()?);
        Ok(Dims::new(h, w, t))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn index_list(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn encode_frame(frame: &FwlFrame) -> Vec<u8> {
    let dims = frame.dims();
    let mut buf = Vec::with_capacity(16 + 4 * dims.len());
    buf.extend_from_slice(FRAME_MAGIC);
    put_u32(&mut buf, dims.h);
    put_u32(&mut buf, dims.w);
    put_u32(&mut buf, dims.t);
    for v in frame.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(map) = frame.t_index_map() {
        put_index_list(&mut buf, TMAP_TAG, map);
    }
    buf
}

pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<FwlFrame> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != FRAME_MAGIC {
        return Err(FwlError::format(path, "missing FWL1 magic"));
    }
    let dims = r.dims()?;
    let raw = r.take(4 * dims.len())?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut frame = FwlFrame::from_values(dims, values)
        .map_err(|e| FwlError::format(path, e.to_string()))?;
    if !r.done() {
        if r.take(4)? != TMAP_TAG {
            return Err(FwlError::format(path, "unknown trailer"));
        }
        let map = r.index_list()?;
        frame = frame
            .with_index_map(map)
            .map_err(|e| FwlError::format(path, e.to_string()))?;
    }
    if !r.done() {
        return Err(FwlError::format(path, "trailing bytes"));
    }
    Ok(frame)
}

pub fn write_frame(path: &Path, frame: &FwlFrame) -> Result<()> {
    fs::write(path, encode_frame(frame))?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<FwlFrame> {
    let bytes = fs::read(path)?;
    decode_frame(&bytes, path)
}

pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    let dims = labels.dims();
    let mut buf = Vec::with_capacity(16 + dims.len());
    buf.extend_from_slice(LABEL_MAGIC);
    put_u32(&mut buf, dims.h);
    put_u32(&mut buf, dims.w);
    put_u32(&mut buf, dims.t);
    buf.extend(labels.labels().iter().map(|c| c.code()));
    if let Some(map) = &labels.t_index_map {
        put_index_list(&mut buf, TMAP_TAG, map);
    }
    if let Some(bins) = &labels.sampled_bins {
        put_index_list(&mut buf, SBIN_TAG, bins);
    }
    buf
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelVolume> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != LABEL_MAGIC {
        return Err(FwlError::format(path, "missing FWLL magic"));
    }
    let dims = r.dims()?;
    let labels = r
        .take(dims.len())?
        .iter()
        .map(|&c| {
            PeakClass::from_code(c).ok_or_else(|| FwlError::format(path, format!("bad class code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lv = LabelVolume::from_labels(dims, labels)?;
    while !r.done() {
        let tag = r.take(4)?;
        let list = r.index_list()?;
        if tag == TMAP_TAG {
            check_index_map(&list, dims.t).map_err(|e| FwlError::format(path, e.to_string()))?;
            lv.t_index_map = Some(list);
        } else if tag == SBIN_TAG {
            if list.windows(2).any(|w| w[1] <= w[0]) || list.last().is_some_and(|&b| b >= dims.t) {
                return Err(FwlError::format(path, "sampled bins must be increasing and in range"));
            }
            lv.sampled_bins = Some(list);
        } else {
            return Err(FwlError::format(path, "unknown trailer"));
        }
    }
    Ok(lv)
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let bytes = fs::read(path)?;
    decode_labels(&bytes, path)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "property uint row")?;
    writeln!(w, "property uint col")?;
    writeln!(w, "property double bin")?;
    writeln!(w, "property uchar label")?;
    writeln!(w, "end_header")?;
    for p in &cloud.points {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            p.position.x,
            p.position.y,
            p.position.z,
            p.row,
            p.col,
            p.bin,
            p.label.code()
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an ASCII PLY; only `x`, `y`, `z` are required, other known
/// properties are picked up when present.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| FwlError::format(path, "unexpected end of header"))?
            .map_err(FwlError::from)
    };
    if next()?.trim() != "ply" {
        return Err(FwlError::format(path, "missing ply magic"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(FwlError::format(path, "only ascii PLY is supported"))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| FwlError::format(path, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(FwlError::format(path, "list properties are not supported"))
            }
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| FwlError::format(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(FwlError::format(path, "x/y/z properties required")),
    };
    let (irow, icol, ibin, ilabel) = (col("row"), col("col"), col("bin"), col("label"));
    let mut points = Vec::with_capacity(count);
    for n in 0..count {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| FwlError::format(path, format!("bad number in vertex {n}")))?;
        if vals.len() != props.len() {
            return Err(FwlError::format(path, format!("vertex {n} has {} fields", vals.len())));
        }
        let get = |i: Option<usize>| i.map(|i| vals[i]);
        let position = Vector3::new(vals[ix], vals[iy], vals[iz]);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(FwlError::format(path, format!("vertex {n} is not finite")));
        }
        let label = match get(ilabel) {
            Some(c) => PeakClass::from_code(c as u8)
                .ok_or_else(|| FwlError::format(path, format!("bad label in vertex {n}")))?,
            None => PeakClass::Undefined,
        };
        points.push(Point3 {
            position,
            row: get(irow).unwrap_or(0.0) as usize,
            col: get(icol).unwrap_or(0.0) as usize,
            bin: get(ibin).unwrap_or(0.0),
            label,
        });
    }
    Ok(PointCloud::new(points))
}

pub fn format_tum(traj: &Trajectory) -> String {
    let mut s = String::new();
    for p in traj.poses() {
        let t = p.translation();
        let q = p.rotation().into_inner();
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| FwlError::format(path, format!("line {}: bad number", lineno + 1)))?;
        if vals.len() != 8 {
            return Err(FwlError::format(
                path,
                format!("line {}: expected 8 fields, got {}", lineno + 1, vals.len()),
            ));
        }
        let pose = Pose::from_raw_quaternion(
            Vector3::new(vals[1], vals[2], vals[3]),
            [vals[4], vals[5], vals[6], vals[7]],
            vals[0],
        )
        .map_err(|e| FwlError::format(path, format!("line {}: {e}", lineno + 1)))?;
        poses.push(pose);
    }
    Trajectory::new(poses).map_err(|e| FwlError::format(path, e.to_string()))
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    fs::write(path, format_tum(traj))?;
    Ok(())
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    parse_tum(&fs::read_to_string(path)?, path)
}

pub const PEAK_CSV_HEADER: &str = "pixel_row,pixel_col,position_bin,amplitude,width_bins,class";

pub fn format_peaks_csv(peaks: &[Peak]) -> String {
    let mut s = String::from(PEAK_CSV_HEADER);
    s.push('\n');
    for p in peaks {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.row, p.col, p.position, p.amplitude, p.width, p.label
        ));
    }
    s
}

pub fn parse_peaks_csv(text: &str, path: &Path) -> Result<Vec<Peak>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PEAK_CSV_HEADER) {
        return Err(FwlError::format(path, "missing peak CSV header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || FwlError::format(path, format!("line {}: malformed peak", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(Peak {
                row: f[0].parse().map_err(|_| bad())?,
                col: f[1].parse().map_err(|_| bad())?,
                position: f[2].parse().map_err(|_| bad())?,
                amplitude: f[3].parse().map_err(|_| bad())?,
                width: f[4].parse().map_err(|_| bad())?,
                label: PeakClass::parse(f[5]).ok_or_else(bad)?,
            })
        })
        .collect()
}

pub fn write_peaks_csv(path: &Path, peaks: &[Peak]) -> Result<()> {
    fs::write(path, format_peaks_csv(peaks))?;
    Ok(())
}

pub fn read_peaks_csv(path: &Path) -> Result<Vec<Peak>> {
    parse_peaks_csv(&fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_layout_is_bit_exact() {
        let dims = Dims::new(1, 2, 2);
        let f = FwlFrame::from_values(dims, vec![1.0, 2.0, 3.0, 0.5])
            .unwrap()
            .with_index_map(vec![4, 9])
            .unwrap();
        let bytes = encode_frame(&f);
        let mut expected = b"FWL1".to_vec();
        for v in [1u32, 2, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(b"TMAP");
        for v in [2u32, 4, 9] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode_frame(&bytes, Path::new("x")).unwrap(), f);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let p = Path::new("x");
        assert!(decode_frame(b"FWL2\0\0\0\0", p).is_err());
        let mut bytes = encode_frame(&FwlFrame::zeros(Dims::new(2, 2, 2)));
        bytes.pop();
        assert!(decode_frame(&bytes, p).is_err());
        assert!(decode_labels(b"FWLL\x01\0\0\0\x01\0\0\0\x01\0\0\0\x09", p).is_err());
    }

    #[test]
    fn label_codes_on_disk() {
        let dims = Dims::new(1, 1, 5);
        let lv = LabelVolume::from_labels(
            dims,
            vec![
                PeakClass::Object,
                PeakClass::Glass,
                PeakClass::Ghost,
                PeakClass::Noise,
                PeakClass::Undefined,
            ],
        )
        .unwrap();
        let bytes = encode_labels(&lv);
        assert_eq!(&bytes[16..], &[0, 1, 2, 3, 255]);
        assert_eq!(decode_labels(&bytes, Path::new("x")).unwrap(), lv);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![
            Point3 {
                position: Vector3::new(1.5, -2.25, 0.1),
                row: 3,
                col: 4,
                bin: 101.375,
                label: PeakClass::Ghost,
            },
            Point3::at(0.0, 0.0, 1.0),
        ]);
        let p = dir.path().join("c.ply");
        write_ply(&p, &cloud).unwrap();
        assert_eq!(read_ply(&p).unwrap(), cloud);

        let traj = Trajectory::new(vec![
            Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0), 0.5),
            Pose::from_yaw(-1.0, Vector3::new(0.0, 2.0, 3.0), 1.5),
        ])
        .unwrap();
        let p = dir.path().join("t.tum");
        write_tum(&p, &traj).unwrap();
        let back = read_tum(&p).unwrap();
        for (a, b) in traj.poses().iter().zip(back.poses()) {
            assert!(a.approx_eq(b, 1e-12));
            assert_eq!(a.timestamp, b.timestamp);
        }
    }

    #[test]
    fn ply_without_extras_reads_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 2 3\n",
        )
        .unwrap();
        let c = read_ply(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points[1].position, Vector3::new(1.0, 2.0, 3.0));
    }

    proptest! {
        #[test]
        fn peak_csv_round_trips(
            raw in proptest::collection::vec(
                (0usize..512, 0usize..400, 0.0f64..699.0, 1e-3f64..1e3, 0.1f64..20.0, 0usize..4), 0..20)
        ) {
            let peaks: Vec<Peak> = raw.into_iter().map(|(row, col, position, amplitude, width, c)| Peak {
                row, col, position, amplitude, width, label: PeakClass::TRAINABLE[c],
            }).collect();
            let text = format_peaks_csv(&peaks);
            prop_assert_eq!(parse_peaks_csv(&text, Path::new("x")).unwrap(), peaks);
        }
    }
}
