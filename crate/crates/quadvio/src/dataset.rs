//! Line-oriented dataset format shared by the simulator and the estimator.
//!
//! ASCII, whitespace-separated, one record per line, globally time-sorted
//! with stable tie order GT < IMU < JNT < CAM < OBS. OBS records carry no
//! timestamp; they sort with the CAM record they belong to. Floats are
//! written as shortest round-trip decimals. The file starts with a
//! `# key = value` header block carrying the calibration.
//!
//! Record grammar:
//! ```text
//! GT  t px py pz qw qx qy qz vx vy vz
//! IMU t ax ay az gx gy gz
//! JNT t leg_id q1 q2 q3 contact(0|1)
//! CAM t frame_id
//! OBS frame_id feature_id u v
//! ```
//!
//! Estimated trajectories reuse the GT arity under the `EST` tag in their
//! own files.

use nalgebra::{Vector2, Vector3};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::geometry::{Pose, UnitQuat};
use crate::imu::{ImuNoise, ImuSample};
use crate::leg::{LegId, LegModel};
use crate::vision::CameraModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown record tag '{tag}'")]
    UnknownTag { line: usize, tag: String },
    #[error("line {line}: {tag} expects {expected} fields, got {got}")]
    Arity { line: usize, tag: &'static str, expected: usize, got: usize },
    #[error("line {line}: cannot parse '{token}' as {what}")]
    Parse { line: usize, token: String, what: &'static str },
    #[error("line {line}: non-monotonic timestamp in {stream} stream")]
    NonMonotonic { line: usize, stream: &'static str },
    #[error("line {line}: OBS references unknown frame {frame}")]
    ObsUnknownFrame { line: usize, frame: u64 },
    #[error("missing header key '{0}'")]
    MissingHeaderKey(String),
    #[error("header key '{key}': {problem}")]
    BadHeaderValue { key: String, problem: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("{stream} stream not time-sorted at index {index}")]
    WriteUnsorted { stream: &'static str, index: usize },
    #[error("non-finite value in {0} record")]
    NonFinite(&'static str),
}

/// Calibration and rates shared by every consumer of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub camera: CameraModel,
    pub legs: [LegModel; 4],
    pub encoder_noise_std: f64,
    pub imu_noise: ImuNoise,
    pub gravity: Vector3<f64>,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub encoder_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRecord {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuat,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointRecord {
    pub timestamp: f64,
    pub leg: LegId,
    pub angles: Vector3<f64>,
    pub contact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamRecord {
    pub timestamp: f64,
    pub frame_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRecord {
    pub frame_id: u64,
    pub feature_id: u64,
    pub pixel: Vector2<f64>,
}

/// A full dataset: header plus the record streams, each time-sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub gt: Vec<GtRecord>,
    pub imu: Vec<ImuSample>,
    pub joints: Vec<JointRecord>,
    pub cams: Vec<CamRecord>,
    pub obs: Vec<ObsRecord>,
}

impl Dataset {
    pub fn empty(header: DatasetHeader) -> Self {
        Self { header, gt: vec![], imu: vec![], joints: vec![], cams: vec![], obs: vec![] }
    }

    /// Observations of one camera frame (obs are sorted by frame id).
    pub fn observations_for_frame(&self, frame_id: u64) -> &[ObsRecord] {
        let start = self.obs.partition_point(|o| o.frame_id < frame_id);
        let end = self.obs.partition_point(|o| o.frame_id <= frame_id);
        &self.obs[start..end]
    }
}

fn fmt_f64(x: f64) -> String {
    // shortest round-trip decimal via Display
    format!("{x}")
}

fn push_header_line(out: &mut String, key: &str, value: &str) {
    let _ = writeln!(out, "# {key} = {value}");
}

fn header_to_text(h: &DatasetHeader) -> String {
    let mut s = String::new();
    s.push_str("# quadvio dataset\n");
    push_header_line(&mut s, "version", &h.version.to_string());
    push_header_line(
        &mut s,
        "gravity",
        &format!("{} {} {}", fmt_f64(h.gravity.x), fmt_f64(h.gravity.y), fmt_f64(h.gravity.z)),
    );
    push_header_line(&mut s, "rate.imu", &fmt_f64(h.imu_rate));
    push_header_line(&mut s, "rate.cam", &fmt_f64(h.cam_rate));
    push_header_line(&mut s, "rate.encoder", &fmt_f64(h.encoder_rate));
    push_header_line(&mut s, "noise.accel", &fmt_f64(h.imu_noise.accel_noise));
    push_header_line(&mut s, "noise.gyro", &fmt_f64(h.imu_noise.gyro_noise));
    push_header_line(&mut s, "noise.accel_bias_walk", &fmt_f64(h.imu_noise.accel_bias_walk));
    push_header_line(&mut s, "noise.gyro_bias_walk", &fmt_f64(h.imu_noise.gyro_bias_walk));
    push_header_line(&mut s, "noise.encoder", &fmt_f64(h.encoder_noise_std));
    let c = &h.camera;
    push_header_line(
        &mut s,
        "cam.intrinsics",
        &format!("{} {} {} {}", fmt_f64(c.fx), fmt_f64(c.fy), fmt_f64(c.cx), fmt_f64(c.cy)),
    );
    push_header_line(&mut s, "cam.size", &format!("{} {}", c.width, c.height));
    push_header_line(&mut s, "cam.pixel_noise", &fmt_f64(c.pixel_noise_std));
    let q = c.body_from_camera.rotation;
    let t = c.body_from_camera.translation;
    push_header_line(
        &mut s,
        "cam.extrinsic",
        &format!(
            "{} {} {} {} {} {} {}",
            fmt_f64(q.w),
            fmt_f64(q.x),
            fmt_f64(q.y),
            fmt_f64(q.z),
            fmt_f64(t.x),
            fmt_f64(t.y),
            fmt_f64(t.z)
        ),
    );
    for leg in &h.legs {
        let code = leg.leg_id.code();
        push_header_line(
            &mut s,
            &format!("leg.{code}.hip_offset"),
            &format!(
                "{} {} {}",
                fmt_f64(leg.hip_offset.x),
                fmt_f64(leg.hip_offset.y),
                fmt_f64(leg.hip_offset.z)
            ),
        );
        push_header_line(
            &mut s,
            &format!("leg.{code}.links"),
            &format!(
                "{} {} {}",
                fmt_f64(leg.hip_length),
                fmt_f64(leg.thigh_length),
                fmt_f64(leg.shank_length)
            ),
        );
        let l = leg.joint_limits;
        push_header_line(
            &mut s,
            &format!("leg.{code}.limits"),
            &format!(
                "{} {} {} {} {} {}",
                fmt_f64(l[0].0),
                fmt_f64(l[0].1),
                fmt_f64(l[1].0),
                fmt_f64(l[1].1),
                fmt_f64(l[2].0),
                fmt_f64(l[2].1)
            ),
        );
    }
    s
}

struct HeaderMap(BTreeMap<String, String>);

impl HeaderMap {
    fn get(&self, key: &str) -> Result<&str, DatasetError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DatasetError::MissingHeaderKey(key.to_string()))
    }

    fn floats(&self, key: &str, n: usize) -> Result<Vec<f64>, DatasetError> {
        let raw = self.get(key)?;
        let vals: Result<Vec<f64>, _> = raw.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| DatasetError::BadHeaderValue {
            key: key.to_string(),
            problem: e.to_string(),
        })?;
        if vals.len() != n {
            return Err(DatasetError::BadHeaderValue {
                key: key.to_string(),
                problem: format!("expected {n} values, got {}", vals.len()),
            });
        }
        Ok(vals)
    }

    fn float(&self, key: &str) -> Result<f64, DatasetError> {
        Ok(self.floats(key, 1)?[0])
    }
}

fn header_from_map(map: HeaderMap) -> Result<DatasetHeader, DatasetError> {
    let version: u32 = map.get("version")?.trim().parse().map_err(|_| {
        DatasetError::BadHeaderValue { key: "version".into(), problem: "not an integer".into() }
    })?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let g = map.floats("gravity", 3)?;
    let intr = map.floats("cam.intrinsics", 4)?;
    let size = map.floats("cam.size", 2)?;
    let ext = map.floats("cam.extrinsic", 7)?;
    let camera = CameraModel {
        fx: intr[0],
        fy: intr[1],
        cx: intr[2],
        cy: intr[3],
        width: size[0] as u32,
        height: size[1] as u32,
        body_from_camera: Pose::new(
            UnitQuat::new(ext[0], ext[1], ext[2], ext[3]),
            Vector3::new(ext[4], ext[5], ext[6]),
        ),
        pixel_noise_std: map.float("cam.pixel_noise")?,
    };
    let mut legs_vec = Vec::with_capacity(4);
    for leg_id in LegId::ALL {
        let code = leg_id.code();
        let off = map.floats(&format!("leg.{code}.hip_offset"), 3)?;
        let links = map.floats(&format!("leg.{code}.links"), 3)?;
        let lim = map.floats(&format!("leg.{code}.limits"), 6)?;
        legs_vec.push(LegModel {
            leg_id,
            hip_offset: Vector3::new(off[0], off[1], off[2]),
            hip_length: links[0],
            thigh_length: links[1],
            shank_length: links[2],
            joint_limits: [(lim[0], lim[1]), (lim[2], lim[3]), (lim[4], lim[5])],
        });
    }
    Ok(DatasetHeader {
        version,
        camera,
        legs: [legs_vec[0], legs_vec[1], legs_vec[2], legs_vec[3]],
        encoder_noise_std: map.float("noise.encoder")?,
        imu_noise: ImuNoise {
            accel_noise: map.float("noise.accel")?,
            gyro_noise: map.float("noise.gyro")?,
            accel_bias_walk: map.float("noise.accel_bias_walk")?,
            gyro_bias_walk: map.float("noise.gyro_bias_walk")?,
        },
        gravity: Vector3::new(g[0], g[1], g[2]),
        imu_rate: map.float("rate.imu")?,
        cam_rate: map.float("rate.cam")?,
        encoder_rate: map.float("rate.encoder")?,
    })
}

fn check_sorted<T>(
    items: &[T],
    key: impl Fn(&T) -> f64,
    stream: &'static str,
) -> Result<(), DatasetError> {
    for (i, pair) in items.windows(2).enumerate() {
        if key(&pair[1]) < key(&pair[0]) {
            return Err(DatasetError::WriteUnsorted { stream, index: i + 1 });
        }
    }
    Ok(())
}

fn gt_line(r: &GtRecord) -> String {
    format!(
        "GT {} {} {} {} {} {} {} {} {} {} {}",
        fmt_f64(r.timestamp),
        fmt_f64(r.position.x),
        fmt_f64(r.position.y),
        fmt_f64(r.position.z),
        fmt_f64(r.orientation.w),
        fmt_f64(r.orientation.x),
        fmt_f64(r.orientation.y),
        fmt_f64(r.orientation.z),
        fmt_f64(r.velocity.x),
        fmt_f64(r.velocity.y),
        fmt_f64(r.velocity.z)
    )
}

/// Writes the dataset to `out` in the canonical merged order.
pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<(), DatasetError> {
    check_sorted(&ds.gt, |r| r.timestamp, "GT")?;
    check_sorted(&ds.imu, |r| r.timestamp, "IMU")?;
    check_sorted(&ds.joints, |r| r.timestamp, "JNT")?;
    check_sorted(&ds.cams, |r| r.timestamp, "CAM")?;
    check_sorted(&ds.obs, |r| r.frame_id as f64, "OBS")?;
    for r in &ds.gt {
        let finite = r.timestamp.is_finite()
            && r.position.iter().all(|v| v.is_finite())
            && r.velocity.iter().all(|v| v.is_finite());
        if !finite {
            return Err(DatasetError::NonFinite("GT"));
        }
    }

    let mut text = header_to_text(&ds.header);
    let (mut gi, mut ii, mut ji, mut ci, mut oi) = (0usize, 0usize, 0usize, 0usize, 0usize);
    loop {
        let mut best: Option<(f64, u8)> = None;
        let mut consider = |t: Option<f64>, rank: u8| {
            if let Some(t) = t {
                let better = match best {
                    None => true,
                    Some((bt, br)) => t < bt || (t == bt && rank < br),
                };
                if better {
                    best = Some((t, rank));
                }
            }
        };
        consider(ds.gt.get(gi).map(|r| r.timestamp), 0);
        consider(ds.imu.get(ii).map(|r| r.timestamp), 1);
        consider(ds.joints.get(ji).map(|r| r.timestamp), 2);
        consider(ds.cams.get(ci).map(|r| r.timestamp), 3);
        let Some((_, rank)) = best else { break };
        match rank {
            0 => {
                let _ = writeln!(text, "{}", gt_line(&ds.gt[gi]));
                gi += 1;
            }
            1 => {
                let r = &ds.imu[ii];
                let _ = writeln!(
                    text,
                    "IMU {} {} {} {} {} {} {}",
                    fmt_f64(r.timestamp),
                    fmt_f64(r.accel.x),
                    fmt_f64(r.accel.y),
                    fmt_f64(r.accel.z),
                    fmt_f64(r.gyro.x),
                    fmt_f64(r.gyro.y),
                    fmt_f64(r.gyro.z)
                );
                ii += 1;
            }
            2 => {
                let r = &ds.joints[ji];
                let _ = writeln!(
                    text,
                    "JNT {} {} {} {} {} {}",
                    fmt_f64(r.timestamp),
                    r.leg.code(),
                    fmt_f64(r.angles.x),
                    fmt_f64(r.angles.y),
                    fmt_f64(r.angles.z),
                    if r.contact { 1 } else { 0 }
                );
                ji += 1;
            }
            _ => {
                let r = &ds.cams[ci];
                let _ = writeln!(text, "CAM {} {}", fmt_f64(r.timestamp), r.frame_id);
                while oi < ds.obs.len() && ds.obs[oi].frame_id == r.frame_id {
                    let o = &ds.obs[oi];
                    let _ = writeln!(
                        text,
                        "OBS {} {} {} {}",
                        o.frame_id,
                        o.feature_id,
                        fmt_f64(o.pixel.x),
                        fmt_f64(o.pixel.y)
                    );
                    oi += 1;
                }
                ci += 1;
            }
        }
    }
    if oi < ds.obs.len() {
        return Err(DatasetError::ObsUnknownFrame { line: 0, frame: ds.obs[oi].frame_id });
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn write_dataset_file(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut file)
}

struct LineParser<'a> {
    line: usize,
    tokens: Vec<&'a str>,
    tag: &'static str,
}

impl<'a> LineParser<'a> {
    fn check_arity(&self, expected: usize) -> Result<(), DatasetError> {
        if self.tokens.len() != expected {
            return Err(DatasetError::Arity {
                line: self.line,
                tag: self.tag,
                expected,
                got: self.tokens.len(),
            });
        }
        Ok(())
    }

    fn f64(&self, idx: usize) -> Result<f64, DatasetError> {
        self.tokens[idx].parse().map_err(|_| DatasetError::Parse {
            line: self.line,
            token: self.tokens[idx].to_string(),
            what: "float",
        })
    }

    fn u64(&self, idx: usize) -> Result<u64, DatasetError> {
        self.tokens[idx].parse().map_err(|_| DatasetError::Parse {
            line: self.line,
            token: self.tokens[idx].to_string(),
            what: "integer",
        })
    }

    fn vec3(&self, idx: usize) -> Result<Vector3<f64>, DatasetError> {
        Ok(Vector3::new(self.f64(idx)?, self.f64(idx + 1)?, self.f64(idx + 2)?))
    }
}

/// Parses a dataset, validating grammar and stream monotonicity. Errors
/// carry the 1-based line number.
pub fn read_dataset(input: &mut impl BufRead) -> Result<Dataset, DatasetError> {
    let mut header_map = BTreeMap::new();
    let mut gt: Vec<GtRecord> = Vec::new();
    let mut imu: Vec<ImuSample> = Vec::new();
    let mut joints: Vec<JointRecord> = Vec::new();
    let mut cams: Vec<CamRecord> = Vec::new();
    let mut obs: Vec<ObsRecord> = Vec::new();
    let mut known_frames: BTreeMap<u64, f64> = BTreeMap::new();
    let mut last_joint: BTreeMap<LegId, f64> = BTreeMap::new();

    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        if input.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = buf.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once('=') {
                header_map.insert(key.trim().to_string(), value.trim().to_string());
            }
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap();
        let tokens: Vec<&str> = tokens.collect();
        match tag {
            "GT" => {
                let p = LineParser { line: line_no, tokens, tag: "GT" };
                p.check_arity(11)?;
                let r = GtRecord {
                    timestamp: p.f64(0)?,
                    position: p.vec3(1)?,
                    orientation: UnitQuat::new(p.f64(4)?, p.f64(5)?, p.f64(6)?, p.f64(7)?),
                    velocity: p.vec3(8)?,
                };
                if gt.last().map(|g| g.timestamp >= r.timestamp).unwrap_or(false) {
                    return Err(DatasetError::NonMonotonic { line: line_no, stream: "GT" });
                }
                gt.push(r);
            }
            "IMU" => {
                let p = LineParser { line: line_no, tokens, tag: "IMU" };
                p.check_arity(7)?;
                let r = ImuSample { timestamp: p.f64(0)?, accel: p.vec3(1)?, gyro: p.vec3(4)? };
                if imu.last().map(|s| s.timestamp >= r.timestamp).unwrap_or(false) {
                    return Err(DatasetError::NonMonotonic { line: line_no, stream: "IMU" });
                }
                imu.push(r);
            }
            "JNT" => {
                let p = LineParser { line: line_no, tokens, tag: "JNT" };
                p.check_arity(6)?;
                let leg = LegId::from_code(p.tokens[1]).ok_or_else(|| DatasetError::Parse {
                    line: line_no,
                    token: p.tokens[1].to_string(),
                    what: "leg id",
                })?;
                let contact = match p.tokens[5] {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(DatasetError::Parse {
                            line: line_no,
                            token: other.to_string(),
                            what: "contact flag",
                        })
                    }
                };
                let r = JointRecord { timestamp: p.f64(0)?, leg, angles: p.vec3(2)?, contact };
                if last_joint.get(&leg).map(|&t| t >= r.timestamp).unwrap_or(false) {
                    return Err(DatasetError::NonMonotonic { line: line_no, stream: "JNT" });
                }
                last_joint.insert(leg, r.timestamp);
                joints.push(r);
            }
            "CAM" => {
                let p = LineParser { line: line_no, tokens, tag: "CAM" };
                p.check_arity(2)?;
                let r = CamRecord { timestamp: p.f64(0)?, frame_id: p.u64(1)? };
                if cams.last().map(|c| c.timestamp >= r.timestamp).unwrap_or(false) {
                    return Err(DatasetError::NonMonotonic { line: line_no, stream: "CAM" });
                }
                known_frames.insert(r.frame_id, r.timestamp);
                cams.push(r);
            }
            "OBS" => {
                let p = LineParser { line: line_no, tokens, tag: "OBS" };
                p.check_arity(4)?;
                let r = ObsRecord {
                    frame_id: p.u64(0)?,
                    feature_id: p.u64(1)?,
                    pixel: Vector2::new(p.f64(2)?, p.f64(3)?),
                };
                if !known_frames.contains_key(&r.frame_id) {
                    return Err(DatasetError::ObsUnknownFrame {
                        line: line_no,
                        frame: r.frame_id,
                    });
                }
                if obs.last().map(|o| o.frame_id > r.frame_id).unwrap_or(false) {
                    return Err(DatasetError::NonMonotonic { line: line_no, stream: "OBS" });
                }
                obs.push(r);
            }
            other => {
                return Err(DatasetError::UnknownTag { line: line_no, tag: other.to_string() })
            }
        }
    }

    let header = header_from_map(HeaderMap(header_map))?;
    Ok(Dataset { header, gt, imu, joints, cams, obs })
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset, DatasetError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut file)
}

/// Writes a timestamped trajectory under the given tag (EST for estimates),
/// one GT-arity record per line.
pub fn write_trajectory(
    records: &[GtRecord],
    tag: &str,
    out: &mut impl Write,
) -> Result<(), DatasetError> {
    check_sorted(records, |r| r.timestamp, "EST")?;
    let mut text = String::new();
    for r in records {
        let line = gt_line(r);
        let _ = writeln!(text, "{tag}{}", line.strip_prefix("GT").unwrap());
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn write_trajectory_file(
    records: &[GtRecord],
    tag: &str,
    path: &Path,
) -> Result<(), DatasetError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectory(records, tag, &mut file)
}

/// Reads a trajectory file written by [`write_trajectory`]; `tag` must match.
pub fn read_trajectory(input: &mut impl BufRead, tag: &str) -> Result<Vec<GtRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        if input.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = buf.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let found = tokens.next().unwrap();
        if found != tag {
            return Err(DatasetError::UnknownTag { line: line_no, tag: found.to_string() });
        }
        let tokens: Vec<&str> = tokens.collect();
        let p = LineParser { line: line_no, tokens, tag: "EST" };
        p.check_arity(11)?;
        records.push(GtRecord {
            timestamp: p.f64(0)?,
            position: p.vec3(1)?,
            orientation: UnitQuat::new(p.f64(4)?, p.f64(5)?, p.f64(6)?, p.f64(7)?),
            velocity: p.vec3(8)?,
        });
    }
    Ok(records)
}

pub fn read_trajectory_file(path: &Path, tag: &str) -> Result<Vec<GtRecord>, DatasetError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_trajectory(&mut file, tag)
}
