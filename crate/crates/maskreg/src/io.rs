//! File formats: MRD depth images (text header + binary payload), plain-text
//! pose graphs, ground-truth CSVs, run and scene configuration, and the
//! posterior report.

use crate::depthimage::{CameraModel, DepthImage, DepthImageError, PixelObservation, PixelState};
use crate::geometry::{exp6, log6, GeometryError, RigidTransform, Vec3, Vec6};
use crate::posegraph::{PoseGraph, PoseGraphError};
use crate::priors::PriorSpec;
use crate::registrar::TransformPosterior;
use crate::sensor::PointLikelihoodConfig;
use crate::synth::{PosedPrimitive, Primitive, SceneSpec, TablePlane};
use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad MRD header: {0}")]
    BadHeader(String),
    #[error("MRD payload has {got} bytes, expected {expected}")]
    PayloadMismatch { got: usize, expected: usize },
    #[error("invalid pixel state byte {0}")]
    BadStateByte(u8),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    DepthImage(#[from] DepthImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
}

// ---------------------------------------------------------------------------
// MRD v1 depth images

const MRD_MAGIC: &str = "MRD1";

/// Writes an MRD v1 file: one text header line, then a row-major binary
/// payload of one state byte plus a little-endian f32 depth per pixel.
pub fn write_mrd(path: &Path, img: &DepthImage) -> Result<(), IoError> {
    let cam = img.camera();
    let sigma = cam.noise[(0, 0)].sqrt();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "{} {} {} {} {} {} {} {}",
        MRD_MAGIC, cam.width, cam.height, cam.focal, cam.cx, cam.cy, sigma, cam.r_min
    )?;
    for px in img.grid() {
        let state = match px.state {
            PixelState::Unknown => 0u8,
            PixelState::Object => 1,
            PixelState::Background => 2,
        };
        let depth = if px.state == PixelState::Unknown { 0.0f32 } else { px.depth as f32 };
        out.write_all(&[state])?;
        out.write_all(&depth.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_mrd(path: &Path) -> Result<DepthImage, IoError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != MRD_MAGIC {
        return Err(IoError::BadHeader(header.trim().to_string()));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|e| IoError::BadHeader(e.to_string()));
    let width = fields[1].parse::<usize>().map_err(|e| IoError::BadHeader(e.to_string()))?;
    let height = fields[2].parse::<usize>().map_err(|e| IoError::BadHeader(e.to_string()))?;
    let camera = CameraModel::isotropic(
        width,
        height,
        parse(fields[3])?,
        parse(fields[4])?,
        parse(fields[5])?,
        parse(fields[6])?,
        parse(fields[7])?,
    );
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let expected = width * height * 5;
    if payload.len() != expected {
        return Err(IoError::PayloadMismatch { got: payload.len(), expected });
    }
    let mut grid = Vec::with_capacity(width * height);
    for chunk in payload.chunks_exact(5) {
        let depth = f32::from_le_bytes([chunk[1], chunk[2], chunk[3], chunk[4]]) as f64;
        let px = match chunk[0] {
            0 => PixelObservation::UNKNOWN,
            1 => PixelObservation::object(depth),
            2 => PixelObservation::background(depth),
            b => return Err(IoError::BadStateByte(b)),
        };
        grid.push(px);
    }
    Ok(DepthImage::new(camera, grid)?)
}

// ---------------------------------------------------------------------------
// Pose graph files

/// One line per node (`NODE id tangent6`) or edge
/// (`EDGE from to tangent6 upper-triangular-information21`).
pub fn write_graph(path: &Path, graph: &PoseGraph) -> Result<(), IoError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for node in &graph.nodes {
        let t = log6(&node.pose)?;
        write!(out, "NODE {}", node.id)?;
        for k in 0..6 {
            write!(out, " {}", t[k])?;
        }
        writeln!(out)?;
    }
    for edge in &graph.edges {
        let t = log6(&edge.measurement)?;
        write!(out, "EDGE {} {}", edge.from, edge.to)?;
        for k in 0..6 {
            write!(out, " {}", t[k])?;
        }
        for i in 0..6 {
            for j in i..6 {
                write!(out, " {}", edge.information[(i, j)])?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_graph(path: &Path) -> Result<PoseGraph, IoError> {
    let mut graph = PoseGraph::default();
    let file = BufReader::new(std::fs::File::open(path)?);
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let nums = |from: usize, n: usize| -> Result<Vec<f64>, IoError> {
            if fields.len() < from + n {
                return Err(IoError::Parse(format!("line {}: too few fields", lineno + 1)));
            }
            fields[from..from + n]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| IoError::Parse(format!("line {}: {}", lineno + 1, e)))
                })
                .collect()
        };
        match fields[0] {
            "NODE" => {
                let id = fields[1]
                    .parse::<usize>()
                    .map_err(|e| IoError::Parse(format!("line {}: {}", lineno + 1, e)))?;
                let t = nums(2, 6)?;
                graph.add_node(id, exp6(Vec6::from_row_slice(&t)));
            }
            "EDGE" => {
                let from = fields[1]
                    .parse::<usize>()
                    .map_err(|e| IoError::Parse(format!("line {}: {}", lineno + 1, e)))?;
                let to = fields[2]
                    .parse::<usize>()
                    .map_err(|e| IoError::Parse(format!("line {}: {}", lineno + 1, e)))?;
                let t = nums(3, 6)?;
                let upper = nums(9, 21)?;
                let mut info = Matrix6::zeros();
                let mut k = 0;
                for i in 0..6 {
                    for j in i..6 {
                        info[(i, j)] = upper[k];
                        info[(j, i)] = upper[k];
                        k += 1;
                    }
                }
                graph.add_edge(from, to, exp6(Vec6::from_row_slice(&t)), info);
            }
            other => {
                return Err(IoError::Parse(format!("line {}: unknown record {}", lineno + 1, other)))
            }
        }
    }
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Ground truth CSV (one tangent 6-vector per relative transform)

pub fn write_ground_truth(path: &Path, relatives: &[RigidTransform]) -> Result<(), IoError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "wx,wy,wz,tx,ty,tz")?;
    for rel in relatives {
        let t = log6(rel)?;
        writeln!(out, "{},{},{},{},{},{}", t[0], t[1], t[2], t[3], t[4], t[5])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<RigidTransform>, IoError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| IoError::Parse(format!("line {}: {}", lineno + 1, e)))?;
        if vals.len() != 6 {
            return Err(IoError::Parse(format!("line {}: expected 6 values", lineno + 1)));
        }
        out.push(exp6(Vec6::from_row_slice(&vals)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run configuration

fn default_samples() -> usize {
    10_000
}
fn default_points() -> usize {
    200
}
fn default_epsilon() -> f64 {
    1e-12
}
fn default_window() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub prior: PriorSpec,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon_reject: f64,
    #[serde(default = "default_window")]
    pub window_radius: f64,
}

impl RunConfig {
    pub fn point_config(&self) -> PointLikelihoodConfig {
        PointLikelihoodConfig {
            window_radius: self.window_radius,
            epsilon_reject: self.epsilon_reject,
            unknown_free: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ---------------------------------------------------------------------------
// Scene configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub r_min: f64,
}

impl CameraConfig {
    pub fn model(&self) -> CameraModel {
        CameraModel::isotropic(
            self.width,
            self.height,
            self.focal,
            self.cx,
            self.cy,
            self.sigma,
            self.r_min,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveConfig {
    #[serde(flatten)]
    pub primitive: Primitive,
    /// Tangent-coordinate pose within the object frame.
    pub pose: Option<[f64; 6]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableConfig {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub camera: CameraConfig,
    pub primitives: Vec<PrimitiveConfig>,
    pub object_pose: Option<[f64; 6]>,
    pub table: Option<TableConfig>,
    /// Range-noise standard deviation; defaults to the camera sigma.
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Explicit relative motions, one per subsequent frame.
    #[serde(default)]
    pub motions: Vec<[f64; 6]>,
    /// Alternative to `motions`: repeat one motion `steps` times.
    pub step_motion: Option<[f64; 6]>,
    pub steps: Option<usize>,
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn scene(&self) -> SceneSpec {
        let primitives = self
            .primitives
            .iter()
            .map(|p| PosedPrimitive {
                primitive: p.primitive.clone(),
                pose: p.pose.map_or(RigidTransform::identity(), |t| {
                    exp6(Vec6::from_row_slice(&t))
                }),
            })
            .collect();
        SceneSpec {
            primitives,
            object_pose: self
                .object_pose
                .map_or(RigidTransform::identity(), |t| exp6(Vec6::from_row_slice(&t))),
            table: self.table.as_ref().map(|t| TablePlane {
                point: Vec3::new(t.point[0], t.point[1], t.point[2]),
                normal: Vec3::new(t.normal[0], t.normal[1], t.normal[2]).normalize(),
            }),
        }
    }

    pub fn motion_list(&self) -> Vec<RigidTransform> {
        if !self.motions.is_empty() {
            self.motions.iter().map(|t| exp6(Vec6::from_row_slice(t))).collect()
        } else if let (Some(m), Some(steps)) = (self.step_motion, self.steps) {
            let t = exp6(Vec6::from_row_slice(&m));
            vec![t; steps]
        } else {
            Vec::new()
        }
    }

    pub fn sigma(&self) -> f64 {
        self.noise_sigma.unwrap_or(self.camera.sigma)
    }
}

// ---------------------------------------------------------------------------
// Posterior report

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorReport {
    /// Posterior mean in tangent coordinates.
    pub mean_tangent: [f64; 6],
    /// Row-major 6x6 covariance in tangent coordinates at the mean.
    pub covariance: Vec<f64>,
    pub effective_sample_size: f64,
    pub rejected_count: usize,
    pub evaluated_count: usize,
    pub surviving_count: usize,
}

impl PosteriorReport {
    pub fn from_posterior(p: &TransformPosterior) -> Result<Self, IoError> {
        let mean = log6(&p.mean)?;
        let mut covariance = Vec::with_capacity(36);
        for i in 0..6 {
            for j in 0..6 {
                covariance.push(p.covariance[(i, j)]);
            }
        }
        Ok(Self {
            mean_tangent: [mean[0], mean[1], mean[2], mean[3], mean[4], mean[5]],
            covariance,
            effective_sample_size: p.effective_sample_size,
            rejected_count: p.rejected_count,
            evaluated_count: p.evaluated_count,
            surviving_count: p.samples.len(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }
}

/// Full weighted sample dump, one CSV row per surviving sample.
pub fn write_samples_csv(path: &Path, posterior: &TransformPosterior) -> Result<(), IoError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "log_weight,weight,wx,wy,wz,tx,ty,tz")?;
    for s in &posterior.samples {
        let t = log6(&s.transform)?;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.log_weight, s.weight, t[0], t[1], t[2], t[3], t[4], t[5]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Plain-text point list, one `x y z` per line.
pub fn write_cloud(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    out.flush()?;
    Ok(())
}
