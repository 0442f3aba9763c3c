//! Command-line interface: synthetic sequence generation, registration,
//! ICP baseline, sequence evaluation, and pose-graph loop closure.
//!
//! Exit codes: 0 success, 2 invalid input, 3 all samples rejected.

use clap::{Parser, Subcommand};
use maskreg::geometry::{from_ray, log6, RigidTransform, Vec3};
use maskreg::icp::{icp, IcpConfig};
use maskreg::io::{
    read_graph, read_ground_truth, read_mrd, write_cloud, write_graph, write_ground_truth,
    write_mrd, write_samples_csv, PosteriorReport, RunConfig, SceneConfig,
};
use maskreg::posegraph::{optimize, OptimizeConfig, PoseGraph};
use maskreg::registrar::{register, RegisterConfig, RegisterError};
use maskreg::synth::make_sequence;
use maskreg::DepthImage;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "maskreg", about = "Probabilistic depth-image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic motion sequence to MRD files plus a ground-truth CSV.
    Synth {
        /// Scene configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register two depth images and write a posterior report.
    Register {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Run configuration with the prior (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        /// Worker threads (0 = all); the result is identical for any value.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional full weighted-sample CSV.
        #[arg(long)]
        dump_samples: Option<PathBuf>,
    },
    /// Point-to-point ICP baseline between two depth images.
    Icp {
        image_a: PathBuf,
        image_b: PathBuf,
        #[arg(long, default_value_t = 60)]
        max_iter: usize,
        #[arg(long, default_value_t = 0.10)]
        max_corr_dist: f64,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a rendered sequence against its ground truth with both backends.
    Eval {
        /// Directory holding frame_NNN.mrd and ground_truth.csv.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Per-alignment error CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a pose graph and optionally export a fused point cloud.
    LoopClose {
        /// Graph file (NODE/EDGE lines).
        #[arg(long)]
        graph: PathBuf,
        /// Optimized graph output path.
        #[arg(long)]
        out: PathBuf,
        /// MRD files to fuse, in node order.
        #[arg(long, num_args = 0..)]
        clouds: Vec<PathBuf>,
        /// Fused point list output (x y z per line, world frame).
        #[arg(long)]
        cloud_out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    AllRejected(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::AllRejected(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::AllRejected(_) => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Register {
            image_a,
            image_b,
            config,
            seed,
            samples,
            points,
            threads,
            out,
            dump_samples,
        } => cmd_register(
            &image_a,
            &image_b,
            &config,
            seed,
            samples,
            points,
            threads,
            &out,
            dump_samples.as_deref(),
        ),
        Command::Icp { image_a, image_b, max_iter, max_corr_dist, out } => {
            cmd_icp(&image_a, &image_b, max_iter, max_corr_dist, &out)
        }
        Command::Eval { dir, config, seed, samples, points, threads, out } => {
            cmd_eval(&dir, &config, seed, samples, points, threads, &out)
        }
        Command::LoopClose { graph, out, clouds, cloud_out } => {
            cmd_loop_close(&graph, &out, &clouds, cloud_out.as_deref())
        }
    }
}

fn cmd_synth(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let config = SceneConfig::load(config_path).map_err(invalid)?;
    let scene = config.scene();
    let camera = config.camera.model();
    let motions = config.motion_list();
    let seed = seed.unwrap_or(config.seed);
    std::fs::create_dir_all(out_dir).map_err(invalid)?;

    let frames = make_sequence(&scene, &motions, &camera, config.sigma(), seed);
    let mut relatives = Vec::new();
    for (k, (img, _)) in frames.iter().enumerate() {
        let path = out_dir.join(format!("frame_{k:03}.mrd"));
        write_mrd(&path, img).map_err(invalid)?;
    }
    for pair in frames.windows(2) {
        relatives.push(pair[1].1.compose(&pair[0].1.inverse()));
    }
    write_ground_truth(&out_dir.join("ground_truth.csv"), &relatives).map_err(invalid)?;
    println!("wrote {} frames and {} ground-truth rows", frames.len(), relatives.len());
    Ok(())
}

fn load_run_config(
    path: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    points: Option<usize>,
    threads: usize,
) -> Result<(RunConfig, RegisterConfig), CliError> {
    let mut run = RunConfig::load(path).map_err(invalid)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(s) = samples {
        run.samples = s;
    }
    if let Some(p) = points {
        run.points = p;
    }
    let register = RegisterConfig {
        n_samples: run.samples,
        n_points: run.points,
        seed: run.seed,
        threads,
        point: run.point_config(),
    };
    Ok((run, register))
}

#[allow(clippy::too_many_arguments)]
fn cmd_register(
    image_a: &Path,
    image_b: &Path,
    config_path: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    points: Option<usize>,
    threads: usize,
    out: &Path,
    dump_samples: Option<&Path>,
) -> Result<(), CliError> {
    let (run, reg_config) = load_run_config(config_path, seed, samples, points, threads)?;
    let img_a = read_mrd(image_a).map_err(invalid)?;
    let img_b = read_mrd(image_b).map_err(invalid)?;

    let start = Instant::now();
    let posterior = register(&img_a, &img_b, &run.prior, &reg_config).map_err(|e| match e {
        RegisterError::AllSamplesRejected { .. } => CliError::AllRejected(e.to_string()),
        other => invalid(other),
    })?;
    eprintln!("wall time: {:.3} s", start.elapsed().as_secs_f64());

    let report = PosteriorReport::from_posterior(&posterior).map_err(invalid)?;
    report.save(out).map_err(invalid)?;
    if let Some(path) = dump_samples {
        write_samples_csv(path, &posterior).map_err(invalid)?;
    }
    let mean = report.mean_tangent;
    println!(
        "mean tangent: {} {} {} {} {} {}",
        mean[0], mean[1], mean[2], mean[3], mean[4], mean[5]
    );
    println!(
        "ess: {} surviving: {} rejected: {} evaluated: {}",
        report.effective_sample_size,
        report.surviving_count,
        report.rejected_count,
        report.evaluated_count
    );
    Ok(())
}

fn cmd_icp(
    image_a: &Path,
    image_b: &Path,
    max_iter: usize,
    max_corr_dist: f64,
    out: &Path,
) -> Result<(), CliError> {
    let img_a = read_mrd(image_a).map_err(invalid)?;
    let img_b = read_mrd(image_b).map_err(invalid)?;
    let config = IcpConfig { max_iter, max_corr_dist, ..Default::default() };
    let start = Instant::now();
    let result = icp(img_a.object_cloud(), img_b.object_cloud(), &RigidTransform::identity(), &config)
        .map_err(invalid)?;
    eprintln!("wall time: {:.3} s", start.elapsed().as_secs_f64());
    let tangent = log6(&result.transform).map_err(invalid)?;
    let json = serde_json::json!({
        "tangent": [tangent[0], tangent[1], tangent[2], tangent[3], tangent[4], tangent[5]],
        "rms": result.rms,
        "iterations": result.iterations,
        "converged": result.converged,
    });
    std::fs::write(out, format!("{:#}\n", json)).map_err(invalid)?;
    println!(
        "icp tangent: {} {} {} {} {} {} rms: {}",
        tangent[0], tangent[1], tangent[2], tangent[3], tangent[4], tangent[5], result.rms
    );
    Ok(())
}

fn rotation_error_deg(est: &RigidTransform, truth: &RigidTransform) -> f64 {
    est.inverse().compose(truth).rotation_angle().to_degrees()
}

fn translation_error_mm(est: &RigidTransform, truth: &RigidTransform) -> f64 {
    (est.translation - truth.translation).norm() * 1000.0
}

fn quartiles(values: &mut [f64]) -> (f64, f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| values[((values.len() - 1) as f64 * q).round() as usize];
    (pick(0.25), pick(0.5), pick(0.75), values[values.len() - 1])
}

fn cmd_eval(
    dir: &Path,
    config_path: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    points: Option<usize>,
    threads: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (run, reg_config) = load_run_config(config_path, seed, samples, points, threads)?;
    let truth = read_ground_truth(&dir.join("ground_truth.csv")).map_err(invalid)?;
    let mut frames: Vec<DepthImage> = Vec::new();
    for k in 0..=truth.len() {
        frames.push(read_mrd(&dir.join(format!("frame_{k:03}.mrd"))).map_err(invalid)?);
    }
    if frames.len() != truth.len() + 1 {
        return Err(CliError::Invalid("ground truth length does not match frames".into()));
    }

    let mut rows = String::from("pair,backend,rot_err_deg,trans_err_mm\n");
    let mut errs: std::collections::BTreeMap<&str, Vec<(f64, f64)>> = Default::default();
    for k in 0..truth.len() {
        let mut cfg = reg_config.clone();
        cfg.seed = reg_config.seed.wrapping_add(k as u64);
        let posterior =
            register(&frames[k], &frames[k + 1], &run.prior, &cfg).map_err(|e| match e {
                RegisterError::AllSamplesRejected { .. } => CliError::AllRejected(e.to_string()),
                other => invalid(other),
            })?;
        let icp_result = icp(
            frames[k].object_cloud(),
            frames[k + 1].object_cloud(),
            &RigidTransform::identity(),
            &IcpConfig::default(),
        )
        .map_err(invalid)?;

        for (backend, est) in
            [("maskreg", posterior.mean), ("icp", icp_result.transform)]
        {
            let re = rotation_error_deg(&est, &truth[k]);
            let te = translation_error_mm(&est, &truth[k]);
            rows.push_str(&format!("{k},{backend},{re},{te}\n"));
            errs.entry(backend).or_default().push((re, te));
        }
    }
    std::fs::write(out, rows).map_err(invalid)?;
    for (backend, pairs) in &errs {
        let mut rot: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut trans: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (rq1, rmed, rq3, rmax) = quartiles(&mut rot);
        let (tq1, tmed, tq3, tmax) = quartiles(&mut trans);
        println!(
            "{backend} rot_deg q1 {rq1} median {rmed} q3 {rq3} max {rmax} | trans_mm q1 {tq1} median {tmed} q3 {tq3} max {tmax}"
        );
    }
    Ok(())
}

fn cmd_loop_close(
    graph_path: &Path,
    out: &Path,
    clouds: &[PathBuf],
    cloud_out: Option<&Path>,
) -> Result<(), CliError> {
    let graph = read_graph(graph_path).map_err(invalid)?;
    let result = optimize(&graph, &OptimizeConfig::default()).map_err(invalid)?;
    println!("chi2: {} -> {} in {} iterations", result.chi2_trace[0], result.chi2, result.iterations);

    let mut optimized = PoseGraph::default();
    for (node, pose) in graph.nodes.iter().zip(&result.poses) {
        optimized.add_node(node.id, *pose);
    }
    for e in &graph.edges {
        optimized.add_edge(e.from, e.to, e.measurement, e.information);
    }
    write_graph(out, &optimized).map_err(invalid)?;

    if let Some(cloud_path) = cloud_out {
        if clouds.len() != graph.nodes.len() {
            return Err(CliError::Invalid(format!(
                "need one cloud per node ({} nodes, {} clouds)",
                graph.nodes.len(),
                clouds.len()
            )));
        }
        // node poses map each frame's camera coordinates into the world frame
        let mut fused: Vec<Vec3> = Vec::new();
        for (pose, path) in result.poses.iter().zip(clouds) {
            let img = read_mrd(path).map_err(invalid)?;
            for &p in img.object_cloud() {
                let cart = from_ray(p).map_err(invalid)?;
                fused.push(pose.transform(cart.vec()));
            }
        }
        write_cloud(cloud_path, &fused).map_err(invalid)?;
        println!("fused {} points", fused.len());
    }
    Ok(())
}
