use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdlane::aggregator::GlobalMap;
use hdlane::geometry::DEFAULT_SPACING;
use hdlane::graph::LaneGraph;
use hdlane::metrics::{evaluate, DEFAULT_THRESHOLD};
use hdlane::rgcn::load_model;
use hdlane::scenario::{evaluate_snapshot, generate, simulate, ScenarioSpec};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "hdlane",
    version,
    about = "Lane-graph scenes, metrics and V2X map aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the world graph and every vehicle frame of a scenario.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimated lane graph against ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_SPACING)]
        spacing: f64,
    },
    /// Run the full vehicle-to-cloud pipeline and write the aggregated map.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Predict lane connectivity with this model instead of using the
        /// scenario's edges.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-export a saved aggregator state as GeoJSON.
    Export {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    /// Exit code 2.
    Io(String),
    /// Exit code 1.
    Pipeline(String),
}

type Result<T> = std::result::Result<T, Failure>;

fn pipeline(e: impl std::fmt::Display) -> Failure {
    Failure::Pipeline(e.to_string())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn with_newline(mut s: String) -> String {
    s.push('\n');
    s
}

/// Keeps vehicle ids usable as file names.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn load_spec(path: &Path) -> Result<ScenarioSpec> {
    ScenarioSpec::from_json(&read(path)?)
        .map_err(|e| Failure::Pipeline(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<LaneGraph> {
    LaneGraph::from_json(&read(path)?)
        .map_err(|e| Failure::Pipeline(format!("{}: {e}", path.display())))
}

fn run_generate(spec: &Path, out: &Path) -> Result<()> {
    let spec = load_spec(spec)?;
    let scenario = generate(&spec).map_err(pipeline)?;
    write(
        &out.join("world.json"),
        with_newline(scenario.world.to_json()),
    )?;
    let mut manifest = String::new();
    for f in &scenario.frames {
        let dir = format!("frames/{}", file_stem(&f.meta.vehicle_id));
        let graph = format!("{dir}/{:06}.json", f.meta.frame_id);
        let truth = format!("{dir}/{:06}.truth.json", f.meta.frame_id);
        write(&out.join(&graph), with_newline(f.graph.to_json()))?;
        write(&out.join(&truth), with_newline(f.truth.to_json()))?;
        let line = json!({
            "vehicle_id": f.meta.vehicle_id,
            "frame_id": f.meta.frame_id,
            "timestamp": f.meta.timestamp,
            "pose": f.meta.pose,
            "world_lanes": f.world_lanes,
            "graph": graph,
            "truth": truth,
        });
        manifest.push_str(&with_newline(line.to_string()));
    }
    write(&out.join("frames.jsonl"), manifest)?;
    eprintln!(
        "generated {} frames from {} vehicles",
        scenario.frames.len(),
        spec.vehicles.len()
    );
    Ok(())
}

fn run_evaluate(est: &Path, gt: &Path, threshold: f64, spacing: f64) -> Result<()> {
    let est = load_graph(est)?;
    let gt = load_graph(gt)?;
    let report = evaluate(&est, &gt, threshold, spacing).map_err(pipeline)?;
    println!("{}", report.to_json());
    Ok(())
}

fn run_simulate(spec: &Path, model: Option<&Path>, out: &Path) -> Result<()> {
    let spec = load_spec(spec)?;
    let model = match model {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Io(format!("{}: no such file", p.display())));
            }
            Some(load_model(p).map_err(|e| Failure::Pipeline(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let run = simulate(&spec, model.as_ref()).map_err(pipeline)?;
    let world = spec.world_graph().map_err(pipeline)?;
    let origin = spec.origin.pose();
    let report = evaluate_snapshot(
        &run.snapshot,
        &world,
        &origin,
        DEFAULT_THRESHOLD,
        DEFAULT_SPACING,
    )
    .map_err(pipeline)?;
    let snapshot_graph = hdlane::geo_map::geojson_to_graph_in_frame(
        &run.snapshot,
        &origin,
        world.degree().unwrap_or(hdlane::geometry::DEFAULT_DEGREE),
    )
    .map_err(pipeline)?;

    write(
        &out.join("snapshot.geojson"),
        with_newline(run.snapshot.to_json()),
    )?;
    write(&out.join("ingest_log.jsonl"), run.log_jsonl())?;
    write(&out.join("state.json"), with_newline(run.state.to_json()))?;
    write(&out.join("world.json"), with_newline(world.to_json()))?;
    write(
        &out.join("snapshot_graph.json"),
        with_newline(snapshot_graph.to_json()),
    )?;
    write(&out.join("report.json"), with_newline(report.to_json()))?;
    eprintln!(
        "ingested {} of {} frames into {} global lanes",
        run.state.submissions.len(),
        run.log.len(),
        run.state.lanes.len()
    );
    Ok(())
}

fn run_export(snapshot: &Path, out: &Path) -> Result<()> {
    let state = GlobalMap::from_json(&read(snapshot)?)
        .map_err(|e| Failure::Pipeline(format!("{}: {e}", snapshot.display())))?;
    let doc = state.snapshot().map_err(pipeline)?;
    write(out, with_newline(doc.to_json()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { spec, out } => run_generate(spec, out),
        Command::Evaluate {
            est,
            gt,
            threshold,
            spacing,
        } => run_evaluate(est, gt, *threshold, *spacing),
        Command::Simulate { spec, model, out } => run_simulate(spec, model.as_deref(), out),
        Command::Export { snapshot, out } => run_export(snapshot, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
