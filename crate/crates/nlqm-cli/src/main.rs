//! Batch front end: loads declarative scenario files, runs the requested
//! prescriptions, and writes distributions, verdict tables, sweeps, region
//! maps, and fine-step reference comparisons to disk.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 check verdict
//! failure, 3 numerical-accuracy failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use nlqm::analysis::{
    angle_grid, born_limit_study, checks_to_csv, frame_compare, signaling_metric, CheckRow,
    FrameReport, SignalingReport,
};
use nlqm::lattice::{region_map, TimeGrid};
use nlqm::prescriptions::{
    distribution, OutcomeDistribution, Prescription, Scenario,
};
use nlqm::scenario::{check_preparation_cone, load_scenario, LoadedScenario};
use nlqm::spacetime::{classify, CausalRelation, ConeConvention};
use nlqm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nlqm",
    version,
    about = "Boundary-condition prescriptions for non-linear quantum dynamics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate outcome distributions and write them as CSV, with signaling
    /// and frame reports when the scenario has a spacelike pair.
    Run {
        #[command(flatten)]
        common: Common,
        /// Directory for output artifacts.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Rapidity used for the frame report.
        #[arg(long, default_value_t = 0.5)]
        rapidity: f64,
    },
    /// Evaluate signaling and frame-dependence verdicts against pinned
    /// thresholds; exits 2 when any verdict fails.
    Check {
        #[command(flatten)]
        common: Common,
        /// Directory for check.csv / check.json (stdout only when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        rapidity: f64,
    },
    /// Render the outcome-arrival region map of a lattice scenario as CSV.
    Regions {
        #[command(flatten)]
        common: Common,
        /// Write regions.csv here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the coupling scale and measurement bases; writes per-
    /// prescription deviation and signaling tables.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Comma-separated coupling multipliers.
        #[arg(long, default_value = "1.0,0.5,0.25")]
        scales: String,
    },
    /// Compare each distribution against a fine-step reference (dt/10 and
    /// dt/20, Richardson-combined) and print the deviation.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    scenario: PathBuf,
    /// One prescription name or "all".
    #[arg(long, default_value = "all")]
    prescription: String,
    /// Override the scenario's integrator step.
    #[arg(long)]
    dt: Option<f64>,
    /// Override the light-cone boundary convention: 1 inclusive, 0 exclusive.
    #[arg(long)]
    lightcone_theta0: Option<u8>,
    /// Number of basis angles swept by signaling studies (≥ 2).
    #[arg(long, default_value_t = 8)]
    grid: usize,
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(match err {
                Error::Accuracy(_) => 3,
                _ => 1,
            });
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Run {
            common,
            out,
            rapidity,
        } => run_cmd(&common, &out, rapidity),
        Cmd::Check {
            common,
            out,
            rapidity,
        } => check_cmd(&common, out.as_deref(), rapidity),
        Cmd::Regions { common, out } => regions_cmd(&common, out.as_deref()),
        Cmd::Sweep {
            common,
            out,
            scales,
        } => sweep_cmd(&common, &out, &scales),
        Cmd::Oracle { common, out } => oracle_cmd(&common, out.as_deref()),
    }
}

/// Loads the scenario, applies flag overrides, and re-validates.
fn load(common: &Common) -> Result<LoadedScenario> {
    let mut loaded = load_scenario(&common.scenario)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    if common.grid < 2 {
        return Err(Error::Config(format!(
            "--grid must be at least 2, got {}",
            common.grid
        )));
    }
    let mut dirty = false;
    if let Some(dt) = common.dt {
        loaded.scenario.dt = dt;
        dirty = true;
    }
    if let Some(theta0) = common.lightcone_theta0 {
        loaded.scenario.convention = match theta0 {
            1 => ConeConvention::InclusiveBoundary,
            0 => ConeConvention::ExclusiveBoundary,
            other => {
                return Err(Error::Config(format!(
                    "--lightcone-theta0 must be 0 or 1, got {other}"
                )));
            }
        };
        dirty = true;
    }
    if dirty {
        loaded.scenario.validate()?;
        check_preparation_cone(&loaded.scenario)?;
    }
    Ok(loaded)
}

fn prescriptions_of(selector: &str) -> Result<Vec<Prescription>> {
    if selector == "all" {
        Ok(Prescription::ALL.to_vec())
    } else {
        Ok(vec![Prescription::from_str(selector)?])
    }
}

/// First pair of spacelike single-factor qubit measurements on distinct
/// factors, usable as a signaling sender/receiver.
fn signaling_pair(scenario: &Scenario) -> Option<(usize, usize)> {
    let ms = &scenario.measurements;
    for i in 0..ms.len() {
        for j in (i + 1)..ms.len() {
            let (Some(fi), Some(fj)) = (ms[i].subsystem(), ms[j].subsystem()) else {
                continue;
            };
            if fi == fj
                || scenario.model.dims()[fi] != 2
                || scenario.model.dims()[fj] != 2
                || classify(&ms[i].event, &ms[j].event) != CausalRelation::Spacelike
            {
                continue;
            }
            return Some((i, j));
        }
    }
    None
}

fn has_spacelike_pair(scenario: &Scenario) -> bool {
    let ms = &scenario.measurements;
    (0..ms.len()).any(|i| {
        ((i + 1)..ms.len())
            .any(|j| classify(&ms[i].event, &ms[j].event) == CausalRelation::Spacelike)
    })
}

fn distribution_csv(d: &OutcomeDistribution) -> String {
    let mut out = String::new();
    for label in d.labels() {
        out.push_str(label);
        out.push(',');
    }
    out.push_str("probability\n");
    for (tuple, p) in d.iter() {
        for o in tuple {
            let _ = write!(out, "{o},");
        }
        let _ = writeln!(out, "{p}");
    }
    out
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Schema(format!("report serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn run_cmd(common: &Common, out: &Path, rapidity: f64) -> Result<i32> {
    let loaded = load(common)?;
    let scenario = &loaded.scenario;
    let selected = prescriptions_of(&common.prescription)?;
    std::fs::create_dir_all(out)?;
    for &p in &selected {
        let d = distribution(scenario, p)?;
        let path = out.join(format!("dist_{p}.csv"));
        write_file(&path, &distribution_csv(&d))?;
        println!("wrote {}", path.display());
    }
    if let Some((sender, receiver)) = signaling_pair(scenario) {
        let angles = angle_grid(common.grid);
        let mut reports: Vec<SignalingReport> = Vec::new();
        for &p in &selected {
            reports.push(signaling_metric(scenario, p, sender, receiver, &angles)?);
        }
        let path = out.join("signaling.json");
        write_file(&path, &to_json(&reports)?)?;
        println!("wrote {}", path.display());
    }
    if has_spacelike_pair(scenario) {
        let mut reports: Vec<FrameReport> = Vec::new();
        for &p in &selected {
            reports.push(frame_compare(scenario, p, rapidity)?);
        }
        let path = out.join("frames.json");
        write_file(&path, &to_json(&reports)?)?;
        println!("wrote {}", path.display());
    }
    if loaded.file.lattice.is_some() {
        let path = out.join("regions.csv");
        write_file(&path, &regions_csv(&loaded)?)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

/// Pinned verdict thresholds: linear theory and outcome-independent
/// boundaries must stay quiet; sequential-update prescriptions are expected
/// to cross and are reported informationally.
fn check_rows(
    scenario: &Scenario,
    selected: &[Prescription],
    grid: usize,
    rapidity: f64,
) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let pair = signaling_pair(scenario);
    let spacelike = has_spacelike_pair(scenario);
    for &p in selected {
        let name = p.to_string();
        if let Some((sender, receiver)) = pair {
            let report = signaling_metric(scenario, p, sender, receiver, &angle_grid(grid))?;
            rows.push(match p {
                Prescription::Sqm => CheckRow::below(&name, "signaling", report.max_tv, 1e-10),
                Prescription::Preselection
                | Prescription::Everett
                | Prescription::CausalConditional => {
                    CheckRow::below(&name, "signaling", report.max_tv, 1e-8)
                }
                Prescription::Collapse | Prescription::Postselection => {
                    CheckRow::expected_violation(&name, "signaling", report.max_tv, 1e-3)
                }
            });
        }
        if spacelike {
            let report = frame_compare(scenario, p, rapidity)?;
            rows.push(match p {
                Prescription::Sqm => CheckRow::below(&name, "frame_tv", report.tv, 1e-10),
                Prescription::Collapse => {
                    CheckRow::expected_violation(&name, "frame_tv", report.tv, 1e-4)
                }
                _ => CheckRow::below(&name, "frame_tv", report.tv, 1e-8),
            });
        }
    }
    Ok(rows)
}

fn check_cmd(common: &Common, out: Option<&Path>, rapidity: f64) -> Result<i32> {
    let loaded = load(common)?;
    let selected = prescriptions_of(&common.prescription)?;
    let rows = check_rows(&loaded.scenario, &selected, common.grid, rapidity)?;
    if rows.is_empty() {
        return Err(Error::Config(
            "nothing to check: the scenario has no spacelike measurement pair".into(),
        ));
    }
    let csv = checks_to_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out {
        write_file(&dir.join("check.csv"), &csv)?;
        write_file(&dir.join("check.json"), &to_json(&rows)?)?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!("check: {failed} of {} verdicts failed", rows.len());
        Ok(2)
    } else {
        println!("check: all {} verdicts passed", rows.len());
        Ok(0)
    }
}

fn regions_csv(loaded: &LoadedScenario) -> Result<String> {
    let Some(lat) = &loaded.file.lattice else {
        return Err(Error::Config(
            "the scenario has no [lattice] section to map".into(),
        ));
    };
    let grid = TimeGrid::new(loaded.scenario.preparation.t, lat.bin_dt, lat.bins)?;
    let events: Vec<(String, nlqm::spacetime::Event)> = loaded
        .scenario
        .measurements
        .iter()
        .map(|m| (m.label.clone(), m.event))
        .collect();
    let map = region_map(
        &lat.site_positions(),
        &events,
        &grid,
        loaded.scenario.convention,
    )?;
    Ok(map.to_csv())
}

fn regions_cmd(common: &Common, out: Option<&Path>) -> Result<i32> {
    let loaded = load(common)?;
    let csv = regions_csv(&loaded)?;
    match out {
        Some(dir) => {
            let path = dir.join("regions.csv");
            write_file(&path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn sweep_cmd(common: &Common, out: &Path, scales: &str) -> Result<i32> {
    let loaded = load(common)?;
    let scenario = &loaded.scenario;
    let selected = prescriptions_of(&common.prescription)?;
    let scales: Vec<f64> = scales
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad scale '{s}' in --scales")))
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    for &p in &selected {
        let report = born_limit_study(scenario, p, &scales)?;
        let mut csv = String::from("scale,deviation\n");
        for row in &report.rows {
            let _ = writeln!(csv, "{},{}", row.scale, row.deviation);
        }
        let path = out.join(format!("born_limit_{p}.csv"));
        write_file(&path, &csv)?;
        println!("wrote {}", path.display());
    }
    if let Some((sender, receiver)) = signaling_pair(scenario) {
        let angles = angle_grid(common.grid);
        for &p in &selected {
            let report = signaling_metric(scenario, p, sender, receiver, &angles)?;
            let path = out.join(format!("signaling_{p}.json"));
            write_file(&path, &to_json(&report)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

#[derive(serde::Serialize)]
struct OracleRow {
    prescription: String,
    dt: f64,
    max_deviation: f64,
}

fn oracle_cmd(common: &Common, out: Option<&Path>) -> Result<i32> {
    let loaded = load(common)?;
    let scenario = &loaded.scenario;
    let selected = prescriptions_of(&common.prescription)?;
    let mut rows = Vec::new();
    for &p in &selected {
        let coarse = distribution(scenario, p)?;
        let mut fine = scenario.clone();
        fine.dt = scenario.dt / 10.0;
        let d10 = distribution(&fine, p)?;
        fine.dt = scenario.dt / 20.0;
        let d20 = distribution(&fine, p)?;
        // Fourth-order steps: the dt/10 and dt/20 runs combine into a
        // reference with error ~(dt/20)^6 per probability.
        let mut max_dev = 0.0f64;
        for (tuple, p_coarse) in coarse.iter() {
            let reference = (16.0 * d20.prob(tuple) - d10.prob(tuple)) / 15.0;
            max_dev = max_dev.max((p_coarse - reference).abs());
        }
        println!(
            "oracle {p}: max deviation {max_dev:.3e} from the dt/10–dt/20 reference (dt = {})",
            scenario.dt
        );
        rows.push(OracleRow {
            prescription: p.to_string(),
            dt: scenario.dt,
            max_deviation: max_dev,
        });
    }
    if let Some(dir) = out {
        write_file(&dir.join("oracle.json"), &to_json(&rows)?)?;
    }
    Ok(0)
}
