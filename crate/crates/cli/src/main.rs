//! Command-line pipeline for the fingertip force sensor toolkit:
//! simulate -> fit -> predict / eval / plot.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tcal_core::acquisition::{merge_streams, read_log, write_log, AcquisitionError, SyncedRecord};
use tcal_core::calibration::{fit, load_model, predict, save_model, CalibrationError, CalibrationModel};
use tcal_core::forward::{generate_dataset, ForceProfile, ForwardConfig, ForwardError};
use tcal_core::geometry::{load_layout, GeometryError, TaxelLayout};
use tcal_core::metrics::{render_report, EvalReport, MetricsError, ReportFormat};

/// Seed used when none is given, so runs are reproducible by default.
const DEFAULT_SEED: u64 = 271828;

/// Exit code for data, schema, or validation problems.
const EXIT_DATA: u8 = 3;
/// Exit code for filesystem problems.
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "tcal",
    version,
    about = "Simulation and calibration pipeline for a magnetic fingertip force sensor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the forward model over a force schedule and write a synced log
    Simulate(SimulateArgs),
    /// Fit a per-taxel quadratic calibration from a synced log
    Fit(FitArgs),
    /// Apply a calibration to a log, writing per-sample force predictions
    Predict(PredictArgs),
    /// Score a calibration against the reference forces in a log
    Eval(EvalArgs),
    /// Render reference vs predicted force traces as SVG
    Plot(PlotArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in force schedule
    #[arg(long, default_value = "training", conflicts_with = "profile",
          value_parser = ["training", "test"])]
    preset: String,
    /// Custom force profile JSON, replacing --preset
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Forward-model config JSON (built-in defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Taxel layout JSON (bundled 20-taxel layout when omitted)
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Taxel to simulate
    #[arg(long, default_value_t = 11)]
    taxel: u8,
    /// Noise seed; 0 draws a fresh seed from the OS
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Sample rate in Hz
    #[arg(long, default_value_t = 100.0)]
    rate_hz: f64,
    /// Largest tolerated tactile/reference timestamp skew when pairing
    #[arg(long, default_value_t = 5000)]
    max_skew_us: i64,
    /// Output log path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Input synced log
    #[arg(long = "in")]
    input: PathBuf,
    /// Taxel to calibrate
    #[arg(long, default_value_t = 11)]
    taxel: u8,
    /// Output model JSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Calibration model JSON
    #[arg(long)]
    model: PathBuf,
    /// Input synced log
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV path (t_us,fx_N,fy_N,fz_N)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Calibration model JSON
    #[arg(long)]
    model: PathBuf,
    /// Input synced log
    #[arg(long = "in")]
    input: PathBuf,
    /// Report format
    #[arg(long, default_value = "text", value_parser = ["text", "json", "csv"])]
    format: String,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset label in the report (input file stem when omitted)
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// Calibration model JSON
    #[arg(long)]
    model: PathBuf,
    /// Input synced log
    #[arg(long = "in")]
    input: PathBuf,
    /// Output prefix; writes PREFIX.svg and PREFIX.csv
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plot(args) => cmd_plot(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Maps failures to the documented exit codes: 4 for filesystem errors,
/// 3 for everything else that gets past argument parsing.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<GeometryError>() {
            return match e {
                GeometryError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ForwardError>() {
            return match e {
                ForwardError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<AcquisitionError>() {
            return match e {
                AcquisitionError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<CalibrationError>() {
            return match e {
                CalibrationError::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<MetricsError>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

/// Output locations are checked before any expensive work happens, so a
/// long simulation cannot die on a typo'd path at the very end.
fn check_output_dir(path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        let err = std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        );
        return Err(anyhow::Error::new(err));
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ForwardConfig> {
    match path {
        Some(p) => {
            ForwardConfig::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => {
            let mut cfg = ForwardConfig::default();
            cfg.normalize_and_validate().expect("defaults are valid");
            Ok(cfg)
        }
    }
}

fn load_layout_or_default(path: Option<&Path>) -> Result<TaxelLayout> {
    match path {
        Some(p) => load_layout(p).with_context(|| format!("loading layout {}", p.display())),
        None => Ok(TaxelLayout::bundled_default()),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    check_output_dir(&args.out)?;
    let cfg = load_config(args.config.as_deref())?;
    let layout = load_layout_or_default(args.layout.as_deref())?;
    let profile = match &args.profile {
        Some(p) => {
            ForceProfile::load(p).with_context(|| format!("loading profile {}", p.display()))?
        }
        None => ForceProfile::preset(&args.preset)
            .ok_or_else(|| anyhow!("unknown preset {:?} (expected training or test)", args.preset))?,
    };
    let seed = if args.seed == 0 { rand::random() } else { args.seed };

    let pairs = generate_dataset(&cfg, &layout, args.taxel, &profile, args.rate_hz, seed)?;
    let tactile: Vec<_> = pairs.iter().map(|(t, _)| *t).collect();
    let reference: Vec<_> = pairs.iter().map(|(_, r)| *r).collect();
    let records = merge_streams(&tactile, &reference, args.max_skew_us)?;
    write_log(&records, &args.out)
        .with_context(|| format!("writing log {}", args.out.display()))?;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut clamped = 0usize;
    for r in &records {
        for a in 0..3 {
            lo[a] = lo[a].min(r.force_n[a]);
            hi[a] = hi[a].max(r.force_n[a]);
        }
        clamped += r.clamp_flag as usize;
    }
    println!("wrote {} records to {} (seed {seed})", records.len(), args.out.display());
    println!(
        "force range [N]: x [{:.3}, {:.3}]  y [{:.3}, {:.3}]  z [{:.3}, {:.3}]",
        lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
    );
    if clamped > 0 {
        eprintln!("warning: {clamped} records hit the travel clamp");
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    check_output_dir(&args.out)?;
    let records =
        read_log(&args.input).with_context(|| format!("reading log {}", args.input.display()))?;
    let (model, report) = fit(&records, args.taxel)?;
    save_model(&model, &args.out)
        .with_context(|| format!("writing model {}", args.out.display()))?;
    println!("{report}");
    if report.rank_deficient {
        eprintln!(
            "warning: design matrix is rank-deficient; predictions are valid but \
             weights are not unique (add more varied shear/normal excitation)"
        );
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

/// Records the model applies to: same taxel, in log order.
fn matching_records<'a>(
    records: &'a [SyncedRecord],
    model: &CalibrationModel,
) -> Result<Vec<&'a SyncedRecord>> {
    let matching: Vec<&SyncedRecord> =
        records.iter().filter(|r| r.taxel_id == model.taxel_id).collect();
    if matching.is_empty() {
        bail!("log holds no records for taxel {}", model.taxel_id);
    }
    Ok(matching)
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    check_output_dir(&args.out)?;
    let model =
        load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let records =
        read_log(&args.input).with_context(|| format!("reading log {}", args.input.display()))?;
    let matching = matching_records(&records, &model)?;
    let mut out = String::from("t_us,fx_N,fy_N,fz_N\n");
    for r in &matching {
        let f = predict(&model, r.counts);
        out.push_str(&format!("{},{},{},{}\n", r.t_us, f[0], f[1], f[2]));
    }
    fs::write(&args.out, out)
        .with_context(|| format!("writing predictions {}", args.out.display()))?;
    println!("wrote {} predictions to {}", matching.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if let Some(out) = &args.out {
        check_output_dir(out)?;
    }
    let format: ReportFormat = args.format.parse()?;
    let model =
        load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let records =
        read_log(&args.input).with_context(|| format!("reading log {}", args.input.display()))?;
    let matching = matching_records(&records, &model)?;
    let pred: Vec<[f64; 3]> = matching.iter().map(|r| predict(&model, r.counts)).collect();
    let truth: Vec<[f64; 3]> = matching.iter().map(|r| r.force_n).collect();
    let dataset = match &args.dataset {
        Some(label) => label.clone(),
        None => args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string()),
    };
    let report = EvalReport::new(&dataset, &pred, &truth)?;
    let rendered = render_report(&report, format);
    print!("{rendered}");
    if let Some(path) = &args.out {
        fs::write(path, &rendered)
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    check_output_dir(&args.out)?;
    let model =
        load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let records =
        read_log(&args.input).with_context(|| format!("reading log {}", args.input.display()))?;
    let matching = matching_records(&records, &model)?;

    let mut csv = String::from("t_us,ref_fx_N,ref_fy_N,ref_fz_N,pred_fx_N,pred_fy_N,pred_fz_N\n");
    let mut series: Vec<(u64, [f64; 3], [f64; 3])> = Vec::with_capacity(matching.len());
    for r in &matching {
        let p = predict(&model, r.counts);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t_us, r.force_n[0], r.force_n[1], r.force_n[2], p[0], p[1], p[2]
        ));
        series.push((r.t_us, r.force_n, p));
    }

    let csv_path = args.out.with_extension("csv");
    let svg_path = args.out.with_extension("svg");
    fs::write(&csv_path, csv)
        .with_context(|| format!("writing trace table {}", csv_path.display()))?;
    let svg = render_traces_svg(&series, &args.input);
    fs::write(&svg_path, svg)
        .with_context(|| format!("writing plot {}", svg_path.display()))?;
    println!(
        "wrote {} and {} ({} samples)",
        svg_path.display(),
        csv_path.display(),
        series.len()
    );
    Ok(())
}

/// Three stacked panels (X, Y, Z force), reference as a solid line and the
/// model prediction dashed. Self-contained SVG, no external assets.
fn render_traces_svg(series: &[(u64, [f64; 3], [f64; 3])], source: &Path) -> String {
    const WIDTH: f64 = 900.0;
    const PANEL_H: f64 = 200.0;
    const MARGIN_L: f64 = 64.0;
    const MARGIN_R: f64 = 16.0;
    const MARGIN_TOP: f64 = 40.0;
    const PANEL_GAP: f64 = 34.0;
    const AXIS_COLORS: [&str; 3] = ["#1f77b4", "#2ca02c", "#d62728"];
    const AXIS_NAMES: [&str; 3] = ["X", "Y", "Z"];

    let height = MARGIN_TOP + 3.0 * PANEL_H + 3.0 * PANEL_GAP;
    let t0 = series.first().map_or(0, |s| s.0) as f64;
    let t1 = series.last().map_or(1, |s| s.0) as f64;
    let t_span = (t1 - t0).max(1.0);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;

    let title = xml_escape(&format!(
        "force traces: {} (reference solid, predicted dashed)",
        source.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"22\" font-size=\"15\">{title}</text>\n",
        MARGIN_L
    ));

    for axis in 0..3 {
        let top = MARGIN_TOP + axis as f64 * (PANEL_H + PANEL_GAP);
        let bottom = top + PANEL_H;
        let (mut f_lo, mut f_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, reference, predicted) in series {
            f_lo = f_lo.min(reference[axis]).min(predicted[axis]);
            f_hi = f_hi.max(reference[axis]).max(predicted[axis]);
        }
        if !f_lo.is_finite() || !f_hi.is_finite() {
            f_lo = 0.0;
            f_hi = 1.0;
        }
        let pad = ((f_hi - f_lo) * 0.08).max(0.05);
        f_lo -= pad;
        f_hi += pad;
        let f_span = f_hi - f_lo;

        let x_of = |t: f64| MARGIN_L + (t - t0) / t_span * plot_w;
        let y_of = |f: f64| bottom - (f - f_lo) / f_span * PANEL_H;

        svg.push_str(&format!(
            "  <rect x=\"{MARGIN_L}\" y=\"{top}\" width=\"{plot_w}\" height=\"{PANEL_H}\" \
             fill=\"none\" stroke=\"#999\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" transform=\"rotate(-90 {} {})\" text-anchor=\"middle\">F{} [N]</text>\n",
            MARGIN_L - 44.0,
            top + PANEL_H / 2.0,
            MARGIN_L - 44.0,
            top + PANEL_H / 2.0,
            AXIS_NAMES[axis].to_lowercase()
        ));
        // Zero line when it is inside the panel.
        if f_lo < 0.0 && f_hi > 0.0 {
            let y = y_of(0.0);
            svg.push_str(&format!(
                "  <line x1=\"{MARGIN_L}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"#ccc\" stroke-dasharray=\"2 4\"/>\n",
                MARGIN_L + plot_w
            ));
        }
        // Range labels at the panel corners.
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{:.2}</text>\n",
            MARGIN_L - 6.0,
            top + 10.0,
            f_hi
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{:.2}</text>\n",
            MARGIN_L - 6.0,
            bottom,
            f_lo
        ));

        for (pick, dash) in [(0usize, ""), (1usize, " stroke-dasharray=\"6 4\"")] {
            let mut points = String::new();
            for (t, reference, predicted) in series {
                let f = if pick == 0 { reference[axis] } else { predicted[axis] };
                points.push_str(&format!("{:.2},{:.2} ", x_of(*t as f64), y_of(f)));
            }
            svg.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\"{dash} points=\"{}\"/>\n",
                AXIS_COLORS[axis],
                points.trim_end()
            ));
        }
    }

    // Shared time axis labels under the last panel.
    let axis_y = MARGIN_TOP + 3.0 * PANEL_H + 2.0 * PANEL_GAP + 18.0;
    svg.push_str(&format!(
        "  <text x=\"{MARGIN_L}\" y=\"{axis_y:.2}\">{:.1} s</text>\n",
        t0 / 1e6
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{axis_y:.2}\" text-anchor=\"end\">{:.1} s</text>\n",
        WIDTH - MARGIN_R,
        t1 / 1e6
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
