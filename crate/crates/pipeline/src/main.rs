use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vip_core::limits::{coverage_with_signal, ToySetup, DEFAULT_CL};
use vip_pipeline::config::{dump_defaults, preset_fragment, PipelineConfig};
use vip_pipeline::manifest::write_atomic;
use vip_pipeline::plot::{write_plot_data, PlotRange};
use vip_pipeline::run::{self, run_experiment};
use vip_pipeline::{PipelineError, Result};

#[derive(Parser)]
#[command(name = "vip", version, about = "Simulate and analyse current-on/current-off CCD X-ray runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunKind {
    On,
    Off,
}

impl RunKind {
    fn current_on(self) -> bool {
        matches!(self, Self::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and write its frames (VIPF).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        run: RunKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find and classify clusters in a frame file; writes the event CSV.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Kα/Kβ on the pooled event lists; writes the calibration JSON.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        events: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrated energy spectrum of one event list.
    Spectrum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long, value_enum)]
        run: RunKind,
        /// Seconds; defaults to n_frames x exposure from the config.
        #[arg(long)]
        live_time: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Live-time-normalised difference of two raw spectra.
    Subtract {
        #[arg(long)]
        on: PathBuf,
        #[arg(long)]
        off: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upper limit from the on/off spectra; writes the limit report JSON.
    Limit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        on: PathBuf,
        #[arg(long)]
        off: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Both runs and the whole analysis chain into one directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Toy coverage of the upper limit; prints JSON.
    Coverage {
        /// Expected background counts in the current-on ROI.
        #[arg(long)]
        background: f64,
        #[arg(long, default_value_t = 0.0)]
        signal: f64,
        /// On/off live-time ratio.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = DEFAULT_CL)]
        cl: f64,
        #[arg(long, default_value_t = 100_000)]
        toys: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the [sim] fragment of an environment preset (lnf, lngs).
    Preset { name: String },
    /// Restrict a spectrum or difference CSV to a range for plotting.
    Plot {
        #[arg(long)]
        spectrum: PathBuf,
        /// full, roi, fig4b or LOW:HIGH in keV.
        #[arg(long, default_value = "roi")]
        range: String,
        /// Standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        /// Print every key with its default and a short description.
        #[arg(long)]
        dump_defaults: bool,
    },
}

fn load(path: &Path) -> Result<PipelineConfig> {
    PipelineConfig::from_file(path)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, run, out } => {
            let cfg = load(&config)?;
            let info = run::stage_simulate(&cfg, run.current_on(), &out)?;
            println!("{} frames, live time {} s -> {}", info.n_frames, info.live_time, out.display());
        }
        Command::Reconstruct { config, frames, out } => {
            let cfg = load(&config)?;
            let (events, stats) = run::stage_reconstruct_file(&cfg, &frames)?;
            run::write_events(&out, &events)?;
            println!(
                "{} frames, {} clusters, {} accepted, {} tracks rejected",
                stats.frames, stats.clusters, stats.accepted, stats.rejected_tracks
            );
        }
        Command::Calibrate { config, events, out } => {
            let cfg = load(&config)?;
            let sets = events.iter().map(|p| run::read_events(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[vip_core::Event]> = sets.iter().map(Vec::as_slice).collect();
            let lc = run::stage_calibrate(&cfg, &refs)?;
            run::write_calibration(&out, &lc.calibration)?;
            println!(
                "gain {} keV/ADU, offset {} keV",
                lc.calibration.gain, lc.calibration.offset
            );
        }
        Command::Spectrum {
            config,
            events,
            calibration,
            run: kind,
            live_time,
            out,
        } => {
            let cfg = load(&config)?;
            let events = run::read_events(&events)?;
            let cal = run::read_calibration(&calibration)?;
            let live = live_time.unwrap_or_else(|| cfg.live_time());
            let spec = run::stage_spectrum(&cfg, &events, &cal, live, kind.current_on())?;
            run::write_spectrum("spectrum", &out, &spec)?;
        }
        Command::Subtract { on, off, out } => {
            let on = run::read_spectrum("subtract", &on)?;
            let off = run::read_spectrum("subtract", &off)?;
            run::write_spectrum("subtract", &out, &run::stage_subtract(&on, &off)?)?;
        }
        Command::Limit { config, on, off, out } => {
            let cfg = load(&config)?;
            let on = run::read_spectrum("limit", &on)?;
            let off = run::read_spectrum("limit", &off)?;
            let report = run::stage_limit(&cfg, &on, &off)?;
            run::write_limit(&out, &report)?;
            println!(
                "excess {} +- {}, beta^2/2 < {:e} at CL {}",
                report.excess, report.excess_error, report.beta2_over_2_upper, report.cl
            );
        }
        Command::Run { config, out_dir } => {
            let cfg = load(&config)?;
            let o = run_experiment(&cfg, &out_dir)?;
            println!(
                "excess {} +- {}, beta^2/2 < {:e} at CL {} ({})",
                o.report.excess,
                o.report.excess_error,
                o.report.beta2_over_2_upper,
                o.report.cl,
                out_dir.join(vip_pipeline::manifest::MANIFEST_FILE).display()
            );
        }
        Command::Coverage {
            background,
            signal,
            scale,
            cl,
            toys,
            seed,
        } => {
            let setup = ToySetup {
                background_on: background,
                signal,
                scale_s: scale,
                cl,
                n_toys: toys,
                seed,
            };
            let c = coverage_with_signal(&setup).map_err(|e| match e {
                vip_core::Error::Domain(m) => PipelineError::Config(m),
                e => PipelineError::stage("coverage")(e),
            })?;
            println!("{}", serde_json::to_string(&c).expect("coverage serialises"));
        }
        Command::Preset { name } => print!("{}", preset_fragment(&name)?),
        Command::Plot { spectrum, range, out } => {
            let range: PlotRange = range.parse()?;
            let spec = run::read_spectrum("plot", &spectrum)?;
            match out {
                Some(path) => {
                    let data = vip_pipeline::plot::emit_plot_data(&spec, range)?;
                    write_atomic("plot", &path, |w| data.write_csv(w))?;
                }
                None => write_plot_data(&spec, range, std::io::stdout().lock())?,
            }
        }
        Command::Config { dump_defaults: dump } => {
            if !dump {
                return Err(PipelineError::Config("nothing to do; try `vip config --dump-defaults`".into()));
            }
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(dump_defaults().as_bytes());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
