use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blowup_wave::driver::{self, DriverError};
use blowup_wave::manifest::{RunManifest, Settings};
use blowup_wave::output::{to_json_string, write_json};

#[derive(Parser)]
#[command(
    name = "blowup-wave",
    version,
    about = "Blow-up solutions of u_tt = u_xx + u^p"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one preset on one or more grids.
    Run(Flags),
    /// Errors and observed orders over a sequence of grids.
    Study(Flags),
    /// Randomized checks of the discrete comparison lemmas.
    VerifyLemmas(Flags),
}

/// Every flag mirrors a config-file key of the same name.
#[derive(Args, Default)]
struct Flags {
    /// Flat key = value file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// example1 | example2 | example3 | custom
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    p: Option<String>,
    /// Scale factor written as 1/m.
    #[arg(long)]
    lambda: Option<String>,
    /// Grid size, or a comma-separated list.
    #[arg(long = "I")]
    i: Option<String>,
    /// Block count (J^2 = I), `auto` or `none`.
    #[arg(long = "J")]
    j: Option<String>,
    #[arg(long)]
    k_max: Option<String>,
    #[arg(long)]
    pad_cells: Option<String>,
    /// Explicit threshold.
    #[arg(long = "M")]
    m: Option<String>,
    #[arg(long)]
    eval_time: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    cases: Option<String>,
    /// Comma-separated outputs: norm_trace, tau_series, blowup_curve,
    /// error_table, solution_snapshots, all, none.
    #[arg(long)]
    emit: Option<String>,
    #[arg(long)]
    tail_tol: Option<String>,
    #[arg(long)]
    inject: Option<String>,
    /// literal | interpolated
    #[arg(long)]
    child_start: Option<String>,
    /// Blow-up time of the exact solution (example1).
    #[arg(long = "T")]
    t: Option<String>,
    /// Slope of the exact blow-up curve (example1).
    #[arg(long)]
    d: Option<String>,
    /// CSV with columns x, u0, u1 for the custom preset.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    snapshot_stride: Option<String>,
}

impl Flags {
    fn settings(&self) -> Result<Settings, DriverError> {
        let mut s = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        let mut cli = Settings::default();
        let pairs = [
            ("preset", &self.preset),
            ("p", &self.p),
            ("lambda", &self.lambda),
            ("I", &self.i),
            ("J", &self.j),
            ("k-max", &self.k_max),
            ("pad-cells", &self.pad_cells),
            ("M", &self.m),
            ("eval-time", &self.eval_time),
            ("out", &self.out),
            ("seed", &self.seed),
            ("cases", &self.cases),
            ("emit", &self.emit),
            ("tail-tol", &self.tail_tol),
            ("inject", &self.inject),
            ("child-start", &self.child_start),
            ("T", &self.t),
            ("d", &self.d),
            ("init", &self.init),
            ("snapshot-stride", &self.snapshot_stride),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cli.set(k, v)?;
            }
        }
        s.merge(&cli);
        Ok(s)
    }
}

fn execute(cmd: &Command) -> Result<(), DriverError> {
    match cmd {
        Command::Run(f) => {
            let m = RunManifest::from_settings(&f.settings()?)?;
            let out = driver::run(&m)?;
            for s in &out.sizes {
                println!(
                    "I = {}: global {} T = {:.6} depth {}, {} blocks",
                    s.i,
                    s.global.status,
                    s.global.t_blowup,
                    s.global.depth,
                    s.blocks.len()
                );
            }
            println!("wrote {}", m.output_dir.display());
            Ok(())
        }
        Command::Study(f) => {
            let mut s = f.settings()?;
            if s.get("I").is_none() {
                s.set("I", "64,128,256,512")?;
            }
            let m = RunManifest::from_settings(&s)?;
            let out = driver::study(&m)?;
            for e in &out.errors {
                println!(
                    "I = {:4}  rel_l2 {:.3e}  rel_linf {:.3e}",
                    e.i, e.rel_l2, e.rel_linf
                );
            }
            for o in &out.orders {
                let flag = if o.below_threshold { "  LOW" } else { "" };
                println!(
                    "{} -> {}: order l2 {:.2}, linf {:.2}{flag}",
                    o.i, o.i_next, o.order_l2, o.order_linf
                );
            }
            println!("wrote {}", m.output_dir.display());
            Ok(())
        }
        Command::VerifyLemmas(f) => {
            let s = f.settings()?;
            let m = RunManifest::from_settings(&s)?;
            let out = driver::verify_lemmas(m.seed, m.cases)?;
            println!(
                "comparison instances: {}/{} pass, mutations detected {}/{}",
                out.lemma3_passed, out.cases, out.mutations_detected, out.mutations
            );
            for w in &out.windows {
                println!(
                    "p = {} I = {} window [{}, {}]: convexity {}, growth {}",
                    w.p, w.i, w.window.0, w.window.1, w.lemma1, w.lemma2
                );
            }
            if s.get("out").is_some() {
                std::fs::create_dir_all(&m.output_dir).map_err(|source| DriverError::Io {
                    context: m.output_dir.display().to_string(),
                    source,
                })?;
                let path = m.output_dir.join("lemmas.json");
                write_json(&path, &out).map_err(|source| DriverError::Io {
                    context: path.display().to_string(),
                    source,
                })?;
            }
            if out.all_passed() {
                Ok(())
            } else {
                Err(DriverError::Check("lemma checks failed".into()))
            }
        }
    }
}

fn out_dir(cmd: &Command) -> Option<PathBuf> {
    let f = match cmd {
        Command::Run(f) | Command::Study(f) | Command::VerifyLemmas(f) => f,
    };
    f.settings().ok()?.get("out").map(PathBuf::from)
}

fn report(e: &DriverError, dir: Option<&Path>) {
    let rec = e.record();
    let text = to_json_string(&serde_json::json!({ "error": rec }))
        .unwrap_or_else(|_| format!("{{\"error\": {{\"message\": {:?}}}}}\n", rec.message));
    eprint!("{text}");
    if let Some(d) = dir.filter(|d| d.is_dir()) {
        let _ = std::fs::write(d.join("error.json"), text);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, out_dir(&cli.command).as_deref());
            ExitCode::from(match e {
                DriverError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
