use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use minins::analyze::{
    conservation_check, flow_stats, throughput_series, AnalyzeError, TraceReader,
};
use minins::packet::{FlowId, NodeId};
use minins::parse_scenario;
use minins::runner::{run_scenario, RunError};
use minins::sim::SimError;
use minins::trace::{TraceOp, TraceSink, TraceWriter};
use minins::validate::{emit_expectations, validate_all, GOLDEN};

#[derive(Parser)]
#[command(
    name = "minins",
    version,
    about = "Packet-level discrete-event network simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and print its statistics block.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace here instead of the scenario's `trace file=`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compute statistics from a trace file.
    Analyze {
        trace: PathBuf,
        #[arg(long)]
        fid: Option<FlowId>,
        /// Source node id (default 0).
        #[arg(long)]
        src: Option<u32>,
        /// Sink node id.
        #[arg(long)]
        sink: Option<u32>,
        /// Print received throughput per bin of this many seconds.
        #[arg(long)]
        bin: Option<f64>,
        /// Verify per-packet lifecycle consistency.
        #[arg(long)]
        check: bool,
    },
    /// Run the bundled golden scenarios against their expected results.
    Validate {
        /// Regenerate expectation files into DIR (tolerance bands are kept).
        #[arg(long, value_name = "DIR")]
        emit: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure {
            code,
            msg: msg.into(),
        }
    }
}

impl From<AnalyzeError> for Failure {
    fn from(e: AnalyzeError) -> Self {
        let code = match e {
            AnalyzeError::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            e if e.is_internal() => EXIT_INTERNAL,
            RunError::Sim(SimError::Trace(_)) => EXIT_DATA,
            _ => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            trace,
        } => cmd_run(&scenario, seed, trace),
        Cmd::Analyze {
            trace,
            fid,
            src,
            sink,
            bin,
            check,
        } => cmd_analyze(&trace, fid, src, sink, bin, check),
        Cmd::Validate { emit } => cmd_validate(emit.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("minins: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn cmd_run(path: &Path, seed: Option<u64>, trace: Option<PathBuf>) -> Result<u8, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
    let mut spec = parse_scenario(&text)
        .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let trace_path = trace.or_else(|| spec.trace.clone());
    let sink: Option<Box<dyn TraceSink>> = match &trace_path {
        Some(p) => Some(Box::new(TraceWriter::create(p).map_err(|e| {
            Failure::new(EXIT_DATA, format!("{}: {e}", p.display()))
        })?)),
        None => None,
    };
    let summary = run_scenario(&spec, sink)?;
    print!("{}", summary.stats_block());
    Ok(0)
}

fn cmd_analyze(
    path: &Path,
    fid: Option<FlowId>,
    src: Option<u32>,
    sink: Option<u32>,
    bin: Option<f64>,
    check: bool,
) -> Result<u8, Failure> {
    let mut out = io::stdout().lock();
    let mut code = 0;
    let write_err = |e: io::Error| Failure::new(EXIT_DATA, format!("stdout: {e}"));

    if fid.is_none() && bin.is_none() && !check {
        let mut counts = [0u64; 4];
        for item in TraceReader::new(open(path)?) {
            let (_, rec) = item?;
            counts[match rec.op {
                TraceOp::Enqueue => 0,
                TraceOp::Dequeue => 1,
                TraceOp::Receive => 2,
                TraceOp::Drop => 3,
            }] += 1;
        }
        let total: u64 = counts.iter().sum();
        writeln!(
            out,
            "records={total}\nenqueues={}\ndequeues={}\nreceives={}\ndrops={}",
            counts[0], counts[1], counts[2], counts[3]
        )
        .map_err(write_err)?;
        return Ok(0);
    }

    if check {
        let violations = conservation_check(open(path)?)?;
        for v in &violations {
            eprintln!("line {}: uid {}: {}", v.line, v.uid, v.reason);
        }
        writeln!(out, "violations={}", violations.len()).map_err(write_err)?;
        if !violations.is_empty() {
            code = EXIT_DATA;
        }
    }

    if let Some(fid) = fid {
        let sink = sink.ok_or_else(|| Failure::new(EXIT_USAGE, "--fid needs --sink"))?;
        let src = NodeId(src.unwrap_or(0));
        let stats = flow_stats(open(path)?, fid, src, NodeId(sink))?;
        writeln!(
            out,
            "fid={fid}\nsent={}\nreceived={}\ndropped={}\nbytes_received={}",
            stats.sent, stats.received, stats.dropped, stats.bytes_received
        )
        .map_err(write_err)?;
        if let (Some(mean), Some(max)) = (stats.mean_delay(), stats.max_delay()) {
            writeln!(
                out,
                "mean_delay_s={mean}\nmax_delay_s={}",
                max.as_secs_f64()
            )
            .map_err(write_err)?;
        }
        if let Some(width) = bin {
            for (start, bps) in throughput_series(open(path)?, fid, NodeId(sink), width)? {
                writeln!(out, "bin={start} bps={bps}").map_err(write_err)?;
            }
        }
    } else if bin.is_some() {
        return Err(Failure::new(EXIT_USAGE, "--bin needs --fid and --sink"));
    }
    Ok(code)
}

fn cmd_validate(emit: Option<&Path>) -> Result<u8, Failure> {
    if let Some(dir) = emit {
        for g in GOLDEN {
            let text = emit_expectations(g).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
            let file = dir.join(format!("{}.expected", g.name));
            fs::write(&file, text)
                .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", file.display())))?;
            println!("wrote {}", file.display());
        }
        return Ok(0);
    }
    let outcomes = validate_all();
    for o in &outcomes {
        if o.passed() {
            println!("PASS {}", o.name);
        } else {
            println!("FAIL {}", o.name);
            for f in &o.failures {
                println!("  {f}");
            }
        }
    }
    Ok(if outcomes.iter().all(|o| o.passed()) {
        0
    } else {
        1
    })
}
