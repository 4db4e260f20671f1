use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use fedpi_core::data::Dataset;
use fedpi_core::fedavg::{run_repeats, worker_for, ConvergenceLog, FedConfig, RunFailure};
use fedpi_core::metrics::{
    bench_latency, run_rows, summary_row, write_latency_csv, write_phase_csv, write_report,
    Direction, Format, Report, Summary, SummaryRow,
};
use fedpi_core::models::ModelKind;
use fedpi_core::transport::tcp::{self, TcpServer};
use fedpi_core::transport::{SimTransport, Transport};
use fedpi_core::Error;

use crate::config::{ExperimentConfig, TransportConfig, OUTPUT_ENV};
use crate::{EXIT_CONNECTIVITY, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_PROTOCOL, EXIT_USAGE};

/// Maps the first library error in the chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Protocol { .. } | Error::Format { .. } => EXIT_PROTOCOL,
                Error::Connectivity(_) => EXIT_CONNECTIVITY,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

pub fn bench(
    model: ModelKind,
    batches: &[usize],
    runs: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<u8> {
    let dir = out
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let table = bench_latency(model, batches, runs, seed)?;
    let path = dir.join(format!("latency-{model}.csv"));
    write_latency_csv(&table, &path)?;

    println!("{model} latency over {runs} runs (ms)");
    println!(
        "{:>6}  {:>10} {:>10} {:>10}  {:>10} {:>10} {:>10}",
        "batch", "fwd mean", "fwd min", "fwd max", "bwd mean", "bwd min", "bwd max"
    );
    for pair in table.chunks(2) {
        let (f, b) = (pair[0].stats(), pair[1].stats());
        debug_assert_eq!(pair[1].direction, Direction::Backward);
        println!(
            "{:>6}  {:>10.3} {:>10.3} {:>10.3}  {:>10.3} {:>10.3} {:>10.3}",
            pair[0].batch, f.mean, f.min, f.max, b.mean, b.min, b.max
        );
    }
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    logs: &[ConvergenceLog],
    summary: Option<&Summary>,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let runs = Report::Runs(run_rows(logs, cfg.output.host_wall_clock));
    write_report(&runs, dir.join("runs.csv"), Format::Csv)?;
    write_report(&runs, dir.join("runs.json"), Format::Json)?;
    write_phase_csv(logs, dir.join("phases.csv"))?;
    if let Some(s) = summary {
        let rows = Report::Summary(vec![summary_row(&cfg.fed_config(), s)]);
        write_report(&rows, dir.join("summary.csv"), Format::Csv)?;
        write_report(&rows, dir.join("summary.json"), Format::Json)?;
    }
    Ok(())
}

fn print_table(logs: &[ConvergenceLog], summary: &Summary) {
    println!(
        "{:>8}  {:>9}  {:>12}  {:>9}  {:>12}",
        "seed", "hit round", "hit virt ms", "final acc", "max bytes"
    );
    for log in logs {
        let last = log.records.last();
        let hit = log.first_hit;
        println!(
            "{:>8}  {:>9}  {:>12}  {:>9.4}  {:>12}",
            log.seed,
            hit.map_or("-".into(), |h| h.round.to_string()),
            hit.map_or("-".into(), |h| format!("{:.0}", h.virtual_ms)),
            last.map_or(0.0, |r| r.accuracy),
            last.and_then(|r| r.cum_bytes.iter().copied().max())
                .unwrap_or(0),
        );
    }
    let opt = |v: Option<u32>| v.map_or("-".into(), |v| v.to_string());
    println!(
        "target {:.2}: {}/{} runs converged; rounds mean {} min {} max {}",
        summary.target,
        summary.converged_runs,
        summary.runs,
        opt(summary.mean_round),
        opt(summary.min_round),
        opt(summary.max_round)
    );
}

struct Cell {
    logs: Vec<ConvergenceLog>,
    summary: Option<Summary>,
    failure: Option<anyhow::Error>,
}

/// Runs every seed of `fed` and writes its reports into `dir`.
fn run_cell(cfg: &ExperimentConfig, fed: &FedConfig, dir: &Path, data: &Data) -> Result<Cell> {
    let outcome = match &cfg.transport {
        TransportConfig::Sim { link } => {
            let train = data.train.as_ref().expect("sim runs load training data");
            let mut t = SimTransport::new(fed, Arc::clone(train), link.clone())?;
            run_repeats(fed, &data.test, &mut t)
        }
        TransportConfig::Tcp {
            listen,
            accept_timeout_s,
            round_timeout_s,
            ..
        } => {
            let Some(addr) = listen else {
                bail!("transport.listen is required to run the server");
            };
            let listener = TcpListener::bind(addr)
                .map_err(|e| Error::Connectivity(format!("binding {addr}: {e}")))?;
            eprintln!("waiting for {} workers on {addr}", fed.k);
            let mut server =
                TcpServer::accept(&listener, fed.k, Duration::from_secs(*accept_timeout_s))?;
            server.set_read_timeout(Some(Duration::from_secs(*round_timeout_s)))?;
            let outcome = run_repeats(fed, &data.test, &mut server);
            let closed = server.shutdown();
            if outcome.is_ok() {
                closed?;
            }
            outcome
        }
    };
    match outcome {
        Ok(out) => {
            write_outputs(dir, cfg, &out.logs, Some(&out.summary))?;
            Ok(Cell {
                logs: out.logs,
                summary: Some(out.summary),
                failure: None,
            })
        }
        Err(RunFailure { logs, error }) => {
            write_outputs(dir, cfg, &logs, None)?;
            Ok(Cell {
                logs,
                summary: None,
                failure: Some(error.into()),
            })
        }
    }
}

struct Data {
    train: Option<Arc<Dataset>>,
    test: Arc<Dataset>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let train = match cfg.transport {
        TransportConfig::Sim { .. } => Some(cfg.load_train()?),
        TransportConfig::Tcp { .. } => None,
    };
    Ok(Data {
        train,
        test: cfg.load_test()?,
    })
}

pub fn run(path: &Path) -> Result<u8> {
    let cfg = ExperimentConfig::load(path)?;
    let data = load_data(&cfg)?;
    let fed = cfg.fed_config();
    let cell = run_cell(&cfg, &fed, &cfg.output.dir, &data)?;
    if let Some(err) = cell.failure {
        eprintln!("partial reports written to {}", cfg.output.dir.display());
        return Err(err.context(format!(
            "run aborted after {} completed runs",
            cell.logs.len().saturating_sub(1)
        )));
    }
    let summary = cell.summary.expect("successful runs are summarized");
    print_table(&cell.logs, &summary);
    println!("reports in {}", cfg.output.dir.display());
    Ok(if summary.converged_runs == summary.runs {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

pub fn sweep(path: &Path, e_values: &[usize]) -> Result<u8> {
    let cfg = ExperimentConfig::load(path)?;
    if matches!(cfg.transport, TransportConfig::Tcp { .. }) {
        bail!("sweep runs in-process only; use `run` per E value for tcp transport");
    }
    if e_values.is_empty() || e_values.contains(&0) {
        bail!("--e-values must list positive integers");
    }
    let data = load_data(&cfg)?;
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut code = EXIT_OK;
    for &e in e_values {
        let fed = FedConfig {
            e,
            ..cfg.fed_config()
        };
        let dir = cfg.output.dir.join(format!("e{e}"));
        println!("== E = {e}");
        let cell = run_cell(&cfg, &fed, &dir, &data);
        let cell = match cell {
            Ok(c) => c,
            Err(err) => Cell {
                logs: Vec::new(),
                summary: None,
                failure: Some(err),
            },
        };
        match (cell.summary, cell.failure) {
            (Some(s), _) => {
                print_table(&cell.logs, &s);
                if s.converged_runs < s.runs {
                    code = code.max(EXIT_NOT_CONVERGED);
                }
                rows.push(summary_row(&fed, &s));
            }
            (None, failure) => {
                let err = failure.unwrap_or_else(|| anyhow::anyhow!("no summary"));
                eprintln!("E = {e} failed: {err:#}");
                code = code.max(exit_code(&err));
                rows.push(SummaryRow {
                    e: fed.e,
                    b: fed.b,
                    k: fed.k,
                    scheme: fed.partition.name().to_string(),
                    mean_round: None,
                    min_round: None,
                    max_round: None,
                    mean_ms: None,
                    min_ms: None,
                    max_ms: None,
                    converged_runs: 0,
                });
            }
        }
    }
    std::fs::create_dir_all(&cfg.output.dir)?;
    let report = Report::Summary(rows);
    write_report(&report, cfg.output.dir.join("sweep.csv"), Format::Csv)?;
    write_report(&report, cfg.output.dir.join("sweep.json"), Format::Json)?;
    println!(
        "sweep table in {}",
        cfg.output.dir.join("sweep.csv").display()
    );
    Ok(code)
}

pub fn worker(path: &Path, id: u32) -> Result<u8> {
    let cfg = ExperimentConfig::load(path)?;
    let TransportConfig::Tcp {
        connect: Some(addr),
        ..
    } = &cfg.transport
    else {
        bail!("worker mode needs a tcp transport with `connect` set");
    };
    let fed = cfg.fed_config();
    if id as usize >= fed.k {
        bail!("--worker-id {id} outside 0..{}", fed.k);
    }
    let train = cfg.load_train()?;
    let mut stream =
        tcp::connect_with_retry(addr.as_str(), tcp::CONNECT_ATTEMPTS, tcp::CONNECT_DELAY)?;
    tcp::register(&mut stream, id)?;
    let rounds = tcp::serve_worker(&mut stream, id, |run| {
        let seed = *fed.seeds.get(run as usize).ok_or_else(|| Error::Protocol {
            worker: Some(id),
            message: format!(
                "server started run {run} but only {} seeds are configured",
                fed.seeds.len()
            ),
        })?;
        worker_for(&fed, &train, seed, id)
    })?;
    eprintln!("worker {id}: served {rounds} rounds, shutting down");
    Ok(EXIT_OK)
}
