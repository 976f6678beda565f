use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use stateguard::engine::{BondStore, EngineConfig};
use stateguard::patch::{self, PatchClient, PatchOp};
use stateguard::replay::{self, bench, corpus, DetectionReport, Trace};
use stateguard::rules::{default_paths, default_store};
use stateguard::vm::{decode_container, PolicyStore};

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Parser)]
#[command(
    name = "stateguard",
    version,
    about = "State-aware BLE inspection engine"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a trace file or a directory of traces and write a detection report.
    Run(RunArgs),
    /// Per-packet overhead with 0, 1 and 10 installed rules.
    Bench {
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Only used to check that the policy directory loads.
        #[arg(long)]
        policies: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Write the benign and attack corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in rule containers, bindings and paths.
    ExportPolicies {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the patch channel over TCP.
    Serve {
        #[arg(long)]
        policies: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_ADDR)]
        listen: String,
    },
    /// Install a program container.
    Install {
        container: PathBuf,
        #[command(flatten)]
        conn: Conn,
    },
    /// Remove a program by id.
    Remove {
        id: String,
        #[command(flatten)]
        conn: Conn,
    },
    /// Insert or replace a map entry. Key and value are hex.
    MapPut {
        map: String,
        key: String,
        value: String,
        #[command(flatten)]
        conn: Conn,
    },
    /// Delete a map entry. The key is hex.
    MapDelete {
        map: String,
        key: String,
        #[command(flatten)]
        conn: Conn,
    },
    /// List installed programs and their attach keys.
    List {
        #[command(flatten)]
        conn: Conn,
    },
}

#[derive(Args)]
struct Conn {
    #[arg(long, default_value = DEFAULT_ADDR)]
    addr: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    policies: Option<PathBuf>,
    #[arg(long)]
    bonds: Option<PathBuf>,
    #[arg(long)]
    strict_keysize: bool,
    #[arg(long, default_value_t = 2)]
    repeat_threshold: u64,
    /// JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_policies(dir: Option<&Path>) -> Result<PolicyStore> {
    let Some(dir) = dir else {
        return Ok(default_store()?);
    };
    let store = PolicyStore::load_dir(dir)
        .with_context(|| format!("loading policies from {}", dir.display()))?;
    if !dir.join("paths.txt").exists() {
        store.set_paths(default_paths());
    }
    Ok(store)
}

fn load_traces(path: &Path) -> Result<Vec<Trace>> {
    let files = if path.is_dir() {
        let mut v: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "trace"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let mut t = Trace::parse(&text).with_context(|| format!("{}", f.display()))?;
            if t.meta.name.is_empty() {
                t.meta.name = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
            }
            Ok(t)
        })
        .collect()
}

fn run(a: RunArgs) -> Result<bool> {
    let store = Arc::new(load_policies(a.policies.as_deref())?);
    let bonds = match &a.bonds {
        Some(p) => BondStore::open(p).with_context(|| format!("opening {}", p.display()))?,
        None => BondStore::in_memory(),
    };
    let config = EngineConfig {
        strict_keysize: a.strict_keysize,
        repeat_threshold: a.repeat_threshold,
        ..EngineConfig::default()
    };
    let traces = load_traces(&a.trace)?;
    let report = if a.trace.is_dir() {
        replay::replay_all(&traces, &store, &bonds, &config)
    } else {
        let (r, _) = replay::replay(&traces[0], store, bonds, config);
        DetectionReport::new(vec![r])
    };
    print!("{}", report.to_text());
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(report.summary.passed)
}

fn hex_arg(s: &str) -> Result<Vec<u8>> {
    hex::decode(s.trim_start_matches("0x")).with_context(|| format!("`{s}` is not hex"))
}

fn request(conn: &Conn, op: PatchOp) -> Result<bool> {
    let mut c =
        PatchClient::connect(&conn.addr).with_context(|| format!("connecting to {}", conn.addr))?;
    let r = c.request(&op)?;
    if r.is_ok() {
        print!("{}", r.message);
        if !r.message.ends_with('\n') {
            println!();
        }
    } else {
        eprintln!("{:?}: {}", r.status, r.message);
    }
    Ok(r.is_ok())
}

fn main_inner() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run(a) => run(a),
        Cmd::Bench {
            trace,
            policies,
            repeats,
        } => {
            if let Some(dir) = policies.as_deref() {
                load_policies(Some(dir))?;
            }
            let t = match trace {
                Some(p) => load_traces(&p)?.remove(0),
                None => corpus::bench_trace(1000),
            };
            let stats = bench::bench_rule_sets(&t, repeats);
            print!("{}", bench::render(&stats));
            if let [_, one, .., ten] = stats.as_slice() {
                println!(
                    "1 rule {:.3} us (reference 1.219 us), 10 rules {:.3} us (reference 1.094 us), ratio {:.2}",
                    one.mean_ns / 1000.0,
                    ten.mean_ns / 1000.0,
                    ten.mean_ns / one.mean_ns
                );
            }
            Ok(true)
        }
        Cmd::GenCorpus { out } => {
            for p in corpus::write_corpus(&out)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Cmd::ExportPolicies { out } => {
            default_store()?.save_dir(&out)?;
            println!("{}", out.display());
            Ok(true)
        }
        Cmd::Serve { policies, listen } => {
            let store = load_policies(policies.as_deref())?;
            let listener =
                TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            log::info!("patch channel on {}", listener.local_addr()?);
            patch::serve(&store, listener)?;
            Ok(true)
        }
        Cmd::Install { container, conn } => {
            let bytes =
                fs::read(&container).with_context(|| format!("reading {}", container.display()))?;
            let p = decode_container(&bytes).with_context(|| format!("{}", container.display()))?;
            request(&conn, PatchOp::Install(p))
        }
        Cmd::Remove { id, conn } => request(&conn, PatchOp::Remove(id)),
        Cmd::MapPut {
            map,
            key,
            value,
            conn,
        } => request(
            &conn,
            PatchOp::MapPut {
                map,
                key: hex_arg(&key)?,
                value: hex_arg(&value)?,
            },
        ),
        Cmd::MapDelete { map, key, conn } => request(
            &conn,
            PatchOp::MapDelete {
                map,
                key: hex_arg(&key)?,
            },
        ),
        Cmd::List { conn } => request(&conn, PatchOp::List),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
