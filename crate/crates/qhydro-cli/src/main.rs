//! `qhydro`: simulate lattice data, learn hydrodynamic PDEs, scan the sparsity
//! frontier and validate recovered equations by solving them forward.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qhydro::pipeline::{self, LearnedRecord, RunConfig};
use qhydro::{presets, Error};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "qhydro",
    version,
    about = "PDE discovery for quantum lattice hydrodynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a raw dataset.
    Simulate {
        /// Model kind: fermion, domain_wall, magnon or forward.
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Learn one PDE per configured target and print it.
    Learn {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Scan lambda0 and tabulate the distinct models.
    Frontier {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Solve learned PDEs from the first time slice and compare with the data.
    Validate {
        #[command(flatten)]
        data: DataArg,
        /// PDE file written by `learn`; learned afresh when absent.
        #[arg(long, value_name = "FILE")]
        pde: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset sidecar to ingest instead of simulating.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// JSON config overlaid on the preset (or on the defaults).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Override one dotted key, e.g. `regress.lambda0=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Resolve and check the config, print the plan, compute nothing.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_)) | Some(Error::Io { .. }) => 3,
        Some(Error::Numerical(_)) => 4,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let (name, common, model, data, pde) = match &cli.command {
        Command::Simulate { model, common } => ("simulate", common, model.as_deref(), None, None),
        Command::Learn { data, common } => ("learn", common, None, data.data.as_deref(), None),
        Command::Frontier { data, common } => {
            ("frontier", common, None, data.data.as_deref(), None)
        }
        Command::Validate { data, pde, common } => (
            "validate",
            common,
            None,
            data.data.as_deref(),
            pde.as_deref(),
        ),
    };
    let cfg = resolve(common, model, data)?;
    if common.threads == 0 {
        return Err(Error::config("--threads must be at least 1").into());
    }
    if common.dry_run {
        print!("{}", pipeline::plan(&cfg, name)?);
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .context("starting worker pool")?;

    let mut out = Output::new(&common.out)?;
    out.json("config.json", &cfg)?;
    match cli.command {
        Command::Simulate { .. } => simulate(&cfg, common.preset.as_deref(), &mut out)?,
        Command::Learn { .. } => learn(&cfg, &mut out)?,
        Command::Frontier { .. } => frontier(&cfg, &mut out)?,
        Command::Validate { .. } => validate(&cfg, pde, &mut out)?,
    }
    out.finish(name)
}

fn simulate(cfg: &RunConfig, preset: Option<&str>, out: &mut Output) -> Result<()> {
    let mut ds = pipeline::simulate(cfg)?;
    if let Some(p) = preset {
        ds.meta.insert("preset".into(), p.into());
    }
    let written = ds.save(&out.dir.join("dataset"))?;
    out.record_all(&written);
    eprintln!(
        "dataset: {} x {} ({}) -> {}",
        ds.grid.nt,
        ds.grid.nx,
        ds.field_names().join(", "),
        written[0].display()
    );
    Ok(())
}

fn prepared(cfg: &RunConfig) -> Result<pipeline::Prepared> {
    let raw = pipeline::simulate(cfg)?;
    Ok(pipeline::prepare(&cfg.preprocess, &raw)?)
}

fn learn(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let p = prepared(cfg)?;
    let learned = pipeline::learn(cfg, &p)?;
    let records: Vec<LearnedRecord> = learned.iter().map(|l| l.record()).collect();
    for r in &records {
        println!("{}", r.equation);
        if !r.pde.flags.is_empty() {
            eprintln!("  {}_t flags: {}", r.target, r.pde.flags.join(", "));
        }
    }
    out.json("pde.json", &records)
}

fn frontier(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let p = prepared(cfg)?;
    let results = pipeline::frontier(cfg, &p)?;
    let mut table = String::new();
    let mut csv = String::from("target,lambda0,k,residual,objective,equation\n");
    let mut doc = Vec::new();
    for r in &results {
        table.push_str(&r.table());
        let records = r.records();
        for (e, rec) in r.frontier.entries.iter().zip(&records) {
            let eqn =
                qhydro::term_library::render(&r.target, r.library.terms(), &e.pde.coefficients);
            writeln!(
                csv,
                "{},{:e},{},{:e},{:e},\"{}\"",
                r.target,
                rec.lambda0,
                rec.active_terms.len(),
                rec.residual,
                rec.objective,
                eqn
            )?;
        }
        doc.push(json!({ "target": r.target, "library": r.library.names(), "entries": records }));
    }
    print!("{table}");
    out.text("frontier.txt", &table)?;
    out.text("frontier.csv", &csv)?;
    out.json("frontier.json", &doc)
}

fn validate(cfg: &RunConfig, pde: Option<&Path>, out: &mut Output) -> Result<()> {
    let p = prepared(cfg)?;
    let equations = match pde {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let records: Vec<LearnedRecord> = serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            records
                .iter()
                .map(|r| Ok((r.target.clone(), r.rhs()?)))
                .collect::<qhydro::Result<Vec<_>>>()?
        }
        None => pipeline::learned_rhs(&pipeline::learn(cfg, &p)?),
    };
    let report = pipeline::validate(cfg, &p, &equations)?;
    let summary = report.summary();

    let grid = &report.solution.grid;
    let mut csv = String::from("t");
    let fields = report
        .errors
        .as_ref()
        .map(|c| c.fields.as_slice())
        .unwrap_or(&[]);
    for f in fields {
        write!(csv, ",{}_max_abs", f.name)?;
    }
    csv.push('\n');
    for i in 0..grid.nt {
        write!(csv, "{:e}", grid.t(i))?;
        for f in fields {
            write!(csv, ",{:e}", f.per_time[i])?;
        }
        csv.push('\n');
    }
    for e in &summary.errors {
        println!("{}: max_abs {:.3e}  rms {:.3e}", e.name, e.max_abs, e.rms);
    }
    match summary.blowup_time {
        Some(t) => println!("blowup_time {t}"),
        None => println!("no blowup"),
    }
    let equations_doc: Vec<Value> = equations
        .iter()
        .map(|(target, rhs)| {
            let terms: Vec<_> = rhs.iter().map(|(_, t)| t.clone()).collect();
            let coefs: Vec<_> = rhs.iter().map(|(c, _)| *c).collect();
            json!({ "target": target, "equation": qhydro::term_library::render(target, &terms, &coefs) })
        })
        .collect();
    out.json(
        "validate.json",
        &json!({ "equations": equations_doc, "summary": summary }),
    )?;
    out.text("errors.csv", &csv)?;
    let written = report.solution.save(&out.dir.join("solution"))?;
    out.record_all(&written);
    Ok(())
}

/// Starts from the preset (or defaults), overlays `--config`, then each `--set`.
fn resolve(common: &Common, model: Option<&str>, data: Option<&Path>) -> Result<RunConfig> {
    let base = match &common.preset {
        Some(name) => presets::preset(name)?,
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(base)?;
    if let Some(kind) = model {
        let current = v["model"]["kind"].as_str().unwrap_or_default().to_string();
        if kind != current {
            if let Some(p) = &common.preset {
                return Err(
                    Error::config(format!("preset {p} uses model {current}, not {kind}")).into(),
                );
            }
            v["model"] = json!({ "kind": kind });
        }
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        overlay(&mut v, patch);
    }
    for s in &common.set {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        set_dotted(&mut v, key, value)?;
    }
    if let Some(d) = data {
        v["model"] = json!({ "kind": "ingest", "path": d });
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursive object merge. A tagged object whose `kind` changes is replaced
/// outright, since its old fields would not belong to the new variant.
fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let kind_changed = matches!(
                (b.get("kind"), p.get("kind")),
                (Some(old), Some(new)) if old != new
            );
            if kind_changed {
                b.clear();
            }
            for (k, pv) in p {
                match b.get_mut(&k) {
                    Some(bv) => overlay(bv, pv),
                    None => {
                        b.insert(k, pv);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_dotted(v: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad key {key:?}")).into());
    }
    set_path(v, &parts, value).map_err(|msg| Error::config(format!("{key}: {msg}")).into())
}

fn set_path(node: &mut Value, parts: &[&str], value: Value) -> std::result::Result<(), String> {
    let Some((head, tail)) = parts.split_first() else {
        overlay(node, value);
        return Ok(());
    };
    if node.is_null() {
        *node = json!({});
    }
    match node {
        Value::Array(items) => {
            let i: usize = head
                .parse()
                .map_err(|_| format!("{head:?} is not an index"))?;
            let len = items.len();
            let item = items
                .get_mut(i)
                .ok_or_else(|| format!("index {i} out of range ({len} items)"))?;
            set_path(item, tail, value)
        }
        Value::Object(map) => set_path(
            map.entry(head.to_string()).or_insert(Value::Null),
            tail,
            value,
        ),
        _ => Err(format!("{head:?} is below a scalar")),
    }
}

/// Artifact directory that remembers what it wrote for the manifest.
struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(dir: &Path) -> Result<Output> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: vec![],
        })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: serde::Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn record_all(&mut self, paths: &[PathBuf]) {
        self.files.extend_from_slice(paths);
    }

    fn finish(mut self, command: &str) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let mut entries = Vec::new();
        for path in &self.files {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let name = path
                .strip_prefix(&self.dir)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            let hash: String = Sha256::digest(&bytes)
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            entries.push(json!({ "path": name, "bytes": bytes.len(), "sha256": hash }));
        }
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "files": entries,
        });
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}
