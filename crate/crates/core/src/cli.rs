//! The `xrid` command line: subcommand dispatch, `key=value` config
//! resolution (flags over config file over defaults) and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::encoding::{encode, write_feature_csv, EncodingKind, FeatureSequence};
use crate::error::{Error, Result};
use crate::identify::{eval_grid, identify_segment, GridConfig};
use crate::motion::{
    dataset_files, load_recording, load_recording_with_report, resample, save_recording, travel_stats, trim,
    ColumnMap, Recording,
};
use crate::nn::gradcheck::{standard_suite, TOLERANCE};
use crate::nn::{
    checkpoint_dtype, random_search, train_with_history, Architecture, Checkpoint, ModelConfig, Real, SearchSpace,
    TrainConfig,
};
use crate::sampling::{split_sessions, Span, SplitSpec, WindowSpec};
use crate::synth::{write_dataset, DatasetSpec};

struct Opt {
    key: &'static str,
    default: &'static str,
    help: &'static str,
}

const fn opt(key: &'static str, default: &'static str, help: &'static str) -> Opt {
    Opt { key, default, help }
}

/// Options that take no value.
const SWITCHES: [&str; 1] = ["verify"];

const COMMON: &[Opt] = &[
    opt("config", "", "key=value file with option values"),
    opt("out", "out", "output directory"),
    opt("seed", "0", "base random seed"),
    opt("jobs", "0", "worker threads (0 = all cores)"),
    opt("verify", "false", "64-bit verification mode"),
];

const DATA: &[Opt] = &[
    opt("data", "", "dataset directory of <user>_<session>.csv files"),
    opt("columns", "", "column-map file (canonical=source lines)"),
    opt("rate", "15", "expected frame rate in Hz"),
];

const MODEL: &[Opt] = &[
    opt("encoding", "bra", "br, brv or bra"),
    opt("arch", "cnn", "cnn or gru"),
    opt("hidden", "", "GRU hidden units (default: tuned)"),
    opt("layers", "", "GRU layers (default: tuned)"),
    opt("kernel", "", "CNN kernel size (default: tuned)"),
    opt("channels", "", "CNN channels, e.g. 32/64 (default: tuned)"),
    opt("dropout", "", "dropout rate (default: tuned)"),
    opt("lr", "", "learning rate (default: tuned)"),
    opt("layer-norm", "false", "per-layer normalization"),
];

const TRAIN: &[Opt] = &[
    opt("window", "300", "window length in frames"),
    opt("train-stride", "15", "training window stride"),
    opt("val-stride", "15", "validation window stride"),
    opt("val-tail", "5", "minutes at the end of session 1 used for validation"),
    opt("epochs-min", "30", "minimum epochs"),
    opt("max-epochs", "200", "maximum epochs"),
    opt("patience", "10", "early-stopping patience in epochs"),
    opt("min-delta", "0.001", "smallest improvement that counts"),
    opt("batch", "256", "batch size"),
    opt("normalize", "true", "standardize features with training statistics"),
];

const SYNTH: &[Opt] = &[
    opt("users", "10", "number of synthetic users"),
    opt("sessions", "2", "sessions per user"),
    opt("duration", "6", "minutes per session"),
    opt("rate", "15", "frame rate in Hz"),
];

const INGEST: &[Opt] = &[
    opt("data", "", "directory of raw recordings"),
    opt("columns", "", "column-map file"),
    opt("rate", "15", "target frame rate in Hz"),
    opt("head-trim", "60", "seconds removed at the start"),
    opt("tail-trim", "60", "seconds removed at the end"),
];

const ENCODE: &[Opt] = &[opt("encoding", "bra", "br, brv or bra")];
const TRAIN_ONLY: &[Opt] = &[opt("t-enr", "all", "enrollment minutes or all")];
const IDENTIFY: &[Opt] = &[
    opt("checkpoint", "", "trained checkpoint"),
    opt("input", "", "recording to identify"),
    opt("columns", "", "column-map file"),
    opt("start", "0", "segment start in minutes"),
    opt("duration", "all", "segment length in minutes or all"),
    opt("stride", "1", "window stride"),
];
const EVALUATE: &[Opt] = &[
    opt("t-enr", "1,5,10,15,20,25,all", "enrollment lengths"),
    opt("t-use", "1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19,20,21,22,23,24,25,all", "use-time lengths"),
    opt("repeats", "5", "retrainings per enrollment length"),
    opt("eval-stride", "1", "identification window stride"),
];
const SEARCH: &[Opt] = &[opt("budget", "10", "number of sampled configurations")];

pub const COMMANDS: &[(&str, &str)] = &[
    ("synth", "generate a synthetic dataset"),
    ("ingest", "validate, resample and trim recordings"),
    ("stats", "horizontal travel statistics per recording"),
    ("encode", "write feature encodings"),
    ("train", "train a classifier"),
    ("identify", "identify the user of one recording segment"),
    ("evaluate", "enrollment-time by use-time accuracy grid"),
    ("search", "random hyperparameter search"),
    ("gradcheck", "finite-difference gradient verification"),
];

fn options(command: &str) -> Vec<&'static Opt> {
    let groups: Vec<&[Opt]> = match command {
        "synth" => vec![SYNTH],
        "ingest" => vec![INGEST],
        "stats" => vec![DATA],
        "encode" => vec![DATA, ENCODE],
        "train" => vec![DATA, MODEL, TRAIN, TRAIN_ONLY],
        "identify" => vec![IDENTIFY],
        "evaluate" => vec![DATA, MODEL, TRAIN, EVALUATE],
        "search" => vec![DATA, MODEL, TRAIN, SEARCH],
        _ => vec![],
    };
    let mut out: Vec<&'static Opt> = COMMON.iter().collect();
    for g in groups {
        for o in g {
            if !out.iter().any(|p| p.key == o.key) {
                out.push(o);
            }
        }
    }
    out
}

pub fn usage(command: Option<&str>) -> String {
    let mut s = String::from("usage: xrid <command> [--option value ...]\n\ncommands:\n");
    for (c, h) in COMMANDS {
        let _ = writeln!(s, "  {c:<10} {h}");
    }
    if let Some(c) = command.filter(|c| COMMANDS.iter().any(|(n, _)| n == c)) {
        let _ = writeln!(s, "\noptions for {c}:");
        for o in options(c) {
            let d = if o.default.is_empty() { String::new() } else { format!(" [{}]", o.default) };
            let _ = writeln!(s, "  --{:<13} {}{d}", o.key, o.help);
        }
    }
    s
}

/// Fully resolved options of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    /// Resolve `args` (without the program name): flags override values
    /// from `--config`, which override defaults.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let Some(command) = args.first() else {
            return Err(Error::Usage("missing command".into()));
        };
        if !COMMANDS.iter().any(|(c, _)| c == command) {
            let names: Vec<&str> = COMMANDS.iter().map(|(c, _)| *c).collect();
            return Err(Error::Usage(format!("unknown command `{command}`; valid commands: {}", names.join(", "))));
        }
        let opts = options(command);
        let known = |k: &str| opts.iter().any(|o| o.key == k);
        let valid = || opts.iter().map(|o| format!("--{}", o.key)).collect::<Vec<_>>().join(", ");

        let mut flags = BTreeMap::new();
        let mut i = 1;
        while i < args.len() {
            let a = &args[i];
            let Some(body) = a.strip_prefix("--") else {
                return Err(Error::Usage(format!("unexpected argument `{a}`; valid options: {}", valid())));
            };
            let name = body.split_once('=').map_or(body, |(k, _)| k);
            if !known(name) {
                return Err(Error::Usage(format!("unknown option --{name} for `{command}`; valid options: {}", valid())));
            }
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None if SWITCHES.contains(&body) => {
                    let explicit = args.get(i + 1).filter(|v| *v == "true" || *v == "false");
                    if explicit.is_some() {
                        i += 1;
                    }
                    (body.to_string(), explicit.cloned().unwrap_or_else(|| "true".into()))
                }
                None => {
                    let v = args
                        .get(i + 1)
                        .ok_or_else(|| Error::Usage(format!("option --{body} needs a value")))?;
                    i += 1;
                    (body.to_string(), v.clone())
                }
            };
            flags.insert(key, value);
            i += 1;
        }

        let mut values: BTreeMap<String, String> =
            opts.iter().map(|o| (o.key.to_string(), o.default.to_string())).collect();
        if let Some(path) = flags.get("config").filter(|p| !p.is_empty()) {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {path}: {e}")))?;
            for (k, v) in parse_config_file(&text)? {
                if k == "command" {
                    continue;
                }
                if !known(&k) {
                    if COMMANDS.iter().any(|(c, _)| options(c).iter().any(|o| o.key == k)) {
                        continue;
                    }
                    return Err(Error::Config(format!("unknown key `{k}` in {path}")));
                }
                values.insert(k, v);
            }
        }
        values.extend(flags);
        Ok(RunConfig { command: command.clone(), values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("--{key}: cannot parse `{v}`")))
    }

    fn opt_get<V: std::str::FromStr>(&self, key: &str) -> Result<Option<V>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn required(&self, key: &str) -> Result<&str> {
        match self.raw(key) {
            "" => Err(Error::Usage(format!("`{}` needs --{key}", self.command))),
            v => Ok(v),
        }
    }

    /// The resolved configuration as `key=value` lines.
    pub fn dump(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn verify(&self) -> Result<bool> {
        self.get("verify")
    }

    pub fn column_map(&self) -> Result<ColumnMap> {
        match self.raw("columns") {
            "" => Ok(ColumnMap::default()),
            p => ColumnMap::from_file(p),
        }
    }

    pub fn encoding(&self) -> Result<EncodingKind> {
        self.raw("encoding").parse()
    }

    pub fn window(&self) -> Result<WindowSpec> {
        let spec = WindowSpec { length_frames: self.get("window")?, stride_frames: 1, rate_hz: self.get("rate")? };
        spec.validate()?;
        Ok(spec)
    }

    /// Tuned configuration for the architecture and encoding, with any
    /// explicitly given hyperparameter overriding it.
    pub fn model_config(&self, classes: usize) -> Result<ModelConfig> {
        let arch: Architecture = self.raw("arch").parse()?;
        let mut c = ModelConfig::tuned(arch, self.encoding()?, classes)?;
        if let Some(v) = self.opt_get("hidden")? {
            c.hidden_size = v;
        }
        if let Some(v) = self.opt_get("layers")? {
            c.num_layers = v;
        }
        if let Some(v) = self.opt_get("kernel")? {
            c.kernel_size = v;
        }
        if !self.raw("channels").is_empty() {
            c.channels = self
                .raw("channels")
                .split(['/', ',', ';'])
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("--channels: bad value `{s}`"))))
                .collect::<Result<_>>()?;
            if arch == Architecture::Cnn {
                c.num_layers = c.channels.len();
            }
        }
        if let Some(v) = self.opt_get("dropout")? {
            c.dropout = v;
        }
        if let Some(v) = self.opt_get("lr")? {
            c.learning_rate = v;
        }
        c.layer_norm = self.get("layer-norm")?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            epochs_min: self.get("epochs-min")?,
            max_epochs: self.get("max-epochs")?,
            patience: self.get("patience")?,
            min_delta: self.get("min-delta")?,
            batch_size: self.get("batch")?,
            window: self.window()?,
            train_stride: self.get("train-stride")?,
            val_stride: self.get("val-stride")?,
            normalize: self.get("normalize")?,
            seed: self.get("seed")?,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec {
            validation_tail_min: self.get("val-tail")?,
            enrollment: self.opt_get("t-enr")?.unwrap_or(Span::All),
            enrollment_seed: self.get("seed")?,
        })
    }
}

fn span_list(s: &str) -> Result<Vec<Span>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `manifest.txt`: the resolved config plus a hash of every artifact.
pub fn write_manifest(cfg: &RunConfig, artifacts: &[PathBuf]) -> Result<PathBuf> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut s = format!("xrid {}\n[config]\n", env!("CARGO_PKG_VERSION"));
    s.push_str(&cfg.dump());
    s.push_str("[artifacts]\n");
    let mut sorted = artifacts.to_vec();
    sorted.sort();
    for p in &sorted {
        let name = p.strip_prefix(&out).unwrap_or(p);
        let _ = writeln!(s, "{}  {}", sha256_hex(p)?, name.display());
    }
    let path = out.join("manifest.txt");
    std::fs::write(&path, s)?;
    Ok(path)
}

fn load_dir(cfg: &RunConfig) -> Result<Vec<Recording>> {
    let dir = cfg.required("data")?;
    let columns = cfg.column_map()?;
    let files = dataset_files(dir)?;
    if files.is_empty() {
        return Err(Error::Parameter(format!("no .csv recordings in {dir}")));
    }
    files.par_iter().map(|p| load_recording(p, &columns)).collect()
}

/// Load and encode a preprocessed dataset, checking its frame rate.
pub fn load_features(cfg: &RunConfig) -> Result<Vec<FeatureSequence>> {
    let rate: f64 = cfg.get("rate")?;
    let kind = cfg.encoding()?;
    load_dir(cfg)?
        .par_iter()
        .map(|r| {
            if (r.nominal_rate() - rate).abs() > 0.01 * rate {
                return Err(Error::Parameter(format!(
                    "recording {}_{} runs at {:.3} Hz, expected {rate} Hz; run `ingest` first",
                    r.user_id(),
                    r.session_id(),
                    r.nominal_rate()
                )));
            }
            encode(r, kind)
        })
        .collect()
}

fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let spec = DatasetSpec {
        users: cfg.get("users")?,
        sessions: cfg.get("sessions")?,
        duration_min: cfg.get("duration")?,
        rate_hz: cfg.get("rate")?,
        seed: cfg.get("seed")?,
    };
    let paths = write_dataset(&spec, cfg.out_dir())?;
    println!("wrote {} recordings to {}", paths.len(), cfg.out_dir().display());
    Ok(paths)
}

fn cmd_ingest(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.required("data")?;
    let columns = cfg.column_map()?;
    let (rate, head, tail): (f64, f64, f64) = (cfg.get("rate")?, cfg.get("head-trim")?, cfg.get("tail-trim")?);
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut paths = Vec::new();
    for file in dataset_files(dir)? {
        let (rec, report) = load_recording_with_report(&file, &columns)?;
        let rec = trim(&resample(&rec, rate)?, head, tail)?;
        let path = out.join(file.file_name().expect("file name"));
        save_recording(&rec, &path)?;
        println!(
            "{}: rows={} rejected={} duplicates={} frames={}",
            file.display(),
            report.rows,
            report.rejected_rows,
            report.duplicate_timestamps,
            rec.len()
        );
        paths.push(path);
    }
    Ok(paths)
}

fn cmd_stats(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut rows: Vec<(String, u8, crate::motion::TravelStats)> =
        load_dir(cfg)?.iter().map(|r| (r.user_id().to_string(), r.session_id(), travel_stats(r))).collect();
    rows.sort_by(|a, b| b.2.meters_per_minute.total_cmp(&a.2.meters_per_minute).then(a.0.cmp(&b.0)));
    let mut csv = String::from("user,session,duration_min,total_m,m_per_min\n");
    for (u, s, t) in &rows {
        let _ = writeln!(csv, "{u},{s},{},{},{}", t.duration_min, t.total_horizontal_path_m, t.meters_per_minute);
        println!("{u:>10} s{s} {:>8.2} m/min {:>9.1} m", t.meters_per_minute, t.total_horizontal_path_m);
    }
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let path = out.join("travel_stats.csv");
    std::fs::write(&path, csv)?;
    Ok(vec![path])
}

fn cmd_encode(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut paths = Vec::new();
    for seq in load_features(cfg)? {
        let path = out.join(format!("{}_{}_{}.csv", seq.user_id, seq.session_id, seq.kind));
        write_feature_csv(&seq, &path)?;
        paths.push(path);
    }
    println!("wrote {} encoded sequences to {}", paths.len(), out.display());
    Ok(paths)
}

fn write_history(path: &Path, history: &[crate::nn::train::EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,val_min_accuracy,val_macro_accuracy\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{},{}", h.epoch, h.train_loss, h.val_loss, h.val_min_accuracy, h.val_macro_accuracy);
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn cmd_train<T: Real>(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_features(cfg)?;
    let spec = cfg.split_spec()?;
    let splits = split_sessions(&data, &spec)?;
    let model = cfg.model_config(splits.users.len())?;
    let tc = cfg.train_config()?;
    let outcome = train_with_history::<T>(&model, &tc, &splits)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join("model.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    let split = out.join("splits.csv");
    splits.write_manifest(&spec, &split)?;
    let history = out.join("history.csv");
    write_history(&history, &outcome.history)?;
    println!(
        "best epoch {} of {}: validation minimum accuracy {:.4}",
        outcome.checkpoint.meta.epoch, outcome.checkpoint.meta.epochs_run, outcome.checkpoint.meta.val_min_accuracy
    );
    Ok(vec![ckpt, split, history])
}

fn cmd_identify<T: Real>(cfg: &RunConfig, ckpt: Checkpoint<T>) -> Result<Vec<PathBuf>> {
    let rec = load_recording(cfg.required("input")?, &cfg.column_map()?)?;
    let rate = ckpt.meta.rate_hz;
    if (rec.nominal_rate() - rate).abs() > 0.01 * rate {
        return Err(Error::Parameter(format!(
            "recording runs at {:.3} Hz, the model expects {rate} Hz; run `ingest` first",
            rec.nominal_rate()
        )));
    }
    let seq = encode(&rec, ckpt.model.config.encoding)?;
    let start = (cfg.get::<f64>("start")? * 60.0 * rate).round() as usize;
    let len = match cfg.get::<Span>("duration")?.frames(rate) {
        Some(n) => n,
        None => seq.len().saturating_sub(start),
    };
    if start + len > seq.len() {
        return Err(Error::TooShort { needed: start + len, available: seq.len() });
    }
    let segment = seq.slice(start..start + len);
    let spec = WindowSpec { length_frames: ckpt.meta.window_frames, stride_frames: cfg.get("stride")?, rate_hz: rate };
    spec.validate()?;
    let v = identify_segment(&ckpt, &segment, &spec)?;
    let user = ckpt.meta.users.get(v.predicted).cloned().unwrap_or_else(|| v.predicted.to_string());
    let line = format!(
        "predicted={user} label={} votes={} windows={} cumulative_prob={:.6}\n",
        v.predicted, v.vote_counts[v.predicted], v.window_count, v.cumulative_prob[v.predicted]
    );
    print!("{line}");
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let path = out.join("identify.txt");
    std::fs::write(&path, line)?;
    Ok(vec![path])
}

fn cmd_evaluate<T: Real>(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_features(cfg)?;
    let users = split_sessions(&data, &SplitSpec { validation_tail_min: cfg.get("val-tail")?, ..Default::default() })?
        .users
        .len();
    let grid = GridConfig {
        t_enr: span_list(cfg.raw("t-enr"))?,
        t_use: span_list(cfg.raw("t-use"))?,
        repeats: cfg.get("repeats")?,
        seed: cfg.get("seed")?,
        validation_tail_min: cfg.get("val-tail")?,
        eval_window: cfg.window()?.with_stride(cfg.get("eval-stride")?),
    };
    let report = eval_grid::<T>(&data, &cfg.model_config(users)?, &cfg.train_config()?, &grid)?;
    let out = cfg.out_dir();
    report.write(&out)?;
    print!("{}", report.summary_table());
    Ok(["grid.csv", "per_class.csv", "summary.txt"].iter().map(|f| out.join(f)).collect())
}

fn cmd_search<T: Real>(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_features(cfg)?;
    let spec = cfg.split_spec()?;
    let splits = split_sessions(&data, &spec)?;
    let base = cfg.model_config(splits.users.len())?;
    let tc = cfg.train_config()?;
    let outcome = random_search(
        &SearchSpace::default(),
        base.architecture,
        base.encoding,
        base.class_count,
        cfg.get("budget")?,
        tc.seed,
        |c, _| Ok(train_with_history::<T>(c, &tc, &splits)?.checkpoint.meta.val_min_accuracy),
    )?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let path = out.join("search.csv");
    std::fs::write(&path, outcome.to_csv())?;
    let best = outcome.best_run();
    println!("best run {} with validation minimum accuracy {:.4}: {:?}", best.index, best.score, best.config);
    Ok(vec![path])
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let reports = standard_suite(cfg.get("seed")?)?;
    let mut s = String::from("model,probed,max_relative_error,worst_parameter\n");
    for r in &reports {
        println!("{:<10} probed={:<5} max_relative_error={:.3e} worst={}", r.name, r.probed, r.max_relative_error, r.worst_parameter);
        let _ = writeln!(s, "{},{},{},{}", r.name, r.probed, r.max_relative_error, r.worst_parameter);
    }
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let path = out.join("gradcheck.csv");
    std::fs::write(&path, s)?;
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    if worst >= TOLERANCE {
        return Err(Error::Verification(format!("max relative gradient error {worst:.3e} >= {TOLERANCE:e}")));
    }
    Ok(vec![path])
}

fn run_config(cfg: &RunConfig) -> Result<()> {
    let jobs: usize = cfg.get("jobs")?;
    if jobs > 0 {
        // The global pool can be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let verify = cfg.verify()?;
    let artifacts = match cfg.command.as_str() {
        "synth" => cmd_synth(cfg)?,
        "ingest" => cmd_ingest(cfg)?,
        "stats" => cmd_stats(cfg)?,
        "encode" => cmd_encode(cfg)?,
        "train" if verify => cmd_train::<f64>(cfg)?,
        "train" => cmd_train::<f32>(cfg)?,
        "identify" => {
            let path = cfg.required("checkpoint")?;
            if checkpoint_dtype(path)? == "f64" {
                cmd_identify(cfg, Checkpoint::<f64>::load(path)?)?
            } else {
                cmd_identify(cfg, Checkpoint::<f32>::load(path)?)?
            }
        }
        "evaluate" if verify => cmd_evaluate::<f64>(cfg)?,
        "evaluate" => cmd_evaluate::<f32>(cfg)?,
        "search" if verify => cmd_search::<f64>(cfg)?,
        "search" => cmd_search::<f32>(cfg)?,
        "gradcheck" => cmd_gradcheck(cfg)?,
        other => return Err(Error::Usage(format!("unknown command `{other}`"))),
    };
    write_manifest(cfg, &artifacts)?;
    Ok(())
}

pub fn dispatch(args: &[String]) -> Result<()> {
    run_config(&RunConfig::from_args(args)?)
}

/// One line, `error kind=<kind> message="<text>"`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ").replace('"', "'");
    format!("error kind={} message=\"{msg}\"", e.kind())
}

/// Run the command line and return the process exit status.
pub fn run(args: &[String]) -> i32 {
    if args.is_empty() || matches!(args[0].as_str(), "-h" | "--help" | "help") {
        eprint!("{}", usage(args.get(1).map(String::as_str)));
        return 2;
    }
    if args[1..].iter().any(|a| matches!(a.as_str(), "-h" | "--help")) {
        print!("{}", usage(Some(&args[0])));
        return 0;
    }
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            let mut err = std::io::stderr().lock();
            let _ = writeln!(err, "{}", error_line(&e));
            if let Error::Usage(_) = e {
                let _ = write!(err, "{}", usage(Some(&args[0])));
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn defaults_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\nseed=5\nbatch=64\nusers=3\n").unwrap();
        let cfg = RunConfig::from_args(&args(&format!("train --config {} --batch 32", file.display()))).unwrap();
        assert_eq!(cfg.raw("seed"), "5");
        assert_eq!(cfg.raw("batch"), "32");
        assert_eq!(cfg.raw("patience"), "10");
        assert_eq!(cfg.raw("users"), "");
        assert!(cfg.dump().starts_with("command=train\n"));
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let e = RunConfig::from_args(&args("train --bogus 1")).unwrap_err();
        assert_eq!(e.kind(), "usage");
        assert!(e.to_string().contains("--patience"));
        assert_eq!(RunConfig::from_args(&args("frobnicate")).unwrap_err().kind(), "usage");
    }

    #[test]
    fn switches_and_equals_syntax() {
        let cfg = RunConfig::from_args(&args("gradcheck --verify --seed=4")).unwrap();
        assert!(cfg.verify().unwrap());
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 4);
    }

    #[test]
    fn model_overrides_apply_on_top_of_tuned() {
        let cfg = RunConfig::from_args(&args("train --channels 32/64 --kernel 3 --dropout 0.2")).unwrap();
        let m = cfg.model_config(10).unwrap();
        assert_eq!(m.channels, vec![32, 64]);
        assert_eq!(m.dropout, 0.2);
        assert_eq!(m.learning_rate, 0.002);
    }

    #[test]
    fn error_line_is_single_line() {
        let l = error_line(&Error::Parameter("a\nb \"c\"".into()));
        assert!(!l.contains('\n'));
        assert!(l.starts_with("error kind=parameter "));
    }

    #[test]
    fn no_arguments_prints_usage() {
        assert_eq!(run(&[]), 2);
    }
}
