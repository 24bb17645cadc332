//! Command-line front end.
//!
//! Every subcommand reads a flat `key = value` config file plus flag
//! overrides; flags win over the file, the file wins over built-in defaults.
//! The option tables below are the single source of truth: clap's help text
//! and config-file validation are both generated from them. Unknown keys are
//! rejected before any work starts.

mod commands;

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
    pub default: Option<&'static str>,
    pub required: bool,
}

const fn req(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        help,
        default: None,
        required: true,
    }
}

const fn opt(name: &'static str, help: &'static str, default: &'static str) -> KeySpec {
    KeySpec {
        name,
        help,
        default: Some(default),
        required: false,
    }
}

const fn optional(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        help,
        default: None,
        required: false,
    }
}

pub const TRAIN_KEYS: &[KeySpec] = &[
    req("dataset_dir", "directory of PNG/PPM training images"),
    req("out_dir", "output directory for the model, log and checkpoints"),
    opt("iters", "training iterations", "20000"),
    opt("batch_size", "crops per step", "8"),
    opt("crop", "square crop size", "256"),
    opt("lr", "initial learning rate", "0.0001"),
    opt("lr_final", "learning rate for the final fraction of the run", "0.00001"),
    opt("lr_drop_frac", "fraction of the run trained at lr_final", "0.05"),
    opt("seed", "seed for weights, sampling and noise", "0"),
    opt("checkpoint_interval", "iterations between checkpoints (0 disables)", "5000"),
    opt("calibrate_frac", "fraction of the budget before shallow-channel calibration", "0.1"),
    opt("n", "filter count of the transforms", "192"),
    opt("stages", "stride-2 stage count", "4"),
    opt("k", "transmitted shallow channels", "32"),
    opt("metric", "distortion metric: mse or msssim", "mse"),
    optional("lambda_min", "lower tradeoff bound (metric default when omitted)"),
    optional("lambda_max", "upper tradeoff bound (metric default when omitted)"),
    optional("resume", "existing model archive to continue training from"),
];

pub const CALIBRATE_KEYS: &[KeySpec] = &[
    req("model", "model archive to calibrate"),
    req("dataset_dir", "directory of calibration images"),
    req("out", "path for the calibrated model archive"),
    opt("limit", "maximum calibration images", "64"),
];

pub const COMPRESS_KEYS: &[KeySpec] = &[
    req("model", "model archive"),
    req("lambda", "rate-distortion tradeoff for this image"),
    req("in", "input image (PNG or binary PPM)"),
    req("out", "output compressed stream"),
];

pub const DECOMPRESS_KEYS: &[KeySpec] = &[
    req("model", "model archive"),
    req("in", "compressed stream"),
    req("out", "output PNG"),
];

pub const EVAL_KEYS: &[KeySpec] = &[
    req("model", "model archive"),
    req("dataset_dir", "directory of evaluation images"),
    req("out_dir", "output directory for CSVs and plots"),
    opt(
        "lambdas",
        "comma-separated tradeoff grid",
        "0.0016,0.003,0.0075,0.015,0.045",
    ),
    opt("quality_metric", "curve quality axis: psnr or msssim_db", "psnr"),
];

pub const BDRATE_KEYS: &[KeySpec] = &[
    req("anchor", "anchor curve CSV (label,bpp,quality)"),
    req("test", "test curve CSV (label,bpp,quality)"),
];

pub const DUMP_MAPS_KEYS: &[KeySpec] = &[
    req("model", "model archive"),
    req("in", "input image"),
    req("lambda", "rate-distortion tradeoff"),
    req("out_dir", "output directory for heatmaps and sidecars"),
];

pub const ABLATE_KEYS: &[KeySpec] = &[
    req("dataset_dir", "training images"),
    req("test_dir", "evaluation images"),
    req("out_dir", "output directory for the report"),
    opt("iters", "training iterations per scheme", "2000"),
    opt("batch_size", "crops per step", "4"),
    opt("crop", "square crop size", "64"),
    opt("lr", "initial learning rate", "0.001"),
    opt("seed", "shared seed for every scheme", "0"),
    opt("n", "filter count", "32"),
    opt("stages", "stride-2 stage count", "4"),
    opt("k", "transmitted shallow channels", "8"),
    opt(
        "lambdas",
        "comma-separated tradeoff grid (at least 4 values)",
        "0.0016,0.003,0.0075,0.015,0.045",
    ),
];

pub const SUBCOMMANDS: &[(&str, &str, &[KeySpec])] = &[
    ("train", "train a model on an image corpus", TRAIN_KEYS),
    ("calibrate", "measure and freeze the shallow-channel selection", CALIBRATE_KEYS),
    ("compress", "compress one image at a chosen tradeoff", COMPRESS_KEYS),
    ("decompress", "decode a compressed stream to PNG", DECOMPRESS_KEYS),
    ("eval", "sweep the tradeoff grid and emit rate-quality data", EVAL_KEYS),
    ("bdrate", "rate and quality deltas between two curve CSVs", BDRATE_KEYS),
    ("dump-maps", "emit scale-factor and bit-allocation heatmaps", DUMP_MAPS_KEYS),
    ("ablate", "train scheme variants A/B/C and report deltas", ABLATE_KEYS),
];

fn build_command() -> clap::Command {
    let mut root = clap::Command::new("sgvc")
        .about("variable-rate learned image codec")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, keys) in SUBCOMMANDS {
        let mut sub = clap::Command::new(*name).about(*about).arg(
            clap::Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value config file; flags override it"),
        );
        for k in *keys {
            let mut arg = clap::Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(k.help);
            if let Some(d) = k.default {
                arg = arg.help_heading("Options").help(format!("{} [default: {}]", k.help, d));
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Merged view of defaults, config file and flags.
pub struct Settings {
    values: HashMap<String, String>,
}

impl Settings {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required option '{key}'")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("option '{key}' has invalid value '{raw}'")))
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("option '{key}' has invalid value '{raw}'"))),
        }
    }

    pub fn parse_lambda_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad tradeoff value '{s}' in '{key}'")))
            })
            .collect()
    }
}

fn parse_config_file(path: &Path, keys: &[KeySpec]) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let stripped = line.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (k, v) = stripped.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "config line {} is not 'key = value': '{line}'",
                lineno + 1
            ))
        })?;
        let k = k.trim();
        let v = v.trim();
        if !keys.iter().any(|spec| spec.name == k) {
            return Err(Error::config(format!(
                "unknown config key '{k}' (line {})",
                lineno + 1
            )));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn collect_settings(matches: &clap::ArgMatches, keys: &[KeySpec]) -> Result<Settings> {
    let mut values: HashMap<String, String> = HashMap::new();
    for k in keys {
        if let Some(d) = k.default {
            values.insert(k.name.to_string(), d.to_string());
        }
    }
    if let Some(cfg) = matches.get_one::<String>("config") {
        for (k, v) in parse_config_file(Path::new(cfg), keys)? {
            values.insert(k, v);
        }
    }
    for k in keys {
        if let Some(v) = matches.get_one::<String>(k.name) {
            values.insert(k.name.to_string(), v.clone());
        }
    }
    for k in keys {
        if k.required && !values.contains_key(k.name) {
            return Err(Error::config(format!(
                "missing required option '{}' (flag --{} or config key)",
                k.name, k.name
            )));
        }
    }
    Ok(Settings { values })
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Entry point; returns the process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cmd = build_command();
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let keys = SUBCOMMANDS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, _, k)| *k)
        .expect("known subcommand");
    let settings = match collect_settings(sub, keys) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = match name {
        "train" => commands::train(&settings),
        "calibrate" => commands::calibrate(&settings),
        "compress" => commands::compress(&settings),
        "decompress" => commands::decompress(&settings),
        "eval" => commands::eval(&settings),
        "bdrate" => commands::bdrate(&settings),
        "dump-maps" => commands::dump_maps(&settings),
        "ablate" => commands::ablate(&settings),
        _ => unreachable!(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
