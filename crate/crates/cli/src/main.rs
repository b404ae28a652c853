// SPDX-License-Identifier: Apache-2.0

//! `pipecnn`: run, validate, profile and size the accelerator emulator.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use pipecnn_core::lrn::{lrn_build_table, DEFAULT_X_MAX, DEFAULT_X_MIN};
use pipecnn_core::netio::{load_tensor, load_weights, random_inputs, random_weights, resolve_network, save_tensor, NetworkFile, Tensor};
use pipecnn_core::perf::{estimate_network, sweep, sweep_csv, sweep_text};
use pipecnn_core::runtime::profile::RunProfile;
use pipecnn_core::validate::validate_run;
use pipecnn_core::{execute_network, AcceleratorConfig, DeviceProfile, Error, FeatureMap, LayerWeights, LrnSpec, RuntimeOptions};

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "pipecnn", version, about = "Pipelined CNN accelerator emulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Bundled network name (alexnet, vgg16) or a network file.
    #[arg(long, global = true, default_value = "alexnet")]
    net: String,
    /// Device profile: stratixv_a7 (alias de5net) or unlimited.
    #[arg(long, global = true, default_value = "stratixv_a7")]
    device: String,
    /// Vector width (1, 2, 4, 8, 16); overrides the network file.
    #[arg(long, global = true)]
    vec: Option<usize>,
    /// Number of compute units; overrides the network file.
    #[arg(long, global = true)]
    cu: Option<usize>,
    /// Images per run, and the batch the performance model assumes.
    #[arg(long, global = true, default_value_t = 16)]
    batch: usize,
    /// Seed for random weights and inputs.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// FIFO capacity of every inter-kernel channel.
    #[arg(long = "channel-depth", global = true)]
    channel_depth: Option<usize>,
    /// LRN table resolution: 2^n segments per octave.
    #[arg(long = "lrn-n", global = true)]
    lrn_n: Option<u32>,
    /// Output file; stdout when omitted (run requires it for the tensor).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    /// Directory with layer{i}_w.pcnt / layer{i}_b.pcnt tensors.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Zero every bias of the random initialization.
    #[arg(long = "zero-bias", global = true)]
    zero_bias: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute the network and write the output tensor.
    Run {
        /// Input tensor ([H, W, C] or [N, H, W, C]); seeded random when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Check every layer against the brute-force references.
    Validate,
    /// Execute the network and write the kernel timeline.
    Profile,
    /// Rank (vec, cu) design points.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        vecs: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        cus: Vec<usize>,
    },
    /// Build and dump the LRN piecewise-linear table.
    LrnTable {
        #[arg(long, default_value_t = DEFAULT_X_MIN)]
        x_min: f32,
        #[arg(long, default_value_t = DEFAULT_X_MAX)]
        x_max: f32,
        #[arg(long, default_value_t = 2.0)]
        k: f32,
        #[arg(long, default_value_t = 1e-4)]
        alpha: f32,
        #[arg(long, default_value_t = 0.75)]
        beta: f32,
        /// Points used to measure the maximum relative error.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

enum Failure {
    Validation(String),
    Usage(String),
    Io(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_)
            | Error::Parse { .. }
            | Error::BadMagic
            | Error::ShortRead { .. }
            | Error::DimMismatch(_)
            | Error::UnsupportedKind(_) => Failure::Io(msg),
            Error::Validation(_)
            | Error::InvalidConfig(_)
            | Error::InvalidDevice(_)
            | Error::InvalidLayer(_)
            | Error::InvalidRange(_)
            | Error::ShapeMismatch { .. }
            | Error::LayerOutputDim { .. }
            | Error::NonIntegralOutputDim { .. }
            | Error::NoFeasiblePoint => Failure::Usage(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config(cli: &Cli, net: &NetworkFile) -> CliResult<AcceleratorConfig> {
    let mut cfg = net.config();
    if let Some(v) = cli.vec {
        cfg.vec_size = v;
    }
    if let Some(c) = cli.cu {
        cfg.cu_num = c;
    }
    if let Some(d) = cli.channel_depth {
        cfg.channel_depth = d;
    }
    if let Some(n) = cli.lrn_n {
        cfg.lrn_n = n;
    }
    cfg.check()?;
    Ok(cfg)
}

fn device(cli: &Cli) -> CliResult<DeviceProfile> {
    DeviceProfile::by_name(&cli.device).ok_or_else(|| Failure::Usage(format!("unknown device {:?}", cli.device)))
}

fn options(cli: &Cli) -> CliResult<RuntimeOptions> {
    let mut opts = RuntimeOptions::from_env()?;
    opts.device = device(cli)?;
    Ok(opts)
}

fn network_weights(cli: &Cli, net: &NetworkFile, cfg: &AcceleratorConfig) -> CliResult<Vec<LayerWeights>> {
    match &cli.weights {
        Some(dir) => Ok(load_weights(dir, &net.layers, cfg.vec_size)?),
        None => {
            let bias = if cli.zero_bias { 0.0 } else { 0.01 };
            Ok(random_weights(&net.layers, cli.seed, cfg.vec_size, bias))
        }
    }
}

fn emit(cli: &Cli, text: &str) -> CliResult<()> {
    match &cli.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_inputs(path: &Path, net: &NetworkFile, cfg: &AcceleratorConfig) -> CliResult<Vec<FeatureMap>> {
    let t = load_tensor(path)?;
    let shape = net.layers[0].input_shape;
    let per = [shape.height, shape.width, shape.channels];
    let images = match t.dims.len() {
        3 => 1,
        4 => t.dims[0],
        _ => 0,
    };
    if images == 0 || t.dims[t.dims.len() - 3..] != per {
        return Err(Failure::Io(format!(
            "input tensor {:?} does not match network input [H, W, C] = {per:?}",
            t.dims
        )));
    }
    let n = shape.len();
    (0..images)
        .map(|i| Ok(Tensor::new(per.to_vec(), t.data[i * n..(i + 1) * n].to_vec())?.to_feature_map(cfg.vec_size)?))
        .collect()
}

fn execute(cli: &Cli, input: Option<&Path>) -> CliResult<(NetworkFile, AcceleratorConfig, Vec<FeatureMap>, RunProfile)> {
    let net = resolve_network(&cli.net)?;
    let cfg = config(cli, &net)?;
    let opts = options(cli)?;
    let weights = network_weights(cli, &net, &cfg)?;
    let inputs = match input {
        Some(p) => read_inputs(p, &net, &cfg)?,
        None => {
            if cli.batch == 0 {
                return Err(Failure::Usage("--batch must be at least 1".into()));
            }
            random_inputs(net.layers[0].input_shape, cli.seed, cli.batch, cfg.vec_size)
        }
    };
    let start = Instant::now();
    let (outputs, profile) = execute_network(&net.layers, &weights, &inputs, &cfg, &opts)?;
    eprintln!(
        "{}: {} image(s) in {:.2} s wall ({} worker(s))",
        net.name,
        inputs.len(),
        start.elapsed().as_secs_f64(),
        opts.threads
    );
    Ok((net, cfg, outputs, profile))
}

fn cmd_run(cli: &Cli, input: Option<&Path>) -> CliResult<()> {
    let Some(out_path) = cli.out.clone() else {
        return Err(Failure::Usage("run needs --out for the output tensor".into()));
    };
    let (net, cfg, outputs, profile) = execute(cli, input)?;
    let s = outputs[0].shape();
    let mut data = Vec::with_capacity(outputs.len() * s.len());
    for o in &outputs {
        data.extend(o.to_dense());
    }
    let tensor = Tensor::new(vec![outputs.len(), s.height, s.width, s.channels], data)?;
    save_tensor(&out_path, &tensor)?;

    let cost = estimate_network(&net.layers, &cfg, &device(cli)?, outputs.len())?;
    let traffic = profile.total_counters();
    let summary = json!({
        "network": net.name,
        "batch": outputs.len(),
        "vec_size": cfg.vec_size,
        "cu_num": cfg.cu_num,
        "output": out_path.display().to_string(),
        "output_dims": tensor.dims,
        "ops_per_image": cost.ops_per_image,
        "modeled_time_per_image_s": cost.time_per_image(),
        "modeled_gops": cost.gops(),
        "feature_bytes_read": traffic.feature_bytes_read,
        "weight_bytes_read": traffic.weight_bytes_read,
        "bytes_written": traffic.bytes_written,
    });
    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(&summary).expect("json") + "\n",
        Format::Csv => {
            let obj = summary.as_object().expect("object");
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            let vals: Vec<String> = obj
                .values()
                .map(|v| v.to_string().trim_matches('"').replace(',', ";"))
                .collect();
            format!("{}\n{}\n", keys.join(","), vals.join(","))
        }
        Format::Text => format!(
            "network          {}\nbatch            {}\nvec x cu         {} x {}\nops per image    {}\nmodeled time     {:.3} ms/image\nmodeled GOPS     {:.2}\noutput           {} {:?}\n",
            net.name,
            outputs.len(),
            cfg.vec_size,
            cfg.cu_num,
            cost.ops_per_image,
            cost.time_per_image() * 1e3,
            cost.gops(),
            out_path.display(),
            tensor.dims
        ),
    };
    print!("{text}");
    Ok(())
}

fn cmd_validate(cli: &Cli) -> CliResult<()> {
    let net = resolve_network(&cli.net)?;
    let cfg = config(cli, &net)?;
    let opts = options(cli)?;
    let weights = network_weights(cli, &net, &cfg)?;
    let input = random_inputs(net.layers[0].input_shape, cli.seed, 1, cfg.vec_size).remove(0);
    let report = validate_run(&net.layers, &weights, &input, &cfg, &opts)?;
    let text = match cli.format {
        Format::Json => report.to_json() + "\n",
        Format::Csv => report.to_csv(),
        Format::Text => report.to_text(),
    };
    emit(cli, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Validation("tolerance exceeded".into()))
    }
}

fn cmd_profile(cli: &Cli) -> CliResult<()> {
    let (_, _, _, profile) = execute(cli, None)?;
    let text = match cli.format {
        Format::Json => profile.to_json() + "\n",
        Format::Csv => profile.to_csv(),
        Format::Text => profile.to_text(),
    };
    emit(cli, &text)
}

fn cmd_sweep(cli: &Cli, vecs: &[usize], cus: &[usize]) -> CliResult<()> {
    let net = resolve_network(&cli.net)?;
    let base = config(cli, &net)?;
    if cli.batch == 0 {
        return Err(Failure::Usage("--batch must be at least 1".into()));
    }
    let points = sweep(&net.layers, &device(cli)?, vecs, cus, cli.batch, &base)?;
    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(&points).expect("json") + "\n",
        Format::Csv => sweep_csv(&points),
        Format::Text => sweep_text(&points),
    };
    emit(cli, &text)
}

fn cmd_lrn_table(cli: &Cli, x_min: f32, x_max: f32, lrn: LrnSpec, samples: usize) -> CliResult<()> {
    let n = cli.lrn_n.unwrap_or(AcceleratorConfig::default().lrn_n);
    let table = lrn_build_table(n, lrn.k, lrn.alpha, lrn.beta, x_min, x_max)?;
    let err = table.max_relative_error(samples);
    let text = match cli.format {
        Format::Json => {
            let v = json!({ "table": table, "max_relative_error": err, "samples": samples });
            serde_json::to_string_pretty(&v).expect("json") + "\n"
        }
        Format::Text | Format::Csv => table.to_text(),
    };
    emit(cli, &text)?;
    eprintln!("n = {n}: {} segments, max relative error {:.4}% over {samples} samples", table.segments.len(), err * 100.0);
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Run { input } => cmd_run(cli, input.as_deref()),
        Command::Validate => cmd_validate(cli),
        Command::Profile => cmd_profile(cli),
        Command::Sweep { vecs, cus } => cmd_sweep(cli, vecs, cus),
        Command::LrnTable {
            x_min,
            x_max,
            k,
            alpha,
            beta,
            samples,
        } => cmd_lrn_table(
            cli,
            *x_min,
            *x_max,
            LrnSpec {
                local_size: 5,
                k: *k,
                alpha: *alpha,
                beta: *beta,
            },
            *samples,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Validation(m) => (EXIT_VALIDATION, m),
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Io(m) => (EXIT_IO, m),
                Failure::Runtime(m) => (EXIT_VALIDATION, m),
            };
            eprintln!("pipecnn: {msg}");
            ExitCode::from(code)
        }
    }
}
