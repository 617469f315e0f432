//! `gbx` — drive the gray-box toolkit from the command line.
//!
//! Every subcommand is a thin wrapper over the library; the examples/
//! directory shows the same entry points as code.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use graybox::adapters::{decode_adapters, encode_adapters, AdapterSet};
use graybox::harness::{
    ablation_suite, apply_overrides, default_cache_dir, dump_adapter_views, efficiency_bench,
    generate_dataset, parse_config_file, parse_method, pretrain_vault, unique_pairs,
    write_history, write_manifest, write_ppm, AblationKind, DomainShift, ExperimentSpec,
    ShiftKind, Task,
};
use graybox::protocol::{audit_ledger, connect, serve, ExposureLedger, ServeLimits};
use graybox::train::{
    eval_features, evaluate_retrieval, train_graybox, train_whitebox, whitebox_eval_features,
    Method, TrainConfig,
};
use graybox::vault::{InProcessClient, Mode};

#[derive(Parser)]
#[command(name = "gbx", about = "Gray-box fine-tuning toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Domain shift applied to images: none | affine | frequency.
    #[arg(long, default_value = "affine")]
    shift: String,
    #[arg(long, default_value_t = 2048)]
    n_train: usize,
    #[arg(long, default_value_t = 512)]
    n_test: usize,
    /// Dataset seed (also keys the shift parameters).
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl DataArgs {
    fn shift(&self) -> Result<DomainShift> {
        let kind = ShiftKind::parse(&self.shift)
            .ok_or_else(|| anyhow!("unknown shift {:?}", self.shift))?;
        Ok(DomainShift {
            kind,
            seed: self.seed ^ 0x51F7,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset's class renders, captions, and manifest.
    GenData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain (or load) the frozen backbone for a seed.
    Pretrain {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Serve a pretrained vault over TCP (sealed mode only).
    Serve {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Bind address; falls back to GBX_ADDR, then 127.0.0.1:4747.
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train a method and write metrics, adapters, and a manifest.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// zs | lp | dga | lga | lora | llft<n> | ft
        #[arg(long, default_value = "dga")]
        method: String,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.8)]
        decay: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// key=value overrides applied before the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Remote vault address; falls back to GBX_ADDR, else in-process.
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Evaluate saved adapters on a dataset split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run one ablation grid and write its table.
    Ablate {
        /// adapter-combos | extra-tokens | proxy-count | proxy-layers |
        /// last-layers
        #[arg(long, default_value = "adapter-combos")]
        kind: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Shared-backbone efficiency accounting.
    Bench {
        #[arg(long, default_value_t = 10)]
        domains: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Dump original/adapter-transformed image pairs as PPM files.
    Visualize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit an exposure ledger file against a vault.
    Audit {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value = "dga")]
        method: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

fn cache_dir(explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(default_cache_dir)
}

fn resolve_addr(explicit: &Option<String>) -> Option<String> {
    explicit
        .clone()
        .or_else(|| std::env::var("GBX_ADDR").ok().filter(|s| !s.is_empty()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { data, out } => gen_data(data, out),
        Command::Pretrain { seed, cache } => {
            let outcome = pretrain_vault(seed, &cache_dir(&cache))?;
            println!(
                "vault seed={seed} checksum={:016x} clean-r@1={:.4} cached={} epochs={}",
                outcome.vault.checksum(),
                outcome.clean_r1,
                outcome.from_cache,
                outcome.epochs_run
            );
            Ok(())
        }
        Command::Serve { seed, addr, cache } => {
            let outcome = pretrain_vault(seed, &cache_dir(&cache))?;
            let bind = resolve_addr(&addr).unwrap_or_else(|| "127.0.0.1:4747".into());
            let server = serve(Arc::new(outcome.vault), &bind, ServeLimits::default())?;
            println!("serving vault seed={seed} on {}", server.addr());
            // Serve until interrupted.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Train {
            data,
            method,
            epochs,
            lr,
            decay,
            batch,
            config,
            addr,
            out,
            cache,
        } => train_cmd(
            data, &method, epochs, lr, decay, batch, config, addr, out, cache,
        ),
        Command::Eval {
            data,
            adapters,
            addr,
            cache,
        } => eval_cmd(data, adapters, addr, cache),
        Command::Ablate {
            kind,
            data,
            epochs,
            lr,
            out,
            cache,
        } => ablate_cmd(&kind, data, epochs, lr, out, cache),
        Command::Bench { domains, samples } => {
            let report = efficiency_bench(domains, samples)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Visualize {
            data,
            adapters,
            count,
            out,
        } => visualize_cmd(data, adapters, count, out),
        Command::Audit {
            ledger,
            method,
            seed,
            cache,
        } => {
            let text = std::fs::read_to_string(&ledger)
                .with_context(|| format!("reading {}", ledger.display()))?;
            let ledger = ExposureLedger::parse_lines(&text);
            let outcome = pretrain_vault(seed, &cache_dir(&cache))?;
            let report = audit_ledger(&ledger, &outcome.vault, &method)?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn gen_data(data: DataArgs, out: PathBuf) -> Result<()> {
    std::fs::create_dir_all(&out)?;
    let shift = data.shift()?;
    let splits = generate_dataset(data.n_train, data.n_test, shift, data.seed);
    // Class renders once each (samples of a class are identical), captions,
    // and the manifest.
    let uniq = unique_pairs(&splits.train);
    let mut captions = String::new();
    for p in &uniq {
        write_ppm(&out.join(format!("class_{:02}.ppm", p.class_id)), &p.image)?;
        captions.push_str(&format!(
            "{} {}\n",
            p.class_id,
            p.caption
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    std::fs::write(out.join("captions.txt"), captions)?;
    let mut manifest = BTreeMap::new();
    manifest.insert("seed".into(), data.seed.to_string());
    manifest.insert("shift".into(), shift.kind.name().into());
    manifest.insert("n_train".into(), data.n_train.to_string());
    manifest.insert("n_test".into(), data.n_test.to_string());
    manifest.insert("classes".into(), uniq.len().to_string());
    write_manifest(&out.join("manifest.txt"), &manifest)?;
    println!("wrote {} class renders to {}", uniq.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: DataArgs,
    method: &str,
    epochs: usize,
    lr: f64,
    decay: f64,
    batch: usize,
    config_file: Option<PathBuf>,
    addr: Option<String>,
    out: PathBuf,
    cache: Option<PathBuf>,
) -> Result<()> {
    let method = parse_method(method).ok_or_else(|| anyhow!("unknown method {method:?}"))?;
    let mut config = TrainConfig::new(method, data.seed);
    if let Some(path) = &config_file {
        let text = std::fs::read_to_string(path)?;
        apply_overrides(&mut config, &parse_config_file(&text)?)?;
    }
    config.epochs = epochs;
    config.lr0 = lr;
    config.decay = decay;
    config.batch = batch;

    std::fs::create_dir_all(&out)?;
    let shift = data.shift()?;
    let splits = generate_dataset(data.n_train, data.n_test, shift, data.seed);
    let eval_pairs = unique_pairs(&splits.test);
    let outcome = pretrain_vault(data.seed, &cache_dir(&cache))?;
    let checksum_before = outcome.vault.checksum();

    let mut manifest: BTreeMap<String, String> = BTreeMap::new();
    manifest.insert("method".into(), method.name());
    manifest.insert("shade".into(), method.shade().into());
    manifest.insert("seed".into(), data.seed.to_string());
    manifest.insert("shift".into(), shift.kind.name().into());
    manifest.insert("epochs".into(), config.epochs.to_string());
    manifest.insert("lr0".into(), config.lr0.to_string());
    manifest.insert("batch".into(), config.batch.to_string());
    manifest.insert("n_train".into(), data.n_train.to_string());
    manifest.insert("n_test".into(), data.n_test.to_string());
    manifest.insert(
        "vault_checksum".into(),
        format!("{checksum_before:016x}"),
    );

    match method {
        Method::Ft | Method::Llft(_) | Method::Lora => {
            if resolve_addr(&addr).is_some() {
                bail!("owner-mode methods cannot run against a remote vault");
            }
            let mut vault = outcome.vault;
            let result =
                train_whitebox(&mut vault, data.seed, &splits.train, &eval_pairs, &config)?;
            write_history(&out.join("metrics.txt"), &result.history)?;
            manifest.insert(
                "vault_checksum_after".into(),
                format!("{:016x}", vault.checksum()),
            );
            write_manifest(&out.join("manifest.txt"), &manifest)?;
            print_last_metrics(&result.history);
        }
        Method::Zs => {
            let (img, txt) = whitebox_eval_features(&outcome.vault, Mode::Sealed, &eval_pairs)?;
            for (k, v) in evaluate_retrieval(&txt, &img, &[1, 5, 10]) {
                println!("r@{k} {v:.4}");
            }
            write_manifest(&out.join("manifest.txt"), &manifest)?;
        }
        Method::Lp | Method::Dga | Method::Lga => {
            let vault = Arc::new(outcome.vault);
            let (history, adapters) = match resolve_addr(&addr) {
                Some(remote_addr) => {
                    let mut client = connect(&remote_addr)
                        .map_err(|e| anyhow!("connecting {remote_addr}: {e}"))?;
                    let result =
                        train_graybox(&mut client, &splits.train, &eval_pairs, &config)?;
                    std::fs::write(out.join("ledger.txt"), client.ledger().to_lines())?;
                    manifest.insert("vault_addr".into(), remote_addr);
                    (result.history, result.adapters)
                }
                None => {
                    let mut client = InProcessClient::new(Arc::clone(&vault));
                    let result =
                        train_graybox(&mut client, &splits.train, &eval_pairs, &config)?;
                    (result.history, result.adapters)
                }
            };
            std::fs::write(out.join("adapters.gba"), encode_adapters(&adapters))?;
            write_history(&out.join("metrics.txt"), &history)?;
            manifest.insert(
                "adapter_params".into(),
                adapters.count_trainable(vault.param_count()).0.to_string(),
            );
            manifest.insert(
                "vault_checksum_after".into(),
                format!("{:016x}", vault.checksum()),
            );
            write_manifest(&out.join("manifest.txt"), &manifest)?;
            print_last_metrics(&history);
        }
    }
    println!("run written to {}", out.display());
    Ok(())
}

fn print_last_metrics(history: &[graybox::train::MetricRecord]) {
    let last_epoch = history.iter().map(|r| r.epoch).max().unwrap_or(0);
    for r in history.iter().filter(|r| r.epoch == last_epoch) {
        println!("{} {} {} {:.4}", r.epoch, r.split, r.metric, r.value);
    }
}

fn eval_cmd(
    data: DataArgs,
    adapters_path: PathBuf,
    addr: Option<String>,
    cache: Option<PathBuf>,
) -> Result<()> {
    let bytes = std::fs::read(&adapters_path)
        .with_context(|| format!("reading {}", adapters_path.display()))?;
    let adapters: AdapterSet<f32> = decode_adapters(&bytes)?;
    let shift = data.shift()?;
    let splits = generate_dataset(data.n_train, data.n_test, shift, data.seed);
    let eval_pairs = unique_pairs(&splits.test);

    let (img, txt) = match resolve_addr(&addr) {
        Some(remote_addr) => {
            let mut client =
                connect(&remote_addr).map_err(|e| anyhow!("connecting {remote_addr}: {e}"))?;
            eval_features(&mut client, &adapters, &eval_pairs, 64)?
        }
        None => {
            let outcome = pretrain_vault(data.seed, &cache_dir(&cache))?;
            let mut client = InProcessClient::new(Arc::new(outcome.vault));
            eval_features(&mut client, &adapters, &eval_pairs, 64)?
        }
    };
    for (k, v) in evaluate_retrieval(&txt, &img, &[1, 5, 10]) {
        println!("r@{k} {v:.4}");
    }
    Ok(())
}

fn ablate_cmd(
    kind: &str,
    data: DataArgs,
    epochs: usize,
    lr: f64,
    out: PathBuf,
    cache: Option<PathBuf>,
) -> Result<()> {
    let kind = AblationKind::parse(kind).ok_or_else(|| anyhow!("unknown ablation {kind:?}"))?;
    if let Some(cache) = &cache {
        std::env::set_var("GBX_CACHE", cache);
    }
    let spec = ExperimentSpec {
        name: format!("{}-{:?}", data.shift, kind),
        task: Task::Retrieval,
        shift: data.shift()?,
        n_train: data.n_train,
        n_test: data.n_test,
        data_seed: data.seed,
        vault_seed: data.seed,
        methods: vec![],
    };
    let mut template = TrainConfig::new(Method::Dga, data.seed);
    template.epochs = epochs;
    template.lr0 = lr;
    template.decay = 0.8;
    let result = ablation_suite(kind, &spec, &template)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("table.txt"), result.render())?;
    print!("{}", result.render());
    Ok(())
}

fn visualize_cmd(
    data: DataArgs,
    adapters_path: Option<PathBuf>,
    count: usize,
    out: PathBuf,
) -> Result<()> {
    let adapters: AdapterSet<f32> = match adapters_path {
        Some(path) => decode_adapters(&std::fs::read(&path)?)?,
        None => graybox::adapters::init_adapters(&graybox::adapters::AdapterConfig::dga(), 0)?,
    };
    let shift = data.shift()?;
    let splits = generate_dataset(count.max(1), 1, shift, data.seed);
    let images: Vec<_> = splits.train.iter().take(count).map(|p| p.image.clone()).collect();
    let written = dump_adapter_views(&adapters, &images, &out)?;
    println!("wrote {} image pairs to {}", written.len(), out.display());
    Ok(())
}

