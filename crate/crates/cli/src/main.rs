use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use robia_core::checkpoint::{load_warm_start, save_maps, save_model, save_warm_start};
use robia_core::config::{load_config, RunConfig};
use robia_core::harness::{run_prepared, warm_start, MetricRecord, PreparedSequence};
use robia_core::model::StereoPair;
use robia_core::proxy::{proxy_label, ProxyParams};
use robia_core::report;
use robia_core::synth::synth_pair;
use robia_core::Tensor;

const RECORDS_FILE: &str = "records.ndjson";

#[derive(Parser)]
#[command(
    name = "robia",
    version,
    about = "Continual test-time adaptation for stereo matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrains the backbone and trains the expert layers on the clean source stream.
    Warmup {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output warm-start checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the online adaptation loop over the configured domain sequence.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Warm-start checkpoint written by `warmup`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Computes the handcrafted proxy label of one stereo pair.
    Proxy {
        /// Directory holding `left.png` and `right.png`.
        #[arg(long)]
        input: PathBuf,
        /// TOML file with proxy parameters; missing keys take their defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Maps container for label, confidence and masks; defaults to `<input>/proxy.maps`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarizes the record stream of an `adapt` run.
    Report {
        /// Directory holding `records.ndjson`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Also render per-round error curves as SVG files.
        #[arg(long)]
        plots: bool,
        /// Output directory; defaults to the records directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Renders one frame of a configured domain as a PNG pair plus ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Domain name from `sequence.domains`.
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 0)]
        frame: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Warmup { config, out } => cmd_warmup(config.as_deref(), &out),
        Command::Adapt {
            config,
            ckpt,
            out_dir,
        } => cmd_adapt(config.as_deref(), &ckpt, &out_dir),
        Command::Proxy { input, params, out } => {
            cmd_proxy(&input, params.as_deref(), out.as_deref())
        }
        Command::Report {
            records,
            format,
            plots,
            out_dir,
        } => cmd_report(&records, format, plots, out_dir.as_deref()),
        Command::Synth {
            config,
            domain,
            frame,
            out_dir,
        } => cmd_synth(config.as_deref(), &domain, frame, &out_dir),
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_warmup(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let start = Instant::now();
    let warm = warm_start(&cfg)?;
    save_warm_start(&warm, out)?;
    write_file(&out.with_extension("config.toml"), cfg.to_toml()?)?;
    let r = &warm.report;
    eprintln!(
        "held-out EPE: untrained {:.3}, pretrained {:.3}, warm {:.3} ({:.1}s)",
        r.heldout_epe_untrained,
        r.heldout_epe_pretrained,
        r.heldout_epe_warm,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_adapt(config: Option<&Path>, ckpt: &Path, out_dir: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let warm = load_warm_start(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if warm.student.config != cfg.model {
        bail!("checkpoint model settings differ from the configuration's [model] section");
    }
    if warm.student.moe_config() != Some(&cfg.moe) {
        bail!("checkpoint expert-layer settings differ from the configuration's [moe] section");
    }
    fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("config.toml"), cfg.to_toml()?)?;

    let prepared = PreparedSequence::new(&cfg)?;
    let total = prepared.rounds * prepared.frames.len();
    let mut sink = BufWriter::new(File::create(out_dir.join(RECORDS_FILE))?);
    let mut io_error = None;
    let mut student = None;
    let out = run_prepared(&cfg, &warm, &prepared, |rec, state| {
        let line = serde_json::to_string(rec).map_err(anyhow::Error::from);
        let written = line.and_then(|l| writeln!(sink, "{l}").map_err(anyhow::Error::from));
        if let Err(e) = written {
            io_error.get_or_insert(e);
        }
        let done = rec.frame_index as usize + 1;
        if done == total {
            student = Some(state.student.clone());
        }
        if done % 20 == 0 || done == total {
            eprintln!(
                "frame {done}/{total} round {} {}: D1 {}",
                rec.round,
                rec.domain,
                rec.d1_all
                    .map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v))
            );
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    sink.flush()?;

    write_file(
        &out_dir.join("records.csv"),
        report::records_csv(&out.records),
    )?;
    write_summaries(&out.records, out_dir, true)?;
    if let Some(student) = student {
        save_model(&student, None, &out_dir.join("student.ckpt"))?;
    }
    eprintln!("wrote {}", out_dir.display());
    Ok(())
}

fn write_summaries(records: &[MetricRecord], dir: &Path, plots: bool) -> Result<()> {
    let put = |name: &str, contents: String| write_file(&dir.join(name), contents);
    put(
        "summary.csv",
        report::summary_csv(&report::summarize(records)?),
    )?;
    put(
        "table.csv",
        report::wide_table_csv(&report::wide_table(records)?),
    )?;
    put("summary.json", report::summary_json(records)?)?;
    if plots {
        for (name, svg) in report::round_plots(records)? {
            put(&name, svg)?;
        }
    }
    Ok(())
}

fn read_records(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join(RECORDS_FILE);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        records.push(rec);
    }
    if records.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(records)
}

fn cmd_report(
    records_dir: &Path,
    format: Format,
    plots: bool,
    out_dir: Option<&Path>,
) -> Result<()> {
    let records = read_records(records_dir)?;
    let dir = out_dir.unwrap_or(records_dir);
    fs::create_dir_all(dir)?;
    write_summaries(&records, dir, plots)?;
    let text = match format {
        Format::Csv => report::wide_table_csv(&report::wide_table(&records)?),
        Format::Json => report::summary_json(&records)?,
    };
    print!("{text}");
    Ok(())
}

fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + p] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.dims3();
    let n = h * w;
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |ch: usize| (d[ch.min(c - 1) * n + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_proxy(input: &Path, params: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let params: ProxyParams = match params {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ProxyParams::default(),
    };
    let pair = StereoPair::new(
        load_png(&input.join("left.png"))?,
        load_png(&input.join("right.png"))?,
        0,
    )?;
    let label = proxy_label(&pair, &params)?;
    let (h, w) = (pair.height(), pair.width());
    let as_map =
        |m: &[bool]| Tensor::from_vec(&[h, w], m.iter().map(|&v| v as u8 as f64).collect());
    let valid = as_map(&label.masks.valid)?;
    let invalid = as_map(&label.masks.invalid)?;
    let out = out.map_or_else(|| input.join("proxy.maps"), Path::to_path_buf);
    save_maps(
        &out,
        &[
            ("disparity", &label.disparity.data),
            ("confidence", &label.confidence.c),
            ("valid", &valid),
            ("invalid", &invalid),
        ],
        serde_json::json!({ "params": params, "density": label.density }),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "height": h,
            "width": w,
            "density": label.density,
            "maps": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_synth(config: Option<&Path>, domain: &str, frame: u64, out_dir: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let Some(spec) = cfg.sequence.domains.iter().find(|d| d.name == domain) else {
        let names: Vec<_> = cfg
            .sequence
            .domains
            .iter()
            .map(|d| d.name.as_str())
            .collect();
        bail!(
            "unknown domain {domain:?}; configured: {}",
            names.join(", ")
        );
    };
    let (pair, gt) = synth_pair(spec, &cfg.sequence.scene, frame, cfg.seeds.sequence)?;
    fs::create_dir_all(out_dir)?;
    save_png(&pair.left, &out_dir.join("left.png"))?;
    save_png(&pair.right, &out_dir.join("right.png"))?;
    let (h, w) = (gt.height(), gt.width());
    let valid = Tensor::from_vec(&[h, w], gt.valid.iter().map(|&v| v as u8 as f64).collect())?;
    save_maps(
        &out_dir.join("gt.maps"),
        &[("disparity", &gt.data), ("valid", &valid)],
        serde_json::json!({ "domain": domain, "frame": frame }),
    )?;
    Ok(())
}
