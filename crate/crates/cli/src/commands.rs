use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use geossl_core::harness::{
    self, embed_records, evaluate_with, export_embeddings, read_csv, report_rows, run_ablation,
    write_csv, Axis, Protocol, ProtocolReport,
};
use geossl_core::model::{load_checkpoint, save_checkpoint, write_checkpoint, Encoder};
use geossl_core::synthdata::{self, Dataset, MANIFEST_FILE, PATCHES_FILE};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::report;

/// Settings shared by every command.
pub struct Ctx {
    pub config: Config,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub threads: usize,
}

impl Ctx {
    fn data_dir(&self, data: Option<&Path>) -> PathBuf {
        data.map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.dataset_path.clone())
    }

    /// `<out>/run_<timestamp>_<hash>` holding the effective config.
    fn run_dir(&self, command: &str, config: &Config) -> Result<PathBuf> {
        let text = config.to_toml()?;
        let digest = Sha256::digest(format!("{command}\n{text}").as_bytes());
        let hash: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let root = self.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
        let dir = root.join(format!("run_{stamp}_{hash}"));
        if dir.exists() && !self.force && !is_empty_dir(&dir)? {
            bail!(
                "run directory {} already exists (use --force to reuse it)",
                dir.display()
            );
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(dir)
    }
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    Ok(fs::read_dir(dir)?.next().is_none())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// The effective config of a run on `data`: the dataset section describes
/// the dataset actually used.
fn run_config(ctx: &Ctx, data: &Dataset, dir: &Path) -> Config {
    let mut cfg = ctx.config.clone();
    cfg.dataset = data.manifest().config.clone();
    cfg.dataset_path = dir.to_path_buf();
    cfg
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    let target = ctx
        .out
        .clone()
        .unwrap_or_else(|| ctx.config.dataset_path.clone());
    if target.exists() {
        ensure!(
            target.is_dir(),
            "{} exists and is not a directory",
            target.display()
        );
        let entries: Vec<String> = fs::read_dir(&target)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_, _>>()?;
        if !entries.is_empty() {
            if !ctx.force {
                bail!(
                    "{} already exists and is not empty (use --force to overwrite)",
                    target.display()
                );
            }
            if let Some(other) = entries
                .iter()
                .find(|e| *e != MANIFEST_FILE && *e != PATCHES_FILE)
            {
                bail!(
                    "refusing to overwrite {}: `{other}` is not part of a dataset",
                    target.display()
                );
            }
        }
    }
    let data = synthdata::generate(&ctx.config.dataset)?;
    data.write(&target)
        .with_context(|| format!("writing dataset to {}", target.display()))?;
    let back = load_dataset(&target)?;
    ensure!(
        back.manifest() == data.manifest() && back.raw() == data.raw(),
        "dataset read back from {} differs from the generated one",
        target.display()
    );
    let m = data.manifest();
    println!("dataset    {}", target.display());
    println!(
        "locations  {} x {} timestamps = {} records",
        m.n_locations, m.timestamps, m.n_records
    );
    println!(
        "patches    {} channels, {}x{}",
        m.channels, m.height, m.width
    );
    println!("classes    {} over {} regions", m.classes, m.regions);
    println!(
        "split      {:?}: {} train, {} test records",
        m.split,
        m.train.len(),
        m.test.len()
    );
    println!("seed       {}", m.config.seed);
    Ok(())
}

pub fn pretrain(ctx: &Ctx, data: Option<&Path>) -> Result<()> {
    let data_dir = ctx.data_dir(data);
    let data = load_dataset(&data_dir)?;
    let cfg = run_config(ctx, &data, &data_dir);
    let run = &cfg.run;
    run.input_dims(&data)?;
    let dir = ctx.run_dir("pretrain", &cfg)?;
    let trained = harness::pretrain(run, &data)?;

    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&trained.encoder, &ckpt)?;
    let mut expected = Vec::new();
    write_checkpoint(&trained.encoder, &mut expected)?;
    ensure!(
        fs::read(&ckpt)? == expected,
        "checkpoint {} did not round-trip",
        ckpt.display()
    );
    load_checkpoint(&ckpt).with_context(|| format!("re-reading {}", ckpt.display()))?;

    let run_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rows = report_rows(&run_id, "pretrain", "default", run, &trained.report);
    let metrics = dir.join("metrics.csv");
    write_csv(&metrics, &rows)?;
    ensure!(
        read_csv(&metrics)? == rows,
        "metrics {} did not round-trip",
        metrics.display()
    );

    let r = &trained.report;
    let last = r.epochs.last().expect("at least one epoch");
    println!("run        {}", dir.display());
    println!(
        "epochs     {} (final loss {:.6})",
        r.epochs.len(),
        last.loss_total
    );
    println!("knn        {:.4}", r.knn_acc_macro);
    println!("linear     {:.4}", r.linear_acc_macro);
    match r.spearman_geo {
        Some(rho) => println!("spearman   {rho:.4}"),
        None => println!("spearman   undefined"),
    }
    println!("wallclock  {:.1} s", r.wallclock_s);
    Ok(())
}

#[derive(Serialize)]
struct Evaluation<'a> {
    dataset: String,
    checkpoint: Option<String>,
    protocols: &'a [Protocol],
    #[serde(flatten)]
    report: ProtocolReport,
}

pub fn evaluate(
    ctx: &Ctx,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    protocols: &[Protocol],
    export: Option<&Path>,
) -> Result<()> {
    let data_dir = ctx.data_dir(data);
    let data = load_dataset(&data_dir)?;
    let cfg = run_config(ctx, &data, &data_dir);
    let encoder = match checkpoint {
        Some(p) => {
            load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?
        }
        None => Encoder::new(cfg.run.encoder_config(&data)?, cfg.run.train.seed)?,
    };
    let dims = cfg.run.input_dims(&data)?;
    let dir = ctx.run_dir("evaluate", &cfg)?;
    let report = evaluate_with(&encoder, &data, &cfg.run, protocols)?;

    if let Some(path) = export {
        let records: Vec<usize> = (0..data.len()).collect();
        let emb = embed_records(&encoder, &data, &records, dims, cfg.run.eval.representation)?;
        export_embeddings(&emb, &data_dir.to_string_lossy(), &records, path)?;
        let len = fs::metadata(path)?.len() as usize;
        ensure!(
            len == emb.data().len() * 4,
            "export {} has {len} bytes, expected {}",
            path.display(),
            emb.data().len() * 4
        );
        println!(
            "exported   {} ({} x {})",
            path.display(),
            records.len(),
            emb.data().len() / records.len().max(1)
        );
    }

    let out = Evaluation {
        dataset: data_dir.to_string_lossy().into_owned(),
        checkpoint: checkpoint.map(|p| p.to_string_lossy().into_owned()),
        protocols,
        report,
    };
    let json = serde_json::to_string_pretty(&out)?;
    let path = dir.join("evaluation.json");
    fs::write(&path, &json)?;
    let back: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    ensure!(
        back == serde_json::to_value(&out)?,
        "{} did not round-trip",
        path.display()
    );

    println!("run        {}", dir.display());
    let show = |name: &str, v: Option<f64>, asked: bool| match (v, asked) {
        (Some(v), _) => println!("{name:<10} {v:.4}"),
        (None, true) => println!("{name:<10} undefined"),
        (None, false) => {}
    };
    show(
        "knn",
        report.knn_acc_macro,
        protocols.contains(&Protocol::Knn),
    );
    show(
        "linear",
        report.linear_acc_macro,
        protocols.contains(&Protocol::Linear),
    );
    show(
        "spearman",
        report.spearman_geo,
        protocols.contains(&Protocol::Spearman),
    );
    Ok(())
}

pub fn ablate(
    ctx: &Ctx,
    data: Option<&Path>,
    axis: Option<Axis>,
    grid: &[String],
    seeds: Option<usize>,
) -> Result<()> {
    let data_dir = ctx.data_dir(data);
    let data = load_dataset(&data_dir)?;
    let mut cfg = run_config(ctx, &data, &data_dir);
    if let Some(a) = axis {
        if a != cfg.ablation.axis {
            cfg.ablation.grid.clear();
        }
        cfg.ablation.axis = a;
    }
    if !grid.is_empty() {
        cfg.ablation.grid = grid.to_vec();
    }
    if let Some(s) = seeds {
        ensure!(s > 0, "--seeds must be positive");
        cfg.ablation.seeds = s;
    }
    let axis = cfg.ablation.axis;
    let grid = cfg.ablation.grid_or_default();
    for point in &grid {
        axis.apply(point, &cfg.run, &data)?.validate()?;
    }
    let dir = ctx.run_dir("ablate", &cfg)?;
    let rows = run_ablation(
        axis,
        &grid,
        &cfg.run,
        &data,
        cfg.ablation.seeds,
        ctx.threads,
    )?;
    let path = dir.join(format!("ablation_{}.csv", axis.name()));
    write_csv(&path, &rows)?;
    ensure!(
        read_csv(&path)? == rows,
        "{} did not round-trip",
        path.display()
    );

    println!("run        {}", dir.display());
    println!("csv        {}", path.display());
    let series = report::aggregate(&rows)?;
    print!("{}", report::summary_table(&series));
    Ok(())
}

pub fn report(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let r = read_csv(path).with_context(|| format!("reading {}", path.display()))?;
        ensure!(!r.is_empty(), "{} has no data rows", path.display());
        rows.extend(r);
    }
    let series = report::aggregate(&rows)?;
    let out = ctx.out.clone().unwrap_or_else(|| PathBuf::from("report"));
    let files: Vec<(PathBuf, String)> = series
        .iter()
        .map(|s| {
            (
                out.join(format!("{}.svg", file_stem(&s.axis))),
                report::svg_chart(s),
            )
        })
        .chain([(out.join("summary.txt"), report::summary_table(&series))])
        .collect();
    if !ctx.force {
        if let Some((p, _)) = files.iter().find(|(p, _)| p.exists()) {
            bail!("{} already exists (use --force to overwrite)", p.display());
        }
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (path, body) in &files {
        fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
        ensure!(
            fs::read_to_string(path)? == *body,
            "{} did not round-trip",
            path.display()
        );
    }
    for (path, _) in &files[..series.len()] {
        println!("chart      {}", path.display());
    }
    print!("{}", files.last().expect("summary").1);
    Ok(())
}

/// Axis names come from CSV cells; keep file names tame.
fn file_stem(axis: &str) -> String {
    let s: String = axis
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "axis".into()
    } else {
        s
    }
}
