//! Subcommand implementations.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use nocbench_core::dataset::LoadedSet;
use nocbench_core::encoder::EncoderConfig;
use nocbench_core::eval::render_report;
use nocbench_core::geo::{self, SolarConfig};
use nocbench_core::nightgen::{self, NightParams};
use nocbench_core::pipeline::{self, AblateConfig};
use nocbench_core::raster::RasterImage;
use nocbench_core::retrieval::{self, RoutingConfig};
use nocbench_core::store::{self, ImageSource, Manifest};
use nocbench_core::synthdata::{self, SynthConfig};
use nocbench_core::trainer::{self, DayCache, TrainConfig, TrainerError};

use crate::{
    AblateArgs, BuildDbArgs, CacheDayArgs, EvaluateArgs, FinetuneArgs, GenNightArgs, MetricsArgs,
    PretrainArgs, QueryArgs, SolarArgs, SynthArgs,
};

/// Errors with their process exit category.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) | CliError::Numeric(msg) => {
                write!(f, "{msg}")
            }
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(err: TrainerError) -> Self {
        match err {
            TrainerError::Diverged { .. } => CliError::Numeric(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data(err: impl Display) -> CliError {
    CliError::Data(err.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

/// Like println!, but exits quietly when the reader closed the pipe.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        if writeln!(out, $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

fn echo_config(command: &str, config: &impl Serialize) {
    emit!(
        "{}",
        json!({"event": "config", "command": command, "config": config})
    );
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| data(format!("reading {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| data(format!("parsing {}: {e}", p.display())))
        }
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_set(manifest_path: &Path) -> Result<LoadedSet> {
    let manifest = store::read_manifest(manifest_path).map_err(data)?;
    LoadedSet::load(manifest, &base_dir(manifest_path)).map_err(data)
}

/// Write a set's images as PNGs under `out/images/` and its manifest with
/// the refs rewritten to those files.
fn write_dataset(set: &LoadedSet, out: &Path) -> Result<()> {
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| data(format!("creating {}: {e}", images_dir.display())))?;
    let mut records = Vec::with_capacity(set.len());
    for (record, img) in set.manifest.records().iter().zip(&set.images) {
        let rel = format!("images/{}.png", record.id);
        img.save_png(&out.join(&rel)).map_err(data)?;
        let mut record = record.clone();
        record.image = ImageSource::Path(rel);
        records.push(record);
    }
    let manifest = Manifest::new(records).map_err(data)?;
    store::write_manifest(&manifest, &out.join("manifest.jsonl")).map_err(data)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_json_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    echo_config("synth", &cfg);
    let ds = synthdata::generate(&cfg).map_err(data)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| data(format!("creating {}: {e}", args.out.display())))?;
    if args.inline {
        store::write_manifest(&ds.manifest, &args.out.join("manifest.jsonl")).map_err(data)?;
    } else {
        let set = LoadedSet::from_parts(ds.manifest, ds.images).map_err(data)?;
        write_dataset(&set, &args.out)?;
    }
    emit!(
        "{}",
        json!({"event": "done", "records": cfg.n_places * cfg.views_per_place,
               "manifest": args.out.join("manifest.jsonl")})
    );
    Ok(())
}

pub fn gen_night(args: GenNightArgs) -> Result<()> {
    let mut params: NightParams = read_json_or_default(args.params.as_deref())?;
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    params.validate().map_err(data)?;
    echo_config(
        "gen-night",
        &json!({"manifest": args.manifest, "params": params}),
    );
    let set = load_set(&args.manifest)?;
    let night = pipeline::night_set(&set, &params).map_err(data)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| data(format!("creating {}: {e}", args.out.display())))?;
    write_dataset(&night, &args.out)?;
    emit!(
        "{}",
        json!({"event": "done", "records": night.len(),
               "manifest": args.out.join("manifest.jsonl")})
    );
    Ok(())
}

/// On-disk training config: encoder architecture plus optimization
/// settings, both optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    encoder: EncoderConfig,
    train: TrainConfig,
}

fn apply_overrides(
    cfg: &mut TrainConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = lr {
        cfg.lr = lr;
    }
}

fn print_log(log: &[trainer::StepLog], quiet: bool) {
    if quiet {
        return;
    }
    for step in log {
        emit!(
            "{}",
            json!({"event": "step", "epoch": step.epoch, "step": step.step,
                   "l_lmc": step.l_lmc, "l_ikt": step.l_ikt, "l": step.total,
                   "alpha": step.alpha})
        );
    }
}

pub fn pretrain(args: PretrainArgs, quiet: bool) -> Result<()> {
    let mut cfg: TrainFileConfig = read_json_or_default(args.config.as_deref())?;
    apply_overrides(&mut cfg.train, args.seed, args.epochs, args.lr);
    echo_config("pretrain", &cfg);
    let set = load_set(&args.manifest)?;
    let (ckpt, log) = trainer::pretrain_day(&set, cfg.encoder, &cfg.train)?;
    print_log(&log, quiet);
    store::save_checkpoint(&ckpt, &args.out).map_err(data)?;
    emit!(
        "{}",
        json!({"event": "done", "out": args.out, "fingerprint": ckpt.fingerprint})
    );
    Ok(())
}

pub fn cache_day(args: CacheDayArgs) -> Result<()> {
    echo_config(
        "cache-day",
        &json!({"manifest": args.manifest, "model": args.model, "out": args.out}),
    );
    let model = store::load_checkpoint(&args.model).map_err(data)?;
    let set = load_set(&args.manifest)?;
    let db = retrieval::build_db(&set, &model, 1).map_err(data)?;
    store::save_db(&db, &args.out).map_err(data)?;
    emit!(
        "{}",
        json!({"event": "done", "out": args.out, "count": db.count(), "dim": db.dim()})
    );
    Ok(())
}

pub fn finetune(args: FinetuneArgs, quiet: bool) -> Result<()> {
    let mut cfg: TrainFileConfig = read_json_or_default(args.config.as_deref())?;
    apply_overrides(&mut cfg.train, args.seed, args.epochs, args.lr);
    echo_config("finetune", &cfg.train);
    let pretrained = store::load_checkpoint(&args.pretrained).map_err(data)?;
    let night = load_set(&args.manifest)?;
    let cache_db = store::load_db(&args.cache).map_err(data)?;
    let cache =
        DayCache::from_rows((0..cache_db.count()).map(|i| (cache_db.id(i), cache_db.row(i))));
    let (ckpt, log) = trainer::finetune_night(&night, &pretrained, &cache, &cfg.train)?;
    print_log(&log, quiet);
    store::save_checkpoint(&ckpt, &args.out).map_err(data)?;
    emit!(
        "{}",
        json!({"event": "done", "out": args.out, "fingerprint": ckpt.fingerprint})
    );
    Ok(())
}

pub fn build_db(args: BuildDbArgs) -> Result<()> {
    echo_config(
        "build-db",
        &json!({"manifest": args.manifest, "model": args.model, "out": args.out,
                "threads": args.threads}),
    );
    let model = store::load_checkpoint(&args.model).map_err(data)?;
    let set = load_set(&args.manifest)?;
    let db = retrieval::build_db(&set, &model, args.threads).map_err(data)?;
    store::save_db(&db, &args.out).map_err(data)?;
    emit!(
        "{}",
        json!({"event": "done", "out": args.out, "count": db.count(), "dim": db.dim()})
    );
    Ok(())
}

fn solar_config(day_elev: f64, night_elev: f64) -> Result<SolarConfig> {
    SolarConfig::new(day_elev, night_elev).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn query(args: QueryArgs) -> Result<()> {
    let solar = solar_config(args.day_elev, args.night_elev)?;
    echo_config(
        "query",
        &json!({"db": args.db, "queries": args.queries, "model": args.model,
                "night_model": args.night_model, "k": args.k, "od": args.od,
                "night_db": args.night_db, "solar": solar}),
    );
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let day_model = store::load_checkpoint(&args.model).map_err(data)?;
    let night_model = match &args.night_model {
        Some(p) => store::load_checkpoint(p).map_err(data)?,
        None => day_model.clone(),
    };
    let db = store::load_db(&args.db).map_err(data)?;
    let night_db = args
        .night_db
        .as_deref()
        .map(store::load_db)
        .transpose()
        .map_err(data)?;
    let queries = load_set(&args.queries)?;
    let routing = RoutingConfig::new(&day_model, &night_model, args.od, solar).map_err(data)?;
    let results =
        pipeline::run_queries(&queries, &db, night_db.as_ref(), &routing, args.k).map_err(data)?;
    for r in results {
        let hits: Vec<_> = r
            .ranked
            .hits
            .iter()
            .map(|h| json!({"id": h.id, "sim": h.similarity, "db_index": h.db_index}))
            .collect();
        emit!(
            "{}",
            json!({"query_id": r.id, "domain": r.domain.to_string(), "hits": hits})
        );
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let solar = solar_config(args.day_elev, args.night_elev)?;
    echo_config(
        "evaluate",
        &json!({"db": args.db, "db_manifest": args.db_manifest, "queries": args.queries,
                "model": args.model, "night_model": args.night_model, "ns": args.ns,
                "threshold_m": args.threshold_m, "od": args.od,
                "night_db": args.night_db, "solar": solar}),
    );
    if args.ns.is_empty() {
        return Err(CliError::Usage("--ns must name at least one cutoff".into()));
    }
    let day_model = store::load_checkpoint(&args.model).map_err(data)?;
    let night_model = match &args.night_model {
        Some(p) => store::load_checkpoint(p).map_err(data)?,
        None => day_model.clone(),
    };
    let db = store::load_db(&args.db).map_err(data)?;
    let night_db = args
        .night_db
        .as_deref()
        .map(store::load_db)
        .transpose()
        .map_err(data)?;
    let db_manifest = store::read_manifest(&args.db_manifest).map_err(data)?;
    let queries = load_set(&args.queries)?;
    let routing = RoutingConfig::new(&day_model, &night_model, args.od, solar).map_err(data)?;
    let (report, _) = pipeline::evaluate(
        &queries,
        &db,
        &db_manifest,
        night_db.as_ref(),
        &routing,
        &args.ns,
        args.threshold_m,
    )
    .map_err(data)?;
    emit!("{}", json!({"event": "report", "report": report}));
    emit!("{}", render_report(&report).trim_end());
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text)
            .map_err(|e| data(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn metric_triple(a: &RasterImage, b: &RasterImage) -> Result<(f64, f64, f64)> {
    let l2 = nightgen::pixel_l2(a, b).map_err(data)?;
    let psnr = nightgen::psnr_db(a, b).map_err(data)?;
    let ssim = nightgen::ssim(a, b).map_err(data)?;
    Ok((l2, psnr, ssim))
}

pub fn metrics(args: MetricsArgs) -> Result<()> {
    match (&args.a, &args.b, &args.manifest, &args.against) {
        (Some(a), Some(b), None, None) => {
            echo_config("metrics", &json!({"a": a, "b": b}));
            let ia = RasterImage::load_png(a).map_err(data)?;
            let ib = RasterImage::load_png(b).map_err(data)?;
            let (l2, psnr, ssim) = metric_triple(&ia, &ib)?;
            emit!(
                "{}",
                json!({"event": "metrics", "l2": l2, "psnr_db": psnr, "ssim": ssim})
            );
            Ok(())
        }
        (None, None, Some(m), Some(n)) => {
            echo_config("metrics", &json!({"manifest": m, "against": n}));
            let left = load_set(m)?;
            let right = load_set(n)?;
            let mut sums = (0.0, 0.0, 0.0);
            let mut count = 0usize;
            for (record, img) in left.manifest.records().iter().zip(&left.images) {
                let Some(j) = right
                    .manifest
                    .records()
                    .iter()
                    .position(|r| r.id == record.id)
                else {
                    return Err(data(format!(
                        "id {:?} missing from {}",
                        record.id,
                        n.display()
                    )));
                };
                let (l2, psnr, ssim) = metric_triple(img, &right.images[j])?;
                emit!(
                    "{}",
                    json!({"event": "pair", "id": record.id,
                           "l2": l2, "psnr_db": psnr, "ssim": ssim})
                );
                sums = (sums.0 + l2, sums.1 + psnr, sums.2 + ssim);
                count += 1;
            }
            let n = count.max(1) as f64;
            emit!(
                "{}",
                json!({"event": "summary", "pairs": count,
                       "l2": sums.0 / n, "psnr_db": sums.1 / n, "ssim": sums.2 / n})
            );
            Ok(())
        }
        _ => Err(CliError::Usage(
            "metrics needs either --a/--b or --manifest/--against".into(),
        )),
    }
}

pub fn solar(args: SolarArgs) -> Result<()> {
    let cfg = solar_config(args.day_elev, args.night_elev)?;
    echo_config(
        "solar",
        &json!({"lat": args.lat, "lon": args.lon, "utc": args.utc, "solar": cfg}),
    );
    let point =
        geo::GeoPoint::new(args.lat, args.lon).map_err(|e| CliError::Usage(e.to_string()))?;
    let utc: DateTime<Utc> = args
        .utc
        .parse()
        .map_err(|e| CliError::Usage(format!("--utc must be RFC 3339: {e}")))?;
    let elevation = geo::solar_elevation_deg(point, utc).map_err(data)?;
    let domain = geo::domain_for_elevation(elevation, cfg);
    emit!(
        "{}",
        json!({"event": "solar", "elevation_deg": elevation, "domain": domain.to_string()})
    );
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let cfg: AblateConfig = read_json_or_default(args.config.as_deref())?;
    echo_config("ablate", &json!({"config": cfg, "seed": args.seed}));
    let report = pipeline::ablate(&cfg, args.seed).map_err(|e| match e {
        pipeline::PipelineError::Trainer(t) => CliError::from(t),
        other => data(other),
    })?;
    emit!(
        "{}",
        json!({"event": "ablation", "seed": args.seed, "report": report})
    );
    emit!("{}", pipeline::render_ablation(&report).trim_end());
    if let Some(path) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text)
            .map_err(|e| data(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}
