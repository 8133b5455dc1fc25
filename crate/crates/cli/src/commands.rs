use std::fmt;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use laneseg_core::data::{decode_rgb, resize_bilinear, synthetic_dataset, DatasetManifest, Sample, Split};
use laneseg_core::gradcheck::{self, Perturb};
use laneseg_core::metrics::{evaluate_dataset_metrics, REPORT_HEADER};
use laneseg_core::persist::{load_model_dir, save_model_dir, ARCH_FILE, WEIGHTS_FILE};
use laneseg_core::render::{mask_to_gray, save_png};
use laneseg_core::training::{train_with_observer, CurveLog, LossNorm, TrainConfig};
use laneseg_core::{build_network, Network, NetworkConfig, Rng};
use laneseg_geo::pipeline::{segment, Outcome, PipelineOptions};
use laneseg_geo::{predict_at_current_location, write_outputs, FixtureTransport, Transport, ViewParams};

use crate::args::{DataSource, EvalArgs, FetchArgs, GradcheckArgs, PredictArgs, SplitArg, TrainArgs};

pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.csv";
/// Key used in fixture mode when none is given; fixtures are recorded with it.
pub const OFFLINE_KEY: &str = "offline";
/// Exit status when the location has no street-view coverage.
pub const EXIT_NO_IMAGERY: u8 = 2;

#[derive(Debug)]
pub struct Failure(String);

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<laneseg_core::Error> for Failure {
    fn from(e: laneseg_core::Error) -> Self {
        Failure(e.to_string())
    }
}

impl From<laneseg_geo::PipelineError> for Failure {
    fn from(e: laneseg_geo::PipelineError) -> Self {
        Failure(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn fail<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(msg.into()))
}

fn require_file(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        fail(format!("{flag}: no such file {}", path.display()))
    }
}

fn require_model_dir(dir: &Path) -> Result<(), Failure> {
    for name in [ARCH_FILE, WEIGHTS_FILE] {
        if !dir.join(name).is_file() {
            return fail(format!("--model: {} has no {name}", dir.display()));
        }
    }
    Ok(())
}

/// Refuses to write into an existing regular file.
fn check_out_dir(dir: &Path, flag: &str) -> Result<(), Failure> {
    if dir.exists() && !dir.is_dir() {
        return fail(format!("{flag}: {} exists and is not a directory", dir.display()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure(format!("cannot create {}: {e}", dir.display())))
}

/// Validation images generated after the `count` training images.
pub fn synthetic_val_count(count: usize) -> usize {
    count.div_ceil(4)
}

/// The first `count` samples train; the following `synthetic_val_count`
/// samples from the same generator validate.
fn synthetic_split(count: usize, dims: (usize, usize), seed: u64) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let mut all = synthetic_dataset(count + synthetic_val_count(count), dims, seed)?;
    let val = all.split_off(count);
    Ok((all, val))
}

fn fmt_dims((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

pub fn train(a: TrainArgs) -> CmdResult {
    if let Some(m) = &a.source.manifest {
        require_file(m, "--manifest")?;
    }
    check_out_dir(&a.out, "--out")?;
    let net_cfg = NetworkConfig {
        input_dims: (3, a.dims.0, a.dims.1),
        encoder_filters: a.filters.clone(),
        decoder_order: a.decoder_order.into(),
        ..NetworkConfig::segnet_lite(a.dims.0, a.dims.1)
    };
    net_cfg.validate()?;
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        loss_norm: if a.normalize_per_pixel {
            LossNorm::PerPixel
        } else {
            LossNorm::PerImage
        },
    };
    train_cfg.validate()?;

    let (train_set, val_set) = match (&a.source.manifest, a.source.synthetic) {
        (Some(path), _) => {
            let manifest = DatasetManifest::read(path)?;
            let train_set = manifest.load(Split::Train, a.dims)?;
            let val_set = manifest.load(Split::Val, a.dims)?;
            if train_set.is_empty() || val_set.is_empty() {
                return fail(format!(
                    "--manifest: {} needs at least one train and one val entry",
                    path.display()
                ));
            }
            (train_set, val_set)
        }
        (None, Some(n)) => synthetic_split(n as usize, a.dims, a.seed)?,
        (None, None) => return fail("one of --manifest or --synthetic is required"),
    };
    let mut net = build_network(&net_cfg, &mut Rng::new(a.seed).fork(1))?;
    println!(
        "training {} parameters on {} images ({} validation) at {} for {} epochs",
        net.parameter_count(),
        train_set.len(),
        val_set.len(),
        fmt_dims(a.dims),
        a.epochs
    );

    create_dir(&a.out)?;
    let mut log = CurveLog::create(&a.out.join(CURVES_FILE))?;
    let curves = train_with_observer(&mut net, &train_set, &val_set, &train_cfg, |r| log.append(r))?;
    save_model_dir(&net, &a.out)?;
    if let Some(last) = curves.final_record() {
        println!(
            "epoch {}: train accuracy {:.6}, val accuracy {:.6}, loss {:.6}",
            last.epoch, last.train_accuracy, last.val_accuracy, last.mean_loss
        );
    }
    println!("saved model to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Rows in the model's curves file, i.e. the epochs it was trained for.
fn trained_epochs(model_dir: &Path) -> usize {
    fs::read_to_string(model_dir.join(CURVES_FILE))
        .map(|s| s.lines().skip(1).filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0)
}

fn load_eval_samples(source: &DataSource, split: SplitArg, dims: (usize, usize), seed: u64) -> Result<Vec<Sample>, Failure> {
    match (&source.manifest, source.synthetic) {
        (Some(path), _) => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let samples = DatasetManifest::read(path)?.load(split, dims)?;
            if samples.is_empty() {
                return fail(format!("--manifest: {} has no {split} entries", path.display()));
            }
            Ok(samples)
        }
        (None, Some(n)) => Ok(synthetic_dataset(n as usize, dims, seed)?),
        (None, None) => fail("one of --manifest or --synthetic is required"),
    }
}

pub fn eval(a: EvalArgs) -> CmdResult {
    require_model_dir(&a.model)?;
    if let Some(m) = &a.source.manifest {
        require_file(m, "--manifest")?;
    }
    if a.batch == 0 {
        return fail("--batch must be at least 1");
    }
    let out = a.out.clone().unwrap_or_else(|| a.model.clone());
    check_out_dir(&out, "--out")?;
    let net = load_model_dir(&a.model)?;
    let (_, h, w) = net.config().input_dims;
    let dims = a.dims.unwrap_or((h, w));
    if dims != (h, w) {
        return fail(format!(
            "input dims {} do not match the model's {}",
            fmt_dims(dims),
            fmt_dims((h, w))
        ));
    }
    let samples = load_eval_samples(&a.source, a.split, dims, a.seed)?;
    let report = evaluate_dataset_metrics(&net, &samples, a.batch)?;
    let row = report.csv_row(trained_epochs(&a.model));
    println!("{REPORT_HEADER}\n{row}");
    create_dir(&out)?;
    let path = out.join(METRICS_FILE);
    fs::write(&path, format!("{REPORT_HEADER}\n{row}\n"))
        .map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(ExitCode::SUCCESS)
}

fn output_stem(image: &Path) -> String {
    image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    require_model_dir(&a.model)?;
    for img in &a.images {
        require_file(img, "image")?;
    }
    if let Some(out) = &a.out {
        check_out_dir(out, "--out")?;
    }
    let net = load_model_dir(&a.model)?;
    let (_, h, w) = net.config().input_dims;

    let mut results = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let bytes = fs::read(path).map_err(|e| Failure(format!("cannot read {}: {e}", path.display())))?;
        let image = decode_rgb(&bytes, &path.display().to_string())?;
        let input = resize_bilinear(&image, (h, w))?;
        results.push((path, segment(&net, &input)?));
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
    }
    for (path, (mask, overlay)) in results {
        let dir = a
            .out
            .clone()
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        let stem = output_stem(path);
        let mask_path = dir.join(format!("{stem}.mask.png"));
        let overlay_path = dir.join(format!("{stem}.overlay.png"));
        save_png(&mask_to_gray(&mask), &mask_path)?;
        save_png(&overlay, &overlay_path)?;
        println!(
            "{}: {} lane pixels of {} -> {}, {}",
            path.display(),
            mask.count_ones(),
            h * w,
            mask_path.display(),
            overlay_path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run_pipeline(transport: &impl Transport, key: &str, net: &Network, a: &FetchArgs) -> CmdResult {
    let opts = PipelineOptions {
        view: ViewParams {
            size: a.size,
            heading: a.heading,
            fov: a.fov,
        },
        cache_dir: a.cache.as_deref(),
    };
    match predict_at_current_location(transport, key, net, &opts)? {
        Outcome::NoImagery { location } => {
            eprintln!(
                "no street-view imagery at {:.6},{:.6}",
                location.lat, location.lng
            );
            Ok(ExitCode::from(EXIT_NO_IMAGERY))
        }
        Outcome::Segmented(seg) => {
            let paths = write_outputs(&seg, &a.out)?;
            println!(
                "location {:.6},{:.6} (accuracy {} m), panorama {}",
                seg.location.lat, seg.location.lng, seg.location.accuracy_m, seg.pano_id
            );
            for p in [&paths.source, &paths.mask, &paths.overlay] {
                println!("wrote {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

pub fn fetch(a: FetchArgs) -> CmdResult {
    require_model_dir(&a.model)?;
    check_out_dir(&a.out, "--out")?;
    ViewParams {
        size: a.size,
        heading: a.heading,
        fov: a.fov,
    }
    .validate()
    .map_err(|e| Failure(e.to_string()))?;
    let key = a.key.clone().filter(|k| !k.is_empty());
    if a.mode.live && key.is_none() {
        return fail("--live needs an API key: pass --key or set LANESEG_API_KEY");
    }
    if let Some(dir) = &a.mode.fixtures {
        if !dir.is_dir() {
            return fail(format!("--fixtures: {} is not a directory", dir.display()));
        }
    }
    let net = load_model_dir(&a.model)?;

    match &a.mode.fixtures {
        Some(dir) => {
            let key = key.as_deref().unwrap_or(OFFLINE_KEY);
            run_pipeline(&FixtureTransport::new(dir), key, &net, &a)
        }
        None => live(key.as_deref().unwrap_or_default(), &net, &a),
    }
}

#[cfg(feature = "live")]
fn live(key: &str, net: &Network, a: &FetchArgs) -> CmdResult {
    use laneseg_geo::{LiveTransport, RecordingTransport};
    let transport = LiveTransport::new();
    match &a.record {
        Some(dir) => run_pipeline(&RecordingTransport::new(transport, dir.clone()), key, net, a),
        None => run_pipeline(&transport, key, net, a),
    }
}

#[cfg(not(feature = "live"))]
fn live(_key: &str, _net: &Network, _a: &FetchArgs) -> CmdResult {
    fail("this build has no live HTTP support; rebuild with the `live` feature")
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    #[cfg(debug_assertions)]
    let perturb = match a.perturb {
        Some(crate::args::PerturbArg::Weights) => Perturb::Weights,
        None => Perturb::None,
    };
    #[cfg(not(debug_assertions))]
    let perturb = {
        let _ = a;
        Perturb::None
    };
    let report = gradcheck::run_suite(perturb)?;
    println!("{:<12} {:>14} {:>8}", "layer", "max_rel_error", "entries");
    for c in &report.checks {
        println!(
            "{:<12} {:>14.3e} {:>8} {}",
            c.layer,
            c.max_rel_error,
            c.entries,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    match report.first_failure() {
        None => {
            println!("all gradients match finite differences (tolerance {:e})", gradcheck::TOLERANCE);
            Ok(ExitCode::SUCCESS)
        }
        Some(c) => fail(format!(
            "gradient check failed for {}: max relative error {:.3e} exceeds {:e}",
            c.layer,
            c.max_rel_error,
            gradcheck::TOLERANCE
        )),
    }
}
