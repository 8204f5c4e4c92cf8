use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use bccseg_core::data::{
    self, decode_gray, encode_mask, encode_rgb, load_dataset, load_mask, load_rgb, resize_rgb, Dataset, ImageRecord,
    RgbImage, Split, SynthConfig,
};
use bccseg_core::eval::{evaluate, score, EvalOptions, EvalOutput, ScoredImage};
use bccseg_core::mask::BinaryMask;
use bccseg_core::metrics::{exceeds_fraction, CurveKind, CurveSeries};
use bccseg_core::model::{Mode, Model, ModelConfig, OUTPUT_STRIDE};
use bccseg_core::opcount::count_ops;
use bccseg_core::tensor::{bilinear_resize, Tensor};
use bccseg_core::train::{fit_with, load_checkpoint, optimizer_for, TrainConfig};

use crate::args::{EvalArgs, MetricsArgs, ModelArgs, OpsArgs, PredictArgs, SplitArg, SynthArgs, TrainArgs};
use crate::{Classify, CmdResult, Failure};

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

/// The directory that will hold `path` must already exist.
fn check_output(path: &Path) -> CmdResult {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(usage(format!("output directory {} does not exist", parent.display())));
    }
    if path.is_dir() {
        return Err(usage(format!("{} is a directory", path.display())));
    }
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> CmdResult {
    if !(0.0..1.0).contains(&v) {
        return Err(usage(format!("--{name} must be in [0, 1), got {v}")));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

impl ModelArgs {
    fn is_empty(&self) -> bool {
        self.model_config.is_none()
            && self.stem_channels.is_none()
            && self.block_channels.is_none()
            && self.middle_blocks.is_none()
            && self.aspp_channels.is_none()
            && self.aspp_rates.is_none()
    }

    fn resolve(&self, seed: u64) -> CmdResult<ModelConfig> {
        let mut config = match &self.model_config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .usage()?;
                ModelConfig::from_json(&text)
                    .with_context(|| path.display().to_string())
                    .usage()?
            }
            None => ModelConfig::default(),
        };
        if let Some(v) = self.stem_channels {
            config.stem_channels = v;
        }
        if let Some(v) = &self.block_channels {
            config.block_channels = v.clone();
        }
        if let Some(v) = self.middle_blocks {
            config.middle_blocks = v;
        }
        if let Some(v) = self.aspp_channels {
            config.aspp_channels = v;
        }
        if let Some(v) = &self.aspp_rates {
            config.aspp_rates = v
                .as_slice()
                .try_into()
                .map_err(|_| usage(format!("--aspp-rates needs exactly 3 values, got {}", v.len())))?;
        }
        config.seed = seed;
        config.validate().usage()?;
        Ok(config)
    }
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let config = SynthConfig {
        count: a.count,
        positive_fraction: a.positive_fraction,
        width: a.width,
        height: a.height,
        seed: a.seed,
        train_fraction: a.train_fraction,
    };
    config.validate().usage()?;
    if a.out.is_file() {
        return Err(usage(format!("{} is a file", a.out.display())));
    }
    let ds = data::synth_generate(&a.out, &config).runtime()?;
    let positives = ds.records.iter().filter(|r| r.label).count();
    println!(
        "wrote {} images ({} positive, {} train, {} test) to {}",
        ds.len(),
        positives,
        ds.split(Split::Train).count(),
        ds.split(Split::Test).count(),
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path) -> CmdResult<Dataset> {
    load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .usage()
}

pub fn train(a: TrainArgs) -> CmdResult {
    let class_weights = match &a.class_weights {
        None => None,
        Some(w) if w.len() == 2 => Some([w[0], w[1]]),
        Some(w) => return Err(usage(format!("--class-weights needs 2 values, got {}", w.len()))),
    };
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("train_log.csv"));
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        class_weights,
        seed: a.seed,
        checkpoint_path: Some(a.checkpoint.clone()),
        log_every: 1,
    };
    config.validate().usage()?;
    check_output(&a.checkpoint)?;
    check_output(&log_path)?;

    let (mut model, mut state) = if a.resume {
        if !a.model.is_empty() {
            return Err(usage("--resume takes the architecture from the checkpoint; drop the model flags"));
        }
        let (model, mut state) = load_checkpoint(&a.checkpoint)
            .with_context(|| format!("loading {}", a.checkpoint.display()))
            .usage()?;
        state.lr = a.lr;
        (model, state)
    } else {
        let model = Model::build(a.model.resolve(a.seed)?).usage()?;
        let state = optimizer_for(&model, a.lr).usage()?;
        (model, state)
    };

    let ds = load_data(&a.data)?;
    let records: Vec<&ImageRecord> = ds.split(Split::Train).collect();
    let first = records
        .first()
        .ok_or_else(|| usage(format!("{} has no train records", a.data.display())))?;
    if let Some(r) = records.iter().find(|r| (r.width(), r.height()) != (first.width(), first.height())) {
        return Err(usage(format!(
            "{} is {}x{} but {} is {}x{}; training images must share one size",
            r.id,
            r.width(),
            r.height(),
            first.id,
            first.width(),
            first.height()
        )));
    }
    model
        .check_input([1, 3, first.height(), first.width()].into())
        .with_context(|| format!("image {}", first.id))
        .usage()?;

    let log_file = File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .runtime()?;
    let mut log = BufWriter::new(log_file);
    let mut log_error = writeln!(log, "step,epoch,loss,pixel_acc").err();
    let steps_per_epoch = records.len().div_ceil(config.batch_size);
    let report = fit_with(&mut model, &records, &config, &mut state, |s| {
        if log_error.is_none() {
            log_error = writeln!(log, "{},{},{:.6},{:.6}", s.step, s.epoch, s.loss, s.pixel_acc).err();
        }
        if s.step % steps_per_epoch == 0 {
            eprintln!("epoch {}/{} step {} loss {:.6}", s.epoch, config.epochs, s.step, s.loss);
        }
    })
    .runtime()?;
    if let Some(e) = log_error {
        return Err(Failure::Runtime(anyhow!(e).context(format!("writing {}", log_path.display()))));
    }
    log.flush()
        .with_context(|| format!("writing {}", log_path.display()))
        .runtime()?;
    for e in &report.epochs {
        println!(
            "epoch {:>3} loss {:.6} pixel_acc {:.4} time {:.1}s",
            e.epoch, e.loss, e.pixel_accuracy, e.seconds
        );
    }
    println!("checkpoint {}  log {}", a.checkpoint.display(), log_path.display());
    Ok(())
}

fn load_model(path: &Path) -> CmdResult<Model> {
    let (mut model, _) = load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .usage()?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

/// Nearest positive multiple of the output stride.
fn stride_multiple(v: usize) -> usize {
    ((v + OUTPUT_STRIDE / 2) / OUTPUT_STRIDE).max(1) * OUTPUT_STRIDE
}

/// Tumor probability at the image's own resolution.
fn predict_prob(model: &Model, image: &RgbImage) -> CmdResult<Tensor<f32>> {
    let (h, w) = (stride_multiple(image.height), stride_multiple(image.width));
    let scaled;
    let input = if (h, w) == (image.height, image.width) {
        image
    } else {
        scaled = resize_rgb(image, h, w).runtime()?;
        &scaled
    };
    let (prob, _) = model.predict_mask(&data::normalize(input)).runtime()?.remove(0);
    let prob = Tensor::from_vec([1, 1, h, w], prob.data).runtime()?;
    if (h, w) == (image.height, image.width) {
        Ok(prob)
    } else {
        bilinear_resize(&prob, image.height, image.width).runtime()
    }
}

pub fn predict(a: PredictArgs) -> CmdResult {
    if let Some(t) = a.prob_threshold {
        check_fraction("prob-threshold", t)?;
    }
    check_fraction("threshold-fraction", a.threshold_fraction)?;
    check_output(&a.mask_out)?;
    if let Some(p) = &a.overlay_out {
        check_output(p)?;
    }
    let model = load_model(&a.checkpoint)?;
    let image = load_rgb(&a.input).usage()?;
    if image.width == 0 || image.height == 0 {
        return Err(usage(format!("{} is empty", a.input.display())));
    }

    let prob = predict_prob(&model, &image)?;
    let cut = a.prob_threshold.unwrap_or(0.5) as f32;
    let mask = BinaryMask::from_fn(image.width, image.height, |x, y| prob.at(0, 0, y, x) > cut);
    write_file(&a.mask_out, encode_mask(&mask))?;
    if let Some(path) = &a.overlay_out {
        let mut overlay = image.clone();
        for y in 0..image.height {
            for x in 0..image.width {
                if mask.get(x, y) {
                    let [r, g, b] = image.pixel(x, y);
                    let blend = |v: u8, tint: u8| (v as u16 + tint as u16).div_ceil(2) as u8;
                    overlay.put(x, y, [blend(r, 255), blend(g, 0), blend(b, 0)]);
                }
            }
        }
        write_file(path, encode_rgb(&overlay))?;
    }
    let count = mask.count_positive() as u64;
    let total = mask.len() as u64;
    let verdict = if exceeds_fraction(count, total, a.threshold_fraction) {
        "positive"
    } else {
        "negative"
    };
    println!(
        "{verdict}: {count}/{total} tumor pixels ({:.3}%)",
        100.0 * count as f64 / total as f64
    );
    Ok(())
}

fn curve_csv(curve: &Option<CurveSeries>, kind: CurveKind) -> String {
    match curve {
        Some(c) => c.to_csv(),
        None => CurveSeries {
            kind,
            points: Vec::new(),
            auc: f64::NAN,
        }
        .to_csv(),
    }
}

fn write_outputs(out: &EvalOutput, report: &Path, roc: Option<&Path>, pr: Option<&Path>) -> CmdResult {
    let json = serde_json::to_string_pretty(&out.summary).runtime()?;
    write_file(report, json + "\n")?;
    if let Some(p) = roc {
        write_file(p, curve_csv(&out.roc, CurveKind::Roc))?;
    }
    if let Some(p) = pr {
        write_file(p, curve_csv(&out.pr, CurveKind::Pr))?;
    }
    let s = &out.summary;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mean IOU {:.4} (background {:.4}, tumor {:.4})",
        s.mean_iou, s.iou_background, s.iou_tumor
    );
    println!("ROC AUC {}  PR AUC {}", opt(s.roc_auc), opt(s.pr_auc));
    println!(
        "slide accuracy {:.4}  sensitivity {}  specificity {}  ({} images)",
        s.slide_accuracy,
        opt(s.slide_sensitivity),
        opt(s.slide_specificity),
        s.n_test_images
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let options = EvalOptions {
        threshold_fraction: a.threshold_fraction,
        threads: NonZeroUsize::new(a.threads).ok_or_else(|| usage("--threads must be at least 1"))?,
        prob_threshold: a.prob_threshold,
    };
    options.validate().usage()?;
    for p in [&a.report, &a.roc, &a.pr] {
        check_output(p)?;
    }
    let model = load_model(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let records: Vec<&ImageRecord> = match a.split {
        SplitArg::Train => ds.split(Split::Train).collect(),
        SplitArg::Test => ds.split(Split::Test).collect(),
        SplitArg::All => ds.records.iter().collect(),
    };
    if records.is_empty() {
        return Err(usage(format!("{} has no records in the {:?} split", a.data.display(), a.split)));
    }
    for r in &records {
        model
            .check_input([1, 3, r.height(), r.width()].into())
            .with_context(|| format!("image {}", r.id))
            .usage()?;
    }
    let out = evaluate(&model, &records, &options).runtime()?;
    write_outputs(&out, &a.report, Some(&a.roc), Some(&a.pr))
}

fn png_files(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .usage()?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.with_context(|| format!("reading {}", dir.display())).usage()?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn metrics(a: MetricsArgs) -> CmdResult {
    check_fraction("threshold-fraction", a.threshold_fraction)?;
    check_output(&a.report)?;
    for p in [&a.roc, &a.pr].into_iter().flatten() {
        check_output(p)?;
    }
    let gt_files = png_files(&a.gt_dir)?;
    if gt_files.is_empty() {
        return Err(usage(format!("no PNG masks in {}", a.gt_dir.display())));
    }
    let mut images = Vec::with_capacity(gt_files.len());
    for gt_path in gt_files {
        let name = gt_path.file_name().expect("listed file");
        let pred_path = a.pred_dir.join(name);
        let truth = load_mask(&gt_path).usage()?;
        let bytes = fs::read(&pred_path)
            .with_context(|| format!("missing prediction {}", pred_path.display()))
            .usage()?;
        let (w, h, gray) = decode_gray(&bytes)
            .map_err(|e| anyhow!("{}: {e}", pred_path.display()))
            .usage()?;
        if (w, h) != (truth.width(), truth.height()) {
            return Err(usage(format!(
                "{} is {w}x{h} but {} is {}x{}",
                pred_path.display(),
                gt_path.display(),
                truth.width(),
                truth.height()
            )));
        }
        let pred = BinaryMask::from_fn(w, h, |x, y| gray[y * w + x] >= 128);
        images.push(ScoredImage {
            id: Path::new(name).file_stem().unwrap_or(name).to_string_lossy().into_owned(),
            scores: gray.iter().map(|&v| v as f64 / 255.0).collect(),
            pred,
            truth,
        });
    }
    let out = score(&images, a.threshold_fraction).runtime()?;
    write_outputs(&out, &a.report, a.roc.as_deref(), a.pr.as_deref())
}

pub fn ops(a: OpsArgs) -> CmdResult {
    let config = a.model.resolve(ModelConfig::default().seed)?;
    if let Some(p) = &a.json {
        check_output(p)?;
    }
    let report = count_ops(&config, a.height, a.width).usage()?;
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        let json = serde_json::to_string_pretty(&report).runtime()?;
        write_file(p, json + "\n")?;
    }
    Ok(())
}
