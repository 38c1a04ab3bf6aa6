use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    parse_scene_file, CliError, EvalArgs, ExtractArgs, InferArgs, LabelGenArgs, Result, SynthArgs, TrainArgs,
};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::synth::render_sequence;
use crate::dataset::{
    balance, extract_all, load_sequence, make_labels, read_patch_cache, split_sequence, write_depth_png, write_label_png,
    write_patch_cache, write_rgb_png, Channels, ExtractConfig, LabelFrame, NormStats, Patch, PatchLabel, SplitSpec,
};
use crate::evaluator::{csv_report, evaluate, text_report, ReportRow};
use crate::fusion::{
    append_timing, binarize, infer_frame, render_false_color, render_gray, render_mask, FusionConfig,
};
use crate::model::{init_model, load_model, save_model, InitSchedule};
use crate::trainer::{train_with, TrainError, EPOCH_CSV_HEADER};

pub const TRAIN_CACHE: &str = "train.bin";
pub const TEST_CACHE: &str = "test.bin";
pub const STATS_FILE: &str = "stats.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.bin";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| io_err(&path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found: {}", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found: {}", path.display())))
    }
}

fn label_file_name(id: usize) -> String {
    format!("{id:06}.png")
}

fn validated(cfg: RunConfig, threads: fn(&RunConfig)) -> Result<RunConfig> {
    cfg.validate()?;
    threads(&cfg);
    Ok(cfg)
}

pub fn synth(mut cfg: RunConfig, args: SynthArgs) -> Result<()> {
    require_file(&args.scene, "scene file")?;
    let text = fs::read_to_string(&args.scene).map_err(|e| io_err(&args.scene, e))?;
    let segments = parse_scene_file(&text)
        .map_err(|e| CliError::Config(ConfigError::Invalid(format!("{}: {e}", args.scene.display()))))?;
    let frames = render_sequence(&segments)?;
    cfg.paths.insert("scene".into(), args.scene.clone());
    cfg.paths.insert("out".into(), args.out.clone());

    for sub in ["rgb", "depth", "labels"] {
        create_dir(&args.out.join(sub))?;
    }
    let mut rgb_index = String::from("# color images\n# timestamp filename\n");
    let mut depth_index = String::from("# depth maps\n# timestamp filename\n");
    let names: Vec<String> = frames.iter().map(|f| format!("{:.6}.png", f.frame.timestamp)).collect();
    frames.par_iter().zip(&names).try_for_each(|(f, name)| -> Result<()> {
        write_rgb_png(&f.frame, &args.out.join("rgb").join(name))?;
        write_depth_png(&f.frame, &args.out.join("depth").join(name))?;
        write_label_png(&f.labels, &args.out.join("labels").join(label_file_name(f.frame.id)))?;
        Ok(())
    })?;
    for (f, name) in frames.iter().zip(&names) {
        rgb_index.push_str(&format!("{:.6} rgb/{name}\n", f.frame.timestamp));
        depth_index.push_str(&format!("{:.6} depth/{name}\n", f.frame.timestamp));
    }
    for (file, text) in [("rgb.txt", rgb_index), ("depth.txt", depth_index)] {
        let path = args.out.join(file);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    write_config(&cfg, &args.out)?;
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn labels_for(frames: &[crate::dataset::RgbdFrame], tau: f32) -> Result<Vec<LabelFrame>> {
    Ok(frames.par_iter().map(|f| make_labels(f, tau)).collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn label_gen(mut cfg: RunConfig, args: LabelGenArgs, threads: fn(&RunConfig)) -> Result<()> {
    if let Some(t) = args.tau_depth {
        cfg.dataset.tau_depth = t;
    }
    let out = args.out.clone().unwrap_or_else(|| args.data.join("labels"));
    cfg.paths.insert("data".into(), args.data.clone());
    cfg.paths.insert("out".into(), out.clone());
    let cfg = validated(cfg, threads)?;
    require_dir(&args.data, "dataset directory")?;
    let seq = load_sequence(&args.data)?;
    let labels = labels_for(&seq.frames, cfg.dataset.tau_depth)?;
    create_dir(&out)?;
    labels
        .par_iter()
        .enumerate()
        .try_for_each(|(id, l)| write_label_png(l, &out.join(label_file_name(id))))?;
    write_config(&cfg, &out)?;
    println!("wrote {} label images to {}", labels.len(), out.display());
    Ok(())
}

fn count_positive(patches: &[Patch]) -> usize {
    patches.iter().filter(|p| p.label == PatchLabel::Occlusion).count()
}

pub fn extract(mut cfg: RunConfig, args: ExtractArgs, threads: fn(&RunConfig)) -> Result<()> {
    let d = &mut cfg.dataset;
    if let Some(v) = args.tau_depth {
        d.tau_depth = v;
    }
    if let Some(v) = args.stride {
        d.extract_stride = v;
    }
    if args.test_stride.is_some() {
        d.test_stride = args.test_stride;
    }
    if let Some(v) = args.max_invalid_fraction {
        d.max_invalid_fraction = v;
    }
    if let Some(v) = args.train_fraction {
        d.train_fraction = v;
    }
    if args.split_boundary.is_some() {
        d.split_boundary = args.split_boundary;
    }
    if args.balance.is_some() {
        d.balance = args.balance;
    }
    cfg.paths.insert("data".into(), args.data.clone());
    cfg.paths.insert("out".into(), args.out.clone());
    let cfg = validated(cfg, threads)?;
    require_dir(&args.data, "dataset directory")?;

    let seq = load_sequence(&args.data)?;
    let split = match cfg.dataset.split_boundary {
        Some(b) => SplitSpec::at(b, seq.frames.len())?,
        None => SplitSpec::from_fraction(cfg.dataset.train_fraction, seq.frames.len())?,
    };
    let labels = labels_for(&seq.frames, cfg.dataset.tau_depth)?;
    let (train_frames, test_frames) = split_sequence(&seq.frames, &split)?;
    let (train_labels, test_labels) = split_sequence(&labels, &split)?;
    let train_cfg = cfg.extract_config();
    let test_cfg = ExtractConfig {
        stride: cfg.dataset.test_stride.unwrap_or(train_cfg.stride),
        ..train_cfg
    };
    let mut train = extract_all(train_frames, train_labels, &train_cfg)?;
    if let Some(ratio) = cfg.dataset.balance {
        train = balance(train, ratio, cfg.seed);
    }
    let mut test = extract_all(test_frames, test_labels, &test_cfg)?;
    if test.is_empty() {
        return Err(CliError::Data("test split yields no patches".into()));
    }
    let stats = NormStats::compute(&train)?;
    stats.normalize(&mut train)?;
    stats.normalize(&mut test)?;

    create_dir(&args.out)?;
    write_patch_cache(&args.out.join(TRAIN_CACHE), &train)?;
    write_patch_cache(&args.out.join(TEST_CACHE), &test)?;
    stats.save(&args.out.join(STATS_FILE))?;
    write_config(&cfg, &args.out)?;
    println!(
        "frames {} (train {}, test {}); train patches {} ({} occlusion); test patches {} ({} occlusion)",
        seq.frames.len(),
        train_frames.len(),
        test_frames.len(),
        train.len(),
        count_positive(&train),
        test.len(),
        count_positive(&test)
    );
    Ok(())
}

fn load_cache(dir: &Path, name: &str, channels: usize) -> Result<Vec<Patch>> {
    let path = dir.join(name);
    require_file(&path, "patch cache")?;
    let patches = read_patch_cache(&path)?;
    Ok(patches
        .iter()
        .map(|p| p.select_channels(channels))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

fn load_stats(path: &Path, channels: usize) -> Result<NormStats> {
    require_file(path, "normalization stats")?;
    let mut stats = NormStats::load(path)?;
    if stats.channels() < channels {
        return Err(CliError::Data(format!(
            "{} has {} channels, model needs {channels}",
            path.display(),
            stats.channels()
        )));
    }
    stats.means.truncate(channels);
    Ok(stats)
}

pub fn train(mut cfg: RunConfig, args: TrainArgs, threads: fn(&RunConfig)) -> Result<()> {
    if let Some(c) = args.channels {
        cfg.train.channels = c;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.eval_subsample.is_some() {
        cfg.train.eval_subsample = args.eval_subsample;
    }
    if args.checkpoint_every.is_some() {
        cfg.checkpoint_every = args.checkpoint_every;
    }
    cfg.paths.insert("patches".into(), args.patches.clone());
    cfg.paths.insert("out".into(), args.out.clone());
    let cfg = validated(cfg, threads)?;
    let channels = cfg.train.channels.count();
    let train = load_cache(&args.patches, TRAIN_CACHE, channels)?;
    let test = load_cache(&args.patches, TEST_CACHE, channels)?;
    let stats = load_stats(&args.patches.join(STATS_FILE), channels)?;

    create_dir(&args.out)?;
    let csv_path = args.out.join("epochs.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    writeln!(csv, "{EPOCH_CSV_HEADER}").map_err(|e| io_err(&csv_path, e))?;
    let mut model = init_model(channels, &InitSchedule::default(), cfg.seed)?;
    let out = args.out.clone();
    let every = cfg.checkpoint_every;
    train_with(&mut model, &train, &test, &cfg.train, |record, model| {
        let wrap = |e: std::io::Error| TrainError::Io {
            path: csv_path.display().to_string(),
            source: e,
        };
        writeln!(csv, "{}", record.csv_row()).map_err(wrap)?;
        csv.flush().map_err(wrap)?;
        if every.is_some_and(|n| record.epoch % n == 0) {
            save_model(model, &out.join(format!("checkpoint-{:03}.bin", record.epoch)))?;
        }
        Ok(())
    })?;
    save_model(&model, &args.out.join(MODEL_FILE))?;
    stats.save(&args.out.join(STATS_FILE))?;
    write_config(&cfg, &args.out)?;
    println!("saved {}", args.out.join(MODEL_FILE).display());
    Ok(())
}

pub fn eval(mut cfg: RunConfig, args: EvalArgs, threads: fn(&RunConfig)) -> Result<()> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.model.parent().map(Path::to_path_buf).unwrap_or_default());
    cfg.paths.insert("model".into(), args.model.clone());
    cfg.paths.insert("patches".into(), args.patches.clone());
    cfg.paths.insert("out".into(), out.clone());
    let cfg = validated(cfg, threads)?;
    let model = load_model(&args.model)?;
    let test = load_cache(&args.patches, TEST_CACHE, model.channels())?;
    let counts = evaluate(&model, &test)?;
    let name = args.name.unwrap_or_else(|| {
        Channels::from_count(model.channels()).map_or_else(|| format!("{}ch", model.channels()), |c| c.to_string())
    });
    let rows = [ReportRow { name, counts }];
    let text = text_report(&rows);
    create_dir(&out)?;
    for (file, body) in [("report.txt", text.clone()), ("report.csv", csv_report(&rows))] {
        let path = out.join(file);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    write_config(&cfg, &out)?;
    print!("{text}");
    Ok(())
}

pub fn infer(mut cfg: RunConfig, args: InferArgs, threads: fn(&RunConfig)) -> Result<()> {
    if !args.strides.is_empty() {
        cfg.infer.strides = args.strides.clone();
    }
    if let Some(v) = args.fwhm {
        cfg.fusion.fwhm = v;
    }
    if let Some(v) = args.threshold {
        cfg.infer.threshold = v;
    }
    if let Some(m) = args.mode {
        cfg.fusion.mode = m;
    }
    let stats_path: PathBuf = args.stats.clone().unwrap_or_else(|| {
        args.model.parent().map(Path::to_path_buf).unwrap_or_default().join(STATS_FILE)
    });
    cfg.paths.insert("model".into(), args.model.clone());
    cfg.paths.insert("data".into(), args.data.clone());
    cfg.paths.insert("stats".into(), stats_path.clone());
    cfg.paths.insert("out".into(), args.out.clone());
    let cfg = validated(cfg, threads)?;
    let model = load_model(&args.model)?;
    let stats = load_stats(&stats_path, model.channels())?;
    require_dir(&args.data, "dataset directory")?;
    let seq = load_sequence(&args.data)?;
    let ids: Vec<usize> = if args.frames.is_empty() {
        (0..seq.frames.len()).collect()
    } else {
        args.frames.clone()
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= seq.frames.len()) {
        return Err(CliError::Data(format!("frame {bad} out of range (sequence has {})", seq.frames.len())));
    }

    create_dir(&args.out)?;
    let timing_path = args.out.join("timing.jsonl");
    fs::write(&timing_path, "").map_err(|e| io_err(&timing_path, e))?;
    for &id in &ids {
        let frame = &seq.frames[id];
        for &stride in &cfg.infer.strides {
            let fusion = FusionConfig {
                sweep_stride: stride,
                ..cfg.fusion
            };
            let (heatmap, timing) = infer_frame(&model, frame, Some(&stats), &fusion)?;
            let stem = format!("{id:06}_s{stride}");
            render_gray(&heatmap, &args.out.join(format!("heatmap_{stem}.png")))?;
            render_false_color(&heatmap, &args.out.join(format!("color_{stem}.png")))?;
            let mask = binarize(&heatmap, cfg.infer.threshold)?;
            render_mask(&mask, heatmap.width, heatmap.height, &args.out.join(format!("mask_{stem}.png")))?;
            append_timing(&timing_path, &timing)?;
            println!(
                "frame {id} stride {stride}: {} patches in {:.2}s",
                timing.patches, timing.wall_time
            );
        }
    }
    write_config(&cfg, &args.out)?;
    Ok(())
}
