use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use vpa_core::augment::{generate, AugmentParams};
use vpa_core::io::{
    read_checkpoint, read_labels, read_volume, write_checkpoint, write_labels, write_nifti, write_nifti_with_header,
    Checkpoint, NiftiDatatype, NiftiHeader, TemplateGrid, TrainingState,
};
use vpa_core::phantom::{make_evaluation_subject, make_phantom, PhantomSpec};
use vpa_core::postprocess::{class_dice, finalize, foreground_dice};
use vpa_core::segment::predict;
use vpa_core::train::{logs_to_csv, run_training, AblationArm, TrainSchedule, TrainingJob, CSV_HEADER};
use vpa_core::volume::mse_split;
use vpa_core::{LabelVolume, UNetConfig, Volume};

use crate::config::{PairPaths, RunConfig};
use crate::render;

/// Samples generated (and held in memory) at a time by `augment`.
const AUGMENT_CHUNK: usize = 16;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn read_pair(pair: &PairPaths) -> Result<(Volume, LabelVolume)> {
    let (v, _) = read_volume(&pair.image).with_context(|| format!("reading image {}", pair.image.display()))?;
    let (l, _) = read_labels(&pair.label).with_context(|| format!("reading label {}", pair.label.display()))?;
    if v.dims() != l.dims() {
        bail!(
            "{} is {:?} but {} is {:?}",
            pair.image.display(),
            v.dims(),
            pair.label.display(),
            l.dims()
        );
    }
    Ok((v, l))
}

/// Parses `N` or `X,Y,Z`.
pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected N or X,Y,Z, got {s:?}")),
    }
}

pub struct PhantomArgs {
    pub out: PathBuf,
    pub dims: Option<[usize; 3]>,
    pub variant_b: bool,
    pub seed: Option<u64>,
    pub perturb_seed: u64,
}

/// Writes template, template label, evaluation subject and its label, plus
/// `phantom.json` (the phantom parameters) and a starter `config.json`.
pub fn phantom(args: &PhantomArgs) -> Result<()> {
    let mut spec = if args.variant_b {
        PhantomSpec::variant_b()
    } else {
        PhantomSpec::default()
    };
    if let Some(d) = args.dims {
        spec.dims = d;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let (t, tl) = make_phantom(&spec)?;
    let (s, sl) = make_evaluation_subject(&spec, args.perturb_seed)?;
    let out = &args.out;
    create_dir(out)?;
    for (name, v, l) in [("template", &t, &tl), ("subject", &s, &sl)] {
        let path = out.join(format!("{name}.nii"));
        write_nifti(v.dims(), v.spacing(), v.data(), &path, NiftiDatatype::Float32)?;
        write_labels(l, v.spacing(), out.join(format!("{name}_label.nii")))?;
    }
    let record = json!({ "spec": spec, "perturb_seed": args.perturb_seed });
    write_text(
        &out.join("phantom.json"),
        &(serde_json::to_string_pretty(&record)? + "\n"),
    )?;
    let starter = json!({
        "template": { "image": "template.nii", "label": "template_label.nii" },
        "eval": { "image": "subject.nii", "label": "subject_label.nii" },
        "unet": UNetConfig::desk(),
        "augment": { "mode": "standard" },
        "schedule": TrainSchedule::desk(),
        "seed": spec.seed,
        "output_dir": "run"
    });
    write_text(
        &out.join("config.json"),
        &(serde_json::to_string_pretty(&starter)? + "\n"),
    )?;
    println!("wrote phantom {:?} to {}", spec.dims, out.display());
    Ok(())
}

/// Config with command-line overrides applied.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    Ok(cfg.resolved()?)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (template, label) = read_pair(&cfg.template)?;
    let eval = cfg.eval.as_ref().map(read_pair).transpose()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    cfg.write_resolved(out)?;

    let log_path = out.join("log.csv");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{CSV_HEADER}")?;
    let job = TrainingJob {
        template: &template,
        label: &label,
        unet: cfg.unet,
        augment: cfg.augment.config()?,
        schedule: cfg.schedule.clone(),
        master_seed: cfg.seed,
        eval: eval.as_ref().map(|(v, l)| (v, l)),
        checkpoint_dir: Some(out.clone()),
    };
    let total = cfg.schedule.total_epochs();
    let outcome = job.run_with(&mut |e| {
        writeln!(log, "{}", e.csv_row()).map_err(|err| vpa_core::Error::io(&log_path, err))?;
        if e.epoch % 50 == 0 || e.epoch == total {
            eprintln!(
                "epoch {}/{}: train {:.4e}, template fg {:.4e}",
                e.epoch,
                total,
                e.train_mse,
                e.template_error.foreground_mse.unwrap_or(f64::NAN)
            );
        }
        Ok(())
    })?;
    log.flush()?;

    let ckpt = Checkpoint {
        model: outcome.model,
        template_grid: Some(TemplateGrid {
            dims: template.dims(),
            spacing: template.spacing(),
        }),
        training: Some(TrainingState {
            epoch: total as u64,
            adam: outcome.adam,
        }),
    };
    let path = out.join("model.ckpt");
    write_checkpoint(&ckpt, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Writes `count` pairs as `aug_NNNN_image.nii` / `aug_NNNN_label.nii`, their
/// parameters in `params.json` and, when `count > 0`, `montage.png`.
pub fn augment(cfg: &RunConfig, count: usize) -> Result<()> {
    let (template, label) = read_pair(&cfg.template)?;
    let aug = cfg.augment.config()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut slices: Vec<(Volume, LabelVolume)> = Vec::with_capacity(count);
    let mut records: Vec<(u64, AugmentParams)> = Vec::with_capacity(count);
    let mut first = 0;
    while first < count {
        let n = AUGMENT_CHUNK.min(count - first);
        for (k, s) in generate(&template, &label, &aug, cfg.seed, first as u64, n)?
            .into_iter()
            .enumerate()
        {
            let i = first + k;
            let spacing = s.image.spacing();
            let img_path = out.join(format!("aug_{i:04}_image.nii"));
            write_nifti(
                s.image.dims(),
                spacing,
                s.image.data(),
                &img_path,
                NiftiDatatype::Float32,
            )?;
            write_labels(&s.label, spacing, out.join(format!("aug_{i:04}_label.nii")))?;
            slices.push(central_slab(&s.image, &s.label)?);
            records.push((s.seed, s.params));
        }
        first += n;
    }
    let params: Vec<_> = records
        .iter()
        .enumerate()
        .map(|(i, (seed, p))| json!({ "index": i, "seed": seed, "params": p }))
        .collect();
    write_text(
        &out.join("params.json"),
        &(serde_json::to_string_pretty(&params)? + "\n"),
    )?;
    let refs: Vec<_> = slices.iter().map(|(v, l)| (v, l)).collect();
    if let Some(img) = render::montage(&refs) {
        save_png(&img, &out.join("montage.png"))?;
    }
    println!("wrote {count} augmented pairs to {}", out.display());
    Ok(())
}

/// The central axial slice as a one-slice volume, so the montage does not
/// need every full sample in memory.
fn central_slab(v: &Volume, l: &LabelVolume) -> Result<(Volume, LabelVolume)> {
    let [nx, ny, nz] = v.dims();
    let z = nz / 2;
    let range = z * nx * ny..(z + 1) * nx * ny;
    let slab = Volume::new([nx, ny, 1], v.spacing(), v.data()[range.clone()].to_vec())?;
    let lab = LabelVolume::new([nx, ny, 1], l.labels()[range].to_vec())?;
    Ok((slab, lab))
}

fn dice_map(auto: &LabelVolume, truth: &LabelVolume, classes: usize) -> BTreeMap<String, f64> {
    (1..=classes as u8)
        .map(|c| (c.to_string(), class_dice(auto, truth, c)))
        .collect()
}

/// Reads a label volume and brings it onto `grid` (nearest neighbour) with a
/// warning when the dimensions differ.
fn label_on_grid(path: &Path, image: &Volume) -> Result<LabelVolume> {
    let (l, header) = read_labels(path).with_context(|| format!("reading label {}", path.display()))?;
    if l.dims() == image.dims() {
        return Ok(l);
    }
    eprintln!(
        "warning: label {} is {:?}, image is {:?}; resampling the label (nearest neighbour)",
        path.display(),
        l.dims(),
        image.dims()
    );
    let (ls, is) = (header.spacing(), image.spacing());
    let scale = [0, 1, 2].map(|a| is[a] as f64 / ls[a] as f64);
    Ok(l.resample_nearest(image.dims(), scale)?)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_image(path: &Path) -> Result<(Volume, NiftiHeader)> {
    read_volume(path).with_context(|| format!("reading image {}", path.display()))
}

pub struct SegmentArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes `skull_stripped.nii`, `label.nii` and `prob_K.nii` (K = 1..) on
/// the input grid with the input's header; prints Dice when a reference
/// label is given.
pub fn segment(args: &SegmentArgs) -> Result<()> {
    let ckpt = load_model(&args.checkpoint)?;
    let (image, header) = load_image(&args.image)?;
    let (input, output) = predict(&ckpt.model, ckpt.template_grid, &image)?;
    let result = finalize(&input, &output)?;
    let out = &args.out;
    create_dir(out)?;
    let (dims, spacing) = (image.dims(), image.spacing());
    let f32_out = |values: &[f32], name: &str| {
        write_nifti_with_header(dims, spacing, values, &header, out.join(name), NiftiDatatype::Float32)
    };
    f32_out(result.skull_stripped.data(), "skull_stripped.nii")?;
    let labels: Vec<f32> = result.label.labels().iter().map(|&l| l as f32).collect();
    write_nifti_with_header(
        dims,
        spacing,
        &labels,
        &header,
        out.join("label.nii"),
        NiftiDatatype::Uint8,
    )?;
    for c in 0..result.prob_maps.channels {
        f32_out(result.prob_maps.channel(c), &format!("prob_{}.nii", c + 1))?;
    }
    eprintln!("brain mask: {} voxels", result.brain_mask.count());
    if let Some(path) = &args.label {
        let truth = label_on_grid(path, &image)?;
        let k = result.prob_maps.channels;
        let line = json!({
            "dice": dice_map(&result.label, &truth, k),
            "foreground_dice": foreground_dice(&result.label, &truth),
        });
        println!("{line}");
    }
    Ok(())
}

/// One JSON line: error split against the label and per-class Dice.
pub fn evaluate(checkpoint: &Path, image: &Path, label: &Path) -> Result<serde_json::Value> {
    let ckpt = load_model(checkpoint)?;
    let (img, _) = load_image(image)?;
    let truth = label_on_grid(label, &img)?;
    let (input, output) = predict(&ckpt.model, ckpt.template_grid, &img)?;
    let split = mse_split(&output, &truth, &truth)?;
    let result = finalize(&input, &output)?;
    Ok(json!({
        "foreground_mse": split.foreground_mse,
        "background_mse": split.background_mse,
        "total_mse": split.total_mse,
        "foreground_voxels": split.foreground_voxels,
        "background_voxels": split.background_voxels,
        "dice": dice_map(&result.label, &truth, output.channels),
        "foreground_dice": foreground_dice(&result.label, &truth),
    }))
}

/// Trains one model per arm; writes `ablation_<arm>.csv` as each arm
/// finishes and `ablation.png` at the end.
pub fn ablate(cfg: &RunConfig, arms: &[AblationArm]) -> Result<()> {
    if arms.is_empty() {
        bail!("no ablation arms selected");
    }
    let (template, label) = read_pair(&cfg.template)?;
    let eval = cfg.eval.as_ref().map(read_pair).transpose()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let mut all = Vec::with_capacity(arms.len());
    for arm in arms {
        eprintln!("arm {}", arm.name);
        let run = run_training(
            &template,
            &label,
            cfg.unet,
            &arm.config,
            &cfg.ablation.schedule,
            cfg.seed,
            eval.as_ref().map(|(v, l)| (v, l)),
        )?;
        write_text(&out.join(format!("ablation_{}.csv", arm.name)), &logs_to_csv(&run.logs))?;
        all.push(run.logs);
    }
    let runs: Vec<&[_]> = all.iter().map(|l| l.as_slice()).collect();
    save_png(&render::error_curves(&runs), &out.join("ablation.png"))?;
    println!("wrote {} arms to {}", arms.len(), out.display());
    Ok(())
}
