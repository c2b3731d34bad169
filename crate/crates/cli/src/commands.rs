use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bracketflow::dit::train::mix_seed;
use bracketflow::dit::{sample, Example, SampleSeeds, Trainer};
use bracketflow::fusion::reconstruct;
use bracketflow::io::{self, checkpoint, read_pfm, read_ppm, write_pfm, write_ppm16, RunConfig};
use bracketflow::linear_image::{
    bracket_decompose, normalize, radiance_scale_stats, tonemap_display, BracketSet, LinearImage, RadianceMap,
    RgbImage, SensorMeta,
};
use bracketflow::metrics::EvalReport;
use bracketflow::scene::{parse_prompt, Dataset};
use bracketflow::{Error, Result};

use crate::{Command, ConfigArgs};

const MANIFEST: &str = "manifest.txt";
const DISPLAY_GAMMA: f64 = bracketflow::linear_image::DISPLAY_GAMMA;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_evs(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad EV '{v}'")))
        })
        .collect()
}

fn read_frame(path: &Path) -> Result<RgbImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_pfm(path),
        _ => read_ppm(path),
    }
}

fn write_preview(path: &Path, image: &RgbImage) -> Result<()> {
    write_ppm16(path, &tonemap_display(image, DISPLAY_GAMMA)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    Ok(std::fs::create_dir_all(dir)?)
}

fn bracket_name(k: usize, ev: f64) -> String {
    format!("bracket_{k}_ev{ev}.ppm")
}

pub fn run(command: Command, invocation: &str) -> Result<()> {
    match command {
        Command::SynthData { cfg, out, count, seed } => synth_data(&load_config(&cfg)?, &out, count, seed, invocation),
        Command::Train {
            cfg,
            out,
            seed,
            data,
            resume,
            max_steps,
        } => train(&cfg, &out, seed, data.as_deref(), resume.as_deref(), max_steps, invocation),
        Command::Generate {
            checkpoint,
            prompt,
            seed,
            steps,
            out,
            preview,
            brackets_dir,
        } => generate(&checkpoint, &prompt, seed, steps, &out, preview.as_deref(), brackets_dir.as_deref(), invocation),
        Command::Fuse {
            cfg,
            frames,
            ev,
            out,
            preview,
        } => fuse(&load_config(&cfg)?, &frames, &ev, &out, preview.as_deref(), invocation),
        Command::Brackets { input, ev, out_dir } => brackets(&input, &ev, &out_dir),
        Command::Tonemap {
            input,
            out,
            gamma,
            exposure,
        } => {
            let img = read_pfm(&input)?;
            let gain = exposure.exp2();
            write_ppm16(&out, &tonemap_display(&img.map(|v| v * gain)?, gamma)?)
        }
        Command::Eval {
            checkpoint,
            count,
            steps,
            seed,
            out,
        } => eval(&checkpoint, count, steps, seed, &out, invocation),
        Command::Radscale {
            input,
            exposure_time,
            iso,
            f_number,
            ev_comp,
            out,
        } => radscale(&input, exposure_time, iso, f_number, ev_comp, out.as_deref()),
    }
}

fn synth_data(cfg: &RunConfig, out: &Path, count: Option<usize>, seed: Option<u64>, invocation: &str) -> Result<()> {
    create_dir(out)?;
    let n = count.unwrap_or(cfg.data.train);
    let seed = seed.unwrap_or(cfg.data.seed);
    let scene = cfg.scene();
    let mut manifest = String::from("# id log_radiance caption image\n");
    for record in bracketflow::scene::dataset_iter(n, seed, &scene)? {
        let r = record?;
        let name = format!("scene_{:05}.pfm", r.id);
        write_pfm(out.join(&name), r.image.image())?;
        let caption = r.caption.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        writeln!(manifest, "{} {} {caption} {name}", r.id, r.log_radiance).expect("string write");
    }
    let path = out.join(MANIFEST);
    std::fs::write(&path, manifest)?;
    io::write_echo(&path, cfg, invocation)
}

struct ManifestEntry {
    log_radiance: f64,
    caption: Vec<usize>,
    image: PathBuf,
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let bad = |n: usize| Error::Format {
        kind: "manifest",
        msg: format!("line {n}"),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(n + 1));
            }
            Ok(ManifestEntry {
                log_radiance: f[1].parse().map_err(|_| bad(n + 1))?,
                caption: f[2]
                    .split(',')
                    .map(|c| c.parse().map_err(|_| bad(n + 1)))
                    .collect::<Result<_>>()?,
                image: dir.join(f[3]),
            })
        })
        .collect()
}

fn training_examples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Example>> {
    match data {
        Some(dir) => read_manifest(dir)?
            .into_iter()
            .map(|e| {
                let image = LinearImage::new(read_pfm(&e.image)?)?;
                let brackets = bracket_decompose(&image, &cfg.model.ev_list)?;
                Example::new(&brackets, &e.caption, e.log_radiance, &cfg.model)
            })
            .collect(),
        None => Dataset::generate(cfg.data.train, 0, cfg.data.seed, &cfg.scene())?
            .train
            .iter()
            .map(|r| Example::from_record(r, &cfg.model))
            .collect(),
    }
}

fn train(
    args: &ConfigArgs,
    out: &Path,
    seed: Option<u64>,
    data: Option<&Path>,
    resume: Option<&Path>,
    max_steps: Option<u64>,
    invocation: &str,
) -> Result<()> {
    let (cfg, mut trainer) = match resume {
        Some(path) => checkpoint::load(path)?,
        None => {
            let mut cfg = load_config(args)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
            (cfg, trainer)
        }
    };
    create_dir(out)?;
    let examples = training_examples(&cfg, data)?;
    let mut records = Vec::new();
    let mut taken = 0;
    while !trainer.is_done() && max_steps.map_or(true, |m| taken < m) {
        records.push(trainer.step_once(&examples)?);
        taken += 1;
    }
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&ckpt, &cfg, &trainer)?;
    io::write_echo(&ckpt, &cfg, invocation)?;

    let loss_path = out.join("loss.csv");
    let csv = io::loss_csv(&records);
    if resume.is_some() && loss_path.exists() {
        let mut prev = std::fs::read_to_string(&loss_path)?;
        prev.push_str(csv.split_once('\n').map_or("", |(_, rows)| rows));
        std::fs::write(&loss_path, prev)?;
    } else {
        std::fs::write(&loss_path, csv)?;
    }
    if let Some(last) = records.last() {
        println!("step={} total={}", last.step, last.total);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate(
    ckpt: &Path,
    prompt: &str,
    seed: u64,
    steps: Option<usize>,
    out: &Path,
    preview: Option<&Path>,
    brackets_dir: Option<&Path>,
    invocation: &str,
) -> Result<()> {
    let (cfg, trainer) = checkpoint::load(ckpt)?;
    let caption = parse_prompt(prompt)?;
    let steps = steps.unwrap_or(cfg.sample.steps);
    let s = sample(&cfg.model, &trainer.params, &caption, SampleSeeds::from_seed(seed), steps)?;
    let linear = reconstruct(&s.brackets, &cfg.fusion)?;
    write_pfm(out, linear.image())?;
    if let Some(p) = preview {
        write_preview(p, linear.image())?;
    }
    if let Some(dir) = brackets_dir {
        create_dir(dir)?;
        for (k, (f, ev)) in s.brackets.frames().iter().zip(s.brackets.ev_list()).enumerate() {
            write_ppm16(dir.join(bracket_name(k, *ev)), f)?;
        }
    }
    io::write_echo(out, &cfg, invocation)?;
    println!("log_radiance={} scale={}", s.log_radiance, 10f64.powf(s.log_radiance));
    Ok(())
}

fn fuse(cfg: &RunConfig, frames: &[PathBuf], ev: &str, out: &Path, preview: Option<&Path>, invocation: &str) -> Result<()> {
    let evs = parse_evs(ev)?;
    if evs.len() != frames.len() {
        return Err(Error::InvalidArgument(format!("{} frames for {} EVs", frames.len(), evs.len())));
    }
    let images = frames.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let linear = reconstruct(&BracketSet::new(evs, images)?, &cfg.fusion)?;
    write_pfm(out, linear.image())?;
    if let Some(p) = preview {
        write_preview(p, linear.image())?;
    }
    io::write_echo(out, cfg, invocation)
}

fn brackets(input: &Path, ev: &str, out_dir: &Path) -> Result<()> {
    let image = LinearImage::new(read_pfm(input)?)?;
    let set = bracket_decompose(&image, &parse_evs(ev)?)?;
    create_dir(out_dir)?;
    for (k, (f, ev)) in set.frames().iter().zip(set.ev_list()).enumerate() {
        let path = out_dir.join(bracket_name(k, *ev));
        write_ppm16(&path, f)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval(ckpt: &Path, count: Option<usize>, steps: Option<usize>, seed: u64, out: &Path, invocation: &str) -> Result<()> {
    let (cfg, trainer) = checkpoint::load(ckpt)?;
    let n = count.unwrap_or(cfg.data.held_out);
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let steps = steps.unwrap_or(cfg.sample.steps);
    let data = Dataset::generate(cfg.data.train, n, cfg.data.seed, &cfg.scene())?;
    let mut rows = Vec::with_capacity(n);
    for (i, r) in data.held_out.iter().enumerate() {
        let s = sample(
            &cfg.model,
            &trainer.params,
            &r.caption,
            SampleSeeds::from_seed(mix_seed(seed, i as u64)),
            steps,
        )?;
        rows.push((r.id.to_string(), EvalReport::for_sample(&s.brackets, s.log_radiance, r.log_radiance)?));
    }
    let reports: Vec<EvalReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let agg = EvalReport::aggregate(&reports)?;
    std::fs::write(out, io::eval_csv(&rows, &agg))?;
    io::write_echo(out, &cfg, invocation)?;
    println!(
        "ls={} bracket_l1={} monotonicity_rate={} radiance_mae={}",
        agg.ls, agg.bracket_l1, agg.monotonicity_rate, agg.radiance_mae
    );
    Ok(())
}

fn radscale(
    input: &Path,
    exposure_time: Option<f64>,
    iso: Option<f64>,
    f_number: Option<f64>,
    ev_comp: f64,
    out: Option<&Path>,
) -> Result<()> {
    let signal = read_pfm(input)?;
    let radiance = match (exposure_time, iso, f_number) {
        (Some(t), Some(iso), Some(f)) => bracketflow::linear_image::invert_exposure(
            &signal,
            &SensorMeta {
                exposure_time: t,
                iso,
                f_number: f,
                ev_comp,
            },
        )?,
        (None, None, None) => RadianceMap::new(signal)?,
        _ => {
            return Err(Error::InvalidMeta(
                "--exposure-time, --iso and --f-number must be given together".into(),
            ))
        }
    };
    let stats = radiance_scale_stats(&radiance)?;
    println!(
        "scale={} log10_scale={} median={} p90={}",
        stats.scale,
        stats.log10(),
        stats.median,
        stats.highlight
    );
    if let Some(p) = out {
        write_pfm(p, normalize(&radiance, stats.scale)?.image())?;
    }
    Ok(())
}
