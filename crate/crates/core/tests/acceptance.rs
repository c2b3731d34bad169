//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report lines always reach stdout.

mod common;

use std::rc::Rc;
use std::time::{Duration, Instant};

use bf_tensor::{grad_check, AttnMask, RotaryAngles, Tape, Tensor, Var};
use bracketflow::dit::loss::{loss_bracket, loss_bracket_frames};
use bracketflow::dit::model::velocity;
use bracketflow::dit::tokens::encode_frames;
use bracketflow::dit::{
    init_params, lora_merge, sample, Example, Group, LossRecord, Model, ModelConfig, ModulationPlacement, Phase,
    RopeMode, SampleSeeds, SeqContext, SeqLayout, StepInput, TrainConfig, Trainer,
};
use bracketflow::fusion::{fuse, to_linear, FusionConfig};
use bracketflow::io::{checkpoint, PfmImage, PpmSamples, RunConfig};
use bracketflow::linear_image::{bracket_decompose, BracketSet};
use bracketflow::metrics::{bracket_consistency_error, exposure_monotonicity, luminance_scale, radiance_mae};
use bracketflow::radiance_codec::RadianceCodec;
use bracketflow::scene::{Dataset, DatasetRecord, SceneConfig};
use common::{live_params, log_uniform_image, max_abs_diff, rng, tiny_config, weighted_sum};

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SEEDS: u64 = 5;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed <= limit,
        format!("{detail}; {:.1}s", elapsed.as_secs_f64()),
        format!("{detail}; {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 1

type Op = Box<dyn Fn(&mut Tape, Var) -> bf_tensor::Result<Var>>;

fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<usize>, Op)> {
    let other = Tensor::randn(&[3, 4], 1.0, &mut rng(200 + seed));
    let row = Tensor::randn(&[4], 1.0, &mut rng(300 + seed));
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng(500 + seed));
    let lhs = Tensor::randn(&[2, 3], 1.0, &mut rng(510 + seed));
    let target = Tensor::randn(&[3, 4], 1.0, &mut rng(520 + seed));
    let n = 5;
    let kv = Tensor::randn(&[n, 8], 1.0, &mut rng(530 + seed));
    let angles = Tensor::randn(&[n * 2], 2.0, &mut rng(540 + seed)).into_data();
    let rot = Rc::new(RotaryAngles::new(n, 2, &angles).unwrap());
    let mask = Rc::new(AttnMask::from_allow(n, |i, j| j <= i || (i + j) % 3 == 0).unwrap());
    let (o1, o2, o3, t1, t2) = (other.clone(), other.clone(), other, target.clone(), target);
    let (r1, r2) = (row.clone(), row);
    let (kv1, kv2, rot1, rot2, mask1, mask2) = (kv.clone(), kv, rot.clone(), rot, mask.clone(), mask);
    vec![
        ("matmul", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let wv = t.constant(w.clone());
            t.matmul(x, wv)
        })),
        ("matmul_rhs", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let a = t.constant(lhs.clone());
            t.matmul(a, x)
        })),
        ("add", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let o = t.constant(o1.clone());
            t.add(x, o)
        })),
        ("sub", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let o = t.constant(o2.clone());
            t.sub(o, x)
        })),
        ("mul", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let o = t.constant(o3.clone());
            t.mul(x, o)
        })),
        ("add_row", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let r = t.constant(r1.clone());
            t.add_row(x, r)
        })),
        ("mul_row", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let r = t.constant(r2.clone());
            t.mul_row(x, r)
        })),
        ("row_operand", vec![4], Box::new(|t: &mut Tape, r| {
            let x = t.constant(Tensor::from_fn(&[3, 4], |i| 0.3 * i as f64 - 1.0).unwrap());
            let y = t.mul_row(x, r)?;
            t.add_row(y, r)
        })),
        ("scale", vec![2, 3], Box::new(|t: &mut Tape, x| t.scale(x, -1.7))),
        ("add_scalar", vec![2, 3], Box::new(|t: &mut Tape, x| t.add_scalar(x, 0.3))),
        ("softmax", vec![3, 5], Box::new(|t: &mut Tape, x| t.softmax(x))),
        ("rms_norm", vec![3, 6], Box::new(|t: &mut Tape, x| t.rms_norm(x))),
        ("silu", vec![4, 3], Box::new(|t: &mut Tape, x| t.silu(x))),
        ("mean", vec![4, 3], Box::new(|t: &mut Tape, x| {
            let m = t.mean(x)?;
            let s = t.mul(x, x)?;
            let s = t.mean(s)?;
            t.add(m, s)
        })),
        ("l2_loss", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let y = t.constant(t1.clone());
            t.l2_loss(x, y)
        })),
        // Offsets keep every difference at least 0.5 away from the kink.
        ("l1_loss", vec![3, 4], Box::new(move |t: &mut Tape, x| {
            let y = t.constant(t2.map(|v| v.signum() * (v.abs() + 0.5)).unwrap());
            let xs = t.scale(x, 0.1)?;
            t.l1_loss(xs, y)
        })),
        ("clip01", vec![3, 4], Box::new(|t: &mut Tape, x| {
            // Maps the standard normal input into (0.2, 0.8) and beyond 1.
            let y = t.scale(x, 0.05)?;
            let y = t.add_scalar(y, 0.5)?;
            let c = t.clip01(y)?;
            let hi = t.add_scalar(y, 2.0)?;
            let c2 = t.clip01(hi)?;
            t.add(c, c2)
        })),
        ("attention_q", vec![n, 8], Box::new(move |t: &mut Tape, x| {
            let k = t.constant(kv1.clone());
            let q = t.rotary(x, rot1.clone())?;
            let k = t.rotary(k, rot1.clone())?;
            t.attention(q, k, x, 2, mask1.clone())
        })),
        ("attention_kv", vec![n, 8], Box::new(move |t: &mut Tape, x| {
            let q = t.constant(kv2.clone());
            let k = t.rotary(x, rot2.clone())?;
            t.attention(q, k, x, 2, mask2.clone())
        })),
        ("concat_slice", vec![2, 3], Box::new(|t: &mut Tape, x| {
            let s = t.scale(x, 2.0)?;
            let r = t.concat_rows(&[x, s])?;
            let c = t.concat_cols(&[r, r])?;
            let a = t.slice_rows(c, 1, 2)?;
            t.slice_cols(a, 2, 3)
        })),
        ("gather", vec![3, 2], Box::new(|t: &mut Tape, x| {
            let g = t.gather(x, Rc::new(vec![5, 0, 0, 3, 2, 1, 4, 4]), &[2, 4])?;
            let r = t.gather_rows(x, &[2, 0, 2])?;
            let m = t.mean_rows(r)?;
            let m = t.reshape(m, &[2, 1])?;
            let m = t.concat_cols(&[m, m, m, m])?;
            t.add(g, m)
        })),
    ]
}

fn block_fixture(seed: u64) -> (ModelConfig, bracketflow::dit::ParamStore, SeqContext, Tensor, Tensor, Tensor) {
    let mut cfg = tiny_config();
    cfg.modulation = ModulationPlacement::Both;
    let store = live_params(&cfg, seed);
    let ctx = SeqContext::new(&cfg, SeqLayout::full(&cfg)).unwrap();
    let n_img = ctx.layout.bracket_tokens() + 1;
    let mut r = rng(10_000 + seed);
    let txt = Tensor::randn(&[cfg.text_len, cfg.dim], 1.0, &mut r);
    let img = Tensor::randn(&[n_img, cfg.dim], 1.0, &mut r);
    let cond = Tensor::randn(&[1, cfg.dim], 1.0, &mut r);
    (cfg, store, ctx, txt, img, cond)
}

fn mm_block_error(seed: u64, wrt: &str) -> f64 {
    let (cfg, store, ctx, txt, img, cond) = block_fixture(seed);
    let x0 = match wrt {
        "img" => img.clone(),
        "txt" => txt.clone(),
        name => store.require(name).unwrap().clone(),
    };
    grad_check(
        |t, x| {
            let mut model = Model::new(&cfg, &store, true, &[]);
            let (mut tv, mut iv) = (t.constant(txt.clone()), t.constant(img.clone()));
            match wrt {
                "img" => iv = x,
                "txt" => tv = x,
                name => model.bind(name, x).unwrap(),
            }
            let c = t.constant(cond.clone());
            let (ot, oi) = model.mm_block(t, 0, &ctx, tv, iv, c).unwrap();
            let a = weighted_sum(t, ot, 77 + seed)?;
            let b = weighted_sum(t, oi, 78 + seed)?;
            t.add(a, b)
        },
        &x0,
        FD_STEP,
    )
    .unwrap()
}

fn single_block_error(seed: u64, wrt: &str) -> f64 {
    let (cfg, store, ctx, txt, img, cond) = block_fixture(seed);
    let mut x0 = txt.data().to_vec();
    x0.extend_from_slice(img.data());
    let x0 = Tensor::new(vec![ctx.layout.len(), cfg.dim], x0).unwrap();
    let p0 = match wrt {
        "x" => x0.clone(),
        name => store.require(name).unwrap().clone(),
    };
    grad_check(
        |t, p| {
            let mut model = Model::new(&cfg, &store, true, &[]);
            let x = match wrt {
                "x" => p,
                name => {
                    model.bind(name, p).unwrap();
                    t.constant(x0.clone())
                }
            };
            let c = t.constant(cond.clone());
            let y = model.single_block(t, 0, &ctx, x, c).unwrap();
            weighted_sum(t, y, 91 + seed)
        },
        &p0,
        FD_STEP,
    )
    .unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut note = |name: String, err: f64| {
        worst = worst.max(err);
        if !(err <= GRAD_TOL) {
            failures.push(format!("{name}={err:.2e}"));
        }
    };
    for seed in 0..SEEDS {
        for (name, shape, op) in primitive_cases(seed) {
            let x = Tensor::randn(&shape, 1.0, &mut rng(100 + seed));
            let err = grad_check(
                |t, x| {
                    let y = op(t, x)?;
                    weighted_sum(t, y, 900 + seed)
                },
                &x,
                FD_STEP,
            )
            .unwrap();
            note(format!("{name}/{seed}"), err);
        }
        for wrt in ["img", "txt", "mm0.img.qkv.lora_a", "mm0.txt.ada.w"] {
            note(format!("mm_block[{wrt}]/{seed}"), mm_block_error(seed, wrt));
        }
        for wrt in ["x", "single0.lin1.lora_b", "single0.mod.ev1.w", "single0.mod.qkv.w"] {
            note(format!("single_block[{wrt}]/{seed}"), single_block_error(seed, wrt));
        }
    }
    if !failures.is_empty() {
        return Err(format!("relative error above {GRAD_TOL:e}: {}", failures.join(", ")));
    }
    within(
        start.elapsed(),
        Duration::from_secs(120),
        format!("worst relative error {worst:.2e} over {SEEDS} seeds"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let codec = RadianceCodec::init(48, &mut rng(2)).unwrap();
    let mut worst: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=400 {
        let s = -6.0 + 10.0 * i as f64 / 400.0;
        let token = codec.embed_log_radiance(s).unwrap();
        let d = codec.expectation_decode(&token).unwrap();
        worst = worst.max((d - s).abs());
        lo = lo.min(d);
        hi = hi.max(d);
    }
    check(
        worst <= 0.25 && lo >= -5.75 && hi <= 3.75,
        format!("max |decode(encode(s)) - s| = {worst:.4}, outputs in [{lo}, {hi}]"),
        format!("max error {worst}, outputs in [{lo}, {hi}]"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let ev = [-4.0, -2.0, 0.0, 2.0];
    let cfg = FusionConfig::default();
    let mut rel = Vec::new();
    let mut ratio_err: f64 = 0.0;
    for seed in 0..100 {
        // The darkest bracket leaves everything below 16 unclipped.
        let image = log_uniform_image(32, 24, 1e-3, 15.0, 3000 + seed);
        let fused = fuse(&bracket_decompose(&image, &ev).unwrap(), &cfg).unwrap();
        let back = to_linear(&fused.image, fused.ev_max).unwrap();
        for (a, b) in back.data().iter().zip(image.data()) {
            rel.push((a - b).abs() / b);
        }
        for r in &fused.ratios {
            for c in r.rgb {
                ratio_err = ratio_err.max((c / 4.0 - 1.0).abs());
            }
        }
    }
    let max = rel.iter().copied().fold(0.0, f64::max);
    let med = median(rel);
    let detail = format!("median rel {med:.2e}, max rel {max:.2e}, ratio error {:.2e}%", 100.0 * ratio_err);
    if med <= 1e-3 && max <= 1e-2 && ratio_err <= 0.01 {
        within(start.elapsed(), Duration::from_secs(60), detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 4

fn bracket_loss_of(brackets: &BracketSet, cfg: &ModelConfig) -> f64 {
    let mut t = Tape::new();
    let z = t.constant(encode_frames(brackets.frames(), cfg.patch).unwrap());
    let l = loss_bracket(&mut t, z, cfg).unwrap();
    t.value(l).item().unwrap()
}

fn criterion_4() -> Outcome {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        ..ModelConfig::default()
    };
    let ev = cfg.ev_list.clone();
    let (mut clean_worst, mut clipped_min, mut agree): (f64, f64, f64) = (0.0, f64::INFINITY, 0.0);
    for seed in 0..20 {
        // Below 0.25 nothing clips even at +2 EV.
        let clean = bracket_decompose(&log_uniform_image(16, 16, 1e-3, 0.249, 40 + seed), &ev).unwrap();
        let lc = bracket_loss_of(&clean, &cfg);
        clean_worst = clean_worst.max(lc);
        let clipped = bracket_decompose(&log_uniform_image(16, 16, 1e-3, 8.0, 60 + seed), &ev).unwrap();
        let lk = bracket_loss_of(&clipped, &cfg);
        clipped_min = clipped_min.min(lk);
        for (set, l) in [(&clean, lc), (&clipped, lk)] {
            agree = agree.max((bracket_consistency_error(set) - l).abs());
        }
        // Same pixels fed straight to the frame-level loss.
        let mut t = Tape::new();
        let frames: Vec<Var> = clipped
            .frames()
            .iter()
            .map(|f| t.constant(Tensor::new(vec![1, f.data().len()], f.data().to_vec()).unwrap()))
            .collect();
        let l = loss_bracket_frames(&mut t, &frames, &ev).unwrap();
        agree = agree.max((t.value(l).item().unwrap() - bracket_consistency_error(&clipped)).abs());
    }
    check(
        clean_worst <= 1e-9 && clipped_min > 0.0 && agree <= 1e-12,
        format!("clean max {clean_worst:.1e}, clipped min {clipped_min:.3}, metric/loss gap {agree:.1e}"),
        format!("clean max {clean_worst:e}, clipped min {clipped_min:e}, metric/loss gap {agree:e}"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut cfg = tiny_config();
    cfg.modulation = ModulationPlacement::Both;
    let store = live_params(&cfg, 5);
    let caption = [3, 11];
    let a = sample(&cfg, &store, &caption, SampleSeeds { bracket: 1, radiance: 2 }, 6).unwrap();
    let b = sample(&cfg, &store, &caption, SampleSeeds { bracket: 1, radiance: 3 }, 6).unwrap();
    let identical = a.brackets == b.brackets && a.latents == b.latents;
    let radiance_moved = a.radiance_token != b.radiance_token;

    // One MM block: perturb every non-EV0 bracket token.
    let ctx = SeqContext::new(&cfg, SeqLayout::full(&cfg)).unwrap();
    let layout = &ctx.layout;
    let base = layout.base_position().unwrap();
    let l = layout.tokens_per_bracket;
    let mut r = rng(55);
    let txt = Tensor::randn(&[cfg.text_len, cfg.dim], 1.0, &mut r);
    let img = Tensor::randn(&[layout.bracket_tokens() + 1, cfg.dim], 1.0, &mut r);
    let cond = Tensor::randn(&[1, cfg.dim], 1.0, &mut r);
    let mut perturbed = img.data().to_vec();
    for (i, v) in perturbed.iter_mut().enumerate() {
        let row = i / cfg.dim;
        if row < layout.bracket_tokens() && row / l != base {
            *v += 3.0 * ((i as f64) * 0.37).sin();
        }
    }
    let perturbed = Tensor::new(img.shape().to_vec(), perturbed).unwrap();
    let rad_row = |img: &Tensor| -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let mut m = Model::new(&cfg, &store, true, &[]);
        let (tv, iv, cv) = (t.constant(txt.clone()), t.constant(img.clone()), t.constant(cond.clone()));
        let (_, oi) = m.mm_block(&mut t, 0, &ctx, tv, iv, cv).unwrap();
        let mm = t.value(oi).data()[layout.bracket_tokens() * cfg.dim..].to_vec();
        let x = t.concat_rows(&[tv, iv]).unwrap();
        let y = m.single_block(&mut t, 0, &ctx, x, cv).unwrap();
        let ri = layout.radiance_index().unwrap();
        let single = t.value(y).data()[ri * cfg.dim..(ri + 1) * cfg.dim].to_vec();
        (mm, single)
    };
    let (mm_a, single_a) = rad_row(&img);
    let (mm_b, single_b) = rad_row(&perturbed);
    let layer_invariant = mm_a == mm_b && single_a == single_b;
    check(
        identical && radiance_moved && layer_invariant,
        "brackets bit-identical under radiance-noise change; radiance row unchanged by non-EV0 perturbation",
        format!("brackets identical {identical}, radiance moved {radiance_moved}, layer invariant {layer_invariant}"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut worst_neutral: f64 = 0.0;
    let mut worst_merge: f64 = 0.0;
    for (mode, placement) in [
        (RopeMode::ThreeD, ModulationPlacement::Single),
        (RopeMode::ThreeDLayerEmbed, ModulationPlacement::Both),
    ] {
        let cfg = ModelConfig {
            rope_mode: mode,
            modulation: placement,
            ..tiny_config()
        };
        let mut store = init_params(&cfg, &mut rng(6)).unwrap();
        // Base weights away from their init so the comparison is not trivial.
        common::randomize_group(&mut store, Group::Base, 0.3, 61);
        let ctx = SeqContext::new(&cfg, SeqLayout::full(&cfg)).unwrap();
        let mut r = rng(62);
        let z = Tensor::randn(&[ctx.layout.bracket_tokens(), cfg.latent_dim()], 1.0, &mut r);
        let rad = Tensor::randn(&[cfg.dim], 1.0, &mut r).into_data();
        let input = StepInput {
            latents: &z,
            radiance: Some(&rad),
            text: &[1, 4, 16, 16],
            t: 0.37,
        };
        let (u_on, r_on) = velocity(&cfg, &store, &ctx, true, input).unwrap();
        let (u_off, r_off) = velocity(&cfg, &store, &ctx, false, input).unwrap();
        worst_neutral = worst_neutral
            .max(u_on.max_abs_diff(&u_off))
            .max(max_abs_diff(&r_on.unwrap(), &r_off.unwrap()));

        let live = live_params(&cfg, 63);
        let merged = lora_merge(&cfg, &live).unwrap();
        let (u_a, r_a) = velocity(&cfg, &live, &ctx, true, input).unwrap();
        let (u_m, r_m) = velocity(&cfg, &merged, &ctx, true, input).unwrap();
        worst_merge = worst_merge
            .max(u_a.max_abs_diff(&u_m))
            .max(max_abs_diff(&r_a.unwrap(), &r_m.unwrap()));
    }
    check(
        worst_neutral <= 1e-10 && worst_merge <= 1e-10,
        format!("adapters-at-init gap {worst_neutral:.1e}, merge gap {worst_merge:.1e}"),
        format!("adapters-at-init gap {worst_neutral:e}, merge gap {worst_merge:e}"),
    )
}

// ------------------------------------------------------------ criteria 7 and 8

struct Trained {
    trainer: Trainer,
    records: Vec<LossRecord>,
    data: Dataset,
    elapsed: Duration,
}

const SAMPLE_STEPS: usize = 20;

fn train_run(model: ModelConfig, train: TrainConfig, data: &[DatasetRecord]) -> (Trainer, Vec<LossRecord>) {
    let examples: Vec<Example> = data.iter().map(|r| Example::from_record(r, &model).unwrap()).collect();
    let mut trainer = Trainer::new(model, train).unwrap();
    let mut records = Vec::new();
    trainer.fit(&examples, |r| records.push(*r)).unwrap();
    (trainer, records)
}

fn smoke_training() -> Trained {
    let start = Instant::now();
    let run = RunConfig::default();
    let data = Dataset::generate(64, 200, run.data.seed, &run.scene()).unwrap();
    let (trainer, records) = train_run(run.model.clone(), run.train.clone(), &data.train);
    Trained {
        trainer,
        records,
        data,
        elapsed: start.elapsed(),
    }
}

/// Mean of the first and last ten fine-tuning totals.
fn finetune_drop(records: &[LossRecord]) -> (f64, f64) {
    let fin: Vec<f64> = records.iter().filter(|r| r.phase == Phase::Finetune).map(|r| r.total).collect();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (avg(&fin[..10]), avg(&fin[fin.len() - 10..]))
}

struct StackStats {
    monotonicity: f64,
    ls: f64,
}

fn stack_stats(cfg: &ModelConfig, trainer: &Trainer, prompts: &[DatasetRecord], seed: u64) -> StackStats {
    let (mut mono, mut ls) = (0.0, 0.0);
    for (i, r) in prompts.iter().enumerate() {
        let s = sample(cfg, &trainer.params, &r.caption, SampleSeeds::from_seed(seed + i as u64), SAMPLE_STEPS).unwrap();
        mono += exposure_monotonicity(&s.brackets);
        ls += luminance_scale(&s.brackets).unwrap();
    }
    let n = prompts.len() as f64;
    StackStats {
        monotonicity: mono / n,
        ls: ls / n,
    }
}

fn criterion_7(t: &Trained) -> Outcome {
    let start = Instant::now();
    let (first, last) = finetune_drop(&t.records);
    let drop = 1.0 - last / first;
    let stats = stack_stats(&t.trainer.model, &t.trainer, &t.data.held_out[..16], 700);
    let elapsed = t.elapsed + start.elapsed();
    let detail = format!(
        "fine-tune loss {first:.3} -> {last:.3} ({:.0}% drop), monotonicity {:.3}, LS {:.2}",
        100.0 * drop,
        stats.monotonicity,
        stats.ls
    );
    if drop >= 0.5 && stats.monotonicity >= 0.9 && stats.ls > 4.0 {
        within(elapsed, Duration::from_secs(30 * 60), detail)
    } else {
        Err(format!("{detail}; {:.1}s including training", elapsed.as_secs_f64()))
    }
}

fn criterion_8(t: &Trained) -> Outcome {
    let held = &t.data.held_out;
    let mut pred = Vec::with_capacity(held.len());
    for (i, r) in held.iter().enumerate() {
        let s = sample(
            &t.trainer.model,
            &t.trainer.params,
            &r.caption,
            SampleSeeds::from_seed(8000 + i as u64),
            SAMPLE_STEPS,
        )
        .unwrap();
        pred.push(s.log_radiance);
    }
    let truth: Vec<f64> = held.iter().map(|r| r.log_radiance).collect();
    let mae = radiance_mae(&pred, &truth).unwrap();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let constant = radiance_mae(&vec![mean; truth.len()], &truth).unwrap();
    check(
        mae <= 1.0,
        format!("MAE {mae:.3} log10 units on {} scenes (constant predictor {constant:.3})", held.len()),
        format!("MAE {mae:.3} (constant predictor {constant:.3})"),
    )
}

// ---------------------------------------------------------------- criterion 9

const ABLATION_SEEDS: [u64; 3] = [11, 12, 13];

fn ablation_config(rope: RopeMode, modulation: ModulationPlacement) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        height: 16,
        width: 16,
        rope_mode: rope,
        modulation,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        pretrain_steps: 150,
        finetune_steps: 300,
        ..TrainConfig::default()
    };
    (model, train)
}

struct AblationResult {
    monotonicity: f64,
    ls: f64,
    img_first: f64,
    img_last: f64,
}

fn ablation(rope: RopeMode, modulation: ModulationPlacement) -> AblationResult {
    let mut acc = AblationResult {
        monotonicity: 0.0,
        ls: 0.0,
        img_first: 0.0,
        img_last: 0.0,
    };
    for &seed in &ABLATION_SEEDS {
        let (model, mut train) = ablation_config(rope, modulation);
        train.seed = seed;
        let scene = SceneConfig {
            width: model.width,
            height: model.height,
            ..SceneConfig::default()
        };
        let data = Dataset::generate(64, 16, seed, &scene).unwrap();
        let (trainer, records) = train_run(model.clone(), train, &data.train);
        let stats = stack_stats(&model, &trainer, &data.held_out, 900);
        let img: Vec<f64> = records.iter().map(|r| r.img).collect();
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        acc.monotonicity += stats.monotonicity / 3.0;
        acc.ls += stats.ls / 3.0;
        acc.img_first += avg(&img[..10]) / 3.0;
        acc.img_last += avg(&img[img.len() - 10..]) / 3.0;
    }
    acc
}

fn criterion_9() -> Outcome {
    let full = ablation(RopeMode::ThreeD, ModulationPlacement::Single);
    let flat = ablation(RopeMode::TwoD, ModulationPlacement::Single);
    let off = ablation(RopeMode::ThreeD, ModulationPlacement::Off);
    let detail = format!(
        "3D mono {:.3} LS {:.2}; 2D mono {:.3} LS {:.2}; no modulation LS {:.2}, img loss {:.3} -> {:.3}",
        full.monotonicity, full.ls, flat.monotonicity, flat.ls, off.ls, off.img_first, off.img_last
    );
    check(
        flat.monotonicity < full.monotonicity && flat.ls < full.ls && off.ls < full.ls && off.img_last < off.img_first,
        detail.clone(),
        detail,
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    // PFM: any f32-representable image survives bit for bit.
    let mut r = rng(10);
    let mut pfm_ok = true;
    for (w, h) in [(1, 1), (7, 3), (32, 32)] {
        let data: Vec<f32> = (0..w * h * 3)
            .map(|i| {
                let v: f64 = rand::Rng::gen_range(&mut r, -20.0..20.0);
                (v.exp2() * if i % 5 == 0 { -1.0 } else { 1.0 }) as f32
            })
            .collect();
        for little in [true, false] {
            let img = PfmImage {
                little_endian: little,
                ..PfmImage::new(w, h, data.clone()).unwrap()
            };
            let mut bytes = Vec::new();
            img.write_to(&mut bytes).unwrap();
            let back = PfmImage::read_from(&bytes[..]).unwrap();
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            pfm_ok &= bits(&back.data) == bits(&img.data) && again == bytes;
            let rgb = img.to_image().unwrap();
            pfm_ok &= bits(&PfmImage::from_image(&rgb).unwrap().data) == bits(&img.data);
        }
    }
    // PPM: every 16-bit sample value survives.
    let samples: Vec<u16> = (0..=u16::MAX).chain([0, 0]).collect();
    let ppm = PpmSamples {
        width: 21846,
        height: 1,
        maxval: u16::MAX,
        samples,
    };
    let mut bytes = Vec::new();
    ppm.write_to(&mut bytes).unwrap();
    let back = PpmSamples::read_from(&bytes[..]).unwrap();
    let rgb = back.to_image().unwrap();
    let ppm_ok = back == ppm && PpmSamples::from_image(&rgb).unwrap() == ppm;

    // Checkpoint: reload mid-run, then ten more steps must match bit for bit.
    let mut run = RunConfig::default();
    run.model = tiny_config();
    run.train.pretrain_steps = 6;
    run.train.finetune_steps = 20;
    run.train.batch = 3;
    let scene = SceneConfig {
        width: 8,
        height: 8,
        ..SceneConfig::default()
    };
    let data = Dataset::generate(8, 0, 4, &scene).unwrap();
    let examples: Vec<Example> = data.train.iter().map(|r| Example::from_record(r, &run.model).unwrap()).collect();
    let mut a = Trainer::new(run.model.clone(), run.train.clone()).unwrap();
    for _ in 0..8 {
        a.step_once(&examples).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &run, &a).unwrap();
    let (run_b, mut b) = checkpoint::load(&path).unwrap();
    let reload_ok = run_b == run && b == a;
    let mut continued = true;
    for _ in 0..10 {
        let ra = a.step_once(&examples).unwrap();
        let rb = b.step_once(&examples).unwrap();
        continued &= ra.total.to_bits() == rb.total.to_bits();
    }
    let bits = |t: &Trainer| -> Vec<u64> {
        t.params.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
    };
    let ckpt_ok = reload_ok && continued && bits(&a) == bits(&b) && checkpoint::encode(&run, &a) == checkpoint::encode(&run_b, &b);
    check(
        pfm_ok && ppm_ok && ckpt_ok,
        "PFM, PPM and checkpoint round trips bit-identical; 10 resumed steps match",
        format!("pfm {pfm_ok}, ppm {ppm_ok}, checkpoint {ckpt_ok}"),
    )
}

fn main() {
    // `cargo test -- --list` and filtered runs should not start hour-long work.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filter: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| *f == &n.to_string());

    let mut failed = 0;
    let mut report = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n}: PASS ({msg}) [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL ({msg}) [{secs:.1}s]");
            }
        }
    };
    report(1, &mut criterion_1);
    report(2, &mut criterion_2);
    report(3, &mut criterion_3);
    report(4, &mut criterion_4);
    report(5, &mut criterion_5);
    report(6, &mut criterion_6);
    if wanted(7) || wanted(8) {
        let trained = smoke_training();
        report(7, &mut || criterion_7(&trained));
        report(8, &mut || criterion_8(&trained));
    }
    report(9, &mut criterion_9);
    report(10, &mut criterion_10);
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
}
