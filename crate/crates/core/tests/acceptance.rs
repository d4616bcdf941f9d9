//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod support;

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use datransunet::attention::{ChannelAttention, DaBlock, PositionAttention};
use datransunet::data::generate_synthetic;
use datransunet::diagnostics::{gradient_suite, MODEL_TOLERANCE, MODULE_TOLERANCE};
use datransunet::loss::{combined_loss, LossMode, LossOptions};
use datransunet::metrics::{confusion_counts, hausdorff, iou_and_dice, BinaryMask, LabelMap};
use datransunet::model::{DaTransUnet, ModelConfig, TransformerLayer};
use datransunet::nn::ForwardCtx;
use datransunet::oracle::{self, OracleTolerance};
use datransunet::tensor::{no_grad, Tensor};
use datransunet::train::{load_checkpoint, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12)).fold(0.0, f64::max)
}

fn compare(what: &str, tol: &OracleTolerance, got: &[f64], want: &[f64], worst: &mut f64) -> Result<(), String> {
    if let Some((i, a, b)) = tol.first_mismatch(got, want) {
        return Err(format!("{what}: element {i} production {a} oracle {b}"));
    }
    *worst = worst.max(max_rel_error(got, want));
    Ok(())
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let tol = OracleTolerance::new(1e-12, 1e-5);
    let mut worst = 0.0f64;
    let fixtures = 100;
    for seed in 0..fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=16);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = support::random_tensor(&mut rng, &[n, c, h, w], 1.0);
        let fm = support::feature_map(&x);

        let mut pam = PositionAttention::<f64>::new("pam", c, rng.random_range(1..=8), &mut rng);
        support::perturb(&mut pam, &mut rng);
        pam.alpha.set_data(vec![rng.random_range(-1.5..1.5)]);
        let (out, attn) = pam.forward_with_attention(&x).map_err(|e| e.to_string())?;
        let want = oracle::position_attention(&fm, &support::position(&pam));
        compare("position output", &tol, out.data(), &want.output.data, &mut worst)?;
        compare("position map", &tol, attn.data(), &want.attention, &mut worst)?;

        let mut cam = ChannelAttention::<f64>::new("cam");
        let beta = rng.random_range(-1.5..1.5);
        cam.beta.set_data(vec![beta]);
        let (out, attn) = cam.forward_with_attention(&x).map_err(|e| e.to_string())?;
        let want = oracle::channel_attention(&fm, beta);
        compare("channel output", &tol, out.data(), &want.output.data, &mut worst)?;
        compare("channel map", &tol, attn.data(), &want.attention, &mut worst)?;

        let out_c = rng.random_range(1..=16);
        let mut block = DaBlock::<f64>::new("da", c, out_c, rng.random_range(1..=4), rng.random_range(1..=8), &mut rng)
            .map_err(|e| e.to_string())?;
        support::perturb(&mut block, &mut rng);
        let training = seed % 2 == 0;
        let spec = support::da_block(&block);
        let ctx = if training { ForwardCtx::train(seed) } else { ForwardCtx::eval() };
        let out = block.forward(&x, &ctx).map_err(|e| e.to_string())?;
        let want = oracle::da_block(&fm, &spec, training);
        compare("dual-attention block", &tol, out.data(), &want.data, &mut worst)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut layer = TransformerLayer::<f64>::new("layer", 8, 2, 16, 0.0, &mut rng);
    support::perturb(&mut layer, &mut rng);
    let tokens = support::random_tensor(&mut rng, &[1, 4, 8], 1.0);
    let (out, attn) = layer.forward_with_attention(&tokens, &mut ForwardCtx::eval()).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = tokens.data().chunks(8).map(<[f64]>::to_vec).collect();
    let (want, want_attn) = oracle::transformer_layer(&rows, &support::transformer(&layer));
    compare("transformer output", &tol, out.data(), &want.concat(), &mut worst)?;
    compare("transformer weights", &tol, attn.data(), &want_attn, &mut worst)?;

    within(started.elapsed(), 60)?;
    Ok(format!(
        "{fixtures} fixtures of PAM, CAM and DA block plus a 2-head transformer layer; max rel error {worst:.2e}; {:.1}s",
        started.elapsed().as_secs_f64()
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn identity_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = support::random_tensor(&mut rng, &[2, 16, 8, 8], 2.0);

    let mut pam = PositionAttention::<f64>::new("pam", 16, 8, &mut rng);
    support::perturb(&mut pam, &mut rng);
    pam.alpha.set_data(vec![0.0]);
    let d_pam = max_abs_diff(pam.forward(&x).map_err(|e| e.to_string())?.data(), x.data());

    let mut cam = ChannelAttention::<f64>::new("cam");
    cam.beta.set_data(vec![0.0]);
    let d_cam = max_abs_diff(cam.forward(&x).map_err(|e| e.to_string())?.data(), x.data());

    let mut layer = TransformerLayer::<f64>::new("layer", 16, 4, 32, 0.1, &mut rng);
    support::perturb(&mut layer, &mut rng);
    for p in [&mut layer.out.weight, &mut layer.out.bias, &mut layer.fc2.weight, &mut layer.fc2.bias] {
        let n = p.numel();
        p.set_data(vec![0.0; n]);
    }
    let tokens = support::random_tensor(&mut rng, &[2, 9, 16], 2.0);
    let out = layer.forward(&tokens, &mut ForwardCtx::eval()).map_err(|e| e.to_string())?;
    let d_layer = max_abs_diff(out.data(), tokens.data());

    let worst = d_pam.max(d_cam).max(d_layer);
    ensure(worst <= 1e-12, || format!("max deviation PAM {d_pam:e}, CAM {d_cam:e}, transformer {d_layer:e}"))?;
    Ok(format!("max |out - in|: PAM {d_pam:e}, CAM {d_cam:e}, zeroed transformer layer {d_layer:e}"))
}

fn row_sum_error(map: &[f64], row: usize) -> f64 {
    map.chunks(row).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn normalization() -> Outcome {
    let mut worst = [0.0f64; 3];
    let mut rows = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let scale = [0.1, 1.0, 5.0][seed as usize % 3];
        let c = rng.random_range(2..=16);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = support::random_tensor(&mut rng, &[2, c, h, w], scale);

        let mut pam = PositionAttention::<f64>::new("pam", c, 2, &mut rng);
        pam.alpha.set_data(vec![1.0]);
        let (_, attn) = pam.forward_with_attention(&x).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(row_sum_error(attn.data(), h * w));
        rows += 2 * h * w;

        let (_, attn) = ChannelAttention::<f64>::new("cam").forward_with_attention(&x).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(row_sum_error(attn.data(), c));
        rows += 2 * c;

        let heads = [1, 2, 4][seed as usize % 3];
        let layer = TransformerLayer::<f64>::new("layer", 16, heads, 32, 0.0, &mut rng);
        let t = rng.random_range(1..=20);
        let tokens = support::random_tensor(&mut rng, &[2, t, 16], scale);
        let (_, attn) = layer.forward_with_attention(&tokens, &mut ForwardCtx::eval()).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(row_sum_error(attn.data(), t));
        rows += 2 * heads * t;
    }
    ensure(worst.iter().all(|&e| e <= 1e-6), || {
        format!("row-sum errors PAM {:e}, CAM {:e}, heads {:e}", worst[0], worst[1], worst[2])
    })?;
    Ok(format!(
        "{rows} rows; max |sum - 1|: PAM {:.1e}, CAM {:.1e}, transformer heads {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let suite = gradient_suite(&ModelConfig::toy(32, 16, 1), 3, 0).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let mut parts = Vec::new();
    for entry in &suite.entries {
        let limit = if entry.name == "model" { MODEL_TOLERANCE } else { MODULE_TOLERANCE };
        let err = entry.report.max_rel_error();
        ensure(err < limit, || format!("{} max rel error {err:.2e} >= {limit:e}", entry.name))?;
        parts.push(format!("{} {err:.1e}", entry.name));
    }
    ensure(suite.get("model").is_some(), || "model check missing".into())?;
    within(elapsed, 300)?;
    Ok(format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn shape_pipeline() -> Outcome {
    let cfg = ModelConfig::default();
    ensure(cfg.input_size == 224, || format!("default input size {}", cfg.input_size))?;
    let classes = cfg.num_classes;
    let model = DaTransUnet::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    let image = Tensor::<f32>::zeros(&[1, cfg.in_channels, 224, 224]);
    let (logits, trace) =
        no_grad(|| model.forward_traced(&image, &mut ForwardCtx::eval())).map_err(|e| e.to_string())?;
    let expected: [(&str, Vec<usize>); 5] = [
        ("stem", vec![1024, 14, 14]),
        ("bottleneck", vec![768, 14, 14]),
        ("tokens", vec![196, 768]),
        ("decoded", vec![64, 112, 112]),
        ("logits", vec![classes, 224, 224]),
    ];
    for (name, shape) in &expected {
        let got = trace.get(name).ok_or_else(|| format!("no `{name}` step in trace"))?;
        ensure(got == shape.as_slice(), || format!("{name}: {got:?}, expected {shape:?}"))?;
    }
    ensure(logits.shape() == [1, classes, 224, 224], || format!("logits {:?}", logits.shape()))?;

    let big = ModelConfig { input_size: 256, ..cfg.clone() };
    ensure(big.n_tokens() == 256, || format!("256 input gives {} tokens", big.n_tokens()))?;
    let toy = ModelConfig::toy(256, 16, 1);
    let small = DaTransUnet::<f32>::new(&toy).map_err(|e| e.to_string())?;
    let (_, trace) = no_grad(|| small.forward_traced(&Tensor::zeros(&[1, 3, 256, 256]), &mut ForwardCtx::eval()))
        .map_err(|e| e.to_string())?;
    let tokens = trace.get("tokens").ok_or("no tokens step")?;
    ensure(tokens[0] == 256, || format!("256 input traced {tokens:?} tokens"))?;
    let sequence: Vec<String> = expected.iter().map(|(n, s)| format!("{n} {s:?}")).collect();
    Ok(format!("{}; 256 input gives 256 tokens", sequence.join(" -> ")))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    match rng.random_range(0..5) {
        0 => vec![false; h * w],
        1 => {
            let p = rng.random_range(0.05..0.95);
            (0..h * w).map(|_| rng.random_bool(p)).collect()
        }
        _ => {
            let mut m = vec![false; h * w];
            for _ in 0..rng.random_range(1..=3) {
                let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
                let r = rng.random_range(0.5..(h.max(w) as f64 / 2.0).max(1.0));
                for y in 0..h {
                    for x in 0..w {
                        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                            m[y * w + x] = true;
                        }
                    }
                }
            }
            m
        }
    }
}

fn metric_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_hd, mut worst_identity, mut sentinels) = (0.0f64, 0.0f64, 0);
    let pairs = 500;
    for case in 0..pairs {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let pred = random_mask(&mut rng, h, w);
        let truth = random_mask(&mut rng, h, w);
        let want = oracle::metrics(&pred, &truth, h, w);

        let labels = |m: &[bool]| LabelMap::new(h, w, m.iter().map(|&b| b as u8).collect()).map_err(|e| e.to_string());
        let counts = confusion_counts(&labels(&pred)?, &labels(&truth)?, 1).map_err(|e| e.to_string())?;
        ensure(
            (counts.true_pos, counts.false_pos, counts.false_neg) == (want.true_pos, want.false_pos, want.false_neg),
            || format!("case {case}: counts {counts:?} vs oracle {want:?}"),
        )?;
        let (iou, dice) = iou_and_dice(counts);
        ensure(iou == want.iou && dice == want.dice, || {
            format!("case {case}: iou/dice {iou}/{dice} vs {}/{}", want.iou, want.dice)
        })?;
        worst_identity = worst_identity.max((dice - 2.0 * iou / (1.0 + iou)).abs());

        let mask = |m: &[bool]| BinaryMask { height: h, width: w, bits: m.to_vec() };
        let hd = hausdorff(&mask(&pred), &mask(&truth)).map_err(|e| e.to_string())?;
        let err = (hd.max - want.hd).abs().max((hd.p95 - want.hd95).abs());
        ensure(err <= 1e-9 && hd.sentinel == want.sentinel, || {
            format!(
                "case {case} ({h}x{w}): hd {}/{} sentinel {} vs oracle {}/{} sentinel {}",
                hd.max, hd.p95, hd.sentinel, want.hd, want.hd95, want.sentinel
            )
        })?;
        worst_hd = worst_hd.max(err);
        sentinels += usize::from(want.sentinel);
    }
    ensure(worst_identity <= 1e-12, || format!("dice/iou identity off by {worst_identity:e}"))?;
    Ok(format!(
        "{pairs} pairs, counts exact, max HD/HD95 error {worst_hd:.1e}, {sentinels} one-empty pairs, identity error {worst_identity:.1e}"
    ))
}

/// Per-pixel losses written out directly for comparison.
fn reference_losses(logits: &[f64], labels: &[u8], n: usize, c: usize, hw: usize, smooth: f64) -> (f64, f64) {
    let mut ce = 0.0;
    let mut probs = vec![0.0; logits.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let t = labels[b * hw + p] as usize;
            if c == 1 {
                let x = logits[at(0)];
                let prob = 1.0 / (1.0 + (-x).exp());
                probs[at(0)] = prob;
                ce -= if t == 1 { prob.ln() } else { (1.0 - prob).ln() };
            } else {
                let z: f64 = (0..c).map(|k| logits[at(k)].exp()).sum();
                for k in 0..c {
                    probs[at(k)] = logits[at(k)].exp() / z;
                }
                ce -= probs[at(t)].ln();
            }
        }
    }
    let mut dice = 0.0;
    for b in 0..n {
        for k in 0..c {
            let (mut inter, mut sum) = (0.0, 0.0);
            for p in 0..hw {
                let t = labels[b * hw + p] as usize;
                let target = if c == 1 { t as f64 } else { (t == k) as u8 as f64 };
                let prob = probs[(b * c + k) * hw + p];
                inter += prob * target;
                sum += prob + target;
            }
            dice += 1.0 - (2.0 * inter + smooth) / (sum + smooth);
        }
    }
    (ce / (n * hw) as f64, dice / (n * c) as f64)
}

fn loss_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = LossOptions::default();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let c = if trial % 2 == 0 { 1 } else { rng.random_range(2..=5) };
        let (n, h, w) = (rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=8));
        let classes = if c == 1 { 2 } else { c };
        let labels: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..classes) as u8).collect();
        let logits = support::random_tensor(&mut rng, &[n, c, h, w], 3.0);
        let mode = LossMode::for_channels(c);
        let v = combined_loss(&logits, &labels, mode, opts).map_err(|e| e.to_string())?;
        let (ce, dice) = (v.cross_entropy_value(), v.dice_value());
        ensure(v.total_value() == 0.5 * ce + 0.5 * dice, || {
            format!("trial {trial}: total {} != {}", v.total_value(), 0.5 * ce + 0.5 * dice)
        })?;
        let (ref_ce, ref_dice) = reference_losses(logits.data(), &labels, n, c, h * w, opts.smooth);
        worst = worst.max((ce - ref_ce).abs()).max((dice - ref_dice).abs());

        let logits32 = Tensor::<f32>::from_vec(&[n, c, h, w], logits.data().iter().map(|&v| v as f32).collect())
            .map_err(|e| e.to_string())?;
        let v = combined_loss(&logits32, &labels, mode, opts).map_err(|e| e.to_string())?;
        let (ce, dice) =
            (v.cross_entropy.item().map_err(|e| e.to_string())?, v.dice.item().map_err(|e| e.to_string())?);
        let total = v.total.item().map_err(|e| e.to_string())?;
        ensure(total == 0.5 * ce + 0.5 * dice, || {
            format!("trial {trial} (f32): total {total} != {}", 0.5 * ce + 0.5 * dice)
        })?;
    }
    ensure(worst <= 1e-10, || format!("loss terms differ from direct evaluation by {worst:e}"))?;

    let zeros = Tensor::<f64>::zeros(&[2, 1, 4, 4]);
    let labels: Vec<u8> = (0..32).map(|i| (i % 3 == 0) as u8).collect();
    let bce = combined_loss(&zeros, &labels, LossMode::Binary, opts).map_err(|e| e.to_string())?.cross_entropy_value();
    let ln2_err = (bce - std::f64::consts::LN_2).abs();
    ensure(ln2_err <= 1e-9, || format!("BCE at p = 0.5 is {bce}"))?;
    Ok(format!("total = CE/2 + Dice/2 bitwise in f32 and f64 over 20 trials; terms match direct sums to {worst:.1e}; BCE(p=0.5) - ln 2 = {ln2_err:.1e}"))
}

fn overfit_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { dropout: 0.0, seed: 7, ..ModelConfig::toy(64, 32, 2) };
    let train = TrainConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        batch_size: 4,
        epochs: 200,
        eval_every: 5,
        seed: 7,
        target_dice: Some(0.95),
        ..TrainConfig::default()
    };
    (model, train)
}

fn overfit() -> Outcome {
    let started = Instant::now();
    let samples = generate_synthetic(8, 64, 1, 3).map_err(|e| e.to_string())?;
    let (model_cfg, train_cfg) = overfit_config();
    let model = DaTransUnet::<f32>::new(&model_cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, train_cfg).map_err(|e| e.to_string())?;
    let record = trainer.fit(&samples, &samples).map_err(|e| e.to_string())?;
    let dice = trainer.evaluate(&samples).map_err(|e| e.to_string())?.mean_dice;
    let epochs = record.epochs.len();
    ensure(dice > 0.95, || format!("train Dice {dice:.4} after {epochs} epochs"))?;
    within(started.elapsed(), 600)?;
    Ok(format!(
        "eval-mode train Dice {dice:.4} after {epochs} epochs (final loss {:.4}); {:.1}s",
        record.epochs.last().map_or(f64::NAN, |e| e.train_loss),
        started.elapsed().as_secs_f64()
    ))
}

const ABLATION_COLUMNS: [&str; 11] = [
    "row",
    "encoder_da",
    "skip1_da",
    "skip2_da",
    "skip3_da",
    "DSC",
    "HD",
    "parameters",
    "final_train_loss",
    "split_hash",
    "seed",
];

fn write_toy_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("toy.toml");
    let text = format!(
        "[model]\ninput_size = 32\nnum_classes = 1\nstem_channels = [8, 16, 32, 64]\ntransformer_hidden = 16\n\
         transformer_layers = 1\ntransformer_heads = 2\nmlp_dim = 32\ndecoder_channels = [32, 16, 8]\nseed = 5\n\n\
         [train]\nlearning_rate = 0.003\nweight_decay = 0.0\nbatch_size = 4\nepochs = {epochs}\neval_every = 0\nseed = 5\n\n\
         [data]\nsynthetic_count = 8\nsynthetic_seed = 5\nsplit_seed = 5\n"
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> u8 {
    datransunet::cli::run(std::iter::once("datransunet").chain(args.iter().copied()).map(OsString::from))
}

fn only_run_dir(output: &Path) -> Result<PathBuf, String> {
    let dirs: Vec<PathBuf> =
        std::fs::read_dir(output).map_err(|e| e.to_string())?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    match dirs.as_slice() {
        [one] => Ok(one.clone()),
        other => Err(format!("expected one run directory in {}, found {}", output.display(), other.len())),
    }
}

fn ablation_rows(tmp: &Path, config: &Path, axes: &str, tag: &str) -> Result<Vec<csv::StringRecord>, String> {
    let out = tmp.join(tag);
    let code =
        cli(&["ablate", "--config", config.to_str().unwrap(), "--axes", axes, "--output", out.to_str().unwrap()]);
    ensure(code == 0, || format!("ablate --axes {axes} exited with {code}"))?;
    let mut reader = csv::Reader::from_path(only_run_dir(&out)?.join("ablation.csv")).map_err(|e| e.to_string())?;
    let header: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    ensure(header == ABLATION_COLUMNS, || format!("ablation columns {header:?}"))?;
    reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())
}

fn ablation_structure() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_toy_config(tmp.path(), 2);
    let crossed = ablation_rows(tmp.path(), &config, "encoder,skip", "crossed")?;
    let per_skip = ablation_rows(tmp.path(), &config, "skip1,skip2,skip3", "per_skip")?;
    ensure(crossed.len() == 4, || format!("encoder x skip gave {} rows", crossed.len()))?;
    ensure(per_skip.len() == 5, || format!("per-layer skip gave {} rows", per_skip.len()))?;

    let flags = |rows: &[csv::StringRecord]| -> Vec<String> {
        rows.iter().map(|r| (1..5).map(|i| &r[i][..1]).collect()).collect()
    };
    let expect = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    ensure(flags(&crossed) == expect(&["ffff", "fttt", "tfff", "tttt"]), || {
        format!("encoder x skip flags {:?}", flags(&crossed))
    })?;
    ensure(flags(&per_skip) == expect(&["tfff", "ttff", "tftf", "tfft", "tttt"]), || {
        format!("per-skip flags {:?}", flags(&per_skip))
    })?;

    let all: Vec<&csv::StringRecord> = crossed.iter().chain(&per_skip).collect();
    let hash = &all[0][9];
    ensure(all.iter().all(|r| &r[9] == hash && &r[10] == "5"), || "rows disagree on split hash or seed".into())?;
    for r in &all {
        for i in [5, 6, 8] {
            r[i].parse::<f64>().map_err(|_| format!("row {} column {} is `{}`", &r[0], ABLATION_COLUMNS[i], &r[i]))?;
        }
    }
    let dsc: Vec<String> =
        all.iter().map(|r| r[5].parse::<f64>().map_or_else(|_| r[5].to_string(), |v| format!("{v:.1}"))).collect();
    Ok(format!("4 + 5 rows, {} columns, split {hash}, seed 5; DSC {}", ABLATION_COLUMNS.len(), dsc.join("/")))
}

fn loss_column(run: &Path) -> Result<Vec<String>, String> {
    let mut reader = csv::Reader::from_path(run.join("curves.csv")).map_err(|e| e.to_string())?;
    reader.records().map(|r| r.map(|r| r[1].to_string()).map_err(|e| e.to_string())).collect()
}

fn bits(values: &[f32]) -> Vec<u32> {
    values.iter().map(|v| v.to_bits()).collect()
}

fn model_bits(model: &DaTransUnet<f32>) -> Vec<u32> {
    let (params, buffers) = model.state();
    params.iter().flat_map(|p| bits(p.data())).chain(buffers.iter().flat_map(|b| bits(&b.get()))).collect()
}

fn determinism_and_persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_toy_config(tmp.path(), 3);
    let mut curves = Vec::new();
    for tag in ["first", "second"] {
        let out = tmp.path().join(tag);
        let code = cli(&["train", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
        ensure(code == 0, || format!("train exited with {code}"))?;
        curves.push(loss_column(&only_run_dir(&out)?)?);
    }
    ensure(curves[0] == curves[1] && curves[0].len() == 3, || {
        format!("loss curves differ: {:?} vs {:?}", curves[0], curves[1])
    })?;

    let samples = generate_synthetic(8, 32, 1, 9).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig { input_size: 32, dropout: 0.1, ..ModelConfig::toy(32, 16, 1) };
    let train_cfg = |epochs| TrainConfig { epochs, eval_every: 0, seed: 3, augment: true, ..TrainConfig::default() };
    let new_trainer = |epochs| Trainer::new(DaTransUnet::<f32>::new(&model_cfg)?, train_cfg(epochs));

    let mut straight = new_trainer(4).map_err(|e| e.to_string())?;
    let full = straight.fit(&samples, &[]).map_err(|e| e.to_string())?;

    let mut first = new_trainer(2).map_err(|e| e.to_string())?;
    let head = first.fit(&samples, &[]).map_err(|e| e.to_string())?;
    let ck = tmp.path().join("checkpoint");
    first.save_checkpoint(&ck).map_err(|e| e.to_string())?;

    let loaded = load_checkpoint::<f32>(&ck, Some(&model_cfg)).map_err(|e| e.to_string())?;
    ensure(model_bits(&loaded.model) == model_bits(&first.model), || "reloaded parameters or buffers differ".into())?;
    let opt_bits = |o: &datransunet::train::Optimizer<f32>| {
        (
            o.step,
            o.first.iter().flat_map(|v| bits(v)).collect::<Vec<_>>(),
            o.second.iter().flat_map(|v| bits(v)).collect::<Vec<_>>(),
        )
    };
    ensure(opt_bits(&loaded.optimizer) == opt_bits(&first.optimizer) && loaded.epoch == 2, || {
        "reloaded optimizer state differs".into()
    })?;
    let probe = Tensor::<f32>::from_vec(&[1, 3, 32, 32], (0..3 * 32 * 32).map(|i| (i % 17) as f32 / 17.0).collect())
        .map_err(|e| e.to_string())?;
    let forward = |m: &DaTransUnet<f32>| no_grad(|| m.forward(&probe, &mut ForwardCtx::eval())).map(|t| bits(t.data()));
    ensure(
        forward(&loaded.model).map_err(|e| e.to_string())? == forward(&first.model).map_err(|e| e.to_string())?,
        || "reloaded model gives different logits".into(),
    )?;

    let mut resumed = Trainer::<f32>::resume(&ck, train_cfg(4)).map_err(|e| e.to_string())?;
    let tail = resumed.fit(&samples, &[]).map_err(|e| e.to_string())?;
    let joined: Vec<u64> = head.losses().iter().chain(&tail.losses()).map(|v| v.to_bits()).collect();
    let straight_losses: Vec<u64> = full.losses().iter().map(|v| v.to_bits()).collect();
    ensure(joined == straight_losses, || {
        format!("resumed losses {:?} vs uninterrupted {:?}", [head.losses(), tail.losses()].concat(), full.losses())
    })?;
    ensure(model_bits(&resumed.model) == model_bits(&straight.model), || {
        "resumed parameters differ from an uninterrupted run".into()
    })?;
    Ok("two CLI runs give identical loss curves; checkpoint reload bitwise equal (parameters, buffers, optimizer, logits); 2+2 resumed epochs match 4 straight epochs bitwise".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("identity cases", identity_cases),
        ("attention normalization", normalization),
        ("gradient checks", gradient_checks),
        ("shape pipeline", shape_pipeline),
        ("metric fidelity", metric_fidelity),
        ("loss contract", loss_contract),
        ("overfit sanity", overfit),
        ("ablation structure", ablation_structure),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
