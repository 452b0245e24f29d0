//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion does.
//!
//! Reference values are computed here from first principles (direct sums,
//! a naive DFT, hand-derived loss constants) rather than through the library.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unifl::capacity::{effective_capacity, Beta, WeightTable};
use unifl::data::{MixedBatchSampler, SynthFace};
use unifl::frequency::{extract_hf, fft2, ifft2_real, FrequencyMask};
use unifl::heatmap::{decode, encode};
use unifl::loss::{awing_pixel, awing_pixel_grad, fmb_batch_loss, AWingParams};
use unifl::metrics::{failure_rate, nme, NormKind, NormalizationRule};
use unifl::nn::{gradcheck, output_to_stacks, stacks_to_tensor, Mode, NetConfig, Network, Tensor};
use unifl::protocol::{DatasetId, ProtocolTable, UnifiedLandmarkId};
use unifl::train::{TrainConfig, Trainer};
use unifl::{HeatmapStack, Image, ImagePlane, LandmarkSet};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn protocol_aggregates() -> Outcome {
    let t = ProtocolTable::default_table();
    let mut ids = BTreeSet::new();
    for ds in DatasetId::ALL {
        for u in t.forward(ds).map_err(|e| e.to_string())? {
            ids.insert(u.index());
        }
    }
    let total: usize = t.counts().iter().sum();
    let sizes: Vec<usize> = DatasetId::ALL.iter().map(|&d| t.dataset_size(d).unwrap()).collect();
    check(ids.len() == 124 && t.num_unified() == 124, format!("{} distinct ids", ids.len()))?;
    check(total == 214, format!("sum of counts {total}"))?;
    check(sizes == [19, 98, 29, 68], format!("dataset sizes {sizes:?}"))?;
    Ok(format!("124 ids, sum of counts {total}"))
}

fn capacity_oracle() -> Outcome {
    let betas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.999];
    let mut worst = 0.0f64;
    for &b in &betas {
        let beta = Beta::new(b).map_err(|e| e.to_string())?;
        let mut prev = None;
        for n in 1..=8u32 {
            let got = effective_capacity(beta, n).map_err(|e| e.to_string())?;
            let series: f64 = (0..n).map(|k| b.powi(k as i32)).sum();
            let closed = (1.0 - b.powi(n as i32)) / (1.0 - b);
            worst = worst.max((got - series).abs()).max((got - closed).abs());
            if let Some(p) = prev {
                check(got == 1.0 + b * p, format!("recurrence broken at beta={b}, n={n}"))?;
            }
            prev = Some(got);
        }
    }
    check(worst < 1e-12, format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:.1e}, recurrence exact"))
}

fn beta_endpoints() -> Outcome {
    let t = ProtocolTable::default_table();
    let w = WeightTable::build(&t, Beta::new(0.0).unwrap());
    check(w.weights().iter().all(|&x| x == 1.0), "beta=0 weights not all 1")?;
    let beta = Beta::new(0.999999).unwrap();
    let mut worst = 0.0f64;
    for n in 1..=4u32 {
        worst = worst.max((effective_capacity(beta, n).unwrap() - n as f64).abs());
    }
    check(worst < 1e-4, format!("|E - n| = {worst:e}"))?;
    Ok(format!("beta=0 uniform, |E - n| <= {worst:.1e} near beta=1"))
}

fn awing_checks() -> Outcome {
    let (omega, theta, alpha, eps) = (14.0f64, 0.5f64, 2.1f64, 1.0f64);
    let p = AWingParams { omega, theta, alpha, epsilon: eps };
    let mut worst_cont = 0.0f64;
    for y in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let e = alpha - y;
        let r = (theta / eps).powf(e);
        let a = omega * e * (theta / eps).powf(e - 1.0) / (eps * (1.0 + r));
        let c = theta * a - omega * (1.0 + r).ln();
        let log_branch = omega * (1.0 + r).ln();
        let lin_branch = a * theta - c;
        worst_cont = worst_cont.max((log_branch - lin_branch).abs());
        // the library on both sides of the switch
        for s in [-1.0, 1.0] {
            let at = awing_pixel(y, y + s * theta, &p);
            let inside = awing_pixel(y, y + s * (theta - 1e-13), &p);
            worst_cont = worst_cont.max((at - log_branch).abs()).max((inside - log_branch).abs());
        }
    }
    check(worst_cont < 1e-9, format!("branch gap {worst_cont:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_grad = 0.0f64;
    let mut n = 0;
    while n < 100 {
        let y: f64 = rng.random_range(0.0..1.0);
        let yh: f64 = rng.random_range(-1.0..2.0);
        let d = (yh - y).abs();
        if d < 1e-3 || (d - theta).abs() < 1e-3 {
            continue;
        }
        let h = 1e-6;
        let fd = (awing_pixel(y, yh + h, &p) - awing_pixel(y, yh - h, &p)) / (2.0 * h);
        let an = awing_pixel_grad(y, yh, &p);
        worst_grad = worst_grad.max((an - fd).abs() / an.abs().max(fd.abs()));
        n += 1;
    }
    check(worst_grad < 1e-5, format!("gradient rel error {worst_grad:e}"))?;
    Ok(format!("branch gap {worst_cont:.1e}, gradient rel error {worst_grad:.1e}"))
}

fn fmb_monotonicity() -> Outcome {
    let t = ProtocolTable::default_table();
    let gen = SynthFace::new(&t, 128).map_err(|e| e.to_string())?;
    let mut targets = Vec::new();
    for ds in DatasetId::ALL {
        for s in gen.samples(ds, 2, 64, 11).map_err(|e| e.to_string())? {
            targets.push(encode(&s.landmarks, &t, (64, 64), 4, 1.5).map_err(|e| e.to_string())?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds: Vec<HeatmapStack> = targets
        .iter()
        .map(|tg| {
            let mut p = tg.clone();
            for plane in &mut p.planes {
                for v in plane.data_mut() {
                    *v = rng.random_range(0.0..0.3);
                }
            }
            p
        })
        .collect();
    let counts = t.counts();
    let of_count = |k: usize| -> Vec<UnifiedLandmarkId> {
        (0..counts.len()).filter(|&i| counts[i] == k).map(|i| UnifiedLandmarkId::new(i).unwrap()).collect()
    };
    let (four, one) = (of_count(4), of_count(1));
    check(!four.is_empty() && !one.is_empty(), "protocol lacks count-4 or count-1 landmarks")?;
    let mut ratios = Vec::new();
    for b in [0.0, 0.3, 0.6, 0.9, 0.999] {
        let w = WeightTable::build(&t, Beta::new(b).unwrap());
        let br = fmb_batch_loss(&targets, &preds, &t, &w, &AWingParams::default()).map_err(|e| e.to_string())?;
        let sum = |ids: &[UnifiedLandmarkId]| ids.iter().filter_map(|u| br.per_unified_landmark.get(u)).map(|x| x.weighted).sum::<f64>();
        ratios.push(sum(&four) / sum(&one));
    }
    check(ratios.windows(2).all(|w| w[1] <= w[0]), format!("ratios {ratios:?}"))?;
    Ok(format!("count-4/count-1 ratio {:.3} -> {:.3}", ratios[0], ratios[4]))
}

/// Naive DFT in the centered layout: bin (r, c) holds frequency
/// (r - H/2, c - W/2).
fn direct_dft(img: &ImagePlane) -> Vec<(f64, f64)> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (ku, kv) = ((r + h - h / 2) % h, (c + w - w / 2) % w);
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((ku * y) as f64 / h as f64 + (kv * x) as f64 / w as f64);
                    re += img.get(y, x) * ang.cos();
                    im += img.get(y, x) * ang.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

fn frequency_core() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut round = 0.0f64;
    for _ in 0..5 {
        let img = ImagePlane::from_fn(64, 64, |_, _| rng.random::<f64>());
        let back = ifft2_real(&fft2(&img).unwrap()).unwrap();
        round = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(round, f64::max);
    }
    check(round < 1e-9, format!("round trip {round:e}"))?;

    let mut dft = 0.0f64;
    for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 7), (8, 8), (8, 6)] {
        let img = ImagePlane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let fast = fft2(&img).unwrap();
        for (z, (re, im)) in fast.data().iter().zip(direct_dft(&img)) {
            dft = dft.max((z.re - re).abs()).max((z.im - im).abs());
        }
    }
    check(dft < 1e-9, format!("fft vs direct DFT {dft:e}"))?;

    let mask = FrequencyMask::build(64, 64, 20.0).unwrap();
    check(mask.get(32, 32) == 0.0, format!("mask center {}", mask.get(32, 32)))?;
    let at20 = mask.get(32, 52);
    let want = 1.0 - (-0.5f64).exp();
    check((at20 - want).abs() < 1e-12, format!("mask at distance 20: {at20}"))?;
    check((mask.get(12, 32) - want).abs() < 1e-12, "mask not isotropic at distance 20")?;

    let flat = extract_hf(&ImagePlane::filled(64, 64, 0.7), 20.0).unwrap();
    let resid = flat.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check(resid < 1e-9, format!("constant image leaves {resid:e}"))?;
    Ok(format!("round trip {round:.1e}, DFT {dft:.1e}, constant residue {resid:.1e}"))
}

fn heatmap_round_trip() -> Outcome {
    let t = ProtocolTable::default_table();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stride = 4;
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let ds = DatasetId::ALL[k % 4];
        let n = t.dataset_size(ds).unwrap();
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]).collect();
        let lms = LandmarkSet::new(ds, coords);
        let stack = encode(&lms, &t, (64, 64), stride, 1.5).map_err(|e| e.to_string())?;
        let dec = decode(&stack).map_err(|e| e.to_string())?;
        for (local, u) in t.forward(ds).unwrap().iter().enumerate() {
            let (got, want) = (dec.get(*u), lms.coords[local]);
            worst = worst.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
        }
        if k % 50 == 0 {
            let mut scaled = stack.clone();
            for p in &mut scaled.planes {
                for v in p.data_mut() {
                    *v *= 3.7;
                }
            }
            check(decode(&scaled).unwrap().coords == dec.coords, "argmax changed under positive scaling")?;
        }
    }
    check(worst <= 0.75 * stride as f64, format!("per-axis error {worst}"))?;
    Ok(format!("max per-axis error {worst:.3} px (limit {})", 0.75 * stride as f64))
}

fn metric_checks() -> Outcome {
    let gt = LandmarkSet::new(DatasetId::W300, vec![[0.0, 0.0], [10.0, 0.0]]);
    let pred = LandmarkSet::new(DatasetId::W300, vec![[3.0, 0.0], [10.0, 4.0]]);
    let e = nme(&gt, &pred, &NormalizationRule::Fixed(10.0)).map_err(|e| e.to_string())?;
    check(e == 0.35, format!("hand case {e}"))?;
    let fr = failure_rate(&[0.05, 0.12, 0.20], 0.10).map_err(|e| e.to_string())?;
    check(fr == 2.0 / 3.0, format!("failure rate {fr}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rule = NormalizationRule::for_dataset(NormKind::InterOcular, DatasetId::W300, None).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let g: Vec<[f64; 2]> = (0..68).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let p: Vec<[f64; 2]> = g.iter().map(|c| [c[0] + rng.random_range(-3.0..3.0), c[1] + rng.random_range(-3.0..3.0)]).collect();
        let s: f64 = rng.random_range(0.2..5.0);
        let scale = |v: &[[f64; 2]]| v.iter().map(|c| [c[0] * s, c[1] * s]).collect::<Vec<_>>();
        let base = nme(&LandmarkSet::new(DatasetId::W300, g.clone()), &LandmarkSet::new(DatasetId::W300, p.clone()), &rule).unwrap();
        let scaled = nme(&LandmarkSet::new(DatasetId::W300, scale(&g)), &LandmarkSet::new(DatasetId::W300, scale(&p)), &rule).unwrap();
        worst = worst.max((base - scaled).abs());
    }
    check(worst < 1e-12, format!("scale invariance {worst:e}"))?;
    Ok(format!("NME 0.35, FR 2/3, scale drift {worst:.1e}"))
}

fn sampler_checks() -> Outcome {
    let sizes = [19, 40, 13, 27];
    let mut a = MixedBatchSampler::new(sizes, 2, 21).map_err(|e| e.to_string())?;
    let mut b = MixedBatchSampler::new(sizes, 2, 21).unwrap();
    for k in 0..1000 {
        let (x, y) = (a.next_batch(), b.next_batch());
        check(x.composition() == [2, 2, 2, 2], format!("batch {k} composition {:?}", x.composition()))?;
        check(x == y, format!("batch {k} differs between seeded samplers"))?;
    }
    Ok("1000 batches of {2,2,2,2}, seeded sequence reproduced".into())
}

fn small_batch(net: &Network, per_ds: usize) -> (Tensor, Tensor, Vec<HeatmapStack>, ProtocolTable) {
    let t = ProtocolTable::default_table();
    let gen = SynthFace::new(&t, 128).unwrap();
    let mut images: Vec<Image> = Vec::new();
    let mut targets = Vec::new();
    for ds in DatasetId::ALL {
        for s in gen.samples(ds, per_ds, 64, 13).unwrap() {
            targets.push(encode(&s.landmarks, &t, (64, 64), 4, 1.5).unwrap());
            images.push(s.image);
        }
    }
    let refs: Vec<&Image> = images.iter().collect();
    let x = net.images_to_tensor(&refs).unwrap();
    let hf = net.high_frequency(&x).unwrap();
    (x, hf, targets, t)
}

fn network_gradcheck() -> Outcome {
    let mut net = Network::new(NetConfig::default()).map_err(|e| e.to_string())?;
    let (x, hf, targets, t) = small_batch(&net, 1);
    let w = WeightTable::build(&t, Beta::new(0.9).unwrap());
    let p = AWingParams::default();
    let loss = |out: &Tensor| {
        let preds = output_to_stacks(out, 4);
        let (b, g) = unifl::loss::fmb_batch_loss_with_grad(&targets, &preds, &t, &w, &p, true).unwrap();
        (b.total, stacks_to_tensor(&g.unwrap()).unwrap())
    };
    let entries = gradcheck(&mut net, &x, &hf, &loss, 20, 1e-6, 10).map_err(|e| e.to_string())?;
    check(entries.len() == 20, format!("{} entries", entries.len()))?;
    let worst = entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    check(
        worst.rel_error < 1e-4,
        format!("{}[{}]: analytic {:e} numeric {:e} rel {:e}", worst.name, worst.index, worst.analytic, worst.numeric, worst.rel_error),
    )?;
    Ok(format!("20 parameters, worst rel error {:.1e} ({})", worst.rel_error, worst.name))
}

fn ablation_severed() -> Outcome {
    let mut cfg = NetConfig::default();
    cfg.set_prompt_width(0);
    let mut net = Network::new(cfg).map_err(|e| e.to_string())?;
    let (x, hf, _, _) = small_batch(&net, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let other = Tensor::from_fn(hf.shape(), |_| rng.random_range(-5.0..5.0));
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut outs = Vec::new();
    for h in [&hf, &other, &Tensor::zeros(hf.shape())] {
        outs.push(bits(&net.forward(&x, h, Mode::Eval).map_err(|e| e.to_string())?));
    }
    check(outs.windows(2).all(|w| w[0] == w[1]), "output depends on the high-frequency input")?;
    let fgsa = net.params().ids().filter(|&id| net.params().name(id).contains("fgsa")).count();
    check(fgsa == 0, format!("{fgsa} prompt parameters present"))?;
    Ok("3 distinct high-frequency inputs, identical output bits".into())
}

fn training_sanity() -> Outcome {
    let cfg = TrainConfig { iterations: 200, synth_per_dataset: 4, augment: false, seed: 2024, ..TrainConfig::default() };
    let run = || -> Result<(f64, f64, Vec<u8>, Trainer), String> {
        let mut tr = Trainer::from_config(cfg.clone()).map_err(|e| e.to_string())?;
        let before = tr.pool_loss().map_err(|e| e.to_string())?;
        tr.run(|_| {}).map_err(|e| e.to_string())?;
        let after = tr.pool_loss().map_err(|e| e.to_string())?;
        let ck = tr.checkpoint_bytes().map_err(|e| e.to_string())?;
        Ok((before, after, ck, tr))
    };
    let (before, after, ck_a, tr) = run()?;
    check(tr.pool().all().count() == 16, "pool is not 16 samples")?;
    check(after < 0.5 * before, format!("loss {before:.4} -> {after:.4}"))?;
    let (_, _, ck_b, _) = run()?;
    check(ck_a == ck_b, "seeded runs produced different checkpoints")?;
    let first = tr.schedule().milestones[0];
    let lr = tr.log()[first].lr;
    check(lr == 0.8 * 2.5e-4 && tr.log()[first - 1].lr == 2.5e-4, format!("lr at milestone {first}: {lr}"))?;
    Ok(format!("loss {before:.4} -> {after:.4} ({:.0}%), checkpoints identical, lr {lr:e} after iteration {first}", 100.0 * after / before))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 12] = [
        ("protocol aggregates", protocol_aggregates, 1),
        ("effective capacity oracle", capacity_oracle, 1),
        ("beta endpoints", beta_endpoints, 1),
        ("awing continuity and gradient", awing_checks, 1),
        ("fmb reweighting monotonicity", fmb_monotonicity, 5),
        ("frequency core", frequency_core, 5),
        ("heatmap round trip", heatmap_round_trip, 10),
        ("metrics", metric_checks, 1),
        ("mixed-batch sampler", sampler_checks, 5),
        ("network gradient check", network_gradcheck, 60),
        ("prompt ablation severs high-frequency input", ablation_severed, 30),
        ("training sanity", training_sanity, 300),
    ];
    let mut failed = 0;
    for (k, (name, f, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let el = t0.elapsed();
        let result = match result {
            Ok(_) if el > Duration::from_secs(*budget) => Err(format!("took {:.1}s, budget {budget}s", el.as_secs_f64())),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.2}s]", k + 1, el.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{:.2}s]", k + 1, el.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
