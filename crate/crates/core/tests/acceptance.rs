//! Acceptance gate: runs each criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use abn_core::abn::{attention_apply, cam_head_equivalence, AbnModel, Mechanism, NetworkSpec};
use abn_core::checkpoint::Checkpoint;
use abn_core::data::{
    load_cifar10, make_synthetic, make_synthetic_multitask, read_cifar_file, AugmentConfig, ChannelStats,
    Dataset, Labels, Split, SyntheticConfig,
};
use abn_core::layers::{Mode, Session};
use abn_core::tensor::Graph;
use abn_core::train::{
    combined_loss, comparison_csv, evaluate, mechanism_comparison, train_epochs, train_epochs_with, TrainConfig, EVAL_BATCH,
};
use abn_core::visualize::{attention_mass, encode_pgm, parse_pgm, quantize_min_max, upsample_nearest};
use abn_core::Tensor;
use common::gradcheck::{
    kink_free_instances, micro_abn_instance, micro_multitask_instance, primitive_cases, MODEL_TOL, PRIMITIVE_TOL,
};
use common::{micro_spec, positive, rng, uniform};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// The toy problem shared by the training criteria: four classes of 32×32
/// images, an 8×8 stamp, 400 training and 200 test images.
fn toy_splits() -> (Dataset, Dataset) {
    (
        make_synthetic(&SyntheticConfig::toy(100, 0.1, 1)).unwrap(),
        make_synthetic(&SyntheticConfig::toy(50, 0.1, 2)).unwrap(),
    )
}

fn toy_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        augment: Some(AugmentConfig::standard(32, 32)),
        ..TrainConfig::new(epochs, 64, seed)
    }
}

/// Per-sample attention maps `[N, T, h, w]` in evaluation mode.
fn attention_maps(model: &mut AbnModel, data: &Dataset) -> Tensor {
    let mut shape = Vec::new();
    let mut values = Vec::new();
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let out = model.infer(&data.subset(chunk).images).unwrap();
        let maps = out.attention_map.expect("attention branch");
        shape = maps.shape().to_vec();
        values.extend_from_slice(maps.data());
    }
    shape[0] = data.len();
    Tensor::new(shape, values).unwrap()
}

/// Mean fraction of map mass inside the ground-truth region of `task`,
/// over the samples where that region exists.
fn mean_mass(maps: &Tensor, data: &Dataset, task: usize) -> f64 {
    let (_, t, h, w) = maps.dims4().unwrap();
    let (_, ih, iw) = data.image_shape();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0;
    for (i, regions) in data.regions.iter().enumerate() {
        if let Some(r) = regions[task] {
            let start = (i * t + task) * plane;
            total += attention_mass(&maps.data()[start..start + plane], (h, w), r, (ih, iw)).unwrap();
            count += 1;
        }
    }
    total / count as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_primitive: (f64, String) = (0.0, String::new());
    for case in primitive_cases() {
        let (err, seed) = case.worst();
        if err > worst_primitive.0 || worst_primitive.1.is_empty() {
            worst_primitive = (err, format!("{} seed {seed}", case.name));
        }
    }
    let mut worst_model: f64 = 0.0;
    let mut instances = 0;
    for instance in [micro_abn_instance, micro_multitask_instance] {
        match kink_free_instances(instance) {
            Ok(accepted) => {
                instances += accepted.len();
                worst_model = accepted.iter().fold(worst_model, |w, &(_, e)| w.max(e));
            }
            Err(tried) => return Outcome::new(false, format!("fewer than 5 kink-free model instances in {tried} seeds")),
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_primitive.0 <= PRIMITIVE_TOL && worst_model <= MODEL_TOL && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "primitives worst {:.2e} ({}), {instances} micro-ABN instances worst {worst_model:.2e}, {:.1}s",
            worst_primitive.0,
            worst_primitive.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (n, m, c) = (1 + i % 3, 2 + i % 7, 2 + i % 5);
        let (h, w) = (1 + i % 6, 1 + (i / 6) % 6);
        let features = uniform(&[n, m, h, w], &mut r);
        let weight = uniform(&[m, c], &mut r);
        let bias = uniform(&[c], &mut r);
        let (fc, conv) = cam_head_equivalence(&features, &weight, Some(&bias)).unwrap();
        worst = worst.max(fc.max_abs_diff(&conv));
    }
    Outcome::new(worst <= 1e-9, format!("100 instances, max |GAP∘conv − linear∘GAP| = {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut identities = true;
    for _ in 0..20 {
        let feature = uniform(&[2, 5, 4, 3], &mut r);
        let mut g = Graph::new();
        let f = g.constant(feature.clone());
        let zero = g.constant(Tensor::zeros(&[2, 1, 4, 3]));
        let one = g.constant(Tensor::full(&[2, 1, 4, 3], 1.0));
        let residual = attention_apply(&mut g, f, zero, Mechanism::Residual).unwrap();
        let dot = attention_apply(&mut g, f, one, Mechanism::Dot).unwrap();
        identities &= g.value(residual).bit_eq(&feature) && g.value(dot).bit_eq(&feature);
    }

    let x = uniform(&[3, 3, 32, 32], &mut r);
    let mut plain = AbnModel::build(NetworkSpec::resnet_cifar(8, 4).with_mechanism(Mechanism::None), 3).unwrap();
    let mut abn = AbnModel::build(NetworkSpec::resnet_cifar(8, 4), 3).unwrap();
    let shared = plain.params.ids().all(|id| {
        let name = &plain.params.entry(id).name;
        abn.params.find(name).is_some_and(|twin| plain.params.get(id).bit_eq(abn.params.get(twin)))
    });
    let expected = plain.infer(&x).unwrap().per_scores;
    let prepared = abn.prepare(&x).unwrap();
    let (view, params) = abn.split();
    let mut s = Session::new(params, Mode::Eval);
    let input = s.input(prepared);
    let baseline = view.net.baseline_forward(&mut s, input).unwrap();
    let none_matches = s.value(baseline).bit_eq(&expected);
    Outcome::new(
        identities && shared && none_matches,
        format!("residual(M=0) and dot(M=1) bitwise: {identities}; mechanism none = split baseline bitwise: {}", shared && none_matches),
    )
}

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    let ce = |p: &Tensor, y: &[usize]| {
        let k = p.shape()[1];
        -y.iter().enumerate().map(|(i, &l)| p.data()[i * k + l].ln()).sum::<f64>() / y.len() as f64
    };
    for seed in 0..10u64 {
        let mut r = rng(40 + seed);
        let mut model = AbnModel::build(NetworkSpec::resnet_cifar(8, 4), seed).unwrap();
        let x = uniform(&[6, 3, 16, 16], &mut r);
        let y: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 4).collect();
        let labels = Labels::Classes { num_classes: 4, labels: y.clone() };
        let (view, params) = model.split();
        let mut s = Session::new(params, Mode::Train);
        let input = s.input(x);
        let out = view.forward(&mut s, input).unwrap();
        let parts = combined_loss(&mut s.graph, &view.spec, &out, &labels).unwrap();
        let independent =
            ce(s.value(out.att_scores.unwrap()), &y) + ce(s.value(out.per_scores), &y);
        worst = worst.max((s.value(parts.total).item() - independent).abs());

        // Multi-task: BCE over attention scores plus per-task two-way CE.
        let t = 3;
        let mut model = AbnModel::build(micro_spec().with_tasks(t), seed).unwrap();
        let x = uniform(&[5, 2, 8, 8], &mut r);
        let values: Vec<u8> = (0..5 * t).map(|_| r.random_bool(0.5) as u8).collect();
        let labels = Labels::Attributes { tasks: t, values: values.clone() };
        let (view, params) = model.split();
        let mut s = Session::new(params, Mode::Train);
        let input = s.input(x);
        let out = view.forward(&mut s, input).unwrap();
        let parts = combined_loss(&mut s.graph, &view.spec, &out, &labels).unwrap();
        let att = s.value(out.att_scores.unwrap()).clone();
        let per = s.value(out.per_scores).clone();
        let mut bce = 0.0;
        let mut per_ce = 0.0;
        for (j, &v) in values.iter().enumerate() {
            let p = att.data()[j];
            bce -= if v == 1 { p.ln() } else { (1.0 - p).ln() };
            per_ce -= per.data()[j * 2 + v as usize].ln();
        }
        let independent = (bce + per_ce) / 5.0;
        worst = worst.max((s.value(parts.total).item() - independent).abs());
    }
    Outcome::new(worst <= 1e-12, format!("20 random batches, max |L − (L_att + L_per)| = {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    const EPOCHS: usize = 30;
    const BUDGET: Duration = Duration::from_secs(600);
    let start = Instant::now();
    let (train, test) = toy_splits();
    let spec = NetworkSpec::resnet_cifar(20, 4).with_mechanism(Mechanism::Residual);
    let mut model = AbnModel::build(spec, 0).unwrap();
    model.set_input_stats(&ChannelStats::from_images(&train.images).unwrap()).unwrap();
    let initial_mass = mean_mass(&attention_maps(&mut model, &test), &test, 0);
    let cfg = toy_config(EPOCHS, 0);
    let mut epochs_run = 0;
    let mut first_reached = None;
    train_epochs_with(&mut model, &train, Some(&test), &cfg, |r| {
        epochs_run += 1;
        if first_reached.is_none() && r.eval_metric.is_some_and(|e| e <= 5.0) {
            first_reached = Some(r.epoch + 1);
        }
    })
    .unwrap();
    let error = evaluate(&mut model, &test).unwrap();
    let mass = mean_mass(&attention_maps(&mut model, &test), &test, 0);
    let elapsed = start.elapsed();
    let area = 64.0 / 1024.0;
    let pass = 100.0 - error >= 95.0 && mass >= 2.0 * area && elapsed < BUDGET;
    Outcome::new(
        pass,
        format!(
            "ResNet-20 residual, {epochs_run} epochs: accuracy {:.1}% (≥95% first at epoch {}), \
             mass in region {:.1}% (init {:.1}%, need ≥{:.1}%), {:.0}s",
            100.0 - error,
            first_reached.map_or("-".to_string(), |e| e.to_string()),
            100.0 * mass,
            100.0 * initial_mass,
            200.0 * area,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let (train, test) = toy_splits();
    let spec = NetworkSpec::resnet_cifar(8, 4);
    let cfg = toy_config(COMPARE_EPOCHS, 6);
    let stats = ChannelStats::from_images(&train.images).unwrap();
    let rows = mechanism_comparison(spec, 6, &train, &test, &cfg, |m| m.set_input_stats(&stats)).unwrap();
    let csv = comparison_csv(&rows);
    let none = rows.iter().find(|r| r.mechanism == Mechanism::None).unwrap().top1_error;
    let attended_ok = rows
        .iter()
        .filter(|r| r.mechanism != Mechanism::None)
        .all(|r| r.top1_error <= none + 2.0);
    let shape_ok = csv.lines().count() == 4 && rows.len() == 3;
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {}%", r.mechanism.name(), r.top1_error)).collect();
    Outcome::new(
        shape_ok && attended_ok,
        format!("ResNet-8, {COMPARE_EPOCHS} epochs, top-1 error: {}", summary.join(", ")),
    )
}

const COMPARE_EPOCHS: usize = 10;

fn criterion_7() -> Outcome {
    const TASKS: usize = 3;
    let cfg = SyntheticConfig::toy(0, 0.1, 71);
    let train = make_synthetic_multitask(&cfg, TASKS, 400).unwrap();
    let test = make_synthetic_multitask(&SyntheticConfig { seed: 72, ..cfg }, TASKS, 200).unwrap();
    let spec = NetworkSpec::resnet_cifar(8, 2).with_tasks(TASKS);
    let mut model = AbnModel::build(spec, 7).unwrap();
    model.set_input_stats(&ChannelStats::from_images(&train.images).unwrap()).unwrap();
    train_epochs(&mut model, &train, Some(&test), &toy_config(30, 7)).unwrap();
    let accuracy = evaluate(&mut model, &test).unwrap();
    let maps = attention_maps(&mut model, &test);
    let masses: Vec<f64> = (0..TASKS).map(|t| mean_mass(&maps, &test, t)).collect();
    let need = 2.0 * 64.0 / 1024.0;
    let pass = accuracy >= 90.0 && masses.iter().all(|&m| m >= need);
    let masses: Vec<String> = masses.iter().map(|m| format!("{:.1}%", 100.0 * m)).collect();
    Outcome::new(
        pass,
        format!(
            "ResNet-8 multi-task (dot), 30 epochs: mean task accuracy {accuracy:.1}%, own-region mass {} (need ≥{:.1}%)",
            masses.join(" / "),
            100.0 * need
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(format!("{name}.ckpt"));
        let status = Command::new(env!("CARGO_BIN_EXE_abn"))
            .args(["--seed", "8", "train", "--epochs", "3", "--batch-size", "16", "--depth", "8"])
            .args(["--image-size", "16", "--patch-size", "4", "--train-size", "64", "--test-size", "32"])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        (
            fs::read(&out).unwrap(),
            fs::read(dir.path().join(format!("{name}.history.csv"))).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    let identical = a == b;

    let mut model = Checkpoint::decode(&a.0).unwrap().into_model().unwrap();
    let mut loaded = Checkpoint::decode(&Checkpoint::from_model(&model).encode()).unwrap().into_model().unwrap();
    let probe = uniform(&[4, 3, 16, 16], &mut rng(8));
    let (x, y) = (model.infer(&probe).unwrap(), loaded.infer(&probe).unwrap());
    let round_trip = x.per_scores.bit_eq(&y.per_scores)
        && x.att_scores.unwrap().bit_eq(&y.att_scores.unwrap())
        && x.attention_map.unwrap().bit_eq(&y.attention_map.unwrap())
        && model.params.ids().all(|id| model.params.get(id).bit_eq(loaded.params.get(id)));
    Outcome::new(
        identical && round_trip,
        format!("two CLI runs byte-identical: {identical}; checkpoint round trip bitwise: {round_trip}"),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut record = vec![7u8];
    record.extend((0..3072).map(|i| ((i * 31 + 5) % 256) as u8));
    assert_eq!(record.len(), 3073);
    fs::write(dir.path().join("test_batch.bin"), &record).unwrap();
    let single = read_cifar_file(&dir.path().join("test_batch.bin")).unwrap();
    let via_split = load_cifar10(dir.path(), Split::Test).unwrap();
    let pixels_ok = (0..3072).all(|i| single.images.data()[i] == record[1 + i] as f64 / 255.0);
    let cifar_ok = single.class_labels() == Some(&[7][..])
        && single.images.shape() == [1, 3, 32, 32]
        && pixels_ok
        && via_split.images.bit_eq(&single.images);

    let mut pgm_ok = true;
    let mut r = rng(9);
    for (h, w, oh, ow) in [(16, 16, 32, 32), (8, 8, 32, 32), (4, 6, 13, 17), (5, 5, 5, 5)] {
        let map = positive(&[h * w], &mut r);
        let up = upsample_nearest(map.data(), (h, w), (oh, ow));
        pgm_ok &= (0..oh * ow).all(|i| up[i] == map.data()[(i / ow) * h / oh * w + (i % ow) * w / ow]);
        let pixels = quantize_min_max(&up);
        let bytes = encode_pgm(ow, oh, &pixels);
        let pgm = parse_pgm(&bytes).unwrap();
        pgm_ok &= pgm.width == ow && pgm.height == oh && pgm.maxval == 255 && pgm.pixels == pixels;
    }
    Outcome::new(
        cifar_ok && pgm_ok,
        format!("3073-byte CIFAR record recovered: {cifar_ok}; PGM parse + nearest-neighbour oracle: {pgm_ok}"),
    )
}

fn main() -> ExitCode {
    let criteria: [fn() -> Outcome; 9] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
    ];
    let only: Option<usize> = std::env::var("ABN_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, criterion) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = criterion();
        println!(
            "criterion {n}: {} — {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!outcome.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
