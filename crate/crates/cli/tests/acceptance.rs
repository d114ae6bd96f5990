//! End-to-end acceptance criteria, run in order by a plain `main` so that each
//! prints one `[PASS]`/`[FAIL]` line and the timing checks have the machine to
//! themselves. Exits non-zero if any criterion fails.
//!
//! Arguments are optional name filters, e.g.
//! `cargo test --test acceptance -- scaling`; `--skip <name>` excludes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmunet::checkpoint::Checkpoint;
use cmunet::data::{load_sample, save_sample, Dataset, Split};
use cmunet::loss::{cross_entropy, dice_loss, segmentation_loss, total_loss};
use cmunet::metrics::MetricReport;
use cmunet::model::{CmUnet, ModelConfig};
use cmunet::nn::Mode;
use cmunet_cli::bench::BenchReport;
use cmunet_cli::checks::{self, CheckResult};
use cmunet_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Whether the criterion held, and what was measured.
type Verdict = (bool, String);

fn suite_detail(results: &[CheckResult]) -> String {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.measured / r.tolerance).fold(0.0, f64::max);
    if failed.is_empty() {
        format!("{} checks, worst measured/tolerance {worst:.3}", results.len())
    } else {
        format!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join("; "))
    }
}

fn cli(args: &[&str]) -> i32 {
    cmunet_cli::run(std::iter::once("cmunet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn generate(dir: &Path, num: usize, seed: u64) -> PathBuf {
    let root = dir.join("data");
    assert_eq!(cli(&["generate", "--out", s(&root), "--num", &num.to_string(), "--size", "64", "--classes", "4", "--seed", &seed.to_string()]), 0);
    root
}

fn train(dir: &Path, name: &str, data: &Path, config: &str) -> (i32, PathBuf) {
    let cfg = dir.join(format!("{name}.json"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join(format!("{name}.cmuw"));
    (cli(&["train", "--config", s(&cfg), "--data", s(data), "--out", s(&out)]), out)
}

/// `(train_loss, val_mIoU)` per epoch from a training log.
fn epoch_log(out: &Path) -> Vec<(f64, f64)> {
    let text = std::fs::read_to_string(cmunet::train::log_path(out)).unwrap();
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v.get("epoch").is_some())
        .map(|v| (v["train_loss"].as_f64().unwrap(), v["val_mIoU"].as_f64().unwrap()))
        .collect()
}

fn c01_scan_oracle_equivalence() -> Verdict {
    let t = Instant::now();
    let results = checks::scan_suite(100, 1);
    let secs = t.elapsed().as_secs_f64();
    let ok = results.iter().all(|r| r.passed) && secs < 60.0;
    (ok, format!("{}, {secs:.1}s (< 60s)", suite_detail(&results)))
}

fn c02_gradient_suite() -> Verdict {
    let t = Instant::now();
    let results = checks::grads_suite();
    let secs = t.elapsed().as_secs_f64();
    let ok = results.iter().all(|r| r.passed) && secs < 120.0 && checks::GRAD_PROBES >= 20;
    (ok, format!("{}, {} probes each, {secs:.1}s (< 120s)", suite_detail(&results), checks::GRAD_PROBES))
}

fn c03_discretization_limit() -> Verdict {
    let results = checks::discretization_checks();
    (results.iter().all(|r| r.passed), suite_detail(&results))
}

fn c04_metrics_oracle() -> Verdict {
    let results = checks::metrics_suite(500, 4);
    (results.iter().all(|r| r.passed), suite_detail(&results))
}

fn c05_loss_identities() -> Verdict {
    let (b, k, h, w) = (2, 4, 8, 8);
    let target: Vec<u8> = (0..b * h * w).map(|i| ((i * 7 + i / 5) % k) as u8).collect();
    let mut onehot = vec![-30.0f64; b * k * h * w];
    for (p, &c) in target.iter().enumerate() {
        let (bi, q) = (p / (h * w), p % (h * w));
        onehot[(bi * k + c as usize) * h * w + q] = 30.0;
    }
    let dice = dice_loss(&Tensor::new(&[b, k, h, w], onehot).unwrap(), &target).unwrap().item().unwrap();
    let ce = cross_entropy(&Tensor::<f64>::zeros(&[b, k, h, w]), &target).unwrap().item().unwrap();
    let ce_err = (ce - 4f64.ln()).abs();

    let model = CmUnet::<f32>::new(ModelConfig { multi_output: false, ..ModelConfig::default() }).unwrap();
    let x = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let out = model.forward(&x, Mode::Train).unwrap();
    let t: Vec<u8> = (0..64 * 64).map(|i| (i % 4) as u8).collect();
    let total = total_loss(&out, &t, 0.4).unwrap().item().unwrap();
    let principal = segmentation_loss(&out.final_logits, &t).unwrap().item().unwrap();

    let ok = dice <= 1e-5 && ce_err <= 1e-6 && total.to_bits() == principal.to_bits();
    (ok,
        format!("perfect dice {dice:.2e} (<= 1e-5), |CE - ln 4| {ce_err:.2e} (<= 1e-6), single-output total == principal: {}", total.to_bits() == principal.to_bits()))
}

/// ResNet basic-block trunk: 7x7 stem, 3x3 convs, 1x1 projection shortcuts,
/// two affine parameters per batch-norm channel.
fn resnet_trunk_params(channels: &[usize], blocks: &[usize]) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let mut total = conv(3, channels[0], 7) + 2 * channels[0];
    let mut prev = channels[0];
    for (stage, (&c, &n)) in channels.iter().zip(blocks).enumerate() {
        for b in 0..n {
            let i = if b == 0 { prev } else { c };
            total += conv(i, c, 3) + conv(c, c, 3) + 4 * c;
            if b == 0 && (stage > 0 || i != c) {
                total += conv(i, c, 1) + 2 * c;
            }
        }
        prev = c;
    }
    total
}

fn c06_parameter_budget() -> Verdict {
    let model = CmUnet::<f32>::new(ModelConfig::paper_scale()).unwrap();
    let total = model.count_parameters() as f64;
    let enc = model.encoder_parameter_count() as f64;
    let analytic = resnet_trunk_params(&[64, 128, 256, 512], &[2, 2, 2, 2]) as f64;
    let (total_dev, enc_dev) = ((total - 12.89e6).abs() / 12.89e6, (enc - analytic).abs() / analytic);
    (total_dev <= 0.15 && enc_dev <= 0.02,
        format!("total {:.3} M vs 12.89 M ({:.1}% <= 15%), encoder {enc} vs analytic {analytic} ({:.2}% <= 2%)", total / 1e6, 100.0 * total_dev, 100.0 * enc_dev))
}

fn c07_desk_scale_training() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 250, 42);
    let meta = Dataset::open(&data).unwrap().meta;
    assert_eq!((meta.train.len(), meta.val.len()), (200, 50));
    let t = Instant::now();
    let (code, out) = train(dir.path(), "mini", &data, r#"{ "train": { "epochs": 30 } }"#);
    let secs = t.elapsed().as_secs_f64();
    let log = if code == 0 { epoch_log(&out) } else { Vec::new() };
    let best = log.iter().map(|e| e.1).fold(f64::NAN, f64::max);
    let (first, last) = (log.first().map_or(f64::NAN, |e| e.0), log.last().map_or(f64::NAN, |e| e.0));
    let drop = 1.0 - last / first;
    let ok = code == 0 && log.len() == 30 && best >= 0.85 && secs <= 900.0 && drop >= 0.5;
    (ok,
        format!("best val mIoU {best:.4} (>= 0.85) in {} epochs, {secs:.0}s (<= 900s), train loss {first:.3} -> {last:.3} ({:.0}% drop, >= 50%)", log.len(), 100.0 * drop))
}

fn c08_ablation_harness() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 40, 8);
    let mut rows = Vec::new();
    let mut ok = true;
    for (msaa, multi) in [(true, true), (false, true), (true, false), (false, false)] {
        let name = format!("msaa_{msaa}_multi_{multi}");
        let config = format!(r#"{{ "train": {{ "epochs": 2 }}, "ablation": {{ "msaa": {msaa}, "multi_output": {multi} }} }}"#);
        let (code, out) = train(dir.path(), &name, &data, &config);
        let report = dir.path().join(format!("{name}.report.json"));
        let eval = if code == 0 { cli(&["eval", "--ckpt", s(&out), "--data", s(&data), "--report", s(&report)]) } else { code };
        if eval != 0 {
            ok = false;
            rows.push((name, 0, None));
            continue;
        }
        let params = Checkpoint::load(&out).unwrap().to_model::<f32>().unwrap().count_parameters();
        let rep = MetricReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
        rows.push((name, params, Some(rep)));
    }
    let reports: Vec<&MetricReport> = rows.iter().filter_map(|r| r.2.as_ref()).collect();
    ok &= reports.len() == 4 && reports.iter().all(|r| r.per_class.len() == reports[0].per_class.len() && r.included_classes == reports[0].included_classes);
    let params = |n: &str| rows.iter().find(|r| r.0 == n).map_or(0, |r| r.1);
    ok &= params("msaa_true_multi_true") > params("msaa_false_multi_true");
    let table: Vec<String> = rows
        .iter()
        .map(|(n, p, r)| format!("{n} {p} params mIoU {}", r.as_ref().map_or("-".into(), |r| format!("{:.3}", r.miou))))
        .collect();
    (ok, table.join(", "))
}

fn c09_linear_scaling() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.json");
    let code = cli(&["bench-scan", "--lengths", "4096,8192,16384,32768", "--channels", "16", "--state", "8", "--reps", "15", "--report", s(&path)]);
    assert_eq!(code, 0);
    let rep: BenchReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let ok = rep.parallel_ratios.len() == 3 && rep.parallel_ratios.iter().all(|&r| r <= 2.6) && rep.environment.contains("deterministic=false");
    let ratios: Vec<String> = rep.parallel_ratios.iter().map(|r| format!("{r:.2}")).collect();
    (ok, format!("ratios [{}] (each <= 2.6), {}", ratios.join(", "), rep.environment))
}

fn c10_determinism_and_round_trips() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 24, 3);
    let config = r#"{ "train": { "epochs": 2, "deterministic": true } }"#;
    let (ca, a) = train(dir.path(), "a", &data, config);
    let (cb, b) = train(dir.path(), "b", &data, config);
    assert_eq!((ca, cb), (0, 0));
    let read = |p: &Path| std::fs::read(p).unwrap();
    let best = cmunet::train::best_path;
    let same_final = read(&a) == read(&b);
    let same_best = read(&best(&a)) == read(&best(&b));

    let ck = Checkpoint::load(&a).unwrap();
    let ck_trip = ck.encode() == read(&a) && Checkpoint::from_model(&ck.to_model::<f32>().unwrap(), ck.meta.clone()).encode() == read(&a);

    let ds = Dataset::open(&data).unwrap();
    let id = &ds.ids(Split::Val)[0];
    let sample = load_sample(&ds.image_path(id), &ds.mask_path(id), 4).unwrap();
    let (img, mask) = (dir.path().join("copy.ppm"), dir.path().join("copy.pgm"));
    save_sample(&sample, &img, &mask).unwrap();
    let image_trip = read(&img) == read(&ds.image_path(id)) && read(&mask) == read(&ds.mask_path(id));

    let report = dir.path().join("report.json");
    assert_eq!(cli(&["eval", "--ckpt", s(&a), "--data", s(&data), "--report", s(&report)]), 0);
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed = MetricReport::from_json(&text).unwrap();
    let report_trip = parsed.to_json() == text && MetricReport::from_json(&parsed.to_json()).unwrap() == parsed;

    (same_final && same_best && ck_trip && image_trip && report_trip,
        format!("identical checkpoints final {same_final} best {same_best}; round-trips checkpoint {ck_trip}, PPM/PGM {image_trip}, report JSON {report_trip}"))
}

type Criterion = (&'static str, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    ("scan_oracle", "parallel scan == sequential scan, 100 instances", c01_scan_oracle_equivalence),
    ("gradients", "gradients vs central differences", c02_gradient_suite),
    ("discretization", "ZOH branches and A -> 0 limit", c03_discretization_limit),
    ("metrics", "metrics vs rational oracle", c04_metrics_oracle),
    ("losses", "loss identities", c05_loss_identities),
    ("parameters", "parameter budget at full scale", c06_parameter_budget),
    ("training", "mini model on synthetic 4-class data", c07_desk_scale_training),
    ("ablation", "ablation flags train and report", c08_ablation_harness),
    ("scaling", "parallel scan growth per doubling", c09_linear_scaling),
    ("determinism", "determinism and lossless round-trips", c10_determinism_and_round_trips),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut include = Vec::new();
    let mut skip = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--skip" => skip.extend(it.next().cloned()),
            flag if flag.starts_with('-') => {}
            name => include.push(name.to_string()),
        }
    }
    let selected = |key: &str| (include.is_empty() || include.iter().any(|f| key.contains(f.as_str()))) && !skip.iter().any(|f| key.contains(f.as_str()));

    let started = Instant::now();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (key, title, run)) in CRITERIA.iter().enumerate() {
        if !selected(key) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (passed, detail) = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!passed);
        println!("[{}] criterion {:>2} {title}: {detail} [{:.1}s]", if passed { "PASS" } else { "FAIL" }, i + 1, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {ran} criteria, {failed} failed, {:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
