//! Acceptance suite. Prints one line per criterion and fails if any does.
//!
//! `CAAT_ACCEPTANCE=1,2,6` restricts the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;
#[path = "support/corpus.rs"]
mod corpus;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use caat::collectives::{
    partial_channel_reduce, partial_channel_reduce_vjp, CollectiveKind, MaskKind, Pass,
};
use caat::perf;
use caat::train::{
    load_checkpoint, logical_device_inference, CaatModel, DataSource, StepOptions, TrainConfig,
    Trainer,
};
use caat::transformer::{layer_forward, BackwardPlacement, LayerSync};
use caat::{CommLedger, PartialReduceSpec, PrecisionMode, RankSet, Tensor};
use common::reference::{self, RefModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_equivalence() -> Outcome {
    let (layers, hidden, heads, vocab, batch, seq) = (4, 128, 4, 256, 2, 8);
    let mut worst_act: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for ranks in [1, 2, 4] {
        let model = CaatModel::<f64>::init(
            common::model_config(layers, hidden, heads, vocab, seq, ranks, 1.0),
            11,
        )
        .map_err(|e| e.to_string())?;
        let oracle = RefModel::from_caat(&model);
        let data = common::random_batch(vocab, batch, seq, 5);
        let trace = oracle.forward(&data.inputs, &data.targets, batch, seq);
        let x = model
            .embed_tokens(&data.inputs, batch, seq)
            .map_err(|e| e.to_string())?;
        let mut xs = RankSet::replicate(&x, ranks);
        let mut ledger = CommLedger::new();
        for (i, layer) in model.layers.iter().enumerate() {
            xs = layer_forward(&xs, layer, &LayerSync::default(), &mut ledger)
                .map_err(|e| e.to_string())?
                .0;
            for t in xs.iter() {
                worst_act =
                    worst_act.max(common::max_abs_diff(t.data(), &trace.hidden[i + 1].data));
            }
        }
        let want = reference::flat(
            &oracle
                .loss_and_grads(&data.inputs, &data.targets, batch, seq)
                .1,
        );
        for placement in [
            BackwardPlacement::HAfterNorm,
            BackwardPlacement::GBeforeNorm,
        ] {
            let opts = StepOptions {
                placement,
                ..StepOptions::default()
            };
            let (loss, grads) = model
                .loss_and_grads(&data, &opts, &mut ledger)
                .map_err(|e| e.to_string())?;
            worst_act = worst_act.max((loss - trace.loss).abs());
            for ((name, got), (ref_name, w)) in common::full_grads(&grads).iter().zip(&want) {
                ensure(name == ref_name, || {
                    format!("gradient order {name} vs {ref_name}")
                })?;
                worst_grad = worst_grad.max(common::max_abs_diff(got, w));
            }
        }
    }
    ensure(worst_act < 1e-10 && worst_grad < 1e-10, || {
        format!("activation diff {worst_act:e}, gradient diff {worst_grad:e}")
    })?;
    Ok(format!(
        "max |Δ| activations {worst_act:.1e}, gradients {worst_grad:.1e} (M=1,2,4; h and g)"
    ))
}

/// Per-tensor norm-wise error and worst per-coordinate relative error.
fn fd_check(ranks: usize, p: f64, placement: BackwardPlacement) -> Result<(f64, f64), String> {
    let (vocab, seq) = (8, 4);
    let mut model =
        CaatModel::<f64>::init(common::model_config(2, 16, 4, vocab, seq, ranks, p), 21)
            .map_err(|e| e.to_string())?;
    common::randomize(&mut model, 0.4, 99);
    let data = common::random_batch(vocab, 2, seq, 5);
    let opts = StepOptions {
        placement,
        ..StepOptions::default()
    };
    let (_, grads) = model
        .loss_and_grads(&data, &opts, &mut CommLedger::new())
        .map_err(|e| e.to_string())?;
    let fd = common::fd_grads(&model, &data, &opts, 1e-5);
    let mut tensor_err: f64 = 0.0;
    let mut coord_err: f64 = 0.0;
    for (g, f) in grads.flat().iter().zip(&fd) {
        tensor_err = tensor_err.max(common::rel_err(g.data(), f));
        for (a, b) in g.data().iter().zip(f) {
            if b.abs() > 1e-6 {
                coord_err = coord_err.max((a - b).abs() / a.abs().max(b.abs()));
            }
        }
    }
    Ok((tensor_err, coord_err))
}

fn c2_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for ranks in [2, 4] {
        for p in [0.0, 0.25, 0.5, 1.0] {
            let (err, _) = fd_check(ranks, p, BackwardPlacement::HAfterNorm)?;
            ensure(err < 1e-6, || {
                format!("M={ranks} p={p}: relative error {err:e}")
            })?;
            worst = worst.max(err);
        }
    }
    Ok(format!(
        "worst per-tensor relative error {worst:.1e} over M=2,4 and p=0,0.25,0.5,1"
    ))
}

fn c3_mismatch() -> Outcome {
    let mut report = Vec::new();
    for ranks in [2, 4] {
        let (_, g_coord) = fd_check(ranks, 0.5, BackwardPlacement::GBeforeNorm)?;
        let (h_err, _) = fd_check(ranks, 0.5, BackwardPlacement::HAfterNorm)?;
        ensure(g_coord > 1e-2, || {
            format!("M={ranks}: g placement worst deviation only {g_coord:e}")
        })?;
        ensure(h_err < 1e-6, || {
            format!("M={ranks}: h placement error {h_err:e}")
        })?;
        report.push(format!("M={ranks}: g worst {g_coord:.2}, h {h_err:.1e}"));
    }
    Ok(report.join("; "))
}

fn random_set(ranks: usize, rows: usize, hidden: usize, seed: u64) -> RankSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RankSet::new(
        (0..ranks)
            .map(|_| Tensor::randn(&[rows, hidden], 1.0, &mut rng))
            .collect(),
    )
    .unwrap()
}

fn c4_self_adjoint() -> Outcome {
    let (rows, hidden, eps) = (3, 10, 1e-5);
    let mut worst: f64 = 0.0;
    for ranks in [2, 3] {
        for p in [0.0, 0.3, 0.7, 1.0] {
            for scale in [false, true] {
                let spec =
                    PartialReduceSpec::new(p, hidden, scale, ranks).map_err(|e| e.to_string())?;
                let x = random_set(ranks, rows, hidden, 1);
                let w = random_set(ranks, rows, hidden, 2);
                let vjp = partial_channel_reduce_vjp(
                    &w,
                    &spec,
                    PrecisionMode::Full64,
                    &mut CommLedger::new(),
                )
                .map_err(|e| e.to_string())?;
                let f = |x: &RankSet<f64>| -> f64 {
                    let y = partial_channel_reduce(
                        x,
                        &spec,
                        PrecisionMode::Full64,
                        &mut CommLedger::new(),
                    )
                    .unwrap();
                    w.iter().zip(y.iter()).map(|(a, b)| a.dot(b)).sum()
                };
                let (mut num, mut den) = (0.0, 0.0);
                for m in 0..ranks {
                    for i in 0..rows * hidden {
                        let mut plus = x.clone();
                        plus.rank_mut(m).data_mut()[i] += eps;
                        let mut minus = x.clone();
                        minus.rank_mut(m).data_mut()[i] -= eps;
                        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
                        let got = vjp.rank(m).data()[i];
                        num += (got - fd) * (got - fd);
                        den += got * got;
                    }
                }
                let err = (num / den).sqrt();
                ensure(err < 1e-8, || {
                    format!("M={ranks} p={p} scale={scale}: {err:e}")
                })?;
                worst = worst.max(err);
            }
        }
    }
    Ok(format!(
        "worst relative error {worst:.1e} over M=2,3 and p=0,0.3,0.7,1"
    ))
}

fn variance(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn c5_variance() -> Outcome {
    let samples = 100_000;
    let x = random_set(2, samples, 2, 17);
    let mut ratios = Vec::new();
    for (scale, lo, hi) in [(false, 1.8, 2.2), (true, 0.9, 1.1)] {
        let spec = PartialReduceSpec::new(0.5, 2, scale, 2).map_err(|e| e.to_string())?;
        let y = partial_channel_reduce(&x, &spec, PrecisionMode::Full64, &mut CommLedger::new())
            .map_err(|e| e.to_string())?;
        let shared = variance((0..samples).map(|i| y.rank(0).row(i)[0]));
        let private = variance(
            y.iter()
                .flat_map(|t| (0..samples).map(move |i| t.row(i)[1])),
        );
        let ratio = shared / private;
        ensure((lo..=hi).contains(&ratio), || {
            format!("scaling {scale}: ratio {ratio:.4}")
        })?;
        ratios.push(ratio);
    }
    Ok(format!(
        "shared/private variance {:.4} unscaled, {:.4} with sqrt(2) ({samples} samples)",
        ratios[0], ratios[1]
    ))
}

fn tiny_config(p: f64) -> TrainConfig {
    TrainConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        vocab: 32,
        seq_len: 8,
        batch: 2,
        steps: 3,
        p,
        tp: 2,
        synth_len: 2048,
        eval_windows: 2,
        ..TrainConfig::default()
    }
}

fn run_traffic(cfg: TrainConfig) -> Result<u64, String> {
    let steps = cfg.steps;
    let mut t = Trainer::<f64>::new(cfg).map_err(|e| e.to_string())?;
    for _ in 0..steps {
        t.step().map_err(|e| e.to_string())?;
    }
    Ok(t.ledger().tensor_parallel_elements(None))
}

fn c6_accounting() -> Outcome {
    let (batch, seq, hidden) = (2, 8, 32);
    let t = (batch * seq) as u64;
    for ranks in [2, 4] {
        for p in [0.0, 0.1, 0.25, 0.3, 0.5, 0.9, 1.0] {
            let shared = (hidden as f64 * p).floor() as u64;
            let spec = PartialReduceSpec::new(p, hidden, true, ranks).map_err(|e| e.to_string())?;
            let mut ledger = CommLedger::new();
            partial_channel_reduce(
                &random_set(ranks, batch * seq, hidden, 3),
                &spec,
                PrecisionMode::Full64,
                &mut ledger,
            )
            .map_err(|e| e.to_string())?;
            let one = ledger.kind_elements(CollectiveKind::PartialReduce, Pass::Forward);
            ensure(one == 2 * t * shared, || {
                format!("M={ranks} p={p}: one reduce logged {one}")
            })?;

            let model =
                CaatModel::<f64>::init(common::model_config(1, hidden, 4, 16, seq, ranks, p), 1)
                    .map_err(|e| e.to_string())?;
            let data = common::random_batch(16, batch, seq, 2);
            let x = RankSet::replicate(
                &model
                    .embed_tokens(&data.inputs, batch, seq)
                    .map_err(|e| e.to_string())?,
                ranks,
            );
            let mut ledger = CommLedger::new();
            layer_forward(&x, &model.layers[0], &LayerSync::default(), &mut ledger)
                .map_err(|e| e.to_string())?;
            let layer = ledger.tensor_parallel_elements(Some(Pass::Forward));
            ensure(layer == 2 * 2 * t * shared, || {
                format!("M={ranks} p={p}: layer logged {layer}")
            })?;
            if (hidden as f64 * p).fract() == 0.0 {
                let analytic = perf::payload(hidden as f64, t as f64, p);
                ensure(layer as f64 == 2.0 * analytic, || {
                    format!("layer {layer} vs payload {analytic}")
                })?;
            }
        }
    }

    let h = 16u64;
    let baseline = run_traffic(tiny_config(1.0))?;
    let mut report = Vec::new();
    for p in [0.0, 0.25, 0.5, 0.75] {
        let shared = (h as f64 * p).floor() as u64;
        let measured = run_traffic(tiny_config(p))?;
        ensure((baseline - measured) * h == baseline * (h - shared), || {
            format!("p={p}: run traffic {measured} vs baseline {baseline}")
        })?;
        report.push(format!("p={p} saves {}/{}", baseline - measured, baseline));
        for kind in [MaskKind::TopK, MaskKind::Random] {
            let masked = run_traffic(TrainConfig {
                mask: Some(kind),
                ..tiny_config(p)
            })?;
            ensure(
                (baseline - masked) * 4 * h == baseline * (h - shared),
                || format!("{kind} p={p}: run traffic {masked} vs baseline {baseline}"),
            )?;
        }
    }
    Ok(format!(
        "per reduce 2·t·floor(h·p) and per layer 2·P(p) exact; run savings (1-p) and masks (1-p)/4 exact: {}",
        report.join(", ")
    ))
}

fn c7_perf() -> Outcome {
    ensure(
        perf::speedup(768.0, 1024.0, 8.0, 1000.0, 1.0) == 0.0,
        || "speedup(p=1) != 0".into(),
    )?;
    let p_star = perf::optimal_p(768.0, 1024.0, 8.0, 1000.0);
    ensure(p_star == 1.0, || format!("p* = {p_star}"))?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for h in [256.0, 768.0, 4096.0, 8192.0] {
        for s in [128.0, 1024.0, 4096.0] {
            for r in [2.0, 4.0, 8.0, 16.0] {
                for c in [100.0, 1_000.0, 10_000.0, 100_000.0] {
                    let p = perf::optimal_p(h, s, r, c);
                    if p < 1.0 {
                        let g = perf::gemm_ops(h, s, r) / c;
                        let pay = perf::payload(h, s, p);
                        worst = worst.max((g - pay).abs() / g);
                        checked += 1;
                    }
                }
            }
        }
    }
    ensure(checked > 0 && worst <= 1e-12, || {
        format!("G vs P(p*) relative gap {worst:e}")
    })?;
    let masks = perf::mask_comm_reduction(0.5);
    ensure(masks == (0.5, 0.125), || {
        format!("mask_comm_reduction(0.5) = {masks:?}")
    })?;
    Ok(format!(
        "speedup(1)=0, p*(768,1024,1000,8)=1, G/C=P(p*) within {worst:.1e} on {checked} points, masks {masks:?}"
    ))
}

fn caat(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_caat"))
        .args(args)
        .env_remove("CAAT_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`caat {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

const CLI_RUN: [&str; 16] = [
    "--layers",
    "2",
    "--hidden",
    "32",
    "--heads",
    "4",
    "--seq-len",
    "16",
    "--batch",
    "2",
    "--steps",
    "6",
    "--eval-every",
    "3",
    "--tp",
    "2",
];

fn train_cli(out: &Path, extra: &[&str]) -> Result<String, String> {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend(CLI_RUN);
    args.extend(extra);
    caat(&args)
}

fn c8_logical_device() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = tmp.path().join("run");
    train_cli(&run, &["--p", "0.5"])?;
    let ckpt = load_checkpoint::<f64>(&run.join("checkpoint")).map_err(|e| e.to_string())?;
    ensure(ckpt.model.ranks() == 2, || {
        "checkpoint is not 2-rank".into()
    })?;
    let tokens: Vec<usize> = b"logical devices".iter().map(|&b| usize::from(b)).collect();
    let mut ledger = CommLedger::new();
    let distributed = ckpt
        .model
        .logits(&tokens, &mut ledger)
        .map_err(|e| e.to_string())?;
    let logical = logical_device_inference(&ckpt.model, &tokens).map_err(|e| e.to_string())?;
    ensure(distributed.bit_eq(&logical), || {
        format!("max diff {:e}", distributed.max_abs_diff(&logical))
    })?;
    let out = caat(&[
        "infer",
        "--ckpt",
        run.join("checkpoint").to_str().unwrap(),
        "--prompt-bytes",
        "ab",
        "--check-logical",
    ])?;
    ensure(out.lines().any(|l| l == "max_diff=0"), || {
        format!("infer printed {out}")
    })?;
    ensure(out.lines().any(|l| l == "logical_comm_elems=0"), || {
        format!("infer printed {out}")
    })?;
    Ok(format!(
        "2-rank logits bitwise equal on one device; distributed run logged {} elements, logical 0",
        ledger.total_elements()
    ))
}

/// Scale of the toy sweep. Learning rate and tensor-parallel degree are
/// the trainer defaults.
const SWEEP_STEPS: u64 = 2000;
const SWEEP_BATCH: usize = 2;
const SWEEP_SEQ: usize = 32;
const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_EVAL_WINDOWS: usize = 512;
const CORPUS_BYTES: usize = 1 << 20;

fn sweep_config(corpus: &Path, seed: u64, p: f64, mask: Option<MaskKind>) -> TrainConfig {
    TrainConfig {
        layers: 4,
        hidden: 128,
        heads: 4,
        vocab: 256,
        seq_len: SWEEP_SEQ,
        batch: SWEEP_BATCH,
        steps: SWEEP_STEPS,
        seed,
        p,
        mask,
        data: DataSource::Corpus(corpus.to_path_buf()),
        eval_windows: SWEEP_EVAL_WINDOWS,
        ..TrainConfig::default()
    }
}

fn final_val_loss(cfg: TrainConfig) -> Result<f64, String> {
    let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    for _ in 0..SWEEP_STEPS {
        t.step().map_err(|e| e.to_string())?;
    }
    t.evaluate().map(f64::from).map_err(|e| e.to_string())
}

fn c9_sweep() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("corpus.txt");
    fs::write(&path, corpus::english_like(2024, CORPUS_BYTES)).map_err(|e| e.to_string())?;
    let arms: [(&str, f64, Option<MaskKind>); 5] = [
        ("p=1", 1.0, None),
        ("p=0.5", 0.5, None),
        ("p=0", 0.0, None),
        ("topk@0.5", 0.5, Some(MaskKind::TopK)),
        ("random@0.5", 0.5, Some(MaskKind::Random)),
    ];
    let mut means = Vec::new();
    for (name, p, mask) in arms {
        let mut total = 0.0;
        for seed in SWEEP_SEEDS {
            let loss = final_val_loss(sweep_config(&path, seed, p, mask))?;
            eprintln!("  sweep {name} seed {seed}: val {loss:.4}");
            total += loss;
        }
        means.push((name, total / SWEEP_SEEDS.len() as f64));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (base, half, none, topk, random) =
        (means[0].1, means[1].1, means[2].1, means[3].1, means[4].1);
    let summary = means
        .iter()
        .map(|(n, l)| format!("{n} {l:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut broken = Vec::new();
    if (half - base).abs() > 0.1 * base {
        broken.push("p=0.5 not within 10% of p=1");
    }
    if none <= base {
        broken.push("p=0 not worse than p=1");
    }
    if topk <= half {
        broken.push("topk not worse than p=0.5");
    }
    if random <= half {
        broken.push("random not worse than p=0.5");
    }
    ensure(broken.is_empty(), || {
        format!("{}; mean final val loss {summary}", broken.join(", "))
    })?;
    Ok(format!("mean final val loss {summary} ({elapsed:.0} s)"))
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for extra in [
        &["--p", "0.5"][..],
        &["--p", "0.25", "--mask", "random"][..],
        &["--p", "1", "--placement", "g", "--accum", "emulated16"][..],
    ] {
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let out_a = train_cli(&a, extra)?;
        let out_b = train_cli(&b, extra)?;
        let first = fs::read(a.join("metrics.csv")).map_err(|e| e.to_string())?;
        ensure(
            first == fs::read(b.join("metrics.csv")).map_err(|e| e.to_string())?,
            || format!("metrics differ for {extra:?}"),
        )?;
        ensure(out_a == out_b, || format!("stdout differs for {extra:?}"))?;
        train_cli(&a, extra)?;
        ensure(
            first == fs::read(a.join("metrics.csv")).map_err(|e| e.to_string())?,
            || format!("rerun into the same directory differs for {extra:?}"),
        )?;
        let ckpt = a.join("checkpoint");
        let infer = [
            "infer",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--prompt-bytes",
            "hi",
        ];
        ensure(caat(&infer)? == caat(&infer)?, || {
            "infer output differs".into()
        })?;
        checked += 1;
    }
    let csv = tmp.path().join("sweep.csv");
    let perf_args = [
        "perfmodel",
        "--h",
        "1024",
        "--s",
        "2048",
        "--r",
        "8",
        "--C",
        "50",
        "--csv",
        csv.to_str().unwrap(),
    ];
    caat(&perf_args)?;
    let sweep = fs::read(&csv).map_err(|e| e.to_string())?;
    caat(&perf_args)?;
    ensure(sweep == fs::read(&csv).map_err(|e| e.to_string())?, || {
        "perfmodel sweep differs".into()
    })?;
    Ok(format!(
        "{checked} training configurations, infer and perfmodel reran byte-identically"
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    check: fn() -> Outcome,
    /// Runtime limit in seconds.
    budget: Option<f64>,
    /// A soft failure is reported without failing the run.
    soft: bool,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "equivalence with the unsharded oracle",
            check: c1_equivalence,
            budget: Some(60.0),
            soft: false,
        },
        Criterion {
            id: 2,
            name: "finite-difference gradients (h placement)",
            check: c2_gradients,
            budget: Some(300.0),
            soft: false,
        },
        Criterion {
            id: 3,
            name: "g placement mismatch",
            check: c3_mismatch,
            budget: None,
            soft: false,
        },
        Criterion {
            id: 4,
            name: "self-adjoint partial channel-reduce",
            check: c4_self_adjoint,
            budget: None,
            soft: false,
        },
        Criterion {
            id: 5,
            name: "private-channel variance scaling",
            check: c5_variance,
            budget: None,
            soft: false,
        },
        Criterion {
            id: 6,
            name: "communication accounting",
            check: c6_accounting,
            budget: None,
            soft: false,
        },
        Criterion {
            id: 7,
            name: "performance model golden values",
            check: c7_perf,
            budget: None,
            soft: false,
        },
        Criterion {
            id: 8,
            name: "logical-device inference",
            check: c8_logical_device,
            budget: None,
            soft: false,
        },
        Criterion {
            id: 9,
            name: "toy-scale p sweep",
            check: c9_sweep,
            budget: Some(3600.0),
            soft: true,
        },
        Criterion {
            id: 10,
            name: "determinism",
            check: c10_determinism,
            budget: None,
            soft: false,
        },
    ];
    let only: Option<Vec<u32>> = std::env::var("CAAT_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let (mut failed, mut soft_failed) = (0, 0);
    for Criterion {
        id,
        name,
        check,
        budget,
        soft,
    } in criteria
    {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("[SKIP] {id:>2} {name}");
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(limit)) if secs > limit => Err(format!("over the {limit:.0} s budget")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) if soft => {
                soft_failed += 1;
                println!("[FAIL] {id:>2} {name} (soft): {detail} [{secs:.1}s]");
            }
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if soft_failed > 0 {
        println!("{soft_failed} soft criteria failed");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
