//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! The ablation criterion trains all four variants on the default synthetic
//! data, so this target takes tens of minutes on one core.

use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use posenc::ablation::{run_ablation, ABLATION_ROWS};
use posenc::attention::{attention_weights, init_attention, multi_head_self_attention, AttentionConfig};
use posenc::checkpoint::{encode_checkpoint, Checkpoint};
use posenc::config::KvMap;
use posenc::data::{
    decode_features, decode_skeleton, encode_features, encode_skeleton, generate_synthetic, load_dataset_dir,
    normalize_spine, sample_frames, FrameFeatureSequence, RawSkeletonSample, SyntheticSpec,
};
use posenc::model::{AblationConfig, Branch, Model, ModelDims, ModelInput};
use posenc::params::ParamStore;
use posenc::recurrent::{bilstm, init_lstm};
use posenc::streams::{init_pose_stream, seu_encode, teu_encode, Encoder, PoseTensor, StreamConfig};
use posenc::training::TrainConfig;
use posenc::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn posenc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posenc"))
        .args(args)
        .output()
        .expect("running the posenc binary")
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.dim(0)).map(|i| t.row(i).to_vec()).collect()
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let m = b[0].len();
    a.iter()
        .map(|row| (0..m).map(|j| row.iter().zip(b).map(|(x, bp)| x * bp[j]).sum()).collect())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.len() / t.dim(0);
    let data = perm.iter().flat_map(|&i| t.data()[i * n..(i + 1) * n].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn mha(x: &Tensor, store: &ParamStore, cfg: &AttentionConfig) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = multi_head_self_attention(&mut tape, &bound, "a", xv, cfg).unwrap();
    tape.value(out).clone()
}

/// One head at a time, one query position at a time.
fn mha_oracle(x: &Mat, store: &ParamStore, cfg: &AttentionConfig) -> Mat {
    let mut cat: Mat = vec![Vec::new(); x.len()];
    for head in 0..cfg.heads {
        let [nq, nk, nv] = cfg.head_weight_names("a", head);
        let w = |n: &str| to_mat(store.get(n).unwrap());
        let (q, k, v) = (mat_mul(x, &w(&nq)), mat_mul(x, &w(&nk)), mat_mul(x, &w(&nv)));
        for (i, qi) in q.iter().enumerate() {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / cfg.scale().sqrt())
                .collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (w, vj) in e.iter().zip(&v) {
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o += w / z * vv;
                }
            }
            cat[i].extend(out);
        }
    }
    mat_mul(&cat, &to_mat(store.get("a.wo").unwrap()))
}

fn random_attention(rng: &mut ChaCha8Rng) -> (Tensor, ParamStore, AttentionConfig) {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d = heads * rng.random_range(1..=8 / heads);
    let t = rng.random_range(1..=6);
    let cfg = AttentionConfig::new(d, heads);
    let mut store = ParamStore::new();
    init_attention(&mut store, "a", &cfg, rng);
    (Tensor::uniform([t, d], 2.0, rng), store, cfg)
}

// ----- criteria ---------------------------------------------------------------

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let out = posenc(&["gradcheck", "--scope", "model"]);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut worst: f64 = 0.0;
    let mut components = 0;
    for line in stdout.lines() {
        if let Some(v) = line.split_whitespace().find_map(|w| w.strip_prefix("max_rel_error=")) {
            worst = worst.max(v.parse::<f64>().map_err(|e| format!("{line}: {e}"))?);
            components += 1;
        }
    }
    let dims = ModelDims::tiny();
    ensure((dims.frames, dims.joints, dims.hidden) == (4, 3, 4), "tiny dims changed")?;
    ensure(out.status.success(), format!("exit status {}", out.status))?;
    ensure(components > 0, "no components reported")?;
    ensure(worst < 1e-4, format!("max relative error {worst:.3e}"))?;
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{components} parameter groups, max relative error {worst:.3e}, {secs:.1} s"))
}

fn attention_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (x, store, cfg) = random_attention(&mut rng);
        let out = mha(&x, &store, &cfg);
        let expect: Vec<f64> = mha_oracle(&to_mat(&x), &store, &cfg).concat();
        worst = worst.max(max_diff(out.data(), &expect));
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:e}"))?;
    Ok(format!("100 instances, max deviation {worst:.2e}"))
}

fn shape_contracts() -> Check {
    let cfg = StreamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut store = ParamStore::new();
    init_pose_stream(&mut store, "s", Encoder::Spatial, cfg.seu_filters, (20, 25, 3), &cfg, &mut rng);
    init_pose_stream(&mut store, "t", Encoder::Temporal, cfg.teu_filters, (20, 25, 3), &cfg, &mut rng);
    let pose = Tensor::uniform([20, 25, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let x = tape.constant(&pose);
    let seu = seu_encode(&mut tape, &bound, "s.enc", x, &cfg).map_err(|e| e.to_string())?;
    let teu = teu_encode(&mut tape, &bound, "t.enc", x, &cfg).map_err(|e| e.to_string())?;
    let f = cfg.seu_filters[2];
    ensure(tape.shape(seu) == [20, 25 * f], format!("SEU gave {:?}", tape.shape(seu)))?;
    ensure(
        tape.shape(teu)[0] == cfg.teu_filters[2],
        format!("TEU gave {:?}", tape.shape(teu)),
    )?;
    for (t, d) in [(84, 120), (20, 1536)] {
        let acfg = AttentionConfig::new(d, 4);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", &acfg, &mut rng);
        let x = Tensor::uniform([t, d], 1.0, &mut rng);
        let out = mha(&x, &store, &acfg);
        ensure(out.shape() == [t, d], format!("MHA on ({t}, {d}) gave {:?}", out.shape()))?;
    }
    Ok(format!(
        "SEU (20, 25, 3) -> (20, {}), TEU leading axis {}, MHA keeps (84, 120) and (20, 1536)",
        25 * f,
        cfg.teu_filters[2]
    ))
}

fn equivariance_and_purity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (x, store, cfg) = random_attention(&mut rng);
        let mut perm: Vec<usize> = (0..x.dim(0)).collect();
        perm.shuffle(&mut rng);
        let out = mha(&x, &store, &cfg);
        let out_p = mha(&permute_rows(&x, &perm), &store, &cfg);
        worst = worst.max(max_diff(out_p.data(), permute_rows(&out, &perm).data()));
    }
    let cfg = StreamConfig::default();
    let mut seu_worst: f64 = 0.0;
    for _ in 0..20 {
        let (t, j) = (rng.random_range(2..12), rng.random_range(2..10));
        let mut store = ParamStore::new();
        init_pose_stream(&mut store, "s", Encoder::Spatial, [6, 5, 7], (t, j, 3), &cfg, &mut rng);
        for (_, p) in store.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let pose = Tensor::uniform([t, j, 3], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let run = |p: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let x = tape.constant(p);
            let out = seu_encode(&mut tape, &bound, "s.enc", x, &cfg).unwrap();
            tape.value(out).clone()
        };
        let out = run(&pose);
        let out_p = run(&permute_rows(&pose, &perm));
        seu_worst = seu_worst.max(max_diff(out_p.data(), permute_rows(&out, &perm).data()));
    }
    ensure(worst <= 1e-10, format!("MHA deviation {worst:e}"))?;
    ensure(seu_worst <= 1e-10, format!("SEU deviation {seu_worst:e}"))?;
    Ok(format!("MHA 100 trials {worst:.2e}, SEU 20 trials {seu_worst:.2e}"))
}

fn probability_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, d) = (rng.random_range(1..16), rng.random_range(1..10));
        let scale = rng.random_range(0.1..20.0);
        let q = Tensor::uniform([t, d], scale, &mut rng);
        let k = Tensor::uniform([t, d], scale, &mut rng);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(&q), tape.constant(&k));
        let w = attention_weights(&mut tape, qv, kv, d as f64).map_err(|e| e.to_string())?;
        let w = tape.value(w);
        for i in 0..t {
            worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let dims = ModelDims::tiny();
    let mut outputs = 0;
    for (_, variant) in ABLATION_ROWS {
        for branch in [Branch::Pose, Branch::Rgb, Branch::Both] {
            let model = Model::build(AblationConfig::variant(variant, branch).unwrap(), dims.clone(), 7).unwrap();
            for _ in 0..5 {
                let scale = rng.random_range(0.1..20.0);
                let pose = PoseTensor::new(Tensor::uniform([dims.frames, dims.joints, dims.coords], scale, &mut rng))
                    .unwrap();
                let f = Tensor::uniform([dims.frames, dims.rgb_dim], scale, &mut rng);
                let p = model
                    .predict(ModelInput {
                        pose: Some(&pose),
                        features: Some(&f),
                    })
                    .map_err(|e| e.to_string())?;
                worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
                outputs += 1;
            }
        }
    }
    ensure(worst <= 1e-12, format!("max |sum - 1| = {worst:e}"))?;
    Ok(format!("100 attention maps and {outputs} classifier outputs, max |sum - 1| {worst:.2e}"))
}

fn preprocessing() -> Check {
    ensure(sample_frames(20, 20).unwrap() == (0..20).collect::<Vec<_>>(), "L = n")?;
    ensure(sample_frames(39, 20).unwrap() == (0..20).map(|i| 2 * i).collect::<Vec<_>>(), "L = 39")?;
    ensure(sample_frames(5, 20).unwrap() == (0..5).flat_map(|i| [i; 4]).collect::<Vec<_>>(), "L = 5")?;

    // Spine at (1, 1, 1); the other joints sit 5 and 3 away, mean 4.
    let s = RawSkeletonSample {
        frames: 1,
        joints: 3,
        subjects: 1,
        spine_index: 0,
        label: 0,
        coords: vec![1.0, 1.0, 1.0, 4.0, 5.0, 1.0, 1.0, 1.0, 4.0],
    };
    let n = normalize_spine(&s).map_err(|e| e.to_string())?;
    ensure(
        n.tensor().data() == [0.0, 0.0, 0.0, 0.75, 1.0, 0.0, 0.0, 0.0, 0.75],
        format!("normalized {:?}", n.tensor().data()),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (frames, joints, subjects) = (rng.random_range(1..10), rng.random_range(2..10), rng.random_range(1..3));
        let s = RawSkeletonSample {
            frames,
            joints,
            subjects,
            spine_index: rng.random_range(0..joints),
            label: 0,
            coords: (0..frames * joints * subjects * 3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let base = normalize_spine(&s).unwrap();
        let again = normalize_spine(&RawSkeletonSample {
            coords: base.tensor().data().to_vec(),
            ..s.clone()
        })
        .unwrap();
        let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-100.0..100.0));
        let shifted = normalize_spine(&RawSkeletonSample {
            coords: s.coords.iter().enumerate().map(|(i, v)| v + offset[i % 3]).collect(),
            ..s.clone()
        })
        .unwrap();
        worst = worst
            .max(max_diff(again.tensor().data(), base.tensor().data()))
            .max(max_diff(shifted.tensor().data(), base.tensor().data()));
    }
    ensure(worst <= 1e-12, format!("idempotence/translation deviation {worst:e}"))?;
    Ok(format!("closed forms exact, 100 random skeletons within {worst:.2e}"))
}

fn reversal_symmetry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, d, h) = (rng.random_range(1..10), rng.random_range(1..6), rng.random_range(1..6));
        let mut store = ParamStore::new();
        init_lstm(&mut store, "p", d, h, &mut rng);
        init_lstm(&mut store, "q", d, h, &mut rng);
        let seq = Tensor::uniform([t, d], 2.0, &mut rng);
        let rev: Vec<usize> = (0..t).rev().collect();
        let run = |fwd: &str, bwd: &str, x: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let xv = tape.constant(x);
            let out = bilstm(&mut tape, &bound, fwd, bwd, xv).unwrap();
            tape.value(out).clone()
        };
        let lhs = run("p", "q", &permute_rows(&seq, &rev));
        let rhs = run("q", "p", &seq);
        let expect: Vec<f64> = rev
            .iter()
            .flat_map(|&i| {
                let r = rhs.row(i);
                r[h..].iter().chain(&r[..h]).copied().collect::<Vec<_>>()
            })
            .collect();
        worst = worst.max(max_diff(lhs.data(), &expect));
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("100 instances, max deviation {worst:.2e}"))
}

fn file_formats() -> Check {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let spec = SyntheticSpec {
        samples_per_class: 2,
        ..SyntheticSpec::default()
    };
    let mut checked = 0;
    for s in generate_synthetic(&spec).map_err(|e| e.to_string())? {
        let bytes = encode_skeleton(&s.skeleton);
        let back = decode_skeleton(&bytes).map_err(|e| e.to_string())?;
        ensure(bits(&back.coords) == bits(&s.skeleton.coords) && back == s.skeleton, "SKL1 round trip")?;
        ensure(encode_skeleton(&back) == bytes, "SKL1 re-encode")?;
        let bytes = encode_features(&s.features);
        let back: FrameFeatureSequence = decode_features(&bytes).map_err(|e| e.to_string())?;
        ensure(bits(back.features.data()) == bits(s.features.features.data()), "FTR1 round trip")?;
        ensure(encode_features(&back) == bytes, "FTR1 re-encode")?;
        checked += 1;

        let mut bad = encode_skeleton(&s.skeleton);
        bad[0] ^= 0xff;
        ensure(decode_skeleton(&bad).is_err(), "corrupted SKL1 magic accepted")?;
        let mut bad = encode_features(&s.features);
        bad[3] ^= 0x01;
        ensure(decode_features(&bad).is_err(), "corrupted FTR1 magic accepted")?;
    }
    for branch in [Branch::Pose, Branch::Both] {
        let model = Model::build(AblationConfig::full(branch), ModelDims::default(), 3).unwrap();
        let mut extra = KvMap::new();
        extra.set("note", "acceptance");
        let bytes = encode_checkpoint(&model, &extra);
        let back = Checkpoint::decode(&bytes)
            .and_then(Checkpoint::into_model)
            .map_err(|e| e.to_string())?;
        ensure(back == model, "checkpoint round trip")?;
        ensure(encode_checkpoint(&back, &extra) == bytes, "checkpoint re-encode")?;
        let mut bad = bytes.clone();
        bad[1] ^= 0x20;
        ensure(Checkpoint::decode(&bad).is_err(), "corrupted checkpoint magic accepted")?;
    }
    Ok(format!("{checked} SKL1/FTR1 pairs and 2 checkpoints bit-exact, bad magic rejected"))
}

struct AblationRun {
    learnability: Check,
    ablation: Check,
}

/// Trains all four variants on the default synthetic data. The full row
/// doubles as the learnability run.
fn default_ablation(dir: &Path) -> AblationRun {
    let data_dir = dir.join("default");
    let gen = posenc(&["gen-data", "--out", data_dir.to_str().unwrap()]);
    if !gen.status.success() {
        let e = Err(format!("gen-data failed: {}", String::from_utf8_lossy(&gen.stderr)));
        return AblationRun {
            learnability: e.clone(),
            ablation: e,
        };
    }
    let result = load_dataset_dir(&data_dir, Branch::Pose, 20).and_then(|data| {
        let cfg = TrainConfig::for_branch(Branch::Pose);
        let dims = ModelDims {
            num_classes: data.num_classes,
            ..ModelDims::default()
        };
        run_ablation(&data, Branch::Pose, &dims, &cfg, |variant, r| {
            eprintln!("  [ablation] {variant} {r}");
        })
        .map(|report| (report, cfg))
    });
    let (report, cfg) = match result {
        Ok(r) => r,
        Err(e) => {
            return AblationRun {
                learnability: Err(e.to_string()),
                ablation: Err(e.to_string()),
            }
        }
    };
    println!("{}", report.to_markdown().trim_end());
    for r in &report.rows {
        println!("  {} trained in {:.1} s", r.variant, r.elapsed.as_secs_f64());
    }

    let learnability = (|| {
        let full = report.row("full").ok_or("no full row")?;
        let chance = 100.0 / 4.0;
        ensure(
            full.accuracy >= 90.0,
            format!("held-out accuracy {:.2}% after {} epochs", full.accuracy, cfg.epochs),
        )?;
        ensure(cfg.epochs <= 30, format!("{} epochs", cfg.epochs))?;
        ensure(
            full.elapsed < Duration::from_secs(600),
            format!("took {:.1} s", full.elapsed.as_secs_f64()),
        )?;
        Ok(format!(
            "held-out accuracy {:.2}% (chance {chance:.0}%) after {} epochs on {}/{} examples, {:.1} s",
            full.accuracy,
            cfg.epochs,
            report.train_size,
            report.test_size,
            full.elapsed.as_secs_f64()
        ))
    })();

    let ablation = (|| {
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label).collect();
        let expected: Vec<&str> = ABLATION_ROWS.iter().map(|(l, _)| *l).collect();
        ensure(labels == expected, format!("rows {labels:?}"))?;
        let (base, full) = (report.row("baseline").unwrap(), report.row("full").unwrap());
        ensure(
            full.accuracy >= base.accuracy - 2.0,
            format!("full {:.2}% vs baseline {:.2}%", full.accuracy, base.accuracy),
        )?;
        Ok(format!(
            "4 rows, full {:.2}% vs baseline {:.2}%",
            full.accuracy, base.accuracy
        ))
    })();
    AblationRun { learnability, ablation }
}

/// Runs `ablate` twice on a small dataset with a short schedule and
/// compares both outputs byte for byte.
fn ablation_reproducible(dir: &Path) -> Check {
    let data_dir = dir.join("small");
    let spec = dir.join("small.spec");
    let config = dir.join("short.cfg");
    std::fs::write(&spec, "samples_per_class = 5\n").map_err(|e| e.to_string())?;
    std::fs::write(&config, "epochs = 2\nholdout = 0.4\n").map_err(|e| e.to_string())?;
    let gen = posenc(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]);
    ensure(gen.status.success(), "gen-data failed")?;
    let args = ["ablate", "--data", data_dir.to_str().unwrap(), "--config", config.to_str().unwrap()];
    let (a, b) = (posenc(&args), posenc(&args));
    ensure(a.status.success(), String::from_utf8_lossy(&a.stderr).into_owned())?;
    let table = String::from_utf8_lossy(&a.stdout);
    let rows = table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Method")).count();
    ensure(rows == 4, format!("ablate printed {rows} rows"))?;
    for (label, _) in ABLATION_ROWS {
        ensure(table.contains(&format!("| {label} |")), format!("missing row `{label}`"))?;
    }
    ensure(a.stdout == b.stdout, "tables differ between runs")?;
    ensure(a.stderr == b.stderr, "training logs differ between runs")?;
    Ok(format!(
        "two `ablate` runs produced identical tables and logs ({} bytes)",
        a.stdout.len() + a.stderr.len()
    ))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(&str, Check)> = vec![
        ("gradient integrity", gradient_integrity()),
        ("attention oracle equivalence", attention_oracle()),
        ("shape contracts", shape_contracts()),
        ("permutation equivariance and SEU purity", equivariance_and_purity()),
        ("probability normalization", probability_normalization()),
        ("preprocessing", preprocessing()),
        ("bi-LSTM reversal symmetry", reversal_symmetry()),
        ("file-format round trips", file_formats()),
    ];
    let run = default_ablation(dir.path());
    let repro = ablation_reproducible(dir.path());
    let ablation = match (run.ablation, repro) {
        (Ok(a), Ok(r)) => Ok(format!("{a}; {r}")),
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    results.push(("end-to-end learnability", run.learnability));
    results.push(("ablation harness", ablation));

    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
