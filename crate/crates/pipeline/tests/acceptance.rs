//! Acceptance gate: one line per criterion, non-zero exit if any fails.
//!
//! Ordering and determinism share two full 4-fold desk-profile pipeline
//! runs, which dominate the runtime (about four and a half hours on one CPU core).

use cosmosseg::config::{PipelineConfig, ScopeChoice};
use cosmosseg::dataset::{load_cases, phantom_case_config, write_phantom_dataset};
use cosmosseg::inference::{generate_pseudo_labels, predict_per_side, sliding_window_predict, SlidingWindowConfig, SliceStatus};
use cosmosseg::workflow::{run_pipeline, Stage};
use cosmosseg::{diagnose_slices, predict_labels};
use cosmosseg_core::dataio::{load_catalog, SliceStatus as AnnotatedStatus};
use cosmosseg_core::labelcraft::{interpolate_labels, rasterize_slice};
use cosmosseg_core::metrics::{dsc, read_scores_csv, render_table, TableRow};
use cosmosseg_core::phantom::{generate_phantom, sparsify_annotations, PhantomConfig};
use cosmosseg_core::volume::LUMEN;
use cosmosseg_core::{Grid3, Shape3, Side};
use cosmosseg_segnet::{build_model, dice_ce_loss, poly_lr, train, AugmentationConfig, Tensor, TrainingCase, TrainingConfig, UNet3DConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

enum Verdict {
    Pass(String),
    Fail(String),
    NotApplicable(String),
}

type Check = fn() -> Verdict;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn desk_config(dir: &Path) -> PipelineConfig {
    PipelineConfig::parse(&format!("seed = 7\nprofile = \"desk\"\n[paths]\ncatalog = \"{}\"\n", dir.join("catalog.csv").display())).unwrap()
}

fn eight_phantoms(dir: &Path) {
    write_phantom_dataset(dir, 8, 7, &PhantomConfig::default(), 4).unwrap();
}

fn table_reference_format() -> Verdict {
    let row = TableRow {
        model: "Seg-Model-B".into(),
        means: [Some(0.9347), Some(0.8723), Some(0.7271), Some(0.8447)],
        cases: 0,
    };
    let table = render_table(&[row]);
    let formatted = ["93.47", "87.23", "72.71", "84.47"].iter().all(|v| table.contains(v));
    if !formatted {
        return Verdict::Fail(format!("table rendering lost the reference values:\n{table}"));
    }
    Verdict::NotApplicable("reference DSC values need the private challenge data; only the report format is checked".into())
}

fn lr_schedule() -> Verdict {
    let tc = TrainingConfig::default();
    let (lr0, lr500) = (poly_lr(0, tc.epochs, tc.lr0, tc.poly_exponent).unwrap(), poly_lr(500, 500, 0.01, 0.9).unwrap());
    let lr250 = poly_lr(250, 500, 0.01, 0.9).unwrap();
    // 0.01 * 0.5^0.9, evaluated independently with 30 significant digits
    let reference = 0.005_358_867_312_681_466_f64;
    let ok = lr0 == 0.01 && lr500 == 0.0 && (lr250 - reference).abs() <= 1e-12;
    verdict(ok, format!("lr(0)={lr0}, lr(500)={lr500}, lr(250)={lr250:.18} (|err| {:.1e})", (lr250 - reference).abs()))
}

fn dsc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let s = Shape3::new(16, 16, 16);
    let mut mismatches = 0;
    for i in 0..100 {
        let (pp, pg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = Grid3::from_fn(s, |_, _, _| rng.random_bool(pp));
        let g = Grid3::from_fn(s, |_, _, _| rng.random_bool(if i % 10 == 0 { 0.0 } else { pg }));
        let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let (a, b) = (p.get(z, y, x), g.get(z, y, x));
                    np += a as u64;
                    ng += b as u64;
                    inter += (a && b) as u64;
                }
            }
        }
        let expected = (np + ng > 0).then(|| (2 * inter) as f64 / (np + ng) as f64);
        if dsc(&p, &g).unwrap() != expected {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 100 random 16^3 pairs differ from the brute-force counter"))
}

fn interpolation_idempotence() -> Verdict {
    let mut checked = 0;
    for i in 0..8 {
        let cfg = phantom_case_config(&PhantomConfig::default(), 7, i);
        let (_, dense) = generate_phantom(&cfg, "p").unwrap();
        let plane = cfg.plane();
        let ann = sparsify_annotations(&dense, plane, cfg.annotated_fraction, 1, "p").unwrap();
        let vol = interpolate_labels(&ann, cfg.shape, plane).unwrap();
        let nx = cfg.shape.x;
        for e in &ann.entries {
            let raster = rasterize_slice(e, cfg.shape.y, nx).unwrap();
            let (x0, x1) = plane.x_range(e.side, nx);
            let same = vol
                .grid()
                .plane(e.slice_index)
                .chunks_exact(nx)
                .zip(raster.classes.chunks_exact(nx))
                .all(|(a, b)| a[x0..x1] == b[x0..x1]);
            if !same {
                return Verdict::Fail(format!("case {i}, side {:?}, slice {} differs", e.side, e.slice_index));
            }
            checked += 1;
        }
    }
    Verdict::Pass(format!("{checked} annotated slices over 8 phantoms match their rasterization bit-exactly"))
}

fn correction_invariant() -> Verdict {
    let settings = desk_config(Path::new(".")).resolve().unwrap();
    let mut checked = 0usize;
    for (i, seed) in [(0usize, 1u64), (3, 2)] {
        let cfg = phantom_case_config(&PhantomConfig::default(), 7, i);
        let (img, dense) = generate_phantom(&cfg, "p").unwrap();
        let img = img.normalize_zscore().unwrap();
        let plane = cfg.plane();
        let ann = sparsify_annotations(&dense, plane, cfg.annotated_fraction, 1, "p").unwrap();
        let net = build_model(settings.unet.clone(), seed).unwrap();
        let sw = &settings.sliding_window;
        let pseudo = generate_pseudo_labels(&net, img.grid(), &ann, plane, sw).unwrap();
        let raw = predict_per_side(&net, img.grid(), plane, sw).unwrap();
        let interp = interpolate_labels(&ann, cfg.shape, plane).unwrap();
        let s = cfg.shape;
        for z in 0..s.z {
            for y in 0..s.y {
                for x in 0..s.x {
                    let side = plane.side_of(x);
                    let inside = interp.ranges().get(side).is_some_and(|r| r.contains(z));
                    let want = if inside { interp.grid().get(z, y, x) } else { raw.grid().get(z, y, x) };
                    if pseudo.grid().get(z, y, x) != want {
                        return Verdict::Fail(format!("untrained net seed {seed}: voxel ({z},{y},{x}) inside={inside} breaks the rule"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Verdict::Pass(format!("{checked} voxels from two untrained desk networks follow the correction rule bit-exactly"))
}

fn loss_gradient() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let scores: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let ignore: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
    let out = dice_ce_loss(&scores, &target, &ignore, 1, 2).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..scores.len() {
        let mut s = scores.clone();
        s[i] += h;
        let up = dice_ce_loss(&s, &target, &ignore, 1, 2).unwrap().loss;
        s[i] -= 2.0 * h;
        let down = dice_ce_loss(&s, &target, &ignore, 1, 2).unwrap().loss;
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(out.grad[i].abs());
        if scale > 1e-9 {
            worst = worst.max((fd - out.grad[i]).abs() / scale);
        } else if (fd - out.grad[i]).abs() > 1e-9 {
            worst = f64::INFINITY;
        }
    }
    verdict(worst <= 1e-4, format!("max relative error {worst:.2e} over 128 scores"))
}

fn sliding_window_equivalence() -> Verdict {
    let settings = desk_config(Path::new(".")).resolve().unwrap();
    let net = build_model(settings.unet.clone(), 9).unwrap();
    let s = Shape3::new(32, 64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Grid3::from_fn(s, |_, _, _| rng.random_range(-1.0f32..1.0));
    let direct = net.predict_proba(&Tensor::from_grid(&img)).unwrap();
    let mut worst = 0.0f32;
    for window in [s, Shape3::new(64, 128, 128)] {
        let p = sliding_window_predict(&net, &img, &SlidingWindowConfig::for_patch(window)).unwrap();
        worst = p.data.iter().zip(&direct.data).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    verdict(worst <= 1e-5, format!("max |difference| {worst:.2e} for windows equal to and larger than the volume"))
}

fn overfit() -> Verdict {
    let cfg = PhantomConfig {
        shape: Shape3::new(32, 64, 64),
        centerline_amplitude: 3.0,
        lumen_radius: (2.5, 4.0),
        wall_thickness: (1.0, 2.0),
        plaque_boost: 1.5,
        plaque_span: (4, 8),
        seed: 7,
        ..Default::default()
    };
    let (img, dense) = generate_phantom(&cfg, "overfit").unwrap();
    let img = img.normalize_zscore().unwrap();
    let case = TrainingCase::new("overfit", img.grid().clone(), dense.grid().clone()).unwrap();
    let unet = UNet3DConfig {
        num_downsamplings: 2,
        base_channels: 8,
        max_channels: 32,
        ..Default::default()
    };
    let tc = TrainingConfig {
        patch_size: cfg.shape,
        batch_size: 1,
        epochs: 20,
        iterations_per_epoch: 10,
        seed: 7,
        ..Default::default()
    };
    let ck = train(&[case], &unet, &tc, &AugmentationConfig::disabled()).unwrap();
    let net = ck.model().unwrap();
    let pred = predict_labels(&net.predict_proba(&Tensor::from_grid(img.grid())).unwrap());
    let lumen = dsc(&pred.grid().map(|c| c == LUMEN), &dense.grid().map(|c| c == LUMEN)).unwrap().unwrap_or(0.0);
    let h = &ck.loss_history;
    verdict(
        lumen >= 0.95,
        format!("lumen DSC {lumen:.4} after 200 steps (loss {:.3} -> {:.3})", h[0], h[h.len() - 1]),
    )
}

fn diagnosis_exactness() -> Verdict {
    let (mut total, mut correct) = (0usize, 0usize);
    for i in 0..8 {
        let cfg = phantom_case_config(&PhantomConfig::default(), 7, i);
        let (_, dense) = generate_phantom(&cfg, "p").unwrap();
        let plane = cfg.plane();
        let ann = sparsify_annotations(&dense, plane, 1.0, 1, "p").unwrap();
        let report = diagnose_slices("p", &dense, plane, 1);
        for e in &ann.entries {
            let expected = match e.status {
                AnnotatedStatus::Atherosclerotic => SliceStatus::Atherosclerotic,
                AnnotatedStatus::Normal => SliceStatus::Normal,
            };
            total += 1;
            correct += usize::from(report.status(e.side, e.slice_index) == Some(expected));
        }
        // slices off the vessel must not be called diseased
        for side in Side::BOTH {
            for z in 0..cfg.shape.z {
                if !ann.entries.iter().any(|e| e.side == side && e.slice_index == z) {
                    total += 1;
                    correct += usize::from(report.status(side, z) == Some(SliceStatus::NoVessel));
                }
            }
        }
    }
    verdict(correct == total, format!("accuracy {correct}/{total} over every slice of 8 phantoms"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct FirstRun {
    data: tempfile::TempDir,
    scores: Vec<u8>,
    run_dir: std::path::PathBuf,
    secs: f64,
}

/// First full 4-fold desk run, shared by the ordering and determinism checks.
static FIRST_RUN: OnceLock<Result<FirstRun, String>> = OnceLock::new();

fn first_run() -> &'static Result<FirstRun, String> {
    FIRST_RUN.get_or_init(|| {
        let data = tempfile::tempdir().map_err(|e| e.to_string())?;
        eight_phantoms(data.path());
        let cfg = desk_config(data.path());
        let t = Instant::now();
        let summary = run_pipeline(&cfg, &data.path().join("work-1"), &Stage::ALL, &mut |m| eprintln!("    {m}")).map_err(|e| format!("pipeline failed: {e}"))?;
        let scores = std::fs::read(summary.dir.join("scores.csv")).map_err(|e| e.to_string())?;
        Ok(FirstRun {
            data,
            scores,
            run_dir: summary.dir,
            secs: t.elapsed().as_secs_f64(),
        })
    })
}

fn ordering() -> Verdict {
    let run = match first_run() {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.clone()),
    };
    let settings = desk_config(run.data.path()).resolve().unwrap();
    assert_eq!(settings.scope, ScopeChoice::Auto);
    let cases = load_cases(&load_catalog(run.data.path().join("catalog.csv")).unwrap()).unwrap();
    assert!(cases.iter().all(|c| c.truth.is_some()), "full-extent scoring needs dense truth");
    let rows = read_scores_csv(run.run_dir.join("scores.csv")).unwrap();
    if rows.len() != 2 * cases.len() {
        return Verdict::Fail(format!("{} score rows for {} held-out cases", rows.len(), cases.len()));
    }
    let per_model = |m: &str| -> (f64, [f64; 3]) {
        let scores: Vec<_> = rows.iter().filter(|(model, _)| model == m).map(|(_, s)| s).collect();
        let avg: Vec<f64> = scores.iter().filter_map(|s| s.dsc_average).collect();
        let class = |k: usize| mean(&scores.iter().filter_map(|s| s.classes()[k]).collect::<Vec<_>>());
        (mean(&avg), [class(0), class(1), class(2)])
    };
    let (a, ac) = per_model("Seg-Model-A");
    let (b, bc) = per_model("Seg-Model-B");
    let detail = format!(
        "held-out mean DSC A {a:.4} (lumen {:.3}, wall {:.3}, diseased {:.3}), B {b:.4} (lumen {:.3}, wall {:.3}, diseased {:.3}); need B >= A and B >= 0.80; run took {:.0} s",
        ac[0], ac[1], ac[2], bc[0], bc[1], bc[2], run.secs
    );
    verdict(b >= a && b >= 0.80, detail)
}

fn determinism() -> Verdict {
    let run = match first_run() {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.clone()),
    };
    let cfg = desk_config(run.data.path());
    let second = match run_pipeline(&cfg, &run.data.path().join("work-2"), &Stage::ALL, &mut |m| eprintln!("    {m}")) {
        Ok(s) => std::fs::read(s.dir.join("scores.csv")).unwrap(),
        Err(e) => return Verdict::Fail(format!("pipeline failed: {e}")),
    };
    let same = second == run.scores && !second.is_empty();
    verdict(
        same,
        format!("two full 4-fold desk runs in separate work directories: scores.csv {}", if same { "byte-identical" } else { "differs" }),
    )
}

fn main() {
    // `cargo test` passes harness flags; a filter argument selects criteria by name.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Check); 11] = [
        ("table-1 reproduction", table_reference_format),
        ("lr schedule", lr_schedule),
        ("dsc oracle equivalence", dsc_oracle),
        ("interpolation idempotence", interpolation_idempotence),
        ("correction invariant", correction_invariant),
        ("loss gradient check", loss_gradient),
        ("sliding-window degenerate equivalence", sliding_window_equivalence),
        ("diagnosis rule exactness", diagnosis_exactness),
        ("overfit smoke test", overfit),
        ("ordering B >= A", ordering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (tag, detail) = match check() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::NotApplicable(d) => ("N/A ", d),
        };
        println!("[{tag}] {name}: {detail} ({:.1} s)", t.elapsed().as_secs_f64());
    }
    // statics are never dropped, so the shared run directory is removed here
    if let Some(Ok(run)) = FIRST_RUN.get() {
        let _ = std::fs::remove_dir_all(run.data.path());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
