//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The dataset-scale check runs only when both `CNNBTRK_VGG19_MODEL` (an
//! exported model file) and `CNNBTRK_MSRA_DIR` (images/ + masks/, at least
//! 200 pairs) are set.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cnnbtrk_core::backtrack::{backtrack_first_fc, backtrack_full, BacktrackConfig, PixelList, SpatialLoc};
use cnnbtrk_core::eval::{confusion_counts, metrics, BinaryMask, Confusion};
use cnnbtrk_core::fixtures::{bright_pixel_image, bright_pixel_network, bright_pixel_preprocess, bright_pixel_rgb};
use cnnbtrk_core::model_io::save_model;
use cnnbtrk_core::network::{flatten, ConvLayer, DenseLayer, PoolLayer};
use cnnbtrk_core::pnm::{decode_pgm, encode_ppm};
use cnnbtrk_core::saliency::{coarse_project, splat_gaussian, SaliencyConfig};
use cnnbtrk_core::selftest::run_selftest;
use cnnbtrk_core::tensor::{Shape3, Tensor1, Tensor3, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Verdict;

fn ensure(ok: bool, detail: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(detail.into())
    }
}

fn verdict(r: Result<String, String>) -> Verdict {
    match r {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cnnbtrk")
}

fn oracle_equivalence() -> Verdict {
    verdict((|| {
        let report = run_selftest(20240601, 100, false);
        ensure(report.trials == 100, "wrong trial count")?;
        ensure(
            report.passed(),
            format!("{} mismatches, first: {:?}", report.mismatches.len(), report.mismatches.first()),
        )?;
        ensure(
            report.elapsed < Duration::from_secs(30),
            format!("took {:.2}s", report.elapsed.as_secs_f64()),
        )?;
        let faulty = run_selftest(20240601, 100, true);
        ensure(!faulty.passed(), "injected fault went undetected")?;
        Ok(format!(
            "100 networks, {} selections, 0 mismatches in {:.2}s; injected fault caught ({} mismatches)",
            report.selections,
            report.elapsed.as_secs_f64(),
            faulty.mismatches.len()
        ))
    })())
}

fn close(actual: f32, expected: f64) -> bool {
    // relative, with a floor for outputs that cancel to (almost) zero
    (actual as f64 - expected).abs() <= 1e-5 * expected.abs().max(1e-6)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn forward_correctness() -> Verdict {
    verdict((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut compared = 0usize;

        let mut done = 0;
        while done < 50 {
            let (cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let (h, w) = (rng.gen_range(1..11), rng.gen_range(1..11));
            let (kh, kw) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let stride = rng.gen_range(1..4);
            let pad = rng.gen_range(0..kh.min(kw));
            let window = Window::new(kh, kw, stride, pad);
            let Some((oh, ow)) = window.output_dims(h, w) else { continue };
            let weights = random_vec(&mut rng, cout * cin * kh * kw);
            let bias = random_vec(&mut rng, cout);
            let input = random_vec(&mut rng, cin * h * w);
            let layer = ConvLayer::new(cin, cout, window, weights.clone(), bias.clone()).map_err(|e| e.to_string())?;
            let x = Tensor3::from_vec(Shape3::new(cin, h, w).unwrap(), input.clone()).unwrap();
            let out = layer.forward(&x).map_err(|e| e.to_string())?;
            for f in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[f] as f64;
                        for c in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = weights[((f * cin + c) * kh + i) * kw + j] as f64;
                                    acc += wv * input[(c * h + iy as usize) * w + ix as usize] as f64;
                                }
                            }
                        }
                        let got = out.at(f, oy, ox);
                        ensure(close(got, acc), format!("conv instance {done}: [{f},{oy},{ox}] {got} vs {acc}"))?;
                        compared += 1;
                    }
                }
            }
            done += 1;
        }

        for inst in 0..50 {
            let (n_in, n_out) = (rng.gen_range(1..65), rng.gen_range(1..17));
            let weights = random_vec(&mut rng, n_in * n_out);
            let bias = random_vec(&mut rng, n_out);
            let input = random_vec(&mut rng, n_in);
            let layer = DenseLayer::new(n_in, n_out, weights.clone(), bias.clone()).map_err(|e| e.to_string())?;
            let out = layer.forward(&Tensor1::from_vec(input.clone()).unwrap()).map_err(|e| e.to_string())?;
            for k in 0..n_out {
                let mut acc = bias[k] as f64;
                for j in 0..n_in {
                    acc += weights[k * n_in + j] as f64 * input[j] as f64;
                }
                let got = out.data()[k];
                ensure(close(got, acc), format!("dense instance {inst}: [{k}] {got} vs {acc}"))?;
                compared += 1;
            }
        }

        let mut done = 0;
        while done < 50 {
            let c = rng.gen_range(1..5);
            let (h, w) = (rng.gen_range(1..11), rng.gen_range(1..11));
            let (kh, kw, stride) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            if kh > h || kw > w {
                continue;
            }
            let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
            let input = random_vec(&mut rng, c * h * w);
            let layer = PoolLayer::new(kh, kw, stride).map_err(|e| e.to_string())?;
            let out = layer
                .forward(&Tensor3::from_vec(Shape3::new(c, h, w).unwrap(), input.clone()).unwrap())
                .map_err(|e| e.to_string())?;
            ensure(out.shape() == Shape3::new(c, oh, ow).unwrap(), format!("pool instance {done}: shape {:?}", out.shape()))?;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f32::NEG_INFINITY;
                        for i in 0..kh {
                            for j in 0..kw {
                                m = m.max(input[(ch * h + oy * stride + i) * w + ox * stride + j]);
                            }
                        }
                        let got = out.at(ch, oy, ox);
                        ensure(close(got, m as f64), format!("pool instance {done}: [{ch},{oy},{ox}] {got} vs {m}"))?;
                        compared += 1;
                    }
                }
            }
            done += 1;
        }
        Ok(format!("50 conv, 50 dense, 50 maxpool instances; {compared} outputs within 1e-5 relative"))
    })())
}

fn flatten_inverse() -> Verdict {
    verdict((|| {
        let shape = Shape3::new(512, 7, 7).unwrap();
        let data: Vec<f32> = (0..shape.len()).map(|i| i as f32).collect();
        let volume = Tensor3::from_vec(shape, data).unwrap();
        let flat = flatten(&volume);
        ensure(flat.len() == 25088, format!("flatten length {}", flat.len()))?;
        for (i, &v) in flat.data().iter().enumerate() {
            let loc = backtrack_first_fc(i, shape).map_err(|e| e.to_string())?;
            ensure(volume.at(loc.channel, loc.y, loc.x) == v, format!("index {i} maps to {loc:?}"))?;
        }
        ensure(backtrack_first_fc(25088, shape).is_err(), "index 25088 accepted")?;
        Ok("all 25088 indices of (512,7,7) round-trip".into())
    })())
}

fn coarse_projection() -> Verdict {
    verdict((|| {
        let grid = Shape3::new(512, 7, 7).unwrap();
        let mut cover = vec![0u8; 224 * 224];
        for i in 0..7 {
            for j in 0..7 {
                let r = coarse_project(SpatialLoc { channel: 100, y: i, x: j }, grid, 224, 224).map_err(|e| e.to_string())?;
                ensure(
                    (r.y_min, r.x_min, r.height(), r.width()) == (32 * i, 32 * j, 32, 32),
                    format!("node ({i},{j}) -> {r:?}"),
                )?;
                for y in r.y_min..=r.y_max {
                    for x in r.x_min..=r.x_max {
                        cover[y * 224 + x] += 1;
                    }
                }
            }
        }
        ensure(cover.iter().all(|&c| c == 1), "boxes overlap or leave gaps")?;
        Ok("49 boxes of 32x32 at (32i,32j) tile 224x224 exactly".into())
    })())
}

fn saliency_properties() -> Verdict {
    verdict((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        const N: usize = 64;
        for set in 0..50 {
            let sigma = rng.gen_range(1.0..4.0);
            let count = rng.gen_range(1..12);
            let pixels: Vec<(usize, usize)> = (0..count).map(|_| (rng.gen_range(20..30), rng.gen_range(20..30))).collect();
            let cfg = SaliencyConfig { sigma, threshold: 0.3 };
            let map = splat_gaussian(&pixels, N, N, &cfg).map_err(|e| e.to_string())?;
            let max = map.field.iter().cloned().fold(f64::MIN, f64::max);
            ensure((max - 1.0).abs() <= 1e-6, format!("set {set}: max {max}"))?;

            let (t1, t2) = {
                let a: f64 = rng.gen_range(0.01..1.0);
                let b: f64 = rng.gen_range(0.01..1.0);
                (a.min(b), a.max(b))
            };
            let (lo, hi) = (map.with_threshold(t1), map.with_threshold(t2));
            ensure(
                hi.mask.iter().zip(&lo.mask).all(|(&h, &l)| !h || l),
                format!("set {set}: mask at {t2} not within mask at {t1}"),
            )?;

            let (dy, dx): (isize, isize) = (rng.gen_range(-8..=8), rng.gen_range(-8..=8));
            let moved: Vec<(usize, usize)> = pixels
                .iter()
                .map(|&(y, x)| ((y as isize + dy) as usize, (x as isize + dx) as usize))
                .collect();
            let shifted = splat_gaussian(&moved, N, N, &cfg).map_err(|e| e.to_string())?;
            for y in 0..N as isize {
                for x in 0..N as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    let expected = if (0..N as isize).contains(&sy) && (0..N as isize).contains(&sx) {
                        map.value(sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    let got = shifted.value(y as usize, x as usize);
                    ensure((got - expected).abs() <= 1e-6, format!("set {set}: shift ({dy},{dx}) at ({y},{x}): {got} vs {expected}"))?;
                }
            }
        }
        Ok("50 random pixel sets: max = 1, nested masks, translation equivariant within 1e-6".into())
    })())
}

fn metric_fixtures() -> Verdict {
    verdict((|| {
        // 10x10 masks with tp=2, fp=2, fn=3, tn=93
        let mut pred = vec![false; 100];
        let mut gt = vec![false; 100];
        for i in [0, 1] {
            pred[i] = true;
            gt[i] = true;
        }
        for i in [10, 11] {
            pred[i] = true;
        }
        for i in [20, 21, 22] {
            gt[i] = true;
        }
        let c = confusion_counts(&BinaryMask::new(10, 10, pred), &BinaryMask::new(10, 10, gt)).map_err(|e| e.to_string())?;
        ensure(c == Confusion { tp: 2, fp: 2, fn_: 3, tn: 93 }, format!("counts {c:?}"))?;
        let m = metrics(&c);
        let expected = [
            ("accuracy", m.accuracy, 0.95),
            ("precision", m.precision, 0.5),
            ("recall", m.recall, 0.4),
            ("iou", m.iou, 2.0 / 7.0),
            ("f_score", m.f_score, 1.3 * 0.5 * 0.4 / (0.3 * 0.5 + 0.4)),
            ("f_beta_1", m.f_beta_1, 2.0 * 0.5 * 0.4 / 0.9),
        ];
        for (name, got, want) in expected {
            ensure((got - want).abs() < 1e-12, format!("{name}: {got} vs {want}"))?;
        }
        let empty = metrics(&Confusion { tp: 0, fp: 0, fn_: 0, tn: 100 });
        ensure(
            empty.precision == 0.0 && empty.undefined.iter().any(|u| u == "precision"),
            "empty prediction not flagged undefined",
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..1000 {
            let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let (pp, pg) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let p: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(pp)).collect();
            let g: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(pg)).collect();
            let m = metrics(&confusion_counts(&BinaryMask::new(w, h, p), &BinaryMask::new(w, h, g)).unwrap());
            ensure(
                m.iou <= m.precision.min(m.recall) + 1e-15,
                format!("mask pair {k}: iou {} > min({}, {})", m.iou, m.precision, m.recall),
            )?;
        }
        Ok("(2,2,3,93) -> P 0.5, R 0.4, IoU 2/7; iou <= min(P,R) on 1000 random mask pairs".into())
    })())
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn end_to_end() -> Verdict {
    verdict((|| {
        let size = 8;
        let net = bright_pixel_network(3, size);
        let (trace, cls) = net.forward_with_trace(&bright_pixel_image(3, size, 5, 2, 1.0)).map_err(|e| e.to_string())?;
        let out = backtrack_full(&net, &trace, cls, &BacktrackConfig::default()).map_err(|e| e.to_string())?;
        ensure(out.pixels == vec![(5, 2)], format!("library returned {:?}", out.pixels))?;

        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let model = tmp.path().join("toy.cnnbtrk");
        let image = tmp.path().join("lit.ppm");
        save_model(&model, &net, &bright_pixel_preprocess(size)).map_err(|e| e.to_string())?;
        std::fs::write(&image, encode_ppm(size, size, &bright_pixel_rgb(size, &[(5, 2)]))).map_err(|e| e.to_string())?;

        let mut runs: Vec<PathBuf> = Vec::new();
        for name in ["run1", "run2"] {
            let dir = tmp.path().join(name).join("nested");
            let status = Command::new(bin())
                .args(["backtrack", "--model"])
                .arg(&model)
                .arg("--image")
                .arg(&image)
                .arg("--out-dir")
                .arg(&dir)
                .args(["--sigma", "1.5"])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), format!("backtrack failed: {}", String::from_utf8_lossy(&status.stderr)))?;
            runs.push(dir);
        }
        let (a, b) = (read_dir_sorted(&runs[0]), read_dir_sorted(&runs[1]));
        let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
        ensure(
            names == ["bbox.json", "heatmap.ppm", "mask.pgm", "pixels.json", "saliency.pgm"],
            format!("artifacts {names:?}"),
        )?;
        ensure(a == b, "artifacts differ between runs")?;

        let pixels: PixelList = serde_json::from_slice(&a[3].1).map_err(|e| e.to_string())?;
        ensure(pixels.pixels == vec![[5, 2]], format!("pixels.json {:?}", pixels.pixels))?;
        let mask = decode_pgm(&a[2].1).map_err(|e| e.to_string())?;
        let field = decode_pgm(&a[4].1).map_err(|e| e.to_string())?;
        ensure(
            mask.data.iter().zip(&field.data).all(|(&m, &f)| m == 0 || f > 0),
            "mask outside field support",
        )?;
        Ok("lit pixel (5,2) recovered; five artifacts byte-identical across two runs".into())
    })())
}

fn dataset_scale() -> Verdict {
    let (Some(model), Some(data)) = (std::env::var_os("CNNBTRK_VGG19_MODEL"), std::env::var_os("CNNBTRK_MSRA_DIR")) else {
        return Verdict::Skip("set CNNBTRK_VGG19_MODEL and CNNBTRK_MSRA_DIR to run the VGG19 / MSRA-B evaluation".into());
    };
    verdict((|| {
        let out = Command::new(bin())
            .arg("eval")
            .arg("--model")
            .arg(&model)
            .arg("--dataset")
            .arg(&data)
            .args(["--grid-search", "sigma=5,10,20", "threshold=0.2,0.3,0.5"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), format!("eval failed: {}", String::from_utf8_lossy(&out.stderr)))?;
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        let best = &report["best"];
        let images = best["images"].as_array().map_or(0, |v| v.len());
        let p = best["mean"]["precision"].as_f64().unwrap_or(f64::NAN);
        let r = best["mean"]["recall"].as_f64().unwrap_or(f64::NAN);
        ensure(images >= 200, format!("only {images} images evaluated"))?;
        ensure(r >= 0.6 && r > p, format!("precision {p:.3}, recall {r:.3}"))?;
        Ok(format!("{images} images: precision {p:.3} < recall {r:.3}"))
    })())
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("oracle equivalence on 100 random networks", oracle_equivalence),
        ("forward conv/dense/maxpool vs naive loops", forward_correctness),
        ("flatten inverse over (512,7,7)", flatten_inverse),
        ("7x7 grid projection over 224x224", coarse_projection),
        ("saliency properties", saliency_properties),
        ("metric fixtures and iou bound", metric_fixtures),
        ("end-to-end toy fixture", end_to_end),
        ("dataset-scale precision/recall", dataset_scale),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let v = check();
        let secs = started.elapsed().as_secs_f64();
        match v {
            Verdict::Pass(d) => println!("PASS  {name}: {d} [{secs:.2}s]"),
            Verdict::Skip(d) => println!("SKIP  {name}: {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.2}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
