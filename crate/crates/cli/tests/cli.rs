use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bilgrid::io::{read_field, read_image, read_tensor, write_field, write_image, write_keypoints, write_tensor};
use bilgrid::metrics::LabelMask;
use bilgrid::{DisplacementField, Image, KeypointSet, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn bilgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilgrid"))
        .args(args)
        .env_remove("BILGRID_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Scratch(TempDir);

impl Scratch {
    fn new() -> Self {
        Scratch(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn image(&self, name: &str, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> PathBuf {
        let p = self.path(name);
        let img = Image::new(Tensor::from_fn(&[1, h, w], |i| f(i[1], i[2]))).unwrap();
        write_image(&img, &p).unwrap();
        p
    }

    fn keypoints(&self, name: &str, pairs: &[([f64; 2], [f64; 2])]) -> PathBuf {
        let p = self.path(name);
        let v: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().map(|(a, b)| (a.to_vec(), b.to_vec())).collect();
        write_keypoints(&KeypointSet::from_pairs(&v).unwrap(), &p).unwrap();
        p
    }

    fn mask(&self, name: &str, h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> PathBuf {
        let p = self.path(name);
        let m = LabelMask::from_fn(&[h, w], |i| f(i[0], i[1]));
        let t = Tensor::new(vec![h, w], m.labels().iter().map(|&l| l as f64).collect()).unwrap();
        write_tensor(&t, &p).unwrap();
        p
    }
}

fn checker(y: usize, x: usize) -> f64 {
    if (y / 16 + x / 16).is_multiple_of(2) { 0.2 } else { 0.8 }
}

#[test]
fn filter_reports_grid_shape() {
    let d = Scratch::new();
    let input = d.image("a.pgm", 128, 128, checker);
    let out = d.path("b.pgm");
    let o = bilgrid(&["filter", "--in", s(&input), "--out", s(&out), "--ss", "8", "--sr", "0.1", "--sigma", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("grid 16x16x10"), "{}", stderr(&o));
    assert_eq!(read_image(&out).unwrap().spatial_shape(), &[128, 128]);

    let o = bilgrid(&["filter", "--in", s(&input), "--out", s(&out), "--sr", "1"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("range extent 1"), "{}", stderr(&o));
}

#[test]
fn filter_error_codes() {
    let d = Scratch::new();
    let out = d.path("b.pgm");
    let missing = d.path("missing.pgm");
    assert_eq!(code(&bilgrid(&["filter", "--in", s(&missing), "--out", s(&out)])), 3);
    assert_eq!(code(&bilgrid(&["filter", "--in", s(&missing), "--out", s(&out), "--ss", "-1"])), 2);
    assert_eq!(code(&bilgrid(&["filter", "--out", s(&out)])), 2);
    let flat = d.image("flat.pgm", 16, 16, |_, _| 0.5);
    assert_eq!(code(&bilgrid(&["filter", "--in", s(&flat), "--out", s(&out)])), 4);
    let garbage = d.path("junk.pgm");
    std::fs::write(&garbage, b"not an image").unwrap();
    assert_eq!(code(&bilgrid(&["filter", "--in", s(&garbage), "--out", s(&out)])), 3);
}

#[test]
fn upsample_shapes_and_constants() {
    let d = Scratch::new();
    let guide = d.image("g.pgm", 64, 64, checker);
    let low = d.path("low.blg");
    write_tensor(&Tensor::filled(&[1, 8, 8], 0.375), &low).unwrap();
    let out = d.path("up.blg");
    let o = bilgrid(&["upsample", "--low", s(&low), "--guide", s(&guide), "--out", s(&out), "--scale", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = read_tensor(&out).unwrap();
    assert_eq!(t.shape(), &[1, 64, 64]);
    assert!(t.data().iter().all(|&v| (v - 0.375).abs() < 1e-12));

    let bad = d.image("g60.pgm", 60, 60, checker);
    let o = bilgrid(&["upsample", "--low", s(&low), "--guide", s(&bad), "--out", s(&out), "--scale", "8"]);
    assert_eq!(code(&o), 2);
    let o = bilgrid(&["upsample", "--low", s(&low), "--guide", s(&guide), "--out", s(&out), "--scale", "7.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn register_uniform_displacement() {
    let d = Scratch::new();
    let fixed = d.image("fixed.pgm", 48, 48, |_, x| if x < 24 { 0.25 } else { 0.75 });
    let moving = d.image("moving.pgm", 48, 48, |y, x| (y * 48 + x) as f64 / 2304.0);
    let kps = d.keypoints("kp.csv", &[([10.0, 5.0], [13.0, 5.0]), ([30.0, 40.0], [33.0, 40.0])]);
    let field = d.path("u.blg");
    let warped = d.path("w.pgm");
    let report = d.path("report.json");
    let o = bilgrid(&[
        "register", "--fixed", s(&fixed), "--keypoints", s(&kps), "--out", s(&field),
        "--moving", s(&moving), "--warped", s(&warped), "--report", s(&report), "--ss", "4", "--sr", "0.25",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&o);
    assert!(r["tre_mean"].as_f64().unwrap() <= 1e-3);
    assert_eq!(r["converged"], Value::Bool(true));
    assert_eq!(r["max_constraint_violation"].as_f64(), Some(0.0));
    assert_eq!(r["steps"], Value::Null);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved, r);
    let u = read_field(&field).unwrap();
    assert!(u.vectors().channel(0).iter().all(|&v| (v - 3.0).abs() < 1e-6));
    assert!(field.with_extension("blg.json").exists());
    assert_eq!(read_image(&warped).unwrap().spatial_shape(), &[48, 48]);

    let o = bilgrid(&["register", "--fixed", s(&fixed), "--keypoints", s(&kps), "--out", s(&field), "--diffeo"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&o)["steps"].as_u64(), Some(7));
}

#[test]
fn register_error_codes() {
    let d = Scratch::new();
    let fixed = d.image("fixed.pgm", 32, 32, checker);
    let field = d.path("u.blg");
    let empty = d.path("empty.csv");
    std::fs::write(&empty, "# no rows\n").unwrap();
    let o = bilgrid(&["register", "--fixed", s(&fixed), "--keypoints", s(&empty), "--out", s(&field)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let kps = d.keypoints("kp.csv", &[([2.0, 2.0], [4.0, 2.0]), ([29.0, 29.0], [27.0, 30.0])]);
    let o = bilgrid(&["register", "--fixed", s(&fixed), "--keypoints", s(&kps), "--out", s(&field), "--max-iter", "1", "--ss", "2"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert_eq!(json(&o)["warning"], Value::Bool(true));
    assert!(field.exists());

    let o = bilgrid(&["register", "--fixed", s(&fixed), "--keypoints", s(&kps), "--out", s(&field), "--tol", "0"]);
    assert_eq!(code(&o), 2);
    let o = bilgrid(&["register", "--fixed", s(&fixed), "--keypoints", s(&kps), "--out", s(&field), "--steps", "0", "--diffeo"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn warp_zero_shift_and_mismatch() {
    let d = Scratch::new();
    let input = d.image("in.pgm", 20, 24, |y, x| ((y * 7 + x * 3) % 17) as f64 / 16.0);
    let zero = d.path("zero.blg");
    write_field(&DisplacementField::zeros(&[20, 24]), &zero).unwrap();
    let out = d.path("out.pgm");
    let o = bilgrid(&["warp", "--in", s(&input), "--field", s(&zero), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());

    let shift = d.path("shift.blg");
    write_field(&DisplacementField::from_fn(&[20, 24], |_| vec![0.0, 2.0]), &shift).unwrap();
    assert_eq!(code(&bilgrid(&["warp", "--in", s(&input), "--field", s(&shift), "--out", s(&out)])), 0);
    let (a, b) = (read_image(&input).unwrap(), read_image(&out).unwrap());
    for y in 0..20 {
        for x in 0..22 {
            assert_eq!(b.tensor().get(&[0, y, x]), a.tensor().get(&[0, y, x + 2]));
        }
    }

    let wrong = d.path("wrong.blg");
    write_field(&DisplacementField::zeros(&[20, 20]), &wrong).unwrap();
    assert_eq!(code(&bilgrid(&["warp", "--in", s(&input), "--field", s(&wrong), "--out", s(&out)])), 2);
}

#[test]
fn metrics_outputs() {
    let d = Scratch::new();
    let m = d.mask("m.blg", 16, 16, |y, x| ((4..10).contains(&y) && (3..12).contains(&x)) as u32);
    let o = bilgrid(&["metrics", "--mask-a", s(&m), "--mask-b", s(&m), "--metrics", "dice,hd95"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&o), serde_json::json!({"dice": 1.0, "hd95": 0.0}));

    let zero = d.path("zero.blg");
    write_field(&DisplacementField::zeros(&[16, 16]), &zero).unwrap();
    let o = bilgrid(&["metrics", "--field", s(&zero), "--metrics", "sdlogj,folds"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&o), serde_json::json!({"sdlogj": 0.0, "folds": 0}));

    assert_eq!(code(&bilgrid(&["metrics", "--field", s(&zero), "--metrics", "tre"])), 2);
    assert_eq!(code(&bilgrid(&["metrics"])), 2);

    let kps = d.keypoints("kp.csv", &[([1.0, 1.0], [4.0, 5.0])]);
    let a = d.image("a.pgm", 16, 16, |_, _| 0.0);
    let b = d.image("b.pgm", 16, 16, |y, x| ((y + x) % 2) as f64);
    let o = bilgrid(&[
        "metrics", "--field", s(&zero), "--keypoints", s(&kps), "--image-a", s(&a), "--image-b", s(&b),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["tre"].as_f64(), Some(5.0));
    assert_eq!(r["mse"].as_f64(), Some(0.5));
    assert_eq!(r["smoothness"].as_f64(), Some(0.0));
    assert!(r.get("dice").is_none());
}

#[test]
fn bench_is_deterministic() {
    let args = ["bench", "--size", "48", "--seed", "3", "--sigma-s", "4", "--rates", "2,4", "--repeats", "1"];
    let a = bilgrid(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = bilgrid(&args);
    let (ja, jb) = (json(&a), json(&b));
    let rows = ja["grid"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for (ra, rb) in rows.iter().zip(jb["grid"].as_array().unwrap()) {
        assert_eq!(ra["relative_rms"], rb["relative_rms"]);
        assert!(ra["relative_rms"].as_f64().unwrap() <= 0.05);
    }
}

#[test]
fn thread_flags() {
    let d = Scratch::new();
    let input = d.image("a.pgm", 32, 32, checker);
    let out = d.path("b.pgm");
    let o = bilgrid(&["--threads", "2", "filter", "--in", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_bilgrid"))
        .args(["filter", "--in", s(&input), "--out", s(&out)])
        .env("BILGRID_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(code(&bilgrid(&["--threads", "0", "filter", "--in", s(&input), "--out", s(&out)])), 2);
}
