use std::path::Path;
use std::process::{Command, Output};

fn jr2net(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jr2net")).args(args).env("JR2_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = jr2net(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(args: &[&str]) -> String {
    let out = jr2net(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let sim = dir.path().join("sim");

    ok(&["gen-data", "--count", "10", "--height", "16", "--width", "16", "--bands", "4", "--seed", "3", "--out", s(&data)]);
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 10);

    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "# toy run\ndataset_dir = {}\nbands = 4\nfeatures = 2\nstages = 2\nhidden_layers = 1\nwidth = 4\nprior_width = 4\n\
             epochs = 2\nbatch_size = 4\npatch_size = 8\npatches_per_image = 1\nvalidate_every = 1\nseed = 5\n",
            s(&data)
        ),
    )
    .unwrap();
    let out = ok(&["train", "--config", s(&config), "--out", s(&run)]);
    assert!(out.contains("validation psnr="), "{out}");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,step,total,mse,l_ae,val_psnr"));
    assert!(run.join("checkpoints").join("last.jr2w").exists());

    let truth = data.join("scene_0009.csi");
    ok(&["simulate", "--cube", s(&truth), "--seed", "8", "--out", s(&sim)]);
    let recon = sim.join("recon.csi");
    let out = ok(&[
        "reconstruct",
        "--checkpoint",
        s(&run.join("model.jr2w")),
        "--measurement",
        s(&sim.join("scene_0009.measurement.csi")),
        "--aperture",
        s(&sim.join("scene_0009.aperture.csi")),
        "--trace",
        "--out",
        s(&recon),
    ]);
    assert!(out.contains("wrote 2 stage cubes"), "{out}");
    assert!(sim.join("recon_stage1.csi").exists() && sim.join("recon_stage2.csi").exists());

    let csv = dir.path().join("eval.csv");
    let out = ok(&["evaluate", "--recon", s(&recon), "--truth", s(&truth), "--out", s(&csv)]);
    assert!(out.starts_with("recon psnr="), "{out}");
    let csv = std::fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("id,psnr,ssim,sam\nrecon,"));

    // A checkpoint for 4 bands cannot read a measurement simulated for 3.
    let other = dir.path().join("three");
    ok(&["gen-data", "--count", "1", "--height", "16", "--width", "16", "--bands", "3", "--seed", "1", "--out", s(&other)]);
    ok(&["simulate", "--cube", s(&other.join("scene_0000.csi")), "--seed", "1", "--out", s(&other)]);
    let err = error_line(&[
        "reconstruct",
        "--checkpoint",
        s(&run.join("model.jr2w")),
        "--measurement",
        s(&other.join("scene_0000.measurement.csi")),
        "--aperture",
        s(&other.join("scene_0000.aperture.csi")),
        "--out",
        s(&dir.path().join("bad.csi")),
    ]);
    assert!(err.starts_with("error kind=argument"), "{err}");
    assert!(err.contains("3 bands"), "{err}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--count", "3", "--height", "8", "--width", "8", "--bands", "3", "--seed", "11", "--out", s(d)]);
    }
    for name in ["scene_0000.csi", "scene_0002.csi", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn omitted_seed_is_drawn_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gen-data", "--count", "1", "--height", "8", "--width", "8", "--bands", "2", "--out", s(dir.path())]);
    let seed_line = out.lines().find(|l| l.starts_with("seed: ")).expect("seed printed");
    assert!(seed_line[6..].parse::<u64>().is_ok());
}

#[test]
fn simulate_reports_noise_and_defaults_to_one_third() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "1", "--height", "64", "--width", "64", "--bands", "4", "--seed", "2", "--out", s(dir.path())]);
    let cube = dir.path().join("scene_0000.csi");
    let clean = ok(&["simulate", "--cube", s(&cube), "--seed", "4", "--out", s(&dir.path().join("clean"))]);
    let fill: f64 = clean.split("transmittance ").nth(1).unwrap().trim().parse().unwrap();
    assert!((fill - 1.0 / 3.0).abs() < 0.02, "{fill}");

    let noisy = ok(&["simulate", "--cube", s(&cube), "--seed", "4", "--snr-db", "30", "--out", s(&dir.path().join("noisy"))]);
    let snr: f64 = noisy.lines().find_map(|l| l.strip_prefix("snr_db: ")).unwrap().parse().unwrap();
    assert!((snr - 30.0).abs() < 0.5, "{snr}");

    // The residual norm should match the noise level implied by the SNR.
    let y0 = jr2net::load_cube(dir.path().join("clean/scene_0000.measurement.csi")).unwrap();
    let y1 = jr2net::load_cube(dir.path().join("noisy/scene_0000.measurement.csi")).unwrap();
    let energy: f64 = y0.as_slice().iter().map(|v| v * v).sum();
    let residual: f64 = y0.as_slice().iter().zip(y1.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    let expected = energy / 10f64.powf(3.0);
    assert!((residual / expected - 1.0).abs() < 0.1, "{residual} vs {expected}");
}

#[test]
fn evaluate_identity_hits_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "1", "--height", "16", "--width", "16", "--bands", "3", "--seed", "2", "--out", s(dir.path())]);
    let cube = dir.path().join("scene_0000.csi");
    let out = ok(&["evaluate", "--recon", s(&cube), "--truth", s(&cube)]);
    assert!(out.contains("psnr=100.0000 ssim=1.0000 sam=0.000000"), "{out}");
}

#[test]
fn gradcheck_tiny_passes() {
    let out = ok(&["gradcheck", "--preset", "tiny", "--seed", "1"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert!(error_line(&["gradcheck", "--preset", "huge", "--seed", "1"]).starts_with("error kind=argument"));
}

#[test]
fn render_writes_png() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "1", "--height", "12", "--width", "10", "--bands", "3", "--seed", "2", "--out", s(dir.path())]);
    let cube = dir.path().join("scene_0000.csi");
    let band = dir.path().join("band.png");
    let rgb = dir.path().join("rgb.png");
    ok(&["render", "--cube", s(&cube), "--band", "1", "--out", s(&band)]);
    ok(&["render", "--cube", s(&cube), "--rgb", "--weights", "0,0,1;0,1,0;1,0,0", "--out", s(&rgb)]);
    for p in [band, rgb] {
        let bytes = std::fs::read(p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
    assert!(error_line(&["render", "--cube", s(&cube), "--band", "7", "--out", s(&dir.path().join("x.png"))]).contains("band 7"));
}

#[test]
fn config_errors_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "epochs = ten\nbatch_size = 0\nflavour = mint\n").unwrap();
    let err = error_line(&["train", "--config", s(&config), "--seed", "1"]);
    assert!(err.starts_with("error kind=argument"), "{err}");
    for needle in ["epochs", "batch_size", "unknown key 'flavour'", "dataset_dir"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
}
