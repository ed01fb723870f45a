use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stereo-crf"))
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["synth", "train-unary", "train-joint", "infer", "eval"] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help failed");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn unknown_flag_and_missing_files_fail() {
    assert!(!bin().args(["infer", "--bogus"]).output().unwrap().status.success());
    assert!(!bin().arg("no-such-command").output().unwrap().status.success());
    let out = bin()
        .args([
            "eval",
            "--manifest",
            "/nonexistent/manifest.txt",
            "--pred-dir",
            "/nonexistent",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn library_entry_point_reports_exit_codes() {
    assert_eq!(stereo_crf::cli::run(["stereo-crf", "synth", "--help"]), 0);
    assert_ne!(stereo_crf::cli::run(["stereo-crf", "eval", "--nope"]), 0);
}

#[test]
fn single_pair_inference_writes_pfm_and_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let run = |args: &[&str]| bin().args(args).output().unwrap();
    assert!(run(&[
        "synth",
        "--out-dir",
        &d("data"),
        "--count",
        "2",
        "--height",
        "12",
        "--width",
        "24",
        "--labels",
        "4"
    ])
    .status
    .success());
    assert!(run(&[
        "train-unary",
        "--manifest",
        &d("data/manifest.txt"),
        "--labels",
        "4",
        "--out",
        &d("u.ckpt"),
        "--set",
        "filters=4",
        "--set",
        "epochs=1",
        "--log",
        &d("u.csv"),
        "--val-manifest",
        &d("data/manifest.txt"),
    ])
    .status
    .success());
    assert!(dir.path().join("u.ckpt.best").exists());
    let log = std::fs::read_to_string(dir.path().join("u.csv")).unwrap();
    assert!(log.starts_with("epoch,cross_entropy\n"));

    for mode in ["off", "contrast"] {
        let out = d(&format!("pred_{mode}.pfm"));
        let res = run(&[
            "infer",
            "--checkpoint",
            &d("u.ckpt"),
            "--left",
            &d("data/left_0000.pgm"),
            "--right",
            &d("data/right_0000.pgm"),
            "--out",
            &out,
            "--labels",
            "4",
            "--pairwise",
            mode,
            "--sublabel",
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let pfm = stereo_crf::stereo_io::read_pfm(&std::fs::read(&out).unwrap()).unwrap();
        assert_eq!((pfm.height, pfm.width), (12, 24));
        assert!(pfm.data.iter().all(|v| (0.0..=3.0).contains(v)));
        let ppm = std::fs::read(dir.path().join(format!("pred_{mode}.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n24 12\n255\n"));
    }

    // learned mode needs a pairwise network
    let res = run(&[
        "infer",
        "--checkpoint",
        &d("u.ckpt"),
        "--left",
        &d("data/left_0000.pgm"),
        "--right",
        &d("data/right_0000.pgm"),
        "--out",
        &d("x.pfm"),
        "--labels",
        "4",
        "--pairwise",
        "learned",
    ]);
    assert!(!res.status.success());
}

#[test]
fn config_file_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "gamma=-1\n").unwrap();
    let out = bin()
        .args([
            "train-unary",
            "--manifest",
            "/nonexistent",
            "--labels",
            "4",
            "--out",
            "/tmp/x",
            "--config",
            cfg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}
