use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motiondiff::image::{encode_ppm, RasterImage};
use motiondiff_cli::{EXIT_NUMERIC, EXIT_PARSE, EXIT_USAGE};

fn motiondiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motiondiff")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = "k = 2\nn = 3\nfps = 25\nsequences = 6\nsequence_frames = 40\nm = 20\nstride = 10\ntrain_steps = 30\nhidden = 8\ndiffusion_steps = 10\n";

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn gradient_image(h: usize, w: usize) -> Vec<u8> {
    let bytes: Vec<u8> = (0..h * w * 3).map(|i| ((i * 37) % 251) as u8).collect();
    encode_ppm(&RasterImage::<f64>::from_bytes(h, w, 3, &bytes).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = workdir();
    assert_eq!(code(&motiondiff(dir.path(), &[])), EXIT_USAGE);
    assert_eq!(code(&motiondiff(dir.path(), &["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&motiondiff(dir.path(), &["tps-solve", "pairs.csv"])), EXIT_USAGE);
}

#[test]
fn tps_solve_reports_and_classifies_errors() {
    let dir = workdir();
    let d = dir.path();
    fs::write(d.join("pairs.csv"), "src_x,src_y,dst_x,dst_y\n0.1,0,0,0\n1.1,0,1,0\n0.1,1,0,1\n0.6,0.6,0.5,0.5\n").unwrap();
    let out = motiondiff(d, &["tps-solve", "pairs.csv", "-o", "t.mdtp"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("bending_energy=") && text.contains("max_residual="));
    assert!(stdout(&motiondiff(d, &["verify", "t.mdtp"])).contains("MDTP ok"));

    fs::write(d.join("line.csv"), "src_x,src_y,dst_x,dst_y\n0,0,0,0\n1,1,1,1\n2,2,2,2\n").unwrap();
    assert_eq!(code(&motiondiff(d, &["tps-solve", "line.csv", "-o", "l.mdtp"])), EXIT_NUMERIC);
    fs::write(d.join("bad.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(code(&motiondiff(d, &["tps-solve", "bad.csv", "-o", "b.mdtp"])), EXIT_PARSE);
    assert_eq!(code(&motiondiff(d, &["tps-solve", "missing.csv", "-o", "m.mdtp"])), EXIT_PARSE);
}

#[test]
fn warp_identity_and_out_of_range() {
    let dir = workdir();
    let d = dir.path();
    let img = gradient_image(20, 30);
    fs::write(d.join("in.ppm"), &img).unwrap();
    fs::write(d.join("id.csv"), "src_x,src_y,dst_x,dst_y\n-0.5,-0.5,-0.5,-0.5\n0.5,-0.5,0.5,-0.5\n0,0.5,0,0.5\n").unwrap();
    fs::write(d.join("far.csv"), "src_x,src_y,dst_x,dst_y\n4.5,-0.5,-0.5,-0.5\n5.5,-0.5,0.5,-0.5\n5,0.5,0,0.5\n").unwrap();
    assert_eq!(code(&motiondiff(d, &["tps-solve", "id.csv", "-o", "id.mdtp"])), 0);
    assert_eq!(code(&motiondiff(d, &["tps-solve", "far.csv", "-o", "far.mdtp"])), 0);

    let out = motiondiff(d, &["warp", "in.ppm", "-t", "id.mdtp", "-o", "out.ppm", "--mask", "mask.pgm"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(d.join("out.ppm")).unwrap(), img);
    assert!(stdout(&out).contains("occluded_pixels=0"));

    let out = motiondiff(d, &["warp", "in.ppm", "-t", "far.mdtp", "-o", "far.ppm", "--mask", "far.pgm", "--no-background"]);
    assert_eq!(code(&out), 0);
    let warped = fs::read(d.join("far.ppm")).unwrap();
    assert!(warped[warped.len() - 20 * 30 * 3..].iter().all(|&b| b == 0));
    let mask = fs::read(d.join("far.pgm")).unwrap();
    assert!(mask[mask.len() - 20 * 30..].iter().all(|&b| b == 255));
    assert_eq!(code(&motiondiff(d, &["verify", "far.ppm", "far.pgm"])), 0);
}

#[test]
fn pipeline_runs_and_is_seeded() {
    let dir = workdir();
    let d = dir.path();
    let c = ["--config", "small.cfg"];
    let run = |args: &[&str]| {
        let out = motiondiff(d, &[&c[..], args].concat());
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    assert!(run(&["--seed", "5", "synth-data", "-o", "a"]).starts_with("seed=5\n"));
    run(&["--seed", "5", "synth-data", "-o", "b"]);
    run(&["--seed", "6", "synth-data", "-o", "c"]);
    let bytes = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(bytes("a/seq_0003.mdsq"), bytes("b/seq_0003.mdsq"));
    assert_ne!(bytes("a/seq_0003.mdsq"), bytes("c/seq_0003.mdsq"));
    assert!(String::from_utf8(bytes("a/index.csv")).unwrap().starts_with("# seed=5\n"));

    let report = run(&["--seed", "5", "train", "a", "-o", "model.mdnn", "--loss-csv", "loss.csv"]);
    assert!(report.contains("gradient_check_max_rel_error="));
    let loss = String::from_utf8(bytes("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2 + 30);

    let gen = run(&[
        "--seed",
        "5",
        "generate",
        "--model",
        "model.mdnn",
        "--audio",
        "a/audio_0000.mdaf",
        "--seed-motion",
        "a/seed_0000.mdsq",
        "-o",
        "gen/gen_0000.mdsq",
        "--scores",
        "scores.csv",
    ]);
    assert!(gen.contains("frames=40\nsegments=2\n"), "{gen}");
    let scores = String::from_utf8(bytes("scores.csv")).unwrap();
    assert_eq!(scores.lines().filter(|l| l.starts_with("1,")).count(), 5);

    fs::write(d.join("src.ppm"), gradient_image(16, 16)).unwrap();
    let rendered = run(&[
        "generate",
        "--model",
        "model.mdnn",
        "--audio",
        "a/audio_0000.mdaf",
        "--seed-motion",
        "a/seed_0000.mdsq",
        "-o",
        "gen2.mdsq",
        "--render-source",
        "src.ppm",
        "--render-dir",
        "frames",
    ]);
    assert!(rendered.contains("rendered_frames=40"));
    assert_eq!(fs::read_to_string(d.join("frames/frames.txt")).unwrap().lines().count(), 41);
    assert_eq!(code(&motiondiff(d, &["verify", "frames/frame_00039.ppm"])), 0);

    let summary = run(&["metrics", "gen", "--audio", "a", "--reference", "a", "-o", "met"]);
    assert!(summary.contains("bas_mean=") && summary.contains("frechet="));
    assert!(d.join("met/velocity/gen_0000.csv").is_file());
    let beats = run(&["beats", "a/audio_0001.mdaf"]);
    assert!(beats.starts_with("source=features\n"));
    assert_eq!(code(&motiondiff(d, &["verify", "model.mdnn", "gen/gen_0000.mdsq", "a/audio_0000.mdaf"])), 0);
}

#[test]
fn numeric_and_parse_failures() {
    let dir = workdir();
    let d = dir.path();
    fs::create_dir(d.join("empty")).unwrap();
    let c = ["--config", "small.cfg"];
    assert_eq!(code(&motiondiff(d, &[&c[..], &["train", "empty", "-o", "m.mdnn"]].concat())), EXIT_NUMERIC);

    fs::write(d.join("bad.cfg"), "k = 2\nwobble = 1\n").unwrap();
    assert_eq!(code(&motiondiff(d, &["--config", "bad.cfg", "synth-data", "-o", "x"])), EXIT_PARSE);

    fs::write(d.join("junk.mdsq"), b"MDSQ\x01\x00").unwrap();
    let out = motiondiff(d, &["verify", "junk.mdsq"]);
    assert_eq!(code(&out), EXIT_PARSE);
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.mdsq"));

    // model trained on 12 channels, seed motion with 8
    assert_eq!(code(&motiondiff(d, &[&c[..], &["synth-data", "-o", "a"]].concat())), 0);
    assert_eq!(code(&motiondiff(d, &[&c[..], &["train", "a", "-o", "m.mdnn"]].concat())), 0);
    fs::write(d.join("narrow.cfg"), SMALL.replace("n = 3", "n = 2")).unwrap();
    assert_eq!(code(&motiondiff(d, &["--config", "narrow.cfg", "synth-data", "-o", "b"])), 0);
    let out = motiondiff(
        d,
        &[&c[..], &["generate", "--model", "m.mdnn", "--audio", "a/audio_0000.mdaf", "--seed-motion", "b/seed_0000.mdsq", "-o", "g.mdsq"]]
            .concat(),
    );
    assert_eq!(code(&out), EXIT_NUMERIC);
}
