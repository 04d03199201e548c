use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn segnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn segnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Small network and a short budget so a run takes seconds.
const TINY: &str = "input_height=16\ninput_width=16\nbase_channels=2\nembed_dim=4\nwindow_size=4\n\
max_epochs=2\nbatch_size=4\naugment=false\nval_fraction=0.25\n";

fn tiny_setup(dir: &Path) {
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let o = segnet(
        &[
            "synth",
            "--out",
            "data",
            "--set",
            "count=8",
            "--set",
            "height=16",
            "--set",
            "width=16",
            "--seed",
            "4",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let verbs: [(&str, &[&str]); 8] = [
        ("synth", &["--spec", "--out", "--seed", "--set"]),
        ("train", &["--config", "--data", "--out", "--seed", "--set"]),
        ("eval", &["--checkpoint", "--data", "--report"]),
        ("predict", &["--checkpoint", "--image", "--out"]),
        ("gradcheck", &["--scope", "--seed"]),
        (
            "complexity",
            &["--config", "--literal-eq15", "--seed", "--set"],
        ),
        ("ttest", &["--a", "--b"]),
        (
            "ablate",
            &[
                "--mode", "--config", "--data", "--test", "--source", "--out", "--seed", "--set",
            ],
        ),
    ];
    let top = stdout(&segnet(&["--help"], dir.path()));
    for (verb, flags) in verbs {
        assert!(top.contains(verb), "{verb} missing from top-level help");
        let o = segnet(&[verb, "--help"], dir.path());
        assert_eq!(code(&o), 0);
        let help = stdout(&o);
        for f in flags {
            assert!(help.contains(f), "{verb} --help lacks {f}");
        }
        // every documented long flag is one we expect
        let documented = help
            .split_whitespace()
            .filter(|w| w.starts_with("--"))
            .map(|w| w.trim_end_matches(','))
            .filter(|w| !matches!(*w, "--help" | "--version"));
        for d in documented {
            let d = d.split(['=', '<']).next().unwrap();
            assert!(flags.contains(&d), "{verb} documents unexpected {d}");
        }
    }
}

#[test]
fn unknown_flags_and_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["complexity", "--bogus"][..],
        &["frobnicate"],
        &["gradcheck", "--scope", "everything"],
        &["complexity", "--set", "nonsense=1"],
        &["complexity", "--set", "base_channels=zero"],
        &["synth", "--out", "x", "--set", "noise=-1"],
    ] {
        assert_eq!(code(&segnet(args, dir.path())), 1, "{args:?}");
    }
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&segnet(
            &["ttest", "--a", "no.csv", "--b", "no.csv"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&segnet(
            &["train", "--data", "nowhere", "--out", "o"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&segnet(
            &[
                "predict",
                "--checkpoint",
                "nowhere",
                "--image",
                "x.pgm",
                "--out",
                "m.pgm"
            ],
            dir.path()
        )),
        2
    );
}

#[test]
fn complexity_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.cfg"),
        "input_height=8\ninput_width=8\nembed_dim=4\nwindow_size=2\n",
    )
    .unwrap();
    let o = segnet(&["complexity", "--config", "c.cfg"], dir.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("C_MSA 36864\n"), "{out}");
    assert!(out.contains("C_SW-MSA 6144\n"), "{out}");
    assert!(!out.contains("quadratic"));
    let lit = stdout(&segnet(
        &["complexity", "--config", "c.cfg", "--literal-eq15"],
        dir.path(),
    ));
    // 4·64·16 + 2·4·64²·4
    assert!(lit.contains("C_SW-MSA_quadratic 135168\n"), "{lit}");
}

#[test]
fn ttest_fixture() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("a.csv"),
        "image,J\nx,2\ny,4\nz,6\nmean±std,4±2\n",
    )
    .unwrap();
    fs::write(dir.path().join("b.csv"), "image,J\nz,3\nx,1\ny,2\n").unwrap();
    let o = segnet(&["ttest", "--a", "a.csv", "--b", "b.csv"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(
        stdout(&o).starts_with("t=3.4641 df=2 p=0.0742"),
        "{}",
        stdout(&o)
    );
    fs::write(dir.path().join("c.csv"), "image,J\nx,1\ny,2\n").unwrap();
    assert_eq!(
        code(&segnet(
            &["ttest", "--a", "a.csv", "--b", "c.csv"],
            dir.path()
        )),
        1
    );
}

#[test]
fn gradcheck_ops_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = segnet(&["gradcheck", "--scope", "ops"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().count() >= 20);
    assert!(!stdout(&o).contains("FAIL"));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_bytewise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "2" } else { "1" };
        assert_eq!(
            code(&segnet(
                &["synth", "--out", out, "--set", "count=5", "--seed", seed],
                dir.path()
            )),
            0
        );
    }
    let (a, b, c) = (
        tree(&dir.path().join("a")),
        tree(&dir.path().join("b")),
        tree(&dir.path().join("c")),
    );
    assert_eq!(a.len(), 11);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_setup(d);
    for out in ["run1", "run2"] {
        let o = segnet(
            &[
                "train", "--config", "tiny.cfg", "--data", "data", "--out", out, "--seed", "3",
            ],
            d,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (r1, r2) = (tree(&d.join("run1")), tree(&d.join("run2")));
    assert_eq!(r1, r2);
    let names: Vec<&str> = r1.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        [
            "config.txt",
            "log.csv",
            "manifest.txt",
            "tensors.bin",
            "train.cfg"
        ]
    );
    let log = fs::read_to_string(d.join("run1/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,lambda_b,lr,loss_d,loss_j,loss_b,val_J,val_D\n"));

    let o = segnet(
        &[
            "eval",
            "--checkpoint",
            "run1",
            "--data",
            "data",
            "--report",
            "rep",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("rep/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.lines().last().unwrap().starts_with("mean±std,"));
    assert_eq!(fs::read_dir(d.join("rep/overlays")).unwrap().count(), 8);

    let o = segnet(
        &[
            "predict",
            "--checkpoint",
            "run1",
            "--image",
            "data/images/0000.ppm",
            "--out",
            "m.pgm",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mask = segcore::io::read_mask(&d.join("m.pgm"), 1).unwrap();
    assert_eq!(mask.labels.shape(), &[16, 16]);

    // the eval report doubles as a t-test scores file
    fs::copy(d.join("rep/metrics.csv"), d.join("other.csv")).unwrap();
    assert_eq!(
        code(&segnet(
            &["ttest", "--a", "rep/metrics.csv", "--b", "other.csv"],
            d
        )),
        1,
        "zero variance"
    );
}

#[test]
fn predict_pads_smaller_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_setup(d);
    assert_eq!(
        code(&segnet(
            &[
                "train",
                "--config",
                "tiny.cfg",
                "--data",
                "data",
                "--out",
                "run",
                "--set",
                "max_epochs=1"
            ],
            d
        )),
        0
    );
    let img = segcore::Tensor::full(&[1, 10, 13], 0.5);
    segcore::io::write_image(&img, &d.join("small.pgm")).unwrap();
    let o = segnet(
        &[
            "predict",
            "--checkpoint",
            "run",
            "--image",
            "small.pgm",
            "--out",
            "m.pgm",
        ],
        d,
    );
    assert_eq!(
        code(&o),
        1,
        "single-channel image for a three-channel network"
    );
    let img = segcore::Tensor::full(&[3, 10, 13], 0.5);
    segcore::io::write_image(&img, &d.join("small.ppm")).unwrap();
    let o = segnet(
        &[
            "predict",
            "--checkpoint",
            "run",
            "--image",
            "small.ppm",
            "--out",
            "m.pgm",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        segcore::io::read_mask(&d.join("m.pgm"), 1)
            .unwrap()
            .labels
            .shape(),
        &[10, 13]
    );
    let big = segcore::Tensor::full(&[3, 24, 16], 0.5);
    segcore::io::write_image(&big, &d.join("big.ppm")).unwrap();
    assert_eq!(
        code(&segnet(
            &[
                "predict",
                "--checkpoint",
                "run",
                "--image",
                "big.ppm",
                "--out",
                "m.pgm"
            ],
            d
        )),
        1
    );
}

#[test]
fn ablation_row_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_setup(d);
    fs::write(
        d.join("tiny.cfg"),
        TINY.replace("max_epochs=2", "max_epochs=1"),
    )
    .unwrap();
    let run = |mode: &str, out: &str| {
        let o = segnet(
            &[
                "ablate", "--mode", mode, "--config", "tiny.cfg", "--data", "data", "--test",
                "data", "--out", out, "--seed", "2",
            ],
            d,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(d.join(out)).unwrap()
    };
    let rows = |csv: &str| {
        csv.lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    let lc = run("loss_combo", "lc.csv");
    assert!(lc.starts_with("variant,J,D,Acc,Sn,Sp\n"));
    assert_eq!(rows(&lc), ["d", "j", "b", "d+b", "d+j", "j+b", "d+j+b"]);
    assert_eq!(run("loss_combo", "lc2.csv"), lc);
    let pl = run("placement", "pl.csv");
    assert_eq!(
        rows(&pl),
        [
            "baseline",
            "separable",
            "separable+transformer:dense",
            "separable+transformer:decoder_pools",
            "separable+transformer:skips",
            "separable+transformer:skips_and_dense",
        ]
    );
    assert_eq!(
        code(&segnet(
            &[
                "ablate", "--mode", "transfer", "--config", "tiny.cfg", "--data", "data", "--test",
                "data"
            ],
            d
        )),
        1
    );
    assert_eq!(
        code(&segnet(
            &["ablate", "--mode", "tables", "--data", "data", "--test", "data"],
            d
        )),
        1
    );
}
