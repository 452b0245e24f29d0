use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unifl::data::{imageio, load_annotations};
use unifl::frequency::{extract_hf, normalize_display};
use unifl::nn::read_checkpoint;
use unifl::protocol::DatasetId;

fn unifl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unifl")).args(args).env_remove("UNIFL_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = unifl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn protocol_check_reports_aggregates() {
    let out = ok(&["protocol-check"]);
    assert!(out.contains("unified landmarks: 124"), "{out}");
    assert!(out.contains("annotations: 214"), "{out}");
    let dumped = ok(&["protocol-check", "--dump"]);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("map.txt");
    fs::write(&f, &dumped).unwrap();
    assert!(ok(&["protocol-check", "--protocol", p(&f)]).contains("124"));
    fs::write(&f, dumped.replacen("WFLW", "XXXX", 1)).unwrap();
    assert_eq!(unifl(&["protocol-check", "--protocol", p(&f)]).status.code(), Some(2));
}

#[test]
fn weights_csv() {
    let out = ok(&["weights", "--beta", "0"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("unified_id,count,capacity,weight"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 124);
    assert!(rows.iter().all(|r| r.rsplit(',').next() == Some("1")));
    let out = ok(&["weights", "--beta", "0.9"]);
    let four = out.lines().skip(1).find(|l| l.split(',').nth(1) == Some("4")).unwrap();
    let w: f64 = four.rsplit(',').next().unwrap().parse().unwrap();
    assert!((w - 1.0 / (1.0 + 0.9 + 0.81 + 0.729)).abs() < 1e-12);
    assert!(!unifl(&["weights", "--beta", "2"]).status.success());
}

#[test]
fn synth_then_hf_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "2", "--size", "64"]);
    for ds in DatasetId::ALL {
        let entries = load_annotations(&data.join(ds.name()), ds).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].landmarks.len(), ds.num_landmarks());
    }
    let input = data.join("COFW").join("COFW_0001.ppm");
    let out = dir.path().join("hf.ppm");
    ok(&["hf", "--in", p(&input), "--out", p(&out), "--sigma", "10"]);
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..2], b"P6");
    let img = imageio::read_image(&input).unwrap();
    let want: Vec<Vec<f64>> = img.channels.iter().map(|c| normalize_display(&extract_hf(c, 10.0).unwrap()).into_vec()).collect();
    let got = imageio::read_image(&out).unwrap();
    for (g, w) in got.channels.iter().zip(&want) {
        for (a, b) in g.data().iter().zip(w) {
            assert_eq!((a * 255.0).round(), b.round());
        }
    }
}

#[test]
fn loss_replay_from_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "2", "--size", "64", "--heatmaps"]);
    let hm = data.join("heatmaps");
    let same = ok(&["loss", "--gt", p(&hm), "--pred", p(&hm)]);
    assert!(same.contains("total,all,,0,"), "{same}");

    // a prediction of all zeros
    let zero = dir.path().join("zero");
    fs::create_dir(&zero).unwrap();
    for e in fs::read_dir(&hm).unwrap() {
        let e = e.unwrap();
        let mut b = fs::read(e.path()).unwrap();
        b[16..].fill(0);
        fs::write(zero.join(e.file_name()), b).unwrap();
    }
    let total = |beta: &str| -> f64 {
        let out = ok(&["loss", "--gt", p(&hm), "--pred", p(&zero), "--beta", beta]);
        out.lines().find(|l| l.starts_with("total,")).unwrap().split(',').nth(3).unwrap().parse().unwrap()
    };
    let (uniform, balanced) = (total("0"), total("0.9"));
    assert!(uniform > 0.0 && balanced > 0.0 && balanced < uniform, "{uniform} {balanced}");

    fs::rename(zero.join("AFLW_0000.hm"), zero.join("AFLW_x.hm")).unwrap();
    assert!(!unifl(&["loss", "--gt", p(&hm), "--pred", p(&zero)]).status.success());
}

#[test]
fn train_is_reproducible_and_eval_reads_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "# small run\niterations = 4\nimage_size = 32\nsynth_per_dataset = 3\nwidths = 4,8,8,8\nheads = 1,1,1,1\n").unwrap();
    let run = |name: &str, extra: &[&str], seed_env: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_unifl"));
        cmd.args(["train", "--config", p(&cfg), "--out", p(&out), "--every", "0"]).args(extra).env_remove("UNIFL_SEED");
        if let Some(s) = seed_env {
            cmd.env("UNIFL_SEED", s);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", &[], None);
    let b = run("b", &[], None);
    let ck = |d: &Path| fs::read(d.join("model.ckpt")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    let strip = |d: &Path| -> Vec<String> {
        let text = fs::read_to_string(d.join("log.csv")).unwrap();
        text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(strip(&a).len(), 5);

    let c = run("c", &[], Some("9"));
    assert_ne!(ck(&a), ck(&c));
    assert!(fs::read_to_string(c.join("config.txt")).unwrap().contains("seed = 9"));
    // an explicit flag wins over the variable
    let d = run("d", &["--seed", "0"], Some("9"));
    assert_eq!(ck(&a), ck(&d));

    let plain = run("plain", &["--no-fgsa", "--beta", "0"], None);
    let names: Vec<String> = read_checkpoint(&fs::read(plain.join("model.ckpt")).unwrap()[..]).unwrap().into_iter().map(|(n, _)| n).collect();
    assert!(!names.iter().any(|n| n.starts_with("fgsa")));
    assert!(fs::read_to_string(plain.join("config.txt")).unwrap().contains("beta = 0\n"));

    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "3", "--size", "64"]);
    let pred = dir.path().join("pred.txt");
    let out = ok(&[
        "eval", "--gt", p(&data.join("WFLW")), "--checkpoint", p(&a.join("model.ckpt")),
        "--config", p(&a.join("config.txt")), "--write-pred", p(&pred),
    ]);
    assert!(out.starts_with("image_id,nme\n") && out.contains("# mean_nme,"));
    assert_eq!(ok(&["eval", "--gt", p(&data.join("WFLW")), "--pred", p(&pred)]), out);
    // a checkpoint from a different architecture is rejected
    assert!(!unifl(&["eval", "--gt", p(&data.join("WFLW")), "--checkpoint", p(&plain.join("model.ckpt")), "--config", p(&a.join("config.txt"))])
        .status
        .success());
}

#[test]
fn eval_of_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "3", "--size", "64"]);
    let entries = load_annotations(&data.join("300W"), DatasetId::W300).unwrap();
    let text: String = entries
        .iter()
        .map(|e| {
            let id = Path::new(&e.path).file_stem().unwrap().to_str().unwrap();
            let c: Vec<String> = e.landmarks.coords.iter().map(|c| format!("{} {}", c[0], c[1])).collect();
            format!("{id} {}\n", c.join(" "))
        })
        .collect();
    let pred = dir.path().join("pred.txt");
    fs::write(&pred, text).unwrap();
    let out = ok(&["eval", "--gt", p(&data.join("300W")), "--pred", p(&pred), "--norm", "inter_pupil"]);
    assert!(out.contains("# mean_nme,0\n") && out.contains("# failure_rate@0.1,0\n"), "{out}");
    assert!(!unifl(&["eval", "--gt", p(&data.join("300W")), "--pred", p(&pred), "--norm", "bogus"]).status.success());
}

#[test]
fn gradcheck_command_passes() {
    let out = ok(&["gradcheck", "--count", "6", "--set", "image_size=32", "--set", "widths=4,8,8,8", "--set", "heads=1,1,1,1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "name,index,analytic,numeric,rel_error");
    assert_eq!(lines.len(), 7);
}
