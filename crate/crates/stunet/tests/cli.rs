use std::path::Path;
use std::process::{Command, Output};

use stunet::checkpoint::Checkpoint;
use stunet::{commands, io, RunConfig};

fn stunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stunet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out, "--seed", "5", "--set", "synth.rows=3", "--set", "synth.cols=4"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_writes_consistent_shapes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--set", "synth.steps=50", "--set", "synth.features=2"]);
    let graph = io::load_adjacency(&dir.path().join("adjacency.csv"), io::AdjacencyFormat::DenseCsv, None).unwrap();
    assert_eq!(graph.node_count(), 12);
    let steps = io::load_series(&dir.path().join("series.csv"), 12).unwrap();
    assert_eq!(steps.len(), 50);
    assert!(steps.iter().all(|s| s.shape() == [12, 2]));
}

#[test]
fn manifest_regenerates_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), &["--set", "synth.steps=40"]);
    let manifest = a.path().join("manifest.txt");
    ok(&["synth", "--config", manifest.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    for name in ["adjacency.csv", "series.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn partition_lists_every_node() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--set", "synth.steps=20"]);
    let adj = dir.path().join("adjacency.csv");
    let stdout = ok(&["partition", "--adj", adj.to_str().unwrap(), "--level", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(stdout.starts_with("level 0: 12 nodes\n"), "{stdout}");
    let text = std::fs::read_to_string(dir.path().join("partition.txt")).unwrap();
    let first: Vec<&str> = text.lines().filter(|l| l.starts_with("level 1:")).collect();
    assert_eq!(first.len(), 12);
    assert!(text.lines().any(|l| l.starts_with("level 2:")));
}

fn trained(dir: &Path, epochs: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text("synth.rows=3\nsynth.cols=3\nsynth.steps=120\norder=2\nhidden=4\ninput_len=4\nhorizon=2\nhorizons=1,2\n")
        .unwrap();
    c.set("epochs", epochs).unwrap();
    c.out = Some(dir.to_path_buf());
    let s = commands::synth_cmd(&c).unwrap();
    c.adj = Some(s.adjacency);
    c.series = Some(s.series);
    c.ckpt = Some(dir.join("model.ckpt"));
    commands::train_cmd(&c).unwrap();
    c
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let c = trained(dir.path(), "0");
    let ck = Checkpoint::load(c.ckpt.as_ref().unwrap()).unwrap();
    let graph = commands::load_graph(&c).unwrap();
    let fresh = stunet_core::Stunet::build(c.effective_model(), &graph).unwrap();
    assert_eq!(ck.restore(Path::new("x"), &graph).unwrap().params(), fresh.params());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1, "header only:\n{log}");
}

#[test]
fn predict_matches_batched_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let c = trained(dir.path(), "1");
    let raw = io::load_series(c.series.as_ref().unwrap(), 9).unwrap();
    let ck = Checkpoint::load(c.ckpt.as_ref().unwrap()).unwrap();
    let model = ck.restore(Path::new("x"), &commands::load_graph(&c).unwrap()).unwrap();
    let scaled: Vec<_> = raw.iter().map(|x| ck.normalizer.apply(x).unwrap()).collect();
    let windows: Vec<&[_]> = (0..3).map(|b| &scaled[100 + b..104 + b]).collect();
    let batched = model.predict_batch(&windows).unwrap();

    let window = dir.path().join("window.csv");
    io::write_series(&window, &raw[101..105]).unwrap();
    let (_, forecast) = commands::predict_cmd(&c, &window).unwrap();
    let expected: Vec<_> = batched[1].iter().map(|p| ck.normalizer.invert(p).unwrap()).collect();
    assert_eq!(forecast, expected);
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    for args in [
        vec!["partition", "--adj", missing.to_str().unwrap()],
        vec!["train", "--set", "epochs=x"],
        vec!["synth", "--set", "bogus=1"],
        vec!["eval"],
    ] {
        let out = stunet(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}
