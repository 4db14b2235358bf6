use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gfss_core::checkpoint::load_model;
use gfss_core::pipeline::{init_state, Scalar};
use gfss_core::synthgen::World;
use gfss_core::training::freeze;

const SMALL: &[&str] = &[
    "--set",
    "world.height=16",
    "--set",
    "world.width=16",
    "--set",
    "data.eval_images=4",
    "--set",
    "train.steps=15",
    "--set",
    "train.batch=2",
    "--set",
    "train.lr=0.01",
];

fn gfss(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfss"))
        .arg(cmd)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn ok(cmd: &str, out: &Path, extra: &[&str]) -> String {
    let o = gfss(cmd, out, extra);
    assert!(o.status.success(), "{} failed: {}", cmd, String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(cmd: &str, out: &Path, extra: &[&str]) -> i32 {
    gfss(cmd, out, extra).status.code().expect("exit code")
}

fn set(key: &str, path: &Path) -> String {
    format!("{}={}", key, path.display())
}

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Self { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// synth, train, register into `data`, `model`, `reg`.
    fn upstream(&self) {
        ok("synth", &self.p("data"), &[]);
        ok("train", &self.p("model"), &["--set", &set("paths.data", &self.p("data"))]);
        ok(
            "register",
            &self.p("reg"),
            &["--set", &set("paths.data", &self.p("data")), "--set", &set("paths.model", &self.p("model"))],
        );
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_outputs_are_consistent() {
    let r = Run::new();
    r.upstream();
    let data = set("paths.data", &r.p("data"));
    let model = set("paths.model", &r.p("model"));
    let reg = set("paths.registry", &r.p("reg"));
    let feats = set("paths.features", &r.p("data/eval/features.gfst"));
    ok("infer", &r.p("pred"), &["--set", &model, "--set", &reg, "--set", &feats, "--set", "output.pgm=true"]);
    assert!(r.p("pred/pred_0003.pgm").exists());
    assert!(fs::read(r.p("pred/pred_0000.pgm")).unwrap().starts_with(b"P5\n16 16\n255\n"));

    let direct = ok("eval", &r.p("ev1"), &["--set", &data, "--set", &model, "--set", &reg]);
    let preds = set("paths.predictions", &r.p("pred/predictions.gfst"));
    let scored = ok("eval", &r.p("ev2"), &["--set", &data, "--set", &model, "--set", &reg, "--set", &preds]);
    assert_eq!(direct, scored);
    assert_eq!(fs::read(r.p("ev1/report.csv")).unwrap(), fs::read(r.p("ev2/report.csv")).unwrap());
    assert!(direct.starts_with("miou_base = "));

    let truth = set("paths.predictions", &r.p("data/eval/labels.gfst"));
    let perfect = ok("eval", &r.p("ev3"), &["--set", &data, "--set", &truth]);
    for key in ["miou_base", "miou_novel", "miou_overall", "hiou"] {
        assert!(perfect.contains(&format!("{} = 1.000000\n", key)), "{}", perfect);
    }

    let losses = fs::read_to_string(r.p("model/losses.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 15);
    assert!(losses.lines().next().unwrap().starts_with("{\"step\":0,\"ce\":"));
    let echoed = fs::read_to_string(r.p("model/config.toml")).unwrap();
    assert!(echoed.contains("steps = 15"), "{}", echoed);
}

#[test]
fn single_session_stream_matches_one_shot_run() {
    let r = Run::new();
    r.upstream();
    let data = set("paths.data", &r.p("data"));
    let model = set("paths.model", &r.p("model"));
    let reg = set("paths.registry", &r.p("reg"));
    let stream = ["--set", "cifss.sessions=1", "--set", "cifss.classes_per_session=2"];
    let mut args = vec!["--set", &data, "--set", &model];
    args.extend(stream);
    let csv = ok("cifss", &r.p("cifss"), &args);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "session,new_classes,miou_base,miou_novel,miou_overall,hiou,pixels,images,base_rows_intact");
    assert_eq!(lines.len(), 3);
    ok("eval", &r.p("ev"), &["--set", &data, "--set", &model, "--set", &reg]);
    let row = fs::read_to_string(r.p("ev/report.csv")).unwrap();
    assert_eq!(lines[2], format!("1,6 7,{},true", row.lines().nth(1).unwrap()));

    let ab = ok("ablate", &r.p("ab"), &["--set", &data, "--set", &model]);
    let tags: Vec<&str> = ab.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tags, ["full", "no-pkl", "no-fcp", "no-cbbi", "fixed-alr", "no-cbbi-no-pkl"]);
    let full = ab.lines().nth(1).unwrap();
    assert_eq!(&full["full,".len()..], row.lines().nth(1).unwrap());
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (Run::new(), Run::new());
    a.upstream();
    b.upstream();
    for d in ["data", "model", "reg"] {
        let (fa, fb) = (files(&a.p(d)), files(&b.p(d)));
        assert!(!fa.is_empty());
        // config.toml echoes absolute input paths, which differ per run
        let strip = |v: Vec<(PathBuf, Vec<u8>)>| v.into_iter().filter(|(p, _)| p != Path::new("config.toml")).collect::<Vec<_>>();
        assert_eq!(strip(fa), strip(fb), "{}", d);
    }
}

#[test]
fn zero_steps_checkpoints_the_initialisation() {
    let r = Run::new();
    ok("synth", &r.p("data"), &[]);
    ok("train", &r.p("model"), &["--set", &set("paths.data", &r.p("data")), "--set", "train.steps=0"]);
    let (model, steps) = load_model::<Scalar>(&r.p("model")).unwrap();
    assert_eq!(steps, 0);
    let world = World::load(&r.p("data")).unwrap();
    let mut cfg = gfss_core::training::TrainConfig::default();
    cfg.steps = 0;
    let mut state = init_state(&world, &cfg).unwrap();
    assert_eq!(model, freeze(&mut state, cfg.pkl));
}

#[test]
fn exit_codes() {
    let r = Run::new();
    r.upstream();
    let data = set("paths.data", &r.p("data"));
    let model = set("paths.model", &r.p("model"));
    let reg = set("paths.registry", &r.p("reg"));

    assert_eq!(code("synth", &r.p("e1"), &["--set", "world.min_pairwise_angle=89", "--set", "world.n_novel=30"]), 2);
    assert_eq!(code("synth", &r.p("e2"), &["--set", "world.bogus=1"]), 2);
    assert_eq!(code("train", &r.p("e3"), &[]), 2);
    assert_eq!(code("train", &r.p("e4"), &["--set", &set("paths.data", &r.p("nowhere"))]), 2);
    assert_eq!(code("synth", &r.p("data"), &[]), 2);
    assert_eq!(code("cifss", &r.p("e5"), &["--set", &data, "--set", &model]), 2);
    assert_eq!(code("train", &r.p("e6"), &["--set", &data, "--set", "train.lr=1e30"]), 3);
    assert!(fs::read_to_string(r.p("e6/losses.jsonl")).is_ok());
    let again = ["--set", &data, "--set", &model, "--set", &reg];
    assert_eq!(code("register", &r.p("e7"), &again), 4);
    let mut one = again.to_vec();
    one.extend(["--set", "register.classes=[7]"]);
    assert_eq!(code("register", &r.p("e8"), &one), 4);
    let o = Command::new(env!("CARGO_BIN_EXE_gfss")).args(["frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sessions_extend_a_registry() {
    let r = Run::new();
    ok("synth", &r.p("data"), &["--set", "world.n_novel=3"]);
    let data = set("paths.data", &r.p("data"));
    ok("train", &r.p("model"), &["--set", &data]);
    let model = set("paths.model", &r.p("model"));
    ok("register", &r.p("s1"), &["--set", &data, "--set", &model, "--set", "register.classes=[6]"]);
    let s1 = set("paths.registry", &r.p("s1"));
    let out = ok("register", &r.p("s2"), &["--set", &data, "--set", &model, "--set", &s1, "--set", "register.classes=[8, 7]"]);
    assert!(out.starts_with("session 2: registered classes [8, 7]"), "{}", out);
    let manifest = fs::read_to_string(r.p("s2/registry.json")).unwrap();
    assert!(manifest.contains("\"id\": 2"));
    let seed_flag = Command::new(env!("CARGO_BIN_EXE_gfss"))
        .args(["synth", "--seed", "3", "--out"])
        .arg(r.p("seeded"))
        .output()
        .unwrap();
    assert!(seed_flag.status.success());
    assert!(fs::read_to_string(r.p("seeded/world.json")).unwrap().contains("\"seed\": 3"));
}
