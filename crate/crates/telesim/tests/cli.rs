use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use telesim::config::{load_scene, RunFile, SCENE_DIR_ENV};
use telesim_core::world::Scene;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn telesim(args: &[&str], scene_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_telesim"));
    cmd.args(args).env_remove(SCENE_DIR_ENV);
    if let Some(d) = scene_dir {
        cmd.env(SCENE_DIR_ENV, d);
    }
    cmd.output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn shipped_configs_and_scene_load() {
    let scenes = repo().join("scenes");
    assert_eq!(load_scene(&scenes.join("standard.toml")).unwrap(), Scene::standard());
    for entry in fs::read_dir(repo().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let src = fs::read_to_string(&path).unwrap();
        let rc = RunFile::parse(&src, &path).unwrap().resolve(&path, path.parent().unwrap(), Some(&scenes));
        assert!(rc.is_ok(), "{}: {}", path.display(), rc.unwrap_err());
    }
}

#[test]
fn scene_comes_from_the_config_dir_before_the_scene_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_dir, scene_dir) = (tmp.path().join("cfg"), tmp.path().join("scenes"));
    fs::create_dir_all(&cfg_dir).unwrap();
    fs::create_dir_all(&scene_dir).unwrap();
    let standard = fs::read_to_string(repo().join("scenes/standard.toml")).unwrap();
    fs::write(scene_dir.join("s.toml"), &standard).unwrap();
    let path = cfg_dir.join("run.toml");
    let src = "seed = 4\nscene = \"s.toml\"\n[condition]\nkind = \"control\"\n[operator]\nmode = \"scripted\"\n";

    let missing = RunFile::parse(src, &path).unwrap().resolve(&path, &cfg_dir, None).unwrap_err().to_string();
    assert!(missing.contains("s.toml"), "{missing}");
    let rc = RunFile::parse(src, &path).unwrap().resolve(&path, &cfg_dir, Some(&scene_dir)).unwrap();
    assert_eq!(rc.trial.scene, Scene::standard());
    assert_eq!(rc.output, cfg_dir.join("logs/control-0-s4"));

    // A local copy wins: break the scene-dir copy and the config still loads.
    fs::write(cfg_dir.join("s.toml"), &standard).unwrap();
    fs::write(scene_dir.join("s.toml"), "not toml [").unwrap();
    assert!(RunFile::parse(src, &path).unwrap().resolve(&path, &cfg_dir, Some(&scene_dir)).is_ok());
}

#[test]
fn bad_configs_are_refused() {
    let path = Path::new("bad.toml");
    let cases = [
        "seed = 1\n[condition]\nkind = \"asynchronous\"\nvisual_delay_ms = 250\n[operator]\nmode = \"scripted\"\n",
        "seed = 1\n[condition]\nkind = \"anchoring\"\nvisual_delay_ms = 600\n[operator]\nmode = \"scripted\"\n",
        "seed = 1\ncolour = 3\n[condition]\nkind = \"control\"\n[operator]\nmode = \"scripted\"\n",
        "seed = 1\n[condition]\nkind = \"control\"\n[operator]\nmode = \"telepathic\"\n",
        "seed = 9223372036854775808\n[condition]\nkind = \"control\"\n[operator]\nmode = \"scripted\"\n",
    ];
    for src in cases {
        let r = RunFile::parse(src, path).and_then(|f| f.resolve(path, Path::new("."), None));
        assert!(r.is_err(), "{src}");
    }
}

#[test]
fn headless_run_replay_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let config = repo().join("configs/anchoring-750.toml");
    let log = tmp.path().join("logs/a750");
    let scenes = repo().join("scenes");

    let o = telesim(&["run", "--config", config.to_str().unwrap(), "--headless", "--out", log.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("standard.toml"), "{}", text(&o));

    let o = telesim(&["run", "--config", config.to_str().unwrap(), "--headless", "--out", log.to_str().unwrap()], Some(&scenes));
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("anchoring"), "{}", text(&o));
    for f in ["meta.toml", "ticks.csv", "channel.csv", "inputs.csv", "visual.csv", "events.csv", "pupil.csv", "post.csv"] {
        assert!(log.join(f).is_file(), "{f}");
    }

    let o = telesim(&["replay", log.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("identical"));

    let ticks = log.join("ticks.csv");
    let t = fs::read_to_string(&ticks).unwrap();
    let i = t.find("\n1000,").unwrap() + 6;
    let j = i + t[i..].find(',').unwrap();
    fs::write(&ticks, format!("{}0.5{}", &t[..i], &t[j..])).unwrap();
    let o = telesim(&["replay", log.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("ticks row 1000"), "{}", text(&o));
    fs::write(&ticks, t).unwrap();

    let report = tmp.path().join("report");
    let o = telesim(&["analyze", tmp.path().join("logs").to_str().unwrap(), "--report", report.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["metrics.csv", "metrics.json", "comparisons.txt", "comparisons.json"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn live_config_needs_a_console() {
    let o = telesim(&["run", "--config", repo().join("configs/live.toml").to_str().unwrap(), "--headless"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("--serve"), "{}", text(&o));
    let o = telesim(&["run", "--config", "x.toml", "--headless", "--serve", "1"], None);
    assert_eq!(o.status.code(), Some(2), "clap usage errors exit with 2");
}
