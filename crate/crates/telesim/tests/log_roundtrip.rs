use std::fs;
use std::path::Path;

use telesim::config::PupilSection;
use telesim::logio::{check_log, read_log, write_log, LogError};
use telesim::pupil::attach_pupil;
use telesim::replay::{differing_files, replay, replay_dir, ReplayMode};
use telesim_core::delay::{make_condition, ConditionKind};
use telesim_core::operator::{OperatorPolicy, PolicyKind};
use telesim_core::session::{
    run_scripted, run_session, EndReason, Headless, OperatorSpec, PlaybackInput, Questionnaire, TrialConfig, TrialLog,
};

fn trial(kind: ConditionKind, visual: u64, policy: PolicyKind, seed: u64) -> TrialConfig {
    TrialConfig::scripted(make_condition(kind, visual).unwrap(), OperatorPolicy::new(policy, seed), seed)
}

fn full_log(cfg: &TrialConfig) -> TrialLog {
    let mut log = run_scripted(cfg).unwrap();
    log.post = Questionnaire {
        perceived_visual_ms: Some(412.5),
        perceived_haptic_ms: None,
        perceived_gap_ms: Some(0.1 + 0.2),
        tlx_total: Some(61.0),
        tlx_confidence: None,
        tlx_frustration: Some(1e-7),
    };
    attach_pupil(&mut log, &PupilSection::default());
    log
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn write_read_write_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cells = [
        (ConditionKind::Control, 0, PolicyKind::ContinuousPursuit),
        (ConditionKind::Anchoring, 1000, PolicyKind::WaitForConfirmation),
        (ConditionKind::Synchronous, 250, PolicyKind::MoveAndWait),
        (ConditionKind::Asynchronous, 750, PolicyKind::WaitForConfirmation),
    ];
    for (i, (kind, v, policy)) in cells.into_iter().enumerate() {
        let log = full_log(&trial(kind, v, policy, i as u64 + 3));
        check_log(&log).unwrap();
        let (a, b) = (tmp.path().join(format!("a{i}")), tmp.path().join(format!("b{i}")));
        write_log(&a, &log).unwrap();
        let back = read_log(&a).unwrap();
        assert_eq!(back, log, "{kind:?}");
        write_log(&b, &back).unwrap();
        assert!(differing_files(&a, &b).unwrap().is_empty());
    }
}

#[test]
fn sixty_second_log_has_one_row_per_tick_and_frame() {
    let mut cfg = trial(ConditionKind::Synchronous, 500, PolicyKind::WaitForConfirmation, 1);
    cfg.duration_cap_s = 60.0;
    cfg.stop_on_completion = false;
    let log = full_log(&cfg);
    assert_eq!(log.header.end_reason, EndReason::DurationCap);
    let tmp = tempfile::tempdir().unwrap();
    write_log(tmp.path(), &log).unwrap();
    assert_eq!(line_count(&tmp.path().join("ticks.csv")), 60_000 + 1);
    assert_eq!(line_count(&tmp.path().join("inputs.csv")), 60 * 90 + 1);
    assert_eq!(line_count(&tmp.path().join("pupil.csv")), log.pupil.len() + 1);
    assert!(log.pupil.len() >= 60 * 90);
    assert_eq!(line_count(&tmp.path().join("post.csv")), 2);
}

#[test]
fn damaged_files_are_reported_with_their_line() {
    let tmp = tempfile::tempdir().unwrap();
    let log = full_log(&trial(ConditionKind::Anchoring, 500, PolicyKind::ContinuousPursuit, 2));
    write_log(tmp.path(), &log).unwrap();

    let ticks = tmp.path().join("ticks.csv");
    let text = fs::read_to_string(&ticks).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[41] = lines[41].replacen(',', ",not-a-number,", 1);
    fs::write(&ticks, lines.join("\n") + "\n").unwrap();
    let err = read_log(tmp.path()).unwrap_err();
    assert!(matches!(err, LogError::Parse { line: 42, .. }), "{err}");
    assert!(err.to_string().contains("ticks.csv:42"), "{err}");

    fs::write(&ticks, text).unwrap();
    let channel = tmp.path().join("channel.csv");
    let text = fs::read_to_string(&channel).unwrap();
    let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 5).map(|(_, l)| l).collect();
    fs::write(&channel, kept.join("\n") + "\n").unwrap();
    assert!(matches!(read_log(tmp.path()), Err(LogError::Invariant { .. })));

    fs::remove_file(&channel).unwrap();
    assert!(matches!(read_log(tmp.path()), Err(LogError::Io { .. })));
}

#[test]
fn scripted_logs_replay_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, cfg) in [
        trial(ConditionKind::Asynchronous, 1000, PolicyKind::WaitForConfirmation, 11),
        trial(ConditionKind::Control, 0, PolicyKind::MoveAndWait, 12),
    ]
    .iter()
    .enumerate()
    {
        let dir = tmp.path().join(format!("log{i}"));
        write_log(&dir, &full_log(cfg)).unwrap();
        let (r, files) = replay_dir(&dir, &tmp.path().join(format!("re{i}"))).unwrap();
        assert_eq!(r.mode, ReplayMode::Rerun);
        assert!(r.is_identical(), "{}", r.diffs[0]);
        assert!(files.is_empty(), "{files:?}");
    }
}

#[test]
fn live_logs_replay_from_recorded_inputs() {
    let scripted = run_scripted(&trial(ConditionKind::Synchronous, 750, PolicyKind::MoveAndWait, 4)).unwrap();
    let mut live = scripted.header.config.clone();
    live.operator = OperatorSpec::Live { speed_limit: 0.25 };
    let mut input = PlaybackInput::new(scripted.inputs.iter().map(|r| r.input).collect());
    let mut log = run_session(&live, &mut input, &mut Headless).unwrap();
    attach_pupil(&mut log, &PupilSection::default());

    let tmp = tempfile::tempdir().unwrap();
    write_log(&tmp.path().join("live"), &log).unwrap();
    let (r, files) = replay_dir(&tmp.path().join("live"), &tmp.path().join("re")).unwrap();
    assert_eq!(r.mode, ReplayMode::Playback);
    assert!(r.is_identical(), "{}", r.diffs[0]);
    assert!(files.is_empty(), "{files:?}");

    let mut tampered = log.clone();
    tampered.inputs[30].input.translation.x += 1e-3;
    assert!(!replay(&tampered).unwrap().is_identical());
}
