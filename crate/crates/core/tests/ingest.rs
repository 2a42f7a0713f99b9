mod common;

use std::io::Cursor;

use seqwatch::cli::detect_frames;
use seqwatch::continual::UpdatePolicy;
use seqwatch::detector::DetectorConfig;
use seqwatch::features::FeatureWeights;
use seqwatch::ingest::{
    load_ground_truth, parse_str, read_alarms, read_trace, spawn_reader, write_alarms, write_ground_truth,
    write_stream, write_trace, IngestConfig, IngestError, ParseMode,
};
use seqwatch::simgen::{generate, ScenarioConfig};

use common::*;

fn stream_text(frames: &[seqwatch::features::FrameFeatures]) -> String {
    let mut buf = Vec::new();
    write_stream(&mut buf, frames, &FeatureWeights::default(), Some(CLASSES)).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn thousand_frames_round_trip_bit_exactly() {
    let scenario = anomalous_stream(1000, 21, 400, 449, 3.0);
    let text = stream_text(&scenario.frames);
    assert_eq!(text.lines().count(), 1001);
    let parsed = parse_str(&text, IngestConfig::default()).unwrap();
    assert!(parsed.skipped.is_empty());
    assert_eq!(parsed.n_classes, Some(CLASSES));
    assert_eq!(parsed.frames.len(), 1000);
    for (a, b) in parsed.frames.iter().zip(&scenario.frames) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.flow, b.flow);
        assert_eq!(a.objects.len(), b.objects.len());
        for (x, y) in a.objects.iter().zip(&b.objects) {
            let bits = |v: &seqwatch::features::FeatureVector| v.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
    // writing the parsed frames reproduces the text
    assert_eq!(stream_text(&parsed.frames), text);

    let (rx, handle) = spawn_reader(Cursor::new(text.clone().into_bytes()), IngestConfig::default(), 8);
    let threaded: Vec<_> = rx.into_iter().map(Result::unwrap).collect();
    let summary = handle.join().unwrap();
    assert_eq!(summary.frames, 1000);
    assert_eq!(threaded, parsed.frames);
}

#[test]
fn strict_and_lenient_modes() {
    let scenario = anomalous_stream(40, 22, 10, 14, 3.0);
    let mut lines: Vec<String> = stream_text(&scenario.frames).lines().map(str::to_owned).collect();
    lines[6] = "{\"t\": 5, \"flow\": [1, 2]}".into();
    lines[12] = "not json".into();
    let text = lines.join("\n");

    let err = parse_str(&text, IngestConfig::default()).err().unwrap();
    assert_eq!(err.line(), Some(7));

    let lenient = parse_str(&text, IngestConfig { mode: ParseMode::Lenient, ..Default::default() }).unwrap();
    assert_eq!(lenient.frames.len(), 38);
    assert_eq!(lenient.skipped.iter().map(|e| e.line().unwrap()).collect::<Vec<_>>(), vec![7, 13]);

    // going backwards in time is always reported
    let mut back: Vec<String> = stream_text(&scenario.frames).lines().map(str::to_owned).collect();
    back.swap(3, 4);
    let err = parse_str(&back.join("\n"), IngestConfig::default()).err().unwrap();
    assert!(matches!(err, IngestError::NonMonotone { line: 5, .. }), "{err}");

    let mixed = "{\"format\":\"seqwatch-frames\",\"version\":1}\n\
        {\"t\":0,\"flow\":{\"mean\":1,\"var\":0,\"skew\":0,\"kurt\":0},\"objects\":[{\"loc\":[1,1,1],\"probs\":[0.5,0.5]}]}\n\
        {\"t\":1,\"flow\":{\"mean\":1,\"var\":0,\"skew\":0,\"kurt\":0},\"objects\":[{\"loc\":[1,1,1],\"probs\":[0.5]}]}\n";
    let err = parse_str(mixed, IngestConfig::default()).err().unwrap();
    assert!(matches!(err, IngestError::InconsistentClasses { line: 3, expected: 2, got: 1 }), "{err}");

    let wrong_header = "{\"format\":\"other\",\"version\":1}\n";
    assert!(matches!(parse_str(wrong_header, IngestConfig::default()), Err(IngestError::Header { .. })));
}

#[test]
fn bounding_boxes_become_locations() {
    let text = "{\"t\":3,\"flow\":{\"mean\":1,\"var\":0.5,\"skew\":0,\"kurt\":3},\
        \"objects\":[{\"bbox\":[1,2,3,6],\"probs\":[0.25]}]}\n";
    let w = FeatureWeights::new(1.0, 2.0, 4.0).unwrap();
    let parsed = parse_str(text, IngestConfig { weights: w, ..Default::default() }).unwrap();
    let v = &parsed.frames[0].objects[0];
    assert_eq!(v.as_slice(), &[1.0, 0.5, 0.0, 3.0, 4.0, 8.0, 16.0, 1.0]);
}

#[test]
fn trace_alarm_and_truth_files_round_trip() {
    let model = desk_model(800, 23);
    let scenario = anomalous_stream(500, 24, 200, 239, 4.0);
    let policy = UpdatePolicy::default();
    let held = generate(&ScenarioConfig::desk(CLASSES, 800, 25)).unwrap();
    let h = calibrated_h(&model, &held.frames, &policy);
    let out = detect_frames(model, &scenario.frames, &DetectorConfig { h, ..Default::default() }, &policy, "cam").unwrap();
    assert!(!out.alarms.is_empty());

    let mut buf = Vec::new();
    write_trace(&mut buf, "cam", &out.trace).unwrap();
    let back = read_trace(buf.as_slice()).unwrap();
    assert_eq!(back, out.trace);

    let mut buf = Vec::new();
    write_alarms(&mut buf, "cam", &out.alarms).unwrap();
    assert_eq!(read_alarms(buf.as_slice()).unwrap(), out.alarms);
    // a trace file is not an alarm file
    let mut tbuf = Vec::new();
    write_trace(&mut tbuf, "cam", &out.trace).unwrap();
    assert!(read_alarms(tbuf.as_slice()).is_err());

    let mut buf = Vec::new();
    write_ground_truth(&mut buf, &scenario.ground_truth).unwrap();
    assert_eq!(load_ground_truth(buf.as_slice()).unwrap(), scenario.ground_truth);
    assert_eq!(load_ground_truth("[[3, 9], [20, 20]]".as_bytes()).unwrap().intervals, vec![(3, 9), (20, 20)]);
    let obj = "{\"stream_id\": \"x\", \"intervals\": [[1, 2]]}";
    let gt = load_ground_truth(obj.as_bytes()).unwrap();
    assert_eq!((gt.stream_id.as_str(), gt.intervals), ("x", vec![(1, 2)]));
    assert!(load_ground_truth("[[5, 1]]".as_bytes()).is_err());
    assert!(load_ground_truth("[[1, 5], [4, 8]]".as_bytes()).is_err());
}
