use std::path::PathBuf;

use proptest::prelude::*;
use quick_xml::events::Event;
use quick_xml::Reader;
use seqimprove::analysis::{analyze, compute_r1_r2, emit_scatter, fit_and_r2, pearson, ScoreTable};
use seqimprove::model::Stage;

fn fixture() -> ScoreTable {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/code_summarization_table.csv");
    ScoreTable::load(&path).unwrap()
}

fn point(table: &ScoreTable, k: usize, model: &str, language: &str) -> (f64, f64) {
    let p = compute_r1_r2(table, k)
        .unwrap()
        .into_iter()
        .find(|p| p.model == model && p.language == language)
        .unwrap();
    (p.r1, p.r2)
}

#[test]
fn fixture_shape() {
    // 3 models × 7 rows (6 languages + Overall) × 3 beams × 2 stages
    assert_eq!(fixture().len(), 126);
}

#[test]
fn spot_gaps_from_table_cells() {
    let t = fixture();
    let (r1, r2) = point(&t, 1, "CodeT5", "Overall");
    assert!((r1 - 0.53).abs() < 1e-9 && (r2 - 0.61).abs() < 1e-9, "{r1} {r2}");
    let (r1, _) = point(&t, 1, "UniXCoder", "Ruby");
    assert!((r1 + 0.09).abs() < 1e-9, "{r1}");
}

#[test]
fn published_correlations() {
    let report = analyze(&fixture(), &[1, 5, 10]).unwrap();
    let (b1, b5, b10) = (report.beam(1).unwrap(), report.beam(5).unwrap(), report.beam(10).unwrap());
    assert_eq!(b1.points.len(), 18);
    assert!((0.75..=0.79).contains(&b1.pearson_r), "{}", b1.pearson_r);
    assert!(b5.pearson_r.abs() < 0.5 && b5.r_squared < 0.1);
    assert!(b10.pearson_r.abs() > b5.pearson_r.abs());
    for b in &report.beams {
        assert!((b.r_squared - b.pearson_r * b.pearson_r).abs() < 1e-9);
    }
    // points run by model, then language
    let labels: Vec<(&str, &str)> = b1.points.iter().map(|p| (p.model.as_str(), p.language.as_str())).collect();
    let mut sorted = labels.clone();
    sorted.sort();
    assert_eq!(labels, sorted);
    assert!(labels.iter().all(|(_, l)| *l != "Overall"));
}

#[test]
fn shifting_improved_scores_shifts_r2_only() {
    let t = fixture();
    let shifted = t.shifted(Stage::Improved, 1.25);
    for k in [1, 5, 10] {
        for (a, b) in compute_r1_r2(&t, k).unwrap().iter().zip(compute_r1_r2(&shifted, k).unwrap()) {
            assert_eq!(a.r1, b.r1);
            assert!((b.r2 - a.r2 - 1.25).abs() < 1e-9);
        }
    }
}

#[test]
fn identical_stages_give_zero_r2() {
    let text = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/code_summarization_table.csv"),
    )
    .unwrap();
    let ft: Vec<&str> = text.lines().filter(|l| l.contains(",fine_tuned,")).collect();
    let mirrored: String = std::iter::once("model,language,beam,stage,bleu".to_string())
        .chain(ft.iter().map(|l| l.to_string()))
        .chain(ft.iter().map(|l| l.replace(",fine_tuned,", ",improved,")))
        .collect::<Vec<_>>()
        .join("\n");
    let t = ScoreTable::parse_csv(&mirrored).unwrap();
    for k in [1, 5, 10] {
        assert!(compute_r1_r2(&t, k).unwrap().iter().all(|p| p.r2 == 0.0));
    }
}

fn assert_well_formed(svg: &str) -> usize {
    let mut reader = Reader::from_str(svg);
    let mut depth = 0i32;
    let mut circles = 0;
    loop {
        match reader.read_event().expect("well-formed XML") {
            Event::Start(e) => {
                depth += 1;
                if e.name().as_ref() == b"circle" {
                    circles += 1;
                }
            }
            Event::Empty(e) if e.name().as_ref() == b"circle" => circles += 1,
            Event::End(_) => depth -= 1,
            Event::Eof => break,
            _ => {}
        }
    }
    assert_eq!(depth, 0);
    circles
}

#[test]
fn scatter_files() {
    let report = analyze(&fixture(), &[1, 5]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for b in &report.beams {
        let svg = dir.path().join(format!("beam{}.svg", b.beam));
        emit_scatter(b, &svg).unwrap();
        let first = std::fs::read(&svg).unwrap();
        let csv = std::fs::read_to_string(svg.with_extension("csv")).unwrap();
        assert_eq!(assert_well_formed(std::str::from_utf8(&first).unwrap()), b.points.len());
        assert_eq!(csv.lines().count(), b.points.len() + 1);
        emit_scatter(b, &svg).unwrap();
        assert_eq!(std::fs::read(&svg).unwrap(), first);
    }
    let missing = dir.path().join("no/such/dir/plot.svg");
    assert!(matches!(
        emit_scatter(&report.beams[0], &missing),
        Err(seqimprove::Error::Io { .. })
    ));
}

proptest! {
    #[test]
    fn regression_identity(points in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30)) {
        if let (Ok(r), Ok(fit)) = (pearson(&points), fit_and_r2(&points)) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((fit.r_squared - r * r).abs() < 1e-9);
        }
    }
}
