use proptest::prelude::*;

use qrc::eval::{accuracy_at_iou, bpg, ubp};
use qrc::geometry::{AnchorConfig, BBox};
use qrc::synthdata::{
    featurize, generate_corpus, generate_scene, read_corpus, write_corpus, Color, CorpusConfig,
    GroundingExample, Scene, SceneConfig, SceneObject, Shape, SizeClass, ATTR_CHANNELS,
    FEATURE_DIM,
};
use qrc::tensor::{Rng, Stream};
use qrc::Error;

fn corpus(seed: u64, n: usize) -> Vec<GroundingExample> {
    let config = CorpusConfig {
        min_anchor_coverage: 0.0,
        ..CorpusConfig::default()
    };
    generate_corpus(seed, n, &config, &AnchorConfig::default()).unwrap()
}

#[test]
fn corpus_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let examples = corpus(4, 100);
    write_corpus(&examples, &path).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), examples);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 100);
}

#[test]
fn empty_corpus_is_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    write_corpus(&[], &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
    assert!(read_corpus(&path).unwrap().is_empty());
}

#[test]
fn corrupted_line_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    write_corpus(&corpus(5, 5), &path).unwrap();
    let mut lines: Vec<String> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let half = lines[2].len() / 2;
    lines[2].truncate(half);
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_corpus(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(
        read_corpus(&dir.path().join("missing.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn corpus_is_a_function_of_seed() {
    assert_eq!(corpus(9, 20), corpus(9, 20));
    assert_ne!(corpus(9, 20), corpus(10, 20));
    // Example i does not depend on how many follow it.
    assert_eq!(corpus(9, 20)[..5], corpus(9, 5)[..]);
}

#[test]
fn object_counts_cover_two_to_five() {
    let mut rng = Rng::stream(7, Stream::Data);
    let mut hist = [0usize; 6];
    let n = 10_000;
    for id in 0..n {
        let s = generate_scene(&mut rng, &SceneConfig::default(), id).unwrap();
        hist[s.objects.len()] += 1;
    }
    for (k, &count) in hist.iter().enumerate().skip(2) {
        assert!(
            count as f64 >= 0.1 * n as f64,
            "{k} objects in {count} scenes"
        );
    }
    assert_eq!(hist[0] + hist[1], 0);
}

#[test]
fn featurized_cells() {
    let scene = Scene {
        id: 99,
        dims: [128, 128],
        objects: vec![SceneObject {
            bbox: BBox::new(16.0, 16.0, 48.0, 48.0).unwrap(),
            color: Color::parse("red").unwrap(),
            shape: Shape::parse("square").unwrap(),
            size: SizeClass::parse("medium").unwrap(),
        }],
    };
    let grid = featurize(&scene);
    assert_eq!(grid, featurize(&scene));
    // A cell inside the square carries its red channel; noise has std 0.1.
    let inside = grid.cell(3, 3);
    assert!((inside[Color::parse("red").unwrap().index()] - 1.0).abs() < 0.5);
    let mut attr = Vec::new();
    for r in 8..16 {
        for c in 0..16 {
            attr.extend_from_slice(&grid.cell(r, c)[..ATTR_CHANNELS]);
        }
    }
    let mean = attr.iter().sum::<f64>() / attr.len() as f64;
    assert!(attr.len() >= 1000 && mean.abs() < 0.05, "mean {mean}");
    assert_eq!(grid.cell(0, 0).len(), FEATURE_DIM);
}

fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 1.0..40.0f64, 1.0..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_images() -> impl Strategy<Value = Vec<(Vec<BBox>, Vec<BBox>)>> {
    prop::collection::vec(
        (
            prop::collection::vec(arb_box(), 0..12),
            prop::collection::vec(arb_box(), 1..5),
        ),
        1..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn coverage_metrics_match_double_loop(images in arb_images()) {
        let props: Vec<Vec<BBox>> = images.iter().map(|(p, _)| p.clone()).collect();
        let gts: Vec<Vec<BBox>> = images.iter().map(|(_, g)| g.clone()).collect();
        let (mut covered, mut total, mut count) = (0usize, 0usize, 0usize);
        for (ps, gs) in props.iter().zip(&gts) {
            for g in gs {
                let mut k = 0;
                for p in ps {
                    if naive_iou(p, g) > 0.5 {
                        k += 1;
                    }
                }
                covered += (k > 0) as usize;
                count += k;
                total += 1;
            }
        }
        prop_assert_eq!(ubp(&props, &gts).unwrap(), covered as f64 / total as f64);
        prop_assert_eq!(bpg(&props, &gts).unwrap(), count as f64 / total as f64);
    }

    #[test]
    fn accuracy_matches_counting(pairs in prop::collection::vec((arb_box(), arb_box()), 1..30)) {
        let preds: Vec<BBox> = pairs.iter().map(|p| p.0).collect();
        let gts: Vec<BBox> = pairs.iter().map(|p| p.1).collect();
        let mut hits = 0usize;
        for (p, g) in preds.iter().zip(&gts) {
            if naive_iou(p, g) > 0.5 {
                hits += 1;
            }
        }
        prop_assert_eq!(
            accuracy_at_iou(&preds, &gts, 0.5).unwrap(),
            hits as f64 / gts.len() as f64
        );
    }
}

#[test]
fn metric_boundaries_and_errors() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    // IoU exactly 0.5 counts as a miss.
    let half = BBox::new(0.0, 0.0, 2.0, 1.0).unwrap();
    assert_eq!(accuracy_at_iou(&[half], &[a], 0.5).unwrap(), 0.0);
    assert!(matches!(
        accuracy_at_iou(&[a], &[a, a], 0.5),
        Err(Error::LengthMismatch(_))
    ));
    assert!(matches!(
        ubp(&[vec![a]], &[vec![]]),
        Err(Error::UndefinedMetric(_))
    ));
    let far = BBox::new(50.0, 50.0, 60.0, 60.0).unwrap();
    assert_eq!(bpg(&[vec![far]], &[vec![a]]).unwrap(), 0.0);
    let b = a.translate(10.0, 0.0);
    let props = vec![a, a.translate(0.1, 0.0), a.translate(0.0, 0.1), b];
    assert_eq!(bpg(&[props], &[vec![a, b]]).unwrap(), 2.0);
}
