use gfss_web::{class_color, Demo};

const ARGS: (f64, bool, bool, bool, bool) = (0.1, true, true, true, true);

fn segment(d: &mut Demo) -> Vec<u8> {
    let (b, p, f, c, n) = ARGS;
    d.segment(b, p, f, c, n).unwrap()
}

#[test]
fn maps_have_image_size() {
    let mut d = Demo::new(0, 0.3, false).unwrap();
    let n = d.width() * d.height() * 4;
    assert_eq!(d.truth_rgba().len(), n);
    assert_eq!(segment(&mut d).len(), n);
    assert_eq!(d.fg_rgba().len(), n);
    d.select(1000);
    assert_eq!(d.truth_rgba().len(), n);
    assert!(d.fg_rgba().is_empty());
    assert_eq!(class_color(0).len(), 3);
}

#[test]
fn training_improves_the_dataset_report() {
    let (b, p, f, c, n) = ARGS;
    let mut d = Demo::new(1, 0.3, true).unwrap();
    let before = d.dataset_report(b, p, f, c, n).unwrap();
    let loss = d.train(40).unwrap();
    assert!(loss.is_finite());
    assert_eq!(d.steps_trained(), 40);
    let after = d.dataset_report(b, p, f, c, n).unwrap();
    let overall = |r: &str| -> f64 {
        r.lines().find_map(|l| l.strip_prefix("miou_overall = ")).unwrap().parse().unwrap()
    };
    assert!(overall(&after) > overall(&before), "{} vs {}", before, after);
    assert!(d.image_report(b, p, f, c, n).unwrap().starts_with("miou_base = "));
}

#[test]
fn same_seed_same_pixels() {
    let mut a = Demo::new(4, 0.2, false).unwrap();
    let mut b = Demo::new(4, 0.2, false).unwrap();
    a.train(5).unwrap();
    b.train(5).unwrap();
    assert_eq!(segment(&mut a), segment(&mut b));
    assert!(Demo::new(0, -1.0, false).is_err());
}
