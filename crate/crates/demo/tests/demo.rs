use unicontrol_demo::{render, task_keys, task_weights};

#[test]
fn render_returns_opaque_rgba_buffers() {
    let r = render(3, 16, "seg").unwrap();
    assert_eq!(r.image().len(), 4 * 16 * 16);
    assert_eq!(r.condition().len(), 4 * 16 * 16);
    assert!(r.image().chunks(4).all(|p| p[3] == 255));
    assert!(!r.prompt().is_empty());
    let again = render(3, 16, "seg").unwrap();
    assert_eq!(r.image(), again.image());
    assert_eq!(r.condition(), again.condition());
}

#[test]
fn render_rejects_bad_inputs() {
    assert!(render(0, 4, "seg").is_err());
    assert!(render(0, 16, "watercolor").is_err());
}

#[test]
fn weights_cover_every_task_and_sum_to_one() {
    assert_eq!(task_keys().len(), 9);
    let text = task_weights("depth map to image").unwrap();
    let rows: Vec<(&str, f64)> = text
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[0].0, "depth");
    let s: f64 = rows.iter().map(|r| r.1).sum();
    assert!((s - 1.0).abs() < 0.01, "{s}");
}
