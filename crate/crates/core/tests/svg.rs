use base64::Engine;

use mdet_core::bench::report::render_svg;
use mdet_core::bench::{fit_loglog, ComplexityModel, CostArgs, Family, ScalingRun};
use mdet_core::commands::prune_svg;
use mdet_core::pruner::select_topk;
use mdet_core::tokenizer::PatchGrid;

fn run(name: &str, sizes: &[usize], secs: &[f64]) -> ScalingRun {
    let xs: Vec<f64> = sizes.iter().map(|&t| t as f64).collect();
    ScalingRun {
        kernel: name.into(),
        sizes: sizes.to_vec(),
        median_seconds: secs.to_vec(),
        peak_bytes: sizes.iter().map(|t| t * 8).collect(),
        fit: fit_loglog(&xs, secs),
    }
}

fn points(s: &str) -> Vec<(f64, f64)> {
    s.split_whitespace()
        .map(|p| {
            let p = p.trim_start_matches(['M', 'L']);
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn scaling_chart_is_well_formed() {
    let sizes = [1024, 2048, 4096, 8192];
    let runs = [
        run("ssm_scan_seq", &sizes, &[1e-3, 2e-3, 4e-3, 8e-3]),
        run("dense_attention", &sizes, &[1e-3, 4e-3, 1.6e-2, 6.4e-2]),
    ];
    let models =
        [Family::Transformer, Family::Mamba, Family::Cnn].map(|family| ComplexityModel { family });
    let args = CostArgs {
        tokens: 0.0,
        dim: 64.0,
        height: 0.0,
        patch: 16.0,
        kernel: 3.0,
        state: 16.0,
    };
    let text = render_svg(&runs, &models, &args);
    let doc = roxmltree::Document::parse(&text).unwrap();
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    let width: f64 = root.attribute("width").unwrap().parse().unwrap();
    let height: f64 = root.attribute("height").unwrap().parse().unwrap();

    let lines: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .collect();
    assert_eq!(lines.len(), 2);
    for (node, r) in lines.iter().zip(&runs) {
        assert_eq!(node.attribute("data-kernel"), Some(r.kernel.as_str()));
        let pts = points(node.attribute("points").unwrap());
        assert_eq!(pts.len(), sizes.len());
        assert!(pts.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1));
        assert!(pts
            .iter()
            .all(|&(x, y)| (0.0..=width).contains(&x) && (0.0..=height).contains(&y)));
    }

    let paths: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("path"))
        .collect();
    let names: Vec<_> = paths
        .iter()
        .map(|n| n.attribute("data-model").unwrap())
        .collect();
    assert_eq!(names, ["transformer", "mamba", "cnn"]);
    for p in &paths {
        assert!(points(p.attribute("d").unwrap())
            .iter()
            .all(|&(x, _)| (0.0..=width).contains(&x)));
    }
    let labels: Vec<String> = doc
        .descendants()
        .filter(|n| n.has_tag_name("text"))
        .filter_map(|n| n.text().map(str::to_string))
        .collect();
    assert!(labels
        .iter()
        .any(|l| l.starts_with("ssm_scan_seq (slope 1.00)")));
    assert!(labels
        .iter()
        .any(|l| l.starts_with("dense_attention (slope 2.00)")));
}

#[test]
fn prune_overlay_tiles_the_image() {
    let grid = PatchGrid::new(48, 80, 16).unwrap();
    let scores: Vec<f64> = (0..grid.tokens())
        .map(|i| ((i * 7) % 11) as f64 / 11.0)
        .collect();
    let decision = select_topk(&scores, 0.4).unwrap();
    let png = b"\x89PNG not really";
    let text = prune_svg(png, &grid, &decision);
    let doc = roxmltree::Document::parse(&text).unwrap();

    let image = doc.descendants().find(|n| n.has_tag_name("image")).unwrap();
    let href = image
        .attribute(("http://www.w3.org/1999/xlink", "href"))
        .unwrap();
    let payload = href.strip_prefix("data:image/png;base64,").unwrap();
    assert_eq!(
        base64::engine::general_purpose::STANDARD
            .decode(payload)
            .unwrap(),
        png
    );

    let mut covered = vec![0u8; 48 * 80];
    let mut kept = Vec::new();
    for rect in doc.descendants().filter(|n| n.has_tag_name("rect")) {
        let v = |k: &str| -> usize { rect.attribute(k).unwrap().parse().unwrap() };
        let (x, y, w, h) = (v("x"), v("y"), v("width"), v("height"));
        for r in y..y + h {
            for c in x..x + w {
                covered[r * 80 + c] += 1;
            }
        }
        if rect.attribute("class") == Some("kept") {
            kept.push((y / 16) * 5 + x / 16);
        }
    }
    assert!(covered.iter().all(|&n| n == 1));
    assert_eq!(kept, decision.kept);
}
