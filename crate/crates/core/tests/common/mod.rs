//! Fixture builders and reference implementations shared by the integration
//! tests. Nothing here calls into the library's geometry or NMS code.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

/// `[x_min, y_min, x_max, y_max]`.
pub type Rect = [f64; 4];

pub fn ref_iou(a: &Rect, b: &Rect) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn ref_rank(a: &(Rect, f64), b: &(Rect, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0[0].total_cmp(&b.0[0]))
        .then(a.0[1].total_cmp(&b.0[1]))
        .then(a.0[2].total_cmp(&b.0[2]))
        .then(a.0[3].total_cmp(&b.0[3]))
}

/// Greedy NMS by exhaustive pairwise IoU against every accepted box.
pub fn brute_force_nms(boxes: &[(Rect, f64)], threshold: f64) -> Vec<(Rect, f64)> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(ref_rank);
    let mut kept: Vec<(Rect, f64)> = Vec::new();
    for cand in sorted {
        if kept.iter().all(|k| ref_iou(&k.0, &cand.0) < threshold) {
            kept.push(cand);
        }
    }
    kept
}

/// Even-odd crossing test with an explicit boundary check.
pub fn ref_point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let within = p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1);
        if cross == 0.0 && within {
            return true;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Centers of `n` pairwise non-overlapping `size`-px squares lying fully inside
/// `width x height`. Returns fewer if rejection sampling stalls.
pub fn scatter_centers<R: Rng>(rng: &mut R, width: usize, height: usize, n: usize, size: f64) -> Vec<(f64, f64)> {
    let half = size / 2.0;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < n * 200 {
        attempts += 1;
        let c = (
            rng.gen_range(half..=width as f64 - half),
            rng.gen_range(half..=height as f64 - half),
        );
        if out
            .iter()
            .all(|o| (o.0 - c.0).abs() >= size || (o.1 - c.1).abs() >= size)
        {
            out.push(c);
        }
    }
    out
}

pub fn cowc_text(points: &[(f64, f64)]) -> String {
    let mut s = String::from("# x y\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x} {y}");
    }
    s
}

pub struct SceneSpec<'a> {
    pub scene_id: &'a str,
    pub location_id: &'a str,
    pub capture_date: &'a str,
    pub width: usize,
    pub height: usize,
}

pub fn manifest_text(scenes: &[SceneSpec]) -> String {
    let mut s = String::from("scene_id,location_id,capture_date,gsd_m,width,height,image_path\n");
    for sc in scenes {
        let _ = writeln!(
            s,
            "{},{},{},0.15,{},{},{}.png",
            sc.scene_id, sc.location_id, sc.capture_date, sc.width, sc.height, sc.scene_id
        );
    }
    s
}

/// `n` centers on a 40 px lattice starting at (20, 20), row-major.
pub fn lattice_centers(n: usize, width: usize) -> Vec<(f64, f64)> {
    let per_row = (width - 8) / 40;
    (0..n)
        .map(|i| (20.0 + 40.0 * (i % per_row) as f64, 20.0 + 40.0 * (i / per_row) as f64))
        .collect()
}

/// Dark noisy background with bright axis-aligned cars (30x15, either
/// orientation) separated by at least `gap` px. Returns the image and the
/// pixel-exact car rectangles.
pub fn parking_lot<R: Rng>(rng: &mut R, width: u32, height: u32, cars: usize, gap: u32) -> (RgbImage, Vec<Rect>) {
    let mut img = RgbImage::from_fn(width, height, |_, _| {
        let v = rng.gen_range(10u8..70);
        Rgb([v, v.saturating_add(rng.gen_range(0..10)), v])
    });
    let mut rects: Vec<[u32; 4]> = Vec::new();
    let mut attempts = 0;
    while rects.len() < cars && attempts < cars * 500 {
        attempts += 1;
        let (w, h) = if rng.gen_bool(0.5) { (30, 15) } else { (15, 30) };
        let x = rng.gen_range(0..=width - w);
        let y = rng.gen_range(0..=height - h);
        let r = [x, y, x + w, y + h];
        let clear = rects
            .iter()
            .all(|o| r[0] >= o[2] + gap || o[0] >= r[2] + gap || r[1] >= o[3] + gap || o[1] >= r[3] + gap);
        if clear {
            rects.push(r);
        }
    }
    for r in &rects {
        let paint = Rgb([
            rng.gen_range(180..=255),
            rng.gen_range(180..=255),
            rng.gen_range(180..=255),
        ]);
        for y in r[1]..r[3] {
            for x in r[0]..r[2] {
                img.put_pixel(x, y, paint);
            }
        }
    }
    let rects = rects.iter().map(|r| r.map(f64::from)).collect();
    (img, rects)
}

pub fn write(path: &Path, contents: &str) {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).unwrap();
    }
    fs::write(path, contents).unwrap();
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}
