//! Procedural figure generator standing in for a real scientific-figure dataset.
//!
//! Three template classes are drawn: architecture diagrams (filled boxes joined by arrows),
//! line plots (axes with polylines) and bar charts. Each caption starts with a class-specific
//! phrase, and each class has a distinct visual layout.

use rayon::prelude::*;

use super::FigureRecord;
use crate::imaging::Image;
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateClass {
    ArchitectureDiagram,
    LinePlot,
    BarChart,
}

impl TemplateClass {
    pub const ALL: [TemplateClass; 3] = [
        TemplateClass::ArchitectureDiagram,
        TemplateClass::LinePlot,
        TemplateClass::BarChart,
    ];

    fn prefix(self) -> &'static str {
        match self {
            TemplateClass::ArchitectureDiagram => "architecture diagram",
            TemplateClass::LinePlot => "line plot",
            TemplateClass::BarChart => "bar chart",
        }
    }

    /// Recovers the template class from a generated caption.
    pub fn of_caption(caption: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| caption.starts_with(c.prefix()))
    }
}

const INK: [f32; 3] = [0.08, 0.08, 0.1];
const PASTELS: [[f32; 3]; 5] = [
    [0.70, 0.82, 0.95],
    [0.98, 0.80, 0.62],
    [0.75, 0.90, 0.72],
    [0.93, 0.74, 0.80],
    [0.85, 0.80, 0.95],
];
const LINE_COLORS: [[f32; 3]; 4] = [
    [0.12, 0.40, 0.75],
    [0.85, 0.33, 0.10],
    [0.20, 0.60, 0.25],
    [0.60, 0.20, 0.60],
];
const BLOCK_KINDS: [&str; 6] = [
    "encoder",
    "decoder",
    "attention",
    "convolutional",
    "recurrent",
    "residual",
];
const METRICS: [&str; 6] = [
    "training loss",
    "validation accuracy",
    "reconstruction error",
    "throughput",
    "memory usage",
    "f1 score",
];
const AXES: [&str; 4] = ["epochs", "iterations", "model size", "batch size"];
const GROUPS: [&str; 4] = ["datasets", "baselines", "model variants", "languages"];

/// `n` deterministic records; record `i` depends only on `(seed, i)`.
pub fn synthesize_corpus(n: usize, seed: u64) -> Vec<FigureRecord> {
    (0..n)
        .into_par_iter()
        .map(|i| synthesize_one(seed, i))
        .collect()
}

fn synthesize_one(seed: u64, index: usize) -> FigureRecord {
    let mut rng = SeedStream::derive(seed, index as u64 + 1);
    let class = TemplateClass::ALL[rng.below(TemplateClass::ALL.len())];
    let width = 96 + rng.below(161);
    let ratio = (rng.range_f64(0.45f64.ln(), 2.2f64.ln())).exp();
    let height = ((width as f64 / ratio).round() as usize).clamp(32, 400);
    let mut img = Image::white(width, height);
    let caption = match class {
        TemplateClass::ArchitectureDiagram => draw_architecture(&mut img, &mut rng),
        TemplateClass::LinePlot => draw_line_plot(&mut img, &mut rng),
        TemplateClass::BarChart => draw_bar_chart(&mut img, &mut rng),
    };
    FigureRecord::new(format!("synth-{seed}-{index:05}"), img.quantized(), caption)
        .expect("generated captions are non-empty")
}

fn pick<'a, T>(rng: &mut SeedStream, items: &'a [T]) -> &'a T {
    &items[rng.below(items.len())]
}

fn draw_architecture(img: &mut Image, rng: &mut SeedStream) -> String {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let k = 2 + rng.below(5);
    let horizontal = w >= h;
    let (long, short) = if horizontal { (w, h) } else { (h, w) };
    let slot = long / k as i64;
    let box_long = (slot * 3 / 5).max(4);
    let box_short = (short / 2).max(6);
    let fill = *pick(rng, &PASTELS);
    let mut centers = Vec::with_capacity(k);
    for i in 0..k as i64 {
        let a0 = i * slot + (slot - box_long) / 2;
        let b0 = (short - box_short) / 2;
        let (x0, y0, bw, bh) = if horizontal {
            (a0, b0, box_long, box_short)
        } else {
            (b0, a0, box_short, box_long)
        };
        fill_rect(img, x0, y0, bw, bh, fill);
        rect_outline(img, x0, y0, bw, bh, INK);
        glyphs(img, rng, x0 + 2, y0 + bh / 2 - 2, (bw - 4).max(2));
        centers.push((x0, y0, bw, bh));
    }
    for pair in centers.windows(2) {
        let (ax, ay, aw, ah) = pair[0];
        let (bx, by, _, bh) = pair[1];
        if horizontal {
            arrow(img, ax + aw, ay + ah / 2, bx - 1, by + bh / 2, INK);
        } else {
            arrow(img, ax + aw / 2, ay + ah, ax + aw / 2, by - 1, INK);
        }
    }
    format!(
        "architecture diagram with {k} blocks showing the {} pipeline",
        pick(rng, &BLOCK_KINDS)
    )
}

fn axes(img: &mut Image, rng: &mut SeedStream) -> (i64, i64, i64, i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y1) = (w / 8 + 4, h - h / 8 - 4);
    let (x1, y0) = (w - w / 16 - 2, h / 12 + 2);
    line(img, x0, y0, x0, y1, INK);
    line(img, x0, y1, x1, y1, INK);
    let ticks = 4 + rng.below(3) as i64;
    for i in 1..=ticks {
        let tx = x0 + (x1 - x0) * i / ticks;
        line(img, tx, y1, tx, y1 + 2, INK);
        let ty = y1 - (y1 - y0) * i / ticks;
        line(img, x0 - 2, ty, x0, ty, INK);
    }
    glyphs(img, rng, x0 + (x1 - x0) / 3, y1 + 4, (x1 - x0) / 3);
    (x0, y0, x1, y1)
}

fn draw_line_plot(img: &mut Image, rng: &mut SeedStream) -> String {
    let (x0, y0, x1, y1) = axes(img, rng);
    let n_lines = 1 + rng.below(3);
    let points = 12;
    for l in 0..n_lines {
        let color = LINE_COLORS[l % LINE_COLORS.len()];
        let decay = rng.range_f64(0.5, 3.0);
        let offset = rng.range_f64(0.05, 0.3);
        let mut prev = None;
        for p in 0..=points {
            let u = p as f64 / points as f64;
            let v = offset + (1.0 - offset) * (-decay * u).exp() + 0.04 * rng.normal();
            let px = x0 + ((x1 - x0) as f64 * u) as i64;
            let py = y1 - ((y1 - y0) as f64 * v.clamp(0.0, 1.0)) as i64;
            if let Some((qx, qy)) = prev {
                line(img, qx, qy, px, py, color);
                line(img, qx, qy + 1, px, py + 1, color);
            }
            prev = Some((px, py));
        }
    }
    format!(
        "line plot of {} versus {} for {n_lines} methods",
        pick(rng, &METRICS),
        pick(rng, &AXES)
    )
}

fn draw_bar_chart(img: &mut Image, rng: &mut SeedStream) -> String {
    let (x0, y0, x1, y1) = axes(img, rng);
    let k = 2 + rng.below(5);
    let slot = (x1 - x0) / k as i64;
    for i in 0..k as i64 {
        let frac = rng.range_f64(0.2, 0.95);
        let bar_h = ((y1 - y0) as f64 * frac) as i64;
        let bx = x0 + i * slot + slot / 5;
        let bw = (slot * 3 / 5).max(1);
        let color = LINE_COLORS[i as usize % LINE_COLORS.len()];
        fill_rect(img, bx, y1 - bar_h, bw, bar_h, color);
    }
    format!(
        "bar chart comparing {} across {k} {}",
        pick(rng, &METRICS),
        pick(rng, &GROUPS)
    )
}

fn fill_rect(img: &mut Image, x0: i64, y0: i64, w: i64, h: i64, rgb: [f32; 3]) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.put_signed(x, y, rgb);
        }
    }
}

fn rect_outline(img: &mut Image, x0: i64, y0: i64, w: i64, h: i64, rgb: [f32; 3]) {
    let (x1, y1) = (x0 + w - 1, y0 + h - 1);
    line(img, x0, y0, x1, y0, rgb);
    line(img, x0, y1, x1, y1, rgb);
    line(img, x0, y0, x0, y1, rgb);
    line(img, x1, y0, x1, y1, rgb);
}

fn line(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f32; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.put_signed(x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn arrow(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f32; 3]) {
    line(img, x0, y0, x1, y1, rgb);
    let (dx, dy) = ((x1 - x0).signum(), (y1 - y0).signum());
    for s in 1..=3 {
        // head: two short strokes swept back from the tip
        img.put_signed(x1 - dx * s - dy * s, y1 - dy * s - dx * s, rgb);
        img.put_signed(x1 - dx * s + dy * s, y1 - dy * s + dx * s, rgb);
    }
}

/// Text-like strokes: a run of small glyph cells with random vertical/diagonal marks.
fn glyphs(img: &mut Image, rng: &mut SeedStream, x0: i64, y0: i64, span: i64) {
    let mut x = x0;
    while x + 3 <= x0 + span {
        match rng.below(4) {
            0 => line(img, x, y0, x, y0 + 4, INK),
            1 => line(img, x, y0 + 4, x + 2, y0, INK),
            2 => {
                line(img, x, y0, x + 2, y0, INK);
                line(img, x + 1, y0, x + 1, y0 + 4, INK);
            }
            _ => {}
        }
        x += 3 + rng.below(2) as i64;
    }
}
