//! Minimal chart rendering: loss curves and per-class Dice bars drawn
//! straight into PNG buffers with a tiny built-in 3x5 font.

use std::path::Path;

use image::{Rgb, RgbImage};
use mtuda_core::error::{Error, Result};
use mtuda_core::metrics::EvalReport;
use mtuda_core::trainer::StepReport;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// 3x5 glyphs, one u8 of row bits (msb = left pixel) per row.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' | 'O' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b111, 0b101, 0b101, 0b111, 0b001],
        'R' => [0b110, 0b101, 0b110, 0b110, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        _ => [0b000; 5],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas {
            img: RgbImage::from_pixel(w, h, BG),
        }
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
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

    fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        let scale = 2i64;
        let mut cx = x;
        for c in s.chars() {
            let g = glyph(c);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.fill_rect(
                            cx + col as i64 * scale,
                            y + row as i64 * scale,
                            scale,
                            scale,
                            color,
                        );
                    }
                }
            }
            cx += 4 * scale;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| Error::runtime(format!("write {}: {e}", path.display())))
    }
}

fn nice_label(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

/// Loss curves (seg / kd / con / total) over training steps.
pub fn loss_curves(steps: &[StepReport], path: &Path) -> Result<()> {
    let (w, h) = (720u32, 420u32);
    let (ml, mr, mt, mb) = (70i64, 15i64, 30i64, 40i64);
    let mut canvas = Canvas::new(w, h);
    let series: [(&str, Box<dyn Fn(&StepReport) -> f64>); 4] = [
        ("SEG", Box::new(|r| r.seg)),
        ("KD", Box::new(|r| r.kd)),
        ("CON", Box::new(|r| r.con)),
        ("TOTAL", Box::new(|r| r.total)),
    ];
    let mut ymax = f64::MIN;
    let mut ymin = f64::MAX;
    for (_, f) in &series {
        for r in steps {
            ymax = ymax.max(f(r));
            ymin = ymin.min(f(r));
        }
    }
    if !(ymax > ymin) {
        ymax = ymin + 1.0;
    }
    let (x0, x1) = (ml, w as i64 - mr);
    let (y0, y1) = (h as i64 - mb, mt);
    let xmax = (steps.len() - 1).max(1) as f64;
    let to_x = |i: usize| x0 + ((i as f64 / xmax) * (x1 - x0) as f64) as i64;
    let to_y = |v: f64| y0 - (((v - ymin) / (ymax - ymin)) * (y0 - y1) as f64) as i64;

    for k in 0..=4 {
        let gy = y1 + (y0 - y1) * k / 4;
        canvas.line(x0, gy, x1, gy, GRID);
        let v = ymax - (ymax - ymin) * k as f64 / 4.0;
        canvas.text(4, gy - 5, &nice_label(v), INK);
    }
    canvas.line(x0, y0, x1, y0, INK);
    canvas.line(x0, y0, x0, y1, INK);
    canvas.text(x0, h as i64 - mb + 8, "0", INK);
    canvas.text(x1 - 30, h as i64 - mb + 8, &format!("{}", steps.len() - 1), INK);
    canvas.text(x0 + 150, 8, "TRAINING LOSSES / STEP", INK);

    for (si, (name, f)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for i in 1..steps.len() {
            canvas.line(
                to_x(i - 1),
                to_y(f(&steps[i - 1])),
                to_x(i),
                to_y(f(&steps[i])),
                color,
            );
        }
        let lx = x0 + 10 + si as i64 * 110;
        canvas.fill_rect(lx, y1 - 18, 10, 10, color);
        canvas.text(lx + 14, y1 - 18, name, INK);
    }
    canvas.save(path)
}

/// Grouped per-class Dice bars, one color per labeled report.
pub fn dice_bars(reports: &[(String, EvalReport)], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::validation("dice_bars: no reports"));
    }
    let classes: Vec<String> = reports[0]
        .1
        .per_class
        .iter()
        .map(|c| c.class.clone())
        .chain(std::iter::once("AVG".to_string()))
        .collect();
    let (w, h) = (720u32, 420u32);
    let (ml, mr, mt, mb) = (70i64, 15i64, 40i64, 50i64);
    let mut canvas = Canvas::new(w, h);
    let (x0, x1) = (ml, w as i64 - mr);
    let (y0, y1) = (h as i64 - mb, mt);
    for k in 0..=5 {
        let gy = y1 + (y0 - y1) * k / 5;
        canvas.line(x0, gy, x1, gy, GRID);
        canvas.text(4, gy - 5, &nice_label(1.0 - k as f64 / 5.0), INK);
    }
    canvas.line(x0, y0, x1, y0, INK);
    canvas.line(x0, y0, x0, y1, INK);
    canvas.text(x0 + 180, 8, "DICE PER CLASS", INK);

    let groups = classes.len() as i64;
    let group_w = (x1 - x0) / groups;
    let bar_w = ((group_w - 10) / reports.len() as i64).max(2);
    for (gi, class) in classes.iter().enumerate() {
        let gx = x0 + gi as i64 * group_w;
        canvas.text(gx + group_w / 2 - 12, y0 + 8, class, INK);
        for (ri, (label, report)) in reports.iter().enumerate() {
            let value = if class == "AVG" {
                report.mean_foreground_dice
            } else {
                report
                    .per_class
                    .iter()
                    .find(|c| &c.class == class)
                    .map(|c| c.dice)
                    .unwrap_or(0.0)
            };
            let bh = ((value.clamp(0.0, 1.0)) * (y0 - y1) as f64) as i64;
            let bx = gx + 5 + ri as i64 * bar_w;
            canvas.fill_rect(bx, y0 - bh, bar_w - 1, bh, PALETTE[ri % PALETTE.len()]);
            let _ = label;
        }
    }
    for (ri, (label, _)) in reports.iter().enumerate() {
        let lx = x0 + 10 + ri as i64 * 160;
        canvas.fill_rect(lx, y1 - 20, 10, 10, PALETTE[ri % PALETTE.len()]);
        canvas.text(lx + 14, y1 - 20, label, INK);
    }
    canvas.save(path)
}
