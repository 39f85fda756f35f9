use image::{Rgb, RgbImage};

use super::instance::InstanceRecord;
use crate::dataset::Label;
use crate::render;

fn class_color(label: Label) -> Rgb<u8> {
    match label {
        Label::BlackScurf => Rgb([40, 200, 255]),
        Label::CommonScab => Rgb([255, 60, 200]),
        Label::Healthy => Rgb([60, 220, 60]),
    }
}

/// Mask tint, box outline and score for each instance on `image`.
pub fn visualize(image: &RgbImage, instances: &[InstanceRecord]) -> RgbImage {
    let mut out = image.clone();
    for r in instances {
        let c = class_color(r.label);
        for y in 0..r.mask.height().min(out.height() as usize) {
            for x in 0..r.mask.width().min(out.width() as usize) {
                if r.mask.get(y, x) {
                    let p = out.get_pixel_mut(x as u32, y as u32);
                    *p = Rgb(std::array::from_fn(|k| ((u16::from(p[k]) + u16::from(c[k])) / 2) as u8));
                }
            }
        }
        let (x0, y0) = (r.bbox.x as i64, r.bbox.y as i64);
        let (x1, y1) = (x0 + r.bbox.w as i64 - 1, y0 + r.bbox.h as i64 - 1);
        for (a, b) in [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))] {
            render::draw_line(&mut out, a, b, c);
        }
        render::draw_text(&mut out, x0, (y0 - 7).max(0), &format!("{:.2}", r.score), 1, c);
    }
    out
}
