//! PNG output for frames and frame strips.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::data::Frame;
use crate::error::{invalid, Error, Result};

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        frame.width() as u32,
        frame.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(frame.pixels())?;
    writer.finish()?;
    Ok(())
}

/// Places equally sized frames side by side.
pub fn hstack(frames: &[Frame]) -> Result<Frame> {
    let first = frames.first().ok_or_else(|| invalid("no frames to stack"))?;
    let (h, w) = (first.height(), first.width());
    if frames.iter().any(|f| f.height() != h || f.width() != w) {
        return Err(invalid("frames differ in size"));
    }
    let total = w * frames.len();
    let mut pixels = vec![0u8; h * total * 3];
    for (k, f) in frames.iter().enumerate() {
        for y in 0..h {
            let dst = (y * total + k * w) * 3;
            pixels[dst..dst + w * 3].copy_from_slice(&f.pixels()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Frame::new(h, total, pixels)
}

/// Nearest-neighbour upscaling by an integer factor.
pub fn upscale(frame: &Frame, factor: usize) -> Result<Frame> {
    if factor == 0 {
        return Err(invalid("upscale factor must be positive"));
    }
    let (h, w) = (frame.height() * factor, frame.width() * factor);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            pixels.extend_from_slice(&frame.pixel(y / factor, x / factor));
        }
    }
    Frame::new(h, w, pixels)
}
