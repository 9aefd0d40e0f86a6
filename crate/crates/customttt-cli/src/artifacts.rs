//! Video artifacts: the on-disk container form used between pipeline stages
//! and a GIF export for eyeballing samples.

use std::path::Path;

use customttt::container::Container;
use customttt::{Error, Result};
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgba, RgbaImage};
use ndarray::{Array4, Ix4};

/// Save a video tensor (frames, channels, height, width) with optional
/// provenance strings in the container metadata.
pub fn save_video(path: &Path, video: &Array4<f32>, meta: &[(&str, String)]) -> Result<()> {
    let mut c = Container::new();
    for (k, v) in meta {
        c.set_meta(k, v.clone());
    }
    c.insert("video", video);
    c.save(path)
}

pub fn load_video(path: &Path) -> Result<Array4<f32>> {
    let c = Container::load(path)?;
    let arr = c.get::<f32>("video")?;
    arr.into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape(format!("{}: video array is not 4-d", path.display())))
}

fn to_rgba_frame(video: &Array4<f32>, t: usize, scale: u32) -> Result<RgbaImage> {
    let (_, c, h, w) = video.dim();
    if c != 3 {
        return Err(Error::shape(format!(
            "gif export needs 3 channels, got {c}"
        )));
    }
    let (oh, ow) = (h as u32 * scale, w as u32 * scale);
    let mut img = RgbaImage::new(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, x) = ((oy / scale) as usize, (ox / scale) as usize);
            let px = |ch: usize| {
                let v = (video[(t, ch, y, x)].clamp(-1.0, 1.0) + 1.0) / 2.0;
                (v * 255.0).round() as u8
            };
            img.put_pixel(ox, oy, Rgba([px(0), px(1), px(2), 255]));
        }
    }
    Ok(img)
}

/// Export a value-range [-1, 1] video as a looping GIF, upscaled with
/// nearest-neighbour so the tiny frames are visible.
pub fn save_gif(path: &Path, video: &Array4<f32>, scale: u32) -> Result<()> {
    let frames = video.dim().0;
    if frames == 0 || scale == 0 {
        return Err(Error::shape("gif export needs frames >= 1 and scale >= 1"));
    }
    let file = std::fs::File::create(path)?;
    let mut enc = GifEncoder::new(std::io::BufWriter::new(file));
    let io_err = |e: image::ImageError| Error::Io(std::io::Error::other(e.to_string()));
    enc.set_repeat(Repeat::Infinite).map_err(io_err)?;
    for t in 0..frames {
        let img = to_rgba_frame(video, t, scale)?;
        let frame = Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(120, 1));
        enc.encode_frame(frame).map_err(io_err)?;
    }
    Ok(())
}
