//! PNG rendering of CAMs and overlays (8-bit RGB, no alpha channel).
//!
//! Channel values are computed in `f64` and quantized with round-half-up,
//! `floor(x + 0.5)`, so output bytes are reproducible across platforms.

use std::io::Cursor;

use crate::archive::InputImage;
use crate::campipe::{resize_spatial, CamResult, ScaleMode};
use crate::error::{IfaError, Result};
use crate::schemes::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMap {
    /// `-1 -> (0,0,255)`, `0 -> (255,255,255)`, `+1 -> (255,0,0)`.
    Diverging,
    /// `0 -> (0,0,0)`, `1 -> (255,0,0)`.
    Sequential,
}

impl ColorMap {
    /// Default map for a scale mode. Raw maps are shown diverging after
    /// division by their largest magnitude.
    pub fn for_mode(mode: ScaleMode) -> Self {
        match mode {
            ScaleMode::Individual => ColorMap::Sequential,
            ScaleMode::Common | ScaleMode::Raw => ColorMap::Diverging,
        }
    }

    /// Unquantized channel values in `[0, 255]`.
    pub fn color(self, v: f64) -> [f64; 3] {
        match self {
            ColorMap::Diverging => {
                let v = v.clamp(-1.0, 1.0);
                if v < 0.0 {
                    let t = 255.0 * (v + 1.0);
                    [t, t, 255.0]
                } else {
                    let t = 255.0 * (1.0 - v);
                    [255.0, t, t]
                }
            }
            ColorMap::Sequential => [255.0 * v.clamp(0.0, 1.0), 0.0, 0.0],
        }
    }

    pub fn rgb(self, v: f64) -> [u8; 3] {
        self.color(v).map(quantize)
    }
}

pub fn quantize(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// RGB8 rows to PNG bytes.
pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(IfaError::InvalidArgument(
            "pixel buffer does not match image size".into(),
        ));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| IfaError::Invariant(format!("png encoding failed: {e}")))?;
        w.write_image_data(rgb)
            .map_err(|e| IfaError::Invariant(format!("png encoding failed: {e}")))?;
    }
    Ok(out)
}

fn display_values(map: &[f64], mode: ScaleMode) -> Vec<f64> {
    if mode != ScaleMode::Raw {
        return map.to_vec();
    }
    let peak = map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        map.to_vec()
    } else {
        map.iter().map(|v| v / peak).collect()
    }
}

fn colorize(map: &[f64], cmap: ColorMap) -> Vec<[f64; 3]> {
    map.iter().map(|&v| cmap.color(v)).collect()
}

/// Renders a 2D map, one pixel per cell.
pub fn render_map(map: &[f64], dims: &[usize], mode: ScaleMode, cmap: ColorMap) -> Result<Vec<u8>> {
    let [h, w] = dims[..] else {
        return Err(IfaError::Unsupported(format!("rendering rank-{} maps", dims.len())));
    };
    if map.len() != h * w {
        return Err(IfaError::InvalidArgument("map size does not match dims".into()));
    }
    let rgb: Vec<u8> = colorize(&display_values(map, mode), cmap)
        .into_iter()
        .flat_map(|c| c.map(quantize))
        .collect();
    encode_png(w, h, &rgb)
}

fn cam_values(cam: &CamResult) -> Vec<f64> {
    cam.map.iter().map(|&v| v as f64).collect()
}

pub fn render_cam(cam: &CamResult, cmap: Option<ColorMap>) -> Result<Vec<u8>> {
    let cmap = cmap.unwrap_or(ColorMap::for_mode(cam.scale_mode));
    render_map(&cam_values(cam), &[cam.dims.0, cam.dims.1], cam.scale_mode, cmap)
}

/// Grayscale channel values of an input image, in `[0, 255]`.
/// Three-channel inputs use Rec. 601 luma.
fn grayscale(input: &InputImage) -> Result<Vec<f64>> {
    let n = input.height * input.width;
    match input.channels {
        1 => Ok(input.data.iter().map(|&v| 255.0 * (v as f64).clamp(0.0, 1.0)).collect()),
        3 => Ok((0..n)
            .map(|i| {
                let [r, g, b] = [0, 1, 2].map(|c| (input.data[c * n + i] as f64).clamp(0.0, 1.0));
                255.0 * (0.299 * r + 0.587 * g + 0.114 * b)
            })
            .collect()),
        c => Err(IfaError::Unsupported(format!("overlay on {c}-channel inputs"))),
    }
}

/// `alpha * colormap(cam) + (1 - alpha) * grayscale(input)`, with the CAM
/// resized to the input size.
pub fn overlay(cam: &CamResult, input: &InputImage, alpha: f64, cmap: Option<ColorMap>) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IfaError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let cmap = cmap.unwrap_or(ColorMap::for_mode(cam.scale_mode));
    let (h, w) = (input.height, input.width);
    let resized = resize_spatial(&cam_values(cam), &[cam.dims.0, cam.dims.1], (h, w))?;
    let colors = colorize(&display_values(&resized, cam.scale_mode), cmap);
    let gray = grayscale(input)?;
    let rgb: Vec<u8> = colors
        .iter()
        .zip(&gray)
        .flat_map(|(c, &g)| c.map(|v| quantize(alpha * v + (1.0 - alpha) * g)))
        .collect();
    encode_png(w, h, &rgb)
}

/// `<sample_id>_<class>_<scheme>_<mode>.png`
pub fn png_file_name(sample_id: u64, class_id: i32, scheme: Scheme, mode: ScaleMode) -> String {
    format!("{sample_id}_{class_id}_{}_{}.png", scheme.name(), mode.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
        let dec = png::Decoder::new(Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(info.color_type, png::ColorType::Rgb);
        buf.truncate(info.buffer_size());
        (info.width, info.height, buf)
    }

    fn cam(mode: ScaleMode, dims: (usize, usize), map: Vec<f32>) -> CamResult {
        CamResult {
            sample_id: 1,
            class_id: 0,
            scheme: Scheme::GradCam,
            scale_mode: mode,
            mask: None,
            dims,
            sum: map.iter().map(|&v| v as f64).sum(),
            map,
        }
    }

    #[test]
    fn control_points() {
        assert_eq!(ColorMap::Diverging.rgb(-1.0), [0, 0, 255]);
        assert_eq!(ColorMap::Diverging.rgb(0.0), [255, 255, 255]);
        assert_eq!(ColorMap::Diverging.rgb(1.0), [255, 0, 0]);
        assert_eq!(ColorMap::Diverging.rgb(0.5), [255, 128, 128]);
        assert_eq!(ColorMap::Diverging.rgb(7.0), [255, 0, 0]);
        assert_eq!(ColorMap::Sequential.rgb(0.0), [0, 0, 0]);
        assert_eq!(ColorMap::Sequential.rgb(1.0), [255, 0, 0]);
    }

    #[test]
    fn constant_maps() {
        let (w, h, px) = decode(&render_cam(&cam(ScaleMode::Common, (2, 3), vec![0.0; 6]), None).unwrap());
        assert_eq!((w, h), (3, 2));
        assert!(px.iter().all(|&b| b == 255));
        let (_, _, px) = decode(&render_cam(&cam(ScaleMode::Individual, (2, 2), vec![1.0; 4]), None).unwrap());
        assert_eq!(px, [255, 0, 0].repeat(4));
    }

    #[test]
    fn overlay_blends() {
        let c = cam(ScaleMode::Common, (1, 1), vec![0.0]);
        let black = InputImage {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![0.0; 4],
        };
        let (_, _, px) = decode(&overlay(&c, &black, 0.5, None).unwrap());
        assert_eq!(px, vec![128; 12]);
        let img = InputImage {
            channels: 1,
            height: 1,
            width: 2,
            data: vec![0.25, 1.0],
        };
        let c2 = cam(ScaleMode::Common, (1, 2), vec![-0.3, 0.8]);
        let (_, _, px) = decode(&overlay(&c2, &img, 0.0, None).unwrap());
        assert_eq!(px, vec![64, 64, 64, 255, 255, 255]);
        assert_eq!(overlay(&c2, &img, 1.0, None).unwrap(), render_cam(&c2, None).unwrap());
    }

    #[test]
    fn rank_three_is_rejected() {
        assert!(matches!(
            render_map(&[0.0; 8], &[2, 2, 2], ScaleMode::Common, ColorMap::Diverging),
            Err(IfaError::Unsupported(_))
        ));
    }

    #[test]
    fn red_channel_monotone() {
        let mut last = 0;
        for i in 0..=400 {
            let r = ColorMap::Diverging.rgb(-2.0 + i as f64 / 100.0)[0];
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn file_names() {
        assert_eq!(
            png_file_name(7, 1, Scheme::GradCamPlusPlus, ScaleMode::Common),
            "7_1_grad-cam++_common.png"
        );
    }
}
