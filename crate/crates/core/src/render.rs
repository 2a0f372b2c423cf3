//! Heatmap overlays and per-conversation HTML reports.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use base64::Engine as _;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{FeatureDump, FrameSlot};
use crate::fuse::MultimodalMap;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("map of {map} cells does not fit a {height}x{width} grid over a {image_w}x{image_h} image")]
    DimensionIncompatible {
        map: usize,
        height: usize,
        width: usize,
        image_w: u32,
        image_h: u32,
    },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("video rendering needs more than one frame")]
    NotVideo,
    #[error("frame {0} has no source image")]
    MissingImage(usize),
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Color ramps; both run from cold blue to warm red.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    /// Diverging blue-grey-red ramp.
    CoolWarm,
    /// Straight blue to red interpolation.
    BlueRed,
}

const COOLWARM: [[f64; 3]; 5] = [
    [59.0, 76.0, 192.0],
    [141.0, 176.0, 254.0],
    [221.0, 221.0, 221.0],
    [244.0, 154.0, 123.0],
    [180.0, 4.0, 38.0],
];

const BLUERED: [[f64; 3]; 2] = [[0.0, 0.0, 255.0], [255.0, 0.0, 0.0]];

impl Colormap {
    fn stops(self) -> &'static [[f64; 3]] {
        match self {
            Colormap::CoolWarm => &COOLWARM,
            Colormap::BlueRed => &BLUERED,
        }
    }

    /// Color of `v` in `[0, 1]`; values outside are clamped.
    pub fn color(self, v: f64) -> [u8; 3] {
        let stops = self.stops();
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let pos = v * (stops.len() - 1) as f64;
        let i = (pos.floor() as usize).min(stops.len() - 2);
        let t = pos - i as f64;
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (stops[i][c] + t * (stops[i + 1][c] - stops[i][c])).round() as u8;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub colormap: Colormap,
    /// Overlay opacity at a map value of 1.
    pub alpha: f64,
    /// Width and height of the blank canvas used when a frame has no image.
    pub canvas_cell: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            colormap: Colormap::CoolWarm,
            alpha: 0.6,
            canvas_cell: 16,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(RenderError::BadAlpha(self.alpha))
        }
    }
}

/// Bilinear resize of an `h x w` map to `out_h x out_w`, pixel centers aligned.
pub fn upscale_bilinear(values: &[f64], h: usize, w: usize, out_h: u32, out_w: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h as usize * out_w as usize);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = values[y0 * w + x0] * (1.0 - tx) + values[y0 * w + x1] * tx;
            let bottom = values[y1 * w + x0] * (1.0 - tx) + values[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Composites an `h x w` map over `image`. Per-pixel opacity is `alpha * v`,
/// so zero cells leave the image untouched.
pub fn render_overlay(
    map: &[f64],
    height: usize,
    width: usize,
    image: &RgbImage,
    cfg: &RenderConfig,
) -> Result<RgbImage, RenderError> {
    cfg.validate()?;
    let (iw, ih) = image.dimensions();
    if map.len() != height * width || map.is_empty() || iw == 0 || ih == 0 {
        return Err(RenderError::DimensionIncompatible {
            map: map.len(),
            height,
            width,
            image_w: iw,
            image_h: ih,
        });
    }
    let up = upscale_bilinear(map, height, width, ih, iw);
    let mut out = image.clone();
    for (px, &v) in out.pixels_mut().zip(&up) {
        let v = v.clamp(0.0, 1.0);
        let a = cfg.alpha * v;
        if a == 0.0 {
            continue;
        }
        let c = cfg.colormap.color(v);
        for (dst, &src) in px.0.iter_mut().zip(&c) {
            *dst = ((1.0 - a) * *dst as f64 + a * src as f64).round() as u8;
        }
    }
    Ok(out)
}

/// Neutral grey background for frames without a source image.
pub fn blank_canvas(slot: &FrameSlot, cfg: &RenderConfig) -> RgbImage {
    RgbImage::from_pixel(
        slot.width as u32 * cfg.canvas_cell,
        slot.height as u32 * cfg.canvas_cell,
        Rgb([128, 128, 128]),
    )
}

/// Source image for `frame`, or a blank canvas when the dump lists none.
pub fn frame_image(
    dump: &FeatureDump,
    base_dir: &Path,
    slot: &FrameSlot,
    cfg: &RenderConfig,
) -> Result<RgbImage, RenderError> {
    if dump.image_refs.is_empty() {
        return Ok(blank_canvas(slot, cfg));
    }
    let rel = dump
        .image_refs
        .get(slot.frame)
        .ok_or(RenderError::MissingImage(slot.frame))?;
    let path = base_dir.join(rel);
    image::open(&path)
        .map(|img| img.into_rgb8())
        .map_err(|source| RenderError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// One overlay per frame of `map`.
pub fn render_frames(
    dump: &FeatureDump,
    base_dir: &Path,
    map: &MultimodalMap,
    cfg: &RenderConfig,
) -> Result<Vec<RgbImage>, RenderError> {
    dump.layout
        .frames()
        .iter()
        .map(|slot| {
            let img = frame_image(dump, base_dir, slot, cfg)?;
            render_overlay(&map.visual[slot.range()], slot.height, slot.width, &img, cfg)
        })
        .collect()
}

/// Per-frame overlays of a clip; the dump must have more than one frame.
pub fn render_video(
    dump: &FeatureDump,
    base_dir: &Path,
    map: &MultimodalMap,
    cfg: &RenderConfig,
) -> Result<Vec<RgbImage>, RenderError> {
    if dump.layout.frame_count() < 2 {
        return Err(RenderError::NotVideo);
    }
    render_frames(dump, base_dir, map, cfg)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, RenderError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| RenderError::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(buf.into_inner())
}

/// Lowercase ASCII slug of token text, for file names.
pub fn slug(text: &str) -> String {
    let s: String = text
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let s = s.trim_matches('-');
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if !(c == '-' && out.ends_with('-')) {
            out.push(c);
        }
    }
    if out.is_empty() {
        "tok".into()
    } else {
        out.chars().take(32).collect()
    }
}

/// File name of an overlay: `<token_index>_<slug>.png`, with `_f<frame>`
/// appended when the conversation has several frames.
pub fn overlay_file_name(token_index: usize, text: &str, frame: Option<usize>) -> String {
    match frame {
        Some(f) => format!("{token_index}_{}_f{f}.png", slug(text)),
        None => format!("{token_index}_{}.png", slug(text)),
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn css_color(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Self-contained HTML report: one section per answer token with its
/// overlays, the context tinted by relevance, the explained token outlined,
/// later tokens greyed, and candidate predictions when recorded.
pub fn render_report(
    title: &str,
    dump: &FeatureDump,
    base_dir: &Path,
    maps: &[MultimodalMap],
    cfg: &RenderConfig,
) -> Result<String, RenderError> {
    cfg.validate()?;
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>\n\
body{{font-family:sans-serif;margin:1.5em;}}\n\
section{{border-top:1px solid #ccc;padding:0.8em 0;}}\n\
.tok{{padding:0 2px;border-radius:3px;white-space:pre;}}\n\
.target{{outline:2px solid #000;}}\n\
.later{{color:#aaa;}}\n\
.frames img{{margin-right:4px;image-rendering:pixelated;}}\n\
table.cand td{{padding:0 0.6em;}}\n\
</style>\n</head>\n<body>\n<h1>{}</h1>\n",
        escape(title),
        escape(title)
    );
    let n_p = dump.n_prompt();
    for map in maps {
        let target = map.token_index;
        let token = dump.token(target);
        let _ = writeln!(
            html,
            "<section id=\"t{target}\">\n<h2>{} <small>(token {target})</small></h2>",
            escape(&token.text)
        );
        html.push_str("<div class=\"frames\">");
        for img in render_frames(dump, base_dir, map, cfg)? {
            let png = encode_png(&img)?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            let _ = write!(html, "<img alt=\"overlay\" src=\"data:image/png;base64,{b64}\">");
        }
        html.push_str("</div>\n<p class=\"text\">");
        for (k, t) in dump.tokens().enumerate() {
            let class_and_style = if k < target {
                let v = map.textual.get(k).copied().unwrap_or(0.0);
                format!(
                    "class=\"tok\" style=\"background:{}\" title=\"{v:.3}\"",
                    css_color(cfg.colormap.color(v))
                )
            } else if k == target {
                "class=\"tok target\"".to_string()
            } else {
                "class=\"tok later\"".to_string()
            };
            if k == n_p {
                html.push_str("<br>");
            }
            let _ = write!(html, "<span {class_and_style}>{}</span>", escape(&t.text));
        }
        html.push_str("</p>\n");
        if let Some(cands) = token.candidates.as_ref().filter(|c| !c.is_empty()) {
            html.push_str("<table class=\"cand\"><tr><th>candidate</th><th>confidence</th></tr>");
            for c in cands.iter().take(3) {
                let color = css_color(cfg.colormap.color(c.confidence as f64));
                let _ = write!(
                    html,
                    "<tr><td style=\"color:{color}\">{}</td><td>{:.3}</td></tr>",
                    escape(&c.text),
                    c.confidence
                );
            }
            html.push_str("</table>\n");
        }
        html.push_str("</section>\n");
    }
    html.push_str("</body>\n</html>\n");
    Ok(html)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormaps_are_monotone_in_warmth() {
        for cmap in [Colormap::CoolWarm, Colormap::BlueRed] {
            let mut prev = i32::MIN;
            for i in 0..=1000 {
                let c = cmap.color(i as f64 / 1000.0);
                let warmth = c[0] as i32 - c[2] as i32;
                // per-channel rounding may cost one unit
                assert!(warmth >= prev.saturating_sub(1), "{cmap:?} at {i}");
                prev = warmth;
            }
        }
    }

    #[test]
    fn zero_map_leaves_image_untouched() {
        let img = RgbImage::from_fn(8, 6, |x, y| Rgb([x as u8 * 10, y as u8 * 20, 77]));
        let out = render_overlay(&[0.0; 6], 2, 3, &img, &RenderConfig::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn output_matches_image_size() {
        let img = RgbImage::new(40, 30);
        let map = [0.0, 0.5, 1.0, 0.25];
        let out = render_overlay(&map, 2, 2, &img, &RenderConfig::default()).unwrap();
        assert_eq!(out.dimensions(), (40, 30));
    }

    #[test]
    fn incompatible_dimensions() {
        let img = RgbImage::new(4, 4);
        assert!(matches!(
            render_overlay(&[0.0; 5], 2, 2, &img, &RenderConfig::default()),
            Err(RenderError::DimensionIncompatible { .. })
        ));
        let cfg = RenderConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(matches!(render_overlay(&[0.0; 4], 2, 2, &img, &cfg), Err(RenderError::BadAlpha(_))));
    }

    #[test]
    fn bilinear_preserves_constants_and_corners() {
        let up = upscale_bilinear(&[0.3; 4], 2, 2, 5, 7);
        assert!(up.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let up = upscale_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[3], 1.0);
    }

    #[test]
    fn slugs_and_names() {
        assert_eq!(slug(" Dog's  tail"), "dog-s-tail");
        assert_eq!(slug("..."), "tok");
        assert_eq!(overlay_file_name(7, "cat", None), "7_cat.png");
        assert_eq!(overlay_file_name(7, "cat", Some(3)), "7_cat_f3.png");
    }

    #[test]
    fn escaping() {
        assert_eq!(escape("<a href=\"x\">&'"), "&lt;a href=&quot;x&quot;&gt;&amp;&#39;");
    }
}
